//! Guest programs shared by the integration suites.

/// Allocates, writes, frees every other block and yields once per
/// iteration; local 0 is the iteration count.
pub const CHURN: &str = "\
.data sum 8
.data keep 8
func main:
loop:
    loadl 0
    jz done
    push 16
    alloc
    storel 1
    loadl 1
    loadl 0
    storem
    loadg sum
    loadl 1
    loadm
    add
    storeg sum
    loadg sum
    host print_int
    loadl 0
    push 2
    mod
    jz keepit
    loadl 1
    free
    jmp next
keepit:
    loadl 1
    storeg keep
next:
    loadl 0
    push 1
    sub
    storel 0
    yield
    jmp loop
done:
    halt
end
";

/// Stores a heap pointer in `p`, copies it to `p1`, and dereferences the
/// copy after every yield. Each round also allocates a fresh block and
/// leaves it live.
pub const ALIAS: &str = "\
.data p 8
.data p1 8
func main:
    push 8
    alloc
    dup
    storeg p
    push 100
    storem
    loadg p
    storeg p1
loop:
    loadl 0
    jz done
    yield
    loadg p1
    loadg p1
    loadm
    push 1
    add
    storem
    loadg p1
    loadm
    host print_int
    push 24
    alloc
    storel 1
    loadl 1
    loadl 0
    storem
    loadl 1
    loadm
    host print_int
    loadl 0
    push 1
    sub
    storel 0
    jmp loop
done:
    halt
end
";

/// One mutable global: each iteration reads it, yields, and writes back
/// the value plus one.
pub const COUNTER: &str = "\
.data count 8
func main:
loop:
    loadl 0
    jz done
    loadg count
    storel 1
    yield
    loadl 1
    push 1
    add
    storeg count
    loadg count
    host print_int
    loadl 0
    push 1
    sub
    storel 0
    jmp loop
done:
    halt
end
";
