//! Proptest strategies for valid object modules.

use loom_core::wof::isa::{HostCall, Instr};
use loom_core::wof::{ObjectModule, SymbolEntry};
use proptest::prelude::*;

/// An instruction with jump targets and slots still symbolic: targets
/// index the function's instruction list, slots index the slot table.
#[derive(Clone, Debug)]
enum Draft {
    Plain(Instr),
    Jmp(usize),
    Jz(usize),
    Global(u8, usize),
    Call(usize, u8),
}

fn plain() -> impl Strategy<Value = Instr> {
    prop_oneof![
        Just(Instr::Halt),
        any::<i64>().prop_map(Instr::Push),
        Just(Instr::Drop),
        Just(Instr::Dup),
        Just(Instr::LoadM),
        Just(Instr::StoreM),
        (0u16..6).prop_map(Instr::LoadL),
        (0u16..6).prop_map(Instr::StoreL),
        Just(Instr::Add),
        Just(Instr::Sub),
        Just(Instr::Mul),
        Just(Instr::Divs),
        Just(Instr::Mod),
        Just(Instr::Eq),
        Just(Instr::Lt),
        Just(Instr::Gt),
        (0u8..4).prop_map(Instr::Ret),
        Just(Instr::Alloc),
        Just(Instr::Free),
        Just(Instr::Realloc),
        Just(Instr::Yield),
        (0..HostCall::ALL.len()).prop_map(|i| Instr::Host(HostCall::ALL[i].code())),
    ]
}

fn draft() -> impl Strategy<Value = Draft> {
    prop_oneof![
        6 => plain().prop_map(Draft::Plain),
        1 => any::<usize>().prop_map(Draft::Jmp),
        1 => any::<usize>().prop_map(Draft::Jz),
        2 => (0u8..3, any::<usize>()).prop_map(|(k, s)| Draft::Global(k, s)),
        1 => (any::<usize>(), 0u8..4).prop_map(|(s, a)| Draft::Call(s, a)),
    ]
}

fn lower(d: &Draft, starts: &[u32], slots: usize) -> Instr {
    let slot = |s: usize| (s % slots) as u16;
    let at = |t: usize| starts[t % starts.len()];
    match *d {
        Draft::Plain(i) => i,
        Draft::Jmp(t) => Instr::Jmp(at(t)),
        Draft::Jz(t) => Instr::Jz(at(t)),
        Draft::Global(0, s) => Instr::LoadG(slot(s)),
        Draft::Global(1, s) => Instr::StoreG(slot(s)),
        Draft::Global(_, s) => Instr::AddrG(slot(s)),
        Draft::Call(s, argc) => Instr::Call {
            slot: slot(s),
            argc,
        },
    }
}

#[derive(Clone, Debug)]
struct Shape {
    data: Vec<(u32, u32, bool, bool)>,
    tail_pad: u32,
    fill: Vec<u8>,
    functions: Vec<(Vec<Draft>, bool)>,
    imports: usize,
    order_seed: u64,
}

fn shape() -> impl Strategy<Value = Shape> {
    (
        prop::collection::vec(
            (0u32..3, 1u32..5, any::<bool>(), prop::bool::weighted(0.2)),
            0..5,
        ),
        0u32..3,
        prop::collection::vec(any::<u8>(), 0..96),
        prop::collection::vec((prop::collection::vec(draft(), 1..24), any::<bool>()), 0..4),
        0usize..4,
        any::<u64>(),
    )
        .prop_map(
            |(data, tail_pad, fill, functions, imports, order_seed)| Shape {
                data,
                tail_pad,
                fill,
                functions,
                imports,
                order_seed,
            },
        )
}

fn build(s: Shape) -> ObjectModule {
    let mut m = ObjectModule::new("");
    let mut cursor = 0u32;
    for (i, &(gap, cells, exported, tuple)) in s.data.iter().enumerate() {
        cursor += gap * 8;
        let mut sym = SymbolEntry::data(&format!("d{i}"), cursor, cells * 8);
        sym.exported = exported;
        sym.tuple_member = tuple;
        m.symbols.push(sym);
        cursor += cells * 8;
    }
    let len = (cursor + s.tail_pad * 8) as usize;
    m.data_template = (0..len)
        .map(|i| s.fill.get(i).copied().unwrap_or(0))
        .collect();

    // instruction offsets depend only on opcodes, so lay out first
    let mut offsets = Vec::new();
    let mut at = 0u32;
    for (body, _) in &s.functions {
        let mut starts = Vec::new();
        for d in body {
            starts.push(at);
            let mut tmp = Vec::new();
            lower(d, &[0], 1).encode(&mut tmp);
            at += tmp.len() as u32;
        }
        offsets.push(starts);
    }
    for i in 0..s.imports {
        m.imports.push(format!("imp{i}"));
    }
    let slots = (s.data.len() + s.functions.len() + s.imports).max(1);
    for (i, ((body, exported), starts)) in s.functions.iter().zip(&offsets).enumerate() {
        let mut f = SymbolEntry::function(&format!("f{i}"), starts[0]);
        f.exported = *exported;
        m.symbols.push(f);
        for d in body {
            lower(d, starts, slots).encode(&mut m.code);
        }
    }
    if slots > m.slot_count() {
        // a lone global reference with nothing to point at
        m.imports.push("extra".into());
    }
    // shuffle symbol order deterministically; slot numbers follow
    let mut order: Vec<usize> = (0..m.symbols.len()).collect();
    let mut x = s.order_seed | 1;
    for i in (1..order.len()).rev() {
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        order.swap(i, (x % (i as u64 + 1)) as usize);
    }
    m.symbols = order.iter().map(|&i| m.symbols[i].clone()).collect();
    m
}

/// Modules that pass validation.
pub fn object_module() -> impl Strategy<Value = ObjectModule> {
    shape().prop_map(build)
}
