//! Bytecode executor. Global data is reachable only through the GOT of the
//! string's weave; explicit addresses go through LOADM/STOREM and are
//! checked against the region table and the string's island.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::heap::{Heap, HeapError, Owner};
use crate::ids::{BeadId, IslandId, ModuleId, StringId};
use crate::registry::{Bead, ModuleDef};
use crate::strings::StringState;
use crate::vm::memory::{MemFault, VmMemory};
use crate::weaver::{GotEntry, Weave};
use crate::wof::isa::{self, DecodeError, HostCall, Instr};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrapReason {
    DivByZero,
    UnmappedAddress(u64),
    MisalignedAddress(u64),
    CrossIslandAccess(u64),
    StackUnderflow,
    StackOverflow,
    BadOpcode(u8),
    TruncatedInstruction,
    NotAFunction(u16),
    NotData(u16),
    SlotOutOfRange(u16),
    LocalOutOfRange(u16),
    BadHostCall(u8),
    BadSize(i64),
    Heap(HeapError),
}

impl fmt::Display for TrapReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrapReason::DivByZero => write!(f, "DivByZero"),
            TrapReason::UnmappedAddress(a) => write!(f, "UnmappedAddress({a:#x})"),
            TrapReason::MisalignedAddress(a) => write!(f, "MisalignedAddress({a:#x})"),
            TrapReason::CrossIslandAccess(a) => write!(f, "CrossIslandAccess({a:#x})"),
            TrapReason::StackUnderflow => write!(f, "StackUnderflow"),
            TrapReason::StackOverflow => write!(f, "StackOverflow"),
            TrapReason::BadOpcode(o) => write!(f, "BadOpcode({o:#04x})"),
            TrapReason::TruncatedInstruction => write!(f, "TruncatedInstruction"),
            TrapReason::NotAFunction(s) => write!(f, "NotAFunction({s})"),
            TrapReason::NotData(s) => write!(f, "NotData({s})"),
            TrapReason::SlotOutOfRange(s) => write!(f, "SlotOutOfRange({s})"),
            TrapReason::LocalOutOfRange(i) => write!(f, "LocalOutOfRange({i})"),
            TrapReason::BadHostCall(c) => write!(f, "BadHostCall({c})"),
            TrapReason::BadSize(n) => write!(f, "BadSize({n})"),
            TrapReason::Heap(e) => write!(f, "Heap({e})"),
        }
    }
}

impl From<MemFault> for TrapReason {
    fn from(f: MemFault) -> Self {
        match f {
            MemFault::Unmapped(a) => TrapReason::UnmappedAddress(a),
            MemFault::Misaligned(a) => TrapReason::MisalignedAddress(a),
            MemFault::CrossIsland(a) => TrapReason::CrossIslandAccess(a),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ExecStatus {
    Running,
    Yielded,
    Halted,
    Trapped(TrapReason),
    QuantumExpired,
}

impl ExecStatus {
    pub fn is_live(&self) -> bool {
        matches!(
            self,
            ExecStatus::Running | ExecStatus::Yielded | ExecStatus::QuantumExpired
        )
    }

    pub fn label(&self) -> String {
        match self {
            ExecStatus::Running => "running".into(),
            ExecStatus::Yielded => "yielded".into(),
            ExecStatus::Halted => "halted".into(),
            ExecStatus::Trapped(t) => format!("trapped:{t}"),
            ExecStatus::QuantumExpired => "preempted".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub module: ModuleId,
    /// Row of `module` in the weave's GOT.
    pub row: u32,
    pub object: u16,
    pub code_base: u32,
    pub slot_base: u32,
    /// Offset into the module's concatenated code.
    pub ip: u32,
    pub locals: Vec<i64>,
    /// Operand stack height at entry; the frame cannot pop below it.
    pub stack_base: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputValue {
    Int(i64),
    Char(u8),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OutputEvent {
    pub string: StringId,
    pub value: OutputValue,
}

pub fn render_output(events: &[OutputEvent]) -> String {
    let mut s = String::new();
    for e in events {
        match e.value {
            OutputValue::Int(v) => {
                s.push_str(&v.to_string());
                s.push('\n');
            }
            OutputValue::Char(c) => s.push(c as char),
        }
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Limits {
    pub max_stack: usize,
    pub max_frames: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_stack: 1 << 20,
            max_frames: 1 << 14,
        }
    }
}

/// Everything one string needs while it runs.
pub struct ExecEnv<'a> {
    pub modules: &'a [Arc<ModuleDef>],
    pub weave: &'a Weave,
    pub beads: &'a BTreeMap<BeadId, Bead>,
    pub mem: &'a mut VmMemory,
    pub heap: &'a mut Heap,
    pub epoch: &'a mut u64,
    pub output: &'a mut Vec<OutputEvent>,
    pub limits: Limits,
}

/// Builds the frame for entering `offset` of `module` through `weave`.
pub fn enter_frame(
    modules: &[Arc<ModuleDef>],
    weave: &Weave,
    module: ModuleId,
    offset: u32,
    args: &[i64],
    stack_base: u32,
) -> Option<Frame> {
    let def = modules.get(module.0 as usize)?;
    let func = def.function_at(offset)?;
    let row = *weave.row_of.get(&module)?;
    let layout = &def.layouts[func.object as usize];
    let mut locals = vec![0; (func.locals as usize).max(args.len())];
    locals[..args.len()].copy_from_slice(args);
    Some(Frame {
        module,
        row: row as u32,
        object: func.object,
        code_base: layout.code_base,
        slot_base: layout.slot_base,
        ip: offset,
        locals,
        stack_base,
    })
}

#[inline]
fn pop(stack: &mut Vec<i64>, base: u32) -> Result<i64, TrapReason> {
    if stack.len() <= base as usize {
        return Err(TrapReason::StackUnderflow);
    }
    Ok(stack.pop().expect("checked"))
}

#[inline]
fn got(env: &ExecEnv<'_>, frame: &Frame, slot: u16) -> Result<GotEntry, TrapReason> {
    let def = &env.modules[frame.module.0 as usize];
    let layout = &def.layouts[frame.object as usize];
    if u32::from(slot) >= layout.slot_count {
        return Err(TrapReason::SlotOutOfRange(slot));
    }
    Ok(env.weave.rows[frame.row as usize].entries[(frame.slot_base + u32::from(slot)) as usize])
}

#[inline]
fn got_data(env: &ExecEnv<'_>, frame: &Frame, slot: u16) -> Result<u64, TrapReason> {
    match got(env, frame, slot)? {
        GotEntry::Data(a) => Ok(a),
        GotEntry::Code { .. } => Err(TrapReason::NotData(slot)),
    }
}

/// Runs up to `fuel` instructions. Returns the stop reason and the number
/// of instructions consumed; a trapping instruction counts as consumed.
pub fn run_quantum(env: &mut ExecEnv<'_>, s: &mut StringState, fuel: u64) -> (ExecStatus, u64) {
    let mut used = 0;
    let status = loop {
        if used == fuel {
            break ExecStatus::QuantumExpired;
        }
        used += 1;
        s.instructions += 1;
        match step(env, s) {
            Ok(None) => {}
            Ok(Some(st)) => break st,
            Err(t) => break ExecStatus::Trapped(t),
        }
    };
    s.status = match &status {
        ExecStatus::QuantumExpired => ExecStatus::Running,
        other => other.clone(),
    };
    (status, used)
}

/// Executes one instruction.
pub fn step(env: &mut ExecEnv<'_>, s: &mut StringState) -> Result<Option<ExecStatus>, TrapReason> {
    let depth = s.frames.len();
    let Some(frame) = s.frames.last_mut() else {
        return Ok(Some(ExecStatus::Halted));
    };
    let at = frame.ip;
    let def = &env.modules[frame.module.0 as usize];
    let (instr, len) = isa::decode(&def.code, at as usize).map_err(|e| match e {
        DecodeError::BadOpcode(o) => TrapReason::BadOpcode(o),
        DecodeError::Truncated => TrapReason::TruncatedInstruction,
    })?;
    frame.ip = at + len as u32;
    let r = exec(env, s, instr);
    if r.is_err() && s.frames.len() == depth {
        s.frames[depth - 1].ip = at;
    }
    r
}

fn exec(
    env: &mut ExecEnv<'_>,
    s: &mut StringState,
    instr: Instr,
) -> Result<Option<ExecStatus>, TrapReason> {
    let frame = s.frames.last_mut().expect("caller checked");
    let base = frame.stack_base;
    let stack = &mut s.stack;
    macro_rules! push {
        ($v:expr) => {{
            if stack.len() >= env.limits.max_stack {
                return Err(TrapReason::StackOverflow);
            }
            stack.push($v);
        }};
    }
    macro_rules! binop {
        (|$a:ident, $b:ident| $e:expr) => {{
            let $b = pop(stack, base)?;
            let $a = pop(stack, base)?;
            push!($e);
        }};
    }
    match instr {
        Instr::Halt => return Ok(Some(ExecStatus::Halted)),
        Instr::Push(v) => push!(v),
        Instr::Drop => {
            pop(stack, base)?;
        }
        Instr::Dup => {
            let v = pop(stack, base)?;
            push!(v);
            push!(v);
        }
        Instr::LoadG(slot) => {
            let a = got_data(env, frame, slot)?;
            push!(env.mem.read_cell(a)?);
        }
        Instr::StoreG(slot) => {
            let a = got_data(env, frame, slot)?;
            let v = pop(stack, base)?;
            env.mem.write_cell(a, v)?;
        }
        Instr::AddrG(slot) => {
            let a = got_data(env, frame, slot)?;
            push!(a as i64);
        }
        Instr::LoadM => {
            let a = pop(stack, base)? as u64;
            env.mem.check_cell(a, s.island)?;
            push!(env.mem.read_cell(a)?);
        }
        Instr::StoreM => {
            let v = pop(stack, base)?;
            let a = pop(stack, base)? as u64;
            env.mem.check_cell(a, s.island)?;
            env.mem.write_cell(a, v)?;
        }
        Instr::LoadL(i) => {
            let v = *frame
                .locals
                .get(i as usize)
                .ok_or(TrapReason::LocalOutOfRange(i))?;
            push!(v);
        }
        Instr::StoreL(i) => {
            let v = pop(stack, base)?;
            *frame
                .locals
                .get_mut(i as usize)
                .ok_or(TrapReason::LocalOutOfRange(i))? = v;
        }
        Instr::Add => binop!(|a, b| a.wrapping_add(b)),
        Instr::Sub => binop!(|a, b| a.wrapping_sub(b)),
        Instr::Mul => binop!(|a, b| a.wrapping_mul(b)),
        Instr::Divs | Instr::Mod => {
            let b = pop(stack, base)?;
            let a = pop(stack, base)?;
            if b == 0 {
                return Err(TrapReason::DivByZero);
            }
            push!(if instr == Instr::Divs {
                a.wrapping_div(b)
            } else {
                a.wrapping_rem(b)
            });
        }
        Instr::Eq => binop!(|a, b| (a == b) as i64),
        Instr::Lt => binop!(|a, b| (a < b) as i64),
        Instr::Gt => binop!(|a, b| (a > b) as i64),
        Instr::Jmp(t) => frame.ip = frame.code_base + t,
        Instr::Jz(t) => {
            if pop(stack, base)? == 0 {
                frame.ip = frame.code_base + t;
            }
        }
        Instr::Call { slot, argc } => {
            let (module, offset) = match got(env, frame, slot)? {
                GotEntry::Code { module, offset } => (module, offset),
                GotEntry::Data(_) => return Err(TrapReason::NotAFunction(slot)),
            };
            let argc = argc as usize;
            if stack.len() < base as usize + argc {
                return Err(TrapReason::StackUnderflow);
            }
            if s.frames.len() >= env.limits.max_frames {
                return Err(TrapReason::StackOverflow);
            }
            let split = stack.len() - argc;
            let callee = enter_frame(
                env.modules,
                env.weave,
                module,
                offset,
                &stack[split..],
                split as u32,
            )
            .ok_or(TrapReason::NotAFunction(slot))?;
            stack.truncate(split);
            s.frames.push(callee);
        }
        Instr::Ret(n) => {
            let n = n as usize;
            if stack.len() < base as usize + n {
                return Err(TrapReason::StackUnderflow);
            }
            let top = stack.len() - n;
            stack.drain(base as usize..top);
            s.frames.pop();
            if s.frames.is_empty() {
                return Ok(Some(ExecStatus::Halted));
            }
        }
        Instr::Alloc => {
            let size = pop(stack, base)?;
            if size <= 0 {
                return Err(TrapReason::BadSize(size));
            }
            let bead = &env.beads[&env.weave.rows[frame.row as usize].bead];
            let owner = Owner {
                bead: bead.id,
                string: s.id,
                island: s.island,
            };
            let a = env
                .heap
                .halloc(env.mem, env.epoch, bead.node, size as u64, owner)
                .map_err(TrapReason::Heap)?;
            push!(a as i64);
        }
        Instr::Free => {
            let a = pop(stack, base)? as u64;
            check_owned(env.mem, a, s.island)?;
            env.heap.hfree(env.mem, a).map_err(TrapReason::Heap)?;
        }
        Instr::Realloc => {
            let size = pop(stack, base)?;
            let a = pop(stack, base)? as u64;
            if size <= 0 {
                return Err(TrapReason::BadSize(size));
            }
            check_owned(env.mem, a, s.island)?;
            let bead = &env.beads[&env.weave.rows[frame.row as usize].bead];
            let owner = Owner {
                bead: bead.id,
                string: s.id,
                island: s.island,
            };
            let b = env
                .heap
                .hrealloc(env.mem, env.epoch, a, size as u64, bead.node, owner)
                .map_err(TrapReason::Heap)?;
            push!(b as i64);
        }
        Instr::Yield => return Ok(Some(ExecStatus::Yielded)),
        Instr::Host(code) => {
            match HostCall::from_code(code).ok_or(TrapReason::BadHostCall(code))? {
                HostCall::PrintInt => {
                    let v = pop(stack, base)?;
                    env.output.push(OutputEvent {
                        string: s.id,
                        value: OutputValue::Int(v),
                    });
                }
                HostCall::PrintChar => {
                    let v = pop(stack, base)?;
                    env.output.push(OutputEvent {
                        string: s.id,
                        value: OutputValue::Char(v as u8),
                    });
                }
                HostCall::StringId => push!(s.id.0 as i64),
                HostCall::ClockTicks => push!(s.instructions as i64),
                HostCall::NodeId => {
                    let bead = &env.beads[&env.weave.rows[frame.row as usize].bead];
                    push!(bead.node.0 as i64);
                }
            }
        }
    }
    Ok(None)
}

/// Frees and reallocs may only target regions of the caller's island.
fn check_owned(mem: &VmMemory, addr: u64, island: IslandId) -> Result<(), TrapReason> {
    match mem.region_at(addr) {
        Some(r) if r.island != island => Err(TrapReason::CrossIslandAccess(addr)),
        _ => Ok(()),
    }
}
