//! Record codecs for runtime structures, shared by checkpoint files and
//! migration packages.

use std::collections::{BTreeMap, BTreeSet};

use crate::heap::{Heap, HeapError, NodePartition};
use crate::ids::{BeadId, IslandId, ModuleId, NodeId, StringId, WeaveId};
use crate::migrate::Island;
use crate::registry::{Bead, TupleStore};
use crate::strings::{SchedPolicy, SchedState, StringState};
use crate::vm::exec::{ExecStatus, Frame, TrapReason};
use crate::vm::memory::{new_page, PageBuf, Region, RegionKind, PAGE_SIZE};
use crate::weaver::{GotEntry, GotRow, Weave};
use crate::wire::{Reader, WireError, Writer};

type R<T> = Result<T, WireError>;

fn heap_error(w: &mut Writer, e: &HeapError) {
    match e {
        HeapError::ZeroSize => w.u8(0),
        HeapError::PartitionExhausted(n) => {
            w.u8(1);
            w.u32(n.0);
        }
        HeapError::UnknownNode(n) => {
            w.u8(2);
            w.u32(n.0);
        }
        HeapError::DoubleFree(a) => {
            w.u8(3);
            w.u64(*a);
        }
        HeapError::NotARegionStart(a) => {
            w.u8(4);
            w.u64(*a);
        }
        HeapError::AddressCollision(a) => {
            w.u8(5);
            w.u64(*a);
        }
    }
}

fn read_heap_error(r: &mut Reader<'_>) -> R<HeapError> {
    Ok(match r.u8()? {
        0 => HeapError::ZeroSize,
        1 => HeapError::PartitionExhausted(NodeId(r.u32()?)),
        2 => HeapError::UnknownNode(NodeId(r.u32()?)),
        3 => HeapError::DoubleFree(r.u64()?),
        4 => HeapError::NotARegionStart(r.u64()?),
        5 => HeapError::AddressCollision(r.u64()?),
        t => return Err(r.malformed(format!("heap error tag {t}"))),
    })
}

fn trap(w: &mut Writer, t: &TrapReason) {
    match t {
        TrapReason::DivByZero => w.u8(0),
        TrapReason::UnmappedAddress(a) => {
            w.u8(1);
            w.u64(*a);
        }
        TrapReason::MisalignedAddress(a) => {
            w.u8(2);
            w.u64(*a);
        }
        TrapReason::CrossIslandAccess(a) => {
            w.u8(3);
            w.u64(*a);
        }
        TrapReason::StackUnderflow => w.u8(4),
        TrapReason::StackOverflow => w.u8(5),
        TrapReason::BadOpcode(o) => {
            w.u8(6);
            w.u8(*o);
        }
        TrapReason::TruncatedInstruction => w.u8(7),
        TrapReason::NotAFunction(s) => {
            w.u8(8);
            w.u16(*s);
        }
        TrapReason::NotData(s) => {
            w.u8(9);
            w.u16(*s);
        }
        TrapReason::SlotOutOfRange(s) => {
            w.u8(10);
            w.u16(*s);
        }
        TrapReason::LocalOutOfRange(s) => {
            w.u8(11);
            w.u16(*s);
        }
        TrapReason::BadHostCall(c) => {
            w.u8(12);
            w.u8(*c);
        }
        TrapReason::BadSize(n) => {
            w.u8(13);
            w.i64(*n);
        }
        TrapReason::Heap(e) => {
            w.u8(14);
            heap_error(w, e);
        }
    }
}

fn read_trap(r: &mut Reader<'_>) -> R<TrapReason> {
    Ok(match r.u8()? {
        0 => TrapReason::DivByZero,
        1 => TrapReason::UnmappedAddress(r.u64()?),
        2 => TrapReason::MisalignedAddress(r.u64()?),
        3 => TrapReason::CrossIslandAccess(r.u64()?),
        4 => TrapReason::StackUnderflow,
        5 => TrapReason::StackOverflow,
        6 => TrapReason::BadOpcode(r.u8()?),
        7 => TrapReason::TruncatedInstruction,
        8 => TrapReason::NotAFunction(r.u16()?),
        9 => TrapReason::NotData(r.u16()?),
        10 => TrapReason::SlotOutOfRange(r.u16()?),
        11 => TrapReason::LocalOutOfRange(r.u16()?),
        12 => TrapReason::BadHostCall(r.u8()?),
        13 => TrapReason::BadSize(r.i64()?),
        14 => TrapReason::Heap(read_heap_error(r)?),
        t => return Err(r.malformed(format!("trap tag {t}"))),
    })
}

fn status(w: &mut Writer, s: &ExecStatus) {
    match s {
        ExecStatus::Running => w.u8(0),
        ExecStatus::Yielded => w.u8(1),
        ExecStatus::Halted => w.u8(2),
        ExecStatus::Trapped(t) => {
            w.u8(3);
            trap(w, t);
        }
        ExecStatus::QuantumExpired => w.u8(4),
    }
}

fn read_status(r: &mut Reader<'_>) -> R<ExecStatus> {
    Ok(match r.u8()? {
        0 => ExecStatus::Running,
        1 => ExecStatus::Yielded,
        2 => ExecStatus::Halted,
        3 => ExecStatus::Trapped(read_trap(r)?),
        4 => ExecStatus::QuantumExpired,
        t => return Err(r.malformed(format!("status tag {t}"))),
    })
}

fn frame(w: &mut Writer, f: &Frame) {
    w.u32(f.module.0);
    w.u32(f.row);
    w.u16(f.object);
    w.u32(f.code_base);
    w.u32(f.slot_base);
    w.u32(f.ip);
    w.u32(f.locals.len() as u32);
    for v in &f.locals {
        w.i64(*v);
    }
    w.u32(f.stack_base);
}

fn read_frame(r: &mut Reader<'_>) -> R<Frame> {
    let module = ModuleId(r.u32()?);
    let row = r.u32()?;
    let object = r.u16()?;
    let code_base = r.u32()?;
    let slot_base = r.u32()?;
    let ip = r.u32()?;
    let n = r.count(8)?;
    let locals = (0..n).map(|_| r.i64()).collect::<R<_>>()?;
    Ok(Frame {
        module,
        row,
        object,
        code_base,
        slot_base,
        ip,
        locals,
        stack_base: r.u32()?,
    })
}

pub(crate) fn string(w: &mut Writer, s: &StringState) {
    w.u64(s.id.0);
    w.str(&s.name);
    w.u64(s.weave.0);
    w.u32(s.island.0);
    w.str(&s.entry);
    w.u32(s.frames.len() as u32);
    for f in &s.frames {
        frame(w, f);
    }
    w.u32(s.stack.len() as u32);
    for v in &s.stack {
        w.i64(*v);
    }
    status(w, &s.status);
    w.u64(s.instructions);
}

pub(crate) fn read_string(r: &mut Reader<'_>) -> R<StringState> {
    let id = StringId(r.u64()?);
    let name = r.str()?;
    let weave = WeaveId(r.u64()?);
    let island = IslandId(r.u32()?);
    let entry = r.str()?;
    let nf = r.count(30)?;
    let frames = (0..nf).map(|_| read_frame(r)).collect::<R<_>>()?;
    let ns = r.count(8)?;
    let stack = (0..ns).map(|_| r.i64()).collect::<R<_>>()?;
    Ok(StringState {
        id,
        name,
        weave,
        island,
        entry,
        frames,
        stack,
        status: read_status(r)?,
        instructions: r.u64()?,
    })
}

pub(crate) fn weave(w: &mut Writer, v: &Weave) {
    w.u64(v.id.0);
    w.str(&v.name);
    w.u32(v.island.0);
    w.u32(v.beads.len() as u32);
    for b in &v.beads {
        w.u64(b.0);
    }
    w.u32(v.rows.len() as u32);
    for row in &v.rows {
        w.u32(row.module.0);
        w.u64(row.bead.0);
        w.u32(row.entries.len() as u32);
        for e in &row.entries {
            match e {
                GotEntry::Data(a) => {
                    w.u8(0);
                    w.u64(*a);
                }
                GotEntry::Code { module, offset } => {
                    w.u8(1);
                    w.u32(module.0);
                    w.u32(*offset);
                }
            }
        }
    }
}

pub(crate) fn read_weave(r: &mut Reader<'_>) -> R<Weave> {
    let id = WeaveId(r.u64()?);
    let name = r.str()?;
    let island = IslandId(r.u32()?);
    let nb = r.count(8)?;
    let beads = (0..nb)
        .map(|_| r.u64().map(BeadId))
        .collect::<R<Vec<_>>>()?;
    let nr = r.count(16)?;
    let mut rows = Vec::with_capacity(nr);
    let mut row_of = BTreeMap::new();
    for i in 0..nr {
        let module = ModuleId(r.u32()?);
        let bead = BeadId(r.u64()?);
        let ne = r.count(9)?;
        let mut entries = Vec::with_capacity(ne);
        for _ in 0..ne {
            entries.push(match r.u8()? {
                0 => GotEntry::Data(r.u64()?),
                1 => GotEntry::Code {
                    module: ModuleId(r.u32()?),
                    offset: r.u32()?,
                },
                t => return Err(r.malformed(format!("GOT entry tag {t}"))),
            });
        }
        if row_of.insert(module, i).is_some() {
            return Err(r.malformed("module repeated in weave"));
        }
        rows.push(GotRow {
            module,
            bead,
            entries,
        });
    }
    Ok(Weave {
        id,
        name,
        island,
        beads,
        rows,
        row_of,
    })
}

pub(crate) fn bead(w: &mut Writer, b: &Bead) {
    w.u64(b.id.0);
    w.str(&b.name);
    w.u32(b.module.0);
    w.u64(b.data_base);
    w.u64(b.data_len);
    w.u64(b.creation_epoch);
    w.u32(b.node.0);
    w.u32(b.island.0);
}

pub(crate) fn read_bead(r: &mut Reader<'_>) -> R<Bead> {
    Ok(Bead {
        id: BeadId(r.u64()?),
        name: r.str()?,
        module: ModuleId(r.u32()?),
        data_base: r.u64()?,
        data_len: r.u64()?,
        creation_epoch: r.u64()?,
        node: NodeId(r.u32()?),
        island: IslandId(r.u32()?),
    })
}

pub(crate) fn tuple_store(w: &mut Writer, t: &TupleStore) {
    w.u32(t.module.0);
    w.u64(t.base);
    w.u64(t.len);
    w.u32(t.members.len() as u32);
    for (slot, (addr, size)) in &t.members {
        w.u32(*slot);
        w.u64(*addr);
        w.u32(*size);
    }
    w.u32(t.refcount);
    w.u32(t.island.0);
}

pub(crate) fn read_tuple_store(r: &mut Reader<'_>) -> R<TupleStore> {
    let module = ModuleId(r.u32()?);
    let base = r.u64()?;
    let len = r.u64()?;
    let n = r.count(16)?;
    let mut members = BTreeMap::new();
    for _ in 0..n {
        let slot = r.u32()?;
        members.insert(slot, (r.u64()?, r.u32()?));
    }
    Ok(TupleStore {
        module,
        base,
        len,
        members,
        refcount: r.u32()?,
        island: IslandId(r.u32()?),
    })
}

pub(crate) fn island(w: &mut Writer, i: &Island) {
    w.u32(i.id.0);
    w.str(&i.name);
    w.u32(i.beads.len() as u32);
    for b in &i.beads {
        w.u64(b.0);
    }
    w.u32(i.home_node.0);
    w.bool(i.vm_region.is_some());
    w.u32(i.vm_region.unwrap_or(0));
}

pub(crate) fn read_island(r: &mut Reader<'_>) -> R<Island> {
    let id = IslandId(r.u32()?);
    let name = r.str()?;
    let n = r.count(8)?;
    let beads: BTreeSet<BeadId> = (0..n).map(|_| r.u64().map(BeadId)).collect::<R<_>>()?;
    let home_node = NodeId(r.u32()?);
    let has_region = r.bool()?;
    let region = r.u32()?;
    Ok(Island {
        id,
        name,
        beads,
        home_node,
        vm_region: has_region.then_some(region),
    })
}

pub(crate) fn heap(w: &mut Writer, h: &Heap) {
    w.u64(h.span);
    w.u32(h.partitions.len() as u32);
    for p in h.partitions.values() {
        w.u32(p.node.0);
        w.u64(p.base);
        w.u64(p.cursor);
        w.u64(p.end);
        w.u32(p.free.len() as u32);
        for (s, l) in &p.free {
            w.u64(*s);
            w.u64(*l);
        }
    }
}

pub(crate) fn read_heap(r: &mut Reader<'_>) -> R<Heap> {
    let span = r.u64()?;
    let n = r.count(32)?;
    let mut partitions = BTreeMap::new();
    for _ in 0..n {
        let node = NodeId(r.u32()?);
        let base = r.u64()?;
        let cursor = r.u64()?;
        let end = r.u64()?;
        let nf = r.count(16)?;
        let mut free = BTreeMap::new();
        for _ in 0..nf {
            free.insert(r.u64()?, r.u64()?);
        }
        partitions.insert(
            node,
            NodePartition {
                node,
                base,
                cursor,
                end,
                free,
            },
        );
    }
    Ok(Heap { partitions, span })
}

pub(crate) fn sched(w: &mut Writer, s: &SchedState) {
    match s.policy {
        SchedPolicy::Cooperative => w.u8(0),
        SchedPolicy::Preemptive { quantum } => {
            w.u8(1);
            w.u64(quantum);
        }
    }
    w.bool(s.last.is_some());
    w.u64(s.last.map_or(0, |l| l.0));
    w.u32(s.holders.len() as u32);
    for h in &s.holders {
        w.u64(h.0);
    }
}

pub(crate) fn read_sched(r: &mut Reader<'_>) -> R<SchedState> {
    let policy = match r.u8()? {
        0 => SchedPolicy::Cooperative,
        1 => SchedPolicy::Preemptive { quantum: r.u64()? },
        t => return Err(r.malformed(format!("policy tag {t}"))),
    };
    let has_last = r.bool()?;
    let last = r.u64()?;
    let n = r.count(8)?;
    let holders = (0..n).map(|_| r.u64().map(StringId)).collect::<R<_>>()?;
    Ok(SchedState {
        policy,
        last: has_last.then_some(StringId(last)),
        holders,
    })
}

pub(crate) fn region(w: &mut Writer, g: &Region) {
    w.u64(g.start);
    w.u64(g.len);
    w.u64(g.size);
    match g.kind {
        RegionKind::DataContext { bead } => {
            w.u8(0);
            w.u64(bead.0);
        }
        RegionKind::TupleStore { module } => {
            w.u8(1);
            w.u32(module.0);
        }
        RegionKind::Heap { bead, string } => {
            w.u8(2);
            w.u64(bead.0);
            w.u64(string.0);
        }
    }
    w.u32(g.island.0);
    w.u32(g.node.0);
    w.u64(g.epoch);
}

pub(crate) fn read_region(r: &mut Reader<'_>) -> R<Region> {
    let start = r.u64()?;
    let len = r.u64()?;
    let size = r.u64()?;
    let kind = match r.u8()? {
        0 => RegionKind::DataContext {
            bead: BeadId(r.u64()?),
        },
        1 => RegionKind::TupleStore {
            module: ModuleId(r.u32()?),
        },
        2 => RegionKind::Heap {
            bead: BeadId(r.u64()?),
            string: StringId(r.u64()?),
        },
        t => return Err(r.malformed(format!("region kind tag {t}"))),
    };
    if start % 8 != 0 || len % 8 != 0 || len == 0 || start.checked_add(len).is_none() {
        return Err(r.malformed("region not cell aligned"));
    }
    Ok(Region {
        start,
        len,
        size,
        kind,
        island: IslandId(r.u32()?),
        node: NodeId(r.u32()?),
        epoch: r.u64()?,
    })
}

pub(crate) fn pages(w: &mut Writer, pages: &BTreeMap<u64, PageBuf>) {
    w.u32(pages.len() as u32);
    for (n, p) in pages {
        w.u64(*n);
        w.bytes(&p[..]);
    }
}

pub(crate) fn read_pages(r: &mut Reader<'_>) -> R<BTreeMap<u64, PageBuf>> {
    let n = r.count(8 + PAGE_SIZE as usize)?;
    let mut out = BTreeMap::new();
    let mut prev = None;
    for _ in 0..n {
        let number = r.u64()?;
        if prev.is_some_and(|p| p >= number) {
            return Err(r.malformed("page numbers not ascending"));
        }
        prev = Some(number);
        let mut page = new_page();
        page.copy_from_slice(r.take(PAGE_SIZE as usize)?);
        out.insert(number, page);
    }
    Ok(out)
}

pub(crate) fn list<T>(
    w: &mut Writer,
    items: impl ExactSizeIterator<Item = T>,
    mut f: impl FnMut(&mut Writer, T),
) {
    w.u32(items.len() as u32);
    for i in items {
        f(w, i);
    }
}

pub(crate) fn read_list<T>(
    r: &mut Reader<'_>,
    min_elem: usize,
    mut f: impl FnMut(&mut Reader<'_>) -> R<T>,
) -> R<Vec<T>> {
    let n = r.count(min_elem)?;
    (0..n).map(|_| f(r)).collect()
}
