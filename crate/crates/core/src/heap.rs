//! Node-partitioned dynamic memory with bead attribution.
//!
//! Each node owns the address range `[node << 40, (node + 1) << 40)`. Every
//! range handed out here (heap blocks, bead data contexts, tuple stores)
//! comes from the allocating node's partition, so an address stays valid on
//! whichever node later holds the region.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::ids::{BeadId, IslandId, NodeId, StringId};
use crate::vm::memory::{node_base, node_of, Region, RegionKind, VmMemory, MAX_NODES, PAGE_SIZE};

pub const PARTITION_SPAN: u64 = 1 << 40;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HeapError {
    #[error("allocation of zero bytes")]
    ZeroSize,
    #[error("partition of node {0} exhausted")]
    PartitionExhausted(NodeId),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("double free of {0:#x}")]
    DoubleFree(u64),
    #[error("{0:#x} is not the start of a heap region")]
    NotARegionStart(u64),
    #[error("address {0:#x} is already in use")]
    AddressCollision(u64),
}

pub fn round_cell(n: u64) -> u64 {
    n.div_ceil(8) * 8
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodePartition {
    pub node: NodeId,
    pub base: u64,
    pub cursor: u64,
    pub end: u64,
    /// Released ranges by start address, coalesced.
    pub free: BTreeMap<u64, u64>,
}

impl NodePartition {
    fn new(node: NodeId, span: u64) -> Self {
        let base = node_base(node);
        Self {
            node,
            base,
            cursor: base + PAGE_SIZE,
            end: base + span,
            free: BTreeMap::new(),
        }
    }

    fn take(&mut self, len: u64) -> Option<u64> {
        let hit = self
            .free
            .iter()
            .find(|(_, &l)| l >= len)
            .map(|(&s, &l)| (s, l));
        if let Some((start, block)) = hit {
            self.free.remove(&start);
            if block > len {
                self.free.insert(start + len, block - len);
            }
            return Some(start);
        }
        if self.end - self.cursor < len {
            return None;
        }
        let start = self.cursor;
        self.cursor += len;
        Some(start)
    }

    fn give_back(&mut self, mut start: u64, mut len: u64) {
        if let Some((&s, &l)) = self.free.range(..start).next_back() {
            if s + l == start {
                self.free.remove(&s);
                start = s;
                len += l;
            }
        }
        if let Some(&l) = self.free.get(&(start + len)) {
            self.free.remove(&(start + len));
            len += l;
        }
        if start + len == self.cursor {
            self.cursor = start;
        } else {
            self.free.insert(start, len);
        }
    }

    fn is_free(&self, addr: u64) -> bool {
        addr >= self.cursor
            || self
                .free
                .range(..=addr)
                .next_back()
                .is_some_and(|(&s, &l)| addr < s + l)
    }

    /// Claims exactly `[start, start + len)`, which must be unused.
    fn claim(&mut self, start: u64, len: u64) -> Result<(), HeapError> {
        let stop = start + len;
        if start < self.base + PAGE_SIZE || stop > self.end {
            return Err(HeapError::AddressCollision(start));
        }
        if start >= self.cursor {
            if start > self.cursor {
                let gap = (self.cursor, start - self.cursor);
                self.free.insert(gap.0, gap.1);
            }
            self.cursor = stop;
            return Ok(());
        }
        let (s, l) = self
            .free
            .range(..=start)
            .next_back()
            .map(|(&s, &l)| (s, l))
            .filter(|&(s, l)| stop <= s + l)
            .ok_or(HeapError::AddressCollision(start))?;
        self.free.remove(&s);
        if start > s {
            self.free.insert(s, start - s);
        }
        if s + l > stop {
            self.free.insert(stop, s + l - stop);
        }
        Ok(())
    }
}

/// Attribution recorded with every heap block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Owner {
    pub bead: BeadId,
    pub string: StringId,
    pub island: IslandId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeapRegion {
    pub start: u64,
    pub size: u64,
    pub bead: BeadId,
    pub string: StringId,
    pub island: IslandId,
    pub epoch: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Heap {
    pub(crate) partitions: BTreeMap<NodeId, NodePartition>,
    pub(crate) span: u64,
}

impl Heap {
    pub fn new(nodes: u32) -> Self {
        Self::with_span(nodes, PARTITION_SPAN)
    }

    /// A heap whose partitions are limited to `span` bytes each.
    pub fn with_span(nodes: u32, span: u64) -> Self {
        let span = span.clamp(2 * PAGE_SIZE, PARTITION_SPAN);
        let mut heap = Self {
            partitions: BTreeMap::new(),
            span,
        };
        for n in 0..nodes.min(MAX_NODES) {
            heap.add_node(NodeId(n));
        }
        heap
    }

    pub fn add_node(&mut self, node: NodeId) -> bool {
        if node.0 >= MAX_NODES || self.partitions.contains_key(&node) {
            return false;
        }
        self.partitions
            .insert(node, NodePartition::new(node, self.span));
        true
    }

    pub fn has_node(&self, node: NodeId) -> bool {
        self.partitions.contains_key(&node)
    }

    pub fn node_count(&self) -> u32 {
        self.partitions.len() as u32
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.partitions.keys().copied()
    }

    pub fn partition(&self, node: NodeId) -> Option<&NodePartition> {
        self.partitions.get(&node)
    }

    /// Reserves and maps a fresh zeroed region on `node`. A zero `size`
    /// still occupies one cell so the start address is unique.
    pub(crate) fn map(
        &mut self,
        mem: &mut VmMemory,
        epoch: &mut u64,
        node: NodeId,
        size: u64,
        kind: RegionKind,
        island: IslandId,
    ) -> Result<u64, HeapError> {
        let part = self
            .partitions
            .get_mut(&node)
            .ok_or(HeapError::UnknownNode(node))?;
        let len = round_cell(size.max(1));
        let start = part.take(len).ok_or(HeapError::PartitionExhausted(node))?;
        *epoch += 1;
        let region = Region {
            start,
            len,
            size,
            kind,
            island,
            node,
            epoch: *epoch,
        };
        mem.map_region(region)
            .map_err(HeapError::AddressCollision)?;
        Ok(start)
    }

    /// Unmaps a region of any kind and returns its range to the partition
    /// its address came from.
    pub(crate) fn unmap(&mut self, mem: &mut VmMemory, start: u64) -> Option<Region> {
        let region = mem.unmap_region(start)?;
        if let Some(p) = self.partitions.get_mut(&node_of(start)) {
            p.give_back(region.start, region.len);
        }
        Some(region)
    }

    /// Claims an exact address range, used when admitting migrated state.
    pub(crate) fn reserve(&mut self, start: u64, len: u64) -> Result<(), HeapError> {
        let node = node_of(start);
        if !self.partitions.contains_key(&node) {
            self.add_node(node);
        }
        self.partitions
            .get_mut(&node)
            .ok_or(HeapError::UnknownNode(node))?
            .claim(start, len)
    }

    /// Returns an address range to its partition without touching memory.
    pub(crate) fn release(&mut self, start: u64, len: u64) {
        if let Some(p) = self.partitions.get_mut(&node_of(start)) {
            p.give_back(start, len);
        }
    }

    pub fn halloc(
        &mut self,
        mem: &mut VmMemory,
        epoch: &mut u64,
        node: NodeId,
        size: u64,
        owner: Owner,
    ) -> Result<u64, HeapError> {
        if size == 0 {
            return Err(HeapError::ZeroSize);
        }
        let kind = RegionKind::Heap {
            bead: owner.bead,
            string: owner.string,
        };
        self.map(mem, epoch, node, size, kind, owner.island)
    }

    pub fn hfree(&mut self, mem: &mut VmMemory, addr: u64) -> Result<HeapRegion, HeapError> {
        match mem.region(addr) {
            Some(r) if matches!(r.kind, RegionKind::Heap { .. }) => {}
            Some(_) => return Err(HeapError::NotARegionStart(addr)),
            None => {
                let inside_live = mem.region_at(addr).is_some();
                let freed = !inside_live
                    && addr.is_multiple_of(8)
                    && self.partitions.get(&node_of(addr)).is_some_and(|p| {
                        addr >= p.base + PAGE_SIZE && addr < p.cursor && p.is_free(addr)
                    });
                return Err(if freed {
                    HeapError::DoubleFree(addr)
                } else {
                    HeapError::NotARegionStart(addr)
                });
            }
        }
        let region = self.unmap(mem, addr).expect("checked above");
        Ok(heap_view(&region).expect("heap region"))
    }

    /// Resizes a heap block. The contents are preserved up to the smaller
    /// size; a block whose cell-rounded length is unchanged stays put.
    pub fn hrealloc(
        &mut self,
        mem: &mut VmMemory,
        epoch: &mut u64,
        addr: u64,
        new_size: u64,
        node: NodeId,
        owner: Owner,
    ) -> Result<u64, HeapError> {
        if new_size == 0 {
            return Err(HeapError::ZeroSize);
        }
        let old = match mem.region(addr) {
            Some(r) if matches!(r.kind, RegionKind::Heap { .. }) => r.clone(),
            _ => {
                // reuse hfree's classification of the bad address
                return Err(self.hfree(mem, addr).expect_err("not a live heap region"));
            }
        };
        if round_cell(new_size) == old.len {
            if new_size < old.size {
                let tail = vec![0u8; (old.size - new_size) as usize];
                mem.write_bytes(addr + new_size, &tail)
                    .expect("inside a mapped region");
            }
            mem.region_mut(addr).expect("live").size = new_size;
            return Ok(addr);
        }
        let keep = old.size.min(new_size);
        let bytes = mem.read_bytes(addr, keep).expect("inside a mapped region");
        let fresh = self.halloc(mem, epoch, node, new_size, owner)?;
        mem.write_bytes(fresh, &bytes).expect("freshly mapped");
        self.unmap(mem, addr);
        Ok(fresh)
    }
}

pub fn heap_view(r: &Region) -> Option<HeapRegion> {
    match r.kind {
        RegionKind::Heap { bead, string } => Some(HeapRegion {
            start: r.start,
            size: r.size,
            bead,
            string,
            island: r.island,
            epoch: r.epoch,
        }),
        _ => None,
    }
}

pub fn regions_of_island(mem: &VmMemory, island: IslandId) -> Vec<HeapRegion> {
    mem.regions()
        .values()
        .filter(|r| r.island == island)
        .filter_map(heap_view)
        .collect()
}
