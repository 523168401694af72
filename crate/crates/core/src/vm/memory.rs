//! Sparse paged virtual memory with region bookkeeping and a copy-on-write
//! write barrier.
//!
//! Addresses are 64-bit: bits 63..40 name the node whose partition the
//! address was allocated from, bits 39..0 are the offset inside it. Bytes
//! are only addressable inside a mapped region; bytes of a live page that
//! no region covers are kept zero.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use crate::ids::{BeadId, IslandId, ModuleId, NodeId, StringId};

pub const PAGE_SIZE: u64 = 4096;
pub const NODE_SHIFT: u32 = 40;
pub const OFFSET_MASK: u64 = (1 << NODE_SHIFT) - 1;
pub const MAX_NODES: u32 = 1 << 24;

pub type PageBuf = Box<[u8; PAGE_SIZE as usize]>;

pub fn node_of(addr: u64) -> NodeId {
    NodeId((addr >> NODE_SHIFT) as u32)
}

pub fn node_base(node: NodeId) -> u64 {
    (node.0 as u64) << NODE_SHIFT
}

pub fn page_of(addr: u64) -> u64 {
    addr / PAGE_SIZE
}

fn pages_spanning(range: Range<u64>) -> Range<u64> {
    if range.is_empty() {
        return 0..0;
    }
    page_of(range.start)..page_of(range.end - 1) + 1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegionKind {
    DataContext { bead: BeadId },
    TupleStore { module: ModuleId },
    Heap { bead: BeadId, string: StringId },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub start: u64,
    /// Mapped length, rounded up to whole cells.
    pub len: u64,
    /// Size as requested by the allocator's caller.
    pub size: u64,
    pub kind: RegionKind,
    pub island: IslandId,
    /// Node currently holding the region; differs from the address bits
    /// after migration.
    pub node: NodeId,
    pub epoch: u64,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.start + self.len
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.start && addr < self.end()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemFault {
    Unmapped(u64),
    Misaligned(u64),
    CrossIsland(u64),
}

#[derive(Debug)]
struct Page {
    bytes: PageBuf,
    /// Generation at which the page was created.
    born: u64,
}

/// Lazily filled page store of one copy-on-write checkpoint.
#[derive(Debug)]
pub(crate) struct CowTracker {
    pub name: String,
    pub generation: u64,
    pub store: BTreeMap<u64, PageBuf>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MemStats {
    /// Mutations of any kind: cell stores, bulk writes, maps and unmaps.
    pub writes: u64,
    /// Pages preserved by the write barrier.
    pub cow_copies: u64,
}

#[derive(Debug, Default)]
pub struct VmMemory {
    pages: BTreeMap<u64, Page>,
    regions: BTreeMap<u64, Region>,
    generation: u64,
    trackers: Vec<CowTracker>,
    touched: Option<BTreeSet<u64>>,
    stats: MemStats,
}

pub(crate) fn new_page() -> PageBuf {
    vec![0u8; PAGE_SIZE as usize]
        .into_boxed_slice()
        .try_into()
        .expect("page sized")
}

impl VmMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stats(&self) -> MemStats {
        self.stats
    }

    pub fn regions(&self) -> &BTreeMap<u64, Region> {
        &self.regions
    }

    pub fn region(&self, start: u64) -> Option<&Region> {
        self.regions.get(&start)
    }

    pub(crate) fn region_mut(&mut self, start: u64) -> Option<&mut Region> {
        self.regions.get_mut(&start)
    }

    /// The region containing `addr`, if any.
    pub fn region_at(&self, addr: u64) -> Option<&Region> {
        self.regions
            .range(..=addr)
            .next_back()
            .map(|(_, r)| r)
            .filter(|r| r.contains(addr))
    }

    pub fn overlaps(&self, range: Range<u64>) -> Option<&Region> {
        if range.is_empty() {
            return None;
        }
        self.regions
            .range(..range.end)
            .next_back()
            .map(|(_, r)| r)
            .filter(|r| r.end() > range.start)
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }

    pub fn page_numbers(&self) -> impl Iterator<Item = u64> + '_ {
        self.pages.keys().copied()
    }

    pub fn page(&self, number: u64) -> Option<&[u8; PAGE_SIZE as usize]> {
        self.pages.get(&number).map(|p| &*p.bytes)
    }

    /// Starts recording every page touched by a mutation.
    pub fn observe_writes(&mut self) {
        self.touched = Some(BTreeSet::new());
    }

    pub fn take_touched(&mut self) -> BTreeSet<u64> {
        self.touched.take().unwrap_or_default()
    }

    /// Full image of live memory: every page in ascending order.
    pub fn image(&self) -> Vec<(u64, Vec<u8>)> {
        self.pages
            .iter()
            .map(|(&n, p)| (n, p.bytes.to_vec()))
            .collect()
    }

    fn barrier(&mut self, page: u64) {
        if let Some(t) = self.touched.as_mut() {
            t.insert(page);
        }
        if self.trackers.is_empty() {
            return;
        }
        let Some(p) = self.pages.get(&page) else {
            return;
        };
        for t in &mut self.trackers {
            if p.born < t.generation && !t.store.contains_key(&page) {
                t.store.insert(page, p.bytes.clone());
                self.stats.cow_copies += 1;
            }
        }
    }

    fn page_covered(&self, page: u64) -> bool {
        let start = page * PAGE_SIZE;
        self.overlaps(start..start + PAGE_SIZE).is_some()
    }

    /// Maps a region; its bytes read as zero.
    pub(crate) fn map_region(&mut self, region: Region) -> Result<(), u64> {
        if let Some(r) = self.overlaps(region.start..region.end()) {
            return Err(r.start.max(region.start));
        }
        for p in pages_spanning(region.start..region.end()) {
            let born = self.generation;
            self.pages.entry(p).or_insert_with(|| Page {
                bytes: new_page(),
                born,
            });
        }
        self.stats.writes += 1;
        self.regions.insert(region.start, region);
        Ok(())
    }

    /// Unmaps a region, zeroing its bytes and dropping pages no other
    /// region covers.
    pub(crate) fn unmap_region(&mut self, start: u64) -> Option<Region> {
        let region = self.regions.remove(&start)?;
        self.stats.writes += 1;
        for p in pages_spanning(region.start..region.end()) {
            self.barrier(p);
            if !self.page_covered(p) {
                self.pages.remove(&p);
                continue;
            }
            let base = p * PAGE_SIZE;
            let lo = region.start.max(base) - base;
            let hi = region.end().min(base + PAGE_SIZE) - base;
            if let Some(page) = self.pages.get_mut(&p) {
                page.bytes[lo as usize..hi as usize].fill(0);
            }
        }
        Some(region)
    }

    #[inline]
    pub fn read_cell(&self, addr: u64) -> Result<i64, MemFault> {
        if !addr.is_multiple_of(8) {
            return Err(MemFault::Misaligned(addr));
        }
        let page = self
            .pages
            .get(&page_of(addr))
            .ok_or(MemFault::Unmapped(addr))?;
        let off = (addr % PAGE_SIZE) as usize;
        Ok(i64::from_le_bytes(
            page.bytes[off..off + 8].try_into().unwrap(),
        ))
    }

    #[inline]
    pub fn write_cell(&mut self, addr: u64, value: i64) -> Result<(), MemFault> {
        if !addr.is_multiple_of(8) {
            return Err(MemFault::Misaligned(addr));
        }
        let p = page_of(addr);
        if !self.pages.contains_key(&p) {
            return Err(MemFault::Unmapped(addr));
        }
        self.barrier(p);
        self.stats.writes += 1;
        let page = self.pages.get_mut(&p).expect("checked above");
        let off = (addr % PAGE_SIZE) as usize;
        page.bytes[off..off + 8].copy_from_slice(&value.to_le_bytes());
        Ok(())
    }

    /// Checks that a cell lies inside a mapped region owned by `island`.
    pub fn check_cell(&self, addr: u64, island: IslandId) -> Result<(), MemFault> {
        if !addr.is_multiple_of(8) {
            return Err(MemFault::Misaligned(addr));
        }
        let r = self.region_at(addr).ok_or(MemFault::Unmapped(addr))?;
        if addr + 8 > r.end() {
            return Err(MemFault::Unmapped(addr));
        }
        if r.island != island {
            return Err(MemFault::CrossIsland(addr));
        }
        Ok(())
    }

    pub fn read_bytes(&self, addr: u64, len: u64) -> Result<Vec<u8>, MemFault> {
        let mut out = Vec::with_capacity(len as usize);
        let mut at = addr;
        let end = addr + len;
        while at < end {
            let p = page_of(at);
            let page = self.pages.get(&p).ok_or(MemFault::Unmapped(at))?;
            let off = (at % PAGE_SIZE) as usize;
            let n = ((PAGE_SIZE - at % PAGE_SIZE).min(end - at)) as usize;
            out.extend_from_slice(&page.bytes[off..off + n]);
            at += n as u64;
        }
        Ok(out)
    }

    pub(crate) fn write_bytes(&mut self, addr: u64, data: &[u8]) -> Result<(), MemFault> {
        let mut at = addr;
        let mut rest = data;
        while !rest.is_empty() {
            let p = page_of(at);
            if !self.pages.contains_key(&p) {
                return Err(MemFault::Unmapped(at));
            }
            self.barrier(p);
            let off = (at % PAGE_SIZE) as usize;
            let n = (PAGE_SIZE as usize - off).min(rest.len());
            let page = self.pages.get_mut(&p).expect("checked above");
            page.bytes[off..off + n].copy_from_slice(&rest[..n]);
            rest = &rest[n..];
            at += n as u64;
        }
        self.stats.writes += 1;
        Ok(())
    }

    // --- checkpoint support -------------------------------------------

    /// Opens a lazily-filled page store. Every page existing now is
    /// preserved on its first subsequent mutation.
    pub(crate) fn open_tracker(&mut self, name: &str) {
        self.generation += 1;
        self.trackers.push(CowTracker {
            name: name.to_owned(),
            generation: self.generation,
            store: BTreeMap::new(),
        });
    }

    pub(crate) fn tracker(&self, name: &str) -> Option<&CowTracker> {
        self.trackers.iter().find(|t| t.name == name)
    }

    pub(crate) fn close_tracker(&mut self, name: &str) -> Option<CowTracker> {
        let i = self.trackers.iter().position(|t| t.name == name)?;
        Some(self.trackers.remove(i))
    }

    /// Copies every live page, for eager checkpoints.
    pub(crate) fn copy_all_pages(&self) -> BTreeMap<u64, PageBuf> {
        self.pages
            .iter()
            .map(|(&n, p)| (n, p.bytes.clone()))
            .collect()
    }

    /// Rewinds memory to a saved region table plus the preserved page
    /// contents. Pages not mentioned in `store` must be unchanged since
    /// the save point.
    pub(crate) fn rewind(
        &mut self,
        regions: BTreeMap<u64, Region>,
        store: &BTreeMap<u64, PageBuf>,
    ) {
        self.regions = regions;
        let stale: Vec<u64> = self
            .pages
            .keys()
            .copied()
            .filter(|&p| !self.page_covered(p))
            .collect();
        for p in stale {
            self.barrier(p);
            self.pages.remove(&p);
        }
        for (&n, bytes) in store {
            if !self.page_covered(n) {
                continue;
            }
            self.barrier(n);
            let born = self.generation;
            let page = self.pages.entry(n).or_insert_with(|| Page {
                bytes: new_page(),
                born,
            });
            page.bytes.copy_from_slice(&bytes[..]);
        }
        self.stats.writes += 1;
    }
}
