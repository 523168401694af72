//! Whole-tapestry checkpoints, eager or copy-on-write, and their file
//! format.
//!
//! ```text
//! "WCKP" | u32 version | name | u8 mode
//! strings | weaves (GOT snapshots) | u64 watermark
//! beads | tuple stores | islands | heap partitions | scheduler | regions
//! pages: u32 count, then (u64 page number, 4096 bytes) ascending
//! ```

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec;
use crate::ids::StringId;
use crate::registry::Registry;
use crate::runtime::{Runtime, TapestryState};
use crate::vm::memory::{PageBuf, Region};
use crate::weaver::Weaver;
use crate::wire::{Reader, WireError, Writer};

pub const MAGIC: &[u8; 4] = b"WCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SnapshotError {
    #[error("checkpoint `{0}` already exists")]
    DuplicateName(String),
    #[error("no checkpoint named `{0}`")]
    UnknownCheckpoint(String),
    #[error("bad magic: expected \"WCKP\"")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("truncated {section} section at byte {offset}")]
    TruncatedSection {
        section: &'static str,
        offset: usize,
    },
    #[error("malformed checkpoint at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("checkpoint refers to module {0}, which is not loaded")]
    UnknownModule(u32),
}

impl From<WireError> for SnapshotError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Truncated { section, offset } => {
                SnapshotError::TruncatedSection { section, offset }
            }
            WireError::Malformed { offset, reason, .. } => {
                SnapshotError::Malformed { offset, reason }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointMode {
    Naive,
    Cow,
}

impl CheckpointMode {
    pub fn label(self) -> &'static str {
        match self {
            CheckpointMode::Naive => "naive",
            CheckpointMode::Cow => "cow",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "naive" => Some(CheckpointMode::Naive),
            "cow" => Some(CheckpointMode::Cow),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Checkpoint {
    pub name: String,
    pub mode: CheckpointMode,
    pub state: TapestryState,
    pub regions: BTreeMap<u64, Region>,
    pub watermark: u64,
    /// Full page image at the save point. Absent for a live copy-on-write
    /// checkpoint, whose originals accumulate in the memory's page store.
    pub image: Option<BTreeMap<u64, PageBuf>>,
}

impl Checkpoint {
    pub fn strings(&self) -> impl Iterator<Item = StringId> + '_ {
        self.state.strings.keys().copied()
    }
}

impl Runtime {
    /// Takes a checkpoint at the current safe point.
    pub fn checkpoint(&mut self, name: &str, mode: CheckpointMode) -> Result<(), SnapshotError> {
        if self.checkpoints.contains_key(name) {
            return Err(SnapshotError::DuplicateName(name.to_owned()));
        }
        let image = match mode {
            CheckpointMode::Naive => Some(self.mem.copy_all_pages()),
            CheckpointMode::Cow => {
                self.mem.open_tracker(name);
                None
            }
        };
        self.checkpoints.insert(
            name.to_owned(),
            Checkpoint {
                name: name.to_owned(),
                mode,
                state: self.st.clone(),
                regions: self.mem.regions().clone(),
                watermark: self.counters.epoch,
                image,
            },
        );
        Ok(())
    }

    pub fn checkpoint_names(&self) -> impl Iterator<Item = &str> {
        self.checkpoints.keys().map(String::as_str)
    }

    pub fn checkpoint_info(&self, name: &str) -> Option<&Checkpoint> {
        self.checkpoints.get(name)
    }

    /// Pages held for a checkpoint: the eager image, or the originals the
    /// write barrier has preserved so far.
    pub fn page_store_len(&self, name: &str) -> Option<usize> {
        let cp = self.checkpoints.get(name)?;
        match &cp.image {
            Some(img) => Some(img.len()),
            None => self.mem.tracker(name).map(|t| t.store.len()),
        }
    }

    pub fn drop_checkpoint(&mut self, name: &str) -> Result<(), SnapshotError> {
        self.checkpoints
            .remove(name)
            .ok_or_else(|| SnapshotError::UnknownCheckpoint(name.to_owned()))?;
        self.mem.close_tracker(name);
        Ok(())
    }

    /// Rolls the tapestry back: memory allocated after the save point is
    /// unmapped, preserved pages are written back and every string, weave
    /// and bead is put back as it was.
    pub fn restore(&mut self, name: &str) -> Result<(), SnapshotError> {
        let cp = self
            .checkpoints
            .get(name)
            .ok_or_else(|| SnapshotError::UnknownCheckpoint(name.to_owned()))?;
        let store = match &cp.image {
            Some(img) => img.clone(),
            None => self
                .mem
                .tracker(name)
                .map(|t| t.store.clone())
                .unwrap_or_default(),
        };
        let regions = cp.regions.clone();
        let state = cp.state.clone();
        self.mem.rewind(regions, &store);
        self.st = state;
        self.reset_schedule_tracking();
        Ok(())
    }

    /// Page image at the checkpoint's save point.
    fn checkpoint_image(&self, cp: &Checkpoint) -> BTreeMap<u64, PageBuf> {
        if let Some(img) = &cp.image {
            return img.clone();
        }
        let preserved = self.mem.tracker(&cp.name).map(|t| &t.store);
        let mut out = BTreeMap::new();
        for r in cp.regions.values() {
            let first = r.start / crate::vm::memory::PAGE_SIZE;
            let last = (r.end() - 1) / crate::vm::memory::PAGE_SIZE;
            for p in first..=last {
                if out.contains_key(&p) {
                    continue;
                }
                let page = preserved
                    .and_then(|s| s.get(&p).cloned())
                    .or_else(|| {
                        self.mem.page(p).map(|b| {
                            let mut buf = crate::vm::memory::new_page();
                            buf.copy_from_slice(b);
                            buf
                        })
                    })
                    .expect("pages under live regions exist or were preserved");
                out.insert(p, page);
            }
        }
        out
    }

    pub fn dump_checkpoint(&self, name: &str) -> Result<Vec<u8>, SnapshotError> {
        let cp = self
            .checkpoints
            .get(name)
            .ok_or_else(|| SnapshotError::UnknownCheckpoint(name.to_owned()))?;
        let image = self.checkpoint_image(cp);
        Ok(encode_checkpoint(cp, &image))
    }

    /// Installs a checkpoint read from a file so it can be restored.
    pub fn install_checkpoint(&mut self, cp: Checkpoint) -> Result<(), SnapshotError> {
        if self.checkpoints.contains_key(&cp.name) {
            return Err(SnapshotError::DuplicateName(cp.name));
        }
        let n = self.modules.len() as u32;
        let bad = cp
            .state
            .registry
            .beads
            .values()
            .map(|b| b.module.0)
            .chain(
                cp.state
                    .weaver
                    .weaves
                    .values()
                    .flat_map(|w| w.rows.iter().map(|r| r.module.0)),
            )
            .find(|&m| m >= n);
        if let Some(m) = bad {
            return Err(SnapshotError::UnknownModule(m));
        }
        self.checkpoints.insert(cp.name.clone(), cp);
        Ok(())
    }
}

pub fn encode_checkpoint(cp: &Checkpoint, image: &BTreeMap<u64, PageBuf>) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    w.u32(VERSION);
    w.str(&cp.name);
    w.u8(match cp.mode {
        CheckpointMode::Naive => 0,
        CheckpointMode::Cow => 1,
    });
    encode_state(&mut w, &cp.state);
    w.u64(cp.watermark);
    encode_meta(&mut w, &cp.state, &cp.regions);
    codec::pages(&mut w, image);
    w.into_bytes()
}

pub(crate) fn encode_state(w: &mut Writer, st: &TapestryState) {
    codec::list(w, st.strings.values(), codec::string);
    codec::list(w, st.weaver.weaves.values(), |w, v| codec::weave(w, v));
}

pub(crate) fn encode_meta(w: &mut Writer, st: &TapestryState, regions: &BTreeMap<u64, Region>) {
    codec::list(w, st.registry.beads.values(), codec::bead);
    codec::list(w, st.registry.tuple_stores.values(), codec::tuple_store);
    codec::list(w, st.islands.values(), codec::island);
    codec::heap(w, &st.heap);
    codec::sched(w, &st.sched);
    codec::list(w, regions.values(), codec::region);
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint, SnapshotError> {
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(|_| SnapshotError::BadMagic)? != MAGIC {
        return Err(SnapshotError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(SnapshotError::VersionMismatch(version));
    }
    let name = r.str()?;
    let mode = match r.u8()? {
        0 => CheckpointMode::Naive,
        1 => CheckpointMode::Cow,
        t => return Err(r.malformed(format!("mode tag {t}")).into()),
    };
    let (strings, weaves) = decode_state(&mut r)?;
    r.section("watermark");
    let watermark = r.u64()?;
    let (st, regions) = decode_meta(&mut r, strings, weaves)?;
    r.section("pages");
    let image = codec::read_pages(&mut r)?;
    r.finish()?;
    Ok(Checkpoint {
        name,
        mode,
        state: st,
        regions,
        watermark,
        image: Some(image),
    })
}

type StringsAndWeaves = (Vec<crate::strings::StringState>, Vec<crate::weaver::Weave>);

pub(crate) fn decode_state(r: &mut Reader<'_>) -> Result<StringsAndWeaves, WireError> {
    r.section("strings");
    let strings = codec::read_list(r, 40, codec::read_string)?;
    r.section("weaves");
    let weaves = codec::read_list(r, 24, codec::read_weave)?;
    Ok((strings, weaves))
}

pub(crate) fn decode_meta(
    r: &mut Reader<'_>,
    strings: Vec<crate::strings::StringState>,
    weaves: Vec<crate::weaver::Weave>,
) -> Result<(TapestryState, BTreeMap<u64, Region>), WireError> {
    r.section("beads");
    let beads = codec::read_list(r, 44, codec::read_bead)?;
    r.section("tuples");
    let tuples = codec::read_list(r, 32, codec::read_tuple_store)?;
    r.section("islands");
    let islands = codec::read_list(r, 21, codec::read_island)?;
    r.section("heap");
    let heap = codec::read_heap(r)?;
    r.section("scheduler");
    let sched = codec::read_sched(r)?;
    r.section("regions");
    let region_list = codec::read_list(r, 45, codec::read_region)?;

    let mut registry = Registry::default();
    for b in beads {
        registry.names.insert(b.name.clone(), b.id);
        registry.beads.insert(b.id, b);
    }
    for t in tuples {
        registry.tuple_stores.insert(t.module, t);
    }
    let mut weaver = Weaver::default();
    for w in weaves {
        weaver.insert(w).map_err(|e| r.malformed(e.to_string()))?;
    }
    let mut st = TapestryState {
        registry,
        weaver,
        strings: BTreeMap::new(),
        string_names: BTreeMap::new(),
        islands: BTreeMap::new(),
        island_names: BTreeMap::new(),
        heap,
        sched,
    };
    for s in strings {
        st.string_names.insert(s.name.clone(), s.id);
        st.strings.insert(s.id, s);
    }
    for i in islands {
        st.island_names.insert(i.name.clone(), i.id);
        st.islands.insert(i.id, i);
    }
    let mut regions = BTreeMap::new();
    let mut prev_end = 0;
    for g in region_list {
        if g.start < prev_end {
            return Err(r.malformed("overlapping regions"));
        }
        prev_end = g.end();
        regions.insert(g.start, g);
    }
    Ok((st, regions))
}
