//! Islands of beads and their migration between simulated nodes.
//!
//! A package holds everything an island owns: beads, tuple stores, weaves
//! with their GOTs, strings, and the bytes of every region tagged with the
//! island. Regions keep their addresses; only the node holding them
//! changes.
//!
//! ```text
//! "WMIG" | u32 version | island | module names
//! beads | tuple stores | weaves | strings | held strings
//! regions: metadata + bytes
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::codec;
use crate::heap::HeapError;
use crate::ids::{BeadId, IslandId, ModuleId, NodeId, StringId, WeaveId};
use crate::registry::{Bead, TupleStore};
use crate::runtime::Runtime;
use crate::strings::StringState;
use crate::vm::memory::{Region, RegionKind};
use crate::weaver::{GotEntry, Weave};
use crate::wire::{Reader, WireError, Writer};

pub const MAGIC: &[u8; 4] = b"WMIG";
pub const VERSION: u32 = 1;
/// Nodes per VM region group.
pub const REGION_NODES: u32 = 16;

pub fn region_of(node: NodeId) -> u32 {
    node.0 / REGION_NODES
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Island {
    pub id: IslandId,
    pub name: String,
    pub beads: BTreeSet<BeadId>,
    pub home_node: NodeId,
    pub vm_region: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    WeaveSpansIslands {
        weave: String,
        islands: Vec<String>,
    },
    StringOutsideIsland {
        string: String,
        island: String,
        weave_island: String,
    },
    TupleStoreSpansIslands {
        module: String,
        islands: Vec<String>,
    },
    BeadUnassigned {
        bead: String,
    },
    BeadInSeveralIslands {
        bead: String,
        islands: Vec<String>,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::WeaveSpansIslands { weave, islands } => {
                write!(f, "weave {weave} spans islands {}", islands.join(","))
            }
            Violation::StringOutsideIsland {
                string,
                island,
                weave_island,
            } => write!(
                f,
                "string {string} is in island {island} but its weave is in {weave_island}"
            ),
            Violation::TupleStoreSpansIslands { module, islands } => {
                write!(
                    f,
                    "tuple store of {module} is shared by islands {}",
                    islands.join(",")
                )
            }
            Violation::BeadUnassigned { bead } => write!(f, "bead {bead} belongs to no island"),
            Violation::BeadInSeveralIslands { bead, islands } => {
                write!(f, "bead {bead} is claimed by islands {}", islands.join(","))
            }
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MigrateError {
    #[error("unknown island `{0}`")]
    UnknownIsland(String),
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("island is not closed: {}", .0.join("; "))]
    ClosureViolation(Vec<String>),
    #[error("target lies in VM region {target}, island is confined to region {source_region}")]
    RegionConstraint { source_region: u32, target: u32 },
    #[error("bad magic: expected \"WMIG\"")]
    BadMagic,
    #[error("unsupported package version {0}")]
    VersionMismatch(u32),
    #[error("truncated {section} section at byte {offset}")]
    TruncatedSection {
        section: &'static str,
        offset: usize,
    },
    #[error("malformed package at byte {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("address {0:#x} is already mapped on the target")]
    AddressCollision(u64),
    #[error("package needs module `{0}`, which is not loaded")]
    UnknownModule(String),
    #[error("{0} already exists on the target")]
    IdCollision(String),
}

impl From<WireError> for MigrateError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Truncated { section, offset } => {
                MigrateError::TruncatedSection { section, offset }
            }
            WireError::Malformed { offset, reason, .. } => {
                MigrateError::Malformed { offset, reason }
            }
        }
    }
}

/// Decoded package contents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MigrationPackage {
    pub island: Island,
    pub modules: Vec<(ModuleId, String)>,
    pub beads: Vec<Bead>,
    pub tuple_stores: Vec<TupleStore>,
    pub weaves: Vec<Weave>,
    pub strings: Vec<StringState>,
    pub held: Vec<StringId>,
    pub regions: Vec<(Region, Vec<u8>)>,
}

impl MigrationPackage {
    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        codec::island(&mut w, &self.island);
        codec::list(&mut w, self.modules.iter(), |w, (id, name)| {
            w.u32(id.0);
            w.str(name);
        });
        codec::list(&mut w, self.beads.iter(), codec::bead);
        codec::list(&mut w, self.tuple_stores.iter(), codec::tuple_store);
        codec::list(&mut w, self.weaves.iter(), codec::weave);
        codec::list(&mut w, self.strings.iter(), codec::string);
        codec::list(&mut w, self.held.iter(), |w, s| w.u64(s.0));
        codec::list(&mut w, self.regions.iter(), |w, (r, bytes)| {
            codec::region(w, r);
            w.blob(bytes);
        });
        w.into_bytes()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, MigrateError> {
        let mut r = Reader::new(bytes);
        if r.take(4).map_err(|_| MigrateError::BadMagic)? != MAGIC {
            return Err(MigrateError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(MigrateError::VersionMismatch(version));
        }
        r.section("island");
        let island = codec::read_island(&mut r)?;
        r.section("modules");
        let modules = codec::read_list(&mut r, 8, |r| Ok((ModuleId(r.u32()?), r.str()?)))?;
        r.section("beads");
        let beads = codec::read_list(&mut r, 44, codec::read_bead)?;
        r.section("tuples");
        let tuple_stores = codec::read_list(&mut r, 32, codec::read_tuple_store)?;
        r.section("weaves");
        let weaves = codec::read_list(&mut r, 24, codec::read_weave)?;
        r.section("strings");
        let strings = codec::read_list(&mut r, 40, codec::read_string)?;
        r.section("held");
        let held = codec::read_list(&mut r, 8, |r| r.u64().map(StringId))?;
        r.section("regions");
        let regions = codec::read_list(&mut r, 49, |r| {
            let g = codec::read_region(r)?;
            let bytes = r.blob()?.to_vec();
            if bytes.len() as u64 != g.len {
                return Err(r.malformed("region byte count differs from its length"));
            }
            Ok((g, bytes))
        })?;
        r.finish()?;
        Ok(Self {
            island,
            modules,
            beads,
            tuple_stores,
            weaves,
            strings,
            held,
            regions,
        })
    }
}

impl Runtime {
    pub fn islands(&self) -> impl Iterator<Item = &Island> {
        self.st.islands.values()
    }

    pub fn island_weaves(&self, island: IslandId) -> Vec<WeaveId> {
        self.st
            .weaver
            .weaves
            .values()
            .filter(|w| w.island == island)
            .map(|w| w.id)
            .collect()
    }

    pub fn island_strings(&self, island: IslandId) -> Vec<StringId> {
        self.st
            .strings
            .values()
            .filter(|s| s.island == island)
            .map(|s| s.id)
            .collect()
    }

    fn island_label(&self, id: IslandId) -> String {
        self.st
            .islands
            .get(&id)
            .map_or_else(|| id.to_string(), |i| i.name.clone())
    }

    /// Closure violations in the loaded tapestry; empty iff every island
    /// can migrate.
    pub fn validate_islands(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut claimed: BTreeMap<BeadId, Vec<IslandId>> = BTreeMap::new();
        for i in self.st.islands.values() {
            for b in &i.beads {
                claimed.entry(*b).or_default().push(i.id);
            }
        }
        for b in self.st.registry.beads.values() {
            match claimed.get(&b.id).map(Vec::as_slice) {
                None | Some([]) => out.push(Violation::BeadUnassigned {
                    bead: b.name.clone(),
                }),
                Some([_]) => {}
                Some(many) => out.push(Violation::BeadInSeveralIslands {
                    bead: b.name.clone(),
                    islands: many.iter().map(|i| self.island_label(*i)).collect(),
                }),
            }
        }
        for w in self.st.weaver.weaves.values() {
            let islands: BTreeSet<IslandId> = w
                .beads
                .iter()
                .filter_map(|b| self.st.registry.bead(*b))
                .map(|b| b.island)
                .chain([w.island])
                .collect();
            if islands.len() > 1 {
                out.push(Violation::WeaveSpansIslands {
                    weave: w.name.clone(),
                    islands: islands.iter().map(|i| self.island_label(*i)).collect(),
                });
            }
        }
        for s in self.st.strings.values() {
            if let Some(w) = self.st.weaver.get(s.weave) {
                if w.island != s.island {
                    out.push(Violation::StringOutsideIsland {
                        string: s.name.clone(),
                        island: self.island_label(s.island),
                        weave_island: self.island_label(w.island),
                    });
                }
            }
        }
        for t in self.st.registry.tuple_stores.values() {
            let islands: BTreeSet<IslandId> = self
                .st
                .registry
                .beads_of(t.module)
                .map(|b| b.island)
                .chain([t.island])
                .collect();
            if islands.len() > 1 {
                out.push(Violation::TupleStoreSpansIslands {
                    module: self.modules[t.module.0 as usize].name.clone(),
                    islands: islands.iter().map(|i| self.island_label(*i)).collect(),
                });
            }
        }
        out
    }

    fn violations_of(&self, island: IslandId) -> Vec<String> {
        let label = self.island_label(island);
        self.validate_islands()
            .into_iter()
            .filter(|v| match v {
                Violation::WeaveSpansIslands { islands, .. }
                | Violation::TupleStoreSpansIslands { islands, .. }
                | Violation::BeadInSeveralIslands { islands, .. } => islands.contains(&label),
                Violation::StringOutsideIsland {
                    island,
                    weave_island,
                    ..
                } => *island == label || *weave_island == label,
                Violation::BeadUnassigned { .. } => false,
            })
            .map(|v| v.to_string())
            .collect()
    }

    /// Serializes an island and removes it from this runtime. Its address
    /// ranges return to their partitions' free lists.
    pub fn package_island(&mut self, island: IslandId) -> Result<Vec<u8>, MigrateError> {
        let desc = self
            .st
            .islands
            .get(&island)
            .cloned()
            .ok_or_else(|| MigrateError::UnknownIsland(island.to_string()))?;
        let violations = self.violations_of(island);
        if !violations.is_empty() {
            return Err(MigrateError::ClosureViolation(violations));
        }
        let beads: Vec<Bead> = desc
            .beads
            .iter()
            .filter_map(|b| self.st.registry.bead(*b).cloned())
            .collect();
        let tuple_stores: Vec<TupleStore> = self
            .st
            .registry
            .tuple_stores
            .values()
            .filter(|t| t.island == island)
            .cloned()
            .collect();
        let weaves: Vec<Weave> = self
            .st
            .weaver
            .weaves
            .values()
            .filter(|w| w.island == island)
            .map(|w| (**w).clone())
            .collect();
        let strings: Vec<StringState> = self
            .st
            .strings
            .values()
            .filter(|s| s.island == island)
            .cloned()
            .collect();
        let held: Vec<StringId> = strings
            .iter()
            .map(|s| s.id)
            .filter(|s| self.st.sched.holders.contains(s))
            .collect();
        let regions: Vec<(Region, Vec<u8>)> = self
            .mem
            .regions()
            .values()
            .filter(|r| r.island == island)
            .map(|r| {
                (
                    r.clone(),
                    self.mem.read_bytes(r.start, r.len).expect("mapped"),
                )
            })
            .collect();
        let used: BTreeSet<ModuleId> = beads.iter().map(|b| b.module).collect();
        let modules = used
            .iter()
            .map(|m| (*m, self.modules[m.0 as usize].name.clone()))
            .collect();
        let pkg = MigrationPackage {
            island: desc,
            modules,
            beads,
            tuple_stores,
            weaves,
            strings,
            held,
            regions,
        };
        let bytes = pkg.encode();

        for s in &pkg.strings {
            self.st.strings.remove(&s.id);
            self.st.string_names.remove(&s.name);
            self.st.sched.holders.remove(&s.id);
        }
        for w in &pkg.weaves {
            self.st.weaver.remove(w.id);
        }
        for b in &pkg.beads {
            self.st.registry.beads.remove(&b.id);
            self.st.registry.names.remove(&b.name);
        }
        for t in &pkg.tuple_stores {
            self.st.registry.tuple_stores.remove(&t.module);
        }
        for (r, _) in &pkg.regions {
            self.st.heap.unmap(&mut self.mem, r.start);
        }
        self.st.islands.remove(&island);
        self.st.island_names.remove(&pkg.island.name);
        self.reset_schedule_tracking();
        Ok(bytes)
    }

    /// Recreates a packaged island on `node`, keeping every id and address.
    pub fn admit_island(&mut self, node: NodeId, bytes: &[u8]) -> Result<IslandId, MigrateError> {
        let mut pkg = MigrationPackage::decode(bytes)?;
        if !self.st.heap.has_node(node) {
            return Err(MigrateError::UnknownNode(node));
        }

        let mut remap = BTreeMap::new();
        for (old, name) in &pkg.modules {
            let new = self
                .module_names
                .get(name)
                .copied()
                .ok_or_else(|| MigrateError::UnknownModule(name.clone()))?;
            remap.insert(*old, new);
        }
        let map = |m: ModuleId| remap.get(&m).copied().unwrap_or(m);

        let i = &pkg.island;
        if self.st.islands.contains_key(&i.id) || self.st.island_names.contains_key(&i.name) {
            return Err(MigrateError::IdCollision(format!("island {}", i.name)));
        }
        for b in &pkg.beads {
            if self.st.registry.beads.contains_key(&b.id)
                || self.st.registry.names.contains_key(&b.name)
            {
                return Err(MigrateError::IdCollision(format!("bead {}", b.name)));
            }
        }
        for t in &pkg.tuple_stores {
            if self.st.registry.tuple_stores.contains_key(&map(t.module)) {
                return Err(MigrateError::IdCollision(format!(
                    "tuple store of module {}",
                    t.module
                )));
            }
        }
        for w in &pkg.weaves {
            if self.st.weaver.weaves.contains_key(&w.id)
                || self.st.weaver.names.contains_key(&w.name)
            {
                return Err(MigrateError::IdCollision(format!("weave {}", w.name)));
            }
        }
        for s in &pkg.strings {
            if self.st.strings.contains_key(&s.id) || self.st.string_names.contains_key(&s.name) {
                return Err(MigrateError::IdCollision(format!("string {}", s.name)));
            }
        }
        for (r, _) in &pkg.regions {
            if let Some(hit) = self.mem.overlaps(r.start..r.end()) {
                return Err(MigrateError::AddressCollision(hit.start.max(r.start)));
            }
        }

        // claim every range before mapping anything so a collision leaves
        // the runtime untouched
        let mut claimed = Vec::new();
        for (r, _) in &pkg.regions {
            if let Err(e) = self.st.heap.reserve(r.start, r.len) {
                for (s, l) in claimed {
                    self.st.heap.release(s, l);
                }
                return Err(match e {
                    HeapError::AddressCollision(a) => MigrateError::AddressCollision(a),
                    _ => MigrateError::AddressCollision(r.start),
                });
            }
            claimed.push((r.start, r.len));
        }
        for (r, bytes) in &mut pkg.regions {
            r.node = node;
            if let RegionKind::TupleStore { module } = &mut r.kind {
                *module = map(*module);
            }
            self.mem.map_region(r.clone()).expect("overlap checked");
            self.mem.write_bytes(r.start, bytes).expect("just mapped");
        }

        for mut b in pkg.beads {
            b.module = map(b.module);
            b.node = node;
            self.counters.bead = self.counters.bead.max(b.id.0);
            self.st.registry.names.insert(b.name.clone(), b.id);
            self.st.registry.beads.insert(b.id, b);
        }
        for mut t in pkg.tuple_stores {
            t.module = map(t.module);
            self.st.registry.tuple_stores.insert(t.module, t);
        }
        for mut w in pkg.weaves {
            for row in &mut w.rows {
                row.module = map(row.module);
                for e in &mut row.entries {
                    if let GotEntry::Code { module, .. } = e {
                        *module = map(*module);
                    }
                }
            }
            w.row_of = w
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| (r.module, i))
                .collect();
            self.counters.weave = self.counters.weave.max(w.id.0);
            self.st.weaver.insert(w).expect("collision checked");
        }
        for mut s in pkg.strings {
            for f in &mut s.frames {
                f.module = map(f.module);
            }
            self.counters.string = self.counters.string.max(s.id.0);
            self.st.string_names.insert(s.name.clone(), s.id);
            self.st.strings.insert(s.id, s);
        }
        self.st.sched.holders.extend(pkg.held);
        let mut island = pkg.island;
        island.home_node = node;
        let id = island.id;
        self.counters.island = self.counters.island.max(id.0 + 1);
        for (_, r) in self.mem.regions().range(..) {
            self.counters.epoch = self.counters.epoch.max(r.epoch);
        }
        self.st.island_names.insert(island.name.clone(), id);
        self.st.islands.insert(id, island);
        self.reset_schedule_tracking();
        Ok(id)
    }

    /// Moves an island to `target` at the current safe point.
    pub fn migrate(&mut self, island: IslandId, target: NodeId) -> Result<(), MigrateError> {
        let desc = self
            .st
            .islands
            .get(&island)
            .ok_or_else(|| MigrateError::UnknownIsland(island.to_string()))?;
        if !self.st.heap.has_node(target) {
            return Err(MigrateError::UnknownNode(target));
        }
        if let Some(r) = desc.vm_region {
            if region_of(target) != r {
                return Err(MigrateError::RegionConstraint {
                    source_region: r,
                    target: region_of(target),
                });
            }
        }
        let home = desc.home_node;
        let bytes = self.package_island(island)?;
        if let Err(e) = self.admit_island(target, &bytes) {
            self.admit_island(home, &bytes)
                .expect("an island can always return to the addresses it just left");
            return Err(e);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::RuntimeOptions;
    use crate::vm::exec::OutputValue;
    use crate::wof::asm::assemble;

    const ALIAS: &str = "\
.data p 8
.data p1 8
func main:
    push 8
    alloc
    dup
    storeg p
    push 41
    storem
    loadg p
    storeg p1
    yield
    loadg p1
    loadm
    push 1
    add
    host print_int
    push 8
    alloc
    push 56
    host node_id
    halt
end
";

    fn setup(nodes: u32) -> (Runtime, IslandId) {
        let mut rt = Runtime::new(RuntimeOptions {
            nodes,
            ..RuntimeOptions::default()
        });
        let m = rt
            .define_module("m", vec![assemble(ALIAS).unwrap()])
            .unwrap();
        let i = rt.declare_island("isle", NodeId(0), None).unwrap();
        let b = rt.instantiate_bead(m, "b", NodeId(0), Some(i)).unwrap();
        let w = rt.create_weave("w", &[b]).unwrap();
        rt.spawn_string("s", w, "main", &[]).unwrap();
        (rt, i)
    }

    #[test]
    fn alias_survives_migration() {
        let (mut rt, i) = setup(4);
        rt.run_slice().unwrap();
        let before: Vec<(u64, Vec<u8>)> = rt
            .memory()
            .regions()
            .values()
            .map(|r| (r.start, rt.memory().read_bytes(r.start, r.len).unwrap()))
            .collect();
        rt.migrate(i, NodeId(3)).unwrap();
        let after: Vec<(u64, Vec<u8>)> = rt
            .memory()
            .regions()
            .values()
            .map(|r| (r.start, rt.memory().read_bytes(r.start, r.len).unwrap()))
            .collect();
        assert_eq!(before, after);
        rt.run_to_completion().unwrap();
        let out: Vec<OutputValue> = rt.output().iter().map(|e| e.value).collect();
        assert_eq!(out, vec![OutputValue::Int(42)]);
        let fresh = rt
            .memory()
            .regions()
            .values()
            .filter(|r| matches!(r.kind, RegionKind::Heap { .. }))
            .max_by_key(|r| r.epoch)
            .unwrap();
        assert_eq!(fresh.start >> 40, 3);
        assert_eq!(rt.bead(rt.bead_id("b").unwrap()).unwrap().node, NodeId(3));
    }

    #[test]
    fn package_round_trip_is_exact() {
        let (mut rt, i) = setup(2);
        rt.run_slice().unwrap();
        let first = rt.package_island(i).unwrap();
        assert!(rt.memory().regions().is_empty());
        rt.admit_island(NodeId(0), &first).unwrap();
        let second = rt.package_island(i).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn collisions_and_bad_input() {
        let (mut rt, i) = setup(2);
        rt.run_slice().unwrap();
        let pkg = rt.package_island(i).unwrap();
        // reuse the released range for something else
        let m = rt.module_id("m").unwrap();
        rt.instantiate_bead(m, "squatter", NodeId(0), None).unwrap();
        assert!(matches!(
            rt.admit_island(NodeId(1), &pkg),
            Err(MigrateError::AddressCollision(_))
        ));
        assert_eq!(
            rt.admit_island(NodeId(1), b"nope"),
            Err(MigrateError::BadMagic)
        );
        assert!(matches!(
            rt.admit_island(NodeId(1), &pkg[..pkg.len() - 3]),
            Err(MigrateError::TruncatedSection { .. })
        ));
        assert_eq!(
            rt.admit_island(NodeId(7), &pkg),
            Err(MigrateError::UnknownNode(NodeId(7)))
        );
    }

    #[test]
    fn region_constraint_and_unknown_node() {
        let mut rt = Runtime::new(RuntimeOptions {
            nodes: 40,
            ..RuntimeOptions::default()
        });
        let m = rt
            .define_module("m", vec![assemble(ALIAS).unwrap()])
            .unwrap();
        let i = rt.declare_island("isle", NodeId(1), Some(0)).unwrap();
        rt.instantiate_bead(m, "b", NodeId(1), Some(i)).unwrap();
        assert_eq!(
            rt.migrate(i, NodeId(17)),
            Err(MigrateError::RegionConstraint {
                source_region: 0,
                target: 1
            })
        );
        assert_eq!(
            rt.migrate(i, NodeId(99)),
            Err(MigrateError::UnknownNode(NodeId(99)))
        );
        rt.migrate(i, NodeId(15)).unwrap();
    }

    #[test]
    fn closure_violations_block_migration() {
        let mut rt = Runtime::new(RuntimeOptions::default());
        let src = ".tuple shared 8\nfunc main:\n halt\n";
        let m = rt.define_module("m", vec![assemble(src).unwrap()]).unwrap();
        let a = rt.declare_island("a", NodeId(0), None).unwrap();
        let b = rt.declare_island("b", NodeId(0), None).unwrap();
        rt.instantiate_bead(m, "x", NodeId(0), Some(a)).unwrap();
        rt.instantiate_bead(m, "y", NodeId(0), Some(b)).unwrap();
        let v = rt.validate_islands();
        assert!(matches!(
            v.as_slice(),
            [Violation::TupleStoreSpansIslands { .. }]
        ));
        assert!(matches!(
            rt.migrate(b, NodeId(0)),
            Err(MigrateError::ClosureViolation(_))
        ));
    }
}
