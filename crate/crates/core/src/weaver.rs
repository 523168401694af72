//! Weaves: namespaces built from beads, each carrying a GOT that binds
//! every slot of every participating module to one storage or code
//! location.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use thiserror::Error;

use crate::ids::{BeadId, IslandId, ModuleId, StringId, WeaveId};
use crate::registry::{Bead, ModuleDef, SlotTarget, TupleStore};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WeaveError {
    #[error("a weave needs at least one bead")]
    Empty,
    #[error("unknown bead `{0}`")]
    UnknownBead(String),
    #[error("module `{0}` appears twice in one weave")]
    DuplicateModule(String),
    #[error("bead `{bead}` is in island {found}, weave is in island {expected}")]
    IslandMismatch {
        bead: String,
        expected: IslandId,
        found: IslandId,
    },
    #[error("`{module}` imports `{name}`, which no bead in the weave exports")]
    UnresolvedImport { module: String, name: String },
    #[error("`{name}` is exported by several modules: {}", .candidates.join(", "))]
    AmbiguousImport {
        name: String,
        candidates: Vec<String>,
    },
    #[error("slot {slot} out of range for module {module}")]
    SlotOutOfRange { module: ModuleId, slot: u32 },
    #[error("weave name `{0}` already taken")]
    DuplicateName(String),
    #[error("unknown weave `{0}`")]
    UnknownWeave(String),
    #[error("weave is bound to live strings {}", .0.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","))]
    WeaveInUse(Vec<StringId>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GotEntry {
    Data(u64),
    Code { module: ModuleId, offset: u32 },
}

/// The GOT section of one module inside a weave.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GotRow {
    pub module: ModuleId,
    pub bead: BeadId,
    pub entries: Vec<GotEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Weave {
    pub id: WeaveId,
    pub name: String,
    pub island: IslandId,
    pub beads: Vec<BeadId>,
    pub rows: Vec<GotRow>,
    pub row_of: BTreeMap<ModuleId, usize>,
}

impl Weave {
    pub fn got_lookup(&self, module: ModuleId, slot: u32) -> Result<GotEntry, WeaveError> {
        self.row_of
            .get(&module)
            .and_then(|&r| self.rows[r].entries.get(slot as usize))
            .copied()
            .ok_or(WeaveError::SlotOutOfRange { module, slot })
    }

    pub fn row(&self, module: ModuleId) -> Option<&GotRow> {
        self.row_of.get(&module).map(|&r| &self.rows[r])
    }

    pub fn got_len(&self) -> usize {
        self.rows.iter().map(|r| r.entries.len()).sum()
    }
}

fn own_entry(
    module: &ModuleDef,
    bead: &Bead,
    slot: u32,
    tuples: &BTreeMap<ModuleId, TupleStore>,
) -> Option<GotEntry> {
    let slot = module.resolve_alias(slot);
    Some(match module.slots.get(slot as usize)?.target {
        SlotTarget::Data { tuple: true, .. } => {
            GotEntry::Data(tuples.get(&module.id)?.members.get(&slot)?.0)
        }
        SlotTarget::Data { offset, .. } => GotEntry::Data(bead.data_base + offset as u64),
        SlotTarget::Function { offset } => GotEntry::Code {
            module: module.id,
            offset,
        },
        SlotTarget::Alias(_) | SlotTarget::Import => return None,
    })
}

/// Builds a weave's GOT. Beads are given in weave order; `module` maps a
/// bead's module id to its definition.
pub fn create_weave<'m>(
    id: WeaveId,
    name: &str,
    beads: &[&Bead],
    module: impl Fn(ModuleId) -> &'m ModuleDef,
    tuples: &BTreeMap<ModuleId, TupleStore>,
) -> Result<Weave, WeaveError> {
    let first = beads.first().ok_or(WeaveError::Empty)?;
    let island = first.island;
    let mut row_of = BTreeMap::new();
    for (i, b) in beads.iter().enumerate() {
        if b.island != island {
            return Err(WeaveError::IslandMismatch {
                bead: b.name.clone(),
                expected: island,
                found: b.island,
            });
        }
        if row_of.insert(b.module, i).is_some() {
            return Err(WeaveError::DuplicateModule(module(b.module).name.clone()));
        }
    }

    let mut rows = Vec::with_capacity(beads.len());
    for b in beads {
        let def = module(b.module);
        let mut entries = Vec::with_capacity(def.slots.len());
        for (slot, sym) in def.slots.iter().enumerate() {
            let entry = if sym.target == SlotTarget::Import {
                let exporters: Vec<&Bead> = beads
                    .iter()
                    .copied()
                    .filter(|o| {
                        o.module != b.module && module(o.module).exports.contains_key(&sym.name)
                    })
                    .collect();
                match exporters.as_slice() {
                    [] => {
                        return Err(WeaveError::UnresolvedImport {
                            module: def.name.clone(),
                            name: sym.name.clone(),
                        })
                    }
                    [o] => {
                        let odef = module(o.module);
                        own_entry(odef, o, odef.exports[&sym.name], tuples)
                    }
                    many => {
                        return Err(WeaveError::AmbiguousImport {
                            name: sym.name.clone(),
                            candidates: many
                                .iter()
                                .map(|o| module(o.module).name.clone())
                                .collect(),
                        })
                    }
                }
            } else {
                own_entry(def, b, slot as u32, tuples)
            };
            entries.push(entry.expect("registry keeps slot tables consistent"));
        }
        rows.push(GotRow {
            module: b.module,
            bead: b.id,
            entries,
        });
    }
    Ok(Weave {
        id,
        name: name.to_owned(),
        island,
        beads: beads.iter().map(|b| b.id).collect(),
        rows,
        row_of,
    })
}

/// Live weaves plus the reverse index from beads to the weaves using them.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Weaver {
    pub weaves: BTreeMap<WeaveId, Arc<Weave>>,
    pub names: BTreeMap<String, WeaveId>,
    pub membership: BTreeMap<BeadId, BTreeSet<WeaveId>>,
}

impl Weaver {
    pub fn get(&self, id: WeaveId) -> Option<&Arc<Weave>> {
        self.weaves.get(&id)
    }

    pub fn by_name(&self, name: &str) -> Option<&Arc<Weave>> {
        self.names.get(name).and_then(|id| self.weaves.get(id))
    }

    pub fn insert(&mut self, weave: Weave) -> Result<WeaveId, WeaveError> {
        if self.names.contains_key(&weave.name) {
            return Err(WeaveError::DuplicateName(weave.name));
        }
        let id = weave.id;
        for b in &weave.beads {
            self.membership.entry(*b).or_default().insert(id);
        }
        self.names.insert(weave.name.clone(), id);
        self.weaves.insert(id, Arc::new(weave));
        Ok(id)
    }

    pub fn remove(&mut self, id: WeaveId) -> Option<Arc<Weave>> {
        let w = self.weaves.remove(&id)?;
        self.names.remove(&w.name);
        for b in &w.beads {
            if let Some(set) = self.membership.get_mut(b) {
                set.remove(&id);
                if set.is_empty() {
                    self.membership.remove(b);
                }
            }
        }
        Some(w)
    }

    pub fn weave_membership(&self, bead: BeadId) -> Vec<WeaveId> {
        self.membership
            .get(&bead)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default()
    }

    /// True when the bead is used by at least two live weaves.
    pub fn is_shared(&self, bead: BeadId) -> bool {
        self.membership.get(&bead).is_some_and(|s| s.len() >= 2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heap::Heap;
    use crate::ids::NodeId;
    use crate::registry::{define_module, Arena, Registry};
    use crate::vm::VmMemory;
    use crate::wof::asm::assemble;

    struct World {
        modules: Vec<ModuleDef>,
        reg: Registry,
        heap: Heap,
        mem: VmMemory,
        epoch: u64,
        next: u64,
    }

    impl World {
        fn new(sources: &[(&str, &str)]) -> Self {
            let modules = sources
                .iter()
                .enumerate()
                .map(|(i, (n, s))| {
                    let mut o = assemble(s).unwrap();
                    o.name = n.to_string();
                    define_module(ModuleId(i as u32), n, vec![o]).unwrap()
                })
                .collect();
            Self {
                modules,
                reg: Registry::default(),
                heap: Heap::new(1),
                mem: VmMemory::new(),
                epoch: 0,
                next: 0,
            }
        }

        fn bead(&mut self, module: usize, name: &str) -> BeadId {
            self.next += 1;
            let id = BeadId(self.next);
            let mut arena = Arena {
                heap: &mut self.heap,
                mem: &mut self.mem,
                epoch: &mut self.epoch,
            };
            self.reg
                .instantiate(
                    &mut arena,
                    &self.modules[module],
                    id,
                    name,
                    NodeId(0),
                    IslandId(0),
                )
                .unwrap();
            id
        }

        fn weave(&self, id: u64, beads: &[BeadId]) -> Result<Weave, WeaveError> {
            let bs: Vec<&Bead> = beads.iter().map(|b| &self.reg.beads[b]).collect();
            create_weave(
                WeaveId(id),
                &format!("w{id}"),
                &bs,
                |m| &self.modules[m.0 as usize],
                &self.reg.tuple_stores,
            )
        }
    }

    const IP: &str = ".data packets 8\n.data table 32\nfunc send:\n loadg packets\n push 1\n add\n storeg packets\n ret 0\n";
    const TELNET: &str = ".import send\n.data session 8\nfunc main:\n call send\n halt\n";
    const FTP: &str = ".import send\n.data xfer 8\nfunc main:\n call send\n halt\n";

    fn data_addrs(w: &Weave, m: ModuleId) -> Vec<u64> {
        w.row(m)
            .unwrap()
            .entries
            .iter()
            .filter_map(|e| match e {
                GotEntry::Data(a) => Some(*a),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn shared_bead_recombines_and_private_beads_separate() {
        let mut w = World::new(&[("ip", IP), ("telnet", TELNET), ("ftp", FTP)]);
        let ip1 = w.bead(0, "ip1");
        let ip2 = w.bead(0, "ip2");
        let t1 = w.bead(1, "t1");
        let t2 = w.bead(1, "t2");
        let t3 = w.bead(1, "t3");
        let f1 = w.bead(2, "f1");
        let weaves = [
            w.weave(1, &[t1, ip1]).unwrap(),
            w.weave(2, &[t2, ip1]).unwrap(),
            w.weave(3, &[f1, ip1]).unwrap(),
            w.weave(4, &[t3, ip2]).unwrap(),
        ];
        let ip = ModuleId(0);
        let telnet = ModuleId(1);
        assert_eq!(data_addrs(&weaves[0], ip), data_addrs(&weaves[1], ip));
        assert_eq!(data_addrs(&weaves[0], ip), data_addrs(&weaves[2], ip));
        assert_ne!(data_addrs(&weaves[0], ip), data_addrs(&weaves[3], ip));
        let t: Vec<_> = [0, 1, 3]
            .iter()
            .map(|&i| data_addrs(&weaves[i], telnet))
            .collect();
        assert!(t[0] != t[1] && t[1] != t[2] && t[0] != t[2]);
        // telnet's import slot binds to ip's code
        let send = weaves[0].got_lookup(telnet, 2).unwrap();
        assert_eq!(
            send,
            GotEntry::Code {
                module: ip,
                offset: 0
            }
        );
        // the session address lies inside t1's data context
        let GotEntry::Data(a) = weaves[0].got_lookup(telnet, 0).unwrap() else {
            panic!()
        };
        assert!(w.reg.beads[&t1].contains(a));

        let mut weaver = Weaver::default();
        for wv in weaves {
            weaver.insert(wv).unwrap();
        }
        assert_eq!(weaver.weave_membership(ip1).len(), 3);
        assert!(weaver.is_shared(ip1));
        assert!(!weaver.is_shared(ip2));
        weaver.remove(WeaveId(2));
        assert_eq!(weaver.weave_membership(ip1), vec![WeaveId(1), WeaveId(3)]);
        assert!(weaver.weave_membership(t2).is_empty());
    }

    #[test]
    fn resolution_errors() {
        let mut w = World::new(&[("ip", IP), ("telnet", TELNET), ("ftp", FTP), ("ip_b", IP)]);
        let t = w.bead(1, "t");
        let f = w.bead(2, "f");
        let ip = w.bead(0, "ip");
        let ip_again = w.bead(0, "ip_again");
        let ipb = w.bead(3, "ipb");
        assert_eq!(
            w.weave(1, &[t, f]).unwrap_err(),
            WeaveError::UnresolvedImport {
                module: "telnet".into(),
                name: "send".into()
            }
        );
        assert_eq!(
            w.weave(1, &[ip, ip_again]).unwrap_err(),
            WeaveError::DuplicateModule("ip".into())
        );
        assert!(matches!(
            w.weave(1, &[t, ip, ipb]).unwrap_err(),
            WeaveError::AmbiguousImport { ref candidates, .. } if candidates.len() == 2
        ));
        assert_eq!(w.weave(1, &[]).unwrap_err(), WeaveError::Empty);
        let lone = w.weave(1, &[ip]).unwrap();
        assert_eq!(lone.got_len(), 3);
        assert!(lone.got_lookup(ModuleId(0), 3).is_err());
    }

    #[test]
    fn weave_creation_copies_nothing() {
        let mut w = World::new(&[("ip", IP), ("telnet", TELNET)]);
        let ip = w.bead(0, "ip");
        let t = w.bead(1, "t");
        let before = w.mem.stats().writes;
        w.weave(1, &[t, ip]).unwrap();
        assert_eq!(w.mem.stats().writes, before);
    }
}
