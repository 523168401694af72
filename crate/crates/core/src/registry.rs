//! Module definitions and bead instantiation.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::heap::{round_cell, Heap, HeapError};
use crate::ids::{BeadId, IslandId, ModuleId, NodeId, WeaveId};
use crate::vm::memory::{RegionKind, VmMemory};
use crate::wof::isa::{self, Instr};
use crate::wof::{function_extents, Issue, ObjectModule, SymbolKind};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RegistryError {
    #[error("module has no objects")]
    EmptyModule,
    #[error("name `{0}` exported by more than one object")]
    DuplicateExport(String),
    #[error("object `{object}` is invalid: {issue}")]
    InvalidObject { object: String, issue: Issue },
    #[error("module `{0}` already defined")]
    DuplicateModule(String),
    #[error("unknown module `{0}`")]
    UnknownModule(String),
    #[error("unknown bead `{0}`")]
    UnknownBead(String),
    #[error("bead name `{0}` already taken")]
    DuplicateBead(String),
    #[error("bead is referenced by live weaves {}", list(.0))]
    BeadInUse(Vec<WeaveId>),
    #[error("`{module}` has no data symbol `{symbol}`")]
    NotDataSymbol { module: String, symbol: String },
    #[error("module `{0}` already has beads; tuple membership is fixed")]
    TupleAfterInstantiation(String),
    #[error(transparent)]
    Heap(#[from] HeapError),
}

fn list(ids: &[WeaveId]) -> String {
    ids.iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Placement of one object inside its module's concatenated images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObjectLayout {
    pub name: String,
    pub code_base: u32,
    pub data_base: u32,
    pub slot_base: u32,
    pub slot_count: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SlotTarget {
    /// Offset into the module's data context.
    Data { offset: u32, size: u32, tuple: bool },
    /// Entry offset in the module's concatenated code.
    Function { offset: u32 },
    /// Import satisfied by another slot of the same module.
    Alias(u32),
    /// Import left for the weaver.
    Import,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MergedSymbol {
    pub name: String,
    pub object: u16,
    pub exported: bool,
    pub target: SlotTarget,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FunctionInfo {
    pub name: String,
    pub object: u16,
    pub locals: u16,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleDef {
    pub id: ModuleId,
    pub name: String,
    pub objects: Vec<ObjectModule>,
    pub layouts: Vec<ObjectLayout>,
    pub code: Vec<u8>,
    pub data_template: Vec<u8>,
    /// Module-wide slot table: each object's slots, in object order.
    pub slots: Vec<MergedSymbol>,
    pub exports: BTreeMap<String, u32>,
    pub unresolved_imports: Vec<String>,
    /// Functions keyed by entry offset in `code`.
    pub functions: BTreeMap<u32, FunctionInfo>,
}

fn locals_needed(code: &[u8], start: u32, end: u32) -> u16 {
    let mut at = start as usize;
    let mut need = 0u32;
    while at < end as usize {
        let Ok((instr, len)) = isa::decode(code, at) else {
            break;
        };
        if let Instr::LoadL(i) | Instr::StoreL(i) = instr {
            need = need.max(i as u32 + 1);
        }
        at += len;
    }
    need.min(u16::MAX as u32) as u16
}

pub fn define_module(
    id: ModuleId,
    name: &str,
    objects: Vec<ObjectModule>,
) -> Result<ModuleDef, RegistryError> {
    if objects.is_empty() {
        return Err(RegistryError::EmptyModule);
    }
    for o in &objects {
        if let Some(issue) = o.validate().issues.into_iter().next() {
            return Err(RegistryError::InvalidObject {
                object: o.name.clone(),
                issue,
            });
        }
    }

    let mut def = ModuleDef {
        id,
        name: name.to_owned(),
        objects: Vec::new(),
        layouts: Vec::new(),
        code: Vec::new(),
        data_template: Vec::new(),
        slots: Vec::new(),
        exports: BTreeMap::new(),
        unresolved_imports: Vec::new(),
        functions: BTreeMap::new(),
    };

    for (index, o) in objects.iter().enumerate() {
        let object = index as u16;
        let layout = ObjectLayout {
            name: o.name.clone(),
            code_base: def.code.len() as u32,
            data_base: round_cell(def.data_template.len() as u64) as u32,
            slot_base: def.slots.len() as u32,
            slot_count: o.slot_count() as u32,
        };
        def.code.extend_from_slice(&o.code);
        def.data_template.resize(layout.data_base as usize, 0);
        def.data_template.extend_from_slice(&o.data_template);

        for s in &o.symbols {
            let target = match s.kind {
                SymbolKind::Data => SlotTarget::Data {
                    offset: layout.data_base + s.offset,
                    size: s.size,
                    tuple: s.tuple_member,
                },
                SymbolKind::Function => SlotTarget::Function {
                    offset: layout.code_base + s.offset,
                },
            };
            let slot = def.slots.len() as u32;
            if s.exported && def.exports.insert(s.name.clone(), slot).is_some() {
                return Err(RegistryError::DuplicateExport(s.name.clone()));
            }
            def.slots.push(MergedSymbol {
                name: s.name.clone(),
                object,
                exported: s.exported,
                target,
            });
        }
        for imp in &o.imports {
            def.slots.push(MergedSymbol {
                name: imp.clone(),
                object,
                exported: false,
                target: SlotTarget::Import,
            });
        }

        for (fname, (start, end)) in function_extents(o) {
            def.functions.insert(
                layout.code_base + start,
                FunctionInfo {
                    name: fname,
                    object,
                    locals: locals_needed(&o.code, start, end),
                },
            );
        }
        def.layouts.push(layout);
    }
    let padded = round_cell(def.data_template.len() as u64) as usize;
    def.data_template.resize(padded, 0);

    let mut unresolved = BTreeSet::new();
    for slot in &mut def.slots {
        if slot.target != SlotTarget::Import {
            continue;
        }
        match def.exports.get(&slot.name) {
            Some(&target) => slot.target = SlotTarget::Alias(target),
            None => {
                if unresolved.insert(slot.name.clone()) {
                    def.unresolved_imports.push(slot.name.clone());
                }
            }
        }
    }
    def.objects = objects;
    Ok(def)
}

impl ModuleDef {
    pub fn slot_of_object(&self, object: u16, local_slot: u16) -> Option<u32> {
        let l = self.layouts.get(object as usize)?;
        (u32::from(local_slot) < l.slot_count).then_some(l.slot_base + u32::from(local_slot))
    }

    pub fn export(&self, name: &str) -> Option<(u32, &MergedSymbol)> {
        let slot = *self.exports.get(name)?;
        Some((slot, &self.slots[slot as usize]))
    }

    /// Follows intra-module aliases to the defining slot.
    pub fn resolve_alias(&self, mut slot: u32) -> u32 {
        while let Some(MergedSymbol {
            target: SlotTarget::Alias(t),
            ..
        }) = self.slots.get(slot as usize)
        {
            slot = *t;
        }
        slot
    }

    pub fn function_at(&self, offset: u32) -> Option<&FunctionInfo> {
        self.functions.get(&offset)
    }

    pub fn function_named(&self, name: &str) -> Option<(u32, &FunctionInfo)> {
        let (_, sym) = self.export(name)?;
        match sym.target {
            SlotTarget::Function { offset } => self.functions.get(&offset).map(|f| (offset, f)),
            _ => None,
        }
    }

    pub fn tuple_slots(&self) -> impl Iterator<Item = (u32, u32, u32)> + '_ {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| match s.target {
                SlotTarget::Data {
                    offset,
                    size,
                    tuple: true,
                } => Some((i as u32, offset, size)),
                _ => None,
            })
    }

    pub fn data_len(&self) -> u64 {
        self.data_template.len() as u64
    }

    pub fn global_count(&self) -> usize {
        self.slots
            .iter()
            .filter(|s| matches!(s.target, SlotTarget::Data { .. }))
            .count()
    }

    /// Marks every data symbol called `symbol` as a tuple-space member.
    pub fn mark_tuple(&mut self, symbol: &str) -> Result<(), RegistryError> {
        let mut found = false;
        for s in &mut self.slots {
            if let SlotTarget::Data { tuple, .. } = &mut s.target {
                if s.name == symbol {
                    *tuple = true;
                    found = true;
                }
            }
        }
        if found {
            Ok(())
        } else {
            Err(RegistryError::NotDataSymbol {
                module: self.name.clone(),
                symbol: symbol.to_owned(),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bead {
    pub id: BeadId,
    pub name: String,
    pub module: ModuleId,
    pub data_base: u64,
    pub data_len: u64,
    pub creation_epoch: u64,
    pub node: NodeId,
    pub island: IslandId,
}

impl Bead {
    pub fn contains(&self, addr: u64) -> bool {
        addr >= self.data_base && addr < self.data_base + self.data_len
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TupleStore {
    pub module: ModuleId,
    pub base: u64,
    pub len: u64,
    /// Module slot → (shared address, size).
    pub members: BTreeMap<u32, (u64, u32)>,
    pub refcount: u32,
    pub island: IslandId,
}

/// Everything the registry needs to carve memory.
pub(crate) struct Arena<'a> {
    pub heap: &'a mut Heap,
    pub mem: &'a mut VmMemory,
    pub epoch: &'a mut u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Registry {
    pub beads: BTreeMap<BeadId, Bead>,
    pub tuple_stores: BTreeMap<ModuleId, TupleStore>,
    pub names: BTreeMap<String, BeadId>,
}

impl Registry {
    pub fn bead(&self, id: BeadId) -> Option<&Bead> {
        self.beads.get(&id)
    }

    pub fn by_name(&self, name: &str) -> Option<&Bead> {
        self.names.get(name).and_then(|id| self.beads.get(id))
    }

    pub fn beads_of(&self, module: ModuleId) -> impl Iterator<Item = &Bead> {
        self.beads.values().filter(move |b| b.module == module)
    }

    /// Creates a bead: a fresh data context initialized from the module's
    /// template. Returns the number of template bytes copied.
    pub(crate) fn instantiate(
        &mut self,
        arena: &mut Arena<'_>,
        module: &ModuleDef,
        id: BeadId,
        name: &str,
        node: NodeId,
        island: IslandId,
    ) -> Result<u64, RegistryError> {
        if self.names.contains_key(name) {
            return Err(RegistryError::DuplicateBead(name.to_owned()));
        }
        let len = module.data_len();
        let base = arena.heap.map(
            arena.mem,
            arena.epoch,
            node,
            len,
            RegionKind::DataContext { bead: id },
            island,
        )?;
        let epoch = *arena.epoch;
        let mut copied = 0;
        if len > 0 {
            arena
                .mem
                .write_bytes(base, &module.data_template)
                .expect("freshly mapped");
            copied += len;
        }
        let tuples: Vec<_> = module.tuple_slots().collect();
        if !tuples.is_empty() {
            match self.tuple_stores.get_mut(&module.id) {
                Some(store) => store.refcount += 1,
                None => {
                    let store_len: u64 = tuples.iter().map(|t| round_cell(t.2 as u64)).sum();
                    let sbase = arena
                        .heap
                        .map(
                            arena.mem,
                            arena.epoch,
                            node,
                            store_len,
                            RegionKind::TupleStore { module: module.id },
                            island,
                        )
                        .inspect_err(|_| {
                            arena.heap.unmap(arena.mem, base);
                        })?;
                    let mut members = BTreeMap::new();
                    let mut at = sbase;
                    for (slot, offset, size) in tuples {
                        let init = &module.data_template[offset as usize..(offset + size) as usize];
                        arena.mem.write_bytes(at, init).expect("freshly mapped");
                        copied += size as u64;
                        members.insert(slot, (at, size));
                        at += round_cell(size as u64);
                    }
                    self.tuple_stores.insert(
                        module.id,
                        TupleStore {
                            module: module.id,
                            base: sbase,
                            len: store_len,
                            members,
                            refcount: 1,
                            island,
                        },
                    );
                }
            }
        }
        self.names.insert(name.to_owned(), id);
        self.beads.insert(
            id,
            Bead {
                id,
                name: name.to_owned(),
                module: module.id,
                data_base: base,
                data_len: len,
                creation_epoch: epoch,
                node,
                island,
            },
        );
        Ok(copied)
    }

    /// Releases a bead's data context; the caller checks weave membership.
    pub(crate) fn destroy(
        &mut self,
        arena: &mut Arena<'_>,
        id: BeadId,
        in_use: Vec<WeaveId>,
    ) -> Result<(), RegistryError> {
        if !in_use.is_empty() {
            return Err(RegistryError::BeadInUse(in_use));
        }
        let bead = self
            .beads
            .remove(&id)
            .ok_or_else(|| RegistryError::UnknownBead(id.to_string()))?;
        self.names.remove(&bead.name);
        arena.heap.unmap(arena.mem, bead.data_base);
        if let Some(store) = self.tuple_stores.get_mut(&bead.module) {
            store.refcount -= 1;
            if store.refcount == 0 {
                let base = store.base;
                self.tuple_stores.remove(&bead.module);
                arena.heap.unmap(arena.mem, base);
            }
        }
        Ok(())
    }
}
