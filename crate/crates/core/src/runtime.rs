//! The tapestry runtime: one process holding modules, beads, weaves,
//! strings and islands, and the scheduler that drives them.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::heap::{Heap, PARTITION_SPAN};
use crate::ids::{BeadId, IslandId, ModuleId, NodeId, StringId, WeaveId};
use crate::migrate::Island;
use crate::registry::{define_module, Arena, Bead, ModuleDef, Registry, RegistryError};
use crate::snapshot::Checkpoint;
use crate::strings::{
    compute_equivalence_classes, EquivalenceClass, SchedPolicy, SchedState, StringError,
    StringState,
};
use crate::vm::exec::{enter_frame, run_quantum, ExecEnv, ExecStatus, Limits, OutputEvent};
use crate::vm::memory::VmMemory;
use crate::weaver::{create_weave, GotEntry, Weave, WeaveError, Weaver};
use crate::wof::ObjectModule;

/// Register-level operations performed by one context switch: park the
/// outgoing cursor, load the incoming string reference and its weave
/// pointer.
pub const SWITCH_OPS: u64 = 3;

#[derive(Clone, Debug)]
pub struct RuntimeOptions {
    pub nodes: u32,
    pub partition_span: u64,
    pub limits: Limits,
    pub policy: SchedPolicy,
    pub record_slices: bool,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self {
            nodes: 1,
            partition_span: PARTITION_SPAN,
            limits: Limits::default(),
            policy: SchedPolicy::Cooperative,
            record_slices: false,
        }
    }
}

/// Everything a checkpoint has to put back besides memory pages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TapestryState {
    pub registry: Registry,
    pub weaver: Weaver,
    pub strings: BTreeMap<StringId, StringState>,
    pub string_names: BTreeMap<String, StringId>,
    pub islands: BTreeMap<IslandId, Island>,
    pub island_names: BTreeMap<String, IslandId>,
    pub heap: Heap,
    pub sched: SchedState,
}

/// Id and epoch sources. Never rewound, so ids stay unique across
/// restores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub bead: u64,
    pub weave: u64,
    pub string: u64,
    pub island: u32,
    pub epoch: u64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stats {
    pub instructions: u64,
    pub slices: u64,
    pub switches: u64,
    pub switch_ops: u64,
    /// Global-data bytes moved while switching.
    pub switch_bytes_copied: u64,
    /// Global-data bytes moved while spawning strings.
    pub spawn_bytes_copied: u64,
    /// Template bytes copied into new data contexts.
    pub bead_bytes_copied: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceRecord {
    pub string: StringId,
    pub instructions: u64,
    pub status: ExecStatus,
    pub in_shared_bead: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct RunReport {
    pub slices: u64,
    pub instructions: u64,
}

#[derive(Clone, Debug)]
struct Cursor {
    string: StringId,
    weave: Arc<Weave>,
}

pub struct Runtime {
    pub(crate) opts: RuntimeOptions,
    pub(crate) modules: Vec<Arc<ModuleDef>>,
    pub(crate) module_names: BTreeMap<String, ModuleId>,
    pub(crate) st: TapestryState,
    pub(crate) mem: VmMemory,
    pub(crate) counters: Counters,
    pub(crate) checkpoints: BTreeMap<String, Checkpoint>,
    pub(crate) output: Vec<OutputEvent>,
    pub(crate) stats: Stats,
    slices: Vec<SliceRecord>,
    cursor: Option<Cursor>,
    structure_gen: u64,
    classes: (u64, BTreeMap<StringId, u32>),
    yields: BTreeMap<StringId, (u64, u64)>,
    stuck: BTreeSet<StringId>,
}

impl Runtime {
    pub fn new(opts: RuntimeOptions) -> Self {
        let heap = Heap::with_span(opts.nodes, opts.partition_span);
        let sched = SchedState::new(opts.policy);
        Self {
            opts,
            modules: Vec::new(),
            module_names: BTreeMap::new(),
            st: TapestryState {
                registry: Registry::default(),
                weaver: Weaver::default(),
                strings: BTreeMap::new(),
                string_names: BTreeMap::new(),
                islands: BTreeMap::new(),
                island_names: BTreeMap::new(),
                heap,
                sched,
            },
            mem: VmMemory::new(),
            counters: Counters::default(),
            checkpoints: BTreeMap::new(),
            output: Vec::new(),
            stats: Stats::default(),
            slices: Vec::new(),
            cursor: None,
            structure_gen: 1,
            classes: (0, BTreeMap::new()),
            yields: BTreeMap::new(),
            stuck: BTreeSet::new(),
        }
    }

    // --- accessors -----------------------------------------------------

    pub fn options(&self) -> &RuntimeOptions {
        &self.opts
    }

    pub fn state(&self) -> &TapestryState {
        &self.st
    }

    pub fn memory(&self) -> &VmMemory {
        &self.mem
    }

    pub fn memory_mut(&mut self) -> &mut VmMemory {
        &mut self.mem
    }

    pub fn modules(&self) -> &[Arc<ModuleDef>] {
        &self.modules
    }

    pub fn module(&self, id: ModuleId) -> Option<&Arc<ModuleDef>> {
        self.modules.get(id.0 as usize)
    }

    pub fn module_id(&self, name: &str) -> Result<ModuleId> {
        self.module_names
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownModule(name.to_owned()))
    }

    pub fn bead(&self, id: BeadId) -> Option<&Bead> {
        self.st.registry.bead(id)
    }

    pub fn bead_id(&self, name: &str) -> Result<BeadId> {
        self.st
            .registry
            .names
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownBead(name.to_owned()))
    }

    pub fn weave(&self, id: WeaveId) -> Option<&Arc<Weave>> {
        self.st.weaver.get(id)
    }

    pub fn weave_id(&self, name: &str) -> Result<WeaveId> {
        self.st
            .weaver
            .names
            .get(name)
            .copied()
            .ok_or_else(|| Error::Weave(WeaveError::UnknownWeave(name.to_owned())))
    }

    pub fn string(&self, id: StringId) -> Option<&StringState> {
        self.st.strings.get(&id)
    }

    pub fn string_id(&self, name: &str) -> Option<StringId> {
        self.st.string_names.get(name).copied()
    }

    pub fn island_id(&self, name: &str) -> Result<IslandId> {
        self.st
            .island_names
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownIsland(name.to_owned()))
    }

    pub fn output(&self) -> &[OutputEvent] {
        &self.output
    }

    pub fn output_of(&self, string: StringId) -> Vec<OutputEvent> {
        self.output
            .iter()
            .filter(|e| e.string == string)
            .copied()
            .collect()
    }

    pub fn stats(&self) -> Stats {
        self.stats
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn slices(&self) -> &[SliceRecord] {
        &self.slices
    }

    pub fn set_policy(&mut self, policy: SchedPolicy) {
        self.opts.policy = policy;
        self.st.sched.policy = policy;
    }

    pub fn record_slices(&mut self, on: bool) {
        self.opts.record_slices = on;
    }

    pub(crate) fn touch_structure(&mut self) {
        self.structure_gen += 1;
        self.cursor = None;
    }

    // --- composition ---------------------------------------------------

    pub fn add_node(&mut self, node: NodeId) -> bool {
        self.st.heap.add_node(node)
    }

    pub fn define_module(&mut self, name: &str, objects: Vec<ObjectModule>) -> Result<ModuleId> {
        if self.module_names.contains_key(name) {
            return Err(RegistryError::DuplicateModule(name.to_owned()).into());
        }
        let id = ModuleId(self.modules.len() as u32);
        let def = define_module(id, name, objects)?;
        self.modules.push(Arc::new(def));
        self.module_names.insert(name.to_owned(), id);
        Ok(id)
    }

    /// Marks a data symbol as a tuple-space member. Only allowed before the
    /// module's first bead.
    pub fn mark_tuple(&mut self, module: ModuleId, symbol: &str) -> Result<()> {
        let def = self
            .modules
            .get_mut(module.0 as usize)
            .ok_or_else(|| Error::UnknownModule(module.to_string()))?;
        if self.st.registry.beads_of(module).next().is_some() {
            return Err(RegistryError::TupleAfterInstantiation(def.name.clone()).into());
        }
        Arc::make_mut(def).mark_tuple(symbol)?;
        Ok(())
    }

    pub fn declare_island(
        &mut self,
        name: &str,
        home_node: NodeId,
        vm_region: Option<u32>,
    ) -> Result<IslandId> {
        if self.st.island_names.contains_key(name) {
            return Err(Error::DuplicateName(name.to_owned()));
        }
        if !self.st.heap.has_node(home_node) {
            return Err(Error::UnknownNode(home_node));
        }
        let id = IslandId(self.counters.island);
        self.counters.island += 1;
        self.st.islands.insert(
            id,
            Island {
                id,
                name: name.to_owned(),
                beads: BTreeSet::new(),
                home_node,
                vm_region,
            },
        );
        self.st.island_names.insert(name.to_owned(), id);
        Ok(id)
    }

    /// Island for a bead created without an explicit one: the first island
    /// homed on its node, else the shared default island.
    fn implicit_island(&mut self, node: NodeId) -> Result<IslandId> {
        if let Some(i) = self.st.islands.values().find(|i| i.home_node == node) {
            return Ok(i.id);
        }
        if let Some(&id) = self.st.island_names.get("default") {
            return Ok(id);
        }
        self.declare_island("default", NodeId(0), None)
    }

    pub fn instantiate_bead(
        &mut self,
        module: ModuleId,
        name: &str,
        node: NodeId,
        island: Option<IslandId>,
    ) -> Result<BeadId> {
        let def = self
            .modules
            .get(module.0 as usize)
            .cloned()
            .ok_or_else(|| Error::UnknownModule(module.to_string()))?;
        if !self.st.heap.has_node(node) {
            return Err(Error::UnknownNode(node));
        }
        let island = match island {
            Some(i) if self.st.islands.contains_key(&i) => i,
            Some(i) => return Err(Error::UnknownIsland(i.to_string())),
            None => self.implicit_island(node)?,
        };
        let id = BeadId(self.counters.bead + 1);
        let mut arena = Arena {
            heap: &mut self.st.heap,
            mem: &mut self.mem,
            epoch: &mut self.counters.epoch,
        };
        let copied = self
            .st
            .registry
            .instantiate(&mut arena, &def, id, name, node, island)?;
        self.counters.bead += 1;
        self.stats.bead_bytes_copied += copied;
        self.st
            .islands
            .get_mut(&island)
            .expect("checked")
            .beads
            .insert(id);
        self.touch_structure();
        Ok(id)
    }

    pub fn destroy_bead(&mut self, bead: BeadId) -> Result<()> {
        let in_use = self.st.weaver.weave_membership(bead);
        let mut arena = Arena {
            heap: &mut self.st.heap,
            mem: &mut self.mem,
            epoch: &mut self.counters.epoch,
        };
        self.st.registry.destroy(&mut arena, bead, in_use)?;
        for i in self.st.islands.values_mut() {
            i.beads.remove(&bead);
        }
        self.touch_structure();
        Ok(())
    }

    pub fn create_weave(&mut self, name: &str, beads: &[BeadId]) -> Result<WeaveId> {
        if self.st.weaver.names.contains_key(name) {
            return Err(WeaveError::DuplicateName(name.to_owned()).into());
        }
        let refs = beads
            .iter()
            .map(|b| {
                self.st
                    .registry
                    .bead(*b)
                    .ok_or_else(|| Error::Weave(WeaveError::UnknownBead(b.to_string())))
            })
            .collect::<Result<Vec<_>>>()?;
        let id = WeaveId(self.counters.weave + 1);
        let modules = &self.modules;
        let weave = create_weave(
            id,
            name,
            &refs,
            |m| &modules[m.0 as usize],
            &self.st.registry.tuple_stores,
        )?;
        self.counters.weave += 1;
        self.st.weaver.insert(weave)?;
        self.touch_structure();
        Ok(id)
    }

    /// Removes a weave. Finished strings bound to it are dropped; live ones
    /// keep it alive.
    pub fn retire_weave(&mut self, weave: WeaveId) -> Result<()> {
        if self.st.weaver.get(weave).is_none() {
            return Err(WeaveError::UnknownWeave(weave.to_string()).into());
        }
        let bound: Vec<&StringState> = self
            .st
            .strings
            .values()
            .filter(|s| s.weave == weave)
            .collect();
        let live: Vec<StringId> = bound.iter().filter(|s| s.is_live()).map(|s| s.id).collect();
        if !live.is_empty() {
            return Err(WeaveError::WeaveInUse(live).into());
        }
        let dead: Vec<StringId> = bound.iter().map(|s| s.id).collect();
        for s in dead {
            if let Some(st) = self.st.strings.remove(&s) {
                self.st.string_names.remove(&st.name);
            }
        }
        self.st.weaver.remove(weave);
        self.touch_structure();
        Ok(())
    }

    pub fn got_lookup(&self, weave: WeaveId, module: ModuleId, slot: u32) -> Result<GotEntry> {
        let w = self
            .st
            .weaver
            .get(weave)
            .ok_or_else(|| WeaveError::UnknownWeave(weave.to_string()))?;
        Ok(w.got_lookup(module, slot)?)
    }

    /// Resolves `module:function` or a bare exported function name within a
    /// weave to (module, code offset).
    pub fn resolve_entry(&self, weave: &Weave, entry: &str) -> Result<(ModuleId, u32)> {
        let unresolved = || Error::String(StringError::UnresolvedEntry(entry.to_owned()));
        let (module, func) = match entry.split_once(':') {
            Some((m, f)) => (Some(m), f),
            None => (None, entry),
        };
        let mut hits = Vec::new();
        for row in &weave.rows {
            let def = &self.modules[row.module.0 as usize];
            if module.is_some_and(|m| m != def.name) {
                continue;
            }
            if let Some((offset, _)) = def.function_named(func) {
                hits.push((row.module, offset));
            }
        }
        match hits.as_slice() {
            [one] => Ok(*one),
            _ => Err(unresolved()),
        }
    }

    pub fn spawn_string(
        &mut self,
        name: &str,
        weave: WeaveId,
        entry: &str,
        args: &[i64],
    ) -> Result<StringId> {
        if self.st.string_names.contains_key(name) {
            return Err(StringError::DuplicateName(name.to_owned()).into());
        }
        let w = self
            .st
            .weaver
            .get(weave)
            .cloned()
            .ok_or_else(|| StringError::UnknownWeave(weave.to_string()))?;
        let (module, offset) = self.resolve_entry(&w, entry)?;
        let writes = self.mem.stats().writes;
        let frame = enter_frame(&self.modules, &w, module, offset, args, 0)
            .ok_or_else(|| StringError::UnresolvedEntry(entry.to_owned()))?;
        let id = StringId(self.counters.string + 1);
        self.counters.string += 1;
        let entry = match entry.contains(':') {
            true => entry.to_owned(),
            false => format!("{}:{}", self.modules[module.0 as usize].name, entry),
        };
        self.st.strings.insert(
            id,
            StringState {
                id,
                name: name.to_owned(),
                weave,
                island: w.island,
                entry,
                frames: vec![frame],
                stack: Vec::new(),
                status: ExecStatus::Running,
                instructions: 0,
            },
        );
        self.st.string_names.insert(name.to_owned(), id);
        self.stats.spawn_bytes_copied += (self.mem.stats().writes - writes) * 8;
        self.touch_structure();
        Ok(id)
    }

    // --- scheduling ----------------------------------------------------

    fn refresh_classes(&mut self) {
        if self.classes.0 == self.structure_gen {
            return;
        }
        let map = compute_equivalence_classes(&self.st.strings, &self.st.weaver)
            .into_iter()
            .flat_map(|c| c.members.into_iter().map(move |m| (m, c.id)))
            .collect();
        self.classes = (self.structure_gen, map);
    }

    pub fn equivalence_classes(&self) -> Vec<EquivalenceClass> {
        compute_equivalence_classes(&self.st.strings, &self.st.weaver)
    }

    pub fn in_shared_bead(&self, string: StringId) -> bool {
        let Some(s) = self.st.strings.get(&string) else {
            return false;
        };
        self.st
            .weaver
            .get(s.weave)
            .is_some_and(|w| s.in_shared_bead(w, &self.st.weaver))
    }

    /// Makes `to` the running string. Only the cursor changes hands.
    pub fn context_switch(&mut self, to: StringId) -> Result<()> {
        let s = self
            .st
            .strings
            .get(&to)
            .filter(|s| s.is_live())
            .ok_or(StringError::DeadString(to))?;
        if self.cursor.as_ref().is_some_and(|c| c.string == to) {
            return Ok(());
        }
        let writes = self.mem.stats().writes;
        let weave = self
            .st
            .weaver
            .get(s.weave)
            .cloned()
            .ok_or(StringError::DeadString(to))?;
        let switched = self.cursor.is_some();
        self.cursor = Some(Cursor { string: to, weave });
        if switched {
            self.stats.switches += 1;
            self.stats.switch_ops += SWITCH_OPS;
        }
        self.stats.switch_bytes_copied += (self.mem.stats().writes - writes) * 8;
        Ok(())
    }

    fn progress_marker(&self) -> u64 {
        self.mem.stats().writes
            + self.output.len() as u64
            + self.counters.epoch
            + self.structure_gen
    }

    /// Runs one scheduling slice. Returns `None` when no string is live.
    pub fn run_slice(&mut self) -> Result<Option<SliceRecord>> {
        self.refresh_classes();
        let live: Vec<StringId> = self
            .st
            .strings
            .values()
            .filter(|s| s.is_live())
            .map(|s| s.id)
            .collect();
        let Some(sid) = self.st.sched.pick(&live, &self.classes.1) else {
            return Ok(None);
        };
        self.context_switch(sid)?;
        let weave = self.cursor.as_ref().expect("just switched").weave.clone();
        let fuel = match self.st.sched.policy {
            SchedPolicy::Cooperative => u64::MAX,
            SchedPolicy::Preemptive { quantum } => quantum.max(1),
        };
        let mut s = self.st.strings.remove(&sid).expect("live");
        s.status = ExecStatus::Running;
        let mut env = ExecEnv {
            modules: &self.modules,
            weave: &weave,
            beads: &self.st.registry.beads,
            mem: &mut self.mem,
            heap: &mut self.st.heap,
            epoch: &mut self.counters.epoch,
            output: &mut self.output,
            limits: self.opts.limits,
        };
        let (status, used) = run_quantum(&mut env, &mut s, fuel);
        let shared = s.in_shared_bead(&weave, &self.st.weaver);

        if matches!(self.st.sched.policy, SchedPolicy::Preemptive { .. }) && s.is_live() && shared {
            self.st.sched.holders.insert(sid);
        } else {
            self.st.sched.holders.remove(&sid);
        }
        self.st.sched.last = Some(sid);
        self.stats.instructions += used;
        self.stats.slices += 1;

        let marker = self.progress_marker();
        if status == ExecStatus::Yielded {
            let h = s.state_hash();
            if self.yields.insert(sid, (h, marker)) == Some((h, marker)) {
                self.stuck.insert(sid);
            } else {
                self.stuck.remove(&sid);
            }
        } else {
            self.yields.remove(&sid);
            self.stuck.remove(&sid);
        }
        self.st.strings.insert(sid, s);

        let record = SliceRecord {
            string: sid,
            instructions: used,
            status,
            in_shared_bead: shared,
        };
        if self.opts.record_slices {
            self.slices.push(record.clone());
        }
        if !self.stuck.is_empty() {
            let live: Vec<StringId> = self
                .st
                .strings
                .values()
                .filter(|s| s.is_live())
                .map(|s| s.id)
                .collect();
            if live.iter().all(|s| self.stuck.contains(s)) {
                return Err(StringError::Deadlock(live).into());
            }
        }
        Ok(Some(record))
    }

    /// Runs until no string is live.
    pub fn run_to_completion(&mut self) -> Result<RunReport> {
        self.run_bounded(u64::MAX)
    }

    /// Runs whole slices until no string is live or at least `budget`
    /// instructions have executed.
    pub fn run_bounded(&mut self, budget: u64) -> Result<RunReport> {
        let mut report = RunReport::default();
        while report.instructions < budget {
            match self.run_slice()? {
                Some(r) => {
                    report.slices += 1;
                    report.instructions += r.instructions;
                }
                None => break,
            }
        }
        Ok(report)
    }

    /// Runs exactly `n` slices, or fewer if everything finishes.
    pub fn run_slices(&mut self, n: u64) -> Result<RunReport> {
        let mut report = RunReport::default();
        for _ in 0..n {
            match self.run_slice()? {
                Some(r) => {
                    report.slices += 1;
                    report.instructions += r.instructions;
                }
                None => break,
            }
        }
        Ok(report)
    }

    pub fn live_strings(&self) -> usize {
        self.st.strings.values().filter(|s| s.is_live()).count()
    }

    pub(crate) fn reset_schedule_tracking(&mut self) {
        self.yields.clear();
        self.stuck.clear();
        self.touch_structure();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::exec::{OutputValue, TrapReason};
    use crate::vm::RegionKind;
    use crate::wof::asm::assemble;

    fn obj(src: &str) -> ObjectModule {
        assemble(src).unwrap()
    }

    fn ints(rt: &Runtime, s: StringId) -> Vec<i64> {
        rt.output_of(s)
            .iter()
            .filter_map(|e| match e.value {
                OutputValue::Int(v) => Some(v),
                _ => None,
            })
            .collect()
    }

    fn single(src: &str, entry: &str, args: &[i64]) -> (Runtime, StringId) {
        let mut rt = Runtime::new(RuntimeOptions::default());
        let m = rt.define_module("m", vec![obj(src)]).unwrap();
        let b = rt.instantiate_bead(m, "b", NodeId(0), None).unwrap();
        let w = rt.create_weave("w", &[b]).unwrap();
        let s = rt.spawn_string("s", w, entry, args).unwrap();
        (rt, s)
    }

    #[test]
    fn arithmetic_and_output() {
        let (mut rt, s) = single(
            "func main:\n push 2\n push 3\n add\n host print_int\n push 7\n push 2\n sub\n host print_int\n halt\n",
            "main",
            &[],
        );
        rt.run_to_completion().unwrap();
        assert_eq!(ints(&rt, s), vec![5, 5]);
        assert_eq!(rt.string(s).unwrap().status, ExecStatus::Halted);
    }

    #[test]
    fn div_by_zero_traps_only_that_string() {
        let mut rt = Runtime::new(RuntimeOptions::default());
        let m = rt
            .define_module(
                "m",
                vec![obj("func bad:\n push 1\n push 0\n divs\n halt\nfunc good:\n push 4\n host print_int\n halt\n")],
            )
            .unwrap();
        let b = rt.instantiate_bead(m, "b", NodeId(0), None).unwrap();
        let w = rt.create_weave("w", &[b]).unwrap();
        let bad = rt.spawn_string("bad", w, "bad", &[]).unwrap();
        let good = rt.spawn_string("good", w, "good", &[]).unwrap();
        rt.run_to_completion().unwrap();
        assert_eq!(
            rt.string(bad).unwrap().status,
            ExecStatus::Trapped(TrapReason::DivByZero)
        );
        assert_eq!(ints(&rt, good), vec![4]);
    }

    #[test]
    fn independent_beads_see_template_values() {
        let mut rt = Runtime::new(RuntimeOptions::default());
        let m = rt
            .define_module(
                "m",
                vec![obj(".data counter 8 = 5\nfunc set:\n push 9\n storeg counter\n halt\nfunc show:\n loadg counter\n host print_int\n halt\n")],
            )
            .unwrap();
        let b1 = rt.instantiate_bead(m, "b1", NodeId(0), None).unwrap();
        let b2 = rt.instantiate_bead(m, "b2", NodeId(0), None).unwrap();
        let w1 = rt.create_weave("w1", &[b1]).unwrap();
        let w2 = rt.create_weave("w2", &[b2]).unwrap();
        rt.spawn_string("a", w1, "set", &[]).unwrap();
        rt.run_to_completion().unwrap();
        let s1 = rt.spawn_string("x", w1, "show", &[]).unwrap();
        let s2 = rt.spawn_string("y", w2, "show", &[]).unwrap();
        rt.run_to_completion().unwrap();
        assert_eq!(ints(&rt, s1), vec![9]);
        assert_eq!(ints(&rt, s2), vec![5]);
    }

    #[test]
    fn cross_bead_call_uses_exporters_data() {
        let mut rt = Runtime::new(RuntimeOptions::default());
        let ip = rt
            .define_module(
                "ip",
                vec![obj(".data sent 8\nfunc send:\n loadl 0\n loadg sent\n add\n storeg sent\n loadg sent\n ret 1\n")],
            )
            .unwrap();
        let tel = rt
            .define_module(
                "telnet",
                vec![obj(".import send\n.data mine 8\nfunc main:\n push 5\n call send 1\n host print_int\n push 2\n call send 1\n host print_int\n halt\n")],
            )
            .unwrap();
        let ipb = rt.instantiate_bead(ip, "ip1", NodeId(0), None).unwrap();
        let tb = rt.instantiate_bead(tel, "t1", NodeId(0), None).unwrap();
        let w = rt.create_weave("w", &[tb, ipb]).unwrap();
        let s = rt.spawn_string("s", w, "telnet:main", &[]).unwrap();
        rt.run_to_completion().unwrap();
        assert_eq!(ints(&rt, s), vec![5, 7]);
        let GotEntry::Data(a) = rt.got_lookup(w, ip, 0).unwrap() else {
            panic!()
        };
        assert!(rt.bead(ipb).unwrap().contains(a));
        assert_eq!(rt.memory().read_cell(a), Ok(7));
    }

    #[test]
    fn entry_and_call_errors() {
        let (mut rt, _) = single(".data d 8\nfunc main:\n call d\n halt\n", "main", &[]);
        assert!(matches!(
            rt.spawn_string("t", rt.weave_id("w").unwrap(), "nosuch", &[]),
            Err(Error::String(StringError::UnresolvedEntry(_)))
        ));
        let _ = rt.run_to_completion();
        let s = rt.string(StringId(1)).unwrap();
        assert_eq!(s.status, ExecStatus::Trapped(TrapReason::NotAFunction(0)));
    }

    #[test]
    fn heap_ops_from_guest() {
        let src = "\
func main:
    push 16
    alloc
    dup
    storel 0
    push 11
    storem
    loadl 0
    loadm
    host print_int
    loadl 0
    free
    loadl 0
    loadm
    halt
end
";
        let (mut rt, s) = single(src, "main", &[]);
        rt.run_to_completion().unwrap();
        assert_eq!(ints(&rt, s), vec![11]);
        assert!(matches!(
            rt.string(s).unwrap().status,
            ExecStatus::Trapped(TrapReason::UnmappedAddress(_))
        ));
        assert!(rt
            .memory()
            .regions()
            .values()
            .all(|r| !matches!(r.kind, RegionKind::Heap { .. })));
    }

    #[test]
    fn quantum_and_yield_accounting() {
        let (mut rt, s) = single("func main:\n push 1\n drop\n halt\n", "main", &[]);
        rt.set_policy(SchedPolicy::Preemptive { quantum: 1 });
        let r = rt.run_slice().unwrap().unwrap();
        assert_eq!(r.status, ExecStatus::QuantumExpired);
        assert_eq!(r.instructions, 1);
        let (mut rt2, _) = single("func main:\n yield\n halt\n", "main", &[]);
        let r = rt2.run_slice().unwrap().unwrap();
        assert_eq!((r.status, r.instructions), (ExecStatus::Yielded, 1));
        rt.run_to_completion().unwrap();
        assert_eq!(rt.string(s).unwrap().instructions, 3);
    }

    #[test]
    fn delay_loop_instruction_count() {
        let src = "\
.data work 8
func main:
loop:
    loadl 0
    jz done
    loadl 0
    push 1
    sub
    storel 0
    loadg work
    push 1
    add
    storeg work
    jmp loop
done:
    halt
end
";
        let (mut rt, s) = single(src, "main", &[10]);
        rt.set_policy(SchedPolicy::Preemptive { quantum: 1000 });
        let r = rt.run_slice().unwrap().unwrap();
        assert_eq!(r.status, ExecStatus::Halted);
        assert_eq!(r.instructions, 11 * 10 + 3);
        assert_eq!(rt.string(s).unwrap().instructions, 113);
    }

    #[test]
    fn preemptive_alternates_disjoint_strings() {
        let mut rt = Runtime::new(RuntimeOptions {
            policy: SchedPolicy::Preemptive { quantum: 5 },
            record_slices: true,
            ..RuntimeOptions::default()
        });
        let m = rt
            .define_module("m", vec![obj("func main:\nl:\n push 1\n drop\n jmp l\n")])
            .unwrap();
        for i in 0..2 {
            let b = rt
                .instantiate_bead(m, &format!("b{i}"), NodeId(0), None)
                .unwrap();
            let w = rt.create_weave(&format!("w{i}"), &[b]).unwrap();
            rt.spawn_string(&format!("s{i}"), w, "main", &[]).unwrap();
        }
        rt.run_slices(6).unwrap();
        let order: Vec<u64> = rt.slices().iter().map(|r| r.string.0).collect();
        assert_eq!(order, vec![1, 2, 1, 2, 1, 2]);
        assert!(rt.slices().iter().all(|r| r.instructions == 5));
        assert_eq!(rt.stats().switches, 5);
        assert_eq!(rt.stats().switch_bytes_copied, 0);
    }

    #[test]
    fn spinning_yielders_deadlock() {
        let (mut rt, _) = single(
            ".data flag 8\nfunc main:\nl:\n yield\n loadg flag\n jz l\n halt\n",
            "main",
            &[],
        );
        let err = rt.run_to_completion().unwrap_err();
        assert_eq!(err, Error::String(StringError::Deadlock(vec![StringId(1)])));
    }

    #[test]
    fn retire_and_destroy_lifecycle() {
        let (mut rt, s) = single("func main:\n halt\n", "main", &[]);
        let w = rt.weave_id("w").unwrap();
        let b = rt.bead_id("b").unwrap();
        assert!(matches!(
            rt.retire_weave(w),
            Err(Error::Weave(WeaveError::WeaveInUse(_)))
        ));
        assert!(matches!(
            rt.destroy_bead(b),
            Err(Error::Registry(RegistryError::BeadInUse(_)))
        ));
        rt.run_to_completion().unwrap();
        rt.retire_weave(w).unwrap();
        assert!(rt.string(s).is_none());
        rt.destroy_bead(b).unwrap();
        assert!(rt.memory().regions().is_empty());
    }
}
