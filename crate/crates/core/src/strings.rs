//! Strings: schedulable control flows bound to one weave each, plus the
//! equivalence-class bookkeeping the preemptive scheduler relies on.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};

use thiserror::Error;

use crate::ids::{IslandId, ModuleId, StringId, WeaveId};
use crate::vm::exec::{ExecStatus, Frame};
use crate::weaver::{Weave, Weaver};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StringError {
    #[error("entry `{0}` does not resolve to a function in the weave")]
    UnresolvedEntry(String),
    #[error("unknown weave `{0}`")]
    UnknownWeave(String),
    #[error("string name `{0}` already taken")]
    DuplicateName(String),
    #[error("string {0} is not live")]
    DeadString(StringId),
    #[error("deadlock: strings {} are all waiting", .0.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(","))]
    Deadlock(Vec<StringId>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StringState {
    pub id: StringId,
    pub name: String,
    pub weave: WeaveId,
    pub island: IslandId,
    /// Entry as written at spawn, `module:function`.
    pub entry: String,
    pub frames: Vec<Frame>,
    pub stack: Vec<i64>,
    pub status: ExecStatus,
    pub instructions: u64,
}

impl StringState {
    pub fn is_live(&self) -> bool {
        matches!(self.status, ExecStatus::Running | ExecStatus::Yielded)
    }

    pub fn ip(&self) -> Option<(ModuleId, u32)> {
        self.frames.last().map(|f| (f.module, f.ip))
    }

    /// True if any active frame executes a bead that two or more live
    /// weaves share.
    pub fn in_shared_bead(&self, weave: &Weave, weaver: &Weaver) -> bool {
        self.frames
            .iter()
            .any(|f| weaver.is_shared(weave.rows[f.row as usize].bead))
    }

    /// Digest of the resumable execution state.
    pub fn state_hash(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.weave.hash(&mut h);
        for f in &self.frames {
            (f.module, f.row, f.ip, &f.locals, f.stack_base).hash(&mut h);
        }
        self.stack.hash(&mut h);
        h.finish()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedPolicy {
    Cooperative,
    Preemptive { quantum: u64 },
}

impl SchedPolicy {
    pub fn label(&self) -> String {
        match self {
            SchedPolicy::Cooperative => "cooperative".into(),
            SchedPolicy::Preemptive { quantum } => format!("preemptive:{quantum}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EquivalenceClass {
    pub id: u32,
    pub members: Vec<StringId>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Partitions strings by the transitive "weaves share a bead" relation.
/// Classes are numbered by their smallest member.
pub fn compute_equivalence_classes(
    strings: &BTreeMap<StringId, StringState>,
    weaver: &Weaver,
) -> Vec<EquivalenceClass> {
    let weave_ids: Vec<WeaveId> = weaver.weaves.keys().copied().collect();
    let index: BTreeMap<WeaveId, usize> =
        weave_ids.iter().enumerate().map(|(i, w)| (*w, i)).collect();
    let mut uf = UnionFind::new(weave_ids.len());
    for set in weaver.membership.values() {
        let mut it = set.iter().filter_map(|w| index.get(w));
        if let Some(&first) = it.next() {
            for &other in it {
                uf.union(first, other);
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<StringId>> = BTreeMap::new();
    let mut orphan = weave_ids.len();
    for s in strings.values() {
        let root = match index.get(&s.weave) {
            Some(&i) => uf.find(i),
            None => {
                orphan += 1;
                orphan
            }
        };
        by_root.entry(root).or_default().push(s.id);
    }
    let mut classes: Vec<Vec<StringId>> = by_root.into_values().collect();
    classes.sort_by_key(|m| m[0]);
    classes
        .into_iter()
        .enumerate()
        .map(|(i, members)| EquivalenceClass {
            id: i as u32,
            members,
        })
        .collect()
}

/// Scheduler state that checkpoints carry along.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SchedState {
    pub policy: SchedPolicy,
    pub last: Option<StringId>,
    /// Strings preempted inside a shared bead; while one is held, other
    /// members of its class may not run.
    pub holders: BTreeSet<StringId>,
}

impl SchedState {
    pub fn new(policy: SchedPolicy) -> Self {
        Self {
            policy,
            last: None,
            holders: BTreeSet::new(),
        }
    }

    /// Chooses the next string. `live` is in ascending id order.
    pub fn pick(&self, live: &[StringId], class_of: &BTreeMap<StringId, u32>) -> Option<StringId> {
        if live.is_empty() {
            return None;
        }
        let split = match self.last {
            Some(l) => live.partition_point(|&s| s <= l),
            None => 0,
        };
        let order = live[split..].iter().chain(&live[..split]).copied();
        match self.policy {
            SchedPolicy::Cooperative => order.clone().next(),
            SchedPolicy::Preemptive { .. } => {
                let class = |s: StringId| class_of.get(&s).copied();
                let blocked = |t: StringId| {
                    self.holders
                        .iter()
                        .any(|&h| h != t && live.binary_search(&h).is_ok() && class(h) == class(t))
                };
                let prev = self.last.filter(|p| live.binary_search(p).is_ok());
                order
                    .clone()
                    .filter(|&t| Some(t) != prev)
                    .find(|&t| !blocked(t))
                    .or(prev.filter(|&p| !blocked(p)))
                    .or_else(|| {
                        self.holders
                            .iter()
                            .copied()
                            .find(|h| live.binary_search(h).is_ok())
                    })
            }
        }
    }
}
