//! Delay-loop benchmark: one unit of work split across `n` flows, run as
//! strings of one weave or of `n` private weaves.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::error::Error;
use crate::ids::{NodeId, StringId};
use crate::runtime::{Runtime, RuntimeOptions, Stats};
use crate::strings::SchedPolicy;
use crate::wof::asm::assemble;

/// Instructions per loop iteration.
pub const ITERATION_COST: u64 = 11;
/// Instructions a flow spends outside the loop: the final test, branch
/// and halt.
pub const FLOW_COST: u64 = 3;
pub const DEFAULT_QUANTUM: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchModel {
    Baseline,
    SharedWeave,
    DisjointWeaves,
}

impl BenchModel {
    pub fn label(self) -> &'static str {
        match self {
            BenchModel::Baseline => "baseline",
            BenchModel::SharedWeave => "shared_weave",
            BenchModel::DisjointWeaves => "disjoint_weaves",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(BenchModel::Baseline),
            "shared_weave" | "shared" => Some(BenchModel::SharedWeave),
            "disjoint_weaves" | "disjoint" => Some(BenchModel::DisjointWeaves),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BenchError {
    #[error("flow count must be at least 1")]
    NoFlows,
    #[error("total work {work} is not divisible by {flows} flows")]
    Indivisible { work: u64, flows: u64 },
    #[error(transparent)]
    Runtime(#[from] Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchParams {
    pub flows: u64,
    pub model: BenchModel,
    pub total_work: u64,
    /// Mutable globals in the delay-loop module, the loop counter included.
    pub globals: usize,
    pub quantum: u64,
}

impl BenchParams {
    pub fn new(flows: u64, model: BenchModel, total_work: u64) -> Self {
        Self {
            flows,
            model,
            total_work,
            globals: 1,
            quantum: DEFAULT_QUANTUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub params: BenchParams,
    pub wall: Duration,
    pub instructions: u64,
    pub per_flow_iterations: Vec<u64>,
    pub stats: Stats,
}

impl BenchReport {
    pub fn switches(&self) -> u64 {
        self.stats.switches
    }

    /// Switch-path operations per switch; zero when nothing switched.
    pub fn ops_per_switch(&self) -> u64 {
        self.stats
            .switch_ops
            .checked_div(self.stats.switches)
            .unwrap_or(0)
    }

    /// Relative wall-time overhead against another run.
    pub fn overhead_vs(&self, base: &BenchReport) -> f64 {
        self.wall.as_secs_f64() / base.wall.as_secs_f64().max(f64::MIN_POSITIVE) - 1.0
    }
}

pub fn delay_loop_source(globals: usize) -> String {
    let mut s = String::from(".data work 8\n");
    for i in 1..globals {
        let _ = writeln!(s, ".data pad{i} 8");
    }
    s.push_str(
        "\
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
",
    );
    s
}

/// Builds the runtime for one configuration without running it.
pub fn prepare(p: &BenchParams) -> Result<(Runtime, Vec<StringId>), BenchError> {
    if p.flows == 0 {
        return Err(BenchError::NoFlows);
    }
    let flows = match p.model {
        BenchModel::Baseline => 1,
        _ => p.flows,
    };
    if !p.total_work.is_multiple_of(flows) {
        return Err(BenchError::Indivisible {
            work: p.total_work,
            flows,
        });
    }
    let per_flow = (p.total_work / flows) as i64;
    let mut rt = Runtime::new(RuntimeOptions {
        policy: SchedPolicy::Preemptive { quantum: p.quantum },
        ..RuntimeOptions::default()
    });
    let object = assemble(&delay_loop_source(p.globals.max(1))).map_err(Error::from)?;
    let m = rt.define_module("delay", vec![object])?;
    let mut strings = Vec::new();
    match p.model {
        BenchModel::Baseline | BenchModel::SharedWeave => {
            let b = rt.instantiate_bead(m, "d0", NodeId(0), None)?;
            let w = rt.create_weave("w0", &[b])?;
            for i in 0..flows {
                strings.push(rt.spawn_string(&format!("f{i}"), w, "delay:main", &[per_flow])?);
            }
        }
        BenchModel::DisjointWeaves => {
            for i in 0..flows {
                let b = rt.instantiate_bead(m, &format!("d{i}"), NodeId(0), None)?;
                let w = rt.create_weave(&format!("w{i}"), &[b])?;
                strings.push(rt.spawn_string(&format!("f{i}"), w, "delay:main", &[per_flow])?);
            }
        }
    }
    Ok((rt, strings))
}

pub fn run_bench(p: &BenchParams) -> Result<BenchReport, BenchError> {
    let (mut rt, strings) = prepare(p)?;
    let start = Instant::now();
    let run = rt.run_to_completion()?;
    let wall = start.elapsed();
    let per_flow_iterations = strings
        .iter()
        .map(|s| (rt.string(*s).expect("spawned").instructions - FLOW_COST) / ITERATION_COST)
        .collect();
    Ok(BenchReport {
        params: *p,
        wall,
        instructions: run.instructions,
        per_flow_iterations,
        stats: rt.stats(),
    })
}

pub fn bench_delay_loop(
    flows: u64,
    model: BenchModel,
    total_work: u64,
) -> Result<BenchReport, BenchError> {
    run_bench(&BenchParams::new(flows, model, total_work))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_has_no_switches() {
        let r = bench_delay_loop(1, BenchModel::Baseline, 5000).unwrap();
        assert_eq!(r.switches(), 0);
        assert_eq!(r.instructions, ITERATION_COST * 5000 + FLOW_COST);
    }

    #[test]
    fn models_agree_on_counts() {
        let base = bench_delay_loop(1, BenchModel::Baseline, 80_000).unwrap();
        let shared = bench_delay_loop(8, BenchModel::SharedWeave, 80_000).unwrap();
        let disjoint = bench_delay_loop(8, BenchModel::DisjointWeaves, 80_000).unwrap();
        for r in [&shared, &disjoint] {
            assert_eq!(r.instructions, base.instructions + FLOW_COST * 7);
            assert_eq!(r.per_flow_iterations.iter().sum::<u64>(), 80_000);
            assert_eq!(r.stats.switch_bytes_copied, 0);
        }
        assert_eq!(shared.switches(), disjoint.switches());
        assert_eq!(shared.ops_per_switch(), disjoint.ops_per_switch());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert_eq!(
            bench_delay_loop(0, BenchModel::SharedWeave, 10),
            Err(BenchError::NoFlows)
        );
        assert_eq!(
            bench_delay_loop(3, BenchModel::DisjointWeaves, 10),
            Err(BenchError::Indivisible { work: 10, flows: 3 })
        );
    }
}
