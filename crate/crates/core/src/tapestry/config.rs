//! Line-oriented tapestry description.
//!
//! ```text
//! nodes 2
//! sched preemptive 100
//! module telnet telnet.wasm
//! bead t1 telnet 0
//! weave w1 t1 ip1
//! string s1 w1 telnet:main 5
//! island left t1 ip1 node 0 region 0
//! tuple ip routes
//! ```
//!
//! Names must be declared before they are referenced.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use thiserror::Error;

use crate::migrate::Violation;
use crate::strings::SchedPolicy;
use crate::wof::is_identifier;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    SyntaxError { line: usize, message: String },
    #[error("line {line}: unknown {what} `{name}`")]
    UnknownReference {
        line: usize,
        what: &'static str,
        name: String,
    },
    #[error("islands do not partition the beads: {0}")]
    IslandNotPartition(String),
}

impl ConfigError {
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::SyntaxError { line, .. } | ConfigError::UnknownReference { line, .. } => {
                Some(*line)
            }
            ConfigError::IslandNotPartition(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModuleDecl {
    pub line: usize,
    pub name: String,
    pub paths: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BeadDecl {
    pub line: usize,
    pub name: String,
    pub module: String,
    pub node: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WeaveDecl {
    pub line: usize,
    pub name: String,
    pub beads: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StringDecl {
    pub line: usize,
    pub name: String,
    pub weave: String,
    pub module: String,
    pub function: String,
    pub args: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IslandDecl {
    pub line: usize,
    pub name: String,
    pub beads: Vec<String>,
    pub node: u32,
    pub region: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TupleDecl {
    pub line: usize,
    pub module: String,
    pub symbol: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct TapestryConfig {
    pub modules: Vec<ModuleDecl>,
    pub beads: Vec<BeadDecl>,
    pub weaves: Vec<WeaveDecl>,
    pub strings: Vec<StringDecl>,
    pub islands: Vec<IslandDecl>,
    pub tuples: Vec<TupleDecl>,
    pub sched: Option<SchedPolicy>,
    pub nodes: Option<u32>,
}

impl TapestryConfig {
    /// Nodes the runtime needs: the declared count, else one past the
    /// highest node mentioned.
    pub fn node_count(&self) -> u32 {
        self.nodes.unwrap_or_else(|| {
            self.beads
                .iter()
                .map(|b| b.node)
                .chain(self.islands.iter().map(|i| i.node))
                .max()
                .map_or(1, |n| n + 1)
        })
    }

    pub fn island_of(&self, bead: &str) -> Option<&IslandDecl> {
        self.islands
            .iter()
            .find(|i| i.beads.iter().any(|b| b == bead))
    }

    /// Closure violations visible from the declarations alone.
    pub fn island_violations(&self) -> Vec<Violation> {
        if self.islands.is_empty() {
            return Vec::new();
        }
        let island = |b: &str| {
            self.island_of(b)
                .map_or_else(String::new, |i| i.name.clone())
        };
        let mut out = Vec::new();
        for w in &self.weaves {
            let islands: BTreeSet<String> = w.beads.iter().map(|b| island(b)).collect();
            if islands.len() > 1 {
                out.push(Violation::WeaveSpansIslands {
                    weave: w.name.clone(),
                    islands: islands.into_iter().collect(),
                });
            }
        }
        let tuple_modules: BTreeSet<&str> = self.tuples.iter().map(|t| t.module.as_str()).collect();
        for m in tuple_modules {
            let islands: BTreeSet<String> = self
                .beads
                .iter()
                .filter(|b| b.module == m)
                .map(|b| island(&b.name))
                .collect();
            if islands.len() > 1 {
                out.push(Violation::TupleStoreSpansIslands {
                    module: m.to_owned(),
                    islands: islands.into_iter().collect(),
                });
            }
        }
        out
    }
}

struct Parser {
    cfg: TapestryConfig,
    modules: BTreeSet<String>,
    beads: BTreeMap<String, String>,
    weaves: BTreeSet<String>,
    strings: BTreeSet<String>,
    islands: BTreeSet<String>,
}

fn syntax(line: usize, message: impl Into<String>) -> ConfigError {
    ConfigError::SyntaxError {
        line,
        message: message.into(),
    }
}

fn unknown(line: usize, what: &'static str, name: &str) -> ConfigError {
    ConfigError::UnknownReference {
        line,
        what,
        name: name.to_owned(),
    }
}

fn number<T: std::str::FromStr>(line: usize, what: &str, s: &str) -> Result<T, ConfigError> {
    s.parse()
        .map_err(|_| syntax(line, format!("bad {what} `{s}`")))
}

fn ident(line: usize, s: &str) -> Result<String, ConfigError> {
    if is_identifier(s) {
        Ok(s.to_owned())
    } else {
        Err(syntax(line, format!("`{s}` is not a valid name")))
    }
}

impl Parser {
    fn fresh(
        line: usize,
        set: &mut BTreeSet<String>,
        kind: &str,
        name: &str,
    ) -> Result<String, ConfigError> {
        let name = ident(line, name)?;
        if !set.insert(name.clone()) {
            return Err(syntax(line, format!("{kind} `{name}` declared twice")));
        }
        Ok(name)
    }

    fn bead_ref(&self, line: usize, name: &str) -> Result<String, ConfigError> {
        if self.beads.contains_key(name) {
            Ok(name.to_owned())
        } else {
            Err(unknown(line, "bead", name))
        }
    }

    fn line(&mut self, line: usize, words: &[&str]) -> Result<(), ConfigError> {
        let (&kw, rest) = words.split_first().expect("caller skips blank lines");
        let arity = |min: usize, usage: &str| {
            if rest.len() < min {
                Err(syntax(line, format!("usage: {usage}")))
            } else {
                Ok(())
            }
        };
        match kw {
            "module" => {
                arity(2, "module NAME PATH [PATH...]")?;
                let name = Self::fresh(line, &mut self.modules, "module", rest[0])?;
                let paths = rest[1..].iter().map(PathBuf::from).collect();
                self.cfg.modules.push(ModuleDecl { line, name, paths });
            }
            "bead" => {
                arity(3, "bead NAME MODULE NODE")?;
                if rest.len() > 3 {
                    return Err(syntax(line, "usage: bead NAME MODULE NODE"));
                }
                if self.beads.contains_key(rest[0]) {
                    return Err(syntax(line, format!("bead `{}` declared twice", rest[0])));
                }
                let name = ident(line, rest[0])?;
                if !self.modules.contains(rest[1]) {
                    return Err(unknown(line, "module", rest[1]));
                }
                let node = number(line, "node", rest[2])?;
                self.beads.insert(name.clone(), rest[1].to_owned());
                self.cfg.beads.push(BeadDecl {
                    line,
                    name,
                    module: rest[1].to_owned(),
                    node,
                });
            }
            "weave" => {
                arity(2, "weave NAME BEAD [BEAD...]")?;
                let name = Self::fresh(line, &mut self.weaves, "weave", rest[0])?;
                let beads = rest[1..]
                    .iter()
                    .map(|b| self.bead_ref(line, b))
                    .collect::<Result<_, _>>()?;
                self.cfg.weaves.push(WeaveDecl { line, name, beads });
            }
            "string" => {
                arity(3, "string NAME WEAVE MODULE:FUNC [ARGS...]")?;
                let name = Self::fresh(line, &mut self.strings, "string", rest[0])?;
                if !self.weaves.contains(rest[1]) {
                    return Err(unknown(line, "weave", rest[1]));
                }
                let (module, function) = rest[2].split_once(':').ok_or_else(|| {
                    syntax(line, format!("entry `{}` is not MODULE:FUNC", rest[2]))
                })?;
                if !self.modules.contains(module) {
                    return Err(unknown(line, "module", module));
                }
                let args = rest[3..]
                    .iter()
                    .map(|a| number(line, "argument", a))
                    .collect::<Result<_, _>>()?;
                self.cfg.strings.push(StringDecl {
                    line,
                    name,
                    weave: rest[1].to_owned(),
                    module: module.to_owned(),
                    function: ident(line, function)?,
                    args,
                });
            }
            "island" => {
                let usage = "island NAME BEAD... node N [region R]";
                arity(3, usage)?;
                let name = Self::fresh(line, &mut self.islands, "island", rest[0])?;
                let node_at = rest
                    .iter()
                    .position(|w| *w == "node")
                    .ok_or_else(|| syntax(line, format!("usage: {usage}")))?;
                let beads: Vec<String> = rest[1..node_at]
                    .iter()
                    .map(|b| self.bead_ref(line, b))
                    .collect::<Result<_, _>>()?;
                let (node, region) = match &rest[node_at + 1..] {
                    [n] => (number(line, "node", n)?, None),
                    [n, "region", r] => {
                        (number(line, "node", n)?, Some(number(line, "region", r)?))
                    }
                    _ => return Err(syntax(line, format!("usage: {usage}"))),
                };
                if beads.is_empty() {
                    return Err(syntax(line, format!("island `{name}` has no beads")));
                }
                self.cfg.islands.push(IslandDecl {
                    line,
                    name,
                    beads,
                    node,
                    region,
                });
            }
            "tuple" => {
                if rest.len() != 2 {
                    return Err(syntax(line, "usage: tuple MODULE SYMBOL"));
                }
                if !self.modules.contains(rest[0]) {
                    return Err(unknown(line, "module", rest[0]));
                }
                if self.cfg.beads.iter().any(|b| b.module == rest[0]) {
                    return Err(syntax(
                        line,
                        format!("tuple for `{}` must precede its beads", rest[0]),
                    ));
                }
                self.cfg.tuples.push(TupleDecl {
                    line,
                    module: rest[0].to_owned(),
                    symbol: ident(line, rest[1])?,
                });
            }
            "sched" => {
                self.cfg.sched = Some(match rest {
                    ["cooperative"] => SchedPolicy::Cooperative,
                    ["preemptive", q] => SchedPolicy::Preemptive {
                        quantum: number::<u64>(line, "quantum", q)?.max(1),
                    },
                    _ => {
                        return Err(syntax(
                            line,
                            "usage: sched cooperative | sched preemptive QUANTUM",
                        ))
                    }
                });
            }
            "nodes" => match rest {
                [n] => {
                    let n: u32 = number(line, "node count", n)?;
                    if n == 0 {
                        return Err(syntax(line, "at least one node required"));
                    }
                    self.cfg.nodes = Some(n);
                }
                _ => return Err(syntax(line, "usage: nodes N")),
            },
            other => return Err(syntax(line, format!("unknown directive `{other}`"))),
        }
        Ok(())
    }

    fn finish(self, last_line: usize) -> Result<TapestryConfig, ConfigError> {
        let cfg = self.cfg;
        if cfg.modules.is_empty() {
            return Err(syntax(last_line.max(1), "at least one module required"));
        }
        if let Some(n) = cfg.nodes {
            for (line, node) in cfg
                .beads
                .iter()
                .map(|b| (b.line, b.node))
                .chain(cfg.islands.iter().map(|i| (i.line, i.node)))
            {
                if node >= n {
                    return Err(syntax(
                        line,
                        format!("node {node} out of range (nodes {n})"),
                    ));
                }
            }
        }
        if !cfg.islands.is_empty() {
            let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
            for i in &cfg.islands {
                for b in &i.beads {
                    if let Some(prev) = seen.insert(b, &i.name) {
                        return Err(ConfigError::IslandNotPartition(format!(
                            "bead {b} is in islands {prev} and {}",
                            i.name
                        )));
                    }
                }
            }
            let missing: Vec<&str> = cfg
                .beads
                .iter()
                .map(|b| b.name.as_str())
                .filter(|b| !seen.contains_key(b))
                .collect();
            if !missing.is_empty() {
                return Err(ConfigError::IslandNotPartition(format!(
                    "beads without an island: {}",
                    missing.join(", ")
                )));
            }
        }
        Ok(cfg)
    }
}

pub fn parse_config(text: &str) -> Result<TapestryConfig, ConfigError> {
    let mut p = Parser {
        cfg: TapestryConfig::default(),
        modules: BTreeSet::new(),
        beads: BTreeMap::new(),
        weaves: BTreeSet::new(),
        strings: BTreeSet::new(),
        islands: BTreeSet::new(),
    };
    let mut last = 0;
    for (i, raw) in text.lines().enumerate() {
        last = i + 1;
        let body = raw.split('#').next().unwrap_or("");
        let words: Vec<&str> = body.split_whitespace().collect();
        if !words.is_empty() {
            p.line(i + 1, &words)?;
        }
    }
    p.finish(last)
}
