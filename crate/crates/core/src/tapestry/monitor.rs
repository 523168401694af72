//! Text protocol for inspecting and rewiring a running tapestry.
//!
//! One command per line. A reply is `OK` followed by tab-separated rows
//! and a blank line, or a single `ERR code message` line.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use crate::error::Error;
use crate::ids::NodeId;
use crate::runtime::Runtime;
use crate::snapshot::CheckpointMode;
use crate::tapestry::loader::load_object_file;
use crate::vm::exec::OutputValue;
use crate::weaver::GotEntry;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reply {
    Rows(Vec<Vec<String>>),
    Err { code: String, message: String },
    Quit,
}

impl Reply {
    fn err(code: &str, message: impl Into<String>) -> Self {
        Reply::Err {
            code: code.to_owned(),
            message: message.into(),
        }
    }

    pub fn is_ok(&self) -> bool {
        !matches!(self, Reply::Err { .. })
    }

    pub fn rows(&self) -> &[Vec<String>] {
        match self {
            Reply::Rows(r) => r,
            _ => &[],
        }
    }

    pub fn render(&self) -> String {
        match self {
            Reply::Rows(rows) => {
                let mut s = String::from("OK\n");
                for r in rows {
                    s.push_str(&r.join("\t"));
                    s.push('\n');
                }
                s.push('\n');
                s
            }
            Reply::Err { code, message } => format!("ERR {code} {}\n", message.replace('\n', " ")),
            Reply::Quit => "OK\n\n".into(),
        }
    }
}

impl From<Error> for Reply {
    fn from(e: Error) -> Self {
        Reply::err(e.code(), e.to_string())
    }
}

fn row<const N: usize>(cells: [String; N]) -> Vec<String> {
    cells.into()
}

fn arg<T: std::str::FromStr>(words: &[&str], i: usize, what: &str) -> Result<T, Reply> {
    let w = words
        .get(i)
        .ok_or_else(|| Reply::err("syntax", format!("missing {what}")))?;
    w.parse()
        .map_err(|_| Reply::err("syntax", format!("bad {what} `{w}`")))
}

/// True for commands that only read state.
pub fn is_read_only(line: &str) -> bool {
    matches!(
        line.split_whitespace()
            .next()
            .map(str::to_ascii_uppercase)
            .as_deref(),
        Some(
            "STATUS"
                | "MODULES"
                | "BEADS"
                | "WEAVES"
                | "STRINGS"
                | "ISLANDS"
                | "GOT"
                | "OUTPUT"
                | "CHECKPOINTS"
        )
    )
}

pub struct MonitorSession {
    pub id: u64,
    base: PathBuf,
}

impl MonitorSession {
    /// `base` anchors relative `LOADMOD` paths.
    pub fn new(id: u64, base: &Path) -> Self {
        Self {
            id,
            base: base.to_owned(),
        }
    }

    pub fn execute(&self, rt: &mut Runtime, line: &str) -> Reply {
        let words: Vec<&str> = line.split_whitespace().collect();
        let Some(cmd) = words.first() else {
            return Reply::err("syntax", "empty command");
        };
        match self.dispatch(rt, &cmd.to_ascii_uppercase(), &words[1..]) {
            Ok(r) | Err(r) => r,
        }
    }

    fn dispatch(&self, rt: &mut Runtime, cmd: &str, a: &[&str]) -> Result<Reply, Reply> {
        let ok = |rows: Vec<Vec<String>>| Ok(Reply::Rows(rows));
        match cmd {
            "STATUS" => {
                let st = rt.state();
                let stats = rt.stats();
                ok(vec![
                    row(["modules".into(), rt.modules().len().to_string()]),
                    row(["beads".into(), st.registry.beads.len().to_string()]),
                    row(["weaves".into(), st.weaver.weaves.len().to_string()]),
                    row(["strings".into(), st.strings.len().to_string()]),
                    row(["live".into(), rt.live_strings().to_string()]),
                    row(["islands".into(), st.islands.len().to_string()]),
                    row(["nodes".into(), st.heap.node_count().to_string()]),
                    row(["policy".into(), st.sched.policy.label()]),
                    row(["instructions".into(), stats.instructions.to_string()]),
                    row(["switches".into(), stats.switches.to_string()]),
                    row([
                        "checkpoints".into(),
                        rt.checkpoint_names().count().to_string(),
                    ]),
                ])
            }
            "MODULES" => ok(rt
                .modules()
                .iter()
                .map(|m| {
                    row([
                        m.id.to_string(),
                        m.name.clone(),
                        m.code.len().to_string(),
                        m.data_len().to_string(),
                        m.exports.keys().cloned().collect::<Vec<_>>().join(","),
                    ])
                })
                .collect()),
            "BEADS" => ok(rt
                .state()
                .registry
                .beads
                .values()
                .map(|b| {
                    row([
                        b.id.to_string(),
                        b.name.clone(),
                        rt.modules()[b.module.0 as usize].name.clone(),
                        b.node.0.to_string(),
                        island_name(rt, b.island),
                        format!("{:#x}", b.data_base),
                    ])
                })
                .collect()),
            "WEAVES" => ok(rt
                .state()
                .weaver
                .weaves
                .values()
                .map(|w| {
                    let beads: Vec<String> = w
                        .beads
                        .iter()
                        .filter_map(|b| rt.bead(*b))
                        .map(|b| b.name.clone())
                        .collect();
                    row([
                        w.id.to_string(),
                        w.name.clone(),
                        island_name(rt, w.island),
                        beads.join(","),
                    ])
                })
                .collect()),
            "STRINGS" => ok(rt
                .state()
                .strings
                .values()
                .map(|s| {
                    row([
                        s.id.to_string(),
                        s.name.clone(),
                        rt.weave(s.weave)
                            .map_or_else(|| s.weave.to_string(), |w| w.name.clone()),
                        s.status.label(),
                        island_name(rt, s.island),
                        s.instructions.to_string(),
                    ])
                })
                .collect()),
            "ISLANDS" => ok(rt
                .islands()
                .map(|i| {
                    let beads: Vec<String> = i
                        .beads
                        .iter()
                        .filter_map(|b| rt.bead(*b))
                        .map(|b| b.name.clone())
                        .collect();
                    row([
                        i.id.to_string(),
                        i.name.clone(),
                        i.home_node.0.to_string(),
                        i.vm_region.map_or_else(|| "-".into(), |r| r.to_string()),
                        beads.join(","),
                    ])
                })
                .collect()),
            "GOT" => {
                let name = a
                    .first()
                    .ok_or_else(|| Reply::err("syntax", "usage: GOT weave"))?;
                let w = rt
                    .weave(rt.weave_id(name)?)
                    .expect("id just resolved")
                    .clone();
                let mut rows = Vec::new();
                for r in &w.rows {
                    let def = &rt.modules()[r.module.0 as usize];
                    let bead = rt
                        .bead(r.bead)
                        .map_or_else(|| r.bead.to_string(), |b| b.name.clone());
                    for (slot, e) in r.entries.iter().enumerate() {
                        let target = match e {
                            GotEntry::Data(addr) => format!("data {addr:#x}"),
                            GotEntry::Code { module, offset } => {
                                format!("code {}+{offset}", rt.modules()[module.0 as usize].name)
                            }
                        };
                        rows.push(row([
                            def.name.clone(),
                            bead.clone(),
                            slot.to_string(),
                            def.slots[slot].name.clone(),
                            target,
                        ]));
                    }
                }
                ok(rows)
            }
            "OUTPUT" => {
                let filter =
                    match a.first() {
                        Some(n) => Some(rt.string_id(n).ok_or_else(|| {
                            Reply::err("unknown", format!("unknown string `{n}`"))
                        })?),
                        None => None,
                    };
                ok(rt
                    .output()
                    .iter()
                    .filter(|e| filter.is_none_or(|f| f == e.string))
                    .map(|e| {
                        let v = match e.value {
                            OutputValue::Int(v) => v.to_string(),
                            OutputValue::Char(c) => format!("{:?}", c as char),
                        };
                        let name = rt
                            .string(e.string)
                            .map_or_else(|| e.string.to_string(), |s| s.name.clone());
                        row([name, v])
                    })
                    .collect())
            }
            "CHECKPOINTS" => ok(rt
                .checkpoint_names()
                .map(|n| {
                    let cp = rt.checkpoint_info(n).expect("listed");
                    row([
                        n.to_owned(),
                        cp.mode.label().to_owned(),
                        rt.page_store_len(n).unwrap_or(0).to_string(),
                    ])
                })
                .collect()),
            "BEAD" => {
                if a.len() != 3 {
                    return Err(Reply::err("syntax", "usage: BEAD name module node"));
                }
                let m = rt.module_id(a[1])?;
                let node: u32 = arg(a, 2, "node")?;
                let id = rt.instantiate_bead(m, a[0], NodeId(node), None)?;
                ok(vec![row([id.to_string()])])
            }
            "WEAVE" => {
                if a.len() < 2 {
                    return Err(Reply::err("syntax", "usage: WEAVE name bead..."));
                }
                let beads = a[1..]
                    .iter()
                    .map(|b| rt.bead_id(b))
                    .collect::<Result<Vec<_>, _>>()?;
                let id = rt.create_weave(a[0], &beads)?;
                ok(vec![row([id.to_string()])])
            }
            "STRING" => {
                if a.len() < 3 {
                    return Err(Reply::err(
                        "syntax",
                        "usage: STRING name weave module:func [args...]",
                    ));
                }
                let w = rt.weave_id(a[1])?;
                let args = (3..a.len())
                    .map(|i| arg(a, i, "argument"))
                    .collect::<Result<Vec<i64>, _>>()?;
                let id = rt.spawn_string(a[0], w, a[2], &args)?;
                ok(vec![row([id.to_string()])])
            }
            "CHECKPOINT" => {
                let name = a
                    .first()
                    .ok_or_else(|| Reply::err("syntax", "usage: CHECKPOINT name [naive|cow]"))?;
                let mode = match a.get(1) {
                    None => CheckpointMode::Cow,
                    Some(m) => CheckpointMode::parse(m)
                        .ok_or_else(|| Reply::err("syntax", format!("bad mode `{m}`")))?,
                };
                rt.checkpoint(name, mode).map_err(Error::from)?;
                ok(Vec::new())
            }
            "RESTORE" => {
                let name = a
                    .first()
                    .ok_or_else(|| Reply::err("syntax", "usage: RESTORE name"))?;
                rt.restore(name).map_err(Error::from)?;
                ok(Vec::new())
            }
            "MIGRATE" => {
                if a.len() != 2 {
                    return Err(Reply::err("syntax", "usage: MIGRATE island node"));
                }
                let island = rt.island_id(a[0])?;
                let node: u32 = arg(a, 1, "node")?;
                rt.migrate(island, NodeId(node)).map_err(Error::from)?;
                ok(Vec::new())
            }
            "LOADMOD" => {
                let path = a
                    .first()
                    .ok_or_else(|| Reply::err("syntax", "usage: LOADMOD path"))?;
                let obj = load_object_file(&self.base.join(path))
                    .map_err(|e| Reply::err("load", e.to_string()))?;
                let name = obj.name.clone();
                let id = rt.define_module(&name, vec![obj])?;
                ok(vec![row([id.to_string(), name])])
            }
            "RUN" => {
                let report = match a.first() {
                    Some(_) => rt.run_slices(arg(a, 0, "slice count")?)?,
                    None => rt.run_to_completion()?,
                };
                ok(vec![row([
                    report.slices.to_string(),
                    report.instructions.to_string(),
                ])])
            }
            "QUIT" => Ok(Reply::Quit),
            other => Err(Reply::err("syntax", format!("unknown command `{other}`"))),
        }
    }
}

fn island_name(rt: &Runtime, id: crate::ids::IslandId) -> String {
    rt.state()
        .islands
        .get(&id)
        .map_or_else(|| id.to_string(), |i| i.name.clone())
}

/// A command queued for the runtime thread.
pub struct Request {
    pub session: u64,
    pub line: String,
    pub reply: Sender<Reply>,
}

/// Runs strings and applies queued commands between slices. Returns on
/// `QUIT`, or once every sender is gone and nothing is left to run.
pub fn drive(rt: &mut Runtime, base: &Path, requests: &Receiver<Request>) -> Result<(), Error> {
    let mut stalled: Option<Error> = None;
    loop {
        let idle = stalled.is_some() || rt.live_strings() == 0;
        let next = if idle {
            match requests.recv_timeout(Duration::from_millis(50)) {
                Ok(r) => Some(r),
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => return stalled.map_or(Ok(()), Err),
            }
        } else {
            requests.try_recv().ok()
        };
        if let Some(req) = next {
            let reply = MonitorSession::new(req.session, base).execute(rt, &req.line);
            let quit = reply == Reply::Quit;
            if reply.is_ok() && !is_read_only(&req.line) {
                stalled = None;
            }
            let _ = req.reply.send(reply);
            if quit {
                return Ok(());
            }
            continue;
        }
        if let Err(e) = rt.run_slice() {
            stalled = Some(e);
        }
    }
}
