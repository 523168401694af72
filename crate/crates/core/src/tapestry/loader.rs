//! Materializes a parsed config: modules, tuple marks, islands, beads,
//! weaves, then strings.

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::error::Error;
use crate::ids::NodeId;
use crate::runtime::{Runtime, RuntimeOptions};
use crate::strings::SchedPolicy;
use crate::tapestry::config::{parse_config, ConfigError, TapestryConfig};
use crate::wof::asm::assemble;
use crate::wof::{parse_object, ObjectModule};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LoadError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: {error}")]
    Object { path: PathBuf, error: Error },
    #[error("line {line}: {error}")]
    At { line: usize, error: Error },
}

/// Reads one object: binary when the extension is `wof`, assembly
/// otherwise. The object is named after the file stem.
pub fn load_object_file(path: &Path) -> Result<ObjectModule, LoadError> {
    let io = |e: std::io::Error| LoadError::Io {
        path: path.to_owned(),
        message: e.to_string(),
    };
    let object = |error: Error| LoadError::Object {
        path: path.to_owned(),
        error,
    };
    let mut m = if path.extension().is_some_and(|e| e == "wof") {
        parse_object(&std::fs::read(path).map_err(io)?).map_err(|e| object(e.into()))?
    } else {
        assemble(&std::fs::read_to_string(path).map_err(io)?).map_err(|e| object(e.into()))?
    };
    m.name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(m)
}

pub fn options_for(cfg: &TapestryConfig) -> RuntimeOptions {
    RuntimeOptions {
        nodes: cfg.node_count(),
        policy: cfg.sched.unwrap_or(SchedPolicy::Cooperative),
        ..RuntimeOptions::default()
    }
}

/// Builds a runtime from `cfg`; relative object paths resolve against
/// `base`. Nothing runs yet.
pub fn load_tapestry(cfg: &TapestryConfig, base: &Path) -> Result<Runtime, LoadError> {
    let mut rt = Runtime::new(options_for(cfg));
    load_into(&mut rt, cfg, base)?;
    Ok(rt)
}

pub fn load_into(rt: &mut Runtime, cfg: &TapestryConfig, base: &Path) -> Result<(), LoadError> {
    for m in &cfg.modules {
        let objects = m
            .paths
            .iter()
            .map(|p| load_object_file(&base.join(p)))
            .collect::<Result<Vec<_>, _>>()?;
        rt.define_module(&m.name, objects)
            .map_err(|error| LoadError::At {
                line: m.line,
                error,
            })?;
    }
    let at = |line: usize| move |error: Error| LoadError::At { line, error };
    for t in &cfg.tuples {
        let m = rt.module_id(&t.module).map_err(at(t.line))?;
        rt.mark_tuple(m, &t.symbol).map_err(at(t.line))?;
    }
    for i in &cfg.islands {
        rt.declare_island(&i.name, NodeId(i.node), i.region)
            .map_err(at(i.line))?;
    }
    for b in &cfg.beads {
        let m = rt.module_id(&b.module).map_err(at(b.line))?;
        let island = match cfg.island_of(&b.name) {
            Some(i) => Some(rt.island_id(&i.name).map_err(at(b.line))?),
            None => None,
        };
        rt.instantiate_bead(m, &b.name, NodeId(b.node), island)
            .map_err(at(b.line))?;
    }
    for w in &cfg.weaves {
        let beads = w
            .beads
            .iter()
            .map(|b| rt.bead_id(b))
            .collect::<Result<Vec<_>, _>>()
            .map_err(at(w.line))?;
        rt.create_weave(&w.name, &beads).map_err(at(w.line))?;
    }
    for s in &cfg.strings {
        let w = rt.weave_id(&s.weave).map_err(at(s.line))?;
        rt.spawn_string(&s.name, w, &format!("{}:{}", s.module, s.function), &s.args)
            .map_err(at(s.line))?;
    }
    Ok(())
}

/// Parses and loads a config file.
pub fn load_config_file(path: &Path) -> Result<(TapestryConfig, Runtime), LoadError> {
    let text = std::fs::read_to_string(path).map_err(|e| LoadError::Io {
        path: path.to_owned(),
        message: e.to_string(),
    })?;
    let cfg = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let rt = load_tapestry(&cfg, base)?;
    Ok((cfg, rt))
}
