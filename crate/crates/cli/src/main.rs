use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, Sender};
use std::sync::Arc;
use std::thread;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use loom_core::elfscan::scan_elf;
use loom_core::tapestry::bench::{run_bench, BenchModel, BenchParams, DEFAULT_QUANTUM};
use loom_core::tapestry::monitor::{drive, Request};
use loom_core::tapestry::{load_config_file, load_tapestry, parse_config};
use loom_core::vm::exec::render_output;
use loom_core::vm::ExecStatus;
use loom_core::wof::asm::{assemble, disassemble};
use loom_core::wof::parse_object;
use loom_core::Runtime;

#[derive(Parser)]
#[command(
    name = "loom",
    version,
    about = "Compose and run tapestries of beads, weaves and strings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a tapestry config and run it.
    Run {
        config: PathBuf,
        /// Serve the monitor protocol: `stdio`, `tcp:HOST:PORT` or `unix:PATH`.
        #[arg(long)]
        monitor: Option<String>,
    },
    /// Run the delay-loop benchmark.
    Bench {
        #[arg(long, default_value_t = 1)]
        flows: u64,
        /// baseline, shared_weave or disjoint_weaves
        #[arg(long, default_value = "shared_weave")]
        model: String,
        #[arg(long, default_value_t = 10_000_000)]
        work: u64,
        /// Globals in the delay-loop module.
        #[arg(long, default_value_t = 1)]
        globals: usize,
        #[arg(long, default_value_t = DEFAULT_QUANTUM)]
        quantum: u64,
        #[arg(long)]
        json: bool,
    },
    /// Assemble source into a binary object.
    Asm {
        file: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Print a binary object as assembly.
    Disasm { file: PathBuf },
    /// Report the data context of a relocatable ELF object.
    Elfscan {
        file: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Check a config: syntax, references, island closure, object files.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("loom: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Command) -> anyhow::Result<ExitCode> {
    match cmd {
        Command::Run { config, monitor } => run(&config, monitor.as_deref()),
        Command::Bench {
            flows,
            model,
            work,
            globals,
            quantum,
            json,
        } => bench(flows, &model, work, globals, quantum, json),
        Command::Asm { file, output } => {
            let text = std::fs::read_to_string(&file)
                .with_context(|| format!("reading {}", file.display()))?;
            let object = assemble(&text).with_context(|| file.display().to_string())?;
            let out = output.unwrap_or_else(|| file.with_extension("wof"));
            std::fs::write(&out, object.serialize()?)
                .with_context(|| format!("writing {}", out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Disasm { file } => {
            let bytes =
                std::fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let mut object = parse_object(&bytes).with_context(|| file.display().to_string())?;
            object.name = stem(&file);
            print!("{}", disassemble(&object));
            Ok(ExitCode::SUCCESS)
        }
        Command::Elfscan { file, json } => {
            let bytes =
                std::fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
            let report =
                scan_elf(&stem(&file), &bytes).with_context(|| file.display().to_string())?;
            if json {
                println!("{}", report.to_json());
            } else {
                println!("object\t{}", report.object_name);
                println!("pic\t{}", report.pic);
                println!("got_relocations\t{}", report.got_relocation_count);
                println!("data_context_bytes\t{}", report.total_data_context_bytes);
                for g in &report.globals {
                    println!("{}\t{:?}\t{}\t{}", g.name, g.section, g.size, g.alignment);
                }
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { config } => validate(&config),
    }
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn run(config: &Path, monitor: Option<&str>) -> anyhow::Result<ExitCode> {
    let (_, mut rt) = load_config_file(config)?;
    let base = config.parent().unwrap_or(Path::new(".")).to_owned();
    let Some(addr) = monitor else {
        let result = rt.run_to_completion();
        print!("{}", render_output(rt.output()));
        report_failures(&rt);
        result?;
        return Ok(exit_for(&rt));
    };

    let (tx, rx) = mpsc::channel::<Request>();
    let sessions = Arc::new(AtomicU64::new(1));
    if addr == "stdio" {
        let tx = tx.clone();
        thread::spawn(move || serve_stream(1, std::io::stdin().lock(), std::io::stdout(), &tx));
    } else if let Some(a) = addr.strip_prefix("tcp:") {
        let listener = std::net::TcpListener::bind(a).with_context(|| format!("binding {a}"))?;
        eprintln!("monitor listening on tcp:{}", listener.local_addr()?);
        let tx = tx.clone();
        thread::spawn(move || {
            for conn in listener.incoming().flatten() {
                let id = sessions.fetch_add(1, Ordering::Relaxed);
                let tx = tx.clone();
                thread::spawn(move || {
                    if let Ok(read) = conn.try_clone() {
                        serve_stream(id, BufReader::new(read), conn, &tx);
                    }
                });
            }
        });
    } else if let Some(p) = addr.strip_prefix("unix:") {
        let _ = std::fs::remove_file(p);
        let listener =
            std::os::unix::net::UnixListener::bind(p).with_context(|| format!("binding {p}"))?;
        eprintln!("monitor listening on unix:{p}");
        let tx = tx.clone();
        thread::spawn(move || {
            for conn in listener.incoming().flatten() {
                let id = sessions.fetch_add(1, Ordering::Relaxed);
                let tx = tx.clone();
                thread::spawn(move || {
                    if let Ok(read) = conn.try_clone() {
                        serve_stream(id, BufReader::new(read), conn, &tx);
                    }
                });
            }
        });
    } else {
        bail!("monitor address must be stdio, tcp:HOST:PORT or unix:PATH");
    }
    drop(tx);
    let result = drive(&mut rt, &base, &rx);
    report_failures(&rt);
    result?;
    Ok(ExitCode::SUCCESS)
}

/// Forwards each line to the runtime thread and writes back its reply.
fn serve_stream(session: u64, input: impl BufRead, mut output: impl Write, tx: &Sender<Request>) {
    for line in input.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let (reply_tx, reply_rx) = mpsc::channel();
        let quit = line.trim().eq_ignore_ascii_case("QUIT");
        if tx
            .send(Request {
                session,
                line,
                reply: reply_tx,
            })
            .is_err()
        {
            break;
        }
        let Ok(reply) = reply_rx.recv() else { break };
        if output
            .write_all(reply.render().as_bytes())
            .and_then(|_| output.flush())
            .is_err()
            || quit
        {
            break;
        }
    }
}

fn report_failures(rt: &Runtime) {
    for s in rt.state().strings.values() {
        if let ExecStatus::Trapped(t) = &s.status {
            eprintln!("string {} trapped: {t}", s.name);
        }
    }
}

fn exit_for(rt: &Runtime) -> ExitCode {
    if rt
        .state()
        .strings
        .values()
        .any(|s| matches!(s.status, ExecStatus::Trapped(_)))
    {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

fn bench(
    flows: u64,
    model: &str,
    work: u64,
    globals: usize,
    quantum: u64,
    json: bool,
) -> anyhow::Result<ExitCode> {
    let Some(model) = BenchModel::parse(model) else {
        bail!("unknown model `{model}` (baseline, shared_weave, disjoint_weaves)");
    };
    let params = BenchParams {
        flows,
        model,
        total_work: work,
        globals,
        quantum,
    };
    let report = run_bench(&params)?;
    let base = match model {
        BenchModel::Baseline => report.clone(),
        _ => run_bench(&BenchParams {
            model: BenchModel::Baseline,
            ..params
        })?,
    };
    let overhead = report.overhead_vs(&base);
    if json {
        let v = serde_json::json!({
            "model": model.label(),
            "flows": flows,
            "work": work,
            "globals": globals,
            "quantum": quantum,
            "instructions": report.instructions,
            "baseline_instructions": base.instructions,
            "switches": report.switches(),
            "switch_ops": report.stats.switch_ops,
            "switch_bytes_copied": report.stats.switch_bytes_copied,
            "spawn_bytes_copied": report.stats.spawn_bytes_copied,
            "wall_seconds": report.wall.as_secs_f64(),
            "baseline_wall_seconds": base.wall.as_secs_f64(),
            "overhead": overhead,
        });
        println!("{}", serde_json::to_string_pretty(&v)?);
    } else {
        println!("model\t{}", model.label());
        println!("flows\t{flows}");
        println!("work\t{work}");
        println!("instructions\t{}", report.instructions);
        println!("baseline_instructions\t{}", base.instructions);
        println!("switches\t{}", report.switches());
        println!("switch_ops\t{}", report.stats.switch_ops);
        println!("switch_bytes_copied\t{}", report.stats.switch_bytes_copied);
        println!("wall_ms\t{:.3}", report.wall.as_secs_f64() * 1e3);
        println!("baseline_wall_ms\t{:.3}", base.wall.as_secs_f64() * 1e3);
        println!("overhead\t{:+.2}%", overhead * 100.0);
    }
    Ok(ExitCode::SUCCESS)
}

fn validate(config: &Path) -> anyhow::Result<ExitCode> {
    let text =
        std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = parse_config(&text)?;
    let violations = cfg.island_violations();
    for v in &violations {
        println!("violation\t{v}");
    }
    if !violations.is_empty() {
        return Ok(ExitCode::FAILURE);
    }
    let rt = load_tapestry(&cfg, config.parent().unwrap_or(Path::new(".")))?;
    let violations = rt.validate_islands();
    for v in &violations {
        println!("violation\t{v}");
    }
    if !violations.is_empty() {
        return Ok(ExitCode::FAILURE);
    }
    println!(
        "ok\t{} modules\t{} beads\t{} weaves\t{} strings\t{} islands",
        rt.modules().len(),
        rt.state().registry.beads.len(),
        rt.state().weaver.weaves.len(),
        rt.state().strings.len(),
        rt.state().islands.len()
    );
    Ok(ExitCode::SUCCESS)
}
