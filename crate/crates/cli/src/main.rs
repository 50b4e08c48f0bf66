use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use pulptile::graph::{
    build_transformer_encoder, emit_graph, infer_shapes, parse_graph, Graph, TransformerParams,
};
use pulptile::lowering::lowering_report;
use pulptile::par::Exec;
use pulptile::pipeline::{compile, sweep_csv, sweep_sequence, Compiled, Options, PipelineError};
use pulptile::platform::ClusterConfig;
use pulptile::schedule::{emit_pseudocode, schedule_json};
use pulptile::sim::{
    check_schedule_against_sim, gantt, simulate, timeline_csv, work_conservation_audit,
};
use pulptile::tiler::trace_json_lines;

#[derive(Parser)]
#[command(
    name = "pulptile",
    version,
    about = "Tile, schedule and simulate DNN graphs on PULP clusters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Lower, tile and schedule a graph; writes schedule.json, lowering.json and pseudocode.c.txt
    Compile(RunArgs),
    /// Compile and simulate; writes report.json
    Simulate(RunArgs),
    /// Sequence-length sweep of the encoder generator; writes sweep.csv
    Sweep(SweepArgs),
    /// Write a generated graph document to graph.json
    Gen(GenArgs),
}

#[derive(Args)]
struct Source {
    /// Graph document (JSON)
    #[arg(long, conflicts_with = "gen_transformer")]
    graph: Option<PathBuf>,
    /// Encoder generator parameters: layers,d_m,heads,d_ff,seq
    #[arg(long, value_name = "L,DM,H,DFF,S")]
    gen_transformer: Option<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    source: Source,
    /// Preset name or platform file (JSON/TOML)
    #[arg(long, default_value = "8xRVnn+NE")]
    platform: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Also write pseudocode.c.txt when simulating
    #[arg(long)]
    emit_pseudocode: bool,
    /// Write timeline.csv and gantt.txt
    #[arg(long)]
    timeline: bool,
    /// Write the tiling search trace to solver_trace.jsonl
    #[arg(long)]
    solver_trace: bool,
    /// Run without the thread pool
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Encoder parameters; the sweep runs seq = 1..=S
    #[arg(long, value_name = "L,DM,H,DFF,S", default_value = "8,64,16,256,32")]
    gen_transformer: String,
    /// Comma-separated presets or platform files; the first is the baseline
    #[arg(long, default_value = "8xRV,8xRVnn,8xRVnn+NE", value_delimiter = ',')]
    presets: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    source: Source,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Error attributed to a pipeline stage.
struct Failure {
    stage: String,
    message: String,
}

impl Failure {
    fn new(stage: &str, message: impl ToString) -> Self {
        Self {
            stage: stage.to_string(),
            message: message.to_string(),
        }
    }

    fn to_json(&self) -> String {
        serde_json::json!({ "stage": self.stage, "error": self.message }).to_string()
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let stage = serde_json::to_value(e.stage()).expect("stage serializes");
        Failure::new(stage.as_str().unwrap_or("pipeline"), e)
    }
}

fn parse_params(spec: &str) -> Result<TransformerParams, Failure> {
    let v: Vec<u64> = spec
        .split(',')
        .map(|x| x.trim().parse::<u64>())
        .collect::<Result<_, _>>()
        .map_err(|e| Failure::new("graph", format!("--gen-transformer `{spec}`: {e}")))?;
    let [l, dm, h, dff, s] = v[..] else {
        return Err(Failure::new(
            "graph",
            format!("--gen-transformer `{spec}`: expected 5 values"),
        ));
    };
    TransformerParams::new(l, dm, h, dff, s).map_err(|e| Failure::new("graph", e))
}

fn load_graph(src: &Source) -> Result<Graph, Failure> {
    match (&src.graph, &src.gen_transformer) {
        (Some(path), None) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Failure::new("graph", format!("{}: {e}", path.display())))?;
            let g = parse_graph(&text).map_err(|e| Failure::new("graph", e))?;
            infer_shapes(&g).map_err(|e| Failure::new("graph", e))
        }
        (None, Some(spec)) => {
            build_transformer_encoder(&parse_params(spec)?).map_err(|e| Failure::new("graph", e))
        }
        _ => Err(Failure::new(
            "graph",
            "exactly one of --graph and --gen-transformer is required",
        )),
    }
}

fn load_platform(name: &str) -> Result<ClusterConfig, Failure> {
    ClusterConfig::resolve(name).map_err(|e| Failure::new("config", e))
}

fn write(out: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    let path = out.join(name);
    fs::write(&path, contents)
        .map_err(|e| Failure::new("output", format!("{}: {e}", path.display())))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn exec(sequential: bool) -> Exec {
    if sequential {
        Exec::Sequential
    } else {
        Exec::default()
    }
}

fn build(args: &RunArgs) -> Result<(Graph, ClusterConfig, Compiled), Failure> {
    let cfg = load_platform(&args.platform)?;
    let g = load_graph(&args.source)?;
    let opts = Options {
        exec: exec(args.sequential),
        trace: args.solver_trace,
    };
    let c = compile(&g, &cfg, opts)?;
    info!(
        "{} fused nodes, {} actions, L1 peak {} B",
        c.schedule.nodes.len(),
        c.schedule.actions.len(),
        c.schedule.allocation.peak_bytes
    );
    if args.solver_trace {
        write(&args.out, "solver_trace.jsonl", &trace_json_lines(&c.trace))?;
    }
    Ok((g, cfg, c))
}

fn cmd_compile(args: &RunArgs) -> Result<(), Failure> {
    let (_, _, c) = build(args)?;
    write(&args.out, "schedule.json", &schedule_json(&c.schedule))?;
    write(&args.out, "lowering.json", &lowering_report(&c.lowered))?;
    write(&args.out, "pseudocode.c.txt", &emit_pseudocode(&c.schedule))?;
    Ok(())
}

fn cmd_simulate(args: &RunArgs) -> Result<(), Failure> {
    let (g, cfg, c) = build(args)?;
    let report = simulate(&c.schedule, &cfg).map_err(PipelineError::from)?;
    write(&args.out, "report.json", &report.to_json())?;
    if args.emit_pseudocode {
        write(&args.out, "pseudocode.c.txt", &emit_pseudocode(&c.schedule))?;
    }
    if args.timeline {
        write(
            &args.out,
            "timeline.csv",
            &timeline_csv(&c.schedule, &report),
        )?;
        write(&args.out, "gantt.txt", &gantt(&report))?;
    }
    let utilization: Vec<String> = report
        .busy
        .iter()
        .map(|(r, b)| {
            format!(
                "{r} {:.1}%",
                100.0 * *b as f64 / report.total_cycles.max(1) as f64
            )
        })
        .collect();
    println!(
        "total_cycles {} overhead {:.2}% utilization {}",
        report.total_cycles,
        100.0 * report.data_movement_overhead,
        utilization.join(", ")
    );
    let violations = check_schedule_against_sim(&c.schedule, &report);
    if !violations.is_empty() {
        let json = serde_json::to_string_pretty(&violations).expect("violations serialize");
        write(&args.out, "diagnostics.json", &json)?;
        return Err(Failure::new(
            "sim",
            format!(
                "{} schedule violations, first: {}",
                violations.len(),
                violations[0]
            ),
        ));
    }
    work_conservation_audit(&c.schedule, &g).map_err(|e| Failure::new("sim", e))?;
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), Failure> {
    let p = parse_params(&args.gen_transformer)?;
    let configs: Vec<ClusterConfig> = args
        .presets
        .iter()
        .map(|n| load_platform(n))
        .collect::<Result<_, _>>()?;
    let seq: Vec<u64> = (1..=p.s).collect();
    match sweep_sequence(&p, &seq, &configs, exec(args.sequential)) {
        Ok(rows) => {
            info!("{} sweep rows", rows.len());
            write(&args.out, "sweep.csv", &sweep_csv(&rows))
        }
        Err(e) => {
            write(&args.out, "sweep.csv", &sweep_csv(&e.rows))?;
            write(&args.out, "sweep.partial", &format!("{e}\n"))?;
            let stage = Failure::from(*e.source).stage;
            Err(Failure {
                stage,
                message: format!(
                    "sweep point s={} on `{}` failed; sweep.csv is partial",
                    e.s, e.config
                ),
            })
        }
    }
}

fn cmd_gen(args: &GenArgs) -> Result<(), Failure> {
    let g = load_graph(&args.source)?;
    write(&args.out, "graph.json", &emit_graph(&g))
}

fn out_dir(cmd: &Command) -> &Path {
    match cmd {
        Command::Compile(a) | Command::Simulate(a) => &a.out,
        Command::Sweep(a) => &a.out,
        Command::Gen(a) => &a.out,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("PULPTILE_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    let out = out_dir(&cli.command).to_path_buf();
    let result = fs::create_dir_all(&out)
        .map_err(|e| Failure::new("output", format!("{}: {e}", out.display())))
        .and_then(|_| match &cli.command {
            Command::Compile(a) => cmd_compile(a),
            Command::Simulate(a) => cmd_simulate(a),
            Command::Sweep(a) => cmd_sweep(a),
            Command::Gen(a) => cmd_gen(a),
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let json = f.to_json();
            eprintln!("{json}");
            if out.is_dir() {
                let _ = fs::write(out.join("error.json"), format!("{json}\n"));
            }
            ExitCode::FAILURE
        }
    }
}
