//! `ratchet`: command-line front end for the spin-ratchet simulator.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use ratchet_core::experiments::{
    apply_overrides, registry, run_spec, scenario, RunContext, ScenarioKind, ScenarioSpec,
};
use ratchet_core::model::{eigen_branches, gap_estimates, matching_field, BranchOptions, ClusterConfig};
use ratchet_core::transfer_matrix::{
    analytic_cycle_relaxed, analytic_cycle_unrelaxed, compose_cycle, iterate, write_tm_csv,
    BranchPopulations, LzParams, TmLight,
};
use ratchet_core::Error;

use config::{describe, load, parse_sets, ConfigError};

#[derive(Parser)]
#[command(name = "ratchet", version, about = "NV-P1-proton spin-ratchet DNP simulator")]
struct Cli {
    /// Suppress the parameter echo on stderr.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sweep protocol of a config file and write data.csv + meta.json.
    Simulate(SimulateArgs),
    /// Eigenenergy branches over a field range.
    Diagram(DiagramArgs),
    /// Iterate the transfer-matrix cycle model.
    Tm(TmArgs),
    /// Run a registered figure scenario.
    Scan(ScanArgs),
    /// Registered scenarios.
    Scenario {
        #[command(subcommand)]
        cmd: ScenarioCmd,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    List,
}

#[derive(Args)]
struct OutputArgs {
    /// Output root; results go to <root>/<scenario>/<timestamp>/.
    #[arg(long, env = "RATCHET_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML run config, or a meta.json from an earlier run.
    config: PathBuf,
    #[arg(long)]
    cycles: Option<usize>,
    #[arg(long = "beta-up", value_name = "MT_PER_MS")]
    beta_up: Option<f64>,
    #[arg(long = "beta-down", value_name = "MT_PER_MS")]
    beta_down: Option<f64>,
    /// Override any resolved key, e.g. `sweep.t1=true`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct DiagramArgs {
    /// TOML run config; the default three-spin cluster when absent.
    config: Option<PathBuf>,
    #[arg(long = "from", value_name = "MT")]
    from: Option<f64>,
    #[arg(long = "to", value_name = "MT")]
    to: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    /// Add the two host nitrogen nuclei.
    #[arg(long)]
    hosts: bool,
    /// Branch CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the detected anti-crossings here.
    #[arg(long)]
    crossings: Option<PathBuf>,
}

#[derive(Args)]
struct TmArgs {
    /// Narrow-gap probability of the up sweep; taken from the gap estimates
    /// of the default cluster when absent.
    #[arg(long)]
    p1: Option<f64>,
    /// Narrow-gap probability of the down sweep; 1 when --p1 is given.
    #[arg(long = "p1-down")]
    p1_down: Option<f64>,
    /// Wide-gap probability, both directions (ignored with --sd).
    #[arg(long, default_value_t = 0.0)]
    p0: f64,
    /// Strong-dephasing limit: wide-gap probabilities become 1/2.
    #[arg(long)]
    sd: bool,
    /// P1 relaxation after each sweep.
    #[arg(long)]
    t1: bool,
    /// Use the closed-form cycle matrices (p1 down = 1).
    #[arg(long)]
    analytic: bool,
    #[arg(long, default_value_t = 100)]
    cycles: usize,
    #[arg(long = "beta-up", value_name = "MT_PER_MS", default_value_t = 3.0)]
    beta_up: f64,
    #[arg(long = "beta-down", value_name = "MT_PER_MS", default_value_t = 3.0)]
    beta_down: f64,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScanArgs {
    scenario: String,
    /// Resolution of every swept axis.
    #[arg(long)]
    points: Option<usize>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    workers: Option<usize>,
    /// Directory for resumable per-point checkpoints.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for bad input, 2 for failures of the simulation itself.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.is::<ConfigError>() {
            return 1;
        }
        if let Some(core) = cause.downcast_ref::<Error>() {
            return match core {
                Error::InvalidParameter { .. }
                | Error::UnknownScenario { .. }
                | Error::InvalidSpin(_)
                | Error::DuplicateSite(_)
                | Error::Json(_)
                | Error::Io(_) => 1,
                _ => 2,
            };
        }
    }
    1
}

fn run(cli: Cli) -> Result<()> {
    let echo = |spec: &ScenarioSpec| {
        if !cli.quiet {
            for line in describe(spec) {
                eprintln!("{line}");
            }
        }
    };
    match cli.cmd {
        Command::Simulate(a) => simulate(a, echo),
        Command::Diagram(a) => diagram(a),
        Command::Tm(a) => tm(a),
        Command::Scan(a) => scan(a, echo),
        Command::Scenario { cmd: ScenarioCmd::List } => {
            let mut out = std::io::stdout().lock();
            for s in registry() {
                writeln!(out, "{:<12} {:<6} {}", s.name, s.figure, s.description)?;
            }
            Ok(())
        }
    }
}

fn output_root(flag: Option<PathBuf>, file: Option<PathBuf>) -> PathBuf {
    flag.or(file).unwrap_or_else(|| PathBuf::from("out"))
}

fn simulate(a: SimulateArgs, echo: impl Fn(&ScenarioSpec)) -> Result<()> {
    let loaded = load(&a.config)?;
    let explicit = matches!(loaded.spec.kind, ScenarioKind::Explicit { .. });
    let mut sets = Vec::new();
    if let Some(n) = a.cycles {
        let key = if explicit { "kind.protocol.n_cycles" } else { "sweep.n_cycles" };
        sets.push((key.to_string(), n.to_string()));
    }
    if let Some(b) = a.beta_up {
        sets.push(("sweep.beta_up_mT_per_ms".into(), b.to_string()));
    }
    if let Some(b) = a.beta_down {
        sets.push(("sweep.beta_down_mT_per_ms".into(), b.to_string()));
    }
    sets.extend(parse_sets(&a.sets)?);
    let spec = apply_overrides(&loaded.spec, &sets)?;
    echo(&spec);
    let result = run_spec(&spec, &RunContext::default())?;
    let root = output_root(a.output.out, loaded.output_dir);
    let dir = result.write_to(&root)?;
    println!("{}", dir.display());
    Ok(())
}

fn diagram(a: DiagramArgs) -> Result<()> {
    let (mut cfg, range) = match &a.config {
        Some(p) => {
            let l = load(p)?;
            (l.spec.cluster, l.diagram)
        }
        None => (ClusterConfig::three_spin(0.5, 0.1), None),
    };
    if a.hosts {
        cfg = cfg.with_hosts(true);
    }
    let (lo, hi, n) = match range {
        Some(r) => (r.b_start, r.b_end, r.points),
        None => {
            let bm = matching_field(&cfg)?;
            (bm - 1.0, bm + 1.0, 401)
        }
    };
    let (lo, hi, n) = (a.from.unwrap_or(lo), a.to.unwrap_or(hi), a.points.unwrap_or(n));
    if n < 2 || !(hi > lo) {
        return Err(ConfigError(format!("field range [{lo}, {hi}] mT with {n} points is empty")).into());
    }
    let grid: Vec<f64> = (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect();
    let d = eigen_branches(&cfg, &grid, &BranchOptions::default())?;

    let mut w = csv::Writer::from_writer(sink(a.out.as_deref())?);
    w.write_record(["B_mT", "branch_index", "energy_MHz", "label"])?;
    for (b, row) in d.fields.iter().zip(&d.energies) {
        for (k, e) in row.iter().enumerate() {
            w.write_record([format!("{b:.9}"), k.to_string(), format!("{e:.9}"), d.labels[k].clone()])?;
        }
    }
    w.flush()?;

    if let Some(p) = a.crossings {
        let mut c = csv::Writer::from_path(&p).with_context(|| p.display().to_string())?;
        c.write_record(["B_mT", "gap_MHz", "width_mT", "lower", "upper"])?;
        for x in &d.crossings {
            c.write_record([
                format!("{:.9}", x.field),
                format!("{:.9}", x.gap),
                format!("{:.9}", x.width),
                x.branches.0.to_string(),
                x.branches.1.to_string(),
            ])?;
        }
        c.flush()?;
    }
    for x in &d.crossings {
        eprintln!(
            "anti-crossing at {:.4} mT: gap {:.4} MHz between branches {} and {}",
            x.field, x.gap, x.branches.0, x.branches.1
        );
    }
    Ok(())
}

fn tm(a: TmArgs) -> Result<()> {
    let cfg = ClusterConfig::three_spin(0.5, 0.1);
    let from_gaps = || -> Result<LzParams> {
        let g = gap_estimates(&cfg)?;
        Ok(LzParams::from_gaps(&g, &cfg.constants, a.beta_up, a.beta_down, a.sd)?)
    };
    let cycle = if a.analytic {
        let p1 = match a.p1 {
            Some(p) => p,
            None => from_gaps()?.p1_up,
        };
        if a.t1 {
            analytic_cycle_relaxed(p1)?
        } else {
            analytic_cycle_unrelaxed(p1)?
        }
    } else {
        let mut p = from_gaps()?;
        if let Some(p1) = a.p1 {
            p.p1_up = p1;
            p.p1_down = a.p1_down.unwrap_or(1.0);
        } else if let Some(d) = a.p1_down {
            p.p1_down = d;
        }
        if a.sd {
            p.p0_up = 0.5;
            p.p0_down = 0.5;
        } else if a.p1.is_some() {
            p.p0_up = a.p0;
            p.p0_down = a.p0;
        }
        let p = LzParams::new(p.p0_up, p.p1_up, p.p0_down, p.p1_down)?;
        compose_cycle(&p, a.t1, TmLight::Start)?
    };
    let steps = iterate(&cycle, &BranchPopulations::after_light(), a.cycles);
    write_tm_csv(&steps, sink(a.out.as_deref())?)?;
    Ok(())
}

fn scan(a: ScanArgs, echo: impl Fn(&ScenarioSpec)) -> Result<()> {
    let mut spec = scenario(&a.scenario)?;
    if let Some(n) = a.points {
        spec.set_points(n);
    }
    let spec = apply_overrides(&spec, &parse_sets(&a.sets)?)?;
    echo(&spec);
    let ctx = RunContext {
        workers: a.workers,
        checkpoint_dir: a.checkpoint,
    };
    let result = run_spec(&spec, &ctx)?;
    for f in &result.meta.failures {
        eprintln!("point {:?} failed: {}", f.point, f.error);
    }
    let dir = result.write_to(&output_root(a.output.out, None))?;
    println!("{}", dir.display());
    Ok(())
}

fn sink(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(std::fs::File::create(p).map_err(|e| ConfigError(format!("{}: {e}", p.display())))?),
        None => Box::new(std::io::stdout().lock()),
    })
}
