use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afto::config::{BuiltProblem, ProblemConfig, RunConfig};
use afto::cuts::PolytopeSnapshot;
use afto::diagnostics::{check_refinement, estimate_h_mu, SamplingConfig};
use afto::harness::{paired_bench, refine, run, Checkpoint, CutState, RunOptions, RunStatus};
use afto::outer::stationarity_gap;
use afto::problem::{DualState, PrimalState};
use afto::problems::evaluate_model;
use afto::AftoError;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

#[derive(Parser)]
#[command(name = "afto", version, about = "Asynchronous federated trilevel optimization")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the configured problem and write the run log, CSV and checkpoint.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Paired sync/async runs; writes both logs and a speedup summary.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Squared-gap level the two runs race to.
        #[arg(long, default_value_t = 1e-3)]
        threshold: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Stationarity gap of a checkpoint.
    Gap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the polytopes of a checkpoint as JSON.
    DumpPolytope {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = LayerArg::Both)]
        layer: LayerArg,
    },
    /// Run with cut recording and sample-check every generated cut.
    ValidateCuts {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: SamplingArgs,
    },
    /// Empirical weak-convexity modulus of both constraint functions at the
    /// starting point.
    EstimateMu {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 30)]
        points: usize,
        #[arg(long, default_value_t = 1.0)]
        radius: f64,
    },
}

#[derive(Args)]
struct SamplingArgs {
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    #[arg(long, default_value_t = 20_000)]
    max_draws: usize,
    #[arg(long, default_value_t = 1.0)]
    radius: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerArg {
    I,
    Ii,
    Both,
}

/// Exit codes: 2 for configuration problems, 3 for numeric aborts.
enum Failure {
    Config(String),
    Numeric(String),
    Other(String),
    Check(String),
}

impl From<AftoError> for Failure {
    fn from(e: AftoError) -> Self {
        match e {
            AftoError::Config(_) | AftoError::StepSize(_) | AftoError::Data(_) | AftoError::Dimension { .. } => {
                Failure::Config(e.to_string())
            }
            AftoError::NonFinite { .. } | AftoError::UnrollDiverged { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Other(format!("{}: {e}", path.display()))
}

fn load(common: &Common) -> Result<(RunConfig, BuiltProblem), Failure> {
    let mut cfg = RunConfig::load(&common.config).map_err(|e| match e {
        AftoError::Io(io) => Failure::Config(format!("{}: {io}", common.config.display())),
        other => other.into(),
    })?;
    if let Some(seed) = common.seed {
        cfg.reseed(seed);
    }
    if let Some(n) = common.max_iters {
        cfg.outer.max_iters = n;
    }
    let built = cfg.build(common.config.parent())?;
    Ok((cfg, built))
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

fn ensure_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn cmd_run(common: &Common, out: &Path) -> Result<(), Failure> {
    let (cfg, built) = load(common)?;
    let problem = built.as_dyn();
    let outcome = run(
        problem,
        &cfg.inner,
        &cfg.outer,
        &cfg.schedule,
        &cfg.cuts,
        &RunOptions {
            init: built.initial_state(),
            record_cuts: false,
        },
    )?;
    ensure_dir(out)?;
    outcome.log.write_jsonl(create(&out.join("run.jsonl"))?)?;
    outcome.log.write_csv(create(&out.join("run.csv"))?)?;
    write(&out.join("checkpoint.json"), &to_json(&outcome.checkpoint()))?;

    let mut summary = serde_json::to_value(&outcome.log.footer).expect("footer serializes");
    if let (BuiltProblem::RobustHpo { problem, data, .. }, ProblemConfig::RobustHpo(h)) = (&built, &cfg.problem) {
        let w = problem.lower_level_weights(&outcome.state, &h.fit)?;
        let scores = evaluate_model(problem.mlp(), &w, data, h.split_seed)?;
        summary["model"] = json!(scores);
    }
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    if outcome.log.footer.status == RunStatus::Aborted {
        return Err(Failure::Numeric(
            outcome
                .log
                .footer
                .abort_reason
                .clone()
                .unwrap_or_else(|| "run aborted".into()),
        ));
    }
    Ok(())
}

fn cmd_bench(common: &Common, threshold: f64, out: &Path) -> Result<(), Failure> {
    let (cfg, built) = load(common)?;
    if built.initial_state().is_some() {
        return Err(Failure::Config("bench runs the quadratic problem only".into()));
    }
    let (summary, sync_log, async_log) = paired_bench(
        built.as_dyn(),
        &cfg.inner,
        &cfg.outer,
        &cfg.schedule,
        &cfg.cuts,
        threshold,
    )?;
    ensure_dir(out)?;
    sync_log.write_jsonl(create(&out.join("sync.jsonl"))?)?;
    async_log.write_jsonl(create(&out.join("async.jsonl"))?)?;
    let text = to_json(&summary);
    write(&out.join("bench.json"), &text)?;
    println!("{text}");
    Ok(())
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn cmd_gap(common: &Common, checkpoint: &Path) -> Result<(), Failure> {
    let (cfg, built) = load(common)?;
    let ck = read_checkpoint(checkpoint)?;
    let problem = built.as_dyn();
    ck.state.check_dims(problem.dims())?;
    let g = stationarity_gap(&ck.state, &ck.duals, &ck.poly_ii, problem, &cfg.outer)?;
    let sq = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let x: f64 = g.x.iter().flatten().map(|v| sq(v)).sum();
    let z: f64 = g.z.iter().map(|v| sq(v)).sum();
    let theta: f64 = g.theta.iter().map(|v| sq(v)).sum();
    println!(
        "{}",
        json!({
            "iterations": ck.iterations,
            "gap_sq": g.norm_sq(),
            "x": x,
            "z": z,
            "lambda": sq(&g.lambda),
            "theta": theta,
        })
    );
    Ok(())
}

fn cmd_dump(checkpoint: &Path, layer: LayerArg) -> Result<(), Failure> {
    let ck = read_checkpoint(checkpoint)?;
    let i = PolytopeSnapshot::from(&ck.poly_i);
    let ii = PolytopeSnapshot::from(&ck.poly_ii);
    let text = match layer {
        LayerArg::I => to_json(&i),
        LayerArg::Ii => to_json(&ii),
        LayerArg::Both => to_json(&[i, ii]),
    };
    println!("{text}");
    Ok(())
}

fn cmd_validate(common: &Common, s: &SamplingArgs) -> Result<(), Failure> {
    let (cfg, built) = load(common)?;
    let problem = built.as_dyn();
    let outcome = run(
        problem,
        &cfg.inner,
        &cfg.outer,
        &cfg.schedule,
        &cfg.cuts,
        &RunOptions {
            init: built.initial_state(),
            record_cuts: true,
        },
    )?;
    let sampling = SamplingConfig {
        samples: s.samples,
        max_draws: s.max_draws,
        radius: s.radius,
        seed: cfg.schedule.seed,
    };
    let (mut checked, mut violations, mut inconclusive) = (0, 0, 0);
    for rec in &outcome.refinements {
        let chk = check_refinement(problem, rec, [cfg.inner.eps1, cfg.inner.eps2], &sampling);
        for r in [&chk.layer_i, &chk.layer_ii] {
            checked += r.checked;
            violations += r.violations;
            inconclusive += usize::from(r.inconclusive);
        }
        println!("{}", serde_json::to_string(&chk).expect("report serializes"));
    }
    println!(
        "{}",
        json!({
            "refinements": outcome.refinements.len(),
            "checked": checked,
            "violations": violations,
            "inconclusive": inconclusive,
        })
    );
    if violations > 0 {
        return Err(Failure::Check(format!("{violations} cut violations")));
    }
    Ok(())
}

fn cmd_mu(common: &Common, points: usize, radius: f64) -> Result<(), Failure> {
    let (cfg, built) = load(common)?;
    let problem = built.as_dyn();
    let state = built
        .initial_state()
        .unwrap_or_else(|| PrimalState::zeros(problem.dims()));
    let mut duals = DualState::zeros(problem.dims(), 0);
    let mut cuts = CutState::new();
    let (_, rec) = refine(problem, &state, &mut duals, &mut cuts, &cfg.inner, &cfg.cuts, 0)?;
    let seed = cfg.schedule.seed;
    let mu_i = estimate_h_mu(problem, &rec.trace_i, &rec.anchor_i, points, radius, seed)?;
    let mu_ii = estimate_h_mu(problem, &rec.trace_ii, &rec.anchor_ii, points, radius, seed)?;
    println!(
        "{}",
        json!({ "mu_i": mu_i, "mu_ii": mu_ii, "configured": problem.weak_convexity_mu() })
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Run { common, out } => cmd_run(common, out),
        Cmd::Bench { common, threshold, out } => cmd_bench(common, *threshold, out),
        Cmd::Gap { common, checkpoint } => cmd_gap(common, checkpoint),
        Cmd::DumpPolytope { checkpoint, layer } => cmd_dump(checkpoint, *layer),
        Cmd::ValidateCuts { common, sampling } => cmd_validate(common, sampling),
        Cmd::EstimateMu { common, points, radius } => cmd_mu(common, *points, *radius),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, kind, msg) = match f {
                Failure::Config(m) => (2, "config error", m),
                Failure::Numeric(m) => (3, "numeric abort", m),
                Failure::Check(m) => (1, "check failed", m),
                Failure::Other(m) => (1, "error", m),
            };
            eprintln!("afto: {kind}: {msg}");
            ExitCode::from(code)
        }
    }
}
