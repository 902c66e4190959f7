//! Command-line runner: train, sample, eval, sweep and oracle-check.
//!
//! Exit codes: 0 ok, 2 config error, 3 numeric divergence, 4 corrupt
//! checkpoint, 5 failed check, 1 anything else.

pub mod checkpoint;
pub mod config;
pub mod export;

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::data::Rng;
use crate::error::{Error, Result};
use crate::oracle::suite::{format_table, run_suite, CheckResult, Suite, REFERENCE_N};
use crate::trainer::{
    bin_width, energy_profile, energy_to_target, evaluate, run_training, sample_model, train_loop, BatchSource,
    EnergyPoint, EvalMetrics, MetricsRecord, Mode, TrainConfig, STREAM_EVAL,
};

pub use checkpoint::Checkpoint;
pub use config::{ExperimentConfig, OutputConfig, SweepConfig};

/// Stream for `sample` and the post-training export.
pub const STREAM_SAMPLE: u64 = 4;
/// Step counts reported by `eval`, besides the configured many-step count.
pub const EVAL_NFES: [usize; 4] = [1, 2, 5, 10];
pub const EVAL_REPLICATES: usize = 5;
pub const WORKERS_ENV: &str = "SVFM_NUM_WORKERS";

pub const CHECKPOINT_FILE: &str = "checkpoint.svfm";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const TRAJECTORIES_FILE: &str = "trajectories.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const GRID_FILE: &str = "sweep.csv";

#[derive(Debug, Parser)]
#[command(name = "svfm", version, about = "Straight variational flow matching on 2D transport problems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model; writes config.toml, metrics.jsonl, checkpoint.svfm
    /// and samples.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (default: output.dir from the config).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        export_trajectories: bool,
    },
    /// Draw samples from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        export_trajectories: bool,
    },
    /// Metrics of a checkpoint, plus energy distance at several step counts.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Many-step reference count (default: eval.nfe_hi of the run).
        #[arg(long)]
        nfe: Option<usize>,
        /// Points per energy-distance estimate.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train one svfm model per (alpha, beta) cell and write the NFE=1 grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Monte-Carlo checks of the analytic-field theorems.
    OracleCheck {
        /// marginal, cost, material, v-functional or all.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = REFERENCE_N)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1.0)]
        tolerance_scale: f64,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Divergence { .. } => 3,
        Error::CorruptCheckpoint(_) => 4,
        Error::CheckFailed(_) => 5,
        _ => 1,
    }
}

/// Runs one command; the report goes to stdout.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            config,
            out,
            seed,
            checkpoint,
            export_trajectories,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.output.export_trajectories |= export_trajectories;
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let summary = cmd_train(&cfg, &dir, checkpoint.as_deref())?;
            println!("{}", serde_json::to_string(&summary).map_err(std::io::Error::other)?);
        }
        Command::Sample {
            checkpoint,
            nfe,
            n,
            seed,
            out,
            export_trajectories,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            cmd_sample(&ck, nfe, n, seed, &out, export_trajectories.then_some(n))?;
            println!("wrote {n} samples to {}", out.join(SAMPLES_FILE).display());
        }
        Command::Eval {
            checkpoint,
            nfe,
            n,
            seed,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let report = cmd_eval(&ck, nfe, n, seed, &out)?;
            println!("{}", serde_json::to_string(&report).map_err(std::io::Error::other)?);
        }
        Command::Sweep { config, out, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
            let cells = cmd_sweep(&cfg, &dir, workers_from_env()?)?;
            print!("{}", export::grid_csv(&cells.iter().map(|c| (c.alpha, c.beta, c.metric)).collect::<Vec<_>>()));
            if let Some(e) = cells.into_iter().find_map(|c| c.error) {
                return Err(e);
            }
        }
        Command::OracleCheck {
            suite,
            n,
            seed,
            tolerance_scale,
        } => {
            let suite: Suite = suite.parse()?;
            let results = cmd_oracle_check(suite, n, seed, tolerance_scale)?;
            print!("{}", format_table(&results));
            if let Some(e) = check_failures(&results) {
                return Err(e);
            }
        }
    }
    Ok(())
}

fn prepare_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", dir.display())))
}

/// Final state of a `train` run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub step: u64,
    pub mode: &'static str,
    pub checkpoint: PathBuf,
    pub records: usize,
    pub last: Option<EvalMetrics>,
}

/// Trains (or resumes) and writes config snapshot, metrics, checkpoint and
/// samples into `dir`. Metrics reach disk record by record, so a diverging
/// run keeps its partial history.
pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    cfg.validate()?;
    prepare_dir(dir)?;
    let tc = cfg.train_config();
    std::fs::write(dir.join(CONFIG_FILE), cfg.to_toml())?;

    let metrics_path = dir.join(METRICS_FILE);
    let (state, history) = match resume {
        None => {
            let mut log = export::JsonlWriter::create(&metrics_path)?;
            let out = run_training(&tc, &mut |r| log.write(r))?;
            (out.state, out.history)
        }
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            check_resumable(&ck.config, &tc)?;
            let mut log = export::JsonlWriter::append(&metrics_path)?;
            let mut state = ck.state;
            let source = BatchSource::Independent(tc.dataset.clone());
            let history = train_loop(&mut state, &tc, &source, "train", &mut |r: &MetricsRecord| log.write(r))?;
            (state, history)
        }
    };

    let ck_path = dir.join(CHECKPOINT_FILE);
    let ck = Checkpoint::new(&tc, &state);
    ck.save(&ck_path)?;
    if cfg.output.sample_n > 0 {
        let keep = cfg.output.export_trajectories.then_some(cfg.output.export_n);
        cmd_sample(&ck, cfg.output.sample_nfe, cfg.output.sample_n, tc.train.seed, dir, keep)?;
    }
    Ok(TrainSummary {
        step: state.step,
        mode: tc.train.mode.name(),
        checkpoint: ck_path,
        records: history.len(),
        last: history.last().map(|r| r.eval.clone()),
    })
}

/// A resumed run must describe the same model and data as its checkpoint.
fn check_resumable(saved: &TrainConfig, now: &TrainConfig) -> Result<()> {
    if now.train.mode == Mode::Reflow {
        return Err(Error::Config("reflow runs cannot be resumed".into()));
    }
    if saved.net != now.net || saved.dataset != now.dataset || saved.train.mode != now.train.mode {
        return Err(Error::Config(
            "checkpoint mode, dataset or network differs from the config".into(),
        ));
    }
    Ok(())
}

/// Writes `samples.csv`, and `trajectories.csv` with the first `keep`
/// trajectories when asked.
pub fn cmd_sample(ck: &Checkpoint, nfe: usize, n: usize, seed: u64, dir: &Path, keep: Option<usize>) -> Result<()> {
    if nfe == 0 || n == 0 {
        return Err(Error::Config("--nfe and --n must be ≥ 1".into()));
    }
    prepare_dir(dir)?;
    let mut rng = Rng::new(seed, STREAM_SAMPLE);
    let traj = sample_model(ck.model(), &ck.config.dataset, n, nfe, &mut rng)?;
    std::fs::write(dir.join(SAMPLES_FILE), export::samples_csv(traj.endpoint()))?;
    if let Some(keep) = keep {
        std::fs::write(dir.join(TRAJECTORIES_FILE), export::trajectories_csv(&traj, keep))?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub step: u64,
    pub mode: &'static str,
    #[serde(flatten)]
    pub metrics: EvalMetrics,
    pub energy: Vec<EnergyPoint>,
}

/// Full metrics plus energy distance at 1, 2, 5, 10 and the many-step
/// count. Writes `eval.json`.
pub fn cmd_eval(ck: &Checkpoint, nfe: Option<usize>, n: Option<usize>, seed: Option<u64>, dir: &Path) -> Result<EvalReport> {
    let mut cfg = ck.config.clone();
    if let Some(k) = nfe {
        cfg.eval.nfe_hi = k;
    }
    if let Some(n) = n {
        cfg.eval.energy_n = n;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    prepare_dir(dir)?;
    let model = ck.model();
    let metrics = evaluate(model, &cfg, bin_width(&cfg))?;
    let mut nfes = EVAL_NFES.to_vec();
    if !nfes.contains(&cfg.eval.nfe_hi) {
        nfes.push(cfg.eval.nfe_hi);
    }
    let mut rng = Rng::new(cfg.train.seed, STREAM_SAMPLE);
    let energy = energy_profile(model, &cfg.dataset, &nfes, cfg.eval.energy_n, EVAL_REPLICATES, &mut rng)?;
    let report = EvalReport {
        step: ck.state.step,
        mode: cfg.train.mode.name(),
        metrics,
        energy,
    };
    let mut json = serde_json::to_string_pretty(&report).map_err(std::io::Error::other)?;
    json.push('\n');
    std::fs::write(dir.join(EVAL_FILE), json)?;
    Ok(report)
}

/// Worker count for sweeps; unset means 1.
pub fn workers_from_env() -> Result<usize> {
    match std::env::var(WORKERS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

/// One sweep cell; a failed cell has a NaN metric and keeps its error.
#[derive(Debug)]
pub struct SweepCell {
    pub alpha: f64,
    pub beta: f64,
    pub metric: f64,
    pub error: Option<Error>,
}

fn run_cell(cfg: &ExperimentConfig, alpha: f64, beta: f64, dir: &Path) -> Result<f64> {
    let mut cell = cfg.clone();
    cell.train.mode = Mode::Svfm;
    cell.train.alpha = alpha;
    cell.train.beta = beta;
    cmd_train(&cell, dir, None)?;
    let ck = Checkpoint::load(&dir.join(CHECKPOINT_FILE))?;
    let mut rng = Rng::new(cell.train.seed, STREAM_EVAL);
    energy_to_target(ck.model(), &cell.dataset, cell.eval.energy_n, 1, &mut rng)
}

/// Trains every cell on `workers` threads; each cell owns
/// `dir/cell_<i>_<j>`. Writes `sweep.csv` row-major by (alpha, beta) index,
/// with NaN for failed cells, and returns the cells in that order.
pub fn cmd_sweep(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    cfg.validate_sweep()?;
    prepare_dir(dir)?;
    let grid: Vec<(usize, usize)> = (0..cfg.sweep.alpha.len())
        .flat_map(|i| (0..cfg.sweep.beta.len()).map(move |j| (i, j)))
        .collect();
    let results: Mutex<Vec<Option<SweepCell>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, grid.len()) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(i, j)) = grid.get(k) else { break };
                let (alpha, beta) = (cfg.sweep.alpha[i], cfg.sweep.beta[j]);
                let cell = match run_cell(cfg, alpha, beta, &dir.join(format!("cell_{i}_{j}"))) {
                    Ok(metric) => SweepCell {
                        alpha,
                        beta,
                        metric,
                        error: None,
                    },
                    Err(e) => {
                        eprintln!("sweep cell alpha={alpha} beta={beta} failed: {e}");
                        SweepCell {
                            alpha,
                            beta,
                            metric: f64::NAN,
                            error: Some(e),
                        }
                    }
                };
                results.lock().expect("no poisoned cells")[k] = Some(cell);
            });
        }
    });
    let cells: Vec<SweepCell> = results
        .into_inner()
        .expect("no poisoned cells")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect();
    let rows: Vec<_> = cells.iter().map(|c| (c.alpha, c.beta, c.metric)).collect();
    std::fs::write(dir.join(GRID_FILE), export::grid_csv(&rows))?;
    Ok(cells)
}

/// Runs a suite at sample size `n` with tolerances widened by
/// `tolerance_scale`.
pub fn cmd_oracle_check(suite: Suite, n: usize, seed: u64, tolerance_scale: f64) -> Result<Vec<CheckResult>> {
    if !(tolerance_scale.is_finite() && tolerance_scale > 0.0) {
        return Err(Error::Config("--tolerance-scale must be positive".into()));
    }
    if n < 2 {
        return Err(Error::Config("--n must be ≥ 2".into()));
    }
    run_suite(suite, n, seed, tolerance_scale)
}

/// The failing statistics, if any check failed.
pub fn check_failures(results: &[CheckResult]) -> Option<Error> {
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| format!("{}/{}: {} exceeds {}", r.suite, r.name, r.statistic, r.threshold))
        .collect();
    (!failed.is_empty()).then(|| Error::CheckFailed(failed.join("; ")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(
            exit_code(&Error::Divergence {
                step: 1,
                reason: "x".into()
            }),
            3
        );
        assert_eq!(exit_code(&Error::CorruptCheckpoint("x".into())), 4);
        assert_eq!(exit_code(&Error::CheckFailed("x".into())), 5);
        assert_eq!(exit_code(&Error::NonFinite { op: "x" }), 1);
    }

    #[test]
    fn parses_flags() {
        let cli = Cli::try_parse_from(["svfm", "sample", "--checkpoint", "a.svfm", "--nfe", "3", "--n", "4", "--export-trajectories"]).unwrap();
        assert!(matches!(cli.command, Command::Sample { nfe: 3, n: 4, export_trajectories: true, .. }));
        let cli = Cli::try_parse_from(["svfm", "oracle-check", "cost", "--n", "100", "--tolerance-scale", "3"]).unwrap();
        assert!(matches!(cli.command, Command::OracleCheck { ref suite, n: 100, .. } if suite == "cost"));
        assert!(Cli::try_parse_from(["svfm", "train"]).is_err());
    }
}
