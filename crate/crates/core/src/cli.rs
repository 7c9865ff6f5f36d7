//! Command-line front end: `train`, `evaluate` and `sweep`.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::confidence::write_score_groups_csv;
use crate::config::{resolve_data_path, RunConfig};
use crate::detector::write_detections_csv;
use crate::error::{Error, Result};
use crate::evaluation::{
    beta_sweep, distance_comparison, evaluate_model, fit_model, latent_dim_sweep,
    timing_comparison, training_rows, write_latent_csv, write_sweep_csv, Evaluation, SweepCache,
    SweepReport,
};
use crate::ingest::{fit_preprocessor, load_records, PreprocessorState};
use crate::report::{create_file, fmt_f64, write_json};
use crate::vae::{TrainReport, Vae};

#[derive(Debug, Parser)]
#[command(
    name = "ids-confidence",
    version,
    about = "VAE intrusion detection with latent-space confidence scores"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// JSON run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed (overrides the configuration).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (overrides the configuration).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for scoring and reconstruction.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    /// Training file (overrides the configuration).
    #[arg(long, global = true)]
    pub train_file: Option<PathBuf>,
    /// Test file (overrides the configuration).
    #[arg(long, global = true)]
    pub test_file: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the preprocessor and the autoencoder on the training file.
    Train,
    /// Detect and score the test file.
    Evaluate {
        /// Directory holding model.json and preprocessor.json from `train`;
        /// a fresh model is trained when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Latent-dimension, β and distance-metric sweeps.
    Sweep {
        /// Reuse finished configurations from an earlier run in the same directory.
        #[arg(long)]
        resume: bool,
    },
}

#[derive(Serialize)]
struct ErrorRecord<'a> {
    error: ErrorBody<'a>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    kind: &'a str,
    message: String,
}

/// JSON error record written to stderr on failure.
pub fn error_record(err: &Error) -> String {
    serde_json::to_string(&ErrorRecord {
        error: ErrorBody {
            kind: err.kind(),
            message: err.to_string(),
        },
    })
    .expect("error record serializes")
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli.common)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        let out = cfg.paths.output_dir.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        write_json(&out.join("run_config.json"), &cfg)?;
        match cli.command {
            Command::Train => cmd_train(&cfg, &out).map(|_| ()),
            Command::Evaluate { checkpoint } => cmd_evaluate(&cfg, &out, checkpoint.as_deref()),
            Command::Sweep { resume } => cmd_sweep(&cfg, &out, resume),
        }
    })
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.vae.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.paths.output_dir = out.clone();
    }
    if let Some(p) = &common.train_file {
        cfg.paths.train_file = p.clone();
    }
    if let Some(p) = &common.test_file {
        cfg.paths.test_file = p.clone();
    }
    if common.threads == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// CSV columns: epoch, total, re, kl, lr. Wall time lives in train_report.json
/// so this file is reproducible byte for byte.
pub fn write_loss_csv<W: Write>(out: W, report: &TrainReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "total", "re", "kl", "lr"])
        .map_err(crate::report::csv_error)?;
    for e in &report.epochs {
        w.write_record([
            e.epoch.to_string(),
            fmt_f64(e.total),
            fmt_f64(e.re),
            fmt_f64(e.kl),
            fmt_f64(e.lr),
        ])
        .map_err(crate::report::csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

struct Trained {
    preprocessor: PreprocessorState,
    vae: Vae,
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Trained> {
    let records = load_records(&resolve_data_path(&cfg.paths.train_file)?)?;
    let preprocessor = fit_preprocessor(&records)?;
    let train_set = preprocessor.transform(&records);
    let (vae, report) = fit_model(&train_set, &cfg.vae)?;
    preprocessor.save(&out.join("preprocessor.json"))?;
    vae.save(&out.join("model.json"))?;
    write_loss_csv(create_file(&out.join("train_loss.csv"))?, &report)?;
    write_json(&out.join("train_report.json"), &report)?;
    Ok(Trained { preprocessor, vae })
}

#[derive(Serialize)]
struct EvaluateReport<'a> {
    n_train: usize,
    n_test: usize,
    latent_dim: usize,
    beta: f64,
    seed: u64,
    #[serde(flatten)]
    evaluation: &'a Evaluation,
}

fn cmd_evaluate(cfg: &RunConfig, out: &Path, checkpoint: Option<&Path>) -> Result<()> {
    let Trained { preprocessor, vae } = match checkpoint {
        Some(dir) => {
            let preprocessor = PreprocessorState::load(&dir.join("preprocessor.json"))?;
            let vae = Vae::load_for(&dir.join("model.json"), &preprocessor)?;
            Trained { preprocessor, vae }
        }
        None => cmd_train(cfg, out)?,
    };
    let train_set =
        preprocessor.transform(&load_records(&resolve_data_path(&cfg.paths.train_file)?)?);
    let test_set =
        preprocessor.transform(&load_records(&resolve_data_path(&cfg.paths.test_file)?)?);
    let evaluation = evaluate_model(&vae, &train_set, &test_set, cfg)?;

    write_detections_csv(
        create_file(&out.join("detections.csv"))?,
        &evaluation.detections,
    )?;
    write_score_groups_csv(
        create_file(&out.join("confidence.csv"))?,
        evaluation.results.iter().map(|r| r.scores.as_slice()),
    )?;
    write_latent_csv(create_file(&out.join("latent.csv"))?, &evaluation.z_test)?;
    write_json(
        &out.join("report.json"),
        &EvaluateReport {
            n_train: train_set.len(),
            n_test: test_set.len(),
            latent_dim: vae.latent_dim(),
            beta: vae.config().beta,
            seed: vae.config().seed,
            evaluation: &evaluation,
        },
    )
}

fn cmd_sweep(cfg: &RunConfig, out: &Path, resume: bool) -> Result<()> {
    if cfg.sweep.is_empty() {
        return Err(Error::Config(
            "sweep: set at least one of sweep.latent_dims, sweep.betas, sweep.metrics, sweep.timing".into(),
        ));
    }
    let data = crate::evaluation::load_data(cfg)?;
    let cache = SweepCache::new(&out.join("sweep_cache"), resume)?;
    let grids = &cfg.sweep;

    let latent_dim = if grids.latent_dims.is_empty() {
        Vec::new()
    } else {
        let rows = latent_dim_sweep(&data, cfg, &grids.latent_dims, &cache)?;
        write_sweep_csv(create_file(&out.join("sweep_latent_dim.csv"))?, &rows)?;
        rows
    };
    let beta = if grids.betas.is_empty() {
        Vec::new()
    } else {
        let rows = beta_sweep(&data, cfg, &grids.betas, &cache)?;
        write_sweep_csv(create_file(&out.join("sweep_beta.csv"))?, &rows)?;
        rows
    };
    let distance = if grids.metrics.is_empty() {
        Vec::new()
    } else {
        let rows = distance_comparison(&data, cfg, &grids.metrics, &cache)?;
        write_sweep_csv(create_file(&out.join("sweep_distance.csv"))?, &rows)?;
        rows
    };
    let timing = if grids.timing {
        let (vae, _) = fit_model(&data.train, &cfg.vae)?;
        let rows = training_rows(&data.train, &cfg.vae);
        Some(timing_comparison(
            &vae,
            &rows,
            &data.test.x,
            cfg.confidence.epsilon_scale,
        )?)
    } else {
        None
    };
    write_json(
        &out.join("sweep_report.json"),
        &SweepReport {
            config: cfg.clone(),
            latent_dim,
            beta,
            distance,
            timing,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn global_flags_after_subcommand() {
        let cli = Cli::try_parse_from([
            "ids-confidence",
            "sweep",
            "--resume",
            "--seed",
            "7",
            "--threads",
            "2",
        ])
        .unwrap();
        assert_eq!(cli.common.seed, Some(7));
        assert_eq!(cli.common.threads, 2);
        assert!(matches!(cli.command, Command::Sweep { resume: true }));
    }

    #[test]
    fn error_record_is_json() {
        let rec = error_record(&Error::Config("bad".into()));
        let v: serde_json::Value = serde_json::from_str(&rec).unwrap();
        assert_eq!(v["error"]["kind"], "config");
        assert!(v["error"]["message"].as_str().unwrap().contains("bad"));
    }
}
