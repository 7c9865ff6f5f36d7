//! Correlating confidence scores with prediction error, the end-to-end
//! experiment pipeline, and parameter sweeps.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::confidence::{
    euclidean_batch, uniform_owa_weights, validate_owa_weights, ConfidenceScore, CosineIndex,
    LatentIndex, MetricKind,
};
use crate::config::{resolve_data_path, CorrelationMethod, NormalizationScope, RunConfig};
use crate::detector::{
    confusion_and_metrics, detect, fit_threshold, reconstruction_errors, Cell, Detection,
    ErrorNormalizer, Metrics, ThresholdModel,
};
use crate::error::{Error, Result};
use crate::ingest::{fit_preprocessor, load_records, EncodedDataset, PreprocessorState, RawRecord};
use crate::numcore::{pearson_corr, spearman_corr, Matrix};
use crate::report::{csv_error, fmt_f64, fmt_opt};
use crate::vae::{train, TrainReport, Vae, VaeConfig};

/// `ê = |y − re_norm|`.
pub fn prediction_error(y_true: u8, re_norm: f64) -> f64 {
    (f64::from(y_true) - re_norm).abs()
}

pub fn prediction_errors(y_true: &[u8], re_norm: &[f64]) -> Result<Vec<f64>> {
    if y_true.len() != re_norm.len() {
        return Err(Error::Dimension {
            context: "prediction_errors",
            expected: y_true.len(),
            actual: re_norm.len(),
        });
    }
    Ok(y_true
        .iter()
        .zip(re_norm)
        .map(|(&y, &r)| prediction_error(y, r))
        .collect())
}

/// One test sample's confidence, error and confusion cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_index: usize,
    pub confidence: f64,
    pub pred_error: f64,
    pub cell: Cell,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CellCorrelation {
    pub count: usize,
    /// `None` when the subset has fewer than two samples or zero variance.
    pub r: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub latent_dim: Option<usize>,
    pub beta: Option<f64>,
    pub metric_kind: Option<MetricKind>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub method: CorrelationMethod,
    pub n: usize,
    pub general_r: Option<f64>,
    pub tp: CellCorrelation,
    pub fp: CellCorrelation,
    pub tn: CellCorrelation,
    #[serde(rename = "fn")]
    pub fn_: CellCorrelation,
    pub metadata: ReportMetadata,
}

impl CorrelationReport {
    pub fn cell(&self, cell: Cell) -> &CellCorrelation {
        match cell {
            Cell::Tp => &self.tp,
            Cell::Fp => &self.fp,
            Cell::Tn => &self.tn,
            Cell::Fn => &self.fn_,
        }
    }
}

fn correlate(a: &[f64], b: &[f64], method: CorrelationMethod) -> Result<Option<f64>> {
    let r = match method {
        CorrelationMethod::Pearson => pearson_corr(a, b),
        CorrelationMethod::Spearman => spearman_corr(a, b),
    };
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedCorrelation(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// General and per-cell correlation between confidence and prediction error.
pub fn correlation_report(
    confidence: &[f64],
    errors: &[f64],
    cells: &[Cell],
    method: CorrelationMethod,
) -> Result<CorrelationReport> {
    let n = confidence.len();
    for (context, len) in [
        ("correlation errors", errors.len()),
        ("correlation cells", cells.len()),
    ] {
        if len != n {
            return Err(Error::Dimension {
                context,
                expected: n,
                actual: len,
            });
        }
    }
    let subset = |cell: Cell| -> Result<CellCorrelation> {
        let (c, e): (Vec<f64>, Vec<f64>) = cells
            .iter()
            .zip(confidence.iter().zip(errors))
            .filter(|(k, _)| **k == cell)
            .map(|(_, (&c, &e))| (c, e))
            .unzip();
        Ok(CellCorrelation {
            count: c.len(),
            r: correlate(&c, &e, method)?,
        })
    };
    Ok(CorrelationReport {
        method,
        n,
        general_r: correlate(confidence, errors, method)?,
        tp: subset(Cell::Tp)?,
        fp: subset(Cell::Fp)?,
        tn: subset(Cell::Tn)?,
        fn_: subset(Cell::Fn)?,
        metadata: ReportMetadata::default(),
    })
}

pub fn eval_records(scores: &[ConfidenceScore], errors: &[f64], cells: &[Cell]) -> Vec<EvalRecord> {
    scores
        .iter()
        .zip(errors)
        .zip(cells)
        .enumerate()
        .map(|(i, ((s, &e), &cell))| EvalRecord {
            sample_index: i,
            confidence: s.value,
            pred_error: e,
            cell,
        })
        .collect()
}

/// Encoded train and test sets plus the fitted preprocessor.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub preprocessor: PreprocessorState,
    pub train: EncodedDataset,
    pub test: EncodedDataset,
}

/// Fits the preprocessor on the training records and encodes both sets.
pub fn prepare(train_records: &[RawRecord], test_records: &[RawRecord]) -> Result<PreparedData> {
    let preprocessor = fit_preprocessor(train_records)?;
    Ok(PreparedData {
        train: preprocessor.transform(train_records),
        test: preprocessor.transform(test_records),
        preprocessor,
    })
}

/// Loads the configured train and test files.
pub fn load_data(cfg: &RunConfig) -> Result<PreparedData> {
    let train_records = load_records(&resolve_data_path(&cfg.paths.train_file)?)?;
    let test_records = load_records(&resolve_data_path(&cfg.paths.test_file)?)?;
    prepare(&train_records, &test_records)
}

/// Rows the autoencoder is fitted on.
pub fn training_rows(train: &EncodedDataset, vae: &VaeConfig) -> Matrix {
    if vae.normals_only {
        train.normals_only().x
    } else {
        train.x.clone()
    }
}

pub fn fit_model(train_set: &EncodedDataset, vae: &VaeConfig) -> Result<(Vae, TrainReport)> {
    let rows = training_rows(train_set, vae);
    if rows.rows() == 0 {
        return Err(Error::Empty("no training rows left after filtering"));
    }
    train(&rows, vae)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricResult {
    pub kind: MetricKind,
    #[serde(skip)]
    pub scores: Vec<ConfidenceScore>,
    pub report: CorrelationReport,
    pub seconds: f64,
}

/// Everything computed on the test set by [`evaluate_model`].
#[derive(Debug, Clone, Serialize)]
pub struct Evaluation {
    pub threshold: ThresholdModel,
    pub train_normalizer: ErrorNormalizer,
    pub test_normalizer: ErrorNormalizer,
    pub test_metrics: Metrics,
    #[serde(skip)]
    pub detections: Vec<Detection>,
    #[serde(skip)]
    pub pred_errors: Vec<f64>,
    #[serde(skip)]
    pub z_test: Matrix,
    pub results: Vec<MetricResult>,
}

impl Evaluation {
    pub fn cells(&self) -> Vec<Cell> {
        self.detections.iter().filter_map(|d| d.cell).collect()
    }

    pub fn result(&self, kind: MetricKind) -> Option<&MetricResult> {
        self.results.iter().find(|r| r.kind == kind)
    }
}

/// Threshold fitting on the training set, detection, confidence scoring and
/// correlation on the test set.
pub fn evaluate_model(
    vae: &Vae,
    train_set: &EncodedDataset,
    test_set: &EncodedDataset,
    cfg: &RunConfig,
) -> Result<Evaluation> {
    if test_set.is_empty() {
        return Err(Error::Empty("test set has no records"));
    }
    let re_train = reconstruction_errors(vae, &train_set.x)?;
    let train_normalizer = ErrorNormalizer::fit(&re_train)?;
    let threshold = match cfg.detector.threshold_override {
        Some(t) => {
            let re_norm = train_normalizer.apply_all(&re_train);
            let y_hat: Vec<u8> = re_norm.iter().map(|&v| u8::from(v > t)).collect();
            ThresholdModel {
                threshold: t,
                fit_metrics: confusion_and_metrics(&train_set.y, &y_hat)?,
            }
        }
        None => fit_threshold(&train_normalizer.apply_all(&re_train), &train_set.y)?,
    };

    let re_test = reconstruction_errors(vae, &test_set.x)?;
    let test_normalizer = match cfg.detector.normalization {
        NormalizationScope::Training => train_normalizer,
        NormalizationScope::PerSet => ErrorNormalizer::fit(&re_test)?,
    };
    let detections = detect(
        &re_test,
        &test_normalizer,
        threshold.threshold,
        Some(&test_set.y),
    )?;
    let y_hat: Vec<u8> = detections.iter().map(|d| d.y_hat).collect();
    let test_metrics = confusion_and_metrics(&test_set.y, &y_hat)?;
    let re_norm: Vec<f64> = detections.iter().map(|d| d.re_norm).collect();
    let pred_errors = prediction_errors(&test_set.y, &re_norm)?;
    let cells: Vec<Cell> = detections.iter().filter_map(|d| d.cell).collect();

    let index_rows = training_rows(train_set, vae.config());
    let z_train = vae.latent_embed(&index_rows)?;
    let z_test = vae.latent_embed(&test_set.x)?;
    let inputs = ScoringInputs {
        z_train: &z_train,
        z_test: &z_test,
        x_train: &index_rows,
        x_test: &test_set.x,
    };

    let mut results = Vec::with_capacity(cfg.confidence.metrics.len());
    for &kind in &cfg.confidence.metrics {
        let started = Instant::now();
        let scores = score_metric(kind, &inputs, cfg)?;
        let seconds = started.elapsed().as_secs_f64();
        let values: Vec<f64> = scores.iter().map(|s| s.value).collect();
        let mut report = correlation_report(&values, &pred_errors, &cells, cfg.correlation)?;
        report.metadata = ReportMetadata {
            latent_dim: Some(vae.latent_dim()),
            beta: Some(vae.config().beta),
            metric_kind: Some(kind),
            seed: Some(vae.config().seed),
        };
        results.push(MetricResult {
            kind,
            scores,
            report,
            seconds,
        });
    }

    Ok(Evaluation {
        threshold,
        train_normalizer,
        test_normalizer,
        test_metrics,
        detections,
        pred_errors,
        z_test,
        results,
    })
}

struct ScoringInputs<'a> {
    z_train: &'a Matrix,
    z_test: &'a Matrix,
    x_train: &'a Matrix,
    x_test: &'a Matrix,
}

fn score_metric(
    kind: MetricKind,
    inp: &ScoringInputs<'_>,
    cfg: &RunConfig,
) -> Result<Vec<ConfidenceScore>> {
    let conf = &cfg.confidence;
    match kind {
        MetricKind::Mahalanobis => LatentIndex::build(inp.z_train, conf.epsilon_scale, kind)?
            .score_batch(inp.z_test, conf.neighbor_ranking),
        MetricKind::FeatureMahalanobis => {
            LatentIndex::build(inp.x_train, conf.epsilon_scale, kind)?
                .score_batch(inp.x_test, conf.neighbor_ranking)
        }
        MetricKind::Euclidean => euclidean_batch(inp.z_train, inp.z_test),
        MetricKind::Cosine => CosineIndex::new(inp.z_train)?.score_batch(inp.z_test),
        MetricKind::Choquet => {
            let d = inp.z_train.cols();
            let weights = conf
                .owa_weights
                .clone()
                .unwrap_or_else(|| uniform_owa_weights(d));
            validate_owa_weights(&weights, d)?;
            LatentIndex::build(inp.z_train, conf.epsilon_scale, MetricKind::Mahalanobis)?
                .choquet_batch(inp.z_test, &weights)
        }
    }
}

/// Trained model plus its evaluation.
#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub vae: Vae,
    pub train_report: TrainReport,
    pub evaluation: Evaluation,
}

/// train → embed → threshold → confide → correlate.
pub fn run_pipeline(data: &PreparedData, cfg: &RunConfig) -> Result<PipelineRun> {
    let (vae, train_report) = fit_model(&data.train, &cfg.vae)?;
    let evaluation = evaluate_model(&vae, &data.train, &data.test, cfg)?;
    Ok(PipelineRun {
        vae,
        train_report,
        evaluation,
    })
}

/// One configuration of a sweep. Failed configurations keep their swept
/// parameters and carry the error message instead of results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub latent_dim: usize,
    pub beta: f64,
    pub metric: MetricKind,
    pub general_r: Option<f64>,
    pub r_fp: Option<f64>,
    pub r_fn: Option<f64>,
    pub r_tp: Option<f64>,
    pub r_tn: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    pub threshold: Option<f64>,
    pub wall_seconds: f64,
    pub error: Option<String>,
}

impl SweepRow {
    fn failed(cfg: &RunConfig, metric: MetricKind, err: &Error, wall_seconds: f64) -> Self {
        SweepRow {
            latent_dim: cfg.vae.latent_dim,
            beta: cfg.vae.beta,
            metric,
            general_r: None,
            r_fp: None,
            r_fn: None,
            r_tp: None,
            r_tn: None,
            precision: None,
            recall: None,
            f1: None,
            accuracy: None,
            threshold: None,
            wall_seconds,
            error: Some(format!("{}: {err}", err.kind())),
        }
    }

    fn from_result(
        cfg: &RunConfig,
        eval: &Evaluation,
        result: &MetricResult,
        wall_seconds: f64,
    ) -> Self {
        let m = &eval.test_metrics;
        let r = &result.report;
        SweepRow {
            latent_dim: cfg.vae.latent_dim,
            beta: cfg.vae.beta,
            metric: result.kind,
            general_r: r.general_r,
            r_fp: r.fp.r,
            r_fn: r.fn_.r,
            r_tp: r.tp.r,
            r_tn: r.tn.r,
            precision: Some(m.precision),
            recall: Some(m.recall),
            f1: Some(m.f1),
            accuracy: Some(m.accuracy),
            threshold: Some(eval.threshold.threshold),
            wall_seconds,
            error: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }
}

pub const SWEEP_CSV_HEADER: [&str; 16] = [
    "dim",
    "beta",
    "metric",
    "general_r",
    "r_fp",
    "r_fn",
    "r_tp",
    "r_tn",
    "precision",
    "recall",
    "f1",
    "accuracy",
    "threshold",
    "wall_seconds",
    "status",
    "error",
];

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SWEEP_CSV_HEADER).map_err(csv_error)?;
    for r in rows {
        w.write_record([
            r.latent_dim.to_string(),
            fmt_f64(r.beta),
            r.metric.to_string(),
            fmt_opt(r.general_r),
            fmt_opt(r.r_fp),
            fmt_opt(r.r_fn),
            fmt_opt(r.r_tp),
            fmt_opt(r.r_tn),
            fmt_opt(r.precision),
            fmt_opt(r.recall),
            fmt_opt(r.f1),
            fmt_opt(r.accuracy),
            fmt_opt(r.threshold),
            fmt_f64(r.wall_seconds),
            if r.is_ok() { "ok" } else { "error" }.to_string(),
            r.error.clone().unwrap_or_default(),
        ])
        .map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Per-configuration row cache so interrupted sweeps can resume.
#[derive(Debug, Clone, Default)]
pub struct SweepCache {
    dir: Option<PathBuf>,
    resume: bool,
}

impl SweepCache {
    pub fn disabled() -> Self {
        SweepCache::default()
    }

    /// Rows are written under `dir`; with `resume`, existing ones are reused.
    pub fn new(dir: &Path, resume: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(SweepCache {
            dir: Some(dir.to_path_buf()),
            resume,
        })
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn get(&self, key: &str) -> Option<Vec<SweepRow>> {
        if !self.resume {
            return None;
        }
        let text = std::fs::read_to_string(self.path(key)?).ok()?;
        let rows: Vec<SweepRow> = serde_json::from_str(&text).ok()?;
        // failed rows are retried
        rows.iter().all(SweepRow::is_ok).then_some(rows)
    }

    fn put(&self, key: &str, rows: &[SweepRow]) -> Result<()> {
        match self.path(key) {
            Some(path) => crate::report::write_json(&path, &rows),
            None => Ok(()),
        }
    }

    fn run(&self, key: &str, f: impl FnOnce() -> Vec<SweepRow>) -> Result<Vec<SweepRow>> {
        if let Some(rows) = self.get(key) {
            return Ok(rows);
        }
        let rows = f();
        self.put(key, &rows)?;
        Ok(rows)
    }
}

fn single_metric_row(data: &PreparedData, cfg: &RunConfig) -> SweepRow {
    let mut cfg = cfg.clone();
    cfg.confidence.metrics = vec![MetricKind::Mahalanobis];
    let started = Instant::now();
    match run_pipeline(data, &cfg) {
        Ok(run) => SweepRow::from_result(
            &cfg,
            &run.evaluation,
            &run.evaluation.results[0],
            started.elapsed().as_secs_f64(),
        ),
        Err(e) => SweepRow::failed(
            &cfg,
            MetricKind::Mahalanobis,
            &e,
            started.elapsed().as_secs_f64(),
        ),
    }
}

/// One Mahalanobis row per latent dimension, ascending. Every row uses the
/// same seed, so rows differ only in the swept parameter.
pub fn latent_dim_sweep(
    data: &PreparedData,
    cfg: &RunConfig,
    dims: &[usize],
    cache: &SweepCache,
) -> Result<Vec<SweepRow>> {
    if dims.is_empty() {
        return Err(Error::Config("latent_dim sweep grid is empty".into()));
    }
    let mut dims = dims.to_vec();
    dims.sort_unstable();
    dims.dedup();
    let mut rows = Vec::with_capacity(dims.len());
    for d in dims {
        let mut c = cfg.clone();
        c.vae.latent_dim = d;
        rows.extend(cache.run(&format!("latent_dim_{d}"), || {
            vec![single_metric_row(data, &c)]
        })?);
    }
    Ok(rows)
}

/// One Mahalanobis row per β, ascending.
pub fn beta_sweep(
    data: &PreparedData,
    cfg: &RunConfig,
    betas: &[f64],
    cache: &SweepCache,
) -> Result<Vec<SweepRow>> {
    if betas.is_empty() {
        return Err(Error::Config("beta sweep grid is empty".into()));
    }
    let mut betas = betas.to_vec();
    betas.sort_by(f64::total_cmp);
    betas.dedup();
    let mut rows = Vec::with_capacity(betas.len());
    for b in betas {
        let mut c = cfg.clone();
        c.vae.beta = b;
        rows.extend(cache.run(&format!("beta_{b:?}"), || vec![single_metric_row(data, &c)])?);
    }
    Ok(rows)
}

/// Trains one model and scores it with every requested metric.
pub fn distance_comparison(
    data: &PreparedData,
    cfg: &RunConfig,
    metrics: &[MetricKind],
    cache: &SweepCache,
) -> Result<Vec<SweepRow>> {
    if metrics.is_empty() {
        return Err(Error::Config(
            "distance comparison needs at least one metric".into(),
        ));
    }
    let mut kinds: Vec<MetricKind> = Vec::new();
    for &m in metrics {
        if !kinds.contains(&m) {
            kinds.push(m);
        }
    }
    let mut c = cfg.clone();
    c.confidence.metrics = kinds.clone();
    cache.run("distance_comparison", || {
        let started = Instant::now();
        match run_pipeline(data, &c) {
            Ok(run) => {
                let train_seconds: f64 = run.train_report.epochs.iter().map(|e| e.seconds).sum();
                run.evaluation
                    .results
                    .iter()
                    .map(|r| {
                        SweepRow::from_result(&c, &run.evaluation, r, train_seconds + r.seconds)
                    })
                    .collect()
            }
            Err(e) => {
                let secs = started.elapsed().as_secs_f64();
                kinds
                    .iter()
                    .map(|&k| SweepRow::failed(&c, k, &e, secs))
                    .collect()
            }
        }
    })
}

/// Wall time of Mahalanobis scoring in latent space against feature space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub n_train: usize,
    pub n_queries: usize,
    pub latent_dim: usize,
    pub feature_dim: usize,
    /// Encoding training and query rows.
    pub embed_seconds: f64,
    /// Index build plus scoring, latent space.
    pub latent_seconds: f64,
    /// Index build plus scoring, feature space.
    pub feature_seconds: f64,
    pub speedup: f64,
}

pub fn timing_comparison(
    vae: &Vae,
    x_train: &Matrix,
    x_test: &Matrix,
    epsilon_scale: f64,
) -> Result<TimingReport> {
    let started = Instant::now();
    let z_train = vae.latent_embed(x_train)?;
    let z_test = vae.latent_embed(x_test)?;
    let embed_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    LatentIndex::build(&z_train, epsilon_scale, MetricKind::Mahalanobis)?
        .score_batch(&z_test, Default::default())?;
    let latent_seconds = started.elapsed().as_secs_f64();

    let started = Instant::now();
    LatentIndex::build(x_train, epsilon_scale, MetricKind::FeatureMahalanobis)?
        .score_batch(x_test, Default::default())?;
    let feature_seconds = started.elapsed().as_secs_f64();

    Ok(TimingReport {
        n_train: x_train.rows(),
        n_queries: x_test.rows(),
        latent_dim: z_train.cols(),
        feature_dim: x_train.cols(),
        embed_seconds,
        latent_seconds,
        feature_seconds,
        speedup: feature_seconds / latent_seconds.max(f64::MIN_POSITIVE),
    })
}

/// Combined sweep output, with the configuration that produced it.
#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub config: RunConfig,
    pub latent_dim: Vec<SweepRow>,
    pub beta: Vec<SweepRow>,
    pub distance: Vec<SweepRow>,
    pub timing: Option<TimingReport>,
}

/// CSV columns: sample_index, z0 … z(d−1).
pub fn write_latent_csv<W: Write>(out: W, z: &Matrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample_index".to_string()];
    header.extend((0..z.cols()).map(|j| format!("z{j}")));
    w.write_record(&header).map_err(csv_error)?;
    for (i, row) in z.iter_rows().enumerate() {
        let mut rec = vec![i.to_string()];
        rec.extend(row.iter().map(|&v| fmt_f64(v)));
        w.write_record(&rec).map_err(csv_error)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}
