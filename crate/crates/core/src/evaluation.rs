//! Cross-validation harness, metrics, outcome classes, k-sweeps and report files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{EmbeddingVector, ImageData};
use crate::pool::{partition_folds, Category, Fold, Pool, PoolError};
use crate::predictors::{embed_pool, predict, BackendKind, ExperienceView, Pipeline, PredictError, PredictionRequest, Query};
use crate::retrieval::EmbeddingIndex;

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";
pub const SWEEP_JSON: &str = "sweep.json";
pub const SWEEP_CSV: &str = "sweep.csv";

/// Label attached to outcome counts computed without a physical lift.
pub const OFFLINE_OUTCOME_MODE: &str = "offline-proxy: lift succeeds iff f_hat >= f_star";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no prediction pairs to score")]
    EmptyInput,
    #[error("backend {backend} does not accept k = {k}")]
    InvalidK { backend: BackendKind, k: usize },
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Appropriate,
    Overestimate,
    Insufficient,
}

impl Outcome {
    pub const ALL: [Outcome; 3] = [Outcome::Appropriate, Outcome::Overestimate, Outcome::Insufficient];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub n: usize,
    pub mae_n: f64,
    pub rmse_n: f64,
    /// Population standard deviation of the absolute errors.
    pub std_n: f64,
}

/// MAE, RMSE and std of absolute errors over `(f_hat, f_star)` pairs.
pub fn compute_metrics(pairs: &[(f64, f64)]) -> Result<MetricBlock, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let n = pairs.len() as f64;
    let abs: Vec<f64> = pairs.iter().map(|(h, s)| (h - s).abs()).collect();
    let mae = abs.iter().sum::<f64>() / n;
    let mse = abs.iter().map(|e| e * e).sum::<f64>() / n;
    let var = abs.iter().map(|e| (e - mae) * (e - mae)).sum::<f64>() / n;
    Ok(MetricBlock {
        n: pairs.len(),
        mae_n: mae,
        // rounding can leave sqrt(mse) an ulp under mae when all errors are equal
        rmse_n: mse.sqrt().max(mae),
        std_n: var.sqrt(),
    })
}

/// Overestimate is strict on both thresholds: `f_hat > 3 f_star` or
/// `f_hat > f_star + 4`.
pub fn classify_outcome(f_hat_n: f64, f_star_n: f64, lift_succeeded: bool) -> Outcome {
    if !lift_succeeded {
        Outcome::Insufficient
    } else if f_hat_n > 3.0 * f_star_n || f_hat_n > f_star_n + 4.0 {
        Outcome::Overestimate
    } else {
        Outcome::Appropriate
    }
}

/// Lift success without a robot: the predicted force reaches the minimum.
pub fn offline_lift_succeeded(f_hat_n: f64, f_star_n: f64) -> bool {
    f_hat_n >= f_star_n
}

/// Settings of one cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub backend: BackendKind,
    pub k: usize,
    pub n_folds: usize,
    pub seed: u64,
    /// Worker threads; results do not depend on it.
    pub concurrency_limit: usize,
    /// Ask the descriptor model for query descriptions instead of using the
    /// stored ones.
    pub describe_queries: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::ExpForce,
            k: 7,
            n_folds: 5,
            seed: 0,
            concurrency_limit: 4,
            describe_queries: false,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_folds < 2 {
            return Err(EvalError::InvalidConfig("n_folds must be at least 2".into()));
        }
        if self.concurrency_limit == 0 {
            return Err(EvalError::InvalidConfig("concurrency_limit must be at least 1".into()));
        }
        check_k(self.backend, self.k)
    }
}

fn check_k(backend: BackendKind, k: usize) -> Result<(), EvalError> {
    backend.check_k(k).map_err(|_| EvalError::InvalidK { backend, k })
}

/// Outcome of one query of a cross-validation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub fold: usize,
    pub category: Category,
    pub f_star_n: f64,
    pub f_hat_n: Option<f64>,
    pub outcome: Option<Outcome>,
    pub clamped: bool,
    pub retrieved: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub backend: BackendKind,
    pub k: usize,
    pub n_folds: usize,
    pub seed: u64,
    pub config_fingerprint: String,
    pub queries: usize,
    pub failures: usize,
    /// Answers clamped into the valid force range.
    pub clamped: usize,
    pub outcome_mode: String,
    pub overall: Option<MetricBlock>,
    /// `None` for a fold where every query failed.
    pub per_fold: Vec<Option<MetricBlock>>,
    pub per_category: BTreeMap<Category, MetricBlock>,
    pub outcomes: BTreeMap<Outcome, usize>,
    pub category_outcomes: BTreeMap<Category, BTreeMap<Outcome, usize>>,
    /// Sorted by query id.
    pub records: Vec<QueryRecord>,
}

impl EvalReport {
    /// Population std of the per-fold MAE values.
    pub fn fold_std_n(&self) -> Option<f64> {
        let maes: Vec<f64> = self.per_fold.iter().flatten().map(|b| b.mae_n).collect();
        if maes.is_empty() {
            return None;
        }
        let mean = maes.iter().sum::<f64>() / maes.len() as f64;
        Some((maes.iter().map(|m| (m - mean) * (m - mean)).sum::<f64>() / maes.len() as f64).sqrt())
    }

    /// Ids of the experiences available to each fold, for auditing.
    pub fn fold_of(&self, query_id: &str) -> Option<usize> {
        self.records
            .binary_search_by(|r| r.query_id.as_str().cmp(query_id))
            .ok()
            .map(|i| self.records[i].fold)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub k: usize,
    pub overall: Option<MetricBlock>,
    pub fold_std_n: Option<f64>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub backend: BackendKind,
    pub n_folds: usize,
    pub seed: u64,
    pub config_fingerprint: String,
    /// Strictly increasing in k.
    pub points: Vec<SweepPoint>,
    /// The partition every point was evaluated on.
    pub folds: Vec<Fold>,
}

/// Hash of everything that can change a result: pool content, backend
/// settings, model identities, shared context and templates. Concurrency is
/// left out on purpose since it never changes results.
pub fn run_fingerprint(pool: &Pool, cfg: &EvalConfig, ks: &[usize], pipeline: &Pipeline<'_>) -> Result<String, EvalError> {
    let mut h = Sha256::new();
    let mut field = |name: &str, bytes: &[u8]| {
        h.update(name.as_bytes());
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    };
    field("manifest", &pool.manifest_bytes());
    for r in &pool.records {
        field("image", &Sha256::digest(pool.read_image(r)?));
    }
    field("backend", cfg.backend.as_str().as_bytes());
    for k in ks {
        field("k", &(*k as u64).to_le_bytes());
    }
    field("folds", &(cfg.n_folds as u64).to_le_bytes());
    field("seed", &cfg.seed.to_le_bytes());
    field("describe_queries", &[u8::from(cfg.describe_queries)]);
    field("descriptor", pipeline.descriptor.model_id().as_bytes());
    field("predictor", pipeline.predictor.model_id().as_bytes());
    field("embedder", pipeline.embedder.provider_id().as_bytes());
    let ctx = pipeline.ctx;
    field("task", ctx.task_objective.as_bytes());
    field("embodiment", ctx.embodiment_text.as_bytes());
    field("include_embodiment", &[u8::from(ctx.include_embodiment)]);
    let image = |img: &Option<ImageData>| img.as_ref().map(|i| Sha256::digest(i.bytes()).to_vec()).unwrap_or_default();
    field("embodiment_image", &image(&ctx.embodiment_image));
    field("scale_image", &image(&ctx.scale_reference_image));
    for (name, text) in pipeline.templates.named() {
        field(name, text.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

fn thread_pool(limit: usize) -> Result<rayon::ThreadPool, EvalError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(limit.max(1))
        .build()
        .map_err(|e| EvalError::InvalidConfig(format!("cannot start worker threads: {e}")))
}

/// Cross-validated evaluation of one backend at one k.
pub fn run_cross_validation(pool: &Pool, cfg: &EvalConfig, pipeline: &Pipeline<'_>) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let folds = partition_folds(pool, cfg.n_folds, cfg.seed)?;
    let embeddings = embed_pool(pool, pipeline.embedder, pipeline.cache, cfg.concurrency_limit)?;
    let fingerprint = run_fingerprint(pool, cfg, &[cfg.k], pipeline)?;
    evaluate_folds(pool, &folds, &embeddings, cfg, pipeline, fingerprint)
}

/// One cross-validation per k, all on the same folds and embeddings.
pub fn run_k_sweep(pool: &Pool, cfg: &EvalConfig, k_values: &[usize], pipeline: &Pipeline<'_>) -> Result<SweepResult, EvalError> {
    if k_values.is_empty() {
        return Err(EvalError::InvalidConfig("k_values is empty".into()));
    }
    let mut ks = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();
    for &k in &ks {
        check_k(cfg.backend, k)?;
    }
    let base = EvalConfig { k: ks[0], ..cfg.clone() };
    base.validate()?;
    let folds = partition_folds(pool, cfg.n_folds, cfg.seed)?;
    let embeddings = embed_pool(pool, pipeline.embedder, pipeline.cache, cfg.concurrency_limit)?;
    let fingerprint = run_fingerprint(pool, cfg, &ks, pipeline)?;
    let mut points = Vec::with_capacity(ks.len());
    for &k in &ks {
        let point_cfg = EvalConfig { k, ..cfg.clone() };
        let report = evaluate_folds(pool, &folds, &embeddings, &point_cfg, pipeline, fingerprint.clone())?;
        points.push(SweepPoint {
            k,
            overall: report.overall,
            fold_std_n: report.fold_std_n(),
            failures: report.failures,
        });
    }
    Ok(SweepResult {
        backend: cfg.backend,
        n_folds: cfg.n_folds,
        seed: cfg.seed,
        config_fingerprint: fingerprint,
        points,
        folds,
    })
}

/// Runs every query of every fold and aggregates. Queries run on a pool of
/// `cfg.concurrency_limit` threads; results are merged by query id.
pub fn evaluate_folds(
    pool: &Pool,
    folds: &[Fold],
    embeddings: &EmbeddingIndex,
    cfg: &EvalConfig,
    pipeline: &Pipeline<'_>,
    config_fingerprint: String,
) -> Result<EvalReport, EvalError> {
    let views: Vec<ExperienceView<'_>> = folds
        .iter()
        .map(|f| ExperienceView::subset(pool, &f.pool_ids, embeddings))
        .collect();
    let jobs: Vec<(usize, &str)> = folds
        .iter()
        .enumerate()
        .flat_map(|(i, f)| f.query_ids.iter().map(move |id| (i, id.as_str())))
        .collect();

    let run = || -> Result<Vec<QueryRecord>, EvalError> {
        jobs.par_iter()
            .map(|&(fold, id)| run_query(pool, &views[fold], fold, id, embeddings.get(id), cfg, pipeline))
            .collect()
    };
    let mut records = thread_pool(cfg.concurrency_limit)?.install(run)?;
    records.sort_by(|a, b| a.query_id.cmp(&b.query_id));

    for r in &records {
        match (r.f_hat_n, r.outcome) {
            (Some(f_hat), Some(outcome)) => log::info!(
                "query={} backend={} k={} f_hat={} f_star={} outcome={:?}",
                r.query_id, cfg.backend, cfg.k, f_hat, r.f_star_n, outcome
            ),
            _ => log::warn!(
                "query={} backend={} k={} failed: {}",
                r.query_id, cfg.backend, cfg.k, r.error.as_deref().unwrap_or("unknown")
            ),
        }
    }
    Ok(aggregate(records, folds.len(), cfg, config_fingerprint))
}

fn run_query(
    pool: &Pool,
    view: &ExperienceView<'_>,
    fold: usize,
    id: &str,
    embedding: Option<&EmbeddingVector>,
    cfg: &EvalConfig,
    pipeline: &Pipeline<'_>,
) -> Result<QueryRecord, EvalError> {
    let record = pool.get(id).ok_or_else(|| PoolError::UnknownId(id.to_string()))?;
    let image = ImageData::new(pool.read_image(record)?);
    let query = if cfg.describe_queries && cfg.backend != BackendKind::KnnAverage {
        Query {
            id: id.to_string(),
            image,
            description: None,
            embedding: None,
        }
    } else {
        Query {
            id: id.to_string(),
            image,
            description: Some(record.description.clone()),
            embedding: embedding.cloned(),
        }
    };
    let req = PredictionRequest {
        query,
        k: cfg.k,
        seed: cfg.seed,
        backend: cfg.backend,
    };
    let mut out = QueryRecord {
        query_id: id.to_string(),
        fold,
        category: record.category,
        f_star_n: record.f_star_n,
        f_hat_n: None,
        outcome: None,
        clamped: false,
        retrieved: Vec::new(),
        error: None,
    };
    match predict(&req, view, pipeline) {
        Ok(p) => {
            let lifted = offline_lift_succeeded(p.f_hat_n, record.f_star_n);
            out.outcome = Some(classify_outcome(p.f_hat_n, record.f_star_n, lifted));
            out.f_hat_n = Some(p.f_hat_n);
            out.clamped = p.clamped;
            out.retrieved = p.retrieved.ids().map(str::to_string).collect();
        }
        // configuration and pool faults abort the run; model faults are per query
        Err(e @ (PredictError::InvalidK { .. } | PredictError::Pool(_))) => return Err(e.into()),
        Err(e) => out.error = Some(e.to_string()),
    }
    Ok(out)
}

fn aggregate(records: Vec<QueryRecord>, n_folds: usize, cfg: &EvalConfig, config_fingerprint: String) -> EvalReport {
    let pairs_where = |keep: &dyn Fn(&QueryRecord) -> bool| -> Vec<(f64, f64)> {
        records
            .iter()
            .filter(|r| keep(r))
            .filter_map(|r| r.f_hat_n.map(|h| (h, r.f_star_n)))
            .collect()
    };
    let overall = compute_metrics(&pairs_where(&|_| true)).ok();
    let per_fold = (0..n_folds)
        .map(|f| compute_metrics(&pairs_where(&|r| r.fold == f)).ok())
        .collect();
    let per_category = Category::ALL
        .into_iter()
        .filter_map(|c| compute_metrics(&pairs_where(&|r| r.category == c)).ok().map(|m| (c, m)))
        .collect();

    let zero = || Outcome::ALL.into_iter().map(|o| (o, 0usize)).collect::<BTreeMap<_, _>>();
    let mut outcomes = zero();
    let mut category_outcomes: BTreeMap<Category, BTreeMap<Outcome, usize>> =
        Category::ALL.into_iter().map(|c| (c, zero())).collect();
    for r in &records {
        if let Some(o) = r.outcome {
            *outcomes.entry(o).or_default() += 1;
            *category_outcomes.entry(r.category).or_default().entry(o).or_default() += 1;
        }
    }

    EvalReport {
        backend: cfg.backend,
        k: cfg.k,
        n_folds,
        seed: cfg.seed,
        config_fingerprint,
        queries: records.len(),
        failures: records.iter().filter(|r| r.error.is_some()).count(),
        clamped: records.iter().filter(|r| r.clamped).count(),
        outcome_mode: OFFLINE_OUTCOME_MODE.to_string(),
        overall,
        per_fold,
        per_category,
        outcomes,
        category_outcomes,
        records,
    }
}

/// Anything [`emit_report`] can write.
#[derive(Debug, Clone, Copy)]
pub enum ReportRef<'a> {
    Eval(&'a EvalReport),
    Sweep(&'a SweepResult),
}

impl<'a> From<&'a EvalReport> for ReportRef<'a> {
    fn from(r: &'a EvalReport) -> Self {
        ReportRef::Eval(r)
    }
}

impl<'a> From<&'a SweepResult> for ReportRef<'a> {
    fn from(r: &'a SweepResult) -> Self {
        ReportRef::Sweep(r)
    }
}

/// Writes `report.json` + `report.md` for a cross-validation report, or
/// `sweep.json` + `sweep.csv` for a sweep. Returns the paths written.
pub fn emit_report<'a>(report: impl Into<ReportRef<'a>>, out_dir: &Path) -> Result<Vec<PathBuf>, EvalError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let files: Vec<(&str, String)> = match report.into() {
        ReportRef::Eval(r) => vec![(REPORT_JSON, to_json(r)), (REPORT_MD, render_markdown(r))],
        ReportRef::Sweep(s) => vec![(SWEEP_JSON, to_json(s)), (SWEEP_CSV, render_sweep_csv(s))],
    };
    let mut written = Vec::new();
    for (name, body) in files {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(io(&path))?;
        written.push(path);
    }
    Ok(written)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialize");
    s.push('\n');
    s
}

fn pct(count: usize, total: usize) -> String {
    if total == 0 {
        "-".into()
    } else {
        format!("{:.1}", 100.0 * count as f64 / total as f64)
    }
}

fn table_row(label: &str, counts: &BTreeMap<Outcome, usize>, metrics: Option<&MetricBlock>) -> String {
    let get = |o| counts.get(&o).copied().unwrap_or(0);
    let total: usize = counts.values().sum();
    let err = metrics.map_or_else(|| "-".to_string(), |m| format!("{:.2} ± {:.2}", m.mae_n, m.std_n));
    format!(
        "| {label} | {total} | {} | {} | {} | {err} |\n",
        pct(get(Outcome::Appropriate), total),
        pct(get(Outcome::Overestimate), total),
        pct(get(Outcome::Insufficient), total),
    )
}

/// Human-readable summary: one row per category plus an overall row.
pub fn render_markdown(r: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Cross-validation report\n");
    let _ = writeln!(s, "- backend: {}", r.backend);
    let _ = writeln!(s, "- k: {}", r.k);
    let _ = writeln!(s, "- folds: {}", r.n_folds);
    let _ = writeln!(s, "- seed: {}", r.seed);
    let _ = writeln!(s, "- fingerprint: {}", r.config_fingerprint);
    let _ = writeln!(s, "- queries: {}, failures: {}, clamped answers: {}", r.queries, r.failures, r.clamped);
    let _ = writeln!(s, "- outcomes: {}\n", r.outcome_mode);
    s.push_str("| Category | N | Appr. (%) | Overest. (%) | Insuff. (%) | MAE ± STD (N) |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|\n");
    let empty = BTreeMap::new();
    for c in Category::ALL {
        let counts = r.category_outcomes.get(&c).unwrap_or(&empty);
        s.push_str(&table_row(c.label(), counts, r.per_category.get(&c)));
    }
    s.push_str(&table_row("Overall", &r.outcomes, r.overall.as_ref()));
    s.push_str("\n| Fold | N | MAE (N) | RMSE (N) |\n|---:|---:|---:|---:|\n");
    for (i, block) in r.per_fold.iter().enumerate() {
        match block {
            Some(m) => {
                let _ = writeln!(s, "| {} | {} | {:.3} | {:.3} |", i + 1, m.n, m.mae_n, m.rmse_n);
            }
            None => {
                let _ = writeln!(s, "| {} | 0 | - | - |", i + 1);
            }
        }
    }
    s
}

/// `k,mae_n,std_n` series; `std_n` is the std of absolute errors at that k.
pub fn render_sweep_csv(s: &SweepResult) -> String {
    let mut out = String::from("k,mae_n,std_n\n");
    for p in &s.points {
        match p.overall {
            Some(m) => {
                let _ = writeln!(out, "{},{},{}", p.k, m.mae_n, m.std_n);
            }
            None => {
                let _ = writeln!(out, "{},,", p.k);
            }
        }
    }
    out
}
