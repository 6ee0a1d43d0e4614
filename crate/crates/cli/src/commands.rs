use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use expforce_core::evaluation::{emit_report, run_cross_validation, run_k_sweep, EvalReport, SweepResult};
use expforce_core::gateway::{
    self, build_chat_model, build_embedding_provider, CachedEmbeddingProvider, ChatModel, EmbeddingCache,
    EmbeddingProvider, ImageData,
};
use expforce_core::oracle::generate_synthetic_pool;
use expforce_core::pool::{load_pool, Pool};
use expforce_core::predictors::{embed_pool, predict, ExperienceView, Pipeline, PredictionRequest, Query};
use expforce_core::prompting::{describe_object, SharedContext, Templates};
use expforce_core::retrieval::{top_k, RetrievedSet};

use crate::config::RunConfig;
use crate::{Command, EvalArgs, EvalCommand, PoolCommand, QueryArgs};

pub enum Status {
    Clean,
    QueryFailures(usize),
}

struct Runtime {
    ctx: SharedContext,
    templates: Templates,
    descriptor: Arc<dyn ChatModel>,
    predictor: Arc<dyn ChatModel>,
    embedder: Arc<dyn EmbeddingProvider>,
    cached: Option<Arc<CachedEmbeddingProvider>>,
}

impl Runtime {
    fn new(cfg: &RunConfig) -> Result<Self> {
        let raw = build_embedding_provider(&cfg.endpoints.embedding).context("embedding endpoint")?;
        let (embedder, cached) = match &cfg.cache_dir {
            Some(dir) => {
                let cache = EmbeddingCache::new(dir).context("embedding cache")?;
                let c = Arc::new(CachedEmbeddingProvider::new(raw, cache));
                (c.clone() as Arc<dyn EmbeddingProvider>, Some(c))
            }
            None => (raw, None),
        };
        Ok(Self {
            ctx: cfg.shared_context()?,
            templates: cfg.templates()?,
            descriptor: build_chat_model(&cfg.endpoints.descriptor).context("descriptor endpoint")?,
            predictor: build_chat_model(&cfg.endpoints.predictor).context("predictor endpoint")?,
            embedder,
            cached,
        })
    }

    fn pipeline(&self) -> Pipeline<'_> {
        Pipeline {
            ctx: &self.ctx,
            templates: &self.templates,
            descriptor: &*self.descriptor,
            predictor: &*self.predictor,
            embedder: &*self.embedder,
            cache: None,
        }
    }

    fn report_cache(&self) {
        if let Some(c) = &self.cached {
            let (hits, misses, recovered) = c.stats();
            println!("embedding cache: {hits} hits, {misses} misses, {recovered} recovered");
        }
    }
}

fn open_pool(dir: &Path) -> Result<Pool> {
    load_pool(dir).with_context(|| format!("pool {}", dir.display()))
}

pub fn run(command: &Command, cfg: &RunConfig) -> Result<Status> {
    match command {
        Command::Pool {
            command: PoolCommand::Validate { dir },
        } => {
            let pool = open_pool(dir)?;
            println!("pool {}: {} records, valid", dir.display(), pool.len());
        }
        Command::SynthPool { n, out } => {
            let pool = generate_synthetic_pool(*n, cfg.seed, &cfg.oracle, out)?;
            let forces: Vec<f64> = pool.records.iter().map(|r| r.f_star_n).collect();
            let lo = forces.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = forces.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            println!(
                "wrote {} records to {} (seed {}, forces {lo:.2}..{hi:.2} N)",
                pool.len(),
                out.display(),
                cfg.seed
            );
        }
        Command::Embed { pool, out } => {
            let rt = Runtime::new(cfg)?;
            let pool = open_pool(pool)?;
            let index = embed_pool(&pool, &*rt.embedder, None, cfg.concurrency_limit)?;
            let d = index.values().next().map_or(0, |v| v.dim());
            println!("embedded {} records (provider {}, d={d})", index.len(), rt.embedder.provider_id());
            rt.report_cache();
            if let Some(out) = out {
                let map: BTreeMap<&str, &[f64]> = index.iter().map(|(k, v)| (k.as_str(), v.values())).collect();
                fs::write(out, serde_json::to_string(&map)? + "\n").with_context(|| format!("writing {}", out.display()))?;
            }
        }
        Command::Retrieve { pool, query, k } => {
            let rt = Runtime::new(cfg)?;
            let pool = open_pool(pool)?;
            let q = build_query(&pool, query)?;
            let index = embed_pool(&pool, &*rt.embedder, None, cfg.concurrency_limit)?;
            let pipeline = rt.pipeline();
            let description = match &q.description {
                Some(d) => d.clone(),
                None => describe_object(&rt.ctx, &rt.templates, &q.image, &*rt.descriptor)?,
            };
            let embedding = match &q.embedding {
                Some(e) => e.clone(),
                None => gateway::embed(pipeline.embedder, None, q.image.bytes(), &description)?,
            };
            let set = top_k(&q.id, &embedding, &index, *k, &Default::default())?;
            print_retrieved(&pool, &set);
            rt.report_cache();
        }
        Command::Describe { image } => {
            let rt = Runtime::new(cfg)?;
            let bytes = fs::read(image).with_context(|| format!("reading {}", image.display()))?;
            let text = describe_object(&rt.ctx, &rt.templates, &ImageData::new(bytes), &*rt.descriptor)?;
            println!("{text}");
        }
        Command::Predict { pool, query, .. } => {
            let rt = Runtime::new(cfg)?;
            let pool = open_pool(pool)?;
            let q = build_query(&pool, query)?;
            let index = embed_pool(&pool, &*rt.embedder, None, cfg.concurrency_limit)?;
            let view = ExperienceView::whole(&pool, &index);
            let req = PredictionRequest {
                query: q,
                k: cfg.eval.k,
                seed: cfg.seed,
                backend: cfg.eval.backend,
            };
            let p = predict(&req, &view, &rt.pipeline())?;
            let truth = pool.get(&p.query_id).map(|r| format!(" (ground truth {:.2} N)", r.f_star_n));
            println!(
                "query {}: predicted {} N with {} k={}{}{}",
                p.query_id,
                p.f_hat_n,
                p.backend,
                req.k,
                if p.clamped { " [clamped]" } else { "" },
                truth.unwrap_or_default()
            );
            print_retrieved(&pool, &p.retrieved);
        }
        Command::Eval { command } => return run_eval(command, cfg),
        Command::Report { input, out } => {
            let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
            let written = if let Ok(r) = serde_json::from_str::<EvalReport>(&text) {
                emit_report(&r, out)?
            } else if let Ok(s) = serde_json::from_str::<SweepResult>(&text) {
                emit_report(&s, out)?
            } else {
                bail!("{} is neither a cross-validation report nor a sweep result", input.display());
            };
            for p in written {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(Status::Clean)
}

fn run_eval(command: &EvalCommand, cfg: &RunConfig) -> Result<Status> {
    let rt = Runtime::new(cfg)?;
    let eval_cfg = cfg.eval_config();
    let (args, failures): (&EvalArgs, usize) = match command {
        EvalCommand::Cv { args, .. } => {
            let pool = open_pool(&args.pool)?;
            let report = run_cross_validation(&pool, &eval_cfg, &rt.pipeline())?;
            let written = emit_report(&report, &args.out)?;
            match report.overall {
                Some(m) => println!(
                    "{} k={}: {} queries, MAE {:.3} N, RMSE {:.3} N, {} failures",
                    report.backend, report.k, report.queries, m.mae_n, m.rmse_n, report.failures
                ),
                None => println!("{} k={}: every query failed ({})", report.backend, report.k, report.failures),
            }
            for p in written {
                println!("wrote {}", p.display());
            }
            (args, report.failures)
        }
        EvalCommand::SweepK { args, ks } => {
            let pool = open_pool(&args.pool)?;
            let ks = ks.clone().unwrap_or_else(|| cfg.eval.k_values.clone());
            let sweep = run_k_sweep(&pool, &eval_cfg, &ks, &rt.pipeline())?;
            for p in &sweep.points {
                match p.overall {
                    Some(m) => println!("k={:>3}  MAE {:.3} ± {:.3} N  failures {}", p.k, m.mae_n, m.std_n, p.failures),
                    None => println!("k={:>3}  no successful queries", p.k),
                }
            }
            let written = emit_report(&sweep, &args.out)?;
            for p in written {
                println!("wrote {}", p.display());
            }
            (args, sweep.points.iter().map(|p| p.failures).sum())
        }
    };
    rt.report_cache();
    if args.strict && failures > 0 {
        return Ok(Status::QueryFailures(failures));
    }
    Ok(Status::Clean)
}

fn build_query(pool: &Pool, args: &QueryArgs) -> Result<Query> {
    if let Some(id) = &args.query_id {
        let record = pool.get(id).with_context(|| format!("no record `{id}` in pool"))?;
        return Ok(Query {
            id: id.clone(),
            image: ImageData::new(pool.read_image(record)?),
            description: Some(record.description.clone()),
            embedding: None,
        });
    }
    let path = args.query_image.as_ref().expect("clap enforces query-id or query-image");
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if bytes.is_empty() {
        bail!("query image {} is empty", path.display());
    }
    let id = path
        .file_stem()
        .map_or_else(|| "query".to_string(), |s| format!("query:{}", s.to_string_lossy()));
    Ok(Query {
        id,
        image: ImageData::new(bytes),
        description: args.description.clone(),
        embedding: None,
    })
}

fn print_retrieved(pool: &Pool, set: &RetrievedSet) {
    if set.is_empty() {
        println!("(no experiences retrieved)");
        return;
    }
    println!("{:>4}  {:<12} {:>10} {:>8}  name", "rank", "id", "similarity", "F* (N)");
    for (i, e) in set.entries.iter().enumerate() {
        let (force, name) = pool
            .get(&e.record_id)
            .map_or((f64::NAN, ""), |r| (r.f_star_n, r.name.as_str()));
        println!("{:>4}  {:<12} {:>10.6} {:>8.2}  {name}", i + 1, e.record_id, e.similarity, force);
    }
}
