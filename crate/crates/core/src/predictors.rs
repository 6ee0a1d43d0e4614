//! Prediction backends behind one request/response contract.
//!
//! * `ExpForce`: describe, embed, retrieve top-k, prompt the predictor model.
//! * `ZeroShot`: the same prompt with no experiences.
//! * `KnnAverage`: mean ground-truth force of the top-k neighbours, no model calls.
//! * `RandomExp`: `ExpForce` with k uniformly sampled experiences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{self, ChatModel, EmbeddingCache, EmbeddingProvider, EmbeddingVector, GatewayError, ImageData};
use crate::pool::{ExperienceRecord, Pool, PoolError};
use crate::prompting::{
    build_predictor_prompt, describe_object, parse_force, ExperienceExample, PromptBundle,
    PromptError, SharedContext, Templates,
};
use crate::retrieval::{top_k, EmbeddingIndex, RetrievalError, RetrievedSet, ScoredExperience};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    ExpForce,
    ZeroShot,
    KnnAverage,
    RandomExp,
}

impl BackendKind {
    pub const ALL: [BackendKind; 4] = [
        BackendKind::ExpForce,
        BackendKind::ZeroShot,
        BackendKind::KnnAverage,
        BackendKind::RandomExp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::ExpForce => "exp-force",
            BackendKind::ZeroShot => "zero-shot",
            BackendKind::KnnAverage => "knn-average",
            BackendKind::RandomExp => "random-exp",
        }
    }

    /// Whether k = 0 is meaningful (the zero-shot reduction).
    pub fn allows_zero_k(self) -> bool {
        matches!(self, BackendKind::ExpForce | BackendKind::ZeroShot)
    }

    pub fn check_k(self, k: usize) -> Result<(), PredictError> {
        if k == 0 && !self.allows_zero_k() {
            return Err(PredictError::InvalidK { backend: self, k });
        }
        Ok(())
    }
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BackendKind::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| format!("unknown backend `{s}` (expected exp-force, zero-shot, knn-average or random-exp)"))
    }
}

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("backend {backend} does not accept k = {k}")]
    InvalidK { backend: BackendKind, k: usize },
    #[error("no experiences available to retrieve from")]
    EmptyRetrieval,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Pool(#[from] PoolError),
}

/// The object being predicted.
#[derive(Debug, Clone)]
pub struct Query {
    pub id: String,
    pub image: ImageData,
    /// Known description; when absent the descriptor model is asked.
    pub description: Option<String>,
    /// Precomputed embedding; when absent it is computed on demand.
    pub embedding: Option<EmbeddingVector>,
}

#[derive(Debug, Clone)]
pub struct PredictionRequest {
    pub query: Query,
    pub k: usize,
    /// Only consulted by `RandomExp`.
    pub seed: u64,
    pub backend: BackendKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForcePrediction {
    pub query_id: String,
    pub f_hat_n: f64,
    pub backend: BackendKind,
    pub retrieved: RetrievedSet,
    pub raw_response: Option<String>,
    pub clamped: bool,
}

/// The records a query may draw experiences from, with their embeddings.
#[derive(Debug, Clone)]
pub struct ExperienceView<'a> {
    pool: &'a Pool,
    ids: Vec<String>,
    embeddings: EmbeddingIndex,
}

impl<'a> ExperienceView<'a> {
    /// Every record of the pool is available.
    pub fn whole(pool: &'a Pool, embeddings: &EmbeddingIndex) -> Self {
        let ids: Vec<String> = pool.ids().map(str::to_string).collect();
        Self::subset(pool, &ids, embeddings)
    }

    /// Only `ids` are available. Embeddings missing from `all` are left out
    /// of similarity search.
    pub fn subset(pool: &'a Pool, ids: &[String], all: &EmbeddingIndex) -> Self {
        let embeddings = ids
            .iter()
            .filter_map(|id| all.get(id).map(|e| (id.clone(), e.clone())))
            .collect();
        Self {
            pool,
            ids: ids.to_vec(),
            embeddings,
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn embeddings(&self) -> &EmbeddingIndex {
        &self.embeddings
    }

    fn record(&self, id: &str) -> Result<&'a ExperienceRecord, PoolError> {
        self.pool
            .get(id)
            .ok_or_else(|| PoolError::UnknownId(id.to_string()))
    }

    fn examples(&self, retrieved: &RetrievedSet) -> Result<Vec<ExperienceExample<'a>>, PoolError> {
        retrieved
            .ids()
            .map(|id| {
                let record = self.record(id)?;
                Ok(ExperienceExample {
                    record,
                    image: ImageData::new(self.pool.read_image(record)?),
                })
            })
            .collect()
    }
}

/// Models, prompt texts and optional embedding cache shared by all queries.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub ctx: &'a SharedContext,
    pub templates: &'a Templates,
    pub descriptor: &'a dyn ChatModel,
    pub predictor: &'a dyn ChatModel,
    pub embedder: &'a dyn EmbeddingProvider,
    pub cache: Option<&'a EmbeddingCache>,
}

impl Pipeline<'_> {
    fn description(&self, query: &Query) -> Result<String, PredictError> {
        match &query.description {
            Some(d) => Ok(d.clone()),
            None => Ok(describe_object(self.ctx, self.templates, &query.image, self.descriptor)?),
        }
    }

    fn query_embedding(&self, query: &Query, description: &str) -> Result<EmbeddingVector, PredictError> {
        match &query.embedding {
            Some(e) => Ok(e.clone()),
            None => Ok(gateway::embed(self.embedder, self.cache, query.image.bytes(), description)?),
        }
    }

    /// Retrieval half of the ExpForce path: describe, embed, top-k.
    pub fn retrieve(
        &self,
        query: &Query,
        view: &ExperienceView<'_>,
        k: usize,
    ) -> Result<RetrievedSet, PredictError> {
        if k == 0 {
            return Ok(RetrievedSet::empty(&query.id, 0));
        }
        let description = self.description(query)?;
        let embedding = self.query_embedding(query, &description)?;
        Ok(top_k(&query.id, &embedding, view.embeddings(), k, &BTreeSet::new())?)
    }

    fn ask(
        &self,
        query: &Query,
        view: &ExperienceView<'_>,
        retrieved: RetrievedSet,
        backend: BackendKind,
    ) -> Result<ForcePrediction, PredictError> {
        let prompt = self.predictor_prompt(query, view, &retrieved)?;
        let response = self.predictor.complete(&prompt.messages)?;
        let parsed = parse_force(&response)?;
        Ok(ForcePrediction {
            query_id: query.id.clone(),
            f_hat_n: parsed.force_n,
            backend,
            retrieved,
            raw_response: Some(response),
            clamped: parsed.clamped,
        })
    }

    /// Predictor prompt for a query given an already retrieved set.
    pub fn predictor_prompt(
        &self,
        query: &Query,
        view: &ExperienceView<'_>,
        retrieved: &RetrievedSet,
    ) -> Result<PromptBundle, PredictError> {
        let examples = view.examples(retrieved)?;
        Ok(build_predictor_prompt(self.ctx, self.templates, &examples, &query.image)?)
    }
}

pub fn predict_expforce(
    req: &PredictionRequest,
    view: &ExperienceView<'_>,
    pipeline: &Pipeline<'_>,
) -> Result<ForcePrediction, PredictError> {
    BackendKind::ExpForce.check_k(req.k)?;
    let retrieved = pipeline.retrieve(&req.query, view, req.k)?;
    pipeline.ask(&req.query, view, retrieved, BackendKind::ExpForce)
}

/// Ignores `req.k`; the prompt carries no experiences.
pub fn predict_zero_shot(
    req: &PredictionRequest,
    view: &ExperienceView<'_>,
    pipeline: &Pipeline<'_>,
) -> Result<ForcePrediction, PredictError> {
    let retrieved = RetrievedSet::empty(&req.query.id, 0);
    pipeline.ask(&req.query, view, retrieved, BackendKind::ZeroShot)
}

/// Mean ground-truth force of the top-k neighbours, summed in rank order.
pub fn predict_knn_average(
    req: &PredictionRequest,
    view: &ExperienceView<'_>,
    embedder: &dyn EmbeddingProvider,
    cache: Option<&EmbeddingCache>,
) -> Result<ForcePrediction, PredictError> {
    BackendKind::KnnAverage.check_k(req.k)?;
    let query = &req.query;
    let embedding = match &query.embedding {
        Some(e) => e.clone(),
        None => gateway::embed(
            embedder,
            cache,
            query.image.bytes(),
            query.description.as_deref().unwrap_or(""),
        )?,
    };
    let retrieved = top_k(&query.id, &embedding, view.embeddings(), req.k, &BTreeSet::new())?;
    if retrieved.is_empty() {
        return Err(PredictError::EmptyRetrieval);
    }
    let mut sum = 0.0;
    for id in retrieved.ids() {
        sum += view.record(id)?.f_star_n;
    }
    Ok(ForcePrediction {
        query_id: query.id.clone(),
        f_hat_n: sum / retrieved.len() as f64,
        backend: BackendKind::KnnAverage,
        retrieved,
        raw_response: None,
        clamped: false,
    })
}

/// Per-query RNG seed from the run seed and the query id.
pub fn derive_query_seed(run_seed: u64, query_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(query_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

/// `min(k, |candidates|)` ids drawn uniformly without replacement from the
/// view, never including the query. Returned sorted by id.
pub fn sample_random_experiences(view: &ExperienceView<'_>, query_id: &str, k: usize, seed: u64) -> Vec<String> {
    let candidates: Vec<&String> = view.ids().iter().filter(|id| *id != query_id).collect();
    let take = k.min(candidates.len());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_query_seed(seed, query_id));
    let mut picked: Vec<String> = rand::seq::index::sample(&mut rng, candidates.len(), take)
        .into_iter()
        .map(|i| candidates[i].clone())
        .collect();
    picked.sort();
    picked
}

/// Random experiences carry no similarity; every score is 0 so the set is
/// ordered by id, which keeps the ranking invariant.
pub fn predict_random_exp(
    req: &PredictionRequest,
    view: &ExperienceView<'_>,
    pipeline: &Pipeline<'_>,
) -> Result<ForcePrediction, PredictError> {
    BackendKind::RandomExp.check_k(req.k)?;
    let ids = sample_random_experiences(view, &req.query.id, req.k, req.seed);
    if ids.is_empty() {
        return Err(PredictError::EmptyRetrieval);
    }
    let retrieved = RetrievedSet {
        query_id: req.query.id.clone(),
        entries: ids
            .into_iter()
            .map(|record_id| ScoredExperience {
                record_id,
                similarity: 0.0,
            })
            .collect(),
        k_requested: req.k,
    };
    pipeline.ask(&req.query, view, retrieved, BackendKind::RandomExp)
}

/// Dispatches on `req.backend`.
pub fn predict(
    req: &PredictionRequest,
    view: &ExperienceView<'_>,
    pipeline: &Pipeline<'_>,
) -> Result<ForcePrediction, PredictError> {
    match req.backend {
        BackendKind::ExpForce => predict_expforce(req, view, pipeline),
        BackendKind::ZeroShot => predict_zero_shot(req, view, pipeline),
        BackendKind::KnnAverage => predict_knn_average(req, view, pipeline.embedder, pipeline.cache),
        BackendKind::RandomExp => predict_random_exp(req, view, pipeline),
    }
}

/// Embeds every record of `pool` from its stored description and image,
/// using at most `concurrency` threads. Output is keyed by id.
pub fn embed_pool(
    pool: &Pool,
    embedder: &dyn EmbeddingProvider,
    cache: Option<&EmbeddingCache>,
    concurrency: usize,
) -> Result<EmbeddingIndex, PredictError> {
    use rayon::prelude::*;

    let work = || -> Result<Vec<(String, EmbeddingVector)>, PredictError> {
        pool.records
            .par_iter()
            .map(|r| {
                let image = pool.read_image(r)?;
                let v = gateway::embed(embedder, cache, &image, &r.description)?;
                Ok((r.id.clone(), v))
            })
            .collect()
    };
    let pairs = rayon::ThreadPoolBuilder::new()
        .num_threads(concurrency.max(1))
        .build()
        .expect("thread pool")
        .install(work)?;
    let index: BTreeMap<_, _> = pairs.into_iter().collect();
    if let Some(first) = index.values().next() {
        let d = first.dim();
        if let Some(bad) = index.values().find(|v| v.dim() != d) {
            return Err(GatewayError::DimensionMismatch {
                expected: d,
                got: bad.dim(),
            }
            .into());
        }
    }
    Ok(index)
}
