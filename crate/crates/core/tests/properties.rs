use std::collections::{BTreeMap, BTreeSet};

use expforce_core::evaluation::{classify_outcome, compute_metrics, Outcome};
use expforce_core::gateway::{CachedEmbeddingProvider, EmbeddingCache, EmbeddingProvider, EmbeddingVector, MockEmbeddingProvider};
use expforce_core::oracle::{adaptive_force_search, closed_form_fstar, OracleConfig, SyntheticObject};
use expforce_core::pool::{is_on_force_grid, partition_folds, Category, ExperienceRecord, Pool};
use expforce_core::prompting::parse_force;
use expforce_core::retrieval::{cosine_similarity, top_k, EmbeddingIndex};
use proptest::prelude::*;
use std::sync::Arc;

fn ev(values: Vec<f64>) -> EmbeddingVector {
    EmbeddingVector::new(values, "t").unwrap()
}

/// Brute force: score every candidate, full sort, take k.
fn brute_force(query_id: &str, q: &[f64], pool: &BTreeMap<String, Vec<f64>>, k: usize, exclude: &BTreeSet<String>) -> Vec<(String, f64)> {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(String, f64)> = pool
        .iter()
        .filter(|(id, _)| id.as_str() != query_id && !exclude.contains(*id))
        .map(|(id, v)| {
            let dot: f64 = q.iter().zip(v).map(|(a, b)| a * b).sum();
            (id.clone(), (dot / (norm(q) * norm(v))).clamp(-1.0, 1.0) + 0.0)
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

fn nonzero_vec(d: usize) -> impl Strategy<Value = Vec<f64>> {
    // small integers make exact ties common
    prop::collection::vec(-3i32..=3, d)
        .prop_filter("nonzero", |v| v.iter().any(|x| *x != 0))
        .prop_map(|v| v.into_iter().map(f64::from).collect())
}

fn pool_and_query() -> impl Strategy<Value = (BTreeMap<String, Vec<f64>>, Vec<f64>, usize, BTreeSet<String>)> {
    (1usize..=16).prop_flat_map(|d| {
        (
            prop::collection::vec(nonzero_vec(d), 0..=60),
            nonzero_vec(d),
            0usize..80,
            prop::collection::btree_set(0usize..60, 0..5),
        )
            .prop_map(|(vs, q, k, ex)| {
                let pool = vs.into_iter().enumerate().map(|(i, v)| (format!("r{i:03}"), v)).collect();
                let exclude = ex.into_iter().map(|i| format!("r{i:03}")).collect();
                (pool, q, k, exclude)
            })
    })
}

fn index_of(pool: &BTreeMap<String, Vec<f64>>) -> EmbeddingIndex {
    pool.iter().map(|(k, v)| (k.clone(), ev(v.clone()))).collect()
}

proptest! {
    #[test]
    fn top_k_matches_brute_force((pool, q, k, exclude) in pool_and_query()) {
        let got = top_k("r000", &ev(q.clone()), &index_of(&pool), k, &exclude).unwrap();
        let want = brute_force("r000", &q, &pool, k, &exclude);
        let got: Vec<(String, f64)> = got.entries.into_iter().map(|e| (e.record_id, e.similarity)).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn top_k_size_and_exclusion((pool, q, k, exclude) in pool_and_query()) {
        let set = top_k("r001", &ev(q), &index_of(&pool), k, &exclude).unwrap();
        let available = pool.keys().filter(|id| id.as_str() != "r001" && !exclude.contains(*id)).count();
        prop_assert_eq!(set.len(), k.min(available));
        prop_assert!(set.ids().all(|id| id != "r001" && !exclude.contains(id)));
        for w in set.entries.windows(2) {
            prop_assert!(w[0].similarity > w[1].similarity
                || (w[0].similarity == w[1].similarity && w[0].record_id < w[1].record_id));
        }
    }

    #[test]
    fn ranking_is_scale_invariant((pool, q, k, _ex) in pool_and_query(), p in -4i32..=4) {
        // powers of two scale exactly, so scores are bit-identical
        let s = 2f64.powi(p);
        let a = top_k("q", &ev(q.clone()), &index_of(&pool), k, &BTreeSet::new()).unwrap();
        let b = top_k("q", &ev(q.iter().map(|x| x * s).collect()), &index_of(&pool), k, &BTreeSet::new()).unwrap();
        prop_assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn cosine_is_symmetric_and_bounded(a in nonzero_vec(8), b in nonzero_vec(8)) {
        let (a, b) = (ev(a), ev(b));
        let ab = cosine_similarity(&a, &b).unwrap();
        prop_assert_eq!(ab, cosine_similarity(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn oracle_routes_agree(m in 0.001f64..2.0, mu in 0.5f64..4.0) {
        let cfg = OracleConfig::default();
        let obj = SyntheticObject::new(m, mu);
        match (closed_form_fstar(&obj, &cfg), adaptive_force_search(&obj, &cfg)) {
            (Ok(c), Ok(s)) => {
                prop_assert_eq!(c, s.force_n);
                prop_assert!(is_on_force_grid(c));
                prop_assert!((0.25..=20.0).contains(&c));
                let required = m * cfg.g_mps2 / mu;
                prop_assert!(c + 1e-9 >= required && c - required < 0.25 + 1e-9);
            }
            (Err(_), Err(_)) => {}
            (c, s) => prop_assert!(false, "routes disagree: {:?} vs {:?}", c, s),
        }
    }

    #[test]
    fn oracle_is_monotone(m in 0.001f64..1.2, mu in 0.8f64..4.0, dm in 0.0f64..0.3, dmu in 0.0f64..1.0) {
        let cfg = OracleConfig::default();
        let f = |m, mu| closed_form_fstar(&SyntheticObject::new(m, mu), &cfg).unwrap();
        prop_assert!(f(m + dm, mu) >= f(m, mu));
        prop_assert!(f(m, mu + dmu) <= f(m, mu));
    }

    #[test]
    fn folds_partition_the_pool(n in 2usize..200, folds in 2usize..8, seed in any::<u64>()) {
        prop_assume!(n >= folds);
        let pool = Pool::new((0..n).map(|i| record(&format!("o{i:04}"))).collect());
        let parts = partition_folds(&pool, folds, seed).unwrap();
        prop_assert_eq!(parts.len(), folds);
        let mut seen = BTreeSet::new();
        for f in &parts {
            let q: BTreeSet<_> = f.query_ids.iter().collect();
            prop_assert!(f.pool_ids.iter().all(|id| !q.contains(id)));
            prop_assert_eq!(f.query_ids.len() + f.pool_ids.len(), n);
            for id in &f.query_ids {
                prop_assert!(seen.insert(id.clone()));
            }
        }
        prop_assert_eq!(seen.len(), n);
        let sizes: Vec<usize> = parts.iter().map(|f| f.query_ids.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        prop_assert_eq!(parts, partition_folds(&pool, folds, seed).unwrap());
    }

    #[test]
    fn rmse_dominates_mae(pairs in prop::collection::vec((0.25f64..20.0, 0.25f64..20.0), 1..50)) {
        let m = compute_metrics(&pairs).unwrap();
        prop_assert!(m.rmse_n >= m.mae_n);
        prop_assert!(m.mae_n >= 0.0 && m.std_n >= 0.0);
        prop_assert_eq!(m.n, pairs.len());
    }

    #[test]
    fn overestimate_needs_a_successful_lift(h in 0.25f64..20.0, s in 0.25f64..20.0) {
        prop_assert_eq!(classify_outcome(h, s, false), Outcome::Insufficient);
        let o = classify_outcome(h, s, true);
        prop_assert_eq!(o == Outcome::Overestimate, h > 3.0 * s || h > s + 4.0);
    }

    #[test]
    fn sentinel_round_trips(x in 0.25f64..20.0) {
        let p = parse_force(&format!("some reasoning\nFORCE_N: {x}")).unwrap();
        prop_assert_eq!(p.force_n, x);
        prop_assert!(!p.clamped);
    }
}

fn record(id: &str) -> ExperienceRecord {
    ExperienceRecord {
        id: id.into(),
        name: id.into(),
        mass_kg: 0.1,
        description: "d".into(),
        image_ref: format!("images/{id}.png"),
        f_star_n: 1.0,
        category: Category::Cuboids,
    }
}

#[test]
fn cache_is_transparent() {
    let dir = tempfile::tempdir().unwrap();
    let inner: Arc<dyn EmbeddingProvider> = Arc::new(MockEmbeddingProvider::new(48).unwrap());
    let cached = CachedEmbeddingProvider::new(inner.clone(), EmbeddingCache::new(dir.path()).unwrap());
    let inputs: Vec<(Vec<u8>, String)> = (0..20u8)
        .map(|i| (vec![i; 1 + i as usize], format!("mass band {i}; grip band {}", 20 - i)))
        .collect();
    for round in 0..2 {
        for (img, desc) in &inputs {
            assert_eq!(cached.embed(img, desc).unwrap(), inner.embed(img, desc).unwrap(), "round {round}");
        }
    }
    assert_eq!(cached.stats(), (20, 20, 0));
}
