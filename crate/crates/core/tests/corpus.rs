//! Synthetic corpus properties and the evaluation harness.

use std::collections::{BTreeMap, HashMap};

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use genvr::cotrainer::{self, TrainConfig};
use genvr::evalbench::{self, recall_at_k, EvalConfig, EvalMode};
use genvr::kmeans;
use genvr::linalg;
use genvr::search::{DenseVideoIndex, Engine, SearchConfig};
use genvr::synthgen::{self, SynthConfig};
use genvr::Exec;

fn synth(seed: u64) -> SynthConfig {
    SynthConfig {
        n_videos: 200,
        facets_per_video: 4,
        feature_dim: 32,
        queries_per_facet: 2,
        seed,
        ..SynthConfig::default()
    }
}

#[test]
fn same_seed_gives_byte_identical_stores() {
    let a = synthgen::generate(&synth(5)).unwrap();
    let b = synthgen::generate(&synth(5)).unwrap();
    assert_eq!(a.videos.to_bytes(), b.videos.to_bytes());
    assert_eq!(a.queries.to_bytes(), b.queries.to_bytes());
    let c = synthgen::generate(&synth(6)).unwrap();
    assert_ne!(a.videos.to_bytes(), c.videos.to_bytes());
}

#[test]
fn videos_are_the_normalized_mean_of_their_facets() {
    let c = synthgen::generate(&synth(1)).unwrap();
    for (rec, facets) in c.videos.records().iter().zip(&c.facets) {
        let mut mean = vec![0.0; 32];
        for f in facets {
            linalg::add_assign(&mut mean, &linalg::to_f64(f));
        }
        let n = linalg::norm(&mean);
        for (got, want) in rec.features.iter().zip(&mean) {
            assert!((*got as f64 - want / n).abs() < 1e-5);
        }
    }
}

/// R@1 when each video is scored by its best-matching facet.
fn facet_recall(c: &synthgen::SynthCorpus) -> f64 {
    let ids: Vec<u64> = c.videos.records().iter().map(|r| r.video_id).collect();
    let mut hits = 0;
    for q in c.queries.records() {
        let qv = linalg::to_f64(&q.features);
        let best = ids
            .iter()
            .zip(&c.facets)
            .map(|(&id, fs)| {
                let s = fs
                    .iter()
                    .map(|f| linalg::cosine(&qv, &linalg::to_f64(f)))
                    .fold(f64::MIN, f64::max);
                (id, s)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .unwrap();
        hits += (best.0 == q.target_video_id) as usize;
    }
    100.0 * hits as f64 / c.queries.len() as f64
}

#[test]
fn noiseless_facets_favor_facet_aware_retrieval() {
    let c = synthgen::generate(&SynthConfig {
        facet_noise: 0.0,
        ..synth(2)
    })
    .unwrap();
    let pooled = evalbench::dense_recall(&c.videos, &c.queries, &[1], 0).unwrap()["R@1"];
    let facet = facet_recall(&c);
    assert_eq!(facet, 100.0);
    assert!(facet > pooled, "facet {facet} pooled {pooled}");
}

#[test]
fn per_video_query_clusters_recover_facets() {
    let c = synthgen::generate(&SynthConfig {
        facet_noise: 0.1,
        min_facet_angle_deg: 75.0,
        queries_per_facet: 8,
        ..synth(3)
    })
    .unwrap();
    let mut by_video: BTreeMap<u64, Vec<(Vec<f64>, usize)>> = BTreeMap::new();
    for q in c.queries.records() {
        by_video
            .entry(q.target_video_id)
            .or_default()
            .push((linalg::to_f64(&q.features), c.query_facet[&q.query_id]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut majority, mut total) = (0, 0);
    for qs in by_video.values() {
        let pts: Vec<Vec<f64>> = qs.iter().map(|q| q.0.clone()).collect();
        let km = kmeans::kmeans(&pts, 4, 50, &mut rng).unwrap();
        let mut table: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        for (q, &cluster) in qs.iter().zip(&km.assignment) {
            *table.entry((cluster, q.1)).or_default() += 1;
        }
        majority += (0..4)
            .map(|k| (0..4).map(|f| table.get(&(k, f)).copied().unwrap_or(0)).max().unwrap())
            .sum::<usize>();
        total += qs.len();
    }
    let purity = majority as f64 / total as f64;
    assert!(purity > 0.9, "purity {purity}");
}

#[test]
fn random_rankings_recall_at_the_base_rate() {
    let n = 200u64;
    let queries = 20000;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let videos: Vec<u64> = (0..n).collect();
    let mut truth = HashMap::new();
    let mut ranked = Vec::new();
    for q in 0..queries {
        truth.insert(q, q % n);
        let mut order = videos.clone();
        order.shuffle(&mut rng);
        ranked.push((q, order));
    }
    for k in [1, 5, 10] {
        let p = k as f64 / n as f64;
        let sigma = 100.0 * (p * (1.0 - p) / queries as f64).sqrt();
        let r = recall_at_k(&ranked, &truth, k).unwrap();
        assert!((r - 100.0 * p).abs() <= 3.0 * sigma, "R@{k} = {r}");
    }
}

proptest! {
    #[test]
    fn recall_is_monotone_in_k(lists in prop::collection::vec((0u64..20, prop::collection::vec(0u64..20, 0..15)), 1..30)) {
        let truth: HashMap<u64, u64> = lists.iter().enumerate().map(|(i, (t, _))| (i as u64, *t)).collect();
        let ranked: Vec<(u64, Vec<u64>)> = lists.iter().enumerate().map(|(i, (_, r))| (i as u64, r.clone())).collect();
        let r: Vec<f64> = [1, 5, 10].iter().map(|&k| recall_at_k(&ranked, &truth, k).unwrap()).collect();
        prop_assert!(r[0] <= r[1] && r[1] <= r[2]);
    }
}

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig {
        num_views: 2,
        num_layers: 2,
        codebook_size: 16,
        latent_dim: 8,
        hidden_dim: 16,
        batch_size: 32,
        learning_rate: 3e-3,
        first_align_epochs: 1,
        align_epochs: 1,
        train_epochs: 2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn full_corpus_is_no_easier_and_reports_are_deterministic() {
    let s = synth(4);
    let corpus = synthgen::generate(&s).unwrap();
    let (tr, te) = synthgen::split(&corpus.videos, &corpus.queries, 0.5, 4).unwrap();
    let state = cotrainer::train(small_train(4), &tr.videos, &tr.queries, Exec::default()).unwrap();
    let search = SearchConfig {
        beam_size: 20,
        top_k: 10,
        max_candidates: 0,
    };
    let report = |mode: EvalMode| {
        let pool = mode.pool(&tr.videos, &te.videos).unwrap();
        let engine = Engine::build(state.params.clone(), &pool, Exec::default()).unwrap();
        let eval = EvalConfig {
            mode,
            ..EvalConfig::default()
        };
        evalbench::run_eval(&engine, &te.queries, &search, &eval, "h").unwrap()
    };
    let inductive = report(EvalMode::Inductive);
    let full = report(EvalMode::FullCorpus);
    assert_eq!(full.metrics.pool_size, inductive.metrics.pool_size * 2);
    for k in [1, 5, 10] {
        assert!(full.recall(k) <= inductive.recall(k), "R@{k}");
    }
    assert!(inductive.recall(1) <= inductive.recall(5) && inductive.recall(5) <= inductive.recall(10));
    assert_eq!(report(EvalMode::Inductive).metrics, inductive.metrics);
}

#[test]
fn dense_scan_matches_a_sort_oracle() {
    let c = synthgen::generate(&synth(8)).unwrap();
    let dense = DenseVideoIndex::new(&c.videos).unwrap();
    for q in c.queries.records().iter().take(20) {
        let qv = genvr::search::unit(&linalg::to_f64(&q.features)).unwrap();
        let mut want: Vec<(u64, f64)> = c
            .videos
            .records()
            .iter()
            .map(|r| (r.video_id, qv.iter().zip(&r.features).map(|(a, &b)| a * b as f64).sum()))
            .collect();
        want.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        want.truncate(10);
        assert_eq!(dense.scan(&qv, 10), want);
    }
}

/// The paper's operating point: beam 100 recalls roughly 100 to 150 distinct
/// candidates with N_v = 4, M = 3, K = 128.
#[test]
fn beam_of_one_hundred_recalls_a_comparable_pool() {
    let s = SynthConfig {
        n_videos: 1000,
        facets_per_video: 4,
        feature_dim: 64,
        queries_per_facet: 2,
        facet_noise: 0.2,
        seed: 0,
        ..SynthConfig::default()
    };
    let train = TrainConfig {
        latent_dim: 32,
        hidden_dim: 64,
        batch_size: 64,
        learning_rate: 3e-3,
        first_align_epochs: 1,
        align_epochs: 1,
        train_epochs: 2,
        ..TrainConfig::default()
    };
    let search = SearchConfig {
        beam_size: 100,
        top_k: 10,
        max_candidates: 0,
    };
    let eval = EvalConfig {
        max_queries: 200,
        ..EvalConfig::default()
    };
    let exp = evalbench::run_experiment(&s, &train, &search, &eval, Exec::default()).unwrap();
    let pool = exp.report.metrics.candidates.mean;
    eprintln!(
        "mean candidates at beam 100: {pool:.1} (min {}, max {})",
        exp.report.metrics.candidates.min, exp.report.metrics.candidates.max
    );
    assert!((100.0..=150.0).contains(&pool), "mean pool {pool}");
}
