//! Recall@K, latency statistics, storage accounting, and the corpus-size
//! scaling benchmark.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cotrainer::{TrainConfig, TrainData, TrainState};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feature_store::{QueryStore, VideoStore};
use crate::index::StorageReport;
use crate::linalg;
use crate::model::Params;
use crate::search::{self, DenseVideoIndex, Engine, RetrievalResult, SearchConfig};
use crate::synthgen::{self, Split, SynthConfig};

/// Percentage of queries whose target appears in the first `k` results.
pub fn recall_at_k(results: &[(u64, Vec<u64>)], truth: &HashMap<u64, u64>, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (qid, ranked) in results {
        let target = truth.get(qid).ok_or(Error::MissingTarget(*qid))?;
        if ranked.iter().take(k).any(|v| v == target) {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / results.len() as f64)
}

/// Which videos form the search pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Unseen test videos only.
    #[default]
    Inductive,
    /// Training and test videos together.
    FullCorpus,
}

impl EvalMode {
    /// Builds the search pool from the two sides of a split.
    pub fn pool(self, train: &VideoStore, test: &VideoStore) -> Result<VideoStore> {
        match self {
            EvalMode::Inductive => Ok(test.clone()),
            EvalMode::FullCorpus => {
                let records = train.records().iter().chain(test.records()).cloned().collect();
                VideoStore::new(test.dimension(), records)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub ks: Vec<usize>,
    /// Queries run before latency recording starts.
    pub warmup: usize,
    /// Evaluate at most this many queries (in store order); 0 means all.
    pub max_queries: usize,
    /// Frames per video assumed for the frame-level storage comparison.
    pub frames_per_video: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mode: EvalMode::Inductive,
            ks: vec![1, 5, 10],
            warmup: 10,
            max_queries: 0,
            frames_per_video: 32,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config("ks must be a non-empty list of positive ranks".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    /// Timed queries (warm-up excluded).
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub recall_mean_ms: f64,
    pub rerank_mean_ms: f64,
}

impl LatencyStats {
    pub fn from_results(results: &[RetrievalResult]) -> Self {
        let mut lat: Vec<f64> = results.iter().map(|r| r.t_latency_ms).collect();
        lat.sort_by(f64::total_cmp);
        let n = lat.len();
        let mean = |f: &dyn Fn(&RetrievalResult) -> f64| {
            if n == 0 {
                0.0
            } else {
                results.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Self {
            count: n,
            mean_ms: mean(&|r| r.t_latency_ms),
            median_ms: percentile(&lat, 0.5),
            p95_ms: percentile(&lat, 0.95),
            recall_mean_ms: mean(&|r| r.t_recall_ms),
            rerank_mean_ms: mean(&|r| r.t_rerank_ms),
        }
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolStats {
    pub mean: f64,
    pub min: usize,
    pub max: usize,
}

/// Deterministic part of an evaluation: everything except timings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub mode: EvalMode,
    pub query_count: usize,
    pub pool_size: usize,
    pub beam_size: usize,
    /// `"R@k"` to percentage.
    pub recall: BTreeMap<String, f64>,
    pub candidates: PoolStats,
    pub storage: StorageReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metrics: Metrics,
    pub latency: LatencyStats,
    pub config_hash: String,
}

impl EvalReport {
    pub fn recall(&self, k: usize) -> f64 {
        self.metrics.recall.get(&format!("R@{k}")).copied().unwrap_or(f64::NAN)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let m = &self.metrics;
        let mut rows: Vec<(String, String)> = vec![
            ("setting".into(), format!("{:?}", m.mode)),
            ("queries".into(), m.query_count.to_string()),
            ("pool".into(), m.pool_size.to_string()),
            ("beam".into(), m.beam_size.to_string()),
        ];
        let mut recall: Vec<(&String, &f64)> = m.recall.iter().collect();
        recall.sort_by_key(|(k, _)| k.trim_start_matches("R@").parse::<usize>().unwrap_or(usize::MAX));
        for (k, v) in recall {
            rows.push((k.clone(), format!("{v:.2}")));
        }
        rows.push(("candidates mean".into(), format!("{:.1}", m.candidates.mean)));
        rows.push(("latency mean ms".into(), format!("{:.3}", self.latency.mean_ms)));
        rows.push(("latency median ms".into(), format!("{:.3}", self.latency.median_ms)));
        rows.push(("latency p95 ms".into(), format!("{:.3}", self.latency.p95_ms)));
        rows.push(("recall stage ms".into(), format!("{:.3}", self.latency.recall_mean_ms)));
        rows.push(("rerank stage ms".into(), format!("{:.3}", self.latency.rerank_mean_ms)));
        rows.push(("index bytes".into(), m.storage.index_bytes.to_string()));
        rows.push(("dense video bytes".into(), m.storage.dense_video_bytes.to_string()));
        let ratio = |r: Option<f64>| r.map_or("n/a".to_string(), |r| format!("{r}"));
        rows.push(("video/payload ratio".into(), ratio(m.storage.video_to_payload_ratio)));
        rows.push(("video/index ratio".into(), ratio(m.storage.video_to_index_ratio)));
        rows.push(("frame/index ratio".into(), ratio(m.storage.frame_to_index_ratio)));
        rows.push(("config".into(), self.config_hash.clone()));
        let w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<w$}  {v}");
        }
        out
    }
}

/// Queries as normalized `f64` vectors with their targets, truncated to `max` (0 = all).
pub fn query_vectors(queries: &QueryStore, max: usize) -> Result<Vec<(u64, u64, Vec<f64>)>> {
    let n = if max == 0 {
        queries.len()
    } else {
        max.min(queries.len())
    };
    queries.records()[..n]
        .iter()
        .map(|q| {
            Ok((
                q.query_id,
                q.target_video_id,
                search::unit(&linalg::to_f64(&q.features))?,
            ))
        })
        .collect()
}

/// Runs every query through the engine one at a time.
///
/// Recall covers all queries; latency statistics skip the first `warmup`.
pub fn run_eval(
    engine: &Engine,
    queries: &QueryStore,
    search: &SearchConfig,
    eval: &EvalConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    eval.validate()?;
    let qs = query_vectors(queries, eval.max_queries)?;
    if let Some((qid, _, _)) = qs.iter().find(|(_, t, _)| engine.dense().vector(*t).is_none()) {
        return Err(Error::MissingTarget(*qid));
    }
    let cfg = SearchConfig {
        top_k: search.top_k.max(*eval.ks.iter().max().unwrap()),
        ..search.clone()
    };
    let mut results = Vec::with_capacity(qs.len());
    for (_, _, q) in &qs {
        results.push(engine.retrieve(q, &cfg)?);
    }
    let timed = &results[eval.warmup.min(results.len())..];
    if timed.len() < 100 {
        log::warn!("latency averaged over only {} queries", timed.len());
    }
    let truth: HashMap<u64, u64> = qs.iter().map(|(q, t, _)| (*q, *t)).collect();
    let ranked: Vec<(u64, Vec<u64>)> = qs
        .iter()
        .zip(&results)
        .map(|((q, _, _), r)| (*q, r.video_ids.clone()))
        .collect();
    let mut recall = BTreeMap::new();
    for &k in &eval.ks {
        recall.insert(format!("R@{k}"), recall_at_k(&ranked, &truth, k)?);
    }
    let counts: Vec<usize> = results.iter().map(|r| r.candidate_count).collect();
    let candidates = PoolStats {
        mean: if counts.is_empty() {
            0.0
        } else {
            counts.iter().sum::<usize>() as f64 / counts.len() as f64
        },
        min: counts.iter().copied().min().unwrap_or(0),
        max: counts.iter().copied().max().unwrap_or(0),
    };
    Ok(EvalReport {
        metrics: Metrics {
            mode: eval.mode,
            query_count: qs.len(),
            pool_size: engine.dense().len(),
            beam_size: search.beam_size,
            recall,
            candidates,
            storage: engine
                .trie
                .storage_report(engine.dense().dimension(), eval.frames_per_video),
        },
        latency: LatencyStats::from_results(timed),
        config_hash: config_hash.to_string(),
    })
}

/// Scaling benchmark settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub corpus_sizes: Vec<usize>,
    /// Timed queries per corpus size.
    pub queries: usize,
    pub beam_size: usize,
    pub top_k: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            corpus_sizes: vec![1000, 5000, 10000, 50000],
            queries: 200,
            beam_size: 100,
            top_k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub n: usize,
    /// Mean generative recall time per query (beam search and dedup).
    pub t_recall_ms: f64,
    /// Mean exhaustive dense-scan time per query.
    pub t_dense_scan_ms: f64,
    pub mean_decode_steps: f64,
    pub mean_candidates: f64,
}

/// Least-squares line `y = slope·x + intercept` and its R².
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// Measures generative recall against an exhaustive dense scan at each size.
///
/// `make_engine(n)` builds an engine over a corpus of `n` videos; the same
/// `queries` (unit-normalized) are timed against every corpus.
pub fn scaling_bench(
    cfg: &BenchConfig,
    queries: &[Vec<f64>],
    mut make_engine: impl FnMut(usize) -> Result<Engine>,
) -> Result<Vec<ScalingRow>> {
    if cfg.corpus_sizes.is_empty() || cfg.corpus_sizes.contains(&0) {
        return Err(Error::Config(
            "corpus sizes must be a non-empty list of positive sizes".into(),
        ));
    }
    if queries.is_empty() {
        return Err(Error::InvalidInput("scaling benchmark needs at least one query".into()));
    }
    let mut rows = Vec::new();
    for &n in &cfg.corpus_sizes {
        let engine = make_engine(n)?;
        let dense = engine.dense();
        for q in queries.iter().take(10) {
            search::beam_search(q, &engine.trie, &engine.params, cfg.beam_size)?;
            std::hint::black_box(dense.scan(q, cfg.top_k));
        }
        let (mut recall, mut scan, mut steps, mut cands) = (0.0, 0.0, 0usize, 0usize);
        for q in queries {
            let t = Instant::now();
            let beam = search::beam_search(q, &engine.trie, &engine.params, cfg.beam_size)?;
            let found = search::dedup_candidates(beam.hypotheses.iter().map(|h| (h, engine.trie.resolve(&h.codes))));
            recall += t.elapsed().as_secs_f64() * 1e3;
            steps += beam.decode_steps;
            cands += std::hint::black_box(found).len();

            let t = Instant::now();
            std::hint::black_box(dense.scan(q, cfg.top_k));
            scan += t.elapsed().as_secs_f64() * 1e3;
        }
        let m = queries.len() as f64;
        let row = ScalingRow {
            n,
            t_recall_ms: recall / m,
            t_dense_scan_ms: scan / m,
            mean_decode_steps: steps as f64 / m,
            mean_candidates: cands as f64 / m,
        };
        log::info!(
            "N={n}: recall {:.3} ms, dense scan {:.3} ms",
            row.t_recall_ms,
            row.t_dense_scan_ms
        );
        rows.push(row);
    }
    Ok(rows)
}

pub fn scaling_csv(rows: &[ScalingRow]) -> String {
    let mut out = String::from("n,t_recall_ms,t_dense_scan_ms,mean_decode_steps,mean_candidates\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.n, r.t_recall_ms, r.t_dense_scan_ms, r.mean_decode_steps, r.mean_candidates
        );
    }
    out
}

/// A tokenizer whose codebooks come from k-means on residuals alone, with no
/// gradient training. Enough to give a realistic spread of IDs for timing.
pub fn kmeans_only_state(
    config: TrainConfig,
    videos: &VideoStore,
    queries: &QueryStore,
    exec: Exec,
) -> Result<TrainState> {
    let data = TrainData::new(videos, queries)?;
    let mut state = TrainState::new(config, data.dim())?;
    for m in 0..state.config.num_layers {
        state.progress.layer = m;
        state.init_current_layer(&data, exec)?;
    }
    state.progress.layer = 0;
    Ok(state)
}

/// Videos used to fit the k-means tokenizer in [`synthetic_scaling`].
pub const SCALING_FIT_VIDEOS: usize = 2000;

/// Scaling benchmark on synthetic corpora.
///
/// The largest corpus is generated once (one query per facet, to bound
/// memory) and every smaller corpus is a prefix of it. With `params` absent,
/// a k-means-only tokenizer is fitted on the first [`SCALING_FIT_VIDEOS`]
/// videos. Timed queries are the first `bench.queries` generated queries.
pub fn synthetic_scaling(
    synth: &SynthConfig,
    train: &TrainConfig,
    bench: &BenchConfig,
    params: Option<Params>,
    exec: Exec,
) -> Result<Vec<ScalingRow>> {
    let largest = bench.corpus_sizes.iter().copied().max().unwrap_or(0);
    if largest == 0 {
        return Err(Error::Config(
            "corpus sizes must be a non-empty list of positive sizes".into(),
        ));
    }
    let corpus = synthgen::generate(&SynthConfig {
        n_videos: largest,
        queries_per_facet: 1,
        ..synth.clone()
    })?;
    let params = match params {
        Some(p) => p,
        None => {
            let n = SCALING_FIT_VIDEOS.min(largest);
            let videos = VideoStore::new(synth.feature_dim, corpus.videos.records()[..n].to_vec())?;
            let ids: std::collections::HashSet<u64> = videos.records().iter().map(|r| r.video_id).collect();
            let qs = corpus
                .queries
                .records()
                .iter()
                .filter(|q| ids.contains(&q.target_video_id))
                .cloned()
                .collect();
            let queries = QueryStore::new(synth.feature_dim, qs)?;
            kmeans_only_state(train.clone(), &videos, &queries, exec)?.params
        }
    };
    let queries: Vec<Vec<f64>> = query_vectors(&corpus.queries, bench.queries)?
        .into_iter()
        .map(|(_, _, q)| q)
        .collect();
    scaling_bench(bench, &queries, |n| {
        let videos = VideoStore::new(synth.feature_dim, corpus.videos.records()[..n].to_vec())?;
        Engine::build(params.clone(), &videos, exec)
    })
}

/// Everything an end-to-end synthetic experiment produces.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub state: TrainState,
    pub train: Split,
    pub test: Split,
    pub report: EvalReport,
}

/// gen-data → split → train → index → eval, all from configs.
pub fn run_experiment(
    synth: &SynthConfig,
    train: &TrainConfig,
    search: &SearchConfig,
    eval: &EvalConfig,
    exec: Exec,
) -> Result<Experiment> {
    let corpus = synthgen::generate(synth)?;
    let (tr, te) = synthgen::split(&corpus.videos, &corpus.queries, synth.train_fraction, synth.seed)?;
    let state = crate::cotrainer::train(train.clone(), &tr.videos, &tr.queries, exec)?;
    let pool = eval.mode.pool(&tr.videos, &te.videos)?;
    let engine = Engine::build(state.params.clone(), &pool, exec)?;
    let report = run_eval(&engine, &te.queries, search, eval, "")?;
    Ok(Experiment {
        state,
        train: tr,
        test: te,
        report,
    })
}

/// Exhaustive dense retrieval over a pool, for reference numbers.
pub fn dense_recall(
    pool: &VideoStore,
    queries: &QueryStore,
    ks: &[usize],
    max_queries: usize,
) -> Result<BTreeMap<String, f64>> {
    let dense = DenseVideoIndex::new(pool)?;
    let qs = query_vectors(queries, max_queries)?;
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let ranked: Vec<(u64, Vec<u64>)> = qs
        .iter()
        .map(|(id, _, q)| (*id, dense.scan(q, kmax).into_iter().map(|r| r.0).collect()))
        .collect();
    let truth: HashMap<u64, u64> = qs.iter().map(|(q, t, _)| (*q, *t)).collect();
    ks.iter()
        .map(|&k| Ok((format!("R@{k}"), recall_at_k(&ranked, &truth, k)?)))
        .collect()
}
