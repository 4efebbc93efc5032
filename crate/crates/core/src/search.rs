//! Online retrieval: trie-constrained beam search, order-preserving
//! deduplication, and dense re-ranking.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feature_store::VideoStore;
use crate::index::{Posting, TrieIndex};
use crate::linalg;
use crate::model::{self, Params};
use crate::retriever;
use crate::tokenizer::SemanticId;

/// A complete or partial code sequence with its cumulative log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub codes: Vec<u16>,
    pub log_prob: f64,
}

/// Descending log-probability, then ascending code sequence.
fn beam_order(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob).then_with(|| a.codes.cmp(&b.codes))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutput {
    /// At most `B` complete IDs, best first.
    pub hypotheses: Vec<Hypothesis>,
    /// Number of retriever decoding steps evaluated.
    pub decode_steps: usize,
}

fn check_compatible(trie: &TrieIndex, params: &Params) -> Result<()> {
    if trie.is_empty() {
        return Err(Error::EmptyIndex);
    }
    let cb = &params.codebook;
    if trie.num_layers() != cb.num_layers() || trie.codebook_size() != cb.size() {
        return Err(Error::Config(format!(
            "index has M={} K={}, model has M={} K={}",
            trie.num_layers(),
            trie.codebook_size(),
            cb.num_layers(),
            cb.size()
        )));
    }
    Ok(())
}

/// Beam search of exactly `M` steps; at every step only codes that keep the
/// prefix inside the trie are eligible. `query` must be unit-normalized.
pub fn beam_search(query: &[f64], trie: &TrieIndex, params: &Params, beam_size: usize) -> Result<BeamOutput> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    check_compatible(trie, params)?;
    let ctx = params.retriever.context(query)?;
    let mut beams = vec![Hypothesis {
        codes: Vec::new(),
        log_prob: 0.0,
    }];
    let mut decode_steps = 0;
    for m in 0..trie.num_layers() {
        // Expansions as (parent, code, log_prob); codes are materialized only
        // for the survivors.
        let mut next: Vec<(usize, u16, f64)> = Vec::new();
        for (parent, hyp) in beams.iter().enumerate() {
            let allowed = trie.allowed_next(&hyp.codes);
            if allowed.is_empty() {
                continue;
            }
            let h = retriever::decode_step_with_context(&ctx, &hyp.codes, &params.retriever, &params.codebook)?;
            decode_steps += 1;
            let dist = retriever::code_probs(&h, &params.codebook, m, params.tau);
            next.extend(
                allowed
                    .into_iter()
                    .map(|code| (parent, code, hyp.log_prob + dist.log_probs[code as usize])),
            );
        }
        // Same total order as `beam_order` on the extended code sequences.
        let order = |a: &(usize, u16, f64), b: &(usize, u16, f64)| {
            b.2.total_cmp(&a.2)
                .then_with(|| beams[a.0].codes.cmp(&beams[b.0].codes))
                .then_with(|| a.1.cmp(&b.1))
        };
        if next.len() > beam_size {
            next.select_nth_unstable_by(beam_size - 1, order);
            next.truncate(beam_size);
        }
        next.sort_by(order);
        beams = next
            .into_iter()
            .map(|(parent, code, log_prob)| {
                let mut codes = Vec::with_capacity(m + 1);
                codes.extend_from_slice(&beams[parent].codes);
                codes.push(code);
                Hypothesis { codes, log_prob }
            })
            .collect();
    }
    Ok(BeamOutput {
        hypotheses: beams,
        decode_steps,
    })
}

/// Scores every ID in the trie by its exact joint log-probability, sorted in
/// beam order. The reference that beam search must match when `B` covers
/// every ID.
pub fn exhaustive_scores(query: &[f64], trie: &TrieIndex, params: &Params) -> Result<Vec<Hypothesis>> {
    check_compatible(trie, params)?;
    let ctx = params.retriever.context(query)?;
    let mut cache: HashMap<Vec<u16>, Vec<f64>> = HashMap::new();
    let mut out = Vec::new();
    for (id, _) in trie.leaves() {
        let codes = id.codes();
        let mut lp = 0.0;
        for m in 0..codes.len() {
            let prefix = &codes[..m];
            if !cache.contains_key(prefix) {
                let h = retriever::decode_step_with_context(&ctx, prefix, &params.retriever, &params.codebook)?;
                let dist = retriever::code_probs(&h, &params.codebook, m, params.tau);
                cache.insert(prefix.to_vec(), dist.log_probs);
            }
            lp += cache[prefix][codes[m] as usize];
        }
        out.push(Hypothesis {
            codes: codes.to_vec(),
            log_prob: lp,
        });
    }
    out.sort_by(beam_order);
    Ok(out)
}

/// A recalled video with the ID that first produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    pub video_id: u64,
    pub view_id: u8,
    pub semantic_id: SemanticId,
    pub log_prob: f64,
}

/// Flattens posting lists in the given order and keeps the first occurrence
/// of every video. Within one list, postings are in ascending video order.
pub fn dedup_candidates<'a>(ranked: impl IntoIterator<Item = (&'a Hypothesis, &'a [Posting])>) -> Vec<Candidate> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (hyp, postings) in ranked {
        for p in postings {
            if seen.insert(p.video_id) {
                out.push(Candidate {
                    video_id: p.video_id,
                    view_id: p.view_id,
                    semantic_id: SemanticId(hyp.codes.clone()),
                    log_prob: hyp.log_prob,
                });
            }
        }
    }
    out
}

/// Scores a candidate video against a query. Implementations must be pure.
pub trait Reranker: Send + Sync {
    fn score(&self, query: &[f64], video_id: u64) -> Result<f64>;
}

/// Unit-normalized video vectors held in memory.
#[derive(Debug, Clone)]
pub struct DenseVideoIndex {
    dim: usize,
    ids: Vec<u64>,
    vectors: Vec<f32>,
    position: HashMap<u64, usize>,
}

impl DenseVideoIndex {
    pub fn new(videos: &VideoStore) -> Result<Self> {
        let store = if videos.is_normalized() {
            videos.clone()
        } else {
            videos.clone().normalize(Default::default())?.0
        };
        let ids: Vec<u64> = store.records().iter().map(|r| r.video_id).collect();
        let position = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let vectors = store
            .records()
            .iter()
            .flat_map(|r| r.features.iter().copied())
            .collect();
        Ok(Self {
            dim: store.dimension(),
            ids,
            vectors,
            position,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn vector(&self, video_id: u64) -> Option<&[f32]> {
        let i = *self.position.get(&video_id)?;
        Some(&self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    /// Exhaustive cosine scan over every video: the dense baseline.
    pub fn scan(&self, query: &[f64], top_k: usize) -> Vec<(u64, f64)> {
        let mut scored: Vec<(u64, f64)> = self
            .ids
            .iter()
            .zip(self.vectors.chunks_exact(self.dim))
            .map(|(&id, v)| (id, dot_mixed(query, v)))
            .collect();
        if top_k < scored.len() && top_k > 0 {
            scored.select_nth_unstable_by(top_k - 1, score_order);
            scored.truncate(top_k);
        }
        sort_scored(&mut scored);
        scored.truncate(top_k);
        scored
    }
}

fn dot_mixed(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, &y)| x * y as f64).sum()
}

impl Reranker for DenseVideoIndex {
    /// Cosine similarity; both sides are unit norm.
    fn score(&self, query: &[f64], video_id: u64) -> Result<f64> {
        let v = self.vector(video_id).ok_or(Error::MissingVideo(video_id))?;
        Ok(dot_mixed(query, v))
    }
}

/// Descending score, then ascending video id.
fn score_order(a: &(u64, f64), b: &(u64, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

fn sort_scored(scored: &mut [(u64, f64)]) {
    scored.sort_by(score_order);
}

/// Orders candidates by reranker score and keeps the best `top_k`.
pub fn rerank(query: &[f64], candidates: &[u64], reranker: &dyn Reranker, top_k: usize) -> Result<Vec<(u64, f64)>> {
    let mut scored = candidates
        .iter()
        .map(|&id| reranker.score(query, id).map(|s| (id, s)))
        .collect::<Result<Vec<_>>>()?;
    sort_scored(&mut scored);
    scored.truncate(top_k);
    Ok(scored)
}

/// Where a returned video came from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub semantic_id: SemanticId,
    pub view_id: u8,
    pub log_prob: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrievalResult {
    pub video_ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub provenance: Vec<Provenance>,
    /// Distinct videos recalled before re-ranking.
    pub candidate_count: usize,
    pub decode_steps: usize,
    pub t_recall_ms: f64,
    pub t_rerank_ms: f64,
    /// Always exactly `t_recall_ms + t_rerank_ms`.
    pub t_latency_ms: f64,
}

/// Retrieval settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchConfig {
    pub beam_size: usize,
    pub top_k: usize,
    /// Keep at most this many deduplicated candidates, in beam order; 0 keeps all.
    pub max_candidates: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            beam_size: 100,
            top_k: 10,
            max_candidates: 0,
        }
    }
}

/// Trained parameters, the trie over a video pool, and the pool's vectors.
pub struct Engine {
    pub params: Params,
    pub trie: TrieIndex,
    pub reranker: Box<dyn Reranker>,
    dense: DenseVideoIndex,
}

impl Engine {
    /// Tokenizes `videos` and indexes them.
    pub fn build(params: Params, videos: &VideoStore, exec: Exec) -> Result<Self> {
        let normalized = videos.clone().normalize(Default::default())?.0;
        let dense = DenseVideoIndex::new(&normalized)?;
        let ids = model::tokenize_corpus(&normalized, &params, exec)?;
        let trie = TrieIndex::build(&ids, params.codebook.num_layers(), params.codebook.size())?;
        Ok(Self::from_parts(params, trie, dense))
    }

    /// Assembles an engine from a prebuilt index.
    pub fn from_parts(params: Params, trie: TrieIndex, dense: DenseVideoIndex) -> Self {
        Self {
            params,
            trie,
            reranker: Box::new(dense.clone()),
            dense,
        }
    }

    pub fn dense(&self) -> &DenseVideoIndex {
        &self.dense
    }

    /// Generative recall followed by re-ranking for one query.
    pub fn retrieve(&self, query: &[f64], cfg: &SearchConfig) -> Result<RetrievalResult> {
        let q = unit(query)?;
        let start = Instant::now();
        let beam = beam_search(&q, &self.trie, &self.params, cfg.beam_size)?;
        let mut candidates = dedup_candidates(beam.hypotheses.iter().map(|h| (h, self.trie.resolve(&h.codes))));
        if cfg.max_candidates > 0 {
            candidates.truncate(cfg.max_candidates);
        }
        let recalled = start.elapsed();
        let start = Instant::now();
        let ids: Vec<u64> = candidates.iter().map(|c| c.video_id).collect();
        let ranked = rerank(&q, &ids, self.reranker.as_ref(), cfg.top_k)?;
        let reranked = start.elapsed();

        let by_id: HashMap<u64, &Candidate> = candidates.iter().map(|c| (c.video_id, c)).collect();
        let provenance = ranked
            .iter()
            .map(|&(id, score)| {
                let c = by_id[&id];
                Provenance {
                    semantic_id: c.semantic_id.clone(),
                    view_id: c.view_id,
                    log_prob: c.log_prob,
                    score,
                }
            })
            .collect();
        let t_recall_ms = recalled.as_secs_f64() * 1e3;
        let t_rerank_ms = reranked.as_secs_f64() * 1e3;
        Ok(RetrievalResult {
            video_ids: ranked.iter().map(|r| r.0).collect(),
            scores: ranked.iter().map(|r| r.1).collect(),
            provenance,
            candidate_count: candidates.len(),
            decode_steps: beam.decode_steps,
            t_recall_ms,
            t_rerank_ms,
            t_latency_ms: t_recall_ms + t_rerank_ms,
        })
    }

    /// Retrieves many queries; the parallel path is for throughput only.
    pub fn retrieve_all(&self, queries: &[Vec<f64>], cfg: &SearchConfig, exec: Exec) -> Result<Vec<RetrievalResult>> {
        exec.map(queries, |q| self.retrieve(q, cfg)).into_iter().collect()
    }
}

/// Unit-normalizes a query vector.
pub fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = linalg::norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::InvalidInput("query vector has zero or non-finite norm".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// One line of search output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchRecord {
    pub query_id: u64,
    pub video_ids: Vec<u64>,
    pub scores: Vec<f64>,
    pub candidate_count: usize,
    pub t_recall_ms: f64,
    pub t_rerank_ms: f64,
    pub t_latency_ms: f64,
    pub config_hash: String,
}

impl SearchRecord {
    pub fn new(query_id: u64, result: &RetrievalResult, config_hash: &str) -> Self {
        Self {
            query_id,
            video_ids: result.video_ids.clone(),
            scores: result.scores.clone(),
            candidate_count: result.candidate_count,
            t_recall_ms: result.t_recall_ms,
            t_rerank_ms: result.t_rerank_ms,
            t_latency_ms: result.t_latency_ms,
            config_hash: config_hash.to_string(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::VideoRecord;

    struct Fixed(HashMap<u64, f64>);

    impl Reranker for Fixed {
        fn score(&self, _: &[f64], id: u64) -> Result<f64> {
            self.0.get(&id).copied().ok_or(Error::MissingVideo(id))
        }
    }

    fn hyp(codes: &[u16], lp: f64) -> Hypothesis {
        Hypothesis {
            codes: codes.to_vec(),
            log_prob: lp,
        }
    }

    fn post(v: u64) -> Posting {
        Posting {
            video_id: v,
            view_id: 0,
        }
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let (a, b) = (hyp(&[0], -0.1), hyp(&[1], -0.2));
        let pa = [post(1)];
        let pb = [post(1), post(2)];
        let out = dedup_candidates([(&a, &pa[..]), (&b, &pb[..])]);
        let ids: Vec<u64> = out.iter().map(|c| c.video_id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(out[1].semantic_id, SemanticId(vec![1]));
        assert_eq!(dedup_candidates([(&a, &pa[..])]).len(), 1);
    }

    #[test]
    fn rerank_orders_by_score_then_id() {
        let r = Fixed([(1, 0.9), (2, 0.1), (3, 0.5), (4, 0.5)].into_iter().collect());
        let out = rerank(&[], &[1, 2, 3], &r, 10).unwrap();
        assert_eq!(out.iter().map(|x| x.0).collect::<Vec<_>>(), vec![1, 3, 2]);
        let out = rerank(&[], &[4, 3, 2], &r, 2).unwrap();
        assert_eq!(out, vec![(3, 0.5), (4, 0.5)]);
        assert_eq!(rerank(&[], &[2], &r, 5).unwrap(), vec![(2, 0.1)]);
        assert!(matches!(rerank(&[], &[9], &r, 5), Err(Error::MissingVideo(9))));
    }

    #[test]
    fn dense_scan_and_score_agree() {
        let recs = vec![
            VideoRecord {
                video_id: 10,
                features: vec![3.0, 4.0],
            },
            VideoRecord {
                video_id: 11,
                features: vec![0.0, 2.0],
            },
        ];
        let d = DenseVideoIndex::new(&VideoStore::new(2, recs).unwrap()).unwrap();
        let q = unit(&[0.0, 1.0]).unwrap();
        let top = d.scan(&q, 5);
        assert_eq!(top[0].0, 11);
        assert!((top[1].1 - 0.8).abs() < 1e-6);
        assert_eq!(d.score(&q, 10).unwrap(), top[1].1);
    }
}
