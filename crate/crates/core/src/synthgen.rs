//! Seeded synthetic corpora with controlled polysemy.
//!
//! Every video is built from `F` unit facet vectors. Facet `j` of every video
//! lives mostly in the `j`-th block of the feature dimensions, with a
//! configurable share of its energy spread over the whole space, so facets of
//! the same kind are related across videos while facets of one video are
//! nearly orthogonal. Within a block, each facet is a jittered copy of one of
//! a few topic prototypes, which gives the corpus semantic cluster structure.
//! A video's feature is the normalized mean of its facets; each query is one
//! facet plus isotropic noise.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{QueryRecord, QueryStore, VideoRecord, VideoStore};

const MAX_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_videos: usize,
    pub facets_per_video: usize,
    pub feature_dim: usize,
    /// Query noise scale relative to the unit facet.
    pub facet_noise: f64,
    pub queries_per_facet: usize,
    /// Minimum pairwise angle between the facets of one video, in degrees.
    pub min_facet_angle_deg: f64,
    /// Share of a facet's direction drawn from the whole space rather than its block, in [0, 1].
    pub facet_spread: f64,
    /// Prototypes per facet slot; 0 draws every facet independently.
    pub topics_per_facet: usize,
    /// Share of a facet's in-block direction that deviates from its prototype, in [0, 1].
    pub topic_jitter: f64,
    pub seed: u64,
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_videos: 1000,
            facets_per_video: 4,
            feature_dim: 64,
            facet_noise: 0.5,
            queries_per_facet: 8,
            min_facet_angle_deg: 60.0,
            facet_spread: 0.3,
            topics_per_facet: 16,
            topic_jitter: 0.5,
            seed: 0,
            train_fraction: 0.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.facets_per_video == 0 || self.feature_dim == 0 || self.queries_per_facet == 0 {
            return Err(Error::Config("synthetic corpus sizes must be positive".into()));
        }
        if self.feature_dim < self.facets_per_video {
            return Err(Error::Config(format!(
                "feature_dim {} is smaller than facets_per_video {}",
                self.feature_dim, self.facets_per_video
            )));
        }
        if !(self.facet_noise >= 0.0 && self.facet_noise.is_finite()) {
            return Err(Error::Config("facet_noise must be finite and non-negative".into()));
        }
        if !(0.0..180.0).contains(&self.min_facet_angle_deg) {
            return Err(Error::Config("min_facet_angle_deg must lie in [0, 180)".into()));
        }
        if !(0.0..=1.0).contains(&self.facet_spread) || !(0.0..=1.0).contains(&self.topic_jitter) {
            return Err(Error::Config("facet_spread and topic_jitter must lie in [0, 1]".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Generated stores plus hidden labels that training never sees.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub videos: VideoStore,
    pub queries: QueryStore,
    /// `facets[v][j]`: unit facet `j` of the `v`-th video.
    pub facets: Vec<Vec<Vec<f32>>>,
    /// Facet index of every query.
    pub query_facet: BTreeMap<u64, usize>,
    /// `topics[v][j]`: prototype behind facet `j` of the `v`-th video.
    pub topics: Vec<Vec<usize>>,
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn to_unit_f32(v: &[f64]) -> Vec<f32> {
    unit(v).into_iter().map(|x| x as f32).collect()
}

fn block(j: usize, f: usize, d: usize) -> std::ops::Range<usize> {
    (j * d / f)..((j + 1) * d / f)
}

fn block_unit(rng: &mut ChaCha8Rng, j: usize, cfg: &SynthConfig) -> Vec<f64> {
    let d = cfg.feature_dim;
    let range = block(j, cfg.facets_per_video, d);
    let mut v = vec![0.0; d];
    let g = gaussian(rng, range.len());
    v[range].copy_from_slice(&g);
    unit(&v)
}

fn mix(a: &[f64], b: &[f64], share: f64) -> Vec<f64> {
    let keep = (1.0 - share * share).sqrt();
    unit(&a.iter().zip(b).map(|(x, y)| keep * x + share * y).collect::<Vec<_>>())
}

/// Draws one facet direction from block `j`, around `prototype` when given.
fn draw_facet(rng: &mut ChaCha8Rng, j: usize, prototype: Option<&[f64]>, cfg: &SynthConfig) -> Vec<f64> {
    let own = block_unit(rng, j, cfg);
    let local = match prototype {
        Some(p) => mix(p, &own, cfg.topic_jitter),
        None => own,
    };
    let global = unit(&gaussian(rng, cfg.feature_dim));
    mix(&local, &global, cfg.facet_spread)
}

/// Generates a corpus. Deterministic per seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (f, d) = (cfg.facets_per_video, cfg.feature_dim);
    let max_cos = cfg.min_facet_angle_deg.to_radians().cos();
    let mut videos = Vec::with_capacity(cfg.n_videos);
    let mut queries = Vec::with_capacity(cfg.n_videos * f * cfg.queries_per_facet);
    let mut facets = Vec::with_capacity(cfg.n_videos);
    let mut query_facet = BTreeMap::new();
    let mut topics = Vec::with_capacity(cfg.n_videos);
    let prototypes: Vec<Vec<Vec<f64>>> = (0..f)
        .map(|j| {
            (0..cfg.topics_per_facet)
                .map(|_| block_unit(&mut rng, j, cfg))
                .collect()
        })
        .collect();
    for v in 0..cfg.n_videos {
        let mut set: Vec<Vec<f64>> = Vec::with_capacity(f);
        let mut chosen = Vec::with_capacity(f);
        for (j, protos) in prototypes.iter().enumerate() {
            let topic = if cfg.topics_per_facet > 0 {
                rng.random_range(0..cfg.topics_per_facet)
            } else {
                0
            };
            chosen.push(topic);
            let prototype = protos.get(topic).map(Vec::as_slice);
            let mut attempts = 0;
            let facet = loop {
                let cand = draw_facet(&mut rng, j, prototype, cfg);
                let ok = set
                    .iter()
                    .all(|o| o.iter().zip(&cand).map(|(a, b)| a * b).sum::<f64>() <= max_cos);
                if ok {
                    break cand;
                }
                attempts += 1;
                if attempts >= MAX_ATTEMPTS {
                    return Err(Error::InfeasibleAngle(format!(
                        "no facet {j} of video {v} at least {}° from the others after {MAX_ATTEMPTS} draws",
                        cfg.min_facet_angle_deg
                    )));
                }
            };
            set.push(facet);
        }
        let mut sum = vec![0.0; d];
        for facet in &set {
            for (s, x) in sum.iter_mut().zip(facet) {
                *s += x;
            }
        }
        videos.push(VideoRecord {
            video_id: v as u64,
            features: to_unit_f32(&sum),
        });
        for (j, facet) in set.iter().enumerate() {
            for i in 0..cfg.queries_per_facet {
                let noise = gaussian(&mut rng, d);
                let scale = cfg.facet_noise / (d as f64).sqrt();
                let q: Vec<f64> = facet.iter().zip(&noise).map(|(a, g)| a + scale * g).collect();
                let query_id = ((v * f + j) * cfg.queries_per_facet + i) as u64;
                query_facet.insert(query_id, j);
                queries.push(QueryRecord {
                    query_id,
                    target_video_id: v as u64,
                    text: None,
                    features: to_unit_f32(&q),
                });
            }
        }
        facets.push(set.iter().map(|x| to_unit_f32(x)).collect());
        topics.push(chosen);
    }
    Ok(SynthCorpus {
        videos: VideoStore::new(d, videos)?.normalize(Default::default())?.0,
        queries: QueryStore::new(d, queries)?.normalize(Default::default())?.0,
        facets,
        query_facet,
        topics,
    })
}

/// One side of a train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub videos: VideoStore,
    pub queries: QueryStore,
}

/// Splits videos at random into train and test; each query follows its
/// target. Records keep their original relative order.
pub fn split(videos: &VideoStore, queries: &QueryStore, fraction: f64, seed: u64) -> Result<(Split, Split)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config("split fraction must lie in (0, 1)".into()));
    }
    let n = videos.len();
    let n_train = (n as f64 * fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidInput(format!(
            "splitting {n} videos at {fraction} leaves one side empty"
        )));
    }
    let mut order: Vec<u64> = videos.records().iter().map(|r| r.video_id).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train_ids: HashSet<u64> = order[..n_train].iter().copied().collect();
    let side = |train: bool| -> Result<Split> {
        let v = videos
            .records()
            .iter()
            .filter(|r| train_ids.contains(&r.video_id) == train)
            .cloned()
            .collect();
        let q = queries
            .records()
            .iter()
            .filter(|r| train_ids.contains(&r.target_video_id) == train)
            .cloned()
            .collect();
        Ok(Split {
            videos: VideoStore::new(videos.dimension(), v)?,
            queries: QueryStore::new(queries.dimension(), q)?,
        })
    };
    Ok((side(true)?, side(false)?))
}

#[derive(Serialize)]
struct SidecarQuery {
    query_id: u64,
    facet: usize,
}

#[derive(Serialize)]
struct SidecarLine {
    video_id: u64,
    facet_ids: Vec<u64>,
    topics: Vec<usize>,
    queries: Vec<SidecarQuery>,
}

/// Writes the hidden labels as line-delimited JSON, one line per video.
/// Facet ids are global: `video index × F + facet`.
pub fn write_sidecar(corpus: &SynthCorpus, path: &Path) -> Result<()> {
    let io = |e: std::io::Error| Error::io(path, e);
    let file = std::fs::File::create(path).map_err(io)?;
    let mut out = std::io::BufWriter::new(file);
    let f = corpus.facets.first().map_or(0, Vec::len) as u64;
    let mut by_video: BTreeMap<u64, Vec<SidecarQuery>> = BTreeMap::new();
    for q in corpus.queries.records() {
        by_video.entry(q.target_video_id).or_default().push(SidecarQuery {
            query_id: q.query_id,
            facet: corpus.query_facet[&q.query_id],
        });
    }
    for (i, v) in corpus.videos.records().iter().enumerate() {
        let line = SidecarLine {
            video_id: v.video_id,
            facet_ids: (0..f).map(|j| i as u64 * f + j).collect(),
            topics: corpus.topics[i].clone(),
            queries: by_video.remove(&v.video_id).unwrap_or_default(),
        };
        serde_json::to_writer(&mut out, &line).map_err(|e| io(e.into()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_videos: 20,
            queries_per_facet: 3,
            feature_dim: 16,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn shapes_and_unit_norm() {
        let c = generate(&small()).unwrap();
        assert_eq!(c.videos.len(), 20);
        assert_eq!(c.queries.len(), 20 * 4 * 3);
        for r in c.videos.records() {
            let n: f64 = r.features.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        for q in c.queries.records() {
            let n: f64 = q.features.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
            assert!(q.text.is_none());
        }
    }

    #[test]
    fn single_noiseless_facet_queries_equal_their_video() {
        let cfg = SynthConfig {
            facets_per_video: 1,
            facet_noise: 0.0,
            ..small()
        };
        let c = generate(&cfg).unwrap();
        for q in c.queries.records() {
            assert_eq!(q.features, c.videos.get(q.target_video_id).unwrap().features);
        }
    }

    #[test]
    fn infeasible_angle_is_reported() {
        let cfg = SynthConfig {
            facets_per_video: 8,
            feature_dim: 8,
            facet_spread: 1.0,
            min_facet_angle_deg: 179.0,
            ..small()
        };
        assert!(matches!(generate(&cfg), Err(Error::InfeasibleAngle(_))));
        let bad = SynthConfig {
            feature_dim: 2,
            ..small()
        };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn split_partitions_videos_and_queries() {
        let cfg = SynthConfig {
            n_videos: 100,
            ..small()
        };
        let c = generate(&cfg).unwrap();
        let (tr, te) = split(&c.videos, &c.queries, 0.5, 3).unwrap();
        assert_eq!((tr.videos.len(), te.videos.len()), (50, 50));
        assert_eq!(tr.queries.len() + te.queries.len(), c.queries.len());
        tr.queries.check_targets(&tr.videos).unwrap();
        te.queries.check_targets(&te.videos).unwrap();
        let mut all: Vec<u64> = tr
            .videos
            .records()
            .iter()
            .chain(te.videos.records())
            .map(|r| r.video_id)
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split(&c.videos, &c.queries, 1.0, 0).is_err());
        assert!(split(&c.videos, &c.queries, 0.001, 0).is_err());
    }
}
