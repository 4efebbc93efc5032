//! Progressive co-training.
//!
//! For each codebook layer `m` in turn: freeze layers `< m`, run the
//! cross-modal alignment phase, initialize layer `m` by k-means over the
//! current residuals, then run the joint co-training phase.

use std::collections::HashMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feature_store::{QueryStore, VideoStore};
use crate::kmeans;
use crate::linalg;
use crate::model::{GroupKind, Params};
use crate::objective::{self, LossParts, LossWeights, PairRef};
use crate::optim::AdamW;
use crate::retriever::{TAU_MAX, TAU_MIN};
use crate::tokenizer;

/// How co-training obtains the codes it uses as retrieval targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Re-selected from the current tokenizer for every batch.
    #[default]
    Moving,
    /// Selected once at the start of each epoch.
    EpochFrozen,
}

/// Training hyper-parameters. The `lambda_*` defaults are engine defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub num_views: usize,
    pub num_layers: usize,
    pub codebook_size: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub beta: f64,
    pub lambda_ce: f64,
    pub lambda_hc: f64,
    pub lambda_rq: f64,
    pub lambda_rec: f64,
    /// Weight of the contrastive loss in the alignment phase.
    pub cl_weight: f64,
    /// Weight of the consistency loss in the alignment phase (layers > 1).
    pub align_hc_weight: f64,
    pub tau_init: f64,
    /// Alignment epochs for the first layer.
    pub first_align_epochs: usize,
    /// Alignment epochs for every later layer.
    pub align_epochs: usize,
    pub train_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub kmeans_iters: usize,
    pub target_mode: TargetMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            num_views: 4,
            num_layers: 3,
            codebook_size: 128,
            latent_dim: 32,
            hidden_dim: 64,
            beta: 0.25,
            lambda_ce: 1.0,
            lambda_hc: 0.5,
            lambda_rq: 1.0,
            lambda_rec: 1.0,
            cl_weight: 1.0,
            align_hc_weight: 1.0,
            tau_init: 0.07,
            first_align_epochs: 3,
            align_epochs: 1,
            train_epochs: 4,
            batch_size: 512,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            kmeans_iters: 20,
            target_mode: TargetMode::Moving,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_views", self.num_views),
            ("num_layers", self.num_layers),
            ("codebook_size", self.codebook_size),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
            ("kmeans_iters", self.kmeans_iters),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.num_views > 256 {
            return Err(Error::Config("num_views must fit in one byte".into()));
        }
        if self.codebook_size > 65535 {
            return Err(Error::Config("codebook_size must be at most 65535".into()));
        }
        if self.num_layers > 255 {
            return Err(Error::Config("num_layers must fit in one byte".into()));
        }
        // Written so that NaN fails too.
        let positive = |x: f64| x > 0.0;
        if !positive(self.learning_rate) || !positive(self.beta) {
            return Err(Error::Config("learning_rate and beta must be positive".into()));
        }
        let weights = [
            self.lambda_ce,
            self.lambda_hc,
            self.lambda_rq,
            self.lambda_rec,
            self.cl_weight,
            self.align_hc_weight,
            self.weight_decay,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if !(TAU_MIN..=TAU_MAX).contains(&self.tau_init) {
            return Err(Error::Config(format!("tau_init must lie in [{TAU_MIN}, {TAU_MAX}]")));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            ce: self.lambda_ce,
            hc: self.lambda_hc,
            rq: self.lambda_rq,
            rec: self.lambda_rec,
            beta: self.beta,
            cl: self.cl_weight,
            align_hc: self.align_hc_weight,
        }
    }

    pub fn align_epochs_for(&self, layer: usize) -> usize {
        if layer == 0 {
            self.first_align_epochs
        } else {
            self.align_epochs
        }
    }
}

/// Hard assignment of training queries to views.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub num_views: usize,
    pub dim: usize,
    /// `num_views × dim`, row-major.
    pub centroids: Vec<f64>,
    pub views: HashMap<u64, usize>,
}

impl ClusterAssignment {
    /// Rebuilds the assignment of `queries` from stored centroids.
    pub fn from_centroids(num_views: usize, dim: usize, centroids: Vec<f64>, queries: &QueryStore) -> Self {
        let views = queries
            .records()
            .iter()
            .map(|q| {
                (
                    q.query_id,
                    kmeans::nearest(&centroids, dim, &linalg::to_f64(&q.features)),
                )
            })
            .collect();
        Self {
            num_views,
            dim,
            centroids,
            views,
        }
    }

    pub fn view_of(&self, query_id: u64) -> Option<usize> {
        self.views.get(&query_id).copied()
    }
}

/// Clusters query features into `num_views` groups by k-means.
pub fn cluster_queries(queries: &QueryStore, num_views: usize, seed: u64, iters: usize) -> Result<ClusterAssignment> {
    if queries.len() < num_views {
        return Err(Error::InvalidInput(format!(
            "{} queries cannot fill {num_views} clusters",
            queries.len()
        )));
    }
    let pts: Vec<Vec<f64>> = queries.records().iter().map(|q| linalg::to_f64(&q.features)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[0xC1u64]));
    let mut centroids = kmeans::kmeans(&pts, num_views, iters.max(1), &mut rng)?.centroids;
    linalg::snap_f32(&mut centroids);
    Ok(ClusterAssignment::from_centroids(
        num_views,
        queries.dimension(),
        centroids,
        queries,
    ))
}

/// Result of initializing one codebook layer.
#[derive(Debug, Clone)]
pub struct LayerInit {
    /// `K × d_z`, row-major, single-precision representable.
    pub entries: Vec<f64>,
    /// Fewer residuals than entries; jittered copies were added.
    pub padded: bool,
}

/// k-means++ seeded k-means over residual vectors.
pub fn init_codebook_layer(residuals: &[Vec<f64>], size: usize, seed: u64, iters: usize) -> Result<LayerInit> {
    if residuals.is_empty() {
        return Err(Error::InvalidInput(
            "no residuals to initialize a codebook layer".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = residuals.to_vec();
    let padded = pts.len() < size;
    if padded {
        log::warn!(
            "{} residuals for {size} codebook entries; padding with jitter",
            pts.len()
        );
        let scale = residuals.iter().map(|r| linalg::norm(r)).sum::<f64>() / residuals.len() as f64 * 1e-2 + 1e-6;
        while pts.len() < size {
            let base = &residuals[pts.len() % residuals.len()];
            let v = base
                .iter()
                .map(|x| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    x + scale * g
                })
                .collect();
            pts.push(v);
        }
    }
    let km = kmeans::kmeans(&pts, size, iters.max(1), &mut rng)?;
    let mut entries = km.centroids;
    linalg::snap_f32(&mut entries);
    Ok(LayerInit { entries, padded })
}

/// Normalized, index-aligned training data.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub videos: Vec<Vec<f64>>,
    pub video_ids: Vec<u64>,
    pub queries: Vec<Vec<f64>>,
    pub query_ids: Vec<u64>,
    /// `(video index, query index)` for every query.
    pub pairs: Vec<(usize, usize)>,
    pub query_store: QueryStore,
}

impl TrainData {
    /// Normalizes both stores and pairs each query with its target video.
    pub fn new(videos: &VideoStore, queries: &QueryStore) -> Result<Self> {
        if videos.dimension() != queries.dimension() {
            return Err(Error::DimensionMismatch {
                expected: videos.dimension(),
                got: queries.dimension(),
            });
        }
        queries.check_targets(videos)?;
        let (videos, _) = videos.clone().normalize(Default::default())?;
        let (queries, _) = queries.clone().normalize(Default::default())?;
        let index: HashMap<u64, usize> = videos
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| (r.video_id, i))
            .collect();
        let pairs = queries
            .records()
            .iter()
            .enumerate()
            .map(|(qi, q)| (index[&q.target_video_id], qi))
            .collect();
        Ok(Self {
            videos: videos.records().iter().map(|r| linalg::to_f64(&r.features)).collect(),
            video_ids: videos.records().iter().map(|r| r.video_id).collect(),
            queries: queries.records().iter().map(|r| linalg::to_f64(&r.features)).collect(),
            query_ids: queries.records().iter().map(|r| r.query_id).collect(),
            pairs,
            query_store: queries,
        })
    }

    pub fn dim(&self) -> usize {
        self.query_store.dimension()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Align,
    InitCodebook,
    Cotrain,
    Done,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Phase::Align => "align",
            Phase::InitCodebook => "init_codebook",
            Phase::Cotrain => "cotrain",
            Phase::Done => "done",
        };
        f.write_str(s)
    }
}

/// Position in the progressive schedule: the next unit of work to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Zero-based codebook layer.
    pub layer: usize,
    pub phase: Phase,
    /// Epochs already completed in `phase`.
    pub epoch: usize,
}

/// Per-epoch mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub layer: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub loss: LossParts,
}

/// Diagnostic state captured when a loss turns non-finite.
#[derive(Debug, Clone, PartialEq)]
pub struct AbortSnapshot {
    pub layer: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub batch: usize,
    pub loss: LossParts,
    pub tau: f64,
}

impl fmt::Display for AbortSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "non-finite loss at layer {} {} epoch {} batch {} (ce={} hc={} rq={} rec={} cl={} tau={})",
            self.layer + 1,
            self.phase,
            self.epoch,
            self.batch,
            self.loss.ce,
            self.loss.hc,
            self.loss.rq,
            self.loss.rec,
            self.loss.cl,
            self.tau
        )
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub params: Params,
    pub optimizer: AdamW,
    pub progress: Progress,
    pub clusters: Option<ClusterAssignment>,
    pub history: Vec<EpochLog>,
}

/// Mixes a seed with stream identifiers (splitmix64 finalizer).
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        h = (h ^ (h >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h = (h ^ (h >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h ^= h >> 31;
    }
    h
}

impl TrainState {
    pub fn new(config: TrainConfig, feature_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, &[0xA11]));
        let params = Params::init(&config, feature_dim, &mut rng)?;
        let sizes: Vec<usize> = params.groups().iter().map(|(_, g)| g.len()).collect();
        let optimizer = AdamW::new(config.learning_rate, config.weight_decay, &sizes);
        Ok(Self {
            config,
            params,
            optimizer,
            progress: Progress {
                layer: 0,
                phase: Phase::Align,
                epoch: 0,
            },
            clusters: None,
            history: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.progress.phase == Phase::Done
    }

    /// Number of fully trained codebook layers.
    pub fn trained_layers(&self) -> usize {
        if self.is_done() {
            self.config.num_layers
        } else {
            self.progress.layer
        }
    }

    fn apply(&mut self, grads: &Params, active: impl Fn(GroupKind) -> bool) {
        let grad_groups = grads.groups();
        let names: Vec<String> = grad_groups.iter().map(|(n, _)| n.clone()).collect();
        let flags: Vec<bool> = names.iter().map(|n| active(Params::group_kind(n))).collect();
        let decay: Vec<bool> = names
            .iter()
            .map(|n| Params::group_kind(n).is_weight_decayed(n))
            .collect();
        let g: Vec<&[f64]> = grad_groups.iter().map(|(_, g)| *g).collect();
        let mut groups = self.params.groups_mut();
        let mut slices: Vec<&mut [f64]> = groups.iter_mut().map(|(_, s)| &mut **s).collect();
        self.optimizer.step(&mut slices, &g, &flags, &decay);
        self.params.tau = self.params.tau.clamp(TAU_MIN, TAU_MAX);
    }

    fn group_index(&self, name: &str) -> usize {
        self.params
            .groups()
            .iter()
            .position(|(n, _)| n == name)
            .expect("known parameter group")
    }

    fn epoch_rng(&self) -> ChaCha8Rng {
        let p = self.progress;
        let phase = p.phase as u64;
        ChaCha8Rng::seed_from_u64(mix(self.config.seed, &[p.layer as u64, phase, p.epoch as u64]))
    }

    fn batches(&self, n: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.epoch_rng());
        let bs = self.config.batch_size.min(n.max(1));
        order.chunks(bs).map(|c| c.to_vec()).collect()
    }

    fn view_of(&self, data: &TrainData, qi: usize) -> usize {
        self.clusters
            .as_ref()
            .and_then(|c| c.view_of(data.query_ids[qi]))
            .unwrap_or(0)
    }

    fn abort(&self, batch: usize, loss: LossParts) -> Error {
        Error::NumericalAbort(Box::new(AbortSnapshot {
            layer: self.progress.layer,
            phase: self.progress.phase,
            epoch: self.progress.epoch,
            batch,
            loss,
            tau: self.params.tau,
        }))
    }

    /// Runs one alignment epoch at the current layer.
    pub fn align_epoch(&mut self, data: &TrainData, exec: Exec) -> Result<LossParts> {
        let layer = self.progress.layer;
        let w = self.config.weights();
        let mut mean = LossParts::default();
        let mut seen = 0usize;
        for (b, batch) in self.batches(data.pairs.len()).into_iter().enumerate() {
            if batch.len() < 2 {
                continue;
            }
            let pairs: Vec<PairRef<'_>> = batch
                .iter()
                .map(|&i| {
                    let (v, q) = data.pairs[i];
                    PairRef {
                        video: &data.videos[v],
                        query: &data.queries[q],
                        view: self.view_of(data, q),
                        codes: None,
                    }
                })
                .collect();
            let (loss, grads) = objective::align_batch(&self.params, &pairs, layer, &w, exec)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(self.abort(b, loss));
            }
            self.apply(&grads, |k| {
                matches!(k, GroupKind::Encoder | GroupKind::Retriever | GroupKind::Temperature)
            });
            accumulate(&mut mean, &loss, batch.len(), &mut seen);
        }
        Ok(mean)
    }

    fn frozen_codes(&self, data: &TrainData, exec: Exec) -> Result<Vec<Vec<Vec<u16>>>> {
        let depth = self.progress.layer + 1;
        exec.map(&data.videos, |v| {
            tokenizer::encode_views(v, &self.params.encoders)?
                .iter()
                .map(|z| tokenizer::quantize_depth(z, &self.params.codebook, depth).map(|t| t.codes))
                .collect::<Result<Vec<_>>>()
        })
        .into_iter()
        .collect()
    }

    /// Runs one co-training epoch at the current layer.
    pub fn cotrain_epoch(&mut self, data: &TrainData, exec: Exec) -> Result<LossParts> {
        let layer = self.progress.layer;
        let w = self.config.weights();
        let frozen = match self.config.target_mode {
            TargetMode::EpochFrozen => Some(self.frozen_codes(data, exec)?),
            TargetMode::Moving => None,
        };
        let mut reseed_rng = ChaCha8Rng::seed_from_u64(mix(
            self.config.seed,
            &[layer as u64, 0x5EED, self.progress.epoch as u64],
        ));
        let mut mean = LossParts::default();
        let mut seen = 0usize;
        for (b, batch) in self.batches(data.pairs.len()).into_iter().enumerate() {
            let pairs: Vec<PairRef<'_>> = batch
                .iter()
                .map(|&i| {
                    let (v, q) = data.pairs[i];
                    PairRef {
                        video: &data.videos[v],
                        query: &data.queries[q],
                        view: self.view_of(data, q),
                        codes: frozen.as_ref().map(|f| f[v].as_slice()),
                    }
                })
                .collect();
            let (loss, grads) = objective::cotrain_batch(&self.params, &pairs, layer, &w, exec)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(self.abort(b, loss));
            }
            self.apply(&grads, |k| match k {
                GroupKind::Codebook(m) => m == layer,
                _ => true,
            });
            let n = self.params.codebook.reseed_collapsed(layer, &mut reseed_rng);
            if n > 0 {
                log::warn!("re-seeded {n} collapsed entries in codebook layer {}", layer + 1);
            }
            accumulate(&mut mean, &loss, batch.len(), &mut seen);
        }
        Ok(mean)
    }

    /// Residuals entering the current layer for every video and view.
    pub fn layer_residuals(&self, data: &TrainData, exec: Exec) -> Result<Vec<Vec<f64>>> {
        let layer = self.progress.layer;
        let per_video = exec
            .map(&data.videos, |v| -> Result<Vec<Vec<f64>>> {
                let zs = tokenizer::encode_views(v, &self.params.encoders)?;
                if layer == 0 {
                    return Ok(zs);
                }
                zs.iter()
                    .map(|z| {
                        let t = tokenizer::quantize_depth(z, &self.params.codebook, layer)?;
                        Ok(z.iter().zip(&t.quantized).map(|(a, b)| a - b).collect())
                    })
                    .collect()
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(per_video.into_iter().flatten().collect())
    }

    /// Initializes the current layer's codebook from k-means over residuals.
    pub fn init_current_layer(&mut self, data: &TrainData, exec: Exec) -> Result<LayerInit> {
        let layer = self.progress.layer;
        let residuals = self.layer_residuals(data, exec)?;
        let seed = mix(self.config.seed, &[0xC0DE, layer as u64]);
        let init = init_codebook_layer(&residuals, self.config.codebook_size, seed, self.config.kmeans_iters)?;
        self.params.codebook.layer_mut(layer).copy_from_slice(&init.entries);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, &[1]));
        self.params.codebook.reseed_collapsed(layer, &mut rng);
        let g = self.group_index(&format!("codebook.{layer}"));
        self.optimizer.reset_group(g);
        Ok(init)
    }

    /// Advances the schedule by one unit of work (one epoch or one layer init).
    pub fn step(&mut self, data: &TrainData, exec: Exec) -> Result<()> {
        if data.dim() != self.params.feature_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.params.feature_dim(),
                got: data.dim(),
            });
        }
        if self.clusters.is_none() {
            self.clusters = Some(cluster_queries(
                &data.query_store,
                self.config.num_views,
                self.config.seed,
                self.config.kmeans_iters,
            )?);
        }
        if let Some(c) = &self.clusters {
            if c.views.len() != data.query_ids.len() || data.query_ids.iter().any(|q| !c.views.contains_key(q)) {
                let centroids = c.centroids.clone();
                self.clusters = Some(ClusterAssignment::from_centroids(
                    c.num_views,
                    c.dim,
                    centroids,
                    &data.query_store,
                ));
            }
        }
        let p = self.progress;
        match p.phase {
            Phase::Align => {
                if p.epoch < self.config.align_epochs_for(p.layer) {
                    let w = self.config.weights();
                    let active = w.cl > 0.0 || (p.layer > 0 && w.align_hc > 0.0);
                    let loss = if active {
                        self.align_epoch(data, exec)?
                    } else {
                        LossParts::default()
                    };
                    self.log(loss);
                    self.progress.epoch += 1;
                } else {
                    self.progress.phase = Phase::InitCodebook;
                    self.progress.epoch = 0;
                }
            }
            Phase::InitCodebook => {
                self.init_current_layer(data, exec)?;
                self.progress.phase = Phase::Cotrain;
                self.progress.epoch = 0;
            }
            Phase::Cotrain => {
                if p.epoch < self.config.train_epochs {
                    let loss = self.cotrain_epoch(data, exec)?;
                    self.log(loss);
                    self.progress.epoch += 1;
                } else {
                    self.progress.layer += 1;
                    self.progress.epoch = 0;
                    self.progress.phase = if self.progress.layer >= self.config.num_layers {
                        Phase::Done
                    } else {
                        Phase::Align
                    };
                }
            }
            Phase::Done => {}
        }
        Ok(())
    }

    fn log(&mut self, loss: LossParts) {
        let p = self.progress;
        log::info!(
            "layer {} {} epoch {}: total {:.4} (ce {:.4} hc {:.4} rq {:.4} rec {:.4} cl {:.4}) tau {:.4}",
            p.layer + 1,
            p.phase,
            p.epoch + 1,
            loss.total,
            loss.ce,
            loss.hc,
            loss.rq,
            loss.rec,
            loss.cl,
            self.params.tau
        );
        self.history.push(EpochLog {
            layer: p.layer,
            phase: p.phase,
            epoch: p.epoch,
            loss,
        });
    }

    /// Runs the schedule to completion. `on_layer` is called after each layer
    /// finishes (the natural checkpoint boundary).
    pub fn run(
        &mut self,
        data: &TrainData,
        exec: Exec,
        mut on_layer: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        while !self.is_done() {
            let before = self.progress.layer;
            self.step(data, exec)?;
            if self.progress.layer != before {
                on_layer(self)?;
            }
        }
        Ok(())
    }

    /// Runs until `progress.layer` reaches `layer` (or training is done).
    pub fn run_until_layer(&mut self, data: &TrainData, exec: Exec, layer: usize) -> Result<()> {
        while !self.is_done() && self.progress.layer < layer {
            self.step(data, exec)?;
        }
        Ok(())
    }
}

fn accumulate(mean: &mut LossParts, loss: &LossParts, n: usize, seen: &mut usize) {
    let total = *seen + n;
    let a = *seen as f64 / total as f64;
    let b = n as f64 / total as f64;
    mean.ce = mean.ce * a + loss.ce * b;
    mean.hc = mean.hc * a + loss.hc * b;
    mean.rq = mean.rq * a + loss.rq * b;
    mean.rec = mean.rec * a + loss.rec * b;
    mean.cl = mean.cl * a + loss.cl * b;
    mean.total = mean.total * a + loss.total * b;
    *seen = total;
}

/// Trains a fresh model on the given stores.
pub fn train(config: TrainConfig, videos: &VideoStore, queries: &QueryStore, exec: Exec) -> Result<TrainState> {
    let data = TrainData::new(videos, queries)?;
    let mut state = TrainState::new(config, data.dim())?;
    state.run(&data, exec, |_| Ok(()))?;
    Ok(state)
}
