//! Multi-view residual-quantization tokenizer.
//!
//! A pooled video feature is mapped through `N_v` view encoders to latent
//! vectors, each latent is quantized layer by layer against the shared
//! codebooks by cosine argmax, and per-view decoders reconstruct the input
//! from the quantized views.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{Mlp, MlpCache};

/// Residual norms below this are treated as exhausted.
pub const DEGENERATE_RESIDUAL: f64 = 1e-12;

/// `M` layers of `K × d_z` embeddings, shared by tokenizer and retriever.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    size: usize,
    dim: usize,
    layers: Vec<Vec<f64>>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, layers: Vec<Vec<f64>>) -> Result<Self> {
        if size == 0 || dim == 0 || layers.is_empty() {
            return Err(Error::Config(
                "codebook needs at least one layer, one entry and one dimension".into(),
            ));
        }
        if size > u16::MAX as usize {
            return Err(Error::Config(format!("codebook size {size} exceeds 65535")));
        }
        for l in &layers {
            if l.len() != size * dim {
                return Err(Error::DimensionMismatch {
                    expected: size * dim,
                    got: l.len(),
                });
            }
        }
        Ok(Self { size, dim, layers })
    }

    /// Gaussian entries scaled to unit expected norm.
    pub fn random<R: Rng>(num_layers: usize, size: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let scale = 1.0 / (dim as f64).sqrt();
        let layers = (0..num_layers)
            .map(|_| {
                (0..size * dim)
                    .map(|_| {
                        let x: f64 = StandardNormal.sample(rng);
                        (x * scale) as f32 as f64
                    })
                    .collect()
            })
            .collect();
        Self::new(size, dim, layers)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            size: self.size,
            dim: self.dim,
            layers: vec![vec![0.0; self.size * self.dim]; self.layers.len()],
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer(&self, m: usize) -> &[f64] {
        &self.layers[m]
    }

    pub fn layer_mut(&mut self, m: usize) -> &mut Vec<f64> {
        &mut self.layers[m]
    }

    pub fn layers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.layers
    }

    pub fn entry(&self, m: usize, k: usize) -> &[f64] {
        &self.layers[m][k * self.dim..(k + 1) * self.dim]
    }

    pub fn entry_mut(&mut self, m: usize, k: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.layers[m][k * d..(k + 1) * d]
    }

    /// Replaces collapsed (near zero-norm) entries of layer `m` with small
    /// random vectors. Returns how many were re-seeded.
    pub fn reseed_collapsed<R: Rng>(&mut self, m: usize, rng: &mut R) -> usize {
        let mut n = 0;
        let scale = 1e-2 / (self.dim as f64).sqrt();
        for k in 0..self.size {
            if linalg::norm(self.entry(m, k)) < 1e-8 {
                for x in self.entry_mut(m, k) {
                    let g: f64 = StandardNormal.sample(rng);
                    *x = (g * scale) as f32 as f64;
                }
                n += 1;
            }
        }
        n
    }

    /// Code with the highest cosine to `r` in layer `m`; ties go to the lower index.
    pub fn nearest_by_cosine(&self, m: usize, r: &[f64]) -> usize {
        let nr = linalg::norm(r);
        let mut best = 0;
        let mut best_score = f64::NEG_INFINITY;
        for k in 0..self.size {
            let e = self.entry(m, k);
            let d = nr * linalg::norm(e);
            let s = if d == 0.0 { 0.0 } else { linalg::dot(r, e) / d };
            if s > best_score {
                best_score = s;
                best = k;
            }
        }
        best
    }
}

/// A length-`M` code sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub struct SemanticId(pub Vec<u16>);

impl SemanticId {
    pub fn codes(&self) -> &[u16] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self, num_layers: usize, size: usize) -> Result<()> {
        if self.0.len() != num_layers {
            return Err(Error::InvalidId(format!(
                "{self} has length {}, expected {num_layers}",
                self.0.len()
            )));
        }
        if let Some(c) = self.0.iter().find(|&&c| c as usize >= size) {
            return Err(Error::InvalidId(format!("code {c} out of range 0..{size}")));
        }
        Ok(())
    }
}

impl fmt::Display for SemanticId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{c}")?;
        }
        Ok(())
    }
}

impl FromStr for SemanticId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse::<u16>()
                    .map_err(|_| Error::InvalidId(format!("bad code {t:?}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(SemanticId)
    }
}

/// Per-layer record of one residual quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationTrace {
    /// `residuals[m]` is the residual entering layer `m` (zero-based).
    pub residuals: Vec<Vec<f64>>,
    pub codes: Vec<u16>,
    /// Sum of the selected entries.
    pub quantized: Vec<f64>,
    pub degenerate: bool,
}

impl QuantizationTrace {
    pub fn semantic_id(&self) -> SemanticId {
        SemanticId(self.codes.clone())
    }
}

/// Residual quantization over all layers of `codebook`.
pub fn quantize(z: &[f64], codebook: &Codebook) -> Result<(SemanticId, QuantizationTrace)> {
    let trace = quantize_depth(z, codebook, codebook.num_layers())?;
    Ok((trace.semantic_id(), trace))
}

/// Residual quantization through the first `depth` layers.
///
/// The residual entering layer `m` is `z` minus the running sum of the
/// entries selected so far, and `quantized` is that running sum after the
/// last layer.
pub fn quantize_depth(z: &[f64], codebook: &Codebook, depth: usize) -> Result<QuantizationTrace> {
    if z.len() != codebook.dim() {
        return Err(Error::DimensionMismatch {
            expected: codebook.dim(),
            got: z.len(),
        });
    }
    if depth == 0 || depth > codebook.num_layers() {
        return Err(Error::InvalidInput(format!(
            "quantization depth {depth} outside 1..={}",
            codebook.num_layers()
        )));
    }
    let mut acc = vec![0.0; z.len()];
    let mut residuals = Vec::with_capacity(depth);
    let mut codes = Vec::with_capacity(depth);
    let mut degenerate = false;
    for m in 0..depth {
        let r: Vec<f64> = z.iter().zip(&acc).map(|(a, b)| a - b).collect();
        if !degenerate && linalg::norm(&r) < DEGENERATE_RESIDUAL {
            degenerate = true;
        }
        let c = if degenerate {
            0
        } else {
            codebook.nearest_by_cosine(m, &r)
        };
        linalg::add_assign(&mut acc, codebook.entry(m, c));
        residuals.push(r);
        codes.push(c as u16);
    }
    Ok(QuantizationTrace {
        residuals,
        codes,
        quantized: acc,
        degenerate,
    })
}

/// Residual-quantization loss with its stop-gradient split.
#[derive(Debug, Clone)]
pub struct RqLoss {
    pub value: f64,
    /// Gradient of the codebook term, identical for every selected entry.
    pub grad_entry: Vec<f64>,
    /// Gradient of the commitment term with respect to the latent.
    pub grad_latent: Vec<f64>,
}

/// `‖ẑ − sg[z]‖² + β‖sg[ẑ] − z‖²`.
pub fn rq_loss(trace: &QuantizationTrace, z: &[f64], beta: f64) -> RqLoss {
    let diff: Vec<f64> = trace.quantized.iter().zip(z).map(|(q, x)| q - x).collect();
    let sq = linalg::dot(&diff, &diff);
    RqLoss {
        value: sq + beta * sq,
        grad_entry: diff.iter().map(|d| 2.0 * d).collect(),
        grad_latent: diff.iter().map(|d| -2.0 * beta * d).collect(),
    }
}

/// Runs every view encoder on the shared input.
pub fn encode_views(f_v: &[f64], encoders: &[Mlp]) -> Result<Vec<Vec<f64>>> {
    check_encoders(f_v, encoders)?;
    Ok(encoders.iter().map(|e| e.forward(f_v)).collect())
}

pub(crate) fn check_encoders(f_v: &[f64], encoders: &[Mlp]) -> Result<()> {
    if encoders.is_empty() {
        return Err(Error::Config("at least one view encoder is required".into()));
    }
    if let Some(e) = encoders.iter().find(|e| e.d_in != f_v.len()) {
        return Err(Error::DimensionMismatch {
            expected: e.d_in,
            got: f_v.len(),
        });
    }
    Ok(())
}

/// Mean-pooled decoder output and its cosine reconstruction loss.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub features: Vec<f64>,
    pub loss: f64,
    /// Set when the pooled output has zero norm; the loss is then 1.
    pub degenerate: bool,
    caches: Vec<MlpCache>,
}

pub fn reconstruct(quantized_views: &[Vec<f64>], decoders: &[Mlp], f_v: &[f64]) -> Result<Reconstruction> {
    if quantized_views.len() != decoders.len() || decoders.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} quantized views for {} decoders",
            quantized_views.len(),
            decoders.len()
        )));
    }
    let mut features = vec![0.0; f_v.len()];
    let mut caches = Vec::with_capacity(decoders.len());
    for (zq, dec) in quantized_views.iter().zip(decoders) {
        if dec.d_out != f_v.len() || dec.d_in != zq.len() {
            return Err(Error::DimensionMismatch {
                expected: dec.d_out,
                got: f_v.len(),
            });
        }
        let (y, cache) = dec.forward_cached(zq);
        linalg::add_assign(&mut features, &y);
        caches.push(cache);
    }
    let inv = 1.0 / decoders.len() as f64;
    features.iter_mut().for_each(|x| *x *= inv);
    let degenerate = linalg::norm(&features) == 0.0 || linalg::norm(f_v) == 0.0;
    let loss = if degenerate {
        1.0
    } else {
        1.0 - linalg::cosine(f_v, &features)
    };
    Ok(Reconstruction {
        features,
        loss,
        degenerate,
        caches,
    })
}

impl Reconstruction {
    /// Backpropagates `scale · loss` into the decoders and returns the
    /// gradient for each quantized view.
    pub fn backward(&self, f_v: &[f64], decoders: &[Mlp], scale: f64, grads: &mut [Mlp]) -> Vec<Vec<f64>> {
        let n = decoders.len();
        if self.degenerate || scale == 0.0 {
            return decoders.iter().map(|d| vec![0.0; d.d_in]).collect();
        }
        let mut d_pooled = vec![0.0; f_v.len()];
        linalg::cosine_grad_acc(&self.features, f_v, -scale / n as f64, &mut d_pooled);
        decoders
            .iter()
            .zip(&self.caches)
            .zip(grads.iter_mut())
            .map(|((dec, cache), g)| dec.backward(cache, &d_pooled, g))
            .collect()
    }
}
