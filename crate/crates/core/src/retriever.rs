//! Generative retriever over the shared codebooks.
//!
//! A query feature is projected to a context vector; at step `m` a small
//! feed-forward decoder reads `[context ; mean(prefix embeddings) + pos_m]` and
//! emits `h_m`. The code distribution is a temperature-scaled softmax over
//! cosine similarities between `h_m` and the layer-`m` codebook entries.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{self, Mlp, MlpCache};
use crate::tokenizer::Codebook;

/// Log-probabilities are clamped at `ln(LOG_CLAMP)`.
pub const LOG_CLAMP: f64 = 1e-12;
pub const TAU_MIN: f64 = 1e-3;
pub const TAU_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RetrieverParams {
    pub d_query: usize,
    pub d_latent: usize,
    /// `d_latent × d_query`, row-major.
    pub query_proj: Vec<f64>,
    /// One position embedding of width `d_latent` per decoding step.
    pub pos: Vec<f64>,
    pub ffn: Mlp,
}

impl RetrieverParams {
    pub fn init<R: Rng>(d_query: usize, d_latent: usize, d_hidden: usize, steps: usize, rng: &mut R) -> Self {
        let mut query_proj = vec![0.0; d_latent * d_query];
        nn::xavier(&mut query_proj, d_query, d_latent, rng);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let pos = (0..steps * d_latent)
            .map(|_| normal.sample(rng) as f32 as f64)
            .collect();
        Self {
            d_query,
            d_latent,
            query_proj,
            pos,
            ffn: Mlp::init(2 * d_latent, d_hidden, d_latent, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            d_query: self.d_query,
            d_latent: self.d_latent,
            query_proj: vec![0.0; self.query_proj.len()],
            pos: vec![0.0; self.pos.len()],
            ffn: self.ffn.zeros_like(),
        }
    }

    pub fn steps(&self) -> usize {
        self.pos.len() / self.d_latent
    }

    /// Projects a query feature to its context vector.
    pub fn context(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.d_query {
            return Err(Error::DimensionMismatch {
                expected: self.d_query,
                got: query.len(),
            });
        }
        Ok(nn::matvec(&self.query_proj, self.d_query, query))
    }
}

fn check_prefix(prefix: &[u16], codebook: &Codebook, steps: usize) -> Result<()> {
    let limit = steps.min(codebook.num_layers());
    if prefix.len() >= limit {
        return Err(Error::InvalidInput(format!(
            "prefix of length {} leaves no step below {limit}",
            prefix.len()
        )));
    }
    if let Some(c) = prefix.iter().find(|&&c| c as usize >= codebook.size()) {
        return Err(Error::InvalidId(format!(
            "code {c} out of range 0..{}",
            codebook.size()
        )));
    }
    Ok(())
}

fn step_input(params: &RetrieverParams, codebook: &Codebook, context: &[f64], prefix: &[u16]) -> Vec<f64> {
    let d = params.d_latent;
    let m = prefix.len();
    let mut x = Vec::with_capacity(2 * d);
    x.extend_from_slice(context);
    let mut tail = params.pos[m * d..(m + 1) * d].to_vec();
    if m > 0 {
        let inv = 1.0 / m as f64;
        for (l, &c) in prefix.iter().enumerate() {
            linalg::axpy(inv, codebook.entry(l, c as usize), &mut tail);
        }
    }
    x.extend_from_slice(&tail);
    x
}

/// `h_m` for the step that follows `prefix` (so `m = prefix.len() + 1`).
pub fn decode_step(query: &[f64], prefix: &[u16], params: &RetrieverParams, codebook: &Codebook) -> Result<Vec<f64>> {
    let ctx = params.context(query)?;
    decode_step_with_context(&ctx, prefix, params, codebook)
}

/// Same as [`decode_step`] with the query projection already applied.
pub fn decode_step_with_context(
    context: &[f64],
    prefix: &[u16],
    params: &RetrieverParams,
    codebook: &Codebook,
) -> Result<Vec<f64>> {
    check_prefix(prefix, codebook, params.steps())?;
    Ok(params.ffn.forward(&step_input(params, codebook, context, prefix)))
}

/// Cached forward state for one decoding step.
#[derive(Debug, Clone)]
pub struct StepCache {
    prefix: Vec<u16>,
    mlp: MlpCache,
}

pub(crate) fn decode_step_cached(
    context: &[f64],
    prefix: &[u16],
    params: &RetrieverParams,
    codebook: &Codebook,
) -> (Vec<f64>, StepCache) {
    let x = step_input(params, codebook, context, prefix);
    let (h, mlp) = params.ffn.forward_cached(&x);
    (
        h,
        StepCache {
            prefix: prefix.to_vec(),
            mlp,
        },
    )
}

/// Backpropagates `dh` through one step. Accumulates into the retriever and
/// codebook gradients and into `d_context`.
pub(crate) fn decode_step_backward(
    params: &RetrieverParams,
    cache: &StepCache,
    dh: &[f64],
    grads: &mut RetrieverParams,
    codebook_grads: &mut Codebook,
    d_context: &mut [f64],
) {
    let d = params.d_latent;
    let dx = params.ffn.backward(&cache.mlp, dh, &mut grads.ffn);
    linalg::add_assign(d_context, &dx[..d]);
    let m = cache.prefix.len();
    let dtail = &dx[d..];
    linalg::add_assign(&mut grads.pos[m * d..(m + 1) * d], dtail);
    if m > 0 {
        let inv = 1.0 / m as f64;
        for (l, &c) in cache.prefix.iter().enumerate() {
            linalg::axpy(inv, dtail, codebook_grads.entry_mut(l, c as usize));
        }
    }
}

/// Backpropagates the context gradient into the query projection.
pub(crate) fn context_backward(
    params: &RetrieverParams,
    query: &[f64],
    d_context: &[f64],
    grads: &mut RetrieverParams,
) {
    nn::matvec_backward(
        &params.query_proj,
        params.d_query,
        query,
        d_context,
        &mut grads.query_proj,
    );
}

/// A distribution over the `K` codes of one layer.
#[derive(Debug, Clone)]
pub struct CodeDistribution {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub cosines: Vec<f64>,
    /// The query-side vector had zero norm; the distribution is uniform.
    pub degenerate: bool,
}

/// `softmax(cos(h, e_k) / τ)` over the entries of codebook layer `m`.
pub fn code_probs(h: &[f64], codebook: &Codebook, m: usize, tau: f64) -> CodeDistribution {
    let nh = linalg::norm(h);
    let cosines: Vec<f64> = (0..codebook.size())
        .map(|k| {
            let e = codebook.entry(m, k);
            let d = nh * linalg::norm(e);
            if d == 0.0 {
                0.0
            } else {
                linalg::dot(h, e) / d
            }
        })
        .collect();
    let logits: Vec<f64> = cosines.iter().map(|c| c / tau).collect();
    let log_probs = linalg::log_softmax(&logits);
    let probs = log_probs.iter().map(|l| l.exp()).collect();
    CodeDistribution {
        probs,
        log_probs,
        cosines,
        degenerate: nh == 0.0,
    }
}

/// `−log P(target)` under [`code_probs`], with gradients.
#[derive(Debug, Clone)]
pub struct NllTerm {
    pub value: f64,
    pub grad_h: Vec<f64>,
    pub grad_tau: f64,
}

/// Computes `−log max(P(target), 1e-12)` and accumulates `scale ×` its
/// codebook gradient into `codebook_grads` layer `m`.
pub fn code_nll(
    h: &[f64],
    codebook: &Codebook,
    m: usize,
    tau: f64,
    target: usize,
    scale: f64,
    codebook_grads: &mut Codebook,
) -> NllTerm {
    let dist = code_probs(h, codebook, m, tau);
    let lp = dist.log_probs[target];
    let mut grad_h = vec![0.0; h.len()];
    if lp < LOG_CLAMP.ln() {
        return NllTerm {
            value: -LOG_CLAMP.ln(),
            grad_h,
            grad_tau: 0.0,
        };
    }
    let mut grad_tau = 0.0;
    for k in 0..codebook.size() {
        let ds = dist.probs[k] - if k == target { 1.0 } else { 0.0 };
        grad_tau -= ds * dist.cosines[k] / (tau * tau);
        let dcos = ds / tau;
        let e = codebook.entry(m, k);
        linalg::cosine_grad_acc(h, e, dcos, &mut grad_h);
        if scale != 0.0 {
            linalg::cosine_grad_acc(e, h, dcos * scale, codebook_grads.entry_mut(m, k));
        }
    }
    NllTerm {
        value: -lp,
        grad_h,
        grad_tau,
    }
}

/// In-batch contrastive loss between view latents and cumulative decoder features.
#[derive(Debug, Clone)]
pub struct ClLoss {
    pub value: f64,
    pub grad_z: Vec<Vec<f64>>,
    pub grad_h: Vec<Vec<f64>>,
    pub grad_tau: f64,
}

/// Mean over `i` of `−log softmax_j(cos(z_j, h_i)/τ)[i]`.
pub fn cl_loss(zs: &[Vec<f64>], hs: &[Vec<f64>], tau: f64) -> Result<ClLoss> {
    let b = zs.len();
    if b < 2 || hs.len() != b {
        return Err(Error::InvalidInput(format!(
            "contrastive batch needs at least 2 matched pairs, got {} latents and {} queries",
            b,
            hs.len()
        )));
    }
    let mut grad_z = vec![vec![0.0; zs[0].len()]; b];
    let mut grad_h = vec![vec![0.0; hs[0].len()]; b];
    let mut grad_tau = 0.0;
    let mut value = 0.0;
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let cos: Vec<f64> = zs.iter().map(|z| linalg::cosine(z, &hs[i])).collect();
        let logits: Vec<f64> = cos.iter().map(|c| c / tau).collect();
        let lp = linalg::log_softmax(&logits);
        value -= lp[i].max(LOG_CLAMP.ln()) * inv_b;
        if lp[i] < LOG_CLAMP.ln() {
            continue;
        }
        for j in 0..b {
            let ds = (lp[j].exp() - if i == j { 1.0 } else { 0.0 }) * inv_b;
            grad_tau -= ds * cos[j] / (tau * tau);
            let dcos = ds / tau;
            linalg::cosine_grad_acc(&zs[j], &hs[i], dcos, &mut grad_z[j]);
            linalg::cosine_grad_acc(&hs[i], &zs[j], dcos, &mut grad_h[i]);
        }
    }
    Ok(ClLoss {
        value,
        grad_z,
        grad_h,
        grad_tau,
    })
}

/// Standalone teacher-forced cross-entropy `−log P(c_m | c_<m, q)` for step
/// `m = target.len()` (one-based), without gradients.
pub fn ce_loss(query: &[f64], target: &[u16], params: &RetrieverParams, codebook: &Codebook, tau: f64) -> Result<f64> {
    let (last, prefix) = target
        .split_last()
        .ok_or_else(|| Error::InvalidInput("empty target".into()))?;
    let h = decode_step(query, prefix, params, codebook)?;
    let lp = code_probs(&h, codebook, prefix.len(), tau).log_probs[*last as usize];
    Ok(-lp.max(LOG_CLAMP.ln()))
}

/// Standalone hierarchical-consistency loss at layer `m` (one-based, `m > 1`):
/// text-side and video-side negative log-likelihoods of the codes in layers `< m`.
///
/// The video-side distribution at layer `l` is `softmax(cos(r_l, C_l)/τ)` where
/// `r_l = z − Σ_{j<l} e_j[c_j]`.
pub fn hc_loss(
    query: &[f64],
    latent: &[f64],
    codes: &[u16],
    m: usize,
    params: &RetrieverParams,
    codebook: &Codebook,
    tau: f64,
) -> Result<f64> {
    if m <= 1 {
        return Err(Error::InvalidInput("hierarchical consistency needs m > 1".into()));
    }
    if codes.len() < m - 1 {
        return Err(Error::InvalidInput(format!("{} codes for layer {m}", codes.len())));
    }
    let ctx = params.context(query)?;
    let mut total = 0.0;
    let mut residual = latent.to_vec();
    for l in 0..m - 1 {
        let c = codes[l] as usize;
        let h = decode_step_with_context(&ctx, &codes[..l], params, codebook)?;
        total -= code_probs(&h, codebook, l, tau).log_probs[c].max(LOG_CLAMP.ln());
        total -= code_probs(&residual, codebook, l, tau).log_probs[c].max(LOG_CLAMP.ln());
        linalg::axpy(-1.0, codebook.entry(l, c), &mut residual);
    }
    Ok(total)
}
