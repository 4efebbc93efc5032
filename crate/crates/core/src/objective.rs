//! Batch losses and gradients for the two training phases.
//!
//! * Alignment: `cl · L_CL + 𝟙[m>1] · align_hc · L_HC`
//! * Co-training: `λ1 · L_CE + λ2 · L_HC + λ3 · L_RQ + λ4 · L_Rec`
//!
//! `L_RQ` is averaged over views. Gradients of `L_Rec` reach the encoders
//! through a straight-through estimator (`∂ẑ/∂z = I`); the codebook only
//! learns from the codebook term of `L_RQ` and from the retrieval losses.
//! Gradients are returned for every parameter group; freezing is the
//! optimizer's job.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg;
use crate::model::Params;
use crate::nn::MlpCache;
use crate::retriever::{self, StepCache};
use crate::tokenizer::{self, QuantizationTrace};

/// Pairs per gradient chunk. Fixed so that reduction order never depends on
/// the thread count.
const CHUNK: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ce: f64,
    pub hc: f64,
    pub rq: f64,
    pub rec: f64,
    pub beta: f64,
    pub cl: f64,
    pub align_hc: f64,
}

/// Unweighted loss values (batch means) plus the weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub ce: f64,
    pub hc: f64,
    pub rq: f64,
    pub rec: f64,
    pub cl: f64,
    pub total: f64,
}

impl LossParts {
    fn add_scaled(&mut self, o: &LossParts, s: f64) {
        self.ce += o.ce * s;
        self.hc += o.hc * s;
        self.rq += o.rq * s;
        self.rec += o.rec * s;
        self.cl += o.cl * s;
        self.total += o.total * s;
    }

    pub fn is_finite(&self) -> bool {
        [self.ce, self.hc, self.rq, self.rec, self.cl, self.total]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// One `(video, query)` training pair.
#[derive(Debug, Clone, Copy)]
pub struct PairRef<'a> {
    pub video: &'a [f64],
    pub query: &'a [f64],
    /// View the query is assigned to.
    pub view: usize,
    /// Per-view target codes. When present they replace the tokenizer's
    /// code selection (frozen targets); otherwise codes are selected from the
    /// current parameters.
    pub codes: Option<&'a [Vec<u16>]>,
}

/// Trace for fixed codes: residuals and quantized sum follow the same
/// arithmetic as [`tokenizer::quantize_depth`].
pub fn trace_with_codes(z: &[f64], codebook: &tokenizer::Codebook, codes: &[u16]) -> QuantizationTrace {
    let mut acc = vec![0.0; z.len()];
    let mut residuals = Vec::with_capacity(codes.len());
    for (m, &c) in codes.iter().enumerate() {
        residuals.push(z.iter().zip(&acc).map(|(a, b)| a - b).collect());
        linalg::add_assign(&mut acc, codebook.entry(m, c as usize));
    }
    QuantizationTrace {
        residuals,
        codes: codes.to_vec(),
        quantized: acc,
        degenerate: false,
    }
}

fn trace_for(p: &Params, z: &[f64], depth: usize, fixed: Option<&[u16]>) -> Result<QuantizationTrace> {
    match fixed {
        Some(codes) => {
            if codes.len() < depth {
                return Err(Error::InvalidInput(format!(
                    "{} fixed codes for depth {depth}",
                    codes.len()
                )));
            }
            Ok(trace_with_codes(z, &p.codebook, &codes[..depth]))
        }
        None => tokenizer::quantize_depth(z, &p.codebook, depth),
    }
}

/// Teacher-forced decoder passes for steps `0..=last`.
struct Steps {
    ctx: Vec<f64>,
    hs: Vec<Vec<f64>>,
    caches: Vec<StepCache>,
}

fn run_steps(p: &Params, query: &[f64], codes: &[u16], last: usize) -> Result<Steps> {
    let ctx = p.retriever.context(query)?;
    let mut hs = Vec::with_capacity(last + 1);
    let mut caches = Vec::with_capacity(last + 1);
    for l in 0..=last {
        let (h, c) = retriever::decode_step_cached(&ctx, &codes[..l], &p.retriever, &p.codebook);
        hs.push(h);
        caches.push(c);
    }
    Ok(Steps { ctx, hs, caches })
}

fn backprop_steps(p: &Params, steps: &Steps, query: &[f64], dh: &[Vec<f64>], grads: &mut Params) {
    let mut d_ctx = vec![0.0; steps.ctx.len()];
    for (cache, d) in steps.caches.iter().zip(dh) {
        if d.iter().all(|&x| x == 0.0) {
            continue;
        }
        retriever::decode_step_backward(
            &p.retriever,
            cache,
            d,
            &mut grads.retriever,
            &mut grads.codebook,
            &mut d_ctx,
        );
    }
    retriever::context_backward(&p.retriever, query, &d_ctx, &mut grads.retriever);
}

/// Hierarchical consistency over layers `< layer`. Returns the unweighted value.
#[allow(clippy::too_many_arguments)]
fn hc_terms(
    p: &Params,
    trace: &QuantizationTrace,
    hs: &[Vec<f64>],
    layer: usize,
    scale: f64,
    grads: &mut Params,
    dz: &mut [f64],
    dh: &mut [Vec<f64>],
) -> f64 {
    let mut value = 0.0;
    for l in 0..layer {
        let c = trace.codes[l] as usize;
        let text = retriever::code_nll(&hs[l], &p.codebook, l, p.tau, c, scale, &mut grads.codebook);
        let video = retriever::code_nll(
            &trace.residuals[l],
            &p.codebook,
            l,
            p.tau,
            c,
            scale,
            &mut grads.codebook,
        );
        value += text.value + video.value;
        if scale == 0.0 {
            continue;
        }
        linalg::axpy(scale, &text.grad_h, &mut dh[l]);
        linalg::axpy(scale, &video.grad_h, dz);
        for j in 0..l {
            linalg::axpy(
                -scale,
                &video.grad_h,
                grads.codebook.entry_mut(j, trace.codes[j] as usize),
            );
        }
        grads.tau += scale * (text.grad_tau + video.grad_tau);
    }
    value
}

fn check_pair(p: &Params, pair: &PairRef<'_>, layer: usize) -> Result<()> {
    if layer >= p.codebook.num_layers() {
        return Err(Error::InvalidInput(format!("layer {layer} out of range")));
    }
    if pair.view >= p.num_views() {
        return Err(Error::InvalidInput(format!("view {} out of range", pair.view)));
    }
    tokenizer::check_encoders(pair.video, &p.encoders)
}

struct AlignForward {
    z: Vec<f64>,
    enc: MlpCache,
    trace: QuantizationTrace,
    steps: Steps,
    h_cum: Vec<f64>,
}

fn align_forward(p: &Params, pair: &PairRef<'_>, layer: usize) -> Result<AlignForward> {
    check_pair(p, pair, layer)?;
    let (z, enc) = p.encoders[pair.view].forward_cached(pair.video);
    let trace = if layer > 0 {
        trace_for(p, &z, layer, pair.codes.map(|c| c[pair.view].as_slice()))?
    } else {
        QuantizationTrace {
            residuals: vec![],
            codes: vec![],
            quantized: vec![0.0; z.len()],
            degenerate: false,
        }
    };
    let steps = run_steps(p, pair.query, &trace.codes, layer)?;
    let mut h_cum = vec![0.0; z.len()];
    for h in &steps.hs {
        linalg::add_assign(&mut h_cum, h);
    }
    Ok(AlignForward {
        z,
        enc,
        trace,
        steps,
        h_cum,
    })
}

/// Loss and gradient of the alignment objective at zero-based `layer`.
pub fn align_batch(
    p: &Params,
    pairs: &[PairRef<'_>],
    layer: usize,
    w: &LossWeights,
    exec: Exec,
) -> Result<(LossParts, Params)> {
    let fwd: Vec<AlignForward> = exec
        .map(pairs, |pair| align_forward(p, pair, layer))
        .into_iter()
        .collect::<Result<_>>()?;
    let zs: Vec<Vec<f64>> = fwd.iter().map(|f| f.z.clone()).collect();
    let hs: Vec<Vec<f64>> = fwd.iter().map(|f| f.h_cum.clone()).collect();
    let cl = retriever::cl_loss(&zs, &hs, p.tau)?;
    let hc_scale = if layer > 0 {
        w.align_hc / pairs.len() as f64
    } else {
        0.0
    };

    let idx: Vec<usize> = (0..pairs.len()).collect();
    let partials = exec.map_chunks(&idx, CHUNK, |chunk| {
        let mut g = p.zeros_like();
        let mut hc = 0.0;
        for &i in chunk {
            let f = &fwd[i];
            let mut dz: Vec<f64> = cl.grad_z[i].iter().map(|x| x * w.cl).collect();
            let mut dh = vec![vec![0.0; f.z.len()]; layer + 1];
            for d in dh.iter_mut() {
                linalg::axpy(w.cl, &cl.grad_h[i], d);
            }
            if layer > 0 {
                hc += hc_terms(p, &f.trace, &f.steps.hs, layer, hc_scale, &mut g, &mut dz, &mut dh);
            }
            backprop_steps(p, &f.steps, pairs[i].query, &dh, &mut g);
            p.encoders[pairs[i].view].backward(&f.enc, &dz, &mut g.encoders[pairs[i].view]);
        }
        (g, hc)
    });
    let mut grads = p.zeros_like();
    let mut hc_sum = 0.0;
    for (g, hc) in &partials {
        grads.add_assign(g);
        hc_sum += hc;
    }
    grads.tau += w.cl * cl.grad_tau;
    let hc = if layer > 0 { hc_sum / pairs.len() as f64 } else { 0.0 };
    let parts = LossParts {
        cl: cl.value,
        hc,
        total: w.cl * cl.value + if layer > 0 { w.align_hc * hc } else { 0.0 },
        ..LossParts::default()
    };
    Ok((parts, grads))
}

fn cotrain_pair(
    p: &Params,
    pair: &PairRef<'_>,
    layer: usize,
    w: &LossWeights,
    scale: f64,
    grads: &mut Params,
) -> Result<LossParts> {
    check_pair(p, pair, layer)?;
    let nv = p.num_views();
    let depth = layer + 1;
    let mut zs = Vec::with_capacity(nv);
    let mut encs = Vec::with_capacity(nv);
    let mut traces = Vec::with_capacity(nv);
    for (i, enc) in p.encoders.iter().enumerate() {
        let (z, cache) = enc.forward_cached(pair.video);
        traces.push(trace_for(p, &z, depth, pair.codes.map(|c| c[i].as_slice()))?);
        zs.push(z);
        encs.push(cache);
    }
    let mut dz = vec![vec![0.0; p.codebook.dim()]; nv];

    let quantized: Vec<Vec<f64>> = traces.iter().map(|t| t.quantized.clone()).collect();
    let rec = tokenizer::reconstruct(&quantized, &p.decoders, pair.video)?;
    if w.rec != 0.0 {
        let dq = rec.backward(pair.video, &p.decoders, scale * w.rec, &mut grads.decoders);
        for (d, q) in dz.iter_mut().zip(&dq) {
            linalg::add_assign(d, q);
        }
    }

    let mut rq = 0.0;
    let coef = scale * w.rq / nv as f64;
    for ((t, z), d) in traces.iter().zip(&zs).zip(dz.iter_mut()) {
        let l = tokenizer::rq_loss(t, z, w.beta);
        rq += l.value / nv as f64;
        if coef != 0.0 {
            for (m, &c) in t.codes.iter().enumerate() {
                linalg::axpy(coef, &l.grad_entry, grads.codebook.entry_mut(m, c as usize));
            }
            linalg::axpy(coef, &l.grad_latent, d);
        }
    }

    let a = pair.view;
    let steps = run_steps(p, pair.query, &traces[a].codes, layer)?;
    let mut dh = vec![vec![0.0; p.codebook.dim()]; depth];
    let ce_scale = scale * w.ce;
    let target = traces[a].codes[layer] as usize;
    let ce = retriever::code_nll(
        &steps.hs[layer],
        &p.codebook,
        layer,
        p.tau,
        target,
        ce_scale,
        &mut grads.codebook,
    );
    if ce_scale != 0.0 {
        linalg::axpy(ce_scale, &ce.grad_h, &mut dh[layer]);
        grads.tau += ce_scale * ce.grad_tau;
    }
    let hc = if layer > 0 {
        hc_terms(
            p,
            &traces[a],
            &steps.hs,
            layer,
            scale * w.hc,
            grads,
            &mut dz[a],
            &mut dh,
        )
    } else {
        0.0
    };
    backprop_steps(p, &steps, pair.query, &dh, grads);

    for (i, enc) in p.encoders.iter().enumerate() {
        if dz[i].iter().any(|&x| x != 0.0) {
            enc.backward(&encs[i], &dz[i], &mut grads.encoders[i]);
        }
    }
    let total = w.ce * ce.value + w.hc * hc + w.rq * rq + w.rec * rec.loss;
    Ok(LossParts {
        ce: ce.value,
        hc,
        rq,
        rec: rec.loss,
        cl: 0.0,
        total,
    })
}

/// Loss and gradient of the co-training objective at zero-based `layer`,
/// averaged over the batch.
pub fn cotrain_batch(
    p: &Params,
    pairs: &[PairRef<'_>],
    layer: usize,
    w: &LossWeights,
    exec: Exec,
) -> Result<(LossParts, Params)> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let scale = 1.0 / pairs.len() as f64;
    let partials = exec.map_chunks(pairs, CHUNK, |chunk| -> Result<(Params, LossParts)> {
        let mut g = p.zeros_like();
        let mut parts = LossParts::default();
        for pair in chunk {
            let l = cotrain_pair(p, pair, layer, w, scale, &mut g)?;
            parts.add_scaled(&l, scale);
        }
        Ok((g, parts))
    });
    let mut grads = p.zeros_like();
    let mut parts = LossParts::default();
    for r in partials {
        let (g, l) = r?;
        grads.add_assign(&g);
        parts.add_scaled(&l, 1.0);
    }
    Ok((parts, grads))
}
