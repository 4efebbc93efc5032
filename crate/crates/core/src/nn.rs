//! Two-layer feed-forward blocks with hand-written backward passes.

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::linalg;

/// `y = W2 · tanh(W1 · x + b1) + b2`, weights row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_out: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
}

impl Mlp {
    pub fn zeros(d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            d_in,
            d_hidden,
            d_out,
            w1: vec![0.0; d_hidden * d_in],
            b1: vec![0.0; d_hidden],
            w2: vec![0.0; d_out * d_hidden],
            b2: vec![0.0; d_out],
        }
    }

    /// Xavier-uniform weights, zero biases, all values single-precision representable.
    pub fn init<R: Rng>(d_in: usize, d_hidden: usize, d_out: usize, rng: &mut R) -> Self {
        let mut m = Self::zeros(d_in, d_hidden, d_out);
        xavier(&mut m.w1, d_in, d_hidden, rng);
        xavier(&mut m.w2, d_hidden, d_out, rng);
        m
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.d_in, self.d_hidden, self.d_out)
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    fn hidden(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.d_in);
        self.w1
            .chunks_exact(self.d_in)
            .zip(&self.b1)
            .map(|(row, b)| (linalg::dot(row, x) + b).tanh())
            .collect()
    }

    fn output(&self, hidden: &[f64]) -> Vec<f64> {
        self.w2
            .chunks_exact(self.d_hidden)
            .zip(&self.b2)
            .map(|(row, b)| linalg::dot(row, hidden) + b)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.output(&self.hidden(x))
    }

    pub fn forward_cached(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        let hidden = self.hidden(x);
        let y = self.output(&hidden);
        (
            y,
            MlpCache {
                input: x.to_vec(),
                hidden,
            },
        )
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, cache: &MlpCache, grad_out: &[f64], grads: &mut Mlp) -> Vec<f64> {
        let (dh, dx_len) = (self.d_hidden, self.d_in);
        let mut d_hidden = vec![0.0; dh];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grads.b2[o] += g;
            let row = &self.w2[o * dh..(o + 1) * dh];
            let grow = &mut grads.w2[o * dh..(o + 1) * dh];
            for j in 0..dh {
                grow[j] += g * cache.hidden[j];
                d_hidden[j] += g * row[j];
            }
        }
        let mut dx = vec![0.0; dx_len];
        for (j, (&a, &dh_j)) in cache.hidden.iter().zip(&d_hidden).enumerate() {
            let g = dh_j * (1.0 - a * a);
            if g == 0.0 {
                continue;
            }
            grads.b1[j] += g;
            let row = &self.w1[j * dx_len..(j + 1) * dx_len];
            let grow = &mut grads.w1[j * dx_len..(j + 1) * dx_len];
            for i in 0..dx_len {
                grow[i] += g * cache.input[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

/// Plain matrix-vector product `y = W x` for a `rows × cols` row-major matrix.
pub fn matvec(w: &[f64], cols: usize, x: &[f64]) -> Vec<f64> {
    w.chunks_exact(cols).map(|row| linalg::dot(row, x)).collect()
}

/// Accumulates `dW += g xᵀ` and returns `Wᵀ g`.
pub fn matvec_backward(w: &[f64], cols: usize, x: &[f64], g: &[f64], dw: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; cols];
    for (r, &gr) in g.iter().enumerate() {
        if gr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        let drow = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            drow[c] += gr * x[c];
            dx[c] += gr * row[c];
        }
    }
    dx
}

pub(crate) fn xavier<R: Rng>(w: &mut [f64], fan_in: usize, fan_out: usize, rng: &mut R) {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    for x in w {
        *x = dist.sample(rng) as f32 as f64;
    }
}
