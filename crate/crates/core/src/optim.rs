//! AdamW over named parameter groups.
//!
//! Parameters and moments are rounded to single precision after every step so
//! that a checkpoint (which stores `f32`) restores training bit-for-bit.

use crate::linalg;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Per-group first moments.
    pub m: Vec<Vec<f64>>,
    /// Per-group second moments.
    pub v: Vec<Vec<f64>>,
    /// Per-group step counts; groups only advance when they are active.
    pub t: Vec<u64>,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, group_sizes: &[usize]) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: group_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            t: vec![0; group_sizes.len()],
        }
    }

    /// Updates every group whose `active` flag is set. `decay[g]` selects
    /// whether decoupled weight decay applies to group `g`.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]], active: &[bool], decay: &[bool]) {
        assert_eq!(params.len(), self.m.len());
        for g in 0..params.len() {
            if !active[g] {
                continue;
            }
            self.t[g] += 1;
            let t = self.t[g] as i32;
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let wd = if decay[g] { self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[g], &mut self.v[g]);
            for (((p, &gr), mi), vi) in params[g].iter_mut().zip(grads[g]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gr;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gr * gr;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                *p -= self.learning_rate * (update + wd * *p);
            }
            linalg::snap_f32(m);
            linalg::snap_f32(v);
            linalg::snap_f32(params[g]);
        }
    }

    /// Clears the moments of one group (used when a codebook layer is re-initialized).
    pub fn reset_group(&mut self, g: usize) {
        self.m[g].iter_mut().for_each(|x| *x = 0.0);
        self.v[g].iter_mut().for_each(|x| *x = 0.0);
        self.t[g] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let mut p = vec![1.0, -2.0];
        let g = [0.0, 0.0];
        let mut opt = AdamW::new(0.1, 0.0, &[2]);
        opt.step(&mut [&mut p[..]], &[&g[..]], &[true], &[true]);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = [1.0, 1.0];
        let g = [0.5, -3.0];
        let mut opt = AdamW::new(0.01, 0.0, &[2]);
        opt.step(&mut [&mut p[..]], &[&g[..]], &[true], &[false]);
        assert!((p[0] - 0.99).abs() < 1e-6);
        assert!((p[1] - 1.01).abs() < 1e-6);
    }

    #[test]
    fn inactive_groups_are_untouched() {
        let mut a = [1.0];
        let mut b = [1.0];
        let g = [1.0];
        let mut opt = AdamW::new(0.1, 0.5, &[1, 1]);
        opt.step(
            &mut [&mut a[..], &mut b[..]],
            &[&g[..], &g[..]],
            &[true, false],
            &[true, true],
        );
        assert_ne!(a[0], 1.0);
        assert_eq!(b[0], 1.0);
        assert_eq!(opt.t, vec![1, 0]);
    }
}
