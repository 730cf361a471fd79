//! AdamW over a flat parameter vector, with a cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::membership::ParamGroup;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    /// Update count per coordinate, so coordinates that were skipped while
    /// frozen get their own bias correction.
    t: Vec<u32>,
}

impl AdamW {
    pub fn new(len: usize, weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: vec![0; len],
        }
    }

    /// One update. Coordinates whose group is frozen are left untouched,
    /// including their moments and weight decay.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        groups: &[ParamGroup],
        frozen: impl Fn(ParamGroup) -> bool,
        lr: f64,
    ) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), params.len());
        assert_eq!(groups.len(), params.len());
        for i in 0..params.len() {
            if frozen(groups[i]) {
                continue;
            }
            let g = grads[i];
            self.t[i] += 1;
            let t = self.t[i] as i32;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / (1.0 - self.beta1.powi(t));
            let v_hat = self.v[i] / (1.0 - self.beta2.powi(t));
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * params[i]);
        }
    }
}

/// Cosine decay from `start` at step 0 to `end` at the last step.
pub fn cosine_lr(step: usize, total: usize, start: f64, end: f64) -> f64 {
    if total <= 1 {
        return start;
    }
    let progress = step.min(total - 1) as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_monotone() {
        assert_eq!(cosine_lr(0, 600, 1e-2, 3e-3), 1e-2);
        assert!((cosine_lr(599, 600, 1e-2, 3e-3) - 3e-3).abs() < 1e-15);
        let lrs: Vec<f64> = (0..600).map(|s| cosine_lr(s, 600, 1e-2, 3e-3)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(cosine_lr(0, 1, 0.5, 0.1), 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let target = [1.5, -2.0, 0.25];
        let mut x = vec![0.0; 3];
        let groups = vec![ParamGroup::Encoder; 3];
        let mut opt = AdamW::new(3, 0.0);
        for step in 0..2000 {
            let g: Vec<f64> = x.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            opt.step(&mut x, &g, &groups, |_| false, cosine_lr(step, 2000, 0.05, 1e-3));
        }
        for (a, b) in x.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn frozen_groups_are_untouched() {
        let mut x = vec![1.0, 1.0];
        let groups = vec![ParamGroup::Encoder, ParamGroup::ShapeHead];
        let mut opt = AdamW::new(2, 0.1);
        opt.step(&mut x, &[1.0, 1.0], &groups, |g| g == ParamGroup::ShapeHead, 0.1);
        assert!(x[0] < 1.0);
        assert_eq!(x[1], 1.0);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut x = vec![0.0];
        let mut opt = AdamW::new(1, 0.0);
        opt.step(&mut x, &[3.0], &[ParamGroup::Encoder], |_| false, 0.01);
        assert!((x[0] + 0.01).abs() < 1e-9);
    }
}
