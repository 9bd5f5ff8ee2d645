use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Steps taken.
    pub t: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    /// Which tensors receive weight decay.
    pub decay: Vec<bool>,
}

impl AdamW {
    pub fn new(params: &[Tensor<f32>], decay: Vec<bool>, weight_decay: f32) -> Self {
        assert_eq!(params.len(), decay.len());
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            decay,
        }
    }

    /// One update. Tensors without a gradient only decay.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>], lr: f32) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let decay = if self.decay[i] { 1.0 - lr * self.weight_decay } else { 1.0 };
            let data = p.data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            match &grads[i] {
                Some(g) => {
                    for (((w, &gi), mi), vi) in data.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                        *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                        let upd = (*mi / bc1) / ((*vi / bc2).sqrt() + self.eps);
                        *w = *w * decay - lr * upd;
                    }
                }
                None => data.iter_mut().for_each(|w| *w *= decay),
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub peak: f64,
    /// Rate reached at the final step.
    pub floor: f64,
    /// Linear ramp from zero over this many steps.
    pub warmup: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self { peak: 3e-4, floor: 3e-6, warmup: 0 }
    }
}

impl Schedule {
    pub fn lr(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = total.saturating_sub(self.warmup).max(1) as f64;
        let frac = ((step - self.warmup) as f64 / span).min(1.0);
        self.peak + (self.floor - self.peak) * frac
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0f32, -1.0]).unwrap()];
        let g = vec![Some(Tensor::new(vec![2], vec![0.5f32, -2.0]).unwrap())];
        let mut opt = AdamW::new(&p, vec![false], 0.0);
        opt.step(&mut p, &g, 0.1);
        // Bias-corrected first step is sign(g) * lr.
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn decay_is_decoupled() {
        let mut p = vec![Tensor::new(vec![1], vec![2.0f32]).unwrap()];
        let mut opt = AdamW::new(&p, vec![true], 0.5);
        opt.step(&mut p, &[None], 0.1);
        assert!((p[0].data()[0] - 2.0 * 0.95).abs() < 1e-6);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::new(vec![1], vec![5.0f32]).unwrap()];
        let mut opt = AdamW::new(&p, vec![false], 0.0);
        for _ in 0..500 {
            let x = p[0].data()[0];
            opt.step(&mut p, &[Some(Tensor::new(vec![1], vec![2.0 * (x - 1.0)]).unwrap())], 0.05);
        }
        assert!((p[0].data()[0] - 1.0).abs() < 1e-2);
    }

    #[test]
    fn schedule_decays_linearly() {
        let s = Schedule { peak: 1.0, floor: 0.0, warmup: 0 };
        assert_eq!(s.lr(0, 10), 1.0);
        assert!((s.lr(5, 10) - 0.5).abs() < 1e-12);
        assert_eq!(s.lr(10, 10), 0.0);
        assert_eq!(s.lr(20, 10), 0.0);
        let w = Schedule { peak: 1.0, floor: 0.0, warmup: 4 };
        assert_eq!(w.lr(0, 14), 0.25);
        assert_eq!(w.lr(4, 14), 1.0);
        assert!((w.lr(9, 14) - 0.5).abs() < 1e-12);
    }
}
