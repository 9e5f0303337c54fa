//! Adaptive-moment optimizer with decoupled weight decay, and gradient clipping.

use crate::autodiff::Tensor;
use crate::model::Params;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamW {
    /// Fresh state with zero moments shaped like `params`.
    pub fn new(params: &Params<Tensor>, lr: f64, weight_decay: f64) -> Self {
        let mut first = Vec::new();
        params.for_each(|_, t| first.push(vec![0.0; t.numel()]));
        let second = first.clone();
        AdamW {
            lr,
            weight_decay,
            step: 0,
            first,
            second,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. `grads` must visit in the same order as `params`.
    ///
    /// Each parameter first shrinks by `lr·weight_decay·p`, then moves by the
    /// bias-corrected moment ratio.
    pub fn step(&mut self, params: &mut Params<Tensor>, grads: &[Vec<f64>]) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (lr, wd) = (self.lr, self.weight_decay);
        let mut k = 0;
        params.for_each_mut(|_, p| {
            let (m, v, g) = (&mut self.first[k], &mut self.second[k], &grads[k]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + EPSILON);
                *w -= lr * wd * *w;
                *w -= lr * update;
            }
            k += 1;
        });
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EncoderConfig, FusionModel};

    #[test]
    fn clip_scales_to_limit() {
        let mut g = vec![vec![30.0, 40.0], vec![0.0]];
        let before = clip_global_norm(&mut g, 5.0);
        assert_eq!(before, 50.0);
        assert!((global_norm(&g) - 5.0).abs() < 1e-12);

        let mut small = vec![vec![0.3, 0.4]];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small, vec![vec![0.3, 0.4]]);
    }

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let model = FusionModel::init(&EncoderConfig::default(), 0).unwrap();
        let mut params = model.params.clone();
        let mut opt = AdamW::new(&params, 1e-3, 0.01);
        let grads: Vec<Vec<f64>> = {
            let mut v = Vec::new();
            params.for_each(|_, t| v.push(vec![0.0; t.numel()]));
            v
        };
        opt.step(&mut params, &grads);
        let mut k = 0;
        let mut before = Vec::new();
        model.params.for_each(|_, t| before.push(t.clone()));
        params.for_each(|_, t| {
            for (a, b) in t.data().iter().zip(before[k].data()) {
                assert_eq!(*a, b - 1e-3 * 0.01 * b);
            }
            k += 1;
        });
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let model = FusionModel::init(&EncoderConfig::default(), 0).unwrap();
        let mut params = model.params.clone();
        let mut opt = AdamW::new(&params, 1e-2, 0.0);
        let mut grads = Vec::new();
        params.for_each(|_, t| grads.push(vec![0.5; t.numel()]));
        opt.step(&mut params, &grads);
        let w0 = model.params.fusion[0].weight.data()[0];
        let w1 = params.fusion[0].weight.data()[0];
        assert!((w0 - w1 - 1e-2).abs() < 1e-9);
    }
}
