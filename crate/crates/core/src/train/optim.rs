//! Adam, global-norm clipping and the warmup + cosine schedule.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPS: f64 = 1e-8;
/// The schedule decays to this fraction of the peak rate.
pub const FINAL_LR_FRACTION: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    /// Rate for 1-based `step`: linear warmup to `peak`, then cosine decay
    /// to `0.1 · peak` at `total`.
    pub fn lr(&self, step: usize) -> f64 {
        let floor = FINAL_LR_FRACTION * self.peak;
        if self.warmup > 0 && step <= self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if self.total <= self.warmup {
            return floor;
        }
        let progress = ((step - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
        floor + (self.peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scale all trainable gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(store: &mut ParamStore<F>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for (_, p) in store.iter() {
        if let Some(g) = p.grad() {
            sq += g.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = F::lit(max_norm / norm);
        for id in store.ids().collect::<Vec<_>>() {
            if let Some(g) = store.get_mut(id).grad_mut() {
                g.data_mut().iter_mut().for_each(|v| *v = *v * k);
            }
        }
    }
    norm
}

/// Adam without weight decay. Moments are kept per parameter index and only
/// for trainable parameters.
#[derive(Clone, Debug)]
pub struct Adam<F: Real = f32> {
    pub step: u64,
    pub m: Vec<Option<Tensor<F>>>,
    pub v: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>) -> Self {
        let init = |_| None;
        let mut m: Vec<Option<Tensor<F>>> = (0..store.len()).map(init).collect();
        let mut v: Vec<Option<Tensor<F>>> = (0..store.len()).map(init).collect();
        for (id, p) in store.iter() {
            if p.trainable() {
                m[id.index()] = Some(Tensor::zeros(p.latent.shape()));
                v[id.index()] = Some(Tensor::zeros(p.latent.shape()));
            }
        }
        Self { step: 0, m, v }
    }

    /// One update with learning rate `lr`. Parameters without a gradient are
    /// left untouched.
    pub fn update(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(Error::InvalidArgument(
                "optimizer state belongs to a different model".into(),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let (b1, b2) = (F::lit(ADAM_BETA1), F::lit(ADAM_BETA2));
        let (one, eps) = (F::one(), F::lit(ADAM_EPS));
        let step_size = F::lit(lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        for id in store.ids().collect::<Vec<_>>() {
            let p = store.get_mut(id);
            let Some(grad) = p.grad().cloned() else { continue };
            let (Some(m), Some(v)) = (self.m[id.index()].as_mut(), self.v[id.index()].as_mut()) else {
                continue;
            };
            let w = p.latent.data_mut();
            for (((w, m), v), &g) in w.iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(grad.data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                *w = *w - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_shape() {
        let s = Schedule {
            peak: 2.0,
            warmup: 10,
            total: 110,
        };
        assert!((s.lr(5) - 1.0).abs() < 1e-12);
        assert_eq!(s.lr(10), 2.0);
        assert!((s.lr(60) - 1.1).abs() < 1e-12);
        assert!((s.lr(110) - 0.2).abs() < 1e-9);
        for t in 11..110 {
            assert!(s.lr(t + 1) <= s.lr(t));
        }
    }

    #[test]
    fn schedule_without_warmup() {
        let s = Schedule {
            peak: 1.0,
            warmup: 0,
            total: 4,
        };
        assert!((s.lr(0) - 1.0).abs() < 1e-12);
        assert!((s.lr(4) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::vector(vec![0.0, 0.0]), true);
        store
            .get_mut(a)
            .accumulate_grad(Tensor::vector(vec![3.0, 4.0]))
            .unwrap();
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        let g = store.get(a).grad().unwrap().data().to_vec();
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        assert!((clip_grad_norm(&mut store, 1.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Tensor::vector(vec![1.0, 1.0]), true);
        let frozen = store.add("f", Tensor::vector(vec![5.0]), false);
        store
            .get_mut(a)
            .accumulate_grad(Tensor::vector(vec![0.5, -2.0]))
            .unwrap();
        let mut adam = Adam::new(&store);
        adam.update(&mut store, 0.1).unwrap();
        let w = store.get(a).latent.data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] - 1.1).abs() < 1e-6);
        assert_eq!(store.get(frozen).latent.data(), &[5.0]);
        assert!(adam.m[frozen.index()].is_none());
    }
}
