//! AdamW with global-norm clipping, and the two learning-rate schedules.

use serde::{Deserialize, Serialize};

use super::{ParamStore, Scalar};
use crate::error::{GdtError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.95),
            eps: 1e-8,
            weight_decay: 0.1,
            grad_clip: 1.0,
        }
    }
}

/// Moment estimates for every parameter of one store.
#[derive(Debug, Clone)]
pub struct AdamState<F = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(store: &ParamStore<F>, config: AdamConfig) -> Self {
        let zeros = |n: usize| vec![F::zero(); n];
        Self {
            config,
            step: 0,
            m: store
                .entries()
                .iter()
                .map(|e| zeros(e.value.numel()))
                .collect(),
            v: store
                .entries()
                .iter()
                .map(|e| zeros(e.value.numel()))
                .collect(),
        }
    }

    /// One clipped, bias-corrected AdamW update using the gradients held in
    /// `store`. A non-finite gradient aborts before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore<F>, lr: f64) -> Result<StepStats> {
        if self.m.len() != store.len() {
            return Err(GdtError::Contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (i, e) in store.entries().iter().enumerate() {
            if self.m[i].len() != e.value.numel() {
                return Err(GdtError::shape(
                    "adam_step",
                    &[self.m[i].len()],
                    e.value.shape(),
                ));
            }
            if e.grad.iter().any(|g| !g.is_finite()) {
                return Err(GdtError::NanGradient {
                    param: e.name.clone(),
                });
            }
        }

        let grad_norm = store.grad_norm();
        let clip = self.config.grad_clip;
        let clipped = clip > 0.0 && grad_norm > clip;
        let gscale = F::lit(if clipped {
            clip / (grad_norm + 1e-6)
        } else {
            1.0
        });

        self.step += 1;
        let (b1, b2) = self.config.betas;
        let t = self.step as i32;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1f, b2f) = (F::lit(b1), F::lit(b2));
        let (ob1, ob2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
        let step_size = F::lit(lr / bc1);
        let bc2_sqrt = F::lit(bc2.sqrt());
        let eps = F::lit(self.config.eps);
        let decay = F::lit(lr * self.config.weight_decay);

        for (i, e) in store.entries_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let apply_decay = e.decay && self.config.weight_decay > 0.0 && lr > 0.0;
            let data = e.value.data_mut();
            for j in 0..data.len() {
                let g = e.grad[j] * gscale;
                m[j] = b1f * m[j] + ob1 * g;
                v[j] = b2f * v[j] + ob2 * g * g;
                if apply_decay {
                    data[j] -= decay * data[j];
                }
                let denom = v[j].sqrt() / bc2_sqrt + eps;
                data[j] -= step_size * m[j] / denom;
            }
        }
        Ok(StepStats { grad_norm, clipped })
    }
}

/// Learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    /// Linear warmup over a token budget, then cosine decay until the final
    /// token budget, never below `min_ratio * base`.
    Cosine {
        base: f64,
        warmup_tokens: f64,
        final_tokens: f64,
        min_ratio: f64,
    },
    /// Linear warmup over a step budget, then constant.
    Warmup {
        base: f64,
        warmup_steps: f64,
    },
    Constant {
        base: f64,
    },
}

impl LrSchedule {
    pub fn base(&self) -> f64 {
        match *self {
            LrSchedule::Cosine { base, .. }
            | LrSchedule::Warmup { base, .. }
            | LrSchedule::Constant { base } => base,
        }
    }

    pub fn with_base(self, lr: f64) -> Self {
        match self {
            LrSchedule::Cosine {
                warmup_tokens,
                final_tokens,
                min_ratio,
                ..
            } => LrSchedule::Cosine {
                base: lr,
                warmup_tokens,
                final_tokens,
                min_ratio,
            },
            LrSchedule::Warmup { warmup_steps, .. } => LrSchedule::Warmup {
                base: lr,
                warmup_steps,
            },
            LrSchedule::Constant { .. } => LrSchedule::Constant { base: lr },
        }
    }

    /// Rate after `step` updates, each consuming `tokens_per_step` action labels.
    pub fn rate(&self, step: u64, tokens_per_step: u64) -> f64 {
        match *self {
            LrSchedule::Cosine {
                base,
                warmup_tokens,
                final_tokens,
                min_ratio,
            } => {
                let tokens = (step * tokens_per_step) as f64;
                if tokens < warmup_tokens {
                    base * tokens / warmup_tokens.max(1.0)
                } else {
                    let span = (final_tokens - warmup_tokens).max(1.0);
                    let progress = ((tokens - warmup_tokens) / span).min(1.0);
                    let mult = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                    base * mult.max(min_ratio)
                }
            }
            LrSchedule::Warmup { base, warmup_steps } => {
                base * (step as f64 / warmup_steps.max(1.0)).min(1.0)
            }
            LrSchedule::Constant { base } => base,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::Tensor;

    fn scalar_store(value: f32, grad: f32) -> ParamStore {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::scalar(value), true);
        store.entry_mut(id).grad[0] = grad;
        store
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut store = ParamStore::<f32>::new();
        store.add(
            "w",
            Tensor::from_f32(&[3], &[1.0, -2.0, 0.5]).unwrap(),
            true,
        );
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut adam = AdamState::new(&store, cfg);
        let before = store.entries()[0].value.clone();
        adam.step(&mut store, 0.1).unwrap();
        assert_eq!(store.entries()[0].value, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2 on step one, so the update is lr * g / |g|.
        let mut store = scalar_store(0.0, 1.0);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut adam = AdamState::new(&store, cfg);
        adam.step(&mut store, 0.1).unwrap();
        let w = store.entries()[0].value.item();
        assert!((w + 0.1).abs() < 1e-6, "{w}");
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn clipping_rescales_to_unit_norm() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::zeros(&[2]), false);
        store.entry_mut(id).grad.copy_from_slice(&[6.0, 8.0]);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let stats = adam.step(&mut store, 0.0).unwrap();
        assert!((stats.grad_norm - 10.0).abs() < 1e-9);
        assert!(stats.clipped);
        // first moment holds (1 - beta1) * clipped gradient
        let m: f64 = adam.m[0]
            .iter()
            .map(|&x| (x as f64 / 0.1).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((m - 1.0).abs() < 1e-5, "{m}");
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut store = scalar_store(1.0, f32::NAN);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let err = adam.step(&mut store, 0.1).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
        assert_eq!(store.entries()[0].value.item(), 1.0);
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn zero_rate_skips_decay() {
        let mut store = scalar_store(3.0, 0.5);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        adam.step(&mut store, 0.0).unwrap();
        assert_eq!(store.entries()[0].value.item(), 3.0);
    }

    #[test]
    fn decay_applies_only_to_flagged_tensors() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::scalar(1.0f32), true);
        store.add("b", Tensor::scalar(1.0f32), false);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        adam.step(&mut store, 0.5).unwrap();
        assert!((store.entries()[0].value.item() - 0.95).abs() < 1e-7);
        assert_eq!(store.entries()[1].value.item(), 1.0);
    }

    #[test]
    fn step_count_strictly_increases() {
        let mut store = scalar_store(0.0, 1.0);
        let mut adam = AdamState::new(&store, AdamConfig::default());
        let mut last = adam.step;
        for _ in 0..5 {
            adam.step(&mut store, 1e-3).unwrap();
            assert!(adam.step > last);
            last = adam.step;
        }
    }

    fn atari() -> LrSchedule {
        LrSchedule::Cosine {
            base: 6e-4,
            warmup_tokens: 512.0 * 20.0,
            final_tokens: 6.0 * 500_000.0 * 30.0,
            min_ratio: 0.1,
        }
    }

    #[test]
    fn cosine_schedule_boundaries() {
        let s = atari();
        assert_eq!(s.rate(0, 512), 0.0);
        // 20 steps of 512 tokens reach the warmup budget exactly
        assert!((s.rate(20, 512) - 6e-4).abs() < 1e-15);
        assert!((s.rate(10, 512) - 3e-4).abs() < 1e-15);
        let end = s.rate(1_000_000, 512);
        assert!((end - 6e-5).abs() < 1e-12, "{end}");
    }

    #[test]
    fn warmup_schedule_is_constant_after_budget() {
        let s = LrSchedule::Warmup {
            base: 1e-4,
            warmup_steps: 1e5,
        };
        assert_eq!(s.rate(0, 1), 0.0);
        assert!((s.rate(50_000, 1) - 5e-5).abs() < 1e-15);
        assert_eq!(s.rate(200_000, 1), 1e-4);
    }
}
