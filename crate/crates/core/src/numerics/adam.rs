use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Adam hyper-parameters plus the warmup / polynomial-decay schedule and
/// global gradient-norm clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup from 0 to `lr` over this many steps.
    pub warmup_steps: u64,
    /// Step at which the polynomial decay reaches `end_lr`. Zero disables decay.
    pub total_steps: u64,
    pub end_lr: f64,
    pub decay_power: f64,
    /// Global L2 norm the gradients are clipped to. Zero disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup_steps: 1000,
            total_steps: 0,
            end_lr: 0.0,
            decay_power: 1.0,
            clip_norm: 2.0,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.end_lr >= 0.0
            && self.end_lr <= self.lr
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.decay_power > 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings: {self:?}")))
        }
    }

    /// Learning rate used by the `step`-th update (1-based).
    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        if self.total_steps <= self.warmup_steps {
            return self.lr;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let frac = ((step - self.warmup_steps) as f64 / span).min(1.0);
        (self.lr - self.end_lr) * (1.0 - frac).powf(self.decay_power) + self.end_lr
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Scalar = f32> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub config: AdamConfig,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            step: 0,
            m: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.dims())).collect(),
            config,
        })
    }
}

/// One clipped, bias-corrected Adam update of `params` in place.
///
/// Fails without touching anything if any gradient is non-finite or does not
/// match its parameter.
pub fn adam_step<T: Scalar>(
    params: &mut [Tensor<T>],
    grads: &[Tensor<T>],
    names: &[String],
    state: &mut AdamState<T>,
) -> Result<StepStats> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
    let mut sq = 0.0f64;
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dims() != g.dims() {
            return Err(Error::Training {
                tensor: name(i),
                message: format!("gradient dims {:?} vs param dims {:?}", g.dims(), p.dims()),
            });
        }
        if !g.is_finite() {
            return Err(Error::Training {
                tensor: name(i),
                message: "non-finite gradient".into(),
            });
        }
        sq += g.data().iter().fold(0.0, |a, v| a + v.as_f64() * v.as_f64());
    }
    let grad_norm = sq.sqrt();
    let cfg = &state.config;
    let clip_scale = if cfg.clip_norm > 0.0 && grad_norm > cfg.clip_norm {
        cfg.clip_norm / grad_norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step;
    let lr = cfg.lr_at(t);
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - cfg.beta1.powf(t as f64));
    let bc2 = T::from_f64(1.0 - cfg.beta2.powf(t as f64));
    let eps = T::from_f64(cfg.eps);
    let lr_t = T::from_f64(lr);
    let cs = T::from_f64(clip_scale);

    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let pd = p.data_mut();
        for j in 0..pd.len() {
            let gj = g[j] * cs;
            m[j] = b1 * m[j] + (one - b1) * gj;
            v[j] = b2 * v[j] + (one - b2) * gj * gj;
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            pd[j] = pd[j] - lr_t * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(StepStats {
        lr,
        grad_norm,
        clipped: clip_scale < 1.0,
    })
}
