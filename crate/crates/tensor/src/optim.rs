use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::params::{Bound, ParamStore};
use crate::tape::Gradients;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Array,
    pub v: Array,
    pub step: u64,
}

impl Moments {
    pub fn new(shape: &[usize]) -> Self {
        Moments {
            m: Array::zeros(shape.to_vec()),
            v: Array::zeros(shape.to_vec()),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `param` in place.
pub fn adam_step(
    name: &str,
    param: &mut Array,
    grad: &Array,
    state: &mut Moments,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != state.m.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "adam_step",
            lhs: param.shape().to_vec(),
            rhs: grad.shape().to_vec(),
        });
    }
    if !grad.is_finite() {
        return Err(TensorError::NonFiniteGradient(name.to_string()));
    }
    let (b1, b2) = betas;
    state.step += 1;
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for (((p, &g), mi), vi) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(m.iter_mut())
        .zip(v.iter_mut())
    {
        *mi = b1 * *mi + (1.0 - b1) * g;
        *vi = b2 * *vi + (1.0 - b2) * g * g;
        let mhat = *mi / c1;
        let vhat = *vi / c2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Adam over a [`ParamStore`]. Moments are kept per parameter and only touched
/// for parameters that were bound as trainable on the step's tape, so frozen
/// parameters keep both their value and their moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    moments: Vec<Option<Moments>>,
    /// Per-parameter multipliers of the rate; missing entries are 1.
    lr_scale: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            moments: Vec::new(),
            lr_scale: Vec::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Parameter `index` is stepped with `scale * lr`.
    pub fn set_lr_scale(&mut self, index: usize, scale: f64) {
        if self.lr_scale.len() <= index {
            self.lr_scale.resize(index + 1, 1.0);
        }
        self.lr_scale[index] = scale;
    }

    pub fn moments(&self, index: usize) -> Option<&Moments> {
        self.moments.get(index).and_then(|m| m.as_ref())
    }

    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound, grads: &Gradients) -> Result<()> {
        if self.moments.len() < store.len() {
            self.moments.resize(store.len(), None);
        }
        let cfg = self.config;
        for (i, param) in store.iter_mut().enumerate() {
            if !bound.is_trainable(i) {
                continue;
            }
            let grad = grads.get(bound.var_at(i));
            let state = self.moments[i].get_or_insert_with(|| Moments::new(param.value.shape()));
            adam_step(
                &param.name,
                &mut param.value,
                &grad,
                state,
                cfg.lr * self.lr_scale.get(i).copied().unwrap_or(1.0),
                (cfg.beta1, cfg.beta2),
                cfg.eps,
            )?;
        }
        Ok(())
    }
}
