use std::collections::HashMap;

use super::array::Tensor;
use super::param::ParamStore;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Momentum SGD with L2 weight decay.
///
/// The first step initializes the momentum buffer with the raw update
/// direction, so two steps on a constant gradient `g` move a parameter by
/// `g + 1.9·g` at `lr = 1`, `momentum = 0.9`.
#[derive(Clone, Debug)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    buffers: HashMap<String, Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) || weight_decay < 0.0 {
            return Err(Error::invalid(format!(
                "momentum must be in [0, 1) and weight decay non-negative (got {momentum}, {weight_decay})"
            )));
        }
        Ok(Self {
            momentum,
            weight_decay,
            buffers: HashMap::new(),
        })
    }

    /// Update every trainable parameter named in `names`.
    ///
    /// Non-trainable names are skipped, so a frozen parameter is never
    /// modified. A trainable parameter without a gradient is an error.
    pub fn step<'a>(
        &mut self,
        store: &mut ParamStore<T>,
        names: impl IntoIterator<Item = &'a str>,
        lr: f64,
    ) -> Result<()> {
        let lr = T::c(lr);
        let mu = T::c(self.momentum);
        let wd = T::c(self.weight_decay);
        for name in names {
            let id = store.id(name)?;
            let p = store.get(id);
            if !p.trainable() {
                continue;
            }
            let grad = p
                .grad
                .as_ref()
                .ok_or_else(|| Error::Optimizer(format!("trainable parameter `{name}` has no gradient")))?;
            let mut dir = grad.clone();
            if self.weight_decay != 0.0 {
                for (d, &v) in dir.data_mut().iter_mut().zip(p.value.data()) {
                    *d += wd * v;
                }
            }
            let update = match self.buffers.get_mut(name) {
                Some(buf) if self.momentum != 0.0 => {
                    for (b, &d) in buf.data_mut().iter_mut().zip(dir.data()) {
                        *b = mu * *b + d;
                    }
                    buf.clone()
                }
                _ => {
                    if self.momentum != 0.0 {
                        self.buffers.insert(name.to_string(), dir.clone());
                    }
                    dir
                }
            };
            let value = store.value_mut(id);
            for (v, &u) in value.data_mut().iter_mut().zip(update.data()) {
                *v -= lr * u;
            }
            if !value.is_finite() {
                return Err(Error::NonFinite("sgd step"));
            }
        }
        Ok(())
    }
}

/// `base_lr · (1 − iter/max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::invalid("poly schedule needs max_iter > 0"));
    }
    if iter > max_iter {
        return Err(Error::invalid(format!("iteration {iter} exceeds max_iter {max_iter}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}
