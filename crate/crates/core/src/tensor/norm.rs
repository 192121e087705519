use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::array::Tensor;
use super::graph::{BatchStats, Graph, Var};
use super::param::ParamStore;
use super::scalar::Scalar;
use crate::error::{Error, Result};

/// Forward-pass mode for batch normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            other => Err(Error::invalid(format!(
                "batch-norm mode must be train or eval, got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Train => "train",
            Mode::Eval => "eval",
        })
    }
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Batch-norm state stored in a [`ParamStore`] under `<prefix>.gamma`,
/// `.beta`, `.running_mean` and `.running_var`.
///
/// Running statistics follow `r ← (1 − momentum)·r + momentum·batch`, with
/// the unbiased batch variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub prefix: String,
    pub channels: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn gamma(&self) -> String {
        format!("{}.gamma", self.prefix)
    }

    pub fn beta(&self) -> String {
        format!("{}.beta", self.prefix)
    }

    pub fn running_mean(&self) -> String {
        format!("{}.running_mean", self.prefix)
    }

    pub fn running_var(&self) -> String {
        format!("{}.running_var", self.prefix)
    }

    pub fn param_names(&self) -> [String; 2] {
        [self.gamma(), self.beta()]
    }

    pub fn buffer_names(&self) -> [String; 2] {
        [self.running_mean(), self.running_var()]
    }

    /// Identity-initialized state.
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, prefix: impl Into<String>, channels: usize) -> Result<Self> {
        let bn = Self {
            prefix: prefix.into(),
            channels,
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        };
        store.insert(bn.gamma(), Tensor::full([channels], T::one()), true)?;
        store.insert(bn.beta(), Tensor::zeros([channels]), true)?;
        store.insert(bn.running_mean(), Tensor::zeros([channels]), false)?;
        store.insert(bn.running_var(), Tensor::full([channels], T::one()), false)?;
        Ok(bn)
    }

    /// Copy of `self` stored under a new prefix, values duplicated.
    pub fn duplicate<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: impl Into<String>) -> Result<Self> {
        let bn = Self {
            prefix: prefix.into(),
            ..self.clone()
        };
        for (src, dst, trainable) in [
            (self.gamma(), bn.gamma(), true),
            (self.beta(), bn.beta(), true),
            (self.running_mean(), bn.running_mean(), false),
            (self.running_var(), bn.running_var(), false),
        ] {
            let value = store.value(&src)?.clone();
            store.insert(dst, value, trainable)?;
        }
        Ok(bn)
    }

    /// Normalize `x` without touching `store`. In train mode the batch
    /// statistics are returned so the caller can fold them into the running
    /// statistics with [`BatchNorm::update_running`].
    pub fn forward<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if self.eps < 0.0 {
            return Err(Error::invalid("batch-norm eps must be non-negative"));
        }
        let gamma = graph.param(store, &self.gamma())?;
        let beta = graph.param(store, &self.beta())?;
        let eps = T::c(self.eps);
        match mode {
            Mode::Eval => {
                let rm = store.value(&self.running_mean())?.data();
                let rv = store.value(&self.running_var())?.data();
                Ok((graph.batch_norm_eval(x, gamma, beta, rm, rv, eps)?, None))
            }
            Mode::Train => {
                let (y, stats) = graph.batch_norm_train(x, gamma, beta, eps)?;
                Ok((y, Some(stats)))
            }
        }
    }

    /// `r ← (1 − momentum)·r + momentum·batch` for mean and unbiased variance.
    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, stats: &BatchStats<T>) -> Result<()> {
        let mom = T::c(self.momentum);
        let keep = T::one() - mom;
        let unbias = if stats.count > 1 {
            T::from_usize(stats.count).unwrap() / T::from_usize(stats.count - 1).unwrap()
        } else {
            T::one()
        };
        let mut rm = store.value(&self.running_mean())?.clone();
        let mut rv = store.value(&self.running_var())?.clone();
        if rm.len() != stats.mean.len() {
            return Err(Error::shape("batch_norm", "statistics do not match channel count"));
        }
        for (r, &m) in rm.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + mom * m;
        }
        for (r, &v) in rv.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + mom * v * unbias;
        }
        store.set_value(&self.running_mean(), rm)?;
        store.set_value(&self.running_var(), rv)?;
        Ok(())
    }
}

/// Batch normalization over the channel axis of an NCHW tensor. Train mode
/// normalizes by batch statistics and updates the running statistics; eval
/// mode normalizes by the running statistics.
pub fn batch_norm<T: Scalar>(
    graph: &mut Graph<T>,
    store: &mut ParamStore<T>,
    state: &BatchNorm,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let (y, stats) = state.forward(graph, store, x, mode)?;
    if let Some(stats) = stats {
        state.update_running(store, &stats)?;
    }
    Ok(y)
}
