//! Backbone building blocks: plain convolution blocks, reparameterized
//! convolutions with per-task modulators, residual adapters and the
//! multi-task [`Network`] that composes them.

mod adapter;
mod block;
mod network;
mod rcm;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use adapter::{ResidualAdapter, Topology};
pub use block::{ConvBlock, ConvParams, PlainTaskLayer};
pub use network::{BackboneLayer, Form, ForwardTrace, Head, LayerOutput, LayerTrace, Layout, Network, TaskEntry};
pub use rcm::{Modulator, ModulatorInit, RcmConvLayer, RcmTaskLayer};

/// One convolution of a backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    /// Defaults to `kernel / 2`.
    #[serde(default)]
    pub padding: Option<usize>,
    #[serde(default)]
    pub bias: bool,
    #[serde(default = "yes")]
    pub batch_norm: bool,
    #[serde(default = "yes")]
    pub relu: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ConvSpec {
    pub fn new(c_in: usize, c_out: usize, kernel: usize) -> Self {
        Self {
            c_in,
            c_out,
            kernel,
            stride: 1,
            padding: None,
            bias: false,
            batch_norm: true,
            relu: true,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.kernel / 2)
    }

    /// `k²·c_in·c_out`.
    pub fn weight_count(&self) -> usize {
        self.kernel * self.kernel * self.c_in * self.c_out
    }

    /// `c_in·k²`, the length of one filter.
    pub fn fan_in(&self) -> usize {
        self.kernel * self.kernel * self.c_in
    }

    /// Output extent for an input extent.
    pub fn out_size(&self, size: usize) -> Option<usize> {
        let p = self.padding();
        (size + 2 * p >= self.kernel).then(|| (size + 2 * p - self.kernel) / self.stride + 1)
    }
}

/// Stage layout of a backbone. Consecutive layers must chain channels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub layers: Vec<ConvSpec>,
}

impl BackboneSpec {
    /// Chain of 3×3 conv + BN + ReLU layers with the given widths.
    pub fn simple(in_channels: usize, widths: &[usize]) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut c_in = in_channels;
        for &w in widths {
            layers.push(ConvSpec::new(c_in, w, 3));
            c_in = w;
        }
        Self { in_channels, layers }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("backbone needs at least one layer"));
        }
        let mut c = self.in_channels;
        for (i, l) in self.layers.iter().enumerate() {
            if l.c_in != c {
                return Err(Error::invalid(format!(
                    "layer {i} expects {} input channels but receives {c}",
                    l.c_in
                )));
            }
            if l.kernel == 0 || l.stride == 0 || l.c_out == 0 {
                return Err(Error::invalid(format!(
                    "layer {i}: kernel, stride and width must be positive"
                )));
            }
            c = l.c_out;
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.c_out)
    }

    /// Every layer split into a bias-free k×k convolution without
    /// normalization followed by a 1×1 convolution carrying the original
    /// bias, batch norm and activation. Pretraining this network trains a
    /// factored backbone directly.
    pub fn factored(&self) -> Self {
        let mut layers = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            layers.push(ConvSpec {
                bias: false,
                batch_norm: false,
                relu: false,
                ..*l
            });
            layers.push(ConvSpec {
                c_in: l.c_out,
                kernel: 1,
                stride: 1,
                padding: Some(0),
                ..*l
            });
        }
        Self {
            in_channels: self.in_channels,
            layers,
        }
    }
}

/// `g·v/‖v‖`: a direction scaled to length `|g|`.
pub fn nff_effective_weight<T: Scalar>(v: &Tensor<T>, g: T) -> Result<Tensor<T>> {
    let norm = v.data().iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm <= T::zero() {
        return Err(Error::Degenerate(
            "normalized feature fusion on a zero-norm direction".into(),
        ));
    }
    Ok(v.scale(g / norm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nff_examples() {
        let v = Tensor::<f64>::from_f64([2], &[3.0, 4.0]).unwrap();
        let w = nff_effective_weight(&v, 2.0).unwrap();
        assert!((w.data()[0] - 1.2).abs() < 1e-12 && (w.data()[1] - 1.6).abs() < 1e-12);
        assert!(nff_effective_weight(&v, 0.0).unwrap().data().iter().all(|&x| x == 0.0));
        let u = Tensor::<f64>::from_f64([2], &[0.6, 0.8]).unwrap();
        assert!(nff_effective_weight(&u, 1.0).unwrap().max_abs_diff(&u).unwrap() < 1e-15);
        assert!(nff_effective_weight(&Tensor::<f64>::zeros([3]), 1.0).is_err());
    }

    #[test]
    fn backbone_chain_validation() {
        assert!(BackboneSpec::simple(3, &[8, 16]).validate().is_ok());
        let mut bad = BackboneSpec::simple(3, &[8, 16]);
        bad.layers[1].c_in = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn factored_spec_doubles_depth() {
        let s = BackboneSpec::simple(3, &[8, 16]);
        let f = s.factored();
        f.validate().unwrap();
        assert_eq!(f.layers.len(), 4);
        assert!(!f.layers[0].batch_norm && f.layers[1].batch_norm);
        assert_eq!(f.layers[1].kernel, 1);
    }

    #[test]
    fn spec_json_defaults() {
        let s: ConvSpec = serde_json::from_str(r#"{"c_in":3,"c_out":8,"kernel":3}"#).unwrap();
        assert_eq!(s, ConvSpec::new(3, 8, 3));
        assert_eq!(s.padding(), 1);
    }
}
