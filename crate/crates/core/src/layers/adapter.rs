use serde::{Deserialize, Serialize};

use super::ConvSpec;
use crate::error::{Error, Result};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    /// `y + A·y` with `y` the frozen convolution's output.
    Series,
    /// `base(x) + A·x`, with `A` strided like the base convolution.
    Parallel,
}

/// Task-owned 1×1 residual adapter around a frozen convolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualAdapter {
    pub weight: String,
    pub topology: Topology,
}

impl ResidualAdapter {
    /// Zero-initialized adapter, so the adapted layer starts as the base layer.
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &ConvSpec,
        topology: Topology,
    ) -> Result<Self> {
        let shape = match topology {
            Topology::Series => [spec.c_out, spec.c_out, 1, 1],
            Topology::Parallel => {
                // A strided 1×1 path lines up with the base output only for
                // "same" padding.
                if 2 * spec.padding() + 1 != spec.kernel {
                    return Err(Error::invalid(format!(
                        "parallel adapter needs padding (k-1)/2 to match the base stride (kernel {}, padding {})",
                        spec.kernel,
                        spec.padding()
                    )));
                }
                [spec.c_out, spec.c_in, 1, 1]
            }
        };
        let weight = format!("{prefix}.adapter.weight");
        store.insert(&weight, Tensor::zeros(shape), true)?;
        Ok(Self { weight, topology })
    }

    /// Merge the adapter path into the base response `base_out`.
    pub fn apply<T: Scalar>(
        &self,
        graph: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        base_out: Var,
        stride: usize,
    ) -> Result<Var> {
        let a = graph.param(store, &self.weight)?;
        let side = match self.topology {
            Topology::Series => graph.conv2d(base_out, a, None, 1, 0)?,
            Topology::Parallel => graph.conv2d(x, a, None, stride, 0)?,
        };
        if graph.value(side).shape() != graph.value(base_out).shape() {
            return Err(Error::shape(
                "adapter",
                format!(
                    "stride mismatch: adapter path {:?} vs base {:?}",
                    graph.value(side).shape(),
                    graph.value(base_out).shape()
                ),
            ));
        }
        graph.add(base_out, side)
    }
}
