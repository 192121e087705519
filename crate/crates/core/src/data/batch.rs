use super::scene::MultiTaskSample;
use crate::error::{Error, Result};
use crate::tasks::TargetKind;
use crate::tensor::{Scalar, Tensor};

/// Labels of a minibatch for one target, in the layout the losses expect.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets<T> {
    /// `{0, 1}` map, `[n, 1, H, W]`.
    Binary(Tensor<T>),
    /// One class index per pixel (`n·H·W`) or per image (`n`).
    Classes(Vec<usize>),
    /// Real-valued map with an optional element mask.
    Regression { values: Tensor<T>, mask: Option<Vec<bool>> },
}

fn common_size(samples: &[&MultiTaskSample]) -> Result<usize> {
    let first = samples.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let n = first.size();
    if samples.iter().any(|s| s.size() != n) {
        return Err(Error::invalid("batch mixes image sizes"));
    }
    Ok(n)
}

/// `[n, 3, H, W]`.
pub fn stack_images<T: Scalar>(samples: &[&MultiTaskSample]) -> Result<Tensor<T>> {
    let n = common_size(samples)?;
    let data: Vec<T> = samples
        .iter()
        .flat_map(|s| s.image.data().iter().map(|&v| T::c(v as f64)))
        .collect();
    Tensor::new([samples.len(), 3, n, n], data)
}

pub fn targets<T: Scalar>(target: TargetKind, samples: &[&MultiTaskSample]) -> Result<Targets<T>> {
    let n = common_size(samples)?;
    let b = samples.len();
    let labels = samples.iter().map(|s| s.labels()).collect::<Result<Vec<_>>>()?;
    let map = |f: &dyn Fn(&super::Labels) -> &[u8]| -> Result<Tensor<T>> {
        let data = labels
            .iter()
            .flat_map(|l| f(l).iter().map(|&v| T::c(v as f64)))
            .collect();
        Tensor::new([b, 1, n, n], data)
    };
    Ok(match target {
        TargetKind::Edge => Targets::Binary(map(&|l| &l.edge)?),
        TargetKind::Saliency => Targets::Binary(map(&|l| &l.saliency)?),
        TargetKind::SemSeg => Targets::Classes(
            labels
                .iter()
                .flat_map(|l| l.semseg.iter().map(|&c| c as usize))
                .collect(),
        ),
        TargetKind::Parts => Targets::Classes(
            labels
                .iter()
                .flat_map(|l| l.parts.iter().map(|&c| c as usize))
                .collect(),
        ),
        TargetKind::Class => Targets::Classes(labels.iter().map(|l| l.class_label as usize).collect()),
        TargetKind::Normals => {
            let values = labels
                .iter()
                .flat_map(|l| l.normals.iter().map(|&v| T::c(v as f64)))
                .collect();
            let mask = labels
                .iter()
                .flat_map(|l| {
                    let fg: Vec<bool> = l.saliency.iter().map(|&s| s == 1).collect();
                    [fg.clone(), fg].concat()
                })
                .collect();
            Targets::Regression {
                values: Tensor::new([b, 2, n, n], values)?,
                mask: Some(mask),
            }
        }
        TargetKind::Depth => {
            let values = labels
                .iter()
                .flat_map(|l| l.depth.iter().map(|&v| T::c(v as f64)))
                .collect();
            Targets::Regression {
                values: Tensor::new([b, 1, n, n], values)?,
                mask: None,
            }
        }
    })
}
