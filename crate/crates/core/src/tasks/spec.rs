use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which parameter subset is task-specific and trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptationMode {
    /// Shared convolutions and batch norms; only the head trains.
    FreezeEncoder,
    /// Task-specific batch norms on shared convolutions.
    TaskSpecificBN,
    /// Task-specific convolutions with shared (frozen) batch norms.
    TaskSpecificConv,
    /// Everything task-specific.
    SingleTask,
    /// Frozen filter bank with task-specific modulators and batch norms.
    RCM,
    SeriesRA,
    ParallelRA,
}

impl AdaptationMode {
    pub const ALL: [AdaptationMode; 7] = [
        AdaptationMode::FreezeEncoder,
        AdaptationMode::TaskSpecificBN,
        AdaptationMode::TaskSpecificConv,
        AdaptationMode::SingleTask,
        AdaptationMode::RCM,
        AdaptationMode::SeriesRA,
        AdaptationMode::ParallelRA,
    ];

    /// CLI spelling.
    pub fn cli_name(self) -> &'static str {
        match self {
            AdaptationMode::FreezeEncoder => "freeze",
            AdaptationMode::TaskSpecificBN => "bn-only",
            AdaptationMode::TaskSpecificConv => "conv-only",
            AdaptationMode::SingleTask => "single",
            AdaptationMode::RCM => "rcm",
            AdaptationMode::SeriesRA => "series-ra",
            AdaptationMode::ParallelRA => "parallel-ra",
        }
    }

    /// Whether the mode needs a reparameterized (filter bank) backbone.
    pub fn needs_filter_bank(self) -> bool {
        self == AdaptationMode::RCM
    }

    pub fn has_task_bn(self) -> bool {
        !matches!(self, AdaptationMode::FreezeEncoder | AdaptationMode::TaskSpecificConv)
    }

    pub fn has_task_conv(self) -> bool {
        matches!(self, AdaptationMode::TaskSpecificConv | AdaptationMode::SingleTask)
    }
}

impl FromStr for AdaptationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AdaptationMode::ALL
            .into_iter()
            .find(|m| m.cli_name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown mode `{s}` (expected one of rcm, series-ra, parallel-ra, freeze, bn-only, conv-only, single)"
                ))
            })
    }
}

impl fmt::Display for AdaptationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

/// Output head of a task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum HeadKind {
    /// Per-pixel 1×1 convolution with `channels` outputs.
    Dense { channels: usize },
    /// Global average pool followed by a linear layer.
    Classify { classes: usize },
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Dense { channels } => channels,
            HeadKind::Classify { classes } => classes,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LossKind {
    /// Binary cross-entropy on logits with per-class weights.
    WeightedBce {
        pos_weight: f64,
        neg_weight: f64,
    },
    CrossEntropy,
    /// L1 over foreground pixels (normals) or all pixels.
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricKind {
    Miou,
    MeanErr,
    Rmse,
    F1Edge,
    Accuracy,
}

impl MetricKind {
    pub fn direction(self) -> Direction {
        match self {
            MetricKind::MeanErr | MetricKind::Rmse => Direction::LowerBetter,
            _ => Direction::HigherBetter,
        }
    }
}

/// `l_i` of the drop metric: whether a higher or a lower value is better.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    /// The exponent `l_i`: 1 for lower-better, 0 for higher-better.
    pub fn exponent(self) -> i32 {
        match self {
            Direction::HigherBetter => 0,
            Direction::LowerBetter => 1,
        }
    }
}

/// Label field of a synthetic sample a task learns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    Edge,
    SemSeg,
    Parts,
    Normals,
    Saliency,
    Depth,
    Class,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: String,
    pub target: TargetKind,
    pub head: HeadKind,
    pub loss: LossKind,
    pub loss_weight: f64,
    pub metric: MetricKind,
    pub direction: Direction,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        validate_task_id(&self.id)?;
        if !(self.loss_weight > 0.0 && self.loss_weight.is_finite()) {
            return Err(Error::invalid(format!(
                "task `{}`: loss weight must be positive",
                self.id
            )));
        }
        if self.head.outputs() == 0 {
            return Err(Error::invalid(format!(
                "task `{}`: head needs at least one output",
                self.id
            )));
        }
        let expected = match self.target {
            TargetKind::Edge | TargetKind::Saliency | TargetKind::Depth => Some(1),
            TargetKind::Normals => Some(2),
            _ => None,
        };
        if let Some(ch) = expected {
            if self.head != (HeadKind::Dense { channels: ch }) {
                return Err(Error::invalid(format!(
                    "task `{}`: target {:?} needs a dense head with {ch} channel(s)",
                    self.id, self.target
                )));
            }
        }
        match (self.target, self.head) {
            (TargetKind::Class, HeadKind::Dense { .. })
            | (TargetKind::SemSeg | TargetKind::Parts, HeadKind::Classify { .. }) => {
                return Err(Error::invalid(format!(
                    "task `{}`: head kind does not fit the target",
                    self.id
                )));
            }
            _ => {}
        }
        let loss_ok = match self.target {
            TargetKind::Edge | TargetKind::Saliency => matches!(self.loss, LossKind::WeightedBce { .. }),
            TargetKind::SemSeg | TargetKind::Parts | TargetKind::Class => self.loss == LossKind::CrossEntropy,
            TargetKind::Normals | TargetKind::Depth => self.loss == LossKind::L1,
        };
        if !loss_ok {
            return Err(Error::invalid(format!(
                "task `{}`: loss {:?} does not fit target {:?}",
                self.id, self.loss, self.target
            )));
        }
        Ok(())
    }

    fn preset(
        id: &str,
        target: TargetKind,
        head: HeadKind,
        loss: LossKind,
        loss_weight: f64,
        metric: MetricKind,
    ) -> Self {
        Self {
            id: id.to_string(),
            target,
            head,
            loss,
            loss_weight,
            metric,
            direction: metric.direction(),
        }
    }

    /// Edge detection: BCE ×50, edge pixels weighted 0.95 and the rest 0.05.
    pub fn edge() -> Self {
        Self::preset(
            "edge",
            TargetKind::Edge,
            HeadKind::Dense { channels: 1 },
            LossKind::WeightedBce {
                pos_weight: 0.95,
                neg_weight: 0.05,
            },
            50.0,
            MetricKind::F1Edge,
        )
    }

    pub fn semseg() -> Self {
        Self::preset(
            "semseg",
            TargetKind::SemSeg,
            HeadKind::Dense {
                channels: crate::data::SEMSEG_CLASSES,
            },
            LossKind::CrossEntropy,
            1.0,
            MetricKind::Miou,
        )
    }

    pub fn parts() -> Self {
        Self::preset(
            "parts",
            TargetKind::Parts,
            HeadKind::Dense {
                channels: crate::data::PARTS_CLASSES,
            },
            LossKind::CrossEntropy,
            2.0,
            MetricKind::Miou,
        )
    }

    pub fn normals() -> Self {
        Self::preset(
            "normals",
            TargetKind::Normals,
            HeadKind::Dense { channels: 2 },
            LossKind::L1,
            10.0,
            MetricKind::MeanErr,
        )
    }

    pub fn saliency() -> Self {
        Self::preset(
            "saliency",
            TargetKind::Saliency,
            HeadKind::Dense { channels: 1 },
            LossKind::WeightedBce {
                pos_weight: 1.0,
                neg_weight: 1.0,
            },
            5.0,
            MetricKind::Miou,
        )
    }

    pub fn depth() -> Self {
        Self::preset(
            "depth",
            TargetKind::Depth,
            HeadKind::Dense { channels: 1 },
            LossKind::L1,
            1.0,
            MetricKind::Rmse,
        )
    }

    /// Shape classification used for pretraining.
    pub fn classification() -> Self {
        Self::preset(
            "class",
            TargetKind::Class,
            HeadKind::Classify {
                classes: crate::data::SHAPE_CLASSES,
            },
            LossKind::CrossEntropy,
            1.0,
            MetricKind::Accuracy,
        )
    }

    /// The five dense tasks of the benchmark, ordered low- to high-level.
    pub fn benchmark() -> Vec<Self> {
        vec![
            Self::edge(),
            Self::normals(),
            Self::saliency(),
            Self::semseg(),
            Self::parts(),
        ]
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Multiply the loss weight.
    pub fn scaled(mut self, factor: f64) -> Self {
        self.loss_weight *= factor;
        self
    }
}

/// Task ids become parameter-name segments, so keep them simple.
pub fn validate_task_id(id: &str) -> Result<()> {
    if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
        return Err(Error::invalid(format!(
            "task id `{id}` must be non-empty and use only ASCII letters, digits, `_` or `-`"
        )));
    }
    Ok(())
}

/// Optimizer and schedule settings for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub poly_power: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            base_lr: 0.005,
            momentum: 0.9,
            weight_decay: 1e-4,
            poly_power: 0.9,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be positive"));
        }
        if self.base_lr < 0.0 || !self.base_lr.is_finite() {
            return Err(Error::invalid("learning rate must be finite and non-negative"));
        }
        if self.poly_power <= 0.0 {
            return Err(Error::invalid("poly power must be positive"));
        }
        Ok(())
    }
}
