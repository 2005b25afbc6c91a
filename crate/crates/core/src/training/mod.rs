//! The four layer-local training algorithms, the classification heads, and
//! inference.

mod head;
mod run;
mod step;

pub use head::{
    ff_onepass_features, final_layer_features, predict_goodness, predict_head, top_k_accuracy,
    train_ff_onepass_head, train_head, train_head_stage2, HeadReport, PassCounter,
};
pub use run::{
    evaluate, prepare_data, run_experiment, stream_seed, Clock, EpochReport, EvalResult, NoClock,
    PreparedData, Progress, RunOutcome, TestReport, Trainer, ValidationReport,
};
pub use step::{
    cff_layer_gradients, cff_layer_step, contrastive_input, encoder_gradients, evaluate_cff_batch, evaluate_ff_batch,
    ff_input, ff_layer_gradients, ff_layer_step, train_cff_batch, train_ff_batch, wrong_labels,
    CffBatchConfig, GoodnessLoss, LayerObjective, LayerStep,
};

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentationPolicy, Split};
use crate::error::{Error, Result};
use crate::losses::{margin_schedule, LossHyperparams, MarginSchedule};
use crate::models::{ImageShape, LabelMode, LabelPatchTable, ModelSpec};
use crate::optim::AdamWConfig;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ff,
    #[serde(rename = "symba")]
    SymBa,
    Cff,
    #[serde(rename = "cff_m")]
    CffM,
}

impl Algorithm {
    pub fn is_contrastive(self) -> bool {
        matches!(self, Algorithm::Cff | Algorithm::CffM)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Ff => "FF",
            Algorithm::SymBa => "SymBa",
            Algorithm::Cff => "CFF",
            Algorithm::CffM => "CFF+M",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardMode {
    /// A single view per sample: the loss sees `B` rows.
    One,
    /// Two augmented views: the loss sees `2B` rows.
    #[default]
    Two,
}

/// How FF encodes the label of an MLP input. A ViT always uses random
/// patches of the patch size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelEncoding {
    #[default]
    OneHot,
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Mnist,
    Cifar10,
}

impl DatasetKind {
    pub fn image_shape(self) -> ImageShape {
        match self {
            DatasetKind::Mnist => ImageShape {
                channels: 1,
                height: 28,
                width: 28,
            },
            DatasetKind::Cifar10 => ImageShape {
                channels: 3,
                height: 32,
                width: 32,
            },
        }
    }

    pub fn classes(self) -> usize {
        10
    }
}

/// Linear head trained with cross-entropy on frozen features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            epochs: 20,
            batch_size: 256,
            optimizer: AdamWConfig {
                lr: 1e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
        }
    }
}

/// Per-epoch diagnostics on the validation split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Fisher criterion of every layer's pooled validation features.
    pub fisher: bool,
    /// At most this many validation samples enter the Fisher criterion.
    pub fisher_samples: usize,
    pub fisher_ridge: f64,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            fisher: true,
            fisher_samples: 2000,
            fisher_ridge: 1e-6,
        }
    }
}

/// Everything that determines a run, given the dataset bytes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub algorithm: Algorithm,
    pub dataset: DatasetKind,
    pub model: ModelSpec,
    #[serde(default)]
    pub loss: LossHyperparams,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub head: HeadConfig,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub augmentation: AugmentationPolicy,
    /// Fraction of training labels replaced by a wrong class.
    #[serde(default)]
    pub label_noise: f64,
    /// Fraction of the training set kept.
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
    #[serde(default = "default_val")]
    pub val_fraction: f64,
    #[serde(default)]
    pub forward_mode: ForwardMode,
    /// Feed each contrastive layer's successor the row-normalized output.
    #[serde(default)]
    pub normalize_between: bool,
    #[serde(default)]
    pub label_encoding: LabelEncoding,
    /// Multiplier applied to the FF label vectors.
    #[serde(default = "default_label_scale")]
    pub label_scale: f64,
    /// Also train the one-pass head of an FF/SymBa encoder.
    #[serde(default = "default_true")]
    pub ff_head: bool,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
}

fn default_batch() -> usize {
    128
}
fn default_keep() -> f64 {
    1.0
}
fn default_val() -> f64 {
    0.1
}
fn default_label_scale() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}

impl ExperimentConfig {
    /// A config with declared defaults for everything but the essentials.
    pub fn new(algorithm: Algorithm, dataset: DatasetKind, model: ModelSpec, epochs: usize) -> Self {
        ExperimentConfig {
            name: String::new(),
            algorithm,
            dataset,
            model,
            loss: LossHyperparams::default(),
            optimizer: AdamWConfig::default(),
            head: HeadConfig::default(),
            epochs,
            batch_size: default_batch(),
            seed: 0,
            augmentation: AugmentationPolicy::default(),
            label_noise: 0.0,
            keep_fraction: 1.0,
            val_fraction: 0.1,
            forward_mode: ForwardMode::Two,
            normalize_between: false,
            label_encoding: LabelEncoding::OneHot,
            label_scale: 1.0,
            ff_head: true,
            diagnostics: DiagnosticsConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        self.model.validate(self.dataset.image_shape())?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.head.optimizer.validate()?;
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be >= 2");
        }
        if self.head.batch_size == 0 {
            return bad("head.batch_size must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 1]");
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad("keep_fraction must lie in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.val_fraction) || self.val_fraction == 0.0 {
            return bad("val_fraction must lie in (0, 1)");
        }
        if !(self.label_scale > 0.0) {
            return bad("label_scale must be > 0");
        }
        if !self.algorithm.is_contrastive() && self.augmentation != AugmentationPolicy::default() {
            return bad("augmentation applies to contrastive algorithms only");
        }
        Ok(())
    }

    /// Per-layer margins for CFF+M, `None` otherwise.
    pub fn margins(&self) -> Result<Option<MarginSchedule>> {
        match self.algorithm {
            Algorithm::CffM => margin_schedule(self.model.layers(), self.loss.m0, self.loss.m_final).map(Some),
            _ => Ok(None),
        }
    }

    pub fn label_mode(&self) -> LabelMode {
        match (self.algorithm.is_contrastive(), self.model) {
            (true, _) => LabelMode::None,
            (false, ModelSpec::Vit(s)) => LabelMode::Patch(s.patch_dim(self.dataset.image_shape())),
            (false, ModelSpec::Mlp(_)) => LabelMode::Patch(self.dataset.classes()),
        }
    }

    /// The FF label vectors, `None` for contrastive algorithms.
    pub fn label_table(&self) -> Option<LabelPatchTable<f32>> {
        let LabelMode::Patch(width) = self.label_mode() else {
            return None;
        };
        let classes = self.dataset.classes();
        let raw = match (self.model, self.label_encoding) {
            (ModelSpec::Mlp(_), LabelEncoding::OneHot) => LabelPatchTable::one_hot(classes),
            _ => LabelPatchTable::random(classes, width, stream_seed(self.seed, "label_table")),
        };
        let scale = self.label_scale as f32;
        LabelPatchTable::from_tensor(raw.tensor().map(|v| v * scale)).ok()
    }

    pub fn goodness_loss(&self) -> Option<GoodnessLoss> {
        match self.algorithm {
            Algorithm::Ff => Some(GoodnessLoss::Ff {
                theta: self.loss.theta as f32,
            }),
            Algorithm::SymBa => Some(GoodnessLoss::SymBa {
                alpha: self.loss.alpha as f32,
            }),
            _ => None,
        }
    }

    pub fn cff_batch_config(&self) -> Result<CffBatchConfig> {
        Ok(CffBatchConfig {
            tau: self.loss.tau as f32,
            margins: self
                .margins()?
                .map(|s| s.margins().iter().map(|&m| m as f32).collect()),
            normalize_between: self.normalize_between,
        })
    }
}

/// One row of the training log. `layer` is `None` for head records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub layer: Option<usize>,
    pub split: Split,
    /// Mean loss per input row.
    pub loss: f64,
    pub rk_pct: Option<f64>,
    pub fisher: Option<f64>,
    pub accuracy: Option<f64>,
    pub seconds: f64,
}

/// Append-only log with at most one record per (epoch, layer, split).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    records: Vec<LogRecord>,
}

impl TrainLog {
    pub fn new() -> Self {
        TrainLog::default()
    }

    pub fn push(&mut self, record: LogRecord) -> Result<()> {
        let dup = self
            .records
            .iter()
            .any(|r| r.epoch == record.epoch && r.layer == record.layer && r.split == record.split);
        if dup {
            return Err(Error::Argument(alloc::format!(
                "duplicate log record for epoch {} layer {:?} split {:?}",
                record.epoch,
                record.layer,
                record.split
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    /// Loss of `layer` on `split` at `epoch`.
    pub fn loss(&self, epoch: usize, layer: usize, split: Split) -> Option<f64> {
        self.records
            .iter()
            .find(|r| r.epoch == epoch && r.layer == Some(layer) && r.split == split)
            .map(|r| r.loss)
    }
}

/// Features of every sample handed to a head, with their labels.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}
