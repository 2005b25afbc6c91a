//! The epoch loop: data preparation, per-batch updates, validation,
//! best-epoch selection, the classification stage and test evaluation.

use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{augment, batch_indices, inject_label_noise, split_validation, subsample, Dataset, Normalization, Split};
use crate::error::{Error, Result};
use crate::losses::ContrastiveStats;
use crate::metrics::fisher_criterion;
use crate::models::{Encoder, Head, LabelPatchTable};
use crate::optim::AdamW;
use crate::tensor::Tensor;

use super::head::{predict_goodness, predict_head, top_k_accuracy, train_ff_onepass_head, train_head_stage2, HeadReport, PassCounter};
use super::step::{
    contrastive_input, evaluate_cff_batch, evaluate_ff_batch, ff_input, train_cff_batch, train_ff_batch, wrong_labels,
    CffBatchConfig, LayerObjective, LayerStep,
};
use super::{Algorithm, ExperimentConfig, ForwardMode, LogRecord, TrainLog};

/// Wall time source; the core crate has no clock of its own.
pub trait Clock {
    fn seconds(&self) -> f64;
}

/// Reports zero elapsed time, making logs byte-reproducible.
#[derive(Clone, Copy, Debug, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn seconds(&self) -> f64 {
        0.0
    }
}

/// Independent seed for a named random stream of one run.
pub fn stream_seed(seed: u64, stream: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Splits and normalization of one run. Images stay in `[0, 1]`; the
/// normalization is applied per batch after augmentation.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub normalization: Normalization,
}

/// Subsampling, then label noise, then the validation split, then the
/// normalization fit on the remaining training images.
pub fn prepare_data(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<PreparedData> {
    let shape = cfg.dataset.image_shape();
    for ds in [train, test] {
        if ds.image_shape() != shape || ds.classes != cfg.dataset.classes() {
            return Err(Error::Config(alloc::format!(
                "dataset: expected {}x{}x{} images in {} classes",
                shape.channels,
                shape.height,
                shape.width,
                cfg.dataset.classes()
            )));
        }
    }
    let kept = subsample(train, cfg.keep_fraction, stream_seed(cfg.seed, "subsample"))?;
    let noisy = inject_label_noise(&kept, cfg.label_noise, stream_seed(cfg.seed, "label_noise"))?;
    let (train, val) = split_validation(&noisy, cfg.val_fraction, stream_seed(cfg.seed, "val_split"))?;
    if train.len() < 2 || val.len() < 2 {
        return Err(Error::Config("dataset: too few samples after subsampling and splitting".into()));
    }
    let normalization = Normalization::fit(&train);
    Ok(PreparedData {
        train,
        val,
        test: test.clone(),
        normalization,
    })
}

/// Validation metrics of every layer after one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub loss: Vec<f64>,
    pub rk: Vec<Option<f64>>,
    pub fisher: Vec<Option<f64>>,
}

impl ValidationReport {
    pub fn mean_loss(&self) -> f64 {
        self.loss.iter().sum::<f64>() / self.loss.len().max(1) as f64
    }
}

/// Per-layer training totals of one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochReport {
    pub loss: Vec<f64>,
    pub stats: Vec<ContrastiveStats>,
    pub batches: usize,
}

/// Encoder, per-layer optimizers and random streams of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub encoder: Encoder<f32>,
    pub optimizers: Vec<AdamW<f32>>,
    pub table: Option<LabelPatchTable<f32>>,
    cff: CffBatchConfig,
    shuffle_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    label_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let encoder = Encoder::init(
            config.model,
            config.dataset.image_shape(),
            config.label_mode(),
            stream_seed(config.seed, "init"),
        )?;
        let optimizers = encoder
            .layers
            .iter()
            .map(|l| AdamW::new(config.optimizer, l.tensors()))
            .collect();
        let seed = config.seed;
        Ok(Trainer {
            table: config.label_table(),
            cff: config.cff_batch_config()?,
            encoder,
            optimizers,
            shuffle_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, "shuffle")),
            augment_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, "augment")),
            label_rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, "wrong_labels")),
            config,
        })
    }

    pub fn cff_config(&self) -> &CffBatchConfig {
        &self.cff
    }

    pub fn objective(&self) -> LayerObjective {
        match self.config.goodness_loss() {
            Some(loss) => LayerObjective::Goodness(loss),
            None => LayerObjective::Contrastive(self.cff.clone()),
        }
    }

    /// Shuffled batch indices for the next epoch.
    pub fn epoch_order(&mut self, n: usize) -> Vec<Vec<usize>> {
        batch_indices(n, self.config.batch_size, Some(&mut self.shuffle_rng))
    }

    /// First-layer input and row labels of one training batch: augmented,
    /// normalized views for contrastive training, `[positives; negatives]`
    /// for FF.
    pub fn prepare_batch(
        &mut self,
        train: &Dataset,
        norm: &Normalization,
        idx: &[usize],
    ) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (images, labels) = train.batch(idx);
        if self.config.algorithm.is_contrastive() {
            let policy = self.config.augmentation;
            let v1 = norm.apply(&augment(&images, &policy, &mut self.augment_rng));
            match self.config.forward_mode {
                ForwardMode::One => contrastive_input(&self.encoder, &[&v1], &labels),
                ForwardMode::Two => {
                    let v2 = norm.apply(&augment(&images, &policy, &mut self.augment_rng));
                    contrastive_input(&self.encoder, &[&v1, &v2], &labels)
                }
            }
        } else {
            let table = self.table.as_ref().expect("FF trainers own a label table");
            let wrong = wrong_labels(&labels, train.classes, &mut self.label_rng);
            let x = ff_input(&self.encoder, &norm.apply(&images), &labels, &wrong, table)?;
            Ok((x, labels))
        }
    }

    /// Updates every layer once on a prepared batch.
    pub fn train_batch(&mut self, input: Tensor<f32>, labels: &[usize]) -> Result<Vec<LayerStep>> {
        match self.config.goodness_loss() {
            Some(loss) => train_ff_batch(&mut self.encoder, &mut self.optimizers, input, loss),
            None => train_cff_batch(&mut self.encoder, &mut self.optimizers, input, labels, &self.cff),
        }
    }

    /// One pass over the training split; losses are means per input row.
    pub fn train_epoch(&mut self, train: &Dataset, norm: &Normalization) -> Result<EpochReport> {
        let layers = self.encoder.num_layers();
        let mut report = EpochReport {
            loss: vec![0.0; layers],
            stats: vec![ContrastiveStats::default(); layers],
            batches: 0,
        };
        let mut rows = 0usize;
        for idx in self.epoch_order(train.len()) {
            let (x, labels) = self.prepare_batch(train, norm, &idx)?;
            rows += if self.config.algorithm.is_contrastive() { labels.len() } else { idx.len() };
            for (l, step) in self.train_batch(x, &labels)?.into_iter().enumerate() {
                if !step.loss.is_finite() {
                    return Err(Error::Numeric(alloc::format!("layer {} loss is {}", l + 1, step.loss)));
                }
                report.loss[l] += step.loss as f64;
                report.stats[l].merge(&step.stats);
            }
            report.batches += 1;
        }
        report.loss.iter_mut().for_each(|v| *v /= rows.max(1) as f64);
        Ok(report)
    }

    /// Per-layer validation loss on unaugmented single views in fixed
    /// batches, with saturation and Fisher diagnostics for contrastive runs.
    pub fn validate(&self, val: &Dataset, norm: &Normalization) -> Result<ValidationReport> {
        let layers = self.encoder.num_layers();
        let mut loss = vec![0.0; layers];
        let mut stats = vec![ContrastiveStats::default(); layers];
        let diag = self.config.diagnostics;
        let mut features: Vec<Vec<f32>> = vec![Vec::new(); layers];
        let mut fisher_labels = Vec::new();
        let mut wrong_rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, "val_wrong_labels"));
        let order = batch_indices(val.len(), self.config.batch_size, None);
        for idx in &order {
            let (images, labels) = val.batch(idx);
            let images = norm.apply(&images);
            match self.config.goodness_loss() {
                Some(g) => {
                    let table = self.table.as_ref().expect("FF trainers own a label table");
                    let wrong = wrong_labels(&labels, val.classes, &mut wrong_rng);
                    let x = ff_input(&self.encoder, &images, &labels, &wrong, table)?;
                    for (l, v) in evaluate_ff_batch(&self.encoder, &x, g)?.into_iter().enumerate() {
                        loss[l] += v as f64;
                    }
                }
                None => {
                    let (x, rows) = contrastive_input(&self.encoder, &[&images], &labels)?;
                    let keep = diag.fisher_samples.saturating_sub(fisher_labels.len()).min(rows.len());
                    for (l, (v, s, f)) in evaluate_cff_batch(&self.encoder, &x, &rows, &self.cff)?
                        .into_iter()
                        .enumerate()
                    {
                        loss[l] += v as f64;
                        stats[l].merge(&s);
                        if diag.fisher && keep > 0 {
                            features[l].extend_from_slice(&f.data()[..keep * f.last_dim()]);
                        }
                    }
                    if diag.fisher {
                        fisher_labels.extend_from_slice(&rows[..keep]);
                    }
                }
            }
        }
        loss.iter_mut().for_each(|v| *v /= val.len().max(1) as f64);
        let contrastive = self.config.algorithm.is_contrastive();
        let rk = stats
            .iter()
            .map(|s| if self.cff.margins.is_some() { s.rk_fraction() } else { None })
            .collect();
        let e = self.encoder.width();
        let fisher = features
            .into_iter()
            .map(|f| {
                if !(contrastive && diag.fisher) || fisher_labels.len() < 2 {
                    return Ok(None);
                }
                let t = Tensor::new(vec![fisher_labels.len(), e], f)?;
                match fisher_criterion(&t, &fisher_labels, diag.fisher_ridge) {
                    Ok(v) => Ok(Some(v)),
                    Err(Error::Numeric(_)) | Err(Error::Argument(_)) => Ok(None),
                    Err(other) => Err(other),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ValidationReport { loss, rk, fisher })
    }
}

/// Accuracy and encoder passes per sample of one inference mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub passes_per_sample: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TestReport {
    /// Goodness inference (FF and SymBa).
    pub goodness: Option<EvalResult>,
    /// Linear head inference.
    pub head: Option<EvalResult>,
}

impl TestReport {
    /// The accuracy the algorithm is judged by: goodness inference for
    /// FF-style encoders, the head for contrastive ones.
    pub fn primary(&self) -> Option<EvalResult> {
        self.goodness.or(self.head)
    }
}

/// Emitted while a run progresses.
#[derive(Clone, Debug)]
pub enum Progress {
    Epoch {
        epoch: usize,
        train_loss: Vec<f64>,
        val_loss: Vec<f64>,
        seconds: f64,
    },
    Head {
        best_epoch: usize,
        val_loss: f64,
    },
    Test(TestReport),
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    /// Encoder at the best validation epoch, with its optimizer states.
    pub encoder: Encoder<f32>,
    pub optimizers: Vec<AdamW<f32>>,
    pub best_epoch: usize,
    pub table: Option<LabelPatchTable<f32>>,
    pub head: Option<Head<f32>>,
    pub head_report: Option<HeadReport>,
    pub log: TrainLog,
    pub test: TestReport,
}

/// Inference on normalized test images with an exact pass count.
pub fn evaluate(
    encoder: &Encoder<f32>,
    table: Option<&LabelPatchTable<f32>>,
    head: Option<&Head<f32>>,
    config: &ExperimentConfig,
    test: &Dataset,
    norm: &Normalization,
) -> Result<TestReport> {
    let images = norm.apply(&test.images);
    let mut report = TestReport::default();
    if let Some(t) = table {
        let mut c = PassCounter::default();
        let s = predict_goodness(encoder, &images, t, 500, &mut c)?;
        report.goodness = Some(EvalResult {
            accuracy: top_k_accuracy(&s, &test.labels, 1)?,
            passes_per_sample: c.passes_per_sample(),
        });
    }
    if let Some(h) = head {
        let mut c = PassCounter::default();
        let s = predict_head(encoder, h, &images, config.normalize_between, 500, &mut c)?;
        report.head = Some(EvalResult {
            accuracy: top_k_accuracy(&s, &test.labels, 1)?,
            passes_per_sample: c.passes_per_sample(),
        });
    }
    Ok(report)
}

/// Full run: encoder epochs with best-epoch selection by mean per-layer
/// validation loss, then the head on the frozen best encoder, then test.
pub fn run_experiment(
    config: &ExperimentConfig,
    data: &PreparedData,
    clock: &dyn Clock,
    observer: &mut dyn FnMut(&Progress),
) -> Result<RunOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    let norm = &data.normalization;
    let mut log = TrainLog::new();
    let mut best: Option<(f64, usize, Encoder<f32>, Vec<AdamW<f32>>)> = None;
    for epoch in 1..=config.epochs {
        let t0 = clock.seconds();
        let train = trainer.train_epoch(&data.train, norm)?;
        let t1 = clock.seconds();
        let val = trainer.validate(&data.val, norm)?;
        let t2 = clock.seconds();
        for l in 0..trainer.encoder.num_layers() {
            let rk = if trainer.cff.margins.is_some() { train.stats[l].rk_fraction() } else { None };
            log.push(LogRecord {
                epoch,
                layer: Some(l + 1),
                split: Split::Train,
                loss: train.loss[l],
                rk_pct: rk.map(|r| 100.0 * r),
                fisher: None,
                accuracy: None,
                seconds: t1 - t0,
            })?;
            log.push(LogRecord {
                epoch,
                layer: Some(l + 1),
                split: Split::Val,
                loss: val.loss[l],
                rk_pct: val.rk[l].map(|r| 100.0 * r),
                fisher: val.fisher[l],
                accuracy: None,
                seconds: t2 - t1,
            })?;
        }
        observer(&Progress::Epoch {
            epoch,
            train_loss: train.loss.clone(),
            val_loss: val.loss.clone(),
            seconds: t2 - t0,
        });
        let mean = val.mean_loss();
        if best.as_ref().is_none_or(|b| mean < b.0) {
            best = Some((mean, epoch, trainer.encoder.clone(), trainer.optimizers.clone()));
        }
    }
    let (_, best_epoch, encoder, optimizers) = best.expect("at least one epoch");
    let head_seed = stream_seed(config.seed, "head");
    let t0 = clock.seconds();
    let trained = match config.algorithm {
        Algorithm::Cff | Algorithm::CffM => Some(train_head_stage2(
            &encoder,
            &data.train,
            &data.val,
            norm,
            config.normalize_between,
            &config.head,
            head_seed,
        )?),
        Algorithm::Ff | Algorithm::SymBa if config.ff_head && encoder.num_layers() >= 2 => Some(
            train_ff_onepass_head(&encoder, &data.train, &data.val, norm, &config.head, head_seed)?,
        ),
        _ => None,
    };
    let (head, head_report) = match trained {
        Some((h, r)) => (Some(h), Some(r)),
        None => (None, None),
    };
    if let Some(r) = &head_report {
        let i = r.best_epoch.max(1) - 1;
        log.push(LogRecord {
            epoch: best_epoch,
            layer: None,
            split: Split::Train,
            loss: r.train_loss[i],
            rk_pct: None,
            fisher: None,
            accuracy: None,
            seconds: clock.seconds() - t0,
        })?;
        let mut c = PassCounter::default();
        let val_images = norm.apply(&data.val.images);
        let h = head.as_ref().expect("head exists with its report");
        let s = predict_head(&encoder, h, &val_images, config.normalize_between, 500, &mut c)?;
        log.push(LogRecord {
            epoch: best_epoch,
            layer: None,
            split: Split::Val,
            loss: r.val_loss[i],
            rk_pct: None,
            fisher: None,
            accuracy: Some(top_k_accuracy(&s, &data.val.labels, 1)?),
            seconds: 0.0,
        })?;
        observer(&Progress::Head {
            best_epoch: r.best_epoch,
            val_loss: r.val_loss[i],
        });
    }
    let t0 = clock.seconds();
    let test = evaluate(&encoder, trainer.table.as_ref(), head.as_ref(), config, &data.test, norm)?;
    log.push(LogRecord {
        epoch: best_epoch,
        layer: None,
        split: Split::Test,
        loss: f64::NAN,
        rk_pct: None,
        fisher: None,
        accuracy: test.primary().map(|r| r.accuracy),
        seconds: clock.seconds() - t0,
    })?;
    observer(&Progress::Test(test));
    Ok(RunOutcome {
        encoder,
        optimizers,
        best_epoch,
        table: trainer.table.clone(),
        head,
        head_report,
        log,
        test,
    })
}
