//! SGD training loop: sampling, augmentation, assignment, loss, update.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{assign, AnchorAssignment};
use crate::attention::{build_attention_targets, AttentionTarget};
use crate::data::{derive_seed, flip_and_jitter, random_crop, AugmentConfig, Dataset, SceneAnnotation};
use crate::error::{FanError, Result};
use crate::geometry::{generate_anchors, AnchorGrid};
use crate::losses::{total_loss, LossConfig, LossReport};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::{Graph, Sgd, Tensor};

pub const LR_DROP_FACTOR: f64 = 0.1;

/// Salt separating patch sampling streams from scene generation streams.
const SAMPLE_SALT: u64 = 0x7061_7463_6865_7321;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs (0-based) at whose start the rate is multiplied by 0.1.
    pub lr_drop_epochs: Vec<usize>,
    pub batch_size: usize,
    pub patches_per_epoch: usize,
    pub seed: u64,
    /// When off, the attention term is weighted by zero.
    pub attention_enabled: bool,
    /// Keep attention-branch parameters fixed.
    pub freeze_attention: bool,
    pub pos_thresh: f64,
    pub bg_thresh: f64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// Worker threads per batch; results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 3e-3,
            momentum: 0.9,
            weight_decay: 1e-5,
            epochs: 30,
            lr_drop_epochs: vec![20, 26],
            batch_size: 8,
            patches_per_epoch: 1000,
            seed: 0,
            attention_enabled: true,
            freeze_attention: false,
            pos_thresh: 0.5,
            bg_thresh: 0.4,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FanError::Config(format!("train: {m}")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.lr_drop_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lr_drop_epochs must be strictly increasing, got {:?}", self.lr_drop_epochs));
        }
        if self.lr_drop_epochs.last().is_some_and(|&e| e >= self.epochs) {
            return bad(format!("lr_drop_epochs {:?} must be below epochs = {}", self.lr_drop_epochs, self.epochs));
        }
        if self.batch_size == 0 || self.patches_per_epoch == 0 {
            return bad("batch_size and patches_per_epoch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return bad("momentum must be in [0, 1) and weight_decay >= 0".into());
        }
        if !(self.bg_thresh <= self.pos_thresh && self.bg_thresh > 0.0 && self.pos_thresh <= 1.0) {
            return bad(format!("thresholds bg {} / pos {} out of order", self.bg_thresh, self.pos_thresh));
        }
        self.loss.validate()?;
        self.augment.validate()
    }

    /// `lr · 0.1^(drops passed)` for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.lr_drop_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr * LR_DROP_FACTOR.powi(passed as i32)
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.patches_per_epoch.div_ceil(self.batch_size)
    }

    /// Loss weights actually used: `lambda2 = 0` with attention off.
    pub fn effective_loss(&self) -> LossConfig {
        let mut l = self.loss;
        if !self.attention_enabled {
            l.lambda2 = 0.0;
        }
        l
    }

    pub(crate) fn set(&mut self, key: &str, value: &str) -> Result<()> {
        use crate::config::{parse_bool, parse_list, parse_value};
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "momentum" => self.momentum = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "lr_drop_epochs" => self.lr_drop_epochs = parse_list(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "patches_per_epoch" => self.patches_per_epoch = parse_value(key, value)?,
            "attention" => self.attention_enabled = parse_bool(key, value)?,
            "freeze_attention" => self.freeze_attention = parse_bool(key, value)?,
            "pos_thresh" => self.pos_thresh = parse_value(key, value)?,
            "bg_thresh" => self.bg_thresh = parse_value(key, value)?,
            "crop_min" => self.augment.crop_min = parse_value(key, value)?,
            "crop_max" => self.augment.crop_max = parse_value(key, value)?,
            "flip_prob" => self.augment.flip_prob = parse_value(key, value)?,
            "brightness" => self.augment.brightness = parse_value(key, value)?,
            "contrast" => self.augment.contrast = parse_value(key, value)?,
            "target_train_size" => self.augment.target_train_size = parse_value(key, value)?,
            other => return Err(FanError::Config(format!("unknown train key {other:?}"))),
        }
        Ok(())
    }
}

/// An augmented patch with its supervision.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub scene_index: usize,
    pub annotation: SceneAnnotation,
    pub input: Tensor<f32>,
    pub assignment: AnchorAssignment,
    pub attention: AttentionTarget,
}

/// Draws, augments and labels training patch number `k` of a run; a pure
/// function of `(seed, k)`.
pub fn prepare_sample(data: &Dataset, grid: &AnchorGrid, cfg: &TrainConfig, k: u64) -> PreparedSample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ SAMPLE_SALT, k));
    let scene_index = rng.random_range(0..data.len());
    let sample = &data.samples[scene_index];
    let (img, ann) = random_crop(&sample.image(), &sample.annotation, &cfg.augment, &mut rng);
    let (img, ann) = flip_and_jitter(&img, &ann, &cfg.augment, &mut rng);
    let assignment = assign(grid, &ann.boxes, cfg.pos_thresh, cfg.bg_thresh);
    let attention = build_attention_targets(&ann.boxes, &assignment, grid);
    PreparedSample { scene_index, annotation: ann, input: img.to_tensor(), assignment, attention }
}

/// Loss and parameter gradients of one prepared patch.
pub fn sample_gradients<T: Scalar>(
    model: &Model<T>,
    grid: &AnchorGrid,
    sample: &PreparedSample,
    loss: &LossConfig,
) -> Result<(Vec<Vec<T>>, LossReport)> {
    let mut g = Graph::new();
    let x = g.constant(sample.input.cast());
    let levels = model.forward(&mut g, x)?;
    let (root, report) = total_loss(&mut g, &levels, grid, &sample.assignment, &sample.attention, loss)?;
    let mut grads: Vec<Vec<T>> = model.params.iter().map(|(_, _, t)| vec![T::zero(); t.numel()]).collect();
    if report.total.is_finite() {
        g.backward(root).accumulate_params(&g, &mut grads);
    }
    Ok((grads, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Batch mean.
    pub report: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub epochs: Vec<EpochSummary>,
}

pub const LOG_HEADER: &str = "step,lr,total,cls,reg,att";

impl StepLog {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!("{},{},{},{},{},{}", self.step, self.lr, r.total, r.cls(), r.reg(), r.att())
    }
}

impl TrainLog {
    pub fn csv(&self) -> String {
        let mut s = format!("{LOG_HEADER}\n");
        for st in &self.steps {
            let _ = writeln!(s, "{}", st.csv_row());
        }
        s
    }
}

/// Optimizer state plus the fixed anchor grid of the training patch size.
pub struct Trainer<'m, T: Scalar> {
    pub model: &'m mut Model<T>,
    pub config: TrainConfig,
    pub grid: AnchorGrid,
    optimizer: Sgd<T>,
    frozen: Vec<bool>,
    step: usize,
}

impl<'m, T: Scalar> Trainer<'m, T> {
    pub fn new(model: &'m mut Model<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.config.validate()?;
        if config.attention_enabled && model.attention.is_none() {
            return Err(FanError::Config("train: attention enabled but the model has no attention branch".into()));
        }
        let side = config.augment.target_train_size;
        let grid = generate_anchors(side, side, &model.config.anchors)?;
        let mut frozen = vec![false; model.params.len()];
        if config.freeze_attention {
            for id in model.attention_params() {
                frozen[id.0] = true;
            }
        }
        let optimizer = Sgd::new(&model.params, T::lit(config.momentum), T::lit(config.weight_decay));
        Ok(Trainer { model, config, grid, optimizer, frozen, step: 0 })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn epoch(&self) -> usize {
        self.step / self.config.steps_per_epoch()
    }

    /// One batch: per-image gradients (possibly on worker threads), summed in
    /// image order, averaged, then one SGD update.
    pub fn run_step(&mut self, data: &Dataset) -> Result<StepLog> {
        if data.is_empty() {
            return Err(FanError::Data("training set is empty".into()));
        }
        let cfg = &self.config;
        let (b, epoch) = (cfg.batch_size, self.epoch());
        let lr = cfg.lr_at(epoch);
        let loss = cfg.effective_loss();
        let first = (self.step * b) as u64;
        let model: &Model<T> = self.model;
        let grid = &self.grid;
        let work = |i: usize| -> Result<(Vec<Vec<T>>, LossReport)> {
            let sample = prepare_sample(data, grid, cfg, first + i as u64);
            sample_gradients(model, grid, &sample, &loss)
        };
        let results = crate::parallel::par_map(b, cfg.threads, work);

        let mut reports = Vec::with_capacity(b);
        let mut sum: Option<Vec<Vec<T>>> = None;
        for r in results {
            let (grads, report) = r?;
            if !report.total.is_finite() {
                return Err(FanError::NonFinite { step: self.step, report: report.to_string() });
            }
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            reports.push(report);
        }
        let mut grads = sum.expect("batch_size >= 1");
        let inv = T::one() / T::from_usize(b).expect("batch size");
        grads.iter_mut().for_each(|g| g.iter_mut().for_each(|x| *x = *x * inv));
        self.optimizer.step(&mut self.model.params, &grads, T::lit(lr), &self.frozen);
        let log = StepLog { step: self.step, epoch, lr, report: LossReport::mean(&reports) };
        self.step += 1;
        Ok(log)
    }

    pub fn velocity(&self, index: usize) -> &[T] {
        self.optimizer.velocity(index)
    }
}

/// Runs the full schedule. `on_epoch` sees every finished epoch (for
/// logging and checkpoints); an error from it stops training.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochSummary, &[StepLog], &Model<T>) -> Result<()>,
) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(FanError::Data("training set is empty".into()));
    }
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let per_epoch = cfg.steps_per_epoch();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = log.steps.len();
        for _ in 0..per_epoch {
            let s = trainer.run_step(data)?;
            log.steps.push(s);
        }
        let steps = &log.steps[start..];
        let summary = EpochSummary {
            epoch,
            lr: cfg.lr_at(epoch),
            mean_total: steps.iter().map(|s| s.report.total).sum::<f64>() / steps.len() as f64,
            steps: steps.len(),
        };
        on_epoch(&summary, steps, trainer.model)?;
        log.epochs.push(summary);
    }
    Ok(log)
}
