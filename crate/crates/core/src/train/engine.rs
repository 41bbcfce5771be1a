//! Two-step distillation training: stages, state, epochs and evaluation.

use serde::{Deserialize, Serialize};

use super::data::{epoch_rng, shuffled, Dataset, Normalization};
use super::loss::{kd_loss, KdLossConfig};
use super::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::arch::BiMlp;
use crate::error::{Error, Result};
use crate::kernels::SteMode;
use crate::layers::{Mode, ParamKind, Parameterized, BN_MOMENTUM};
use crate::tensor::Real;

/// Which parts of the student are binarized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Full-precision model: the teacher, and the twin used for comparison.
    FullPrecision,
    /// Binary activations, full-precision weights.
    Stage1BinaryActivations,
    /// Binary activations and weights.
    Stage2FullyBinary,
}

impl Stage {
    pub fn mode(self, training: bool, ste: SteMode) -> Mode {
        let mut m = Mode::full_precision(training);
        m.ste = ste;
        m.binarize_activations = self != Stage::FullPrecision;
        m.binarize_weights = self == Stage::Stage2FullyBinary;
        m
    }

    /// CLI numbering: 0 full precision, 1 and 2 the binary steps.
    pub fn from_index(i: u8) -> Result<Self> {
        match i {
            0 => Ok(Stage::FullPrecision),
            1 => Ok(Stage::Stage1BinaryActivations),
            2 => Ok(Stage::Stage2FullyBinary),
            _ => Err(Error::invalid(format!("stage must be 0, 1 or 2, got {i}"))),
        }
    }

    pub fn index(self) -> u8 {
        match self {
            Stage::FullPrecision => 0,
            Stage::Stage1BinaryActivations => 1,
            Stage::Stage2FullyBinary => 2,
        }
    }
}

/// How a run's parameters were initialised.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Init {
    Scratch,
    FromStage1,
    /// Explicit override allowing stage 2 without a stage-1 result.
    ColdStart,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub kd: KdLossConfig,
    pub seed: u64,
    pub ste: SteMode,
    pub optimizer: AdamWConfig,
    pub eval_batch: usize,
    /// Batches used to re-estimate batch-norm statistics after each epoch
    /// (0 keeps the running averages from training).
    pub bn_recalibration: usize,
}

impl TrainConfig {
    /// Desk-scale defaults for `stage`; stage 2 clamps latent weights.
    pub fn for_stage(stage: Stage, seed: u64) -> Self {
        let mut optimizer = AdamWConfig::default();
        if stage == Stage::Stage2FullyBinary {
            optimizer.latent_clamp = Some(1.5);
        }
        let kd = match stage {
            Stage::FullPrecision => KdLossConfig { alpha: 0.0, temperature: 1.0 },
            _ => KdLossConfig::default(),
        };
        Self {
            epochs: 10,
            lr: 1e-3,
            batch_size: 128,
            kd,
            seed,
            ste: SteMode::Windowed,
            optimizer,
            eval_batch: 256,
            bn_recalibration: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.kd.validate()?;
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::invalid("batch sizes must be ≥ 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be > 0, got {}", self.lr)));
        }
        // Checkpoint manifests store integers as TOML i64.
        if self.seed > i64::MAX as u64 {
            return Err(Error::invalid(format!("seed must be ≤ {}, got {}", i64::MAX, self.seed)));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_top1: f64,
    pub val_top5: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,val_top1,val_top5";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6e},{:.6},{:.4},{:.4}",
            self.epoch, self.lr, self.train_loss, self.val_top1, self.val_top5
        )
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    pub model: BiMlp<T>,
    pub optimizer: AdamW<T>,
    pub stage: Stage,
    pub init: Init,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    pub history: Vec<EpochLog>,
    /// Input statistics the model was trained with.
    pub normalization: Option<Normalization>,
}

impl<T: Real> TrainState<T> {
    /// Stage 2 requires `Init::FromStage1` or the explicit `Init::ColdStart`.
    pub fn new(model: BiMlp<T>, stage: Stage, init: Init, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        match (stage, init) {
            (Stage::Stage2FullyBinary, Init::Scratch) => {
                return Err(Error::invalid(
                    "stage 2 must be initialised from a stage-1 result (or cold start explicitly allowed)",
                ))
            }
            (Stage::Stage2FullyBinary, _) => {}
            (Stage::Stage1BinaryActivations | Stage::FullPrecision, Init::Scratch) => {}
            (s, i) => return Err(Error::invalid(format!("initialisation {i:?} does not apply to {s:?}"))),
        }
        Ok(Self {
            model,
            optimizer: AdamW::new(config.optimizer),
            stage,
            init,
            config,
            epoch: 0,
            history: Vec::new(),
            normalization: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.config.batch_size) as u64
    }
}

/// Top-1 / top-5 and per-class accuracy, as fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub samples: usize,
    pub top1: f64,
    pub top5: f64,
    pub per_class: Vec<f64>,
    pub loss: f64,
}

/// Rank of the true class among the logits (0 = argmax); ties go to the lower index.
fn rank_of<T: Real>(row: &[T], label: usize) -> usize {
    let v = row[label];
    row.iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < label))
        .count()
}

/// Accumulates accuracy from logit rows.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    hits1: usize,
    hits5: usize,
    n: usize,
    loss: f64,
    class_hits: Vec<usize>,
    class_n: Vec<usize>,
}

impl MetricAccumulator {
    pub fn new(classes: usize) -> Self {
        Self {
            class_hits: vec![0; classes],
            class_n: vec![0; classes],
            ..Self::default()
        }
    }

    pub fn add<T: Real>(&mut self, logits: &[T], classes: usize, labels: &[usize]) {
        for (row, &l) in logits.chunks_exact(classes).zip(labels) {
            let r = rank_of(row, l);
            self.n += 1;
            self.hits1 += (r == 0) as usize;
            self.hits5 += (r < 5) as usize;
            self.loss -= super::loss::log_softmax(row, 1.0)[l];
            if l < self.class_n.len() {
                self.class_n[l] += 1;
                self.class_hits[l] += (r == 0) as usize;
            }
        }
    }

    pub fn finish(&self) -> Result<Metrics> {
        if self.n == 0 {
            return Err(Error::invalid("cannot evaluate on an empty dataset"));
        }
        let n = self.n as f64;
        Ok(Metrics {
            samples: self.n,
            top1: self.hits1 as f64 / n,
            top5: self.hits5 as f64 / n,
            per_class: self
                .class_hits
                .iter()
                .zip(&self.class_n)
                .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
                .collect(),
            loss: self.loss / n,
        })
    }
}

/// Deterministic evaluation in dataset order without augmentation.
pub fn evaluate<T: Real>(model: &mut BiMlp<T>, data: &Dataset, mode: Mode, batch: usize) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate on an empty dataset"));
    }
    let classes = model.spec().num_classes;
    let mut acc = MetricAccumulator::new(classes);
    let eval_mode = Mode { training: false, ..mode };
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, labels) = data.batch(chunk, None)?;
        let logits = model.forward(&x.cast(), eval_mode)?;
        acc.add(logits.data(), classes, &labels);
    }
    acc.finish()
}

/// Replaces every batch-norm running mean/variance with the average of the
/// batch statistics over `batches` training-mode passes at the current weights.
pub fn recalibrate_bn<T: Real>(
    model: &mut BiMlp<T>,
    data: &Dataset,
    indices: &[usize],
    batch: usize,
    batches: usize,
    mode: Mode,
) -> Result<()> {
    let is_buffer = |kind| kind == ParamKind::Buffer;
    let mut sums: Vec<Vec<f64>> = Vec::new();
    let mut passes = 0usize;
    for chunk in indices.chunks(batch.max(1)).take(batches) {
        if chunk.len() < 2 {
            break;
        }
        model.visit_params("", &mut |_, p| {
            if is_buffer(p.kind) {
                p.value.fill(T::zero());
            }
        });
        let (x, _) = data.batch(chunk, None)?;
        model.forward(&x.cast(), Mode { training: true, ..mode })?;
        let mut i = 0;
        model.visit_params("", &mut |_, p| {
            if is_buffer(p.kind) {
                if sums.len() == i {
                    sums.push(vec![0.0; p.value.len()]);
                }
                for (s, v) in sums[i].iter_mut().zip(p.value.data()) {
                    *s += v.as_f64() / BN_MOMENTUM;
                }
                i += 1;
            }
        });
        passes += 1;
    }
    if passes == 0 {
        return Ok(());
    }
    let mut i = 0;
    model.visit_params("", &mut |_, p| {
        if is_buffer(p.kind) {
            for (v, s) in p.value.data_mut().iter_mut().zip(&sums[i]) {
                *v = T::of(s / passes as f64);
            }
            i += 1;
        }
    });
    Ok(())
}

/// Runs one epoch of the stage; returns its log line.
pub fn train_epoch<T: Real>(
    state: &mut TrainState<T>,
    train: &Dataset,
    val: &Dataset,
    mut teacher: Option<&mut BiMlp<T>>,
) -> Result<EpochLog> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let cfg = state.config;
    if cfg.kd.alpha > 0.0 && teacher.is_none() {
        return Err(Error::invalid("distillation with alpha > 0 needs a teacher model"));
    }
    let per_epoch = state.steps_per_epoch(train.len());
    let total = per_epoch * cfg.epochs;
    let mode = state.stage.mode(true, cfg.ste);
    let teacher_mode = Mode::full_precision(false);
    let mut rng = epoch_rng(cfg.seed, state.epoch);
    let order = shuffled(train.len(), &mut rng);
    let epoch_lr = cosine_lr(cfg.lr, state.optimizer.step, total);
    let mut loss_sum = 0.0;
    for chunk in order.chunks(cfg.batch_size) {
        let (x, labels) = train.batch(chunk, Some(&mut rng))?;
        let x = x.cast::<T>();
        let t_logits = match teacher.as_deref_mut() {
            Some(t) if cfg.kd.alpha > 0.0 => Some(t.forward(&x, teacher_mode)?),
            _ => None,
        };
        state.model.zero_grad();
        let logits = state.model.forward(&x, mode)?;
        let (loss, grad) = kd_loss(&logits, t_logits.as_ref(), &labels, cfg.kd)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                index: state.optimizer.step as usize,
                value: loss,
            });
        }
        state.model.backward(&grad)?;
        let lr = cosine_lr(cfg.lr, state.optimizer.step, total);
        state.optimizer.step(&mut state.model, lr);
        loss_sum += loss * chunk.len() as f64;
    }
    recalibrate_bn(&mut state.model, train, &order, cfg.batch_size, cfg.bn_recalibration, mode)?;
    let m = evaluate(&mut state.model, val, state.stage.mode(false, cfg.ste), cfg.eval_batch)?;
    state.epoch += 1;
    let log = EpochLog {
        epoch: state.epoch,
        lr: epoch_lr,
        train_loss: loss_sum / train.len() as f64,
        val_top1: m.top1,
        val_top5: m.top5,
    };
    state.history.push(log);
    Ok(log)
}

/// Trains until `state.config.epochs` epochs are complete, calling
/// `on_epoch` after each one (checkpointing, logging).
pub fn train_stage<T: Real>(
    state: &mut TrainState<T>,
    train: &Dataset,
    val: &Dataset,
    mut teacher: Option<&mut BiMlp<T>>,
    mut on_epoch: impl FnMut(&mut TrainState<T>, &EpochLog) -> Result<()>,
) -> Result<()> {
    while !state.is_done() {
        let log = train_epoch(state, train, val, teacher.as_deref_mut())?;
        on_epoch(state, &log)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ModelSpec;
    use crate::train::data::{Augment, Normalization, RawImages};

    fn synthetic(n: usize, seed: u64) -> Dataset {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut pixels = Vec::with_capacity(n * 256);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let l = (i % 4) as u8;
            labels.push(l);
            for y in 0..16 {
                for x in 0..16 {
                    let on = match l {
                        0 => y < 8,
                        1 => y >= 8,
                        2 => x < 8,
                        _ => x >= 8,
                    };
                    let base: u8 = if on { 200 } else { 30 };
                    pixels.push(base.saturating_add(rng.gen_range(0..40)));
                }
            }
        }
        let img = RawImages { n, channels: 1, height: 16, width: 16, pixels };
        Dataset::new(&img, labels, &Normalization::fit(&img), Augment { flip: false, crop: 0 }).unwrap()
    }

    fn small_spec() -> ModelSpec {
        let mut s = ModelSpec::tiny();
        s.num_classes = 4;
        s
    }

    #[test]
    fn rank_handles_ties() {
        assert_eq!(rank_of(&[1.0f32, 3.0, 3.0, 0.0], 1), 0);
        assert_eq!(rank_of(&[1.0f32, 3.0, 3.0, 0.0], 2), 1);
        assert_eq!(rank_of(&[1.0f32, 3.0, 3.0, 0.0], 3), 3);
    }

    #[test]
    fn hand_counted_accuracy() {
        let logits = [
            5.0f32, 1.0, 0.0, // label 0: top-1 hit
            0.0, 1.0, 2.0, // label 0: rank 2
            0.0, 3.0, 1.0, // label 1: hit
            1.0, 0.0, 0.5, // label 2: rank 1
        ];
        let mut acc = MetricAccumulator::new(3);
        acc.add(&logits, 3, &[0, 0, 1, 2]);
        let m = acc.finish().unwrap();
        assert_eq!(m.top1, 0.5);
        assert_eq!(m.top5, 1.0);
        assert_eq!(m.per_class, vec![0.5, 1.0, 0.0]);
    }

    #[test]
    fn stage2_needs_initialisation() {
        let model = BiMlp::<f32>::new(&small_spec(), 1).unwrap();
        let cfg = TrainConfig::for_stage(Stage::Stage2FullyBinary, 1);
        assert!(TrainState::new(model.clone(), Stage::Stage2FullyBinary, Init::Scratch, cfg).is_err());
        assert!(TrainState::new(model.clone(), Stage::Stage2FullyBinary, Init::ColdStart, cfg).is_ok());
        assert!(TrainState::new(model, Stage::Stage1BinaryActivations, Init::FromStage1, cfg).is_err());
    }

    #[test]
    fn one_epoch_reduces_loss() {
        let train = synthetic(128, 3);
        let mut improved = 0;
        for seed in 0..3 {
            let model = BiMlp::<f32>::new(&small_spec(), seed).unwrap();
            let mut cfg = TrainConfig::for_stage(Stage::FullPrecision, seed);
            cfg.batch_size = 32;
            cfg.epochs = 1;
            let mut st = TrainState::new(model, Stage::FullPrecision, Init::Scratch, cfg).unwrap();
            let before = evaluate(&mut st.model, &train, Mode::full_precision(false), 64).unwrap().loss;
            train_epoch(&mut st, &train, &train, None).unwrap();
            let after = evaluate(&mut st.model, &train, Mode::full_precision(false), 64).unwrap().loss;
            improved += (after < before) as usize;
        }
        assert!(improved >= 2, "{improved}/3 seeds improved");
    }

    #[test]
    fn same_seed_same_history() {
        let train = synthetic(64, 5);
        let run = || {
            let model = BiMlp::<f32>::new(&small_spec(), 9).unwrap();
            let mut cfg = TrainConfig::for_stage(Stage::Stage1BinaryActivations, 9);
            cfg.batch_size = 32;
            cfg.epochs = 2;
            cfg.kd.alpha = 0.0;
            let mut st = TrainState::new(model, Stage::Stage1BinaryActivations, Init::Scratch, cfg).unwrap();
            train_stage(&mut st, &train, &train, None, |_, _| Ok(())).unwrap();
            st.history
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn kd_without_teacher_is_rejected() {
        let train = synthetic(8, 1);
        let model = BiMlp::<f32>::new(&small_spec(), 2).unwrap();
        let cfg = TrainConfig::for_stage(Stage::Stage1BinaryActivations, 2);
        let mut st = TrainState::new(model, Stage::Stage1BinaryActivations, Init::Scratch, cfg).unwrap();
        assert!(train_epoch(&mut st, &train, &train, None).is_err());
    }
}
