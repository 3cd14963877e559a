//! Two-stage training, the ERM baseline, cross-validation and grid search.

mod cv;
mod grid;
mod optim;
mod probe;
mod stages;

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{concatenate, Axis};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::data::{attribute_matrix, pixel_matrix, Dataset, Sample, SplitPlan};
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::model::{clipped_probabilities, Encoder, EncoderSpec, Linear, Mode, ParamStore, Submodule};
use crate::refusion::{FairRead, RefusionConfig};
use crate::thresholds::{Partition, PredictionLog, PredictionRow};

pub use cv::{
    run_cv, stage_dir, FoldOutcome, PartitionLogs, RunOptions, CHECKPOINT_FILE, EPOCH_LOG_FILE,
};
pub use grid::{
    grid_search, read_grid_table, select_best, write_grid_table, Grid, GridOptions, GridPoint,
    GridResult, GridRow,
};
pub use optim::Adam;
pub use probe::{attribute_probe, logistic_probe_auc};
pub use stages::{
    train_attribute_classifier, train_erm, train_fair_encoder, train_fairread,
    train_fairread_without_adversary,
};

/// Random-stream purposes; the stream index is the fold.
pub(crate) mod streams {
    pub const INIT_FA: u64 = 10;
    pub const INIT_FT: u64 = 11;
    pub const INIT_STAGE2: u64 = 12;
    pub const INIT_ADVERSARY: u64 = 13;
    pub const SHUFFLE_FA: u64 = 14;
    pub const SHUFFLE_FT: u64 = 15;
    pub const SHUFFLE_STAGE2: u64 = 16;
    pub const DROPOUT_FA: u64 = 17;
    pub const DROPOUT_FT: u64 = 18;
    pub const DROPOUT_STAGE2: u64 = 19;
    pub const DROPOUT_ADVERSARY: u64 = 20;
}

/// Where the sensitive subspace for the column loss comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SubspaceScope {
    /// SVD of the frozen attribute latents of each mini-batch.
    #[default]
    PerBatch,
    /// One SVD over the whole training fold, restricted to each batch's rows.
    FullTrainingSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub encoder: EncoderSpec,
    pub refusion: RefusionConfig,
    /// Fraction of squared singular-value mass the sensitive subspace keeps.
    pub energy: f64,
    pub subspace_scope: SubspaceScope,
    /// Adversary updates per batch before each main-model update.
    pub adversary_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 10,
            patience: 3,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            weights: LossWeights::default(),
            encoder: EncoderSpec::default(),
            refusion: RefusionConfig::default(),
            energy: 0.99,
            subspace_scope: SubspaceScope::PerBatch,
            adversary_steps: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, num_attributes: usize) -> Result<()> {
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2".into()));
        }
        if self.adversary_steps == 0 {
            return Err(Error::Config("adversary_steps must be at least 1".into()));
        }
        if !(self.energy > 0.0 && self.energy <= 1.0) {
            return Err(Error::Config(format!("energy {} outside (0, 1]", self.energy)));
        }
        self.weights.validate()?;
        self.encoder.validate(num_attributes)?;
        self.refusion.validate(self.encoder.latent_dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageTag {
    Stage1Fa,
    Stage1Ft,
    Stage2,
    Erm,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::Stage1Fa => "stage1_fa",
            StageTag::Stage1Ft => "stage1_ft",
            StageTag::Stage2 => "stage2",
            StageTag::Erm => "erm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Loss history of one stage on one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: StageTag,
    pub fold: usize,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub chosen_epoch: usize,
    pub checkpoint: Option<std::path::PathBuf>,
}

impl RunRecord {
    /// `epoch,train_loss,val_loss` per line.
    pub fn write_epoch_log(&self, path: &Path) -> Result<()> {
        let mut text = String::from("epoch,train_loss,val_loss\n");
        for e in &self.epochs {
            text.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Samples of one cross-validation fold.
#[derive(Debug, Clone)]
pub struct FoldData<'a> {
    pub fold: usize,
    pub train: Vec<&'a Sample>,
    pub val: Vec<&'a Sample>,
    pub test: Vec<&'a Sample>,
    pub num_attributes: usize,
    pub height: usize,
    pub width: usize,
}

impl<'a> FoldData<'a> {
    pub fn new(dataset: &'a Dataset, plan: &SplitPlan, fold: usize) -> Result<Self> {
        if fold >= plan.num_folds() {
            return Err(Error::Config(format!("fold {fold} outside the split plan")));
        }
        Ok(Self {
            fold,
            train: dataset.select(&plan.train(fold))?,
            val: dataset.select(plan.validation(fold))?,
            test: dataset.select(&plan.test)?,
            num_attributes: dataset.num_attributes(),
            height: dataset.height,
            width: dataset.width,
        })
    }

    pub fn partition(&self, p: Partition) -> &[&'a Sample] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }
}

/// Consecutive ranges of `batch` rows; a trailing single row joins the
/// previous range so every batch has at least two rows.
pub(crate) fn batch_ranges(n: usize, batch: usize) -> Vec<Range<usize>> {
    let mut out: Vec<Range<usize>> = (0..n)
        .step_by(batch)
        .map(|s| s..(s + batch).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() < 2) {
        let last = out.pop().expect("nonempty");
        out.last_mut().expect("nonempty").end = last.end;
    }
    out
}

/// Evaluates `f` on consecutive batches and stacks the results by row.
pub(crate) fn stack_batches(
    samples: &[&Sample],
    batch: usize,
    mut f: impl FnMut(&[&Sample]) -> Result<Matrix>,
) -> Result<Matrix> {
    let parts = batch_ranges(samples.len(), batch)
        .into_iter()
        .map(|r| f(&samples[r]))
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::Shape(e.to_string()))
}

/// Encoder plus linear head: the attribute classifier, the stage-1 target
/// model and the ERM baseline all take this form.
#[derive(Debug, Clone)]
pub struct ImageClassifier {
    pub encoder: Encoder,
    pub head: Linear,
    pub store: ParamStore,
}

impl ImageClassifier {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        prefix: &str,
        head_name: &str,
        head_tag: Submodule,
        spec: &EncoderSpec,
        height: usize,
        width: usize,
        outputs: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, prefix, spec, height, width, rng);
        let head = Linear::new(&mut store, head_name, head_tag, spec.latent_dim, outputs, rng);
        Self {
            encoder,
            head,
            store,
        }
    }

    /// Stage-1 target model or ERM model; they share this layout.
    pub fn target_model(spec: &EncoderSpec, height: usize, width: usize, rng: &mut ChaCha8Rng) -> Self {
        Self::new("phi_t", "target_head", Submodule::TargetHead, spec, height, width, 1, rng)
    }

    pub fn attribute_model(
        spec: &EncoderSpec,
        height: usize,
        width: usize,
        num_attributes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::new(
            "phi_a",
            "attr_head",
            Submodule::AttributeHead,
            spec,
            height,
            width,
            num_attributes,
            rng,
        )
    }

    /// Latents and logits on the tape.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        images: Var,
        mode: &mut Mode<'_>,
    ) -> Result<(Var, Var)> {
        let z = self.encoder.forward(tape, store, images, mode)?;
        let logits = self.head.forward(tape, store, z)?;
        Ok((z, logits))
    }

    fn eval(&self, store: &ParamStore, samples: &[&Sample]) -> Result<(Matrix, Matrix)> {
        let mut tape = Tape::new();
        let x = tape.constant(pixel_matrix(samples));
        let (z, logits) = self.forward(store, &mut tape, x, &mut Mode::Eval)?;
        Ok((tape.value(z).clone(), tape.value(logits).clone()))
    }

    /// Evaluation-mode encoder output, one row per sample.
    pub fn latents(&self, samples: &[&Sample]) -> Result<Matrix> {
        latents_with(self, &self.store, samples)
    }

    /// Clipped output probabilities, one row per sample.
    pub fn probabilities(&self, samples: &[&Sample]) -> Result<Matrix> {
        stack_batches(samples, EVAL_BATCH, |b| {
            Ok(clipped_probabilities(&self.eval(&self.store, b)?.1))
        })
    }
}

const EVAL_BATCH: usize = 256;

pub(crate) fn latents_with(model: &ImageClassifier, store: &ParamStore, samples: &[&Sample]) -> Result<Matrix> {
    stack_batches(samples, EVAL_BATCH, |b| Ok(model.eval(store, b)?.0))
}

/// Clipped FairREAD probabilities, one row per sample.
pub fn fairread_probabilities(model: &FairRead, samples: &[&Sample]) -> Result<Matrix> {
    stack_batches(samples, EVAL_BATCH, |b| {
        let out = model.predict(&pixel_matrix(b), &attribute_matrix(b))?;
        Ok(clipped_probabilities(&out.logits))
    })
}

/// Evaluation-mode fair-encoder output of a FairREAD model.
pub fn fairread_latents(model: &FairRead, samples: &[&Sample]) -> Result<Matrix> {
    stack_batches(samples, EVAL_BATCH, |b| {
        let mut tape = Tape::new();
        let x = tape.constant(pixel_matrix(b));
        let z = model.encoder.forward(&mut tape, &model.store, x, &mut Mode::Eval)?;
        Ok(tape.value(z).clone())
    })
}

pub fn prediction_log(
    fold: usize,
    partition: Partition,
    num_attributes: usize,
    samples: &[&Sample],
    probabilities: &Matrix,
) -> PredictionLog {
    PredictionLog {
        fold,
        partition,
        num_attributes,
        rows: samples
            .iter()
            .zip(probabilities.column(0))
            .map(|(s, &p)| PredictionRow {
                id: s.id.clone(),
                probability: p,
                label: s.label,
                subgroup: s.subgroup,
                fold,
            })
            .collect(),
    }
}

/// Shared epoch loop: shuffled mini-batches, validation after every epoch,
/// early stopping after `patience` epochs without improvement, and
/// restoration of the best parameters.
pub(crate) struct EpochDriver<'a> {
    pub cfg: &'a TrainConfig,
    pub stage: StageTag,
    pub fold: usize,
}

impl EpochDriver<'_> {
    pub fn run(
        &self,
        store: &mut ParamStore,
        n_train: usize,
        shuffle_rng: &mut ChaCha8Rng,
        mut step: impl FnMut(&mut ParamStore, &[usize]) -> Result<f64>,
        mut validate: impl FnMut(&ParamStore) -> Result<f64>,
    ) -> Result<RunRecord> {
        if n_train < 2 {
            return Err(Error::Data(format!(
                "{} fold {}: need at least 2 training samples",
                self.stage, self.fold
            )));
        }
        let mut epochs = Vec::new();
        let mut best: Option<(f64, usize, ParamStore)> = None;
        let mut stale = 0;
        for epoch in 1..=self.cfg.max_epochs {
            let mut order: Vec<usize> = (0..n_train).collect();
            order.shuffle(shuffle_rng);
            let mut total = 0.0;
            for (b, r) in batch_ranges(n_train, self.cfg.batch_size).into_iter().enumerate() {
                let len = r.len();
                let loss = step(store, &order[r])?;
                if !loss.is_finite() {
                    return Err(self.diverged(epoch, format!("training loss {loss} at batch {b}")));
                }
                total += loss * len as f64;
            }
            let train_loss = total / n_train as f64;
            let val_loss = validate(store)?;
            if !val_loss.is_finite() {
                return Err(self.diverged(epoch, format!("validation loss {val_loss}")));
            }
            log::info!(
                "{} fold {} epoch {epoch}: train {train_loss:.5} val {val_loss:.5}",
                self.stage,
                self.fold
            );
            epochs.push(EpochRecord {
                epoch,
                train_loss,
                val_loss,
            });
            if best.as_ref().is_none_or(|(b, _, _)| val_loss < *b) {
                best = Some((val_loss, epoch, store.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= self.cfg.patience {
                    log::info!("{} fold {}: early stop after epoch {epoch}", self.stage, self.fold);
                    break;
                }
            }
        }
        let (_, chosen_epoch, best_store) = best.expect("at least one epoch");
        *store = best_store;
        Ok(RunRecord {
            stage: self.stage,
            fold: self.fold,
            epochs,
            chosen_epoch,
            checkpoint: None,
        })
    }

    fn diverged(&self, epoch: usize, detail: String) -> Error {
        Error::Divergence {
            stage: self.stage.to_string(),
            fold: self.fold,
            epoch,
            detail,
        }
    }
}
