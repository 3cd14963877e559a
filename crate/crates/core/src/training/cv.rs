use std::fs;
use std::path::{Path, PathBuf};

use super::{
    fairread_probabilities, prediction_log, train_attribute_classifier, train_erm,
    train_fair_encoder, train_fairread, FoldData, ImageClassifier, RunRecord, StageTag,
    TrainConfig,
};
use crate::autodiff::Matrix;
use crate::data::{Dataset, Sample, SplitPlan};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, ParamStore};
use crate::refusion::FairRead;
use crate::thresholds::{Partition, PredictionLog};

/// What `run_cv` trains and where it writes.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Run directory; nothing is written when absent.
    pub out_dir: Option<PathBuf>,
    pub with_erm: bool,
    /// Stop after the attribute classifier and the fair encoder.
    pub stage1_only: bool,
    /// Subset of folds to run; all folds when absent.
    pub folds: Option<Vec<usize>>,
    /// Stored inside every checkpoint.
    pub config_snapshot: String,
}

/// Train, validation and test predictions of one model on one fold.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionLogs {
    pub train: PredictionLog,
    pub val: PredictionLog,
    pub test: PredictionLog,
}

impl PartitionLogs {
    pub fn compute(
        fold: &FoldData,
        mut probabilities: impl FnMut(&[&Sample]) -> Result<Matrix>,
    ) -> Result<Self> {
        let mut log = |p: Partition| -> Result<PredictionLog> {
            let samples = fold.partition(p);
            Ok(prediction_log(
                fold.fold,
                p,
                fold.num_attributes,
                samples,
                &probabilities(samples)?,
            ))
        };
        Ok(Self {
            train: log(Partition::Train)?,
            val: log(Partition::Val)?,
            test: log(Partition::Test)?,
        })
    }

    pub fn get(&self, p: Partition) -> &PredictionLog {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn file_name(p: Partition) -> String {
        format!("predictions_{p}.csv")
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for p in [Partition::Train, Partition::Val, Partition::Test] {
            self.get(p).write_csv(&dir.join(Self::file_name(p)))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read = |p| PredictionLog::read_csv(&dir.join(Self::file_name(p)));
        Ok(Self {
            train: read(Partition::Train)?,
            val: read(Partition::Val)?,
            test: read(Partition::Test)?,
        })
    }
}

/// Models, loss histories and prediction logs of one fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub records: Vec<RunRecord>,
    pub attribute_classifier: ImageClassifier,
    pub target_model: ImageClassifier,
    pub fairread: Option<FairRead>,
    pub erm: Option<ImageClassifier>,
    pub fairread_logs: Option<PartitionLogs>,
    pub erm_logs: Option<PartitionLogs>,
}

/// `<run>/<stage>/fold<k>`.
pub fn stage_dir(run: &Path, stage: StageTag, fold: usize) -> PathBuf {
    run.join(stage.to_string()).join(format!("fold{fold}"))
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCH_LOG_FILE: &str = "epochs.log";

fn persist(
    opts: &RunOptions,
    store: &ParamStore,
    mut record: RunRecord,
    logs: Option<&PartitionLogs>,
) -> Result<RunRecord> {
    let Some(run) = &opts.out_dir else {
        return Ok(record);
    };
    let dir = stage_dir(run, record.stage, record.fold);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt, store, &opts.config_snapshot)?;
    record.write_epoch_log(&dir.join(EPOCH_LOG_FILE))?;
    if let Some(l) = logs {
        l.write(&dir)?;
    }
    record.checkpoint = Some(ckpt);
    Ok(record)
}

fn run_fold(fold: &FoldData, cfg: &TrainConfig, opts: &RunOptions) -> Result<FoldOutcome> {
    let mut records = Vec::new();
    let (f_a, rec) = train_attribute_classifier(fold, cfg)?;
    records.push(persist(opts, &f_a.store, rec, None)?);
    let (f_t, rec) = train_fair_encoder(fold, &f_a, cfg)?;
    records.push(persist(opts, &f_t.store, rec, None)?);

    let (mut fairread, mut fairread_logs) = (None, None);
    if !opts.stage1_only {
        let (model, rec) = train_fairread(fold, &f_t, cfg)?;
        let logs = PartitionLogs::compute(fold, |s| fairread_probabilities(&model, s))?;
        records.push(persist(opts, &model.store, rec, Some(&logs))?);
        fairread = Some(model);
        fairread_logs = Some(logs);
    }
    let (mut erm, mut erm_logs) = (None, None);
    if opts.with_erm {
        let (model, rec) = train_erm(fold, cfg)?;
        let logs = PartitionLogs::compute(fold, |s| model.probabilities(s))?;
        records.push(persist(opts, &model.store, rec, Some(&logs))?);
        erm = Some(model);
        erm_logs = Some(logs);
    }
    Ok(FoldOutcome {
        fold: fold.fold,
        records,
        attribute_classifier: f_a,
        target_model: f_t,
        fairread,
        erm,
        fairread_logs,
        erm_logs,
    })
}

/// Full two-stage pipeline (and optionally ERM) on every requested fold.
pub fn run_cv(
    dataset: &Dataset,
    plan: &SplitPlan,
    cfg: &TrainConfig,
    opts: &RunOptions,
) -> Result<Vec<FoldOutcome>> {
    cfg.validate(dataset.num_attributes())?;
    let folds: Vec<usize> = opts
        .folds
        .clone()
        .unwrap_or_else(|| (0..plan.num_folds()).collect());
    let mut out = Vec::with_capacity(folds.len());
    for k in folds {
        let wrap = |e: Error| Error::Fold {
            fold: k,
            source: Box::new(e),
        };
        let fold = FoldData::new(dataset, plan, k).map_err(wrap)?;
        log::info!("fold {k}: {} train, {} val, {} test", fold.train.len(), fold.val.len(), fold.test.len());
        out.push(run_fold(&fold, cfg, opts).map_err(wrap)?);
    }
    Ok(out)
}
