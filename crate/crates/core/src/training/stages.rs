use ndarray::Axis;

use super::streams::*;
use super::{
    latents_with, stack_batches, Adam, EpochDriver, FoldData, ImageClassifier, RunRecord,
    StageTag, SubspaceScope, TrainConfig,
};
use crate::autodiff::{Matrix, Tape};
use crate::data::{attribute_matrix, derived_rng, label_matrix, pixel_matrix, Sample};
use crate::error::{Error, Result};
use crate::losses::{
    cross_entropy, sensitive_subspace, stage1_target_loss, tape_column_orthogonality,
    tape_cross_entropy, tape_row_orthogonality, SensitiveSubspace,
};
use crate::model::{clipped_probabilities, Mode, ParamId, ParamStore, Submodule};
use crate::refusion::{FairRead, FairReadArch};

fn rng(cfg: &TrainConfig, purpose: u64, fold: &FoldData) -> rand_chacha::ChaCha8Rng {
    derived_rng(cfg.seed, purpose, fold.fold as u64)
}

fn gather<'a>(samples: &[&'a Sample], idx: &[usize]) -> Vec<&'a Sample> {
    idx.iter().map(|&i| samples[i]).collect()
}

fn all_ids(store: &ParamStore) -> Vec<ParamId> {
    store.iter().map(|(id, _)| id).collect()
}

/// Cross-entropy of a classifier's clipped outputs against `targets`.
fn classifier_ce(
    model: &ImageClassifier,
    store: &ParamStore,
    samples: &[&Sample],
    targets: &Matrix,
) -> Result<f64> {
    let probs = stack_batches(samples, 256, |b| {
        let mut tape = Tape::new();
        let x = tape.constant(pixel_matrix(b));
        let (_, logits) = model.forward(store, &mut tape, x, &mut Mode::Eval)?;
        Ok(clipped_probabilities(tape.value(logits)))
    })?;
    cross_entropy(targets, &probs)
}

/// Stage-1 attribute classifier `f_A`: per-attribute binary cross-entropy,
/// summed over attributes.
pub fn train_attribute_classifier(
    fold: &FoldData,
    cfg: &TrainConfig,
) -> Result<(ImageClassifier, RunRecord)> {
    cfg.validate(fold.num_attributes)?;
    let mut model = ImageClassifier::attribute_model(
        &cfg.encoder,
        fold.height,
        fold.width,
        fold.num_attributes,
        &mut rng(cfg, INIT_FA, fold),
    );
    let mut store = model.store.clone();
    let mut adam = Adam::new(&store, all_ids(&store), cfg.learning_rate);
    let mut dropout_rng = rng(cfg, DROPOUT_FA, fold);
    let val_targets = attribute_matrix(&fold.val);
    let record = EpochDriver {
        cfg,
        stage: StageTag::Stage1Fa,
        fold: fold.fold,
    }
    .run(
        &mut store,
        fold.train.len(),
        &mut rng(cfg, SHUFFLE_FA, fold),
        |store, idx| {
            let batch = gather(&fold.train, idx);
            let mut tape = Tape::new();
            let x = tape.constant(pixel_matrix(&batch));
            let (_, logits) = model.forward(store, &mut tape, x, &mut Mode::Train(&mut dropout_rng))?;
            let loss = tape_cross_entropy(&mut tape, logits, &attribute_matrix(&batch))?;
            adam.step(store, &tape.backward(loss));
            Ok(tape.scalar(loss))
        },
        |store| classifier_ce(&model, store, &fold.val, &val_targets),
    )?;
    model.store = store;
    Ok((model, record))
}

/// Stage-1 target model `f_T`: cross-entropy plus weighted column and row
/// orthogonality against the frozen attribute classifier's latents.
pub fn train_fair_encoder(
    fold: &FoldData,
    attribute_classifier: &ImageClassifier,
    cfg: &TrainConfig,
) -> Result<(ImageClassifier, RunRecord)> {
    train_target(fold, Some(attribute_classifier), cfg, StageTag::Stage1Ft)
}

/// Encoder plus target head trained on cross-entropy alone; attributes are
/// never consumed.
pub fn train_erm(fold: &FoldData, cfg: &TrainConfig) -> Result<(ImageClassifier, RunRecord)> {
    train_target(fold, None, cfg, StageTag::Erm)
}

/// Rows of a whole-set subspace basis restricted to a batch.
fn restrict(full: &SensitiveSubspace, rows: &[usize]) -> SensitiveSubspace {
    SensitiveSubspace {
        basis: full.basis.select(Axis(0), rows),
        k: full.k,
        energy_captured: full.energy_captured,
    }
}

fn train_target(
    fold: &FoldData,
    attribute_classifier: Option<&ImageClassifier>,
    cfg: &TrainConfig,
    stage: StageTag,
) -> Result<(ImageClassifier, RunRecord)> {
    cfg.validate(fold.num_attributes)?;
    let w = cfg.weights;
    let f_a = attribute_classifier.filter(|_| w.lambda_c > 0.0 || w.lambda_r > 0.0);
    let mut model = ImageClassifier::target_model(
        &cfg.encoder,
        fold.height,
        fold.width,
        &mut rng(cfg, INIT_FT, fold),
    );
    let mut store = model.store.clone();
    let mut adam = Adam::new(&store, all_ids(&store), cfg.learning_rate);
    let mut dropout_rng = rng(cfg, DROPOUT_FT, fold);

    // Frozen attribute latents are fixed, so whole-set quantities are computed once.
    let full = |samples: &[&Sample]| -> Result<Option<(Matrix, Option<SensitiveSubspace>)>> {
        let Some(f_a) = f_a else { return Ok(None) };
        let z_a = f_a.latents(samples)?;
        let subspace = match cfg.subspace_scope {
            SubspaceScope::FullTrainingSet if w.lambda_c > 0.0 => {
                Some(sensitive_subspace(&z_a, cfg.energy)?)
            }
            _ => None,
        };
        Ok(Some((z_a, subspace)))
    };
    let train_full = full(&fold.train)?;
    let val_full = full(&fold.val)?;
    let subspace_for = |whole: &Option<SensitiveSubspace>, z_a: &Matrix, rows: &[usize]| {
        if w.lambda_c == 0.0 {
            return Ok(None);
        }
        match whole {
            Some(s) => Ok(Some(restrict(s, rows))),
            None => sensitive_subspace(z_a, cfg.energy).map(Some),
        }
    };

    let val_labels = label_matrix(&fold.val);
    let record = EpochDriver {
        cfg,
        stage,
        fold: fold.fold,
    }
    .run(
        &mut store,
        fold.train.len(),
        &mut rng(cfg, SHUFFLE_FT, fold),
        |store, idx| {
            let batch = gather(&fold.train, idx);
            let mut tape = Tape::new();
            let x = tape.constant(pixel_matrix(&batch));
            let (z_t, logits) = model.forward(store, &mut tape, x, &mut Mode::Train(&mut dropout_rng))?;
            let mut loss = tape_cross_entropy(&mut tape, logits, &label_matrix(&batch))?;
            if let Some((z_a_all, whole)) = &train_full {
                let z_a = z_a_all.select(Axis(0), idx);
                if let Some(s) = subspace_for(whole, &z_a, idx)? {
                    let c = tape_column_orthogonality(&mut tape, z_t, &s)?;
                    let c = tape.scale(c, w.lambda_c);
                    loss = tape.add(loss, c);
                }
                if w.lambda_r > 0.0 {
                    let za = tape.constant(z_a);
                    let r = tape_row_orthogonality(&mut tape, z_t, za)?;
                    let r = tape.scale(r, w.lambda_r);
                    loss = tape.add(loss, r);
                }
            }
            adam.step(store, &tape.backward(loss));
            Ok(tape.scalar(loss))
        },
        |store| {
            let Some((z_a_all, whole)) = &val_full else {
                return classifier_ce(&model, store, &fold.val, &val_labels);
            };
            let z_t_all = latents_with(&model, store, &fold.val)?;
            let probs = clipped_probabilities(&crate::model::head_predict(&model.head, store, &z_t_all)?);
            let mut total = 0.0;
            for r in super::batch_ranges(fold.val.len(), cfg.batch_size) {
                let rows: Vec<usize> = r.clone().collect();
                let z_a = z_a_all.select(Axis(0), &rows);
                let z_t = z_t_all.select(Axis(0), &rows);
                let y = val_labels.select(Axis(0), &rows);
                let p = probs.select(Axis(0), &rows);
                let loss = match subspace_for(whole, &z_a, &rows)? {
                    Some(s) => stage1_target_loss(&y, &p, &z_t, &z_a, &s, &cfg.weights)?.total,
                    None => {
                        cross_entropy(&y, &p)?
                            + w.lambda_r * crate::losses::row_orthogonality_loss(&z_t, &z_a)?
                    }
                };
                total += loss * rows.len() as f64;
            }
            Ok(total / fold.val.len() as f64)
        },
    )?;
    model.store = store;
    Ok((model, record))
}

/// Stage 2: FairREAD with the stage-1 fair encoder, alternating one
/// adversary step and one main step per batch.
pub fn train_fairread(
    fold: &FoldData,
    target_model: &ImageClassifier,
    cfg: &TrainConfig,
) -> Result<(FairRead, RunRecord)> {
    stage2(fold, target_model, cfg, true)
}

/// Stage 2 with the adversary never trained or consulted.
pub fn train_fairread_without_adversary(
    fold: &FoldData,
    target_model: &ImageClassifier,
    cfg: &TrainConfig,
) -> Result<(FairRead, RunRecord)> {
    stage2(fold, target_model, cfg, false)
}

fn fairread_ce(model: &FairRead, store: &ParamStore, samples: &[&Sample], y: &Matrix) -> Result<f64> {
    let probs = stack_batches(samples, 256, |b| {
        let mut tape = Tape::new();
        let x = tape.constant(pixel_matrix(b));
        let a = tape.constant(attribute_matrix(b));
        let v = model.forward_with(store, &mut tape, x, a, &mut Mode::Eval)?;
        Ok(clipped_probabilities(tape.value(v.logits)))
    })?;
    cross_entropy(y, &probs)
}

fn stage2(
    fold: &FoldData,
    target_model: &ImageClassifier,
    cfg: &TrainConfig,
    with_adversary: bool,
) -> Result<(FairRead, RunRecord)> {
    let alpha = cfg.weights.alpha_adv;
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::Config(format!("alpha_adv = {alpha} must be >= 0")));
    }
    cfg.validate(fold.num_attributes)?;
    let arch = FairReadArch {
        encoder: cfg.encoder.clone(),
        refusion: cfg.refusion.clone(),
        num_attributes: fold.num_attributes,
        height: fold.height,
        width: fold.width,
    };
    let mut model = FairRead::new(
        &arch,
        &mut rng(cfg, INIT_STAGE2, fold),
        &mut rng(cfg, INIT_ADVERSARY, fold),
    );
    model
        .store
        .copy_tagged_from(&target_model.store, Submodule::Encoder)?;
    let mut store = model.store.clone();
    let adversary_ids = store.ids_with_tag(Submodule::Adversary);
    let main_ids: Vec<ParamId> = all_ids(&store)
        .into_iter()
        .filter(|id| !adversary_ids.contains(id))
        .collect();
    let mut main_opt = Adam::new(&store, main_ids, cfg.learning_rate);
    let mut adv_opt = Adam::new(&store, adversary_ids, cfg.learning_rate);
    let mut dropout_rng = rng(cfg, DROPOUT_STAGE2, fold);
    let mut adv_dropout_rng = rng(cfg, DROPOUT_ADVERSARY, fold);
    let val_labels = label_matrix(&fold.val);
    let record = EpochDriver {
        cfg,
        stage: StageTag::Stage2,
        fold: fold.fold,
    }
    .run(
        &mut store,
        fold.train.len(),
        &mut rng(cfg, SHUFFLE_STAGE2, fold),
        |store, idx| {
            let batch = gather(&fold.train, idx);
            let images = pixel_matrix(&batch);
            let attrs = attribute_matrix(&batch);

            if with_adversary {
                // Everything but the adversary is frozen: the encoder output
                // enters the adversary's tape as a constant.
                let mut enc_tape = Tape::new();
                let x = enc_tape.constant(images.clone());
                let z = model
                    .encoder
                    .forward(&mut enc_tape, store, x, &mut Mode::Train(&mut adv_dropout_rng))?;
                let z = enc_tape.value(z);
                for _ in 0..cfg.adversary_steps {
                    let mut tape = Tape::new();
                    let zc = tape.constant(z.clone());
                    let logits = model.adversary.logits(&mut tape, store, zc)?;
                    let loss = tape_cross_entropy(&mut tape, logits, &attrs)?;
                    if !tape.scalar(loss).is_finite() {
                        return Ok(f64::NAN);
                    }
                    adv_opt.step(store, &tape.backward(loss));
                }
            }

            let mut tape = Tape::new();
            let x = tape.constant(images);
            let a = tape.constant(attrs.clone());
            let v = model.forward_with(store, &mut tape, x, a, &mut Mode::Train(&mut dropout_rng))?;
            let mut loss = tape_cross_entropy(&mut tape, v.logits, &label_matrix(&batch))?;
            if with_adversary && alpha > 0.0 {
                let adv_logits = model.adversary.logits(&mut tape, store, v.z_t)?;
                let adv = tape_cross_entropy(&mut tape, adv_logits, &attrs)?;
                let adv = tape.scale(adv, -alpha);
                loss = tape.add(loss, adv);
            }
            main_opt.step(store, &tape.backward(loss));
            Ok(tape.scalar(loss))
        },
        |store| fairread_ce(&model, store, &fold.val, &val_labels),
    )?;
    model.store = store;
    Ok((model, record))
}
