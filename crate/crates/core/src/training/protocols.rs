//! The Model-L and Model-C training loops.

use rand::seq::SliceRandom;

use super::adam::AdamState;
use super::config::TrainConfig;
use super::log::{EarlyStopper, EpochRecord, StopReason, TrainLog};
use super::loss::inverse_frequency_weights;
use crate::data::{augment, LoadedSample};
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::iou;
use crate::models::{apply_mask, argmax_lowest, binarize_mask, ModelC, ModelL};
use crate::seed::{derive_seed, rng_for};
use crate::tensor::{Graph, ParamStore, Tensor, Var};

/// Validation loss and task metric after an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValScore {
    pub loss: f64,
    pub metric: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub log: TrainLog,
}

/// Marks every parameter under `prefix` trainable or frozen; an empty
/// prefix matches everything. Errors when nothing matches.
pub fn set_trainable(params: &mut ParamStore<f32>, prefix: &str, trainable: bool) -> Result<usize> {
    params.set_trainable(prefix, trainable)
}

/// One image and its building mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SegExample {
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
}

/// Every view of every building, in sample then view order.
pub fn segmentation_examples(samples: &[LoadedSample]) -> Vec<SegExample> {
    samples
        .iter()
        .flat_map(|s| {
            s.views.iter().map(|v| SegExample {
                image: v.image.clone(),
                mask: v.mask.clone(),
            })
        })
        .collect()
}

/// `[background, building]` weights from pixel frequencies, normalised to mean 1.
pub fn pixel_class_weights(examples: &[SegExample]) -> [f64; 2] {
    let (mut pos, mut total) = (0usize, 0usize);
    for e in examples {
        pos += e.mask.count();
        total += e.mask.data().len();
    }
    let inv = |n: usize| if n > 0 { 1.0 / n as f64 } else { 1.0 };
    let (a, b) = (inv(total - pos), inv(pos));
    let mean = (a + b) / 2.0;
    [a / mean, b / mean]
}

struct PhaseResult {
    records: Vec<EpochRecord>,
    stop_reason: StopReason,
    best_epoch: usize,
}

/// Shared epoch loop. `sample_loss` runs forward and backward for one
/// training example (accumulating into the parameter gradients) and returns
/// its loss.
fn run_phase<M: Clone>(
    model: &mut M,
    params_of: impl Fn(&mut M) -> &mut ParamStore<f32>,
    n_train: usize,
    config: &TrainConfig,
    phase: u8,
    first_epoch: usize,
    mut sample_loss: impl FnMut(&mut M, usize, usize) -> Result<f64>,
    mut evaluate: impl FnMut(&M) -> Result<ValScore>,
) -> Result<PhaseResult> {
    config.validate()?;
    if n_train == 0 {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let mut adam = AdamState::new(params_of(model));
    let mut stopper = EarlyStopper::new(config.early_stop_patience);
    let mut best: Option<M> = None;
    let mut records = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut order: Vec<usize> = (0..n_train).collect();
    for local in 1..=config.max_epochs {
        let epoch = first_epoch + local - 1;
        order.sort_unstable();
        order.shuffle(&mut rng_for(config.seed, &format!("epoch.{epoch}")));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            params_of(model).zero_grad();
            for &i in batch {
                let l = sample_loss(model, epoch, i)?;
                if !l.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "training loss at epoch {epoch}, example {i}"
                    )));
                }
                total += l;
            }
            let params = params_of(model);
            params.scale_grads(1.0 / batch.len() as f32);
            adam.step(params, config.learning_rate)?;
        }
        let score = evaluate(model)?;
        records.push(EpochRecord {
            epoch,
            train_loss: total / n_train as f64,
            val_loss: score.loss,
            val_metric: score.metric,
            phase,
            learning_rate: config.learning_rate,
        });
        if stopper.observe(epoch, score.loss) && config.early_stopping {
            best = Some(model.clone());
        }
        if config.early_stopping && stopper.should_stop() {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let last = records.last().map_or(first_epoch, |r| r.epoch);
    let best_epoch = match best {
        Some(b) if config.early_stopping => {
            *model = b;
            stopper.best_epoch()
        }
        _ => last,
    };
    Ok(PhaseResult {
        records,
        stop_reason,
        best_epoch,
    })
}

fn seg_loss(
    model: &ModelL,
    image: Tensor<f32>,
    mask: &BinaryMask,
    gamma: f64,
    alpha: [f64; 2],
) -> Result<(Graph<f32>, Var, Tensor<f32>)> {
    let mut g = Graph::new();
    let x = g.constant(image);
    let p = ModelL::forward(&model.config, &mut g, &model.params, x)?;
    let probs = g.value(p).clone();
    let loss = g.binary_focal_loss(
        p,
        mask.to_tensor(),
        gamma as f32,
        [alpha[0] as f32, alpha[1] as f32],
    )?;
    Ok((g, loss, probs))
}

fn seg_alpha(config: &TrainConfig, train: &[SegExample]) -> Result<(f64, [f64; 2])> {
    let (gamma, alpha) = config.loss_params(2, || pixel_class_weights(train).to_vec())?;
    Ok((gamma, [alpha[0], alpha[1]]))
}

/// Mean validation loss and mean IoU (threshold 0.5) of a segmentation model.
pub fn segmentation_score(
    model: &ModelL,
    val: &[SegExample],
    gamma: f64,
    alpha: [f64; 2],
) -> Result<ValScore> {
    if val.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let (mut loss, mut metric) = (0.0, 0.0);
    for e in val {
        let (g, l, probs) = seg_loss(model, e.image.clone(), &e.mask, gamma, alpha)?;
        loss += g.value(l).data()[0] as f64;
        metric += iou(&binarize_mask(&probs, 0.5)?, &e.mask)?;
    }
    let n = val.len() as f64;
    Ok(ValScore {
        loss: loss / n,
        metric: metric / n,
    })
}

/// Model-L training with the default validation evaluator.
pub fn train_model_l(
    model: ModelL,
    train: &[SegExample],
    val: &[SegExample],
    config: &TrainConfig,
) -> Result<TrainOutcome<ModelL>> {
    if val.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let (gamma, alpha) = seg_alpha(config, train)?;
    train_model_l_with(model, train, config, |m| {
        segmentation_score(m, val, gamma, alpha)
    })
}

/// Model-L training with a caller-supplied validation evaluator.
pub fn train_model_l_with(
    mut model: ModelL,
    train: &[SegExample],
    config: &TrainConfig,
    evaluate: impl FnMut(&ModelL) -> Result<ValScore>,
) -> Result<TrainOutcome<ModelL>> {
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let (gamma, alpha) = seg_alpha(config, train)?;
    let result = run_phase(
        &mut model,
        |m| &mut m.params,
        train.len(),
        config,
        1,
        1,
        |m, epoch, i| {
            let e = &train[i];
            let (image, mask) = if config.augment {
                let ops = config
                    .augmentation
                    .draw(derive_seed(config.seed, &format!("aug.{epoch}.{i}")));
                augment(&e.image, &e.mask, &ops)?
            } else {
                (e.image.clone(), e.mask.clone())
            };
            let (g, loss, _) = seg_loss(m, image, &mask, gamma, alpha)?;
            g.backward(loss, &mut m.params)?;
            Ok(g.value(loss).data()[0] as f64)
        },
        evaluate,
    )?;
    Ok(TrainOutcome {
        model,
        log: TrainLog {
            entries: result.records,
            stop_reason: result.stop_reason,
            best_epoch: result.best_epoch,
        },
    })
}

/// Ground-truth-masked views of one building in the classifier's view order.
pub fn oracle_inputs(model: &ModelC, sample: &LoadedSample) -> Result<Vec<Tensor<f32>>> {
    model
        .config
        .views
        .iter()
        .map(|&r| {
            let v = sample.view(r);
            apply_mask(&v.image, &v.mask)
        })
        .collect()
}

fn class_loss(
    model: &ModelC,
    inputs: Vec<Tensor<f32>>,
    label: usize,
    gamma: f64,
    alpha: &[f32],
) -> Result<(Graph<f32>, Var, Vec<f32>)> {
    let mut g = Graph::new();
    let xs: Vec<_> = inputs.into_iter().map(|t| g.constant(t)).collect();
    let p = ModelC::forward(&model.config, &mut g, &model.params, &xs)?;
    let probs = g.value(p).data().to_vec();
    let loss = g.focal_loss(p, &[label], gamma as f32, alpha)?;
    Ok((g, loss, probs))
}

fn class_loss_params(
    config: &TrainConfig,
    train: &[LoadedSample],
    k: usize,
) -> Result<(f64, Vec<f32>)> {
    let labels: Vec<usize> = train.iter().map(|s| s.label.index()).collect();
    let (gamma, alpha) = config.loss_params(k, || inverse_frequency_weights(&labels, k))?;
    Ok((gamma, alpha.into_iter().map(|a| a as f32).collect()))
}

/// Mean loss and accuracy of a classifier on ground-truth-masked views.
pub fn classification_score(
    model: &ModelC,
    samples: &[LoadedSample],
    gamma: f64,
    alpha: &[f32],
) -> Result<ValScore> {
    if samples.is_empty() {
        return Err(Error::Dataset("validation split is empty".into()));
    }
    let (mut loss, mut correct) = (0.0, 0usize);
    for s in samples {
        let (g, l, probs) = class_loss(
            model,
            oracle_inputs(model, s)?,
            s.label.index(),
            gamma,
            alpha,
        )?;
        loss += g.value(l).data()[0] as f64;
        correct += usize::from(argmax_lowest(&probs) == s.label.index());
    }
    let n = samples.len() as f64;
    Ok(ValScore {
        loss: loss / n,
        metric: correct as f64 / n,
    })
}

/// Accuracy on ground-truth-masked views (no augmentation).
pub fn classification_accuracy(model: &ModelC, samples: &[LoadedSample]) -> Result<f64> {
    let k = model.config.num_classes;
    Ok(classification_score(model, samples, 0.0, &vec![1.0; k])?.metric)
}

/// Trains a classifier for one phase with the current frozen flags.
/// Epoch numbers in the returned log start at `first_epoch`.
pub fn train_classifier_phase(
    model: &mut ModelC,
    train: &[LoadedSample],
    config: &TrainConfig,
    phase: u8,
    first_epoch: usize,
    evaluate: impl FnMut(&ModelC) -> Result<ValScore>,
) -> Result<TrainLog> {
    let k = model.config.num_classes;
    if let Some(bad) = train.iter().find(|s| s.label.index() >= k) {
        return Err(Error::invalid(format!(
            "label of {} outside 0..{k}",
            bad.building_id
        )));
    }
    let (gamma, alpha) = class_loss_params(config, train, k)?;
    let result = run_phase(
        model,
        |m| &mut m.params,
        train.len(),
        config,
        phase,
        first_epoch,
        |m, epoch, i| {
            let s = &train[i];
            let mut inputs = Vec::with_capacity(m.config.views.len());
            for &role in &m.config.views {
                let v = s.view(role);
                let input = if config.augment {
                    let seed = derive_seed(config.seed, &format!("aug.{epoch}.{i}.{role}"));
                    let (img, mask) = augment(&v.image, &v.mask, &config.augmentation.draw(seed))?;
                    apply_mask(&img, &mask)?
                } else {
                    apply_mask(&v.image, &v.mask)?
                };
                inputs.push(input);
            }
            let (g, loss, _) = class_loss(m, inputs, s.label.index(), gamma, &alpha)?;
            g.backward(loss, &mut m.params)?;
            Ok(g.value(loss).data()[0] as f64)
        },
        evaluate,
    )?;
    Ok(TrainLog {
        entries: result.records,
        stop_reason: result.stop_reason,
        best_epoch: result.best_epoch,
    })
}

/// Two-phase Model-C schedule: backbones frozen while the head trains, then
/// everything fine-tuned at the phase-2 rate.
pub fn train_model_c(
    mut model: ModelC,
    train: &[LoadedSample],
    val: &[LoadedSample],
    phase1: &TrainConfig,
    phase2: &TrainConfig,
) -> Result<TrainOutcome<ModelC>> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Dataset(
            "classifier training needs nonempty train and validation splits".into(),
        ));
    }
    let k = model.config.num_classes;
    let (g1, a1) = class_loss_params(phase1, train, k)?;
    set_trainable(&mut model.params, "backbone.", false)?;
    let log1 = train_classifier_phase(&mut model, train, phase1, 1, 1, |m| {
        classification_score(m, val, g1, &a1)
    })?;
    set_trainable(&mut model.params, "", true)?;
    let (g2, a2) = class_loss_params(phase2, train, k)?;
    let next = log1.entries.last().map_or(1, |e| e.epoch + 1);
    let log2 = train_classifier_phase(&mut model, train, phase2, 2, next, |m| {
        classification_score(m, val, g2, &a2)
    })?;
    let mut entries = log1.entries;
    entries.extend(log2.entries);
    Ok(TrainOutcome {
        model,
        log: TrainLog {
            entries,
            stop_reason: log2.stop_reason,
            best_epoch: log2.best_epoch,
        },
    })
}
