use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::dataset::{augment, Dataset, LabeledImage};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::protopnet::{classify, predict, push_prototypes, LastLayer, Model};
use crate::rng::{stream, tags};
use crate::tensor::{argmax, Tensor};

use super::adversarial::{evaluate, fgsm_adversarial_batch, AdvTrainConfig};
use super::{adam_step, image_loss, l1_off_class, AdamState, LossTerms, LossWeights, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Standard,
    /// FGSM adversarial training.
    Adv,
    /// Training-time JPEG augmentation.
    JpegAug,
}

impl Regime {
    /// Reference training configuration of this regime.
    pub fn config(self, seed: u64) -> TrainConfig {
        let base = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        match self {
            Regime::Standard => base,
            Regime::Adv => {
                let adv = AdvTrainConfig::default();
                let warmup = adv.epochs / 2;
                TrainConfig {
                    warmup_epochs: warmup,
                    joint_epochs: adv.epochs - warmup,
                    adversarial: Some(adv),
                    ..base
                }
            }
            Regime::JpegAug => TrainConfig {
                augment: base.augment.with_jpeg(),
                ..base
            },
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Standard => "standard",
            Regime::Adv => "adv",
            Regime::JpegAug => "jpeg-aug",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Warmup,
    Joint,
    Push,
    LastLayer,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Warmup => "warmup",
            Stage::Joint => "joint",
            Stage::Push => "push",
            Stage::LastLayer => "last-layer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// 1-based within the stage; 0 for the push row.
    pub epoch: usize,
    pub stage: Stage,
    pub loss: LossTerms,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub const METRICS_HEADER: &str = "# proto-lab metrics v1";

pub struct TrainOutcome {
    /// The selected model.
    pub model: Model,
    pub metrics: Vec<EpochMetrics>,
    /// Snapshots at the end of warmup, joint training and push.
    pub checkpoints: Vec<(Stage, Model)>,
    /// Last-layer iteration of the selected model; 0 is the pushed model.
    pub selected_iteration: usize,
    pub selected_test_accuracy: f64,
}

struct StagePlan {
    stage: Stage,
    epochs: usize,
    updates: Vec<(ParamId, f64)>,
}

fn check_finite(stage: Stage, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            stage: stage.to_string(),
            epoch,
            loss,
        })
    }
}

struct ImageStep {
    grads: Vec<(ParamId, Tensor)>,
    terms: LossTerms,
    correct: bool,
}

fn image_step(
    model: &Model,
    image: &Tensor,
    label: usize,
    batch_len: usize,
    cfg: &TrainConfig,
    trainable: &[bool],
) -> Result<ImageStep> {
    let mut tape = Tape::new();
    let mut bind = |tape: &mut Tape, id: ParamId| tape.param(&model.params, id, trainable[id.index()]);
    let weights = LossWeights::from(cfg);
    let (loss, pass, terms) = image_loss(&mut tape, model, image, label, batch_len, &weights, &mut bind, false)?;
    let correct = argmax(tape.value(pass.logits).data()) == label;
    let grads = tape.backward(loss)?.into_param_grads(&tape);
    Ok(ImageStep { grads, terms, correct })
}

fn run_stage(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    plan: &StagePlan,
    global_epoch: &mut u64,
    metrics: &mut Vec<EpochMetrics>,
) -> Result<()> {
    let trainable = model.trainable(&plan.updates.iter().map(|u| u.0).collect::<Vec<_>>());
    let mut adam = AdamState::new(&model.params);
    let train = &dataset.train;
    for epoch in 1..=plan.epochs {
        *global_epoch += 1;
        let ge = *global_epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, tags::SHUFFLE, ge));
        let mut sum = LossTerms::default();
        let mut correct = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut batch: Vec<(Tensor, usize)> = chunk
                .par_iter()
                .map(|&i| {
                    let mut rng = stream(cfg.seed, tags::AUGMENT, (ge << 32) | i as u64);
                    Ok((augment(&train[i].image, &cfg.augment, &mut rng)?, train[i].label))
                })
                .collect::<Result<_>>()?;
            if let Some(adv) = &cfg.adversarial {
                let mut rng = stream(cfg.seed, tags::FGSM, (ge << 32) | b as u64);
                let perturbed = fgsm_adversarial_batch(&batch, model, adv, &mut rng)?;
                batch.iter_mut().zip(perturbed).for_each(|(item, x)| item.0 = x);
            }
            let steps: Vec<ImageStep> = batch
                .par_iter()
                .map(|(x, label)| image_step(model, x, *label, chunk.len(), cfg, &trainable))
                .collect::<Result<_>>()?;
            model.params.zero_grad();
            for step in &steps {
                for (id, g) in &step.grads {
                    model.params.accumulate(*id, g);
                }
                sum.cross_entropy += step.terms.cross_entropy;
                sum.cluster += step.terms.cluster;
                sum.separation += step.terms.separation;
                correct += step.correct as usize;
                let w = LossWeights::from(cfg);
                let total =
                    step.terms.cross_entropy + w.cluster * step.terms.cluster + w.separation * step.terms.separation;
                check_finite(plan.stage, epoch, total)?;
            }
            adam_step(&mut model.params, &mut adam, &plan.updates);
        }
        let n = train.len() as f64;
        let w = LossWeights::from(cfg);
        let l1 = l1_off_class(model);
        let loss = LossTerms {
            cross_entropy: sum.cross_entropy / n,
            cluster: sum.cluster / n,
            separation: sum.separation / n,
            l1,
            total: (sum.cross_entropy + w.cluster * sum.cluster + w.separation * sum.separation) / n + w.l1 * l1,
        };
        check_finite(plan.stage, epoch, loss.total)?;
        metrics.push(EpochMetrics {
            epoch,
            stage: plan.stage,
            loss,
            train_accuracy: correct as f64 / n,
            test_accuracy: evaluate(model, &dataset.test, None)?.clean_accuracy,
        });
    }
    Ok(())
}

fn cached_scores(model: &Model, images: &[LabeledImage]) -> Result<Vec<Vec<f64>>> {
    images
        .par_iter()
        .map(|img| Ok(predict(model, &img.image)?.pooled.scores))
        .collect()
}

fn accuracy(scores: &[Vec<f64>], images: &[LabeledImage], last: &LastLayer) -> Result<f64> {
    let mut correct = 0;
    for (s, img) in scores.iter().zip(images) {
        correct += (classify(s, last)?.class == img.label) as usize;
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Warmup, joint training, push, then last-layer fine-tuning on the pooled
/// scores of the un-augmented training images. Among the pushed model and
/// every last-layer iterate, the one with the best test accuracy is kept
/// (earliest on ties). The dataset's corrupted-class list is recorded on the
/// model.
pub fn train_schedule(mut model: Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(Error::InvalidArgument(
            "training needs non-empty train and test splits".into(),
        ));
    }
    if dataset.classes != model.config.classes {
        return Err(Error::InvalidArgument(format!(
            "dataset has {} classes, model expects {}",
            dataset.classes, model.config.classes
        )));
    }
    model.corrupted_classes = dataset.corrupted_classes.clone();
    let g = model.groups.clone();
    let with_lr = |ids: Vec<ParamId>, lr: f64| ids.into_iter().map(move |id| (id, lr));
    let warmup = StagePlan {
        stage: Stage::Warmup,
        epochs: cfg.warmup_epochs,
        updates: with_lr(g.addon_ids(), cfg.lr_warmup)
            .chain(with_lr(vec![g.prototypes], cfg.lr_warmup))
            .collect(),
    };
    let joint = StagePlan {
        stage: Stage::Joint,
        epochs: cfg.joint_epochs,
        updates: with_lr(g.base_ids(), cfg.lr_joint_backbone)
            .chain(with_lr(g.addon_ids(), cfg.lr_joint_backbone))
            .chain(with_lr(vec![g.prototypes], cfg.lr_joint_prototypes))
            .collect(),
    };

    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut global_epoch = 0u64;
    for plan in [warmup, joint] {
        run_stage(&mut model, dataset, cfg, &plan, &mut global_epoch, &mut metrics)?;
        checkpoints.push((plan.stage, model.clone()));
    }

    let bank = push_prototypes(&model, &dataset.train)?;
    model.set_bank(bank)?;
    let train_scores = cached_scores(&model, &dataset.train)?;
    let test_scores = cached_scores(&model, &dataset.test)?;
    let mut best = (
        accuracy(&test_scores, &dataset.test, &model.last_layer())?,
        0usize,
        model.last_layer(),
    );
    metrics.push(EpochMetrics {
        epoch: 0,
        stage: Stage::Push,
        loss: LossTerms {
            l1: l1_off_class(&model),
            ..LossTerms::default()
        },
        train_accuracy: accuracy(&train_scores, &dataset.train, &model.last_layer())?,
        test_accuracy: best.0,
    });
    checkpoints.push((Stage::Push, model.clone()));

    let w_id = g.last_layer;
    let mask = LastLayer::off_class_mask(&model.prototype_class, model.config.classes);
    let mut adam = AdamState::new(&model.params);
    for iter in 1..=cfg.last_layer_iters {
        global_epoch += 1;
        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut stream(cfg.seed, tags::SHUFFLE, global_epoch));
        let mut ce_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let w = tape.param(&model.params, w_id, true);
            let mut acc = None;
            for &i in chunk {
                let s = tape.leaf(
                    Tensor::new(vec![train_scores[i].len()], train_scores[i].clone())?,
                    false,
                );
                let logits = tape.dense(s, w, None)?;
                let ce = tape.softmax_cross_entropy(logits, dataset.train[i].label)?;
                ce_sum += tape.value(ce).item();
                acc = Some(match acc {
                    Some(a) => tape.add(a, ce)?,
                    None => ce,
                });
            }
            let mean = tape.scale(acc.expect("non-empty chunk"), 1.0 / chunk.len() as f64);
            let l1 = tape.masked_abs_sum(w, mask.clone())?;
            let l1 = tape.scale(l1, cfg.lambda_l1);
            let loss = tape.add(mean, l1)?;
            check_finite(Stage::LastLayer, iter, tape.value(loss).item())?;
            model.params.zero_grad();
            tape.backward(loss)?.accumulate_into(&tape, &mut model.params);
            adam_step(&mut model.params, &mut adam, &[(w_id, cfg.lr_last_layer)]);
        }
        let last = model.last_layer();
        let test_acc = accuracy(&test_scores, &dataset.test, &last)?;
        let l1 = l1_off_class(&model);
        let ce = ce_sum / dataset.train.len() as f64;
        metrics.push(EpochMetrics {
            epoch: iter,
            stage: Stage::LastLayer,
            loss: LossTerms {
                total: ce + cfg.lambda_l1 * l1,
                cross_entropy: ce,
                l1,
                ..LossTerms::default()
            },
            train_accuracy: accuracy(&train_scores, &dataset.train, &last)?,
            test_accuracy: test_acc,
        });
        if test_acc > best.0 {
            best = (test_acc, iter, last);
        }
    }
    *model.params.value_mut(w_id) = best.2.weights;
    Ok(TrainOutcome {
        model,
        metrics,
        checkpoints,
        selected_iteration: best.1,
        selected_test_accuracy: best.0,
    })
}

pub fn write_metrics_csv(metrics: &[EpochMetrics], path: &Path) -> Result<()> {
    use std::io::Write;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(file, "{METRICS_HEADER}").map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record([
        "epoch",
        "stage",
        "loss",
        "cross_entropy",
        "cluster",
        "separation",
        "l1",
        "train_accuracy",
        "test_accuracy",
    ])
    .map_err(|e| Error::format("metrics csv", e))?;
    for m in metrics {
        w.write_record([
            m.epoch.to_string(),
            m.stage.to_string(),
            m.loss.total.to_string(),
            m.loss.cross_entropy.to_string(),
            m.loss.cluster.to_string(),
            m.loss.separation.to_string(),
            m.loss.l1.to_string(),
            m.train_accuracy.to_string(),
            m.test_accuracy.to_string(),
        ])
        .map_err(|e| Error::format("metrics csv", e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
