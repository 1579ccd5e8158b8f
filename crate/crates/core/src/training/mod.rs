//! Composite loss, Adam, the staged schedule and the two robustness remedies.

mod adversarial;
mod schedule;

pub use adversarial::{evaluate, fgsm_adversarial_batch, pgd_untargeted, AdvTrainConfig, Evaluation, PgdEvalConfig};
pub use schedule::{train_schedule, write_metrics_csv, EpochMetrics, Regime, Stage, TrainOutcome, METRICS_HEADER};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataset::AugmentConfig;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::protopnet::{forward_with, Binder, ForwardPass, LastLayer, Model};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub joint_epochs: usize,
    /// Passes over the cached training scores in the last-layer stage.
    pub last_layer_iters: usize,
    pub lr_warmup: f64,
    /// Base convolutions and add-on layers during joint training.
    pub lr_joint_backbone: f64,
    pub lr_joint_prototypes: f64,
    pub lr_last_layer: f64,
    pub lambda_cluster: f64,
    pub lambda_separation: f64,
    pub lambda_l1: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: AugmentConfig,
    pub adversarial: Option<AdvTrainConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 5,
            joint_epochs: 6,
            last_layer_iters: 20,
            lr_warmup: 0.003,
            lr_joint_backbone: 0.0001,
            lr_joint_prototypes: 0.003,
            lr_last_layer: 0.0001,
            lambda_cluster: 0.8,
            lambda_separation: -0.08,
            lambda_l1: 0.0001,
            batch_size: 32,
            seed: 7,
            augment: AugmentConfig::default(),
            adversarial: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let lrs = [
            self.lr_warmup,
            self.lr_joint_backbone,
            self.lr_joint_prototypes,
            self.lr_last_layer,
        ];
        if lrs.iter().any(|lr| !(*lr > 0.0)) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if !(self.lambda_separation < 0.0) {
            return Err(Error::InvalidArgument("lambda_separation must be negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be positive".into()));
        }
        self.augment.validate()?;
        if let Some(adv) = &self.adversarial {
            adv.validate()?;
        }
        Ok(())
    }
}

/// Flat `[m,H,W]` indices of every cell belonging to prototypes with
/// `class_of[l] == class` (or `!=` when `same` is false).
fn prototype_cells(class_of: &[usize], class: usize, same: bool, cells: usize) -> Vec<usize> {
    class_of
        .iter()
        .enumerate()
        .filter(|(_, &c)| (c == class) == same)
        .flat_map(|(l, _)| l * cells..(l + 1) * cells)
        .collect()
}

/// Min over same-class prototypes and latent cells of the distance term.
pub fn cluster_term(tape: &mut Tape, pass: &ForwardPass, class_of: &[usize], label: usize) -> Result<Var> {
    let shape = tape.value(pass.distances).shape().to_vec();
    let idx = prototype_cells(class_of, label, true, shape[1] * shape[2]);
    tape.min_over(pass.distances, &idx)
}

/// Min over other-class prototypes and latent cells of the distance term.
pub fn separation_term(tape: &mut Tape, pass: &ForwardPass, class_of: &[usize], label: usize) -> Result<Var> {
    let shape = tape.value(pass.distances).shape().to_vec();
    let idx = prototype_cells(class_of, label, false, shape[1] * shape[2]);
    if idx.is_empty() {
        return Err(Error::InvalidArgument(
            "separation cost needs prototypes of at least two classes".into(),
        ));
    }
    tape.min_over(pass.distances, &idx)
}

/// Values of the individual loss terms, batch means.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub cross_entropy: f64,
    pub cluster: f64,
    pub separation: f64,
    pub l1: f64,
}

/// Coefficients of the composite loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cluster: f64,
    pub separation: f64,
    pub l1: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(c: &TrainConfig) -> Self {
        LossWeights {
            cluster: c.lambda_cluster,
            separation: c.lambda_separation,
            l1: c.lambda_l1,
        }
    }
}

/// One image's contribution to the batch loss, already divided by
/// `batch_len`: `(CE + λc·Clst + λs·Sep) / B`. Returns the scalar and the
/// forward pass. The image is bound as a leaf with `image_grad`.
pub fn image_loss(
    tape: &mut Tape,
    model: &Model,
    image: &Tensor,
    label: usize,
    batch_len: usize,
    weights: &LossWeights,
    bind: &mut Binder,
    image_grad: bool,
) -> Result<(Var, ForwardPass, LossTerms)> {
    if label >= model.config.classes {
        return Err(Error::LabelOutOfRange {
            label,
            classes: model.config.classes,
        });
    }
    let x = tape.leaf(image.clone(), image_grad);
    let pass = forward_with(tape, model, x, bind)?;
    let ce = tape.softmax_cross_entropy(pass.logits, label)?;
    let clst = cluster_term(tape, &pass, &model.prototype_class, label)?;
    let sep = separation_term(tape, &pass, &model.prototype_class, label)?;
    let terms = LossTerms {
        total: 0.0,
        cross_entropy: tape.value(ce).item(),
        cluster: tape.value(clst).item(),
        separation: tape.value(sep).item(),
        l1: 0.0,
    };
    let c = tape.scale(clst, weights.cluster);
    let s = tape.scale(sep, weights.separation);
    let sum = tape.add(ce, c)?;
    let sum = tape.add(sum, s)?;
    let scaled = tape.scale(sum, 1.0 / batch_len as f64);
    Ok((scaled, pass, terms))
}

/// `‖W ⊙ off-class mask‖₁` of the last layer.
pub fn l1_off_class(model: &Model) -> f64 {
    let mask = LastLayer::off_class_mask(&model.prototype_class, model.config.classes);
    model
        .params
        .value(model.groups.last_layer)
        .data()
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(w, _)| w.abs())
        .sum()
}

/// The full composite loss of a batch on a single tape:
/// `mean(CE + λc·Clst + λs·Sep) + λ1·‖W_off‖₁`.
pub fn total_loss_on_tape(
    tape: &mut Tape,
    model: &Model,
    batch: &[(Tensor, usize)],
    weights: &LossWeights,
    bind: &mut Binder,
) -> Result<(Var, LossTerms)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut acc: Option<Var> = None;
    let mut terms = LossTerms::default();
    let mut last_layer = None;
    for (image, label) in batch {
        let (v, pass, t) = image_loss(tape, model, image, *label, batch.len(), weights, bind, false)?;
        last_layer = Some(pass.last_layer);
        acc = Some(match acc {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
        terms.cross_entropy += t.cross_entropy / batch.len() as f64;
        terms.cluster += t.cluster / batch.len() as f64;
        terms.separation += t.separation / batch.len() as f64;
    }
    let mask = LastLayer::off_class_mask(&model.prototype_class, model.config.classes);
    let l1 = tape.masked_abs_sum(last_layer.expect("non-empty batch"), mask)?;
    terms.l1 = tape.value(l1).item();
    let l1 = tape.scale(l1, weights.l1);
    let total = tape.add(acc.expect("non-empty batch"), l1)?;
    terms.total = tape.value(total).item();
    Ok((total, terms))
}

/// Value of the composite loss for a batch.
pub fn total_loss(model: &Model, batch: &[(Tensor, usize)], weights: &LossWeights) -> Result<LossTerms> {
    let mut tape = Tape::new();
    let mut bind = |tape: &mut Tape, id: ParamId| tape.param(&model.params, id, false);
    Ok(total_loss_on_tape(&mut tape, model, batch, weights, &mut bind)?.1)
}

/// Adam moments for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            first: zeros.clone(),
            second: zeros,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam step on the listed parameters, each with its own
/// learning rate, using the gradients held in `store`.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState, updates: &[(ParamId, f64)]) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for &(id, lr) in updates {
        let i = id.index();
        let param = store.get_mut(id);
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((w, g), m), v) in param.value.data_mut().iter_mut().zip(param.grad.data()).zip(m).zip(v) {
            *m = state.beta1 * *m + (1.0 - state.beta1) * g;
            *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
}
