use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sign, Tape};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::protopnet::{forward_on_tape, predict, Model};
use crate::tensor::{argmax, Tensor};

/// FGSM with random initialization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvTrainConfig {
    pub alpha: f64,
    pub epsilon: f64,
    /// Total training epochs under this regime.
    pub epochs: usize,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        AdvTrainConfig {
            alpha: 10.0 / 255.0,
            epsilon: 8.0 / 255.0,
            epochs: 10,
        }
    }
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.epsilon > 0.0) {
            return Err(Error::InvalidArgument("FGSM step and budget must be positive".into()));
        }
        Ok(())
    }
}

/// Untargeted cross-entropy PGD used for adversarial accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PgdEvalConfig {
    pub step: f64,
    pub epsilon: f64,
    pub iterations: usize,
}

impl Default for PgdEvalConfig {
    fn default() -> Self {
        PgdEvalConfig {
            step: 2.0 / 255.0,
            epsilon: 8.0 / 255.0,
            iterations: 10,
        }
    }
}

/// Gradient of the cross-entropy with respect to the input, plus logits.
fn input_gradient(model: &Model, image: &Tensor, label: usize) -> Result<(Tensor, Vec<f64>)> {
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone(), true);
    let pass = forward_on_tape(&mut tape, model, x, &model.frozen())?;
    let ce = tape.softmax_cross_entropy(pass.logits, label)?;
    let logits = tape.value(pass.logits).data().to_vec();
    let mut grads = tape.backward(ce)?;
    let g = grads.take(x).unwrap_or_else(|| Tensor::zeros(image.shape()));
    Ok((g, logits))
}

/// `x + δ` with `δ` projected onto the budget and the result onto `[0,1]`.
fn project(clean: &Tensor, delta: &mut [f64], epsilon: f64) -> Tensor {
    let mut out = clean.clone();
    for ((o, d), c) in out.data_mut().iter_mut().zip(delta.iter_mut()).zip(clean.data()) {
        *d = d.clamp(-epsilon, epsilon);
        *o = (c + *d).clamp(0.0, 1.0);
        *d = *o - c;
    }
    out
}

/// One FGSM step from a uniform random start inside the budget.
pub fn fgsm_adversarial_batch(
    batch: &[(Tensor, usize)],
    model: &Model,
    config: &AdvTrainConfig,
    rng: &mut impl Rng,
) -> Result<Vec<Tensor>> {
    let eps = config.epsilon;
    let starts: Vec<Vec<f64>> = batch
        .iter()
        .map(|(x, _)| (0..x.len()).map(|_| rng.gen_range(-eps..=eps)).collect())
        .collect();
    batch
        .par_iter()
        .zip(starts)
        .map(|((x, label), mut delta)| {
            let start = project(x, &mut delta, eps);
            let (g, _) = input_gradient(model, &start, *label)?;
            delta
                .iter_mut()
                .zip(g.data())
                .for_each(|(d, g)| *d += config.alpha * sign(*g));
            Ok(project(x, &mut delta, eps))
        })
        .collect()
}

/// Zero-initialized PGD ascent on the cross-entropy. Returns the final
/// iterate and whether the prediction stayed correct at every iterate.
pub fn pgd_untargeted(model: &Model, image: &Tensor, label: usize, config: &PgdEvalConfig) -> Result<(Tensor, bool)> {
    let mut delta = vec![0.0; image.len()];
    let mut current = image.clone();
    let mut robust = true;
    for _ in 0..config.iterations {
        let (g, logits) = input_gradient(model, &current, label)?;
        robust &= argmax(&logits) == label;
        if !robust {
            return Ok((current, false));
        }
        delta
            .iter_mut()
            .zip(g.data())
            .for_each(|(d, g)| *d += config.step * sign(*g));
        current = project(image, &mut delta, config.epsilon);
    }
    robust &= predict(model, &current)?.classification.class == label;
    Ok((current, robust))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub images: usize,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: Option<f64>,
}

/// Clean accuracy and, with `pgd`, the fraction of images that stay
/// correctly classified at every PGD iterate.
pub fn evaluate(model: &Model, images: &[LabeledImage], pgd: Option<&PgdEvalConfig>) -> Result<Evaluation> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty split".into()));
    }
    let outcomes: Vec<(bool, bool)> = images
        .par_iter()
        .map(|img| -> Result<(bool, bool)> {
            let clean = predict(model, &img.image)?.classification.class == img.label;
            let adv = match pgd {
                Some(cfg) if clean => pgd_untargeted(model, &img.image, img.label, cfg)?.1,
                _ => false,
            };
            Ok((clean, adv))
        })
        .collect::<Result<_>>()?;
    let n = images.len() as f64;
    Ok(Evaluation {
        images: images.len(),
        clean_accuracy: outcomes.iter().filter(|o| o.0).count() as f64 / n,
        adversarial_accuracy: pgd.map(|_| outcomes.iter().filter(|o| o.1).count() as f64 / n),
    })
}
