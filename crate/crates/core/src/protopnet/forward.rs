use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamId;
use crate::tensor::{argmax, Tensor};

use super::{DistanceMode, LastLayer, Model, ModelConfig, PrototypeBank};

/// Backbone output, stored channel-first as `[D,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVolume {
    pub values: Tensor,
}

impl LatentVolume {
    pub fn depth(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    /// The `D`-vector at latent cell `(row, col)`.
    pub fn pixel(&self, row: usize, col: usize) -> Vec<f64> {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        (0..self.depth())
            .map(|c| self.values.data()[c * plane + row * w + col])
            .collect()
    }
}

/// `[m,H,W]` similarity scores.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap {
    pub values: Tensor,
}

impl SimilarityMap {
    pub fn prototypes(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn slice(&self, l: usize) -> &[f64] {
        let hw = self.height() * self.width();
        &self.values.data()[l * hw..(l + 1) * hw]
    }

    pub fn at(&self, l: usize, row: usize, col: usize) -> f64 {
        self.slice(l)[row * self.width() + col]
    }
}

/// Spatial maxima of a [`SimilarityMap`] and where they are attained.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledScores {
    pub scores: Vec<f64>,
    /// `(row, col)` of the first maximal cell in row-major order.
    pub locations: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classification {
    pub logits: Vec<f64>,
    pub class: usize,
}

/// Everything an inference pass produces.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub latent: LatentVolume,
    pub map: SimilarityMap,
    pub pooled: PooledScores,
    pub classification: Classification,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardPass {
    pub latent: Var,
    /// `[m,H,W]` distance terms in the configured mode.
    pub distances: Var,
    pub similarity: Var,
    pub scores: Var,
    pub logits: Var,
    pub prototypes: Var,
    pub last_layer: Var,
}

/// Log similarity `ln((d + 1) / (d + ε))` of a scalar distance term.
pub fn similarity(distance: f64, epsilon_stab: f64) -> Result<f64> {
    if !(distance >= 0.0) {
        return Err(Error::InvalidArgument(format!("negative distance {distance}")));
    }
    if !(epsilon_stab > 0.0 && epsilon_stab < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "epsilon_stab {epsilon_stab} outside (0,1)"
        )));
    }
    Ok(((distance + 1.0) / (distance + epsilon_stab)).ln())
}

fn distance_term(tape: &mut Tape, latent: Var, prototypes: Var, mode: DistanceMode) -> Result<Var> {
    let sq = tape.prototype_sq_distances(latent, prototypes)?;
    Ok(match mode {
        DistanceMode::Squared => sq,
        DistanceMode::Euclidean => tape.sqrt(sq),
    })
}

/// Creates the tape variable for a stored parameter.
pub type Binder<'a> = dyn FnMut(&mut Tape, ParamId) -> Var + 'a;

fn backbone(tape: &mut Tape, model: &Model, image: Var, p: &mut Binder) -> Result<Var> {
    let bb = &model.config.backbone;
    let mut x = image;
    for &(w, b) in &model.groups.base_conv {
        let (wv, bv) = (p(tape, w), p(tape, b));
        x = tape.conv2d(x, wv, 1, bb.padding)?;
        x = tape.add_channel_bias(x, bv)?;
        x = tape.relu(x);
        x = tape.maxpool2d(x, bb.pool, bb.pool)?;
    }
    for (j, &(w, b)) in model.groups.addon.iter().enumerate() {
        let (wv, bv) = (p(tape, w), p(tape, b));
        x = tape.conv2d(x, wv, 1, 0)?;
        x = tape.add_channel_bias(x, bv)?;
        x = if j + 1 == model.groups.addon.len() {
            tape.sigmoid(x)
        } else {
            tape.relu(x)
        };
    }
    Ok(x)
}

/// Records the full network on `tape`. `trainable` selects which stored
/// parameters get gradients; the image leaf keeps its own flag.
pub fn forward_on_tape(tape: &mut Tape, model: &Model, image: Var, trainable: &[bool]) -> Result<ForwardPass> {
    if trainable.len() != model.params.len() {
        return Err(Error::InvalidArgument(
            "trainable mask length differs from parameter count".into(),
        ));
    }
    let mut bind = |tape: &mut Tape, id: ParamId| tape.param(&model.params, id, trainable[id.index()]);
    forward_with(tape, model, image, &mut bind)
}

/// Like [`forward_on_tape`], with every parameter variable created by `bind`.
pub fn forward_with(tape: &mut Tape, model: &Model, image: Var, bind: &mut Binder) -> Result<ForwardPass> {
    tape.value(image).expect_shape("forward", &model.config.image_shape())?;
    let latent = backbone(tape, model, image, bind)?;
    let g = &model.groups;
    let prototypes = bind(tape, g.prototypes);
    let last_layer = bind(tape, g.last_layer);
    let distances = distance_term(tape, latent, prototypes, model.config.distance_mode)?;
    let similarity = tape.log_similarity(distances, model.config.epsilon_stab);
    let scores = tape.spatial_max(similarity)?;
    let logits = tape.dense(scores, last_layer, None)?;
    Ok(ForwardPass {
        latent,
        distances,
        similarity,
        scores,
        logits,
        prototypes,
        last_layer,
    })
}

/// Backbone only.
pub fn embed(model: &Model, image: &Tensor) -> Result<LatentVolume> {
    image.expect_shape("embed", &model.config.image_shape())?;
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone(), false);
    let mut bind = |tape: &mut Tape, id: ParamId| tape.param(&model.params, id, false);
    let z = backbone(&mut tape, model, x, &mut bind)?;
    Ok(LatentVolume {
        values: tape.value(z).clone(),
    })
}

/// Log similarity for every (prototype, latent cell) pair.
pub fn similarity_map(latent: &LatentVolume, bank: &PrototypeBank, config: &ModelConfig) -> Result<SimilarityMap> {
    if bank.vectors.ndim() != 2 || bank.dim() != latent.depth() {
        return Err(Error::ShapeMismatch {
            op: "similarity_map",
            lhs: latent.values.shape().to_vec(),
            rhs: bank.vectors.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let z = tape.leaf(latent.values.clone(), false);
    let p = tape.leaf(bank.vectors.clone(), false);
    let d = distance_term(&mut tape, z, p, config.distance_mode)?;
    let s = tape.log_similarity(d, config.epsilon_stab);
    Ok(SimilarityMap {
        values: tape.value(s).clone(),
    })
}

pub fn pool_scores(map: &SimilarityMap) -> PooledScores {
    let w = map.width();
    let (scores, locations) = (0..map.prototypes())
        .map(|l| {
            let slice = map.slice(l);
            let a = argmax(slice);
            (slice[a], (a / w, a % w))
        })
        .unzip();
    PooledScores { scores, locations }
}

pub fn classify(scores: &[f64], last: &LastLayer) -> Result<Classification> {
    let w = &last.weights;
    if w.ndim() != 2 || w.shape()[1] != scores.len() {
        return Err(Error::ShapeMismatch {
            op: "classify",
            lhs: vec![scores.len()],
            rhs: w.shape().to_vec(),
        });
    }
    let m = scores.len();
    let logits: Vec<f64> = w
        .data()
        .chunks(m)
        .map(|row| row.iter().zip(scores).map(|(a, b)| a * b).sum())
        .collect();
    let class = argmax(&logits);
    Ok(Classification { logits, class })
}

/// `embed → similarity_map → pool_scores → classify`.
pub fn predict(model: &Model, image: &Tensor) -> Result<Inference> {
    let latent = embed(model, image)?;
    let map = similarity_map(&latent, &model.bank(), &model.config)?;
    let pooled = pool_scores(&map);
    let classification = classify(&pooled.scores, &model.last_layer())?;
    Ok(Inference {
        latent,
        map,
        pooled,
        classification,
    })
}
