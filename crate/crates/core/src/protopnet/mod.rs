//! Prototype-similarity network: backbone, prototype layer and the linear
//! classifier on top of pooled similarity scores.

mod checkpoint;
mod forward;
mod push;
mod visualize;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use forward::{
    classify, embed, forward_on_tape, forward_with, pool_scores, predict, similarity, similarity_map, Binder,
    Classification, ForwardPass, Inference, LatentVolume, PooledScores, SimilarityMap,
};
pub use push::push_prototypes;
pub use visualize::{upsample_activation, Heatmap};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::rng::{stream, tags};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceMode {
    /// `d = ‖z − p‖²`
    Squared,
    /// `d = ‖z − p‖`
    Euclidean,
}

/// Kernel, stride and padding of one spatial layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// `[conv k×k, relu, maxpool]` blocks followed by two 1×1 add-on
/// convolutions (relu, then sigmoid) into `latent_channels`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub padding: usize,
    pub pool: usize,
    pub latent_channels: usize,
}

impl BackboneConfig {
    pub fn reference() -> Self {
        BackboneConfig {
            conv_channels: vec![16, 32, 32],
            kernel: 3,
            padding: 1,
            pool: 2,
            latent_channels: 32,
        }
    }

    /// Every spatial layer in order, including the 1×1 add-ons.
    pub fn layers(&self) -> Vec<LayerGeometry> {
        let mut layers = Vec::new();
        for _ in &self.conv_channels {
            layers.push(LayerGeometry {
                kernel: self.kernel,
                stride: 1,
                padding: self.padding,
            });
            layers.push(LayerGeometry {
                kernel: self.pool,
                stride: self.pool,
                padding: 0,
            });
        }
        let one = LayerGeometry {
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        layers.extend([one, one]);
        layers
    }

    /// Spatial extent after the whole backbone.
    pub fn output_extent(&self, extent: usize) -> Option<usize> {
        let mut e = extent;
        for layer in self.layers() {
            let padded = e + 2 * layer.padding;
            if padded < layer.kernel {
                return None;
            }
            e = (padded - layer.kernel) / layer.stride + 1;
        }
        Some(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub backbone: BackboneConfig,
    pub classes: usize,
    pub prototypes_per_class: usize,
    pub epsilon_stab: f64,
    pub distance_mode: DistanceMode,
}

impl ModelConfig {
    /// 64×64 RGB input, reference backbone, 10 prototypes per class.
    pub fn reference(classes: usize) -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            image_channels: 3,
            backbone: BackboneConfig::reference(),
            classes,
            prototypes_per_class: 10,
            epsilon_stab: 1e-4,
            distance_mode: DistanceMode::Squared,
        }
    }

    pub fn prototypes(&self) -> usize {
        self.classes * self.prototypes_per_class
    }

    /// `(H, W, D)` of the latent volume.
    pub fn latent_dims(&self) -> (usize, usize, usize) {
        let h = self.backbone.output_extent(self.image_height).unwrap_or(0);
        let w = self.backbone.output_extent(self.image_width).unwrap_or(0);
        (h, w, self.backbone.latent_channels)
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_channels, self.image_height, self.image_width]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.classes == 0 || self.prototypes_per_class == 0 {
            return bad("classes and prototypes_per_class must be positive");
        }
        if !(self.epsilon_stab > 0.0 && self.epsilon_stab < 1.0) {
            return bad("epsilon_stab must lie in (0,1)");
        }
        if self.backbone.conv_channels.is_empty() || self.backbone.latent_channels == 0 || self.backbone.pool == 0 {
            return bad("backbone needs at least one block and a positive latent width");
        }
        let (h, w, _) = self.latent_dims();
        if h == 0 || w == 0 {
            return bad("image too small for the backbone");
        }
        Ok(())
    }
}

/// Which stored tensors belong to which training group.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamGroups {
    /// `(weight, bias)` of each base convolution.
    pub base_conv: Vec<(ParamId, ParamId)>,
    /// `(weight, bias)` of the two 1×1 add-on convolutions.
    pub addon: Vec<(ParamId, ParamId)>,
    pub prototypes: ParamId,
    pub last_layer: ParamId,
}

impl ParamGroups {
    pub fn base_ids(&self) -> Vec<ParamId> {
        self.base_conv.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn addon_ids(&self) -> Vec<ParamId> {
        self.addon.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Where a pushed prototype came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    /// `[m, D]`
    pub vectors: Tensor,
    pub class_of: Vec<usize>,
    pub provenance: Vec<Option<Provenance>>,
}

impl PrototypeBank {
    pub fn len(&self) -> usize {
        self.class_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_of.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn vector(&self, l: usize) -> &[f64] {
        let d = self.dim();
        &self.vectors.data()[l * d..(l + 1) * d]
    }
}

/// `[C, m]` weights, no bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LastLayer {
    pub weights: Tensor,
}

impl LastLayer {
    /// 1 for a class's own prototypes, `-0.5` elsewhere.
    pub fn class_connection(class_of: &[usize], classes: usize) -> Self {
        let m = class_of.len();
        LastLayer {
            weights: Tensor::from_fn(&[classes, m], |i| if class_of[i % m] == i / m { 1.0 } else { -0.5 }),
        }
    }

    /// Mask of the (class, other-class prototype) entries.
    pub fn off_class_mask(class_of: &[usize], classes: usize) -> Vec<bool> {
        let m = class_of.len();
        (0..classes * m).map(|i| class_of[i % m] != i / m).collect()
    }
}

/// A complete network: every trainable tensor lives in `params`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub groups: ParamGroups,
    pub prototype_class: Vec<usize>,
    pub provenance: Vec<Option<Provenance>>,
    /// Classes that were codec-corrupted in the training data, if any.
    pub corrupted_classes: Vec<usize>,
}

fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, tags::INIT, 0);
        let mut params = ParameterStore::new();
        let bb = &config.backbone;
        let mut in_ch = config.image_channels;
        let mut base_conv = Vec::new();
        for (i, &out_ch) in bb.conv_channels.iter().enumerate() {
            let fan_in = in_ch * bb.kernel * bb.kernel;
            let w = params.insert(
                &format!("conv{}.weight", i + 1),
                kaiming_uniform(&[out_ch, in_ch, bb.kernel, bb.kernel], fan_in, &mut rng),
            );
            let b = params.insert(&format!("conv{}.bias", i + 1), Tensor::zeros(&[out_ch]));
            base_conv.push((w, b));
            in_ch = out_ch;
        }
        let mut addon = Vec::new();
        for i in 0..2 {
            let w = params.insert(
                &format!("addon{}.weight", i + 1),
                kaiming_uniform(&[bb.latent_channels, in_ch, 1, 1], in_ch, &mut rng),
            );
            let b = params.insert(&format!("addon{}.bias", i + 1), Tensor::zeros(&[bb.latent_channels]));
            addon.push((w, b));
            in_ch = bb.latent_channels;
        }
        let m = config.prototypes();
        let prototypes = params.insert(
            "prototypes",
            Tensor::from_fn(&[m, bb.latent_channels], |_| rng.gen_range(0.0..1.0)),
        );
        let prototype_class: Vec<usize> = (0..m).map(|l| l / config.prototypes_per_class).collect();
        let last_layer = params.insert(
            "last_layer",
            LastLayer::class_connection(&prototype_class, config.classes).weights,
        );
        Ok(Model {
            groups: ParamGroups {
                base_conv,
                addon,
                prototypes,
                last_layer,
            },
            config,
            params,
            provenance: vec![None; m],
            prototype_class,
            corrupted_classes: Vec::new(),
        })
    }

    pub fn bank(&self) -> PrototypeBank {
        PrototypeBank {
            vectors: self.params.value(self.groups.prototypes).clone(),
            class_of: self.prototype_class.clone(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn set_bank(&mut self, bank: PrototypeBank) -> Result<()> {
        bank.vectors
            .expect_shape("set_bank", self.params.value(self.groups.prototypes).shape())?;
        *self.params.value_mut(self.groups.prototypes) = bank.vectors;
        self.prototype_class = bank.class_of;
        self.provenance = bank.provenance;
        Ok(())
    }

    pub fn last_layer(&self) -> LastLayer {
        LastLayer {
            weights: self.params.value(self.groups.last_layer).clone(),
        }
    }

    /// A mask selecting no parameter, for inference-only tapes.
    pub fn frozen(&self) -> Vec<bool> {
        vec![false; self.params.len()]
    }

    /// A mask selecting exactly `ids`.
    pub fn trainable(&self, ids: &[ParamId]) -> Vec<bool> {
        let mut mask = self.frozen();
        for id in ids {
            mask[id.index()] = true;
        }
        mask
    }
}

#[cfg(test)]
mod tests;
