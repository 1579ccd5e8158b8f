use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{pgd_location_shift, source_cells, AttackConfig, AttackRecord};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::protopnet::{predict, Model};
use crate::rng::{stream, tags};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityConfig {
    /// Prototypes attacked per image, by pooled score.
    pub top_k: usize,
    /// Images sampled from the correctly classified test images.
    pub images: usize,
    pub seed: u64,
    pub attack: AttackConfig,
}

impl Default for SusceptibilityConfig {
    fn default() -> Self {
        SusceptibilityConfig {
            top_k: 5,
            images: 50,
            seed: 7,
            attack: AttackConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageOutcome {
    pub image_id: usize,
    pub label: usize,
    /// At least one attacked prototype shifted location.
    pub success: bool,
    pub attacks: Vec<AttackRecord>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SusceptibilityReport {
    pub images: usize,
    pub successes: usize,
    pub rate: f64,
    pub successful_attacks: usize,
    /// Successful attacks whose attacked image keeps the true label.
    pub still_correct: usize,
    pub outcomes: Vec<ImageOutcome>,
}

impl SusceptibilityReport {
    /// Fraction of successful attacks that leave the prediction unchanged;
    /// NaN without successes.
    pub fn still_correct_fraction(&self) -> f64 {
        self.still_correct as f64 / self.successful_attacks as f64
    }

    /// The same statistics restricted to a subset of image ids.
    pub fn restricted_to(&self, ids: &[usize]) -> SusceptibilityReport {
        let outcomes: Vec<ImageOutcome> = self
            .outcomes
            .iter()
            .filter(|o| ids.contains(&o.image_id))
            .cloned()
            .collect();
        summarize(outcomes)
    }

    pub fn image_ids(&self) -> Vec<usize> {
        self.outcomes.iter().map(|o| o.image_id).collect()
    }
}

fn summarize(outcomes: Vec<ImageOutcome>) -> SusceptibilityReport {
    let successes = outcomes.iter().filter(|o| o.success).count();
    let successful: Vec<&AttackRecord> = outcomes.iter().flat_map(|o| &o.attacks).filter(|a| a.success).collect();
    SusceptibilityReport {
        images: outcomes.len(),
        successes,
        rate: successes as f64 / outcomes.len() as f64,
        successful_attacks: successful.len(),
        still_correct: successful.iter().filter(|a| a.still_correct()).count(),
        outcomes,
    }
}

/// The images the model classifies correctly, in input order.
pub fn correctly_classified<'a>(model: &Model, images: &'a [LabeledImage]) -> Result<Vec<&'a LabeledImage>> {
    let keep: Vec<bool> = images
        .par_iter()
        .map(|img| Ok(predict(model, &img.image)?.classification.class == img.label))
        .collect::<Result<_>>()?;
    Ok(images.iter().zip(keep).filter(|(_, k)| *k).map(|(i, _)| i).collect())
}

fn attack_image(model: &Model, image: &LabeledImage, config: &SusceptibilityConfig) -> Result<ImageOutcome> {
    let inf = predict(model, &image.image)?;
    if inf.classification.class != image.label {
        return Err(Error::Misclassified {
            image_id: image.id,
            label: image.label,
            predicted: inf.classification.class,
        });
    }
    let (h, w) = (inf.map.height(), inf.map.width());
    let scores = &inf.pooled.scores;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut attacks = Vec::new();
    for &l in order.iter().take(config.top_k) {
        let source = source_cells(inf.map.slice(l), h, w, config.attack.source_rule)?;
        // A map that is maximal everywhere leaves nowhere to shift to.
        let Some(target) = source.complement(h, w) else {
            continue;
        };
        let result = pgd_location_shift(model, &image.image, l, &source, &target, &config.attack)?;
        attacks.push(AttackRecord::new(
            &result,
            image.id,
            image.label,
            model.prototype_class[l],
            &config.attack,
        ));
    }
    Ok(ImageOutcome {
        image_id: image.id,
        label: image.label,
        success: attacks.iter().any(|a| a.success),
        attacks,
    })
}

/// Attacks the top-k prototypes of each given image. Every image must be
/// correctly classified.
pub fn susceptibility_on(
    model: &Model,
    images: &[&LabeledImage],
    config: &SusceptibilityConfig,
) -> Result<SusceptibilityReport> {
    config.attack.validate()?;
    if images.is_empty() || config.top_k == 0 {
        return Err(Error::InvalidArgument(
            "susceptibility needs images and top_k >= 1".into(),
        ));
    }
    let outcomes = images
        .par_iter()
        .map(|img| attack_image(model, img, config))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(outcomes))
}

/// Susceptibility over `config.images` correctly classified test images
/// drawn with the configured seed.
pub fn susceptibility_rate(
    model: &Model,
    test: &[LabeledImage],
    config: &SusceptibilityConfig,
) -> Result<SusceptibilityReport> {
    let mut pool = correctly_classified(model, test)?;
    pool.shuffle(&mut stream(config.seed, tags::SUSCEPTIBILITY, 0));
    pool.truncate(config.images);
    pool.sort_by_key(|img| img.id);
    susceptibility_on(model, &pool, config)
}
