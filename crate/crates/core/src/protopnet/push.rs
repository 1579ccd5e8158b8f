use rayon::prelude::*;

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::forward::{embed, LatentVolume};
use super::{DistanceMode, Model, PrototypeBank, Provenance};

fn distance(a: &[f64], b: &[f64], mode: DistanceMode) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    match mode {
        DistanceMode::Squared => sq,
        DistanceMode::Euclidean => sq.sqrt(),
    }
}

/// Replaces every prototype by its nearest latent patch among training
/// images of the prototype's class. Ties go to the earlier image, then to
/// the earlier cell in row-major order.
pub fn push_prototypes(model: &Model, images: &[LabeledImage]) -> Result<PrototypeBank> {
    let classes = model.config.classes;
    for c in 0..classes {
        if !images.iter().any(|img| img.label == c) {
            return Err(Error::EmptyClass(c));
        }
    }
    let latents: Vec<LatentVolume> = images
        .par_iter()
        .map(|img| embed(model, &img.image))
        .collect::<Result<_>>()?;

    let bank = model.bank();
    let d = bank.dim();
    let mode = model.config.distance_mode;
    let mut vectors = bank.vectors.data().to_vec();
    let mut provenance = bank.provenance.clone();
    for l in 0..bank.len() {
        let proto = bank.vector(l).to_vec();
        let mut best: Option<(f64, Provenance, Vec<f64>)> = None;
        for (img, z) in images.iter().zip(&latents) {
            if img.label != bank.class_of[l] {
                continue;
            }
            for row in 0..z.height() {
                for col in 0..z.width() {
                    let patch = z.pixel(row, col);
                    let dist = distance(&patch, &proto, mode);
                    if best.as_ref().map_or(true, |(b, _, _)| dist < *b) {
                        let origin = Provenance {
                            image_id: img.id,
                            row,
                            col,
                        };
                        best = Some((dist, origin, patch));
                    }
                }
            }
        }
        let (_, origin, patch) = best.ok_or(Error::EmptyClass(bank.class_of[l]))?;
        vectors[l * d..(l + 1) * d].copy_from_slice(&patch);
        provenance[l] = Some(origin);
    }
    Ok(PrototypeBank {
        vectors: Tensor::new(bank.vectors.shape().to_vec(), vectors)?,
        class_of: bank.class_of,
        provenance,
    })
}
