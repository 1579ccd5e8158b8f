use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{AttackConfig, AttackResult, AttackSnapshot, MaskMode, PixelMask};
use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::tensor::Tensor;

pub const RECORD_VERSION: u32 = 1;

/// Tolerance of the post-hoc constraint checks.
const TOLERANCE: f64 = 1e-12;

/// Serializable trace of one attack. The perturbation is stored exactly as
/// base64 of little-endian `f64`s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub version: u32,
    pub image_id: usize,
    pub label: usize,
    pub prototype: usize,
    pub prototype_class: usize,
    pub source: Vec<(usize, usize)>,
    pub target: Vec<(usize, usize)>,
    pub budget: f64,
    pub step: f64,
    pub iterations: usize,
    pub best_iteration: usize,
    pub mask_mode: MaskMode,
    pub mask: Vec<PixelBox>,
    pub before: AttackSnapshot,
    pub after: AttackSnapshot,
    pub success: bool,
    pub delta_shape: Vec<usize>,
    pub delta: String,
}

impl AttackRecord {
    pub fn new(
        result: &AttackResult,
        image_id: usize,
        label: usize,
        prototype_class: usize,
        config: &AttackConfig,
    ) -> Self {
        let bytes: Vec<u8> = result.delta.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        AttackRecord {
            version: RECORD_VERSION,
            image_id,
            label,
            prototype: result.prototype,
            prototype_class,
            source: result.source.cells().to_vec(),
            target: result.target.cells().to_vec(),
            budget: config.budget,
            step: config.step,
            iterations: result.iterations,
            best_iteration: result.best_iteration,
            mask_mode: config.mask_mode,
            mask: result.mask.rects.clone(),
            before: result.before.clone(),
            after: result.after.clone(),
            success: result.success,
            delta_shape: result.delta.shape().to_vec(),
            delta: STANDARD.encode(bytes),
        }
    }

    pub fn decode_delta(&self) -> Result<Tensor> {
        let bytes = STANDARD
            .decode(&self.delta)
            .map_err(|e| Error::format("attack record delta", e))?;
        if bytes.len() % 8 != 0 {
            return Err(Error::format("attack record delta", "length is not a multiple of 8"));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(self.delta_shape.clone(), data)
    }

    /// The still-correct check: attacked image keeps the true label.
    pub fn still_correct(&self) -> bool {
        self.after.predicted == self.label
    }
}

/// Re-checks the constraints of a record against the clean image:
/// `‖δ‖∞ ≤ budget`, `x + δ ∈ [0,1]` and `δ = 0` outside the mask.
pub fn validate_record(record: &AttackRecord, clean: &Tensor) -> Result<()> {
    let fail = |msg: String| {
        Err(Error::ArtifactMismatch(format!(
            "image {} prototype {}: {msg}",
            record.image_id, record.prototype
        )))
    };
    let delta = record.decode_delta()?;
    if delta.shape() != clean.shape() || delta.ndim() != 3 {
        return fail(format!("delta shape {:?} vs image {:?}", delta.shape(), clean.shape()));
    }
    let (h, w) = (clean.shape()[1], clean.shape()[2]);
    if record
        .mask
        .iter()
        .any(|r| r.top > r.bottom || r.left > r.right || r.bottom >= h || r.right >= w)
    {
        return fail("mask rectangle outside the image".into());
    }
    let mask = PixelMask::from_rects(record.mask.clone(), h, w);
    for (i, (d, x)) in delta.data().iter().zip(clean.data()).enumerate() {
        if !d.is_finite() || d.abs() > record.budget + TOLERANCE {
            return fail(format!("|delta| = {} exceeds budget {} at {i}", d.abs(), record.budget));
        }
        let y = x + d;
        if !(-TOLERANCE..=1.0 + TOLERANCE).contains(&y) {
            return fail(format!("attacked value {y} outside [0,1] at {i}"));
        }
        if !mask.values[i % (h * w)] && *d != 0.0 {
            return fail(format!("nonzero delta {d} outside the mask at {i}"));
        }
    }
    Ok(())
}
