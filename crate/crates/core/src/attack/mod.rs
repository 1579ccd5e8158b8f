//! Location-shift attack on prototype activations and the susceptibility
//! rate built on it.

mod record;
mod susceptibility;

pub use record::{validate_record, AttackRecord, RECORD_VERSION};
pub use susceptibility::{
    correctly_classified, susceptibility_on, susceptibility_rate, ImageOutcome, SusceptibilityConfig,
    SusceptibilityReport,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::{sign, Tape, Var};
use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::protopnet::{forward_on_tape, predict, BackboneConfig, Model};
use crate::tensor::{argmax, Tensor};

/// A non-empty set of latent cells `(row, col)`, kept sorted.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSet {
    cells: Vec<(usize, usize)>,
}

impl PatchSet {
    pub fn new(mut cells: Vec<(usize, usize)>, height: usize, width: usize) -> Result<Self> {
        cells.sort_unstable();
        cells.dedup();
        if cells.is_empty() {
            return Err(Error::InvalidArgument("patch set must not be empty".into()));
        }
        if let Some(c) = cells.iter().find(|(r, c)| *r >= height || *c >= width) {
            return Err(Error::InvalidArgument(format!(
                "cell {c:?} outside {height}x{width} grid"
            )));
        }
        Ok(PatchSet { cells })
    }

    pub fn cells(&self) -> &[(usize, usize)] {
        &self.cells
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn contains(&self, cell: (usize, usize)) -> bool {
        self.cells.binary_search(&cell).is_ok()
    }

    /// All grid cells not in `self`; `None` when that is empty.
    pub fn complement(&self, height: usize, width: usize) -> Option<PatchSet> {
        let cells: Vec<_> = (0..height)
            .flat_map(|r| (0..width).map(move |c| (r, c)))
            .filter(|c| !self.contains(*c))
            .collect();
        (!cells.is_empty()).then_some(PatchSet { cells })
    }

    pub fn union(&self, other: &PatchSet) -> PatchSet {
        let mut cells = [self.cells.clone(), other.cells.clone()].concat();
        cells.sort_unstable();
        cells.dedup();
        PatchSet { cells }
    }

    fn first_overlap(&self, other: &PatchSet) -> Option<(usize, usize)> {
        self.cells.iter().copied().find(|c| other.contains(*c))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskMode {
    ReceptiveField,
    FullImage,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceRule {
    /// Every cell attaining the maximum.
    ArgmaxTies,
    /// The `n` largest cells, lower flat index first on ties.
    TopN(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L∞ radius.
    pub budget: f64,
    pub step: f64,
    pub iterations: usize,
    pub mask_mode: MaskMode,
    pub source_rule: SourceRule,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            budget: 8.0 / 255.0,
            step: 2.0 / 255.0,
            iterations: 40,
            mask_mode: MaskMode::ReceptiveField,
            source_rule: SourceRule::ArgmaxTies,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget >= 0.0 && self.step >= 0.0) {
            return Err(Error::InvalidArgument("budget and step must be non-negative".into()));
        }
        if let SourceRule::TopN(0) = self.source_rule {
            return Err(Error::InvalidArgument("top_n needs n >= 1".into()));
        }
        Ok(())
    }
}

/// Picks `S` from one prototype's `h×w` similarity map.
pub fn source_cells(map: &[f64], height: usize, width: usize, rule: SourceRule) -> Result<PatchSet> {
    if map.len() != height * width || map.is_empty() {
        return Err(Error::InvalidArgument(
            "similarity slice does not match the grid".into(),
        ));
    }
    let flat: Vec<usize> = match rule {
        SourceRule::ArgmaxTies => {
            let best = map[argmax(map)];
            (0..map.len()).filter(|&i| map[i] == best).collect()
        }
        SourceRule::TopN(n) => {
            let mut order: Vec<usize> = (0..map.len()).collect();
            order.sort_by(|&a, &b| map[b].total_cmp(&map[a]).then(a.cmp(&b)));
            order.truncate(n.max(1));
            order
        }
    };
    PatchSet::new(
        flat.into_iter().map(|i| (i / width, i % width)).collect(),
        height,
        width,
    )
}

/// `S` for `prototype` on a correctly classified image.
pub fn select_source_patch(
    model: &Model,
    image: &LabeledImage,
    prototype: usize,
    rule: SourceRule,
) -> Result<PatchSet> {
    let inf = predict(model, &image.image)?;
    if inf.classification.class != image.label {
        return Err(Error::Misclassified {
            image_id: image.id,
            label: image.label,
            predicted: inf.classification.class,
        });
    }
    if prototype >= inf.map.prototypes() {
        return Err(Error::InvalidArgument(format!("prototype {prototype} out of range")));
    }
    source_cells(inf.map.slice(prototype), inf.map.height(), inf.map.width(), rule)
}

/// Pixel mask with the rectangles it was built from.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelMask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
    pub rects: Vec<PixelBox>,
}

impl PixelMask {
    pub fn from_rects(rects: Vec<PixelBox>, height: usize, width: usize) -> Self {
        let mut values = vec![false; height * width];
        for r in &rects {
            for y in r.top..=r.bottom {
                values[y * width + r.left..=y * width + r.right].fill(true);
            }
        }
        PixelMask {
            height,
            width,
            values,
            rects,
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::from_rects(vec![PixelBox::full(height, width)], height, width)
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }
}

/// Input interval `[lo, hi]` seen by output interval `[lo, hi]` of the
/// whole backbone; may extend past the image.
fn input_interval(backbone: &BackboneConfig, lo: usize, hi: usize) -> (i64, i64) {
    let (mut a, mut b) = (lo as i64, hi as i64);
    for layer in backbone.layers().iter().rev() {
        let (k, s, p) = (layer.kernel as i64, layer.stride as i64, layer.padding as i64);
        a = a * s - p;
        b = b * s - p + k - 1;
    }
    (a, b)
}

/// Union of the exact receptive fields of `cells`, clipped to the image.
pub fn receptive_field_mask(cells: &PatchSet, backbone: &BackboneConfig, height: usize, width: usize) -> PixelMask {
    let clip = |(a, b): (i64, i64), n: usize| (a.max(0) as usize, (b.min(n as i64 - 1)) as usize);
    let rects = cells
        .cells()
        .iter()
        .map(|&(r, c)| {
            let (top, bottom) = clip(input_interval(backbone, r, r), height);
            let (left, right) = clip(input_interval(backbone, c, c), width);
            PixelBox {
                top,
                left,
                bottom,
                right,
            }
        })
        .collect();
    PixelMask::from_rects(rects, height, width)
}

fn flat_indices(set: &PatchSet, prototype: usize, height: usize, width: usize) -> Vec<usize> {
    set.cells()
        .iter()
        .map(|&(r, c)| prototype * height * width + r * width + c)
        .collect()
}

/// Location-shift objective on a tape: `mean g over S_noisy − mean g over S`.
pub fn objective_on_tape(
    tape: &mut Tape,
    model: &Model,
    image: Var,
    source: &PatchSet,
    target: &PatchSet,
    prototype: usize,
) -> Result<Var> {
    let pass = forward_on_tape(tape, model, image, &model.frozen())?;
    let (h, w, _) = model.config.latent_dims();
    let noisy = tape.mean_over(pass.similarity, &flat_indices(target, prototype, h, w))?;
    let src = tape.mean_over(pass.similarity, &flat_indices(source, prototype, h, w))?;
    tape.sub(noisy, src)
}

fn check_disjoint(source: &PatchSet, target: &PatchSet) -> Result<()> {
    match source.first_overlap(target) {
        Some(c) => Err(Error::OverlappingPatchSets(c)),
        None => Ok(()),
    }
}

/// Value of the location-shift objective.
pub fn location_shift_objective(
    model: &Model,
    image: &Tensor,
    source: &PatchSet,
    target: &PatchSet,
    prototype: usize,
) -> Result<f64> {
    check_disjoint(source, target)?;
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone(), false);
    let obj = objective_on_tape(&mut tape, model, x, source, target, prototype)?;
    Ok(tape.value(obj).item())
}

/// State of one prototype on one (possibly perturbed) image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSnapshot {
    pub objective: f64,
    /// Max of the prototype's map over `S`.
    pub source_similarity: f64,
    /// Max of the prototype's map over `S_noisy`.
    pub target_similarity: f64,
    pub pooled_score: f64,
    pub argmax: (usize, usize),
    pub predicted: usize,
}

fn snapshot(
    model: &Model,
    image: &Tensor,
    source: &PatchSet,
    target: &PatchSet,
    prototype: usize,
) -> Result<AttackSnapshot> {
    let inf = predict(model, image)?;
    let slice = inf.map.slice(prototype);
    let w = inf.map.width();
    let max_over = |s: &PatchSet| {
        s.cells()
            .iter()
            .map(|&(r, c)| slice[r * w + c])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mean_over = |s: &PatchSet| s.cells().iter().map(|&(r, c)| slice[r * w + c]).sum::<f64>() / s.len() as f64;
    Ok(AttackSnapshot {
        objective: mean_over(target) - mean_over(source),
        source_similarity: max_over(source),
        target_similarity: max_over(target),
        pooled_score: inf.pooled.scores[prototype],
        argmax: inf.pooled.locations[prototype],
        predicted: inf.classification.class,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub prototype: usize,
    pub source: PatchSet,
    pub target: PatchSet,
    pub delta: Tensor,
    pub mask: PixelMask,
    pub before: AttackSnapshot,
    pub after: AttackSnapshot,
    /// Iterate returned (0 is the unperturbed image).
    pub best_iteration: usize,
    pub iterations: usize,
    /// Max similarity over `S_noisy` exceeds max over `S` after the attack.
    pub success: bool,
}

impl AttackResult {
    pub fn attacked_image(&self, clean: &Tensor) -> Tensor {
        let mut out = clean.clone();
        out.data_mut()
            .iter_mut()
            .zip(self.delta.data())
            .for_each(|(x, d)| *x += d);
        out
    }
}

/// Signed PGD ascent on the location-shift objective from `δ = 0`, with the
/// step masked to the receptive fields of `S ∪ S_noisy` (or the whole image)
/// and `x + δ` kept in `[0,1]`. Returns the best iterate by objective.
pub fn pgd_location_shift(
    model: &Model,
    image: &Tensor,
    prototype: usize,
    source: &PatchSet,
    target: &PatchSet,
    config: &AttackConfig,
) -> Result<AttackResult> {
    config.validate()?;
    check_disjoint(source, target)?;
    let expected = model.config.image_shape();
    if image.shape() != expected.as_slice() {
        return Err(Error::ShapeMismatch {
            op: "pgd_location_shift",
            lhs: image.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let (ih, iw) = (model.config.image_height, model.config.image_width);
    let mask = match config.mask_mode {
        MaskMode::ReceptiveField => receptive_field_mask(&source.union(target), &model.config.backbone, ih, iw),
        MaskMode::FullImage => PixelMask::full(ih, iw),
    };
    let plane = ih * iw;
    let on_mask = |i: usize| mask.values[i % plane];

    let mut delta = vec![0.0; image.len()];
    let mut current = image.clone();
    let mut best: Option<(f64, Vec<f64>, usize)> = None;
    for it in 0..=config.iterations {
        let mut tape = Tape::new();
        let x = tape.leaf(current.clone(), it < config.iterations);
        let obj = objective_on_tape(&mut tape, model, x, source, target, prototype)?;
        let value = tape.value(obj).item();
        if best.as_ref().map_or(true, |b| value > b.0) {
            best = Some((value, delta.clone(), it));
        }
        if it == config.iterations {
            break;
        }
        let mut grads = tape.backward(obj)?;
        let g = grads.take(x).unwrap_or_else(|| Tensor::zeros(image.shape()));
        for (i, ((d, g), x0)) in delta.iter_mut().zip(g.data()).zip(image.data()).enumerate() {
            if on_mask(i) {
                let stepped = (*d + config.step * sign(*g)).clamp(-config.budget, config.budget);
                *d = (x0 + stepped).clamp(0.0, 1.0) - x0;
            }
        }
        current = image.clone();
        current.data_mut().iter_mut().zip(&delta).for_each(|(x, d)| *x += d);
    }
    let (_, best_delta, best_iteration) = best.expect("at least one iterate");
    let delta = Tensor::new(image.shape().to_vec(), best_delta)?;
    let before = snapshot(model, image, source, target, prototype)?;
    let mut attacked = image.clone();
    attacked
        .data_mut()
        .iter_mut()
        .zip(delta.data())
        .for_each(|(x, d)| *x += d);
    let after = snapshot(model, &attacked, source, target, prototype)?;
    Ok(AttackResult {
        prototype,
        source: source.clone(),
        target: target.clone(),
        success: after.target_similarity > after.source_similarity,
        delta,
        mask,
        before,
        after,
        best_iteration,
        iterations: config.iterations,
    })
}
