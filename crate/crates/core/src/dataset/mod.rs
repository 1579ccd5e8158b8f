//! Procedural stand-in dataset.
//!
//! Each class is identified by a small coloured glyph (the "part") drawn at a
//! jittered location inside a class-dependent quadrant. Every image also
//! carries a class-uninformative body blob and a shared fine-grained noise
//! texture, so the class evidence is local while most pixels are nuisance.

mod augment;
mod io;

pub use augment::{augment, flip_horizontal, rotate, AugmentConfig, JpegAugment};
pub use io::{load_dataset, read_ppm, save_dataset, write_ppm, MANIFEST_FILE};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::rng::{stream, tags};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Half-width of the uniform per-pixel noise texture.
    pub noise_amplitude: f64,
    /// Inclusive range of glyph half-sizes in pixels.
    pub glyph_radius: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 10,
            train_per_class: 160,
            test_per_class: 40,
            image_size: 64,
            seed: 7,
            noise_amplitude: 0.12,
            glyph_radius: (8, 11),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GlyphShape {
    Square,
    Circle,
    Triangle,
    Cross,
    Diamond,
    Ring,
}

pub const SHAPES: [GlyphShape; 6] = [
    GlyphShape::Square,
    GlyphShape::Circle,
    GlyphShape::Triangle,
    GlyphShape::Cross,
    GlyphShape::Diamond,
    GlyphShape::Ring,
];

pub const PALETTE: [[f64; 3]; 10] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.80, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.90, 0.10],
    [0.90, 0.10, 0.90],
    [0.10, 0.90, 0.90],
    [1.00, 0.50, 0.00],
    [0.45, 0.00, 0.70],
    [0.97, 0.97, 0.97],
    [0.03, 0.03, 0.03],
];

/// Largest number of classes with a distinct (shape, colour) motif: class
/// `c` uses shape `c mod 6` and colour `c mod 10`, unique below lcm(6, 10).
pub const MAX_CLASSES: usize = 30;

impl GlyphShape {
    fn covers(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            GlyphShape::Square => dx.abs() <= r && dy.abs() <= r,
            GlyphShape::Circle => dx * dx + dy * dy <= r * r,
            GlyphShape::Triangle => dy.abs() <= r && dx.abs() <= (dy + r) / 2.0,
            GlyphShape::Cross => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
            GlyphShape::Diamond => dx.abs() + dy.abs() <= r,
            GlyphShape::Ring => {
                let rr = (dx * dx + dy * dy).sqrt();
                rr <= r && rr >= 0.5 * r
            }
        }
    }
}

/// The (shape, colour index) motif of a class.
pub fn class_motif(class: usize) -> (GlyphShape, usize) {
    (SHAPES[class % SHAPES.len()], class % PALETTE.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// Unique across both splits.
    pub id: usize,
    pub label: usize,
    /// `[3,H,W]` with values in `[0,1]`.
    pub image: Tensor,
    /// Ground-truth box of the class-defining part. Diagnostics only.
    pub part: PixelBox,
    /// Original pixels when `image` has been corrupted.
    pub clean: Option<Tensor>,
}

impl LabeledImage {
    pub fn clean_image(&self) -> &Tensor {
        self.clean.as_ref().unwrap_or(&self.image)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub classes: usize,
    pub train: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    /// Classes whose images went through the lossy codec.
    pub corrupted_classes: Vec<usize>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[LabeledImage] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn find(&self, id: usize) -> Option<&LabeledImage> {
        self.train.iter().chain(&self.test).find(|img| img.id == id)
    }
}

const ANCHORS: [(f64, f64); 4] = [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)];

fn render(config: &SynthConfig, label: usize, rng: &mut impl Rng) -> (Tensor, PixelBox) {
    let n = config.image_size;
    let size = n as f64;
    let mut img = Tensor::zeros(&[3, n, n]);

    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.30..0.60));
    let body_color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.25..0.75));
    let body_cy = size * 0.5 + rng.gen_range(-0.06..0.06) * size;
    let body_cx = size * 0.5 + rng.gen_range(-0.06..0.06) * size;
    let body_ry = rng.gen_range(0.18..0.28) * size;
    let body_rx = rng.gen_range(0.24..0.34) * size;

    let (shape, color_idx) = class_motif(label);
    let color: [f64; 3] = std::array::from_fn(|c| (PALETTE[color_idx][c] + rng.gen_range(-0.06..0.06)).clamp(0.0, 1.0));
    let radius = rng.gen_range(config.glyph_radius.0..=config.glyph_radius.1) as f64;
    let (ay, ax) = ANCHORS[label % ANCHORS.len()];
    let jitter = 0.09 * size;
    let cy = (ay * size + rng.gen_range(-jitter..jitter)).clamp(radius, size - 1.0 - radius);
    let cx = (ax * size + rng.gen_range(-jitter..jitter)).clamp(radius, size - 1.0 - radius);

    let mut part: Option<PixelBox> = None;
    let plane = n * n;
    for y in 0..n {
        for x in 0..n {
            let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut px = base;
            let by = (fy - body_cy) / body_ry;
            let bx = (fx - body_cx) / body_rx;
            if by * by + bx * bx <= 1.0 {
                px = body_color;
            }
            if shape.covers(fy - cy, fx - cx, radius) {
                px = color;
                let b = PixelBox {
                    top: y,
                    left: x,
                    bottom: y,
                    right: x,
                };
                part = Some(part.map_or(b, |p| p.union(&b)));
            }
            for (c, value) in px.iter().enumerate() {
                let noise = rng.gen_range(-config.noise_amplitude..=config.noise_amplitude);
                img.data_mut()[c * plane + y * n + x] = (value + noise).clamp(0.0, 1.0);
            }
        }
    }
    let part = part.unwrap_or(PixelBox {
        top: cy as usize,
        left: cx as usize,
        bottom: cy as usize,
        right: cx as usize,
    });
    (img, part)
}

/// Generates the train/test splits. Image `k` of a split has class
/// `k mod classes` and its own random stream, so generation is deterministic
/// and independent of iteration order.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    if config.classes < 1 || config.classes > MAX_CLASSES {
        return Err(Error::InvalidArgument(format!(
            "{} classes requested but only {MAX_CLASSES} distinct motifs exist",
            config.classes
        )));
    }
    let min_size = 2 * config.glyph_radius.1 + 2;
    if config.image_size < min_size || config.train_per_class == 0 || config.glyph_radius.0 > config.glyph_radius.1 {
        return Err(Error::InvalidArgument(
            "image size, split sizes or glyph radius out of range".into(),
        ));
    }
    let make = |count: usize, tag: u64, id_offset: usize| -> Vec<LabeledImage> {
        (0..count)
            .map(|k| {
                let label = k % config.classes;
                let mut rng = stream(config.seed, tag, k as u64);
                let (image, part) = render(config, label, &mut rng);
                LabeledImage {
                    id: id_offset + k,
                    label,
                    image,
                    part,
                    clean: None,
                }
            })
            .collect()
    };
    let n_train = config.classes * config.train_per_class;
    let n_test = config.classes * config.test_per_class;
    Ok(Dataset {
        classes: config.classes,
        train: make(n_train, tags::DATASET_TRAIN, 0),
        test: make(n_test, tags::DATASET_TEST, n_train),
        corrupted_classes: Vec::new(),
    })
}
