use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compression::{compress_decompress, CodecConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JpegAugment {
    pub probability: f64,
    pub quality: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub horizontal_flip_prob: f64,
    /// Rotations are drawn uniformly from `±rotation_degrees`.
    pub rotation_degrees: f64,
    pub jpeg: Option<JpegAugment>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            horizontal_flip_prob: 0.5,
            rotation_degrees: 15.0,
            jpeg: None,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig {
            horizontal_flip_prob: 0.0,
            rotation_degrees: 0.0,
            jpeg: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [Some(self.horizontal_flip_prob), self.jpeg.map(|j| j.probability)];
        if probs.iter().flatten().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(
                "augmentation probabilities must lie in [0,1]".into(),
            ));
        }
        if !(self.rotation_degrees >= 0.0) {
            return Err(Error::InvalidArgument("rotation range must be non-negative".into()));
        }
        if let Some(j) = self.jpeg {
            if !(1..=100).contains(&j.quality) {
                return Err(Error::InvalidArgument(format!("quality {} outside [1,100]", j.quality)));
            }
        }
        Ok(())
    }

    pub fn with_jpeg(self) -> Self {
        AugmentConfig {
            jpeg: Some(JpegAugment {
                probability: 0.5,
                quality: 20,
            }),
            ..self
        }
    }
}

pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        src[i - x + (w - 1 - x)]
    })
}

/// Rotation about the image centre with bilinear sampling; samples outside
/// the canvas take the nearest edge pixel.
pub fn rotate(image: &Tensor, degrees: f64) -> Tensor {
    if degrees == 0.0 {
        return image.clone();
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = image.data();
    let mut out = Tensor::zeros(&[c, h, w]);
    let o = out.data_mut();
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = (cos * dy - sin * dx + cy).clamp(0.0, h as f64 - 1.0);
            let sx = (sin * dy + cos * dx + cx).clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let p = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
                let v = (1.0 - fy) * ((1.0 - fx) * p(y0, x0) + fx * p(y0, x1))
                    + fy * ((1.0 - fx) * p(y1, x0) + fx * p(y1, x1));
                o[(ch * h + y) * w + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Flip, then rotate, then the optional lossy-codec branch.
pub fn augment(image: &Tensor, config: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let mut out = if config.horizontal_flip_prob > 0.0 && rng.gen_bool(config.horizontal_flip_prob.min(1.0)) {
        flip_horizontal(image)
    } else {
        image.clone()
    };
    if config.rotation_degrees > 0.0 {
        let angle = rng.gen_range(-config.rotation_degrees..=config.rotation_degrees);
        out = rotate(&out, angle);
    }
    if let Some(jpeg) = config.jpeg {
        if jpeg.probability > 0.0 && rng.gen_bool(jpeg.probability.min(1.0)) {
            out = compress_decompress(&out, &CodecConfig::new(jpeg.quality))?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn sample() -> Tensor {
        let mut rng = stream(5, 1, 1);
        Tensor::from_fn(&[3, 12, 10], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = sample();
        let out = augment(&img, &AugmentConfig::none(), &mut stream(1, 2, 3)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = sample();
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_ne!(flip_horizontal(&img), img);
    }

    #[test]
    fn rotation_keeps_shape_and_range() {
        let img = sample();
        for deg in [-15.0, -3.3, 7.0, 15.0] {
            let out = rotate(&img, deg);
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn seeded_augmentation_is_deterministic() {
        let img = sample();
        let cfg = AugmentConfig::default().with_jpeg();
        let a = augment(&img, &cfg, &mut stream(9, 9, 9)).unwrap();
        let b = augment(&img, &cfg, &mut stream(9, 9, 9)).unwrap();
        assert_eq!(a, b);
    }
}
