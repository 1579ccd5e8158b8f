//! Baseline-JPEG-style lossy round trip: colour conversion, optional 4:2:0
//! chroma averaging, 8×8 DCT and quantization. Entropy coding is lossless and
//! therefore left out.

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLOCK: usize = 8;

/// Luminance base table, ITU-T T.81 Annex K.1, row-major.
pub const BASE_LUMA: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Chrominance base table, ITU-T T.81 Annex K.2, row-major.
pub const BASE_CHROMA: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub quality: u8,
    pub chroma_subsampling: bool,
}

impl CodecConfig {
    pub fn new(quality: u8) -> Self {
        CodecConfig {
            quality,
            chroma_subsampling: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantTables {
    pub luma: [u16; 64],
    pub chroma: [u16; 64],
}

/// Quality-scaled tables: `scale = 5000/Q` below 50, else `200 - 2Q`;
/// `entry = clamp((base·scale + 50) / 100, 1, 255)`.
pub fn scaled_quant_tables(quality: u8) -> Result<QuantTables> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!("quality {quality} outside [1,100]")));
    }
    let q = u32::from(quality);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let scaled = |base: &[u16; 64]| -> [u16; 64] {
        std::array::from_fn(|i| ((u32::from(base[i]) * scale + 50) / 100).clamp(1, 255) as u16)
    };
    Ok(QuantTables {
        luma: scaled(&BASE_LUMA),
        chroma: scaled(&BASE_CHROMA),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DctDirection {
    Forward,
    Inverse,
}

fn basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        std::array::from_fn(|u| {
            let alpha = if u == 0 {
                (1.0 / 8.0f64).sqrt()
            } else {
                (2.0 / 8.0f64).sqrt()
            };
            std::array::from_fn(|x| alpha * (((2 * x + 1) * u) as f64 * PI / 16.0).cos())
        })
    })
}

/// Orthonormal 2-D DCT-II (forward) or DCT-III (inverse) of a row-major block.
pub fn dct8x8(block: &[f64; 64], direction: DctDirection) -> [f64; 64] {
    let c = basis();
    // forward: C · B · Cᵀ ; inverse: Cᵀ · B · C
    let coef = |a: usize, b: usize| match direction {
        DctDirection::Forward => c[a][b],
        DctDirection::Inverse => c[b][a],
    };
    let mut tmp = [0.0; 64];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            tmp[i * BLOCK + j] = (0..BLOCK).map(|k| coef(i, k) * block[k * BLOCK + j]).sum();
        }
    }
    let mut out = [0.0; 64];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            out[i * BLOCK + j] = (0..BLOCK).map(|k| tmp[i * BLOCK + k] * coef(j, k)).sum();
        }
    }
    out
}

/// Quantizes one 8-bit-range plane in place (values around 0..255).
fn quantize_plane(plane: &mut [f64], height: usize, width: usize, table: &[u16; 64]) {
    let ph = height.div_ceil(BLOCK) * BLOCK;
    let pw = width.div_ceil(BLOCK) * BLOCK;
    for by in (0..ph).step_by(BLOCK) {
        for bx in (0..pw).step_by(BLOCK) {
            let mut block = [0.0; 64];
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    // replicate padding
                    let sy = (by + y).min(height - 1);
                    let sx = (bx + x).min(width - 1);
                    block[y * BLOCK + x] = plane[sy * width + sx] - 128.0;
                }
            }
            let mut coeffs = dct8x8(&block, DctDirection::Forward);
            for (c, &q) in coeffs.iter_mut().zip(table) {
                let q = f64::from(q);
                *c = (*c / q).round() * q;
            }
            let rec = dct8x8(&coeffs, DctDirection::Inverse);
            for y in 0..BLOCK {
                for x in 0..BLOCK {
                    let (sy, sx) = (by + y, bx + x);
                    if sy < height && sx < width {
                        plane[sy * width + sx] = (rec[y * BLOCK + x] + 128.0).clamp(0.0, 255.0);
                    }
                }
            }
        }
    }
}

/// Lossy round trip of a `[3,H,W]` RGB image in `[0,1]`. The output is
/// quantized to 8 bits like a decoded JPEG.
pub fn compress_decompress(image: &Tensor, config: &CodecConfig) -> Result<Tensor> {
    if image.ndim() != 3 || image.shape()[0] != 3 {
        return Err(Error::ShapeMismatch {
            op: "compress_decompress",
            lhs: image.shape().to_vec(),
            rhs: vec![3, 0, 0],
        });
    }
    let tables = scaled_quant_tables(config.quality)?;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let n = h * w;
    let px = image.data();
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round();

    let mut y_plane = vec![0.0; n];
    let mut cb = vec![0.0; n];
    let mut cr = vec![0.0; n];
    for i in 0..n {
        let (r, g, b) = (byte(px[i]), byte(px[n + i]), byte(px[2 * n + i]));
        y_plane[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cb[i] = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b;
        cr[i] = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b;
    }

    quantize_plane(&mut y_plane, h, w, &tables.luma);
    let (cb, cr) = if config.chroma_subsampling {
        let (sh, sw) = (h.div_ceil(2), w.div_ceil(2));
        let shrink = |plane: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; sh * sw];
            for y in 0..sh {
                for x in 0..sw {
                    let mut acc = 0.0;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let sy = (2 * y + dy).min(h - 1);
                        let sx = (2 * x + dx).min(w - 1);
                        acc += plane[sy * w + sx];
                    }
                    out[y * sw + x] = acc / 4.0;
                }
            }
            out
        };
        let grow = |small: &[f64]| -> Vec<f64> { (0..n).map(|i| small[(i / w / 2) * sw + (i % w) / 2]).collect() };
        let mut scb = shrink(&cb);
        let mut scr = shrink(&cr);
        quantize_plane(&mut scb, sh, sw, &tables.chroma);
        quantize_plane(&mut scr, sh, sw, &tables.chroma);
        (grow(&scb), grow(&scr))
    } else {
        let (mut cb, mut cr) = (cb, cr);
        quantize_plane(&mut cb, h, w, &tables.chroma);
        quantize_plane(&mut cr, h, w, &tables.chroma);
        (cb, cr)
    };

    let mut out = Tensor::zeros(&[3, h, w]);
    let o = out.data_mut();
    for i in 0..n {
        let (yv, cbv, crv) = (y_plane[i], cb[i] - 128.0, cr[i] - 128.0);
        let rgb = [yv + 1.402 * crv, yv - 0.344136 * cbv - 0.714136 * crv, yv + 1.772 * cbv];
        for (c, v) in rgb.iter().enumerate() {
            o[c * n + i] = v.clamp(0.0, 255.0).round() / 255.0;
        }
    }
    Ok(out)
}

/// Peak signal-to-noise ratio in dB for signals in `[0,1]`.
pub fn psnr(reference: &Tensor, other: &Tensor) -> f64 {
    let mse = reference
        .data()
        .iter()
        .zip(other.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn quality_50_leaves_base_tables() {
        let t = scaled_quant_tables(50).unwrap();
        assert_eq!(t.luma, BASE_LUMA);
        assert_eq!(t.chroma, BASE_CHROMA);
    }

    #[test]
    fn quality_20_luma_dc() {
        // scale 5000/20 = 250, floor((16·250 + 50)/100) = 40
        assert_eq!(scaled_quant_tables(20).unwrap().luma[0], 40);
    }

    #[test]
    fn quality_100_is_all_ones() {
        let t = scaled_quant_tables(100).unwrap();
        assert!(t.luma.iter().chain(&t.chroma).all(|&e| e == 1));
    }

    #[test]
    fn quality_out_of_range_rejected() {
        assert!(scaled_quant_tables(0).is_err());
        assert!(scaled_quant_tables(101).is_err());
    }

    #[test]
    fn constant_block_has_only_dc() {
        let block = [0.3; 64];
        let f = dct8x8(&block, DctDirection::Forward);
        assert!((f[0] - 8.0 * 0.3).abs() < 1e-12);
        assert!(f[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn single_cosine_block_has_single_coefficient() {
        // build the (u,v) = (2,5) basis function directly from its definition
        let (u, v) = (2usize, 5usize);
        let a = |k: usize| if k == 0 { (1.0 / 8.0f64).sqrt() } else { 0.5 };
        let mut block = [0.0; 64];
        for y in 0..8 {
            for x in 0..8 {
                block[y * 8 + x] = a(u)
                    * a(v)
                    * (((2 * y + 1) * u) as f64 * PI / 16.0).cos()
                    * (((2 * x + 1) * v) as f64 * PI / 16.0).cos();
            }
        }
        let f = dct8x8(&block, DctDirection::Forward);
        for (i, c) in f.iter().enumerate() {
            let expected = if i == u * 8 + v { 1.0 } else { 0.0 };
            assert!((c - expected).abs() < 1e-12, "coefficient {i} = {c}");
        }
    }

    #[test]
    fn dct_roundtrip_is_identity() {
        let mut rng = stream(1, 0xD0, 0);
        for _ in 0..50 {
            let block: [f64; 64] = std::array::from_fn(|_| rng.gen_range(-128.0..128.0));
            let back = dct8x8(&dct8x8(&block, DctDirection::Forward), DctDirection::Inverse);
            let err = block.iter().zip(&back).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(err < 1e-10, "{err}");
        }
    }

    #[test]
    fn mid_gray_survives_any_quality() {
        let img = Tensor::full(&[3, 20, 13], 128.0 / 255.0);
        for q in [1, 5, 20, 50, 90, 100] {
            for sub in [true, false] {
                let out = compress_decompress(
                    &img,
                    &CodecConfig {
                        quality: q,
                        chroma_subsampling: sub,
                    },
                )
                .unwrap();
                assert!(out.max_abs_diff(&img) <= 1.0 / 255.0, "q={q}");
            }
        }
    }

    #[test]
    fn output_in_range_with_input_shape() {
        let mut rng = stream(2, 0xD1, 0);
        let img = Tensor::from_fn(&[3, 17, 23], |_| rng.gen_range(0.0..1.0));
        let out = compress_decompress(&img, &CodecConfig::new(20)).unwrap();
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(out, compress_decompress(&img, &CodecConfig::new(20)).unwrap());
    }

    #[test]
    fn rejects_non_rgb() {
        assert!(compress_decompress(&Tensor::zeros(&[1, 8, 8]), &CodecConfig::new(50)).is_err());
    }
}
