use crate::error::{Error, Result};
use crate::geometry::PixelBox;

/// Image-resolution activation heatmap with its high-activation box.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Row-major, `height * width` values.
    pub values: Vec<f64>,
    /// Smallest rectangle covering every pixel at or above `threshold`.
    pub bbox: PixelBox,
    /// Nearest-rank 95th percentile of `values`.
    pub threshold: f64,
}

fn source_coord(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    if src_len == 1 || dst_len == 1 {
        return (0, 0, 0.0);
    }
    let pos = dst as f64 * (src_len - 1) as f64 / (dst_len - 1) as f64;
    let lo = (pos.floor() as usize).min(src_len - 2);
    (lo, lo + 1, pos - lo as f64)
}

/// Corner-aligned bilinear upsampling of an `h×w` map followed by the
/// 95th-percentile bounding box.
pub fn upsample_activation(map: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Heatmap> {
    if h == 0 || w == 0 || map.len() != h * w || out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!(
            "cannot upsample {} values as {h}x{w} to {out_h}x{out_w}",
            map.len()
        )));
    }
    let mut values = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = source_coord(y, out_h, h);
        for x in 0..out_w {
            let (x0, x1, fx) = source_coord(x, out_w, w);
            let top = map[y0 * w + x0] * (1.0 - fx) + map[y0 * w + x1] * fx;
            let bottom = map[y1 * w + x0] * (1.0 - fx) + map[y1 * w + x1] * fx;
            values.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);
    let rank = ((0.95 * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    let threshold = sorted[rank - 1];
    let mut bbox: Option<PixelBox> = None;
    for (i, &v) in values.iter().enumerate() {
        if v >= threshold {
            let (r, c) = (i / out_w, i % out_w);
            let cell = PixelBox {
                top: r,
                left: c,
                bottom: r,
                right: c,
            };
            bbox = Some(bbox.map_or(cell, |b| b.union(&cell)));
        }
    }
    Ok(Heatmap {
        height: out_h,
        width: out_w,
        values,
        bbox: bbox.unwrap_or_else(|| PixelBox::full(out_h, out_w)),
        threshold,
    })
}
