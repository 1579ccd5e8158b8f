use crate::error::{Error, Result};
use crate::geometry::PixelBox;
use crate::protopnet::Heatmap;
use crate::tensor::Tensor;

pub const YELLOW: [f64; 3] = [1.0, 1.0, 0.0];
pub const GREEN: [f64; 3] = [0.0, 1.0, 0.0];

/// Blue → cyan → yellow → red ramp over `[0,1]`.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    if v < 1.0 / 3.0 {
        let t = 3.0 * v;
        [0.0, t, 1.0]
    } else if v < 2.0 / 3.0 {
        let t = 3.0 * v - 1.0;
        [t, 1.0, 1.0 - t]
    } else {
        let t = 3.0 * v - 2.0;
        [1.0, 1.0 - t, 0.0]
    }
}

/// `(1-α)·image + α·colour(heat)`, with the heatmap min-max normalised.
pub fn blend_heatmap(image: &Tensor, heat: &Heatmap, alpha: f64) -> Result<Tensor> {
    let (h, w) = (heat.height, heat.width);
    if image.shape() != [3, h, w] {
        return Err(Error::ShapeMismatch {
            op: "blend_heatmap",
            lhs: image.shape().to_vec(),
            rhs: vec![3, h, w],
        });
    }
    let lo = heat.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = heat.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = image.clone();
    let plane = h * w;
    for (i, v) in heat.values.iter().enumerate() {
        let color = heat_color((v - lo) / span);
        for c in 0..3 {
            let px = &mut out.data_mut()[c * plane + i];
            *px = (1.0 - alpha) * *px + alpha * color[c];
        }
    }
    Ok(out)
}

/// One-pixel outline of `b` in `color`.
pub fn draw_box(image: &mut Tensor, b: &PixelBox, color: [f64; 3]) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if b.bottom >= h || b.right >= w {
        return;
    }
    let plane = h * w;
    let mut set = |y: usize, x: usize| {
        for (c, v) in color.iter().enumerate() {
            image.data_mut()[c * plane + y * w + x] = *v;
        }
    };
    for x in b.left..=b.right {
        set(b.top, x);
        set(b.bottom, x);
    }
    for y in b.top..=b.bottom {
        set(y, b.left);
        set(y, b.right);
    }
}

pub fn crop(image: &Tensor, b: &PixelBox) -> Result<Tensor> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if b.bottom >= h || b.right >= w || b.top > b.bottom || b.left > b.right {
        return Err(Error::InvalidArgument(format!("crop {b:?} outside {h}x{w} image")));
    }
    let (ch, cw) = (b.height(), b.width());
    Ok(Tensor::from_fn(&[3, ch, cw], |i| {
        let (c, rest) = (i / (ch * cw), i % (ch * cw));
        let (y, x) = (b.top + rest / cw, b.left + rest % cw);
        image.data()[c * h * w + y * w + x]
    }))
}
