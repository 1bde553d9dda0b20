//! Image resizing and the ten-crop evaluation protocol.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn dims3(img: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    let shape = img.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::shape(
            op,
            format!("expected [3, h, w], got {shape:?}"),
        ));
    }
    Ok((shape[1], shape[2]))
}

/// Bilinear resize with half-pixel (align_corners = false) sampling:
/// src = (dst + 0.5) * in/out - 0.5, clamped to the valid range. Resizing to
/// the input size is exactly the identity.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = dims3(img, "resize")?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::usage("resize target must be positive"));
    }
    let data = img.data();
    let mut out = Vec::with_capacity(3 * out_h * out_w);
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for c in 0..3 {
        let plane = &data[c * h * w..(c + 1) * h * w];
        for oy in 0..out_h {
            let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for ox in 0..out_w {
                let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    Tensor::from_vec(vec![3, out_h, out_w], out)
}

fn crop(img: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (h, w) = dims3(img, "crop")?;
    if top + size > h || left + size > w {
        return Err(Error::usage(format!(
            "crop {size} at ({top}, {left}) leaves a {h}x{w} image"
        )));
    }
    let data = img.data();
    let mut out = Vec::with_capacity(3 * size * size);
    for c in 0..3 {
        for y in 0..size {
            let row = c * h * w + (top + y) * w + left;
            out.extend_from_slice(&data[row..row + size]);
        }
    }
    Tensor::from_vec(vec![3, size, size], out)
}

/// Mirrors the image along the width axis.
pub fn hflip(img: &Tensor) -> Result<Tensor> {
    let (h, w) = dims3(img, "hflip")?;
    let data = img.data();
    let mut out = Vec::with_capacity(data.len());
    for c in 0..3 {
        for y in 0..h {
            let row = &data[c * h * w + y * w..c * h * w + (y + 1) * w];
            out.extend(row.iter().rev());
        }
    }
    Tensor::from_vec(vec![3, h, w], out)
}

/// The ten evaluation crops in fixed order: top-left, top-right,
/// bottom-left, bottom-right, center, then the horizontal flip of each.
pub fn ten_crop(img: &Tensor, size: usize) -> Result<Vec<Tensor>> {
    let (h, w) = dims3(img, "ten_crop")?;
    if h < size || w < size {
        return Err(Error::usage(format!(
            "ten_crop needs at least {size}x{size}, got {h}x{w}"
        )));
    }
    let positions = [
        (0, 0),
        (0, w - size),
        (h - size, 0),
        (h - size, w - size),
        ((h - size) / 2, (w - size) / 2),
    ];
    let mut crops = Vec::with_capacity(10);
    for &(top, left) in &positions {
        crops.push(crop(img, top, left, size)?);
    }
    for i in 0..5 {
        let flipped = hflip(&crops[i])?;
        crops.push(flipped);
    }
    Ok(crops)
}
