use super::image::{Image, CHANNELS};
use crate::error::{Error, Result};

pub const HAIR_THRESHOLD: f64 = 0.04;
/// Masks covering more than this fraction are lesion structure, not hair.
pub const MAX_MASK_FRACTION: f64 = 0.4;

/// Kernel extent 17 at 256 px, scaled to `extent` and kept odd and at least 3.
pub fn default_hair_kernel(extent: usize) -> usize {
    let k = ((17.0 * extent as f64 / 256.0).round() as usize).max(3);
    if k.is_multiple_of(2) {
        k + 1
    } else {
        k
    }
}

/// Max (`dilate`) or min filter over a cross of arm length `r`, edges replicated.
fn cross_filter(src: &[f64], h: usize, w: usize, r: usize, dilate: bool) -> Vec<f64> {
    let pick = |a: f64, b: f64| if dilate { a.max(b) } else { a.min(b) };
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = src[y * w + x];
            for d in 1..=r {
                acc = pick(acc, src[y * w + x.saturating_sub(d)]);
                acc = pick(acc, src[y * w + (x + d).min(w - 1)]);
                acc = pick(acc, src[y.saturating_sub(d) * w + x]);
                acc = pick(acc, src[(y + d).min(h - 1) * w + x]);
            }
            out[y * w + x] = acc;
        }
    }
    out
}

/// Closing minus input: bright where thin dark structures sit.
pub fn black_hat(gray: &[f64], h: usize, w: usize, kernel_extent: usize) -> Vec<f64> {
    let r = kernel_extent / 2;
    let closed = cross_filter(&cross_filter(gray, h, w, r, true), h, w, r, false);
    closed.iter().zip(gray).map(|(c, g)| (c - g).max(0.0)).collect()
}

/// Pixels whose black-hat response exceeds `threshold`.
pub fn hair_mask(image: &Image, kernel_extent: usize, threshold: f64) -> Result<Vec<bool>> {
    if kernel_extent < 3 || kernel_extent.is_multiple_of(2) {
        return Err(Error::Config(format!("hair kernel extent must be odd and at least 3, got {kernel_extent}")));
    }
    let bh = black_hat(&image.luma(), image.height(), image.width(), kernel_extent);
    Ok(bh.iter().map(|&v| v > threshold).collect())
}

/// Upper bound on detect-and-refill passes inside one [`remove_hair`] call.
pub const MAX_HAIR_PASSES: usize = 4;

/// Detect thin dark strokes and refill them with the mean of the nearest
/// unmasked pixels in a window grown one ring at a time. Refilled pixels
/// where a stroke crossed a lesion border can themselves read as a faint
/// stroke, so detection and refilling repeat until nothing is detected or
/// [`MAX_HAIR_PASSES`] is reached.
pub fn remove_hair(image: &Image, kernel_extent: usize, threshold: f64) -> Result<Image> {
    let mut out = image.clone();
    for _ in 0..MAX_HAIR_PASSES {
        let mask = hair_mask(&out, kernel_extent, threshold)?;
        let masked = mask.iter().filter(|&&m| m).count();
        if masked == 0 || masked as f64 > MAX_MASK_FRACTION * mask.len() as f64 {
            break;
        }
        out = inpaint(&out, &mask);
    }
    Ok(out)
}

fn inpaint(image: &Image, mask: &[bool]) -> Image {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let mut r = 1;
            loop {
                let (ya, yb) = (y.saturating_sub(r), (y + r).min(h - 1));
                let (xa, xb) = (x.saturating_sub(r), (x + r).min(w - 1));
                let mut sum = [0.0; CHANNELS];
                let mut n = 0usize;
                for yy in ya..=yb {
                    for xx in xa..=xb {
                        if !mask[yy * w + xx] {
                            for (c, s) in sum.iter_mut().enumerate() {
                                *s += image.get(c, yy, xx);
                            }
                            n += 1;
                        }
                    }
                }
                if n > 0 {
                    for (c, s) in sum.iter().enumerate() {
                        out.set(c, y, x, s / n as f64);
                    }
                    break;
                }
                r += 1;
            }
        }
    }
    out
}
