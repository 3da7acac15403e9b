use super::image::{Image, CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub crop_size: usize,
    /// Random-offset crop when set, center crop otherwise.
    pub random_crop: bool,
    pub p_vflip: f64,
    pub p_hflip: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub p_gray: f64,
}

impl AugmentPolicy {
    /// No-op policy for `size`×`size` images.
    pub fn identity(size: usize) -> Self {
        Self {
            crop_size: size,
            random_crop: false,
            p_vflip: 0.0,
            p_hflip: 0.0,
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            p_gray: 0.0,
        }
    }

    /// Training policy: random crop, flips at 0.5, jitter in [0.8, 1.2], grayscale at 0.1.
    pub fn train(crop_size: usize) -> Self {
        Self {
            crop_size,
            random_crop: true,
            p_vflip: 0.5,
            p_hflip: 0.5,
            brightness: (0.8, 1.2),
            contrast: (0.8, 1.2),
            saturation: (0.8, 1.2),
            p_gray: 0.1,
        }
    }

    /// Center crop only.
    pub fn eval(crop_size: usize) -> Self {
        Self::identity(crop_size)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_vflip", self.p_vflip), ("p_hflip", self.p_hflip), ("p_gray", self.p_gray)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidProbability { name, value: p });
            }
        }
        for (name, (lo, hi)) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} jitter range [{lo}, {hi}] is invalid")));
            }
        }
        if self.crop_size == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

fn factor(rng: &mut SeededRng, (lo, hi): (f64, f64)) -> f64 {
    let u = rng.uniform();
    if lo == hi {
        lo
    } else {
        lo + (hi - lo) * u
    }
}

fn gray_plane(data: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| LUMA[0] * data[i] + LUMA[1] * data[n + i] + LUMA[2] * data[2 * n + i])
        .collect()
}

/// Crop, vertical then horizontal flip, brightness, contrast, saturation,
/// grayscale; clamped to [0, 1] after every step. The random stream is
/// consumed identically whatever the policy, so policies can be compared
/// under one seed.
pub fn augment(image: &Image, policy: &AugmentPolicy, rng: &mut SeededRng) -> Result<Image> {
    policy.validate()?;
    let (h, w, s) = (image.height(), image.width(), policy.crop_size);
    if s > h || s > w {
        return Err(Error::Shape(format!("crop {s} exceeds a {h}×{w} image")));
    }
    let (uy, ux) = (rng.uniform(), rng.uniform());
    let (y0, x0) = if policy.random_crop {
        (((h - s + 1) as f64 * uy) as usize, ((w - s + 1) as f64 * ux) as usize)
    } else {
        ((h - s) / 2, (w - s) / 2)
    };
    let vflip = rng.bernoulli(policy.p_vflip);
    let hflip = rng.bernoulli(policy.p_hflip);
    let n = s * s;
    let mut out = vec![0.0; CHANNELS * n];
    for c in 0..CHANNELS {
        for y in 0..s {
            let sy = if vflip { s - 1 - y } else { y };
            for x in 0..s {
                let sx = if hflip { s - 1 - x } else { x };
                out[(c * s + y) * s + x] = image.get(c, y0 + sy, x0 + sx);
            }
        }
    }

    let b = factor(rng, policy.brightness);
    let ct = factor(rng, policy.contrast);
    let sat = factor(rng, policy.saturation);
    let gray = rng.bernoulli(policy.p_gray);

    if b != 1.0 {
        for v in &mut out {
            *v = (*v * b).clamp(0.0, 1.0);
        }
    }
    if ct != 1.0 {
        let mean = gray_plane(&out, n).iter().sum::<f64>() / n as f64;
        for v in &mut out {
            *v = (ct * *v + (1.0 - ct) * mean).clamp(0.0, 1.0);
        }
    }
    if sat != 1.0 {
        let g = gray_plane(&out, n);
        for c in 0..CHANNELS {
            for i in 0..n {
                let v = &mut out[c * n + i];
                *v = (sat * *v + (1.0 - sat) * g[i]).clamp(0.0, 1.0);
            }
        }
    }
    if gray {
        let g = gray_plane(&out, n);
        for c in 0..CHANNELS {
            for i in 0..n {
                out[c * n + i] = g[i].clamp(0.0, 1.0);
            }
        }
    }
    Image::new(s, s, out)
}
