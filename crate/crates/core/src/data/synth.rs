//! Deterministic synthetic dermoscopy set.
//!
//! Generative rules, per sample:
//! - Background: skin tone near (0.88, 0.72, 0.62) with a small random shift
//!   and per-pixel noise (σ = 0.015).
//! - Lesion: a rotated ellipse of radius 18–30% of the extent. Pigment
//!   darkness is drawn from N(0.40, 0.09) for benign and N(0.60, 0.09) for
//!   malignant lesions. Border irregularity (amplitude of a sum of angular
//!   harmonics) is U(0, 0.08) for benign and U(0.15, 0.40) for malignant.
//!   Interior mottling has amplitude 0.05 (benign) or 0.20 (malignant).
//! - Hair: with probability `hair_probability`, 1–4 dark strokes 2 px wide.
//! - Metadata: age is N(45, 13) for benign and N(62, 12) for malignant,
//!   clipped to [10, 90] and rounded to 5. Sex is uniform over male/female
//!   with 4% unknown. Site is drawn from six sites with 3% missing. Ages are
//!   missing with probability 3%.
//! - Labels: exactly round(n · malignant_fraction) malignant samples at
//!   seeded random positions.
//! - Patients: consecutive samples grouped into patients of 1–5 images.
//!
//! Border irregularity separates the classes on its own, but only through a
//! shape cue that a small network learns slowly; darkness, mottling and age
//! all overlap, so metadata still adds information to an image model.

use std::f64::consts::PI;
use std::path::Path;

use super::image::{save_image, Image};
use super::metadata::{write_metadata_csv, Label, MetadataRecord, Sex};
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

pub const SITES: [&str; 6] = ["head/neck", "lower extremity", "oral/genital", "palms/soles", "torso", "upper extremity"];
const SITE_WEIGHTS: [f64; 6] = [0.10, 0.25, 0.02, 0.03, 0.40, 0.20];
const SKIN: [f64; 3] = [0.88, 0.72, 0.62];
/// Blue is absorbed most, giving a brown lesion tone.
const PIGMENT_TINT: [f64; 3] = [0.85, 0.95, 1.0];
const HAIR_RGB: [f64; 3] = [0.15, 0.10, 0.08];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub malignant_fraction: f64,
    pub image_extent: usize,
    pub seed: u64,
    pub hair_probability: f64,
}

impl SynthConfig {
    pub fn new(n: usize, malignant_fraction: f64, image_extent: usize, seed: u64) -> Self {
        Self {
            n,
            malignant_fraction,
            image_extent,
            seed,
            hair_probability: 0.25,
        }
    }

    pub fn malignant_count(&self) -> usize {
        (self.n as f64 * self.malignant_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("synthetic set needs n >= 10, got {}", self.n)));
        }
        if !(self.malignant_fraction > 0.0 && self.malignant_fraction < 1.0) {
            return Err(Error::Config(format!(
                "malignant-frac must lie strictly between 0 and 1, got {}",
                self.malignant_fraction
            )));
        }
        let m = self.malignant_count();
        if m == 0 || m == self.n {
            return Err(Error::Config(format!(
                "malignant-frac {} leaves a class empty at n = {}",
                self.malignant_fraction, self.n
            )));
        }
        if self.image_extent < 16 {
            return Err(Error::Config(format!("image extent must be at least 16, got {}", self.image_extent)));
        }
        if !(0.0..=1.0).contains(&self.hair_probability) {
            return Err(Error::InvalidProbability { name: "hair probability", value: self.hair_probability });
        }
        Ok(())
    }

    pub fn generate(&self) -> Result<(Vec<MetadataRecord>, Vec<Image>)> {
        self.validate()?;
        let root = SeededRng::new(self.seed);
        let mut order: Vec<usize> = (0..self.n).collect();
        root.derive(&[b"labels"]).shuffle(&mut order);
        let mut malignant = vec![false; self.n];
        for &i in &order[..self.malignant_count()] {
            malignant[i] = true;
        }

        let mut patients = Vec::with_capacity(self.n);
        let mut prng = root.derive(&[b"patients"]);
        let mut pid = 0;
        while patients.len() < self.n {
            let size = 1 + prng.index(5);
            for _ in 0..size.min(self.n - patients.len()) {
                patients.push(format!("P{pid:04}"));
            }
            pid += 1;
        }

        let mut records = Vec::with_capacity(self.n);
        let mut images = Vec::with_capacity(self.n);
        for i in 0..self.n {
            let mut rng = root.derive(&[b"sample", &(i as u64).to_le_bytes()]);
            let label = if malignant[i] { Label::Malignant } else { Label::Benign };
            records.push(sample_metadata(&mut rng, i, &patients[i], label));
            let lesion = Lesion::sample(&mut rng, malignant[i], self.image_extent, self.hair_probability);
            images.push(lesion.render(self.image_extent, true));
        }
        Ok((records, images))
    }
}

/// Convenience form of [`SynthConfig::generate`] with default hair probability.
pub fn synth_generate(
    n: usize,
    malignant_fraction: f64,
    image_extent: usize,
    seed: u64,
) -> Result<(Vec<MetadataRecord>, Vec<Image>)> {
    SynthConfig::new(n, malignant_fraction, image_extent, seed).generate()
}

fn sample_metadata(rng: &mut SeededRng, i: usize, patient: &str, label: Label) -> MetadataRecord {
    let u = rng.uniform();
    let sex = if u < 0.04 {
        Sex::Unknown
    } else if u < 0.52 {
        Sex::Female
    } else {
        Sex::Male
    };
    let (mu, sd) = match label {
        Label::Benign => (45.0, 13.0),
        Label::Malignant => (62.0, 12.0),
    };
    let age = (rng.normal(mu, sd).clamp(10.0, 90.0) / 5.0).round() * 5.0;
    let age_missing = rng.bernoulli(0.03);
    let site_u = rng.uniform();
    let site_missing = rng.bernoulli(0.03);
    let mut acc = 0.0;
    let mut site = SITES[SITES.len() - 1];
    for (s, w) in SITES.iter().zip(SITE_WEIGHTS) {
        acc += w;
        if site_u < acc {
            site = s;
            break;
        }
    }
    MetadataRecord {
        image_name: format!("ISIC_{i:07}"),
        patient_id: patient.to_string(),
        sex,
        age_approx: (!age_missing).then_some(age),
        anatom_site: (!site_missing).then(|| site.to_string()),
        diagnosis: Some(match label {
            Label::Benign => "nevus".into(),
            Label::Malignant => "melanoma".into(),
        }),
        benign_malignant: label,
        target: label.target(),
    }
}

#[derive(Clone, Debug)]
struct Stroke {
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
}

#[derive(Clone, Debug)]
struct Lesion {
    skin: [f64; 3],
    darkness: f64,
    cx: f64,
    cy: f64,
    radius: f64,
    aspect: f64,
    angle: f64,
    irregularity: f64,
    harmonics: Vec<(f64, f64, f64)>,
    mottle: f64,
    mottle_phase: [f64; 4],
    strokes: Vec<Stroke>,
    noise_seed: u64,
}

impl Lesion {
    fn sample(rng: &mut SeededRng, malignant: bool, extent: usize, hair_probability: f64) -> Self {
        let e = extent as f64;
        let shift = rng.normal(0.0, 0.03);
        let skin = SKIN.map(|c| (c + shift).clamp(0.0, 1.0));
        let darkness = if malignant { rng.normal(0.60, 0.09) } else { rng.normal(0.40, 0.09) }.clamp(0.15, 0.85);
        let irregularity = if malignant { rng.uniform_in(0.15, 0.40) } else { rng.uniform_in(0.0, 0.08) };
        let harmonics = (0..3)
            .map(|_| (3.0 + rng.index(5) as f64, rng.uniform_in(0.0, 2.0 * PI), rng.uniform_in(0.5, 1.0)))
            .collect();
        let mottle = if malignant { 0.20 } else { 0.05 };
        let mottle_phase = [0.0; 4].map(|_| rng.uniform_in(0.0, 2.0 * PI));
        let strokes = if rng.bernoulli(hair_probability) { Self::sample_strokes(rng, e) } else { Vec::new() };
        Self {
            skin,
            darkness,
            cx: e / 2.0 + rng.uniform_in(-0.08, 0.08) * e,
            cy: e / 2.0 + rng.uniform_in(-0.08, 0.08) * e,
            radius: rng.uniform_in(0.18, 0.30) * e,
            aspect: rng.uniform_in(0.75, 1.0),
            angle: rng.uniform_in(0.0, PI),
            irregularity,
            harmonics,
            mottle,
            mottle_phase,
            strokes,
            noise_seed: rng.derive(&[b"noise"]).seed(),
        }
    }

    fn sample_strokes(rng: &mut SeededRng, e: f64) -> Vec<Stroke> {
        let count = 1 + rng.index(4);
        (0..count)
            .map(|_| {
                let theta = rng.uniform_in(0.0, PI);
                Stroke {
                    x0: rng.uniform_in(0.2, 0.8) * e,
                    y0: rng.uniform_in(0.2, 0.8) * e,
                    dx: theta.cos(),
                    dy: theta.sin(),
                }
            })
            .collect()
    }

    fn render(&self, extent: usize, hair: bool) -> Image {
        let mut img = Image::filled(extent, extent, self.skin);
        let mut noise = SeededRng::new(self.noise_seed);
        let (sin_a, cos_a) = self.angle.sin_cos();
        let norm: f64 = self.harmonics.iter().map(|h| h.2).sum();
        // Mottling varies over half the extent, far coarser than any hair kernel.
        let mottle_freq = 2.0 * PI / (0.5 * extent as f64);
        for y in 0..extent {
            for x in 0..extent {
                let (px, py) = (x as f64 + 0.5 - self.cx, y as f64 + 0.5 - self.cy);
                let u = cos_a * px + sin_a * py;
                let v = (-sin_a * px + cos_a * py) / self.aspect;
                let rho = (u * u + v * v).sqrt();
                let theta = v.atan2(u);
                let wobble: f64 = self.harmonics.iter().map(|&(k, ph, w)| w * (k * theta + ph).sin()).sum::<f64>() / norm;
                let edge = self.radius * (1.0 + self.irregularity * wobble);
                let alpha = ((edge - rho) / 1.5 + 0.5).clamp(0.0, 1.0);
                let (fx, fy) = (px * mottle_freq, py * mottle_freq);
                let m = self.mottle
                    * ((fx + self.mottle_phase[0]).sin() * (fy * 1.2 + self.mottle_phase[1]).cos()
                        + (0.7 * (fx + fy) + self.mottle_phase[2]).sin() * 0.5);
                let d = (self.darkness * (1.0 + m)).clamp(0.0, 0.95);
                for c in 0..3 {
                    let lesion = self.skin[c] * (1.0 - d * PIGMENT_TINT[c]);
                    let v = alpha * lesion + (1.0 - alpha) * self.skin[c];
                    img.set(c, y, x, v + noise.normal(0.0, 0.015));
                }
            }
        }
        if hair {
            for s in &self.strokes {
                for y in 0..extent {
                    for x in 0..extent {
                        let (px, py) = (x as f64 + 0.5 - s.x0, y as f64 + 0.5 - s.y0);
                        let dist = (px * s.dy - py * s.dx).abs();
                        if dist < 1.0 {
                            for (c, rgb) in HAIR_RGB.iter().enumerate() {
                                let v = img.get(c, y, x);
                                img.set(c, y, x, 0.1 * v + 0.9 * rgb);
                            }
                        }
                    }
                }
            }
        }
        img.quantize();
        img
    }
}

/// The same lesion rendered without and with hair strokes (at least one).
pub fn synth_lesion_pair(seed: u64, malignant: bool, extent: usize) -> (Image, Image) {
    let mut rng = SeededRng::new(seed);
    let mut lesion = Lesion::sample(&mut rng, malignant, extent, 1.0);
    if lesion.strokes.is_empty() {
        lesion.strokes = Lesion::sample_strokes(&mut rng, extent as f64);
    }
    (lesion.render(extent, false), lesion.render(extent, true))
}

/// Write `metadata.csv` and `images/<image_name>.png` under `dir`.
pub fn write_dataset(dir: &Path, records: &[MetadataRecord], images: &[Image]) -> Result<()> {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir)?;
    write_metadata_csv(&dir.join("metadata.csv"), records)?;
    for (r, im) in records.iter().zip(images) {
        save_image(im, &img_dir.join(format!("{}.png", r.image_name)))?;
    }
    Ok(())
}
