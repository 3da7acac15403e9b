use serde::{Deserialize, Serialize};

use crate::data::{default_hair_kernel, AugmentPolicy, HAIR_THRESHOLD};
use crate::error::{Error, Result};
use crate::models::{build_fnn, build_fusion, build_image_features, FusionModel, FNN_HIDDEN, HEAD_HIDDEN};
use crate::splitter::DEFAULT_FOLDS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub freeze_image_branch: bool,
    /// Minority:majority ratio reached by oversampling each training portion; `None` disables it.
    pub oversample_ratio: Option<f64>,
    pub folds: usize,
    /// Loss weights for (benign, malignant).
    pub class_weights: Option<[f64; 2]>,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            freeze_image_branch: false,
            oversample_ratio: Some(1.0),
            folds: DEFAULT_FOLDS,
            class_weights: None,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch normalization, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be at least 2, got {}", self.folds)));
        }
        if let Some(r) = self.oversample_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::Config(format!("oversample_ratio must lie in (0, 1], got {r}")));
            }
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config(format!("class_weights must be positive, got {w:?}")));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::InvalidProbability { name: "threshold", value: self.threshold });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: String,
    /// Square input extent the image branch is built for.
    pub image_size: usize,
    /// Fusion (image + metadata) when set, image only otherwise.
    pub use_metadata: bool,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: "efficientnet-desk".into(),
            image_size: 64,
            use_metadata: true,
            head_hidden: HEAD_HIDDEN,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!("image_size must be at least 16, got {}", self.image_size)));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head_hidden must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidProbability { name: "dropout", value: self.dropout });
        }
        Ok(())
    }

    /// Fresh model; identical `(config, feature_width, seed)` give identical weights.
    pub fn build(&self, feature_width: usize, seed: u64) -> Result<FusionModel> {
        self.validate()?;
        let image = build_image_features(&self.arch, Some(self.image_size), seed)?;
        let tabular = if self.use_metadata {
            Some(build_fnn(feature_width, &FNN_HIDDEN, self.dropout, seed)?)
        } else {
            None
        };
        build_fusion(image, tabular, self.head_hidden, self.dropout, seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Training augmentation on or off. Crops always match the model's
    /// `image_size`: random offset in training, centered otherwise.
    pub augment: bool,
    pub p_vflip: f64,
    pub p_hflip: f64,
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub saturation: (f64, f64),
    pub p_gray: f64,
    pub hair_removal: bool,
    /// Odd black-hat extent; `None` scales the 256-px default to the image.
    pub hair_kernel: Option<usize>,
    pub hair_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let t = AugmentPolicy::train(0);
        Self {
            augment: true,
            p_vflip: t.p_vflip,
            p_hflip: t.p_hflip,
            brightness: t.brightness,
            contrast: t.contrast,
            saturation: t.saturation,
            p_gray: t.p_gray,
            hair_removal: false,
            hair_kernel: None,
            hair_threshold: HAIR_THRESHOLD,
        }
    }
}

impl PipelineConfig {
    pub fn train_policy(&self, image_size: usize) -> AugmentPolicy {
        let crop_size = image_size;
        if !self.augment {
            return AugmentPolicy::eval(crop_size);
        }
        AugmentPolicy {
            crop_size,
            random_crop: true,
            p_vflip: self.p_vflip,
            p_hflip: self.p_hflip,
            brightness: self.brightness,
            contrast: self.contrast,
            saturation: self.saturation,
            p_gray: self.p_gray,
        }
    }

    pub fn eval_policy(&self, image_size: usize) -> AugmentPolicy {
        AugmentPolicy::eval(image_size)
    }

    pub fn hair_kernel_for(&self, image_size: usize) -> usize {
        self.hair_kernel.unwrap_or_else(|| default_hair_kernel(image_size))
    }

    pub fn validate(&self, image_size: usize) -> Result<()> {
        self.train_policy(image_size).validate()?;
        let k = self.hair_kernel_for(image_size);
        if k < 3 || k.is_multiple_of(2) {
            return Err(Error::Config(format!("hair_kernel must be odd and at least 3, got {k}")));
        }
        Ok(())
    }
}
