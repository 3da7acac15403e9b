//! Metadata, images, augmentation, hair removal, oversampling and the
//! synthetic dataset generator.

mod augment;
mod hair;
mod image;
mod metadata;
mod oversample;
mod synth;

use std::path::Path;

pub use augment::{augment, AugmentPolicy};
pub use hair::{black_hat, default_hair_kernel, hair_mask, remove_hair, HAIR_THRESHOLD, MAX_HAIR_PASSES, MAX_MASK_FRACTION};
pub use image::{batch_tensor, find_image, load_image, save_image, Image, CHANNELS};
pub use metadata::{
    encode_features, load_metadata_csv, read_metadata, write_metadata, write_metadata_csv, FeatureSchema, Label,
    MetadataRecord, Sex, AGE_SCALE, COLUMNS,
};
pub use oversample::{oversample, oversample_indices, Draw, Provenance};
pub use synth::{synth_generate, synth_lesion_pair, write_dataset, SynthConfig, SITES};

use crate::error::{Error, Result};

/// Records paired one-to-one with their decoded images.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<MetadataRecord>,
    pub images: Vec<Image>,
}

impl Dataset {
    pub fn new(records: Vec<MetadataRecord>, images: Vec<Image>) -> Result<Self> {
        if records.len() != images.len() {
            return Err(Error::Consistency(format!(
                "{} records but {} images",
                records.len(),
                images.len()
            )));
        }
        Ok(Self { records, images })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.target).collect()
    }

    pub fn groups(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.patient_id.as_str()).collect()
    }

    pub fn synthetic(config: &SynthConfig) -> Result<Self> {
        let (records, images) = config.generate()?;
        Self::new(records, images)
    }

    /// Metadata CSV plus one image per row found in `images_dir`.
    pub fn load(csv_path: &Path, images_dir: &Path) -> Result<Self> {
        let records = load_metadata_csv(csv_path)?;
        let images = records
            .iter()
            .map(|r| load_image(&find_image(images_dir, &r.image_name)?))
            .collect::<Result<Vec<_>>>()?;
        Self::new(records, images)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_dataset(dir, &self.records, &self.images)
    }
}

/// One row of the processed-dataset manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub image_name: String,
    pub patient_id: String,
    pub target: u8,
    pub provenance: Provenance,
    pub fold: usize,
    pub feature_width: usize,
}

pub const MANIFEST_COLUMNS: [&str; 6] = ["image_name", "patient_id", "target", "provenance", "fold", "feature_width"];

pub fn write_manifest(writer: impl std::io::Write, rows: &[ManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(MANIFEST_COLUMNS)?;
    for r in rows {
        w.write_record([
            r.image_name.clone(),
            r.patient_id.clone(),
            r.target.to_string(),
            r.provenance.to_string(),
            r.fold.to_string(),
            r.feature_width.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(reader: impl std::io::Read) -> Result<Vec<ManifestRow>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_COLUMNS {
        let missing = MANIFEST_COLUMNS.iter().find(|c| !headers.iter().any(|h| h == **c)).unwrap_or(&"column order");
        return Err(Error::Schema { column: missing.to_string() });
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: String| Error::Integrity { row: i + 1, message: m };
        let num = |k: usize| rec[k].parse::<usize>().map_err(|e| bad(format!("{}: {e}", MANIFEST_COLUMNS[k])));
        rows.push(ManifestRow {
            image_name: rec[0].to_string(),
            patient_id: rec[1].to_string(),
            target: num(2)? as u8,
            provenance: rec[3].parse()?,
            fold: num(4)?,
            feature_width: num(5)?,
        });
    }
    Ok(rows)
}
