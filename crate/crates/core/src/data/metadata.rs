use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Metadata columns, in file order.
pub const COLUMNS: [&str; 8] = [
    "image_name",
    "patient_id",
    "sex",
    "age_approx",
    "anatom_site",
    "diagnosis",
    "benign_malignant",
    "target",
];

/// `diagnosis` is only present in training metadata.
const OPTIONAL_COLUMNS: [&str; 1] = ["diagnosis"];

/// Fixed divisor for age normalization, independent of the data.
pub const AGE_SCALE: f64 = 90.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Sex {
    Female,
    Male,
    Unknown,
}

impl Sex {
    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" => Some(Sex::Female),
            "male" => Some(Sex::Male),
            "" | "unknown" => Some(Sex::Unknown),
            _ => None,
        }
    }

    fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
            Sex::Unknown => "",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn target(self) -> u8 {
        match self {
            Label::Benign => 0,
            Label::Malignant => 1,
        }
    }

    pub fn from_target(t: u8) -> Self {
        if t == 1 {
            Label::Malignant
        } else {
            Label::Benign
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetadataRecord {
    pub image_name: String,
    pub patient_id: String,
    pub sex: Sex,
    pub age_approx: Option<f64>,
    pub anatom_site: Option<String>,
    pub diagnosis: Option<String>,
    pub benign_malignant: Label,
    /// 1 iff `benign_malignant` is malignant.
    pub target: u8,
}

fn blank_to_none(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

pub fn load_metadata_csv(path: &Path) -> Result<Vec<MetadataRecord>> {
    let file = std::fs::File::open(path)?;
    read_metadata(file)
}

/// Parse metadata with a header row. Rows are numbered from 1 (the first
/// data row) in integrity errors.
pub fn read_metadata(reader: impl Read) -> Result<Vec<MetadataRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let mut idx = [usize::MAX; COLUMNS.len()];
    for (i, name) in COLUMNS.iter().enumerate() {
        match col(name) {
            Some(c) => idx[i] = c,
            None if OPTIONAL_COLUMNS.contains(name) => {}
            None => return Err(Error::Schema { column: name.to_string() }),
        }
    }
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (r, row) in rdr.records().enumerate() {
        let row = row?;
        let line = r + 1;
        let field = |i: usize| -> &str {
            if idx[i] == usize::MAX {
                ""
            } else {
                row.get(idx[i]).unwrap_or("")
            }
        };
        let bad = |message: String| Error::Integrity { row: line, message };

        let image_name = field(0).to_string();
        if image_name.is_empty() {
            return Err(bad("empty image_name".into()));
        }
        if !seen.insert(image_name.clone()) {
            return Err(bad(format!("duplicate image_name {image_name}")));
        }
        let patient_id = field(1).to_string();
        if patient_id.is_empty() {
            return Err(bad("empty patient_id".into()));
        }
        let sex = Sex::parse(field(2)).ok_or_else(|| bad(format!("unknown sex {:?}", field(2))))?;
        let age_approx = match field(3) {
            "" => None,
            s => {
                let a: f64 = s.parse().map_err(|_| bad(format!("age_approx {s:?} is not a number")))?;
                if !(a.is_finite() && a >= 0.0) {
                    return Err(bad(format!("age_approx {a} is out of range")));
                }
                Some(a)
            }
        };
        let label = match field(6).to_ascii_lowercase().as_str() {
            "benign" => Label::Benign,
            "malignant" => Label::Malignant,
            other => return Err(bad(format!("benign_malignant {other:?} is neither benign nor malignant"))),
        };
        let target: u8 = match field(7) {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("target {other:?} is not 0 or 1"))),
        };
        if target != label.target() {
            return Err(bad(format!("benign_malignant = {label} contradicts target = {target}")));
        }
        out.push(MetadataRecord {
            image_name,
            patient_id,
            sex,
            age_approx,
            anatom_site: blank_to_none(field(4)),
            diagnosis: blank_to_none(field(5)),
            benign_malignant: label,
            target,
        });
    }
    Ok(out)
}

pub fn write_metadata(writer: impl Write, records: &[MetadataRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(COLUMNS)?;
    for r in records {
        let age = r.age_approx.map(|a| a.to_string()).unwrap_or_default();
        w.write_record([
            r.image_name.as_str(),
            r.patient_id.as_str(),
            r.sex.as_str(),
            age.as_str(),
            r.anatom_site.as_deref().unwrap_or(""),
            r.diagnosis.as_deref().unwrap_or(""),
            &r.benign_malignant.to_string(),
            &r.target.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_metadata_csv(path: &Path, records: &[MetadataRecord]) -> Result<()> {
    write_metadata(std::fs::File::create(path)?, records)
}

/// Categorical vocabulary fixed before any record is encoded.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FeatureSchema {
    /// Known anatomical sites; anything else falls into the unknown bucket.
    pub sites: Vec<String>,
}

impl FeatureSchema {
    pub fn new(sites: Vec<String>) -> Self {
        Self { sites }
    }

    /// Sites observed in `records`, sorted so the schema does not depend on row order.
    pub fn fit(records: &[MetadataRecord]) -> Self {
        let sites: BTreeSet<&str> = records.iter().filter_map(|r| r.anatom_site.as_deref()).collect();
        Self::new(sites.into_iter().map(str::to_string).collect())
    }

    /// 3 sex slots, age and age-missing flag, one slot per site plus unknown.
    pub fn width(&self) -> usize {
        3 + 2 + self.sites.len() + 1
    }
}

pub fn encode_features(record: &MetadataRecord, schema: &FeatureSchema) -> Vec<f64> {
    let mut v = vec![0.0; schema.width()];
    let sex_slot = match record.sex {
        Sex::Female => 0,
        Sex::Male => 1,
        Sex::Unknown => 2,
    };
    v[sex_slot] = 1.0;
    match record.age_approx {
        Some(a) => v[3] = a / AGE_SCALE,
        None => v[4] = 1.0,
    }
    let site_slot = record
        .anatom_site
        .as_deref()
        .and_then(|s| schema.sites.iter().position(|k| k == s))
        .unwrap_or(schema.sites.len());
    v[5 + site_slot] = 1.0;
    v
}
