use std::fmt;
use std::str::FromStr;

use super::metadata::MetadataRecord;
use crate::error::{Error, Result};
use crate::tensor::SeededRng;

/// Where a training item came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Provenance {
    Original,
    /// The `copy`-th duplicate (from 1) of its source, augmented under `seed`.
    Copy { copy: u32, seed: u64 },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Original => f.write_str("original"),
            Provenance::Copy { copy, seed } => write!(f, "copy-{copy}-{seed}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "original" {
            return Ok(Provenance::Original);
        }
        let parse = || -> Option<Provenance> {
            let rest = s.strip_prefix("copy-")?;
            let (copy, seed) = rest.split_once('-')?;
            Some(Provenance::Copy { copy: copy.parse().ok()?, seed: seed.parse().ok()? })
        };
        parse().ok_or_else(|| Error::Config(format!("unrecognised provenance {s:?}")))
    }
}

/// One entry of an oversampled list: an index into the source list.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Draw {
    pub source: usize,
    pub provenance: Provenance,
}

/// Originals first, in order, followed by round-robin copies of the
/// minority class until minority/majority ≥ `target_ratio`.
pub fn oversample_indices(labels: &[u8], target_ratio: f64, rng: &mut SeededRng) -> Result<Vec<Draw>> {
    if !(target_ratio > 0.0 && target_ratio <= 1.0) {
        return Err(Error::Config(format!("oversample ratio must lie in (0, 1], got {target_ratio}")));
    }
    let positives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let negatives: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != 1).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::ClassMissing(format!(
            "{} malignant and {} benign records",
            positives.len(),
            negatives.len()
        )));
    }
    let (minority, majority) = if positives.len() <= negatives.len() {
        (positives, negatives.len())
    } else {
        (negatives, positives.len())
    };
    let mut out: Vec<Draw> = (0..labels.len())
        .map(|source| Draw { source, provenance: Provenance::Original })
        .collect();
    let wanted = (target_ratio * majority as f64 - 1e-9).ceil() as usize;
    let extra = wanted.saturating_sub(minority.len());
    for j in 0..extra {
        let source = minority[j % minority.len()];
        let copy = (j / minority.len() + 1) as u32;
        let seed = rng.derive(&[b"oversample", &(j as u64).to_le_bytes()]).seed();
        out.push(Draw { source, provenance: Provenance::Copy { copy, seed } });
    }
    Ok(out)
}

/// Record-level oversampling; copies keep every field of their source,
/// patient identifier included.
pub fn oversample(
    records: &[MetadataRecord],
    target_ratio: f64,
    rng: &mut SeededRng,
) -> Result<Vec<(MetadataRecord, Provenance)>> {
    let labels: Vec<u8> = records.iter().map(|r| r.target).collect();
    Ok(oversample_indices(&labels, target_ratio, rng)?
        .into_iter()
        .map(|d| (records[d.source].clone(), d.provenance))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(benign: usize, malignant: usize) -> Vec<u8> {
        let mut v = vec![0; benign];
        v.extend(std::iter::repeat_n(1, malignant));
        v
    }

    fn class_counts(l: &[u8], draws: &[Draw]) -> (usize, usize) {
        let m = draws.iter().filter(|d| l[d.source] == 1).count();
        (draws.len() - m, m)
    }

    #[test]
    fn balances_98_to_2() {
        let l = labels(98, 2);
        let d = oversample_indices(&l, 1.0, &mut SeededRng::new(1)).unwrap();
        assert_eq!(class_counts(&l, &d), (98, 98));
        assert!(d[..100].iter().enumerate().all(|(i, d)| d.source == i && d.provenance == Provenance::Original));
        let seeds: std::collections::HashSet<_> = d[100..]
            .iter()
            .map(|d| match d.provenance {
                Provenance::Copy { seed, .. } => seed,
                Provenance::Original => panic!("copies only"),
            })
            .collect();
        assert_eq!(seeds.len(), 96);
    }

    #[test]
    fn satisfied_ratio_is_a_no_op_and_missing_class_errors() {
        let l = labels(10, 6);
        let d = oversample_indices(&l, 0.5, &mut SeededRng::new(1)).unwrap();
        assert_eq!(d.len(), 16);
        assert!(matches!(oversample_indices(&labels(5, 0), 1.0, &mut SeededRng::new(1)), Err(Error::ClassMissing(_))));
        assert!(oversample_indices(&l, 0.0, &mut SeededRng::new(1)).is_err());
    }

    #[test]
    fn provenance_text_round_trip() {
        for p in [Provenance::Original, Provenance::Copy { copy: 3, seed: 99 }] {
            assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        }
    }
}
