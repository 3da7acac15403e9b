//! Confusion matrices, rate equations, ROC curves and AUC.
//!
//! Malignant is the positive class and a sample is predicted malignant when
//! its score is at least the threshold.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScoredSample {
    pub score: f64,
    pub label: u8,
}

impl ScoredSample {
    pub fn new(score: f64, label: u8) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidProbability { name: "score", value: score });
        }
        if label > 1 {
            return Err(Error::Config(format!("label must be 0 or 1, got {label}")));
        }
        Ok(Self { score, label })
    }
}

/// Pair scores with labels, checking both.
pub fn scored(scores: &[f64], labels: &[u8]) -> Result<Vec<ScoredSample>> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    scores.iter().zip(labels).map(|(&s, &l)| ScoredSample::new(s, l)).collect()
}

/// Cells: `a` benign→benign, `b` benign→malignant, `c` malignant→benign,
/// `d` malignant→malignant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Cell shares of the total in percent, in `a, b, c, d` order.
    pub fn percentages(&self) -> [f64; 4] {
        let t = self.total() as f64;
        [self.a, self.b, self.c, self.d].map(|v| 100.0 * v as f64 / t)
    }
}

pub fn confusion_at(samples: &[ScoredSample], threshold: f64) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::default();
    for s in samples {
        match (s.label == 1, s.score >= threshold) {
            (false, false) => cm.a += 1,
            (false, true) => cm.b += 1,
            (true, false) => cm.c += 1,
            (true, true) => cm.d += 1,
        }
    }
    cm
}

/// `None` marks a rate whose denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Rates {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub tnr: Option<f64>,
    pub fnr: Option<f64>,
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn rates(cm: &ConfusionMatrix) -> Rates {
    let ConfusionMatrix { a, b, c, d } = *cm;
    Rates {
        tpr: ratio(d, c + d),
        fpr: ratio(b, a + b),
        tnr: ratio(a, a + b),
        fnr: ratio(c, c + d),
        accuracy: ratio(a + d, cm.total()),
        precision: ratio(d, b + d),
    }
}

fn class_counts(samples: &[ScoredSample]) -> Result<(u64, u64)> {
    let pos = samples.iter().filter(|s| s.label == 1).count() as u64;
    let neg = samples.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::ClassMissing(format!("{pos} malignant and {neg} benign scores")));
    }
    Ok((pos, neg))
}

/// AUC as the exact fraction `numerator / denominator`, with
/// numerator = 2·(correctly ordered pairs) + (tied pairs) and
/// denominator = 2·m⁺·m⁻. Computed from midranks in O(n log n).
pub fn auc_fraction(samples: &[ScoredSample]) -> Result<(u128, u128)> {
    let (pos, neg) = class_counts(samples)?;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&i, &j| samples[i].score.total_cmp(&samples[j].score));
    // twice the positive rank sum; a tie run over 1-based ranks lo..=hi has midrank (lo + hi) / 2
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && samples[order[j + 1]].score == samples[order[i]].score {
            j += 1;
        }
        let twice_mid = (i + 1 + j + 1) as u128;
        let run_pos = order[i..=j].iter().filter(|&&k| samples[k].label == 1).count() as u128;
        rank_sum2 += twice_mid * run_pos;
        i = j + 1;
    }
    let (p, n) = (u128::from(pos), u128::from(neg));
    Ok((rank_sum2 - p * (p + 1), 2 * p * n))
}

pub fn auc(samples: &[ScoredSample]) -> Result<f64> {
    let (num, den) = auc_fraction(samples)?;
    Ok(num as f64 / den as f64)
}

/// Literal double loop: 1 − (1/(m⁺m⁻)) Σ⁺ Σ⁻ [W(f⁺ < f⁻) + ½ W(f⁺ = f⁻)],
/// accumulated in half-units so the result is an exact fraction.
pub fn auc_pairwise_oracle(samples: &[ScoredSample]) -> Result<f64> {
    let (pos, neg) = class_counts(samples)?;
    let mut loss_halves: u128 = 0;
    for xp in samples.iter().filter(|s| s.label == 1) {
        for xn in samples.iter().filter(|s| s.label == 0) {
            if xp.score < xn.score {
                loss_halves += 2;
            } else if xp.score == xn.score {
                loss_halves += 1;
            }
        }
    }
    let den = 2 * u128::from(pos) * u128::from(neg);
    Ok((den - loss_halves) as f64 / den as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RocPoint {
    /// `f64::INFINITY` for the (0, 0) endpoint.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    /// Trapezoidal area.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
            .sum()
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["threshold", "fpr", "tpr"])?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One point per distinct score (descending) plus the (0, 0) endpoint.
pub fn roc_curve(samples: &[ScoredSample]) -> Result<RocCurve> {
    let (pos, neg) = class_counts(samples)?;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|x, y| y.score.total_cmp(&x.score));
    let mut points = vec![RocPoint { threshold: f64::INFINITY, fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].score;
        while i < sorted.len() && sorted[i].score == t {
            if sorted[i].label == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { threshold: t, fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(RocCurve { points })
}

/// Everything reported for one set of scores.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub label: String,
    pub n: usize,
    pub threshold: f64,
    /// `None` when the set holds a single class.
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    pub rates: Rates,
}

impl MetricReport {
    pub fn new(label: impl Into<String>, samples: &[ScoredSample], threshold: f64) -> Self {
        let confusion = confusion_at(samples, threshold);
        Self {
            label: label.into(),
            n: samples.len(),
            threshold,
            auc: auc(samples).ok(),
            rates: rates(&confusion),
            confusion,
        }
    }

    fn fields(&self) -> Vec<(&'static str, String)> {
        let opt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| x.to_string());
        let r = &self.rates;
        vec![
            ("label", self.label.clone()),
            ("n", self.n.to_string()),
            ("threshold", self.threshold.to_string()),
            ("auc", opt(self.auc)),
            ("a", self.confusion.a.to_string()),
            ("b", self.confusion.b.to_string()),
            ("c", self.confusion.c.to_string()),
            ("d", self.confusion.d.to_string()),
            ("tpr", opt(r.tpr)),
            ("fpr", opt(r.fpr)),
            ("tnr", opt(r.tnr)),
            ("fnr", opt(r.fnr)),
            ("accuracy", opt(r.accuracy)),
            ("precision", opt(r.precision)),
        ]
    }

    /// `key=value` lines, keys prefixed with `prefix.` when non-empty.
    pub fn to_key_values(&self, prefix: &str) -> String {
        let mut out = String::new();
        for (k, v) in self.fields() {
            if prefix.is_empty() {
                writeln!(out, "{k}={v}").expect("writing to a String");
            } else {
                writeln!(out, "{prefix}.{k}={v}").expect("writing to a String");
            }
        }
        out
    }
}

/// One CSV row per report, undefined values written as `undefined`.
pub fn write_reports_csv(writer: impl Write, reports: &[MetricReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    if let Some(first) = reports.first() {
        w.write_record(first.fields().iter().map(|(k, _)| *k))?;
    }
    for r in reports {
        w.write_record(r.fields().iter().map(|(_, v)| v.as_str()))?;
    }
    w.flush()?;
    Ok(())
}
