//! Static SVG line charts for training curves and ROC curves.

use std::fmt::Write as _;

use crate::CliError;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 52.0;
const TICKS: usize = 5;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Which column family of an epoch CSV to draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Metric {
    Loss,
    Acc,
    Recall,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub series: Vec<Series>,
    /// Chance line from (0,0) to (1,1), drawn dashed.
    pub diagonal: bool,
}

fn malformed(msg: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("malformed CSV: {msg}"))
}

fn parse_cell(s: &str) -> Result<Option<f64>, CliError> {
    if s == "undefined" {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| malformed(format!("`{s}` is not a number")))
}

fn read_rows(text: &str) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(malformed)?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<Result<Vec<Vec<String>>, _>>()
        .map_err(malformed)?;
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize, CliError> {
    header.iter().position(|h| h == name).ok_or_else(|| malformed(format!("missing column `{name}`")))
}

/// Chart for a CSV: ROC when the header is `threshold,fpr,tpr`, otherwise
/// an epoch-statistics CSV drawn for `metric`.
pub fn chart_from_csv(text: &str, metric: Metric) -> Result<Chart, CliError> {
    let (header, rows) = read_rows(text)?;
    let chart = if header == ["threshold", "fpr", "tpr"] {
        roc_chart(&rows)?
    } else {
        epoch_chart(&header, &rows, metric)?
    };
    if chart.series.iter().all(|s| s.points.is_empty()) {
        return Err(malformed("no data points to plot"));
    }
    Ok(chart)
}

fn roc_chart(rows: &[Vec<String>]) -> Result<Chart, CliError> {
    let mut points = Vec::with_capacity(rows.len());
    for row in rows {
        let (fpr, tpr) = (parse_cell(&row[1])?, parse_cell(&row[2])?);
        match (fpr, tpr) {
            (Some(x), Some(y)) if (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y) => points.push((x, y)),
            _ => return Err(malformed("ROC rates must lie in [0, 1]")),
        }
    }
    Ok(Chart {
        title: "ROC curve".into(),
        x_label: "false positive rate".into(),
        y_label: "true positive rate".into(),
        x_range: (0.0, 1.0),
        y_range: (0.0, 1.0),
        series: vec![Series { name: "model".into(), points }],
        diagonal: true,
    })
}

fn epoch_chart(header: &[String], rows: &[Vec<String>], metric: Metric) -> Result<Chart, CliError> {
    let epoch = column(header, "epoch")?;
    let split = column(header, "split")?;
    let (cols, title, y_label): (Vec<(&str, &str)>, &str, &str) = match metric {
        Metric::Loss => (vec![("loss", "")], "Loss", "cross-entropy loss"),
        Metric::Acc => (vec![("acc", "")], "Accuracy", "accuracy"),
        Metric::Recall => (
            vec![("recall_benign", " benign"), ("recall_malignant", " malignant")],
            "Recall",
            "recall",
        ),
    };
    let mut series: Vec<Series> = Vec::new();
    for (col, suffix) in cols {
        let c = column(header, col)?;
        for split_name in ["train", "val"] {
            let mut points = Vec::new();
            for row in rows.iter().filter(|r| r[split] == split_name) {
                let x = parse_cell(&row[epoch])?.ok_or_else(|| malformed("undefined epoch"))?;
                if let Some(y) = parse_cell(&row[c])? {
                    points.push((x, y));
                }
            }
            series.push(Series { name: format!("{split_name}{suffix}"), points });
        }
    }
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x_lo, x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let x_range = if x_lo < x_hi { (x_lo, x_hi) } else { (x_lo - 0.5, x_lo + 0.5) };
    let y_range = match metric {
        Metric::Loss => {
            let top = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).fold(0.0_f64, f64::max);
            (0.0, if top > 0.0 { top * 1.05 } else { 1.0 })
        }
        _ => (0.0, 1.0),
    };
    series.retain(|s| !s.points.is_empty());
    Ok(Chart { title: title.into(), x_label: "epoch".into(), y_label: y_label.into(), x_range, y_range, series, diagonal: false })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

impl Chart {
    fn px(&self, x: f64) -> f64 {
        let (lo, hi) = self.x_range;
        LEFT + (x - lo) / (hi - lo) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let (lo, hi) = self.y_range;
        HEIGHT - BOTTOM - (y - lo) / (hi - lo) * (HEIGHT - TOP - BOTTOM)
    }

    #[cfg(test)]
    fn to_pixel(&self, x: f64, y: f64) -> (f64, f64) {
        (self.px(x), self.py(y))
    }

    pub fn to_svg(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, (LEFT + WIDTH - RIGHT) / 2.0, escape(&self.title));

        let (x0, x1, y0, y1) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);
        let _ = writeln!(s, r#"<g class="axes" stroke="black" stroke-width="1">"#);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{y1}" x2="{x1}" y2="{y1}"/>"#);
        let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}"/>"#);
        s.push_str("</g>\n");
        for i in 0..=TICKS {
            let f = i as f64 / TICKS as f64;
            let xv = self.x_range.0 + f * (self.x_range.1 - self.x_range.0);
            let yv = self.y_range.0 + f * (self.y_range.1 - self.y_range.0);
            let (px, py) = (self.px(xv), self.py(yv));
            let _ = writeln!(s, r#"<line x1="{px:.2}" y1="{y1}" x2="{px:.2}" y2="{}" stroke="black"/>"#, y1 + 4.0);
            let _ = writeln!(s, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{xv:.2}</text>"#, y1 + 18.0);
            let _ = writeln!(s, r#"<line x1="{}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/>"#, x0 - 4.0);
            let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{yv:.2}</text>"#, x0 - 7.0, py + 4.0);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 12.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            (y0 + y1) / 2.0,
            escape(&self.y_label)
        );

        if self.diagonal {
            let _ = writeln!(
                s,
                r##"<line class="chance" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#777777" stroke-dasharray="6 4"/>"##,
                self.px(0.0),
                self.py(0.0),
                self.px(1.0),
                self.py(1.0)
            );
        }
        for (i, series) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let pts: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", self.px(x), self.py(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline class="series" data-name="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
                escape(&series.name),
                pts.join(" ")
            );
            let ly = TOP + 10.0 + 20.0 * i as f64;
            let lx = WIDTH - RIGHT + 14.0;
            let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 22.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 28.0, ly + 4.0, escape(&series.name));
        }
        s.push_str("</svg>\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPOCHS: &str = "epoch,split,loss,acc,recall_benign,recall_malignant,seconds\n\
        1,train,0.7,0.5,0.4,0.6,1.000\n1,val,0.6,0.6,0.5,undefined,0.100\n\
        2,train,0.5,0.7,0.7,0.7,1.000\n2,val,0.5,0.7,0.6,undefined,0.100\n";

    #[test]
    fn epoch_series_per_split() {
        let c = chart_from_csv(EPOCHS, Metric::Loss).unwrap();
        assert_eq!(c.series.len(), 2);
        assert_eq!(c.series[0].points, vec![(1.0, 0.7), (2.0, 0.5)]);
        let r = chart_from_csv(EPOCHS, Metric::Recall).unwrap();
        // Validation malignant recall is undefined throughout and is dropped.
        assert_eq!(r.series.iter().map(|s| s.name.as_str()).collect::<Vec<_>>(), ["train benign", "val benign", "train malignant"]);
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert!(chart_from_csv("epoch,split,loss\n", Metric::Loss).is_err());
        assert!(chart_from_csv("threshold,fpr,tpr\n", Metric::Loss).is_err());
        assert!(chart_from_csv("threshold,fpr,tpr\ninf,0,x\n", Metric::Loss).is_err());
        assert!(chart_from_csv("a,b\n1,2\n", Metric::Loss).is_err());
    }

    #[test]
    fn perfect_roc_reaches_top_left_corner() {
        let c = chart_from_csv("threshold,fpr,tpr\ninf,0,0\n0.9,0,1\n0.1,1,1\n", Metric::Loss).unwrap();
        let (x, y) = c.to_pixel(0.0, 1.0);
        assert_eq!((x, y), (LEFT, TOP));
        let svg = c.to_svg();
        assert!(svg.contains(&format!("{x:.2},{y:.2}")));
        assert!(svg.contains("stroke-dasharray"));
    }
}
