//! Run reports: per-split correlations, aggregates, CSV tables and SVG plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::SplitResult;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub median: f64,
    pub mean: f64,
    /// Sample standard deviation; zero for a single value.
    pub std: f64,
}

pub fn aggregate(values: &[f64]) -> Result<Aggregate> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    };
    let mean = values.iter().sum::<f64>() / n as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(Aggregate { median, mean, std })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRow {
    pub split: usize,
    pub srcc: f64,
    pub plcc: f64,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub config: serde_json::Value,
    pub splits: Vec<SplitRow>,
    pub srcc: Aggregate,
    pub plcc: Aggregate,
    /// Artifact name → sha256.
    pub artifacts: BTreeMap<String, String>,
    pub results: Vec<SplitResult>,
}

impl RunReport {
    pub fn new(
        dataset: &str,
        config: &impl Serialize,
        results: Vec<SplitResult>,
        artifacts: BTreeMap<String, String>,
    ) -> Result<Self> {
        let splits: Vec<SplitRow> = results
            .iter()
            .map(|r| SplitRow {
                split: r.split,
                srcc: r.srcc,
                plcc: r.plcc,
                final_loss: r.final_loss,
            })
            .collect();
        let srcc = aggregate(&splits.iter().map(|s| s.srcc).collect::<Vec<_>>())?;
        let plcc = aggregate(&splits.iter().map(|s| s.plcc).collect::<Vec<_>>())?;
        Ok(Self {
            dataset: dataset.to_string(),
            config: serde_json::to_value(config)?,
            splits,
            srcc,
            plcc,
            artifacts,
            results,
        })
    }

    /// Aggregates recomputed from the split rows.
    pub fn recompute(&self) -> Result<(Aggregate, Aggregate)> {
        Ok((
            aggregate(&self.splits.iter().map(|s| s.srcc).collect::<Vec<_>>())?,
            aggregate(&self.splits.iter().map(|s| s.plcc).collect::<Vec<_>>())?,
        ))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per split followed by the median row.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["split", "srcc", "plcc", "final_loss"])?;
        for s in &self.splits {
            w.write_record([
                s.split.to_string(),
                s.srcc.to_string(),
                s.plcc.to_string(),
                s.final_loss.to_string(),
            ])?;
        }
        let med_loss = aggregate(&self.splits.iter().map(|s| s.final_loss).collect::<Vec<_>>())?.median;
        w.write_record([
            "median".to_string(),
            self.srcc.median.to_string(),
            self.plcc.median.to_string(),
            med_loss.to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Predicted against objective scores over every test image.
    pub fn scatter_svg(&self) -> String {
        let pts: Vec<(f64, f64)> = self
            .results
            .iter()
            .flat_map(|r| r.objective.iter().copied().zip(r.predictions.iter().copied()))
            .collect();
        let title = format!(
            "{}: median SRCC {:.3}, PLCC {:.3}",
            self.dataset, self.srcc.median, self.plcc.median
        );
        Plot::new(&title, "objective", "predicted").scatter(&pts)
    }

    /// Training loss per epoch, one line per split.
    pub fn loss_svg(&self) -> String {
        let series: Vec<Vec<(f64, f64)>> = self
            .results
            .iter()
            .map(|r| r.epochs.iter().map(|e| (e.epoch as f64, e.train_loss)).collect())
            .collect();
        Plot::new(&format!("{}: training loss", self.dataset), "epoch", "loss").lines(&series)
    }
}

/// Loss curve of a single run (e.g. pretraining), one point per step.
pub fn curve_svg(title: &str, values: &[f64]) -> String {
    let pts: Vec<(f64, f64)> = values.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect();
    Plot::new(title, "step", "loss").lines(&[pts])
}

/// Moving average over a centred window of `2·half + 1` values.
pub fn smooth(values: &[f64], half: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

struct Plot {
    title: String,
    xlabel: String,
    ylabel: String,
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const M: f64 = 48.0;
const COLORS: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

impl Plot {
    fn new(title: &str, xlabel: &str, ylabel: &str) -> Self {
        Self {
            title: title.into(),
            xlabel: xlabel.into(),
            ylabel: ylabel.into(),
        }
    }

    fn frame(&self, pts: impl Iterator<Item = (f64, f64)> + Clone) -> (String, impl Fn(f64, f64) -> (f64, f64)) {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        if !x0.is_finite() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let mut s = String::new();
        let _ = write!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">{}</text>\n\
             <rect x=\"{M}\" y=\"{M}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
             <text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{}</text>\n\
             <text x=\"{M}\" y=\"{}\">{x0:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{x1:.3}</text>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y0:.3}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{y1:.3}</text>\n",
            W / 2.0,
            escape(&self.title),
            W - 2.0 * M,
            H - 2.0 * M,
            W / 2.0,
            H - 12.0,
            escape(&self.xlabel),
            H / 2.0,
            H / 2.0,
            escape(&self.ylabel),
            H - M + 14.0,
            W - M,
            H - M + 14.0,
            M - 4.0,
            H - M,
            M - 4.0,
            M + 8.0,
        );
        let map = move |x: f64, y: f64| {
            (
                M + (x - x0) / (x1 - x0) * (W - 2.0 * M),
                H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M),
            )
        };
        (s, map)
    }

    fn scatter(&self, pts: &[(f64, f64)]) -> String {
        let (mut s, map) = self.frame(pts.iter().copied());
        for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let (px, py) = map(x, y);
            let _ = writeln!(
                s,
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2.5\" fill=\"{}\" fill-opacity=\"0.6\"/>",
                COLORS[0]
            );
        }
        s.push_str("</svg>\n");
        s
    }

    fn lines(&self, series: &[Vec<(f64, f64)>]) -> String {
        let (mut s, map) = self.frame(series.iter().flatten().copied());
        for (k, line) in series.iter().enumerate() {
            let pts: Vec<String> = line
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| {
                    let (px, py) = map(x, y);
                    format!("{px:.2},{py:.2}")
                })
                .collect();
            let _ = writeln!(
                s,
                "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" points=\"{}\"/>",
                COLORS[k % COLORS.len()],
                pts.join(" ")
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::EpochLog;

    fn result(split: usize, srcc: f64) -> SplitResult {
        SplitResult {
            split,
            srcc,
            plcc: srcc - 0.01,
            final_loss: 0.1 + split as f64,
            predictions: vec![0.1, 0.5, 0.9],
            objective: vec![0.2, 0.4, 0.8],
            test_paths: vec!["a".into(), "b".into(), "c".into()],
            epochs: vec![EpochLog {
                epoch: 0,
                lr: 1e-3,
                train_loss: 0.3,
                val_srcc: None,
            }],
        }
    }

    #[test]
    fn aggregates() {
        let a = aggregate(&[3.0, 1.0, 2.0, 10.0]).unwrap();
        assert_eq!(a.median, 2.5);
        assert_eq!(a.mean, 4.0);
        assert!((a.std - (50.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_has_split_rows_and_median_and_is_stable() {
        let r = RunReport::new(
            "toy",
            &(),
            (0..10).map(|i| result(i, 0.5 + i as f64 * 0.01)).collect(),
            BTreeMap::new(),
        )
        .unwrap();
        let csv = r.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 12);
        assert!(csv.lines().last().unwrap().starts_with("median,"));
        let back = RunReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back.to_csv().unwrap(), csv);
        let (s, p) = r.recompute().unwrap();
        assert!((s.median - r.srcc.median).abs() < 1e-12 && (p.mean - r.plcc.mean).abs() < 1e-12);
        assert!(r.scatter_svg().contains("<circle"));
        assert!(r.loss_svg().contains("<polyline"));
    }

    #[test]
    fn smoothing_window() {
        assert_eq!(smooth(&[0.0, 3.0, 6.0], 1), vec![1.5, 3.0, 4.5]);
    }
}
