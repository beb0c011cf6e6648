//! Run reports: plain text, a JSON summary and SVG plots.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::analysis::ConfusionHistogram;
use crate::config::TrainConfig;
use crate::metrics::MetricReport;
use crate::train::{EpochLog, RunResult};

/// Everything `train` writes about a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: TrainConfig,
    pub metrics: MetricReport,
    pub repeats: Vec<RepeatSummary>,
    pub teacher_digest: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub repeat: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub plcc: f64,
    pub srcc: f64,
    pub epochs: Vec<EpochLog>,
}

impl RunReport {
    pub fn new(config: &TrainConfig, run: &RunResult) -> Self {
        Self {
            config: config.clone(),
            metrics: run.report.clone(),
            repeats: run
                .repeats
                .iter()
                .map(|r| RepeatSummary {
                    repeat: r.repeat,
                    n_train: r.train_ids.len(),
                    n_test: r.test_ids.len(),
                    plcc: r.metrics.plcc,
                    srcc: r.metrics.srcc,
                    epochs: r.epochs.clone(),
                })
                .collect(),
            teacher_digest: run.repeats.first().and_then(|r| r.teacher_digest.clone()),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let m = &self.metrics;
        let q = &self.config.qfm;
        let _ = writeln!(s, "aggregation: {}", m.aggregation);
        let _ = writeln!(
            s,
            "qfm: {} (lambda1 {:e}, lambda2 {:e}, k_a {}, k_b {}), pool: {}",
            if q.enabled { "on" } else { "off" },
            q.lambda1,
            q.lambda2,
            q.k_a,
            q.k_b,
            if self.config.dle.enabled { "on" } else { "off" }
        );
        if let Some(d) = &self.teacher_digest {
            let _ = writeln!(s, "teacher sha256: {d}");
        }
        let _ = writeln!(s, "repeat  n_train  n_test  plcc     srcc");
        for r in &self.repeats {
            let _ = writeln!(
                s,
                "{:<7} {:<8} {:<7} {:<8.4} {:.4}",
                r.repeat, r.n_train, r.n_test, r.plcc, r.srcc
            );
        }
        let _ = writeln!(
            s,
            "mean    plcc {:.4}  srcc {:.4}  (median {:.4} / {:.4}, std {:.4} / {:.4})",
            m.plcc,
            m.srcc,
            m.plcc_summary.median,
            m.srcc_summary.median,
            m.plcc_summary.std,
            m.srcc_summary.std
        );
        s
    }
}

/// One row of a hyperparameter sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub parameter: String,
    pub value: f64,
    pub plcc: f64,
    pub srcc: f64,
    pub repeats: usize,
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("parameter  value      plcc     srcc     repeats\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<10} {:<10} {:<8.4} {:<8.4} {}",
            r.parameter,
            format!("{:e}", r.value),
            r.plcc,
            r.srcc,
            r.repeats
        );
    }
    s
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n",
        W / 2.0,
        escape(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD
    )
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

/// Line plot of named `(x, y)` series.
pub fn svg_lines(title: &str, x_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (x0, x1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.0)));
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.1.iter().map(|p| p.1)));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = svg_open(title);
    for (v, anchor) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{anchor}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{v:.3}</text>",
            PAD - 4.0
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
            path.join(" ")
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            W - PAD - 120.0,
            PAD + 16.0 * i as f64,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart with one labelled bar per value.
pub fn svg_bars(title: &str, labels: &[String], values: &[f64]) -> String {
    let (_, hi) = bounds(values.iter().copied().chain([0.0]));
    let n = values.len().max(1) as f64;
    let slot = (W - 2.0 * PAD) / n;
    let mut s = svg_open(title);
    for (i, (&v, label)) in values.iter().zip(labels).enumerate() {
        let h = if hi > 0.0 { v / hi * (H - 2.0 * PAD) } else { 0.0 };
        let x = PAD + slot * i as f64 + slot * 0.1;
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"{}\"/>",
            H - PAD - h,
            slot * 0.8,
            COLORS[0]
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{}</text>",
            x + slot * 0.4,
            H - PAD + 14.0,
            escape(label)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{v}</text>",
            x + slot * 0.4,
            H - PAD - h - 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Test SRCC and PLCC against epoch, one line per repeat.
pub fn epoch_plot(report: &RunReport) -> String {
    let mut series = Vec::new();
    for r in &report.repeats {
        for (name, pick) in [("srcc", 0), ("plcc", 1)] {
            let pts: Vec<(f64, f64)> = r
                .epochs
                .iter()
                .filter_map(|e| {
                    let v = if pick == 0 { e.srcc } else { e.plcc };
                    v.map(|v| ((e.epoch + 1) as f64, v))
                })
                .collect();
            series.push((format!("{name} r{}", r.repeat), pts));
        }
    }
    svg_lines("test correlation per epoch", "epoch", &series)
}

/// Histogram of nearest-neighbour label gaps.
pub fn confusion_plot(h: &ConfusionHistogram) -> String {
    let labels: Vec<String> = h
        .edges
        .windows(2)
        .map(|w| format!("{:.0}-{:.0}", w[0], w[1]))
        .collect();
    let values: Vec<f64> = h.counts.iter().map(|&c| c as f64).collect();
    svg_bars(
        &format!("nearest-neighbour label gaps ({} confused)", h.confused),
        &labels,
        &values,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_is_well_formed() {
        let s = svg_lines("a<b", "epoch", &[("x".into(), vec![(1.0, 0.5), (2.0, 0.7)])]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("a&lt;b"));
        let b = svg_bars("h", &["0-1".into(), "1-2".into()], &[3.0, 0.0]);
        assert_eq!(b.matches("<rect").count(), 3);
    }

    #[test]
    fn sweep_table_has_one_line_per_row() {
        let rows = vec![
            SweepRow {
                parameter: "k".into(),
                value: 1.0,
                plcc: 0.5,
                srcc: 0.4,
                repeats: 1,
            },
            SweepRow {
                parameter: "lambda1".into(),
                value: 1e-3,
                plcc: 0.5,
                srcc: 0.4,
                repeats: 1,
            },
        ];
        assert_eq!(sweep_table(&rows).lines().count(), 3);
    }
}
