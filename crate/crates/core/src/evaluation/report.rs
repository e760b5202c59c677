use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::channel::ChannelSpec;
use crate::config::{format_snr, parse_snr};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::rng::{stream, streams};
use crate::training::worker_count;

use super::metrics::{evaluate, to_db};

pub const REPORT_HEADER: &str = "snr_db,nmse_db,accuracy,samples";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReportRow {
    /// `None` is the noiseless channel.
    pub snr_db: Option<f64>,
    pub nmse: f64,
    pub nmse_db: f64,
    pub accuracy: f64,
    pub samples: usize,
}

/// Per-SNR results, sorted by SNR with the noiseless row last.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub rows: Vec<ReportRow>,
    pub seed: u64,
    pub checkpoint: Option<String>,
    pub model: Option<String>,
}

fn snr_key(s: Option<f64>) -> f64 {
    s.unwrap_or(f64::INFINITY)
}

/// Evaluates `model` on `count` test vectors drawn from `seed` at every
/// SNR. Noise for the i-th point (in sorted order) comes from its own
/// stream, so results do not depend on the order of `snrs` or on threading.
pub fn sweep_snr(
    model: &Model,
    snrs: &[Option<f64>],
    count: usize,
    seed: u64,
    chunk: usize,
) -> Result<EvalReport> {
    let mut sorted = snrs.to_vec();
    sorted.sort_by(|a, b| snr_key(*a).total_cmp(&snr_key(*b)));
    let data = Dataset::generate(
        model.config.m,
        model.config.k,
        count,
        &mut stream(seed, streams::TEST_DATA),
    )?;
    let point = |i: usize, snr: Option<f64>| -> Result<ReportRow> {
        let channel = ChannelSpec {
            gain: 1.0,
            snr_db: snr,
        };
        let m = evaluate(
            model,
            &data,
            &channel,
            &mut stream(seed, streams::test_noise(i)),
            chunk,
        )?;
        Ok(ReportRow {
            snr_db: snr,
            nmse: m.nmse,
            nmse_db: to_db(m.nmse),
            accuracy: m.accuracy,
            samples: m.samples,
        })
    };
    let threads = worker_count().min(sorted.len()).max(1);
    let rows = if threads == 1 {
        sorted
            .iter()
            .enumerate()
            .map(|(i, s)| point(i, *s))
            .collect::<Result<Vec<_>>>()?
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = sorted
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let point = &point;
                    scope.spawn(move || point(i, *s))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    };
    Ok(EvalReport {
        label: model.config.architecture.to_string(),
        rows,
        seed,
        checkpoint: None,
        model: None,
    })
}

/// `%.6g`-style formatting.
pub fn fmt_sig6(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() {
            "nan".into()
        } else if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mant, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..6).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mant));
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{REPORT_HEADER}\n");
        for r in &self.rows {
            let snr = r.snr_db.map_or("inf".to_string(), fmt_sig6);
            writeln!(
                s,
                "{snr},{},{},{}",
                fmt_sig6(r.nmse_db),
                fmt_sig6(r.accuracy),
                r.samples
            )
            .expect("writing to a string");
        }
        s
    }

    /// Rows from CSV text. The linear NMSE is recovered from the dB value.
    pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#'));
        if lines.next() != Some(REPORT_HEADER) {
            return Err(Error::Format("missing report header".into()));
        }
        lines
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let bad = || Error::Format(format!("bad report row `{l}`"));
                let f: Vec<&str> = l.split(',').collect();
                if f.len() != 4 {
                    return Err(bad());
                }
                let nmse_db: f64 = f[1].parse().map_err(|_| bad())?;
                Ok(ReportRow {
                    snr_db: parse_snr(f[0]).map_err(|_| bad())?,
                    nmse: 10f64.powf(nmse_db / 10.0),
                    nmse_db,
                    accuracy: f[2].parse().map_err(|_| bad())?,
                    samples: f[3].parse().map_err(|_| bad())?,
                })
            })
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn write_svg(&self, path: &Path) -> Result<()> {
        fs::write(path, render_svg(&[self]))?;
        Ok(())
    }

    /// Human-readable table.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:>8} {:>12} {:>10} {:>8}\n",
            "snr_db", "nmse_db", "accuracy", "samples"
        );
        for r in &self.rows {
            writeln!(
                s,
                "{:>8} {:>12.4} {:>10.6} {:>8}",
                format_snr(r.snr_db),
                r.nmse_db,
                r.accuracy,
                r.samples
            )
            .expect("writing to a string");
        }
        s
    }
}

const SVG_W: f64 = 640.0;
const SVG_H: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// Line chart of NMSE (dB) against SNR, one series per report. Noiseless
/// rows have no x position and are left out.
pub fn render_svg(reports: &[&EvalReport]) -> String {
    let points: Vec<Vec<(f64, f64)>> = reports
        .iter()
        .map(|r| {
            r.rows
                .iter()
                .filter_map(|row| row.snr_db.map(|s| (s, row.nmse_db)))
                .collect()
        })
        .collect();
    let all: Vec<&(f64, f64)> = points.iter().flatten().collect();
    let range = |f: fn(&(f64, f64)) -> f64| {
        let lo = all.iter().map(|p| f(p)).fold(f64::INFINITY, f64::min);
        let hi = all.iter().map(|p| f(p)).fold(f64::NEG_INFINITY, f64::max);
        match (lo.is_finite(), hi > lo) {
            (true, true) => (lo, hi),
            (true, false) => (lo - 1.0, lo + 1.0),
            _ => (0.0, 1.0),
        }
    };
    let (x0, x1) = range(|p| p.0);
    let (y0, y1) = range(|p| p.1);
    let px = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (SVG_W - 2.0 * MARGIN);
    let py = |y: f64| SVG_H - MARGIN - (y - y0) / (y1 - y0) * (SVG_H - 2.0 * MARGIN);

    let mut s = String::new();
    let w = &mut s;
    writeln!(
        w,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    )
    .unwrap();
    writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    let (left, right, top, bottom) = (MARGIN, SVG_W - MARGIN, MARGIN, SVG_H - MARGIN);
    writeln!(
        w,
        r#"<g class="axes" stroke="black"><line x1="{left}" y1="{bottom}" x2="{right}" y2="{bottom}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}"/></g>"#
    )
    .unwrap();
    for i in 0..=4 {
        let xv = x0 + (x1 - x0) * i as f64 / 4.0;
        let yv = y0 + (y1 - y0) * i as f64 / 4.0;
        writeln!(
            w,
            r#"<text class="tick" x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
            px(xv),
            bottom + 16.0,
            fmt_sig6((xv * 100.0).round() / 100.0)
        )
        .unwrap();
        writeln!(
            w,
            r#"<text class="tick" x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"#,
            left - 6.0,
            py(yv) + 4.0,
            fmt_sig6((yv * 100.0).round() / 100.0)
        )
        .unwrap();
    }
    writeln!(
        w,
        r#"<text class="xlabel" x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">SNR (dB)</text>"#,
        SVG_W / 2.0,
        SVG_H - 16.0
    )
    .unwrap();
    writeln!(
        w,
        r#"<text class="ylabel" x="16" y="{:.1}" font-size="13" text-anchor="middle" transform="rotate(-90 16 {:.1})">NMSE (dB)</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0
    )
    .unwrap();
    for (i, (r, pts)) in reports.iter().zip(&points).enumerate() {
        let color = COLORS[i % COLORS.len()];
        let label = escape(&r.label);
        writeln!(
            w,
            r#"<g class="series" data-label="{label}" stroke="{color}" fill="{color}">"#
        )
        .unwrap();
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        writeln!(w, r#"<polyline fill="none" points="{}"/>"#, path.join(" ")).unwrap();
        for &(x, y) in pts {
            writeln!(
                w,
                r#"<circle class="point" cx="{:.2}" cy="{:.2}" r="3"/>"#,
                px(x),
                py(y)
            )
            .unwrap();
        }
        writeln!(
            w,
            r#"<text class="legend" x="{:.1}" y="{:.1}" font-size="12" stroke="none">{label}</text>"#,
            right - 120.0,
            top + 16.0 * (i as f64 + 1.0)
        )
        .unwrap();
        writeln!(w, "</g>").unwrap();
    }
    writeln!(w, "</svg>").unwrap();
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
