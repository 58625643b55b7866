//! Static CSV tables and SVG charts from profiles and experiment reports.

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;

use super::experiments::{sweep_csv, ScalingReport, SharingReport, SweepReport};
use super::output::{OutputDir, OutputError};
use crate::metrics::{derive, write_series_csv, DerivedMetrics};
use crate::supervisor::Profile;

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("no input files")]
    NoInput,
    #[error("{path}: {reason}")]
    Unrecognized { path: PathBuf, reason: String },
    #[error(transparent)]
    Output(#[from] OutputError),
}

/// What an input file turned out to be.
#[derive(Debug)]
pub enum ReportInput {
    Profile(Box<Profile>),
    Metrics(Box<DerivedMetrics>),
    Sweep(Box<SweepReport>),
    Scaling(Box<ScalingReport>),
    Sharing(Box<SharingReport>),
}

fn try_json<T: DeserializeOwned>(v: &serde_json::Value) -> Option<T> {
    serde_json::from_value(v.clone()).ok()
}

pub fn load_input(path: &Path) -> Result<ReportInput, ReportError> {
    let unrecognized = |reason: String| ReportError::Unrecognized {
        path: path.to_path_buf(),
        reason,
    };
    let file = File::open(path).map_err(|e| unrecognized(e.to_string()))?;
    if let Ok(p) = Profile::read_jsonl(BufReader::new(file)) {
        return Ok(ReportInput::Profile(Box::new(p)));
    }
    let text = std::fs::read_to_string(path).map_err(|e| unrecognized(e.to_string()))?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| unrecognized(format!("not a profile or JSON report: {e}")))?;
    if let Some(r) = try_json(&v) {
        return Ok(ReportInput::Sweep(Box::new(r)));
    }
    if let Some(r) = try_json(&v) {
        return Ok(ReportInput::Scaling(Box::new(r)));
    }
    if let Some(r) = try_json(&v) {
        return Ok(ReportInput::Sharing(Box::new(r)));
    }
    // `derive` writes `{header, metrics}`; a bare metrics object is accepted too.
    if let Some(m) = v.get("metrics").and_then(try_json).or_else(|| try_json(&v)) {
        return Ok(ReportInput::Metrics(Box::new(m)));
    }
    Err(unrecognized("unknown JSON document".into()))
}

const W: f64 = 640.0;
const H: f64 = 360.0;
const ML: f64 = 64.0;
const MR: f64 = 16.0;
const MT: f64 = 36.0;
const MB: f64 = 48.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn frame(title: &str, x_label: &str, y_label: &str, y0: f64, y1: f64) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">
<rect width="100%" height="100%" fill="white"/>
<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>
<line x1="{ML}" y1="{}" x2="{}" y2="{}" stroke="black"/>
<line x1="{ML}" y1="{MT}" x2="{ML}" y2="{}" stroke="black"/>
<text x="{}" y="{}" text-anchor="middle">{}</text>
<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>
"#,
        W / 2.0,
        esc(title),
        H - MB,
        W - MR,
        H - MB,
        H - MB,
        (ML + W - MR) / 2.0,
        H - 12.0,
        esc(x_label),
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        esc(y_label),
    );
    for k in 0..=4 {
        let v = y0 + (y1 - y0) * k as f64 / 4.0;
        let y = H - MB - (H - MT - MB) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{y:.1}" x2="{ML}" y2="{y:.1}" stroke="black"/><text x="{}" y="{:.1}" text-anchor="end">{}</text>"##,
            ML - 4.0,
            ML - 6.0,
            y + 4.0,
            tick(v)
        );
    }
    s
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Line chart of one or more `(x, y)` series. `y_range` fixes the y axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)], y_range: Option<(f64, f64)>) -> String {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ylo, mut yhi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        ylo = ylo.min(y);
        yhi = yhi.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, ylo, yhi) = (0.0, 1.0, 0.0, 1.0);
    }
    let (y0, y1) = y_range.unwrap_or((ylo.min(0.0), if yhi > ylo.min(0.0) { yhi } else { 1.0 }));
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let px = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
    let py = |y: f64| H - MB - (y.clamp(y0, y1) - y0) / (y1 - y0) * (H - MT - MB);
    let mut s = frame(title, x_label, y_label, y0, y1);
    let _ = writeln!(
        s,
        r#"<text x="{ML}" y="{}">{}</text><text x="{}" y="{}" text-anchor="end">{}</text>"#,
        H - MB + 16.0,
        tick(x0),
        W - MR,
        H - MB + 16.0,
        tick(x1)
    );
    for (i, (name, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = p.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            path.join(" ")
        );
        if series.len() > 1 {
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                ML + 8.0,
                MT + 14.0 * (i + 1) as f64,
                esc(name)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Bar chart; each bar may carry `(min, max)` whiskers.
pub fn bar_chart(title: &str, y_label: &str, bars: &[(String, f64, Option<(f64, f64)>)]) -> String {
    let top = bars
        .iter()
        .map(|(_, v, w)| w.map_or(*v, |(_, hi)| hi.max(*v)))
        .fold(0.0f64, f64::max);
    let y1 = if top > 0.0 { top * 1.1 } else { 1.0 };
    let mut s = frame(title, "", y_label, 0.0, y1);
    let n = bars.len().max(1) as f64;
    let slot = (W - ML - MR) / n;
    let py = |y: f64| H - MB - y.max(0.0) / y1 * (H - MT - MB);
    for (i, (label, v, whisk)) in bars.iter().enumerate() {
        let x = ML + slot * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
            x + slot * 0.2,
            py(*v),
            slot * 0.6,
            (H - MB) - py(*v),
            COLORS[0]
        );
        if let Some((lo, hi)) = whisk {
            let cx = x + slot / 2.0;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/><line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#,
                py(*lo),
                py(*hi),
                cx - 6.0,
                py(*lo),
                cx + 6.0,
                py(*lo),
                cx - 6.0,
                py(*hi),
                cx + 6.0,
                py(*hi)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            x + slot / 2.0,
            H - MB + 16.0,
            esc(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Files written and a plain-text summary for the terminal.
#[derive(Debug, Default)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

fn stem(path: &Path) -> String {
    let name = path.file_name().and_then(|s| s.to_str()).unwrap_or("input");
    name.split('.').next().unwrap_or(name).to_string()
}

fn profile_outputs(name: &str, m: &DerivedMetrics, out: &OutputDir, r: &mut ReportOutput) -> Result<(), ReportError> {
    let cap: Vec<(f64, f64)> = m.capacity_curve.iter().map(|p| (p.t_secs, p.value)).collect();
    r.files.push(out.write_text(
        &format!("{name}.capacity.svg"),
        &line_chart(&format!("{name}: capacity"), "time (s)", "footprint / peak", &[(name.into(), cap)], Some((0.0, 1.0))),
    )?);
    let touch: Vec<(f64, f64)> = m.touch_series.iter().map(|p| (p.t_secs, p.touched_fraction)).collect();
    r.files.push(out.write_text(
        &format!("{name}.touch.svg"),
        &line_chart(&format!("{name}: touched pages per interval"), "time (s)", "touched fraction", &[(name.into(), touch)], Some((0.0, 1.0))),
    )?);
    let mut csv = Vec::new();
    write_series_csv(m, &mut csv).map_err(|e| OutputError::Io {
        path: out.path(&format!("{name}.series.csv")),
        source: e.into(),
    })?;
    r.files.push(out.write_text(&format!("{name}.series.csv"), &String::from_utf8_lossy(&csv))?);
    let _ = writeln!(
        r.summary,
        "{name}: peak {} KiB, mean touched {:.3}, cold {}, mean est. bandwidth {:.3} GB/s",
        m.peak_rss_kib,
        m.mean_touched_fraction,
        m.cold_fraction.map_or("n/a".into(), |c| format!("{c:.3}")),
        m.mean_est_bandwidth / 1e9
    );
    Ok(())
}

/// Renders every input into `out`. Profiles and metrics each get a capacity
/// chart, a touch-rate chart and a series CSV; with any cold fractions a
/// shared cold-page bar chart is added. Reports get a CSV table and a chart.
pub fn cmd_report(inputs: &[PathBuf], out: &OutputDir) -> Result<ReportOutput, ReportError> {
    if inputs.is_empty() {
        return Err(ReportError::NoInput);
    }
    let mut r = ReportOutput::default();
    let mut cold = Vec::new();
    for path in inputs {
        let name = stem(path);
        match load_input(path)? {
            ReportInput::Profile(p) => {
                let m = derive(&p).map_err(|e| ReportError::Unrecognized {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
                profile_outputs(&name, &m, out, &mut r)?;
                if let Some(c) = m.cold_fraction {
                    cold.push((name, c, None));
                }
            }
            ReportInput::Metrics(m) => {
                profile_outputs(&name, &m, out, &mut r)?;
                if let Some(c) = m.cold_fraction {
                    cold.push((name, c, None));
                }
            }
            ReportInput::Sweep(s) => {
                r.files.push(out.write_text(&format!("{name}.csv"), &sweep_csv(&s))?);
                let bars: Vec<_> = s
                    .points
                    .iter()
                    .filter_map(|p| p.median_seconds.map(|m| (format!("{:.0}%", p.fraction * 100.0), m, None)))
                    .collect();
                r.files.push(out.write_text(&format!("{name}.svg"), &bar_chart(&format!("{name}: time by pooled fraction"), "median time (s)", &bars))?);
                let _ = writeln!(r.summary, "{name}: capacity sweep of {:?}", s.workload.argv);
                let _ = writeln!(r.summary, "  fraction  status   median_s  slowdown");
                for p in &s.points {
                    let sd = s
                        .sensitivity
                        .as_ref()
                        .and_then(|x| x.slowdown_by_fraction.iter().find(|t| t.fraction == p.fraction))
                        .map_or("-".into(), |t| format!("{:.3}", t.slowdown));
                    let _ = writeln!(
                        r.summary,
                        "  {:>7.2}  {:<7}  {:>8}  {sd}",
                        p.fraction,
                        format!("{:?}", p.status).to_lowercase(),
                        p.median_seconds.map_or("-".into(), |m| format!("{m:.3}"))
                    );
                }
                let _ = writeln!(
                    r.summary,
                    "  class: {}",
                    s.class.map_or_else(|| s.class_note.clone().unwrap_or_else(|| "-".into()), |c| format!("{c:?}"))
                );
            }
            ReportInput::Scaling(s) => {
                let mut w = csv::Writer::from_writer(s.header.csv_comment().into_bytes());
                let _ = w.write_record(["links", "composition", "status", "median_seconds", "speedup"]);
                for p in &s.points {
                    let _ = w.write_record([
                        p.links.to_string(),
                        p.composition.clone(),
                        format!("{:?}", p.status).to_lowercase(),
                        p.median_seconds.map(|m| format!("{m:.4}")).unwrap_or_default(),
                        p.speedup.map(|m| format!("{m:.4}")).unwrap_or_default(),
                    ]);
                }
                let text = String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default();
                r.files.push(out.write_text(&format!("{name}.csv"), &text)?);
                let bars: Vec<_> = s.points.iter().filter_map(|p| p.speedup.map(|v| (format!("{} links", p.links), v, None))).collect();
                r.files.push(out.write_text(&format!("{name}.svg"), &bar_chart(&format!("{name}: speedup by link count"), "speedup vs local", &bars))?);
                let _ = writeln!(r.summary, "{name}: link scaling, {} points", s.points.len());
            }
            ReportInput::Sharing(s) => {
                let mut w = csv::Writer::from_writer(s.header.csv_comment().into_bytes());
                let _ = w.write_record(["hosts", "name", "status", "mean_seconds", "min_seconds", "max_seconds", "slowdown"]);
                let f = |v: Option<f64>| v.map(|m| format!("{m:.4}")).unwrap_or_default();
                for c in &s.configurations {
                    let _ = w.write_record([
                        c.hosts.to_string(),
                        c.name.clone(),
                        format!("{:?}", c.status).to_lowercase(),
                        f(c.mean_seconds),
                        f(c.min_seconds),
                        f(c.max_seconds),
                        f(c.slowdown),
                    ]);
                }
                let text = String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default();
                r.files.push(out.write_text(&format!("{name}.csv"), &text)?);
                let bars: Vec<_> = s
                    .configurations
                    .iter()
                    .filter_map(|c| {
                        let whisk = c.min_seconds.zip(c.max_seconds);
                        c.mean_seconds.map(|m| (format!("{} ({})", c.name, c.hosts), m, whisk))
                    })
                    .collect();
                r.files.push(out.write_text(&format!("{name}.svg"), &bar_chart(&format!("{name}: pool sharing"), "time (s)", &bars))?);
                let _ = writeln!(r.summary, "{name}: pool sharing, {} configurations", s.configurations.len());
            }
        }
    }
    if !cold.is_empty() {
        let mut w = csv::Writer::from_writer(Vec::new());
        let _ = w.write_record(["input", "cold_fraction"]);
        for (n, c, _) in &cold {
            let _ = w.write_record([n.clone(), format!("{c:.4}")]);
        }
        let text = String::from_utf8(w.into_inner().unwrap_or_default()).unwrap_or_default();
        r.files.push(out.write_text("cold_pages.csv", &text)?);
        r.files.push(out.write_text("cold_pages.svg", &bar_chart("cold pages", "cold fraction", &cold))?);
    }
    Ok(r)
}
