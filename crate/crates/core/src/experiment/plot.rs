//! Minimal SVG line charts of a metrics CSV.
//!
//! Runs are grouped into series by the swept quantity (mode, then `tilde_sigma`,
//! then `sigma`) and averaged over seeds at each step.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::diagnostics::MetricsRecord;
use crate::error::{Error, Result};
use crate::experiment::metrics_csv::{read_metrics_file, MetricsRow};

const W: f64 = 640.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// A named polyline.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

type Metric = fn(&MetricsRecord) -> f64;

fn distinct<T: PartialEq + Clone>(rows: &[MetricsRow], key: impl Fn(&MetricsRow) -> T) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for r in rows {
        let k = key(r);
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

/// Seed-averaged series of `metric`, one per value of `group`. NaN values are skipped.
pub fn group_series(rows: &[MetricsRow], group: impl Fn(&MetricsRow) -> String, metric: Metric) -> Vec<Series> {
    let mut acc: BTreeMap<String, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
    for r in rows {
        let v = metric(&r.record);
        if !v.is_finite() {
            continue;
        }
        let e = acc.entry(group(r)).or_default().entry(r.record.step).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(label, steps)| Series {
            label,
            points: steps.into_iter().map(|(s, (sum, c))| (s as f64, sum / c as f64)).collect(),
        })
        .filter(|s| !s.points.is_empty())
        .collect()
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let mut t = (lo / step).ceil() * step;
    let mut out = Vec::new();
    while t <= hi + 1e-9 * step {
        out.push(if t.abs() < 1e-12 * step { 0.0 } else { t });
        t += step;
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders an SVG document; errors when there is nothing to draw.
pub fn render_svg(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<String> {
    let pts = || series.iter().flat_map(|s| s.points.iter());
    if pts().next().is_none() {
        return Err(Error::Malformed {
            what: "plot data",
            detail: format!("no finite points for {title}"),
        });
    }
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts() {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 == x0 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if y1 == y0 {
        let pad = if y0 == 0.0 { 1.0 } else { 0.05 * y0.abs() };
        y0 -= pad;
        y1 += pad;
    } else {
        let pad = 0.05 * (y1 - y0);
        y0 -= pad;
        y1 += pad;
    }
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let _ = writeln!(s, r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for t in nice_ticks(x0, x1) {
        let x = sx(t);
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">{t}</text>"#, TOP + ph + 18.0);
    }
    for t in nice_ticks(y0, y1) {
        let y = sy(t);
        let _ = writeln!(s, r##"<line x1="{LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ddd"/>"##, LEFT + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, format_tick(t));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, H - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        let path: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
        if ser.points.len() <= 60 {
            for &(x, y) in &ser.points {
                let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{c}"/>"#, sx(x), sy(y));
            }
        }
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{c}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn format_tick(t: f64) -> String {
    if t != 0.0 && (t.abs() >= 1e5 || t.abs() < 1e-3) {
        format!("{t:.1e}")
    } else {
        let s = format!("{t:.4}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

type Grouping = Box<dyn Fn(&MetricsRow) -> String>;

/// Writes the charts for a metrics file into `out_dir` and returns their paths.
///
/// * several modes: `alignment.svg` and `test_error.svg`, one line per mode;
/// * several `tilde_sigma` levels: `dof.svg` and `test_error.svg`;
/// * otherwise: `alignment.svg` and `dof.svg`, one line per `sigma`.
///
/// Nothing is written when the file has no rows.
pub fn emit_plots(csv: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rows = read_metrics_file(csv)?;
    if rows.is_empty() {
        return Err(Error::Malformed {
            what: "metrics csv",
            detail: format!("{} has no rows", csv.display()),
        });
    }
    let align: (&str, &str, Metric) = ("alignment", "kernel-target alignment", |r| r.align_emp);
    let dof: (&str, &str, Metric) = ("dof", "degrees of freedom", |r| r.dof);
    let test: (&str, &str, Metric) = ("test_error", "test MSE", |r| r.test_mse);
    let (group, charts): (Grouping, Vec<_>) = if distinct(&rows, |r| r.mode.clone()).len() > 1 {
        (Box::new(|r| r.mode.clone()), vec![align, test])
    } else if distinct(&rows, |r| r.record.tilde_sigma.to_bits()).len() > 1 {
        (Box::new(|r| format!("tilde sigma = {}", r.record.tilde_sigma)), vec![dof, test])
    } else {
        (Box::new(|r| format!("sigma = {}", r.record.sigma)), vec![align, dof])
    };
    let mut rendered = Vec::new();
    for (name, label, metric) in charts {
        let series = group_series(&rows, &group, metric);
        rendered.push((name, render_svg(label, "step", label, &series)?));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for (name, svg) in rendered {
        let p = out_dir.join(format!("{name}.svg"));
        std::fs::write(&p, svg)?;
        paths.push(p);
    }
    Ok(paths)
}
