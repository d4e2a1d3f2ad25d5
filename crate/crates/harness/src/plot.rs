//! SVG line plots of `threshold,value` curves.

use std::fmt::Write as _;
use std::path::Path;

use irtrack_core::metrics::MetricCurve;

use crate::error::{io_err, HarnessError, Result};

pub const WIDTH: f64 = 640.0;
pub const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Reads a `threshold,value` CSV written by the evaluator.
pub fn read_curve_csv(path: &Path) -> Result<MetricCurve> {
    let input = |line: usize, msg: String| HarnessError::Input {
        path: path.to_path_buf(),
        source: irtrack_core::Error::Parse { line, msg },
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => io_err(path)(io),
        other => input(1, format!("{other:?}")),
    })?;
    let header = rdr.headers().map_err(|e| input(1, e.to_string()))?.clone();
    if header.len() != 2 {
        return Err(input(1, format!("expected 2 columns, found {}", header.len())));
    }
    let (mut ts, mut vs) = (Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| input(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let num = |i: usize| {
            rec[i]
                .trim()
                .parse::<f64>()
                .map_err(|e| input(line, format!("`{}`: {e}", &rec[i])))
        };
        ts.push(num(0)?);
        vs.push(num(1)?);
    }
    if ts.is_empty() {
        return Err(input(2, "no curve rows".into()));
    }
    MetricCurve::new(ts, vs).map_err(|e| HarnessError::Input {
        path: path.to_path_buf(),
        source: e,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(f64::EPSILON);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 6.0)
        .unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|k| (k as f64 * step * 1e9).round() / 1e9).collect()
}

/// One polyline per named curve on shared axes. The y axis spans `[0, 1]`.
pub fn render_svg(curves: &[(String, MetricCurve)], title: &str, x_label: &str, y_label: &str) -> String {
    let xs = curves.iter().flat_map(|(_, c)| c.thresholds.iter().copied());
    let (mut x_lo, mut x_hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if !x_lo.is_finite() {
        (x_lo, x_hi) = (0.0, 1.0);
    }
    if x_hi <= x_lo {
        x_hi = x_lo + 1.0;
    }
    let (pw, ph) = (WIDTH - MARGIN_LEFT - MARGIN_RIGHT, HEIGHT - MARGIN_TOP - MARGIN_BOTTOM);
    let px = |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * pw;
    let py = |y: f64| MARGIN_TOP + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for t in nice_ticks(x_lo, x_hi) {
        let x = px(t);
        let _ = writeln!(
            s,
            r##"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="#ccc"/><text x="{x:.2}" y="{}" text-anchor="middle">{}</text>"##,
            MARGIN_TOP,
            MARGIN_TOP + ph,
            MARGIN_TOP + ph + 16.0,
            t
        );
    }
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN_LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#ccc"/><text x="{}" y="{:.2}" text-anchor="end">{v}</text>"##,
            MARGIN_LEFT + pw,
            MARGIN_LEFT - 6.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        MARGIN_LEFT + pw / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">{1}</text>"#,
        MARGIN_TOP + ph / 2.0,
        escape(y_label)
    );
    for (i, (name, c)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let points: Vec<String> = c
            .thresholds
            .iter()
            .zip(&c.values)
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            points.join(" ")
        );
        let ly = MARGIN_TOP + 16.0 + 20.0 * i as f64;
        let lx = MARGIN_LEFT + pw + 12.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
