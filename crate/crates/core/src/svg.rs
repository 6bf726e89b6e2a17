//! Minimal self-contained SVG figures: risk against horizon on log-log axes
//! next to the gap to the envelope on a linear vertical axis.

use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(name: impl Into<String>, xs: &[u64], ys: &[f64]) -> Self {
        Self {
            name: name.into(),
            points: xs.iter().map(|&x| x as f64).zip(ys.iter().copied()).collect(),
        }
    }
}

const PALETTE: [&str; 6] = ["#000000", "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
const W: f64 = 420.0;
const H: f64 = 320.0;
const PAD: f64 = 50.0;

struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            lo -= 0.5;
            hi += 0.5;
        }
        Self { lo, hi, log }
    }

    fn frac(&self, v: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let v = if self.log { v.log10() } else { v };
        Some((v - self.lo) / (self.hi - self.lo))
    }

    fn label(&self, frac: f64) -> String {
        let v = self.lo + frac * (self.hi - self.lo);
        if self.log {
            format!("{:.2e}", 10f64.powf(v))
        } else {
            format!("{v:.3}")
        }
    }
}

fn panel(out: &mut String, x0: f64, title: &str, series: &[Series], log_y: bool) {
    let xa = Axis::fit(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)), true);
    let ya = Axis::fit(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)), log_y);
    let (left, right, top, bottom) = (x0 + PAD, x0 + W - 10.0, 30.0, H - PAD);
    let _ = writeln!(
        out,
        r#"<rect x="{left}" y="{top}" width="{}" height="{}" fill="none" stroke="gray"/>"#,
        right - left,
        bottom - top
    );
    let _ = writeln!(out, r#"<text x="{}" y="18" font-size="13" text-anchor="middle">{}</text>"#, (left + right) / 2.0, escape(title));
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let x = left + f * (right - left);
        let y = bottom - f * (bottom - top);
        let _ = writeln!(out, r#"<text x="{x:.1}" y="{:.1}" font-size="9" text-anchor="middle">{}</text>"#, bottom + 14.0, xa.label(f));
        let _ = writeln!(out, r#"<text x="{:.1}" y="{y:.1}" font-size="9" text-anchor="end">{}</text>"#, left - 3.0, ya.label(f));
    }
    let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">horizon</text>"#, (left + right) / 2.0, H - 12.0);
    for (i, s) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter_map(|&(x, y)| {
                let fx = xa.frac(x)?;
                let fy = ya.frac(y)?;
                Some(format!("{:.2},{:.2}", left + fx * (right - left), bottom - fy * (bottom - top)))
            })
            .collect();
        let _ = writeln!(out, r#"<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" fill="{colour}">{}</text>"#,
            left + 6.0,
            top + 14.0 + 12.0 * i as f64,
            escape(&s.name)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Two panels: `risks` on log-log axes and `deltas` with a log horizontal
/// and linear vertical axis.
pub fn comparison_svg(title: &str, risks: &[Series], deltas: &[Series]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{H}" viewBox="0 0 {} {H}">"#,
        2.0 * W,
        2.0 * W
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    panel(&mut out, 0.0, &format!("{title}: excess risk"), risks, true);
    panel(&mut out, W, "gap to envelope", deltas, false);
    out.push_str("</svg>\n");
    out
}
