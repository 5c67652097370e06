//! Minimal deterministic SVG line plots.

use std::fmt::Write;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 72.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 56.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Style {
    Line,
    Dashed,
    Markers,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub style: Style,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>, style: Style) -> Self {
        Series { label: label.into(), points, style }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axis {
    log: bool,
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool) -> Option<Axis> {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return None;
        }
        if hi - lo < 1e-12 {
            let pad = if lo == 0.0 { 1.0 } else { 0.5 * lo.abs() };
            lo -= pad;
            hi += pad;
        }
        Some(Axis { log, lo, hi })
    }

    fn frac(&self, v: f64) -> f64 {
        let v = if self.log { v.log10() } else { v };
        (v - self.lo) / (self.hi - self.lo)
    }

    fn label(&self, k: usize) -> String {
        let v = self.lo + (self.hi - self.lo) * k as f64 / 4.0;
        if self.log {
            format!("1e{v:.1}")
        } else {
            format!("{v:.3e}")
        }
    }
}

fn usable(p: &(f64, f64), plot: &Plot) -> bool {
    p.0.is_finite() && p.1.is_finite() && (!plot.log_x || p.0 > 0.0) && (!plot.log_y || p.1 > 0.0)
}

impl Plot {
    /// Render to SVG. Points that are non-finite, or non-positive on a log
    /// axis, are skipped.
    pub fn render(&self) -> Result<String> {
        if self.series.iter().all(|s| s.points.is_empty()) {
            return Err(Error::InvalidInput(format!("plot `{}` has no data", self.title)));
        }
        let pts = || self.series.iter().flat_map(|s| s.points.iter()).filter(|p| usable(p, self));
        let no_data = || Error::InvalidInput(format!("plot `{}` has no plottable points", self.title));
        let xa = Axis::fit(pts().map(|p| p.0), self.log_x).ok_or_else(no_data)?;
        let ya = Axis::fit(pts().map(|p| p.1), self.log_y).ok_or_else(no_data)?;
        let (pw, ph) = (WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM);
        let sx = |x: f64| LEFT + xa.frac(x) * pw;
        let sy = |y: f64| TOP + (1.0 - ya.frac(y)) * ph;

        let mut s = String::new();
        let w = &mut s;
        let _ = writeln!(
            w,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(w, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(w, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(&self.title));
        let _ = writeln!(
            w,
            r#"<g class="axes" stroke="black" fill="none"><rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}"/></g>"#
        );
        for k in 0..=4 {
            let fx = LEFT + pw * k as f64 / 4.0;
            let fy = TOP + ph * (1.0 - k as f64 / 4.0);
            let _ = writeln!(w, r#"<line x1="{fx:.1}" y1="{:.1}" x2="{fx:.1}" y2="{:.1}" stroke="black"/>"#, TOP + ph, TOP + ph + 5.0);
            let _ = writeln!(w, r#"<text x="{fx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, TOP + ph + 18.0, xa.label(k));
            let _ = writeln!(w, r#"<line x1="{:.1}" y1="{fy:.1}" x2="{LEFT}" y2="{fy:.1}" stroke="black"/>"#, LEFT - 5.0);
            let _ = writeln!(w, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, LEFT - 8.0, fy + 4.0, ya.label(k));
        }
        let _ = writeln!(w, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, LEFT + pw / 2.0, HEIGHT - 14.0, escape(&self.x_label));
        let _ = writeln!(
            w,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + ph / 2.0,
            TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for (k, series) in self.series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            let coords: Vec<(f64, f64)> =
                series.points.iter().filter(|p| usable(p, self)).map(|&(x, y)| (sx(x), sy(y))).collect();
            match series.style {
                Style::Line | Style::Dashed => {
                    let dash = if series.style == Style::Dashed { r#" stroke-dasharray="6 4""# } else { "" };
                    let list: Vec<String> = coords.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
                    let _ = writeln!(
                        w,
                        r#"<polyline fill="none" stroke="{color}" stroke-width="1.6"{dash} points="{}"/>"#,
                        list.join(" ")
                    );
                }
                Style::Markers => {
                    for (x, y) in &coords {
                        let _ = writeln!(w, r#"<circle cx="{x:.2}" cy="{y:.2}" r="3" fill="{color}"/>"#);
                    }
                }
            }
            let ly = TOP + 14.0 + 18.0 * k as f64;
            let lx = WIDTH - RIGHT + 12.0;
            let _ = writeln!(w, r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0);
            let _ = writeln!(w, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 24.0, ly + 4.0, escape(&series.label));
        }
        s.push_str("</svg>\n");
        Ok(s)
    }
}
