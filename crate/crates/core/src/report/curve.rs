//! Γ-versus-noise curve: CSV rows and a small SVG line plot.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::hooks::Component;
use crate::metrics::NoiseCurvePoint;

pub const CSV_HEADER: &str = "nu,component,gamma_avg,n_cells,n_degenerate";

/// One CSV row. `gamma_avg` is empty when every cell was degenerate.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub nu: f64,
    pub component: Component,
    pub gamma_avg: Option<f64>,
    pub n_cells: usize,
    pub n_degenerate: usize,
}

impl From<&NoiseCurvePoint> for CurveRow {
    fn from(p: &NoiseCurvePoint) -> Self {
        Self {
            nu: p.nu,
            component: p.component,
            gamma_avg: Some(p.gamma_avg),
            n_cells: p.n_cells,
            n_degenerate: p.n_degenerate,
        }
    }
}

pub fn to_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let g = r.gamma_avg.map(|g| g.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{},{}", r.nu, r.component, g, r.n_cells, r.n_degenerate);
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<CurveRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Parameter(format!("curve CSV must start with `{CSV_HEADER}`")));
    }
    let bad = |i: usize, what: &str| Error::Parameter(format!("curve CSV line {}: {what}", i + 2));
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i, "expected 5 fields"));
            }
            Ok(CurveRow {
                nu: f[0].parse().map_err(|_| bad(i, "bad nu"))?,
                component: f[1].parse().map_err(|_| bad(i, "bad component"))?,
                gamma_avg: if f[2].is_empty() {
                    None
                } else {
                    Some(f[2].parse().map_err(|_| bad(i, "bad gamma_avg"))?)
                },
                n_cells: f[3].parse().map_err(|_| bad(i, "bad n_cells"))?,
                n_degenerate: f[4].parse().map_err(|_| bad(i, "bad n_degenerate"))?,
            })
        })
        .collect()
}

/// Line plot of Γ against ν for one component; ν on a log axis.
pub fn render_curve_svg(rows: &[CurveRow], component: Component) -> String {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.component == component)
        .filter_map(|r| r.gamma_avg.map(|g| (r.nu, g)))
        .collect();
    let (w, h, margin) = (480.0, 320.0, 50.0);
    let (x0, x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.0.ln()), hi.max(p.0.ln())));
    let (y0, y1) = pts
        .iter()
        .fold((0.0f64, 1.0f64), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let span = |a: f64, b: f64| if b - a > 0.0 { b - a } else { 1.0 };
    let sx = |nu: f64| margin + (nu.ln() - x0) / span(x0, x1) * (w - 2.0 * margin);
    let sy = |g: f64| h - margin - (g - y0) / span(y0, y1) * (h - 2.0 * margin);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">mean Γ vs noise ({component})</text>"#,
        w / 2.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{margin}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - margin,
        w - margin,
        h - margin
    );
    let _ = writeln!(s, r#"<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{}" stroke="black"/>"#, h - margin);
    for g in [y0, 0.0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{g:.2}</text>"#,
            margin - 4.0,
            sy(g) + 3.0
        );
    }
    if !pts.is_empty() {
        let path: Vec<String> = pts.iter().map(|&(nu, g)| format!("{:.2},{:.2}", sx(nu), sy(g))).collect();
        let _ = writeln!(
            s,
            r##"<polyline fill="none" stroke="#3f007d" stroke-width="2" points="{}"/>"##,
            path.join(" ")
        );
        for &(nu, g) in &pts {
            let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#3f007d"/>"##, sx(nu), sy(g));
            let _ = writeln!(
                s,
                r#"<text x="{:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{nu}</text>"#,
                sx(nu),
                h - margin + 14.0
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
