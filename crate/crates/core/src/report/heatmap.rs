//! Γ heatmaps as binary PPM (P6) and SVG.
//!
//! Layout: layer `l` is column `l` (left to right), token `t` is row `t`
//! (token 0 at the top). In the PPM, pixel `(x, y)` shows cell
//! `(layer = x / cell_px, token = y / cell_px)`, so the image is
//! `layers·cell_px` wide and `tokens·cell_px` tall with no margins.
//!
//! Colour: Γ is clipped to `[scale_min, scale_max]` (display only, the data
//! is untouched) and mapped linearly from white at `scale_min` to
//! `DARK` at `scale_max`. Each channel is `round(255 + s·(dark − 255))` with
//! `s ∈ [0, 1]`. Degenerate cells are drawn with diagonal stripes of
//! `HATCH_A`/`HATCH_B`: pixel `(x, y)` takes `HATCH_A` when
//! `((x + y) / 3) % 2 == 0`. Neither hatch colour lies on the ramp.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::metrics::GammaGrid;

pub const DARK: [u8; 3] = [63, 0, 125];
pub const HATCH_A: [u8; 3] = [255, 140, 0];
pub const HATCH_B: [u8; 3] = [160, 160, 160];
pub const ALL_DEGENERATE_WARNING: &str =
    "WARNING: every cell is degenerate (clean and corrupted answer probabilities coincide)";

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapRender {
    pub scale_min: f64,
    pub scale_max: f64,
    /// Edge length of one cell in pixels (PPM) or user units (SVG).
    pub cell_px: usize,
}

impl Default for HeatmapRender {
    fn default() -> Self {
        Self {
            scale_min: 0.0,
            scale_max: 1.0,
            cell_px: 16,
        }
    }
}

impl HeatmapRender {
    pub fn new(scale_min: f64, scale_max: f64, cell_px: usize) -> Result<Self> {
        let r = Self {
            scale_min,
            scale_max,
            cell_px,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale_min.is_finite() && self.scale_max.is_finite() && self.scale_min < self.scale_max) {
            return Err(Error::Parameter(format!(
                "colour scale needs finite min < max, got [{}, {}]",
                self.scale_min, self.scale_max
            )));
        }
        if self.cell_px == 0 {
            return Err(Error::Parameter("cell size must be at least 1 pixel".into()));
        }
        Ok(())
    }

    /// Ramp colour for a Γ value.
    pub fn color(&self, v: f64) -> [u8; 3] {
        let s = ((v - self.scale_min) / (self.scale_max - self.scale_min)).clamp(0.0, 1.0);
        DARK.map(|d| (255.0 + s * (f64::from(d) - 255.0)).round() as u8)
    }
}

fn hatch(x: usize, y: usize) -> [u8; 3] {
    if ((x + y) / 3).is_multiple_of(2) {
        HATCH_A
    } else {
        HATCH_B
    }
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

pub fn render_ppm(grid: &GammaGrid, render: &HeatmapRender) -> Result<Vec<u8>> {
    render.validate()?;
    let px = render.cell_px;
    let (w, h) = (grid.layers * px, grid.tokens * px);
    let mut header = String::from("P6\n");
    let _ = writeln!(header, "# {} gamma, nu={}, layers x tokens = {} x {}", grid.component, grid.meta.nu, grid.layers, grid.tokens);
    if grid.all_degenerate() {
        let _ = writeln!(header, "# {ALL_DEGENERATE_WARNING}");
    }
    let _ = write!(header, "{w} {h}\n255\n");
    let mut out = header.into_bytes();
    out.reserve(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let c = match grid.values[x / px][y / px] {
                Some(v) => render.color(v),
                None => hatch(x, y),
            };
            out.extend_from_slice(&c);
        }
    }
    Ok(out)
}

pub fn render_svg(grid: &GammaGrid, render: &HeatmapRender) -> Result<String> {
    render.validate()?;
    let px = render.cell_px as f64;
    let (left, top, bar) = (110.0, 40.0, 60.0);
    let w = left + grid.layers as f64 * px + bar + 40.0;
    let h = top + grid.tokens as f64 * px + 50.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#
    );
    let _ = writeln!(
        s,
        r##"<defs><pattern id="degenerate" width="6" height="6" patternUnits="userSpaceOnUse" patternTransform="rotate(45)"><rect width="6" height="6" fill="{}"/><rect width="3" height="6" fill="{}"/></pattern></defs>"##,
        hex(HATCH_B),
        hex(HATCH_A)
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="18" font-size="13">{} Γ, ν = {}, {} sample(s)</text>"#,
        grid.component,
        grid.meta.nu,
        grid.meta.sample_ids.len()
    );
    if grid.all_degenerate() {
        let _ = writeln!(
            s,
            r#"<text class="warning" x="{left}" y="32" font-size="11" fill="red">{}</text>"#,
            escape(ALL_DEGENERATE_WARNING)
        );
    }
    for (l, row) in grid.values.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            let fill = match v {
                Some(v) => hex(render.color(*v)),
                None => "url(#degenerate)".to_string(),
            };
            let title = match v {
                Some(v) => format!("L{l} T{t}: {v}"),
                None => format!("L{l} T{t}: degenerate"),
            };
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{px}" height="{px}" fill="{fill}"><title>{title}</title></rect>"#,
                left + l as f64 * px,
                top + t as f64 * px
            );
        }
    }
    for t in 0..grid.tokens {
        let label = grid.meta.token_labels.get(t).cloned().unwrap_or_else(|| format!("t{t}"));
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            left - 4.0,
            top + (t as f64 + 0.5) * px,
            escape(&label)
        );
    }
    let base = top + grid.tokens as f64 * px;
    for l in 0..grid.layers {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{l}</text>"#,
            left + (l as f64 + 0.5) * px,
            base + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">layer</text>"#,
        left + grid.layers as f64 * px / 2.0,
        base + 30.0
    );
    // Colour bar, high values at the top.
    let bx = left + grid.layers as f64 * px + 20.0;
    let steps = 20;
    let bh = grid.tokens as f64 * px / steps as f64;
    for i in 0..steps {
        let frac = 1.0 - (i as f64 + 0.5) / steps as f64;
        let v = render.scale_min + frac * (render.scale_max - render.scale_min);
        let _ = writeln!(
            s,
            r#"<rect x="{bx}" y="{}" width="12" height="{bh}" fill="{}"/>"#,
            top + i as f64 * bh,
            hex(render.color(v))
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10">{}</text>"#, bx + 16.0, top + 8.0, render.scale_max);
    let _ = writeln!(s, r#"<text x="{}" y="{base}" font-size="10">{}</text>"#, bx + 16.0, render.scale_min);
    s.push_str("</svg>\n");
    Ok(s)
}
