//! Rendering of Γ grids and noise curves.

pub mod curve;
pub mod heatmap;

pub use curve::{parse_csv, render_curve_svg, to_csv, CurveRow, CSV_HEADER};
pub use heatmap::{render_ppm, render_svg, HeatmapRender};
