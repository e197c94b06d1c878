//! Memorygram heatmap rendering.
//!
//! Each memorygram becomes one horizontal strip, time left to right, one
//! cell per entry on a 256-level grayscale ramp over the trace's own
//! min-max range. Darker cells mean more evictions.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::CliError;

const CELL_W: f64 = 1.0;
const STRIP_H: u32 = 24;

pub fn write_heatmap(path: &Path, entries: &[f32], title: &str) -> Result<(), CliError> {
    let width = entries.len() as f64 * CELL_W;
    let min = entries.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = entries.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let span = (max - min).max(f32::MIN_POSITIVE);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{h}" viewBox="0 0 {width} {h}">"#,
        h = STRIP_H + 14
    );
    let _ = writeln!(svg, r#"<title>{title}</title>"#);
    let _ = writeln!(svg, r#"<text x="0" y="10" font-size="9" font-family="monospace">{title}</text>"#);
    for (i, &e) in entries.iter().enumerate() {
        let norm = ((e - min) / span).clamp(0.0, 1.0);
        let level = 255 - (norm * 255.0).round() as u32; // darker = higher
        let _ = writeln!(
            svg,
            r##"<rect x="{x}" y="14" width="{CELL_W}" height="{STRIP_H}" fill="#{level:02x}{level:02x}{level:02x}"/>"##,
            x = i as f64 * CELL_W
        );
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(CliError::io("writing heatmap"))
}
