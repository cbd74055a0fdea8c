//! SVG scatter of the first two coordinates, colored by section.

use std::collections::BTreeSet;
use std::fmt::Write;

use thiserror::Error;

use crate::embed::EmbeddingSet;
use crate::taxonomy::{Code, Taxonomy, TaxonomyError};

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("need at least 2 dimensions to plot, got {0}")]
    TooFewDimensions(usize),
    #[error("nothing to plot")]
    Empty,
    #[error(transparent)]
    Taxonomy(#[from] TaxonomyError),
}

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 720.0;
const MARGIN: f64 = 40.0;
const LEGEND_WIDTH: f64 = 120.0;

// One color per section letter A..U.
const PALETTE: [&str; 21] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf", "#393b79", "#637939", "#8c6d31", "#843c39", "#7b4173", "#3182bd",
    "#e6550d", "#31a354", "#756bb1", "#636363", "#b5cf6b",
];

fn section_color(section: &Code) -> &'static str {
    let idx = section.as_str().as_bytes()[0].saturating_sub(b'A') as usize;
    PALETTE[idx % PALETTE.len()]
}

/// Deterministic SVG: one `circle.point` per node and one legend entry per
/// section present.
pub fn render_svg(t: &Taxonomy, e: &EmbeddingSet) -> Result<String, PlotError> {
    if e.dimension() < 2 {
        return Err(PlotError::TooFewDimensions(e.dimension()));
    }
    if e.is_empty() {
        return Err(PlotError::Empty);
    }
    let mut points = Vec::with_capacity(e.len());
    for (code, v) in e.iter() {
        points.push((code, t.section_of(code)?, v[0], v[1]));
    }
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(_, _, x, y) in &points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let plot_w = WIDTH - LEGEND_WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let sx = |x: f64| {
        MARGIN
            + if x1 > x0 {
                (x - x0) / (x1 - x0) * plot_w
            } else {
                plot_w / 2.0
            }
    };
    let sy = |y: f64| {
        HEIGHT
            - MARGIN
            - if y1 > y0 {
                (y - y0) / (y1 - y0) * plot_h
            } else {
                plot_h / 2.0
            }
    };

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    svg.push_str("<g class=\"points\">\n");
    for &(code, section, x, y) in &points {
        writeln!(
            svg,
            r#"<circle class="point" cx="{:.3}" cy="{:.3}" r="3" fill="{}" data-code="{}" data-level="{}"/>"#,
            sx(x),
            sy(y),
            section_color(section),
            code,
            code.level()
        )
        .unwrap();
    }
    svg.push_str("</g>\n<g class=\"legend\">\n");
    let sections: BTreeSet<&Code> = points.iter().map(|p| p.1).collect();
    for (i, s) in sections.iter().enumerate() {
        let y = MARGIN + 18.0 * i as f64;
        let x = WIDTH - LEGEND_WIDTH;
        writeln!(
            svg,
            r#"<g class="legend-entry"><circle cx="{x}" cy="{y}" r="5" fill="{}"/><text x="{}" y="{}" font-size="12" font-family="sans-serif">{s}</text></g>"#,
            section_color(s),
            x + 10.0,
            y + 4.0
        )
        .unwrap();
    }
    svg.push_str("</g>\n</svg>\n");
    Ok(svg)
}
