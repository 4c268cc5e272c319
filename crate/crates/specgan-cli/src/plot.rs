//! Minimal SVG rendering of decay curves (value vs normalized rank, one
//! polyline per layer). Decorative only; nothing downstream parses these.

use specgan::evalsuite::SpectrumReport;
use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

pub fn write_decay_svg(path: &Path, report: &SpectrumReport) -> Result<(), std::io::Error> {
    let y_max = report
        .layers
        .iter()
        .flat_map(|l| l.values.iter().copied())
        .fold(1.0f64, f64::max);
    let px = |x: f64| MARGIN + x * (WIDTH - 2.0 * MARGIN);
    let py = |y: f64| HEIGHT - MARGIN - (y / y_max) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = String::new();
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = write!(
        svg,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    // Axes.
    let _ = write!(
        svg,
        r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/><line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#,
        x0 = px(0.0),
        x1 = px(1.0),
        y0 = py(0.0),
        y1 = py(y_max),
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">normalized rank</text>"#,
        px(0.5),
        HEIGHT - 12.0
    );
    let _ = write!(
        svg,
        r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">singular value</text>"#,
        py(y_max / 2.0),
        py(y_max / 2.0)
    );
    let _ = write!(
        svg,
        r#"<text x="{}" y="20" font-size="13" text-anchor="middle">spectra at iteration {}</text>"#,
        px(0.5),
        report.iteration
    );

    for (li, layer) in report.layers.iter().enumerate() {
        let color = PALETTE[li % PALETTE.len()];
        let mut points = String::new();
        for (x, y) in layer.normalized_ranks.iter().zip(&layer.values) {
            let _ = write!(points, "{:.2},{:.2} ", px(*x), py(*y));
        }
        let _ = write!(
            svg,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            points.trim_end()
        );
        // Dots make single-value layers visible.
        for (x, y) in layer.normalized_ranks.iter().zip(&layer.values) {
            let _ = write!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
                px(*x),
                py(*y)
            );
        }
        let _ = write!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">layer {li}</text>"#,
            WIDTH - MARGIN + 4.0,
            py(*layer.values.last().unwrap_or(&0.0)) + 4.0 + 12.0 * li as f64
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
}
