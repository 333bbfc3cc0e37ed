//! Static SVG line charts overlaying ground truth and forecast.

use std::fmt::Write as _;

const WIDTH: f64 = 860.0;
const HEIGHT: f64 = 320.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 24.0;
const MARGIN_B: f64 = 40.0;

/// One drawable series: y values starting at absolute step `start`.
pub struct Trace<'a> {
    pub label: &'a str,
    pub start: usize,
    pub values: &'a [f64],
    pub color: &'a str,
    pub dashed: bool,
}

fn path_points(trace: &Trace, x0: usize, x1: usize, lo: f64, hi: f64) -> String {
    let span_x = (x1 - x0).max(1) as f64;
    let span_y = (hi - lo).max(1e-12);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let mut d = String::new();
    for (i, &v) in trace.values.iter().enumerate() {
        let x = MARGIN_L + (trace.start + i - x0) as f64 / span_x * plot_w;
        let y = MARGIN_T + (1.0 - (v - lo) / span_y) * plot_h;
        let _ = write!(d, "{}{x:.2},{y:.2}", if i == 0 { "M" } else { " L" });
    }
    d
}

/// Render traces into a standalone SVG document.
pub fn render(title: &str, traces: &[Trace]) -> String {
    let x0 = traces.iter().map(|t| t.start).min().unwrap_or(0);
    let x1 = traces
        .iter()
        .map(|t| t.start + t.values.len().saturating_sub(1))
        .max()
        .unwrap_or(1);
    let lo = traces
        .iter()
        .flat_map(|t| t.values.iter().cloned())
        .fold(f64::INFINITY, f64::min);
    let hi = traces
        .iter()
        .flat_map(|t| t.values.iter().cloned())
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = (hi - lo).abs().max(1e-9) * 0.05;
    let (lo, hi) = (lo - pad, hi + pad);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"##
    );
    let _ = writeln!(svg, r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"##);
    let _ = writeln!(
        svg,
        r##"<text x="{}" y="16" font-family="sans-serif" font-size="13" fill="#333">{title}</text>"##,
        MARGIN_L
    );

    // Frame and axis extremes.
    let plot_r = WIDTH - MARGIN_R;
    let plot_b = HEIGHT - MARGIN_B;
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        plot_r - MARGIN_L,
        plot_b - MARGIN_T
    );
    for (v, y) in [(hi, MARGIN_T + 4.0), (lo, plot_b)] {
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{y:.1}" font-family="sans-serif" font-size="11" fill="#555" text-anchor="end">{v:.3}</text>"##,
            MARGIN_L - 6.0
        );
    }
    for (s, anchor, x) in [(x0, "start", MARGIN_L), (x1, "end", plot_r)] {
        let _ = writeln!(
            svg,
            r##"<text x="{x:.1}" y="{}" font-family="sans-serif" font-size="11" fill="#555" text-anchor="{anchor}">t={s}</text>"##,
            plot_b + 16.0
        );
    }

    for (i, t) in traces.iter().enumerate() {
        let dash = if t.dashed { r#" stroke-dasharray="6,4""# } else { "" };
        let _ = writeln!(
            svg,
            r##"<path d="{}" fill="none" stroke="{}" stroke-width="1.6"{dash}/>"##,
            path_points(t, x0, x1, lo, hi),
            t.color
        );
        let ly = MARGIN_T + 16.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r##"<line x1="{}" y1="{ly:.1}" x2="{}" y2="{ly:.1}" stroke="{}" stroke-width="1.6"{dash}/>"##,
            plot_r - 150.0,
            plot_r - 120.0,
            t.color
        );
        let _ = writeln!(
            svg,
            r##"<text x="{}" y="{:.1}" font-family="sans-serif" font-size="11" fill="#333">{}</text>"##,
            plot_r - 112.0,
            ly + 4.0,
            t.label
        );
    }
    svg.push_str("</svg>\n");
    svg
}
