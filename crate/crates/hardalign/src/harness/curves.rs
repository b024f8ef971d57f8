//! TER-vs-step curve plots as standalone SVG.
//!
//! The renderer is a pure function of its inputs — identical metrics files
//! always produce byte-identical SVG — so plots can be diffed and cached
//! like any other build artifact.

use crate::error::{Error, Result};
use crate::harness::train::METRICS_HEADER;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];
const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 28.0;
const MARGIN_B: f64 = 48.0;

/// One curve: a label plus `(step, ter)` points in step order.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(u64, f64)>,
}

/// Parses one metrics CSV into a TER series. The header must match the
/// trainer's schema exactly; every data row contributes one point.
pub fn parse_metrics(label: &str, text: &str) -> Result<Series> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        Some(h) => {
            return Err(Error::validation(format!(
                "`{label}`: unexpected metrics header `{h}`"
            )))
        }
        None => return Err(Error::validation(format!("`{label}`: empty metrics file"))),
    }
    let mut points = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::validation(format!(
                "`{label}` row {}: expected 6 fields, found {}",
                i + 2,
                fields.len()
            )));
        }
        let step: u64 = fields[0]
            .parse()
            .map_err(|e| Error::validation(format!("`{label}` row {}: step: {e}", i + 2)))?;
        let ter: f64 = fields[4]
            .parse()
            .map_err(|e| Error::validation(format!("`{label}` row {}: ter: {e}", i + 2)))?;
        if !ter.is_finite() {
            return Err(Error::validation(format!(
                "`{label}` row {}: non-finite ter",
                i + 2
            )));
        }
        points.push((step, ter));
    }
    if points.is_empty() {
        return Err(Error::validation(format!(
            "`{label}`: metrics file has no data rows"
        )));
    }
    Ok(Series {
        label: label.to_string(),
        points,
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders TER-vs-step polylines with axes and a legend.
pub fn render_curves(series: &[Series]) -> Result<String> {
    if series.is_empty() {
        return Err(Error::validation("no series to plot"));
    }
    let max_step = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .max()
        .unwrap_or(0)
        .max(1);
    let max_ter = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.1))
        .fold(0.0f64, f64::max)
        .max(1.0);

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x = |step: u64| MARGIN_L + plot_w * step as f64 / max_step as f64;
    let y = |ter: f64| MARGIN_T + plot_h * (1.0 - ter / max_ter);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    );
    // Axes.
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B)
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(HEIGHT - MARGIN_B),
        fmt(WIDTH - MARGIN_R),
        fmt(HEIGHT - MARGIN_B)
    ));
    // Gridlines and tick labels: five divisions each way.
    for i in 0..=5u32 {
        let frac = i as f64 / 5.0;
        let gx = MARGIN_L + plot_w * frac;
        let gy = MARGIN_T + plot_h * (1.0 - frac);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>\n",
            fmt(gx),
            fmt(MARGIN_T),
            fmt(gx),
            fmt(HEIGHT - MARGIN_B)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            fmt(gx),
            fmt(HEIGHT - MARGIN_B + 18.0),
            (max_step as f64 * frac).round() as u64
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_L - 8.0),
            fmt(gy + 4.0),
            fmt(max_ter * frac)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step</text>\n",
        fmt(MARGIN_L + plot_w / 2.0),
        fmt(HEIGHT - 10.0)
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">TER</text>\n",
        fmt(MARGIN_T + plot_h / 2.0),
        fmt(MARGIN_T + plot_h / 2.0)
    ));
    // Curves.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(step, ter)| format!("{},{}", fmt(x(step)), fmt(y(ter))))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }
    // Legend, top-right.
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let ly = MARGIN_T + 16.0 * i as f64 + 8.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            fmt(WIDTH - MARGIN_R - 150.0),
            fmt(ly),
            fmt(WIDTH - MARGIN_R - 126.0),
            fmt(ly)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\">{}</text>\n",
            fmt(WIDTH - MARGIN_R - 120.0),
            fmt(ly + 4.0),
            xml_escape(&s.label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads metrics CSVs and renders them as one plot; the series labels are
/// the file stems.
pub fn emit_curves(paths: &[std::path::PathBuf]) -> Result<String> {
    if paths.is_empty() {
        return Err(Error::validation("curves need at least one metrics file"));
    }
    let mut series = Vec::with_capacity(paths.len());
    for path in paths {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let text = std::fs::read_to_string(path)?;
        series.push(parse_metrics(&label, &text)?);
    }
    render_curves(&series)
}
