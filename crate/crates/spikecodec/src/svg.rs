//! Minimal self-contained SVG line plots for report curves.

use std::path::Path;

use crate::error::{Error, Result};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Renders one or more named series as polylines with axes and a legend.
pub fn line_plot_svg(title: &str, series: &[(String, Vec<(f64, f64)>)]) -> Result<String> {
    if series.iter().all(|(_, pts)| pts.is_empty()) {
        return Err(Error::Input("nothing to plot: all series empty".into()));
    }
    let points = series.iter().flat_map(|(_, pts)| pts.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in points {
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Numeric("non-finite plot coordinate".into()));
        }
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 - x0 < f64::EPSILON {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < f64::EPSILON {
        y1 = y0 + 1.0;
    }
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    );
    // axes
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN,
        b = HEIGHT - MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{m}\" y=\"{by}\" font-size=\"11\">{x0}</text>\n\
         <text x=\"{rx}\" y=\"{by}\" text-anchor=\"end\" font-size=\"11\">{x1}</text>\n\
         <text x=\"{lx}\" y=\"{b}\" text-anchor=\"end\" font-size=\"11\">{y0}</text>\n\
         <text x=\"{lx}\" y=\"{ty}\" text-anchor=\"end\" font-size=\"11\">{y1}</text>\n",
        m = MARGIN,
        by = HEIGHT - MARGIN + 16.0,
        rx = WIDTH - MARGIN,
        lx = MARGIN - 6.0,
        b = HEIGHT - MARGIN,
        ty = MARGIN + 4.0
    ));
    for (i, (name, pts)) in series.iter().enumerate() {
        if pts.is_empty() {
            continue;
        }
        let color = COLORS[i % COLORS.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{},{}", sx(x), sy(y))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            coords.join(" ")
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{}</text>\n",
            WIDTH - MARGIN + 4.0 - 120.0,
            MARGIN + 16.0 * i as f64,
            escape(name)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_line_plot(
    path: impl AsRef<Path>,
    title: &str,
    series: &[(String, Vec<(f64, f64)>)],
) -> Result<()> {
    let svg = line_plot_svg(title, series)?;
    std::fs::write(path.as_ref(), svg)
        .map_err(|e| Error::io(path.as_ref().display().to_string(), e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
