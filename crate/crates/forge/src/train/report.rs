//! Sweep reporting: regenerate the CSV and draw a static SVG scatter of
//! accuracy vs model bytes with the non-dominated front as a polyline.

use super::sweep::{flag_dominated, to_csv, ParetoRecord};
use crate::error::{ForgeError, Result};
use std::path::Path;

/// Load `records.json` from a sweep output directory.
pub fn load_records(dir: &Path) -> Result<Vec<ParetoRecord>> {
    let path = dir.join("records.json");
    if !path.exists() {
        return Err(ForgeError::config(format!(
            "{} not found; is this a sweep output directory?",
            path.display()
        )));
    }
    let records: Vec<ParetoRecord> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    Ok(records)
}

pub fn write_csv(records: &[ParetoRecord], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(records))?;
    Ok(())
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const MARGIN: f64 = 60.0;

/// Static scatter plot: x = params_bytes, y = accuracy; non-dominated points
/// joined by a polyline.
pub fn render_svg(records: &[ParetoRecord]) -> String {
    let mut rs = records.to_vec();
    flag_dominated(&mut rs);
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &rs {
        xmin = xmin.min(r.params_bytes);
        xmax = xmax.max(r.params_bytes);
        ymin = ymin.min(r.accuracy);
        ymax = ymax.max(r.accuracy);
    }
    if !xmin.is_finite() {
        xmin = 0.0;
        xmax = 1.0;
        ymin = 0.0;
        ymax = 1.0;
    }
    if (xmax - xmin).abs() < 1e-12 {
        xmax = xmin + 1.0;
    }
    if (ymax - ymin).abs() < 1e-12 {
        ymax = ymin + 0.01;
    }
    let px = |x: f64| MARGIN + (x - xmin) / (xmax - xmin) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - ymin) / (ymax - ymin) * (H - 2.0 * MARGIN);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\">model size (bytes)</text>\n",
        W / 2.0,
        H - 15.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">accuracy</text>\n",
        H / 2.0,
        H / 2.0
    ));
    // Axis extremes.
    for (v, x, y, anchor) in [
        (xmin, px(xmin), H - MARGIN + 18.0, "middle"),
        (xmax, px(xmax), H - MARGIN + 18.0, "middle"),
    ] {
        svg.push_str(&format!(
            "<text x=\"{x:.1}\" y=\"{y:.1}\" font-size=\"11\" text-anchor=\"{anchor}\">{v:.0}</text>\n"
        ));
    }
    for v in [ymin, ymax] {
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"end\">{:.3}</text>\n",
            MARGIN - 6.0,
            py(v) + 4.0,
            v
        ));
    }

    // Non-dominated front polyline, sorted by size.
    let mut front: Vec<&ParetoRecord> = rs.iter().filter(|r| !r.dominated).collect();
    front.sort_by(|a, b| a.params_bytes.total_cmp(&b.params_bytes));
    if front.len() > 1 {
        let pts: Vec<String> = front
            .iter()
            .map(|r| format!("{:.1},{:.1}", px(r.params_bytes), py(r.accuracy)))
            .collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\"/>\n",
            pts.join(" ")
        ));
    }
    for r in &rs {
        let (fill, radius) = if r.dominated { ("#9ecae1", 4.0) } else { ("#d62728", 5.0) };
        svg.push_str(&format!(
            "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"{}\" fill=\"{}\"><title>lambda={:e} acc={:.4} bytes={:.0}</title></circle>\n",
            px(r.params_bytes),
            py(r.accuracy),
            radius,
            fill,
            r.lambda,
            r.accuracy,
            r.params_bytes
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn write_svg(records: &[ParetoRecord], path: &Path) -> Result<()> {
    std::fs::write(path, render_svg(records))?;
    Ok(())
}
