//! SVG line charts regenerated from a metrics CSV: one panel per column,
//! all sharing the first column as x axis.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

const PANEL_W: f64 = 320.0;
const PANEL_H: f64 = 200.0;
const MARGIN: f64 = 44.0;
const COLUMNS: usize = 3;

/// Numeric columns of a CSV file. Cells that do not parse become NaN.
pub fn read_series(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if !path.exists() {
        return Err(Error::DataMissing(format!("csv {}", path.display())));
    }
    let mut r = csv::Reader::from_path(path)?;
    let headers: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut cols = vec![Vec::new(); headers.len()];
    for rec in r.records() {
        let rec = rec?;
        for (c, cell) in cols.iter_mut().zip(rec.iter()) {
            c.push(cell.parse().unwrap_or(f64::NAN));
        }
    }
    Ok((headers, cols))
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 || (1e-3..1e4).contains(&v.abs()) {
        format!("{:.4}", v).trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn extent(v: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = v.filter(|x| x.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    if lo > hi {
        return None;
    }
    Some(if lo == hi { (lo - 0.5, hi + 0.5) } else { (lo, hi) })
}

/// Renders every column except the first (and a redundant `epoch` column
/// next to `step`) against the first column.
pub fn render_svg(headers: &[String], cols: &[Vec<f64>]) -> String {
    let x = &cols[0];
    let panels: Vec<usize> = (1..headers.len()).filter(|&i| !(headers[0] == "step" && headers[i] == "epoch")).collect();
    let rows = panels.len().div_ceil(COLUMNS).max(1);
    let (w, h) = (COLUMNS as f64 * PANEL_W, rows as f64 * PANEL_H);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="10">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (k, &col) in panels.iter().enumerate() {
        let (ox, oy) = ((k % COLUMNS) as f64 * PANEL_W, (k / COLUMNS) as f64 * PANEL_H);
        let (x0, y0) = (ox + MARGIN, oy + 20.0);
        let (pw, ph) = (PANEL_W - MARGIN - 12.0, PANEL_H - 20.0 - 30.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-weight="bold">{}</text>"#, x0 + pw / 2.0, oy + 13.0, headers[col]);
        let _ = writeln!(s, r##"<rect x="{x0}" y="{y0}" width="{pw}" height="{ph}" fill="none" stroke="#888"/>"##);
        let pts: Vec<(f64, f64)> = x.iter().zip(&cols[col]).map(|(&a, &b)| (a, b)).filter(|(a, b)| a.is_finite() && b.is_finite()).collect();
        let (Some((xl, xh)), Some((yl, yh))) = (extent(pts.iter().map(|p| p.0)), extent(pts.iter().map(|p| p.1))) else {
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no data</text>"#, x0 + pw / 2.0, y0 + ph / 2.0);
            continue;
        };
        let px = |v: f64| x0 + (v - xl) / (xh - xl) * pw;
        let py = |v: f64| y0 + ph - (v - yl) / (yh - yl) * ph;
        let line: Vec<String> = pts.iter().map(|&(a, b)| format!("{:.2},{:.2}", px(a), py(b))).collect();
        let _ = writeln!(s, r##"<polyline fill="none" stroke="#1f77b4" stroke-width="1.5" points="{}"/>"##, line.join(" "));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 3.0, y0 + 8.0, fmt_tick(yh));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 - 3.0, y0 + ph, fmt_tick(yl));
        let _ = writeln!(s, r#"<text x="{x0}" y="{}">{}</text>"#, y0 + ph + 12.0, fmt_tick(xl));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, x0 + pw, y0 + ph + 12.0, fmt_tick(xh));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, x0 + pw / 2.0, y0 + ph + 24.0, headers[0]);
    }
    s.push_str("</svg>\n");
    s
}

pub fn plot_csv(csv_path: &Path, svg_path: &Path) -> Result<()> {
    let (headers, cols) = read_series(csv_path)?;
    if headers.len() < 2 {
        return Err(Error::DataMissing(format!("{} has fewer than two columns", csv_path.display())));
    }
    std::fs::write(svg_path, render_svg(&headers, &cols)).map_err(|e| Error::io(svg_path, e))
}
