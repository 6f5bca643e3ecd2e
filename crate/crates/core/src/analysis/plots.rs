//! Minimal deterministic SVG charts. Coordinates are printed to three
//! decimals so identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::records::{read_records_csv, TokenRecord};
use super::stats::{aggregate_by, correlate, layer_chunk_matrix, GroupKey, XField};
use crate::error::{Error, Result};

const W: f64 = 480.0;
const H: f64 = 320.0;
const MARGIN: f64 = 48.0;

/// Name of the token record table inside an analysis directory.
pub const RECORDS_FILE: &str = "token_records.csv";

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{:.3}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title))
        .unwrap();
    writeln!(s, r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">{}</text>"#, W / 2.0, H - 8.0, escape(xlabel))
        .unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{:.3}" text-anchor="middle" transform="rotate(-90 14 {:.3})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    )
    .unwrap();
    s
}

fn axes(s: &mut String, x: (f64, f64), y: (f64, f64)) {
    let (x0, y0, x1, y1) = (MARGIN, H - MARGIN, W - MARGIN / 2.0, MARGIN);
    writeln!(s, r#"<path d="M{x0:.3} {y1:.3}V{y0:.3}H{x1:.3}" fill="none" stroke="black"/>"#).unwrap();
    writeln!(s, r#"<text x="{x0:.3}" y="{:.3}" text-anchor="middle">{:.3}</text>"#, y0 + 14.0, x.0).unwrap();
    writeln!(s, r#"<text x="{x1:.3}" y="{:.3}" text-anchor="middle">{:.3}</text>"#, y0 + 14.0, x.1).unwrap();
    writeln!(s, r#"<text x="{:.3}" y="{y0:.3}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y.0).unwrap();
    writeln!(s, r#"<text x="{:.3}" y="{y1:.3}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, y.1).unwrap();
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) =
        values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn scale(v: f64, (lo, hi): (f64, f64), a: f64, b: f64) -> f64 {
    a + (v - lo) / (hi - lo) * (b - a)
}

/// Scatter of `points` with optional overlay line (e.g. bin means).
pub fn scatter_svg(points: &[(f64, f64)], overlay: &[(f64, f64)], title: &str, xlabel: &str, ylabel: &str) -> String {
    let xr = range(points.iter().chain(overlay).map(|p| p.0));
    let yr = range(points.iter().chain(overlay).map(|p| p.1));
    let mut s = header(title, xlabel, ylabel);
    axes(&mut s, xr, yr);
    let px = |x| scale(x, xr, MARGIN, W - MARGIN / 2.0);
    let py = |y| scale(y, yr, H - MARGIN, MARGIN);
    for &(x, y) in points {
        writeln!(s, r##"<circle cx="{:.3}" cy="{:.3}" r="1.5" fill="#4477aa" fill-opacity="0.4"/>"##, px(x), py(y))
            .unwrap();
    }
    if !overlay.is_empty() {
        let mut d = String::new();
        for (i, &(x, y)) in overlay.iter().enumerate() {
            write!(d, "{}{:.3} {:.3}", if i == 0 { "M" } else { "L" }, px(x), py(y)).unwrap();
        }
        writeln!(s, r##"<path d="{d}" fill="none" stroke="#cc3311" stroke-width="2"/>"##).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Heatmap of `matrix[row][col]` over `[0,1]`; non-finite cells are grey.
pub fn heatmap_svg(matrix: &[Vec<f64>], title: &str, xlabel: &str, ylabel: &str) -> String {
    let rows = matrix.len().max(1);
    let cols = matrix.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let mut s = header(title, xlabel, ylabel);
    axes(&mut s, (0.0, cols as f64), (0.0, rows as f64));
    let cw = (W - 1.5 * MARGIN) / cols as f64;
    let ch = (H - 2.0 * MARGIN) / rows as f64;
    for (r, row) in matrix.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let fill = if v.is_finite() {
                let t = v.clamp(0.0, 1.0);
                let g = (255.0 * (1.0 - t)).round() as u8;
                format!("#{g:02x}{g:02x}ff")
            } else {
                "#bbbbbb".to_string()
            };
            writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{cw:.3}" height="{ch:.3}" fill="{fill}"><title>{v:.4}</title></rect>"#,
                MARGIN + c as f64 * cw,
                H - MARGIN - (r + 1) as f64 * ch
            )
            .unwrap();
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars, one per label.
pub fn bars_svg(bars: &[(String, f64)], title: &str, ylabel: &str) -> String {
    let hi = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).fold(0.0, f64::max);
    let yr = (0.0, if hi > 0.0 { hi } else { 1.0 });
    let mut s = header(title, "", ylabel);
    axes(&mut s, (0.0, bars.len() as f64), yr);
    let slot = (W - 1.5 * MARGIN) / bars.len().max(1) as f64;
    for (i, (label, v)) in bars.iter().enumerate() {
        let top = scale(v.max(0.0), yr, H - MARGIN, MARGIN);
        let x = MARGIN + i as f64 * slot + slot * 0.15;
        writeln!(
            s,
            r##"<rect x="{x:.3}" y="{top:.3}" width="{:.3}" height="{:.3}" fill="#228833"/>"##,
            slot * 0.7,
            H - MARGIN - top
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">{}</text>"#,
            x + slot * 0.35,
            H - MARGIN + 26.0,
            escape(label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Renders the standard figures for `records` into `out_dir`.
pub fn render_plots(records: &[TokenRecord], chunk_size: usize, bins: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<()> {
        let p = out_dir.join(name);
        fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    for x in [XField::Entropy, XField::DeltaLogp] {
        let points: Vec<(f64, f64)> = records.iter().map(|r| (x.get(r), r.r_ze_mean)).collect();
        let overlay: Vec<(f64, f64)> = match correlate(records, x, bins) {
            Ok(c) => c.bins.iter().map(|b| (b.x_mean, b.y_mean)).collect(),
            Err(Error::Input(_)) => Vec::new(),
            Err(e) => return Err(e),
        };
        let body = scatter_svg(&points, &overlay, &format!("r_ze vs {}", x.as_str()), x.as_str(), "r_ze");
        put(&format!("scatter_{}.svg", x.as_str()), body)?;
    }
    let matrix = layer_chunk_matrix(records, chunk_size)?;
    put("heatmap_layer_chunk.svg", heatmap_svg(&matrix, "r_ze by layer and position chunk", "chunk", "layer"))?;
    for key in [GroupKey::SpanTag, GroupKey::Layer] {
        let groups = aggregate_by(records, key)?;
        let bars: Vec<(String, f64)> = groups.into_iter().map(|g| (g.key, g.r_ze)).collect();
        let name = if key == GroupKey::SpanTag { "span_tag" } else { "layer" };
        put(&format!("bars_{name}.svg"), bars_svg(&bars, &format!("r_ze by {name}"), "r_ze"))?;
    }
    Ok(written)
}

/// Reads the analysis tables in `in_dir` and renders every figure.
pub fn emit_plots(in_dir: &Path, out_dir: &Path, chunk_size: usize, bins: usize) -> Result<Vec<PathBuf>> {
    let missing: Vec<String> = [RECORDS_FILE]
        .iter()
        .map(|f| in_dir.join(f))
        .filter(|p| !p.is_file())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::input(format!("missing analysis inputs: {}", missing.join(", "))));
    }
    let records = read_records_csv(fs::File::open(in_dir.join(RECORDS_FILE))?)?;
    if records.is_empty() {
        return Err(Error::input("token record table is empty"));
    }
    render_plots(&records, chunk_size, bins, out_dir)
}
