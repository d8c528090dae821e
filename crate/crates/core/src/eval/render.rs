use std::fmt::Write;
use std::fs;
use std::path::Path;

use super::{ErrorBreakdown, ErrorType};
use crate::error::{HceError, Result};

const COLORS: [&str; 5] = ["#4c9a2a", "#f2b134", "#d9534f", "#8e6bbf", "#5b8fd1"];

/// One row per bar: the per-category bars with at least one bucketed
/// prediction, then the macro average labelled `all`.
fn bars(b: &ErrorBreakdown, names: &dyn Fn(usize) -> String) -> Vec<(String, usize, [f64; 5])> {
    let mut out: Vec<(String, usize, [f64; 5])> = b
        .categories
        .iter()
        .filter(|c| c.n > 0)
        .filter_map(|c| c.percentages().map(|p| (names(c.category), c.used, p)))
        .collect();
    if let Some(p) = b.macro_average() {
        let used = b.categories.iter().filter(|c| c.n > 0).map(|c| c.used).sum();
        out.push(("all".to_string(), used, p));
    }
    out
}

pub fn render_csv(b: &ErrorBreakdown, names: &dyn Fn(usize) -> String) -> String {
    let mut s = String::from("category,n_used");
    for t in ErrorType::ALL {
        s.push(',');
        s.push_str(t.name());
    }
    s.push('\n');
    for (name, used, p) in bars(b, names) {
        write!(s, "{name},{used}").expect("string write");
        for v in p {
            write!(s, ",{v:.4}").expect("string write");
        }
        s.push('\n');
    }
    s
}

pub fn render_svg(b: &ErrorBreakdown, names: &dyn Fn(usize) -> String) -> String {
    let rows = bars(b, names);
    let (bar_w, gap, plot_h, left, top) = (36.0, 14.0, 240.0, 48.0, 20.0);
    let width = left + rows.len() as f64 * (bar_w + gap) + 150.0;
    let height = top + plot_h + 70.0;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="10">"#
    )
    .expect("string write");
    for k in 0..=4 {
        let y = top + plot_h * (1.0 - k as f64 / 4.0);
        writeln!(s, r##"<line x1="{left}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, width - 150.0).expect("string write");
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}%</text>"#, left - 4.0, y + 3.0, k * 25).expect("string write");
    }
    for (i, (name, _, p)) in rows.iter().enumerate() {
        let x = left + gap / 2.0 + i as f64 * (bar_w + gap);
        let mut y = top + plot_h;
        for (k, v) in p.iter().enumerate() {
            let h = plot_h * v / 100.0;
            y -= h;
            writeln!(s, r#"<rect x="{x:.1}" y="{y:.2}" width="{bar_w}" height="{h:.2}" fill="{}"/>"#, COLORS[k]).expect("string write");
        }
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{name}</text>"#,
            x + bar_w / 2.0,
            top + plot_h + 14.0
        )
        .expect("string write");
    }
    let lx = width - 130.0;
    for (k, t) in ErrorType::ALL.iter().enumerate() {
        let y = top + 10.0 + 16.0 * k as f64;
        writeln!(s, r#"<rect x="{lx:.1}" y="{y:.1}" width="10" height="10" fill="{}"/>"#, COLORS[k]).expect("string write");
        writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 14.0, y + 9.0, t.name()).expect("string write");
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `breakdown.csv` and `breakdown.svg` into `dir`.
pub fn render_breakdown(b: &ErrorBreakdown, names: &dyn Fn(usize) -> String, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| HceError::io(dir, e))?;
    let csv = dir.join("breakdown.csv");
    fs::write(&csv, render_csv(b, names)).map_err(|e| HceError::io(&csv, e))?;
    let svg = dir.join("breakdown.svg");
    fs::write(&svg, render_svg(b, names)).map_err(|e| HceError::io(&svg, e))
}
