//! Deterministic SVG scatter plots of planar samples.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradcore::Array;

pub const AXIS_LIMIT: f64 = 8.0;
const SIZE: f64 = 480.0;
const MARGIN: f64 = 40.0;
const LEGEND_WIDTH: f64 = 120.0;

const PALETTE: &[&str] = &[
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
    "#17becf",
];

/// One labelled point cloud.
#[derive(Clone, Debug)]
pub struct Series<'a> {
    pub label: String,
    pub points: &'a Array,
}

fn to_px(v: f64, flip: bool) -> f64 {
    let unit = (v.clamp(-AXIS_LIMIT, AXIS_LIMIT) + AXIS_LIMIT) / (2.0 * AXIS_LIMIT);
    let unit = if flip { 1.0 - unit } else { unit };
    MARGIN + unit * SIZE
}

/// SVG text for the series on fixed `[-8, 8]^2` axes. Points outside the
/// window are pinned to its border.
pub fn scatter_svg(series: &[Series<'_>], title: &str) -> Result<String> {
    for s in series {
        if s.points.rows() > 0 && s.points.cols() != 2 {
            return Err(Error::UnsupportedDimension(s.points.cols()));
        }
    }
    let width = SIZE + 2.0 * MARGIN + LEGEND_WIDTH;
    let height = SIZE + 2.0 * MARGIN;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(out, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        MARGIN + SIZE / 2.0,
        MARGIN / 2.0 + 5.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{SIZE}" height="{SIZE}" fill="none" stroke="black"/>"#
    );
    let ticks = [-AXIS_LIMIT, -AXIS_LIMIT / 2.0, 0.0, AXIS_LIMIT / 2.0, AXIS_LIMIT];
    for v in ticks {
        let (x, y) = (to_px(v, false), to_px(v, true));
        let _ = writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{MARGIN}" x2="{x:.2}" y2="{}" stroke="#dddddd"/>"##,
            MARGIN + SIZE
        );
        let _ = writeln!(
            out,
            r##"<line x1="{MARGIN}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#dddddd"/>"##,
            MARGIN + SIZE
        );
        let _ = writeln!(
            out,
            r#"<text x="{x:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{v}</text>"#,
            MARGIN + SIZE + 14.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{v}</text>"#,
            MARGIN - 4.0,
            y + 3.0
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(out, r#"<g fill="{color}" fill-opacity="0.6">"#);
        for r in 0..s.points.rows() {
            let p = s.points.row(r);
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2"/>"#,
                to_px(p[0], false),
                to_px(p[1], true)
            );
        }
        out.push_str("</g>\n");
    }
    let lx = MARGIN + SIZE + 16.0;
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN + 10.0 + 20.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<g class="legend"><circle cx="{lx}" cy="{y}" r="5" fill="{}"/><text x="{}" y="{}" font-family="sans-serif" font-size="12">{}</text></g>"#,
            PALETTE[i % PALETTE.len()],
            lx + 10.0,
            y + 4.0,
            escape(&s.label)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Writes [`scatter_svg`] output to `path`.
pub fn render_scatter(series: &[Series<'_>], title: &str, path: &Path) -> Result<()> {
    let svg = scatter_svg(series, title)?;
    fs::write(path, svg)?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
