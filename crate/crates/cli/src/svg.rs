//! Minimal SVG writers for correlation heatmaps and track overlays.

use std::fmt::Write;

use m2p_core::data::{Image, TrackSet};
use m2p_core::matching::CorrelationMap;

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c if c.is_control() && c != '\n' && c != '\t' => {}
            c => out.push(c),
        }
    }
    out
}

fn rgb(c: [f64; 3]) -> String {
    let b = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{:02x}{:02x}{:02x}", b(c[0]), b(c[1]), b(c[2]))
}

/// Blue-to-yellow ramp for `t` in [0, 1].
fn ramp(t: f64) -> [f64; 3] {
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    [t, 0.2 + 0.7 * t, 1.0 - t]
}

/// Image as cell-sized rectangles averaged over `cell x cell` blocks.
fn frame_cells(out: &mut String, img: &Image, cell: usize, ox: f64, oy: f64, scale: f64) {
    let cell = cell.max(1);
    for cy in 0..img.height.div_ceil(cell) {
        for cx in 0..img.width.div_ceil(cell) {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for y in cy * cell..((cy + 1) * cell).min(img.height) {
                for x in cx * cell..((cx + 1) * cell).min(img.width) {
                    let p = img.pixel(x, y);
                    for k in 0..3 {
                        acc[k] += p[k];
                    }
                    n += 1.0;
                }
            }
            let s = cell as f64 * scale;
            let _ = write!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{s:.2}" height="{s:.2}" fill="{}"/>"#,
                ox + cx as f64 * s,
                oy + cy as f64 * s,
                rgb(acc.map(|v| v / n))
            );
        }
    }
    out.push('\n');
}

fn marker(out: &mut String, x: f64, y: f64, r: f64, color: &str) {
    let _ = writeln!(
        out,
        r#"<circle cx="{x:.2}" cy="{y:.2}" r="{r:.2}" fill="none" stroke="{color}" stroke-width="1.5"/>"#
    );
}

pub struct HeatmapPanel<'a> {
    pub frame: usize,
    pub map: &'a CorrelationMap,
    /// Predicted and ground-truth positions in grid cells.
    pub predicted: Option<(f64, f64)>,
    pub ground_truth: Option<(f64, f64)>,
}

/// Row of per-frame response maps for one query.
pub fn heatmaps(title: &str, panels: &[HeatmapPanel<'_>], cell_px: f64) -> String {
    let (w, h) = panels
        .first()
        .map_or((0, 0), |p| (p.map.width, p.map.height));
    let pw = w as f64 * cell_px;
    let ph = h as f64 * cell_px;
    let gap = 8.0;
    let total_w = (panels.len() as f64 * (pw + gap) + gap).max(1.0);
    let total_h = ph + 40.0;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total_w:.0}" height="{total_h:.0}" viewBox="0 0 {total_w:.0} {total_h:.0}">"#
    );
    out.push('\n');
    let _ = writeln!(
        out,
        r#"<text x="{gap}" y="14" font-family="monospace" font-size="12">{}</text>"#,
        escape(title)
    );
    for (i, p) in panels.iter().enumerate() {
        let ox = gap + i as f64 * (pw + gap);
        let oy = 32.0;
        let (lo, hi) = p
            .map
            .values
            .iter()
            .filter(|v| v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
                (a.min(v), b.max(v))
            });
        let range = if hi > lo { hi - lo } else { 1.0 };
        let _ = writeln!(
            out,
            r#"<text x="{ox:.2}" y="28" font-family="monospace" font-size="10">t={}</text>"#,
            p.frame
        );
        for y in 0..p.map.height {
            for x in 0..p.map.width {
                let v = p.map.values[y * p.map.width + x];
                let _ = write!(
                    out,
                    r#"<rect x="{:.2}" y="{:.2}" width="{cell_px:.2}" height="{cell_px:.2}" fill="{}"/>"#,
                    ox + x as f64 * cell_px,
                    oy + y as f64 * cell_px,
                    rgb(ramp((v - lo) / range))
                );
            }
        }
        out.push('\n');
        let to_px = |(gx, gy): (f64, f64)| (ox + (gx + 0.5) * cell_px, oy + (gy + 0.5) * cell_px);
        if let Some(g) = p.ground_truth {
            let (x, y) = to_px(g);
            marker(&mut out, x, y, cell_px * 0.9, "#00c000");
        }
        if let Some(q) = p.predicted {
            let (x, y) = to_px(q);
            marker(&mut out, x, y, cell_px * 0.6, "#ff2020");
        }
    }
    out.push_str("</svg>\n");
    out
}

fn polyline(out: &mut String, pts: &[(f64, f64)], color: &str, dashed: bool) {
    if pts.is_empty() {
        return;
    }
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = if dashed {
        r#" stroke-dasharray="3,2""#
    } else {
        ""
    };
    let _ = writeln!(
        out,
        r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.2"{dash}/>"#,
        coords.join(" ")
    );
}

/// Predicted (solid red) against ground-truth (dashed green) tracks over a
/// block-averaged rendering of the first frame. Tracks are matched by index;
/// ground-truth points are drawn only where visible.
pub fn track_overlay(
    title: &str,
    frame: &Image,
    predicted: &TrackSet,
    gt: Option<&TrackSet>,
    scale: f64,
) -> String {
    let w = frame.width as f64 * scale;
    let h = frame.height as f64 * scale + 20.0;
    let mut out = format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#
    );
    out.push('\n');
    let _ = writeln!(
        out,
        r#"<text x="2" y="14" font-family="monospace" font-size="12">{}</text>"#,
        escape(title)
    );
    let oy = 20.0;
    frame_cells(&mut out, frame, 2, 0.0, oy, scale);
    let to_px = |x: f64, y: f64| ((x + 0.5) * scale, oy + (y + 0.5) * scale);
    if let Some(gt) = gt {
        for t in &gt.tracks {
            let pts: Vec<(f64, f64)> = t
                .points
                .iter()
                .filter(|p| p.visible)
                .map(|p| to_px(p.x, p.y))
                .collect();
            polyline(&mut out, &pts, "#00c000", true);
        }
    }
    for t in &predicted.tracks {
        let pts: Vec<(f64, f64)> = t
            .points
            .iter()
            .filter(|p| p.x.is_finite() && p.y.is_finite())
            .map(|p| to_px(p.x, p.y))
            .collect();
        polyline(&mut out, &pts, "#ff2020", false);
        if let Some(&(x, y)) = pts.first() {
            marker(&mut out, x, y, 2.5, "#ff2020");
        }
    }
    out.push_str("</svg>\n");
    out
}
