//! Minimal deterministic SVG output: kernel heat maps, scatter plots and line
//! charts. Numbers are printed with fixed precision so that identical inputs
//! give byte-identical documents.

use std::fmt::Write;

use crate::numerics::Matrix;

const PANEL: f64 = 220.0;
const MARGIN: f64 = 40.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// An SVG document under construction.
pub struct SvgDoc {
    width: f64,
    height: f64,
    body: String,
    timestamp: Option<String>,
}

impl SvgDoc {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
            timestamp: None,
        }
    }

    /// Records a generation time in the metadata; left out for reproducible output.
    pub fn with_timestamp(mut self, timestamp: Option<String>) -> Self {
        self.timestamp = timestamp;
        self
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="{fill}"/>"#
        );
    }

    pub fn outline(&mut self, x: f64, y: f64, w: f64, h: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{x:.2}" y="{y:.2}" width="{w:.2}" height="{h:.2}" fill="none" stroke="{stroke}" stroke-width="1"/>"#
        );
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="{r:.2}" fill="{fill}" fill-opacity="0.6"/>"#
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) {
        let _ = writeln!(
            self.body,
            r#"<line x1="{x1:.2}" y1="{y1:.2}" x2="{x2:.2}" y2="{y2:.2}" stroke="{stroke}" stroke-width="1"/>"#
        );
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], stroke: &str) {
        let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#,
            pts.join(" ")
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, content: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{x:.2}" y="{y:.2}" font-family="sans-serif" font-size="{size:.1}" text-anchor="{anchor}">{}</text>"#,
            escape(content)
        );
    }

    pub fn finish(self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}">"#,
            w = self.width,
            h = self.height
        );
        if let Some(ts) = &self.timestamp {
            let _ = writeln!(out, "<metadata>generated {}</metadata>", escape(ts));
        }
        let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
        out.push_str(&self.body);
        out.push_str("</svg>\n");
        out
    }
}

/// Diverging blue-white-red colour for `v` in `[-1, 1]`.
fn diverging(v: f64) -> String {
    let v = v.clamp(-1.0, 1.0);
    let (r, g, b) = if v >= 0.0 {
        (255.0, 255.0 * (1.0 - v), 255.0 * (1.0 - v))
    } else {
        (255.0 * (1.0 + v), 255.0 * (1.0 + v), 255.0)
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, b as u8)
}

const SERIES_COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Heat maps of square matrices side by side, each scaled by its own largest
/// absolute entry. `highlight` outlines an index range on every panel.
pub fn kernel_panels(
    panels: &[(&str, &Matrix)],
    highlight: Option<std::ops::Range<usize>>,
    timestamp: Option<String>,
) -> String {
    let width = MARGIN + panels.len() as f64 * (PANEL + MARGIN);
    let mut doc = SvgDoc::new(width, PANEL + 2.0 * MARGIN).with_timestamp(timestamp);
    for (p, (title, m)) in panels.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL + MARGIN);
        let y0 = MARGIN;
        doc.text(x0 + PANEL / 2.0, y0 - 10.0, 13.0, "middle", title);
        let n = m.rows().max(1);
        let cell = PANEL / n as f64;
        let scale = m.max_abs();
        for i in 0..m.rows() {
            for j in 0..m.cols().min(n) {
                let v = if scale > 0.0 { m[(i, j)] / scale } else { 0.0 };
                doc.rect(x0 + j as f64 * cell, y0 + i as f64 * cell, cell, cell, &diverging(v));
            }
        }
        doc.outline(x0, y0, PANEL, PANEL, "#333333");
        if let Some(r) = &highlight {
            let a = r.start as f64 * cell;
            let w = r.len() as f64 * cell;
            doc.outline(x0 + a, y0 + a, w, w, "#000000");
        }
    }
    doc.finish()
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn axes(doc: &mut SvgDoc, x0: f64, y0: f64, w: f64, h: f64, xlabel: &str, ylabel: &str) {
    doc.line(x0, y0 + h, x0 + w, y0 + h, "#333333");
    doc.line(x0, y0, x0, y0 + h, "#333333");
    doc.text(x0 + w / 2.0, y0 + h + 30.0, 12.0, "middle", xlabel);
    doc.text(x0 - 30.0, y0 + h / 2.0, 12.0, "middle", ylabel);
}

fn tick_label(doc: &mut SvgDoc, x: f64, y: f64, anchor: &str, v: f64) {
    doc.text(x, y, 10.0, anchor, &format!("{v:.3}"));
}

/// Scatter plot with a free-text annotation such as a correlation coefficient.
pub fn scatter(
    points: &[(f64, f64)],
    title: &str,
    labels: (&str, &str),
    annotation: &str,
    timestamp: Option<String>,
) -> String {
    let (w, h) = (360.0, 300.0);
    let (x0, y0) = (60.0, 40.0);
    let mut doc = SvgDoc::new(w + 100.0, h + 100.0).with_timestamp(timestamp);
    doc.text(x0 + w / 2.0, 20.0, 14.0, "middle", title);
    axes(&mut doc, x0, y0, w, h, labels.0, labels.1);
    let (xl, xh) = bounds(points.iter().map(|p| p.0));
    let (yl, yh) = bounds(points.iter().map(|p| p.1));
    tick_label(&mut doc, x0, y0 + h + 14.0, "start", xl);
    tick_label(&mut doc, x0 + w, y0 + h + 14.0, "end", xh);
    tick_label(&mut doc, x0 - 4.0, y0 + h, "end", yl);
    tick_label(&mut doc, x0 - 4.0, y0 + 10.0, "end", yh);
    for &(x, y) in points {
        let px = x0 + (x - xl) / (xh - xl) * w;
        let py = y0 + h - (y - yl) / (yh - yl) * h;
        doc.circle(px, py, 2.5, SERIES_COLOURS[0]);
    }
    doc.text(x0 + w - 4.0, y0 + 16.0, 12.0, "end", annotation);
    doc.finish()
}

/// One line per series over shared categorical x positions, with optional
/// symmetric error bars.
pub fn line_chart(
    title: &str,
    categories: &[String],
    series: &[(String, Vec<f64>, Vec<f64>)],
    ylabel: &str,
    timestamp: Option<String>,
) -> String {
    let (w, h) = (420.0, 280.0);
    let (x0, y0) = (70.0, 40.0);
    let mut doc = SvgDoc::new(w + 220.0, h + 100.0).with_timestamp(timestamp);
    doc.text(x0 + w / 2.0, 20.0, 14.0, "middle", title);
    axes(&mut doc, x0, y0, w, h, "", ylabel);
    let all = series.iter().flat_map(|(_, m, e)| {
        m.iter()
            .zip(e.iter().chain(std::iter::repeat(&0.0)))
            .flat_map(|(m, e)| [m - e, m + e])
            .collect::<Vec<_>>()
    });
    let (yl, yh) = bounds(all);
    tick_label(&mut doc, x0 - 4.0, y0 + h, "end", yl);
    tick_label(&mut doc, x0 - 4.0, y0 + 10.0, "end", yh);
    let nc = categories.len().max(1);
    let xpos = |i: usize| x0 + (i as f64 + 0.5) / nc as f64 * w;
    let ypos = |v: f64| y0 + h - (v - yl) / (yh - yl) * h;
    for (i, c) in categories.iter().enumerate() {
        doc.text(xpos(i), y0 + h + 14.0, 10.0, "middle", c);
    }
    for (s, (name, means, errs)) in series.iter().enumerate() {
        let colour = SERIES_COLOURS[s % SERIES_COLOURS.len()];
        let pts: Vec<(f64, f64)> = means
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(i, &v)| (xpos(i), ypos(v)))
            .collect();
        doc.polyline(&pts, colour);
        for (i, &m) in means.iter().enumerate() {
            if !m.is_finite() {
                continue;
            }
            doc.circle(xpos(i), ypos(m), 3.0, colour);
            if let Some(&e) = errs.get(i).filter(|e| e.is_finite() && **e > 0.0) {
                doc.line(xpos(i), ypos(m - e), xpos(i), ypos(m + e), colour);
            }
        }
        let ly = y0 + 14.0 + 18.0 * s as f64;
        doc.line(x0 + w + 15.0, ly - 4.0, x0 + w + 35.0, ly - 4.0, colour);
        doc.text(x0 + w + 40.0, ly, 11.0, "start", name);
    }
    doc.finish()
}
