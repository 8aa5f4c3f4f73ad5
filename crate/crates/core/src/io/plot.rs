//! Minimal deterministic SVG scatter plots.

use std::fmt::Write as _;

pub const WIDTH: f64 = 480.0;
pub const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 52.0;

/// Colors cycled over groups.
pub const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: String,
    pub radius: f64,
    /// Fill opacity.
    pub opacity: f64,
}

/// Data-to-pixel mapping shared by every series of one plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Frame {
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if !(lo.is_finite() && hi.is_finite()) {
        return (0.0, 1.0);
    }
    if hi > lo {
        let pad = 0.04 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

impl Frame {
    /// Smallest frame holding every finite point, padded by 4% per side.
    pub fn fit(series: &[Series]) -> Self {
        let pts = || series.iter().flat_map(|s| s.points.iter()).filter(|p| p.0.is_finite() && p.1.is_finite());
        let fold = |f: fn(&(f64, f64)) -> f64| {
            pts().map(f).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (x0, x1) = fold(|p| p.0);
        let (y0, y1) = fold(|p| p.1);
        Self { x_range: padded(x0, x1), y_range: padded(y0, y1) }
    }

    pub fn to_pixel(&self, (x, y): (f64, f64)) -> (f64, f64) {
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let px = MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
        let py = HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
        (px, py)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-2..1e4).contains(&a) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// One scatter plot with axes, five ticks per axis and a legend.
pub fn scatter(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title));
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" fill="none" stroke="black"/>"#
    );
    for k in 0..5 {
        let f = k as f64 / 4.0;
        let xv = frame.x_range.0 + f * (frame.x_range.1 - frame.x_range.0);
        let yv = frame.y_range.0 + f * (frame.y_range.1 - frame.y_range.0);
        let (px, _) = frame.to_pixel((xv, frame.y_range.0));
        let (_, py) = frame.to_pixel((frame.x_range.0, yv));
        let _ = writeln!(s, r#"<text x="{px:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, bottom + 15.0, tick(xv));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{py:.2}" text-anchor="end">{}</text>"#, left - 4.0, tick(yv));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (k, ser) in series.iter().enumerate() {
        let _ = writeln!(s, r#"<g fill="{}" fill-opacity="{}">"#, ser.color, ser.opacity);
        for &p in ser.points.iter().filter(|p| p.0.is_finite() && p.1.is_finite()) {
            let (px, py) = frame.to_pixel(p);
            let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="{}"/>"#, ser.radius);
        }
        let _ = writeln!(s, "</g>");
        let ly = top + 14.0 * k as f64;
        let _ = writeln!(s, r#"<circle cx="{}" cy="{}" r="4" fill="{}"/>"#, right - 90.0, ly - 4.0, ser.color);
        let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, right - 82.0, escape(&ser.name));
    }
    s.push_str("</svg>\n");
    s
}

/// Split points into one series per group label, in order of first appearance.
pub fn grouped(points: &[(f64, f64)], groups: Option<&[String]>, radius: f64, opacity: f64) -> Vec<Series> {
    let Some(groups) = groups else {
        return vec![Series { name: "cells".into(), points: points.to_vec(), color: PALETTE[0].into(), radius, opacity }];
    };
    let mut names: Vec<&String> = Vec::new();
    for g in groups {
        if !names.contains(&g) {
            names.push(g);
        }
    }
    names
        .iter()
        .enumerate()
        .map(|(k, name)| Series {
            name: (*name).clone(),
            points: points.iter().zip(groups).filter(|(_, g)| g == name).map(|(p, _)| *p).collect(),
            color: PALETTE[k % PALETTE.len()].into(),
            radius,
            opacity,
        })
        .collect()
}
