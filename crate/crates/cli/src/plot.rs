//! Static SVG figures written directly, no plotting dependency.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Result;

use crate::formats::atomic_write;

pub const COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// A fixed-viewport 2D canvas mapping data coordinates to pixels.
pub struct SvgPlot {
    width: f64,
    height: f64,
    margin: f64,
    x_range: (f64, f64),
    y_range: (f64, f64),
    body: String,
}

impl SvgPlot {
    pub fn new(title: &str, x_range: (f64, f64), y_range: (f64, f64)) -> SvgPlot {
        let mut plot = SvgPlot {
            width: 640.0,
            height: 480.0,
            margin: 40.0,
            x_range,
            y_range,
            body: String::new(),
        };
        let _ = write!(
            plot.body,
            r##"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"##,
            plot.width, plot.height
        );
        let _ = write!(
            plot.body,
            r##"<text x="{}" y="20" text-anchor="middle" font-family="monospace" font-size="14">{}</text>"##,
            plot.width / 2.0,
            title
        );
        plot.axes();
        plot
    }

    fn x(&self, v: f64) -> f64 {
        let (a, b) = self.x_range;
        self.margin + (v - a) / (b - a) * (self.width - 2.0 * self.margin)
    }

    fn y(&self, v: f64) -> f64 {
        let (a, b) = self.y_range;
        self.height - self.margin - (v - a) / (b - a) * (self.height - 2.0 * self.margin)
    }

    fn axes(&mut self) {
        let (x0, x1) = (self.margin, self.width - self.margin);
        let (y0, y1) = (self.height - self.margin, self.margin);
        let _ = write!(
            self.body,
            r##"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="#888"/>"##,
            x1 - x0,
            y0 - y1
        );
        for (v, label_axis) in [(self.x_range, true), (self.y_range, false)] {
            for k in 0..=4 {
                let t = v.0 + (v.1 - v.0) * k as f64 / 4.0;
                let label = format!("{t:.2}");
                if label_axis {
                    let px = self.x(t);
                    let _ = write!(
                        self.body,
                        r##"<text x="{px}" y="{}" text-anchor="middle" font-family="monospace" font-size="10" fill="#555">{label}</text>"##,
                        self.height - self.margin + 14.0
                    );
                } else {
                    let py = self.y(t);
                    let _ = write!(
                        self.body,
                        r##"<text x="{}" y="{py}" text-anchor="end" font-family="monospace" font-size="10" fill="#555">{label}</text>"##,
                        self.margin - 6.0
                    );
                }
            }
        }
    }

    pub fn polyline(&mut self, points: &[[f64; 2]], color: &str, width: f64, opacity: f64) {
        if points.len() < 2 {
            return;
        }
        let mut d = String::new();
        for (i, p) in points.iter().enumerate() {
            let cmd = if i == 0 { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{:.2} {:.2} ", self.x(p[0]), self.y(p[1]));
        }
        let _ = write!(
            self.body,
            r##"<path d="{d}" fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="{opacity}"/>"##
        );
    }

    pub fn scatter(&mut self, points: &[[f64; 2]], color: &str, radius: f64, opacity: f64) {
        for p in points {
            let _ = write!(
                self.body,
                r##"<circle cx="{:.2}" cy="{:.2}" r="{radius}" fill="{color}" fill-opacity="{opacity}"/>"##,
                self.x(p[0]),
                self.y(p[1])
            );
        }
    }

    pub fn marker(&mut self, p: [f64; 2], color: &str, label: &str) {
        let (px, py) = (self.x(p[0]), self.y(p[1]));
        let _ = write!(
            self.body,
            r##"<rect x="{:.2}" y="{:.2}" width="8" height="8" fill="{color}" stroke="black"/>"##,
            px - 4.0,
            py - 4.0
        );
        let _ = write!(
            self.body,
            r##"<text x="{:.2}" y="{:.2}" font-family="monospace" font-size="11">{label}</text>"##,
            px + 6.0,
            py - 6.0
        );
    }

    pub fn legend(&mut self, entries: &[(&str, &str)]) {
        for (i, (label, color)) in entries.iter().enumerate() {
            let y = self.margin + 16.0 * i as f64 + 10.0;
            let x = self.width - self.margin - 150.0;
            let _ = write!(
                self.body,
                r##"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"##,
                y - 9.0
            );
            let _ = write!(
                self.body,
                r##"<text x="{}" y="{y}" font-family="monospace" font-size="11">{label}</text>"##,
                x + 14.0
            );
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let svg = format!(
            r##"<svg version="1.1" width="{}" height="{}" xmlns="http://www.w3.org/2000/svg">{}</svg>"##,
            self.width, self.height, self.body
        );
        atomic_write(path, svg.as_bytes())
    }
}

/// Data range covering all points with a small padding.
pub fn range_of(points: impl Iterator<Item = [f64; 2]>) -> ((f64, f64), (f64, f64)) {
    let mut x = (f64::INFINITY, f64::NEG_INFINITY);
    let mut y = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x.0 = x.0.min(p[0]);
        x.1 = x.1.max(p[0]);
        y.0 = y.0.min(p[1]);
        y.1 = y.1.max(p[1]);
    }
    if !x.0.is_finite() || x.0 == x.1 {
        x = (-1.0, 1.0);
    }
    if !y.0.is_finite() || y.0 == y.1 {
        y = (-1.0, 1.0);
    }
    let pad_x = 0.1 * (x.1 - x.0);
    let pad_y = 0.1 * (y.1 - y.0);
    ((x.0 - pad_x, x.1 + pad_x), (y.0 - pad_y, y.1 + pad_y))
}
