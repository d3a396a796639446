//! Minimal self-contained SVG charts: a grid of panels, each with
//! polylines, markers, shaded ribbons and horizontal reference lines.

use std::fmt::Write as _;

const PANEL_WIDTH: f64 = 520.0;
const PANEL_HEIGHT: f64 = 320.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 150.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 48.0;

pub const PALETTE: [&str; 8] = [
    "#1b6ca8", "#d1495b", "#2e8b57", "#edae49", "#6a4c93", "#00798c", "#8d6e63", "#30343f",
];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub color: String,
    /// Draw the connecting polyline.
    pub line: bool,
    pub markers: bool,
    /// `(x, low, high)` band drawn under the series.
    pub ribbon: Option<Vec<(f64, f64, f64)>>,
}

impl Series {
    pub fn line(label: impl Into<String>, points: Vec<(f64, f64)>, color: &str) -> Self {
        Self {
            label: label.into(),
            points,
            color: color.into(),
            line: true,
            markers: true,
            ribbon: None,
        }
    }

    pub fn points(label: impl Into<String>, points: Vec<(f64, f64)>, color: &str) -> Self {
        Self {
            line: false,
            ..Self::line(label, points, color)
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefLine {
    pub y: f64,
    pub label: String,
    pub dashed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    pub ref_lines: Vec<RefLine>,
    /// Tick labels at integer x positions replace numeric ticks.
    pub x_categories: Option<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct Figure {
    pub title: String,
    pub panels: Vec<Panel>,
    pub columns: usize,
}

pub fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn num(x: f64) -> String {
    let r = (x * 100.0).round() / 100.0;
    if r == 0.0 {
        "0".into()
    } else {
        format!("{r}")
    }
}

/// Ticks at 1, 2 or 5 times a power of ten, at most 8 intervals apart;
/// `min_step` bounds the step from below.
fn nice_ticks(lo: f64, hi: f64, min_step: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 6.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .iter()
        .map(|m| m * mag)
        .find(|s| span / s <= 8.0)
        .unwrap_or(10.0 * mag)
        .max(min_step);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|k| k as f64 * step).collect()
}

fn tick_label(v: f64) -> String {
    let s = format!("{:.6}", v);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
    left: f64,
    top: f64,
    width: f64,
    height: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x0) / (self.x1 - self.x0) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + (self.y1 - y) / (self.y1 - self.y0) * self.height
    }
}

fn extent(panel: &Panel) -> (f64, f64, f64, f64) {
    let mut xs = Vec::new();
    let mut ys: Vec<f64> = panel.ref_lines.iter().map(|r| r.y).collect();
    for s in &panel.series {
        for &(x, y) in &s.points {
            xs.push(x);
            ys.push(y);
        }
        for &(x, lo, hi) in s.ribbon.iter().flatten() {
            xs.push(x);
            ys.push(lo);
            ys.push(hi);
        }
    }
    let finite = |v: &Vec<f64>| v.iter().cloned().filter(|x| x.is_finite()).collect::<Vec<_>>();
    let (xs, ys) = (finite(&xs), finite(&ys));
    let (mut x0, mut x1) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &x| (a.0.min(x), a.1.max(x)));
    let (mut y0, mut y1) = ys.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, &y| (a.0.min(y), a.1.max(y)));
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if !y0.is_finite() {
        (y0, y1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        (x0, x1) = (x0 - 0.5, x1 + 0.5);
    }
    if y1 - y0 < 1e-12 {
        (y0, y1) = (y0 - 0.5, y1 + 0.5);
    }
    let (px, py) = (0.04 * (x1 - x0), 0.08 * (y1 - y0));
    (x0 - px, x1 + px, y0 - py, y1 + py)
}

fn render_panel(out: &mut String, panel: &Panel, ox: f64, oy: f64) {
    let (x0, x1, y0, y1) = extent(panel);
    let f = Frame {
        x0,
        x1,
        y0,
        y1,
        left: ox + MARGIN_LEFT,
        top: oy + MARGIN_TOP,
        width: PANEL_WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
        height: PANEL_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM,
    };
    let _ = writeln!(
        out,
        r##"<rect x="{}" y="{}" width="{}" height="{}" fill="#ffffff" stroke="#999999" stroke-width="1"/>"##,
        num(f.left),
        num(f.top),
        num(f.width),
        num(f.height)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{}</text>"#,
        num(f.left + f.width / 2.0),
        num(oy + 22.0),
        escape(&panel.title)
    );
    for t in nice_ticks(y0, y1, 0.0) {
        let y = f.py(t);
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#eeeeee" stroke-width="1"/>"##,
            num(f.left),
            num(y),
            num(f.left + f.width),
            num(y)
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="11" text-anchor="end">{}</text>"#,
            num(f.left - 6.0),
            num(y + 4.0),
            tick_label(t)
        );
    }
    let bottom = f.top + f.height;
    match &panel.x_categories {
        Some(cats) => {
            for (k, c) in cats.iter().enumerate() {
                let x = f.px(k as f64);
                let lines: String = c
                    .split(' ')
                    .enumerate()
                    .map(|(i, w)| {
                        let dy = if i == 0 { "0" } else { "1.1em" };
                        format!(r#"<tspan x="{}" dy="{dy}">{}</tspan>"#, num(x), escape(w))
                    })
                    .collect();
                let _ = writeln!(
                    out,
                    r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{lines}</text>"#,
                    num(x),
                    num(bottom + 14.0)
                );
            }
        }
        None => {
            let integral = panel
                .series
                .iter()
                .flat_map(|s| s.points.iter())
                .all(|p| p.0.fract() == 0.0);
            for t in nice_ticks(x0, x1, if integral { 1.0 } else { 0.0 }) {
                let _ = writeln!(
                    out,
                    r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
                    num(f.px(t)),
                    num(bottom + 16.0),
                    tick_label(t)
                );
            }
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{}</text>"#,
        num(f.left + f.width / 2.0),
        num(bottom + 40.0),
        escape(&panel.x_label)
    );
    let (lx, ly) = (ox + 16.0, f.top + f.height / 2.0);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 {} {})">{}</text>"#,
        num(lx),
        num(ly),
        num(lx),
        num(ly),
        escape(&panel.y_label)
    );
    for r in &panel.ref_lines {
        let y = f.py(r.y);
        let dash = if r.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            out,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#555555" stroke-width="1"{}/>"##,
            num(f.left),
            num(y),
            num(f.left + f.width),
            num(y),
            dash
        );
        if !r.label.is_empty() {
            let _ = writeln!(
                out,
                r##"<text x="{}" y="{}" font-size="10" fill="#555555" text-anchor="end">{}</text>"##,
                num(f.left + f.width - 4.0),
                num(y - 3.0),
                escape(&r.label)
            );
        }
    }
    for s in &panel.series {
        if let Some(band) = &s.ribbon {
            let valid: Vec<_> = band.iter().filter(|b| b.1.is_finite() && b.2.is_finite()).collect();
            if valid.len() >= 2 {
                let mut pts: Vec<String> = valid.iter().map(|b| format!("{},{}", num(f.px(b.0)), num(f.py(b.2)))).collect();
                pts.extend(valid.iter().rev().map(|b| format!("{},{}", num(f.px(b.0)), num(f.py(b.1)))));
                let _ = writeln!(
                    out,
                    r#"<polygon points="{}" fill="{}" fill-opacity="0.18" stroke="none"/>"#,
                    pts.join(" "),
                    s.color
                );
            } else {
                for b in valid {
                    let x = f.px(b.0);
                    let _ = writeln!(
                        out,
                        r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{}" stroke-opacity="0.5" stroke-width="6"/>"#,
                        num(x),
                        num(f.py(b.1)),
                        num(x),
                        num(f.py(b.2)),
                        s.color
                    );
                }
            }
        }
        let pts: Vec<(f64, f64)> = s.points.iter().cloned().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
        if s.line && pts.len() >= 2 {
            let path: Vec<String> = pts.iter().map(|p| format!("{},{}", num(f.px(p.0)), num(f.py(p.1)))).collect();
            let _ = writeln!(
                out,
                r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
                path.join(" "),
                s.color
            );
        }
        if s.markers {
            for p in &pts {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{}" cy="{}" r="3" fill="{}"/>"#,
                    num(f.px(p.0)),
                    num(f.py(p.1)),
                    s.color
                );
            }
        }
    }
    for (k, s) in panel.series.iter().enumerate() {
        let y = f.top + 8.0 + 16.0 * k as f64;
        let x = f.left + f.width + 10.0;
        let _ = writeln!(
            out,
            r#"<rect x="{}" y="{}" width="10" height="10" fill="{}"/>"#,
            num(x),
            num(y),
            s.color
        );
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" font-size="10">{}</text>"#,
            num(x + 14.0),
            num(y + 9.0),
            escape(&s.label)
        );
    }
}

impl Figure {
    pub fn render(&self) -> String {
        let cols = self.columns.max(1);
        let rows = self.panels.len().div_ceil(cols).max(1);
        let header = 30.0;
        let width = PANEL_WIDTH * cols as f64;
        let height = header + PANEL_HEIGHT * rows as f64;
        let mut out = String::new();
        let _ = writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif">"#,
            w = num(width),
            h = num(height)
        );
        let _ = writeln!(out, r##"<rect width="100%" height="100%" fill="#fafafa"/>"##);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="20" font-size="16" text-anchor="middle">{}</text>"#,
            num(width / 2.0),
            escape(&self.title)
        );
        for (k, p) in self.panels.iter().enumerate() {
            let ox = PANEL_WIDTH * (k % cols) as f64;
            let oy = header + PANEL_HEIGHT * (k / cols) as f64;
            render_panel(&mut out, p, ox, oy);
        }
        out.push_str("</svg>\n");
        out
    }
}
