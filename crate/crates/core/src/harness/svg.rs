//! Minimal, byte-deterministic SVG charts.

use std::fmt::Write as _;

const W: f64 = 640.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 170.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;
const PALETTE: [&str; 7] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"];

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Marker {
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_range: (f64, f64),
    pub y_range: (f64, f64),
    pub series: Vec<Series>,
    pub markers: Vec<Marker>,
    pub annotations: Vec<String>,
    /// Draw the chance diagonal (ROC plots).
    pub diagonal: bool,
}

struct Frame {
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let (a, b) = self.x_range;
        let t = if b > a { (x - a) / (b - a) } else { 0.5 };
        LEFT + t * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let (a, b) = self.y_range;
        let t = if b > a { (y - a) / (b - a) } else { 0.5 };
        H - BOTTOM - t * (H - TOP - BOTTOM)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_label: &str, y_label: &str, x_ticks: bool) {
    let (x0, x1, y0, y1) = (f.px(f.x_range.0), f.px(f.x_range.1), f.py(f.y_range.0), f.py(f.y_range.1));
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let yv = f.y_range.0 + t * (f.y_range.1 - f.y_range.0);
        let y = f.py(yv);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{x0:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"##,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0
        );
        if x_ticks {
            let xv = f.x_range.0 + t * (f.x_range.1 - f.x_range.0);
            let x = f.px(xv);
            let _ = writeln!(
                out,
                r##"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"##,
                y0 + 5.0,
                y0 + 18.0,
                tick_label(xv)
            );
        }
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 18.0,
        escape(x_label)
    );
    let cy = (y0 + y1) / 2.0;
    let _ = writeln!(
        out,
        r#"<text x="18" y="{cy:.1}" text-anchor="middle" transform="rotate(-90 18 {cy:.1})">{}</text>"#,
        escape(y_label)
    );
}

fn tick_label(v: f64) -> String {
    if v.abs() >= 10.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

impl LineChart {
    pub fn render(&self) -> String {
        let f = Frame {
            x_range: self.x_range,
            y_range: self.y_range,
        };
        let mut out = String::new();
        header(&mut out, &self.title);
        axes(&mut out, &f, &self.x_label, &self.y_label, true);
        if self.diagonal {
            let _ = writeln!(
                out,
                r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999999" stroke-dasharray="4 4"/>"##,
                f.px(self.x_range.0),
                f.py(self.y_range.0),
                f.px(self.x_range.1),
                f.py(self.y_range.1)
            );
        }
        for (i, s) in self.series.iter().enumerate() {
            let colour = PALETTE[i % PALETTE.len()];
            let d: Vec<String> = s
                .points
                .iter()
                .enumerate()
                .map(|(j, &(x, y))| format!("{}{:.2},{:.2}", if j == 0 { 'M' } else { 'L' }, f.px(x), f.py(y)))
                .collect();
            if !d.is_empty() {
                let _ = writeln!(
                    out,
                    r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="2"/>"#,
                    d.join(" ")
                );
            }
            let ly = TOP + 16.0 * i as f64;
            let lx = W - RIGHT + 12.0;
            let _ = writeln!(
                out,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{colour}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 18.0,
                lx + 22.0,
                ly + 4.0,
                escape(&s.name)
            );
        }
        for m in &self.markers {
            let (x, y) = (f.px(m.x), f.py(m.y));
            let _ = writeln!(
                out,
                r#"<circle cx="{x:.2}" cy="{y:.2}" r="5" fill="black"/><text x="{:.2}" y="{:.2}">{}</text>"#,
                x + 8.0,
                y + 14.0,
                escape(&m.label)
            );
        }
        annotations(&mut out, &self.annotations, &f);
        out.push_str("</svg>\n");
        out
    }
}

fn annotations(out: &mut String, lines: &[String], f: &Frame) {
    let x = f.px(f.x_range.1) - 8.0;
    let base = f.py(f.y_range.0) - 12.0 - 16.0 * lines.len().saturating_sub(1) as f64;
    for (i, a) in lines.iter().enumerate() {
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            base + 16.0 * i as f64,
            escape(a)
        );
    }
}

/// Bars with optional one-standard-deviation whiskers.
#[derive(Debug, Clone, PartialEq)]
pub struct BarChart {
    pub title: String,
    pub y_label: String,
    pub y_range: (f64, f64),
    pub bars: Vec<(String, f64, Option<f64>)>,
}

impl BarChart {
    pub fn render(&self) -> String {
        let n = self.bars.len().max(1) as f64;
        let f = Frame {
            x_range: (0.0, n),
            y_range: self.y_range,
        };
        let mut out = String::new();
        header(&mut out, &self.title);
        axes(&mut out, &f, "", &self.y_label, false);
        let clamp = |v: f64| v.clamp(self.y_range.0, self.y_range.1);
        for (i, (label, value, err)) in self.bars.iter().enumerate() {
            let x0 = f.px(i as f64 + 0.15);
            let x1 = f.px(i as f64 + 0.85);
            let top = f.py(clamp(*value));
            let bottom = f.py(self.y_range.0);
            let _ = writeln!(
                out,
                r#"<rect x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                x1 - x0,
                bottom - top,
                PALETTE[i % PALETTE.len()]
            );
            let cx = (x0 + x1) / 2.0;
            if let Some(e) = err {
                let (hi, lo) = (f.py(clamp(value + e)), f.py(clamp(value - e)));
                let _ = writeln!(out, r#"<line x1="{cx:.2}" y1="{hi:.2}" x2="{cx:.2}" y2="{lo:.2}" stroke="black"/>"#);
            }
            let _ = writeln!(
                out,
                r#"<text x="{cx:.2}" y="{:.2}" text-anchor="middle">{value:.3}</text>"#,
                top - 6.0
            );
            let ly = bottom + 14.0;
            let _ = writeln!(
                out,
                r#"<text x="{cx:.2}" y="{ly:.2}" text-anchor="end" font-size="9" transform="rotate(-25 {cx:.2} {ly:.2})">{}</text>"#,
                escape(label)
            );
        }
        out.push_str("</svg>\n");
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_is_escaped() {
        assert_eq!(escape("a<b & \"c\">"), "a&lt;b &amp; &quot;c&quot;&gt;");
    }

    #[test]
    fn rendering_is_deterministic_and_well_formed() {
        let chart = LineChart {
            title: "ROC".into(),
            x_label: "FPR".into(),
            y_label: "TPR".into(),
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
            series: vec![Series {
                name: "model".into(),
                points: vec![(0.0, 0.0), (0.2, 0.7), (1.0, 1.0)],
            }],
            markers: vec![Marker { label: "t".into(), x: 0.2, y: 0.7 }],
            annotations: vec!["AUC = 0.850000".into()],
            diagonal: true,
        };
        let a = chart.render();
        assert_eq!(a, chart.render());
        assert!(a.starts_with("<svg") && a.trim_end().ends_with("</svg>"));
        assert!(a.contains("AUC = 0.850000"));
        let bars = BarChart {
            title: "t".into(),
            y_label: "AUC".into(),
            y_range: (0.5, 1.0),
            bars: vec![("x".into(), 0.9, Some(0.01)), ("y".into(), 0.4, None)],
        };
        assert!(bars.render().contains("0.900"));
    }
}
