//! Small hand-written SVG charts: metric-versus-fraction lines with
//! spread bands, and ROC curves. Output is plain text with fixed number
//! formatting, so identical inputs give identical files.

use std::fmt::Write as _;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

pub const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// One line with an optional symmetric band (`center ± spread`).
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub color: String,
    pub points: Vec<(f64, f64, f64)>,
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
    log_x: bool,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let (v, lo, hi) = if self.log_x {
            (v.log2(), self.x_min.log2(), self.x_max.log2())
        } else {
            (v, self.x_min, self.x_max)
        };
        let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
        LEFT + t * (WIDTH - LEFT - RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let t = if self.y_max > self.y_min {
            (v - self.y_min) / (self.y_max - self.y_min)
        } else {
            0.5
        };
        HEIGHT - BOTTOM - t * (HEIGHT - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, f: &Frame, x_ticks: &[(f64, String)], y_ticks: &[f64], x_label: &str, y_label: &str) {
    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        out,
        r#"<path d="M{x0:.1},{y1:.1} L{x0:.1},{y0:.1} L{x1:.1},{y0:.1}" fill="none" stroke="black"/>"#
    );
    for (v, label) in x_ticks {
        let x = f.x(*v);
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{y0:.1}" x2="{x:.1}" y2="{:.1}" stroke="black"/><text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            y0 + 5.0,
            y0 + 18.0,
            escape(label)
        );
    }
    for &v in y_ticks {
        let y = f.y(v);
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{x0:.1}" y2="{y:.1}" stroke="black"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
}

fn legend(out: &mut String, entries: &[(String, String)], bottom_right: bool) {
    for (i, (name, color)) in entries.iter().enumerate() {
        let (x, y) = if bottom_right {
            (WIDTH - RIGHT - 170.0, HEIGHT - BOTTOM - 15.0 - 16.0 * (entries.len() - 1 - i) as f64)
        } else {
            (LEFT + 10.0, TOP + 12.0 + 16.0 * i as f64)
        };
        let _ = writeln!(
            out,
            r#"<line x1="{x:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            x + 18.0,
            x + 24.0,
            y + 4.0,
            escape(name)
        );
    }
}

fn polyline(points: &[(f64, f64)]) -> String {
    points
        .iter()
        .map(|(x, y)| format!("{x:.1},{y:.1}"))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Metric against labeled fraction on a log₂ x-axis, one band per series.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let lows = series.iter().flat_map(|s| s.points.iter().map(|p| p.1 - p.2));
    let highs = series.iter().flat_map(|s| s.points.iter().map(|p| p.1 + p.2));
    let x_min = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let x_max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let y_lo = lows.fold(f64::INFINITY, f64::min);
    let y_hi = highs.fold(f64::NEG_INFINITY, f64::max);
    let (y_min, y_max) = if y_lo.is_finite() && y_hi.is_finite() {
        let pad = ((y_hi - y_lo) * 0.1).max(0.01);
        (y_lo - pad, y_hi + pad)
    } else {
        (0.0, 1.0)
    };
    let frame = Frame {
        x_min: if x_min.is_finite() { x_min } else { 1.0 },
        x_max: if x_max.is_finite() { x_max } else { 100.0 },
        y_min,
        y_max,
        log_x: x_min > 0.0,
    };
    let mut ticks: Vec<f64> = xs.clone();
    ticks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ticks.dedup();
    let x_ticks: Vec<(f64, String)> = ticks.iter().map(|&v| (v, format!("{v}"))).collect();
    let y_ticks: Vec<f64> = (0..=4).map(|i| y_min + (y_max - y_min) * i as f64 / 4.0).collect();

    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, &x_ticks, &y_ticks, x_label, y_label);
    for s in series {
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let upper: Vec<(f64, f64)> = pts.iter().map(|p| (frame.x(p.0), frame.y(p.1 + p.2))).collect();
        let lower: Vec<(f64, f64)> = pts.iter().rev().map(|p| (frame.x(p.0), frame.y(p.1 - p.2))).collect();
        let band: Vec<(f64, f64)> = upper.into_iter().chain(lower).collect();
        let _ = writeln!(
            out,
            r#"<polygon points="{}" fill="{}" fill-opacity="0.2" stroke="none"/>"#,
            polyline(&band),
            s.color
        );
        let line: Vec<(f64, f64)> = pts.iter().map(|p| (frame.x(p.0), frame.y(p.1))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="2"/>"#,
            polyline(&line),
            s.color
        );
        for (x, y) in &line {
            let _ = writeln!(out, r#"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="{}"/>"#, s.color);
        }
    }
    let entries: Vec<_> = series.iter().map(|s| (s.name.clone(), s.color.clone())).collect();
    legend(&mut out, &entries, true);
    out.push_str("</svg>\n");
    out
}

/// ROC curves on the unit square with the chance diagonal.
pub fn roc_chart(title: &str, curves: &[(String, String, Vec<(f64, f64)>)]) -> String {
    let frame = Frame {
        x_min: 0.0,
        x_max: 1.0,
        y_min: 0.0,
        y_max: 1.0,
        log_x: false,
    };
    let ticks: Vec<f64> = (0..=4).map(|i| i as f64 / 4.0).collect();
    let x_ticks: Vec<(f64, String)> = ticks.iter().map(|&v| (v, format!("{v:.2}"))).collect();
    let mut out = String::new();
    header(&mut out, title);
    axes(&mut out, &frame, &x_ticks, &ticks, "False positive rate", "True positive rate");
    let _ = writeln!(
        out,
        r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#888888" stroke-dasharray="4 4"/>"##,
        frame.x(0.0),
        frame.y(0.0),
        frame.x(1.0),
        frame.y(1.0)
    );
    for (_, color, pts) in curves {
        let line: Vec<(f64, f64)> = pts.iter().map(|&(x, y)| (frame.x(x), frame.y(y))).collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            polyline(&line)
        );
    }
    let entries: Vec<_> = curves.iter().map(|(n, c, _)| (n.clone(), c.clone())).collect();
    legend(&mut out, &entries, true);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_deterministic_and_well_formed() {
        let s = vec![Series {
            name: "SSL <k>".into(),
            color: PALETTE[0].into(),
            points: vec![(6.25, 0.6, 0.05), (100.0, 0.8, 0.02)],
        }];
        let a = line_chart("Accuracy", "Labeled data (%)", "Accuracy", &s);
        assert_eq!(a, line_chart("Accuracy", "Labeled data (%)", "Accuracy", &s));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
        assert!(a.contains("SSL &lt;k&gt;"));
        assert!(a.contains("<polygon"));

        let r = roc_chart("ROC", &[("k".into(), PALETTE[1].into(), vec![(0.0, 0.0), (0.5, 0.9), (1.0, 1.0)])]);
        assert_eq!(r.matches("<polyline").count(), 1);
    }
}
