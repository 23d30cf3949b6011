//! A small SVG line-chart writer for experiment reports.

use std::fmt::Write as _;

/// One polyline series.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub color: &'static str,
    pub points: Vec<(f64, f64)>,
}

/// A chart panel with shared axes for its series.
#[derive(Debug, Clone)]
pub struct Panel {
    pub title: String,
    pub series: Vec<Series>,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 48.0;

fn bounds(panel: &Panel) -> (f64, f64, f64, f64) {
    let mut b = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (x, y) in panel
        .series
        .iter()
        .flat_map(|s| s.points.iter())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
    {
        b = (b.0.min(*x), b.1.max(*x), b.2.min(*y), b.3.max(*y));
    }
    if !b.0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    let (x0, x1) = pad(b.0, b.1);
    let (y0, y1) = pad(b.2.min(0.0), b.3);
    (x0, x1, y0, y1)
}

fn render_panel(out: &mut String, panel: &Panel, top: f64) {
    let (x0, x1, y0, y1) = bounds(panel);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| top + HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let _ = writeln!(
        out,
        r#"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        top + 20.0,
        escape(&panel.title)
    );
    let (left, right, bottom, upper) = (MARGIN, WIDTH - MARGIN, top + HEIGHT - MARGIN, top + MARGIN);
    let _ = writeln!(
        out,
        r#"<polyline points="{left:.1},{upper:.1} {left:.1},{bottom:.1} {right:.1},{bottom:.1}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let t = k as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="middle">{xv:.3}</text>"#,
            sx(xv),
            bottom + 14.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{yv:.3}</text>"#,
            left - 4.0,
            sy(yv) + 3.0
        );
    }
    for (i, s) in panel.series.iter().enumerate() {
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.2"/>"#,
            pts.join(" "),
            s.color
        );
        let ly = upper + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{ly:.1}" font-size="11" fill="{}" text-anchor="end">{}</text>"#,
            right,
            s.color,
            escape(&s.label)
        );
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Stacks the panels vertically; `description` is embedded as `<desc>`.
pub fn render(panels: &[Panel], description: &str) -> String {
    let total = HEIGHT * panels.len() as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH:.0}" height="{total:.0}" viewBox="0 0 {WIDTH:.0} {total:.0}">"#
    );
    let _ = writeln!(out, "<desc>{}</desc>", escape(description).replace("--", "- -"));
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (i, panel) in panels.iter().enumerate() {
        render_panel(&mut out, panel, HEIGHT * i as f64);
    }
    out.push_str("</svg>\n");
    out
}

/// Histogram of `points` as a step outline with unit total area.
pub fn histogram_outline(points: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<(f64, f64)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in points {
        if x >= lo && x <= hi {
            let k = (((x - lo) / width) as usize).min(bins - 1);
            counts[k] += 1;
        }
    }
    let scale = 1.0 / (points.len() as f64 * width);
    let mut out = vec![(lo, 0.0)];
    for (k, c) in counts.iter().enumerate() {
        let h = *c as f64 * scale;
        out.push((lo + k as f64 * width, h));
        out.push((lo + (k + 1) as f64 * width, h));
    }
    out.push((hi, 0.0));
    out
}
