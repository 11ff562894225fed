//! Minimal SVG line charts: one panel per metric, one polyline per series.

use std::fmt::Write;

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.filter(|v| v.is_finite()).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Side-by-side panels sharing a legend. Each data point is also emitted as
/// a `<circle class="point">` carrying `data-series`, `data-x`, `data-y`.
pub fn line_chart(panels: &[(&str, Vec<Series>)]) -> String {
    let width = MARGIN + panels.len() as f64 * (PANEL_W + MARGIN);
    let height = PANEL_H + 2.0 * MARGIN + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (p, (title, series)) in panels.iter().enumerate() {
        let x0 = MARGIN + p as f64 * (PANEL_W + MARGIN);
        let y0 = MARGIN;
        let (xmin, xmax) = range(series.iter().flat_map(|s| s.points.iter().map(|q| q.0)));
        let (ymin, ymax) = range(series.iter().flat_map(|s| s.points.iter().map(|q| q.1)));
        let px = |x: f64| x0 + (x - xmin) / (xmax - xmin) * PANEL_W;
        let py = |y: f64| y0 + PANEL_H - (y - ymin) / (ymax - ymin) * PANEL_H;
        let _ = writeln!(s, r#"<g class="panel">"#);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#, x0 + PANEL_W / 2.0, y0 - 15.0, escape(title));
        let _ = writeln!(s, r#"<rect x="{x0}" y="{y0}" width="{PANEL_W}" height="{PANEL_H}" fill="none" stroke="black"/>"#);
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (xv, yv) = (xmin + f * (xmax - xmin), ymin + f * (ymax - ymin));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{:.3}</text>"#, px(xv), y0 + PANEL_H + 16.0, xv);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#, x0 - 4.0, py(yv) + 4.0, yv);
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">σ_ε</text>"#, x0 + PANEL_W / 2.0, y0 + PANEL_H + 34.0);
        for (k, ser) in series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
            for &(x, y) in &ser.points {
                let _ = writeln!(
                    s,
                    r#"<circle class="point" data-series="{}" data-x="{x}" data-y="{y}" cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                    escape(&ser.name),
                    px(x),
                    py(y)
                );
            }
        }
        let _ = writeln!(s, "</g>");
    }
    if let Some((_, series)) = panels.first() {
        for (k, ser) in series.iter().enumerate() {
            let x = MARGIN + k as f64 * 150.0;
            let y = height - 12.0;
            let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/>"#, y - 10.0, COLORS[k % COLORS.len()]);
            let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 16.0, escape(&ser.name));
        }
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_circle_per_point() {
        let ser = |n: &str| Series { name: n.into(), points: (1..=5).map(|i| (i as f64 / 10.0, i as f64)).collect() };
        let svg = line_chart(&[("a", vec![ser("x"), ser("y")]), ("b", vec![ser("x"), ser("y")])]);
        assert_eq!(svg.matches(r#"class="point" data-series="x""#).count(), 10);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
