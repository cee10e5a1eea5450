//! Minimal line charts as SVG text.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;

/// Renders one series. Points must be finite; the chart is empty (axes only)
/// when there are none.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let (x0, x1) = bounds(points.iter().map(|p| p.0));
    let (y0, y1) = bounds(points.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{left} {top} L{left} {bottom} L{right} {bottom}" stroke="black" fill="none"/>"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{left}" y="{}" text-anchor="middle">{}</text>"#,
        bottom + 18.0,
        tick(x0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{right}" y="{}" text-anchor="middle">{}</text>"#,
        bottom + 18.0,
        tick(x1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{bottom}" text-anchor="end">{}</text>"#,
        left - 6.0,
        tick(y0)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        left - 6.0,
        top + 4.0,
        tick(y1)
    );
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    if !points.is_empty() {
        let coords: Vec<String> = points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="steelblue" stroke-width="2" fill="none"/>"#,
            coords.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Data range, widened when degenerate so the scale stays finite.
fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = lo.abs().max(1.0) * 0.5;
        return (lo - pad, hi + pad);
    }
    (lo, hi)
}

fn tick(v: f64) -> String {
    format!("{v:.4}").trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn polyline_vertices(svg: &str) -> Option<usize> {
        let start = svg.find("<polyline points=\"")? + "<polyline points=\"".len();
        let end = start + svg[start..].find('"')?;
        Some(svg[start..end].split_whitespace().count())
    }

    #[test]
    fn polyline_has_one_vertex_per_point() {
        for n in [1usize, 2, 7, 100] {
            let pts: Vec<(f64, f64)> = (0..n).map(|i| (i as f64, (i * i) as f64)).collect();
            assert_eq!(polyline_vertices(&line_chart("t", "x", "y", &pts)), Some(n));
        }
        assert_eq!(polyline_vertices(&line_chart("t", "x", "y", &[])), None);
    }

    #[test]
    fn vertices_stay_inside_plot_area() {
        let pts = [(0.0, -3.0), (5.0, 10.0), (10.0, 4.0)];
        let svg = line_chart("t", "x", "y", &pts);
        let start = svg.find("points=\"").unwrap() + 8;
        let end = start + svg[start..].find('"').unwrap();
        for v in svg[start..end].split_whitespace() {
            let (x, y) = v.split_once(',').unwrap();
            let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
            assert!((MARGIN..=WIDTH - MARGIN).contains(&x));
            assert!((MARGIN..=HEIGHT - MARGIN).contains(&y));
        }
    }

    #[test]
    fn constant_series_renders() {
        let svg = line_chart("flat", "x", "y", &[(1.0, 2.0), (1.0, 2.0)]);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn labels_are_escaped() {
        assert!(line_chart("a<b & c", "x", "y", &[]).contains("a&lt;b &amp; c"));
    }
}
