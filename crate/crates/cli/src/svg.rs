//! X-Y overlay of target and achieved paths, written as plain SVG.

use std::fmt::Write;

pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub dashed: bool,
    /// Close the polyline back to its first point.
    pub closed: bool,
    pub points: Vec<(f64, f64)>,
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let m = if norm < 1.5 {
        1.0
    } else if norm < 3.5 {
        2.0
    } else if norm < 7.5 {
        5.0
    } else {
        10.0
    };
    m * mag
}

/// Square canvas of side `size` px with equal axis scales. Series with no
/// points are listed in the legend but not drawn.
pub fn xy_plot(title: &str, size: f64, series: &[Series<'_>]) -> String {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    // Equal scales on both axes, padded by 5%.
    let span = (x1 - x0).max(y1 - y0).max(1e-6) * 1.1;
    let (cx, cy) = (0.5 * (x0 + x1), 0.5 * (y0 + y1));
    let (x0, x1, y0, y1) = (cx - span / 2.0, cx + span / 2.0, cy - span / 2.0, cy + span / 2.0);

    let margin = 0.12 * size;
    let plot = size - 2.0 * margin;
    let sx = |x: f64| margin + (x - x0) / span * plot;
    let sy = |y: f64| margin + (y1 - y) / span * plot;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {size} {size}" width="{size}" height="{size}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="{size}" height="{size}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#, size / 2.0, margin * 0.45, escape(title));
    let _ = writeln!(
        out,
        r#"<rect x="{margin}" y="{margin}" width="{plot}" height="{plot}" fill="none" stroke="black" stroke-width="1"/>"#
    );

    let step = nice_step(span);
    let mut v = (x0 / step).ceil() * step;
    while v <= x1 {
        let x = sx(v);
        let _ = writeln!(out, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/>"##, margin, margin + plot);
        let _ = writeln!(out, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, margin + plot + 14.0, tick(v));
        v += step;
    }
    let mut v = (y0 / step).ceil() * step;
    while v <= y1 {
        let y = sy(v);
        let _ = writeln!(out, r##"<line x1="{:.2}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, margin, margin + plot);
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, margin - 4.0, y + 4.0, tick(v));
        v += step;
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">x (mm)</text>"#, size / 2.0, size - margin * 0.3);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle" transform="rotate(-90 {} {})">y (mm)</text>"#,
        margin * 0.3,
        size / 2.0,
        margin * 0.3,
        size / 2.0
    );

    for s in series {
        let mut coords: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        if coords.is_empty() {
            continue;
        }
        if s.closed {
            coords.push(coords[0].clone());
        }
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<polyline points="{}" fill="none" stroke="{}" stroke-width="1.5"{dash}/>"#,
            coords.join(" "),
            s.color
        );
    }

    for (i, s) in series.iter().enumerate() {
        let y = margin + 14.0 + 16.0 * i as f64;
        let x = margin + 8.0;
        let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
        let _ = writeln!(
            out,
            r#"<line x1="{x}" y1="{y}" x2="{}" y2="{y}" stroke="{}" stroke-width="1.5"{dash}/>"#,
            x + 22.0,
            s.color
        );
        let _ = writeln!(out, r#"<text x="{}" y="{}">{}</text>"#, x + 28.0, y + 4.0, escape(s.label));
    }
    out.push_str("</svg>\n");
    out
}

fn tick(v: f64) -> String {
    let v = if v.abs() < 1e-9 { 0.0 } else { v };
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn draws_one_polyline_per_nonempty_series() {
        let svg = xy_plot(
            "circle <test>",
            400.0,
            &[
                Series { label: "target", color: "black", dashed: true, closed: true, points: vec![(0.0, 0.0), (1.0, 0.0), (1.0, 1.0)] },
                Series { label: "achieved", color: "red", dashed: false, closed: false, points: vec![(0.1, 0.1), (0.9, 0.2)] },
                Series { label: "missing", color: "blue", dashed: false, closed: false, points: vec![] },
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains(r#"viewBox="0 0 400 400""#));
        assert!(svg.contains("circle &lt;test&gt;"));
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn closed_series_repeat_their_first_point() {
        let svg = xy_plot("t", 200.0, &[Series { label: "a", color: "black", dashed: false, closed: true, points: vec![(0.0, 0.0), (2.0, 1.0)] }]);
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let pts: Vec<&str> = line.split('"').nth(1).unwrap().split(' ').collect();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[0], pts[2]);
    }

    #[test]
    fn coordinates_stay_inside_the_canvas() {
        let pts: Vec<(f64, f64)> = (0..50).map(|i| ((i as f64).sin() * 30.0, (i as f64).cos() * 10.0 + 100.0)).collect();
        let svg = xy_plot("t", 300.0, &[Series { label: "a", color: "black", dashed: false, closed: false, points: pts }]);
        let line = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        for p in line.split('"').nth(1).unwrap().split(' ') {
            let (x, y) = p.split_once(',').unwrap();
            let (x, y): (f64, f64) = (x.parse().unwrap(), y.parse().unwrap());
            assert!((0.0..=300.0).contains(&x) && (0.0..=300.0).contains(&y));
        }
    }

    #[test]
    fn empty_plot_is_still_valid() {
        let svg = xy_plot("nothing", 200.0, &[]);
        assert!(svg.contains("</svg>"));
        assert!(!svg.contains("<polyline"));
    }
}
