//! Minimal SVG charts for reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::Result;

const W: f64 = 480.0;
const H: f64 = 300.0;
const PAD: f64 = 40.0;

fn frame(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{y}" x2="{x}" y2="{y}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{y}" stroke="black"/>"#,
        y = H - PAD,
        x = W - PAD / 2.0
    );
    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let y = y_of(tick);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{tick}</text>"#, PAD - 4.0, y + 4.0);
    }
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Values are percentages in `[0, 100]`.
fn y_of(v: f64) -> f64 {
    H - PAD - v.clamp(0.0, 100.0) / 100.0 * (H - 2.0 * PAD)
}

fn x_of(i: usize, n: usize) -> f64 {
    PAD + (i as f64 + 0.5) * (W - 1.5 * PAD) / n.max(1) as f64
}

pub fn write_bar_chart(path: &Path, title: &str, bars: &[(String, f64)]) -> Result<()> {
    let mut s = frame(title);
    let n = bars.len();
    let width = (W - 1.5 * PAD) / n.max(1) as f64 * 0.6;
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = x_of(i, n);
        let y = y_of(*v);
        let _ = writeln!(
            s,
            r##"<rect x="{:.1}" y="{y:.1}" width="{width:.1}" height="{:.1}" fill="#4477aa"/>"##,
            x - width / 2.0,
            H - PAD - y
        );
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#, y - 3.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - PAD + 14.0, escape(label));
    }
    s.push_str("</svg>\n");
    fs::write(path, s)?;
    Ok(())
}

pub fn write_line_chart(path: &Path, title: &str, points: &[(String, f64)]) -> Result<()> {
    let mut s = frame(title);
    let n = points.len();
    let coords: Vec<String> = points
        .iter()
        .enumerate()
        .map(|(i, (_, v))| format!("{:.1},{:.1}", x_of(i, n), y_of(*v)))
        .collect();
    let _ = writeln!(s, r##"<polyline points="{}" fill="none" stroke="#4477aa" stroke-width="2"/>"##, coords.join(" "));
    for (i, (label, v)) in points.iter().enumerate() {
        let (x, y) = (x_of(i, n), y_of(*v));
        let _ = writeln!(s, r##"<circle cx="{x:.1}" cy="{y:.1}" r="3" fill="#4477aa"/>"##);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, H - PAD + 14.0, escape(label));
    }
    s.push_str("</svg>\n");
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_wellformed_svg() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("a.svg");
        write_bar_chart(&p, "a<b", &[("x".into(), 50.0), ("y".into(), 120.0)]).unwrap();
        let t = fs::read_to_string(&p).unwrap();
        assert!(t.starts_with("<svg") && t.trim_end().ends_with("</svg>"));
        assert!(t.contains("a&lt;b"));
        write_line_chart(&p, "l", &[("1".into(), 10.0), ("2".into(), 20.0)]).unwrap();
        assert!(fs::read_to_string(&p).unwrap().contains("polyline"));
    }
}
