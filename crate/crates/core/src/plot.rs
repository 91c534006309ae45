//! Static SVG charts for metric reports and sweep curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoopError, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = format!(r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#);
    s.push('\n');
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, W / 2.0, escape(title));
    let (x0, y0, x1) = (LEFT, H - BOTTOM, W - RIGHT);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{TOP}" x2="{x0}" y2="{y0}" stroke="black"/>"#);
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, n) in names.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/>"#, y - 10.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, r#"<text x="{}" y="{y}">{}</text>"#, x + 18.0, escape(n));
    }
}

/// Round upper bound for a linear axis.
fn nice_max(v: f64) -> f64 {
    if !(v > 0.0) {
        return 1.0;
    }
    let mag = 10f64.powf(v.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0].iter().map(|m| m * mag).find(|&m| m >= v).unwrap_or(10.0 * mag)
}

fn y_axis(s: &mut String, max: f64, label: &str) {
    for k in 0..=4 {
        let v = max * k as f64 / 4.0;
        let y = H - BOTTOM - (H - TOP - BOTTOM) * k as f64 / 4.0;
        let _ = writeln!(s, r##"<line x1="{}" y1="{y}" x2="{}" y2="{y}" stroke="#ddd"/>"##, LEFT, W - RIGHT);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LEFT - 6.0, y + 4.0, trim_num(v));
    }
    let _ = writeln!(s, r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">{}</text>"#, H / 2.0, H / 2.0, escape(label));
}

fn trim_num(v: f64) -> String {
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// Grouped bars: one group per label, one bar per series.
pub fn bar_chart(title: &str, y_label: &str, groups: &[String], series: &[(&str, Vec<f64>)]) -> String {
    let mut s = header(title);
    let max = nice_max(series.iter().flat_map(|x| x.1.iter().copied()).fold(0.0, f64::max));
    y_axis(&mut s, max, y_label);
    let plot_w = W - LEFT - RIGHT;
    let group_w = plot_w / groups.len().max(1) as f64;
    let bar_w = 0.8 * group_w / series.len().max(1) as f64;
    for (g, name) in groups.iter().enumerate() {
        let gx = LEFT + group_w * g as f64 + 0.1 * group_w;
        for (k, (_, vals)) in series.iter().enumerate() {
            let v = vals.get(g).copied().unwrap_or(0.0).max(0.0);
            let h = (H - TOP - BOTTOM) * v / max;
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{}"/>"#,
                gx + bar_w * k as f64,
                H - BOTTOM - h,
                bar_w,
                h,
                PALETTE[k % PALETTE.len()]
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, gx + 0.4 * group_w, H - BOTTOM + 18.0, escape(name));
    }
    legend(&mut s, &series.iter().map(|x| x.0).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Lines over a shared x axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, xs: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let mut s = header(title);
    let max = nice_max(series.iter().flat_map(|x| x.1.iter().copied()).fold(0.0, f64::max));
    y_axis(&mut s, max, y_label);
    let (lo, hi) = xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let px = |x: f64| LEFT + (W - LEFT - RIGHT) * (x - lo) / span;
    let py = |y: f64| H - BOTTOM - (H - TOP - BOTTOM) * y.max(0.0) / max;
    for &x in xs {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#, px(x), H - BOTTOM + 18.0, trim_num(x));
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, LEFT + (W - LEFT - RIGHT) / 2.0, H - 10.0, escape(x_label));
    for (k, (_, ys)) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = xs.iter().zip(ys).map(|(&x, &y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, pts.join(" "));
        for (&x, &y) in xs.iter().zip(ys) {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
    }
    legend(&mut s, &series.iter().map(|x| x.0).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

/// Accuracy against bytes per second on a log axis; bubble area follows
/// `size`. Zero-cost points sit on a separate "0" tick left of the axis.
pub fn bubble_chart(title: &str, y_label: &str, points: &[(String, f64, f64, f64)]) -> String {
    let mut s = header(title);
    let max = nice_max(points.iter().map(|p| p.2).fold(0.0, f64::max));
    y_axis(&mut s, max, y_label);
    let positive: Vec<f64> = points.iter().map(|p| p.1).filter(|&b| b > 0.0).collect();
    let lo = positive.iter().fold(f64::INFINITY, |a, &b| a.min(b)).log10().floor().min(1.0);
    let hi = positive.iter().fold(0.0f64, |a, &b| a.max(b)).log10().ceil().max(lo + 1.0);
    let zero_x = LEFT + 20.0;
    let (ax0, ax1) = (LEFT + 60.0, W - RIGHT - 10.0);
    let px = |b: f64| if b > 0.0 { ax0 + (ax1 - ax0) * (b.log10() - lo) / (hi - lo) } else { zero_x };
    let py = |y: f64| H - BOTTOM - (H - TOP - BOTTOM) * y.max(0.0) / max;
    let _ = writeln!(s, r#"<text x="{zero_x}" y="{}" text-anchor="middle">0</text>"#, H - BOTTOM + 18.0);
    for e in lo as i32..=hi as i32 {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle">1e{e}</text>"#, px(10f64.powi(e)), H - BOTTOM + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">bytes per second (log)</text>"#, LEFT + (W - LEFT - RIGHT) / 2.0, H - 10.0);
    let size_max = points.iter().map(|p| p.3).fold(0.0f64, f64::max).max(1e-12);
    for (k, (_, b, y, size)) in points.iter().enumerate() {
        let r = 6.0 + 18.0 * (size / size_max).max(0.0).sqrt();
        let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="{r:.1}" fill="{}" fill-opacity="0.6"/>"#, px(*b), py(*y), PALETTE[k % PALETTE.len()]);
    }
    legend(&mut s, &points.iter().map(|p| p.0.as_str()).collect::<Vec<_>>());
    s.push_str("</svg>\n");
    s
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    std::fs::write(path, svg).map_err(|e| CoopError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let groups = vec!["a".to_string(), "b<c".to_string()];
        let svg = bar_chart("t", "y", &groups, &[("amota", vec![0.3, 0.7]), ("map", vec![0.2, 0.5])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("b&lt;c"));
        assert_eq!(svg.matches("<rect").count(), 1 + 4 + 2);
        let svg = line_chart("t", "x", "y", &[0.0, 100.0, 300.0], &[("s", vec![0.5, 0.4, 0.3])]);
        assert_eq!(svg.matches("<circle").count(), 3);
        let pts = vec![("none".to_string(), 0.0, 0.6, 0.4), ("late".to_string(), 9.5e3, 0.9, 0.7), ("coop".to_string(), 6.4e4, 0.8, 0.5)];
        let svg = bubble_chart("t", "AMOTA", &pts);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn axis_bounds_round_up() {
        assert_eq!(nice_max(0.73), 1.0);
        assert_eq!(nice_max(0.0), 1.0);
        assert_eq!(nice_max(3.2), 5.0);
    }
}
