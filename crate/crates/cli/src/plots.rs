//! Minimal SVG renderings of report data: accuracy scatter, paired-difference
//! histogram and sorted accuracy curves. Layout is fixed and unstyled beyond
//! what is needed to read the plots.

use std::collections::BTreeMap;
use std::fmt::Write;

use voxelforge::report::RoiComparison;
use voxelforge::stats::SortedCurve;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

pub fn safe_name(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear map from data ranges onto the plot area.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open(svg: &mut String, title: &str, frame: &Frame, xlabel: &str, ylabel: &str) {
    let _ = write!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    svg.push('\n');
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, x1) = (frame.px(frame.x.0), frame.px(frame.x.1));
    let (y0, y1) = (frame.py(frame.y.0), frame.py(frame.y.1));
    let _ = writeln!(
        svg,
        r#"<path d="M{x0:.1},{y1:.1} V{y0:.1} H{x1:.1}" stroke="black" fill="none"/>"#
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = frame.x.0 + t * (frame.x.1 - frame.x.0);
        let yv = frame.y.0 + t * (frame.y.1 - frame.y.0);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            frame.px(xv),
            y0 + 16.0,
            tick(xv)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            frame.py(yv) + 4.0,
            tick(yv)
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0,
        escape(xlabel)
    );
    let _ = writeln!(
        svg,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
        HEIGHT / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() >= 1.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn close(mut svg: String) -> String {
    svg.push_str("</svg>\n");
    svg
}

/// Per-voxel accuracy of A (x) against B (y) with the threshold lines and
/// the identity diagonal. Voxels undefined under either model are skipped.
pub fn scatter(roi: &RoiComparison, label_a: &str, label_b: &str) -> String {
    let frame = Frame {
        x: (-0.2, 1.0),
        y: (-0.2, 1.0),
    };
    let mut svg = String::new();
    open(
        &mut svg,
        &format!("{}: prediction accuracy", roi.name),
        &frame,
        label_a,
        label_b,
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#888"/>"##,
        frame.px(-0.2),
        frame.py(-0.2),
        frame.px(1.0),
        frame.py(1.0)
    );
    let t = roi.threshold.clamp(-0.2, 1.0);
    let _ = writeln!(
        svg,
        r##"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="#888" stroke-dasharray="4 3"/>"##,
        frame.px(t),
        frame.py(-0.2),
        frame.py(1.0)
    );
    let _ = writeln!(
        svg,
        r##"<line x1="{1:.1}" y1="{0:.1}" x2="{2:.1}" y2="{0:.1}" stroke="#888" stroke-dasharray="4 3"/>"##,
        frame.py(t),
        frame.px(-0.2),
        frame.px(1.0)
    );
    for p in &roi.scatter {
        let (Some(a), Some(b)) = (p.a, p.b) else { continue };
        let color = if a > roi.threshold || b > roi.threshold { COLORS[0] } else { "#bbbbbb" };
        let _ = writeln!(
            svg,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#,
            frame.px(a.clamp(-0.2, 1.0)),
            frame.py(b.clamp(-0.2, 1.0))
        );
    }
    close(svg)
}

/// Histogram of `a - b` over voxels significant under both models.
pub fn histogram(roi: &RoiComparison, label_a: &str, label_b: &str) -> String {
    let h = &roi.difference_histogram;
    let lo = h.edges.first().copied().unwrap_or(-1.0);
    let hi = h.edges.last().copied().unwrap_or(1.0);
    let peak = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let frame = Frame {
        x: (lo, hi),
        y: (0.0, peak),
    };
    let mut svg = String::new();
    open(
        &mut svg,
        &format!("{}: paired differences", roi.name),
        &frame,
        &format!("{label_a} - {label_b}"),
        "voxels",
    );
    for (i, &count) in h.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let (x0, x1) = (frame.px(h.edges[i]), frame.px(h.edges[i + 1]));
        let top = frame.py(count as f64);
        let _ = writeln!(
            svg,
            r#"<rect x="{x0:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{}" stroke="white"/>"#,
            x1 - x0,
            frame.py(0.0) - top,
            COLORS[0]
        );
    }
    if lo < 0.0 && hi > 0.0 {
        let _ = writeln!(
            svg,
            r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="black" stroke-dasharray="4 3"/>"#,
            frame.px(0.0),
            frame.py(0.0),
            frame.py(peak)
        );
    }
    close(svg)
}

/// Above-threshold accuracies sorted in descending order, one line per model.
pub fn curves(name: &str, curves: &BTreeMap<String, SortedCurve>) -> String {
    let longest = curves.values().map(|c| c.accuracies.len()).max().unwrap_or(0).max(1);
    let frame = Frame {
        x: (0.0, longest as f64),
        y: (0.0, 1.0),
    };
    let mut svg = String::new();
    open(&mut svg, &format!("{name}: sorted accuracy"), &frame, "voxel rank", "prediction accuracy");
    for (k, (label, curve)) in curves.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let mut d = String::new();
        for (rank, c) in curve.points() {
            let cmd = if d.is_empty() { 'M' } else { 'L' };
            let _ = write!(d, "{cmd}{:.2},{:.2} ", frame.px(rank as f64), frame.py(c.clamp(0.0, 1.0)));
        }
        if !d.is_empty() {
            let _ = writeln!(svg, r#"<path d="{}" stroke="{color}" fill="none"/>"#, d.trim_end());
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{} ({:.0}% significant)</text>"#,
            WIDTH - MARGIN - 150.0,
            MARGIN + 16.0 * k as f64,
            escape(label),
            100.0 * curve.significant_fraction
        );
    }
    close(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn safe_names_keep_word_characters() {
        assert_eq!(safe_name("V1 left/a"), "V1_left_a");
    }

    #[test]
    fn curves_render_one_path_per_model() {
        let mut map = BTreeMap::new();
        for label in ["gwp", "dnn_tl"] {
            map.insert(
                label.to_string(),
                SortedCurve {
                    accuracies: vec![0.8, 0.6, 0.4],
                    significant_fraction: 0.5,
                },
            );
        }
        let svg = curves("V1", &map);
        assert_eq!(svg.matches("<path d=\"M").count(), 3); // two curves and the axes
        assert!(svg.ends_with("</svg>\n"));
    }
}
