//! Standalone SVG line charts.

use std::fmt::Write as _;

use super::EvalReport;

const W: f64 = 480.0;
const H: f64 = 360.0;
const MARGIN: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn sx(x: f64) -> f64 {
    MARGIN + x.clamp(0.0, 1.0) * (W - 2.0 * MARGIN)
}

fn sy(y: f64) -> f64 {
    H - MARGIN - y.clamp(0.0, 1.0) * (H - 2.0 * MARGIN)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart over the unit square.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, escape(title));
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(
            s,
            r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#ddd"/><text x="{}" y="{}" text-anchor="end">{v:.1}</text><text x="{}" y="{}" text-anchor="middle">{v:.1}</text>"##,
            sx(0.0),
            sy(v),
            sx(1.0),
            sy(v),
            sx(0.0) - 4.0,
            sy(v) + 4.0,
            sx(v),
            sy(0.0) + 14.0
        );
    }
    let _ = writeln!(
        s,
        r#"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        sx(0.0),
        sy(1.0),
        sx(1.0) - sx(0.0),
        sy(0.0) - sy(1.0)
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !ser.points.is_empty() {
            let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        }
        let ly = MARGIN + 4.0 + 14.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            W - MARGIN - 90.0,
            W - MARGIN - 74.0,
            W - MARGIN - 70.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Precision–recall curve of every evaluated verb.
pub fn pr_svg(report: &EvalReport) -> String {
    let series: Vec<Series> = report
        .verbs
        .iter()
        .map(|v| Series {
            name: format!("{} ({:.2})", v.verb, v.ap),
            points: v.recall.iter().copied().zip(v.precision.iter().copied()).collect(),
        })
        .collect();
    line_chart(&format!("Precision-recall ({})", report.selection), "recall", "precision", &series)
}

/// Reliability diagram: bin mean confidence against bin precision.
pub fn calibration_svg(report: &EvalReport) -> String {
    let points = report
        .calibration_curve
        .iter()
        .filter(|b| b.count > 0)
        .map(|b| (b.mean_confidence, b.precision))
        .collect();
    let diagonal = Series {
        name: "ideal".into(),
        points: vec![(0.0, 0.0), (1.0, 1.0)],
    };
    let curve = Series {
        name: "observed".into(),
        points,
    };
    line_chart(&format!("Calibration ({})", report.selection), "confidence", "precision", &[curve, diagonal])
}
