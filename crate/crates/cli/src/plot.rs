//! Curve emission: one CSV and one SVG per metric panel, drawn with a
//! plain polyline so the files have no rendering dependencies.

use std::path::Path;

use cogen_core::rgpo::StepMetrics;

pub struct Panel {
    pub name: &'static str,
    /// (series label, extractor) pairs sharing one set of axes.
    pub series: Vec<(&'static str, fn(&StepMetrics) -> f64)>,
}

pub fn panels() -> Vec<Panel> {
    vec![
        Panel {
            name: "loss",
            series: vec![("loss", |m| m.loss)],
        },
        Panel {
            name: "reward_total",
            series: vec![("reward_mean", |m| m.reward_mean)],
        },
        Panel {
            name: "reward_format",
            series: vec![("reward_format_mean", |m| m.reward_format_mean)],
        },
        Panel {
            name: "reward_consistency",
            series: vec![("reward_consistency_mean", |m| m.reward_consistency_mean)],
        },
        Panel {
            name: "completion_len",
            series: vec![("completion_len_mean", |m| m.completion_len_mean)],
        },
        Panel {
            name: "kl",
            series: vec![("kl_text", |m| m.kl_text), ("kl_image", |m| m.kl_image)],
        },
    ]
}

pub fn write_csv(path: &Path, metrics: &[StepMetrics], panel: &Panel) -> std::io::Result<()> {
    let mut out = String::from("step");
    for (label, _) in &panel.series {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for m in metrics {
        out.push_str(&m.step.to_string());
        for (_, f) in &panel.series {
            out.push_str(&format!(",{}", f(m)));
        }
        out.push('\n');
    }
    std::fs::write(path, out)
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 48.0;
const COLORS: [&str; 2] = ["#1f77b4", "#d62728"];

pub fn write_svg(path: &Path, metrics: &[StepMetrics], panel: &Panel) -> std::io::Result<()> {
    let steps: Vec<f64> = metrics.iter().map(|m| m.step as f64).collect();
    let (x0, x1) = (steps[0], *steps.last().unwrap());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for m in metrics {
        for (_, f) in &panel.series {
            lo = lo.min(f(m));
            hi = hi.max(f(m));
        }
    }
    if !(lo.is_finite() && hi.is_finite()) {
        lo = 0.0;
        hi = 1.0;
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let sx = |x: f64| {
        if x1 > x0 {
            PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD)
        } else {
            W / 2.0
        }
    };
    let sy = |y: f64| H - PAD - (y - lo) / (hi - lo) * (H - 2.0 * PAD);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n\
         <line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <text x=\"{2}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"16\">{3}</text>\n",
        H - PAD,
        W - PAD,
        W / 2.0,
        panel.name
    );
    svg.push_str(&format!(
        "<text x=\"{PAD}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{lo:.4}</text>\n\
         <text x=\"{PAD}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{hi:.4}</text>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"sans-serif\" \
         font-size=\"11\">step {x1:.0}</text>\n",
        H - PAD + 14.0,
        PAD - 6.0,
        W - PAD,
        H - PAD + 14.0,
    ));
    for (si, (label, f)) in panel.series.iter().enumerate() {
        let pts: Vec<String> = metrics
            .iter()
            .map(|m| format!("{:.2},{:.2}", sx(m.step as f64), sy(f(m))))
            .collect();
        let color = COLORS[si % COLORS.len()];
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\" fill=\"{color}\" font-family=\"sans-serif\" \
             font-size=\"12\">{label}</text>\n",
            pts.join(" "),
            W - PAD - 120.0,
            PAD + 16.0 * (si as f64 + 1.0),
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg)
}
