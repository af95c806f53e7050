//! Standalone SVG line chart of a training log: loss (rescaled to its own
//! range) and the task metric on a shared `[0, 1]` axis.

use std::fmt::Write as _;

use thermdet::trainer::TrainLog;

const W: f64 = 640.0;
const H: f64 = 360.0;
const PAD: f64 = 48.0;

fn polyline(points: &[(f64, f64)], color: &str) -> String {
    let coords: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
        coords.join(" ")
    )
}

pub fn render(log: &TrainLog, title: &str, metric_name: &str) -> String {
    let rows = &log.rows;
    let max_step = rows.iter().map(|r| r.step).max().unwrap_or(0).max(1) as f64;
    let (lo, hi) = rows
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.loss), b.max(r.loss)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |step: usize| PAD + (W - 2.0 * PAD) * step as f64 / max_step;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 1.0);
    let loss: Vec<(f64, f64)> = rows.iter().map(|r| (x(r.step), y((r.loss - lo) / span))).collect();
    let metric: Vec<(f64, f64)> = rows.iter().map(|r| (x(r.step), y(r.metric))).collect();

    let mut s = String::new();
    writeln!(s, "<?xml version=\"1.0\" encoding=\"UTF-8\"?>").unwrap();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">"
    )
    .unwrap();
    writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>").unwrap();
    writeln!(s, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{title}</text>", W / 2.0).unwrap();
    writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        H - PAD,
        W - PAD
    )
    .unwrap();
    writeln!(s, "<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>", H - PAD).unwrap();
    writeln!(s, "<text x=\"{PAD}\" y=\"{}\" text-anchor=\"middle\">0</text>", H - PAD + 16.0).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{max_step}</text>", W - PAD, H - PAD + 16.0).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">step</text>", W / 2.0, H - 12.0).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">1</text>", PAD - 6.0, PAD + 4.0).unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">0</text>", PAD - 6.0, H - PAD + 4.0).unwrap();
    s.push_str(&polyline(&loss, "#1f77b4"));
    s.push_str(&polyline(&metric, "#ff7f0e"));
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" fill=\"#1f77b4\">loss (scaled, {lo:.4} to {hi:.4})</text>",
        W - PAD - 200.0,
        PAD + 4.0
    )
    .unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" fill=\"#ff7f0e\">{metric_name}</text>", W - PAD - 200.0, PAD + 20.0).unwrap();
    s.push_str("</svg>\n");
    s
}
