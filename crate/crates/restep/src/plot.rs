//! Static SVG line charts: accuracy against stepsize on a log axis, one
//! series per preset. Output is plain text with fixed formatting, so
//! identical reports render byte-identical files.

use crate::bench::ReportEntry;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 36.0;
const MARGIN_B: f64 = 48.0;

const PALETTE: [&str; 8] =
    ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

fn x_pos(stepsize: f64, lo: f64, hi: f64) -> f64 {
    let t = (stepsize.log10() - lo) / (hi - lo);
    MARGIN_L + t * (WIDTH - MARGIN_L - MARGIN_R)
}

fn y_pos(accuracy: f64) -> f64 {
    let t = accuracy / 100.0;
    HEIGHT - MARGIN_B - t * (HEIGHT - MARGIN_T - MARGIN_B)
}

/// Render one domain's accuracy curves.
pub fn accuracy_chart(domain: &str, series: &[&ReportEntry]) -> String {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for entry in series {
        for p in &entry.curve {
            lo = lo.min(p.stepsize.log10());
            hi = hi.max(p.stepsize.log10());
        }
    }
    if !lo.is_finite() || hi <= lo {
        lo = -4.0;
        hi = 0.0;
    }

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n  <text x=\"{:.1}\" \
         y=\"20\" text-anchor=\"middle\" font-size=\"14\">accuracy vs stepsize ({domain})</text>\n",
        WIDTH / 2.0
    ));

    // Axes.
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B
    ));
    for tick in 0..=5 {
        let acc = 20.0 * tick as f64;
        let y = y_pos(acc);
        svg.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{MARGIN_L}\" y2=\"{y:.1}\" stroke=\"black\"/>\n  \
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{acc:.0}</text>\n",
            MARGIN_L - 4.0,
            MARGIN_L - 8.0,
            y + 4.0
        ));
    }
    let mut decade = lo.ceil() as i32;
    while decade as f64 <= hi {
        let x = x_pos(10f64.powi(decade), lo, hi);
        svg.push_str(&format!(
            "  <line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n  \
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">1e{decade}</text>\n",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 4.0,
            HEIGHT - MARGIN_B + 18.0
        ));
        decade += 1;
    }
    svg.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">base stepsize</text>\n",
        (MARGIN_L + WIDTH - MARGIN_R) / 2.0,
        HEIGHT - 10.0
    ));

    // Series and whiskers.
    for (i, entry) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = entry
            .curve
            .iter()
            .map(|p| format!("{:.2},{:.2}", x_pos(p.stepsize, lo, hi), y_pos(p.mean)))
            .collect();
        svg.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.join(" ")
        ));
        for p in &entry.curve {
            let x = x_pos(p.stepsize, lo, hi);
            svg.push_str(&format!(
                "  <line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"{color}\" \
                 stroke-width=\"0.8\"/>\n  <circle cx=\"{x:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{color}\"/>\n",
                y_pos((p.mean - p.std).max(0.0)),
                y_pos((p.mean + p.std).min(100.0)),
                y_pos(p.mean)
            ));
        }
        let ly = MARGIN_T + 14.0 * i as f64;
        svg.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" \
             stroke-width=\"1.5\"/>\n  <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            WIDTH - 180.0,
            WIDTH - 160.0,
            WIDTH - 154.0,
            ly + 4.0,
            entry.preset
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
