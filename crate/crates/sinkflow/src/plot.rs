//! Deterministic SVG line charts: fixed viewBox, fixed palette, coordinates
//! rounded to three decimals, no timestamps — byte-stable across runs so
//! plots can be diffed in CI.

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 500.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 20.0;
const MARGIN_BOTTOM: f64 = 45.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// One named polyline.
#[derive(Debug, Clone)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn finite_bounds(series: &[Series], pick: impl Fn(&(f64, f64)) -> f64) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for s in series {
        for p in &s.points {
            let v = pick(p);
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 1.0, hi + 1.0)
    } else {
        (lo, hi)
    }
}

fn axis_label(v: f64) -> String {
    format!("{v:.4e}")
}

/// Render series as an SVG line chart.
pub fn line_chart_svg(series: &[Series], x_label: &str, y_label: &str) -> String {
    let (x_lo, x_hi) = finite_bounds(series, |p| p.0);
    let (y_lo, y_hi) = finite_bounds(series, |p| p.1);
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let sx = |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
    let sy = |y: f64| MARGIN_TOP + (1.0 - (y - y_lo) / (y_hi - y_lo)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" stroke=\"black\"/>\n",
        MARGIN_LEFT,
        MARGIN_TOP + plot_h,
        MARGIN_LEFT + plot_w,
        MARGIN_TOP + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.3}\" y1=\"{:.3}\" x2=\"{:.3}\" y2=\"{:.3}\" stroke=\"black\"/>\n",
        MARGIN_LEFT,
        MARGIN_TOP,
        MARGIN_LEFT,
        MARGIN_TOP + plot_h
    ));
    // range labels
    svg.push_str(&format!(
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"12\">{}</text>\n",
        MARGIN_LEFT,
        HEIGHT - 28.0,
        axis_label(x_lo)
    ));
    svg.push_str(&format!(
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
        WIDTH - MARGIN_RIGHT,
        HEIGHT - 28.0,
        axis_label(x_hi)
    ));
    svg.push_str(&format!(
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"12\">{}</text>\n",
        4.0,
        MARGIN_TOP + plot_h,
        axis_label(y_lo)
    ));
    svg.push_str(&format!(
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"12\">{}</text>\n",
        4.0,
        MARGIN_TOP + 12.0,
        axis_label(y_hi)
    ));
    // axis names
    svg.push_str(&format!(
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"13\" text-anchor=\"middle\">{}</text>\n",
        MARGIN_LEFT + plot_w / 2.0,
        HEIGHT - 8.0,
        escape(x_label)
    ));
    svg.push_str(&format!(
        "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"13\" transform=\"rotate(-90 14 {:.3})\" text-anchor=\"middle\">{}</text>\n",
        14.0,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    ));

    for (idx, s) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.3},{:.3}", sx(*x), sy(*y)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
    }

    if series.len() > 1 {
        for (idx, s) in series.iter().enumerate() {
            let color = PALETTE[idx % PALETTE.len()];
            let y = MARGIN_TOP + 16.0 * idx as f64 + 10.0;
            svg.push_str(&format!(
                "<rect x=\"{:.3}\" y=\"{:.3}\" width=\"12\" height=\"4\" fill=\"{color}\"/>\n",
                WIDTH - 170.0,
                y - 4.0
            ));
            svg.push_str(&format!(
                "<text x=\"{:.3}\" y=\"{:.3}\" font-size=\"12\">{}</text>\n",
                WIDTH - 152.0,
                y,
                escape(&s.name)
            ));
        }
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
