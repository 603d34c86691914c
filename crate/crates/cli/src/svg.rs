use std::fmt::Write as _;

/// One polyline on a chart, in data coordinates.
pub struct Series<'a> {
    pub label: &'a str,
    pub color: &'a str,
    pub points: &'a [(f64, f64)],
}

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;

fn fmt(v: f64) -> String {
    // Fixed precision keeps the output byte-stable across platforms.
    format!("{v:.2}")
}

/// Renders a line chart over the unit square [0,1] x [0,1] as a small
/// self-contained SVG document. No external assets, no timestamps; the same
/// input always produces the same bytes.
pub fn unit_line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let plot_w = W - MARGIN_L - MARGIN_R;
    let plot_h = H - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + x.clamp(0.0, 1.0) * plot_w;
    let py = |y: f64| MARGIN_T + (1.0 - y.clamp(0.0, 1.0)) * plot_h;

    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{}</text>",
        fmt(W / 2.0),
        title
    );

    // Grid and tick labels every 0.25.
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (gx, gy) = (px(t), py(t));
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>",
            fmt(gx),
            fmt(py(0.0)),
            fmt(gx),
            fmt(py(1.0))
        );
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>",
            fmt(px(0.0)),
            fmt(gy),
            fmt(px(1.0)),
            fmt(gy)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
            fmt(gx),
            fmt(py(0.0) + 18.0),
            fmt(t)
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
            fmt(px(0.0) - 8.0),
            fmt(gy + 4.0),
            fmt(t)
        );
    }

    // Axes.
    let _ = writeln!(
        s,
        "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"black\"/>",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(plot_w),
        fmt(plot_h)
    );
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
        fmt(MARGIN_L + plot_w / 2.0),
        fmt(H - 12.0),
        x_label
    );
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        fmt(MARGIN_T + plot_h / 2.0),
        fmt(MARGIN_T + plot_h / 2.0),
        y_label
    );

    // Series polylines and legend.
    for (i, ser) in series.iter().enumerate() {
        let mut pts = String::new();
        for &(x, y) in ser.points {
            let _ = write!(pts, "{},{} ", fmt(px(x)), fmt(py(y)));
        }
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\"/>",
            pts.trim_end(),
            ser.color
        );
        let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            s,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{}\" stroke-width=\"2\"/>",
            fmt(MARGIN_L + 12.0),
            fmt(ly - 4.0),
            fmt(MARGIN_L + 36.0),
            fmt(ly - 4.0),
            ser.color
        );
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>",
            fmt(MARGIN_L + 42.0),
            fmt(ly),
            ser.label
        );
    }

    s.push_str("</svg>\n");
    s
}
