//! Hand-rolled SVG plots.
//!
//! Write-only conveniences: nothing downstream parses these.  Coordinates
//! are emitted with fixed precision so that a rerun produces byte-identical
//! files.  One-dimensional fields become polylines, two-dimensional fields
//! become coarse grayscale heatmaps, and measure curves become space-time
//! trajectory fans with torus wraps split into separate segments.

use std::fmt::Write;

use wklab::field::ScalarField;
use wklab::flow::MeasureCurve;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 48.0;

const PALETTE: [&str; 8] = [
    "#1b6ca8", "#c0392b", "#208f4f", "#8e44ad", "#d68910", "#16748f", "#7b241c", "#2c3e50",
];

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"#ffffff\"/>\n\
         <text x=\"{}\" y=\"22\" font-family=\"sans-serif\" font-size=\"14\" \
         text-anchor=\"middle\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axis_frame(out: &mut String) {
    let (x0, y0, x1, y1) = (MARGIN, MARGIN, WIDTH - MARGIN, HEIGHT - MARGIN);
    let _ = write!(
        out,
        "<rect x=\"{x0}\" y=\"{y0}\" width=\"{}\" height=\"{}\" fill=\"none\" \
         stroke=\"#888888\" stroke-width=\"1\"/>\n",
        x1 - x0,
        y1 - y0
    );
}

fn tick_label(out: &mut String, x: f64, y: f64, anchor: &str, text: String) {
    let _ = write!(
        out,
        "<text x=\"{x:.1}\" y=\"{y:.1}\" font-family=\"sans-serif\" font-size=\"11\" \
         fill=\"#444444\" text-anchor=\"{anchor}\">{text}</text>\n"
    );
}

/// Plots a scalar field: a periodic polyline over `[0, 1]` in one dimension,
/// a grayscale heatmap in two.
pub fn field_svg(field: &ScalarField, title: &str) -> String {
    let grid = field.grid();
    if grid.domain().dim() == 2 {
        return heatmap_svg(field, title);
    }
    let n = grid.nodes_per_axis();
    let values = field.values();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let sx = |x: f64| MARGIN + x * (WIDTH - 2.0 * MARGIN);
    let sy = |v: f64| HEIGHT - MARGIN - (v - lo) / (hi - lo) * (HEIGHT - 2.0 * MARGIN);

    let mut out = header(title);
    axis_frame(&mut out);
    let mut points = String::new();
    for i in 0..n {
        let _ = write!(points, "{:.2},{:.2} ", sx(i as f64 / n as f64), sy(values[i]));
    }
    // Close the period: repeat the first node at x = 1.
    let _ = write!(points, "{:.2},{:.2}", sx(1.0), sy(values[0]));
    let _ = write!(
        out,
        "<polyline points=\"{points}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
        PALETTE[0]
    );
    tick_label(&mut out, MARGIN, HEIGHT - MARGIN + 16.0, "middle", "0".into());
    tick_label(&mut out, WIDTH - MARGIN, HEIGHT - MARGIN + 16.0, "middle", "1".into());
    tick_label(&mut out, MARGIN - 6.0, HEIGHT - MARGIN, "end", format!("{lo:.3}"));
    tick_label(&mut out, MARGIN - 6.0, MARGIN + 4.0, "end", format!("{hi:.3}"));
    out.push_str("</svg>\n");
    out
}

/// Coarse grayscale heatmap of a two-dimensional field; samples at most
/// 128 cells per axis.
fn heatmap_svg(field: &ScalarField, title: &str) -> String {
    let grid = field.grid();
    let n = grid.nodes_per_axis();
    let stride = n.div_ceil(128);
    let cells = n.div_ceil(stride);
    let values = field.values();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    let side = (WIDTH.min(HEIGHT) - 2.0 * MARGIN).floor();
    let cell = side / cells as f64;
    let mut out = header(title);
    for ci in 0..cells {
        for cj in 0..cells {
            let idx = grid.index_of((ci * stride) as isize, (cj * stride) as isize);
            let s = (values[idx] - lo) / (hi - lo);
            let shade = (30.0 + 195.0 * s) as u8;
            let _ = write!(
                out,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" \
                 fill=\"rgb({shade},{shade},{shade})\"/>\n",
                MARGIN + ci as f64 * cell,
                HEIGHT - MARGIN - (cj as f64 + 1.0) * cell,
                cell + 0.5,
                cell + 0.5,
            );
        }
    }
    tick_label(&mut out, MARGIN - 6.0, HEIGHT - MARGIN + 14.0, "end", format!("min {lo:.3}"));
    tick_label(&mut out, MARGIN - 6.0, MARGIN + 4.0, "end", format!("max {hi:.3}"));
    out.push_str("</svg>\n");
    out
}

/// Space-time fan of a measure curve: position horizontal, time increasing
/// upward, one polyline per particle with stroke width scaled by weight.
/// Two-dimensional curves plot the `(x₀, x₁)` plane paths instead.
pub fn trajectories_svg(curve: &MeasureCurve, title: &str) -> String {
    let two_d = curve.domain().dim() == 2;
    let times = curve.times();
    let t_final = times.last().copied().unwrap_or(1.0).max(1e-12);
    let w_max = curve
        .particles()
        .iter()
        .map(|p| p.weight)
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    let sx = |x: f64| MARGIN + x.rem_euclid(1.0) * (WIDTH - 2.0 * MARGIN);
    let sy_time = |t: f64| HEIGHT - MARGIN - t / t_final * (HEIGHT - 2.0 * MARGIN);
    let sy_pos = |y: f64| HEIGHT - MARGIN - y.rem_euclid(1.0) * (HEIGHT - 2.0 * MARGIN);

    let mut out = header(title);
    axis_frame(&mut out);
    for (k, particle) in curve.particles().iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let width = 0.6 + 2.4 * particle.weight / w_max;
        // Split the polyline wherever the torus representative jumps.
        let mut segment = String::new();
        let mut prev: Option<[f64; 2]> = None;
        let flush = |seg: &mut String, out: &mut String| {
            if seg.matches(' ').count() >= 1 {
                let _ = write!(
                    out,
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
                     stroke-width=\"{width:.2}\" stroke-opacity=\"0.85\"/>\n",
                    seg.trim_end()
                );
            }
            seg.clear();
        };
        for (j, &x) in particle.positions.iter().enumerate() {
            let frac = [x[0].rem_euclid(1.0), x[1].rem_euclid(1.0)];
            if let Some(p) = prev {
                let jump = (frac[0] - p[0]).abs() > 0.5
                    || (two_d && (frac[1] - p[1]).abs() > 0.5);
                if jump {
                    flush(&mut segment, &mut out);
                }
            }
            let (px, py) = if two_d {
                (sx(frac[0]), sy_pos(frac[1]))
            } else {
                (sx(frac[0]), sy_time(times[j]))
            };
            let _ = write!(segment, "{px:.2},{py:.2} ");
            prev = Some(frac);
        }
        flush(&mut segment, &mut out);
    }
    if two_d {
        tick_label(&mut out, MARGIN, HEIGHT - MARGIN + 16.0, "middle", "x₀".into());
        tick_label(&mut out, MARGIN - 6.0, MARGIN + 4.0, "end", "x₁".into());
    } else {
        tick_label(&mut out, MARGIN, HEIGHT - MARGIN + 16.0, "middle", "x = 0".into());
        tick_label(&mut out, WIDTH - MARGIN, HEIGHT - MARGIN + 16.0, "middle", "x = 1".into());
        tick_label(&mut out, MARGIN - 6.0, HEIGHT - MARGIN, "end", "t = 0".into());
        tick_label(&mut out, MARGIN - 6.0, MARGIN + 4.0, "end", format!("t = {t_final:.3}"));
    }
    out.push_str("</svg>\n");
    out
}
