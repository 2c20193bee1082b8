//! Self-contained SVG line plots for metric traces. No external renderer;
//! output bytes are deterministic functions of the input.

use std::fmt::Write as _;

use crate::train::MetricTrace;

#[derive(Debug, Clone, PartialEq)]
pub enum PlotError {
    EmptyTrace,
    NonFiniteValue,
}

impl std::fmt::Display for PlotError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlotError::EmptyTrace => write!(f, "trace has no rows"),
            PlotError::NonFiniteValue => write!(f, "trace contains a non-finite value"),
        }
    }
}

impl std::error::Error for PlotError {}

const W: f64 = 760.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    /// left or right axis
    right: bool,
    values: Vec<f64>,
}

/// Dual-axis line plot of two series against the step column.
fn dual_axis_svg(title: &str, steps: &[f64], a: Series, b: Series) -> Result<String, PlotError> {
    if steps.is_empty() {
        return Err(PlotError::EmptyTrace);
    }
    for v in steps.iter().chain(&a.values).chain(&b.values) {
        if !v.is_finite() {
            return Err(PlotError::NonFiniteValue);
        }
    }
    let x_lo = steps[0];
    let x_hi = *steps.last().expect("nonempty");
    let x_span = (x_hi - x_lo).max(1e-12);
    let range = |vals: &[f64]| {
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = (hi - lo).max(1e-12) * 0.05;
        (lo - pad, hi + pad)
    };
    let (a_lo, a_hi) = range(&a.values);
    let (b_lo, b_hi) = range(&b.values);
    let px = |x: f64| MARGIN + (x - x_lo) / x_span * (W - 2.0 * MARGIN);
    let py = |v: f64, lo: f64, hi: f64| H - MARGIN - (v - lo) / (hi - lo) * (H - 2.0 * MARGIN);

    let polyline = |vals: &[f64], lo: f64, hi: f64, color: &str| {
        let mut pts = String::new();
        for (s, v) in steps.iter().zip(vals) {
            let _ = write!(pts, "{:.2},{:.2} ", px(*s), py(*v, lo, hi));
        }
        format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.6\" points=\"{}\"/>",
            pts.trim_end()
        )
    };

    let mut svg = String::new();
    let _ = write!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = write!(svg, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"24\" font-family=\"monospace\" font-size=\"15\">{}</text>",
        MARGIN, title
    );
    // axes
    let _ = write!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\
         <line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"#445\"/>\
         <line x1=\"{r}\" y1=\"{t}\" x2=\"{r}\" y2=\"{b}\" stroke=\"#766\"/>",
        m = MARGIN,
        r = W - MARGIN,
        t = MARGIN,
        b = H - MARGIN,
    );
    // axis extrema labels
    let _ = write!(
        svg,
        "<text x=\"6\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" fill=\"{ca}\">{:.3e}</text>\
         <text x=\"6\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" fill=\"{ca}\">{:.3e}</text>",
        MARGIN + 4.0,
        a_hi,
        H - MARGIN,
        a_lo,
        ca = a.color,
    );
    let _ = write!(
        svg,
        "<text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" fill=\"{cb}\">{:.3e}</text>\
         <text x=\"{x:.1}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"11\" fill=\"{cb}\">{:.3e}</text>",
        MARGIN + 4.0,
        b_hi,
        H - MARGIN,
        b_lo,
        x = W - MARGIN + 4.0,
        cb = b.color,
    );
    // legend
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"40\" font-family=\"monospace\" font-size=\"12\" fill=\"{}\">{} (left)</text>\
         <text x=\"{:.1}\" y=\"54\" font-family=\"monospace\" font-size=\"12\" fill=\"{}\">{} (right)</text>",
        MARGIN,
        a.color,
        a.label,
        MARGIN,
        b.color,
        b.label
    );
    svg.push_str(&polyline(&a.values, a_lo, a_hi, a.color));
    svg.push_str(&polyline(&b.values, b_lo, b_hi, b.color));
    let _ = (a.right, b.right);
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Renders the two standard panels: (loss, alignment) and
/// (manifold error, memorization fraction). Returns (file name, bytes) pairs.
pub fn emit_plots(trace: &MetricTrace) -> Result<Vec<(String, String)>, PlotError> {
    if trace.rows.is_empty() {
        return Err(PlotError::EmptyTrace);
    }
    let steps: Vec<f64> = trace.rows.iter().map(|r| r.step as f64).collect();
    let loss: Vec<f64> = trace.rows.iter().map(|r| r.loss).collect();
    let align: Vec<f64> = trace.rows.iter().map(|r| r.alignment).collect();
    let merr: Vec<f64> = trace.rows.iter().map(|r| r.manifold_error).collect();
    let memo: Vec<f64> = trace.rows.iter().map(|r| r.memorization).collect();
    let p1 = dual_axis_svg(
        "training loss / score-projection alignment",
        &steps,
        Series { label: "loss", color: "#1a2b66", right: false, values: loss },
        Series { label: "alignment", color: "#c06820", right: true, values: align },
    )?;
    let p2 = dual_axis_svg(
        "manifold error / memorization fraction",
        &steps,
        Series { label: "manifold error", color: "#17343a", right: false, values: merr },
        Series { label: "memorization", color: "#a03050", right: true, values: memo },
    )?;
    Ok(vec![("loss_alignment.svg".to_string(), p1), ("error_memorization.svg".to_string(), p2)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::TraceRow;

    fn trace(rows: usize) -> MetricTrace {
        MetricTrace {
            rows: (0..rows)
                .map(|i| TraceRow {
                    step: i as u64 * 50,
                    loss: 1.0 / (i + 1) as f64,
                    alignment: 0.5 + 0.1 * i as f64 / rows.max(1) as f64,
                    manifold_error: 0.3 - 0.01 * i as f64,
                    memorization: 0.05 * i as f64,
                    eikonal_residual: None,
                })
                .collect(),
        }
    }

    #[test]
    fn two_row_trace_renders_two_polylines_per_panel() {
        let plots = emit_plots(&trace(2)).unwrap();
        assert_eq!(plots.len(), 2);
        for (_, svg) in &plots {
            assert_eq!(svg.matches("<polyline").count(), 2);
            assert!(svg.starts_with("<svg"));
            assert!(svg.ends_with("</svg>\n"));
        }
    }

    #[test]
    fn deterministic_bytes_and_empty_rejection() {
        let a = emit_plots(&trace(5)).unwrap();
        let b = emit_plots(&trace(5)).unwrap();
        assert_eq!(a, b);
        assert!(matches!(emit_plots(&trace(0)), Err(PlotError::EmptyTrace)));
    }

    #[test]
    fn non_finite_rows_are_rejected() {
        let mut t = trace(3);
        t.rows[1].loss = f64::NAN;
        assert!(matches!(emit_plots(&t), Err(PlotError::NonFiniteValue)));
    }
}
