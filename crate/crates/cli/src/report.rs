//! SVG chart emission for training metrics: two stacked panels (loss
//! curves, validation accuracy) built from text primitives, no plotting
//! dependency. Every data point is drawn as its own circle, so series stay
//! countable in the output, and axis ticks land on round numbers.

use sigat::model::Metrics;
use sigat::{Error, Result};

const WIDTH: f64 = 880.0;
const PANEL_HEIGHT: f64 = 280.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 36.0;
const MARGIN_BOTTOM: f64 = 46.0;

const TRAIN_LOSS_COLOR: &str = "#1f77b4";
const VAL_LOSS_COLOR: &str = "#d62728";
const VAL_ACC_COLOR: &str = "#2ca02c";

/// Linear map from data to pixel coordinates. `px0 > px1` flips the axis,
/// which is how y grows upward on screen.
struct Scale {
    lo: f64,
    hi: f64,
    px0: f64,
    px1: f64,
}

impl Scale {
    fn map(&self, v: f64) -> f64 {
        self.px0 + (v - self.lo) / (self.hi - self.lo) * (self.px1 - self.px0)
    }
}

/// Largest of 1/2/5 times a power of ten that still yields at least
/// `target` intervals over `span`.
fn nice_step(span: f64, target: usize) -> f64 {
    let raw = span / target as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let step = if norm <= 1.0 {
        1.0
    } else if norm <= 2.0 {
        2.0
    } else if norm <= 5.0 {
        5.0
    } else {
        10.0
    };
    step * mag
}

/// Round tick positions covering [lo, hi], about `target` of them.
fn ticks(lo: f64, hi: f64, target: usize) -> Vec<(f64, String)> {
    let step = nice_step(hi - lo, target);
    let decimals = if step >= 1.0 {
        0
    } else {
        (-step.log10().floor() as i64).clamp(0, 6) as usize
    };
    let mut out = Vec::new();
    let mut k = (lo / step).ceil() as i64;
    // Guard against lo sitting a hair above a tick due to the ceil.
    if (k as f64 - 1.0) * step >= lo - step * 1e-9 {
        k -= 1;
    }
    loop {
        let t = k as f64 * step;
        if t > hi + step * 1e-9 {
            break;
        }
        if t >= lo - step * 1e-9 {
            out.push((t, format!("{t:.decimals$}")));
        }
        k += 1;
    }
    out
}

/// Widens degenerate ranges so a single-point series still gets an axis.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo > 1e-12 {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

struct Series<'a> {
    class: &'a str,
    label: &'a str,
    color: &'a str,
    points: Vec<(f64, f64)>,
}

fn panel(
    out: &mut String,
    top: f64,
    title: &str,
    y_title: &str,
    x: &Scale,
    y: &Scale,
    series: &[Series<'_>],
) {
    let (left, right) = (x.px0, x.px1);
    let (bottom, plot_top) = (y.px0, y.px1);
    out.push_str(&format!(
        "<text x=\"{left}\" y=\"{:.2}\" class=\"title\">{title}</text>\n",
        top + 16.0
    ));
    // Gridlines and y ticks.
    for (t, label) in ticks(y.lo, y.hi, 5) {
        let py = y.map(t);
        out.push_str(&format!(
            "<line x1=\"{left}\" y1=\"{py:.2}\" x2=\"{right}\" y2=\"{py:.2}\" class=\"grid\"/>\n"
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" class=\"tick\" text-anchor=\"end\">{label}</text>\n",
            left - 8.0,
            py + 4.0
        ));
    }
    // X ticks.
    for (t, label) in ticks(x.lo, x.hi, 8) {
        let px = x.map(t);
        out.push_str(&format!(
            "<line x1=\"{px:.2}\" y1=\"{bottom:.2}\" x2=\"{px:.2}\" y2=\"{:.2}\" class=\"tickmark\"/>\n",
            bottom + 5.0
        ));
        out.push_str(&format!(
            "<text x=\"{px:.2}\" y=\"{:.2}\" class=\"tick\" text-anchor=\"middle\">{label}</text>\n",
            bottom + 18.0
        ));
    }
    // Axes.
    out.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{bottom:.2}\" x2=\"{right}\" y2=\"{bottom:.2}\" class=\"axis\"/>\n"
    ));
    out.push_str(&format!(
        "<line x1=\"{left}\" y1=\"{bottom:.2}\" x2=\"{left}\" y2=\"{plot_top:.2}\" class=\"axis\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" class=\"axis-title\" text-anchor=\"middle\" \
         transform=\"rotate(-90 {:.2} {:.2})\">{y_title}</text>\n",
        left - 48.0,
        (bottom + plot_top) / 2.0,
        left - 48.0,
        (bottom + plot_top) / 2.0
    ));
    out.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" class=\"axis-title\" text-anchor=\"middle\">epoch</text>\n",
        (left + right) / 2.0,
        bottom + 36.0
    ));
    // Series: one polyline plus one circle per point.
    for s in series {
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(px, py)| format!("{:.2},{:.2}", x.map(px), y.map(py)))
            .collect();
        if pts.len() > 1 {
            out.push_str(&format!(
                "<polyline class=\"{}-line\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\" \
                 points=\"{}\"/>\n",
                s.class,
                s.color,
                pts.join(" ")
            ));
        }
        for &(px, py) in &s.points {
            out.push_str(&format!(
                "<circle class=\"{}\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{}\"/>\n",
                s.class,
                x.map(px),
                y.map(py),
                s.color
            ));
        }
    }
    // Legend, top right.
    let mut lx = right - 150.0;
    let ly = top + 16.0;
    for s in series {
        out.push_str(&format!(
            "<rect x=\"{lx:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
            ly - 9.0,
            s.color
        ));
        out.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{ly:.2}\" class=\"tick\">{}</text>\n",
            lx + 14.0,
            s.label
        ));
        lx += 75.0;
    }
}

/// Renders the full two-panel chart. Needs at least one metrics row.
pub fn render(metrics: &Metrics) -> Result<String> {
    if metrics.rows.is_empty() {
        return Err(Error::InvalidConfig("metrics CSV has no rows".into()));
    }
    let epochs: Vec<f64> = metrics.rows.iter().map(|r| r.epoch as f64).collect();
    let (ex_lo, ex_hi) = padded(
        epochs.iter().copied().fold(f64::INFINITY, f64::min),
        epochs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    );
    let max_loss = metrics
        .rows
        .iter()
        .flat_map(|r| [r.train_loss, r.val_loss])
        .fold(0.0f64, f64::max);
    let (loss_lo, loss_hi) = padded(0.0, max_loss * 1.05);

    let height = 2.0 * PANEL_HEIGHT;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{height}\" \
         viewBox=\"0 0 {WIDTH} {height}\">\n"
    ));
    out.push_str(
        "<style>\n\
         .title { font: bold 14px sans-serif; }\n\
         .axis-title { font: 12px sans-serif; }\n\
         .tick { font: 11px sans-serif; }\n\
         .axis { stroke: #333; stroke-width: 1; }\n\
         .tickmark { stroke: #333; stroke-width: 1; }\n\
         .grid { stroke: #ddd; stroke-width: 0.5; }\n\
         </style>\n",
    );
    out.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{height}\" fill=\"white\"/>\n"
    ));

    let x_scale = |_top: f64| Scale {
        lo: ex_lo,
        hi: ex_hi,
        px0: MARGIN_LEFT,
        px1: WIDTH - MARGIN_RIGHT,
    };

    // Panel 1: losses.
    let top1 = 0.0;
    let y1 = Scale {
        lo: loss_lo,
        hi: loss_hi,
        px0: top1 + PANEL_HEIGHT - MARGIN_BOTTOM,
        px1: top1 + MARGIN_TOP,
    };
    let loss_series = [
        Series {
            class: "train-loss",
            label: "train loss",
            color: TRAIN_LOSS_COLOR,
            points: metrics
                .rows
                .iter()
                .map(|r| (r.epoch as f64, r.train_loss))
                .collect(),
        },
        Series {
            class: "val-loss",
            label: "val loss",
            color: VAL_LOSS_COLOR,
            points: metrics
                .rows
                .iter()
                .map(|r| (r.epoch as f64, r.val_loss))
                .collect(),
        },
    ];
    panel(
        &mut out,
        top1,
        "Loss",
        "mean loss",
        &x_scale(top1),
        &y1,
        &loss_series,
    );

    // Panel 2: validation accuracy on a fixed [0, 1] axis.
    let top2 = PANEL_HEIGHT;
    let y2 = Scale {
        lo: 0.0,
        hi: 1.0,
        px0: top2 + PANEL_HEIGHT - MARGIN_BOTTOM,
        px1: top2 + MARGIN_TOP,
    };
    let acc_series = [Series {
        class: "val-acc",
        label: "val acc",
        color: VAL_ACC_COLOR,
        points: metrics
            .rows
            .iter()
            .map(|r| (r.epoch as f64, r.val_acc))
            .collect(),
    }];
    panel(
        &mut out,
        top2,
        "Validation accuracy",
        "accuracy",
        &x_scale(top2),
        &y2,
        &acc_series,
    );

    out.push_str("</svg>\n");
    Ok(out)
}
