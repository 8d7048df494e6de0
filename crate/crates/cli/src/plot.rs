//! Deterministic plotting: every plot is an SVG rendered from scratch
//! plus the underlying CSV, so artifacts diff cleanly across runs.

use crate::{usage, CliError, PlotArgs};
use clap::ValueEnum;
use ressl_core::error::Error as CoreError;
use ressl_core::metrics::{read_metrics, MetricsRow};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotKind {
    /// Learning rate per step
    #[value(name = "lr_curve", alias = "lr-curve")]
    LrCurve,
    /// Training loss per step
    #[value(name = "loss_curve", alias = "loss-curve")]
    LossCurve,
    /// Mean teacher entropy per step
    #[value(name = "entropy_curve", alias = "entropy-curve")]
    EntropyCurve,
    /// Top-1 per sweep row
    #[value(name = "sweep_bar", alias = "sweep-bar")]
    SweepBar,
}

impl PlotKind {
    fn stem(self) -> &'static str {
        match self {
            PlotKind::LrCurve => "lr_curve",
            PlotKind::LossCurve => "loss_curve",
            PlotKind::EntropyCurve => "entropy_curve",
            PlotKind::SweepBar => "sweep_bar",
        }
    }

    fn y_label(self) -> &'static str {
        match self {
            PlotKind::LrCurve => "lr",
            PlotKind::LossCurve => "loss",
            PlotKind::EntropyCurve => "teacher_entropy",
            PlotKind::SweepBar => "top1",
        }
    }
}

pub fn cmd_plot(out: &Option<PathBuf>, args: &PlotArgs) -> Result<(), CliError> {
    let out_dir = out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out_dir).map_err(|e| CoreError::io(&out_dir, e))?;
    let svg_path = out_dir.join(format!("{}.svg", args.kind.stem()));
    let csv_path = out_dir.join(format!("{}.csv", args.kind.stem()));
    let points = match args.kind {
        PlotKind::SweepBar => {
            let bars = read_sweep_csv(&args.input)?;
            let csv = bars_csv(&bars);
            let svg = bar_chart(&format!("top1 by {}", bars_axis(&bars)), &bars);
            std::fs::write(&csv_path, csv).map_err(|e| CoreError::io(&csv_path, e))?;
            std::fs::write(&svg_path, svg).map_err(|e| CoreError::io(&svg_path, e))?;
            bars.len()
        }
        kind => {
            let series = read_step_series(&args.input, kind)?;
            let csv = series_csv(&series, kind.y_label());
            let svg = line_chart(
                &format!("{} over steps", kind.y_label()),
                kind.y_label(),
                &series,
            );
            std::fs::write(&csv_path, csv).map_err(|e| CoreError::io(&csv_path, e))?;
            std::fs::write(&svg_path, svg).map_err(|e| CoreError::io(&svg_path, e))?;
            series.len()
        }
    };
    crate::print_json(&serde_json::json!({
        "kind": args.kind.stem(),
        "svg": svg_path.display().to_string(),
        "csv": csv_path.display().to_string(),
        "points": points,
    }));
    Ok(())
}

fn read_step_series(path: &Path, kind: PlotKind) -> Result<Vec<(f64, f64)>, CliError> {
    let rows = read_metrics(path)?;
    let series: Vec<(f64, f64)> = rows
        .iter()
        .filter_map(|row| match row {
            MetricsRow::Step {
                step,
                lr,
                loss,
                teacher_entropy,
                ..
            } => {
                let y = match kind {
                    PlotKind::LrCurve => *lr,
                    PlotKind::LossCurve => *loss,
                    PlotKind::EntropyCurve => *teacher_entropy,
                    PlotKind::SweepBar => unreachable!("bar input handled separately"),
                };
                Some((*step as f64, y))
            }
            MetricsRow::Epoch { .. } => None,
        })
        .collect();
    if series.is_empty() {
        return Err(CliError::Runtime(CoreError::Format {
            path: path.to_path_buf(),
            reason: "no per-step metric rows to plot".to_string(),
        }));
    }
    Ok(series)
}

/// One sweep-results row: axis name, value label, top1 when the row
/// succeeded.
struct Bar {
    axis: String,
    value: String,
    top1: Option<f64>,
}

fn read_sweep_csv(path: &Path) -> Result<Vec<Bar>, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Runtime(CoreError::io(path, e)))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if !header.starts_with("axis,value,top1") {
        return Err(usage(format!(
            "{} is not a sweep results CSV (unexpected header '{header}')",
            path.display()
        )));
    }
    let mut bars = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 4 {
            return Err(CliError::Runtime(CoreError::Format {
                path: path.to_path_buf(),
                reason: format!("malformed results row '{line}'"),
            }));
        }
        bars.push(Bar {
            axis: fields[0].to_string(),
            value: fields[1].to_string(),
            top1: fields[2].parse::<f64>().ok(),
        });
    }
    if bars.is_empty() {
        return Err(CliError::Runtime(CoreError::Format {
            path: path.to_path_buf(),
            reason: "no sweep rows to plot".to_string(),
        }));
    }
    Ok(bars)
}

fn bars_axis(bars: &[Bar]) -> String {
    bars.first().map(|b| b.axis.clone()).unwrap_or_default()
}

fn series_csv(series: &[(f64, f64)], y_name: &str) -> String {
    let mut out = format!("step,{y_name}\n");
    for (x, y) in series {
        let _ = writeln!(out, "{x},{y}");
    }
    out
}

fn bars_csv(bars: &[Bar]) -> String {
    let mut out = String::from("value,top1\n");
    for b in bars {
        let top1 = b.top1.map(|v| format!("{v:.4}")).unwrap_or_default();
        let _ = writeln!(out, "{},{}", b.value, top1);
    }
    out
}

const W: f64 = 800.0;
const H: f64 = 480.0;
const ML: f64 = 78.0;
const MR: f64 = 24.0;
const MT: f64 = 48.0;
const MB: f64 = 56.0;

fn svg_open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\">\n\
         <rect width=\"{W}\" height=\"{H}\" fill=\"#ffffff\"/>\n"
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"26\" font-size=\"15\" fill=\"#111111\">{}</text>",
        ML,
        xml_escape(title)
    );
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Maps a data range to pixel coordinates with a 5% pad; flat ranges get
/// a symmetric epsilon so the line stays visible.
struct Scale {
    lo: f64,
    span: f64,
    px_lo: f64,
    px_span: f64,
}

impl Scale {
    fn fit(values: impl Iterator<Item = f64>, px_lo: f64, px_hi: f64, invert: bool) -> Scale {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in values {
            if v < lo {
                lo = v;
            }
            if v > hi {
                hi = v;
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            lo = 0.0;
            hi = 1.0;
        }
        let pad = if hi > lo { 0.05 * (hi - lo) } else { hi.abs().max(0.5) * 0.1 };
        lo -= pad;
        hi += pad;
        let (px_lo, px_span) = if invert {
            (px_hi, px_lo - px_hi)
        } else {
            (px_lo, px_hi - px_lo)
        };
        Scale {
            lo,
            span: hi - lo,
            px_lo,
            px_span,
        }
    }

    fn px(&self, v: f64) -> f64 {
        self.px_lo + (v - self.lo) / self.span * self.px_span
    }

    fn ticks(&self, n: usize) -> Vec<f64> {
        (0..=n)
            .map(|i| self.lo + self.span * i as f64 / n as f64)
            .collect()
    }
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let a = v.abs();
    if a >= 1000.0 {
        format!("{v:.0}")
    } else if a >= 1.0 {
        format!("{v:.2}")
    } else if a >= 0.001 {
        format!("{v:.4}")
    } else {
        format!("{v:.1e}")
    }
}

fn line_chart(title: &str, y_label: &str, series: &[(f64, f64)]) -> String {
    let xs = Scale::fit(series.iter().map(|p| p.0), ML, W - MR, false);
    let ys = Scale::fit(series.iter().map(|p| p.1), MT, H - MB, true);
    let mut s = svg_open(title);
    // Grid and tick labels.
    for t in ys.ticks(5) {
        let y = ys.px(t);
        let _ = writeln!(
            s,
            "<line x1=\"{ML}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>",
            W - MR
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#333333\" text-anchor=\"end\">{}</text>",
            ML - 6.0,
            y + 4.0,
            tick_label(t)
        );
    }
    for t in xs.ticks(5) {
        let x = xs.px(t);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{MT}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#eeeeee\"/>",
            H - MB
        );
        let _ = writeln!(
            s,
            "<text x=\"{x:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#333333\" text-anchor=\"middle\">{}</text>",
            H - MB + 18.0,
            tick_label(t)
        );
    }
    // Axes.
    let _ = writeln!(
        s,
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"#111111\"/>",
        H - MB
    );
    let _ = writeln!(
        s,
        "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#111111\"/>",
        H - MB,
        W - MR,
        H - MB
    );
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" fill=\"#111111\" text-anchor=\"middle\">step</text>",
        (ML + W - MR) / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        s,
        "<text x=\"20\" y=\"{:.1}\" font-size=\"12\" fill=\"#111111\" \
         transform=\"rotate(-90 20 {:.1})\" text-anchor=\"middle\">{}</text>",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0,
        xml_escape(y_label)
    );
    // The series itself.
    let mut points = String::new();
    for (x, y) in series {
        let _ = write!(points, "{:.2},{:.2} ", xs.px(*x), ys.px(*y));
    }
    let _ = writeln!(
        s,
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\"/>",
        points.trim_end()
    );
    s.push_str("</svg>\n");
    s
}

fn bar_chart(title: &str, bars: &[Bar]) -> String {
    let ys = Scale::fit(
        bars.iter().filter_map(|b| b.top1).chain(std::iter::once(0.0)),
        MT,
        H - MB,
        true,
    );
    let mut s = svg_open(title);
    for t in ys.ticks(5) {
        let y = ys.px(t);
        let _ = writeln!(
            s,
            "<line x1=\"{ML}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#dddddd\"/>",
            W - MR
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#333333\" text-anchor=\"end\">{}</text>",
            ML - 6.0,
            y + 4.0,
            tick_label(t)
        );
    }
    let _ = writeln!(
        s,
        "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"#111111\"/>",
        H - MB
    );
    let _ = writeln!(
        s,
        "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#111111\"/>",
        H - MB,
        W - MR,
        H - MB
    );
    let span = W - ML - MR;
    let slot = span / bars.len() as f64;
    let bar_w = (slot * 0.6).min(80.0);
    let base = ys.px(0.0_f64.max(ys.lo));
    for (i, b) in bars.iter().enumerate() {
        let cx = ML + slot * (i as f64 + 0.5);
        match b.top1 {
            Some(v) => {
                let top = ys.px(v);
                let _ = writeln!(
                    s,
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"#1f77b4\"/>",
                    cx - bar_w / 2.0,
                    top.min(base),
                    bar_w,
                    (base - top).abs()
                );
                let _ = writeln!(
                    s,
                    "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#111111\" text-anchor=\"middle\">{}</text>",
                    cx,
                    top.min(base) - 6.0,
                    tick_label(v)
                );
            }
            None => {
                let _ = writeln!(
                    s,
                    "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#aa2222\" text-anchor=\"middle\">failed</text>",
                    cx,
                    base - 6.0
                );
            }
        }
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" fill=\"#111111\" text-anchor=\"middle\">{}</text>",
            cx,
            H - MB + 18.0,
            xml_escape(&b.value)
        );
    }
    s.push_str("</svg>\n");
    s
}
