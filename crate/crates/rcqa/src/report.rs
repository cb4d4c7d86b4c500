//! Evaluation reports: machine-readable metric summaries plus CSV and SVG
//! emitters for the risk–coverage curve and per-instance signal heatmaps.
//!
//! All emitters are pure functions of their inputs and format floats with
//! fixed precision, so byte-identical inputs yield byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Outcome;
use crate::decision::{self, Scope, ScoredInstance};
use crate::error::{Error, Result};
use crate::probes::SignalRecord;

/// Per-outcome tallies of a scored evaluation set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    #[serde(rename = "AD+")]
    pub ad_plus: usize,
    #[serde(rename = "AD-")]
    pub ad_minus: usize,
    #[serde(rename = "AN")]
    pub an: usize,
    #[serde(rename = "UN")]
    pub un: usize,
    #[serde(rename = "UD")]
    pub ud: usize,
}

impl OutcomeCounts {
    /// Count each outcome category.
    pub fn from_outcomes(outcomes: impl IntoIterator<Item = Outcome>) -> Self {
        let mut counts = Self::default();
        for outcome in outcomes {
            match outcome {
                Outcome::AdPlus => counts.ad_plus += 1,
                Outcome::AdMinus => counts.ad_minus += 1,
                Outcome::An => counts.an += 1,
                Outcome::Un => counts.un += 1,
                Outcome::Ud => counts.ud += 1,
            }
        }
        counts
    }

    /// Count each outcome category in `scored`.
    pub fn tally(scored: &[ScoredInstance]) -> Self {
        Self::from_outcomes(scored.iter().map(ScoredInstance::outcome))
    }

    /// Total instances across all categories.
    pub fn total(&self) -> usize {
        self.ad_plus + self.ad_minus + self.an + self.un + self.ud
    }
}

/// Headline metrics at one scale. `roc_auc` and `ap` are `None` when the
/// set does not support them (single-class or no-positive sets).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub scale: String,
    pub aurc: f64,
    pub roc_auc: Option<f64>,
    pub ap: Option<f64>,
}

impl MetricBlock {
    fn scaled(&self, factor: f64, scale: &str) -> MetricBlock {
        MetricBlock {
            scale: scale.to_owned(),
            aurc: self.aurc * factor,
            roc_auc: self.roc_auc.map(|v| v * factor),
            ap: self.ap.map(|v| v * factor),
        }
    }
}

/// One point of the risk–coverage curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RcPoint {
    pub coverage: f64,
    pub risk: f64,
}

/// Machine-readable evaluation summary for one confidence scorer.
///
/// Metrics appear twice: once on the raw `[0,1]` scale and once multiplied
/// by 100 for direct comparison with percentage tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub scorer: String,
    pub scope: Scope,
    pub instances: usize,
    pub outcome_counts: OutcomeCounts,
    pub metrics: MetricBlock,
    pub metrics_x100: MetricBlock,
    pub rc_curve: Vec<RcPoint>,
    /// Echo of the run configuration, when the caller has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

/// Map a metric that can be undefined on this set to `None`; propagate
/// every other failure.
fn optional_metric(result: Result<f64>) -> Result<Option<f64>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::MetricUndefined(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl RiskReport {
    /// Compute all metrics over a scored evaluation set.
    pub fn from_scored(
        scorer: &str,
        scope: Scope,
        scored: &[ScoredInstance],
        config: Option<serde_json::Value>,
    ) -> Result<RiskReport> {
        let rc_curve: Vec<RcPoint> = decision::rc_curve(scored)?
            .into_iter()
            .map(|(coverage, risk)| RcPoint { coverage, risk })
            .collect();
        let metrics = MetricBlock {
            scale: "raw".to_owned(),
            aurc: decision::aurc(scored)?,
            roc_auc: optional_metric(decision::roc_auc(scored))?,
            ap: optional_metric(decision::average_precision(scored))?,
        };
        let metrics_x100 = metrics.scaled(100.0, "x100");
        Ok(RiskReport {
            scorer: scorer.to_owned(),
            scope,
            instances: scored.len(),
            outcome_counts: OutcomeCounts::tally(scored),
            metrics,
            metrics_x100,
            rc_curve,
            config,
        })
    }

    /// Write the report as pretty-printed JSON with a trailing newline.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::InvalidInput(format!("report serialization failed: {e}")))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Read a report back from JSON.
    pub fn load(path: impl AsRef<Path>) -> Result<RiskReport> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::DataFormat {
                path: path.display().to_string(),
                line: e.line(),
                message: e.to_string(),
            }
        })
    }
}

/// Write a risk–coverage curve as CSV: a `coverage,risk` header followed by
/// one point per line, full float precision.
pub fn write_rc_csv(path: impl AsRef<Path>, curve: &[(f64, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from("coverage,risk\n");
    for &(coverage, risk) in curve {
        let _ = writeln!(text, "{coverage},{risk}");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Read a `coverage,risk` CSV back into curve points.
pub fn read_rc_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let bad = |line: usize, message: String| Error::DataFormat {
        path: path.display().to_string(),
        line: line + 1,
        message,
    };
    match lines.next() {
        Some((_, "coverage,risk")) => {}
        Some((i, other)) => {
            return Err(bad(i, format!("expected header 'coverage,risk', got {other:?}")))
        }
        None => return Err(bad(0, "empty file".to_owned())),
    }
    let mut curve = Vec::new();
    for (i, line) in lines {
        let (cov, risk) = line
            .split_once(',')
            .ok_or_else(|| bad(i, "expected two comma-separated fields".to_owned()))?;
        let parse = |field: &str| {
            field
                .parse::<f64>()
                .map_err(|e| bad(i, format!("bad float {field:?}: {e}")))
        };
        curve.push((parse(cov)?, parse(risk)?));
    }
    Ok(curve)
}

// Fixed chart geometry. Everything is in user units of the SVG viewBox, and
// all coordinates are printed with two decimals so output is reproducible.
const CHART_W: f64 = 640.0;
const CHART_H: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 52.0;

fn x_pixel(coverage: f64) -> f64 {
    MARGIN_L + coverage * (CHART_W - MARGIN_L - MARGIN_R)
}

fn y_pixel(risk: f64, risk_max: f64) -> f64 {
    let plot_h = CHART_H - MARGIN_T - MARGIN_B;
    CHART_H - MARGIN_B - (risk / risk_max) * plot_h
}

/// Escape the five XML-special characters for embedding text in SVG.
fn xml_escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

/// Render a risk–coverage curve as a standalone SVG line chart.
///
/// The x axis is coverage in `[0,1]`; the y axis spans from zero to the
/// largest risk in the curve (or 1.0 when the curve is flat at zero) with
/// a little headroom. Errors on an empty curve.
pub fn rc_curve_svg(title: &str, curve: &[(f64, f64)]) -> Result<String> {
    if curve.is_empty() {
        return Err(Error::EmptyInput("rc_curve_svg needs at least one point".to_owned()));
    }
    for &(coverage, risk) in curve {
        if !(0.0..=1.0).contains(&coverage) || !(0.0..=1.0).contains(&risk) {
            return Err(Error::InvalidInput(format!(
                "rc-curve point ({coverage}, {risk}) outside [0,1]"
            )));
        }
    }
    let peak = curve.iter().map(|&(_, r)| r).fold(0.0, f64::max);
    let risk_max = if peak > 0.0 { (peak * 1.1).min(1.0) } else { 1.0 };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {CHART_W} {CHART_H}\" \
         font-family=\"sans-serif\" font-size=\"13\">"
    );
    let _ = writeln!(svg, "<rect width=\"{CHART_W}\" height=\"{CHART_H}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{}</text>",
        (MARGIN_L + CHART_W - MARGIN_R) / 2.0,
        xml_escape(title)
    );

    // Axes.
    let x0 = x_pixel(0.0);
    let x1 = x_pixel(1.0);
    let y0 = y_pixel(0.0, risk_max);
    let y1 = y_pixel(risk_max, risk_max);
    let _ = writeln!(
        svg,
        "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x1:.2}\" y2=\"{y0:.2}\" stroke=\"black\"/>"
    );
    let _ = writeln!(
        svg,
        "<line x1=\"{x0:.2}\" y1=\"{y0:.2}\" x2=\"{x0:.2}\" y2=\"{y1:.2}\" stroke=\"black\"/>"
    );

    // Ticks: five segments on each axis.
    for i in 0..=5 {
        let frac = f64::from(i) / 5.0;
        let tx = x_pixel(frac);
        let _ = writeln!(
            svg,
            "<line x1=\"{tx:.2}\" y1=\"{y0:.2}\" x2=\"{tx:.2}\" y2=\"{:.2}\" stroke=\"black\"/>",
            y0 + 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{tx:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{frac:.1}</text>",
            y0 + 20.0
        );
        let ty = y_pixel(frac * risk_max, risk_max);
        let _ = writeln!(
            svg,
            "<line x1=\"{:.2}\" y1=\"{ty:.2}\" x2=\"{x0:.2}\" y2=\"{ty:.2}\" stroke=\"black\"/>",
            x0 - 5.0
        );
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{:.3}</text>",
            x0 - 9.0,
            ty + 4.0,
            frac * risk_max
        );
    }

    // Axis labels.
    let _ = writeln!(
        svg,
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">coverage</text>",
        (x0 + x1) / 2.0,
        CHART_H - 12.0
    );
    let _ = writeln!(
        svg,
        "<text x=\"16\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {:.2})\">risk</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    // The curve itself.
    let mut points = String::new();
    for &(coverage, risk) in curve {
        let _ = write!(
            points,
            "{:.2},{:.2} ",
            x_pixel(coverage),
            y_pixel(risk, risk_max)
        );
    }
    let _ = writeln!(
        svg,
        "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"2\" points=\"{}\"/>",
        points.trim_end()
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Map a probability in `[0,1]` to a grayscale fill, brightness
/// proportional to the value (0 → black, 1 → white).
fn gray_fill(value: f64) -> String {
    let level = (value.clamp(0.0, 1.0) * 255.0).round() as u8;
    format!("#{level:02x}{level:02x}{level:02x}")
}

/// Render one instance's layerwise probe signals as an SVG heatmap.
///
/// Two blocks (start-position signals on top, end-position signals below),
/// each with one row per layer — bottom layer first — and one column per
/// passage slot. Cell brightness is proportional to the probe probability.
pub fn signal_heatmap_svg(record: &SignalRecord) -> Result<String> {
    if record.signals.is_empty() {
        return Err(Error::EmptyInput(format!(
            "signal record {:?} has no layers",
            record.qid
        )));
    }
    let layers = record.signals.len();
    let slots = record.signals[0].start.len();
    for (t, layer) in record.signals.iter().enumerate() {
        if layer.start.len() != slots || layer.end.len() != slots {
            return Err(Error::Shape(format!(
                "signal record {:?}: layer {} has ragged slot counts",
                record.qid,
                t + 1
            )));
        }
    }

    const CELL: f64 = 12.0;
    const LEFT: f64 = 96.0;
    const TOP: f64 = 34.0;
    const BLOCK_GAP: f64 = 30.0;
    let grid_w = slots as f64 * CELL;
    let grid_h = layers as f64 * CELL;
    let width = LEFT + grid_w + 16.0;
    let height = TOP + 2.0 * grid_h + BLOCK_GAP + 40.0;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {width:.2} {height:.2}\" \
         font-family=\"sans-serif\" font-size=\"11\">"
    );
    let _ = writeln!(svg, "<rect width=\"{width:.2}\" height=\"{height:.2}\" fill=\"white\"/>");
    let _ = writeln!(
        svg,
        "<text x=\"{LEFT:.2}\" y=\"18\" font-size=\"13\">{} ({})</text>",
        xml_escape(&record.qid),
        xml_escape(&serde_json::to_string(&record.outcome).unwrap_or_default().replace('"', ""))
    );

    for (block, label) in [(0usize, "start"), (1usize, "end")] {
        let block_top = TOP + block as f64 * (grid_h + BLOCK_GAP);
        let _ = writeln!(
            svg,
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{label}</text>",
            LEFT - 8.0,
            block_top - 6.0
        );
        for (row, layer) in record.signals.iter().enumerate() {
            // Deepest layer on the top row, input-adjacent layer at the bottom.
            let y = block_top + (layers - 1 - row) as f64 * CELL;
            let values = if block == 0 { &layer.start } else { &layer.end };
            let _ = writeln!(
                svg,
                "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">L{}</text>",
                LEFT - 8.0,
                y + CELL - 3.0,
                row + 1
            );
            for (col, &value) in values.iter().enumerate() {
                let x = LEFT + col as f64 * CELL;
                let _ = writeln!(
                    svg,
                    "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{CELL:.2}\" height=\"{CELL:.2}\" \
                     fill=\"{}\" stroke=\"#cccccc\" stroke-width=\"0.5\"/>",
                    gray_fill(value)
                );
            }
        }
    }
    let _ = writeln!(
        svg,
        "<text x=\"{LEFT:.2}\" y=\"{:.2}\">columns: passage positions; brightness: signal value</text>",
        height - 12.0
    );
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Prediction, Span};
    use crate::probes::LayerSignals;

    fn scored(rows: &[(f64, Outcome)]) -> Vec<ScoredInstance> {
        rows.iter()
            .enumerate()
            .map(|(i, &(c, o))| ScoredInstance::widened(format!("q{i}"), o, c).unwrap())
            .collect()
    }

    #[test]
    fn report_counts_and_metrics_match_components() {
        let set = scored(&[
            (0.9, Outcome::AdPlus),
            (0.7, Outcome::AdMinus),
            (0.5, Outcome::AdPlus),
            (0.2, Outcome::Ud),
        ]);
        let report = RiskReport::from_scored("proba", Scope::Direct, &set, None).unwrap();
        assert_eq!(report.instances, 4);
        assert_eq!(report.outcome_counts.ad_plus, 2);
        assert_eq!(report.outcome_counts.ad_minus, 1);
        assert_eq!(report.outcome_counts.ud, 1);
        assert_eq!(report.outcome_counts.total(), 4);
        assert_eq!(report.metrics.aurc, decision::aurc(&set).unwrap());
        assert_eq!(report.metrics.roc_auc, Some(decision::roc_auc(&set).unwrap()));
        assert_eq!(report.metrics.ap, Some(decision::average_precision(&set).unwrap()));
        assert_eq!(report.rc_curve.len(), 4);
        assert_eq!(report.metrics.scale, "raw");
        assert_eq!(report.metrics_x100.scale, "x100");
    }

    #[test]
    fn x100_block_is_exactly_100_times_raw() {
        let set = scored(&[
            (0.9, Outcome::AdPlus),
            (0.4, Outcome::AdMinus),
            (0.6, Outcome::AdPlus),
        ]);
        let report = RiskReport::from_scored("proba", Scope::Direct, &set, None).unwrap();
        assert_eq!(report.metrics_x100.aurc, report.metrics.aurc * 100.0);
        assert_eq!(
            report.metrics_x100.roc_auc.unwrap(),
            report.metrics.roc_auc.unwrap() * 100.0
        );
        assert_eq!(report.metrics_x100.ap.unwrap(), report.metrics.ap.unwrap() * 100.0);
    }

    #[test]
    fn perfect_scorer_reports_roc_and_ap_of_one() {
        // Oracle-style confidences: 1 on correct, 0 on errors.
        let set = scored(&[
            (1.0, Outcome::AdPlus),
            (0.0, Outcome::AdMinus),
            (1.0, Outcome::AdPlus),
            (0.0, Outcome::Ud),
        ]);
        let report = RiskReport::from_scored("oracle", Scope::Direct, &set, None).unwrap();
        assert_eq!(report.metrics.roc_auc, Some(1.0));
        assert_eq!(report.metrics.ap, Some(1.0));
    }

    #[test]
    fn undefined_metrics_become_none_and_serialize_as_null() {
        // All-positive set: ROC needs both classes; AP is still defined.
        let set = scored(&[(0.9, Outcome::AdPlus), (0.4, Outcome::AdPlus)]);
        let report = RiskReport::from_scored("proba", Scope::Direct, &set, None).unwrap();
        assert_eq!(report.metrics.roc_auc, None);
        assert_eq!(report.metrics.ap, Some(1.0));
        let json = serde_json::to_value(&report).unwrap();
        assert!(json["metrics"]["roc_auc"].is_null());

        // All-negative set: both ROC and AP are undefined.
        let set = scored(&[(0.9, Outcome::AdMinus), (0.4, Outcome::Ud)]);
        let report = RiskReport::from_scored("proba", Scope::Direct, &set, None).unwrap();
        assert_eq!(report.metrics.roc_auc, None);
        assert_eq!(report.metrics.ap, None);
    }

    #[test]
    fn report_round_trips_through_json_with_config_echo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        let set = scored(&[
            (0.9, Outcome::AdPlus),
            (0.7, Outcome::An),
            (0.4, Outcome::AdMinus),
        ]);
        let config = serde_json::json!({"seed": 7, "target_risk": 0.1});
        let report =
            RiskReport::from_scored("probe-cnn", Scope::All, &set, Some(config)).unwrap();
        report.save(&path).unwrap();
        let loaded = RiskReport::load(&path).unwrap();
        assert_eq!(loaded, report);
        assert_eq!(loaded.config.as_ref().unwrap()["seed"], 7);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn report_save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let set = scored(&[(0.9, Outcome::AdPlus), (0.3, Outcome::AdMinus)]);
        let report = RiskReport::from_scored("ens", Scope::Direct, &set, None).unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        report.save(&a).unwrap();
        report.save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn rc_csv_round_trips_and_has_one_line_per_point() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rc.csv");
        let set = scored(&[
            (0.9, Outcome::AdPlus),
            (0.7, Outcome::AdMinus),
            (0.5, Outcome::AdPlus),
        ]);
        let curve = decision::rc_curve(&set).unwrap();
        write_rc_csv(&path, &curve).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), curve.len() + 1);
        assert!(text.starts_with("coverage,risk\n"));
        assert_eq!(read_rc_csv(&path).unwrap(), curve);
    }

    #[test]
    fn rc_csv_rejects_bad_header_and_bad_floats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rc.csv");
        fs::write(&path, "risk,coverage\n0.5,0.1\n").unwrap();
        let err = read_rc_csv(&path).unwrap_err();
        assert!(err.to_string().contains("expected header"), "{err}");
        fs::write(&path, "coverage,risk\n0.5,oops\n").unwrap();
        let err = read_rc_csv(&path).unwrap_err();
        assert!(err.to_string().contains("bad float"), "{err}");
        assert!(err.to_string().contains(":2:"), "line number missing: {err}");
    }

    #[test]
    fn rc_svg_is_deterministic_and_well_formed() {
        let curve = vec![(1.0 / 3.0, 0.0), (2.0 / 3.0, 0.5), (1.0, 1.0 / 3.0)];
        let a = rc_curve_svg("risk-coverage: proba", &curve).unwrap();
        let b = rc_curve_svg("risk-coverage: proba", &curve).unwrap();
        assert_eq!(a, b);
        assert!(a.starts_with("<svg"));
        assert!(a.trim_end().ends_with("</svg>"));
        assert!(a.contains("<polyline"));
        assert!(a.contains("coverage"));
        // One polyline point per curve point.
        let points_attr = a.split("points=\"").nth(1).unwrap();
        let points_attr = points_attr.split('"').next().unwrap();
        assert_eq!(points_attr.split_whitespace().count(), curve.len());
    }

    #[test]
    fn rc_svg_escapes_titles_and_rejects_bad_input() {
        let svg = rc_curve_svg("a<b & \"c\"", &[(1.0, 0.0)]).unwrap();
        assert!(svg.contains("a&lt;b &amp; &quot;c&quot;"));
        assert!(rc_curve_svg("t", &[]).is_err());
        assert!(rc_curve_svg("t", &[(1.5, 0.0)]).is_err());
    }

    #[test]
    fn heatmap_svg_draws_every_cell_in_both_blocks() {
        let record = SignalRecord {
            qid: "q7".into(),
            outcome: Outcome::AdPlus,
            prediction: Prediction::Direct {
                span: Span::new(1, 2).unwrap(),
                score: 0.8,
            },
            signals: vec![
                LayerSignals {
                    start: vec![0.25; 4],
                    end: vec![0.25; 4],
                },
                LayerSignals {
                    start: vec![1.0, 0.0, 0.0, 0.0],
                    end: vec![0.0, 0.0, 0.0, 1.0],
                },
            ],
        };
        let svg = signal_heatmap_svg(&record).unwrap();
        assert_eq!(svg, signal_heatmap_svg(&record).unwrap());
        // 2 blocks x 2 layers x 4 slots of cells, plus the background rect.
        assert_eq!(svg.matches("<rect").count(), 2 * 2 * 4 + 1);
        assert!(svg.contains("#ffffff")); // value 1.0 → white
        assert!(svg.contains("#000000")); // value 0.0 → black
        assert!(svg.contains("q7"));
        assert!(svg.contains("AD+"));
        assert!(svg.contains(">start<"));
        assert!(svg.contains(">end<"));
    }

    #[test]
    fn heatmap_svg_rejects_empty_and_ragged_records() {
        let empty = SignalRecord {
            qid: "q0".into(),
            outcome: Outcome::Un,
            prediction: Prediction::Null,
            signals: vec![],
        };
        assert!(signal_heatmap_svg(&empty).is_err());
        let ragged = SignalRecord {
            qid: "q1".into(),
            outcome: Outcome::Un,
            prediction: Prediction::Null,
            signals: vec![
                LayerSignals {
                    start: vec![0.5, 0.5],
                    end: vec![0.5, 0.5],
                },
                LayerSignals {
                    start: vec![1.0],
                    end: vec![0.5, 0.5],
                },
            ],
        };
        assert!(signal_heatmap_svg(&ragged).is_err());
    }

    #[test]
    fn gray_fill_spans_full_range() {
        assert_eq!(gray_fill(0.0), "#000000");
        assert_eq!(gray_fill(1.0), "#ffffff");
        assert_eq!(gray_fill(0.5), "#808080");
        assert_eq!(gray_fill(2.0), "#ffffff"); // clamped
    }
}
