//! Accuracy-curve plots rendered as standalone SVG.
//!
//! One polyline per strategy plus a dashed line for selection accuracy,
//! with axes, ticks, and a legend. The output contains nothing
//! nondeterministic, so the same report always renders byte-identical
//! markup.

use std::fs;
use std::path::Path;

use crate::error::Result;
use crate::harness::report::RunReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 56.0;
const MARGIN_RIGHT: f64 = 160.0;
const MARGIN_TOP: f64 = 32.0;
const MARGIN_BOTTOM: f64 = 48.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const SELECTION_COLOR: &str = "#7f7f7f";

fn x_at(stage: usize, num_tasks: usize) -> f64 {
    let span = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    if num_tasks <= 1 {
        return MARGIN_LEFT + span / 2.0;
    }
    MARGIN_LEFT + span * (stage - 1) as f64 / (num_tasks - 1) as f64
}

fn y_at(accuracy: f64) -> f64 {
    MARGIN_TOP + (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM) * (1.0 - accuracy)
}

fn polyline(values: &[f64], num_tasks: usize, color: &str, dashed: bool) -> String {
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, &a)| format!("{:.2},{:.2}", x_at(i + 1, num_tasks), y_at(a)))
        .collect();
    let dash = if dashed { " stroke-dasharray=\"6 4\"" } else { "" };
    format!(
        "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"{dash} points=\"{}\"/>\n",
        points.join(" ")
    )
}

/// Render the report's accuracy curves as a complete SVG document.
pub fn render_curves(report: &RunReport) -> String {
    let t = report.num_tasks;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH:.0} {HEIGHT:.0}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH:.0}\" height=\"{HEIGHT:.0}\" fill=\"white\"/>\n"
    ));

    for i in 0..=4 {
        let a = i as f64 / 4.0;
        let y = y_at(a);
        svg.push_str(&format!(
            "  <line x1=\"{:.2}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#dddddd\"/>\n",
            MARGIN_LEFT,
            WIDTH - MARGIN_RIGHT
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{a:.2}</text>\n",
            MARGIN_LEFT - 8.0,
            y + 4.0
        ));
    }
    for stage in 1..=t {
        let x = x_at(stage, t);
        svg.push_str(&format!(
            "  <text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{stage}</text>\n",
            HEIGHT - MARGIN_BOTTOM + 20.0
        ));
    }
    svg.push_str(&format!(
        "  <line x1=\"{l:.2}\" y1=\"{b:.2}\" x2=\"{r:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>\n",
        l = MARGIN_LEFT,
        r = WIDTH - MARGIN_RIGHT,
        b = HEIGHT - MARGIN_BOTTOM
    ));
    svg.push_str(&format!(
        "  <line x1=\"{l:.2}\" y1=\"{t:.2}\" x2=\"{l:.2}\" y2=\"{b:.2}\" stroke=\"black\"/>\n",
        l = MARGIN_LEFT,
        t = MARGIN_TOP,
        b = HEIGHT - MARGIN_BOTTOM
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">stage</text>\n",
        (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        HEIGHT - 8.0
    ));
    svg.push_str(&format!(
        "  <text x=\"14\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {0:.2})\">accuracy</text>\n",
        (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2.0
    ));

    let legend_x = WIDTH - MARGIN_RIGHT + 16.0;
    let mut legend_y = MARGIN_TOP + 8.0;
    for (i, (name, outcome)) in report.strategies.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        svg.push_str(&polyline(&outcome.per_stage, t, color, false));
        svg.push_str(&format!(
            "  <line x1=\"{legend_x:.2}\" y1=\"{legend_y:.2}\" x2=\"{:.2}\" y2=\"{legend_y:.2}\" \
             stroke=\"{color}\" stroke-width=\"2\"/>\n",
            legend_x + 24.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{:.2}\" y=\"{:.2}\">{name}</text>\n",
            legend_x + 30.0,
            legend_y + 4.0
        ));
        legend_y += 18.0;
    }
    svg.push_str(&polyline(&report.selection_accuracy, t, SELECTION_COLOR, true));
    svg.push_str(&format!(
        "  <line x1=\"{legend_x:.2}\" y1=\"{legend_y:.2}\" x2=\"{:.2}\" y2=\"{legend_y:.2}\" \
         stroke=\"{SELECTION_COLOR}\" stroke-width=\"2\" stroke-dasharray=\"6 4\"/>\n",
        legend_x + 24.0
    ));
    svg.push_str(&format!(
        "  <text x=\"{:.2}\" y=\"{:.2}\">selection</text>\n",
        legend_x + 30.0,
        legend_y + 4.0
    ));

    svg.push_str("</svg>\n");
    svg
}

/// Validate the report and write its curves to `path`.
pub fn write_plot(report: &RunReport, path: &Path) -> Result<()> {
    report.validate()?;
    fs::write(path, render_curves(report))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ExperimentConfig;
    use crate::inference::StrategyKind;
    use std::collections::BTreeMap;

    fn sample_report(stages: usize) -> RunReport {
        let mut per_strategy = BTreeMap::new();
        let curve: Vec<f64> = (0..stages).map(|i| 1.0 - 0.1 * i as f64).collect();
        per_strategy.insert(StrategyKind::Ensemble, curve.clone());
        per_strategy.insert(StrategyKind::MaxLogit, curve.iter().map(|a| a - 0.05).collect());
        let selection = vec![0.9; stages];
        RunReport::new(stages, per_strategy, selection, ExperimentConfig::default())
    }

    #[test]
    fn renders_one_curve_per_strategy_plus_selection() {
        let svg = render_curves(&sample_report(4));
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert!(svg.contains(">ensemble</text>"));
        assert!(svg.contains(">max_logit</text>"));
        assert!(svg.contains(">selection</text>"));
        assert!(svg.starts_with("<svg "));
        assert!(svg.ends_with("</svg>\n"));
    }

    #[test]
    fn coordinates_follow_the_axis_mapping() {
        let report = sample_report(3);
        let svg = render_curves(&report);
        let first = format!("{:.2},{:.2}", x_at(1, 3), y_at(1.0));
        let last = format!("{:.2},{:.2}", x_at(3, 3), y_at(0.8));
        assert!(svg.contains(&first), "missing first point {first}");
        assert!(svg.contains(&last), "missing last point {last}");
        assert_eq!(x_at(1, 3), MARGIN_LEFT);
        assert_eq!(x_at(3, 3), WIDTH - MARGIN_RIGHT);
        assert_eq!(y_at(1.0), MARGIN_TOP);
        assert_eq!(y_at(0.0), HEIGHT - MARGIN_BOTTOM);
    }

    #[test]
    fn single_stage_report_renders_without_axis_collapse() {
        let svg = render_curves(&sample_report(1));
        assert!(svg.contains("<polyline"));
        assert!(x_at(1, 1) > MARGIN_LEFT && x_at(1, 1) < WIDTH - MARGIN_RIGHT);
    }

    #[test]
    fn rendering_is_deterministic() {
        let report = sample_report(5);
        assert_eq!(render_curves(&report), render_curves(&report));
    }

    #[test]
    fn write_plot_validates_and_writes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.svg");
        write_plot(&sample_report(2), &path).unwrap();
        let on_disk = fs::read_to_string(&path).unwrap();
        assert_eq!(on_disk, render_curves(&sample_report(2)));

        let mut broken = sample_report(2);
        broken.selection_accuracy.pop();
        assert!(write_plot(&broken, &path).is_err());
    }
}
