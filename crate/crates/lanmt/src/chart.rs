//! Minimal deterministic SVG line charts for the report artifacts.

use crate::error::Result;
use crate::evaluation::{PerStepRow, TradeoffRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 72.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 44.0;
const MARGIN_BOTTOM: f64 = 56.0;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone)]
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if !(0.001..10000.0).contains(&a) {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

/// Data range padded by 5%, widened to a unit span when degenerate.
fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

impl LineChart {
    pub fn to_svg(&self) -> String {
        let (x_lo, x_hi) =
            padded_range(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
        let (y_lo, y_hi) =
            padded_range(self.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
        let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
        let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
        let sx = |x: f64| MARGIN_LEFT + (x - x_lo) / (x_hi - x_lo) * plot_w;
        let sy = |y: f64| MARGIN_TOP + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h;

        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
             viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
        ));
        svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"16\">{}</text>\n",
            WIDTH / 2.0,
            escape(&self.title)
        ));

        // axes with 5 ticks each
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let xv = x_lo + f * (x_hi - x_lo);
            let yv = y_lo + f * (y_hi - y_lo);
            let px = sx(xv);
            let py = sy(yv);
            svg.push_str(&format!(
                "<line x1=\"{px:.1}\" y1=\"{:.1}\" x2=\"{px:.1}\" y2=\"{:.1}\" \
                 stroke=\"#dddddd\"/>\n",
                MARGIN_TOP,
                MARGIN_TOP + plot_h
            ));
            svg.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{py:.1}\" x2=\"{:.1}\" y2=\"{py:.1}\" \
                 stroke=\"#dddddd\"/>\n",
                MARGIN_LEFT,
                MARGIN_LEFT + plot_w
            ));
            svg.push_str(&format!(
                "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\" \
                 font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
                MARGIN_TOP + plot_h + 16.0,
                format_tick(xv)
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" \
                 font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
                MARGIN_LEFT - 6.0,
                py + 4.0,
                format_tick(yv)
            ));
        }
        svg.push_str(&format!(
            "<rect x=\"{MARGIN_LEFT}\" y=\"{MARGIN_TOP}\" width=\"{plot_w}\" \
             height=\"{plot_h}\" fill=\"none\" stroke=\"#333333\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"13\">{}</text>\n",
            MARGIN_LEFT + plot_w / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        ));
        svg.push_str(&format!(
            "<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"13\" transform=\"rotate(-90 18 {:.1})\">{}</text>\n",
            MARGIN_TOP + plot_h / 2.0,
            MARGIN_TOP + plot_h / 2.0,
            escape(&self.y_label)
        ));

        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let coords: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            if coords.len() > 1 {
                svg.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
                     stroke-width=\"2\"/>\n",
                    coords.join(" ")
                ));
            }
            for &(x, y) in &series.points {
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                    sx(x),
                    sy(y)
                ));
            }
            let ly = MARGIN_TOP + 16.0 + i as f64 * 18.0;
            svg.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" \
                 stroke=\"{color}\" stroke-width=\"2\"/>\n",
                WIDTH - MARGIN_RIGHT - 130.0,
                WIDTH - MARGIN_RIGHT - 110.0
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" \
                 font-size=\"12\">{}</text>\n",
                WIDTH - MARGIN_RIGHT - 104.0,
                ly + 4.0,
                escape(&series.label)
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }

    pub fn write_svg(&self, path: &std::path::Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(path, self.to_svg())?;
        Ok(())
    }
}

pub fn elbo_vs_step_chart(rows: &[PerStepRow]) -> LineChart {
    LineChart {
        title: "Mean ELBO by refinement step".into(),
        x_label: "refinement step".into(),
        y_label: "mean ELBO".into(),
        series: vec![Series {
            label: "ELBO".into(),
            points: rows.iter().map(|r| (r.step as f64, r.mean_elbo)).collect(),
        }],
    }
}

pub fn bleu_vs_step_chart(rows: &[PerStepRow]) -> LineChart {
    LineChart {
        title: "BLEU by refinement step".into(),
        x_label: "refinement step".into(),
        y_label: "BLEU (%)".into(),
        series: vec![Series {
            label: "BLEU".into(),
            points: rows.iter().map(|r| (r.step as f64, r.bleu)).collect(),
        }],
    }
}

pub fn bleu_vs_speedup_chart(rows: &[TradeoffRow]) -> LineChart {
    let pick = |refined: bool| Series {
        label: if refined { "with refinement" } else { "no refinement" }.into(),
        points: rows
            .iter()
            .filter(|r| r.refined == refined)
            .map(|r| (r.speedup, r.bleu))
            .collect(),
    };
    LineChart {
        title: "BLEU vs speedup across candidate counts".into(),
        x_label: "speedup vs teacher beam-3".into(),
        y_label: "BLEU (%)".into(),
        series: vec![pick(true), pick(false)],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_chart() -> LineChart {
        LineChart {
            title: "loss & error".into(),
            x_label: "step".into(),
            y_label: "value".into(),
            series: vec![
                Series {
                    label: "train".into(),
                    points: vec![(0.0, 3.0), (1.0, 2.0), (2.0, 1.5)],
                },
                Series { label: "eval".into(), points: vec![(0.0, 3.5), (2.0, 2.0)] },
            ],
        }
    }

    #[test]
    fn svg_has_frame_polylines_and_escaped_title() {
        let svg = sample_chart().to_svg();
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert_eq!(svg.matches("<circle").count(), 5);
        assert!(svg.contains("loss &amp; error"));
        assert!(!svg.contains("loss & error"));
    }

    #[test]
    fn svg_is_deterministic() {
        assert_eq!(sample_chart().to_svg(), sample_chart().to_svg());
    }

    #[test]
    fn degenerate_single_point_still_renders() {
        let chart = LineChart {
            title: "one".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            series: vec![Series { label: "p".into(), points: vec![(1.0, 1.0)] }],
        };
        let svg = chart.to_svg();
        assert!(svg.contains("<circle"));
        assert!(!svg.contains("NaN"));
        assert!(!svg.contains("inf"));
    }

    #[test]
    fn tick_formatting_is_compact() {
        assert_eq!(format_tick(0.0), "0");
        assert_eq!(format_tick(2.5), "2.5");
        assert_eq!(format_tick(3.0), "3");
        assert_eq!(format_tick(12345.0), "1.23e4");
    }

    #[test]
    fn chart_builders_map_rows_to_points() {
        let rows = vec![
            PerStepRow { step: 0, mean_elbo: -9.0, bleu: 50.0 },
            PerStepRow { step: 1, mean_elbo: -8.0, bleu: 55.0 },
        ];
        let elbo = elbo_vs_step_chart(&rows);
        assert_eq!(elbo.series[0].points, vec![(0.0, -9.0), (1.0, -8.0)]);
        let bleu = bleu_vs_step_chart(&rows);
        assert_eq!(bleu.series[0].points, vec![(0.0, 50.0), (1.0, 55.0)]);

        let tr = vec![
            TradeoffRow { n: 1, refined: true, bleu: 60.0, speedup: 4.0, mean_latency_ms: 1.0 },
            TradeoffRow { n: 1, refined: false, bleu: 58.0, speedup: 6.0, mean_latency_ms: 0.7 },
        ];
        let chart = bleu_vs_speedup_chart(&tr);
        assert_eq!(chart.series.len(), 2);
        assert_eq!(chart.series[0].points, vec![(4.0, 60.0)]);
        assert_eq!(chart.series[1].points, vec![(6.0, 58.0)]);
    }

    #[test]
    fn write_svg_creates_parent_dirs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("charts/elbo.svg");
        sample_chart().write_svg(&path).unwrap();
        assert!(path.exists());
    }
}
