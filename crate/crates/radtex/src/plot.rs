//! Minimal SVG line charts: AUC against training-set size per mode, and
//! AUC against pretraining fraction per transferred mode.

use std::fmt::Write;

use radtex_core::train::{Mode, Task};

use crate::bench::{Aggregate, ExperimentSpec};

const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 300.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"];

/// One curve with optional symmetric error bars.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Panel {
    fn render(&self, out: &mut String, x0: f64) {
        let pts = self.series.iter().flat_map(|s| &s.points);
        let tx = |x: f64| if self.log_x { x.max(1e-12).log10() } else { x };
        let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
        for &(x, y, ci) in pts {
            xmin = xmin.min(tx(x));
            xmax = xmax.max(tx(x));
            ymin = ymin.min(y - ci.unwrap_or(0.0));
            ymax = ymax.max(y + ci.unwrap_or(0.0));
        }
        if !xmin.is_finite() {
            (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
        }
        if xmax - xmin < 1e-9 {
            (xmin, xmax) = (xmin - 0.5, xmax + 0.5);
        }
        ymin = (ymin.max(0.0) * 20.0).floor() / 20.0;
        ymax = ((ymax.min(1.0) * 20.0).ceil() / 20.0).max(ymin + 0.05);
        let (left, top) = (x0 + MARGIN, MARGIN);
        let (w, h) = (PANEL_W - 1.5 * MARGIN, PANEL_H - 2.0 * MARGIN);
        let px = |x: f64| left + (tx(x) - xmin) / (xmax - xmin) * w;
        let py = |y: f64| top + h - (y - ymin) / (ymax - ymin) * h;

        let _ = writeln!(out, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#, left + w / 2.0, escape(&self.title));
        let _ = writeln!(out, r#"<rect x="{left:.1}" y="{top:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="black"/>"#);
        // x ticks at the data positions
        let mut xs: Vec<f64> = self.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        for x in xs {
            let _ = writeln!(
                out,
                r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="black"/><text x="{0:.1}" y="{3:.1}" text-anchor="middle" font-size="10">{4}</text>"#,
                px(x),
                top + h,
                top + h + 4.0,
                top + h + 16.0,
                x
            );
        }
        let steps = ((ymax - ymin) / 0.05).round() as usize;
        let stride = steps.div_ceil(6).max(1);
        for i in (0..=steps).step_by(stride) {
            let y = ymin + i as f64 * 0.05;
            let _ = writeln!(
                out,
                r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="black"/><text x="{3:.1}" y="{4:.1}" text-anchor="end" font-size="10">{5:.2}</text>"#,
                left - 4.0,
                py(y),
                left,
                left - 6.0,
                py(y) + 3.0,
                y
            );
        }
        let _ = writeln!(out, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#, left + w / 2.0, top + h + 32.0, escape(&self.x_label));
        let _ = writeln!(
            out,
            r#"<text x="{0:.1}" y="{1:.1}" text-anchor="middle" font-size="11" transform="rotate(-90 {0:.1} {1:.1})">{2}</text>"#,
            x0 + 14.0,
            top + h / 2.0,
            escape(&self.y_label)
        );
        for (i, s) in self.series.iter().enumerate() {
            let color = COLORS[i % COLORS.len()];
            let path: Vec<String> = s.points.iter().map(|&(x, y, _)| format!("{:.1},{:.1}", px(x), py(y))).collect();
            let _ = writeln!(out, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, path.join(" "));
            for &(x, y, ci) in &s.points {
                let _ = writeln!(out, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
                if let Some(c) = ci {
                    let _ = writeln!(
                        out,
                        r#"<line x1="{0:.1}" y1="{1:.1}" x2="{0:.1}" y2="{2:.1}" stroke="{color}"/>"#,
                        px(x),
                        py((y - c).max(ymin)),
                        py((y + c).min(ymax))
                    );
                }
            }
            let ly = top + 12.0 + 14.0 * i as f64;
            let _ = writeln!(
                out,
                r#"<line x1="{0:.1}" y1="{1:.1}" x2="{2:.1}" y2="{1:.1}" stroke="{color}" stroke-width="2"/><text x="{3:.1}" y="{4:.1}" font-size="10">{5}</text>"#,
                left + 8.0,
                ly,
                left + 24.0,
                left + 28.0,
                ly + 3.0,
                escape(&s.name)
            );
        }
    }
}

/// Panels side by side in one SVG document.
pub fn render(panels: &[Panel]) -> String {
    let width = PANEL_W * panels.len().max(1) as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{PANEL_H:.0}\" font-family=\"sans-serif\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    for (i, p) in panels.iter().enumerate() {
        p.render(&mut out, i as f64 * PANEL_W);
    }
    out.push_str("</svg>\n");
    out
}

/// AUC versus `n_train` per mode at the largest pretraining fraction, then
/// AUC versus pretraining fraction per transferred mode and `n_train`.
pub fn task_figure(task: &Task, spec: &ExperimentSpec, aggregates: &[Aggregate], pool_size: usize) -> String {
    let rows: Vec<&Aggregate> = aggregates.iter().filter(|a| a.task == *task).collect();
    let top = spec.pretrain_fractions.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let by_n = spec
        .modes
        .iter()
        .map(|&m| Series {
            name: m.name().to_string(),
            points: rows
                .iter()
                .filter(|a| a.mode == m && a.pretrain_fraction == top)
                .map(|a| (a.n_train.resolve(pool_size) as f64, a.auc_mean, a.auc_ci95))
                .collect(),
        })
        .collect();
    let mut panels = vec![Panel {
        title: format!("{task}: AUC vs training examples"),
        x_label: "downstream training examples".into(),
        y_label: "AUC".into(),
        log_x: true,
        series: by_n,
    }];
    let transferred: Vec<Mode> = spec.modes.iter().copied().filter(|m| m.needs_checkpoint()).collect();
    if !transferred.is_empty() {
        let mut series = Vec::new();
        for &m in &transferred {
            for &n in &spec.n_train {
                series.push(Series {
                    name: format!("{} n={n}", m.name()),
                    points: rows
                        .iter()
                        .filter(|a| a.mode == m && a.n_train == n)
                        .map(|a| (a.pretrain_fraction, a.auc_mean, a.auc_ci95))
                        .collect(),
                });
            }
        }
        panels.push(Panel {
            title: format!("{task}: AUC vs pretraining fraction"),
            x_label: "pretraining fraction".into(),
            y_label: "AUC".into(),
            log_x: true,
            series,
        });
    }
    render(&panels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_polylines_and_legend() {
        let panel = Panel {
            title: "a < b".into(),
            x_label: "x".into(),
            y_label: "y".into(),
            log_x: true,
            series: vec![
                Series { name: "frozen".into(), points: vec![(10.0, 0.6, Some(0.05)), (100.0, 0.8, None)] },
                Series { name: "scratch".into(), points: vec![(10.0, 0.5, None), (100.0, 0.7, Some(0.01))] },
            ],
        };
        let svg = render(&[panel.clone(), panel]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<polyline").count(), 4);
        assert!(svg.contains("a &lt; b") && svg.contains(">scratch<"));
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
    }

    #[test]
    fn empty_panel_is_well_formed() {
        let svg = render(&[Panel { title: "t".into(), x_label: "x".into(), y_label: "y".into(), log_x: false, series: vec![] }]);
        assert!(!svg.contains("NaN"));
    }
}
