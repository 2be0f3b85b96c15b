//! Loss-trace chart as a standalone SVG: weighted foreground and background
//! loss curves with the gap between them shaded, and beta on a right axis.

use std::fmt::Write as _;

use crate::error::{arg_err, Result};
use crate::harness::TraceRow;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 70.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const TICKS: usize = 5;

pub const FG_COLOR: &str = "#d62728";
pub const BG_COLOR: &str = "#1f77b4";
pub const BETA_COLOR: &str = "#2ca02c";

struct Frame {
    steps: (f64, f64),
    loss_max: f64,
    beta: (f64, f64),
}

impl Frame {
    fn x(&self, step: f64) -> f64 {
        let (lo, hi) = self.steps;
        LEFT + (step - lo) / (hi - lo).max(1.0) * (WIDTH - LEFT - RIGHT)
    }

    fn y_loss(&self, v: f64) -> f64 {
        HEIGHT - BOTTOM - v / self.loss_max * (HEIGHT - TOP - BOTTOM)
    }

    fn y_beta(&self, v: f64) -> f64 {
        let (lo, hi) = self.beta;
        HEIGHT - BOTTOM - (v - lo) / (hi - lo) * (HEIGHT - TOP - BOTTOM)
    }
}

fn points(rows: &[TraceRow], mut f: impl FnMut(&TraceRow) -> (f64, f64)) -> String {
    let mut s = String::new();
    for r in rows {
        let (x, y) = f(r);
        let _ = write!(s, "{x:.2},{y:.2} ");
    }
    s.trim_end().to_string()
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Renders `rows` (in step order) under `title`.
pub fn loss_svg(rows: &[TraceRow], title: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(arg_err!("cannot plot an empty trace"));
    }
    if let Some(r) = rows
        .iter()
        .find(|r| ![r.sum_bg, r.sum_fg, r.beta].iter().all(|v| v.is_finite()))
    {
        return Err(arg_err!("trace step {} holds a non-finite value", r.step));
    }
    let loss_max = rows
        .iter()
        .map(|r| r.weighted_fg().max(r.weighted_bg()))
        .fold(0.0, f64::max);
    let frame = Frame {
        steps: (rows[0].step as f64, rows[rows.len() - 1].step as f64),
        loss_max: if loss_max > 0.0 { loss_max * 1.05 } else { 1.0 },
        beta: (0.4, 1.0),
    };
    let x = |r: &TraceRow| frame.x(r.step as f64);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );

    let (x0, x1) = (LEFT, WIDTH - RIGHT);
    let (y0, y1) = (HEIGHT - BOTTOM, TOP);
    let _ = writeln!(
        svg,
        r#"<g id="axes" stroke="black" fill="none"><path d="M{x0},{y1} V{y0} H{x1} V{y1}"/></g>"#
    );
    let _ = writeln!(svg, r#"<g id="ticks" fill="black">"#);
    for i in 0..=TICKS {
        let f = i as f64 / TICKS as f64;
        let step = frame.steps.0 + f * (frame.steps.1 - frame.steps.0);
        let loss = f * frame.loss_max;
        let beta = frame.beta.0 + f * (frame.beta.1 - frame.beta.0);
        let (tx, ty) = (frame.x(step), frame.y_loss(loss));
        let _ = writeln!(
            svg,
            r#"<text x="{tx:.2}" y="{}" text-anchor="middle">{step:.0}</text>"#,
            y0 + 18.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{loss:.3}</text>"#,
            x0 - 6.0,
            ty + 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" fill="{BETA_COLOR}">{beta:.2}</text>"#,
            x1 + 6.0,
            frame.y_beta(beta) + 4.0
        );
    }
    let _ = writeln!(svg, "</g>");
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(18,{0}) rotate(-90)" text-anchor="middle">weighted loss sum</text>"#,
        (y0 + y1) / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate({0},{1}) rotate(90)" text-anchor="middle" fill="{BETA_COLOR}">beta</text>"#,
        WIDTH - 16.0,
        (y0 + y1) / 2.0
    );

    let fg = points(rows, |r| (x(r), frame.y_loss(r.weighted_fg())));
    let bg_reversed = points(&rows.iter().rev().copied().collect::<Vec<_>>(), |r| {
        (x(r), frame.y_loss(r.weighted_bg()))
    });
    let _ = writeln!(
        svg,
        r##"<polygon id="gap" points="{fg} {bg_reversed}" fill="#999999" fill-opacity="0.3" stroke="none"/>"##
    );
    let _ = writeln!(
        svg,
        r#"<polyline id="weighted-fg" points="{fg}" fill="none" stroke="{FG_COLOR}" stroke-width="1.5"/>"#
    );
    let bg = points(rows, |r| (x(r), frame.y_loss(r.weighted_bg())));
    let _ = writeln!(
        svg,
        r#"<polyline id="weighted-bg" points="{bg}" fill="none" stroke="{BG_COLOR}" stroke-width="1.5"/>"#
    );
    let beta = points(rows, |r| (x(r), frame.y_beta(r.beta)));
    let _ = writeln!(
        svg,
        r#"<polyline id="beta" points="{beta}" fill="none" stroke="{BETA_COLOR}" stroke-width="1" stroke-dasharray="4 3"/>"#
    );

    let legend = [
        (FG_COLOR, "beta * foreground loss"),
        (BG_COLOR, "(1 - beta) * background loss"),
        (BETA_COLOR, "beta (right axis)"),
    ];
    let _ = writeln!(svg, r#"<g id="legend">"#);
    for (i, (color, label)) in legend.iter().enumerate() {
        let ly = TOP + 14.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{0}" y1="{ly}" x2="{1}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{2}" y="{3}">{label}</text>"#,
            x1 - 200.0,
            x1 - 180.0,
            x1 - 175.0,
            ly + 4.0
        );
    }
    let _ = writeln!(svg, "</g>");
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize) -> Vec<TraceRow> {
        (1..=n)
            .map(|s| TraceRow {
                step: s,
                epoch: 1,
                sum_bg: 10.0 / s as f64,
                sum_fg: 5.0 / s as f64,
                beta: 0.5 + 0.4 / s as f64,
                total: 0.0,
            })
            .collect()
    }

    #[test]
    fn svg_is_well_formed_and_complete() {
        let svg = loss_svg(&rows(30), "a <b> & c").unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let ids: Vec<&str> = doc
            .descendants()
            .filter_map(|n| n.attribute("id"))
            .collect();
        for id in [
            "weighted-fg",
            "weighted-bg",
            "beta",
            "gap",
            "axes",
            "legend",
        ] {
            assert!(ids.contains(&id), "{id}");
        }
        let fg = doc
            .descendants()
            .find(|n| n.attribute("id") == Some("weighted-fg"))
            .unwrap();
        assert_eq!(fg.attribute("points").unwrap().split(' ').count(), 30);
        let gap = doc
            .descendants()
            .find(|n| n.attribute("id") == Some("gap"))
            .unwrap();
        assert_eq!(gap.attribute("points").unwrap().split(' ').count(), 60);
        assert!(svg.contains("a &lt;b&gt; &amp; c"));
    }

    #[test]
    fn single_row_and_degenerate_traces() {
        let one = rows(1);
        let svg = loss_svg(&one, "one").unwrap();
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        let zeros: Vec<TraceRow> = rows(3)
            .into_iter()
            .map(|r| TraceRow {
                sum_bg: 0.0,
                sum_fg: 0.0,
                ..r
            })
            .collect();
        roxmltree::Document::parse(&loss_svg(&zeros, "zero").unwrap()).unwrap();
        assert!(loss_svg(&[], "empty").is_err());
        let bad = vec![TraceRow {
            sum_bg: f64::NAN,
            ..one[0]
        }];
        assert!(loss_svg(&bad, "nan").is_err());
    }
}
