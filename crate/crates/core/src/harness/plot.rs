//! Standalone SVG line charts for training curves and ablation summaries.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::artifact::write_atomic;
use crate::error::{Error, Result};
use crate::harness::ablation::DiversitySummary;
use crate::harness::report::read_csv;
use crate::ppo::CurveRow;

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

#[derive(Clone, Debug, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    /// Half-height of a symmetric error bar.
    pub err: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<Point>,
}

pub struct Panel {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Tick labels at integer positions instead of numeric ticks.
    pub x_categories: Option<Vec<String>>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn nice_ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = hi - lo;
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let first = (lo / step).ceil() * step;
    (0..).map(|i| first + i as f64 * step).take_while(|t| *t <= hi + 1e-9 * span).collect()
}

fn fmt_tick(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

const W: f64 = 560.0;
const H: f64 = 380.0;
const ML: f64 = 64.0;
const MR: f64 = 150.0;
const MT: f64 = 36.0;
const MB: f64 = 52.0;

fn draw_panel(svg: &mut String, p: &Panel, ox: f64) -> Result<()> {
    let pts = || p.series.iter().flat_map(|s| s.points.iter());
    // Empty panels (e.g. time to finish when nothing succeeded) keep their frame.
    let empty = pts().next().is_none();
    let (mut x0, mut x1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), q| (a.min(q.x), b.max(q.x)));
    let (mut y0, mut y1) = pts().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), q| {
        let e = q.err.unwrap_or(0.0);
        (a.min(q.y - e), b.max(q.y + e))
    });
    if empty {
        let n = p.x_categories.as_ref().map_or(1, |c| c.len().max(1));
        (x0, x1, y0, y1) = (0.0, (n - 1) as f64, 0.0, 1.0);
    }
    if p.x_categories.is_some() {
        x0 -= 0.5;
        x1 += 0.5;
    }
    if x1 - x0 < 1e-12 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if y1 - y0 < 1e-12 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = W - ML - MR;
    let ph = H - MT - MB;
    let sx = |x: f64| ox + ML + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MT + (1.0 - (y - y0) / (y1 - y0)) * ph;
    let w = |svg: &mut String, s: String| svg.push_str(&s);
    w(svg, format!(r#"<g class="panel"><text x="{:.1}" y="22" text-anchor="middle" font-size="15">{}</text>"#, ox + ML + pw / 2.0, esc(&p.title)));
    w(svg, format!(r##"<rect x="{:.1}" y="{MT}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#333"/>"##, ox + ML));
    for t in nice_ticks(y0, y1) {
        let y = sy(t);
        w(svg, format!(r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, ox + ML, ox + ML + pw));
        w(svg, format!(r#"<text x="{:.1}" y="{:.1}" text-anchor="end" font-size="11">{}</text>"#, ox + ML - 6.0, y + 4.0, fmt_tick(t)));
    }
    let xticks: Vec<(f64, String)> = match &p.x_categories {
        Some(c) => c.iter().enumerate().map(|(i, l)| (i as f64, l.clone())).collect(),
        None => nice_ticks(x0, x1).into_iter().map(|t| (t, fmt_tick(t))).collect(),
    };
    for (t, l) in xticks {
        let x = sx(t);
        w(svg, format!(r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#333"/>"##, MT + ph, MT + ph + 5.0));
        w(svg, format!(r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle" font-size="11">{}</text>"#, MT + ph + 18.0, esc(&l)));
    }
    w(svg, format!(r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="12">{}</text>"#, ox + ML + pw / 2.0, H - 12.0, esc(&p.x_label)));
    let (lx, ly) = (ox + 16.0, MT + ph / 2.0);
    w(svg, format!(r#"<text x="{lx:.1}" y="{ly:.1}" text-anchor="middle" font-size="12" transform="rotate(-90 {lx:.1} {ly:.1})">{}</text>"#, esc(&p.y_label)));
    if empty {
        w(svg, format!(r##"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="13" fill="#888">no data</text>"##, ox + ML + pw / 2.0, MT + ph / 2.0));
    }
    for (i, s) in p.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = s.points.iter().map(|q| format!("{:.2},{:.2}", sx(q.x), sy(q.y))).collect();
        if coords.len() > 1 {
            w(svg, format!(r#"<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{}"/>"#, coords.join(" ")));
        }
        for q in &s.points {
            if let Some(e) = q.err {
                let x = sx(q.x);
                w(svg, format!(r#"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="{color}"/>"#, sy(q.y - e), sy(q.y + e)));
            }
            w(svg, format!(r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, sx(q.x), sy(q.y)));
        }
        let ly = MT + 12.0 + 18.0 * i as f64;
        let lx = ox + ML + pw + 12.0;
        w(svg, format!(r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#, lx + 18.0));
        w(svg, format!(r#"<text x="{:.1}" y="{:.1}" font-size="11">{}</text>"#, lx + 24.0, ly + 4.0, esc(&s.label)));
    }
    svg.push_str("</g>");
    Ok(())
}

/// Panels laid out side by side in one document.
pub fn render(panels: &[Panel]) -> Result<String> {
    if panels.is_empty() {
        return Err(Error::usage("nothing to plot"));
    }
    let mut svg = String::new();
    let total = W * panels.len() as f64;
    let _ = write!(
        svg,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{H}" viewBox="0 0 {total} {H}" font-family="sans-serif">
<rect width="100%" height="100%" fill="white"/>"#
    );
    for (i, p) in panels.iter().enumerate() {
        draw_panel(&mut svg, p, W * i as f64)?;
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Success rate against iteration, one series per curve.
pub fn curves_panel(curves: &[(String, Vec<CurveRow>)]) -> Panel {
    Panel {
        title: "Training success rate".into(),
        x_label: "iteration".into(),
        y_label: "success rate".into(),
        series: curves
            .iter()
            .map(|(label, rows)| Series {
                label: label.clone(),
                points: rows
                    .iter()
                    .filter(|r| r.success_rate.is_finite())
                    .map(|r| Point { x: r.iteration as f64, y: r.success_rate, err: None })
                    .collect(),
            })
            .collect(),
        x_categories: None,
    }
}

/// SR (ID, OOD, all) and TF against `N`, with error bars of one standard
/// deviation over subsets and seeds.
pub fn diversity_panels(summary: &[DiversitySummary]) -> Vec<Panel> {
    let cats: Vec<String> = summary.iter().map(|s| s.n.to_string()).collect();
    let series = |label: &str, f: &dyn Fn(&DiversitySummary) -> Option<(f64, f64)>| Series {
        label: label.into(),
        points: summary
            .iter()
            .enumerate()
            .filter_map(|(i, s)| f(s).map(|(y, e)| Point { x: i as f64, y, err: Some(e) }))
            .collect(),
    };
    let mut sr = vec![
        series("ID", &|s| Some((s.id_sr_mean, s.id_sr_std))),
        series("OOD", &|s| s.ood_sr_mean.zip(s.ood_sr_std)),
        series("all", &|s| Some((s.all_sr_mean, s.all_sr_std))),
    ];
    sr.retain(|s| !s.points.is_empty());
    let tf = vec![series("all", &|s| s.all_tf_mean.zip(s.all_tf_std))];
    vec![
        Panel {
            title: "Success rate vs N".into(),
            x_label: "training scenes N".into(),
            y_label: "success rate".into(),
            series: sr,
            x_categories: Some(cats.clone()),
        },
        Panel {
            title: "Time to finish vs N".into(),
            x_label: "training scenes N".into(),
            y_label: "time to finish (s)".into(),
            series: tf,
            x_categories: Some(cats),
        },
    ]
}

/// Reads every input, then writes `curves.svg` and/or `ablation_n.svg`
/// into `out`. Any unreadable input aborts before a file is written.
pub fn emit_plots(curves: &[PathBuf], summary: Option<&Path>, out: &Path) -> Result<Vec<PathBuf>> {
    if curves.is_empty() && summary.is_none() {
        return Err(Error::usage("plot needs at least one curve or summary table"));
    }
    let mut docs = Vec::new();
    if !curves.is_empty() {
        let data = curves
            .iter()
            .map(|p| {
                let label = p.parent().and_then(|d| d.file_name()).or(p.file_stem()).map_or("curve".into(), |s| s.to_string_lossy().into_owned());
                read_csv::<CurveRow>(p).map(|rows| (label, rows))
            })
            .collect::<Result<Vec<_>>>()?;
        docs.push((out.join("curves.svg"), render(&[curves_panel(&data)])?));
    }
    if let Some(p) = summary {
        let rows: Vec<DiversitySummary> = read_csv(p)?;
        docs.push((out.join("ablation_n.svg"), render(&diversity_panels(&rows))?));
    }
    for (path, doc) in &docs {
        write_atomic(path, doc.as_bytes())?;
    }
    Ok(docs.into_iter().map(|(p, _)| p).collect())
}
