//! Standalone SVG plots of plasticity and stability curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::Failure;

const WIDTH: f64 = 760.0;
const PANEL_H: f64 = 300.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 36.0;
const GAP: f64 = 70.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Default, Clone)]
pub struct Series {
    pub label: String,
    pub plasticity: Vec<(f64, f64)>,
    pub stability: Vec<(f64, f64)>,
}

fn parse_value(path: &Path, row: usize, column: &str, v: &str) -> Result<f64, Failure> {
    v.trim().parse::<f64>().map_err(|_| {
        Failure::Usage(format!("{}: row {row}: column {column}: cannot parse {v:?}", path.display()))
    })
}

/// One series per method in each file.
pub fn read_series(path: &Path) -> Result<Vec<Series>, Failure> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr
        .headers()
        .map_err(|e| Failure::Usage(format!("{}: bad header: {e}", path.display())))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Failure::Usage(format!("{}: missing column {name}", path.display())))
    };
    let (c_task, c_method, c_p, c_s) = (col("task")?, col("method")?, col("plasticity_acc")?, col("stability_acc")?);
    let mut by_method: BTreeMap<String, Series> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        // header is row 1
        let row = i + 2;
        let rec = rec.map_err(|e| Failure::Usage(format!("{}: row {row}: {e}", path.display())))?;
        let field = |c: usize| {
            rec.get(c)
                .ok_or_else(|| Failure::Usage(format!("{}: row {row}: too few fields", path.display())))
        };
        let task = parse_value(path, row, "task", field(c_task)?)?;
        let method = field(c_method)?.to_string();
        let p = parse_value(path, row, "plasticity_acc", field(c_p)?)?;
        let s = field(c_s)?;
        let entry = by_method.entry(method.clone()).or_insert_with(|| Series {
            label: method,
            ..Series::default()
        });
        entry.plasticity.push((task, p));
        if !s.trim().is_empty() {
            entry.stability.push((task, parse_value(path, row, "stability_acc", s)?));
        }
    }
    Ok(by_method.into_values().collect())
}

/// Trailing moving average over `window` points.
pub fn smooth(points: &[(f64, f64)], window: usize) -> Vec<(f64, f64)> {
    if window <= 1 {
        return points.to_vec();
    }
    (0..points.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            let slice = &points[lo..=i];
            (points[i].0, slice.iter().map(|p| p.1).sum::<f64>() / slice.len() as f64)
        })
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    y0: f64,
    w: f64,
    h: f64,
    xmax: f64,
    ylo: f64,
    yhi: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        self.x0 + self.w * x / self.xmax
    }
    fn py(&self, y: f64) -> f64 {
        self.y0 + self.h * (1.0 - (y - self.ylo) / (self.yhi - self.ylo))
    }
}

fn panel(svg: &mut String, f: &Frame, title: &str, series: &[(String, &str, Vec<(f64, f64)>)], reference: Option<f64>) {
    let _ = writeln!(svg, r##"<rect x="{}" y="{}" width="{}" height="{}" fill="none" stroke="#444"/>"##, f.x0, f.y0, f.w, f.h);
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="14" text-anchor="middle">{}</text>"#, f.x0 + f.w / 2.0, f.y0 - 12.0, escape(title));
    for i in 0..=5 {
        let y = f.ylo + (f.yhi - f.ylo) * i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{x0}" x2="{x1}" y1="{py:.2}" y2="{py:.2}" stroke="#ddd"/><text x="{tx}" y="{ty:.2}" font-size="11" text-anchor="end">{y:.2}</text>"##,
            x0 = f.x0,
            x1 = f.x0 + f.w,
            py = f.py(y),
            tx = f.x0 - 6.0,
            ty = f.py(y) + 4.0
        );
        let x = f.xmax * i as f64 / 5.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            f.px(x),
            f.y0 + f.h + 16.0,
            x.round()
        );
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">task</text>"#, f.x0 + f.w / 2.0, f.y0 + f.h + 34.0);
    let _ = writeln!(
        svg,
        r#"<text x="{x}" y="{y}" font-size="12" text-anchor="middle" transform="rotate(-90 {x} {y})">accuracy</text>"#,
        x = f.x0 - 44.0,
        y = f.y0 + f.h / 2.0
    );
    if let Some(r) = reference {
        let _ = writeln!(
            svg,
            r##"<line x1="{}" x2="{}" y1="{py:.2}" y2="{py:.2}" stroke="#000" stroke-dasharray="6 4"/>"##,
            f.x0,
            f.x0 + f.w,
            py = f.py(r)
        );
    }
    for (label, color, pts) in series {
        if pts.is_empty() {
            continue;
        }
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
            coords.join(" "),
            escape(label)
        );
    }
}

pub fn render_svg(series: &[Series], reference: Option<f64>) -> String {
    let all: Vec<f64> = series
        .iter()
        .flat_map(|s| s.plasticity.iter().chain(&s.stability).map(|p| p.1))
        .chain(reference)
        .collect();
    let lo = all.iter().copied().fold(1.0, f64::min);
    let ylo = ((lo * 10.0).floor() / 10.0).clamp(0.0, 0.9);
    let xmax = series
        .iter()
        .flat_map(|s| s.plasticity.iter().map(|p| p.0))
        .fold(1.0, f64::max);
    let height = MARGIN_T + 2.0 * PANEL_H + GAP + 50.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let colored = |pick: fn(&Series) -> &Vec<(f64, f64)>| -> Vec<(String, &str, Vec<(f64, f64)>)> {
        series
            .iter()
            .enumerate()
            .map(|(i, s)| (s.label.clone(), PALETTE[i % PALETTE.len()], pick(s).clone()))
            .collect()
    };
    let w = WIDTH - MARGIN_L - MARGIN_R;
    let top = Frame { x0: MARGIN_L, y0: MARGIN_T, w, h: PANEL_H, xmax, ylo, yhi: 1.0 };
    panel(&mut svg, &top, "Plasticity: current-task accuracy", &colored(|s| &s.plasticity), reference);
    let bottom = Frame { y0: MARGIN_T + PANEL_H + GAP, ..top };
    panel(&mut svg, &bottom, "Stability: mean accuracy over previous 10 tasks", &colored(|s| &s.stability), None);
    for (i, s) in series.iter().enumerate() {
        let y = MARGIN_T + 10.0 + 18.0 * i as f64;
        let x = MARGIN_L + w + 14.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{x}" x2="{}" y1="{y}" y2="{y}" stroke="{}" stroke-width="3"/><text x="{}" y="{}" font-size="12">{}</text>"#,
            x + 18.0,
            PALETTE[i % PALETTE.len()],
            x + 24.0,
            y + 4.0,
            escape(&s.label)
        );
    }
    if reference.is_some() {
        let y = MARGIN_T + 10.0 + 18.0 * series.len() as f64;
        let x = MARGIN_L + w + 14.0;
        let _ = writeln!(
            svg,
            r##"<line x1="{x}" x2="{}" y1="{y}" y2="{y}" stroke="#000" stroke-dasharray="6 4"/><text x="{}" y="{}" font-size="12">single task</text>"##,
            x + 18.0,
            x + 24.0,
            y + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

pub fn cmd_plot(paths: &[PathBuf], out: &Path, window: Option<usize>, reference: Option<f64>) -> Result<(), Failure> {
    let mut series = Vec::new();
    for path in paths {
        for mut s in read_series(path)? {
            if paths.len() > 1 {
                let stem = path.parent().and_then(|p| p.file_name()).or(path.file_stem());
                if let Some(stem) = stem {
                    s.label = format!("{} ({})", s.label, stem.to_string_lossy());
                }
            }
            let w = window.unwrap_or(1);
            s.plasticity = smooth(&s.plasticity, w);
            s.stability = smooth(&s.stability, w);
            series.push(s);
        }
    }
    fs::write(out, render_svg(&series, reference))
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", out.display())))?;
    println!("wrote {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_is_trailing_mean() {
        let pts = [(0.0, 1.0), (1.0, 0.0), (2.0, 1.0)];
        assert_eq!(smooth(&pts, 2), vec![(0.0, 1.0), (1.0, 0.5), (2.0, 0.5)]);
        assert_eq!(smooth(&pts, 1), pts.to_vec());
    }

    #[test]
    fn one_polyline_per_series_and_panel() {
        let s = Series {
            label: "relu".into(),
            plasticity: vec![(0.0, 0.9), (1.0, 0.8)],
            stability: vec![(1.0, 0.7)],
        };
        let svg = render_svg(&[s], Some(0.95));
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(!svg.contains("href"));
    }
}
