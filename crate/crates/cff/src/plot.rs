//! Static SVG line plots of training-log CSVs.
//!
//! `loss` and `rk` draw one curve per layer and split; `convergence` draws
//! the mean over layers per split and marks the epoch with the lowest mean
//! validation loss.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::report::{read_table, ReportError, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    Loss,
    Rk,
    Convergence,
}

impl PlotKind {
    pub fn default_column(self) -> &'static str {
        match self {
            PlotKind::Loss | PlotKind::Convergence => "loss",
            PlotKind::Rk => "rk_pct",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlotError {
    #[error(transparent)]
    Read(#[from] ReportError),
    #[error("unknown column {name:?}; available columns: {}", available.join(", "))]
    UnknownColumn { name: String, available: Vec<String> },
    #[error("{0}: no data rows to plot")]
    Empty(String),
    #[error("{path}: row {row}: {msg}")]
    Value { path: String, row: usize, msg: String },
    #[error("{path}: {source}")]
    Write {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A named polyline.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn column(table: &Table, name: &str) -> Result<usize, PlotError> {
    table.column(name).ok_or_else(|| PlotError::UnknownColumn {
        name: name.to_string(),
        available: table.columns.clone(),
    })
}

/// Curves of `y` against `epoch`, grouped by layer and split.
pub fn series(table: &Table, kind: PlotKind, y: &str, path: &str) -> Result<(Vec<Series>, Option<f64>), PlotError> {
    let ei = column(table, "epoch")?;
    let li = column(table, "layer")?;
    let si = column(table, "split")?;
    let yi = column(table, y)?;
    let mut groups: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for (r, row) in table.rows.iter().enumerate() {
        let layer = &row[li];
        let split = &row[si];
        if layer == "head" || split == "test" || row[yi].is_empty() {
            continue;
        }
        let parse = |s: &str, what: &str| {
            s.parse::<f64>().map_err(|_| PlotError::Value {
                path: path.to_string(),
                row: r + 1,
                msg: format!("{what} {s:?} is not a number"),
            })
        };
        let x = parse(&row[ei], "epoch")?;
        let v = parse(&row[yi], y)?;
        let key = match kind {
            PlotKind::Convergence => (String::new(), split.clone()),
            _ => (layer.clone(), split.clone()),
        };
        groups.entry(key).or_default().push((x, v));
    }
    let mut out = Vec::new();
    let mut best = None;
    for ((layer, split), mut pts) in groups {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (name, pts) = if kind == PlotKind::Convergence {
            let mut by_epoch: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
            for (x, v) in pts {
                let e = by_epoch.entry(x as i64).or_insert((0.0, 0));
                e.0 += v;
                e.1 += 1;
            }
            let mean: Vec<(f64, f64)> = by_epoch.into_iter().map(|(x, (s, n))| (x as f64, s / n as f64)).collect();
            if split == "val" {
                best = mean.iter().min_by(|a, b| a.1.total_cmp(&b.1)).map(|p| p.0);
            }
            (format!("{split} mean over layers"), mean)
        } else {
            (format!("layer {layer} {split}"), pts)
        };
        out.push(Series { name, points: pts });
    }
    if out.is_empty() {
        return Err(PlotError::Empty(path.to_string()));
    }
    Ok((out, best))
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    }
}

/// Renders the curves as a standalone SVG document.
pub fn render_svg(title: &str, y_label: &str, series: &[Series], marker: Option<f64>) -> String {
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = bounds(all().map(|p| p.0));
    let (y0, y1) = bounds(all().map(|p| p.1));
    let pw = WIDTH - LEFT - RIGHT;
    let ph = HEIGHT - TOP - BOTTOM;
    let sx = |x: f64| LEFT + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#, LEFT + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=5 {
        let t = i as f64 / 5.0;
        let xv = x0 + t * (x1 - x0);
        let yv = y0 + t * (y1 - y0);
        let _ = writeln!(
            s,
            r##"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="#ddd"/><text x="{0:.2}" y="{3}" text-anchor="middle">{4}</text>"##,
            sx(xv),
            TOP,
            TOP + ph,
            TOP + ph + 18.0,
            tick(xv)
        );
        let _ = writeln!(
            s,
            r##"<line x1="{1}" y1="{0:.2}" x2="{2}" y2="{0:.2}" stroke="#ddd"/><text x="{3}" y="{0:.2}" text-anchor="end" dominant-baseline="middle">{4}</text>"##,
            sy(yv),
            LEFT,
            LEFT + pw,
            LEFT - 6.0,
            tick(yv)
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, LEFT + pw / 2.0, HEIGHT - 10.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
        TOP + ph / 2.0,
        escape(y_label)
    );
    if let Some(m) = marker {
        let _ = writeln!(
            s,
            r##"<line x1="{0:.2}" y1="{1}" x2="{0:.2}" y2="{2}" stroke="#555" stroke-dasharray="4 3"/><text x="{0:.2}" y="{3}" text-anchor="middle" fill="#555">best epoch {4}</text>"##,
            sx(m),
            TOP,
            TOP + ph,
            TOP - 4.0,
            tick(m)
        );
    }
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let dash = if ser.name.ends_with("train") { r#" stroke-dasharray="6 3""# } else { "" };
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.8"{dash} points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 10.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 14.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/><text x="{}" y="{ly}" dominant-baseline="middle">{}</text>"#,
            lx + 24.0,
            lx + 30.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    let r = (v * 1000.0).round() / 1000.0;
    format!("{r}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Reads `csv`, renders the requested curves and writes `out`. Nothing is
/// written when the input has no plottable rows.
pub fn plot_csv(csv: &Path, kind: PlotKind, y: Option<&str>, out: &Path) -> Result<(), PlotError> {
    let path = csv.display().to_string();
    let table = read_table(csv)?;
    if table.rows.is_empty() {
        return Err(PlotError::Empty(path));
    }
    let y = y.unwrap_or(kind.default_column());
    let (series, best) = series(&table, kind, y, &path)?;
    let title = match kind {
        PlotKind::Loss => "Loss per layer",
        PlotKind::Rk => "R(k) percentage per layer",
        PlotKind::Convergence => "Convergence",
    };
    let svg = render_svg(title, y, &series, best);
    std::fs::write(out, svg).map_err(|source| PlotError::Write {
        path: out.display().to_string(),
        source,
    })
}
