//! CSV outputs: training logs, embeddings and pipeline statistics.
//!
//! Missing values (no margin, no Fisher value, losses that do not apply) are
//! written as empty fields. Floats use Rust's shortest round-trip formatting,
//! so parsing a field reproduces the written value exactly.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use cff_core::data::Split;
use cff_core::training::{LogRecord, TrainLog};
use cff_core::Tensor;

use crate::pipeline::{step_count_model, PipelineStats};

pub const TRAIN_LOG_COLUMNS: [&str; 8] = ["epoch", "layer", "split", "loss", "rk_pct", "fisher", "accuracy", "seconds"];
pub const PIPELINE_COLUMNS: [&str; 9] = [
    "layers",
    "batches",
    "workers",
    "steps",
    "sequential_steps",
    "stage",
    "busy",
    "idle",
    "wall_seconds",
];

#[derive(Debug, thiserror::Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {msg}")]
    Malformed { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, ReportError>;

fn opt(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => x.to_string(),
        _ => String::new(),
    }
}

pub fn split_name(s: Split) -> &'static str {
    match s {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn record_fields(r: &LogRecord) -> [String; 8] {
    [
        r.epoch.to_string(),
        r.layer.map_or_else(|| "head".to_string(), |l| l.to_string()),
        split_name(r.split).to_string(),
        opt(Some(r.loss)),
        opt(r.rk_pct),
        opt(r.fisher),
        opt(r.accuracy),
        r.seconds.to_string(),
    ]
}

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| ReportError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn csv_err(path: &str) -> impl Fn(csv::Error) -> ReportError + '_ {
    move |source| ReportError::Csv {
        path: path.to_string(),
        source,
    }
}

pub fn write_train_log(log: &TrainLog, w: impl Write) -> std::result::Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(TRAIN_LOG_COLUMNS)?;
    for r in log.records() {
        out.write_record(record_fields(r))?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_train_log(log: &TrainLog, path: &Path) -> Result<()> {
    write_train_log(log, create(path)?).map_err(csv_err(&path.display().to_string()))
}

/// Rows `label, e_1, …, e_E`, one per sample.
pub fn write_embeddings(features: &Tensor<f32>, labels: &[usize], w: impl Write) -> std::result::Result<(), csv::Error> {
    let e = features.shape().get(1).copied().unwrap_or(0);
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["label".to_string()];
    header.extend((1..=e).map(|i| format!("e_{i}")));
    out.write_record(&header)?;
    for (r, &label) in labels.iter().enumerate() {
        let mut row = vec![label.to_string()];
        row.extend(features.row(r).iter().map(|v| v.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_embeddings(features: &Tensor<f32>, labels: &[usize], path: &Path) -> Result<()> {
    if features.ndim() != 2 || features.shape()[0] != labels.len() {
        return Err(ReportError::Malformed {
            path: path.display().to_string(),
            msg: format!("features {:?} do not match {} labels", features.shape(), labels.len()),
        });
    }
    write_embeddings(features, labels, create(path)?).map_err(csv_err(&path.display().to_string()))
}

/// A parsed CSV file with its header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }
}

pub fn read_table(path: &Path) -> Result<Table> {
    let p = path.display().to_string();
    let mut rd = csv::Reader::from_path(path).map_err(csv_err(&p))?;
    let columns = rd.headers().map_err(csv_err(&p))?.iter().map(str::to_string).collect();
    let rows = rd
        .records()
        .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()
        .map_err(csv_err(&p))?;
    Ok(Table { columns, rows })
}

pub fn read_embeddings(path: &Path) -> Result<(Tensor<f32>, Vec<usize>)> {
    let p = path.display().to_string();
    let bad = |msg: String| ReportError::Malformed { path: p.clone(), msg };
    let table = read_table(path)?;
    if table.columns.first().map(String::as_str) != Some("label") {
        return Err(bad("first column must be label".into()));
    }
    let e = table.columns.len() - 1;
    let mut labels = Vec::with_capacity(table.rows.len());
    let mut data = Vec::with_capacity(table.rows.len() * e);
    for (i, row) in table.rows.iter().enumerate() {
        labels.push(row[0].parse().map_err(|_| bad(format!("row {}: bad label {:?}", i + 1, row[0])))?);
        for v in &row[1..] {
            data.push(v.parse().map_err(|_| bad(format!("row {}: bad value {v:?}", i + 1)))?);
        }
    }
    let t = Tensor::new(vec![labels.len(), e], data).map_err(|err| bad(err.to_string()))?;
    Ok((t, labels))
}

/// One row per stage.
pub fn write_pipeline_stats(stats: &PipelineStats, w: impl Write) -> std::result::Result<(), csv::Error> {
    let (_, sequential) = step_count_model(stats.layers as u64, stats.batches.max(1));
    let mut out = csv::Writer::from_writer(w);
    out.write_record(PIPELINE_COLUMNS)?;
    for (s, st) in stats.stages.iter().enumerate() {
        out.write_record([
            stats.layers.to_string(),
            stats.batches.to_string(),
            stats.workers.to_string(),
            stats.steps.to_string(),
            sequential.to_string(),
            (s + 1).to_string(),
            st.busy.to_string(),
            st.idle.to_string(),
            stats.wall_seconds.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_pipeline_stats(stats: &PipelineStats, path: &Path) -> Result<()> {
    write_pipeline_stats(stats, create(path)?).map_err(csv_err(&path.display().to_string()))
}
