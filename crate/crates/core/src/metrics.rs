//! Sparsity and FLOPs accounting, plus the per-epoch metrics log.
//!
//! The log is a CSV file with a fixed, versioned column order; the JSON
//! export carries exactly the same fields.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model};

pub const FLOPS_CONVENTION: &str = "dense: 2*nnz(W) + alive biases; \
conv: (2*nnz(K) + alive biases) * output positions; pooling and activations excluded";

pub const METRICS_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 12] = [
    "epoch",
    "stage",
    "stage_index",
    "train_loss",
    "val_loss",
    "test_top1",
    "sparsity_pct",
    "alive",
    "total",
    "threshold",
    "flops",
    "layer_sparsity",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub layer: String,
    pub alive: usize,
    pub total: usize,
}

impl LayerSparsity {
    pub fn sparsity_pct(&self) -> f64 {
        pct(self.total - self.alive, self.total)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub alive: usize,
    pub total: usize,
    pub layers: Vec<LayerSparsity>,
}

impl SparsityReport {
    pub fn sparsity_pct(&self) -> f64 {
        pct(self.total - self.alive, self.total)
    }

    pub fn pruned(&self) -> usize {
        self.total - self.alive
    }
}

fn pct(part: usize, whole: usize) -> f64 {
    if whole == 0 {
        0.0
    } else {
        100.0 * part as f64 / whole as f64
    }
}

/// Pruned fraction of the model, globally and per named layer, read from
/// the masks.
pub fn sparsity(model: &Model) -> SparsityReport {
    let mut layers: Vec<LayerSparsity> = Vec::new();
    for p in model.params() {
        let (alive, total) = (p.mask.alive_count(), p.mask.len());
        match layers.iter_mut().find(|l| l.layer == p.layer) {
            Some(l) => {
                l.alive += alive;
                l.total += total;
            }
            None => layers.push(LayerSparsity {
                layer: p.layer.clone(),
                alive,
                total,
            }),
        }
    }
    SparsityReport {
        alive: layers.iter().map(|l| l.alive).sum(),
        total: layers.iter().map(|l| l.total).sum(),
        layers,
    }
}

/// Inference cost under [`FLOPS_CONVENTION`].
pub fn flops(model: &Model) -> Result<u64> {
    let shapes = model.layer_output_shapes()?;
    let mut total = 0u64;
    let mut next = 0;
    for (layer, out_shape) in model.layers().iter().zip(&shapes) {
        let positions = match layer {
            LayerSpec::Dense { .. } => 1,
            LayerSpec::Conv { .. } => out_shape[1] * out_shape[2],
            _ => continue,
        };
        let (w, b) = (&model.params()[next], &model.params()[next + 1]);
        next += 2;
        let nnz = w
            .value
            .data()
            .iter()
            .enumerate()
            .filter(|&(i, v)| w.mask.is_alive(i) && *v != 0.0)
            .count();
        let biases = b.mask.alive_count();
        total += ((2 * nnz + biases) * positions) as u64;
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Learn,
    Prune,
}

impl StageKind {
    fn as_str(self) -> &'static str {
        match self {
            Self::Learn => "learn",
            Self::Prune => "prune",
        }
    }
}

/// One line of the metrics log: one per training epoch and one per pruning
/// stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub stage: StageKind,
    pub stage_index: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    /// Test top-1 error in percent; only on the final row of a run.
    pub test_top1: Option<f64>,
    pub sparsity_pct: f64,
    pub alive: usize,
    pub total: usize,
    pub threshold: Option<f64>,
    pub flops: u64,
    pub layers: Vec<LayerSparsity>,
}

impl MetricsRow {
    /// Fills the sparsity and FLOPs columns from `model`.
    pub fn for_model(
        model: &Model,
        epoch: usize,
        stage: StageKind,
        stage_index: usize,
        val_loss: f64,
    ) -> Result<Self> {
        let report = sparsity(model);
        Ok(Self {
            epoch,
            stage,
            stage_index,
            train_loss: None,
            val_loss,
            test_top1: None,
            sparsity_pct: report.sparsity_pct(),
            alive: report.alive,
            total: report.total,
            threshold: None,
            flops: flops(model)?,
            layers: report.layers,
        })
    }

    fn to_csv_line(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let layers = self
            .layers
            .iter()
            .map(|l| format!("{}:{}/{}", l.layer, l.alive, l.total))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.stage.as_str(),
            self.stage_index,
            opt(self.train_loss),
            self.val_loss,
            opt(self.test_top1),
            self.sparsity_pct,
            self.alive,
            self.total,
            opt(self.threshold),
            self.flops,
            layers
        )
    }

    fn from_csv_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != CSV_COLUMNS.len() {
            return Err(Error::Metrics(format!(
                "expected {} columns, found {} in `{line}`",
                CSV_COLUMNS.len(),
                fields.len()
            )));
        }
        let bad = |what: &str| Error::Metrics(format!("bad {what} in `{line}`"));
        let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
        let int = |s: &str, what: &str| s.parse::<usize>().map_err(|_| bad(what));
        let opt = |s: &str, what: &str| {
            if s.is_empty() {
                Ok(None)
            } else {
                num(s, what).map(Some)
            }
        };
        let stage = match fields[1] {
            "learn" => StageKind::Learn,
            "prune" => StageKind::Prune,
            _ => return Err(bad("stage")),
        };
        let layers = if fields[11].is_empty() {
            Vec::new()
        } else {
            fields[11]
                .split(';')
                .map(|entry| {
                    let (layer, counts) = entry.split_once(':').ok_or_else(|| bad("layer"))?;
                    let (alive, total) = counts.split_once('/').ok_or_else(|| bad("layer"))?;
                    Ok(LayerSparsity {
                        layer: layer.to_string(),
                        alive: int(alive, "layer alive")?,
                        total: int(total, "layer total")?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            epoch: int(fields[0], "epoch")?,
            stage,
            stage_index: int(fields[2], "stage_index")?,
            train_loss: opt(fields[3], "train_loss")?,
            val_loss: num(fields[4], "val_loss")?,
            test_top1: opt(fields[5], "test_top1")?,
            sparsity_pct: num(fields[6], "sparsity_pct")?,
            alive: int(fields[7], "alive")?,
            total: int(fields[8], "total")?,
            threshold: opt(fields[9], "threshold")?,
            flops: fields[10].parse().map_err(|_| bad("flops"))?,
            layers,
        })
    }
}

fn version_line() -> String {
    format!("# lobster-metrics v{METRICS_VERSION}")
}

/// Destination for metrics rows.
pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()>;
}

/// Collects rows in memory.
#[derive(Debug, Default)]
pub struct VecSink {
    pub rows: Vec<MetricsRow>,
}

impl MetricsSink for VecSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        self.rows.push(row.clone());
        Ok(())
    }
}

/// Appends rows to a CSV file, flushing after every row.
pub struct CsvSink {
    out: BufWriter<File>,
}

impl CsvSink {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{}", version_line())?;
        writeln!(out, "{}", CSV_COLUMNS.join(","))?;
        out.flush()?;
        Ok(Self { out })
    }
}

impl MetricsSink for CsvSink {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.out, "{}", row.to_csv_line())?;
        self.out.flush()?;
        Ok(())
    }
}

impl<S: MetricsSink + ?Sized> MetricsSink for &mut S {
    fn record(&mut self, row: &MetricsRow) -> Result<()> {
        (**self).record(row)
    }
}

/// Writes a complete CSV log.
pub fn write_csv(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let mut sink = CsvSink::create(path)?;
    rows.iter().try_for_each(|r| sink.record(r))
}

/// Reads a CSV log. A trailing partial line (from an interrupted run) is
/// ignored; malformed complete lines are errors.
pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    let raw = std::fs::read_to_string(path)?;
    let complete = raw.ends_with('\n');
    let mut lines = raw.lines().peekable();
    match lines.next() {
        Some(v) if v == version_line() => {}
        other => {
            return Err(Error::Metrics(format!(
                "unsupported metrics header {other:?}, expected `{}`",
                version_line()
            )))
        }
    }
    if lines.next() != Some(CSV_COLUMNS.join(",").as_str()) {
        return Err(Error::Metrics("unexpected column header".into()));
    }
    let mut rows = Vec::new();
    while let Some(line) = lines.next() {
        if lines.peek().is_none() && !complete {
            break;
        }
        rows.push(MetricsRow::from_csv_line(line)?);
    }
    Ok(rows)
}

pub fn read_csv_from(reader: impl BufRead) -> Result<Vec<String>> {
    reader
        .lines()
        .map(|l| l.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsJson {
    pub version: u32,
    pub columns: Vec<String>,
    pub flops_convention: String,
    pub rows: Vec<MetricsRow>,
}

pub fn to_json(rows: &[MetricsRow]) -> Result<String> {
    let doc = MetricsJson {
        version: METRICS_VERSION,
        columns: CSV_COLUMNS.iter().map(|c| c.to_string()).collect(),
        flops_convention: FLOPS_CONVENTION.to_string(),
        rows: rows.to_vec(),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Metrics(e.to_string()))
}

pub fn from_json(text: &str) -> Result<Vec<MetricsRow>> {
    let doc: MetricsJson = serde_json::from_str(text).map_err(|e| Error::Metrics(e.to_string()))?;
    if doc.version != METRICS_VERSION {
        return Err(Error::Metrics(format!("unsupported version {}", doc.version)));
    }
    Ok(doc.rows)
}

/// Opens a CSV log for line-by-line inspection.
pub fn open_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    read_csv_from(BufReader::new(File::open(path)?))
}
