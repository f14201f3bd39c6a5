//! Append-only run metrics stored as CSV.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io;
use std::path::Path;
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics I/O: {0}")]
    Io(#[from] io::Error),
    #[error("metrics CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed metrics row: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Meta,
    Quant,
    Eval,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Meta => "meta",
            Phase::Quant => "quant",
            Phase::Eval => "eval",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "warmup" => Ok(Phase::Warmup),
            "meta" => Ok(Phase::Meta),
            "quant" => Ok(Phase::Quant),
            "eval" => Ok(Phase::Eval),
            other => Err(MetricsError::Malformed(format!("unknown phase {other:?}"))),
        }
    }
}

/// One row: a phase summary with named scalar values.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub phase: Phase,
    pub block: Option<usize>,
    pub iteration: usize,
    pub values: BTreeMap<String, f64>,
    /// Seconds since the Unix epoch.
    pub wall_clock: f64,
}

impl MetricsRecord {
    pub fn new(run_id: &str, phase: Phase, block: Option<usize>, iteration: usize) -> Self {
        Self {
            run_id: run_id.to_string(),
            phase,
            block,
            iteration,
            values: BTreeMap::new(),
            wall_clock: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64()),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.values.insert(name.to_string(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    /// Equality ignoring the wall-clock stamp.
    pub fn same_content(&self, other: &Self) -> bool {
        self.run_id == other.run_id
            && self.phase == other.phase
            && self.block == other.block
            && self.iteration == other.iteration
            && self.values.len() == other.values.len()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|((ka, va), (kb, vb))| ka == kb && va.to_bits() == vb.to_bits())
    }

    /// Warm-up first, then block by block (meta before quant), evaluation last.
    fn sort_key(&self) -> (u8, usize, Phase, usize) {
        let group = match self.phase {
            Phase::Warmup => 0,
            Phase::Meta | Phase::Quant => 1,
            Phase::Eval => 2,
        };
        (group, self.block.unwrap_or(0), self.phase, self.iteration)
    }
}

pub const HEADER: [&str; 6] = ["run_id", "phase", "block", "iteration", "values", "wall_clock"];

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    run_id: String,
    phase: String,
    block: String,
    iteration: usize,
    values: String,
    wall_clock: String,
}

/// `{:?}` prints the shortest string that parses back to the same `f64`.
fn encode_values(values: &BTreeMap<String, f64>) -> String {
    values.iter().map(|(k, v)| format!("{k}={v:?}")).collect::<Vec<_>>().join(";")
}

fn decode_values(s: &str) -> Result<BTreeMap<String, f64>> {
    s.split(';')
        .filter(|p| !p.is_empty())
        .map(|pair| {
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| MetricsError::Malformed(format!("value {pair:?} lacks '='")))?;
            let v = v
                .parse::<f64>()
                .map_err(|e| MetricsError::Malformed(format!("value {k}: {e}")))?;
            Ok((k.to_string(), v))
        })
        .collect()
}

impl From<&MetricsRecord> for Row {
    fn from(r: &MetricsRecord) -> Self {
        Row {
            run_id: r.run_id.clone(),
            phase: r.phase.to_string(),
            block: r.block.map(|b| b.to_string()).unwrap_or_default(),
            iteration: r.iteration,
            values: encode_values(&r.values),
            wall_clock: format!("{:?}", r.wall_clock),
        }
    }
}

impl TryFrom<Row> for MetricsRecord {
    type Error = MetricsError;

    fn try_from(r: Row) -> Result<Self> {
        let block = if r.block.is_empty() {
            None
        } else {
            Some(r.block.parse().map_err(|e| MetricsError::Malformed(format!("block: {e}")))?)
        };
        Ok(MetricsRecord {
            run_id: r.run_id,
            phase: r.phase.parse()?,
            block,
            iteration: r.iteration,
            values: decode_values(&r.values)?,
            wall_clock: r
                .wall_clock
                .parse()
                .map_err(|e| MetricsError::Malformed(format!("wall_clock: {e}")))?,
        })
    }
}

/// Appends records to a CSV file, writing the header when the file is new.
pub struct MetricsWriter {
    inner: csv::Writer<File>,
    last: Option<(String, (u8, usize, Phase, usize))>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map_or(true, |m| m.len() == 0);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut inner = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            inner.write_record(HEADER)?;
            inner.flush()?;
        }
        Ok(Self { inner, last: None })
    }

    /// Writes and flushes one record. Records of one run must arrive in
    /// pipeline order.
    pub fn append(&mut self, rec: &MetricsRecord) -> Result<()> {
        let key = rec.sort_key();
        if let Some((run, prev)) = &self.last {
            if *run == rec.run_id && key < *prev {
                return Err(MetricsError::Malformed(format!(
                    "record {key:?} of run {run} arrives after {prev:?}"
                )));
            }
        }
        self.inner.serialize(Row::from(rec))?;
        self.inner.flush()?;
        self.last = Some((rec.run_id.clone(), key));
        Ok(())
    }
}

pub fn write_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let mut w = MetricsWriter::open(path)?;
    records.iter().try_for_each(|r| w.append(r))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(HEADER) {
        return Err(MetricsError::Malformed(format!("unexpected header {headers:?}")));
    }
    rdr.deserialize::<Row>()
        .map(|row| MetricsRecord::try_from(row?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let recs = vec![
            MetricsRecord::new("r0", Phase::Meta, Some(0), 10).with("outer", 0.1 + 0.2).with("inner", 1e-300),
            MetricsRecord::new("r0", Phase::Quant, Some(0), 200).with("recon", f64::MIN_POSITIVE),
            MetricsRecord::new("r0", Phase::Eval, None, 0).with("gap", -0.0),
        ];
        write_metrics(&recs, &path).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back, recs);
    }

    #[test]
    fn out_of_order_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut w = MetricsWriter::open(&dir.path().join("m.csv")).unwrap();
        w.append(&MetricsRecord::new("r", Phase::Meta, Some(0), 5)).unwrap();
        w.append(&MetricsRecord::new("r", Phase::Quant, Some(0), 5)).unwrap();
        w.append(&MetricsRecord::new("r", Phase::Meta, Some(1), 5)).unwrap();
        assert!(w.append(&MetricsRecord::new("r", Phase::Quant, Some(0), 5)).is_err());
        w.append(&MetricsRecord::new("other", Phase::Quant, Some(0), 5)).unwrap();
    }
}
