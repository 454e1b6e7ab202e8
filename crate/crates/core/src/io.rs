//! File formats: dataset JSON, JSON-lines traces, co-occurrence CSV and
//! clustering JSON.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dpm::{GibbsSample, GibbsState};
use crate::error::{Error, Result};
use crate::postsel::{CooccurrenceMatrix, SelectedClustering};
use crate::ssm::{ClusterParams, SeriesObservations, SsmConfig};

pub const SCHEMA_VERSION: u32 = 1;

/// Whether series run over time bins or over trials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Time,
    Trial,
}

/// One raw count series. The model sees `counts[onset..]` with baseline `x0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeriesRecord {
    pub id: String,
    pub x0: f64,
    pub psi0: f64,
    pub onset: usize,
    pub counts: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub schema_version: u32,
    pub domain: Domain,
    pub bin_width_ms: f64,
    /// Binomial size of every count.
    pub n_trials_bins: u32,
    /// Index of the true stimulus bin, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_onset: Option<usize>,
    pub series: Vec<SeriesRecord>,
    /// Ground-truth group labels, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<u32>>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("unsupported schema_version {} (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.n_trials_bins == 0 {
            return bad("n_trials_bins must be positive".into());
        }
        if !(self.bin_width_ms > 0.0) {
            return bad(format!("bin_width_ms must be positive, got {}", self.bin_width_ms));
        }
        if self.series.is_empty() {
            return bad("dataset has no series".into());
        }
        let mut ids = HashSet::new();
        for (i, s) in self.series.iter().enumerate() {
            if !ids.insert(s.id.as_str()) {
                return bad(format!("duplicate series id {:?}", s.id));
            }
            if s.onset >= s.counts.len() {
                return bad(format!("series {:?}: onset {} leaves no bins out of {}", s.id, s.onset, s.counts.len()));
            }
            if let Some(c) = s.counts.iter().find(|&&c| c > self.n_trials_bins) {
                return bad(format!("series {i} ({:?}): count {c} exceeds n_trials_bins {}", s.id, self.n_trials_bins));
            }
            SsmConfig::new(s.x0, s.psi0, self.n_trials_bins).map_err(|e| e.context(format!("series {:?}", s.id)))?;
        }
        if let Some(t) = &self.truth {
            if t.len() != self.series.len() {
                return bad(format!("{} truth labels for {} series", t.len(), self.series.len()));
            }
        }
        Ok(())
    }

    /// Model-facing series.
    pub fn observations(&self) -> Result<Vec<SeriesObservations>> {
        self.series
            .iter()
            .map(|s| {
                let cfg = SsmConfig::new(s.x0, s.psi0, self.n_trials_bins)?;
                SeriesObservations::new(s.counts[s.onset..].to_vec(), cfg)
                    .map_err(|e| e.context(format!("series {:?}", s.id)))
            })
            .collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.series.iter().map(|s| s.id.clone()).collect()
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(text).map_err(json_format)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        Self::from_json_str(&text).map_err(|e| e.context(path.display().to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        write_json(path, self)
    }
}

fn json_format(e: serde_json::Error) -> Error {
    Error::Format { line: e.line(), message: e.to_string() }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let ctx = |e: Error| e.context(path.display().to_string());
    let mut w = BufWriter::new(File::create(path).map_err(|e| ctx(e.into()))?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| ctx(e.into()))?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| ctx(e.into()))
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub iter: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "Z")]
    pub z: Vec<usize>,
    /// `[mu, log_psi]` per cluster.
    pub theta: Vec<[f64; 2]>,
    pub accepted: Vec<bool>,
}

impl From<&GibbsSample> for TraceRecord {
    fn from(s: &GibbsSample) -> Self {
        Self {
            iter: s.iter,
            k: s.state.n_clusters(),
            z: s.state.assignments.clone(),
            theta: s.state.params.iter().map(|p| [p.mu, p.log_psi]).collect(),
            accepted: s.accepted.clone(),
        }
    }
}

impl TryFrom<TraceRecord> for GibbsSample {
    type Error = Error;

    fn try_from(r: TraceRecord) -> Result<Self> {
        if r.k != r.theta.len() {
            return Err(Error::InvalidParameter(format!("K = {} but {} parameter pairs", r.k, r.theta.len())));
        }
        let params = r
            .theta
            .iter()
            .map(|&[mu, log_psi]| ClusterParams::new(mu, log_psi))
            .collect::<Result<_>>()?;
        let state = GibbsState { assignments: r.z, params };
        state.validate()?;
        Ok(GibbsSample { iter: r.iter, state, accepted: r.accepted })
    }
}

/// Appends one JSON record per sample, flushing after each line.
pub struct TraceWriter<W: Write> {
    out: W,
}

impl<W: Write> TraceWriter<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn write(&mut self, sample: &GibbsSample) -> Result<()> {
        serde_json::to_writer(&mut self.out, &TraceRecord::from(sample))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

/// Parses a trace; errors carry 1-based line numbers. Blank lines are skipped.
pub fn read_trace<R: Read>(input: R) -> Result<Vec<GibbsSample>> {
    let mut samples: Vec<GibbsSample> = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fmt = |message: String| Error::Format { line: i + 1, message };
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| fmt(e.to_string()))?;
        let sample = GibbsSample::try_from(rec).map_err(|e| fmt(e.to_string()))?;
        if let Some(first) = samples.first() {
            let n = first.state.assignments.len();
            if sample.state.assignments.len() != n {
                return Err(fmt(format!("record has {} series, earlier records {n}", sample.state.assignments.len())));
            }
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::Format { line: 0, message: "trace is empty".into() });
    }
    Ok(samples)
}

pub fn read_trace_file(path: &Path) -> Result<Vec<GibbsSample>> {
    let f = File::open(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
    read_trace(f).map_err(|e| e.context(path.display().to_string()))
}

/// Header of series ids, then one row of six-decimal values per series.
pub fn write_cooccurrence_csv<W: Write>(out: W, ids: &[String], matrix: &CooccurrenceMatrix) -> Result<()> {
    matrix.validate()?;
    if ids.len() != matrix.n() {
        return Err(Error::InvalidParameter(format!("{} ids for a {}x{} matrix", ids.len(), matrix.n(), matrix.n())));
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ids).map_err(csv_error)?;
    for i in 0..matrix.n() {
        w.write_record(matrix.row(i).iter().map(|v| format!("{v:.6}"))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cooccurrence_csv<R: Read>(input: R) -> Result<(Vec<String>, CooccurrenceMatrix)> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let ids: Vec<String> = r.headers().map_err(csv_error)?.iter().map(str::to_owned).collect();
    let mut entries = Vec::with_capacity(ids.len() * ids.len());
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(csv_error)?;
        let line = i + 2;
        if row.len() != ids.len() {
            return Err(Error::Format { line, message: format!("{} fields, expected {}", row.len(), ids.len()) });
        }
        for field in row.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Format { line, message: format!("not a number: {field:?}") })?;
            entries.push(v);
        }
    }
    let matrix = CooccurrenceMatrix::from_entries(ids.len(), entries)?;
    Ok((ids, matrix))
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Format { line, message: e.to_string() }
}

/// Output of cluster selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusteringFile {
    pub schema_version: u32,
    pub burn_in: usize,
    pub n_clusters: usize,
    pub series_ids: Vec<String>,
    #[serde(flatten)]
    pub selection: SelectedClustering,
}

impl ClusteringFile {
    pub fn new(selection: SelectedClustering, series_ids: Vec<String>, burn_in: usize) -> Result<Self> {
        if series_ids.len() != selection.assignments.len() {
            return Err(Error::InvalidParameter(format!(
                "{} series ids for {} assignments",
                series_ids.len(),
                selection.assignments.len()
            )));
        }
        Ok(Self { schema_version: SCHEMA_VERSION, burn_in, n_clusters: selection.params.len(), series_ids, selection })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display().to_string()))?;
        serde_json::from_str(&text).map_err(json_format)
    }
}
