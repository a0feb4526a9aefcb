//! Domain data model: instances with closed candidate sets, logged bandit
//! interactions, and their line-delimited file formats.
//!
//! Both file formats are UTF-8 with one JSON record per line. Floats are
//! written with 17 significant digits so that a write/read cycle is
//! bit-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Token = String;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        })
    }
}

/// One output structure `y` for an input, with its feature vector `φ(x, y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub tokens: Vec<Token>,
    pub features: Vec<f64>,
}

/// An input with its candidate set. Candidate ids are positions `0..K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u64,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Vec<Token>>,
    pub candidates: Vec<Candidate>,
}

impl Instance {
    pub fn num_candidates(&self) -> usize {
        self.candidates.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.candidates.first().map_or(0, |c| c.features.len())
    }

    pub fn reference(&self) -> Result<&[Token]> {
        self.reference
            .as_deref()
            .ok_or(Error::MissingReference(self.id))
    }

    pub fn candidate(&self, id: usize) -> Result<&Candidate> {
        self.candidates.get(id).ok_or_else(|| {
            Error::Validation(format!(
                "candidate {id} out of range for instance {} (K = {})",
                self.id,
                self.candidates.len()
            ))
        })
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::Validation(format!(
                "instance {} has no candidates",
                self.id
            )));
        }
        for (k, c) in self.candidates.iter().enumerate() {
            if c.features.len() != dim {
                return Err(Error::Validation(format!(
                    "instance {} candidate {k}: feature dimension {} differs from {dim}",
                    self.id,
                    c.features.len()
                )));
            }
            if c.tokens.is_empty() {
                return Err(Error::Validation(format!(
                    "instance {} candidate {k}: empty token sequence",
                    self.id
                )));
            }
            if c.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "instance {} candidate {k}: non-finite feature",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    instances: BTreeMap<u64, Instance>,
    feature_dim: usize,
}

impl Dataset {
    /// Validates and indexes instances. The feature dimension is taken from
    /// the first instance.
    pub fn new(instances: Vec<Instance>) -> Result<Self> {
        let feature_dim = instances.first().map_or(0, Instance::feature_dim);
        let mut map = BTreeMap::new();
        for inst in instances {
            inst.validate(feature_dim)?;
            let id = inst.id;
            if map.insert(id, inst).is_some() {
                return Err(Error::Validation(format!("duplicate instance id {id}")));
            }
        }
        Ok(Self {
            instances: map,
            feature_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&Instance> {
        self.instances.get(&id)
    }

    pub fn instance(&self, id: u64) -> Result<&Instance> {
        self.get(id)
            .ok_or_else(|| Error::Validation(format!("unknown instance id {id}")))
    }

    /// Instances in ascending id order.
    pub fn instances(&self) -> impl Iterator<Item = &Instance> {
        self.instances.values()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Instance> {
        self.instances.values().filter(move |i| i.split == split)
    }

    pub fn vocabulary(&self) -> std::collections::BTreeSet<&str> {
        self.instances()
            .flat_map(|i| {
                i.candidates
                    .iter()
                    .flat_map(|c| c.tokens.iter())
                    .chain(i.reference.iter().flatten())
            })
            .map(String::as_str)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogMode {
    Deterministic,
    Stochastic,
}

impl fmt::Display for LogMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LogMode::Deterministic => "deterministic",
            LogMode::Stochastic => "stochastic",
        })
    }
}

/// One logged interaction `(x_t, y_t, Δ_t)` with its logging propensity.
/// Rewards are stored; losses are never stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub instance_id: u64,
    pub candidate_id: usize,
    pub reward: f64,
    pub propensity: f64,
    pub mode: LogMode,
}

impl LogEntry {
    pub fn validate(&self, dataset: &Dataset) -> Result<()> {
        if !(0.0..=1.0).contains(&self.reward) {
            return Err(Error::Validation(format!(
                "instance {}: reward {} outside [0, 1]",
                self.instance_id, self.reward
            )));
        }
        if !(self.propensity > 0.0 && self.propensity <= 1.0) {
            return Err(Error::Validation(format!(
                "instance {}: propensity {} outside (0, 1]",
                self.instance_id, self.propensity
            )));
        }
        if self.mode == LogMode::Deterministic && self.propensity != 1.0 {
            return Err(Error::Validation(format!(
                "instance {}: deterministic entry with propensity {}",
                self.instance_id, self.propensity
            )));
        }
        dataset
            .instance(self.instance_id)?
            .candidate(self.candidate_id)?;
        Ok(())
    }
}

/// What to do with a log entry whose candidate is not in its instance's set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingCandidate {
    #[default]
    Error,
    Skip,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedLog {
    pub entries: Vec<LogEntry>,
    pub skipped: usize,
}

// ── canonical serialization ─────────────────────────────────────────────

/// Compact JSON with every float written as `d.dddddddddddddddde±x`.
#[derive(Clone, Copy, Default)]
struct CanonicalFormatter;

impl serde_json::ser::Formatter for CanonicalFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes `value` as one canonical JSON line (without trailing newline).
pub fn to_canonical_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, CanonicalFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| Error::NonFinite(e.to_string()))?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

pub fn write_records<'a, T, I>(path: &Path, records: I) -> Result<()>
where
    T: Serialize + 'a,
    I: IntoIterator<Item = &'a T>,
{
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = to_canonical_json(r)?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let line = to_canonical_json(value)?;
    std::fs::write(path, format!("{line}\n")).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

/// Reads one record per non-blank line.
pub fn read_records<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    Dataset::new(read_records(path)?)
}

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    write_records(path, dataset.instances())
}

pub fn read_log(path: &Path, dataset: &Dataset, missing: MissingCandidate) -> Result<LoadedLog> {
    let raw: Vec<LogEntry> = read_records(path)?;
    let mut entries = Vec::with_capacity(raw.len());
    let mut skipped = 0;
    for e in raw {
        let inst = dataset.instance(e.instance_id)?;
        if e.candidate_id >= inst.num_candidates() && missing == MissingCandidate::Skip {
            skipped += 1;
            continue;
        }
        e.validate(dataset)?;
        entries.push(e);
    }
    Ok(LoadedLog { entries, skipped })
}

pub fn write_log(entries: &[LogEntry], path: &Path) -> Result<()> {
    write_records(path, entries)
}
