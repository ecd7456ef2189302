//! Encounter records, dataset splits and their JSON Lines representation.
//!
//! One record per line:
//!
//! ```text
//! {"id":"enc-7","static":[61.0,1.0,0.0,27.4],"events":[[3,81.5,1600000120.0]],
//!  "notes":[[0.1,-0.3]],"labels":[0,1,0,0,0,0,0,0,0]}
//! ```
//!
//! A split directory holds `train.jsonl`, `val.jsonl`, `test.jsonl` and a
//! `manifest.json` naming them together with the training-split
//! normalization statistics.

pub mod synth;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tokenizer::NormStats;
use crate::N_TASKS;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub variable_id: usize,
    pub value: f64,
    /// Seconds since the unix epoch.
    pub timestamp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncounterRecord {
    pub id: String,
    pub static_features: Vec<f64>,
    pub events: Vec<Event>,
    /// Chunk embeddings of the encounter's clinical notes, possibly none.
    pub notes: Vec<Vec<f64>>,
    pub labels: [u8; N_TASKS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<EncounterRecord>,
    pub val: Vec<EncounterRecord>,
    pub test: Vec<EncounterRecord>,
    /// Fitted on `train` only.
    pub stats: NormStats,
}

impl DatasetSplit {
    /// Builds a split and fits normalization statistics on its training part.
    pub fn new(
        train: Vec<EncounterRecord>,
        val: Vec<EncounterRecord>,
        test: Vec<EncounterRecord>,
        n_variables: usize,
    ) -> Result<Self> {
        let stats = crate::tokenizer::fit_norm_stats(&train, n_variables);
        let split = DatasetSplit {
            train,
            val,
            test,
            stats,
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Input(format!("duplicate encounter id {}", r.id)));
            }
        }
        let note_dim = self.note_dim();
        let n_vars = self.stats.n_variables();
        for r in self.train.iter().chain(&self.val).chain(&self.test) {
            if let (Some(d), Some(bad)) = (note_dim, r.notes.iter().find(|n| Some(n.len()) != note_dim)) {
                return Err(Error::Input(format!(
                    "{}: note vector of dimension {} (expected {d})",
                    r.id,
                    bad.len()
                )));
            }
            if let Some(e) = r.events.iter().find(|e| e.variable_id >= n_vars) {
                return Err(Error::Input(format!(
                    "{}: variable id {} outside vocabulary of {n_vars}",
                    r.id, e.variable_id
                )));
            }
        }
        Ok(())
    }

    /// Dimension of note embeddings, if any record has notes.
    pub fn note_dim(&self) -> Option<usize> {
        self.train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .flat_map(|r| r.notes.first())
            .map(Vec::len)
            .next()
    }

    pub fn static_dim(&self) -> usize {
        self.train.first().map_or(0, |r| r.static_features.len())
    }
}

#[derive(Serialize)]
struct RecordOut<'a> {
    id: &'a str,
    #[serde(rename = "static")]
    static_features: &'a [f64],
    events: Vec<(usize, f64, f64)>,
    notes: &'a [Vec<f64>],
    labels: &'a [u8; N_TASKS],
}

pub fn record_to_json(r: &EncounterRecord) -> String {
    let out = RecordOut {
        id: &r.id,
        static_features: &r.static_features,
        events: r.events.iter().map(|e| (e.variable_id, e.value, e.timestamp)).collect(),
        notes: &r.notes,
        labels: &r.labels,
    };
    serde_json::to_string(&out).expect("record serialization")
}

/// Parses one JSONL line. `Err((field, message))` on schema violations.
pub fn record_from_json(line: &str) -> std::result::Result<EncounterRecord, (String, String)> {
    let v: Value = serde_json::from_str(line).map_err(|e| ("<json>".to_string(), e.to_string()))?;
    let obj = v
        .as_object()
        .ok_or_else(|| ("<json>".to_string(), "expected an object".to_string()))?;
    let field = |name: &str| obj.get(name).ok_or_else(|| (name.to_string(), "missing".to_string()));
    let bad = |name: &str, msg: &str| (name.to_string(), msg.to_string());
    for key in obj.keys() {
        if !["id", "static", "events", "notes", "labels"].contains(&key.as_str()) {
            return Err(bad(key, "unknown key"));
        }
    }

    let id = field("id")?
        .as_str()
        .ok_or_else(|| bad("id", "expected a string"))?
        .to_string();
    let static_features = real_array(field("static")?).map_err(|m| bad("static", &m))?;

    let events_v = field("events")?
        .as_array()
        .ok_or_else(|| bad("events", "expected an array"))?;
    let mut events = Vec::with_capacity(events_v.len());
    for (i, e) in events_v.iter().enumerate() {
        let name = format!("events[{i}]");
        let t = e
            .as_array()
            .filter(|t| t.len() == 3)
            .ok_or_else(|| bad(&name, "expected [variable_id, value, timestamp]"))?;
        let variable_id =
            t[0].as_u64()
                .ok_or_else(|| bad(&name, "variable_id must be a non-negative integer"))? as usize;
        let value = t[1].as_f64().ok_or_else(|| bad(&name, "value must be a number"))?;
        let timestamp = t[2]
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| bad(&name, "timestamp must be a finite number"))?;
        events.push(Event {
            variable_id,
            value,
            timestamp,
        });
    }

    let notes_v = field("notes")?
        .as_array()
        .ok_or_else(|| bad("notes", "expected an array of arrays"))?;
    let mut notes = Vec::with_capacity(notes_v.len());
    for (i, n) in notes_v.iter().enumerate() {
        let name = format!("notes[{i}]");
        let vec = real_array(n).map_err(|m| bad(&name, &m))?;
        if let Some(first) = notes.first().map(Vec::len) {
            if vec.len() != first {
                return Err(bad(&name, &format!("dimension {} differs from {first}", vec.len())));
            }
        }
        notes.push(vec);
    }

    let labels_v = field("labels")?
        .as_array()
        .ok_or_else(|| bad("labels", "expected an array"))?;
    if labels_v.len() != N_TASKS {
        return Err(bad("labels", &format!("expected {N_TASKS}, got {}", labels_v.len())));
    }
    let mut labels = [0u8; N_TASKS];
    for (k, l) in labels_v.iter().enumerate() {
        labels[k] = match l.as_u64() {
            Some(0) => 0,
            Some(1) => 1,
            _ => return Err(bad("labels", &format!("entry {k} must be 0 or 1"))),
        };
    }

    Ok(EncounterRecord {
        id,
        static_features,
        events,
        notes,
        labels,
    })
}

fn real_array(v: &Value) -> std::result::Result<Vec<f64>, String> {
    v.as_array()
        .ok_or_else(|| "expected an array of numbers".to_string())?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| "expected a number".to_string()))
        .collect()
}

pub fn write_records(path: &Path, records: &[EncounterRecord]) -> Result<()> {
    let f = fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    for r in records {
        writeln!(w, "{}", record_to_json(r)).map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    w.flush().map_err(|e| Error::io(format!("write {}", path.display()), e))
}

pub fn read_records(path: &Path) -> Result<Vec<EncounterRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
    let mut out = Vec::new();
    let mut note_dim: Option<(usize, usize)> = None;
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |field: String, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            field,
            message,
        };
        let rec = record_from_json(&line).map_err(|(f, m)| parse_err(f, m))?;
        if let Some(d) = rec.notes.first().map(Vec::len) {
            match note_dim {
                None => note_dim = Some((d, i + 1)),
                Some((d0, l0)) if d0 != d => {
                    return Err(parse_err(
                        "notes".into(),
                        format!("dimension {d} differs from {d0} on line {l0}"),
                    ))
                }
                _ => {}
            }
        }
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub stats: NormStats,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes the three split files and `manifest.json` into `dir`.
pub fn write_dataset(split: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    write_records(&dir.join("train.jsonl"), &split.train)?;
    write_records(&dir.join("val.jsonl"), &split.val)?;
    write_records(&dir.join("test.jsonl"), &split.test)?;
    let manifest = Manifest {
        train: "train.jsonl".into(),
        val: "val.jsonl".into(),
        test: "test.jsonl".into(),
        stats: split.stats.clone(),
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")
        .map_err(|e| Error::io(format!("write {}", path.display()), e))
}

/// Reads a split directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<DatasetSplit> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { dir.join(p) };
    let split = DatasetSplit {
        train: read_records(&resolve(&manifest.train))?,
        val: read_records(&resolve(&manifest.val))?,
        test: read_records(&resolve(&manifest.test))?,
        stats: manifest.stats,
    };
    split.validate()?;
    Ok(split)
}

/// Label rate per task.
pub fn prevalence(records: &[EncounterRecord]) -> [f64; N_TASKS] {
    let mut out = [0.0; N_TASKS];
    if records.is_empty() {
        return out;
    }
    for r in records {
        for (o, &l) in out.iter_mut().zip(&r.labels) {
            *o += l as f64;
        }
    }
    out.iter_mut().for_each(|o| *o /= records.len() as f64);
    out
}
