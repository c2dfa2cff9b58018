use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::amr::RefinementEvent;
use crate::dataset::N_ELEMENTS;
use crate::error::{Error, Result};
use crate::reward::RewardBreakdown;

/// 52-slot vectors are written as `[[index, value], ...]` over nonzero slots.
pub mod sparse {
    use super::*;

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
        let pairs: Vec<(usize, f64)> = v
            .iter()
            .enumerate()
            .filter(|(_, x)| **x != 0.0)
            .map(|(i, x)| (i, *x))
            .collect();
        pairs.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
        let pairs: Vec<(usize, f64)> = Vec::deserialize(d)?;
        let mut v = vec![0.0; N_ELEMENTS];
        for (i, x) in pairs {
            if i >= N_ELEMENTS {
                return Err(serde::de::Error::custom(format!("slot {i} out of range")));
            }
            v[i] = x;
        }
        Ok(v)
    }
}

pub mod sparse_opt {
    use super::*;

    pub fn serialize<S: Serializer>(v: &Option<Vec<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match v {
            Some(v) => super::sparse::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<f64>>, D::Error> {
        let raw: Option<Vec<(usize, f64)>> = Option::deserialize(d)?;
        Ok(raw.map(|pairs| {
            let mut v = vec![0.0; N_ELEMENTS];
            for (i, x) in pairs {
                if i < N_ELEMENTS {
                    v[i] = x;
                }
            }
            v
        }))
    }
}

/// One environment step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: u64,
    /// 1-based step within the episode.
    pub k: usize,
    /// Global step before this transition.
    pub t: usize,
    pub base: String,
    pub bundle_version: u64,
    #[serde(with = "sparse")]
    pub s: Vec<f64>,
    /// The masked, clipped, zero-sum delta.
    #[serde(with = "sparse")]
    pub a: Vec<f64>,
    /// `None` for an illegal transition; the state then stays at `s`.
    #[serde(with = "sparse_opt")]
    pub s_next: Option<Vec<f64>>,
    pub reward: RewardBreakdown,
    /// The episode ended here, by success or by the step cap.
    pub terminal: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub episode: u64,
    pub base: String,
    pub steps: usize,
    /// Global step after the episode.
    pub t_end: usize,
    pub total_reward: f64,
    pub mean_reward: f64,
    pub legal_steps: usize,
    pub classified_steps: usize,
    pub kbr_steps: usize,
    /// Ended in a new-material event.
    pub success: bool,
    pub mean_value: f64,
    pub bundle_version: u64,
    pub predictions: u64,
    pub updates: usize,
    pub mean_critic_loss: Option<f64>,
    pub tep_replaced: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Start {
        episode: u64,
        t: usize,
        state_hash: String,
        resumed: bool,
    },
    Refinement(Box<RefinementEvent>),
    PoolBuilt {
        episode: u64,
        bundle_version: u64,
        size: usize,
        mean: f64,
    },
    Checkpoint {
        episode: u64,
        t: usize,
        state_hash: String,
    },
}

/// Append-only JSON-lines file.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    /// Opens for appending after truncating to `len` bytes, if given.
    pub fn open(path: &Path, len: Option<u64>) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if let Some(len) = len {
            file.set_len(len).map_err(|e| Error::io(path, e))?;
        }
        Ok(JsonlWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, value: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, value)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))
    }

    /// Flushes and returns the file length.
    pub fn flush(&mut self) -> Result<u64> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        let meta = self.out.get_ref().metadata().map_err(|e| Error::io(&self.path, e))?;
        Ok(meta.len())
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

/// Per-episode tallies recomputed from step records, in episode order.
pub fn summarize(records: &[StepRecord]) -> Vec<EpisodeSummary> {
    let mut out: Vec<EpisodeSummary> = Vec::new();
    for r in records {
        if out.last().map(|s| s.episode) != Some(r.episode) {
            out.push(EpisodeSummary {
                episode: r.episode,
                base: r.base.clone(),
                bundle_version: r.bundle_version,
                ..Default::default()
            });
        }
        let s = out.last_mut().expect("pushed above");
        s.steps += 1;
        s.t_end = r.t + 1;
        s.total_reward += r.reward.total;
        s.legal_steps += r.reward.legal as usize;
        s.classified_steps += r.reward.cls_prob.is_some_and(|p| p > 0.5) as usize;
        s.kbr_steps += r.reward.kbr_applied as usize;
        s.success |= r.reward.done;
    }
    for s in out.iter_mut() {
        s.mean_reward = s.total_reward / s.steps as f64;
    }
    out
}
