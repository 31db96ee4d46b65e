//! Line-delimited JSON training log.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::{AdamParams, StepDecay};
use super::Recipe;
use crate::error::{Error, Result};
use crate::losses::{LossBreakdown, LossWeights, LowRankAnchor, RankLayout};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "kebab-case")]
pub enum LogRecord {
    Header {
        recipe: Recipe,
        fingerprint: String,
        seed: u64,
        deterministic: bool,
        iterations: usize,
        weights: LossWeights,
        adam: AdamParams,
        schedule: StepDecay,
        rank_layout: RankLayout,
        lowrank_anchor: LowRankAnchor,
        warm_start: bool,
        frozen_ids: Vec<String>,
    },
    Iter {
        iter: usize,
        lr: f64,
        losses: LossBreakdown,
    },
    Epoch {
        epoch: usize,
        val_e_stab: f64,
    },
}

/// Records kept in memory and, when a path is given, streamed to disk.
#[derive(Default)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    sink: Option<(BufWriter<File>, std::path::PathBuf)>,
}

impl RunLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            records: Vec::new(),
            sink: Some((BufWriter::new(f), path.to_path_buf())),
        })
    }

    pub fn push(&mut self, rec: LogRecord) -> Result<()> {
        if let Some((w, path)) = &mut self.sink {
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some((w, path)) = &mut self.sink {
            w.flush().map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }

    pub fn iterations(&self) -> impl Iterator<Item = (usize, f64, &LossBreakdown)> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Iter { iter, lr, losses } => Some((*iter, *lr, losses)),
            _ => None,
        })
    }

    pub fn epochs(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch { epoch, val_e_stab } => Some((*epoch, *val_e_stab)),
            _ => None,
        })
    }

    pub fn final_val(&self) -> Option<f64> {
        self.epochs().last().map(|(_, v)| v)
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(path, e))?;
            Ok(serde_json::from_str(&l)?)
        })
        .collect()
}
