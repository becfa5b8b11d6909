//! Truncated backpropagation through time: which frames trigger an update
//! and how far back each update's gradient reaches. Frames are numbered from 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TbpttConfig {
    /// Frames between two updates.
    pub k1: usize,
    /// Truncation depth.
    pub k2: usize,
    /// Frame of the first update.
    pub k3: usize,
    /// Sub-sequence length.
    #[serde(default = "default_length")]
    pub length: usize,
}

fn default_length() -> usize {
    25
}

impl Default for TbpttConfig {
    fn default() -> Self {
        Self {
            k1: 5,
            k2: 5,
            k3: 10,
            length: 25,
        }
    }
}

impl TbpttConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 {
            return Err(Error::config("k1 and k2 must be at least 1"));
        }
        if self.k3 < self.k2 {
            return Err(Error::config(format!(
                "k3 = {} must be at least k2 = {}",
                self.k3, self.k2
            )));
        }
        if self.length < self.k3 {
            return Err(Error::config(format!(
                "sub-sequence length {} is shorter than k3 = {}",
                self.length, self.k3
            )));
        }
        Ok(())
    }
}

/// One optimiser update at `frame`, backpropagating through frames
/// `start..=frame`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Update {
    pub frame: usize,
    pub start: usize,
}

impl Update {
    pub fn frames(&self) -> std::ops::RangeInclusive<usize> {
        self.start..=self.frame
    }
}

pub fn tbptt_schedule(cfg: &TbpttConfig) -> Result<Vec<Update>> {
    cfg.validate()?;
    Ok((cfg.k3..=cfg.length)
        .step_by(cfg.k1)
        .map(|t| Update {
            frame: t,
            start: t + 1 - cfg.k2,
        })
        .collect())
}
