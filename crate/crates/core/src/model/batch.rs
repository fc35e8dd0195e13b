use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One token sequence; positions `target_start..` are predicted from their prefix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub target_start: usize,
}

impl Sample {
    pub fn new(tokens: Vec<usize>, target_start: usize) -> Self {
        Self { tokens, target_start }
    }

    pub fn targets(&self) -> &[usize] {
        &self.tokens[self.target_start..]
    }
}

/// Right-padded batch of samples flattened to `batch * seq` rows.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    /// Rows holding real (non-pad) tokens.
    pub valid_rows: Vec<usize>,
    /// Rows whose next-token prediction is scored, with their targets.
    pub target_rows: Vec<usize>,
    pub targets: Vec<usize>,
    /// Sample index of every scored row.
    pub sample_of_target: Vec<usize>,
}

impl TokenBatch {
    pub fn new(samples: &[&Sample], pad: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let seq = samples.iter().map(|s| s.tokens.len()).max().unwrap_or(0);
        let mut tokens = Vec::with_capacity(samples.len() * seq);
        let mut valid_rows = Vec::new();
        let mut target_rows = Vec::new();
        let mut targets = Vec::new();
        let mut sample_of_target = Vec::new();
        for (b, s) in samples.iter().enumerate() {
            if s.target_start == 0 || s.target_start >= s.tokens.len() {
                return Err(Error::Domain(format!(
                    "sample target_start {} must lie inside 1..{}",
                    s.target_start,
                    s.tokens.len()
                )));
            }
            for p in 0..seq {
                let row = b * seq + p;
                match s.tokens.get(p) {
                    Some(&t) => {
                        tokens.push(t);
                        valid_rows.push(row);
                    }
                    None => tokens.push(pad),
                }
            }
            for p in s.target_start..s.tokens.len() {
                target_rows.push(b * seq + p - 1);
                targets.push(s.tokens[p]);
                sample_of_target.push(b);
            }
        }
        Ok(Self {
            tokens,
            batch: samples.len(),
            seq,
            valid_rows,
            target_rows,
            targets,
            sample_of_target,
        })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| r % self.seq).collect()
    }
}
