//! Synthetic sequence tasks.
//!
//! Every sample is laid out as `[task token, input.., SEP, target..]`
//! (arithmetic uses `[task, a, PLUS, b, EQ, c]`). Content tokens come from a
//! half-open vocabulary slice; slices of different tasks may overlap.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sample;
use crate::seed::derive_seed;

pub const PAD: usize = 0;
pub const SEP: usize = 1;
pub const PLUS: usize = 2;
pub const EQ: usize = 3;
/// Task tokens occupy `TASK_BASE..FIRST_CONTENT`; index 0 is the general task.
pub const TASK_BASE: usize = 4;
pub const FIRST_CONTENT: usize = 16;
pub const MAX_TASKS: usize = FIRST_CONTENT - TASK_BASE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SequenceCopy,
    SequenceReverse,
    ModularArithmetic,
    KeyValueRecall,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    /// Half-open content token range `[lo, hi)`.
    pub vocab: [usize; 2],
    /// Input length for copy/reverse, number of pairs for recall; unused by arithmetic.
    pub seq_len: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    /// Arithmetic modulus; defaults to the slice width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modulus: Option<usize>,
}

impl TaskSpec {
    pub fn new(id: &str, kind: TaskKind, vocab: [usize; 2], seq_len: usize) -> Self {
        Self {
            id: id.to_string(),
            kind,
            vocab,
            seq_len,
            train_samples: 2000,
            eval_samples: 200,
            modulus: None,
        }
    }

    pub fn width(&self) -> usize {
        self.vocab[1].saturating_sub(self.vocab[0])
    }

    fn modulus(&self) -> usize {
        self.modulus.unwrap_or(self.width())
    }

    /// Full token count of one sample.
    pub fn sample_len(&self) -> usize {
        match self.kind {
            TaskKind::SequenceCopy | TaskKind::SequenceReverse => 2 * self.seq_len + 2,
            TaskKind::ModularArithmetic => 6,
            TaskKind::KeyValueRecall => 2 * self.seq_len + 4,
        }
    }

    pub fn validate(&self, field: &str, vocab_size: usize, max_seq_len: usize) -> Result<()> {
        let [lo, hi] = self.vocab;
        if lo >= hi {
            return Err(Error::config(format!("{field}.vocab"), "empty vocabulary slice"));
        }
        if lo < FIRST_CONTENT || hi > vocab_size {
            return Err(Error::config(
                format!("{field}.vocab"),
                format!("slice must lie within [{FIRST_CONTENT}, {vocab_size})"),
            ));
        }
        if self.id.is_empty() {
            return Err(Error::config(format!("{field}.id"), "must not be empty"));
        }
        match self.kind {
            TaskKind::ModularArithmetic => {
                let m = self.modulus();
                if m < 2 || m > self.width() {
                    return Err(Error::config(
                        format!("{field}.modulus"),
                        format!("must lie in 2..={}", self.width()),
                    ));
                }
            }
            TaskKind::KeyValueRecall if self.seq_len > self.width() => {
                return Err(Error::config(format!("{field}.seq_len"), "more keys than vocabulary tokens"));
            }
            _ if self.seq_len == 0 => {
                return Err(Error::config(format!("{field}.seq_len"), "must be positive"));
            }
            _ => {}
        }
        if self.sample_len() > max_seq_len {
            return Err(Error::config(
                format!("{field}.seq_len"),
                format!("samples of {} tokens exceed max_seq_len {max_seq_len}", self.sample_len()),
            ));
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::config(format!("{field}.train_samples"), "both splits need samples"));
        }
        Ok(())
    }
}

/// The train and eval split of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub task_token: usize,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Datasets {
    pub tasks: Vec<TaskData>,
    /// Held-out task never trained on by adapters.
    pub general: TaskData,
}

impl Datasets {
    /// Specialist tasks followed by the general task.
    pub fn all(&self) -> impl Iterator<Item = &TaskData> {
        self.tasks.iter().chain(std::iter::once(&self.general))
    }

    pub fn task(&self, id: &str) -> Result<&TaskData> {
        self.all().find(|t| t.spec.id == id).ok_or_else(|| Error::Key(id.to_string()))
    }
}

/// One sample of `spec` drawn from `rng`.
pub fn generate_sample(spec: &TaskSpec, task_token: usize, rng: &mut impl Rng) -> Sample {
    let [lo, hi] = spec.vocab;
    let n = spec.seq_len;
    let mut tokens = vec![task_token];
    match spec.kind {
        TaskKind::SequenceCopy | TaskKind::SequenceReverse => {
            let input: Vec<usize> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
            tokens.extend(&input);
            tokens.push(SEP);
            if spec.kind == TaskKind::SequenceCopy {
                tokens.extend(&input);
            } else {
                tokens.extend(input.iter().rev());
            }
            Sample::new(tokens, n + 2)
        }
        TaskKind::ModularArithmetic => {
            let m = spec.modulus();
            let a = rng.random_range(0..m);
            let b = rng.random_range(0..m);
            tokens.extend([lo + a, PLUS, lo + b, EQ, lo + (a + b) % m]);
            Sample::new(tokens, 5)
        }
        TaskKind::KeyValueRecall => {
            let mut keys: Vec<usize> = Vec::with_capacity(n);
            while keys.len() < n {
                let k = rng.random_range(lo..hi);
                if !keys.contains(&k) {
                    keys.push(k);
                }
            }
            let values: Vec<usize> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
            for (k, v) in keys.iter().zip(&values) {
                tokens.extend([*k, *v]);
            }
            let q = rng.random_range(0..n);
            tokens.extend([SEP, keys[q], values[q]]);
            let len = tokens.len();
            Sample::new(tokens, len - 1)
        }
    }
}

fn gen_task(spec: &TaskSpec, task_token: usize, seed: u64) -> Result<TaskData> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &format!("task:{}", spec.id), &[]));
    let need = spec.train_samples + spec.eval_samples;
    let mut seen = HashSet::with_capacity(need);
    let mut samples = Vec::with_capacity(need);
    let mut attempts = 0usize;
    while samples.len() < need {
        attempts += 1;
        if attempts > 50 * need + 1000 {
            return Err(Error::config(
                format!("tasks.{}", spec.id),
                format!("sample space too small for {need} distinct samples"),
            ));
        }
        let s = generate_sample(spec, task_token, &mut rng);
        if seen.insert(s.tokens.clone()) {
            samples.push(s);
        }
    }
    let train = samples.split_off(spec.eval_samples);
    Ok(TaskData { spec: spec.clone(), task_token, train, eval: samples })
}

/// Builds disjoint train/eval splits for every specialist task and the general task.
pub fn gen_tasks(specs: &[TaskSpec], general: &TaskSpec, seed: u64) -> Result<Datasets> {
    if specs.is_empty() {
        return Err(Error::config("tasks.specialists", "at least one task is required"));
    }
    if specs.len() + 1 > MAX_TASKS {
        return Err(Error::config("tasks.specialists", format!("at most {} tasks", MAX_TASKS - 1)));
    }
    let mut ids = HashSet::new();
    for s in specs.iter().chain(std::iter::once(general)) {
        s.validate(&format!("tasks.{}", s.id), usize::MAX, usize::MAX)?;
        if !ids.insert(s.id.as_str()) {
            return Err(Error::config("tasks", format!("duplicate task id {:?}", s.id)));
        }
    }
    Ok(Datasets {
        general: gen_task(general, TASK_BASE, seed)?,
        tasks: specs
            .iter()
            .enumerate()
            .map(|(i, s)| gen_task(s, TASK_BASE + 1 + i, seed))
            .collect::<Result<_>>()?,
    })
}
