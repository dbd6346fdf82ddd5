//! Contextual softmax over a finite action-template set.

use super::TrainError;
use crate::envs::agent::{ContextKey, Projector};
use crate::envs::{Actor, DialogueView, EnvError};
use crate::io::{f64_from_le_bytes, f64_to_le_bytes, sha256_hex, write_atomic};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub num_actions: usize,
    contexts: BTreeMap<ContextKey, usize>,
    logits: Vec<f64>,
    pub learning_rate: f64,
    pub seed: u64,
    pub step: u64,
}

/// Numerically stable softmax; summation runs in action order.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

impl PolicyParams {
    pub fn new(num_actions: usize, learning_rate: f64, seed: u64) -> Self {
        Self { num_actions, contexts: BTreeMap::new(), logits: Vec::new(), learning_rate, seed, step: 0 }
    }

    /// Registers `key` with zero logits if it is new; returns its block index.
    pub fn ensure_context(&mut self, key: &ContextKey) -> usize {
        if let Some(&b) = self.contexts.get(key) {
            return b;
        }
        let b = self.contexts.len();
        self.contexts.insert(key.clone(), b);
        self.logits.extend(std::iter::repeat_n(0.0, self.num_actions));
        b
    }

    pub fn block(&self, key: &ContextKey) -> Option<usize> {
        self.contexts.get(key).copied()
    }

    pub fn num_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn num_params(&self) -> usize {
        self.logits.len()
    }

    pub fn contexts(&self) -> impl Iterator<Item = (&ContextKey, usize)> {
        self.contexts.iter().map(|(k, &b)| (k, b))
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn block_logits(&self, block: usize) -> &[f64] {
        &self.logits[block * self.num_actions..(block + 1) * self.num_actions]
    }

    pub fn block_probs(&self, block: usize) -> Vec<f64> {
        softmax(self.block_logits(block))
    }

    /// Action distribution in `key`; uniform for unseen contexts.
    pub fn probs(&self, key: &ContextKey) -> Vec<f64> {
        match self.block(key) {
            Some(b) => self.block_probs(b),
            None => vec![1.0 / self.num_actions as f64; self.num_actions],
        }
    }

    /// `log π(a|c)` and its gradient on the context's logit block:
    /// `∂/∂logit_b log π(a) = 1[b = a] − π(b)`.
    pub fn log_prob_and_grad(&self, key: &ContextKey, action: usize) -> Result<(f64, usize, Vec<f64>), TrainError> {
        let block = self.block(key).ok_or_else(|| TrainError::UnknownContext(key.0.clone()))?;
        let (lp, grad) = self.block_log_prob_and_grad(block, action)?;
        Ok((lp, block, grad))
    }

    pub fn block_log_prob_and_grad(&self, block: usize, action: usize) -> Result<(f64, Vec<f64>), TrainError> {
        if action >= self.num_actions {
            return Err(TrainError::UnknownAction { action, num_actions: self.num_actions });
        }
        let probs = self.block_probs(block);
        let mut grad: Vec<f64> = probs.iter().map(|p| -p).collect();
        grad[action] += 1.0;
        Ok((probs[action].ln(), grad))
    }

    /// `θ ← θ + scale · direction`.
    pub fn ascend(&mut self, direction: &[f64], scale: f64) {
        for (l, d) in self.logits.iter_mut().zip(direction) {
            *l += scale * d;
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let block = f64_to_le_bytes(&self.logits);
        let block_path = logits_path(path);
        let mut contexts: Vec<(usize, Vec<u32>)> = self.contexts.iter().map(|(k, &b)| (b, k.0.clone())).collect();
        contexts.sort();
        let rec = CheckpointFile {
            num_actions: self.num_actions,
            contexts: contexts.into_iter().map(|(_, k)| k).collect(),
            learning_rate: self.learning_rate,
            seed: self.seed,
            step: self.step,
            logits_file: block_path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            logits_checksum: sha256_hex(&block),
        };
        write_atomic(&block_path, &block).map_err(io(&block_path))?;
        write_atomic(path, &serde_json::to_vec_pretty(&rec).expect("checkpoint serializes")).map_err(io(path))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let rec: CheckpointFile = serde_json::from_slice(&fs::read(path).map_err(io(path))?)
            .map_err(|e| TrainError::Io { path: path.display().to_string(), msg: e.to_string() })?;
        let block_path = logits_path(path);
        let block = fs::read(&block_path).map_err(io(&block_path))?;
        if sha256_hex(&block) != rec.logits_checksum || block.len() != rec.contexts.len() * rec.num_actions * 8 {
            return Err(TrainError::Io { path: block_path.display().to_string(), msg: "checksum mismatch".into() });
        }
        let contexts = rec.contexts.into_iter().enumerate().map(|(b, k)| (ContextKey(k), b)).collect();
        Ok(Self {
            num_actions: rec.num_actions,
            contexts,
            logits: f64_from_le_bytes(&block),
            learning_rate: rec.learning_rate,
            seed: rec.seed,
            step: rec.step,
        })
    }
}

fn io(p: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io { path: p.display().to_string(), msg: e.to_string() }
}

fn logits_path(path: &Path) -> PathBuf {
    path.with_extension("logits.bin")
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    num_actions: usize,
    /// Context keys in block order.
    contexts: Vec<Vec<u32>>,
    learning_rate: f64,
    seed: u64,
    step: u64,
    logits_file: String,
    logits_checksum: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    /// Argmax, exact ties broken uniformly at random.
    Greedy,
    Sample,
}

/// Acts in a live game by projecting the dialogue onto cluster labels.
pub struct PolicyActor<'a> {
    pub params: &'a PolicyParams,
    pub projector: &'a Projector,
    pub window: usize,
    pub mode: ActMode,
}

/// Index drawn from `probs` (CDF inversion in action order).
pub fn sample_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn greedy_index(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let best: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] == max).collect();
    best[rng.random_range(0..best.len())]
}

impl Actor for PolicyActor<'_> {
    fn act(&self, view: &DialogueView<'_>, rng: &mut ChaCha8Rng) -> Result<usize, EnvError> {
        let key = self.projector.context(view, self.window).map_err(|e| EnvError::Policy(e.to_string()))?;
        let probs = self.params.probs(&key);
        Ok(match self.mode {
            ActMode::Greedy => greedy_index(&probs, rng),
            ActMode::Sample => sample_index(&probs, rng),
        })
    }
}
