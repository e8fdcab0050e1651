//! Pieces shared by the training loops: checkpoint files, learning-rate
//! schedules, shuffling and loss bookkeeping.

use std::fs;
use std::path::Path;

use candle_core::Var;
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const LOG_FILE: &str = "train_log.json";

/// Write `config.json` and `weights.safetensors` into `dir`.
pub fn save_checkpoint<C: Serialize>(dir: &Path, config: &C, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(CONFIG_FILE), config)?;
    store.save(&dir.join(WEIGHTS_FILE))
}

pub fn read_config<C: DeserializeOwned>(dir: &Path) -> Result<C> {
    read_json(&dir.join(CONFIG_FILE))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Adam is AdamW without decay.
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    adamw(vars, lr, 0.0)
}

pub fn adamw(vars: Vec<Var>, lr: f64, weight_decay: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay,
            ..Default::default()
        },
    )?)
}

/// Triangular cyclical learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CyclicLr {
    pub min_lr: f64,
    pub max_lr: f64,
    /// Steps from `min_lr` up to `max_lr`; a full cycle is twice this.
    pub half_cycle: usize,
}

impl Default for CyclicLr {
    fn default() -> Self {
        Self {
            min_lr: 1e-5,
            max_lr: 1e-3,
            half_cycle: 20,
        }
    }
}

impl CyclicLr {
    pub fn at(&self, step: usize) -> f64 {
        let half = self.half_cycle.max(1) as f64;
        let pos = (step as f64 / half) % 2.0;
        let frac = if pos <= 1.0 { pos } else { 2.0 - pos };
        self.min_lr + (self.max_lr - self.min_lr) * frac
    }

    pub fn apply<O: Optimizer>(&self, opt: &mut O, step: usize) {
        opt.set_learning_rate(self.at(step));
    }
}

/// Deterministic per-epoch permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

/// Fail fast on a NaN or infinite loss.
pub fn check_finite(loss: f64, step: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Diverged { step, loss })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

/// Loss history of one training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Mean training loss over each window of `log_every` steps.
    pub logged: Vec<f64>,
    pub steps: usize,
    /// Epoch whose weights were kept.
    pub selected_epoch: Option<usize>,
    /// True when too few epochs ran for the trailing-window rule.
    pub degenerate_selection: bool,
    #[serde(skip)]
    pub(crate) window: Vec<f64>,
}

impl TrainLog {
    pub fn record_step(&mut self, loss: f64, log_every: usize) {
        self.steps += 1;
        self.window.push(loss);
        if self.window.len() >= log_every.max(1) {
            self.flush();
        }
    }

    fn flush(&mut self) {
        if !self.window.is_empty() {
            let mean = self.window.iter().sum::<f64>() / self.window.len() as f64;
            self.logged.push(mean);
            self.window.clear();
        }
    }

    pub fn finish(&mut self) {
        self.flush();
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .map(|e| e.val_loss.unwrap_or(e.train_loss))
            .collect()
    }
}

/// Tracks the trailing-window checkpoint rule online, so only the weights
/// of the current best epoch are held in memory.
pub struct TrailingSelector {
    window: usize,
    total_epochs: usize,
    history: Vec<f64>,
    best: Option<(usize, f64)>,
}

impl TrailingSelector {
    pub fn new(window: usize, total_epochs: usize) -> Self {
        Self {
            window: window.max(1),
            total_epochs,
            history: Vec::new(),
            best: None,
        }
    }

    pub fn degenerate(&self) -> bool {
        self.total_epochs < self.window
    }

    /// Record an epoch's validation loss; true when this epoch becomes the
    /// selected one and its weights should be snapshotted.
    pub fn push(&mut self, val_loss: f64) -> bool {
        self.history.push(val_loss);
        let epoch = self.history.len() - 1;
        let score = if self.degenerate() {
            val_loss
        } else if self.history.len() >= self.window {
            self.history[self.history.len() - self.window..].iter().sum::<f64>() / self.window as f64
        } else {
            return false;
        };
        match self.best {
            Some((_, s)) if score >= s => false,
            _ => {
                self.best = Some((epoch, score));
                true
            }
        }
    }

    pub fn selected(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use echoguide_core::pose::select_checkpoint_epoch;

    #[test]
    fn cyclic_lr_shape() {
        let s = CyclicLr {
            min_lr: 1e-5,
            max_lr: 1e-3,
            half_cycle: 10,
        };
        assert_eq!(s.at(0), 1e-5);
        assert!((s.at(10) - 1e-3).abs() < 1e-15);
        assert!((s.at(20) - 1e-5).abs() < 1e-15);
        assert!((s.at(5) - s.at(15)).abs() < 1e-15);
    }

    #[test]
    fn online_selection_matches_offline_rule() {
        let cases: [&[f64]; 4] = [
            &[5.0, 4.0, 3.0, 2.0, 1.0, 0.5, 0.4],
            &[1.0, 2.0, 1.0, 0.5, 3.0, 0.2, 0.2, 9.0, 0.1],
            &[3.0, 1.0, 2.0],
            &[2.0, 2.0, 2.0, 2.0, 2.0, 2.0],
        ];
        for losses in cases {
            let mut sel = TrailingSelector::new(5, losses.len());
            for &l in losses {
                sel.push(l);
            }
            let (want, degenerate) = select_checkpoint_epoch(losses, 5).unwrap();
            assert_eq!(sel.selected(), Some(want), "{losses:?}");
            assert_eq!(sel.degenerate(), degenerate);
        }
    }

    #[test]
    fn logged_points_are_window_means() {
        let mut log = TrainLog::default();
        for l in [4.0, 2.0, 3.0, 1.0, 5.0] {
            log.record_step(l, 2);
        }
        log.finish();
        assert_eq!(log.logged, vec![3.0, 2.0, 5.0]);
        assert_eq!(log.steps, 5);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(10, 1, 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(10, 1, 0));
        assert_ne!(a, epoch_order(10, 1, 1));
    }
}
