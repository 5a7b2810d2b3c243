//! Synthetic tasks: channel-wise argmax and selective copy.
//!
//! Every sample owns its RNG streams, derived from `(seed, split, index)`,
//! so any sample can be regenerated without materializing the dataset.
//! Winner indices and noise come from separate streams.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, FemError, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

const STREAM_NOISE: u64 = 0;
const STREAM_WINNER: u64 = 1;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one (seed, split, index, stream) cell.
pub fn sample_rng(seed: u64, split: Split, index: u64, stream: u64) -> ChaCha8Rng {
    let split_tag = match split {
        Split::Train => 0x7472_6169_6e00_0000,
        Split::Val => 0x7661_6c00_0000_0000,
    };
    let key = splitmix(splitmix(splitmix(seed) ^ split_tag) ^ index) ^ stream.wrapping_mul(0x2545_f491_4f6c_dd1d);
    ChaCha8Rng::seed_from_u64(splitmix(key))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArgmaxTaskConfig {
    /// Sequence length `T`.
    pub t: usize,
    /// Channels `D`.
    pub d: usize,
    pub delta: f64,
    pub sigma: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub seed: u64,
}

impl Default for ArgmaxTaskConfig {
    fn default() -> Self {
        Self { t: 128, d: 512, delta: 1.0, sigma: 0.05, n_train: 200_000, n_val: 2000, seed: 0 }
    }
}

impl ArgmaxTaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.d == 0 || self.n_train == 0 {
            return Err(FemError::InvalidConfig("T, D and n_train must be positive".into()));
        }
        if !(self.delta > 0.0) || !(self.sigma >= 0.0) || !self.delta.is_finite() || !self.sigma.is_finite() {
            return Err(FemError::InvalidConfig("need delta > 0 and sigma >= 0".into()));
        }
        Ok(())
    }
}

/// One argmax sample: values (T×D) and 0-based winner index per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ArgmaxSample {
    pub v: Mat,
    pub winners: Vec<usize>,
}

impl ArgmaxSample {
    /// `y*_j = max_i V_{ij}`.
    pub fn target(&self) -> Vec<f64> {
        (0..self.v.cols())
            .map(|j| (0..self.v.rows()).map(|i| self.v.get(i, j)).fold(f64::NEG_INFINITY, f64::max))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyBatch {
    pub samples: Vec<ArgmaxSample>,
    /// batch×D channel maxima.
    pub y_star: Mat,
}

impl ToyBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn gen_argmax_sample(cfg: &ArgmaxTaskConfig, split: Split, index: u64) -> ArgmaxSample {
    let mut winner_rng = sample_rng(cfg.seed, split, index, STREAM_WINNER);
    let winners: Vec<usize> = (0..cfg.d).map(|_| winner_rng.gen_range(0..cfg.t)).collect();
    let mut noise_rng = sample_rng(cfg.seed, split, index, STREAM_NOISE);
    let mut v = Mat::zeros(cfg.t, cfg.d);
    if cfg.sigma > 0.0 {
        for x in v.as_mut_slice() {
            let z: f64 = noise_rng.sample(StandardNormal);
            *x = cfg.sigma * z;
        }
    }
    for (j, &a) in winners.iter().enumerate() {
        v.add_at(a, j, cfg.delta);
    }
    ArgmaxSample { v, winners }
}

/// Samples `start..start + size` of a split (train indices wrap at `n_train`).
pub fn gen_argmax_batch(cfg: &ArgmaxTaskConfig, split: Split, start: u64, size: usize) -> ToyBatch {
    let wrap = match split {
        Split::Train => cfg.n_train as u64,
        Split::Val => u64::MAX,
    };
    let samples: Vec<ArgmaxSample> =
        (0..size as u64).map(|k| gen_argmax_sample(cfg, split, (start + k) % wrap)).collect();
    let mut y_star = Mat::zeros(size, cfg.d);
    for (b, s) in samples.iter().enumerate() {
        y_star.row_mut(b).copy_from_slice(&s.target());
    }
    ToyBatch { samples, y_star }
}

/// Streamed batches covering a split in order.
pub fn gen_argmax_task(cfg: &ArgmaxTaskConfig, split: Split, batch: usize) -> impl Iterator<Item = ToyBatch> + '_ {
    let total = match split {
        Split::Train => cfg.n_train,
        Split::Val => cfg.n_val,
    };
    (0..total).step_by(batch.max(1)).map(move |start| {
        let size = batch.max(1).min(total - start);
        gen_argmax_batch(cfg, split, start as u64, size)
    })
}

/// `argmin_i (V_{ij} - y_j)²`, ties toward the smallest index.
pub fn decode_indices(y: &[f64], v: &Mat) -> Vec<usize> {
    (0..v.cols())
        .map(|j| {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for i in 0..v.rows() {
                let d = (v.get(i, j) - y[j]).powi(2);
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of channels whose decoded index equals the winner, averaged
/// over the batch.
pub fn index_accuracy(y: &Mat, samples: &[ArgmaxSample]) -> Result<f64> {
    if y.rows() != samples.len() {
        return Err(shape_err(format!("{} predictions for {} samples", y.rows(), samples.len())));
    }
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (b, s) in samples.iter().enumerate() {
        if y.cols() != s.v.cols() {
            return Err(shape_err("prediction width differs from channel count"));
        }
        let idx = decode_indices(y.row(b), &s.v);
        hits += idx.iter().zip(&s.winners).filter(|(a, b)| a == b).count();
        total += idx.len();
    }
    Ok(hits as f64 / total as f64)
}

/// Token sequence with marked positions; the target is the marked tokens in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CopySample {
    pub tokens: Vec<usize>,
    pub marked: Vec<bool>,
    pub target: Vec<usize>,
}

/// `n` selective-copy sequences of length `t` over tokens `1..vocab`
/// (0 is reserved as the blank); between 1 and `max(1, t/4)` marks each.
pub fn gen_selective_copy(t: usize, vocab: usize, n: usize, seed: u64) -> Result<Vec<CopySample>> {
    if vocab < 2 || t == 0 {
        return Err(FemError::InvalidArgument("selective copy needs vocab >= 2 and t >= 1".into()));
    }
    Ok((0..n as u64)
        .map(|k| {
            let mut rng = sample_rng(seed, Split::Train, k, 2);
            let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(1..vocab)).collect();
            let marks = rng.gen_range(1..=(t / 4).max(1));
            let mut marked = vec![false; t];
            for pos in rand::seq::index::sample(&mut rng, t, marks) {
                marked[pos] = true;
            }
            let target = tokens.iter().zip(&marked).filter(|(_, &m)| m).map(|(&tok, _)| tok).collect();
            CopySample { tokens, marked, target }
        })
        .collect())
}

/// Fraction of sequences reproduced exactly.
pub fn copy_exact_match(predictions: &[Vec<usize>], samples: &[CopySample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(samples).filter(|(p, s)| **p == s.target).count();
    hits as f64 / samples.len() as f64
}
