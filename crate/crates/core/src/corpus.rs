//! Byte-level tokenization, train/validation windows, shuffled batches and a
//! synthetic Markov source with a known entropy rate.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ArmdError, Result};

/// Begin-of-sequence marker.
pub const BOS: usize = 0;
/// 256 byte values plus the marker.
pub const VOCAB_SIZE: usize = 257;

/// Byte vocabulary: id `b + 1` for byte `b`, id 0 for the marker.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteVocab;

impl ByteVocab {
    pub fn size(self) -> usize {
        VOCAB_SIZE
    }
}

pub fn tokenize(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize + 1).collect()
}

/// Inverse of [`tokenize`]; markers are dropped.
pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .filter(|&&id| id != BOS)
        .map(|&id| {
            if id >= VOCAB_SIZE {
                Err(ArmdError::Index(format!(
                    "token id {id} outside the byte vocabulary"
                )))
            } else {
                Ok((id - 1) as u8)
            }
        })
        .collect()
}

/// Reads a file, or every regular file of a directory in lexicographic name order.
pub fn load_bytes(path: &Path) -> Result<Vec<u8>> {
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        let mut out = Vec::new();
        for f in files {
            out.extend(fs::read(f)?);
        }
        Ok(out)
    } else {
        Ok(fs::read(path)?)
    }
}

/// Start offsets of the `seq_len` windows of a `len`-token stream at `stride`.
pub fn window_starts(len: usize, seq_len: usize, stride: usize) -> Vec<usize> {
    if seq_len == 0 || stride == 0 || len < seq_len {
        return Vec::new();
    }
    (0..=len - seq_len).step_by(stride).collect()
}

/// A contiguous train/validation split. Windows never cross the boundary because
/// each side is windowed on its own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub seq_len: usize,
    pub stride: usize,
}

impl CorpusSplit {
    /// Puts the last `validation_fraction` of `tokens` aside for validation.
    pub fn new(
        tokens: Vec<usize>,
        validation_fraction: f64,
        seq_len: usize,
        stride: usize,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(ArmdError::Validation(format!(
                "validation fraction {validation_fraction} must lie in [0, 1)"
            )));
        }
        if seq_len == 0 || stride == 0 {
            return Err(ArmdError::Validation(
                "seq_len and stride must be positive".into(),
            ));
        }
        let cut = tokens.len() - (tokens.len() as f64 * validation_fraction).round() as usize;
        let mut train = tokens;
        let validation = train.split_off(cut);
        let split = Self {
            train,
            validation,
            seq_len,
            stride,
        };
        if split.train_windows().is_empty() {
            return Err(ArmdError::Validation(format!(
                "training portion of {} tokens is shorter than seq_len {seq_len}",
                split.train.len()
            )));
        }
        Ok(split)
    }

    pub fn train_windows(&self) -> Vec<&[usize]> {
        window_starts(self.train.len(), self.seq_len, self.stride)
            .into_iter()
            .map(|s| &self.train[s..s + self.seq_len])
            .collect()
    }

    /// Non-overlapping validation windows.
    pub fn validation_windows(&self) -> Vec<&[usize]> {
        window_starts(self.validation.len(), self.seq_len, self.seq_len)
            .into_iter()
            .map(|s| &self.validation[s..s + self.seq_len])
            .collect()
    }
}

/// Endless stream of batches. Each epoch visits every training window once in a
/// fresh random order; batches run across epoch boundaries.
pub struct Batches<'a> {
    windows: Vec<&'a [usize]>,
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl<'a> Batches<'a> {
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.windows.len()
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.windows.len()).collect();
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }
}

impl Iterator for Batches<'_> {
    type Item = Vec<Vec<usize>>;

    fn next(&mut self) -> Option<Self::Item> {
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if self.cursor == self.order.len() {
                self.reshuffle();
                self.epoch += 1;
            }
            batch.push(self.windows[self.order[self.cursor]].to_vec());
            self.cursor += 1;
        }
        Some(batch)
    }
}

pub fn make_batches(split: &CorpusSplit, batch_size: usize, seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(ArmdError::Validation("batch size must be positive".into()));
    }
    let windows = split.train_windows();
    if windows.is_empty() {
        return Err(ArmdError::Validation(format!(
            "corpus of {} tokens is shorter than seq_len {}",
            split.train.len(),
            split.seq_len
        )));
    }
    let mut b = Batches {
        windows,
        order: Vec::new(),
        cursor: 0,
        batch_size,
        epoch: 0,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    b.reshuffle();
    Ok(b)
}

/// Order-1 Markov chain over byte symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovChain {
    symbols: Vec<u8>,
    table: Vec<Vec<f64>>,
}

fn row_entropy(row: &[f64]) -> f64 {
    row.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

impl MarkovChain {
    /// `table[i][j]` is the probability of moving from `symbols[i]` to `symbols[j]`.
    pub fn new(symbols: Vec<u8>, table: Vec<Vec<f64>>) -> Result<Self> {
        let k = symbols.len();
        if k == 0 || table.len() != k {
            return Err(ArmdError::Validation(format!(
                "{} symbols but {} table rows",
                k,
                table.len()
            )));
        }
        let mut distinct = symbols.clone();
        distinct.sort_unstable();
        distinct.dedup();
        if distinct.len() != k {
            return Err(ArmdError::Validation("symbols must be distinct".into()));
        }
        for (i, row) in table.iter().enumerate() {
            if row.len() != k || row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(ArmdError::Validation(format!(
                    "row {i} is not a distribution over {k} symbols"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(ArmdError::Validation(format!("row {i} sums to {total}")));
            }
        }
        Ok(Self { symbols, table })
    }

    /// Sixteen letters `a..p`; from state `i` the chain moves to `i+1`, `5i+3` and
    /// `i+8` (mod 16) with probabilities 0.6, 0.3 and 0.1.
    pub fn toy() -> Self {
        let k = 16;
        let table = (0..k)
            .map(|i| {
                let mut row = vec![0.0; k];
                row[(i + 1) % k] += 0.6;
                row[(5 * i + 3) % k] += 0.3;
                row[(i + 8) % k] += 0.1;
                row
            })
            .collect();
        Self::new((b'a'..=b'p').collect(), table).expect("valid toy chain")
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    pub fn table(&self) -> &[Vec<f64>] {
        &self.table
    }

    /// State index of a byte, if it is one of the chain's symbols.
    pub fn state_of(&self, byte: u8) -> Option<usize> {
        self.symbols.iter().position(|&s| s == byte)
    }

    /// Stationary distribution by power iteration on the lazy chain `(I + P) / 2`,
    /// which shares it and converges even for periodic chains.
    pub fn stationary(&self) -> Vec<f64> {
        let k = self.symbols.len();
        let mut pi = vec![1.0 / k as f64; k];
        for _ in 0..1_000_000 {
            let mut next: Vec<f64> = pi.iter().map(|p| 0.5 * p).collect();
            for (i, row) in self.table.iter().enumerate() {
                for (j, &p) in row.iter().enumerate() {
                    next[j] += 0.5 * pi[i] * p;
                }
            }
            let delta: f64 = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).sum();
            pi = next;
            if delta < 1e-15 {
                break;
            }
        }
        pi
    }

    /// Entropy rate in nats per token.
    pub fn entropy_rate(&self) -> f64 {
        self.stationary()
            .iter()
            .zip(&self.table)
            .map(|(p, row)| p * row_entropy(row))
            .sum()
    }

    /// Stationary joint distribution of consecutive state pairs.
    pub fn bigram_joint(&self) -> Vec<Vec<f64>> {
        self.stationary()
            .iter()
            .zip(&self.table)
            .map(|(p, row)| row.iter().map(|q| p * q).collect())
            .collect()
    }

    fn draw<R: Rng + ?Sized>(dist: &[f64], rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, &p) in dist.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        dist.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// A run of `length` symbols started from the stationary distribution.
    pub fn sample(&self, length: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(length);
        if length == 0 {
            return out;
        }
        let mut state = Self::draw(&self.stationary(), &mut rng);
        out.push(self.symbols[state]);
        for _ in 1..length {
            state = Self::draw(&self.table[state], &mut rng);
            out.push(self.symbols[state]);
        }
        out
    }

    /// Total-variation distance between the empirical bigram distribution of
    /// `sequences` and the stationary bigram joint. Pairs involving foreign bytes count
    /// as mass the chain never produces.
    pub fn bigram_tv(&self, sequences: &[Vec<u8>]) -> Result<f64> {
        let k = self.symbols.len();
        let mut counts = vec![vec![0usize; k]; k];
        let (mut total, mut foreign) = (0usize, 0usize);
        for seq in sequences {
            for w in seq.windows(2) {
                total += 1;
                match (self.state_of(w[0]), self.state_of(w[1])) {
                    (Some(a), Some(b)) => counts[a][b] += 1,
                    _ => foreign += 1,
                }
            }
        }
        if total == 0 {
            return Err(ArmdError::Validation("no bigrams to compare".into()));
        }
        let joint = self.bigram_joint();
        let mut l1 = foreign as f64 / total as f64;
        for a in 0..k {
            for b in 0..k {
                l1 += (counts[a][b] as f64 / total as f64 - joint[a][b]).abs();
            }
        }
        Ok(0.5 * l1)
    }
}

/// `length` bytes from the chain given by `symbols` and `table`.
pub fn synthetic_markov_corpus(
    symbols: Vec<u8>,
    table: Vec<Vec<f64>>,
    length: usize,
    seed: u64,
) -> Result<Vec<u8>> {
    Ok(MarkovChain::new(symbols, table)?.sample(length, seed))
}
