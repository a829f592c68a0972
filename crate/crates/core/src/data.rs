//! Token data: the calibration file format, a synthetic Markov-chain corpus
//! and fixed-length batching.
//!
//! Calibration files are `b"HPTK"`, a version byte (`1`), a `u64` LE
//! sequence count, then for every sequence a `u64` LE length followed by
//! that many `u32` LE token ids.

use std::io::{Read, Write};
use std::path::Path;

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"HPTK";
pub const VERSION: u8 = 1;

pub fn write_calibration<W: Write>(w: &mut W, seqs: &[Vec<u32>]) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(seqs.len() as u64).to_le_bytes())?;
    for s in seqs {
        w.write_all(&(s.len() as u64).to_le_bytes())?;
        for t in s {
            w.write_all(&t.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_calibration<R: Read>(r: &mut R) -> Result<Vec<Vec<u32>>> {
    let fmt = |m: &str| Error::Format(format!("calibration data: {m}"));
    let mut head = [0u8; 5];
    r.read_exact(&mut head).map_err(|_| fmt("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    if head[4] != VERSION {
        return Err(fmt(&format!("unsupported version {}", head[4])));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word).map_err(|_| fmt("truncated count"))?;
    let count = u64::from_le_bytes(word);
    let mut seqs = Vec::new();
    for i in 0..count {
        r.read_exact(&mut word)
            .map_err(|_| fmt(&format!("truncated length of sequence {i}")))?;
        let len = u64::from_le_bytes(word) as usize;
        let mut bytes = Vec::new();
        r.by_ref()
            .take(len as u64 * 4)
            .read_to_end(&mut bytes)
            .map_err(|_| fmt("read failure"))?;
        if bytes.len() != len * 4 {
            return Err(fmt(&format!("sequence {i} is truncated")));
        }
        seqs.push(
            bytes
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        );
    }
    Ok(seqs)
}

pub fn save_calibration(path: &Path, seqs: &[Vec<u32>]) -> Result<()> {
    let mut buf = Vec::new();
    write_calibration(&mut buf, seqs).expect("writing to memory");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_calibration(path: &Path) -> Result<Vec<Vec<u32>>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_calibration(&mut bytes.as_slice())
}

/// A first-order Markov chain over `vocab` tokens where every token has
/// `branching` possible successors with random weights.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    successors: Vec<Vec<u32>>,
    probs: Vec<Vec<f64>>,
    weights: Vec<WeightedIndex<f64>>,
}

impl MarkovChain {
    pub fn new(vocab: usize, branching: usize, seed: u64) -> Result<Self> {
        if vocab == 0 || branching == 0 || branching > vocab {
            return Err(Error::Parameter(format!(
                "need 1 ≤ branching ({branching}) ≤ vocab ({vocab})"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut successors = Vec::with_capacity(vocab);
        let mut probs = Vec::with_capacity(vocab);
        let mut weights = Vec::with_capacity(vocab);
        for _ in 0..vocab {
            let next: Vec<u32> = sample(&mut rng, vocab, branching)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            let w: Vec<f64> = (0..branching).map(|_| rng.gen_range(0.1..1.0)).collect();
            let total: f64 = w.iter().sum();
            weights.push(WeightedIndex::new(&w).expect("positive weights"));
            probs.push(w.iter().map(|x| x / total).collect());
            successors.push(next);
        }
        Ok(Self {
            successors,
            probs,
            weights,
        })
    }

    pub fn vocab(&self) -> usize {
        self.successors.len()
    }

    pub fn sample_sequence<R: Rng>(&self, len: usize, rng: &mut R) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        if len == 0 {
            return out;
        }
        let mut cur = rng.gen_range(0..self.vocab()) as u32;
        out.push(cur);
        while out.len() < len {
            let k = self.weights[cur as usize].sample(rng);
            cur = self.successors[cur as usize][k];
            out.push(cur);
        }
        out
    }

    pub fn corpus(&self, n_seqs: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_seqs).map(|_| self.sample_sequence(len, &mut rng)).collect()
    }

    /// Mean entropy (nats) of the successor distributions, averaged
    /// uniformly over tokens. A rough floor for next-token loss.
    pub fn mean_transition_entropy(&self) -> f64 {
        let total: f64 = self
            .probs
            .iter()
            .map(|p| p.iter().map(|q| -q * q.ln()).sum::<f64>())
            .sum();
        total / self.vocab() as f64
    }
}

/// Cuts sequences into non-overlapping windows of exactly `seq_len` tokens.
/// Shorter tails are dropped.
pub fn windows(seqs: &[Vec<u32>], seq_len: usize) -> Vec<Vec<u32>> {
    if seq_len == 0 {
        return Vec::new();
    }
    seqs.iter()
        .flat_map(|s| s.chunks_exact(seq_len).map(|c| c.to_vec()))
        .collect()
}

/// Seeded sampler over a fixed set of equal-length windows. Each epoch is a
/// fresh permutation; batches are flattened token stacks.
pub struct BatchSampler {
    windows: Vec<Vec<u32>>,
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(windows: Vec<Vec<u32>>, seed: u64) -> Result<Self> {
        if windows.is_empty() {
            return Err(Error::EmptyData("no training windows".into()));
        }
        let len = windows[0].len();
        if len == 0 || windows.iter().any(|w| w.len() != len) {
            return Err(Error::Input("windows must share a positive length".into()));
        }
        let mut s = Self {
            order: (0..windows.len()).collect(),
            windows,
            pos: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        s.reshuffle();
        Ok(s)
    }

    fn reshuffle(&mut self) {
        use rand::seq::SliceRandom;
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn seq_len(&self) -> usize {
        self.windows[0].len()
    }

    /// `batch` windows concatenated.
    pub fn next_batch(&mut self, batch: usize) -> Vec<u32> {
        let mut out = Vec::with_capacity(batch * self.seq_len());
        for _ in 0..batch {
            if self.pos == self.order.len() {
                self.reshuffle();
            }
            out.extend_from_slice(&self.windows[self.order[self.pos]]);
            self.pos += 1;
        }
        out
    }
}
