//! Character corpora, vocabulary and seeded batch sampling.
//!
//! Batches depend only on `(corpus, seed, step, T, B)`, never on the model,
//! so every gate variant trained with one seed sees the same token stream.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Characters sorted by code point; ids are positions in that order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Self {
        let set: BTreeSet<char> = text.chars().collect();
        Self {
            chars: set.into_iter().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Option<usize> {
        self.chars.binary_search(&c).ok()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars().map(|c| self.id(c).ok_or(Error::UnknownChar(c))).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        ids.iter()
            .map(|&id| {
                self.chars.get(id).copied().ok_or(Error::TokenOutOfRange {
                    id,
                    vocab: self.chars.len(),
                })
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub name: String,
    pub text: String,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub vocab: Vocab,
}

/// `inputs` and `targets` are row-major `[batch, seq]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

pub fn load_corpus(path: impl AsRef<Path>, name: &str, split_ratio: f64) -> Result<Corpus> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = match String::from_utf8(bytes) {
        Ok(s) => s,
        // Byte-oriented fallback: every byte becomes the code point of equal value.
        Err(e) => e.into_bytes().iter().map(|&b| b as char).collect(),
    };
    Corpus::from_text(name, text, split_ratio)
}

impl Corpus {
    /// Train is the first `⌊ratio·N⌋` characters, val the rest. The vocabulary
    /// covers the whole text, so val never holds unknown characters.
    pub fn from_text(name: &str, text: String, split_ratio: f64) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::contract(format!("corpus {name} is empty")));
        }
        if !(split_ratio > 0.0 && split_ratio < 1.0) {
            return Err(Error::contract(format!("split ratio {split_ratio} outside (0, 1)")));
        }
        let vocab = Vocab::from_text(&text);
        let ids = vocab.encode(&text)?;
        let cut = (split_ratio * ids.len() as f64).floor() as usize;
        Ok(Self {
            name: name.to_string(),
            train: ids[..cut].to_vec(),
            val: ids[cut..].to_vec(),
            text,
            vocab,
        })
    }

    pub fn split(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    /// Batch number `step` of the given split. Train and val draw from
    /// different purposes of the same seed.
    pub fn sample_batch(&self, split: Split, seq: usize, batch: usize, seed: u64, step: u64) -> Result<Batch> {
        let ids = self.split(split);
        if seq == 0 || batch == 0 {
            return Err(Error::contract("batch and context must be positive"));
        }
        if seq >= ids.len() {
            return Err(Error::contract(format!(
                "context {seq} needs a split longer than {} characters",
                ids.len()
            )));
        }
        let purpose = match split {
            Split::Train => Purpose::TrainBatches,
            Split::Val => Purpose::EvalBatches,
        };
        let mut rng = stream(seed, purpose, step);
        let span = (ids.len() - seq) as u64;
        let mut inputs = Vec::with_capacity(batch * seq);
        let mut targets = Vec::with_capacity(batch * seq);
        for _ in 0..batch {
            let start = rng.random_range(0..span) as usize;
            inputs.extend_from_slice(&ids[start..start + seq]);
            targets.extend_from_slice(&ids[start + 1..start + seq + 1]);
        }
        Ok(Batch {
            inputs,
            targets,
            batch,
            seq,
        })
    }

    /// Digest of the first `n_steps` training batches: SHA-256 over the
    /// little-endian `u32` ids, truncated to 64 bits.
    pub fn batch_fingerprint(&self, seq: usize, batch: usize, seed: u64, n_steps: u64) -> Result<u64> {
        let mut hasher = Sha256::new();
        for step in 0..n_steps {
            let b = self.sample_batch(Split::Train, seq, batch, seed, step)?;
            for &id in b.inputs.iter().chain(&b.targets) {
                hasher.update((id as u32).to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        Ok(u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes")))
    }
}
