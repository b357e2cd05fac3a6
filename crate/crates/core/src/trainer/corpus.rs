//! Corpus loading and sequence sampling for gate training.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

use crate::error::{Error, Result};
use crate::tokenizer::{encode, EOS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LongConcat {
    pub enabled: bool,
    pub target_length: usize,
}

impl Default for LongConcat {
    fn default() -> Self {
        Self {
            enabled: false,
            target_length: 1536,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    /// Files or directories (walked recursively) of UTF-8 text.
    pub sources: Vec<PathBuf>,
    pub min_seq_tokens: usize,
    pub max_seq_tokens: usize,
    pub total_tokens: usize,
    pub long_concat: LongConcat,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            sources: Vec::new(),
            min_seq_tokens: 256,
            max_seq_tokens: 1024,
            total_tokens: 50_000,
            long_concat: LongConcat::default(),
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_seq_tokens == 0 {
            return Err(Error::Config("min_seq_tokens must be >= 1".into()));
        }
        if !(self.min_seq_tokens <= self.max_seq_tokens && self.max_seq_tokens <= self.total_tokens) {
            return Err(Error::Config(format!(
                "need min_seq_tokens ({}) <= max_seq_tokens ({}) <= total_tokens ({})",
                self.min_seq_tokens, self.max_seq_tokens, self.total_tokens
            )));
        }
        if self.long_concat.enabled && self.long_concat.target_length == 0 {
            return Err(Error::Config("long_concat.target_length must be >= 1".into()));
        }
        Ok(())
    }

    /// Longest context this spec can produce.
    pub fn longest_context(&self) -> usize {
        if self.long_concat.enabled {
            self.max_seq_tokens.max(self.long_concat.target_length)
        } else {
            self.max_seq_tokens
        }
    }
}

/// Documents of a corpus, in sorted path order.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub documents: Vec<(PathBuf, String)>,
}

impl Corpus {
    pub fn load(sources: &[PathBuf]) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Data("empty corpus: no sources configured".into()));
        }
        let mut files = Vec::new();
        for src in sources {
            if !src.exists() {
                return Err(Error::Data(format!("corpus path {} does not exist", src.display())));
            }
            for entry in WalkDir::new(src).sort_by_file_name() {
                let entry = entry.map_err(|e| Error::Data(format!("{}: {e}", src.display())))?;
                let hidden = entry.file_name().to_string_lossy().starts_with('.');
                if entry.file_type().is_file() && !hidden {
                    files.push(entry.into_path());
                }
            }
        }
        files.sort();
        let mut documents = Vec::with_capacity(files.len());
        for f in files {
            let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
            let text = String::from_utf8(bytes)
                .map_err(|_| Error::Data(format!("{} is not valid UTF-8", f.display())))?;
            if !text.is_empty() {
                documents.push((f, text));
            }
        }
        if documents.is_empty() {
            return Err(Error::Data(format!(
                "empty corpus: no text found under {}",
                sources
                    .iter()
                    .map(|p| p.display().to_string())
                    .collect::<Vec<_>>()
                    .join(", ")
            )));
        }
        Ok(Self { documents })
    }

    /// All documents as one token stream, separated by EOS.
    pub fn token_stream(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (i, (_, text)) in self.documents.iter().enumerate() {
            if i > 0 {
                out.push(EOS);
            }
            out.extend(encode(text));
        }
        out
    }

    /// SHA-256 over document names and contents.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (path, text) in &self.documents {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            h.update(name.as_bytes());
            h.update([0u8]);
            h.update(text.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Samples contexts: windows of uniform length in `[min, max]` at uniform
/// offsets of the token stream until `total_tokens` is reached, then (when
/// enabled) another `total_tokens` worth of long sequences built by
/// concatenating the base samples up to `target_length`.
pub fn sample_sequences(stream: &[u32], spec: &CorpusSpec, seed: u64) -> Result<Vec<Vec<u32>>> {
    spec.validate()?;
    if stream.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut total = 0;
    while total < spec.total_tokens {
        let len = rng
            .random_range(spec.min_seq_tokens..=spec.max_seq_tokens)
            .min(stream.len());
        let start = rng.random_range(0..=stream.len() - len);
        out.push(stream[start..start + len].to_vec());
        total += len;
    }
    if spec.long_concat.enabled {
        let target = spec.long_concat.target_length;
        let base = out.clone();
        let mut cursor = 0;
        let mut long_total = 0;
        while long_total < spec.total_tokens {
            let mut seq = Vec::with_capacity(target);
            while seq.len() < target {
                seq.extend_from_slice(&base[cursor % base.len()]);
                cursor += 1;
            }
            seq.truncate(target);
            long_total += seq.len();
            out.push(seq);
        }
    }
    Ok(out)
}

const WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "is", "was", "that", "for", "it", "with", "as", "on",
    "cache", "model", "memory", "token", "river", "stone", "light", "window", "garden", "letter",
    "number", "signal", "question", "answer", "morning", "evening", "city", "road", "small",
    "large", "quiet", "bright", "old", "new", "first", "last", "every", "some", "many", "few",
    "walks", "reads", "writes", "keeps", "finds", "holds", "opens", "moves", "sees", "builds",
    "I", "we", "they", "she", "he", "you", "all", "key", "value", "page", "table", "line",
];

/// Deterministic English-like text with sentences, commas, numbers and
/// paragraph breaks. Used for smoke tests and the bundled sample corpus.
pub fn synthetic_text(seed: u64, n_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = String::with_capacity(n_bytes + 64);
    while s.len() < n_bytes {
        let words = rng.random_range(4..14);
        for w in 0..words {
            let word = if rng.random_bool(0.05) {
                rng.random_range(0..2000).to_string()
            } else {
                WORDS[rng.random_range(0..WORDS.len())].to_string()
            };
            if w == 0 {
                let mut c = word.chars();
                if let Some(f) = c.next() {
                    s.extend(f.to_uppercase());
                    s.push_str(c.as_str());
                }
            } else {
                s.push_str(&word);
            }
            if w + 1 < words {
                s.push_str(if rng.random_bool(0.12) { ", " } else { " " });
            }
        }
        s.push_str(match rng.random_range(0..10) {
            0 => "?",
            1 => ":\n",
            _ => ".",
        });
        s.push_str(if rng.random_bool(0.15) { "\n\n" } else { " " });
    }
    s
}

/// Writes `n_files` synthetic documents into `dir`.
pub fn write_synthetic_corpus(dir: &Path, n_files: usize, bytes_per_file: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..n_files {
        let path = dir.join(format!("doc_{i:03}.txt"));
        std::fs::write(&path, synthetic_text(seed.wrapping_add(i as u64), bytes_per_file))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
