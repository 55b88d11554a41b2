//! Byte-level corpora: ingestion, the train/held-out split, batching and a
//! synthetic text generator for self-contained experiments.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DistillError, Result};

pub const VOCAB: usize = 256;
pub const HELDOUT_FRACTION: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub heldout: Vec<u8>,
}

impl Corpus {
    /// Cuts a contiguous held-out block of `⌊0.02·n⌋` bytes at a seeded
    /// position; the remainder (joined) is the training stream.
    pub fn split(tokens: &[u8], seed: u64) -> Result<Self> {
        if tokens.is_empty() {
            return Err(DistillError::Config("corpus is empty".into()));
        }
        let n_held = (HELDOUT_FRACTION * tokens.len() as f64).floor() as usize;
        let start = ChaCha8Rng::seed_from_u64(seed).gen_range(0..=tokens.len() - n_held);
        let heldout = tokens[start..start + n_held].to_vec();
        let mut train = tokens[..start].to_vec();
        train.extend_from_slice(&tokens[start + n_held..]);
        Ok(Self { train, heldout })
    }
}

pub fn ingest_corpus(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| DistillError::Io(format!("{}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(DistillError::Config(format!("corpus {} is empty", path.display())));
    }
    Ok(bytes)
}

pub fn to_tokens(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Next-token batch of `n_seq` windows, flattened row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    /// Positions that contribute to the loss.
    pub mask: Vec<bool>,
    pub seq_len: usize,
}

impl Batch {
    pub fn n_tokens(&self) -> usize {
        self.tokens.len()
    }
}

/// Uniformly sampled training windows from a seeded stream.
pub struct Batcher<'a> {
    data: &'a [u8],
    seq_len: usize,
    n_seq: usize,
    rng: ChaCha8Rng,
}

impl<'a> Batcher<'a> {
    pub fn new(data: &'a [u8], seq_len: usize, n_seq: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 || n_seq == 0 {
            return Err(DistillError::Config("batch needs seq_len and n_seq > 0".into()));
        }
        if data.len() <= seq_len {
            return Err(DistillError::Config(format!(
                "{} training bytes cannot fill a window of {}",
                data.len(),
                seq_len + 1
            )));
        }
        Ok(Self { data, seq_len, n_seq, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_batch(&mut self) -> Batch {
        let mut tokens = Vec::with_capacity(self.n_seq * self.seq_len);
        let mut targets = Vec::with_capacity(self.n_seq * self.seq_len);
        for _ in 0..self.n_seq {
            let start = self.rng.gen_range(0..self.data.len() - self.seq_len);
            let w = &self.data[start..start + self.seq_len + 1];
            tokens.extend(w[..self.seq_len].iter().map(|&b| b as usize));
            targets.extend(w[1..].iter().map(|&b| b as usize));
        }
        let mask = vec![true; tokens.len()];
        Batch { tokens, targets, mask, seq_len: self.seq_len }
    }
}

/// Non-overlapping evaluation windows from the start of `data`.
pub fn eval_windows(data: &[u8], seq_len: usize, max_windows: usize) -> Vec<Batch> {
    data.windows(seq_len + 1)
        .step_by(seq_len)
        .take(max_windows)
        .map(|w| Batch {
            tokens: w[..seq_len].iter().map(|&b| b as usize).collect(),
            targets: w[1..].iter().map(|&b| b as usize).collect(),
            mask: vec![true; seq_len],
            seq_len,
        })
        .collect()
}

const NAMES: &[&str] = &[
    "Ada", "Bruno", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas", "Kira", "Luca",
];
const NOUNS: &[(&str, &str)] = &[
    ("river", "rivers"), ("engine", "engines"), ("garden", "gardens"), ("letter", "letters"),
    ("window", "windows"), ("market", "markets"), ("signal", "signals"), ("bridge", "bridges"),
    ("lantern", "lanterns"), ("meadow", "meadows"), ("harbor", "harbors"), ("tower", "towers"),
    ("kettle", "kettles"), ("orchard", "orchards"), ("compass", "compasses"), ("ladder", "ladders"),
];
const VERBS: &[(&str, &str, &str)] = &[
    ("watches", "watch", "watched"), ("carries", "carry", "carried"), ("repairs", "repair", "repaired"),
    ("paints", "paint", "painted"), ("follows", "follow", "followed"), ("finds", "find", "found"),
    ("opens", "open", "opened"), ("builds", "build", "built"), ("crosses", "cross", "crossed"),
    ("counts", "count", "counted"),
];
const ADJECTIVES: &[&str] = &[
    "quiet", "bright", "old", "narrow", "golden", "distant", "heavy", "gentle", "broken", "silver", "early",
];
const ADVERBS: &[&str] = &["slowly", "carefully", "again", "often", "gladly", "rarely", "quickly"];
const PLACES: &[&str] = &["the north", "the valley", "the old town", "the coast", "the hills", "the square"];
const TIMES: &[&str] = &["at dawn", "after the rain", "in winter", "every morning", "before noon", "at night"];

/// English-like text from a small stochastic grammar with number agreement,
/// tense, and recurring collocations; deterministic under `seed`.
pub fn synthetic_text(n_bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(n_bytes + 256);
    let mut sentences_in_paragraph = 0;
    while out.len() < n_bytes {
        let s = sentence(&mut rng);
        out.push_str(&s);
        sentences_in_paragraph += 1;
        if sentences_in_paragraph >= rng.gen_range(3..7) {
            out.push('\n');
            sentences_in_paragraph = 0;
        } else {
            out.push(' ');
        }
    }
    out.truncate(n_bytes);
    out
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, xs: &'a [T]) -> &'a T {
    xs.choose(rng).expect("non-empty word list")
}

fn noun_phrase(rng: &mut ChaCha8Rng, plural: bool) -> String {
    let (sg, pl) = *pick(rng, NOUNS);
    let noun = if plural { pl } else { sg };
    let det = if plural { *pick(rng, &["the", "some", "two", "many"]) } else { *pick(rng, &["the", "a", "one", "that"]) };
    let det = if det == "a" && matches!(noun.as_bytes()[0], b'a' | b'e' | b'i' | b'o' | b'u') { "an" } else { det };
    if rng.gen_bool(0.5) {
        let adj = *pick(rng, ADJECTIVES);
        let det = match det {
            "a" | "an" if matches!(adj.as_bytes()[0], b'a' | b'e' | b'i' | b'o' | b'u') => "an",
            "a" | "an" => "a",
            d => d,
        };
        format!("{det} {adj} {noun}")
    } else {
        format!("{det} {noun}")
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let (present3, base, past) = *pick(rng, VERBS);
    match rng.gen_range(0..6) {
        0 => {
            let plural = rng.gen_bool(0.4);
            format!("{} {} {}.", pick(rng, NAMES), present3, noun_phrase(rng, plural))
        }
        1 => {
            let plural = rng.gen_bool(0.5);
            let subj = capitalize(&noun_phrase(rng, plural));
            let verb = if plural { base } else { present3 };
            format!("{subj} {verb} {} {}.", noun_phrase(rng, false), pick(rng, TIMES))
        }
        2 => format!(
            "{} and {} {} {} in {}.",
            pick(rng, NAMES),
            pick(rng, NAMES),
            past,
            noun_phrase(rng, true),
            pick(rng, PLACES)
        ),
        3 => format!("{} {} {} {}.", pick(rng, NAMES), pick(rng, ADVERBS), present3, noun_phrase(rng, false)),
        4 => {
            let n = rng.gen_range(2..10);
            let (_, pl) = *pick(rng, NOUNS);
            format!("There are {n} {pl} near {}.", pick(rng, PLACES))
        }
        _ => format!(
            "When {} {} {}, {} {} {} {}.",
            pick(rng, NAMES),
            past,
            noun_phrase(rng, false),
            pick(rng, NAMES),
            past,
            noun_phrase(rng, true),
            pick(rng, TIMES)
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_tokens() {
        assert_eq!(to_tokens(b"abc"), vec![97, 98, 99]);
    }

    #[test]
    fn split_is_deterministic_and_sized() {
        let data: Vec<u8> = (0..100_000u32).map(|i| (i % 251) as u8).collect();
        let a = Corpus::split(&data, 5).unwrap();
        assert_eq!(a, Corpus::split(&data, 5).unwrap());
        assert_eq!(a.heldout.len(), 2000);
        assert_eq!(a.train.len() + a.heldout.len(), data.len());
        assert!(Corpus::split(&[], 0).is_err());
    }

    #[test]
    fn synthetic_text_is_deterministic_ascii() {
        let t = synthetic_text(10_000, 1);
        assert_eq!(t.len(), 10_000);
        assert_eq!(t, synthetic_text(10_000, 1));
        assert_ne!(t, synthetic_text(10_000, 2));
        assert!(t.is_ascii());
    }

    #[test]
    fn batches_shift_targets() {
        let data = b"abcdefghij".to_vec();
        let mut b = Batcher::new(&data, 4, 3, 0).unwrap();
        let batch = b.next_batch();
        for s in 0..3 {
            for i in 0..3 {
                assert_eq!(batch.tokens[s * 4 + i + 1], batch.targets[s * 4 + i]);
            }
        }
        assert_eq!(eval_windows(&data, 4, 10).len(), 2);
    }
}
