//! Byte-level BPE vocabulary trained on the project corpus, and fixed-length
//! encoding with BOS/SEP/EOS/PAD.
//!
//! Text is pre-split into chunks (runs of word characters, runs of
//! whitespace, single punctuation characters) and merges never cross a chunk
//! boundary. Ids 0..5 are the special tokens, 5..261 the raw bytes, and the
//! rest one token per learned merge in priority order.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

const SPECIAL_NAMES: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<sep>", "<unk>"];
const NUM_SPECIALS: u32 = 5;
const BYTE_OFFSET: u32 = NUM_SPECIALS;

/// Smallest vocabulary: the specials plus all 256 bytes.
pub const MIN_VOCAB_SIZE: usize = 261;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenizerError {
    #[error("cannot train a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("vocab_size {0} is below the minimum of {MIN_VOCAB_SIZE}")]
    VocabTooSmall(usize),
    #[error("max_len {0} leaves no room for BOS/EOS")]
    MaxLenTooSmall(usize),
    #[error("invalid vocabulary: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Word,
    Space,
    Other,
}

fn class_of(c: char) -> CharClass {
    if c.is_alphanumeric() || c == '_' {
        CharClass::Word
    } else if c.is_whitespace() {
        CharClass::Space
    } else {
        CharClass::Other
    }
}

/// Split text into merge-isolated chunks.
fn chunks(text: &str) -> impl Iterator<Item = &str> {
    let mut rest = text;
    std::iter::from_fn(move || {
        let mut it = rest.char_indices();
        let (_, first) = it.next()?;
        let class = class_of(first);
        let end = if class == CharClass::Other {
            first.len_utf8()
        } else {
            it.find(|(_, c)| class_of(*c) != class)
                .map(|(i, _)| i)
                .unwrap_or(rest.len())
        };
        let (chunk, tail) = rest.split_at(end);
        rest = tail;
        Some(chunk)
    })
}

/// Serialized form of a [`Vocabulary`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct VocabularyFile {
    specials: Vec<String>,
    byte_tokens: Vec<u8>,
    merges: Vec<[u32; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    merges: Vec<[u32; 2]>,
    /// Byte string of each non-special token, indexed by `id - BYTE_OFFSET`.
    token_bytes: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = TokenizerError;

    fn try_from(file: VocabularyFile) -> Result<Self, Self::Error> {
        if file.specials != SPECIAL_NAMES {
            return Err(TokenizerError::Invalid("unexpected special tokens".into()));
        }
        if file.byte_tokens.len() != 256
            || file.byte_tokens.iter().enumerate().any(|(i, b)| *b as usize != i)
        {
            return Err(TokenizerError::Invalid(
                "byte_tokens must list bytes 0..=255 in order".into(),
            ));
        }
        Vocabulary::from_merges(file.merges)
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        VocabularyFile {
            specials: SPECIAL_NAMES.iter().map(|s| s.to_string()).collect(),
            byte_tokens: (0..=255).collect(),
            merges: v.merges,
        }
    }
}

impl Vocabulary {
    /// Vocabulary with no merges.
    pub fn bytes_only() -> Self {
        Self::from_merges(Vec::new()).expect("empty merge list is valid")
    }

    fn from_merges(merges: Vec<[u32; 2]>) -> Result<Self, TokenizerError> {
        let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, &[l, r]) in merges.iter().enumerate() {
            let next = BYTE_OFFSET + token_bytes.len() as u32;
            if l < BYTE_OFFSET || r < BYTE_OFFSET || l >= next || r >= next {
                return Err(TokenizerError::Invalid(format!(
                    "merge {rank} references an unknown token"
                )));
            }
            let mut bytes = token_bytes[(l - BYTE_OFFSET) as usize].clone();
            bytes.extend_from_slice(&token_bytes[(r - BYTE_OFFSET) as usize]);
            token_bytes.push(bytes);
            if ranks.insert((l, r), rank as u32).is_some() {
                return Err(TokenizerError::Invalid(format!("duplicate merge {rank}")));
            }
        }
        Ok(Self {
            merges,
            token_bytes,
            ranks,
        })
    }

    /// Number of token ids, specials included.
    pub fn len(&self) -> usize {
        NUM_SPECIALS as usize + self.token_bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[[u32; 2]] {
        &self.merges
    }

    /// Bytes of a non-special token.
    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        id.checked_sub(BYTE_OFFSET)
            .and_then(|i| self.token_bytes.get(i as usize))
            .map(Vec::as_slice)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("vocabulary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TokenizerError> {
        serde_json::from_str(text).map_err(|e| TokenizerError::Invalid(e.to_string()))
    }

    /// Content token ids of `text`, without specials.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in chunks(text) {
            self.tokenize_chunk(chunk.as_bytes(), &mut out);
        }
        out
    }

    fn tokenize_chunk(&self, bytes: &[u8], out: &mut Vec<u32>) {
        let mut ids: Vec<u32> = bytes.iter().map(|b| BYTE_OFFSET + *b as u32).collect();
        while ids.len() > 1 {
            let best = ids
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| self.ranks.get(&(w[0], w[1])).map(|r| (*r, i)))
                .min();
            let Some((rank, _)) = best else { break };
            let pair = self.merges[rank as usize];
            let merged = BYTE_OFFSET + 256 + rank;
            merge_pair(&mut ids, pair, merged);
        }
        out.extend(ids);
    }

    /// Bytes of the content tokens, specials skipped, decoded lossily.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if let Some(b) = self.token_bytes(id) {
                bytes.extend_from_slice(b);
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Replace every non-overlapping occurrence of `pair`, left to right.
fn merge_pair(ids: &mut Vec<u32>, pair: [u32; 2], merged: u32) {
    let mut w = 0;
    let mut r = 0;
    while r < ids.len() {
        if r + 1 < ids.len() && ids[r] == pair[0] && ids[r + 1] == pair[1] {
            ids[w] = merged;
            r += 2;
        } else {
            ids[w] = ids[r];
            r += 1;
        }
        w += 1;
    }
    ids.truncate(w);
}

/// Train a byte-level BPE vocabulary of (at most) `vocab_size` tokens.
///
/// Each round merges the most frequent adjacent pair; ties go to the pair
/// whose (left bytes, right bytes) is lexicographically smallest. Training
/// stops early if no pair occurs anymore.
pub fn train_vocab<'a>(
    corpus: impl IntoIterator<Item = &'a str>,
    vocab_size: usize,
) -> Result<Vocabulary, TokenizerError> {
    if vocab_size < MIN_VOCAB_SIZE {
        return Err(TokenizerError::VocabTooSmall(vocab_size));
    }
    let mut counts: HashMap<&[u8], u64> = HashMap::new();
    let mut any = false;
    for text in corpus {
        any = true;
        for chunk in chunks(text) {
            *counts.entry(chunk.as_bytes()).or_default() += 1;
        }
    }
    if !any {
        return Err(TokenizerError::EmptyCorpus);
    }
    // Sort so that training never depends on hash-map iteration order.
    let mut words: Vec<(Vec<u32>, u64)> = counts
        .into_iter()
        .map(|(w, c)| (w.iter().map(|b| BYTE_OFFSET + *b as u32).collect(), c))
        .collect();
    words.sort_unstable();

    let mut token_bytes: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut merges = Vec::new();
    let budget = vocab_size - MIN_VOCAB_SIZE;
    while merges.len() < budget {
        let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
        for (ids, count) in &words {
            for w in ids.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += count;
            }
        }
        let bytes_of = |id: u32| &token_bytes[(id - BYTE_OFFSET) as usize];
        let best = pair_counts.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                (bytes_of(pb.0), bytes_of(pb.1)).cmp(&(bytes_of(pa.0), bytes_of(pa.1)))
            })
        });
        let Some(((l, r), _)) = best else { break };
        let merged = BYTE_OFFSET + token_bytes.len() as u32;
        let mut bytes = bytes_of(l).clone();
        bytes.extend_from_slice(bytes_of(r));
        token_bytes.push(bytes);
        merges.push([l, r]);
        for (ids, _) in &mut words {
            merge_pair(ids, [l, r], merged);
        }
    }
    Vocabulary::from_merges(merges)
}

/// A fixed-length encoded sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Number of leading non-PAD positions.
    pub attention_length: usize,
    pub truncated: bool,
}

impl TokenSequence {
    fn assemble(parts: &[&[u32]], separators: bool, max_len: usize, truncated: bool) -> Self {
        let mut ids = Vec::with_capacity(max_len);
        ids.push(BOS);
        for (i, part) in parts.iter().enumerate() {
            if separators && i > 0 {
                ids.push(SEP);
            }
            ids.extend_from_slice(part);
        }
        ids.push(EOS);
        let attention_length = ids.len();
        ids.resize(max_len, PAD);
        Self {
            ids,
            attention_length,
            truncated,
        }
    }

    /// Ids of the non-PAD prefix.
    pub fn active(&self) -> &[u32] {
        &self.ids[..self.attention_length]
    }
}

/// `BOS + content + EOS`, PAD-filled to `max_len`; overlong content keeps
/// its head.
pub fn encode(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence, TokenizerError> {
    if max_len < 2 {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    let content = vocab.tokenize(text);
    let budget = max_len - 2;
    let truncated = content.len() > budget;
    let kept = &content[..content.len().min(budget)];
    Ok(TokenSequence::assemble(&[kept], false, max_len, truncated))
}

/// How many content tokens of each side survive a shared budget.
///
/// A side no longer than half the budget is kept whole and the other side
/// takes the rest; otherwise both are cut in proportion to their length,
/// with the rounding slot going to the first side.
pub fn pair_budget(len_a: usize, len_b: usize, budget: usize) -> (usize, usize) {
    if len_a + len_b <= budget {
        return (len_a, len_b);
    }
    if 2 * len_a <= budget {
        return (len_a, budget - len_a);
    }
    if 2 * len_b <= budget {
        return (budget - len_b, len_b);
    }
    let keep_a = (budget * len_a).div_ceil(len_a + len_b);
    (keep_a, budget - keep_a)
}

/// `BOS + a + SEP + b + EOS`, PAD-filled to `max_len`.
pub fn encode_pair(
    text_a: &str,
    text_b: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<TokenSequence, TokenizerError> {
    if max_len < 3 {
        return Err(TokenizerError::MaxLenTooSmall(max_len));
    }
    let a = vocab.tokenize(text_a);
    let b = vocab.tokenize(text_b);
    let (ka, kb) = pair_budget(a.len(), b.len(), max_len - 3);
    let truncated = ka < a.len() || kb < b.len();
    Ok(TokenSequence::assemble(&[&a[..ka], &b[..kb]], true, max_len, truncated))
}
