//! Byte-level BPE and cursor-centred context windows.
//!
//! Text is split by a GPT-2 style pre-tokenizer, each piece is mapped to
//! byte tokens and merged by rank. A context window is laid out as
//! `[cls] prefix [sep] suffix [pad]...`, with the separator sitting exactly
//! at the cursor.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_WINDOW: usize = 512;
pub const DEFAULT_SUFFIX_CAP: usize = 128;

pub const CLS_TOKEN: &str = "<s>";
pub const PAD_TOKEN: &str = "<pad>";
pub const SEP_TOKEN: &str = "</s>";
pub const UNK_TOKEN: &str = "<unk>";

const PRETOKENIZE: &str = r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+";

fn pretokenizer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(PRETOKENIZE).expect("valid pre-tokenizer pattern"))
}

/// The reversible byte → printable character table used by byte-level BPE
/// vocabularies.
fn byte_table() -> &'static ([char; 256], HashMap<char, u8>) {
    static TABLE: OnceLock<([char; 256], HashMap<char, u8>)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut forward = ['\0'; 256];
        let printable = |b: u32| (33..=126).contains(&b) || (161..=172).contains(&b) || (174..=255).contains(&b);
        let mut n = 0;
        for b in 0..256u32 {
            forward[b as usize] = if printable(b) {
                char::from_u32(b).unwrap()
            } else {
                n += 1;
                char::from_u32(255 + n).unwrap()
            };
        }
        let back = forward.iter().enumerate().map(|(b, c)| (*c, b as u8)).collect();
        (forward, back)
    })
}

pub fn byte_char(b: u8) -> char {
    byte_table().0[b as usize]
}

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("window {window} too small for suffix cap {suffix_cap} (needs window > cap + 2)")]
    WindowTooSmall { window: usize, suffix_cap: usize },
    #[error("special token `{0}` missing from the vocabulary")]
    MissingSpecial(String),
    #[error("special tokens must have distinct ids")]
    DuplicateSpecial,
    #[error("merge rule {line} references unknown token `{token}`")]
    UnknownMergeToken { line: usize, token: String },
    #[error("merge rule {line} is malformed: `{text}`")]
    MalformedMerge { line: usize, text: String },
    #[error("merge rule {line} produces `{token}`, which is not in the vocabulary")]
    MissingMergeResult { line: usize, token: String },
    #[error("vocabulary ids are not contiguous from 0")]
    SparseIds,
    #[error("invalid vocabulary JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Portable description of a vocabulary, stored inside checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizerSpec {
    /// Token strings indexed by id.
    pub tokens: Vec<String>,
    /// Merge rules in priority order.
    pub merges: Vec<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Prefix and suffix around a cursor separator.
    Joint,
    PrefixOnly,
    SuffixOnly,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "joint" => Ok(Strategy::Joint),
            "prefix_only" | "prefix-only" => Ok(Strategy::PrefixOnly),
            "suffix_only" | "suffix-only" => Ok(Strategy::SuffixOnly),
            other => Err(format!("unknown tokenization strategy `{other}`")),
        }
    }
}

/// A fixed-length model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedContext {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
    /// Position of the separator token.
    pub sep_index: usize,
    /// Suffix tokens kept.
    pub n_s: usize,
    /// Prefix tokens kept.
    pub n_p: usize,
}

impl TokenizedContext {
    /// Number of non-padding positions.
    pub fn content_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn window(&self) -> usize {
        self.ids.len()
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    tokens: Vec<String>,
    token_ids: HashMap<String, u32>,
    merges: Vec<(u32, u32)>,
    /// (left, right) → (rank, merged id)
    merge_ranks: HashMap<(u32, u32), (usize, u32)>,
    byte_ids: [u32; 256],
    pub cls: u32,
    pub sep: u32,
    pub pad: u32,
    pub unk: u32,
}

impl Tokenizer {
    /// Specials at ids 0..4 followed by the 256 byte tokens, no merges.
    pub fn byte_level() -> Self {
        let mut tokens: Vec<String> = [CLS_TOKEN, PAD_TOKEN, SEP_TOKEN, UNK_TOKEN]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend((0..=255u8).map(|b| byte_char(b).to_string()));
        Self::from_spec(&TokenizerSpec {
            tokens,
            merges: Vec::new(),
        })
        .expect("built-in vocabulary is consistent")
    }

    pub fn from_spec(spec: &TokenizerSpec) -> Result<Self, TokenizerError> {
        let token_ids: HashMap<String, u32> = spec
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let special = |name: &str| {
            token_ids
                .get(name)
                .copied()
                .ok_or_else(|| TokenizerError::MissingSpecial(name.into()))
        };
        let (cls, pad, sep, unk) = (special(CLS_TOKEN)?, special(PAD_TOKEN)?, special(SEP_TOKEN)?, special(UNK_TOKEN)?);
        let mut ids = [cls, pad, sep, unk];
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(TokenizerError::DuplicateSpecial);
        }
        let byte_ids = std::array::from_fn(|b| {
            token_ids
                .get(&byte_char(b as u8).to_string())
                .copied()
                .unwrap_or(unk)
        });
        let mut merges = Vec::with_capacity(spec.merges.len());
        let mut merge_ranks = HashMap::with_capacity(spec.merges.len());
        for (rank, (a, b)) in spec.merges.iter().enumerate() {
            let line = rank + 1;
            let lookup = |t: &String| {
                token_ids
                    .get(t)
                    .copied()
                    .ok_or_else(|| TokenizerError::UnknownMergeToken { line, token: t.clone() })
            };
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            let joined = format!("{a}{b}");
            let merged = *token_ids
                .get(&joined)
                .ok_or(TokenizerError::MissingMergeResult { line, token: joined })?;
            merges.push((ia, ib));
            merge_ranks.entry((ia, ib)).or_insert((rank, merged));
        }
        Ok(Tokenizer {
            tokens: spec.tokens.clone(),
            token_ids,
            merges,
            merge_ranks,
            byte_ids,
            cls,
            sep,
            pad,
            unk,
        })
    }

    /// Loads the two-file format: a JSON token→id map and a merges file
    /// with one space-separated pair per line (a `#version` header line is
    /// skipped).
    pub fn from_files(vocab: impl AsRef<Path>, merges: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        let map: BTreeMap<String, u32> = serde_json::from_str(&fs::read_to_string(vocab)?)?;
        let merges_text = fs::read_to_string(merges)?;
        Self::from_parts(map, &merges_text)
    }

    pub fn from_parts(map: BTreeMap<String, u32>, merges_text: &str) -> Result<Self, TokenizerError> {
        let mut tokens = vec![None; map.len()];
        for (t, id) in map {
            match tokens.get_mut(id as usize) {
                Some(slot @ None) => *slot = Some(t),
                _ => return Err(TokenizerError::SparseIds),
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(|t| t.expect("filled")).collect();
        let mut merges = Vec::new();
        for (i, raw) in merges_text.lines().enumerate() {
            if raw.starts_with("#version") || raw.trim().is_empty() {
                continue;
            }
            let mut parts = raw.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => merges.push((a.to_string(), b.to_string())),
                _ => {
                    return Err(TokenizerError::MalformedMerge {
                        line: i + 1,
                        text: raw.to_string(),
                    })
                }
            }
        }
        Self::from_spec(&TokenizerSpec { tokens, merges })
    }

    pub fn spec(&self) -> TokenizerSpec {
        TokenizerSpec {
            tokens: self.tokens.clone(),
            merges: self
                .merges
                .iter()
                .map(|&(a, b)| (self.tokens[a as usize].clone(), self.tokens[b as usize].clone()))
                .collect(),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_ids.get(token).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        id == self.cls || id == self.sep || id == self.pad || id == self.unk
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for piece in pretokenizer().find_iter(text) {
            self.encode_piece(piece.as_str(), &mut out);
        }
        out
    }

    fn encode_piece(&self, piece: &str, out: &mut Vec<u32>) {
        let mut word: Vec<u32> = piece.bytes().map(|b| self.byte_ids[b as usize]).collect();
        if self.merge_ranks.is_empty() {
            out.extend(word);
            return;
        }
        loop {
            let best = word
                .windows(2)
                .filter_map(|w| self.merge_ranks.get(&(w[0], w[1])).map(|&(r, m)| (r, (w[0], w[1]), m)))
                .min_by_key(|&(r, _, _)| r);
            let Some((_, pair, merged)) = best else { break };
            let mut next = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(word[i]);
                    i += 1;
                }
            }
            word = next;
        }
        out.extend(word);
    }

    /// Raw bytes of the non-special ids.
    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        let back = &byte_table().1;
        ids.iter()
            .filter(|&&id| !self.is_special(id))
            .filter_map(|&id| self.token(id))
            .flat_map(|t| t.chars())
            .filter_map(|c| back.get(&c).copied())
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }

    pub fn encode_context(
        &self,
        prefix: &str,
        suffix: &str,
        strategy: Strategy,
        window: usize,
        suffix_cap: usize,
    ) -> Result<TokenizedContext, TokenizerError> {
        match strategy {
            Strategy::Joint => self.encode_joint(prefix, suffix, window, suffix_cap),
            Strategy::PrefixOnly => self.encode_prefix_only(prefix, window),
            Strategy::SuffixOnly => self.encode_suffix_only(suffix, window),
        }
    }

    /// Keeps the `suffix_cap` suffix tokens nearest the cursor and fills the
    /// rest of the window with the prefix tokens nearest the cursor.
    pub fn encode_joint(
        &self,
        prefix: &str,
        suffix: &str,
        window: usize,
        suffix_cap: usize,
    ) -> Result<TokenizedContext, TokenizerError> {
        if window <= suffix_cap + 2 {
            return Err(TokenizerError::WindowTooSmall { window, suffix_cap });
        }
        let s = self.encode(suffix);
        let n_s = s.len().min(suffix_cap);
        let p = self.encode(prefix);
        let n_p = p.len().min(window - 2 - n_s);
        Ok(self.layout(&p[p.len() - n_p..], &s[..n_s], window))
    }

    pub fn encode_prefix_only(&self, prefix: &str, window: usize) -> Result<TokenizedContext, TokenizerError> {
        if window < 3 {
            return Err(TokenizerError::WindowTooSmall { window, suffix_cap: 0 });
        }
        let p = self.encode(prefix);
        let n_p = p.len().min(window - 2);
        Ok(self.layout(&p[p.len() - n_p..], &[], window))
    }

    /// `[cls] suffix [sep]`: the suffix is right-truncated and the separator
    /// closes the content.
    pub fn encode_suffix_only(&self, suffix: &str, window: usize) -> Result<TokenizedContext, TokenizerError> {
        if window < 3 {
            return Err(TokenizerError::WindowTooSmall { window, suffix_cap: 0 });
        }
        let s = self.encode(suffix);
        let n_s = s.len().min(window - 2);
        let mut ctx = self.layout(&s[..n_s], &[], window);
        ctx.n_p = 0;
        ctx.n_s = n_s;
        Ok(ctx)
    }

    fn layout(&self, before: &[u32], after: &[u32], window: usize) -> TokenizedContext {
        let mut ids = Vec::with_capacity(window);
        ids.push(self.cls);
        ids.extend_from_slice(before);
        let sep_index = ids.len();
        ids.push(self.sep);
        ids.extend_from_slice(after);
        let content = ids.len();
        ids.resize(window, self.pad);
        let mut attention_mask = vec![1u8; content];
        attention_mask.resize(window, 0);
        TokenizedContext {
            ids,
            attention_mask,
            sep_index,
            n_s: after.len(),
            n_p: before.len(),
        }
    }
}

/// Learns `count` merges from `corpus` by repeatedly merging the most
/// frequent adjacent pair (ties broken by the pair's strings). Only meant
/// for building small test vocabularies.
pub fn learn_merges(corpus: &[&str], count: usize) -> Tokenizer {
    let base = Tokenizer::byte_level();
    let mut spec = base.spec();
    let mut words: HashMap<Vec<String>, usize> = HashMap::new();
    for text in corpus {
        for piece in pretokenizer().find_iter(text) {
            let w = piece.as_str().bytes().map(|b| byte_char(b).to_string()).collect();
            *words.entry(w).or_default() += 1;
        }
    }
    for _ in 0..count {
        let mut pairs: HashMap<(&str, &str), usize> = HashMap::new();
        for (w, n) in &words {
            for p in w.windows(2) {
                *pairs.entry((&p[0], &p[1])).or_default() += n;
            }
        }
        let Some(((a, b), _)) = pairs
            .into_iter()
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
        else {
            break;
        };
        let (a, b) = (a.to_string(), b.to_string());
        let joined = format!("{a}{b}");
        if !spec.tokens.contains(&joined) {
            spec.tokens.push(joined.clone());
        }
        spec.merges.push((a.clone(), b.clone()));
        words = words
            .into_iter()
            .map(|(w, n)| {
                let mut out = Vec::with_capacity(w.len());
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
                        out.push(joined.clone());
                        i += 2;
                    } else {
                        out.push(w[i].clone());
                        i += 1;
                    }
                }
                (out, n)
            })
            .fold(HashMap::new(), |mut acc, (w, n)| {
                *acc.entry(w).or_default() += n;
                acc
            });
    }
    Tokenizer::from_spec(&spec).expect("learned vocabulary is consistent")
}
