// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE in the GPT-2 style.
//!
//! Text is split with the GPT-2 pre-tokenization pattern, each piece is
//! mapped byte-by-byte onto printable code points, and merge rules are
//! applied in rank order. Every byte has a base token, so encoding is total.

use std::collections::HashMap;
use std::path::Path;

use fancy_regex::Regex;

use crate::error::{Result, UnpackError};

const GPT2_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

/// The reversible byte -> char table of GPT-2.
fn byte_to_char_table() -> [char; 256] {
    let mut printable: Vec<u32> = (u32::from(b'!')..=u32::from(b'~')).collect();
    printable.extend(0xA1..=0xAC);
    printable.extend(0xAE..=0xFF);
    let mut table = ['\0'; 256];
    let mut next = 0u32;
    for b in 0..256u32 {
        let c = if printable.contains(&b) {
            b
        } else {
            let c = 256 + next;
            next += 1;
            c
        };
        table[b as usize] = char::from_u32(c).expect("valid code point");
    }
    table
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    decoder: Vec<Option<String>>,
    merge_ranks: HashMap<(String, String), usize>,
    merges: Vec<(String, String)>,
    byte_to_char: [char; 256],
    char_to_byte: HashMap<char, u8>,
    pattern: Regex,
}

impl Tokenizer {
    pub fn new(vocab: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let max_id = vocab.values().copied().max().unwrap_or(0) as usize;
        let mut decoder = vec![None; max_id + 1];
        for (tok, &id) in &vocab {
            if decoder[id as usize].is_some() {
                return Err(UnpackError::Tokenizer(format!("duplicate token id {id}")));
            }
            decoder[id as usize] = Some(tok.clone());
        }
        let byte_to_char = byte_to_char_table();
        for c in byte_to_char {
            if !vocab.contains_key(&c.to_string()) {
                return Err(UnpackError::Tokenizer(format!(
                    "vocabulary lacks base byte token {c:?}"
                )));
            }
        }
        let char_to_byte = byte_to_char
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        let merge_ranks = merges
            .iter()
            .cloned()
            .enumerate()
            .map(|(rank, pair)| (pair, rank))
            .collect();
        let pattern = Regex::new(GPT2_PATTERN)
            .map_err(|e| UnpackError::Tokenizer(format!("pre-tokenizer pattern: {e}")))?;
        Ok(Self {
            encoder: vocab,
            decoder,
            merge_ranks,
            merges,
            byte_to_char,
            char_to_byte,
            pattern,
        })
    }

    /// Loads `vocab.json` (token -> id) and `merges.txt` (one `a b` rule per line).
    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(vocab_path).map_err(|e| UnpackError::io(vocab_path, e))?;
        let vocab: HashMap<String, u32> = serde_json::from_str(&raw)
            .map_err(|e| UnpackError::Tokenizer(format!("{}: {e}", vocab_path.display())))?;
        let raw =
            std::fs::read_to_string(merges_path).map_err(|e| UnpackError::io(merges_path, e))?;
        let mut merges = Vec::new();
        for (lineno, line) in raw.lines().enumerate() {
            if line.starts_with("#version") || line.trim().is_empty() {
                continue;
            }
            let (a, b) = line.split_once(' ').ok_or_else(|| {
                UnpackError::Tokenizer(format!(
                    "{}:{}: expected `a b`",
                    merges_path.display(),
                    lineno + 1
                ))
            })?;
            merges.push((a.to_string(), b.to_string()));
        }
        Self::new(vocab, merges)
    }

    /// A vocabulary of the 256 byte tokens plus `<|endoftext|>` (id 256) and
    /// tokens produced by `merges`, in order. Used for synthetic models.
    pub fn byte_level(merges: &[(&str, &str)]) -> Result<Self> {
        let table = byte_to_char_table();
        let mut vocab: HashMap<String, u32> = table
            .iter()
            .enumerate()
            .map(|(i, c)| (c.to_string(), i as u32))
            .collect();
        vocab.insert("<|endoftext|>".into(), 256);
        let mut rules = Vec::new();
        for (a, b) in merges {
            let merged = format!("{a}{b}");
            let next = vocab.len() as u32;
            vocab.entry(merged).or_insert(next);
            rules.push((a.to_string(), b.to_string()));
        }
        Self::new(vocab, rules)
    }

    /// Writes `vocab.json` and `merges.txt` into `dir`.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        let vocab: std::collections::BTreeMap<_, _> = self.encoder.iter().collect();
        let json = serde_json::to_string(&vocab)
            .map_err(|e| UnpackError::Tokenizer(format!("serializing vocab: {e}")))?;
        let path = dir.join("vocab.json");
        std::fs::write(&path, json).map_err(|e| UnpackError::io(&path, e))?;
        let mut out = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            out.push_str(a);
            out.push(' ');
            out.push_str(b);
            out.push('\n');
        }
        let path = dir.join("merges.txt");
        std::fs::write(&path, out).map_err(|e| UnpackError::io(&path, e))
    }

    /// One past the largest token id.
    pub fn vocab_len(&self) -> usize {
        self.decoder.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.encoder.get(token).copied()
    }

    pub fn token_str(&self, id: u32) -> Option<&str> {
        self.decoder.get(id as usize).and_then(|t| t.as_deref())
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        let mut consumed = 0;
        for piece in self.pattern.find_iter(text) {
            // Only a backtracking-limit error can end the scan early; the
            // remainder is then byte-encoded so encoding stays total.
            let Ok(m) = piece else { break };
            self.encode_piece(&text[consumed..m.start()], &mut ids);
            self.encode_piece(m.as_str(), &mut ids);
            consumed = m.end();
        }
        self.encode_piece(&text[consumed..], &mut ids);
        ids
    }

    fn encode_piece(&self, piece: &str, ids: &mut Vec<u32>) {
        if piece.is_empty() {
            return;
        }
        let mapped: Vec<String> = piece
            .bytes()
            .map(|b| self.byte_to_char[b as usize].to_string())
            .collect();
        for sym in self.bpe(mapped) {
            match self.encoder.get(&sym) {
                Some(&id) => ids.push(id),
                None => ids.extend(sym.chars().map(|c| self.encoder[&c.to_string()])),
            }
        }
    }

    fn bpe(&self, mut word: Vec<String>) -> Vec<String> {
        while word.len() > 1 {
            let best = word
                .windows(2)
                .enumerate()
                .filter_map(|(i, w)| {
                    self.merge_ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((rank, _)) = best else { break };
            let (a, b) = &self.merges[rank];
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && &word[i] == a && &word[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut word[i]));
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Vec<u8> {
        let mut out = Vec::new();
        for &id in ids {
            let Some(tok) = self.token_str(id) else { continue };
            for c in tok.chars() {
                match self.char_to_byte.get(&c) {
                    Some(&b) => out.push(b),
                    None => {
                        let mut buf = [0u8; 4];
                        out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        String::from_utf8_lossy(&self.decode_bytes(ids)).into_owned()
    }
}
