//! Byte-level BPE tokenizer (GPT-2 rules): `vocab.json` + `merges.txt`.
//!
//! Pre-tokenization follows the GPT-2 split pattern
//! `'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+`
//! implemented as an explicit scanner (the lookahead means a whitespace run
//! followed by a word keeps its last character to attach to that word).
//! Bytes are mapped to printable unicode stand-ins before merging, so every
//! input is representable and no special tokens are ever added.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

const CONTRACTIONS: [&str; 7] = ["'s", "'t", "'re", "'ve", "'m", "'ll", "'d"];

/// GPT-2's byte-to-unicode stand-in table.
fn byte_to_unicode_table() -> [char; 256] {
    let printable = (b'!'..=b'~')
        .chain(0xA1..=0xAC)
        .chain(0xAE..=0xFF)
        .collect::<Vec<u8>>();
    let mut table = ['\0'; 256];
    let mut extra = 0u32;
    for b in 0u32..256 {
        if printable.contains(&(b as u8)) {
            table[b as usize] = char::from_u32(b).unwrap();
        } else {
            table[b as usize] = char::from_u32(256 + extra).unwrap();
            extra += 1;
        }
    }
    table
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum CharClass {
    Letter,
    Number,
    Other,
}

fn char_class(c: char) -> Option<CharClass> {
    if c.is_whitespace() {
        None
    } else if c.is_alphabetic() {
        Some(CharClass::Letter)
    } else if c.is_numeric() {
        Some(CharClass::Number)
    } else {
        Some(CharClass::Other)
    }
}

/// Split text into the pieces the GPT-2 pattern would produce.
fn pre_tokenize(text: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let end_of = |idx: usize| {
        if idx < n {
            chars[idx].0
        } else {
            text.len()
        }
    };
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let start = chars[i].0;
        let c = chars[i].1;

        if c == '\'' {
            let rest = &text[start..];
            if let Some(cand) = CONTRACTIONS.iter().find(|cand| rest.starts_with(**cand)) {
                out.push(&text[start..start + cand.len()]);
                i += cand.chars().count();
                continue;
            }
        }

        if c == ' ' && i + 1 < n && !chars[i + 1].1.is_whitespace() {
            // ` ?` binds the space to the following class run.
            let cls = char_class(chars[i + 1].1);
            let mut j = i + 1;
            while j < n && char_class(chars[j].1) == cls {
                j += 1;
            }
            out.push(&text[start..end_of(j)]);
            i = j;
            continue;
        }

        if let Some(cls) = char_class(c) {
            let mut j = i;
            while j < n && char_class(chars[j].1) == Some(cls) {
                j += 1;
            }
            out.push(&text[start..end_of(j)]);
            i = j;
            continue;
        }

        // Whitespace run.
        let mut j = i;
        while j < n && chars[j].1.is_whitespace() {
            j += 1;
        }
        if j == n {
            out.push(&text[start..end_of(j)]);
            i = j;
        } else if j - i >= 2 {
            // Keep the last whitespace char for the next piece.
            out.push(&text[start..chars[j - 1].0]);
            i = j - 1;
        } else {
            out.push(&text[start..end_of(j)]);
            i = j;
        }
    }
    out
}

/// Byte-level BPE vocabulary with merge ranks.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    decoder: Vec<String>,
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    byte_to_unicode: [char; 256],
    unicode_to_byte: HashMap<char, u8>,
}

impl Tokenizer {
    fn build(encoder: HashMap<String, u32>, merges: Vec<(String, String)>) -> Result<Self> {
        let size = encoder.len();
        let mut decoder = vec![String::new(); size];
        for (tok, &id) in &encoder {
            let idx = id as usize;
            if idx >= size {
                return Err(Error::Tokenizer(format!(
                    "vocab id {id} out of range for {size} entries"
                )));
            }
            decoder[idx] = tok.clone();
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, (a, b))| ((a.clone(), b.clone()), i))
            .collect();
        let byte_to_unicode = byte_to_unicode_table();
        let unicode_to_byte = byte_to_unicode
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        Ok(Self {
            encoder,
            decoder,
            merges,
            ranks,
            byte_to_unicode,
            unicode_to_byte,
        })
    }

    /// Load from GPT-2 `vocab.json` and `merges.txt`.
    pub fn from_files(vocab_path: &Path, merges_path: &Path) -> Result<Self> {
        let vocab_text = std::fs::read_to_string(vocab_path)?;
        let parsed: Value = serde_json::from_str(&vocab_text)?;
        let obj = parsed
            .as_object()
            .ok_or_else(|| Error::Tokenizer("vocab.json is not an object".into()))?;
        let mut encoder = HashMap::with_capacity(obj.len());
        for (tok, id) in obj {
            let id = id
                .as_u64()
                .ok_or_else(|| Error::Tokenizer(format!("non-integer id for {tok:?}")))?;
            encoder.insert(tok.clone(), id as u32);
        }

        let merges_text = std::fs::read_to_string(merges_path)?;
        let mut merges = Vec::new();
        for line in merges_text.lines() {
            let line = line.trim_end();
            if line.is_empty() || line.starts_with("#version") {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Tokenizer(format!("bad merge line {line:?}")))?;
            merges.push((a.to_string(), b.to_string()));
        }
        Self::build(encoder, merges)
    }

    /// Load `vocab.json` + `merges.txt` from a directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        Self::from_files(&dir.join("vocab.json"), &dir.join("merges.txt"))
    }

    /// Full single-byte vocabulary (256 tokens, no merges). Covers every
    /// possible input; useful as a test substrate.
    pub fn synthetic_bytes() -> Self {
        let table = byte_to_unicode_table();
        let encoder = (0..256u32)
            .map(|b| (table[b as usize].to_string(), b))
            .collect();
        Self::build(encoder, Vec::new()).expect("byte vocab is well formed")
    }

    /// Small deterministic single-byte vocabulary sized to a synthetic
    /// model: lowercase letters first, then space, punctuation, digits,
    /// uppercase, newline, then remaining bytes until `vocab_size` entries.
    pub fn synthetic_ascii(vocab_size: usize) -> Self {
        assert!(vocab_size >= 1 && vocab_size <= 256);
        let mut preferred: Vec<u8> = (b'a'..=b'z').collect();
        preferred.push(b' ');
        preferred.extend([b'.', b',']);
        preferred.extend(b'0'..=b'9');
        preferred.extend(b'A'..=b'Z');
        preferred.push(b'\n');
        for b in 0..=255u8 {
            if !preferred.contains(&b) {
                preferred.push(b);
            }
        }
        let table = byte_to_unicode_table();
        let encoder = preferred
            .into_iter()
            .take(vocab_size)
            .enumerate()
            .map(|(id, b)| (table[b as usize].to_string(), id as u32))
            .collect();
        Self::build(encoder, Vec::new()).expect("ascii vocab is well formed")
    }

    /// Write `vocab.json` and `merges.txt` into a directory.
    pub fn write_files(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries: Vec<(&String, &u32)> = self.encoder.iter().collect();
        entries.sort_by_key(|&(_, id)| *id);
        let map: serde_json::Map<String, Value> = entries
            .into_iter()
            .map(|(tok, &id)| (tok.clone(), Value::from(id)))
            .collect();
        std::fs::write(
            dir.join("vocab.json"),
            serde_json::to_string(&Value::Object(map))?,
        )?;
        let mut merges = String::from("#version: 0.2\n");
        for (a, b) in &self.merges {
            let _ = writeln!(merges, "{a} {b}");
        }
        std::fs::write(dir.join("merges.txt"), merges)?;
        Ok(())
    }

    #[cfg(test)]
    pub(crate) fn build_for_tests(
        encoder: HashMap<String, u32>,
        merges: Vec<(String, String)>,
    ) -> Self {
        Self::build(encoder, merges).unwrap()
    }

    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.encoder.get(token).copied()
    }

    fn bpe(&self, symbols: Vec<String>) -> Vec<String> {
        let mut word = symbols;
        while word.len() >= 2 {
            let best = word
                .windows(2)
                .filter_map(|w| {
                    self.ranks
                        .get(&(w[0].clone(), w[1].clone()))
                        .map(|&r| (r, (w[0].clone(), w[1].clone())))
                })
                .min_by_key(|(r, _)| *r);
            let Some((_, (a, b))) = best else { break };
            let mut merged = Vec::with_capacity(word.len());
            let mut i = 0;
            while i < word.len() {
                if i + 1 < word.len() && word[i] == a && word[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(word[i].clone());
                    i += 1;
                }
            }
            word = merged;
        }
        word
    }

    /// Byte-level BPE encoding. No special tokens are added.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::new();
        for piece in pre_tokenize(text) {
            let symbols: Vec<String> = piece
                .bytes()
                .map(|b| self.byte_to_unicode[b as usize].to_string())
                .collect();
            for token in self.bpe(symbols) {
                let id = self.encoder.get(&token).copied().ok_or_else(|| {
                    Error::Tokenizer(format!("token {token:?} not in vocabulary"))
                })?;
                ids.push(id);
            }
        }
        Ok(ids)
    }

    /// Inverse of `encode` for ids this vocabulary produced.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            let token = self
                .decoder
                .get(id as usize)
                .ok_or_else(|| Error::TokenOutOfRange {
                    id,
                    vocab: self.decoder.len(),
                })?;
            for c in token.chars() {
                let b = self.unicode_to_byte.get(&c).ok_or_else(|| {
                    Error::Tokenizer(format!("symbol {c:?} has no byte mapping"))
                })?;
                bytes.push(*b);
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pre_tokenize_matches_reference_pattern() {
        let cases: Vec<(&str, Vec<&str>)> = vec![
            ("hello world", vec!["hello", " world"]),
            ("hello  world", vec!["hello", " ", " world"]),
            ("hello   world", vec!["hello", "  ", " world"]),
            ("don't stop", vec!["don", "'t", " stop"]),
            ("we'll see", vec!["we", "'ll", " see"]),
            ("a1b2", vec!["a", "1", "b", "2"]),
            (" 42 cats", vec![" 42", " cats"]),
            ("x!?y", vec!["x", "!?", "y"]),
            ("tail  ", vec!["tail", "  "]),
            ("\nword", vec!["\n", "word"]),
            ("\n\nword", vec!["\n", "\n", "word"]),
            ("a \nb", vec!["a", " ", "\n", "b"]),
            ("", vec![]),
        ];
        for (text, expected) in cases {
            assert_eq!(pre_tokenize(text), expected, "input {text:?}");
        }
    }

    #[test]
    fn empty_text_encodes_to_empty() {
        let tok = Tokenizer::synthetic_bytes();
        assert_eq!(tok.encode("").unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn merges_apply_by_rank() {
        let vocab: HashMap<String, u32> = [
            ("h", 0),
            ("e", 1),
            ("l", 2),
            ("o", 3),
            ("he", 4),
            ("ll", 5),
            ("hell", 6),
            ("hello", 7),
        ]
        .into_iter()
        .map(|(s, i)| (s.to_string(), i))
        .collect();
        let merges = vec![
            ("h".into(), "e".into()),
            ("l".into(), "l".into()),
            ("he".into(), "ll".into()),
            ("hell".into(), "o".into()),
        ];
        let tok = Tokenizer::build(vocab, merges).unwrap();
        assert_eq!(tok.encode("hello").unwrap(), vec![7]);
        // Prefix that cannot fully merge falls back to the longest pieces.
        assert_eq!(tok.encode("hell").unwrap(), vec![6]);
        assert_eq!(tok.encode("hel").unwrap(), vec![4, 2]);
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let tok = Tokenizer::synthetic_ascii(50);
        tok.write_files(dir.path()).unwrap();
        let loaded = Tokenizer::from_dir(dir.path()).unwrap();
        assert_eq!(loaded.vocab_size(), 50);
        let text = "the cat, 4 dogs.";
        assert_eq!(tok.encode(text).unwrap(), loaded.encode(text).unwrap());
    }

    #[test]
    fn ascii_vocab_is_deterministic_and_ordered() {
        let tok = Tokenizer::synthetic_ascii(30);
        assert_eq!(tok.token_id("a"), Some(0));
        assert_eq!(tok.token_id("z"), Some(25));
        // Space maps to the GPT-2 stand-in for 0x20.
        assert_eq!(tok.token_id("\u{0120}"), Some(26));
        assert_eq!(tok.vocab_size(), 30);
    }

    #[test]
    fn decode_rejects_out_of_range_id() {
        let tok = Tokenizer::synthetic_ascii(30);
        assert!(tok.decode(&[29]).is_ok());
        assert!(tok.decode(&[30]).is_err());
    }

    #[test]
    fn uncovered_byte_is_a_structured_error() {
        let tok = Tokenizer::synthetic_ascii(10);
        assert!(tok.encode("abc").is_ok());
        assert!(matches!(tok.encode("xyz!").unwrap_err(), Error::Tokenizer(_)));
    }

    proptest! {
        #[test]
        fn round_trip_identity_on_full_byte_vocab(s in "\\PC*") {
            let tok = Tokenizer::synthetic_bytes();
            let ids = tok.encode(&s).unwrap();
            prop_assert_eq!(tok.decode(&ids).unwrap(), s);
        }

        #[test]
        fn round_trip_identity_with_whitespace_mixtures(
            parts in proptest::collection::vec("[a-z]{0,4}( |\\n|\\t){0,3}", 0..8)
        ) {
            let s: String = parts.concat();
            let tok = Tokenizer::synthetic_bytes();
            let ids = tok.encode(&s).unwrap();
            prop_assert_eq!(tok.decode(&ids).unwrap(), s);
        }
    }
}
