//! Target word lists and their resolution to token ids.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::tokenizer::Tokenizer;

/// Default gendered word lists. These are a reconstruction assembled from
/// the usual pronoun/kinship/title pairs; operators studying a specific
/// model or corpus should pass their own lists.
pub const DEFAULT_MALE_WORDS: &[&str] = &[
    "he", "him", "his", "himself", "man", "men", "male", "boy", "boys", "father", "dad", "son",
    "brother", "uncle", "king", "sir",
];

pub const DEFAULT_FEMALE_WORDS: &[&str] = &[
    "she", "her", "hers", "herself", "woman", "women", "female", "girl", "girls", "mother", "mom",
    "daughter", "sister", "aunt", "queen", "madam",
];

/// What to do with words that do not map to a single token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResolvePolicy {
    /// Keep the first sub-token and log a warning.
    #[default]
    FirstSubtoken,
    /// Drop the word, recording the reason.
    Strict,
}

impl std::str::FromStr for ResolvePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-subtoken" | "first_subtoken" => Ok(Self::FirstSubtoken),
            "strict" => Ok(Self::Strict),
            other => Err(Error::InvalidArgument(format!(
                "unknown resolve policy {other:?}"
            ))),
        }
    }
}

/// Words resolved to unique token ids, plus everything that was dropped.
#[derive(Debug, Clone)]
pub struct TargetTokenSet {
    pub words: Vec<String>,
    pub ids: Vec<u32>,
    pub dropped: Vec<(String, String)>,
}

impl TargetTokenSet {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Resolve words to token ids, preferring the leading-space variant
/// (mid-sentence prediction uses the spaced form in GPT-2's vocabulary).
///
/// Each word is tried as `" " + word`, then bare. Multi-token words follow
/// `policy`. Duplicate ids are dropped so the resolved set stays unique.
pub fn resolve_targets(
    tokenizer: &Tokenizer,
    words: &[String],
    policy: ResolvePolicy,
) -> Result<TargetTokenSet> {
    if words.is_empty() {
        return Err(Error::EmptyTargetSet("no words given".into()));
    }
    let mut out = TargetTokenSet {
        words: Vec::new(),
        ids: Vec::new(),
        dropped: Vec::new(),
    };
    for word in words {
        let resolved = resolve_one(tokenizer, word, policy);
        match resolved {
            Ok(Some(id)) => {
                if out.ids.contains(&id) {
                    out.dropped.push((word.clone(), "duplicate token id".into()));
                } else {
                    out.words.push(word.clone());
                    out.ids.push(id);
                }
            }
            Ok(None) => out.dropped.push((word.clone(), "multi-token".into())),
            Err(reason) => out.dropped.push((word.clone(), reason)),
        }
    }
    if out.ids.is_empty() {
        return Err(Error::EmptyTargetSet(format!(
            "all {} words dropped",
            words.len()
        )));
    }
    Ok(out)
}

fn resolve_one(
    tokenizer: &Tokenizer,
    word: &str,
    policy: ResolvePolicy,
) -> std::result::Result<Option<u32>, String> {
    let spaced = tokenizer
        .encode(&format!(" {word}"))
        .map_err(|e| e.to_string())?;
    if spaced.len() == 1 {
        return Ok(Some(spaced[0]));
    }
    let bare = tokenizer.encode(word).map_err(|e| e.to_string())?;
    if bare.len() == 1 {
        return Ok(Some(bare[0]));
    }
    match policy {
        ResolvePolicy::FirstSubtoken => {
            let first = spaced.first().or(bare.first()).copied();
            if let Some(id) = first {
                log::warn!("word {word:?} is multi-token; keeping first sub-token id {id}");
            }
            Ok(first)
        }
        ResolvePolicy::Strict => Ok(None),
    }
}

/// Read a plain-text word list: one word per line, `#` starts a comment.
pub fn read_word_list(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_word_list(&text))
}

pub fn parse_word_list(text: &str) -> Vec<String> {
    text.lines()
        .map(|line| match line.find('#') {
            Some(idx) => line[..idx].trim(),
            None => line.trim(),
        })
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}
