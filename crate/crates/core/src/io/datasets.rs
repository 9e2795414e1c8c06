//! JSONL dataset readers for the evaluation pipelines.

use std::io::BufRead;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
struct TextLine {
    text: String,
    #[serde(default)]
    label: Option<String>,
}

#[derive(Debug, Deserialize)]
struct BioLine {
    text: String,
    gender: u8,
}

#[derive(Debug, Deserialize)]
struct PairLine {
    stereo: String,
    anti: String,
}

fn lines(path: &Path) -> Result<Vec<String>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line);
        }
    }
    Ok(out)
}

fn parse_line<T: for<'de> Deserialize<'de>>(path: &Path, idx: usize, line: &str) -> Result<T> {
    serde_json::from_str(line).map_err(|e| {
        Error::InvalidArgument(format!("{}:{}: {e}", path.display(), idx + 1))
    })
}

/// `{"text": ..., "label": ...}` lines; the first non-empty label names the
/// corpus.
pub fn read_corpus(path: &Path) -> Result<(Vec<String>, String)> {
    let mut texts = Vec::new();
    let mut label = String::new();
    for (idx, line) in lines(path)?.iter().enumerate() {
        let parsed: TextLine = parse_line(path, idx, line)?;
        if label.is_empty() {
            if let Some(l) = &parsed.label {
                label = l.clone();
            }
        }
        texts.push(parsed.text);
    }
    if texts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{}: empty corpus",
            path.display()
        )));
    }
    Ok((texts, label))
}

/// `{"text": ...}` lines.
pub fn read_sentences(path: &Path) -> Result<Vec<String>> {
    Ok(read_corpus(path)?.0)
}

/// `{"text": ..., "gender": 0|1}` lines.
pub fn read_bios(path: &Path) -> Result<Vec<(String, u8)>> {
    let mut out = Vec::new();
    for (idx, line) in lines(path)?.iter().enumerate() {
        let parsed: BioLine = parse_line(path, idx, line)?;
        if parsed.gender > 1 {
            return Err(Error::InvalidArgument(format!(
                "{}:{}: gender must be 0 or 1",
                path.display(),
                idx + 1
            )));
        }
        out.push((parsed.text, parsed.gender));
    }
    Ok(out)
}

/// `{"stereo": ..., "anti": ...}` lines.
pub fn read_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (idx, line) in lines(path)?.iter().enumerate() {
        let parsed: PairLine = parse_line(path, idx, line)?;
        out.push((parsed.stereo, parsed.anti));
    }
    Ok(out)
}
