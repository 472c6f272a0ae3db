//! Whitespace-and-punctuation tokenizer with byte fallback, plus prompt
//! assembly that tracks label spans, the summary-token position, and the
//! response range used for next-token supervision.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const SUMMARY_ID: u32 = 3;
const BYTE_BASE: u32 = 4;
const WORD_BASE: u32 = BYTE_BASE + 256;

/// The textual form of the summary token.
pub const SUMMARY_TOKEN_TEXT: &str = "<PER>";

#[derive(Debug, Error, PartialEq)]
pub enum TokenizeError {
    #[error("sequence has {count} summary tokens, expected exactly one")]
    SummaryCount { count: usize },
    #[error("label {index} produced an empty token span")]
    EmptySpan { index: usize },
}

/// Fixed vocabulary: specials, all 256 bytes, then corpus words in sorted
/// order. Unknown words fall back to their UTF-8 bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

fn split_text(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        if chunk.contains(SUMMARY_TOKEN_TEXT) {
            // Split around the marker so "<PER>." keeps its punctuation.
            let mut rest = chunk;
            while let Some(pos) = rest.find(SUMMARY_TOKEN_TEXT) {
                if pos > 0 {
                    out.extend(split_plain(&rest[..pos]));
                }
                out.push(SUMMARY_TOKEN_TEXT.to_string());
                rest = &rest[pos + SUMMARY_TOKEN_TEXT.len()..];
            }
            if !rest.is_empty() {
                out.extend(split_plain(rest));
            }
        } else {
            out.extend(split_plain(chunk));
        }
    }
    out
}

fn is_punct(c: char) -> bool {
    matches!(c, '.' | ',' | '!' | '?' | ';' | ':')
}

fn split_plain(chunk: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in chunk.chars() {
        if is_punct(c) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(c.to_string());
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

impl Tokenizer {
    /// Builds a vocabulary from a corpus; word order is sorted for
    /// determinism regardless of corpus order.
    pub fn build<'a>(corpus: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set = std::collections::BTreeSet::new();
        for text in corpus {
            for token in split_text(text) {
                if token != SUMMARY_TOKEN_TEXT {
                    set.insert(token);
                }
            }
        }
        let words: Vec<String> = set.into_iter().collect();
        let mut tok = Self { words, index: BTreeMap::new() };
        tok.rebuild_index();
        tok
    }

    /// Restores the word index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), WORD_BASE + i as u32))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        WORD_BASE as usize + self.words.len()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for token in split_text(text) {
            if token == SUMMARY_TOKEN_TEXT {
                ids.push(SUMMARY_ID);
            } else if let Some(&id) = self.index.get(&token) {
                ids.push(id);
            } else {
                ids.extend(token.bytes().map(|b| BYTE_BASE + b as u32));
            }
        }
        ids
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut parts: Vec<String> = Vec::new();
        let mut byte_run: Vec<u8> = Vec::new();
        let flush = |run: &mut Vec<u8>, parts: &mut Vec<String>| {
            if !run.is_empty() {
                parts.push(String::from_utf8_lossy(run).into_owned());
                run.clear();
            }
        };
        for &id in ids {
            if (BYTE_BASE..WORD_BASE).contains(&id) {
                byte_run.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush(&mut byte_run, &mut parts);
            match id {
                PAD_ID => {}
                BOS_ID => {}
                EOS_ID => {}
                SUMMARY_ID => parts.push(SUMMARY_TOKEN_TEXT.to_string()),
                _ => {
                    if let Some(w) = self.words.get((id - WORD_BASE) as usize) {
                        parts.push(w.clone());
                    }
                }
            }
        }
        flush(&mut byte_run, &mut parts);
        // Re-join with spaces except before punctuation tokens.
        let mut text = String::new();
        for part in parts {
            if !text.is_empty() && !(part.len() == 1 && part.chars().all(is_punct)) {
                text.push(' ');
            }
            text.push_str(&part);
        }
        text
    }
}

/// A tokenized prompt (and optionally response) with structural bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    /// Token index range `[start, end)` per candidate label, in order.
    pub label_spans: Vec<(usize, usize)>,
    pub summary_pos: Option<usize>,
    /// Index of the first response token (the response runs to the end).
    pub response_start: Option<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Structural invariants: at most one summary token and it sits where
    /// recorded; spans in order, disjoint, non-empty.
    pub fn validate(&self) -> Result<(), TokenizeError> {
        let count = self.ids.iter().filter(|&&i| i == SUMMARY_ID).count();
        match self.summary_pos {
            Some(p) => {
                if count != 1 || self.ids.get(p) != Some(&SUMMARY_ID) {
                    return Err(TokenizeError::SummaryCount { count });
                }
            }
            None => {
                if count != 0 {
                    return Err(TokenizeError::SummaryCount { count });
                }
            }
        }
        let mut prev_end = 0usize;
        for (i, &(s, e)) in self.label_spans.iter().enumerate() {
            if s >= e || e > self.ids.len() || s < prev_end {
                return Err(TokenizeError::EmptySpan { index: i });
            }
            prev_end = e;
        }
        Ok(())
    }
}

/// Assembles `[BOS] task-description instruction [response [EOS]]`,
/// recording one span per label. For word-based prompts pass each candidate
/// label; for sentence-based prompts pass the whole expression as the single
/// "label" so its span covers the expression.
pub fn build_prompt(
    tok: &Tokenizer,
    task_description: &str,
    labels: &[String],
    response: Option<&str>,
) -> Result<TokenSequence, TokenizeError> {
    let mut ids = vec![BOS_ID];
    ids.extend(tok.encode(task_description));
    let mut label_spans = Vec::with_capacity(labels.len());
    for (i, label) in labels.iter().enumerate() {
        if i > 0 {
            ids.extend(tok.encode(","));
        }
        let start = ids.len();
        ids.extend(tok.encode(label));
        if ids.len() == start {
            return Err(TokenizeError::EmptySpan { index: i });
        }
        label_spans.push((start, ids.len()));
    }
    let mut summary_pos = None;
    let mut response_start = None;
    if let Some(resp) = response {
        let start = ids.len();
        ids.extend(tok.encode(resp));
        ids.push(EOS_ID);
        response_start = Some(start);
        let count = ids.iter().filter(|&&i| i == SUMMARY_ID).count();
        if count != 1 {
            return Err(TokenizeError::SummaryCount { count });
        }
        summary_pos = ids.iter().position(|&i| i == SUMMARY_ID);
    }
    let seq = TokenSequence { ids, label_spans, summary_pos, response_start };
    seq.validate()?;
    Ok(seq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_tokenizer() -> Tokenizer {
        Tokenizer::build([
            "Please identify all objects according to the given phrase list. This is all the candidate phrases.",
            "apple, banana, orange",
            "a toy scene. The perception result is",
        ])
    }

    #[test]
    fn round_trip_known_words() {
        let tok = corpus_tokenizer();
        let text = "apple, banana. The scene";
        assert_eq!(tok.decode(&tok.encode(text)), text);
    }

    #[test]
    fn unknown_words_fall_back_to_bytes() {
        let tok = corpus_tokenizer();
        let ids = tok.encode("zebra");
        assert_eq!(ids.len(), 5, "one byte token per letter");
        assert!(ids.iter().all(|&i| (BYTE_BASE..WORD_BASE).contains(&i)));
        assert_eq!(tok.decode(&ids), "zebra");
    }

    #[test]
    fn summary_marker_is_a_single_token() {
        let tok = corpus_tokenizer();
        let ids = tok.encode("result is <PER>");
        assert_eq!(*ids.last().unwrap(), SUMMARY_ID);
        assert_eq!(ids.iter().filter(|&&i| i == SUMMARY_ID).count(), 1);
    }

    #[test]
    fn prompt_spans_cover_each_label() {
        let tok = corpus_tokenizer();
        let labels: Vec<String> = ["apple", "banana", "orange"].iter().map(|s| s.to_string()).collect();
        let seq = build_prompt(
            &tok,
            "Please identify all objects according to the given phrase list. This is all the candidate phrases.",
            &labels,
            Some("a toy scene. The perception result is <PER>"),
        )
        .unwrap();
        assert_eq!(seq.label_spans.len(), 3);
        for (&(s, e), label) in seq.label_spans.iter().zip(&labels) {
            let got = tok.decode(&seq.ids[s..e]);
            assert_eq!(&got, label);
        }
        let pos = seq.summary_pos.unwrap();
        assert_eq!(seq.ids[pos], SUMMARY_ID);
        assert_eq!(pos, seq.ids.len() - 2, "summary token right before EOS");
        assert_eq!(*seq.ids.last().unwrap(), EOS_ID);
        // Joining the labels with ", " and encoding in one go must agree
        // with the label-by-label assembly.
        let start = seq.label_spans[0].0;
        let end = seq.label_spans[2].1;
        assert_eq!(tok.encode("apple, banana, orange"), seq.ids[start..end].to_vec());
    }

    #[test]
    fn multi_word_label_span_is_contiguous() {
        let tok = Tokenizer::build(["traffic light", "stop sign", "task words"]);
        let labels: Vec<String> = ["traffic light", "stop sign"].iter().map(|s| s.to_string()).collect();
        let seq = build_prompt(&tok, "task words", &labels, None).unwrap();
        let (s, e) = seq.label_spans[0];
        assert_eq!(e - s, 2);
        assert_eq!(tok.decode(&seq.ids[s..e]), "traffic light");
    }

    #[test]
    fn doubled_summary_token_rejected() {
        let tok = corpus_tokenizer();
        let err = build_prompt(&tok, "task", &[], Some("x <PER> y <PER>")).unwrap_err();
        assert_eq!(err, TokenizeError::SummaryCount { count: 2 });
    }

    #[test]
    fn serde_round_trip_rebuilds_index() {
        let tok = corpus_tokenizer();
        let json = serde_json::to_string(&tok).unwrap();
        let mut back: Tokenizer = serde_json::from_str(&json).unwrap();
        back.rebuild_index();
        assert_eq!(tok, back);
        assert_eq!(back.encode("apple"), tok.encode("apple"));
    }
}
