//! On-disk corpora: the JSONL sample format, two dialogue dataset layouts,
//! vocabulary files, and tokenization into model samples.
//!
//! Gold-knowledge indices are 1-based in every file format and 0-based in
//! memory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use kselect_core::{DialogueSample, LengthLimits, RawSample, Vocabulary};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    /// One JSON sample per line.
    Jsonl,
    /// A JSON array of dialogues whose wizard turns carry retrieved
    /// passages and a checked sentence.
    Wizard,
    /// A JSON array of episodes, each an array of turns with knowledge
    /// sentences and a checked sentence.
    Holle,
}

/// One line of the JSONL format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JsonlRecord {
    pub history: Vec<String>,
    pub knowledge: Vec<String>,
    pub response: String,
    /// 1-based.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_knowledge: Option<Vec<usize>>,
}

impl JsonlRecord {
    pub fn from_raw(raw: &RawSample) -> Self {
        JsonlRecord {
            history: raw.history.clone(),
            knowledge: raw.knowledge.clone(),
            response: raw.response.clone(),
            gold_knowledge: raw.gold_knowledge.as_ref().map(|g| g.iter().map(|i| i + 1).collect()),
        }
    }

    /// Converts to a 0-based sample; `None` when a gold index is outside
    /// `1..=r`.
    pub fn into_raw(self) -> std::result::Result<RawSample, String> {
        let r = self.knowledge.len();
        let gold = match self.gold_knowledge {
            Some(g) => {
                if let Some(bad) = g.iter().find(|&&i| i == 0 || i > r) {
                    return Err(format!("gold_knowledge index {bad} outside 1..={r}"));
                }
                Some(g.into_iter().map(|i| i - 1).collect())
            }
            None => None,
        };
        Ok(RawSample { history: self.history, knowledge: self.knowledge, response: self.response, gold_knowledge: gold })
    }
}

/// Loaded samples plus the count of records skipped for an empty pool.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub samples: Vec<RawSample>,
    pub skipped_empty_pool: usize,
}

impl Corpus {
    fn push(&mut self, raw: RawSample) {
        if raw.knowledge.iter().all(|k| k.trim().is_empty()) {
            self.skipped_empty_pool += 1;
        } else {
            self.samples.push(raw);
        }
    }
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, message: message.into() }
}

pub fn parse_jsonl(text: &str, path: &Path) -> Result<Corpus> {
    let mut corpus = Corpus::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: JsonlRecord = serde_json::from_str(line).map_err(|e| parse_error(path, n + 1, e.to_string()))?;
        corpus.push(record.into_raw().map_err(|m| parse_error(path, n + 1, m))?);
    }
    Ok(corpus)
}

#[derive(Deserialize)]
struct WizardDialogue {
    #[serde(default)]
    chosen_topic: Option<String>,
    dialog: Vec<WizardTurn>,
}

#[derive(Deserialize)]
struct WizardTurn {
    speaker: String,
    text: String,
    #[serde(default)]
    checked_sentence: BTreeMap<String, String>,
    #[serde(default)]
    retrieved_passages: Vec<BTreeMap<String, Vec<String>>>,
}

const NO_PASSAGE: &str = "no_passages_used";

/// One sample per wizard turn: history is every earlier utterance (the
/// chosen topic first), the pool is the flattened passage sentences of
/// that turn, and the gold label is the position of the checked sentence.
pub fn parse_wizard(text: &str, path: &Path) -> Result<Corpus> {
    let dialogues: Vec<WizardDialogue> = serde_json::from_str(text).map_err(|e| parse_error(path, e.line(), e.to_string()))?;
    let mut corpus = Corpus::default();
    for d in dialogues {
        let mut history: Vec<String> = d.chosen_topic.into_iter().collect();
        for turn in d.dialog {
            if turn.speaker.ends_with("Wizard") {
                let pool: Vec<String> = turn.retrieved_passages.iter().flat_map(|p| p.values().flatten().cloned()).collect();
                let gold = turn
                    .checked_sentence
                    .values()
                    .find(|s| s.as_str() != NO_PASSAGE)
                    .and_then(|s| pool.iter().position(|k| k == s))
                    .map(|i| vec![i]);
                corpus.push(RawSample {
                    history: history.clone(),
                    knowledge: pool,
                    response: turn.text.clone(),
                    gold_knowledge: gold,
                });
            }
            history.push(turn.text);
        }
    }
    Ok(corpus)
}

#[derive(Deserialize)]
struct HolleTurn {
    text: String,
    labels: Vec<String>,
    #[serde(default)]
    knowledge_sentences: Vec<String>,
    #[serde(default)]
    checked_sentence: Option<String>,
}

/// One sample per turn: `text` is the user utterance, the first label the
/// response; earlier turns of the episode form the history.
pub fn parse_holle(text: &str, path: &Path) -> Result<Corpus> {
    let episodes: Vec<Vec<HolleTurn>> = serde_json::from_str(text).map_err(|e| parse_error(path, e.line(), e.to_string()))?;
    let mut corpus = Corpus::default();
    for ep in episodes {
        let mut history = Vec::new();
        for turn in ep {
            let response = turn.labels.first().cloned().ok_or_else(|| parse_error(path, 0, "turn without labels"))?;
            history.push(turn.text);
            let gold = turn
                .checked_sentence
                .as_ref()
                .filter(|s| s.as_str() != NO_PASSAGE)
                .and_then(|s| turn.knowledge_sentences.iter().position(|k| k == s))
                .map(|i| vec![i]);
            corpus.push(RawSample {
                history: history.clone(),
                knowledge: turn.knowledge_sentences,
                response: response.clone(),
                gold_knowledge: gold,
            });
            history.push(response);
        }
    }
    Ok(corpus)
}

pub fn load_corpus(path: &Path, format: Format) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match format {
        Format::Jsonl => parse_jsonl(&text, path),
        Format::Wizard => parse_wizard(&text, path),
        Format::Holle => parse_holle(&text, path),
    }
}

pub fn write_jsonl(path: &Path, samples: &[RawSample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        serde_json::to_writer(&mut out, &JsonlRecord::from_raw(s))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Vocabulary over every history turn, document and response.
pub fn build_vocab(samples: &[RawSample], min_freq: usize) -> Vocabulary {
    let texts = samples
        .iter()
        .flat_map(|s| s.history.iter().chain(&s.knowledge).chain(std::iter::once(&s.response)))
        .map(String::as_str);
    Vocabulary::build(texts, min_freq)
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for t in vocab.tokens() {
        writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let lines: Vec<String> = BufReader::new(f).lines().collect::<std::io::Result<_>>().map_err(|e| Error::io(path, e))?;
    Ok(Vocabulary::from_tokens(lines)?)
}

/// Tokenizes and validates every sample. Samples whose pool or response
/// is empty after tokenization are dropped and counted.
pub fn tokenize_corpus(samples: &[RawSample], vocab: &Vocabulary, limits: &LengthLimits) -> Result<(Vec<DialogueSample>, usize)> {
    let mut out = Vec::with_capacity(samples.len());
    let mut dropped = 0;
    for raw in samples {
        // documents that tokenize to nothing are removed, gold positions remapped
        let keep: Vec<usize> = (0..raw.knowledge.len()).filter(|&i| !vocab.encode(&raw.knowledge[i]).is_empty()).collect();
        let filtered;
        let raw = if keep.len() == raw.knowledge.len() {
            raw
        } else {
            filtered = RawSample {
                knowledge: keep.iter().map(|&i| raw.knowledge[i].clone()).collect(),
                gold_knowledge: raw
                    .gold_knowledge
                    .as_ref()
                    .map(|g| g.iter().filter_map(|old| keep.iter().position(|k| k == old)).collect()),
                ..raw.clone()
            };
            &filtered
        };
        match DialogueSample::from_raw(raw, vocab, limits) {
            Ok(s) => out.push(s),
            Err(kselect_core::Error::Empty(_)) => dropped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok((out, dropped))
}
