use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::TaggedTranscript;

use super::{prompted_concepts, Corpus, CorpusConfig, CorpusError, Split, TurnRecord};

pub const CORPUS_FORMAT: &str = "HVCORP1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    config_hash: String,
    config: CorpusConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    dialog_id: usize,
    turn_index: usize,
    split: Split,
    system_prompt: String,
    user_transcript: String,
    utterance_seed: u64,
}

impl Corpus {
    /// JSON-lines text: a header line, then one line per turn.
    pub fn to_jsonl(&self) -> String {
        let header = Header {
            format: CORPUS_FORMAT.into(),
            config_hash: self.config.hash(),
            config: self.config.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        for r in &self.records {
            let rec = Record {
                dialog_id: r.dialog_id,
                turn_index: r.turn_index,
                split: r.split,
                system_prompt: r.system_prompt.join(" "),
                user_transcript: r.user_transcript.to_string(),
                utterance_seed: r.utterance_seed,
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, CorpusError> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or(CorpusError::Malformed {
            line: 1,
            message: "empty file".into(),
        })?;
        let header: Header = serde_json::from_str(first).map_err(|e| CorpusError::Malformed {
            line: 1,
            message: e.to_string(),
        })?;
        if header.format != CORPUS_FORMAT {
            return Err(CorpusError::Format(header.format));
        }
        let computed = header.config.hash();
        if computed != header.config_hash {
            return Err(CorpusError::HashMismatch {
                stored: header.config_hash,
                computed,
            });
        }
        let cfg = &header.config.generator;
        let mut records = Vec::new();
        for (i, line) in lines {
            let malformed = |message: String| CorpusError::Malformed { line: i + 1, message };
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
            let user_transcript = TaggedTranscript::parse(&r.user_transcript).map_err(|e| malformed(e.to_string()))?;
            let system_prompt: Vec<String> = r.system_prompt.split_whitespace().map(str::to_string).collect();
            records.push(TurnRecord {
                dialog_id: r.dialog_id,
                turn_index: r.turn_index,
                split: r.split,
                prompted: prompted_concepts(cfg, &system_prompt),
                system_prompt,
                user_transcript,
                utterance_seed: r.utterance_seed,
            });
        }
        Ok(Self {
            config: header.config,
            records,
        })
    }
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let mut f = fs::File::create(path)?;
    f.write_all(corpus.to_jsonl().as_bytes())?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    Corpus::from_jsonl(&fs::read_to_string(path)?)
}
