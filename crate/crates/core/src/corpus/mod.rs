//! Deterministic synthetic dialog corpus.
//!
//! Each user turn is preceded by a system prompt naming one to three
//! concepts. The user answers with each prompted concept with probability
//! `ρ + (1 − ρ)·q` and with each unprompted one with probability `(1 − ρ)·q`,
//! where `q` is the background rate. The default inventory pairs up
//! concepts that share one value list (arrival/departure date, origin and
//! destination city, …), so only the prompt tells which of the two a value
//! answers.

mod features;
mod io;
mod spectrogram;

pub use features::{FeatureSynth, FeatureSynthConfig};
pub use io::{load_corpus, save_corpus, CORPUS_FORMAT};
pub use spectrogram::{power_spectrogram, spectrogram, Window, SPEC_HOP_MS, SPEC_WINDOW_MS};

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::codec::{CodecError, OutputAlphabet, TaggedTranscript, Token};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid generator config: {0}")]
    Config(String),
    #[error("character {0:?} is not in the grapheme set")]
    UnknownChar(char),
    #[error("no corpus met the concept marginal floor after {0} attempts")]
    Marginals(usize),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("config hash mismatch: header says {stored}, config hashes to {computed}")]
    HashMismatch { stored: String, computed: String },
    #[error("unsupported corpus format {0:?}")]
    Format(String),
    #[error("waveform of {samples} samples is shorter than one {window}-sample window")]
    ShortWaveform { samples: usize, window: usize },
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Dev => "dev",
            Self::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One concept of the inventory: the word a system prompt uses to ask for
/// it, and the words a user may answer with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptSpec {
    pub tag: String,
    pub keyword: String,
    pub values: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_dialogs: usize,
    /// Dialog lengths are uniform in `1..=max_turns`.
    pub max_turns: usize,
    /// Prompts name between 1 and this many concepts.
    pub max_prompt_concepts: usize,
    /// Prompt→answer correlation strength ρ.
    pub rho: f64,
    /// Background inclusion rate q of any concept.
    pub background_rate: f64,
    pub concepts: Vec<ConceptSpec>,
    /// Prompt openings, built from filler words only.
    pub prompt_openers: Vec<String>,
    /// Word joining multiple prompted concepts.
    pub prompt_joiner: String,
    /// User filler words; never tied to a concept.
    pub user_fillers: Vec<String>,
    pub graphemes: String,
    /// Minimum fraction of train user turns containing each concept.
    pub min_marginal: f64,
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn concept(tag: &str, keyword: &str, values: &str) -> ConceptSpec {
    ConceptSpec {
        tag: tag.into(),
        keyword: keyword.into(),
        values: words(values),
    }
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let numbers = "one two three four";
        let dates = "monday friday june july";
        let cities = "paris lyon nice rome";
        let prices = "fifty ninety hundred";
        Self {
            seed: 1,
            n_dialogs: 200,
            max_turns: 15,
            max_prompt_concepts: 3,
            rho: 0.8,
            background_rate: 0.1,
            concepts: vec![
                concept("nb_people", "people", numbers),
                concept("nb_rooms", "rooms", numbers),
                concept("date_in", "arrival", dates),
                concept("date_out", "departure", dates),
                concept("city_from", "origin", cities),
                concept("city_to", "destination", cities),
                concept("price_max", "maximum", prices),
                concept("price_min", "minimum", prices),
                concept("hotel", "hotel", "ritz astor lotus"),
                concept("room_type", "room", "single double suite"),
                concept("payment", "payment", "card cash cheque"),
                concept("response", "confirmation", "yes no sure"),
            ],
            prompt_openers: [
                "what is your",
                "which",
                "how many",
                "please give me the",
                "would you like",
                "tell me the",
                "do you want the",
                "okay what is the",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            prompt_joiner: "and".into(),
            user_fillers: words("i want the for in and please um it is we need a"),
            graphemes: "abcdefghijklmnopqrstuvwxyz".into(),
            min_marginal: 0.01,
        }
    }
}

const MAX_ATTEMPTS: usize = 100;

impl GeneratorConfig {
    pub fn inventory(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.tag.clone()).collect()
    }

    pub fn grapheme_chars(&self) -> Vec<char> {
        self.graphemes.chars().collect()
    }

    pub fn slu_alphabet(&self) -> Result<OutputAlphabet, CodecError> {
        OutputAlphabet::slu(&self.grapheme_chars(), &self.inventory())
    }

    /// Distinct words any system prompt can contain.
    pub fn system_vocabulary(&self) -> BTreeSet<String> {
        let mut v: BTreeSet<String> = self.prompt_openers.iter().flat_map(|o| words(o)).collect();
        v.extend(self.concepts.iter().map(|c| c.keyword.clone()));
        v.insert(self.prompt_joiner.clone());
        v
    }

    /// Distinct words any user utterance can contain.
    pub fn user_vocabulary(&self) -> BTreeSet<String> {
        let mut v: BTreeSet<String> = self.user_fillers.iter().cloned().collect();
        v.extend(self.concepts.iter().flat_map(|c| c.values.iter().cloned()));
        v
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(m));
        if self.n_dialogs < 3 {
            return bad("need at least 3 dialogs for a train/dev/test split".into());
        }
        if self.max_turns == 0 {
            return bad("max_turns must be positive".into());
        }
        if self.max_prompt_concepts == 0 || self.max_prompt_concepts > self.concepts.len() {
            return bad("max_prompt_concepts must lie in 1..=number of concepts".into());
        }
        if !(0.0..=1.0).contains(&self.rho) || !(0.0..=1.0).contains(&self.background_rate) {
            return bad("rho and background_rate must lie in [0, 1]".into());
        }
        if self.concepts.is_empty() || self.prompt_openers.is_empty() || self.user_fillers.is_empty() {
            return bad("concepts, prompt openers and user fillers must be non-empty".into());
        }
        let mut tags = BTreeSet::new();
        let mut keywords = BTreeSet::new();
        for c in &self.concepts {
            if !tags.insert(&c.tag) {
                return bad(format!("duplicate concept {:?}", c.tag));
            }
            if !keywords.insert(&c.keyword) {
                return bad(format!("duplicate prompt keyword {:?}", c.keyword));
            }
            if c.values.is_empty() {
                return bad(format!("concept {:?} has no values", c.tag));
            }
        }
        let openers: BTreeSet<String> = self.prompt_openers.iter().flat_map(|o| words(o)).collect();
        if let Some(k) = keywords.iter().find(|k| openers.contains(k.as_str()) || **k == &self.prompt_joiner) {
            return bad(format!("prompt keyword {k:?} also used as a filler"));
        }
        let graphemes: BTreeSet<char> = self.graphemes.chars().collect();
        for w in self.user_vocabulary() {
            if let Some(c) = w.chars().find(|c| !graphemes.contains(c)) {
                return Err(CorpusError::UnknownChar(c));
            }
        }
        self.slu_alphabet()?;
        Ok(())
    }

    /// `P(user mentions c | c prompted or not)`.
    pub fn inclusion_probability(&self, prompted: bool) -> f64 {
        let base = (1.0 - self.rho) * self.background_rate;
        if prompted {
            self.rho + base
        } else {
            base
        }
    }
}

/// Generator and feature configuration stored in a corpus file header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct CorpusConfig {
    pub generator: GeneratorConfig,
    pub features: FeatureSynthConfig,
}

impl CorpusConfig {
    /// Hex SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// One system prompt and the user turn answering it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnRecord {
    pub dialog_id: usize,
    /// 0-based user-turn counter within the dialog.
    pub turn_index: usize,
    pub split: Split,
    pub system_prompt: Vec<String>,
    /// Concepts the prompt asks for (generation metadata, not stored in
    /// corpus files: recoverable from the prompt keywords).
    pub prompted: Vec<String>,
    pub user_transcript: TaggedTranscript,
    pub utterance_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub records: Vec<TurnRecord>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &TurnRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn hash(&self) -> String {
        self.config.hash()
    }

    pub fn alphabet(&self) -> Result<OutputAlphabet, CodecError> {
        self.config.generator.slu_alphabet()
    }

    pub fn inventory(&self) -> Vec<String> {
        self.config.generator.inventory()
    }

    pub fn feature_synth(&self) -> Result<FeatureSynth, CorpusError> {
        FeatureSynth::new(&self.config.features, &self.config.generator.grapheme_chars())
    }
}

/// Concepts named by a prompt's keywords, in inventory order.
pub fn prompted_concepts(config: &GeneratorConfig, prompt: &[String]) -> Vec<String> {
    config
        .concepts
        .iter()
        .filter(|c| prompt.contains(&c.keyword))
        .map(|c| c.tag.clone())
        .collect()
}

fn sample_prompt(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (Vec<String>, Vec<usize>) {
    let k = rng.random_range(1..=cfg.max_prompt_concepts);
    let mut chosen: Vec<usize> = rand::seq::index::sample(rng, cfg.concepts.len(), k).into_vec();
    let mut prompt = words(cfg.prompt_openers.choose(rng).expect("non-empty openers"));
    for (i, &c) in chosen.iter().enumerate() {
        if i > 0 {
            prompt.push(cfg.prompt_joiner.clone());
        }
        prompt.push(cfg.concepts[c].keyword.clone());
    }
    chosen.sort_unstable();
    (prompt, chosen)
}

fn sample_user(cfg: &GeneratorConfig, prompted: &[usize], rng: &mut ChaCha8Rng) -> TaggedTranscript {
    let mut mentioned: Vec<usize> = (0..cfg.concepts.len())
        .filter(|i| rng.random_bool(cfg.inclusion_probability(prompted.contains(i))))
        .collect();
    mentioned.shuffle(rng);
    let filler = |rng: &mut ChaCha8Rng| Token::Word(cfg.user_fillers.choose(rng).expect("fillers").clone());
    let mut tokens = Vec::new();
    if mentioned.is_empty() {
        for _ in 0..rng.random_range(1..=2) {
            tokens.push(filler(rng));
        }
    }
    for &c in &mentioned {
        if rng.random_bool(0.5) {
            tokens.push(filler(rng));
        }
        let spec = &cfg.concepts[c];
        tokens.push(Token::Open(spec.tag.clone()));
        tokens.push(Token::Word(spec.values.choose(rng).expect("values").clone()));
        tokens.push(Token::Close);
    }
    TaggedTranscript::from_tokens(tokens).expect("generated transcript is well-formed")
}

fn generate_once(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Vec<TurnRecord> {
    let mut order: Vec<usize> = (0..cfg.n_dialogs).collect();
    order.shuffle(rng);
    let n_train = (cfg.n_dialogs * 7 / 10).max(1);
    let n_dev = (cfg.n_dialogs / 10).max(1);
    let mut split_of = vec![Split::Test; cfg.n_dialogs];
    for (rank, &d) in order.iter().enumerate() {
        split_of[d] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
    }
    let mut records = Vec::new();
    for (dialog_id, &split) in split_of.iter().enumerate() {
        let turns = rng.random_range(1..=cfg.max_turns);
        for turn_index in 0..turns {
            let (system_prompt, prompted) = sample_prompt(cfg, rng);
            let user_transcript = sample_user(cfg, &prompted, rng);
            records.push(TurnRecord {
                dialog_id,
                turn_index,
                split,
                system_prompt,
                prompted: prompted.iter().map(|&i| cfg.concepts[i].tag.clone()).collect(),
                user_transcript,
                utterance_seed: rng.random(),
            });
        }
    }
    records
}

/// Fraction of train user turns mentioning each inventory concept.
pub fn train_marginals(cfg: &GeneratorConfig, records: &[TurnRecord]) -> Vec<f64> {
    let train: Vec<&TurnRecord> = records.iter().filter(|r| r.split == Split::Train).collect();
    cfg.concepts
        .iter()
        .map(|c| {
            let hits = train.iter().filter(|r| r.user_transcript.tags().contains(&c.tag)).count();
            hits as f64 / train.len().max(1) as f64
        })
        .collect()
}

/// Generates the corpus; a draw whose train split misses the marginal floor
/// for some concept is discarded and the generator continues from the same
/// random stream.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus, CorpusError> {
    let cfg = &config.generator;
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..MAX_ATTEMPTS {
        let records = generate_once(cfg, &mut rng);
        if train_marginals(cfg, &records).iter().all(|&m| m >= cfg.min_marginal) {
            return Ok(Corpus {
                config: config.clone(),
                records,
            });
        }
    }
    Err(CorpusError::Marginals(MAX_ATTEMPTS))
}
