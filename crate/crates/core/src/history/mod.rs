//! Dialog-history embeddings (h-vectors) computed from the previous system
//! prompt, plus the reserved turn-index slice.

mod autoencoder;
mod predictor;

pub use autoencoder::PromptAutoencoder;
pub use predictor::{BagExample, PromptBagPredictor};

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AutodiffError, Bound, ParamSet, Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::codec::CodecError;
use crate::corpus::{Corpus, Split};
use crate::scalar::Scalar;
use crate::train::OptimConfig;

pub const HVECTOR_DIM: usize = 100;

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("target bag has {got} bits, target set has {expected}")]
    TargetMismatch { expected: usize, got: usize },
    #[error("extractor is untrained")]
    Untrained,
    #[error("max_turns must be at least 1")]
    ZeroMaxTurns,
    #[error("k = {k} exceeds inventory size {inventory}")]
    TooManyConcepts { k: usize, inventory: usize },
    #[error("h-vector dimension {0} too small")]
    BadDimension(usize),
    #[error("empty prompt")]
    EmptyPrompt,
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Reserved turn dims: `max(1, floor(0.02·dim))`.
pub fn turn_dims(dim: usize) -> usize {
    (dim / 50).max(1)
}

/// Turn slice of `n` dims: dim 0 = `min(turn/max_turns, 1)`, dim 1 =
/// `1` on the first turn else `0`, any further dims zero.
pub fn encode_turn_dims(turn: usize, max_turns: usize, n: usize) -> Result<Vec<f64>, HistoryError> {
    if max_turns == 0 {
        return Err(HistoryError::ZeroMaxTurns);
    }
    let mut v = vec![0.0; n];
    if n > 0 {
        v[0] = (turn as f64 / max_turns as f64).min(1.0);
    }
    if n > 1 {
        v[1] = if turn == 0 { 1.0 } else { 0.0 };
    }
    Ok(v)
}

/// Content dims followed by the turn slice.
#[derive(Clone, Debug, PartialEq)]
pub struct HVector {
    values: Vec<f64>,
}

impl HVector {
    pub fn new(content: Vec<f64>, turn: Vec<f64>) -> Result<Self, HistoryError> {
        let dim = content.len() + turn.len();
        if dim < 2 || turn.len() != turn_dims(dim) {
            return Err(HistoryError::BadDimension(dim));
        }
        let mut values = content;
        values.extend(turn);
        Ok(Self { values })
    }

    pub fn zero(dim: usize) -> Self {
        Self { values: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn content(&self) -> &[f64] {
        &self.values[..self.dim() - turn_dims(self.dim())]
    }

    pub fn turn(&self) -> &[f64] {
        &self.values[self.dim() - turn_dims(self.dim())..]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// The pretraining placeholder: all zeros.
pub fn zero_hvector() -> HVector {
    HVector::zero(HVECTOR_DIM)
}

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const RESERVED: [&str; 3] = ["<unk>", "<bos>", "<eos>"];

/// System-prompt word ids; unseen words map to `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptVocab {
    words: Vec<String>,
}

impl PromptVocab {
    /// Reserved tokens then the sorted distinct words of `prompts`.
    pub fn build<'a>(prompts: impl IntoIterator<Item = &'a [String]>) -> Self {
        let set: BTreeSet<&String> = prompts.into_iter().flatten().collect();
        let mut words: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        words.extend(set.into_iter().cloned());
        Self { words }
    }

    pub fn from_words(words: Vec<String>) -> Self {
        Self { words }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, w: &str) -> usize {
        self.words.iter().position(|x| x == w).unwrap_or(UNK)
    }

    pub fn ids(&self, prompt: &[String]) -> Vec<usize> {
        prompt.iter().map(|w| self.id(w)).collect()
    }

    /// Plain-word count (without the reserved tokens).
    pub fn content_words(&self) -> usize {
        self.words.len() - RESERVED.len()
    }
}

/// The `k` concepts with most errors; ties go to the earlier inventory entry.
pub fn select_freq_concepts(errors: &[usize], inventory: &[String], k: usize) -> Result<Vec<String>, HistoryError> {
    if k > inventory.len() {
        return Err(HistoryError::TooManyConcepts {
            k,
            inventory: inventory.len(),
        });
    }
    let mut order: Vec<usize> = (0..inventory.len()).collect();
    order.sort_by(|&a, &b| errors[b].cmp(&errors[a]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| inventory[i].clone()).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    SupervisedAll,
    SupervisedFreq,
    Unsupervised,
}

impl std::fmt::Display for ExtractorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::SupervisedAll => "supervised-all",
            Self::SupervisedFreq => "supervised-freq",
            Self::Unsupervised => "unsupervised",
        })
    }
}

impl std::str::FromStr for ExtractorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "supervised-all" => Ok(Self::SupervisedAll),
            "supervised-freq" => Ok(Self::SupervisedFreq),
            "unsupervised" => Ok(Self::Unsupervised),
            other => Err(format!("unknown extractor type {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExtractorConfig {
    pub dim: usize,
    pub emb_dim: usize,
    /// Per-direction width of the bag predictor's encoder.
    pub bag_hidden: usize,
    pub max_turns: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self {
            dim: HVECTOR_DIM,
            emb_dim: 10,
            bag_hidden: 24,
            max_turns: 15,
            epochs: 30,
            batch_size: 16,
            optim: OptimConfig::default(),
            seed: 1,
        }
    }
}

impl ExtractorConfig {
    pub fn content_dim(&self) -> usize {
        self.dim - turn_dims(self.dim)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss, evaluated after the epoch's updates.
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
}

/// Shuffled mini-batches of `0..n`.
pub(crate) fn batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

pub(crate) fn epoch_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A trained h-vector extractor of either family.
#[derive(Clone, Debug)]
pub enum Extractor<S: Scalar> {
    Bag(PromptBagPredictor<S>),
    Autoencoder(PromptAutoencoder<S>),
}

impl<S: Scalar> Extractor<S> {
    pub fn kind(&self) -> ExtractorKind {
        match self {
            Self::Bag(b) => b.kind,
            Self::Autoencoder(_) => ExtractorKind::Unsupervised,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Bag(b) => b.config.dim,
            Self::Autoencoder(a) => a.config.dim,
        }
    }

    pub fn extract(&self, prompt: &[String], turn: usize) -> Result<HVector, HistoryError> {
        match self {
            Self::Bag(b) => b.extract(prompt, turn),
            Self::Autoencoder(a) => a.extract(prompt, turn),
        }
    }

    /// The h-vector `[1, dim]` recorded on `tape` with the extractor's
    /// parameters bound as `bd`, so the SLU loss can reach them.
    pub fn hvector_var(&self, tape: &mut Tape<S>, bd: &Bound, prompt: &[String], turn: usize) -> Result<Var, HistoryError> {
        match self {
            Self::Bag(b) => b.hvector_var(tape, bd, &b.vocab.ids(prompt), turn),
            Self::Autoencoder(a) => a.hvector_var(tape, bd, &a.vocab.ids(prompt), turn),
        }
    }

    pub fn params(&self) -> &ParamSet<S> {
        match self {
            Self::Bag(b) => &b.params,
            Self::Autoencoder(a) => &a.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        match self {
            Self::Bag(b) => &mut b.params,
            Self::Autoencoder(a) => &mut a.params,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::Bag(b) => b.params.count(),
            Self::Autoencoder(a) => a.params.count(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        match self {
            Self::Bag(b) => b.to_checkpoint(),
            Self::Autoencoder(a) => a.to_checkpoint(),
        }
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, HistoryError> {
        let kind: ExtractorKind = c
            .get("extractor")?
            .parse()
            .map_err(|e: String| CheckpointError::Manifest(e))?;
        Ok(match kind {
            ExtractorKind::Unsupervised => Self::Autoencoder(PromptAutoencoder::from_checkpoint(c)?),
            _ => Self::Bag(PromptBagPredictor::from_checkpoint(c)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), HistoryError> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, HistoryError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Prompt vocabulary of the train split.
pub fn corpus_vocab(corpus: &Corpus) -> PromptVocab {
    PromptVocab::build(corpus.split(Split::Train).map(|r| r.system_prompt.as_slice()))
}

pub(crate) fn manifest_common(c: &mut Checkpoint, kind: ExtractorKind, vocab: &PromptVocab, cfg: &ExtractorConfig) {
    c.set("format", "HVSLU1")
        .set("kind", "extractor")
        .set("extractor", kind)
        .set("vocab", vocab.words().join(","))
        .set("dim", cfg.dim)
        .set("emb_dim", cfg.emb_dim)
        .set("bag_hidden", cfg.bag_hidden)
        .set("max_turns", cfg.max_turns)
        .set("seed", cfg.seed);
}

pub(crate) fn config_from_manifest(c: &Checkpoint) -> Result<(PromptVocab, ExtractorConfig), CheckpointError> {
    let vocab = PromptVocab::from_words(c.get("vocab")?.split(',').map(str::to_string).collect());
    let cfg = ExtractorConfig {
        dim: c.parse("dim")?,
        emb_dim: c.parse("emb_dim")?,
        bag_hidden: c.parse("bag_hidden")?,
        max_turns: c.parse("max_turns")?,
        seed: c.parse("seed")?,
        ..ExtractorConfig::default()
    };
    Ok((vocab, cfg))
}

pub(crate) fn hvector_from<S: Scalar>(
    content: &[S],
    turn: usize,
    cfg: &ExtractorConfig,
) -> Result<HVector, HistoryError> {
    let turn = encode_turn_dims(turn, cfg.max_turns, turn_dims(cfg.dim))?;
    HVector::new(content.iter().map(|v| v.to_f64_lossless()).collect(), turn)
}

/// Appends the constant turn slice to a `[1, content]` node.
pub(crate) fn with_turn_var<S: Scalar>(
    tape: &mut Tape<S>,
    content: Var,
    turn: usize,
    cfg: &ExtractorConfig,
) -> Result<Var, HistoryError> {
    let n = turn_dims(cfg.dim);
    let t = encode_turn_dims(turn, cfg.max_turns, n)?;
    let t = tape.constant_from(vec![1, n], t.into_iter().map(S::lit).collect())?;
    Ok(tape.concat_last(&[content, t])?)
}
