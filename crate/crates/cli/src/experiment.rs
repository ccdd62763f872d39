//! In-memory experiment drivers. The subcommands and the acceptance suite
//! both go through these, so a command-line run and an in-process run with
//! the same configuration produce the same numbers.

use anyhow::{anyhow, Result};
use hvslu::checkpoint::Checkpoint;
use hvslu::codec::OutputAlphabet;
use hvslu::corpus::{Corpus, Split};
use hvslu::history::{
    corpus_vocab, select_freq_concepts, EpochMetrics, Extractor, ExtractorConfig, ExtractorKind, PromptAutoencoder,
    PromptBagPredictor,
};
use hvslu::slu::{
    evaluate_split, prepare_split, start_model, train_model, HSource, ModelConfig, Phase, SignalToConceptModel, SplitEval,
    TrainConfig, TrainReport, Utterance,
};

use crate::commands::{score, Hypotheses, ScoreReport};

/// A corpus with its three splits prepared for one alphabet.
pub struct Prepared<'c> {
    pub corpus: &'c Corpus,
    pub alphabet: OutputAlphabet,
    pub train: Vec<Utterance<f64>>,
    pub dev: Vec<Utterance<f64>>,
    pub test: Vec<Utterance<f64>>,
}

impl<'c> Prepared<'c> {
    pub fn new(corpus: &'c Corpus, alphabet: OutputAlphabet) -> Result<Self> {
        Ok(Self {
            train: prepare_split(corpus, Split::Train, &alphabet)?,
            dev: prepare_split(corpus, Split::Dev, &alphabet)?,
            test: prepare_split(corpus, Split::Test, &alphabet)?,
            corpus,
            alphabet,
        })
    }

    pub fn slu(corpus: &'c Corpus) -> Result<Self> {
        Self::new(corpus, corpus.alphabet()?)
    }

    /// Splits encoded for the output alphabet `phase` trains on.
    pub fn for_phase(corpus: &'c Corpus, phase: Phase) -> Result<Self> {
        let alphabet = corpus.alphabet()?;
        if phase == Phase::TransferAsr {
            Self::new(corpus, alphabet.to_asr())
        } else {
            Self::new(corpus, alphabet)
        }
    }

    pub fn utterances(&self, split: Split) -> &[Utterance<f64>] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Decodes `split` and scores it against the corpus references.
    pub fn score(&self, model: &SignalToConceptModel<f64>, h: &HSource<f64>, split: Split, name: &str) -> Result<Scored> {
        let utts = self.utterances(split);
        let eval = evaluate_split(model, utts, h)?;
        let hyps = Hypotheses {
            corpus_hash: self.corpus.hash(),
            split,
            records: utts.iter().map(|u| u.index).zip(eval.hypotheses.iter().cloned()).collect(),
        };
        let report = score(self.corpus, &hyps, name)?;
        Ok(Scored { eval, hyps, report })
    }
}

pub struct Scored {
    pub eval: SplitEval,
    pub hyps: Hypotheses,
    pub report: ScoreReport,
}

/// Trains an extractor of `kind`. The frequent-error variant needs the
/// baseline's per-concept error counts (inventory order).
pub fn train_extractor(
    corpus: &Corpus,
    kind: ExtractorKind,
    config: ExtractorConfig,
    freq: Option<(&[usize], usize)>,
) -> Result<(Extractor<f64>, Vec<EpochMetrics>)> {
    let vocab = corpus_vocab(corpus);
    if kind == ExtractorKind::Unsupervised {
        let mut m = PromptAutoencoder::new(vocab.clone(), config);
        let ids = |s| corpus.split(s).map(|r| vocab.ids(&r.system_prompt)).collect::<Vec<_>>();
        let log = m.train(&ids(Split::Train), &ids(Split::Dev))?;
        return Ok((Extractor::Autoencoder(m), log));
    }
    let inventory = corpus.inventory();
    let targets = match kind {
        ExtractorKind::SupervisedFreq => {
            let (errors, k) = freq.ok_or_else(|| anyhow!("supervised-freq needs baseline concept errors"))?;
            select_freq_concepts(errors, &inventory, k)?
        }
        _ => inventory,
    };
    let mut m = PromptBagPredictor::new(kind, vocab, targets, config);
    let train = m.examples(corpus, Split::Train)?;
    let dev = m.examples(corpus, Split::Dev)?;
    let log = m.train(&train, &dev)?;
    Ok((Extractor::Bag(m), log))
}

/// Builds the starting model of `cfg.phase` and trains it.
pub fn train_phase(
    data: &Prepared,
    model: &ModelConfig,
    cfg: &TrainConfig,
    h: &mut HSource<f64>,
    source: Option<&Checkpoint>,
) -> Result<(SignalToConceptModel<f64>, TrainReport)> {
    let mut m = start_model(cfg.phase, model, &data.alphabet, source)?;
    if m.alphabet != data.alphabet {
        return Err(anyhow!("phase {} trains on a different alphabet than the prepared data", cfg.phase));
    }
    let report = train_model(&mut m, &data.train, &data.dev, h, cfg)?;
    Ok((m, report))
}

/// Fraction of examples whose target bag is empty: the subset accuracy of
/// always predicting the empty bag.
pub fn empty_bag_accuracy(p: &PromptBagPredictor<f64>, corpus: &Corpus, split: Split) -> Result<f64> {
    let ex = p.examples(corpus, split)?;
    if ex.is_empty() {
        return Err(anyhow!("no {split} examples"));
    }
    Ok(ex.iter().filter(|e| e.target.count() == 0).count() as f64 / ex.len() as f64)
}
