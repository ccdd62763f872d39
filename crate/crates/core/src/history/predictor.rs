use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, ParamSet, Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::codec::{bag_of_concepts, BagOfConcepts};
use crate::corpus::{Corpus, Split};
use crate::layers::{BiRecurrentLayer, CellKind, Dense, Embedding};
use crate::scalar::Scalar;
use crate::train::{evaluate, train_batch};

use super::{
    batches, config_from_manifest, epoch_rng, hvector_from, manifest_common, with_turn_var,
    EpochMetrics, ExtractorConfig, ExtractorKind, HVector, HistoryError, PromptVocab,
};

/// One training pair: prompt ids, turn index and the next user turn's bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagExample {
    pub prompt: Vec<usize>,
    pub turn: usize,
    pub target: BagOfConcepts,
}

/// Predicts the bag of concepts of the next user turn from the system
/// prompt. Embedding → bidirectional GRU → tanh projection (the h-vector
/// content) → concatenated turn slice → sigmoid decision layer.
#[derive(Clone, Debug)]
pub struct PromptBagPredictor<S: Scalar> {
    pub kind: ExtractorKind,
    pub vocab: PromptVocab,
    /// Concept tags of the decision layer, in inventory order.
    pub targets: Vec<String>,
    pub config: ExtractorConfig,
    pub params: ParamSet<S>,
    emb: Embedding,
    encoder: BiRecurrentLayer,
    proj: Dense,
    decision: Dense,
    trained: bool,
}

impl<S: Scalar> PromptBagPredictor<S> {
    pub fn new(kind: ExtractorKind, vocab: PromptVocab, targets: Vec<String>, config: ExtractorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let emb = Embedding::new(&mut params, "emb", vocab.len(), config.emb_dim, &mut rng);
        let encoder = BiRecurrentLayer::new(CellKind::Gru, &mut params, "enc", config.emb_dim, config.bag_hidden, &mut rng);
        let proj = Dense::new(&mut params, "proj", encoder.output_dim(), config.content_dim(), &mut rng);
        let decision = Dense::new(&mut params, "decision", config.dim, targets.len(), &mut rng);
        Self {
            kind,
            vocab,
            targets,
            config,
            params,
            emb,
            encoder,
            proj,
            decision,
            trained: false,
        }
    }

    /// Closed-form parameter count for a vocabulary of `v` and `k` targets.
    pub fn param_count(cfg: &ExtractorConfig, v: usize, k: usize) -> usize {
        Embedding::param_count(v, cfg.emb_dim)
            + BiRecurrentLayer::param_count(CellKind::Gru, cfg.emb_dim, cfg.bag_hidden)
            + Dense::param_count(2 * cfg.bag_hidden, cfg.content_dim())
            + Dense::param_count(cfg.dim, k)
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// The tanh-activated embedding `[1, content_dim]`.
    pub fn content_var(&self, tape: &mut Tape<S>, bd: &Bound, ids: &[usize]) -> Result<Var, HistoryError> {
        if ids.is_empty() {
            return Err(HistoryError::EmptyPrompt);
        }
        let x = self.emb.forward(tape, bd, ids)?;
        let (fwd, bwd) = self.encoder.run_both(tape, bd, x)?;
        // Backward pass's final state is the one at t = 0.
        let summary = tape.concat_last(&[fwd.last, bwd.last])?;
        let p = self.proj.forward(tape, bd, summary)?;
        Ok(tape.tanh(p)?)
    }

    /// Full h-vector `[1, dim]` (content then turn slice).
    pub fn hvector_var(&self, tape: &mut Tape<S>, bd: &Bound, ids: &[usize], turn: usize) -> Result<Var, HistoryError> {
        let content = self.content_var(tape, bd, ids)?;
        with_turn_var(tape, content, turn, &self.config)
    }

    pub fn logits_var(&self, tape: &mut Tape<S>, bd: &Bound, ids: &[usize], turn: usize) -> Result<Var, HistoryError> {
        let h = self.hvector_var(tape, bd, ids, turn)?;
        Ok(self.decision.forward(tape, bd, h)?)
    }

    fn loss_var(&self, tape: &mut Tape<S>, bd: &Bound, ex: &BagExample) -> Result<Var, HistoryError> {
        if ex.target.len() != self.targets.len() {
            return Err(HistoryError::TargetMismatch {
                expected: self.targets.len(),
                got: ex.target.len(),
            });
        }
        let logits = self.logits_var(tape, bd, &ex.prompt, ex.turn)?;
        Ok(tape.bce_with_logits(logits, &ex.target.as_targets::<S>())?)
    }

    /// Predicted bag (each sigmoid output thresholded at 0.5).
    pub fn predict(&self, ids: &[usize], turn: usize) -> Result<BagOfConcepts, HistoryError> {
        let mut tape = Tape::new();
        let bd = self.params.bind_frozen(&mut tape)?;
        let logits = self.logits_var(&mut tape, &bd, ids, turn)?;
        Ok(BagOfConcepts {
            bits: tape.value(logits).iter().map(|&z| z > S::zero()).collect(),
        })
    }

    /// Fraction of examples whose whole predicted bag matches the target.
    pub fn subset_accuracy(&self, examples: &[BagExample]) -> Result<f64, HistoryError> {
        if examples.is_empty() {
            return Ok(f64::NAN);
        }
        let mut hits = 0usize;
        for ex in examples {
            hits += usize::from(self.predict(&ex.prompt, ex.turn)? == ex.target);
        }
        Ok(hits as f64 / examples.len() as f64)
    }

    /// Per-target F1 (NaN where a target never occurs and is never predicted).
    pub fn per_concept_f1(&self, examples: &[BagExample]) -> Result<Vec<f64>, HistoryError> {
        let k = self.targets.len();
        let (mut tp, mut fp, mut fn_) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
        for ex in examples {
            let p = self.predict(&ex.prompt, ex.turn)?;
            for i in 0..k {
                match (p.bits[i], ex.target.bits[i]) {
                    (true, true) => tp[i] += 1,
                    (true, false) => fp[i] += 1,
                    (false, true) => fn_[i] += 1,
                    _ => {}
                }
            }
        }
        Ok((0..k)
            .map(|i| {
                let d = 2 * tp[i] + fp[i] + fn_[i];
                if d == 0 {
                    f64::NAN
                } else {
                    2.0 * tp[i] as f64 / d as f64
                }
            })
            .collect())
    }

    /// Mean summed-BCE over `examples` with frozen weights.
    pub fn mean_loss(&self, examples: &[BagExample]) -> Result<f64, HistoryError> {
        let idx: Vec<usize> = (0..examples.len()).collect();
        let s = evaluate(&self.params, &idx, |tape, bd, i| self.loss_var(tape, bd, &examples[i]).map(Some))?;
        Ok(s.mean_loss())
    }

    /// Mini-batch training on summed BCE averaged over pairs.
    pub fn train(&mut self, train: &[BagExample], heldout: &[BagExample]) -> Result<Vec<EpochMetrics>, HistoryError> {
        if train.is_empty() {
            return Err(HistoryError::EmptyTrainingSet);
        }
        for ex in train.iter().chain(heldout) {
            if ex.target.len() != self.targets.len() {
                return Err(HistoryError::TargetMismatch {
                    expected: self.targets.len(),
                    got: ex.target.len(),
                });
            }
        }
        let mut opt = self.config.optim.state::<S>();
        let mut rng = epoch_rng(self.config.seed);
        let mut log = Vec::with_capacity(self.config.epochs);
        for epoch in 1..=self.config.epochs {
            for batch in batches(train.len(), self.config.batch_size, &mut rng) {
                let model = self.clone_structure();
                train_batch(&mut self.params, &mut opt, self.config.optim.clip_norm, &batch, |tape, bd, i| {
                    model.loss_var(tape, bd, &train[i]).map(Some)
                })?;
            }
            log.push(EpochMetrics {
                epoch,
                train_loss: self.mean_loss(train)?,
                train_accuracy: self.subset_accuracy(train)?,
                heldout_accuracy: self.subset_accuracy(heldout)?,
            });
        }
        self.trained = true;
        Ok(log)
    }

    /// Same layer handles with no parameters, for borrowing during updates.
    fn clone_structure(&self) -> Self {
        Self {
            kind: self.kind,
            vocab: self.vocab.clone(),
            targets: self.targets.clone(),
            config: self.config.clone(),
            params: ParamSet::new(),
            emb: self.emb.clone(),
            encoder: self.encoder.clone(),
            proj: self.proj.clone(),
            decision: self.decision.clone(),
            trained: self.trained,
        }
    }

    pub fn extract(&self, prompt: &[String], turn: usize) -> Result<HVector, HistoryError> {
        if !self.trained {
            return Err(HistoryError::Untrained);
        }
        let mut tape = Tape::new();
        let bd = self.params.bind_frozen(&mut tape)?;
        let content = self.content_var(&mut tape, &bd, &self.vocab.ids(prompt))?;
        hvector_from(tape.value(content), turn, &self.config)
    }

    /// Training pairs of `split`: each prompt with its answer's bag
    /// restricted to this predictor's targets.
    pub fn examples(&self, corpus: &Corpus, split: Split) -> Result<Vec<BagExample>, HistoryError> {
        corpus
            .split(split)
            .map(|r| {
                Ok(BagExample {
                    prompt: self.vocab.ids(&r.system_prompt),
                    turn: r.turn_index,
                    target: bag_of_concepts(&r.user_transcript.tags(), &corpus.inventory())
                        .map(|b| b.select(&self.target_positions(&corpus.inventory())))?,
                })
            })
            .collect()
    }

    fn target_positions(&self, inventory: &[String]) -> Vec<usize> {
        self.targets
            .iter()
            .map(|t| inventory.iter().position(|c| c == t).expect("target in inventory"))
            .collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        manifest_common(&mut c, self.kind, &self.vocab, &self.config);
        c.set("targets", self.targets.join(","));
        c.add_params("", &self.params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, HistoryError> {
        let kind: ExtractorKind = c.get("extractor")?.parse().map_err(CheckpointError::Manifest)?;
        let (vocab, config) = config_from_manifest(c)?;
        let targets: Vec<String> = c.get("targets")?.split(',').filter(|s| !s.is_empty()).map(str::to_string).collect();
        let mut m = Self::new(kind, vocab, targets, config);
        c.load_params("", &mut m.params)?;
        c.check_no_extra("", &m.params)?;
        m.trained = true;
        Ok(m)
    }
}
