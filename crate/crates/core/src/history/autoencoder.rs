use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, ParamSet, Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::layers::{Cell, CellKind, Dense, Embedding, GruCell};
use crate::scalar::Scalar;
use crate::train::{evaluate, train_batch};

use super::{
    batches, config_from_manifest, epoch_rng, hvector_from, manifest_common, with_turn_var, EpochMetrics, ExtractorConfig,
    ExtractorKind, HVector, HistoryError, PromptVocab, BOS, EOS,
};

/// Sequence autoencoder over system prompts: a forward GRU encoder whose
/// final state is the h-vector content, and a forward GRU decoder started
/// from that code that reconstructs the prompt through a vocabulary softmax.
#[derive(Clone, Debug)]
pub struct PromptAutoencoder<S: Scalar> {
    pub vocab: PromptVocab,
    pub config: ExtractorConfig,
    pub params: ParamSet<S>,
    emb: Embedding,
    encoder: Cell,
    decoder: Cell,
    out: Dense,
    trained: bool,
}

impl<S: Scalar> PromptAutoencoder<S> {
    pub fn new(vocab: PromptVocab, config: ExtractorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let h = config.content_dim();
        let emb = Embedding::new(&mut params, "emb", vocab.len(), config.emb_dim, &mut rng);
        let encoder = Cell::Gru(GruCell::new(&mut params, "enc", config.emb_dim, h, &mut rng));
        let decoder = Cell::Gru(GruCell::new(&mut params, "dec", config.emb_dim, h, &mut rng));
        let out = Dense::new(&mut params, "out", h, vocab.len(), &mut rng);
        assert_eq!(encoder.hidden_dim(), decoder.hidden_dim());
        Self {
            vocab,
            config,
            params,
            emb,
            encoder,
            decoder,
            out,
            trained: false,
        }
    }

    pub fn param_count(cfg: &ExtractorConfig, v: usize) -> usize {
        Embedding::param_count(v, cfg.emb_dim)
            + 2 * Cell::param_count(CellKind::Gru, cfg.emb_dim, cfg.content_dim())
            + Dense::param_count(cfg.content_dim(), v)
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Encoder final state `[1, content_dim]`.
    pub fn code_var(&self, tape: &mut Tape<S>, bd: &Bound, ids: &[usize]) -> Result<Var, HistoryError> {
        if ids.is_empty() {
            return Err(HistoryError::EmptyPrompt);
        }
        let x = self.emb.forward(tape, bd, ids)?;
        Ok(self.encoder.run(tape, bd, x, false, None)?.last)
    }

    /// Code followed by the turn slice, `[1, dim]`.
    pub fn hvector_var(&self, tape: &mut Tape<S>, bd: &Bound, ids: &[usize], turn: usize) -> Result<Var, HistoryError> {
        let code = self.code_var(tape, bd, ids)?;
        with_turn_var(tape, code, turn, &self.config)
    }

    /// Teacher-forced decoder log-probs `[len + 1, V]`: inputs are `<bos>`
    /// followed by the prompt, targets the prompt followed by `<eos>`.
    fn decode_var(&self, tape: &mut Tape<S>, bd: &Bound, ids: &[usize]) -> Result<Var, HistoryError> {
        let code = self.code_var(tape, bd, ids)?;
        let mut inputs = vec![BOS];
        inputs.extend_from_slice(ids);
        let x = self.emb.forward(tape, bd, &inputs)?;
        let states = self.decoder.run(tape, bd, x, false, Some(code))?.states;
        let logits = self.out.forward(tape, bd, states)?;
        Ok(tape.log_softmax_rows(logits)?)
    }

    fn targets(ids: &[usize]) -> Vec<usize> {
        let mut t = ids.to_vec();
        t.push(EOS);
        t
    }

    /// Mean per-token negative log-likelihood of one prompt.
    fn loss_var(&self, tape: &mut Tape<S>, bd: &Bound, ids: &[usize]) -> Result<Var, HistoryError> {
        let lp = self.decode_var(tape, bd, ids)?;
        let targets = Self::targets(ids);
        let nll = tape.nll_rows(lp, &targets)?;
        Ok(tape.scale(nll, S::lit(1.0 / targets.len() as f64))?)
    }

    /// `(correct, total)` teacher-forced predictions over the prompt tokens
    /// (the `<eos>` step is not counted).
    pub fn reconstruction_counts(&self, ids: &[usize]) -> Result<(usize, usize), HistoryError> {
        let mut tape = Tape::new();
        let bd = self.params.bind_frozen(&mut tape)?;
        let lp = self.decode_var(&mut tape, &bd, ids)?;
        let v = self.vocab.len();
        let correct = tape
            .value(lp)
            .chunks(v)
            .zip(ids)
            .filter(|(row, &target)| {
                let best = row
                    .iter()
                    .enumerate()
                    .fold((0, S::neg_infinity()), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
                    .0;
                best == target
            })
            .count();
        Ok((correct, ids.len()))
    }

    /// Token-level teacher-forced reconstruction accuracy over `prompts`.
    pub fn reconstruction_accuracy(&self, prompts: &[Vec<usize>]) -> Result<f64, HistoryError> {
        let (mut c, mut n) = (0, 0);
        for p in prompts {
            let (ci, ni) = self.reconstruction_counts(p)?;
            c += ci;
            n += ni;
        }
        Ok(if n == 0 { f64::NAN } else { c as f64 / n as f64 })
    }

    pub fn mean_loss(&self, prompts: &[Vec<usize>]) -> Result<f64, HistoryError> {
        let idx: Vec<usize> = (0..prompts.len()).collect();
        let s = evaluate(&self.params, &idx, |tape, bd, i| self.loss_var(tape, bd, &prompts[i]).map(Some))?;
        Ok(s.mean_loss())
    }

    pub fn train(&mut self, train: &[Vec<usize>], heldout: &[Vec<usize>]) -> Result<Vec<EpochMetrics>, HistoryError> {
        if train.is_empty() {
            return Err(HistoryError::EmptyTrainingSet);
        }
        if train.iter().any(Vec::is_empty) {
            return Err(HistoryError::EmptyPrompt);
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
                train_accuracy: self.reconstruction_accuracy(train)?,
                heldout_accuracy: self.reconstruction_accuracy(heldout)?,
            });
        }
        self.trained = true;
        Ok(log)
    }

    fn clone_structure(&self) -> Self {
        Self {
            vocab: self.vocab.clone(),
            config: self.config.clone(),
            params: ParamSet::new(),
            emb: self.emb.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            out: self.out.clone(),
            trained: self.trained,
        }
    }

    pub fn extract(&self, prompt: &[String], turn: usize) -> Result<HVector, HistoryError> {
        if !self.trained {
            return Err(HistoryError::Untrained);
        }
        let mut tape = Tape::new();
        let bd = self.params.bind_frozen(&mut tape)?;
        let code = self.code_var(&mut tape, &bd, &self.vocab.ids(prompt))?;
        hvector_from(tape.value(code), turn, &self.config)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        manifest_common(&mut c, ExtractorKind::Unsupervised, &self.vocab, &self.config);
        c.add_params("", &self.params);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, HistoryError> {
        let (vocab, config) = config_from_manifest(c)?;
        let mut m = Self::new(vocab, config);
        c.load_params("", &mut m.params)?;
        c.check_no_extra("", &m.params)?;
        m.trained = true;
        Ok(m)
    }
}
