use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamSet, Tensor};
use crate::checkpoint::Checkpoint;
use crate::codec::{Decoded, OutputAlphabet};
use crate::ctc::{ctc_loss, ctc_loss_var, greedy_decode, CtcError};
use crate::codec::decode_symbols;
use crate::eval::{cer, cver};
use crate::history::{Extractor, HVector};
use crate::layers::{uniform_init, BatchNormMode};
use crate::scalar::Scalar;
use crate::train::{train_batch_multi, OptimConfig};

use super::{HInput, ModelConfig, SignalToConceptModel, SluError, Utterance};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Direct,
    PretrainZero,
    Finetune,
    TransferAsr,
    TransferSf,
}

impl Phase {
    /// Phase whose checkpoint this phase starts from, if any.
    pub fn source(self) -> Option<Phase> {
        match self {
            Self::Finetune => Some(Self::PretrainZero),
            Self::TransferSf => Some(Self::TransferAsr),
            _ => None,
        }
    }

    /// Phases trained with the zero h-vector regardless of any extractor.
    pub fn zero_only(self) -> bool {
        matches!(self, Self::PretrainZero | Self::TransferAsr)
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Self::Direct => 40,
            _ => 30,
        }
    }
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Direct => "direct",
            Self::PretrainZero => "pretrain_zero",
            Self::Finetune => "finetune",
            Self::TransferAsr => "transfer_asr",
            Self::TransferSf => "transfer_sf",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(Self::Direct),
            "pretrain_zero" => Ok(Self::PretrainZero),
            "finetune" => Ok(Self::Finetune),
            "transfer_asr" => Ok(Self::TransferAsr),
            "transfer_sf" => Ok(Self::TransferSf),
            other => Err(format!("unknown phase {other:?}")),
        }
    }
}

/// Where each utterance's h-vector comes from.
#[derive(Clone, Debug)]
pub enum HSource<S: Scalar> {
    /// The all-zero placeholder.
    Zero,
    /// A trained extractor applied to the previous system prompt. With
    /// `joint`, the SLU loss also updates the extractor.
    Extractor { extractor: Extractor<S>, joint: bool },
}

impl<S: Scalar> HSource<S> {
    pub fn vector(&self, dim: usize, prompt: &[String], turn: usize) -> Result<HVector, SluError> {
        match self {
            Self::Zero => Ok(HVector::zero(dim)),
            Self::Extractor { extractor, .. } => {
                let h = extractor.extract(prompt, turn)?;
                if h.dim() != dim {
                    return Err(SluError::HDimMismatch {
                        expected: dim,
                        got: h.dim(),
                    });
                }
                Ok(h)
            }
        }
    }

    fn is_joint(&self) -> bool {
        matches!(self, Self::Extractor { joint: true, .. })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimConfig,
    /// Seed of the batch order.
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(phase: Phase, seed: u64) -> Self {
        Self {
            phase,
            epochs: phase.default_epochs(),
            batch_size: 4,
            optim: OptimConfig::default(),
            seed,
        }
    }
}

/// Metrics after `epoch` updates (epoch 0 = before training).
#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-utterance training loss over the epoch's batches (none for
    /// epoch 0).
    pub train_loss: Option<f64>,
    pub train_skipped: usize,
    pub dev_loss: f64,
    pub dev_cer: f64,
    pub dev_cver: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Infeasible CTC instances skipped over the whole run.
    pub skipped: usize,
}

impl TrainReport {
    pub fn last(&self) -> &EpochLog {
        self.log.last().expect("log has epoch 0")
    }
}

/// Loss and decode of a frozen model over one split.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitEval {
    /// Mean CTC loss over the feasible utterances.
    pub loss: f64,
    pub skipped: usize,
    pub cer: f64,
    pub cver: f64,
    pub hypotheses: Vec<Decoded>,
}

/// One inference pass per utterance yielding loss and greedy decode.
pub fn evaluate_split<S: Scalar>(
    model: &SignalToConceptModel<S>,
    utts: &[Utterance<S>],
    h: &HSource<S>,
) -> Result<SplitEval, SluError> {
    let a = model.alphabet.len();
    let blank = model.alphabet.blank_id();
    let (mut loss, mut used, mut skipped) = (0.0, 0usize, 0usize);
    let mut hypotheses = Vec::with_capacity(utts.len());
    for u in utts {
        let lp = forward_eval(model, u, h)?;
        match ctc_loss(lp.values(), a, &u.labels, blank) {
            Ok(out) => {
                loss += out.loss.to_f64_lossless();
                used += 1;
            }
            Err(CtcError::Infeasible { .. }) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
        let ids = greedy_decode(lp.values(), a, blank);
        hypotheses.push(decode_symbols(&model.alphabet, &ids));
    }
    let refs: Vec<Vec<String>> = utts.iter().map(|u| u.reference.tags()).collect();
    let hyps: Vec<Vec<String>> = hypotheses.iter().map(Decoded::tags).collect();
    let ref_pairs: Vec<_> = utts.iter().map(|u| u.reference.concept_pairs()).collect();
    let hyp_pairs: Vec<_> = hypotheses.iter().map(|d| d.concepts.clone()).collect();
    Ok(SplitEval {
        loss: if used == 0 { f64::NAN } else { loss / used as f64 },
        skipped,
        cer: cer(&refs, &hyps)?,
        cver: cver(&ref_pairs, &hyp_pairs)?,
        hypotheses,
    })
}

fn forward_eval<S: Scalar>(
    model: &SignalToConceptModel<S>,
    u: &Utterance<S>,
    h: &HSource<S>,
) -> Result<Tensor<S>, SluError> {
    if model.config().injection {
        let v = h.vector(model.config().hvec_dim, &u.prompt, u.turn)?;
        model.log_probs(&u.features, HInput::Vector(&v))
    } else {
        model.log_probs(&u.features, HInput::Off)
    }
}

/// Batches of similar length: indices sorted by frame count, then chunked.
fn length_buckets<S: Scalar>(utts: &[Utterance<S>], batch_size: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..utts.len()).collect();
    order.sort_by_key(|&i| (utts[i].frames(), i));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// CTC training of `model` on `train`, evaluating on `dev` before the first
/// and after every epoch. A fresh optimizer is created for the run.
pub fn train_model<S: Scalar>(
    model: &mut SignalToConceptModel<S>,
    train: &[Utterance<S>],
    dev: &[Utterance<S>],
    h: &mut HSource<S>,
    cfg: &TrainConfig,
) -> Result<TrainReport, SluError> {
    if train.is_empty() {
        return Err(SluError::Schedule("empty training split".into()));
    }
    if cfg.phase.zero_only() && !matches!(h, HSource::Zero) {
        return Err(SluError::Schedule(format!("phase {} trains with zero h-vectors", cfg.phase)));
    }
    let dim = model.config().hvec_dim;
    let injection = model.config().injection;
    // Constant h-vectors are computed once per run.
    let constant: Vec<Option<HVector>> = if injection && !h.is_joint() {
        train
            .iter()
            .map(|u| h.vector(dim, &u.prompt, u.turn).map(Some))
            .collect::<Result<_, _>>()?
    } else {
        vec![None; train.len()]
    };

    let first = evaluate_split(model, dev, h)?;
    let mut log = vec![EpochLog {
        epoch: 0,
        train_loss: None,
        train_skipped: 0,
        dev_loss: first.loss,
        dev_cer: first.cer,
        dev_cver: first.cver,
    }];
    let mut skipped = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let buckets = length_buckets(train, cfg.batch_size);
    let mut opt = cfg.optim.state::<S>();
    let mut ext_opt = cfg.optim.state::<S>();
    let blank = model.alphabet.blank_id();

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..buckets.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut used, mut epoch_skipped) = (0.0, 0, 0);
        let mut params = std::mem::replace(&mut model.params, ParamSet::new());
        let mut buffers = std::mem::replace(&mut model.buffers, ParamSet::new());
        let net = &model.net;
        let result = (|| -> Result<(), SluError> {
            for &b in &order {
                let batch = &buckets[b];
                let stats = match h {
                    HSource::Extractor {
                        extractor,
                        joint: true,
                    } => {
                        let mut ep = std::mem::replace(extractor.params_mut(), ParamSet::new());
                        let ext = &*extractor;
                        let r = train_batch_multi(
                            &mut [(&mut params, &mut opt), (&mut ep, &mut ext_opt)],
                            cfg.optim.clip_norm,
                            batch,
                            |tape, bds, i| {
                                let u = &train[i];
                                let hv = ext.hvector_var(tape, &bds[1], &u.prompt, u.turn)?;
                                let lp = net.forward(tape, &bds[0], &mut buffers, &u.features, HInput::Var(hv), BatchNormMode::Train)?;
                                feasible(ctc_loss_var(tape, lp, &u.labels, blank))
                            },
                        );
                        *extractor.params_mut() = ep;
                        r?
                    }
                    _ => train_batch_multi(&mut [(&mut params, &mut opt)], cfg.optim.clip_norm, batch, |tape, bds, i| {
                        let u = &train[i];
                        let hin = match &constant[i] {
                            Some(v) => HInput::Vector(v),
                            None => HInput::Off,
                        };
                        let lp = net.forward(tape, &bds[0], &mut buffers, &u.features, hin, BatchNormMode::Train)?;
                        feasible(ctc_loss_var(tape, lp, &u.labels, blank))
                    })?,
                };
                loss_sum += stats.loss_sum;
                used += stats.used;
                epoch_skipped += stats.skipped;
            }
            Ok(())
        })();
        model.params = params;
        model.buffers = buffers;
        result?;
        skipped += epoch_skipped;
        let ev = evaluate_split(model, dev, h)?;
        log.push(EpochLog {
            epoch,
            train_loss: (used > 0).then(|| loss_sum / used as f64),
            train_skipped: epoch_skipped,
            dev_loss: ev.loss,
            dev_cer: ev.cer,
            dev_cver: ev.cver,
        });
    }
    Ok(TrainReport { log, skipped })
}

fn feasible<V>(r: Result<V, CtcError>) -> Result<Option<V>, SluError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(CtcError::Infeasible { .. }) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Rebuilds the output layer of an ASR model for the SLU alphabet `sf`:
/// every parameter below the output layer and the output columns of the
/// shared symbols are copied; columns of the new symbols are freshly drawn
/// from `seed`.
pub fn transfer_swap_softmax<S: Scalar>(
    asr: &SignalToConceptModel<S>,
    sf: OutputAlphabet,
    seed: u64,
) -> Result<SignalToConceptModel<S>, SluError> {
    if !asr.alphabet.is_prefix_of(&sf) {
        return Err(SluError::NotPrefix {
            asr: asr.alphabet.listing(),
            sf: sf.listing(),
        });
    }
    let mut m = SignalToConceptModel::new(asr.config().clone(), sf);
    let (ow, ob) = m.output_layer();
    for id in m.params.ids().collect::<Vec<_>>() {
        if id == ow || id == ob {
            continue;
        }
        let name = m.params.name(id).to_string();
        let src = asr
            .params
            .find(&name)
            .ok_or_else(|| SluError::Schedule(format!("parameter {name} missing from ASR model")))?;
        let src = asr.params.get(src);
        if src.shape() != m.params.get(id).shape() {
            return Err(SluError::Schedule(format!("parameter {name} changed shape")));
        }
        m.params.get_mut(id).values_mut().copy_from_slice(src.values());
    }
    m.buffers = asr.buffers.clone();

    let (aw, ab) = asr.output_layer();
    let (a_old, a_new) = (asr.alphabet.len(), m.alphabet.len());
    let rows = asr.params.get(aw).shape()[0];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fresh_w = uniform_init::<S, _>(&mut rng, &[rows, a_new - a_old], rows);
    let fresh_b = uniform_init::<S, _>(&mut rng, &[a_new - a_old], rows);
    let old_w = asr.params.get(aw).values().to_vec();
    let w = m.params.get_mut(ow).values_mut();
    for r in 0..rows {
        w[r * a_new..r * a_new + a_old].copy_from_slice(&old_w[r * a_old..(r + 1) * a_old]);
        w[r * a_new + a_old..(r + 1) * a_new]
            .copy_from_slice(&fresh_w.values()[r * (a_new - a_old)..(r + 1) * (a_new - a_old)]);
    }
    let old_b = asr.params.get(ab).values().to_vec();
    let b = m.params.get_mut(ob).values_mut();
    b[..a_old].copy_from_slice(&old_b);
    b[a_old..].copy_from_slice(fresh_b.values());
    Ok(m)
}

/// Model a phase starts from: fresh for phases without a source, loaded
/// from (finetune) or swapped from (transfer_sf) the source checkpoint.
pub fn start_model<S: Scalar>(
    phase: Phase,
    config: &ModelConfig,
    alphabet: &OutputAlphabet,
    source: Option<&Checkpoint>,
) -> Result<SignalToConceptModel<S>, SluError> {
    match (phase.source(), source) {
        (None, None) => {
            let alphabet = if phase == Phase::TransferAsr {
                alphabet.to_asr()
            } else {
                alphabet.clone()
            };
            Ok(SignalToConceptModel::new(config.clone(), alphabet))
        }
        (None, Some(_)) => Err(SluError::Schedule(format!("phase {phase} takes no source checkpoint"))),
        (Some(want), None) => Err(SluError::Schedule(format!("phase {phase} needs a {want} checkpoint"))),
        (Some(want), Some(c)) => {
            let got = c.get("phase")?;
            if got != want.to_string() {
                return Err(SluError::Schedule(format!("phase {phase} needs a {want} checkpoint, got {got}")));
            }
            let src = SignalToConceptModel::from_checkpoint(c)?;
            if src.config() != config {
                return Err(crate::checkpoint::CheckpointError::Architecture(format!(
                    "source {:?} vs requested {:?}",
                    src.config(),
                    config
                ))
                .into());
            }
            match phase {
                Phase::Finetune => {
                    if src.alphabet != *alphabet {
                        return Err(crate::checkpoint::CheckpointError::Architecture("alphabet differs".into()).into());
                    }
                    Ok(src)
                }
                _ => transfer_swap_softmax(&src, alphabet.clone(), config.seed),
            }
        }
    }
}
