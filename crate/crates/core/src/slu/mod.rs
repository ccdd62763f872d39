//! End-to-end signal-to-concept network: convolution over the feature map,
//! h-vector injection, bidirectional recurrent stack, dense output layer
//! and log-softmax, trained with CTC.

mod data;
mod model;
mod schedule;

pub use data::{prepare_split, Utterance};
pub use model::{ConvSpec, HInput, ModelConfig, Preset, SignalToConceptModel};
pub use schedule::{
    evaluate_split, start_model, train_model, transfer_swap_softmax, EpochLog, HSource, Phase, SplitEval, TrainConfig, TrainReport,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::checkpoint::CheckpointError;
use crate::codec::CodecError;
use crate::corpus::CorpusError;
use crate::ctc::CtcError;
use crate::eval::EvalError;
use crate::history::HistoryError;

#[derive(Debug, Error)]
pub enum SluError {
    #[error("h-vector has {got} dims, model expects {expected}")]
    HDimMismatch { expected: usize, got: usize },
    #[error("model has injection {0}, but an h-vector was {1}")]
    InjectionMismatch(&'static str, &'static str),
    #[error("feature dim {got} does not match model input {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("input of {frames} frames is too short for the convolution stack")]
    TooShort { frames: usize },
    #[error("alphabet {asr:?} is not a prefix of {sf:?}")]
    NotPrefix { asr: String, sf: String },
    #[error("{0}")]
    Schedule(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Ctc(#[from] CtcError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}
