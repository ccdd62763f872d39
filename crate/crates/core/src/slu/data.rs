use crate::autodiff::Tensor;
use crate::codec::{encode_text, encode_transcript, AlphabetMode, OutputAlphabet, TaggedTranscript};
use crate::corpus::{Corpus, Split};
use crate::scalar::Scalar;

use super::SluError;

/// One user turn ready for training or decoding.
#[derive(Clone, Debug)]
pub struct Utterance<S> {
    /// Position of the record in the corpus.
    pub index: usize,
    pub features: Tensor<S>,
    /// CTC targets in the model's alphabet.
    pub labels: Vec<usize>,
    pub reference: TaggedTranscript,
    pub prompt: Vec<String>,
    pub turn: usize,
}

impl<S: Scalar> Utterance<S> {
    pub fn frames(&self) -> usize {
        self.features.shape().get(1).copied().unwrap_or(0)
    }
}

/// Synthesizes features for every record of `split` and encodes its
/// transcript as SLU (concept markers) or ASR (plain text) targets,
/// following the alphabet's mode.
pub fn prepare_split<S: Scalar>(
    corpus: &Corpus,
    split: Split,
    alphabet: &OutputAlphabet,
) -> Result<Vec<Utterance<S>>, SluError> {
    let synth = corpus.feature_synth()?;
    corpus
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .map(|(index, r)| {
            let text = r.user_transcript.plain_text();
            let labels = match alphabet.mode() {
                AlphabetMode::Slu => encode_transcript(alphabet, &r.user_transcript)?,
                AlphabetMode::Asr => encode_text(alphabet, &text)?,
            };
            Ok(Utterance {
                index,
                features: synth.synthesize(&text, r.utterance_seed)?,
                labels,
                reference: r.user_transcript.clone(),
                prompt: r.system_prompt.clone(),
                turn: r.turn_index,
            })
        })
        .collect()
}
