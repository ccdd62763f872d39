use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

use super::CorpusError;

/// Minimum Euclidean distance between any two prototypes.
pub const MIN_PROTOTYPE_DISTANCE: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSynthConfig {
    pub seed: u64,
    pub feature_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub noise_sigma: f64,
}

impl Default for FeatureSynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            feature_dim: 16,
            min_frames: 2,
            max_frames: 4,
            noise_sigma: 0.1,
        }
    }
}

/// Text-to-feature synthesizer: every character (space included) has a
/// Gaussian prototype vector that is repeated for a random duration and
/// perturbed with white noise.
#[derive(Clone, Debug)]
pub struct FeatureSynth {
    config: FeatureSynthConfig,
    symbols: Vec<char>,
    prototypes: Vec<Vec<f64>>,
}

impl FeatureSynth {
    /// Prototypes for `graphemes` plus the space character, drawn in that
    /// order from a stream seeded by `config.seed`; a draw closer than
    /// [`MIN_PROTOTYPE_DISTANCE`] to an earlier prototype is redrawn.
    pub fn new(config: &FeatureSynthConfig, graphemes: &[char]) -> Result<Self, CorpusError> {
        if config.feature_dim == 0 || config.min_frames == 0 || config.min_frames > config.max_frames {
            return Err(CorpusError::Config(format!("bad feature config {config:?}")));
        }
        if !(config.noise_sigma >= 0.0 && config.noise_sigma.is_finite()) {
            return Err(CorpusError::Config("noise_sigma must be finite and non-negative".into()));
        }
        let mut symbols = vec![' '];
        symbols.extend(graphemes.iter().copied().filter(|&c| c != ' '));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(symbols.len());
        while prototypes.len() < symbols.len() {
            let p: Vec<f64> = (0..config.feature_dim).map(|_| normal.sample(&mut rng)).collect();
            let far = prototypes.iter().all(|q| {
                q.iter().zip(&p).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= MIN_PROTOTYPE_DISTANCE
            });
            if far {
                prototypes.push(p);
            }
        }
        Ok(Self {
            config: config.clone(),
            symbols,
            prototypes,
        })
    }

    pub fn config(&self) -> &FeatureSynthConfig {
        &self.config
    }

    pub fn prototype(&self, c: char) -> Option<&[f64]> {
        self.symbols.iter().position(|&s| s == c).map(|i| self.prototypes[i].as_slice())
    }

    /// Features `[feature_dim, frames]` of `text`; a pure function of the
    /// config seed, `text` and `utterance_seed`.
    pub fn synthesize<S: Scalar>(&self, text: &str, utterance_seed: u64) -> Result<Tensor<S>, CorpusError> {
        let mut rng = ChaCha8Rng::seed_from_u64(utterance_seed);
        rng.set_stream(self.config.seed);
        let normal = Normal::new(0.0, self.config.noise_sigma.max(0.0)).expect("finite sigma");
        let mut frames: Vec<&[f64]> = Vec::new();
        for c in text.chars() {
            let proto = self.prototype(c).ok_or(CorpusError::UnknownChar(c))?;
            let d = rng.random_range(self.config.min_frames..=self.config.max_frames);
            frames.extend(std::iter::repeat_n(proto, d));
        }
        if frames.is_empty() {
            return Err(CorpusError::Config("cannot synthesize empty text".into()));
        }
        let dim = self.config.feature_dim;
        let t = frames.len();
        let mut values = vec![S::zero(); dim * t];
        for (j, proto) in frames.iter().enumerate() {
            for (i, &p) in proto.iter().enumerate() {
                let noise = if self.config.noise_sigma > 0.0 {
                    normal.sample(&mut rng)
                } else {
                    0.0
                };
                values[i * t + j] = S::lit(p + noise);
            }
        }
        Ok(Tensor::new(vec![dim, t], values).expect("finite features"))
    }
}
