use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Bound, ConvGeometry, ParamId, ParamSet, Tape, Tensor, Var};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::codec::{decode_symbols, Decoded, OutputAlphabet};
use crate::ctc::greedy_decode;
use crate::history::{HVector, HVECTOR_DIM};
use crate::layers::{uniform_init, BatchNormMode, BiRecurrentLayer, CellKind, Dense, SeqBatchNorm};
use crate::scalar::Scalar;

use super::SluError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Desk => "desk",
            Self::Paper => "paper",
        })
    }
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Paper),
            other => Err(format!("unknown preset {other:?} (expected desk or paper)")),
        }
    }
}

/// One convolution layer over `(freq, time)`, followed by a clipped ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub channels: usize,
    pub geometry: ConvGeometry,
}

impl std::fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let g = &self.geometry;
        write!(
            f,
            "{}:{}x{}:{}x{}:{}x{}",
            self.channels, g.kernel.0, g.kernel.1, g.stride.0, g.stride.1, g.padding.0, g.padding.1
        )
    }
}

impl std::str::FromStr for ConvSpec {
    type Err = String;

    /// `channels:KFxKT:SFxST:PFxPT`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad conv spec {s:?}");
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 4 {
            return Err(bad());
        }
        let pair = |p: &str| -> Result<(usize, usize), String> {
            let (a, b) = p.split_once('x').ok_or_else(bad)?;
            Ok((a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?))
        };
        Ok(Self {
            channels: parts[0].parse().map_err(|_| bad())?,
            geometry: ConvGeometry::new(pair(parts[1])?, pair(parts[2])?, pair(parts[3])?),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    pub feature_dim: usize,
    pub convs: Vec<ConvSpec>,
    pub cell: CellKind,
    pub layers: usize,
    /// Per-direction width of every recurrent layer.
    pub hidden: usize,
    /// Sequence-wise batch normalization before every recurrent layer but
    /// the first.
    pub batch_norm: bool,
    pub injection: bool,
    pub hvec_dim: usize,
    /// Initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            feature_dim: 16,
            convs: vec![ConvSpec {
                channels: 4,
                geometry: ConvGeometry::new((5, 5), (2, 2), (2, 2)),
            }],
            cell: CellKind::Lstm,
            layers: 2,
            hidden: 48,
            batch_norm: false,
            injection: true,
            hvec_dim: HVECTOR_DIM,
            seed: 1,
        }
    }

    /// Full-size configuration over the 81 bins of a 20 ms window at 8 kHz;
    /// constructible and runnable, far too slow to train on a desk.
    pub fn paper() -> Self {
        let conv = ConvSpec {
            channels: 32,
            geometry: ConvGeometry::new((41, 11), (2, 2), (20, 5)),
        };
        Self {
            preset: Preset::Paper,
            feature_dim: 81,
            convs: vec![conv, conv],
            cell: CellKind::Lstm,
            layers: 5,
            hidden: 800,
            batch_norm: true,
            injection: true,
            hvec_dim: HVECTOR_DIM,
            seed: 1,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// `(channels, freq', time')` after the convolution stack.
    pub fn conv_output(&self, time: usize) -> Option<(usize, usize, usize)> {
        let (mut c, mut f, mut t) = (1, self.feature_dim, time);
        for spec in &self.convs {
            (f, t) = spec.geometry.output_dims(f, t)?;
            c = spec.channels;
        }
        (f >= 1 && t >= 1).then_some((c, f, t))
    }

    /// Per-frame width of the flattened convolution output.
    pub fn conv_features(&self) -> usize {
        let (mut c, mut f) = (1, self.feature_dim);
        for spec in &self.convs {
            f = crate::autodiff::out_dim(f, spec.geometry.kernel.0, spec.geometry.stride.0, spec.geometry.padding.0)
                .unwrap_or(0);
            c = spec.channels;
        }
        c * f
    }

    pub fn rnn_input_dim(&self) -> usize {
        self.conv_features() + if self.injection { self.hvec_dim } else { 0 }
    }

    /// Closed-form parameter count for an output alphabet of `a` symbols.
    pub fn param_count(&self, a: usize) -> usize {
        let mut n = 0;
        let mut c_in = 1;
        for spec in &self.convs {
            let (kh, kw) = spec.geometry.kernel;
            n += spec.channels * c_in * kh * kw + spec.channels;
            c_in = spec.channels;
        }
        let mut input = self.rnn_input_dim();
        for l in 0..self.layers {
            if self.batch_norm && l > 0 {
                n += SeqBatchNorm::param_count(input);
            }
            n += BiRecurrentLayer::param_count(self.cell, input, self.hidden);
            input = 2 * self.hidden;
        }
        n + Dense::param_count(input, a)
    }

    fn write_manifest(&self, c: &mut Checkpoint) {
        let convs: Vec<String> = self.convs.iter().map(ToString::to_string).collect();
        c.set("preset", self.preset)
            .set("feature_dim", self.feature_dim)
            .set("convs", convs.join(";"))
            .set("cell", self.cell)
            .set("layers", self.layers)
            .set("hidden", self.hidden)
            .set("batch_norm", self.batch_norm)
            .set("injection", self.injection)
            .set("hvec_dim", self.hvec_dim)
            .set("seed", self.seed);
    }

    fn from_manifest(c: &Checkpoint) -> Result<Self, CheckpointError> {
        let convs = c.get("convs")?;
        let convs = if convs.is_empty() {
            Vec::new()
        } else {
            convs
                .split(';')
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(CheckpointError::Manifest)?
        };
        Ok(Self {
            preset: c.parse("preset")?,
            feature_dim: c.parse("feature_dim")?,
            convs,
            cell: c.parse("cell")?,
            layers: c.parse("layers")?,
            hidden: c.parse("hidden")?,
            batch_norm: c.parse("batch_norm")?,
            injection: c.parse("injection")?,
            hvec_dim: c.parse("hvec_dim")?,
            seed: c.parse("seed")?,
        })
    }
}

/// History input for one forward pass.
#[derive(Clone, Copy, Debug)]
pub enum HInput<'a> {
    /// Injection disabled.
    Off,
    /// Constant input: no gradient reaches whatever produced it.
    Vector(&'a HVector),
    /// A `[1, hvec_dim]` node already on the tape (joint training).
    Var(Var),
}

/// Parameter handles of the network, separable from the parameter storage.
#[derive(Clone, Debug)]
pub(crate) struct Net {
    pub config: ModelConfig,
    convs: Vec<(ParamId, ParamId)>,
    rnn: Vec<BiRecurrentLayer>,
    norms: Vec<Option<SeqBatchNorm>>,
    pub out: Dense,
}

impl Net {
    fn build<S: Scalar>(
        config: &ModelConfig,
        alphabet_len: usize,
        params: &mut ParamSet<S>,
        buffers: &mut ParamSet<S>,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, spec) in config.convs.iter().enumerate() {
            let (kh, kw) = spec.geometry.kernel;
            let fan_in = c_in * kh * kw;
            let w = params.add(format!("conv{i}.weight"), uniform_init(&mut rng, &[spec.channels, c_in, kh, kw], fan_in));
            let b = params.add(format!("conv{i}.bias"), uniform_init(&mut rng, &[spec.channels], fan_in));
            convs.push((w, b));
            c_in = spec.channels;
        }
        let mut rnn = Vec::new();
        let mut norms = Vec::new();
        let mut input = config.rnn_input_dim();
        for l in 0..config.layers {
            norms.push(
                (config.batch_norm && l > 0).then(|| SeqBatchNorm::new(params, buffers, &format!("bn{l}"), input)),
            );
            rnn.push(BiRecurrentLayer::new(config.cell, params, &format!("rnn{l}"), input, config.hidden, &mut rng));
            input = 2 * config.hidden;
        }
        let out = Dense::new(params, "out", input, alphabet_len, &mut rng);
        Self {
            config: config.clone(),
            convs,
            rnn,
            norms,
            out,
        }
    }

    /// Log-probabilities `[time', |alphabet|]` for features `[freq, time]`.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        bd: &Bound,
        buffers: &mut ParamSet<S>,
        features: &Tensor<S>,
        h: HInput<'_>,
        mode: BatchNormMode,
    ) -> Result<Var, SluError> {
        let cfg = &self.config;
        let &[freq, time] = features.shape() else {
            return Err(SluError::FeatureDim {
                expected: cfg.feature_dim,
                got: features.shape().first().copied().unwrap_or(0),
            });
        };
        if freq != cfg.feature_dim {
            return Err(SluError::FeatureDim {
                expected: cfg.feature_dim,
                got: freq,
            });
        }
        let (c, f, t) = cfg.conv_output(time).ok_or(SluError::TooShort { frames: time })?;
        let x = tape.constant(features)?;
        let mut x = tape.reshape(x, vec![1, freq, time])?;
        for (spec, &(w, b)) in cfg.convs.iter().zip(&self.convs) {
            let y = tape.conv2d(x, bd[w], bd[b], spec.geometry)?;
            x = tape.relu_clipped(y)?;
        }
        let flat = tape.reshape(x, vec![c * f, t])?;
        let mut x = tape.transpose(flat)?;
        x = self.inject(tape, x, t, h)?;
        for (layer, norm) in self.rnn.iter().zip(&self.norms) {
            if let Some(bn) = norm {
                x = bn.forward(tape, bd, buffers, x, mode)?;
            }
            x = layer.run(tape, bd, x)?;
        }
        let logits = self.out.forward(tape, bd, x)?;
        Ok(tape.log_softmax_rows(logits)?)
    }

    /// Appends the h-vector to each of the `t` rows of `x`.
    fn inject<S: Scalar>(&self, tape: &mut Tape<S>, x: Var, t: usize, h: HInput<'_>) -> Result<Var, SluError> {
        let d = self.config.hvec_dim;
        let tiled = match (self.config.injection, h) {
            (false, HInput::Off) => return Ok(x),
            (false, _) => return Err(SluError::InjectionMismatch("off", "given")),
            (true, HInput::Off) => return Err(SluError::InjectionMismatch("on", "missing")),
            (true, HInput::Vector(v)) => {
                if v.dim() != d {
                    return Err(SluError::HDimMismatch {
                        expected: d,
                        got: v.dim(),
                    });
                }
                let row: Vec<S> = v.values().iter().map(|&x| S::lit(x)).collect();
                tape.constant_from(vec![t, d], row.repeat(t))?
            }
            (true, HInput::Var(v)) => {
                if tape.shape(v) != [1, d] {
                    return Err(SluError::HDimMismatch {
                        expected: d,
                        got: tape.shape(v).iter().product(),
                    });
                }
                let ones = tape.constant_from(vec![t, 1], vec![S::one(); t])?;
                tape.matmul(ones, v)?
            }
        };
        Ok(tape.concat_last(&[x, tiled])?)
    }
}

/// The full network with its parameters and output alphabet.
#[derive(Clone, Debug)]
pub struct SignalToConceptModel<S: Scalar> {
    pub alphabet: OutputAlphabet,
    pub params: ParamSet<S>,
    /// Batch-norm running statistics (not trained by the optimizer).
    pub buffers: ParamSet<S>,
    pub(crate) net: Net,
}

impl<S: Scalar> SignalToConceptModel<S> {
    pub fn new(config: ModelConfig, alphabet: OutputAlphabet) -> Self {
        let mut params = ParamSet::new();
        let mut buffers = ParamSet::new();
        let net = Net::build(&config, alphabet.len(), &mut params, &mut buffers);
        Self {
            alphabet,
            params,
            buffers,
            net,
        }
    }

    pub fn assemble(preset: Preset, alphabet: OutputAlphabet, injection: bool) -> Self {
        let config = ModelConfig {
            injection,
            ..ModelConfig::preset(preset)
        };
        Self::new(config, alphabet)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// Handle of the first recurrent layer's forward-direction input weights.
    pub fn rnn_input_weights(&self) -> Vec<ParamId> {
        let l = &self.net.rnn[0];
        [&l.forward, &l.backward]
            .into_iter()
            .map(|c| match c {
                crate::layers::Cell::Gru(g) => g.w,
                crate::layers::Cell::Lstm(l) => l.w,
            })
            .collect()
    }

    /// Output-layer weight `[2·hidden, |alphabet|]` and bias handles.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.net.out.weight, self.net.out.bias)
    }

    /// Records the forward pass on `tape` with trainable parameters `bd`.
    pub fn forward(
        &mut self,
        tape: &mut Tape<S>,
        bd: &Bound,
        features: &Tensor<S>,
        h: HInput<'_>,
        mode: BatchNormMode,
    ) -> Result<Var, SluError> {
        self.net.forward(tape, bd, &mut self.buffers, features, h, mode)
    }

    /// Inference-mode log-probabilities `[time', |alphabet|]`.
    pub fn log_probs(&self, features: &Tensor<S>, h: HInput<'_>) -> Result<Tensor<S>, SluError> {
        let mut tape = Tape::new();
        let bd = self.params.bind_frozen(&mut tape)?;
        let mut buffers = self.buffers.clone();
        let lp = self
            .net
            .forward(&mut tape, &bd, &mut buffers, features, h, BatchNormMode::Infer)?;
        Ok(tape.tensor(lp))
    }

    /// Greedy CTC decode into plain text and concepts.
    pub fn decode(&self, features: &Tensor<S>, h: HInput<'_>) -> Result<Decoded, SluError> {
        let lp = self.log_probs(features, h)?;
        let ids = greedy_decode(lp.values(), self.alphabet.len(), self.alphabet.blank_id());
        Ok(decode_symbols(&self.alphabet, &ids))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        c.set("format", "HVSLU1")
            .set("kind", "slu")
            .set("alphabet", self.alphabet.listing());
        self.net.config.write_manifest(&mut c);
        c.add_params("", &self.params);
        c.add_params("buffer.", &self.buffers);
        c
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self, SluError> {
        if c.get("kind")? != "slu" {
            return Err(CheckpointError::Architecture(format!("not an slu checkpoint (kind {})", c.get("kind")?)).into());
        }
        let config = ModelConfig::from_manifest(c)?;
        let alphabet = OutputAlphabet::from_listing(c.get("alphabet")?)?;
        let mut m = Self::new(config, alphabet);
        c.load_params("buffer.", &mut m.buffers)?;
        c.load_params("", &mut m.params)?;
        for r in &c.records {
            let known = match r.name.strip_prefix("buffer.") {
                Some(b) => m.buffers.find(b).is_some(),
                None => m.params.find(&r.name).is_some(),
            };
            if !known {
                return Err(CheckpointError::ExtraParam(r.name.clone()).into());
            }
        }
        Ok(m)
    }

    /// Errors unless `other` has the same architecture and alphabet.
    pub fn check_same_architecture(&self, other: &Self) -> Result<(), SluError> {
        if self.net.config != other.net.config || self.alphabet != other.alphabet {
            return Err(CheckpointError::Architecture(format!(
                "{:?} / {} vs {:?} / {}",
                self.net.config,
                self.alphabet.listing(),
                other.net.config,
                other.alphabet.listing()
            ))
            .into());
        }
        Ok(())
    }
}
