//! Three modality encoders, the fusion MLP, the predictor, and checkpoints.
//!
//! Parameters live in [`Params<Tensor>`]. A training or evaluation pass
//! binds them onto a [`Tape`] as [`Params<Var>`] and runs the batched
//! forward functions below; every forward function treats row `i` of its
//! inputs independently, so a sample's output does not depend on which
//! batch it is in.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Dataset, TextInput, TextMode, Utterance};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Upper bound on predicted magnitudes; the predictor ends in `3·tanh`.
pub const PREDICTION_RANGE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Visual,
    Audio,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Visual, Modality::Audio];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn letter(self) -> char {
        match self {
            Modality::Text => 't',
            Modality::Visual => 'v',
            Modality::Audio => 'a',
        }
    }
}

/// Set of modalities whose representations are zeroed before fusion.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ModalityMask([bool; 3]);

impl ModalityMask {
    pub const NONE: ModalityMask = ModalityMask([false; 3]);

    pub fn of(modalities: &[Modality]) -> Self {
        let mut m = [false; 3];
        for x in modalities {
            m[x.slot()] = true;
        }
        ModalityMask(m)
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0[m.slot()]
    }

    pub fn len(self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    /// The three single-modality masks `{t}`, `{v}`, `{a}`.
    pub fn singles() -> [ModalityMask; 3] {
        Modality::ALL.map(|m| ModalityMask::of(&[m]))
    }

    /// The three two-modality masks `{t,v}`, `{t,a}`, `{v,a}`.
    pub fn doubles() -> [ModalityMask; 3] {
        use Modality::*;
        [
            ModalityMask::of(&[Text, Visual]),
            ModalityMask::of(&[Text, Audio]),
            ModalityMask::of(&[Visual, Audio]),
        ]
    }
}

impl fmt::Display for ModalityMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("full");
        }
        f.write_str("mask-")?;
        for m in Modality::ALL {
            if self.contains(m) {
                write!(f, "{}", m.letter())?;
            }
        }
        Ok(())
    }
}

impl std::str::FromStr for ModalityMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "full" {
            return Ok(ModalityMask::NONE);
        }
        let letters = s
            .strip_prefix("mask-")
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))?;
        let mut mods = Vec::new();
        for c in letters.chars() {
            let m = Modality::ALL
                .into_iter()
                .find(|m| m.letter() == c)
                .ok_or_else(|| Error::Config(format!("unknown modality {c:?} in {s:?}")))?;
            if mods.contains(&m) {
                return Err(Error::Config(format!("repeated modality in {s:?}")));
            }
            mods.push(m);
        }
        let mask = ModalityMask::of(&mods);
        if mask.is_empty() || mask.len() > 2 {
            return Err(Error::Config(format!(
                "variant {s:?} must mask one or two modalities"
            )));
        }
        Ok(mask)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub text_mode: TextMode,
    pub text_vocab: usize,
    pub text_embed_dim: usize,
    pub visual_in: usize,
    pub audio_in: usize,
    /// Recurrent width per direction.
    pub hidden: usize,
    /// Width of each modality representation and of the fusion vector.
    pub rep_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            text_mode: TextMode::Tokens,
            text_vocab: 512,
            text_embed_dim: 32,
            visual_in: 35,
            audio_in: 74,
            hidden: 32,
            rep_dim: 32,
        }
    }
}

impl EncoderConfig {
    /// Input widths taken from a dataset; model widths from `self`.
    pub fn for_dataset(&self, dataset: &Dataset) -> Result<EncoderConfig> {
        let h = &dataset.header;
        let mut cfg = EncoderConfig {
            text_mode: h.text_mode,
            text_vocab: h.vocab_size,
            visual_in: h.d_v,
            audio_in: h.d_a,
            ..self.clone()
        };
        if h.text_mode == TextMode::Vectors {
            cfg.text_vocab = 0;
            cfg.text_embed_dim = dataset.text_dim().ok_or_else(|| {
                Error::data(None, "cannot infer text vector width from an empty dataset")
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.text_embed_dim,
            self.visual_in,
            self.audio_in,
            self.hidden,
            self.rep_dim,
        ];
        if widths.contains(&0) {
            return Err(Error::Config(
                "all encoder widths must be at least 1".into(),
            ));
        }
        if self.text_mode == TextMode::Tokens && self.text_vocab == 0 {
            return Err(Error::Config(
                "token text needs a vocabulary of at least 1".into(),
            ));
        }
        Ok(())
    }
}

// ----- parameter containers -----

/// Affine map `x·W + b` with `W` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}

/// LSTM cell; gate columns are ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCell<P> {
    pub w_x: P,
    pub w_h: P,
    pub bias: P,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentEncoder<P> {
    pub forward: LstmCell<P>,
    pub backward: LstmCell<P>,
    pub proj: Linear<P>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder<P> {
    /// `vocab × embed` lookup table; absent when text arrives as vectors.
    pub embedding: Option<P>,
    pub layer0: Linear<P>,
    pub layer1: Linear<P>,
}

/// Every learnable parameter, generic over storage (tensors or tape handles).
#[derive(Clone, Debug, PartialEq)]
pub struct Params<P> {
    pub text: TextEncoder<P>,
    pub visual: RecurrentEncoder<P>,
    pub audio: RecurrentEncoder<P>,
    pub fusion: [Linear<P>; 2],
    pub predictor: [Linear<P>; 2],
}

impl<P> Linear<P> {
    fn map<Q>(&self, name: &str, f: &mut impl FnMut(&str, &P) -> Q) -> Linear<Q> {
        Linear {
            weight: f(&format!("{name}.weight"), &self.weight),
            bias: f(&format!("{name}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{name}.weight"), &mut self.weight);
        f(&format!("{name}.bias"), &mut self.bias);
    }
}

impl<P> LstmCell<P> {
    fn map<Q>(&self, name: &str, f: &mut impl FnMut(&str, &P) -> Q) -> LstmCell<Q> {
        LstmCell {
            w_x: f(&format!("{name}.w_x"), &self.w_x),
            w_h: f(&format!("{name}.w_h"), &self.w_h),
            bias: f(&format!("{name}.bias"), &self.bias),
        }
    }

    fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(&str, &mut P)) {
        f(&format!("{name}.w_x"), &mut self.w_x);
        f(&format!("{name}.w_h"), &mut self.w_h);
        f(&format!("{name}.bias"), &mut self.bias);
    }
}

impl<P> RecurrentEncoder<P> {
    fn map<Q>(&self, name: &str, f: &mut impl FnMut(&str, &P) -> Q) -> RecurrentEncoder<Q> {
        RecurrentEncoder {
            forward: self.forward.map(&format!("{name}.fwd"), f),
            backward: self.backward.map(&format!("{name}.bwd"), f),
            proj: self.proj.map(&format!("{name}.proj"), f),
        }
    }

    fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(&str, &mut P)) {
        self.forward.visit_mut(&format!("{name}.fwd"), f);
        self.backward.visit_mut(&format!("{name}.bwd"), f);
        self.proj.visit_mut(&format!("{name}.proj"), f);
    }
}

impl<P> Params<P> {
    /// Applies `f` to every parameter with its dotted path, in a fixed order.
    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> Params<Q> {
        let f = &mut f;
        Params {
            text: TextEncoder {
                embedding: self.text.embedding.as_ref().map(|e| f("text.embedding", e)),
                layer0: self.text.layer0.map("text.layer0", f),
                layer1: self.text.layer1.map("text.layer1", f),
            },
            visual: self.visual.map("visual", f),
            audio: self.audio.map("audio", f),
            fusion: [
                self.fusion[0].map("fusion.layer0", f),
                self.fusion[1].map("fusion.layer1", f),
            ],
            predictor: [
                self.predictor[0].map("predictor.layer0", f),
                self.predictor[1].map("predictor.layer1", f),
            ],
        }
    }

    pub fn for_each(&self, mut f: impl FnMut(&str, &P)) {
        self.map(|name, p| f(name, p));
    }

    /// Mutable visit in the same order as [`Params::map`].
    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut P)) {
        let f = &mut f;
        if let Some(e) = self.text.embedding.as_mut() {
            f("text.embedding", e);
        }
        self.text.layer0.visit_mut("text.layer0", f);
        self.text.layer1.visit_mut("text.layer1", f);
        self.visual.visit_mut("visual", f);
        self.audio.visit_mut("audio", f);
        self.fusion[0].visit_mut("fusion.layer0", f);
        self.fusion[1].visit_mut("fusion.layer1", f);
        self.predictor[0].visit_mut("predictor.layer0", f);
        self.predictor[1].visit_mut("predictor.layer1", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(|n, _| out.push(n.to_string()));
        out
    }
}

// ----- initialization -----

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        Tensor::new(shape.to_vec(), data).expect("sized by construction")
    }

    fn glorot(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        self.uniform(&[fan_in, fan_out], bound)
    }

    fn linear(&mut self, fan_in: usize, fan_out: usize) -> Linear<Tensor> {
        Linear {
            weight: self.glorot(fan_in, fan_out),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn lstm(&mut self, input: usize, hidden: usize) -> LstmCell<Tensor> {
        let mut bias = Tensor::zeros(&[4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        LstmCell {
            w_x: self.glorot(input, 4 * hidden),
            w_h: self.uniform(&[hidden, 4 * hidden], 1.0 / (hidden as f64).sqrt()),
            bias,
        }
    }

    fn recurrent(&mut self, input: usize, hidden: usize, rep: usize) -> RecurrentEncoder<Tensor> {
        RecurrentEncoder {
            forward: self.lstm(input, hidden),
            backward: self.lstm(input, hidden),
            proj: self.linear(2 * hidden, rep),
        }
    }
}

/// Network weights plus the configuration they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub config: EncoderConfig,
    pub params: Params<Tensor>,
}

impl FusionModel {
    /// Deterministic initialization from a seed.
    ///
    /// Linear and input-to-hidden weights are Glorot-uniform, hidden-to-hidden
    /// weights uniform in `±1/√hidden`, the token embedding standard normal,
    /// and all biases zero except the LSTM forget gates, which start at 1.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<FusionModel> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = config;
        let embedding = (c.text_mode == TextMode::Tokens).then(|| {
            let n = c.text_vocab * c.text_embed_dim;
            let data = (0..n).map(|_| init.rng.sample(StandardNormal)).collect();
            Tensor::matrix(c.text_vocab, c.text_embed_dim, data).expect("sized")
        });
        let params = Params {
            text: TextEncoder {
                embedding,
                layer0: init.linear(c.text_embed_dim, c.rep_dim),
                layer1: init.linear(c.rep_dim, c.rep_dim),
            },
            visual: init.recurrent(c.visual_in, c.hidden, c.rep_dim),
            audio: init.recurrent(c.audio_in, c.hidden, c.rep_dim),
            fusion: [
                init.linear(3 * c.rep_dim, c.rep_dim),
                init.linear(c.rep_dim, c.rep_dim),
            ],
            predictor: [init.linear(c.rep_dim, c.rep_dim), init.linear(c.rep_dim, 1)],
        };
        Ok(FusionModel {
            config: config.clone(),
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.params.for_each(|_, t| n += t.numel());
        n
    }

    /// Places every parameter on the tape as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape) -> Params<Var> {
        self.params.map(|_, t| tape.param(t.clone()))
    }

    /// Places every parameter on the tape as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape) -> Params<Var> {
        self.params.map(|_, t| tape.constant(t.clone()))
    }

    /// Fusion vectors and predictions for a batch, without gradients.
    pub fn infer(&self, batch: &[&Utterance], mask: ModalityMask) -> Result<Inference> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let enc = encode_batch(&mut tape, &bound, &self.config, batch)?;
        let fused = masked_fuse(&mut tape, &bound, &enc, mask)?;
        let pred = predict(&mut tape, &bound, fused)?;
        Ok(Inference {
            fused: tape.value(fused).clone(),
            predictions: tape.value(pred).data().to_vec(),
        })
    }

    /// [`FusionModel::infer`] over a whole dataset in chunks.
    pub fn infer_dataset(&self, dataset: &Dataset, mask: ModalityMask) -> Result<Inference> {
        const CHUNK: usize = 256;
        let mut rows = Vec::with_capacity(dataset.len() * self.config.rep_dim);
        let mut predictions = Vec::with_capacity(dataset.len());
        let refs: Vec<&Utterance> = dataset.utterances.iter().collect();
        for chunk in refs.chunks(CHUNK) {
            let out = self.infer(chunk, mask)?;
            rows.extend(out.fused.into_data());
            predictions.extend(out.predictions);
        }
        Ok(Inference {
            fused: Tensor::matrix(dataset.len(), self.config.rep_dim, rows)?,
            predictions,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Inference {
    /// `n × rep_dim` fusion vectors.
    pub fused: Tensor,
    pub predictions: Vec<f64>,
}

// ----- forward pass -----

fn linear(tape: &mut Tape, layer: &Linear<Var>, x: Var) -> Result<Var> {
    let xw = tape.matmul(x, layer.weight)?;
    tape.add_row(xw, layer.bias)
}

/// Two-layer perceptron with a tanh hidden layer and linear output.
fn mlp(tape: &mut Tape, layers: [&Linear<Var>; 2], x: Var) -> Result<Var> {
    let hidden = linear(tape, layers[0], x)?;
    let hidden = tape.tanh(hidden);
    linear(tape, layers[1], hidden)
}

/// Text representations (`n × rep_dim`): mean-pooled embeddings through a 2-layer MLP.
pub fn encode_text(
    tape: &mut Tape,
    params: &Params<Var>,
    config: &EncoderConfig,
    texts: &[&TextInput],
) -> Result<Var> {
    let n = texts.len();
    let pooled = match params.text.embedding {
        Some(table) => {
            let vocab = config.text_vocab;
            let mut pool = vec![0.0; n * vocab];
            for (i, text) in texts.iter().enumerate() {
                let TextInput::Tokens(ids) = text else {
                    return Err(Error::data(
                        None,
                        "model expects token ids, got a text vector",
                    ));
                };
                if ids.is_empty() {
                    return Err(Error::data(None, "empty token sequence"));
                }
                let w = 1.0 / ids.len() as f64;
                for &id in ids {
                    if id >= vocab {
                        return Err(Error::data(
                            None,
                            format!("token {id} outside vocabulary of {vocab}"),
                        ));
                    }
                    pool[i * vocab + id] += w;
                }
            }
            let pool = tape.constant(Tensor::matrix(n, vocab, pool)?);
            tape.matmul(pool, table)?
        }
        None => {
            let width = config.text_embed_dim;
            let mut rows = Vec::with_capacity(n * width);
            for text in texts {
                match text {
                    TextInput::Vector(v) if v.len() == width => rows.extend_from_slice(v),
                    TextInput::Vector(v) => {
                        return Err(Error::data(
                            None,
                            format!("text vector width {} but encoder expects {width}", v.len()),
                        ))
                    }
                    TextInput::Tokens(_) => {
                        return Err(Error::data(
                            None,
                            "model expects text vectors, got token ids",
                        ))
                    }
                }
            }
            tape.constant(Tensor::matrix(n, width, rows)?)
        }
    };
    mlp(tape, [&params.text.layer0, &params.text.layer1], pooled)
}

/// Runs one LSTM direction over a batch of sequences and returns the
/// `n × hidden` state after each sequence's last step.
///
/// Shorter sequences are carried forward unchanged once exhausted, using
/// an exact select so no rounding leaks between rows.
fn run_lstm(
    tape: &mut Tape,
    cell: &LstmCell<Var>,
    hidden: usize,
    width: usize,
    steps: &[Vec<&[f64]>],
) -> Result<Var> {
    let n = steps.len();
    let max_len = steps.iter().map(Vec::len).max().unwrap_or(0);
    let min_len = steps.iter().map(Vec::len).min().unwrap_or(0);
    let mut h = tape.constant(Tensor::zeros(&[n, hidden]));
    let mut c = tape.constant(Tensor::zeros(&[n, hidden]));
    for t in 0..max_len {
        let mut x = vec![0.0; n * width];
        for (i, seq) in steps.iter().enumerate() {
            if let Some(row) = seq.get(t) {
                x[i * width..(i + 1) * width].copy_from_slice(row);
            }
        }
        let x = tape.constant(Tensor::matrix(n, width, x)?);
        let xw = tape.matmul(x, cell.w_x)?;
        let hw = tape.matmul(h, cell.w_h)?;
        let gates = tape.add(xw, hw)?;
        let gates = tape.add_row(gates, cell.bias)?;
        let i_gate = tape.slice_cols(gates, 0, hidden)?;
        let f_gate = tape.slice_cols(gates, hidden, 2 * hidden)?;
        let g_gate = tape.slice_cols(gates, 2 * hidden, 3 * hidden)?;
        let o_gate = tape.slice_cols(gates, 3 * hidden, 4 * hidden)?;
        let i_gate = tape.sigmoid(i_gate);
        let f_gate = tape.sigmoid(f_gate);
        let g_gate = tape.tanh(g_gate);
        let o_gate = tape.sigmoid(o_gate);

        let keep = tape.mul(f_gate, c)?;
        let write = tape.mul(i_gate, g_gate)?;
        let c_new = tape.add(keep, write)?;
        let c_act = tape.tanh(c_new);
        let h_new = tape.mul(o_gate, c_act)?;

        if t < min_len {
            c = c_new;
            h = h_new;
        } else {
            let mut active = vec![0.0; n * hidden];
            for (i, seq) in steps.iter().enumerate() {
                if t < seq.len() {
                    active[i * hidden..(i + 1) * hidden].fill(1.0);
                }
            }
            let idle: Vec<f64> = active.iter().map(|a| 1.0 - a).collect();
            let active = tape.constant(Tensor::matrix(n, hidden, active)?);
            let idle = tape.constant(Tensor::matrix(n, hidden, idle)?);
            c = select(tape, active, idle, c_new, c)?;
            h = select(tape, active, idle, h_new, h)?;
        }
    }
    Ok(h)
}

fn select(tape: &mut Tape, active: Var, idle: Var, new: Var, old: Var) -> Result<Var> {
    let a = tape.mul(active, new)?;
    let b = tape.mul(idle, old)?;
    tape.add(a, b)
}

/// Bidirectional LSTM encoder: final states of both directions, concatenated
/// and projected to `rep_dim`. Returns `n × rep_dim`.
pub fn encode_recurrent(
    tape: &mut Tape,
    encoder: &RecurrentEncoder<Var>,
    config: &EncoderConfig,
    width: usize,
    sequences: &[&Tensor],
) -> Result<Var> {
    for s in sequences {
        if s.rank() != 2 || s.rows() == 0 {
            return Err(Error::data(
                None,
                "recurrent input must be a non-empty sequence",
            ));
        }
        if s.cols() != width {
            return Err(Error::data(
                None,
                format!("feature width {} but encoder expects {width}", s.cols()),
            ));
        }
    }
    let fwd: Vec<Vec<&[f64]>> = sequences
        .iter()
        .map(|s| (0..s.rows()).map(|r| s.row(r)).collect())
        .collect();
    let bwd: Vec<Vec<&[f64]>> = fwd
        .iter()
        .map(|rows| rows.iter().rev().copied().collect())
        .collect();
    let hf = run_lstm(tape, &encoder.forward, config.hidden, width, &fwd)?;
    let hb = run_lstm(tape, &encoder.backward, config.hidden, width, &bwd)?;
    let both = tape.concat_cols(&[hf, hb])?;
    linear(tape, &encoder.proj, both)
}

/// Per-modality representations of a batch, each `n × rep_dim`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub text: Var,
    pub visual: Var,
    pub audio: Var,
}

impl Encoded {
    fn get(&self, m: Modality) -> Var {
        match m {
            Modality::Text => self.text,
            Modality::Visual => self.visual,
            Modality::Audio => self.audio,
        }
    }
}

pub fn encode_batch(
    tape: &mut Tape,
    params: &Params<Var>,
    config: &EncoderConfig,
    batch: &[&Utterance],
) -> Result<Encoded> {
    if batch.is_empty() {
        return Err(Error::Contract("cannot encode an empty batch".into()));
    }
    let texts: Vec<&TextInput> = batch.iter().map(|u| &u.text).collect();
    let visual: Vec<&Tensor> = batch.iter().map(|u| &u.visual).collect();
    let audio: Vec<&Tensor> = batch.iter().map(|u| &u.audio).collect();
    Ok(Encoded {
        text: encode_text(tape, params, config, &texts)?,
        visual: encode_recurrent(tape, &params.visual, config, config.visual_in, &visual)?,
        audio: encode_recurrent(tape, &params.audio, config, config.audio_in, &audio)?,
    })
}

/// Fusion MLP over the `[text, visual, audio]` concatenation.
pub fn fuse(tape: &mut Tape, params: &Params<Var>, enc: &Encoded) -> Result<Var> {
    masked_fuse(tape, params, enc, ModalityMask::NONE)
}

/// Fusion with the masked modality representations replaced by zeros.
pub fn masked_fuse(
    tape: &mut Tape,
    params: &Params<Var>,
    enc: &Encoded,
    mask: ModalityMask,
) -> Result<Var> {
    if mask.len() == 3 {
        return Err(Error::Contract("cannot mask all three modalities".into()));
    }
    let expected = tape.value(enc.text).shape().to_vec();
    let mut parts = [enc.text; 3];
    for m in Modality::ALL {
        let v = enc.get(m);
        if tape.value(v).shape() != expected.as_slice() {
            return Err(Error::Contract(format!(
                "{m:?} representation has shape {:?}, text has {expected:?}",
                tape.value(v).shape()
            )));
        }
        parts[m.slot()] = if mask.contains(m) {
            tape.constant(Tensor::zeros(&expected))
        } else {
            v
        };
    }
    let joined = tape.concat_cols(&parts)?;
    mlp(tape, [&params.fusion[0], &params.fusion[1]], joined)
}

/// Sentiment predictions (`n × 1`), strictly inside `(-3, 3)`.
pub fn predict(tape: &mut Tape, params: &Params<Var>, fused: Var) -> Result<Var> {
    let raw = mlp(tape, [&params.predictor[0], &params.predictor[1]], fused)?;
    let squashed = tape.tanh(raw);
    Ok(tape.scale(squashed, PREDICTION_RANGE))
}

// ----- checkpoints -----

#[derive(Serialize, Deserialize)]
struct StoredParam {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    encoder: EncoderConfig,
    params: BTreeMap<String, StoredParam>,
}

impl FusionModel {
    pub fn to_checkpoint_json(&self) -> String {
        let mut params = BTreeMap::new();
        self.params.for_each(|name, t| {
            params.insert(
                name.to_string(),
                StoredParam {
                    shape: t.shape().to_vec(),
                    data: t.data().to_vec(),
                },
            );
        });
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT_VERSION,
            encoder: self.config.clone(),
            params,
        };
        serde_json::to_string(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<FusionModel> {
        let file: CheckpointFile = serde_json::from_str(text)
            .map_err(|e| Error::data(None, format!("malformed checkpoint: {e}")))?;
        if file.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::data(
                None,
                format!(
                    "unsupported checkpoint format version {}",
                    file.format_version
                ),
            ));
        }
        let mut model = FusionModel::init(&file.encoder, 0)?;
        let mut stored = file.params;
        let mut failure = None;
        model.params.for_each_mut(|name, t| {
            if failure.is_some() {
                return;
            }
            match stored.remove(name) {
                Some(p) if p.shape == t.shape() => match Tensor::new(p.shape, p.data) {
                    Ok(v) => *t = v,
                    Err(e) => failure = Some(e),
                },
                Some(p) => {
                    failure = Some(Error::data(
                        None,
                        format!(
                            "parameter {name} has shape {:?}, expected {:?}",
                            p.shape,
                            t.shape()
                        ),
                    ))
                }
                None => {
                    failure = Some(Error::data(
                        None,
                        format!("checkpoint lacks parameter {name}"),
                    ))
                }
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        if let Some(extra) = stored.keys().next() {
            return Err(Error::data(
                None,
                format!("unexpected parameter {extra} in checkpoint"),
            ));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_checkpoint_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<FusionModel> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FusionModel::from_checkpoint_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            text_mode: TextMode::Tokens,
            text_vocab: 11,
            text_embed_dim: 4,
            visual_in: 3,
            audio_in: 2,
            hidden: 3,
            rep_dim: 4,
        }
    }

    fn utterance(tokens: Vec<usize>, visual_rows: usize) -> Utterance {
        let visual = Tensor::matrix(
            visual_rows,
            3,
            (0..visual_rows * 3)
                .map(|i| (i as f64 * 0.37).sin())
                .collect(),
        )
        .unwrap();
        Utterance {
            id: "u".into(),
            y: 0.0,
            text: TextInput::Tokens(tokens),
            visual,
            audio: Tensor::matrix(2, 2, vec![0.5, -0.2, 0.1, 0.9]).unwrap(),
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_dependent() {
        let cfg = small_config();
        let a = FusionModel::init(&cfg, 5).unwrap();
        let b = FusionModel::init(&cfg, 5).unwrap();
        let c = FusionModel::init(&cfg, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn biases_zero_except_forget_gate() {
        let cfg = small_config();
        let m = FusionModel::init(&cfg, 1).unwrap();
        let h = cfg.hidden;
        m.params.for_each(|name, t| {
            if name.ends_with(".bias") {
                let is_lstm = name.contains(".fwd.") || name.contains(".bwd.");
                for (i, &v) in t.data().iter().enumerate() {
                    let expected = if is_lstm && (h..2 * h).contains(&i) {
                        1.0
                    } else {
                        0.0
                    };
                    assert_eq!(v, expected, "{name}[{i}]");
                }
            }
        });
    }

    #[test]
    fn parameter_names_are_unique_paths() {
        let m = FusionModel::init(&small_config(), 1).unwrap();
        let names = m.params.names();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        assert!(names.contains(&"fusion.layer0.weight".to_string()));
        assert!(names.contains(&"visual.bwd.w_h".to_string()));
    }

    #[test]
    fn text_mean_pool_is_idempotent_and_order_free() {
        let m = FusionModel::init(&small_config(), 3).unwrap();
        let run = |tokens: Vec<usize>| {
            let mut tape = Tape::new();
            let p = m.bind_frozen(&mut tape);
            let t = TextInput::Tokens(tokens);
            let v = encode_text(&mut tape, &p, &m.config, &[&t]).unwrap();
            tape.value(v).clone()
        };
        assert_eq!(run(vec![4]), run(vec![4, 4]));
        assert_eq!(run(vec![1, 2, 9]), run(vec![9, 1, 2]));
        assert_eq!(run(vec![1, 2, 9]).shape(), &[1, 4]);
    }

    #[test]
    fn text_rejects_out_of_vocabulary() {
        let m = FusionModel::init(&small_config(), 3).unwrap();
        let mut tape = Tape::new();
        let p = m.bind_frozen(&mut tape);
        let t = TextInput::Tokens(vec![11]);
        assert!(matches!(
            encode_text(&mut tape, &p, &m.config, &[&t]),
            Err(Error::Data { .. })
        ));
    }

    #[test]
    fn recurrent_rejects_wrong_width() {
        let m = FusionModel::init(&small_config(), 3).unwrap();
        let mut tape = Tape::new();
        let p = m.bind_frozen(&mut tape);
        let seq = Tensor::zeros(&[2, 5]);
        assert!(encode_recurrent(&mut tape, &p.visual, &m.config, 3, &[&seq]).is_err());
    }

    #[test]
    fn zero_sequence_gives_projection_bias() {
        let mut m = FusionModel::init(&small_config(), 3).unwrap();
        m.params.visual.proj.bias = Tensor::vector(vec![0.1, -0.2, 0.3, 0.4]);
        let mut tape = Tape::new();
        let p = m.bind_frozen(&mut tape);
        let seq = Tensor::zeros(&[5, 3]);
        let out = encode_recurrent(&mut tape, &p.visual, &m.config, 3, &[&seq]).unwrap();
        assert_eq!(tape.value(out).data(), &[0.1, -0.2, 0.3, 0.4]);
    }

    #[test]
    fn recurrent_is_order_sensitive() {
        let m = FusionModel::init(&small_config(), 3).unwrap();
        let seq =
            Tensor::matrix(3, 3, vec![0.1, 0.5, -0.3, 0.9, -0.7, 0.2, 0.0, 0.4, 0.8]).unwrap();
        let rev =
            Tensor::matrix(3, 3, vec![0.0, 0.4, 0.8, 0.9, -0.7, 0.2, 0.1, 0.5, -0.3]).unwrap();
        let run = |s: &Tensor| {
            let mut tape = Tape::new();
            let p = m.bind_frozen(&mut tape);
            let v = encode_recurrent(&mut tape, &p.visual, &m.config, 3, &[s]).unwrap();
            tape.value(v).clone()
        };
        assert_ne!(run(&seq), run(&rev));
    }

    #[test]
    fn batch_composition_does_not_change_rows() {
        let m = FusionModel::init(&small_config(), 9).unwrap();
        let a = utterance(vec![1, 2], 1);
        let b = utterance(vec![3, 4, 5], 6);
        let alone = m.infer(&[&a], ModalityMask::NONE).unwrap();
        let together = m.infer(&[&b, &a], ModalityMask::NONE).unwrap();
        assert_eq!(alone.fused.row(0), together.fused.row(1));
        assert_eq!(alone.predictions[0], together.predictions[1]);
    }

    #[test]
    fn empty_mask_is_plain_fusion_and_full_mask_is_rejected() {
        let m = FusionModel::init(&small_config(), 2).unwrap();
        let u = utterance(vec![1, 2], 3);
        let mut tape = Tape::new();
        let p = m.bind_frozen(&mut tape);
        let enc = encode_batch(&mut tape, &p, &m.config, &[&u]).unwrap();
        let f = fuse(&mut tape, &p, &enc).unwrap();
        let g = masked_fuse(&mut tape, &p, &enc, ModalityMask::NONE).unwrap();
        assert_eq!(tape.value(f), tape.value(g));
        let all = ModalityMask::of(&Modality::ALL);
        assert!(matches!(
            masked_fuse(&mut tape, &p, &enc, all),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn masking_two_equals_zeroed_inputs() {
        let m = FusionModel::init(&small_config(), 2).unwrap();
        let u = utterance(vec![1, 2], 3);
        let mut tape = Tape::new();
        let p = m.bind_frozen(&mut tape);
        let enc = encode_batch(&mut tape, &p, &m.config, &[&u]).unwrap();
        let zeros = tape.constant(Tensor::zeros(&[1, 4]));
        let manual = Encoded {
            text: enc.text,
            visual: zeros,
            audio: zeros,
        };
        let a = fuse(&mut tape, &p, &manual).unwrap();
        let b = masked_fuse(
            &mut tape,
            &p,
            &enc,
            ModalityMask::of(&[Modality::Visual, Modality::Audio]),
        )
        .unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn predictor_range_and_zero_weights() {
        let mut m = FusionModel::init(&small_config(), 2).unwrap();
        let mut tape = Tape::new();
        let p = m.bind_frozen(&mut tape);
        let h = tape.constant(Tensor::filled(&[2, 4], 1e6));
        let y = predict(&mut tape, &p, h).unwrap();
        assert!(tape.value(y).data().iter().all(|v| v.abs() <= 3.0));

        for layer in &mut m.params.predictor {
            layer.weight.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let p = m.bind_frozen(&mut tape);
        let h = tape.constant(Tensor::filled(&[1, 4], 0.7));
        let y = predict(&mut tape, &p, h).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn variant_tags_round_trip() {
        for mask in [ModalityMask::NONE]
            .into_iter()
            .chain(ModalityMask::singles())
            .chain(ModalityMask::doubles())
        {
            let tag = mask.to_string();
            assert_eq!(tag.parse::<ModalityMask>().unwrap(), mask);
        }
        assert_eq!(ModalityMask::doubles()[0].to_string(), "mask-tv");
        assert!("mask-tva".parse::<ModalityMask>().is_err());
        assert!("mask-x".parse::<ModalityMask>().is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let m = FusionModel::init(&small_config(), 4).unwrap();
        let back = FusionModel::from_checkpoint_json(&m.to_checkpoint_json()).unwrap();
        assert_eq!(m, back);
        assert!(FusionModel::from_checkpoint_json("{}").is_err());
    }
}
