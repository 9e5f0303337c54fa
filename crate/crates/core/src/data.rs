//! Utterance schema, JSONL dataset files, the synthetic generator, and batching.
//!
//! A dataset directory holds one `<split>.jsonl` file per split plus a
//! `<split>.header.json` sidecar describing feature widths and text mode.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const LABEL_MIN: f64 = -3.0;
pub const LABEL_MAX: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TextMode {
    Tokens,
    Vectors,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Text channel of an utterance: token ids, or a vector from an external encoder.
#[derive(Clone, Debug, PartialEq)]
pub enum TextInput {
    Tokens(Vec<usize>),
    Vector(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Sentiment score in `[-3, 3]`.
    pub y: f64,
    pub text: TextInput,
    /// `l_v × d_v` visual feature sequence.
    pub visual: Tensor,
    /// `l_a × d_a` acoustic feature sequence.
    pub audio: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub d_v: usize,
    pub d_a: usize,
    pub text_mode: TextMode,
    pub vocab_size: usize,
    pub split: Split,
    /// Width of precomputed text vectors; only meaningful in `vectors` mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_dim: Option<usize>,
}

impl DatasetHeader {
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.d_a == 0 {
            return Err(Error::data(None, "feature widths must be at least 1"));
        }
        match self.text_mode {
            TextMode::Tokens if self.vocab_size == 0 => {
                Err(Error::data(None, "token mode needs vocab_size >= 1"))
            }
            TextMode::Vectors if self.text_dim == Some(0) => {
                Err(Error::data(None, "text_dim must be at least 1"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<f64> {
        self.utterances.iter().map(|u| u.y).collect()
    }

    /// Width of text vectors in `vectors` mode, from the header or the first sample.
    pub fn text_dim(&self) -> Option<usize> {
        self.header.text_dim.or_else(|| {
            self.utterances.iter().find_map(|u| match &u.text {
                TextInput::Vector(v) => Some(v.len()),
                TextInput::Tokens(_) => None,
            })
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }
}

// ----- JSONL -----

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLine {
    id: String,
    y: f64,
    text: Vec<serde_json::Value>,
    visual: Vec<Vec<f64>>,
    audio: Vec<Vec<f64>>,
}

#[derive(Serialize)]
struct LineOut<'a> {
    id: &'a str,
    y: f64,
    text: TextOut<'a>,
    visual: Vec<&'a [f64]>,
    audio: Vec<&'a [f64]>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum TextOut<'a> {
    Tokens(&'a [usize]),
    Vector(&'a [f64]),
}

fn rows_of(t: &Tensor) -> Vec<&[f64]> {
    (0..t.rows()).map(|r| t.row(r)).collect()
}

fn sequence(rows: Vec<Vec<f64>>, width: usize, name: &str, line: usize) -> Result<Tensor> {
    if rows.is_empty() {
        return Err(Error::data(Some(line), format!("{name} sequence is empty")));
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != width) {
        return Err(Error::data(
            Some(line),
            format!(
                "{name} row {bad} has width {}, header says {width}",
                rows[bad].len()
            ),
        ));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::data(
            Some(line),
            format!("{name} has non-finite values"),
        ));
    }
    Tensor::from_rows(&rows)
}

fn parse_line(raw: RawLine, header: &DatasetHeader, line: usize) -> Result<Utterance> {
    if !raw.y.is_finite() || !(LABEL_MIN..=LABEL_MAX).contains(&raw.y) {
        return Err(Error::data(
            Some(line),
            format!("label {} outside [-3, 3]", raw.y),
        ));
    }
    if raw.text.is_empty() {
        return Err(Error::data(Some(line), "text sequence is empty"));
    }
    let text = match header.text_mode {
        TextMode::Tokens => {
            let mut ids = Vec::with_capacity(raw.text.len());
            for v in &raw.text {
                let id = v.as_u64().ok_or_else(|| {
                    Error::data(
                        Some(line),
                        format!("token {v} is not a non-negative integer"),
                    )
                })? as usize;
                if id >= header.vocab_size {
                    return Err(Error::data(
                        Some(line),
                        format!("token {id} outside vocabulary of {}", header.vocab_size),
                    ));
                }
                ids.push(id);
            }
            TextInput::Tokens(ids)
        }
        TextMode::Vectors => {
            let mut vals = Vec::with_capacity(raw.text.len());
            for v in &raw.text {
                let x = v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| {
                    Error::data(Some(line), format!("text value {v} is not a finite number"))
                })?;
                vals.push(x);
            }
            if let Some(dim) = header.text_dim {
                if vals.len() != dim {
                    return Err(Error::data(
                        Some(line),
                        format!("text vector has width {}, header says {dim}", vals.len()),
                    ));
                }
            }
            TextInput::Vector(vals)
        }
    };
    Ok(Utterance {
        id: raw.id,
        y: raw.y,
        text,
        visual: sequence(raw.visual, header.d_v, "visual", line)?,
        audio: sequence(raw.audio, header.d_a, "audio", line)?,
    })
}

/// Reads and validates one utterance per non-blank line.
///
/// Errors carry the 1-based line number of the first violation.
pub fn load_jsonl(path: impl AsRef<Path>, header: &DatasetHeader) -> Result<Vec<Utterance>> {
    let path = path.as_ref();
    header.validate()?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut vector_width = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawLine = serde_json::from_str(&line)
            .map_err(|e| Error::data(Some(lineno), format!("malformed JSON: {e}")))?;
        let utt = parse_line(raw, header, lineno)?;
        if let TextInput::Vector(v) = &utt.text {
            match vector_width {
                None => vector_width = Some(v.len()),
                Some(w) if w != v.len() => {
                    return Err(Error::data(
                        Some(lineno),
                        format!("text vector has width {}, earlier lines have {w}", v.len()),
                    ))
                }
                Some(_) => {}
            }
        }
        out.push(utt);
    }
    Ok(out)
}

pub fn write_jsonl(path: impl AsRef<Path>, utterances: &[Utterance]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for u in utterances {
        let line = LineOut {
            id: &u.id,
            y: u.y,
            text: match &u.text {
                TextInput::Tokens(t) => TextOut::Tokens(t),
                TextInput::Vector(v) => TextOut::Vector(v),
            },
            visual: rows_of(&u.visual),
            audio: rows_of(&u.audio),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_header(path: impl AsRef<Path>) -> Result<DatasetHeader> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    header.validate()?;
    Ok(header)
}

pub fn write_header(path: impl AsRef<Path>, header: &DatasetHeader) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(header).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_split(dir: impl AsRef<Path>, split: Split) -> Result<Dataset> {
    let dir = dir.as_ref();
    let header = read_header(dir.join(format!("{}.header.json", split.name())))?;
    let utterances = load_jsonl(dir.join(format!("{}.jsonl", split.name())), &header)?;
    Ok(Dataset { header, utterances })
}

pub fn save_split(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = dataset.header.split.name();
    write_header(dir.join(format!("{name}.header.json")), &dataset.header)?;
    write_jsonl(dir.join(format!("{name}.jsonl")), &dataset.utterances)
}

pub fn load_splits(dir: impl AsRef<Path>) -> Result<Splits> {
    let dir = dir.as_ref();
    Ok(Splits {
        train: load_split(dir, Split::Train)?,
        valid: load_split(dir, Split::Valid)?,
        test: load_split(dir, Split::Test)?,
    })
}

pub fn save_splits(dir: impl AsRef<Path>, splits: &Splits) -> Result<()> {
    for split in Split::ALL {
        save_split(dir.as_ref(), splits.get(split))?;
    }
    Ok(())
}

// ----- synthetic generator -----

/// Inclusive range of sequence lengths.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
    pub d_v: usize,
    pub d_a: usize,
    pub vocab: usize,
    pub text_len: LengthRange,
    pub visual_len: LengthRange,
    pub audio_len: LengthRange,
    pub sigma_text: f64,
    pub sigma_visual: f64,
    pub sigma_audio: f64,
    pub conflict_prob: f64,
}

/// Number of vocabulary bands; one per Acc-7 interval.
pub const TEXT_BANDS: usize = 7;

impl Default for SyntheticConfig {
    fn default() -> Self {
        let len = LengthRange { min: 4, max: 20 };
        SyntheticConfig {
            n_train: 2000,
            n_valid: 430,
            n_test: 430,
            seed: 42,
            d_v: 35,
            d_a: 74,
            vocab: 512,
            text_len: len,
            visual_len: len,
            audio_len: len,
            sigma_text: 0.1,
            sigma_visual: 0.4,
            sigma_audio: 0.4,
            conflict_prob: 0.2,
        }
    }
}

impl SyntheticConfig {
    /// Splits `n` samples 70/15/15, rounding the held-out splits to nearest.
    pub fn with_total(mut self, n: usize) -> Self {
        let held = (n as f64 * 0.15).round() as usize;
        self.n_valid = held;
        self.n_test = held;
        self.n_train = n.saturating_sub(2 * held);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.conflict_prob) {
            return Err(Error::Config("conflict_prob must lie in [0, 1]".into()));
        }
        if [self.sigma_text, self.sigma_visual, self.sigma_audio]
            .iter()
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return Err(Error::Config("noise sigmas must be finite and >= 0".into()));
        }
        if self.d_v == 0 || self.d_a == 0 {
            return Err(Error::Config("feature widths must be at least 1".into()));
        }
        if self.vocab < TEXT_BANDS {
            return Err(Error::Config(format!(
                "vocab must hold at least {TEXT_BANDS} tokens"
            )));
        }
        for (name, r) in [
            ("text", self.text_len),
            ("visual", self.visual_len),
            ("audio", self.audio_len),
        ] {
            if r.min == 0 || r.min > r.max {
                return Err(Error::Config(format!("bad {name} length range {r:?}")));
            }
        }
        Ok(())
    }

    fn header(&self, split: Split) -> DatasetHeader {
        DatasetHeader {
            d_v: self.d_v,
            d_a: self.d_a,
            text_mode: TextMode::Tokens,
            vocab_size: self.vocab,
            split,
            text_dim: None,
        }
    }
}

/// A generated utterance together with the latent it was built from.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub utterance: Utterance,
    /// Latent sentiment carried by the text channel.
    pub latent: f64,
    /// Independent latent that replaced one non-text channel, if any.
    pub conflict: Option<f64>,
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = crate::autodiff::norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn signal_sequence(
    rng: &mut ChaCha8Rng,
    latent: f64,
    direction: &[f64],
    sigma: f64,
    len: LengthRange,
) -> Tensor {
    let l = rng.random_range(len.min..=len.max);
    let d = direction.len();
    let mut data = Vec::with_capacity(l * d);
    for _ in 0..l {
        for w in direction {
            let noise: f64 = rng.sample(StandardNormal);
            data.push(latent / 3.0 * w + sigma * noise);
        }
    }
    Tensor::matrix(l, d, data).expect("sized by construction")
}

fn text_band(value: f64) -> usize {
    let z = value.clamp(LABEL_MIN, LABEL_MAX);
    (((z - LABEL_MIN) / (LABEL_MAX - LABEL_MIN) * TEXT_BANDS as f64) as usize).min(TEXT_BANDS - 1)
}

/// Generates every sample of a synthetic configuration in order.
///
/// Visual and audio rows are `(s/3)·w + σ·noise` for a fixed unit direction
/// `w` per modality. Text tokens come from the vocabulary band of the
/// (slightly noised) latent. A conflicting sample replaces one non-text
/// latent with an independent `s'` and is labeled `0.7·s + 0.3·s'`.
pub fn synthesize_samples(config: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let w_v = unit_direction(&mut rng, config.d_v);
    let w_a = unit_direction(&mut rng, config.d_a);
    let band_size = config.vocab / TEXT_BANDS;
    let total = config.n_train + config.n_valid + config.n_test;

    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let s: f64 = rng.random_range(LABEL_MIN..=LABEL_MAX);
        let conflict = if rng.random::<f64>() < config.conflict_prob {
            let replace_visual = rng.random::<bool>();
            let other: f64 = rng.random_range(LABEL_MIN..=LABEL_MAX);
            Some((replace_visual, other))
        } else {
            None
        };
        let (s_v, s_a) = match conflict {
            Some((true, other)) => (other, s),
            Some((false, other)) => (s, other),
            None => (s, s),
        };

        let text_len = rng.random_range(config.text_len.min..=config.text_len.max);
        let tokens = (0..text_len)
            .map(|_| {
                let noise: f64 = rng.sample(StandardNormal);
                let band = text_band(s + config.sigma_text * noise);
                band * band_size + rng.random_range(0..band_size)
            })
            .collect();
        let visual = signal_sequence(&mut rng, s_v, &w_v, config.sigma_visual, config.visual_len);
        let audio = signal_sequence(&mut rng, s_a, &w_a, config.sigma_audio, config.audio_len);

        let y = match conflict {
            Some((_, other)) => (0.7 * s + 0.3 * other).clamp(LABEL_MIN, LABEL_MAX),
            None => s,
        };
        out.push(SyntheticSample {
            utterance: Utterance {
                id: format!("syn-{idx:06}"),
                y,
                text: TextInput::Tokens(tokens),
                visual,
                audio,
            },
            latent: s,
            conflict: conflict.map(|(_, o)| o),
        });
    }
    Ok(out)
}

/// Synthetic train/valid/test datasets, deterministic in the seed.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Splits> {
    let mut samples = synthesize_samples(config)?.into_iter().map(|s| s.utterance);
    let mut take = |n: usize, split: Split| Dataset {
        header: config.header(split),
        utterances: samples.by_ref().take(n).collect(),
    };
    Ok(Splits {
        train: take(config.n_train, Split::Train),
        valid: take(config.n_valid, Split::Valid),
        test: take(config.n_test, Split::Test),
    })
}

// ----- batching -----

pub const MIN_BATCH: usize = 2;

/// Shuffled index batches for one epoch, keyed by `(seed, epoch)`.
///
/// A trailing batch shorter than two samples is dropped.
pub fn make_batches(
    n: usize,
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<usize>>> {
    if batch_size < MIN_BATCH {
        return Err(Error::Config(format!(
            "batch_size {batch_size} is too small: contrastive losses need at least {MIN_BATCH} samples per batch to form pairs"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let key = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= MIN_BATCH)
        .map(<[usize]>::to_vec)
        .collect())
}
