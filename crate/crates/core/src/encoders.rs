//! Toy text, spectrum and audio encoders projecting into one shared space.
//!
//! * text: token embedding + sinusoidal positions, one single-head
//!   self-attention block over the unpadded span, readout at `[EOS]`.
//! * spectrum: adaptive average pooling to a `G×G` grid of cell vectors,
//!   residual MLP per cell, QKV attention pooling queried by the cell mean.
//! * audio: non-overlapping waveform frames, learned linear filterbank with a
//!   squared-magnitude nonlinearity, temporal mean, residual MLP.
//!
//! Each branch ends in its projection into the shared space and an L2
//! normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MuserError, Result};
use crate::numerics::{GradTape, Gradients, Matrix, ParamSet, Var};
use crate::signal::{AudioClip, Spectrum};
use crate::text::TokenSequence;

pub const NORM_EPS: f64 = 1e-12;
const STANDARDIZE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Shared embedding dimension.
    pub embed_dim: usize,
    pub text_dim: usize,
    pub spec_dim: usize,
    pub spec_hidden: usize,
    pub audio_dim: usize,
    pub audio_hidden: usize,
    /// Spectrum pooling grid side.
    pub grid: usize,
    /// Samples per audio frontend frame.
    pub frame_feat: usize,
    pub vocab_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 64,
            text_dim: 64,
            spec_dim: 64,
            spec_hidden: 128,
            audio_dim: 64,
            audio_hidden: 128,
            grid: 4,
            frame_feat: 256,
            vocab_size: 2048,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("text_dim", self.text_dim),
            ("spec_dim", self.spec_dim),
            ("spec_hidden", self.spec_hidden),
            ("audio_dim", self.audio_dim),
            ("audio_hidden", self.audio_hidden),
            ("grid", self.grid),
            ("frame_feat", self.frame_feat),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(MuserError::invalid(format!("model.{name} must be positive")));
        }
        if self.vocab_size <= crate::text::NUM_RESERVED {
            return Err(MuserError::invalid(format!(
                "vocab_size must exceed the {} reserved ids",
                crate::text::NUM_RESERVED
            )));
        }
        Ok(())
    }
}

/// Identifies one trainable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    TokenEmbedding,
    TextQuery,
    TextKey,
    TextValue,
    TextOut,
    TextProj,
    SpecMlpW1,
    SpecMlpB1,
    SpecMlpW2,
    SpecMlpB2,
    PoolQuery,
    PoolKey,
    PoolValue,
    SpecProj,
    FrameW,
    FrameB,
    AudioMlpW1,
    AudioMlpB1,
    AudioMlpW2,
    AudioMlpB2,
    AudioProj,
    Temperature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Text,
    Spectrum,
    Audio,
    Shared,
}

impl ParamId {
    pub const ALL: [ParamId; 22] = [
        ParamId::TokenEmbedding,
        ParamId::TextQuery,
        ParamId::TextKey,
        ParamId::TextValue,
        ParamId::TextOut,
        ParamId::TextProj,
        ParamId::SpecMlpW1,
        ParamId::SpecMlpB1,
        ParamId::SpecMlpW2,
        ParamId::SpecMlpB2,
        ParamId::PoolQuery,
        ParamId::PoolKey,
        ParamId::PoolValue,
        ParamId::SpecProj,
        ParamId::FrameW,
        ParamId::FrameB,
        ParamId::AudioMlpW1,
        ParamId::AudioMlpB1,
        ParamId::AudioMlpW2,
        ParamId::AudioMlpB2,
        ParamId::AudioProj,
        ParamId::Temperature,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamId::TokenEmbedding => "text.token_embedding",
            ParamId::TextQuery => "text.attn_query",
            ParamId::TextKey => "text.attn_key",
            ParamId::TextValue => "text.attn_value",
            ParamId::TextOut => "text.attn_out",
            ParamId::TextProj => "text.proj",
            ParamId::SpecMlpW1 => "spec.mlp_w1",
            ParamId::SpecMlpB1 => "spec.mlp_b1",
            ParamId::SpecMlpW2 => "spec.mlp_w2",
            ParamId::SpecMlpB2 => "spec.mlp_b2",
            ParamId::PoolQuery => "spec.pool_query",
            ParamId::PoolKey => "spec.pool_key",
            ParamId::PoolValue => "spec.pool_value",
            ParamId::SpecProj => "spec.proj",
            ParamId::FrameW => "audio.frame_w",
            ParamId::FrameB => "audio.frame_b",
            ParamId::AudioMlpW1 => "audio.mlp_w1",
            ParamId::AudioMlpB1 => "audio.mlp_b1",
            ParamId::AudioMlpW2 => "audio.mlp_w2",
            ParamId::AudioMlpB2 => "audio.mlp_b2",
            ParamId::AudioProj => "audio.proj",
            ParamId::Temperature => "temperature",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamId> {
        Self::ALL.iter().copied().find(|p| p.name() == name)
    }

    pub fn branch(self) -> Branch {
        use ParamId::*;
        match self {
            TokenEmbedding | TextQuery | TextKey | TextValue | TextOut | TextProj => Branch::Text,
            SpecMlpW1 | SpecMlpB1 | SpecMlpW2 | SpecMlpB2 | PoolQuery | PoolKey | PoolValue
            | SpecProj => Branch::Spectrum,
            FrameW | FrameB | AudioMlpW1 | AudioMlpB1 | AudioMlpW2 | AudioMlpB2 | AudioProj => {
                Branch::Audio
            }
            Temperature => Branch::Shared,
        }
    }

    /// (rows, cols) of the tensor and the (fan_in, fan_out) of its layer.
    fn layout(self, c: &ModelConfig) -> ((usize, usize), (usize, usize)) {
        use ParamId::*;
        let sq = |d: usize| ((d, d), (d, d));
        match self {
            TokenEmbedding => ((c.vocab_size, c.text_dim), (c.vocab_size, c.text_dim)),
            TextQuery | TextKey | TextValue | TextOut => sq(c.text_dim),
            TextProj => ((c.text_dim, c.embed_dim), (c.text_dim, c.embed_dim)),
            SpecMlpW1 => ((c.spec_dim, c.spec_hidden), (c.spec_dim, c.spec_hidden)),
            SpecMlpB1 => ((1, c.spec_hidden), (c.spec_dim, c.spec_hidden)),
            SpecMlpW2 => ((c.spec_hidden, c.spec_dim), (c.spec_hidden, c.spec_dim)),
            SpecMlpB2 => ((1, c.spec_dim), (c.spec_hidden, c.spec_dim)),
            PoolQuery | PoolKey | PoolValue => sq(c.spec_dim),
            SpecProj => ((c.spec_dim, c.embed_dim), (c.spec_dim, c.embed_dim)),
            FrameW => ((c.frame_feat, c.audio_dim), (c.frame_feat, c.audio_dim)),
            FrameB => ((1, c.audio_dim), (c.frame_feat, c.audio_dim)),
            AudioMlpW1 => ((c.audio_dim, c.audio_hidden), (c.audio_dim, c.audio_hidden)),
            AudioMlpB1 => ((1, c.audio_hidden), (c.audio_dim, c.audio_hidden)),
            AudioMlpW2 => ((c.audio_hidden, c.audio_dim), (c.audio_hidden, c.audio_dim)),
            AudioMlpB2 => ((1, c.audio_dim), (c.audio_hidden, c.audio_dim)),
            AudioProj => ((c.audio_dim, c.embed_dim), (c.audio_dim, c.embed_dim)),
            Temperature => ((1, 1), (1, 1)),
        }
    }

    pub fn shape(self, c: &ModelConfig) -> (usize, usize) {
        self.layout(c).0
    }

    /// Uniform init bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn init_bound(self, c: &ModelConfig) -> f64 {
        let (fan_in, fan_out) = self.layout(c).1;
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }
}

/// Initial temperature `ln(1/0.07)`.
pub fn initial_temperature() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Every trainable tensor, indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: ModelConfig,
    tensors: Vec<Matrix>,
}

impl ModelParams {
    /// Assembles params from named tensors, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        if tensors.len() != ParamId::ALL.len() {
            return Err(MuserError::format(format!(
                "expected {} tensors, got {}",
                ParamId::ALL.len(),
                tensors.len()
            )));
        }
        for (id, t) in ParamId::ALL.iter().zip(&tensors) {
            let want = id.shape(&config);
            if t.shape() != want {
                return Err(MuserError::Shape {
                    op: "ModelParams::from_tensors",
                    left: format!("{} expects {}x{}", id.name(), want.0, want.1),
                    right: t.shape_str(),
                });
            }
            t.check_finite(id.name())?;
        }
        Ok(ModelParams { config, tensors })
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config,
            tensors: self
                .tensors
                .iter()
                .map(|t| Matrix::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id as usize]
    }

    pub fn tensors(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        ParamId::ALL.iter().copied().zip(self.tensors.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Matrix)> {
        ParamId::ALL.iter().copied().zip(self.tensors.iter_mut())
    }

    pub fn temperature(&self) -> f64 {
        self.get(ParamId::Temperature).get(0, 0)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    /// Flat offset of each tensor's first entry, in [`ParamId::ALL`] order.
    pub fn offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.tensors
            .iter()
            .map(|t| {
                let o = acc;
                acc += t.len();
                o
            })
            .collect()
    }

    /// Flat entry range covering one tensor.
    pub fn entry_range(&self, id: ParamId) -> std::ops::Range<usize> {
        let start = self.offsets()[id as usize];
        start..start + self.get(id).len()
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (t, m) in self.tensors.iter().enumerate() {
            if index < m.len() {
                return (t, index);
            }
            index -= m.len();
        }
        panic!("parameter entry out of range");
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn register(&self, tape: &mut GradTape) -> ParamVars {
        ParamVars {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect(),
        }
    }

    /// Reads the gradient of every registered tensor.
    pub fn gradients(&self, vars: &ParamVars, grads: &Gradients) -> ModelParams {
        ModelParams {
            config: self.config,
            tensors: vars.vars.iter().map(|&v| grads.get(v)).collect(),
        }
    }
}

impl ParamSet for ModelParams {
    fn num_entries(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    fn entry(&self, index: usize) -> f64 {
        let (t, i) = self.locate(index);
        self.tensors[t].data()[i]
    }

    fn set_entry(&mut self, index: usize, value: f64) {
        let (t, i) = self.locate(index);
        self.tensors[t].data_mut()[i] = value;
    }
}

/// Tape handles for every parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: Vec<Var>,
}

impl ParamVars {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id as usize]
    }
}

/// Uniform(−a, a) init per tensor, biases included; temperature `ln(1/0.07)`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = ParamId::ALL
        .iter()
        .map(|id| {
            let (r, c) = id.shape(config);
            if *id == ParamId::Temperature {
                return Matrix::scalar(initial_temperature());
            }
            let a = id.init_bound(config);
            Matrix::from_fn(r, c, |_, _| rng.random_range(-a..=a))
        })
        .collect();
    ModelParams::from_tensors(*config, tensors)
}

/// A unit-norm vector in the shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Vec<f64>);

impl Embedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Sinusoidal position table, `len × dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Matrix {
    Matrix::from_fn(len, dim, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Adaptive average-pooling window `[start, end)` for output `i` of `n` over `len`.
fn pool_window(i: usize, n: usize, len: usize) -> (usize, usize) {
    let start = i * len / n;
    let end = ((i + 1) * len).div_ceil(n);
    (start, end.max(start + 1).min(len))
}

/// Pools spectrum magnitudes into `grid²` cell vectors of length `dim` and
/// standardizes them. Row `f·grid + t` is frequency band `f`, time segment
/// `t`; within a cell, entries are the band's frequency profile pooled to
/// `dim` sub-bins and averaged over the segment's frames.
pub fn spectrum_cells(spec: &Spectrum, grid: usize, dim: usize) -> Result<Matrix> {
    let (bins, frames) = spec.mags.shape();
    if bins == 0 || frames == 0 {
        return Err(MuserError::invalid("empty spectrum"));
    }
    spec.mags.check_finite("spectrum")?;
    let fine = grid * dim;
    let mut cells = Matrix::zeros(grid * grid, dim);
    for t in 0..grid {
        let (t0, t1) = pool_window(t, grid, frames);
        for fb in 0..fine {
            let (f0, f1) = pool_window(fb, fine, bins);
            let mut acc = 0.0;
            for f in f0..f1 {
                for c in t0..t1 {
                    acc += spec.mags.get(f, c);
                }
            }
            let mean = acc / ((f1 - f0) * (t1 - t0)) as f64;
            cells.set((fb / dim) * grid + t, fb % dim, mean);
        }
    }
    Ok(standardize(cells))
}

fn standardize(m: Matrix) -> Matrix {
    let n = m.len() as f64;
    let mean = m.data().iter().sum::<f64>() / n;
    let var = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let scale = 1.0 / (var + STANDARDIZE_EPS).sqrt();
    m.map(|v| (v - mean) * scale)
}

/// Splits a clip into non-overlapping frames of `frame_feat` samples (the
/// tail that does not fill a frame is dropped).
pub fn audio_frames(clip: &AudioClip, frame_feat: usize) -> Result<Matrix> {
    let n = clip.len() / frame_feat.max(1);
    if frame_feat == 0 || n == 0 {
        return Err(MuserError::invalid(format!(
            "clip of {} samples is shorter than the {frame_feat}-sample frontend frame",
            clip.len()
        )));
    }
    Matrix::new(n, frame_feat, clip.samples()[..n * frame_feat].to_vec())
}

/// Text branch on a tape; returns the `1×D` normalized embedding.
pub fn text_forward(tape: &mut GradTape, p: &ParamVars, tokens: &TokenSequence) -> Result<Var> {
    let ids = tokens.unpadded();
    let dim = tape.value(p.get(ParamId::TokenEmbedding)).cols();
    let emb = tape.gather_rows(p.get(ParamId::TokenEmbedding), ids)?;
    let pos = tape.leaf(positional_encoding(ids.len(), dim));
    let x = tape.add(emb, pos)?;

    let last = tape.select_row(x, ids.len() - 1)?;
    let q = tape.matmul(last, p.get(ParamId::TextQuery))?;
    let k = tape.matmul(x, p.get(ParamId::TextKey))?;
    let v = tape.matmul(x, p.get(ParamId::TextValue))?;
    let scores = tape.matmul_bt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dim as f64).sqrt());
    let attn = tape.softmax_rows(scores);
    let mixed = tape.matmul(attn, v)?;
    let out = tape.matmul(mixed, p.get(ParamId::TextOut))?;
    let hidden = tape.add(last, out)?;

    let z = tape.matmul(hidden, p.get(ParamId::TextProj))?;
    Ok(tape.l2_normalize_rows(z, NORM_EPS))
}

/// Spectrum branch on a tape over pre-pooled cells from [`spectrum_cells`].
pub fn spectrum_forward(tape: &mut GradTape, p: &ParamVars, cells: &Matrix) -> Result<Var> {
    let dim = cells.cols();
    let x = tape.leaf(cells.clone());
    let h = tape.matmul(x, p.get(ParamId::SpecMlpW1))?;
    let h = tape.add_row(h, p.get(ParamId::SpecMlpB1))?;
    let h = tape.tanh(h);
    let h = tape.matmul(h, p.get(ParamId::SpecMlpW2))?;
    let h = tape.add_row(h, p.get(ParamId::SpecMlpB2))?;
    let c = tape.add(x, h)?;

    let pooled = tape.mean_rows(c)?;
    let q = tape.matmul(pooled, p.get(ParamId::PoolQuery))?;
    let k = tape.matmul(c, p.get(ParamId::PoolKey))?;
    let v = tape.matmul(c, p.get(ParamId::PoolValue))?;
    let scores = tape.matmul_bt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (dim as f64).sqrt());
    let attn = tape.softmax_rows(scores);
    let attended = tape.matmul(attn, v)?;

    let z = tape.matmul(attended, p.get(ParamId::SpecProj))?;
    Ok(tape.l2_normalize_rows(z, NORM_EPS))
}

/// Audio branch on a tape over frames from [`audio_frames`].
pub fn audio_forward(tape: &mut GradTape, p: &ParamVars, frames: &Matrix) -> Result<Var> {
    let x = tape.leaf(frames.clone());
    let z = tape.matmul(x, p.get(ParamId::FrameW))?;
    let z = tape.add_row(z, p.get(ParamId::FrameB))?;
    let energy = tape.square(z);
    let u = tape.mean_rows(energy)?;

    let h = tape.matmul(u, p.get(ParamId::AudioMlpW1))?;
    let h = tape.add_row(h, p.get(ParamId::AudioMlpB1))?;
    let h = tape.tanh(h);
    let h = tape.matmul(h, p.get(ParamId::AudioMlpW2))?;
    let h = tape.add_row(h, p.get(ParamId::AudioMlpB2))?;
    let h = tape.add(u, h)?;

    let out = tape.matmul(h, p.get(ParamId::AudioProj))?;
    Ok(tape.l2_normalize_rows(out, NORM_EPS))
}

fn finish(tape: &GradTape, v: Var, what: &str) -> Result<Embedding> {
    let m = tape.value(v);
    m.check_finite(what)?;
    Ok(Embedding(m.data().to_vec()))
}

pub fn encode_text(tokens: &TokenSequence, params: &ModelParams) -> Result<Embedding> {
    let mut tape = GradTape::new();
    let p = params.register(&mut tape);
    let v = text_forward(&mut tape, &p, tokens)?;
    finish(&tape, v, "encode_text")
}

pub fn encode_spectrum(spec: &Spectrum, params: &ModelParams) -> Result<Embedding> {
    let c = params.config();
    encode_spectrum_cells(&spectrum_cells(spec, c.grid, c.spec_dim)?, params)
}

pub fn encode_spectrum_cells(cells: &Matrix, params: &ModelParams) -> Result<Embedding> {
    let mut tape = GradTape::new();
    let p = params.register(&mut tape);
    let v = spectrum_forward(&mut tape, &p, cells)?;
    finish(&tape, v, "encode_spectrum")
}

pub fn encode_audio(clip: &AudioClip, params: &ModelParams) -> Result<Embedding> {
    encode_audio_frames(&audio_frames(clip, params.config().frame_feat)?, params)
}

pub fn encode_audio_frames(frames: &Matrix, params: &ModelParams) -> Result<Embedding> {
    let mut tape = GradTape::new();
    let p = params.register(&mut tape);
    let v = audio_forward(&mut tape, &p, frames)?;
    finish(&tape, v, "encode_audio")
}
