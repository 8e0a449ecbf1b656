//! Batch sampling, optimizer updates, the training loop and checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_flat, OptimizerKind, TrainConfig};
use crate::contrastive::{muser_loss_on_tape, LossOptions};
use crate::data::DatasetRecord;
use crate::encoders::{
    audio_forward, audio_frames, init_params, spectrum_cells, spectrum_forward, text_forward, ModelParams,
    ParamId,
};
use crate::error::{MuserError, Result};
use crate::numerics::{GradTape, Matrix, Objective};
use crate::signal::stft;
use crate::text::{build_vocab, tokenize, TokenSequence, Vocab};

/// Model inputs derived once per record.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedExample {
    pub tokens: TokenSequence,
    pub cells: Matrix,
    pub frames: Matrix,
}

/// Text supervision for every record under the configured template, with
/// clauses dropped where a field is missing.
pub fn supervision_texts(config: &TrainConfig, dataset: &[DatasetRecord]) -> Result<Vec<String>> {
    let spec = config.template_spec()?;
    dataset
        .iter()
        .map(|r| {
            spec.render_available(&r.metadata)
                .map_err(|e| MuserError::data(format!("record `{}`: {e}", r.id)))
        })
        .collect()
}

/// Word vocabulary over the rendered supervision, capped at the model's size.
pub fn build_training_vocab(config: &TrainConfig, dataset: &[DatasetRecord]) -> Result<Vocab> {
    let texts = supervision_texts(config, dataset)?;
    Ok(build_vocab(&texts, 1)?.truncated(config.model.vocab_size))
}

pub fn prepare_examples(
    config: &TrainConfig,
    vocab: &Vocab,
    dataset: &[DatasetRecord],
) -> Result<Vec<PreparedExample>> {
    let texts = supervision_texts(config, dataset)?;
    let m = &config.model;
    dataset
        .iter()
        .zip(texts)
        .map(|(r, text)| {
            let clip = r.load_audio()?;
            let spec = stft(&clip, &config.stft)?;
            Ok(PreparedExample {
                tokens: tokenize(&text, vocab, config.max_len)?,
                cells: spectrum_cells(&spec, m.grid, m.spec_dim)?,
                frames: audio_frames(&clip, m.frame_feat)
                    .map_err(|e| MuserError::data(format!("record `{}`: {e}", r.id)))?,
            })
        })
        .collect()
}

/// Permutation of `0..len` for one epoch, keyed by `(seed, epoch)`.
pub fn shuffle_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    order
}

/// Full batches of record indices; the shuffled remainder is dropped.
pub fn make_batches(len: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(MuserError::invalid("batch size must be positive"));
    }
    if len < batch_size {
        return Err(MuserError::data(format!(
            "dataset of {len} records is smaller than the batch size {batch_size}"
        )));
    }
    let order = shuffle_order(len, seed, epoch);
    Ok(order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}

/// The contrastive loss of one batch as a function of the parameters.
pub struct BatchObjective<'a> {
    pub examples: &'a [PreparedExample],
    pub batch: &'a [usize],
    pub spectrum_enabled: bool,
    pub options: LossOptions,
}

impl BatchObjective<'_> {
    fn run(&self, params: &ModelParams, with_grad: bool) -> Result<(f64, Option<ModelParams>)> {
        let mut tape = GradTape::new();
        let p = params.register(&mut tape);
        let mut audio = Vec::with_capacity(self.batch.len());
        let mut text = Vec::with_capacity(self.batch.len());
        let mut spec = Vec::with_capacity(self.batch.len());
        for &i in self.batch {
            let ex = self.examples.get(i).ok_or_else(|| {
                MuserError::invalid(format!("batch index {i} outside {} examples", self.examples.len()))
            })?;
            audio.push(audio_forward(&mut tape, &p, &ex.frames)?);
            text.push(text_forward(&mut tape, &p, &ex.tokens)?);
            if self.spectrum_enabled {
                spec.push(spectrum_forward(&mut tape, &p, &ex.cells)?);
            }
        }
        let a = tape.stack_rows(&audio)?;
        let t = tape.stack_rows(&text)?;
        let s = if self.spectrum_enabled {
            Some(tape.stack_rows(&spec)?)
        } else {
            None
        };
        let loss = muser_loss_on_tape(&mut tape, a, t, s, p.get(ParamId::Temperature), &self.options)?;
        let value = tape.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(MuserError::Numerical(format!("loss is {value}")));
        }
        if !with_grad {
            return Ok((value, None));
        }
        let grads = tape.backward(loss)?;
        Ok((value, Some(params.gradients(&p, &grads))))
    }
}

impl Objective<ModelParams> for BatchObjective<'_> {
    fn loss(&self, params: &ModelParams) -> Result<f64> {
        Ok(self.run(params, false)?.0)
    }

    fn loss_and_grad(&self, params: &ModelParams) -> Result<(f64, ModelParams)> {
        let (l, g) = self.run(params, true)?;
        Ok((l, g.expect("requested")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    /// Adam first and second moments; absent for SGD.
    pub moments: Option<(ModelParams, ModelParams)>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, params: &ModelParams) -> Self {
        OptimizerState {
            step: 0,
            moments: match kind {
                OptimizerKind::Sgd => None,
                OptimizerKind::Adam => Some((params.zeros_like(), params.zeros_like())),
            },
        }
    }
}

pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if params.config() != grads.config() {
        return Err(MuserError::invalid("gradient layout does not match the parameters"));
    }
    for (id, g) in grads.tensors() {
        if !g.is_finite() {
            return Err(MuserError::Numerical(format!("non-finite gradient for {}", id.name())));
        }
    }
    state.step += 1;
    let lr = config.lr;
    match (config.optimizer, &mut state.moments) {
        (OptimizerKind::Sgd, _) => {
            for ((_, p), (_, g)) in params.tensors_mut().zip(grads.tensors()) {
                p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
            }
        }
        (OptimizerKind::Adam, Some((m, v))) => {
            let (b1, b2) = (config.beta1, config.beta2);
            let t = state.step as f64;
            let c1 = 1.0 - b1.powf(t);
            let c2 = 1.0 - b2.powf(t);
            let tensors = params
                .tensors_mut()
                .zip(grads.tensors())
                .zip(m.tensors_mut().zip(v.tensors_mut()));
            for (((_, p), (_, g)), ((_, m), (_, v))) in tensors {
                let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
                for i in 0..p.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    p[i] -= lr * mhat / (vhat.sqrt() + config.adam_eps);
                }
            }
        }
        (OptimizerKind::Adam, None) => {
            return Err(MuserError::invalid("adam step without moment buffers"));
        }
    }
    Ok(())
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    /// Seed of the per-epoch shuffle stream.
    pub rng_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub batch: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub batches: Vec<LogRecord>,
    /// `(epoch, mean batch loss)`.
    pub epoch_means: Vec<(usize, f64)>,
}

impl TrainLog {
    /// `epoch,batch,loss` lines; each epoch closes with `epoch,mean,loss`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &(epoch, mean) in &self.epoch_means {
            for r in self.batches.iter().filter(|r| r.epoch == epoch) {
                out.push_str(&format!("{},{},{}\n", r.epoch, r.batch, r.loss));
            }
            out.push_str(&format!("{epoch},mean,{mean}\n"));
        }
        out
    }

    pub fn mean_losses(&self) -> Vec<f64> {
        self.epoch_means.iter().map(|&(_, m)| m).collect()
    }
}

/// Trains from freshly initialized parameters. `on_checkpoint` receives the
/// intermediate checkpoints requested by `checkpoint_every`.
pub fn train(
    config: &TrainConfig,
    dataset: &[DatasetRecord],
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    let vocab = build_training_vocab(config, dataset)?;
    let params = init_params(&config.model, config.seed)?;
    let start = Checkpoint {
        optimizer: OptimizerState::new(config.optimizer, &params),
        config: config.clone(),
        vocab,
        params,
        epoch: 0,
        rng_seed: config.seed,
    };
    run(start, dataset, on_checkpoint)
}

/// Continues a checkpointed run up to its configured epoch count.
pub fn resume(
    checkpoint: Checkpoint,
    dataset: &[DatasetRecord],
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, TrainLog)> {
    checkpoint.config.validate()?;
    run(checkpoint, dataset, on_checkpoint)
}

/// Starts from `base`'s parameters and vocabulary with a fresh optimizer and
/// epoch counter. Model dimensions and text settings come from `base`.
pub fn fine_tune(
    base: &Checkpoint,
    config: &TrainConfig,
    dataset: &[DatasetRecord],
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, TrainLog)> {
    let mut config = config.clone();
    config.model = base.config.model;
    config.max_len = base.config.max_len;
    config.validate()?;
    let start = Checkpoint {
        optimizer: OptimizerState::new(config.optimizer, &base.params),
        vocab: base.vocab.clone(),
        params: base.params.clone(),
        epoch: 0,
        rng_seed: config.seed,
        config,
    };
    run(start, dataset, on_checkpoint)
}

fn run(
    mut state: Checkpoint,
    dataset: &[DatasetRecord],
    on_checkpoint: &mut dyn FnMut(&Checkpoint) -> Result<()>,
) -> Result<(Checkpoint, TrainLog)> {
    let config = state.config.clone();
    if dataset.len() < config.batch_size {
        return Err(MuserError::data(format!(
            "no training step fits: {} records for batch size {}",
            dataset.len(),
            config.batch_size
        )));
    }
    if state.epoch >= config.epochs {
        return Err(MuserError::invalid(format!(
            "checkpoint already completed {} of {} epochs",
            state.epoch, config.epochs
        )));
    }
    let examples = prepare_examples(&config, &state.vocab, dataset)?;
    let options = LossOptions {
        aggregation: config.aggregation,
        logit_scale_max: config.logit_scale_max,
    };
    let mut log = TrainLog::default();
    for epoch in state.epoch..config.epochs {
        let batches = make_batches(examples.len(), config.batch_size, state.rng_seed, epoch)?;
        let mut total = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let objective = BatchObjective {
                examples: &examples,
                batch,
                spectrum_enabled: config.spectrum_enabled,
                options,
            };
            let at = |e: MuserError| MuserError::Numerical(format!("epoch {epoch}, batch {b}: {e}"));
            let (loss, grads) = objective.loss_and_grad(&state.params).map_err(|e| match e {
                MuserError::Numerical(_) | MuserError::NonFinite(_) => at(e),
                other => other,
            })?;
            optimizer_step(&mut state.params, &grads, &mut state.optimizer, &config).map_err(|e| match e {
                MuserError::Numerical(_) => at(e),
                other => other,
            })?;
            log.batches.push(LogRecord { epoch, batch: b, loss });
            total += loss;
        }
        log.epoch_means.push((epoch, total / batches.len() as f64));
        state.epoch = epoch + 1;
        let every = config.checkpoint_every;
        if every > 0 && state.epoch.is_multiple_of(every) && state.epoch < config.epochs {
            on_checkpoint(&state)?;
        }
    }
    Ok((state, log))
}

const CKPT_MAGIC: &[u8; 8] = b"MUSERCKP";
const CKPT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;
const DTYPE_U64: u8 = 2;
const VOCAB_KEY: &str = "vocab.words";

fn put_tensor(out: &mut Vec<u8>, name: &str, dtype: u8, dims: &[usize], payload: impl Iterator<Item = [u8; 8]>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    payload.for_each(|b| out.extend_from_slice(&b));
}

fn put_matrix(out: &mut Vec<u8>, name: &str, m: &Matrix) {
    put_tensor(out, name, DTYPE_F64, &[m.rows(), m.cols()], m.data().iter().map(|v| v.to_le_bytes()));
}

fn put_u64(out: &mut Vec<u8>, name: &str, v: u64) {
    put_tensor(out, name, DTYPE_U64, &[1], std::iter::once(v.to_le_bytes()));
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let mut blob = ckpt.config.to_text();
    blob.push_str(&format!("{VOCAB_KEY} = {}\n", ckpt.vocab.words().join(" ")));
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    out.extend_from_slice(blob.as_bytes());
    for (id, m) in ckpt.params.tensors() {
        put_matrix(&mut out, &format!("param.{}", id.name()), m);
    }
    if let Some((m, v)) = &ckpt.optimizer.moments {
        for (id, t) in m.tensors() {
            put_matrix(&mut out, &format!("adam.m.{}", id.name()), t);
        }
        for (id, t) in v.tensors() {
            put_matrix(&mut out, &format!("adam.v.{}", id.name()), t);
        }
    }
    put_u64(&mut out, "state.step", ckpt.optimizer.step);
    put_u64(&mut out, "state.epoch", ckpt.epoch as u64);
    put_u64(&mut out, "rng.seed", ckpt.rng_seed);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| MuserError::format(format!("checkpoint truncated in {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

enum Tensor {
    F64(Vec<usize>, Vec<f64>),
    U64(Vec<usize>, Vec<u64>),
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(8, "magic")? != CKPT_MAGIC {
        return Err(MuserError::format("not a checkpoint (bad magic)"));
    }
    let version = c.u32("version")?;
    if version != CKPT_VERSION {
        return Err(MuserError::format(format!("unsupported checkpoint version {version}")));
    }
    let blob_len = c.u32("config length")? as usize;
    let blob = std::str::from_utf8(c.take(blob_len, "config")?)
        .map_err(|_| MuserError::format("checkpoint config is not UTF-8"))?;
    let mut config = TrainConfig::default();
    let mut vocab_words = None;
    for (k, v) in parse_flat(blob).map_err(|e| MuserError::format(format!("checkpoint config: {e}")))? {
        if k == VOCAB_KEY {
            vocab_words = Some(v.split_whitespace().map(str::to_string).collect::<Vec<_>>());
        } else {
            config
                .set(&k, &v)
                .map_err(|e| MuserError::format(format!("checkpoint config: {e}")))?;
        }
    }
    let vocab = Vocab::from_words(vocab_words.ok_or_else(|| MuserError::format("checkpoint lacks a vocabulary"))?)?;
    config.model.validate().map_err(|e| MuserError::format(format!("checkpoint config: {e}")))?;

    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    while c.pos < bytes.len() {
        let name_len = c.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "tensor name")?)
            .map_err(|_| MuserError::format("tensor name is not UTF-8"))?
            .to_string();
        let dtype = c.u8("dtype")?;
        let rank = c.u8("rank")? as usize;
        let dims = (0..rank)
            .map(|_| c.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|n| n.checked_mul(8).is_some())
            .ok_or_else(|| MuserError::format(format!("tensor `{name}` is too large")))?;
        let payload = c.take(count * 8, &name)?;
        let words = payload.chunks_exact(8).map(|b| b.try_into().expect("8 bytes"));
        let t = match dtype {
            DTYPE_F64 => Tensor::F64(dims, words.map(f64::from_le_bytes).collect()),
            DTYPE_U64 => Tensor::U64(dims, words.map(u64::from_le_bytes).collect()),
            d => return Err(MuserError::format(format!("tensor `{name}` has unknown dtype {d}"))),
        };
        if tensors.insert(name.clone(), t).is_some() {
            return Err(MuserError::format(format!("duplicate tensor `{name}`")));
        }
    }

    let mut take_matrix = |name: String| -> Result<Matrix> {
        match tensors.remove(&name) {
            Some(Tensor::F64(dims, data)) if dims.len() == 2 => Matrix::new(dims[0], dims[1], data),
            Some(_) => Err(MuserError::format(format!("tensor `{name}` has the wrong type or rank"))),
            None => Err(MuserError::format(format!("checkpoint lacks tensor `{name}`"))),
        }
    };
    let mut group = |prefix: &str| -> Result<ModelParams> {
        let ts = ParamId::ALL
            .iter()
            .map(|id| take_matrix(format!("{prefix}{}", id.name())))
            .collect::<Result<Vec<_>>>()?;
        ModelParams::from_tensors(config.model, ts)
    };
    let params = group("param.")?;
    let moments = match config.optimizer {
        OptimizerKind::Adam => Some((group("adam.m.")?, group("adam.v.")?)),
        OptimizerKind::Sgd => None,
    };
    let mut scalar = |name: &str| -> Result<u64> {
        match tensors.remove(name) {
            Some(Tensor::U64(dims, data)) if dims == [1] => Ok(data[0]),
            Some(_) => Err(MuserError::format(format!("tensor `{name}` has the wrong type or shape"))),
            None => Err(MuserError::format(format!("checkpoint lacks tensor `{name}`"))),
        }
    };
    let step = scalar("state.step")?;
    let epoch = scalar("state.epoch")? as usize;
    let rng_seed = scalar("rng.seed")?;
    if let Some(extra) = tensors.keys().next() {
        return Err(MuserError::format(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint {
        config,
        vocab,
        params,
        optimizer: OptimizerState { step, moments },
        epoch,
        rng_seed,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, checkpoint_to_bytes(ckpt)).map_err(|e| MuserError::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MuserError::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
