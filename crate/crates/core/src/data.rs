//! Dataset records, file formats and the synthetic corpus.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MuserError, Result};
use crate::numerics::Matrix;
use crate::signal::AudioClip;

/// Where a record's waveform lives.
#[derive(Debug, Clone, PartialEq)]
pub enum AudioSource {
    Clip(AudioClip),
    File(PathBuf),
}

/// One training or evaluation example.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub audio: AudioSource,
    /// Free-form fields (`genre`, `tag`, `style`, ...) used by templates.
    pub metadata: BTreeMap<String, String>,
    /// Label strings; tasks map them to class indices or tag vectors.
    pub labels: Vec<String>,
}

impl DatasetRecord {
    /// The waveform, reading it from disk when the record points at a file.
    pub fn load_audio(&self) -> Result<AudioClip> {
        match &self.audio {
            AudioSource::Clip(c) => Ok(c.clone()),
            AudioSource::File(p) => read_wav(p),
        }
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let fail = |msg: String| MuserError::format(format!("{}: {msg}", path.display()));
    let file = fs::File::open(path).map_err(|e| MuserError::io(path, e))?;
    let reader = hound::WavReader::new(BufReader::new(file))
        .map_err(|e| fail(format!("malformed WAV: {e}")))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(fail(format!("mono required, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(fail(format!(
            "PCM 16-bit required, found {:?} {}-bit",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    if reader.len() == 0 {
        return Err(fail("empty data chunk".into()));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| fail(format!("truncated or malformed sample data: {e}")))?;
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes PCM 16-bit mono, rounding `s·32767` and clamping to the i16 range.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let wrap = |e: hound::Error| match e {
        hound::Error::IoError(io) => MuserError::io(path, io),
        other => MuserError::format(format!("{}: {other}", path.display())),
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(wrap)?;
    for &s in clip.samples() {
        let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(wrap)?;
    }
    w.finalize().map_err(wrap)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetadataLine {
    id: String,
    audio_path: Option<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    #[serde(default)]
    labels: Vec<String>,
}

/// Reads line-delimited JSON records. Relative audio paths resolve against
/// the metadata file's directory; records come back sorted by id.
pub fn load_metadata(path: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| MuserError::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| MuserError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |msg: String| MuserError::data(format!("{}:{lineno}: {msg}", path.display()));
        let parsed: MetadataLine =
            serde_json::from_str(&line).map_err(|e| at(format!("malformed record: {e}")))?;
        let audio_path = parsed
            .audio_path
            .ok_or_else(|| at(format!("record `{}` has no audio_path", parsed.id)))?;
        if !seen.insert(parsed.id.clone()) {
            return Err(at(format!("duplicate id `{}`", parsed.id)));
        }
        let audio_path = PathBuf::from(audio_path);
        records.push(DatasetRecord {
            id: parsed.id,
            audio: AudioSource::File(if audio_path.is_absolute() {
                audio_path
            } else {
                base.join(audio_path)
            }),
            metadata: parsed.metadata,
            labels: parsed.labels,
        });
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

/// Writes records as metadata lines. In-memory clips are stored as WAV files
/// under `audio_dir` (relative to the metadata file) named after their id.
pub fn write_dataset(metadata_path: impl AsRef<Path>, audio_dir: &str, records: &[DatasetRecord]) -> Result<()> {
    let metadata_path = metadata_path.as_ref();
    let base = metadata_path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut out = String::new();
    for r in records {
        let audio_path = match &r.audio {
            AudioSource::Clip(clip) => {
                let rel = format!("{audio_dir}/{}.wav", r.id);
                let full = base.join(&rel);
                if let Some(dir) = full.parent() {
                    fs::create_dir_all(dir).map_err(|e| MuserError::io(dir, e))?;
                }
                write_wav(&full, clip)?;
                rel
            }
            AudioSource::File(p) => p.to_string_lossy().into_owned(),
        };
        let line = MetadataLine {
            id: r.id.clone(),
            audio_path: Some(audio_path),
            metadata: r.metadata.clone(),
            labels: r.labels.clone(),
        };
        out.push_str(&serde_json::to_string(&line).map_err(|e| MuserError::format(e.to_string()))?);
        out.push('\n');
    }
    fs::write(metadata_path, out).map_err(|e| MuserError::io(metadata_path, e))
}

/// Base frequency of synthetic class `k`.
pub fn class_frequency(k: usize) -> f64 {
    110.0 * 2f64.powf(k as f64 / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub classes: usize,
    pub per_class: usize,
    pub clip_seconds: f64,
    pub rate_hz: u32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 4,
            per_class: 32,
            clip_seconds: 0.5,
            rate_hz: 8000,
            seed: 0,
        }
    }
}

/// Tone-complex corpus: class `k` is a fundamental at [`class_frequency`]
/// with harmonics ×2 and ×3 at random phases plus Gaussian noise, peak
/// normalized to 0.9. Records are ordered by class, then index.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<DatasetRecord>> {
    if cfg.classes < 2 {
        return Err(MuserError::invalid("synth needs at least 2 classes"));
    }
    if cfg.per_class < 1 {
        return Err(MuserError::invalid("synth needs at least 1 clip per class"));
    }
    if !(cfg.clip_seconds > 0.0 && cfg.clip_seconds.is_finite()) || cfg.rate_hz == 0 {
        return Err(MuserError::invalid("clip length and sample rate must be positive"));
    }
    let nyquist = f64::from(cfg.rate_hz) / 2.0;
    let top = class_frequency(cfg.classes - 1);
    if top >= nyquist {
        return Err(MuserError::invalid(format!(
            "class {} base frequency {top:.1} Hz is at or above Nyquist {nyquist} Hz",
            cfg.classes - 1
        )));
    }
    let len = (cfg.clip_seconds * f64::from(cfg.rate_hz)).round() as usize;
    if len == 0 {
        return Err(MuserError::invalid("clip has no samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, 0.05).expect("valid sigma");
    let width = (cfg.classes * cfg.per_class).to_string().len().max(4);
    let mut records = Vec::with_capacity(cfg.classes * cfg.per_class);
    for k in 0..cfg.classes {
        let f0 = class_frequency(k);
        for j in 0..cfg.per_class {
            let phases: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..2.0 * PI));
            let mut samples: Vec<f64> = (0..len)
                .map(|n| {
                    let t = n as f64 / f64::from(cfg.rate_hz);
                    let tone: f64 = (1..=3)
                        .filter(|h| f0 * *h as f64 <= nyquist)
                        .map(|h| (2.0 * PI * f0 * h as f64 * t + phases[h - 1]).sin())
                        .sum();
                    tone + noise.sample(&mut rng)
                })
                .collect();
            let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if peak > 0.0 {
                samples.iter_mut().for_each(|v| *v *= 0.9 / peak);
            }
            let tag = format!("tag_{k}_{}", if rng.random_bool(0.5) { "a" } else { "b" });
            let style = format!("style_{k}_{}", if rng.random_bool(0.5) { "a" } else { "b" });
            let genre = format!("genre_{k}");
            let metadata = BTreeMap::from([
                ("genre".to_string(), genre.clone()),
                ("tag".to_string(), tag.clone()),
                ("style".to_string(), style),
            ]);
            records.push(DatasetRecord {
                id: format!("clip_{:0width$}", k * cfg.per_class + j),
                audio: AudioSource::Clip(AudioClip::new(samples, cfg.rate_hz)?),
                metadata,
                labels: vec![genre, tag],
            });
        }
    }
    Ok(records)
}

/// Splits records into (train, test) per value of `field`: within each group,
/// in record order, the last `round(fraction·size)` go to test.
pub fn split_holdout(
    records: &[DatasetRecord],
    field: &str,
    fraction: f64,
) -> Result<(Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(MuserError::invalid(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        let key = r
            .metadata
            .get(field)
            .ok_or_else(|| MuserError::data(format!("record `{}` lacks field `{field}`", r.id)))?;
        groups.entry(key).or_default().push(i);
    }
    let mut is_test = vec![false; records.len()];
    for members in groups.values() {
        let m = (fraction * members.len() as f64).round() as usize;
        for &i in &members[members.len() - m..] {
            is_test[i] = true;
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = records.iter().cloned().zip(is_test).partition(|(_, t)| *t);
    Ok((
        train.into_iter().map(|(r, _)| r).collect(),
        test.into_iter().map(|(r, _)| r).collect(),
    ))
}

const MAT_MAGIC: &[u8; 8] = b"MUSERMAT";
const MAT_VERSION: u32 = 1;
/// Magic, version, rows, cols.
pub const MAT_HEADER_LEN: usize = 20;

pub fn matrix_to_bytes(m: &Matrix) -> Result<Vec<u8>> {
    let dim = |v: usize| {
        u32::try_from(v).map_err(|_| MuserError::invalid(format!("dimension {v} exceeds u32")))
    };
    let mut out = Vec::with_capacity(MAT_HEADER_LEN + m.len() * 8);
    out.extend_from_slice(MAT_MAGIC);
    out.extend_from_slice(&MAT_VERSION.to_le_bytes());
    out.extend_from_slice(&dim(m.rows())?.to_le_bytes());
    out.extend_from_slice(&dim(m.cols())?.to_le_bytes());
    for v in m.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn matrix_from_bytes(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < MAT_HEADER_LEN {
        return Err(MuserError::format("matrix file shorter than its header"));
    }
    if &bytes[..8] != MAT_MAGIC {
        return Err(MuserError::format("bad matrix magic"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(8);
    if version != MAT_VERSION {
        return Err(MuserError::format(format!("unsupported matrix version {version}")));
    }
    let (rows, cols) = (word(12) as usize, word(16) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(MAT_HEADER_LEN));
    if expected != Some(bytes.len()) {
        return Err(MuserError::format(format!(
            "matrix payload is {} bytes, header declares {rows}x{cols}",
            bytes.len() - MAT_HEADER_LEN
        )));
    }
    let data = bytes[MAT_HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Matrix::new(rows, cols, data)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    let path = path.as_ref();
    let bytes = matrix_to_bytes(m)?;
    let mut f = fs::File::create(path).map_err(|e| MuserError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| MuserError::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| MuserError::io(path, e))?;
    matrix_from_bytes(&bytes)
}
