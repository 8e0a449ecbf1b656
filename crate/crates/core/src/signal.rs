//! Audio clips and their short-time Fourier magnitude spectra.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{MuserError, Result};
use crate::numerics::Matrix;

/// Mono waveform with samples in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(MuserError::data("audio clip has no samples"));
        }
        if sample_rate_hz == 0 {
            return Err(MuserError::data("sample rate must be positive"));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0 + 1e-6)
        {
            return Err(MuserError::data(format!(
                "sample {i} = {s} is outside [-1, 1]"
            )));
        }
        Ok(AudioClip {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Hann,
    Rect,
}

impl std::str::FromStr for Window {
    type Err = MuserError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hann" => Ok(Window::Hann),
            "rect" => Ok(Window::Rect),
            other => Err(MuserError::invalid(format!("unknown window `{other}`"))),
        }
    }
}

impl std::fmt::Display for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Window::Hann => "hann",
            Window::Rect => "rect",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub window: Window,
    pub log_compress: bool,
    pub eps: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig {
            frame_len: 512,
            hop: 256,
            window: Window::Hann,
            log_compress: true,
            eps: 1e-6,
        }
    }
}

/// Magnitude time-frequency matrix: `frame_len/2 + 1` rows, one column per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub mags: Matrix,
    pub frame_len: usize,
    pub hop: usize,
    pub log_compressed: bool,
}

impl Spectrum {
    pub fn bins(&self) -> usize {
        self.mags.rows()
    }

    pub fn frames(&self) -> usize {
        self.mags.cols()
    }
}

/// Periodic Hann window, `w[k] = 0.5·(1 − cos(2πk/n))`.
pub fn hann_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(MuserError::invalid(format!(
            "hann window needs n >= 2, got {n}"
        )));
    }
    Ok((0..n)
        .map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos()))
        .collect())
}

/// DFT magnitudes for bins `0..=n/2` straight from the definition, O(n²).
pub fn dft_magnitude(frame: &[f64]) -> Result<Vec<f64>> {
    let n = frame.len();
    if n < 2 {
        return Err(MuserError::invalid(format!(
            "dft needs at least 2 samples, got {n}"
        )));
    }
    Ok((0..=n / 2)
        .map(|j| {
            let (mut re, mut im) = (0.0, 0.0);
            for (k, &x) in frame.iter().enumerate() {
                // Reduce j·k mod n first so the angle stays small and exact.
                let phase = -2.0 * PI * ((j * k) % n) as f64 / n as f64;
                re += x * phase.cos();
                im += x * phase.sin();
            }
            re.hypot(im)
        })
        .collect())
}

fn plan(n: usize) -> Result<Arc<dyn Fft<f64>>> {
    if n < 2 || !n.is_power_of_two() {
        return Err(MuserError::invalid(format!(
            "fft size must be a power of two >= 2, got {n}"
        )));
    }
    Ok(FftPlanner::new().plan_fft_forward(n))
}

fn fft_magnitude_with(fft: &dyn Fft<f64>, frame: impl Iterator<Item = f64>, n: usize) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = frame.map(|x| Complex::new(x, 0.0)).collect();
    fft.process(&mut buf);
    buf[..=n / 2].iter().map(|c| c.norm()).collect()
}

/// Same values as [`dft_magnitude`], via a radix-2 FFT. Power-of-two sizes only.
pub fn fft_magnitude(frame: &[f64]) -> Result<Vec<f64>> {
    let fft = plan(frame.len())?;
    Ok(fft_magnitude_with(
        fft.as_ref(),
        frame.iter().copied(),
        frame.len(),
    ))
}

/// Number of full frames of `frame_len` with stride `hop` in `len` samples.
pub fn frame_count(len: usize, frame_len: usize, hop: usize) -> usize {
    if len < frame_len || hop == 0 {
        0
    } else {
        (len - frame_len) / hop + 1
    }
}

pub fn stft(clip: &AudioClip, config: &StftConfig) -> Result<Spectrum> {
    let StftConfig {
        frame_len,
        hop,
        window,
        log_compress,
        eps,
    } = *config;
    let fft = plan(frame_len)?;
    if hop == 0 || hop > frame_len {
        return Err(MuserError::invalid(format!(
            "hop must lie in [1, {frame_len}], got {hop}"
        )));
    }
    if clip.len() < frame_len {
        return Err(MuserError::invalid(format!(
            "clip of {} samples is shorter than frame_len {frame_len}",
            clip.len()
        )));
    }
    if log_compress && !(eps > 0.0) {
        return Err(MuserError::invalid("log compression needs eps > 0"));
    }
    let win = match window {
        Window::Hann => hann_window(frame_len)?,
        Window::Rect => vec![1.0; frame_len],
    };
    let frames = frame_count(clip.len(), frame_len, hop);
    let bins = frame_len / 2 + 1;
    let mut mags = Matrix::zeros(bins, frames);
    for t in 0..frames {
        let chunk = &clip.samples()[t * hop..t * hop + frame_len];
        let col = fft_magnitude_with(
            fft.as_ref(),
            chunk.iter().zip(&win).map(|(x, w)| x * w),
            frame_len,
        );
        for (b, m) in col.into_iter().enumerate() {
            mags.set(b, t, if log_compress { (m + eps).ln() } else { m });
        }
    }
    Ok(Spectrum {
        mags,
        frame_len,
        hop,
        log_compressed: log_compress,
    })
}
