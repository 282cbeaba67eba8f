//! Centered short-time Fourier transform with weighted overlap-add inverse.

use std::f64::consts::PI;

use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Window {
    #[default]
    Hann,
}

impl Window {
    /// Periodic window of length `n`.
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        match self {
            Window::Hann => (0..n)
                .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftParams {
    pub fft_size: usize,
    pub hop: usize,
    pub window: Window,
}

impl Default for StftParams {
    /// 2048 / 512 Hann, used by the evaluation metrics.
    fn default() -> Self {
        Self {
            fft_size: 2048,
            hop: 512,
            window: Window::Hann,
        }
    }
}

impl StftParams {
    pub fn new(fft_size: usize, hop: usize) -> Result<Self> {
        let p = Self {
            fft_size,
            hop,
            window: Window::Hann,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if !self.fft_size.is_power_of_two() || self.fft_size < 2 {
            return Err(Error::InvalidStft(format!(
                "fft_size {} must be a power of two",
                self.fft_size
            )));
        }
        if self.hop == 0 || self.hop > self.fft_size {
            return Err(Error::InvalidStft(format!(
                "hop {} must lie in (0, {}]",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }

    /// Hann overlap-add reconstruction needs hop ≤ N/2 dividing N.
    pub fn check_cola(&self) -> Result<()> {
        self.validate()?;
        if self.hop > self.fft_size / 2 || self.fft_size % self.hop != 0 {
            return Err(Error::InvalidStft(format!(
                "hop {} does not satisfy the overlap-add condition for fft_size {}",
                self.hop, self.fft_size
            )));
        }
        Ok(())
    }

    pub fn num_frames(&self, signal_len: usize) -> usize {
        1 + signal_len / self.hop
    }
}

/// Frames × bins complex STFT. Frame `t` is centred on sample `t * hop`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    frames: Vec<Vec<C64>>,
    params: StftParams,
    sample_rate: u32,
    signal_len: usize,
}

impl Spectrogram {
    /// Builds a zero-phase spectrogram from magnitudes laid out as `[frame][bin]`.
    pub fn from_magnitudes(mags: Vec<Vec<f64>>, params: StftParams, sample_rate: u32) -> Result<Self> {
        let f = params.num_bins();
        if let Some(bad) = mags.iter().find(|m| m.len() != f) {
            return Err(Error::ShapeMismatch {
                expected: (f, mags.len()),
                got: (bad.len(), mags.len()),
            });
        }
        let signal_len = mags.len().saturating_sub(1) * params.hop;
        Ok(Self {
            frames: mags
                .into_iter()
                .map(|m| m.into_iter().map(|v| C64::new(v, 0.0)).collect())
                .collect(),
            params,
            sample_rate,
            signal_len,
        })
    }

    pub fn params(&self) -> &StftParams {
        &self.params
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_bins(&self) -> usize {
        self.params.num_bins()
    }

    /// (bins, frames)
    pub fn shape(&self) -> (usize, usize) {
        (self.num_bins(), self.num_frames())
    }

    pub fn frame(&self, t: usize) -> &[C64] {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[Vec<C64>] {
        &self.frames
    }

    pub fn magnitude(&self, bin: usize, frame: usize) -> f64 {
        self.frames[frame][bin].norm()
    }

    /// `[frame][bin]` magnitudes.
    pub fn magnitudes(&self) -> Vec<Vec<f64>> {
        self.frames
            .iter()
            .map(|f| f.iter().map(|c| c.norm()).collect())
            .collect()
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.params.fft_size as f64
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }
}

pub fn stft(wav: &Waveform, params: &StftParams) -> Result<Spectrogram> {
    params.check_cola()?;
    let n = params.fft_size;
    let half = n / 2;
    let x = wav.samples();
    let window = params.window.coefficients(n);
    let fft = FftPlanner::new().plan_fft_forward(n);
    let t_count = params.num_frames(x.len());
    let mut frames = Vec::with_capacity(t_count);
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for t in 0..t_count {
        let start = (t * params.hop) as i64 - half as i64;
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = start + i as i64;
            let v = if idx >= 0 && (idx as usize) < x.len() {
                x[idx as usize]
            } else {
                0.0
            };
            *b = C64::new(v * window[i], 0.0);
        }
        fft.process(&mut buf);
        frames.push(buf[..=half].to_vec());
    }
    Ok(Spectrogram {
        frames,
        params: *params,
        sample_rate: wav.sample_rate(),
        signal_len: x.len(),
    })
}

/// Weighted overlap-add inverse; output has the original signal length.
pub fn istft(spec: &Spectrogram) -> Result<Waveform> {
    let params = spec.params;
    params.check_cola()?;
    let n = params.fft_size;
    let half = n / 2;
    let len = spec.signal_len;
    let window = params.window.coefficients(n);
    let ifft = FftPlanner::new().plan_fft_inverse(n);
    let mut acc = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![C64::new(0.0, 0.0); n];
    for (t, frame) in spec.frames.iter().enumerate() {
        buf[..=half].copy_from_slice(frame);
        for k in 1..half {
            buf[n - k] = frame[k].conj();
        }
        // the half-spectrum of a real signal has real DC and Nyquist bins
        buf[0].im = 0.0;
        buf[half].im = 0.0;
        ifft.process(&mut buf);
        let start = (t * params.hop) as i64 - half as i64;
        for i in 0..n {
            let idx = start + i as i64;
            if idx >= 0 && (idx as usize) < len {
                let w = window[i];
                acc[idx as usize] += buf[i].re / n as f64 * w;
                norm[idx as usize] += w * w;
            }
        }
    }
    let out = acc
        .iter()
        .zip(&norm)
        .map(|(a, w)| if *w > 1e-12 { a / w } else { 0.0 })
        .collect();
    Waveform::new(out, spec.sample_rate)
}
