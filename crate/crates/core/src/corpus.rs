//! Synthetic full-band toy corpus.
//!
//! Each clip is a harmonic tone with a random fundamental and spectral tilt,
//! a few free sinusoids anywhere below Nyquist, and a tilted noise floor at
//! roughly the tonal level, all under a slow amplitude envelope. The floor
//! keeps the whole band occupied between partials, so the bandwidth estimator
//! sees every clip as full-band. The
//! harmonic series continues up to Nyquist, so the upper band is predictable
//! from the lower one, which is what a super-resolution model has to learn.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyCorpusConfig {
    pub sample_rate: u32,
    pub duration_s: f64,
    pub f0_range_hz: (f64, f64),
    /// Harmonic amplitude falls as `k^-tilt`.
    pub tilt_range: (f64, f64),
    pub max_free_partials: usize,
    /// Noise floor level relative to the tonal RMS.
    pub noise_db: f64,
    pub peak: f64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            duration_s: 1.0,
            f0_range_hz: (110.0, 440.0),
            tilt_range: (0.1, 0.5),
            max_free_partials: 3,
            noise_db: 0.0,
            peak: 0.5,
        }
    }
}

pub fn toy_clip<R: Rng + ?Sized>(cfg: &ToyCorpusConfig, rng: &mut R) -> Result<Waveform> {
    if cfg.sample_rate == 0 {
        return Err(Error::InvalidSampleRate(0));
    }
    let n = (cfg.duration_s * cfg.sample_rate as f64).round() as usize;
    if n == 0 {
        return Err(Error::InvalidArgument(format!("clip duration {} s", cfg.duration_s)));
    }
    let sr = cfg.sample_rate as f64;
    let nyq = sr / 2.0;
    let f0 = rng.gen_range(cfg.f0_range_hz.0..=cfg.f0_range_hz.1);
    let tilt = rng.gen_range(cfg.tilt_range.0..=cfg.tilt_range.1);
    // vibrato smears the upper harmonics into bands so no part of the
    // spectrum is empty between partials
    let vib_rate = rng.gen_range(3.0..6.0);
    let vib_depth = rng.gen_range(0.005..0.02);
    let mut tonal = vec![0.0; n];
    let harmonics = ((0.98 * nyq) / (f0 * (1.0 + vib_depth))).floor() as usize;
    let mut phase_inst = 0.0;
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    for (i, v) in tonal.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
        phase_inst += 2.0 * PI * f / sr;
        for (k, ph) in phases.iter().enumerate() {
            let h = (k + 1) as f64;
            *v += h.powf(-tilt) * (h * phase_inst + ph).sin();
        }
    }
    let free = rng.gen_range(0..=cfg.max_free_partials);
    for _ in 0..free {
        let f = rng.gen_range(50.0..0.95 * nyq);
        let a = rng.gen_range(0.05..0.2);
        let ph = rng.gen_range(0.0..2.0 * PI);
        for (i, v) in tonal.iter_mut().enumerate() {
            *v += a * (2.0 * PI * f * i as f64 / sr + ph).sin();
        }
    }
    let rms = (tonal.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);

    // noise with a gentle first-order tilt, scaled to the requested floor
    let rho = rng.gen_range(-0.5..0.5);
    let mut prev = 0.0;
    let mut noise: Vec<f64> = (0..n)
        .map(|_| {
            let w: f64 = rng.sample(StandardNormal);
            prev = w + rho * prev;
            prev
        })
        .collect();
    let nrms = (noise.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let gain = rms * 10f64.powf(cfg.noise_db / 20.0) / nrms;
    noise.iter_mut().for_each(|v| *v *= gain);

    let env_rate = rng.gen_range(0.5..2.0);
    let env_phase = rng.gen_range(0.0..2.0 * PI);
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let env = 0.75 + 0.25 * (2.0 * PI * env_rate * i as f64 / sr + env_phase).sin();
            env * (tonal[i] + noise[i])
        })
        .collect();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    x.iter_mut().for_each(|v| *v *= cfg.peak / peak);
    Waveform::new(x, cfg.sample_rate)
}

pub fn toy_corpus<R: Rng + ?Sized>(cfg: &ToyCorpusConfig, count: usize, rng: &mut R) -> Result<Vec<Waveform>> {
    (0..count).map(|_| toy_clip(cfg, rng)).collect()
}
