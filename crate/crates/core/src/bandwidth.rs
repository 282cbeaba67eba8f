//! Curvature-aware effective-bandwidth estimation.
//!
//! The magnitude spectrum of the whole clip is smoothed with a
//! Savitzky-Golay filter in the log10 domain, decimated, and scanned upward
//! from its peak for the first index where the local curvature of the
//! log-spectrum has flattened out *and* the level has dropped below a
//! threshold relative to the peak.

use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{Waveform, Window};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Odd window length in FFT bins.
    pub savgol_window: usize,
    pub savgol_polyorder: usize,
    pub downsample_factor: usize,
    /// Curvature threshold on the decimated log10 spectrum.
    pub curvature_eps: f64,
    /// Level threshold as a linear magnitude ratio to the spectral peak.
    pub energy_tau: f64,
    /// Lookahead in decimated bins over which curvature must stay below the threshold.
    pub lookahead_k: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            savgol_window: 31,
            savgol_polyorder: 3,
            downsample_factor: 4,
            curvature_eps: 0.2,
            energy_tau: 0.03,
            lookahead_k: 8,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.savgol_window % 2 == 0 || self.savgol_window <= self.savgol_polyorder {
            return Err(Error::InvalidArgument(format!(
                "savgol window {} must be odd and exceed polyorder {}",
                self.savgol_window, self.savgol_polyorder
            )));
        }
        if self.downsample_factor == 0 || self.lookahead_k == 0 {
            return Err(Error::InvalidArgument(
                "downsample_factor and lookahead_k must be positive".into(),
            ));
        }
        if !(self.curvature_eps > 0.0) || !(self.energy_tau > 0.0 && self.energy_tau < 1.0) {
            return Err(Error::InvalidArgument(
                "curvature_eps must be positive and energy_tau in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthEstimate {
    pub f_eff: f64,
    /// Truncation index in the decimated spectrum.
    pub trunc_index: usize,
    /// Length of the decimated spectrum.
    pub spectrum_len: usize,
}

/// Hann-windowed single-FFT magnitude of the whole clip, `L/2 + 1` bins.
pub fn magnitude_spectrum(wav: &Waveform) -> Vec<f64> {
    let n = wav.len();
    if n == 0 {
        return Vec::new();
    }
    let window = Window::Hann.coefficients(n);
    let mut buf: Vec<C64> = wav
        .samples()
        .iter()
        .zip(&window)
        .map(|(x, w)| C64::new(x * w, 0.0))
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    buf[..n / 2 + 1].iter().map(|c| c.norm()).collect()
}

/// Least-squares weights that evaluate the local polynomial fit at every
/// position of the window: row `i` gives the weights for position `i`.
fn savgol_projection(window: usize, polyorder: usize) -> Vec<Vec<f64>> {
    let half = (window / 2) as f64;
    let m = polyorder + 1;
    // Vandermonde on positions scaled to [-1, 1]
    let v: Vec<Vec<f64>> = (0..window)
        .map(|i| {
            let x = (i as f64 - half) / half.max(1.0);
            (0..m).map(|p| x.powi(p as i32)).collect()
        })
        .collect();
    let mut vtv = vec![vec![0.0; m]; m];
    for row in &v {
        for a in 0..m {
            for b in 0..m {
                vtv[a][b] += row[a] * row[b];
            }
        }
    }
    let inv = invert(&vtv);
    // P = V (VᵀV)⁻¹ Vᵀ
    let vinv: Vec<Vec<f64>> = v
        .iter()
        .map(|row| (0..m).map(|b| (0..m).map(|a| row[a] * inv[a][b]).sum()).collect())
        .collect();
    (0..window)
        .map(|i| {
            (0..window)
                .map(|j| (0..m).map(|b| vinv[i][b] * v[j][b]).sum())
                .collect()
        })
        .collect()
}

fn invert(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut aug: Vec<Vec<f64>> = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, pivot);
        let p = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Savitzky-Golay smoothing. Edges use the polynomial fitted to the first and
/// last full window, so polynomials up to `polyorder` are reproduced everywhere.
pub fn savgol_smooth(x: &[f64], window: usize, polyorder: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || window <= polyorder {
        return Err(Error::InvalidArgument(format!(
            "savgol window {window} must be odd and exceed polyorder {polyorder}"
        )));
    }
    if x.len() < window {
        return Err(Error::TooShort {
            needed: window,
            got: x.len(),
        });
    }
    let proj = savgol_projection(window, polyorder);
    let half = window / 2;
    let n = x.len();
    let dot = |w: &[f64], seg: &[f64]| w.iter().zip(seg).map(|(a, b)| a * b).sum::<f64>();
    let mut out = vec![0.0; n];
    let center = &proj[half];
    for i in half..n - half {
        out[i] = dot(center, &x[i - half..=i + half]);
    }
    let head = &x[..window];
    let tail = &x[n - window..];
    for i in 0..half {
        out[i] = dot(&proj[i], head);
        out[n - half + i] = dot(&proj[half + 1 + i], tail);
    }
    Ok(out)
}

/// Five-point central second difference; the two samples at each end are zero.
pub fn curvature(logmag: &[f64]) -> Vec<f64> {
    let n = logmag.len();
    let mut out = vec![0.0; n];
    if n < 5 {
        return out;
    }
    for i in 2..n - 2 {
        out[i] = (-logmag[i + 2] + 16.0 * logmag[i + 1] - 30.0 * logmag[i]
            + 16.0 * logmag[i - 1]
            - logmag[i - 2])
            / 12.0;
    }
    out
}

/// Smoothed, decimated log10 magnitude spectrum. `None` for silent or too-short clips.
pub fn smoothed_log_spectrum(wav: &Waveform, cfg: &EstimatorConfig) -> Result<Option<Vec<f64>>> {
    cfg.validate()?;
    let mag = magnitude_spectrum(wav);
    let peak = mag.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 || mag.len() < cfg.savgol_window {
        return Ok(None);
    }
    let floor = peak * 1e-12;
    let log: Vec<f64> = mag.iter().map(|m| m.max(floor).log10()).collect();
    let smooth = savgol_smooth(&log, cfg.savgol_window, cfg.savgol_polyorder)?;
    Ok(Some(
        smooth.into_iter().step_by(cfg.downsample_factor).collect(),
    ))
}

pub fn estimate_f_eff(wav: &Waveform, cfg: &EstimatorConfig) -> Result<BandwidthEstimate> {
    let nyquist = wav.nyquist();
    let Some(spec) = smoothed_log_spectrum(wav, cfg)? else {
        return Ok(BandwidthEstimate {
            f_eff: nyquist,
            trunc_index: 0,
            spectrum_len: 0,
        });
    };
    let m = spec.len();
    let curv = curvature(&spec);
    let (peak_idx, top) = spec
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    let level = top + cfg.energy_tau.log10();

    let trunc = (peak_idx..m).find(|&i| {
        spec[i] < level
            && curv[i..(i + cfg.lookahead_k + 1).min(m)]
                .iter()
                .all(|c| c.abs() < cfg.curvature_eps)
    });
    let trunc_index = trunc.unwrap_or(m);
    Ok(BandwidthEstimate {
        f_eff: trunc_index as f64 / m as f64 * nyquist,
        trunc_index,
        spectrum_len: m,
    })
}
