//! Objective spectral metrics: log-spectral distance (full and band-limited),
//! spectral SSIM, and the multi-resolution STFT distance used to train the codec.

use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{resample, stft, Spectrogram, StftParams, Waveform};
use crate::error::{Error, Result};

/// Magnitude floor applied before taking logs in LSD and SSIM.
pub const LSD_FLOOR: f64 = 1e-8;
/// Magnitude floor for the log term of the MR-STFT distance.
pub const MRSTFT_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimConfig {
    pub block: usize,
    pub eps1: f64,
    pub eps2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            block: 7,
            eps1: 0.01,
            eps2: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MrStftConfig {
    pub resolutions: Vec<StftParams>,
}

impl Default for MrStftConfig {
    fn default() -> Self {
        Self {
            resolutions: [512, 1024, 2048]
                .iter()
                .map(|&n| StftParams::new(n, n / 4).expect("static resolution"))
                .collect(),
        }
    }
}

impl MrStftConfig {
    pub fn new(fft_sizes: &[usize]) -> Result<Self> {
        if fft_sizes.is_empty() {
            return Err(Error::InvalidArgument("MR-STFT needs at least one resolution".into()));
        }
        let resolutions = fft_sizes
            .iter()
            .map(|&n| StftParams::new(n, (n / 4).max(1)))
            .collect::<Result<_>>()?;
        Ok(Self { resolutions })
    }
}

fn check_shapes(a: &Spectrogram, b: &Spectrogram) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            expected: a.shape(),
            got: b.shape(),
        });
    }
    Ok(())
}

/// Per-frame squared log10 power ratios for bins `lo..=hi`, averaged over bins,
/// then square-rooted and averaged over frames.
fn lsd_bins(reference: &Spectrogram, est: &Spectrogram, lo: usize, hi: usize) -> f64 {
    let frames = reference.num_frames();
    if frames == 0 {
        return 0.0;
    }
    let width = (hi - lo + 1) as f64;
    let total: f64 = reference
        .frames()
        .iter()
        .zip(est.frames())
        .map(|(r, e)| {
            let sq: f64 = r[lo..=hi]
                .iter()
                .zip(&e[lo..=hi])
                .map(|(a, b)| {
                    let a = a.norm().max(LSD_FLOOR);
                    let b = b.norm().max(LSD_FLOOR);
                    (2.0 * (a / b).log10()).powi(2)
                })
                .sum();
            (sq / width).sqrt()
        })
        .sum();
    total / frames as f64
}

pub fn lsd(reference: &Spectrogram, est: &Spectrogram) -> Result<f64> {
    check_shapes(reference, est)?;
    Ok(lsd_bins(reference, est, 0, reference.num_bins() - 1))
}

/// Bin indices whose centre frequency lies in `[f1, f2]`.
pub fn band_bins(spec: &Spectrogram, f1: f64, f2: f64) -> Result<(usize, usize)> {
    let nyquist = spec.sample_rate() as f64 / 2.0;
    if !(f1 >= 0.0 && f1 < f2 && f2 <= nyquist) {
        return Err(Error::InvalidArgument(format!(
            "band [{f1}, {f2}] Hz must satisfy 0 <= f1 < f2 <= {nyquist}"
        )));
    }
    let hz = spec.bin_hz();
    let lo = (f1 / hz).ceil() as usize;
    let hi = ((f2 / hz).floor() as usize).min(spec.num_bins() - 1);
    if lo > hi {
        return Err(Error::InvalidArgument(format!(
            "band [{f1}, {f2}] Hz contains no bins at {hz} Hz spacing"
        )));
    }
    Ok((lo, hi))
}

pub fn lsd_band(reference: &Spectrogram, est: &Spectrogram, f1: f64, f2: f64) -> Result<f64> {
    check_shapes(reference, est)?;
    let (lo, hi) = band_bins(reference, f1, f2)?;
    Ok(lsd_bins(reference, est, lo, hi))
}

/// Blockwise SSIM on log10 magnitudes, averaged over non-overlapping
/// `block × block` tiles (frequency × time); partial tiles are dropped.
pub fn spectral_ssim(reference: &Spectrogram, est: &Spectrogram, cfg: &SsimConfig) -> Result<f64> {
    check_shapes(reference, est)?;
    let (bins, frames) = reference.shape();
    let b = cfg.block;
    if b == 0 || bins < b || frames < b {
        return Err(Error::TooShort {
            needed: b,
            got: bins.min(frames),
        });
    }
    let log = |s: &Spectrogram| -> Vec<Vec<f64>> {
        s.frames()
            .iter()
            .map(|f| f.iter().map(|c| c.norm().max(LSD_FLOOR).log10()).collect())
            .collect()
    };
    let (x, y) = (log(reference), log(est));
    let n = (b * b) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for t0 in (0..=frames - b).step_by(b) {
        for f0 in (0..=bins - b).step_by(b) {
            let (mut sx, mut sy) = (0.0, 0.0);
            for t in t0..t0 + b {
                for f in f0..f0 + b {
                    sx += x[t][f];
                    sy += y[t][f];
                }
            }
            let (mx, my) = (sx / n, sy / n);
            let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
            for t in t0..t0 + b {
                for f in f0..f0 + b {
                    let (dx, dy) = (x[t][f] - mx, y[t][f] - my);
                    vx += dx * dx;
                    vy += dy * dy;
                    cov += dx * dy;
                }
            }
            let (vx, vy, cov) = (vx / n, vy / n, cov / n);
            total += (2.0 * mx * my + cfg.eps1) * (2.0 * cov + cfg.eps2)
                / ((mx * mx + my * my + cfg.eps1) * (vx + vy + cfg.eps2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// LSD, band-limited LSD and SSIM of one reference/estimate pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub lsd: f64,
    pub lsd_lf: f64,
    pub lsd_hf: f64,
    pub ssim: f64,
}

/// Evaluates `est` against `reference` with the LF/HF split at `split_hz`.
/// The estimate is resampled to the reference rate and trimmed or padded to its length.
pub fn evaluate_pair(
    reference: &Waveform,
    est: &Waveform,
    split_hz: f64,
    params: &StftParams,
) -> Result<PairMetrics> {
    let est = resample(est, reference.sample_rate())?.fit_len(reference.len());
    let r = stft(reference, params)?;
    let e = stft(&est, params)?;
    let nyquist = reference.nyquist();
    Ok(PairMetrics {
        lsd: lsd(&r, &e)?,
        lsd_lf: lsd_band(&r, &e, 0.0, split_hz)?,
        lsd_hf: lsd_band(&r, &e, split_hz, nyquist)?,
        ssim: spectral_ssim(&r, &e, &SsimConfig::default())?,
    })
}

fn check_pair(reference: &Waveform, est: &Waveform) -> Result<()> {
    if reference.len() != est.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            got: est.len(),
        });
    }
    if reference.sample_rate() != est.sample_rate() {
        return Err(Error::RateMismatch {
            expected: reference.sample_rate(),
            got: est.sample_rate(),
        });
    }
    Ok(())
}

/// Spectral convergence plus frame-normalized L1 natural-log magnitude distance,
/// summed over resolutions.
pub fn mrstft_loss(reference: &Waveform, est: &Waveform, cfg: &MrStftConfig) -> Result<f64> {
    check_pair(reference, est)?;
    let mut total = 0.0;
    for params in &cfg.resolutions {
        let r = stft(reference, params)?;
        let e = stft(est, params)?;
        let (sc, log_term) = resolution_terms(&r, &e);
        total += sc + log_term;
    }
    Ok(total)
}

fn resolution_terms(r: &Spectrogram, e: &Spectrogram) -> (f64, f64) {
    let (mut diff, mut norm, mut l1) = (0.0, 0.0, 0.0);
    for (fr, fe) in r.frames().iter().zip(e.frames()) {
        for (a, b) in fr.iter().zip(fe) {
            let (a, b) = (a.norm(), b.norm());
            diff += (a - b).powi(2);
            norm += a * a;
            l1 += (a.max(MRSTFT_FLOOR).ln() - b.max(MRSTFT_FLOOR).ln()).abs();
        }
    }
    let sc = if norm > 0.0 { diff.sqrt() / norm.sqrt() } else { 0.0 };
    (sc, l1 / r.num_frames() as f64)
}

/// MR-STFT distance and its gradient with respect to the estimate's samples.
///
/// The distance depends on the estimate only through its STFT magnitudes, so
/// the per-bin gradient `g · X̂/|X̂|` is pulled back through each frame with an
/// unnormalized inverse DFT of the one-sided spectrum and multiplied by the window.
pub fn mrstft_loss_grad(
    reference: &Waveform,
    est: &Waveform,
    cfg: &MrStftConfig,
) -> Result<(f64, Vec<f64>)> {
    check_pair(reference, est)?;
    let len = est.len();
    let mut grad = vec![0.0; len];
    let mut total = 0.0;
    let mut planner = FftPlanner::new();
    for params in &cfg.resolutions {
        let r = stft(reference, params)?;
        let e = stft(est, params)?;
        let (sc, log_term) = resolution_terms(&r, &e);
        total += sc + log_term;

        let (mut diff, mut norm) = (0.0, 0.0);
        for (fr, fe) in r.frames().iter().zip(e.frames()) {
            for (a, b) in fr.iter().zip(fe) {
                diff += (a.norm() - b.norm()).powi(2);
                norm += a.norm_sqr();
            }
        }
        let (diff, norm) = (diff.sqrt(), norm.sqrt());
        let sc_scale = if diff > 0.0 && norm > 0.0 { 1.0 / (diff * norm) } else { 0.0 };
        let inv_t = 1.0 / r.num_frames() as f64;

        let n = params.fft_size;
        let half = n / 2;
        let window = params.window.coefficients(n);
        let ifft = planner.plan_fft_inverse(n);
        let mut buf = vec![C64::new(0.0, 0.0); n];
        for (t, (fr, fe)) in r.frames().iter().zip(e.frames()).enumerate() {
            buf.iter_mut().for_each(|c| *c = C64::new(0.0, 0.0));
            for (k, (a, b)) in fr.iter().zip(fe).enumerate() {
                let (ma, mb) = (a.norm(), b.norm());
                if mb == 0.0 {
                    continue;
                }
                let mut g = (mb - ma) * sc_scale;
                if mb > MRSTFT_FLOOR {
                    let d = ma.max(MRSTFT_FLOOR).ln() - mb.ln();
                    g -= d.signum() * inv_t / mb;
                }
                buf[k] = *b * (g / mb);
            }
            ifft.process(&mut buf);
            let start = (t * params.hop) as i64 - half as i64;
            for i in 0..n {
                let idx = start + i as i64;
                if idx >= 0 && (idx as usize) < len {
                    grad[idx as usize] += window[i] * buf[i].re;
                }
            }
        }
    }
    Ok((total, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spec(bins_fft: usize, frames: usize, seed: u64, sr: u32) -> Spectrogram {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = bins_fft / 2 + 1;
        let mags = (0..frames)
            .map(|_| (0..f).map(|_| rng.gen_range(1e-3..2.0)).collect())
            .collect();
        Spectrogram::from_magnitudes(mags, StftParams::new(bins_fft, bins_fft / 4).unwrap(), sr)
            .unwrap()
    }

    fn scaled(s: &Spectrogram, a: f64) -> Spectrogram {
        let mags = s
            .magnitudes()
            .into_iter()
            .map(|f| f.into_iter().map(|v| v * a).collect())
            .collect();
        Spectrogram::from_magnitudes(mags, *s.params(), s.sample_rate()).unwrap()
    }

    fn noise(n: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(), 8000).unwrap()
    }

    #[test]
    fn lsd_identity_and_tenfold_gain() {
        let s = random_spec(64, 20, 1, 8000);
        assert_eq!(lsd(&s, &s).unwrap(), 0.0);
        // log10(1/100) = -2 in every bin
        assert!((lsd(&s, &scaled(&s, 10.0)).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lsd_is_symmetric_and_gain_invariant() {
        let a = random_spec(64, 16, 2, 8000);
        let b = random_spec(64, 16, 3, 8000);
        let ab = lsd(&a, &b).unwrap();
        assert!((ab - lsd(&b, &a).unwrap()).abs() < 1e-12);
        assert!((ab - lsd(&scaled(&a, 3.0), &scaled(&b, 3.0)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn band_lsd_full_band_and_partition() {
        let a = random_spec(128, 12, 4, 16_000);
        let b = random_spec(128, 12, 5, 16_000);
        let full = lsd(&a, &b).unwrap();
        assert!((lsd_band(&a, &b, 0.0, 8000.0).unwrap() - full).abs() < 1e-12);
        assert!(lsd_band(&a, &b, 3000.0, 3000.0).is_err());
        assert!(lsd_band(&a, &b, 0.0, 9000.0).is_err());
        assert!(lsd_band(&a, &b, 10.0, 20.0).is_err());
    }

    #[test]
    fn band_lsd_ignores_differences_outside_band() {
        let a = random_spec(64, 10, 6, 8000);
        let mut mags = a.magnitudes();
        for f in mags.iter_mut() {
            for v in f[20..].iter_mut() {
                *v *= 5.0;
            }
        }
        let b = Spectrogram::from_magnitudes(mags, *a.params(), 8000).unwrap();
        let cutoff = 19.0 * a.bin_hz();
        assert_eq!(lsd_band(&a, &b, 0.0, cutoff).unwrap(), 0.0);
        assert!(lsd_band(&a, &b, cutoff + 1.0, 4000.0).unwrap() > 0.0);
    }

    #[test]
    fn ssim_identity_symmetry_and_constant_blocks() {
        let a = random_spec(64, 21, 7, 8000);
        let b = random_spec(64, 21, 8, 8000);
        let cfg = SsimConfig::default();
        assert!((spectral_ssim(&a, &a, &cfg).unwrap() - 1.0).abs() < 1e-12);
        let ab = spectral_ssim(&a, &b, &cfg).unwrap();
        assert!((ab - spectral_ssim(&b, &a, &cfg).unwrap()).abs() < 1e-12);
        assert!(ab < 1.0);

        let p = StftParams::new(64, 16).unwrap();
        let c1 = Spectrogram::from_magnitudes(vec![vec![10.0; 33]; 14], p, 8000).unwrap();
        let c2 = Spectrogram::from_magnitudes(vec![vec![100.0; 33]; 14], p, 8000).unwrap();
        let (m1, m2) = (1.0, 2.0);
        let expected = (2.0 * m1 * m2 + 0.01) / (m1 * m1 + m2 * m2 + 0.01);
        assert!((spectral_ssim(&c1, &c2, &cfg).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_spectrograms() {
        let a = random_spec(64, 6, 9, 8000);
        assert!(spectral_ssim(&a, &a, &SsimConfig::default()).is_err());
    }

    #[test]
    fn mrstft_zero_for_identical_and_closed_form_for_doubling() {
        let x = noise(4000, 10);
        let cfg = MrStftConfig::new(&[256, 512]).unwrap();
        assert_eq!(mrstft_loss(&x, &x, &cfg).unwrap(), 0.0);
        let doubled = mrstft_loss(&x, &x.scaled(2.0), &cfg).unwrap();
        // per resolution: spectral convergence 1 plus F·ln 2 from the log term
        let expected: f64 = cfg
            .resolutions
            .iter()
            .map(|p| 1.0 + p.num_bins() as f64 * 2f64.ln())
            .sum();
        assert!((doubled - expected).abs() < 1e-9 * expected, "{doubled} {expected}");
    }

    #[test]
    fn mrstft_rejects_length_mismatch() {
        let cfg = MrStftConfig::default();
        assert!(mrstft_loss(&noise(100, 1), &noise(101, 1), &cfg).is_err());
        assert!(MrStftConfig::new(&[]).is_err());
    }

    #[test]
    fn mrstft_gradient_matches_finite_differences() {
        let x = noise(600, 11);
        let y = noise(600, 12);
        let cfg = MrStftConfig::new(&[64, 128]).unwrap();
        let (loss, grad) = mrstft_loss_grad(&x, &y, &cfg).unwrap();
        assert!((loss - mrstft_loss(&x, &y, &cfg).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for &i in &[0usize, 7, 150, 333, 599] {
            let mut plus = y.samples().to_vec();
            let mut minus = y.samples().to_vec();
            plus[i] += h;
            minus[i] -= h;
            let lp = mrstft_loss(&x, &Waveform::new(plus, 8000).unwrap(), &cfg).unwrap();
            let lm = mrstft_loss(&x, &Waveform::new(minus, 8000).unwrap(), &cfg).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-5 * fd.abs().max(1.0),
                "sample {i}: analytic {} vs fd {fd}",
                grad[i]
            );
        }
    }

    #[test]
    fn evaluate_pair_identity() {
        let x = noise(8000, 13);
        let m = evaluate_pair(&x, &x, 2000.0, &StftParams::new(512, 128).unwrap()).unwrap();
        assert_eq!(m.lsd, 0.0);
        assert_eq!(m.lsd_lf, 0.0);
        assert_eq!(m.lsd_hf, 0.0);
        assert!((m.ssim - 1.0).abs() < 1e-12);
    }
}
