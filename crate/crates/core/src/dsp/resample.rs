//! Polyphase windowed-sinc resampling.

use std::f64::consts::PI;

use super::Waveform;
use crate::error::{Error, Result};

/// Zero crossings of the prototype sinc on each side, at the lower of the two rates.
const HALF_ZEROS: usize = 48;
/// Anti-aliasing cutoff as a fraction of the lower Nyquist.
const ROLLOFF: f64 = 0.94;
const KAISER_BETA: f64 = 9.0;
/// Above this many phases the kernel is evaluated on the fly instead of tabulated.
const MAX_TABLE_PHASES: u64 = 2048;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

struct Kernel {
    /// Cutoff in cycles per input sample.
    fc: f64,
    /// Support half-width in input samples.
    half: f64,
    i0_beta: f64,
}

impl Kernel {
    fn new(src: u32, dst: u32) -> Self {
        let scale = (dst as f64 / src as f64).min(1.0);
        let fc = 0.5 * scale * ROLLOFF;
        Self {
            fc,
            half: HALF_ZEROS as f64 / scale,
            i0_beta: bessel_i0(KAISER_BETA),
        }
    }

    fn eval(&self, tau: f64) -> f64 {
        let r = tau / self.half;
        if r.abs() >= 1.0 {
            return 0.0;
        }
        let arg = 2.0 * self.fc * tau;
        let sinc = if arg.abs() < 1e-12 {
            1.0
        } else {
            (PI * arg).sin() / (PI * arg)
        };
        let window = bessel_i0(KAISER_BETA * (1.0 - r * r).sqrt()) / self.i0_beta;
        2.0 * self.fc * sinc * window
    }

    /// Normalized taps for output position `base + frac` (frac in [0,1)).
    fn taps(&self, frac: f64) -> (i64, Vec<f64>) {
        let lo = (frac - self.half).ceil() as i64;
        let hi = (frac + self.half).floor() as i64;
        let mut taps: Vec<f64> = (lo..=hi).map(|k| self.eval(frac - k as f64)).collect();
        let sum: f64 = taps.iter().sum();
        for t in taps.iter_mut() {
            *t /= sum;
        }
        (lo, taps)
    }
}

/// Resamples to `target_sr`. Output length is `round(L * target / source)`.
pub fn resample(wav: &Waveform, target_sr: u32) -> Result<Waveform> {
    if target_sr == 0 {
        return Err(Error::InvalidSampleRate(target_sr));
    }
    let src = wav.sample_rate();
    if src == target_sr {
        return Ok(wav.clone());
    }
    let g = gcd(src as u64, target_sr as u64);
    let (up, down) = (target_sr as u64 / g, src as u64 / g);
    let x = wav.samples();
    let out_len = ((x.len() as f64) * target_sr as f64 / src as f64).round() as usize;
    let kernel = Kernel::new(src, target_sr);

    let table: Option<Vec<(i64, Vec<f64>)>> = (up <= MAX_TABLE_PHASES).then(|| {
        (0..up)
            .map(|p| kernel.taps(p as f64 / up as f64))
            .collect()
    });

    let n = x.len() as i64;
    let mut out = Vec::with_capacity(out_len);
    for m in 0..out_len as u64 {
        // output sample m sits at input position m * down / up
        let num = m * down;
        let base = (num / up) as i64;
        let phase = num % up;
        let owned;
        let (lo, taps) = match &table {
            Some(t) => (t[phase as usize].0, &t[phase as usize].1),
            None => {
                owned = kernel.taps(phase as f64 / up as f64);
                (owned.0, &owned.1)
            }
        };
        let mut acc = 0.0;
        for (j, &h) in taps.iter().enumerate() {
            let idx = base + lo + j as i64;
            if idx >= 0 && idx < n {
                acc += h * x[idx as usize];
            }
        }
        out.push(acc);
    }
    Waveform::new(out, target_sr)
}
