//! Low-frequency band substitution used as a post-processing step.

use num_complex::Complex64 as C64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};

/// Replaces everything below `cutoff_hz` in `generated` with `reference`.
///
/// The split is a binary mask on the full-length spectrum, so the operator is
/// an orthogonal projection: the output band below the cutoff is exactly the
/// reference's, above it exactly the generated signal's, and a second
/// application changes nothing.
pub fn replace_low_band(generated: &Waveform, reference: &Waveform, cutoff_hz: f64) -> Result<Waveform> {
    if generated.sample_rate() != reference.sample_rate() {
        return Err(Error::RateMismatch {
            expected: reference.sample_rate(),
            got: generated.sample_rate(),
        });
    }
    if generated.len() != reference.len() {
        return Err(Error::LengthMismatch {
            expected: reference.len(),
            got: generated.len(),
        });
    }
    if !(cutoff_hz >= 0.0) {
        return Err(Error::InvalidArgument(format!("cutoff {cutoff_hz} Hz")));
    }
    let n = generated.len();
    if n == 0 {
        return Ok(generated.clone());
    }
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let to_complex = |x: &[f64]| x.iter().map(|&v| C64::new(v, 0.0)).collect::<Vec<_>>();
    let mut g = to_complex(generated.samples());
    let mut r = to_complex(reference.samples());
    fwd.process(&mut g);
    fwd.process(&mut r);

    let bin_hz = generated.sample_rate() as f64 / n as f64;
    for k in 0..n {
        // frequency of bin k, folding the negative half
        let freq = k.min(n - k) as f64 * bin_hz;
        if freq < cutoff_hz {
            g[k] = r[k];
        }
    }
    inv.process(&mut g);
    let out = g.iter().map(|c| c.re / n as f64).collect();
    Ok(generated.with_samples(out))
}
