//! IIR low-pass design (analog prototype + pre-warped bilinear transform) and
//! second-order-section filtering.

use std::f64::consts::{FRAC_PI_2, PI};

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 16;

const STABILITY_MARGIN: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FilterFamily {
    Chebyshev1,
    Butterworth,
    Bessel,
    Elliptic,
}

impl FilterFamily {
    pub const ALL: [FilterFamily; 4] = [
        FilterFamily::Chebyshev1,
        FilterFamily::Butterworth,
        FilterFamily::Bessel,
        FilterFamily::Elliptic,
    ];
}

impl std::str::FromStr for FilterFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "chebyshev1" | "cheby1" | "chebyshev" => Ok(Self::Chebyshev1),
            "butterworth" | "butter" => Ok(Self::Butterworth),
            "bessel" => Ok(Self::Bessel),
            "elliptic" | "ellip" => Ok(Self::Elliptic),
            other => Err(Error::InvalidFilter(format!("unknown filter family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub family: FilterFamily,
    pub order: usize,
    pub cutoff_hz: f64,
    /// Passband ripple (Chebyshev1 and Elliptic).
    pub ripple_db: f64,
    /// Minimum stopband attenuation (Elliptic).
    pub stop_atten_db: f64,
}

impl FilterSpec {
    pub fn new(family: FilterFamily, order: usize, cutoff_hz: f64) -> Self {
        Self {
            family,
            order,
            cutoff_hz,
            ripple_db: 1.0,
            stop_atten_db: 60.0,
        }
    }

    /// Chebyshev Type-I, order 8: the sharp-rolloff default for inference and
    /// cascaded-stage degradation.
    pub fn chebyshev_default(cutoff_hz: f64) -> Self {
        Self::new(FilterFamily::Chebyshev1, 8, cutoff_hz)
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyquist = sample_rate as f64 / 2.0;
        if !(1..=MAX_ORDER).contains(&self.order) {
            return Err(Error::InvalidFilter(format!(
                "order {} outside [1, {MAX_ORDER}]",
                self.order
            )));
        }
        if !(self.cutoff_hz > 0.0 && self.cutoff_hz < nyquist) {
            return Err(Error::InvalidFilter(format!(
                "cutoff {} Hz must lie in (0, {nyquist}) Hz",
                self.cutoff_hz
            )));
        }
        if matches!(self.family, FilterFamily::Chebyshev1 | FilterFamily::Elliptic)
            && !(self.ripple_db > 0.0 && self.ripple_db.is_finite())
        {
            return Err(Error::InvalidFilter("ripple_db must be positive".into()));
        }
        if self.family == FilterFamily::Elliptic && !(self.stop_atten_db > self.ripple_db) {
            return Err(Error::InvalidFilter(
                "stop_atten_db must exceed ripple_db".into(),
            ));
        }
        Ok(())
    }
}

/// `y[n] = b0 x[n] + b1 x[n-1] + b2 x[n-2] - a1 y[n-1] - a2 y[n-2]`
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b0: f64,
    pub b1: f64,
    pub b2: f64,
    pub a1: f64,
    pub a2: f64,
}

impl Biquad {
    pub fn identity() -> Self {
        Self {
            b0: 1.0,
            b1: 0.0,
            b2: 0.0,
            a1: 0.0,
            a2: 0.0,
        }
    }

    pub fn dc_gain(&self) -> f64 {
        (self.b0 + self.b1 + self.b2) / (1.0 + self.a1 + self.a2)
    }

    pub fn response(&self, z_inv: C64) -> C64 {
        let z2 = z_inv * z_inv;
        (self.b0 + self.b1 * z_inv + self.b2 * z2) / (1.0 + self.a1 * z_inv + self.a2 * z2)
    }

    pub fn poles(&self) -> [C64; 2] {
        // roots of z^2 + a1 z + a2
        let disc = C64::new(self.a1 * self.a1 - 4.0 * self.a2, 0.0).sqrt();
        [(-self.a1 + disc) / 2.0, (-self.a1 - disc) / 2.0]
    }

    /// Transposed direct form II state after an infinitely long unit step.
    fn step_state(&self) -> [f64; 2] {
        let g = self.dc_gain();
        [g - self.b0, self.b2 - self.a2 * g]
    }

    fn run(&self, x: &mut [f64], mut s: [f64; 2]) {
        let Biquad { b0, b1, b2, a1, a2 } = *self;
        for v in x.iter_mut() {
            let xi = *v;
            let y = b0 * xi + s[0];
            s[0] = b1 * xi - a1 * y + s[1];
            s[1] = b2 * xi - a2 * y;
            *v = y;
        }
    }
}

/// A cascade of second-order sections.
#[derive(Debug, Clone, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Pass-through cascade with no sections.
    pub fn bypass() -> Self {
        Self {
            sections: Vec::new(),
        }
    }

    pub fn response(&self, freq_hz: f64, sample_rate: u32) -> C64 {
        let w = 2.0 * PI * freq_hz / sample_rate as f64;
        let z_inv = C64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(C64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude_db(&self, freq_hz: f64, sample_rate: u32) -> f64 {
        20.0 * self.response(freq_hz, sample_rate).norm().log10()
    }

    pub fn max_pole_radius(&self) -> f64 {
        self.sections
            .iter()
            .flat_map(|s| s.poles())
            .map(|p| p.norm())
            .fold(0.0, f64::max)
    }

    pub fn is_stable(&self) -> bool {
        self.max_pole_radius() < 1.0 - STABILITY_MARGIN
    }
}

/// Designs a digital low-pass as a biquad cascade with unit DC gain.
pub fn design_lowpass(spec: &FilterSpec, sample_rate: u32) -> Result<Sos> {
    spec.validate(sample_rate)?;
    let (zeros, poles) = match spec.family {
        FilterFamily::Butterworth => (Vec::new(), butterworth_poles(spec.order)),
        FilterFamily::Chebyshev1 => (Vec::new(), chebyshev1_poles(spec.order, spec.ripple_db)),
        FilterFamily::Bessel => (Vec::new(), bessel_poles(spec.order)),
        FilterFamily::Elliptic => elliptic_zpk(spec.order, spec.ripple_db, spec.stop_atten_db),
    };

    // Pre-warp so the analog cutoff lands on the requested digital frequency.
    let fs2 = 2.0 * sample_rate as f64;
    let warped = fs2 * (PI * spec.cutoff_hz / sample_rate as f64).tan();
    let bilinear = |s: C64| (fs2 + s * warped) / (fs2 - s * warped);
    let dpoles: Vec<C64> = poles.iter().map(|&p| bilinear(p)).collect();
    let mut dzeros: Vec<C64> = zeros.iter().map(|&z| bilinear(z)).collect();
    // Zeros at analog infinity map to Nyquist.
    dzeros.resize(dpoles.len(), C64::new(-1.0, 0.0));

    let sos = Sos {
        sections: group_sections(&dpoles, &dzeros),
    };
    let radius = sos.max_pole_radius();
    if !sos.is_stable() {
        return Err(Error::UnstableFilter { radius });
    }
    Ok(sos)
}

fn conj_pairs(roots: &[C64]) -> (Vec<C64>, Vec<f64>) {
    let tol = 1e-9;
    let mut complex: Vec<C64> = roots.iter().copied().filter(|r| r.im > tol).collect();
    let mut real: Vec<f64> = roots
        .iter()
        .filter(|r| r.im.abs() <= tol)
        .map(|r| r.re)
        .collect();
    complex.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
    real.sort_by(|a, b| a.total_cmp(b));
    (complex, real)
}

fn group_sections(poles: &[C64], zeros: &[C64]) -> Vec<Biquad> {
    let (pc, mut pr) = conj_pairs(poles);
    let (zc, mut zr) = conj_pairs(zeros);
    let mut zc = zc.into_iter();
    let mut sections = Vec::new();

    let mut next_zero_pair = |zr: &mut Vec<f64>| -> (f64, f64) {
        if let Some(z) = zc.next() {
            (-2.0 * z.re, z.norm_sqr())
        } else {
            let a = zr.pop().unwrap_or(-1.0);
            let b = zr.pop().unwrap_or(-1.0);
            (-(a + b), a * b)
        }
    };

    for p in pc {
        let (b1, b2) = next_zero_pair(&mut zr);
        sections.push(normalize_dc(Biquad {
            b0: 1.0,
            b1,
            b2,
            a1: -2.0 * p.re,
            a2: p.norm_sqr(),
        }));
    }
    while !pr.is_empty() {
        let p1 = pr.pop().unwrap();
        if let Some(p2) = pr.pop() {
            let (b1, b2) = next_zero_pair(&mut zr);
            sections.push(normalize_dc(Biquad {
                b0: 1.0,
                b1,
                b2,
                a1: -(p1 + p2),
                a2: p1 * p2,
            }));
        } else {
            let z = zr.pop().unwrap_or(-1.0);
            sections.push(normalize_dc(Biquad {
                b0: 1.0,
                b1: -z,
                b2: 0.0,
                a1: -p1,
                a2: 0.0,
            }));
        }
    }
    sections
}

fn normalize_dc(mut s: Biquad) -> Biquad {
    let g = s.dc_gain();
    s.b0 /= g;
    s.b1 /= g;
    s.b2 /= g;
    s
}

fn butterworth_poles(n: usize) -> Vec<C64> {
    (0..n)
        .map(|k| {
            let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
            C64::from_polar(1.0, theta)
        })
        .collect()
}

fn chebyshev1_poles(n: usize, ripple_db: f64) -> Vec<C64> {
    let eps = (10f64.powf(ripple_db / 10.0) - 1.0).sqrt();
    let mu = (1.0 / eps).asinh() / n as f64;
    (0..n)
        .map(|k| {
            let theta = PI * (2 * k + 1) as f64 / (2 * n) as f64;
            C64::new(-mu.sinh() * theta.sin(), mu.cosh() * theta.cos())
        })
        .collect()
}

/// Bessel poles normalized so that |H(j1)| = 1/sqrt(2).
fn bessel_poles(n: usize) -> Vec<C64> {
    // Reverse Bessel polynomial: a_k = (2n-k)! / (2^(n-k) k! (n-k)!)
    let fact = |m: usize| (1..=m).fold(1.0f64, |acc, v| acc * v as f64);
    let coeffs: Vec<f64> = (0..=n)
        .map(|k| fact(2 * n - k) / (2f64.powi((n - k) as i32) * fact(k) * fact(n - k)))
        .collect();
    let poles = polynomial_roots(&coeffs);

    // |H(jw)|^2 is monotone decreasing; bisect for the -3 dB point.
    let mag2 = |w: f64| {
        poles
            .iter()
            .map(|p| p.norm_sqr() / (C64::new(0.0, w) - p).norm_sqr())
            .product::<f64>()
    };
    let (mut lo, mut hi) = (1e-6, 1.0);
    while mag2(hi) > 0.5 {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mag2(mid) > 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let w3 = 0.5 * (lo + hi);
    poles.into_iter().map(|p| p / w3).collect()
}

/// Roots of `sum_k c[k] s^k` by Aberth-Ehrlich iteration.
fn polynomial_roots(c: &[f64]) -> Vec<C64> {
    let n = c.len() - 1;
    let lead = c[n];
    let monic: Vec<f64> = c.iter().map(|v| v / lead).collect();
    let eval = |z: C64| -> (C64, C64) {
        let mut p = C64::new(1.0, 0.0);
        let mut dp = C64::new(0.0, 0.0);
        for k in (0..n).rev() {
            dp = dp * z + p;
            p = p * z + monic[k];
        }
        (p, dp)
    };
    let radius = monic[0].abs().powf(1.0 / n as f64);
    let mut z: Vec<C64> = (0..n)
        .map(|k| C64::from_polar(radius, 2.0 * PI * k as f64 / n as f64 + 0.4))
        .collect();
    for _ in 0..500 {
        let mut max_step: f64 = 0.0;
        for k in 0..n {
            let (p, dp) = eval(z[k]);
            let ratio = p / dp;
            let repulsion: C64 = (0..n)
                .filter(|&j| j != k)
                .map(|j| (z[k] - z[j]).inv())
                .sum();
            let step = ratio / (C64::new(1.0, 0.0) - ratio * repulsion);
            z[k] -= step;
            max_step = max_step.max(step.norm() / z[k].norm().max(1e-300));
        }
        if max_step < 1e-15 {
            break;
        }
    }
    // Enforce exact conjugate symmetry for the real-coefficient polynomial.
    for r in z.iter_mut() {
        if r.im.abs() < 1e-10 * r.norm() {
            r.im = 0.0;
        }
    }
    z
}

// Elliptic design via Landen transformations.

fn landen(k: f64) -> Vec<f64> {
    let mut v = Vec::new();
    let mut k = k;
    for _ in 0..30 {
        if k < 1e-16 {
            break;
        }
        let kp = (1.0 - k * k).sqrt();
        k = (k / (1.0 + kp)).powi(2);
        v.push(k);
    }
    v
}

fn ellip_k(k: f64) -> f64 {
    FRAC_PI_2 * landen(k).iter().map(|v| 1.0 + v).product::<f64>()
}

/// Jacobi cd(uK, k) via descending Landen.
fn cde(u: C64, k: f64) -> C64 {
    let v = landen(k);
    let mut w = (u * FRAC_PI_2).cos();
    for &vn in v.iter().rev() {
        w = (1.0 + vn) * w / (1.0 + vn * w * w);
    }
    w
}

/// Jacobi sn(uK, k) via descending Landen.
fn sne(u: C64, k: f64) -> C64 {
    let v = landen(k);
    let mut w = (u * FRAC_PI_2).sin();
    for &vn in v.iter().rev() {
        w = (1.0 + vn) * w / (1.0 + vn * w * w);
    }
    w
}

fn srem(x: f64, y: f64) -> f64 {
    x - y * (x / y).round()
}

/// Inverse of `cde`: returns u with cd(uK, k) = w.
fn acde(w: C64, k: f64) -> C64 {
    let v = landen(k);
    let mut w = w;
    for (n, &vn) in v.iter().enumerate() {
        let v1 = if n == 0 { k } else { v[n - 1] };
        w = w / (1.0 + (1.0 - w * w * v1 * v1).sqrt()) * (2.0 / (1.0 + vn));
    }
    let u = w.acos() * (2.0 / PI);
    let kp = (1.0 - k * k).sqrt();
    let r = ellip_k(kp) / ellip_k(k);
    C64::new(srem(u.re, 4.0), srem(u.im, 2.0 * r))
}

fn asne(w: C64, k: f64) -> C64 {
    C64::new(1.0, 0.0) - acde(w, k)
}

/// Solves the degree equation for the selectivity modulus k given order and k1.
fn ellip_deg(n: usize, k1: f64) -> f64 {
    let l = n / 2;
    let k1p = (1.0 - k1 * k1).sqrt();
    let prod: f64 = (1..=l)
        .map(|i| {
            let ui = (2 * i - 1) as f64 / n as f64;
            sne(C64::new(ui, 0.0), k1p).re
        })
        .product();
    let kp = k1p.powi(n as i32) * prod.powi(4);
    (1.0 - kp * kp).sqrt()
}

/// Analog elliptic prototype with passband edge at 1 rad/s.
fn elliptic_zpk(n: usize, ripple_db: f64, stop_db: f64) -> (Vec<C64>, Vec<C64>) {
    let ep = (10f64.powf(ripple_db / 10.0) - 1.0).sqrt();
    let es = (10f64.powf(stop_db / 10.0) - 1.0).sqrt();
    let k1 = ep / es;
    let k = ellip_deg(n, k1);
    let j = C64::new(0.0, 1.0);
    let l = n / 2;

    let v0 = -j * asne(j / ep, k1) / n as f64;
    let mut zeros = Vec::with_capacity(2 * l);
    let mut poles = Vec::with_capacity(n);
    for i in 1..=l {
        let ui = (2 * i - 1) as f64 / n as f64;
        let zeta = cde(C64::new(ui, 0.0), k);
        let z = j / (zeta * k);
        zeros.push(z);
        zeros.push(z.conj());
        let p = j * cde(ui - j * v0, k);
        let p = if p.re > 0.0 { -p.conj() } else { p };
        poles.push(p);
        poles.push(p.conj());
    }
    if n % 2 == 1 {
        let p0 = j * sne(j * v0, k);
        poles.push(C64::new(-p0.re.abs(), 0.0));
    }
    (zeros, poles)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum FilterMode {
    /// Forward-backward filtering; no group delay, squared magnitude response.
    #[default]
    ZeroPhase,
    Causal,
}

/// Runs `wav` through the cascade. Empty input yields empty output.
pub fn apply_filter(wav: &Waveform, sos: &Sos, mode: FilterMode) -> Waveform {
    let x = wav.samples();
    if x.is_empty() || sos.sections.is_empty() {
        return wav.clone();
    }
    let out = match mode {
        FilterMode::Causal => {
            let mut y = x.to_vec();
            for s in &sos.sections {
                s.run(&mut y, [0.0, 0.0]);
            }
            y
        }
        FilterMode::ZeroPhase => filtfilt(x, sos),
    };
    wav.with_samples(out)
}

/// Designs and applies a low-pass in one call.
pub fn lowpass(wav: &Waveform, spec: &FilterSpec, mode: FilterMode) -> Result<Waveform> {
    let sos = design_lowpass(spec, wav.sample_rate())?;
    Ok(apply_filter(wav, &sos, mode))
}

fn run_cascade_steady(sos: &Sos, y: &mut [f64]) {
    for s in &sos.sections {
        let x0 = y[0];
        let st = s.step_state();
        s.run(y, [st[0] * x0, st[1] * x0]);
    }
}

fn filtfilt(x: &[f64], sos: &Sos) -> Vec<f64> {
    let n = x.len();
    let pad = (3 * (2 * sos.sections.len() + 1)).min(n - 1);
    // Odd extension keeps the edges continuous in value and slope.
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));

    run_cascade_steady(sos, &mut ext);
    ext.reverse();
    run_cascade_steady(sos, &mut ext);
    ext.reverse();
    ext[pad..pad + n].to_vec()
}
