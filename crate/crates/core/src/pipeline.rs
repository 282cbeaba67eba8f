//! End-to-end procedures: degradation simulation, frequency-aware pair
//! construction, stage training, cascaded inference, augmentation search and
//! windowed sampling of long signals.

use std::time::Instant;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bandwidth::{estimate_f_eff, EstimatorConfig};
use crate::bridge::{estimate_z0, sample_with_z0, BridgeSchedule, NoiseSchedule, T_MIN};
use crate::checkpoint;
use crate::codec::{random_crop, Codec};
use crate::config::{AugmentationConfig, StageConfig};
use crate::dsp::{
    lowpass, replace_low_band, resample, stft, FilterFamily, FilterMode, FilterSpec, StftParams, Waveform, MAX_ORDER,
};
use crate::error::{Error, Result};
use crate::metrics::lsd;
use crate::nn::{Adam, Tensor};
use crate::predictor::{quantize_f_target, BridgeExample, Conditioning, Predictor, F_TARGET_GRID_HZ};

/// Narrowest bandwidth used for training pairs and inference conditioning.
pub const MIN_BAND_HZ: f64 = 1000.0;
/// Detected bandwidths at or above this fraction of Nyquist count as full-band.
pub const FULL_BAND_FRACTION: f64 = 0.95;
pub const BLUR_HALF_WIDTH: usize = 2;

/// How low-resolution training inputs are simulated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationPolicy {
    pub cutoff_range_hz: (f64, f64),
    pub families: Vec<FilterFamily>,
    /// Inclusive filter order range.
    pub order_range: (usize, usize),
}

impl Default for DegradationPolicy {
    fn default() -> Self {
        Self::first_stage()
    }
}

impl DegradationPolicy {
    /// Random family and order, cutoff in 1–20 kHz.
    pub fn first_stage() -> Self {
        Self {
            cutoff_range_hz: (1000.0, 20000.0),
            families: FilterFamily::ALL.to_vec(),
            order_range: (2, 10),
        }
    }

    /// Chebyshev Type-I of order 8 with a random cutoff.
    pub fn cascaded(lo_hz: f64, hi_hz: f64) -> Self {
        Self {
            cutoff_range_hz: (lo_hz, hi_hz),
            families: vec![FilterFamily::Chebyshev1],
            order_range: (8, 8),
        }
    }

    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let (lo, hi) = self.cutoff_range_hz;
        let nyq = sample_rate as f64 / 2.0;
        if !(lo > 0.0 && lo <= hi && hi < nyq) {
            return Err(Error::Config(format!(
                "degradation cutoff range [{lo}, {hi}] Hz must satisfy 0 < lo <= hi < {nyq} Hz"
            )));
        }
        if self.families.is_empty() {
            return Err(Error::Config("degradation policy lists no filter families".into()));
        }
        let (olo, ohi) = self.order_range;
        if !(olo >= 1 && olo <= ohi && ohi <= MAX_ORDER) {
            return Err(Error::Config(format!("degradation order range [{olo}, {ohi}] is invalid")));
        }
        Ok(())
    }

    /// Random family and order at the given cutoff.
    fn draw_filter<R: Rng + ?Sized>(&self, cutoff_hz: f64, rng: &mut R) -> FilterSpec {
        let family = self.families[rng.gen_range(0..self.families.len())];
        let order = rng.gen_range(self.order_range.0..=self.order_range.1);
        FilterSpec::new(family, order, cutoff_hz)
    }

    fn draw_cutoff<R: Rng + ?Sized>(&self, lo: f64, hi: f64, rng: &mut R) -> f64 {
        if lo < hi {
            rng.gen_range(lo..hi)
        } else {
            lo
        }
    }
}

/// Low-passes `wav` with a randomly drawn filter; returns the degraded signal and its cutoff.
pub fn simulate_lr<R: Rng + ?Sized>(wav: &Waveform, policy: &DegradationPolicy, rng: &mut R) -> Result<(Waveform, f64)> {
    policy.validate(wav.sample_rate())?;
    let (lo, hi) = policy.cutoff_range_hz;
    let cutoff = policy.draw_cutoff(lo, hi, rng);
    let spec = policy.draw_filter(cutoff, rng);
    Ok((lowpass(wav, &spec, FilterMode::ZeroPhase)?, cutoff))
}

/// One frequency-aware training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub x_hr: Waveform,
    pub x_lr: Waveform,
    pub f_prior: f64,
    pub f_target: f64,
}

/// Builds an any-to-any pair: `x_hr` is `wav` band-limited to a target
/// bandwidth no higher than its own, and `x_lr` is `x_hr` further limited to a
/// prior bandwidth below that. Returns `None` when the source is too narrow.
///
/// `f_target` is drawn on the conditioning grid (rounded down, so it never
/// exceeds `f_eff`) unless `fixed_target` pins it; `f_prior` is drawn from the
/// policy's cutoff range capped at `f_target` and clamped to at least 1 kHz.
pub fn prepare_anytoany_pair<R: Rng + ?Sized>(
    wav: &Waveform,
    f_eff: f64,
    policy: &DegradationPolicy,
    fixed_target: Option<f64>,
    rng: &mut R,
) -> Result<Option<TrainingPair>> {
    let nyq = wav.nyquist();
    let f_eff = if f_eff >= FULL_BAND_FRACTION * nyq { nyq } else { f_eff.min(nyq) };
    let lowest_target = MIN_BAND_HZ + F_TARGET_GRID_HZ;
    if f_eff < lowest_target {
        return Ok(None);
    }
    let f_target = match fixed_target {
        Some(f) if f > f_eff => return Ok(None),
        Some(f) => f,
        None => {
            let f = rng.gen_range(lowest_target..=f_eff);
            ((f / F_TARGET_GRID_HZ).floor() * F_TARGET_GRID_HZ).max(lowest_target)
        }
    };
    let (lo, hi) = policy.cutoff_range_hz;
    let hi = hi.min(f_target);
    let lo = lo.max(MIN_BAND_HZ);
    if lo > hi || lo >= f_target {
        return Ok(None);
    }
    let f_prior = policy.draw_cutoff(lo, hi, rng);
    let spec = policy.draw_filter(f_prior, rng);
    let x_hr = if f_target < nyq {
        lowpass(wav, &FilterSpec::chebyshev_default(f_target), FilterMode::ZeroPhase)?
    } else {
        wav.clone()
    };
    let x_lr = lowpass(&x_hr, &spec, FilterMode::ZeroPhase)?;
    Ok(Some(TrainingPair {
        x_hr,
        x_lr,
        f_prior,
        f_target,
    }))
}

/// Five-tap Gaussian kernel `w(τ) ∝ exp(−τ² / (2 b_r²))`, `τ ∈ {−2, …, 2}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlurKernel {
    pub b_r: f64,
    pub weights: [f64; 2 * BLUR_HALF_WIDTH + 1],
}

impl BlurKernel {
    /// `b_r = 0` gives the unit impulse.
    pub fn new(b_r: f64) -> Result<Self> {
        if !(b_r >= 0.0 && b_r.is_finite()) {
            return Err(Error::InvalidArgument(format!("blur ratio {b_r} must be finite and non-negative")));
        }
        let mut weights = [0.0; 2 * BLUR_HALF_WIDTH + 1];
        if b_r == 0.0 {
            weights[BLUR_HALF_WIDTH] = 1.0;
        } else {
            for (i, w) in weights.iter_mut().enumerate() {
                let tau = i as f64 - BLUR_HALF_WIDTH as f64;
                *w = (-tau * tau / (2.0 * b_r * b_r)).exp();
            }
            let z: f64 = weights.iter().sum();
            weights.iter_mut().for_each(|w| *w /= z);
        }
        Ok(Self { b_r, weights })
    }
}

/// Whole-sample reflection (`-1 → 1`, `n → n-2`), folded for short signals.
fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// Blurs every channel along time with [`BlurKernel`], reflect-padded.
pub fn blur_latent(z: &Tensor, b_r: f64) -> Result<Tensor> {
    let kernel = BlurKernel::new(b_r)?;
    if b_r == 0.0 {
        return Ok(z.clone());
    }
    let n = z.cols();
    let mut out = Tensor::zeros(z.rows(), n);
    for r in 0..z.rows() {
        let src = z.row(r);
        let dst = out.row_mut(r);
        for (j, o) in dst.iter_mut().enumerate() {
            *o = kernel
                .weights
                .iter()
                .enumerate()
                .map(|(k, w)| w * src[reflect_index(j as isize + k as isize - BLUR_HALF_WIDTH as isize, n)])
                .sum();
        }
    }
    Ok(out)
}

/// Removes the band within `margin_hz` of the prior bandwidth with a
/// zero-phase Chebyshev Type-I low-pass. A zero margin is a bypass.
pub fn augment_prior(wav: &Waveform, prior_band_hz: f64, margin_hz: f64) -> Result<Waveform> {
    if !(margin_hz >= 0.0) {
        return Err(Error::InvalidArgument(format!("augmentation margin {margin_hz} Hz")));
    }
    if margin_hz == 0.0 {
        return Ok(wav.clone());
    }
    if margin_hz >= prior_band_hz {
        return Err(Error::InvalidArgument(format!(
            "augmentation margin {margin_hz} Hz must be below the prior bandwidth {prior_band_hz} Hz"
        )));
    }
    lowpass(wav, &FilterSpec::chebyshev_default(prior_band_hz - margin_hz), FilterMode::ZeroPhase)
}

/// Checkpoint metadata stored alongside a stage's predictor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageMeta {
    pub target_sr: u32,
    pub cascaded: bool,
    pub schedule: BridgeSchedule,
}

/// A stage with its models loaded.
#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub target_sr: u32,
    pub codec: Codec,
    pub predictor: Predictor,
    pub schedule: BridgeSchedule,
    pub cascaded: bool,
    pub augmentation: Option<AugmentationConfig>,
    pub filter_before_resample: bool,
    pub replace_low_band: bool,
    pub stitch: Option<StitchConfig>,
}

impl Stage {
    pub fn new(name: impl Into<String>, target_sr: u32, codec: Codec, predictor: Predictor, cascaded: bool) -> Result<Self> {
        let stage = Self {
            name: name.into(),
            target_sr,
            codec,
            predictor,
            schedule: BridgeSchedule::default(),
            cascaded,
            augmentation: None,
            filter_before_resample: true,
            replace_low_band: false,
            stitch: None,
        };
        stage.check_models()?;
        Ok(stage)
    }

    /// Loads both checkpoints named by `cfg` and checks they fit the stage.
    pub fn from_config(cfg: &StageConfig) -> Result<Self> {
        let codec = checkpoint::load_codec(&cfg.codec)?;
        let (predictor, meta): (Predictor, StageMeta) = checkpoint::load_predictor(&cfg.predictor)?;
        if meta.target_sr != cfg.target_sr || meta.cascaded != cfg.cascaded {
            return Err(Error::Config(format!(
                "predictor {} was trained for {} Hz (cascaded: {}), stage wants {} Hz (cascaded: {})",
                cfg.predictor.display(),
                meta.target_sr,
                meta.cascaded,
                cfg.target_sr,
                cfg.cascaded
            )));
        }
        let stage = Self {
            name: cfg.name.clone(),
            target_sr: cfg.target_sr,
            codec,
            predictor,
            schedule: meta.schedule,
            cascaded: cfg.cascaded,
            augmentation: cfg.augmentation,
            filter_before_resample: cfg.inference.filter_before_resample,
            replace_low_band: cfg.inference.replace_low_band,
            stitch: cfg.inference.stitch,
        };
        stage.check_models()?;
        Ok(stage)
    }

    fn check_models(&self) -> Result<()> {
        if self.codec.config().sample_rate != self.target_sr {
            return Err(Error::RateMismatch {
                expected: self.target_sr,
                got: self.codec.config().sample_rate,
            });
        }
        let p = self.predictor.config();
        if p.channels != self.codec.config().channels {
            return Err(Error::Config(format!(
                "predictor expects {} latent channels, codec produces {}",
                p.channels,
                self.codec.config().channels
            )));
        }
        if p.blur_token != self.cascaded {
            return Err(Error::Config(format!(
                "stage {} is {}cascaded but its predictor {} a blur token",
                self.name,
                if self.cascaded { "" } else { "not " },
                if p.blur_token { "has" } else { "lacks" }
            )));
        }
        if self.cascaded && self.augmentation.is_none() {
            return Err(Error::Config(format!("cascaded stage {} has no augmentation settings", self.name)));
        }
        Ok(())
    }

    pub fn meta(&self) -> StageMeta {
        StageMeta {
            target_sr: self.target_sr,
            cascaded: self.cascaded,
            schedule: self.schedule,
        }
    }
}

/// Window-averaged sampling settings. Overlap fractions fall linearly from
/// `overlap_start` at the first step to `overlap_end` at the last.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StitchConfig {
    pub window_s: f64,
    pub overlap_start: f64,
    pub overlap_end: f64,
}

impl Default for StitchConfig {
    fn default() -> Self {
        Self {
            window_s: 5.12,
            overlap_start: 0.5,
            overlap_end: 0.0,
        }
    }
}

impl StitchConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return Err(Error::Config(format!("stitch window {} s", self.window_s)));
        }
        let ok = |v: f64| (0.0..1.0).contains(&v);
        if !(ok(self.overlap_start) && ok(self.overlap_end) && self.overlap_end <= self.overlap_start) {
            return Err(Error::Config(format!(
                "stitch overlaps must satisfy 0 <= end ({}) <= start ({}) < 1",
                self.overlap_end, self.overlap_start
            )));
        }
        Ok(())
    }

    /// Hop in frames at sampling step `step` of `n_steps`.
    pub fn hop(&self, window: usize, step: usize, n_steps: usize) -> usize {
        let frac = if n_steps > 1 {
            step as f64 / (n_steps - 1) as f64
        } else {
            0.0
        };
        let overlap = self.overlap_start + (self.overlap_end - self.overlap_start) * frac;
        ((window as f64 * (1.0 - overlap)).round() as usize).clamp(1, window)
    }
}

/// Window start frames covering `[0, len)` with windows of `window` frames,
/// spaced by `hop` and shifted by `offset`. Edge windows are clamped inside
/// the signal so every window has full length.
pub fn window_starts(len: usize, window: usize, hop: usize, offset: usize) -> Vec<usize> {
    if window >= len {
        return vec![0];
    }
    let hop = hop.max(1);
    let last = len - window;
    let mut starts = Vec::new();
    let mut s = offset as isize % hop as isize - hop as isize;
    loop {
        let c = s.clamp(0, last as isize) as usize;
        if starts.last() != Some(&c) {
            starts.push(c);
        }
        if c == last {
            break;
        }
        s += hop as isize;
    }
    starts
}

/// Strictly positive raised-sine taper used to weight window contributions.
pub fn window_taper(window: usize) -> Vec<f64> {
    (0..window)
        .map(|j| (std::f64::consts::PI * (j as f64 + 0.5) / window as f64).sin().powi(2))
        .collect()
}

/// Normalized per-frame weight of every window, `out[w][j]` for frame `starts[w] + j`.
pub fn normalized_weights(len: usize, window: usize, starts: &[usize]) -> Vec<Vec<f64>> {
    let window = window.min(len);
    let taper = window_taper(window);
    let mut total = vec![0.0; len];
    for &s in starts {
        for (j, w) in taper.iter().enumerate() {
            total[s + j] += w;
        }
    }
    starts
        .iter()
        .map(|&s| taper.iter().enumerate().map(|(j, w)| w / total[s + j]).collect())
        .collect()
}

/// Averages per-window estimates with normalized weights. Each frame is
/// written as its first contribution plus weighted deviations from it, which
/// keeps constant fields (and single-window frames) exact.
pub fn blend_windows(rows: usize, len: usize, window: usize, starts: &[usize], parts: &[Tensor]) -> Tensor {
    let weights = normalized_weights(len, window, starts);
    let mut first: Vec<Option<usize>> = vec![None; len];
    let mut out = Tensor::zeros(rows, len);
    let mut dev = Tensor::zeros(rows, len);
    for (w, (&s, part)) in starts.iter().zip(parts).enumerate() {
        for j in 0..part.cols() {
            let f = s + j;
            match first[f] {
                None => {
                    first[f] = Some(w);
                    for r in 0..rows {
                        out.set(r, f, part.get(r, j));
                    }
                }
                Some(w0) => {
                    let j0 = f - starts[w0];
                    for r in 0..rows {
                        let d = part.get(r, j) - parts[w0].get(r, j0);
                        dev.set(r, f, dev.get(r, f) + weights[w][j] * d);
                    }
                }
            }
        }
    }
    for (o, d) in out.data_mut().iter_mut().zip(dev.data()) {
        *o += d;
    }
    out
}

/// Conditioning shared by every sampling step of one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingCond {
    pub f_prior: f64,
    pub f_target: f64,
    pub b_r: Option<f64>,
}

/// Runs the reverse sampler from `z_prior`. With `stitch`, `ẑ0` is estimated
/// per window and averaged before every step; windows at least as long as the
/// signal reduce to plain sampling.
#[allow(clippy::too_many_arguments)]
pub fn sample_latent<S: NoiseSchedule + ?Sized, R: Rng + ?Sized>(
    predictor: &Predictor,
    sched: &S,
    z_prior: &Tensor,
    z_cond: &Tensor,
    cond: SamplingCond,
    n_steps: usize,
    window_frames: Option<usize>,
    stitch: &StitchConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let len = z_prior.cols();
    let predict = |z_t: &Tensor, zc: &Tensor, t: f64| -> Result<Tensor> {
        let c = Conditioning::new(t, cond.f_prior, cond.f_target, cond.b_r)?;
        let eps = predictor.forward(z_t, zc, &c)?;
        estimate_z0(z_t, &eps, t, sched)
    };
    match window_frames {
        Some(window) if window < len => {
            stitch.validate()?;
            sample_with_z0(sched, z_prior, n_steps, rng, |z_t, t, step| {
                let hop = stitch.hop(window, step, n_steps);
                let starts = window_starts(len, window, hop, step * hop / 4);
                let parts = starts
                    .iter()
                    .map(|&s| predict(&z_t.slice_cols(s, s + window), &z_cond.slice_cols(s, s + window), t))
                    .collect::<Result<Vec<_>>>()?;
                Ok(blend_windows(z_t.rows(), len, window, &starts, &parts))
            })
        }
        _ => sample_with_z0(sched, z_prior, n_steps, rng, |z_t, t, _| predict(z_t, z_cond, t)),
    }
}

/// Whether to replace the low band of the output with the input's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PostReplace {
    /// Use each stage's configured setting.
    #[default]
    Configured,
    /// Additionally replace after the final stage.
    Final,
    /// Never replace.
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpsampleOptions {
    pub n_steps: usize,
    pub post_replace: PostReplace,
    /// Overrides every stage's windowing setting when present.
    pub stitch: Option<StitchConfig>,
    pub estimator: EstimatorConfig,
}

impl Default for UpsampleOptions {
    fn default() -> Self {
        Self {
            n_steps: crate::bridge::DEFAULT_STEPS,
            post_replace: PostReplace::Configured,
            stitch: None,
            estimator: EstimatorConfig::default(),
        }
    }
}

/// Runs a chain of stages. The first stage must accept the input rate and
/// rates must rise strictly along the chain.
pub fn upsample<R: Rng + ?Sized>(wav: &Waveform, stages: &[Stage], opts: &UpsampleOptions, rng: &mut R) -> Result<Waveform> {
    let last = stages
        .last()
        .ok_or_else(|| Error::InvalidArgument("upsampling needs at least one stage".into()))?;
    for w in stages.windows(2) {
        if w[1].target_sr <= w[0].target_sr {
            return Err(Error::Config(format!(
                "stage rates must increase strictly: {} Hz follows {} Hz",
                w[1].target_sr, w[0].target_sr
            )));
        }
    }
    if wav.sample_rate() > stages[0].target_sr {
        return Err(Error::InvalidArgument(format!(
            "input rate {} Hz exceeds the first stage rate {} Hz (final {} Hz)",
            wav.sample_rate(),
            stages[0].target_sr,
            last.target_sr
        )));
    }
    if wav.peak() == 0.0 {
        warn!("input is silent; passing it through without super-resolution");
        return resample(wav, last.target_sr);
    }
    let mut cur = wav.clone();
    for (i, stage) in stages.iter().enumerate() {
        let replace = match opts.post_replace {
            PostReplace::Off => false,
            PostReplace::Final => stage.replace_low_band || i + 1 == stages.len(),
            PostReplace::Configured => stage.replace_low_band,
        };
        cur = run_stage(&cur, stage, opts, replace, None, rng)?;
    }
    Ok(cur)
}

/// Per-call overrides of a cascaded stage's inference augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugOverride {
    pub b_r: f64,
    pub margin_hz: f64,
}

fn run_stage<R: Rng + ?Sized>(
    input: &Waveform,
    stage: &Stage,
    opts: &UpsampleOptions,
    replace: bool,
    aug: Option<AugOverride>,
    rng: &mut R,
) -> Result<Waveform> {
    let started = Instant::now();
    let est = estimate_f_eff(input, &opts.estimator)?;
    let f_prior = est.f_eff.clamp(MIN_BAND_HZ.min(input.nyquist()), input.nyquist());
    let band_limit = (f_prior < FULL_BAND_FRACTION * input.nyquist()).then(|| FilterSpec::chebyshev_default(f_prior));
    let x_lr = match (band_limit, stage.filter_before_resample) {
        (Some(spec), true) => resample(&lowpass(input, &spec, FilterMode::ZeroPhase)?, stage.target_sr)?,
        (Some(spec), false) => lowpass(&resample(input, stage.target_sr)?, &spec, FilterMode::ZeroPhase)?,
        (None, _) => resample(input, stage.target_sr)?,
    };
    let f_target = quantize_f_target(stage.target_sr as f64 / 2.0);
    let f_prior = f_prior.min(f_target);
    let s = stage.codec.scale();

    let (z_cond, z_prior, b_r) = if stage.cascaded {
        let cfg = stage.augmentation.expect("checked at stage construction");
        let o = aug.unwrap_or(AugOverride {
            b_r: cfg.b_r_star,
            margin_hz: cfg.lpf_margin_hz,
        });
        let x_aug = augment_prior(&x_lr, f_prior, o.margin_hz)?;
        let z_cond = stage.codec.encode(&x_aug)?.scaled();
        let z_prior = blur_latent(&z_cond, o.b_r)?;
        (z_cond, z_prior, Some(o.b_r))
    } else {
        let z = stage.codec.encode(&x_lr)?.scaled();
        (z.clone(), z, None)
    };
    let cond = SamplingCond { f_prior, f_target, b_r };
    let stitch = opts.stitch.or(stage.stitch);
    let window_frames = stitch.map(|st| ((st.window_s * stage.codec.config().frame_rate()).round() as usize).max(1));
    let z_hat = sample_latent(
        &stage.predictor,
        &stage.schedule,
        &z_prior,
        &z_cond,
        cond,
        opts.n_steps,
        window_frames,
        &stitch.unwrap_or_default(),
        rng,
    )?;
    let latent = stage.codec.latent_from(z_hat.scale(1.0 / s), Some(x_lr.len()))?;
    let mut out = stage.codec.decode(&latent)?;
    if replace {
        out = replace_low_band(&out, &x_lr, f_prior)?;
    }
    let secs = started.elapsed().as_secs_f64();
    info!(
        "stage {} ({} Hz): f_prior {:.0} Hz, {} steps, {:.2} s (RTF {:.3})",
        stage.name,
        stage.target_sr,
        f_prior,
        opts.n_steps,
        secs,
        secs / out.duration_secs().max(1e-9)
    );
    Ok(out)
}

/// Upsamples one long input through a single stage with window-averaged sampling.
pub fn stitch_windows<R: Rng + ?Sized>(
    wav: &Waveform,
    stage: &Stage,
    stitch: StitchConfig,
    n_steps: usize,
    rng: &mut R,
) -> Result<Waveform> {
    let opts = UpsampleOptions {
        n_steps,
        stitch: Some(stitch),
        ..UpsampleOptions::default()
    };
    upsample(wav, std::slice::from_ref(stage), &opts, rng)
}

/// Builds the bridge regression example for one training pair.
fn build_example<R: Rng + ?Sized>(
    codec: &Codec,
    pair: &TrainingPair,
    aug: Option<&AugmentationConfig>,
    rng: &mut R,
) -> Result<BridgeExample> {
    let z0 = codec.encode(&pair.x_hr)?.scaled();
    let (z_cond, z_prior, b_r) = match aug {
        Some(a) => {
            let margin = rng.gen_range(0.0..=a.train_margin_max_hz).min(pair.f_prior - MIN_BAND_HZ).max(0.0);
            let x_aug = augment_prior(&pair.x_lr, pair.f_prior, margin)?;
            let z_cond = codec.encode(&x_aug)?.scaled();
            let b_r = rng.gen_range(0.0..=a.b_r_max);
            let z_prior = blur_latent(&z_cond, b_r)?;
            (z_cond, z_prior, Some(b_r))
        }
        None => {
            let z = codec.encode(&pair.x_lr)?.scaled();
            (z.clone(), z, None)
        }
    };
    let t = rng.gen_range(T_MIN..=1.0);
    let eps = Tensor::randn(z0.rows(), z0.cols(), rng);
    Ok(BridgeExample {
        cond: Conditioning::new(t, pair.f_prior, pair.f_target, b_r)?,
        z0,
        z_prior,
        z_cond,
        t,
        eps,
    })
}

/// Trains a stage's predictor against a frozen codec; returns the per-step loss trace.
pub fn train_stage(
    codec: &Codec,
    predictor: &mut Predictor,
    cfg: &StageConfig,
    corpus: &[Waveform],
    opt: &mut Adam,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if codec.config().sample_rate != cfg.target_sr {
        return Err(Error::RateMismatch {
            expected: cfg.target_sr,
            got: codec.config().sample_rate,
        });
    }
    if predictor.config().blur_token != cfg.cascaded {
        return Err(Error::Config("predictor blur token does not match the stage kind".into()));
    }
    if let Some(w) = corpus.iter().find(|w| w.sample_rate() != cfg.target_sr) {
        return Err(Error::RateMismatch {
            expected: cfg.target_sr,
            got: w.sample_rate(),
        });
    }
    let est_cfg = EstimatorConfig::default();
    let mut usable = Vec::new();
    for w in corpus {
        let f_eff = estimate_f_eff(w, &est_cfg)?.f_eff;
        if f_eff >= MIN_BAND_HZ && w.peak() > 0.0 {
            usable.push((w, f_eff));
        }
    }
    if usable.is_empty() {
        return Err(Error::InvalidArgument("no training clip has a usable bandwidth".into()));
    }
    if usable.len() < corpus.len() {
        warn!("skipping {} clips narrower than {MIN_BAND_HZ} Hz", corpus.len() - usable.len());
    }
    let tc = &cfg.training;
    let r = codec.ratio();
    let crop = (tc.crop_len / r).max(1) * r;
    let aug = if cfg.cascaded { cfg.augmentation.as_ref() } else { None };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut trace = Vec::with_capacity(tc.steps);
    let mut skipped = 0usize;
    for step in 0..tc.steps {
        let mut batch = Vec::with_capacity(tc.batch_size);
        while batch.len() < tc.batch_size.max(1) {
            let (w, f_eff) = usable[rng.gen_range(0..usable.len())];
            let x = random_crop(w, crop, &mut rng);
            match prepare_anytoany_pair(&x, f_eff, &cfg.degradation, tc.fixed_target_hz, &mut rng)? {
                Some(pair) => batch.push(build_example(codec, &pair, aug, &mut rng)?),
                None => {
                    skipped += 1;
                    if skipped > 100 * (step + 1) * tc.batch_size.max(1) {
                        return Err(Error::InvalidArgument(
                            "the degradation policy yields no valid pairs for this corpus".into(),
                        ));
                    }
                }
            }
        }
        let loss = predictor.train_step(&batch, &cfg.schedule, opt).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("stage {} at step {step}: {msg}", cfg.name)),
            other => other,
        })?;
        if tc.log_every > 0 && step % tc.log_every == 0 {
            info!("stage {} step {step}: loss {loss:.5}", cfg.name);
        }
        trace.push(loss);
    }
    let means = window_means(&trace, 1000);
    if means.len() >= 2 && means[means.len() - 1] > means[0] {
        warn!("stage {} loss trend is not decreasing: {:?}", cfg.name, means);
    }
    debug!("stage {} trained for {} steps ({skipped} pairs skipped)", cfg.name, tc.steps);
    Ok(trace)
}

/// Means over consecutive non-overlapping windows (a trailing partial window is dropped).
pub fn window_means(trace: &[f64], window: usize) -> Vec<f64> {
    if window == 0 {
        return Vec::new();
    }
    trace
        .chunks_exact(window)
        .map(|c| c.iter().sum::<f64>() / window as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugGrid {
    pub b_r: Vec<f64>,
    pub margin_hz: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TuneRow {
    pub b_r: f64,
    pub margin_hz: f64,
    pub mean_lsd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneResult {
    pub rows: Vec<TuneRow>,
    pub best: TuneRow,
}

impl TuneResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("b_r,margin_hz,mean_lsd\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{}\n", r.b_r, r.margin_hz, r.mean_lsd));
        }
        out
    }
}

/// STFT used for LSD in evaluation and tuning: about 64 ms windows, hop a quarter of that.
pub fn eval_stft_params(sample_rate: u32) -> StftParams {
    let n = ((sample_rate as f64 * 0.064) as usize).next_power_of_two().max(64);
    StftParams::new(n, n / 4).expect("power-of-two window")
}

/// Exhaustive search over blur ratio and margin for a cascaded stage. Each
/// grid point runs the stage on every `(input, reference)` pair with the same
/// seed and is scored by mean LSD; ties go to the smaller blur ratio, then the
/// smaller margin.
pub fn tune_augmentation(
    stage: &Stage,
    val_pairs: &[(Waveform, Waveform)],
    grid: &AugGrid,
    n_steps: usize,
    seed: u64,
) -> Result<TuneResult> {
    if grid.b_r.is_empty() || grid.margin_hz.is_empty() {
        return Err(Error::InvalidArgument("augmentation grid is empty".into()));
    }
    if val_pairs.is_empty() {
        return Err(Error::InvalidArgument("no validation pairs".into()));
    }
    if !stage.cascaded {
        return Err(Error::InvalidArgument(format!(
            "stage {} is not cascaded; it has no prior augmentation to tune",
            stage.name
        )));
    }
    let sorted = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v.dedup();
        v
    };
    let opts = UpsampleOptions {
        n_steps,
        ..UpsampleOptions::default()
    };
    let mut rows = Vec::new();
    for &b_r in &sorted(&grid.b_r) {
        for &margin_hz in &sorted(&grid.margin_hz) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut total = 0.0;
            for (input, reference) in val_pairs {
                if reference.sample_rate() != stage.target_sr {
                    return Err(Error::RateMismatch {
                        expected: stage.target_sr,
                        got: reference.sample_rate(),
                    });
                }
                let aug = AugOverride { b_r, margin_hz };
                let out = run_stage(input, stage, &opts, stage.replace_low_band, Some(aug), &mut rng)?;
                let params = eval_stft_params(stage.target_sr);
                let out = out.fit_len(reference.len());
                total += lsd(&stft(reference, &params)?, &stft(&out, &params)?)?;
            }
            let mean_lsd = total / val_pairs.len() as f64;
            if !mean_lsd.is_finite() {
                return Err(Error::NonFinite(format!("LSD at b_r {b_r}, margin {margin_hz}")));
            }
            info!("tune: b_r {b_r}, margin {margin_hz} Hz -> LSD {mean_lsd:.4}");
            rows.push(TuneRow { b_r, margin_hz, mean_lsd });
        }
    }
    let best = select_best(&rows).expect("non-empty grid");
    Ok(TuneResult { rows, best })
}

/// Lowest mean LSD; ties go to the smaller blur ratio, then the smaller margin.
pub fn select_best(rows: &[TuneRow]) -> Option<TuneRow> {
    rows.iter().copied().min_by(|a, b| {
        a.mean_lsd
            .total_cmp(&b.mean_lsd)
            .then(a.b_r.total_cmp(&b.b_r))
            .then(a.margin_hz.total_cmp(&b.margin_hz))
    })
}
