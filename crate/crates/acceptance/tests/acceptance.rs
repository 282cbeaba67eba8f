//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Reference values are computed here independently of the library (quadrature
//! for the schedule, brute-force metrics and convolutions, direct evaluation of
//! filter polynomials), so each check compares two separate implementations.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use lbm::bandwidth::{estimate_f_eff, EstimatorConfig};
use lbm::bridge::{estimate_z0, forward_sample, loss_target, sample_with_z0, BridgeSchedule, NoiseSchedule, T_MIN};
use lbm::codec::{fit_latent_scale, train_codec, Codec, CodecConfig, CodecTrainConfig};
use lbm::config::StageConfig;
use lbm::corpus::{toy_clip, toy_corpus, ToyCorpusConfig};
use lbm::dsp::{
    apply_filter, design_lowpass, lowpass, replace_low_band, resample, stft, FilterFamily, FilterMode, FilterSpec,
    Spectrogram, StftParams,
};
use lbm::metrics::{evaluate_pair, lsd, lsd_band, spectral_ssim, SsimConfig};
use lbm::nn::{Adam, Tensor};
use lbm::pipeline::{
    blend_windows, blur_latent, eval_stft_params, train_stage, upsample, window_starts, BlurKernel, Stage,
    StitchConfig, UpsampleOptions,
};
use lbm::predictor::{grad_check, BridgeExample, Conditioning, Predictor, PredictorConfig};
use lbm::Waveform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = (bool, String);

const G_MIN_SQ: f64 = 0.001;
const G_MAX_SQ: f64 = 1.0;
/// `∫₀¹ g²` for the triangular schedule with the paper's endpoints.
const SIGMA1_SQ: f64 = 0.5005;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn schedule() -> BridgeSchedule {
    BridgeSchedule::new(G_MIN_SQ, G_MAX_SQ).unwrap()
}

// ---------------------------------------------------------------- schedule oracle

/// Diffusion coefficient `g²(t)`: linear from `g_min²` at the ends to `g_max²` at `t = 1/2`.
fn g_sq(t: f64) -> f64 {
    G_MIN_SQ + (G_MAX_SQ - G_MIN_SQ) * (1.0 - (2.0 * t - 1.0).abs())
}

/// Simpson's rule on pieces that do not straddle the kink at 1/2; exact for
/// piecewise-linear integrands up to rounding.
fn integrate_g_sq(a: f64, b: f64) -> f64 {
    let simpson = |a: f64, b: f64| (b - a) / 6.0 * (g_sq(a) + 4.0 * g_sq(0.5 * (a + b)) + g_sq(b));
    if a < 0.5 && b > 0.5 {
        simpson(a, 0.5) + simpson(0.5, b)
    } else {
        simpson(a, b)
    }
}

/// `(σ_t², σ̄_t², σ_1²)` by quadrature.
fn oracle_sigmas(t: f64) -> (f64, f64, f64) {
    (integrate_g_sq(0.0, t), integrate_g_sq(t, 1.0), integrate_g_sq(0.0, 1.0))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------- 1–6: bridge numerics

fn c1_boundaries() -> Verdict {
    let started = Instant::now();
    let sched = schedule();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let (rows, cols) = (1 + i % 8, 1 + (i * 7) % 64);
        let z0 = Tensor::randn(rows, cols, &mut r);
        let z1 = Tensor::randn(rows, cols, &mut r);
        let eps = Tensor::randn(rows, cols, &mut r);
        worst = worst.max(max_abs_diff(&forward_sample(&z0, &z1, 0.0, &eps, &sched).unwrap(), &z0));
        worst = worst.max(max_abs_diff(&forward_sample(&z0, &z1, 1.0, &eps, &sched).unwrap(), &z1));
    }
    let secs = started.elapsed().as_secs_f64();
    (
        worst <= 1e-12 && secs < 1.0,
        format!("max endpoint error {worst:.1e} (tol 1e-12) over 100 tensors, {secs:.3} s (limit 1 s)"),
    )
}

fn c2_schedule_identity() -> Verdict {
    let sched = schedule();
    let sigma1_err = (integrate_g_sq(0.0, 1.0) - SIGMA1_SQ).abs().max((sched.sigma1_sq() - SIGMA1_SQ).abs());
    let worst = (0..1000)
        .map(|i| {
            let t = i as f64 / 999.0;
            let (_, sigma_bar_sq, _) = oracle_sigmas(t);
            (sched.sigma_sq(t) + sigma_bar_sq - SIGMA1_SQ).abs()
        })
        .fold(0.0, f64::max);
    (
        worst <= 1e-12 && sigma1_err <= 1e-12,
        format!("max |σ_t² + σ̄_t² − σ_1²| = {worst:.1e} on 1000 points, |σ_1² − 0.5005| = {sigma1_err:.1e} (tol 1e-12)"),
    )
}

fn c3_marginal_law() -> Verdict {
    let started = Instant::now();
    let sched = schedule();
    let n = 100_000;
    let (x0, x1) = (0.7, -1.3);
    let z0 = Tensor::filled(1, n, x0);
    let z1 = Tensor::filled(1, n, x1);
    let mut r = rng(3);
    let mut ok = true;
    let mut parts = Vec::new();
    for t in [0.25, 0.5, 0.75] {
        let eps = Tensor::randn(1, n, &mut r);
        let zt = forward_sample(&z0, &z1, t, &eps, &sched).unwrap();
        let (s2, sb2, s12) = oracle_sigmas(t);
        let mean = sb2 / s12 * x0 + s2 / s12 * x1;
        let var = sb2 * s2 / s12;
        let m = zt.mean();
        let v = zt.data().iter().map(|z| (z - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let z_score = (m - mean).abs() / (var / n as f64).sqrt();
        let rel_var = (v - var).abs() / var;
        ok &= z_score <= 4.0 && rel_var <= 0.02;
        parts.push(format!("t={t}: |Δmean| {z_score:.2} SE, var err {:.2}%", 100.0 * rel_var));
    }
    let secs = started.elapsed().as_secs_f64();
    ok &= secs < 30.0;
    (ok, format!("{} (tol 4 SE / 2%), {secs:.2} s", parts.join("; ")))
}

fn c4_target_inversion() -> Verdict {
    let sched = schedule();
    let mut r = rng(4);
    let (mut inv_err, mut oracle_loss, mut batches): (f64, f64, usize) = (0.0, 0.0, 0);
    for _ in 0..50 {
        let (rows, cols) = (8, 64);
        let z0 = Tensor::randn(rows, cols, &mut r);
        let z1 = Tensor::randn(rows, cols, &mut r);
        let eps = Tensor::randn(rows, cols, &mut r);
        let t = r.gen_range(T_MIN..=1.0);
        let zt = forward_sample(&z0, &z1, t, &eps, &sched).unwrap();
        let target = loss_target(&zt, &z0, t, &sched).unwrap();
        inv_err = inv_err.max(max_abs_diff(&estimate_z0(&zt, &target, t, &sched).unwrap(), &z0));
        // a predictor that knows z0 outputs the scaled residual exactly
        let sigma = oracle_sigmas(t).0.sqrt();
        let oracle = zt.zip_map(&z0, |a, b| (a - b) / sigma);
        oracle_loss += oracle.mse(&target);
        batches += 1;
    }
    let oracle_loss = oracle_loss / batches as f64;
    (
        inv_err <= 1e-10 && oracle_loss <= 1e-20,
        format!("max |ẑ0 − z0| = {inv_err:.1e} (tol 1e-10), oracle-predictor loss {oracle_loss:.1e} over {batches} batches"),
    )
}

/// Gaussian toy: `z0 ~ N(0, v0)`, observed prior `zT = z0 + N(0, v_obs)`,
/// sampled with the exact conditional mean `E[z0 | z_t, zT]` as the estimator.
fn c5_oracle_sampler() -> Verdict {
    let started = Instant::now();
    let sched = schedule();
    let (v0, v_obs): (f64, f64) = (1.0, 0.25);
    let n = 4000;
    let mut r = rng(5);
    let z0 = Tensor::randn(1, n, &mut r);
    let noise = Tensor::randn(1, n, &mut r);
    let z_t1 = z0.zip_map(&noise, |a, e| a + v_obs.sqrt() * e);
    let post_var = v0 * v_obs / (v0 + v_obs);
    let post_mean = z_t1.map(|y| v0 / (v0 + v_obs) * y);
    let rmse = |x: &Tensor| x.mse(&post_mean).sqrt();
    let prior_rmse = rmse(&z_t1);

    let oracle = |z: &Tensor, t: f64, _: usize| -> lbm::Result<Tensor> {
        let (s2, sb2, s12) = oracle_sigmas(t);
        let (a, b, n2) = (sb2 / s12, s2 / s12, s2 * sb2 / s12);
        if n2 <= 0.0 {
            return Ok(post_mean.clone());
        }
        let precision = 1.0 / post_var + a * a / n2;
        let mut out = Tensor::zeros(1, n);
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            let (zt, y, mu) = (z.data()[i], z_t1.data()[i], post_mean.data()[i]);
            *o = (mu / post_var + a * (zt - b * y) / n2) / precision;
        }
        Ok(out)
    };
    let steps = [5, 10, 25, 50];
    let errs: Vec<f64> = steps
        .iter()
        .map(|&k| rmse(&sample_with_z0(&sched, &z_t1, k, &mut rng(50), oracle).unwrap()))
        .collect();
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    let last = *errs.last().unwrap();
    let secs = started.elapsed().as_secs_f64();
    let table: Vec<String> = steps.iter().zip(&errs).map(|(k, e)| format!("n={k}: {e:.4}")).collect();
    (
        decreasing && last <= 0.05 * prior_rmse && secs < 60.0,
        format!(
            "RMSE to posterior mean {} (strictly decreasing: {decreasing}); final/prior = {:.3} (tol 0.05); \
             prior RMSE {prior_rmse:.4}, posterior std {:.4}, {secs:.2} s",
            table.join(", "),
            last / prior_rmse,
            post_var.sqrt()
        ),
    )
}

fn c6_gradient_check() -> Verdict {
    let sched = schedule();
    let cfg = PredictorConfig::default();
    let mut model = Predictor::new(cfg, 6).unwrap();
    let mut r = rng(6);
    let batch: Vec<BridgeExample> = (0..2)
        .map(|_| {
            let len = 24;
            let z0 = Tensor::randn(cfg.channels, len, &mut r);
            let z_prior = Tensor::randn(cfg.channels, len, &mut r);
            let t = r.gen_range(0.05..0.95);
            BridgeExample {
                z_cond: z_prior.clone(),
                eps: Tensor::randn(cfg.channels, len, &mut r),
                cond: Conditioning::new(t, 2000.0, 4000.0, None).unwrap(),
                z0,
                z_prior,
                t,
            }
        })
        .collect();
    let gc = grad_check(&mut model, &batch, &sched, 1e-5, 150, &mut r).unwrap();
    (
        gc.checked >= 100 && gc.max_rel_error <= 1e-4,
        format!(
            "max relative error {:.2e} (tol 1e-4) over {} parameters of the default predictor",
            gc.max_rel_error, gc.checked
        ),
    )
}

// ---------------------------------------------------------------- 7 and 13: trained toy stage

const CODEC_STEPS: usize = 1200;
const BRIDGE_STEPS: usize = 2000;
const HELD_OUT: usize = 32;

struct ToyStage {
    stage: Stage,
    train_secs: f64,
}

/// 8 kHz toy stage taught to extend a 2 kHz band to 4 kHz, trained once and shared.
fn toy_stage() -> &'static ToyStage {
    static STAGE: OnceLock<ToyStage> = OnceLock::new();
    STAGE.get_or_init(|| {
        let started = Instant::now();
        let corpus = toy_corpus(&ToyCorpusConfig::default(), 64, &mut rng(0)).unwrap();
        let mut codec = Codec::new(CodecConfig::default(), 0).unwrap();
        let codec_cfg = CodecTrainConfig {
            steps: CODEC_STEPS,
            batch_size: 8,
            crop_len: 4096,
            lr: 1e-3,
            seed: 0,
            log_every: 0,
        };
        train_codec(&mut codec, &corpus, &codec_cfg, &mut Adam::new(codec_cfg.lr)).unwrap();
        let s = fit_latent_scale(&codec, &corpus).unwrap();
        codec.set_scale(s).unwrap();

        let stage_cfg = StageConfig::from_toml_str(&format!(
            r#"
target_sr = 8000
codec = "unused"
predictor = "unused"

[degradation]
cutoff_range_hz = [1600.0, 2400.0]

[training]
steps = {BRIDGE_STEPS}
batch_size = 8
crop_len = 4096
lr = 1e-3
log_every = 0
fixed_target_hz = 4000.0
"#
        ))
        .unwrap();
        let mut predictor = Predictor::new(stage_cfg.model, 0).unwrap();
        train_stage(&codec, &mut predictor, &stage_cfg, &corpus, &mut Adam::new(stage_cfg.training.lr)).unwrap();
        ToyStage {
            stage: Stage::new("toy", 8000, codec, predictor, false).unwrap(),
            train_secs: started.elapsed().as_secs_f64(),
        }
    })
}

fn c7_toy_super_resolution() -> Verdict {
    let toy = toy_stage();
    let started = Instant::now();
    let held = toy_corpus(&ToyCorpusConfig::default(), HELD_OUT, &mut rng(999)).unwrap();
    let params = eval_stft_params(8000);
    let split = 2000.0;
    let (mut base, mut out, mut base_hf, mut out_hf) = (0.0, 0.0, 0.0, 0.0);
    for (i, x) in held.iter().enumerate() {
        let input = resample(x, 4000).unwrap();
        let sinc = resample(&input, 8000).unwrap();
        let y = upsample(&input, std::slice::from_ref(&toy.stage), &UpsampleOptions::default(), &mut rng(i as u64))
            .unwrap();
        let mb = evaluate_pair(x, &sinc, split, &params).unwrap();
        let mo = evaluate_pair(x, &y, split, &params).unwrap();
        base += mb.lsd;
        out += mo.lsd;
        base_hf += mb.lsd_hf;
        out_hf += mo.lsd_hf;
    }
    let k = held.len() as f64;
    let (base, out, base_hf, out_hf) = (base / k, out / k, base_hf / k, out_hf / k);
    let hf_gain = (base_hf - out_hf) / base_hf;
    let secs = toy.train_secs + started.elapsed().as_secs_f64();
    (
        out <= 0.7 * base && hf_gain >= 0.4 && secs <= 7200.0,
        format!(
            "mean LSD {out:.3} vs sinc {base:.3} (ratio {:.3}, tol 0.7); lsd_hf {out_hf:.3} vs {base_hf:.3} \
             ({:.1}% better, tol 40%); {CODEC_STEPS}+{BRIDGE_STEPS} steps, {secs:.0} s (limit 7200 s)",
            out / base,
            100.0 * hf_gain
        ),
    )
}

fn c13_stitching() -> Verdict {
    // constant fields pass through blending bit-exactly
    let mut r = rng(13);
    let mut exact = true;
    for _ in 0..200 {
        let len = r.gen_range(2..400);
        let window = r.gen_range(1..=len);
        let hop = r.gen_range(1..=window);
        let offset = r.gen_range(0..window);
        let starts = window_starts(len, window, hop, offset);
        let c = r.gen_range(-5.0..5.0);
        let w = window.min(len);
        let parts = vec![Tensor::filled(3, w, c); starts.len()];
        exact &= blend_windows(3, len, w, &starts, &parts).data().iter().all(|&v| v == c);
    }

    // seam statistic on a 20 s input with 5.12 s windows
    let toy = toy_stage();
    let cfg = ToyCorpusConfig {
        duration_s: 20.0,
        ..ToyCorpusConfig::default()
    };
    let x = toy_clip(&cfg, &mut rng(2020)).unwrap();
    let input = resample(&x, 4000).unwrap();
    let stitch = StitchConfig::default();
    let opts = UpsampleOptions {
        stitch: Some(stitch),
        ..UpsampleOptions::default()
    };
    let y = upsample(&input, std::slice::from_ref(&toy.stage), &opts, &mut rng(7)).unwrap();
    let codec = &toy.stage.codec;
    let ratio = codec.ratio();
    let frames = codec.latent_len(y.len());
    let window = (stitch.window_s * codec.config().frame_rate()).round() as usize;
    let n_steps = opts.n_steps;
    let last = n_steps - 1;
    let hop = stitch.hop(window, last, n_steps);
    let starts = window_starts(frames, window, hop, last * hop / 4);
    let mut seams: Vec<usize> = starts
        .iter()
        .flat_map(|&s| [s, s + window])
        .filter(|&f| f > 0 && f < frames)
        .map(|f| f * ratio)
        .filter(|&i| i < y.len())
        .collect();
    seams.sort_unstable();
    seams.dedup();
    let s = y.samples();
    let jump = |i: usize| (s[i] - s[i - 1]).abs();
    let seam_max = seams.iter().map(|&i| jump(i)).fold(0.0, f64::max);
    let near_seam = |i: usize| seams.iter().any(|&p| i + ratio > p && i < p + ratio);
    let mut intra: Vec<f64> = (1..s.len()).filter(|&i| !near_seam(i)).map(jump).collect();
    intra.sort_by(f64::total_cmp);
    let p999 = intra[((intra.len() - 1) as f64 * 0.999).round() as usize];
    (
        exact && !seams.is_empty() && seam_max <= p999,
        format!(
            "constant fields exact: {exact} (200 layouts); max seam jump {seam_max:.4} vs intra-window 99.9th pct \
             {p999:.4} over {} seams of a {:.0} s signal",
            seams.len(),
            y.duration_secs()
        ),
    )
}

// ---------------------------------------------------------------- 8–12: DSP and metrics

fn c8_bandwidth() -> Verdict {
    let sr = 48_000;
    // At 48 kHz the lines of a 1 s harmonic tone stand far above a floor at the
    // tonal level, so the floor is raised to keep every source clip full-band.
    let cfg = ToyCorpusConfig {
        sample_rate: sr,
        noise_db: 10.0,
        ..ToyCorpusConfig::default()
    };
    let est_cfg = EstimatorConfig::default();
    let mut r = rng(8);
    let (mut hits, mut full_band) = (0, 0);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let cutoff = r.gen_range(2000.0..=20000.0);
        let clip = toy_clip(&cfg, &mut r).unwrap();
        full_band += usize::from(estimate_f_eff(&clip, &est_cfg).unwrap().f_eff >= 0.9 * clip.nyquist());
        let x = lowpass(&clip, &FilterSpec::chebyshev_default(cutoff), FilterMode::ZeroPhase).unwrap();
        let f = estimate_f_eff(&x, &est_cfg).unwrap().f_eff;
        let rel = (f - cutoff).abs() / cutoff;
        worst = worst.max(rel);
        hits += usize::from(rel <= 0.1);
    }
    (
        hits >= 95,
        format!(
            "{hits}/100 clips within 10% of the cutoff (need 95); worst relative error {worst:.3}; \
             {full_band}/100 source clips read full-band before filtering"
        ),
    )
}

/// `|H(e^{jω})|` evaluated directly from the section polynomials.
fn sos_gain(sos: &lbm::dsp::Sos, f: f64, sr: u32) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f / sr as f64;
    sos.sections
        .iter()
        .map(|s| {
            let (c1, s1, c2, s2) = (w.cos(), w.sin(), (2.0 * w).cos(), (2.0 * w).sin());
            let num = ((s.b0 + s.b1 * c1 + s.b2 * c2).powi(2) + (s.b1 * s1 + s.b2 * s2).powi(2)).sqrt();
            let den = ((1.0 + s.a1 * c1 + s.a2 * c2).powi(2) + (s.a1 * s1 + s.a2 * s2).powi(2)).sqrt();
            num / den
        })
        .product()
}

/// Largest pole radius from the quadratic formula on each denominator.
fn max_pole_radius(sos: &lbm::dsp::Sos) -> f64 {
    sos.sections
        .iter()
        .map(|s| {
            let disc = s.a1 * s.a1 - 4.0 * s.a2;
            if disc >= 0.0 {
                let r = disc.sqrt();
                ((-s.a1 + r) / 2.0).abs().max(((-s.a1 - r) / 2.0).abs())
            } else {
                s.a2.sqrt()
            }
        })
        .fold(0.0, f64::max)
}

/// Steady-state amplitude of a unit sine after causal filtering.
fn measured_gain(sos: &lbm::dsp::Sos, f: f64, sr: u32) -> f64 {
    let n = sr as usize;
    let x: Vec<f64> = (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / sr as f64).sin())
        .collect();
    let y = apply_filter(&Waveform::new(x, sr).unwrap(), sos, FilterMode::Causal);
    let tail = &y.samples()[n / 2..];
    (2.0 * tail.iter().map(|v| v * v).sum::<f64>() / tail.len() as f64).sqrt()
}

fn c9_filters() -> Verdict {
    let sr = 48_000;
    let db = |g: f64| 20.0 * g.log10();
    let mut worst_bw: f64 = 0.0;
    let mut worst_measured: f64 = 0.0;
    for order in 2..=10 {
        for fc in [1000.0, 4000.0, 12000.0] {
            let sos = design_lowpass(&FilterSpec::new(FilterFamily::Butterworth, order, fc), sr).unwrap();
            worst_bw = worst_bw.max((db(sos_gain(&sos, fc, sr)) + 3.0103).abs());
            worst_measured = worst_measured.max((db(measured_gain(&sos, fc, sr)) + 3.0103).abs());
        }
    }
    let mut ripple_ok = true;
    let mut ripple_seen: f64 = 0.0;
    for order in 2..=10 {
        for fc in [2000.0, 16000.0] {
            let spec = FilterSpec::new(FilterFamily::Chebyshev1, order, fc);
            let sos = design_lowpass(&spec, sr).unwrap();
            let gains: Vec<f64> = (0..=2000).map(|i| db(sos_gain(&sos, fc * i as f64 / 2000.0, sr))).collect();
            let ripple = gains.iter().cloned().fold(f64::MIN, f64::max) - gains.iter().cloned().fold(f64::MAX, f64::min);
            ripple_seen = ripple_seen.max(ripple);
            ripple_ok &= ripple <= spec.ripple_db + 1e-6;
        }
    }
    // the paper's degradation filter: Chebyshev Type-I, order 8, 16 kHz at 96 kHz
    let spec96 = FilterSpec::chebyshev_default(16000.0);
    let sos96 = design_lowpass(&spec96, 96_000).unwrap();
    let g96: Vec<f64> = (0..=2000).map(|i| db(sos_gain(&sos96, 16000.0 * i as f64 / 2000.0, 96_000))).collect();
    let ripple96 = g96.iter().cloned().fold(f64::MIN, f64::max) - g96.iter().cloned().fold(f64::MAX, f64::min);
    ripple_ok &= ripple96 <= spec96.ripple_db + 1e-6;

    let mut worst_radius: f64 = 0.0;
    for family in FilterFamily::ALL {
        for order in 1..=10 {
            for fc in [100.0, 1000.0, 8000.0, 20000.0, 23000.0] {
                let sos = design_lowpass(&FilterSpec::new(family, order, fc), sr).unwrap();
                worst_radius = worst_radius.max(max_pole_radius(&sos));
            }
        }
    }
    (
        worst_bw <= 0.1 && worst_measured <= 0.1 && ripple_ok && worst_radius < 1.0,
        format!(
            "Butterworth orders 2–10 at cutoff: max |gain + 3.01 dB| {worst_bw:.2e} (response), {worst_measured:.2e} \
             (filtered sine) (tol 0.1 dB); Chebyshev1 max ripple {ripple_seen:.4} dB, 96 kHz order 8 {ripple96:.4} dB \
             (spec 1 dB); max pole radius {worst_radius:.6} over 200 designs"
        ),
    )
}

fn c10_blur() -> Verdict {
    let mut sum_err: f64 = 0.0;
    for i in 1..=200 {
        let k = BlurKernel::new(i as f64 * 0.025).unwrap();
        sum_err = sum_err.max((k.weights.iter().sum::<f64>() - 1.0).abs());
    }
    let mut r = rng(10);
    let z = Tensor::randn(8, 257, &mut r);
    let identity_err = [0.1, 0.05, 0.01, 1e-6, 0.0]
        .iter()
        .map(|&b| max_abs_diff(&blur_latent(&z, b).unwrap(), &z))
        .fold(0.0, f64::max);

    let mut conv_err: f64 = 0.0;
    for (b_r, n) in [(0.3, 1), (0.5, 2), (0.8, 3), (1.0, 17), (2.5, 64)] {
        let z = Tensor::randn(4, n, &mut r);
        let got = blur_latent(&z, b_r).unwrap();
        let w: Vec<f64> = (-2..=2).map(|t: i32| (-(t * t) as f64 / (2.0 * b_r * b_r)).exp()).collect();
        let norm: f64 = w.iter().sum();
        for row in 0..4 {
            let x = z.row(row);
            // explicit whole-sample reflection, repeated until the index lands inside
            let at = |mut i: isize| -> f64 {
                let m = n as isize;
                if m == 1 {
                    return x[0];
                }
                loop {
                    if i < 0 {
                        i = -i;
                    } else if i >= m {
                        i = 2 * (m - 1) - i;
                    } else {
                        return x[i as usize];
                    }
                }
            };
            for j in 0..n {
                let want: f64 = (0..5).map(|k| w[k] / norm * at(j as isize + k as isize - 2)).sum();
                conv_err = conv_err.max((got.get(row, j) - want).abs());
            }
        }
    }
    (
        sum_err <= 1e-12 && identity_err <= 1e-9 && conv_err <= 1e-12,
        format!(
            "|Σw − 1| {sum_err:.1e} (tol 1e-12); b_r → 0 max deviation {identity_err:.1e} (tol 1e-9); \
             brute-force convolution max error {conv_err:.1e} (tol 1e-12)"
        ),
    )
}

fn brute_lsd(a: &[Vec<f64>], b: &[Vec<f64>], lo: usize, hi: usize) -> f64 {
    let per_frame: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let terms: Vec<f64> = (lo..=hi).map(|f| (x[f].powi(2) / y[f].powi(2)).log10().powi(2)).collect();
            (terms.iter().sum::<f64>() / terms.len() as f64).sqrt()
        })
        .collect();
    per_frame.iter().sum::<f64>() / per_frame.len() as f64
}

fn brute_ssim(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (e1, e2) = (0.01, 0.02);
    let la: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|v| v.log10()).collect()).collect();
    let lb: Vec<Vec<f64>> = b.iter().map(|r| r.iter().map(|v| v.log10()).collect()).collect();
    let (frames, bins) = (a.len(), a[0].len());
    let mut scores = Vec::new();
    for t0 in (0..frames / 7).map(|i| i * 7) {
        for f0 in (0..bins / 7).map(|i| i * 7) {
            let xs: Vec<f64> = (t0..t0 + 7).flat_map(|t| (f0..f0 + 7).map(move |f| (t, f))).map(|(t, f)| la[t][f]).collect();
            let ys: Vec<f64> = (t0..t0 + 7).flat_map(|t| (f0..f0 + 7).map(move |f| (t, f))).map(|(t, f)| lb[t][f]).collect();
            let n = xs.len() as f64;
            let mx = xs.iter().sum::<f64>() / n;
            let my = ys.iter().sum::<f64>() / n;
            let vx = xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>() / n;
            let vy = ys.iter().map(|y| (y - my).powi(2)).sum::<f64>() / n;
            let cov = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / n;
            scores.push((2.0 * mx * my + e1) * (2.0 * cov + e2) / ((mx * mx + my * my + e1) * (vx + vy + e2)));
        }
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn c11_metrics() -> Verdict {
    let mut r = rng(11);
    let mut worst: f64 = 0.0;
    let mut self_lsd: f64 = 0.0;
    let mut self_ssim_err: f64 = 0.0;
    for trial in 0..20 {
        let fft = [64, 128, 256][trial % 3];
        let params = StftParams::new(fft, fft / 4).unwrap();
        let bins = params.num_bins();
        let frames = 7 + r.gen_range(0..30);
        let mut mags = || -> Vec<Vec<f64>> {
            (0..frames)
                .map(|_| (0..bins).map(|_| 10f64.powf(r.gen_range(-3.0..1.0))).collect())
                .collect()
        };
        let (a, b) = (mags(), mags());
        let sa = Spectrogram::from_magnitudes(a.clone(), params, 16000).unwrap();
        let sb = Spectrogram::from_magnitudes(b.clone(), params, 16000).unwrap();
        let bin_hz = 16000.0 / fft as f64;
        let (f1, f2) = (1000.0, 5000.0);
        let (lo, hi) = ((f1 / bin_hz).ceil() as usize, (f2 / bin_hz).floor() as usize);
        worst = worst
            .max((lsd(&sa, &sb).unwrap() - brute_lsd(&a, &b, 0, bins - 1)).abs())
            .max((lsd_band(&sa, &sb, f1, f2).unwrap() - brute_lsd(&a, &b, lo, hi)).abs())
            .max((spectral_ssim(&sa, &sb, &SsimConfig::default()).unwrap() - brute_ssim(&a, &b)).abs());
        self_lsd = self_lsd.max(lsd(&sa, &sa).unwrap().abs());
        self_ssim_err = self_ssim_err.max((spectral_ssim(&sa, &sa, &SsimConfig::default()).unwrap() - 1.0).abs());
    }
    (
        worst <= 1e-9 && self_lsd == 0.0 && self_ssim_err <= 1e-12,
        format!(
            "max deviation from brute force {worst:.1e} (tol 1e-9) over 20 random pairs; lsd(S,S) = {self_lsd}, \
             |ssim(S,S) − 1| = {self_ssim_err:.1e}"
        ),
    )
}

fn c12_low_band_replacement() -> Verdict {
    let mut r = rng(12);
    let cfg = ToyCorpusConfig::default();
    let params = eval_stft_params(8000);
    let (mut reduced, mut idem): (usize, f64) = (0, 0.0);
    let mut mean_gain = 0.0;
    for _ in 0..50 {
        let reference = toy_clip(&cfg, &mut r).unwrap();
        // a plausible generated signal: the reference with a distorted, noisier spectrum
        let other = toy_clip(&cfg, &mut r).unwrap();
        let mix: Vec<f64> = reference
            .samples()
            .iter()
            .zip(other.samples())
            .map(|(a, b)| 0.6 * a + 0.4 * b)
            .collect();
        let generated = Waveform::new(mix, 8000).unwrap();
        let cutoff = r.gen_range(1000.0..3000.0);
        let once = replace_low_band(&generated, &reference, cutoff).unwrap();
        let twice = replace_low_band(&once, &reference, cutoff).unwrap();
        idem = idem.max(
            once.samples()
                .iter()
                .zip(twice.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
        let sr = stft(&reference, &params).unwrap();
        let before = lsd_band(&sr, &stft(&generated, &params).unwrap(), 0.0, cutoff).unwrap();
        let after = lsd_band(&sr, &stft(&once, &params).unwrap(), 0.0, cutoff).unwrap();
        reduced += usize::from(after < before);
        mean_gain += (before - after) / 50.0;
    }
    (
        reduced == 50 && idem <= 1e-9,
        format!(
            "LSD-LF reduced on {reduced}/50 pairs (mean reduction {mean_gain:.3}); idempotence max deviation \
             {idem:.1e} (tol 1e-9)"
        ),
    )
}

// ---------------------------------------------------------------- 14: CLI reproducibility

const CODEC8: &str = r#"
[model]
sample_rate = 8000
channels = 4
hidden = [8, 16]
strides = [4, 4]

[training]
steps = 6
batch_size = 2
crop_len = 2048
lr = 1e-3
log_every = 2
"#;

const STAGE8: &str = r#"
target_sr = 8000
codec = "codec8.ckpt"
predictor = "bridge8.ckpt"

[degradation]
cutoff_range_hz = [1000.0, 3500.0]

[model]
channels = 4
width = 8
blocks = 1
embed_dim = 8

[training]
steps = 4
batch_size = 2
crop_len = 2048
lr = 1e-3
log_every = 2
"#;

const STAGE16: &str = r#"
target_sr = 16000
codec = "codec16.ckpt"
predictor = "bridge16.ckpt"
cascaded = true

[degradation]
cutoff_range_hz = [3000.0, 7000.0]
families = ["Chebyshev1"]
order_range = [8, 8]

[augmentation]
lpf_margin_hz = 500.0
b_r_max = 0.5
b_r_star = 0.3
train_margin_max_hz = 1000.0

[model]
channels = 4
width = 8
blocks = 1
embed_dim = 8
blur_token = true

[training]
steps = 4
batch_size = 2
crop_len = 2048
lr = 1e-3
log_every = 2
"#;

fn cli(args: &[&str]) {
    let mut argv = vec!["lbm"];
    argv.extend_from_slice(args);
    if let Err(e) = lbm_cli::run(&argv) {
        panic!("lbm {args:?}: {e:#}");
    }
}

/// Runs every seeded command once inside `dir`.
fn cli_session(dir: &Path, seed: &str) {
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    std::fs::write(dir.join("codec8.toml"), CODEC8).unwrap();
    std::fs::write(dir.join("codec16.toml"), CODEC8.replace("8000", "16000")).unwrap();
    std::fs::write(dir.join("stage8.toml"), STAGE8).unwrap();
    std::fs::write(dir.join("stage16.toml"), STAGE16).unwrap();
    std::fs::write(dir.join("policy.toml"), "cutoff_range_hz = [1000.0, 3500.0]\n").unwrap();
    for (out, rate) in [("c8", "8000"), ("c16", "16000")] {
        cli(&["toy-corpus", "--out", &p(out), "--count", "4", "--seconds", "0.5", "--sample-rate", rate, "--seed", seed]);
    }
    cli(&["degrade", "--corpus", &p("c8"), "--policy", &p("policy.toml"), "--out", &p("lr8"), "--seed", seed]);
    for (cfg, corpus, out) in [("codec8.toml", "c8", "codec8.ckpt"), ("codec16.toml", "c16", "codec16.ckpt")] {
        cli(&["train-codec", "--config", &p(cfg), "--corpus", &p(corpus), "--out", &p(out), "--seed", seed]);
    }
    for (cfg, corpus) in [("stage8.toml", "c8"), ("stage16.toml", "c16")] {
        cli(&["train-bridge", "--config", &p(cfg), "--corpus", &p(corpus), "--seed", seed]);
    }
    let (lr8, stage8, stage16) = (p("lr8"), p("stage8.toml"), p("stage16.toml"));
    let (up, stitched) = (p("up"), p("stitched"));
    cli(&[
        "upsample", "--input", &lr8, "--output", &up, "--steps", "3", "--seed", seed, "--stage", &stage8, "--stage",
        &stage16,
    ]);
    cli(&[
        "upsample", "--input", &lr8, "--output", &stitched, "--steps", "3", "--seed", seed, "--stitch", "0.128",
        "--stage", &stage8,
    ]);
    let lr16 = p("lr16");
    cli(&["degrade", "--corpus", &p("c16"), "--policy", &p("policy.toml"), "--out", &lr16, "--seed", seed]);
    cli(&[
        "tune-aug", "--stage", &p("stage16.toml"), "--inputs", &lr16, "--references", &p("c16"), "--b-r", "0,0.3",
        "--margins", "0,500", "--steps", "2", "--seed", seed, "--out", &p("tune.csv"),
    ]);
}

/// Every output file except run manifests (which carry wall-clock times), keyed by relative path.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else if !path.to_string_lossy().ends_with(".manifest.json") {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&path).unwrap()));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn c14_cli_reproducibility() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<Vec<(PathBuf, Vec<u8>)>> = ["a", "b", "c"]
        .iter()
        .zip(["17", "17", "18"])
        .map(|(name, seed)| {
            let dir = tmp.path().join(name);
            std::fs::create_dir(&dir).unwrap();
            cli_session(&dir, seed);
            snapshot(&dir)
        })
        .collect();
    let files = runs[0].len();
    let differing: Vec<String> = runs[0]
        .iter()
        .zip(&runs[1])
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let same_layout = runs[0].iter().map(|f| &f.0).eq(runs[1].iter().map(|f| &f.0));
    let seed_matters = runs[0] != runs[2];
    (
        same_layout && differing.is_empty() && seed_matters,
        format!(
            "toy-corpus, degrade, train-codec, train-bridge, upsample (plain and stitched), tune-aug: {files} files, \
             {} differ under the same seed{}; another seed changes outputs: {seed_matters}",
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(" ({})", differing.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let criteria: [(&str, fn() -> Verdict); 14] = [
        ("bridge boundary exactness", c1_boundaries),
        ("schedule identity", c2_schedule_identity),
        ("marginal law Monte Carlo", c3_marginal_law),
        ("loss target / ẑ0 inversion", c4_target_inversion),
        ("oracle sampler convergence", c5_oracle_sampler),
        ("predictor gradient check", c6_gradient_check),
        ("toy end-to-end super-resolution", c7_toy_super_resolution),
        ("bandwidth estimator", c8_bandwidth),
        ("filter correctness", c9_filters),
        ("blur kernel", c10_blur),
        ("metrics oracle equivalence", c11_metrics),
        ("low-frequency replacement", c12_low_band_replacement),
        ("stitching", c13_stitching),
        ("CLI reproducibility", c14_cli_reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f.parse() == Ok(id) || name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(v) => v,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += usize::from(!pass);
        println!(
            "criterion {id:>2} {} {name}: {detail} [{:.1} s]",
            if pass { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
