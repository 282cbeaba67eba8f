//! Noise predictor `ε_θ(z_t, t, z_cond, f_prior, f_target[, b_r])`.
//!
//! A 1-D convolutional residual stack over the channel concatenation
//! `[z_t; z_cond]`. Scalar conditions are turned into sinusoidal embeddings,
//! projected to the model width and prepended as extra positions on the time
//! axis; every residual block also receives the mean of the token positions
//! through a linear layer, broadcast over time, so the conditions reach all
//! frames. Token positions are trimmed from the output.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{loss_target, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{silu, silu_backward, Adam, Conv1d, Linear, Module, Param, Tensor};

/// Grid for the commanded output bandwidth.
pub const F_TARGET_GRID_HZ: f64 = 100.0;
/// Diffusion time is scaled before embedding so that it spans a range comparable to frequencies.
pub const TIME_EMBED_SCALE: f64 = 1000.0;
/// Blur ratios are scaled into the frequency range before embedding.
pub const BLUR_EMBED_SCALE: f64 = 1e4;

pub fn quantize_f_target(f_hz: f64) -> f64 {
    (f_hz / F_TARGET_GRID_HZ).round() * F_TARGET_GRID_HZ
}

/// Interleaved `[sin(v ω_0), cos(v ω_0), sin(v ω_1), …]` with geometric
/// frequencies `ω_k = 10000^(−k / (dim/2))`.
pub fn sinusoidal_embed(value: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("embedding dim {dim} must be even and positive")));
    }
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for k in 0..half {
        let w = 10000f64.powf(-(k as f64) / half as f64);
        let (s, c) = (value * w).sin_cos();
        out.push(s);
        out.push(c);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conditioning {
    pub t: f64,
    pub f_prior: f64,
    /// Already quantized to [`F_TARGET_GRID_HZ`].
    pub f_target: f64,
    /// Blur ratio of the prior latent; present only for cascaded stages.
    pub b_r: Option<f64>,
}

impl Conditioning {
    pub fn new(t: f64, f_prior: f64, f_target: f64, b_r: Option<f64>) -> Result<Self> {
        let c = Self {
            t,
            f_prior,
            f_target,
            b_r,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.t) {
            return Err(Error::InvalidTime(self.t));
        }
        if !(self.f_prior > 0.0 && self.f_prior <= self.f_target) {
            return Err(Error::InvalidArgument(format!(
                "conditioning needs 0 < f_prior <= f_target, got {} and {}",
                self.f_prior, self.f_target
            )));
        }
        if matches!(self.b_r, Some(b) if !(b >= 0.0)) {
            return Err(Error::InvalidArgument(format!("blur ratio {:?}", self.b_r)));
        }
        Ok(())
    }

    fn token_values(&self) -> Vec<f64> {
        let mut v = vec![self.t * TIME_EMBED_SCALE, self.f_prior, self.f_target];
        if let Some(b) = self.b_r {
            v.push(b * BLUR_EMBED_SCALE);
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    /// Latent channels `c`.
    pub channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub embed_dim: usize,
    /// Whether the blur-ratio token is part of the conditioning (cascaded stages).
    pub blur_token: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            width: 48,
            blocks: 4,
            kernel: 3,
            embed_dim: 32,
            blur_token: false,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.width == 0 || self.kernel == 0 {
            return Err(Error::Config("predictor dimensions must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("predictor kernel {} must be odd", self.kernel)));
        }
        if self.embed_dim == 0 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!("embed_dim {} must be even", self.embed_dim)));
        }
        Ok(())
    }

    fn num_tokens(&self) -> usize {
        if self.blur_token {
            4
        } else {
            3
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv1d,
    cond: Linear,
    conv2: Conv1d,
}

#[derive(Debug, Clone)]
pub struct Predictor {
    cfg: PredictorConfig,
    conv_in: Conv1d,
    tokens: Vec<Linear>,
    blocks: Vec<ResBlock>,
    conv_out: Conv1d,
}

/// Intermediates of one forward pass, consumed by the backward pass.
struct Trace {
    x: Tensor,
    embeds: Vec<Vec<f64>>,
    /// Input of each block, then the final hidden state.
    hidden: Vec<Tensor>,
    token_means: Vec<Vec<f64>>,
    pre_act: Vec<Tensor>,
    out_in: Tensor,
}

/// One regression example for the bridge objective.
#[derive(Debug, Clone)]
pub struct BridgeExample {
    /// Data endpoint (t = 0).
    pub z0: Tensor,
    /// Prior endpoint (t = 1).
    pub z_prior: Tensor,
    /// Latent fed to the network alongside `z_t`.
    pub z_cond: Tensor,
    pub t: f64,
    pub eps: Tensor,
    pub cond: Conditioning,
}

impl Predictor {
    pub fn new(cfg: PredictorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, w, k) = (cfg.channels, cfg.width, cfg.kernel);
        let conv_in = Conv1d::new("in", 2 * c, w, k, 1, 1.0, &mut rng);
        let tokens = (0..cfg.num_tokens())
            .map(|i| Linear::new(&format!("token{i}"), cfg.embed_dim, w, 1.0, &mut rng))
            .collect();
        let blocks = (0..cfg.blocks)
            .map(|b| ResBlock {
                conv1: Conv1d::new(&format!("block{b}.conv1"), w, w, k, 1, 1.0, &mut rng),
                cond: Linear::new(&format!("block{b}.cond"), w, w, 1.0, &mut rng),
                // residual branches start small so the stack is near-identity
                conv2: Conv1d::new(&format!("block{b}.conv2"), w, w, k, 1, 0.3, &mut rng),
            })
            .collect();
        let conv_out = Conv1d::new("out", w, c, k, 1, 0.3, &mut rng);
        Ok(Self {
            cfg,
            conv_in,
            tokens,
            blocks,
            conv_out,
        })
    }

    pub fn config(&self) -> &PredictorConfig {
        &self.cfg
    }

    fn check_inputs(&self, z_t: &Tensor, z_cond: &Tensor, cond: &Conditioning) -> Result<()> {
        z_t.check_same_shape(z_cond)?;
        if z_t.rows() != self.cfg.channels {
            return Err(Error::ShapeMismatch {
                expected: (self.cfg.channels, z_t.cols()),
                got: z_t.shape(),
            });
        }
        if z_t.cols() == 0 {
            return Err(Error::TooShort { needed: 1, got: 0 });
        }
        cond.validate()?;
        if cond.b_r.is_some() != self.cfg.blur_token {
            return Err(Error::InvalidArgument(format!(
                "blur token {} by the model but {} in the conditioning",
                if self.cfg.blur_token { "expected" } else { "not expected" },
                if cond.b_r.is_some() { "present" } else { "absent" }
            )));
        }
        Ok(())
    }

    fn forward_trace(&self, z_t: &Tensor, z_cond: &Tensor, cond: &Conditioning) -> Result<(Tensor, Trace)> {
        self.check_inputs(z_t, z_cond, cond)?;
        let m = self.tokens.len();
        let x = z_t.concat_rows(z_cond)?;
        let body = self.conv_in.forward(&x);
        let embeds = cond
            .token_values()
            .iter()
            .map(|&v| sinusoidal_embed(v, self.cfg.embed_dim))
            .collect::<Result<Vec<_>>>()?;
        let mut tok = Tensor::zeros(self.cfg.width, m);
        for (j, (lin, e)) in self.tokens.iter().zip(&embeds).enumerate() {
            for (r, v) in lin.forward(e).into_iter().enumerate() {
                tok.set(r, j, v);
            }
        }
        let mut h = tok.concat_cols(&body)?;
        let mut hidden = Vec::with_capacity(self.blocks.len() + 1);
        let mut token_means = Vec::with_capacity(self.blocks.len());
        let mut pre_act = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let mean: Vec<f64> = (0..h.rows())
                .map(|r| h.row(r)[..m].iter().sum::<f64>() / m as f64)
                .collect();
            let bias = blk.cond.forward(&mean);
            let mut a = blk.conv1.forward(&h);
            for (r, b) in bias.iter().enumerate() {
                a.row_mut(r).iter_mut().for_each(|v| *v += b);
            }
            let delta = blk.conv2.forward(&silu(&a));
            let mut next = h.clone();
            next.axpy(1.0, &delta);
            hidden.push(h);
            token_means.push(mean);
            pre_act.push(a);
            h = next;
        }
        let out_in = silu(&h);
        hidden.push(h);
        let y = self.conv_out.forward(&out_in);
        let y = y.slice_cols(m, y.cols());
        Ok((
            y,
            Trace {
                x,
                embeds,
                hidden,
                token_means,
                pre_act,
                out_in,
            },
        ))
    }

    /// `ε̂` with the same shape as `z_t`.
    pub fn forward(&self, z_t: &Tensor, z_cond: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        Ok(self.forward_trace(z_t, z_cond, cond)?.0)
    }

    /// Accumulates parameter gradients for an output gradient `gy` (shape of `ε̂`).
    fn backward(&mut self, trace: &Trace, gy: &Tensor) {
        let m = self.tokens.len();
        let zeros = Tensor::zeros(gy.rows(), m);
        let g_out = zeros.concat_cols(gy).expect("matching rows");
        let g = self.conv_out.backward(&trace.out_in, &g_out);
        let mut gh = silu_backward(trace.hidden.last().expect("final state"), &g);
        for (i, blk) in self.blocks.iter_mut().enumerate().rev() {
            let h_in = &trace.hidden[i];
            let a = &trace.pre_act[i];
            let gs = blk.conv2.backward(&silu(a), &gh);
            let ga = silu_backward(a, &gs);
            let mut g_in = blk.conv1.backward(h_in, &ga);
            let g_bias: Vec<f64> = (0..ga.rows()).map(|r| ga.row(r).iter().sum()).collect();
            let g_mean = blk.cond.backward(&trace.token_means[i], &g_bias);
            for (r, gm) in g_mean.iter().enumerate() {
                for v in g_in.row_mut(r)[..m].iter_mut() {
                    *v += gm / m as f64;
                }
            }
            gh.axpy(1.0, &g_in);
        }
        for (j, (lin, e)) in self.tokens.iter_mut().zip(&trace.embeds).enumerate() {
            let col: Vec<f64> = (0..gh.rows()).map(|r| gh.get(r, j)).collect();
            lin.backward(e, &col);
        }
        let g_body = gh.slice_cols(m, gh.cols());
        self.conv_in.backward(&trace.x, &g_body);
    }

    /// Mean squared error of the noise prediction against the bridge target,
    /// averaged over elements and examples; gradients are accumulated (not zeroed).
    pub fn accumulate_loss<S: NoiseSchedule + ?Sized>(&mut self, batch: &[BridgeExample], sched: &S) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut total = 0.0;
        for ex in batch {
            let (pred, trace, target) = self.example_forward(ex, sched)?;
            let n = pred.data().len() as f64;
            total += pred.mse(&target);
            let scale = 2.0 / (n * batch.len() as f64);
            let gy = pred.zip_map(&target, |p, t| scale * (p - t));
            self.backward(&trace, &gy);
        }
        Ok(total / batch.len() as f64)
    }

    fn example_forward<S: NoiseSchedule + ?Sized>(
        &self,
        ex: &BridgeExample,
        sched: &S,
    ) -> Result<(Tensor, Trace, Tensor)> {
        let z_t = crate::bridge::forward_sample(&ex.z0, &ex.z_prior, ex.t, &ex.eps, sched)?;
        let target = loss_target(&z_t, &ex.z0, ex.t, sched)?;
        let (pred, trace) = self.forward_trace(&z_t, &ex.z_cond, &ex.cond)?;
        Ok((pred, trace, target))
    }

    /// Batch loss without touching gradients.
    pub fn loss<S: NoiseSchedule + ?Sized>(&self, batch: &[BridgeExample], sched: &S) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut total = 0.0;
        for ex in batch {
            let (pred, _, target) = self.example_forward(ex, sched)?;
            total += pred.mse(&target);
        }
        Ok(total / batch.len() as f64)
    }

    /// One optimizer step on a batch; returns the pre-update loss.
    pub fn train_step<S: NoiseSchedule + ?Sized>(
        &mut self,
        batch: &[BridgeExample],
        sched: &S,
        opt: &mut Adam,
    ) -> Result<f64> {
        self.zero_grad();
        let loss = self.accumulate_loss(batch, sched)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "bridge loss at optimizer step {}",
                opt.steps_taken()
            )));
        }
        opt.step(self.params_mut())?;
        Ok(loss)
    }

    /// Restores parameter values by name, e.g. from a checkpoint.
    pub fn load_params(&mut self, stored: &[Param]) -> Result<()> {
        load_named(self.params_mut(), stored)
    }
}

pub(crate) fn load_named(params: Vec<&mut Param>, stored: &[Param]) -> Result<()> {
    for p in params {
        let src = stored
            .iter()
            .find(|s| s.name == p.name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {}", p.name)))?;
        if src.shape != p.shape || src.value.len() != p.value.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} has shape {:?}, expected {:?}",
                p.name, src.shape, p.shape
            )));
        }
        p.value.copy_from_slice(&src.value);
    }
    Ok(())
}

impl Module for Predictor {
    fn params(&self) -> Vec<&Param> {
        let mut out = self.conv_in.params();
        for t in &self.tokens {
            out.extend(t.params());
        }
        for b in &self.blocks {
            out.extend(b.conv1.params());
            out.extend(b.cond.params());
            out.extend(b.conv2.params());
        }
        out.extend(self.conv_out.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.conv_in.params_mut();
        for t in &mut self.tokens {
            out.extend(t.params_mut());
        }
        for b in &mut self.blocks {
            out.extend(b.conv1.params_mut());
            out.extend(b.cond.params_mut());
            out.extend(b.conv2.params_mut());
        }
        out.extend(self.conv_out.params_mut());
        out
    }
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Denominator floor of the relative error, below which both gradients count as zero.
pub const GRAD_CHECK_FLOOR: f64 = 1e-8;

/// Compares analytic gradients of the bridge loss with central finite
/// differences on `n_params` randomly chosen scalar parameters.
pub fn grad_check<S: NoiseSchedule + ?Sized, R: Rng + ?Sized>(
    model: &mut Predictor,
    batch: &[BridgeExample],
    sched: &S,
    eps: f64,
    n_params: usize,
    rng: &mut R,
) -> Result<GradCheck> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::InvalidArgument(format!("finite-difference step {eps} outside [1e-6, 1e-3]")));
    }
    model.zero_grad();
    model.accumulate_loss(batch, sched)?;
    // flat index → (param, element)
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let total: usize = sizes.iter().sum();
    let picks = sample_indices(rng, total, n_params.min(total));
    let mut max_rel: f64 = 0.0;
    for flat in picks.iter() {
        let (mut pi, mut off) = (0, flat);
        while off >= sizes[pi] {
            off -= sizes[pi];
            pi += 1;
        }
        let analytic = model.params()[pi].grad[off];
        let frozen = model.params()[pi].frozen;
        let orig = model.params()[pi].value[off];
        let mut eval = |v: f64| -> Result<f64> {
            model.params_mut()[pi].value[off] = v;
            model.loss(batch, sched)
        };
        let lp = eval(orig + eps)?;
        let lm = eval(orig - eps)?;
        model.params_mut()[pi].value[off] = orig;
        // a frozen parameter has no gradient by construction
        let fd = if frozen { 0.0 } else { (lp - lm) / (2.0 * eps) };
        let denom = analytic.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        max_rel = max_rel.max((analytic - fd).abs() / denom);
    }
    Ok(GradCheck {
        max_rel_error: max_rel,
        checked: picks.len(),
    })
}
