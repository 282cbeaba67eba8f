//! Small convolutional waveform VAE.
//!
//! The encoder is a stack of strided convolutions (kernel `2·stride`, SiLU)
//! followed by a head producing the posterior mean and log-variance; the
//! decoder mirrors it with transposed convolutions. Training minimises the
//! multi-resolution STFT distance plus a weighted KL term.

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Waveform;
use crate::error::{Error, Result};
use crate::metrics::{mrstft_loss_grad, MrStftConfig};
use crate::nn::{silu, silu_backward, Adam, Conv1d, ConvTranspose1d, Module, Param, Tensor};
use crate::predictor::load_named;

const LOGVAR_RANGE: (f64, f64) = (-30.0, 20.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub sample_rate: u32,
    /// Latent channels `c`.
    pub channels: usize,
    /// Encoder widths, one per strided layer.
    pub hidden: Vec<usize>,
    /// Encoder strides; their product is the compression ratio.
    pub strides: Vec<usize>,
    pub kl_weight: f64,
    /// FFT sizes of the reconstruction loss (hop = fft/4).
    pub mrstft_fft_sizes: Vec<usize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            channels: 8,
            hidden: vec![16, 32, 48, 64],
            strides: vec![2, 2, 2, 2],
            kl_weight: 1e-7,
            mrstft_fft_sizes: vec![128, 256, 512],
        }
    }
}

impl CodecConfig {
    /// Samples per latent frame.
    pub fn ratio(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn frame_rate(&self) -> f64 {
        self.sample_rate as f64 / self.ratio() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() || self.hidden.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "codec needs one stride per hidden layer, got {} widths and {} strides",
                self.hidden.len(),
                self.strides.len()
            )));
        }
        if self.channels == 0 || self.hidden.contains(&0) || self.strides.contains(&0) {
            return Err(Error::Config("codec dimensions must be positive".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config(format!("kl_weight {} must be non-negative", self.kl_weight)));
        }
        if self.sample_rate == 0 {
            return Err(Error::InvalidSampleRate(0));
        }
        MrStftConfig::new(&self.mrstft_fft_sizes)?;
        Ok(())
    }

    pub fn mrstft(&self) -> MrStftConfig {
        MrStftConfig::new(&self.mrstft_fft_sizes).expect("validated config")
    }
}

/// Codec latent: `c × l` posterior mean plus framing metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    pub data: Tensor,
    pub frame_rate: f64,
    pub ratio: usize,
    /// Scale `s` making the latent approximately unit-variance; not applied to `data`.
    pub scale: f64,
    pub sample_rate: u32,
    /// Waveform length the latent was encoded from, used to trim decoder output.
    pub signal_len: Option<usize>,
}

impl Latent {
    pub fn channels(&self) -> usize {
        self.data.rows()
    }

    pub fn frames(&self) -> usize {
        self.data.cols()
    }

    /// `s · z`
    pub fn scaled(&self) -> Tensor {
        self.data.scale(self.scale)
    }

    /// Replaces the data with `z̃ / s`.
    pub fn with_scaled(&self, z: Tensor) -> Latent {
        Latent {
            data: z.scale(1.0 / self.scale),
            ..self.clone()
        }
    }
}

/// Posterior parameters for one waveform.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub mean: Tensor,
    pub logvar: Tensor,
}

/// `μ + exp(logvar / 2) · ε`
fn reparameterise(post: &Posterior, eps: &Tensor) -> Tensor {
    let mut z = post.mean.clone();
    for ((o, lv), e) in z.data_mut().iter_mut().zip(post.logvar.data()).zip(eps.data()) {
        *o += (0.5 * lv).exp() * e;
    }
    z
}

#[derive(Debug, Clone)]
pub struct Codec {
    cfg: CodecConfig,
    enc: Vec<Conv1d>,
    enc_head: Conv1d,
    dec_in: Conv1d,
    dec: Vec<ConvTranspose1d>,
    dec_out: Conv1d,
    scale: f64,
}

struct EncTrace {
    inputs: Vec<Tensor>,
    pre_act: Vec<Tensor>,
    head_in: Tensor,
}

struct DecTrace {
    z: Tensor,
    pre_in: Tensor,
    inputs: Vec<Tensor>,
    pre_act: Vec<Tensor>,
    out_in: Tensor,
}

impl Codec {
    pub fn new(cfg: CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut enc = Vec::new();
        let mut prev = 1;
        for (i, (&w, &s)) in cfg.hidden.iter().zip(&cfg.strides).enumerate() {
            enc.push(Conv1d::new(&format!("enc{i}"), prev, w, 2 * s, s, 1.0, &mut rng));
            prev = w;
        }
        let enc_head = Conv1d::new("enc_head", prev, 2 * cfg.channels, 3, 1, 1.0, &mut rng);
        let dec_in = Conv1d::new("dec_in", cfg.channels, prev, 3, 1, 1.0, &mut rng);
        let mut dec = Vec::new();
        let n = cfg.hidden.len();
        for i in (0..n).rev() {
            let out = if i == 0 { cfg.hidden[0] } else { cfg.hidden[i - 1] };
            let s = cfg.strides[i];
            dec.push(ConvTranspose1d::new(&format!("dec{}", n - 1 - i), cfg.hidden[i], out, 2 * s, s, 1.0, &mut rng));
        }
        let dec_out = Conv1d::new("dec_out", cfg.hidden[0], 1, 3, 1, 1.0, &mut rng);
        Ok(Self {
            cfg,
            enc,
            enc_head,
            dec_in,
            dec,
            dec_out,
            scale: 1.0,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn ratio(&self) -> usize {
        self.cfg.ratio()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, s: f64) -> Result<()> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidArgument(format!("latent scale {s}")));
        }
        self.scale = s;
        Ok(())
    }

    /// Number of latent frames for a waveform of `len` samples.
    pub fn latent_len(&self, len: usize) -> usize {
        len.div_ceil(self.ratio())
    }

    fn padded_input(&self, wav: &Waveform) -> Result<Tensor> {
        if wav.sample_rate() != self.cfg.sample_rate {
            return Err(Error::RateMismatch {
                expected: self.cfg.sample_rate,
                got: wav.sample_rate(),
            });
        }
        let r = self.ratio();
        if wav.len() < r {
            return Err(Error::TooShort {
                needed: r,
                got: wav.len(),
            });
        }
        let padded = self.latent_len(wav.len()) * r;
        let mut x = wav.samples().to_vec();
        x.resize(padded, 0.0);
        Tensor::from_vec(1, padded, x)
    }

    fn encode_trace(&self, x: &Tensor) -> (Posterior, EncTrace) {
        let mut inputs = Vec::with_capacity(self.enc.len());
        let mut pre_act = Vec::with_capacity(self.enc.len());
        let mut h = x.clone();
        for conv in &self.enc {
            let a = conv.forward(&h);
            inputs.push(h);
            h = silu(&a);
            pre_act.push(a);
        }
        let out = self.enc_head.forward(&h);
        let c = self.cfg.channels;
        let mean = out.slice_rows(0, c);
        let logvar = out
            .slice_rows(c, 2 * c)
            .map(|v| v.clamp(LOGVAR_RANGE.0, LOGVAR_RANGE.1));
        (
            Posterior { mean, logvar },
            EncTrace {
                inputs,
                pre_act,
                head_in: h,
            },
        )
    }

    pub fn posterior(&self, wav: &Waveform) -> Result<Posterior> {
        let x = self.padded_input(wav)?;
        Ok(self.encode_trace(&x).0)
    }

    /// Deterministic encoding to the posterior mean.
    pub fn encode(&self, wav: &Waveform) -> Result<Latent> {
        let post = self.posterior(wav)?;
        Ok(self.wrap_latent(post.mean, Some(wav.len())))
    }

    /// Encoding with one reparameterised posterior draw.
    pub fn encode_sample<R: Rng + ?Sized>(&self, wav: &Waveform, rng: &mut R) -> Result<Latent> {
        let post = self.posterior(wav)?;
        let eps = Tensor::randn(post.mean.rows(), post.mean.cols(), rng);
        Ok(self.wrap_latent(reparameterise(&post, &eps), Some(wav.len())))
    }

    fn wrap_latent(&self, data: Tensor, signal_len: Option<usize>) -> Latent {
        Latent {
            data,
            frame_rate: self.cfg.frame_rate(),
            ratio: self.ratio(),
            scale: self.scale,
            sample_rate: self.cfg.sample_rate,
            signal_len,
        }
    }

    /// Wraps raw latent data (e.g. a sampler output already divided by `s`).
    pub fn latent_from(&self, data: Tensor, signal_len: Option<usize>) -> Result<Latent> {
        if data.rows() != self.cfg.channels {
            return Err(Error::ShapeMismatch {
                expected: (self.cfg.channels, data.cols()),
                got: data.shape(),
            });
        }
        Ok(self.wrap_latent(data, signal_len))
    }

    fn decode_trace(&self, z: &Tensor) -> (Tensor, DecTrace) {
        let pre_in = self.dec_in.forward(z);
        let mut h = silu(&pre_in);
        let mut inputs = Vec::with_capacity(self.dec.len());
        let mut pre_act = Vec::with_capacity(self.dec.len());
        for conv in &self.dec {
            let a = conv.forward(&h);
            inputs.push(h);
            h = silu(&a);
            pre_act.push(a);
        }
        let y = self.dec_out.forward(&h);
        (
            y,
            DecTrace {
                z: z.clone(),
                pre_in,
                inputs,
                pre_act,
                out_in: h,
            },
        )
    }

    pub fn decode(&self, z: &Latent) -> Result<Waveform> {
        if z.channels() != self.cfg.channels {
            return Err(Error::ShapeMismatch {
                expected: (self.cfg.channels, z.frames()),
                got: z.data.shape(),
            });
        }
        if !z.data.is_finite() {
            return Err(Error::NonFinite("latent passed to decoder".into()));
        }
        let (y, _) = self.decode_trace(&z.data);
        let mut samples = y.into_data();
        if let Some(len) = z.signal_len {
            samples.truncate(len);
        }
        Waveform::new(samples, self.cfg.sample_rate)
    }

    fn decode_backward(&mut self, tr: &DecTrace, gy: &Tensor) -> Tensor {
        let g = self.dec_out.backward(&tr.out_in, gy);
        let mut g = silu_backward(tr.pre_act.last().unwrap_or(&tr.pre_in), &g);
        for i in (0..self.dec.len()).rev() {
            let gi = self.dec[i].backward(&tr.inputs[i], &g);
            let pre = if i == 0 { &tr.pre_in } else { &tr.pre_act[i - 1] };
            g = silu_backward(pre, &gi);
        }
        self.dec_in.backward(&tr.z, &g)
    }

    fn encode_backward(&mut self, tr: &EncTrace, g_head: &Tensor) {
        let mut g = self.enc_head.backward(&tr.head_in, g_head);
        for i in (0..self.enc.len()).rev() {
            let ga = silu_backward(&tr.pre_act[i], &g);
            g = self.enc[i].backward(&tr.inputs[i], &ga);
        }
    }

    /// Loss of one waveform with a reparameterised draw; accumulates
    /// gradients scaled by `weight`. Returns `(reconstruction, kl)`.
    fn accumulate_example(
        &mut self,
        wav: &Waveform,
        eps: &Tensor,
        mr: &MrStftConfig,
        weight: f64,
    ) -> Result<(f64, f64)> {
        let x = self.padded_input(wav)?;
        let (post, etr) = self.encode_trace(&x);
        let std = post.logvar.map(|lv| (0.5 * lv).exp());
        let z = reparameterise(&post, eps);
        let (y, dtr) = self.decode_trace(&z);
        let est = Waveform::new(y.data()[..wav.len()].to_vec(), wav.sample_rate())?;
        let (rec, grad) = mrstft_loss_grad(wav, &est, mr)?;
        let kl: f64 = post
            .mean
            .data()
            .iter()
            .zip(post.logvar.data())
            .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
            .sum();

        let mut gy = Tensor::zeros(1, y.cols());
        for (g, v) in gy.data_mut().iter_mut().zip(&grad) {
            *g = weight * v;
        }
        let gz = self.decode_backward(&dtr, &gy);
        let kw = weight * self.cfg.kl_weight;
        let c = self.cfg.channels;
        let mut g_head = Tensor::zeros(2 * c, z.cols());
        for r in 0..c {
            for t in 0..z.cols() {
                let m = post.mean.get(r, t);
                let lv = post.logvar.get(r, t);
                let s = std.get(r, t);
                let g = gz.get(r, t);
                g_head.set(r, t, g + kw * m);
                let in_range = lv > LOGVAR_RANGE.0 && lv < LOGVAR_RANGE.1;
                let glv = g * eps.get(r, t) * 0.5 * s + kw * 0.5 * (lv.exp() - 1.0);
                g_head.set(c + r, t, if in_range { glv } else { 0.0 });
            }
        }
        self.encode_backward(&etr, &g_head);
        Ok((rec, kl))
    }

    /// Reconstruction-plus-KL loss on a batch with fixed noise draws, no gradients.
    pub fn batch_loss(&self, batch: &[Waveform], noise: &[Tensor]) -> Result<f64> {
        let mr = self.cfg.mrstft();
        let mut total = 0.0;
        for (wav, eps) in batch.iter().zip(noise) {
            let x = self.padded_input(wav)?;
            let (post, _) = self.encode_trace(&x);
            let (y, _) = self.decode_trace(&reparameterise(&post, eps));
            let est = Waveform::new(y.data()[..wav.len()].to_vec(), wav.sample_rate())?;
            let rec = crate::metrics::mrstft_loss(wav, &est, &mr)?;
            let kl: f64 = post
                .mean
                .data()
                .iter()
                .zip(post.logvar.data())
                .map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
                .sum();
            total += rec + self.cfg.kl_weight * kl;
        }
        Ok(total / batch.len() as f64)
    }

    /// One optimizer step; returns the batch-mean `(total, reconstruction)` loss.
    pub fn train_step<R: Rng + ?Sized>(
        &mut self,
        batch: &[Waveform],
        opt: &mut Adam,
        rng: &mut R,
    ) -> Result<(f64, f64)> {
        let noise: Vec<Tensor> = batch
            .iter()
            .map(|w| Tensor::randn(self.cfg.channels, self.latent_len(w.len()), rng))
            .collect();
        self.train_step_with_noise(batch, &noise, opt)
    }

    pub fn train_step_with_noise(
        &mut self,
        batch: &[Waveform],
        noise: &[Tensor],
        opt: &mut Adam,
    ) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty codec batch".into()));
        }
        let mr = self.cfg.mrstft();
        self.zero_grad();
        let weight = 1.0 / batch.len() as f64;
        let (mut rec, mut kl) = (0.0, 0.0);
        for (wav, eps) in batch.iter().zip(noise) {
            let (r, k) = self.accumulate_example(wav, eps, &mr, weight)?;
            rec += r * weight;
            kl += k * weight;
        }
        let total = rec + self.cfg.kl_weight * kl;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!(
                "codec loss at optimizer step {} (reconstruction {rec}, kl {kl})",
                opt.steps_taken()
            )));
        }
        opt.step(self.params_mut())?;
        Ok((total, rec))
    }

    pub fn load_params(&mut self, stored: &[Param]) -> Result<()> {
        load_named(self.params_mut(), stored)
    }
}

impl Module for Codec {
    fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for c in &self.enc {
            out.extend(c.params());
        }
        out.extend(self.enc_head.params());
        out.extend(self.dec_in.params());
        for c in &self.dec {
            out.extend(c.params());
        }
        out.extend(self.dec_out.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for c in &mut self.enc {
            out.extend(c.params_mut());
        }
        out.extend(self.enc_head.params_mut());
        out.extend(self.dec_in.params_mut());
        for c in &mut self.dec {
            out.extend(c.params_mut());
        }
        out.extend(self.dec_out.params_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Crop length in samples (rounded down to a multiple of the ratio).
    pub crop_len: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            crop_len: 4096,
            lr: 1e-5,
            seed: 0,
            log_every: 100,
        }
    }
}

/// Random fixed-length crop; shorter clips are zero-padded.
pub fn random_crop<R: Rng + ?Sized>(wav: &Waveform, len: usize, rng: &mut R) -> Waveform {
    if wav.len() <= len {
        return wav.fit_len(len);
    }
    let start = rng.gen_range(0..=wav.len() - len);
    wav.with_samples(wav.samples()[start..start + len].to_vec())
}

/// Trains the codec on random crops; returns the per-step `(total, reconstruction)` loss trace.
pub fn train_codec(
    codec: &mut Codec,
    corpus: &[Waveform],
    cfg: &CodecTrainConfig,
    opt: &mut Adam,
) -> Result<Vec<(f64, f64)>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty codec training corpus".into()));
    }
    if let Some(w) = corpus.iter().find(|w| w.sample_rate() != codec.cfg.sample_rate) {
        return Err(Error::RateMismatch {
            expected: codec.cfg.sample_rate,
            got: w.sample_rate(),
        });
    }
    let r = codec.ratio();
    let crop = (cfg.crop_len / r).max(1) * r;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Waveform> = (0..cfg.batch_size.max(1))
            .map(|_| {
                let w = &corpus[rng.gen_range(0..corpus.len())];
                random_crop(w, crop, &mut rng)
            })
            .collect();
        let losses = codec.train_step(&batch, opt, &mut rng)?;
        if cfg.log_every > 0 && step % cfg.log_every == 0 {
            info!("codec step {step}: loss {:.4} (reconstruction {:.4})", losses.0, losses.1);
        }
        trace.push(losses);
    }
    debug!("codec training finished after {} steps", cfg.steps);
    Ok(trace)
}

/// `1 / std` of the pooled, mean-subtracted latent entries.
pub fn scale_from_values(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::ZeroVariance);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::ZeroVariance);
    }
    Ok(1.0 / var.sqrt())
}

/// Fits the latent scale `s` on the posterior means of a corpus.
pub fn fit_latent_scale(codec: &Codec, corpus: &[Waveform]) -> Result<f64> {
    let mut values = Vec::new();
    for wav in corpus {
        values.extend_from_slice(codec.encode(wav)?.data.data());
    }
    scale_from_values(&values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn tiny() -> CodecConfig {
        CodecConfig {
            sample_rate: 8000,
            channels: 2,
            hidden: vec![3, 4],
            strides: vec![2, 2],
            kl_weight: 1e-3,
            mrstft_fft_sizes: vec![32, 64],
        }
    }

    fn tone(len: usize, f: f64) -> Waveform {
        Waveform::new(
            (0..len).map(|i| 0.5 * (2.0 * PI * f * i as f64 / 8000.0).sin()).collect(),
            8000,
        )
        .unwrap()
    }

    #[test]
    fn shapes_and_ratio() {
        let codec = Codec::new(CodecConfig::default(), 0).unwrap();
        assert_eq!(codec.ratio(), 16);
        let x = tone(1000, 440.0);
        let z = codec.encode(&x).unwrap();
        assert_eq!(z.data.shape(), (8, 63));
        assert_eq!(z.frame_rate, 500.0);
        assert_eq!(codec.decode(&z).unwrap().len(), 1000);
        assert!(codec.encode(&tone(15, 440.0)).is_err());
        let paper = CodecConfig {
            sample_rate: 48_000,
            channels: 64,
            hidden: vec![8; 9],
            strides: vec![2; 9],
            ..CodecConfig::default()
        };
        assert_eq!(paper.ratio(), 512);
        assert_eq!(paper.frame_rate(), 93.75);
    }

    #[test]
    fn encoding_is_deterministic() {
        let codec = Codec::new(tiny(), 3).unwrap();
        let z = Waveform::zeros(64, 8000).unwrap();
        assert_eq!(codec.encode(&z).unwrap(), codec.encode(&z).unwrap());
    }

    #[test]
    fn shift_by_ratio_shifts_latent_by_one_frame() {
        let codec = Codec::new(tiny(), 4).unwrap();
        let r = codec.ratio();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..256).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = codec.encode(&Waveform::new(x[r..].to_vec(), 8000).unwrap()).unwrap();
        let b = codec.encode(&Waveform::new(x.clone(), 8000).unwrap()).unwrap();
        // frame j of the shifted signal equals frame j+1 of the original, away from the edges
        for c in 0..a.channels() {
            for j in 3..a.frames() - 3 {
                assert!((a.data.get(c, j) - b.data.get(c, j + 1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut codec = Codec::new(tiny(), 5).unwrap();
        let wav = tone(96, 700.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let noise = vec![Tensor::randn(2, codec.latent_len(96), &mut rng)];
        let mr = codec.cfg.mrstft();
        codec.zero_grad();
        codec.accumulate_example(&wav, &noise[0], &mr, 1.0).unwrap();
        let batch = vec![wav];
        let h = 1e-6;
        let sizes: Vec<usize> = codec.params().iter().map(|p| p.len()).collect();
        let mut worst: f64 = 0.0;
        for (pi, &n) in sizes.iter().enumerate() {
            for off in (0..n).step_by(3) {
                let analytic = codec.params()[pi].grad[off];
                let orig = codec.params()[pi].value[off];
                codec.params_mut()[pi].value[off] = orig + h;
                let lp = codec.batch_loss(&batch, &noise).unwrap();
                codec.params_mut()[pi].value[off] = orig - h;
                let lm = codec.batch_loss(&batch, &noise).unwrap();
                codec.params_mut()[pi].value[off] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn one_step_changes_parameters_and_training_reduces_loss() {
        let mut codec = Codec::new(tiny(), 6).unwrap();
        let before: Vec<f64> = codec.params().iter().flat_map(|p| p.value.clone()).collect();
        let corpus = vec![tone(512, 300.0), tone(512, 1200.0)];
        let mut opt = Adam::new(3e-3);
        let cfg = CodecTrainConfig {
            steps: 1,
            batch_size: 2,
            crop_len: 256,
            lr: 3e-3,
            seed: 1,
            log_every: 0,
        };
        train_codec(&mut codec, &corpus, &cfg, &mut opt).unwrap();
        let after: Vec<f64> = codec.params().iter().flat_map(|p| p.value.clone()).collect();
        assert_ne!(before, after);

        let cfg = CodecTrainConfig { steps: 150, ..cfg };
        let trace = train_codec(&mut codec, &corpus, &cfg, &mut opt).unwrap();
        let head: f64 = trace[..10].iter().map(|l| l.1).sum::<f64>() / 10.0;
        let tail: f64 = trace[trace.len() - 10..].iter().map(|l| l.1).sum::<f64>() / 10.0;
        assert!(tail < head, "{head} -> {tail}");
    }

    #[test]
    fn training_rejects_empty_or_mismatched_corpus() {
        let mut codec = Codec::new(tiny(), 0).unwrap();
        let mut opt = Adam::new(1e-3);
        let cfg = CodecTrainConfig::default();
        assert!(train_codec(&mut codec, &[], &cfg, &mut opt).is_err());
        let wrong = Waveform::zeros(512, 16_000).unwrap();
        assert!(train_codec(&mut codec, &[wrong], &cfg, &mut opt).is_err());
    }

    #[test]
    fn scale_from_known_std() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for (std, expected) in [(1.0, 1.0), (4.0, 0.25)] {
            let d = Normal::new(0.3, std).unwrap();
            let v: Vec<f64> = (0..200_000).map(|_| d.sample(&mut rng)).collect();
            let s = scale_from_values(&v).unwrap();
            assert!((s - expected).abs() <= 0.01, "{s}");
        }
        assert!(matches!(scale_from_values(&[2.0; 10]), Err(Error::ZeroVariance)));
    }

    #[test]
    fn fitted_scale_normalises_latents() {
        let codec = Codec::new(tiny(), 2).unwrap();
        let corpus: Vec<Waveform> = (0..4).map(|i| tone(400, 200.0 + 300.0 * i as f64)).collect();
        let s = fit_latent_scale(&codec, &corpus).unwrap();
        assert!(s.is_finite() && s > 0.0);
        let vals: Vec<f64> = corpus
            .iter()
            .flat_map(|w| codec.encode(w).unwrap().data.scale(s).into_data())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((std - 1.0).abs() < 1e-9);
    }
}
