use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::{Module, Param, Tensor};

/// Maps a padded position to the source index under reflect padding.
#[inline]
fn reflect(p: i64, len: usize) -> usize {
    let n = len as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut q = p.rem_euclid(period);
    if q >= n {
        q = period - q;
    }
    q as usize
}

/// 1-D convolution with reflect padding of `kernel - stride` samples in
/// total, so an input of length `L` (divisible by the stride) yields `L / stride`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    /// `[out][in][k]`
    pub weight: Param,
    pub bias: Param,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(kernel >= stride && stride >= 1, "kernel must cover the stride");
        Self {
            weight: Param::uniform(
                format!("{name}.weight"),
                &[out_ch, in_ch, kernel],
                in_ch * kernel,
                gain,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    pub fn out_len(&self, len: usize) -> usize {
        len / self.stride
    }

    fn pad_left(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    fn padded(&self, x: &Tensor) -> Tensor {
        let len = x.cols();
        let total = self.kernel - self.stride;
        let left = self.pad_left() as i64;
        let mut xp = Tensor::zeros(self.in_ch, len + total);
        for i in 0..self.in_ch {
            let src = x.row(i);
            for (p, v) in xp.row_mut(i).iter_mut().enumerate() {
                *v = src[reflect(p as i64 - left, len)];
            }
        }
        xp
    }

    /// Column matrix `[in·k][out_len]` with entry `xp[i][t·stride + j]` at row `i·k + j`.
    fn im2col(&self, xp: &Tensor, out_len: usize) -> Vec<f64> {
        let (k, s) = (self.kernel, self.stride);
        let mut col = vec![0.0; self.in_ch * k * out_len];
        for i in 0..self.in_ch {
            let xr = xp.row(i);
            for j in 0..k {
                let dst = &mut col[(i * k + j) * out_len..(i * k + j + 1) * out_len];
                for (d, x) in dst.iter_mut().zip(xr[j..].iter().step_by(s)) {
                    *d = *x;
                }
            }
        }
        col
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows(), self.in_ch, "conv input channels");
        let out_len = self.out_len(x.cols());
        let col = self.im2col(&self.padded(x), out_len);
        let mut y = Tensor::zeros(self.out_ch, out_len);
        for o in 0..self.out_ch {
            y.row_mut(o).iter_mut().for_each(|v| *v = self.bias.value[o]);
        }
        let ik = self.in_ch * self.kernel;
        gemm(
            MatRef::new(&self.weight.value, self.out_ch, ik),
            MatRef::new(&col, ik, out_len),
            1.0,
            y.data_mut(),
        );
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, gy: &Tensor) -> Tensor {
        let len = x.cols();
        let out_len = gy.cols();
        let xp = self.padded(x);
        let (k, s) = (self.kernel, self.stride);
        let ik = self.in_ch * k;
        let col = self.im2col(&xp, out_len);
        for o in 0..self.out_ch {
            self.bias.accumulate(o, gy.row(o).iter().sum());
        }
        if let Some(gw) = self.weight.grad_mut() {
            gemm(
                MatRef::new(gy.data(), self.out_ch, out_len),
                MatRef::new(&col, ik, out_len).t(),
                1.0,
                gw,
            );
        }
        let mut gcol = vec![0.0; ik * out_len];
        gemm(
            MatRef::new(&self.weight.value, self.out_ch, ik).t(),
            MatRef::new(gy.data(), self.out_ch, out_len),
            0.0,
            &mut gcol,
        );
        let mut gxp = Tensor::zeros(self.in_ch, xp.cols());
        for i in 0..self.in_ch {
            let gxr = gxp.row_mut(i);
            for j in 0..k {
                let src = &gcol[(i * k + j) * out_len..(i * k + j + 1) * out_len];
                for (d, g) in gxr[j..].iter_mut().step_by(s).zip(src) {
                    *d += g;
                }
            }
        }
        // fold the padded gradient back onto the source samples
        let left = self.pad_left() as i64;
        let mut gx = Tensor::zeros(self.in_ch, len);
        for i in 0..self.in_ch {
            let src = gxp.row(i);
            let dst = gx.row_mut(i);
            for (p, g) in src.iter().enumerate() {
                dst[reflect(p as i64 - left, len)] += g;
            }
        }
        gx
    }
}

impl Module for Conv1d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Transposed 1-D convolution; the full output of length `(L-1)·stride + kernel`
/// is cropped by `kernel - stride` samples in total, giving exactly `L · stride`.
#[derive(Debug, Clone)]
pub struct ConvTranspose1d {
    /// `[in][out][k]`
    pub weight: Param,
    pub bias: Param,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    stride: usize,
}

impl ConvTranspose1d {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        assert!(kernel >= stride && stride >= 1, "kernel must cover the stride");
        // each output sample receives kernel/stride taps per input channel
        let fan_in = in_ch * (kernel / stride).max(1);
        Self {
            weight: Param::uniform(
                format!("{name}.weight"),
                &[in_ch, out_ch, kernel],
                fan_in,
                gain,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), &[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    fn crop_left(&self) -> usize {
        (self.kernel - self.stride) / 2
    }

    /// Output positions reached by tap `j`: input indices `t0..t1` map to `t·stride + j − crop`.
    fn tap_range(&self, j: usize, len: usize, out_len: usize) -> (usize, usize, usize) {
        let (s, crop) = (self.stride, self.crop_left());
        let t0 = if j >= crop { 0 } else { (crop - j).div_ceil(s) };
        let t1 = if out_len + crop > j {
            ((out_len + crop - j).div_ceil(s)).min(len)
        } else {
            0
        };
        let p0 = if t1 > t0 { t0 * s + j - crop } else { 0 };
        (t0, t1.max(t0), p0)
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.rows(), self.in_ch, "transposed conv input channels");
        let len = x.cols();
        let (k, s) = (self.kernel, self.stride);
        let out_len = len * s;
        let ok = self.out_ch * k;
        // c[(o·k + j)][t] = Σ_i w[i][o][j] · x[i][t]
        let mut c = vec![0.0; ok * len];
        gemm(
            MatRef::new(&self.weight.value, self.in_ch, ok).t(),
            MatRef::new(x.data(), self.in_ch, len),
            0.0,
            &mut c,
        );
        let mut y = Tensor::zeros(self.out_ch, out_len);
        for o in 0..self.out_ch {
            let yr = y.row_mut(o);
            yr.iter_mut().for_each(|v| *v = self.bias.value[o]);
            for j in 0..k {
                let (t0, t1, p0) = self.tap_range(j, len, out_len);
                let src = &c[(o * k + j) * len + t0..(o * k + j) * len + t1];
                for (d, v) in yr[p0..].iter_mut().step_by(s).zip(src) {
                    *d += v;
                }
            }
        }
        y
    }

    pub fn backward(&mut self, x: &Tensor, gy: &Tensor) -> Tensor {
        let len = x.cols();
        let (k, s) = (self.kernel, self.stride);
        let out_len = gy.cols();
        let ok = self.out_ch * k;
        let mut gc = vec![0.0; ok * len];
        for o in 0..self.out_ch {
            let gr = gy.row(o);
            self.bias.accumulate(o, gr.iter().sum());
            for j in 0..k {
                let (t0, t1, p0) = self.tap_range(j, len, out_len);
                let dst = &mut gc[(o * k + j) * len + t0..(o * k + j) * len + t1];
                for (d, g) in dst.iter_mut().zip(gr[p0..].iter().step_by(s)) {
                    *d = *g;
                }
            }
        }
        if let Some(gw) = self.weight.grad_mut() {
            gemm(
                MatRef::new(x.data(), self.in_ch, len),
                MatRef::new(&gc, ok, len).t(),
                1.0,
                gw,
            );
        }
        let mut gx = Tensor::zeros(self.in_ch, len);
        gemm(
            MatRef::new(&self.weight.value, self.in_ch, ok),
            MatRef::new(&gc, ok, len),
            0.0,
            gx.data_mut(),
        );
        gx
    }
}

impl Module for ConvTranspose1d {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Dense layer on vectors: `y = W x + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out][in]`
    pub weight: Param,
    pub bias: Param,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(name: &str, in_dim: usize, out_dim: usize, gain: f64, rng: &mut R) -> Self {
        Self {
            weight: Param::uniform(format!("{name}.weight"), &[out_dim, in_dim], in_dim, gain, rng),
            bias: Param::zeros(format!("{name}.bias"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.in_dim, "linear input size");
        (0..self.out_dim)
            .map(|o| {
                let row = &self.weight.value[o * self.in_dim..(o + 1) * self.in_dim];
                self.bias.value[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    pub fn backward(&mut self, x: &[f64], gy: &[f64]) -> Vec<f64> {
        let mut gx = vec![0.0; self.in_dim];
        for (o, &g) in gy.iter().enumerate() {
            self.bias.accumulate(o, g);
            for (i, &xv) in x.iter().enumerate() {
                let idx = o * self.in_dim + i;
                self.weight.accumulate(idx, g * xv);
                gx[i] += self.weight.value[idx] * g;
            }
        }
        gx
    }
}

impl Module for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(|v| v * sigmoid(v))
}

/// Gradient through SiLU given the pre-activation input.
pub fn silu_backward(x: &Tensor, gy: &Tensor) -> Tensor {
    x.zip_map(gy, |v, g| {
        let s = sigmoid(v);
        g * s * (1.0 + v * (1.0 - s))
    })
}
