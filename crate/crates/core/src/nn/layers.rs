use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `floor((input + 2*pad - kernel) / stride) + 1`, or `None` when the
/// kernel does not fit.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

/// Range of output positions `o` for which `o*stride + k - pad` lands in
/// `[0, input)`.
fn valid_range(k: usize, stride: usize, pad: usize, input: usize, out: usize) -> (usize, usize) {
    let (k, s, p, n) = (k as i64, stride as i64, pad as i64, input as i64);
    let lo = (p - k).max(0);
    let lo = (lo + s - 1) / s;
    let hi = (n - 1 + p - k).div_euclid(s) + 1;
    (lo.clamp(0, out as i64) as usize, hi.clamp(0, out as i64) as usize)
}

/// 2-D cross-correlation with zero padding. Weight shape `(out, in, kh, kw)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv2d {
    pub fn new(weight: Tensor, bias: Tensor, stride: usize, pad: usize) -> Result<Self> {
        let [o, _, kh, kw] = *weight.shape() else {
            return Err(Error::Shape(format!("conv weight must be rank 4, got {:?}", weight.shape())));
        };
        if bias.shape() != [o] || kh == 0 || kw == 0 || stride == 0 {
            return Err(Error::Shape(format!(
                "conv weight {:?} / bias {:?} / stride {stride}",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            pad,
        })
    }

    /// Gaussian weights, zero bias.
    pub fn random(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2d {
            weight: Tensor::randn(&[out_ch, in_ch, kernel, kernel], std, rng),
            bias: Tensor::zeros(&[out_ch]),
            stride,
            pad,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[2], self.weight.shape()[3])
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[1..].iter().product()
    }

    pub fn out_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let (kh, kw) = self.kernel();
        Some((
            conv_out_dim(h, kh, self.stride, self.pad)?,
            conv_out_dim(w, kw, self.stride, self.pad)?,
        ))
    }

    fn check_input(&self, x: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let (c, h, w) = x.chw()?;
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "conv expects {} input channels, got {c}",
                self.in_channels()
            )));
        }
        let (oh, ow) = self
            .out_dims(h, w)
            .ok_or_else(|| Error::Shape(format!("conv kernel {:?} larger than {h}x{w} input", self.kernel())))?;
        Ok((c, h, w, oh, ow))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (c_in, h, w, oh, ow) = self.check_input(x)?;
        let (kh, kw) = self.kernel();
        let k = c_in * kh * kw;
        let patches = im2col(x.data(), (c_in, h, w), (kh, kw), self.stride, self.pad, (oh, ow));
        let c_out = self.out_channels();
        let mut out = Tensor::zeros(&[c_out, oh, ow]);
        let wd = self.weight.data();
        for (o, plane) in out.data_mut().chunks_exact_mut(oh * ow).enumerate() {
            let wrow = &wd[o * k..(o + 1) * k];
            let b = self.bias.data()[o];
            for (v, patch) in plane.iter_mut().zip(patches.chunks_exact(k)) {
                *v = b + dot(wrow, patch);
            }
        }
        Ok(out)
    }

    /// Gradients of a scalar loss given `dL/d(output)`.
    pub fn backward(&self, x: &Tensor, grad_out: &Tensor) -> Result<ConvGrads> {
        let (c_in, h, w, oh, ow) = self.check_input(x)?;
        let c_out = self.out_channels();
        if grad_out.shape() != [c_out, oh, ow] {
            return Err(Error::Shape(format!(
                "conv grad {:?}, expected {:?}",
                grad_out.shape(),
                [c_out, oh, ow]
            )));
        }
        let (kh, kw) = self.kernel();
        let (s, p) = (self.stride, self.pad);
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(self.weight.shape());
        let mut gb = Tensor::zeros(&[c_out]);
        let wd = self.weight.data();
        let xd = x.data();
        for o in 0..c_out {
            let g = grad_out.plane(o);
            gb.data_mut()[o] = g.iter().sum();
            for c in 0..c_in {
                let xin = &xd[c * h * w..(c + 1) * h * w];
                let gxin = &mut gx.data_mut()[c * h * w..(c + 1) * h * w];
                for ky in 0..kh {
                    let (y_lo, y_hi) = valid_range(ky, s, p, h, oh);
                    for kx in 0..kw {
                        let widx = ((o * c_in + c) * kh + ky) * kw + kx;
                        let wv = wd[widx];
                        let (x_lo, x_hi) = valid_range(kx, s, p, w, ow);
                        let mut acc = 0.0;
                        for oy in y_lo..y_hi {
                            let iy = oy * s + ky - p;
                            let grow = &g[oy * ow..(oy + 1) * ow];
                            for ox in x_lo..x_hi {
                                let ix = iy * w + ox * s + kx - p;
                                acc += grow[ox] * xin[ix];
                                gxin[ix] += wv * grow[ox];
                            }
                        }
                        gw.data_mut()[widx] = acc;
                    }
                }
            }
        }
        Ok(ConvGrads {
            input: gx,
            weight: gw,
            bias: gb,
        })
    }
}

/// Patch-major unfolding: row `oy * ow + ox` holds the `(c, ky, kx)`
/// receptive field of that output pixel, zero where it falls in the padding.
fn im2col(
    x: &[f64],
    (c_in, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    s: usize,
    p: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let k = c_in * kh * kw;
    let mut out = vec![0.0; oh * ow * k];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * k..(oy * ow + ox + 1) * k];
            for c in 0..c_in {
                for ky in 0..kh {
                    let iy = (oy * s + ky).wrapping_sub(p);
                    if iy >= h {
                        continue;
                    }
                    let base = (c * h + iy) * w;
                    for kx in 0..kw {
                        let ix = (ox * s + kx).wrapping_sub(p);
                        if ix < w {
                            row[(c * kh + ky) * kw + kx] = x[base + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes gradient where the forward input was positive.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("same shape")
}

/// Winning input index for every pooled output, for routing gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolIndex {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

/// Max pooling with a square window; the first maximum wins ties.
pub fn maxpool(x: &Tensor, kernel: usize, stride: usize) -> Result<(Tensor, PoolIndex)> {
    let (c, h, w) = x.chw()?;
    let (oh, ow) = conv_out_dim(h, kernel, stride, 0)
        .zip(conv_out_dim(w, kernel, stride, 0))
        .ok_or_else(|| Error::Shape(format!("pool window {kernel} larger than {h}x{w}")))?;
    let rows: Vec<(usize, usize)> = (0..oh).map(|o| (o * stride, o * stride + kernel)).collect();
    let cols: Vec<(usize, usize)> = (0..ow).map(|o| (o * stride, o * stride + kernel)).collect();
    pool_regions(x, c, h, w, &rows, &cols)
}

/// Max pooling onto a fixed `out_h x out_w` grid; cell `i` covers input rows
/// `floor(i*H/out_h) .. ceil((i+1)*H/out_h)`.
pub fn adaptive_maxpool(x: &Tensor, out_h: usize, out_w: usize) -> Result<(Tensor, PoolIndex)> {
    let (c, h, w) = x.chw()?;
    if out_h == 0 || out_w == 0 || out_h > h || out_w > w {
        return Err(Error::Shape(format!(
            "cannot adaptively pool {h}x{w} to {out_h}x{out_w}"
        )));
    }
    let bins = |n: usize, m: usize| -> Vec<(usize, usize)> {
        (0..m).map(|i| (i * n / m, ((i + 1) * n).div_ceil(m))).collect()
    };
    pool_regions(x, c, h, w, &bins(h, out_h), &bins(w, out_w))
}

fn pool_regions(
    x: &Tensor,
    c: usize,
    h: usize,
    w: usize,
    rows: &[(usize, usize)],
    cols: &[(usize, usize)],
) -> Result<(Tensor, PoolIndex)> {
    let (oh, ow) = (rows.len(), cols.len());
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut argmax = Vec::with_capacity(c * oh * ow);
    let xd = x.data();
    for ch in 0..c {
        for (oy, &(y0, y1)) in rows.iter().enumerate() {
            for (ox, &(x0, x1)) in cols.iter().enumerate() {
                let mut best = ch * h * w + y0 * w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let idx = ch * h * w + iy * w + ix;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.data_mut()[(ch * oh + oy) * ow + ox] = xd[best];
                argmax.push(best);
            }
        }
    }
    Ok((
        out,
        PoolIndex {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn maxpool_backward(index: &PoolIndex, grad_out: &Tensor) -> Tensor {
    let mut g = Tensor::zeros(&index.input_shape);
    for (&src, &go) in index.argmax.iter().zip(grad_out.data()) {
        g.data_mut()[src] += go;
    }
    g
}

/// Fully connected layer; weight shape `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub input: Vec<f64>,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match *weight.shape() {
            [o, _] if bias.shape() == [o] => Ok(Linear { weight, bias }),
            _ => Err(Error::Shape(format!(
                "linear weight {:?} / bias {:?}",
                weight.shape(),
                bias.shape()
            ))),
        }
    }

    pub fn random(inputs: usize, outputs: usize, std: f64, rng: &mut impl Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[outputs, inputs], std, rng),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs() {
            return Err(Error::Shape(format!(
                "linear layer expects {} inputs, got {}",
                self.inputs(),
                x.len()
            )));
        }
        let n = self.inputs();
        Ok(self
            .weight
            .data()
            .chunks_exact(n)
            .zip(self.bias.data())
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect())
    }

    pub fn backward(&self, x: &[f64], grad_out: &[f64]) -> LinearGrads {
        let n = self.inputs();
        let mut gx = vec![0.0; n];
        let mut gw = Tensor::zeros(self.weight.shape());
        for (o, &g) in grad_out.iter().enumerate() {
            let row = &self.weight.data()[o * n..(o + 1) * n];
            let grow = &mut gw.data_mut()[o * n..(o + 1) * n];
            for i in 0..n {
                gx[i] += row[i] * g;
                grow[i] = g * x[i];
            }
        }
        LinearGrads {
            input: gx,
            weight: gw,
            bias: Tensor::from_vec(&[grad_out.len()], grad_out.to_vec()).expect("1-d"),
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln softmax(logits)[label]` and its gradient with respect to the logits.
pub fn softmax_ce(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Invalid(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    let loss = lse - logits[label];
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}
