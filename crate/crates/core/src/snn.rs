//! Spike Response Model network used as the event-only feature extractor.
//!
//! Each neuron's membrane potential is the synaptic kernel `v` convolved
//! with its weighted input spikes plus the refractory kernel `u` convolved
//! with its own output spikes:
//!
//! ```text
//! v(t) = t/tau_s * exp(1 - t/tau_s) * H(t)
//! u(t) = -2 phi * exp(-t/tau_r) * H(t)
//! eps_{i+1}(t) = W_i (v * s_i)(t) + (u * s_{i+1})(t)
//! ```
//!
//! A neuron fires when its potential reaches `phi`. The last layer is not
//! thresholded: its drive `W_n (v * s_n)` is averaged over time and becomes
//! the feature map.
//!
//! Time is discrete with step `dt`. A spike emitted at step `k` influences
//! the neuron's own potential from step `k + 1` on, starting at `u(dt)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::{Event, TimeWindow};
use crate::nn::Conv2d;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SrmParams {
    /// Synaptic time constant, ms.
    pub tau_s: f64,
    /// Refractory time constant, ms.
    pub tau_r: f64,
    pub phi: f64,
    /// Simulation step, ms.
    pub dt: f64,
    pub t_bins: usize,
}

impl Default for SrmParams {
    fn default() -> Self {
        SrmParams {
            tau_s: 5.0,
            tau_r: 5.0,
            phi: 1.0,
            dt: 1.0,
            t_bins: 32,
        }
    }
}

impl SrmParams {
    pub fn validate(&self) -> Result<()> {
        let positive = self.tau_s > 0.0 && self.tau_r > 0.0 && self.phi > 0.0 && self.dt > 0.0;
        if !positive || self.t_bins == 0 {
            return Err(Error::Config(format!("SRM parameters must be positive: {self:?}")));
        }
        if self.dt > self.tau_s / 4.0 {
            return Err(Error::Config(format!(
                "dt {} too coarse for tau_s {} (need dt <= tau_s/4)",
                self.dt, self.tau_s
            )));
        }
        Ok(())
    }

    /// `v(k*dt)` for `k in 0..t_bins`.
    pub fn v_taps(&self) -> Vec<f64> {
        (0..self.t_bins).map(|k| kernel_v(k as f64 * self.dt, self.tau_s)).collect()
    }
}

/// Synaptic kernel; peaks at exactly 1 when `t = tau_s`.
pub fn kernel_v(t: f64, tau_s: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    let r = t / tau_s;
    r * (1.0 - r).exp()
}

/// Refractory kernel; `-2 phi` at `t = 0`, rising toward 0.
pub fn kernel_u(t: f64, tau_r: f64, phi: f64) -> f64 {
    if t < 0.0 {
        return 0.0;
    }
    -2.0 * phi * (-t / tau_r).exp()
}

/// Binary spikes laid out `(channels, height, width, t_bins)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpikeTensor {
    channels: usize,
    height: usize,
    width: usize,
    t_bins: usize,
    data: Vec<u8>,
}

impl SpikeTensor {
    pub fn zeros(channels: usize, height: usize, width: usize, t_bins: usize) -> Self {
        SpikeTensor {
            channels,
            height,
            width,
            t_bins,
            data: vec![0; channels * height * width * t_bins],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<u8>) -> Result<Self> {
        let [c, h, w, t] = shape;
        if data.len() != c * h * w * t {
            return Err(Error::Shape(format!("spike buffer {} for {shape:?}", data.len())));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Invalid("spike tensors are binary".into()));
        }
        Ok(SpikeTensor {
            channels: c,
            height: h,
            width: w,
            t_bins: t,
            data,
        })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.channels, self.height, self.width, self.t_bins]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    fn index(&self, c: usize, y: usize, x: usize, t: usize) -> usize {
        ((c * self.height + y) * self.width + x) * self.t_bins + t
    }

    pub fn get(&self, c: usize, y: usize, x: usize, t: usize) -> u8 {
        self.data[self.index(c, y, x, t)]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, t: usize, on: bool) {
        let i = self.index(c, y, x, t);
        self.data[i] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    /// Nearest-neighbour resampling of a rectangular region (in pixels) onto
    /// an `out_h x out_w` grid. Stays binary.
    pub fn crop_resize(&self, x0: f64, y0: f64, w: f64, h: f64, out_h: usize, out_w: usize) -> SpikeTensor {
        let mut out = SpikeTensor::zeros(self.channels, out_h, out_w, self.t_bins);
        let src_x: Vec<Option<usize>> = (0..out_w)
            .map(|j| {
                let sx = (x0 + (j as f64 + 0.5) * w / out_w as f64).floor();
                (sx >= 0.0 && sx < self.width as f64).then_some(sx as usize)
            })
            .collect();
        let src_y: Vec<Option<usize>> = (0..out_h)
            .map(|i| {
                let sy = (y0 + (i as f64 + 0.5) * h / out_h as f64).floor();
                (sy >= 0.0 && sy < self.height as f64).then_some(sy as usize)
            })
            .collect();
        for c in 0..self.channels {
            for (i, sy) in src_y.iter().enumerate() {
                let Some(sy) = *sy else { continue };
                for (j, sx) in src_x.iter().enumerate() {
                    let Some(sx) = *sx else { continue };
                    let src = self.index(c, sy, sx, 0);
                    let dst = out.index(c, i, j, 0);
                    out.data[dst..dst + self.t_bins].copy_from_slice(&self.data[src..src + self.t_bins]);
                }
            }
        }
        out
    }
}

/// Bins window events into a 2-channel (neg, pos) spike tensor. Bin index is
/// `floor((t - t0) / (t1 - t0) * t_bins)`, clamped to the last bin.
pub fn encode_events_to_spikes(
    events: &[Event],
    w: TimeWindow,
    params: &SrmParams,
    (width, height): (u32, u32),
) -> SpikeTensor {
    let t_bins = params.t_bins;
    let mut out = SpikeTensor::zeros(2, height as usize, width as usize, t_bins);
    let dur = w.duration() as f64;
    for e in events.iter().filter(|e| w.contains(e.t)) {
        if e.x >= width || e.y >= height {
            continue;
        }
        let bin = (((e.t - w.t0()) as f64 / dur * t_bins as f64).floor() as usize).min(t_bins - 1);
        out.set(e.p.channel(), e.y as usize, e.x as usize, bin, true);
    }
    out
}

/// Spiking convolution. Weight shape `(out, in, k, k)`, no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SrmConvLayer {
    pub conv: Conv2d,
    pub params: SrmParams,
}

impl SrmConvLayer {
    pub fn new(weights: Tensor, stride: usize, pad: usize, params: SrmParams) -> Result<Self> {
        params.validate()?;
        let out = weights.shape().first().copied().unwrap_or(0);
        let conv = Conv2d::new(weights, Tensor::zeros(&[out]), stride, pad)?;
        let (kh, kw) = conv.kernel();
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("SRM kernels must be odd, got {kh}x{kw}")));
        }
        if !conv.weight.all_finite() {
            return Err(Error::Invalid("non-finite SRM weights".into()));
        }
        Ok(SrmConvLayer { conv, params })
    }

    pub fn random(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        params: SrmParams,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let w = Tensor::randn(&[out_ch, in_ch, kernel, kernel], std, rng);
        SrmConvLayer::new(w, stride, kernel / 2, params)
    }

    pub fn weights(&self) -> &Tensor {
        &self.conv.weight
    }

    /// Synaptic drive `W (v * s)` at every step, shape `(T, O, H', W')`
    /// flattened step-major.
    pub fn drive(&self, x: &SpikeTensor) -> Result<Vec<Tensor>> {
        let [c, _, _, t_bins] = x.shape();
        if c != self.conv.in_channels() {
            return Err(Error::Shape(format!(
                "SRM layer expects {} channels, got {c}",
                self.conv.in_channels()
            )));
        }
        // conv and the temporal filter commute; convolve the binary steps first
        let per_step = self.scatter_steps(x)?;
        let taps = SrmParams {
            t_bins,
            ..self.params
        }
        .v_taps();
        let mut out = Vec::with_capacity(t_bins);
        for k in 0..t_bins {
            let mut acc = Tensor::zeros(per_step[0].shape());
            for j in 0..=k {
                let tap = taps[k - j];
                if tap != 0.0 {
                    acc.axpy(tap, &per_step[j]);
                }
            }
            out.push(acc);
        }
        Ok(out)
    }

    /// `W s_k` for every step, accumulated by scattering each input spike's
    /// weight column into the output positions it reaches.
    fn scatter_steps(&self, x: &SpikeTensor) -> Result<Vec<Tensor>> {
        let [c_in, h, w, t_bins] = x.shape();
        let (oh, ow) = self
            .conv
            .out_dims(h, w)
            .ok_or_else(|| Error::Shape(format!("SRM kernel larger than {h}x{w} input")))?;
        let (kh, kw) = self.conv.kernel();
        let (s, p) = (self.conv.stride, self.conv.pad);
        let o = self.conv.out_channels();
        // weights regrouped as (c, ky, kx) -> column over output channels
        let wd = self.conv.weight.data();
        let cols: Vec<f64> = (0..c_in * kh * kw)
            .flat_map(|j| (0..o).map(move |oc| wd[oc * c_in * kh * kw + j]))
            .collect();
        let mut steps = vec![Tensor::zeros(&[o, oh, ow]); t_bins];
        let taps_for = |i: usize, k: usize, n_out: usize| -> Option<usize> {
            let v = i + p;
            (v >= k && (v - k).is_multiple_of(s) && (v - k) / s < n_out).then(|| (v - k) / s)
        };
        for c in 0..c_in {
            for y in 0..h {
                for xx in 0..w {
                    let base = ((c * h + y) * w + xx) * t_bins;
                    let train = &x.data()[base..base + t_bins];
                    if train.iter().all(|&b| b == 0) {
                        continue;
                    }
                    for ky in 0..kh {
                        let Some(oy) = taps_for(y, ky, oh) else { continue };
                        for kx in 0..kw {
                            let Some(ox) = taps_for(xx, kx, ow) else { continue };
                            let col = &cols[((c * kh + ky) * kw + kx) * o..][..o];
                            for (t, _) in train.iter().enumerate().filter(|(_, &b)| b != 0) {
                                let d = steps[t].data_mut();
                                for (oc, wv) in col.iter().enumerate() {
                                    d[(oc * oh + oy) * ow + ox] += wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(steps)
    }

    /// Thresholded output spikes.
    pub fn forward(&self, x: &SpikeTensor) -> Result<SpikeTensor> {
        Ok(self.forward_traced(x)?.0)
    }

    /// Output spikes plus the membrane potential at every step.
    pub fn forward_traced(&self, x: &SpikeTensor) -> Result<(SpikeTensor, Vec<Tensor>)> {
        let drive = self.drive(x)?;
        let t_bins = drive.len();
        let (o, h, w) = drive[0].chw()?;
        let mut spikes = SpikeTensor::zeros(o, h, w, t_bins);
        let phi = self.params.phi;
        let decay = (-self.params.dt / self.params.tau_r).exp();
        let mut refractory = vec![0.0; o * h * w];
        let mut potentials = Vec::with_capacity(t_bins);
        for (k, psp) in drive.into_iter().enumerate() {
            let mut eps = psp;
            for (i, (e, r)) in eps.data_mut().iter_mut().zip(refractory.iter_mut()).enumerate() {
                *e += *r;
                let fired = *e >= phi;
                if fired {
                    spikes.data[i * t_bins + k] = 1;
                }
                *r = decay * (*r - if fired { 2.0 * phi } else { 0.0 });
            }
            potentials.push(eps);
        }
        Ok((spikes, potentials))
    }
}

/// Arithmetic mean over the trailing time axis of a `(C, H, W, T)` tensor.
pub fn mean_over_time(x: &Tensor) -> Result<Tensor> {
    let [c, h, w, t] = *x.shape() else {
        return Err(Error::Shape(format!("expected (C, H, W, T), got {:?}", x.shape())));
    };
    if t == 0 {
        return Err(Error::Shape("empty time axis".into()));
    }
    let data = x.data().chunks_exact(t).map(|s| s.iter().sum::<f64>() / t as f64).collect();
    Tensor::from_vec(&[c, h, w], data)
}

impl From<&SpikeTensor> for Tensor {
    fn from(s: &SpikeTensor) -> Tensor {
        Tensor::from_vec(&s.shape(), s.data.iter().map(|&v| f64::from(v)).collect()).expect("consistent shape")
    }
}

/// Stack of spiking layers; the last layer supplies the un-thresholded drive.
#[derive(Debug, Clone, PartialEq)]
pub struct UeeNet {
    pub layers: Vec<SrmConvLayer>,
}

impl UeeNet {
    pub fn new(layers: Vec<SrmConvLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("the spiking branch needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].conv.out_channels() != pair[1].conv.in_channels() {
                return Err(Error::Shape(format!(
                    "SRM layer outputs {} channels but next layer expects {}",
                    pair[0].conv.out_channels(),
                    pair[1].conv.in_channels()
                )));
            }
        }
        Ok(UeeNet { layers })
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.conv.out_channels())
    }

    /// Spatial size of the output for an `h x w` input.
    pub fn out_dims(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        self.layers.iter().try_fold((h, w), |(h, w), l| l.conv.out_dims(h, w))
    }

    /// `mean_t(W_n (v * s_n)(t))` for input spikes `s_1`.
    pub fn forward(&self, input: &SpikeTensor) -> Result<Tensor> {
        let (last, hidden) = self.layers.split_last().expect("non-empty");
        let mut s = input.clone();
        for layer in hidden {
            s = layer.forward(&s)?;
        }
        let drive = last.drive(&s)?;
        let t = drive.len() as f64;
        let mut mean = Tensor::zeros(drive[0].shape());
        for d in &drive {
            mean.axpy(1.0 / t, d);
        }
        Ok(mean)
    }
}

/// Encodes a window of events and runs the spiking branch.
pub fn uee_forward(events: &[Event], w: TimeWindow, net: &UeeNet, geometry: (u32, u32)) -> Result<Tensor> {
    let params = net.layers[0].params;
    net.forward(&encode_events_to_spikes(events, w, &params, geometry))
}
