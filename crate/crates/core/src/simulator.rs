//! Frame-to-event synthesis, exposure perturbation and toy tracking scenes.
//!
//! Event generation follows the contrast-threshold model: each pixel keeps a
//! reference log intensity, log intensity is interpolated linearly between
//! frames, and every time it moves one threshold away from the reference an
//! event is emitted at the interpolated crossing time and the reference
//! steps by that threshold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::events::{Event, EventStream, Polarity};
use crate::frames::{Frame, FrameSequence};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub c_pos: f64,
    pub c_neg: f64,
    /// Added to the 0-255 intensity before taking the log.
    pub log_eps: f64,
    /// Std of the per-pixel Gaussian jitter applied to both thresholds.
    pub threshold_noise_std: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            c_pos: 0.15,
            c_neg: 0.15,
            log_eps: 1.0,
            threshold_noise_std: 0.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.c_pos > 0.0 && self.c_neg > 0.0 && self.log_eps > 0.0 && self.threshold_noise_std >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid simulator config {self:?}")))
        }
    }
}

/// Per-pixel log intensity `ln(I + log_eps)` of every frame.
pub fn log_intensity(frame: &Frame, log_eps: f64) -> Vec<f64> {
    frame.luminance().into_iter().map(|v| (v + log_eps).ln()).collect()
}

/// Synthesizes the event stream for a frame sequence.
pub fn frames_to_events(fs: &FrameSequence, cfg: &SimConfig, seed: u64) -> Result<EventStream> {
    cfg.validate()?;
    if fs.len() < 2 {
        return Err(Error::Invalid(format!(
            "event synthesis needs at least 2 frames, got {}",
            fs.len()
        )));
    }
    let (width, height) = (fs.width(), fs.height());
    let n = width as usize * height as usize;
    let logs: Vec<Vec<f64>> = fs.frames().iter().map(|f| log_intensity(f, cfg.log_eps)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let thresholds: Vec<(f64, f64)> = if cfg.threshold_noise_std > 0.0 {
        let jitter = Normal::new(0.0, cfg.threshold_noise_std).expect("std validated");
        (0..n)
            .map(|_| {
                let cp = (cfg.c_pos + jitter.sample(&mut rng)).max(0.1 * cfg.c_pos);
                let cn = (cfg.c_neg + jitter.sample(&mut rng)).max(0.1 * cfg.c_neg);
                (cp, cn)
            })
            .collect()
    } else {
        vec![(cfg.c_pos, cfg.c_neg); n]
    };

    let ts = fs.timestamps();
    let mut events: Vec<Event> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let (x, y) = ((i % width as usize) as u32, (i / width as usize) as u32);
            let series: Vec<f64> = logs.iter().map(|l| l[i]).collect();
            pixel_events(&series, ts, thresholds[i])
                .into_iter()
                .map(move |(t, p)| Event::new(t, x, y, p))
        })
        .collect();
    events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
    EventStream::new(events, width, height)
}

/// Threshold crossings of one pixel's log-intensity series.
///
/// Timestamps between frames `k` and `k+1` fall in `[ts[k], ts[k+1])`.
pub fn pixel_events(series: &[f64], ts: &[u64], (c_pos, c_neg): (f64, f64)) -> Vec<(u64, Polarity)> {
    let mut out = Vec::new();
    let Some(&first) = series.first() else {
        return out;
    };
    let mut reference = first;
    for k in 0..series.len().saturating_sub(1) {
        let (l0, l1) = (series[k], series[k + 1]);
        let (t0, t1) = (ts[k], ts[k + 1]);
        let span = (t1 - t0) as f64;
        let stamp = |frac: f64| (t0 + (frac * span).floor() as u64).min(t1 - 1);
        if l1 > l0 {
            while l1 - reference >= c_pos {
                reference += c_pos;
                out.push((stamp((reference - l0) / (l1 - l0)), Polarity::Pos));
            }
        } else if l1 < l0 {
            while reference - l1 >= c_neg {
                reference -= c_neg;
                out.push((stamp((l0 - reference) / (l0 - l1)), Polarity::Neg));
            }
        }
    }
    out
}

/// How per-frame exposure gains are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExposureMode {
    /// Every frame gets an under-exposure gain.
    Under,
    /// Every frame gets an over-exposure gain.
    Over,
    /// Consecutive groups of `group_len` frames share a direction and gain,
    /// the direction drawn uniformly per group.
    Random { group_len: usize },
    /// The same gain for all frames.
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExposureConfig {
    /// Gains below 1, sampled log-uniformly.
    pub gain_range_under: (f64, f64),
    /// Gains above 1, sampled log-uniformly.
    pub gain_range_over: (f64, f64),
    pub mode: ExposureMode,
}

impl Default for ExposureConfig {
    fn default() -> Self {
        ExposureConfig {
            gain_range_under: (0.125, 0.5),
            gain_range_over: (2.0, 8.0),
            mode: ExposureMode::Random { group_len: 1 },
        }
    }
}

impl ExposureConfig {
    pub fn with_mode(mode: ExposureMode) -> Self {
        ExposureConfig {
            mode,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let ranges = [self.gain_range_under, self.gain_range_over];
        let ok_ranges = ranges.iter().all(|&(lo, hi)| lo > 0.0 && lo <= hi);
        let ok_mode = match self.mode {
            ExposureMode::Fixed(g) => g > 0.0,
            ExposureMode::Random { group_len } => group_len > 0,
            _ => true,
        };
        if ok_ranges && ok_mode {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid exposure config {self:?}")))
        }
    }
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    rng.gen_range(lo.ln()..hi.ln()).exp()
}

/// The gain applied to each frame.
pub fn exposure_gains(n_frames: usize, cfg: &ExposureConfig, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gains = match cfg.mode {
        ExposureMode::Fixed(g) => vec![g; n_frames],
        ExposureMode::Under => (0..n_frames).map(|_| log_uniform(&mut rng, cfg.gain_range_under)).collect(),
        ExposureMode::Over => (0..n_frames).map(|_| log_uniform(&mut rng, cfg.gain_range_over)).collect(),
        ExposureMode::Random { group_len } => {
            let mut gains = Vec::with_capacity(n_frames);
            while gains.len() < n_frames {
                let range = if rng.gen_bool(0.5) {
                    cfg.gain_range_under
                } else {
                    cfg.gain_range_over
                };
                let g = log_uniform(&mut rng, range);
                let take = group_len.min(n_frames - gains.len());
                gains.extend(std::iter::repeat_n(g, take));
            }
            gains
        }
    };
    Ok(gains)
}

/// Scales every pixel by a per-frame gain with rounding and clamping.
pub fn perturb_exposure(fs: &FrameSequence, cfg: &ExposureConfig, seed: u64) -> Result<FrameSequence> {
    let gains = exposure_gains(fs.len(), cfg, seed)?;
    let frames = fs
        .frames()
        .iter()
        .zip(&gains)
        .map(|(f, &g)| {
            let mut out = f.clone();
            for v in out.data_mut() {
                *v = (g * f64::from(*v)).round().clamp(0.0, 255.0) as u8;
            }
            out
        })
        .collect();
    FrameSequence::new(frames, fs.timestamps().to_vec())
}

/// Object trajectory, evaluated at frame index `i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "type")]
pub enum Motion {
    Static,
    /// Constant velocity in pixels per frame (sub-pixel positions allowed).
    Linear { vx: f64, vy: f64 },
    /// Horizontal drift `vx` plus a vertical sinusoid rounded to whole pixels.
    Sine { vx: f64, amplitude: f64, period: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub object_w: f64,
    pub object_h: f64,
    /// Top-left corner in frame 0.
    pub x0: f64,
    pub y0: f64,
    pub motion: Motion,
    pub frames: usize,
    pub frame_interval_us: u64,
    pub t_start_us: u64,
    pub textured_background: bool,
    pub color: bool,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            object_w: 12.0,
            object_h: 12.0,
            x0: 4.0,
            y0: 26.0,
            motion: Motion::Linear { vx: 0.75, vy: 0.0 },
            frames: 60,
            frame_interval_us: 10_000,
            t_start_us: 0,
            textured_background: true,
            color: false,
        }
    }
}

impl SceneSpec {
    /// Ground-truth box at frame `i`.
    pub fn box_at(&self, i: usize) -> BBox {
        let fi = i as f64;
        let (x, y) = match self.motion {
            Motion::Static => (self.x0, self.y0),
            Motion::Linear { vx, vy } => (self.x0 + vx * fi, self.y0 + vy * fi),
            Motion::Sine { vx, amplitude, period } => (
                self.x0 + vx * fi,
                (self.y0 + amplitude * (std::f64::consts::TAU * fi / period).sin()).round(),
            ),
        };
        BBox::new(x, y, self.object_w, self.object_h)
    }
}

/// Renders a bright textured rectangle over an optional textured background.
///
/// Edge pixels blend object and background by covered area, so ground truth
/// is exact for sub-pixel positions.
pub fn gen_synthetic_sequence(spec: &SceneSpec, seed: u64) -> Result<(FrameSequence, Vec<BBox>)> {
    if spec.object_w <= 0.0 || spec.object_h <= 0.0 {
        return Err(Error::Invalid("object size must be positive".into()));
    }
    if spec.object_w > f64::from(spec.width) || spec.object_h > f64::from(spec.height) {
        return Err(Error::Invalid(format!(
            "object {}x{} larger than canvas {}x{}",
            spec.object_w, spec.object_h, spec.width, spec.height
        )));
    }
    if spec.frames == 0 || spec.frame_interval_us == 0 {
        return Err(Error::Invalid("scene needs frames and a positive frame interval".into()));
    }
    if let Motion::Sine { period, .. } = spec.motion {
        if period <= 0.0 {
            return Err(Error::Invalid("sine period must be positive".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (spec.width as usize, spec.height as usize);
    let background: Vec<f64> = if spec.textured_background {
        let waves: Vec<(f64, f64, f64, f64)> = (0..4)
            .map(|_| {
                (
                    rng.gen_range(0.05..0.35),
                    rng.gen_range(0.05..0.35),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(6.0..14.0),
                )
            })
            .collect();
        (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                75.0 + waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x + fy * y + ph).sin()).sum::<f64>()
            })
            .collect()
    } else {
        vec![60.0; w * h]
    };
    // object texture: 3 px checker, 190 / 235
    let object_value = |u: f64, v: f64| {
        if ((u / 3.0).floor() as i64 + (v / 3.0).floor() as i64) % 2 == 0 {
            235.0
        } else {
            190.0
        }
    };
    let tint = [1.0, 0.55, 0.35];

    let mut frames = Vec::with_capacity(spec.frames);
    let mut boxes = Vec::with_capacity(spec.frames);
    for i in 0..spec.frames {
        let b = spec.box_at(i);
        let mut gray = background.clone();
        let x_lo = b.x.floor().max(0.0) as usize;
        let y_lo = b.y.floor().max(0.0) as usize;
        let x_hi = (b.right().ceil().max(0.0) as usize).min(w);
        let y_hi = (b.bottom().ceil().max(0.0) as usize).min(h);
        for py in y_lo..y_hi {
            for px in x_lo..x_hi {
                let cov = BBox::new(px as f64, py as f64, 1.0, 1.0).intersection_area(&b);
                if cov > 0.0 {
                    let (u, v) = (px as f64 + 0.5 - b.x, py as f64 + 0.5 - b.y);
                    let idx = py * w + px;
                    gray[idx] = gray[idx] * (1.0 - cov) + object_value(u, v) * cov;
                }
            }
        }
        let frame = if spec.color {
            let data = gray
                .iter()
                .flat_map(|&g| tint.map(|t| (g * t + (1.0 - t) * 40.0).round().clamp(0.0, 255.0) as u8))
                .collect();
            Frame::new(spec.width, spec.height, 3, data)?
        } else {
            Frame::gray(
                spec.width,
                spec.height,
                gray.iter().map(|&g| g.round().clamp(0.0, 255.0) as u8).collect(),
            )?
        };
        frames.push(frame);
        boxes.push(b);
    }
    let timestamps = (0..spec.frames as u64)
        .map(|i| spec.t_start_us + i * spec.frame_interval_us)
        .collect();
    Ok((FrameSequence::new(frames, timestamps)?, boxes))
}
