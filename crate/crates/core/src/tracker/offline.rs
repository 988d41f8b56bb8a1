//! Offline multi-domain training. Every training sequence is its own domain
//! with its own fc6 branch; iterations cycle through the domains, each
//! drawing a mini-batch of labelled crops from a few random frames.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{crop_input, draw_training_samples, frame_window, FrameObs, Geometry, Thresholds};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::events::EventStream;
use crate::frames::FrameSequence;
use crate::net::{McfrModel, Prepared, TrainSample};
use crate::nn::{Sgd, SgdConfig};

/// One training sequence with ground truth and its event stream.
#[derive(Debug, Clone, Copy)]
pub struct Domain<'a> {
    pub seq: &'a FrameSequence,
    pub gt: &'a [BBox],
    pub events: &'a EventStream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OfflineConfig {
    /// Total SGD steps, spread round-robin over the domains.
    pub iterations: usize,
    pub frames_per_batch: usize,
    /// (positives, negatives) per frame.
    pub samples_per_frame: (usize, usize),
    pub thresholds: Thresholds,
    pub context: f64,
    pub sgd: SgdConfig,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        OfflineConfig {
            iterations: 20,
            frames_per_batch: 8,
            samples_per_frame: (32, 96),
            thresholds: Thresholds::default(),
            context: 1.4,
            sgd: SgdConfig::default(),
        }
    }
}

/// Runs `cfg.iterations` steps; step `i` trains domain `i % k`. Returns the
/// batch loss of every step.
pub fn train_multi_domain(
    model: &mut McfrModel,
    domains: &[Domain],
    cfg: &OfflineConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    if domains.len() != model.num_domains() {
        return Err(Error::Config(format!(
            "{} training sequences for a model with {} domains",
            domains.len(),
            model.num_domains()
        )));
    }
    if cfg.frames_per_batch == 0 || cfg.samples_per_frame.0 == 0 || cfg.samples_per_frame.1 == 0 {
        return Err(Error::Config("empty training batch".into()));
    }
    for (k, d) in domains.iter().enumerate() {
        if d.seq.is_empty() || d.gt.len() != d.seq.len() {
            return Err(Error::Invalid(format!(
                "domain {k}: {} frames, {} ground-truth boxes",
                d.seq.len(),
                d.gt.len()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Sgd::new(cfg.sgd);
    let crop = model.config().input_crop;
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let k = it % domains.len();
        let d = domains[k];
        let n = d.seq.len();
        let frames = if n >= cfg.frames_per_batch {
            sample_indices(&mut rng, n, cfg.frames_per_batch).into_vec()
        } else {
            (0..cfg.frames_per_batch).map(|_| rng.gen_range(0..n)).collect()
        };
        let geo = Geometry::new(d.seq.width(), d.seq.height());
        let mut prepared: Vec<(Prepared, usize)> = Vec::new();
        for i in frames {
            let samples = match draw_training_samples(&d.gt[i], geo, cfg.samples_per_frame, cfg.thresholds, rng.gen()) {
                Ok(s) => s,
                Err(Error::Quota(_)) => continue,
                Err(e) => return Err(e),
            };
            let obs = FrameObs::new(&d.seq.frames()[i], d.events, frame_window(d.seq.timestamps(), i)?, model)?;
            let m = &*model;
            let batch: Vec<(Prepared, usize)> = samples
                .par_iter()
                .map(|s| Ok((m.prepare(&crop_input(&obs, &s.bbox, crop, cfg.context)?)?, usize::from(s.positive))))
                .collect::<Result<_>>()?;
            prepared.extend(batch);
        }
        if prepared.is_empty() {
            return Err(Error::Quota(format!("domain {k}: no frame yielded a full sample set")));
        }
        let batch: Vec<TrainSample> = prepared
            .iter()
            .map(|(p, label)| TrainSample {
                input: p,
                label: *label,
                domain: k,
            })
            .collect();
        losses.push(model.train_step(&batch, &mut opt)?);
    }
    Ok(losses)
}
