//! MDNet-style online tracking on top of the fused classifier: first-frame
//! fine-tuning of the fully connected head, Gaussian candidate search,
//! box regression and periodic updates from a bounded sample memory.

mod crop;
mod offline;
mod regress;
mod sampling;

use std::collections::VecDeque;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crop::{crop_bilinear, crop_input, crop_region, FrameObs};
pub use offline::{train_multi_domain, Domain, OfflineConfig};
pub use regress::{apply_deltas, box_deltas, BBoxRegressor};
pub use sampling::{
    draw_regression_samples, draw_training_samples, gaussian_sample_candidates, Geometry, Jitter, Sample,
    Thresholds, ATTEMPTS_PER_SAMPLE,
};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::events::{EventStream, TimeWindow};
use crate::frames::FrameSequence;
use crate::metrics::TrackResult;
use crate::net::McfrModel;
use crate::nn::{Sgd, SgdConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackerConfig {
    pub n_candidates: usize,
    pub candidate_jitter: Jitter,
    /// Crop side relative to the box side.
    pub context: f64,
    pub min_box_size: f64,
    pub thresholds: Thresholds,
    /// (positives, negatives) drawn on the first frame.
    pub init_samples: (usize, usize),
    /// (positives, negatives) drawn on each confidently tracked frame.
    pub update_samples: (usize, usize),
    /// Mini-batch composition for head fine-tuning.
    pub batch: (usize, usize),
    pub init_iters: usize,
    pub update_iters: usize,
    pub update_interval: usize,
    /// Most-recent (positive, negative) feature vectors kept for updates.
    pub memory: (usize, usize),
    pub bbreg_samples: usize,
    pub bbreg_iou: f64,
    pub bbreg_ridge: f64,
    pub sgd: SgdConfig,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        TrackerConfig {
            n_candidates: 256,
            candidate_jitter: Jitter::CANDIDATES,
            context: 1.4,
            min_box_size: 2.0,
            thresholds: Thresholds::default(),
            init_samples: (500, 5000),
            update_samples: (32, 96),
            batch: (32, 96),
            init_iters: 30,
            update_iters: 10,
            update_interval: 10,
            memory: (100, 300),
            bbreg_samples: 500,
            bbreg_iou: 0.6,
            bbreg_ridge: 0.1,
            sgd: SgdConfig {
                conv_lr: 0.0,
                fc_lr: 1e-3,
                fc6_lr: 1e-2,
                momentum: 0.9,
                weight_decay: 5e-4,
            },
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let (bp, bn) = self.batch;
        if self.n_candidates == 0 || bp == 0 || bn == 0 || self.update_interval == 0 {
            return Err(Error::Config("candidate, batch and interval counts must be positive".into()));
        }
        if !(self.context >= 1.0 && self.min_box_size > 0.0) {
            return Err(Error::Config("context must be >= 1 and min_box_size positive".into()));
        }
        Ok(())
    }
}

/// Index of the highest score; the lowest index wins ties.
pub fn select_best(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Event window preceding frame `i`. The first frame has no predecessor and
/// borrows the interval to the second frame.
pub fn frame_window(timestamps: &[u64], i: usize) -> Result<TimeWindow> {
    match (i, timestamps.len()) {
        (_, 0) => Err(Error::Invalid("no frame timestamps".into())),
        (0, 1) => TimeWindow::new(timestamps[0], timestamps[0] + 1),
        (0, _) => TimeWindow::new(timestamps[0], timestamps[1]),
        (i, n) if i < n => TimeWindow::new(timestamps[i - 1], timestamps[i]),
        (i, n) => Err(Error::Invalid(format!("frame {i} out of range for {n} frames"))),
    }
}

/// Per-frame outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub bbox: BBox,
    /// Positive-class logit of the chosen candidate.
    pub score: f64,
    /// The chosen candidate scored positive above negative.
    pub confident: bool,
    pub updated: bool,
}

/// Tracker state after first-frame initialization. The model carries a
/// single output branch and its convolutions never change.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    model: McfrModel,
    opt: Sgd,
    bbox: BBox,
    geo: Geometry,
    regressor: Option<BBoxRegressor>,
    pos_mem: VecDeque<Vec<f64>>,
    neg_mem: VecDeque<Vec<f64>>,
    frame: usize,
    updates: usize,
    init_accuracy: f64,
    rng: ChaCha8Rng,
}

impl Tracker {
    /// Replaces the domain heads with one fresh branch, fine-tunes the fully
    /// connected layers on first-frame samples and fits the box regressor.
    pub fn init_first_frame(
        mut model: McfrModel,
        obs: &FrameObs,
        gt: BBox,
        cfg: TrackerConfig,
        seed: u64,
    ) -> Result<Tracker> {
        cfg.validate()?;
        let gt = gt.validated()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        model.reset_domains(1, rng.gen())?;
        let geo = Geometry {
            min_size: cfg.min_box_size,
            ..Geometry::new(obs.width() as u32, obs.height() as u32)
        };
        let mut t = Tracker {
            opt: Sgd::new(cfg.sgd),
            cfg,
            model,
            bbox: gt,
            geo,
            regressor: None,
            pos_mem: VecDeque::new(),
            neg_mem: VecDeque::new(),
            frame: 0,
            updates: 0,
            init_accuracy: 0.0,
            rng,
        };
        let samples = draw_training_samples(&gt, geo, t.cfg.init_samples, t.cfg.thresholds, t.rng.gen())?;
        let (pos, neg) = t.labelled_features(obs, &samples)?;
        t.train(&pos, &neg, t.cfg.init_iters)?;
        let correct = |feats: &[Vec<f64>], positive: bool| -> Result<usize> {
            Ok(t.logits(feats)?.iter().filter(|l| (l[1] > l[0]) == positive).count())
        };
        t.init_accuracy = 0.5 * (correct(&pos, true)? as f64 / pos.len() as f64 + correct(&neg, false)? as f64 / neg.len() as f64);

        if t.cfg.bbreg_samples > 0 {
            let boxes = draw_regression_samples(&gt, geo, t.cfg.bbreg_samples, t.cfg.bbreg_iou, t.rng.gen())?;
            let feats = t.features(obs, &boxes)?;
            t.regressor = Some(BBoxRegressor::fit(&feats, &boxes, &gt, t.cfg.bbreg_ridge)?);
        }
        let (mp, mn) = t.cfg.memory;
        t.pos_mem.extend(pos.into_iter().take(mp));
        t.neg_mem.extend(neg.into_iter().take(mn));
        Ok(t)
    }

    pub fn model(&self) -> &McfrModel {
        &self.model
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    /// Current search center: the last winning candidate before regression.
    pub fn bbox(&self) -> BBox {
        self.bbox
    }

    pub fn frame(&self) -> usize {
        self.frame
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// Balanced accuracy (mean per-class recall) on the first-frame training
    /// samples after fine-tuning.
    pub fn init_accuracy(&self) -> f64 {
        self.init_accuracy
    }

    pub fn memory_len(&self) -> (usize, usize) {
        (self.pos_mem.len(), self.neg_mem.len())
    }

    pub fn regressor(&self) -> Option<&BBoxRegressor> {
        self.regressor.as_ref()
    }

    /// Fused features of each box, computed in parallel.
    pub fn features(&self, obs: &FrameObs, boxes: &[BBox]) -> Result<Vec<Vec<f64>>> {
        let crop = self.model.config().input_crop;
        boxes
            .par_iter()
            .map(|b| {
                let input = crop_input(obs, b, crop, self.cfg.context)?;
                self.model.features(&self.model.prepare(&input)?)
            })
            .collect()
    }

    fn labelled_features(&self, obs: &FrameObs, samples: &[Sample]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let boxes: Vec<BBox> = samples.iter().map(|s| s.bbox).collect();
        let feats = self.features(obs, &boxes)?;
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for (s, f) in samples.iter().zip(feats) {
            if s.positive {
                pos.push(f);
            } else {
                neg.push(f);
            }
        }
        Ok((pos, neg))
    }

    /// `(negative, positive)` logits of each feature vector.
    pub fn logits(&self, feats: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        feats.par_iter().map(|f| self.model.head(f, 0)).collect()
    }

    fn pick(&mut self, n: usize, k: usize) -> Vec<usize> {
        if n >= k {
            sample_indices(&mut self.rng, n, k).into_vec()
        } else {
            (0..k).map(|_| self.rng.gen_range(0..n)).collect()
        }
    }

    fn train(&mut self, pos: &[Vec<f64>], neg: &[Vec<f64>], iters: usize) -> Result<()> {
        if pos.is_empty() || neg.is_empty() {
            return Ok(());
        }
        let (bp, bn) = self.cfg.batch;
        for _ in 0..iters {
            let pi = self.pick(pos.len(), bp);
            let ni = self.pick(neg.len(), bn);
            let batch: Vec<(&[f64], usize)> = pi
                .iter()
                .map(|&i| (pos[i].as_slice(), 1))
                .chain(ni.iter().map(|&i| (neg[i].as_slice(), 0)))
                .collect();
            self.model.train_head_step(&batch, 0, &mut self.opt)?;
        }
        Ok(())
    }

    /// Scores candidates around the previous box, moves to the best one,
    /// collects new samples when confident and runs the update schedule.
    pub fn track_frame(&mut self, obs: &FrameObs) -> Result<Step> {
        if (obs.width(), obs.height()) != (self.geo.width as usize, self.geo.height as usize) {
            return Err(Error::Shape("frame size changed during tracking".into()));
        }
        let candidates = gaussian_sample_candidates(
            &self.bbox,
            self.cfg.n_candidates,
            self.geo,
            self.cfg.candidate_jitter,
            self.rng.gen(),
        );
        let feats = self.features(obs, &candidates)?;
        let logits = self.logits(&feats)?;
        let scores: Vec<f64> = logits.iter().map(|l| l[1]).collect();
        let best = select_best(&scores).expect("at least one candidate");
        let confident = logits[best][1] > logits[best][0];
        // The regressed box is reported; search and sampling stay on the raw
        // winner so regression errors do not accumulate across frames.
        self.bbox = candidates[best];
        let mut bbox = self.bbox;
        if confident {
            if let Some(r) = &self.regressor {
                bbox = self.geo.clip(&r.refine(&feats[best], &bbox));
            }
        }
        self.frame += 1;

        if confident {
            let seed = self.rng.gen();
            match draw_training_samples(&self.bbox, self.geo, self.cfg.update_samples, self.cfg.thresholds, seed) {
                Ok(samples) => {
                    let (pos, neg) = self.labelled_features(obs, &samples)?;
                    self.remember(pos, neg);
                }
                Err(Error::Quota(_)) => {}
                Err(e) => return Err(e),
            }
        }
        let updated = self.online_update()?;
        Ok(Step {
            bbox,
            score: scores[best],
            confident,
            updated,
        })
    }

    fn remember(&mut self, pos: Vec<Vec<f64>>, neg: Vec<Vec<f64>>) {
        let (mp, mn) = self.cfg.memory;
        self.pos_mem.extend(pos);
        self.neg_mem.extend(neg);
        while self.pos_mem.len() > mp {
            self.pos_mem.pop_front();
        }
        while self.neg_mem.len() > mn {
            self.neg_mem.pop_front();
        }
    }

    /// Fine-tunes the head on the sample memory every `update_interval`
    /// tracked frames. Returns whether an update ran.
    pub fn online_update(&mut self) -> Result<bool> {
        if self.frame == 0 || !self.frame.is_multiple_of(self.cfg.update_interval) {
            return Ok(false);
        }
        let pos: Vec<Vec<f64>> = self.pos_mem.iter().cloned().collect();
        let neg: Vec<Vec<f64>> = self.neg_mem.iter().cloned().collect();
        self.train(&pos, &neg, self.cfg.update_iters)?;
        self.updates += 1;
        Ok(true)
    }

    /// Positive logit of a box under the current head.
    pub fn score(&self, obs: &FrameObs, b: &BBox) -> Result<f64> {
        let f = self.features(obs, std::slice::from_ref(b))?;
        Ok(self.model.head(&f[0], 0)?[1])
    }
}

/// One-pass tracking of a whole sequence from the first ground-truth box.
/// Frame 0 reports the initial box with its post-initialization score.
pub fn track_sequence(
    model: McfrModel,
    seq: &FrameSequence,
    events: &EventStream,
    init: BBox,
    cfg: TrackerConfig,
    seed: u64,
    name: &str,
) -> Result<TrackResult> {
    if seq.is_empty() {
        return Err(Error::Invalid("empty sequence".into()));
    }
    let ts = seq.timestamps();
    let obs0 = FrameObs::new(&seq.frames()[0], events, frame_window(ts, 0)?, &model)?;
    let mut tracker = Tracker::init_first_frame(model, &obs0, init, cfg, seed)?;
    let mut boxes = vec![init];
    let mut scores = vec![tracker.score(&obs0, &init)?];
    for (i, frame) in seq.frames().iter().enumerate().skip(1) {
        let obs = FrameObs::new(frame, events, frame_window(ts, i)?, tracker.model())?;
        let step = tracker.track_frame(&obs)?;
        boxes.push(step.bbox);
        scores.push(step.score);
    }
    Ok(TrackResult {
        sequence: name.to_string(),
        boxes,
        scores,
    })
}
