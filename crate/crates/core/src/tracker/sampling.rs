use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};

/// Gaussian perturbation of a box: center shift with std
/// `trans_sigma * mean(w, h)` per axis, size scaled by
/// `scale_base ^ (scale_sigma * N(0, 1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Jitter {
    pub trans_sigma: f64,
    pub scale_sigma: f64,
    pub scale_base: f64,
}

impl Jitter {
    pub const CANDIDATES: Jitter = Jitter {
        trans_sigma: 0.09,
        scale_sigma: 0.5,
        scale_base: 1.05,
    };

    fn apply(&self, b: &BBox, rng: &mut impl Rng) -> BBox {
        let (cx, cy) = b.center();
        let sigma = self.trans_sigma * (b.w + b.h) / 2.0;
        let zx: f64 = rng.sample(StandardNormal);
        let zy: f64 = rng.sample(StandardNormal);
        let zs: f64 = rng.sample(StandardNormal);
        let s = self.scale_base.powf(self.scale_sigma * zs);
        BBox::from_center(cx + sigma * zx, cy + sigma * zy, b.w * s, b.h * s)
    }
}

/// Image extent plus the smallest side a clipped box may shrink to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Geometry {
    pub width: f64,
    pub height: f64,
    pub min_size: f64,
}

impl Geometry {
    pub fn new(width: u32, height: u32) -> Self {
        Geometry {
            width: f64::from(width),
            height: f64::from(height),
            min_size: 2.0,
        }
    }

    pub fn clip(&self, b: &BBox) -> BBox {
        b.clip_to(self.width, self.height, self.min_size)
    }
}

/// `n` candidate boxes around `prev`, clipped to the image.
pub fn gaussian_sample_candidates(prev: &BBox, n: usize, geo: Geometry, jitter: Jitter, seed: u64) -> Vec<BBox> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| geo.clip(&jitter.apply(prev, &mut rng))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub bbox: BBox,
    pub positive: bool,
    pub iou: f64,
}

/// Overlap rules for labelled samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Positives need IoU strictly above this.
    pub pos_iou: f64,
    /// Negatives need IoU strictly below this.
    pub neg_iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            pos_iou: 0.7,
            neg_iou: 0.5,
        }
    }
}

const POS_JITTER: Jitter = Jitter {
    trans_sigma: 0.1,
    scale_sigma: 0.5,
    scale_base: 1.05,
};

/// Proposal budget per requested sample before giving up.
pub const ATTEMPTS_PER_SAMPLE: usize = 100;

fn negative_proposal(gt: &BBox, geo: Geometry, rng: &mut impl Rng) -> BBox {
    let (cx, cy) = gt.center();
    let zs: f64 = rng.sample(StandardNormal);
    let s = 1.05f64.powf(zs);
    let (w, h) = (gt.w * s, gt.h * s);
    if rng.gen_bool(0.5) {
        // around the target
        let dx = rng.gen_range(-1.5..1.5) * gt.w;
        let dy = rng.gen_range(-1.5..1.5) * gt.h;
        BBox::from_center(cx + dx, cy + dy, w, h)
    } else {
        // anywhere in the image
        BBox::from_center(rng.gen_range(0.0..geo.width), rng.gen_range(0.0..geo.height), w, h)
    }
}

fn fill(
    n: usize,
    what: &str,
    rng: &mut ChaCha8Rng,
    mut propose: impl FnMut(&mut ChaCha8Rng) -> BBox,
    gt: &BBox,
    keep: impl Fn(f64) -> bool,
    positive: bool,
) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(n);
    let budget = n.saturating_mul(ATTEMPTS_PER_SAMPLE).max(ATTEMPTS_PER_SAMPLE);
    for _ in 0..budget {
        if out.len() == n {
            break;
        }
        let b = propose(rng);
        let o = iou(&b, gt);
        if keep(o) {
            out.push(Sample { bbox: b, positive, iou: o });
        }
    }
    if out.len() < n {
        return Err(Error::Quota(format!(
            "found {} of {n} {what} samples around {gt:?} within {budget} proposals",
            out.len()
        )));
    }
    Ok(out)
}

/// Rejection-samples exactly `n_pos` positives then `n_neg` negatives.
pub fn draw_training_samples(
    gt: &BBox,
    geo: Geometry,
    (n_pos, n_neg): (usize, usize),
    th: Thresholds,
    seed: u64,
) -> Result<Vec<Sample>> {
    let gt = gt.validated()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = fill(
        n_pos,
        "positive",
        &mut rng,
        |r| geo.clip(&POS_JITTER.apply(&gt, r)),
        &gt,
        |o| o > th.pos_iou,
        true,
    )?;
    out.extend(fill(
        n_neg,
        "negative",
        &mut rng,
        |r| geo.clip(&negative_proposal(&gt, geo, r)),
        &gt,
        |o| o < th.neg_iou,
        false,
    )?);
    Ok(out)
}

const REGRESSION_JITTER: Jitter = Jitter {
    trans_sigma: 0.3,
    scale_sigma: 1.5,
    scale_base: 1.05,
};

/// Boxes with IoU above `min_iou` for fitting the box regressor; widths and
/// heights are perturbed independently so aspect changes are covered.
pub fn draw_regression_samples(gt: &BBox, geo: Geometry, n: usize, min_iou: f64, seed: u64) -> Result<Vec<BBox>> {
    let gt = gt.validated()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = fill(
        n,
        "regression",
        &mut rng,
        |r| {
            let b = REGRESSION_JITTER.apply(&gt, r);
            let za: f64 = r.sample(StandardNormal);
            let a = 1.05f64.powf(0.5 * za);
            let (cx, cy) = b.center();
            geo.clip(&BBox::from_center(cx, cy, b.w * a, b.h / a))
        },
        &gt,
        |o| o > min_iou,
        true,
    )?;
    Ok(samples.into_iter().map(|s| s.bbox).collect())
}
