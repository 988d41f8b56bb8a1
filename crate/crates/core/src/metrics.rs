//! One-pass evaluation curves and the repeated-run AP/AR protocol.

use serde::{Deserialize, Serialize};

use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};

/// Center-error thresholds 0..=50 px.
pub fn pr_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

/// Overlap thresholds 0, 0.05, ..., 1.
pub fn sr_thresholds() -> Vec<f64> {
    (0..=20).map(|i| f64::from(i) / 20.0).collect()
}

pub const PR_REPORT_THRESHOLD: f64 = 20.0;
/// Round/object runs whose mean IoU falls below this count as failures.
pub const SUCCESS_MEAN_IOU: f64 = 0.5;

/// Per-frame predictions for one sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackResult {
    pub sequence: String,
    pub boxes: Vec<BBox>,
    pub scores: Vec<f64>,
}

impl TrackResult {
    /// `x,y,w,h,score` per line with six decimals.
    pub fn to_lines(&self) -> String {
        self.boxes
            .iter()
            .zip(&self.scores)
            .map(|(b, s)| format!("{:.6},{:.6},{:.6},{:.6},{:.6}\n", b.x, b.y, b.w, b.h, s))
            .collect()
    }
}

fn check_pair(pred: &[BBox], gt: &[BBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} ground-truth frames",
            pred.len(),
            gt.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Invalid("no frames to evaluate".into()));
    }
    Ok(())
}

/// Precision and success curves plus their summary scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrSr {
    /// Fraction of frames with center error `<= θ`, θ in [`pr_thresholds`].
    pub pr_curve: Vec<f64>,
    /// Fraction of frames with IoU `> θ`, θ in [`sr_thresholds`].
    pub sr_curve: Vec<f64>,
    pub pr_at_20: f64,
    /// Mean of the success curve.
    pub sr_auc: f64,
}

pub fn precision_success(pred: &[BBox], gt: &[BBox]) -> Result<PrSr> {
    check_pair(pred, gt)?;
    let n = pred.len() as f64;
    let dists: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| p.center_distance(g)).collect();
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let frac = |hits: usize| hits as f64 / n;
    let pr_at = |th: f64| frac(dists.iter().filter(|&&d| d <= th).count());
    let pr_curve: Vec<f64> = pr_thresholds().into_iter().map(pr_at).collect();
    let sr_curve: Vec<f64> = sr_thresholds()
        .into_iter()
        .map(|th| frac(ious.iter().filter(|&&o| o > th).count()))
        .collect();
    let sr_auc = sr_curve.iter().sum::<f64>() / sr_curve.len() as f64;
    Ok(PrSr {
        pr_at_20: pr_at(PR_REPORT_THRESHOLD),
        pr_curve,
        sr_curve,
        sr_auc,
    })
}

pub fn mean_iou(pred: &[BBox], gt: &[BBox]) -> Result<f64> {
    check_pair(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| iou(p, g)).sum::<f64>() / pred.len() as f64)
}

/// `rounds[a][b]` is the prediction of round `a` on object `b`; returns the
/// `N x M` table of per-sequence mean IoUs.
fn round_table(rounds: &[Vec<Vec<BBox>>], gt: &[Vec<BBox>]) -> Result<Vec<Vec<f64>>> {
    if rounds.is_empty() || gt.is_empty() {
        return Err(Error::Invalid("need at least one round and one object".into()));
    }
    rounds
        .iter()
        .enumerate()
        .map(|(a, objects)| {
            if objects.len() != gt.len() {
                return Err(Error::Invalid(format!(
                    "round {a} has {} objects, expected {}",
                    objects.len(),
                    gt.len()
                )));
            }
            objects.iter().zip(gt).map(|(p, g)| mean_iou(p, g)).collect()
        })
        .collect()
}

/// Mean over rounds and objects of the per-sequence mean IoU.
pub fn average_precision(rounds: &[Vec<Vec<BBox>>], gt: &[Vec<BBox>]) -> Result<f64> {
    let table = round_table(rounds, gt)?;
    let cells = (table.len() * gt.len()) as f64;
    Ok(table.iter().flatten().sum::<f64>() / cells)
}

/// Fraction of (round, object) runs whose mean IoU reaches
/// [`SUCCESS_MEAN_IOU`].
pub fn average_robustness(rounds: &[Vec<Vec<BBox>>], gt: &[Vec<BBox>]) -> Result<f64> {
    let table = round_table(rounds, gt)?;
    let cells = table.len() * gt.len();
    let ok = table.iter().flatten().filter(|&&m| m >= SUCCESS_MEAN_IOU).count();
    Ok(ok as f64 / cells as f64)
}

/// Evaluation summary; serializes with a fixed key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub config_fingerprint: Option<String>,
    pub frames: usize,
    pub pr_thresholds: Vec<f64>,
    pub pr_curve: Vec<f64>,
    pub sr_thresholds: Vec<f64>,
    pub sr_curve: Vec<f64>,
    pub pr_at_20: f64,
    pub sr_auc: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rounds: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ar: Option<f64>,
}

impl EvalReport {
    /// Curves for a single prediction/ground-truth pair.
    pub fn prsr(pred: &[BBox], gt: &[BBox]) -> Result<Self> {
        let c = precision_success(pred, gt)?;
        Ok(EvalReport {
            config_fingerprint: None,
            frames: pred.len(),
            pr_thresholds: pr_thresholds(),
            pr_curve: c.pr_curve,
            sr_thresholds: sr_thresholds(),
            sr_curve: c.sr_curve,
            pr_at_20: c.pr_at_20,
            sr_auc: c.sr_auc,
            rounds: None,
            ap: None,
            ar: None,
        })
    }

    /// AP and AR over repeated rounds; the curves pool every frame of every
    /// round and object.
    pub fn apar(rounds: &[Vec<Vec<BBox>>], gt: &[Vec<BBox>]) -> Result<Self> {
        let ap = average_precision(rounds, gt)?;
        let ar = average_robustness(rounds, gt)?;
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for objects in rounds {
            for (p, g) in objects.iter().zip(gt) {
                pred.extend_from_slice(p);
                truth.extend_from_slice(g);
            }
        }
        let mut r = EvalReport::prsr(&pred, &truth)?;
        r.rounds = Some(rounds.len());
        r.ap = Some(ap);
        r.ar = Some(ar);
        Ok(r)
    }

    pub fn with_fingerprint(mut self, fp: impl Into<String>) -> Self {
        self.config_fingerprint = Some(fp.into());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `curve,threshold,value` rows for plotting.
    pub fn curves_csv(&self) -> String {
        let mut out = String::from("curve,threshold,value\n");
        for (t, v) in self.pr_thresholds.iter().zip(&self.pr_curve) {
            out.push_str(&format!("precision,{t},{v}\n"));
        }
        for (t, v) in self.sr_thresholds.iter().zip(&self.sr_curve) {
            out.push_str(&format!("success,{t},{v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn boxes() -> impl Strategy<Value = BBox> {
        (0.0..80.0f64, 0.0..80.0f64, 1.0..30.0f64, 1.0..30.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, w, h))
    }

    #[test]
    fn perfect_predictions() {
        let gt = vec![BBox::new(1.0, 2.0, 10.0, 8.0), BBox::new(3.0, 2.0, 5.0, 5.0)];
        let c = precision_success(&gt, &gt).unwrap();
        assert!(c.pr_curve.iter().all(|&v| v == 1.0));
        let ths = sr_thresholds();
        for (t, v) in ths.iter().zip(&c.sr_curve) {
            assert_eq!(*v, if *t < 1.0 { 1.0 } else { 0.0 });
        }
        let rounds = vec![vec![gt.clone()]; 3];
        assert_eq!(average_precision(&rounds, std::slice::from_ref(&gt)).unwrap(), 1.0);
        assert_eq!(average_robustness(&rounds, &[gt]).unwrap(), 1.0);
    }

    #[test]
    fn far_disjoint_predictions() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 3];
        let pred = vec![BBox::new(100.0, 100.0, 10.0, 10.0); 3];
        let c = precision_success(&pred, &gt).unwrap();
        assert_eq!(c.pr_at_20, 0.0);
        assert_eq!(c.sr_auc, 0.0);
    }

    #[test]
    fn one_exact_one_far() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0); 2];
        let pred = vec![gt[0], BBox::new(200.0, 0.0, 10.0, 10.0)];
        let c = precision_success(&pred, &gt).unwrap();
        assert_eq!(c.pr_at_20, 0.5);
        assert_eq!(c.sr_curve[10], 0.5);
    }

    #[test]
    fn third_overlap_every_frame() {
        let gt = vec![vec![BBox::new(0.0, 0.0, 2.0, 2.0); 4]];
        let pred = vec![vec![vec![BBox::new(1.0, 0.0, 2.0, 2.0); 4]]];
        assert_eq!(average_precision(&pred, &gt).unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn ap_averages_rounds() {
        let g = BBox::new(0.0, 0.0, 4.0, 4.0);
        let far = BBox::new(50.0, 50.0, 4.0, 4.0);
        let gt = vec![vec![g; 3]];
        let rounds = vec![vec![vec![g; 3]], vec![vec![far; 3]]];
        assert_eq!(average_precision(&rounds, &gt).unwrap(), 0.5);
        assert_eq!(average_robustness(&rounds, &gt).unwrap(), 0.5);
        let alt = vec![rounds[0].clone(), rounds[1].clone(), rounds[0].clone(), rounds[1].clone()];
        assert_eq!(average_robustness(&alt, &gt).unwrap(), 0.5);
    }

    #[test]
    fn just_below_half_fails_every_round() {
        // 1x1 box inside a 1 x (1/0.49) box: IoU 0.49
        let gt = vec![vec![BBox::new(0.0, 0.0, 1.0, 1.0 / 0.49); 2]];
        let rounds = vec![vec![vec![BBox::new(0.0, 0.0, 1.0, 1.0); 2]]; 5];
        let ap = average_precision(&rounds, &gt).unwrap();
        assert!((ap - 0.49).abs() < 1e-12);
        assert_eq!(average_robustness(&rounds, &gt).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_shapes() {
        let b = BBox::new(0.0, 0.0, 1.0, 1.0);
        assert!(precision_success(&[b], &[b, b]).is_err());
        assert!(precision_success(&[], &[]).is_err());
        assert!(average_precision(&[], &[vec![b]]).is_err());
        assert!(average_robustness(&[vec![]], &[vec![b]]).is_err());
    }

    #[test]
    fn report_json_is_stable() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        let r = EvalReport::prsr(&[b], &[b]).unwrap().with_fingerprint("abc");
        let json = r.to_json();
        assert!(json.find("config_fingerprint").unwrap() < json.find("pr_curve").unwrap());
        assert!(!json.contains("\"ap\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(r.curves_csv().lines().count(), 1 + 51 + 21);
        let t = TrackResult {
            sequence: "s".into(),
            boxes: vec![BBox::new(1.0, 2.5, 3.0, 4.0)],
            scores: vec![-0.25],
        };
        assert_eq!(t.to_lines(), "1.000000,2.500000,3.000000,4.000000,-0.250000\n");
    }

    proptest! {
        #[test]
        fn curves_are_monotone_and_bounded(pairs in prop::collection::vec((boxes(), boxes()), 1..30)) {
            let (pred, gt): (Vec<BBox>, Vec<BBox>) = pairs.into_iter().unzip();
            let c = precision_success(&pred, &gt).unwrap();
            prop_assert!(c.pr_curve.windows(2).all(|w| w[0] <= w[1]));
            prop_assert!(c.sr_curve.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(c.pr_curve.iter().chain(&c.sr_curve).all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn ar_lies_on_the_grid(n in 1usize..5, m in 1usize..4, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut rb = || BBox::new(rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0), rng.gen_range(1.0..8.0), rng.gen_range(1.0..8.0));
            let gt: Vec<Vec<BBox>> = (0..m).map(|_| (0..3).map(|_| rb()).collect()).collect();
            let rounds: Vec<Vec<Vec<BBox>>> = (0..n).map(|_| (0..m).map(|_| (0..3).map(|_| rb()).collect()).collect()).collect();
            let ar = average_robustness(&rounds, &gt).unwrap();
            let k = ar * (n * m) as f64;
            prop_assert_eq!(k, k.round());
        }
    }
}
