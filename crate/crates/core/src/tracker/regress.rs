use nalgebra::{DMatrix, DVector};

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// Ridge regression from box features to `(dx, dy, dw, dh)`: center offsets
/// in units of the box size and log size ratios.
#[derive(Debug, Clone, PartialEq)]
pub struct BBoxRegressor {
    mean_x: DVector<f64>,
    mean_y: DVector<f64>,
    weights: DMatrix<f64>,
}

/// Offsets that move `from` onto `to`.
pub fn box_deltas(from: &BBox, to: &BBox) -> [f64; 4] {
    let (fx, fy) = from.center();
    let (tx, ty) = to.center();
    [
        (tx - fx) / from.w,
        (ty - fy) / from.h,
        (to.w / from.w).ln(),
        (to.h / from.h).ln(),
    ]
}

pub fn apply_deltas(b: &BBox, d: [f64; 4]) -> BBox {
    let (cx, cy) = b.center();
    BBox::from_center(cx + d[0] * b.w, cy + d[1] * b.h, b.w * d[2].exp(), b.h * d[3].exp())
}

impl BBoxRegressor {
    /// Fits on `(features, box)` pairs against `gt`. The penalty is
    /// `ridge` times the mean per-feature sum of squares, so it is
    /// insensitive to the feature scale.
    pub fn fit(features: &[Vec<f64>], boxes: &[BBox], gt: &BBox, ridge: f64) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != boxes.len() {
            return Err(Error::Invalid(format!("{n} feature rows for {} boxes", boxes.len())));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Shape("ragged feature rows".into()));
        }
        let mut x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
        let mut y = DMatrix::from_fn(n, 4, |i, j| box_deltas(&boxes[i], gt)[j]);
        let mean_x = x.row_mean().transpose();
        let mean_y = y.row_mean().transpose();
        for mut row in x.row_iter_mut() {
            row -= mean_x.transpose();
        }
        for mut row in y.row_iter_mut() {
            row -= mean_y.transpose();
        }
        let lambda = ridge * x.norm_squared() / d as f64 + 1e-12;
        let weights = if d <= n {
            let mut a = x.transpose() * &x;
            for i in 0..d {
                a[(i, i)] += lambda;
            }
            let chol = a.cholesky().ok_or_else(|| Error::Invalid("ridge system not positive definite".into()))?;
            chol.solve(&(x.transpose() * &y))
        } else {
            let mut k = &x * x.transpose();
            for i in 0..n {
                k[(i, i)] += lambda;
            }
            let chol = k.cholesky().ok_or_else(|| Error::Invalid("ridge system not positive definite".into()))?;
            x.transpose() * chol.solve(&y)
        };
        Ok(BBoxRegressor { mean_x, mean_y, weights })
    }

    pub fn predict(&self, feature: &[f64]) -> [f64; 4] {
        let x = DVector::from_column_slice(feature) - &self.mean_x;
        let p = self.weights.transpose() * x + &self.mean_y;
        [p[0], p[1], p[2], p[3]]
    }

    pub fn refine(&self, feature: &[f64], b: &BBox) -> BBox {
        apply_deltas(b, self.predict(feature))
    }
}
