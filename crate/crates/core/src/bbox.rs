use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box: top-left corner plus size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn validated(self) -> Result<Self> {
        if self.w > 0.0 && self.h > 0.0 && [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::Invalid(format!("degenerate box {self:?}")))
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let iw = (self.right().min(other.right()) - self.x.max(other.x)).max(0.0);
        let ih = (self.bottom().min(other.bottom()) - self.y.max(other.y)).max(0.0);
        iw * ih
    }

    pub fn center_distance(&self, other: &BBox) -> f64 {
        let (ax, ay) = self.center();
        let (bx, by) = other.center();
        (ax - bx).hypot(ay - by)
    }

    /// Shrinks and shifts the box so it lies inside a `width` x `height`
    /// image, keeping at least `min_size` pixels per side.
    pub fn clip_to(&self, width: f64, height: f64, min_size: f64) -> BBox {
        let w = self.w.clamp(min_size.min(width), width);
        let h = self.h.clamp(min_size.min(height), height);
        let x = self.x.clamp(0.0, width - w);
        let y = self.y.clamp(0.0, height - h);
        BBox { x, y, w, h }
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Counts unit pixels covered by each box.
    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let inside = |bx: &BBox, px: i64, py: i64| {
            (px as f64) >= bx.x && (px as f64) < bx.right() && (py as f64) >= bx.y && (py as f64) < bx.bottom()
        };
        let (mut inter, mut uni) = (0u64, 0u64);
        for py in -5..60 {
            for px in -5..60 {
                let (ia, ib) = (inside(a, px, py), inside(b, px, py));
                inter += u64::from(ia && ib);
                uni += u64::from(ia || ib);
            }
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn hand_cases() {
        let a = BBox::new(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5.0, 5.0, 2.0, 2.0)), 0.0);
        assert_eq!(iou(&a, &BBox::new(1.0, 0.0, 2.0, 2.0)), 1.0 / 3.0);
        // touching edges share no area
        assert_eq!(iou(&a, &BBox::new(2.0, 0.0, 2.0, 2.0)), 0.0);
    }

    #[test]
    fn clip_keeps_box_inside() {
        let b = BBox::new(-4.0, 60.0, 80.0, 10.0).clip_to(64.0, 64.0, 4.0);
        assert_eq!(b, BBox::new(0.0, 54.0, 64.0, 10.0));
    }

    fn int_box() -> impl Strategy<Value = BBox> {
        (-3i32..40, -3i32..40, 1i32..20, 1i32..20)
            .prop_map(|(x, y, w, h)| BBox::new(x as f64, y as f64, w as f64, h as f64))
    }

    proptest! {
        #[test]
        fn symmetric_and_matches_raster(a in int_box(), b in int_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((v - raster_iou(&a, &b)).abs() < 1e-9);
            prop_assert_eq!(v == 1.0, a == b);
        }
    }
}
