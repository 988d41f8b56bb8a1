use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::events::{EventStream, TimeWindow};
use crate::frames::Frame;
use crate::net::{McfrModel, ModelInput};
use crate::repr::{assemble_input, stack_events};
use crate::snn::{encode_events_to_spikes, SpikeTensor};
use crate::tensor::Tensor;

/// Everything the tracker reads from one frame: RGB plus stacked event
/// planes at full resolution, and the full-frame spike tensor when the
/// model has an event branch.
#[derive(Debug, Clone)]
pub struct FrameObs {
    pub planes: Tensor,
    pub spikes: Option<SpikeTensor>,
}

impl FrameObs {
    pub fn new(frame: &Frame, events: &EventStream, window: TimeWindow, model: &McfrModel) -> Result<Self> {
        let (w, h) = (frame.width(), frame.height());
        if (events.width(), events.height()) != (w, h) {
            return Err(Error::Shape(format!(
                "events are {}x{}, frames {w}x{h}",
                events.width(),
                events.height()
            )));
        }
        let [r, g, b] = frame.rgb_planes();
        let rgb = Tensor::from_vec(&[3, h as usize, w as usize], [r, g, b].concat())?;
        let planes = assemble_input(&rgb, &stack_events(events, window))?;
        let spikes = model.uee.as_ref().map(|net| encode_events_to_spikes(
                events.window_events(window),
                window,
                &net.layers[0].params,
                (w, h),
            ));
        Ok(FrameObs { planes, spikes })
    }

    pub fn width(&self) -> usize {
        self.planes.shape()[2]
    }

    pub fn height(&self) -> usize {
        self.planes.shape()[1]
    }
}

/// The square-resampled region around `b`, enlarged by `context` about its
/// center.
pub fn crop_region(b: &BBox, context: f64) -> BBox {
    let (cx, cy) = b.center();
    BBox::from_center(cx, cy, b.w * context, b.h * context)
}

/// Bilinear resampling of `region` onto an `n x n` grid, replicating edge
/// pixels outside the image.
pub fn crop_bilinear(planes: &Tensor, region: &BBox, n: usize) -> Result<Tensor> {
    let (c, h, w) = planes.chw()?;
    let taps = |origin: f64, extent: f64, size: usize| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|j| {
                let s = (origin + (j as f64 + 0.5) * extent / n as f64 - 0.5).clamp(0.0, (size - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(size - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let xs = taps(region.x, region.w, w);
    let ys = taps(region.y, region.h, h);
    let mut out = Tensor::zeros(&[c, n, n]);
    for ch in 0..c {
        let src = planes.plane(ch);
        let dst = out.plane_mut(ch);
        for (i, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (j, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[i * n + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// Model input for one box.
pub fn crop_input(obs: &FrameObs, b: &BBox, crop: usize, context: f64) -> Result<ModelInput> {
    let region = crop_region(b, context);
    Ok(ModelInput {
        x7: crop_bilinear(&obs.planes, &region, crop)?,
        spikes: obs
            .spikes
            .as_ref()
            .map(|s| s.crop_resize(region.x, region.y, region.w, region.h, crop, crop)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_crop_reproduces_the_image() {
        let data: Vec<f64> = (0..2 * 5 * 5).map(f64::from).collect();
        let t = Tensor::from_vec(&[2, 5, 5], data).unwrap();
        let out = crop_bilinear(&t, &BBox::new(0.0, 0.0, 5.0, 5.0), 5).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn bilinear_is_exact_on_linear_ramps() {
        let (h, w) = (8, 9);
        let f = |x: f64, y: f64| 2.0 * x - 0.5 * y + 1.0;
        let data = (0..h).flat_map(|y| (0..w).map(move |x| f(x as f64, y as f64))).collect();
        let t = Tensor::from_vec(&[1, h, w], data).unwrap();
        let region = BBox::new(1.3, 2.1, 5.0, 4.0);
        let n = 6;
        let out = crop_bilinear(&t, &region, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let sx = region.x + (j as f64 + 0.5) * region.w / n as f64 - 0.5;
                let sy = region.y + (i as f64 + 0.5) * region.h / n as f64 - 0.5;
                assert!((out.data()[i * n + j] - f(sx, sy)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn context_grows_about_the_center() {
        let r = crop_region(&BBox::new(10.0, 10.0, 4.0, 2.0), 2.0);
        assert_eq!(r, BBox::new(8.0, 9.0, 8.0, 4.0));
    }
}
