//! Stacked event images: per-polarity event counts and latest timestamps
//! over one time window, plus their normalized network-input form.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::events::{EventStream, Polarity, TimeWindow};
use crate::tensor::Tensor;

/// Channel order of the assembled network input.
pub const INPUT_CHANNELS: [&str; 7] = ["r", "g", "b", "c_pos", "c_neg", "t_pos", "t_neg"];

/// Count and latest-timestamp grids for both polarities, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StackedFrame {
    pub c_pos: Vec<u32>,
    pub c_neg: Vec<u32>,
    /// Latest positive-event timestamp per pixel, 0 where none.
    pub t_pos: Vec<u64>,
    pub t_neg: Vec<u64>,
    pub window: TimeWindow,
    pub width: u32,
    pub height: u32,
}

impl StackedFrame {
    pub fn zeros(width: u32, height: u32, window: TimeWindow) -> Self {
        let n = width as usize * height as usize;
        StackedFrame {
            c_pos: vec![0; n],
            c_neg: vec![0; n],
            t_pos: vec![0; n],
            t_neg: vec![0; n],
            window,
            width,
            height,
        }
    }

    pub fn total_count(&self) -> u64 {
        self.c_pos.iter().chain(&self.c_neg).map(|&c| u64::from(c)).sum()
    }
}

pub fn stack_events(s: &EventStream, w: TimeWindow) -> StackedFrame {
    let mut f = StackedFrame::zeros(s.width(), s.height(), w);
    let width = s.width() as usize;
    for e in s.window_events(w) {
        let i = e.y as usize * width + e.x as usize;
        let (counts, times) = match e.p {
            Polarity::Pos => (&mut f.c_pos, &mut f.t_pos),
            Polarity::Neg => (&mut f.c_neg, &mut f.t_neg),
        };
        counts[i] += 1;
        times[i] = times[i].max(e.t);
    }
    f
}

/// `(4, H, W)` tensor in `[0, 1]`: counts divided by the frame's largest count
/// (at least 1), timestamps mapped to `(t - t0) / (t1 - t0)` where a pixel saw
/// an event of that polarity and 0 elsewhere.
pub fn normalize_stacked(f: &StackedFrame) -> Tensor {
    let (h, w) = (f.height as usize, f.width as usize);
    let max_count = f.c_pos.iter().chain(&f.c_neg).copied().max().unwrap_or(0).max(1);
    let scale = 1.0 / f64::from(max_count);
    let (t0, dur) = (f.window.t0(), f.window.duration() as f64);
    let mut out = Tensor::zeros(&[4, h, w]);
    let counts = [&f.c_pos, &f.c_neg];
    let times = [(&f.c_pos, &f.t_pos), (&f.c_neg, &f.t_neg)];
    for (c, src) in counts.iter().enumerate() {
        for (o, &v) in out.plane_mut(c).iter_mut().zip(src.iter()) {
            *o = f64::from(v) * scale;
        }
    }
    for (k, (cnt, ts)) in times.iter().enumerate() {
        let plane = out.plane_mut(2 + k);
        for i in 0..plane.len() {
            if cnt[i] > 0 {
                plane[i] = (ts[i] - t0) as f64 / dur;
            }
        }
    }
    out
}

/// Concatenates RGB planes `(3, H, W)` in `[0, 1]` with the normalized
/// stacked frame into the 7-channel input `(R, G, B, c_pos, c_neg, t_pos, t_neg)`.
pub fn assemble_input(rgb: &Tensor, f: &StackedFrame) -> Result<Tensor> {
    let (c, h, w) = rgb.chw()?;
    if c != 3 || h != f.height as usize || w != f.width as usize {
        return Err(Error::Shape(format!(
            "rgb {:?} does not match stacked frame {}x{}",
            rgb.shape(),
            f.width,
            f.height
        )));
    }
    Tensor::concat_channels(&[rgb, &normalize_stacked(f)])
}

/// Which parts of a 7-channel input are kept; dropped channels are zeroed
/// so geometry is preserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelMask {
    pub rgb: bool,
    pub counts: bool,
    pub timestamps: bool,
}

impl ChannelMask {
    pub const ALL: ChannelMask = ChannelMask {
        rgb: true,
        counts: true,
        timestamps: true,
    };

    pub fn apply(&self, input: &mut Tensor) {
        let keep = [
            self.rgb,
            self.rgb,
            self.rgb,
            self.counts,
            self.counts,
            self.timestamps,
            self.timestamps,
        ];
        for (c, &k) in keep.iter().enumerate() {
            if !k {
                input.plane_mut(c).fill(0.0);
            }
        }
    }
}

const STACK_MAGIC: &[u8; 4] = b"MCST";

/// Binary dump: magic, u32 width, u32 height, u64 window bounds, then the
/// raw `c_pos, c_neg, t_pos, t_neg` planes as little-endian f32.
pub fn write_stacked(f: &StackedFrame, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(STACK_MAGIC)?;
    w.write_all(&f.width.to_le_bytes())?;
    w.write_all(&f.height.to_le_bytes())?;
    w.write_all(&f.window.t0().to_le_bytes())?;
    w.write_all(&f.window.t1().to_le_bytes())?;
    let planes = [
        f.c_pos.iter().map(|&v| v as f32).collect::<Vec<_>>(),
        f.c_neg.iter().map(|&v| v as f32).collect(),
        f.t_pos.iter().map(|&v| v as f32).collect(),
        f.t_neg.iter().map(|&v| v as f32).collect(),
    ];
    for plane in &planes {
        for v in plane {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_stacked(f: &StackedFrame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_stacked(f, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

/// Reads a dump written by [`write_stacked`]. Timestamps above 2^24 µs come
/// back rounded to f32 precision.
pub fn read_stacked(mut r: impl Read) -> Result<StackedFrame> {
    let corrupt = |what: &str| Error::Parse {
        line: 0,
        message: format!("stacked frame dump: {what}"),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| corrupt("truncated header"))?;
    if &magic != STACK_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut u32b = [0u8; 4];
    let mut u64b = [0u8; 8];
    let mut next_u32 = |r: &mut dyn Read| -> Result<u32> {
        r.read_exact(&mut u32b).map_err(|_| corrupt("truncated header"))?;
        Ok(u32::from_le_bytes(u32b))
    };
    let width = next_u32(&mut r)?;
    let height = next_u32(&mut r)?;
    let mut bounds = [0u64; 2];
    for b in &mut bounds {
        r.read_exact(&mut u64b).map_err(|_| corrupt("truncated header"))?;
        *b = u64::from_le_bytes(u64b);
    }
    let window = TimeWindow::new(bounds[0], bounds[1])?;
    let n = width as usize * height as usize;
    let mut raw = vec![0u8; 4 * 4 * n];
    r.read_exact(&mut raw).map_err(|_| corrupt("truncated planes"))?;
    let vals: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Ok(StackedFrame {
        c_pos: vals[..n].iter().map(|&v| v as u32).collect(),
        c_neg: vals[n..2 * n].iter().map(|&v| v as u32).collect(),
        t_pos: vals[2 * n..3 * n].iter().map(|&v| v as u64).collect(),
        t_neg: vals[3 * n..].iter().map(|&v| v as u64).collect(),
        window,
        width,
        height,
    })
}

pub fn load_stacked(path: impl AsRef<Path>) -> Result<StackedFrame> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_stacked(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::events::Event;
    use proptest::prelude::*;

    fn window(t0: u64, t1: u64) -> TimeWindow {
        TimeWindow::new(t0, t1).unwrap()
    }

    #[test]
    fn hand_example() {
        let s = EventStream::new(
            vec![
                Event::new(10, 1, 2, Polarity::Pos),
                Event::new(15, 0, 0, Polarity::Neg),
                Event::new(20, 1, 2, Polarity::Pos),
            ],
            3,
            3,
        )
        .unwrap();
        let f = stack_events(&s, window(0, 30));
        let at = |x: usize, y: usize| y * 3 + x;
        assert_eq!(f.c_pos[at(1, 2)], 2);
        assert_eq!(f.c_neg[at(0, 0)], 1);
        assert_eq!(f.t_pos[at(1, 2)], 20);
        assert_eq!(f.t_neg[at(0, 0)], 15);
        assert_eq!(f.total_count(), 3);
        assert_eq!(f.t_pos.iter().filter(|&&t| t != 0).count(), 1);
        assert_eq!(f.t_neg.iter().filter(|&&t| t != 0).count(), 1);
    }

    #[test]
    fn empty_and_single() {
        let f = stack_events(&EventStream::empty(4, 4), window(0, 10));
        assert_eq!(f, StackedFrame::zeros(4, 4, window(0, 10)));
        assert!(normalize_stacked(&f).data().iter().all(|&v| v == 0.0));

        let s = EventStream::new(vec![Event::new(7, 3, 1, Polarity::Neg)], 4, 4).unwrap();
        let f = stack_events(&s, window(0, 10));
        assert_eq!(f.c_neg.iter().filter(|&&c| c == 1).count(), 1);
        assert_eq!(f.c_neg[7], 1);
        assert_eq!(f.t_neg[7], 7);
    }

    #[test]
    fn normalization_rules() {
        let mut f = StackedFrame::zeros(2, 1, window(100, 200));
        f.c_pos = vec![4, 2];
        f.t_pos = vec![125, 199];
        let n = normalize_stacked(&f);
        assert_eq!(n.plane(0), &[1.0, 0.5]);
        assert_eq!(n.plane(2)[0], 0.25);
        assert_eq!(n.plane(3), &[0.0, 0.0]);
    }

    #[test]
    fn assembly_order_and_mismatch() {
        let rgb = Tensor::from_vec(&[3, 1, 2], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let f = StackedFrame::zeros(2, 1, window(0, 1));
        let x = assemble_input(&rgb, &f).unwrap();
        assert_eq!(x.shape(), &[7, 1, 2]);
        assert_eq!(&x.data()[..6], rgb.data());
        assert!(x.data()[6..].iter().all(|&v| v == 0.0));

        let gray = Tensor::from_vec(&[3, 1, 2], vec![0.7, 0.1, 0.7, 0.1, 0.7, 0.1]).unwrap();
        let x = assemble_input(&gray, &f).unwrap();
        assert_eq!(x.plane(0), x.plane(1));
        assert_eq!(x.plane(1), x.plane(2));

        assert!(assemble_input(&rgb, &StackedFrame::zeros(3, 1, window(0, 1))).is_err());
    }

    #[test]
    fn masks_zero_only_dropped_channels() {
        let mut x = Tensor::full(&[7, 2, 2], 1.0);
        ChannelMask {
            rgb: true,
            counts: true,
            timestamps: false,
        }
        .apply(&mut x);
        assert!((0..5).all(|c| x.plane(c).iter().all(|&v| v == 1.0)));
        assert!((5..7).all(|c| x.plane(c).iter().all(|&v| v == 0.0)));
        assert_eq!(x.shape(), &[7, 2, 2]);
    }

    #[test]
    fn dump_round_trip_and_truncation() {
        let s = EventStream::new(
            vec![Event::new(3, 0, 0, Polarity::Pos), Event::new(9, 1, 0, Polarity::Neg)],
            2,
            1,
        )
        .unwrap();
        let f = stack_events(&s, window(0, 10));
        let mut buf = Vec::new();
        write_stacked(&f, &mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 8 + 16 + 4 * 4 * 2);
        assert_eq!(read_stacked(buf.as_slice()).unwrap(), f);
        assert!(read_stacked(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(read_stacked(buf.as_slice()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn assembly_copies_channels_bit_exact(vals in prop::collection::vec(0.0f64..1.0, 3 * 4 * 5), counts in prop::collection::vec(0u32..9, 20)) {
            let rgb = Tensor::from_vec(&[3, 4, 5], vals).unwrap();
            let mut f = StackedFrame::zeros(5, 4, window(0, 100));
            f.c_pos = counts.clone();
            f.t_pos = counts.iter().map(|&c| if c > 0 { u64::from(c) * 10 } else { 0 }).collect();
            let x = assemble_input(&rgb, &f).unwrap();
            let norm = normalize_stacked(&f);
            for c in 0..3 {
                prop_assert_eq!(x.plane(c), rgb.plane(c));
            }
            for c in 0..4 {
                prop_assert_eq!(x.plane(3 + c), norm.plane(c));
            }
            prop_assert!(norm.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
