//! Frame sequences and their on-disk layout.
//!
//! A sequence directory holds zero-padded numbered images (`000000.pgm` for
//! grayscale, `000000.ppm` for color), `timestamps.txt` with one integer
//! microsecond value per line and optionally `groundtruth.txt` with one
//! `x,y,w,h` line per frame.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ExtendedColorType, ImageEncoder};

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Invalid(format!("frames need 1 or 3 channels, got {channels}")));
        }
        if data.len() != width as usize * height as usize * channels as usize {
            return Err(Error::Shape(format!(
                "frame buffer of {} bytes for {width}x{height}x{channels}",
                data.len()
            )));
        }
        Ok(Frame {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn gray(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        Frame::new(width, height, 1, data)
    }

    pub const fn width(&self) -> u32 {
        self.width
    }

    pub const fn height(&self) -> u32 {
        self.height
    }

    pub const fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    /// BT.601 luminance on the 0-255 scale.
    pub fn luminance(&self) -> Vec<f64> {
        match self.channels {
            1 => self.data.iter().map(|&v| f64::from(v)).collect(),
            _ => self
                .data
                .chunks_exact(3)
                .map(|px| 0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2]))
                .collect(),
        }
    }

    /// Planar RGB scaled to [0, 1]; gray frames are replicated to 3 planes.
    pub fn rgb_planes(&self) -> [Vec<f64>; 3] {
        let n = self.width as usize * self.height as usize;
        let mut planes = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for i in 0..n {
            for (c, plane) in planes.iter_mut().enumerate() {
                let v = if self.channels == 1 {
                    self.data[i]
                } else {
                    self.data[3 * i + c]
                };
                plane[i] = f64::from(v) / 255.0;
            }
        }
        planes
    }
}

/// Frames with strictly increasing timestamps and a shared geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    timestamps: Vec<u64>,
}

impl FrameSequence {
    pub fn new(frames: Vec<Frame>, timestamps: Vec<u64>) -> Result<Self> {
        if frames.len() != timestamps.len() {
            return Err(Error::Shape(format!(
                "{} frames but {} timestamps",
                frames.len(),
                timestamps.len()
            )));
        }
        if timestamps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("frame timestamps must be strictly increasing".into()));
        }
        if let Some(first) = frames.first() {
            let geom = (first.width, first.height, first.channels);
            if frames.iter().any(|f| (f.width, f.height, f.channels) != geom) {
                return Err(Error::Shape("frames differ in geometry".into()));
            }
        }
        Ok(FrameSequence { frames, timestamps })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn timestamps(&self) -> &[u64] {
        &self.timestamps
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.frames.first().map_or(0, Frame::width)
    }

    pub fn height(&self) -> u32 {
        self.frames.first().map_or(0, Frame::height)
    }

    pub fn into_parts(self) -> (Vec<Frame>, Vec<u64>) {
        (self.frames, self.timestamps)
    }
}

fn frame_path(dir: &Path, index: usize, channels: u8) -> PathBuf {
    let ext = if channels == 1 { "pgm" } else { "ppm" };
    dir.join(format!("{index:06}.{ext}"))
}

/// Writes a sequence directory; `gt` adds `groundtruth.txt`.
pub fn save_sequence(dir: impl AsRef<Path>, seq: &FrameSequence, gt: Option<&[BBox]>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in seq.frames.iter().enumerate() {
        let path = frame_path(dir, i, frame.channels);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let (subtype, color) = if frame.channels == 1 {
            (PnmSubtype::Graymap(SampleEncoding::Binary), ExtendedColorType::L8)
        } else {
            (PnmSubtype::Pixmap(SampleEncoding::Binary), ExtendedColorType::Rgb8)
        };
        PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(subtype)
            .write_image(&frame.data, frame.width, frame.height, color)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    }
    let mut ts = String::new();
    for t in &seq.timestamps {
        let _ = writeln!(ts, "{t}");
    }
    let ts_path = dir.join("timestamps.txt");
    fs::write(&ts_path, ts).map_err(|e| Error::io(&ts_path, e))?;
    if let Some(gt) = gt {
        save_boxes(dir.join("groundtruth.txt"), gt)?;
    }
    Ok(())
}

/// Reads a sequence directory. Ground truth is returned when present.
pub fn load_sequence(dir: impl AsRef<Path>) -> Result<(FrameSequence, Option<Vec<BBox>>)> {
    let dir = dir.as_ref();
    let ts_path = dir.join("timestamps.txt");
    let ts_text = fs::read_to_string(&ts_path).map_err(|e| Error::io(&ts_path, e))?;
    let timestamps = ts_text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim().parse::<u64>().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad timestamp {l:?} in {}", ts_path.display()),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut frames = Vec::with_capacity(timestamps.len());
    for i in 0..timestamps.len() {
        let gray = frame_path(dir, i, 1);
        let path = if gray.exists() { gray } else { frame_path(dir, i, 3) };
        let img = image::open(&path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
        let frame = match img {
            DynamicImage::ImageLuma8(g) => Frame::gray(g.width(), g.height(), g.into_raw())?,
            other => {
                let rgb = other.to_rgb8();
                Frame::new(rgb.width(), rgb.height(), 3, rgb.into_raw())?
            }
        };
        frames.push(frame);
    }

    let gt_path = dir.join("groundtruth.txt");
    let gt = if gt_path.exists() {
        Some(load_boxes(&gt_path)?)
    } else {
        None
    };
    Ok((FrameSequence::new(frames, timestamps)?, gt))
}

/// Parses `x,y,w,h[,...]` lines; extra columns (such as a score) are ignored.
pub fn load_boxes(path: impl AsRef<Path>) -> Result<Vec<BBox>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_box_lines(&text)?.into_iter().map(|(b, _)| b).collect())
}

/// Parses box lines, returning each box with its optional fifth column.
pub fn parse_box_lines(text: &str) -> Result<Vec<(BBox, Option<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad box line {line:?}"),
            })?;
        if vals.len() < 4 {
            return Err(Error::Parse {
                line: i + 1,
                message: format!("expected at least 4 fields, found {}", vals.len()),
            });
        }
        out.push((BBox::new(vals[0], vals[1], vals[2], vals[3]), vals.get(4).copied()));
    }
    Ok(out)
}

pub fn save_boxes(path: impl AsRef<Path>, boxes: &[BBox]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for b in boxes {
        let _ = writeln!(text, "{},{},{},{}", b.x, b.y, b.w, b.h);
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn luminance_weights() {
        let f = Frame::new(1, 1, 3, vec![100, 200, 50]).unwrap();
        let l = f.luminance()[0];
        assert!((l - (29.9 + 117.4 + 5.7)).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_sequences() {
        let f = Frame::gray(2, 2, vec![0; 4]).unwrap();
        assert!(FrameSequence::new(vec![f.clone(), f.clone()], vec![5, 5]).is_err());
        assert!(FrameSequence::new(vec![f.clone()], vec![1, 2]).is_err());
        let g = Frame::gray(3, 2, vec![0; 6]).unwrap();
        assert!(FrameSequence::new(vec![f, g], vec![1, 2]).is_err());
        assert!(Frame::new(2, 2, 2, vec![0; 8]).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gray = Frame::gray(3, 2, vec![0, 10, 20, 30, 40, 255]).unwrap();
        let seq = FrameSequence::new(vec![gray.clone(), gray], vec![0, 33_333]).unwrap();
        let gt = vec![BBox::new(0.5, 1.0, 2.0, 1.0); 2];
        save_sequence(dir.path(), &seq, Some(&gt)).unwrap();
        let (back, back_gt) = load_sequence(dir.path()).unwrap();
        assert_eq!(back, seq);
        assert_eq!(back_gt.unwrap(), gt);

        let color = Frame::new(2, 1, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let seq = FrameSequence::new(vec![color], vec![7]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_sequence(dir.path(), &seq, None).unwrap();
        let (back, gt) = load_sequence(dir.path()).unwrap();
        assert_eq!(back, seq);
        assert!(gt.is_none());
    }
}
