//! Event data model, window slicing and the plain-text event file format.
//!
//! Files are CSV with one `t,x,y,p` record per line (timestamps in
//! microseconds, polarity `-1` or `1`). Comment lines start with `#`; a
//! comment holding exactly two integers (`# 64,48`) declares the sensor
//! geometry.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sign of the log-intensity change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Neg,
    Pos,
}

impl Polarity {
    /// Channel index used by every grid representation: neg 0, pos 1.
    pub const fn channel(self) -> usize {
        match self {
            Polarity::Neg => 0,
            Polarity::Pos => 1,
        }
    }

    pub const fn sign(self) -> i8 {
        match self {
            Polarity::Neg => -1,
            Polarity::Pos => 1,
        }
    }

    pub fn from_sign(p: i64) -> Result<Self> {
        match p {
            -1 => Ok(Polarity::Neg),
            1 => Ok(Polarity::Pos),
            other => Err(Error::Polarity(other)),
        }
    }
}

/// One brightness-change record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub p: Polarity,
}

impl Event {
    pub const fn new(t: u64, x: u32, y: u32, p: Polarity) -> Self {
        Event { t, x, y, p }
    }
}

/// Half-open interval `[t0, t1)` in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimeWindow {
    t0: u64,
    t1: u64,
}

impl TimeWindow {
    pub fn new(t0: u64, t1: u64) -> Result<Self> {
        if t0 < t1 {
            Ok(TimeWindow { t0, t1 })
        } else {
            Err(Error::Window { t0, t1 })
        }
    }

    pub const fn t0(&self) -> u64 {
        self.t0
    }

    pub const fn t1(&self) -> u64 {
        self.t1
    }

    pub const fn duration(&self) -> u64 {
        self.t1 - self.t0
    }

    pub const fn contains(&self, t: u64) -> bool {
        self.t0 <= t && t < self.t1
    }
}

/// Time-ordered events bound to a sensor geometry. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
}

impl EventStream {
    /// Validates ordering and bounds.
    pub fn new(events: Vec<Event>, width: u32, height: u32) -> Result<Self> {
        for (i, pair) in events.windows(2).enumerate() {
            if pair[1].t < pair[0].t {
                return Err(Error::Ordering {
                    line: i + 2,
                    prev: pair[0].t,
                    t: pair[1].t,
                });
            }
        }
        if let Some(e) = events.iter().find(|e| e.x >= width || e.y >= height) {
            return Err(Error::OutOfBounds {
                x: e.x,
                y: e.y,
                width,
                height,
            });
        }
        Ok(EventStream {
            events,
            width,
            height,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        EventStream {
            events: Vec::new(),
            width,
            height,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub const fn width(&self) -> u32 {
        self.width
    }

    pub const fn height(&self) -> u32 {
        self.height
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }

    /// Events with `t0 <= t < t1`, order preserved.
    pub fn slice_window(&self, w: TimeWindow) -> EventStream {
        EventStream {
            events: self.window_events(w).to_vec(),
            width: self.width,
            height: self.height,
        }
    }

    /// Borrowing variant of [`slice_window`](Self::slice_window).
    pub fn window_events(&self, w: TimeWindow) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < w.t0());
        let hi = self.events.partition_point(|e| e.t < w.t1());
        &self.events[lo..hi]
    }
}

/// Reads an event CSV file.
///
/// `geometry` overrides the file's `# width,height` line. With neither, the
/// geometry is the bounding extent of the events (0x0 for an empty file).
pub fn load_events(path: impl AsRef<Path>, geometry: Option<(u32, u32)>) -> Result<EventStream> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_events(&text, geometry)
}

pub fn parse_events(text: &str, geometry: Option<(u32, u32)>) -> Result<EventStream> {
    let mut events = Vec::new();
    let mut sidecar = None;
    let mut prev_t = None;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            let fields: Vec<_> = comment.split(',').map(str::trim).collect();
            if let [w, h] = fields.as_slice() {
                if let (Ok(w), Ok(h)) = (w.parse::<u32>(), h.parse::<u32>()) {
                    sidecar = Some((w, h));
                }
            }
            continue;
        }
        let fields: Vec<_> = line.split(',').map(str::trim).collect();
        let [t, x, y, p] = fields.as_slice() else {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 4 fields, found {}", fields.len()),
            });
        };
        let parse_err = |what: &str, v: &str| Error::Parse {
            line: line_no,
            message: format!("bad {what} {v:?}"),
        };
        let t: u64 = t.parse().map_err(|_| parse_err("timestamp", t))?;
        let x: u32 = x.parse().map_err(|_| parse_err("x", x))?;
        let y: u32 = y.parse().map_err(|_| parse_err("y", y))?;
        let p: i64 = p.parse().map_err(|_| parse_err("polarity", p))?;
        let p = Polarity::from_sign(p)?;
        if let Some(prev) = prev_t {
            if t < prev {
                return Err(Error::Ordering {
                    line: line_no,
                    prev,
                    t,
                });
            }
        }
        prev_t = Some(t);
        events.push(Event { t, x, y, p });
    }
    let (width, height) = geometry.or(sidecar).unwrap_or_else(|| {
        events.iter().fold((0, 0), |(w, h), e| (w.max(e.x + 1), h.max(e.y + 1)))
    });
    EventStream::new(events, width, height)
}

/// Writes `s` in the format read by [`load_events`], geometry included.
pub fn save_events(s: &EventStream, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_events(s)).map_err(|e| Error::io(path, e))
}

pub fn format_events(s: &EventStream) -> String {
    let mut out = String::with_capacity(16 * s.len() + 32);
    out.push_str("# t_us,x,y,p\n");
    let _ = writeln!(out, "# {},{}", s.width, s.height);
    for e in &s.events {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.sign());
    }
    out
}
