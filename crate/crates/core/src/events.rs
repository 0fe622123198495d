//! Event streams, label tracks and prediction tracks, with their CSV forms.
//!
//! Polarity is stored on disk as `0`/`1` and in memory as [`Polarity`],
//! whose sign is `-1`/`+1`. Timestamps are integer microseconds; a timestamp
//! with a fractional part is rejected rather than rounded.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EVENT_HEADER: &str = "t,x,y,p";
pub const LABEL_HEADER: &str = "t,x,y,closed";
pub const PREDICTION_HEADER: &str = "t,x,y,score";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    pub fn sign(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }

    /// Channel index in a binned tensor: 0 for positive, 1 for negative.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Polarity::Negative => Polarity::Positive,
            Polarity::Positive => Polarity::Negative,
        }
    }

    fn from_bit(bit: &str) -> Option<Self> {
        match bit {
            "0" => Some(Polarity::Negative),
            "1" => Some(Polarity::Positive),
            _ => None,
        }
    }

    fn bit(self) -> u8 {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u32,
    pub y: u32,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u64, x: u32, y: u32, p: Polarity) -> Self {
        Event { t, x, y, p }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorGeometry {
    pub width: u32,
    pub height: u32,
}

impl Default for SensorGeometry {
    fn default() -> Self {
        SensorGeometry {
            width: 640,
            height: 480,
        }
    }
}

impl SensorGeometry {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::config("sensor geometry must be non-empty"));
        }
        Ok(SensorGeometry { width, height })
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x < self.width as i64 && y < self.height as i64
    }

    /// Real-valued bounds check used for labels: `0 <= x < width`.
    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= 0.0 && y >= 0.0 && x < self.width as f64 && y < self.height as f64
    }
}

/// A time-ordered run of events from one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSegment {
    events: Vec<Event>,
    geometry: SensorGeometry,
}

impl EventSegment {
    /// Validates ordering and bounds. Line numbers in errors are 1-based row
    /// indices counting the header as line 1, matching the CSV form.
    pub fn new(events: Vec<Event>, geometry: SensorGeometry) -> Result<Self> {
        for (i, pair) in events.windows(2).enumerate() {
            if pair[1].t < pair[0].t {
                return Err(Error::NonMonotonic {
                    line: i + 3,
                    t: pair[1].t,
                    previous: pair[0].t,
                });
            }
        }
        for (i, e) in events.iter().enumerate() {
            if !geometry.contains(e.x as i64, e.y as i64) {
                return Err(Error::OutOfBounds {
                    line: i + 2,
                    x: e.x as i64,
                    y: e.y as i64,
                    width: geometry.width,
                    height: geometry.height,
                });
            }
        }
        Ok(EventSegment { events, geometry })
    }

    pub fn empty(geometry: SensorGeometry) -> Self {
        EventSegment {
            events: Vec::new(),
            geometry,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn geometry(&self) -> SensorGeometry {
        self.geometry
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `t <= cut`.
    pub fn truncated(&self, cut: u64) -> Self {
        let end = self.events.partition_point(|e| e.t <= cut);
        EventSegment {
            events: self.events[..end].to_vec(),
            geometry: self.geometry,
        }
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelSample {
    pub t: u64,
    pub x: f64,
    pub y: f64,
    pub closed: bool,
}

/// Pupil labels, strictly increasing in time (nominally 100 Hz).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelTrack {
    samples: Vec<LabelSample>,
}

impl LabelTrack {
    pub fn new(samples: Vec<LabelSample>) -> Result<Self> {
        for (i, pair) in samples.windows(2).enumerate() {
            if pair[1].t <= pair[0].t {
                return Err(Error::DuplicateTimestamp {
                    line: i + 3,
                    t: pair[1].t,
                });
            }
        }
        Ok(LabelTrack { samples })
    }

    pub fn samples(&self) -> &[LabelSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn first_time(&self) -> Option<u64> {
        self.samples.first().map(|s| s.t)
    }

    pub fn last_time(&self) -> Option<u64> {
        self.samples.last().map(|s| s.t)
    }

    /// Rescales coordinates, e.g. from sensor pixels into the 60x80 evaluation space.
    pub fn scaled(&self, sx: f64, sy: f64) -> Self {
        LabelTrack {
            samples: self
                .samples
                .iter()
                .map(|s| LabelSample {
                    x: s.x * sx,
                    y: s.y * sy,
                    ..*s
                })
                .collect(),
        }
    }

    pub fn get(&self, t: u64) -> Option<&LabelSample> {
        self.samples
            .binary_search_by_key(&t, |s| s.t)
            .ok()
            .map(|i| &self.samples[i])
    }
}

/// A decoded pupil position in the 60x80 evaluation space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PupilPrediction {
    pub t: u64,
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

struct Rows<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Rows<'a> {
    fn open(bytes: &'a [u8], header: &str) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
            line: 1,
            message: format!("input is not UTF-8: {e}"),
        })?;
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, first)) if first.trim() == header => Ok(Rows { lines }),
            Some((_, first)) => Err(Error::Parse {
                line: 1,
                message: format!("expected header `{header}`, found `{}`", first.trim()),
            }),
            None => Err(Error::Parse {
                line: 1,
                message: format!("missing header `{header}`"),
            }),
        }
    }
}

impl<'a> Iterator for Rows<'a> {
    /// (1-based line number, fields)
    type Item = Result<(usize, Vec<&'a str>)>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let (idx, raw) = self.lines.next()?;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Some(Err(Error::Parse {
                    line: idx + 1,
                    message: format!("expected 4 fields, found {}", fields.len()),
                }));
            }
            return Some(Ok((idx + 1, fields)));
        }
    }
}

fn field<T: FromStr>(line: usize, name: &str, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {name} `{raw}`"),
    })
}

fn flag(line: usize, name: &str, raw: &str) -> Result<bool> {
    match raw {
        "0" => Ok(false),
        "1" => Ok(true),
        _ => Err(Error::Parse {
            line,
            message: format!("{name} must be 0 or 1, found `{raw}`"),
        }),
    }
}

pub fn parse_event_csv(bytes: &[u8], geometry: SensorGeometry) -> Result<EventSegment> {
    let mut events = Vec::new();
    let mut previous: Option<u64> = None;
    for row in Rows::open(bytes, EVENT_HEADER)? {
        let (line, f) = row?;
        let t: u64 = field(line, "timestamp", f[0])?;
        let x: i64 = field(line, "x", f[1])?;
        let y: i64 = field(line, "y", f[2])?;
        let p = Polarity::from_bit(f[3]).ok_or_else(|| Error::Parse {
            line,
            message: format!("polarity must be 0 or 1, found `{}`", f[3]),
        })?;
        if let Some(prev) = previous {
            if t < prev {
                return Err(Error::NonMonotonic {
                    line,
                    t,
                    previous: prev,
                });
            }
        }
        if !geometry.contains(x, y) {
            return Err(Error::OutOfBounds {
                line,
                x,
                y,
                width: geometry.width,
                height: geometry.height,
            });
        }
        previous = Some(t);
        events.push(Event::new(t, x as u32, y as u32, p));
    }
    Ok(EventSegment { events, geometry })
}

pub fn write_event_csv(segment: &EventSegment) -> Vec<u8> {
    let mut out = String::from(EVENT_HEADER);
    for e in segment.events() {
        let _ = write!(out, "\n{},{},{},{}", e.t, e.x, e.y, e.p.bit());
    }
    out.into_bytes()
}

pub fn parse_label_csv(bytes: &[u8]) -> Result<LabelTrack> {
    let mut samples: Vec<LabelSample> = Vec::new();
    for row in Rows::open(bytes, LABEL_HEADER)? {
        let (line, f) = row?;
        let t: u64 = field(line, "timestamp", f[0])?;
        let x: f64 = field(line, "x", f[1])?;
        let y: f64 = field(line, "y", f[2])?;
        if !x.is_finite() || !y.is_finite() {
            return Err(Error::Parse {
                line,
                message: "label coordinates must be finite".into(),
            });
        }
        let closed = flag(line, "closed", f[3])?;
        if let Some(prev) = samples.last() {
            if t <= prev.t {
                return Err(Error::DuplicateTimestamp { line, t });
            }
        }
        samples.push(LabelSample { t, x, y, closed });
    }
    Ok(LabelTrack { samples })
}

/// Coordinates use Rust's shortest round-trip float formatting, so parsing
/// the output reproduces the track exactly.
pub fn write_label_csv(labels: &LabelTrack) -> Vec<u8> {
    let mut out = String::from(LABEL_HEADER);
    for s in labels.samples() {
        let _ = write!(out, "\n{},{:?},{:?},{}", s.t, s.x, s.y, u8::from(s.closed));
    }
    out.into_bytes()
}

pub fn write_predictions_csv(preds: &[PupilPrediction]) -> Vec<u8> {
    let mut out = String::from(PREDICTION_HEADER);
    for p in preds {
        let _ = write!(out, "\n{},{:.4},{:.4},{:.4}", p.t, p.x, p.y, p.score);
    }
    out.into_bytes()
}

pub fn parse_predictions_csv(bytes: &[u8]) -> Result<Vec<PupilPrediction>> {
    let mut preds: Vec<PupilPrediction> = Vec::new();
    for row in Rows::open(bytes, PREDICTION_HEADER)? {
        let (line, f) = row?;
        let pred = PupilPrediction {
            t: field(line, "timestamp", f[0])?,
            x: field(line, "x", f[1])?,
            y: field(line, "y", f[2])?,
            score: field(line, "score", f[3])?,
        };
        if let Some(prev) = preds.last() {
            if pred.t <= prev.t {
                return Err(Error::DuplicateTimestamp { line, t: pred.t });
            }
        }
        preds.push(pred);
    }
    Ok(preds)
}
