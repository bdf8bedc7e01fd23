//! Temporal intervals and the grid <-> seconds coordinate system.
//!
//! A video of `duration_t` seconds is rasterized onto `d` equal grid cells; grid
//! cell `k` covers `[k, k + 1)` in grid units, i.e. `[k/d·t, (k+1)/d·t)` seconds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A half-open time interval `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct Segment {
    start: f64,
    end: f64,
}

impl Segment {
    /// Builds a segment, rejecting non-finite or empty intervals.
    pub fn new(start: f64, end: f64) -> Result<Self> {
        if !start.is_finite() || !end.is_finite() {
            return Err(Error::contract(format!(
                "segment endpoints must be finite, got [{start}, {end}]"
            )));
        }
        if end <= start {
            return Err(Error::contract(format!(
                "segment end must exceed start, got [{start}, {end}]"
            )));
        }
        Ok(Segment { start, end })
    }

    /// Builds a segment from a center and a length.
    pub fn from_center_length(center: f64, length: f64) -> Result<Self> {
        Segment::new(center - 0.5 * length, center + 0.5 * length)
    }

    #[inline]
    pub fn start(&self) -> f64 {
        self.start
    }

    #[inline]
    pub fn end(&self) -> f64 {
        self.end
    }

    #[inline]
    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    #[inline]
    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    /// Length of the overlap with `other` (0 when disjoint or touching).
    #[inline]
    pub fn intersection(&self, other: &Segment) -> f64 {
        (self.end.min(other.end) - self.start.max(other.start)).max(0.0)
    }

    /// Clips to `[lo, hi]`. Returns `None` when nothing of positive length remains.
    pub fn clamp(&self, lo: f64, hi: f64) -> Option<Segment> {
        let start = self.start.max(lo);
        let end = self.end.min(hi);
        (end > start).then_some(Segment { start, end })
    }

    /// True if `t` lies in `[start, end)`.
    #[inline]
    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t < self.end
    }
}

impl TryFrom<[f64; 2]> for Segment {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Segment::new(v[0], v[1])
    }
}

impl From<Segment> for [f64; 2] {
    fn from(s: Segment) -> Self {
        [s.start, s.end]
    }
}

/// Temporal intersection-over-union of two segments.
pub fn tiou(a: &Segment, b: &Segment) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.length() + b.length() - inter;
    (inter / union).min(1.0)
}

/// Temporal grid of `d` cells spanning a video of `duration_t` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    d: usize,
    duration_t: f64,
}

impl GridSpec {
    /// Grid length used throughout the pipeline unless overridden.
    pub const DEFAULT_D: usize = 200;

    pub fn new(d: usize, duration_t: f64) -> Result<Self> {
        if d < 2 {
            return Err(Error::contract(format!("grid length must be >= 2, got {d}")));
        }
        if !(duration_t.is_finite() && duration_t > 0.0) {
            return Err(Error::contract(format!(
                "grid duration must be positive and finite, got {duration_t}"
            )));
        }
        Ok(GridSpec { d, duration_t })
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn duration(&self) -> f64 {
        self.duration_t
    }

    /// Seconds per grid cell.
    #[inline]
    pub fn unit(&self) -> f64 {
        self.duration_t / self.d as f64
    }

    /// Time in seconds of grid boundary `k`.
    #[inline]
    pub fn boundary_time(&self, k: usize) -> f64 {
        k as f64 / self.d as f64 * self.duration_t
    }
}

/// Maps the grid cell spanning boundaries `i..j` back to seconds.
pub fn grid_to_segment(i: usize, j: usize, spec: &GridSpec) -> Result<Segment> {
    if i >= j || j > spec.d {
        return Err(Error::contract(format!(
            "grid cell requires 0 <= i < j <= {}, got i={i}, j={j}",
            spec.d
        )));
    }
    Segment::new(spec.boundary_time(i), spec.boundary_time(j))
}

/// Fractional grid coordinates of `s`, after clamping it to the video extent.
pub fn segment_to_grid(s: &Segment, spec: &GridSpec) -> (f64, f64) {
    let t = spec.duration_t;
    let d = spec.d as f64;
    let start = s.start.clamp(0.0, t);
    let end = s.end.clamp(0.0, t);
    (start / t * d, end / t * d)
}

/// Number of feature steps for a video of `duration_t` seconds: two per second,
/// rounded half away from zero, never below 2.
pub fn feature_length_for(duration_t: f64) -> Result<usize> {
    if !(duration_t.is_finite() && duration_t > 0.0) {
        return Err(Error::contract(format!(
            "duration must be positive and finite, got {duration_t}"
        )));
    }
    // f64::round rounds half away from zero.
    Ok(((2.0 * duration_t).round() as usize).max(2))
}
