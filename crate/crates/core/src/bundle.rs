use crate::error::{Error, Result};

/// Decoded network outputs for one video: start/end probabilities per grid cell
/// and two `d × d` confidence maps indexed by (start cell, duration - 1).
///
/// Values are stored as `f32`, the precision of the on-disk container.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreBundle {
    d: usize,
    pub(crate) start_prob: Vec<f32>,
    pub(crate) end_prob: Vec<f32>,
    pub(crate) map_a: Vec<f32>,
    pub(crate) map_b: Vec<f32>,
}

impl ScoreBundle {
    /// Validates shapes, value range and the zero invalid triangle.
    pub fn new(
        d: usize,
        start_prob: Vec<f32>,
        end_prob: Vec<f32>,
        map_a: Vec<f32>,
        map_b: Vec<f32>,
    ) -> Result<Self> {
        if d == 0 {
            return Err(Error::format("bundle grid length must be positive"));
        }
        for (name, len, want) in [
            ("start", start_prob.len(), d),
            ("end", end_prob.len(), d),
            ("map_a", map_a.len(), d * d),
            ("map_b", map_b.len(), d * d),
        ] {
            if len != want {
                return Err(Error::format(format!(
                    "bundle field {name} has {len} values, expected {want} for D={d}"
                )));
            }
        }
        for (name, v) in [
            ("start", &start_prob),
            ("end", &end_prob),
            ("map_a", &map_a),
            ("map_b", &map_b),
        ] {
            if let Some((k, x)) = v.iter().enumerate().find(|(_, x)| !(0.0..=1.0).contains(*x)) {
                return Err(Error::format(format!(
                    "bundle field {name}[{k}] = {x} outside [0, 1]"
                )));
            }
        }
        for (name, m) in [("map_a", &map_a), ("map_b", &map_b)] {
            for i in 0..d {
                for k in d - i..d {
                    if m[i * d + k] != 0.0 {
                        return Err(Error::format(format!(
                            "bundle field {name} cell ({i}, {k}) lies past the video end but is {}",
                            m[i * d + k]
                        )));
                    }
                }
            }
        }
        Ok(ScoreBundle {
            d,
            start_prob,
            end_prob,
            map_a,
            map_b,
        })
    }

    /// All-zero bundle.
    pub fn zeros(d: usize) -> Self {
        ScoreBundle {
            d,
            start_prob: vec![0.0; d],
            end_prob: vec![0.0; d],
            map_a: vec![0.0; d * d],
            map_b: vec![0.0; d * d],
        }
    }

    #[inline]
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn start_prob(&self) -> &[f32] {
        &self.start_prob
    }

    pub fn end_prob(&self) -> &[f32] {
        &self.end_prob
    }

    pub fn map_a(&self) -> &[f32] {
        &self.map_a
    }

    pub fn map_b(&self) -> &[f32] {
        &self.map_b
    }
}

/// Zeroes the cells of a row-major `d × d` (start, duration) map that extend
/// past the last grid boundary.
pub(crate) fn zero_invalid_triangle<T: Copy + Default>(map: &mut [T], d: usize) {
    for i in 0..d {
        for k in d - i..d {
            map[i * d + k] = T::default();
        }
    }
}
