use crate::error::{Error, Result};

/// A `channels × length` feature matrix, stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    channels: usize,
    length: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(channels: usize, length: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || length == 0 {
            return Err(Error::contract(format!(
                "feature sequence needs C >= 1 and T >= 1, got {channels}x{length}"
            )));
        }
        if data.len() != channels * length {
            return Err(Error::format(format!(
                "feature sequence {channels}x{length} needs {} values, got {}",
                channels * length,
                data.len()
            )));
        }
        if let Some(k) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::format(format!("feature value {k} is not finite")));
        }
        Ok(FeatureSequence {
            channels,
            length,
            data,
        })
    }

    pub fn zeros(channels: usize, length: usize) -> Self {
        FeatureSequence {
            channels,
            length,
            data: vec![0.0; channels * length],
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn length(&self) -> usize {
        self.length
    }

    #[inline]
    pub fn get(&self, c: usize, t: usize) -> f64 {
        self.data[c * self.length + t]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.length..(c + 1) * self.length]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}
