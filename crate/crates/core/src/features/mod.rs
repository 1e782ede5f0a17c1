//! Log-filterbank features and the fixed-size input window.

mod fbnk;
mod filterbank;
mod window;

pub use fbnk::{read_fbnk, read_fbnk_file, write_fbnk, write_fbnk_file, FBNK_MAGIC};
pub use filterbank::{
    frame_signal, hz_to_mel, log_mel_filterbank, mel_to_hz, read_wav_mono16, FeatureConfig, MelFilterbank,
    LOG_FLOOR,
};
pub use window::{extract_last_window, spectral_subtraction, stack_frames, unstack_frames, FixedWindow};

use crate::error::{Error, Result};

/// `frames x dims` grid of log-filterbank energies, row-major by frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    frames: usize,
    dims: usize,
    values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, dims: usize, values: Vec<f64>) -> Result<Self> {
        if frames == 0 || dims == 0 {
            return Err(Error::EmptyInput(format!("feature matrix must be non-empty, got {frames}x{dims}")));
        }
        if values.len() != frames * dims {
            return Err(Error::dim(
                "FeatureMatrix::new",
                format!("{} values for {frames}x{dims}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("feature values must be finite".into()));
        }
        Ok(FeatureMatrix { frames, dims, values })
    }

    pub fn from_frames(rows: &[Vec<f64>]) -> Result<Self> {
        let dims = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dims) {
            return Err(Error::dim("FeatureMatrix::from_frames", "ragged frames"));
        }
        FeatureMatrix::new(rows.len(), dims, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.dims..(t + 1) * self.dims]
    }

    pub fn get(&self, t: usize, d: usize) -> f64 {
        self.values[t * self.dims + d]
    }

    /// Same frames in reverse order.
    pub fn reversed(&self) -> FeatureMatrix {
        let values = (0..self.frames).rev().flat_map(|t| self.frame(t).to_vec()).collect();
        FeatureMatrix { frames: self.frames, dims: self.dims, values }
    }
}
