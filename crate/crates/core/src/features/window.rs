use super::{FeatureMatrix, LOG_FLOOR};
use crate::error::{Error, Result};

/// A feature matrix with exactly the configured number of frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FixedWindow(FeatureMatrix);

impl FixedWindow {
    pub fn frames(&self) -> usize {
        self.0.frames()
    }

    pub fn dims(&self) -> usize {
        self.0.dims()
    }

    pub fn as_matrix(&self) -> &FeatureMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> FeatureMatrix {
        self.0
    }
}

/// Keeps the last `t_fix` frames, or left-pads with zero frames when the
/// utterance is shorter.
pub fn extract_last_window(fbank: &FeatureMatrix, t_fix: usize) -> Result<FixedWindow> {
    if t_fix == 0 {
        return Err(Error::Config("window length must be at least 1 frame".into()));
    }
    let (t, d) = (fbank.frames(), fbank.dims());
    let values = if t >= t_fix {
        fbank.values()[(t - t_fix) * d..].to_vec()
    } else {
        let mut v = vec![0.0; (t_fix - t) * d];
        v.extend_from_slice(fbank.values());
        v
    };
    Ok(FixedWindow(FeatureMatrix::new(t_fix, d, values)?))
}

/// Row-major concatenation of the window's frames, first frame first.
pub fn stack_frames(window: &FixedWindow) -> Vec<f64> {
    window.0.values().to_vec()
}

/// Inverse of [`stack_frames`].
pub fn unstack_frames(stacked: &[f64], frames: usize, dims: usize) -> Result<FixedWindow> {
    Ok(FixedWindow(FeatureMatrix::new(frames, dims, stacked.to_vec())?))
}

fn percentile_10(sorted: &[f64]) -> f64 {
    let pos = 0.1 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Subtracts each dimension's 10th-percentile value over frames (a noise
/// floor estimate in the log domain). Outputs are clamped at `ln(LOG_FLOOR)`.
pub fn spectral_subtraction(fbank: &FeatureMatrix) -> FeatureMatrix {
    let (t, d) = (fbank.frames(), fbank.dims());
    let floor = LOG_FLOOR.ln();
    let noise: Vec<f64> = (0..d)
        .map(|j| {
            let mut col: Vec<f64> = (0..t).map(|i| fbank.get(i, j)).collect();
            col.sort_by(f64::total_cmp);
            percentile_10(&col)
        })
        .collect();
    let values = fbank
        .values()
        .chunks_exact(d)
        .flat_map(|frame| frame.iter().zip(&noise).map(|(v, n)| (v - n).max(floor)).collect::<Vec<_>>())
        .collect();
    FeatureMatrix::new(t, d, values).expect("shape preserved")
}
