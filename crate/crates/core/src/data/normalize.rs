use std::path::Path;

use serde::{Deserialize, Serialize};

use super::recording::Recording;
use super::windowing::Window;
use super::DataError;

/// Per-channel z-score fitted on training windows.
///
/// Frames covered by several overlapping windows are counted once per window.
/// A channel whose spread is negligible relative to its level is only
/// centered.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub channels: Vec<String>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(windows: &[Window]) -> Result<Self, DataError> {
        let first = windows
            .first()
            .ok_or_else(|| DataError::EmptyDataset("no training windows to fit a normalizer".into()))?;
        let channels = first.recording_channel_names().to_vec();
        let c_count = channels.len();
        if windows
            .iter()
            .any(|w| w.recording_channel_names() != channels.as_slice())
        {
            return Err(DataError::Schema("windows disagree on channel layout".into()));
        }
        let n: usize = windows.iter().map(|w| w.len()).sum();
        let mut mean = vec![0.0; c_count];
        let mut std = vec![0.0; c_count];
        for c in 0..c_count {
            let sum: f64 = windows.iter().map(|w| w.channel(c).iter().sum::<f64>()).sum();
            let m = sum / n as f64;
            let ss: f64 = windows
                .iter()
                .map(|w| w.channel(c).iter().map(|v| (v - m) * (v - m)).sum::<f64>())
                .sum();
            let s = (ss / n as f64).sqrt();
            mean[c] = m;
            std[c] = if s > 1e-12 * m.abs().max(1.0) { s } else { 0.0 };
        }
        Ok(Self { channels, mean, std })
    }

    fn check(&self, names: &[String]) -> Result<(), DataError> {
        if names != self.channels.as_slice() {
            return Err(DataError::Schema(format!(
                "normalizer fitted on {} channels cannot be applied to {} channels with different names",
                self.channels.len(),
                names.len()
            )));
        }
        Ok(())
    }

    #[inline]
    fn map(&self, c: usize, v: f64) -> f64 {
        let centered = v - self.mean[c];
        if self.std[c] > 0.0 {
            centered / self.std[c]
        } else {
            centered
        }
    }

    pub fn apply_recording(&self, rec: &Recording) -> Result<Recording, DataError> {
        self.check(rec.channel_names())?;
        let mut out = rec.clone();
        for c in 0..out.num_channels() {
            for v in out.channel_mut(c) {
                *v = self.map(c, *v);
            }
        }
        Ok(out)
    }

    /// Normalized channel-major copy of one window.
    pub fn apply_window(&self, w: &Window) -> Result<Vec<f64>, DataError> {
        self.check(w.recording_channel_names())?;
        let mut out = Vec::with_capacity(w.num_channels() * w.len());
        for c in 0..w.num_channels() {
            out.extend(w.channel(c).iter().map(|&v| self.map(c, v)));
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("normalizer serializes");
        std::fs::write(path, text).map_err(|e| DataError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DataError::Schema(format!("{}: {e}", path.display())))
    }
}
