use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::recording::{Area, Recording};
use super::DataError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowingConfig {
    pub interval_length_s: f64,
    pub interval_gap_s: f64,
    pub sample_rate_hz: f64,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self {
            interval_length_s: 10.0,
            interval_gap_s: 2.0,
            sample_rate_hz: 100.0,
        }
    }
}

impl WindowingConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(DataError::Config("sample rate must be positive".into()));
        }
        if self.gap_frames() == 0 {
            return Err(DataError::Config(format!(
                "interval gap {} s is shorter than one frame",
                self.interval_gap_s
            )));
        }
        if self.length_frames() == 0 {
            return Err(DataError::Config("interval length is shorter than one frame".into()));
        }
        Ok(())
    }

    pub fn length_frames(&self) -> usize {
        (self.interval_length_s * self.sample_rate_hz).round().max(0.0) as usize
    }

    pub fn gap_frames(&self) -> usize {
        (self.interval_gap_s * self.sample_rate_hz).round().max(0.0) as usize
    }
}

/// Contiguous train / eval / test frame ranges in 8:1:1 proportion. The eval
/// and test parts get `floor(T/10)` frames each; train keeps the remainder.
pub fn split_811(frames: usize) -> [Range<usize>; 3] {
    let tenth = frames / 10;
    let train_end = frames - 2 * tenth;
    [0..train_end, train_end..train_end + tenth, train_end + tenth..frames]
}

/// `floor((R − L)/G) + 1` for `R ≥ L`, else 0.
pub fn window_count(range_frames: usize, length_frames: usize, gap_frames: usize) -> usize {
    if range_frames < length_frames || gap_frames == 0 {
        0
    } else {
        (range_frames - length_frames) / gap_frames + 1
    }
}

/// A fixed-length slice of one recording, labelled with its driver.
#[derive(Clone, Debug)]
pub struct Window {
    recording: Arc<Recording>,
    recording_index: usize,
    start: usize,
    len: usize,
    label: usize,
}

impl Window {
    pub fn new(
        recording: Arc<Recording>,
        recording_index: usize,
        start: usize,
        len: usize,
        label: usize,
    ) -> Result<Self, DataError> {
        if start + len > recording.num_frames() || len == 0 {
            return Err(DataError::Schema(format!(
                "window [{start}, {}) exceeds recording {} of {} frames",
                start + len,
                recording.id(),
                recording.num_frames()
            )));
        }
        Ok(Self {
            recording,
            recording_index,
            start,
            len,
            label,
        })
    }

    pub fn driver(&self) -> &str {
        &self.recording.driver
    }

    pub fn label(&self) -> usize {
        self.label
    }

    pub fn area(&self) -> Area {
        self.recording.area
    }

    pub fn recording_id(&self) -> String {
        self.recording.id()
    }

    pub fn recording_index(&self) -> usize {
        self.recording_index
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn frames(&self) -> Range<usize> {
        self.start..self.start + self.len
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_channels(&self) -> usize {
        self.recording.num_channels()
    }

    pub fn recording_channel_names(&self) -> &[String] {
        self.recording.channel_names()
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.recording.channel(c)[self.frames()]
    }

    pub fn channels(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.num_channels()).map(move |c| self.channel(c))
    }

    /// Channel-major `C × len` copy of the samples.
    pub fn to_matrix(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_channels() * self.len);
        for ch in self.channels() {
            out.extend_from_slice(ch);
        }
        out
    }

    pub(crate) fn rebind(&self, recording: Arc<Recording>) -> Window {
        Window {
            recording,
            ..self.clone()
        }
    }
}

/// Windows starting at `range.start`, stepping by the gap, while the whole
/// window fits inside `range`.
pub fn make_windows(
    recording: &Arc<Recording>,
    recording_index: usize,
    label: usize,
    range: Range<usize>,
    cfg: &WindowingConfig,
) -> Result<Vec<Window>, DataError> {
    cfg.validate()?;
    if range.end > recording.num_frames() {
        return Err(DataError::Schema(format!(
            "range end {} beyond recording {}",
            range.end,
            recording.id()
        )));
    }
    let (len, gap) = (cfg.length_frames(), cfg.gap_frames());
    let count = window_count(range.len(), len, gap);
    (0..count)
        .map(|i| Window::new(recording.clone(), recording_index, range.start + i * gap, len, label))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn split_examples() {
        assert_eq!(split_811(1000), [0..800, 800..900, 900..1000]);
        let s = split_811(1001);
        assert_eq!([s[0].len(), s[1].len(), s[2].len()], [801, 100, 100]);
    }

    #[test]
    fn count_examples() {
        assert_eq!(window_count(24_000, 1000, 200), 116);
        assert_eq!(window_count(1000, 1000, 200), 1);
        assert_eq!(window_count(999, 1000, 200), 0);
    }

    #[test]
    fn zero_gap_is_rejected() {
        let cfg = WindowingConfig {
            interval_gap_s: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    fn recording(frames: usize) -> Arc<Recording> {
        Arc::new(
            Recording::new(
                "d",
                Area::Highway,
                vec!["a".into()],
                frames,
                (0..frames).map(|v| v as f64).collect(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn windows_stay_inside_their_split() {
        let rec = recording(23_880);
        let cfg = WindowingConfig::default();
        for range in split_811(rec.num_frames()) {
            for w in make_windows(&rec, 0, 0, range.clone(), &cfg).unwrap() {
                assert!(w.frames().start >= range.start && w.frames().end <= range.end);
                assert_eq!(w.channel(0)[0], w.start() as f64);
            }
        }
    }

    proptest! {
        #[test]
        fn count_formula_matches_enumeration(r in 0usize..5000, l in 1usize..1500, g in 1usize..400) {
            let enumerated = (0..).map(|i| i * g).take_while(|s| s + l <= r).count();
            prop_assert_eq!(window_count(r, l, g), enumerated);
        }
    }
}
