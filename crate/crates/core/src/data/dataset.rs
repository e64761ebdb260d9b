use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::channels::{channel_index, ChannelGroup, ChannelSelection};
use super::normalize::Normalizer;
use super::recording::Recording;
use super::windowing::{make_windows, split_811, Window, WindowingConfig};
use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Eval, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| DataError::Config(format!("unknown split '{s}'")))
    }
}

/// Windowed recordings with driver labels, split 8:1:1 in time per recording.
///
/// Labels index [`Dataset::drivers`], which is sorted. Immutable once built;
/// masking and normalization return new datasets.
#[derive(Clone, Debug)]
pub struct Dataset {
    recordings: Vec<Arc<Recording>>,
    drivers: Vec<String>,
    windowing: WindowingConfig,
    splits: [Vec<Window>; 3],
}

impl Dataset {
    pub fn build(recordings: Vec<Recording>, windowing: &WindowingConfig) -> Result<Self, DataError> {
        windowing.validate()?;
        let first = recordings
            .first()
            .ok_or_else(|| DataError::EmptyDataset("no recordings".into()))?;
        let names = first.channel_names().to_vec();
        if let Some(bad) = recordings.iter().find(|r| r.channel_names() != names.as_slice()) {
            return Err(DataError::Schema(format!(
                "recording {} has a different channel layout",
                bad.id()
            )));
        }
        let mut drivers: Vec<String> = recordings.iter().map(|r| r.driver.clone()).collect();
        drivers.sort();
        drivers.dedup();

        let recordings: Vec<Arc<Recording>> = recordings.into_iter().map(Arc::new).collect();
        let mut splits: [Vec<Window>; 3] = Default::default();
        for (ri, rec) in recordings.iter().enumerate() {
            let label = drivers.binary_search(&rec.driver).expect("driver listed");
            for (s, range) in split_811(rec.num_frames()).into_iter().enumerate() {
                splits[s].extend(make_windows(rec, ri, label, range, windowing)?);
            }
        }
        for (label, d) in drivers.iter().enumerate() {
            if !splits[0].iter().any(|w| w.label() == label) {
                return Err(DataError::TooFewWindows {
                    driver: d.clone(),
                    split: Split::Train.name().into(),
                });
            }
        }
        Ok(Self {
            recordings,
            drivers,
            windowing: windowing.clone(),
            splits,
        })
    }

    pub fn drivers(&self) -> &[String] {
        &self.drivers
    }

    pub fn num_drivers(&self) -> usize {
        self.drivers.len()
    }

    pub fn windowing(&self) -> &WindowingConfig {
        &self.windowing
    }

    pub fn recordings(&self) -> &[Arc<Recording>] {
        &self.recordings
    }

    pub fn channel_names(&self) -> &[String] {
        self.recordings[0].channel_names()
    }

    pub fn num_channels(&self) -> usize {
        self.recordings[0].num_channels()
    }

    pub fn window_frames(&self) -> usize {
        self.windowing.length_frames()
    }

    pub fn split(&self, split: Split) -> &[Window] {
        &self.splits[split as usize]
    }

    /// Window indices of `split` grouped by label.
    pub fn indices_by_label(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.drivers.len()];
        for (i, w) in self.split(split).iter().enumerate() {
            out[w.label()].push(i);
        }
        out
    }

    fn remap(&self, recordings: Vec<Recording>) -> Dataset {
        let recordings: Vec<Arc<Recording>> = recordings.into_iter().map(Arc::new).collect();
        let splits = self.splits.clone().map(|ws| {
            ws.iter()
                .map(|w| w.rebind(recordings[w.recording_index()].clone()))
                .collect()
        });
        Dataset {
            recordings,
            drivers: self.drivers.clone(),
            windowing: self.windowing.clone(),
            splits,
        }
    }

    /// Keeps only channels whose group survives `selection`, preserving order.
    pub fn mask_groups(&self, selection: &ChannelSelection) -> Result<Dataset, DataError> {
        let kept_canonical = selection.kept_channels();
        let mut keep = Vec::new();
        for (i, name) in self.channel_names().iter().enumerate() {
            let canonical = channel_index(name)
                .ok_or_else(|| DataError::Schema(format!("channel '{name}' has no group; cannot mask")))?;
            if kept_canonical.contains(&canonical) {
                keep.push(i);
            }
        }
        if keep.is_empty() {
            return Err(DataError::Config(format!(
                "selection {} leaves no channels",
                selection.label()
            )));
        }
        Ok(self.remap(self.recordings.iter().map(|r| r.select_channels(&keep)).collect()))
    }

    pub fn fit_normalizer(&self) -> Result<Normalizer, DataError> {
        Normalizer::fit(self.split(Split::Train))
    }

    pub fn normalized(&self, norm: &Normalizer) -> Result<Dataset, DataError> {
        let recs = self
            .recordings
            .iter()
            .map(|r| norm.apply_recording(r))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.remap(recs))
    }

    /// Groups present in the current channel layout.
    pub fn groups(&self) -> Vec<ChannelGroup> {
        let mut gs: Vec<ChannelGroup> = self
            .channel_names()
            .iter()
            .filter_map(|n| channel_index(n).and_then(ChannelGroup::of_channel))
            .collect();
        gs.dedup();
        gs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::channels::{CHANNELS, NUM_CHANNELS};
    use crate::data::recording::Area;

    fn rec(driver: &str, area: Area, frames: usize, offset: f64) -> Recording {
        let data = (0..NUM_CHANNELS * frames)
            .map(|i| offset + (i % frames) as f64 * 0.001 + (i / frames) as f64)
            .collect();
        Recording::new(
            driver,
            area,
            CHANNELS.iter().map(|s| s.to_string()).collect(),
            frames,
            data,
        )
        .unwrap()
    }

    fn small() -> Dataset {
        let recs = vec![
            rec("b", Area::Urban, 12_000, 0.0),
            rec("a", Area::Urban, 11_000, 1.0),
            rec("a", Area::Highway, 15_000, 2.0),
        ];
        Dataset::build(recs, &WindowingConfig::default()).unwrap()
    }

    #[test]
    fn labels_follow_sorted_driver_ids() {
        let ds = small();
        assert_eq!(ds.drivers(), ["a", "b"]);
        for s in Split::ALL {
            for w in ds.split(s) {
                assert_eq!(ds.drivers()[w.label()], w.driver());
            }
        }
    }

    #[test]
    fn no_frame_is_shared_between_splits() {
        let ds = small();
        for (ri, rec) in ds.recordings().iter().enumerate() {
            let mut owner = vec![None; rec.num_frames()];
            for s in Split::ALL {
                for w in ds.split(s).iter().filter(|w| w.recording_index() == ri) {
                    for t in w.frames() {
                        assert!(owner[t].is_none() || owner[t] == Some(s));
                        owner[t] = Some(s);
                    }
                }
            }
        }
    }

    #[test]
    fn masking_shrinks_channels_and_keeps_order() {
        let ds = small();
        let none = ds.mask_groups(&ChannelSelection::All).unwrap();
        assert_eq!(none.num_channels(), 31);
        assert_eq!(
            none.split(Split::Train)[5].to_matrix(),
            ds.split(Split::Train)[5].to_matrix()
        );

        let no_turn = ds
            .mask_groups(&ChannelSelection::Remove(vec![ChannelGroup::TurnIndicators]))
            .unwrap();
        assert_eq!(no_turn.num_channels(), 29);
        assert_eq!(no_turn.split(Split::Eval)[0].num_channels(), 29);

        let sa = ds
            .mask_groups(&ChannelSelection::KeepOnly(vec![
                ChannelGroup::Speed,
                ChannelGroup::Acceleration,
            ]))
            .unwrap();
        assert_eq!(sa.num_channels(), 8);
        assert_eq!(sa.channel_names()[3], "Speed (x)");
        let w = &sa.split(Split::Train)[0];
        assert_eq!(w.channel(3), ds.split(Split::Train)[0].channel(22));
        assert_eq!(sa.groups(), vec![ChannelGroup::Acceleration, ChannelGroup::Speed]);
    }

    #[test]
    fn normalized_dataset_uses_train_statistics() {
        let ds = small();
        let norm = ds.fit_normalizer().unwrap();
        let nd = ds.normalized(&norm).unwrap();
        let w = &ds.split(Split::Test)[0];
        assert_eq!(nd.split(Split::Test)[0].to_matrix(), norm.apply_window(w).unwrap());
    }

    #[test]
    fn driver_without_training_windows_is_an_error() {
        let recs = vec![rec("a", Area::Urban, 12_000, 0.0), rec("b", Area::Urban, 900, 0.0)];
        assert!(matches!(
            Dataset::build(recs, &WindowingConfig::default()),
            Err(DataError::TooFewWindows { .. })
        ));
    }
}
