//! Recordings and their on-disk form: one delimited-text file per
//! (driver, area) plus a JSON manifest listing them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::channels::{CHANNELS, NUM_CHANNELS, UNITS};
use super::DataError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Area {
    Highway,
    Suburban,
    Urban,
    Tutorial,
}

impl Area {
    pub const ALL: [Area; 4] = [Area::Highway, Area::Suburban, Area::Urban, Area::Tutorial];

    pub fn name(self) -> &'static str {
        match self {
            Area::Highway => "highway",
            Area::Suburban => "suburban",
            Area::Urban => "urban",
            Area::Tutorial => "tutorial",
        }
    }

    /// Mean seconds per driver spent in the area in the reference study.
    pub fn typical_duration_s(self) -> f64 {
        match self {
            Area::Highway => 238.8,
            Area::Suburban => 251.7,
            Area::Urban => 196.9,
            Area::Tutorial => 171.9,
        }
    }
}

impl fmt::Display for Area {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Area {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Area::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| DataError::UnknownArea(s.to_string()))
    }
}

/// One continuous drive of one driver through one area.
///
/// Samples are stored channel-major: channel `c` occupies
/// `data[c * frames .. (c + 1) * frames]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub driver: String,
    pub area: Area,
    channels: Vec<String>,
    frames: usize,
    data: Vec<f64>,
}

impl Recording {
    pub fn new(
        driver: impl Into<String>,
        area: Area,
        channels: Vec<String>,
        frames: usize,
        data: Vec<f64>,
    ) -> Result<Self, DataError> {
        if channels.is_empty() || data.len() != channels.len() * frames {
            return Err(DataError::Schema(format!(
                "{} channels × {} frames does not match {} samples",
                channels.len(),
                frames,
                data.len()
            )));
        }
        Ok(Self {
            driver: driver.into(),
            area,
            channels,
            frames,
            data,
        })
    }

    pub fn id(&self) -> String {
        format!("{}/{}", self.driver, self.area)
    }

    pub fn num_frames(&self) -> usize {
        self.frames
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channels
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.data[c * self.frames..(c + 1) * self.frames]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.data[c * self.frames..(c + 1) * self.frames]
    }

    /// Copy restricted to the given channel indices (in the given order).
    pub fn select_channels(&self, keep: &[usize]) -> Recording {
        let mut data = Vec::with_capacity(keep.len() * self.frames);
        for &c in keep {
            data.extend_from_slice(self.channel(c));
        }
        Recording {
            driver: self.driver.clone(),
            area: self.area,
            channels: keep.iter().map(|&c| self.channels[c].clone()).collect(),
            frames: self.frames,
            data,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), DataError> {
        let file = File::create(path).map_err(|e| DataError::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| DataError::io(path, e);
        writeln!(out, "{}", self.channels.join(",")).map_err(io)?;
        let mut line = String::new();
        for t in 0..self.frames {
            line.clear();
            for c in 0..self.channels.len() {
                if c > 0 {
                    line.push(',');
                }
                line.push_str(&format_sample(self.data[c * self.frames + t]));
            }
            writeln!(out, "{line}").map_err(io)?;
        }
        out.flush().map_err(io)
    }
}

fn format_sample(v: f64) -> String {
    if v == v.trunc() && v.abs() < 1e15 {
        format!("{}", v as i64)
    } else {
        format!("{v:.6}")
    }
}

/// Reads one recording file, reordering columns into canonical order.
///
/// Missing canonical channels are an error; extra columns are ignored with a
/// warning.
pub fn load_recording_csv(path: &Path, driver: &str, area: Area) -> Result<Recording, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Csv(format!("{}: {e}", path.display())))?;
    let header = reader
        .headers()
        .map_err(|e| DataError::Csv(format!("{}: {e}", path.display())))?
        .clone();
    let mut columns = Vec::with_capacity(NUM_CHANNELS);
    for name in CHANNELS {
        let col = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingChannel {
                file: path.display().to_string(),
                channel: name.to_string(),
            })?;
        columns.push(col);
    }
    for h in header.iter().filter(|h| !CHANNELS.contains(h)) {
        log::warn!("{}: ignoring extra column '{h}'", path.display());
    }
    let mut rows: Vec<Vec<f64>> = vec![Vec::new(); NUM_CHANNELS];
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| DataError::Csv(format!("{}: {e}", path.display())))?;
        for (c, &col) in columns.iter().enumerate() {
            let cell = record.get(col).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| DataError::NonNumeric {
                file: path.display().to_string(),
                row: r + 2,
                column: CHANNELS[c].to_string(),
                value: cell.to_string(),
            })?;
            rows[c].push(v);
        }
    }
    let frames = rows[0].len();
    Recording::new(
        driver,
        area,
        CHANNELS.iter().map(|s| s.to_string()).collect(),
        frames,
        rows.concat(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub driver: String,
    pub area: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: PathBuf,
}

/// Dataset manifest: which file holds which (driver, area) drive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub sample_rate_hz: f64,
    pub units: BTreeMap<String, String>,
    pub recordings: Vec<ManifestEntry>,
}

impl Manifest {
    pub const VERSION: u32 = 1;

    pub fn new(sample_rate_hz: f64) -> Self {
        Self {
            version: Self::VERSION,
            sample_rate_hz,
            units: CHANNELS
                .iter()
                .zip(UNITS)
                .map(|(c, u)| (c.to_string(), u.to_string()))
                .collect(),
            recordings: Vec::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        if manifest.version != Self::VERSION {
            return Err(DataError::Manifest(format!(
                "{}: unsupported manifest version {}",
                path.display(),
                manifest.version
            )));
        }
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<(), DataError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| DataError::io(path, e))
    }

    pub fn driver_count(&self) -> usize {
        let mut drivers: Vec<&str> = self.recordings.iter().map(|e| e.driver.as_str()).collect();
        drivers.sort_unstable();
        drivers.dedup();
        drivers.len()
    }
}

/// Loads every recording listed in a manifest.
pub fn load_recordings(manifest_path: &Path) -> Result<Vec<Recording>, DataError> {
    let manifest = Manifest::read(manifest_path)?;
    if manifest.recordings.is_empty() {
        return Err(DataError::EmptyDataset(format!(
            "{} lists no recordings",
            manifest_path.display()
        )));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    manifest
        .recordings
        .iter()
        .map(|e| {
            let area: Area = e.area.parse()?;
            let path = if e.path.is_absolute() {
                e.path.clone()
            } else {
                base.join(&e.path)
            };
            load_recording_csv(&path, &e.driver, area)
        })
        .collect()
}

/// Writes recordings as CSV files plus `manifest.json` into `dir`.
pub fn write_dataset(dir: &Path, recordings: &[Recording], sample_rate_hz: f64) -> Result<PathBuf, DataError> {
    std::fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let mut manifest = Manifest::new(sample_rate_hz);
    for rec in recordings {
        let file = PathBuf::from(format!("{}_{}.csv", rec.driver, rec.area));
        rec.write_csv(&dir.join(&file))?;
        manifest.recordings.push(ManifestEntry {
            driver: rec.driver.clone(),
            area: rec.area.name().to_string(),
            path: file,
        });
    }
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}
