//! End-to-end runs: data preparation, encoder and classifier training,
//! evaluation, sweeps and projections, plus the on-disk artifact layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::synth::{generate_synthetic, DriverProfile, SynthConfig};
use crate::data::{
    load_recordings, write_dataset, ChannelGroup, ChannelSelection, DataError, Dataset, Normalizer, Recording, Split,
    Window, WindowingConfig,
};
use crate::encoder::{load_checkpoint, save_checkpoint, Encoder, EncoderConfig, EncoderError};
use crate::eval::{
    nway_accuracy, project_2d, EvalConfig, EvalError, EvalReport, Point2, ProjectionMethod, ScoredSplit, TableRow,
    TsneConfig,
};
use crate::gbdt::{GbdtConfig, GbdtError, GbdtModel};
use crate::training::{train, EpochRecord, TrainConfig, TrainError};

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const CHECKPOINT_FILE: &str = "encoder.ckpt";
pub const NORMALIZER_FILE: &str = "normalizer.json";
pub const GBDT_FILE: &str = "gbdt.json";
pub const LOSS_HISTORY_FILE: &str = "loss_history.csv";
pub const TRAIN_MANIFEST_FILE: &str = "train_manifest.json";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";
pub const ABLATION_REPORT_FILE: &str = "ablation_report.json";
pub const PROJECTION_FILE: &str = "projection.csv";

const EMBED_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("{path}: {reason}")]
    Io { path: PathBuf, reason: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Gbdt(#[from] GbdtError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

impl PipelineError {
    fn io(path: &Path, e: impl ToString) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    }

    /// Whether the failure stems from bad input (config, data, artifacts)
    /// rather than from the computation itself.
    pub fn is_validation(&self) -> bool {
        match self {
            PipelineError::Config(_) | PipelineError::MissingArtifact(_) => true,
            PipelineError::Io { .. } => false,
            PipelineError::Data(e) => !matches!(e, DataError::Io { .. }),
            PipelineError::Encoder(e) => matches!(
                e,
                EncoderError::Config(_) | EncoderError::Checkpoint { .. } | EncoderError::WindowShape { .. }
            ),
            PipelineError::Train(e) => matches!(
                e,
                TrainError::Config(_) | TrainError::TooFewWindows { .. } | TrainError::TooFewDrivers(_)
            ),
            PipelineError::Gbdt(e) => matches!(e, GbdtError::Config(_) | GbdtError::Model { .. }),
            PipelineError::Eval(e) => matches!(e, EvalError::Config(_)),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset manifest to load; synthetic data is generated when absent.
    pub manifest: Option<PathBuf>,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub feature_groups: bool,
    pub interval_lengths_s: Vec<f64>,
    pub tcn_embedding_sizes: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            feature_groups: true,
            interval_lengths_s: vec![5.0, 10.0, 15.0],
            tcn_embedding_sizes: vec![16, 32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectConfig {
    pub split: Split,
    pub method: ProjectionMethod,
    pub tsne: TsneConfig,
}

impl Default for ProjectConfig {
    fn default() -> Self {
        Self {
            split: Split::Test,
            method: ProjectionMethod::Pca,
            tsne: TsneConfig::default(),
        }
    }
}

/// Everything a run needs. `seed` is copied into the training, classifier,
/// evaluation and t-SNE seeds on [`RunConfig::resolve`]; the synthetic
/// dataset keeps its own seed so the data can stay fixed across runs.
/// `encoder.in_channels` and `encoder.window_length` always follow the data.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub windowing: WindowingConfig,
    pub encoder: EncoderConfig,
    pub training: TrainConfig,
    pub gbdt: GbdtConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub project: ProjectConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string().trim().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Err(PipelineError::MissingArtifact(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Propagates the run seed into every seeded component.
    pub fn resolve(mut self) -> Self {
        self.training.seed = self.seed;
        self.gbdt.seed = self.seed;
        self.eval.seed = self.seed;
        self.project.tsne.seed = self.seed;
        self
    }

    /// Checks everything that can be checked before data is touched.
    pub fn validate(&self) -> Result<(), PipelineError> {
        self.windowing.validate()?;
        self.training.validate()?;
        self.gbdt.validate()?;
        if self.data.manifest.is_none() {
            self.data.synth.validate()?;
        }
        for &l in &self.ablate.interval_lengths_s {
            if !(l > 0.0 && l.is_finite()) {
                return Err(PipelineError::Config(format!("interval length {l} must be positive")));
            }
        }
        Ok(())
    }

    /// Encoder config matched to the channel count and window length of `ds`.
    pub fn encoder_for(&self, ds: &Dataset) -> Result<EncoderConfig, PipelineError> {
        let cfg = EncoderConfig {
            in_channels: ds.num_channels(),
            window_length: ds.window_frames(),
            ..self.encoder.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Raw recordings named by the config: loaded from a manifest, or generated.
pub fn load_or_generate(cfg: &DataConfig) -> Result<Vec<Recording>, PipelineError> {
    match &cfg.manifest {
        Some(path) => {
            if !path.exists() {
                return Err(PipelineError::MissingArtifact(path.clone()));
            }
            Ok(load_recordings(path)?)
        }
        None => synthesize(&cfg.synth),
    }
}

pub fn synthesize(cfg: &SynthConfig) -> Result<Vec<Recording>, PipelineError> {
    let profiles = DriverProfile::family(cfg.drivers, cfg.seed, cfg.separation)?;
    Ok(generate_synthetic(&profiles, cfg)?)
}

/// A dataset normalized with statistics of its own train split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub normalizer: Normalizer,
}

impl Prepared {
    pub fn new(recordings: Vec<Recording>, windowing: &WindowingConfig) -> Result<Self, PipelineError> {
        Self::from_dataset(&Dataset::build(recordings, windowing)?)
    }

    pub fn from_dataset(raw: &Dataset) -> Result<Self, PipelineError> {
        let normalizer = raw.fit_normalizer()?;
        Ok(Self {
            dataset: raw.normalized(&normalizer)?,
            normalizer,
        })
    }
}

/// Encoder plus classifier, everything needed to score normalized windows.
#[derive(Clone, Debug)]
pub struct Model {
    pub encoder: Encoder,
    pub gbdt: GbdtModel,
}

/// Eval-mode embeddings, materializing only a chunk of windows at a time.
pub fn embed_windows(encoder: &Encoder, windows: &[Window]) -> Result<Vec<Vec<f64>>, PipelineError> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EMBED_CHUNK) {
        let mats: Vec<Vec<f64>> = chunk.iter().map(|w| w.to_matrix()).collect();
        let refs: Vec<&[f64]> = mats.iter().map(|m| &m[..]).collect();
        out.extend(encoder.embed_batch(&refs)?);
    }
    Ok(out)
}

impl Model {
    pub fn embed(&self, windows: &[Window]) -> Result<Vec<Vec<f64>>, PipelineError> {
        embed_windows(&self.encoder, windows)
    }

    pub fn predict_proba(&self, windows: &[Window]) -> Result<Vec<Vec<f64>>, PipelineError> {
        Ok(self.gbdt.predict_proba(&self.embed(windows)?))
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub wall_time_s: f64,
}

/// Trains the encoder on the train split, then the classifier on train-split
/// embeddings.
pub fn train_model(cfg: &RunConfig, ds: &Dataset) -> Result<Trained, PipelineError> {
    let enc_cfg = cfg.encoder_for(ds)?;
    let train_windows = ds.split(Split::Train);
    let outcome = train(train_windows, ds.drivers(), &enc_cfg, &cfg.training)?;
    let x = embed_windows(&outcome.encoder, train_windows)?;
    let y: Vec<usize> = train_windows.iter().map(|w| w.label()).collect();
    let gbdt = GbdtModel::fit(&x, &y, ds.num_drivers(), &cfg.gbdt)?;
    Ok(Trained {
        model: Model {
            encoder: outcome.encoder,
            gbdt,
        },
        history: outcome.history,
        wall_time_s: outcome.wall_time_s,
    })
}

/// Probabilities, labels and areas of one split.
pub struct Scored {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub areas: Vec<crate::data::Area>,
}

impl Scored {
    pub fn as_split(&self) -> ScoredSplit<'_> {
        ScoredSplit {
            probs: &self.probs,
            labels: &self.labels,
            areas: &self.areas,
        }
    }
}

pub fn score(model: &Model, ds: &Dataset, split: Split) -> Result<Scored, PipelineError> {
    let ws = ds.split(split);
    Ok(Scored {
        probs: model.predict_proba(ws)?,
        labels: ws.iter().map(|w| w.label()).collect(),
        areas: ws.iter().map(|w| w.area()).collect(),
    })
}

/// Full protocol suite on the test split; thresholds are chosen on eval.
pub fn evaluate(model: &Model, ds: &Dataset, cfg: &EvalConfig) -> Result<EvalReport, PipelineError> {
    let test = score(model, ds, Split::Test)?;
    let sel = score(model, ds, Split::Eval)?;
    Ok(EvalReport::evaluate(
        ds.drivers(),
        &test.as_split(),
        &sel.as_split(),
        cfg,
    )?)
}

pub fn pairwise_accuracy(model: &Model, ds: &Dataset, split: Split, cfg: &EvalConfig) -> Result<f64, PipelineError> {
    let s = score(model, ds, split)?;
    Ok(nway_accuracy(&s.probs, &s.labels, 2, cfg)?)
}

/// Each group removed in turn (groups absent from the data are skipped),
/// speed plus acceleration alone, and everything.
pub fn ablation_selections(ds: &Dataset) -> Vec<ChannelSelection> {
    let present = ds.groups();
    let mut out: Vec<ChannelSelection> = ChannelGroup::ALL
        .into_iter()
        .filter(|g| *g != ChannelGroup::Uncategorized && present.contains(g))
        .map(|g| ChannelSelection::Remove(vec![g]))
        .collect();
    out.push(ChannelSelection::KeepOnly(vec![
        ChannelGroup::Speed,
        ChannelGroup::Acceleration,
    ]));
    out.push(ChannelSelection::All);
    out
}

/// Retrains on each channel selection and reports eval-split pairwise accuracy.
pub fn ablate_features(
    cfg: &RunConfig,
    raw: &Dataset,
    selections: &[ChannelSelection],
) -> Result<Vec<TableRow>, PipelineError> {
    selections
        .iter()
        .map(|sel| {
            let prepared = Prepared::from_dataset(&raw.mask_groups(sel)?)?;
            let trained = train_model(cfg, &prepared.dataset)?;
            let acc = pairwise_accuracy(&trained.model, &prepared.dataset, Split::Eval, &cfg.eval)?;
            log::info!("ablation {}: pairwise {acc:.4}", sel.label());
            Ok(TableRow {
                setting: sel.label(),
                pairwise_accuracy: acc,
            })
        })
        .collect()
}

/// Rewindows at each interval length (gap unchanged) and retrains.
pub fn interval_sweep(
    cfg: &RunConfig,
    recordings: &[Recording],
    lengths_s: &[f64],
) -> Result<Vec<TableRow>, PipelineError> {
    lengths_s
        .iter()
        .map(|&len| {
            let windowing = WindowingConfig {
                interval_length_s: len,
                ..cfg.windowing.clone()
            };
            let prepared = Prepared::new(recordings.to_vec(), &windowing)?;
            let trained = train_model(cfg, &prepared.dataset)?;
            let acc = pairwise_accuracy(&trained.model, &prepared.dataset, Split::Eval, &cfg.eval)?;
            log::info!("interval {len} s: pairwise {acc:.4}");
            Ok(TableRow {
                setting: format!("{len}s"),
                pairwise_accuracy: acc,
            })
        })
        .collect()
}

/// Varies the TCN embedding size with the wavelet branches left as configured.
pub fn embedding_size_sweep(cfg: &RunConfig, ds: &Dataset, sizes: &[usize]) -> Result<Vec<TableRow>, PipelineError> {
    sizes
        .iter()
        .map(|&size| {
            let mut c = cfg.clone();
            c.encoder.tcn_embedding = size;
            let trained = train_model(&c, ds)?;
            let acc = pairwise_accuracy(&trained.model, ds, Split::Eval, &c.eval)?;
            log::info!("tcn embedding {size}: pairwise {acc:.4}");
            Ok(TableRow {
                setting: format!("tcn_{size}"),
                pairwise_accuracy: acc,
            })
        })
        .collect()
}

pub fn project(model: &Model, ds: &Dataset, cfg: &ProjectConfig) -> Result<Vec<Point2>, PipelineError> {
    let ws = ds.split(cfg.split);
    let labels: Vec<usize> = ws.iter().map(|w| w.label()).collect();
    Ok(project_2d(&model.embed(ws)?, &labels, cfg.method, &cfg.tsne)?)
}

/// Summary of a training run written next to the checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub drivers: Vec<String>,
    pub channels: Vec<String>,
    pub window_frames: usize,
    pub windows_per_split: BTreeMap<String, usize>,
    pub encoder: EncoderConfig,
    pub encoder_parameters: usize,
    pub epochs: usize,
    pub final_loss: Option<f64>,
    pub wall_time_s: f64,
    pub files: Vec<String>,
}

pub fn ensure_dir(dir: &Path) -> Result<(), PipelineError> {
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

pub fn write_resolved_config(cfg: &RunConfig, dir: &Path) -> Result<(), PipelineError> {
    ensure_dir(dir)?;
    write_text(&dir.join(RESOLVED_CONFIG_FILE), &cfg.to_toml())
}

pub fn loss_history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,learning_rate,mean_loss\n");
    for r in history {
        s.push_str(&format!("{},{:e},{:e}\n", r.epoch, r.learning_rate, r.mean_loss));
    }
    s
}

pub fn projection_csv(points: &[Point2], drivers: &[String]) -> String {
    let mut s = String::from("x,y,label,driver\n");
    for p in points {
        s.push_str(&format!("{:e},{:e},{},{}\n", p.x, p.y, p.label, drivers[p.label]));
    }
    s
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut s = String::from("setting,pairwise_accuracy\n");
    for r in rows {
        s.push_str(&format!("{},{}\n", r.setting, r.pairwise_accuracy));
    }
    s
}

/// Writes checkpoint, normalizer, classifier, loss history and manifest.
pub fn save_trained(dir: &Path, trained: &Trained, prepared: &Prepared) -> Result<TrainManifest, PipelineError> {
    ensure_dir(dir)?;
    save_checkpoint(&trained.model.encoder, &dir.join(CHECKPOINT_FILE))?;
    prepared.normalizer.save(&dir.join(NORMALIZER_FILE))?;
    trained.model.gbdt.save(&dir.join(GBDT_FILE))?;
    write_text(&dir.join(LOSS_HISTORY_FILE), &loss_history_csv(&trained.history))?;
    let ds = &prepared.dataset;
    let manifest = TrainManifest {
        drivers: ds.drivers().to_vec(),
        channels: ds.channel_names().to_vec(),
        window_frames: ds.window_frames(),
        windows_per_split: Split::ALL
            .iter()
            .map(|&s| (s.name().to_string(), ds.split(s).len()))
            .collect(),
        encoder: trained.model.encoder.config.clone(),
        encoder_parameters: trained.model.encoder.params.num_parameters(),
        epochs: trained.history.len(),
        final_loss: trained.history.last().map(|r| r.mean_loss),
        wall_time_s: trained.wall_time_s,
        files: [CHECKPOINT_FILE, NORMALIZER_FILE, GBDT_FILE, LOSS_HISTORY_FILE]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_text(&dir.join(TRAIN_MANIFEST_FILE), &(text + "\n"))?;
    Ok(manifest)
}

/// Reads the artifacts written by [`save_trained`].
pub fn load_trained(dir: &Path) -> Result<(Model, Normalizer), PipelineError> {
    for f in [CHECKPOINT_FILE, NORMALIZER_FILE, GBDT_FILE] {
        let p = dir.join(f);
        if !p.exists() {
            return Err(PipelineError::MissingArtifact(p));
        }
    }
    let encoder = load_checkpoint(&dir.join(CHECKPOINT_FILE), None)?;
    let gbdt = GbdtModel::load(&dir.join(GBDT_FILE))?;
    let normalizer = Normalizer::load(&dir.join(NORMALIZER_FILE))?;
    if gbdt.num_features != encoder.config.embedding_size() {
        return Err(PipelineError::Config(format!(
            "classifier expects {} features but the encoder emits {}",
            gbdt.num_features,
            encoder.config.embedding_size()
        )));
    }
    Ok((Model { encoder, gbdt }, normalizer))
}

/// Builds the dataset from the config and normalizes it with stored statistics.
pub fn dataset_with(cfg: &RunConfig, normalizer: &Normalizer) -> Result<Dataset, PipelineError> {
    let raw = Dataset::build(load_or_generate(&cfg.data)?, &cfg.windowing)?;
    Ok(raw.normalized(normalizer)?)
}

/// Writes a synthetic dataset in the on-disk format; returns the manifest path.
pub fn write_synthetic(cfg: &SynthConfig, dir: &Path) -> Result<PathBuf, PipelineError> {
    let recs = synthesize(cfg)?;
    Ok(write_dataset(dir, &recs, cfg.sample_rate_hz)?)
}
