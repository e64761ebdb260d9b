//! Encoder optimization: triplet loss with Adam and per-epoch learning-rate
//! decay, or softmax cross-entropy through a linear head.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Window;
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::numerics::{mix_seed, Graph, NumericsError, StreamRng, Tensor, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("driver '{driver}' has {count} training windows; at least 2 are needed")]
    TooFewWindows { driver: String, count: usize },
    #[error("need at least two drivers, got {0}")]
    TooFewDrivers(usize),
    #[error("embedding lengths differ: {0}, {1}, {2}")]
    LengthMismatch(usize, usize, usize),
    #[error("non-finite loss at epoch {epoch}, batch {batch} (learning rate {lr:e})")]
    NonFinite { epoch: usize, batch: usize, lr: f64 },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Triplet,
    CrossEntropy,
}

/// How triplets are formed in triplet mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mining {
    /// `batch_size` independent random triplets, each on its own tape.
    #[default]
    Random,
    /// As `Random`, but the negative is the closest of a few random
    /// candidates that is still farther than the positive.
    SemiHard,
    /// Embed `batch_size` windows (a few drivers, several windows each) once
    /// and average the loss over every valid triplet inside the batch.
    BatchAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub margin: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub mode: TrainMode,
    pub mining: Mining,
    /// Windows drawn per driver for [`Mining::BatchAll`]; `batch_size` then
    /// counts windows. See [`TrainConfig::batch_groups`].
    pub windows_per_driver: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            decay: 0.975,
            margin: 1.0,
            batch_size: 32,
            epochs: 12,
            seed: 0,
            mode: TrainMode::Triplet,
            mining: Mining::BatchAll,
            windows_per_driver: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(TrainError::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(TrainError::Config(format!(
                "decay must lie in (0, 1], got {}",
                self.decay
            )));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be positive".into()));
        }
        if self.mining == Mining::BatchAll && self.mode == TrainMode::Triplet {
            if self.windows_per_driver < 2 {
                return Err(TrainError::Config("windows_per_driver must be at least 2".into()));
            }
        }
        Ok(())
    }

    /// `lr0 · decay^epoch`.
    /// `(drivers, windows per driver)` of one batch-all batch: `batch_size`
    /// windows in groups of `windows_per_driver`, but never fewer than two
    /// drivers with two windows each.
    pub fn batch_groups(&self) -> (usize, usize) {
        let drivers = (self.batch_size / self.windows_per_driver).max(2);
        (drivers, (self.batch_size / drivers).max(2))
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay.powi(epoch as i32)
    }
}

/// `max(0, ‖r−p‖² − ‖r−n‖² + α)`.
pub fn triplet_loss(r: &[f64], p: &[f64], n: &[f64], margin: f64) -> Result<f64, TrainError> {
    if r.len() != p.len() || r.len() != n.len() {
        return Err(TrainError::LengthMismatch(r.len(), p.len(), n.len()));
    }
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    Ok((sq(r, p) - sq(r, n) + margin).max(0.0))
}

/// Graph form of [`triplet_loss`] on rows 0, 1, 2 (anchor, positive,
/// negative) of a `[3×E]` embedding matrix.
pub fn triplet_loss_graph(g: &mut Graph, emb: Var, margin: f64) -> Result<Var, NumericsError> {
    let r = g.select_rows(emb, &[0])?;
    let p = g.select_rows(emb, &[1])?;
    let n = g.select_rows(emb, &[2])?;
    let d_rp = g.squared_l2_distance(r, p)?;
    let d_rn = g.squared_l2_distance(r, n)?;
    let diff = g.sub(d_rp, d_rn)?;
    let shifted = g.add_scalar(diff, margin);
    Ok(g.relu(shifted))
}

/// Mean of [`triplet_loss`] over every `(a, p, n)` in the batch with
/// `labels[a] == labels[p]`, `a != p` and `labels[n] != labels[a]`.
///
/// Returns the loss, its gradient with respect to each embedding row, and
/// the number of triplets (zero when the batch holds none).
pub fn batch_all_triplet_loss(emb: &[Vec<f64>], labels: &[usize], margin: f64) -> (f64, Vec<Vec<f64>>, usize) {
    let n = emb.len();
    let dim = emb.first().map_or(0, Vec::len);
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let dist: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| sq(&emb[i], &emb[j])).collect()).collect();
    let mut grad = vec![vec![0.0; dim]; n];
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..n {
        for p in (0..n).filter(|&p| p != a && labels[p] == labels[a]) {
            for q in (0..n).filter(|&q| labels[q] != labels[a]) {
                count += 1;
                let l = dist[a][p] - dist[a][q] + margin;
                if l <= 0.0 {
                    continue;
                }
                total += l;
                // d/de_a = 2(e_q - e_p), d/de_p = 2(e_p - e_a), d/de_q = 2(e_a - e_q)
                for d in 0..dim {
                    let (ea, ep, eq) = (emb[a][d], emb[p][d], emb[q][d]);
                    grad[a][d] += 2.0 * (eq - ep);
                    grad[p][d] += 2.0 * (ep - ea);
                    grad[q][d] += 2.0 * (ea - eq);
                }
            }
        }
    }
    if count == 0 {
        return (0.0, grad, 0);
    }
    let scale = 1.0 / count as f64;
    grad.iter_mut().flatten().for_each(|g| *g *= scale);
    (total * scale, grad, count)
}

/// Window indices of one training triplet.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Labels of a split with per-driver index lists.
#[derive(Clone, Debug)]
pub struct TripletSampler {
    labels: Vec<usize>,
    by_label: Vec<Vec<usize>>,
}

impl TripletSampler {
    /// `names[label]` is used in error messages.
    pub fn new(labels: &[usize], names: &[String]) -> Result<Self, TrainError> {
        let k = names.len();
        let mut by_label = vec![Vec::new(); k];
        for (i, &l) in labels.iter().enumerate() {
            if l >= k {
                return Err(TrainError::Config(format!("label {l} has no driver name")));
            }
            by_label[l].push(i);
        }
        let present = by_label.iter().filter(|v| !v.is_empty()).count();
        if present < 2 {
            return Err(TrainError::TooFewDrivers(present));
        }
        for (l, v) in by_label.iter().enumerate() {
            if v.len() < 2 {
                return Err(TrainError::TooFewWindows {
                    driver: names[l].clone(),
                    count: v.len(),
                });
            }
        }
        Ok(Self {
            labels: labels.to_vec(),
            by_label,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Anchor uniform over windows, positive uniform over the anchor's other
    /// windows, negative uniform over every other driver's windows.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Triplet {
        let anchor = rng.random_range(0..self.labels.len());
        let own = &self.by_label[self.labels[anchor]];
        let mut pos = own[rng.random_range(0..own.len() - 1)];
        if pos == anchor {
            pos = own[own.len() - 1];
        }
        let others = self.labels.len() - own.len();
        let mut pick = rng.random_range(0..others);
        let mut negative = 0;
        for (l, members) in self.by_label.iter().enumerate() {
            if l == self.labels[anchor] {
                continue;
            }
            if pick < members.len() {
                negative = members[pick];
                break;
            }
            pick -= members.len();
        }
        Triplet {
            anchor,
            positive: pos,
            negative,
        }
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Triplet> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// `drivers` distinct drivers (all of them if fewer exist), then up to
    /// `per_driver` distinct windows of each, grouped by driver.
    pub fn sample_groups<R: Rng + ?Sized>(&self, drivers: usize, per_driver: usize, rng: &mut R) -> Vec<usize> {
        let present: Vec<usize> = (0..self.by_label.len())
            .filter(|&l| !self.by_label[l].is_empty())
            .collect();
        let chosen = sample(rng, present.len(), drivers.min(present.len()));
        let mut out = Vec::with_capacity(drivers * per_driver);
        for d in chosen {
            let members = &self.by_label[present[d]];
            out.extend(
                sample(rng, members.len(), per_driver.min(members.len()))
                    .into_iter()
                    .map(|j| members[j]),
            );
        }
        out
    }

    fn random_negative<R: Rng + ?Sized>(&self, anchor: usize, rng: &mut R) -> usize {
        loop {
            let i = rng.random_range(0..self.labels.len());
            if self.labels[i] != self.labels[anchor] {
                return i;
            }
        }
    }
}

/// Adam moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Config(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        if p.len() != g.len() || m.len() != g.len() {
            return Err(TrainError::Config(format!(
                "gradient of length {} for {} parameters",
                g.len(),
                p.len()
            )));
        }
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *x -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
}

/// Linear classification head used by the cross-entropy objective.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub encoder: Encoder,
    pub head: Option<LinearHead>,
    pub history: Vec<EpochRecord>,
    pub wall_time_s: f64,
}

/// Source of training windows: channel-major samples plus labels.
pub trait WindowSource {
    fn len(&self) -> usize;
    fn label(&self, i: usize) -> usize;
    fn samples(&self, i: usize) -> Vec<f64>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl WindowSource for [Window] {
    fn len(&self) -> usize {
        <[Window]>::len(self)
    }

    fn label(&self, i: usize) -> usize {
        self[i].label()
    }

    fn samples(&self, i: usize) -> Vec<f64> {
        self[i].to_matrix()
    }
}

impl WindowSource for [(Vec<f64>, usize)] {
    fn len(&self) -> usize {
        <[(Vec<f64>, usize)]>::len(self)
    }

    fn label(&self, i: usize) -> usize {
        self[i].1
    }

    fn samples(&self, i: usize) -> Vec<f64> {
        self[i].0.clone()
    }
}

fn add_grads(g: &Graph, vars: &[Var], acc: &mut [Vec<f64>], weight: f64) {
    for (v, a) in vars.iter().zip(acc.iter_mut()) {
        if let Some(grad) = g.grad_data(*v) {
            a.iter_mut().zip(grad).for_each(|(x, y)| *x += weight * y);
        }
    }
}

/// Trains a freshly initialized encoder on `windows`.
///
/// `driver_names[label]` names each class. Every epoch runs
/// `ceil(N / batch_size)` batches, so each window is expected once as anchor.
pub fn train<S: WindowSource + ?Sized>(
    windows: &S,
    driver_names: &[String],
    encoder_config: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    let encoder = Encoder::build(encoder_config.clone(), mix_seed(&[cfg.seed, 1]))?;
    train_from(encoder, windows, driver_names, cfg)
}

/// As [`train`], starting from the given encoder.
pub fn train_from<S: WindowSource + ?Sized>(
    mut encoder: Encoder,
    windows: &S,
    driver_names: &[String],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let labels: Vec<usize> = (0..windows.len()).map(|i| windows.label(i)).collect();
    let sampler = TripletSampler::new(&labels, driver_names)?;
    let k = driver_names.len();
    let e = encoder.config.embedding_size();

    let mut head = (cfg.mode == TrainMode::CrossEntropy).then(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 2]));
        let normal = Normal::new(0.0, (1.0 / e as f64).sqrt()).expect("finite sd");
        LinearHead {
            weight: Tensor::new(vec![e, k], (0..e * k).map(|_| normal.sample(&mut rng)).collect()).expect("head"),
            bias: Tensor::zeros(&[k]),
        }
    });

    let mut sizes: Vec<usize> = encoder.params.named().iter().map(|(_, t)| t.len()).collect();
    if let Some(h) = &head {
        sizes.extend([h.weight.len(), h.bias.len()]);
    }
    let mut adam = AdamState::new(&sizes);
    let mut dropout = StreamRng::new(mix_seed(&[cfg.seed, 3]));
    let batches = sampler.len().div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 4, epoch as u64]));
        let mut epoch_loss = 0.0;
        let mut count = 0usize;
        for batch in 0..batches {
            let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_loss = 0.0;
            let weight = 1.0 / cfg.batch_size as f64;
            if cfg.mode == TrainMode::Triplet && cfg.mining == Mining::BatchAll {
                let (drivers, per_driver) = cfg.batch_groups();
                let idx = sampler.sample_groups(drivers, per_driver, &mut rng);
                let xs: Vec<Vec<f64>> = idx.iter().map(|&i| windows.samples(i)).collect();
                let refs: Vec<&[f64]> = xs.iter().map(|x| &x[..]).collect();
                let batch_labels: Vec<usize> = idx.iter().map(|&i| sampler.label(i)).collect();
                let mut g = Graph::new();
                let pv = encoder.register(&mut g, true);
                let emb = encoder.forward(&mut g, &pv, &refs, Some(&mut dropout))?;
                let rows: Vec<Vec<f64>> = g.value(emb).data().chunks_exact(e).map(<[f64]>::to_vec).collect();
                let (value, emb_grad, _) = batch_all_triplet_loss(&rows, &batch_labels, cfg.margin);
                if !value.is_finite() {
                    return Err(TrainError::NonFinite { epoch, batch, lr });
                }
                let flat: Vec<f64> = emb_grad.concat();
                let surrogate = g.weighted_sum(emb, &flat)?;
                g.backward(surrogate)?;
                add_grads(&g, &pv.vars, &mut grads, 1.0);
                let mut tensors = encoder.params.tensors_mut();
                adam_step(&mut tensors, &grads, &mut adam, lr)?;
                epoch_loss += value;
                count += 1;
                continue;
            }
            for _ in 0..cfg.batch_size {
                let mut g = Graph::new();
                let pv = encoder.register(&mut g, true);
                let mut vars = pv.vars.clone();
                let loss = match cfg.mode {
                    TrainMode::Triplet => {
                        let mut t = sampler.sample(&mut rng);
                        if cfg.mining == Mining::SemiHard {
                            t.negative = semi_hard_negative(&encoder, windows, &sampler, t, cfg.margin, &mut rng)?;
                        }
                        let xs = [
                            windows.samples(t.anchor),
                            windows.samples(t.positive),
                            windows.samples(t.negative),
                        ];
                        let refs: Vec<&[f64]> = xs.iter().map(|x| &x[..]).collect();
                        let emb = encoder.forward(&mut g, &pv, &refs, Some(&mut dropout))?;
                        triplet_loss_graph(&mut g, emb, cfg.margin)?
                    }
                    TrainMode::CrossEntropy => {
                        let i = rng.random_range(0..sampler.len());
                        let x = windows.samples(i);
                        let emb = encoder.forward(&mut g, &pv, &[&x[..]], Some(&mut dropout))?;
                        let h = head.as_ref().expect("head exists in cross-entropy mode");
                        let hw = g.param(h.weight.clone());
                        let hb = g.param(h.bias.clone());
                        vars.extend([hw, hb]);
                        let logits = g.linear(emb, hw, hb)?;
                        g.softmax_cross_entropy(logits, &[sampler.label(i)])?
                    }
                };
                let value = g.value(loss).item();
                if !value.is_finite() {
                    return Err(TrainError::NonFinite { epoch, batch, lr });
                }
                batch_loss += value;
                g.backward(loss)?;
                add_grads(&g, &vars, &mut grads, weight);
            }
            if grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(TrainError::NonFinite { epoch, batch, lr });
            }
            let mut tensors = encoder.params.tensors_mut();
            if let Some(h) = head.as_mut() {
                tensors.push(&mut h.weight);
                tensors.push(&mut h.bias);
            }
            adam_step(&mut tensors, &grads, &mut adam, lr)?;
            epoch_loss += batch_loss;
            count += cfg.batch_size;
        }
        let mean_loss = epoch_loss / count.max(1) as f64;
        log::info!("epoch {epoch}: mean loss {mean_loss:.6} (lr {lr:e})");
        history.push(EpochRecord {
            epoch,
            learning_rate: lr,
            mean_loss,
        });
    }
    Ok(TrainOutcome {
        encoder,
        head,
        history,
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}

fn semi_hard_negative<S: WindowSource + ?Sized, R: Rng + ?Sized>(
    encoder: &Encoder,
    windows: &S,
    sampler: &TripletSampler,
    t: Triplet,
    margin: f64,
    rng: &mut R,
) -> Result<usize, TrainError> {
    const CANDIDATES: usize = 6;
    let mut cands = vec![t.negative];
    cands.extend((1..CANDIDATES).map(|_| sampler.random_negative(t.anchor, rng)));
    let mut xs = vec![windows.samples(t.anchor), windows.samples(t.positive)];
    xs.extend(cands.iter().map(|&c| windows.samples(c)));
    let refs: Vec<&[f64]> = xs.iter().map(|x| &x[..]).collect();
    let emb = encoder.embed_batch(&refs)?;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let d_rp = sq(&emb[0], &emb[1]);
    let mut best: Option<(f64, usize)> = None;
    for (j, &c) in cands.iter().enumerate() {
        let d = sq(&emb[0], &emb[2 + j]);
        if d > d_rp && d < d_rp + margin && best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, c));
        }
    }
    Ok(best.map(|(_, c)| c).unwrap_or(t.negative))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn triplet_loss_examples() {
        assert_eq!(triplet_loss(&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0], 1.0).unwrap(), 1.0);
        assert_eq!(triplet_loss(&[0.0, 0.0], &[0.0, 0.0], &[2.0, 0.0], 1.0).unwrap(), 0.0);
        let l = triplet_loss(&[0.0], &[1.0], &[1.2], 1.0).unwrap();
        assert!((l - 0.56).abs() < 1e-12);
        assert!(matches!(
            triplet_loss(&[0.0], &[1.0, 2.0], &[1.0], 1.0),
            Err(TrainError::LengthMismatch(1, 2, 1))
        ));
    }

    #[test]
    fn graph_loss_matches_direct_value_and_gradient() {
        let rows = vec![vec![0.3, -1.0, 2.0], vec![0.1, 0.5, 1.0], vec![0.0, -0.2, 2.5]];
        let direct = triplet_loss(&rows[0], &rows[1], &rows[2], 1.0).unwrap();
        let mut g = Graph::new();
        let emb = g.param(Tensor::from_rows(&rows).unwrap());
        let loss = triplet_loss_graph(&mut g, emb, 1.0).unwrap();
        assert!((g.value(loss).item() - direct).abs() < 1e-15);
        g.backward(loss).unwrap();
        let grad = g.grad_data(emb).unwrap();
        // d/dr = 2(r−p) − 2(r−n) = 2(n−p); d/dp = −2(r−p); d/dn = 2(r−n)
        for d in 0..3 {
            assert!((grad[d] - 2.0 * (rows[2][d] - rows[1][d])).abs() < 1e-12);
            assert!((grad[3 + d] + 2.0 * (rows[0][d] - rows[1][d])).abs() < 1e-12);
            assert!((grad[6 + d] - 2.0 * (rows[0][d] - rows[2][d])).abs() < 1e-12);
        }
    }

    #[test]
    fn inactive_hinge_has_zero_gradient() {
        let rows = vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![2.0, 0.0]];
        let mut g = Graph::new();
        let emb = g.param(Tensor::from_rows(&rows).unwrap());
        let loss = triplet_loss_graph(&mut g, emb, 1.0).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad_data(emb).unwrap().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn triplet_loss_properties(
            r in proptest::collection::vec(-3.0f64..3.0, 4),
            p in proptest::collection::vec(-3.0f64..3.0, 4),
            n in proptest::collection::vec(-3.0f64..3.0, 4),
            alpha in 0.1f64..3.0,
        ) {
            let l = triplet_loss(&r, &p, &n, alpha).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert_eq!(triplet_loss(&r, &r, &r, alpha).unwrap(), alpha);
            let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
            if sq(&r, &n) >= sq(&r, &p) + alpha {
                prop_assert_eq!(l, 0.0);
            }
        }
    }

    #[test]
    fn batch_all_loss_matches_triplet_sum_and_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let labels = [0, 0, 1, 1, 1, 2];
        let emb: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.random_range(-0.6..0.6)).collect())
            .collect();
        let (loss, grad, count) = batch_all_triplet_loss(&emb, &labels, 1.0);
        let mut sum = 0.0;
        let mut n = 0;
        for a in 0..6 {
            for p in 0..6 {
                for q in 0..6 {
                    if a != p && labels[a] == labels[p] && labels[q] != labels[a] {
                        sum += triplet_loss(&emb[a], &emb[p], &emb[q], 1.0).unwrap();
                        n += 1;
                    }
                }
            }
        }
        assert_eq!(count, n);
        assert!((loss - sum / n as f64).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..6 {
            for d in 0..3 {
                let mut up = emb.clone();
                up[i][d] += h;
                let mut dn = emb.clone();
                dn[i][d] -= h;
                let fd = (batch_all_triplet_loss(&up, &labels, 1.0).0 - batch_all_triplet_loss(&dn, &labels, 1.0).0)
                    / (2.0 * h);
                assert!((fd - grad[i][d]).abs() < 1e-6, "{i} {d}: {fd} vs {}", grad[i][d]);
            }
        }
        let (l, g, c) = batch_all_triplet_loss(&emb[..2], &labels[..2], 1.0);
        assert_eq!((l, c), (0.0, 0));
        assert!(g.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn grouped_sampling_draws_distinct_windows_per_driver() {
        let labels: Vec<usize> = (0..40).map(|i| i % 5).collect();
        let s = TripletSampler::new(&labels, &names(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let idx = s.sample_groups(3, 4, &mut rng);
            assert_eq!(idx.len(), 12);
            let mut seen = idx.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), 12);
            for chunk in idx.chunks(4) {
                assert!(chunk.iter().all(|&i| labels[i] == labels[chunk[0]]));
            }
        }
        assert!(TrainConfig {
            windows_per_driver: 1,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        let groups = |batch_size| {
            TrainConfig {
                batch_size,
                ..TrainConfig::default()
            }
            .batch_groups()
        };
        assert_eq!(
            (groups(32), groups(8), groups(4), groups(1)),
            ((8, 4), (2, 4), (2, 2), (2, 2))
        );
    }

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("d{i}")).collect()
    }

    #[test]
    fn sampled_triplets_respect_invariants() {
        let labels = [0, 0, 1, 1];
        let s = TripletSampler::new(&labels, &names(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for t in s.sample_batch(500, &mut rng) {
            assert_eq!(labels[t.anchor], labels[t.positive]);
            assert_ne!(t.anchor, t.positive);
            assert_ne!(labels[t.anchor], labels[t.negative]);
        }
        let a = s.sample_batch(50, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, s.sample_batch(50, &mut ChaCha8Rng::seed_from_u64(4)));
    }

    #[test]
    fn driver_with_one_window_is_named() {
        let err = TripletSampler::new(&[0, 0, 1], &names(2)).unwrap_err();
        assert!(err.to_string().contains("d1"), "{err}");
        assert!(matches!(
            TripletSampler::new(&[0, 0, 0], &names(1)),
            Err(TrainError::TooFewDrivers(1))
        ));
    }

    #[test]
    fn anchors_are_uniform_over_windows() {
        let labels: Vec<usize> = (0..50).map(|i| i % 5).collect();
        let s = TripletSampler::new(&labels, &names(5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut counts = [0usize; 5];
        let mut neg = [0usize; 5];
        for t in s.sample_batch(10_000, &mut rng) {
            counts[labels[t.anchor]] += 1;
            neg[labels[t.negative]] += 1;
        }
        let sigma = (10_000.0 * 0.2 * 0.8f64).sqrt();
        for c in counts.iter().chain(&neg) {
            assert!((*c as f64 - 2000.0).abs() <= 3.0 * sigma, "{counts:?} {neg:?}");
        }
    }

    #[test]
    fn adam_examples() {
        let mut p = Tensor::from_vec(vec![0.5, -1.0]);
        let mut st = AdamState::new(&[2]);
        adam_step(&mut [&mut p], &[vec![0.0, 0.0]], &mut st, 4e-4).unwrap();
        assert_eq!(p.data(), &[0.5, -1.0]);

        let mut p = Tensor::from_vec(vec![0.0]);
        let mut st = AdamState::new(&[1]);
        adam_step(&mut [&mut p], &[vec![1.0]], &mut st, 4e-4).unwrap();
        assert!((p.data()[0] + 4e-4).abs() < 1e-10);
    }

    #[test]
    fn adam_matches_reference_over_steps() {
        let g = [0.3, -2.0, 1e-3];
        let mut p = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let mut st = AdamState::new(&[3]);
        for _ in 0..2 {
            adam_step(&mut [&mut p], &[g.to_vec()], &mut st, 0.01).unwrap();
        }
        for (i, &gi) in g.iter().enumerate() {
            let (mut m, mut v, mut x) = (0.0, 0.0, [1.0, 2.0, 3.0][i]);
            for t in 1..=2 {
                m = 0.9 * m + 0.1 * gi;
                v = 0.999 * v + 0.001 * gi * gi;
                let mh = m / (1.0 - 0.9f64.powi(t));
                let vh = v / (1.0 - 0.999f64.powi(t));
                x -= 0.01 * mh / (vh.sqrt() + 1e-8);
            }
            assert!((p.data()[i] - x).abs() < 1e-15);
        }
    }

    #[test]
    fn learning_rate_schedule_is_exact() {
        let cfg = TrainConfig::default();
        for k in 0..30 {
            assert_eq!(cfg.learning_rate_at(k), 4e-4 * 0.975f64.powi(k as i32));
        }
        assert!(TrainConfig {
            decay: 0.0,
            ..cfg.clone()
        }
        .validate()
        .is_err());
        assert!(TrainConfig { margin: 0.0, ..cfg }.validate().is_err());
    }
}
