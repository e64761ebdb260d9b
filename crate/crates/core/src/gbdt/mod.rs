//! Multiclass gradient-boosted regression trees with histogram splits.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::mix_seed;


#[derive(Debug, Error)]
pub enum GbdtError {
    #[error("invalid gbdt config: {0}")]
    Config(String),
    #[error("invalid training data: {0}")]
    Data(String),
    #[error("model file {path}: {reason}")]
    Model { path: String, reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbdtConfig {
    pub num_leaves: usize,
    pub num_trees: usize,
    pub max_depth: usize,
    pub feature_fraction: f64,
    pub bagging_fraction: f64,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
    pub lambda_l2: f64,
    pub num_bins: usize,
    pub seed: u64,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self {
            num_leaves: 31,
            num_trees: 100,
            max_depth: 12,
            feature_fraction: 0.8,
            bagging_fraction: 0.9,
            learning_rate: 0.1,
            min_samples_leaf: 5,
            lambda_l2: 1.0,
            num_bins: 64,
            seed: 0,
        }
    }
}

impl GbdtConfig {
    pub fn validate(&self) -> Result<(), GbdtError> {
        let bad = |m: &str| Err(GbdtError::Config(m.into()));
        if self.num_leaves < 2 {
            return bad("num_leaves must be at least 2");
        }
        if self.max_depth < 1 {
            return bad("max_depth must be at least 1");
        }
        for (name, f) in [
            ("feature_fraction", self.feature_fraction),
            ("bagging_fraction", self.bagging_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(GbdtError::Config(format!("{name} must lie in (0, 1], got {f}")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return bad("lambda_l2 must be non-negative");
        }
        if self.min_samples_leaf < 1 {
            return bad("min_samples_leaf must be at least 1");
        }
        if self.num_bins < 2 {
            return bad("num_bins must be at least 2");
        }
        Ok(())
    }
}

/// Softmax probabilities, shifted by the max for stability.
pub fn softmax(raw: &[f64]) -> Vec<f64> {
    let m = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = raw.iter().map(|r| (r - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Per-class gradient and diagonal hessian of the multiclass log loss.
pub fn softmax_grad_hess(raw: &[f64], label: usize) -> (Vec<f64>, Vec<f64>) {
    let p = softmax(raw);
    let g = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| pk - if k == label { 1.0 } else { 0.0 })
        .collect();
    let h = p.iter().map(|&pk| pk * (1.0 - pk)).collect();
    (g, h)
}

/// Newton step for a leaf before shrinkage.
pub fn leaf_value(g_sum: f64, h_sum: f64, lambda: f64) -> f64 {
    let denom = h_sum + lambda;
    if denom > 0.0 {
        -g_sum / denom
    } else {
        0.0
    }
}

fn split_gain(gl: f64, hl: f64, gr: f64, hr: f64, lambda: f64) -> f64 {
    let term = |g: f64, h: f64| if h + lambda > 0.0 { g * g / (h + lambda) } else { 0.0 };
    0.5 * (term(gl, hl) + term(gr, hr) - term(gl + gr, hl + hr))
}

/// Per-feature upper bin edges. A value `x` falls in bin `#{b : b < x}`, so
/// bin `t` and below is exactly `x <= edges[t]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinMapper {
    pub edges: Vec<Vec<f64>>,
}

impl BinMapper {
    /// Equal-frequency edges taken from the observed values, deduplicated.
    pub fn fit(x: &[Vec<f64>], num_bins: usize) -> Self {
        let f = x.first().map_or(0, |r| r.len());
        let n = x.len();
        let edges = (0..f)
            .map(|j| {
                let mut col: Vec<f64> = x.iter().map(|r| r[j]).collect();
                col.sort_by(f64::total_cmp);
                let mut e: Vec<f64> = Vec::new();
                let push = |v: f64, e: &mut Vec<f64>| {
                    if e.last().is_none_or(|&l| v > l) {
                        e.push(v);
                    }
                };
                let mut uniq = col.clone();
                uniq.dedup();
                if uniq.len() <= num_bins {
                    for &v in &uniq {
                        push(v, &mut e);
                    }
                } else {
                    for b in 1..num_bins {
                        push(col[(b * n / num_bins).saturating_sub(1)], &mut e);
                    }
                }
                // The largest value never needs an edge above it.
                if e.last() == col.last() {
                    e.pop();
                }
                e
            })
            .collect();
        Self { edges }
    }

    pub fn num_bins(&self, feature: usize) -> usize {
        self.edges[feature].len() + 1
    }

    pub fn bin(&self, feature: usize, v: f64) -> u16 {
        self.edges[feature].partition_point(|&b| b < v) as u16
    }

    fn bin_rows(&self, x: &[Vec<f64>]) -> Vec<Vec<u16>> {
        x.iter()
            .map(|r| r.iter().enumerate().map(|(j, &v)| self.bin(j, v)).collect())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        bin: u16,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<Node>,
}

impl RegressionTree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    fn predict_binned(&self, x: &[u16]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    bin,
                    left,
                    right,
                    ..
                } => {
                    i = if x[*feature] <= *bin { *left } else { *right };
                }
            }
        }
    }

    pub fn num_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    /// Edges on the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

/// Growth limits and regularization for a single tree.
#[derive(Clone, Copy, Debug)]
pub struct TreeParams {
    pub num_leaves: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub lambda_l2: f64,
    pub shrinkage: f64,
}

impl From<&GbdtConfig> for TreeParams {
    fn from(c: &GbdtConfig) -> Self {
        Self {
            num_leaves: c.num_leaves,
            max_depth: c.max_depth,
            min_samples_leaf: c.min_samples_leaf,
            lambda_l2: c.lambda_l2,
            shrinkage: c.learning_rate,
        }
    }
}

struct Candidate {
    gain: f64,
    feature: usize,
    bin: u16,
}

struct OpenLeaf {
    node: usize,
    rows: Vec<usize>,
    depth: usize,
    g: f64,
    h: f64,
    best: Option<Candidate>,
}

fn best_split(
    binned: &[Vec<u16>],
    grad: &[f64],
    hess: &[f64],
    rows: &[usize],
    features: &[usize],
    mapper: &BinMapper,
    p: &TreeParams,
) -> Option<Candidate> {
    if rows.len() < 2 * p.min_samples_leaf {
        return None;
    }
    let (gt, ht): (f64, f64) = rows.iter().fold((0.0, 0.0), |(g, h), &r| (g + grad[r], h + hess[r]));
    let mut best: Option<Candidate> = None;
    for &f in features {
        let nb = mapper.num_bins(f);
        if nb < 2 {
            continue;
        }
        let mut hg = vec![0.0; nb];
        let mut hh = vec![0.0; nb];
        let mut hc = vec![0usize; nb];
        for &r in rows {
            let b = binned[r][f] as usize;
            hg[b] += grad[r];
            hh[b] += hess[r];
            hc[b] += 1;
        }
        let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0usize);
        for t in 0..nb - 1 {
            gl += hg[t];
            hl += hh[t];
            cl += hc[t];
            let cr = rows.len() - cl;
            if cl < p.min_samples_leaf {
                continue;
            }
            if cr < p.min_samples_leaf {
                break;
            }
            if hc[t] == 0 && t > 0 {
                // Same partition as the previous edge.
                continue;
            }
            let gain = split_gain(gl, hl, gt - gl, ht - hl, p.lambda_l2);
            if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                best = Some(Candidate {
                    gain,
                    feature: f,
                    bin: t as u16,
                });
            }
        }
    }
    best
}

/// Grows one tree leaf-wise: the open leaf with the largest gain is split
/// until the leaf budget is spent or no leaf has a valid split.
pub fn grow_tree(
    binned: &[Vec<u16>],
    mapper: &BinMapper,
    grad: &[f64],
    hess: &[f64],
    rows: Vec<usize>,
    features: &[usize],
    p: &TreeParams,
) -> RegressionTree {
    let mut nodes = vec![Node::Leaf { value: 0.0 }];
    let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| (g + grad[r], h + hess[r]));
    let best = (p.max_depth > 0)
        .then(|| best_split(binned, grad, hess, &rows, features, mapper, p))
        .flatten();
    let mut open = vec![OpenLeaf {
        node: 0,
        rows,
        depth: 0,
        g,
        h,
        best,
    }];
    let mut leaves = 1;
    while leaves < p.num_leaves {
        let pick = open
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.best.as_ref().map(|b| (i, b.gain)))
            .fold(None, |acc: Option<(usize, f64)>, (i, gain)| match acc {
                Some((_, bg)) if bg >= gain => acc,
                _ => Some((i, gain)),
            });
        let Some((idx, _)) = pick else { break };
        let leaf = open.swap_remove(idx);
        let cand = leaf.best.expect("picked leaf has a split");
        let (lrows, rrows): (Vec<usize>, Vec<usize>) =
            leaf.rows.iter().partition(|&&r| binned[r][cand.feature] <= cand.bin);
        let (li, ri) = (nodes.len(), nodes.len() + 1);
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[leaf.node] = Node::Split {
            feature: cand.feature,
            bin: cand.bin,
            threshold: mapper.edges[cand.feature][cand.bin as usize],
            left: li,
            right: ri,
        };
        leaves += 1;
        for (node, rows) in [(li, lrows), (ri, rrows)] {
            let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| (g + grad[r], h + hess[r]));
            let depth = leaf.depth + 1;
            let best = if depth < p.max_depth {
                best_split(binned, grad, hess, &rows, features, mapper, p)
            } else {
                None
            };
            open.push(OpenLeaf {
                node,
                rows,
                depth,
                g,
                h,
                best,
            });
        }
    }
    for l in &open {
        nodes[l.node] = Node::Leaf {
            value: leaf_value(l.g, l.h, p.lambda_l2) * p.shrinkage,
        };
    }
    RegressionTree { nodes }
}

/// Decision of a restricted prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    Label(usize),
    Uncertain,
}

/// Argmax over `candidates` of a probability row. With a positive threshold,
/// a candidate mass at or below it yields [`Decision::Uncertain`]; this makes
/// threshold 1 abstain on every proper subset even when rounding pushes the
/// mass to exactly 1.
pub fn restrict(probs: &[f64], candidates: &[usize], threshold: f64) -> Decision {
    let mass: f64 = candidates.iter().map(|&c| probs[c]).sum();
    if threshold > 0.0 && mass <= threshold {
        return Decision::Uncertain;
    }
    let mut best: Option<usize> = None;
    for &c in candidates {
        best = match best {
            Some(b) if probs[b] > probs[c] || (probs[b] == probs[c] && b < c) => Some(b),
            _ => Some(c),
        };
    }
    best.map_or(Decision::Uncertain, Decision::Label)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub config: GbdtConfig,
    pub num_classes: usize,
    pub num_features: usize,
    pub bins: BinMapper,
    pub init_scores: Vec<f64>,
    /// `trees[round][class]`.
    pub trees: Vec<Vec<RegressionTree>>,
}

/// Mean negative log-likelihood of the labels under `probs`.
pub fn multi_logloss(probs: &[Vec<f64>], y: &[usize]) -> f64 {
    let s: f64 = probs.iter().zip(y).map(|(p, &l)| -p[l].max(1e-300).ln()).sum();
    s / y.len() as f64
}

fn check_data(x: &[Vec<f64>], y: &[usize], k: usize) -> Result<usize, GbdtError> {
    if x.len() != y.len() {
        return Err(GbdtError::Data(format!("{} rows but {} labels", x.len(), y.len())));
    }
    if x.is_empty() {
        return Err(GbdtError::Data("no training rows".into()));
    }
    let f = x.first().map_or(0, |r| r.len());
    if f == 0 {
        return Err(GbdtError::Data("rows have no features".into()));
    }
    for (i, r) in x.iter().enumerate() {
        if r.len() != f {
            return Err(GbdtError::Data(format!(
                "row {i} has {} features, expected {f}",
                r.len()
            )));
        }
        if let Some(j) = r.iter().position(|v| !v.is_finite()) {
            return Err(GbdtError::Data(format!("row {i} feature {j} is not finite")));
        }
    }
    if let Some(&l) = y.iter().find(|&&l| l >= k) {
        return Err(GbdtError::Data(format!("label {l} outside [0, {k})")));
    }
    Ok(f)
}

impl GbdtModel {
    /// Boosting from zero raw scores, one tree per class per round.
    pub fn fit(x: &[Vec<f64>], y: &[usize], num_classes: usize, cfg: &GbdtConfig) -> Result<Self, GbdtError> {
        cfg.validate()?;
        if num_classes < 2 {
            return Err(GbdtError::Data("at least two classes are required".into()));
        }
        let nf = check_data(x, y, num_classes)?;
        let n = x.len();
        let k = num_classes;
        let bins = BinMapper::fit(x, cfg.num_bins);
        let binned = bins.bin_rows(x);
        let params = TreeParams::from(cfg);
        let n_bag = ((cfg.bagging_fraction * n as f64).round() as usize).clamp(1, n);
        let n_feat = ((cfg.feature_fraction * nf as f64).round() as usize).clamp(1, nf);

        let mut raw = vec![vec![0.0; k]; n];
        let mut grad = vec![vec![0.0; n]; k];
        let mut hess = vec![vec![0.0; n]; k];
        let mut trees = Vec::with_capacity(cfg.num_trees);
        for round in 0..cfg.num_trees {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, round as u64]));
            for (i, r) in raw.iter().enumerate() {
                let (g, h) = softmax_grad_hess(r, y[i]);
                for c in 0..k {
                    grad[c][i] = g[c];
                    hess[c][i] = h[c];
                }
            }
            let mut rows: Vec<usize> = if n_bag == n {
                (0..n).collect()
            } else {
                sample(&mut rng, n, n_bag).into_vec()
            };
            rows.sort_unstable();
            let mut round_trees = Vec::with_capacity(k);
            for c in 0..k {
                let mut features: Vec<usize> = if n_feat == nf {
                    (0..nf).collect()
                } else {
                    sample(&mut rng, nf, n_feat).into_vec()
                };
                features.sort_unstable();
                let tree = grow_tree(&binned, &bins, &grad[c], &hess[c], rows.clone(), &features, &params);
                round_trees.push(tree);
            }
            for (i, r) in raw.iter_mut().enumerate() {
                for (c, t) in round_trees.iter().enumerate() {
                    r[c] += t.predict_binned(&binned[i]);
                }
            }
            trees.push(round_trees);
        }
        Ok(Self {
            config: cfg.clone(),
            num_classes: k,
            num_features: nf,
            bins,
            init_scores: vec![0.0; k],
            trees,
        })
    }

    /// Trained model truncated to the first `rounds` rounds.
    pub fn truncated(&self, rounds: usize) -> Self {
        let mut m = self.clone();
        m.trees.truncate(rounds);
        m
    }

    pub fn raw_scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s = self.init_scores.clone();
        for round in &self.trees {
            for (c, t) in round.iter().enumerate() {
                s[c] += t.predict(x);
            }
        }
        s
    }

    pub fn predict_proba_row(&self, x: &[f64]) -> Vec<f64> {
        softmax(&self.raw_scores(x))
    }

    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        x.iter().map(|r| self.predict_proba_row(r)).collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let all: Vec<usize> = (0..self.num_classes).collect();
        match restrict(&self.predict_proba_row(x), &all, 0.0) {
            Decision::Label(l) => l,
            Decision::Uncertain => unreachable!("threshold 0 always answers"),
        }
    }

    pub fn predict_restricted(&self, x: &[f64], candidates: &[usize], threshold: f64) -> Decision {
        restrict(&self.predict_proba_row(x), candidates, threshold)
    }

    pub fn save(&self, path: &Path) -> Result<(), GbdtError> {
        let err = |reason: String| GbdtError::Model {
            path: path.display().to_string(),
            reason,
        };
        let text = serde_json::to_string(self).map_err(|e| err(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| err(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, GbdtError> {
        let err = |reason: String| GbdtError::Model {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        if m.trees.iter().any(|r| r.len() != m.num_classes) || m.init_scores.len() != m.num_classes {
            return Err(err("tree array does not match class count".into()));
        }
        if m.bins.edges.len() != m.num_features {
            return Err(err("bin edges do not match feature count".into()));
        }
        Ok(m)
    }
}
