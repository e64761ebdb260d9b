use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{EvalConfig, EvalError};
use crate::gbdt::{restrict, Decision};
use crate::numerics::mix_seed;

/// Group sizes up to this are always enumerated exhaustively; larger ones
/// are sampled unless every set fits within the sampling cap.
pub const MAX_ENUMERATED_GROUP: usize = 3;

/// Whether all candidate sets of size `n` out of `k` drivers are visited.
pub fn enumerates_all(k: usize, n: usize, sampling_cap: usize) -> bool {
    n <= MAX_ENUMERATED_GROUP || binomial(k - 1, n - 1) <= sampling_cap as u64
}

/// Threshold candidates for the none-of-the-above sweep.
pub fn nota_threshold_grid() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

fn check_table(probs: &[Vec<f64>], labels: &[usize]) -> Result<usize, EvalError> {
    if probs.len() != labels.len() {
        return Err(EvalError::Shape(format!(
            "{} probability rows but {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let k = probs.first().map_or(0, |r| r.len());
    if k == 0 {
        return Err(EvalError::Shape("empty probability table".into()));
    }
    if probs.iter().any(|r| r.len() != k) {
        return Err(EvalError::Shape("ragged probability table".into()));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(EvalError::Shape(format!("label {l} outside [0, {k})")));
    }
    Ok(k)
}

fn check_group(n: usize, k: usize) -> Result<(), EvalError> {
    if n < 2 || n > k {
        return Err(EvalError::Config(format!("group size {n} outside [2, {k}]")));
    }
    Ok(())
}

/// Binomial coefficient, saturating.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// All `r`-subsets of `items` in lexicographic order.
fn combinations(items: &[usize], r: usize, f: &mut impl FnMut(&[usize])) {
    let n = items.len();
    if r > n {
        return;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    let mut buf = vec![0; r];
    loop {
        for (b, &i) in buf.iter_mut().zip(&idx) {
            *b = items[i];
        }
        f(&buf);
        let Some(pos) = (0..r).rev().find(|&p| idx[p] != p + n - r) else {
            return;
        };
        idx[pos] += 1;
        for q in pos + 1..r {
            idx[q] = idx[q - 1] + 1;
        }
    }
}

/// Uniform `r`-subset of `items` without replacement.
fn draw(items: &[usize], r: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    sample(rng, items.len(), r).into_iter().map(|i| items[i]).collect()
}

fn others(k: usize, truth: usize) -> Vec<usize> {
    (0..k).filter(|&l| l != truth).collect()
}

/// Calls `f` with every candidate set of size `n` that contains `truth`:
/// all `C(K−1, n−1)` of them when [`enumerates_all`], otherwise
/// `sampling_cap` seeded draws. Returns the number of sets visited.
pub fn for_each_candidate_set(
    k: usize,
    truth: usize,
    n: usize,
    sampling_cap: usize,
    rng: &mut ChaCha8Rng,
    mut f: impl FnMut(&[usize]),
) -> usize {
    let rest = others(k, truth);
    let mut count = 0;
    let mut set = Vec::with_capacity(n);
    if enumerates_all(k, n, sampling_cap) {
        combinations(&rest, n - 1, &mut |c| {
            set.clear();
            set.push(truth);
            set.extend_from_slice(c);
            f(&set);
            count += 1;
        });
    } else {
        for _ in 0..sampling_cap {
            set.clear();
            set.push(truth);
            set.extend(draw(&rest, n - 1, rng));
            f(&set);
            count += 1;
        }
    }
    count
}

fn window_rng(seed: u64, protocol: u64, n: usize, i: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(&[seed, protocol, n as u64, i as u64]))
}

/// Integer trial counters; pooled over all windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Trials {
    pub correct: u64,
    pub total: u64,
}

impl Trials {
    pub fn accuracy(self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }

    fn merge(self, o: Trials) -> Trials {
        Trials {
            correct: self.correct + o.correct,
            total: self.total + o.total,
        }
    }
}

pub fn nway_trials(probs: &[Vec<f64>], labels: &[usize], n: usize, cfg: &EvalConfig) -> Result<Trials, EvalError> {
    let k = check_table(probs, labels)?;
    check_group(n, k)?;
    Ok(probs
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (row, &truth))| {
            let mut rng = window_rng(cfg.seed, 1, n, i);
            let mut t = Trials::default();
            for_each_candidate_set(k, truth, n, cfg.sampling_cap, &mut rng, |set| {
                t.total += 1;
                if restrict(row, set, 0.0) == Decision::Label(truth) {
                    t.correct += 1;
                }
            });
            t
        })
        .reduce(Trials::default, Trials::merge))
}

/// Fraction of candidate sets containing the true driver in which the true
/// driver has the highest probability, pooled over all windows and sets.
pub fn nway_accuracy(probs: &[Vec<f64>], labels: &[usize], n: usize, cfg: &EvalConfig) -> Result<f64, EvalError> {
    Ok(nway_trials(probs, labels, n, cfg)?.accuracy())
}

/// Tuples per half of the none-of-the-above mixture for one window.
pub fn nota_half_size(k: usize, n: usize, sampling_cap: usize) -> usize {
    let full = binomial(k - 1, n - 1);
    let full = if enumerates_all(k, n, sampling_cap) {
        full
    } else {
        sampling_cap as u64
    };
    (full / 2).max(1) as usize
}

pub fn nota_trials(
    probs: &[Vec<f64>],
    labels: &[usize],
    n: usize,
    threshold: f64,
    cfg: &EvalConfig,
) -> Result<Trials, EvalError> {
    let k = check_table(probs, labels)?;
    check_group(n, k)?;
    if n > k - 1 {
        return Err(EvalError::Config(format!(
            "none-of-the-above needs {n} candidates besides the true driver, only {} exist",
            k - 1
        )));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return Err(EvalError::Config(format!("threshold {threshold} outside [0, 1]")));
    }
    let half = nota_half_size(k, n, cfg.sampling_cap);
    Ok(probs
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (row, &truth))| {
            let mut rng = window_rng(cfg.seed, 2, n, i);
            let rest = others(k, truth);
            let mut t = Trials::default();
            let mut set = Vec::with_capacity(n);
            for _ in 0..half {
                set.clear();
                set.push(truth);
                set.extend(draw(&rest, n - 1, &mut rng));
                t.total += 1;
                if restrict(row, &set, threshold) == Decision::Label(truth) {
                    t.correct += 1;
                }
            }
            for _ in 0..half {
                let set = draw(&rest, n, &mut rng);
                t.total += 1;
                if restrict(row, &set, threshold) == Decision::Uncertain {
                    t.correct += 1;
                }
            }
            t
        })
        .reduce(Trials::default, Trials::merge))
}

/// Accuracy on an even mixture of candidate sets with and without the true
/// driver; abstaining is right exactly when the truth is absent.
pub fn nota_accuracy(
    probs: &[Vec<f64>],
    labels: &[usize],
    n: usize,
    threshold: f64,
    cfg: &EvalConfig,
) -> Result<f64, EvalError> {
    Ok(nota_trials(probs, labels, n, threshold, cfg)?.accuracy())
}

/// Threshold from [`nota_threshold_grid`] with the best accuracy on the
/// given table; ties go to the smaller threshold.
pub fn sweep_nota_threshold(
    probs: &[Vec<f64>],
    labels: &[usize],
    n: usize,
    cfg: &EvalConfig,
) -> Result<(f64, f64), EvalError> {
    let mut best = (0.0, f64::NEG_INFINITY);
    for t in nota_threshold_grid() {
        let acc = nota_accuracy(probs, labels, n, t, cfg)?;
        if acc > best.1 {
            best = (t, acc);
        }
    }
    Ok(best)
}

/// `cell[i][j]` counts windows of driver `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Confusion {
    pub matrix: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn accuracy(&self) -> f64 {
        let total: u64 = self.matrix.iter().flatten().sum();
        let trace: u64 = (0..self.matrix.len()).map(|i| self.matrix[i][i]).sum();
        if total == 0 {
            0.0
        } else {
            trace as f64 / total as f64
        }
    }
}

pub fn confusion_matrix(probs: &[Vec<f64>], labels: &[usize]) -> Result<Confusion, EvalError> {
    let k = check_table(probs, labels)?;
    let all: Vec<usize> = (0..k).collect();
    let mut matrix = vec![vec![0u64; k]; k];
    for (row, &truth) in probs.iter().zip(labels) {
        if let Decision::Label(p) = restrict(row, &all, 0.0) {
            matrix[truth][p] += 1;
        }
    }
    Ok(Confusion { matrix })
}
