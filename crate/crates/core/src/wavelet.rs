//! One-level orthonormal Haar decomposition.
//!
//! `approx[k] = (x[2k] + x[2k+1]) / √2`, `detail[k] = (x[2k] − x[2k+1]) / √2`.
//! The transform is orthonormal, so signal energy is preserved exactly and the
//! inverse is the transpose.

use std::f64::consts::FRAC_1_SQRT_2;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WaveletError {
    #[error("Haar transform needs an even number of samples, got {0}")]
    OddLength(usize),
    #[error("coefficient vectors differ in length: {approx} vs {detail}")]
    Mismatch { approx: usize, detail: usize },
}

/// Approximation and detail coefficients of one signal.
#[derive(Clone, Debug, PartialEq)]
pub struct HaarPair {
    pub approx: Vec<f64>,
    pub detail: Vec<f64>,
}

pub fn haar_forward(x: &[f64]) -> Result<HaarPair, WaveletError> {
    if x.len() % 2 != 0 {
        return Err(WaveletError::OddLength(x.len()));
    }
    let half = x.len() / 2;
    let mut pair = HaarPair {
        approx: vec![0.0; half],
        detail: vec![0.0; half],
    };
    haar_forward_into(x, &mut pair.approx, &mut pair.detail);
    Ok(pair)
}

fn haar_forward_into(x: &[f64], approx: &mut [f64], detail: &mut [f64]) {
    for ((pair, a), d) in x.chunks_exact(2).zip(approx).zip(detail) {
        *a = (pair[0] + pair[1]) * FRAC_1_SQRT_2;
        *d = (pair[0] - pair[1]) * FRAC_1_SQRT_2;
    }
}

pub fn haar_inverse(pair: &HaarPair) -> Result<Vec<f64>, WaveletError> {
    if pair.approx.len() != pair.detail.len() {
        return Err(WaveletError::Mismatch {
            approx: pair.approx.len(),
            detail: pair.detail.len(),
        });
    }
    Ok(pair
        .approx
        .iter()
        .zip(&pair.detail)
        .flat_map(|(a, d)| [(a + d) * FRAC_1_SQRT_2, (a - d) * FRAC_1_SQRT_2])
        .collect())
}

/// Per-channel transform of a channel-major `C×L` window, flattened in channel
/// order: `(approx_flat, detail_flat)`, each `C·L/2` long.
pub fn window_wavelet_features<'a, I>(channels: I) -> Result<(Vec<f64>, Vec<f64>), WaveletError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut approx = Vec::new();
    let mut detail = Vec::new();
    for ch in channels {
        if ch.len() % 2 != 0 {
            return Err(WaveletError::OddLength(ch.len()));
        }
        let start = approx.len();
        approx.resize(start + ch.len() / 2, 0.0);
        detail.resize(start + ch.len() / 2, 0.0);
        haar_forward_into(ch, &mut approx[start..], &mut detail[start..]);
    }
    Ok((approx, detail))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::SQRT_2;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn forward_examples() {
        let p = haar_forward(&[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(close(&p.approx, &[SQRT_2, SQRT_2]));
        assert!(close(&p.detail, &[0.0, 0.0]));

        let p = haar_forward(&[1.0, -1.0]).unwrap();
        assert!(close(&p.approx, &[0.0]));
        assert!(close(&p.detail, &[SQRT_2]));

        let p = haar_forward(&[3.0, 1.0, 2.0, 0.0]).unwrap();
        assert!(close(&p.approx, &[2.0 * SQRT_2, SQRT_2]));
        assert!(close(&p.detail, &[SQRT_2, SQRT_2]));
        let energy: f64 = p.approx.iter().chain(&p.detail).map(|v| v * v).sum();
        assert!((energy - 14.0).abs() < 1e-12);
    }

    #[test]
    fn odd_length_is_rejected() {
        assert_eq!(haar_forward(&[1.0, 2.0, 3.0]), Err(WaveletError::OddLength(3)));
        let odd: &[f64] = &[1.0];
        assert!(window_wavelet_features([odd]).is_err());
    }

    #[test]
    fn inverse_examples() {
        let x = haar_inverse(&HaarPair {
            approx: vec![SQRT_2],
            detail: vec![0.0],
        })
        .unwrap();
        assert!(close(&x, &[1.0, 1.0]));
        let x = haar_inverse(&HaarPair {
            approx: vec![0.0],
            detail: vec![SQRT_2],
        })
        .unwrap();
        assert!(close(&x, &[1.0, -1.0]));
        assert!(haar_inverse(&HaarPair {
            approx: vec![0.0],
            detail: vec![]
        })
        .is_err());
    }

    #[test]
    fn window_features_concatenate_in_channel_order() {
        let c0 = [3.0, 1.0, 2.0, 0.0];
        let c1 = [1.0, 1.0, 1.0, -1.0];
        let (a, d) = window_wavelet_features([&c0[..], &c1[..]]).unwrap();
        let p0 = haar_forward(&c0).unwrap();
        let p1 = haar_forward(&c1).unwrap();
        assert_eq!(a, [p0.approx.clone(), p1.approx.clone()].concat());
        assert_eq!(d, [p0.detail, p1.detail].concat());

        let (a, d) = window_wavelet_features([&c0[..]]).unwrap();
        assert_eq!(a, p0.approx);

        let zeros = [0.0; 8];
        let (a, d2) = window_wavelet_features([&zeros[..], &zeros[..]]).unwrap();
        assert!(a.iter().chain(&d2).all(|&v| v == 0.0));
        assert_eq!(d.len(), 2);
    }

    proptest! {
        #[test]
        fn round_trip_and_energy(half in 1usize..64, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let x: Vec<f64> = (0..2 * half).map(|_| rng.random_range(-5.0..5.0)).collect();
            let p = haar_forward(&x).unwrap();
            let back = haar_inverse(&p).unwrap();
            prop_assert!(close(&back, &x));
            let ex: f64 = x.iter().map(|v| v * v).sum();
            let ec: f64 = p.approx.iter().chain(&p.detail).map(|v| v * v).sum();
            prop_assert!((ex - ec).abs() <= 1e-9 * ex.max(1e-300));
        }

        #[test]
        fn constant_shift_moves_only_approx(c in -10.0f64..10.0, x in proptest::collection::vec(-5.0f64..5.0, 2..40)) {
            let x: Vec<f64> = x[..x.len() / 2 * 2].to_vec();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let p = haar_forward(&x).unwrap();
            let q = haar_forward(&shifted).unwrap();
            for (a, b) in p.approx.iter().zip(&q.approx) {
                prop_assert!((b - a - c * SQRT_2).abs() < 1e-9);
            }
            for (a, b) in p.detail.iter().zip(&q.detail) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
