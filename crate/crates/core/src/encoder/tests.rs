use super::*;
use crate::numerics::finite_difference_check;
use rand::Rng;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        in_channels: 4,
        kernel_size: 4,
        levels: 3,
        hidden_channels: 5,
        tcn_embedding: 6,
        wavelet_embedding_per_branch: 3,
        dropout_p: 0.1,
        window_length: 32,
        ..Default::default()
    }
}

fn random_window(cfg: &EncoderConfig, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cfg.in_channels * cfg.window_length)
        .map(|_| rng.random_range(-2.0..2.0))
        .collect()
}

/// Gives every bias a random value so zero-bias shortcuts cannot hide bugs.
fn randomize_biases(enc: &mut Encoder, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = enc.params.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(enc.params.tensors_mut()) {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
        }
    }
}

#[test]
fn receptive_field_examples() {
    let cfg = EncoderConfig::default();
    assert_eq!(cfg.receptive_field(), 1891);
    assert!(cfg.validate().is_ok());

    let five = EncoderConfig {
        levels: 5,
        ..cfg.clone()
    };
    assert_eq!(five.receptive_field(), 931);
    let msg = Encoder::build(five, 0).unwrap_err().to_string();
    assert!(msg.contains("931") && msg.contains("1000"), "{msg}");

    let tiny = EncoderConfig {
        kernel_size: 2,
        levels: 1,
        window_length: 2,
        in_channels: 1,
        ..cfg.clone()
    };
    assert_eq!(tiny.receptive_field(), 3);
    assert!(tiny.validate().is_ok());
    assert!(EncoderConfig {
        window_length: 4,
        ..tiny
    }
    .validate()
    .is_err());
}

#[test]
fn default_embedding_has_62_entries() {
    let enc = Encoder::build(EncoderConfig::default(), 3).unwrap();
    let w = vec![0.25; 31 * 1000];
    let e = enc.embed(&w).unwrap();
    assert_eq!(e.len(), 62);
    assert!(e.iter().all(|v| v.is_finite()));
}

#[test]
fn zero_window_gives_zero_embedding() {
    let enc = Encoder::build(small_config(), 1).unwrap();
    let e = enc.embed(&vec![0.0; 4 * 32]).unwrap();
    assert!(e.iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_window_shape_is_rejected() {
    let enc = Encoder::build(small_config(), 1).unwrap();
    assert!(matches!(
        enc.embed(&[0.0; 10]),
        Err(EncoderError::WindowShape { got: 10, .. })
    ));
}

#[test]
fn build_is_deterministic_per_seed() {
    let a = Encoder::build(small_config(), 5).unwrap();
    assert_eq!(a, Encoder::build(small_config(), 5).unwrap());
    assert_ne!(a, Encoder::build(small_config(), 6).unwrap());
}

#[test]
fn zero_block_with_identity_residual_is_relu() {
    let cfg = EncoderConfig {
        in_channels: 5,
        ..small_config()
    };
    let mut enc = Encoder::build(cfg, 2).unwrap();
    assert!(enc.params.blocks[0].residual.is_none());
    for t in enc.params.tensors_mut() {
        t.data_mut().fill(0.0);
    }
    let x = Tensor::new(vec![1, 5, 32], random_window(&enc.config, 9)[..160].to_vec()).unwrap();
    for level in 0..3 {
        let y = enc.block_output(level, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        let relu: Vec<f64> = x.data().iter().map(|v| v.max(0.0)).collect();
        assert_eq!(y.data(), &relu[..]);
    }
}

/// Causal dilated convolution by direct summation, one sample.
fn conv_oracle(x: &[Vec<f64>], w: &Tensor, b: &Tensor, dilation: usize) -> Vec<Vec<f64>> {
    let (cout, cin, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let len = x[0].len();
    let mut out = vec![vec![0.0; len]; cout];
    for (o, row) in out.iter_mut().enumerate() {
        for (t, slot) in row.iter_mut().enumerate() {
            let mut acc = b.data()[o];
            for i in 0..cin {
                for j in 0..k {
                    let back = (k - 1 - j) * dilation;
                    if t >= back {
                        acc += w.data()[(o * cin + i) * k + j] * x[i][t - back];
                    }
                }
            }
            *slot = acc;
        }
    }
    out
}

fn relu_rows(x: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    x.into_iter()
        .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
        .collect()
}

/// Straight-line forward pass: every block at every frame, plain loops.
fn oracle_embed(enc: &Encoder, window: &[f64]) -> Vec<f64> {
    let cfg = &enc.config;
    let l = cfg.window_length;
    let mut h: Vec<Vec<f64>> = window.chunks(l).map(|c| c.to_vec()).collect();
    for (lvl, b) in enc.params.blocks.iter().enumerate() {
        let d = 1 << lvl;
        let y = relu_rows(conv_oracle(&h, &b.conv1_w, &b.conv1_b, d));
        let y = relu_rows(conv_oracle(&y, &b.conv2_w, &b.conv2_b, d));
        let r = match &b.residual {
            Some((w, bias)) => conv_oracle(&h, w, bias, 1),
            None => h.clone(),
        };
        h = relu_rows(
            r.iter()
                .zip(&y)
                .map(|(a, c)| a.iter().zip(c).map(|(p, q)| p + q).collect())
                .collect(),
        );
    }
    let step = 1 << (cfg.levels - 1);
    let last: Vec<f64> = match cfg.readout {
        Readout::Last => h.iter().map(|r| r[l - 1]).collect(),
        Readout::Mean => h
            .iter()
            .map(|r| {
                let picked: Vec<f64> = (0..l).rev().step_by(step).map(|t| r[t]).collect();
                picked.iter().sum::<f64>() / picked.len() as f64
            })
            .collect(),
    };
    let lin = |x: &[f64], w: &Tensor, b: &Tensor| -> Vec<f64> {
        let o = w.shape()[1];
        (0..o)
            .map(|j| b.data()[j] + x.iter().enumerate().map(|(i, v)| v * w.data()[i * o + j]).sum::<f64>())
            .collect()
    };
    // Haar pair scaling times the 1/sqrt(fan_in) input scaling.
    let s = std::f64::consts::FRAC_1_SQRT_2 / ((window.len() / 2) as f64).sqrt();
    let mut approx = Vec::new();
    let mut detail = Vec::new();
    for ch in window.chunks(l) {
        for p in ch.chunks(2) {
            approx.push((p[0] + p[1]) * s);
            detail.push((p[0] - p[1]) * s);
        }
    }
    let p = &enc.params;
    [
        lin(&last, &p.tcn_w, &p.tcn_b),
        lin(&approx, &p.approx_w, &p.approx_b),
        lin(&detail, &p.detail_w, &p.detail_b),
    ]
    .concat()
}

#[test]
fn embedding_matches_straight_line_oracle() {
    for cfg in [
        small_config(),
        EncoderConfig {
            hidden_channels: 4,
            ..small_config()
        },
        EncoderConfig {
            readout: Readout::Mean,
            ..small_config()
        },
    ] {
        let mut enc = Encoder::build(cfg, 21).unwrap();
        randomize_biases(&mut enc, 4);
        let w = random_window(&enc.config, 8);
        let got = enc.embed(&w).unwrap();
        let want = oracle_embed(&enc, &w);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }
}

#[test]
fn default_config_matches_oracle() {
    for readout in [Readout::Last, Readout::Mean] {
        let mut enc = Encoder::build(
            EncoderConfig {
                hidden_channels: 8,
                readout,
                ..Default::default()
            },
            2,
        )
        .unwrap();
        randomize_biases(&mut enc, 1);
        let w = random_window(&enc.config, 3);
        let got = enc.embed(&w).unwrap();
        let want = oracle_embed(&enc, &w);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{readout:?}: {a} vs {b}");
        }
    }
}

#[test]
fn subsampled_and_full_forward_agree() {
    for readout in [Readout::Last, Readout::Mean] {
        forward_forms_agree(EncoderConfig {
            readout,
            ..small_config()
        });
    }
}

fn forward_forms_agree(cfg: EncoderConfig) {
    let mut enc = Encoder::build(cfg, 13).unwrap();
    randomize_biases(&mut enc, 2);
    let windows: Vec<Vec<f64>> = (0..3).map(|s| random_window(&enc.config, s)).collect();
    let refs: Vec<&[f64]> = windows.iter().map(|w| &w[..]).collect();
    let mut g = Graph::new();
    let pv = enc.register(&mut g, false);
    let fast = enc.forward(&mut g, &pv, &refs, None).unwrap();
    let full = enc.forward_full(&mut g, &pv, &refs, None).unwrap();
    for (a, b) in g.value(fast).data().iter().zip(g.value(full).data()) {
        assert!((a - b).abs() < 1e-12);
    }
    // batch rows equal single-window embeddings
    let batch = enc.embed_batch(&refs).unwrap();
    for (row, w) in batch.iter().zip(&windows) {
        assert_eq!(row, &enc.embed(w).unwrap());
    }
}

#[test]
fn first_frame_reaches_the_tcn_readout() {
    let enc = Encoder::build(small_config(), 17).unwrap();
    let mut w = random_window(&enc.config, 1);
    let before = enc.embed(&w).unwrap();
    w[0] += 1.0;
    let after = enc.embed(&w).unwrap();
    let t = enc.config.tcn_embedding;
    assert!(before[..t].iter().zip(&after[..t]).any(|(a, b)| (a - b).abs() > 1e-9));
}

#[test]
fn block_output_matches_composed_convolutions() {
    let cfg = EncoderConfig {
        in_channels: 1,
        hidden_channels: 1,
        ..small_config()
    };
    let mut enc = Encoder::build(cfg, 0).unwrap();
    let b = &mut enc.params.blocks[1];
    b.conv1_w = Tensor::new(vec![1, 1, 4], vec![0.5, -1.0, 0.25, 1.0]).unwrap();
    b.conv1_b = Tensor::from_vec(vec![0.1]);
    b.conv2_w = Tensor::new(vec![1, 1, 4], vec![1.0, 0.0, -0.5, 2.0]).unwrap();
    b.conv2_b = Tensor::from_vec(vec![-0.2]);
    let x: Vec<f64> = (0..32).map(|t| ((t * 7) % 5) as f64 - 2.0).collect();
    let y = enc
        .block_output(1, &Tensor::new(vec![1, 1, 32], x.clone()).unwrap())
        .unwrap();
    let b = &enc.params.blocks[1];
    let inner = relu_rows(conv_oracle(&[x.clone()], &b.conv1_w, &b.conv1_b, 2));
    let outer = relu_rows(conv_oracle(&inner, &b.conv2_w, &b.conv2_b, 2));
    let want: Vec<f64> = x.iter().zip(&outer[0]).map(|(a, c)| (a + c).max(0.0)).collect();
    for (a, b) in y.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

fn to_numerics(e: EncoderError) -> NumericsError {
    match e {
        EncoderError::Numerics(n) => n,
        other => NumericsError::Contract(other.to_string()),
    }
}

fn check_encoder_gradients(full: bool, readout: Readout) {
    let mut enc = Encoder::build(
        EncoderConfig {
            readout,
            ..small_config()
        },
        31,
    )
    .unwrap();
    randomize_biases(&mut enc, 5);
    let windows: Vec<Vec<f64>> = (0..2).map(|s| random_window(&enc.config, 100 + s)).collect();
    let target: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        (0..2 * enc.config.embedding_size())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect()
    };
    let n = enc.params.named().len();
    for i in 0..n {
        let theta = enc.params.named()[i].1.clone();
        let f = |g: &mut Graph, p: Var| -> Result<Var, NumericsError> {
            let mut pv = enc.register(g, false);
            pv.vars[i] = p;
            let refs: Vec<&[f64]> = windows.iter().map(|w| &w[..]).collect();
            let mut streams = StreamRng::new(9);
            let y = if full {
                enc.forward_full(g, &pv, &refs, Some(&mut streams))
            } else {
                enc.forward(g, &pv, &refs, Some(&mut streams))
            }
            .map_err(to_numerics)?;
            let t = g.constant(Tensor::new(g.shape(y).to_vec(), target.clone())?);
            let d = g.squared_l2_distance(y, t)?;
            Ok(g.mean(d))
        };
        let check = finite_difference_check(f, &theta, 1e-5).unwrap();
        assert!(
            check.max_rel_error <= 1e-4,
            "{}: {}",
            enc.params.named()[i].0,
            check.max_rel_error
        );
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    check_encoder_gradients(false, Readout::Last);
}

#[test]
fn mean_readout_gradients_match_finite_differences() {
    check_encoder_gradients(false, Readout::Mean);
    check_encoder_gradients(true, Readout::Mean);
}

#[test]
fn full_forward_gradients_match_finite_differences() {
    check_encoder_gradients(true, Readout::Last);
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.bin");
    let mut enc = Encoder::build(small_config(), 3).unwrap();
    randomize_biases(&mut enc, 3);
    save_checkpoint(&enc, &path).unwrap();
    let back = load_checkpoint(&path, Some(&enc.config)).unwrap();
    assert_eq!(back, enc);

    let other = EncoderConfig {
        hidden_channels: 7,
        ..small_config()
    };
    assert!(matches!(
        load_checkpoint(&path, Some(&other)),
        Err(EncoderError::Checkpoint { .. })
    ));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 3);
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path, None).is_err());
    bytes[0] = b'X';
    std::fs::write(&path, &bytes).unwrap();
    assert!(load_checkpoint(&path, None)
        .unwrap_err()
        .to_string()
        .contains("not an encoder"));
}
