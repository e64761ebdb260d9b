//! Temporal convolutional encoder with a Haar wavelet side branch.
//!
//! The TCN branch stacks residual blocks of two dilated causal convolutions
//! (dilation `2^level`) and reads out the hidden vector at the final frame
//! through a linear layer. The wavelet branch maps the flattened approximation
//! and detail coefficients of the window through one linear layer each. The
//! embedding is `[tcn | approx | detail]`.
//!
//! Only the final frame is read out, and block `l` looks back in steps of
//! `2^l`, so block `l` needs its input only at frames `L-1 - m·2^l`. The
//! default forward pass works on those end-aligned subsequences with dilation
//! 1, which is exact and about four times cheaper than evaluating every frame.
//! [`Encoder::forward_full`] keeps the frame-by-frame form as a reference.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{mix_seed, ConvSpec, Graph, NumericsError, StreamRng, Tensor, Var};
use crate::wavelet::{window_wavelet_features, WaveletError};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

/// Scale applied on top of fan-in initialization for the TCN readout. The
/// residual stack amplifies activations, so untrained embeddings would
/// otherwise sit tens of margins apart.
pub const TCN_READOUT_INIT_GAIN: f64 = 0.01;
/// Same for the two wavelet linears.
pub const WAVELET_READOUT_INIT_GAIN: f64 = 0.05;

/// Wavelet coefficients enter their linears multiplied by `1/sqrt(fan_in)`
/// and the weights are initialized at unit scale instead. The forward pass
/// at initialization is unchanged, but an Adam step of size `lr` on every
/// weight then moves the output by `O(lr·sqrt(fan_in))` rather than
/// `O(lr·fan_in)`; with 15 500 inputs the latter blows the branch up within
/// a few batches.
pub fn wavelet_input_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid encoder configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Wavelet(#[from] WaveletError),
    #[error("window shape mismatch: expected {channels}×{length} = {} samples, got {got}", channels * length)]
    WindowShape { channels: usize, length: usize, got: usize },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: String, reason: String },
}

/// How the TCN hidden sequence becomes one vector.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Readout {
    /// Hidden state at the final frame.
    Last,
    /// Average of the final block's output over the end-aligned frames
    /// `L-1 - m·2^(levels-1)`, i.e. the frames that block steps through.
    #[default]
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub kernel_size: usize,
    pub levels: usize,
    pub hidden_channels: usize,
    pub tcn_embedding: usize,
    pub wavelet_embedding_per_branch: usize,
    pub dropout_p: f64,
    pub window_length: usize,
    pub readout: Readout,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: 31,
            kernel_size: 16,
            levels: 6,
            hidden_channels: 32,
            tcn_embedding: 32,
            wavelet_embedding_per_branch: 15,
            dropout_p: 0.1,
            window_length: 1000,
            readout: Readout::Mean,
        }
    }
}

impl EncoderConfig {
    /// `1 + 2(k−1)(2^levels − 1)`.
    pub fn receptive_field(&self) -> usize {
        1 + 2 * (self.kernel_size.saturating_sub(1)) * ((1usize << self.levels.min(40)) - 1)
    }

    pub fn embedding_size(&self) -> usize {
        self.tcn_embedding + 2 * self.wavelet_embedding_per_branch
    }

    pub fn wavelet_input_size(&self) -> usize {
        self.in_channels * self.window_length / 2
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let positive = [
            ("in_channels", self.in_channels),
            ("kernel_size", self.kernel_size),
            ("levels", self.levels),
            ("hidden_channels", self.hidden_channels),
            ("tcn_embedding", self.tcn_embedding),
            ("wavelet_embedding_per_branch", self.wavelet_embedding_per_branch),
            ("window_length", self.window_length),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::Config(format!("{name} must be positive")));
        }
        if self.levels > 30 {
            return Err(EncoderError::Config(format!("{} levels is too deep", self.levels)));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(EncoderError::Config(format!(
                "dropout probability {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.window_length % 2 != 0 {
            return Err(EncoderError::Config(format!(
                "window length {} must be even for the Haar branch",
                self.window_length
            )));
        }
        let rf = self.receptive_field();
        if rf < self.window_length {
            return Err(EncoderError::Config(format!(
                "receptive field {rf} is shorter than the window length {}",
                self.window_length
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    /// 1×1 projection, present when the block changes the channel count.
    pub residual: Option<(Tensor, Tensor)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub blocks: Vec<BlockParams>,
    pub tcn_w: Tensor,
    pub tcn_b: Tensor,
    pub approx_w: Tensor,
    pub approx_b: Tensor,
    pub detail_w: Tensor,
    pub detail_b: Tensor,
}

impl EncoderParams {
    /// Every parameter tensor with a stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{l}.conv1.weight"), &b.conv1_w));
            out.push((format!("block{l}.conv1.bias"), &b.conv1_b));
            out.push((format!("block{l}.conv2.weight"), &b.conv2_w));
            out.push((format!("block{l}.conv2.bias"), &b.conv2_b));
            if let Some((w, bias)) = &b.residual {
                out.push((format!("block{l}.residual.weight"), w));
                out.push((format!("block{l}.residual.bias"), bias));
            }
        }
        out.push(("tcn.weight".into(), &self.tcn_w));
        out.push(("tcn.bias".into(), &self.tcn_b));
        out.push(("approx.weight".into(), &self.approx_w));
        out.push(("approx.bias".into(), &self.approx_b));
        out.push(("detail.weight".into(), &self.detail_w));
        out.push(("detail.bias".into(), &self.detail_b));
        out
    }

    /// Mutable tensors in the same order as [`EncoderParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            out.push(&mut b.conv1_w);
            out.push(&mut b.conv1_b);
            out.push(&mut b.conv2_w);
            out.push(&mut b.conv2_b);
            if let Some((w, bias)) = &mut b.residual {
                out.push(w);
                out.push(bias);
            }
        }
        out.extend([
            &mut self.tcn_w,
            &mut self.tcn_b,
            &mut self.approx_w,
            &mut self.approx_b,
            &mut self.detail_w,
            &mut self.detail_b,
        ]);
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.all_finite())
    }

    pub fn num_parameters(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Graph handles of every parameter, in [`EncoderParams::named`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub vars: Vec<Var>,
}

struct BlockVars {
    c1: (Var, Var),
    c2: (Var, Var),
    res: Option<(Var, Var)>,
}

/// A validated configuration together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

fn he_tensor(shape: Vec<usize>, fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let sd = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, sd).expect("finite sd");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("init shape")
}

impl Encoder {
    /// Fan-in scaled normal initialization; biases start at zero.
    pub fn build(config: EncoderConfig, seed: u64) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xe4c0]));
        let (h, k) = (config.hidden_channels, config.kernel_size);
        let mut blocks = Vec::with_capacity(config.levels);
        for l in 0..config.levels {
            let cin = if l == 0 { config.in_channels } else { h };
            blocks.push(BlockParams {
                conv1_w: he_tensor(vec![h, cin, k], cin * k, 1.0, &mut rng),
                conv1_b: Tensor::zeros(&[h]),
                conv2_w: he_tensor(vec![h, h, k], h * k, 1.0, &mut rng),
                conv2_b: Tensor::zeros(&[h]),
                residual: (cin != h).then(|| (he_tensor(vec![h, cin, 1], cin, 1.0, &mut rng), Tensor::zeros(&[h]))),
            });
        }
        let e = config.wavelet_embedding_per_branch;
        let wi = config.wavelet_input_size();
        let params = EncoderParams {
            blocks,
            tcn_w: he_tensor(vec![h, config.tcn_embedding], h, TCN_READOUT_INIT_GAIN, &mut rng),
            tcn_b: Tensor::zeros(&[config.tcn_embedding]),
            approx_w: he_tensor(vec![wi, e], 1, WAVELET_READOUT_INIT_GAIN, &mut rng),
            approx_b: Tensor::zeros(&[e]),
            detail_w: he_tensor(vec![wi, e], 1, WAVELET_READOUT_INIT_GAIN, &mut rng),
            detail_b: Tensor::zeros(&[e]),
        };
        Ok(Self { config, params })
    }

    /// Pairs `config` with existing parameters after checking every shape.
    pub fn from_parts(config: EncoderConfig, params: EncoderParams) -> Result<Self, EncoderError> {
        config.validate()?;
        let reference = Encoder::build(config.clone(), 0)?;
        let want = reference.params.named();
        let got = params.named();
        if want.len() != got.len() {
            return Err(EncoderError::Config(format!(
                "expected {} parameter tensors, got {}",
                want.len(),
                got.len()
            )));
        }
        for ((wn, wt), (gn, gt)) in want.iter().zip(&got) {
            if wn != gn || wt.shape() != gt.shape() {
                return Err(EncoderError::Config(format!(
                    "parameter {gn} {:?} does not match {wn} {:?}",
                    gt.shape(),
                    wt.shape()
                )));
            }
        }
        if !params.all_finite() {
            return Err(EncoderError::Config("parameters contain non-finite values".into()));
        }
        Ok(Self { config, params })
    }

    /// Registers the parameters on `g`; as constants when `trainable` is false.
    pub fn register(&self, g: &mut Graph, trainable: bool) -> ParamVars {
        let vars = self
            .params
            .named()
            .into_iter()
            .map(|(_, t)| g.leaf(t.clone(), trainable))
            .collect();
        ParamVars { vars }
    }

    fn block_vars(&self, pv: &ParamVars) -> (Vec<BlockVars>, [Var; 6]) {
        let mut it = pv.vars.iter().copied();
        let mut next = || it.next().expect("parameter count");
        let blocks = self
            .params
            .blocks
            .iter()
            .map(|b| BlockVars {
                c1: (next(), next()),
                c2: (next(), next()),
                res: b.residual.as_ref().map(|_| (next(), next())),
            })
            .collect();
        let tail = [next(), next(), next(), next(), next(), next()];
        (blocks, tail)
    }

    fn check_windows(&self, windows: &[&[f64]]) -> Result<(), EncoderError> {
        let (c, l) = (self.config.in_channels, self.config.window_length);
        if windows.is_empty() {
            return Err(EncoderError::Config("no windows to encode".into()));
        }
        for w in windows {
            if w.len() != c * l {
                return Err(EncoderError::WindowShape {
                    channels: c,
                    length: l,
                    got: w.len(),
                });
            }
        }
        Ok(())
    }

    fn inputs(&self, g: &mut Graph, windows: &[&[f64]]) -> Result<(Var, Var, Var), EncoderError> {
        self.check_windows(windows)?;
        let (c, l) = (self.config.in_channels, self.config.window_length);
        let b = windows.len();
        let mut x = Vec::with_capacity(b * c * l);
        let mut approx = Vec::with_capacity(b * c * l / 2);
        let mut detail = Vec::with_capacity(b * c * l / 2);
        let half = c * l / 2;
        let scale = wavelet_input_scale(half);
        for w in windows {
            x.extend_from_slice(w);
            let (a, d) = window_wavelet_features(w.chunks_exact(l))?;
            approx.extend(a.into_iter().map(|v| v * scale));
            detail.extend(d.into_iter().map(|v| v * scale));
        }
        let xv = g.constant(Tensor::new(vec![b, c, l], x)?);
        let av = g.constant(Tensor::new(vec![b, half], approx)?);
        let dv = g.constant(Tensor::new(vec![b, half], detail)?);
        Ok((xv, av, dv))
    }

    fn heads(&self, g: &mut Graph, tail: [Var; 6], hidden: Var, approx: Var, detail: Var) -> Result<Var, EncoderError> {
        let t = g.linear(hidden, tail[0], tail[1])?;
        let a = g.linear(approx, tail[2], tail[3])?;
        let d = g.linear(detail, tail[4], tail[5])?;
        Ok(g.concat_cols(&[t, a, d])?)
    }

    fn dropout(&self, g: &mut Graph, x: Var, dropout: Option<&mut StreamRng>) -> Result<Var, EncoderError> {
        match dropout {
            Some(streams) => {
                let mut rng = streams.next_stream();
                Ok(g.dropout(x, self.config.dropout_p, true, &mut rng)?)
            }
            None => Ok(x),
        }
    }

    /// Embeddings `[B×E]` for channel-major `C×L` windows, using the
    /// subsampled evaluation. Dropout is active iff `dropout` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        windows: &[&[f64]],
        mut dropout: Option<&mut StreamRng>,
    ) -> Result<Var, EncoderError> {
        let (x, approx, detail) = self.inputs(g, windows)?;
        let (blocks, tail) = self.block_vars(pv);
        let last = blocks.len() - 1;
        let mut h = x;
        for (l, b) in blocks.iter().enumerate() {
            // h holds frames L-1 - m·2^l; the next block wants every other one.
            let len = g.shape(h)[2];
            let out_stride = match (l == last, self.config.readout) {
                (false, _) => 2,
                (true, Readout::Last) => len,
                (true, Readout::Mean) => 1,
            };
            let y = g.conv1d(h, b.c1.0, b.c1.1, ConvSpec::causal(1))?;
            let y = g.relu(y);
            let y = self.dropout(g, y, dropout.as_deref_mut())?;
            let y = g.conv1d(
                y,
                b.c2.0,
                b.c2.1,
                ConvSpec {
                    dilation: 1,
                    out_stride,
                },
            )?;
            let y = g.relu(y);
            let y = self.dropout(g, y, dropout.as_deref_mut())?;
            let r = match b.res {
                Some((w, bias)) => g.conv1d(
                    h,
                    w,
                    bias,
                    ConvSpec {
                        dilation: 1,
                        out_stride,
                    },
                )?,
                None => g.tail_frames(h, out_stride)?,
            };
            let sum = g.add(r, y)?;
            h = g.relu(sum);
        }
        let hidden = match self.config.readout {
            Readout::Last => g.last_frame(h)?,
            Readout::Mean => g.mean_frames(h)?,
        };
        self.heads(g, tail, hidden, approx, detail)
    }

    /// Reference evaluation: every block computed at every frame.
    pub fn forward_full(
        &self,
        g: &mut Graph,
        pv: &ParamVars,
        windows: &[&[f64]],
        mut dropout: Option<&mut StreamRng>,
    ) -> Result<Var, EncoderError> {
        let (x, approx, detail) = self.inputs(g, windows)?;
        let (blocks, tail) = self.block_vars(pv);
        let mut h = x;
        for (l, b) in blocks.iter().enumerate() {
            let h_out = self.residual_block(g, h, b, 1 << l, dropout.as_deref_mut())?;
            h = h_out;
        }
        let hidden = match self.config.readout {
            Readout::Last => g.last_frame(h)?,
            Readout::Mean => {
                let frames = g.tail_frames(h, 1 << (blocks.len() - 1))?;
                g.mean_frames(frames)?
            }
        };
        self.heads(g, tail, hidden, approx, detail)
    }

    fn residual_block(
        &self,
        g: &mut Graph,
        x: Var,
        b: &BlockVars,
        dilation: usize,
        mut dropout: Option<&mut StreamRng>,
    ) -> Result<Var, EncoderError> {
        let y = g.conv1d_causal(x, b.c1.0, b.c1.1, dilation)?;
        let y = g.relu(y);
        let y = self.dropout(g, y, dropout.as_deref_mut())?;
        let y = g.conv1d_causal(y, b.c2.0, b.c2.1, dilation)?;
        let y = g.relu(y);
        let y = self.dropout(g, y, dropout.as_deref_mut())?;
        let r = match b.res {
            Some((w, bias)) => g.conv1d_causal(x, w, bias, 1)?,
            None => x,
        };
        let sum = g.add(r, y)?;
        Ok(g.relu(sum))
    }

    /// Output of residual block `level` on `[B×C×L]` input, all frames.
    pub fn block_output(&self, level: usize, x: &Tensor) -> Result<Tensor, EncoderError> {
        if level >= self.params.blocks.len() {
            return Err(EncoderError::Config(format!("no block at level {level}")));
        }
        let mut g = Graph::new();
        let pv = self.register(&mut g, false);
        let (blocks, _) = self.block_vars(&pv);
        let xv = g.constant(x.clone());
        let out = self.residual_block(&mut g, xv, &blocks[level], 1 << level, None)?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode embedding of one channel-major window.
    pub fn embed(&self, window: &[f64]) -> Result<Vec<f64>, EncoderError> {
        Ok(self.embed_batch(&[window])?.pop().expect("one row"))
    }

    /// Eval-mode embeddings, one row per window.
    pub fn embed_batch(&self, windows: &[&[f64]]) -> Result<Vec<Vec<f64>>, EncoderError> {
        const CHUNK: usize = 16;
        let e = self.config.embedding_size();
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(CHUNK) {
            let mut g = Graph::new();
            let pv = self.register(&mut g, false);
            let y = self.forward(&mut g, &pv, chunk, None)?;
            out.extend(g.value(y).data().chunks_exact(e).map(|r| r.to_vec()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests;
