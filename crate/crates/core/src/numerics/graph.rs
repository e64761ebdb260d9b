//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends one node to the [`Graph`]. Inputs always precede
//! their outputs, so a single reverse sweep over the node list visits each
//! recorded operation exactly once in a valid topological order.

use rand::Rng;

use super::gemm::{gemm, MatRef};
use super::{NumericsError, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a causal 1-D convolution.
///
/// Output frame `j` of `n_out` sits at input frame
/// `len - 1 - (n_out - 1 - j) * out_stride`, so the last output frame is always
/// aligned with the last input frame. `out_stride == 1` is the ordinary
/// same-length causal convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub dilation: usize,
    pub out_stride: usize,
}

impl ConvSpec {
    pub fn causal(dilation: usize) -> Self {
        Self {
            dilation,
            out_stride: 1,
        }
    }

    pub fn output_len(&self, len: usize) -> usize {
        (len - 1) / self.out_stride + 1
    }

    fn output_frame(&self, len: usize, n_out: usize, j: usize) -> usize {
        len - 1 - (n_out - 1 - j) * self.out_stride
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
    },
    Relu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    AddScalar {
        x: Var,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SquaredDistance {
        a: Var,
        b: Var,
    },
    Mean {
        x: Var,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    TailFrames {
        x: Var,
        stride: usize,
    },
    MeanFrames {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Differentiation tape: owns every value computed in one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> NumericsError {
    NumericsError::Shape(format!("{what}: {a:?} vs {b:?}"))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`], if any.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn grad_data(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        // Nodes that cannot reach a parameter keep no backward information.
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// `x[B×I] · w[I×O] + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(shape_err("linear input/weight", xs, ws));
        }
        if bs != [ws[1]] {
            return Err(shape_err("linear bias/weight", bs, ws));
        }
        let (batch, inputs, outputs) = (xs[0], xs[1], ws[1]);
        let mut out = Vec::with_capacity(batch * outputs);
        for _ in 0..batch {
            out.extend_from_slice(self.value(b).data());
        }
        gemm(
            1.0,
            MatRef::row_major(self.value(x).data(), batch, inputs),
            MatRef::row_major(self.value(w).data(), inputs, outputs),
            1.0,
            &mut out,
        );
        let value = Tensor::new(vec![batch, outputs], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Same-length causal convolution with left zero padding of
    /// `(K-1)·dilation` frames.
    pub fn conv1d_causal(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var, NumericsError> {
        self.conv1d(x, w, b, ConvSpec::causal(dilation))
    }

    /// Causal convolution evaluated only at the end-aligned frames described
    /// by `spec`. Input `[B×Cin×L]`, weight `[Cout×Cin×K]`, bias `[Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var, NumericsError> {
        if spec.dilation < 1 {
            return Err(NumericsError::Parameter(format!(
                "dilation must be >= 1, got {}",
                spec.dilation
            )));
        }
        if spec.out_stride < 1 {
            return Err(NumericsError::Parameter(format!(
                "output stride must be >= 1, got {}",
                spec.out_stride
            )));
        }
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(shape_err("conv1d input/weight", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(shape_err("conv1d bias/weight", bs, ws));
        }
        let (batch, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        let n_out = spec.output_len(len);
        let ck = cin * k;
        let mut out = vec![0.0; batch * cout * n_out];
        let mut col = vec![0.0; ck * n_out];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        for s in 0..batch {
            im2col(
                &xv[s * cin * len..(s + 1) * cin * len],
                cin,
                len,
                k,
                spec,
                n_out,
                &mut col,
            );
            let dst = &mut out[s * cout * n_out..(s + 1) * cout * n_out];
            for (c, row) in dst.chunks_mut(n_out).enumerate() {
                row.fill(bv[c]);
            }
            gemm(
                1.0,
                MatRef::row_major(wv, cout, ck),
                MatRef::row_major(&col, ck, n_out),
                1.0,
                dst,
            );
        }
        let value = Tensor::new(vec![batch, cout, n_out], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, b, spec }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| a.max(0.0)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("relu shape");
        self.push(value, Op::Relu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.zip_same_shape("add", a, b, |p, q| p + q)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let value = self.zip_same_shape("sub", a, b, |p, q| p - q)?;
        Ok(self.push(value, Op::Sub { a, b }, &[a, b]))
    }

    fn zip_same_shape(&self, what: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(what, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("scale shape");
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|a| a + c).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("shift shape");
        self.push(value, Op::AddScalar { x }, &[x])
    }

    /// Inverted dropout. Identity (the same handle) in eval mode or for `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, NumericsError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NumericsError::Parameter(format!(
                "dropout probability must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }, &[x]))
    }

    /// Squared Euclidean distance. Vectors `[D]` give a one-element result;
    /// higher-rank inputs `[B×…]` give one distance per leading row.
    pub fn squared_l2_distance(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("squared distance", ta.shape(), tb.shape()));
        }
        let rows = if ta.shape().len() >= 2 { ta.shape()[0] } else { 1 };
        let width = ta.len() / rows;
        let data: Vec<f64> = (0..rows)
            .map(|r| {
                let (pa, pb) = (&ta.data()[r * width..][..width], &tb.data()[r * width..][..width]);
                pa.iter().zip(pb).map(|(p, q)| (p - q) * (p - q)).sum()
            })
            .collect();
        let value = Tensor::new(vec![rows], data)?;
        Ok(self.push(value, Op::SquaredDistance { a, b }, &[a, b]))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x])
    }

    /// Gathers rows (first axis) of `x`; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let n = v.shape()[0];
        if rows.is_empty() {
            return Err(NumericsError::Shape("select_rows with no rows".into()));
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(NumericsError::Shape(format!("row {bad} out of range for {n} rows")));
        }
        let width = v.len() / n;
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(&v.data()[r * width..(r + 1) * width]);
        }
        let mut shape = v.shape().to_vec();
        shape[0] = rows.len();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Concatenates `[B×D_i]` matrices along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Shape("concat of nothing".into()))?;
        let batch = self.shape(first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != batch {
                return Err(shape_err("concat_cols", self.shape(first), s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(batch * total);
        for r in 0..batch {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::new(vec![batch, total], data)?;
        Ok(self.push(value, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    /// Keeps the end-aligned frames `len-1, len-1-stride, …` of `[B×C×L]`,
    /// in increasing time order.
    pub fn tail_frames(&mut self, x: Var, stride: usize) -> Result<Var, NumericsError> {
        if stride < 1 {
            return Err(NumericsError::Parameter("frame stride must be >= 1".into()));
        }
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 {
            return Err(NumericsError::Shape(format!("tail_frames expects [B×C×L], got {s:?}")));
        }
        let (rows, len) = (s[0] * s[1], s[2]);
        let n_out = (len - 1) / stride + 1;
        let mut data = Vec::with_capacity(rows * n_out);
        for r in 0..rows {
            let src = &v.data()[r * len..(r + 1) * len];
            data.extend((0..n_out).map(|j| src[len - 1 - (n_out - 1 - j) * stride]));
        }
        let value = Tensor::new(vec![s[0], s[1], n_out], data)?;
        Ok(self.push(value, Op::TailFrames { x, stride }, &[x]))
    }

    /// Final frame of `[B×C×L]` as a `[B×C]` matrix.
    pub fn last_frame(&mut self, x: Var) -> Result<Var, NumericsError> {
        let len = *self
            .shape(x)
            .get(2)
            .ok_or_else(|| NumericsError::Shape("last_frame expects [B×C×L]".into()))?;
        let tail = self.tail_frames(x, len)?;
        let s = self.shape(tail).to_vec();
        // [B×C×1] and [B×C] share a layout; reshape in place.
        let node = &mut self.nodes[tail.0];
        node.value = node.value.clone().reshape(vec![s[0], s[1]])?;
        Ok(tail)
    }

    /// Time average of `[B×C×L]` as a `[B×C]` matrix.
    pub fn mean_frames(&mut self, x: Var) -> Result<Var, NumericsError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 {
            return Err(NumericsError::Shape(format!("mean_frames expects [B×C×L], got {s:?}")));
        }
        let len = s[2];
        let data = v
            .data()
            .chunks_exact(len)
            .map(|r| r.iter().sum::<f64>() / len as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(value, Op::MeanFrames { x }, &[x]))
    }

    /// Scalar `Σ x ⊙ weights` for a constant weight array of the same length.
    /// Backpropagating it pushes `weights` into `x` as its gradient, which
    /// is how externally computed loss gradients enter the tape.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var, NumericsError> {
        let v = self.value(x);
        if v.len() != weights.len() {
            return Err(NumericsError::Shape(format!(
                "weighted_sum of {:?} with {} weights",
                v.shape(),
                weights.len()
            )));
        }
        let total = v.data().iter().zip(weights).map(|(a, b)| a * b).sum();
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean softmax cross-entropy of `[B×K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, NumericsError> {
        let v = self.value(logits);
        let s = v.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(NumericsError::Shape(format!(
                "cross-entropy logits {s:?} vs {} labels",
                labels.len()
            )));
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(NumericsError::Shape(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let mut probs = Vec::with_capacity(v.len());
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &v.data()[r * k..(r + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|a| (a - max).exp()).sum();
            loss += z.ln() + max - row[label];
            probs.extend(row.iter().map(|a| (a - max).exp() / z));
        }
        let value = Tensor::scalar(loss / labels.len() as f64);
        Ok(self.push(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a one-element `loss`. Afterwards every node that
    /// requires a gradient and precedes `loss` holds one (zero when the node
    /// does not influence the loss).
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes[..=loss.0] {
            node.grad = node.requires_grad.then(|| vec![0.0; node.value.len()]);
        }
        for node in &mut self.nodes[loss.0 + 1..] {
            node.grad = None;
        }
        if let Some(g) = self.nodes[loss.0].grad.as_mut() {
            g[0] = 1.0;
        }
        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if let Some(g) = self.nodes[v.0].grad.as_mut() {
            add_into(g, delta);
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].grad.is_some()
    }

    fn propagate(&mut self, id: usize) {
        let out_grad = self.nodes[id].grad.take().expect("grad present");
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => self.linear_backward(*x, *w, *b, &out_grad),
            Op::Conv1d { x, w, b, spec } => self.conv_backward(*x, *w, *b, *spec, &out_grad),
            Op::Relu { x } => {
                let out = self.nodes[id].value.data();
                let delta: Vec<f64> = out
                    .iter()
                    .zip(&out_grad)
                    .map(|(&o, &g)| if o > 0.0 { g } else { 0.0 })
                    .collect();
                self.accumulate(*x, &delta);
            }
            Op::Add { a, b } => {
                self.accumulate(*a, &out_grad);
                self.accumulate(*b, &out_grad);
            }
            Op::Sub { a, b } => {
                self.accumulate(*a, &out_grad);
                let neg: Vec<f64> = out_grad.iter().map(|g| -g).collect();
                self.accumulate(*b, &neg);
            }
            Op::Scale { x, factor } => {
                let delta: Vec<f64> = out_grad.iter().map(|g| g * factor).collect();
                self.accumulate(*x, &delta);
            }
            Op::AddScalar { x } => self.accumulate(*x, &out_grad),
            Op::Dropout { x, mask } => {
                let delta: Vec<f64> = out_grad.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.accumulate(*x, &delta);
            }
            Op::SquaredDistance { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let width = ta.len() / out_grad.len();
                let da: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .enumerate()
                    .map(|(i, (p, q))| 2.0 * (p - q) * out_grad[i / width])
                    .collect();
                let db: Vec<f64> = da.iter().map(|d| -d).collect();
                self.accumulate(*a, &da);
                self.accumulate(*b, &db);
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let delta = vec![out_grad[0] / n as f64; n];
                self.accumulate(*x, &delta);
            }
            Op::SelectRows { x, rows } => {
                if self.wants(*x) {
                    let width = out_grad.len() / rows.len();
                    let g = self.nodes[x.0].grad.as_mut().expect("grad");
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(
                            &mut g[r * width..(r + 1) * width],
                            &out_grad[i * width..(i + 1) * width],
                        );
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let batch = self.shape(parts[0])[0];
                let total = out_grad.len() / batch;
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let g = self.nodes[p.0].grad.as_mut().expect("grad");
                        for r in 0..batch {
                            add_into(
                                &mut g[r * w..(r + 1) * w],
                                &out_grad[r * total + offset..r * total + offset + w],
                            );
                        }
                    }
                    offset += w;
                }
            }
            Op::TailFrames { x, stride } => {
                if self.wants(*x) {
                    let len = self.shape(*x)[2];
                    let n_out = (len - 1) / stride + 1;
                    let g = self.nodes[x.0].grad.as_mut().expect("grad");
                    for (r, src) in out_grad.chunks(n_out).enumerate() {
                        for (j, v) in src.iter().enumerate() {
                            g[r * len + len - 1 - (n_out - 1 - j) * stride] += v;
                        }
                    }
                }
            }
            Op::MeanFrames { x } => {
                let len = self.shape(*x)[2];
                let delta: Vec<f64> = out_grad
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / len as f64, len))
                    .collect();
                self.accumulate(*x, &delta);
            }
            Op::WeightedSum { x, weights } => {
                let delta: Vec<f64> = weights.iter().map(|w| w * out_grad[0]).collect();
                self.accumulate(*x, &delta);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                let scale = out_grad[0] / labels.len() as f64;
                let mut delta: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    delta[r * k + l] -= scale;
                }
                self.accumulate(*logits, &delta);
            }
        }
        self.nodes[id].op = op;
        self.nodes[id].grad = Some(out_grad);
    }

    fn linear_backward(&mut self, x: Var, w: Var, b: Var, dout: &[f64]) {
        let (batch, inputs) = (self.shape(x)[0], self.shape(x)[1]);
        let outputs = self.shape(w)[1];
        let dmat = MatRef::row_major(dout, batch, outputs);
        if self.wants(x) {
            let mut dx = vec![0.0; batch * inputs];
            gemm(
                1.0,
                dmat,
                MatRef::row_major(self.value(w).data(), inputs, outputs).t(),
                0.0,
                &mut dx,
            );
            self.accumulate(x, &dx);
        }
        if self.wants(w) {
            let mut dw = vec![0.0; inputs * outputs];
            gemm(
                1.0,
                MatRef::row_major(self.value(x).data(), batch, inputs).t(),
                dmat,
                0.0,
                &mut dw,
            );
            self.accumulate(w, &dw);
        }
        if self.wants(b) {
            let mut db = vec![0.0; outputs];
            for row in dout.chunks(outputs) {
                add_into(&mut db, row);
            }
            self.accumulate(b, &db);
        }
    }

    fn conv_backward(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec, dout: &[f64]) {
        let (batch, cin, len) = {
            let s = self.shape(x);
            (s[0], s[1], s[2])
        };
        let (cout, k) = (self.shape(w)[0], self.shape(w)[2]);
        let n_out = spec.output_len(len);
        let ck = cin * k;
        let (want_x, want_w, want_b) = (self.wants(x), self.wants(w), self.wants(b));
        let mut col = vec![0.0; ck * n_out];
        let mut dcol = vec![0.0; ck * n_out];
        let mut dx = if want_x {
            vec![0.0; batch * cin * len]
        } else {
            Vec::new()
        };
        let mut dw = if want_w { vec![0.0; cout * ck] } else { Vec::new() };
        let mut db = if want_b { vec![0.0; cout] } else { Vec::new() };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for s in 0..batch {
            let dy = &dout[s * cout * n_out..(s + 1) * cout * n_out];
            let dy_mat = MatRef::row_major(dy, cout, n_out);
            if want_w {
                im2col(
                    &xv[s * cin * len..(s + 1) * cin * len],
                    cin,
                    len,
                    k,
                    spec,
                    n_out,
                    &mut col,
                );
                gemm(1.0, dy_mat, MatRef::row_major(&col, ck, n_out).t(), 1.0, &mut dw);
            }
            if want_b {
                for (c, row) in dy.chunks(n_out).enumerate() {
                    db[c] += row.iter().sum::<f64>();
                }
            }
            if want_x {
                gemm(1.0, MatRef::row_major(wv, cout, ck).t(), dy_mat, 0.0, &mut dcol);
                col2im_add(
                    &dcol,
                    cin,
                    len,
                    k,
                    spec,
                    n_out,
                    &mut dx[s * cin * len..(s + 1) * cin * len],
                );
            }
        }
        if want_x {
            self.accumulate(x, &dx);
        }
        if want_w {
            self.accumulate(w, &dw);
        }
        if want_b {
            self.accumulate(b, &db);
        }
    }
}

/// Unfolds one sample `[Cin×L]` into `[(Cin·K)×n_out]` taps.
fn im2col(x: &[f64], cin: usize, len: usize, k: usize, spec: ConvSpec, n_out: usize, col: &mut [f64]) {
    for c in 0..cin {
        let src = &x[c * len..(c + 1) * len];
        for tap in 0..k {
            let back = (k - 1 - tap) * spec.dilation;
            let row = &mut col[(c * k + tap) * n_out..(c * k + tap + 1) * n_out];
            if spec.out_stride == 1 {
                let pad = back.min(len);
                row[..pad].fill(0.0);
                row[pad..].copy_from_slice(&src[..len - pad]);
            } else {
                for (j, slot) in row.iter_mut().enumerate() {
                    let t = spec.output_frame(len, n_out, j);
                    *slot = if t >= back { src[t - back] } else { 0.0 };
                }
            }
        }
    }
}

fn col2im_add(dcol: &[f64], cin: usize, len: usize, k: usize, spec: ConvSpec, n_out: usize, dx: &mut [f64]) {
    for c in 0..cin {
        let dst = &mut dx[c * len..(c + 1) * len];
        for tap in 0..k {
            let back = (k - 1 - tap) * spec.dilation;
            let row = &dcol[(c * k + tap) * n_out..(c * k + tap + 1) * n_out];
            if spec.out_stride == 1 {
                let pad = back.min(len);
                add_into(&mut dst[..len - pad], &row[pad..]);
            } else {
                for (j, v) in row.iter().enumerate() {
                    let t = spec.output_frame(len, n_out, j);
                    if t >= back {
                        dst[t - back] += v;
                    }
                }
            }
        }
    }
}
