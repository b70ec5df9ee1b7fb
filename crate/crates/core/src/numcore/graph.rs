//! Eager reverse-mode differentiation tape.
//!
//! Every operation evaluates immediately and records what backward needs.
//! Nodes are appended in topological order, so the backward pass is a single
//! reverse sweep. Data-dependent choices (degenerate-row fallbacks, escort
//! maxima) are made at forward time and replayed exactly in backward.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;

use crate::activations::{self, ActivationKind};
use crate::error::{Error, Result};
use crate::numcore::tensor::{view2_mut_of, view2_of, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    AddBias { a: Var, bias: Var },
    Gemm { a: Var, ta: bool, b: Var, tb: bool },
    BatchGemm { a: Var, ta: bool, b: Var, tb: bool },
    Activation { a: Var, kind: ActivationKind },
    L1NormRows { a: Var, sums: Vec<f64>, degenerate: Vec<bool> },
    L2NormRows { a: Var, norms: Vec<f64>, degenerate: Vec<bool> },
    CausalSoftmaxRows { a: Var },
    EscortRows { a: Var, p: f64, maxes: Vec<f64>, sums: Vec<f64>, degenerate: Vec<bool> },
    SelectRows { take_b: Vec<bool>, a: Var, b: Var },
    Rope { a: Var, cos: Vec<f64>, sin: Vec<f64> },
    LayerNorm { a: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, tokens: Vec<u32> },
    CrossEntropy { logits: Var, targets: Vec<u32>, probs: Vec<f64> },
    MeanAll { a: Var },
    SumAll { a: Var },
    SliceFlat { a: Var, offset: usize },
    SliceLast { a: Var, start: usize },
    ConcatLast { parts: Vec<Var> },
    Reshape { a: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a tensor that does not require gradients (masks, inputs).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Insert a tensor whose gradient will be tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<(Vec<usize>, bool)> {
        let sa = self.value(a).shape();
        let sb = self.value(b).shape();
        if sa != sb {
            return Err(Error::Dimension(format!(
                "{name}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok((sa.to_vec(), self.needs(a) || self.needs(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ng) = self.binary_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Tensor::new(&shape, data)?, Op::Add { a, b }, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ng) = self.binary_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Tensor::new(&shape, data)?, Op::Sub { a, b }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, ng) = self.binary_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Tensor::new(&shape, data)?, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let data = t.data().iter().map(|x| x * c).collect();
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Scale { a, c }, ng))
    }

    /// Add a rank-1 bias to every last-dimension row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (w, shape) = {
            let t = self.value(a);
            (t.row_len(), t.shape().to_vec())
        };
        let bt = self.value(bias);
        if bt.rank() != 1 || bt.len() != w {
            return Err(Error::Dimension(format!(
                "add_bias: bias shape {:?} does not match row length {w}",
                bt.shape()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let bd = self.value(bias).data();
        for row in data.chunks_mut(w) {
            for (x, b) in row.iter_mut().zip(bd) {
                *x += b;
            }
        }
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(Tensor::new(&shape, data)?, Op::AddBias { a, bias }, ng))
    }

    /// Rank-2 matrix product with optional transposes on either operand.
    pub fn gemm(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let av = self.value(a).view2()?;
        let bv = self.value(b).view2()?;
        let aeff = if ta { av.t() } else { av };
        let beff = if tb { bv.t() } else { bv };
        if aeff.ncols() != beff.nrows() {
            return Err(Error::Dimension(format!(
                "gemm: inner dimensions disagree ({:?} x {:?}, ta={ta}, tb={tb})",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let (m, n) = (aeff.nrows(), beff.ncols());
        let mut out = vec![0.0; m * n];
        general_mat_mul(1.0, &aeff, &beff, 0.0, &mut view2_mut_of(&mut out, m, n));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::Gemm { a, ta, b, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.gemm(a, false, b, false)
    }

    /// Rank-3 batched matrix product; both operands share the batch dimension.
    pub fn batch_gemm(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!(
                "batch_gemm: expected matching rank-3 batches, got {sa:?} x {sb:?}"
            )));
        }
        let bsz = sa[0];
        let (ar, ac) = (sa[1], sa[2]);
        let (br, bc) = (sb[1], sb[2]);
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k1 != k2 {
            return Err(Error::Dimension(format!(
                "batch_gemm: inner dimensions disagree ({sa:?} x {sb:?}, ta={ta}, tb={tb})"
            )));
        }
        let mut out = vec![0.0; bsz * m * n];
        for i in 0..bsz {
            let av = view2_of(&self.value(a).data()[i * ar * ac..(i + 1) * ar * ac], ar, ac);
            let bv = view2_of(&self.value(b).data()[i * br * bc..(i + 1) * br * bc], br, bc);
            let aeff = if ta { av.t() } else { av };
            let beff = if tb { bv.t() } else { bv };
            let mut cv = view2_mut_of(&mut out[i * m * n..(i + 1) * m * n], m, n);
            general_mat_mul(1.0, &aeff, &beff, 0.0, &mut cv);
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::new(&[bsz, m, n], out)?,
            Op::BatchGemm { a, ta, b, tb },
            ng,
        ))
    }

    pub fn activation(&mut self, a: Var, kind: ActivationKind) -> Result<Var> {
        let t = self.value(a);
        let data = activations::apply_slice(kind, t.data())?;
        let shape = t.shape().to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Activation { a, kind }, ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.activation(a, ActivationKind::Relu)
    }

    /// Row l1-normalization with degenerate-row passthrough.
    pub fn l1_normalize_rows(&mut self, a: Var, eps: f64) -> Result<(Var, Vec<bool>)> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
        }
        let t = self.value(a);
        let (rows, w) = (t.rows(), t.row_len());
        let mut data = t.data().to_vec();
        let shape = t.shape().to_vec();
        let mut sums = vec![0.0; rows];
        let mut degenerate = vec![false; rows];
        for i in 0..rows {
            let row = &mut data[i * w..(i + 1) * w];
            let s: f64 = row.iter().map(|v| v.abs()).sum();
            sums[i] = s;
            if s < eps {
                degenerate[i] = true;
            } else {
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let ng = self.needs(a);
        let flags = degenerate.clone();
        let v = self.push(
            Tensor::new(&shape, data)?,
            Op::L1NormRows { a, sums, degenerate },
            ng,
        );
        Ok((v, flags))
    }

    /// Row l2-normalization with degenerate-row passthrough.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<(Var, Vec<bool>)> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
        }
        let t = self.value(a);
        let (rows, w) = (t.rows(), t.row_len());
        let mut data = t.data().to_vec();
        let shape = t.shape().to_vec();
        let mut norms = vec![0.0; rows];
        let mut degenerate = vec![false; rows];
        for i in 0..rows {
            let row = &mut data[i * w..(i + 1) * w];
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            norms[i] = n;
            if n < eps {
                degenerate[i] = true;
            } else {
                for v in row.iter_mut() {
                    *v /= n;
                }
            }
        }
        let ng = self.needs(a);
        let flags = degenerate.clone();
        let v = self.push(
            Tensor::new(&shape, data)?,
            Op::L2NormRows { a, norms, degenerate },
            ng,
        );
        Ok((v, flags))
    }

    /// Row softmax restricted to the causal prefix (entries j <= i), computed
    /// with row-max subtraction. Entries above the diagonal are zero.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        let l = *shape.last().unwrap();
        if shape.len() < 2 || shape[shape.len() - 2] != l {
            return Err(Error::Dimension(format!(
                "causal_softmax_rows: expected square score matrix, got {shape:?}"
            )));
        }
        let batches = t.len() / (l * l);
        let mut data = vec![0.0; t.len()];
        for bi in 0..batches {
            for i in 0..l {
                let base = bi * l * l + i * l;
                let row = &t.data()[base..base + i + 1];
                let mut mx = f64::NEG_INFINITY;
                for &v in row {
                    if !v.is_finite() {
                        return Err(Error::Numeric {
                            context: "non-finite attention logit".into(),
                            magnitude: v,
                        });
                    }
                    mx = mx.max(v);
                }
                let mut s = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - mx).exp();
                    data[base + j] = e;
                    s += e;
                }
                for v in &mut data[base..base + i + 1] {
                    *v /= s;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(&shape, data)?, Op::CausalSoftmaxRows { a }, ng))
    }

    /// Normalized p-th power of nonnegative rows: `x^p / sum(x^p)`, evaluated
    /// as `(x/max)^p` so that large p cannot overflow. Rows whose plain sum is
    /// below `eps` pass through unchanged and are flagged.
    pub fn escort_rows(&mut self, a: Var, p: f64, eps: f64) -> Result<(Var, Vec<bool>)> {
        if p < 1.0 {
            return Err(Error::Parameter(format!("power must be >= 1, got {p}")));
        }
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
        }
        let t = self.value(a);
        if let Some(v) = t.data().iter().copied().find(|v| *v < 0.0) {
            return Err(Error::Parameter(format!(
                "escort_rows requires nonnegative input, found {v}"
            )));
        }
        let (rows, w) = (t.rows(), t.row_len());
        let shape = t.shape().to_vec();
        let mut data = t.data().to_vec();
        let mut maxes = vec![0.0; rows];
        let mut sums = vec![0.0; rows];
        let mut degenerate = vec![false; rows];
        for i in 0..rows {
            let row = &mut data[i * w..(i + 1) * w];
            let plain_sum: f64 = row.iter().sum();
            if plain_sum < eps {
                degenerate[i] = true;
                continue;
            }
            let m = row.iter().cloned().fold(0.0f64, f64::max);
            maxes[i] = m;
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v / m).powf(p);
                s += *v;
            }
            sums[i] = s;
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.needs(a);
        let flags = degenerate.clone();
        let v = self.push(
            Tensor::new(&shape, data)?,
            Op::EscortRows { a, p, maxes, sums, degenerate },
            ng,
        );
        Ok((v, flags))
    }

    /// Row-wise selection: rows flagged in `take_b` come from `b`, the rest
    /// from `a`. Gradients are routed to the chosen source row.
    pub fn select_rows(&mut self, take_b: Vec<bool>, a: Var, b: Var) -> Result<Var> {
        let (shape, ng) = self.binary_same_shape(a, b, "select_rows")?;
        let rows = self.value(a).rows();
        if take_b.len() != rows {
            return Err(Error::Dimension(format!(
                "select_rows: {} flags for {rows} rows",
                take_b.len()
            )));
        }
        let w = self.value(a).row_len();
        let mut data = self.value(a).data().to_vec();
        for (i, take) in take_b.iter().enumerate() {
            if *take {
                data[i * w..(i + 1) * w].copy_from_slice(self.value(b).row(i));
            }
        }
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::SelectRows { take_b, a, b },
            ng,
        ))
    }

    /// Pairwise rotation of the last dimension: dims (2k, 2k+1) rotate by the
    /// angle whose cosine/sine sit at `[pos, k]` of the tables. Positions run
    /// along the second-to-last dimension.
    pub fn rope(&mut self, a: Var, cos: &[f64], sin: &[f64]) -> Result<Var> {
        let t = self.value(a);
        let shape = t.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Dimension("rope: rank-2 or rank-3 input required".into()));
        }
        let dh = *shape.last().unwrap();
        if dh % 2 != 0 {
            return Err(Error::Config(format!("rope: head dimension {dh} must be even")));
        }
        let l = shape[shape.len() - 2];
        let half = dh / 2;
        if cos.len() != l * half || sin.len() != l * half {
            return Err(Error::Dimension(format!(
                "rope: table length {} does not match {l} positions x {half} pairs",
                cos.len()
            )));
        }
        let batches = t.len() / (l * dh);
        let mut data = t.data().to_vec();
        for bi in 0..batches {
            for pos in 0..l {
                let base = bi * l * dh + pos * dh;
                for k in 0..half {
                    let (c, s) = (cos[pos * half + k], sin[pos * half + k]);
                    let x0 = data[base + 2 * k];
                    let x1 = data[base + 2 * k + 1];
                    data[base + 2 * k] = c * x0 - s * x1;
                    data[base + 2 * k + 1] = s * x0 + c * x1;
                }
            }
        }
        let ng = self.needs(a);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Rope { a, cos: cos.to_vec(), sin: sin.to_vec() },
            ng,
        ))
    }

    /// Row layer normalization with learned gain and shift.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let (rows, w) = (t.rows(), t.row_len());
        let shape = t.shape().to_vec();
        let gt = self.value(gamma);
        let bt = self.value(beta);
        if gt.rank() != 1 || gt.len() != w || bt.rank() != 1 || bt.len() != w {
            return Err(Error::Dimension(format!(
                "layer_norm: gain/shift must be rank-1 of length {w}"
            )));
        }
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; t.len()];
        let gd = gt.data().to_vec();
        let bd = bt.data().to_vec();
        for i in 0..rows {
            let row = &t.data()[i * w..(i + 1) * w];
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[i] = istd;
            for j in 0..w {
                let xh = (row[j] - mean) * istd;
                xhat[i * w + j] = xh;
                data[i * w + j] = xh * gd[j] + bd[j];
            }
        }
        let ng = self.needs(a) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::LayerNorm { a, gamma, beta, xhat, inv_std },
            ng,
        ))
    }

    /// Row gather: output row r is `table[tokens[r]]`.
    pub fn embedding(&mut self, table: Var, tokens: &[u32]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::Dimension("embedding: table must be rank 2".into()));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= v) {
            return Err(Error::Input(format!(
                "token {bad} out of range for vocabulary of {v}"
            )));
        }
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &tok in tokens {
            data.extend_from_slice(&tt.data()[tok as usize * d..(tok as usize + 1) * d]);
        }
        let ng = self.needs(table);
        Ok(self.push(
            Tensor::new(&[tokens.len(), d], data)?,
            Op::Embedding { table, tokens: tokens.to_vec() },
            ng,
        ))
    }

    /// Mean token-level cross-entropy between rank-2 logits and target ids,
    /// computed through a shifted log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 {
            return Err(Error::Dimension("cross_entropy: logits must be rank 2".into()));
        }
        let (n, v) = (t.shape()[0], t.shape()[1]);
        if targets.len() != n {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&x| x as usize >= v) {
            return Err(Error::Input(format!(
                "target {bad} out of range for vocabulary of {v}"
            )));
        }
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for i in 0..n {
            let row = &t.data()[i * v..(i + 1) * v];
            let mut mx = f64::NEG_INFINITY;
            for &x in row {
                if !x.is_finite() {
                    return Err(Error::Numeric {
                        context: "non-finite logit in cross-entropy".into(),
                        magnitude: x,
                    });
                }
                mx = mx.max(x);
            }
            let mut s = 0.0;
            for (j, &x) in row.iter().enumerate() {
                let e = (x - mx).exp();
                probs[i * v + j] = e;
                s += e;
            }
            for p in &mut probs[i * v..(i + 1) * v] {
                *p /= s;
            }
            let lse = mx + s.ln();
            total += lse - row[targets[i] as usize];
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            ng,
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(s), Op::SumAll { a }, ng))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum();
        let n = t.len() as f64;
        let ng = self.needs(a);
        Ok(self.push(Tensor::scalar(s / n), Op::MeanAll { a }, ng))
    }

    /// Rank-1 window into the flattened input.
    pub fn slice_flat(&mut self, a: Var, offset: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        if offset + len > t.len() {
            return Err(Error::Dimension(format!(
                "slice_flat: range {offset}..{} out of bounds for length {}",
                offset + len,
                t.len()
            )));
        }
        let data = t.data()[offset..offset + len].to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(&[len], data)?, Op::SliceFlat { a, offset }, ng))
    }

    /// Slice a column range out of the last dimension.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let w = t.row_len();
        if start + len > w {
            return Err(Error::Dimension(format!(
                "slice_last: columns {start}..{} out of bounds for width {w}",
                start + len
            )));
        }
        let rows = t.rows();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let mut data = Vec::with_capacity(rows * len);
        for i in 0..rows {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(&shape, data)?, Op::SliceLast { a, start }, ng))
    }

    /// Concatenate along the last dimension.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_last: no parts".into()));
        }
        let lead = self.value(parts[0]).shape()[..self.value(parts[0]).rank() - 1].to_vec();
        let rows = self.value(parts[0]).rows();
        let mut total_w = 0;
        for &p in parts {
            let t = self.value(p);
            if t.shape()[..t.rank() - 1] != lead[..] {
                return Err(Error::Dimension(
                    "concat_last: leading dimensions differ".into(),
                ));
            }
            total_w += t.row_len();
        }
        let mut data = Vec::with_capacity(rows * total_w);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let mut shape = lead;
        shape.push(total_w);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::ConcatLast { parts: parts.to_vec() },
            ng,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let n: usize = shape.iter().product();
        if n != t.len() {
            return Err(Error::Dimension(format!(
                "reshape: {shape:?} incompatible with length {}",
                t.len()
            )));
        }
        let data = t.data().to_vec();
        let ng = self.needs(a);
        Ok(self.push(Tensor::new(shape, data)?, Op::Reshape { a }, ng))
    }

    /// Reverse sweep seeding d(out)/d(out) = 1. `out` must be scalar.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::Dimension(format!(
                "backward target must be scalar, got shape {:?}",
                self.value(out).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accum<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        v: Var,
        len: usize,
    ) -> &'a mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, g.len());
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.needs(*b) {
                    let gb = Self::accum(grads, *b, g.len());
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Sub { a, b } => {
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, g.len());
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.needs(*b) {
                    let gb = Self::accum(grads, *b, g.len());
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let ga = Self::accum(grads, *a, g.len());
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(bv) {
                        *d += s * x;
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let gb = Self::accum(grads, *b, g.len());
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(av) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale { a, c } => {
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, g.len());
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s * c;
                    }
                }
            }
            Op::AddBias { a, bias } => {
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, g.len());
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.needs(*bias) {
                    let w = self.value(*bias).len();
                    let gb = Self::accum(grads, *bias, w);
                    for row in g.chunks(w) {
                        for (d, s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gemm { a, ta, b, tb } => {
                let av = self.value(*a).view2().expect("validated in forward");
                let bv = self.value(*b).view2().expect("validated in forward");
                let aeff = if *ta { av.t() } else { av };
                let beff = if *tb { bv.t() } else { bv };
                let (m, n) = (aeff.nrows(), beff.ncols());
                let gv = view2_of(g, m, n);
                if self.needs(*a) {
                    let (ar, ac) = (av.nrows(), av.ncols());
                    let ga = Self::accum(grads, *a, ar * ac);
                    let mut gav = view2_mut_of(ga, ar, ac);
                    if *ta {
                        // a' = a^T: da = (g b'^T)^T = b' g^T
                        general_mat_mul(1.0, &beff, &gv.t(), 1.0, &mut gav);
                    } else {
                        general_mat_mul(1.0, &gv, &beff.t(), 1.0, &mut gav);
                    }
                }
                if self.needs(*b) {
                    let (br, bc) = (bv.nrows(), bv.ncols());
                    let gb = Self::accum(grads, *b, br * bc);
                    let mut gbv = view2_mut_of(gb, br, bc);
                    if *tb {
                        general_mat_mul(1.0, &gv.t(), &aeff, 1.0, &mut gbv);
                    } else {
                        general_mat_mul(1.0, &aeff.t(), &gv, 1.0, &mut gbv);
                    }
                }
            }
            Op::BatchGemm { a, ta, b, tb } => {
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                let bsz = sa[0];
                let (ar, ac) = (sa[1], sa[2]);
                let (br, bc) = (sb[1], sb[2]);
                let m = if *ta { ac } else { ar };
                let n = if *tb { br } else { bc };
                let need_a = self.needs(*a);
                let need_b = self.needs(*b);
                if need_a {
                    Self::accum(grads, *a, bsz * ar * ac);
                }
                if need_b {
                    Self::accum(grads, *b, bsz * br * bc);
                }
                for i in 0..bsz {
                    let adat =
                        view2_of(&self.value(*a).data()[i * ar * ac..(i + 1) * ar * ac], ar, ac);
                    let bdat =
                        view2_of(&self.value(*b).data()[i * br * bc..(i + 1) * br * bc], br, bc);
                    let aeff = if *ta { adat.t() } else { adat };
                    let beff = if *tb { bdat.t() } else { bdat };
                    let gv = view2_of(&g[i * m * n..(i + 1) * m * n], m, n);
                    if need_a {
                        let ga = grads[a.0].as_mut().expect("allocated above");
                        let mut gav =
                            view2_mut_of(&mut ga[i * ar * ac..(i + 1) * ar * ac], ar, ac);
                        if *ta {
                            general_mat_mul(1.0, &beff, &gv.t(), 1.0, &mut gav);
                        } else {
                            general_mat_mul(1.0, &gv, &beff.t(), 1.0, &mut gav);
                        }
                    }
                    if need_b {
                        let gb = grads[b.0].as_mut().expect("allocated above");
                        let mut gbv =
                            view2_mut_of(&mut gb[i * br * bc..(i + 1) * br * bc], br, bc);
                        if *tb {
                            general_mat_mul(1.0, &gv.t(), &aeff, 1.0, &mut gbv);
                        } else {
                            general_mat_mul(1.0, &aeff.t(), &gv, 1.0, &mut gbv);
                        }
                    }
                }
            }
            Op::Activation { a, kind } => {
                if self.needs(*a) {
                    let x = self.value(*a).data();
                    let d = activations::derivative_slice(*kind, x)
                        .expect("forward succeeded on same input");
                    let ga = Self::accum(grads, *a, g.len());
                    for ((dst, s), dv) in ga.iter_mut().zip(g).zip(&d) {
                        *dst += s * dv;
                    }
                }
            }
            Op::L1NormRows { a, sums, degenerate } => {
                if self.needs(*a) {
                    let w = node.value.row_len();
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let ga = Self::accum(grads, *a, x.len());
                    for (r, deg) in degenerate.iter().enumerate() {
                        let o = r * w;
                        if *deg {
                            for j in 0..w {
                                ga[o + j] += g[o + j];
                            }
                        } else {
                            let s = sums[r];
                            let dot: f64 =
                                (0..w).map(|j| g[o + j] * y[o + j]).sum();
                            for j in 0..w {
                                ga[o + j] += (g[o + j] - sign(x[o + j]) * dot) / s;
                            }
                        }
                    }
                }
            }
            Op::L2NormRows { a, norms, degenerate } => {
                if self.needs(*a) {
                    let w = node.value.row_len();
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let ga = Self::accum(grads, *a, x.len());
                    for (r, deg) in degenerate.iter().enumerate() {
                        let o = r * w;
                        if *deg {
                            for j in 0..w {
                                ga[o + j] += g[o + j];
                            }
                        } else {
                            let nrm = norms[r];
                            let dot: f64 =
                                (0..w).map(|j| g[o + j] * y[o + j]).sum();
                            for j in 0..w {
                                ga[o + j] += (g[o + j] - dot * y[o + j]) / nrm;
                            }
                        }
                    }
                }
            }
            Op::CausalSoftmaxRows { a } => {
                if self.needs(*a) {
                    let shape = node.value.shape();
                    let l = *shape.last().unwrap();
                    let batches = node.value.len() / (l * l);
                    let y = node.value.data();
                    let ga = Self::accum(grads, *a, y.len());
                    for bi in 0..batches {
                        for i in 0..l {
                            let o = bi * l * l + i * l;
                            let dot: f64 =
                                (0..=i).map(|j| g[o + j] * y[o + j]).sum();
                            for j in 0..=i {
                                ga[o + j] += y[o + j] * (g[o + j] - dot);
                            }
                        }
                    }
                }
            }
            Op::EscortRows { a, p, maxes, sums, degenerate } => {
                if self.needs(*a) {
                    let w = node.value.row_len();
                    let x = self.value(*a).data();
                    let y = node.value.data();
                    let ga = Self::accum(grads, *a, x.len());
                    for (r, deg) in degenerate.iter().enumerate() {
                        let o = r * w;
                        if *deg {
                            for j in 0..w {
                                ga[o + j] += g[o + j];
                            }
                            continue;
                        }
                        let (m, s) = (maxes[r], sums[r]);
                        let dot: f64 = (0..w).map(|j| g[o + j] * y[o + j]).sum();
                        for j in 0..w {
                            let xj = x[o + j];
                            // dt/dx with t = (x/m)^p, recovered from y = t/s.
                            let dt = if xj > 0.0 {
                                p * (y[o + j] * s) / xj
                            } else if *p == 1.0 {
                                1.0 / m
                            } else {
                                0.0
                            };
                            ga[o + j] += dt * (g[o + j] - dot) / s;
                        }
                    }
                }
            }
            Op::SelectRows { take_b, a, b } => {
                let w = node.value.row_len();
                let need_a = self.needs(*a);
                let need_b = self.needs(*b);
                if need_a {
                    Self::accum(grads, *a, node.value.len());
                }
                if need_b {
                    Self::accum(grads, *b, node.value.len());
                }
                for (r, take) in take_b.iter().enumerate() {
                    let o = r * w;
                    let target = if *take { b } else { a };
                    let needed = if *take { need_b } else { need_a };
                    if needed {
                        let gt = grads[target.0].as_mut().expect("allocated above");
                        for j in 0..w {
                            gt[o + j] += g[o + j];
                        }
                    }
                }
            }
            Op::Rope { a, cos, sin } => {
                if self.needs(*a) {
                    let shape = node.value.shape();
                    let dh = *shape.last().unwrap();
                    let l = shape[shape.len() - 2];
                    let half = dh / 2;
                    let batches = node.value.len() / (l * dh);
                    let ga = Self::accum(grads, *a, node.value.len());
                    for bi in 0..batches {
                        for pos in 0..l {
                            let base = bi * l * dh + pos * dh;
                            for k in 0..half {
                                let (c, s) = (cos[pos * half + k], sin[pos * half + k]);
                                let g0 = g[base + 2 * k];
                                let g1 = g[base + 2 * k + 1];
                                // transpose of the rotation
                                ga[base + 2 * k] += c * g0 + s * g1;
                                ga[base + 2 * k + 1] += -s * g0 + c * g1;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { a, gamma, beta, xhat, inv_std } => {
                let w = node.value.row_len();
                let rows = node.value.rows();
                let gd = self.value(*gamma).data();
                if self.needs(*beta) {
                    let gb = Self::accum(grads, *beta, w);
                    for r in 0..rows {
                        for j in 0..w {
                            gb[j] += g[r * w + j];
                        }
                    }
                }
                if self.needs(*gamma) {
                    let gg = Self::accum(grads, *gamma, w);
                    for r in 0..rows {
                        for j in 0..w {
                            gg[j] += g[r * w + j] * xhat[r * w + j];
                        }
                    }
                }
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, node.value.len());
                    for r in 0..rows {
                        let o = r * w;
                        let istd = inv_std[r];
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..w {
                            let dxh = g[o + j] * gd[j];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[o + j];
                        }
                        mean_dxhat /= w as f64;
                        mean_dxhat_xhat /= w as f64;
                        for j in 0..w {
                            let dxh = g[o + j] * gd[j];
                            ga[o + j] +=
                                istd * (dxh - mean_dxhat - xhat[o + j] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Embedding { table, tokens } => {
                if self.needs(*table) {
                    let d = self.value(*table).shape()[1];
                    let gt = Self::accum(grads, *table, self.value(*table).len());
                    for (r, &tok) in tokens.iter().enumerate() {
                        let src = &g[r * d..(r + 1) * d];
                        let dst = &mut gt[tok as usize * d..(tok as usize + 1) * d];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                if self.needs(*logits) {
                    let v = self.value(*logits).shape()[1];
                    let n = targets.len();
                    let scale = g[0] / n as f64;
                    let gl = Self::accum(grads, *logits, n * v);
                    for i in 0..n {
                        let o = i * v;
                        for j in 0..v {
                            gl[o + j] += scale * probs[o + j];
                        }
                        gl[o + targets[i] as usize] -= scale;
                    }
                }
            }
            Op::SumAll { a } => {
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, self.value(*a).len());
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll { a } => {
                if self.needs(*a) {
                    let n = self.value(*a).len();
                    let s = g[0] / n as f64;
                    let ga = Self::accum(grads, *a, n);
                    for d in ga.iter_mut() {
                        *d += s;
                    }
                }
            }
            Op::SliceFlat { a, offset } => {
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, self.value(*a).len());
                    for (j, s) in g.iter().enumerate() {
                        ga[offset + j] += s;
                    }
                }
            }
            Op::SliceLast { a, start } => {
                if self.needs(*a) {
                    let src_w = self.value(*a).row_len();
                    let w = node.value.row_len();
                    let rows = node.value.rows();
                    let ga = Self::accum(grads, *a, self.value(*a).len());
                    for r in 0..rows {
                        for j in 0..w {
                            ga[r * src_w + start + j] += g[r * w + j];
                        }
                    }
                }
            }
            Op::ConcatLast { parts } => {
                let rows = node.value.rows();
                let w = node.value.row_len();
                let mut offsets = Vec::with_capacity(parts.len());
                let mut off = 0;
                for &p in parts {
                    offsets.push(off);
                    off += self.value(p).row_len();
                }
                for (pi, &p) in parts.iter().enumerate() {
                    if !self.needs(p) {
                        continue;
                    }
                    let pw = self.value(p).row_len();
                    let gp = Self::accum(grads, p, self.value(p).len());
                    for r in 0..rows {
                        for j in 0..pw {
                            gp[r * pw + j] += g[r * w + offsets[pi] + j];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if self.needs(*a) {
                    let ga = Self::accum(grads, *a, self.value(*a).len());
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
        }
    }
}
