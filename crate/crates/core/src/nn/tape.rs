//! Reverse-mode autodiff over a flat op tape.
//!
//! Ops are coarse (whole-matrix matmuls, row softmaxes, fused losses), so the
//! tape overhead is negligible next to the arithmetic. A forward pass records
//! nodes in creation order; `backward` walks them once in reverse. Scalars are
//! shape-`[1]` tensors whose internal reductions accumulate in f64 so that
//! finite-difference checks see a quiet loss.

use super::optim::ParameterStore;
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// A [n×k] · B [k×m]
    Matmul(Var, Var),
    /// A [n×k] · Bᵀ with B [m×k]
    MatmulNT(Var, Var),
    Transpose(Var),
    /// x [n×m] + bias [m] per row
    AddRowBroadcast(Var, Var),
    Add(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    /// x [n×m], gain [m], shift [m]
    LayerNormRows(Var, Var, Var),
    /// square [L×L]; row i softmaxes over columns 0..=i, rest zero
    CausalSoftmaxRows(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    SelectRows(Var, usize, usize),
    /// vector [d] tiled to [n×d]
    RepeatRow(Var, usize),
    /// column means: [n×d] → [d]
    MeanRows(Var),
    Clamp(Var, f32, f32),
    /// mu + exp(0.5·logvar) ⊙ noise; no gradient into the noise
    Reparameterize(Var, Var, Tensor),
    /// 0.5 Σ (mu² + e^lv − 1 − lv) against N(0, I)
    GaussianKl(Var, Var),
    /// KL(N(mu_q, e^lv_q) ‖ N(mu_p, e^lv_p)) with a detached prior
    GaussianKlDetachedPrior(Var, Var, Tensor, Tensor),
    /// Σ_rows −log softmax(row)[label]
    CrossEntropySum(Var, usize),
    /// Σ elementwise stable BCE of logits against fixed targets
    BceWithLogitsSum(Var, Tensor),
    /// Σ (pred − target)²
    MseSum(Var, Tensor),
    /// Σ wᵢ · scalarᵢ
    WeightedSum(Vec<(Var, f32)>),
}

enum Cache {
    None,
    /// layer norm: normalized rows + per-row 1/std
    LayerNorm { xhat: Tensor, inv_std: Vec<f32> },
    /// softmax probabilities (also the op output for causal softmax)
    Probs(Tensor),
    /// gelu inner tanh values, reused by the backward pass
    Tanh(Vec<f32>),
}

pub struct Tape {
    ops: Vec<Op>,
    values: Vec<Tensor>,
    caches: Vec<Cache>,
    grads: Vec<Option<Tensor>>,
    /// Whether each node needs a gradient (a parameter, or downstream of one,
    /// or an explicitly-tracked leaf). Untracked branches skip backward work.
    requires: Vec<bool>,
    param_nodes: Vec<(usize, String)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            ops: Vec::new(),
            values: Vec::new(),
            caches: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Tensor, cache: Cache) -> Var {
        let req = match &op {
            Op::Leaf => true,
            Op::Matmul(a, b) | Op::MatmulNT(a, b) | Op::AddRowBroadcast(a, b) | Op::Add(a, b) => {
                self.requires[a.0] || self.requires[b.0]
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::CausalSoftmaxRows(x)
            | Op::SliceCols(x, _, _)
            | Op::SelectRows(x, _, _)
            | Op::RepeatRow(x, _)
            | Op::MeanRows(x)
            | Op::Clamp(x, _, _)
            | Op::CrossEntropySum(x, _)
            | Op::BceWithLogitsSum(x, _)
            | Op::MseSum(x, _) => self.requires[x.0],
            Op::LayerNormRows(x, g, b) => {
                self.requires[x.0] || self.requires[g.0] || self.requires[b.0]
            }
            Op::ConcatCols(parts) => parts.iter().any(|p| self.requires[p.0]),
            Op::Reparameterize(mu, lv, _)
            | Op::GaussianKl(mu, lv)
            | Op::GaussianKlDetachedPrior(mu, lv, _, _) => {
                self.requires[mu.0] || self.requires[lv.0]
            }
            Op::WeightedSum(terms) => terms.iter().any(|(v, _)| self.requires[v.0]),
        };
        self.ops.push(op);
        self.values.push(value);
        self.caches.push(cache);
        self.requires.push(req);
        Var(self.ops.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f32 {
        debug_assert_eq!(self.values[v.0].len(), 1, "scalar() on non-scalar node");
        self.values[v.0].data[0]
    }

    /// Gradient of the last `backward` root w.r.t. `v` (zeros if unreached).
    pub fn grad(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(self.values[v.0].shape.clone()))
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, Cache::None)
    }

    /// Leaf that never needs a gradient (model inputs, fixed targets).
    pub fn input(&mut self, t: Tensor) -> Var {
        let v = self.push(Op::Leaf, t, Cache::None);
        self.requires[v.0] = false;
        v
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = tensor::transpose(&self.values[x.0]);
        self.push(Op::Transpose(x), t, Cache::None)
    }

    /// Leaf holding a copy of a named parameter; its gradient is routed back
    /// to the store by `accumulate_param_grads`.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Var {
        let t = store.value(name).clone();
        let v = self.push(Op::Leaf, t, Cache::None);
        self.param_nodes.push((v.0, name.to_string()));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let c = tensor::matmul(&self.values[a.0], &self.values[b.0]).expect("matmul shapes");
        self.push(Op::Matmul(a, b), c, Cache::None)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let c = tensor::matmul_nt(&self.values[a.0], &self.values[b.0]).expect("matmul_nt shapes");
        self.push(Op::MatmulNT(a, b), c, Cache::None)
    }

    pub fn add_row_broadcast(&mut self, x: Var, bias: Var) -> Var {
        let xs = &self.values[x.0];
        let bs = &self.values[bias.0];
        let m = xs.cols();
        assert_eq!(bs.len(), m, "bias width");
        let mut out = xs.clone();
        for i in 0..out.rows() {
            for (o, b) in out.row_mut(i).iter_mut().zip(&bs.data) {
                *o += b;
            }
        }
        self.push(Op::AddRowBroadcast(x, bias), out, Cache::None)
    }

    /// x·W + b in one call.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row_broadcast(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let av = &self.values[a.0];
        let bv = &self.values[b.0];
        assert_eq!(av.shape, bv.shape, "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let t = Tensor {
            shape: av.shape.clone(),
            data,
        };
        self.push(Op::Add(a, b), t, Cache::None)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let xv = &self.values[x.0];
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * c).collect(),
        };
        self.push(Op::Scale(x, c), t, Cache::None)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        const C: f32 = 0.797_884_6; // sqrt(2/pi)
        let xv = &self.values[x.0];
        let mut tanhs = Vec::with_capacity(xv.len());
        let data = xv
            .data
            .iter()
            .map(|&v| {
                let t = (C * (v + 0.044_715 * v * v * v)).tanh();
                tanhs.push(t);
                0.5 * v * (1.0 + t)
            })
            .collect();
        let t = Tensor {
            shape: xv.shape.clone(),
            data,
        };
        self.push(Op::Gelu(x), t, Cache::Tanh(tanhs))
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, shift: Var) -> Var {
        const EPS: f32 = 1e-5;
        let xv = &self.values[x.0];
        let g = &self.values[gain.0];
        let s = &self.values[shift.0];
        let (n, m) = (xv.rows(), xv.cols());
        assert_eq!(g.len(), m, "layer norm gain width");
        assert_eq!(s.len(), m, "layer norm shift width");
        let mut out = Tensor::zeros(vec![n, m]);
        let mut xhat = Tensor::zeros(vec![n, m]);
        let mut inv_std = vec![0.0f32; n];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f32>() / m as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / m as f32;
            let istd = 1.0 / (var + EPS).sqrt();
            inv_std[i] = istd;
            let xh = xhat.row_mut(i);
            let o = out.row_mut(i);
            for j in 0..m {
                xh[j] = (row[j] - mean) * istd;
                o[j] = g.data[j] * xh[j] + s.data[j];
            }
        }
        self.push(
            Op::LayerNormRows(x, gain, shift),
            out,
            Cache::LayerNorm { xhat, inv_std },
        )
    }

    pub fn causal_softmax_rows(&mut self, scores: Var) -> Var {
        let sv = &self.values[scores.0];
        let l = sv.rows();
        assert_eq!(sv.cols(), l, "causal softmax expects a square matrix");
        let mut out = Tensor::zeros(vec![l, l]);
        for i in 0..l {
            let row = &sv.row(i)[..=i];
            let probs = tensor::softmax(row);
            out.row_mut(i)[..=i].copy_from_slice(&probs);
        }
        let probs = out.clone();
        self.push(Op::CausalSoftmaxRows(scores), out, Cache::Probs(probs))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let xv = &self.values[x.0];
        let (n, m) = (xv.rows(), xv.cols());
        assert!(start + width <= m, "column slice out of range");
        let mut out = Tensor::zeros(vec![n, width]);
        for i in 0..n {
            out.row_mut(i)
                .copy_from_slice(&xv.row(i)[start..start + width]);
        }
        self.push(Op::SliceCols(x, start, width), out, Cache::None)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.values[parts[0].0].rows();
        let total: usize = parts.iter().map(|p| self.values[p.0].cols()).sum();
        let mut out = Tensor::zeros(vec![n, total]);
        for i in 0..n {
            let mut off = 0;
            for p in parts {
                let pv = &self.values[p.0];
                assert_eq!(pv.rows(), n, "concat row count");
                let w = pv.cols();
                out.row_mut(i)[off..off + w].copy_from_slice(pv.row(i));
                off += w;
            }
        }
        self.push(Op::ConcatCols(parts.to_vec()), out, Cache::None)
    }

    pub fn select_rows(&mut self, x: Var, start: usize, count: usize) -> Var {
        let xv = &self.values[x.0];
        let m = xv.cols();
        assert!(start + count <= xv.rows(), "row selection out of range");
        let mut out = Tensor::zeros(vec![count, m]);
        for i in 0..count {
            out.row_mut(i).copy_from_slice(xv.row(start + i));
        }
        self.push(Op::SelectRows(x, start, count), out, Cache::None)
    }

    pub fn repeat_row(&mut self, x: Var, n: usize) -> Var {
        let xv = &self.values[x.0];
        let d = xv.len();
        let mut out = Tensor::zeros(vec![n, d]);
        for i in 0..n {
            out.row_mut(i).copy_from_slice(&xv.data);
        }
        self.push(Op::RepeatRow(x, n), out, Cache::None)
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let xv = &self.values[x.0];
        let (n, m) = (xv.rows(), xv.cols());
        assert!(n > 0, "mean over zero rows");
        let mut acc = vec![0.0f64; m];
        for i in 0..n {
            for (a, &v) in acc.iter_mut().zip(xv.row(i)) {
                *a += v as f64;
            }
        }
        let data = acc.iter().map(|a| (*a / n as f64) as f32).collect();
        let t = Tensor {
            shape: vec![m],
            data,
        };
        self.push(Op::MeanRows(x), t, Cache::None)
    }

    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        let xv = &self.values[x.0];
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v.clamp(lo, hi)).collect(),
        };
        self.push(Op::Clamp(x, lo, hi), t, Cache::None)
    }

    pub fn reparameterize(&mut self, mu: Var, logvar: Var, noise: Tensor) -> Var {
        let m = &self.values[mu.0];
        let lv = &self.values[logvar.0];
        assert_eq!(m.shape, lv.shape, "reparameterize shapes");
        assert_eq!(m.len(), noise.len(), "noise length");
        let data = m
            .data
            .iter()
            .zip(&lv.data)
            .zip(&noise.data)
            .map(|((mu_i, lv_i), e)| mu_i + (0.5 * lv_i).exp() * e)
            .collect();
        let t = Tensor {
            shape: m.shape.clone(),
            data,
        };
        self.push(Op::Reparameterize(mu, logvar, noise), t, Cache::None)
    }

    pub fn gaussian_kl(&mut self, mu: Var, logvar: Var) -> Var {
        let m = &self.values[mu.0];
        let lv = &self.values[logvar.0];
        assert_eq!(m.shape, lv.shape, "kl shapes");
        let mut acc = 0.0f64;
        for (mu_i, lv_i) in m.data.iter().zip(&lv.data) {
            acc += 0.5 * ((mu_i * mu_i + lv_i.exp() - 1.0 - lv_i) as f64);
        }
        self.push(
            Op::GaussianKl(mu, logvar),
            Tensor::scalar(acc as f32),
            Cache::None,
        )
    }

    pub fn gaussian_kl_detached_prior(
        &mut self,
        mu_q: Var,
        logvar_q: Var,
        mu_p: Tensor,
        logvar_p: Tensor,
    ) -> Var {
        let mq = &self.values[mu_q.0];
        let lq = &self.values[logvar_q.0];
        assert_eq!(mq.shape, mu_p.shape, "prior mu shape");
        assert_eq!(lq.shape, logvar_p.shape, "prior logvar shape");
        let mut acc = 0.0f64;
        for i in 0..mq.len() {
            let (m_q, l_q) = (mq.data[i] as f64, lq.data[i] as f64);
            let (m_p, l_p) = (mu_p.data[i] as f64, logvar_p.data[i] as f64);
            let d = m_q - m_p;
            acc += 0.5 * (l_p - l_q + (l_q.exp() + d * d) / l_p.exp() - 1.0);
        }
        self.push(
            Op::GaussianKlDetachedPrior(mu_q, logvar_q, mu_p, logvar_p),
            Tensor::scalar(acc as f32),
            Cache::None,
        )
    }

    pub fn cross_entropy_sum(&mut self, logits: Var, label: usize) -> Result<Var> {
        let lv = &self.values[logits.0];
        let k = lv.cols();
        if label >= k {
            return Err(Error::IndexOutOfRange {
                context: "cross_entropy label",
                index: label,
                bound: k,
            });
        }
        let n = lv.rows();
        let mut probs = Tensor::zeros(vec![n, k]);
        let mut acc = 0.0f64;
        for i in 0..n {
            let p = tensor::softmax(lv.row(i));
            acc += -(p[label].max(f32::MIN_POSITIVE) as f64).ln();
            probs.row_mut(i).copy_from_slice(&p);
        }
        Ok(self.push(
            Op::CrossEntropySum(logits, label),
            Tensor::scalar(acc as f32),
            Cache::Probs(probs),
        ))
    }

    pub fn bce_with_logits_sum(&mut self, logits: Var, targets: Tensor) -> Var {
        let z = &self.values[logits.0];
        assert_eq!(z.len(), targets.len(), "bce target length");
        let mut acc = 0.0f64;
        for (&zi, &ti) in z.data.iter().zip(&targets.data) {
            // stable form: max(z,0) − z·t + ln(1 + e^{−|z|})
            acc += (zi.max(0.0) - zi * ti + (-zi.abs()).exp().ln_1p()) as f64;
        }
        self.push(
            Op::BceWithLogitsSum(logits, targets),
            Tensor::scalar(acc as f32),
            Cache::None,
        )
    }

    pub fn mse_sum(&mut self, pred: Var, targets: Tensor) -> Var {
        let p = &self.values[pred.0];
        assert_eq!(p.len(), targets.len(), "mse target length");
        let mut acc = 0.0f64;
        for (&pi, &ti) in p.data.iter().zip(&targets.data) {
            let d = (pi - ti) as f64;
            acc += d * d;
        }
        self.push(
            Op::MseSum(pred, targets),
            Tensor::scalar(acc as f32),
            Cache::None,
        )
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let mut acc = 0.0f64;
        for (v, w) in terms {
            debug_assert_eq!(self.values[v.0].len(), 1, "weighted_sum expects scalars");
            acc += (*w as f64) * (self.values[v.0].data[0] as f64);
        }
        self.push(
            Op::WeightedSum(terms.to_vec()),
            Tensor::scalar(acc as f32),
            Cache::None,
        )
    }

    fn grad_mut(&mut self, v: Var) -> &mut Tensor {
        let shape = self.values[v.0].shape.clone();
        self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
    }

    /// Reverse pass seeded with dL/droot = 1. `root` must be scalar.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.values[root.0].len(), 1, "backward root must be scalar");
        self.grads = (0..self.ops.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Tensor::scalar(1.0));

        for idx in (0..self.ops.len()).rev() {
            let Some(dout) = self.grads[idx].take() else {
                continue;
            };
            match &self.ops[idx] {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let bt = tensor::transpose(&self.values[b.0]);
                        let da = tensor::matmul(&dout, &bt).unwrap();
                        add_into(self.grad_mut(a), &da);
                    }
                    if self.needs(b) {
                        let db = tensor::matmul_tn(&self.values[a.0], &dout).unwrap();
                        add_into(self.grad_mut(b), &db);
                    }
                }
                Op::MatmulNT(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let da = tensor::matmul(&dout, &self.values[b.0]).unwrap();
                        add_into(self.grad_mut(a), &da);
                    }
                    if self.needs(b) {
                        let db = tensor::matmul_tn(&dout, &self.values[a.0]).unwrap();
                        add_into(self.grad_mut(b), &db);
                    }
                }
                Op::Transpose(x) => {
                    let x = *x;
                    if self.needs(x) {
                        let dx = tensor::transpose(&dout);
                        add_into(self.grad_mut(x), &dx);
                    }
                }
                Op::AddRowBroadcast(x, bias) => {
                    let (x, bias) = (*x, *bias);
                    if self.needs(x) {
                        add_into(self.grad_mut(x), &dout);
                    }
                    if self.needs(bias) {
                        let m = dout.cols();
                        let mut db = Tensor::zeros(vec![m]);
                        for i in 0..dout.rows() {
                            for (d, &g) in db.data.iter_mut().zip(dout.row(i)) {
                                *d += g;
                            }
                        }
                        add_into(self.grad_mut(bias), &db);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        add_into(self.grad_mut(a), &dout);
                    }
                    if self.needs(b) {
                        add_into(self.grad_mut(b), &dout);
                    }
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    if !self.needs(x) {
                        self.grads[idx] = Some(dout);
                        continue;
                    }
                    let dx = Tensor {
                        shape: dout.shape.clone(),
                        data: dout.data.iter().map(|v| v * c).collect(),
                    };
                    add_into(self.grad_mut(x), &dx);
                }
                Op::Gelu(x) => {
                    const C: f32 = 0.797_884_6;
                    let x = *x;
                    if !self.needs(x) {
                        self.grads[idx] = Some(dout);
                        continue;
                    }
                    let Cache::Tanh(tanhs) = &self.caches[idx] else {
                        unreachable!()
                    };
                    let dx = Tensor {
                        shape: dout.shape.clone(),
                        data: dout
                            .data
                            .iter()
                            .zip(&self.values[x.0].data)
                            .zip(tanhs)
                            .map(|((&g, &xi), &t)| {
                                let du = C * (1.0 + 3.0 * 0.044_715 * xi * xi);
                                g * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du)
                            })
                            .collect(),
                    };
                    add_into(self.grad_mut(x), &dx);
                }
                Op::LayerNormRows(x, gain, shift) => {
                    let (x, gain, shift) = (*x, *gain, *shift);
                    let Cache::LayerNorm { xhat, inv_std } = &self.caches[idx] else {
                        unreachable!()
                    };
                    let (n, m) = (dout.rows(), dout.cols());
                    let g = &self.values[gain.0];
                    let mut dx = Tensor::zeros(vec![n, m]);
                    let mut dg = Tensor::zeros(vec![m]);
                    let mut ds = Tensor::zeros(vec![m]);
                    for i in 0..n {
                        let dy = dout.row(i);
                        let xh = xhat.row(i);
                        let istd = inv_std[i];
                        let mut sum_dxhat = 0.0f32;
                        let mut sum_dxhat_xhat = 0.0f32;
                        for j in 0..m {
                            let dxhat = dy[j] * g.data[j];
                            sum_dxhat += dxhat;
                            sum_dxhat_xhat += dxhat * xh[j];
                            dg.data[j] += dy[j] * xh[j];
                            ds.data[j] += dy[j];
                        }
                        let dxr = dx.row_mut(i);
                        for j in 0..m {
                            let dxhat = dy[j] * g.data[j];
                            dxr[j] = istd
                                * (dxhat
                                    - sum_dxhat / m as f32
                                    - xh[j] * sum_dxhat_xhat / m as f32);
                        }
                    }
                    add_into(self.grad_mut(x), &dx);
                    add_into(self.grad_mut(gain), &dg);
                    add_into(self.grad_mut(shift), &ds);
                }
                Op::CausalSoftmaxRows(scores) => {
                    let scores = *scores;
                    let Cache::Probs(probs) = &self.caches[idx] else {
                        unreachable!()
                    };
                    let l = dout.rows();
                    let mut dscores = Tensor::zeros(vec![l, l]);
                    for i in 0..l {
                        let p = &probs.row(i)[..=i];
                        let dp = &dout.row(i)[..=i];
                        let inner: f32 = p.iter().zip(dp).map(|(pi, di)| pi * di).sum();
                        let dr = &mut dscores.row_mut(i)[..=i];
                        for j in 0..=i {
                            dr[j] = p[j] * (dp[j] - inner);
                        }
                    }
                    add_into(self.grad_mut(scores), &dscores);
                }
                Op::SliceCols(x, start, width) => {
                    let (x, start, width) = (*x, *start, *width);
                    let (n, m) = {
                        let xv = &self.values[x.0];
                        (xv.rows(), xv.cols())
                    };
                    let mut dx = Tensor::zeros(vec![n, m]);
                    for i in 0..n {
                        dx.row_mut(i)[start..start + width].copy_from_slice(dout.row(i));
                    }
                    add_into(self.grad_mut(x), &dx);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let n = dout.rows();
                    let mut off = 0;
                    for p in parts {
                        let w = self.values[p.0].cols();
                        let mut dp = Tensor::zeros(vec![n, w]);
                        for i in 0..n {
                            dp.row_mut(i).copy_from_slice(&dout.row(i)[off..off + w]);
                        }
                        add_into(self.grad_mut(p), &dp);
                        off += w;
                    }
                }
                Op::SelectRows(x, start, count) => {
                    let (x, start, count) = (*x, *start, *count);
                    let (n, m) = {
                        let xv = &self.values[x.0];
                        (xv.rows(), xv.cols())
                    };
                    let mut dx = Tensor::zeros(vec![n, m]);
                    for i in 0..count {
                        dx.row_mut(start + i).copy_from_slice(dout.row(i));
                    }
                    add_into(self.grad_mut(x), &dx);
                }
                Op::RepeatRow(x, n) => {
                    let (x, n) = (*x, *n);
                    let d = self.values[x.0].len();
                    let mut dx = Tensor::zeros(vec![d]);
                    for i in 0..n {
                        for (dv, &g) in dx.data.iter_mut().zip(dout.row(i)) {
                            *dv += g;
                        }
                    }
                    add_into(self.grad_mut(x), &dx);
                }
                Op::MeanRows(x) => {
                    let x = *x;
                    let (n, m) = {
                        let xv = &self.values[x.0];
                        (xv.rows(), xv.cols())
                    };
                    let scale = 1.0 / n as f32;
                    let mut dx = Tensor::zeros(vec![n, m]);
                    for i in 0..n {
                        for (dv, &g) in dx.row_mut(i).iter_mut().zip(&dout.data) {
                            *dv = g * scale;
                        }
                    }
                    add_into(self.grad_mut(x), &dx);
                }
                Op::Clamp(x, lo, hi) => {
                    let (x, lo, hi) = (*x, *lo, *hi);
                    let dx = Tensor {
                        shape: dout.shape.clone(),
                        data: dout
                            .data
                            .iter()
                            .zip(&self.values[x.0].data)
                            .map(|(&g, &xi)| if xi > lo && xi < hi { g } else { 0.0 })
                            .collect(),
                    };
                    add_into(self.grad_mut(x), &dx);
                }
                Op::Reparameterize(mu, logvar, noise) => {
                    let (mu, logvar) = (*mu, *logvar);
                    let lv = &self.values[logvar.0];
                    let dlv = Tensor {
                        shape: dout.shape.clone(),
                        data: dout
                            .data
                            .iter()
                            .zip(&lv.data)
                            .zip(&noise.data)
                            .map(|((&g, &l), &e)| g * 0.5 * (0.5 * l).exp() * e)
                            .collect(),
                    };
                    add_into(self.grad_mut(mu), &dout);
                    add_into(self.grad_mut(logvar), &dlv);
                }
                Op::GaussianKl(mu, logvar) => {
                    let (mu, logvar) = (*mu, *logvar);
                    let g = dout.data[0];
                    let dmu = Tensor {
                        shape: self.values[mu.0].shape.clone(),
                        data: self.values[mu.0].data.iter().map(|&m| g * m).collect(),
                    };
                    let dlv = Tensor {
                        shape: self.values[logvar.0].shape.clone(),
                        data: self.values[logvar.0]
                            .data
                            .iter()
                            .map(|&l| g * 0.5 * (l.exp() - 1.0))
                            .collect(),
                    };
                    add_into(self.grad_mut(mu), &dmu);
                    add_into(self.grad_mut(logvar), &dlv);
                }
                Op::GaussianKlDetachedPrior(mu_q, logvar_q, mu_p, logvar_p) => {
                    let (mu_q, logvar_q) = (*mu_q, *logvar_q);
                    let g = dout.data[0];
                    let mq = &self.values[mu_q.0];
                    let lq = &self.values[logvar_q.0];
                    let dmq = Tensor {
                        shape: mq.shape.clone(),
                        data: mq
                            .data
                            .iter()
                            .zip(&mu_p.data)
                            .zip(&logvar_p.data)
                            .map(|((&m, &mp), &lp)| g * (m - mp) / lp.exp())
                            .collect(),
                    };
                    let dlq = Tensor {
                        shape: lq.shape.clone(),
                        data: lq
                            .data
                            .iter()
                            .zip(&logvar_p.data)
                            .map(|(&l, &lp)| g * 0.5 * ((l - lp).exp() - 1.0))
                            .collect(),
                    };
                    add_into(self.grad_mut(mu_q), &dmq);
                    add_into(self.grad_mut(logvar_q), &dlq);
                }
                Op::CrossEntropySum(logits, label) => {
                    let (logits, label) = (*logits, *label);
                    let Cache::Probs(probs) = &self.caches[idx] else {
                        unreachable!()
                    };
                    let g = dout.data[0];
                    let mut dl = probs.clone();
                    for i in 0..dl.rows() {
                        let row = dl.row_mut(i);
                        row[label] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= g;
                        }
                    }
                    add_into(self.grad_mut(logits), &dl);
                }
                Op::BceWithLogitsSum(logits, targets) => {
                    let logits = *logits;
                    let g = dout.data[0];
                    let z = &self.values[logits.0];
                    let dz = Tensor {
                        shape: z.shape.clone(),
                        data: z
                            .data
                            .iter()
                            .zip(&targets.data)
                            .map(|(&zi, &ti)| g * (tensor::sigmoid(zi) - ti))
                            .collect(),
                    };
                    add_into(self.grad_mut(logits), &dz);
                }
                Op::MseSum(pred, targets) => {
                    let pred = *pred;
                    let g = dout.data[0];
                    let p = &self.values[pred.0];
                    let dp = Tensor {
                        shape: p.shape.clone(),
                        data: p
                            .data
                            .iter()
                            .zip(&targets.data)
                            .map(|(&pi, &ti)| g * 2.0 * (pi - ti))
                            .collect(),
                    };
                    add_into(self.grad_mut(pred), &dp);
                }
                Op::WeightedSum(terms) => {
                    let terms = terms.clone();
                    let g = dout.data[0];
                    for (v, w) in terms {
                        add_into(self.grad_mut(v), &Tensor::scalar(g * w));
                    }
                }
            }
            self.grads[idx] = Some(dout);
        }
    }

    /// Add `scale ×` the gradients of every `param` leaf into the store.
    pub fn accumulate_param_grads(&self, store: &mut ParameterStore, scale: f32) {
        for (idx, name) in &self.param_nodes {
            if let Some(g) = &self.grads[*idx] {
                store.add_to_grad(name, g, scale);
            }
        }
    }
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape, src.shape, "gradient accumulation shapes");
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s;
    }
}
