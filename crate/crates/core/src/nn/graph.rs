//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every node that depends on a parameter leaf.

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const BN_EPS: f64 = 1e-5;
const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Sqrt(Var),
    Square(Var),
    SumAll(Var),
    MeanAll(Var),
    MeanRows(Var),
    SumCols(Var),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Stack(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    Pick(Var, Vec<usize>),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    PairSqDist(Var, Var),
    RowOuter(Var, Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    GradReverse(Var, f64),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BnRecord {
    pub slot: usize,
    pub mean: Vec<f64>,
    /// Unbiased per-channel variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bn_records: Vec<BnRecord>,
}

/// Dimensions `(n, channels, length)` of a conv-style activation `(n, C, 1, L)` or `(n, C, L)`.
fn ncl(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 3, "expected (n, C, ..., L) activation, got {shape:?}");
    let n = shape[0];
    let c = shape[1];
    let l = shape[2..].iter().product();
    (n, c, l)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_tensor(t: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = t.shape();
    assert_eq!(axes.len(), in_shape.len());
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_strides = strides(in_shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = t.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let data = t.data();
    for _ in 0..total {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

fn softmax_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.data().to_vec();
    for row in out.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(_) => true,
            Op::Leaf => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn bn_records(&self) -> &[BnRecord] {
        &self.bn_records
    }

    /// A constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// A trainable leaf tied to parameter slot `id`.
    pub fn param(&mut self, id: usize, value: Tensor) -> Var {
        self.push(value, Op::Param(id), &[])
    }

    /// Same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scaled(s);
        self.push(value, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a), &[a])
    }

    /// `a[n×m] + b[m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let m = av.cols();
        assert_eq!(bv.len(), m, "add_row: {:?} + {:?}", av.shape(), bv.shape());
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &x) in row.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), out);
        self.push(value, Op::AddRow(a, b), &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul {sa:?} x {sb:?}");
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let value = Tensor::matrix(n, m, matmul(av.data(), bv.data(), n, k, m));
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// Batched matrix product `(B, n, k) · (B, k, m) → (B, n, m)`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1], "bmm {sa:?} x {sb:?}");
        let (bs, n, k, m) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = Vec::with_capacity(bs * n * m);
        for i in 0..bs {
            out.extend(matmul(
                &av.data()[i * n * k..(i + 1) * n * k],
                &bv.data()[i * k * m..(i + 1) * k * m],
                n,
                k,
                m,
            ));
        }
        let value = Tensor::new(vec![bs, n, m], out);
        self.push(value, Op::Bmm(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        assert_eq!(self.shape(a).len(), 2);
        let value = permute_tensor(self.value(a), &[1, 0]);
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Var {
        let value = permute_tensor(self.value(a), axes);
        self.push(value, Op::Permute(a, axes.to_vec()), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let value = self.value(a).clone().reshape(shape);
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Ln(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::sqrt);
        self.push(value, Op::Sqrt(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * x);
        self.push(value, Op::Square(a), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(value, Op::MeanAll(a), &[a])
    }

    /// Column means of an `n×m` matrix (mean over rows) → `m`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (n, m) = (t.rows(), t.cols());
        let mut out = vec![0.0; m];
        for row in t.data().chunks(m) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let value = Tensor::vector(out);
        self.push(value, Op::MeanRows(a), &[a])
    }

    /// Per-row sums of an `n×m` matrix → `n`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let m = t.cols();
        let out: Vec<f64> = t.data().chunks(m).map(|r| r.iter().sum()).collect();
        let value = Tensor::vector(out);
        self.push(value, Op::SumCols(a), &[a])
    }

    /// Selects entries along the first axis (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let value = self.value(a).gather_rows(rows);
        self.push(value, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let rows: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &rows)
    }

    /// Concatenates `n×m_i` matrices along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for &p in parts {
                let t = self.value(p);
                assert_eq!(t.rows(), n, "concat_cols row mismatch");
                out.extend_from_slice(t.row(r));
            }
        }
        let value = Tensor::matrix(n, total, out);
        self.push(value, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Concatenates tensors along the first axis; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let tail: Vec<usize> = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            assert_eq!(&t.shape()[1..], tail.as_slice(), "concat_rows shape mismatch");
            lead += t.shape()[0];
            out.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, out);
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Stacks one-element tensors into a vector.
    pub fn stack(&mut self, scalars: &[Var]) -> Var {
        let value = Tensor::vector(scalars.iter().map(|&s| self.value(s).item()).collect());
        self.push(value, Op::Stack(scalars.to_vec()), scalars)
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out);
        self.push(value, Op::LogSoftmax(a), &[a])
    }

    /// `out[i] = a[i, idx[i]]` for an `n×C` matrix.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows(), idx.len());
        let value = Tensor::vector(idx.iter().enumerate().map(|(r, &c)| t.row(r)[c]).collect());
        self.push(value, Op::Pick(a, idx.to_vec()), &[a])
    }

    /// Mean cross-entropy of `logits[n×C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lp = self.log_softmax(logits);
        let picked = self.pick(lp, labels);
        let m = self.mean_all(picked);
        self.scale(m, -1.0)
    }

    /// Valid 1-D convolution along the last axis.
    ///
    /// `x: (n, Ci, 1, L)`, `w: (Co, Ci, k)`, `b: (Co)` → `(n, Co, 1, L-k+1)`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (n, ci, l) = ncl(xv.shape());
        let ws = wv.shape();
        assert!(ws.len() == 3 && ws[1] == ci, "conv1d weight {ws:?} for input channels {ci}");
        let (co, k) = (ws[0], ws[2]);
        assert!(l >= k, "conv1d kernel {k} longer than input {l}");
        let lo = l - k + 1;
        let xd = xv.data();
        let wd = wv.data();
        let mut out = vec![0.0; n * co * lo];
        for s in 0..n {
            for o in 0..co {
                let orow = &mut out[(s * co + o) * lo..(s * co + o + 1) * lo];
                orow.fill(bv.data()[o]);
                for i in 0..ci {
                    let xrow = &xd[(s * ci + i) * l..(s * ci + i + 1) * l];
                    for j in 0..k {
                        let wj = wd[(o * ci + i) * k + j];
                        for (t, ov) in orow.iter_mut().enumerate() {
                            *ov += wj * xrow[t + j];
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, co, 1, lo], out);
        self.push(value, Op::Conv1d { x, w, b }, &[x, w, b])
    }

    /// Max pooling with window 2, stride 2 along the last axis.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, l) = ncl(xv.shape());
        let lo = l / 2;
        let mut out = Vec::with_capacity(n * c * lo);
        let mut argmax = Vec::with_capacity(n * c * lo);
        for r in 0..n * c {
            let row = &xv.data()[r * l..(r + 1) * l];
            for t in 0..lo {
                let (a, b) = (row[2 * t], row[2 * t + 1]);
                if b > a {
                    out.push(b);
                    argmax.push(r * l + 2 * t + 1);
                } else {
                    out.push(a);
                    argmax.push(r * l + 2 * t);
                }
            }
        }
        let value = Tensor::new(vec![n, c, 1, lo], out);
        self.push(value, Op::MaxPool { x, argmax }, &[x])
    }

    /// Batch normalization over `(n, C, 1, L)` with per-channel affine parameters.
    ///
    /// In training mode the batch statistics are used and recorded under `slot`;
    /// otherwise the supplied running statistics are.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        slot: usize,
        running: Option<(&[f64], &[f64])>,
    ) -> Var {
        let xv = self.value(x);
        let (n, c, l) = ncl(xv.shape());
        let m = (n * l) as f64;
        let xd = xv.data();
        let train = running.is_none();
        let (mean, var) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let row = &xd[(s * c + ch) * l..(s * c + ch + 1) * l];
                        mean[ch] += row.iter().sum::<f64>();
                    }
                }
                for v in mean.iter_mut() {
                    *v /= m;
                }
                for s in 0..n {
                    for ch in 0..c {
                        let row = &xd[(s * c + ch) * l..(s * c + ch + 1) * l];
                        var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
                    }
                }
                for v in var.iter_mut() {
                    *v /= m;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let bta = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for s in 0..n {
            for ch in 0..c {
                for t in 0..l {
                    let i = (s * c + ch) * l + t;
                    xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + bta[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        if train {
            let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_records.push(BnRecord {
                slot,
                mean,
                var: var.iter().map(|v| v * correction).collect(),
            });
        }
        let value = Tensor::new(shape, out);
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            &[x, gamma, beta],
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(xv.rows());
        for (r, row) in xv.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let i = r * d + j;
                xhat[i] = (row[j] - mean) * is;
                out[i] = g[j] * xhat[i] + b[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        )
    }

    /// Squared Euclidean distances between the rows of `a[n×d]` and `b[m×d]`.
    pub fn pair_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let d = av.cols();
        assert_eq!(d, bv.cols());
        let (n, m) = (av.rows(), bv.rows());
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ar = av.row(i);
            for j in 0..m {
                let br = bv.row(j);
                out.push(ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum());
            }
        }
        let value = Tensor::matrix(n, m, out);
        self.push(value, Op::PairSqDist(a, b), &[a, b])
    }

    /// Per-row outer product: `out[r, i*q + j] = a[r, i] * b[r, j]`.
    pub fn row_outer(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, p, q) = (av.rows(), av.cols(), bv.cols());
        assert_eq!(n, bv.rows());
        let mut out = Vec::with_capacity(n * p * q);
        for r in 0..n {
            for &x in av.row(r) {
                out.extend(bv.row(r).iter().map(|y| x * y));
            }
        }
        let value = Tensor::matrix(n, p * q, out);
        self.push(value, Op::RowOuter(a, b), &[a, b])
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut norms = Vec::with_capacity(xv.rows());
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let nrm = (row.iter().map(|v| v * v).sum::<f64>() + NORM_EPS).sqrt();
            norms.push(nrm);
            for v in row.iter_mut() {
                *v /= nrm;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out);
        self.push(value, Op::L2Normalize { x, norms }, &[x])
    }

    /// Identity in the forward pass; multiplies the incoming gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::GradReverse(x, lambda), &[x])
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(
            self.value(loss).shape().to_vec(),
            vec![1.0],
        ));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &t),
                slot @ None => *slot = Some(t),
            }
        };
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.needs(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scaled(*s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if self.needs(*b) {
                    let m = g.cols();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (o, &x) in gb.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                    acc(*b, Tensor::new(self.shape(*b).to_vec(), gb));
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, k, m) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    acc(*a, Tensor::matrix(n, k, matmul_nt(g.data(), bv.data(), n, m, k)));
                }
                if self.needs(*b) {
                    acc(*b, Tensor::matrix(k, m, matmul_tn(av.data(), g.data(), n, k, m)));
                }
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, n, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let m = bv.shape()[2];
                if self.needs(*a) {
                    let mut ga = Vec::with_capacity(bs * n * k);
                    for s in 0..bs {
                        ga.extend(matmul_nt(
                            &g.data()[s * n * m..(s + 1) * n * m],
                            &bv.data()[s * k * m..(s + 1) * k * m],
                            n,
                            m,
                            k,
                        ));
                    }
                    acc(*a, Tensor::new(vec![bs, n, k], ga));
                }
                if self.needs(*b) {
                    let mut gb = Vec::with_capacity(bs * k * m);
                    for s in 0..bs {
                        gb.extend(matmul_tn(
                            &av.data()[s * n * k..(s + 1) * n * k],
                            &g.data()[s * n * m..(s + 1) * n * m],
                            n,
                            k,
                            m,
                        ));
                    }
                    acc(*b, Tensor::new(vec![bs, k, m], gb));
                }
            }
            Op::Transpose(a) => acc(*a, permute_tensor(g, &[1, 0])),
            Op::Permute(a, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inverse[ax] = i;
                }
                acc(*a, permute_tensor(g, &inverse));
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.shape(*a))),
            Op::Relu(a) => acc(
                *a,
                g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }),
            ),
            Op::Exp(a) => acc(*a, g.zip_map(out, |gv, y| gv * y)),
            Op::Ln(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| gv / x)),
            Op::Sqrt(a) => acc(*a, g.zip_map(out, |gv, y| gv * 0.5 / y)),
            Op::Square(a) => acc(*a, g.zip_map(self.value(*a), |gv, x| 2.0 * gv * x)),
            Op::SumAll(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::MeanAll(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::MeanRows(a) => {
                let av = self.value(*a);
                let (n, m) = (av.rows(), av.cols());
                let mut ga = Vec::with_capacity(n * m);
                for _ in 0..n {
                    ga.extend(g.data().iter().map(|v| v / n as f64));
                }
                acc(*a, Tensor::new(av.shape().to_vec(), ga));
            }
            Op::SumCols(a) => {
                let av = self.value(*a);
                let m = av.cols();
                let mut ga = Vec::with_capacity(av.len());
                for &gv in g.data() {
                    ga.extend(std::iter::repeat_n(gv, m));
                }
                acc(*a, Tensor::new(av.shape().to_vec(), ga));
            }
            Op::GatherRows(a, rows) => {
                let av = self.value(*a);
                let lead = av.shape().first().copied().unwrap_or(1).max(1);
                let per = av.len() / lead;
                let mut ga = vec![0.0; av.len()];
                for (k, &r) in rows.iter().enumerate() {
                    for j in 0..per {
                        ga[r * per + j] += g.data()[k * per + j];
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), ga));
            }
            Op::ConcatCols(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(n * w);
                        for r in 0..n {
                            gp.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, Tensor::new(self.shape(p).to_vec(), gp));
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    acc(
                        p,
                        Tensor::new(self.shape(p).to_vec(), g.data()[offset..offset + len].to_vec()),
                    );
                    offset += len;
                }
            }
            Op::Stack(parts) => {
                for (k, &p) in parts.iter().enumerate() {
                    acc(p, Tensor::new(self.shape(p).to_vec(), vec![g.data()[k]]));
                }
            }
            Op::Softmax(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(out.len());
                for (yr, gr) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                    ga.extend(yr.iter().zip(gr).map(|(y, gv)| y * (gv - dot)));
                }
                acc(*a, Tensor::new(out.shape().to_vec(), ga));
            }
            Op::LogSoftmax(a) => {
                let c = out.cols();
                let mut ga = Vec::with_capacity(out.len());
                for (lr, gr) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let s: f64 = gr.iter().sum();
                    ga.extend(lr.iter().zip(gr).map(|(l, gv)| gv - l.exp() * s));
                }
                acc(*a, Tensor::new(out.shape().to_vec(), ga));
            }
            Op::Pick(a, idx) => {
                let av = self.value(*a);
                let c = av.cols();
                let mut ga = vec![0.0; av.len()];
                for (r, &k) in idx.iter().enumerate() {
                    ga[r * c + k] += g.data()[r];
                }
                acc(*a, Tensor::new(av.shape().to_vec(), ga));
            }
            Op::Conv1d { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, ci, l) = ncl(xv.shape());
                let (co, k) = (wv.shape()[0], wv.shape()[2]);
                let lo = l - k + 1;
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                if self.needs(*b) {
                    let mut gb = vec![0.0; co];
                    for s in 0..n {
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            *gbo += gd[(s * co + o) * lo..(s * co + o + 1) * lo].iter().sum::<f64>();
                        }
                    }
                    acc(*b, Tensor::vector(gb));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; wd.len()];
                    for s in 0..n {
                        for o in 0..co {
                            let grow = &gd[(s * co + o) * lo..(s * co + o + 1) * lo];
                            for i in 0..ci {
                                let xrow = &xd[(s * ci + i) * l..(s * ci + i + 1) * l];
                                for j in 0..k {
                                    gw[(o * ci + i) * k + j] +=
                                        grow.iter().zip(&xrow[j..j + lo]).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                    acc(*w, Tensor::new(wv.shape().to_vec(), gw));
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; xd.len()];
                    for s in 0..n {
                        for o in 0..co {
                            let grow = &gd[(s * co + o) * lo..(s * co + o + 1) * lo];
                            for i in 0..ci {
                                let gxrow = &mut gx[(s * ci + i) * l..(s * ci + i + 1) * l];
                                for j in 0..k {
                                    let wj = wd[(o * ci + i) * k + j];
                                    for (t, &gv) in grow.iter().enumerate() {
                                        gxrow[t + j] += wj * gv;
                                    }
                                }
                            }
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx));
                }
            }
            Op::MaxPool { x, argmax } => {
                let xv = self.value(*x);
                let mut gx = vec![0.0; xv.len()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    gx[src] += gv;
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xv = self.value(*x);
                let (n, c, l) = ncl(xv.shape());
                let gd = g.data();
                let gam = self.value(*gamma).data();
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        for t in 0..l {
                            let i = (s * c + ch) * l + t;
                            sum_g[ch] += gd[i];
                            sum_gx[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.needs(*gamma) {
                    acc(*gamma, Tensor::new(self.shape(*gamma).to_vec(), sum_gx.clone()));
                }
                if self.needs(*beta) {
                    acc(*beta, Tensor::new(self.shape(*beta).to_vec(), sum_g.clone()));
                }
                if self.needs(*x) {
                    let m = (n * l) as f64;
                    let mut gx = vec![0.0; xv.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            for t in 0..l {
                                let i = (s * c + ch) * l + t;
                                gx[i] = if *train {
                                    gam[ch] * inv_std[ch] / m
                                        * (m * gd[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                                } else {
                                    gam[ch] * inv_std[ch] * gd[i]
                                };
                            }
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let gam = self.value(*gamma).data();
                let gd = g.data();
                if self.needs(*gamma) || self.needs(*beta) {
                    let mut gg = vec![0.0; d];
                    let mut gb = vec![0.0; d];
                    for (r, grow) in gd.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += grow[j] * xhat[r * d + j];
                            gb[j] += grow[j];
                        }
                    }
                    acc(*gamma, Tensor::new(self.shape(*gamma).to_vec(), gg));
                    acc(*beta, Tensor::new(self.shape(*beta).to_vec(), gb));
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; xv.len()];
                    for (r, grow) in gd.chunks(d).enumerate() {
                        let gh: Vec<f64> = (0..d).map(|j| grow[j] * gam[j]).collect();
                        let s1: f64 = gh.iter().sum();
                        let s2: f64 = (0..d).map(|j| gh[j] * xhat[r * d + j]).sum();
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] / d as f64
                                * (d as f64 * gh[j] - s1 - xhat[r * d + j] * s2);
                        }
                    }
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx));
                }
            }
            Op::PairSqDist(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, m, d) = (av.rows(), bv.rows(), av.cols());
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for i in 0..n {
                    let ar = av.row(i);
                    for j in 0..m {
                        let gv = g.data()[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        let br = bv.row(j);
                        for k in 0..d {
                            let diff = 2.0 * gv * (ar[k] - br[k]);
                            ga[i * d + k] += diff;
                            gb[j * d + k] -= diff;
                        }
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), ga));
                acc(*b, Tensor::new(bv.shape().to_vec(), gb));
            }
            Op::RowOuter(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, p, q) = (av.rows(), av.cols(), bv.cols());
                let mut ga = vec![0.0; n * p];
                let mut gb = vec![0.0; n * q];
                for r in 0..n {
                    for i in 0..p {
                        let grow = &g.data()[r * p * q + i * q..r * p * q + (i + 1) * q];
                        let ai = av.row(r)[i];
                        let brow = bv.row(r);
                        ga[r * p + i] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        for j in 0..q {
                            gb[r * q + j] += grow[j] * ai;
                        }
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), ga));
                acc(*b, Tensor::new(bv.shape().to_vec(), gb));
            }
            Op::L2Normalize { x, norms } => {
                let d = out.cols();
                let mut gx = Vec::with_capacity(out.len());
                for (r, (yr, gr)) in out.data().chunks(d).zip(g.data().chunks(d)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                    gx.extend(yr.iter().zip(gr).map(|(y, gv)| (gv - y * dot) / norms[r]));
                }
                acc(*x, Tensor::new(out.shape().to_vec(), gx));
            }
            Op::GradReverse(x, lambda) => acc(*x, g.scaled(-lambda)),
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient per parameter slot, summed over every leaf bound to the slot.
    /// Slots that did not influence the loss get zeros of `shapes[slot]`.
    pub fn param_grads(&self, graph: &Graph, shapes: &[Vec<usize>]) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = shapes.iter().map(|s| Tensor::zeros(s)).collect();
        for (i, node) in graph.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &self.grads[i] {
                    out[id].axpy(1.0, g);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` around `x` for every coordinate.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(x.shape());
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += h;
            let mut xm = x.clone();
            xm.data_mut()[i] -= h;
            g.data_mut()[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        // small LCG keeps the test free of extra dependencies
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape.to_vec(), data)
    }

    fn check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let eval = |vals: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = vals.iter().enumerate().map(|(i, t)| g.param(i, t.clone())).collect();
            let out = build(&mut g, &vars);
            g.scalar(out)
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().enumerate().map(|(i, t)| g.param(i, t.clone())).collect();
        let out = build(&mut g, &vars);
        let grads = g.backward(out);
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let analytic = grads.param_grads(&g, &shapes);
        for (k, x) in inputs.iter().enumerate() {
            let num = numeric_grad(x, |xk| {
                let mut vals = inputs.to_vec();
                vals[k] = xk.clone();
                eval(&vals)
            });
            for (a, n) in analytic[k].data().iter().zip(num.data()) {
                assert!(
                    (a - n).abs() <= 1e-6 * (1.0 + a.abs().max(n.abs())),
                    "input {k}: analytic {a} vs numeric {n}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_reductions() {
        let a = rand_tensor(&[3, 4], 1);
        let b = rand_tensor(&[3, 4], 2);
        let r = rand_tensor(&[4], 3);
        check(&[a, b, r], |g, v| {
            let m = g.mul(v[0], v[1]);
            let s = g.sub(m, v[1]);
            let e = g.exp(s);
            let ar = g.add_row(e, v[2]);
            let sq = g.square(ar);
            let mr = g.mean_rows(sq);
            let sc = g.sum_cols(ar);
            let x = g.sum_all(mr);
            let y = g.mean_all(sc);
            let z = g.add(x, y);
            g.scale(z, 0.7)
        });
    }

    #[test]
    fn matmul_transpose_and_permute() {
        let a = rand_tensor(&[3, 4], 4);
        let b = rand_tensor(&[4, 2], 5);
        let c = rand_tensor(&[2, 3, 4], 6);
        check(&[a, b, c], |g, v| {
            let ab = g.matmul(v[0], v[1]);
            let t = g.transpose(ab);
            let p = g.permute(v[2], &[1, 0, 2]);
            let p = g.reshape(p, &[3, 8]);
            let q = g.square(p);
            let s1 = g.sum_all(q);
            let t2 = g.square(t);
            let s2 = g.sum_all(t2);
            g.add(s1, s2)
        });
    }

    #[test]
    fn bmm_softmax_and_layer_norm() {
        let a = rand_tensor(&[2, 3, 4], 7);
        let b = rand_tensor(&[2, 4, 3], 8);
        let gamma = rand_tensor(&[3], 9);
        let beta = rand_tensor(&[3], 10);
        check(&[a, b, gamma, beta], |g, v| {
            let m = g.bmm(v[0], v[1]);
            let s = g.softmax(m);
            let r = g.reshape(s, &[6, 3]);
            let ln = g.layer_norm(r, v[2], v[3]);
            let w = g.constant(rand_tensor(&[6, 3], 11));
            let prod = g.mul(ln, w);
            g.sum_all(prod)
        });
    }

    #[test]
    fn conv_pool_and_batch_norm() {
        let x = rand_tensor(&[3, 2, 1, 9], 12);
        let w = rand_tensor(&[4, 2, 3], 13);
        let b = rand_tensor(&[4], 14);
        let gamma = rand_tensor(&[4], 15).map(|v| v + 1.5);
        let beta = rand_tensor(&[4], 16);
        check(&[x, w, b, gamma, beta], |g, v| {
            let c = g.conv1d(v[0], v[1], v[2]);
            let n = g.batch_norm(c, v[3], v[4], 0, None);
            let r = g.relu(n);
            let p = g.max_pool2(r);
            let wts = g.constant(rand_tensor(&[3, 4, 1, 3], 17));
            let prod = g.mul(p, wts);
            g.sum_all(prod)
        });
    }

    #[test]
    fn losses_and_distances() {
        let a = rand_tensor(&[4, 3], 18);
        let b = rand_tensor(&[2, 3], 19);
        check(&[a, b], |g, v| {
            let ce = g.cross_entropy(v[0], &[0, 2, 1, 2]);
            let d = g.pair_sq_dist(v[0], v[1]);
            let dm = g.mean_all(d);
            let o = g.row_outer(v[0], v[0]);
            let os = g.sum_all(o);
            let nrm = g.l2_normalize_rows(v[1]);
            let nw = g.constant(rand_tensor(&[2, 3], 20));
            let np = g.mul(nrm, nw);
            let ns = g.sum_all(np);
            let gathered = g.gather_rows(v[0], &[3, 3, 0]);
            let gs = g.sum_all(gathered);
            let cat = g.concat_cols(&[v[0], v[0]]);
            let cr = g.concat_rows(&[v[0], v[1]]);
            let cs = g.square(cr);
            let cs = g.sum_all(cs);
            let cc = g.mean_all(cat);
            let st = g.stack(&[ce, dm, os, ns, gs, cc, cs]);
            let sq = g.square(st);
            g.sum_all(sq)
        });
    }

    #[test]
    fn grad_reverse_negates_and_scales() {
        let mut g = Graph::new();
        let x = g.param(0, Tensor::vector(vec![1.0, 2.0]));
        let r = g.grad_reverse(x, 0.5);
        let s = g.sum_all(r);
        let grads = g.backward(s);
        assert_eq!(g.value(r).data(), &[1.0, 2.0]);
        let pg = grads.param_grads(&g, &[vec![2]]);
        assert_eq!(pg[0].data(), &[-0.5, -0.5]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0]));
        let p = g.param(0, Tensor::vector(vec![3.0]));
        let m = g.mul(c, p);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0]);
    }
}
