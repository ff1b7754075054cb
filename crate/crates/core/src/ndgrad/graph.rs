//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes are stored in creation order, which is
//! a topological order, so [`Graph::backward`] is a single reverse sweep.

use rand::Rng;

use super::conv::{col2im, im2col, ConvGeom, Padding};
use super::{Array, Float};
use crate::error::{FeverError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean/variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnRunning<T> {
    pub mean: Array<T>,
    pub var: Array<T>,
}

impl<T: Float> BnRunning<T> {
    pub fn new(channels: usize) -> Self {
        BnRunning {
            mean: Array::zeros(&[channels]),
            var: Array::ones(&[channels]),
        }
    }
}

/// Per-channel statistics of one train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BnBatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased batch variance, used for the running estimate.
    pub var: Vec<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const L2_EPS: f64 = 1e-12;

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    AddRow {
        x: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    SumLastAxis(Var),
    PairwiseSqDist(Var),
    PairwiseDiff(Var),
    Gram(Var),
    Sqrt(Var),
    DivScalar {
        x: Var,
        s: Var,
    },
    Huber {
        a: Var,
        b: Var,
        delta: T,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
}

struct Node<T> {
    value: Array<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Array<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` did not reach the loss.
    pub fn get(&self, v: Var) -> Array<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array::zeros(&self.shapes[v.0]),
        }
    }

    pub fn take(&mut self, v: Var) -> Array<T> {
        match self.grads[v.0].take() {
            Some(g) => g,
            None => Array::zeros(&self.shapes[v.0]),
        }
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    mode: Mode,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> FeverError {
    FeverError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Float> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array<T>) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Array<T>) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Array<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Array<T>, op: Op<T>, deps: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(FeverError::numeric(name));
        }
        let needs_grad = deps.iter().any(|d| self.nodes[d.0].needs_grad);
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn expect_rank(&self, op: &'static str, x: Var, rank: usize) -> Result<()> {
        if self.value(x).ndim() != rank {
            return Err(shape_err(op, self.shape(x), &vec![0; rank]));
        }
        Ok(())
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.expect_rank("matmul", a, 2)?;
        self.expect_rank("matmul", b, 2)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            strides(sa, ta),
            self.value(b).data(),
            strides(sb, tb),
            T::zero(),
            &mut out,
            (n as isize, 1),
        );
        let value = Array::new(&[m, n], out)?;
        self.push("matmul", value, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// Adds a `[n]` bias to every row of a `[m, n]` array.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.expect_rank("add_row", x, 2)?;
        let n = self.shape(x)[1];
        if self.shape(bias) != [n] {
            return Err(shape_err("add_row", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.push("add_row", value, Op::AddRow { x, bias }, &[x, bias])
    }

    /// `x @ w^T + b` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul_t(x, w, false, true)?;
        self.add_row(y, b)
    }

    // ------------------------------------------------------------ conv / pool

    /// NCHW convolution with `w: [out, in, kh, kw]` and optional `[out]` bias.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)
            .ok_or_else(|| shape_err("conv2d", self.shape(x), self.shape(w)))?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.o] {
                return Err(shape_err("conv2d", self.shape(w), self.shape(b)));
            }
        }
        let cols = im2col(self.value(x).data(), &geom);
        let ncols = geom.cols();
        let mut mat = vec![T::zero(); geom.o * ncols];
        T::gemm(
            geom.o,
            geom.patch(),
            ncols,
            T::one(),
            self.value(w).data(),
            (geom.patch() as isize, 1),
            &cols,
            (ncols as isize, 1),
            T::zero(),
            &mut mat,
            (ncols as isize, 1),
        );
        let osp = geom.out_spatial();
        let mut out = vec![T::zero(); geom.n * geom.o * osp];
        let bvals = bias.map(|b| self.value(b).data().to_vec());
        for oc in 0..geom.o {
            let bb = bvals.as_ref().map_or(T::zero(), |b| b[oc]);
            for ni in 0..geom.n {
                let src = &mat[oc * ncols + ni * osp..oc * ncols + (ni + 1) * osp];
                let dst = &mut out[(ni * geom.o + oc) * osp..(ni * geom.o + oc + 1) * osp];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bb;
                }
            }
        }
        let value = Array::new(&[geom.n, geom.o, geom.oh, geom.ow], out)?;
        let cols = if self.is_train() { cols } else { Vec::new() };
        let mut deps = vec![x, w];
        deps.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            },
            &deps,
        )
    }

    /// `[n, c, h, w] -> [n, c]` mean over the spatial dimensions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("global_avg_pool", x, 4)?;
        let s = self.shape(x).to_vec();
        let hw = s[2] * s[3];
        let scale = T::one() / T::from_usize(hw);
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let value = Array::new(&[s[0], s[1]], data)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(x), &[x])
    }

    /// Per-channel batch normalisation of `[n, c, h, w]`.
    ///
    /// Train mode normalises with batch statistics and returns them so the
    /// caller can fold them into `running`; eval mode uses `running` only.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &BnRunning<T>,
    ) -> Result<(Var, Option<BnBatchStats<T>>)> {
        self.expect_rank("batchnorm2d", x, 4)?;
        let s = self.shape(x).to_vec();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(shape_err("batchnorm2d", &s, self.shape(p)));
            }
        }
        if running.mean.shape() != [c] || running.var.shape() != [c] {
            return Err(shape_err("batchnorm2d", &s, running.mean.shape()));
        }
        let eps = T::of(BN_EPS);
        let xv = self.value(x).data();
        let m = n * hw;
        let train = self.is_train();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        if train {
            if m < 2 {
                return Err(FeverError::InvalidArgument(
                    "batchnorm2d in train mode needs more than one value per channel".into(),
                ));
            }
            for ci in 0..c {
                let mut acc = T::zero();
                for ni in 0..n {
                    let off = (ni * c + ci) * hw;
                    acc += xv[off..off + hw].iter().copied().sum::<T>();
                }
                mean[ci] = acc / T::from_usize(m);
                let mut sq = T::zero();
                for ni in 0..n {
                    let off = (ni * c + ci) * hw;
                    for &v in &xv[off..off + hw] {
                        let d = v - mean[ci];
                        sq += d * d;
                    }
                }
                var[ci] = sq / T::from_usize(m);
            }
        } else {
            mean.copy_from_slice(running.mean.data());
            var.copy_from_slice(running.var.data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * hw;
                for i in off..off + hw {
                    let h = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    out[i] = g[ci] * h + b[ci];
                }
            }
        }
        let stats = train.then(|| {
            let corr = T::from_usize(m) / T::from_usize(m - 1);
            BnBatchStats {
                mean: mean.clone(),
                var: var.iter().map(|&v| v * corr).collect(),
            }
        });
        let value = Array::new(&s, out)?;
        let xhat = if train { xhat } else { Vec::new() };
        let v = self.push(
            "batchnorm2d",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: train,
            },
            &[x, gamma, beta],
        )?;
        Ok((v, stats))
    }

    // ----------------------------------------------------------- elementwise

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push("relu", value, Op::Relu(x), &[x])
    }

    /// Inverted dropout: train mode zeroes each element with probability
    /// `rate` and scales survivors by `1 / (1 - rate)`; eval mode is the identity.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(FeverError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !self.is_train() || rate == 0.0 {
            let value = self.value(x).clone();
            let mask = vec![T::one(); value.len()];
            return self.push("dropout", value, Op::Dropout { x, mask }, &[x]);
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let value = Array::new(self.shape(x), data)?;
        self.push("dropout", value, Op::Dropout { x, mask }, &[x])
    }

    /// Normalises each slice along the last axis to unit L2 norm. Slices with
    /// norm at most `1e-12` map to zero.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let eps = T::of(L2_EPS);
        let mut norms = Vec::with_capacity(self.value(x).len() / d.max(1));
        let mut out = self.value(x).clone();
        if d > 0 {
            for row in out.data_mut().chunks_mut(d) {
                let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
                if nrm > eps {
                    for v in row.iter_mut() {
                        *v /= nrm;
                    }
                } else {
                    row.iter_mut().for_each(|v| *v = T::zero());
                }
                norms.push(nrm);
            }
        }
        self.push("l2_normalize", out, Op::L2Normalize { x, norms }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            softmax_in_place(row);
        }
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d.max(1)) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Array<T>> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Array::new(self.shape(a), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.zip_with(a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.zip_with(a, b, |x, y| x - y)?;
        self.push("sub", value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.zip_with(a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.value(x).map(|v| v * c);
        self.push("scale", value, Op::Scale(x, c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, Op::AddScalar(x), &[x])
    }

    /// Elementwise square root; zero inputs map to zero with zero gradient.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < T::zero()) {
            return Err(FeverError::numeric("sqrt of negative value"));
        }
        let value = self.value(x).map(|v| v.sqrt());
        self.push("sqrt", value, Op::Sqrt(x), &[x])
    }

    /// Divides every element by the scalar `s`; a zero divisor yields zeros.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(shape_err("div_scalar", self.shape(x), self.shape(s)));
        }
        let d = self.value(s).item();
        let value = if d == T::zero() {
            Array::zeros(self.shape(x))
        } else {
            self.value(x).map(|v| v / d)
        };
        self.push("div_scalar", value, Op::DivScalar { x, s }, &[x, s])
    }

    /// Elementwise Huber penalty of `a - b`.
    pub fn huber(&mut self, a: Var, b: Var, delta: f64) -> Result<Var> {
        self.same_shape("huber", a, b)?;
        let dl = T::of(delta);
        let half = T::of(0.5);
        let value = self.zip_with(a, b, |x, y| {
            let r = (x - y).abs();
            if r < dl {
                half * r * r
            } else {
                dl * (r - half * dl)
            }
        })?;
        self.push("huber", value, Op::Huber { a, b, delta: dl }, &[a, b])
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Array::scalar(self.value(x).sum());
        self.push("sum", value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(FeverError::InvalidArgument("mean of empty array".into()));
        }
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last_axis(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| shape_err("sum_last_axis", &s, &[]))?;
        let data: Vec<T> = if d == 0 {
            vec![T::zero(); 0]
        } else {
            self.value(x)
                .data()
                .chunks(d)
                .map(|r| r.iter().copied().sum())
                .collect()
        };
        let value = Array::new(&s[..s.len() - 1], data)?;
        self.push("sum_last_axis", value, Op::SumLastAxis(x), &[x])
    }

    // ------------------------------------------------------------ relational

    /// `[n, d] -> [n, n]` squared Euclidean distances between rows.
    pub fn pairwise_sq_dist(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("pairwise_sq_dist", x, 2)?;
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                let dist: T = xv[i * d..(i + 1) * d]
                    .iter()
                    .zip(&xv[j * d..(j + 1) * d])
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        let value = Array::new(&[n, n], out)?;
        self.push("pairwise_sq_dist", value, Op::PairwiseSqDist(x), &[x])
    }

    /// `[n, d] -> [n, n, d]` with `out[a, b] = x[b] - x[a]`.
    pub fn pairwise_diff(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("pairwise_diff", x, 2)?;
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * n * d];
        for a in 0..n {
            for b in 0..n {
                let dst = &mut out[(a * n + b) * d..(a * n + b + 1) * d];
                for k in 0..d {
                    dst[k] = xv[b * d + k] - xv[a * d + k];
                }
            }
        }
        let value = Array::new(&[n, n, d], out)?;
        self.push("pairwise_diff", value, Op::PairwiseDiff(x), &[x])
    }

    /// `[b, n, d] -> [b, n, n]` batched Gram matrices `x x^T`.
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("gram", x, 3)?;
        let s = self.shape(x).to_vec();
        let (bsz, n, d) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); bsz * n * n];
        for bi in 0..bsz {
            let xs = &xv[bi * n * d..(bi + 1) * n * d];
            T::gemm(
                n,
                d,
                n,
                T::one(),
                xs,
                (d as isize, 1),
                xs,
                (1, d as isize),
                T::zero(),
                &mut out[bi * n * n..(bi + 1) * n * n],
                (n as isize, 1),
            );
        }
        let value = Array::new(&[bsz, n, n], out)?;
        self.push("gram", value, Op::Gram(x), &[x])
    }

    // ------------------------------------------------------------- structure

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let rows = self.value(x).rows();
        if self.value(x).ndim() == 0 || idx.iter().any(|&i| i >= rows) {
            return Err(shape_err("gather_rows", self.shape(x), &[idx.len()]));
        }
        let value = self.value(x).select_rows(idx);
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(x, &idx)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x), &[x])
    }

    // -------------------------------------------------------------- backward

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.mode != Mode::Train {
            return Err(FeverError::Graph("backward called on an eval-mode graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(FeverError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Array<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accum(&self, grads: &mut [Option<Array<T>>], v: Var, delta: Array<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += *b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn accum_vec(&self, grads: &mut [Option<Array<T>>], v: Var, delta: Vec<T>) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        let arr = Array::new(self.shape(v), delta)?;
        self.accum(grads, v, arr);
        Ok(())
    }

    fn backprop(&self, idx: usize, g: &Array<T>, grads: &mut [Option<Array<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                let n = if *tb { sb[0] } else { sb[1] };
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.nodes[a.0].needs_grad {
                    // d op(a) = g op(b)^T, stored back in a's layout.
                    let mut da = vec![T::zero(); av.len()];
                    let cols = sa[1];
                    let da_strides = if *ta {
                        (1, cols as isize)
                    } else {
                        (cols as isize, 1)
                    };
                    let bt = transpose_strides(strides(sb, *tb));
                    T::gemm(m, n, k, T::one(), gd, (n as isize, 1), bv, bt, T::zero(), &mut da, da_strides);
                    self.accum_vec(grads, *a, da)?;
                }
                if self.nodes[b.0].needs_grad {
                    // d op(b) = op(a)^T g
                    let mut db = vec![T::zero(); bv.len()];
                    let cols = sb[1];
                    let db_strides = if *tb {
                        (1, cols as isize)
                    } else {
                        (cols as isize, 1)
                    };
                    let at = transpose_strides(strides(sa, *ta));
                    T::gemm(k, m, n, T::one(), av, at, gd, (n as isize, 1), T::zero(), &mut db, db_strides);
                    self.accum_vec(grads, *b, db)?;
                }
            }
            Op::AddRow { x, bias } => {
                self.accum(grads, *x, g.clone());
                let n = self.shape(*bias)[0];
                let mut db = vec![T::zero(); n];
                for row in gd.chunks(n) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                self.accum_vec(grads, *bias, db)?;
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                cols,
            } => {
                let osp = geom.out_spatial();
                let ncols = geom.cols();
                let mut dmat = vec![T::zero(); geom.o * ncols];
                for ni in 0..geom.n {
                    for oc in 0..geom.o {
                        let src = &gd[(ni * geom.o + oc) * osp..(ni * geom.o + oc + 1) * osp];
                        dmat[oc * ncols + ni * osp..oc * ncols + (ni + 1) * osp].copy_from_slice(src);
                    }
                }
                if let Some(b) = bias {
                    let db: Vec<T> = dmat
                        .chunks(ncols)
                        .map(|r| r.iter().copied().sum())
                        .collect();
                    self.accum_vec(grads, *b, db)?;
                }
                if self.nodes[w.0].needs_grad {
                    let mut dw = vec![T::zero(); geom.o * geom.patch()];
                    T::gemm(
                        geom.o,
                        ncols,
                        geom.patch(),
                        T::one(),
                        &dmat,
                        (ncols as isize, 1),
                        cols,
                        (1, ncols as isize),
                        T::zero(),
                        &mut dw,
                        (geom.patch() as isize, 1),
                    );
                    self.accum_vec(grads, *w, dw)?;
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![T::zero(); geom.patch() * ncols];
                    T::gemm(
                        geom.patch(),
                        geom.o,
                        ncols,
                        T::one(),
                        self.value(*w).data(),
                        (1, geom.patch() as isize),
                        &dmat,
                        (ncols as isize, 1),
                        T::zero(),
                        &mut dcols,
                        (ncols as isize, 1),
                    );
                    self.accum_vec(grads, *x, col2im(&dcols, geom))?;
                }
            }
            Op::Relu(x) => {
                let dx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accum_vec(grads, *x, dx)?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                if !batch_stats {
                    return Err(FeverError::Graph("batchnorm backward without batch statistics".into()));
                }
                let s = self.shape(*x);
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let m = T::from_usize(n * hw);
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * hw;
                        for i in off..off + hw {
                            dgamma[ci] += gd[i] * xhat[i];
                            dbeta[ci] += gd[i];
                        }
                    }
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![T::zero(); gd.len()];
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * hw;
                            let k = gam[ci] * inv_std[ci] / m;
                            for i in off..off + hw {
                                dx[i] = k * (m * gd[i] - dbeta[ci] - xhat[i] * dgamma[ci]);
                            }
                        }
                    }
                    self.accum_vec(grads, *x, dx)?;
                }
                self.accum_vec(grads, *gamma, dgamma)?;
                self.accum_vec(grads, *beta, dbeta)?;
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let scale = T::one() / T::from_usize(hw);
                let mut dx = Vec::with_capacity(hw * gd.len());
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv * scale, hw));
                }
                self.accum_vec(grads, *x, dx)?;
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accum_vec(grads, *x, dx)?;
            }
            Op::L2Normalize { x, norms } => {
                let d = out.last_dim();
                let mut dx = vec![T::zero(); gd.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    if nrm <= T::of(L2_EPS) {
                        continue;
                    }
                    let y = &out.data()[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..d {
                        dx[r * d + k] = (gr[k] - y[k] * dot) / nrm;
                    }
                }
                self.accum_vec(grads, *x, dx)?;
            }
            Op::Softmax(x) => {
                let d = out.last_dim();
                let mut dx = vec![T::zero(); gd.len()];
                for ((y, gr), dr) in out.data().chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for k in 0..d {
                        dr[k] = y[k] * (gr[k] - dot);
                    }
                }
                self.accum_vec(grads, *x, dx)?;
            }
            Op::LogSoftmax(x) => {
                let d = out.last_dim();
                let mut dx = vec![T::zero(); gd.len()];
                for ((y, gr), dr) in out.data().chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let gs: T = gr.iter().copied().sum();
                    for k in 0..d {
                        dr[k] = gr[k] - y[k].exp() * gs;
                    }
                }
                self.accum_vec(grads, *x, dx)?;
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g.clone());
                self.accum(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                let db = gd.iter().zip(av).map(|(&x, &y)| x * y).collect();
                self.accum_vec(grads, *a, da)?;
                self.accum_vec(grads, *b, db)?;
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accum(grads, *x, g.map(|v| v * c));
            }
            Op::AddScalar(x) => self.accum(grads, *x, g.clone()),
            Op::Sum(x) => {
                let gv = g.item();
                self.accum(grads, *x, Array::full(self.shape(*x), gv));
            }
            Op::SumLastAxis(x) => {
                let d = self.value(*x).last_dim();
                let mut dx = Vec::with_capacity(gd.len() * d);
                for &gv in gd {
                    dx.extend(std::iter::repeat_n(gv, d));
                }
                self.accum_vec(grads, *x, dx)?;
            }
            Op::PairwiseSqDist(x) => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); n * d];
                let two = T::of(2.0);
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let coef = two * (gd[i * n + j] + gd[j * n + i]);
                        if coef == T::zero() {
                            continue;
                        }
                        for k in 0..d {
                            dx[i * d + k] += coef * (xv[i * d + k] - xv[j * d + k]);
                        }
                    }
                }
                self.accum_vec(grads, *x, dx)?;
            }
            Op::PairwiseDiff(x) => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut dx = vec![T::zero(); n * d];
                for a in 0..n {
                    for b in 0..n {
                        let gr = &gd[(a * n + b) * d..(a * n + b + 1) * d];
                        for k in 0..d {
                            dx[b * d + k] += gr[k];
                            dx[a * d + k] -= gr[k];
                        }
                    }
                }
                self.accum_vec(grads, *x, dx)?;
            }
            Op::Gram(x) => {
                let s = self.shape(*x);
                let (bsz, n, d) = (s[0], s[1], s[2]);
                let xv = self.value(*x).data();
                let mut dx = vec![T::zero(); xv.len()];
                for bi in 0..bsz {
                    let gb = &gd[bi * n * n..(bi + 1) * n * n];
                    let mut sym = vec![T::zero(); n * n];
                    for i in 0..n {
                        for j in 0..n {
                            sym[i * n + j] = gb[i * n + j] + gb[j * n + i];
                        }
                    }
                    T::gemm(
                        n,
                        n,
                        d,
                        T::one(),
                        &sym,
                        (n as isize, 1),
                        &xv[bi * n * d..(bi + 1) * n * d],
                        (d as isize, 1),
                        T::zero(),
                        &mut dx[bi * n * d..(bi + 1) * n * d],
                        (d as isize, 1),
                    );
                }
                self.accum_vec(grads, *x, dx)?;
            }
            Op::Sqrt(x) => {
                let half = T::of(0.5);
                let dx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| if y > T::zero() { gv * half / y } else { T::zero() })
                    .collect();
                self.accum_vec(grads, *x, dx)?;
            }
            Op::DivScalar { x, s } => {
                let d = self.value(*s).item();
                if d != T::zero() {
                    self.accum(grads, *x, g.map(|v| v / d));
                    let xv = self.value(*x).data();
                    let ds = -gd.iter().zip(xv).map(|(&a, &b)| a * b).sum::<T>() / (d * d);
                    self.accum_vec(grads, *s, vec![ds])?;
                }
            }
            Op::Huber { a, b, delta } => {
                let dl = *delta;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da: Vec<T> = gd
                    .iter()
                    .zip(av.iter().zip(bv))
                    .map(|(&gv, (&x, &y))| {
                        let r = x - y;
                        let dr = if r.abs() < dl { r } else { dl * r.signum() };
                        gv * dr
                    })
                    .collect();
                let db = da.iter().map(|&v| -v).collect();
                self.accum_vec(grads, *a, da)?;
                self.accum_vec(grads, *b, db)?;
            }
            Op::GatherRows { x, idx } => {
                let w = if idx.is_empty() { 0 } else { gd.len() / idx.len() };
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for k in 0..w {
                        dx[i * w + k] += gd[r * w + k];
                    }
                }
                self.accum_vec(grads, *x, dx)?;
            }
            Op::Reshape(x) => {
                self.accum_vec(grads, *x, gd.to_vec())?;
            }
        }
        Ok(())
    }
}

fn strides(shape: &[usize], transposed: bool) -> (isize, isize) {
    let cols = shape[1] as isize;
    if transposed {
        (1, cols)
    } else {
        (cols, 1)
    }
}

fn transpose_strides((r, c): (isize, isize)) -> (isize, isize) {
    (c, r)
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
