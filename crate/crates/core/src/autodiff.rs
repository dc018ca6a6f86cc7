//! Reverse-mode differentiation on a flat tape of 64-bit nodes.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards is a
//! reverse topological traversal. Besides the usual data operations the tape
//! carries moment-pair operations: a node of shape `[2, n]` holds the means in
//! its first row and the variances in its second, which lets gradients flow
//! through analytically propagated statistics.

use crate::error::{Error, Result};
use crate::moments::{dropout_with_jacobian, MomentJacobian, MomentScalar, Pointwise};
use crate::tensor::{kernels, ConvGeometry};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeometry },
    Reshape { x: Var },
    Pointwise { x: Var, f: Pointwise },
    LogSoftmax { x: Var },
    Nll { logp: Var, labels: Vec<usize> },
    MulConst { x: Var, factors: Vec<f64> },
    Sum { x: Var },
    DotConst { x: Var, weights: Vec<f64> },
    ChannelNormalize { x: Var, mu: Var, sigma: Var, s: Var, b: Var, inner: usize },
    ChannelMean { x: Var, inner: usize },
    ChannelVar { x: Var, inner: usize },
    SqrtEps { x: Var },
    RowSqNorm { w: Var },
    GlobalAvgPool { x: Var, inner: usize },
    SpatialSum { w: Var, group: usize },
    MomentLinear { pair: Var, w: Var, b: Var },
    MomentPointwise { pair: Var, jac: Vec<MomentJacobian> },
    MomentDropout { pair: Var, jac: Vec<MomentJacobian> },
    MomentFromAffine { s: Var, b: Var },
    MomentAffine { pair: Var, mu: Var, sigma: Var, s: Var, b: Var },
    MomentRepeat { pair: Var, times: usize },
    PairMean { pair: Var },
    PairVar { pair: Var },
}

#[derive(Debug, Clone)]
struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
}

/// A recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that influenced it.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// `None` when the node does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// The gradient, with zeros for nodes the loss does not depend on.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.lens.get(v.0).copied().unwrap_or(0)],
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { value, shape, op });
        Var(self.nodes.len() - 1)
    }

    fn check(&self, v: Var, op: &'static str) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::invalid(op, format!("node {} is not on this tape", v.0)))
        }
    }

    /// Parameter, input or constant.
    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if numel(&shape) != value.len() {
            return Err(Error::shape("leaf", format!("shape {shape:?} holds {} values", value.len())));
        }
        Ok(self.push(shape, value, Op::Leaf))
    }

    /// Same value, but gradients stop here.
    pub fn detach(&mut self, x: Var) -> Var {
        let node = &self.nodes[x.0];
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push(shape, value, Op::Leaf)
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` → `[N, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v, "linear")?;
        }
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let (&[n, k], &[m, k2], &[m2]) = (xs, ws, bs) else {
            return Err(Error::shape("linear", format!("input {xs:?}, weights {ws:?}, bias {bs:?}")));
        };
        if k != k2 || m != m2 {
            return Err(Error::shape("linear", format!("input {xs:?}, weights {ws:?}, bias {bs:?}")));
        }
        let bias = self.value(b);
        let mut y: Vec<f64> = (0..n).flat_map(|_| bias.iter().copied()).collect();
        kernels::gemm_nt(self.value(x), self.value(w), &mut y, n, k, m);
        Ok(self.push(vec![n, m], y, Op::Linear { x, w, b }))
    }

    /// `x: [N, C, H, W]`, `w: [O, C, kh, kw]`, `b: [O]` → `[N, O, H', W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        for v in [x, w, b] {
            self.check(v, "conv2d")?;
        }
        let &[n, c, h, wd] = self.shape(x) else {
            return Err(Error::shape("conv2d", format!("input must be 4-d, got {:?}", self.shape(x))));
        };
        let geom = ConvGeometry::new(c, h, wd, self.shape(w), stride, pad)?;
        if self.shape(b) != [geom.c_out] {
            return Err(Error::shape("conv2d", format!("bias {:?} for {} filters", self.shape(b), geom.c_out)));
        }
        let mut y = vec![0.0; n * geom.out_len()];
        kernels::conv2d_forward(&geom, n, self.value(x), self.value(w), self.value(b), &mut y);
        Ok(self.push(vec![n, geom.c_out, geom.out_h, geom.out_w], y, Op::Conv { x, w, b, geom }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(x, "reshape")?;
        if numel(&shape) != self.value(x).len() {
            return Err(Error::shape("reshape", format!("{:?} to {shape:?}", self.shape(x))));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape, value, Op::Reshape { x }))
    }

    pub fn pointwise(&mut self, x: Var, f: Pointwise) -> Result<Var> {
        self.check(x, "pointwise")?;
        let value = self.value(x).iter().map(|&v| f.eval(v)).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::Pointwise { x, f }))
    }

    /// Row-wise log-softmax of `[N, K]`.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check(x, "log_softmax")?;
        let &[_, k] = self.shape(x) else {
            return Err(Error::shape("log_softmax", format!("expected [N, K], got {:?}", self.shape(x))));
        };
        let mut y = self.value(x).to_vec();
        for row in y.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, y, Op::LogSoftmax { x }))
    }

    /// Mean negative log-likelihood of the labelled classes.
    pub fn nll(&mut self, logp: Var, labels: &[usize]) -> Result<Var> {
        self.check(logp, "nll")?;
        let &[n, k] = self.shape(logp) else {
            return Err(Error::shape("nll", format!("expected [N, K], got {:?}", self.shape(logp))));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape("nll", format!("{} labels for {n} rows of {k} classes", labels.len())));
        }
        let lp = self.value(logp);
        let loss = -labels.iter().enumerate().map(|(i, &l)| lp[i * k + l]).sum::<f64>() / n as f64;
        Ok(self.push(vec![1], vec![loss], Op::Nll { logp, labels: labels.to_vec() }))
    }

    /// Elementwise product with a constant of the same size (dropout masks).
    pub fn mul_const(&mut self, x: Var, factors: Vec<f64>) -> Result<Var> {
        self.check(x, "mul_const")?;
        if factors.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", format!("{} factors for {:?}", factors.len(), self.shape(x))));
        }
        let value = self.value(x).iter().zip(&factors).map(|(a, b)| a * b).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::MulConst { x, factors }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x, "sum")?;
        let s = self.value(x).iter().sum();
        Ok(self.push(vec![1], vec![s], Op::Sum { x }))
    }

    /// `Σ_i weights_i · x_i`.
    pub fn dot_const(&mut self, x: Var, weights: Vec<f64>) -> Result<Var> {
        self.check(x, "dot_const")?;
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("dot_const", format!("{} weights for {:?}", weights.len(), self.shape(x))));
        }
        let s = self.value(x).iter().zip(&weights).map(|(a, b)| a * b).sum();
        Ok(self.push(vec![1], vec![s], Op::DotConst { x, weights }))
    }

    fn channel_layout(&self, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
        let shape = self.shape(x);
        if shape.len() < 2 {
            return Err(Error::shape(op, format!("expected [N, C, ...], got {shape:?}")));
        }
        Ok((shape[0], shape[1], numel(&shape[2..])))
    }

    /// `(x − μ_c)/σ_c · s_c + b_c` per channel of `x: [N, C, ...]`.
    pub fn channel_normalize(&mut self, x: Var, mu: Var, sigma: Var, s: Var, b: Var) -> Result<Var> {
        for v in [x, mu, sigma, s, b] {
            self.check(v, "channel_normalize")?;
        }
        let (n, c, inner) = self.channel_layout(x, "channel_normalize")?;
        for v in [mu, sigma, s, b] {
            if self.shape(v) != [c] {
                return Err(Error::shape("channel_normalize", format!("statistics {:?} for {c} channels", self.shape(v))));
            }
        }
        let (xv, m, sg, sc, sh) = (self.value(x), self.value(mu), self.value(sigma), self.value(s), self.value(b));
        let mut y = Vec::with_capacity(xv.len());
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                let k = sc[ch] / sg[ch];
                y.extend(xv[base..base + inner].iter().map(|v| (v - m[ch]) * k + sh[ch]));
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, y, Op::ChannelNormalize { x, mu, sigma, s, b, inner }))
    }

    fn channel_sums(values: &[f64], n: usize, c: usize, inner: usize) -> Vec<f64> {
        let mut sums = vec![0.0; c];
        for i in 0..n {
            for (ch, s) in sums.iter_mut().enumerate() {
                let base = (i * c + ch) * inner;
                *s += values[base..base + inner].iter().sum::<f64>();
            }
        }
        sums
    }

    /// Per-channel mean over the batch and spatial positions.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        self.check(x, "channel_mean")?;
        let (n, c, inner) = self.channel_layout(x, "channel_mean")?;
        let count = (n * inner) as f64;
        let mean = Self::channel_sums(self.value(x), n, c, inner).into_iter().map(|s| s / count).collect();
        Ok(self.push(vec![c], mean, Op::ChannelMean { x, inner }))
    }

    /// Per-channel biased variance over the batch and spatial positions.
    pub fn channel_var(&mut self, x: Var) -> Result<Var> {
        self.check(x, "channel_var")?;
        let (n, c, inner) = self.channel_layout(x, "channel_var")?;
        let count = (n * inner) as f64;
        let xv = self.value(x);
        let mean: Vec<f64> = Self::channel_sums(xv, n, c, inner).into_iter().map(|s| s / count).collect();
        let mut var = vec![0.0; c];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * inner;
                var[ch] += xv[base..base + inner].iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        Ok(self.push(vec![c], var, Op::ChannelVar { x, inner }))
    }

    /// `sqrt(x + eps)` elementwise.
    pub fn sqrt_eps(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.check(x, "sqrt_eps")?;
        let value = self.value(x).iter().map(|v| (v + eps).sqrt()).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, value, Op::SqrtEps { x }))
    }

    /// Squared Euclidean norm of each row of `w: [rows, ...]`.
    pub fn row_sq_norm(&mut self, w: Var) -> Result<Var> {
        self.check(w, "row_sq_norm")?;
        let shape = self.shape(w);
        if shape.is_empty() || shape[0] == 0 {
            return Err(Error::shape("row_sq_norm", format!("no rows in {shape:?}")));
        }
        let rows = shape[0];
        let len = numel(&shape[1..]);
        let value = self.value(w).chunks(len).map(|r| r.iter().map(|v| v * v).sum()).collect();
        Ok(self.push(vec![rows], value, Op::RowSqNorm { w }))
    }

    /// Spatial average of `[N, C, ...]` → `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.check(x, "global_avg_pool")?;
        let (n, c, inner) = self.channel_layout(x, "global_avg_pool")?;
        let value = self.value(x).chunks(inner).map(|r| r.iter().sum::<f64>() / inner as f64).collect();
        Ok(self.push(vec![n, c], value, Op::GlobalAvgPool { x, inner }))
    }

    /// Filter collapse `[O, I, kh, kw]` → `[O, I]`.
    pub fn spatial_sum(&mut self, w: Var) -> Result<Var> {
        self.check(w, "spatial_sum")?;
        let &[o, i, kh, kw] = self.shape(w) else {
            return Err(Error::shape("spatial_sum", format!("filters must be 4-d, got {:?}", self.shape(w))));
        };
        let value = kernels::spatial_sum(self.value(w), o * i, kh * kw);
        Ok(self.push(vec![o, i], value, Op::SpatialSum { w, group: kh * kw }))
    }

    fn pair_len(&self, pair: Var, op: &'static str) -> Result<usize> {
        match self.shape(pair) {
            &[2, n] => Ok(n),
            s => Err(Error::shape(op, format!("moment pair must be [2, n], got {s:?}"))),
        }
    }

    /// Builds a moment pair from separate mean and variance vectors.
    pub fn moment_leaf(&mut self, mean: &[f64], var: &[f64]) -> Result<Var> {
        if mean.len() != var.len() {
            return Err(Error::shape("moment_leaf", "mean and variance lengths differ"));
        }
        let value = mean.iter().chain(var).copied().collect();
        Ok(self.push(vec![2, mean.len()], value, Op::Leaf))
    }

    /// Diagonal-covariance moments of `W·X + b`.
    pub fn moment_linear(&mut self, pair: Var, w: Var, b: Var) -> Result<Var> {
        for v in [pair, w, b] {
            self.check(v, "moment_linear")?;
        }
        let n_in = self.pair_len(pair, "moment_linear")?;
        let (&[m, k], &[m2]) = (self.shape(w), self.shape(b)) else {
            return Err(Error::shape("moment_linear", format!("weights {:?}, bias {:?}", self.shape(w), self.shape(b))));
        };
        if k != n_in || m != m2 {
            return Err(Error::shape(
                "moment_linear",
                format!("weights {:?}, bias {:?}, {n_in} input units", self.shape(w), self.shape(b)),
            ));
        }
        let p = self.value(pair);
        let (mean, var) = crate::moments::linear_moments_raw(&p[..n_in], &p[n_in..], self.value(w), self.value(b), m);
        let value = mean.into_iter().chain(var).collect();
        Ok(self.push(vec![2, m], value, Op::MomentLinear { pair, w, b }))
    }

    fn map_pair(
        &mut self,
        pair: Var,
        op: &'static str,
        f: impl Fn(MomentScalar) -> (MomentScalar, MomentJacobian),
    ) -> Result<(Vec<f64>, Vec<MomentJacobian>)> {
        self.check(pair, op)?;
        let n = self.pair_len(pair, op)?;
        let p = self.value(pair);
        let mut out = vec![0.0; 2 * n];
        let mut jac = Vec::with_capacity(n);
        for i in 0..n {
            let (y, j) = f(MomentScalar { mean: p[i], var: p[n + i].max(0.0) });
            out[i] = y.mean;
            out[n + i] = y.var;
            jac.push(j);
        }
        Ok((out, jac))
    }

    pub fn moment_pointwise(&mut self, pair: Var, f: Pointwise) -> Result<Var> {
        let (value, jac) = self.map_pair(pair, "moment_pointwise", |x| f.moments_with_jacobian(x))?;
        let shape = self.shape(pair).to_vec();
        Ok(self.push(shape, value, Op::MomentPointwise { pair, jac }))
    }

    /// Moments of `scale·X·B`, `B ~ Bernoulli(keep_prob)`.
    pub fn moment_dropout(&mut self, pair: Var, keep_prob: f64, scale: f64) -> Result<Var> {
        crate::moments::check_keep_prob(keep_prob)?;
        let (value, jac) = self.map_pair(pair, "moment_dropout", |x| dropout_with_jacobian(x, keep_prob, scale))?;
        let shape = self.shape(pair).to_vec();
        Ok(self.push(shape, value, Op::MomentDropout { pair, jac }))
    }

    /// The pair `(b, s²)` left behind by a normalization layer.
    pub fn moment_from_affine(&mut self, s: Var, b: Var) -> Result<Var> {
        for v in [s, b] {
            self.check(v, "moment_from_affine")?;
        }
        if self.shape(s).len() != 1 || self.shape(s) != self.shape(b) {
            return Err(Error::shape("moment_from_affine", format!("{:?} and {:?}", self.shape(s), self.shape(b))));
        }
        let n = self.shape(s)[0];
        let value = self.value(b).iter().copied().chain(self.value(s).iter().map(|v| v * v)).collect();
        Ok(self.push(vec![2, n], value, Op::MomentFromAffine { s, b }))
    }

    /// Moments after `(x − μ)/σ · s + b`.
    pub fn moment_affine(&mut self, pair: Var, mu: Var, sigma: Var, s: Var, b: Var) -> Result<Var> {
        for v in [pair, mu, sigma, s, b] {
            self.check(v, "moment_affine")?;
        }
        let n = self.pair_len(pair, "moment_affine")?;
        for v in [mu, sigma, s, b] {
            if self.shape(v) != [n] {
                return Err(Error::shape("moment_affine", format!("statistics {:?} for {n} units", self.shape(v))));
            }
        }
        let (p, m, sg, sc, sh) = (self.value(pair), self.value(mu), self.value(sigma), self.value(s), self.value(b));
        let mut value = vec![0.0; 2 * n];
        for i in 0..n {
            let k = sc[i] / sg[i];
            value[i] = (p[i] - m[i]) * k + sh[i];
            value[n + i] = p[n + i] * k * k;
        }
        Ok(self.push(vec![2, n], value, Op::MomentAffine { pair, mu, sigma, s, b }))
    }

    /// Repeats every unit `times` times in a row (channel stats → flattened features).
    pub fn moment_repeat(&mut self, pair: Var, times: usize) -> Result<Var> {
        self.check(pair, "moment_repeat")?;
        let n = self.pair_len(pair, "moment_repeat")?;
        if times == 0 {
            return Err(Error::invalid("moment_repeat", "repeat count must be positive"));
        }
        let value = self.value(pair).iter().flat_map(|&v| std::iter::repeat(v).take(times)).collect();
        Ok(self.push(vec![2, n * times], value, Op::MomentRepeat { pair, times }))
    }

    pub fn pair_mean(&mut self, pair: Var) -> Result<Var> {
        self.check(pair, "pair_mean")?;
        let n = self.pair_len(pair, "pair_mean")?;
        let value = self.value(pair)[..n].to_vec();
        Ok(self.push(vec![n], value, Op::PairMean { pair }))
    }

    pub fn pair_var(&mut self, pair: Var) -> Result<Var> {
        self.check(pair, "pair_var")?;
        let n = self.pair_len(pair, "pair_var")?;
        let value = self.value(pair)[n..].to_vec();
        Ok(self.push(vec![n], value, Op::PairVar { pair }))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss, "backward")?;
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let lens = self.nodes.iter().map(|n| n.value.len()).collect();
        Ok(Gradients { grads, lens })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let len = |v: Var| self.nodes[v.0].value.len();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len(v)]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[0];
                acc(*x, &mut |dx| kernels::gemm_nn(g, self.value(*w), dx, n, m, k));
                acc(*w, &mut |dw| kernels::gemm_tn(g, self.value(*x), dw, m, n, k));
                acc(*b, &mut |db| {
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                });
            }
            Op::Conv { x, w, b, geom } => {
                let n = self.shape(*x)[0];
                let mut dx = vec![0.0; len(*x)];
                let mut dw = vec![0.0; len(*w)];
                let mut db = vec![0.0; len(*b)];
                kernels::conv2d_backward(geom, n, self.value(*x), self.value(*w), g, &mut dx, &mut dw, &mut db);
                for (v, d) in [(*x, dx), (*w, dw), (*b, db)] {
                    acc(v, &mut |slot| slot.iter_mut().zip(&d).for_each(|(s, e)| *s += e));
                }
            }
            Op::Reshape { x } => acc(*x, &mut |dx| dx.iter_mut().zip(g).for_each(|(d, e)| *d += e)),
            Op::Pointwise { x, f } => {
                let xv = self.value(*x);
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * f.derivative(xv[i]);
                    }
                });
            }
            Op::LogSoftmax { x } => {
                let k = self.shape(*x)[1];
                let y = &node.value;
                acc(*x, &mut |dx| {
                    for ((drow, grow), yrow) in dx.chunks_mut(k).zip(g.chunks(k)).zip(y.chunks(k)) {
                        let total: f64 = grow.iter().sum();
                        for j in 0..k {
                            drow[j] += grow[j] - yrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::Nll { logp, labels } => {
                let k = self.shape(*logp)[1];
                let scale = g[0] / labels.len() as f64;
                acc(*logp, &mut |d| {
                    for (i, &l) in labels.iter().enumerate() {
                        d[i * k + l] -= scale;
                    }
                });
            }
            Op::MulConst { x, factors } => {
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] * factors[i];
                    }
                });
            }
            Op::Sum { x } => acc(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::DotConst { x, weights } => {
                acc(*x, &mut |dx| dx.iter_mut().zip(weights).for_each(|(d, w)| *d += g[0] * w));
            }
            Op::ChannelNormalize { x, mu, sigma, s, b, inner } => {
                let inner = *inner;
                let c = self.shape(*mu)[0];
                let (xv, m, sg, sc) = (self.value(*x), self.value(*mu), self.value(*sigma), self.value(*s));
                let mut dmu = vec![0.0; c];
                let mut dsigma = vec![0.0; c];
                let mut ds = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut dx = vec![0.0; xv.len()];
                for (blk, (gb, xb)) in g.chunks(inner).zip(xv.chunks(inner)).enumerate() {
                    let ch = blk % c;
                    let k = sc[ch] / sg[ch];
                    let (mut sum_g, mut sum_gz) = (0.0, 0.0);
                    for j in 0..inner {
                        let z = (xb[j] - m[ch]) / sg[ch];
                        dx[blk * inner + j] = gb[j] * k;
                        sum_g += gb[j];
                        sum_gz += gb[j] * z;
                    }
                    db[ch] += sum_g;
                    ds[ch] += sum_gz;
                    dmu[ch] -= sum_g * k;
                    dsigma[ch] -= sum_gz * k;
                }
                for (v, d) in [(*x, dx), (*mu, dmu), (*sigma, dsigma), (*s, ds), (*b, db)] {
                    acc(v, &mut |slot| slot.iter_mut().zip(&d).for_each(|(s, e)| *s += e));
                }
            }
            Op::ChannelMean { x, inner } => {
                let c = g.len();
                let count = (len(*x) / c) as f64;
                acc(*x, &mut |dx| {
                    for (blk, chunk) in dx.chunks_mut(*inner).enumerate() {
                        chunk.iter_mut().for_each(|d| *d += g[blk % c] / count);
                    }
                });
            }
            Op::ChannelVar { x, inner } => {
                let c = g.len();
                let xv = self.value(*x);
                let count = (xv.len() / c) as f64;
                let mut mean = vec![0.0; c];
                for (blk, chunk) in xv.chunks(*inner).enumerate() {
                    mean[blk % c] += chunk.iter().sum::<f64>();
                }
                mean.iter_mut().for_each(|m| *m /= count);
                acc(*x, &mut |dx| {
                    for (blk, (d, xs)) in dx.chunks_mut(*inner).zip(xv.chunks(*inner)).enumerate() {
                        let ch = blk % c;
                        for (di, xi) in d.iter_mut().zip(xs) {
                            *di += g[ch] * 2.0 * (xi - mean[ch]) / count;
                        }
                    }
                });
            }
            Op::SqrtEps { x } => {
                let y = &node.value;
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        dx[i] += g[i] / (2.0 * y[i]);
                    }
                });
            }
            Op::RowSqNorm { w } => {
                let wv = self.value(*w);
                let row = wv.len() / g.len();
                acc(*w, &mut |dw| {
                    for (i, (d, wi)) in dw.iter_mut().zip(wv).enumerate() {
                        *d += 2.0 * g[i / row] * wi;
                    }
                });
            }
            Op::GlobalAvgPool { x, inner } => {
                acc(*x, &mut |dx| {
                    for (gi, chunk) in g.iter().zip(dx.chunks_mut(*inner)) {
                        chunk.iter_mut().for_each(|d| *d += gi / *inner as f64);
                    }
                });
            }
            Op::SpatialSum { w, group } => {
                acc(*w, &mut |dw| {
                    for (gi, chunk) in g.iter().zip(dw.chunks_mut(*group)) {
                        chunk.iter_mut().for_each(|d| *d += gi);
                    }
                });
            }
            Op::MomentLinear { pair, w, b } => {
                let p = self.value(*pair);
                let n_in = p.len() / 2;
                let m = g.len() / 2;
                let wv = self.value(*w);
                let (gm, gv) = g.split_at(m);
                acc(*pair, &mut |dp| {
                    for o in 0..m {
                        let row = &wv[o * n_in..(o + 1) * n_in];
                        for i in 0..n_in {
                            dp[i] += row[i] * gm[o];
                            dp[n_in + i] += row[i] * row[i] * gv[o];
                        }
                    }
                });
                acc(*w, &mut |dw| {
                    for o in 0..m {
                        let row = &wv[o * n_in..(o + 1) * n_in];
                        for i in 0..n_in {
                            dw[o * n_in + i] += gm[o] * p[i] + gv[o] * 2.0 * row[i] * p[n_in + i];
                        }
                    }
                });
                acc(*b, &mut |db| db.iter_mut().zip(gm).for_each(|(d, e)| *d += e));
            }
            Op::MomentPointwise { pair, jac } | Op::MomentDropout { pair, jac } => {
                let n = jac.len();
                let (gm, gv) = g.split_at(n);
                acc(*pair, &mut |dp| {
                    for (i, j) in jac.iter().enumerate() {
                        dp[i] += j.dmean_dmean * gm[i] + j.dvar_dmean * gv[i];
                        dp[n + i] += j.dmean_dvar * gm[i] + j.dvar_dvar * gv[i];
                    }
                });
            }
            Op::MomentFromAffine { s, b } => {
                let n = g.len() / 2;
                let sv = self.value(*s);
                acc(*b, &mut |db| db.iter_mut().zip(&g[..n]).for_each(|(d, e)| *d += e));
                acc(*s, &mut |ds| {
                    for i in 0..n {
                        ds[i] += 2.0 * sv[i] * g[n + i];
                    }
                });
            }
            Op::MomentAffine { pair, mu, sigma, s, b } => {
                let n = g.len() / 2;
                let (p, m, sg, sc) = (self.value(*pair), self.value(*mu), self.value(*sigma), self.value(*s));
                let (gm, gv) = g.split_at(n);
                let mut dp = vec![0.0; 2 * n];
                let (mut dmu, mut dsigma, mut ds) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for i in 0..n {
                    let k = sc[i] / sg[i];
                    let z = (p[i] - m[i]) / sg[i];
                    dp[i] = gm[i] * k;
                    dp[n + i] = gv[i] * k * k;
                    dmu[i] = -gm[i] * k;
                    dsigma[i] = -gm[i] * z * k - 2.0 * gv[i] * p[n + i] * k * k / sg[i];
                    ds[i] = gm[i] * z + 2.0 * gv[i] * p[n + i] * k / sg[i];
                }
                for (v, d) in [(*pair, dp), (*mu, dmu), (*sigma, dsigma), (*s, ds)] {
                    acc(v, &mut |slot| slot.iter_mut().zip(&d).for_each(|(s, e)| *s += e));
                }
                acc(*b, &mut |db| db.iter_mut().zip(gm).for_each(|(d, e)| *d += e));
            }
            Op::MomentRepeat { pair, times } => {
                acc(*pair, &mut |dp| {
                    for (d, chunk) in dp.iter_mut().zip(g.chunks(*times)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::PairMean { pair } => acc(*pair, &mut |dp| dp.iter_mut().zip(g).for_each(|(d, e)| *d += e)),
            Op::PairVar { pair } => {
                let n = g.len();
                acc(*pair, &mut |dp| dp[n..].iter_mut().zip(g).for_each(|(d, e)| *d += e));
            }
        }
    }
}
