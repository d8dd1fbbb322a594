use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// Probabilities fed to cross-entropy are clamped into `[PROB_FLOOR, 1]`.
pub const PROB_FLOOR: f64 = 1e-12;
pub const BN_EPSILON: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Output keeps the input extent; zero padding of `(k-1)/2` before.
    Same,
    /// No padding; output extent is `input - k + 1`.
    Valid,
}

impl Padding {
    fn geometry(self, input: usize, kernel: usize) -> Option<(usize, usize)> {
        match self {
            Padding::Same => Some((input, (kernel - 1) / 2)),
            Padding::Valid => (input >= kernel).then(|| (input - kernel + 1, 0)),
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        pad_y: usize,
        pad_x: usize,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Concat(Var, Var),
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Reshape(Var),
    MaskApply {
        x: Var,
        mask: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
    },
    FeatureSmoothing {
        features: Var,
        /// Per-sample scale `2 / (P * N_c)` and centroid row.
        coeff: Vec<f64>,
        centroids: Vec<f64>,
        slot: Vec<usize>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Running statistics consumed by batch normalization in inference mode.
#[derive(Debug, Clone, Copy)]
pub enum BnMode<'a> {
    Train,
    Infer { mean: &'a [f64], var: &'a [f64] },
}

/// Append-only tape of forward operations.
///
/// Nodes are pushed in evaluation order, so the node sequence is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    /// Batch mean and (biased) variance computed by a training-mode batchnorm.
    pub fn batch_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        self.nodes[v.0]
            .batch_stats
            .as_ref()
            .map(|(m, s)| (m.as_slice(), s.as_slice()))
    }

    /// Adds a leaf; gradients are tracked iff `tensor.requires_grad`.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad);
        let value = Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
        };
        self.push(value, op)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Stride-1 convolution. `x` is `N×H×W×Cin`, `w` is `kh×kw×Cin×Cout`,
    /// `b` is `Cout`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, padding: Padding) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != xs[3] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, co) = (ws[0], ws[1], ws[3]);
        if self.shape(b) != [co] {
            return Err(Error::shape("conv2d bias", &ws, self.shape(b)));
        }
        let (ho, pad_y) = padding
            .geometry(h, kh)
            .ok_or_else(|| Error::shape("conv2d", &xs, &ws))?;
        let (wo, pad_x) = padding
            .geometry(wd, kw)
            .ok_or_else(|| Error::shape("conv2d", &xs, &ws))?;

        let (xd, wdat, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![0.0; n * ho * wo * co];
        for img in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((img * ho + oy) * wo + ox) * co;
                    let acc = &mut out[o..o + co];
                    acc.copy_from_slice(bd);
                    for ky in 0..kh {
                        let Some(iy) = (oy + ky).checked_sub(pad_y).filter(|&iy| iy < h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = (ox + kx).checked_sub(pad_x).filter(|&ix| ix < wd) else {
                                continue;
                            };
                            let xi = ((img * h + iy) * wd + ix) * ci;
                            let wbase = (ky * kw + kx) * ci * co;
                            for (c, &xv) in xd[xi..xi + ci].iter().enumerate() {
                                let row = &wdat[wbase + c * co..wbase + (c + 1) * co];
                                for (a, &wv) in acc.iter_mut().zip(row) {
                                    *a += xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push_op(
            vec![n, ho, wo, co],
            out,
            Op::Conv2d { x, w, b, pad_y, pad_x },
            &[x, w, b],
        ))
    }

    /// `x·w + b` for `x: N×D`, `w: D×M`, `b: M`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("dense", &xs, &ws));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        if self.shape(b) != [m] {
            return Err(Error::shape("dense bias", &ws, self.shape(b)));
        }
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = Vec::with_capacity(n * m);
        for row in xd.chunks_exact(d) {
            let mut acc = bd.to_vec();
            for (k, &xv) in row.iter().enumerate() {
                for (a, &wv) in acc.iter_mut().zip(&wd[k * m..(k + 1) * m]) {
                    *a += xv * wv;
                }
            }
            out.extend_from_slice(&acc);
        }
        Ok(self.push_op(vec![n, m], out, Op::Dense { x, w, b }, &[x, w, b]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Sigmoid(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("softmax", &shape, &[]))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(self.push_op(shape, out, Op::Softmax(x), &[x]))
    }

    fn pool_geometry(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, Vec<usize>)> {
        let s = self.shape(x);
        match *s {
            [h, w, c] => Ok((1, h * w, c, vec![c])),
            [n, h, w, c] => Ok((n, h * w, c, vec![n, c])),
            _ => Err(Error::shape(op, s, &[0, 0, 0])),
        }
    }

    /// Spatial mean per channel of an `H×W×C` or `N×H×W×C` map.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, hw, c, out_shape) = self.pool_geometry("global_avg_pool", x)?;
        let xd = self.data(x);
        let mut out = vec![0.0; n * c];
        for img in 0..n {
            let acc = &mut out[img * c..(img + 1) * c];
            for px in xd[img * hw * c..(img + 1) * hw * c].chunks_exact(c) {
                for (a, &v) in acc.iter_mut().zip(px) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a /= hw as f64;
            }
        }
        Ok(self.push_op(out_shape, out, Op::GlobalAvgPool(x), &[x]))
    }

    /// Spatial max per channel. Gradient goes to the first maximal element
    /// in row-major order.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, hw, c, out_shape) = self.pool_geometry("global_max_pool", x)?;
        let xd = self.data(x);
        let mut out = vec![f64::NEG_INFINITY; n * c];
        let mut argmax = vec![0usize; n * c];
        for img in 0..n {
            for p in 0..hw {
                let base = (img * hw + p) * c;
                for ch in 0..c {
                    let v = xd[base + ch];
                    if v > out[img * c + ch] {
                        out[img * c + ch] = v;
                        argmax[img * c + ch] = base + ch;
                    }
                }
            }
        }
        Ok(self.push_op(out_shape, out, Op::GlobalMaxPool { x, argmax }, &[x]))
    }

    /// Concatenation along the last axis; leading extents must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape("concat", &sa, &sb));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(da.len() + db.len());
        for (ra, rb) in da.chunks_exact(ca).zip(db.chunks_exact(cb)) {
            out.extend_from_slice(ra);
            out.extend_from_slice(rb);
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = ca + cb;
        Ok(self.push_op(shape, out, Op::Concat(a, b), &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(sa.to_vec())
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        Ok(self.push_op(shape, out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        Ok(self.push_op(shape, out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Scale(x, factor), &[x])
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.data(x).iter().sum();
        self.push_op(Vec::new(), vec![total], Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).numel() {
            return Err(Error::shape("reshape", self.shape(x), &shape));
        }
        let data = self.data(x).to_vec();
        Ok(self.push_op(shape, data, Op::Reshape(x), &[x]))
    }

    /// Multiplies `x` elementwise by a fixed mask (no gradient to the mask).
    pub fn mask_apply(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return Err(Error::shape("mask_apply", self.shape(x), &[mask.len()]));
        }
        let out = self.data(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push_op(shape, out, Op::MaskApply { x, mask }, &[x]))
    }

    /// Inverted dropout: kept units are divided by the keep probability.
    /// Identity when `training` is false or `rate` is zero.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mask_apply(x, mask)
    }

    /// Batch normalization over every axis but the last (channel) one.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::shape("batch_norm", &shape, &[]))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", &shape, self.shape(gamma)));
        }
        let xd = self.data(x);
        let m = xd.len() / c;
        let (mean, var, training) = match mode {
            BnMode::Train => {
                let mut mean = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    for (a, v) in mean.iter_mut().zip(row) {
                        *a += v;
                    }
                }
                mean.iter_mut().for_each(|a| *a /= m as f64);
                let mut var = vec![0.0; c];
                for row in xd.chunks_exact(c) {
                    for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
                        *a += (v - mu) * (v - mu);
                    }
                }
                var.iter_mut().for_each(|a| *a /= m as f64);
                (mean, var, true)
            }
            BnMode::Infer { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batch_norm running stats", &shape, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks_exact(c) {
            for ch in 0..c {
                let h = (row[ch] - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gd[ch] * h + bd[ch]);
            }
        }
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            training,
        };
        let v = self.push_op(shape, out, op, &[x, gamma, beta]);
        if training {
            self.nodes[v.0].batch_stats = Some((mean, var));
        }
        Ok(v)
    }

    /// Mean negative log-likelihood of `labels` under row-stochastic `probs`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("cross_entropy", &s, &[labels.len()]));
        }
        let c = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!(
                "cross_entropy: label {bad} out of range for {c} classes"
            )));
        }
        let pd = self.data(probs);
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -pd[i * c + l].clamp(PROB_FLOOR, 1.0).ln())
            .sum();
        let loss = total / labels.len() as f64;
        let op = Op::CrossEntropy {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push_op(Vec::new(), vec![loss], op, &[probs]))
    }

    /// Mean over present classes of the mean squared distance of each
    /// feature row from its class centroid within this batch.
    pub fn feature_smoothing(&mut self, features: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(features).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.is_empty() {
            return Err(Error::shape("feature_smoothing", &s, &[labels.len()]));
        }
        let d = s[1];
        let fd = self.data(features);

        // Compact present labels into slots so the centroid table stays dense.
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        let slot: Vec<usize> = labels.iter().map(|l| classes.binary_search(l).unwrap()).collect();
        let present = classes.len();
        // Centroids are accumulated as offsets from each class's first row,
        // so a class of identical rows has exactly zero spread.
        let mut anchor = vec![usize::MAX; present];
        let mut counts = vec![0usize; present];
        let mut centroids = vec![0.0; present * d];
        for (i, (row, &k)) in fd.chunks_exact(d).zip(&slot).enumerate() {
            if anchor[k] == usize::MAX {
                anchor[k] = i;
            }
            counts[k] += 1;
            let base = &fd[anchor[k] * d..(anchor[k] + 1) * d];
            for ((c, v), b) in centroids[k * d..(k + 1) * d].iter_mut().zip(row).zip(base) {
                *c += v - b;
            }
        }
        for (k, &n) in counts.iter().enumerate() {
            let base = &fd[anchor[k] * d..(anchor[k] + 1) * d];
            for (c, b) in centroids[k * d..(k + 1) * d].iter_mut().zip(base) {
                *c = b + *c / n as f64;
            }
        }
        let mut per_class = vec![0.0; present];
        for (row, &k) in fd.chunks_exact(d).zip(&slot) {
            per_class[k] += row
                .iter()
                .zip(&centroids[k * d..(k + 1) * d])
                .map(|(v, c)| (v - c) * (v - c))
                .sum::<f64>();
        }
        let loss = per_class.iter().zip(&counts).map(|(s, &n)| s / n as f64).sum::<f64>() / present as f64;
        let coeff = slot
            .iter()
            .map(|&k| 2.0 / (present as f64 * counts[k] as f64))
            .collect();
        let op = Op::FeatureSmoothing {
            features,
            coeff,
            centroids,
            slot,
        };
        Ok(self.push_op(Vec::new(), vec![loss], op, &[features]))
    }

    /// Reverse sweep from a scalar `loss`, filling the gradient slot of every
    /// grad-requiring node that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(Error::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let tracked = lv.requires_grad;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !tracked {
            return Ok(());
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, pad_y, pad_x } => self.conv2d_backward(*x, *w, *b, *pad_y, *pad_x, node, g, grads),
            Op::Dense { x, w, b } => {
                let (n, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[1];
                let (xd, wd) = (self.data(*x), self.data(*w));
                if self.requires(*x) {
                    let gx = accum(grads, *x, n * d);
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for k in 0..d {
                            gx[r * d + k] += dot(gr, &wd[k * m..(k + 1) * m]);
                        }
                    }
                }
                if self.requires(*w) {
                    let gw = accum(grads, *w, d * m);
                    for r in 0..n {
                        let gr = &g[r * m..(r + 1) * m];
                        for k in 0..d {
                            axpy(&mut gw[k * m..(k + 1) * m], xd[r * d + k], gr);
                        }
                    }
                }
                if self.requires(*b) {
                    let gb = accum(grads, *b, m);
                    for gr in g.chunks_exact(m) {
                        axpy(gb, 1.0, gr);
                    }
                }
            }
            Op::Relu(x) => {
                if self.requires(*x) {
                    let xd = self.data(*x);
                    let gx = accum(grads, *x, g.len());
                    for ((a, gi), xv) in gx.iter_mut().zip(g).zip(xd) {
                        if *xv > 0.0 {
                            *a += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.requires(*x) {
                    let gx = accum(grads, *x, g.len());
                    for ((a, gi), y) in gx.iter_mut().zip(g).zip(out) {
                        *a += gi * y * (1.0 - y);
                    }
                }
            }
            Op::Softmax(x) => {
                if self.requires(*x) {
                    let c = *node.value.shape().last().unwrap();
                    let gx = accum(grads, *x, g.len());
                    for ((ga, gr), yr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c)) {
                        let s = dot(gr, yr);
                        for ((a, gi), y) in ga.iter_mut().zip(gr).zip(yr) {
                            *a += y * (gi - s);
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.requires(*x) {
                    let xs = self.shape(*x);
                    let c = xs[xs.len() - 1];
                    let hw = xs[xs.len() - 3] * xs[xs.len() - 2];
                    let gx = accum(grads, *x, self.value(*x).numel());
                    for (img, gimg) in gx.chunks_exact_mut(hw * c).enumerate() {
                        let gr = &g[img * c..(img + 1) * c];
                        for px in gimg.chunks_exact_mut(c) {
                            axpy(px, 1.0 / hw as f64, gr);
                        }
                    }
                }
            }
            Op::GlobalMaxPool { x, argmax } => {
                if self.requires(*x) {
                    let gx = accum(grads, *x, self.value(*x).numel());
                    for (&idx, gi) in argmax.iter().zip(g) {
                        gx[idx] += gi;
                    }
                }
            }
            Op::Concat(a, b) => {
                let ca = *self.shape(*a).last().unwrap();
                let cb = *self.shape(*b).last().unwrap();
                let rows = g.len() / (ca + cb);
                if self.requires(*a) {
                    let ga = accum(grads, *a, rows * ca);
                    for (dst, src) in ga.chunks_exact_mut(ca).zip(g.chunks_exact(ca + cb)) {
                        axpy(dst, 1.0, &src[..ca]);
                    }
                }
                if self.requires(*b) {
                    let gb = accum(grads, *b, rows * cb);
                    for (dst, src) in gb.chunks_exact_mut(cb).zip(g.chunks_exact(ca + cb)) {
                        axpy(dst, 1.0, &src[ca..]);
                    }
                }
            }
            Op::Mul(a, b) => {
                // a and b may be the same node; accumulate one side at a time.
                if self.requires(*a) {
                    let bd = self.data(*b);
                    let ga = accum(grads, *a, g.len());
                    for ((acc, gi), y) in ga.iter_mut().zip(g).zip(bd) {
                        *acc += gi * y;
                    }
                }
                if self.requires(*b) {
                    let ad = self.data(*a);
                    let gb = accum(grads, *b, g.len());
                    for ((acc, gi), x) in gb.iter_mut().zip(g).zip(ad) {
                        *acc += gi * x;
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.requires(*v) {
                        axpy(accum(grads, *v, g.len()), 1.0, g);
                    }
                }
            }
            Op::Scale(x, factor) => {
                if self.requires(*x) {
                    axpy(accum(grads, *x, g.len()), *factor, g);
                }
            }
            Op::Sum(x) => {
                if self.requires(*x) {
                    let gx = accum(grads, *x, self.value(*x).numel());
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Reshape(x) => {
                if self.requires(*x) {
                    axpy(accum(grads, *x, g.len()), 1.0, g);
                }
            }
            Op::MaskApply { x, mask } => {
                if self.requires(*x) {
                    let gx = accum(grads, *x, g.len());
                    for ((a, gi), m) in gx.iter_mut().zip(g).zip(mask) {
                        *a += gi * m;
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let c = inv_std.len();
                let m = g.len() / c;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        sum_g[ch] += gr[ch];
                        sum_gx[ch] += gr[ch] * hr[ch];
                    }
                }
                if self.requires(*x) {
                    let gd = self.data(*gamma);
                    let gx = accum(grads, *x, g.len());
                    for ((ga, gr), hr) in gx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                        for ch in 0..c {
                            let k = gd[ch] * inv_std[ch];
                            ga[ch] += if *training {
                                k * (gr[ch] - sum_g[ch] / m as f64 - hr[ch] * sum_gx[ch] / m as f64)
                            } else {
                                k * gr[ch]
                            };
                        }
                    }
                }
                if self.requires(*gamma) {
                    axpy(accum(grads, *gamma, c), 1.0, &sum_gx);
                }
                if self.requires(*beta) {
                    axpy(accum(grads, *beta, c), 1.0, &sum_g);
                }
            }
            Op::CrossEntropy { probs, labels } => {
                if self.requires(*probs) {
                    let c = self.shape(*probs)[1];
                    let n = labels.len() as f64;
                    let pd = self.data(*probs);
                    let gp = accum(grads, *probs, pd.len());
                    for (i, &l) in labels.iter().enumerate() {
                        let p = pd[i * c + l];
                        if (PROB_FLOOR..=1.0).contains(&p) {
                            gp[i * c + l] -= g[0] / (n * p);
                        }
                    }
                }
            }
            Op::FeatureSmoothing {
                features,
                coeff,
                centroids,
                slot,
                ..
            } => {
                // The centroid term of the chain rule vanishes because
                // deviations from a class mean sum to zero.
                if self.requires(*features) {
                    let d = self.shape(*features)[1];
                    let fd = self.data(*features);
                    let gf = accum(grads, *features, fd.len());
                    for (i, (&k, &cf)) in slot.iter().zip(coeff).enumerate() {
                        let mu = &centroids[k * d..(k + 1) * d];
                        for j in 0..d {
                            gf[i * d + j] += g[0] * cf * (fd[i * d + j] - mu[j]);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        pad_y: usize,
        pad_x: usize,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let (n, h, wd, ci) = (xs[0], xs[1], xs[2], xs[3]);
        let (kh, kw, co) = (ws[0], ws[1], ws[3]);
        let (ho, wo) = (node.value.shape()[1], node.value.shape()[2]);
        let (xd, wdat) = (self.data(x), self.data(w));
        let need_x = self.requires(x);
        let need_w = self.requires(w);

        if self.requires(b) {
            let gb = accum(grads, b, co);
            for gr in g.chunks_exact(co) {
                axpy(gb, 1.0, gr);
            }
        }
        if !need_x && !need_w {
            return;
        }
        let mut gx = need_x.then(|| vec![0.0; xd.len()]);
        let mut gw = need_w.then(|| vec![0.0; wdat.len()]);
        for img in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((img * ho + oy) * wo + ox) * co;
                    let gr = &g[o..o + co];
                    for ky in 0..kh {
                        let Some(iy) = (oy + ky).checked_sub(pad_y).filter(|&iy| iy < h) else {
                            continue;
                        };
                        for kx in 0..kw {
                            let Some(ix) = (ox + kx).checked_sub(pad_x).filter(|&ix| ix < wd) else {
                                continue;
                            };
                            let xi = ((img * h + iy) * wd + ix) * ci;
                            let wbase = (ky * kw + kx) * ci * co;
                            for c in 0..ci {
                                let wr = wbase + c * co..wbase + (c + 1) * co;
                                if let Some(gx) = gx.as_mut() {
                                    gx[xi + c] += dot(&wdat[wr.clone()], gr);
                                }
                                if let Some(gw) = gw.as_mut() {
                                    axpy(&mut gw[wr], xd[xi + c], gr);
                                }
                            }
                        }
                    }
                }
            }
        }
        if let Some(local) = gx {
            axpy(accum(grads, x, local.len()), 1.0, &local);
        }
        if let Some(local) = gw {
            axpy(accum(grads, w, local.len()), 1.0, &local);
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn accum(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}
