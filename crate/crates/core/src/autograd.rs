//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records each operation as it runs; [`Graph::backward`] walks
//! the tape in reverse. Graphs are single-use: build one per step.

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::tensor::{axpy, dot, log_sum_exp, matmul, matmul_a_bt_acc, matmul_at_b_acc, softmax_into, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn out_px(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    AvgPool { x: Var, k: usize },
    GlobalAvgPool(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    GroupMean { x: Var, group: usize },
    L2Normalize { x: Var, norms: Vec<T> },
    InfoNce { q: Var, k: Var, inv_tau: T, probs: Vec<T> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    SoftCrossEntropy { logits: Var, targets: Vec<T>, probs: Vec<T> },
    Mse { pred: Var, target: Vec<T> },
    WeightedSum { x: Var, weights: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(format!("[m,k] x [k,n] (rhs {sb:?})"), format!("{sa:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb != [sx[1]] {
            return Err(Error::shape(format!("bias [{}]", sx.get(1).copied().unwrap_or(0)), format!("{sb:?}")));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(sx[1]) {
            for (o, &bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!("{:?}", self.shape(a)), format!("{:?}", self.shape(b))));
        }
        let mut out = self.value(a).clone();
        for (o, &bv) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += bv;
        }
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v / (T::one() + (-v).exp()));
        self.push(out, Op::Silu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    /// 2-D convolution over NCHW input with a square kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sw[1] != sx[1] || sw[2] != sw[3] {
            return Err(Error::shape(format!("input [N,{},H,W] for kernel {sw:?}", sw.get(1).copied().unwrap_or(0)), format!("{sx:?}")));
        }
        if self.shape(b) != [sw[0]] {
            return Err(Error::shape(format!("bias [{}]", sw[0]), format!("{:?}", self.shape(b))));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let k = sw[2];
        if h + 2 * pad < k || wd + 2 * pad < k || stride == 0 {
            return Err(Error::shape(format!("spatial >= kernel {k}"), format!("{h}x{wd}")));
        }
        let geom = ConvGeom {
            cin,
            cout: sw[0],
            k,
            stride,
            pad,
            h,
            w: wd,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (wd + 2 * pad - k) / stride + 1,
        };
        let (patch, opx) = (geom.patch(), geom.out_px());
        let mut cols = vec![T::zero(); n * patch * opx];
        let mut out = vec![T::zero(); n * geom.cout * opx];
        let xd = self.value(x).data();
        let wdta = self.value(w).data();
        let bd = self.value(b).data();
        for s in 0..n {
            let img = &xd[s * cin * h * wd..(s + 1) * cin * h * wd];
            let sc = &mut cols[s * patch * opx..(s + 1) * patch * opx];
            im2col(img, &geom, sc);
            let so = &mut out[s * geom.cout * opx..(s + 1) * geom.cout * opx];
            for co in 0..geom.cout {
                let orow = &mut so[co * opx..(co + 1) * opx];
                orow.iter_mut().for_each(|o| *o = bd[co]);
                for p in 0..patch {
                    let wv = wdta[co * patch + p];
                    axpy(wv, &sc[p * opx..(p + 1) * opx], orow);
                }
            }
        }
        let t = Tensor::new(vec![n, geom.cout, geom.ho, geom.wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b]))
    }

    /// Non-overlapping average pooling with window and stride `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || !s[2].is_multiple_of(k) || !s[3].is_multiple_of(k) {
            return Err(Error::shape(format!("NCHW with H,W divisible by {k}"), format!("{s:?}")));
        }
        let (n, ch, h, w) = (s[0], s[1], s[2], s[3]);
        let (ho, wo) = (h / k, w / k);
        let inv = T::one() / c::<T>((k * k) as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); n * ch * ho * wo];
        for plane in 0..n * ch {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += src[(oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[plane * ho * wo + oy * wo + ox] = acc * inv;
                }
            }
        }
        Ok(self.push(Tensor::new(vec![n, ch, ho, wo], out)?, Op::AvgPool { x, k }, &[x]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("NCHW", format!("{s:?}")));
        }
        let hw = s[2] * s[3];
        let inv = T::one() / c::<T>(hw as f64);
        let out: Vec<T> = self.value(x).data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        Ok(self.push(Tensor::new(vec![s[0], s[1]], out)?, Op::GlobalAvgPool(x), &[x]))
    }

    /// Collapse all trailing dimensions into one.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (r, cl) = (v.rows(), v.cols());
        let t = v.clone().reshaped(vec![r, cl])?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            return Err(Error::shape(format!("[{}, _]", sa.first().copied().unwrap_or(0)), format!("{sb:?}")));
        }
        let (m, p, q) = (sa[0], sa[1], sb[1]);
        let mut out = Vec::with_capacity(m * (p + q));
        for i in 0..m {
            out.extend_from_slice(self.value(a).row(i));
            out.extend_from_slice(self.value(b).row(i));
        }
        Ok(self.push(Tensor::new(vec![m, p + q], out)?, Op::ConcatCols(a, b), &[a, b]))
    }

    /// Replace each row by the mean of the consecutive `group` rows it
    /// belongs to.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || group == 0 || !s[0].is_multiple_of(group) {
            return Err(Error::shape(format!("rows divisible by {group}"), format!("{s:?}")));
        }
        let d = s[1];
        let inv = T::one() / c::<T>(group as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for gi in 0..s[0] / group {
            let mut mean = vec![T::zero(); d];
            for r in 0..group {
                axpy(inv, &xd[(gi * group + r) * d..(gi * group + r + 1) * d], &mut mean);
            }
            for r in 0..group {
                out[(gi * group + r) * d..(gi * group + r + 1) * d].copy_from_slice(&mean);
            }
        }
        Ok(self.push(Tensor::new(s, out)?, Op::GroupMean { x, group }, &[x]))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 {
            return Err(Error::shape("[rows, dim]", format!("{:?}", v.shape())));
        }
        let d = v.cols();
        let tiny = c::<T>(1e-12);
        let mut norms = Vec::with_capacity(v.rows());
        let mut out = Vec::with_capacity(v.len());
        for i in 0..v.rows() {
            let row = v.row(i);
            let nrm = dot(row, row).sqrt().max(tiny);
            norms.push(nrm);
            out.extend(row.iter().map(|&e| e / nrm));
        }
        let t = Tensor::new(vec![v.rows(), d], out)?;
        Ok(self.push(t, Op::L2Normalize { x, norms }, &[x]))
    }

    /// Mean over rows of `-log softmax(q_i . k_j / tau)_ii`. Both inputs must
    /// have unit-norm rows.
    pub fn info_nce(&mut self, q: Var, k: Var, tau: T) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.shape().len() != 2 || qv.shape() != kv.shape() {
            return Err(Error::shape(format!("{:?}", qv.shape()), format!("{:?}", kv.shape())));
        }
        let (b, d) = (qv.rows(), qv.cols());
        if b < 2 {
            return Err(Error::invalid(format!("info_nce needs at least 2 rows, got {b}")));
        }
        if !(tau > T::zero()) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        check_unit_rows(qv, "queries")?;
        check_unit_rows(kv, "keys")?;
        let inv_tau = T::one() / tau;
        let mut logits = vec![T::zero(); b * b];
        matmul_a_bt_acc(qv.data(), kv.data(), b, b, d, &mut logits);
        logits.iter_mut().for_each(|l| *l *= inv_tau);
        let mut probs = vec![T::zero(); b * b];
        let mut loss = T::zero();
        for i in 0..b {
            let row = &logits[i * b..(i + 1) * b];
            loss += log_sum_exp(row) - row[i];
            softmax_into(row, &mut probs[i * b..(i + 1) * b]);
        }
        loss /= c::<T>(b as f64);
        Ok(self.push(Tensor::scalar(loss), Op::InfoNce { q, k, inv_tau, probs }, &[q, k]))
    }

    /// Mean cross-entropy of integer labels against row logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 || lv.rows() != labels.len() {
            return Err(Error::shape(format!("[{}, C] logits", labels.len()), format!("{:?}", lv.shape())));
        }
        let (b, cls) = (lv.rows(), lv.cols());
        if let Some(&bad) = labels.iter().find(|&&l| l >= cls) {
            return Err(Error::invalid(format!("label {bad} out of range for {cls} classes")));
        }
        let mut probs = vec![T::zero(); b * cls];
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = lv.row(i);
            loss += log_sum_exp(row) - row[y];
            softmax_into(row, &mut probs[i * cls..(i + 1) * cls]);
        }
        loss /= c::<T>(b as f64);
        let labels = labels.to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels, probs }, &[logits]))
    }

    /// Mean over rows of `-sum_j t_ij log softmax(z_i)_j` for target rows `t`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return Err(Error::shape(format!("{:?}", lv.shape()), format!("{:?}", targets.shape())));
        }
        let (b, cls) = (lv.rows(), lv.cols());
        let mut probs = vec![T::zero(); b * cls];
        let mut loss = T::zero();
        for i in 0..b {
            let row = lv.row(i);
            let lse = log_sum_exp(row);
            for (j, &t) in targets.row(i).iter().enumerate() {
                loss -= t * (row[j] - lse);
            }
            softmax_into(row, &mut probs[i * cls..(i + 1) * cls]);
        }
        loss /= c::<T>(b as f64);
        let targets = targets.data().to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::SoftCrossEntropy { logits, targets, probs }, &[logits]))
    }

    /// Mean over all elements of the squared difference.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() {
            return Err(Error::shape(format!("{:?}", pv.shape()), format!("{:?}", target.shape())));
        }
        let n = c::<T>(pv.len() as f64);
        let loss = pv.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
        let target = target.data().to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, &[pred]))
    }

    /// `sum(x * weights)`; a fixed linear readout used for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::shape(format!("{} weights", xv.len()), format!("{}", weights.len())));
        }
        let s = dot(xv.data(), weights);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights: weights.to_vec() }, &[x]))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Grads<T>> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("scalar output", format!("{:?}", self.shape(out))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let bd = self.value(*b).data();
                self.acc_with(grads, *a, |ga| matmul_a_bt_acc(g, bd, m, k, n, ga));
                let ad = self.value(*a).data();
                self.acc_with(grads, *b, |gb| matmul_at_b_acc(ad, g, m, k, n, gb));
            }
            Op::AddBias(x, b) => {
                let n = self.shape(*b)[0];
                self.acc_with(grads, *x, |gx| axpy(T::one(), g, gx));
                self.acc_with(grads, *b, |gb| {
                    for row in g.chunks(n) {
                        axpy(T::one(), row, gb);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc_with(grads, *a, |ga| axpy(T::one(), g, ga));
                self.acc_with(grads, *b, |gb| axpy(T::one(), g, gb));
            }
            Op::Scale(a, s) => self.acc_with(grads, *a, |ga| axpy(*s, g, ga)),
            Op::Silu(a) => {
                let xd = self.value(*a).data();
                self.acc_with(grads, *a, |ga| {
                    for ((o, &x), &gi) in ga.iter_mut().zip(xd).zip(g) {
                        let s = T::one() / (T::one() + (-x).exp());
                        *o += gi * (s + x * s * (T::one() - s));
                    }
                });
            }
            Op::Relu(a) => {
                let xd = self.value(*a).data();
                self.acc_with(grads, *a, |ga| {
                    for ((o, &x), &gi) in ga.iter_mut().zip(xd).zip(g) {
                        if x > T::zero() {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cols } => self.conv_backward(*x, *w, *b, geom, cols, g, grads),
            Op::AvgPool { x, k } => {
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (ho, wo) = (h / k, w / k);
                let inv = T::one() / c::<T>((k * k) as f64);
                self.acc_with(grads, *x, |gx| {
                    for plane in 0..gx.len() / (h * w) {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let gv = g[plane * ho * wo + oy * wo + ox] * inv;
                                for dy in 0..*k {
                                    for dx in 0..*k {
                                        gx[plane * h * w + (oy * k + dy) * w + ox * k + dx] += gv;
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let inv = T::one() / c::<T>(hw as f64);
                self.acc_with(grads, *x, |gx| {
                    for (p, &gv) in gx.chunks_mut(hw).zip(g) {
                        p.iter_mut().for_each(|o| *o += gv * inv);
                    }
                });
            }
            Op::Reshape(x) => self.acc_with(grads, *x, |gx| axpy(T::one(), g, gx)),
            Op::ConcatCols(a, b) => {
                let (p, q) = (self.shape(*a)[1], self.shape(*b)[1]);
                self.acc_with(grads, *a, |ga| {
                    for (dst, src) in ga.chunks_mut(p).zip(g.chunks(p + q)) {
                        axpy(T::one(), &src[..p], dst);
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for (dst, src) in gb.chunks_mut(q).zip(g.chunks(p + q)) {
                        axpy(T::one(), &src[p..], dst);
                    }
                });
            }
            Op::GroupMean { x, group } => {
                let d = self.shape(*x)[1];
                let inv = T::one() / c::<T>(*group as f64);
                self.acc_with(grads, *x, |gx| {
                    for (gsrc, gdst) in g.chunks(group * d).zip(gx.chunks_mut(group * d)) {
                        let mut total = vec![T::zero(); d];
                        for row in gsrc.chunks(d) {
                            axpy(inv, row, &mut total);
                        }
                        for row in gdst.chunks_mut(d) {
                            axpy(T::one(), &total, row);
                        }
                    }
                });
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let d = node.value.cols();
                self.acc_with(grads, *x, |gx| {
                    for (i, &nrm) in norms.iter().enumerate() {
                        let yr = &y[i * d..(i + 1) * d];
                        let gr = &g[i * d..(i + 1) * d];
                        let proj = dot(yr, gr);
                        for j in 0..d {
                            gx[i * d + j] += (gr[j] - yr[j] * proj) / nrm;
                        }
                    }
                });
            }
            Op::InfoNce { q, k, inv_tau, probs } => {
                let qv = self.value(*q);
                let b = qv.rows();
                let d = qv.cols();
                let scale = g[0] / c::<T>(b as f64);
                let mut dl = probs.clone();
                for i in 0..b {
                    dl[i * b + i] -= T::one();
                }
                dl.iter_mut().for_each(|v| *v *= scale * *inv_tau);
                let kd = self.value(*k).data();
                self.acc_with(grads, *q, |gq| {
                    let dq = matmul(&dl, kd, b, b, d);
                    axpy(T::one(), &dq, gq);
                });
                let qd = qv.data();
                self.acc_with(grads, *k, |gk| matmul_at_b_acc(&dl, qd, b, b, d, gk));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let cls = self.shape(*logits)[1];
                let scale = g[0] / c::<T>(labels.len() as f64);
                self.acc_with(grads, *logits, |gl| {
                    for (i, &y) in labels.iter().enumerate() {
                        for j in 0..cls {
                            let t = if j == y { T::one() } else { T::zero() };
                            gl[i * cls + j] += scale * (probs[i * cls + j] - t);
                        }
                    }
                });
            }
            Op::SoftCrossEntropy { logits, targets, probs } => {
                let s = self.shape(*logits);
                let (b, cls) = (s[0], s[1]);
                let scale = g[0] / c::<T>(b as f64);
                self.acc_with(grads, *logits, |gl| {
                    for i in 0..b {
                        let tr = &targets[i * cls..(i + 1) * cls];
                        let mass: T = tr.iter().copied().sum();
                        for j in 0..cls {
                            gl[i * cls + j] += scale * (probs[i * cls + j] * mass - tr[j]);
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pd = self.value(*pred).data();
                let scale = g[0] * c::<T>(2.0) / c::<T>(pd.len() as f64);
                self.acc_with(grads, *pred, |gp| {
                    for ((o, &p), &t) in gp.iter_mut().zip(pd).zip(target) {
                        *o += scale * (p - t);
                    }
                });
            }
            Op::WeightedSum { x, weights } => self.acc_with(grads, *x, |gx| axpy(g[0], weights, gx)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(&self, x: Var, w: Var, b: Var, geom: &ConvGeom, cols: &[T], g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (patch, opx) = (geom.patch(), geom.out_px());
        let n = self.shape(x)[0];
        let wd = self.value(w).data();
        let in_sz = geom.cin * geom.h * geom.w;
        self.acc_with(grads, b, |gb| {
            for s in 0..n {
                for co in 0..geom.cout {
                    let o = (s * geom.cout + co) * opx;
                    gb[co] += g[o..o + opx].iter().copied().sum::<T>();
                }
            }
        });
        self.acc_with(grads, w, |gw| {
            for s in 0..n {
                let sc = &cols[s * patch * opx..(s + 1) * patch * opx];
                let sg = &g[s * geom.cout * opx..(s + 1) * geom.cout * opx];
                matmul_a_bt_acc(sg, sc, geom.cout, patch, opx, gw);
            }
        });
        self.acc_with(grads, x, |gx| {
            let mut dcols = vec![T::zero(); patch * opx];
            for s in 0..n {
                dcols.iter_mut().for_each(|v| *v = T::zero());
                let sg = &g[s * geom.cout * opx..(s + 1) * geom.cout * opx];
                for co in 0..geom.cout {
                    let grow = &sg[co * opx..(co + 1) * opx];
                    for p in 0..patch {
                        axpy(wd[co * patch + p], grow, &mut dcols[p * opx..(p + 1) * opx]);
                    }
                }
                col2im_acc(&dcols, geom, &mut gx[s * in_sz..(s + 1) * in_sz]);
            }
        });
    }
}

fn check_unit_rows<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    for i in 0..t.rows() {
        let n = dot(t.row(i), t.row(i)).sqrt().as_f64();
        if (n - 1.0).abs() > 1e-4 {
            return Err(Error::invalid(format!("{what} row {i} has norm {n:.6}; rows must be L2-normalized")));
        }
    }
    Ok(())
}

fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let opx = g.out_px();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let p = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[p * opx..(p + 1) * opx];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < g.h && (ix as usize) < g.w {
                            img[(ci * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im_acc<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let opx = g.out_px();
    for ci in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let p = (ci * g.k + ky) * g.k + kx;
                let src = &cols[p * opx..(p + 1) * opx];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            img[(ci * g.h + iy as usize) * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{assert_grad_close, central_difference};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(readout)/d(input) of `build` against central differences.
    fn check(shape: &[usize], seed: u64, build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = rand_tensor(&mut rng, shape);
        let mut g = Graph::new();
        let xv = g.param(x0.clone());
        let out = build(&mut g, xv);
        let analytic = g.backward(out).unwrap().get(xv).unwrap().to_vec();
        let numeric = central_difference(x0.data(), 1e-4, |xs| {
            let mut g = Graph::new();
            let v = g.param(Tensor::new(shape.to_vec(), xs.to_vec()).unwrap());
            let o = build(&mut g, v);
            g.value(o).item()
        });
        assert_grad_close(&analytic, &numeric, 1e-3);
    }

    fn readout(g: &mut Graph<f64>, v: Var) -> Var {
        let n = g.value(v).len();
        let w: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.4).collect();
        g.weighted_sum(v, &w).unwrap()
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        check(&[2, 2, 5, 5], 1, |g, x| {
            let wv = g.input(w.clone());
            let bv = g.input(b.clone());
            let y = g.conv2d(x, wv, bv, 2, 1).unwrap();
            let y = g.silu(y);
            readout(g, y)
        });
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        check(&[3, 2, 3, 3], 2, |g, wv| {
            let xv = g.input(x.clone());
            let bv = g.input(b.clone());
            let y = g.conv2d(xv, wv, bv, 1, 1).unwrap();
            readout(g, y)
        });
    }

    #[test]
    fn pooling_and_reshape_gradients() {
        check(&[2, 3, 4, 4], 5, |g, x| {
            let p = g.avg_pool(x, 2).unwrap();
            let f = g.flatten(p).unwrap();
            readout(g, f)
        });
        check(&[2, 3, 4, 4], 6, |g, x| {
            let p = g.global_avg_pool(x).unwrap();
            readout(g, p)
        });
    }

    #[test]
    fn dense_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        check(&[6, 4], 7, |g, x| {
            let wv = g.input(w.clone());
            let bv = g.input(bias.clone());
            let h = g.linear(x, wv, bv).unwrap();
            let m = g.group_mean(h, 3).unwrap();
            let cat = g.concat_cols(h, m).unwrap();
            let s = g.scale(cat, 0.7);
            readout(g, s)
        });
        check(&[5, 4], 8, |g, x| {
            let n = g.l2_normalize(x).unwrap();
            readout(g, n)
        });
    }

    #[test]
    fn loss_gradients() {
        check(&[4, 3], 11, |g, x| g.cross_entropy(x, &[0, 2, 1, 2]).unwrap());
        let t = Tensor::new(vec![2, 3], vec![0.2, 0.5, 0.3, 1.0, 0.0, 0.0]).unwrap();
        check(&[2, 3], 12, |g, x| g.soft_cross_entropy(x, &t).unwrap());
        let target = Tensor::new(vec![2, 2], vec![0.1, -0.3, 0.5, 0.0]).unwrap();
        check(&[2, 2], 13, |g, x| g.mse(x, &target).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let k = rand_tensor(&mut rng, &[4, 3]);
        check(&[4, 3], 15, |g, x| {
            let q = g.l2_normalize(x).unwrap();
            let kv = g.param(k.clone());
            let kn = g.l2_normalize(kv).unwrap();
            g.info_nce(q, kn, 0.5).unwrap()
        });
    }

    #[test]
    fn info_nce_rejects_unnormalized_rows() {
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::new(vec![2, 2], vec![2.0, 0.0, 0.0, 1.0]).unwrap());
        let err = g.info_nce(q, q, 1.0).unwrap_err();
        assert!(err.to_string().contains("L2-normalized"));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let b = g.param(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
        let y = g.matmul(a, b).unwrap();
        let s = g.weighted_sum(y, &[1.0]).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &[1.0, 2.0]);
    }
}
