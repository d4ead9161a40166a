//! Reverse-mode differentiation over a linear tape of dense `f64` matrices.
//!
//! Only the handful of fused operations the transformer needs are provided.
//! Nodes that cannot reach a trainable leaf are marked `grad = false` and
//! skipped entirely during the backward sweep, so a frozen weight costs one
//! input-gradient product and never a weight-gradient product.

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

pub type Mat = Array2<f64>;

/// Parameter groups; the unit of freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Backbone,
    LangAdapter,
    TaskAdapter,
    LangPrompt,
    TaskPrompt,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Backbone,
        Group::LangAdapter,
        Group::TaskAdapter,
        Group::LangPrompt,
        Group::TaskPrompt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::Backbone => "backbone",
            Group::LangAdapter => "lang_adapter",
            Group::TaskAdapter => "task_adapter",
            Group::LangPrompt => "lang_prompt",
            Group::TaskPrompt => "task_prompt",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: Group,
    pub index: u32,
}

impl ParamKey {
    pub fn new(group: Group, index: usize) -> Self {
        Self {
            group,
            index: index as u32,
        }
    }
}

/// The set of parameter groups that receive gradients.
pub type FreezeMask = BTreeSet<Group>;

pub type Gradients = BTreeMap<ParamKey, Mat>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Default)]
pub struct AttnMask {
    pub causal: bool,
    /// `false` marks a key position that may not be attended to.
    pub key_valid: Option<Vec<bool>>,
}

enum Op {
    Leaf(Option<ParamKey>),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        probs: Vec<Mat>,
    },
    ConcatRows(usize, usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Mat,
    },
}

struct Node<'a> {
    value: Cow<'a, Mat>,
    op: Op,
    grad: bool,
}

pub const LN_EPS: f64 = 1e-6;

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    trainable: FreezeMask,
}

impl<'a> Tape<'a> {
    pub fn new(trainable: FreezeMask) -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            trainable,
        }
    }

    /// A tape that records values only.
    pub fn inference() -> Self {
        Self::new(FreezeMask::new())
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    fn push(&mut self, value: Cow<'a, Mat>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn g(&self, i: usize) -> bool {
        self.nodes[i].grad
    }

    fn val(&self, i: usize) -> &Mat {
        &self.nodes[i].value
    }

    pub fn param(&mut self, key: ParamKey, value: &'a Mat) -> Var {
        let grad = self.trainable.contains(&key.group);
        self.push(Cow::Borrowed(value), Op::Leaf(Some(key)), grad)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Cow::Owned(value), Op::Leaf(None), false)
    }

    /// Row lookup into `table`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.val(table.0);
        let mut out = Mat::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t.row(id));
        }
        let grad = self.g(table.0);
        self.push(
            Cow::Owned(out),
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            grad,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a.0).dot(self.val(b.0));
        let grad = self.g(a.0) || self.g(b.0);
        self.push(Cow::Owned(out), Op::MatMul(a.0, b.0), grad)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a.0).dot(&self.val(b.0).t());
        let grad = self.g(a.0) || self.g(b.0);
        self.push(Cow::Owned(out), Op::MatMulT(a.0, b.0), grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.val(a.0) + self.val(b.0);
        let grad = self.g(a.0) || self.g(b.0);
        self.push(Cow::Owned(out), Op::Add(a.0, b.0), grad)
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let out = self.val(a.0) + self.val(bias.0);
        let grad = self.g(a.0) || self.g(bias.0);
        self.push(Cow::Owned(out), Op::AddRow(a.0, bias.0), grad)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.val(a.0) * factor;
        let grad = self.g(a.0);
        self.push(Cow::Owned(out), Op::Scale(a.0, factor), grad)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.val(a.0).mapv(|x| x.max(0.0));
        let grad = self.g(a.0);
        self.push(Cow::Owned(out), Op::Relu(a.0), grad)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let out = ndarray::concatenate(Axis(0), &[self.val(a.0).view(), self.val(b.0).view()])
            .expect("concat_rows: column mismatch");
        let grad = self.g(a.0) || self.g(b.0);
        self.push(Cow::Owned(out), Op::ConcatRows(a.0, b.0), grad)
    }

    /// Row-wise layer normalization with `1 × d` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.val(x.0);
        let (n, d) = xv.dim();
        let mut xhat = Mat::zeros((n, d));
        let mut inv_std = Vec::with_capacity(n);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.val(gain.0) + self.val(bias.0);
        let grad = self.g(x.0) || self.g(gain.0) || self.g(bias.0);
        self.push(
            Cow::Owned(out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            grad,
        )
    }

    /// Multi-head scaled dot-product attention. `q` is `n × d`, `k` and `v`
    /// are `m × d`; heads split the columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: &AttnMask) -> Var {
        let (qv, kv, vv) = (self.val(q.0), self.val(k.0), self.val(v.0));
        let (n, d) = qv.dim();
        let m = kv.nrows();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((n, d));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut p = qv.slice(cols).dot(&kv.slice(cols).t());
            for i in 0..n {
                let mut row = p.row_mut(i);
                let mut max = f64::NEG_INFINITY;
                for j in 0..m {
                    let visible = !(mask.causal && j > i)
                        && mask.key_valid.as_ref().is_none_or(|kvld| kvld[j]);
                    if visible {
                        row[j] *= scale;
                        max = max.max(row[j]);
                    } else {
                        row[j] = f64::NEG_INFINITY;
                    }
                }
                if max == f64::NEG_INFINITY {
                    row.fill(0.0);
                    continue;
                }
                let mut sum = 0.0;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                row.mapv_inplace(|x| x / sum);
            }
            out.slice_mut(cols).assign(&p.dot(&vv.slice(cols)));
            probs.push(p);
        }
        let grad = self.g(q.0) || self.g(k.0) || self.g(v.0);
        self.push(
            Cow::Owned(out),
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                heads,
                probs,
            },
            grad,
        )
    }

    /// Summed token cross-entropy (a `1 × 1` node); `None` targets are ignored.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lv = self.val(logits.0);
        let mut probs = Mat::zeros(lv.dim());
        let mut total = 0.0;
        for (r, row) in lv.rows().into_iter().enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut sum = 0.0;
            for (c, &x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[[r, c]] = e;
                sum += e;
            }
            probs.row_mut(r).mapv_inplace(|e| e / sum);
            if let Some(t) = targets[r] {
                total += sum.ln() + max - row[t];
            }
        }
        let grad = self.g(logits.0);
        self.push(
            Cow::Owned(Mat::from_elem((1, 1), total)),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            grad,
        )
    }

    /// Gradients of the scalar `loss` with respect to every trainable leaf.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut out = Gradients::new();
        if !self.g(loss.0) {
            return out;
        }
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::ones(self.val(loss.0).dim()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf(key) => {
                    // A parameter may enter the graph through several
                    // leaves (the tied embedding does); sum them.
                    if let Some(key) = key {
                        match out.get_mut(key) {
                            Some(acc) => *acc += &dy,
                            None => {
                                out.insert(*key, dy);
                            }
                        }
                    }
                }
                Op::Gather { table, ids } => {
                    let mut dt = Mat::zeros(self.val(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &dy.row(r);
                    }
                    accum(&mut grads, *table, dt);
                }
                Op::MatMul(a, b) => {
                    if self.g(*a) {
                        accum(&mut grads, *a, dy.dot(&self.val(*b).t()));
                    }
                    if self.g(*b) {
                        accum(&mut grads, *b, self.val(*a).t().dot(&dy));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.g(*a) {
                        accum(&mut grads, *a, dy.dot(self.val(*b)));
                    }
                    if self.g(*b) {
                        accum(&mut grads, *b, dy.t().dot(self.val(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.g(*b) {
                        accum(&mut grads, *b, dy.clone());
                    }
                    if self.g(*a) {
                        accum(&mut grads, *a, dy);
                    }
                }
                Op::AddRow(a, bias) => {
                    if self.g(*bias) {
                        accum(&mut grads, *bias, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.g(*a) {
                        accum(&mut grads, *a, dy);
                    }
                }
                Op::Scale(a, factor) => accum(&mut grads, *a, dy * *factor),
                Op::Relu(a) => {
                    let mut dx = dy;
                    ndarray::Zip::from(&mut dx)
                        .and(self.val(*a))
                        .for_each(|d, &x| {
                            if x <= 0.0 {
                                *d = 0.0;
                            }
                        });
                    accum(&mut grads, *a, dx);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.val(*a).nrows();
                    if self.g(*a) {
                        accum(&mut grads, *a, dy.slice(s![..na, ..]).to_owned());
                    }
                    if self.g(*b) {
                        accum(&mut grads, *b, dy.slice(s![na.., ..]).to_owned());
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    if self.g(*bias) {
                        accum(&mut grads, *bias, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.g(*gain) {
                        let dg = (&dy * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                        accum(&mut grads, *gain, dg);
                    }
                    if self.g(*x) {
                        let dxhat = &dy * self.val(*gain);
                        let d = dxhat.ncols() as f64;
                        let mut dx = Mat::zeros(dxhat.dim());
                        for r in 0..dxhat.nrows() {
                            let dr = dxhat.row(r);
                            let xr = xhat.row(r);
                            let mean_d = dr.sum() / d;
                            let mean_dx = dr.dot(&xr) / d;
                            for c in 0..dr.len() {
                                dx[[r, c]] = inv_std[r] * (dr[c] - mean_d - xr[c] * mean_dx);
                            }
                        }
                        accum(&mut grads, *x, dx);
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = self.g(*q).then(|| Mat::zeros(qv.dim()));
                    let mut dk = self.g(*k).then(|| Mat::zeros(kv.dim()));
                    let mut dv = self.g(*v).then(|| Mat::zeros(vv.dim()));
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let doh = dy.slice(cols);
                        if let Some(dv) = dv.as_mut() {
                            dv.slice_mut(cols).assign(&p.t().dot(&doh));
                        }
                        if dq.is_none() && dk.is_none() {
                            continue;
                        }
                        let dp = doh.dot(&vv.slice(cols).t());
                        let mut ds = &dp * p;
                        for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot: f64 = ds_row.sum();
                            ds_row.zip_mut_with(&p_row, |s, &pp| *s -= pp * dot);
                        }
                        ds *= scale;
                        if let Some(dq) = dq.as_mut() {
                            dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                        }
                    }
                    if let Some(g) = dq {
                        accum(&mut grads, *q, g);
                    }
                    if let Some(g) = dk {
                        accum(&mut grads, *k, g);
                    }
                    if let Some(g) = dv {
                        accum(&mut grads, *v, g);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = dy[[0, 0]];
                    let mut dl = probs.clone();
                    for (r, t) in targets.iter().enumerate() {
                        match t {
                            Some(t) => dl[[r, *t]] -= 1.0,
                            None => dl.row_mut(r).fill(0.0),
                        }
                    }
                    dl *= scale;
                    accum(&mut grads, *logits, dl);
                }
            }
        }
        out
    }
}

fn accum(grads: &mut [Option<Mat>], i: usize, g: Mat) {
    match &mut grads[i] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences over every entry of every parameter.
    fn check<F>(params: Vec<Mat>, f: F)
    where
        F: for<'a> Fn(&mut Tape<'a>, &[Var]) -> Var,
    {
        let mask: FreezeMask = [Group::TaskAdapter].into_iter().collect();
        let analytic = {
            let mut tape = Tape::new(mask.clone());
            let vars: Vec<Var> = params
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(ParamKey::new(Group::TaskAdapter, i), p))
                .collect();
            let loss = f(&mut tape, &vars);
            tape.backward(loss)
        };
        let eval = |ps: &[Mat]| {
            let mut tape = Tape::inference();
            let vars: Vec<Var> = ps
                .iter()
                .enumerate()
                .map(|(i, p)| tape.param(ParamKey::new(Group::TaskAdapter, i), p))
                .collect();
            let loss = f(&mut tape, &vars);
            tape.value(loss)[[0, 0]]
        };
        let h = 1e-5;
        for (pi, p) in params.iter().enumerate() {
            for idx in 0..p.len() {
                let (r, c) = (idx / p.ncols(), idx % p.ncols());
                let mut plus = params.clone();
                plus[pi][[r, c]] += h;
                let mut minus = params.clone();
                minus[pi][[r, c]] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[&ParamKey::new(Group::TaskAdapter, pi)][[r, c]];
                let denom = a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    (a - numeric).abs() / denom < 1e-5,
                    "param {pi} [{r},{c}]: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    /// Fixed-weight linear readout to a `1 × 1` scalar.
    fn readout<'a>(tape: &mut Tape<'a>, x: Var) -> Var {
        let (n, c) = tape.value(x).dim();
        let w = tape.constant(Mat::from_shape_fn((c, 1), |(i, _)| 0.3 + i as f64 * 0.1));
        let col = tape.matmul(x, w);
        let ones = tape.constant(Mat::ones((1, n)));
        tape.matmul(ones, col)
    }

    #[test]
    fn gradcheck_matmul_layernorm_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = vec![
            random(&mut rng, 3, 4),
            random(&mut rng, 4, 5),
            random(&mut rng, 1, 5),
            random(&mut rng, 1, 5),
        ];
        check(params, |t, v| {
            let h = t.matmul(v[0], v[1]);
            let n = t.layer_norm(h, v[2], v[3]);
            let r = t.relu(n);
            let r = t.scale(r, 1.7);
            readout(t, r)
        });
    }

    #[test]
    fn gradcheck_attention_and_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = vec![
            random(&mut rng, 3, 4),
            random(&mut rng, 5, 4),
            random(&mut rng, 5, 4),
            random(&mut rng, 4, 6),
        ];
        let mask = AttnMask {
            causal: true,
            key_valid: Some(vec![true, true, false, true, true]),
        };
        check(params, move |t, v| {
            let a = t.attention(v[0], v[1], v[2], 2, &mask);
            let logits = t.matmul(a, v[3]);
            t.cross_entropy_sum(logits, &[Some(1), None, Some(5)])
        });
    }

    #[test]
    fn gradcheck_gather_concat_bias_matmul_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = vec![
            random(&mut rng, 6, 3),
            random(&mut rng, 2, 3),
            random(&mut rng, 1, 3),
        ];
        check(params, |t, v| {
            let g = t.gather(v[0], &[4, 1, 4]);
            let c = t.concat_rows(v[1], g);
            let b = t.add_row(c, v[2]);
            let s = t.add(b, c);
            let logits = t.matmul_t(s, v[0]);
            t.cross_entropy_sum(logits, &[Some(0), Some(2), Some(3), None, Some(5)])
        });
    }

    #[test]
    fn repeated_leaves_accumulate() {
        // y = x w with x and w the same parameter; d/dw sum(softmax-ce) must see both uses.
        let w = Mat::from_shape_vec((2, 2), vec![0.3, -0.2, 0.1, 0.4]).unwrap();
        let key = ParamKey::new(Group::TaskPrompt, 0);
        let loss_at = |w: &Mat| {
            let mut tape = Tape::new([Group::TaskPrompt].into_iter().collect());
            let a = tape.param(key, w);
            let b = tape.param(key, w);
            let y = tape.matmul(a, b);
            let l = tape.cross_entropy_sum(y, &[Some(1), Some(0)]);
            (tape.value(l)[[0, 0]], tape.backward(l))
        };
        let (_, g) = loss_at(&w);
        let g = &g[&key];
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut wp = w.clone();
                wp[[i, j]] += h;
                let mut wm = w.clone();
                wm[[i, j]] -= h;
                let num = (loss_at(&wp).0 - loss_at(&wm).0) / (2.0 * h);
                assert!((num - g[[i, j]]).abs() < 1e-7, "{i},{j}: {num} vs {}", g[[i, j]]);
            }
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let w = Mat::ones((2, 2));
        let x = Mat::ones((1, 2));
        let mut tape = Tape::new([Group::TaskPrompt].into_iter().collect());
        let wv = tape.param(ParamKey::new(Group::Backbone, 0), &w);
        let xv = tape.param(ParamKey::new(Group::TaskPrompt, 0), &x);
        let y = tape.matmul(xv, wv);
        let loss = tape.cross_entropy_sum(y, &[Some(0)]);
        let g = tape.backward(loss);
        assert_eq!(g.len(), 1);
        assert!(g.contains_key(&ParamKey::new(Group::TaskPrompt, 0)));
    }

    #[test]
    fn fully_masked_row_is_zero() {
        let q = Mat::ones((1, 2));
        let mut tape = Tape::inference();
        let qv = tape.constant(q.clone());
        let kv = tape.constant(q.clone());
        let mask = AttnMask {
            causal: false,
            key_valid: Some(vec![false]),
        };
        let out = tape.attention(qv, kv, kv, 1, &mask);
        assert!(tape.value(out).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn cross_entropy_of_zero_logits_is_log_vocab() {
        let mut tape = Tape::inference();
        let l = tape.constant(Mat::zeros((2, 7)));
        let loss = tape.cross_entropy_sum(l, &[Some(3), Some(0)]);
        let v = tape.value(loss)[[0, 0]];
        assert!((v - 2.0 * 7f64.ln()).abs() < 1e-12);
    }
}
