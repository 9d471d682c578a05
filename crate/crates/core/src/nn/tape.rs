//! Reverse-mode differentiation over coarse matrix operations.
//!
//! A [`Tape`] records each operation's output together with whatever the
//! backward rule needs. Parameters are referenced by [`ParamId`] and their
//! gradients are accumulated into a caller-owned [`Grads`].

use super::params::{Grads, ParamId, ParamStore};
use crate::tensor::{gemm, Axis, Layout, Mat};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Act {
    Relu,
    Sigmoid,
    Tanh,
    Silu,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Act {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Act::Relu => x.max(0.0),
            Act::Sigmoid => sigmoid(x),
            Act::Tanh => x.tanh(),
            Act::Silu => x * sigmoid(x),
        }
    }

    /// Derivative given the input `x` and output `y`.
    #[inline]
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Act::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Sigmoid => y * (1.0 - y),
            Act::Tanh => 1.0 - y * y,
            Act::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
        }
    }
}

enum Op {
    Const,
    Param(ParamId),
    Linear {
        x: Var,
        w: ParamId,
        b: Option<ParamId>,
    },
    Gather {
        table: ParamId,
        idx: Vec<usize>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Act(Var, Act),
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    RepeatRows {
        x: Var,
        per: usize,
    },
    MeanRows {
        x: Var,
        per: usize,
    },
    LayerNorm {
        x: Var,
        g: ParamId,
        b: ParamId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Scan {
        u: Var,
        decay: Var,
        groups: Vec<Vec<usize>>,
        reverse: bool,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        groups: Vec<Vec<usize>>,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let m = self.params.get(id).clone();
        self.push(m, Op::Param(id))
    }

    /// `x W + b` with `W` stored `in × out`.
    pub fn linear(&mut self, x: Var, w: ParamId, b: Option<ParamId>) -> Var {
        let xv = self.value(x);
        let wm = self.params.get(w);
        assert_eq!(xv.cols, wm.rows, "linear input width");
        let mut out = Mat::zeros(xv.rows, wm.cols);
        if let Some(b) = b {
            let bv = self.params.get(b);
            for r in 0..out.rows {
                out.row_mut(r).copy_from_slice(&bv.data);
            }
        }
        gemm(
            xv.rows,
            xv.cols,
            wm.cols,
            1.0,
            &xv.data,
            false,
            xv.cols,
            &wm.data,
            false,
            wm.cols,
            if b.is_some() { 1.0 } else { 0.0 },
            &mut out.data,
        );
        self.push(out, Op::Linear { x, w, b })
    }

    /// Rows of a parameter table selected by index.
    pub fn gather(&mut self, table: ParamId, idx: Vec<usize>) -> Var {
        let t = self.params.get(table);
        let mut out = Mat::zeros(idx.len(), t.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(i));
        }
        self.push(out, Op::Gather { table, idx })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "add shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let out = Mat {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        self.push(out, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert!(av.same_shape(bv), "mul shapes");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let out = Mat {
            rows: av.rows,
            cols: av.cols,
            data,
        };
        self.push(out, Op::Mul(a, b))
    }

    pub fn act(&mut self, x: Var, act: Act) -> Var {
        let out = self.value(x).map(|v| act.apply(v));
        self.push(out, Op::Act(x, act))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.rows, bv.rows, "concat rows");
        let cols = av.cols + bv.cols;
        let mut out = Mat::zeros(av.rows, cols);
        for r in 0..av.rows {
            let row = out.row_mut(r);
            row[..av.cols].copy_from_slice(av.row(r));
            row[av.cols..].copy_from_slice(bv.row(r));
        }
        self.push(out, Op::ConcatCols(a, b))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols, "slice out of range");
        let mut out = Mat::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r)
                .copy_from_slice(&xv.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x, start })
    }

    /// Each input row repeated `per` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, per: usize) -> Var {
        let xv = self.value(x);
        let mut out = Mat::zeros(xv.rows * per, xv.cols);
        for r in 0..out.rows {
            out.row_mut(r).copy_from_slice(xv.row(r / per));
        }
        self.push(out, Op::RepeatRows { x, per })
    }

    /// Mean over consecutive blocks of `per` rows.
    pub fn mean_rows(&mut self, x: Var, per: usize) -> Var {
        let xv = self.value(x);
        assert!(per > 0 && xv.rows % per == 0, "mean_rows block size");
        let mut out = Mat::zeros(xv.rows / per, xv.cols);
        let inv = 1.0 / per as f64;
        for r in 0..xv.rows {
            let src = xv.row(r);
            for (o, s) in out.row_mut(r / per).iter_mut().zip(src) {
                *o += s * inv;
            }
        }
        self.push(out, Op::MeanRows { x, per })
    }

    pub fn layer_norm(&mut self, x: Var, g: ParamId, b: ParamId) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (self.params.get(g), self.params.get(b));
        let c = xv.cols;
        let mut xhat = Mat::zeros(xv.rows, c);
        let mut inv_std = Vec::with_capacity(xv.rows);
        let mut out = Mat::zeros(xv.rows, c);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for j in 0..c {
                xh[j] = (row[j] - mean) * inv;
            }
            let o = out.row_mut(r);
            for j in 0..c {
                o[j] = xh[j] * gv.data[j] + bv.data[j];
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                g,
                b,
                xhat,
                inv_std,
            },
        )
    }

    /// Diagonal gated recurrence `h_t = d_t * h_{t-1} + (1 - d_t) * u_t` with
    /// `h` starting at zero, run along `axis` (backwards if `reverse`).
    pub fn scan(&mut self, u: Var, decay: Var, layout: Layout, axis: Axis, reverse: bool) -> Var {
        let (uv, dv) = (self.value(u), self.value(decay));
        assert!(uv.same_shape(dv), "scan shapes");
        assert_eq!(uv.rows, layout.rows(), "scan layout");
        let c = uv.cols;
        let groups = layout.groups(axis);
        let mut out = Mat::zeros(uv.rows, c);
        let mut h = vec![0.0; c];
        for g in &groups {
            h.iter_mut().for_each(|v| *v = 0.0);
            let order: Box<dyn Iterator<Item = &usize>> = if reverse {
                Box::new(g.iter().rev())
            } else {
                Box::new(g.iter())
            };
            for &r in order {
                let (ur, dr) = (uv.row(r), dv.row(r));
                for j in 0..c {
                    h[j] = dr[j] * h[j] + (1.0 - dr[j]) * ur[j];
                }
                out.row_mut(r).copy_from_slice(&h);
            }
        }
        self.push(
            out,
            Op::Scan {
                u,
                decay,
                groups,
                reverse,
            },
        )
    }

    /// Multi-head scaled dot-product self-attention within each group of
    /// rows along `axis`. Inputs are already projected; heads split columns.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Layout,
        axis: Axis,
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert!(qv.same_shape(kv) && qv.same_shape(vv), "attention shapes");
        assert_eq!(qv.rows, layout.rows(), "attention layout");
        let c = qv.cols;
        assert!(heads > 0 && c % heads == 0, "heads must divide width");
        let dh = c / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = layout.groups(axis);
        let mut out = Mat::zeros(qv.rows, c);
        let mut probs = Vec::new();
        for g in &groups {
            let l = g.len();
            for h in 0..heads {
                let off = h * dh;
                let base = probs.len();
                probs.resize(base + l * l, 0.0);
                for (i, &ri) in g.iter().enumerate() {
                    let qi = &qv.row(ri)[off..off + dh];
                    let p = &mut probs[base + i * l..base + (i + 1) * l];
                    let mut mx = f64::NEG_INFINITY;
                    for (j, &rj) in g.iter().enumerate() {
                        let kj = &kv.row(rj)[off..off + dh];
                        let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        p[j] = s;
                        mx = mx.max(s);
                    }
                    let mut z = 0.0;
                    for pj in p.iter_mut() {
                        *pj = (*pj - mx).exp();
                        z += *pj;
                    }
                    for pj in p.iter_mut() {
                        *pj /= z;
                    }
                    let o = &mut out.row_mut(ri)[off..off + dh];
                    for (j, &rj) in g.iter().enumerate() {
                        let vj = &vv.row(rj)[off..off + dh];
                        for d in 0..dh {
                            o[d] += p[j] * vj[d];
                        }
                    }
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                groups,
                heads,
                probs,
            },
        )
    }

    /// Attention weights of an attention node, laid out group-major, then
    /// head, then query row, then key.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Back-propagates `seed` (the gradient of a scalar objective with respect
    /// to `out`). Parameter gradients are added into `grads`; the returned
    /// vector holds the gradient of every node, including constants.
    pub fn backward(&self, out: Var, seed: Mat, grads: &mut Grads) -> Vec<Option<Mat>> {
        assert!(seed.same_shape(self.value(out)), "seed shape");
        let mut g: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        g[out.0] = Some(seed);

        fn acc(g: &mut [Option<Mat>], v: Var, d: Mat) {
            match &mut g[v.0] {
                Some(m) => m.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        }

        for idx in (0..=out.0).rev() {
            let dy = match g[idx].take() {
                Some(d) => d,
                None => continue,
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => grads.get_mut(*id).add_assign(&dy),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wm = self.params.get(*w);
                    {
                        let gw = grads.get_mut(*w);
                        gemm(
                            xv.cols, xv.rows, dy.cols, 1.0, &xv.data, true, xv.cols, &dy.data,
                            false, dy.cols, 1.0, &mut gw.data,
                        );
                    }
                    if let Some(b) = b {
                        let gb = grads.get_mut(*b);
                        for r in 0..dy.rows {
                            for (a, d) in gb.data.iter_mut().zip(dy.row(r)) {
                                *a += d;
                            }
                        }
                    }
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    gemm(
                        dy.rows, dy.cols, wm.rows, 1.0, &dy.data, false, dy.cols, &wm.data, true,
                        wm.cols, 0.0, &mut dx.data,
                    );
                    acc(&mut g, *x, dx);
                }
                Op::Gather { table, idx } => {
                    let gt = grads.get_mut(*table);
                    for (r, &i) in idx.iter().enumerate() {
                        for (a, d) in gt.row_mut(i).iter_mut().zip(dy.row(r)) {
                            *a += d;
                        }
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut g, *b, dy.clone());
                    acc(&mut g, *a, dy.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = Mat {
                        rows: dy.rows,
                        cols: dy.cols,
                        data: dy.data.iter().zip(&bv.data).map(|(d, y)| d * y).collect(),
                    };
                    let db = Mat {
                        rows: dy.rows,
                        cols: dy.cols,
                        data: dy.data.iter().zip(&av.data).map(|(d, x)| d * x).collect(),
                    };
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Act(x, act) => {
                    let xv = self.value(*x);
                    let yv = &node.value;
                    let data = dy
                        .data
                        .iter()
                        .zip(xv.data.iter().zip(&yv.data))
                        .map(|(d, (&xi, &yi))| d * act.deriv(xi, yi))
                        .collect();
                    acc(
                        &mut g,
                        *x,
                        Mat {
                            rows: dy.rows,
                            cols: dy.cols,
                            data,
                        },
                    );
                }
                Op::ConcatCols(a, b) => {
                    let ac = self.value(*a).cols;
                    let bc = self.value(*b).cols;
                    let mut da = Mat::zeros(dy.rows, ac);
                    let mut db = Mat::zeros(dy.rows, bc);
                    for r in 0..dy.rows {
                        da.row_mut(r).copy_from_slice(&dy.row(r)[..ac]);
                        db.row_mut(r).copy_from_slice(&dy.row(r)[ac..]);
                    }
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..dy.rows {
                        dx.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    acc(&mut g, *x, dx);
                }
                Op::RepeatRows { x, per } => {
                    let xv = self.value(*x);
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..dy.rows {
                        for (a, d) in dx.row_mut(r / per).iter_mut().zip(dy.row(r)) {
                            *a += d;
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::MeanRows { x, per } => {
                    let xv = self.value(*x);
                    let inv = 1.0 / *per as f64;
                    let mut dx = Mat::zeros(xv.rows, xv.cols);
                    for r in 0..xv.rows {
                        for (a, d) in dx.row_mut(r).iter_mut().zip(dy.row(r / per)) {
                            *a = d * inv;
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    g: gid,
                    b: bid,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.params.get(*gid);
                    let c = dy.cols;
                    {
                        let gg = grads.get_mut(*gid);
                        for r in 0..dy.rows {
                            for j in 0..c {
                                gg.data[j] += dy.at(r, j) * xhat.at(r, j);
                            }
                        }
                    }
                    {
                        let gb = grads.get_mut(*bid);
                        for r in 0..dy.rows {
                            for j in 0..c {
                                gb.data[j] += dy.at(r, j);
                            }
                        }
                    }
                    let mut dx = Mat::zeros(dy.rows, c);
                    let mut dxh = vec![0.0; c];
                    for r in 0..dy.rows {
                        let xh = xhat.row(r);
                        let dyr = dy.row(r);
                        for j in 0..c {
                            dxh[j] = dyr[j] * gv.data[j];
                        }
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xh).map(|(a, b)| a * b).sum();
                        let k = inv_std[r] / c as f64;
                        let o = dx.row_mut(r);
                        for j in 0..c {
                            o[j] = k * (c as f64 * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                    acc(&mut g, *x, dx);
                }
                Op::Scan {
                    u,
                    decay,
                    groups,
                    reverse,
                } => {
                    let (uv, dv) = (self.value(*u), self.value(*decay));
                    let hv = &node.value;
                    let c = uv.cols;
                    let mut du = Mat::zeros(uv.rows, c);
                    let mut dd = Mat::zeros(uv.rows, c);
                    let mut carry = vec![0.0; c];
                    for grp in groups {
                        // processing order of the forward pass
                        let order: Vec<usize> = if *reverse {
                            grp.iter().rev().copied().collect()
                        } else {
                            grp.clone()
                        };
                        carry.iter_mut().for_each(|v| *v = 0.0);
                        for (pos, &r) in order.iter().enumerate().rev() {
                            let prev = if pos > 0 { Some(order[pos - 1]) } else { None };
                            let (ur, dr, dyr) = (uv.row(r), dv.row(r), dy.row(r));
                            for j in 0..c {
                                let gh = dyr[j] + carry[j];
                                let hprev = prev.map_or(0.0, |p| hv.at(p, j));
                                *du.at_mut(r, j) = gh * (1.0 - dr[j]);
                                *dd.at_mut(r, j) = gh * (hprev - ur[j]);
                                carry[j] = gh * dr[j];
                            }
                        }
                    }
                    acc(&mut g, *u, du);
                    acc(&mut g, *decay, dd);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    groups,
                    heads,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let c = qv.cols;
                    let dh = c / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Mat::zeros(qv.rows, c);
                    let mut dk = Mat::zeros(qv.rows, c);
                    let mut dv = Mat::zeros(qv.rows, c);
                    let mut base = 0;
                    let mut dp = Vec::new();
                    for grp in groups {
                        let l = grp.len();
                        dp.resize(l, 0.0);
                        for h in 0..*heads {
                            let off = h * dh;
                            for (i, &ri) in grp.iter().enumerate() {
                                let p = &probs[base + i * l..base + (i + 1) * l];
                                let dyi = &dy.row(ri)[off..off + dh];
                                let mut dot = 0.0;
                                for (j, &rj) in grp.iter().enumerate() {
                                    let vj = &vv.row(rj)[off..off + dh];
                                    dp[j] = dyi.iter().zip(vj).map(|(a, b)| a * b).sum();
                                    dot += p[j] * dp[j];
                                    let dvj = &mut dv.row_mut(rj)[off..off + dh];
                                    for d in 0..dh {
                                        dvj[d] += p[j] * dyi[d];
                                    }
                                }
                                for (j, &rj) in grp.iter().enumerate() {
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    if ds == 0.0 {
                                        continue;
                                    }
                                    for d in 0..dh {
                                        *dq.at_mut(ri, off + d) += ds * kv.at(rj, off + d);
                                        *dk.at_mut(rj, off + d) += ds * qv.at(ri, off + d);
                                    }
                                }
                            }
                            base += l * l;
                        }
                    }
                    acc(&mut g, *q, dq);
                    acc(&mut g, *k, dk);
                    acc(&mut g, *v, dv);
                }
            }
            g[idx] = Some(dy);
        }
        g
    }
}
