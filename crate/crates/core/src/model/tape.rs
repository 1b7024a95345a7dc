//! Reverse-mode autodiff over 2-D `f64` matrices, with just the operations a
//! pre-norm encoder-decoder needs.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

pub(crate) type NodeId = usize;

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Param(usize),
    Embed {
        table: NodeId,
        ids: Vec<usize>,
    },
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(NodeId),
    Dropout {
        x: NodeId,
        mask: Array2<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        probs: Vec<Array2<f64>>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Array2<f64>,
    },
}

struct Node {
    /// `None` for parameters, whose value lives in the parameter list.
    value: Option<Array2<f64>>,
    op: Op,
}

/// A computation graph over borrowed parameters.
pub(crate) struct Tape<'p> {
    params: &'p [Array2<f64>],
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

/// Sinusoidal position encoding for position `pos`, dimension `i`.
pub(crate) fn position_encoding(pos: usize, i: usize, dim: usize) -> f64 {
    let pair = (i / 2) as f64;
    let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
}

impl<'p> Tape<'p> {
    pub(crate) fn new(params: &'p [Array2<f64>]) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        self.nodes.len() - 1
    }

    pub(crate) fn value(&self, id: NodeId) -> ArrayView2<'_, f64> {
        match (&self.nodes[id].value, &self.nodes[id].op) {
            (Some(v), _) => v.view(),
            (None, Op::Param(i)) => self.params[*i].view(),
            _ => unreachable!("node without value"),
        }
    }

    pub(crate) fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub(crate) fn param(&mut self, index: usize) -> NodeId {
        if let Some(id) = self.param_nodes[index] {
            return id;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
        });
        let id = self.nodes.len() - 1;
        self.param_nodes[index] = Some(id);
        id
    }

    /// Rows of the embedding table plus sinusoidal positions.
    pub(crate) fn embed(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = self.value(table);
        let dim = t.ncols();
        let mut out = Array2::zeros((ids.len(), dim));
        for (p, &id) in ids.iter().enumerate() {
            for d in 0..dim {
                out[[p, d]] = t[[id, d]] + position_encoding(p, d, dim);
            }
        }
        self.push(out, Op::Embed { table, ids: ids.to_vec() })
    }

    pub(crate) fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub(crate) fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let v = &self.value(x) + &self.value(bias);
        self.push(v, Op::AddBias(x, bias))
    }

    pub(crate) fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub(crate) fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.value(a) + &self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub(crate) fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.to_owned();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let out = &(&xhat * &self.value(gamma)) + &self.value(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub(crate) fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(gelu);
        self.push(v, Op::Gelu(x))
    }

    /// `mask` holds 0 for dropped units and `1/(1-p)` for kept ones.
    pub(crate) fn dropout(&mut self, x: NodeId, mask: Array2<f64>) -> NodeId {
        let v = &self.value(x) * &mask;
        self.push(v, Op::Dropout { x, mask })
    }

    /// Multi-head scaled dot-product attention on already-projected inputs.
    pub(crate) fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool) -> NodeId {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (nq, dim) = qv.dim();
        let nk = kv.nrows();
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Array2::zeros((nq, dim));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut scores = qv.slice(cols).dot(&kv.slice(cols).t()) * scale;
            if causal {
                for i in 0..nq {
                    for j in (i + 1)..nk {
                        scores[[i, j]] = f64::NEG_INFINITY;
                    }
                }
            }
            softmax_rows(&mut scores);
            out.slice_mut(cols).assign(&scores.dot(&vv.slice(cols)));
            probs.push(scores);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax.
    pub(crate) fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let mut probs = self.value(logits).to_owned();
        softmax_rows(&mut probs);
        let loss: f64 = targets.iter().enumerate().map(|(i, &t)| -probs[[i, t]].max(f64::MIN_POSITIVE).ln()).sum();
        let v = Array2::from_elem((1, 1), loss);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    /// Back-propagates `seed * d(root)` and adds parameter gradients into `grads`.
    pub(crate) fn backward(&self, root: NodeId, seed: f64, grads: &mut [Array2<f64>]) {
        let mut g: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.value(root).dim();
        g[root] = Some(Array2::from_elem(shape, seed));

        fn acc(slot: &mut Option<Array2<f64>>, delta: Array2<f64>) {
            match slot {
                Some(existing) => *existing += &delta,
                None => *slot = Some(delta),
            }
        }

        for id in (0..=root).rev() {
            let Some(grad) = g[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Param(i) => grads[*i] += &grad,
                Op::Embed { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Array2::zeros(t.dim());
                    for (p, &row) in ids.iter().enumerate() {
                        let mut r = dt.row_mut(row);
                        r += &grad.row(p);
                    }
                    acc(&mut g[*table], dt);
                }
                Op::MatMul(a, b) => {
                    let da = grad.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&grad);
                    acc(&mut g[*a], da);
                    acc(&mut g[*b], db);
                }
                Op::AddBias(x, bias) => {
                    let db = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g[*bias], db);
                    acc(&mut g[*x], grad);
                }
                Op::Add(a, b) => {
                    acc(&mut g[*b], grad.clone());
                    acc(&mut g[*a], grad);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gam = self.value(*gamma);
                    let dgamma = (&grad * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dbeta = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &grad * &gam;
                    let n = xhat.ncols() as f64;
                    let mut dx = Array2::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_d = dh.sum() / n;
                        let mean_dx = dh.dot(&xh) / n;
                        Zip::from(dx.row_mut(r)).and(&dh).and(&xh).for_each(|o, &d, &h| {
                            *o = inv_std[r] * (d - mean_d - h * mean_dx);
                        });
                    }
                    acc(&mut g[*gamma], dgamma);
                    acc(&mut g[*beta], dbeta);
                    acc(&mut g[*x], dx);
                }
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(gelu_grad);
                    dx *= &grad;
                    acc(&mut g[*x], dx);
                }
                Op::Dropout { x, mask } => acc(&mut g[*x], &grad * mask),
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dim = qv.ncols();
                    let dh = dim / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut dq = Array2::zeros(qv.dim());
                    let mut dk = Array2::zeros(kv.dim());
                    let mut dv = Array2::zeros(vv.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let cols = s![.., h * dh..(h + 1) * dh];
                        let go = grad.slice(cols);
                        dv.slice_mut(cols).assign(&p.t().dot(&go));
                        let dp = go.dot(&vv.slice(cols).t());
                        let mut ds = p * &dp;
                        for (mut row, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = row.sum();
                            Zip::from(&mut row).and(&prow).for_each(|d, &pp| *d -= pp * dot);
                        }
                        ds *= scale;
                        dq.slice_mut(cols).assign(&ds.dot(&kv.slice(cols)));
                        dk.slice_mut(cols).assign(&ds.t().dot(&qv.slice(cols)));
                    }
                    acc(&mut g[*q], dq);
                    acc(&mut g[*k], dk);
                    acc(&mut g[*v], dv);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let s = grad[[0, 0]];
                    let mut d = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        d[[i, t]] -= 1.0;
                    }
                    d *= s;
                    acc(&mut g[*logits], d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Scalar test graph touching every op; returns (loss, grads).
    fn run(params: &[Array2<f64>], causal: bool) -> (f64, Vec<Array2<f64>>) {
        let mut t = Tape::new(params);
        let table = t.param(0);
        let x = t.embed(table, &[1, 3, 0, 3]);
        let gamma = t.param(1);
        let beta = t.param(2);
        let n = t.layer_norm(x, gamma, beta);
        let w = t.param(3);
        let b = t.param(4);
        let h = t.linear(n, w, b);
        let a = t.attention(h, n, x, 2, causal);
        let r = t.add(a, x);
        let ge = t.gelu(r);
        let mask = Array2::from_shape_fn((4, 4), |(i, j)| if (i + j) % 3 == 0 { 0.0 } else { 1.5 });
        let d = t.dropout(ge, mask);
        let wo = t.param(5);
        let logits = t.matmul(d, wo);
        let loss = t.cross_entropy(logits, &[2, 0, 4, 1]);
        let mut grads: Vec<Array2<f64>> = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        t.backward(loss, 1.0, &mut grads);
        (t.value(loss)[[0, 0]], grads)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = vec![
            rand_mat(&mut rng, 5, 4),
            rand_mat(&mut rng, 1, 4),
            rand_mat(&mut rng, 1, 4),
            rand_mat(&mut rng, 4, 4),
            rand_mat(&mut rng, 1, 4),
            rand_mat(&mut rng, 4, 5),
        ];
        for causal in [false, true] {
            let (_, grads) = run(&params, causal);
            for p in 0..params.len() {
                for idx in 0..params[p].len() {
                    let (r, c) = (idx / params[p].ncols(), idx % params[p].ncols());
                    let orig = params[p][[r, c]];
                    let h = 1e-6;
                    params[p][[r, c]] = orig + h;
                    let up = run(&params, causal).0;
                    params[p][[r, c]] = orig - h;
                    let down = run(&params, causal).0;
                    params[p][[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = grads[p][[r, c]];
                    let err = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                    assert!(err < 1e-5, "param {p} [{r},{c}] analytic {analytic} numeric {numeric}");
                }
            }
        }
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = rand_mat(&mut rng, 4, 6);
        let mut k = rand_mat(&mut rng, 4, 6);
        let v0 = rand_mat(&mut rng, 4, 6);
        let params: Vec<Array2<f64>> = Vec::new();
        let run = |k: &Array2<f64>, v: &Array2<f64>| {
            let mut t = Tape::new(&params);
            let (qi, ki, vi) = (t.leaf(q.clone()), t.leaf(k.clone()), t.leaf(v.clone()));
            let o = t.attention(qi, ki, vi, 3, true);
            t.value(o).to_owned()
        };
        let base = run(&k, &v0);
        k.row_mut(3).fill(9.0);
        let mut v1 = v0.clone();
        v1.row_mut(3).fill(-9.0);
        let moved = run(&k, &v1);
        assert_eq!(base.slice(s![..3, ..]), moved.slice(s![..3, ..]));
        assert_ne!(base.row(3), moved.row(3));
    }
}
