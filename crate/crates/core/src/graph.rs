//! Reverse-mode differentiation over row-major `f64` matrices.
//!
//! A [`Graph`] records one forward pass. Every node holds its value; leaves
//! are either constants or references into a [`ParamStore`]. Calling
//! [`Graph::backward`] on a scalar node returns one gradient per parameter.
//!
//! Loss nodes compute their own input gradients at construction time (the
//! closed forms live in [`crate::losses`]) and only scale them on the way back.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Mat)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Layout of a batched multi-head attention call. Queries are stacked as
/// `batch * q_len` rows and keys/values as `batch * k_len` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Number of valid leading keys per batch item; `None` means all.
    pub key_lens: Option<Vec<usize>>,
}

impl AttnSpec {
    fn valid_keys(&self, b: usize) -> usize {
        self.key_lens.as_ref().map_or(self.k_len, |l| l[b])
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttnSpec,
        probs: Vec<Mat>,
    },
    Gather {
        parts: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    GroupLinear {
        x: Var,
        w: Var,
        b: Var,
        groups: usize,
    },
    Loss {
        inputs: Vec<Var>,
        grads: Vec<Mat>,
    },
    Sum(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

const LN_EPS: f64 = 1e-6;

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// The graph variable for a stored parameter (created once per graph).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Var {
        let id = self
            .store
            .id(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.param(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// `x + bias` with a `1 x n` bias broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let out = self.value(x) + self.value(bias);
        self.push(out, Op::AddRow(x, bias))
    }

    /// `x · w + b`, with `w: in x out` and `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x) * k;
        self.push(out, Op::Scale(x, k))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        self.push(out, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    /// Row-wise layer normalization with affine `1 x n` gamma/beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.dim();
        let mut xhat = Mat::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (c, v) in row.iter().enumerate() {
                xhat[[r, c]] = (v - mean) * is;
            }
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
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

    /// Scaled dot-product attention, split into `spec.heads` heads along the
    /// columns. Keys past `key_lens[b]` get zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttnSpec) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        assert_eq!(qv.nrows(), spec.batch * spec.q_len, "attention query rows");
        assert_eq!(kv.nrows(), spec.batch * spec.k_len, "attention key rows");
        assert_eq!(d % spec.heads, 0, "attention width not divisible by heads");
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Mat::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(spec.batch * spec.heads);
        for b in 0..spec.batch {
            let nk = spec.valid_keys(b);
            let qrows = b * spec.q_len..(b + 1) * spec.q_len;
            let krows = b * spec.k_len..b * spec.k_len + nk;
            for h in 0..spec.heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![qrows.clone(), cols.clone()]);
                let kh = kv.slice(s![krows.clone(), cols.clone()]);
                let vh = vv.slice(s![krows.clone(), cols.clone()]);
                let mut p = qh.dot(&kh.t()) * scale;
                softmax_rows_inplace(&mut p);
                let o = p.dot(&vh);
                out.slice_mut(s![qrows.clone(), cols]).assign(&o);
                probs.push(p);
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
        )
    }

    /// Assemble a matrix whose row `r` is row `index[r].1` of `parts[index[r].0]`.
    pub fn gather(&mut self, parts: &[Var], index: Vec<(usize, usize)>) -> Var {
        let cols = self.value(parts[0]).ncols();
        let mut out = Mat::zeros((index.len(), cols));
        for (r, &(p, row)) in index.iter().enumerate() {
            out.row_mut(r).assign(&self.value(parts[p]).row(row));
        }
        self.push(
            out,
            Op::Gather {
                parts: parts.to_vec(),
                index,
            },
        )
    }

    /// Rows `range` of `x`.
    pub fn rows(&mut self, x: Var, rows: impl IntoIterator<Item = usize>) -> Var {
        let index = rows.into_iter().map(|r| (0, r)).collect();
        self.gather(&[x], index)
    }

    /// Row-wise L2 normalization. Fails if any row has zero norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let norms: Vec<f64> = xv
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt())
            .collect();
        if norms.iter().any(|&n| n <= 0.0 || !n.is_finite()) {
            return Err(Error::DegenerateEmbedding);
        }
        let mut out = xv.clone();
        for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
            row /= n;
        }
        Ok(self.push(out, Op::L2Normalize { x, norms }))
    }

    /// Per-group projection. `x` holds `batch * groups` rows of width `d`,
    /// `w` is `(groups * d) x g` and `b` is `1 x c` with `c <= groups * g`.
    /// Output is `batch x c`; group `k` produces columns `k*g .. k*g+g`.
    pub fn group_linear(&mut self, x: Var, w: Var, b: Var, groups: usize) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let d = xv.ncols();
        let g = wv.ncols();
        let c = bv.ncols();
        assert_eq!(xv.nrows() % groups, 0);
        assert_eq!(wv.nrows(), groups * d);
        assert!(c <= groups * g);
        let batch = xv.nrows() / groups;
        let mut out = Mat::zeros((batch, c));
        for bi in 0..batch {
            for k in 0..groups {
                let ncls = g.min(c.saturating_sub(k * g));
                if ncls == 0 {
                    break;
                }
                let xr = xv.row(bi * groups + k);
                let wk = wv.slice(s![k * d..(k + 1) * d, ..ncls]);
                let o = xr.dot(&wk);
                out.slice_mut(s![bi, k * g..k * g + ncls]).assign(&o);
            }
        }
        out += bv;
        self.push(out, Op::GroupLinear { x, w, b, groups })
    }

    /// A scalar node with externally computed input gradients.
    pub fn loss(&mut self, value: f64, inputs: Vec<Var>, grads: Vec<Mat>) -> Var {
        assert_eq!(inputs.len(), grads.len());
        for (i, g) in inputs.iter().zip(&grads) {
            assert_eq!(self.value(*i).dim(), g.dim(), "loss gradient shape");
        }
        self.push(
            Mat::from_elem((1, 1), value),
            Op::Loss { inputs, grads },
        )
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        let total: f64 = terms.iter().map(|&t| self.scalar(t)).sum();
        self.push(Mat::from_elem((1, 1), total), Op::Sum(terms.to_vec()))
    }

    /// Gradients of scalar `root` with respect to every parameter reached.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        let mut out = Gradients::default();

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    out.accumulate(*id, g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(x, bias) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, g);
                    acc(&mut grads, *bias, gb);
                }
                Op::Scale(x, k) => acc(&mut grads, *x, g * *k),
                Op::Gelu(x) => {
                    let gx = ndarray::Zip::from(&g)
                        .and(self.value(*x))
                        .map_collect(|&gi, &xi| gi * gelu_grad(xi));
                    acc(&mut grads, *x, gx);
                }
                Op::Relu(x) => {
                    let gx = ndarray::Zip::from(&g)
                        .and(self.value(*x))
                        .map_collect(|&gi, &xi| if xi > 0.0 { gi } else { 0.0 });
                    acc(&mut grads, *x, gx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gxhat = &g * self.value(*gamma);
                    let n = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.dim());
                    for r in 0..xhat.nrows() {
                        let gr = gxhat.row(r);
                        let xr = xhat.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gx = gr.dot(&xr) / n;
                        for c in 0..xhat.ncols() {
                            gx[[r, c]] = inv_std[r] * (gr[c] - mean_g - xr[c] * mean_gx);
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    spec,
                    probs,
                } => {
                    let (gq, gk, gv) = self.attention_backward(&g, *q, *k, *v, spec, probs);
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::Gather { parts, index } => {
                    let mut pg: Vec<Mat> = parts
                        .iter()
                        .map(|p| Mat::zeros(self.value(*p).dim()))
                        .collect();
                    for (r, &(p, row)) in index.iter().enumerate() {
                        let mut dst = pg[p].row_mut(row);
                        dst += &g.row(r);
                    }
                    for (p, gp) in parts.iter().zip(pg) {
                        acc(&mut grads, *p, gp);
                    }
                }
                Op::L2Normalize { x, norms } => {
                    let y = &node.value;
                    let mut gx = g.clone();
                    for r in 0..y.nrows() {
                        let dot = y.row(r).dot(&g.row(r));
                        for c in 0..y.ncols() {
                            gx[[r, c]] = (g[[r, c]] - y[[r, c]] * dot) / norms[r];
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::GroupLinear { x, w, b, groups } => {
                    let (gx, gw) = self.group_linear_backward(&g, *x, *w, *groups);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    acc(&mut grads, *b, gb);
                }
                Op::Loss { inputs, grads: lg } => {
                    let up = g[[0, 0]];
                    for (inp, gi) in inputs.iter().zip(lg) {
                        acc(&mut grads, *inp, gi * up);
                    }
                }
                Op::Sum(terms) => {
                    for t in terms {
                        acc(&mut grads, *t, g.clone());
                    }
                }
            }
        }
        out
    }

    fn attention_backward(
        &self,
        g: &Mat,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttnSpec,
        probs: &[Mat],
    ) -> (Mat, Mat, Mat) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / spec.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Mat::zeros(qv.dim());
        let mut gk = Mat::zeros(kv.dim());
        let mut gv = Mat::zeros(vv.dim());
        for b in 0..spec.batch {
            let nk = spec.valid_keys(b);
            let qrows = b * spec.q_len..(b + 1) * spec.q_len;
            let krows = b * spec.k_len..b * spec.k_len + nk;
            for h in 0..spec.heads {
                let p = &probs[b * spec.heads + h];
                let cols = h * dh..(h + 1) * dh;
                let go = g.slice(s![qrows.clone(), cols.clone()]);
                let qh = qv.slice(s![qrows.clone(), cols.clone()]);
                let kh = kv.slice(s![krows.clone(), cols.clone()]);
                let vh = vv.slice(s![krows.clone(), cols.clone()]);
                gv.slice_mut(s![krows.clone(), cols.clone()])
                    .assign(&p.t().dot(&go));
                let gp = go.dot(&vh.t());
                let mut gs = gp.clone();
                for r in 0..p.nrows() {
                    let dot = p.row(r).dot(&gp.row(r));
                    for c in 0..p.ncols() {
                        gs[[r, c]] = p[[r, c]] * (gp[[r, c]] - dot) * scale;
                    }
                }
                gq.slice_mut(s![qrows.clone(), cols.clone()])
                    .assign(&gs.dot(&kh));
                gk.slice_mut(s![krows.clone(), cols]).assign(&gs.t().dot(&qh));
            }
        }
        (gq, gk, gv)
    }

    fn group_linear_backward(&self, g: &Mat, x: Var, w: Var, groups: usize) -> (Mat, Mat) {
        let (xv, wv) = (self.value(x), self.value(w));
        let d = xv.ncols();
        let gdim = wv.ncols();
        let c = g.ncols();
        let batch = xv.nrows() / groups;
        let mut gx = Mat::zeros(xv.dim());
        let mut gw = Mat::zeros(wv.dim());
        for k in 0..groups {
            let ncls = gdim.min(c.saturating_sub(k * gdim));
            if ncls == 0 {
                break;
            }
            let wk = wv.slice(s![k * d..(k + 1) * d, ..ncls]);
            // rows of x belonging to group k, one per batch item
            let xk: Mat = ndarray::stack(
                Axis(0),
                &(0..batch).map(|bi| xv.row(bi * groups + k)).collect::<Vec<_>>(),
            )
            .expect("stack group rows");
            let gk: ArrayView2<f64> = g.slice(s![.., k * gdim..k * gdim + ncls]);
            let gxk = gk.dot(&wk.t());
            for bi in 0..batch {
                gx.row_mut(bi * groups + k).assign(&gxk.row(bi));
            }
            gw.slice_mut(s![k * d..(k + 1) * d, ..ncls])
                .assign(&xk.t().dot(&gk));
        }
        (gx, gw)
    }
}

fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_param: HashMap<ParamId, Mat>,
}

impl Gradients {
    fn accumulate(&mut self, id: ParamId, g: Mat) {
        match self.by_param.get_mut(&id) {
            Some(e) => *e += &g,
            None => {
                self.by_param.insert(id, g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(&id)
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

pub fn softmax_rows_inplace(m: &mut Mat) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Compare analytic gradients with central differences for a scalar
    /// function built from the graph.
    fn check<F>(store: &ParamStore, f: F)
    where
        F: Fn(&mut Graph) -> Var,
    {
        let mut g = Graph::new(store);
        let root = f(&mut g);
        let grads = g.backward(root);
        let h = 1e-5;
        for (id, name, value) in store.iter() {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(value.dim()));
            for idx in 0..value.len() {
                let (r, c) = (idx / value.ncols(), idx % value.ncols());
                let mut plus = store.clone();
                plus.get_mut(id)[[r, c]] += h;
                let mut minus = store.clone();
                minus.get_mut(id)[[r, c]] -= h;
                let fp = {
                    let mut g = Graph::new(&plus);
                    let v = f(&mut g);
                    g.scalar(v)
                };
                let fm = {
                    let mut g = Graph::new(&minus);
                    let v = f(&mut g);
                    g.scalar(v)
                };
                let num = (fp - fm) / (2.0 * h);
                let a = analytic[[r, c]];
                let err = (a - num).abs() / (a.abs().max(num.abs()).max(1e-6));
                assert!(err < 1e-5, "{name}[{r},{c}]: analytic {a} numeric {num}");
            }
        }
    }

    /// A fixed random readout turns any matrix into a scalar.
    fn readout(g: &mut Graph, x: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = rand_mat(&mut rng, g.value(x).nrows(), g.value(x).ncols());
        let value = (g.value(x) * &w).sum();
        g.loss(value, vec![x], vec![w])
    }

    #[test]
    fn linear_gelu_layernorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert("x", rand_mat(&mut rng, 3, 4));
        store.insert("w", rand_mat(&mut rng, 4, 5));
        store.insert("b", rand_mat(&mut rng, 1, 5));
        store.insert("gamma", rand_mat(&mut rng, 1, 5));
        store.insert("beta", rand_mat(&mut rng, 1, 5));
        check(&store, |g| {
            let x = g.param_by_name("x");
            let w = g.param_by_name("w");
            let b = g.param_by_name("b");
            let y = g.linear(x, w, b);
            let y = g.gelu(y);
            let (ga, be) = (g.param_by_name("gamma"), g.param_by_name("beta"));
            let y = g.layer_norm(y, ga, be);
            let y = g.scale(y, 0.7);
            readout(g, y, 9)
        });
    }

    #[test]
    fn attention_gradients_with_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.insert("q", rand_mat(&mut rng, 2 * 3, 4));
        store.insert("k", rand_mat(&mut rng, 2 * 5, 4));
        store.insert("v", rand_mat(&mut rng, 2 * 5, 4));
        check(&store, |g| {
            let (q, k, v) = (g.param_by_name("q"), g.param_by_name("k"), g.param_by_name("v"));
            let spec = AttnSpec {
                batch: 2,
                heads: 2,
                q_len: 3,
                k_len: 5,
                key_lens: Some(vec![5, 2]),
            };
            let o = g.attention(q, k, v, spec);
            readout(g, o, 3)
        });
    }

    #[test]
    fn gather_normalize_group_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.insert("x", rand_mat(&mut rng, 3, 4));
        store.insert("cls", rand_mat(&mut rng, 1, 4));
        store.insert("w", rand_mat(&mut rng, 2 * 4, 3));
        store.insert("b", rand_mat(&mut rng, 1, 5));
        check(&store, |g| {
            let (x, cls) = (g.param_by_name("x"), g.param_by_name("cls"));
            // two "samples" of two groups each: [cls, x0], [x1, x2]
            let rows = g.gather(&[x, cls], vec![(1, 0), (0, 0), (0, 1), (0, 2)]);
            let r = g.relu(rows);
            let (w, b) = (g.param_by_name("w"), g.param_by_name("b"));
            let logits = g.group_linear(r, w, b, 2);
            let n = g.l2_normalize(logits).unwrap();
            let s = readout(g, n, 4);
            let t = readout(g, rows, 5);
            g.sum(&[s, t])
        });
    }

    #[test]
    fn masked_keys_do_not_change_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_mat(&mut rng, 2, 4);
        let k = rand_mat(&mut rng, 5, 4);
        let v = rand_mat(&mut rng, 5, 4);
        let store = ParamStore::new();
        let run = |k_len: usize| {
            let mut g = Graph::new(&store);
            let (qv, kv, vv) = (
                g.constant(q.clone()),
                g.constant(k.slice(s![..k_len, ..]).to_owned()),
                g.constant(v.slice(s![..k_len, ..]).to_owned()),
            );
            let spec = AttnSpec {
                batch: 1,
                heads: 1,
                q_len: 2,
                k_len,
                key_lens: Some(vec![3]),
            };
            let o = g.attention(qv, kv, vv, spec);
            g.value(o).clone()
        };
        assert_eq!(run(3), run(5));
    }

    #[test]
    fn zero_row_is_degenerate() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::zeros((1, 3)));
        assert!(matches!(g.l2_normalize(x), Err(Error::DegenerateEmbedding)));
    }
}
