//! Reverse-mode differentiation over the small op set the model needs.
//!
//! A [`Tape`] records one forward pass. Parameters are borrowed, not copied;
//! [`Tape::backward`] accumulates their gradients into a caller-owned buffer.

use rand::Rng;

use crate::real::{rm, tr, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub stride: (usize, usize),
}

impl ConvGeom {
    /// Output size of a 3x3 convolution with padding 1.
    pub fn out_hw(&self) -> (usize, usize) {
        (self.h.div_ceil(self.stride.0), self.w.div_ceil(self.stride.1))
    }
}

enum Op<T> {
    Param(usize),
    Input,
    MatMul { a: Var, b: Var, b_transposed: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<T>, rstd: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom, cols: Vec<T> },
    Transpose(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Dropout { x: Var, mask: Vec<T> },
    WeightedCe { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<'p, T: Real> {
    params: &'p [Vec<T>],
    trainable: &'p [bool],
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    /// Per-position negative log-likelihoods of the last cross-entropy op.
    nll: Vec<(Var, Vec<T>)>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let a = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::ONE + t);
    let dy = half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * a * x * x);
    (y, dy)
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p [Vec<T>], trainable: &'p [bool]) -> Self {
        assert_eq!(params.len(), trainable.len());
        Tape { params, trainable, param_vars: vec![None; params.len()], nodes: Vec::new(), nll: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Param(i) => self.trainable[i],
            Op::Input => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[T] {
        match self.nodes[v.0].op {
            Op::Param(i) => &self.params[i],
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let cols = *s.last().expect("non-scalar");
        (s.iter().product::<usize>() / cols.max(1), cols)
    }

    pub fn param(&mut self, index: usize, shape: &[usize]) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        assert_eq!(shape.iter().product::<usize>(), self.params[index].len(), "param {index} shape");
        let v = self.push(shape.to_vec(), Vec::new(), Op::Param(index), &[]);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn input(&mut self, value: Vec<T>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), value.len(), "input shape");
        self.push(shape.to_vec(), value, Op::Input, &[])
    }

    /// `a [m,k] · b [k,n]`, or `a · bᵀ` for `b [n,k]` when `b_transposed`.
    pub fn matmul(&mut self, a: Var, b: Var, b_transposed: bool) -> Var {
        let (m, k) = self.rows_cols(a);
        let bs = self.shape(b).to_vec();
        assert_eq!(bs.len(), 2);
        let (bk, n) = if b_transposed { (bs[1], bs[0]) } else { (bs[0], bs[1]) };
        assert_eq!(k, bk, "matmul inner dims");
        let mut out = vec![T::ZERO; m * n];
        let b_strides = if b_transposed { tr(k) } else { rm(n) };
        T::gemm(m, k, n, T::ONE, self.value(a), rm(k), self.value(b), b_strides, T::ZERO, &mut out, rm(n));
        self.push(vec![m, n], out, Op::MatMul { a, b, b_transposed }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "add shapes");
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Add(a, b), &[a, b])
    }

    /// Adds the vector `b [n]` to every row of `a [m,n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let (_, n) = self.rows_cols(a);
        assert_eq!(self.value(b).len(), n, "add_row width");
        let bv = self.value(b);
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x + bv[i % n]).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::AddRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a, s), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu_parts(x).0).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Gelu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(T::ZERO)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Relu(a), &[a])
    }

    /// Normalizes each row of `x [m,n]`, then applies gain `g` and bias `b`.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var) -> Var {
        let (m, n) = self.rows_cols(x);
        let (xv, gv, bv) = (self.value(x), self.value(g), self.value(b));
        assert!(gv.len() == n && bv.len() == n, "layer_norm width");
        let eps = T::from_f64(LAYER_NORM_EPS);
        let nf = T::from_f64(n as f64);
        let mut xhat = vec![T::ZERO; m * n];
        let mut rstd = vec![T::ZERO; m];
        let mut out = vec![T::ZERO; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mut mean = T::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean / nf;
            let mut var = T::ZERO;
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            let rs = T::ONE / (var / nf + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let h = (row[j] - mean) * rs;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gv[j] + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::LayerNorm { x, g, b, xhat, rstd }, &[x, g, b])
    }

    /// Rows of `table [V,d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, d) = self.rows_cols(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "token id {i} out of range {v}");
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        self.push(vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// 3x3 convolution, padding 1. `x` is `[cin, h, w]`, `w` is
    /// `[cout, cin*9]`, `b` is `[cout]`; the result is `[cout, ho, wo]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 3, "conv input must be [c,h,w]");
        let (cout, kk) = self.rows_cols(w);
        let geom = ConvGeom { cin: xs[0], h: xs[1], w: xs[2], cout, stride };
        assert_eq!(kk, geom.cin * 9, "conv weight shape");
        let (ho, wo) = geom.out_hw();
        let p = ho * wo;
        let cols = im2col(self.value(x), &geom);
        let mut out = vec![T::ZERO; cout * p];
        let bv = self.value(b);
        for (c, row) in out.chunks_mut(p).enumerate() {
            row.fill(bv[c]);
        }
        T::gemm(cout, kk, p, T::ONE, self.value(w), rm(kk), &cols, rm(p), T::ONE, &mut out, rm(p));
        self.push(vec![cout, ho, wo], out, Op::Conv2d { x, w, b, geom, cols }, &[x, w, b])
    }

    /// Swaps the two axes of a matrix; `[c,h,w]` is treated as `[c, h*w]`.
    pub fn transpose(&mut self, a: Var) -> Var {
        let s = self.shape(a);
        let (m, n) = (s[0], s[1..].iter().product::<usize>());
        let av = self.value(a);
        let mut out = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        self.push(vec![n, m], out, Op::Transpose(a), &[a])
    }

    /// Multi-head scaled dot-product attention over projected `q [tq,d]`,
    /// `k [tk,d]`, `v [tk,d]`. With `causal`, query `i` sees keys `0..=i`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, causal: bool) -> Var {
        let (tq, d) = self.rows_cols(q);
        let (tk, dk) = self.rows_cols(k);
        assert!(d == dk && self.rows_cols(v) == (tk, d) && d % heads == 0, "attention shapes");
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![T::ZERO; heads * tq * tk];
        let mut out = vec![T::ZERO; tq * d];
        for h in 0..heads {
            let p = &mut probs[h * tq * tk..(h + 1) * tq * tk];
            T::gemm(tq, dh, tk, scale, &qv[h * dh..], rm(d), &kv[h * dh..], tr(d), T::ZERO, p, rm(tk));
            for i in 0..tq {
                let row = &mut p[i * tk..(i + 1) * tk];
                softmax_in_place(row, if causal { i + 1 } else { tk });
            }
            T::gemm(tq, tk, dh, T::ONE, p, rm(tk), &vv[h * dh..], rm(d), T::ZERO, &mut out[h * dh..], rm(d));
        }
        self.push(vec![tq, d], out, Op::Attention { q, k, v, heads, probs }, &[q, k, v])
    }

    /// Inverted dropout with keep probability `1 - p`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut impl Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random_bool(p) { T::ZERO } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Dropout { x, mask }, &[x])
    }

    /// `Σ_t weights[t] · (−log softmax(logits[t])[targets[t]])` as a scalar.
    /// Per-row values are kept for every row; see [`Tape::nll`].
    pub fn weighted_ce(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Var {
        let (t, vsize) = self.rows_cols(logits);
        assert!(targets.len() == t && weights.len() == t, "ce lengths");
        let lv = self.value(logits);
        let mut probs = vec![T::ZERO; t * vsize];
        let mut nll = vec![T::ZERO; t];
        let mut total = T::ZERO;
        for r in 0..t {
            assert!(targets[r] < vsize, "target id {} out of range", targets[r]);
            let row = &mut probs[r * vsize..(r + 1) * vsize];
            row.copy_from_slice(&lv[r * vsize..(r + 1) * vsize]);
            let lse = log_softmax_stats(row);
            nll[r] = lse - lv[r * vsize + targets[r]];
            total += weights[r] * nll[r];
        }
        let v = self.push(
            vec![1],
            vec![total],
            Op::WeightedCe { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            &[logits],
        );
        self.nll.push((v, nll));
        v
    }

    /// Per-row negative log-likelihoods computed by a cross-entropy node.
    pub fn nll(&self, ce: Var) -> Option<&[T]> {
        self.nll.iter().find(|(v, _)| *v == ce).map(|(_, n)| n.as_slice())
    }

    /// Backpropagates from the scalar `loss`, adding parameter gradients to
    /// `param_grads` (one buffer per parameter; frozen ones are untouched).
    pub fn backward(&self, loss: Var, param_grads: &mut [Vec<T>]) {
        assert_eq!(self.value(loss).len(), 1, "loss must be scalar");
        let mut grads: Vec<Vec<T>> = (0..self.nodes.len()).map(|_| Vec::new()).collect();
        grads[loss.0] = vec![T::ONE];
        for idx in (0..=loss.0).rev() {
            if grads[idx].is_empty() || !self.nodes[idx].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            self.backward_node(idx, &g, &mut grads, param_grads);
        }
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Vec<T>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let buf = &mut grads[v.0];
        if buf.is_empty() {
            *buf = vec![T::ZERO; self.value(v).len()];
        }
        Some(buf)
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Vec<T>], param_grads: &mut [Vec<T>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input => {}
            Op::Param(i) => {
                let pg = &mut param_grads[*i];
                if pg.is_empty() {
                    *pg = vec![T::ZERO; g.len()];
                }
                for (a, &b) in pg.iter_mut().zip(g) {
                    *a += b;
                }
            }
            Op::MatMul { a, b, b_transposed } => {
                let (m, k) = self.rows_cols(*a);
                let n = node.shape[1];
                if let Some(da) = self.grad_buf(grads, *a) {
                    // da = g · bᵀ  (or g · b when b is stored transposed)
                    let bs = if *b_transposed { rm(k) } else { tr(n) };
                    T::gemm(m, n, k, T::ONE, g, rm(n), self.value(*b), bs, T::ONE, da, rm(k));
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    if *b_transposed {
                        T::gemm(n, m, k, T::ONE, g, tr(n), self.value(*a), rm(k), T::ONE, db, rm(k));
                    } else {
                        T::gemm(k, m, n, T::ONE, self.value(*a), tr(k), g, rm(n), T::ONE, db, rm(n));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(d) = self.grad_buf(grads, *v) {
                        add_into(d, g);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    add_into(d, g);
                }
                let n = *node.shape.last().expect("row");
                if let Some(d) = self.grad_buf(grads, *b) {
                    for (i, &x) in g.iter().enumerate() {
                        d[i % n] += x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.grad_buf(grads, *a) {
                    for (x, &y) in d.iter_mut().zip(g) {
                        *x += y * *s;
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                if let Some(d) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        d[i] += g[i] * gelu_parts(av[i]).1;
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                if let Some(d) = self.grad_buf(grads, *a) {
                    for i in 0..g.len() {
                        if av[i] > T::ZERO {
                            d[i] += g[i];
                        }
                    }
                }
            }
            Op::LayerNorm { x, g: gain, b, xhat, rstd } => {
                let n = *node.shape.last().expect("row");
                let m = g.len() / n;
                let gv = self.value(*gain);
                if let Some(dg) = self.grad_buf(grads, *gain) {
                    for i in 0..g.len() {
                        dg[i % n] += g[i] * xhat[i];
                    }
                }
                if let Some(db) = self.grad_buf(grads, *b) {
                    for i in 0..g.len() {
                        db[i % n] += g[i];
                    }
                }
                if let Some(dx) = self.grad_buf(grads, *x) {
                    let nf = T::from_f64(n as f64);
                    for r in 0..m {
                        let mut mean_d = T::ZERO;
                        let mut mean_dx = T::ZERO;
                        for j in 0..n {
                            let dh = g[r * n + j] * gv[j];
                            mean_d += dh;
                            mean_dx += dh * xhat[r * n + j];
                        }
                        mean_d = mean_d / nf;
                        mean_dx = mean_dx / nf;
                        for j in 0..n {
                            let dh = g[r * n + j] * gv[j];
                            dx[r * n + j] += rstd[r] * (dh - mean_d - xhat[r * n + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                if let Some(dt) = self.grad_buf(grads, *table) {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(&mut dt[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let (ho, wo) = geom.out_hw();
                let (p, kk, cout) = (ho * wo, geom.cin * 9, geom.cout);
                if let Some(db) = self.grad_buf(grads, *b) {
                    for c in 0..cout {
                        let mut s = T::ZERO;
                        for &v in &g[c * p..(c + 1) * p] {
                            s += v;
                        }
                        db[c] += s;
                    }
                }
                if let Some(dw) = self.grad_buf(grads, *w) {
                    T::gemm(cout, p, kk, T::ONE, g, rm(p), cols, tr(p), T::ONE, dw, rm(kk));
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![T::ZERO; kk * p];
                    T::gemm(kk, cout, p, T::ONE, self.value(*w), tr(kk), g, rm(p), T::ZERO, &mut dcols, rm(p));
                    let dx = self.grad_buf(grads, *x).expect("needs grad");
                    col2im_add(&dcols, geom, dx);
                }
            }
            Op::Transpose(a) => {
                let (n, m) = (node.shape[0], node.shape[1]);
                if let Some(d) = self.grad_buf(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, d) = (node.shape[0], node.shape[1]);
                let tk = self.rows_cols(*k).0;
                let dh = d / heads;
                let scale = T::from_f64(1.0 / (dh as f64).sqrt());
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut dq = vec![T::ZERO; tq * d];
                let mut dk = vec![T::ZERO; tk * d];
                let mut dv = vec![T::ZERO; tk * d];
                let mut ds = vec![T::ZERO; tq * tk];
                for h in 0..*heads {
                    let p = &probs[h * tq * tk..(h + 1) * tq * tk];
                    // dV = Pᵀ · dO
                    T::gemm(tk, tq, dh, T::ONE, p, tr(tk), &g[h * dh..], rm(d), T::ZERO, &mut dv[h * dh..], rm(d));
                    // dP = dO · Vᵀ
                    T::gemm(tq, dh, tk, T::ONE, &g[h * dh..], rm(d), &vv[h * dh..], tr(d), T::ZERO, &mut ds, rm(tk));
                    for i in 0..tq {
                        let (pr, dr) = (&p[i * tk..(i + 1) * tk], &mut ds[i * tk..(i + 1) * tk]);
                        let mut dot = T::ZERO;
                        for j in 0..tk {
                            dot += pr[j] * dr[j];
                        }
                        for j in 0..tk {
                            dr[j] = pr[j] * (dr[j] - dot);
                        }
                    }
                    T::gemm(tq, tk, dh, scale, &ds, rm(tk), &kv[h * dh..], rm(d), T::ZERO, &mut dq[h * dh..], rm(d));
                    T::gemm(tk, tq, dh, scale, &ds, tr(tk), &qv[h * dh..], rm(d), T::ZERO, &mut dk[h * dh..], rm(d));
                }
                for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
                    if let Some(d) = self.grad_buf(grads, *var) {
                        add_into(d, &buf);
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(d) = self.grad_buf(grads, *x) {
                    for i in 0..g.len() {
                        d[i] += g[i] * mask[i];
                    }
                }
            }
            Op::WeightedCe { logits, targets, weights, probs } => {
                let vsize = self.rows_cols(*logits).1;
                if let Some(d) = self.grad_buf(grads, *logits) {
                    for (r, &w) in weights.iter().enumerate() {
                        if w == T::ZERO {
                            continue;
                        }
                        let s = g[0] * w;
                        let row = &mut d[r * vsize..(r + 1) * vsize];
                        for (x, &p) in row.iter_mut().zip(&probs[r * vsize..(r + 1) * vsize]) {
                            *x += s * p;
                        }
                        row[targets[r]] -= s;
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(d: &mut [T], g: &[T]) {
    for (a, &b) in d.iter_mut().zip(g) {
        *a += b;
    }
}

/// Softmax over `row[..valid]`; entries past `valid` become 0.
pub fn softmax_in_place<T: Real>(row: &mut [T], valid: usize) {
    let mut mx = row[0];
    for &v in &row[..valid] {
        mx = mx.max(v);
    }
    let mut sum = T::ZERO;
    for v in &mut row[..valid] {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in &mut row[..valid] {
        *v = *v / sum;
    }
    for v in &mut row[valid..] {
        *v = T::ZERO;
    }
}

/// Turns `row` into its softmax and returns its log-sum-exp.
fn log_softmax_stats<T: Real>(row: &mut [T]) -> T {
    let mut mx = row[0];
    for &v in row.iter() {
        mx = mx.max(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
    mx + sum.ln()
}

/// Unfolds 3x3 padded patches: `cols[(c*9 + ky*3 + kx), oy*wo + ox]`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    let mut cols = vec![T::ZERO; g.cin * 9 * p];
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..3 {
            for kx in 0..3 {
                let dst = &mut cols[(c * 9 + ky * 3 + kx) * p..(c * 9 + ky * 3 + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride.0 + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride.1 + kx) as isize - 1;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * wo + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (ho, wo) = g.out_hw();
    let p = ho * wo;
    for c in 0..g.cin {
        for ky in 0..3 {
            for kx in 0..3 {
                let src = &cols[(c * 9 + ky * 3 + kx) * p..(c * 9 + ky * 3 + kx + 1) * p];
                for oy in 0..ho {
                    let iy = (oy * g.stride.0 + ky) as isize - 1;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = c * g.h * g.w + iy as usize * g.w;
                    for ox in 0..wo {
                        let ix = (ox * g.stride.1 + kx) as isize - 1;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
