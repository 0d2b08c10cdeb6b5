//! Reverse-mode automatic differentiation over a dynamically recorded
//! computation graph.
//!
//! Operations are recorded at tensor granularity (matmul, fused attention,
//! row-wise softmax, loss reductions), each with a hand-written backward
//! closure. Values are immutable once created; a tape is confined to one
//! thread for the duration of a training step.

use std::sync::Arc;

use super::dense;
use super::prob::{softmax_slice, PROB_FLOOR};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

struct Val {
    data: Arc<Vec<f64>>,
    rows: usize,
    cols: usize,
    needs_grad: bool,
}

type Backward = Box<dyn Fn(&[f64], &mut GradStore)>;

struct Node {
    out: usize,
    back: Backward,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by [`Var`].
pub struct GradStore {
    grads: Vec<Option<Vec<f64>>>,
    meta: Vec<(usize, bool)>,
}

impl GradStore {
    /// Accumulate into the gradient of `v`; no-op for vars that do not
    /// require gradients.
    pub fn with(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        let (numel, needs) = self.meta[v.0];
        if !needs {
            return;
        }
        let buf = self.grads[v.0].get_or_insert_with(|| vec![0.0; numel]);
        f(buf);
    }

    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

/// Recording tape. Create with [`Tape::new`] for training or
/// [`Tape::new_inference`] to skip gradient bookkeeping entirely.
pub struct Tape {
    vals: Vec<Val>,
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), nodes: Vec::new(), grad_enabled: true }
    }

    pub fn new_inference() -> Self {
        Tape { vals: Vec::new(), nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push_val(&mut self, data: Arc<Vec<f64>>, rows: usize, cols: usize, needs: bool) -> Var {
        debug_assert_eq!(data.len(), rows * cols);
        self.vals.push(Val { data, rows, cols, needs_grad: needs && self.grad_enabled });
        Var(self.vals.len() - 1)
    }

    fn push_node(&mut self, out: Var, back: Backward) {
        if self.vals[out.0].needs_grad {
            self.nodes.push(Node { out: out.0, back });
        }
    }

    fn out_needs(&self, inputs: &[Var]) -> bool {
        self.grad_enabled && inputs.iter().any(|v| self.vals[v.0].needs_grad)
    }

    pub fn constant(&mut self, data: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push_val(Arc::new(data), rows, cols, false)
    }

    pub fn constant_arc(&mut self, data: Arc<Vec<f64>>, rows: usize, cols: usize) -> Var {
        self.push_val(data, rows, cols, false)
    }

    /// Register a parameter tensor. Gradients are tracked only when
    /// `trainable` is true, so frozen components record nothing.
    pub fn param(&mut self, data: Arc<Vec<f64>>, rows: usize, cols: usize, trainable: bool) -> Var {
        self.push_val(data, rows, cols, trainable)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.vals[v.0].data
    }

    pub fn value_arc(&self, v: Var) -> Arc<Vec<f64>> {
        Arc::clone(&self.vals[v.0].data)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        (self.vals[v.0].rows, self.vals[v.0].cols)
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.vals[v.0].data.len(), 1);
        self.vals[v.0].data[0]
    }

    // ---- arithmetic ----------------------------------------------------

    /// (m,k) · (k,n) -> (m,n)
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.dims(a);
        let (kb, n) = self.dims(b);
        assert_eq!(ka, kb, "matmul inner dims");
        let mut out = vec![0.0; m * n];
        dense::mm(&mut out, false, self.value(a), self.value(b), m, ka, n);
        let needs = self.out_needs(&[a, b]);
        let o = self.push_val(Arc::new(out), m, n, needs);
        if needs {
            let (ad, bd) = (self.value_arc(a), self.value_arc(b));
            let k = ka;
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(a, |da| dense::mm_bt(da, true, g, &bd, m, n, k));
                    gs.with(b, |db| dense::mm_at(db, true, &ad, g, k, m, n));
                }),
            );
        }
        o
    }

    /// (m,k) · (n,k)ᵀ -> (m,n)
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (m, ka) = self.dims(a);
        let (n, kb) = self.dims(b);
        assert_eq!(ka, kb, "matmul_bt inner dims");
        let mut out = vec![0.0; m * n];
        dense::mm_bt(&mut out, false, self.value(a), self.value(b), m, ka, n);
        let needs = self.out_needs(&[a, b]);
        let o = self.push_val(Arc::new(out), m, n, needs);
        if needs {
            let (ad, bd) = (self.value_arc(a), self.value_arc(b));
            let k = ka;
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(a, |da| dense::mm(da, true, g, &bd, m, n, k));
                    gs.with(b, |db| dense::mm_at(db, true, g, &ad, n, m, k));
                }),
            );
        }
        o
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(b), (r, c), "add shape mismatch");
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let needs = self.out_needs(&[a, b]);
        let o = self.push_val(Arc::new(out), r, c, needs);
        if needs {
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(a, |da| dense::axpy(da, 1.0, g));
                    gs.with(b, |db| dense::axpy(db, 1.0, g));
                }),
            );
        }
        o
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let needs = self.out_needs(&[a]);
        let o = self.push_val(Arc::new(out), r, c, needs);
        if needs {
            self.push_node(o, Box::new(move |g, gs| gs.with(a, |da| dense::axpy(da, factor, g))));
        }
        o
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = self.dims(a);
        assert_eq!(self.dims(b), (r, c), "mul shape mismatch");
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let needs = self.out_needs(&[a, b]);
        let o = self.push_val(Arc::new(out), r, c, needs);
        if needs {
            let (ad, bd) = (self.value_arc(a), self.value_arc(b));
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(a, |da| {
                        for i in 0..da.len() {
                            da[i] += g[i] * bd[i];
                        }
                    });
                    gs.with(b, |db| {
                        for i in 0..db.len() {
                            db[i] += g[i] * ad[i];
                        }
                    });
                }),
            );
        }
        o
    }

    /// ln(max(x, floor)); the derivative is 0 on the floored (flat) region.
    pub fn ln_floored(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|&x| x.max(PROB_FLOOR).ln()).collect();
        let needs = self.out_needs(&[a]);
        let o = self.push_val(Arc::new(out), r, c, needs);
        if needs {
            let ad = self.value_arc(a);
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(a, |da| {
                        for i in 0..da.len() {
                            if ad[i] > PROB_FLOOR {
                                da[i] += g[i] / ad[i];
                            }
                        }
                    });
                }),
            );
        }
        o
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).iter().sum();
        let needs = self.out_needs(&[a]);
        let o = self.push_val(Arc::new(vec![total]), 1, 1, needs);
        if needs {
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(a, |da| {
                        for d in da.iter_mut() {
                            *d += g[0];
                        }
                    });
                }),
            );
        }
        o
    }

    /// Weighted sum of scalar vars: Σ wᵢ·xᵢ.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = 0.0;
        for &(v, w) in terms {
            debug_assert_eq!(self.dims(v), (1, 1), "weighted_sum expects scalars");
            total += w * self.scalar(v);
        }
        let needs = self.out_needs(&terms.iter().map(|&(v, _)| v).collect::<Vec<_>>());
        let o = self.push_val(Arc::new(vec![total]), 1, 1, needs);
        if needs {
            let terms = terms.to_vec();
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    for &(v, w) in &terms {
                        gs.with(v, |dv| dv[0] += w * g[0]);
                    }
                }),
            );
        }
        o
    }

    /// Differentiable row gather: out[i] = src[ids[i]]. Backward scatters.
    pub fn gather_rows(&mut self, src: Var, ids: &[usize]) -> Var {
        let (rows, cols) = self.dims(src);
        let sd = self.value_arc(src);
        let mut out = vec![0.0; ids.len() * cols];
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < rows, "gather index {id} out of range {rows}");
            out[i * cols..(i + 1) * cols].copy_from_slice(&sd[id * cols..(id + 1) * cols]);
        }
        let needs = self.out_needs(&[src]);
        let o = self.push_val(Arc::new(out), ids.len(), cols, needs);
        if needs {
            let ids = ids.to_vec();
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(src, |ds| {
                        for (i, &id) in ids.iter().enumerate() {
                            dense::axpy(
                                &mut ds[id * cols..(id + 1) * cols],
                                1.0,
                                &g[i * cols..(i + 1) * cols],
                            );
                        }
                    });
                }),
            );
        }
        o
    }

    /// Stack parts vertically; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.dims(parts[0]).1;
        let total_rows: usize = parts.iter().map(|&p| self.dims(p).0).sum();
        let mut out = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            assert_eq!(self.dims(p).1, cols, "concat_rows column mismatch");
            out.extend_from_slice(self.value(p));
        }
        let needs = self.out_needs(parts);
        let o = self.push_val(Arc::new(out), total_rows, cols, needs);
        if needs {
            let spans: Vec<(Var, usize)> = parts.iter().map(|&p| (p, self.dims(p).0)).collect();
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    let mut off = 0;
                    for &(p, rows) in &spans {
                        gs.with(p, |dp| dense::axpy(dp, 1.0, &g[off..off + rows * cols]));
                        off += rows * cols;
                    }
                }),
            );
        }
        o
    }

    /// Row-wise RMS normalization with a learned gain: y = g ⊙ x / rms(x).
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: f64) -> Var {
        let (rows, cols) = self.dims(x);
        assert_eq!(self.dims(gain), (1, cols), "rmsnorm gain shape");
        let xd = self.value_arc(x);
        let gd = self.value_arc(gain);
        let mut out = vec![0.0; rows * cols];
        let mut rms = vec![0.0; rows];
        for i in 0..rows {
            let row = &xd[i * cols..(i + 1) * cols];
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let r = (ms + eps).sqrt();
            rms[i] = r;
            for j in 0..cols {
                out[i * cols + j] = gd[j] * row[j] / r;
            }
        }
        let needs = self.out_needs(&[x, gain]);
        let o = self.push_val(Arc::new(out), rows, cols, needs);
        if needs {
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(gain, |dg| {
                        for i in 0..rows {
                            for j in 0..cols {
                                dg[j] += g[i * cols + j] * xd[i * cols + j] / rms[i];
                            }
                        }
                    });
                    gs.with(x, |dx| {
                        for i in 0..rows {
                            let row = &xd[i * cols..(i + 1) * cols];
                            let gout = &g[i * cols..(i + 1) * cols];
                            let r = rms[i];
                            let mut dot = 0.0;
                            for j in 0..cols {
                                dot += gout[j] * gd[j] * row[j];
                            }
                            let corr = dot / (cols as f64 * r * r * r);
                            for j in 0..cols {
                                dx[i * cols + j] += gout[j] * gd[j] / r - row[j] * corr;
                            }
                        }
                    });
                }),
            );
        }
        o
    }

    /// GELU activation (tanh approximation).
    pub fn gelu(&mut self, x: Var) -> Var {
        const S: f64 = 0.7978845608028654; // sqrt(2/pi)
        const C: f64 = 0.044715;
        let (rows, cols) = self.dims(x);
        let xd = self.value_arc(x);
        let out: Vec<f64> =
            xd.iter().map(|&v| 0.5 * v * (1.0 + (S * (v + C * v * v * v)).tanh())).collect();
        let needs = self.out_needs(&[x]);
        let o = self.push_val(Arc::new(out), rows, cols, needs);
        if needs {
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(x, |dx| {
                        for i in 0..dx.len() {
                            let v = xd[i];
                            let t = (S * (v + C * v * v * v)).tanh();
                            let d = 0.5 * (1.0 + t)
                                + 0.5 * v * (1.0 - t * t) * S * (1.0 + 3.0 * C * v * v);
                            dx[i] += g[i] * d;
                        }
                    });
                }),
            );
        }
        o
    }

    /// Row-wise softmax with temperature.
    pub fn softmax_rows(&mut self, x: Var, temp: f64) -> Var {
        assert!(temp > 0.0, "softmax temperature must be positive");
        let (rows, cols) = self.dims(x);
        let xd = self.value(x);
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            softmax_slice(&mut out[i * cols..(i + 1) * cols], &xd[i * cols..(i + 1) * cols], temp);
        }
        let needs = self.out_needs(&[x]);
        let o = self.push_val(Arc::new(out), rows, cols, needs);
        if needs {
            let yd = self.value_arc(o);
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(x, |dx| {
                        for i in 0..rows {
                            let y = &yd[i * cols..(i + 1) * cols];
                            let gout = &g[i * cols..(i + 1) * cols];
                            let dot: f64 = y.iter().zip(gout).map(|(a, b)| a * b).sum();
                            for j in 0..cols {
                                dx[i * cols + j] += y[j] * (gout[j] - dot) / temp;
                            }
                        }
                    });
                }),
            );
        }
        o
    }

    /// Keep the k largest entries of each row, zero the rest, renormalize.
    /// Ties at the k-th value are broken toward the lower index.
    pub fn topk_renorm(&mut self, x: Var, k: usize) -> Var {
        let (rows, cols) = self.dims(x);
        assert!(k >= 1 && k <= cols, "top-k must be in [1, cols]");
        let xd = self.value_arc(x);
        let mut out = vec![0.0; rows * cols];
        let mut kept_all: Vec<Vec<usize>> = Vec::with_capacity(rows);
        let mut sums = vec![0.0; rows];
        for i in 0..rows {
            let row = &xd[i * cols..(i + 1) * cols];
            let mut idx: Vec<usize> = (0..cols).collect();
            idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
            let mut kept = idx[..k].to_vec();
            kept.sort_unstable();
            let s: f64 = kept.iter().map(|&j| row[j]).sum();
            sums[i] = s;
            for &j in &kept {
                out[i * cols + j] = row[j] / s;
            }
            kept_all.push(kept);
        }
        let needs = self.out_needs(&[x]);
        let o = self.push_val(Arc::new(out), rows, cols, needs);
        if needs {
            let yd = self.value_arc(o);
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(x, |dx| {
                        for i in 0..rows {
                            let kept = &kept_all[i];
                            let y = &yd[i * cols..(i + 1) * cols];
                            let gout = &g[i * cols..(i + 1) * cols];
                            let dot: f64 = kept.iter().map(|&j| gout[j] * y[j]).sum();
                            for &j in kept {
                                dx[i * cols + j] += (gout[j] - dot) / sums[i];
                            }
                        }
                    });
                }),
            );
        }
        o
    }

    /// Fused multi-head scaled-dot-product attention with a boolean mask.
    ///
    /// `allow` is row-major L×L; blocked pairs get exactly zero attention
    /// weight (−∞ before the softmax), so blocked inputs cannot influence
    /// the output even through rounding.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, allow: &[bool], n_heads: usize) -> Var {
        let (len, d) = self.dims(q);
        assert_eq!(self.dims(k), (len, d));
        assert_eq!(self.dims(v), (len, d));
        assert_eq!(allow.len(), len * len, "mask size mismatch");
        assert!(d % n_heads == 0, "width must divide head count");
        let hd = d / n_heads;
        let scale = 1.0 / (hd as f64).sqrt();

        let qd = self.value_arc(q);
        let kd = self.value_arc(k);
        let vd = self.value_arc(v);

        let mut out = vec![0.0; len * d];
        // Per-head attention probabilities, saved for the backward pass.
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(n_heads);
        let mut scores = vec![0.0; len * len];
        for h in 0..n_heads {
            let off = h * hd;
            // scores = Qh · Khᵀ * scale (strided views into q/k)
            unsafe {
                matrixmultiply::dgemm(
                    len,
                    hd,
                    len,
                    scale,
                    qd.as_ptr().add(off),
                    d as isize,
                    1,
                    kd.as_ptr().add(off),
                    1,
                    d as isize,
                    0.0,
                    scores.as_mut_ptr(),
                    len as isize,
                    1,
                );
            }
            let mut p = vec![0.0; len * len];
            for i in 0..len {
                let srow = &scores[i * len..(i + 1) * len];
                let arow = &allow[i * len..(i + 1) * len];
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    if arow[j] && srow[j] > max {
                        max = srow[j];
                    }
                }
                let prow = &mut p[i * len..(i + 1) * len];
                let mut sum = 0.0;
                for j in 0..len {
                    if arow[j] {
                        let e = (srow[j] - max).exp();
                        prow[j] = e;
                        sum += e;
                    }
                }
                for pj in prow.iter_mut() {
                    *pj /= sum;
                }
            }
            // out_h = P · Vh (strided output)
            unsafe {
                matrixmultiply::dgemm(
                    len,
                    len,
                    hd,
                    1.0,
                    p.as_ptr(),
                    len as isize,
                    1,
                    vd.as_ptr().add(off),
                    d as isize,
                    1,
                    0.0,
                    out.as_mut_ptr().add(off),
                    d as isize,
                    1,
                );
            }
            probs.push(p);
        }

        let needs = self.out_needs(&[q, k, v]);
        let o = self.push_val(Arc::new(out), len, d, needs);
        if needs {
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    // dP, dS are per-head temporaries.
                    let mut dp = vec![0.0; len * len];
                    let mut ds = vec![0.0; len * len];
                    for h in 0..n_heads {
                        let off = h * hd;
                        let p = &probs[h];
                        // dP = dOh · Vhᵀ
                        unsafe {
                            matrixmultiply::dgemm(
                                len,
                                hd,
                                len,
                                1.0,
                                g.as_ptr().add(off),
                                d as isize,
                                1,
                                vd.as_ptr().add(off),
                                1,
                                d as isize,
                                0.0,
                                dp.as_mut_ptr(),
                                len as isize,
                                1,
                            );
                        }
                        // softmax backward rowwise; blocked entries have p=0.
                        for i in 0..len {
                            let prow = &p[i * len..(i + 1) * len];
                            let dprow = &dp[i * len..(i + 1) * len];
                            let dot: f64 = prow.iter().zip(dprow).map(|(a, b)| a * b).sum();
                            let dsrow = &mut ds[i * len..(i + 1) * len];
                            for j in 0..len {
                                dsrow[j] = prow[j] * (dprow[j] - dot);
                            }
                        }
                        gs.with(v, |dv| {
                            // dVh += Pᵀ · dOh
                            unsafe {
                                matrixmultiply::dgemm(
                                    len,
                                    len,
                                    hd,
                                    1.0,
                                    p.as_ptr(),
                                    1,
                                    len as isize,
                                    g.as_ptr().add(off),
                                    d as isize,
                                    1,
                                    1.0,
                                    dv.as_mut_ptr().add(off),
                                    d as isize,
                                    1,
                                );
                            }
                        });
                        gs.with(q, |dq| {
                            // dQh += dS · Kh * scale
                            unsafe {
                                matrixmultiply::dgemm(
                                    len,
                                    len,
                                    hd,
                                    scale,
                                    ds.as_ptr(),
                                    len as isize,
                                    1,
                                    kd.as_ptr().add(off),
                                    d as isize,
                                    1,
                                    1.0,
                                    dq.as_mut_ptr().add(off),
                                    d as isize,
                                    1,
                                );
                            }
                        });
                        gs.with(k, |dk| {
                            // dKh += dSᵀ · Qh * scale
                            unsafe {
                                matrixmultiply::dgemm(
                                    len,
                                    len,
                                    hd,
                                    scale,
                                    ds.as_ptr(),
                                    1,
                                    len as isize,
                                    qd.as_ptr().add(off),
                                    d as isize,
                                    1,
                                    1.0,
                                    dk.as_mut_ptr().add(off),
                                    d as isize,
                                    1,
                                );
                            }
                        });
                    }
                }),
            );
        }
        o
    }

    /// Σ wᵢ · (−log softmax(logits[rowᵢ])[targetᵢ]) as a scalar.
    pub fn cross_entropy_terms(&mut self, logits: Var, items: &[(usize, usize, f64)]) -> Var {
        let (rows, cols) = self.dims(logits);
        let ld = self.value_arc(logits);
        let mut total = 0.0;
        for &(row, target, w) in items {
            assert!(row < rows && target < cols, "cross-entropy item out of range");
            total += w * neg_log_softmax_at(&ld[row * cols..(row + 1) * cols], target);
        }
        let needs = self.out_needs(&[logits]);
        let o = self.push_val(Arc::new(vec![total]), 1, 1, needs);
        if needs {
            let items = items.to_vec();
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(logits, |dl| {
                        let mut q = vec![0.0; cols];
                        for &(row, target, w) in &items {
                            softmax_slice(&mut q, &ld[row * cols..(row + 1) * cols], 1.0);
                            let drow = &mut dl[row * cols..(row + 1) * cols];
                            for j in 0..cols {
                                drow[j] += w * g[0] * (q[j] - if j == target { 1.0 } else { 0.0 });
                            }
                        }
                    });
                }),
            );
        }
        o
    }

    /// Σ wᵢ · KL(teacherᵢ ‖ softmax(logits[rowᵢ])) as a scalar.
    pub fn kl_terms(&mut self, logits: Var, items: &[(usize, Arc<Vec<f64>>, f64)]) -> Var {
        let (rows, cols) = self.dims(logits);
        let ld = self.value_arc(logits);
        let mut total = 0.0;
        for (row, teacher, w) in items {
            assert!(*row < rows && teacher.len() == cols, "KL item shape mismatch");
            total += w * kl_teacher_vs_logits(teacher, &ld[row * cols..(row + 1) * cols]);
        }
        let needs = self.out_needs(&[logits]);
        let o = self.push_val(Arc::new(vec![total]), 1, 1, needs);
        if needs {
            let items = items.to_vec();
            self.push_node(
                o,
                Box::new(move |g, gs| {
                    gs.with(logits, |dl| {
                        let mut q = vec![0.0; cols];
                        for (row, teacher, w) in &items {
                            softmax_slice(&mut q, &ld[row * cols..(row + 1) * cols], 1.0);
                            let drow = &mut dl[row * cols..(row + 1) * cols];
                            for j in 0..cols {
                                drow[j] += w * g[0] * (q[j] - teacher[j]);
                            }
                        }
                    });
                }),
            );
        }
        o
    }

    /// Run reverse-mode accumulation from a scalar loss.
    pub fn backward(&self, loss: Var) -> GradStore {
        assert!(self.grad_enabled, "backward on an inference tape");
        assert_eq!(self.vals[loss.0].data.len(), 1, "backward expects a scalar loss");
        let mut gs = GradStore {
            grads: self.vals.iter().map(|_| None).collect(),
            meta: self.vals.iter().map(|v| (v.data.len(), v.needs_grad)).collect(),
        };
        if !self.vals[loss.0].needs_grad {
            return gs;
        }
        gs.grads[loss.0] = Some(vec![1.0]);
        for node in self.nodes.iter().rev() {
            let Some(gout) = gs.grads[node.out].take() else { continue };
            (node.back)(&gout, &mut gs);
        }
        gs
    }
}

/// −log softmax(logits)[target], numerically stable.
fn neg_log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target]
}

/// KL(p ‖ softmax(logits)) with the 0·ln 0 convention on p.
fn kl_teacher_vs_logits(p: &[f64], logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse: f64 = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    let mut kl = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        if pi > 0.0 {
            kl += pi * (pi.ln() - (logits[i] - lse));
        }
    }
    kl
}
