//! Tape-based reverse-mode autodiff over `ndarray`, generic over the scalar.
//!
//! A `Graph` is rebuilt per training step (define-by-run): forward values are
//! computed eagerly, each differentiable op pushes a backward closure, and
//! `backward` walks the tape in reverse. Shape agreement inside the graph is
//! a programming invariant and asserted; public module APIs validate shapes
//! and return `Result` before anything reaches the graph.

mod conv;
pub mod gradcheck;

pub use conv::{BnStats, Phase};

use crate::scalar::Scalar;
use ndarray::{concatenate, ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

/// Handle to a node in the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackOp<T> = Box<dyn FnOnce(&[ArrayD<T>], &ArrayD<T>, &mut GradSink<'_, T>)>;

pub struct Graph<T: Scalar> {
    values: Vec<ArrayD<T>>,
    grads: Vec<Option<ArrayD<T>>>,
    needs: Vec<bool>,
    backs: Vec<Option<BackOp<T>>>,
}

pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut Vec<Option<ArrayD<T>>>,
    needs: &'a [bool],
}

impl<T: Scalar> GradSink<'_, T> {
    pub fn add(&mut self, v: Var, delta: ArrayD<T>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta),
        }
    }

    pub fn add_view(&mut self, v: Var, delta: ArrayViewD<'_, T>) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => *g += &delta,
            slot => *slot = Some(delta.to_owned()),
        }
    }

    pub fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }
}

/// Row-major reshape with copy; works for any input layout.
pub(crate) fn reshape_arr<T: Scalar>(a: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    assert_eq!(a.len(), n, "reshape: length mismatch");
    ArrayD::from_shape_vec(IxDyn(shape), a.iter().cloned().collect()).unwrap()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            grads: Vec::new(),
            needs: Vec::new(),
            backs: Vec::new(),
        }
    }

    fn next_id(&self) -> usize {
        self.values.len()
    }

    fn push(&mut self, value: ArrayD<T>, needs: bool, back: Option<BackOp<T>>) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.needs.push(needs);
        self.backs.push(if needs { back } else { None });
        Var(self.values.len() - 1)
    }

    pub(crate) fn push_op(&mut self, value: ArrayD<T>, needs: bool, back: BackOp<T>) -> Var {
        self.push(value, needs, Some(back))
    }

    /// Leaf that does not receive gradients (inputs, frozen parameters).
    pub fn constant(&mut self, v: ArrayD<T>) -> Var {
        self.push(v, false, None)
    }

    /// Leaf that accumulates gradients (trainable parameters, probes).
    pub fn param(&mut self, v: ArrayD<T>) -> Var {
        self.push(v, true, None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.values[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    /// Scalar value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let a = &self.values[v.0];
        assert_eq!(a.len(), 1, "scalar() on non-scalar node");
        *a.iter().next().unwrap()
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&mut self, root: Var) {
        let a = &self.values[root.0];
        assert_eq!(a.len(), 1, "backward root must be scalar");
        let shape = a.shape().to_vec();
        self.grads[root.0] = Some(ArrayD::from_elem(IxDyn(&shape), T::one()));
        for i in (0..=root.0).rev() {
            if self.grads[i].is_none() {
                continue;
            }
            let Some(op) = self.backs[i].take() else {
                continue;
            };
            let g = self.grads[i].take().unwrap();
            {
                let mut sink = GradSink {
                    grads: &mut self.grads,
                    needs: &self.needs,
                };
                op(&self.values, &g, &mut sink);
            }
            self.grads[i] = Some(g);
        }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] + &self.values[b.0];
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push_op(
            v,
            needs,
            Box::new(move |_, g, sink| {
                sink.add_view(a, g.view());
                sink.add_view(b, g.view());
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] - &self.values[b.0];
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push_op(
            v,
            needs,
            Box::new(move |_, g, sink| {
                sink.add_view(a, g.view());
                sink.add(b, g.mapv(|x| -x));
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.values[a.0].shape(), self.values[b.0].shape());
        let v = &self.values[a.0] * &self.values[b.0];
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push_op(
            v,
            needs,
            Box::new(move |vals, g, sink| {
                if sink.wants(a) {
                    sink.add(a, g * &vals[b.0]);
                }
                if sink.wants(b) {
                    sink.add(b, g * &vals[a.0]);
                }
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.values[a.0].mapv(|x| x * c);
        let needs = self.needs[a.0];
        self.push_op(
            v,
            needs,
            Box::new(move |_, g, sink| sink.add(a, g.mapv(|x| x * c))),
        )
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    // ---- activations / pointwise nonlinear ----

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| if x > T::zero() { x } else { T::zero() });
        let needs = self.needs[a.0];
        self.push_op(
            v,
            needs,
            Box::new(move |vals, g, sink| {
                let mut d = g.clone();
                d.zip_mut_with(&vals[a.0], |dv, &x| {
                    if x <= T::zero() {
                        *dv = T::zero()
                    }
                });
                sink.add(a, d);
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let v = self.values[a.0].mapv(|x| if x > T::zero() { x } else { x * slope });
        let needs = self.needs[a.0];
        self.push_op(
            v,
            needs,
            Box::new(move |vals, g, sink| {
                let mut d = g.clone();
                d.zip_mut_with(&vals[a.0], |dv, &x| {
                    if x <= T::zero() {
                        *dv = *dv * slope
                    }
                });
                sink.add(a, d);
            }),
        )
    }

    pub fn tanh_act(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.tanh());
        let needs = self.needs[a.0];
        let out = self.next_id();
        self.push_op(
            v,
            needs,
            Box::new(move |vals, g, sink| {
                let y = &vals[out];
                let mut d = g.clone();
                d.zip_mut_with(y, |dv, &yv| *dv = *dv * (T::one() - yv * yv));
                sink.add(a, d);
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| T::one() / (T::one() + (-x).exp()));
        let needs = self.needs[a.0];
        let out = self.next_id();
        self.push_op(
            v,
            needs,
            Box::new(move |vals, g, sink| {
                let y = &vals[out];
                let mut d = g.clone();
                d.zip_mut_with(y, |dv, &yv| *dv = *dv * yv * (T::one() - yv));
                sink.add(a, d);
            }),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.values[a.0].mapv(|x| x.ln());
        let needs = self.needs[a.0];
        self.push_op(
            v,
            needs,
            Box::new(move |vals, g, sink| {
                let mut d = g.clone();
                d.zip_mut_with(&vals[a.0], |dv, &x| *dv = *dv / x);
                sink.add(a, d);
            }),
        )
    }

    /// Clamp to [lo, hi]; gradient passes only strictly inside the band.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.values[a.0].mapv(|x| x.max(lo).min(hi));
        let needs = self.needs[a.0];
        self.push_op(
            v,
            needs,
            Box::new(move |vals, g, sink| {
                let mut d = g.clone();
                d.zip_mut_with(&vals[a.0], |dv, &x| {
                    if x <= lo || x >= hi {
                        *dv = T::zero()
                    }
                });
                sink.add(a, d);
            }),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product with optional transposes: C = op(A) · op(B).
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Var {
        let av = self.values[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.values[b.0].view().into_dimensionality::<Ix2>().unwrap();
        let a_eff = if trans_a { av.t() } else { av.view() };
        let b_eff = if trans_b { bv.t() } else { bv.view() };
        assert_eq!(a_eff.ncols(), b_eff.nrows(), "matmul inner dim");
        let c = a_eff.dot(&b_eff);
        let needs = self.needs[a.0] || self.needs[b.0];
        self.push_op(
            c.into_dyn(),
            needs,
            Box::new(move |vals, g, sink| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let av = vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
                let bv = vals[b.0].view().into_dimensionality::<Ix2>().unwrap();
                let a_eff = if trans_a { av.t() } else { av.view() };
                let b_eff = if trans_b { bv.t() } else { bv.view() };
                if sink.wants(a) {
                    // d(op(A)) = G · op(B)^T
                    let da_eff = g2.dot(&b_eff.t());
                    let da = if trans_a { da_eff.t().to_owned() } else { da_eff };
                    sink.add(a, da.into_dyn());
                }
                if sink.wants(b) {
                    let db_eff = a_eff.t().dot(&g2);
                    let db = if trans_b { db_eff.t().to_owned() } else { db_eff };
                    sink.add(b, db.into_dyn());
                }
            }),
        )
    }

    /// x [N,D] + bias [D], broadcast over rows.
    pub fn add_bias_rows(&mut self, x: Var, b: Var) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        let bs = self.values[b.0].shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(bs, vec![xs[1]]);
        let bb = reshape_arr(&self.values[b.0], &[1, xs[1]]);
        let v = &self.values[x.0] + &bb;
        let needs = self.needs[x.0] || self.needs[b.0];
        self.push_op(
            v,
            needs,
            Box::new(move |_, g, sink| {
                sink.add_view(x, g.view());
                if sink.wants(b) {
                    sink.add(b, g.sum_axis(Axis(0)));
                }
            }),
        )
    }

    // ---- shape ops ----

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = reshape_arr(&self.values[a.0], shape);
        let needs = self.needs[a.0];
        let old_shape = self.values[a.0].shape().to_vec();
        self.push_op(
            v,
            needs,
            Box::new(move |_, g, sink| {
                sink.add(a, reshape_arr(g, &old_shape));
            }),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat shapes");
        let needs = parts.iter().any(|p| self.needs[p.0]);
        let ids: Vec<Var> = parts.to_vec();
        let lens: Vec<usize> = parts
            .iter()
            .map(|p| self.values[p.0].shape()[axis])
            .collect();
        self.push_op(
            v,
            needs,
            Box::new(move |_, g, sink| {
                let mut off = 0;
                for (p, len) in ids.iter().zip(&lens) {
                    let sl = g.slice_axis(Axis(axis), ndarray::Slice::from(off..off + len));
                    sink.add_view(*p, sl);
                    off += len;
                }
            }),
        )
    }

    /// x [B,C] replicated over an h×w grid -> [B,C,h,w].
    pub fn tile_spatial(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(xs.len(), 2);
        let (bsz, c) = (xs[0], xs[1]);
        let x2 = reshape_arr(&self.values[x.0], &[bsz, c, 1, 1]);
        let v = x2
            .broadcast(IxDyn(&[bsz, c, h, w]))
            .unwrap()
            .to_owned();
        let needs = self.needs[x.0];
        self.push_op(
            v,
            needs,
            Box::new(move |_, g, sink| {
                let s = g.sum_axis(Axis(3)).sum_axis(Axis(2));
                sink.add(x, s.into_dyn());
            }),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.values[a.0].sum();
        let needs = self.needs[a.0];
        let shape = self.values[a.0].shape().to_vec();
        self.push_op(
            ArrayD::from_elem(IxDyn(&[1]), s),
            needs,
            Box::new(move |_, g, sink| {
                let g0 = *g.iter().next().unwrap();
                sink.add(a, ArrayD::from_elem(IxDyn(&shape), g0));
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.values[a.0].len();
        let s = self.sum_all(a);
        self.scale(s, T::one() / T::from_usize(n))
    }

    // ---- recurrent sweep ----

    /// Vanilla tanh RNN over x [B,C,L]; returns the final hidden state [B,H].
    ///
    /// h_t = tanh(x_t·wxᵀ + h_{t-1}·whᵀ + b), h_{-1} = 0.
    pub fn rnn_last(&mut self, x: Var, wx: Var, wh: Var, b: Var) -> Var {
        let xs = self.values[x.0].shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (bsz, c, len) = (xs[0], xs[1], xs[2]);
        let wxv = self.values[wx.0].view().into_dimensionality::<Ix2>().unwrap();
        let whv = self.values[wh.0].view().into_dimensionality::<Ix2>().unwrap();
        let hdim = wxv.nrows();
        assert_eq!(wxv.ncols(), c);
        assert_eq!(whv.dim(), (hdim, hdim));
        let bv = &self.values[b.0];
        assert_eq!(bv.len(), hdim);

        // steps[t]: [B,C] slice of the input at time t
        let xv = self.values[x.0].view();
        let mut steps: Vec<ndarray::Array2<T>> = Vec::with_capacity(len);
        for t in 0..len {
            let mut st = ndarray::Array2::<T>::zeros((bsz, c));
            for bi in 0..bsz {
                for ci in 0..c {
                    st[[bi, ci]] = xv[[bi, ci, t]];
                }
            }
            steps.push(st);
        }
        let bias = ndarray::Array1::from_iter(bv.iter().cloned());
        let mut hs: Vec<ndarray::Array2<T>> = Vec::with_capacity(len + 1);
        hs.push(ndarray::Array2::zeros((bsz, hdim)));
        for st in &steps {
            let mut pre = st.dot(&wxv.t()) + hs.last().unwrap().dot(&whv.t());
            for mut row in pre.rows_mut() {
                row += &bias;
            }
            hs.push(pre.mapv(|v| v.tanh()));
        }
        let out_val = hs.last().unwrap().clone().into_dyn();
        let needs =
            self.needs[x.0] || self.needs[wx.0] || self.needs[wh.0] || self.needs[b.0];
        self.push_op(
            out_val,
            needs,
            Box::new(move |vals, g, sink| {
                let wxv = vals[wx.0].view().into_dimensionality::<Ix2>().unwrap();
                let whv = vals[wh.0].view().into_dimensionality::<Ix2>().unwrap();
                let mut dwx = ndarray::Array2::<T>::zeros(wxv.dim());
                let mut dwh = ndarray::Array2::<T>::zeros(whv.dim());
                let mut db = ndarray::Array1::<T>::zeros(hdim);
                let mut dx = ArrayD::<T>::zeros(IxDyn(&[bsz, c, len]));
                let mut dh = g.view().into_dimensionality::<Ix2>().unwrap().to_owned();
                for t in (0..len).rev() {
                    let h_t = &hs[t + 1];
                    let h_prev = &hs[t];
                    // da = dh ⊙ (1 - h_t²)
                    let mut da = dh.clone();
                    da.zip_mut_with(h_t, |d, &hv| *d = *d * (T::one() - hv * hv));
                    dwx = dwx + da.t().dot(&steps[t]);
                    dwh = dwh + da.t().dot(h_prev);
                    db = db + da.sum_axis(Axis(0));
                    if sink.wants(x) {
                        let dxt = da.dot(&wxv);
                        for bi in 0..bsz {
                            for ci in 0..c {
                                dx[[bi, ci, t]] = dxt[[bi, ci]];
                            }
                        }
                    }
                    dh = da.dot(&whv);
                }
                if sink.wants(x) {
                    sink.add(x, dx);
                }
                sink.add(wx, dwx.into_dyn());
                sink.add(wh, dwh.into_dyn());
                sink.add(b, db.into_dyn());
            }),
        )
    }

    // ---- ranking loss ----

    /// Symmetric pairwise hinge ranking loss over a square score matrix whose
    /// diagonal holds the matching pairs. Mean over off-diagonal pairs of
    /// max(0, margin − s_ii + s_ij), plus the same with columns as anchors.
    pub fn hinge_rank_loss(&mut self, scores: Var, margin: T) -> Var {
        let sv = self.values[scores.0]
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap();
        let n = sv.nrows();
        assert_eq!(sv.ncols(), n, "hinge_rank_loss: square matrix required");
        assert!(n >= 2);
        let norm = T::one() / T::from_usize(n * (n - 1));
        let mut total = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let row = margin - sv[[i, i]] + sv[[i, j]];
                if row > T::zero() {
                    total = total + row * norm;
                }
                let col = margin - sv[[j, j]] + sv[[i, j]];
                if col > T::zero() {
                    total = total + col * norm;
                }
            }
        }
        let needs = self.needs[scores.0];
        self.push_op(
            ArrayD::from_elem(IxDyn(&[1]), total),
            needs,
            Box::new(move |vals, g, sink| {
                let sv = vals[scores.0]
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                let g0 = *g.iter().next().unwrap();
                let w = g0 * norm;
                let mut d = ndarray::Array2::<T>::zeros((n, n));
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        if margin - sv[[i, i]] + sv[[i, j]] > T::zero() {
                            d[[i, j]] = d[[i, j]] + w;
                            d[[i, i]] = d[[i, i]] - w;
                        }
                        if margin - sv[[j, j]] + sv[[i, j]] > T::zero() {
                            d[[i, j]] = d[[i, j]] + w;
                            d[[j, j]] = d[[j, j]] - w;
                        }
                    }
                }
                sink.add(scores, d.into_dyn());
            }),
        )
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}
