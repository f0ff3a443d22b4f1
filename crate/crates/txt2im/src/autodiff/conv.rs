//! Convolution, transposed convolution, pooling and batch normalization.
//!
//! Convolutions run as im2col + GEMM; the transposed convolution reuses the
//! same gather/scatter pair with the roles of grid and canvas swapped.

use super::{reshape_arr, Graph, Var};
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};

/// Batch-norm forward behavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Normalize with batch statistics and update running stats.
    Train,
    /// Normalize with batch statistics, leave running stats untouched.
    TrainNoUpdate,
    /// Normalize with running statistics.
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone)]
pub struct BnStats<T: Scalar> {
    pub mean: Array1<T>,
    pub var: Array1<T>,
}

impl<T: Scalar> BnStats<T> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: Array1::zeros(channels),
            var: Array1::from_elem(channels, T::one()),
        }
    }
}

#[derive(Clone, Copy)]
struct Geom {
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
}

/// Gather patches of `src` [B,C,Hs,Ws] over a gh×gw grid into
/// [B*gh*gw, C*kh*kw]. Out-of-bounds positions read as zero.
fn im2col<T: Scalar>(src: &ArrayD<T>, gh: usize, gw: usize, geo: Geom) -> Array2<T> {
    let s4 = src.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, hs, ws) = s4.dim();
    let std = s4.as_standard_layout();
    let sl = std.as_slice().unwrap();
    let ckk = c * geo.kh * geo.kw;
    let mut out = Vec::with_capacity(b * gh * gw * ckk);
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let y0 = (gy * geo.sh) as isize - geo.ph as isize;
                let x0 = (gx * geo.sw) as isize - geo.pw as isize;
                for ci in 0..c {
                    let base = (bi * c + ci) * hs;
                    for ky in 0..geo.kh {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= hs as isize {
                            out.extend(std::iter::repeat(T::zero()).take(geo.kw));
                            continue;
                        }
                        let row = (base + y as usize) * ws;
                        for kx in 0..geo.kw {
                            let x = x0 + kx as isize;
                            if x < 0 || x >= ws as isize {
                                out.push(T::zero());
                            } else {
                                out.push(sl[row + x as usize]);
                            }
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((b * gh * gw, ckk), out).unwrap()
}

/// Adjoint of `im2col`: scatter-add columns back onto a [B,C,Hc,Wc] canvas.
fn col2im<T: Scalar>(
    cols: &Array2<T>,
    b: usize,
    c: usize,
    hc: usize,
    wc: usize,
    gh: usize,
    gw: usize,
    geo: Geom,
) -> ArrayD<T> {
    let std = cols.as_standard_layout();
    let cl = std.as_slice().unwrap();
    let ckk = c * geo.kh * geo.kw;
    assert_eq!(cols.dim(), (b * gh * gw, ckk));
    let mut canvas = vec![T::zero(); b * c * hc * wc];
    let mut row = 0usize;
    for bi in 0..b {
        for gy in 0..gh {
            for gx in 0..gw {
                let y0 = (gy * geo.sh) as isize - geo.ph as isize;
                let x0 = (gx * geo.sw) as isize - geo.pw as isize;
                let r = row * ckk;
                let mut idx = r;
                for ci in 0..c {
                    let base = (bi * c + ci) * hc;
                    for ky in 0..geo.kh {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= hc as isize {
                            idx += geo.kw;
                            continue;
                        }
                        let crow = (base + y as usize) * wc;
                        for kx in 0..geo.kw {
                            let x = x0 + kx as isize;
                            if x >= 0 && x < wc as isize {
                                canvas[crow + x as usize] += cl[idx];
                            }
                            idx += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, hc, wc]), canvas).unwrap()
}

/// [B,Co,H,W] -> row-major [B*H*W, Co]
fn nchw_to_rows<T: Scalar>(a: &ArrayD<T>) -> Array2<T> {
    let v = a.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = v.dim();
    let mut out = Vec::with_capacity(b * h * w * c);
    let std = v.as_standard_layout();
    let sl = std.as_slice().unwrap();
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    out.push(sl[((bi * c + ci) * h + y) * w + x]);
                }
            }
        }
    }
    Array2::from_shape_vec((b * h * w, c), out).unwrap()
}

/// row-major [B*H*W, Co] -> [B,Co,H,W]
fn rows_to_nchw<T: Scalar>(m: &Array2<T>, b: usize, c: usize, h: usize, w: usize) -> ArrayD<T> {
    let std = m.as_standard_layout();
    let sl = std.as_slice().unwrap();
    let mut out = vec![T::zero(); b * c * h * w];
    let mut row = 0usize;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ci in 0..c {
                    out[((bi * c + ci) * h + y) * w + x] = sl[row * c + ci];
                }
                row += 1;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[b, c, h, w]), out).unwrap()
}

fn add_channel_bias<T: Scalar>(out: &mut ArrayD<T>, bias: &ArrayD<T>) {
    let mut v = out.view_mut().into_dimensionality::<Ix4>().unwrap();
    let b1 = bias.view().into_dimensionality::<ndarray::Ix1>().unwrap();
    for (ci, mut ch) in v.axis_iter_mut(Axis(1)).enumerate() {
        ch += b1[ci];
    }
}

impl<T: Scalar> Graph<T> {
    /// conv2d: x [B,Ci,H,W] * w [Co,Ci,kh,kw] (+ bias [Co]), stride (sh,sw),
    /// zero padding (ph,pw).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        let (b, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let geo = Geom {
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        };
        let ho = (h + 2 * geo.ph - kh) / geo.sh + 1;
        let wo = (wd + 2 * geo.pw - kw) / geo.sw + 1;

        let col = im2col(self.value(x), ho, wo, geo);
        let wmat = reshape_arr(self.value(w), &[co, ci * kh * kw])
            .into_dimensionality::<Ix2>()
            .unwrap();
        let out_mat = col.dot(&wmat.t());
        let mut out = rows_to_nchw(&out_mat, b, co, ho, wo);
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv));
        }
        let needs = self.needs_grad(x)
            || self.needs_grad(w)
            || bias.map(|bv| self.needs_grad(bv)).unwrap_or(false);
        self.push_op(
            out,
            needs,
            Box::new(move |vals, g, sink| {
                let g_mat = nchw_to_rows(g);
                let wmat = reshape_arr(&vals[w.0], &[co, ci * kh * kw])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                if sink.wants(w) {
                    let gw = g_mat.t().dot(&col);
                    sink.add(w, reshape_arr(&gw.into_dyn(), &[co, ci, kh, kw]));
                }
                if sink.wants(x) {
                    let gcol = g_mat.dot(&wmat);
                    sink.add(x, col2im(&gcol, b, ci, h, wd, ho, wo, geo));
                }
                if let Some(bv) = bias {
                    if sink.wants(bv) {
                        let gb = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                        sink.add(bv, gb.into_dyn());
                    }
                }
            }),
        )
    }

    /// Fractionally-strided (transposed) convolution:
    /// x [B,Ci,H,W] * w [Ci,Co,kh,kw] -> [B,Co,(H-1)sh+kh-2ph,(W-1)sw+kw-2pw].
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 4);
        assert_eq!(ws.len(), 4);
        assert_eq!(xs[1], ws[0], "conv2d_transpose: channel mismatch");
        let (b, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[1], ws[2], ws[3]);
        let geo = Geom {
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            ph: pad.0,
            pw: pad.1,
        };
        let ho = (h - 1) * geo.sh + kh - 2 * geo.ph;
        let wo = (wd - 1) * geo.sw + kw - 2 * geo.pw;

        let xmat = nchw_to_rows(self.value(x));
        let wmat = reshape_arr(self.value(w), &[ci, co * kh * kw])
            .into_dimensionality::<Ix2>()
            .unwrap();
        let prod = xmat.dot(&wmat);
        let mut out = col2im(&prod, b, co, ho, wo, h, wd, geo);
        if let Some(bv) = bias {
            add_channel_bias(&mut out, self.value(bv));
        }
        let needs = self.needs_grad(x)
            || self.needs_grad(w)
            || bias.map(|bv| self.needs_grad(bv)).unwrap_or(false);
        self.push_op(
            out,
            needs,
            Box::new(move |vals, g, sink| {
                let colg = im2col(g, h, wd, geo);
                let wmat = reshape_arr(&vals[w.0], &[ci, co * kh * kw])
                    .into_dimensionality::<Ix2>()
                    .unwrap();
                if sink.wants(x) {
                    let gx = colg.dot(&wmat.t());
                    sink.add(x, rows_to_nchw(&gx, b, ci, h, wd));
                }
                if sink.wants(w) {
                    let gw = xmat.t().dot(&colg);
                    sink.add(w, reshape_arr(&gw.into_dyn(), &[ci, co, kh, kw]));
                }
                if let Some(bv) = bias {
                    if sink.wants(bv) {
                        let gb = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                        sink.add(bv, gb.into_dyn());
                    }
                }
            }),
        )
    }

    /// Max pooling over the last axis of x [B,C,L], kernel k, stride s.
    pub fn max_pool1d(&mut self, x: Var, k: usize, s: usize) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3);
        let (b, c, l) = (xs[0], xs[1], xs[2]);
        assert!(l >= k);
        let lo = (l - k) / s + 1;
        let xv = self.value(x);
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, lo]));
        let mut arg = vec![0usize; b * c * lo];
        for bi in 0..b {
            for ci in 0..c {
                for oi in 0..lo {
                    let start = oi * s;
                    let mut best = xv[[bi, ci, start]];
                    let mut bi_idx = start;
                    for t in start + 1..start + k {
                        let v = xv[[bi, ci, t]];
                        if v > best {
                            best = v;
                            bi_idx = t;
                        }
                    }
                    out[[bi, ci, oi]] = best;
                    arg[(bi * c + ci) * lo + oi] = bi_idx;
                }
            }
        }
        let needs = self.needs_grad(x);
        self.push_op(
            out,
            needs,
            Box::new(move |_, g, sink| {
                let mut dx = ArrayD::<T>::zeros(IxDyn(&[b, c, l]));
                for bi in 0..b {
                    for ci in 0..c {
                        for oi in 0..lo {
                            let t = arg[(bi * c + ci) * lo + oi];
                            dx[[bi, ci, t]] = dx[[bi, ci, t]] + g[[bi, ci, oi]];
                        }
                    }
                }
                sink.add(x, dx);
            }),
        )
    }

    /// Spatial batch normalization over x [B,C,H,W].
    ///
    /// Train phases normalize with batch statistics (biased variance);
    /// `Phase::Train` additionally folds them into `stats` with the given
    /// momentum (unbiased variance, torch convention). Eval normalizes with
    /// the running statistics.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BnStats<T>,
        momentum: T,
        eps: T,
        phase: Phase,
    ) -> Var {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 4);
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        assert_eq!(stats.mean.len(), c);
        let n = b * h * w;
        let nf = T::from_usize(n);

        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (mean, var) = match phase {
            Phase::Eval => (stats.mean.clone(), stats.var.clone()),
            _ => {
                let mut mean = Array1::<T>::zeros(c);
                let mut var = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let ch = xv.index_axis(Axis(1), ci);
                    let m = ch.sum() / nf;
                    let mut v = T::zero();
                    for &e in ch.iter() {
                        let d = e - m;
                        v = v + d * d;
                    }
                    mean[ci] = m;
                    var[ci] = v / nf;
                }
                (mean, var)
            }
        };
        if phase == Phase::Train {
            let unbias = if n > 1 {
                nf / T::from_usize(n - 1)
            } else {
                T::one()
            };
            for ci in 0..c {
                stats.mean[ci] =
                    (T::one() - momentum) * stats.mean[ci] + momentum * mean[ci];
                stats.var[ci] =
                    (T::one() - momentum) * stats.var[ci] + momentum * var[ci] * unbias;
            }
        }
        let inv_std: Array1<T> = var.mapv(|v| T::one() / (v + eps).sqrt());

        let gview = self.value(gamma);
        let bview = self.value(beta);
        let g1 = Array1::from_iter(gview.iter().cloned());
        let b1 = Array1::from_iter(bview.iter().cloned());
        let mut xhat = self.value(x).clone();
        {
            let mut xh = xhat.view_mut().into_dimensionality::<Ix4>().unwrap();
            for ci in 0..c {
                let m = mean[ci];
                let is = inv_std[ci];
                xh.index_axis_mut(Axis(1), ci)
                    .mapv_inplace(|v| (v - m) * is);
            }
        }
        let mut out = xhat.clone();
        {
            let mut ov = out.view_mut().into_dimensionality::<Ix4>().unwrap();
            for ci in 0..c {
                let ga = g1[ci];
                let be = b1[ci];
                ov.index_axis_mut(Axis(1), ci).mapv_inplace(|v| v * ga + be);
            }
        }

        let batch_stats = phase != Phase::Eval;
        let needs =
            self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        self.push_op(
            out,
            needs,
            Box::new(move |vals, g, sink| {
                let gv = g.view().into_dimensionality::<Ix4>().unwrap();
                let xh = xhat.view().into_dimensionality::<Ix4>().unwrap();
                let gamma1 = Array1::from_iter(vals[gamma.0].iter().cloned());
                let mut dgamma = Array1::<T>::zeros(c);
                let mut dbeta = Array1::<T>::zeros(c);
                for ci in 0..c {
                    let gch = gv.index_axis(Axis(1), ci);
                    let xch = xh.index_axis(Axis(1), ci);
                    let mut dg = T::zero();
                    let mut db = T::zero();
                    for (&ge, &xe) in gch.iter().zip(xch.iter()) {
                        dg = dg + ge * xe;
                        db = db + ge;
                    }
                    dgamma[ci] = dg;
                    dbeta[ci] = db;
                }
                if sink.wants(x) {
                    let mut dx = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
                    {
                        let mut dxv =
                            dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                        for ci in 0..c {
                            let scale = gamma1[ci] * inv_std[ci];
                            let gch = gv.index_axis(Axis(1), ci);
                            let xch = xh.index_axis(Axis(1), ci);
                            if batch_stats {
                                let mean_g = dbeta[ci] / nf;
                                let mean_gx = dgamma[ci] / nf;
                                let mut dch = dxv.index_axis_mut(Axis(1), ci);
                                for ((d, &ge), &xe) in
                                    dch.iter_mut().zip(gch.iter()).zip(xch.iter())
                                {
                                    *d = scale * (ge - mean_g - xe * mean_gx);
                                }
                            } else {
                                let mut dch = dxv.index_axis_mut(Axis(1), ci);
                                for (d, &ge) in dch.iter_mut().zip(gch.iter()) {
                                    *d = scale * ge;
                                }
                            }
                        }
                    }
                    sink.add(x, dx);
                }
                sink.add(gamma, dgamma.into_dyn());
                sink.add(beta, dbeta.into_dyn());
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_shapes_and_adjoint() {
        // col2im must be the exact adjoint of im2col: <im2col(x), y> == <x, col2im(y)>
        let geo = Geom {
            kh: 3,
            kw: 3,
            sh: 2,
            sw: 2,
            ph: 1,
            pw: 1,
        };
        let x = ArrayD::from_shape_vec(
            IxDyn(&[1, 2, 4, 4]),
            (0..32).map(|i| i as f64 * 0.1).collect(),
        )
        .unwrap();
        let gh = (4 + 2 - 3) / 2 + 1;
        let gw = gh;
        let col = im2col(&x, gh, gw, geo);
        let y = col.mapv(|v| v * 2.0 + 0.3);
        let back = col2im(&y, 1, 2, 4, 4, gh, gw, geo);
        let lhs: f64 = col.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn transposed_conv_upsamples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(ArrayD::zeros(IxDyn(&[2, 3, 4, 4])));
        let w = g.constant(ArrayD::from_elem(IxDyn(&[3, 5, 4, 4]), 0.01));
        let y = g.conv2d_transpose(x, w, None, (2, 2), (1, 1));
        assert_eq!(g.value(y).shape(), &[2, 5, 8, 8]);
    }
}
