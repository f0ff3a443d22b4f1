//! Layers, parameter tensors and the Adam optimizer.
//!
//! A layer owns `PTensor`s (value + Adam moments). Per step it is bound into
//! a fresh graph (`bind`), producing `Var` handles the forward pass uses;
//! the optimizer then pairs each `PTensor` with its bound `Var`'s gradient.

use crate::autodiff::{BnStats, Graph, Phase, Var};
use crate::scalar::Scalar;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Trainable tensor: value plus first/second Adam moments.
#[derive(Debug, Clone)]
pub struct PTensor<T: Scalar> {
    pub v: ArrayD<T>,
    pub m: ArrayD<T>,
    pub s: ArrayD<T>,
}

impl<T: Scalar> PTensor<T> {
    pub fn new(v: ArrayD<T>) -> Self {
        let m = ArrayD::zeros(v.raw_dim());
        let s = ArrayD::zeros(v.raw_dim());
        PTensor { v, m, s }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new(ArrayD::zeros(IxDyn(shape)))
    }
}

/// N(0, std) tensor; draws f64 from the rng so the stream is identical for
/// f32 and f64 instantiations.
pub fn randn<T: Scalar, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<T> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        let x: f64 = StandardNormal.sample(rng);
        data.push(T::from_f64(x * std));
    }
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

pub fn randn_vec<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

// ---------------------------------------------------------------- linear

#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub w: PTensor<T>, // [out, in]
    pub b: PTensor<T>, // [out]
}

#[derive(Clone, Copy)]
pub struct LinearBind {
    pub w: Var,
    pub b: Var,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng>(in_dim: usize, out_dim: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            w: PTensor::new(randn(&[out_dim, in_dim], std, rng)),
            b: PTensor::zeros(&[out_dim]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.v.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.v.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph<T>, frozen: bool) -> LinearBind {
        if frozen {
            LinearBind {
                w: g.constant(self.w.v.clone()),
                b: g.constant(self.b.v.clone()),
            }
        } else {
            LinearBind {
                w: g.param(self.w.v.clone()),
                b: g.param(self.b.v.clone()),
            }
        }
    }

    /// x [N,in] -> [N,out]
    pub fn forward(g: &mut Graph<T>, bind: LinearBind, x: Var) -> Var {
        let y = g.matmul(x, bind.w, false, true);
        g.add_bias_rows(y, bind.b)
    }
}

// ---------------------------------------------------------------- conv

#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub w: PTensor<T>, // [Co,Ci,kh,kw]
    pub b: PTensor<T>, // [Co]
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

#[derive(Clone, Copy)]
pub struct ConvBind {
    pub w: Var,
    pub b: Var,
}

impl<T: Scalar> Conv2d<T> {
    pub fn init<R: Rng>(
        ci: usize,
        co: usize,
        k: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> Self {
        Conv2d {
            w: PTensor::new(randn(&[co, ci, k.0, k.1], std, rng)),
            b: PTensor::zeros(&[co]),
            stride,
            pad,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, frozen: bool) -> ConvBind {
        if frozen {
            ConvBind {
                w: g.constant(self.w.v.clone()),
                b: g.constant(self.b.v.clone()),
            }
        } else {
            ConvBind {
                w: g.param(self.w.v.clone()),
                b: g.param(self.b.v.clone()),
            }
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, bind: ConvBind, x: Var) -> Var {
        g.conv2d(x, bind.w, Some(bind.b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct ConvT2d<T: Scalar> {
    pub w: PTensor<T>, // [Ci,Co,kh,kw]
    pub b: PTensor<T>, // [Co]
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl<T: Scalar> ConvT2d<T> {
    pub fn init<R: Rng>(
        ci: usize,
        co: usize,
        k: (usize, usize),
        stride: (usize, usize),
        pad: (usize, usize),
        std: f64,
        rng: &mut R,
    ) -> Self {
        ConvT2d {
            w: PTensor::new(randn(&[ci, co, k.0, k.1], std, rng)),
            b: PTensor::zeros(&[co]),
            stride,
            pad,
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, frozen: bool) -> ConvBind {
        if frozen {
            ConvBind {
                w: g.constant(self.w.v.clone()),
                b: g.constant(self.b.v.clone()),
            }
        } else {
            ConvBind {
                w: g.param(self.w.v.clone()),
                b: g.param(self.b.v.clone()),
            }
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, bind: ConvBind, x: Var) -> Var {
        g.conv2d_transpose(x, bind.w, Some(bind.b), self.stride, self.pad)
    }
}

// ---------------------------------------------------------------- batch norm

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: PTensor<T>,
    pub beta: PTensor<T>,
    pub stats: BnStats<T>,
    pub momentum: T,
    pub eps: T,
}

#[derive(Clone, Copy)]
pub struct BnBind {
    pub gamma: Var,
    pub beta: Var,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            gamma: PTensor::new(ArrayD::from_elem(IxDyn(&[channels]), T::one())),
            beta: PTensor::zeros(&[channels]),
            stats: BnStats::new(channels),
            momentum: T::from_f64(0.1),
            eps: T::from_f64(1e-5),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, frozen: bool) -> BnBind {
        if frozen {
            BnBind {
                gamma: g.constant(self.gamma.v.clone()),
                beta: g.constant(self.beta.v.clone()),
            }
        } else {
            BnBind {
                gamma: g.param(self.gamma.v.clone()),
                beta: g.param(self.beta.v.clone()),
            }
        }
    }

    pub fn forward(&mut self, g: &mut Graph<T>, bind: BnBind, x: Var, phase: Phase) -> Var {
        g.batch_norm2d(
            x,
            bind.gamma,
            bind.beta,
            &mut self.stats,
            self.momentum,
            self.eps,
            phase,
        )
    }
}

// ---------------------------------------------------------------- rnn

#[derive(Debug, Clone)]
pub struct Rnn<T: Scalar> {
    pub wx: PTensor<T>, // [H, C]
    pub wh: PTensor<T>, // [H, H]
    pub b: PTensor<T>,  // [H]
}

#[derive(Clone, Copy)]
pub struct RnnBind {
    pub wx: Var,
    pub wh: Var,
    pub b: Var,
}

impl<T: Scalar> Rnn<T> {
    /// Recurrent weights start near a damped identity so the sweep neither
    /// explodes nor forgets over the caption lengths used here.
    pub fn init<R: Rng>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let wx = randn(&[hidden, in_dim], (1.0 / in_dim as f64).sqrt(), rng);
        let mut wh = randn::<T, R>(&[hidden, hidden], 0.01, rng);
        for i in 0..hidden {
            wh[[i, i]] = wh[[i, i]] + T::from_f64(0.9);
        }
        Rnn {
            wx: PTensor::new(wx),
            wh: PTensor::new(wh),
            b: PTensor::zeros(&[hidden]),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>, frozen: bool) -> RnnBind {
        if frozen {
            RnnBind {
                wx: g.constant(self.wx.v.clone()),
                wh: g.constant(self.wh.v.clone()),
                b: g.constant(self.b.v.clone()),
            }
        } else {
            RnnBind {
                wx: g.param(self.wx.v.clone()),
                wh: g.param(self.wh.v.clone()),
                b: g.param(self.b.v.clone()),
            }
        }
    }

    /// x [B,C,L] -> final hidden state [B,H]
    pub fn forward(g: &mut Graph<T>, bind: RnnBind, x: Var) -> Var {
        g.rnn_last(x, bind.wx, bind.wh, bind.b)
    }
}

// ---------------------------------------------------------------- adam

/// Adam with shared step counter across the parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    /// One update over (parameter, gradient) pairs; gradients may be absent
    /// for tensors that did not participate. Applies global-norm clipping
    /// when `clip` is given. Returns (global gradient norm, clipped?).
    pub fn step<T: Scalar>(
        &mut self,
        pairs: Vec<(&mut PTensor<T>, Option<&ArrayD<T>>)>,
        clip: Option<f64>,
    ) -> (f64, bool) {
        self.t += 1;
        let mut sq = 0.0f64;
        for (_, g) in &pairs {
            if let Some(g) = g {
                for &e in g.iter() {
                    let x = e.to_f64();
                    sq += x * x;
                }
            }
        }
        let norm = sq.sqrt();
        let (factor, clipped) = match clip {
            Some(cap) if norm > cap && norm > 0.0 => (cap / norm, true),
            _ => (1.0, false),
        };
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one = T::one();
        let corr1 = T::from_f64(1.0 - self.beta1.powi(self.t as i32));
        let corr2 = T::from_f64(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);
        let factor = T::from_f64(factor);
        for (p, g) in pairs {
            let Some(g) = g else { continue };
            ndarray::Zip::from(&mut p.m)
                .and(g)
                .for_each(|m, &gv| *m = b1 * *m + (one - b1) * gv * factor);
            ndarray::Zip::from(&mut p.s)
                .and(g)
                .for_each(|s, &gv| *s = b2 * *s + (one - b2) * (gv * factor) * (gv * factor));
            ndarray::Zip::from(&mut p.v)
                .and(&p.m)
                .and(&p.s)
                .for_each(|v, &m, &s| {
                    let mh = m / corr1;
                    let sh = s / corr2;
                    *v = *v - lr * mh / (sh.sqrt() + eps);
                });
        }
        (norm, clipped)
    }
}
