//! Row-separate transforms `Theta`, `Phi`, `Xi` and their Jacobians.
//!
//! All three share one shape. Level `w` of the transform is
//! `x(w) = input(w) + sum_s c[w][s] * out_s(x) + drift_w(x(0..w-1))`,
//! where `out_s` is the side's own output sequence (`F` for `Theta`, `G2` for `Phi`,
//! `F1` for `Xi`). The outputs are also the functions whose moments feed the opposite
//! Gaussian law, which is why one evaluator serves both purposes.

use std::fmt;
use std::sync::Arc;

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::dynamics::CoefTable;
use crate::programs::{Row, RowFunction};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    Theta,
    Phi,
    Xi,
    /// AMP state evolution: `x = input`.
    Identity,
}

impl MapKind {
    /// Largest `s` with a coefficient term at level `w`.
    pub fn s_max(self, w: usize) -> usize {
        match self {
            MapKind::Theta | MapKind::Phi => w.saturating_sub(1),
            MapKind::Xi => w,
            MapKind::Identity => 0,
        }
    }
}

#[derive(Clone)]
pub struct TransformMap {
    pub kind: MapKind,
    /// `outs[t-1]` is `out_t`.
    pub outs: Vec<Row>,
    /// `drift[w-1]` is the additive term of level `w` (arity `w`); empty for `Identity`.
    pub drift: Vec<Row>,
    /// `coefs.get(w, s)`: coefficients `b`, `f` or `g` of level `w` (for `Identity`, the
    /// Onsager table of the AMP).
    pub coefs: CoefTable,
}

impl fmt::Debug for TransformMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TransformMap")
            .field("kind", &self.kind)
            .field("horizon", &self.outs.len())
            .field("dim", &self.coefs.dim())
            .finish()
    }
}

/// Scratch buffers for one row evaluation, sized for levels `0..=max_level`.
pub struct Workspace {
    stride: usize,
    pub x: Vec<f64>,
    /// `jac[w * stride + j] = d x(w) / d input(j)`.
    pub jac: Vec<f64>,
    pub out: Vec<f64>,
    /// `out_jac[s * stride + j] = d out_s / d input(j)`.
    pub out_jac: Vec<f64>,
    n_out: usize,
    grad: Vec<f64>,
}

impl Workspace {
    pub fn new(max_level: usize) -> Self {
        let stride = max_level + 1;
        Workspace {
            stride,
            x: vec![0.0; stride],
            jac: vec![0.0; stride * stride],
            out: vec![0.0; stride + 1],
            out_jac: vec![0.0; (stride + 1) * stride],
            n_out: 0,
            grad: vec![0.0; stride + 1],
        }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    #[inline]
    pub fn out_partial(&self, s: usize, j: usize) -> f64 {
        self.out_jac[s * self.stride + j]
    }
}

impl TransformMap {
    pub fn new(kind: MapKind, outs: Vec<Row>, drift: Vec<Row>, dim: usize) -> Self {
        let horizon = outs.len();
        TransformMap { kind, outs, drift, coefs: CoefTable::zeros(horizon, dim) }
    }

    pub fn horizon(&self) -> usize {
        self.outs.len()
    }

    pub fn dim(&self) -> usize {
        self.coefs.dim()
    }

    /// Input levels consumed by `out_t`: `0..=out_level(t)`.
    pub fn out_level(&self, t: usize) -> usize {
        self.outs[t - 1].arity() - 1
    }

    /// Evaluates levels `0..=level` of the transform on one row, filling `ws.x` (and
    /// `ws.jac` when `with_jac`). Outputs needed along the way are cached in `ws.out`.
    pub fn forward(&self, row: usize, input: &[f64], level: usize, ws: &mut Workspace, with_jac: bool) {
        let st = ws.stride;
        debug_assert!(level < st && input.len() > level);
        ws.n_out = 0;
        if with_jac {
            ws.jac[..(level + 1) * st].iter_mut().for_each(|v| *v = 0.0);
        }
        for w in 0..=level {
            if with_jac {
                ws.jac[w * st + w] = 1.0;
            }
            if w == 0 || self.kind == MapKind::Identity {
                ws.x[w] = input[w];
                continue;
            }
            let s_max = self.kind.s_max(w);
            self.ensure_outs(row, ws, s_max, with_jac);
            let mut val = input[w];
            for s in 1..=s_max {
                let c = self.coefs.get(w, s)[row];
                if c == 0.0 {
                    continue;
                }
                val += c * ws.out[s];
                if with_jac {
                    for j in 0..w {
                        ws.jac[w * st + j] += c * ws.out_jac[s * st + j];
                    }
                }
            }
            let d = &self.drift[w - 1];
            if !d.is_zero() {
                val += d.eval(row, &ws.x[..w]);
                if with_jac {
                    d.gradient(row, &ws.x[..w], &mut ws.grad[..w]);
                    for i in 0..w {
                        let g = ws.grad[i];
                        if g != 0.0 {
                            for j in 0..=i {
                                ws.jac[w * st + j] += g * ws.jac[i * st + j];
                            }
                        }
                    }
                }
            }
            ws.x[w] = val;
        }
    }

    /// Computes `out_s` for every `s <= upto` not yet cached. The levels each output
    /// consumes must already be in `ws.x`.
    pub fn ensure_outs(&self, row: usize, ws: &mut Workspace, upto: usize, with_jac: bool) {
        let st = ws.stride;
        for s in ws.n_out + 1..=upto {
            let f = &self.outs[s - 1];
            let a = f.arity();
            ws.out[s] = f.eval(row, &ws.x[..a]);
            if with_jac {
                ws.out_jac[s * st..(s + 1) * st].iter_mut().for_each(|v| *v = 0.0);
                if f.is_zero() {
                    continue;
                }
                f.gradient(row, &ws.x[..a], &mut ws.grad[..a]);
                for i in 0..a {
                    let g = ws.grad[i];
                    if g != 0.0 {
                        for j in 0..=i {
                            ws.out_jac[s * st + j] += g * ws.jac[i * st + j];
                        }
                    }
                }
            }
        }
        ws.n_out = ws.n_out.max(upto);
    }

    /// Column `level` of the transform applied to whole iterate vectors `input[0..=level]`.
    pub fn apply_column(&self, input: &[Array1<f64>], level: usize) -> Array1<f64> {
        let dim = self.dim();
        let mut ws = Workspace::new(level);
        let mut buf = vec![0.0; level + 1];
        Array1::from_shape_fn(dim, |row| {
            for (b, col) in buf.iter_mut().zip(input) {
                *b = col[row];
            }
            self.forward(row, &buf, level, &mut ws, false);
            ws.x[level]
        })
    }
}

/// `out_t` composed with the transform, as a function of the Gaussian path
/// `input(0..out_level(t))`: `F_t o Theta_{t-1}`, `G2_t o Phi_t` or `F1_t o Xi_{t-1}`.
#[derive(Clone)]
pub struct ComposedRow {
    pub map: Arc<TransformMap>,
    pub index: usize,
}

impl ComposedRow {
    fn run(&self, row: usize, h: &[f64], with_jac: bool) -> Workspace {
        let level = self.map.out_level(self.index);
        let mut ws = Workspace::new(level);
        self.map.forward(row, h, level, &mut ws, with_jac);
        self.map.ensure_outs(row, &mut ws, self.index, with_jac);
        ws
    }
}

impl RowFunction for ComposedRow {
    fn arity(&self) -> usize {
        self.map.outs[self.index - 1].arity()
    }
    fn eval(&self, row: usize, h: &[f64]) -> f64 {
        self.run(row, h, false).out[self.index]
    }
    fn partial(&self, row: usize, h: &[f64], which: usize) -> f64 {
        self.run(row, h, true).out_partial(self.index, which)
    }
    fn gradient(&self, row: usize, h: &[f64], out: &mut [f64]) {
        let ws = self.run(row, h, true);
        for (j, o) in out.iter_mut().enumerate().take(self.arity()) {
            *o = ws.out_partial(self.index, j);
        }
    }
    fn is_zero(&self) -> bool {
        self.map.outs[self.index - 1].is_zero()
    }
    fn describe(&self) -> String {
        format!("{} o {:?}", self.map.outs[self.index - 1].describe(), self.map.kind)
    }
}
