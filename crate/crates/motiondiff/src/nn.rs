//! Differentiable primitives for the denoiser: a flat named parameter
//! layout plus forward/backward pairs for linear maps, dilated 1-D
//! convolutions, layer norm, GELU, gates, and row softmax. Everything is
//! f64 and hand-differentiated; each `*_bwd` consumes exactly what its
//! `*_fwd` cached.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Ordered collection of slots; the order defines the flat vector layout
/// and the checkpoint record order.
#[derive(Debug, Clone, Default)]
pub struct Layout {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
    total: usize,
}

impl Layout {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) {
        let name = name.into();
        debug_assert!(!self.index.contains_key(&name), "duplicate slot {name}");
        let slot = Slot {
            name: name.clone(),
            shape: shape.to_vec(),
            offset: self.total,
        };
        self.total += slot.len();
        self.index.insert(name, self.slots.len());
        self.slots.push(slot);
    }

    pub fn slot(&self, name: &str) -> Result<&Slot> {
        self.index
            .get(name)
            .map(|&i| &self.slots[i])
            .ok_or_else(|| Error::config(format!("unknown parameter slot '{name}'")))
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn view1<'a>(&self, data: &'a [f64], name: &str) -> Result<ArrayView1<'a, f64>> {
        let s = self.slot(name)?;
        Ok(ArrayView1::from(&data[s.offset..s.offset + s.len()]))
    }

    pub fn view2<'a>(&self, data: &'a [f64], name: &str) -> Result<ArrayView2<'a, f64>> {
        let s = self.slot(name)?;
        if s.shape.len() != 2 {
            return Err(Error::config(format!("slot '{name}' is not rank 2")));
        }
        ArrayView2::from_shape((s.shape[0], s.shape[1]), &data[s.offset..s.offset + s.len()])
            .map_err(|e| Error::config(format!("slot '{name}': {e}")))
    }

    pub fn view3<'a>(&self, data: &'a [f64], name: &str) -> Result<ArrayView3<'a, f64>> {
        let s = self.slot(name)?;
        if s.shape.len() != 3 {
            return Err(Error::config(format!("slot '{name}' is not rank 3")));
        }
        ArrayView3::from_shape(
            (s.shape[0], s.shape[1], s.shape[2]),
            &data[s.offset..s.offset + s.len()],
        )
        .map_err(|e| Error::config(format!("slot '{name}': {e}")))
    }

    /// Accumulate a gradient contribution into the flat gradient vector.
    pub fn add_grad(&self, grad: &mut [f64], name: &str, contrib: &[f64]) -> Result<()> {
        self.add_grad_from(grad, name, contrib.iter())
    }

    /// Accumulate from any exact-size iterator in logical (row-major) order;
    /// works for ndarray views regardless of their memory layout.
    pub fn add_grad_from<'a, I>(&self, grad: &mut [f64], name: &str, contrib: I) -> Result<()>
    where
        I: ExactSizeIterator<Item = &'a f64>,
    {
        let s = self.slot(name)?;
        if contrib.len() != s.len() {
            return Err(Error::contract(format!(
                "gradient for '{name}' has {} values, slot holds {}",
                contrib.len(),
                s.len()
            )));
        }
        for (g, c) in grad[s.offset..s.offset + s.len()].iter_mut().zip(contrib) {
            *g += c;
        }
        Ok(())
    }
}

/// How convolutions (and TISA offsets) treat sequence boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    /// Out-of-range frames read as zero. The production mode.
    #[default]
    Zero,
    /// Indices wrap around; used by the translation-equivariance tests.
    Circular,
}

/// `y = x W^T + b` over rows; `x` is T×in, `w` is out×in.
pub fn linear_fwd(x: &Array2<f64>, w: &ArrayView2<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let mut y = x.dot(&w.t());
    y += b;
    y
}

/// Returns `(dx, dw, db)` for [`linear_fwd`].
pub fn linear_bwd(
    x: &Array2<f64>,
    w: &ArrayView2<f64>,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let dx = dy.dot(w);
    let dw = dy.t().dot(x);
    let db = dy.sum_axis(Axis(0));
    (dx, dw, db)
}

/// Same-length 1-D convolution over the time axis with symmetric padding:
/// `y[t,o] = b[o] + sum_{k,i} x[t + (k - (K-1)/2) * dilation, i] * w[o,i,k]`.
pub fn conv1d_fwd(
    x: &Array2<f64>,
    w: &ArrayView3<f64>,
    b: &ArrayView1<f64>,
    dilation: usize,
    padding: PaddingMode,
) -> Array2<f64> {
    let (t_len, _in_c) = x.dim();
    let (out_c, in_c, kernel) = w.dim();
    let half = (kernel as isize - 1) / 2;
    let mut y = Array2::zeros((t_len, out_c));
    for t in 0..t_len {
        for k in 0..kernel {
            let off = (k as isize - half) * dilation as isize;
            let Some(src) = resolve_index(t, off, t_len, padding) else {
                continue;
            };
            for o in 0..out_c {
                let mut acc = 0.0;
                for i in 0..in_c {
                    acc += x[[src, i]] * w[[o, i, k]];
                }
                y[[t, o]] += acc;
            }
        }
        for o in 0..out_c {
            y[[t, o]] += b[o];
        }
    }
    y
}

/// Returns `(dx, dw, db)` for [`conv1d_fwd`].
pub fn conv1d_bwd(
    x: &Array2<f64>,
    w: &ArrayView3<f64>,
    dy: &Array2<f64>,
    dilation: usize,
    padding: PaddingMode,
) -> (Array2<f64>, Array3<f64>, Array1<f64>) {
    let (t_len, in_c) = x.dim();
    let (out_c, _, kernel) = w.dim();
    let half = (kernel as isize - 1) / 2;
    let mut dx = Array2::zeros((t_len, in_c));
    let mut dw = Array3::zeros((out_c, in_c, kernel));
    let db = dy.sum_axis(Axis(0));
    for t in 0..t_len {
        for k in 0..kernel {
            let off = (k as isize - half) * dilation as isize;
            let Some(src) = resolve_index(t, off, t_len, padding) else {
                continue;
            };
            for o in 0..out_c {
                let g = dy[[t, o]];
                if g == 0.0 {
                    continue;
                }
                for i in 0..in_c {
                    dx[[src, i]] += g * w[[o, i, k]];
                    dw[[o, i, k]] += g * x[[src, i]];
                }
            }
        }
    }
    (dx, dw, db)
}

fn resolve_index(t: usize, off: isize, t_len: usize, padding: PaddingMode) -> Option<usize> {
    let raw = t as isize + off;
    match padding {
        PaddingMode::Zero => {
            if raw < 0 || raw >= t_len as isize {
                None
            } else {
                Some(raw as usize)
            }
        }
        PaddingMode::Circular => Some(raw.rem_euclid(t_len as isize) as usize),
    }
}

const LN_EPS: f64 = 1e-5;

/// Per-frame normalization state needed by the backward pass.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Layer norm over the channel axis with learned gain and bias.
pub fn layer_norm_fwd(
    x: &Array2<f64>,
    gain: &ArrayView1<f64>,
    bias: &ArrayView1<f64>,
) -> (Array2<f64>, LnCache) {
    let (t_len, c) = x.dim();
    let mut xhat = Array2::zeros((t_len, c));
    let mut inv_std = Array1::zeros(t_len);
    let mut y = Array2::zeros((t_len, c));
    for t in 0..t_len {
        let row = x.row(t);
        let mean = row.sum() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[t] = inv;
        for j in 0..c {
            let h = (x[[t, j]] - mean) * inv;
            xhat[[t, j]] = h;
            y[[t, j]] = h * gain[j] + bias[j];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)` for [`layer_norm_fwd`].
pub fn layer_norm_bwd(
    gain: &ArrayView1<f64>,
    cache: &LnCache,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let (t_len, c) = cache.xhat.dim();
    let mut dx = Array2::zeros((t_len, c));
    let mut dgain = Array1::zeros(c);
    let mut dbias = Array1::zeros(c);
    for t in 0..t_len {
        let mut sum_dh = 0.0;
        let mut sum_dh_xhat = 0.0;
        for j in 0..c {
            let g = dy[[t, j]];
            dgain[j] += g * cache.xhat[[t, j]];
            dbias[j] += g;
            let dh = g * gain[j];
            sum_dh += dh;
            sum_dh_xhat += dh * cache.xhat[[t, j]];
        }
        let n = c as f64;
        for j in 0..c {
            let dh = dy[[t, j]] * gain[j];
            dx[[t, j]] = cache.inv_std[t]
                * (dh - sum_dh / n - cache.xhat[[t, j]] * sum_dh_xhat / n);
        }
    }
    (dx, dgain, dbias)
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * INV_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn gelu_fwd(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(gelu)
}

/// `dx` given the pre-activation `x`.
pub fn gelu_bwd(x: &Array2<f64>, dy: &Array2<f64>) -> Array2<f64> {
    let mut dx = x.mapv(gelu_grad);
    dx *= dy;
    dx
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise softmax with the usual max-shift for stability.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = x.dim();
    let mut p = Array2::zeros((rows, cols));
    for r in 0..rows {
        let row = x.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..cols {
            let e = (x[[r, j]] - m).exp();
            p[[r, j]] = e;
            z += e;
        }
        for j in 0..cols {
            p[[r, j]] /= z;
        }
    }
    p
}

/// Backward through a row softmax: `ds = p * (dp - rowsum(dp * p))`.
pub fn softmax_rows_bwd(p: &Array2<f64>, dp: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = p.dim();
    let mut ds = Array2::zeros((rows, cols));
    for r in 0..rows {
        let dot: f64 = (0..cols).map(|j| dp[[r, j]] * p[[r, j]]).sum();
        for j in 0..cols {
            ds[[r, j]] = p[[r, j]] * (dp[[r, j]] - dot);
        }
    }
    ds
}

/// `tanh(u) * sigmoid(v)` with the pieces the backward pass needs.
#[derive(Debug, Clone)]
pub struct GateCache {
    pub tu: Array2<f64>,
    pub sv: Array2<f64>,
}

pub fn gate_fwd(u: &Array2<f64>, v: &Array2<f64>) -> (Array2<f64>, GateCache) {
    let tu = u.mapv(f64::tanh);
    let sv = v.mapv(sigmoid);
    let y = &tu * &sv;
    (y, GateCache { tu, sv })
}

/// Returns `(du, dv)` for [`gate_fwd`].
pub fn gate_bwd(cache: &GateCache, dy: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let du = dy * &cache.sv * &cache.tu.mapv(|t| 1.0 - t * t);
    let dv = dy * &cache.tu * &cache.sv.mapv(|s| s * (1.0 - s));
    (du, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;

    /// Central finite difference of a scalar-valued function of a flat input.
    fn fd_check<F>(x0: &mut [f64], f: F, analytic: &[f64], tol: f64)
    where
        F: Fn(&[f64]) -> f64,
    {
        let h = 1e-6;
        for i in 0..x0.len() {
            let orig = x0[i];
            x0[i] = orig + h;
            let fp = f(x0);
            x0[i] = orig - h;
            let fm = f(x0);
            x0[i] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
            assert!(
                (fd - analytic[i]).abs() / denom < tol,
                "index {i}: fd {fd} vs analytic {}",
                analytic[i]
            );
        }
    }

    #[test]
    fn linear_gradients_match_fd() {
        let mut r = rng::stream(1);
        let x = rng::normal_matrix(&mut r, 4, 3);
        let w = rng::normal_matrix(&mut r, 5, 3);
        let b = Array1::from_vec((0..5).map(|i| 0.1 * i as f64).collect::<Vec<_>>());
        // Scalar objective: sum of squares of the output.
        let y = linear_fwd(&x, &w.view(), &b.view());
        let dy = y.mapv(|v| 2.0 * v);
        let (dx, dw, db) = linear_bwd(&x, &w.view(), &dy);

        let mut xf: Vec<f64> = x.iter().cloned().collect();
        let wv = w.clone();
        let bv = b.clone();
        fd_check(
            &mut xf,
            |vals| {
                let xm = Array2::from_shape_vec((4, 3), vals.to_vec()).unwrap();
                linear_fwd(&xm, &wv.view(), &bv.view())
                    .iter()
                    .map(|v| v * v)
                    .sum()
            },
            &dx.iter().cloned().collect::<Vec<_>>(),
            1e-6,
        );
        let mut wf: Vec<f64> = w.iter().cloned().collect();
        let xv = x.clone();
        fd_check(
            &mut wf,
            |vals| {
                let wm = Array2::from_shape_vec((5, 3), vals.to_vec()).unwrap();
                linear_fwd(&xv, &wm.view(), &bv.view())
                    .iter()
                    .map(|v| v * v)
                    .sum()
            },
            &dw.iter().cloned().collect::<Vec<_>>(),
            1e-6,
        );
        let mut bf: Vec<f64> = b.iter().cloned().collect();
        fd_check(
            &mut bf,
            |vals| {
                let bm = Array1::from_vec(vals.to_vec());
                linear_fwd(&xv, &wv.view(), &bm.view())
                    .iter()
                    .map(|v| v * v)
                    .sum()
            },
            &db.iter().cloned().collect::<Vec<_>>(),
            1e-6,
        );
    }

    #[test]
    fn conv_gradients_match_fd_both_paddings() {
        for padding in [PaddingMode::Zero, PaddingMode::Circular] {
            let mut r = rng::stream(2);
            let x = rng::normal_matrix(&mut r, 6, 2);
            let wflat = rng::normal_matrix(&mut r, 3, 2 * 3); // (out, in*k)
            let w = Array3::from_shape_vec((3, 2, 3), wflat.iter().cloned().collect()).unwrap();
            let b = Array1::zeros(3);
            let y = conv1d_fwd(&x, &w.view(), &b.view(), 2, padding);
            let dy = y.mapv(|v| 2.0 * v);
            let (dx, dw, db) = conv1d_bwd(&x, &w.view(), &dy, 2, padding);

            let mut xf: Vec<f64> = x.iter().cloned().collect();
            let wv = w.clone();
            let bv = b.clone();
            fd_check(
                &mut xf,
                |vals| {
                    let xm = Array2::from_shape_vec((6, 2), vals.to_vec()).unwrap();
                    conv1d_fwd(&xm, &wv.view(), &bv.view(), 2, padding)
                        .iter()
                        .map(|v| v * v)
                        .sum()
                },
                &dx.iter().cloned().collect::<Vec<_>>(),
                1e-6,
            );
            let mut wf: Vec<f64> = w.iter().cloned().collect();
            let xv = x.clone();
            fd_check(
                &mut wf,
                |vals| {
                    let wm = Array3::from_shape_vec((3, 2, 3), vals.to_vec()).unwrap();
                    conv1d_fwd(&xv, &wm.view(), &bv.view(), 2, padding)
                        .iter()
                        .map(|v| v * v)
                        .sum()
                },
                &dw.iter().cloned().collect::<Vec<_>>(),
                1e-6,
            );
            let mut bf = vec![0.0; 3];
            fd_check(
                &mut bf,
                |vals| {
                    let bm = Array1::from_vec(vals.to_vec());
                    conv1d_fwd(&xv, &wv.view(), &bm.view(), 2, padding)
                        .iter()
                        .map(|v| v * v)
                        .sum()
                },
                &db.iter().cloned().collect::<Vec<_>>(),
                1e-6,
            );
        }
    }

    #[test]
    fn kernel_one_conv_equals_linear() {
        let mut r = rng::stream(3);
        let x = rng::normal_matrix(&mut r, 5, 4);
        let wlin = rng::normal_matrix(&mut r, 3, 4);
        let w3 = Array3::from_shape_vec((3, 4, 1), wlin.iter().cloned().collect()).unwrap();
        let b = Array1::from_vec(vec![0.5, -0.5, 0.25]);
        let a = linear_fwd(&x, &wlin.view(), &b.view());
        let c = conv1d_fwd(&x, &w3.view(), &b.view(), 1, PaddingMode::Zero);
        for (u, v) in a.iter().zip(c.iter()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn circular_conv_commutes_with_rotation() {
        let mut r = rng::stream(4);
        let x = rng::normal_matrix(&mut r, 7, 2);
        let wflat = rng::normal_matrix(&mut r, 2, 2 * 3);
        let w = Array3::from_shape_vec((2, 2, 3), wflat.iter().cloned().collect()).unwrap();
        let b = Array1::zeros(2);
        let y = conv1d_fwd(&x, &w.view(), &b.view(), 2, PaddingMode::Circular);
        // Rotate input rows by 3 and compare.
        let mut xs = Array2::zeros((7, 2));
        for t in 0..7 {
            for j in 0..2 {
                xs[[(t + 3) % 7, j]] = x[[t, j]];
            }
        }
        let ys = conv1d_fwd(&xs, &w.view(), &b.view(), 2, PaddingMode::Circular);
        for t in 0..7 {
            for j in 0..2 {
                assert!((ys[[(t + 3) % 7, j]] - y[[t, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_gradients_match_fd() {
        let mut r = rng::stream(5);
        let x = rng::normal_matrix(&mut r, 3, 6);
        let gain = Array1::from_vec(vec![1.0, 0.5, -0.2, 2.0, 1.5, 0.8]);
        let bias = Array1::from_vec(vec![0.0, 0.1, -0.1, 0.2, 0.0, 0.3]);
        let (y, cache) = layer_norm_fwd(&x, &gain.view(), &bias.view());
        let dy = y.mapv(|v| 2.0 * v);
        let (dx, dgain, dbias) = layer_norm_bwd(&gain.view(), &cache, &dy);

        let mut xf: Vec<f64> = x.iter().cloned().collect();
        let (gv, bv) = (gain.clone(), bias.clone());
        fd_check(
            &mut xf,
            |vals| {
                let xm = Array2::from_shape_vec((3, 6), vals.to_vec()).unwrap();
                layer_norm_fwd(&xm, &gv.view(), &bv.view())
                    .0
                    .iter()
                    .map(|v| v * v)
                    .sum()
            },
            &dx.iter().cloned().collect::<Vec<_>>(),
            1e-5,
        );
        let mut gf: Vec<f64> = gain.iter().cloned().collect();
        let xv = x.clone();
        fd_check(
            &mut gf,
            |vals| {
                let gm = Array1::from_vec(vals.to_vec());
                layer_norm_fwd(&xv, &gm.view(), &bv.view())
                    .0
                    .iter()
                    .map(|v| v * v)
                    .sum()
            },
            &dgain.iter().cloned().collect::<Vec<_>>(),
            1e-6,
        );
        let mut bf: Vec<f64> = bias.iter().cloned().collect();
        let gv2 = gain.clone();
        fd_check(
            &mut bf,
            |vals| {
                let bm = Array1::from_vec(vals.to_vec());
                layer_norm_fwd(&xv, &gv2.view(), &bm.view())
                    .0
                    .iter()
                    .map(|v| v * v)
                    .sum()
            },
            &dbias.iter().cloned().collect::<Vec<_>>(),
            1e-6,
        );
    }

    #[test]
    fn gelu_and_gate_gradients_match_fd() {
        let mut r = rng::stream(6);
        let x = rng::normal_matrix(&mut r, 2, 5);
        let y = gelu_fwd(&x);
        let dy = y.mapv(|v| 2.0 * v);
        let dx = gelu_bwd(&x, &dy);
        let mut xf: Vec<f64> = x.iter().cloned().collect();
        fd_check(
            &mut xf,
            |vals| {
                let xm = Array2::from_shape_vec((2, 5), vals.to_vec()).unwrap();
                gelu_fwd(&xm).iter().map(|v| v * v).sum()
            },
            &dx.iter().cloned().collect::<Vec<_>>(),
            1e-6,
        );

        let u = rng::normal_matrix(&mut r, 2, 4);
        let v = rng::normal_matrix(&mut r, 2, 4);
        let (g, cache) = gate_fwd(&u, &v);
        let dg = g.mapv(|w| 2.0 * w);
        let (du, dv) = gate_bwd(&cache, &dg);
        let mut uf: Vec<f64> = u.iter().cloned().collect();
        let vv = v.clone();
        fd_check(
            &mut uf,
            |vals| {
                let um = Array2::from_shape_vec((2, 4), vals.to_vec()).unwrap();
                gate_fwd(&um, &vv).0.iter().map(|w| w * w).sum()
            },
            &du.iter().cloned().collect::<Vec<_>>(),
            1e-6,
        );
        let mut vf: Vec<f64> = v.iter().cloned().collect();
        let uu = u.clone();
        fd_check(
            &mut vf,
            |vals| {
                let vm = Array2::from_shape_vec((2, 4), vals.to_vec()).unwrap();
                gate_fwd(&uu, &vm).0.iter().map(|w| w * w).sum()
            },
            &dv.iter().cloned().collect::<Vec<_>>(),
            1e-6,
        );
    }

    #[test]
    fn softmax_rows_properties() {
        let x = array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax_rows(&x);
        for r in 0..2 {
            let s: f64 = p.row(r).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(p[[0, 2]] > p[[0, 1]] && p[[0, 1]] > p[[0, 0]]);

        // Gradient vs finite differences through a quadratic objective.
        let dy = p.mapv(|v| 2.0 * v);
        let ds = softmax_rows_bwd(&p, &dy);
        let mut xf: Vec<f64> = x.iter().cloned().collect();
        fd_check(
            &mut xf,
            |vals| {
                let xm = Array2::from_shape_vec((2, 3), vals.to_vec()).unwrap();
                softmax_rows(&xm).iter().map(|v| v * v).sum()
            },
            &ds.iter().cloned().collect::<Vec<_>>(),
            // The -5..5 row yields probabilities ~1e-4 whose finite
            // differences carry more truncation error.
            1e-5,
        );
    }

    #[test]
    fn layout_bookkeeping() {
        let mut layout = Layout::default();
        layout.push("a.w", &[2, 3]);
        layout.push("a.b", &[2]);
        layout.push("k", &[2, 3, 1]);
        assert_eq!(layout.total_len(), 6 + 2 + 6);
        assert_eq!(layout.slot("a.b").unwrap().offset, 6);
        assert!(layout.slot("missing").is_err());
        let data = vec![0.0; layout.total_len()];
        assert_eq!(layout.view2(&data, "a.w").unwrap().dim(), (2, 3));
        assert_eq!(layout.view3(&data, "k").unwrap().dim(), (2, 3, 1));
        assert!(layout.view2(&data, "a.b").is_err());
    }
}
