//! Sparsifying operators and penalty values: finite differences, the
//! symmetrized gradient, a multi-level Haar transform and temporal
//! differences across motion states.
//!
//! Differences are forward differences whose entry at the last index of each
//! axis is zero, so constant images have zero gradient and affine images
//! have a constant masked gradient.

use rayon::prelude::*;

use crate::data::{Shape, C64};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Forward difference along `axis`, zero at the last index.
pub fn diff(shape: Shape, x: &[C64], axis: usize) -> Vec<C64> {
    let n = shape.dims()[axis];
    let st = shape.strides()[axis];
    (0..shape.len())
        .into_par_iter()
        .map(|i| if (i / st) % n + 1 < n { x[i + st] - x[i] } else { ZERO })
        .collect()
}

/// Adjoint of [`diff`], accumulated into `out`.
pub fn diff_adjoint_add(shape: Shape, g: &[C64], axis: usize, out: &mut [C64]) {
    let n = shape.dims()[axis];
    let st = shape.strides()[axis];
    out.par_iter_mut().enumerate().for_each(|(i, o)| {
        let k = (i / st) % n;
        let mut v = ZERO;
        if k + 1 < n {
            v -= g[i];
        }
        if k > 0 {
            v += g[i - st];
        }
        *o += v;
    });
}

/// True where the difference along `axis` is defined.
pub fn diff_mask(shape: Shape, axis: usize) -> Vec<bool> {
    let n = shape.dims()[axis];
    let st = shape.strides()[axis];
    (0..shape.len()).map(|i| (i / st) % n + 1 < n).collect()
}

/// Gradient as one difference image per axis, concatenated.
pub fn gradient(shape: Shape, x: &[C64]) -> Vec<C64> {
    let mut out = Vec::with_capacity(shape.len() * shape.ndim());
    for a in 0..shape.ndim() {
        out.extend(diff(shape, x, a));
    }
    out
}

pub fn gradient_adjoint(shape: Shape, g: &[C64]) -> Vec<C64> {
    let n = shape.len();
    let mut out = vec![ZERO; n];
    for a in 0..shape.ndim() {
        diff_adjoint_add(shape, &g[a * n..(a + 1) * n], a, &mut out);
    }
    out
}

/// Number of stored symmetrized-gradient components.
pub fn sym_components(ndim: usize) -> usize {
    ndim * (ndim + 1) / 2
}

fn sym_pairs(ndim: usize) -> Vec<(usize, usize)> {
    let mut p: Vec<(usize, usize)> = (0..ndim).map(|a| (a, a)).collect();
    for a in 0..ndim {
        for b in a + 1..ndim {
            p.push((a, b));
        }
    }
    p
}

/// Symmetrized gradient of a vector field `v` (`ndim` concatenated
/// components). Off-diagonal entries are stored scaled by `√2` so the
/// Euclidean norm of the stored components equals the Frobenius norm.
pub fn sym_gradient(shape: Shape, v: &[C64]) -> Vec<C64> {
    let n = shape.len();
    let nd = shape.ndim();
    let mut out = Vec::with_capacity(n * sym_components(nd));
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for (a, b) in sym_pairs(nd) {
        if a == b {
            out.extend(diff(shape, &v[a * n..(a + 1) * n], a));
        } else {
            let dab = diff(shape, &v[b * n..(b + 1) * n], a);
            let dba = diff(shape, &v[a * n..(a + 1) * n], b);
            out.extend(dab.iter().zip(&dba).map(|(x, y)| (x + y) * h));
        }
    }
    out
}

pub fn sym_gradient_adjoint(shape: Shape, e: &[C64]) -> Vec<C64> {
    let n = shape.len();
    let nd = shape.ndim();
    let mut out = vec![ZERO; n * nd];
    let h = std::f64::consts::FRAC_1_SQRT_2;
    for (c, (a, b)) in sym_pairs(nd).into_iter().enumerate() {
        let comp = &e[c * n..(c + 1) * n];
        if a == b {
            diff_adjoint_add(shape, comp, a, &mut out[a * n..(a + 1) * n]);
        } else {
            let scaled: Vec<C64> = comp.iter().map(|v| v * h).collect();
            diff_adjoint_add(shape, &scaled, a, &mut out[b * n..(b + 1) * n]);
            diff_adjoint_add(shape, &scaled, b, &mut out[a * n..(a + 1) * n]);
        }
    }
    out
}

/// Sum over voxels of the Euclidean norm across `n_comp` concatenated
/// components.
pub fn group_l1(z: &[C64], n_comp: usize) -> f64 {
    let n = z.len() / n_comp.max(1);
    (0..n)
        .map(|i| (0..n_comp).map(|c| z[c * n + i].norm_sqr()).sum::<f64>().sqrt())
        .sum()
}

/// Isotropic total variation.
pub fn spatial_tv(shape: Shape, x: &[C64]) -> f64 {
    group_l1(&gradient(shape, x), shape.ndim())
}

/// `X_{k+1} − X_k` for consecutive states, concatenated.
pub fn temporal_diff(states: &[&[C64]]) -> Vec<C64> {
    let mut out = Vec::new();
    for w in states.windows(2) {
        out.extend(w[1].iter().zip(w[0]).map(|(b, a)| b - a));
    }
    out
}

/// Adjoint of [`temporal_diff`] for `m` states of `n` voxels.
pub fn temporal_diff_adjoint(d: &[C64], m: usize, n: usize) -> Vec<Vec<C64>> {
    let mut out = vec![vec![ZERO; n]; m];
    for k in 0..m.saturating_sub(1) {
        let dk = &d[k * n..(k + 1) * n];
        for i in 0..n {
            out[k][i] -= dk[i];
            out[k + 1][i] += dk[i];
        }
    }
    out
}

/// Non-circular total variation across motion states.
pub fn temporal_tv(states: &[&[C64]]) -> f64 {
    temporal_diff(states).iter().map(|v| v.norm()).sum()
}

/// Multi-level orthonormal Haar transform on a grid zero-padded to a
/// multiple of `2^levels` per axis. Coefficients are stored in place on the
/// padded grid (Mallat layout); the approximation band occupies the
/// low-index corner.
#[derive(Clone, Debug)]
pub struct Haar {
    pub shape: Shape,
    pub padded: Shape,
    pub levels: usize,
}

impl Haar {
    pub fn new(shape: Shape, levels: usize) -> Self {
        let m = 1usize << levels;
        Haar { shape, padded: shape.map(|d| d.div_ceil(m) * m), levels }
    }

    fn pad(&self, x: &[C64]) -> Vec<C64> {
        let mut out = vec![ZERO; self.padded.len()];
        for (i, v) in x.iter().enumerate() {
            out[self.padded.index(&self.shape.coords(i)[..self.shape.ndim()])] = *v;
        }
        out
    }

    fn crop(&self, y: &[C64]) -> Vec<C64> {
        (0..self.shape.len())
            .map(|i| y[self.padded.index(&self.shape.coords(i)[..self.shape.ndim()])])
            .collect()
    }

    /// One analysis (or synthesis) pass along `axis` over the leading block
    /// of `len` entries on every axis in `extent`.
    fn pass(&self, y: &mut [C64], extent: &[usize], axis: usize, inverse: bool) {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let st = self.padded.strides();
        let nd = self.padded.ndim();
        let len = extent[axis];
        let half = len / 2;
        // enumerate all lines along `axis` inside the block
        let mut other: Vec<usize> = vec![0];
        for a in 0..nd {
            if a == axis {
                continue;
            }
            let mut next = Vec::with_capacity(other.len() * extent[a]);
            for &o in &other {
                for k in 0..extent[a] {
                    next.push(o + k * st[a]);
                }
            }
            other = next;
        }
        let mut buf = vec![ZERO; len];
        for base in other {
            for k in 0..len {
                buf[k] = y[base + k * st[axis]];
            }
            for k in 0..half {
                let (a, b) = if inverse {
                    let (s, d) = (buf[k], buf[half + k]);
                    ((s + d) * h, (s - d) * h)
                } else {
                    let (p, q) = (buf[2 * k], buf[2 * k + 1]);
                    ((p + q) * h, (p - q) * h)
                };
                if inverse {
                    y[base + 2 * k * st[axis]] = a;
                    y[base + (2 * k + 1) * st[axis]] = b;
                } else {
                    y[base + k * st[axis]] = a;
                    y[base + (half + k) * st[axis]] = b;
                }
            }
        }
    }

    /// Coefficients on the padded grid.
    pub fn forward(&self, x: &[C64]) -> Vec<C64> {
        let mut y = self.pad(x);
        let mut extent = self.padded.dims().to_vec();
        for _ in 0..self.levels {
            for a in 0..extent.len() {
                self.pass(&mut y, &extent, a, false);
            }
            extent.iter_mut().for_each(|e| *e /= 2);
        }
        y
    }

    /// Synthesis followed by cropping: the adjoint of [`Self::forward`].
    pub fn adjoint(&self, c: &[C64]) -> Vec<C64> {
        let mut y = c.to_vec();
        for l in (0..self.levels).rev() {
            let extent: Vec<usize> = self.padded.dims().iter().map(|d| d >> l).collect();
            for a in (0..extent.len()).rev() {
                self.pass(&mut y, &extent, a, true);
            }
        }
        self.crop(&y)
    }

    /// True for detail coefficients whose support lies inside the unpadded
    /// grid. These are the penalized coefficients; constants map to the
    /// approximation band or to straddling coefficients only.
    pub fn detail_mask(&self) -> Vec<bool> {
        let nd = self.padded.ndim();
        let dims = self.shape.dims();
        (0..self.padded.len())
            .map(|i| {
                let c = self.padded.coords(i);
                for l in 1..=self.levels {
                    let ext: Vec<usize> = self.padded.dims().iter().map(|d| d >> (l - 1)).collect();
                    let inside = (0..nd).all(|a| c[a] < ext[a]);
                    let detail = (0..nd).any(|a| c[a] >= ext[a] / 2);
                    if inside && detail {
                        return (0..nd).all(|a| {
                            let k = if c[a] >= ext[a] / 2 { c[a] - ext[a] / 2 } else { c[a] };
                            (k + 1) << l <= dims[a]
                        });
                    }
                }
                false
            })
            .collect()
    }
}

/// l1 norm of the Haar detail coefficients (3 levels). The approximation
/// band is not penalized, so constant images score 0.
pub fn wavelet_l1(shape: Shape, x: &[C64]) -> f64 {
    let h = Haar::new(shape, 3);
    h.forward(x).iter().zip(h.detail_mask()).filter(|(_, d)| *d).map(|(v, _)| v.norm()).sum()
}
