//! Golden-angle center-out radial trajectories and analytic density
//! compensation.

use std::f64::consts::PI;

use crate::error::{param_err, shape_err, Result};

/// Center-out radial sample locations in cycles/voxel, with density weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub dim: usize,
    pub n_spokes: usize,
    pub n_readout: usize,
    /// `[spoke][readout][axis]`, axis 0 first.
    pub coords: Vec<f32>,
    /// `[spoke][readout]`.
    pub dcf: Vec<f64>,
    /// Radial step between consecutive readout samples.
    pub dr: f64,
}

/// Golden angle for center-out spokes, `180° / φ`.
pub fn golden_angle_deg() -> f64 {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    180.0 / phi
}

/// Azimuth of spoke `s` in degrees, in `[0, 360)`.
pub fn golden_angle_azimuth(s: usize) -> f64 {
    (s as f64 * golden_angle_deg()).rem_euclid(360.0)
}

/// The two golden means used for 3D spoke ordering, `(φ₁, φ₂)`.
///
/// `φ₂` is the real root of `x³ + x − 1 = 0` and `φ₁ = φ₂²`.
pub fn golden_means() -> (f64, f64) {
    let mut x = 0.7f64;
    for _ in 0..60 {
        x -= (x * x * x + x - 1.0) / (3.0 * x * x + 1.0);
    }
    (x * x, x)
}

/// Unit direction of 3D spoke `s` as `[axis0, axis1, axis2]`.
pub fn golden_means_direction(s: usize) -> [f64; 3] {
    let (p1, p2) = golden_means();
    let z = 2.0 * (s as f64 * p1).fract() - 1.0;
    let az = 2.0 * PI * (s as f64 * p2).fract();
    let rho = (1.0 - z * z).max(0.0).sqrt();
    [z, rho * az.sin(), rho * az.cos()]
}

fn check_counts(n_spokes: usize, n_readout: usize, k_max: f64) -> Result<()> {
    if n_spokes < 1 {
        return param_err("n_spokes must be >= 1");
    }
    if n_readout < 2 {
        return param_err("n_readout must be >= 2");
    }
    if !(k_max > 0.0 && k_max <= 0.5) {
        return param_err(format!("k_max must be in (0, 0.5], got {k_max}"));
    }
    Ok(())
}

fn build(dim: usize, n_spokes: usize, n_readout: usize, k_max: f64, dirs: impl Fn(usize) -> [f64; 3]) -> Trajectory {
    let dr = k_max / (n_readout - 1) as f64;
    let mut coords = Vec::with_capacity(n_spokes * n_readout * dim);
    for s in 0..n_spokes {
        let d = dirs(s);
        for j in 0..n_readout {
            let r = j as f64 * dr;
            for a in 0..dim {
                // keep the outermost sample strictly inside [-0.5, 0.5)
                let v = (r * d[a]).clamp(-0.5, 0.5 - 1e-7);
                coords.push(v as f32);
            }
        }
    }
    let mut t = Trajectory { dim, n_spokes, n_readout, coords, dcf: Vec::new(), dr };
    t.dcf = density_weights(&t);
    t
}

/// 2D golden-angle trajectory: spoke `s` at azimuth `s·GA mod 360°`, sample
/// `j` at radius `j·k_max/(n_readout−1)`.
pub fn golden_angle_2d(n_spokes: usize, n_readout: usize, k_max: f64) -> Result<Trajectory> {
    check_counts(n_spokes, n_readout, k_max)?;
    Ok(build(2, n_spokes, n_readout, k_max, |s| {
        let th = golden_angle_azimuth(s).to_radians();
        [th.sin(), th.cos(), 0.0]
    }))
}

/// 3D golden-means trajectory.
pub fn golden_means_3d(n_spokes: usize, n_readout: usize, k_max: f64) -> Result<Trajectory> {
    check_counts(n_spokes, n_readout, k_max)?;
    Ok(build(3, n_spokes, n_readout, k_max, golden_means_direction))
}

/// Default `k_max` giving a readout step of one Nyquist interval for an
/// image of `n` voxels with `n/2` samples per spoke.
pub fn nyquist_k_max(n_readout: usize) -> f64 {
    0.5 * (n_readout - 1) as f64 / n_readout as f64
}

/// Analytic radial ramp: `dcf ∝ r^(dim−1)`, scaled to the k-space area (or
/// volume) element per sample so a gridding reconstruction preserves
/// intensity. The center samples of all spokes share the disk (ball) of
/// radius `Δr/2`, which is `1/8` (`1/24` in 3D) of the first ring's weight.
pub fn density_compensation(traj: &Trajectory) -> Trajectory {
    let mut t = traj.clone();
    t.dcf = density_weights(traj);
    t
}

fn density_weights(traj: &Trajectory) -> Vec<f64> {
    let dr = traj.dr;
    let ns = traj.n_spokes as f64;
    let ramp = |j: usize| -> f64 {
        let r = j as f64 * dr;
        match traj.dim {
            2 => 2.0 * PI * r * dr / ns,
            _ => 4.0 * PI * r * r * dr / ns,
        }
    };
    let per_readout: Vec<f64> = (0..traj.n_readout)
        .map(|j| match (j, traj.dim) {
            (0, 2) => ramp(1) / 8.0,
            (0, _) => ramp(1) / 24.0,
            _ => ramp(j),
        })
        .collect();
    let mut dcf = Vec::with_capacity(traj.n_spokes * traj.n_readout);
    for _ in 0..traj.n_spokes {
        dcf.extend_from_slice(&per_readout);
    }
    dcf
}

impl Trajectory {
    #[inline]
    pub fn n_samples(&self) -> usize {
        self.n_spokes * self.n_readout
    }

    #[inline]
    pub fn coord(&self, spoke: usize, readout: usize) -> [f64; 3] {
        let base = (spoke * self.n_readout + readout) * self.dim;
        let mut c = [0.0; 3];
        for a in 0..self.dim {
            c[a] = self.coords[base + a] as f64;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.coords.len() != self.n_samples() * self.dim {
            return shape_err("coordinate array size mismatch");
        }
        if self.dcf.len() != self.n_samples() {
            return shape_err("dcf array size mismatch");
        }
        if self.coords.iter().any(|&c| !(-0.5..0.5).contains(&c)) {
            return shape_err("trajectory coordinates outside [-0.5, 0.5)");
        }
        Ok(())
    }

    /// Rebuilds a trajectory from stored coordinates (e.g. after reading a
    /// file); the radial step is taken from spoke 0.
    pub fn from_coords(dim: usize, n_spokes: usize, n_readout: usize, coords: Vec<f32>) -> Result<Self> {
        if n_spokes == 0 || n_readout < 2 {
            return shape_err("trajectory needs >= 1 spoke and >= 2 readout samples");
        }
        if coords.len() != n_spokes * n_readout * dim {
            return shape_err("coordinate array size mismatch");
        }
        let dr = (0..dim).map(|a| (coords[dim + a] as f64).powi(2)).sum::<f64>().sqrt();
        let mut t = Trajectory { dim, n_spokes, n_readout, coords, dcf: Vec::new(), dr };
        t.dcf = density_weights(&t);
        t.validate()?;
        Ok(t)
    }

    /// Sub-trajectory of the given spokes truncated to `n_keep` readout
    /// samples. Density weights are recomputed for the subset.
    pub fn select(&self, spokes: &[usize], n_keep: usize) -> Trajectory {
        let n_keep = n_keep.min(self.n_readout);
        let mut coords = Vec::with_capacity(spokes.len() * n_keep * self.dim);
        for &s in spokes {
            let base = s * self.n_readout * self.dim;
            coords.extend_from_slice(&self.coords[base..base + n_keep * self.dim]);
        }
        let mut t = Trajectory {
            dim: self.dim,
            n_spokes: spokes.len(),
            n_readout: n_keep,
            coords,
            dcf: Vec::new(),
            dr: self.dr,
        };
        t.dcf = density_weights(&t);
        t
    }

    /// Expresses the trajectory in cycles per voxel of a grid whose voxels
    /// are `factor` times larger, dropping readout samples beyond that
    /// grid's band. Returns the number of kept readout samples alongside.
    pub fn rescaled(&self, factor: f64) -> (Trajectory, usize) {
        let n_keep = (0..self.n_readout)
            .take_while(|&j| j as f64 * self.dr * factor < 0.5 - 1e-9)
            .count()
            .max(2)
            .min(self.n_readout);
        let mut t = self.select(&(0..self.n_spokes).collect::<Vec<_>>(), n_keep);
        for c in t.coords.iter_mut() {
            *c = ((*c as f64) * factor).clamp(-0.5, 0.5 - 1e-7) as f32;
        }
        t.dr *= factor;
        t.dcf = density_weights(&t);
        (t, n_keep)
    }

    /// Density weights scaled as if the trajectory had `n_total` spokes,
    /// used when one state's spokes are weighted as part of a pooled set.
    pub fn dcf_pooled(&self, n_total: usize) -> Vec<f64> {
        let s = self.n_spokes as f64 / n_total as f64;
        self.dcf.iter().map(|w| w * s).collect()
    }
}
