//! First-order primal-dual (Chambolle-Pock) solver for problems of the form
//! `min_x Σ_j F_j(K_j x)`, where each `F_j` is either a weighted squared
//! residual or a weighted group-l1 norm, optionally plus smooth least-squares
//! terms handled through their normal operators.

use rayon::prelude::*;

use crate::data::{dot, norm, C64};
use crate::error::{Error, Result};
use crate::nufft::{operator_norm, LinearOperator};

/// Penalty applied to one block's output.
#[derive(Clone, Debug)]
pub enum Penalty {
    /// `‖z − target‖²`.
    Quadratic { target: Vec<C64> },
    /// `weight · Σ_voxels ‖z(voxel)‖₂` over `n_comp` concatenated components.
    GroupL1 { weight: f64, n_comp: usize },
}

impl Penalty {
    fn value(&self, z: &[C64]) -> f64 {
        match self {
            Penalty::Quadratic { target } => z.iter().zip(target).map(|(a, b)| (a - b).norm_sqr()).sum(),
            Penalty::GroupL1 { weight, n_comp } => weight * crate::regularizers::group_l1(z, *n_comp),
        }
    }

    /// Proximal map of `σ·F*`.
    fn prox_conjugate(&self, y: &mut [C64], sigma: f64) {
        match self {
            Penalty::Quadratic { target } => {
                let d = 1.0 + sigma / 2.0;
                y.par_iter_mut().zip(target.par_iter()).for_each(|(v, b)| *v = (*v - b * sigma) / d);
            }
            Penalty::GroupL1 { weight, n_comp } => {
                let n = y.len() / n_comp;
                let w = *weight;
                if *n_comp == 1 {
                    y.par_iter_mut().for_each(|v| {
                        let a = v.norm();
                        if a > w {
                            *v *= w / a;
                        }
                    });
                    return;
                }
                for i in 0..n {
                    let a = (0..*n_comp).map(|c| y[c * n + i].norm_sqr()).sum::<f64>().sqrt();
                    if a > w {
                        let s = w / a;
                        for c in 0..*n_comp {
                            y[c * n + i] *= s;
                        }
                    }
                }
            }
        }
    }
}

/// One term `F_j(K_j x)`; the operator acts on the full primal vector.
pub struct Block<'a> {
    pub name: String,
    pub op: Box<dyn LinearOperator + 'a>,
    pub penalty: Penalty,
}

impl<'a> Block<'a> {
    pub fn new(name: impl Into<String>, op: Box<dyn LinearOperator + 'a>, penalty: Penalty) -> Self {
        Block { name: name.into(), op, penalty }
    }
}

/// Stops on relative change of the primal iterate or of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopRule {
    PrimalChange,
    ObjectiveChange,
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub max_iters: usize,
    pub tol: f64,
    pub stop: StopRule,
    /// Power iterations for the step-size estimate.
    pub norm_iters: usize,
    pub seed: u64,
    pub data_mode: DataMode,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { max_iters: 60, tol: 1e-4, stop: StopRule::PrimalChange, norm_iters: 30, seed: 7, data_mode: DataMode::Toeplitz }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverReport {
    pub iterations: usize,
    /// Objective at the initial point followed by one value per iteration.
    pub objective: Vec<f64>,
    pub final_change: f64,
    pub converged: bool,
    pub operator_norm: f64,
}

impl SolverReport {
    pub fn initial_objective(&self) -> f64 {
        self.objective[0]
    }

    pub fn final_objective(&self) -> f64 {
        *self.objective.last().unwrap()
    }
}

/// All block operators stacked into one.
pub struct Stacked<'b, 'a> {
    pub blocks: &'b [Block<'a>],
    pub n: usize,
}

impl LinearOperator for Stacked<'_, '_> {
    fn domain_len(&self) -> usize {
        self.n
    }

    fn range_len(&self) -> usize {
        self.blocks.iter().map(|b| b.op.range_len()).sum()
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        let parts = apply_all(self.blocks, x);
        parts.concat()
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        let mut parts = Vec::with_capacity(self.blocks.len());
        let mut off = 0;
        for b in self.blocks {
            let len = b.op.range_len();
            parts.push(y[off..off + len].to_vec());
            off += len;
        }
        adjoint_all(self.blocks, &parts, self.n)
    }
}

fn apply_all(blocks: &[Block], x: &[C64]) -> Vec<Vec<C64>> {
    blocks.par_iter().map(|b| b.op.forward(x)).collect()
}

/// `Σ_j K_jᴴ y_j`, summed in block order.
fn adjoint_all(blocks: &[Block], y: &[Vec<C64>], n: usize) -> Vec<C64> {
    let parts: Vec<Vec<C64>> = blocks.par_iter().zip(y.par_iter()).map(|(b, yj)| b.op.adjoint(yj)).collect();
    let mut out = vec![C64::new(0.0, 0.0); n];
    for p in parts {
        out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
    }
    out
}

fn objective(blocks: &[Block], kx: &[Vec<C64>]) -> f64 {
    blocks.iter().zip(kx).map(|(b, z)| b.penalty.value(z)).sum()
}

/// Objective `Σ_j F_j(K_j x)` at `x`.
pub fn evaluate(blocks: &[Block], x: &[C64]) -> f64 {
    objective(blocks, &apply_all(blocks, x))
}

/// Inflation of the estimated smooth Lipschitz constant. The gradient step
/// sits at the stability limit, and power iteration approaches the largest
/// eigenvalue from below.
const SMOOTH_MARGIN: f64 = 1.25;

/// Smooth term `‖A x − b‖²` stored in normal form: `gram = AᴴA`,
/// `rhs = Aᴴb` and `constant = ‖b‖²`.
pub struct Smooth<'a> {
    pub name: String,
    pub gram: Box<dyn LinearOperator + 'a>,
    pub rhs: Vec<C64>,
    pub constant: f64,
}

impl<'a> Smooth<'a> {
    pub fn new(name: impl Into<String>, gram: Box<dyn LinearOperator + 'a>, rhs: Vec<C64>, constant: f64) -> Self {
        Smooth { name: name.into(), gram, rhs, constant }
    }
}

/// How data-consistency terms enter the solver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataMode {
    /// One dual variable per data block, NUFFT pair per iteration.
    Dual,
    /// Gradient steps on the Toeplitz-embedded normal operator.
    Toeplitz,
}

/// Objective `Σ_i ‖A_i x − b_i‖² + Σ_j F_j(K_j x)` on a primal of length `n`.
pub struct Problem<'a> {
    pub smooth: Vec<Smooth<'a>>,
    pub blocks: Vec<Block<'a>>,
    pub n: usize,
}

/// Sum of the Gram operators of all smooth terms.
struct GramSum<'b, 'a> {
    terms: &'b [Smooth<'a>],
    n: usize,
}

impl LinearOperator for GramSum<'_, '_> {
    fn domain_len(&self) -> usize {
        self.n
    }

    fn range_len(&self) -> usize {
        self.n
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        let parts: Vec<Vec<C64>> = self.terms.par_iter().map(|t| t.gram.forward(x)).collect();
        let mut out = vec![C64::new(0.0, 0.0); self.n];
        for p in parts {
            out.iter_mut().zip(p).for_each(|(o, v)| *o += v);
        }
        out
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        self.forward(y)
    }
}

impl<'a> Problem<'a> {
    pub fn new(smooth: Vec<Smooth<'a>>, blocks: Vec<Block<'a>>, n: usize) -> Self {
        Problem { smooth, blocks, n }
    }

    fn check(&self) -> Result<()> {
        let n = self.n;
        for b in &self.blocks {
            if b.op.domain_len() != n {
                return Err(Error::Shape(format!("block {} expects a primal of length {}", b.name, b.op.domain_len())));
            }
            if let Penalty::Quadratic { target } = &b.penalty {
                if target.len() != b.op.range_len() {
                    return Err(Error::Shape(format!("block {} target length mismatch", b.name)));
                }
            }
        }
        for t in &self.smooth {
            if t.gram.domain_len() != n || t.gram.range_len() != n || t.rhs.len() != n {
                return Err(Error::Shape(format!("smooth term {} does not act on a primal of length {n}", t.name)));
            }
        }
        Ok(())
    }

    fn gram(&self) -> GramSum<'_, 'a> {
        GramSum { terms: &self.smooth, n: self.n }
    }

    fn smooth_value(&self, x: &[C64], gx: &[C64], rhs: &[C64], constant: f64) -> f64 {
        if self.smooth.is_empty() {
            return 0.0;
        }
        (dot(x, gx).re - 2.0 * dot(x, rhs).re + constant).max(0.0)
    }

    fn sums(&self) -> (Vec<C64>, f64) {
        let mut rhs = vec![C64::new(0.0, 0.0); self.n];
        for t in &self.smooth {
            rhs.iter_mut().zip(&t.rhs).for_each(|(o, v)| *o += v);
        }
        (rhs, self.smooth.iter().map(|t| t.constant).sum())
    }

    /// Objective at `x`.
    pub fn evaluate(&self, x: &[C64]) -> f64 {
        let (rhs, c) = self.sums();
        let gx = if self.smooth.is_empty() { Vec::new() } else { self.gram().forward(x) };
        self.smooth_value(x, &gx, &rhs, c) + evaluate(&self.blocks, x)
    }

    /// Primal-dual iterations with explicit gradient steps on the smooth
    /// terms (Condat-Vu). Duals start at zero, the primal at `x0` or zero.
    /// `σ = 1/L_K` and `τ = 1/(β/2 + L_K)` with `β` the Lipschitz constant
    /// of the smooth gradient and `L_K` the stacked block norm; without
    /// smooth terms this is Chambolle-Pock with `τ = σ = 1/L_K`.
    pub fn solve(&self, x0: Option<Vec<C64>>, opts: &SolverOptions) -> Result<(Vec<C64>, SolverReport)> {
        self.check()?;
        let n = self.n;
        let blocks = &self.blocks[..];
        let lk = if blocks.is_empty() { 0.0 } else { operator_norm(&Stacked { blocks, n }, opts.norm_iters, opts.seed) * 1.01 };
        let beta = if self.smooth.is_empty() { 0.0 } else { 2.0 * operator_norm(&self.gram(), opts.norm_iters, opts.seed) * SMOOTH_MARGIN };
        if !(lk.is_finite() && beta.is_finite()) || (!blocks.is_empty() && lk == 0.0) || (blocks.is_empty() && beta == 0.0) {
            return Err(Error::Solver(format!("step size infeasible: operator norm {lk}, gradient Lipschitz {beta}")));
        }
        let sigma = if lk > 0.0 { 1.0 / lk } else { 0.0 };
        let tau = 1.0 / (beta / 2.0 + lk);
        let (rhs, constant) = self.sums();
        let gram = self.gram();
        let apply_gram = |x: &[C64]| if self.smooth.is_empty() { Vec::new() } else { gram.forward(x) };

        let mut x = x0.unwrap_or_else(|| vec![C64::new(0.0, 0.0); n]);
        if x.len() != n {
            return Err(Error::Shape("initial point length mismatch".into()));
        }
        let mut gx = apply_gram(&x);
        let mut kx = apply_all(blocks, &x);
        let mut kx_bar = kx.clone();
        let mut y: Vec<Vec<C64>> = blocks.iter().map(|b| vec![C64::new(0.0, 0.0); b.op.range_len()]).collect();
        let mut obj = vec![self.smooth_value(&x, &gx, &rhs, constant) + objective(blocks, &kx)];
        let mut change = f64::INFINITY;
        let mut converged = false;
        let mut iterations = 0;

        for _ in 0..opts.max_iters {
            // dual ascent with extrapolated primal
            y.par_iter_mut().zip(blocks.par_iter()).zip(kx_bar.par_iter()).for_each(|((yj, b), kb)| {
                yj.iter_mut().zip(kb).for_each(|(v, k)| *v += k * sigma);
                b.penalty.prox_conjugate(yj, sigma);
            });
            let mut g = adjoint_all(blocks, &y, n);
            if !self.smooth.is_empty() {
                g.iter_mut().zip(gx.iter().zip(&rhs)).for_each(|(o, (a, b))| *o += (a - b) * 2.0);
            }
            let x_new: Vec<C64> = x.iter().zip(&g).map(|(a, b)| a - b * tau).collect();
            let kx_new = apply_all(blocks, &x_new);
            kx_bar = kx_new
                .iter()
                .zip(&kx)
                .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * 2.0 - q).collect())
                .collect();
            let dx: f64 = x_new.iter().zip(&x).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>().sqrt();
            let nx = norm(&x_new);
            x = x_new;
            kx = kx_new;
            gx = apply_gram(&x);
            let f = self.smooth_value(&x, &gx, &rhs, constant) + objective(blocks, &kx);
            if !f.is_finite() {
                return Err(Error::Solver("objective became non-finite".into()));
            }
            let prev = *obj.last().unwrap();
            obj.push(f);
            iterations += 1;
            change = match opts.stop {
                StopRule::PrimalChange => {
                    if nx == 0.0 {
                        dx
                    } else {
                        dx / nx
                    }
                }
                StopRule::ObjectiveChange => (prev - f).abs() / f.abs().max(f64::MIN_POSITIVE),
            };
            if change < opts.tol {
                converged = true;
                break;
            }
        }
        Ok((x, SolverReport { iterations, objective: obj, final_change: change, converged, operator_norm: lk }))
    }
}

/// Chambolle-Pock on `Σ_j F_j(K_j x)`; see [`Problem::solve`].
pub fn primal_dual(blocks: &[Block], n: usize, x0: Option<Vec<C64>>, opts: &SolverOptions) -> Result<(Vec<C64>, SolverReport)> {
    // blocks are borrowed, so run the shared loop over a view
    let view: Vec<Block> = blocks.iter().map(|b| Block { name: b.name.clone(), op: Box::new(Borrowed(&*b.op)), penalty: b.penalty.clone() }).collect();
    Problem::new(Vec::new(), view, n).solve(x0, opts)
}

struct Borrowed<'a>(&'a dyn LinearOperator);

impl LinearOperator for Borrowed<'_> {
    fn domain_len(&self) -> usize {
        self.0.domain_len()
    }

    fn range_len(&self) -> usize {
        self.0.range_len()
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        self.0.forward(x)
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        self.0.adjoint(y)
    }
}

/// Square operator acting on `x[offset..offset + op.domain_len()]` and
/// writing into the same slice of a zero vector of length `total`.
pub struct Padded<Op> {
    pub op: Op,
    pub offset: usize,
    pub total: usize,
}

impl<Op: LinearOperator> LinearOperator for Padded<Op> {
    fn domain_len(&self) -> usize {
        self.total
    }

    fn range_len(&self) -> usize {
        self.total
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        let m = self.op.domain_len();
        let mut out = vec![C64::new(0.0, 0.0); self.total];
        out[self.offset..self.offset + m].copy_from_slice(&self.op.forward(&x[self.offset..self.offset + m]));
        out
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        let m = self.op.domain_len();
        let mut out = vec![C64::new(0.0, 0.0); self.total];
        out[self.offset..self.offset + m].copy_from_slice(&self.op.adjoint(&y[self.offset..self.offset + m]));
        out
    }
}

/// `Mᴴ G M` for an inner operator `M` and a square `G`.
pub struct Sandwich<G, M> {
    pub gram: G,
    pub inner: M,
}

impl<G: LinearOperator, M: LinearOperator> LinearOperator for Sandwich<G, M> {
    fn domain_len(&self) -> usize {
        self.inner.domain_len()
    }

    fn range_len(&self) -> usize {
        self.inner.domain_len()
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        self.inner.adjoint(&self.gram.forward(&self.inner.forward(x)))
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        self.inner.adjoint(&self.gram.adjoint(&self.inner.forward(y)))
    }
}

/// Identity on vectors of the given length.
#[derive(Clone, Copy, Debug)]
pub struct Identity(pub usize);

impl LinearOperator for Identity {
    fn domain_len(&self) -> usize {
        self.0
    }

    fn range_len(&self) -> usize {
        self.0
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        x.to_vec()
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        y.to_vec()
    }
}

/// `outer ∘ inner`.
pub struct Compose<A, B> {
    pub outer: A,
    pub inner: B,
}

impl<A: LinearOperator, B: LinearOperator> LinearOperator for Compose<A, B> {
    fn domain_len(&self) -> usize {
        self.inner.domain_len()
    }

    fn range_len(&self) -> usize {
        self.outer.range_len()
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        self.outer.forward(&self.inner.forward(x))
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        self.inner.adjoint(&self.outer.adjoint(y))
    }
}

/// Restricts an operator to a contiguous slice of a longer primal vector.
pub struct Embed<Op> {
    pub op: Op,
    pub offset: usize,
    pub total: usize,
}

impl<Op: LinearOperator> LinearOperator for Embed<Op> {
    fn domain_len(&self) -> usize {
        self.total
    }

    fn range_len(&self) -> usize {
        self.op.range_len()
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        self.op.forward(&x[self.offset..self.offset + self.op.domain_len()])
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        let mut out = vec![C64::new(0.0, 0.0); self.total];
        let part = self.op.adjoint(y);
        out[self.offset..self.offset + part.len()].copy_from_slice(&part);
        out
    }
}

/// Operator given by a pair of closures.
pub struct FnOperator<F, G> {
    pub domain: usize,
    pub range: usize,
    pub fwd: F,
    pub adj: G,
}

impl<F, G> LinearOperator for FnOperator<F, G>
where
    F: Fn(&[C64]) -> Vec<C64> + Sync,
    G: Fn(&[C64]) -> Vec<C64> + Sync,
{
    fn domain_len(&self) -> usize {
        self.domain
    }

    fn range_len(&self) -> usize {
        self.range
    }

    fn forward(&self, x: &[C64]) -> Vec<C64> {
        (self.fwd)(x)
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        (self.adj)(y)
    }
}

/// Conjugate gradient on the normal equations of `min ‖A x − b‖²`.
pub fn cg_least_squares(op: &dyn LinearOperator, b: &[C64], iters: usize, tol: f64) -> Vec<C64> {
    let n = op.domain_len();
    let mut x = vec![C64::new(0.0, 0.0); n];
    let mut r = op.adjoint(b);
    let mut p = r.clone();
    let mut rr: f64 = r.iter().map(|v| v.norm_sqr()).sum();
    let r0 = rr.sqrt();
    if r0 == 0.0 {
        return x;
    }
    for _ in 0..iters {
        let ap = op.adjoint(&op.forward(&p));
        let pap: f64 = p.iter().zip(&ap).map(|(a, b)| (a.conj() * b).re).sum();
        if pap <= 0.0 {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += p[i] * alpha;
            r[i] -= ap[i] * alpha;
        }
        let rr_new: f64 = r.iter().map(|v| v.norm_sqr()).sum();
        if rr_new.sqrt() < tol * r0 {
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + p[i] * beta;
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<C64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| C64::new(r.gen::<f64>() - 0.5, r.gen::<f64>() - 0.5)).collect()
    }

    fn identity(n: usize) -> Box<dyn LinearOperator> {
        Box::new(FnOperator { domain: n, range: n, fwd: |x: &[C64]| x.to_vec(), adj: |y: &[C64]| y.to_vec() })
    }

    #[test]
    fn denoising_with_l1_soft_thresholds() {
        // min ‖x − b‖² + w·Σ|x| has solution soft(b, w/2)
        let n = 50;
        let b = rand_vec(n, 1);
        let w = 0.3;
        let blocks = vec![
            Block::new("data", identity(n), Penalty::Quadratic { target: b.clone() }),
            Block::new("l1", identity(n), Penalty::GroupL1 { weight: w, n_comp: 1 }),
        ];
        let opts = SolverOptions { max_iters: 3000, tol: 1e-12, ..Default::default() };
        let (x, rep) = primal_dual(&blocks, n, None, &opts).unwrap();
        for (xi, bi) in x.iter().zip(&b) {
            let a = bi.norm();
            let expect = if a > w / 2.0 { bi * ((a - w / 2.0) / a) } else { C64::new(0.0, 0.0) };
            assert!((xi - expect).norm() < 1e-6);
        }
        assert!(rep.final_objective() <= rep.initial_objective());
    }

    #[test]
    fn least_squares_matches_cg() {
        let (m, n) = (40, 25);
        let a = rand_vec(m * n, 3);
        let b = rand_vec(m, 4);
        let at = a.clone();
        let op = FnOperator {
            domain: n,
            range: m,
            fwd: move |x: &[C64]| (0..m).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect(),
            adj: move |y: &[C64]| (0..n).map(|j| (0..m).map(|i| at[i * n + j].conj() * y[i]).sum()).collect(),
        };
        let cg = cg_least_squares(&op, &b, 200, 1e-14);
        let blocks = vec![Block::new("data", Box::new(op), Penalty::Quadratic { target: b })];
        let opts = SolverOptions { max_iters: 20000, tol: 1e-13, ..Default::default() };
        let (x, _) = primal_dual(&blocks, n, None, &opts).unwrap();
        let err: f64 = x.iter().zip(&cg).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt() / norm(&cg);
        assert!(err < 1e-6, "{err}");
    }

    fn dense(m: usize, n: usize, seed: u64) -> (impl LinearOperator + Clone, Vec<C64>) {
        let a = rand_vec(m * n, seed);
        let b = rand_vec(m, seed + 1);
        let at = a.clone();
        let op = FnOperator {
            domain: n,
            range: m,
            fwd: move |x: &[C64]| (0..m).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect(),
            adj: move |y: &[C64]| (0..n).map(|j| (0..m).map(|i| at[i * n + j].conj() * y[i]).sum()).collect(),
        };
        (op, b)
    }

    impl<F: Clone, G: Clone> Clone for FnOperator<F, G> {
        fn clone(&self) -> Self {
            FnOperator { domain: self.domain, range: self.range, fwd: self.fwd.clone(), adj: self.adj.clone() }
        }
    }

    fn normal_form<'a>(op: impl LinearOperator + Clone + 'a, b: &[C64]) -> Smooth<'a> {
        let rhs = op.adjoint(b);
        let c = b.iter().map(|v| v.norm_sqr()).sum();
        let m = op.range_len();
        Smooth::new("data", Box::new(Sandwich { gram: Identity(m), inner: op }), rhs, c)
    }

    #[test]
    fn smooth_least_squares_matches_cg() {
        let (op, b) = dense(40, 25, 3);
        let cg = cg_least_squares(&op, &b, 200, 1e-14);
        let p = Problem::new(vec![normal_form(op.clone(), &b)], Vec::new(), 25);
        let opts = SolverOptions { max_iters: 20000, tol: 1e-13, ..Default::default() };
        let (x, rep) = p.solve(None, &opts).unwrap();
        let err: f64 = x.iter().zip(&cg).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt() / norm(&cg);
        assert!(err < 1e-6, "{err}");
        // objective in normal form equals the residual norm
        let r: f64 = op.forward(&x).iter().zip(&b).map(|(a, c)| (a - c).norm_sqr()).sum();
        assert!((rep.final_objective() - r).abs() <= 1e-8 * r.max(1.0));
        assert!((p.evaluate(&x) - r).abs() <= 1e-8 * r.max(1.0));
    }

    #[test]
    fn smooth_and_dual_forms_agree_with_l1() {
        let (op, b) = dense(30, 20, 8);
        let opts = SolverOptions { max_iters: 30000, tol: 1e-12, ..Default::default() };
        let dual = vec![
            Block::new("data", Box::new(op.clone()), Penalty::Quadratic { target: b.clone() }),
            Block::new("l1", identity(20), Penalty::GroupL1 { weight: 0.5, n_comp: 1 }),
        ];
        let (xd, _) = primal_dual(&dual, 20, None, &opts).unwrap();
        let p = Problem::new(vec![normal_form(op, &b)], vec![Block::new("l1", identity(20), Penalty::GroupL1 { weight: 0.5, n_comp: 1 })], 20);
        let (xs, rep) = p.solve(None, &opts).unwrap();
        let err: f64 = xs.iter().zip(&xd).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>().sqrt() / norm(&xd);
        assert!(err < 1e-5, "{err}");
        assert!(rep.final_objective() <= rep.initial_objective());
    }

    #[test]
    fn padded_and_sandwich_are_adjoint_consistent() {
        let (op, _) = dense(7, 5, 11);
        let pad = Padded { op: Sandwich { gram: Identity(7), inner: op }, offset: 3, total: 12 };
        let x = rand_vec(12, 12);
        let y = rand_vec(12, 13);
        let lhs = dot(&pad.forward(&x), &y);
        let rhs = dot(&x, &pad.adjoint(&y));
        assert!((lhs - rhs).norm() < 1e-10);
        assert!(pad.forward(&x)[..3].iter().chain(&pad.forward(&x)[8..]).all(|v| v.norm() == 0.0));
    }

    #[test]
    fn zero_data_gives_zero_solution() {
        let n = 10;
        let blocks = vec![
            Block::new("data", identity(n), Penalty::Quadratic { target: vec![C64::new(0.0, 0.0); n] }),
            Block::new("l1", identity(n), Penalty::GroupL1 { weight: 1.0, n_comp: 1 }),
        ];
        let (x, rep) = primal_dual(&blocks, n, None, &SolverOptions::default()).unwrap();
        assert!(x.iter().all(|v| v.norm() == 0.0));
        assert!(rep.converged);
    }

    #[test]
    fn zero_operator_is_infeasible() {
        let zero = FnOperator { domain: 3, range: 3, fwd: |_: &[C64]| vec![C64::new(0.0, 0.0); 3], adj: |_: &[C64]| vec![C64::new(0.0, 0.0); 3] };
        let blocks = vec![Block::new("z", Box::new(zero), Penalty::Quadratic { target: vec![C64::new(1.0, 0.0); 3] })];
        assert!(matches!(primal_dual(&blocks, 3, None, &SolverOptions::default()), Err(Error::Solver(_))));
    }
}
