//! Solvers for the assembled saddle-point system.
//!
//! The direct path factors the full gauge-constrained matrix with a sparse
//! `LDLᵀ` (fill-reducing AMD ordering). The matrix is indefinite, so a tiny
//! static shift makes it quasi-definite (`+ε` on the velocity block, `−ε` on
//! pressure and multipliers, scaled row by row), which allows a factorization
//! without pivoting. GMRES on the unshifted matrix, preconditioned by that
//! factor, then removes the perturbation and any pivot growth.
//!
//! The iterative path runs preconditioned MINRES on the unconstrained system
//! `[K Bᵀ; B 0]` with a block-diagonal preconditioner (incomplete Cholesky of
//! `K`, viscosity-weighted pressure mass) and removes the gauge components
//! afterwards.

use std::sync::Arc;

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::ldlt::factor::LdltRegularization;
use faer::sparse::linalg::cholesky::{factorize_symbolic_cholesky, LdltRef, SymbolicCholesky, SymmetricOrdering};
use faer::sparse::{SparseColMat, Triplet};
use faer::{Conj, Mat, Par, Side};

use crate::coeffs::EllipticTensor;
use crate::domain::DomainSpec;
use crate::error::{invalid, Error, Result};
use crate::grid::{assemble, assemble_rhs, Forcing, MacGrid, SaddleSystem, StaggeredField};
use crate::sparse::CsrMatrix;

/// Default relative residual tolerance.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Relative size of the quasi-definite shift.
const STATIC_SHIFT: f64 = 1e-8;

/// Krylov budget of the factorization-preconditioned solve.
const MAX_KRYLOV_STEPS: usize = 300;

const GMRES_RESTART: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Direct,
    Iterative,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolveOptions {
    /// Relative residual of the full block system, in `[1e-14, 1e-6]`.
    pub tol: f64,
    /// MINRES iteration budget of the iterative method.
    pub max_iter: usize,
    pub method: Method,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOL, max_iter: 20_000, method: Method::Direct }
    }
}

impl SolveOptions {
    pub fn iterative() -> Self {
        Self { method: Method::Iterative, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub field: StaggeredField,
    /// Achieved `‖A x − b‖₂ / ‖b‖₂` on the full block system.
    pub residual: f64,
    pub iterations: usize,
    /// Gauge multipliers (velocity means first, pressure mean last).
    pub multipliers: Vec<f64>,
}

/// A reusable factorization of one saddle system.
pub struct Factorization {
    grid: Arc<MacGrid>,
    matrix: CsrMatrix,
    symbolic: SymbolicCholesky<usize>,
    values: Vec<f64>,
}

impl std::fmt::Debug for Factorization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Factorization").field("n", &self.matrix.nrows()).field("nnz_l", &self.values.len()).finish()
    }
}

/// Factor the full block matrix of `sys`.
pub fn factorize(sys: &SaddleSystem) -> Result<Factorization> {
    let a = sys.matrix();
    let n = a.nrows();
    let nu = sys.grid().n_velocity();
    let kd = sys.k().diagonal();
    let kdiag = kd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if kdiag == 0.0 {
        return Err(Error::Singular("velocity block is zero".into()));
    }
    // Row-relative shifts: each velocity row by its own diagonal, each other
    // row by its local Schur-complement diagonal `Σ_c A_rc²/K_cc`, so soft
    // layers are perturbed as little as stiff ones.
    let brow = (0..sys.b().nrows())
        .map(|r| sys.b().row(r).map(|(_, v)| v * v).sum::<f64>())
        .fold(0.0f64, f64::max);
    let eps_floor = STATIC_SHIFT * (brow / kdiag).max(f64::MIN_POSITIVE);
    let shifts: Vec<f64> = (0..n)
        .map(|r| {
            if r < nu {
                STATIC_SHIFT * kd[r].abs().max(f64::MIN_POSITIVE * kdiag)
            } else {
                let schur: f64 =
                    a.row(r).filter(|&(c, _)| c < nu && kd[c] != 0.0).map(|(c, v)| v * v / kd[c].abs()).sum();
                if schur > 0.0 { -STATIC_SHIFT * schur } else { -eps_floor }
            }
        })
        .collect();
    let mut trip = Vec::with_capacity(a.nnz() / 2 + n);
    for r in 0..n {
        let shift = shifts[r];
        let mut diag_seen = false;
        for (c, v) in a.row(r) {
            if c == r {
                trip.push(Triplet::new(r, c, v + shift));
                diag_seen = true;
            } else if c < r {
                trip.push(Triplet::new(r, c, v));
            }
        }
        if !diag_seen {
            trip.push(Triplet::new(r, r, shift));
        }
    }
    let lower = SparseColMat::<usize, f64>::try_new_from_triplets(n, n, &trip)
        .map_err(|e| Error::Singular(format!("matrix conversion failed: {e:?}")))?;
    let symbolic = factorize_symbolic_cholesky(lower.symbolic(), Side::Lower, SymmetricOrdering::Amd, Default::default())
        .map_err(|e| Error::Singular(format!("symbolic factorization failed: {e:?}")))?;
    let mut values = vec![0.0; symbolic.len_val()];
    let par = Par::Seq;
    let mut mem = MemBuffer::new(symbolic.factorize_numeric_ldlt_scratch::<f64>(par, Default::default()));
    let reg = LdltRegularization {
        dynamic_regularization_signs: None,
        dynamic_regularization_delta: 0.0,
        dynamic_regularization_epsilon: 0.0,
    };
    symbolic
        .factorize_numeric_ldlt(&mut values, lower.as_ref(), Side::Lower, reg, par, MemStack::new(&mut mem), Default::default())
        .map_err(|e| Error::Singular(format!("numeric factorization failed: {e:?}")))?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("factorization produced non-finite values".into()));
    }
    Ok(Factorization { grid: sys.grid().clone(), matrix: a.clone(), symbolic, values })
}

impl Factorization {
    /// Solve to relative residual `tol` with GMRES preconditioned by the
    /// shifted factorization (two or three steps unless the coefficient
    /// contrast is extreme).
    pub fn solve(&self, rhs: &[f64], tol: f64) -> Result<Solution> {
        check_tol(tol)?;
        let n = self.matrix.nrows();
        if rhs.len() != n {
            return Err(invalid(format!("rhs has {} entries, system has {n}", rhs.len())));
        }
        let bnorm = norm(rhs);
        if bnorm == 0.0 {
            return Ok(Solution {
                field: StaggeredField::zeros(&self.grid),
                residual: 0.0,
                iterations: 0,
                multipliers: vec![0.0; self.grid.n_constraints()],
            });
        }
        let ldlt = LdltRef::<usize, f64>::new(&self.symbolic, &self.values);
        let par = Par::Seq;
        let mut mem = MemBuffer::new(self.symbolic.solve_in_place_scratch::<f64>(1, par));
        let mut precondition = |r: &[f64]| -> Vec<f64> {
            let mut m = Mat::<f64>::from_fn(n, 1, |i, _| r[i]);
            ldlt.solve_in_place_with_conj(Conj::No, m.as_mut(), par, MemStack::new(&mut mem));
            (0..n).map(|i| m[(i, 0)]).collect()
        };
        let mut x = vec![0.0; n];
        let mut steps = 0;
        let mut residual = 1.0;
        while steps < MAX_KRYLOV_STEPS {
            let r: Vec<f64> = rhs.iter().zip(self.matrix.matvec(&x)).map(|(b, ax)| b - ax).collect();
            residual = norm(&r) / bnorm;
            if !residual.is_finite() {
                return Err(Error::Singular("preconditioned iteration diverged".into()));
            }
            if residual <= tol {
                break;
            }
            let budget = GMRES_RESTART.min(MAX_KRYLOV_STEPS - steps);
            steps += gmres_cycle(&self.matrix, &mut precondition, &r, &mut x, tol * bnorm, budget);
        }
        if residual > tol {
            return Err(Error::NonConvergence { residual, iterations: steps });
        }
        let g = &self.grid;
        let nup = g.n_velocity() + g.n_pressure();
        let multipliers = x[nup..].to_vec();
        check_multipliers(g, &multipliers, bnorm)?;
        Ok(Solution { field: StaggeredField::from_unknowns(g, &x)?, residual, iterations: steps, multipliers })
    }
}

/// A nonzero multiplier means the data violate a compatibility condition.
fn check_multipliers(g: &MacGrid, lambda: &[f64], bnorm: f64) -> Result<()> {
    let vol = g.domain().cell_volume();
    let counts: Vec<usize> = if g.has_velocity_gauge() {
        (0..g.dim()).map(|i| g.velocity_range(i).len()).chain([g.n_pressure()]).collect()
    } else {
        vec![g.n_pressure()]
    };
    for (k, (&l, &cnt)) in lambda.iter().zip(&counts).enumerate() {
        let effect = l.abs() * vol * (cnt as f64).sqrt();
        if effect > 1e-8 * bnorm {
            let what = if k + 1 == lambda.len() { "pressure mean" } else { "velocity mean" };
            return Err(Error::Singular(format!("data incompatible with the {what} gauge (multiplier {l:.3e})")));
        }
    }
    Ok(())
}

/// One restarted-GMRES cycle on `A e = r` with right preconditioner `m`,
/// adding the correction to `x`. Returns the number of Krylov steps taken.
fn gmres_cycle(
    a: &CsrMatrix,
    m: &mut impl FnMut(&[f64]) -> Vec<f64>,
    r: &[f64],
    x: &mut [f64],
    abs_tol: f64,
    budget: usize,
) -> usize {
    let beta = norm(r);
    let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
    let mut z: Vec<Vec<f64>> = Vec::with_capacity(budget);
    let mut hess: Vec<Vec<f64>> = Vec::with_capacity(budget);
    let (mut cs, mut sn): (Vec<f64>, Vec<f64>) = (Vec::with_capacity(budget), Vec::with_capacity(budget));
    let mut gvec = vec![beta];
    let mut k = 0;
    while k < budget {
        let zk = m(&v[k]);
        let mut w = a.matvec(&zk);
        z.push(zk);
        let mut col = Vec::with_capacity(k + 2);
        for vi in &v {
            let hij = dot(&w, vi);
            for (wl, vl) in w.iter_mut().zip(vi) {
                *wl -= hij * vl;
            }
            col.push(hij);
        }
        let hnext = norm(&w);
        col.push(hnext);
        for i in 0..k {
            let (a0, a1) = (col[i], col[i + 1]);
            col[i] = cs[i] * a0 + sn[i] * a1;
            col[i + 1] = -sn[i] * a0 + cs[i] * a1;
        }
        let rho = col[k].hypot(col[k + 1]);
        let (c, s) = if rho == 0.0 { (1.0, 0.0) } else { (col[k] / rho, col[k + 1] / rho) };
        col[k] = rho;
        col.pop();
        cs.push(c);
        sn.push(s);
        gvec.push(-s * gvec[k]);
        gvec[k] *= c;
        hess.push(col);
        k += 1;
        if gvec[k].abs() <= abs_tol || hnext == 0.0 {
            break;
        }
        v.push(w.iter().map(|wl| wl / hnext).collect());
    }
    // back substitution on the rotated Hessenberg (column-stored) system
    let mut y = vec![0.0; k];
    for i in (0..k).rev() {
        let tail: f64 = (i + 1..k).map(|j| hess[j][i] * y[j]).sum();
        y[i] = if hess[i][i] == 0.0 { 0.0 } else { (gvec[i] - tail) / hess[i][i] };
    }
    for (yj, zj) in y.iter().zip(&z) {
        for (xl, zl) in x.iter_mut().zip(zj) {
            *xl += yj * zl;
        }
    }
    k
}

fn check_tol(tol: f64) -> Result<()> {
    if !(1e-14..=1e-6).contains(&tol) {
        return Err(invalid(format!("tolerance {tol} not in [1e-14, 1e-6]")));
    }
    Ok(())
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// Solve `sys x = rhs` (rhs ordered like the full block system, e.g. from
/// [`assemble_rhs`]).
pub fn solve(sys: &SaddleSystem, rhs: &[f64], opts: &SolveOptions) -> Result<Solution> {
    check_tol(opts.tol)?;
    match opts.method {
        Method::Direct => factorize(sys)?.solve(rhs, opts.tol),
        Method::Iterative => solve_minres(sys, rhs, opts.tol, opts.max_iter),
    }
}

/// Incomplete Cholesky factor with the sparsity of the lower triangle.
struct IncompleteCholesky {
    /// Row-wise strictly lower part: per row `(col, value)` sorted by column.
    rows: Vec<Vec<(usize, f64)>>,
    diag: Vec<f64>,
}

impl IncompleteCholesky {
    fn new(k: &CsrMatrix) -> Result<Self> {
        let n = k.nrows();
        let scale = k.diagonal().into_iter().fold(0.0f64, |m, v| m.max(v));
        let mut shift = 1e-8 * scale;
        for _ in 0..12 {
            if let Some(f) = Self::try_factor(k, shift) {
                return Ok(f);
            }
            shift *= 10.0;
        }
        Err(Error::Singular(format!("incomplete Cholesky broke down on {n} rows")))
    }

    fn try_factor(k: &CsrMatrix, shift: f64) -> Option<Self> {
        let n = k.nrows();
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
        let mut diag = vec![0.0; n];
        for i in 0..n {
            let mut row: Vec<(usize, f64)> = k.row(i).filter(|&(c, _)| c < i).collect();
            for t in 0..row.len() {
                let (kc, a) = row[t];
                // Σ_{m<k} L[i,m] L[k,m] over the shared pattern
                let mut s = 0.0;
                let (ri, rk) = (&row[..t], &rows[kc]);
                let (mut p, mut q) = (0, 0);
                while p < ri.len() && q < rk.len() {
                    match ri[p].0.cmp(&rk[q].0) {
                        std::cmp::Ordering::Less => p += 1,
                        std::cmp::Ordering::Greater => q += 1,
                        std::cmp::Ordering::Equal => {
                            s += ri[p].1 * rk[q].1;
                            p += 1;
                            q += 1;
                        }
                    }
                }
                row[t].1 = (a - s) / diag[kc];
            }
            let di = k.get(i, i) + shift - row.iter().map(|(_, v)| v * v).sum::<f64>();
            if !(di > 0.0) {
                return None;
            }
            diag[i] = di.sqrt();
            rows.push(row);
        }
        Some(Self { rows, diag })
    }

    /// `x = (L Lᵀ)⁻¹ r`.
    fn apply(&self, r: &[f64], x: &mut [f64]) {
        let n = self.diag.len();
        for i in 0..n {
            let s: f64 = self.rows[i].iter().map(|&(c, v)| v * x[c]).sum();
            x[i] = (r[i] - s) / self.diag[i];
        }
        for i in (0..n).rev() {
            x[i] /= self.diag[i];
            let xi = x[i];
            for &(c, v) in &self.rows[i] {
                x[c] -= v * xi;
            }
        }
    }
}

fn solve_minres(sys: &SaddleSystem, rhs: &[f64], tol: f64, max_iter: usize) -> Result<Solution> {
    let g = sys.grid().clone();
    let (nu, np) = (g.n_velocity(), g.n_pressure());
    let n = nu + np;
    if rhs.len() != sys.n_unknowns() {
        return Err(invalid(format!("rhs has {} entries, system has {}", rhs.len(), sys.n_unknowns())));
    }
    if rhs[n..].iter().any(|v| *v != 0.0) {
        return Err(invalid("the iterative solver takes homogeneous gauge constraints"));
    }
    let b = &rhs[..n];
    let bnorm = norm(b);
    if bnorm == 0.0 {
        return Ok(Solution {
            field: StaggeredField::zeros(&g),
            residual: 0.0,
            iterations: 0,
            multipliers: vec![0.0; g.n_constraints()],
        });
    }
    // compatibility with the kernel of the unconstrained operator
    let mut kernel_checks: Vec<(f64, usize)> = vec![(b[nu..].iter().sum(), np)];
    if g.has_velocity_gauge() {
        for i in 0..g.dim() {
            let r = g.velocity_range(i);
            kernel_checks.push((b[r.clone()].iter().sum(), r.len()));
        }
    }
    for (s, cnt) in kernel_checks {
        if s.abs() / (cnt as f64).sqrt() > 1e-10 * bnorm {
            return Err(Error::Singular("data incompatible with the gauge constraints".into()));
        }
    }

    let ic = IncompleteCholesky::new(sys.k())?;
    let vol = g.domain().cell_volume();
    let pdiag: Vec<f64> = (0..np)
        .map(|k| {
            let t = sys.coefficients().cell(g.pressure_cell(k));
            let d = g.dim();
            let nu_c = (0..d).flat_map(|a| (0..d).map(move |i| (a, i))).map(|(a, i)| t.get(a, a, i, i)).sum::<f64>()
                / (d * d) as f64;
            vol / nu_c
        })
        .collect();
    let precond = |r: &[f64], z: &mut [f64]| {
        ic.apply(&r[..nu], &mut z[..nu]);
        for k in 0..np {
            z[nu + k] = r[nu + k] / pdiag[k];
        }
    };
    let apply = |x: &[f64], y: &mut [f64]| {
        sys.k().matvec_into(&x[..nu], &mut y[..nu]);
        let bt = sys.b().matvec_transpose(&x[nu..]);
        for (yi, v) in y[..nu].iter_mut().zip(bt) {
            *yi += v;
        }
        sys.b().matvec_into(&x[..nu], &mut y[nu..]);
    };
    let true_residual = |x: &[f64]| {
        let mut ax = vec![0.0; n];
        apply(x, &mut ax);
        ax.iter().zip(b).map(|(a, bi)| (bi - a).powi(2)).sum::<f64>().sqrt() / bnorm
    };

    let mut x = vec![0.0; n];
    let mut r1 = b.to_vec();
    let mut y = vec![0.0; n];
    precond(&r1, &mut y);
    let beta1 = dot(&r1, &y);
    if !(beta1 > 0.0) {
        return Err(Error::Singular("preconditioner is not positive definite".into()));
    }
    let beta1 = beta1.sqrt();
    let mut r2 = r1.clone();
    let (mut oldb, mut beta) = (0.0, beta1);
    let (mut dbar, mut epsln, mut phibar) = (0.0, 0.0, beta1);
    let (mut cs, mut sn) = (-1.0f64, 0.0f64);
    let mut w = vec![0.0; n];
    let mut w2 = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut residual = 1.0;
    let mut iterations = 0;
    for itn in 1..=max_iter {
        iterations = itn;
        let s = 1.0 / beta;
        for i in 0..n {
            v[i] = s * y[i];
        }
        apply(&v, &mut y);
        if itn >= 2 {
            let f = beta / oldb;
            for i in 0..n {
                y[i] -= f * r1[i];
            }
        }
        let alfa = dot(&v, &y);
        let f = alfa / beta;
        for i in 0..n {
            y[i] -= f * r2[i];
        }
        std::mem::swap(&mut r1, &mut r2);
        r2.copy_from_slice(&y);
        precond(&r2, &mut y);
        oldb = beta;
        let bb = dot(&r2, &y);
        if bb < 0.0 {
            return Err(Error::Singular("preconditioner lost definiteness".into()));
        }
        beta = bb.sqrt();
        let oldeps = epsln;
        let delta = cs * dbar + sn * alfa;
        let gbar = sn * dbar - cs * alfa;
        epsln = sn * beta;
        dbar = -cs * beta;
        let gamma = (gbar * gbar + beta * beta).sqrt().max(f64::EPSILON);
        cs = gbar / gamma;
        sn = beta / gamma;
        let phi = cs * phibar;
        phibar *= sn;
        let denom = 1.0 / gamma;
        for i in 0..n {
            let w1 = w2[i];
            w2[i] = w[i];
            w[i] = (v[i] - oldeps * w1 - delta * w2[i]) * denom;
            x[i] += phi * w[i];
        }
        if phibar / beta1 < 0.1 * tol || itn % 25 == 0 || beta == 0.0 {
            residual = true_residual(&x);
            if residual <= tol || beta == 0.0 {
                break;
            }
        }
    }
    if residual > tol {
        return Err(Error::NonConvergence { residual, iterations });
    }
    // gauge projection: mean-zero pressure, mean-zero periodic velocity
    let pm = x[nu..].iter().sum::<f64>() / np as f64;
    x[nu..].iter_mut().for_each(|p| *p -= pm);
    if g.has_velocity_gauge() {
        for i in 0..g.dim() {
            let r = g.velocity_range(i);
            let m = x[r.clone()].iter().sum::<f64>() / r.len() as f64;
            x[r].iter_mut().for_each(|u| *u -= m);
        }
    }
    let residual = true_residual(&x);
    Ok(Solution {
        field: StaggeredField::from_unknowns(&g, &x)?,
        residual,
        iterations,
        multipliers: vec![0.0; g.n_constraints()],
    })
}

/// Result of [`solve_divergence`].
#[derive(Clone, Debug)]
pub struct DivergenceSolution {
    /// Velocity `ψ` with `div ψ = g` and zero boundary values.
    pub psi: StaggeredField,
    /// `‖div ψ − g‖₂ / ‖g‖₂` (0 for `g = 0`).
    pub divergence_residual: f64,
    /// `K̂₁ = ‖Dψ‖₂ / ‖g‖₂`; `None` when `g = 0`.
    pub k1: Option<f64>,
}

/// Right inverse of the divergence on mean-zero data, realized by the
/// `A = I` Stokes problem with continuity data `g` and no momentum forcing.
/// `‖Dψ‖₂` is the discrete energy norm `(h^d Σ |Gψ|²)^{1/2}`.
pub fn solve_divergence(dom: &DomainSpec, g: &[f64], tol: f64) -> Result<DivergenceSolution> {
    let grid = MacGrid::new(dom.clone());
    if g.len() != dom.n_cells() {
        return Err(invalid(format!("g needs {} cell values", dom.n_cells())));
    }
    let cells = dom.active_cells();
    let mean = cells.iter().map(|&c| g[c]).sum::<f64>() / cells.len() as f64;
    let gmax = cells.iter().fold(0.0f64, |m, &c| m.max(g[c].abs()));
    if mean.abs() > 1e-12 * gmax.max(1.0) {
        return Err(invalid(format!("divergence data has mean {mean:.3e}, expected 0")));
    }
    let gnorm = (cells.iter().map(|&c| g[c] * g[c]).sum::<f64>() * dom.cell_volume()).sqrt();
    if gnorm == 0.0 {
        return Ok(DivergenceSolution { psi: StaggeredField::zeros(&grid), divergence_residual: 0.0, k1: None });
    }
    let a = EllipticTensor::identity(dom.dim(), 0.5)?;
    let sys = assemble(&a, &grid)?;
    let rhs = assemble_rhs(&grid, &Forcing { g: g.to_vec(), ..Default::default() })?;
    let sol = factorize(&sys)?.solve(&rhs.values, tol)?;
    let div = sol.field.divergence();
    let err = (cells.iter().map(|&c| (div[c] - (g[c] - rhs.g_shift)).powi(2)).sum::<f64>() * dom.cell_volume()).sqrt();
    let energy = sys.bilinear_form(&sol.field, &sol.field).max(0.0).sqrt();
    Ok(DivergenceSolution { psi: sol.field, divergence_residual: err / gnorm, k1: Some(energy / gnorm) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::layered_scalar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rhs(grid: &Arc<MacGrid>, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nc = grid.domain().n_cells();
        let d = grid.dim();
        let forcing = Forcing {
            f: vec![],
            f_alpha: (0..d * d).map(|_| (0..nc).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            g: (0..nc).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        assemble_rhs(grid, &forcing).unwrap().values
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let grid = MacGrid::new(DomainSpec::periodic_box(2, 1.0, 8).unwrap());
        let sys = assemble(&EllipticTensor::identity(2, 0.5).unwrap(), &grid).unwrap();
        let zero = vec![0.0; sys.n_unknowns()];
        for opts in [SolveOptions::default(), SolveOptions::iterative()] {
            let sol = solve(&sys, &zero, &opts).unwrap();
            assert!(sol.field.velocity().iter().all(|v| *v == 0.0));
            assert!(sol.field.pressure().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn direct_and_iterative_agree() {
        for dom in [
            DomainSpec::periodic_box(2, 1.0, 8).unwrap(),
            DomainSpec::half_strip(2, 1.0, 1.0, 8).unwrap(),
            DomainSpec::lipschitz_graph_fn(2, 1.0, 16, |x| 0.05 * x[0], 0.05).unwrap(),
        ] {
            let grid = MacGrid::new(dom);
            let a = layered_scalar(2, vec![0.25, 0.5, 0.75], &[0.3, 3.0, 0.3, 3.0], 0.25).unwrap();
            let sys = assemble(&a, &grid).unwrap();
            let rhs = random_rhs(&grid, 11);
            let tol = 1e-12;
            let direct = solve(&sys, &rhs, &SolveOptions { tol, ..Default::default() }).unwrap();
            let iter = solve(&sys, &rhs, &SolveOptions { tol, ..SolveOptions::iterative() }).unwrap();
            assert!(direct.residual <= tol && iter.residual <= tol);
            let (x, y) = (direct.field.to_unknowns(), iter.field.to_unknowns());
            let diff = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(diff <= 1e-9 * norm(&x), "difference {diff}");
            assert!(direct.field.pressure_mean().abs() <= 1e-10 * norm(direct.field.pressure()));
        }
    }

    #[test]
    fn high_contrast_layers_converge() {
        // viscosity ratio 5·10⁴: plain refinement with the shifted factor
        // stagnates here, the preconditioned Krylov iteration does not
        let grid = MacGrid::new(DomainSpec::half_strip(2, 1.0, 1.0, 32).unwrap());
        let bps: Vec<f64> = (1..16).map(|k| k as f64 / 16.0).collect();
        let nus: Vec<f64> = (0..16).map(|k| if k % 2 == 0 { 0.01 } else { 100.0 }).collect();
        let sys = assemble(&layered_scalar(2, bps, &nus, 0.005).unwrap(), &grid).unwrap();
        let rhs = random_rhs(&grid, 3);
        let sol = solve(&sys, &rhs, &SolveOptions::default()).unwrap();
        assert!(sol.residual <= DEFAULT_TOL);
        let mut x = sol.field.to_unknowns();
        x.extend(&sol.multipliers);
        let r: Vec<f64> = rhs.iter().zip(sys.matrix().matvec(&x)).map(|(b, a)| b - a).collect();
        assert!(norm(&r) <= 1e-9 * norm(&rhs));
    }

    #[test]
    fn incompatible_periodic_forcing_is_singular() {
        let grid = MacGrid::new(DomainSpec::periodic_box(2, 1.0, 8).unwrap());
        let sys = assemble(&EllipticTensor::identity(2, 0.5).unwrap(), &grid).unwrap();
        let nc = grid.domain().n_cells();
        let forcing = Forcing { f: vec![vec![1.0; nc], vec![0.0; nc]], ..Default::default() };
        let rhs = assemble_rhs(&grid, &forcing).unwrap();
        assert!(matches!(solve(&sys, &rhs.values, &SolveOptions::default()), Err(Error::Singular(_))));
        assert!(matches!(solve(&sys, &rhs.values, &SolveOptions::iterative()), Err(Error::Singular(_))));
    }

    #[test]
    fn iteration_budget_reports_residual() {
        let grid = MacGrid::new(DomainSpec::dirichlet_box(2, 1.0, 16).unwrap());
        let sys = assemble(&EllipticTensor::identity(2, 0.5).unwrap(), &grid).unwrap();
        let rhs = random_rhs(&grid, 5);
        let opts = SolveOptions { max_iter: 3, ..SolveOptions::iterative() };
        match solve(&sys, &rhs, &opts) {
            Err(Error::NonConvergence { residual, iterations }) => {
                assert!(residual > 0.0 && iterations == 3);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn tolerance_range_enforced() {
        let grid = MacGrid::new(DomainSpec::dirichlet_box(2, 1.0, 8).unwrap());
        let sys = assemble(&EllipticTensor::identity(2, 0.5).unwrap(), &grid).unwrap();
        let rhs = vec![0.0; sys.n_unknowns()];
        assert!(solve(&sys, &rhs, &SolveOptions { tol: 1e-3, ..Default::default() }).is_err());
    }

    #[test]
    fn energy_identity_holds() {
        let grid = MacGrid::new(DomainSpec::half_strip(2, 1.0, 1.0, 16).unwrap());
        let a = layered_scalar(2, vec![0.5], &[1.0, 10.0], 0.05).unwrap();
        let sys = assemble(&a, &grid).unwrap();
        let rhs = random_rhs(&grid, 9);
        let sol = solve(&sys, &rhs, &SolveOptions::default()).unwrap();
        let x = sol.field.to_unknowns();
        let nu = grid.n_velocity();
        let energy = sys.bilinear_form(&sol.field, &sol.field);
        let pg: f64 = x[nu..].iter().zip(&rhs[nu..]).map(|(p, g)| p * g).sum();
        let pairing: f64 = x[..nu].iter().zip(&rhs[..nu]).map(|(u, r)| u * r).sum();
        assert!((energy + pg - pairing).abs() <= 1e-9 * pairing.abs().max(energy));
    }

    #[test]
    fn divergence_solver_examples() {
        let dom = DomainSpec::dirichlet_box(2, 1.0, 16).unwrap();
        let zero = solve_divergence(&dom, &vec![0.0; 256], 1e-10).unwrap();
        assert!(zero.k1.is_none());
        let pi2 = 2.0 * std::f64::consts::PI;
        let g: Vec<f64> = (0..256)
            .map(|c| {
                let x = dom.center(c);
                (pi2 * x[0]).sin() * (pi2 * x[1]).sin()
            })
            .collect();
        let sol = solve_divergence(&dom, &g, 1e-12).unwrap();
        assert!(sol.divergence_residual <= 1e-8);
        assert!(sol.k1.unwrap().is_finite());
        assert!(solve_divergence(&dom, &vec![1.0; 256], 1e-10).is_err());
    }
}
