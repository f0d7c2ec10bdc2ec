//! Independent ground truth at small scale: dense solves of the assembled
//! block system, the analytic Fourier solution of the constant-coefficient
//! system on the torus, and the analytic layered shear flow.
//!
//! Every analytic evaluator carries a self-check against its continuum
//! equations by high-order finite differences, so that sign conventions are
//! established by computation rather than by transcription.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{invalid, Error, Result};
use crate::grid::{SaddleSystem, StaggeredField};

/// Largest system accepted by the dense oracle.
pub const DENSE_DOF_LIMIT: usize = 5000;

fn dense_matrix(sys: &SaddleSystem) -> Result<DMatrix<f64>> {
    let n = sys.n_unknowns();
    if n > DENSE_DOF_LIMIT {
        return Err(Error::TooLarge { dofs: n, limit: DENSE_DOF_LIMIT });
    }
    let mut m = DMatrix::zeros(n, n);
    for (r, c, v) in sys.matrix().iter() {
        m[(r, c)] += v;
    }
    Ok(m)
}

/// Dense LU solve of the full gauge-constrained block system, with one step
/// of iterative refinement. Returns the field and the relative residual.
pub fn dense_solve(sys: &SaddleSystem, rhs: &[f64]) -> Result<(StaggeredField, f64)> {
    let m = dense_matrix(sys)?;
    let n = m.nrows();
    if rhs.len() != n {
        return Err(invalid(format!("rhs has {} entries, system has {n}", rhs.len())));
    }
    let b = DVector::from_column_slice(rhs);
    let bnorm = b.norm();
    if bnorm == 0.0 {
        return Ok((StaggeredField::zeros(sys.grid()), 0.0));
    }
    let lu = m.clone().lu();
    let mut x = lu.solve(&b).ok_or_else(|| Error::Singular("dense block matrix is singular".into()))?;
    let r = &b - &m * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    let residual = (&b - &m * &x).norm() / bnorm;
    if !residual.is_finite() {
        return Err(Error::Singular("dense solve produced non-finite values".into()));
    }
    Ok((StaggeredField::from_unknowns(sys.grid(), x.as_slice())?, residual))
}

/// All eigenvalues of the full block matrix, ascending.
pub fn dense_eigenvalues(sys: &SaddleSystem) -> Result<Vec<f64>> {
    let m = dense_matrix(sys)?;
    let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Smallest eigenvalue of the velocity block restricted to the discretely
/// divergence-free, gauge-admissible subspace `ker [B; C_u]`.
pub fn constrained_min_eigenvalue(sys: &SaddleSystem) -> Result<f64> {
    let g = sys.grid();
    let nu = g.n_velocity();
    let np = g.n_pressure();
    if nu + np > DENSE_DOF_LIMIT {
        return Err(Error::TooLarge { dofs: nu + np, limit: DENSE_DOF_LIMIT });
    }
    let extra = if g.has_velocity_gauge() { g.dim() } else { 0 };
    let mut c = DMatrix::zeros(np + extra, nu);
    for (r, col, v) in sys.b().iter() {
        c[(r, col)] += v;
    }
    for i in 0..extra {
        for k in g.velocity_range(i) {
            c[(np + i, k)] = 1.0;
        }
    }
    // null space from the right singular vectors of the constraint matrix
    let gram = c.transpose() * &c;
    let eig = SymmetricEigen::new(gram);
    let scale = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let null: Vec<usize> = (0..nu).filter(|&k| eig.eigenvalues[k].abs() <= 1e-10 * scale).collect();
    if null.is_empty() {
        return Err(Error::Singular("no divergence-free velocities".into()));
    }
    let z = DMatrix::from_fn(nu, null.len(), |r, k| eig.eigenvectors[(r, null[k])]);
    let mut kd = DMatrix::zeros(nu, nu);
    for (r, col, v) in sys.k().iter() {
        kd[(r, col)] += v;
    }
    let reduced = z.transpose() * kd * &z;
    let reduced = (&reduced + reduced.transpose()) * 0.5;
    Ok(SymmetricEigen::new(reduced).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Exact periodic solution of `Δu + ∇p = f`, `div u = 0` on `[0, L)^d` for
/// `f = f̂ sin(2π k·x/L)`:
/// `u = −(I − k̂k̂ᵀ) f̂ / (4π²|κ|²) · sin(2π k·x/L)` and
/// `p = −(κ·f̂) / (2π|κ|²) · cos(2π k·x/L)` with `κ = k/L`.
#[derive(Clone, Debug, PartialEq)]
pub struct FourierSolution {
    kappa: Vec<f64>,
    u_hat: Vec<f64>,
    p_hat: f64,
    f_hat: Vec<f64>,
}

impl FourierSolution {
    pub fn new(k: &[i64], f_hat: &[f64], side: f64) -> Result<Self> {
        if k.len() != f_hat.len() || k.is_empty() {
            return Err(invalid("wave vector and amplitude must have the same nonzero length"));
        }
        if k.iter().all(|v| *v == 0) {
            return Err(invalid("wave vector must be nonzero"));
        }
        if !(side > 0.0) {
            return Err(invalid("box side must be positive"));
        }
        let kappa: Vec<f64> = k.iter().map(|v| *v as f64 / side).collect();
        let k2: f64 = kappa.iter().map(|v| v * v).sum();
        let kf: f64 = kappa.iter().zip(f_hat).map(|(a, b)| a * b).sum();
        let u_hat = kappa
            .iter()
            .zip(f_hat)
            .map(|(ki, fi)| -(fi - ki * kf / k2) / (4.0 * PI * PI * k2))
            .collect();
        Ok(Self { kappa, u_hat, p_hat: -kf / (2.0 * PI * k2), f_hat: f_hat.to_vec() })
    }

    fn phase(&self, x: &[f64]) -> f64 {
        2.0 * PI * self.kappa.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
    }

    pub fn velocity(&self, i: usize, x: &[f64]) -> f64 {
        self.u_hat[i] * self.phase(x).sin()
    }

    pub fn pressure(&self, x: &[f64]) -> f64 {
        self.p_hat * self.phase(x).cos()
    }

    pub fn forcing(&self, i: usize, x: &[f64]) -> f64 {
        self.f_hat[i] * self.phase(x).sin()
    }

    /// Amplitudes `(û, p̂)`.
    pub fn amplitudes(&self) -> (&[f64], f64) {
        (&self.u_hat, self.p_hat)
    }

    /// Largest residual of `Δu + ∇p − f` and `div u` at `points`, by
    /// sixth-order central differences with step `step`.
    pub fn continuum_residual(&self, points: &[Vec<f64>], step: f64) -> f64 {
        let d = self.kappa.len();
        let mut worst = 0.0f64;
        for x in points {
            let mut div = 0.0;
            for i in 0..d {
                let mut lap = 0.0;
                for a in 0..d {
                    lap += fd_second(|t| self.velocity(i, &shifted(x, a, t)), step);
                    if a == i {
                        div += fd_first(|t| self.velocity(i, &shifted(x, a, t)), step);
                    }
                }
                let grad_p = fd_first(|t| self.pressure(&shifted(x, i, t)), step);
                worst = worst.max((lap + grad_p - self.forcing(i, x)).abs());
            }
            worst = worst.max(div.abs());
        }
        worst
    }
}

fn shifted(x: &[f64], axis: usize, t: f64) -> Vec<f64> {
    let mut y = x.to_vec();
    y[axis] += t;
    y
}

/// Sixth-order central first derivative at `t = 0`.
fn fd_first(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (45.0 * (f(h) - f(-h)) - 9.0 * (f(2.0 * h) - f(-2.0 * h)) + (f(3.0 * h) - f(-3.0 * h))) / (60.0 * h)
}

/// Sixth-order central second derivative at `t = 0`.
fn fd_second(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (2.0 * (f(3.0 * h) + f(-3.0 * h)) - 27.0 * (f(2.0 * h) + f(-2.0 * h)) + 270.0 * (f(h) + f(-h))
        - 490.0 * f(0.0))
        / (180.0 * h * h)
}

/// Plane shear flow `u = (0, u₂(x₁), 0…)`, `p ≡ 0`, through scalar layers
/// with constant flux `ν(x₁) u₂′(x₁) ≡ σ` and `u₂(0) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayeredShear {
    breakpoints: Vec<f64>,
    viscosities: Vec<f64>,
    sigma: f64,
    /// `u₂` at each breakpoint.
    knots: Vec<f64>,
}

impl LayeredShear {
    pub fn new(viscosities: &[f64], breakpoints: &[f64], sigma: f64) -> Result<Self> {
        if viscosities.len() != breakpoints.len() + 1 {
            return Err(invalid("need one viscosity more than breakpoints"));
        }
        if viscosities.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(invalid("viscosities must be positive and finite"));
        }
        if breakpoints.windows(2).any(|w| w[0] >= w[1]) || breakpoints.iter().any(|b| *b <= 0.0) {
            return Err(invalid("breakpoints must be positive and strictly increasing"));
        }
        let mut knots = Vec::with_capacity(breakpoints.len());
        let (mut x, mut u) = (0.0, 0.0);
        for (k, &b) in breakpoints.iter().enumerate() {
            u += sigma / viscosities[k] * (b - x);
            x = b;
            knots.push(u);
        }
        Ok(Self { breakpoints: breakpoints.to_vec(), viscosities: viscosities.to_vec(), sigma, knots })
    }

    fn layer(&self, x1: f64) -> usize {
        self.breakpoints.partition_point(|b| *b < x1)
    }

    pub fn viscosity(&self, x1: f64) -> f64 {
        self.viscosities[self.layer(x1)]
    }

    /// `u₂(x₁)`.
    pub fn u2(&self, x1: f64) -> f64 {
        let k = self.layer(x1);
        let (x0, u0) = if k == 0 { (0.0, 0.0) } else { (self.breakpoints[k - 1], self.knots[k - 1]) };
        u0 + self.sigma / self.viscosities[k] * (x1 - x0)
    }

    /// `D₁u₂ = σ/ν`.
    pub fn du2(&self, x1: f64) -> f64 {
        self.sigma / self.viscosity(x1)
    }

    /// `U₂ = ν D₁u₂ ≡ σ`.
    pub fn flux(&self) -> f64 {
        self.sigma
    }

    pub fn pressure(&self, _x1: f64) -> f64 {
        0.0
    }

    /// Largest violation of `(ν u₂′)′ = 0`, `ν u₂′ = σ` and continuity of
    /// `u₂` at `points` (layer interiors, finite differences with `step`)
    /// and at every breakpoint.
    pub fn continuum_residual(&self, points: &[f64], step: f64) -> f64 {
        let mut worst = 0.0f64;
        for &x in points {
            let nu = self.viscosity(x);
            worst = worst.max(fd_second(|t| self.u2(x + t), step).abs());
            worst = worst.max((nu * fd_first(|t| self.u2(x + t), step) - self.sigma).abs());
        }
        for &b in &self.breakpoints {
            let eps = 1e-12 * b.max(1.0);
            worst = worst.max((self.u2(b + eps) - self.u2(b)).abs() - self.sigma.abs() * 1e-11);
        }
        worst.max(0.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{layered_scalar, EllipticTensor};
    use crate::domain::DomainSpec;
    use crate::grid::{assemble, assemble_rhs, Forcing, MacGrid};
    use crate::linsolve::{solve, SolveOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_points(d: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| (0..d).map(|_| rng.random_range(0.0..1.0)).collect()).collect()
    }

    #[test]
    fn fourier_examples() {
        let s = FourierSolution::new(&[1, 0], &[0.0, 1.0], 1.0).unwrap();
        let (u, p) = s.amplitudes();
        assert_eq!(p, 0.0);
        assert!((u[1] + 1.0 / (4.0 * PI * PI)).abs() < 1e-15 && u[0] == 0.0);
        assert!(s.continuum_residual(&random_points(2, 10, 1), 1e-3) <= 1e-8);

        // gradient forcing: u vanishes, pressure carries everything
        let g = FourierSolution::new(&[1, 2], &[1.0, 2.0], 1.0).unwrap();
        assert!(g.amplitudes().0.iter().all(|v| v.abs() < 1e-15));
        assert!(g.amplitudes().1 != 0.0);
        // divergence-free forcing: p vanishes, u parallel to f̂
        let t = FourierSolution::new(&[1, 2], &[2.0, -1.0], 1.0).unwrap();
        assert_eq!(t.amplitudes().1, 0.0);
        let (u, _) = t.amplitudes();
        assert!((u[0] * -1.0 - u[1] * 2.0).abs() < 1e-15);

        for (k, f) in [([2i64, -1, 1], [0.3, 1.0, -0.5]), ([0, 0, 1], [1.0, 1.0, 1.0])] {
            let s = FourierSolution::new(&k, &f, 2.0).unwrap();
            assert!(s.continuum_residual(&random_points(3, 10, 2), 1e-3) <= 1e-8);
        }
        assert!(FourierSolution::new(&[0, 0], &[1.0, 0.0], 1.0).is_err());
    }

    #[test]
    fn shear_examples() {
        let plane = LayeredShear::new(&[1.0], &[], 1.0).unwrap();
        assert_eq!(plane.u2(0.3), 0.3);
        assert_eq!(plane.du2(0.7), 1.0);

        let two = LayeredShear::new(&[1.0, 10.0], &[0.5], 1.0).unwrap();
        assert!((two.u2(0.75) - (0.5 + 0.025)).abs() < 1e-15);
        assert_eq!(two.du2(0.25), 1.0);
        assert!((two.du2(0.75) - 0.1).abs() < 1e-15);
        let inner: Vec<f64> = (0..10).map(|k| 0.03 + 0.1 * k as f64).filter(|x| (x - 0.5f64).abs() > 0.01).collect();
        assert!(two.continuum_residual(&inner, 1e-3) <= 1e-8);

        let three = LayeredShear::new(&[0.3, 3.0, 0.3], &[1.0 / 3.0, 2.0 / 3.0], 2.0).unwrap();
        let slopes: Vec<f64> = [0.1, 0.5, 0.9].iter().map(|x| three.du2(*x)).collect();
        for (s, e) in slopes.iter().zip([20.0 / 3.0, 2.0 / 3.0, 20.0 / 3.0]) {
            assert!((s - e).abs() < 1e-12);
        }
        assert_eq!(three.flux(), 2.0);
        assert!(three.continuum_residual(&[0.1, 0.5, 0.9], 1e-3) <= 1e-8);
        assert!(LayeredShear::new(&[0.0], &[], 1.0).is_err());
    }

    #[test]
    fn dense_solve_examples() {
        let grid = MacGrid::new(DomainSpec::half_strip(2, 1.0, 1.0, 8).unwrap());
        let a = layered_scalar(2, vec![0.5], &[1.0, 10.0], 0.05).unwrap();
        let sys = assemble(&a, &grid).unwrap();
        let (zero, _) = dense_solve(&sys, &vec![0.0; sys.n_unknowns()]).unwrap();
        assert!(zero.velocity().iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nc = grid.domain().n_cells();
        let forcing = Forcing {
            f_alpha: (0..4).map(|_| (0..nc).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            g: (0..nc).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ..Default::default()
        };
        let rhs = assemble_rhs(&grid, &forcing).unwrap();
        let (field, res) = dense_solve(&sys, &rhs.values).unwrap();
        assert!(res <= 1e-12, "residual {res}");
        let sol = solve(&sys, &rhs.values, &SolveOptions { tol: 1e-13, ..Default::default() }).unwrap();
        let (x, y) = (field.to_unknowns(), sol.field.to_unknowns());
        let diff = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = x.iter().map(|a| a * a).sum::<f64>().sqrt();
        assert!(diff <= 1e-10 * scale);
    }

    #[test]
    fn eigenvalue_examples() {
        let grid = MacGrid::new(DomainSpec::half_strip(2, 1.0, 1.0, 8).unwrap());
        let a = layered_scalar(2, vec![0.5], &[1.0, 10.0], 0.05).unwrap();
        let sys = assemble(&a, &grid).unwrap();
        assert!(constrained_min_eigenvalue(&sys).unwrap() > 0.0);
        let ev = dense_eigenvalues(&sys).unwrap();
        assert!(ev.iter().all(|v| v.abs() > 1e-12));

        let big = MacGrid::new(DomainSpec::periodic_box(2, 1.0, 48).unwrap());
        let sys = assemble(&EllipticTensor::identity(2, 0.5).unwrap(), &big).unwrap();
        assert!(matches!(dense_eigenvalues(&sys), Err(Error::TooLarge { .. })));
    }
}
