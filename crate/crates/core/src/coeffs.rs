//! Coefficient tensors `A^{αβ}_{ij}` of the Stokes operator.
//!
//! A tensor is stored as a `d²×d²` block matrix with row index `(α, i)` and
//! column index `(β, j)`, so the quadratic form `Σ ξ_α·A^{αβ}ξ_β` is an
//! ordinary matrix quadratic form in the flattened `ξ[α·d + i]`.
//!
//! Three structures are supported: constant tensors, tensors that are
//! piecewise constant in `x₁` (layers separated by breakpoints), and layered
//! tensors plus a smooth sinusoidal perturbation that also depends on `x'`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dense::symmetric_eigenvalues;
use crate::error::{invalid, Result};

/// Random directions probed per point when no exact check is available.
pub const DEFAULT_PROBE_DIRECTIONS: usize = 64;

const PROBE_SEED: u64 = 0x5eed_e111;

/// Four-index tensor `A^{αβ}_{ij}`, indices `0..d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    d: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(d: usize) -> Self {
        Self { d, data: vec![0.0; d * d * d * d] }
    }

    /// `δ_{αβ} δ_{ij}`: the Laplacian in each velocity component.
    pub fn identity(d: usize) -> Self {
        Self::scalar(d, 1.0)
    }

    /// Scalar viscosity `ν δ_{αβ} δ_{ij}`.
    pub fn scalar(d: usize, nu: f64) -> Self {
        let mut t = Self::zeros(d);
        for a in 0..d {
            for i in 0..d {
                t.set(a, a, i, i, nu);
            }
        }
        t
    }

    /// Build from entries in row-major `(α, β, i, j)` order.
    pub fn from_entries(d: usize, entries: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&d) {
            return Err(invalid(format!("dimension {d} not in {{2, 3}}")));
        }
        if entries.len() != d.pow(4) {
            return Err(invalid(format!("expected {} tensor entries, got {}", d.pow(4), entries.len())));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite tensor entry"));
        }
        let mut t = Self::zeros(d);
        for a in 0..d {
            for b in 0..d {
                for i in 0..d {
                    for j in 0..d {
                        t.set(a, b, i, j, entries[((a * d + b) * d + i) * d + j]);
                    }
                }
            }
        }
        Ok(t)
    }

    /// Entries in row-major `(α, β, i, j)` order.
    pub fn to_entries(&self) -> Vec<f64> {
        let d = self.d;
        let mut out = Vec::with_capacity(d.pow(4));
        for a in 0..d {
            for b in 0..d {
                for i in 0..d {
                    for j in 0..d {
                        out.push(self.get(a, b, i, j));
                    }
                }
            }
        }
        out
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    fn idx(&self, a: usize, b: usize, i: usize, j: usize) -> usize {
        let n = self.d * self.d;
        (a * self.d + i) * n + (b * self.d + j)
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, i: usize, j: usize) -> f64 {
        self.data[self.idx(a, b, i, j)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, i: usize, j: usize, v: f64) {
        let k = self.idx(a, b, i, j);
        self.data[k] = v;
    }

    /// The `d²×d²` matrix with rows `(α, i)` and columns `(β, j)`.
    pub fn as_matrix(&self) -> &[f64] {
        &self.data
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add_scaled(&mut self, other: &Tensor4, s: f64) {
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += s * y;
        }
    }

    pub fn scaled(&self, s: f64) -> Tensor4 {
        Tensor4 { d: self.d, data: self.data.iter().map(|v| v * s).collect() }
    }

    /// `Σ_{α,β} ξ_α · A^{αβ} ξ_β` with `ξ[α·d + i]`.
    pub fn quadratic_form(&self, xi: &[f64]) -> f64 {
        let n = self.d * self.d;
        let mut s = 0.0;
        for r in 0..n {
            let mut row = 0.0;
            for c in 0..n {
                row += self.data[r * n + c] * xi[c];
            }
            s += xi[r] * row;
        }
        s
    }

    /// `A^{αβ}_{ij} = A^{βα}_{ji}` within `tol`.
    pub fn is_major_symmetric(&self, tol: f64) -> bool {
        let n = self.d * self.d;
        (0..n).all(|r| (0..n).all(|c| (self.data[r * n + c] - self.data[c * n + r]).abs() <= tol))
    }

    /// Smallest eigenvalue of the symmetric part of [`Self::as_matrix`]; the
    /// exact infimum of the quadratic form over unit `ξ`.
    pub fn min_form_eigenvalue(&self) -> f64 {
        let n = self.d * self.d;
        let mut sym = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                sym[r * n + c] = 0.5 * (self.data[r * n + c] + self.data[c * n + r]);
            }
        }
        symmetric_eigenvalues(&sym, n).into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Matrix harmonic mean `2 X (X + Y)⁻¹ Y` of two symmetric positive
    /// definite `m×m` blocks (row-major). Falls back to the arithmetic mean
    /// when `X + Y` is singular.
    pub(crate) fn harmonic_block(x: &[f64], y: &[f64], m: usize) -> Vec<f64> {
        let arithmetic = || x.iter().zip(y).map(|(a, b)| 0.5 * (a + b)).collect::<Vec<f64>>();
        let sum: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
        // z = (X + Y)⁻¹ Y, column by column
        let mut z = vec![0.0; m * m];
        for c in 0..m {
            let mut s = sum.clone();
            let mut col: Vec<f64> = (0..m).map(|r| y[r * m + c]).collect();
            if crate::dense::solve_small(&mut s, &mut col, m).is_none() {
                return arithmetic();
            }
            for r in 0..m {
                z[r * m + c] = col[r];
            }
        }
        let mut h = vec![0.0; m * m];
        for r in 0..m {
            for c in 0..m {
                h[r * m + c] = 2.0 * (0..m).map(|k| x[r * m + k] * z[k * m + c]).sum::<f64>();
            }
        }
        for r in 0..m {
            for c in (r + 1)..m {
                let v = 0.5 * (h[r * m + c] + h[c * m + r]);
                h[r * m + c] = v;
                h[c * m + r] = v;
            }
        }
        h
    }
}

/// Piecewise-constant tensor in `x₁`: `tensors[k]` applies on
/// `(breakpoints[k-1], breakpoints[k]]`, so a point exactly on a breakpoint
/// takes the lower layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layers {
    breakpoints: Vec<f64>,
    tensors: Vec<Tensor4>,
}

impl Layers {
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn tensors(&self) -> &[Tensor4] {
        &self.tensors
    }

    #[inline]
    pub fn layer_index(&self, x1: f64) -> usize {
        self.breakpoints.partition_point(|&b| b < x1)
    }

    #[inline]
    pub fn at(&self, x1: f64) -> &Tensor4 {
        &self.tensors[self.layer_index(x1)]
    }
}

/// One sinusoidal mode `sin(2π k·x + φ) · E`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationMode {
    pub shape: Tensor4,
    pub wave: Vec<f64>,
    pub phase: f64,
}

impl PerturbationMode {
    fn weight(&self, x: &[f64]) -> f64 {
        let arg: f64 = self.wave.iter().zip(x).map(|(k, xi)| k * xi).sum();
        (2.0 * std::f64::consts::PI * arg + self.phase).sin()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Structure {
    Constant(Tensor4),
    LayeredE1(Layers),
    LayeredPlusPerturbation {
        base: Layers,
        modes: Vec<PerturbationMode>,
        amplitude: f64,
    },
}

/// A coefficient field together with its declared ellipticity constant.
///
/// Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct EllipticTensor {
    d: usize,
    delta: f64,
    structure: Structure,
}

impl EllipticTensor {
    pub fn constant(t: Tensor4, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        Ok(Self { d: t.dim(), delta, structure: Structure::Constant(t) })
    }

    /// `A ≡ I` with the given `δ`.
    pub fn identity(d: usize, delta: f64) -> Result<Self> {
        Self::constant(Tensor4::identity(d), delta)
    }

    /// Add `ε Σ sin(2π k·x + φ) E` to a layered (or constant) tensor.
    pub fn with_perturbation(self, modes: Vec<PerturbationMode>, amplitude: f64) -> Result<Self> {
        if !amplitude.is_finite() {
            return Err(invalid("non-finite perturbation amplitude"));
        }
        for m in &modes {
            if m.shape.dim() != self.d || m.wave.len() != self.d {
                return Err(invalid("perturbation mode dimension mismatch"));
            }
        }
        let base = match self.structure {
            Structure::Constant(t) => Layers { breakpoints: vec![], tensors: vec![t] },
            Structure::LayeredE1(l) => l,
            Structure::LayeredPlusPerturbation { .. } => {
                return Err(invalid("tensor already carries a perturbation"))
            }
        };
        Ok(Self {
            d: self.d,
            delta: self.delta,
            structure: Structure::LayeredPlusPerturbation { base, modes, amplitude },
        })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn structure(&self) -> &Structure {
        &self.structure
    }

    /// Layer breakpoints in `x₁` (empty for constant tensors).
    pub fn breakpoints(&self) -> &[f64] {
        match &self.structure {
            Structure::Constant(_) => &[],
            Structure::LayeredE1(l) | Structure::LayeredPlusPerturbation { base: l, .. } => {
                l.breakpoints()
            }
        }
    }

    /// Index of the layer containing `x₁`; `0` for constant tensors.
    #[inline]
    pub fn layer_index(&self, x1: f64) -> usize {
        match &self.structure {
            Structure::Constant(_) => 0,
            Structure::LayeredE1(l) | Structure::LayeredPlusPerturbation { base: l, .. } => {
                l.layer_index(x1)
            }
        }
    }

    pub fn eval(&self, x: &[f64]) -> Tensor4 {
        let mut t = Tensor4::zeros(self.d);
        self.eval_into(x, &mut t);
        t
    }

    pub fn eval_into(&self, x: &[f64], out: &mut Tensor4) {
        match &self.structure {
            Structure::Constant(t) => out.data.copy_from_slice(&t.data),
            Structure::LayeredE1(l) => out.data.copy_from_slice(&l.at(x[0]).data),
            Structure::LayeredPlusPerturbation { base, modes, amplitude } => {
                out.data.copy_from_slice(&base.at(x[0]).data);
                for m in modes {
                    out.add_scaled(&m.shape, amplitude * m.weight(x));
                }
            }
        }
    }

    /// Every layer (or the constant) satisfies `A^{αβ}_{ij} = A^{βα}_{ji}`
    /// and so does every perturbation shape.
    pub fn is_major_symmetric(&self) -> bool {
        let tol = 1e-14;
        match &self.structure {
            Structure::Constant(t) => t.is_major_symmetric(tol),
            Structure::LayeredE1(l) => l.tensors.iter().all(|t| t.is_major_symmetric(tol)),
            Structure::LayeredPlusPerturbation { base, modes, .. } => {
                base.tensors.iter().all(|t| t.is_major_symmetric(tol))
                    && modes.iter().all(|m| m.shape.is_major_symmetric(tol))
            }
        }
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("ellipticity constant {delta} not in (0, 1)")));
    }
    Ok(())
}

/// Piecewise-constant tensor in `x₁`.
pub fn make_layered(
    d: usize,
    breakpoints: Vec<f64>,
    layer_tensors: Vec<Tensor4>,
    delta: f64,
) -> Result<EllipticTensor> {
    check_delta(delta)?;
    if !(2..=3).contains(&d) {
        return Err(invalid(format!("dimension {d} not in {{2, 3}}")));
    }
    if layer_tensors.len() != breakpoints.len() + 1 {
        return Err(invalid(format!(
            "{} layer tensors for {} breakpoints",
            layer_tensors.len(),
            breakpoints.len()
        )));
    }
    if breakpoints.iter().any(|b| !b.is_finite()) {
        return Err(invalid("non-finite breakpoint"));
    }
    if breakpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(invalid("breakpoints must be strictly increasing"));
    }
    if layer_tensors.iter().any(|t| t.dim() != d) {
        return Err(invalid("layer tensor dimension mismatch"));
    }
    Ok(EllipticTensor {
        d,
        delta,
        structure: Structure::LayeredE1(Layers { breakpoints, tensors: layer_tensors }),
    })
}

/// Layered scalar viscosity `ν(x₁) δ_{αβ} δ_{ij}`.
pub fn layered_scalar(d: usize, breakpoints: Vec<f64>, viscosities: &[f64], delta: f64) -> Result<EllipticTensor> {
    if viscosities.iter().any(|&v| !(v > 0.0)) {
        return Err(invalid("viscosities must be positive"));
    }
    let layers = viscosities.iter().map(|&v| Tensor4::scalar(d, v)).collect();
    make_layered(d, breakpoints, layers, delta)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EllipticityReport {
    pub pass: bool,
    /// Minimum of the quadratic form over all probed unit `ξ`.
    pub worst_form: f64,
    /// `max(0, max |A^{αβ}_{ij}| - 1/δ)` over the probes.
    pub worst_bound_violation: f64,
}

/// Check both ellipticity inequalities at the probe points.
///
/// Constant and layered tensors are checked exactly: the infimum of the form
/// is the smallest eigenvalue of the symmetric part of each layer, and all
/// layers are checked regardless of which ones the probe points hit. Other
/// structures are probed with the `d²` canonical matrices `e_α e_iᵀ` plus
/// `probe_directions` random unit directions per point.
pub fn check_ellipticity(
    a: &EllipticTensor,
    probe_points: &[Vec<f64>],
    probe_directions: usize,
) -> Result<EllipticityReport> {
    let d = a.dim();
    if probe_points.is_empty() {
        return Err(invalid("empty probe point set"));
    }
    if probe_directions < d * d {
        return Err(invalid(format!("need at least {} probe directions", d * d)));
    }
    if probe_points.iter().any(|p| p.len() != d) {
        return Err(invalid("probe point dimension mismatch"));
    }
    let exact = |tensors: &[Tensor4]| {
        tensors.iter().fold((f64::INFINITY, 0.0f64), |(w, b), t| {
            (w.min(t.min_form_eigenvalue()), b.max(t.max_abs()))
        })
    };
    let (worst_form, max_entry) = match a.structure() {
        Structure::Constant(t) => exact(std::slice::from_ref(t)),
        Structure::LayeredE1(l) => exact(&l.tensors),
        Structure::LayeredPlusPerturbation { .. } => {
            let n = d * d;
            let mut rng = ChaCha8Rng::seed_from_u64(PROBE_SEED);
            let mut dirs: Vec<Vec<f64>> = (0..n)
                .map(|k| {
                    let mut e = vec![0.0; n];
                    e[k] = 1.0;
                    e
                })
                .collect();
            for _ in 0..probe_directions {
                let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter_mut().for_each(|x| *x /= norm);
                dirs.push(v);
            }
            let mut t = Tensor4::zeros(d);
            let mut worst = f64::INFINITY;
            let mut bound = 0.0f64;
            for p in probe_points {
                a.eval_into(p, &mut t);
                bound = bound.max(t.max_abs());
                for xi in &dirs {
                    worst = worst.min(t.quadratic_form(xi));
                }
            }
            (worst, bound)
        }
    };
    let violation = (max_entry - 1.0 / a.delta()).max(0.0);
    let tol = 1e-12;
    Ok(EllipticityReport {
        pass: worst_form >= a.delta() - tol && violation <= tol,
        worst_form,
        worst_bound_violation: violation,
    })
}

/// Partial mean oscillation of `A` in `x'` over a ball.
#[derive(Clone, Debug, PartialEq)]
pub struct OscillationMeasurement {
    pub center: Vec<f64>,
    pub radius: f64,
    pub gamma: f64,
}

/// Midpoint-rule approximation of
/// `⨍_{B_r(x₀)} |A(y₁, y') − ⨍_{B'_r(x₀')} A(y₁, z') dz'| dy`
/// with the max-entry norm, measured in the fixed `e₁` frame.
///
/// The lattice has `quadrature_n` points per axis on the bounding cube of the
/// ball; points outside the (open) ball are discarded.
pub fn oscillation_gamma(
    a: &EllipticTensor,
    x0: &[f64],
    r: f64,
    quadrature_n: usize,
) -> Result<OscillationMeasurement> {
    let d = a.dim();
    if x0.len() != d {
        return Err(invalid("center dimension mismatch"));
    }
    if !(r > 0.0) || !r.is_finite() {
        return Err(invalid(format!("radius {r} must be positive")));
    }
    if quadrature_n < 8 {
        return Err(invalid("quadrature_n must be at least 8"));
    }
    let step = 2.0 * r / quadrature_n as f64;
    let coord = |k: usize, axis: usize| x0[axis] - r + (k as f64 + 0.5) * step;

    // x'-lattice points inside B'_r(x0'), as offsets per transverse axis
    let nt = quadrature_n.pow(d as u32 - 1);
    let transverse: Vec<Vec<f64>> = (0..nt)
        .map(|flat| {
            let mut rem = flat;
            (1..d)
                .map(|axis| {
                    let k = rem % quadrature_n;
                    rem /= quadrature_n;
                    coord(k, axis)
                })
                .collect()
        })
        .collect();
    let dist2_t = |zp: &[f64]| zp.iter().zip(&x0[1..]).map(|(z, c)| (z - c) * (z - c)).sum::<f64>();
    let in_disk: Vec<&Vec<f64>> = transverse.iter().filter(|zp| dist2_t(zp) < r * r).collect();
    if in_disk.is_empty() {
        return Err(invalid("quadrature lattice misses the transverse ball"));
    }

    let mut t = Tensor4::zeros(d);
    let mut point = vec![0.0; d];
    let mut total = 0.0;
    let mut count = 0usize;
    for k1 in 0..quadrature_n {
        let y1 = coord(k1, 0);
        let dy1 = y1 - x0[0];
        point[0] = y1;
        let mut avg = Tensor4::zeros(d);
        for zp in &in_disk {
            point[1..].copy_from_slice(zp);
            a.eval_into(&point, &mut t);
            avg.add_scaled(&t, 1.0 / in_disk.len() as f64);
        }
        for yp in &in_disk {
            if dy1 * dy1 + dist2_t(yp) >= r * r {
                continue;
            }
            point[1..].copy_from_slice(yp);
            a.eval_into(&point, &mut t);
            let dev = t.data.iter().zip(&avg.data).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            total += dev;
            count += 1;
        }
    }
    if count == 0 {
        return Err(invalid("quadrature lattice misses the ball"));
    }
    Ok(OscillationMeasurement { center: x0.to_vec(), radius: r, gamma: total / count as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_entry(d: usize, a: usize, b: usize, i: usize, j: usize) -> Tensor4 {
        let mut e = Tensor4::zeros(d);
        e.set(a, b, i, j, 1.0);
        e
    }

    #[test]
    fn identity_passes_with_unit_form() {
        let a = EllipticTensor::identity(2, 0.5).unwrap();
        let rep = check_ellipticity(&a, &[vec![0.5, 0.5]], 64).unwrap();
        assert!(rep.pass);
        assert!((rep.worst_form - 1.0).abs() < 1e-14);
        assert_eq!(rep.worst_bound_violation, 0.0);
    }

    #[test]
    fn negative_diagonal_fails() {
        let mut t = Tensor4::identity(2);
        t.set(0, 0, 0, 0, -1.0);
        let a = EllipticTensor::constant(t.clone(), 0.5).unwrap();
        let rep = check_ellipticity(&a, &[vec![0.5, 0.5]], 64).unwrap();
        assert!(!rep.pass);
        assert!(rep.worst_form < 0.0);
        // the canonical direction e₁e₁ᵀ alone already shows it
        let mut xi = vec![0.0; 4];
        xi[0] = 1.0;
        assert_eq!(t.quadratic_form(&xi), -1.0);
        // probing catches it too
        let p = a.with_perturbation(vec![], 0.0).unwrap();
        assert!(!check_ellipticity(&p, &[vec![0.1, 0.2]], 4).unwrap().pass);
    }

    #[test]
    fn probe_arguments_validated() {
        let a = EllipticTensor::identity(2, 0.5).unwrap();
        assert!(check_ellipticity(&a, &[], 64).is_err());
        assert!(check_ellipticity(&a, &[vec![0.0, 0.0]], 3).is_err());
    }

    #[test]
    fn bound_violation_reported() {
        let a = EllipticTensor::constant(Tensor4::scalar(2, 5.0), 0.5).unwrap();
        let rep = check_ellipticity(&a, &[vec![0.0, 0.0]], 4).unwrap();
        assert!(!rep.pass);
        assert!((rep.worst_bound_violation - 3.0).abs() < 1e-14);
    }

    #[test]
    fn layered_lookup_and_tie_break() {
        let a = layered_scalar(2, vec![0.5], &[1.0, 10.0], 0.05).unwrap();
        assert_eq!(a.eval(&[0.25, 0.3]).get(0, 0, 1, 1), 1.0);
        assert_eq!(a.eval(&[0.75, 0.3]).get(1, 1, 0, 0), 10.0);
        // exactly on the breakpoint: lower layer
        assert_eq!(a.eval(&[0.5, 0.9]).get(0, 0, 0, 0), 1.0);
        assert_eq!(a.layer_index(0.5), 0);
        assert_eq!(a.layer_index(0.5 + 1e-12), 1);
    }

    #[test]
    fn equal_layers_are_constant() {
        let a = make_layered(2, vec![0.5], vec![Tensor4::identity(2), Tensor4::identity(2)], 0.5).unwrap();
        for x1 in [0.0, 0.3, 0.5, 0.7, 1.0] {
            assert_eq!(a.eval(&[x1, 0.1]), Tensor4::identity(2));
        }
    }

    #[test]
    fn unsorted_breakpoints_rejected() {
        let l = vec![Tensor4::identity(2); 3];
        assert!(make_layered(2, vec![0.6, 0.4], l.clone(), 0.5).is_err());
        assert!(make_layered(2, vec![0.4, 0.4], l.clone(), 0.5).is_err());
        assert!(make_layered(2, vec![0.4], l, 0.5).is_err());
    }

    #[test]
    fn gamma_vanishes_for_constant_and_layered() {
        let c = EllipticTensor::constant(Tensor4::scalar(2, 2.0), 0.25).unwrap();
        let g = oscillation_gamma(&c, &[0.5, 0.5], 0.25, 16).unwrap();
        assert!(g.gamma.abs() < 1e-14);
        let l = layered_scalar(2, vec![0.3, 0.5, 0.55], &[0.3, 3.0, 0.3, 3.0], 0.25).unwrap();
        for (x0, r) in [([0.5, 0.5], 0.25), ([0.31, 0.9], 0.1), ([0.0, 0.0], 1.0)] {
            assert!(oscillation_gamma(&l, &x0, r, 20).unwrap().gamma < 1e-12);
        }
    }

    #[test]
    fn gamma_argument_errors() {
        let c = EllipticTensor::identity(2, 0.5).unwrap();
        assert!(oscillation_gamma(&c, &[0.5, 0.5], 0.0, 16).is_err());
        assert!(oscillation_gamma(&c, &[0.5, 0.5], 0.2, 4).is_err());
        assert!(oscillation_gamma(&c, &[0.5], 0.2, 16).is_err());
    }

    #[test]
    fn perturbed_gamma_is_positive() {
        let e = unit_entry(2, 0, 1, 1, 0);
        let a = EllipticTensor::identity(2, 0.5)
            .unwrap()
            .with_perturbation(vec![PerturbationMode { shape: e, wave: vec![0.0, 1.0], phase: 0.0 }], 0.1)
            .unwrap();
        let g = oscillation_gamma(&a, &[0.5, 0.5], 0.25, 32).unwrap();
        assert!(g.gamma > 0.0 && g.gamma < 0.2);
    }

    #[test]
    fn harmonic_block_scalar() {
        let h = Tensor4::harmonic_block(&[1.0], &[10.0], 1);
        assert!((h[0] - 20.0 / 11.0).abs() < 1e-14);
    }
}
