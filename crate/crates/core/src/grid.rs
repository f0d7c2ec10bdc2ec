//! Staggered (MAC) discretization of the generalized Stokes operator.
//!
//! Velocity component `u_j` lives on the faces normal to `e_j` (positions
//! shifted by `-h/2` along axis `j` from the cell centers); pressure lives at
//! the active cell centers. A face carries an unknown iff both adjacent cells
//! are active; every other face is pinned to zero.
//!
//! The discrete gradient `G` samples every `D_β u_j` at its natural location:
//! `D_j u_j` at cell centers, `D_β u_j` (`β ≠ j`) at the edge shifted by `-h/2`
//! along both `β` and `j`. The two samples `D_β u_j` and `D_j u_β` share an
//! edge. Next to a wall the missing face is replaced by the zero boundary
//! value half a cell away (`D = ±u/(h/2)`) and the sample weight is `1/2`.
//!
//! The stiffness matrix is `K = h^d G̃ᵀ Â G̃` with `G̃ = W^{1/2} G`, where `Â`
//! couples co-located samples with `A` sampled at that location and couples
//! samples at different locations through cell-centered averages of the edge
//! samples with `A` at the cell center. Edge coefficients are arithmetic
//! averages of the adjacent active cells, except across a layer interface
//! in `x₁`, where the two one-sided blocks are combined by the matrix
//! harmonic mean (flux-preserving).
//!
//! Unknown ordering of the full saddle system: velocity (component by
//! component), pressure (active cells), then the Lagrange multipliers of the
//! gauge constraints: `d` velocity means on the periodic box, and the
//! pressure mean always.

use std::io::{Read, Write};
use std::sync::Arc;

use crate::coeffs::{check_ellipticity, EllipticTensor, Tensor4, DEFAULT_PROBE_DIRECTIONS};
use crate::domain::{DomainSpec, Variant};
use crate::error::{invalid, Error, Result};
use crate::sparse::{CsrMatrix, Triplets};

const NONE: usize = usize::MAX;

/// Probe points used by the ellipticity pre-check of [`assemble`].
const MAX_PROBE_POINTS: usize = 4096;

/// One gradient sample: a difference of at most two face values.
#[derive(Clone, Copy, Debug)]
struct Sample {
    /// Linear index in the sample lattice of `(beta, j)`.
    lin: usize,
    beta: u8,
    j: u8,
    weight: f64,
    len: u8,
    faces: [(usize, f64); 2],
}

impl Sample {
    #[inline]
    fn entries(&self) -> &[(usize, f64)] {
        &self.faces[..self.len as usize]
    }

    #[inline]
    fn eval(&self, u: &[f64]) -> f64 {
        self.entries().iter().map(|&(f, c)| c * u[f]).sum()
    }
}

/// The staggered grid over a domain: DOF maps and gradient stencils.
#[derive(Debug)]
pub struct MacGrid {
    dom: DomainSpec,
    d: usize,
    face_dims: [[usize; 3]; 3],
    face_offset: [usize; 4],
    face_dof: Vec<usize>,
    dof_face: Vec<usize>,
    comp_start: [usize; 4],
    cell_dof: Vec<usize>,
    dof_cell: Vec<usize>,
    velocity_mean: bool,
    samples: Vec<Sample>,
    /// Per ordered pair `β·d + j`: sample lattice dims and lattice → sample id.
    sample_dims: Vec<[usize; 3]>,
    sample_at: Vec<Vec<usize>>,
}

impl MacGrid {
    pub fn new(dom: DomainSpec) -> Arc<MacGrid> {
        let d = dom.dim();
        let dims = dom.dims();
        let mut face_dims = [[1usize; 3]; 3];
        let mut face_offset = [0usize; 4];
        for i in 0..d {
            for a in 0..d {
                face_dims[i][a] = dims[a] + usize::from(a == i && !dom.is_periodic(a));
            }
            face_offset[i + 1] = face_offset[i] + face_dims[i].iter().product::<usize>();
        }
        for i in d..3 {
            face_offset[i + 1] = face_offset[i];
        }
        let mut grid = MacGrid {
            dom,
            d,
            face_dims,
            face_offset,
            face_dof: vec![],
            dof_face: vec![],
            comp_start: [0; 4],
            cell_dof: vec![],
            dof_cell: vec![],
            velocity_mean: false,
            samples: vec![],
            sample_dims: vec![],
            sample_at: vec![],
        };
        grid.velocity_mean = matches!(grid.dom.variant(), Variant::PeriodicBox { .. });

        let n_faces = grid.face_offset[d];
        grid.face_dof = vec![NONE; n_faces];
        for i in 0..d {
            grid.comp_start[i] = grid.dof_face.len();
            for local in 0..(grid.face_offset[i + 1] - grid.face_offset[i]) {
                let f = grid.face_offset[i] + local;
                let (lo, hi) = grid.face_cells(i, grid.face_coords(i, local));
                if lo.is_some_and(|c| grid.dom.is_active(c)) && hi.is_some_and(|c| grid.dom.is_active(c)) {
                    grid.face_dof[f] = grid.dof_face.len();
                    grid.dof_face.push(f);
                }
            }
        }
        for i in d..4 {
            grid.comp_start[i] = grid.dof_face.len();
        }
        grid.cell_dof = vec![NONE; grid.dom.n_cells()];
        for c in 0..grid.dom.n_cells() {
            if grid.dom.is_active(c) {
                grid.cell_dof[c] = grid.dof_cell.len();
                grid.dof_cell.push(c);
            }
        }
        grid.build_samples();
        Arc::new(grid)
    }

    fn build_samples(&mut self) {
        let d = self.d;
        let dims = self.dom.dims();
        let inv_h = 1.0 / self.dom.h();
        self.sample_dims = vec![[1; 3]; d * d];
        self.sample_at = vec![vec![]; d * d];
        for beta in 0..d {
            for j in 0..d {
                let mut sd = [1usize; 3];
                for a in 0..d {
                    sd[a] = dims[a] + usize::from((a == beta || a == j) && beta != j && !self.dom.is_periodic(a));
                }
                let total: usize = sd.iter().product();
                let mut at = vec![NONE; total];
                for (lin, slot) in at.iter_mut().enumerate() {
                    let e = [lin % sd[0], (lin / sd[0]) % sd[1], lin / (sd[0] * sd[1])];
                    let e = [e[0] as isize, e[1] as isize, e[2] as isize];
                    let sample = if beta == j {
                        self.center_sample(j, e, inv_h)
                    } else {
                        self.edge_sample(beta, j, e, inv_h)
                    };
                    if let Some(mut s) = sample {
                        s.lin = lin;
                        *slot = self.samples.len();
                        self.samples.push(s);
                    }
                }
                self.sample_dims[beta * d + j] = sd;
                self.sample_at[beta * d + j] = at;
            }
        }
    }

    fn center_sample(&self, j: usize, c: [isize; 3], inv_h: f64) -> Option<Sample> {
        let cell = self.cell_at(c)?;
        if !self.dom.is_active(cell) {
            return None;
        }
        let lo = self.face_at(j, c)?;
        let hi = self.face_at(j, shift(c, j, 1))?;
        Some(Sample { lin: 0, beta: j as u8, j: j as u8, weight: 1.0, len: 2, faces: [(hi, inv_h), (lo, -inv_h)] })
    }

    fn edge_sample(&self, beta: usize, j: usize, e: [isize; 3], inv_h: f64) -> Option<Sample> {
        let live = |f: [isize; 3]| -> Option<usize> {
            let face = self.face_at(j, f)?;
            let (lo, hi) = self.face_cells(j, f);
            (lo.is_some_and(|c| self.dom.is_active(c)) || hi.is_some_and(|c| self.dom.is_active(c))).then_some(face)
        };
        let upper = live(e);
        let lower = live(shift(e, beta, -1));
        let (beta, j) = (beta as u8, j as u8);
        match (upper, lower) {
            (Some(u), Some(l)) => Some(Sample { lin: 0, beta, j, weight: 1.0, len: 2, faces: [(u, inv_h), (l, -inv_h)] }),
            (Some(u), None) => Some(Sample { lin: 0, beta, j, weight: 0.5, len: 1, faces: [(u, 2.0 * inv_h), (0, 0.0)] }),
            (None, Some(l)) => Some(Sample { lin: 0, beta, j, weight: 0.5, len: 1, faces: [(l, -2.0 * inv_h), (0, 0.0)] }),
            (None, None) => None,
        }
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.dom
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.dom.h()
    }

    /// Face lattice extent of velocity component `i`.
    pub fn face_dims(&self, i: usize) -> [usize; 3] {
        self.face_dims[i]
    }

    /// Total number of faces over all components (pinned included).
    pub fn n_faces(&self) -> usize {
        self.face_offset[self.d]
    }

    /// Faces of component `i` occupy `face_range(i)` in full face storage.
    pub fn face_range(&self, i: usize) -> std::ops::Range<usize> {
        self.face_offset[i]..self.face_offset[i + 1]
    }

    pub fn n_velocity(&self) -> usize {
        self.dof_face.len()
    }

    pub fn n_pressure(&self) -> usize {
        self.dof_cell.len()
    }

    /// Number of Lagrange multipliers (gauge constraints).
    pub fn n_constraints(&self) -> usize {
        1 + if self.velocity_mean { self.d } else { 0 }
    }

    /// Whether velocity means are constrained (periodic box).
    pub fn has_velocity_gauge(&self) -> bool {
        self.velocity_mean
    }

    pub fn n_unknowns(&self) -> usize {
        self.n_velocity() + self.n_pressure() + self.n_constraints()
    }

    /// Velocity unknown of a full face index, if the face is not pinned.
    #[inline]
    pub fn velocity_dof(&self, face: usize) -> Option<usize> {
        let k = self.face_dof[face];
        (k != NONE).then_some(k)
    }

    /// Full face index of velocity unknown `k`.
    pub fn dof_face(&self, k: usize) -> usize {
        self.dof_face[k]
    }

    /// Velocity unknowns of component `i` occupy `velocity_range(i)`.
    pub fn velocity_range(&self, i: usize) -> std::ops::Range<usize> {
        self.comp_start[i]..self.comp_start[i + 1]
    }

    #[inline]
    pub fn pressure_dof(&self, cell: usize) -> Option<usize> {
        let k = self.cell_dof[cell];
        (k != NONE).then_some(k)
    }

    pub fn pressure_cell(&self, k: usize) -> usize {
        self.dof_cell[k]
    }

    /// Component and lattice coordinates of a full face index.
    pub fn face_component(&self, face: usize) -> (usize, [usize; 3]) {
        let i = (0..self.d).find(|&i| face < self.face_offset[i + 1]).expect("face index in range");
        let c = self.face_coords(i, face - self.face_offset[i]);
        (i, [c[0] as usize, c[1] as usize, c[2] as usize])
    }

    /// Physical position of a face (unused coordinates 0).
    pub fn face_position(&self, face: usize) -> [f64; 3] {
        let (i, c) = self.face_component(face);
        let h = self.h();
        let mut x = [0.0; 3];
        for a in 0..self.d {
            x[a] = (c[a] as f64 + if a == i { 0.0 } else { 0.5 }) * h;
        }
        x
    }

    fn face_coords(&self, i: usize, local: usize) -> [isize; 3] {
        let fd = self.face_dims[i];
        [(local % fd[0]) as isize, ((local / fd[0]) % fd[1]) as isize, (local / (fd[0] * fd[1])) as isize]
    }

    /// Cell at (possibly out-of-range) coordinates, wrapping periodic axes.
    #[inline]
    fn cell_at(&self, c: [isize; 3]) -> Option<usize> {
        let dims = self.dom.dims();
        let mut w = [0usize; 3];
        for a in 0..3 {
            let n = dims[a] as isize;
            w[a] = if (0..n).contains(&c[a]) {
                c[a] as usize
            } else if a < self.d && self.dom.is_periodic(a) {
                c[a].rem_euclid(n) as usize
            } else {
                return None;
            };
        }
        Some(self.dom.index(w))
    }

    /// Full face index of component `i` at lattice coordinates `f`.
    #[inline]
    fn face_at(&self, i: usize, f: [isize; 3]) -> Option<usize> {
        let fd = self.face_dims[i];
        let mut w = [0usize; 3];
        for a in 0..3 {
            let n = fd[a] as isize;
            w[a] = if (0..n).contains(&f[a]) {
                f[a] as usize
            } else if a < self.d && self.dom.is_periodic(a) {
                f[a].rem_euclid(n) as usize
            } else {
                return None;
            };
        }
        Some(self.face_offset[i] + w[0] + fd[0] * (w[1] + fd[1] * w[2]))
    }

    /// Cells below and above face `f` of component `i`.
    #[inline]
    fn face_cells(&self, i: usize, f: [isize; 3]) -> (Option<usize>, Option<usize>) {
        (self.cell_at(shift(f, i, -1)), self.cell_at(f))
    }

    #[inline]
    fn sample_id(&self, beta: usize, j: usize, e: [isize; 3]) -> Option<usize> {
        let sd = self.sample_dims[beta * self.d + j];
        let mut w = [0usize; 3];
        for a in 0..3 {
            let n = sd[a] as isize;
            w[a] = if (0..n).contains(&e[a]) {
                e[a] as usize
            } else if a < self.d && self.dom.is_periodic(a) {
                e[a].rem_euclid(n) as usize
            } else {
                return None;
            };
        }
        let id = self.sample_at[beta * self.d + j][w[0] + sd[0] * (w[1] + sd[1] * w[2])];
        (id != NONE).then_some(id)
    }

    /// Edge samples `(β, j)` at the `2^2` edges around an active cell.
    fn edges_around(&self, cell: usize, beta: usize, j: usize) -> [usize; 4] {
        let c = self.dom.coords(cell);
        let c = [c[0] as isize, c[1] as isize, c[2] as isize];
        let mut out = [NONE; 4];
        for (k, (sb, sj)) in [(0, 0), (1, 0), (0, 1), (1, 1)].into_iter().enumerate() {
            let e = shift(shift(c, beta, sb), j, sj);
            out[k] = self.sample_id(beta, j, e).expect("active cell edges carry samples");
        }
        out
    }

    /// Cell-centered combination of a location's samples: identity for center
    /// samples, the average of the four surrounding edges otherwise.
    fn centered(&self, cell: usize, beta: usize, j: usize) -> Vec<(usize, f64)> {
        if beta == j {
            let c = self.dom.coords(cell);
            vec![(self.sample_id(j, j, [c[0] as isize, c[1] as isize, c[2] as isize]).expect("center sample"), 1.0)]
        } else {
            self.edges_around(cell, beta, j).iter().map(|&s| (s, 0.25)).collect()
        }
    }

    /// Values of every gradient sample for the full face vector `u`.
    fn sample_values(&self, u: &[f64]) -> Vec<f64> {
        self.samples.iter().map(|s| s.eval(u)).collect()
    }
}

#[inline]
fn shift(mut c: [isize; 3], axis: usize, by: isize) -> [isize; 3] {
    c[axis] += by;
    c
}

/// Discrete velocity and pressure on a [`MacGrid`].
#[derive(Clone, Debug)]
pub struct StaggeredField {
    grid: Arc<MacGrid>,
    u: Vec<f64>,
    p: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"LSTF";
const FORMAT_VERSION: u32 = 1;

impl StaggeredField {
    pub fn zeros(grid: &Arc<MacGrid>) -> Self {
        Self { grid: grid.clone(), u: vec![0.0; grid.n_faces()], p: vec![0.0; grid.dom.n_cells()] }
    }

    /// Sample `u_i` at face positions and `p` at active cell centers; pinned
    /// faces are set to zero.
    pub fn from_fn(
        grid: &Arc<MacGrid>,
        u: impl Fn(usize, &[f64]) -> f64,
        p: impl Fn(&[f64]) -> f64,
    ) -> Self {
        let d = grid.dim();
        let mut field = Self::zeros(grid);
        for k in 0..grid.n_velocity() {
            let f = grid.dof_face(k);
            let (i, _) = grid.face_component(f);
            field.u[f] = u(i, &grid.face_position(f)[..d]);
        }
        for k in 0..grid.n_pressure() {
            let c = grid.pressure_cell(k);
            field.p[c] = p(&grid.dom.center(c)[..d]);
        }
        field
    }

    /// Field from a solution vector ordered `[velocity, pressure, …]`.
    pub fn from_unknowns(grid: &Arc<MacGrid>, x: &[f64]) -> Result<Self> {
        let (nu, np) = (grid.n_velocity(), grid.n_pressure());
        if x.len() < nu + np {
            return Err(invalid(format!("solution vector has {} entries, need {}", x.len(), nu + np)));
        }
        let mut field = Self::zeros(grid);
        for (k, v) in x[..nu].iter().enumerate() {
            field.u[grid.dof_face(k)] = *v;
        }
        for (k, v) in x[nu..nu + np].iter().enumerate() {
            field.p[grid.pressure_cell(k)] = *v;
        }
        Ok(field)
    }

    /// Velocity and pressure unknowns, `[velocity, pressure]`.
    pub fn to_unknowns(&self) -> Vec<f64> {
        let g = &self.grid;
        let mut x: Vec<f64> = (0..g.n_velocity()).map(|k| self.u[g.dof_face(k)]).collect();
        x.extend((0..g.n_pressure()).map(|k| self.p[g.pressure_cell(k)]));
        x
    }

    pub fn grid(&self) -> &Arc<MacGrid> {
        &self.grid
    }

    /// Full face storage of all components (pinned faces hold 0).
    pub fn velocity(&self) -> &[f64] {
        &self.u
    }

    /// Face values of component `i`.
    pub fn component(&self, i: usize) -> &[f64] {
        &self.u[self.grid.face_range(i)]
    }

    /// Pressure per cell (0 outside `Ω`).
    pub fn pressure(&self) -> &[f64] {
        &self.p
    }

    /// `(p)_Ω`.
    pub fn pressure_mean(&self) -> f64 {
        let g = &self.grid;
        (0..g.n_pressure()).map(|k| self.p[g.pressure_cell(k)]).sum::<f64>() / g.n_pressure() as f64
    }

    /// Velocity at active cell centers: the mean of the two faces normal to
    /// each axis. `d` cell fields, 0 outside `Ω`.
    pub fn cell_velocity(&self) -> Vec<Vec<f64>> {
        let g = &self.grid;
        let mut out = vec![vec![0.0; g.dom.n_cells()]; g.d];
        for c in g.dom.active_cells() {
            let cc = g.dom.coords(c);
            let cc = [cc[0] as isize, cc[1] as isize, cc[2] as isize];
            for (i, comp) in out.iter_mut().enumerate() {
                let lo = g.face_at(i, cc).map_or(0.0, |f| self.u[f]);
                let hi = g.face_at(i, shift(cc, i, 1)).map_or(0.0, |f| self.u[f]);
                comp[c] = 0.5 * (lo + hi);
            }
        }
        out
    }

    /// MAC divergence per cell (0 outside `Ω`).
    pub fn divergence(&self) -> Vec<f64> {
        let g = &self.grid;
        let mut out = vec![0.0; g.dom.n_cells()];
        for c in g.dom.active_cells() {
            let cc = g.dom.coords(c);
            let cc = [cc[0] as isize, cc[1] as isize, cc[2] as isize];
            out[c] = (0..g.d)
                .map(|j| {
                    let s = g.sample_id(j, j, cc).expect("center sample");
                    g.samples[s].eval(&self.u)
                })
                .sum();
        }
        out
    }

    /// Serialize: `"LSTF"`, format version (u32), `d` (u32), three lattice
    /// extents (u64), `h` (f64), domain tag (u8: 0 periodic box, 1 Dirichlet
    /// box, 2 half-strip, 3 graph), then the full face lattice of each velocity
    /// component (axis 0 fastest), then pressure per cell. Little-endian.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let g = &self.grid;
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(g.d as u32).to_le_bytes())?;
        for n in g.dom.dims() {
            w.write_all(&(n as u64).to_le_bytes())?;
        }
        w.write_all(&g.h().to_le_bytes())?;
        w.write_all(&[g.dom.variant().tag()])?;
        for v in self.u.iter().chain(&self.p) {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Inverse of [`Self::write_to`]; the header must match `grid`.
    pub fn read_from(grid: &Arc<MacGrid>, mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 4 + 4 + 4 + 24 + 8 + 1];
        r.read_exact(&mut head)?;
        if &head[..4] != MAGIC {
            return Err(Error::Parse("not a staggered-field file".into()));
        }
        let u32_at = |k: usize| u32::from_le_bytes(head[k..k + 4].try_into().expect("4 bytes"));
        let u64_at = |k: usize| u64::from_le_bytes(head[k..k + 8].try_into().expect("8 bytes"));
        if u32_at(4) != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported format version {}", u32_at(4))));
        }
        let dims = [u64_at(12) as usize, u64_at(20) as usize, u64_at(28) as usize];
        let h = f64::from_le_bytes(head[36..44].try_into().expect("8 bytes"));
        if u32_at(8) as usize != grid.d || dims != grid.dom.dims() || h != grid.h() || head[44] != grid.dom.variant().tag() {
            return Err(Error::Parse("field header does not match the grid".into()));
        }
        let mut field = Self::zeros(grid);
        let mut buf = [0u8; 8];
        for v in field.u.iter_mut().chain(field.p.iter_mut()) {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(field)
    }
}

/// Per-cell `d×d` gradient, `D_β u_j` stored at `(cell·d + j)·d + β`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellGradient {
    d: usize,
    data: Vec<f64>,
}

impl CellGradient {
    fn zeros(d: usize, n_cells: usize) -> Self {
        Self { d, data: vec![0.0; n_cells * d * d] }
    }

    /// `D_β u_j` at `cell`.
    #[inline]
    pub fn get(&self, cell: usize, j: usize, beta: usize) -> f64 {
        self.data[(cell * self.d + j) * self.d + beta]
    }

    #[inline]
    fn set(&mut self, cell: usize, j: usize, beta: usize, v: f64) {
        self.data[(cell * self.d + j) * self.d + beta] = v;
    }

    /// Cell field of one entry `D_β u_j`.
    pub fn entry(&self, j: usize, beta: usize) -> Vec<f64> {
        let n = self.data.len() / (self.d * self.d);
        (0..n).map(|c| self.get(c, j, beta)).collect()
    }

    /// Frobenius norm `|Du|` per cell.
    pub fn magnitude(&self) -> Vec<f64> {
        self.data.chunks(self.d * self.d).map(|b| b.iter().map(|v| v * v).sum::<f64>().sqrt()).collect()
    }

    /// `Σ_j D_j u_j` per cell.
    pub fn trace(&self) -> Vec<f64> {
        self.data
            .chunks(self.d * self.d)
            .map(|b| (0..self.d).map(|j| b[j * self.d + j]).sum())
            .collect()
    }

    /// Tangential block `D_{x'}u` as `(d-1)·d` cell fields (`β ≥ 2`, all `j`).
    pub fn tangential(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for beta in 1..self.d {
            for j in 0..self.d {
                out.push(self.entry(j, beta));
            }
        }
        out
    }
}

/// Coefficients sampled at the gradient-sample locations.
#[derive(Clone, Debug)]
pub struct SampledCoefficients {
    /// `A` at every active cell center (zero tensor elsewhere).
    cell: Vec<Tensor4>,
    /// Per unordered pair `(p < q)` and edge: the 2×2 block coupling
    /// `D_p u_q` and `D_q u_p`, row-major, indexed like the `(p, q)` samples.
    edge: Vec<Vec<[f64; 4]>>,
}

impl SampledCoefficients {
    pub fn new(grid: &MacGrid, a: &EllipticTensor) -> Result<Self> {
        let d = grid.d;
        if a.dim() != d {
            return Err(invalid("coefficient and grid dimensions differ"));
        }
        let dom = &grid.dom;
        let mut cell = vec![Tensor4::zeros(d); dom.n_cells()];
        let mut layer = vec![0usize; dom.n_cells()];
        for c in dom.active_cells() {
            let x = dom.center(c);
            a.eval_into(&x[..d], &mut cell[c]);
            layer[c] = a.layer_index(x[0]);
        }
        let mut edge = Vec::new();
        for p in 0..d {
            for q in (p + 1)..d {
                let sd = grid.sample_dims[p * d + q];
                let m = grid.sample_at[p * d + q].len();
                let mut blocks = vec![[0.0; 4]; m];
                for (lin, b) in blocks.iter_mut().enumerate() {
                    if grid.sample_at[p * d + q][lin] == NONE {
                        continue;
                    }
                    let e = [
                        (lin % sd[0]) as isize,
                        ((lin / sd[0]) % sd[1]) as isize,
                        (lin / (sd[0] * sd[1])) as isize,
                    ];
                    *b = edge_block(grid, &cell, &layer, p, q, e);
                }
                edge.push(blocks);
            }
        }
        Ok(Self { cell, edge })
    }

    pub fn cell(&self, c: usize) -> &Tensor4 {
        &self.cell[c]
    }

    fn pair_slot(d: usize, p: usize, q: usize) -> usize {
        // index of (p, q), p < q, in row-major upper-triangle order
        (0..p).map(|r| d - 1 - r).sum::<usize>() + (q - p - 1)
    }
}

fn block_of(t: &Tensor4, p: usize, q: usize) -> [f64; 4] {
    [t.get(p, p, q, q), t.get(p, q, q, p), t.get(q, p, p, q), t.get(q, q, p, p)]
}

fn edge_block(grid: &MacGrid, cell: &[Tensor4], layer: &[usize], p: usize, q: usize, e: [isize; 3]) -> [f64; 4] {
    // groups by x₁ side when the edge is shifted along axis 0
    let mut groups: [(usize, [f64; 4], Option<usize>); 2] = [(0, [0.0; 4], None), (0, [0.0; 4], None)];
    for (sp, sq) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        let c = shift(shift(e, p, -sp), q, -sq);
        let Some(cell_idx) = grid.cell_at(c) else { continue };
        if !grid.dom.is_active(cell_idx) {
            continue;
        }
        let side = if p == 0 { 1 - sp } else { 0 };
        let g = &mut groups[side as usize];
        g.0 += 1;
        let blk = block_of(&cell[cell_idx], p, q);
        for k in 0..4 {
            g.1[k] += blk[k];
        }
        g.2 = Some(layer[cell_idx]);
    }
    let mean = |g: &(usize, [f64; 4], Option<usize>)| g.1.map(|v| v / g.0 as f64);
    match (groups[0].0, groups[1].0) {
        (0, 0) => [0.0; 4],
        (_, 0) => mean(&groups[0]),
        (0, _) => mean(&groups[1]),
        _ => {
            let (lo, hi) = (mean(&groups[0]), mean(&groups[1]));
            if groups[0].2 != groups[1].2 {
                let hb = Tensor4::harmonic_block(&lo, &hi, 2);
                [hb[0], hb[1], hb[2], hb[3]]
            } else {
                std::array::from_fn(|k| 0.5 * (lo[k] + hi[k]))
            }
        }
    }
}

/// The assembled saddle-point system `[K Bᵀ Cᵀ; B 0 0; C 0 0]` with gauge
/// constraint rows `C`.
#[derive(Clone, Debug)]
pub struct SaddleSystem {
    grid: Arc<MacGrid>,
    coeffs: SampledCoefficients,
    k: CsrMatrix,
    b: CsrMatrix,
    full: CsrMatrix,
}

impl SaddleSystem {
    pub fn grid(&self) -> &Arc<MacGrid> {
        &self.grid
    }

    pub fn coefficients(&self) -> &SampledCoefficients {
        &self.coeffs
    }

    /// Velocity–velocity block.
    pub fn k(&self) -> &CsrMatrix {
        &self.k
    }

    /// Divergence block (`n_pressure × n_velocity`), scaled by `h^d`.
    pub fn b(&self) -> &CsrMatrix {
        &self.b
    }

    /// The full symmetric block matrix including gauge rows.
    pub fn matrix(&self) -> &CsrMatrix {
        &self.full
    }

    pub fn n_unknowns(&self) -> usize {
        self.full.nrows()
    }

    /// Sample-wise evaluation of `Σ (Gψ)·Â(Gu) h^d`, independent of the
    /// assembled matrix.
    pub fn bilinear_form(&self, psi: &StaggeredField, u: &StaggeredField) -> f64 {
        bilinear_form(&self.grid, &self.coeffs, psi.velocity(), u.velocity())
    }
}

fn bilinear_form(grid: &MacGrid, co: &SampledCoefficients, psi: &[f64], u: &[f64]) -> f64 {
    let d = grid.d;
    let gp = grid.sample_values(psi);
    let gu = grid.sample_values(u);
    let mut total = 0.0;
    for c in grid.dom.active_cells() {
        let a = &co.cell[c];
        let cc = grid.dom.coords(c);
        let cc = [cc[0] as isize, cc[1] as isize, cc[2] as isize];
        let centers: Vec<usize> = (0..d).map(|j| grid.sample_id(j, j, cc).expect("center")).collect();
        for al in 0..d {
            for be in 0..d {
                total += gp[centers[al]] * a.get(al, be, al, be) * gu[centers[be]];
            }
        }
        for_each_cross(grid, c, a, |row, col, coef| {
            let x: f64 = row.iter().map(|&(s, w)| w * gp[s]).sum();
            let y: f64 = col.iter().map(|&(s, w)| w * gu[s]).sum();
            total += x * coef * y;
        });
    }
    for p in 0..d {
        for q in (p + 1)..d {
            let blocks = &co.edge[SampledCoefficients::pair_slot(d, p, q)];
            for (lin, blk) in blocks.iter().enumerate() {
                let s = grid.sample_at[p * d + q][lin];
                if s == NONE {
                    continue;
                }
                let t = grid.sample_id(q, p, edge_coords(grid, p, q, lin)).expect("paired edge sample");
                let (ws, wt) = (grid.samples[s].weight.sqrt(), grid.samples[t].weight.sqrt());
                let (ps, pt) = (ws * gp[s], wt * gp[t]);
                let (us, ut) = (ws * gu[s], wt * gu[t]);
                total += ps * (blk[0] * us + blk[1] * ut) + pt * (blk[2] * us + blk[3] * ut);
            }
        }
    }
    total * grid.dom.cell_volume()
}

fn edge_coords(grid: &MacGrid, p: usize, q: usize, lin: usize) -> [isize; 3] {
    let sd = grid.sample_dims[p * grid.d + q];
    [(lin % sd[0]) as isize, ((lin / sd[0]) % sd[1]) as isize, (lin / (sd[0] * sd[1])) as isize]
}

/// Visit the couplings between samples at different locations of cell `c`:
/// `(row combination, column combination, A^{αβ}_{ij}(c))`.
fn for_each_cross(grid: &MacGrid, c: usize, a: &Tensor4, mut f: impl FnMut(&[(usize, f64)], &[(usize, f64)], f64)) {
    let d = grid.d;
    let loc = |al: usize, i: usize| if al == i { (d, d) } else { (al.min(i), al.max(i)) };
    let mut cache: Vec<Option<Vec<(usize, f64)>>> = vec![None; d * d];
    for al in 0..d {
        for i in 0..d {
            for be in 0..d {
                for j in 0..d {
                    if loc(al, i) == loc(be, j) {
                        continue;
                    }
                    let coef = a.get(al, be, i, j);
                    if coef == 0.0 {
                        continue;
                    }
                    if cache[al * d + i].is_none() {
                        cache[al * d + i] = Some(grid.centered(c, al, i));
                    }
                    if cache[be * d + j].is_none() {
                        cache[be * d + j] = Some(grid.centered(c, be, j));
                    }
                    let row = cache[al * d + i].as_ref().expect("cached");
                    let col = cache[be * d + j].as_ref().expect("cached");
                    f(row, col, coef);
                }
            }
        }
    }
}

/// Assemble the saddle system for `a` on `grid`.
///
/// Refuses tensors that fail the ellipticity check at the active cell centers
/// and tensors without the major symmetry `A^{αβ}_{ij} = A^{βα}_{ji}` (the
/// symmetric indefinite solvers rely on `K = Kᵀ`).
pub fn assemble(a: &EllipticTensor, grid: &Arc<MacGrid>) -> Result<SaddleSystem> {
    let d = grid.d;
    if a.dim() != d {
        return Err(invalid("coefficient and grid dimensions differ"));
    }
    if !a.is_major_symmetric() {
        return Err(invalid("coefficient tensor lacks the symmetry A^{ab}_{ij} = A^{ba}_{ji}"));
    }
    let active = grid.dom.active_cells();
    let stride = active.len().div_ceil(MAX_PROBE_POINTS).max(1);
    let probes: Vec<Vec<f64>> = active.iter().step_by(stride).map(|&c| grid.dom.center(c)[..d].to_vec()).collect();
    let report = check_ellipticity(a, &probes, DEFAULT_PROBE_DIRECTIONS)?;
    if !report.pass {
        return Err(Error::NotElliptic {
            worst_form: report.worst_form,
            bound_violation: report.worst_bound_violation,
        });
    }
    let coeffs = SampledCoefficients::new(grid, a)?;
    let vol = grid.dom.cell_volume();
    let nu = grid.n_velocity();
    let np = grid.n_pressure();

    let mut kt = Triplets::new(nu, nu);
    // Only the upper triangle is accumulated and then mirrored, so that
    // K = Kᵀ holds exactly rather than up to summation order.
    let outer = |kt: &mut Triplets, row: &[(usize, f64)], col: &[(usize, f64)], coef: f64| {
        for &(fr, cr) in row {
            let Some(r) = grid.velocity_dof(fr) else { continue };
            for &(fc, cc) in col {
                match grid.velocity_dof(fc) {
                    Some(cidx) if r <= cidx => kt.push(r, cidx, coef * cr * cc),
                    _ => {}
                }
            }
        }
    };
    let faces_of = |combo: &[(usize, f64)]| -> Vec<(usize, f64)> {
        combo.iter().flat_map(|&(s, w)| grid.samples[s].entries().iter().map(move |&(f, c)| (f, w * c))).collect()
    };
    for &c in &active {
        let at = &coeffs.cell[c];
        let cc = grid.dom.coords(c);
        let cc = [cc[0] as isize, cc[1] as isize, cc[2] as isize];
        for al in 0..d {
            let sa = grid.samples[grid.sample_id(al, al, cc).expect("center")];
            for be in 0..d {
                let coef = at.get(al, be, al, be);
                if coef == 0.0 {
                    continue;
                }
                let sb = grid.samples[grid.sample_id(be, be, cc).expect("center")];
                outer(&mut kt, sa.entries(), sb.entries(), vol * coef);
            }
        }
        for_each_cross(grid, c, at, |row, col, coef| {
            outer(&mut kt, &faces_of(row), &faces_of(col), vol * coef);
        });
    }
    for p in 0..d {
        for q in (p + 1)..d {
            let blocks = &coeffs.edge[SampledCoefficients::pair_slot(d, p, q)];
            for (lin, blk) in blocks.iter().enumerate() {
                let s = grid.sample_at[p * d + q][lin];
                if s == NONE {
                    continue;
                }
                let t = grid.sample_id(q, p, edge_coords(grid, p, q, lin)).expect("paired edge sample");
                let (ss, st) = (grid.samples[s], grid.samples[t]);
                let (ws, wt) = (ss.weight.sqrt(), st.weight.sqrt());
                let pairs = [(&ss, ws, &ss, ws, blk[0]), (&ss, ws, &st, wt, blk[1]), (&st, wt, &ss, ws, blk[2]), (&st, wt, &st, wt, blk[3])];
                for (x, wx, y, wy, coef) in pairs {
                    if coef != 0.0 {
                        outer(&mut kt, x.entries(), y.entries(), vol * wx * wy * coef);
                    }
                }
            }
        }
    }
    let upper = kt.to_csr();
    let mut kt = Triplets::new(nu, nu);
    for (r, c, v) in upper.iter() {
        kt.push(r, c, v);
        if r != c {
            kt.push(c, r, v);
        }
    }
    let k = kt.to_csr();

    let mut bt = Triplets::new(np, nu);
    for &c in &active {
        let row = grid.pressure_dof(c).expect("active cell");
        let cc = grid.dom.coords(c);
        let cc = [cc[0] as isize, cc[1] as isize, cc[2] as isize];
        for j in 0..d {
            let s = grid.samples[grid.sample_id(j, j, cc).expect("center")];
            for &(f, coef) in s.entries() {
                if let Some(col) = grid.velocity_dof(f) {
                    bt.push(row, col, vol * coef);
                }
            }
        }
    }
    let b = bt.to_csr();

    let n = grid.n_unknowns();
    let mut ft = Triplets::new(n, n);
    for (r, c, v) in k.iter() {
        ft.push(r, c, v);
    }
    for (r, c, v) in b.iter() {
        ft.push(nu + r, c, v);
        ft.push(c, nu + r, v);
    }
    let mut row = nu + np;
    if grid.velocity_mean {
        for i in 0..d {
            for kdof in grid.velocity_range(i) {
                ft.push(row, kdof, vol);
                ft.push(kdof, row, vol);
            }
            row += 1;
        }
    }
    for kdof in 0..np {
        ft.push(row, nu + kdof, vol);
        ft.push(nu + kdof, row, vol);
    }
    let full = ft.to_csr();
    Ok(SaddleSystem { grid: grid.clone(), coeffs, k, b, full })
}

/// Right-hand-side data as cell fields; empty vectors mean zero.
#[derive(Clone, Debug, Default)]
pub struct Forcing {
    /// `f_i`, `d` cell fields.
    pub f: Vec<Vec<f64>>,
    /// `f_{α,i}` stored at `α·d + i`, `d²` cell fields.
    pub f_alpha: Vec<Vec<f64>>,
    /// `g`, one cell field.
    pub g: Vec<f64>,
}

/// Assembled right-hand side and the mean removed from `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct Rhs {
    pub values: Vec<f64>,
    pub g_shift: f64,
}

/// Right-hand side of the discrete weak form
/// `Σ(Gψ)·Â(Gu) + Σ p (Bψ) = −Σ f·ψ + Σ f_α·D_α ψ`, `Bu = g − (g)_Ω`.
///
/// `f` is averaged from the adjacent active cells to each face; each `f_{α,i}`
/// is averaged from the active cells around the natural location of the
/// sample `D_α ψ_i`.
pub fn assemble_rhs(grid: &Arc<MacGrid>, forcing: &Forcing) -> Result<Rhs> {
    let d = grid.d;
    let nc = grid.dom.n_cells();
    let check = |fields: &[Vec<f64>], count: usize, name: &str| -> Result<()> {
        if !fields.is_empty() && (fields.len() != count || fields.iter().any(|f| f.len() != nc)) {
            return Err(invalid(format!("{name} needs {count} cell fields of length {nc}")));
        }
        Ok(())
    };
    check(&forcing.f, d, "f")?;
    check(&forcing.f_alpha, d * d, "f_alpha")?;
    if !forcing.g.is_empty() && forcing.g.len() != nc {
        return Err(invalid(format!("g needs length {nc}")));
    }
    let vol = grid.dom.cell_volume();
    let nu = grid.n_velocity();
    let np = grid.n_pressure();
    let mut values = vec![0.0; grid.n_unknowns()];
    if !forcing.f.is_empty() {
        for (k, v) in values.iter_mut().enumerate().take(nu) {
            let f = grid.dof_face(k);
            let (i, fc) = grid.face_component(f);
            let fc = [fc[0] as isize, fc[1] as isize, fc[2] as isize];
            let (lo, hi) = grid.face_cells(i, fc);
            let avg = 0.5 * (forcing.f[i][lo.expect("unknown face")] + forcing.f[i][hi.expect("unknown face")]);
            *v -= vol * avg;
        }
    }
    if !forcing.f_alpha.is_empty() {
        // F̂ at every sample, then Gᵀ W F̂
        for (sid, s) in grid.samples.iter().enumerate() {
            let (al, i) = (s.beta as usize, s.j as usize);
            let field = &forcing.f_alpha[al * d + i];
            let fhat = sample_average(grid, sid, field);
            if fhat == 0.0 {
                continue;
            }
            for &(f, c) in s.entries() {
                if let Some(k) = grid.velocity_dof(f) {
                    values[k] += vol * s.weight * c * fhat;
                }
            }
        }
    }
    let mut g_shift = 0.0;
    if !forcing.g.is_empty() {
        g_shift = (0..np).map(|k| forcing.g[grid.pressure_cell(k)]).sum::<f64>() / np as f64;
        for k in 0..np {
            values[nu + k] = vol * (forcing.g[grid.pressure_cell(k)] - g_shift);
        }
    }
    Ok(Rhs { values, g_shift })
}

/// Average of a cell field over the active cells around sample `sid`.
fn sample_average(grid: &MacGrid, sid: usize, field: &[f64]) -> f64 {
    let s = grid.samples[sid];
    let (beta, j) = (s.beta as usize, s.j as usize);
    let e = edge_coords(grid, beta, j, s.lin);
    if beta == j {
        return field[grid.cell_at(e).expect("center cell")];
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (sb, sj) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
        if let Some(c) = grid.cell_at(shift(shift(e, beta, -sb), j, -sj)) {
            if grid.dom.is_active(c) {
                sum += field[c];
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Cell-centered `Du`: center differences for `D_j u_j`, the average of the
/// four surrounding edge differences for `D_β u_j`, `β ≠ j`.
pub fn gradient(field: &StaggeredField) -> CellGradient {
    let g = &field.grid;
    let d = g.d;
    let values = g.sample_values(field.velocity());
    let mut out = CellGradient::zeros(d, g.dom.n_cells());
    for c in g.dom.active_cells() {
        for j in 0..d {
            for beta in 0..d {
                let v: f64 = g.centered(c, beta, j).iter().map(|&(s, w)| w * values[s]).sum();
                out.set(c, j, beta, v);
            }
        }
    }
    out
}

/// `U`, the flux-consistent gradient and `𝒰` on every active cell.
#[derive(Clone, Debug)]
pub struct FluxFields {
    /// `U_i`, `d` cell fields.
    pub u_flux: Vec<Vec<f64>>,
    /// Gradient whose `D_1` row is recovered from `U` with `A` at the cell
    /// center, so that it resolves jumps across layers within one cell.
    pub flux_gradient: CellGradient,
    /// `𝒰 = (D_{x'}u, div u, U_2, …, U_d)`, `(d-1)d + 1 + (d-1)` cell fields.
    pub extended: Vec<Vec<f64>>,
}

/// `U_i = Σ_{β,j} A^{1β}_{ij} D_β u_j + p δ_{i1}` per active cell.
///
/// The co-located part of `U_i` is the discrete flux at the natural location
/// of `D_1 u_i` (with the interface-aware edge coefficients), averaged to the
/// cell center; the remaining couplings use `A` at the center and the
/// cell-centered gradient.
pub fn compute_u(field: &StaggeredField, a: &EllipticTensor) -> Result<FluxFields> {
    let g = &field.grid;
    let d = g.d;
    let co = SampledCoefficients::new(g, a)?;
    let values = g.sample_values(field.velocity());
    let du = gradient(field);
    let nc = g.dom.n_cells();
    let mut u_flux = vec![vec![0.0; nc]; d];
    let mut fg = du.clone();
    for c in g.dom.active_cells() {
        let at = &co.cell[c];
        let cc = g.dom.coords(c);
        let cc = [cc[0] as isize, cc[1] as isize, cc[2] as isize];
        for i in 0..d {
            let mut v = if i == 0 {
                (0..d).map(|be| at.get(0, be, 0, be) * values[g.sample_id(be, be, cc).expect("center")]).sum::<f64>()
            } else {
                let blocks = &co.edge[SampledCoefficients::pair_slot(d, 0, i)];
                let around = g.edges_around(c, 0, i);
                around
                    .iter()
                    .map(|&s| {
                        let lin = g.samples[s].lin;
                        let t = g.sample_id(i, 0, edge_coords(g, 0, i, lin)).expect("paired");
                        let blk = blocks[lin];
                        0.25 * (blk[0] * values[s] + blk[1] * values[t])
                    })
                    .sum::<f64>()
            };
            let co_located = |be: usize, j: usize| if i == 0 { be == j } else { (be, j) == (0, i) || (be, j) == (i, 0) };
            for be in 0..d {
                for j in 0..d {
                    if !co_located(be, j) {
                        v += at.get(0, be, i, j) * du.get(c, j, be);
                    }
                }
            }
            if i == 0 {
                v += field.p[c];
            }
            u_flux[i][c] = v;
        }
        // D_1 u = (A^{11})⁻¹ (U − p e_1 − Σ_{β≥2} A^{1β} D_β u)
        let mut m = vec![0.0; d * d];
        let mut rhs = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] = at.get(0, 0, i, j);
            }
            let mut r = u_flux[i][c] - if i == 0 { field.p[c] } else { 0.0 };
            for be in 1..d {
                for j in 0..d {
                    r -= at.get(0, be, i, j) * du.get(c, j, be);
                }
            }
            rhs[i] = r;
        }
        if crate::dense::solve_small(&mut m, &mut rhs, d).is_some() {
            for j in 0..d {
                fg.set(c, j, 0, rhs[j]);
            }
        }
    }
    let mut extended = fg.tangential();
    extended.push(fg.trace());
    extended.extend(u_flux.iter().skip(1).cloned());
    Ok(FluxFields { u_flux, flux_gradient: fg, extended })
}

/// Constants `(N_lo, N_up)` with `|Du| ≤ N_lo |𝒰|` and `|𝒰| ≤ N_up |Du|`
/// for homogeneous-problem gradients and any `δ`-elliptic tensor.
pub fn comparability_constants(d: usize, delta: f64) -> (f64, f64) {
    let df = d as f64;
    let up = (1.0 + df + (df - 1.0) * df * df / (delta * delta)).sqrt();
    let s = (df - 1.0).sqrt();
    let x = (1.0 / delta) * (1.0 + (s * (1.0 + s) + (df - 1.0) * df.sqrt()) / delta);
    let lo = ((1.0 + s).powi(2) + x * x + 1.0).sqrt();
    (lo, up)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeffs::{layered_scalar, make_layered};

    fn periodic(n: usize) -> Arc<MacGrid> {
        MacGrid::new(DomainSpec::periodic_box(2, 1.0, n).unwrap())
    }

    fn identity() -> EllipticTensor {
        EllipticTensor::identity(2, 0.5).unwrap()
    }

    #[test]
    fn dof_counts() {
        let g = periodic(8);
        assert_eq!(g.n_velocity(), 2 * 64);
        assert_eq!(g.n_pressure(), 64);
        assert_eq!(g.n_constraints(), 3);
        let db = MacGrid::new(DomainSpec::dirichlet_box(2, 1.0, 8).unwrap());
        assert_eq!(db.n_velocity(), 2 * 7 * 8);
        assert_eq!(db.n_constraints(), 1);
        let hs = MacGrid::new(DomainSpec::half_strip(2, 1.0, 1.0, 8).unwrap());
        assert_eq!(hs.velocity_range(0).len(), 7 * 8);
        assert_eq!(hs.velocity_range(1).len(), 8 * 8);
    }

    #[test]
    fn identity_stencil_is_vector_laplacian() {
        // dense hand assembly of the 5-point Laplacian on the periodic torus
        let n = 8;
        let g = periodic(n);
        let sys = assemble(&identity(), &g).unwrap();
        let k = sys.k();
        assert_eq!(k.max_asymmetry(), 0.0);
        for comp in 0..2 {
            for r in g.velocity_range(comp) {
                let (_, fc) = g.face_component(g.dof_face(r));
                for cidx in g.velocity_range(comp) {
                    let (_, gc) = g.face_component(g.dof_face(cidx));
                    let dx = (fc[0] as isize - gc[0] as isize).rem_euclid(n as isize);
                    let dy = (fc[1] as isize - gc[1] as isize).rem_euclid(n as isize);
                    let expect = match (dx, dy) {
                        (0, 0) => 4.0,
                        (1, 0) | (7, 0) | (0, 1) | (0, 7) => -1.0,
                        _ => 0.0,
                    };
                    assert!((k.get(r, cidx) - expect).abs() < 1e-12, "entry {r},{cidx}");
                }
                for cidx in g.velocity_range(1 - comp) {
                    assert_eq!(k.get(r, cidx), 0.0);
                }
            }
        }
    }

    #[test]
    fn constants_in_kernel() {
        let g = periodic(8);
        let sys = assemble(&identity(), &g).unwrap();
        let u = StaggeredField::from_fn(&g, |i, _| [0.7, -1.3][i], |_| 0.0);
        let x = u.to_unknowns();
        let nu = g.n_velocity();
        assert!(sys.k().matvec(&x[..nu]).iter().all(|v| v.abs() < 1e-12));
        assert!(sys.b().matvec(&x[..nu]).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn refuses_non_elliptic() {
        let g = periodic(8);
        let mut t = Tensor4::identity(2);
        t.set(0, 0, 0, 0, -1.0);
        let a = EllipticTensor::constant(t, 0.5).unwrap();
        assert!(matches!(assemble(&a, &g), Err(Error::NotElliptic { .. })));
    }

    #[test]
    fn linear_field_gradient_exact() {
        let g = MacGrid::new(DomainSpec::dirichlet_box(2, 1.0, 8).unwrap());
        let u = StaggeredField::from_fn(&g, |i, x| if i == 0 { x[1] } else { 0.0 }, |_| 0.0);
        let du = gradient(&u);
        // interior cells away from the pinned walls
        for c in g.domain().active_cells() {
            let cc = g.domain().coords(c);
            if cc[0] < 2 || cc[0] > 5 || cc[1] < 2 || cc[1] > 5 {
                continue;
            }
            assert!((du.get(c, 0, 1) - 1.0).abs() < 1e-12);
            assert!(du.get(c, 0, 0).abs() < 1e-12);
            assert!(du.get(c, 1, 0).abs() < 1e-12 && du.get(c, 1, 1).abs() < 1e-12);
        }
    }

    #[test]
    fn trace_equals_divergence() {
        let g = MacGrid::new(DomainSpec::lipschitz_graph_fn(2, 1.0, 16, |x| 0.03 * x[0], 0.05).unwrap());
        let u = StaggeredField::from_fn(&g, |i, x| (3.0 * x[0] + i as f64).sin() * (5.0 * x[1]).cos(), |_| 0.0);
        let tr = gradient(&u).trace();
        let div = u.divergence();
        for c in 0..tr.len() {
            assert!((tr[c] - div[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn weak_identity_matches_assembly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for dom in [
            DomainSpec::periodic_box(2, 1.0, 8).unwrap(),
            DomainSpec::half_strip(2, 1.0, 1.0, 8).unwrap(),
            DomainSpec::lipschitz_graph_fn(2, 1.0, 8, |x| 0.05 * x[0], 0.05).unwrap(),
        ] {
            let g = MacGrid::new(dom);
            let mut t = Tensor4::identity(2);
            t.set(0, 0, 0, 1, 0.2);
            t.set(0, 0, 1, 0, 0.2);
            t.set(0, 1, 0, 1, 0.3);
            t.set(1, 0, 1, 0, 0.3);
            t.set(0, 1, 1, 0, 0.1);
            t.set(1, 0, 0, 1, 0.1);
            let a = make_layered(2, vec![0.5], vec![t.clone(), t.scaled(2.0)], 0.2).unwrap();
            let sys = assemble(&a, &g).unwrap();
            assert_eq!(sys.k().max_asymmetry(), 0.0);
            let rand_field = |rng: &mut rand_chacha::ChaCha8Rng| {
                let x: Vec<f64> = (0..g.n_velocity() + g.n_pressure()).map(|_| rng.random_range(-1.0..1.0)).collect();
                StaggeredField::from_unknowns(&g, &x).unwrap()
            };
            let (u, psi) = (rand_field(&mut rng), rand_field(&mut rng));
            let nu = g.n_velocity();
            let (xu, xp) = (u.to_unknowns(), psi.to_unknowns());
            let ku = sys.k().matvec(&xu[..nu]);
            let lhs: f64 = xp[..nu].iter().zip(&ku).map(|(a, b)| a * b).sum();
            let rhs = sys.bilinear_form(&psi, &u);
            assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
            let bp = sys.b().matvec_transpose(&xu[nu..]);
            let pairing: f64 = xp[..nu].iter().zip(&bp).map(|(a, b)| a * b).sum();
            let div = psi.divergence();
            let direct: f64 = g.domain().active_cells().iter().map(|&c| u.pressure()[c] * div[c]).sum::<f64>()
                * g.domain().cell_volume();
            assert!((pairing - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_forcing_gives_zero_rhs() {
        let g = periodic(8);
        let rhs = assemble_rhs(&g, &Forcing::default()).unwrap();
        assert!(rhs.values.iter().all(|v| *v == 0.0));
        assert_eq!(rhs.g_shift, 0.0);
    }

    #[test]
    fn constant_g_is_shifted_away() {
        let g = MacGrid::new(DomainSpec::dirichlet_box(2, 1.0, 8).unwrap());
        let forcing = Forcing { g: vec![1.0; 64], ..Default::default() };
        let rhs = assemble_rhs(&g, &forcing).unwrap();
        assert!((rhs.g_shift - 1.0).abs() < 1e-15);
        assert!(rhs.values.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn u_reduces_to_gradient_plus_pressure_for_identity() {
        let g = periodic(16);
        let u = StaggeredField::from_fn(
            &g,
            |i, x| (2.0 * std::f64::consts::PI * (x[0] + 2.0 * x[1] + i as f64)).sin(),
            |x| x[0].cos(),
        );
        let flux = compute_u(&u, &identity()).unwrap();
        let du = gradient(&u);
        for c in 0..g.domain().n_cells() {
            assert!((flux.u_flux[0][c] - du.get(c, 0, 0) - u.pressure()[c]).abs() < 1e-12);
            assert!((flux.u_flux[1][c] - du.get(c, 1, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn u_examples() {
        let g = MacGrid::new(DomainSpec::half_strip(2, 1.0, 1.0, 8).unwrap());
        // u = (0, x₁) (nonzero wall slip aside, interior cells are exact)
        let u = StaggeredField::from_fn(&g, |i, x| if i == 1 { x[0] } else { 0.0 }, |_| 0.0);
        let flux = compute_u(&u, &identity()).unwrap();
        // the top wall pins u₂ = 0, so its row is excluded
        for c in g.domain().active_cells().into_iter().filter(|&c| g.domain().coords(c)[0] < 7) {
            assert!(flux.u_flux[0][c].abs() < 1e-12);
            assert!((flux.u_flux[1][c] - 1.0).abs() < 1e-12);
        }
        let p = StaggeredField::from_fn(&g, |_, _| 0.0, |_| 3.0);
        let flux = compute_u(&p, &identity()).unwrap();
        for c in g.domain().active_cells() {
            assert!((flux.u_flux[0][c] - 3.0).abs() < 1e-12 && flux.u_flux[1][c].abs() < 1e-12);
        }
    }

    #[test]
    fn layered_shear_flux_is_constant() {
        // piecewise-linear u₂ with ν u₂' = 1 on the strip, interface on a face
        let g = MacGrid::new(DomainSpec::half_strip(2, 1.0, 1.0, 16).unwrap());
        let a = layered_scalar(2, vec![0.5], &[1.0, 10.0], 0.05).unwrap();
        let exact = |x1: f64| if x1 <= 0.5 { x1 } else { 0.5 + (x1 - 0.5) / 10.0 };
        let u = StaggeredField::from_fn(&g, |i, x| if i == 1 { exact(x[0]) } else { 0.0 }, |_| 0.0);
        let flux = compute_u(&u, &a).unwrap();
        for c in g.domain().active_cells().into_iter().filter(|&c| g.domain().coords(c)[0] < 15) {
            assert!((flux.u_flux[1][c] - 1.0).abs() < 1e-12, "cell {c}: {}", flux.u_flux[1][c]);
            let x1 = g.domain().center(c)[0];
            let slope = if x1 < 0.5 { 1.0 } else { 0.1 };
            assert!((flux.flux_gradient.get(c, 1, 0) - slope).abs() < 1e-12);
        }
    }

    #[test]
    fn field_roundtrip() {
        let g = MacGrid::new(DomainSpec::half_strip(2, 0.5, 1.0, 16).unwrap());
        let u = StaggeredField::from_fn(&g, |i, x| x[0] * (i + 1) as f64, |x| x[1]);
        let mut buf = Vec::new();
        u.write_to(&mut buf).unwrap();
        let back = StaggeredField::read_from(&g, buf.as_slice()).unwrap();
        assert_eq!(back.velocity(), u.velocity());
        assert_eq!(back.pressure(), u.pressure());
        let other = MacGrid::new(DomainSpec::half_strip(2, 1.0, 1.0, 16).unwrap());
        assert!(StaggeredField::read_from(&other, buf.as_slice()).is_err());
        assert!(StaggeredField::read_from(&g, &buf[..10]).is_err());
    }

    #[test]
    fn comparability_constants_grow_as_delta_shrinks() {
        let (lo1, up1) = comparability_constants(2, 0.5);
        let (lo2, up2) = comparability_constants(2, 0.25);
        assert!(lo2 > lo1 && up2 > up1 && lo1 > 1.0 && up1 > 1.0);
    }
}
