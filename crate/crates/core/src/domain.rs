//! Computational geometries on a uniform cell lattice, Lipschitz flatness,
//! discrete balls, and the dyadic filtration used by the sharp function.
//!
//! Every domain lives on a lattice of `dims[0] × dims[1] (× dims[2])` square
//! cells of width `h`, with axis 0 the layered direction `x₁` varying fastest
//! in flat cell indices. A cell belongs to `Ω` iff its center does.

use std::collections::VecDeque;
use std::path::Path;

use crate::error::{invalid, Error, Result};

/// Geometry variant.
#[derive(Clone, Debug, PartialEq)]
pub enum Variant {
    /// `[0, L)^d` with periodic identification in every axis.
    PeriodicBox { side: f64, n: usize },
    /// `[0, L]^d` with no-slip walls.
    DirichletBox { side: f64, n: usize },
    /// `[0, H] × [0, L)^{d-1}`: no-slip at `x₁ = 0` and `x₁ = H`, periodic in `x'`.
    HalfStrip { height: f64, width: f64, n: usize },
    /// `{x₁ > φ(x')} ∩ [0, L]^d` with no-slip walls. `phi` holds one sample per
    /// transverse cell center (`x'` lattice, axis 1 fastest).
    LipschitzGraph { side: f64, n: usize, phi: Vec<f64>, rho: f64 },
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::PeriodicBox { .. } => "periodic-box",
            Variant::DirichletBox { .. } => "dirichlet-box",
            Variant::HalfStrip { .. } => "half-strip",
            Variant::LipschitzGraph { .. } => "lipschitz-graph",
        }
    }

    pub(crate) fn tag(&self) -> u8 {
        match self {
            Variant::PeriodicBox { .. } => 0,
            Variant::DirichletBox { .. } => 1,
            Variant::HalfStrip { .. } => 2,
            Variant::LipschitzGraph { .. } => 3,
        }
    }
}

/// A geometry together with its cell lattice and `Ω` mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainSpec {
    d: usize,
    variant: Variant,
    dims: [usize; 3],
    h: f64,
    periodic: [bool; 3],
    active: Vec<bool>,
    n_active: usize,
}

fn check_common(d: usize, n: usize, lengths: &[f64]) -> Result<()> {
    if !(2..=3).contains(&d) {
        return Err(invalid(format!("dimension {d} not in {{2, 3}}")));
    }
    if n < 8 {
        return Err(invalid(format!("need at least 8 cells per axis, got {n}")));
    }
    if lengths.iter().any(|l| !(*l > 0.0) || !l.is_finite()) {
        return Err(invalid("domain lengths must be positive and finite"));
    }
    Ok(())
}

impl DomainSpec {
    fn build(d: usize, variant: Variant, dims: [usize; 3], h: f64, periodic: [bool; 3]) -> Self {
        let mut dom = Self { d, variant, dims, h, periodic, active: vec![], n_active: 0 };
        let total = dims.iter().product();
        let mut active = vec![true; total];
        if let Variant::LipschitzGraph { phi, .. } = &dom.variant {
            for (idx, a) in active.iter_mut().enumerate() {
                let c = dom.coords(idx);
                let x1 = (c[0] as f64 + 0.5) * h;
                *a = x1 > phi[c[1] + dims[1] * c[2]];
            }
        }
        dom.n_active = active.iter().filter(|a| **a).count();
        dom.active = active;
        dom
    }

    pub fn periodic_box(d: usize, side: f64, n: usize) -> Result<Self> {
        check_common(d, n, &[side])?;
        let dims = lattice_dims(d, [n, n, n]);
        Ok(Self::build(d, Variant::PeriodicBox { side, n }, dims, side / n as f64, [true, true, d == 3]))
    }

    pub fn dirichlet_box(d: usize, side: f64, n: usize) -> Result<Self> {
        check_common(d, n, &[side])?;
        let dims = lattice_dims(d, [n, n, n]);
        Ok(Self::build(d, Variant::DirichletBox { side, n }, dims, side / n as f64, [false; 3]))
    }

    /// `h = width / n`; the height must be a whole number of cells.
    pub fn half_strip(d: usize, height: f64, width: f64, n: usize) -> Result<Self> {
        check_common(d, n, &[height, width])?;
        let h = width / n as f64;
        let n1f = height / h;
        let n1 = n1f.round() as usize;
        if (n1f - n1 as f64).abs() > 1e-9 * n1f.max(1.0) || n1 < 8 {
            return Err(invalid(format!(
                "strip height {height} is not a whole number (≥ 8) of cells of width {h}"
            )));
        }
        let dims = lattice_dims(d, [n1, n, n]);
        Ok(Self::build(
            d,
            Variant::HalfStrip { height, width, n },
            dims,
            h,
            [false, true, d == 3],
        ))
    }

    /// Graph domain from samples of `φ` at the transverse cell centers.
    ///
    /// Fails if the measured Lipschitz constant exceeds `rho`, if
    /// `rho ≥ 1/16`, or if the graph leaves no cell in `Ω`.
    pub fn lipschitz_graph(d: usize, side: f64, n: usize, phi: Vec<f64>, rho: f64) -> Result<Self> {
        check_common(d, n, &[side])?;
        let expected = n.pow(d as u32 - 1);
        if phi.len() != expected {
            return Err(invalid(format!("expected {expected} boundary samples, got {}", phi.len())));
        }
        if phi.iter().any(|v| !v.is_finite() || *v < 0.0 || *v >= side) {
            return Err(invalid("boundary samples must lie in [0, side)"));
        }
        if !(0.0..1.0 / 16.0).contains(&rho) {
            return Err(invalid(format!("flatness bound {rho} not in [0, 1/16)")));
        }
        let h = side / n as f64;
        let shape = vec![n; d - 1];
        let measured = lipschitz_constant(&phi, &shape, h)?;
        if measured > rho * (1.0 + 1e-12) + 1e-15 {
            return Err(invalid(format!("boundary Lipschitz constant {measured} exceeds declared {rho}")));
        }
        let dims = lattice_dims(d, [n, n, n]);
        let dom = Self::build(d, Variant::LipschitzGraph { side, n, phi, rho }, dims, h, [false; 3]);
        if dom.n_active == 0 {
            return Err(invalid("graph domain has no interior cells"));
        }
        Ok(dom)
    }

    /// Graph domain with `φ` evaluated at the transverse cell centers.
    pub fn lipschitz_graph_fn(
        d: usize,
        side: f64,
        n: usize,
        phi: impl Fn(&[f64]) -> f64,
        rho: f64,
    ) -> Result<Self> {
        let h = side / n as f64;
        let m = n.pow(d as u32 - 1);
        let samples = (0..m)
            .map(|k| {
                let xp: Vec<f64> = (0..d - 1).map(|a| ((k / n.pow(a as u32)) % n) as f64 * h + 0.5 * h).collect();
                phi(&xp)
            })
            .collect();
        Self::lipschitz_graph(d, side, n, samples, rho)
    }

    /// Two-dimensional graph domain from a two-column text file
    /// (`x'` coordinate, `φ` value per line; `#` starts a comment, commas or
    /// whitespace separate columns). Samples are linearly interpolated to the
    /// cell centers and held constant beyond the first and last abscissa.
    pub fn lipschitz_graph_from_file(path: &Path, side: f64, n: usize, rho: f64) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let table = parse_two_columns(&text)?;
        Self::lipschitz_graph_fn(2, side, n, |xp| interpolate(&table, xp[0]), rho)
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn variant(&self) -> &Variant {
        &self.variant
    }

    /// Cells per axis; unused axes have extent 1.
    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn h(&self) -> f64 {
        self.h
    }

    #[inline]
    pub fn is_periodic(&self, axis: usize) -> bool {
        self.periodic[axis]
    }

    /// Nominal cells per transverse axis (the `n` of the variant).
    pub fn cells_per_axis(&self) -> usize {
        self.dims[1]
    }

    /// Physical extent along `axis`.
    pub fn extent(&self, axis: usize) -> f64 {
        self.dims[axis] as f64 * self.h
    }

    /// Box diagonal of the lattice.
    pub fn diameter(&self) -> f64 {
        (0..self.d).map(|a| self.extent(a).powi(2)).sum::<f64>().sqrt()
    }

    pub fn n_cells(&self) -> usize {
        self.active.len()
    }

    pub fn n_active(&self) -> usize {
        self.n_active
    }

    /// `|Ω_h|`: number of active cells times `h^d`.
    pub fn measure(&self) -> f64 {
        self.n_active as f64 * self.cell_volume()
    }

    #[inline]
    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.d as i32)
    }

    #[inline]
    pub fn is_active(&self, cell: usize) -> bool {
        self.active[cell]
    }

    pub fn active_mask(&self) -> &[bool] {
        &self.active
    }

    pub fn active_cells(&self) -> Vec<usize> {
        (0..self.active.len()).filter(|&c| self.active[c]).collect()
    }

    #[inline]
    pub fn coords(&self, cell: usize) -> [usize; 3] {
        let [n0, n1, _] = self.dims;
        [cell % n0, (cell / n0) % n1, cell / (n0 * n1)]
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.dims[0] * (c[1] + self.dims[1] * c[2])
    }

    /// Cell center; unused coordinates are 0.
    #[inline]
    pub fn center(&self, cell: usize) -> [f64; 3] {
        let c = self.coords(cell);
        let mut x = [0.0; 3];
        for a in 0..self.d {
            x[a] = (c[a] as f64 + 0.5) * self.h;
        }
        x
    }

    /// Face neighbor across `axis` in direction `dir` (±1), wrapping in
    /// periodic axes; `None` off the lattice.
    #[inline]
    pub fn neighbor(&self, cell: usize, axis: usize, dir: isize) -> Option<usize> {
        let mut c = self.coords(cell);
        let n = self.dims[axis];
        let v = c[axis] as isize + dir;
        if v < 0 || v >= n as isize {
            if !self.periodic[axis] {
                return None;
            }
            c[axis] = v.rem_euclid(n as isize) as usize;
        } else {
            c[axis] = v as usize;
        }
        Some(self.index(c))
    }

    /// Signed coordinate difference `x - y` along `axis`, using the nearest
    /// periodic image in periodic axes.
    #[inline]
    pub fn axis_delta(&self, axis: usize, x: f64, y: f64) -> f64 {
        let mut t = x - y;
        if self.periodic[axis] {
            let len = self.extent(axis);
            t -= len * (t / len).round();
        }
        t
    }

    /// Squared (torus) distance between two points.
    pub fn distance2(&self, x: &[f64], y: &[f64]) -> f64 {
        (0..self.d).map(|a| self.axis_delta(a, x[a], y[a]).powi(2)).sum()
    }

    /// `Ω_r(x₀)`: active cells whose centers lie strictly within distance `r`
    /// of `x₀` (torus metric in periodic axes), in increasing index order.
    pub fn ball_cells(&self, x0: &[f64], r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_ball_cell(x0, r, |c| out.push(c));
        out.sort_unstable();
        out
    }

    pub(crate) fn for_each_ball_cell(&self, x0: &[f64], r: f64, mut f: impl FnMut(usize)) {
        if !(r > 0.0) {
            return;
        }
        let ranges: Vec<Vec<usize>> = (0..3)
            .map(|a| {
                if a >= self.d {
                    return vec![0];
                }
                let n = self.dims[a] as isize;
                let lo = ((x0[a] - r) / self.h - 0.5).floor() as isize;
                let hi = ((x0[a] + r) / self.h - 0.5).ceil() as isize;
                if self.periodic[a] {
                    if hi - lo + 1 >= n {
                        (0..n as usize).collect()
                    } else {
                        (lo..=hi).map(|v| v.rem_euclid(n) as usize).collect()
                    }
                } else {
                    (lo.max(0)..=hi.min(n - 1)).map(|v| v as usize).collect()
                }
            })
            .collect();
        let r2 = r * r;
        for &k2 in &ranges[2] {
            for &k1 in &ranges[1] {
                for &k0 in &ranges[0] {
                    let cell = self.index([k0, k1, k2]);
                    if !self.active[cell] {
                        continue;
                    }
                    let x = self.center(cell);
                    if self.distance2(&x[..self.d], x0) < r2 {
                        f(cell);
                    }
                }
            }
        }
    }
}

fn lattice_dims(d: usize, dims: [usize; 3]) -> [usize; 3] {
    if d == 2 {
        [dims[0], dims[1], 1]
    } else {
        dims
    }
}

fn parse_two_columns(text: &str) -> Result<Vec<(f64, f64)>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(|c: char| c == ',' || c.is_whitespace()).filter(|s| !s.is_empty()).collect();
        if cols.len() != 2 {
            return Err(Error::Parse(format!("line {}: expected 2 columns, got {}", lineno + 1, cols.len())));
        }
        let parse = |s: &str| {
            s.parse::<f64>().map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 1)))
        };
        rows.push((parse(cols[0])?, parse(cols[1])?));
    }
    if rows.len() < 2 {
        return Err(Error::Parse("boundary file needs at least 2 samples".into()));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    if rows.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Parse("duplicate abscissa in boundary file".into()));
    }
    Ok(rows)
}

fn interpolate(table: &[(f64, f64)], x: f64) -> f64 {
    let k = table.partition_point(|p| p.0 < x);
    if k == 0 {
        return table[0].1;
    }
    if k == table.len() {
        return table[k - 1].1;
    }
    let (x0, y0) = table[k - 1];
    let (x1, y1) = table[k];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Maximal difference quotient of `φ` over all distinct lattice pairs.
///
/// `shape` gives the lattice extent per transverse axis (first axis fastest),
/// `h` its spacing. One-dimensional lattices reduce exactly to neighbor pairs
/// (a chord slope is an average of the neighbor slopes it spans).
pub fn lipschitz_constant(phi: &[f64], shape: &[usize], h: f64) -> Result<f64> {
    let total: usize = shape.iter().product();
    if shape.is_empty() || total != phi.len() {
        return Err(invalid("lattice shape does not match sample count"));
    }
    if total < 2 {
        return Err(invalid("need at least 2 boundary samples"));
    }
    if !(h > 0.0) {
        return Err(invalid("lattice spacing must be positive"));
    }
    if shape.len() == 1 {
        return Ok(phi.windows(2).map(|w| (w[1] - w[0]).abs() / h).fold(0.0, f64::max));
    }
    let pos = |k: usize| -> Vec<f64> {
        let mut rem = k;
        shape
            .iter()
            .map(|&s| {
                let v = rem % s;
                rem /= s;
                v as f64 * h
            })
            .collect()
    };
    let pts: Vec<Vec<f64>> = (0..total).map(pos).collect();
    let mut best = 0.0f64;
    for a in 0..total {
        for b in (a + 1)..total {
            let dist = pts[a].iter().zip(&pts[b]).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            best = best.max((phi[a] - phi[b]).abs() / dist);
        }
    }
    Ok(best)
}

/// One member of a filtration level: a dyadic cube intersected with `Ω`,
/// possibly enlarged by merged siblings.
#[derive(Clone, Debug, PartialEq)]
pub struct Cube {
    pub level: u32,
    /// Lower-corner cell coordinates of the dyadic cube.
    pub anchor: [usize; 3],
    /// Side of the dyadic cube in cells.
    pub side: usize,
    /// Active cells of the member, sorted.
    pub cells: Vec<usize>,
    /// Index of the containing member one level coarser.
    pub parent: Option<usize>,
    /// `|Q ∩ Ω|`.
    pub measure: f64,
}

/// Nested partitions of `Ω_h` by dyadic cubes, levels `n_min..=n_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct DyadicFiltration {
    n_min: u32,
    n_max: u32,
    levels: Vec<Vec<Cube>>,
    /// Per level: cell → member index (`usize::MAX` outside `Ω`).
    owner: Vec<Vec<usize>>,
    retention: f64,
    side_length: f64,
    d: usize,
}

impl DyadicFiltration {
    pub fn n_min(&self) -> u32 {
        self.n_min
    }

    pub fn n_max(&self) -> u32 {
        self.n_max
    }

    /// Members of level `k`.
    pub fn level(&self, k: u32) -> &[Cube] {
        &self.levels[(k - self.n_min) as usize]
    }

    pub fn levels(&self) -> impl Iterator<Item = (u32, &[Cube])> {
        self.levels.iter().enumerate().map(move |(i, l)| (self.n_min + i as u32, l.as_slice()))
    }

    /// Member of level `k` containing `cell`, if the cell is in `Ω`.
    pub fn member_of(&self, k: u32, cell: usize) -> Option<usize> {
        let m = self.owner[(k - self.n_min) as usize][cell];
        (m != usize::MAX).then_some(m)
    }

    pub fn retention_fraction(&self) -> f64 {
        self.retention
    }

    /// Ratio `δ₀` between consecutive scales.
    pub fn delta0(&self) -> f64 {
        0.5
    }

    /// Inner-ball constant `ε₀ = c/2`.
    pub fn epsilon0(&self) -> f64 {
        self.retention / 2.0
    }

    /// Diameter constant `N₀ = 2√d·L`; a merged member spans at most two
    /// sibling cubes, hence the factor 2.
    pub fn n0(&self) -> f64 {
        2.0 * (self.d as f64).sqrt() * self.side_length
    }

    /// Exhaustively check the four partition properties.
    pub fn verify(&self, dom: &DomainSpec) -> FiltrationCheck {
        let mut check = FiltrationCheck {
            partition: true,
            nesting: true,
            diameter: true,
            inner_ball: true,
            worst_diameter_ratio: 0.0,
            failures: Vec::new(),
        };
        let h = dom.h();
        for (k, cubes) in self.levels() {
            // (1) disjoint cover of Ω_h
            let mut count = vec![0u32; dom.n_cells()];
            for q in cubes {
                for &c in &q.cells {
                    count[c] += 1;
                }
            }
            for (c, &m) in count.iter().enumerate() {
                let want = u32::from(dom.is_active(c));
                if m != want {
                    check.partition = false;
                    check.failures.push(format!("level {k}: cell {c} covered {m} times"));
                    break;
                }
            }
            let scale = self.delta0().powi(k as i32);
            let radius = self.epsilon0() * self.side_length * scale;
            for (qi, q) in cubes.iter().enumerate() {
                // (2) nesting
                if k > self.n_min {
                    let parent_level = &self.owner[(k - 1 - self.n_min) as usize];
                    let ok = match q.parent {
                        Some(p) => q.cells.iter().all(|&c| parent_level[c] == p),
                        None => false,
                    };
                    if !ok {
                        check.nesting = false;
                        check.failures.push(format!("level {k}: member {qi} not inside its parent"));
                    }
                }
                // (3) diameter of the union of cells
                let mut lo = [usize::MAX; 3];
                let mut hi = [0usize; 3];
                for &c in &q.cells {
                    let x = dom.coords(c);
                    for a in 0..dom.dim() {
                        lo[a] = lo[a].min(x[a]);
                        hi[a] = hi[a].max(x[a]);
                    }
                }
                let diam = (0..dom.dim()).map(|a| ((hi[a] - lo[a] + 1) as f64 * h).powi(2)).sum::<f64>().sqrt();
                let ratio = diam / (self.n0() * scale);
                check.worst_diameter_ratio = check.worst_diameter_ratio.max(ratio);
                if ratio > 1.0 + 1e-12 {
                    check.diameter = false;
                    check.failures.push(format!("level {k}: member {qi} diameter {diam} too large"));
                }
                // (4) inner ball around the deepest cell
                let z = deepest_cell(dom, &q.cells, &self.owner[(k - self.n_min) as usize], qi);
                let zc = dom.center(z);
                let ball = dom.ball_cells(&zc[..dom.dim()], radius);
                let inside = ball.iter().all(|c| q.cells.binary_search(c).is_ok());
                if ball.is_empty() || !inside {
                    check.inner_ball = false;
                    check.failures.push(format!("level {k}: member {qi} contains no ball of radius {radius}"));
                }
            }
        }
        check
    }
}

/// Outcome of [`DyadicFiltration::verify`].
#[derive(Clone, Debug, PartialEq)]
pub struct FiltrationCheck {
    pub partition: bool,
    pub nesting: bool,
    pub diameter: bool,
    pub inner_ball: bool,
    /// Largest `diam(Q) / (N₀ δ₀ⁿ)` seen.
    pub worst_diameter_ratio: f64,
    pub failures: Vec<String>,
}

impl FiltrationCheck {
    pub fn all(&self) -> bool {
        self.partition && self.nesting && self.diameter && self.inner_ball
    }
}

/// Cell of `cells` farthest (in face-neighbor steps) from any active cell
/// owned by another member; ties go to the smallest index.
fn deepest_cell(dom: &DomainSpec, cells: &[usize], owner: &[usize], me: usize) -> usize {
    let mut dist = std::collections::HashMap::with_capacity(cells.len());
    let mut queue = VecDeque::new();
    for &c in cells {
        let on_edge = (0..dom.dim()).any(|a| {
            [-1isize, 1].iter().any(|&s| {
                dom.neighbor(c, a, s).is_some_and(|nb| dom.is_active(nb) && owner[nb] != me)
            })
        });
        if on_edge {
            dist.insert(c, 0usize);
            queue.push_back(c);
        }
    }
    if queue.is_empty() {
        return cells[cells.len() / 2];
    }
    while let Some(c) = queue.pop_front() {
        let dc = dist[&c];
        for a in 0..dom.dim() {
            for s in [-1isize, 1] {
                if let Some(nb) = dom.neighbor(c, a, s) {
                    if owner[nb] == me && !dist.contains_key(&nb) {
                        dist.insert(nb, dc + 1);
                        queue.push_back(nb);
                    }
                }
            }
        }
    }
    let mut best = cells[0];
    let mut best_d = 0;
    for &c in cells {
        let dc = dist.get(&c).copied().unwrap_or(0);
        if dc > best_d {
            best = c;
            best_d = dc;
        }
    }
    best
}

/// Dyadic cubes of side `n/2^k` cells (anchored at the lattice origin)
/// intersected with `Ω`, for `k = n_min..=n_max`.
///
/// A member with `|Q ∩ Ω| < c|Q|` is merged into the smallest-index member of
/// the same parent with `|Q ∩ Ω| ≥ c|Q|` (at the coarsest level: the
/// smallest-index such member touching it). Empty cubes are dropped.
pub fn dyadic_filtration(dom: &DomainSpec, n_min: u32, n_max: u32, c: f64) -> Result<DyadicFiltration> {
    if !(c > 0.0 && c <= 0.5) {
        return Err(invalid(format!("retention fraction {c} not in (0, 1/2]")));
    }
    if n_min > n_max {
        return Err(invalid("n_min exceeds n_max"));
    }
    let n = dom.cells_per_axis();
    if n_max >= usize::BITS || (1usize << n_max) > n || n % (1usize << n_max) != 0 {
        return Err(invalid(format!("2^{n_max} must divide the {n} cells per axis")));
    }
    let d = dom.dim();
    let dims = dom.dims();
    let mut levels: Vec<Vec<Cube>> = Vec::new();
    let mut owners: Vec<Vec<usize>> = Vec::new();
    for k in n_min..=n_max {
        let side = n >> k;
        let counts: Vec<usize> = (0..3).map(|a| if a < d { dims[a].div_ceil(side) } else { 1 }).collect();
        let n_geo = counts.iter().product::<usize>();
        let mut geo_cells: Vec<Vec<usize>> = vec![Vec::new(); n_geo];
        for cell in dom.active_cells() {
            let x = dom.coords(cell);
            let g = x[0] / side + counts[0] * (x[1] / side + counts[1] * (x[2] / side));
            geo_cells[g].push(cell);
        }
        let full = (side as f64).powi(d as i32);
        let anchor = |g: usize| -> [usize; 3] {
            [(g % counts[0]) * side, ((g / counts[0]) % counts[1]) * side, (g / (counts[0] * counts[1])) * side]
        };
        let parent_of = |g: usize| -> Option<usize> {
            if k == n_min {
                None
            } else {
                Some(owners.last().expect("coarser level")[geo_cells[g][0]])
            }
        };
        let qualifies = |g: usize| geo_cells[g].len() as f64 >= c * full;
        // target geometric cube for each nonempty cube
        let mut target: Vec<usize> = (0..n_geo).collect();
        for g in 0..n_geo {
            if geo_cells[g].is_empty() || qualifies(g) {
                continue;
            }
            let pg = parent_of(g);
            let ag = anchor(g);
            let candidate = (0..n_geo).find(|&s| {
                s != g
                    && !geo_cells[s].is_empty()
                    && qualifies(s)
                    && match pg {
                        Some(p) => parent_of(s) == Some(p) && same_dyadic_parent(&ag, &anchor(s), side),
                        None => touching(&ag, &anchor(s), side, d),
                    }
            });
            match candidate {
                Some(s) => target[g] = s,
                None => {
                    return Err(Error::Filtration {
                        level: k,
                        reason: format!("cube at {ag:?} keeps {} cells and has no qualifying sibling", geo_cells[g].len()),
                    })
                }
            }
        }
        let mut member_of_geo = vec![usize::MAX; n_geo];
        let mut cubes: Vec<Cube> = Vec::new();
        for g in 0..n_geo {
            if geo_cells[g].is_empty() || target[g] != g {
                continue;
            }
            member_of_geo[g] = cubes.len();
            cubes.push(Cube { level: k, anchor: anchor(g), side, cells: Vec::new(), parent: parent_of(g), measure: 0.0 });
        }
        let mut owner = vec![usize::MAX; dom.n_cells()];
        for g in 0..n_geo {
            if geo_cells[g].is_empty() {
                continue;
            }
            let m = member_of_geo[target[g]];
            for &cell in &geo_cells[g] {
                owner[cell] = m;
            }
            cubes[m].cells.extend_from_slice(&geo_cells[g]);
        }
        for q in &mut cubes {
            q.cells.sort_unstable();
            q.measure = q.cells.len() as f64 * dom.cell_volume();
        }
        levels.push(cubes);
        owners.push(owner);
    }
    Ok(DyadicFiltration {
        n_min,
        n_max,
        levels,
        owner: owners,
        retention: c,
        side_length: n as f64 * dom.h(),
        d,
    })
}

fn same_dyadic_parent(a: &[usize; 3], b: &[usize; 3], side: usize) -> bool {
    (0..3).all(|k| a[k] / (2 * side) == b[k] / (2 * side))
}

fn touching(a: &[usize; 3], b: &[usize; 3], side: usize, d: usize) -> bool {
    (0..d).all(|k| a[k].abs_diff(b[k]) <= side)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructors_validate() {
        assert!(DomainSpec::periodic_box(2, 1.0, 4).is_err());
        assert!(DomainSpec::periodic_box(4, 1.0, 8).is_err());
        assert!(DomainSpec::dirichlet_box(2, -1.0, 8).is_err());
        assert!(DomainSpec::half_strip(2, 0.3, 1.0, 16).is_err());
        let s = DomainSpec::half_strip(2, 0.5, 1.0, 32).unwrap();
        assert_eq!(s.dims(), [16, 32, 1]);
        assert!(!s.is_periodic(0) && s.is_periodic(1));
    }

    #[test]
    fn graph_rejects_steep_boundary() {
        let steep = DomainSpec::lipschitz_graph_fn(2, 1.0, 16, |x| 0.1 * x[0], 0.05);
        assert!(steep.is_err());
        assert!(DomainSpec::lipschitz_graph_fn(2, 1.0, 16, |x| 0.05 * x[0], 0.05).is_ok());
        assert!(DomainSpec::lipschitz_graph_fn(2, 1.0, 16, |_| 0.0, 0.07).is_err());
    }

    #[test]
    fn graph_mask_follows_centers() {
        let g = DomainSpec::lipschitz_graph_fn(2, 1.0, 16, |x| 0.05 * x[0], 0.05).unwrap();
        for cell in 0..g.n_cells() {
            let x = g.center(cell);
            assert_eq!(g.is_active(cell), x[0] > 0.05 * x[1]);
        }
    }

    #[test]
    fn lipschitz_constant_examples() {
        assert_eq!(lipschitz_constant(&[0.0; 16], &[16], 1.0 / 16.0).unwrap(), 0.0);
        let h = 1.0 / 32.0;
        let phi: Vec<f64> = (0..33).map(|k| 0.05 * k as f64 * h).collect();
        assert!((lipschitz_constant(&phi, &[33], h).unwrap() - 0.05).abs() < 1e-14);
        assert!(lipschitz_constant(&[1.0], &[1], h).is_err());
        // 2D lattice: affine graph 0.03 x₂ + 0.04 x₃ has constant 0.05
        let n = 6;
        let phi2: Vec<f64> = (0..n * n).map(|k| 0.03 * (k % n) as f64 * h + 0.04 * (k / n) as f64 * h).collect();
        assert!((lipschitz_constant(&phi2, &[n, n], h).unwrap() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn ball_examples() {
        let b = DomainSpec::dirichlet_box(2, 1.0, 16).unwrap();
        let h = b.h();
        let c = b.center(b.index([8, 8, 0]));
        assert_eq!(b.ball_cells(&c[..2], 1.5 * h).len(), 9);
        assert_eq!(b.ball_cells(&c[..2], h).len(), 1);
        assert_eq!(b.ball_cells(&c[..2], 10.0).len(), 256);
    }

    #[test]
    fn periodic_ball_wraps() {
        let p = DomainSpec::periodic_box(2, 1.0, 16).unwrap();
        let corner = p.center(0);
        let ball = p.ball_cells(&corner[..2], 1.5 * p.h());
        assert_eq!(ball.len(), 9);
        assert!(ball.contains(&p.index([15, 15, 0])));
    }

    #[test]
    fn box_filtration_counts() {
        let p = DomainSpec::periodic_box(2, 1.0, 8).unwrap();
        let f = dyadic_filtration(&p, 0, 3, 0.25).unwrap();
        for (k, cubes) in f.levels() {
            assert_eq!(cubes.len(), 1 << (2 * k));
            assert!(cubes.iter().all(|q| q.cells.len() == 1 << (2 * (3 - k))));
        }
        assert!(f.verify(&p).all());
    }

    #[test]
    fn filtration_rejects_bad_args() {
        let p = DomainSpec::periodic_box(2, 1.0, 8).unwrap();
        assert!(dyadic_filtration(&p, 0, 4, 0.25).is_err());
        assert!(dyadic_filtration(&p, 0, 2, 0.75).is_err());
        assert!(dyadic_filtration(&p, 2, 1, 0.25).is_err());
    }

    #[test]
    fn graph_filtration_merges_thin_cubes() {
        let g = DomainSpec::lipschitz_graph_fn(2, 1.0, 64, |x| 0.04 + 0.05 * x[0], 0.05).unwrap();
        let f = dyadic_filtration(&g, 0, 4, 0.25).unwrap();
        let check = f.verify(&g);
        assert!(check.all(), "{:?}", check.failures);
        // the graph cuts some bottom-row level-4 cubes below a quarter; those
        // are absorbed by the cube above, giving members larger than 4×4
        assert!(f.level(4).iter().any(|q| q.cells.len() > 16));
    }

    #[test]
    fn file_loader_resamples() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("phi.txt");
        std::fs::write(&path, "# x phi\n0.0 0.0\n1.0, 0.05\n").unwrap();
        let g = DomainSpec::lipschitz_graph_from_file(&path, 1.0, 16, 0.05).unwrap();
        let direct = DomainSpec::lipschitz_graph_fn(2, 1.0, 16, |x| 0.05 * x[0], 0.05).unwrap();
        assert_eq!(g.active_mask(), direct.active_mask());
        std::fs::write(&path, "0.0 0.0 1.0\n").unwrap();
        assert!(matches!(DomainSpec::lipschitz_graph_from_file(&path, 1.0, 16, 0.05), Err(Error::Parse(_))));
    }
}
