//! Measurement functionals on cell fields: `L_q` norms, mean oscillations,
//! the dyadic sharp function, the Hardy–Littlewood maximal function, Hölder
//! seminorms and interface-jump scans.
//!
//! Continuum suprema are discretized by finite sets (cell-center pairs,
//! lattice centers, radius ladders), so every value here is a lower bound of
//! its continuum counterpart.

use crate::domain::{DomainSpec, DyadicFiltration};
use crate::error::{invalid, Result};

/// Mean oscillation of a field over one region.
#[derive(Clone, Debug, PartialEq)]
pub struct OscillationReport {
    pub region: usize,
    /// `(|f − (f)_E|)_E`.
    pub value: f64,
    pub cells: usize,
    /// `(f)_E`.
    pub mean: f64,
}

/// `(h^d Σ |f|^q)^{1/q}` over `cells`.
pub fn lq_norm(field: &[f64], cells: &[usize], q: f64, dom: &DomainSpec) -> Result<f64> {
    if !(q >= 1.0) || !q.is_finite() {
        return Err(invalid(format!("exponent {q} must be a finite number ≥ 1")));
    }
    if cells.is_empty() {
        return Err(invalid("L_q norm over an empty cell set"));
    }
    let s: f64 = cells.iter().map(|&c| field[c].abs().powf(q)).sum();
    Ok((s * dom.cell_volume()).powf(1.0 / q))
}

/// `L_q` norm of the pointwise Euclidean magnitude of a vector field given
/// as a list of component fields.
pub fn lq_norm_vector(components: &[Vec<f64>], cells: &[usize], q: f64, dom: &DomainSpec) -> Result<f64> {
    let nc = dom.n_cells();
    let mag: Vec<f64> = (0..nc).map(|c| components.iter().map(|f| f[c] * f[c]).sum::<f64>().sqrt()).collect();
    lq_norm(&mag, cells, q, dom)
}

/// Average of `|f − (f)_E|` over `E = cells` (uniform cells, so `h` cancels).
pub fn mean_oscillation(field: &[f64], cells: &[usize], region: usize) -> Result<OscillationReport> {
    if cells.is_empty() {
        return Err(invalid("mean oscillation over an empty cell set"));
    }
    let n = cells.len() as f64;
    let mean = cells.iter().map(|&c| field[c]).sum::<f64>() / n;
    let value = cells.iter().map(|&c| (field[c] - mean).abs()).sum::<f64>() / n;
    Ok(OscillationReport { region, value, cells: cells.len(), mean })
}

/// Mean oscillation of a vector field: average of `|F − (F)_E|₂`.
pub fn mean_oscillation_vector(components: &[Vec<f64>], cells: &[usize]) -> Result<f64> {
    if cells.is_empty() {
        return Err(invalid("mean oscillation over an empty cell set"));
    }
    let n = cells.len() as f64;
    let means: Vec<f64> = components.iter().map(|f| cells.iter().map(|&c| f[c]).sum::<f64>() / n).collect();
    Ok(cells
        .iter()
        .map(|&c| components.iter().zip(&means).map(|(f, m)| (f[c] - m).powi(2)).sum::<f64>().sqrt())
        .sum::<f64>()
        / n)
}

/// `f^#(x) = max_k (|f − (f)_Q|)_Q` over the level-`k` member `Q ∋ x`;
/// zero outside `Ω`.
pub fn sharp_function(field: &[f64], filtration: &DyadicFiltration) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for (_, cubes) in filtration.levels() {
        for cube in cubes {
            let n = cube.cells.len() as f64;
            let mean = cube.cells.iter().map(|&c| field[c]).sum::<f64>() / n;
            let osc = cube.cells.iter().map(|&c| (field[c] - mean).abs()).sum::<f64>() / n;
            for &c in &cube.cells {
                if osc > out[c] {
                    out[c] = osc;
                }
            }
        }
    }
    out
}

/// Radii `h, 2h, 4h, …` up to the first one reaching `diam Ω`.
pub fn dyadic_radii(dom: &DomainSpec) -> Vec<f64> {
    let mut r = dom.h();
    let mut out = vec![];
    loop {
        out.push(r);
        if r >= dom.diameter() {
            return out;
        }
        r *= 2.0;
    }
}

/// `𝓜f(x) = max` over `r ∈ radii` and lattice centers `x₀` with `x` in the
/// open ball `B_r(x₀)` of the average of `|f|` over `B_r(x₀) ∩ Ω_h`.
/// Containment is decided on cell centers with the domain's metric; zero
/// outside `Ω`.
pub fn maximal_function(field: &[f64], dom: &DomainSpec, radii: &[f64]) -> Vec<f64> {
    if dom.dim() == 2 {
        maximal_function_2d(field, dom, radii)
    } else {
        maximal_function_brute(field, dom, radii)
    }
}

fn maximal_function_brute(field: &[f64], dom: &DomainSpec, radii: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0f64; field.len()];
    let cells = dom.active_cells();
    for &r in radii {
        for &c in &cells {
            let ball = dom.ball_cells(&dom.center(c), r);
            let avg = ball.iter().map(|&b| field[b].abs()).sum::<f64>() / ball.len() as f64;
            for b in ball {
                out[b] = out[b].max(avg);
            }
        }
    }
    out
}

/// Half-width (in cells) of the open lattice disc of radius `r` at row
/// offset `dy`, or `None` if the row misses the disc.
fn half_width(r_cells: f64, dy: usize) -> Option<usize> {
    let rem = r_cells * r_cells - (dy * dy) as f64;
    if rem <= 0.0 {
        return None;
    }
    let mut w = rem.sqrt().floor() as usize;
    while w > 0 && (w * w) as f64 >= rem {
        w -= 1;
    }
    Some(w)
}

/// Two-dimensional evaluation: averages from row prefix sums, then a
/// sliding-window maximum over the same disc stencil (the disc is symmetric,
/// so "centers whose ball contains x" is the disc around x).
fn maximal_function_2d(field: &[f64], dom: &DomainSpec, radii: &[f64]) -> Vec<f64> {
    let [n0, n1, _] = dom.dims();
    let (p0, p1) = (dom.is_periodic(0), dom.is_periodic(1));
    let active = dom.active_mask();
    // row prefix sums along axis 0 of |f| and of the active indicator
    let mut ps = vec![0.0; (n0 + 1) * n1];
    let mut pc = vec![0usize; (n0 + 1) * n1];
    for y in 0..n1 {
        for x in 0..n0 {
            let c = x + n0 * y;
            let o = (n0 + 1) * y;
            ps[o + x + 1] = ps[o + x] + if active[c] { field[c].abs() } else { 0.0 };
            pc[o + x + 1] = pc[o + x] + active[c] as usize;
        }
    }
    // sum over x-range [a, b] (inclusive, possibly wrapping) in row y
    let range = |y: usize, a: isize, b: isize| -> (f64, usize) {
        let o = (n0 + 1) * y;
        let seg = |lo: usize, hi: usize| (ps[o + hi + 1] - ps[o + lo], pc[o + hi + 1] - pc[o + lo]);
        if b - a + 1 >= n0 as isize && p0 {
            return seg(0, n0 - 1);
        }
        if p0 {
            let lo = a.rem_euclid(n0 as isize) as usize;
            let hi = b.rem_euclid(n0 as isize) as usize;
            if lo <= hi {
                seg(lo, hi)
            } else {
                let (s1, c1) = seg(lo, n0 - 1);
                let (s2, c2) = seg(0, hi);
                (s1 + s2, c1 + c2)
            }
        } else {
            let lo = a.max(0) as usize;
            let hi = b.min(n0 as isize - 1);
            if hi < lo as isize {
                (0.0, 0)
            } else {
                seg(lo, hi as usize)
            }
        }
    };
    let row_of = |y: usize, dy: isize| -> Option<usize> {
        let t = y as isize + dy;
        if p1 {
            Some(t.rem_euclid(n1 as isize) as usize)
        } else if (0..n1 as isize).contains(&t) {
            Some(t as usize)
        } else {
            None
        }
    };
    let mut out = vec![0.0; field.len()];
    let mut avg = vec![f64::NEG_INFINITY; field.len()];
    let mut rowmax = vec![0.0; n0];
    for &r in radii {
        let rc = r / dom.h();
        // torus offsets are taken in (−n/2, n/2] so each cell appears once
        let dys: Vec<isize> = if p1 {
            (-((n1 as isize - 1) / 2)..=(n1 as isize / 2)).collect()
        } else {
            (-(n1 as isize - 1)..=(n1 as isize - 1)).collect()
        };
        let widths: Vec<(isize, usize)> =
            dys.into_iter().filter_map(|dy| half_width(rc, dy.unsigned_abs()).map(|w| (dy, w))).collect();
        let full_row = |w: usize| p0 && 2 * w + 1 >= n0;
        for y in 0..n1 {
            for x in 0..n0 {
                let c = x + n0 * y;
                if !active[c] {
                    continue;
                }
                let (mut s, mut k) = (0.0, 0usize);
                for &(dy, w) in &widths {
                    if let Some(yy) = row_of(y, dy) {
                        let (a, b) = if full_row(w) {
                            (0, n0 as isize - 1)
                        } else {
                            (x as isize - w as isize, x as isize + w as isize)
                        };
                        let (s1, k1) = range(yy, a, b);
                        s += s1;
                        k += k1;
                    }
                }
                // a single-cell ball is exact, so 𝓜f ≥ |f| holds without rounding
                avg[c] = if k == 1 { field[c].abs() } else { s / k as f64 };
            }
        }
        for y in 0..n1 {
            for &(dy, w) in &widths {
                let Some(yy) = row_of(y, dy) else { continue };
                let src = &avg[n0 * yy..n0 * (yy + 1)];
                sliding_max(src, w, p0, &mut rowmax);
                for x in 0..n0 {
                    let c = x + n0 * y;
                    if active[c] && rowmax[x] > out[c] {
                        out[c] = rowmax[x];
                    }
                }
            }
        }
    }
    out
}

/// `out[x] = max src[x−w..=x+w]` (wrapping if `periodic`), via a monotone
/// deque in linear time.
fn sliding_max(src: &[f64], w: usize, periodic: bool, out: &mut [f64]) {
    let n = src.len();
    if periodic && 2 * w + 1 >= n {
        let m = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.iter_mut().for_each(|o| *o = m);
        return;
    }
    let get = |i: isize| -> f64 {
        if periodic {
            src[i.rem_euclid(n as isize) as usize]
        } else if (0..n as isize).contains(&i) {
            src[i as usize]
        } else {
            f64::NEG_INFINITY
        }
    };
    let w = w as isize;
    let mut dq: std::collections::VecDeque<(isize, f64)> = std::collections::VecDeque::new();
    let mut next = -w;
    for x in 0..n as isize {
        while next <= x + w {
            let v = get(next);
            while dq.back().is_some_and(|&(_, b)| b <= v) {
                dq.pop_back();
            }
            dq.push_back((next, v));
            next += 1;
        }
        while dq.front().is_some_and(|&(i, _)| i < x - w) {
            dq.pop_front();
        }
        out[x as usize] = dq.front().map_or(f64::NEG_INFINITY, |&(_, v)| v);
    }
}

/// `max |f(x) − f(y)| / |x − y|^τ` over distinct cell-center pairs (domain
/// metric).
pub fn holder_seminorm(field: &[f64], cells: &[usize], tau: f64, dom: &DomainSpec) -> Result<f64> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(invalid(format!("Hölder exponent {tau} not in (0, 1]")));
    }
    if cells.len() < 2 {
        return Err(invalid("Hölder seminorm needs at least two cells"));
    }
    let centers: Vec<[f64; 3]> = cells.iter().map(|&c| dom.center(c)).collect();
    let d = dom.dim();
    let mut best = 0.0f64;
    for a in 0..cells.len() {
        let fa = field[cells[a]];
        for b in (a + 1)..cells.len() {
            let df = (fa - field[cells[b]]).abs();
            if df == 0.0 {
                continue;
            }
            let dist2 = dom.distance2(&centers[a][..d], &centers[b][..d]);
            best = best.max(df / dist2.powf(0.5 * tau));
        }
    }
    Ok(best)
}

/// Largest jump across the plane `x₁ = c`: `max_{x'} |f(c⁺, x') − f(c⁻, x')|`
/// with one-sided quadratic extrapolation from the three nearest cell
/// layers on each side (linear when only two active layers are available).
/// Cell centers exactly on `c` count as below the plane.
pub fn interface_jump(field: &[f64], dom: &DomainSpec, c: f64) -> Result<f64> {
    let [n0, n1, n2] = dom.dims();
    let h = dom.h();
    // first layer whose center lies above c
    let m = (0..n0).find(|&i| (i as f64 + 0.5) * h > c).unwrap_or(n0);
    if m < 2 || n0 - m < 2 {
        return Err(invalid(format!("interface x₁ = {c} needs two cell layers on each side")));
    }
    let below: Vec<usize> = (0..3.min(m)).map(|k| m - 1 - k).collect();
    let above: Vec<usize> = (0..3.min(n0 - m)).map(|k| m + k).collect();
    let mut worst = 0.0f64;
    let mut any = false;
    for t in 0..n1 * n2 {
        let cell = |i: usize| i + n0 * t;
        let side = |layers: &[usize]| -> Option<f64> {
            let usable: Vec<usize> =
                layers.iter().copied().take_while(|&i| dom.is_active(cell(i))).collect();
            if usable.len() < 2 {
                return None;
            }
            let xs: Vec<f64> = usable.iter().map(|&i| (i as f64 + 0.5) * h).collect();
            let ys: Vec<f64> = usable.iter().map(|&i| field[cell(i)]).collect();
            Some(lagrange_at(&xs, &ys, c))
        };
        if let (Some(lo), Some(hi)) = (side(&below), side(&above)) {
            worst = worst.max((hi - lo).abs());
            any = true;
        }
    }
    if !any {
        return Err(invalid(format!("no transverse line crosses x₁ = {c} inside the domain")));
    }
    Ok(worst)
}

fn lagrange_at(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let mut s = 0.0;
    for i in 0..xs.len() {
        let mut l = 1.0;
        for j in 0..xs.len() {
            if i != j {
                l *= (x - xs[j]) / (xs[i] - xs[j]);
            }
        }
        s += l * ys[i];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::dyadic_filtration;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn field_from(dom: &DomainSpec, f: impl Fn([f64; 3]) -> f64) -> Vec<f64> {
        (0..dom.n_cells()).map(|c| if dom.is_active(c) { f(dom.center(c)) } else { 0.0 }).collect()
    }

    #[test]
    fn lq_examples() {
        let dom = DomainSpec::periodic_box(2, 1.0, 128).unwrap();
        let cells = dom.active_cells();
        let one = vec![1.0; dom.n_cells()];
        for q in [1.0, 2.0, 4.5] {
            assert!((lq_norm(&one, &cells, q, &dom).unwrap() - 1.0).abs() < 1e-12);
            let c = vec![-3.0; dom.n_cells()];
            assert!((lq_norm(&c, &cells, q, &dom).unwrap() - 3.0).abs() < 1e-12);
        }
        let s = field_from(&dom, |x| (2.0 * PI * x[0]).sin());
        assert!((lq_norm(&s, &cells, 2.0, &dom).unwrap() - 0.5f64.sqrt()).abs() < 1e-4);
        assert!(lq_norm(&s, &[], 2.0, &dom).is_err());
        assert!(lq_norm(&s, &cells, 0.5, &dom).is_err());
    }

    #[test]
    fn oscillation_examples() {
        let dom = DomainSpec::periodic_box(2, 1.0, 128).unwrap();
        let all = dom.active_cells();
        assert_eq!(mean_oscillation(&vec![2.0; dom.n_cells()], &all, 0).unwrap().value, 0.0);
        let pm = field_from(&dom, |x| if x[0] < 0.5 { 1.0 } else { -1.0 });
        assert!((mean_oscillation(&pm, &all, 0).unwrap().value - 1.0).abs() < 1e-14);

        // f = x₁ on B_{1/4}(center): (|x₁ − x̄₁|)_B = 4r/(3π)
        let ball = dom.ball_cells(&[0.5, 0.5], 0.25);
        let f = field_from(&dom, |x| x[0]);
        let rep = mean_oscillation(&f, &ball, 7).unwrap();
        let exact = 4.0 * 0.25 / (3.0 * PI);
        assert!((rep.value - exact).abs() <= 0.01 * exact, "{} vs {exact}", rep.value);
        assert_eq!(rep.region, 7);
        assert!(mean_oscillation(&f, &[], 0).is_err());
    }

    #[test]
    fn oscillation_properties() {
        let dom = DomainSpec::dirichlet_box(2, 1.0, 16).unwrap();
        let cells = dom.active_cells();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let f: Vec<f64> = (0..256).map(|_| rng.random_range(-2.0..2.0)).collect();
            let osc = mean_oscillation(&f, &cells, 0).unwrap().value;
            let shifted: Vec<f64> = f.iter().map(|v| v + 3.5).collect();
            assert!((mean_oscillation(&shifted, &cells, 0).unwrap().value - osc).abs() < 1e-12);
            let mut sorted: Vec<f64> = cells.iter().map(|&c| f[c]).collect();
            sorted.sort_by(f64::total_cmp);
            let med = sorted[sorted.len() / 2];
            let dev = sorted.iter().map(|v| (v - med).abs()).sum::<f64>() / sorted.len() as f64;
            assert!(osc <= 2.0 * dev + 1e-12);
        }
    }

    #[test]
    fn sharp_function_examples() {
        let dom = DomainSpec::periodic_box(2, 1.0, 16).unwrap();
        let filt = dyadic_filtration(&dom, 0, 4, 0.5).unwrap();
        assert!(sharp_function(&vec![1.5; 256], &filt).iter().all(|v| *v == 0.0));

        // indicator(x₁ < ½): only the level-0 cube straddles the jump
        let ind = field_from(&dom, |x| if x[0] < 0.5 { 1.0 } else { 0.0 });
        let s = sharp_function(&ind, &filt);
        assert!(s.iter().all(|v| (v - 0.5).abs() < 1e-15));

        // spike: the finest cube containing the spike gives the maximum
        let mut spike = vec![0.0; 256];
        spike[5 + 16 * 9] = 1.0;
        let s = sharp_function(&spike, &filt);
        let best = (0..256).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        assert_eq!(s[best], s[5 + 16 * 9]);
        // level-4 cubes are 1×1 (zero oscillation); level 3 is 2×2: 2·(3/4)/4
        assert!((s[5 + 16 * 9] - 0.375).abs() < 1e-15);
        // a cell sharing only the level-2 cube: 2·(15/16)/16
        assert!((s[7 + 16 * 11] - 2.0 * 15.0 / 256.0).abs() < 1e-15);
        // monotone under adding finer levels
        let coarse = dyadic_filtration(&dom, 0, 2, 0.5).unwrap();
        let sc = sharp_function(&spike, &coarse);
        assert!(sc.iter().zip(&s).all(|(a, b)| a <= b));
    }

    #[test]
    fn maximal_function_examples() {
        for dom in [
            DomainSpec::periodic_box(2, 1.0, 16).unwrap(),
            DomainSpec::dirichlet_box(2, 1.0, 16).unwrap(),
            DomainSpec::lipschitz_graph_fn(2, 1.0, 16, |x| 0.1 + 0.05 * x[0], 0.05).unwrap(),
        ] {
            let radii = dyadic_radii(&dom);
            let c = vec![-2.0; dom.n_cells()];
            let m = maximal_function(&c, &dom, &radii);
            for cell in dom.active_cells() {
                assert!((m[cell] - 2.0).abs() < 1e-12);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(8);
            for trial in 0..20 {
                let f: Vec<f64> = (0..dom.n_cells()).map(|_| rng.random_range(-1.0..1.0)).collect();
                let fast = maximal_function(&f, &dom, &radii);
                let slow = maximal_function_brute(&f, &dom, &radii);
                for cell in dom.active_cells() {
                    assert!(fast[cell] >= f[cell].abs());
                    assert!((fast[cell] - slow[cell]).abs() < 1e-12, "trial {trial} cell {cell}");
                }
            }
        }
        // spike with the 9-cell ball: neighbours see spike/9
        let dom = DomainSpec::periodic_box(2, 1.0, 16).unwrap();
        let mut spike = vec![0.0; 256];
        spike[8 + 16 * 8] = 9.0;
        let m = maximal_function(&spike, &dom, &[1.5 / 16.0]);
        assert_eq!(m[8 + 16 * 8], 9.0 / 9.0);
        assert_eq!(m[9 + 16 * 9], 1.0);
        assert_eq!(m[10 + 16 * 8], 1.0);
        assert_eq!(m[11 + 16 * 8], 0.0);
        let m1 = maximal_function(&spike, &dom, &[1.0 / 16.0]);
        assert_eq!(m1[8 + 16 * 8], 9.0);
        assert_eq!(m1[9 + 16 * 8], 0.0);
    }

    #[test]
    fn holder_examples() {
        let dom = DomainSpec::dirichlet_box(2, 1.0, 16).unwrap();
        let cells = dom.active_cells();
        assert_eq!(holder_seminorm(&vec![1.0; 256], &cells, 0.5, &dom).unwrap(), 0.0);
        let f = field_from(&dom, |x| x[0]);
        assert!((holder_seminorm(&f, &cells, 1.0, &dom).unwrap() - 1.0).abs() < 1e-12);
        assert!(holder_seminorm(&f, &cells[..1], 1.0, &dom).is_err());

        // |x₁ − ½|^{1/2}: the continuum value 1 is approached from below at
        // rate √h (the closest center sits h/2 off the cusp)
        let val = |n: usize| {
            let dom = DomainSpec::dirichlet_box(2, 1.0, n).unwrap();
            let f = field_from(&dom, |x| (x[0] - 0.5).abs().sqrt());
            holder_seminorm(&f, &dom.active_cells(), 0.5, &dom).unwrap()
        };
        let (a, b) = (val(32), val(64));
        assert!(a < b && b < 1.0, "{a} {b}");
        assert!(1.0 - a <= (1.0f64 / 32.0).sqrt() && 1.0 - b <= (1.0f64 / 64.0).sqrt());
    }

    #[test]
    fn interface_examples() {
        let jump = |n: usize, f: &dyn Fn(f64) -> f64| {
            let dom = DomainSpec::half_strip(2, 1.0, 1.0, n).unwrap();
            let field = field_from(&dom, |x| f(x[0]));
            interface_jump(&field, &dom, 0.5).unwrap()
        };
        let step = |x: f64| if x > 0.5 { 1.0 } else { 0.0 };
        assert!((jump(16, &step) - 1.0).abs() < 1e-14);
        assert!((jump(64, &step) - 1.0).abs() < 1e-14);
        let smooth = |x: f64| (3.0 * x).sin();
        let (a, b) = (jump(16, &smooth), jump(32, &smooth));
        assert!(b < a / 4.0, "{a} {b}");
        let shear = |x: f64| if x > 0.5 { 0.1 } else { 1.0 };
        assert!((jump(32, &shear) - 0.9).abs() < 1e-14);
        let dom = DomainSpec::half_strip(2, 1.0, 1.0, 16).unwrap();
        assert!(interface_jump(&vec![0.0; 256], &dom, 0.05).is_err());
    }
}
