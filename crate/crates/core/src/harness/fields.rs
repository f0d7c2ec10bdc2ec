//! Seeded, band-limited Gaussian random fields and the coefficient families
//! used by the sweeps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::coeffs::{layered_scalar, EllipticTensor};
use crate::domain::DomainSpec;
use crate::error::Result;

/// Deterministic generator for one named stream under a run seed.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// White noise on the full cell lattice, low-pass filtered to physical
/// wavenumbers `|k| ≤ k_max` (cycles per unit length), normalized to unit
/// RMS over `Ω` and zeroed outside it.
pub fn band_limited_field(dom: &DomainSpec, k_max: f64, rng: &mut impl Rng) -> Vec<f64> {
    let dims = dom.dims();
    let d = dom.dim();
    let total = dom.n_cells();
    let mut data: Vec<Complex<f64>> =
        (0..total).map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0)).collect();
    let mut planner = FftPlanner::<f64>::new();
    fft_all_axes(&mut data, dims, d, &mut planner, false);
    let extent: Vec<f64> = (0..d).map(|a| dims[a] as f64 * dom.h()).collect();
    for (idx, v) in data.iter_mut().enumerate() {
        let c = dom.coords(idx);
        let k2: f64 = (0..d)
            .map(|a| {
                let n = dims[a] as i64;
                let m = c[a] as i64;
                let k = if m <= n / 2 { m } else { m - n };
                (k as f64 / extent[a]).powi(2)
            })
            .sum();
        if k2 > k_max * k_max {
            *v = Complex::new(0.0, 0.0);
        }
    }
    fft_all_axes(&mut data, dims, d, &mut planner, true);
    let mut out: Vec<f64> = data.iter().map(|v| v.re).collect();
    let active = dom.active_cells();
    let rms = (active.iter().map(|&c| out[c] * out[c]).sum::<f64>() / active.len() as f64).sqrt();
    for (c, v) in out.iter_mut().enumerate() {
        *v = if dom.is_active(c) && rms > 0.0 { *v / rms } else { 0.0 };
    }
    out
}

fn fft_all_axes(data: &mut [Complex<f64>], dims: [usize; 3], d: usize, planner: &mut FftPlanner<f64>, inverse: bool) {
    let mut stride = 1;
    for &n in dims.iter().take(d) {
        let fft = if inverse { planner.plan_fft_inverse(n) } else { planner.plan_fft_forward(n) };
        let mut line = vec![Complex::new(0.0, 0.0); n];
        let block = stride * n;
        for start in 0..data.len() {
            // first element of every line along this axis
            if (start % block) / stride != 0 {
                continue;
            }
            for k in 0..n {
                line[k] = data[start + k * stride];
            }
            fft.process(&mut line);
            for k in 0..n {
                data[start + k * stride] = line[k];
            }
        }
        stride = block;
    }
    if inverse {
        let scale = 1.0 / data.len() as f64;
        data.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Subtract the mean over `Ω`.
pub fn remove_mean(dom: &DomainSpec, field: &mut [f64]) {
    let cells = dom.active_cells();
    let m = cells.iter().map(|&c| field[c]).sum::<f64>() / cells.len() as f64;
    for c in cells {
        field[c] -= m;
    }
}

/// `jumps` uniformly spaced breakpoints across `[0, extent]` with scalar
/// viscosities alternating through `viscosities`.
pub fn alternating_layers(d: usize, extent: f64, jumps: usize, viscosities: &[f64], delta: f64) -> Result<EllipticTensor> {
    let bps: Vec<f64> = (1..=jumps).map(|k| extent * k as f64 / (jumps + 1) as f64).collect();
    let nus: Vec<f64> = (0..=jumps).map(|k| viscosities[k % viscosities.len()]).collect();
    layered_scalar(d, bps, &nus, delta)
}

/// Random scalar layering: `jumps` sorted uniform breakpoints in
/// `(0, extent)`, log-uniform viscosities in `[lo, hi]`.
pub fn random_layers(
    d: usize,
    extent: f64,
    jumps: usize,
    lo: f64,
    hi: f64,
    delta: f64,
    rng: &mut impl Rng,
) -> Result<EllipticTensor> {
    let mut bps: Vec<f64> = (0..jumps).map(|_| rng.random_range(0.0..extent)).collect();
    bps.sort_by(f64::total_cmp);
    bps.dedup();
    let nus: Vec<f64> = (0..=bps.len()).map(|_| (rng.random_range(lo.ln()..=hi.ln())).exp()).collect();
    layered_scalar(d, bps, &nus, delta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fields_are_band_limited_and_reproducible() {
        let dom = DomainSpec::periodic_box(2, 1.0, 32).unwrap();
        let a = band_limited_field(&dom, 4.0, &mut rng_for(7, 1));
        let b = band_limited_field(&dom, 4.0, &mut rng_for(7, 1));
        let c = band_limited_field(&dom, 4.0, &mut rng_for(7, 2));
        assert_eq!(a, b);
        assert_ne!(a, c);
        let rms = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert!((rms - 1.0).abs() < 1e-12);
        // smooth: neighbouring differences are far below the amplitude
        let jump = (0..32 * 31).map(|k| (a[k] - a[k + 32]).abs()).fold(0.0, f64::max);
        assert!(jump < 1.5, "{jump}");
    }

    #[test]
    fn fields_vanish_outside_the_domain() {
        let dom = DomainSpec::lipschitz_graph_fn(2, 1.0, 32, |x| 0.1 + 0.05 * x[0], 0.05).unwrap();
        let mut f = band_limited_field(&dom, 8.0, &mut rng_for(1, 0));
        remove_mean(&dom, &mut f);
        for c in 0..dom.n_cells() {
            if !dom.is_active(c) {
                assert_eq!(f[c], 0.0);
            }
        }
        let cells = dom.active_cells();
        assert!(cells.iter().map(|&c| f[c]).sum::<f64>().abs() < 1e-10);
    }

    #[test]
    fn layer_families() {
        let a = alternating_layers(2, 1.0, 3, &[0.3, 3.0], 0.25).unwrap();
        assert_eq!(a.breakpoints(), &[0.25, 0.5, 0.75]);
        assert_eq!(a.eval(&[0.6, 0.0]).get(0, 0, 0, 0), 0.3);
        let r = random_layers(2, 1.0, 8, 0.3, 3.0, 0.25, &mut rng_for(3, 0)).unwrap();
        assert!(r.breakpoints().len() <= 8);
    }
}
