//! Property checks of serialization, norms and the maximal function.

use proptest::prelude::*;

use stokes_lab::analysis::{dyadic_radii, lq_norm, maximal_function};
use stokes_lab::domain::DomainSpec;
use stokes_lab::grid::{MacGrid, StaggeredField};
use stokes_lab::harness::RunConfig;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn field_roundtrips_through_binary(seed in any::<u64>(), n in 8usize..20) {
        let grid = MacGrid::new(DomainSpec::half_strip(2, 1.0, 1.0, n).unwrap());
        let s = (seed % 1000) as f64;
        let field = StaggeredField::from_fn(&grid, |i, x| (s + i as f64 + x[0] * 3.0).sin(), |x| (s * x[1]).cos());
        let mut buf = Vec::new();
        field.write_to(&mut buf).unwrap();
        let back = StaggeredField::read_from(&grid, buf.as_slice()).unwrap();
        prop_assert_eq!(back.velocity(), field.velocity());
        prop_assert_eq!(back.pressure(), field.pressure());
    }

    #[test]
    fn config_roundtrips_through_toml(seed in 0..=i64::MAX as u64, k in 1usize..64, q in 1.2f64..16.0) {
        let mut cfg = RunConfig::for_experiment("lq").unwrap();
        cfg.seed = seed;
        cfg.jumps = vec![k];
        cfg.q = vec![q];
        let back = RunConfig::from_toml("lq", &cfg.canonical()).unwrap();
        prop_assert_eq!(back.hash(), cfg.hash());
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn unrecordable_seeds_are_rejected(seed in (i64::MAX as u64 + 1)..=u64::MAX) {
        let cfg = RunConfig { seed, ..RunConfig::for_experiment("l2").unwrap() };
        prop_assert!(cfg.validate().is_err());
    }

    #[test]
    fn maximal_function_dominates(values in prop::collection::vec(-5.0f64..5.0, 256)) {
        let dom = DomainSpec::periodic_box(2, 1.0, 16).unwrap();
        let m = maximal_function(&values, &dom, &dyadic_radii(&dom));
        for (mv, v) in m.iter().zip(&values) {
            prop_assert!(*mv >= v.abs());
        }
        let cells = dom.active_cells();
        for q in [1.5, 2.0, 4.0] {
            prop_assert!(lq_norm(&m, &cells, q, &dom).unwrap() >= lq_norm(&values, &cells, q, &dom).unwrap());
        }
    }

    #[test]
    fn lq_norm_is_homogeneous(values in prop::collection::vec(-5.0f64..5.0, 64), t in -4.0f64..4.0) {
        let dom = DomainSpec::dirichlet_box(2, 1.0, 8).unwrap();
        let cells = dom.active_cells();
        let scaled: Vec<f64> = values.iter().map(|v| t * v).collect();
        let a = lq_norm(&scaled, &cells, 3.0, &dom).unwrap();
        let b = t.abs() * lq_norm(&values, &cells, 3.0, &dom).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b));
    }
}
