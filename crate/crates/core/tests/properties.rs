use proptest::prelude::*;
use shell_ldp::noise::{sample_wiener, Control, CovarianceSpec, RkhsVector};
use shell_ldp::spectral::{ModelParams, ShellModel, ShellState, Variant, C64};

fn state(m: usize) -> impl Strategy<Value = ShellState> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), m)
        .prop_map(|v| ShellState::from_vec(v.into_iter().map(|(re, im)| C64::new(re, im)).collect()))
}

fn model() -> impl Strategy<Value = ShellModel> {
    (
        prop_oneof![Just(Variant::Goy), Just(Variant::Sabra)],
        -2.0f64..2.0,
        -2.0f64..2.0,
        1.1f64..3.0,
        0.1f64..2.0,
        3usize..12,
    )
        .prop_map(|(v, a, b, mu, k0, m)| ShellModel::new(ModelParams::new(v, a, b, mu, k0, m).unwrap()).unwrap())
}

fn model_and_states() -> impl Strategy<Value = (ShellModel, ShellState, ShellState, ShellState)> {
    model().prop_flat_map(|md| {
        let m = md.m();
        (Just(md), state(m), state(m), state(m))
    })
}

proptest! {
    #[test]
    fn antisymmetry_and_energy((md, u, v, w) in model_and_states()) {
        let rep = md.identity_report(&u, &v, &w).unwrap();
        prop_assert!(rep.antisymmetry_rel() <= 1e-12);
        prop_assert!(rep.energy_rel() <= 1e-12);
    }

    #[test]
    fn bilinearity((md, u, v, w) in model_and_states(), s in -3.0f64..3.0) {
        let lhs = md.bilinear(&u.axpy(s, &w), &v).unwrap();
        let rhs = md.bilinear(&u, &v).unwrap().axpy(s, &md.bilinear(&w, &v).unwrap());
        let scale = 1.0 + rhs.max_abs();
        prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-12 * scale);
    }

    #[test]
    fn norm_ladder_is_ordered((md, u, _, _) in model_and_states(), alpha in 0.0f64..0.5) {
        // With k_1 >= 1 the ladder is monotone in alpha.
        let shifted = ShellModel::new(ModelParams { k0: 1.0, ..md.params().clone() }).unwrap();
        let l = shifted.ladder(&u, alpha).unwrap();
        prop_assert!(l.h_norm <= l.calh_norm * (1.0 + 1e-12));
        prop_assert!(l.calh_norm <= l.v_norm * (1.0 + 1e-12));
        if alpha <= 0.25 {
            prop_assert!(l.alpha_norm <= l.calh_norm * (1.0 + 1e-12));
        } else {
            prop_assert!(l.alpha_norm >= l.calh_norm * (1.0 - 1e-12));
        }
    }

    #[test]
    fn fractional_powers_compose((md, u, _, _) in model_and_states(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let lhs = md.apply_fractional_a(&md.apply_fractional_a(&u, a).unwrap(), b).unwrap();
        let rhs = md.apply_fractional_a(&u, a + b).unwrap();
        prop_assert!(lhs.sub(&rhs).max_abs() <= 1e-12 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn coarsening_preserves_brownian_sums(seed in any::<u64>(), factor in prop_oneof![Just(1usize), Just(2), Just(4), Just(8)]) {
        let q = CovarianceSpec::new(vec![1.0, 0.5, 0.25]).unwrap();
        let path = sample_wiener(seed, 64, 1.0 / 64.0, &q).unwrap();
        let coarse = path.coarsen(factor).unwrap();
        let total = |p: &shell_ldp::noise::NoisePath| {
            (0..p.steps).fold(vec![C64::new(0.0, 0.0); 3], |mut acc, k| {
                acc.iter_mut().zip(p.increment(k)).for_each(|(a, b)| *a += b);
                acc
            })
        };
        for (a, b) in total(&path).iter().zip(total(&coarse)) {
            prop_assert!((a - b).norm() <= 1e-12);
        }
        prop_assert!((coarse.dt * coarse.steps as f64 - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn projection_lands_in_s_m(vals in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 12), cap in 0.01f64..10.0) {
        let q = CovarianceSpec::new(vec![1.0, 0.5, 0.25]).unwrap();
        let values = vals.chunks(3).map(|c| RkhsVector(c.iter().map(|&(re, im)| C64::new(re, im)).collect())).collect();
        let mut h = Control::new(1.0, values, &q).unwrap();
        let before = h.energy();
        let active = h.project_s_m(cap);
        prop_assert!(h.in_s_m(cap * (1.0 + 1e-12)));
        prop_assert_eq!(active, before > cap);
        prop_assert!(h.energy() <= before * (1.0 + 1e-12));
    }
}
