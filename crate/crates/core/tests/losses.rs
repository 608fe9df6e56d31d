use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use wildpu::losses::{
    bce_loss, harmonic, sym_kl_bernoulli, tbce_loss, wbce_loss, wtbce_loss, TaylorOrder,
};

fn order(t: u32) -> TaylorOrder {
    TaylorOrder::new(t).unwrap()
}

/// `Σ_{o=1..t} f^o / o` by direct powers.
fn taylor_oracle(f: f64, t: u32) -> f64 {
    (1..=t).map(|o| f.powi(o as i32) / o as f64).sum()
}

proptest! {
    #[test]
    fn negative_branch_bounded_by_harmonic(f in 0.0f64..=1.0, t in 1u32..=8) {
        let (l, _) = tbce_loss(f, false, order(t));
        prop_assert!(l >= 0.0);
        prop_assert!(l <= harmonic(t) + 1e-15);
        prop_assert!((l - taylor_oracle(f, t)).abs() <= 1e-12);
    }

    #[test]
    fn truncation_contracts_the_wild_weight(f in 1e-6f64..(1.0 - 1e-6), t in 1u32..=8) {
        let (_, g_t) = tbce_loss(f, false, order(t));
        let (_, g_b) = bce_loss(f, false);
        // exact gap f^t / (1 - f); below two ulps the rounded weights may tie
        if f.powi(t as i32) / (1.0 - f) > 2.0 * f64::EPSILON * g_b {
            prop_assert!(g_t < g_b);
        } else {
            prop_assert!((g_t - g_b).abs() <= 2.0 * f64::EPSILON * g_b);
        }
        let closed = (1.0 - f.powi(t as i32)) / (1.0 - f);
        prop_assert!((g_t - closed).abs() <= 1e-9 * closed.max(1.0));
    }

    #[test]
    fn weight_grows_with_order(f in 1e-3f64..(1.0 - 1e-3), t in 1u32..=7) {
        let (_, a) = tbce_loss(f, false, order(t));
        let (_, b) = tbce_loss(f, false, order(t + 1));
        // the added term f^t can sit below one ulp of the sum
        if f.powi(t as i32) > 4.0 * f64::EPSILON * a {
            prop_assert!(b > a);
        } else {
            prop_assert!(b >= a);
        }
    }

    #[test]
    fn derivatives_match_differences(f in 0.01f64..0.99, t in 1u32..=6, w in 0.0f64..=1.0, positive: bool) {
        let h = 1e-6;
        let check = |l: &dyn Fn(f64) -> (f64, f64)| {
            let numeric = (l(f + h).0 - l(f - h).0) / (2.0 * h);
            let analytic = l(f).1;
            (numeric - analytic).abs() <= 1e-6 * analytic.abs().max(1.0)
        };
        prop_assert!(check(&|x| bce_loss(x, positive)));
        prop_assert!(check(&|x| tbce_loss(x, positive, order(t))));
        prop_assert!(check(&|x| wbce_loss(x, positive, w)));
        prop_assert!(check(&|x| wtbce_loss(x, positive, w, order(t))));
    }

    #[test]
    fn weights_scale_only_the_negative_branch(f in 0.01f64..0.99, t in 1u32..=6, w in 0.0f64..=1.0) {
        let (lb, gb) = bce_loss(f, false);
        let (lw, gw) = wbce_loss(f, false, w);
        prop_assert!((lw - w * lb).abs() <= 1e-12 && (gw - w * gb).abs() <= 1e-12);
        let (lt, gt) = tbce_loss(f, false, order(t));
        let (lwt, gwt) = wtbce_loss(f, false, w, order(t));
        prop_assert!((lwt - w * lt).abs() <= 1e-12 && (gwt - w * gt).abs() <= 1e-12);
        prop_assert_eq!(wbce_loss(f, true, w), bce_loss(f, true));
        prop_assert_eq!(wtbce_loss(f, true, w, order(t)), tbce_loss(f, true, order(t)));
    }

    #[test]
    fn symmetric_kl_is_symmetric_and_nonnegative(a in 0.001f64..0.999, b in 0.001f64..0.999) {
        let (l1, da1, db1) = sym_kl_bernoulli(a, b);
        let (l2, da2, db2) = sym_kl_bernoulli(b, a);
        prop_assert!(l1 >= -1e-15);
        prop_assert!((l1 - l2).abs() <= 1e-12);
        prop_assert!((da1 - db2).abs() <= 1e-9 && (db1 - da2).abs() <= 1e-9);
    }
}

#[test]
fn harmonic_values() {
    assert_eq!(harmonic(1), 1.0);
    assert_eq!(harmonic(2), 1.5);
    assert_abs_diff_eq!(harmonic(6), 2.45, epsilon = 1e-12);
}

#[test]
fn taylor_limits() {
    // at f = 1 the order-t series equals N_t and the weight equals t
    for t in 1..=6 {
        let (l, g) = tbce_loss(1.0, false, order(t));
        assert_abs_diff_eq!(l, harmonic(t), epsilon = 1e-15);
        assert_eq!(g, t as f64);
    }
    assert_eq!(tbce_loss(0.0, false, order(3)), (0.0, 1.0));
}
