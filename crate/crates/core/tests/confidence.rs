use proptest::prelude::*;
use wildpu::confidence::{ema_step, ConfidenceState, UpdateMode};
use wildpu::numerics::Tensor2;

proptest! {
    #[test]
    fn continuous_ema_closed_form(p in 0.0f64..=1.0, alpha in 0.0f64..0.999, k in 0usize..=50) {
        let mut w = 1.0;
        for _ in 0..k {
            w = ema_step(w, p, alpha, UpdateMode::Continuous, 0.95);
        }
        let closed = alpha.powi(k as i32) * (1.0 - p) + p;
        prop_assert!((w - closed).abs() <= 1e-12);
    }

    #[test]
    fn discrete_ema_tracks_the_indicator(p in 0.0f64..=1.0, tau in 0.01f64..0.99, k in 0usize..=50) {
        let mut w = 1.0;
        for _ in 0..k {
            w = ema_step(w, p, 0.9, UpdateMode::Discrete, tau);
        }
        let target = if p >= tau { 1.0 } else { 0.0 };
        let closed = 0.9f64.powi(k as i32) * (1.0 - target) + target;
        prop_assert!((w - closed).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&w));
    }
}

#[test]
fn cross_coupling() {
    let mut s = ConfidenceState::new(2, 1, 0.5, 0.95, UpdateMode::Continuous, UpdateMode::Continuous)
        .unwrap();
    let p_c = Tensor2::from_vec(2, 1, vec![0.2, 0.4]).unwrap();
    let p_e = Tensor2::from_vec(2, 1, vec![0.6, 0.8]).unwrap();
    s.update_all(&p_c, &p_e).unwrap();
    // w_c follows the expansion side, w_e the contraction side
    assert_eq!(s.w_c().data(), &[0.8, 0.9]);
    assert_eq!(s.w_e().data(), &[0.6, 0.7]);
}
