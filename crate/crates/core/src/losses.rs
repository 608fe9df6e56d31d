//! Scalar losses and their derivatives with respect to the predicted
//! probability. Chaining through softmax/sigmoid is left to the network.
//!
//! Confidence weights (`w_c`, `w_e`) are plain inputs: no derivative is
//! produced for them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tensor2, PROB_EPS};

fn clamp(f: f64) -> f64 {
    f.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Partial harmonic sum `Σ_{o=1..t} 1/o`, the upper bound of the truncated
/// negative-branch loss.
pub fn harmonic(t: u32) -> f64 {
    (1..=t).map(|o| 1.0 / o as f64).sum()
}

/// Truncation order of the Taylor-expanded negative branch (`t ≥ 1`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaylorOrder(u32);

impl TaylorOrder {
    pub fn new(t: u32) -> Result<Self> {
        if t == 0 {
            return Err(Error::Usage("Taylor order must be at least 1".into()));
        }
        Ok(TaylorOrder(t))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub taylor_order: TaylorOrder,
    pub beta: f64,
    /// `harmonic(taylor_order)`, fixed at construction.
    pub n_t: f64,
}

impl LossConfig {
    pub fn new(taylor_order: u32, beta: f64) -> Result<Self> {
        let t = TaylorOrder::new(taylor_order)?;
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::Config(format!("beta must be finite and >= 0, got {beta}")));
        }
        Ok(LossConfig {
            taylor_order: t,
            beta,
            n_t: harmonic(taylor_order),
        })
    }
}

/// Cross entropy for a 1-based `label`; returns the loss and `∂loss/∂q`.
pub fn ce_loss(q_probs: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label == 0 || label > q_probs.len() {
        return Err(Error::Usage(format!(
            "label {label} outside 1..={}",
            q_probs.len()
        )));
    }
    let p = clamp(q_probs[label - 1]);
    let mut grad = vec![0.0; q_probs.len()];
    grad[label - 1] = -1.0 / p;
    Ok((-p.ln(), grad))
}

pub fn bce_loss(f: f64, positive: bool) -> (f64, f64) {
    let f = clamp(f);
    if positive {
        (-f.ln(), -1.0 / f)
    } else {
        (-(1.0 - f).ln(), 1.0 / (1.0 - f))
    }
}

/// Negative branch of the truncated loss: `Σ f^o/o` and its derivative
/// `Σ f^(o-1) = (1 - f^t)/(1 - f)`.
fn taylor_negative(f: f64, t: TaylorOrder) -> (f64, f64) {
    let f = f.clamp(0.0, 1.0);
    let mut loss = 0.0;
    let mut grad = 0.0;
    let mut pow_prev = 1.0; // f^(o-1)
    for o in 1..=t.get() {
        grad += pow_prev;
        let pow = pow_prev * f;
        loss += pow / o as f64;
        pow_prev = pow;
    }
    (loss, grad)
}

pub fn tbce_loss(f: f64, positive: bool, t: TaylorOrder) -> (f64, f64) {
    if positive {
        bce_loss(f, true)
    } else {
        taylor_negative(f, t)
    }
}

fn checked_weight(w: f64) -> f64 {
    if (0.0..=1.0).contains(&w) {
        w
    } else {
        log::warn!("confidence weight {w} outside [0, 1]; clamping");
        if w.is_nan() {
            0.0
        } else {
            w.clamp(0.0, 1.0)
        }
    }
}

/// BCE with the negative branch scaled by `w_e`.
pub fn wbce_loss(f: f64, positive: bool, w_e: f64) -> (f64, f64) {
    let (l, g) = bce_loss(f, positive);
    if positive {
        (l, g)
    } else {
        let w = checked_weight(w_e);
        (w * l, w * g)
    }
}

/// Truncated BCE with the negative branch scaled by `w_c`.
pub fn wtbce_loss(f: f64, positive: bool, w_c: f64, t: TaylorOrder) -> (f64, f64) {
    let (l, g) = tbce_loss(f, positive, t);
    if positive {
        (l, g)
    } else {
        let w = checked_weight(w_c);
        (w * l, w * g)
    }
}

/// Loss applied by one PU branch; the weight scales the negative branch only.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum PuLoss {
    Bce,
    Tbce(TaylorOrder),
}

impl PuLoss {
    pub fn eval(self, f: f64, positive: bool, weight: f64) -> (f64, f64) {
        match self {
            PuLoss::Bce => wbce_loss(f, positive, weight),
            PuLoss::Tbce(t) => wtbce_loss(f, positive, weight, t),
        }
    }
}

fn kl_bernoulli(a: f64, b: f64) -> f64 {
    a * (a / b).ln() + (1.0 - a) * ((1.0 - a) / (1.0 - b)).ln()
}

/// `½[KL(p‖q) + KL(q‖p)]` for Bernoulli `p = (a, 1-a)`, `q = (b, 1-b)`.
/// Returns the value and the partial derivatives in `a` and `b`.
pub fn sym_kl_bernoulli(a: f64, b: f64) -> (f64, f64, f64) {
    let (a, b) = (clamp(a), clamp(b));
    let loss = 0.5 * (kl_bernoulli(a, b) + kl_bernoulli(b, a));
    let log_odds = (a / b).ln() - ((1.0 - a) / (1.0 - b)).ln();
    let da = 0.5 * (log_odds - b / a + (1.0 - b) / (1.0 - a));
    let db = 0.5 * (-log_odds - a / b + (1.0 - a) / (1.0 - b));
    (loss, da, db)
}

#[derive(Clone, Debug)]
pub struct KlAlign {
    pub loss: f64,
    pub grad_p: Tensor2,
    pub grad_q: Tensor2,
}

/// Symmetric Bernoulli KL between two banks of PU-head outputs, averaged
/// over every (sample, head) entry.
pub fn kl_align(p: &Tensor2, q: &Tensor2) -> Result<KlAlign> {
    if p.shape() != q.shape() {
        return Err(Error::Shape(format!(
            "KL operands {:?} and {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let count = p.data().len();
    let mut grad_p = Tensor2::zeros(p.rows(), p.cols());
    let mut grad_q = Tensor2::zeros(p.rows(), p.cols());
    if count == 0 {
        return Ok(KlAlign {
            loss: 0.0,
            grad_p,
            grad_q,
        });
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for (i, (&a, &b)) in p.data().iter().zip(q.data()).enumerate() {
        let (l, da, db) = sym_kl_bernoulli(a, b);
        loss += l;
        grad_p.data_mut()[i] = da * scale;
        grad_q.data_mut()[i] = db * scale;
    }
    Ok(KlAlign {
        loss: loss * scale,
        grad_p,
        grad_q,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;

    fn t(o: u32) -> TaylorOrder {
        TaylorOrder::new(o).unwrap()
    }

    #[test]
    fn harmonic_values() {
        assert_eq!(harmonic(1), 1.0);
        assert_abs_diff_eq!(harmonic(3), 11.0 / 6.0, epsilon = 1e-15);
        assert_eq!(LossConfig::new(2, 1.0).unwrap().n_t, 1.5);
        assert!(LossConfig::new(0, 1.0).is_err());
        assert!(LossConfig::new(2, -1.0).is_err());
    }

    #[test]
    fn ce_examples() {
        let (l, _) = ce_loss(&[1.0, 0.0, 0.0], 1).unwrap();
        assert!(l < 1e-6);
        let (l, _) = ce_loss(&[0.25; 4], 3).unwrap();
        assert_abs_diff_eq!(l, 4f64.ln(), epsilon = 1e-15);
        let (l, g) = ce_loss(&[0.7, 0.3], 2).unwrap();
        assert_abs_diff_eq!(l, 1.203_972_804_325_936, epsilon = 1e-12);
        assert_eq!(g[0], 0.0);
        assert_abs_diff_eq!(g[1], -1.0 / 0.3, epsilon = 1e-12);
        assert!(matches!(ce_loss(&[0.5, 0.5], 0), Err(Error::Usage(_))));
        assert!(matches!(ce_loss(&[0.5, 0.5], 3), Err(Error::Usage(_))));
    }

    #[test]
    fn bce_examples() {
        let (l, g) = bce_loss(0.5, true);
        assert_abs_diff_eq!(l, 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(g, -2.0, epsilon = 1e-15);
        let (_, g) = bce_loss(0.9, false);
        assert_abs_diff_eq!(g, 10.0, epsilon = 1e-12);
        let (l, _) = bce_loss(0.2, false);
        assert_abs_diff_eq!(l, 0.223_143_551_314_209_7, epsilon = 1e-12);
        let (l, g) = bce_loss(0.0, true);
        assert!(l.is_finite() && g.is_finite());
    }

    #[test]
    fn tbce_examples() {
        assert_eq!(tbce_loss(0.0, false, t(3)).0, 0.0);
        let (_, g) = tbce_loss(0.9, false, t(2));
        assert_abs_diff_eq!(g, 1.9, epsilon = 1e-15);
        let (l, _) = tbce_loss(0.5, false, t(2));
        assert_abs_diff_eq!(l, 0.625, epsilon = 1e-15);
        for i in 0..=1000 {
            let f = i as f64 / 1000.0;
            let (l, _) = tbce_loss(f, false, t(3));
            assert!((0.0..=11.0 / 6.0 + 1e-15).contains(&l));
        }
        let (l, g) = tbce_loss(0.25, true, t(4));
        assert_abs_diff_eq!(l, -(0.25f64).ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(g, -4.0, epsilon = 1e-12);
    }

    #[test]
    fn weighted_examples() {
        for &f in &[0.1, 0.5, 0.9] {
            for y in [false, true] {
                assert_eq!(wbce_loss(f, y, 1.0), bce_loss(f, y));
                assert_eq!(wtbce_loss(f, y, 1.0, t(2)), tbce_loss(f, y, t(2)));
            }
        }
        assert_eq!(wbce_loss(0.7, false, 0.0), (0.0, 0.0));
        assert_abs_diff_eq!(wbce_loss(0.9, false, 0.5).1, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(wtbce_loss(0.5, false, 0.5, t(2)).0, 0.3125, epsilon = 1e-15);
        for w in [0.0, 0.3, 1.0] {
            assert_eq!(wtbce_loss(0.4, true, w, t(2)).0, -(0.4f64).ln());
        }
        // out-of-range weights are clamped
        assert_eq!(wbce_loss(0.9, false, 1.5), bce_loss(0.9, false));
        assert_eq!(wbce_loss(0.9, false, -0.5), (0.0, 0.0));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(sym_kl_bernoulli(0.3, 0.3).0, 0.0);
        let (l, _, _) = sym_kl_bernoulli(0.9, 0.1);
        assert_abs_diff_eq!(l, 0.8 * 9f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 1.7578, epsilon = 1e-4);
        let p = Tensor2::from_vec(2, 2, vec![0.9, 0.2, 0.4, 0.6]).unwrap();
        let r = kl_align(&p, &p).unwrap();
        assert_eq!(r.loss, 0.0);
        assert!(r.grad_p.data().iter().all(|&g| g.abs() < 1e-15));
        assert!(kl_align(&p, &Tensor2::zeros(1, 2)).is_err());
    }

    #[test]
    fn pu_loss_dispatch() {
        assert_eq!(PuLoss::Bce.eval(0.3, false, 0.5), wbce_loss(0.3, false, 0.5));
        assert_eq!(
            PuLoss::Tbce(t(3)).eval(0.3, false, 0.5),
            wtbce_loss(0.3, false, 0.5, t(3))
        );
    }
}
