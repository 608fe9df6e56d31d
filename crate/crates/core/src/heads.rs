//! Per-class PU heads: risk assembly, OR decision rule, fusion with the
//! closed-set head, and the confidence probabilities fed to the EMA weights.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::PuLoss;
use crate::numerics::Tensor2;

/// Label used for rejected samples. Known classes are `1..=C`.
pub const UNKNOWN: usize = 0;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpenSetPrediction {
    /// Closed-set decision, `argmax q` (1-based).
    pub known_label: usize,
    pub is_known: bool,
    /// `known_label` when accepted, [`UNKNOWN`] otherwise.
    pub final_label: usize,
    pub per_head_probs: Vec<f64>,
    pub q_probs: Vec<f64>,
}

impl OpenSetPrediction {
    pub fn new(q_probs: &[f64], per_head_probs: &[f64], threshold: f64) -> Self {
        let is_known = or_aggregate(per_head_probs, threshold);
        let (known_label, final_label) = fuse(q_probs, is_known);
        OpenSetPrediction {
            known_label,
            is_known,
            final_label,
            per_head_probs: per_head_probs.to_vec(),
            q_probs: q_probs.to_vec(),
        }
    }
}

/// True when any head reaches `threshold` (inclusive).
pub fn or_aggregate(per_head_probs: &[f64], threshold: f64) -> bool {
    per_head_probs.iter().any(|&p| p >= threshold)
}

/// 1-based argmax, ties resolved toward the lowest class index.
pub fn argmax(q_probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in q_probs.iter().enumerate() {
        if p > q_probs[best] {
            best = i;
        }
    }
    best + 1
}

/// Returns `(known_label, final_label)`.
pub fn fuse(q_probs: &[f64], is_known: bool) -> (usize, usize) {
    let known = argmax(q_probs);
    (known, if is_known { known } else { UNKNOWN })
}

/// How per-head "unknownness" probabilities are formed for the EMA update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mixing {
    /// `1 - f^c`
    Pro,
    /// `1 - q^c · f^c`
    MixPro,
}

/// Per-head unknownness probabilities. With a single PU head the MixPro
/// product uses the largest class probability.
pub fn confidence_probs(mode: Mixing, q_probs: &[f64], pu_probs: &[f64]) -> Vec<f64> {
    match mode {
        Mixing::Pro => pu_probs.iter().map(|&f| (1.0 - f).clamp(0.0, 1.0)).collect(),
        Mixing::MixPro => {
            if pu_probs.len() == q_probs.len() {
                q_probs
                    .iter()
                    .zip(pu_probs)
                    .map(|(&q, &f)| (1.0 - q * f).clamp(0.0, 1.0))
                    .collect()
            } else {
                let qmax = q_probs.iter().copied().fold(0.0, f64::max);
                pu_probs.iter().map(|&f| (1.0 - qmax * f).clamp(0.0, 1.0)).collect()
            }
        }
    }
}

/// Value and probability-space gradients of the multi-head PU risk.
#[derive(Clone, Debug)]
pub struct PuRisk {
    pub risk: f64,
    /// `∂risk/∂f` for the labeled rows.
    pub grad_known: Tensor2,
    /// `∂risk/∂f` for the wild rows.
    pub grad_wild: Tensor2,
    /// Heads whose positive term was skipped for lack of labeled samples.
    pub skipped_heads: Vec<usize>,
}

/// Head that treats a labeled sample of class `label` as positive.
fn head_for(label: usize, n_heads: usize) -> usize {
    if n_heads == 1 {
        0
    } else {
        label - 1
    }
}

/// `Σ_h ½[ mean_{labeled x of head h} L(f^h(x), 1) + mean_{wild x} L(f^h(x), 0; w) ]`.
///
/// With `H = C` heads, head `c` takes class-`c` samples as positives; with a
/// single head every labeled sample is positive. `wild_weights` (shape of
/// `pu_wild`) scales the negative branch; `None` means weight 1.
pub fn multi_pu_risk(
    pu_known: &Tensor2,
    known_labels: &[usize],
    pu_wild: &Tensor2,
    loss: PuLoss,
    wild_weights: Option<&Tensor2>,
) -> Result<PuRisk> {
    let h = pu_known.cols();
    if pu_wild.cols() != h || known_labels.len() != pu_known.rows() {
        return Err(Error::Shape(format!(
            "known {:?} with {} labels vs wild {:?}",
            pu_known.shape(),
            known_labels.len(),
            pu_wild.shape()
        )));
    }
    if let Some(w) = wild_weights {
        if w.shape() != pu_wild.shape() {
            return Err(Error::Shape("wild weights do not match wild outputs".into()));
        }
    }
    if pu_wild.rows() == 0 {
        return Err(Error::Input("wild batch is empty".into()));
    }
    if let Some(&bad) = known_labels
        .iter()
        .find(|&&y| y == UNKNOWN || (h > 1 && y > h))
    {
        return Err(Error::Usage(format!("labeled sample with class {bad} for {h} heads")));
    }

    let mut counts = vec![0usize; h];
    for &y in known_labels {
        counts[head_for(y, h)] += 1;
    }
    let mut grad_known = Tensor2::zeros(pu_known.rows(), h);
    let mut pos_sums = vec![0.0; h];
    for (r, &y) in known_labels.iter().enumerate() {
        let c = head_for(y, h);
        let (l, g) = loss.eval(pu_known.get(r, c), true, 1.0);
        pos_sums[c] += l;
        grad_known.set(r, c, 0.5 * g / counts[c] as f64);
    }

    let n_wild = pu_wild.rows() as f64;
    let mut grad_wild = Tensor2::zeros(pu_wild.rows(), h);
    let mut neg_sums = vec![0.0; h];
    for r in 0..pu_wild.rows() {
        for c in 0..h {
            let w = wild_weights.map_or(1.0, |w| w.get(r, c));
            let (l, g) = loss.eval(pu_wild.get(r, c), false, w);
            neg_sums[c] += l;
            grad_wild.set(r, c, 0.5 * g / n_wild);
        }
    }

    let mut risk = 0.0;
    let mut skipped_heads = Vec::new();
    for c in 0..h {
        let pos = if counts[c] > 0 {
            pos_sums[c] / counts[c] as f64
        } else {
            log::warn!("PU head {} has no labeled samples in this batch", c + 1);
            skipped_heads.push(c);
            0.0
        };
        risk += 0.5 * (pos + neg_sums[c] / n_wild);
    }
    Ok(PuRisk {
        risk,
        grad_known,
        grad_wild,
        skipped_heads,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_abs_diff_eq;

    use super::*;
    use crate::losses::{bce_loss, TaylorOrder};

    #[test]
    fn or_rule() {
        assert!(or_aggregate(&[0.1, 0.96], 0.5));
        assert!(!or_aggregate(&[0.1, 0.49], 0.5));
        assert!(or_aggregate(&[0.5], 0.5));
    }

    #[test]
    fn fuse_rule() {
        assert_eq!(fuse(&[0.2, 0.8], true), (2, 2));
        assert_eq!(fuse(&[0.2, 0.8], false).1, UNKNOWN);
        assert_eq!(fuse(&[0.5, 0.5], true), (1, 1));
        let p = OpenSetPrediction::new(&[0.1, 0.3, 0.6], &[0.01, 0.2, 0.01], 0.5);
        assert_eq!((p.known_label, p.is_known, p.final_label), (3, false, UNKNOWN));
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence_probs(Mixing::Pro, &[0.5, 0.5], &[1.0, 0.0]), vec![0.0, 1.0]);
        assert_eq!(
            confidence_probs(Mixing::MixPro, &[1.0, 0.0], &[1.0, 1.0]),
            vec![0.0, 1.0]
        );
        let p = confidence_probs(Mixing::MixPro, &[0.6, 0.4], &[0.9, 0.2]);
        assert_abs_diff_eq!(p[0], 0.46, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1], 0.92, epsilon = 1e-15);
    }

    #[test]
    fn constant_half_classifier_risk_is_c_log2() {
        let c = 3;
        let known = Tensor2::filled(6, c, 0.5);
        let wild = Tensor2::filled(5, c, 0.5);
        let r = multi_pu_risk(&known, &[1, 2, 3, 1, 2, 3], &wild, PuLoss::Bce, None).unwrap();
        assert_abs_diff_eq!(r.risk, c as f64 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn single_head_reduces_to_plain_pu_risk() {
        let known = Tensor2::from_vec(3, 1, vec![0.9, 0.6, 0.7]).unwrap();
        let wild = Tensor2::from_vec(2, 1, vec![0.2, 0.8]).unwrap();
        let r = multi_pu_risk(&known, &[1, 2, 2], &wild, PuLoss::Bce, None).unwrap();
        let pos = (bce_loss(0.9, true).0 + bce_loss(0.6, true).0 + bce_loss(0.7, true).0) / 3.0;
        let neg = (bce_loss(0.2, false).0 + bce_loss(0.8, false).0) / 2.0;
        assert_abs_diff_eq!(r.risk, 0.5 * (pos + neg), epsilon = 1e-14);
    }

    #[test]
    fn missing_class_skips_positive_term() {
        let known = Tensor2::filled(2, 2, 0.5);
        let wild = Tensor2::filled(2, 2, 0.5);
        let r = multi_pu_risk(
            &known,
            &[1, 1],
            &wild,
            PuLoss::Tbce(TaylorOrder::new(2).unwrap()),
            None,
        )
        .unwrap();
        assert_eq!(r.skipped_heads, vec![1]);
        assert!(r.grad_known.row(0)[1] == 0.0);
    }

    #[test]
    fn bad_inputs() {
        let k = Tensor2::filled(2, 2, 0.5);
        let w = Tensor2::filled(2, 2, 0.5);
        assert!(multi_pu_risk(&k, &[1, 3], &w, PuLoss::Bce, None).is_err());
        assert!(multi_pu_risk(&k, &[1, 0], &w, PuLoss::Bce, None).is_err());
        assert!(multi_pu_risk(&k, &[1], &w, PuLoss::Bce, None).is_err());
        assert!(multi_pu_risk(&k, &[1, 2], &Tensor2::zeros(0, 2), PuLoss::Bce, None).is_err());
    }
}
