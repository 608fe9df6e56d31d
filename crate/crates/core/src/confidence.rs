//! Per-(wild sample, head) confidence weights updated by an exponential
//! moving average. The two weights are cross-coupled: `w_c` follows the
//! probabilities of the expansion-side network and `w_e` those of the
//! contraction-side network.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

pub const DEFAULT_ALPHA: f64 = 0.9;
pub const DEFAULT_TAU: f64 = 0.95;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateMode {
    /// `w ← αw + (1-α)p`
    Continuous,
    /// `w ← αw + (1-α)·1[p ≥ τ]`
    Discrete,
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateMode::Continuous => "continuous",
            UpdateMode::Discrete => "discrete",
        })
    }
}

impl FromStr for UpdateMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "continuous" => Ok(UpdateMode::Continuous),
            "discrete" => Ok(UpdateMode::Discrete),
            other => Err(Error::Config(format!("unknown update mode '{other}'"))),
        }
    }
}

/// Update modes for `(w_c, w_e)`: continuous for the contraction weight,
/// discrete for the expansion weight.
pub fn default_modes() -> (UpdateMode, UpdateMode) {
    (UpdateMode::Continuous, UpdateMode::Discrete)
}

/// One EMA step for a single weight.
pub fn ema_step(w: f64, p: f64, alpha: f64, mode: UpdateMode, tau: f64) -> f64 {
    let target = match mode {
        UpdateMode::Continuous => p,
        UpdateMode::Discrete => {
            if p >= tau {
                1.0
            } else {
                0.0
            }
        }
    };
    (w + (1.0 - alpha) * (target - w)).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceState {
    w_c: Tensor2,
    w_e: Tensor2,
    pub alpha: f64,
    pub tau: f64,
    pub mode_c: UpdateMode,
    pub mode_e: UpdateMode,
}

impl ConfidenceState {
    /// All weights start at 1.
    pub fn new(
        n_wild: usize,
        n_heads: usize,
        alpha: f64,
        tau: f64,
        mode_c: UpdateMode,
        mode_e: UpdateMode,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1), got {alpha}")));
        }
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0, 1), got {tau}")));
        }
        Ok(ConfidenceState {
            w_c: Tensor2::filled(n_wild, n_heads, 1.0),
            w_e: Tensor2::filled(n_wild, n_heads, 1.0),
            alpha,
            tau,
            mode_c,
            mode_e,
        })
    }

    pub fn n_wild(&self) -> usize {
        self.w_c.rows()
    }

    pub fn n_heads(&self) -> usize {
        self.w_c.cols()
    }

    /// Weights used by the truncated loss, `n_wild × heads`.
    pub fn w_c(&self) -> &Tensor2 {
        &self.w_c
    }

    /// Weights used by the weighted BCE loss, `n_wild × heads`.
    pub fn w_e(&self) -> &Tensor2 {
        &self.w_e
    }

    /// Update one wild sample. `p_c` comes from the contraction-side network
    /// and drives `w_e`; `p_e` comes from the expansion side and drives `w_c`.
    pub fn update(&mut self, sample_idx: usize, p_c: &[f64], p_e: &[f64]) -> Result<()> {
        if sample_idx >= self.n_wild() {
            return Err(Error::Usage(format!(
                "wild index {sample_idx} outside 0..{}",
                self.n_wild()
            )));
        }
        let h = self.n_heads();
        if p_c.len() != h || p_e.len() != h {
            return Err(Error::Shape(format!(
                "confidence update with {}/{} probabilities for {h} heads",
                p_c.len(),
                p_e.len()
            )));
        }
        if p_c.iter().chain(p_e).any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("confidence probabilities must lie in [0, 1]".into()));
        }
        let (alpha, tau) = (self.alpha, self.tau);
        for (w, &p) in self.w_c.row_mut(sample_idx).iter_mut().zip(p_e) {
            *w = ema_step(*w, p, alpha, self.mode_c, tau);
        }
        for (w, &p) in self.w_e.row_mut(sample_idx).iter_mut().zip(p_c) {
            *w = ema_step(*w, p, alpha, self.mode_e, tau);
        }
        Ok(())
    }

    /// Update every wild sample from full `n_wild × heads` probability tables.
    pub fn update_all(&mut self, p_c: &Tensor2, p_e: &Tensor2) -> Result<()> {
        if p_c.shape() != self.w_c.shape() || p_e.shape() != self.w_c.shape() {
            return Err(Error::Shape(format!(
                "confidence tables {:?}/{:?}, state {:?}",
                p_c.shape(),
                p_e.shape(),
                self.w_c.shape()
            )));
        }
        for i in 0..self.n_wild() {
            self.update(i, p_c.row(i), p_e.row(i))?;
        }
        Ok(())
    }
}
