//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wildpu::heads::multi_pu_risk;
use wildpu::losses::{ce_loss, kl_align, PuLoss, TaylorOrder};
use wildpu::numerics::{Network, Tensor2};

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LossCase {
    Ce,
    Bce,
    Tbce(u32),
    WBce,
    WTbce(u32),
    Kl,
}

impl LossCase {
    /// Every loss family, cycling the Taylor order.
    pub fn for_index(i: usize) -> Self {
        let t = (i / 6 % 6) as u32 + 1;
        match i % 6 {
            0 => LossCase::Ce,
            1 => LossCase::Bce,
            2 => LossCase::Tbce(t),
            3 => LossCase::WBce,
            4 => LossCase::WTbce(t),
            _ => LossCase::Kl,
        }
    }
}

/// A random small network with a labeled and a wild batch.
pub struct FdProblem {
    pub net: Network,
    pub known: Tensor2,
    pub labels: Vec<usize>,
    pub wild: Tensor2,
    pub weights: Tensor2,
    pub target: Tensor2,
    pub case: LossCase,
    /// Scales the analytic upstream gradient; 1 except in the checker's self-test.
    pub grad_scale: f64,
}

impl FdProblem {
    pub fn random(seed: u64, case: LossCase) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d_in = rng.random_range(1..=8);
        let depth = rng.random_range(0..=2);
        let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=16)).collect();
        let n_classes = rng.random_range(2..=4);
        let n_heads = if rng.random_bool(0.5) { n_classes } else { 1 };
        let net = Network::new(d_in, &hidden, n_classes, n_heads, &mut rng).unwrap();
        let n_known = rng.random_range(1..=4);
        let n_wild = rng.random_range(1..=4);
        let mut mat = |r: usize, c: usize, lo: f64, hi: f64| {
            let v = (0..r * c).map(|_| rng.random_range(lo..hi)).collect();
            Tensor2::from_vec(r, c, v).unwrap()
        };
        let known = mat(n_known, d_in, -1.0, 1.0);
        let wild = mat(n_wild, d_in, -1.0, 1.0);
        let weights = mat(n_wild, n_heads, 0.0, 1.0);
        let target = mat(n_wild, n_heads, 0.05, 0.95);
        let labels = (0..n_known).map(|_| rng.random_range(1..=n_classes)).collect();
        FdProblem {
            net,
            known,
            labels,
            wild,
            weights,
            target,
            case,
            grad_scale: 1.0,
        }
    }

    /// Objective and its gradients w.r.t. the stacked `[known; wild]` outputs.
    fn objective(&self, net: &Network, want_grad: bool) -> (f64, Option<(Tensor2, Tensor2, wildpu::numerics::ActivationCache)>) {
        let batch = self.known.vstack(&self.wild).unwrap();
        let out = net.forward(&batch).unwrap();
        let nk = self.known.rows();
        let n = batch.rows();
        let mut dq = Tensor2::zeros(n, out.q_probs.cols());
        let mut dpu = Tensor2::zeros(n, out.pu_probs.cols());
        let known_rows: Vec<usize> = (0..nk).collect();
        let wild_rows: Vec<usize> = (nk..n).collect();
        let pu_k = out.pu_probs.select_rows(&known_rows);
        let pu_w = out.pu_probs.select_rows(&wild_rows);
        let pu = |loss: PuLoss, weights: Option<&Tensor2>, dpu: &mut Tensor2| {
            let r = multi_pu_risk(&pu_k, &self.labels, &pu_w, loss, weights).unwrap();
            *dpu = r.grad_known.vstack(&r.grad_wild).unwrap();
            r.risk
        };
        let loss = match self.case {
            LossCase::Ce => {
                let mut total = 0.0;
                for (r, &y) in self.labels.iter().enumerate() {
                    let (l, g) = ce_loss(out.q_probs.row(r), y).unwrap();
                    total += l / nk as f64;
                    for (d, gv) in dq.row_mut(r).iter_mut().zip(g) {
                        *d = gv / nk as f64;
                    }
                }
                total
            }
            LossCase::Bce => pu(PuLoss::Bce, None, &mut dpu),
            LossCase::Tbce(t) => pu(PuLoss::Tbce(TaylorOrder::new(t).unwrap()), None, &mut dpu),
            LossCase::WBce => pu(PuLoss::Bce, Some(&self.weights), &mut dpu),
            LossCase::WTbce(t) => pu(
                PuLoss::Tbce(TaylorOrder::new(t).unwrap()),
                Some(&self.weights),
                &mut dpu,
            ),
            LossCase::Kl => {
                let kl = kl_align(&pu_w, &self.target).unwrap();
                for (j, &r) in wild_rows.iter().enumerate() {
                    dpu.row_mut(r).copy_from_slice(kl.grad_p.row(j));
                }
                kl.loss
            }
        };
        (loss, want_grad.then_some((dq, dpu, out.cache)))
    }

    /// Largest error of analytic vs central-difference gradients, measured
    /// as a multiple of the allowed tolerance (≤ 1 passes).
    pub fn worst_error_ratio(&self) -> f64 {
        let (_, g) = self.objective(&self.net, true);
        let (mut dq, mut dpu, cache) = g.unwrap();
        dq.data_mut().iter_mut().chain(dpu.data_mut()).for_each(|v| *v *= self.grad_scale);
        let grads = self.net.backward(&cache, &dq, &dpu).unwrap();
        let analytic: Vec<f64> = grads.tensors().iter().flat_map(|t| t.iter().copied()).collect();
        let mut worst: f64 = 0.0;
        let mut k = 0;
        let n_tensors = self.net.params.tensors().len();
        for ti in 0..n_tensors {
            let len = self.net.params.tensors()[ti].len();
            for j in 0..len {
                let mut plus = self.net.clone();
                plus.params.tensors_mut()[ti][j] += FD_STEP;
                let mut minus = self.net.clone();
                minus.params.tensors_mut()[ti][j] -= FD_STEP;
                let numeric = (self.objective(&plus, false).0 - self.objective(&minus, false).0)
                    / (2.0 * FD_STEP);
                let a = analytic[k];
                let diff = (a - numeric).abs();
                let allowed = (FD_REL_TOL * a.abs().max(numeric.abs())).max(FD_ABS_FLOOR);
                let ratio = diff / allowed;
                worst = worst.max(ratio);
                k += 1;
            }
        }
        worst
    }
}
