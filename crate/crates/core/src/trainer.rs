//! Cooperative training of the contraction-side network (`net_c`,
//! truncated loss) and the expansion-side network (`net_e`, weighted BCE),
//! coupled through the confidence weights and a symmetric KL term.
//!
//! Per step the objective is
//! `R_all = [R_k(q_c) + R_mpu(f_c)] + [R_k(q_e) + R_mpu(f_e)] + β·R_kl(f_c, f_e)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::confidence::ConfidenceState;
use crate::config::{Deploy, PuLossKind, TrainConfig};
use crate::data::{LabeledSet, MinMax};
use crate::error::{Error, Result};
use crate::heads::{confidence_probs, multi_pu_risk, OpenSetPrediction};
use crate::losses::{ce_loss, kl_align, PuLoss, TaylorOrder};
use crate::numerics::{cosine_lr, Network, Sgd, Tensor2};

const NET_C_STREAM: u64 = 100;
const NET_E_STREAM: u64 = 101;
const EPOCH_STREAM_BASE: u64 = 1_000;

/// Mean risk terms over the steps of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub r_k_c: f64,
    pub r_mpu_c: f64,
    pub r_k_e: f64,
    pub r_mpu_e: f64,
    pub r_kl: f64,
    pub r_all: f64,
}

impl EpochRecord {
    pub fn total(r_k_c: f64, r_mpu_c: f64, r_k_e: f64, r_mpu_e: f64, r_kl: f64, beta: f64) -> f64 {
        r_k_c + r_mpu_c + r_k_e + r_mpu_e + beta * r_kl
    }
}

pub const HISTORY_HEADER: &str = "epoch,lr,R_k_c,R_mpu_c,R_k_e,R_mpu_e,R_kl,R_all";

pub fn write_history(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.r_k_c, r.r_mpu_c, r.r_k_e, r.r_mpu_e, r.r_kl, r.r_all
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub net_c: Network,
    pub net_e: Option<Network>,
    pub opt_c: Sgd,
    pub opt_e: Option<Sgd>,
    pub confidence: ConfidenceState,
    /// Number of completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    labeled: &'a LabeledSet,
    wild: &'a Tensor2,
    n_classes: usize,
    by_class: Vec<Vec<usize>>,
    state: TrainState,
}

struct BranchOut {
    r_k: f64,
    r_mpu: f64,
    dq: Tensor2,
    dpu: Tensor2,
}

impl<'a> Trainer<'a> {
    /// `wild` is spectra only; hidden labels never reach the trainer.
    pub fn new(cfg: TrainConfig, labeled: &'a LabeledSet, wild: &'a Tensor2) -> Result<Self> {
        cfg.validate()?;
        let n_classes = labeled.n_classes();
        let by_class = Self::check_inputs(labeled, wild, n_classes)?;
        let n_heads = if cfg.multi_pu { n_classes } else { 1 };
        let d_in = labeled.x.cols();

        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(NET_C_STREAM);
        let net_c = Network::new(d_in, &cfg.hidden, n_classes, n_heads, &mut rng)?;
        let net_e = if cfg.two_networks() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(NET_E_STREAM);
            Some(Network::new(d_in, &cfg.hidden, n_classes, n_heads, &mut rng)?)
        } else {
            None
        };
        let opt_c = Sgd::new(cfg.momentum, cfg.weight_decay)?;
        let opt_e = net_e
            .as_ref()
            .map(|_| Sgd::new(cfg.momentum, cfg.weight_decay))
            .transpose()?;
        let confidence = ConfidenceState::new(
            wild.rows(),
            n_heads,
            cfg.alpha,
            cfg.tau,
            cfg.update_c,
            cfg.update_e,
        )?;
        Ok(Trainer {
            cfg,
            labeled,
            wild,
            n_classes,
            by_class,
            state: TrainState {
                net_c,
                net_e,
                opt_c,
                opt_e,
                confidence,
                epoch: 0,
                history: Vec::new(),
            },
        })
    }

    /// Continue from a checkpoint taken on the same data.
    pub fn resume(ckpt: Checkpoint, labeled: &'a LabeledSet, wild: &'a Tensor2) -> Result<Self> {
        ckpt.config.validate()?;
        let n_classes = labeled.n_classes();
        let by_class = Self::check_inputs(labeled, wild, n_classes)?;
        if ckpt.state.confidence.n_wild() != wild.rows()
            || ckpt.state.net_c.d_in() != labeled.x.cols()
            || ckpt.state.net_c.n_classes() != n_classes
        {
            return Err(Error::Checkpoint("checkpoint does not match the supplied data".into()));
        }
        Ok(Trainer {
            cfg: ckpt.config,
            labeled,
            wild,
            n_classes,
            by_class,
            state: ckpt.state,
        })
    }

    fn check_inputs(labeled: &LabeledSet, wild: &Tensor2, n_classes: usize) -> Result<Vec<Vec<usize>>> {
        if labeled.is_empty() || wild.rows() == 0 {
            return Err(Error::Config("labeled and wild sets must be non-empty".into()));
        }
        if wild.cols() != labeled.x.cols() {
            return Err(Error::Shape(format!(
                "labeled data has {} bands, wild data {}",
                labeled.x.cols(),
                wild.cols()
            )));
        }
        let mut by_class = vec![Vec::new(); n_classes];
        for (i, &y) in labeled.labels.iter().enumerate() {
            by_class[y - 1].push(i);
        }
        if let Some(c) = by_class.iter().position(|v| v.is_empty()) {
            return Err(Error::Config(format!("class {} has no labeled samples", c + 1)));
        }
        Ok(by_class)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            state: self.state.clone(),
            normalizer: None,
        }
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    fn pu_loss_c(&self) -> PuLoss {
        match self.cfg.pu_loss {
            PuLossKind::Bce => PuLoss::Bce,
            PuLossKind::Tbce => PuLoss::Tbce(TaylorOrder::new(self.cfg.taylor_order).expect("validated")),
        }
    }

    fn uses_weights(&self) -> bool {
        self.cfg.weighting.mixing().is_some()
    }

    /// Class-balanced labeled batch, drawn with replacement.
    fn labeled_batch(&self, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let per_class = self.cfg.batch_known.div_ceil(self.n_classes).max(1);
        let mut idx = Vec::with_capacity(per_class * self.n_classes);
        for members in &self.by_class {
            for _ in 0..per_class {
                idx.push(members[rng.random_range(0..members.len())]);
            }
        }
        idx
    }

    /// CE on labeled rows plus the PU risk of one branch, with gradients
    /// w.r.t. the stacked `[labeled; wild]` outputs.
    fn branch(
        q: &Tensor2,
        pu: &Tensor2,
        labels: &[usize],
        loss: PuLoss,
        wild_weights: Option<&Tensor2>,
        with_ce: bool,
    ) -> Result<BranchOut> {
        let n_k = labels.len();
        let n = q.rows();
        let h = pu.cols();
        let mut dq = Tensor2::zeros(n, q.cols());
        let mut r_k = 0.0;
        if with_ce {
            for (r, &y) in labels.iter().enumerate() {
                let (l, g) = ce_loss(q.row(r), y)?;
                r_k += l;
                for (d, gv) in dq.row_mut(r).iter_mut().zip(g) {
                    *d = gv / n_k as f64;
                }
            }
            r_k /= n_k as f64;
        }
        let known_rows: Vec<usize> = (0..n_k).collect();
        let wild_rows: Vec<usize> = (n_k..n).collect();
        let pu_known = pu.select_rows(&known_rows);
        let pu_wild = pu.select_rows(&wild_rows);
        let risk = multi_pu_risk(&pu_known, labels, &pu_wild, loss, wild_weights)?;
        let dpu = risk.grad_known.vstack(&risk.grad_wild)?;
        debug_assert_eq!(dpu.shape(), (n, h));
        Ok(BranchOut {
            r_k,
            r_mpu: risk.risk,
            dq,
            dpu,
        })
    }

    fn add_into(dst: &mut Tensor2, src: &Tensor2, scale: f64) {
        for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
            *d += scale * s;
        }
    }

    /// Run one epoch and append its record.
    pub fn run_epoch(&mut self) -> Result<&EpochRecord> {
        if self.is_done() {
            return Err(Error::Usage("training already finished".into()));
        }
        let epoch = self.state.epoch;
        let lr = cosine_lr(epoch, self.cfg.epochs, self.cfg.base_lr)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(EPOCH_STREAM_BASE + epoch as u64);

        let mut order: Vec<usize> = (0..self.wild.rows()).collect();
        order.shuffle(&mut rng);
        let loss_c = self.pu_loss_c();
        let weighted = self.uses_weights();
        let two = self.cfg.two_networks();
        let single_with_e = self.cfg.grad_e && !two;
        let beta = self.cfg.beta;

        let mut sums = [0.0f64; 5];
        let mut steps = 0usize;
        for (b, chunk) in order.chunks(self.cfg.batch_wild).enumerate() {
            let known_idx = self.labeled_batch(&mut rng);
            let labels: Vec<usize> = known_idx.iter().map(|&i| self.labeled.labels[i]).collect();
            let batch = self
                .labeled
                .x
                .select_rows(&known_idx)
                .vstack(&self.wild.select_rows(chunk))?;
            let n_k = known_idx.len();
            let w_c = (weighted && self.cfg.weight_grad_c)
                .then(|| self.state.confidence.w_c().select_rows(chunk));
            let w_e = weighted.then(|| self.state.confidence.w_e().select_rows(chunk));

            let fc = self.state.net_c.forward(&batch)?;
            let mut out_c = Self::branch(&fc.q_probs, &fc.pu_probs, &labels, loss_c, w_c.as_ref(), true)?;
            let (mut r_k_e, mut r_mpu_e, mut r_kl) = (0.0, 0.0, 0.0);

            if single_with_e {
                let e = Self::branch(&fc.q_probs, &fc.pu_probs, &labels, PuLoss::Bce, w_e.as_ref(), false)?;
                r_mpu_e = e.r_mpu;
                Self::add_into(&mut out_c.dpu, &e.dpu, 1.0);
            }

            let mut update_e = None;
            if two {
                let net_e = self.state.net_e.as_ref().expect("two networks");
                let fe = net_e.forward(&batch)?;
                let mut out_e = Self::branch(&fe.q_probs, &fe.pu_probs, &labels, PuLoss::Bce, w_e.as_ref(), true)?;
                r_k_e = out_e.r_k;
                r_mpu_e = out_e.r_mpu;
                if beta > 0.0 {
                    let rows: Vec<usize> = (n_k..batch.rows()).collect();
                    let kl = kl_align(&fc.pu_probs.select_rows(&rows), &fe.pu_probs.select_rows(&rows))?;
                    r_kl = kl.loss;
                    for (j, &r) in rows.iter().enumerate() {
                        for c in 0..kl.grad_p.cols() {
                            let i = r * out_c.dpu.cols() + c;
                            out_c.dpu.data_mut()[i] += beta * kl.grad_p.get(j, c);
                            out_e.dpu.data_mut()[i] += beta * kl.grad_q.get(j, c);
                        }
                    }
                }
                update_e = Some((net_e.backward(&fe.cache, &out_e.dq, &out_e.dpu)?, fe));
            }

            let step = [out_c.r_k, out_c.r_mpu, r_k_e, r_mpu_e, r_kl];
            if step.iter().any(|v| !v.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite risk at epoch {epoch}, batch {b}: {step:?}"
                )));
            }
            let grads_c = self.state.net_c.backward(&fc.cache, &out_c.dq, &out_c.dpu)?;
            self.state
                .opt_c
                .step(&mut self.state.net_c, &grads_c, lr)
                .map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
            if let Some((grads_e, _)) = update_e {
                let net_e = self.state.net_e.as_mut().expect("two networks");
                self.state
                    .opt_e
                    .as_mut()
                    .expect("two networks")
                    .step(net_e, &grads_e, lr)
                    .map_err(|e| Error::Training(format!("epoch {epoch}, batch {b}: {e}")))?;
            }
            for (s, v) in sums.iter_mut().zip(step) {
                *s += v;
            }
            steps += 1;
        }

        if weighted {
            self.refresh_confidence()?;
        }

        let m = sums.map(|s| s / steps as f64);
        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            r_k_c: m[0],
            r_mpu_c: m[1],
            r_k_e: m[2],
            r_mpu_e: m[3],
            r_kl: m[4],
            r_all: EpochRecord::total(m[0], m[1], m[2], m[3], m[4], beta),
        };
        self.state.epoch += 1;
        self.state.history.push(record);
        Ok(self.state.history.last().expect("just pushed"))
    }

    /// End-of-epoch pass over the whole wild set feeding the EMA weights.
    fn refresh_confidence(&mut self) -> Result<()> {
        let mixing = self.cfg.weighting.mixing().expect("weighted");
        let table = |net: &Network| -> Result<Tensor2> {
            let out = net.forward(self.wild)?;
            let rows: Vec<Vec<f64>> = out
                .q_probs
                .iter_rows()
                .zip(out.pu_probs.iter_rows())
                .map(|(q, f)| confidence_probs(mixing, q, f))
                .collect();
            Tensor2::from_rows(&rows)
        };
        let p_c = table(&self.state.net_c)?;
        let p_e = match &self.state.net_e {
            Some(net_e) => table(net_e)?,
            None => p_c.clone(),
        };
        self.state.confidence.update_all(&p_c, &p_e)
    }

    pub fn run(mut self) -> Result<TrainState> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(self.state)
    }
}

/// Train from scratch for `cfg.epochs` epochs.
pub fn train(cfg: &TrainConfig, labeled: &LabeledSet, wild: &Tensor2) -> Result<TrainState> {
    Trainer::new(cfg.clone(), labeled, wild)?.run()
}

/// Open-set predictions for a batch of spectra.
pub fn predict(
    net_c: &Network,
    net_e: Option<&Network>,
    batch: &Tensor2,
    deploy: Deploy,
    threshold: f64,
) -> Result<Vec<OpenSetPrediction>> {
    let (q, pu) = match (deploy, net_e) {
        (Deploy::NetC, _) => {
            let o = net_c.forward(batch)?;
            (o.q_probs, o.pu_probs)
        }
        (Deploy::NetE, Some(e)) => {
            let o = e.forward(batch)?;
            (o.q_probs, o.pu_probs)
        }
        (Deploy::Average, Some(e)) => {
            let a = net_c.forward(batch)?;
            let b = e.forward(batch)?;
            let avg = |x: &Tensor2, y: &Tensor2| {
                let mut z = x.clone();
                for (v, w) in z.data_mut().iter_mut().zip(y.data()) {
                    *v = 0.5 * (*v + w);
                }
                z
            };
            (avg(&a.q_probs, &b.q_probs), avg(&a.pu_probs, &b.pu_probs))
        }
        (mode, None) => {
            return Err(Error::Usage(format!("deploy mode {mode} needs a second network")));
        }
    };
    Ok(q.iter_rows()
        .zip(pu.iter_rows())
        .map(|(q, f)| OpenSetPrediction::new(q, f, threshold))
        .collect())
}

impl TrainState {
    pub fn predict(&self, batch: &Tensor2, cfg: &TrainConfig) -> Result<Vec<OpenSetPrediction>> {
        predict(&self.net_c, self.net_e.as_ref(), batch, cfg.deploy, cfg.threshold)
    }
}

pub const CHECKPOINT_MAGIC: &str = "WILDPU-CHECKPOINT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Networks, optimizer velocities, confidence weights, epoch counter and
/// history, plus the configuration that produced them.
///
/// On disk: a header line `WILDPU-CHECKPOINT <version> <config-hash> <sha256>`
/// followed by a JSON body whose SHA-256 is the last header field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainState,
    /// Band scaling fitted on the training files, applied before inference.
    pub normalizer: Option<MinMax>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let body = serde_json::to_vec(self).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let digest = hex::encode(Sha256::digest(&body));
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(
            file,
            "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION} {} {digest}",
            self.config.hash()
        )
        .and_then(|_| file.write_all(&body))
        .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
        let fields: Vec<&str> = header.split(' ').collect();
        if fields.len() != 4 || fields[0] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        if fields[1] != CHECKPOINT_VERSION.to_string() {
            return Err(Error::Checkpoint(format!(
                "version {} not supported (expected {CHECKPOINT_VERSION})",
                fields[1]
            )));
        }
        let body = &bytes[nl + 1..];
        if hex::encode(Sha256::digest(body)) != fields[3] {
            return Err(Error::Checkpoint("body checksum mismatch".into()));
        }
        let ckpt: Checkpoint =
            serde_json::from_slice(body).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.config.hash() != fields[2] {
            return Err(Error::Checkpoint("configuration hash mismatch".into()));
        }
        Ok(ckpt)
    }
}
