//! Open-set metrics, the contamination bound checker and the gradient
//! weight sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ScoreFn;
use crate::data::ContaminationSpec;
use crate::error::{Error, Result};
use crate::heads::{OpenSetPrediction, UNKNOWN};
use crate::losses::{bce_loss, harmonic, tbce_loss, TaylorOrder};
use crate::par::Exec;

/// Slack allowed on exact bound comparisons.
pub const BOUND_TOL: f64 = 1e-9;
/// Quantization levels of the discrete probability tables.
pub const GRID_LEVELS: usize = 21;
/// Largest discrete input space accepted by [`DiscreteSpace`].
pub const MAX_ATOMS: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_classes: usize,
    pub n_samples: usize,
    pub open_oa: f64,
    /// `None` when the set holds no known-class samples.
    pub closed_oa: Option<f64>,
    pub f1_u: f64,
    /// `None` when the set lacks either knowns or unknowns.
    pub auc_u: Option<f64>,
    pub score: ScoreFn,
    /// Recall per label `0..=C` (index 0 is UNKNOWN).
    pub producer_acc: Vec<Option<f64>>,
    /// Precision per label `0..=C`.
    pub user_acc: Vec<Option<f64>>,
    /// `confusion[truth][predicted]` over labels `0..=C`.
    pub confusion: Vec<Vec<u64>>,
}

/// Unknownness score; larger means more likely unknown.
pub fn unknown_score(pred: &OpenSetPrediction, score: ScoreFn) -> f64 {
    let best = match score {
        ScoreFn::MaxPu => pred.per_head_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ScoreFn::MaxMix => {
            if pred.per_head_probs.len() == pred.q_probs.len() {
                pred.q_probs
                    .iter()
                    .zip(&pred.per_head_probs)
                    .map(|(q, f)| q * f)
                    .fold(f64::NEG_INFINITY, f64::max)
            } else {
                let qmax = pred.q_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let fmax = pred.per_head_probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                qmax * fmax
            }
        }
    };
    1.0 - best
}

pub fn compute_metrics(
    preds: &[OpenSetPrediction],
    truths: &[usize],
    score: ScoreFn,
) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Usage("cannot compute metrics on an empty set".into()));
    }
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    let n_classes = preds[0].q_probs.len();
    let k = n_classes + 1;
    let mut confusion = vec![vec![0u64; k]; k];
    let mut closed_hits = 0u64;
    let mut closed_total = 0u64;
    for (p, &t) in preds.iter().zip(truths) {
        if p.q_probs.len() != n_classes {
            return Err(Error::Shape("predictions disagree on the class count".into()));
        }
        if t > n_classes || p.final_label > n_classes {
            return Err(Error::Input(format!("label {t} outside 0..={n_classes}")));
        }
        confusion[t][p.final_label] += 1;
        if t != UNKNOWN {
            closed_total += 1;
            closed_hits += u64::from(p.known_label == t);
        }
    }
    let n = preds.len() as u64;
    let trace: u64 = (0..k).map(|i| confusion[i][i]).sum();
    let open_oa = trace as f64 / n as f64;
    let closed_oa = (closed_total > 0).then(|| closed_hits as f64 / closed_total as f64);

    let row_sum = |i: usize| confusion[i].iter().sum::<u64>();
    let col_sum = |j: usize| confusion.iter().map(|r| r[j]).sum::<u64>();
    let ratio = |a: u64, b: u64| (b > 0).then(|| a as f64 / b as f64);
    let producer_acc = (0..k).map(|i| ratio(confusion[i][i], row_sum(i))).collect();
    let user_acc = (0..k).map(|j| ratio(confusion[j][j], col_sum(j))).collect();

    let tp = confusion[UNKNOWN][UNKNOWN];
    let fp = col_sum(UNKNOWN) - tp;
    let fne = row_sum(UNKNOWN) - tp;
    let f1_u = if tp + fp + fne == 0 {
        1.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fne) as f64
    };

    let scores: Vec<f64> = preds.iter().map(|p| unknown_score(p, score)).collect();
    let is_unknown: Vec<bool> = truths.iter().map(|&t| t == UNKNOWN).collect();
    let auc_u = match auc(&scores, &is_unknown) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };

    Ok(MetricsReport {
        n_classes,
        n_samples: preds.len(),
        open_oa,
        closed_oa,
        f1_u,
        auc_u,
        score,
        producer_acc,
        user_acc,
        confusion,
    })
}

fn check_auc_input(scores: &[f64], positive: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != positive.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positive.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Input("NaN score".into()));
    }
    let p = positive.iter().filter(|&&b| b).count() as u64;
    let n = positive.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric("AUC needs both classes present".into()));
    }
    Ok((p, n))
}

/// Ranking AUC of `positive` over negatives, ties counted one half.
/// Sort-based; bit-identical to [`auc_bruteforce`].
pub fn auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (p, n) = check_auc_input(scores, positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the number of winning pairs, kept in integers
    let mut twice: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut pos_here = 0u128;
        let mut neg_here = 0u128;
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                pos_here += 1;
            } else {
                neg_here += 1;
            }
            i += 1;
        }
        twice += 2 * pos_here * neg_below + pos_here * neg_here;
        neg_below += neg_here;
    }
    Ok(twice as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Pairwise oracle for [`auc`].
pub fn auc_bruteforce(scores: &[f64], positive: &[bool]) -> Result<f64> {
    let (p, n) = check_auc_input(scores, positive)?;
    let mut twice: u128 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !positive[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if positive[j] {
                continue;
            }
            if si > sj {
                twice += 2;
            } else if si == sj {
                twice += 1;
            }
        }
    }
    Ok(twice as f64 / (2 * p as u128 * n as u128) as f64)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "open_oa,closed_oa,f1_u,auc_u,score";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.open_oa,
            opt(self.closed_oa),
            self.f1_u,
            opt(self.auc_u),
            self.score
        )
    }

    pub fn confusion_csv(&self) -> String {
        let k = self.n_classes + 1;
        let mut out = String::from("truth");
        for j in 0..k {
            let _ = write!(out, ",pred_{j}");
        }
        out.push('\n');
        for (i, row) in self.confusion.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("label,producer_acc,user_acc\n");
        for (i, (p, u)) in self.producer_acc.iter().zip(&self.user_acc).enumerate() {
            let _ = writeln!(out, "{i},{},{}", opt(*p), opt(*u));
        }
        out
    }

    /// Human-readable summary, scores shown ×100.
    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut out = String::new();
        let _ = writeln!(out, "samples    {}", self.n_samples);
        let _ = writeln!(out, "Open OA    {}", pct(Some(self.open_oa)));
        let _ = writeln!(out, "Closed OA  {}", pct(self.closed_oa));
        let _ = writeln!(out, "F1u        {}", pct(Some(self.f1_u)));
        let _ = writeln!(out, "AUCu       {} (score {})", pct(self.auc_u), self.score);
        let _ = writeln!(out, "label  producer  user");
        for (i, (p, u)) in self.producer_acc.iter().zip(&self.user_acc).enumerate() {
            let name = if i == UNKNOWN { "unk".to_string() } else { i.to_string() };
            let _ = writeln!(out, "{name:>5}  {:>8}  {:>6}", pct(*p), pct(*u));
        }
        out
    }

    /// Writes `metrics.csv`, `metrics.txt`, `per_class.csv` and `confusion.csv`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let files = [
            ("metrics.csv", format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())),
            ("metrics.txt", self.to_text()),
            ("per_class.csv", self.per_class_csv()),
            ("confusion.csv", self.confusion_csv()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Result of one bound check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub pi: f64,
    pub n_t: f64,
    pub r_u: f64,
    pub r_pu: f64,
    pub observed_gap: f64,
    pub bound: f64,
    /// `R_u(f̂) − R_u(f*)`, exact mode only.
    pub excess_u: Option<f64>,
    /// `R_pu(f*) − R_pu(f̂)`, exact mode only.
    pub excess_pu: Option<f64>,
    /// Extra slack granted to the gap (zero when exact, 3σ in Monte Carlo).
    pub slack: f64,
    pub holds: bool,
}

impl BoundReport {
    fn new(
        pi: f64,
        n_t: f64,
        r_u: f64,
        r_pu: f64,
        excess: Option<(f64, f64)>,
        slack: f64,
    ) -> Self {
        let observed_gap = (r_u - r_pu).abs();
        let bound = pi * n_t / 2.0;
        let in_range = |x: f64| x >= -BOUND_TOL && x <= pi * n_t + BOUND_TOL;
        let holds = observed_gap <= bound + slack + BOUND_TOL
            && excess.is_none_or(|(a, b)| in_range(a) && in_range(b));
        BoundReport {
            pi,
            n_t,
            r_u,
            r_pu,
            observed_gap,
            bound,
            excess_u: excess.map(|e| e.0),
            excess_pu: excess.map(|e| e.1),
            slack,
            holds,
        }
    }

    pub const CSV_HEADER: &'static str =
        "pi,n_t,r_u,r_pu,observed_gap,bound,excess_u,excess_pu,slack,holds";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.pi,
            self.n_t,
            self.r_u,
            self.r_pu,
            self.observed_gap,
            self.bound,
            opt(self.excess_u),
            opt(self.excess_pu),
            self.slack,
            self.holds
        )
    }
}

/// Finite input space with `P_k` and `P_u` masses per atom and the known
/// prior `π` of the wild mixture `π·P_k + (1−π)·P_u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteSpace {
    pub p_known: Vec<f64>,
    pub p_unknown: Vec<f64>,
    pub pi: f64,
}

fn check_mass(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
        return Err(Error::Config(format!("{what} masses must be finite and non-negative")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("{what} masses sum to {s}, expected 1")));
    }
    Ok(())
}

/// The 21 grid probabilities `0, 0.05, …, 1`.
pub fn grid() -> Vec<f64> {
    (0..GRID_LEVELS).map(|i| i as f64 / (GRID_LEVELS - 1) as f64).collect()
}

impl DiscreteSpace {
    pub fn new(p_known: Vec<f64>, p_unknown: Vec<f64>, pi: f64) -> Result<Self> {
        if p_known.is_empty() || p_known.len() > MAX_ATOMS || p_known.len() != p_unknown.len() {
            return Err(Error::Config(format!(
                "need 1..={MAX_ATOMS} atoms with matching known/unknown masses"
            )));
        }
        check_mass(&p_known, "known")?;
        check_mass(&p_unknown, "unknown")?;
        if !(0.0..=1.0).contains(&pi) {
            return Err(Error::Config(format!("pi = {pi} outside [0, 1]")));
        }
        Ok(DiscreteSpace {
            p_known,
            p_unknown,
            pi,
        })
    }

    pub fn atoms(&self) -> usize {
        self.p_known.len()
    }

    fn wild_mass(&self, a: usize) -> f64 {
        self.pi * self.p_known[a] + (1.0 - self.pi) * self.p_unknown[a]
    }

    fn atom_u(&self, a: usize, f: f64, t: TaylorOrder) -> f64 {
        0.5 * self.p_known[a] * tbce_loss(f, true, t).0
            + 0.5 * self.p_unknown[a] * tbce_loss(f, false, t).0
    }

    fn atom_pu(&self, a: usize, f: f64, t: TaylorOrder) -> f64 {
        0.5 * self.p_known[a] * tbce_loss(f, true, t).0
            + 0.5 * self.wild_mass(a) * tbce_loss(f, false, t).0
    }

    /// Ideal risk: knowns positive, unknowns negative.
    pub fn risk_u(&self, f: &[f64], t: TaylorOrder) -> f64 {
        (0..self.atoms()).map(|a| self.atom_u(a, f[a], t)).sum()
    }

    /// Wild-substituted risk: knowns positive, all wild negative.
    pub fn risk_pu(&self, f: &[f64], t: TaylorOrder) -> f64 {
        (0..self.atoms()).map(|a| self.atom_pu(a, f[a], t)).sum()
    }

    /// Per-atom grid minimizers `(f*, f̂)` of `R_u` and `R_pu`; separable
    /// since both risks are sums over atoms. Ties go to the lowest level.
    pub fn minimizers(&self, t: TaylorOrder) -> (Vec<f64>, Vec<f64>) {
        let g = grid();
        let argmin = |risk: &dyn Fn(f64) -> f64| {
            let mut best = g[0];
            let mut best_v = risk(g[0]);
            for &x in &g[1..] {
                let v = risk(x);
                if v < best_v {
                    best = x;
                    best_v = v;
                }
            }
            best
        };
        let f_u = (0..self.atoms()).map(|a| argmin(&|x| self.atom_u(a, x, t))).collect();
        let f_pu = (0..self.atoms()).map(|a| argmin(&|x| self.atom_pu(a, x, t))).collect();
        (f_u, f_pu)
    }

    /// Exact check of the sandwich for `f` and of both excess bounds.
    pub fn check(&self, f: &[f64], t: TaylorOrder) -> Result<BoundReport> {
        if f.len() != self.atoms() {
            return Err(Error::Shape(format!(
                "table has {} entries for {} atoms",
                f.len(),
                self.atoms()
            )));
        }
        let (f_star, f_hat) = self.minimizers(t);
        let excess_u = self.risk_u(&f_hat, t) - self.risk_u(&f_star, t);
        let excess_pu = self.risk_pu(&f_star, t) - self.risk_pu(&f_hat, t);
        Ok(BoundReport::new(
            self.pi,
            harmonic(t.get()),
            self.risk_u(f, t),
            self.risk_pu(f, t),
            Some((excess_u, excess_pu)),
            0.0,
        ))
    }
}

/// Where the bound check draws its risks from.
pub enum BoundSource<'a> {
    Discrete {
        space: &'a DiscreteSpace,
        table: &'a [f64],
    },
    MonteCarlo {
        spec: &'a ContaminationSpec,
        classifier: &'a (dyn Fn(&[f64]) -> f64 + Sync),
        n_mc: usize,
        seed: u64,
    },
    /// Real data carries no known `π`.
    RealData,
}

pub fn check_theorem1(source: BoundSource<'_>, t: TaylorOrder) -> Result<BoundReport> {
    match source {
        BoundSource::Discrete { space, table } => space.check(table, t),
        BoundSource::MonteCarlo {
            spec,
            classifier,
            n_mc,
            seed,
        } => check_monte_carlo(spec, classifier, t, n_mc, seed),
        BoundSource::RealData => Err(Error::UnsupportedMode(
            "bound checks need a known prior; real data does not provide one".into(),
        )),
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v)
}

/// Monte Carlo estimate from `n_mc` draws of each component `P_k` and
/// `P_u`; the wild negative term uses the mixture identity
/// `E_wild = π·E_k + (1−π)·E_u`, so the gap estimate is
/// `½π(mean_k L(f,0) − mean_u L(f,0))` and gets 3σ of sampling slack.
fn check_monte_carlo(
    spec: &ContaminationSpec,
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    t: TaylorOrder,
    n_mc: usize,
    seed: u64,
) -> Result<BoundReport> {
    spec.validate()?;
    if n_mc < 2 {
        return Err(Error::Usage("Monte Carlo check needs n_mc >= 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let known: Vec<Vec<f64>> = (0..n_mc).map(|_| spec.draw_known_marginal(&mut rng)).collect();
    let unknown = (0..n_mc)
        .map(|_| spec.draw_unknown(&mut rng))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Config("Monte Carlo check needs unknown components".into()))?;
    let outputs = |xs: &[Vec<f64>]| -> Result<Vec<f64>> {
        xs.iter()
            .map(|x| {
                let p = f(x);
                if p.is_finite() {
                    Ok(p.clamp(0.0, 1.0))
                } else {
                    Err(Error::Input("classifier returned a non-finite value".into()))
                }
            })
            .collect()
    };
    let fk = outputs(&known)?;
    let fu = outputs(&unknown)?;
    let losses = |fs: &[f64], positive: bool| -> Vec<f64> {
        fs.iter().map(|&p| tbce_loss(p, positive, t).0).collect()
    };
    let (k_pos, _) = mean_var(&losses(&fk, true));
    let (k_neg, k_var) = mean_var(&losses(&fk, false));
    let (u_neg, u_var) = mean_var(&losses(&fu, false));
    let pi = spec.pi();
    let r_u = 0.5 * k_pos + 0.5 * u_neg;
    let r_pu = 0.5 * k_pos + 0.5 * (pi * k_neg + (1.0 - pi) * u_neg);
    let sigma = 0.5 * pi * ((k_var + u_var) / n_mc as f64).sqrt();
    Ok(BoundReport::new(pi, harmonic(t.get()), r_u, r_pu, None, 3.0 * sigma))
}

/// One randomized exact trial.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundTrial {
    pub atoms: usize,
    pub t: u32,
    pub report: BoundReport,
}

/// Random discrete spaces, orders `t ∈ 1..=max_t` and grid tables; trial
/// `i` uses RNG stream `i` so results do not depend on `exec`.
pub fn random_bound_trials(n: usize, max_t: u32, seed: u64, exec: Exec) -> Result<Vec<BoundTrial>> {
    if max_t == 0 {
        return Err(Error::Usage("max_t must be positive".into()));
    }
    let g = grid();
    let trials = exec.map_indexed(n, |i| -> Result<BoundTrial> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let atoms = rng.random_range(1..=MAX_ATOMS);
        let masses = |rng: &mut ChaCha8Rng| {
            // occasional empty atoms exercise disjoint supports
            let mut m: Vec<f64> = (0..atoms)
                .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random::<f64>() })
                .collect();
            if m.iter().all(|&v| v == 0.0) {
                m[0] = 1.0;
            }
            let s: f64 = m.iter().sum();
            m.iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let p_known = masses(&mut rng);
        let p_unknown = masses(&mut rng);
        let pi = match rng.random_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.random::<f64>(),
        };
        let t = rng.random_range(1..=max_t);
        let table: Vec<f64> = (0..atoms).map(|_| g[rng.random_range(0..GRID_LEVELS)]).collect();
        let space = DiscreteSpace::new(p_known, p_unknown, pi)?;
        let report = space.check(&table, TaylorOrder::new(t)?)?;
        Ok(BoundTrial { atoms, t, report })
    });
    trials.into_iter().collect()
}

/// One row of the gradient weight comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradWeightRow {
    pub f: f64,
    pub t: u32,
    pub tbce_weight: f64,
    pub bce_weight: f64,
}

/// Gradient weights of a wild sample under the truncated loss and plain BCE.
pub fn gradient_weight_sweep(t_values: &[u32], f_grid: &[f64]) -> Result<Vec<GradWeightRow>> {
    if let Some(f) = f_grid.iter().find(|&&f| !(f > 0.0 && f < 1.0)) {
        return Err(Error::Usage(format!("grid point {f} outside (0, 1)")));
    }
    let mut rows = Vec::with_capacity(t_values.len() * f_grid.len());
    for &t in t_values {
        let order = TaylorOrder::new(t)?;
        for &f in f_grid {
            rows.push(GradWeightRow {
                f,
                t,
                tbce_weight: tbce_loss(f, false, order).1,
                bce_weight: bce_loss(f, false).1,
            });
        }
    }
    Ok(rows)
}

pub fn grad_weights_csv(rows: &[GradWeightRow]) -> String {
    let mut out = String::from("f,t,tbce_weight,bce_weight\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.f, r.t, r.tbce_weight, r.bce_weight);
    }
    out
}
