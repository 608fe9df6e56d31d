//! Repeated runs over seeds and one-axis ablation sweeps.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::confidence::UpdateMode;
use crate::config::{DataConfig, TrainConfig};
use crate::data::{make_split, Split};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, MetricsReport};
use crate::par::Exec;
use crate::trainer::{train, TrainState};

/// Draw the synthetic split described by `data` with its own seed.
pub fn synthetic_split(data: &DataConfig) -> Result<Split> {
    let spec = data.synthetic.build()?;
    make_split(
        &spec,
        data.per_class,
        data.n_wild,
        data.n_test,
        data.aux_source,
        data.data_seed,
    )
}

/// Train on `split` and score the test set.
pub fn run_on_split(cfg: &TrainConfig, split: &Split) -> Result<(TrainState, MetricsReport)> {
    let state = train(cfg, &split.labeled, split.wild.spectra())?;
    let preds = state.predict(&split.test.x, cfg)?;
    let metrics = compute_metrics(&preds, &split.test.labels, cfg.score)?;
    Ok((state, metrics))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    pub metrics: MetricsReport,
    pub state: TrainState,
}

/// Repetition `i` trains with seed `cfg.seed + i` on a split drawn with
/// `data.data_seed + i`, so both the sample draw and the initialization
/// change between repetitions.
pub fn run_synthetic_seeds(
    cfg: &TrainConfig,
    data: &DataConfig,
    n_seeds: usize,
    exec: Exec,
) -> Result<Vec<SeedRun>> {
    let runs = exec.map_indexed(n_seeds, |i| -> Result<SeedRun> {
        let mut d = data.clone();
        d.data_seed = data.data_seed + i as u64;
        let split = synthetic_split(&d)?;
        let mut c = cfg.clone();
        c.seed = cfg.seed + i as u64;
        let (state, metrics) = run_on_split(&c, &split)?;
        Ok(SeedRun {
            seed: c.seed,
            metrics,
            state,
        })
    });
    runs.into_iter().collect()
}

/// Repetitions over training seeds on a fixed split.
pub fn run_split_seeds(
    cfg: &TrainConfig,
    split: &Split,
    n_seeds: usize,
    exec: Exec,
) -> Result<Vec<SeedRun>> {
    let runs = exec.map_indexed(n_seeds, |i| -> Result<SeedRun> {
        let mut c = cfg.clone();
        c.seed = cfg.seed + i as u64;
        let (state, metrics) = run_on_split(&c, split)?;
        Ok(SeedRun {
            seed: c.seed,
            metrics,
            state,
        })
    });
    runs.into_iter().collect()
}

/// Mean and standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl MeanSe {
    /// `None` for an empty sample. The standard error uses the n−1
    /// variance and is zero for a single value.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let se = if xs.len() > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        Some(MeanSe {
            mean,
            se,
            n: xs.len(),
        })
    }
}

impl fmt::Display for MeanSe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.se)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub open_oa: MeanSe,
    pub closed_oa: Option<MeanSe>,
    pub f1_u: MeanSe,
    pub auc_u: Option<MeanSe>,
}

impl Summary {
    pub fn of(reports: &[&MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::Usage("nothing to summarize".into()));
        }
        let col = |get: &dyn Fn(&MetricsReport) -> Option<f64>| -> Option<MeanSe> {
            let vals: Option<Vec<f64>> = reports.iter().map(|r| get(r)).collect();
            vals.and_then(|v| MeanSe::of(&v))
        };
        Ok(Summary {
            open_oa: col(&|r| Some(r.open_oa)).expect("non-empty"),
            closed_oa: col(&|r| r.closed_oa),
            f1_u: col(&|r| Some(r.f1_u)).expect("non-empty"),
            auc_u: col(&|r| r.auc_u),
        })
    }

    pub fn of_runs(runs: &[SeedRun]) -> Result<Self> {
        Self::of(&runs.iter().map(|r| &r.metrics).collect::<Vec<_>>())
    }

    pub const CSV_HEADER: &'static str = "n,open_oa_mean,open_oa_se,closed_oa_mean,closed_oa_se,\
f1_u_mean,f1_u_se,auc_u_mean,auc_u_se";

    pub fn csv_row(&self) -> String {
        let cell = |m: Option<MeanSe>| {
            m.map_or_else(|| "NA,NA".to_string(), |m| format!("{},{}", m.mean, m.se))
        };
        format!(
            "{},{},{},{},{}",
            self.open_oa.n,
            cell(Some(self.open_oa)),
            cell(self.closed_oa),
            cell(Some(self.f1_u)),
            cell(self.auc_u)
        )
    }

    pub fn to_text(&self) -> String {
        let show = |m: Option<MeanSe>| m.map_or_else(|| "n/a".to_string(), |m| m.to_string());
        let mut out = String::new();
        let _ = writeln!(out, "runs       {}", self.open_oa.n);
        let _ = writeln!(out, "Open OA    {}", self.open_oa);
        let _ = writeln!(out, "Closed OA  {}", show(self.closed_oa));
        let _ = writeln!(out, "F1u        {}", self.f1_u);
        let _ = writeln!(out, "AUCu       {}", show(self.auc_u));
        out
    }
}

/// Ablation axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    TaylorOrder,
    Beta,
    Tau,
    Updating,
    Weighting,
    AuxSource,
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::TaylorOrder => "t",
            SweepAxis::Beta => "beta",
            SweepAxis::Tau => "tau",
            SweepAxis::Updating => "updating",
            SweepAxis::Weighting => "weighting",
            SweepAxis::AuxSource => "aux_source",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "t" => SweepAxis::TaylorOrder,
            "beta" => SweepAxis::Beta,
            "tau" => SweepAxis::Tau,
            "updating" => SweepAxis::Updating,
            "weighting" => SweepAxis::Weighting,
            "aux_source" | "aux-source" => SweepAxis::AuxSource,
            _ => {
                return Err(Error::Config(format!(
                    "unknown sweep axis '{s}' (t|beta|tau|updating|weighting|aux_source)"
                )))
            }
        })
    }
}

impl SweepAxis {
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            SweepAxis::TaylorOrder => &["1", "2", "3", "4", "5", "6"],
            SweepAxis::Beta => &["0", "0.25", "0.5", "1", "2"],
            SweepAxis::Tau => &["0.5", "0.6", "0.7", "0.8", "0.9", "0.95"],
            SweepAxis::Updating => &[
                "continuous/continuous",
                "continuous/discrete",
                "discrete/continuous",
                "discrete/discrete",
            ],
            SweepAxis::Weighting => &["none", "pro", "mixpro"],
            SweepAxis::AuxSource => &["wild", "pure_unknown", "wild_minus_unknown"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Apply one sweep value to copies of the configs.
    pub fn apply(self, value: &str, cfg: &mut TrainConfig, data: &mut DataConfig) -> Result<()> {
        match self {
            SweepAxis::TaylorOrder => {
                cfg.set("taylor-order", value)?;
            }
            SweepAxis::Beta => {
                cfg.set("beta", value)?;
            }
            SweepAxis::Tau => {
                cfg.set("tau", value)?;
            }
            SweepAxis::Weighting => {
                cfg.set("weighting", value)?;
            }
            SweepAxis::Updating => {
                let (c, e) = value.split_once('/').ok_or_else(|| {
                    Error::Config(format!("updating value '{value}' must look like c-mode/e-mode"))
                })?;
                cfg.update_c = c.parse::<UpdateMode>()?;
                cfg.update_e = e.parse::<UpdateMode>()?;
            }
            SweepAxis::AuxSource => data.aux_source = value.parse()?,
        }
        cfg.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub summary: Summary,
    pub runs: Vec<MetricsReport>,
}

/// Every (value, seed) pair is an independent run; all of them are
/// scheduled together and collected in order.
pub fn sweep(
    axis: SweepAxis,
    values: &[String],
    cfg: &TrainConfig,
    data: &DataConfig,
    n_seeds: usize,
    exec: Exec,
) -> Result<Vec<SweepRow>> {
    if values.is_empty() || n_seeds == 0 {
        return Err(Error::Usage("sweep needs at least one value and one seed".into()));
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let (mut c, mut d) = (cfg.clone(), data.clone());
        axis.apply(v, &mut c, &mut d)?;
        configs.push((c, d));
    }
    let jobs = values.len() * n_seeds;
    let results = exec.map_indexed(jobs, |j| -> Result<MetricsReport> {
        let (c, d) = &configs[j / n_seeds];
        let i = (j % n_seeds) as u64;
        let mut d = d.clone();
        d.data_seed += i;
        let mut c = c.clone();
        c.seed += i;
        Ok(run_on_split(&c, &synthetic_split(&d)?)?.1)
    });
    let results: Vec<MetricsReport> = results.into_iter().collect::<Result<_>>()?;
    values
        .iter()
        .zip(results.chunks(n_seeds))
        .map(|(v, runs)| {
            Ok(SweepRow {
                axis,
                value: v.clone(),
                summary: Summary::of(&runs.iter().collect::<Vec<_>>())?,
                runs: runs.to_vec(),
            })
        })
        .collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("axis,value,{}\n", Summary::CSV_HEADER);
    for r in rows {
        let _ = writeln!(out, "{},{},{}", r.axis, r.value, r.summary.csv_row());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn mean_and_standard_error() {
        let m = MeanSe::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        // sample sd = sqrt(5/3), se = sd/2
        assert_abs_diff_eq!(m.se, (5.0f64 / 3.0).sqrt() / 2.0, epsilon = 1e-15);
        assert_eq!(MeanSe::of(&[0.7]).unwrap().se, 0.0);
        assert!(MeanSe::of(&[]).is_none());
    }

    #[test]
    fn axes_parse_and_apply() {
        for name in ["t", "beta", "tau", "updating", "weighting", "aux_source"] {
            let axis: SweepAxis = name.parse().unwrap();
            assert_eq!(axis.to_string(), name);
            for v in axis.default_values() {
                let (mut c, mut d) = (TrainConfig::default(), DataConfig::default());
                axis.apply(&v, &mut c, &mut d).unwrap();
            }
        }
        assert_eq!(SweepAxis::TaylorOrder.default_values().len(), 6);
        assert!(SweepAxis::Tau.default_values().contains(&"0.95".to_string()));
        assert!("gamma".parse::<SweepAxis>().is_err());
        let (mut c, mut d) = (TrainConfig::default(), DataConfig::default());
        assert!(SweepAxis::Updating.apply("continuous", &mut c, &mut d).is_err());
    }
}
