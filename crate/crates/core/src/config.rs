//! Run configuration and its flat `key = value` text form. Keys are the
//! kebab-case names of the CLI flags.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::confidence::{default_modes, UpdateMode, DEFAULT_ALPHA, DEFAULT_TAU};
use crate::data::{AuxSource, SyntheticSpec};
use crate::error::{Error, Result};
use crate::heads::{Mixing, DEFAULT_THRESHOLD};

/// Ordered key-value pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvMap(pub Vec<(String, String)>);

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected 'key = value', got '{line}'"),
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(KvMap(out))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        KvMap::parse(&text)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0
            .iter()
            .rev()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.0.push((key.into(), value.to_string()));
    }

    pub fn extend(&mut self, other: &KvMap) {
        self.0.extend(other.0.iter().cloned());
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

/// Which confidence mixing drives the EMA weights, if any.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weighting {
    None,
    Pro,
    MixPro,
}

impl Weighting {
    pub fn mixing(self) -> Option<Mixing> {
        match self {
            Weighting::None => None,
            Weighting::Pro => Some(Mixing::Pro),
            Weighting::MixPro => Some(Mixing::MixPro),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::None => "none",
            Weighting::Pro => "pro",
            Weighting::MixPro => "mixpro",
        })
    }
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(Weighting::None),
            "pro" => Ok(Weighting::Pro),
            "mixpro" => Ok(Weighting::MixPro),
            other => Err(Error::Config(format!("unknown weighting '{other}'"))),
        }
    }
}

/// Loss on the contraction-side PU heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PuLossKind {
    Bce,
    Tbce,
}

impl fmt::Display for PuLossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PuLossKind::Bce => "bce",
            PuLossKind::Tbce => "tbce",
        })
    }
}

impl FromStr for PuLossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bce" => Ok(PuLossKind::Bce),
            "tbce" => Ok(PuLossKind::Tbce),
            other => Err(Error::Config(format!("unknown PU loss '{other}'"))),
        }
    }
}

/// Which network(s) produce predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Deploy {
    NetC,
    NetE,
    /// Mean of both networks' probabilities before thresholding.
    Average,
}

impl fmt::Display for Deploy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Deploy::NetC => "net-c",
            Deploy::NetE => "net-e",
            Deploy::Average => "average",
        })
    }
}

impl FromStr for Deploy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "net-c" | "c" => Ok(Deploy::NetC),
            "net-e" | "e" => Ok(Deploy::NetE),
            "average" | "avg" => Ok(Deploy::Average),
            other => Err(Error::Config(format!("unknown deploy mode '{other}'"))),
        }
    }
}

/// Score ranking unknowns above knowns for the AUC.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoreFn {
    /// `1 - max_c f^c`
    MaxPu,
    /// `1 - max_c q_c f^c`
    MaxMix,
}

impl fmt::Display for ScoreFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreFn::MaxPu => "max-pu",
            ScoreFn::MaxMix => "max-mix",
        })
    }
}

impl FromStr for ScoreFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "max-pu" => Ok(ScoreFn::MaxPu),
            "max-mix" => Ok(ScoreFn::MaxMix),
            other => Err(Error::Config(format!("unknown score function '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub beta: f64,
    pub taylor_order: u32,
    pub tau: f64,
    pub alpha: f64,
    pub update_c: UpdateMode,
    pub update_e: UpdateMode,
    pub batch_known: usize,
    pub batch_wild: usize,
    pub seed: u64,
    /// Train both PU branches on one set of parameters.
    pub single_network: bool,
    pub weighting: Weighting,
    pub pu_loss: PuLossKind,
    /// One PU head per known class (otherwise a single known-vs-rest head).
    pub multi_pu: bool,
    /// Enable the expansion branch (weighted BCE).
    pub grad_e: bool,
    /// Weight the contraction branch with `w_c`.
    pub weight_grad_c: bool,
    pub hidden: Vec<usize>,
    pub threshold: f64,
    pub deploy: Deploy,
    pub score: ScoreFn,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let (update_c, update_e) = default_modes();
        TrainConfig {
            epochs: 130,
            base_lr: 3e-4,
            momentum: 0.9,
            weight_decay: 1e-4,
            beta: 1.0,
            taylor_order: 2,
            tau: DEFAULT_TAU,
            alpha: DEFAULT_ALPHA,
            update_c,
            update_e,
            batch_known: 64,
            batch_wild: 64,
            seed: 0,
            single_network: false,
            weighting: Weighting::MixPro,
            pu_loss: PuLossKind::Tbce,
            multi_pu: true,
            grad_e: true,
            weight_grad_c: true,
            hidden: vec![64, 64],
            threshold: DEFAULT_THRESHOLD,
            deploy: Deploy::NetC,
            score: ScoreFn::MaxPu,
        }
    }
}

impl TrainConfig {
    /// Single network, plain BCE, one PU head, no expansion branch.
    pub fn naive_pu() -> Self {
        TrainConfig {
            single_network: true,
            weighting: Weighting::None,
            pu_loss: PuLossKind::Bce,
            multi_pu: false,
            grad_e: false,
            weight_grad_c: false,
            beta: 0.0,
            ..TrainConfig::default()
        }
    }

    /// Whether a separate expansion-side network is trained.
    pub fn two_networks(&self) -> bool {
        self.grad_e && !self.single_network
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return bad(format!("base-lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) || !(self.beta >= 0.0) {
            return bad("weight-decay and beta must be >= 0".into());
        }
        if self.taylor_order == 0 {
            return bad("taylor-order must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.alpha) || !(self.tau > 0.0 && self.tau < 1.0) {
            return bad(format!("alpha {} / tau {} out of range", self.alpha, self.tau));
        }
        if self.batch_known == 0 || self.batch_wild == 0 {
            return bad("batch sizes must be positive".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0, 1), got {}", self.threshold));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.push("epochs", self.epochs);
        kv.push("base-lr", self.base_lr);
        kv.push("momentum", self.momentum);
        kv.push("weight-decay", self.weight_decay);
        kv.push("beta", self.beta);
        kv.push("taylor-order", self.taylor_order);
        kv.push("tau", self.tau);
        kv.push("alpha", self.alpha);
        kv.push("update-c", self.update_c);
        kv.push("update-e", self.update_e);
        kv.push("batch-known", self.batch_known);
        kv.push("batch-wild", self.batch_wild);
        kv.push("seed", self.seed);
        kv.push("single-network", self.single_network);
        kv.push("weighting", self.weighting);
        kv.push("pu-loss", self.pu_loss);
        kv.push("multi-pu", self.multi_pu);
        kv.push("grad-e", self.grad_e);
        kv.push("weight-grad-c", self.weight_grad_c);
        kv.push(
            "hidden",
            self.hidden
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv.push("threshold", self.threshold);
        kv.push("deploy", self.deploy);
        kv.push("score", self.score);
        kv
    }

    /// Apply one key; returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "base-lr" => self.base_lr = parse(key, value)?,
            "momentum" => self.momentum = parse(key, value)?,
            "weight-decay" => self.weight_decay = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "taylor-order" => self.taylor_order = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "update-c" => self.update_c = value.parse()?,
            "update-e" => self.update_e = value.parse()?,
            "batch-known" => self.batch_known = parse(key, value)?,
            "batch-wild" => self.batch_wild = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "single-network" => self.single_network = parse_bool(key, value)?,
            "weighting" => self.weighting = value.parse()?,
            "pu-loss" => self.pu_loss = value.parse()?,
            "multi-pu" => self.multi_pu = parse_bool(key, value)?,
            "grad-e" => self.grad_e = parse_bool(key, value)?,
            "weight-grad-c" => self.weight_grad_c = parse_bool(key, value)?,
            "hidden" => {
                self.hidden = if value.is_empty() {
                    Vec::new()
                } else {
                    value
                        .split(',')
                        .map(|v| parse(key, v.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "threshold" => self.threshold = parse(key, value)?,
            "deploy" => self.deploy = value.parse()?,
            "score" => self.score = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Apply every key this config owns, leaving the rest to the caller.
    pub fn apply(&mut self, kv: &KvMap) -> Result<()> {
        for (k, v) in &kv.0 {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in &kv.0 {
            if !cfg.set(k, v)? {
                return Err(Error::Config(format!("unknown training key '{k}'")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical key-value text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().to_text().as_bytes()))
    }
}

/// Synthetic data generation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub synthetic: SyntheticSpec,
    pub per_class: usize,
    pub n_wild: usize,
    pub n_test: usize,
    pub aux_source: AuxSource,
    pub data_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: SyntheticSpec::default(),
            per_class: 100,
            n_wild: 4000,
            n_test: 5000,
            aux_source: AuxSource::Wild,
            data_seed: 0,
        }
    }
}

impl DataConfig {
    pub fn to_kv(&self) -> KvMap {
        let s = &self.synthetic;
        let mut kv = KvMap::default();
        kv.push("classes", s.n_known);
        kv.push("unknowns", s.n_unknown);
        kv.push("dim", s.dim);
        kv.push("pi", s.pi);
        kv.push("separation", s.separation);
        kv.push("overlap", s.overlap);
        kv.push("std", s.std);
        kv.push("layout-seed", s.layout_seed);
        kv.push("per-class", self.per_class);
        kv.push("n-wild", self.n_wild);
        kv.push("n-test", self.n_test);
        kv.push("aux-source", self.aux_source);
        kv.push("data-seed", self.data_seed);
        kv
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let s = &mut self.synthetic;
        match key {
            "classes" => s.n_known = parse(key, value)?,
            "unknowns" => s.n_unknown = parse(key, value)?,
            "dim" => s.dim = parse(key, value)?,
            "pi" => s.pi = parse(key, value)?,
            "separation" => s.separation = parse(key, value)?,
            "overlap" => s.overlap = parse(key, value)?,
            "std" => s.std = parse(key, value)?,
            "layout-seed" => s.layout_seed = parse(key, value)?,
            "per-class" => self.per_class = parse(key, value)?,
            "n-wild" => self.n_wild = parse(key, value)?,
            "n-test" => self.n_test = parse(key, value)?,
            "aux-source" => self.aux_source = value.parse()?,
            "data-seed" => self.data_seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn apply(&mut self, kv: &KvMap) -> Result<()> {
        for (k, v) in &kv.0 {
            self.set(k, v)?;
        }
        Ok(())
    }
}
