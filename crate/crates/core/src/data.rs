//! Synthetic contaminated datasets and CSV pixel tables.
//!
//! Wild data follows `P_wild = Σ_c π_c P_c + (1 - π) P_u`. Ground truth for
//! wild samples is kept for evaluation only: [`WildSet::spectra`] is the
//! only view handed to training code.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::UNKNOWN;
use crate::numerics::Tensor2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    LabeledKnown,
    Wild,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub spectrum: Vec<f64>,
    pub role: Role,
    /// `1..=C` for known classes, [`UNKNOWN`] otherwise.
    pub true_label: usize,
}

/// Isotropic Gaussian component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub std: f64,
}

impl Gaussian {
    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                m + self.std * z
            })
            .collect()
    }
}

/// Huber contamination model over Gaussian components. Unknown components
/// share the unknown mass equally.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    pub class_priors: Vec<f64>,
    pub unknown_mass: f64,
    pub known: Vec<Gaussian>,
    pub unknown: Vec<Gaussian>,
}

impl ContaminationSpec {
    pub fn n_classes(&self) -> usize {
        self.known.len()
    }

    pub fn dim(&self) -> usize {
        self.known
            .first()
            .or(self.unknown.first())
            .map_or(0, |g| g.mean.len())
    }

    /// Total known mass `π = Σ π_c`.
    pub fn pi(&self) -> f64 {
        self.class_priors.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.known.is_empty() {
            return Err(Error::Config("at least one known class is required".into()));
        }
        if self.class_priors.len() != self.known.len() {
            return Err(Error::Config(format!(
                "{} priors for {} known components",
                self.class_priors.len(),
                self.known.len()
            )));
        }
        if self
            .class_priors
            .iter()
            .chain(std::iter::once(&self.unknown_mass))
            .any(|&p| !(p >= 0.0) || !p.is_finite())
        {
            return Err(Error::Config("priors must be finite and non-negative".into()));
        }
        let total = self.pi() + self.unknown_mass;
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("priors sum to {total}, expected 1")));
        }
        if self.unknown_mass > 0.0 && self.unknown.is_empty() {
            return Err(Error::Config("unknown mass without unknown components".into()));
        }
        let d = self.dim();
        if d == 0
            || self
                .known
                .iter()
                .chain(&self.unknown)
                .any(|g| g.mean.len() != d || !(g.std > 0.0))
        {
            return Err(Error::Config(
                "components need a common positive dimension and std > 0".into(),
            ));
        }
        Ok(())
    }

    /// Draw one labelled point from the wild mixture.
    pub(crate) fn draw_wild<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (c, &p) in self.class_priors.iter().enumerate() {
            acc += p;
            if u < acc {
                return (self.known[c].draw(rng), c + 1);
            }
        }
        if self.unknown.is_empty() {
            // rounding left u just above Σπ_c with no unknown mass
            let c = self.class_priors.iter().rposition(|&p| p > 0.0).unwrap_or(0);
            return (self.known[c].draw(rng), c + 1);
        }
        let j = rng.random_range(0..self.unknown.len());
        (self.unknown[j].draw(rng), UNKNOWN)
    }

    fn draw_known<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Vec<f64> {
        self.known[class - 1].draw(rng)
    }

    /// One draw from `P_k`, classes weighted by `π_c / π`.
    pub(crate) fn draw_known_marginal<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random::<f64>() * self.pi();
        let mut acc = 0.0;
        for (c, &p) in self.class_priors.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.known[c].draw(rng);
            }
        }
        let c = self.class_priors.iter().rposition(|&p| p > 0.0).unwrap_or(0);
        self.known[c].draw(rng)
    }

    /// One draw from `P_u`, `None` if the spec has no unknown components.
    pub(crate) fn draw_unknown<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<Vec<f64>> {
        if self.unknown.is_empty() {
            return None;
        }
        let j = rng.random_range(0..self.unknown.len());
        Some(self.unknown[j].draw(rng))
    }
}

/// Parameters of the built-in synthetic spectra.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_known: usize,
    pub n_unknown: usize,
    pub dim: usize,
    /// Known mass in the wild mixture, split equally over known classes.
    pub pi: f64,
    /// Distance between class means in units of the component std.
    pub separation: f64,
    /// How far each unknown mean is pulled toward a known mean (0 = none, 1 = on top).
    pub overlap: f64,
    pub std: f64,
    /// Seed for the placement of the component means.
    pub layout_seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_known: 3,
            n_unknown: 2,
            dim: 20,
            pi: 0.75,
            separation: 8.0,
            overlap: 0.45,
            std: 0.05,
            layout_seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Place the means on smooth reflectance-like curves around 0.5 and
    /// build the contamination model.
    pub fn build(&self) -> Result<ContaminationSpec> {
        if self.n_known == 0 || self.dim == 0 {
            return Err(Error::Config("synthetic spec needs classes and bands".into()));
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::Config(format!("pi must lie in [0, 1], got {}", self.pi)));
        }
        if self.pi < 1.0 && self.n_unknown == 0 {
            return Err(Error::Config("pi < 1 requires unknown classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.layout_seed);
        let n = self.n_known + self.n_unknown;
        // Random unit directions, smoothed along the band axis.
        let mut dirs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..self.dim).map(|_| rng.sample(StandardNormal)).collect();
                let smooth: Vec<f64> = (0..self.dim)
                    .map(|i| {
                        let lo = i.saturating_sub(1);
                        let hi = (i + 1).min(self.dim - 1);
                        raw[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
                    })
                    .collect();
                let norm = smooth.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                smooth.into_iter().map(|v| v / norm).collect()
            })
            .collect();
        // Spread of a mean from the base spectrum such that two independent
        // directions sit roughly `separation` stds apart.
        let radius = self.separation * self.std / std::f64::consts::SQRT_2;
        let mean_of = |d: &[f64]| d.iter().map(|v| 0.5 + radius * v).collect::<Vec<f64>>();
        for j in 0..self.n_unknown {
            let anchor = dirs[j % self.n_known].clone();
            let own = &mut dirs[self.n_known + j];
            for (o, a) in own.iter_mut().zip(&anchor) {
                *o = (1.0 - self.overlap) * *o + self.overlap * a;
            }
        }
        let known = dirs[..self.n_known]
            .iter()
            .map(|d| Gaussian {
                mean: mean_of(d),
                std: self.std,
            })
            .collect();
        let unknown = dirs[self.n_known..]
            .iter()
            .map(|d| Gaussian {
                mean: mean_of(d),
                std: self.std,
            })
            .collect();
        let spec = ContaminationSpec {
            class_priors: vec![self.pi / self.n_known as f64; self.n_known],
            unknown_mass: if self.n_unknown == 0 { 0.0 } else { 1.0 - self.pi },
            known,
            unknown,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// `n` independent draws from the wild mixture, hidden labels attached.
pub fn sample_wild(spec: &ContaminationSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let (spectrum, true_label) = spec.draw_wild(&mut rng);
            Sample {
                spectrum,
                role: Role::Wild,
                true_label,
            }
        })
        .collect())
}

/// Source of the unlabeled auxiliary set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuxSource {
    /// The contaminated wild mixture.
    Wild,
    /// Unknown classes only.
    PureUnknown,
    /// The wild mixture with unknown draws filtered out.
    WildMinusUnknown,
}

impl fmt::Display for AuxSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxSource::Wild => "wild",
            AuxSource::PureUnknown => "pure_unknown",
            AuxSource::WildMinusUnknown => "wild_minus_unknown",
        })
    }
}

impl FromStr for AuxSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wild" => Ok(AuxSource::Wild),
            "pure_unknown" | "pure-unknown" => Ok(AuxSource::PureUnknown),
            "wild_minus_unknown" | "wild-minus-unknown" => Ok(AuxSource::WildMinusUnknown),
            other => Err(Error::Config(format!("unknown aux source '{other}'"))),
        }
    }
}

/// Labeled known-class samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub x: Tensor2,
    pub labels: Vec<usize>,
}

/// Unlabeled auxiliary samples with their ground truth sealed away.
#[derive(Clone, Debug, PartialEq)]
pub struct WildSet {
    x: Tensor2,
    hidden_labels: Vec<usize>,
}

/// Evaluation samples with ground truth (`0` = unknown).
#[derive(Clone, Debug, PartialEq)]
pub struct TestSet {
    pub x: Tensor2,
    pub labels: Vec<usize>,
}

fn stack(samples: &[Sample]) -> Result<Tensor2> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.spectrum.as_slice()).collect();
    Tensor2::from_rows(&rows)
}

impl LabeledSet {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        if let Some(s) = samples.iter().find(|s| s.true_label == UNKNOWN) {
            return Err(Error::Schema(format!(
                "labeled set contains an unknown-class sample ({} bands)",
                s.spectrum.len()
            )));
        }
        Ok(LabeledSet {
            x: stack(samples)?,
            labels: samples.iter().map(|s| s.true_label).collect(),
        })
    }

    /// Largest class index present.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_samples(&self) -> Vec<Sample> {
        to_samples(&self.x, &self.labels, Role::LabeledKnown)
    }
}

impl WildSet {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        Ok(WildSet {
            x: stack(samples)?,
            hidden_labels: samples.iter().map(|s| s.true_label).collect(),
        })
    }

    /// Spectra only; this is what training sees.
    pub fn spectra(&self) -> &Tensor2 {
        &self.x
    }

    /// Ground truth of the wild draws, for audits and evaluation.
    pub fn audit_labels(&self) -> &[usize] {
        &self.hidden_labels
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }

    pub fn to_samples(&self) -> Vec<Sample> {
        to_samples(&self.x, &self.hidden_labels, Role::Wild)
    }
}

impl TestSet {
    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        Ok(TestSet {
            x: stack(samples)?,
            labels: samples.iter().map(|s| s.true_label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn to_samples(&self) -> Vec<Sample> {
        to_samples(&self.x, &self.labels, Role::Test)
    }
}

fn to_samples(x: &Tensor2, labels: &[usize], role: Role) -> Vec<Sample> {
    x.iter_rows()
        .zip(labels)
        .map(|(r, &y)| Sample {
            spectrum: r.to_vec(),
            role,
            true_label: y,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub labeled: LabeledSet,
    pub wild: WildSet,
    pub test: TestSet,
}

const LABELED_STREAM: u64 = 1;
const WILD_STREAM: u64 = 2;
const TEST_STREAM: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Labeled / auxiliary / test sets drawn from independent random streams.
pub fn make_split(
    spec: &ContaminationSpec,
    per_class_labeled: usize,
    n_wild: usize,
    n_test: usize,
    aux: AuxSource,
    seed: u64,
) -> Result<Split> {
    spec.validate()?;
    if per_class_labeled == 0 || n_wild == 0 || n_test == 0 {
        return Err(Error::Config("split counts must be positive".into()));
    }
    let mut rng = stream_rng(seed, LABELED_STREAM);
    let mut labeled = Vec::with_capacity(per_class_labeled * spec.n_classes());
    for c in 1..=spec.n_classes() {
        for _ in 0..per_class_labeled {
            labeled.push(Sample {
                spectrum: spec.draw_known(c, &mut rng),
                role: Role::LabeledKnown,
                true_label: c,
            });
        }
    }

    let keep: fn(usize) -> bool = match aux {
        AuxSource::Wild => |_| true,
        AuxSource::PureUnknown => |y| y == UNKNOWN,
        AuxSource::WildMinusUnknown => |y| y != UNKNOWN,
    };
    let usable_mass = match aux {
        AuxSource::Wild => 1.0,
        AuxSource::PureUnknown => spec.unknown_mass,
        AuxSource::WildMinusUnknown => spec.pi(),
    };
    if usable_mass <= 0.0 {
        return Err(Error::Config(format!("aux source {aux} has zero mass under this spec")));
    }
    let mut rng = stream_rng(seed, WILD_STREAM);
    let mut wild = Vec::with_capacity(n_wild);
    while wild.len() < n_wild {
        let (spectrum, true_label) = spec.draw_wild(&mut rng);
        if keep(true_label) {
            wild.push(Sample {
                spectrum,
                role: Role::Wild,
                true_label,
            });
        }
    }

    let mut rng = stream_rng(seed, TEST_STREAM);
    let test: Vec<Sample> = (0..n_test)
        .map(|_| {
            let (spectrum, true_label) = spec.draw_wild(&mut rng);
            Sample {
                spectrum,
                role: Role::Test,
                true_label,
            }
        })
        .collect();

    Ok(Split {
        labeled: LabeledSet::from_samples(&labeled)?,
        wild: WildSet::from_samples(&wild)?,
        test: TestSet::from_samples(&test)?,
    })
}

/// Column layout of a pixel table.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvSchema {
    pub band_count: usize,
    /// Zero-based label column; `None` means after the bands.
    pub label_column: Option<usize>,
    /// Code mapped to [`UNKNOWN`].
    pub unknown_label_code: i64,
    /// Min-max scale every band to [0, 1] using this file's statistics.
    pub normalize: bool,
}

impl CsvSchema {
    pub fn new(band_count: usize) -> Self {
        CsvSchema {
            band_count,
            label_column: None,
            unknown_label_code: 0,
            normalize: false,
        }
    }
}

/// Per-band min-max scaling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl MinMax {
    pub fn fit<'a, I: IntoIterator<Item = &'a [f64]>>(rows: I) -> Option<Self> {
        let mut it = rows.into_iter();
        let first = it.next()?;
        let mut mm = MinMax {
            min: first.to_vec(),
            max: first.to_vec(),
        };
        for r in it {
            for (i, &v) in r.iter().enumerate() {
                mm.min[i] = mm.min[i].min(v);
                mm.max[i] = mm.max[i].max(v);
            }
        }
        Some(mm)
    }

    /// Constant bands map to 0.
    pub fn apply(&self, spectrum: &mut [f64]) {
        for (i, v) in spectrum.iter_mut().enumerate() {
            let span = self.max[i] - self.min[i];
            *v = if span > 0.0 {
                (*v - self.min[i]) / span
            } else {
                0.0
            };
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema, role: Role) -> Result<Vec<Sample>> {
    let path = path.as_ref();
    let label_col = schema.label_column.unwrap_or(schema.band_count);
    let width = schema.band_count + 1;
    if schema.band_count == 0 || label_col >= width {
        return Err(Error::Schema(format!(
            "label column {label_col} invalid for {} bands",
            schema.band_count
        )));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Schema(format!("{other:?}")),
        })?;

    let mut samples = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != width {
            return Err(Error::Schema(format!(
                "line {line} has {} fields, expected {width}",
                rec.len()
            )));
        }
        let label_field = &rec[label_col];
        let code: i64 = match label_field.parse() {
            Ok(v) => v,
            Err(_) if line == 1 => continue, // header row
            Err(_) => {
                return Err(Error::Parse {
                    line,
                    msg: format!("label '{label_field}' is not an integer"),
                })
            }
        };
        let mut spectrum = Vec::with_capacity(schema.band_count);
        for (j, field) in rec.iter().enumerate() {
            if j == label_col {
                continue;
            }
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("band column {j} holds '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("band column {j} is not finite"),
                });
            }
            spectrum.push(v);
        }
        let true_label = if code == schema.unknown_label_code {
            UNKNOWN
        } else if code <= 0 {
            return Err(Error::Schema(format!(
                "line {line}: known labels must be positive, got {code}"
            )));
        } else {
            code as usize
        };
        samples.push(Sample {
            spectrum,
            role,
            true_label,
        });
    }
    if schema.normalize {
        if let Some(mm) = MinMax::fit(samples.iter().map(|s| s.spectrum.as_slice())) {
            samples.iter_mut().for_each(|s| mm.apply(&mut s.spectrum));
        }
    }
    Ok(samples)
}

/// Bands then label, with a `b1,…,bd,label` header. Floats use the shortest
/// representation that round-trips.
pub fn write_csv(path: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let d = samples.first().map_or(0, |s| s.spectrum.len());
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        let header: Vec<String> = (1..=d).map(|i| format!("b{i}")).collect();
        writeln!(w, "{},label", header.join(","))?;
        for s in samples {
            for v in &s.spectrum {
                write!(w, "{v},")?;
            }
            writeln!(w, "{}", s.true_label)?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

/// Spectra without labels, `b1,…,bd` header.
pub fn write_spectra_csv(path: impl AsRef<Path>, x: &Tensor2) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>| -> std::io::Result<()> {
        let header: Vec<String> = (1..=x.cols()).map(|i| format!("b{i}")).collect();
        writeln!(w, "{}", header.join(","))?;
        for r in x.iter_rows() {
            let cells: Vec<String> = r.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        w.flush()
    };
    write(&mut w).map_err(|e| Error::io(path, e))
}

/// Reads a label-free table of `band_count` columns; a non-numeric first
/// line is taken as a header.
pub fn load_spectra_csv(path: impl AsRef<Path>, band_count: usize) -> Result<Tensor2> {
    let path = path.as_ref();
    if band_count == 0 {
        return Err(Error::Schema("band count must be positive".into()));
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Schema(format!("{other:?}")),
        })?;
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in reader.records().enumerate() {
        let line = i + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != band_count {
            return Err(Error::Schema(format!(
                "line {line} has {} fields, expected {band_count}",
                rec.len()
            )));
        }
        if line == 1 && rec[0].parse::<f64>().is_err() {
            continue;
        }
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("band column {j} holds '{field}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    msg: format!("band column {j} is not finite"),
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    Tensor2::from_vec(rows, band_count, data)
}
