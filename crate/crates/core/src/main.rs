use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use wildpu::config::{DataConfig, KvMap, TrainConfig};
use wildpu::data::{
    load_csv, load_spectra_csv, write_csv, write_spectra_csv, CsvSchema, LabeledSet, MinMax, Role,
    TestSet,
};
use wildpu::eval::{
    check_theorem1, compute_metrics, grad_weights_csv, gradient_weight_sweep, random_bound_trials,
    BoundReport, BoundSource, MetricsReport,
};
use wildpu::experiment::{sweep, sweep_csv, synthetic_split, MeanSe, SweepAxis, Summary};
use wildpu::losses::TaylorOrder;
use wildpu::numerics::Tensor2;
use wildpu::par::Exec;
use wildpu::trainer::{write_history, Checkpoint, TrainState, Trainer};
use wildpu::{Error, Result};

const OUT_DIR_ENV: &str = "WILDPU_OUT_DIR";

#[derive(Parser)]
#[command(name = "wildpu", version, about = "Open-set spectral classifiers trained on wild data")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic labeled / wild / test split.
    Gen(GenArgs),
    /// Train one run per seed and write checkpoints, histories and metrics.
    Train(TrainArgs),
    /// Score a checkpoint on a labeled test table.
    Eval(EvalArgs),
    /// Check the contamination bound on random discrete spaces or by Monte Carlo.
    CheckBounds(BoundArgs),
    /// One-axis ablation over seeds.
    Sweep(SweepArgs),
    /// Gradient weight of a wild sample under BCE and the truncated loss.
    GradWeights(GradArgs),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory [default: $WILDPU_OUT_DIR or ./out].
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args, Default)]
struct DataFlags {
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    unknowns: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    pi: Option<String>,
    #[arg(long)]
    separation: Option<String>,
    #[arg(long)]
    overlap: Option<String>,
    #[arg(long)]
    std: Option<String>,
    #[arg(long)]
    layout_seed: Option<String>,
    #[arg(long)]
    per_class: Option<String>,
    #[arg(long)]
    n_wild: Option<String>,
    #[arg(long)]
    n_test: Option<String>,
    #[arg(long)]
    aux_source: Option<String>,
    #[arg(long)]
    data_seed: Option<String>,
}

#[derive(Args, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    base_lr: Option<String>,
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    taylor_order: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// continuous | discrete
    #[arg(long)]
    update_c: Option<String>,
    /// continuous | discrete
    #[arg(long)]
    update_e: Option<String>,
    #[arg(long)]
    batch_known: Option<String>,
    #[arg(long)]
    batch_wild: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    single_network: Option<String>,
    /// none | pro | mixpro
    #[arg(long)]
    weighting: Option<String>,
    /// bce | tbce
    #[arg(long)]
    pu_loss: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    multi_pu: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    grad_e: Option<String>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    weight_grad_c: Option<String>,
    /// Comma-separated hidden widths.
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    /// net-c | net-e | average
    #[arg(long)]
    deploy: Option<String>,
    /// max-pu | max-mix
    #[arg(long)]
    score: Option<String>,
}

#[derive(Args, Default)]
struct TableFlags {
    /// Band count of external tables [default: inferred from the header].
    #[arg(long)]
    bands: Option<String>,
    /// Zero-based label column [default: last].
    #[arg(long)]
    label_column: Option<String>,
    /// Label code meaning "unknown".
    #[arg(long)]
    unknown_code: Option<String>,
    /// Min-max scale bands with statistics of the training tables.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    normalize: Option<String>,
}

#[derive(Args)]
struct GenArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataFlags,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    data: DataFlags,
    #[command(flatten)]
    table: TableFlags,
    /// Directory with labeled.csv, wild.csv and optionally test.csv
    /// [default: generate the synthetic split in memory].
    #[arg(long)]
    data_dir: Option<String>,
    /// Number of repetitions; seed i is `seed + i`.
    #[arg(long)]
    seeds: Option<String>,
    /// Continue a single run from this checkpoint.
    #[arg(long)]
    resume: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    table: TableFlags,
    #[arg(long)]
    checkpoint: Option<String>,
    /// Labeled test table [default: <data-dir>/test.csv].
    #[arg(long)]
    test: Option<String>,
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    deploy: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    #[arg(long)]
    score: Option<String>,
}

#[derive(Args)]
struct BoundArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataFlags,
    /// exact | monte-carlo | real
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    trials: Option<String>,
    #[arg(long)]
    max_t: Option<String>,
    #[arg(long)]
    taylor_order: Option<String>,
    #[arg(long)]
    bound_seed: Option<String>,
    #[arg(long)]
    n_mc: Option<String>,
    /// Classifier for Monte Carlo mode: max PU head of this checkpoint.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Constant classifier output when no checkpoint is given.
    #[arg(long)]
    f_const: Option<String>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    train: TrainFlags,
    #[command(flatten)]
    data: DataFlags,
    /// t | beta | tau | updating | weighting | aux_source
    #[arg(long)]
    axis: Option<String>,
    /// Comma-separated values [default: the axis' standard grid].
    #[arg(long)]
    values: Option<String>,
    #[arg(long)]
    seeds: Option<String>,
}

#[derive(Args)]
struct GradArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated orders.
    #[arg(long)]
    t_values: Option<String>,
    /// Interior grid points `i / (points + 1)`.
    #[arg(long)]
    points: Option<String>,
}

fn push_all(kv: &mut KvMap, pairs: &[(&str, &Option<String>)]) {
    for (k, v) in pairs {
        if let Some(v) = v {
            kv.push(*k, v);
        }
    }
}

impl DataFlags {
    fn push(&self, kv: &mut KvMap) {
        push_all(
            kv,
            &[
                ("classes", &self.classes),
                ("unknowns", &self.unknowns),
                ("dim", &self.dim),
                ("pi", &self.pi),
                ("separation", &self.separation),
                ("overlap", &self.overlap),
                ("std", &self.std),
                ("layout-seed", &self.layout_seed),
                ("per-class", &self.per_class),
                ("n-wild", &self.n_wild),
                ("n-test", &self.n_test),
                ("aux-source", &self.aux_source),
                ("data-seed", &self.data_seed),
            ],
        );
    }
}

impl TrainFlags {
    fn push(&self, kv: &mut KvMap) {
        push_all(
            kv,
            &[
                ("epochs", &self.epochs),
                ("base-lr", &self.base_lr),
                ("momentum", &self.momentum),
                ("weight-decay", &self.weight_decay),
                ("beta", &self.beta),
                ("taylor-order", &self.taylor_order),
                ("tau", &self.tau),
                ("alpha", &self.alpha),
                ("update-c", &self.update_c),
                ("update-e", &self.update_e),
                ("batch-known", &self.batch_known),
                ("batch-wild", &self.batch_wild),
                ("seed", &self.seed),
                ("single-network", &self.single_network),
                ("weighting", &self.weighting),
                ("pu-loss", &self.pu_loss),
                ("multi-pu", &self.multi_pu),
                ("grad-e", &self.grad_e),
                ("weight-grad-c", &self.weight_grad_c),
                ("hidden", &self.hidden),
                ("threshold", &self.threshold),
                ("deploy", &self.deploy),
                ("score", &self.score),
            ],
        );
    }
}

impl TableFlags {
    fn push(&self, kv: &mut KvMap) {
        push_all(
            kv,
            &[
                ("bands", &self.bands),
                ("label-column", &self.label_column),
                ("unknown-code", &self.unknown_code),
                ("normalize", &self.normalize),
            ],
        );
    }
}

/// Keys that are neither training nor data settings.
const RUN_KEYS: &[&str] = &[
    "command", "version", "data-dir", "seeds", "resume", "checkpoint", "test", "bands",
    "label-column", "unknown-code", "normalize", "axis", "values", "mode", "trials", "max-t",
    "bound-seed", "n-mc", "f-const", "t-values", "points", "trained-seeds",
];

/// Resolved settings of one invocation.
struct Run {
    command: &'static str,
    kv: KvMap,
    out_dir: PathBuf,
    train: TrainConfig,
    data: DataConfig,
}

impl Run {
    fn new(command: &'static str, common: &Common, flags: KvMap) -> Result<Self> {
        let mut kv = match &common.config {
            Some(p) => KvMap::read(p)?,
            None => KvMap::default(),
        };
        kv.extend(&flags);
        let mut train = TrainConfig::default();
        let mut data = DataConfig::default();
        for (k, v) in &kv.0 {
            let owned = train.set(k, v)? | data.set(k, v)?;
            if !owned && !RUN_KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
        }
        train.validate()?;
        data.synthetic.build()?.validate()?;
        let out_dir = common
            .out_dir
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        Ok(Run {
            command,
            kv,
            out_dir,
            train,
            data,
        })
    }

    fn get<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.kv.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("invalid value '{v}' for '{key}'"))),
        }
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.kv.get(key) {
            None | Some("false") | Some("0") | Some("no") => Ok(false),
            Some("true") | Some("1") | Some("yes") => Ok(true),
            Some(v) => Err(Error::Config(format!("invalid boolean '{v}' for '{key}'"))),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn write(&self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))
    }

    /// Resolved settings plus the keys given for this command; feeding the
    /// file back through `--config` repeats the run.
    fn write_manifest(&self, extra: &[(&str, String)]) -> Result<()> {
        let mut m = KvMap::default();
        m.push("command", self.command);
        m.push("version", env!("CARGO_PKG_VERSION"));
        m.extend(&self.train.to_kv());
        m.extend(&self.data.to_kv());
        for key in RUN_KEYS.iter().skip(2) {
            if let Some(v) = self.kv.get(key) {
                m.push(*key, v);
            }
        }
        for (k, v) in extra {
            m.push(*k, v);
        }
        let body = format!(
            "# wildpu {} manifest; rerun with --config <this file>\n{}",
            self.command,
            m.to_text()
        );
        self.write("manifest.txt", &body)
    }

    fn schema(&self, band_count: usize) -> Result<CsvSchema> {
        let mut s = CsvSchema::new(band_count);
        if let Some(c) = self.kv.get("label-column") {
            s.label_column = Some(
                c.parse()
                    .map_err(|_| Error::Config(format!("invalid label-column '{c}'")))?,
            );
        }
        s.unknown_label_code = self.get("unknown-code", 0i64)?;
        Ok(s)
    }
}

fn require<'a>(kv: &'a KvMap, key: &str) -> Result<&'a str> {
    kv.get(key)
        .ok_or_else(|| Error::Config(format!("missing required setting '{key}'")))
}

fn existing(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Config(format!("dataset file {} not found", path.display())))
    }
}

/// Field count of the first line of a table.
fn first_line_width(path: &Path) -> Result<usize> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    BufReader::new(f)
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    if line.trim().is_empty() {
        return Err(Error::Schema(format!("{} is empty", path.display())));
    }
    Ok(line.trim_end().split(',').count())
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut flags = KvMap::default();
    a.data.push(&mut flags);
    let run = Run::new("gen", &a.common, flags)?;
    let split = synthetic_split(&run.data)?;
    write_csv(run.path("labeled.csv"), &split.labeled.to_samples())?;
    write_spectra_csv(run.path("wild.csv"), split.wild.spectra())?;
    write_csv(run.path("test.csv"), &split.test.to_samples())?;
    let mut audit = String::from("row,label\n");
    for (i, y) in split.wild.audit_labels().iter().enumerate() {
        audit.push_str(&format!("{i},{y}\n"));
    }
    run.write("wild_audit.csv", &audit)?;
    run.write_manifest(&[])?;
    println!(
        "wrote {} labeled, {} wild, {} test rows to {}",
        split.labeled.len(),
        split.wild.len(),
        split.test.len(),
        run.out_dir.display()
    );
    Ok(())
}

struct Loaded {
    labeled: LabeledSet,
    wild: Tensor2,
    test: Option<TestSet>,
    normalizer: Option<MinMax>,
}

fn load_tables(run: &Run) -> Result<Loaded> {
    let Some(dir) = run.kv.get("data-dir") else {
        let split = synthetic_split(&run.data)?;
        return Ok(Loaded {
            labeled: split.labeled,
            wild: split.wild.spectra().clone(),
            test: Some(split.test),
            normalizer: None,
        });
    };
    let dir = PathBuf::from(dir);
    let labeled_path = existing(dir.join("labeled.csv"))?;
    let wild_path = existing(dir.join("wild.csv"))?;
    let bands = match run.kv.get("bands") {
        Some(_) => run.get("bands", 0usize)?,
        None => first_line_width(&labeled_path)? - 1,
    };
    let schema = run.schema(bands)?;
    let mut labeled = load_csv(&labeled_path, &schema, Role::LabeledKnown)?;
    let mut wild = load_spectra_csv(&wild_path, bands)?;
    let test_path = dir.join("test.csv");
    let mut test = if test_path.is_file() {
        Some(load_csv(&test_path, &schema, Role::Test)?)
    } else {
        None
    };
    let normalizer = if run.flag("normalize")? {
        let mm = MinMax::fit(
            labeled
                .iter()
                .map(|s| s.spectrum.as_slice())
                .chain(wild.iter_rows()),
        )
        .ok_or_else(|| Error::Config("no training rows to normalize with".into()))?;
        labeled.iter_mut().for_each(|s| mm.apply(&mut s.spectrum));
        for r in 0..wild.rows() {
            mm.apply(wild.row_mut(r));
        }
        if let Some(t) = test.as_mut() {
            t.iter_mut().for_each(|s| mm.apply(&mut s.spectrum));
        }
        Some(mm)
    } else {
        None
    };
    Ok(Loaded {
        labeled: LabeledSet::from_samples(&labeled)?,
        wild,
        test: test.map(|t| TestSet::from_samples(&t)).transpose()?,
        normalizer,
    })
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut flags = KvMap::default();
    a.train.push(&mut flags);
    a.data.push(&mut flags);
    a.table.push(&mut flags);
    push_all(
        &mut flags,
        &[("data-dir", &a.data_dir), ("seeds", &a.seeds), ("resume", &a.resume)],
    );
    let run = Run::new("train", &a.common, flags)?;
    let n_seeds: usize = run.get("seeds", 1)?;
    if n_seeds == 0 {
        return Err(Error::Config("seeds must be positive".into()));
    }
    let tables = load_tables(&run)?;
    let resume = run.kv.get("resume").map(Checkpoint::load).transpose()?;
    if resume.is_some() && n_seeds != 1 {
        return Err(Error::Config("resume continues exactly one run".into()));
    }

    let runs = Exec::Parallel.map_indexed(n_seeds, |i| -> Result<(u64, TrainState)> {
        let trainer = match &resume {
            Some(ck) => Trainer::resume(ck.clone(), &tables.labeled, &tables.wild)?,
            None => {
                let mut cfg = run.train.clone();
                cfg.seed += i as u64;
                Trainer::new(cfg, &tables.labeled, &tables.wild)?
            }
        };
        let seed = trainer.config().seed;
        Ok((seed, trainer.run()?))
    });

    let mut reports: Vec<MetricsReport> = Vec::new();
    let mut seeds = Vec::new();
    for r in runs {
        let (seed, state) = r?;
        let cfg = TrainConfig {
            seed,
            ..resume.as_ref().map_or_else(|| run.train.clone(), |c| c.config.clone())
        };
        Checkpoint {
            config: cfg.clone(),
            state: state.clone(),
            normalizer: tables.normalizer.clone(),
        }
        .save(run.path(&format!("checkpoint_s{seed}.ckpt")))?;
        write_history(run.path(&format!("history_s{seed}.csv")), &state.history)?;
        if let Some(test) = &tables.test {
            let preds = state.predict(&test.x, &cfg)?;
            let m = compute_metrics(&preds, &test.labels, cfg.score)?;
            run.write(
                &format!("metrics_s{seed}.csv"),
                &format!("{}\n{}\n", MetricsReport::CSV_HEADER, m.csv_row()),
            )?;
            reports.push(m);
        }
        seeds.push(seed);
    }
    if !reports.is_empty() {
        let summary = Summary::of(&reports.iter().collect::<Vec<_>>())?;
        run.write("summary.csv", &format!("{}\n{}\n", Summary::CSV_HEADER, summary.csv_row()))?;
        run.write("summary.txt", &summary.to_text())?;
        print!("{}", summary.to_text());
    }
    let seeds_text: Vec<String> = seeds.iter().map(|s| s.to_string()).collect();
    run.write_manifest(&[("trained-seeds", seeds_text.join(","))])?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut flags = KvMap::default();
    a.table.push(&mut flags);
    push_all(
        &mut flags,
        &[
            ("checkpoint", &a.checkpoint),
            ("test", &a.test),
            ("data-dir", &a.data_dir),
            ("deploy", &a.deploy),
            ("threshold", &a.threshold),
            ("score", &a.score),
        ],
    );
    let run = Run::new("eval", &a.common, flags)?;
    let ckpt = Checkpoint::load(require(&run.kv, "checkpoint")?)?;
    let test_path = match (run.kv.get("test"), run.kv.get("data-dir")) {
        (Some(t), _) => PathBuf::from(t),
        (None, Some(d)) => Path::new(d).join("test.csv"),
        (None, None) => return Err(Error::Config("eval needs --test or --data-dir".into())),
    };
    let test_path = existing(test_path)?;
    let bands = ckpt.state.net_c.d_in();
    let mut samples = load_csv(&test_path, &run.schema(bands)?, Role::Test)?;
    if samples.is_empty() {
        return Err(Error::Usage(format!("{} holds no samples", test_path.display())));
    }
    if let Some(mm) = &ckpt.normalizer {
        samples.iter_mut().for_each(|s| mm.apply(&mut s.spectrum));
    }
    let test = TestSet::from_samples(&samples)?;
    // deployment settings may be overridden at evaluation time
    let mut cfg = ckpt.config.clone();
    for key in ["deploy", "threshold", "score"] {
        if let Some(v) = run.kv.get(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    let preds = ckpt.state.predict(&test.x, &cfg)?;
    let m = compute_metrics(&preds, &test.labels, cfg.score)?;
    m.write_dir(&run.out_dir)?;
    run.write_manifest(&[])?;
    print!("{}", m.to_text());
    Ok(())
}

fn cmd_check_bounds(a: BoundArgs) -> Result<()> {
    let mut flags = KvMap::default();
    a.data.push(&mut flags);
    push_all(
        &mut flags,
        &[
            ("mode", &a.mode),
            ("trials", &a.trials),
            ("max-t", &a.max_t),
            ("taylor-order", &a.taylor_order),
            ("bound-seed", &a.bound_seed),
            ("n-mc", &a.n_mc),
            ("checkpoint", &a.checkpoint),
            ("f-const", &a.f_const),
        ],
    );
    let run = Run::new("check-bounds", &a.common, flags)?;
    let seed: u64 = run.get("bound-seed", 0)?;
    let reports: Vec<(String, BoundReport)> = match run.kv.get("mode").unwrap_or("exact") {
        "exact" => {
            let trials: usize = run.get("trials", 1000)?;
            let max_t: u32 = run.get("max-t", 6)?;
            random_bound_trials(trials, max_t, seed, Exec::Parallel)?
                .into_iter()
                .map(|t| (format!("{},{}", t.atoms, t.t), t.report))
                .collect()
        }
        "monte-carlo" => {
            let spec = run.data.synthetic.build()?;
            let t = TaylorOrder::new(run.train.taylor_order)?;
            let n_mc: usize = run.get("n-mc", 20_000)?;
            let report = match run.kv.get("checkpoint") {
                Some(p) => {
                    let ck = Checkpoint::load(p)?;
                    let net = ck.state.net_c;
                    let f = move |x: &[f64]| -> f64 {
                        let batch = Tensor2::from_vec(1, x.len(), x.to_vec()).expect("one row");
                        net.forward(&batch)
                            .map(|o| o.pu_probs.row(0).iter().copied().fold(0.0, f64::max))
                            .unwrap_or(f64::NAN)
                    };
                    check_theorem1(
                        BoundSource::MonteCarlo { spec: &spec, classifier: &f, n_mc, seed },
                        t,
                    )?
                }
                None => {
                    let c: f64 = run.get("f-const", 0.5)?;
                    let f = move |_: &[f64]| c;
                    check_theorem1(
                        BoundSource::MonteCarlo { spec: &spec, classifier: &f, n_mc, seed },
                        t,
                    )?
                }
            };
            vec![(format!("{},{}", spec.dim(), t.get()), report)]
        }
        "real" => check_theorem1(BoundSource::RealData, TaylorOrder::new(1)?).map(|_| Vec::new())?,
        other => {
            return Err(Error::Config(format!(
                "unknown mode '{other}' (exact|monte-carlo|real)"
            )))
        }
    };
    let mut csv = format!("trial,size,t,{}\n", BoundReport::CSV_HEADER);
    for (i, (prefix, r)) in reports.iter().enumerate() {
        csv.push_str(&format!("{i},{prefix},{}\n", r.csv_row()));
    }
    run.write("bounds.csv", &csv)?;
    let violations = reports.iter().filter(|(_, r)| !r.holds).count();
    let worst = reports
        .iter()
        .map(|(_, r)| if r.bound > 0.0 { r.observed_gap / r.bound } else { 0.0 })
        .fold(0.0, f64::max);
    let text = format!(
        "trials      {}\nviolations  {violations}\nmax gap/bound  {worst:.6}\n",
        reports.len()
    );
    run.write("bounds.txt", &text)?;
    run.write_manifest(&[])?;
    print!("{text}");
    if violations > 0 {
        return Err(Error::Training(format!("{violations} bound violations")));
    }
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut flags = KvMap::default();
    a.train.push(&mut flags);
    a.data.push(&mut flags);
    push_all(
        &mut flags,
        &[("axis", &a.axis), ("values", &a.values), ("seeds", &a.seeds)],
    );
    let run = Run::new("sweep", &a.common, flags)?;
    let axis: SweepAxis = require(&run.kv, "axis")?.parse()?;
    let values = match run.kv.get("values") {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        None => axis.default_values(),
    };
    let n_seeds: usize = run.get("seeds", 1)?;
    let rows = sweep(axis, &values, &run.train, &run.data, n_seeds, Exec::Parallel)?;
    run.write("sweep.csv", &sweep_csv(&rows))?;
    let mut text = String::new();
    for r in &rows {
        let show = |m: Option<MeanSe>| m.map_or_else(|| "n/a".to_string(), |m| m.to_string());
        text.push_str(&format!(
            "{}={:<24} OA {}  F1u {}  AUCu {}\n",
            axis,
            r.value,
            r.summary.open_oa,
            r.summary.f1_u,
            show(r.summary.auc_u)
        ));
    }
    run.write("sweep.txt", &text)?;
    run.write_manifest(&[])?;
    print!("{text}");
    Ok(())
}

fn cmd_grad_weights(a: GradArgs) -> Result<()> {
    let mut flags = KvMap::default();
    push_all(&mut flags, &[("t-values", &a.t_values), ("points", &a.points)]);
    let run = Run::new("grad-weights", &a.common, flags)?;
    let t_values: Vec<u32> = run
        .kv
        .get("t-values")
        .unwrap_or("1,2,3,4,5,6")
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid order '{s}'")))
        })
        .collect::<Result<_>>()?;
    let points: usize = run.get("points", 99)?;
    let grid: Vec<f64> = (1..=points).map(|i| i as f64 / (points + 1) as f64).collect();
    let rows = gradient_weight_sweep(&t_values, &grid)?;
    run.write("grad_weights.csv", &grad_weights_csv(&rows))?;
    run.write_manifest(&[])?;
    println!("wrote {} rows", rows.len());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Gen(a) => cmd_gen(a),
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::CheckBounds(a) => cmd_check_bounds(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::GradWeights(a) => cmd_grad_weights(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
