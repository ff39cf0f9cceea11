//! Command-line front end: parameter audits, gradient checks, dataset
//! preprocessing, and the train/eval/runs workflow.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use ferkit::data::{self, Dataset};
use ferkit::filters::NormMode;
use ferkit::gradcheck;
use ferkit::train::{self, assemble_split, EvalReport, TrainConfig};
use ferkit::zoo::{self, serialize, Variant, ARCH_NAMES};

/// Per-layer values of the base model's published parameter table, checked by
/// `audit`.
const BASE_LEDGER_ROWS: [usize; 16] = [
    480, 13856, 14016, 12480, 8208, 9360, 14016, 14016, 20160, 52608, 52608, 52608, 77184,
    301824, 0, 2048,
];
const BASE_LEDGER_TOTAL: usize = 645_472;

#[derive(Parser)]
#[command(name = "ferkit", version, about = "CPU training toolkit for small expression classifiers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Print the per-layer parameter ledger of an architecture
    CountParams(ArchOpts),
    /// Check the base ledger against its published per-layer values
    Audit,
    /// Run finite-difference gradient checks over every registered op
    Gradcheck {
        /// seeds per op
        #[arg(long, default_value_t = gradcheck::DEFAULT_SEEDS)]
        seeds: usize,
        /// check a single op by name
        #[arg(long)]
        only: Option<String>,
    },
    /// Decode a source dataset and write the binary cache used by train/eval
    Preprocess {
        #[command(flatten)]
        data: DataOpts,
        /// cache directory to write
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and optionally save the best-validation checkpoint
    Train {
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        arch: ArchOpts,
        #[command(flatten)]
        hyper: HyperOpts,
        /// checkpoint/history base path (writes .manifest, .bin, .history)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split
    Eval {
        /// checkpoint base path (expects .manifest and .bin)
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataOpts,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        #[arg(long, value_enum, default_value_t = NormOpt::Unit)]
        norm: NormOpt,
    },
    /// Train several seeds and report avg/min/max test accuracy
    Runs {
        /// number of runs, seeded seed, seed+1, ...
        #[arg(long, default_value_t = 4)]
        repeat: usize,
        #[command(flatten)]
        data: DataOpts,
        #[command(flatten)]
        arch: ArchOpts,
        #[command(flatten)]
        hyper: HyperOpts,
        /// report base path (writes .report and .records)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ArchOpts {
    #[arg(long, default_value = "base", value_parser = parse_arch)]
    arch: String,
    #[arg(long, default_value = "plain", value_parser = Variant::parse)]
    variant: Variant,
    /// prepend the learned alignment layer
    #[arg(long)]
    stl: bool,
    /// share one backbone across parallel streams
    #[arg(long)]
    share_streams: bool,
    #[arg(long, default_value_t = 8)]
    classes: usize,
}

fn parse_arch(s: &str) -> std::result::Result<String, String> {
    if ARCH_NAMES.contains(&s) {
        Ok(s.to_string())
    } else {
        Err(format!("unknown arch `{s}` (expected one of: {})", ARCH_NAMES.join(", ")))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Source {
    /// thresholded gratings in 8 orientations
    Bars,
    /// brightness ramps in 8 directions
    Ramps,
    /// FER2013 pixels csv + crowd-vote csv
    Ferplus,
    /// directory tree of posed face images
    Kdef,
    /// binary cache written by `preprocess`
    Cache,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum NormOpt {
    /// intensities scaled to [0, 1]
    Unit,
    /// intensities scaled to [-1, 1]
    Signed,
}

impl From<NormOpt> for NormMode {
    fn from(n: NormOpt) -> NormMode {
        match n {
            NormOpt::Unit => NormMode::Unit,
            NormOpt::Signed => NormMode::Signed,
        }
    }
}

#[derive(Args)]
struct DataOpts {
    #[arg(long, value_enum)]
    dataset: Source,
    /// source directory (csv files, image tree, or cache)
    #[arg(
        long,
        required_if_eq_any([("dataset", "ferplus"), ("dataset", "kdef"), ("dataset", "cache")])
    )]
    data_dir: Option<PathBuf>,
    /// kdef: include the four rotated poses as well as the straight one
    #[arg(long)]
    all_angles: bool,
    /// generation/subject-split seed for synthetic and kdef sources
    #[arg(long, default_value_t = 7)]
    data_seed: u64,
    #[arg(long, default_value_t = 400)]
    train_per_class: usize,
    #[arg(long, default_value_t = 100)]
    val_per_class: usize,
    #[arg(long, default_value_t = 100)]
    test_per_class: usize,
}

impl DataOpts {
    fn load(&self) -> Result<Dataset> {
        let dir = self.data_dir.as_deref();
        let ds = match self.dataset {
            Source::Bars => data::synth::oriented_bars(
                self.train_per_class,
                self.val_per_class,
                self.test_per_class,
                self.data_seed,
            ),
            Source::Ramps => data::synth::directional_ramps(
                self.train_per_class,
                self.val_per_class,
                self.test_per_class,
                self.data_seed,
            ),
            Source::Ferplus => {
                let (ds, stats) = data::ferplus::load(dir.expect("clap enforces --data-dir"))?;
                eprintln!(
                    "ferplus: {} rows, {} rejected by vote filter",
                    stats.total, stats.rejected
                );
                ds
            }
            Source::Kdef => data::kdef::load(
                dir.expect("clap enforces --data-dir"),
                self.all_angles,
                self.data_seed,
            )?,
            Source::Cache => data::prep::load(dir.expect("clap enforces --data-dir"))?,
        };
        Ok(ds)
    }
}

#[derive(Args)]
struct HyperOpts {
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = NormOpt::Unit)]
    norm: NormOpt,
}

fn config(arch: &ArchOpts, hyper: &HyperOpts) -> TrainConfig {
    TrainConfig {
        arch: arch.arch.clone(),
        variant: arch.variant,
        stl: arch.stl,
        share_streams: arch.share_streams,
        norm: hyper.norm.into(),
        lr: hyper.lr,
        batch: hyper.batch,
        epochs: hyper.epochs,
        seed: hyper.seed,
        ..TrainConfig::default()
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::CountParams(arch) => count_params(&arch),
        Cmd::Audit => audit(),
        Cmd::Gradcheck { seeds, only } => run_gradcheck(seeds, only.as_deref()),
        Cmd::Preprocess { data, out } => preprocess(&data, &out),
        Cmd::Train { data, arch, hyper, out } => cmd_train(&data, &arch, &hyper, out.as_deref()),
        Cmd::Eval { checkpoint, data, split, norm } => {
            cmd_eval(&checkpoint, &data, split, norm.into())
        }
        Cmd::Runs { repeat, data, arch, hyper, out } => {
            cmd_runs(repeat, &data, &arch, &hyper, out.as_deref())
        }
    }
}

fn spec_for(arch: &ArchOpts) -> Result<zoo::ArchSpec> {
    let spec = zoo::by_name(&arch.arch, arch.classes)?
        .with_variant(arch.variant)
        .with_stl(arch.stl)
        .with_shared_streams(arch.share_streams);
    spec.validate()?;
    Ok(spec)
}

fn count_params(arch: &ArchOpts) -> Result<()> {
    let spec = spec_for(arch)?;
    let ledger = zoo::ledger(&spec)?;
    println!(
        "arch {} variant {} stl {} share {} classes {} input {}x{}",
        spec.name,
        spec.variant.name(),
        spec.stl,
        spec.share_streams,
        spec.classes,
        spec.input_hw.0,
        spec.input_hw.1
    );
    print!("{ledger}");
    Ok(())
}

fn audit() -> Result<()> {
    let ledger = zoo::ledger(&zoo::base(8))?;
    let mut bad = 0usize;
    if ledger.rows.len() != BASE_LEDGER_ROWS.len() {
        bail!("ledger has {} rows, expected {}", ledger.rows.len(), BASE_LEDGER_ROWS.len());
    }
    for (row, &want) in ledger.rows.iter().zip(&BASE_LEDGER_ROWS) {
        let ok = row.params == want;
        bad += usize::from(!ok);
        println!(
            "{:<14} {:>8} expected {:>8}  {}",
            row.name,
            row.params,
            want,
            if ok { "ok" } else { "MISMATCH" }
        );
    }
    let total_ok = ledger.total == BASE_LEDGER_TOTAL;
    bad += usize::from(!total_ok);
    println!(
        "{:<14} {:>8} expected {:>8}  {}",
        "total",
        ledger.total,
        BASE_LEDGER_TOTAL,
        if total_ok { "ok" } else { "MISMATCH" }
    );
    if bad > 0 {
        bail!("{bad} ledger value(s) differ from the published table");
    }
    Ok(())
}

fn run_gradcheck(seeds: usize, only: Option<&str>) -> Result<()> {
    let outcomes = match only {
        Some(name) => vec![gradcheck::run_check(name, seeds)?],
        None => gradcheck::run_all(seeds)?,
    };
    let mut failures = 0usize;
    for o in &outcomes {
        println!(
            "{:<22} {}  max-rel-err {:.3e}  ({} seeds)",
            o.name,
            if o.pass() { "PASS" } else { "FAIL" },
            o.max_rel_err,
            o.seeds
        );
        failures += usize::from(!o.pass());
    }
    if failures > 0 {
        bail!("{failures} op(s) exceeded the {:.0e} tolerance", gradcheck::TOLERANCE);
    }
    Ok(())
}

fn preprocess(data: &DataOpts, out: &Path) -> Result<()> {
    let ds = data.load()?;
    fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    data::prep::save(&ds, out)?;
    println!(
        "wrote {} ({} train / {} val / {} test, {} classes)",
        out.display(),
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        ds.classes()
    );
    Ok(())
}

/// One record per line: run id, epoch, split, metric, value.
fn history_records(seed: u64, history: &[train::EpochStats]) -> String {
    let mut out = String::new();
    for h in history {
        let mut rec = |split: &str, metric: &str, value: f64| {
            writeln!(
                out,
                "run={seed} epoch={} split={split} metric={metric} value={value:.6}",
                h.epoch
            )
            .expect("string write");
        };
        rec("train", "loss", h.mean_loss);
        rec("train", "accuracy", h.train_acc);
        if let Some(v) = h.val_acc {
            rec("val", "accuracy", v);
        }
    }
    out
}

fn epoch_progress(stats: &train::EpochStats) {
    let val = match stats.val_acc {
        Some(v) => format!("{v:.2}"),
        None => "-".into(),
    };
    eprintln!(
        "epoch {} done: loss {:.4} train {:.2} val {val}",
        stats.epoch, stats.mean_loss, stats.train_acc
    );
}

fn cmd_train(data: &DataOpts, arch: &ArchOpts, hyper: &HyperOpts, out: Option<&Path>) -> Result<()> {
    let ds = data.load()?;
    let cfg = config(arch, hyper);
    let outcome = train::train_with(&cfg, &ds, |s| {
        epoch_progress(s);
        false
    })?;
    print!("{}", train::render_history(&outcome.history));
    println!("best epoch {}", outcome.best_epoch);
    if let Some(base) = out {
        if let Some(parent) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("create {}", parent.display()))?;
        }
        let mut best = outcome.best;
        serialize::save(&mut best, base)?;
        let hist = base.with_extension("history");
        fs::write(&hist, history_records(cfg.seed, &outcome.history))
            .with_context(|| format!("write {}", hist.display()))?;
        println!("saved checkpoint {}", base.display());
    }
    Ok(())
}

fn render_confusion(report: &EvalReport, class_names: &[String]) -> String {
    let mut out = String::new();
    writeln!(out, "accuracy {:.2}% over {} samples", report.accuracy(), report.n)
        .expect("string write");
    writeln!(out, "confusion (rows = truth):").expect("string write");
    for (row, name) in report.confusion.iter().zip(class_names) {
        let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
        writeln!(out, "  {:<10} {}", name, cells.join(" ")).expect("string write");
    }
    out
}

fn cmd_eval(checkpoint: &Path, data: &DataOpts, split: Split, norm: NormMode) -> Result<()> {
    let mut model = serialize::load(checkpoint)?;
    let ds = data.load()?;
    let classes = ds.classes();
    if classes != model.spec.classes {
        bail!(
            "checkpoint classifies {} classes but the dataset has {classes}",
            model.spec.classes
        );
    }
    let samples = match split {
        Split::Train => &ds.train,
        Split::Val => &ds.val,
        Split::Test => &ds.test,
    };
    let assembled =
        assemble_split(samples, model.spec.variant, model.spec.input_hw, norm, classes)?;
    let report = train::evaluate(&mut model, &assembled, classes)?;
    print!("{}", render_confusion(&report, &ds.class_names));
    Ok(())
}

fn run_records(report: &train::RunReport) -> String {
    let mut out = String::new();
    for r in &report.runs {
        writeln!(
            out,
            "run={} epoch={} split=test metric=accuracy value={:.6}",
            r.seed, r.best_epoch, r.test_acc
        )
        .expect("string write");
    }
    out
}

fn cmd_runs(
    repeat: usize,
    data: &DataOpts,
    arch: &ArchOpts,
    hyper: &HyperOpts,
    out: Option<&Path>,
) -> Result<()> {
    let ds = data.load()?;
    let cfg = config(arch, hyper);
    let classes = ds.classes();
    let input_hw = zoo::by_name(&cfg.arch, classes)?.input_hw;
    let test_split =
        assemble_split(&ds.test, cfg.variant, input_hw, cfg.norm, classes)?;
    let report = train::multi_run_with(&cfg, classes, repeat, &mut |seed| {
        eprintln!("run seed {seed} starting");
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let out = train::run_once(&run_cfg, &ds, &test_split, epoch_progress)?;
        eprintln!("run seed {seed} done: test {:.2}", out.test_acc);
        Ok(out)
    })?;
    let text = train::render_report(&report);
    print!("{text}");
    if let Some(base) = out {
        if let Some(parent) = base.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("create {}", parent.display()))?;
        }
        let rep = base.with_extension("report");
        fs::write(&rep, &text).with_context(|| format!("write {}", rep.display()))?;
        let rec = base.with_extension("records");
        fs::write(&rec, run_records(&report)).with_context(|| format!("write {}", rec.display()))?;
        println!("saved report {}", rep.display());
    }
    Ok(())
}
