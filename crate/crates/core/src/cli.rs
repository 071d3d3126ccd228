//! The `sdvit` command line: dataset generation, training with grid search,
//! evaluation and the analysis artifacts.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or config error, 3 internal
//! invariant violation. Logging is controlled by `SDVIT_LOG`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::analysis::{self, DatasetProbe};
use crate::autodiff::Tape;
use crate::checkpoint;
use crate::data::{self, DomainDataset, DomainSpec, Style, CLASS_NAMES};
use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::protocol::{self, evaluate, grid_search, Grid, RunReport, TrainConfig};
use crate::vit::ViTConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INVARIANT: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "sdvit",
    version,
    about = "ViT self-distillation experiments on held-out synthetic domains"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the four synthetic domains.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Leave-one-domain-out training with grid search over (lambda, tau).
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on one dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Block-wise accuracy, confusion matrix and token dump.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention maps of the first `n` examples plus foreground ratios.
    Attn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-target comparison of two runs (baseline first).
    Compare {
        /// Report file or directory of reports; give exactly two.
        #[arg(long = "report", num_args = 1, required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    target: String,
    #[arg(long)]
    out: PathBuf,
    /// Directory holding one dataset per domain; overrides the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Train without distillation; lambda is ignored.
    #[arg(long)]
    erm: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
}

/// Contents of `--config`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ViTConfig,
    pub train: TrainConfig,
    pub grid: Grid,
    pub trials: usize,
    /// Base seed; trial `t` uses `seed + 100 t`, and its streams follow
    /// `init = s, data = s + 1, selector = s + 2, split = s + 3`.
    pub seed: u64,
    pub jobs: usize,
    pub data_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::default(),
            train: TrainConfig::default(),
            grid: Grid::default(),
            trials: 3,
            seed: 0,
            jobs: 1,
            data_dir: None,
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invariant(_) | Error::BackwardConsumed => EXIT_INVARIANT,
        _ => EXIT_DATA,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData {
            out,
            per_class,
            seed,
        } => gen_data(&out, per_class, seed),
        Command::Train(args) => train(args),
        Command::Eval { ckpt, data } => {
            let model = checkpoint::load(ckpt)?;
            let ds = data::load(data)?;
            let acc = evaluate(&model, &ds)?;
            println!(
                "{}",
                serde_json::json!({ "domain": ds.domain, "accuracy": acc })
            );
            Ok(())
        }
        Command::Probe { ckpt, data, out } => probe(&ckpt, &data, &out),
        Command::Attn { ckpt, data, n, out } => attn(&ckpt, &data, n, &out),
        Command::Compare { reports, out } => compare_cmd(&reports, &out),
    }
}

fn gen_data(out: &Path, per_class: usize, seed: u64) -> Result<()> {
    for spec in DomainSpec::all_standard() {
        let ds = DomainDataset::generate(&spec, per_class, data::domain_seed(seed, spec.style))?;
        let m = data::save(&ds, out.join(&spec.name))?;
        log::info!(
            "{}: {} images, images crc {:08x}",
            spec.name,
            m.count,
            m.images.crc32
        );
    }
    Ok(())
}

/// Loads the four standard domains from `dir/<name>`.
pub fn load_domains(dir: &Path) -> Result<Vec<DomainDataset>> {
    Style::ALL
        .iter()
        .map(|s| data::load(dir.join(s.name())))
        .collect()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => serde_json::from_slice::<ExperimentConfig>(&fs::read(p)?)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(j) = args.jobs {
        cfg.jobs = j;
    }
    if args.erm {
        cfg.train.distill = DistillConfig {
            tau: cfg.train.distill.tau,
            ..DistillConfig::erm()
        };
    }
    let data_dir = args
        .data
        .or(cfg.data_dir.clone())
        .ok_or_else(|| Error::Config("no data directory: pass --data or set data_dir".into()))?;
    let domains = load_domains(&data_dir)?;
    let target = domains
        .iter()
        .position(|d| d.domain == args.target)
        .ok_or_else(|| Error::Config(format!("unknown target domain {:?}", args.target)))?;
    let seeds = protocol::trial_seeds(cfg.seed, cfg.trials);
    let outcome = grid_search(
        &domains, target, &cfg.grid, &seeds, &cfg.model, &cfg.train, cfg.jobs,
    )?;
    fs::create_dir_all(&args.out)?;
    checkpoint::save(&outcome.models[0], args.out.join("checkpoint.sdvt"))?;
    write_json(&args.out.join("report.json"), &outcome.report)?;
    outcome
        .report
        .write_csv(fs::File::create(args.out.join("cells.csv"))?)?;
    outcome.report.trials[0].confusion.write_csv(
        fs::File::create(args.out.join("confusion.csv"))?,
        &CLASS_NAMES,
    )?;
    println!(
        "{} {}: {:.4} +- {:.4}",
        outcome.report.method, outcome.report.target, outcome.report.mean, outcome.report.std
    );
    Ok(())
}

fn probe(ckpt: &Path, data_dir: &Path, out: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let ds = data::load(data_dir)?;
    let p = DatasetProbe::run(&model, &ds)?;
    fs::create_dir_all(out)?;
    let mut w = csv::Writer::from_path(out.join("probe.csv"))?;
    w.write_record(["block", "accuracy"])?;
    for (b, acc) in p.block_probe().accuracy.iter().enumerate() {
        w.write_record([b.to_string(), acc.to_string()])?;
    }
    w.flush()?;
    p.confusion(model.config().num_classes)?
        .write_csv(fs::File::create(out.join("confusion.csv"))?, &CLASS_NAMES)?;
    let all: Vec<usize> = (0..ds.len()).collect();
    analysis::write_token_dump(&model, &ds, &all, fs::File::create(out.join("tokens.csv"))?)?;
    Ok(())
}

fn attn(ckpt: &Path, data_dir: &Path, n: usize, out: &Path) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let ds = data::load(data_dir)?;
    if n == 0 || n > ds.len() {
        return Err(Error::Input(format!("--n must be in 1..={}", ds.len())));
    }
    protocol::check_compatible(&model, &ds)?;
    fs::create_dir_all(out)?;
    let indices: Vec<usize> = (0..n).collect();
    let tape = Tape::inference();
    let trace = model.forward(&tape, &ds.batch(&indices)?)?;
    let mut w = csv::Writer::from_path(out.join("foreground.csv"))?;
    w.write_record(["example_id", "label", "foreground_ratio"])?;
    for &i in &indices {
        analysis::export_attention(&trace, i, ds.image(i), out.join(format!("attn_{i:04}.ppm")))?;
        let ratio = analysis::foreground_ratio(&trace, i, ds.mask(i))?;
        w.write_record([i.to_string(), ds.labels[i].to_string(), ratio.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reports from a file, or from every `report.json` directly under a
/// directory or one level below it.
pub fn read_reports(path: &Path) -> Result<Vec<RunReport>> {
    if path.is_file() {
        return Ok(vec![serde_json::from_slice(&fs::read(path)?)?]);
    }
    let mut files = Vec::new();
    let own = path.join("report.json");
    if own.is_file() {
        files.push(own);
    }
    let mut subdirs: Vec<PathBuf> = fs::read_dir(path)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    subdirs.sort();
    files.extend(
        subdirs
            .into_iter()
            .map(|d| d.join("report.json"))
            .filter(|f| f.is_file()),
    );
    if files.is_empty() {
        return Err(Error::Input(format!(
            "no report.json found under {}",
            path.display()
        )));
    }
    files
        .iter()
        .map(|f| Ok(serde_json::from_slice(&fs::read(f)?)?))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub target: String,
    pub baseline: f64,
    pub method: f64,
    pub delta: f64,
    pub baseline_overlap: f64,
    pub method_overlap: f64,
    pub overlap_delta: f64,
    /// Relative training-time increase of the method, in percent.
    pub overhead_pct: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub method: String,
    /// One row per shared target, then an `Avg` row.
    pub rows: Vec<ComparisonRow>,
}

fn mean_overlap(r: &RunReport) -> f64 {
    r.trials.iter().map(|t| t.overlap).sum::<f64>() / r.trials.len() as f64
}

/// Per-target accuracy, overlap and overhead deltas of `method` against
/// `baseline`, over the targets both contain, in baseline order.
pub fn compare(baseline: &[RunReport], method: &[RunReport]) -> Result<Comparison> {
    let mut rows = Vec::new();
    for b in baseline {
        let Some(m) = method.iter().find(|m| m.target == b.target) else {
            continue;
        };
        let (bo, mo) = (mean_overlap(b), mean_overlap(m));
        rows.push(ComparisonRow {
            target: b.target.clone(),
            baseline: b.mean,
            method: m.mean,
            delta: m.mean - b.mean,
            baseline_overlap: bo,
            method_overlap: mo,
            overlap_delta: mo - bo,
            overhead_pct: analysis::overhead_report(b.mean_train_secs(), m.mean_train_secs())?,
        });
    }
    if rows.is_empty() {
        return Err(Error::Input("the two runs share no target domain".into()));
    }
    let n = rows.len() as f64;
    let avg = |f: fn(&ComparisonRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let avg_row = ComparisonRow {
        target: "Avg".into(),
        baseline: avg(|r| r.baseline),
        method: avg(|r| r.method),
        delta: avg(|r| r.delta),
        baseline_overlap: avg(|r| r.baseline_overlap),
        method_overlap: avg(|r| r.method_overlap),
        overlap_delta: avg(|r| r.overlap_delta),
        overhead_pct: avg(|r| r.overhead_pct),
    };
    rows.push(avg_row);
    Ok(Comparison {
        baseline: baseline[0].method.clone(),
        method: method[0].method.clone(),
        rows,
    })
}

fn compare_cmd(reports: &[PathBuf], out: &Path) -> Result<()> {
    let [a, b] = reports else {
        return Err(Error::Input(format!(
            "compare needs exactly two --report, got {}",
            reports.len()
        )));
    };
    let cmp = compare(&read_reports(a)?, &read_reports(b)?)?;
    fs::create_dir_all(out)?;
    write_json(&out.join("compare.json"), &cmp)?;
    let mut w = csv::Writer::from_path(out.join("compare.csv"))?;
    for row in &cmp.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
