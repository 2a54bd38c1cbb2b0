//! Command-line entry points.
//!
//! Exit codes: 0 success, 1 configuration or contract error (including bad
//! arguments), 2 I/O or file-format error, 3 numeric failure or interrupted
//! run, 4 internal error (a panic).

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, OnceLock};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::analysis::{self, ProbeConfig};
use crate::checkpoint::Checkpoint;
use crate::config::{Method, Schedule, TrainConfig};
use crate::data::{self, Dataset, DatasetId, Split};
use crate::error::{Error, Result};
use crate::nn::Model;
use crate::partition::Partition;
use crate::seed::{self, SeedPlan};
use crate::tensor::Tensor;
use crate::trainer::{fit, RunResult};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_INTERNAL: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Contract(_) | Error::Config(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Format { .. } => EXIT_IO,
        Error::Numeric(_) => EXIT_NUMERIC,
    }
}

#[derive(Debug, Parser)]
#[command(name = "hpff", version, about = "Locally supervised training with hierarchical and patch-fused auxiliary heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Linear probes at every module boundary of a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        /// Modules whose boundaries are probed; defaults to the checkpoint's.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Layer-wise CKA between two checkpoints.
    Cka {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1000)]
        examples: usize,
    },
    /// Estimated and measured auxiliary-head activation memory.
    Memstat {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Train several configurations in turn and tabulate test error.
    Compare {
        #[arg(long = "config", required = true, num_args = 1..)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data_root: Option<PathBuf>,
    },
    /// Print the effective configuration, defaults included.
    PrintConfig {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_n: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// serial or parallel
    #[arg(long)]
    pub schedule: Option<String>,
    #[arg(long)]
    pub train_subset: Option<usize>,
    #[arg(long)]
    pub test_subset: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    #[arg(long, default_value = "cifar10")]
    pub dataset: String,
    #[arg(long)]
    pub data_root: Option<PathBuf>,
    #[arg(long)]
    pub train_subset: Option<usize>,
    #[arg(long)]
    pub test_subset: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(m) = &self.method {
            cfg.run.method = m.parse()?;
        }
        if let Some(k) = self.k {
            cfg.partition.modules = k;
        }
        if let Some(s) = self.seed {
            cfg.run.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.run.epochs = e;
        }
        if let Some(o) = &self.out {
            cfg.run.out_dir = o.clone();
        }
        if let Some(a) = &self.arch {
            cfg.run.arch = a.clone();
        }
        if let Some(d) = &self.dataset {
            cfg.data.dataset = d.parse()?;
        }
        if let Some(r) = &self.data_root {
            cfg.data.root = Some(r.clone());
        }
        if let Some(b) = self.batch_size {
            cfg.run.batch_size = b;
        }
        if let Some(n) = self.patch_n {
            cfg.partition.patch_n = n;
        }
        if let Some(a) = self.alpha {
            cfg.loss.alpha = Some(a);
        }
        if let Some(s) = &self.schedule {
            cfg.run.schedule = match s.as_str() {
                "serial" => Schedule::Serial,
                "parallel" => Schedule::Parallel,
                other => return Err(Error::config(format!("unknown schedule {other:?}"))),
            };
        }
        if self.train_subset.is_some() {
            cfg.data.train_subset = self.train_subset;
        }
        if self.test_subset.is_some() {
            cfg.data.test_subset = self.test_subset;
        }
        Ok(())
    }
}

pub fn resolve_config(path: Option<&Path>, overrides: &Overrides) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn maybe_subset(ds: Dataset, n: Option<usize>, seed: u64, list: Option<PathBuf>, out: &mut Vec<PathBuf>) -> Result<Dataset> {
    let Some(n) = n else { return Ok(ds) };
    let idx = data::subset_indices(&ds, n, seed)?;
    if let Some(path) = list {
        data::write_index_list(&path, &idx)?;
        out.push(path);
    }
    ds.select(&idx)
}

/// Train and test splits for `cfg`, subset as configured. Subset index
/// lists are written under the run directory and returned as artifacts.
pub fn load_run_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset, Vec<PathBuf>)> {
    let root = data::data_root(cfg.data.root.as_deref());
    let seeds = SeedPlan::from_master(cfg.run.seed);
    let out = &cfg.run.out_dir;
    create_dir(out)?;
    let mut lists = Vec::new();
    let train = data::load(cfg.data.dataset, &root, Split::Train)?;
    let train = maybe_subset(train, cfg.data.train_subset, seeds.subset, Some(out.join("train_subset.txt")), &mut lists)?;
    let test = data::load(cfg.data.dataset, &root, Split::Test)?;
    let test_seed = seed::derive(seeds.subset, "test");
    let test = maybe_subset(test, cfg.data.test_subset, test_seed, Some(out.join("test_subset.txt")), &mut lists)?;
    Ok((train, test, lists))
}

fn load_split(args: &DataArgs, split: Split, n: Option<usize>) -> Result<Dataset> {
    let id: DatasetId = args.dataset.parse()?;
    let root = data::data_root(args.data_root.as_deref());
    let ds = data::load(id, &root, split)?;
    maybe_subset(ds, n, seed::derive(args.seed, &format!("{split:?}")), None, &mut Vec::new())
}

pub fn cmd_train(cfg: &TrainConfig, cancel: Option<&AtomicBool>) -> Result<RunResult> {
    let (train, test, lists) = load_run_data(cfg)?;
    fit(cfg, &train, &test, &lists, cancel)
}

fn load_model(path: &Path) -> Result<(Checkpoint, Model<f64>)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.build_model()?;
    Ok((ck, model))
}

pub fn cmd_probe(checkpoint: &Path, data_args: &DataArgs, out: &Path, k: Option<usize>) -> Result<PathBuf> {
    let (ck, model) = load_model(checkpoint)?;
    let train = load_split(data_args, Split::Train, data_args.train_subset)?;
    let test = load_split(data_args, Split::Test, data_args.test_subset)?;
    let k = k.unwrap_or(ck.header.modules).max(1);
    let layers = analysis::module_boundaries(model.num_units(), k.min(model.num_units()));
    let results = analysis::probe_layers(&model, &train, &test, &layers, &ProbeConfig::default(), 500)?;
    create_dir(out)?;
    let path = out.join("probe.csv");
    analysis::write_text(&path, &analysis::probe_csv(&results))?;
    Ok(path)
}

pub fn cmd_cka(a: &Path, b: &Path, data_args: &DataArgs, examples: usize, out: &Path) -> Result<PathBuf> {
    let (_, ma) = load_model(a)?;
    let (_, mb) = load_model(b)?;
    analysis::check_same_architecture(&ma, &mb)?;
    let test = load_split(data_args, Split::Test, None)?;
    let test = if examples < test.len() {
        data::subset(&test, examples, seed::derive(data_args.seed, "cka"))?
    } else {
        test
    };
    let layers = analysis::hidden_layers(&ma);
    let report = analysis::layerwise_cka_report(&ma, &mb, &test, &layers, 500)?;
    create_dir(out)?;
    let path = out.join("cka.csv");
    analysis::write_text(&path, &report.csv())?;
    Ok(path)
}

/// One batch of seeded inputs at the configured shape; byte counts do not
/// depend on pixel values, so no dataset files are read.
pub fn cmd_memstat(cfg: &TrainConfig) -> Result<(analysis::MemoryReport, PathBuf)> {
    let seeds = SeedPlan::from_master(cfg.run.seed);
    let shape = cfg.data.dataset.input_shape();
    let model = crate::nn::build_preset::<f32>(&cfg.run.arch, &shape, data::NUM_CLASSES, seeds.init)?;
    let k = cfg.partition.modules;
    let p = Partition::new(model, k, None, &cfg.aux_spec(data::NUM_CLASSES), seeds.init)?;
    let b = cfg.run.batch_size;
    let mut rng = seed::rng(seeds.master, "memstat");
    let x: Vec<f32> = (0..b * shape.iter().product::<usize>())
        .map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0))
        .collect();
    let targets: Vec<usize> = (0..b).map(|i| i % data::NUM_CLASSES).collect();
    let x = Tensor::new(x, [b, shape[0], shape[1], shape[2]])?;
    let report = analysis::memory_report(&p, &x, &targets, cfg.partition.patch_n.max(2))?;
    create_dir(&cfg.run.out_dir)?;
    let path = cfg.run.out_dir.join("memory.json");
    analysis::write_text(&path, &serde_json::to_string_pretty(&report).expect("report serializes"))?;
    Ok((report, path))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub config: PathBuf,
    pub method: Method,
    pub modules: usize,
    pub seed: u64,
    pub epochs_completed: usize,
    pub test_error: f64,
    pub interrupted: bool,
    pub run_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub rows: Vec<CompareRow>,
    pub complete: bool,
}

impl CompareSummary {
    pub fn csv(&self) -> String {
        let mut s = String::from("method,k,seed,test_error,epochs,interrupted\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.method, r.modules, r.seed, r.test_error, r.epochs_completed, r.interrupted
            ));
        }
        s
    }
}

/// Runs every config in order, each under `out/run{i}-{method}-k{K}`. Stops
/// early when `cancel` is raised; the partial summary is still written.
pub fn cmd_compare(configs: &[PathBuf], out: &Path, data_root: Option<&Path>, cancel: &AtomicBool) -> Result<CompareSummary> {
    let mut loaded = Vec::new();
    for path in configs {
        let mut cfg = TrainConfig::load(path)?;
        if let Some(r) = data_root {
            cfg.data.root = Some(r.to_path_buf());
        }
        cfg.validate()?;
        loaded.push((path.clone(), cfg));
    }
    create_dir(out)?;
    let mut rows = Vec::new();
    let mut complete = true;
    for (i, (path, mut cfg)) in loaded.into_iter().enumerate() {
        if cancel.load(Ordering::Relaxed) {
            complete = false;
            break;
        }
        cfg.run.out_dir = out.join(format!("run{i}-{}-k{}", cfg.run.method, cfg.effective_modules()));
        let r = cmd_train(&cfg, Some(cancel))?;
        rows.push(CompareRow {
            config: path,
            method: cfg.run.method,
            modules: cfg.effective_modules(),
            seed: cfg.run.seed,
            epochs_completed: r.epochs_completed,
            test_error: 100.0 * (1.0 - r.final_test_accuracy),
            interrupted: r.interrupted,
            run_dir: cfg.run.out_dir.clone(),
        });
        if r.interrupted {
            complete = false;
            break;
        }
    }
    let summary = CompareSummary { rows, complete };
    analysis::write_text(&out.join("summary.csv"), &summary.csv())?;
    analysis::write_text(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

fn interrupt_flag() -> Arc<AtomicBool> {
    static FLAG: OnceLock<Arc<AtomicBool>> = OnceLock::new();
    FLAG.get_or_init(|| {
        let flag = Arc::new(AtomicBool::new(false));
        let f = flag.clone();
        // A second handler cannot be installed; the run is simply not interruptible then.
        let _ = ctrlc::set_handler(move || f.store(true, Ordering::SeqCst));
        flag
    })
    .clone()
}

fn execute(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Train { config, overrides } => {
            let cfg = resolve_config(config.as_deref(), &overrides)?;
            let flag = interrupt_flag();
            let r = cmd_train(&cfg, Some(&flag))?;
            println!(
                "{} K={} epochs={} test_accuracy={:.4} manifest={}",
                cfg.run.method,
                cfg.effective_modules(),
                r.epochs_completed,
                r.final_test_accuracy,
                r.manifest_path.display()
            );
            if r.interrupted {
                eprintln!("interrupted after {} epochs", r.epochs_completed);
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::Probe { checkpoint, data, out, k } => {
            println!("{}", cmd_probe(&checkpoint, &data, &out, k)?.display());
        }
        Command::Cka { a, b, data, out, examples } => {
            println!("{}", cmd_cka(&a, &b, &data, examples, &out)?.display());
        }
        Command::Memstat { config, overrides } => {
            let cfg = resolve_config(config.as_deref(), &overrides)?;
            let (report, _) = cmd_memstat(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Command::Compare { configs, out, data_root } => {
            let flag = interrupt_flag();
            let s = cmd_compare(&configs, &out, data_root.as_deref(), &flag)?;
            print!("{}", s.csv());
            if !s.complete {
                eprintln!("comparison interrupted; summary is partial");
                return Ok(EXIT_NUMERIC);
            }
        }
        Command::PrintConfig { config, overrides } => {
            print!("{}", resolve_config(config.as_deref(), &overrides)?.to_toml());
        }
    }
    Ok(EXIT_OK)
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are reported on stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match std::panic::catch_unwind(|| execute(cli)) {
        Ok(Ok(code)) => code,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
        Err(_) => {
            eprintln!("error: internal failure");
            EXIT_INTERNAL
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_bad_method() {
        let o = Overrides {
            method: Some("local".into()),
            k: Some(8),
            seed: Some(7),
            ..Default::default()
        };
        let cfg = resolve_config(None, &o).unwrap();
        assert_eq!((cfg.run.method, cfg.partition.modules, cfg.run.seed), (Method::Local, 8, 7));
        let bad = Overrides {
            method: Some("dgl++".into()),
            ..Default::default()
        };
        assert_eq!(exit_code(&resolve_config(None, &bad).unwrap_err()), EXIT_CONFIG);
    }

    #[test]
    fn argument_errors_map_to_config_exit() {
        assert_eq!(run(["hpff", "train", "--k", "many"]), EXIT_CONFIG);
        assert_eq!(run(["hpff", "frobnicate"]), EXIT_CONFIG);
    }
}
