//! `tuna`: train, evaluate and inspect TUNA adapters on a Swin backbone.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{info, warn};
use tuna_core::config::RunConfig;
use tuna_core::data::pnm::read_pgm;
use tuna_core::data::stats::{scan_areas, DatasetStats};
use tuna_core::data::{generate_synthetic, load_dataset, save_dataset, LoadedDataset, MASK_SUFFIX};
use tuna_core::gradcheck::{self, Options, DIFFERENTIABLE_OPS};
use tuna_core::params::CountFilter;
use tuna_core::train::{self, Checkpoint, ConfusionMatrix};
use tuna_core::{seeded_rng, Error, Result};

/// Config files compiled into the binary, addressable by stem.
const BUNDLED: &[(&str, &str)] = &[
    ("toy", include_str!("../../../configs/toy.cfg")),
    ("toy_sequential", include_str!("../../../configs/toy_sequential.cfg")),
    ("toy_linear_probe", include_str!("../../../configs/toy_linear_probe.cfg")),
    ("toy_adaptive_none", include_str!("../../../configs/toy_adaptive_none.cfg")),
    ("toy_adaptive_conv", include_str!("../../../configs/toy_adaptive_conv.cfg")),
    ("toy_adaptive_emb", include_str!("../../../configs/toy_adaptive_emb.cfg")),
    ("toy_adaptive_both", include_str!("../../../configs/toy_adaptive_both.cfg")),
    ("swin_l", include_str!("../../../configs/swin_l.cfg")),
];

const CHECKPOINT_FILE: &str = "checkpoint.bin";
const LOG_FILE: &str = "metrics.log";
const CONFIG_FILE: &str = "config.cfg";

#[derive(Parser)]
#[command(name = "tuna", version, about = "TUNA adapters for Swin segmentation backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file, or the name of a bundled config (e.g. `toy`, `swin_l`).
    #[arg(long)]
    config: Option<String>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Filter {
    All,
    Trainable,
    #[value(name = "adapters_only")]
    AdaptersOnly,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and write checkpoint and metric log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long, default_value = "runs/latest")]
        out: PathBuf,
    },
    /// Score a checkpoint (or a directory of predicted masks) on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Extra config applied on top of the one stored in the checkpoint.
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory; defaults to the config's evaluation data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Score `<id>.mask.pgm` predictions from this directory instead of a model.
        #[arg(long, conflicts_with = "checkpoint")]
        pred: Option<PathBuf>,
        /// Load even if the checkpoint was trained against a different backbone.
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        /// Corrupt the analytic gradient of this case (harness self-test).
        #[arg(long, hide = true)]
        perturb: Option<String>,
    },
    /// Print parameter counts for a config.
    CountParams {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        filter: Option<Filter>,
    },
    /// Resolution range ratio and area Gini coefficient of an image folder.
    DataStats { dir: PathBuf },
    /// Write the synthetic dataset described by `data.*` and `head.num_classes`.
    GenSynth {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format(_) => 1,
        Error::Config(_) | Error::Data(_) | Error::Contract(_) | Error::Dimension { .. } => 2,
        Error::Compatibility(_) => 3,
        Error::Numerical(_) => 4,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.to_path_buf(), source }
}

fn config_text(name: &str) -> Result<String> {
    let path = Path::new(name);
    if !path.exists() {
        let stem = name.strip_suffix(".cfg").unwrap_or(name);
        if let Some((_, text)) = BUNDLED.iter().find(|(n, _)| *n == stem) {
            return Ok(text.to_string());
        }
    }
    fs::read_to_string(path).map_err(io_err(path))
}

/// `base`, then the config file, then every `--set`, then `TUNA_SEED`.
/// Echoes the result before returning.
fn resolve(mut base: RunConfig, args: &ConfigArgs) -> Result<RunConfig> {
    if let Some(name) = &args.config {
        base.apply_text(&config_text(name)?)?;
    }
    for s in &args.set {
        base.apply_override(s)?;
    }
    base.resolve_seed_from_env()?;
    base.validate()?;
    info!("resolved config:");
    for (k, v) in base.entries() {
        info!("  {k} = {v}");
    }
    Ok(base)
}

fn report_skipped(set: &LoadedDataset) {
    for (id, e) in &set.skipped {
        warn!("skipped sample {id}: {e}");
    }
}

fn cmd_train(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve(RunConfig::default(), args)?;
    let tc = cfg.train_config()?;
    let data = cfg.training_data()?;
    report_skipped(&data);
    let eval = match &cfg.data.eval_path {
        Some(_) => {
            let e = cfg.eval_data()?;
            report_skipped(&e);
            Some(e)
        }
        None => None,
    };
    let eval_samples = eval.as_ref().map_or(&data.samples, |e| &e.samples);
    let mut model = cfg.build_model()?;
    info!(
        "{} samples, {} trainable of {} parameters",
        data.samples.len(),
        model.count_params(CountFilter::Trainable),
        model.count_params(CountFilter::All)
    );

    fs::create_dir_all(out).map_err(io_err(out))?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text()).map_err(io_err(&out.join(CONFIG_FILE)))?;
    let log_path = out.join(LOG_FILE);
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err(&log_path))?);
    let mut write_err = None;
    let report = train::train(&mut model, &data.samples, eval_samples, &tc, |rec| {
        println!("{rec}");
        if let Err(e) = writeln!(log, "{rec}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&log_path)(e));
    }
    log.flush().map_err(io_err(&log_path))?;

    let ckpt_path = out.join(CHECKPOINT_FILE);
    Checkpoint::trainable(&model.store, cfg.to_text()).save(&ckpt_path)?;
    match report.final_loss() {
        Some(l) => println!("final_loss={l:.6} {}", report.final_metrics),
        None => println!("final_loss=nan {}", report.final_metrics),
    }
    info!("wrote {}", ckpt_path.display());
    Ok(())
}

fn predicted_confusion(pred_dir: &Path, set: &LoadedDataset, num_classes: usize, ignore: u32) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(num_classes);
    for s in &set.samples {
        let path = pred_dir.join(format!("{}{MASK_SUFFIX}", s.id));
        let (h, w, pred) = read_pgm(&path)?;
        if (h, w) != (s.height(), s.width()) {
            return Err(Error::Data(format!(
                "prediction {} is {h}x{w}, ground truth is {}x{}",
                path.display(),
                s.height(),
                s.width()
            )));
        }
        cm.accumulate(&pred, &s.mask, ignore)?;
    }
    Ok(cm)
}

fn cmd_eval(
    checkpoint: Option<&Path>,
    args: &ConfigArgs,
    data: Option<&Path>,
    pred: Option<&Path>,
    force: bool,
) -> Result<()> {
    let ckpt = checkpoint.map(Checkpoint::load).transpose()?;
    let base = match &ckpt {
        Some(c) => RunConfig::parse(&c.config)?,
        None => RunConfig::default(),
    };
    let cfg = resolve(base, args)?;
    let (k, ignore) = (cfg.model.head.num_classes, cfg.model.ignore_index);
    let set = match data {
        Some(dir) => load_dataset(dir, k, ignore)?,
        None => cfg.eval_data()?,
    };
    report_skipped(&set);
    if set.samples.is_empty() {
        return Err(Error::Config("empty dataset: no valid samples to evaluate".into()));
    }

    let cm = match (pred, &ckpt) {
        (Some(dir), _) => predicted_confusion(dir, &set, k, ignore)?,
        (None, Some(c)) => {
            let mut model = cfg.build_model()?;
            c.apply(&mut model.store, force)?;
            train::confusion(&model, &set.samples)?
        }
        (None, None) => return Err(Error::Config("eval needs --checkpoint or --pred".into())),
    };
    let m = cm.metrics();
    println!("{m}");
    println!("class\tIoU");
    for (c, iou) in m.per_class_iou.iter().enumerate() {
        match iou {
            Some(v) => println!("{c}\t{v:.4}"),
            None => println!("{c}\tn/a"),
        }
    }
    Ok(())
}

fn cmd_gradcheck(module: Option<&str>, perturb: Option<String>) -> Result<()> {
    if let Some(p) = &perturb {
        if !gradcheck::suite().iter().any(|c| c.name == p) {
            return Err(Error::Config(format!("unknown gradcheck case {p:?}")));
        }
    }
    let opts = Options { perturb, ..Options::default() };
    let report = gradcheck::run_suite(module, &opts)?;
    for c in &report.cases {
        println!("{c}");
    }
    if module.is_none() {
        println!(
            "coverage {}/{} ops{}",
            DIFFERENTIABLE_OPS.len() - report.uncovered.len(),
            DIFFERENTIABLE_OPS.len(),
            if report.uncovered.is_empty() {
                String::new()
            } else {
                format!(" missing: {}", report.uncovered.join(","))
            }
        );
    }
    let failures = report.failures();
    if !failures.is_empty() {
        return Err(Error::Numerical(format!(
            "gradient check failed beyond tolerance {:e}: {}",
            opts.tolerance,
            failures.join(", ")
        )));
    }
    if !report.uncovered.is_empty() {
        return Err(Error::Contract(format!("ops without a gradient check: {}", report.uncovered.join(", "))));
    }
    println!("all {} cases passed", report.cases.len());
    Ok(())
}

fn cmd_count_params(args: &ConfigArgs, filter: Option<Filter>) -> Result<()> {
    let cfg = resolve(RunConfig::default(), args)?;
    let m = &cfg.model;
    let total = m.count_params(CountFilter::All);
    let trainable = m.count_params(CountFilter::Trainable);
    let adapters = m.count_params(CountFilter::AdaptersOnly);
    if let Some(f) = filter {
        let (name, n) = match f {
            Filter::All => ("all", total),
            Filter::Trainable => ("trainable", trainable),
            Filter::AdaptersOnly => ("adapters_only", adapters),
        };
        println!("filter={name} count={n}");
    }
    println!("total={total}");
    println!("trainable={trainable}");
    println!("adapters_only={adapters}");
    println!("trainable_fraction={:.4}", trainable as f64 / total as f64);
    Ok(())
}

fn cmd_data_stats(dir: &Path) -> Result<()> {
    info!("scanning {}", dir.display());
    let stats = DatasetStats::from_areas(scan_areas(dir)?)?;
    println!("{stats}");
    Ok(())
}

fn cmd_gen_synth(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve(RunConfig::default(), args)?;
    let samples = generate_synthetic(&cfg.synth_spec(), &mut seeded_rng(cfg.data.seed))?;
    save_dataset(out, &samples)?;
    println!("wrote {} samples to {}", samples.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out } => cmd_train(&cfg, &out),
        Command::Eval { checkpoint, cfg, data, pred, force } => {
            cmd_eval(checkpoint.as_deref(), &cfg, data.as_deref(), pred.as_deref(), force)
        }
        Command::Gradcheck { module, perturb } => cmd_gradcheck(module.as_deref(), perturb),
        Command::CountParams { cfg, filter } => cmd_count_params(&cfg, filter),
        Command::DataStats { dir } => cmd_data_stats(&dir),
        Command::GenSynth { cfg, out } => cmd_gen_synth(&cfg, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
