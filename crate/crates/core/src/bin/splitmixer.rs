use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use splitmixer::bench::{bench, BenchConfig};
use splitmixer::checkpoint::Checkpoint;
use splitmixer::config::{DataSource, RunConfig};
use splitmixer::cost::{count_flops, sweep, sweep_csv, Comparison, SweepGrid};
use splitmixer::data::{load_cifar10, synthetic_dataset, Dataset};
use splitmixer::model::{dump_features, Model, Variant};
use splitmixer::train::{evaluate, train};
use splitmixer::verify::{self, FORWARD_TOLERANCE, SEPARABLE_TOLERANCE};
use splitmixer::{Error, Result};

/// Largest hidden width accepted by the full-model gradient check.
const GRADCHECK_MAX_H: usize = 16;

#[derive(Parser)]
#[command(name = "splitmixer", version, about = "SplitMixer models: cost analysis, training and verification")]
struct Cli {
    /// Worker threads for batch-parallel kernels; results are only guaranteed
    /// reproducible with 1.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    /// Seeds model initialization, data shuffling and synthetic data.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Config file with [model] [data] [train] [output] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Extra `section.key=value` settings, applied after the file and before flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Per-layer parameter and MAC counts, savings and the ConvMixer comparison.
    Analyze(AnalyzeArgs),
    /// Train a model; writes metrics.csv, best.spmx and last.spmx.
    Train(TrainArgs),
    /// Accuracy and loss of a checkpoint on the configured test data.
    Eval(EvalArgs),
    /// Finite-difference gradient check of a small model.
    Gradcheck(GradcheckArgs),
    /// III versus strided-3D equivalence, or the separable-kernel identity.
    EquivCheck(EquivArgs),
    /// Forward throughput in eval mode.
    Bench(BenchArgs),
    /// Write per-block feature maps of one image as PGM files.
    DumpFeatures(DumpArgs),
}

#[derive(Args, Default)]
struct ModelArgs {
    /// Model name such as SplitMixer-I-256/8 or ConvMixer-256/8.
    #[arg(long)]
    model: Option<String>,
    /// Switch variant (I, II, III, IV, V, 3D, ConvMixer) keeping width and depth.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    segments: Option<usize>,
    /// Patch size.
    #[arg(long)]
    patch: Option<usize>,
    /// Spatial kernel size.
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
}

impl ModelArgs {
    fn assignments(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut push = |k, v: Option<String>| {
            if let Some(v) = v {
                out.push((k, v));
            }
        };
        push("model.name", self.model.clone());
        push("model.variant", self.variant.clone());
        push("model.alpha", self.alpha.clone());
        push("model.segments", self.segments.map(|v| v.to_string()));
        push("model.p", self.patch.map(|v| v.to_string()));
        push("model.k", self.kernel.map(|v| v.to_string()));
        push("model.classes", self.classes.map(|v| v.to_string()));
        out
    }
}

#[derive(Args, Default)]
struct DataArgs {
    /// CIFAR-10 root, or `synthetic`; defaults to $SPMX_DATA_DIR.
    #[arg(long)]
    data: Option<String>,
}

impl DataArgs {
    fn assignments(&self) -> Vec<(&'static str, String)> {
        match self.data.as_deref() {
            None => Vec::new(),
            Some("synthetic") => vec![("data.source", "synthetic".into())],
            Some(path) => vec![("data.source", "cifar".into()), ("data.path", path.into())],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepKind {
    Alpha,
    Segments,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Input side length.
    #[arg(long, default_value_t = 32)]
    input: usize,
    /// Sweep the variant's knob over the standard grid instead.
    #[arg(long, value_enum)]
    sweep: Option<SweepKind>,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Gradient-norm cap, or `none`.
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    no_augment: bool,
    /// Write 0 in the seconds column so metrics files compare byte-for-byte.
    #[arg(long)]
    no_wall_time: bool,
    /// Stop after this many epochs (the schedule still spans --epochs).
    #[arg(long)]
    stop_after: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from <out>/last.spmx.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value = "SplitMixer-I-8/2")]
    model: String,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 8)]
    input: usize,
    /// Also check every primitive's backward rule.
    #[arg(long)]
    ops: bool,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct EquivArgs {
    #[arg(long, default_value_t = 8)]
    h: usize,
    #[arg(long, default_value_t = 2)]
    segments: usize,
    /// Check the separable-kernel identity instead.
    #[arg(long)]
    separable: bool,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    batches: usize,
    #[arg(long, default_value_t = 32)]
    input: usize,
}

#[derive(Args)]
struct DumpArgs {
    /// Trained weights; without it a freshly initialized model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    data: DataArgs,
    /// Index of the test image.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long, default_value = "features")]
    out: PathBuf,
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Cli {
    /// Defaults, then the config file, then `--set`, then subcommand flags, then `--seed`.
    fn run_config(&self, flags: &[(&str, String)]) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for o in &self.overrides {
            cfg.apply_override(o)?;
        }
        for (k, v) in flags {
            cfg.set(k, v)?;
        }
        if let Some(seed) = self.seed {
            cfg.model_seed = seed;
            cfg.train.data_seed = seed;
            cfg.data.synthetic_seed = seed;
        }
        cfg.model.validate()?;
        Ok(cfg)
    }
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let (train_set, test_set) = match d.source {
        DataSource::Synthetic => (
            synthetic_dataset(d.synthetic_seed, d.synthetic_train, d.synthetic_classes, d.synthetic_size, d.synthetic_noise)?,
            synthetic_dataset(
                d.synthetic_seed.wrapping_add(1),
                d.synthetic_test,
                d.synthetic_classes,
                d.synthetic_size,
                d.synthetic_noise,
            )?,
        ),
        DataSource::Cifar => load_cifar10(&d.cifar_root()?)?,
    };
    let train_set = if d.per_class > 0 { train_set.subset_per_class(d.per_class)? } else { train_set };
    Ok((train_set, test_set))
}

fn analyze(cli: &Cli, args: &AnalyzeArgs) -> Result<()> {
    let cfg = cli.run_config(&args.model.assignments())?;
    let hw = (args.input, args.input);
    if let Some(kind) = args.sweep {
        let mut base = cfg.model;
        let grid = match kind {
            SweepKind::Alpha => SweepGrid::default_alpha(),
            SweepKind::Segments => SweepGrid::default_segments(),
        };
        // A bare `--sweep` on the default model switches to a variant that has the knob.
        if args.model.model.is_none() && args.model.variant.is_none() {
            let variant = match kind {
                SweepKind::Alpha => "I",
                SweepKind::Segments => "II",
            };
            let mut r = RunConfig { model: base, ..RunConfig::default() };
            r.set("model.variant", variant)?;
            base = r.model;
        }
        let rows = sweep(&base, &grid, hw)?;
        let csv = sweep_csv(&rows);
        println!("# {} sweep at input {}x{}", base.name(), args.input, args.input);
        print!("{csv}");
        if let Some(path) = &args.csv {
            write_file(path, &csv)?;
        }
        return Ok(());
    }
    let report = count_flops(&cfg.model, hw)?;
    print!("{}", report.to_table());
    let built = Model::<f32>::build(cfg.model, cfg.model_seed)?.trainable_params() as u64;
    if built != report.trainable_params() {
        return Err(Error::Verification(format!(
            "cost model counts {} parameters, built model holds {built}",
            report.trainable_params()
        )));
    }
    println!("total: {} params, {} MACs", report.trainable_params(), report.macs());
    if cfg.model.variant != Variant::ConvMixer {
        println!("{}", Comparison::new(&cfg.model, hw)?.summary());
    }
    if let Some(path) = &args.csv {
        write_file(path, &report.to_csv())?;
    }
    Ok(())
}

fn train_cmd(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut flags = args.model.assignments();
    flags.extend(args.data.assignments());
    let mut push = |k, v: Option<String>| {
        if let Some(v) = v {
            flags.push((k, v));
        }
    };
    push("train.epochs", args.epochs.map(|v| v.to_string()));
    push("train.batch", args.batch.map(|v| v.to_string()));
    push("train.max_lr", args.lr.map(|v| v.to_string()));
    push("train.weight_decay", args.weight_decay.map(|v| v.to_string()));
    push("train.clip", args.clip.clone());
    push("train.stop_after", args.stop_after.map(|v| v.to_string()));
    push("train.augment", args.no_augment.then(|| "false".into()));
    push("train.log_wall_time", args.no_wall_time.then(|| "false".into()));
    push("output.dir", args.out.as_ref().map(|p| p.display().to_string()));
    let cfg = cli.run_config(&flags)?;
    let (train_set, test_set) = load_data(&cfg)?;
    let mut model = Model::<f32>::build(cfg.model, cfg.model_seed)?;
    println!("{}", cfg.model.describe());
    println!("{} trainable parameters, {} training images", model.trainable_params(), train_set.len());
    let resume = if args.resume {
        let ck = Checkpoint::load(&cfg.output.last())?;
        ck.check_config(&cfg.model)?;
        println!("resuming after epoch {}", ck.state.epoch);
        Some(ck)
    } else {
        None
    };
    let outcome = train(&mut model, &train_set, Some(&test_set), &cfg.train, Some(&cfg.output), resume.as_ref())?;
    if let Some(last) = outcome.history.last() {
        println!(
            "epoch {}: loss {:.4}, train acc {:.4}, test acc {:.4}",
            last.epoch,
            last.loss,
            last.train_acc,
            last.test_acc.unwrap_or(f64::NAN)
        );
    }
    println!("best accuracy {:.4}; outputs in {}", outcome.best_acc, cfg.output.dir.display());
    Ok(())
}

fn eval_cmd(cli: &Cli, args: &EvalArgs) -> Result<()> {
    let cfg = cli.run_config(&args.data.assignments())?;
    let ck = Checkpoint::load(&args.checkpoint)?;
    let mut model = ck.to_model::<f32>()?;
    let (_, test_set) = load_data(&cfg)?;
    let (acc, loss) = evaluate(&mut model, &test_set, cfg.train.eval_batch_size)?;
    println!("{}: accuracy {acc:.4}, loss {loss:.4} on {} images", model.config.name(), test_set.len());
    Ok(())
}

fn gradcheck_cmd(cli: &Cli, args: &GradcheckArgs) -> Result<()> {
    let mut flags = vec![("model.name", args.model.clone())];
    if let Some(k) = args.kernel {
        flags.push(("model.k", k.to_string()));
    }
    let cfg = cli.run_config(&flags)?;
    if cfg.model.h > GRADCHECK_MAX_H {
        return Err(Error::Config(format!(
            "gradcheck runs on small models only: h = {} exceeds {GRADCHECK_MAX_H}",
            cfg.model.h
        )));
    }
    let mut reports = Vec::new();
    if args.ops {
        reports.extend(verify::op_gradchecks(cfg.model_seed)?);
    }
    reports.push(verify::model_gradcheck(&cfg.model, cfg.model_seed, args.batch, (args.input, args.input))?);
    let mut failed = Vec::new();
    let mut csv = String::new();
    for r in &reports {
        print!("{}", r.to_table());
        csv.push_str(&r.to_csv());
        if !r.passed() {
            failed.push(r.label.clone());
        }
    }
    if let Some(path) = &args.csv {
        write_file(path, &csv)?;
    }
    if failed.is_empty() {
        println!("PASS: {} checks", reports.len());
        Ok(())
    } else {
        Err(Error::Verification(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn equiv_cmd(cli: &Cli, args: &EquivArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let (label, diff, tol) = if args.separable {
        let h = 4;
        (
            format!("separable k={} h={h}", args.k),
            verify::check_separable(args.k, h, seed)?,
            SEPARABLE_TOLERANCE,
        )
    } else {
        (
            format!("III vs strided 3D h={} s={}", args.h, args.segments),
            verify::check_iii_equiv_3d(args.h, args.segments, seed)?,
            FORWARD_TOLERANCE,
        )
    };
    let verdict = if diff < tol { "PASS" } else { "FAIL" };
    println!("{verdict}: {label}: max abs diff {diff:.3e} (tolerance {tol:.0e})");
    if diff < tol {
        Ok(())
    } else {
        Err(Error::Verification(format!("{label}: diff {diff:.3e}")))
    }
}

fn bench_cmd(cli: &Cli, args: &BenchArgs) -> Result<()> {
    let cfg = cli.run_config(&args.model.assignments())?;
    let report = bench(
        &cfg.model,
        &BenchConfig {
            batch: args.batch,
            warmup: args.warmup,
            measured: args.batches,
            input_hw: (args.input, args.input),
            seed: cfg.model_seed,
        },
    )?;
    println!("{}", report.summary());
    Ok(())
}

fn dump_cmd(cli: &Cli, args: &DumpArgs) -> Result<()> {
    let mut flags = args.model.assignments();
    flags.extend(args.data.assignments());
    let cfg = cli.run_config(&flags)?;
    let mut model = match &args.checkpoint {
        Some(path) => Checkpoint::load(path)?.to_model::<f32>()?,
        None => Model::<f32>::build(cfg.model, cfg.model_seed)?,
    };
    let (_, test_set) = load_data(&cfg)?;
    if args.index >= test_set.len() {
        return Err(Error::Config(format!("image index {} out of range ({} images)", args.index, test_set.len())));
    }
    let (image, _) = test_set.gather::<f32>(&[args.index], None)?;
    let files = dump_features(&mut model, &image, &args.out)?;
    println!("wrote {} feature maps to {}", files.len(), args.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads.max(1))
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    match &cli.command {
        Command::Analyze(a) => analyze(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Eval(a) => eval_cmd(cli, a),
        Command::Gradcheck(a) => gradcheck_cmd(cli, a),
        Command::EquivCheck(a) => equiv_cmd(cli, a),
        Command::Bench(a) => bench_cmd(cli, a),
        Command::DumpFeatures(a) => dump_cmd(cli, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
