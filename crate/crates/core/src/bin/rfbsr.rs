//! Command-line front end.
//!
//! Data products go to files or stdout; logs go to stderr. Failures print a
//! single `error: code=<kind> msg=<text>` line and exit with the code of the
//! error family (see the README).

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rfbsr::checkpoint::Checkpoint;
use rfbsr::config::{Config, Precision};
use rfbsr::data::{degrade_tree, list_images, load_image, EdgeMode, RandomPatches};
use rfbsr::ensemble::{average_checkpoints, negative_l1_score, select_top, Scored};
use rfbsr::gradcheck::{run_suite, GradCheckConfig};
use rfbsr::infer::Upscaler;
use rfbsr::metrics::{evaluate, EvalProtocol};
use rfbsr::nn::{count_parameters, Discriminator, Generator};
use rfbsr::train::{format_step_line, train_gan_stage, train_psnr_stage, GanModels, TrainStage};
use rfbsr::{Error, Result, Scalar, Tensor};

#[derive(Parser, Debug)]
#[command(name = "rfbsr", version, about = "Receptive-field-block super-resolution toolkit")]
struct Cli {
    /// Worker threads for parallel kernels (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bicubic-downscale every PNG in a directory tree.
    Degrade(DegradeArgs),
    /// Run the PSNR or GAN training stage described by a config file.
    Train(TrainArgs),
    /// Super-resolve every PNG in a directory with a checkpoint.
    Infer(InferArgs),
    /// Average checkpoints in parameter space.
    Ensemble(EnsembleArgs),
    /// Score SR images against HR references (CSV on stdout).
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Print the generator's trainable parameter count.
    Params(ParamsArgs),
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// TOML config file (defaults apply when omitted).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DegradeArgs {
    /// Directory of HR PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory (mirrors the input tree).
    #[arg(long)]
    out: PathBuf,
    /// Downscale factor.
    #[arg(long, default_value_t = 16)]
    scale: usize,
    /// Edge handling for the resampling kernel.
    #[arg(long, value_enum, default_value_t = EdgeArg::Replicate)]
    edge: EdgeArg,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
enum EdgeArg {
    Replicate,
    Symmetric,
}

impl From<EdgeArg> for EdgeMode {
    fn from(e: EdgeArg) -> Self {
        match e {
            EdgeArg::Replicate => EdgeMode::Replicate,
            EdgeArg::Symmetric => EdgeMode::Symmetric,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Overrides train.steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides train.out_dir.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Overrides data.hr_dir.
    #[arg(long)]
    hr_dir: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Generator checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of LR PNGs.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory (mirrors the input tree).
    #[arg(long)]
    out: PathBuf,
    /// Load the name/shape intersection even if the architecture differs.
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Args, Debug)]
struct EnsembleArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Number of checkpoints to average.
    #[arg(long, default_value_t = 10)]
    n: usize,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// LR images for ranking when more than `n` checkpoints are given.
    #[arg(long)]
    score_lr: Option<PathBuf>,
    /// HR references matching `--score-lr`.
    #[arg(long)]
    score_hr: Option<PathBuf>,
    /// Candidate checkpoints.
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory of SR PNGs.
    #[arg(long)]
    sr: PathBuf,
    /// Directory of HR PNGs with the same relative paths.
    #[arg(long)]
    hr: PathBuf,
    /// Center-crop side; overrides eval.crop.
    #[arg(long, conflicts_with = "no_crop")]
    crop: Option<usize>,
    /// Score whole images.
    #[arg(long, default_value_t = false)]
    no_crop: bool,
    /// Quantize SR images to 8 bits before scoring.
    #[arg(long, default_value_t = false)]
    on_quantized: bool,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Random instances per case.
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Only run cases whose name contains this string.
    #[arg(long)]
    filter: Option<String>,
}

#[derive(Args, Debug)]
struct ParamsArgs {
    #[command(flatten)]
    config: ConfigArg,
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, record| match record.level() {
            log::Level::Info => writeln!(buf, "{}", record.args()),
            level => writeln!(buf, "{}: {}", level.as_str().to_lowercase(), record.args()),
        })
        .init();
}

fn echo_config(cfg: &Config) {
    log::info!("# effective config");
    for line in cfg.to_toml().lines() {
        log::info!("# {line}");
    }
}

fn load_config(arg: &ConfigArg) -> Result<Config> {
    let cfg = Config::load_or_default(arg.config.as_deref())?;
    echo_config(&cfg);
    Ok(cfg)
}

fn write_stdout(text: &str) -> Result<()> {
    std::io::stdout().write_all(text.as_bytes()).map_err(|e| Error::Io {
        path: "<stdout>".into(),
        source: e,
    })
}

fn degrade(args: &DegradeArgs) -> Result<()> {
    let n = degrade_tree(&args.input, &args.out, args.scale, args.edge.into())?;
    write_stdout(&format!("{n}\n"))
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = Config::load_or_default(args.config.config.as_deref())?;
    if let Some(s) = args.steps {
        cfg.train.steps = Some(s);
    }
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(d) = &args.out_dir {
        cfg.train.out_dir = d.clone();
    }
    if let Some(d) = &args.hr_dir {
        cfg.data.hr_dir = Some(d.clone());
    }
    cfg.validate()?;
    echo_config(&cfg);
    match cfg.train.precision {
        Precision::F32 => train_with::<f32>(&cfg),
        Precision::F64 => train_with::<f64>(&cfg),
    }
}

fn train_with<T: Scalar>(cfg: &Config) -> Result<()> {
    let run = cfg.train.to_run()?;
    let hr_dir = cfg
        .data
        .hr_dir
        .as_ref()
        .ok_or_else(|| Error::Config("data.hr_dir must be set for training".into()))?;
    let mut data = RandomPatches::new(hr_dir, cfg.data.patch, cfg.model.scale, cfg.data.augment)?;
    data.edge = cfg.data.edge;
    let (generator, mut g_store) = Generator::build::<T>(&cfg.model, run.seed)?;
    let init = cfg.train.init_checkpoint.as_ref().map(Checkpoint::read).transpose()?;
    let mut on_step =
        |step: u64, lr: f64, r: &rfbsr::losses::LossReport| log::info!("{}", format_step_line(step, lr, r));
    let outcome = match run.stage {
        TrainStage::Psnr => {
            if let Some(ck) = &init {
                ck.load_into(&mut g_store, &cfg.model.fingerprint(), false)?;
            }
            train_psnr_stage(&run, &generator, &mut g_store, &mut data, &mut on_step)?
        }
        TrainStage::Gan => {
            if init.is_none() {
                log::warn!("GAN stage starting from a random generator (train.init_checkpoint unset)");
            }
            if cfg.features.enabled && cfg.features.weights.is_none() {
                log::warn!("feature extractor is randomly initialised (features.weights unset)");
            }
            let (discriminator, mut d_store) = Discriminator::build::<T>(&cfg.discriminator, run.seed.wrapping_add(1))?;
            let features = cfg.features.build::<T>()?;
            train_gan_stage(
                &run,
                GanModels {
                    generator: &generator,
                    g_store: &mut g_store,
                    discriminator: &discriminator,
                    d_store: &mut d_store,
                    features: features.as_ref(),
                },
                &cfg.loss.to_loss_config()?,
                &mut data,
                init.as_ref(),
                &mut on_step,
            )?
        }
    };
    let mut listing = String::new();
    for (_, path) in &outcome.checkpoints {
        listing.push_str(&format!("{}\n", path.display()));
    }
    write_stdout(&listing)
}

fn infer(args: &InferArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let n = match cfg.train.precision {
        Precision::F32 => infer_with::<f32>(&cfg, args)?,
        Precision::F64 => infer_with::<f64>(&cfg, args)?,
    };
    write_stdout(&format!("{n}\n"))
}

fn infer_with<T: Scalar>(cfg: &Config, args: &InferArgs) -> Result<usize> {
    let (up, summary) = Upscaler::<T>::from_file(&cfg.model, &args.checkpoint, args.force)?;
    if args.force {
        log::warn!(
            "forced load: {} loaded, {} skipped, {} ignored",
            summary.loaded,
            summary.skipped.len(),
            summary.ignored.len()
        );
    }
    up.upscale_dir(&args.input, &args.out)
}

fn load_pairs(lr_dir: &Path, hr_dir: &Path) -> Result<Vec<(Tensor<f32>, Tensor<f32>)>> {
    let files = list_images(lr_dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no PNG images under {}",
            lr_dir.display()
        )));
    }
    files
        .iter()
        .map(|rel| {
            let hr_path = hr_dir.join(rel);
            if !hr_path.exists() {
                return Err(Error::MissingCounterpart(hr_path.display().to_string()));
            }
            Ok((load_image(lr_dir.join(rel))?, load_image(hr_path)?))
        })
        .collect()
}

fn ensemble(args: &EnsembleArgs) -> Result<()> {
    let checkpoints = args
        .checkpoints
        .iter()
        .map(Checkpoint::read)
        .collect::<Result<Vec<_>>>()?;
    let chosen = if checkpoints.len() > args.n {
        let (Some(lr), Some(hr)) = (&args.score_lr, &args.score_hr) else {
            return Err(Error::InvalidArgument(format!(
                "{} checkpoints given for n={}; pass --score-lr and --score-hr to rank them",
                checkpoints.len(),
                args.n
            )));
        };
        let cfg = load_config(&args.config)?;
        let pairs = load_pairs(lr, hr)?;
        let scored = checkpoints
            .into_iter()
            .map(|ck| {
                let score = negative_l1_score(&cfg.model, &ck, &pairs)?;
                log::info!("step {} score {score:.6e}", ck.meta.step);
                Ok(Scored {
                    step: ck.meta.step,
                    item: ck,
                    score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        select_top(scored, args.n)?.into_iter().map(|s| s.item).collect()
    } else {
        checkpoints
    };
    let avg = average_checkpoints(&chosen, args.n)?;
    avg.write(&args.out)?;
    let steps: Vec<String> = avg.meta.source_steps.iter().map(u64::to_string).collect();
    write_stdout(&format!("{} {}\n", args.out.display(), steps.join(",")))
}

fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let protocol = EvalProtocol {
        crop: if args.no_crop {
            None
        } else {
            args.crop.or(cfg.eval.crop)
        },
        on_quantized: args.on_quantized || cfg.eval.on_quantized,
    };
    let table = evaluate(&args.sr, &args.hr, &protocol)?;
    let csv = table.to_csv();
    match &args.out {
        Some(path) => std::fs::write(path, csv).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        }),
        None => write_stdout(&csv),
    }
}

fn gradcheck(args: &GradcheckArgs) -> Result<()> {
    let config = GradCheckConfig {
        instances: args.instances,
        seed: args.seed,
        ..GradCheckConfig::default()
    };
    let reports = run_suite(&config, args.filter.as_deref())?;
    let mut out = String::from("case,instances,elements,skipped,max_rel_err,status\n");
    for r in &reports {
        out.push_str(&format!(
            "{},{},{},{},{:.3e},{}\n",
            r.name,
            r.instances,
            r.elements,
            r.skipped,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    write_stdout(&out)?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!(
            "tolerance {:e} exceeded by {}",
            config.tolerance,
            failed.join(",")
        )))
    }
}

fn params(args: &ParamsArgs) -> Result<()> {
    let cfg = load_config(&args.config)?;
    let (_, store) = Generator::build::<f32>(&cfg.model, 0)?;
    write_stdout(&format!("{}\n", count_parameters(&store)))
}

fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::InvalidArgument(format!("--threads: {e}")))?;
    }
    match &cli.command {
        Command::Degrade(a) => degrade(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Params(a) => params(a),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Exit code for command-line usage errors.
const USAGE_EXIT: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let first = text.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error: code=usage msg={}", one_line(first));
            return ExitCode::from(USAGE_EXIT);
        }
    };
    init_logging();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: code={} msg={}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
