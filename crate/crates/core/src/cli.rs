//! Command-line front end. Results go to stdout, diagnostics to stderr.
//!
//! Exit codes: 0 success, 1 usage / validation / contract error, 2 I/O error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{generate_corpus, load_image, save_image, write_atomic, Image, Manifest};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricReport};
use crate::network::ModelConfig;
use crate::objectives::DEFAULT_LAMBDA;
use crate::selftest::{self, Hooks, Level};
use crate::trainer::{self, load_checkpoint, Checkpoint, Event, PairSet, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

/// Environment variable capping the worker pool; 0 or unset means automatic.
pub const THREADS_ENV: &str = "MFE_THREADS";

#[derive(Parser, Debug)]
#[command(name = "mfenet", version, about = "Train and run a multi-scale deblurring network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic blurred/sharp corpus with a manifest.
    GenData(GenDataArgs),
    /// Train a model on a corpus and write a checkpoint plus loss log.
    Train(TrainArgs),
    /// Deblur one image.
    Infer(InferArgs),
    /// Print PSNR / SSIM / VIF per image and their mean.
    Eval(EvalArgs),
    /// Run the built-in verification suites.
    Selftest(SelftestArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    count: usize,
    #[arg(long)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Manifest file or corpus directory.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long, default_value_t = 1000)]
    iters: u64,
    #[arg(long, default_value_t = 32)]
    c_base: usize,
    #[arg(long, default_value_t = 8)]
    resblocks: usize,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_msfe: bool,
    #[arg(long)]
    no_febp: bool,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    /// Train on random square crops of this size.
    #[arg(long)]
    crop: Option<usize>,
    /// Loss log path; defaults to the checkpoint path with `.log` appended.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Held-out corpus evaluated every `--eval-every` iterations.
    #[arg(long)]
    held_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    eval_every: u64,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Continue from this checkpoint's optimizer state.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["corpus", "pairs"]))]
struct EvalArgs {
    /// Model to evaluate; without it the blurred inputs are scored as-is.
    #[arg(long, conflicts_with = "pairs")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Compare `<restored dir> <reference dir>` image by image.
    #[arg(long, num_args = 2, value_names = ["RESTORED", "REFERENCE"])]
    pairs: Option<Vec<PathBuf>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum LevelArg {
    Quick,
    Full,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    #[arg(long, value_enum, default_value_t = LevelArg::Quick)]
    level: LevelArg,
    #[arg(long, hide = true)]
    perturb_conv: bool,
}

/// Failure of a command, already mapped to its exit code.
struct Failure {
    code: i32,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { code: if e.is_io() { EXIT_IO } else { EXIT_INVALID }, message: e.to_string() }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_INVALID
                }
            };
        }
    };
    if let Err(f) = configure_threads() {
        let _ = writeln!(err, "error: {}", f.message);
        return f.code;
    }
    let result = match cli.command {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train(a, out, err),
        Command::Infer(a) => infer(a, out),
        Command::Eval(a) => eval(a, out),
        Command::Selftest(a) => selftest_cmd(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| Failure {
        code: EXIT_INVALID,
        message: format!("{THREADS_ENV} must be a non-negative integer, got {raw:?}"),
    })?;
    // A pool may already exist when running in-process more than once.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn io_out(e: std::io::Error) -> Failure {
    Failure { code: EXIT_IO, message: format!("writing output: {e}") }
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> CmdResult {
    let manifest = generate_corpus(a.count, a.size, a.seed, &a.out)?;
    writeln!(out, "{}", manifest.path().display()).map_err(io_out)
}

fn train(a: TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> CmdResult {
    let model = ModelConfig {
        c_base: a.c_base,
        n_resblocks: a.resblocks,
        use_msfe: !a.no_msfe,
        use_febp: !a.no_febp,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        iterations: a.iters,
        lambda: a.lambda,
        seed: a.seed,
        eval_every: a.eval_every,
        checkpoint_path: Some(a.out_checkpoint.clone()),
        checkpoint_every: a.checkpoint_every,
        crop: a.crop,
        ..TrainConfig::default()
    };
    let data = PairSet::from_manifest(&Manifest::load(&a.corpus)?)?;
    let held_out = a.held_out.as_deref().map(|p| Manifest::load(p).and_then(|m| PairSet::from_manifest(&m))).transpose()?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            if ckpt.config != model {
                return Err(Error::Config(format!(
                    "resumed checkpoint was trained with a different model:\n{}",
                    ckpt.config.to_canonical()
                ))
                .into());
            }
            Trainer::resume(ckpt, cfg)?
        }
        None => Trainer::new(model, cfg)?,
    };
    let _ = writeln!(
        err,
        "training {} parameters on {} pairs",
        trainer.params.trainable_count(),
        data.len()
    );

    let log_path = a.log.unwrap_or_else(|| {
        let mut p = a.out_checkpoint.clone().into_os_string();
        p.push(".log");
        PathBuf::from(p)
    });
    let mut log = String::new();
    let mut sink_err: Option<Failure> = None;
    let started = Instant::now();
    let result = trainer.run(&data, held_out.as_ref(), &mut |ev| match ev {
        Event::Step(row) => {
            log.push_str(&format!("{row}\n"));
            if let Err(e) = writeln!(out, "{row}") {
                sink_err.get_or_insert(io_out(e));
            }
        }
        Event::Eval { iteration, mean } => {
            let _ = writeln!(err, "eval {iteration}: {}", format_row("held-out", &mean));
        }
        Event::Saved { iteration, path } => {
            let _ = writeln!(err, "saved {} at iteration {iteration}", path.display());
            if let Err(e) = write_atomic(&log_path, log.as_bytes()) {
                sink_err.get_or_insert(e.into());
            }
        }
    });
    result?;
    if let Some(f) = sink_err {
        return Err(f);
    }
    let _ = writeln!(err, "finished in {:.1}s", started.elapsed().as_secs_f64());
    Ok(())
}

fn infer(a: InferArgs, out: &mut dyn Write) -> CmdResult {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let img = load_image(&a.input)?;
    let started = Instant::now();
    let restored = trainer::restore(&ckpt.params, &ckpt.config, &img.to_tensor())?;
    let elapsed = started.elapsed();
    save_image(&Image::from_tensor(&restored)?, &a.output)?;
    writeln!(out, "wall_time_s {:.6}", elapsed.as_secs_f64()).map_err(io_out)
}

/// `<psnr> <ssim> <vif>` with a fixed format; infinite PSNR prints `inf`.
pub fn format_row(name: &str, r: &MetricReport) -> String {
    let psnr = if r.psnr.is_infinite() { "inf".to_string() } else { format!("{:.4}", r.psnr) };
    format!("{name} {psnr} {:.6} {:.6}", r.ssim, r.vif)
}

fn write_table(out: &mut dyn Write, names: &[String], reports: &[MetricReport], mean: &MetricReport) -> CmdResult {
    for (name, r) in names.iter().zip(reports) {
        writeln!(out, "{}", format_row(name, r)).map_err(io_out)?;
    }
    writeln!(out, "{}", format_row("MEAN", mean)).map_err(io_out)
}

fn ppm_files(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.ends_with(".ppm") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

fn eval(a: EvalArgs, out: &mut dyn Write) -> CmdResult {
    if let Some(dirs) = a.pairs {
        let (restored, reference) = (&dirs[0], &dirs[1]);
        let names = ppm_files(restored)?;
        if names.is_empty() {
            return Err(Error::Config(format!("no .ppm images in {}", restored.display())).into());
        }
        let mut reports = Vec::with_capacity(names.len());
        for name in &names {
            let r = load_image(&restored.join(name))?;
            let s = load_image(&reference.join(name))?;
            reports.push(metrics::evaluate_pair(&r.to_tensor::<f64>(), &s.to_tensor::<f64>())?);
        }
        let mean = MetricReport::mean(&reports).unwrap_or_else(|| unreachable!());
        let stems: Vec<String> = names.iter().map(|n| n.trim_end_matches(".ppm").to_string()).collect();
        return write_table(out, &stems, &reports, &mean);
    }
    let corpus = a.corpus.unwrap_or_else(|| unreachable!("clap enforces a source"));
    let data = PairSet::from_manifest(&Manifest::load(&corpus)?)?;
    let (reports, mean) = match &a.checkpoint {
        Some(path) => {
            let Checkpoint { config, params, .. } = load_checkpoint(path)?;
            trainer::evaluate(&params, &config, &data)?
        }
        None => trainer::evaluate_with(&data, |b| Ok(b.clone()))?,
    };
    write_table(out, &data.names, &reports, &mean)
}

fn selftest_cmd(a: SelftestArgs, out: &mut dyn Write) -> CmdResult {
    let level = match a.level {
        LevelArg::Quick => Level::Quick,
        LevelArg::Full => Level::Full,
    };
    let mut write_err = None;
    let results = selftest::run(level, Hooks { perturb_conv: a.perturb_conv }, |r| {
        if let Err(e) = writeln!(out, "{r}") {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(io_out(e));
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure { code: EXIT_INVALID, message: format!("failing suites: {}", failed.join(", ")) })
    }
}
