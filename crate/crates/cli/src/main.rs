use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser)]
#[command(name = "swiftsr", version, about = "Depthwise-separable super-resolution: upscale, train, evaluate, benchmark")]
struct Cli {
    /// Worker threads for parallel kernels (default: all cores).
    #[arg(long, global = true, env = "SWIFT_SR_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Variant {
    Dsconv,
    Standard,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Kind {
    Generator,
    Discriminator,
}

#[derive(Subcommand)]
enum Command {
    /// Super-resolve an image or every image in a directory.
    Upscale {
        #[arg(long)]
        model: PathBuf,
        /// An image file or a directory of .png/.ppm images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 4)]
        scale: usize,
        /// Ground-truth image or directory; prints PSNR/SSIM per output.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Time generator forward passes on a fixed random frame.
    Bench {
        /// Generator checkpoint; the default generator is built when omitted.
        #[arg(long)]
        model: Option<PathBuf>,
        /// `WxH`, `270p` or `540p`.
        #[arg(long, default_value = "64x64")]
        in_res: String,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train a generator/discriminator pair.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        val: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Flat `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides, applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Continue the run stored in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// PSNR and SSIM between matching files of two directories.
    Eval {
        #[arg(long)]
        sr: PathBuf,
        #[arg(long)]
        hr: PathBuf,
        /// Score BT.601 luma instead of RGB.
        #[arg(long)]
        luma: bool,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Per-layer parameter audit of a checkpoint.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write a freshly initialized checkpoint.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Kind::Generator)]
        kind: Kind,
        #[arg(long, value_enum, default_value_t = Variant::Dsconv)]
        variant: Variant,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Upscale {
            model,
            input,
            output,
            scale,
            reference,
        } => commands::upscale(&model, &input, &output, scale, reference.as_deref()),
        Command::Bench {
            model,
            in_res,
            iters,
            warmup,
            variant,
            seed,
            json,
        } => commands::bench(model.as_deref(), &in_res, iters, warmup, variant, seed, json.as_deref()),
        Command::Train {
            data,
            val,
            out,
            epochs,
            seed,
            config,
            overrides,
            resume,
        } => commands::train(&data, &val, &out, epochs, seed, config.as_deref(), &overrides, resume),
        Command::Eval {
            sr,
            hr,
            luma,
            json,
            csv,
        } => commands::eval(&sr, &hr, luma, json.as_deref(), csv.as_deref()),
        Command::Inspect { model, json } => commands::inspect(&model, json),
        Command::Init {
            out,
            kind,
            variant,
            seed,
            config,
            overrides,
        } => commands::init(&out, kind, variant, seed, config.as_deref(), &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
