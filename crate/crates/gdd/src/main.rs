use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use gdd::degradation::{
    synth_scene, wald_protocol, DownsampleKind, SpatialDownsampler, SpectralResponse,
};
use gdd::io;
use gdd::metrics::MetricReport;
use gdd::network::{NetworkConfig, Variant};
use gdd::runner::{self, FusionProblem, RunConfig, Task};
use gdd::{GddError, Result, Tensor};

#[derive(Parser)]
#[command(
    name = "gdd",
    version,
    about = "Training-free guided image fusion: optimize a decoder network against one image pair"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fuse an observed input with a guidance image by fitting a network.
    Fuse(FuseArgs),
    /// Degrade a high-resolution tensor into an evaluable benchmark triplet.
    Degrade(DegradeArgs),
    /// Score a fused result against references.
    Metrics(MetricsArgs),
    /// Generate a deterministic synthetic scene.
    Synth(SynthArgs),
    /// Validate analytic gradients against finite differences.
    Gradcheck,
}

#[derive(Args)]
struct FuseArgs {
    /// Fusion task: hs-sr, pansharpen, or denoise.
    #[arg(long)]
    task: String,
    /// Observed input tensor (low-resolution or noisy).
    #[arg(long)]
    input: PathBuf,
    /// Guidance tensor at output resolution.
    #[arg(long)]
    guidance: PathBuf,
    /// Held-out reference tensor; enables PSNR tracing and metrics.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Spectral response CSV (required for hs-sr).
    #[arg(long)]
    srf: Option<PathBuf>,
    /// Network variant: gdd, dd, dip-z, or dip-g.
    #[arg(long, default_value = "gdd")]
    variant: String,
    #[arg(long, default_value_t = 5000)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    /// Weight on the data fidelity term.
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of 2x upsampling stages.
    #[arg(long, default_value_t = 4)]
    scales: usize,
    /// Feature width of every stream.
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DegradeArgs {
    /// High-resolution source tensor.
    #[arg(long)]
    hr: PathBuf,
    /// Downsampling factor.
    #[arg(long)]
    factor: usize,
    /// Downsampling kernel: block or bicubic.
    #[arg(long, default_value = "block")]
    kind: String,
    /// Spectral response CSV; without it the guidance is the band mean.
    #[arg(long)]
    srf: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    fused: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    /// Low-resolution multispectral input for the no-reference protocol.
    #[arg(long)]
    ms_low: Option<PathBuf>,
    /// Panchromatic image for the no-reference protocol.
    #[arg(long)]
    pan: Option<PathBuf>,
    /// Resolution ratio between output and input.
    #[arg(long, default_value_t = 4)]
    ratio: usize,
    /// Report CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    channels: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Scene tensor path.
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                GddError::NumericalAbort { .. } => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Fuse(args) => fuse(args),
        Command::Degrade(args) => degrade(args),
        Command::Metrics(args) => metrics_cmd(args),
        Command::Synth(args) => synth(args),
        Command::Gradcheck => Ok(gradcheck()),
    }
}

/// Infers the integer resolution ratio between guidance and input extents.
fn infer_factor(input: &Tensor, guidance: &Tensor) -> Result<usize> {
    let (ih, iw) = (input.shape().height, input.shape().width);
    let (gh, gw) = (guidance.shape().height, guidance.shape().width);
    if gh % ih != 0 || gw % iw != 0 || gh / ih != gw / iw || gh / ih < 2 {
        return Err(GddError::invalid(format!(
            "guidance extent {gh}x{gw} is not an integer multiple (>= 2) of input extent {ih}x{iw}"
        )));
    }
    Ok(gh / ih)
}

fn fuse(args: FuseArgs) -> Result<ExitCode> {
    let task: Task = args.task.parse()?;
    let variant: Variant = args.variant.parse()?;
    let input = io::read_tensor(&args.input)?;
    let guidance = io::read_tensor(&args.guidance)?;

    let mut ratio = 1;
    let problem = match task {
        Task::HsSr => {
            ratio = infer_factor(&input, &guidance)?;
            let srf_path = args.srf.as_ref().ok_or_else(|| {
                GddError::invalid("hs-sr needs --srf to relate the band sets")
            })?;
            let srf = io::read_srf_csv(srf_path, input.shape().channels)?;
            let sampler = SpatialDownsampler::new(DownsampleKind::BlockAverage, ratio)?;
            FusionProblem::hs_sr(input, guidance, sampler, srf)?
        }
        Task::Pansharpen => {
            ratio = infer_factor(&input, &guidance)?;
            let sampler = SpatialDownsampler::new(DownsampleKind::Bicubic, ratio)?;
            FusionProblem::pansharpen(input, guidance, sampler)?
        }
        Task::Denoise => FusionProblem::denoise(input, guidance)?,
    };
    let problem = match &args.reference {
        Some(path) => problem.with_reference(io::read_tensor(path)?)?,
        None => problem,
    };

    let network = NetworkConfig {
        scales: args.scales,
        base_channels: args.channels,
        guidance_channels: args.channels,
        leaky_slope: 0.1,
        seed: args.seed,
    };
    let config = RunConfig {
        iterations: args.iters,
        learning_rate: args.lr,
        mu: args.mu,
        auto_balance_mu: false,
        eval_every: 50,
    };

    let mut model = problem.build_model(variant, network)?;
    let outcome = runner::optimize(&mut model, &problem, &config)?;

    std::fs::create_dir_all(&args.out).map_err(|e| GddError::io(&args.out, e))?;
    io::write_trace_csv(&args.out.join("trace.csv"), &outcome.trace)?;
    let maps = if variant == Variant::Gdd {
        Some(model.export_attention_maps(problem.guidance())?)
    } else {
        None
    };
    runner::export_results(
        &args.out,
        &outcome.output,
        problem.reference(),
        maps.as_deref(),
    )?;
    if let Some(reference) = problem.reference() {
        let report = MetricReport::full_reference(reference, &outcome.output, ratio)?;
        io::write_metric_csv(&args.out.join("metrics.csv"), &report)?;
    }

    let last = outcome.trace.last().expect("at least one trace row");
    match last.psnr {
        Some(psnr) => println!(
            "{} {} finished: loss {:.6e}, psnr {psnr:.2} dB, results in {}",
            task,
            variant,
            last.loss_total,
            args.out.display()
        ),
        None => println!(
            "{} {} finished: loss {:.6e}, results in {}",
            task,
            variant,
            last.loss_total,
            args.out.display()
        ),
    }
    Ok(ExitCode::SUCCESS)
}

fn degrade(args: DegradeArgs) -> Result<ExitCode> {
    let hr = io::read_tensor(&args.hr)?;
    let kind: DownsampleKind = args.kind.parse()?;
    if kind == DownsampleKind::GaussianBlur {
        return Err(GddError::invalid(
            "degrade supports the block and bicubic kernels",
        ));
    }
    let sampler = SpatialDownsampler::new(kind, args.factor)?;
    let srf = match &args.srf {
        Some(path) => io::read_srf_csv(path, hr.shape().channels)?,
        None => SpectralResponse::contiguous(1, hr.shape().channels)?,
    };
    let data = wald_protocol(&hr, &srf, &sampler)?;

    std::fs::create_dir_all(&args.out).map_err(|e| GddError::io(&args.out, e))?;
    let input = args.out.join("input.btf");
    let guidance = args.out.join("guidance.btf");
    let reference = args.out.join("reference.btf");
    io::write_tensor(&input, &data.input)?;
    io::write_tensor(&guidance, &data.guidance)?;
    io::write_tensor(&reference, &data.reference)?;
    println!(
        "wrote {} ({}), {} ({}), {} ({})",
        input.display(),
        data.input.shape(),
        guidance.display(),
        data.guidance.shape(),
        reference.display(),
        data.reference.shape()
    );
    Ok(ExitCode::SUCCESS)
}

fn ensure_parent(path: &std::path::Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| GddError::io(parent, e))?;
        }
    }
    Ok(())
}

fn metrics_cmd(args: MetricsArgs) -> Result<ExitCode> {
    let fused = io::read_tensor(&args.fused)?;
    let reference = io::read_tensor(&args.reference)?;
    let mut report = MetricReport::full_reference(&reference, &fused, args.ratio)?;
    match (&args.ms_low, &args.pan) {
        (Some(ms_path), Some(pan_path)) => {
            let ms = io::read_tensor(ms_path)?;
            let pan = io::read_tensor(pan_path)?;
            let pan_low =
                SpatialDownsampler::new(DownsampleKind::Bicubic, args.ratio)?.downsample(&pan)?;
            report = report.merged(&MetricReport::no_reference(&fused, &ms, &pan, &pan_low)?);
        }
        (None, None) => {}
        _ => {
            return Err(GddError::invalid(
                "the no-reference protocol needs both --ms-low and --pan",
            ));
        }
    }
    ensure_parent(&args.out)?;
    io::write_metric_csv(&args.out, &report)?;
    println!("{}", MetricReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(ExitCode::SUCCESS)
}

fn synth(args: SynthArgs) -> Result<ExitCode> {
    let scene = synth_scene(args.seed, args.channels, args.size, &Default::default())?;
    ensure_parent(&args.out)?;
    io::write_tensor(&args.out, &scene)?;
    println!("wrote {} ({})", args.out.display(), scene.shape());
    Ok(ExitCode::SUCCESS)
}

fn gradcheck() -> ExitCode {
    let mut all_passed = true;
    for check in gdd::gradcheck::run_all() {
        let status = if check.passed() { "PASS" } else { "FAIL" };
        println!(
            "{status} {} (max relative error {:.3e}, tolerance {:.0e})",
            check.name, check.max_rel_error, check.tolerance
        );
        all_passed &= check.passed();
    }
    if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}
