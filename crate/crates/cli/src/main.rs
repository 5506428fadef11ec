mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use chunkfft::PastSize;

/// Exit status: 0 ok, 1 check failed, 2 usage, 3 I/O or format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    CheckFailed = 1,
    Usage = 2,
    Io = 3,
}

#[derive(Debug, Parser)]
#[command(name = "chunkfft", version, about = "Chunk-based incremental FFT decoder toolkit")]
struct Cli {
    /// Print the effective run configuration as JSON and exit.
    #[arg(long, global = true)]
    dump_config: bool,

    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Overrides the configuration's top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Incremental vs masked-parallel equivalence over the configured grid.
    Equiv(EquivArgs),
    /// Receptive field of an N-layer chunked decoder.
    Rf(RfArgs),
    /// Render a chunk attention mask.
    Mask(MaskArgs),
    /// Train the decoder on the synthetic task.
    Train(TrainArgs),
    /// Decode a feature tensor into mel frames.
    Synth(SynthArgs),
    /// Time incremental and full-sequence decoding.
    Bench(BenchArgs),
    /// Mel-spectrogram distance between two tensors.
    Msd(MsdArgs),
    /// Train-regime by inference-config mask study.
    Study(StudyArgs),
    /// Compare intact decoding against runs that drop caches between chunks.
    Ablate(AblateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
struct EquivArgs {
    /// Seeds per grid cell, counting up from the configured seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
    dtype: DTypeArg,
    /// Defaults to 1e-9 for f64 and 1e-4 for f32.
    #[arg(long)]
    tolerance: Option<f64>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RfArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long)]
    chunk: usize,
    #[arg(long)]
    past: usize,
    /// Also walk the dependency graph and print its result and the difference.
    #[arg(long)]
    oracle: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MaskFormat {
    Ascii,
    Pgm,
}

#[derive(Debug, Args)]
struct MaskArgs {
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    chunk: usize,
    /// Frame count or `all`.
    #[arg(long)]
    past: PastSize,
    #[arg(long, value_enum, default_value_t = MaskFormat::Ascii)]
    format: MaskFormat,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MaskKind {
    /// The model's chunk and past sizes for every sample.
    Static,
    /// The configured dynamic policy, or the default one.
    Dynamic,
    /// Unmasked.
    Full,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Overrides the configured mask regime.
    #[arg(long, value_enum)]
    mask: Option<MaskKind>,
    /// Overrides the configured step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Trained weights (CFPW).
    #[arg(long)]
    out: PathBuf,
    /// JSON training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SynthMode {
    Incremental,
    Parallel,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// CFPW weights.
    #[arg(long)]
    model: PathBuf,
    /// CTN1 feature tensor `[T × d_model]`.
    #[arg(long)]
    features: PathBuf,
    #[arg(long, value_enum, default_value_t = SynthMode::Incremental)]
    mode: SynthMode,
    /// Overrides the model's chunk size.
    #[arg(long)]
    chunk: Option<usize>,
    /// Overrides the model's past size (frame count or `all`).
    #[arg(long)]
    past: Option<PastSize>,
    /// Mel output (CTN1).
    #[arg(long)]
    out: PathBuf,
    /// Resume from a CFPS state; the features continue where it stopped.
    #[arg(long)]
    state_in: Option<PathBuf>,
    /// Save the decoder state after the last decoded chunk.
    #[arg(long)]
    state_out: Option<PathBuf>,
    /// Stop after this many chunks.
    #[arg(long)]
    max_chunks: Option<usize>,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// CFPW weights; randomly initialised from the config when omitted.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Machine-readable report on standard output.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MsdKindArg {
    FrameL2,
    MeanSquared,
}

#[derive(Debug, Args)]
struct MsdArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, value_enum, default_value_t = MsdKindArg::FrameL2)]
    kind: MsdKindArg,
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// CSV table; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit 1 when the matched-config trend does not hold.
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
#[allow(clippy::enum_variant_names)]
enum AblateMode {
    DropKv,
    DropConv,
    DropBoth,
}

#[derive(Debug, Args)]
struct AblateArgs {
    #[arg(long, value_enum)]
    mode: AblateMode,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(Status::Usage as u8)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let status = match commands::run(cli) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e:#}");
            commands::classify(&e)
        }
    };
    ExitCode::from(status as u8)
}
