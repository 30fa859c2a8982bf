use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use moe_lens_core::report::DEFAULT_CELL_SIZE;
use moe_lens_core::WhichMatrix;

mod commands;
mod output;

#[derive(Parser)]
#[command(
    name = "moe-lens",
    version,
    about = "Weight and behaviour analyses for Mixture-of-Experts checkpoints"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic checkpoint.
    Synth(SynthArgs),
    /// Cosine similarity of flattened expert matrices.
    MatrixSim(SimArgs),
    /// Cosine similarity of neuron-averaged expert matrices.
    NeuronAvgSim(SimArgs),
    /// Optimal neuron reordering between every expert pair.
    Reorder(ReorderArgs),
    /// Cosine similarity between gate embedding rows.
    GateSim(ModelArgs),
    /// Regression of gate-row similarity against neuron-averaged expert similarity.
    GateCorr(ReorderArgs),
    /// PCA projection of flattened experts with density outlier flags.
    Pca(PcaArgs),
    /// Two-stage trace of a corpus: routing, scores and recombination error.
    Trace(TraceArgs),
    /// Per-token similarity of expert outputs.
    OutSim(DynArgs),
    /// Corpus-averaged angular similarity of expert outputs.
    AvgOutSim(DynArgs),
    /// Counts of gate-score rank per output-norm rank.
    NormRank(DynArgs),
    /// Fraction of intermediate-state entries above a threshold.
    ActRatio(ActArgs),
    /// Selected experts and their scores per token and layer.
    RouteLog(DynArgs),
    /// Every static analysis, plus the dynamic ones when a corpus is given.
    Report(ReportArgs),
}

#[derive(Args, Clone)]
struct OutArgs {
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Heatmap pixels per matrix cell.
    #[arg(long, default_value_t = DEFAULT_CELL_SIZE)]
    cell: usize,
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    /// Layer index or `all` (all MoE layers).
    #[arg(long, default_value = "all")]
    layer: LayerSel,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Clone)]
struct SimArgs {
    #[command(flatten)]
    base: ModelArgs,
    /// Expert matrix; all three when omitted.
    #[arg(long)]
    which: Option<WhichMatrix>,
    /// Dense reference checkpoint, appended as entity `F`.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct ReorderArgs {
    #[command(flatten)]
    base: ModelArgs,
    #[arg(long)]
    which: Option<WhichMatrix>,
}

#[derive(Args, Clone)]
struct PcaArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
    dims: u8,
    #[arg(long, default_value_t = 50.0)]
    eps: f64,
    #[arg(long, default_value_t = 2)]
    min_pts: usize,
    /// Skip per-dimension standardization.
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Args, Clone)]
struct DynArgs {
    #[command(flatten)]
    base: ModelArgs,
    /// Token-id corpus, one whitespace-separated sequence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Dense reference checkpoint evaluated on the same layer inputs.
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct TraceArgs {
    #[command(flatten)]
    dyn_args: DynArgs,
    /// `all`: also write every expert's stage-two output statistics.
    #[arg(long)]
    k_override: Option<KOverride>,
}

#[derive(Args, Clone)]
struct ActArgs {
    #[command(flatten)]
    dyn_args: DynArgs,
    #[arg(long, default_value_t = 0.001)]
    threshold: f64,
}

#[derive(Args, Clone)]
struct ReportArgs {
    #[command(flatten)]
    base: ModelArgs,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(2..=3))]
    dims: u8,
    #[arg(long, default_value_t = 50.0)]
    eps: f64,
    #[arg(long, default_value_t = 2)]
    min_pts: usize,
    #[arg(long, default_value_t = 0.001)]
    threshold: f64,
}

#[derive(Args, Clone)]
#[command(args_override_self = true)]
struct SynthArgs {
    #[arg(long, value_enum, default_value_t = Mode::Scratch)]
    mode: Mode,
    /// Required; there is no default seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Upcycling noise std as a multiple of the init std.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.02)]
    init_std: f64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    /// Experts per layer: one count, or a comma list with one entry per layer.
    #[arg(long, default_value = "8", value_delimiter = ',', action = ArgAction::Set)]
    experts: Vec<usize>,
    /// Shared experts per layer, same format as `--experts`.
    #[arg(long, default_value = "0", value_delimiter = ',', action = ArgAction::Set)]
    shared: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    top_k: usize,
    #[arg(long, default_value_t = 64)]
    d_hid: usize,
    #[arg(long, default_value_t = 128)]
    d_mid: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    #[arg(long, value_enum, default_value_t = Act::Silu)]
    activation: Act,
    #[arg(long, value_enum, default_value_t = Order::TopkThenSoftmax)]
    gating_order: Order,
    #[arg(long)]
    no_prenorm: bool,
    /// Replace each gate row with the neuron average of its expert's `W_act`.
    #[arg(long)]
    gate_from_act: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Scratch,
    Upcycled,
    PermutedClone,
    /// Gate logits proportional to expert output norms.
    NormRouted,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Act {
    Silu,
    Gelu,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Order {
    TopkThenSoftmax,
    SoftmaxThenTopk,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KOverride {
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerSel {
    All,
    One(usize),
}

impl std::str::FromStr for LayerSel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(LayerSel::All);
        }
        s.parse()
            .map(LayerSel::One)
            .map_err(|_| format!("expected a layer index or `all`, got `{s}`"))
    }
}

fn init_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("MOE_LENS_THREADS") else {
        return Ok(());
    };
    let n: usize =
        v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            anyhow::anyhow!("MOE_LENS_THREADS must be a positive integer, got `{v}`")
        })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| commands::run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
