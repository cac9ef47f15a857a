use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use altgrad::report::Report;
use altgrad::runners::run;
use altgrad::spec::{ActivationArg, Command, FormatArg, LossArg, PathArg, RunSpec};

/// Computes transformer attention gradients on an exact dense path and a
/// factored near-linear path, and measures how well and how fast the two
/// agree.
#[derive(Parser)]
#[command(name = "altgrad", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Per-layer gradient errors: fast vs exact, exact vs finite differences
    Gradcheck(CommonArgs),
    /// Attention and gradient error as a function of Taylor degree
    Errsweep(CommonArgs),
    /// Flop counts and wall times of both paths across sequence lengths
    Scaling(CommonArgs),
    /// A short SGD run driven by fast-path gradients
    #[command(name = "train-demo")]
    TrainDemo(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Sequence length
    #[arg(long)]
    n: Option<usize>,
    /// Hidden dimension
    #[arg(long)]
    d: Option<usize>,
    /// Number of transformer layers
    #[arg(long)]
    layers: Option<usize>,
    /// Number of attention heads (must divide d)
    #[arg(long)]
    heads: Option<usize>,
    /// Seed for instance generation
    #[arg(long)]
    seed: Option<u64>,
    /// Taylor truncation degree for the factored kernel
    #[arg(long)]
    degree: Option<usize>,
    /// Degrees for the error sweep
    #[arg(long, value_delimiter = ',')]
    degrees: Option<Vec<usize>>,
    /// Sequence lengths for the scaling run
    #[arg(long = "n-list", value_delimiter = ',')]
    n_list: Option<Vec<usize>>,
    /// Enable residual connections
    #[arg(long)]
    residual: bool,
    /// Enable the causal mask
    #[arg(long)]
    causal: bool,
    /// Loss: cross-entropy through a linear head, or squared distance
    #[arg(long, value_enum)]
    loss: Option<LossArg>,
    /// Gradient path for model-level commands
    #[arg(long, value_enum)]
    path: Option<PathArg>,
    /// Activation inside the non-attention map
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    /// SGD steps for the training demo
    #[arg(long)]
    steps: Option<usize>,
    /// SGD learning rate for the training demo
    #[arg(long)]
    lr: Option<f64>,
    /// Write the report here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report format
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

fn resolve(command: Command, args: &CommonArgs) -> RunSpec {
    let mut spec = RunSpec::defaults(command);
    if let Some(v) = args.n {
        spec.n = v;
    }
    if let Some(v) = args.d {
        spec.d = v;
    }
    if let Some(v) = args.layers {
        spec.layers = v;
    }
    if let Some(v) = args.heads {
        spec.heads = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(v) = args.degree {
        spec.degree = v;
    }
    if let Some(v) = &args.degrees {
        spec.degrees = v.clone();
    }
    if let Some(v) = &args.n_list {
        spec.n_list = v.clone();
    }
    if args.residual {
        spec.residual = true;
    }
    if args.causal {
        spec.causal = true;
    }
    if let Some(v) = args.loss {
        spec.loss = v;
    }
    if let Some(v) = args.path {
        spec.path = v;
    }
    if let Some(v) = args.activation {
        spec.activation = v;
    }
    if let Some(v) = args.steps {
        spec.steps = v;
    }
    if let Some(v) = args.lr {
        spec.lr = v;
    }
    if let Some(v) = args.format {
        spec.format = v;
    }
    spec
}

fn emit(report: &Report, out: &Option<PathBuf>) -> std::io::Result<()> {
    let body = match report.config.format {
        FormatArg::Json => report.to_json(),
        FormatArg::Csv => report.to_csv(),
    };
    match out {
        Some(path) => std::fs::write(path, body),
        None => {
            print!("{body}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let (command, args) = match &cli.command {
        Cmd::Gradcheck(a) => (Command::Gradcheck, a),
        Cmd::Errsweep(a) => (Command::Errsweep, a),
        Cmd::Scaling(a) => (Command::Scaling, a),
        Cmd::TrainDemo(a) => (Command::TrainDemo, a),
    };
    let spec = resolve(command, args);

    match run(&spec) {
        Ok(output) => {
            if let Err(e) = emit(&output.report, &args.out) {
                eprintln!("failed to write report: {e}");
                return ExitCode::from(1);
            }
            if output.violations.is_empty() {
                ExitCode::SUCCESS
            } else {
                for v in &output.violations {
                    eprintln!("threshold violation: {v}");
                }
                ExitCode::from(2)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
