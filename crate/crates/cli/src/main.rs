mod commands;
mod config;
mod output;
mod toylm_cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use steerscope::extract::{Method, Normalization};
use steerscope::metrics::{DEFAULT_COSINE_THRESHOLD, DEFAULT_SCALE, DEFAULT_SPIKE_FLOOR, DEFAULT_TOP_K};
use steerscope::steer::OptionScoring;
use steerscope::stimulus::DEFAULT_TRAIN_FRACTION;
use steerscope::synthgen::RotationEvent;
use steerscope::toylm::{ModelConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "steerscope", version, about = "Concept-direction emergence across training checkpoints")]
struct Cli {
    /// JSON object of flag values for the subcommand (keys as flag names,
    /// `_` or `-`); flags given on the command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a contrastive stimulus set to JSON.
    Render(RenderArgs),
    /// Check an activation dump (and optionally its pair) against the store format.
    Validate(ValidateArgs),
    /// Fit one concept vector per checkpoint and layer.
    Fit(FitArgs),
    /// Score held-out pairs and write the ID matrix, report and plots.
    Report(ReportArgs),
    /// Write an intervention spec from fitted vectors.
    Spec(SpecArgs),
    /// Write a synthetic emergence scenario with gold labels.
    Synth(SynthArgs),
    /// Detector recovery on ramp scenarios and false positives on null scenarios.
    Bench(BenchArgs),
    /// Train, dump, steer and evaluate the toy transformer.
    #[command(subcommand)]
    Toylm(ToylmCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Pca,
    Kmeans,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Pca => Method::Pca,
            MethodArg::Kmeans => Method::Kmeans,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum NormalizationArg {
    #[value(name = "per_dim_zscore", alias = "zscore")]
    PerDimZscore,
    #[value(name = "per_row_l2", alias = "l2")]
    PerRowL2,
    None,
}

impl From<NormalizationArg> for Normalization {
    fn from(n: NormalizationArg) -> Self {
        match n {
            NormalizationArg::PerDimZscore => Normalization::PerDimZscore,
            NormalizationArg::PerRowL2 => Normalization::PerRowL2,
            NormalizationArg::None => Normalization::None,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoringArg {
    #[value(name = "first_token")]
    FirstToken,
    #[value(name = "full_sequence")]
    FullSequence,
}

impl From<ScoringArg> for OptionScoring {
    fn from(s: ScoringArg) -> Self {
        match s {
            ScoringArg::FirstToken => OptionScoring::FirstToken,
            ScoringArg::FullSequence => OptionScoring::FullSequence,
        }
    }
}

#[derive(Args)]
struct RenderArgs {
    /// Output stimulus file.
    #[arg(long)]
    out: PathBuf,
    /// Bundled emotion to contrast against the other bundled emotions.
    #[arg(long, conflicts_with_all = ["scenarios", "supervised"])]
    emotion: Option<String>,
    /// Positive scenario file, one scenario per line.
    #[arg(long, requires = "negatives", conflicts_with = "supervised")]
    scenarios: Option<PathBuf>,
    /// Negative scenario files; each file stem labels one pool.
    #[arg(long, value_delimiter = ',')]
    negatives: Vec<PathBuf>,
    /// Multiple-choice JSON lines (question, options, answer_index).
    #[arg(long)]
    supervised: Option<PathBuf>,
    /// Concept name; defaults to the emotion or the input file stem.
    #[arg(long)]
    concept: Option<String>,
    /// Number of pairs for scenario sets.
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long, env = "STEERSCOPE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
}

#[derive(Args)]
struct ValidateArgs {
    /// Dump directory.
    #[arg(long)]
    dump: PathBuf,
    /// Opposite-polarity dump to check pairing against.
    #[arg(long)]
    pair: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Positive dump directory.
    #[arg(long)]
    pos: PathBuf,
    /// Negative dump directory.
    #[arg(long)]
    neg: PathBuf,
    /// Output directory for the fitted vectors.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "pca")]
    method: MethodArg,
    #[arg(long, value_enum, default_value = "per_dim_zscore")]
    normalization: NormalizationArg,
    /// Seed of the train/test split over pair ids.
    #[arg(long, env = "STEERSCOPE_SEED", default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
    /// Emit flagged placeholders for cells with all-zero train differences.
    #[arg(long)]
    allow_degenerate: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Fit directory written by `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    pos: PathBuf,
    #[arg(long)]
    neg: PathBuf,
    /// Output directory for CSVs, report.json and SVGs.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOP_K)]
    top_k: usize,
    #[arg(long, default_value_t = DEFAULT_SCALE, allow_negative_numbers = true)]
    scale: f64,
    #[arg(long, default_value_t = DEFAULT_COSINE_THRESHOLD)]
    cosine_threshold: f64,
    #[arg(long, default_value_t = DEFAULT_SPIKE_FLOOR)]
    spike_floor: f64,
    /// Layer for the cosine plot and drop cue; defaults to the top-ranked layer.
    #[arg(long)]
    cosine_layer: Option<usize>,
}

#[derive(Args)]
struct SpecArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Output directory for the intervention spec.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint label whose vectors to use; defaults to the last.
    #[arg(long)]
    checkpoint: Option<String>,
    /// Layers to steer.
    #[arg(long, value_delimiter = ',', required_unless_present = "report")]
    layers: Vec<usize>,
    /// report.json supplying recommended layers and scale.
    #[arg(long, conflicts_with = "layers")]
    report: Option<PathBuf>,
    /// Steering scale; defaults to the report's scale, else 40.
    #[arg(long, allow_negative_numbers = true)]
    scale: Option<f64>,
}

fn parse_rotation(s: &str) -> Result<RotationEvent, String> {
    let (c, deg) = s.split_once(':').ok_or("rotation must be CHECKPOINT:DEGREES")?;
    Ok(RotationEvent {
        checkpoint: c.trim().parse().map_err(|e| format!("rotation checkpoint: {e}"))?,
        angle_degrees: deg.trim().parse().map_err(|e| format!("rotation angle: {e}"))?,
    })
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    checkpoints: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Prompt pairs per dump.
    #[arg(long, default_value_t = 64)]
    samples: usize,
    /// Planted onset checkpoint.
    #[arg(long, default_value_t = 3)]
    onset: usize,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, env = "STEERSCOPE_SEED", default_value_t = 0)]
    seed: u64,
    /// Checkpoints over which the gain rises to its peak.
    #[arg(long, default_value_t = 4)]
    ramp_len: usize,
    #[arg(long, default_value_t = 2.0)]
    peak: f64,
    /// Planted rotations as CHECKPOINT:DEGREES, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_rotation)]
    rotation: Vec<RotationEvent>,
    /// Pure noise: all gains zero.
    #[arg(long)]
    null: bool,
    /// Recorded token positions; the signal sits at the last.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1")]
    positions: Vec<i64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
    /// Ramp and evaluation-null runs.
    #[arg(long, default_value_t = 100)]
    runs: usize,
    #[arg(long, env = "STEERSCOPE_SEED", default_value_t = 0)]
    seed_start: u64,
    /// Calibration-null runs, on seeds disjoint from the evaluation ones.
    #[arg(long, default_value_t = 100)]
    null_runs: usize,
    #[arg(long, default_value_t = 1000)]
    null_seed_start: u64,
    #[arg(long, default_value_t = 0.99)]
    quantile: f64,
    /// Fixed spike floor; calibrated from the nulls when absent.
    #[arg(long)]
    spike_floor: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    sigma: f64,
    #[arg(long, default_value_t = 10)]
    checkpoints: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 64)]
    samples: usize,
    #[arg(long, default_value_t = 4)]
    ramp_len: usize,
}

#[derive(Subcommand)]
enum ToylmCommand {
    /// Train with periodic checkpoints.
    Train(TrainArgs),
    /// Dump post-block residuals of marker pairs at every checkpoint.
    Dump(DumpArgs),
    /// Per-checkpoint mean logit shift under steering.
    Intervene(InterveneArgs),
    /// Multiple-choice accuracy on unmarked items, steered and baseline.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = ModelConfig::default().num_layers)]
    layers: usize,
    #[arg(long, default_value_t = ModelConfig::default().hidden_dim)]
    dim: usize,
    #[arg(long, default_value_t = ModelConfig::default().num_heads)]
    heads: usize,
    #[arg(long, default_value_t = ModelConfig::default().vocab_size)]
    vocab: usize,
    #[arg(long, default_value_t = ModelConfig::default().context_len)]
    context: usize,
    /// Parameter initialization seed.
    #[arg(long, env = "STEERSCOPE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = TrainConfig::default().checkpoint_every)]
    checkpoint_every: usize,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f32,
    #[arg(long, default_value_t = TrainConfig::default().warmup_steps)]
    warmup: usize,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch: usize,
    /// Corpus seed; defaults to the parameter seed.
    #[arg(long)]
    corpus_seed: Option<u64>,
    #[arg(long, default_value_t = TrainConfig::default().seq_len)]
    seq_len: usize,
    /// Probability that the class token agrees with the marker.
    #[arg(long, default_value_t = TrainConfig::default().p_signal)]
    p_signal: f64,
}

#[derive(Args)]
struct DumpArgs {
    /// Run directory written by `toylm train`.
    #[arg(long)]
    run: PathBuf,
    /// Output root; receives pos/, neg/ and stimuli.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pairs: usize,
    #[arg(long, env = "STEERSCOPE_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_TRAIN_FRACTION)]
    train_fraction: f64,
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_value = "-1")]
    positions: Vec<i64>,
}

#[derive(Args)]
struct InterveneArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    fit: PathBuf,
    /// stimuli.json written by `toylm dump`.
    #[arg(long)]
    stimuli: PathBuf,
    /// Output directory for shifts.csv, shifts.json and shifts.svg.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', required_unless_present = "report")]
    layers: Vec<usize>,
    /// report.json supplying recommended layers and scale.
    #[arg(long, conflicts_with = "layers")]
    report: Option<PathBuf>,
    /// Steering scale; defaults to the report's scale, else 40.
    #[arg(long, allow_negative_numbers = true)]
    scale: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    /// Intervention spec directory, or `null` for no steering.
    #[arg(long)]
    spec: String,
    /// Output JSON file.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint label to evaluate; defaults to the last.
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long, default_value_t = 64)]
    items: usize,
    #[arg(long, env = "STEERSCOPE_SEED", default_value_t = 0)]
    seed: u64,
    /// Overrides the spec's scale.
    #[arg(long, allow_negative_numbers = true)]
    scale: Option<f64>,
    #[arg(long, value_enum, default_value = "first_token")]
    scoring: ScoringArg,
}

fn run(cli: Cli) -> steerscope::Result<()> {
    match cli.command {
        Command::Render(a) => commands::render(a),
        Command::Validate(a) => commands::validate(a),
        Command::Fit(a) => commands::fit(a),
        Command::Report(a) => commands::report(a),
        Command::Spec(a) => commands::spec(a),
        Command::Synth(a) => commands::synth(a),
        Command::Bench(a) => commands::bench(a),
        Command::Toylm(ToylmCommand::Train(a)) => toylm_cmd::train(a),
        Command::Toylm(ToylmCommand::Dump(a)) => toylm_cmd::dump(a),
        Command::Toylm(ToylmCommand::Intervene(a)) => toylm_cmd::intervene(a),
        Command::Toylm(ToylmCommand::Eval(a)) => toylm_cmd::eval(a),
    }
}

fn main() -> ExitCode {
    let args = match config::merge(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(msg) => {
            output::diagnostic("InvalidConfig", &msg, 2);
            return ExitCode::from(2);
        }
    };
    let cli = Cli::parse_from(args);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            output::diagnostic(e.kind(), &e.to_string(), code);
            ExitCode::from(code as u8)
        }
    }
}
