//! `hydra`: train, evaluate and account for PPO variants on shared-trunk
//! two-headed models.
//!
//! Exit codes: 0 success, 1 error, 2 usage error, 3 training diverged (the
//! last finite checkpoint is saved as `last_good.ckpt`), 4 failed gradient
//! check.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hydra_rlhf::config::{preset, DataSource, RunConfig};
use hydra_rlhf::pipeline::Stage;

#[derive(Parser)]
#[command(
    name = "hydra",
    version,
    about = "Hydra-RLHF training, evaluation and accounting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised fine-tuning on the best completion of each example.
    TrainSft(StageArgs),
    /// Pairwise reward-model training.
    TrainRm(StageArgs),
    /// Joint language-model and reward-head training of one model.
    TrainHydraSft(StageArgs),
    /// PPO with one of the registered methods.
    Ppo(PpoArgs),
    /// Reward-judged win rates and ROUGE of saved policies.
    Eval(EvalArgs),
    /// Static-model ledger and memory estimate per method.
    Account(AccountArgs),
    /// Per-sample PPO latency under a memory budget, as CSV.
    Bench(BenchArgs),
    /// Finite-difference gradient checks of every loss.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every command that reads a run configuration.
#[derive(Args, Clone)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in configuration; defaults to synthetic-small.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for checkpoints and the resolved configuration.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON-lines dataset, replacing the configured data source.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Override any configuration value, e.g. `--set ppo.kl_beta=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => RunConfig::load(path)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(path) = &self.data {
            cfg.data = DataSource::Jsonl { path: path.clone() };
        }
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Checkpoint to start from; a fresh model when omitted.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Peak learning rate of this stage.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl StageArgs {
    fn resolve(&self, stage: Stage) -> anyhow::Result<RunConfig> {
        let mut cfg = self.run.resolve()?;
        let section = match stage {
            Stage::Sft => &mut cfg.sft,
            Stage::Rm => &mut cfg.rm,
            Stage::HydraSft => &mut cfg.hydra_sft,
        };
        section.lr = self.lr.unwrap_or(section.lr);
        section.epochs = self.epochs.unwrap_or(section.epochs);
        section.batch_size = self.batch_size.unwrap_or(section.batch_size);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct PpoArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Registry name: hydra, j-hydra, dynamic-lora, lora or full-ft.
    #[arg(long)]
    method: Option<String>,
    /// Policy checkpoint (the joint model for the shared-trunk methods).
    /// When omitted the required fine-tuning stages run first.
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Reward-model checkpoint for the separate-model methods.
    #[arg(long, requires = "policy")]
    reward: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    actor_lr: Option<f64>,
    #[arg(long)]
    critic_lr: Option<f64>,
    /// KL penalty coefficient.
    #[arg(long)]
    kl_beta: Option<f64>,
}

impl PpoArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = self.run.resolve()?;
        if let Some(m) = &self.method {
            cfg.method = m.clone();
        }
        let ppo = &mut cfg.ppo;
        ppo.iterations = self.iterations.unwrap_or(ppo.iterations);
        ppo.actor_lr = self.actor_lr.unwrap_or(ppo.actor_lr);
        ppo.critic_lr = self.critic_lr.unwrap_or(ppo.critic_lr);
        ppo.kl_beta = self.kl_beta.unwrap_or(ppo.kl_beta);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Policy to evaluate, as NAME=CHECKPOINT; at least two for win rates.
    #[arg(long = "model", value_name = "NAME=CKPT", required = true)]
    models: Vec<String>,
    /// Checkpoint whose reward head judges the outputs.
    #[arg(long)]
    judge: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Args)]
struct AccountArgs {
    /// Ledger name such as hydra-ppo; every method when omitted.
    #[arg(long)]
    method: Option<String>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    #[arg(long, default_value_t = 7e9)]
    params: f64,
    /// Bytes per stored value.
    #[arg(long, default_value_t = 2.0)]
    precision: f64,
    #[arg(long, default_value_t = 4096)]
    d_model: usize,
    #[arg(long, default_value_t = 32)]
    layers: usize,
    #[arg(long, default_value_t = 128)]
    rank: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 512)]
    seq_len: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Registry names to time; every executable method when omitted.
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Sequence lengths (prompt plus response).
    #[arg(long, value_delimiter = ',', default_value = "8,12,16,20,24")]
    seq_lens: Vec<usize>,
    /// Memory budget in bytes; by default LoRA-PPO fits one sample at the longest length.
    #[arg(long)]
    budget_bytes: Option<f64>,
    #[arg(long, default_value_t = 8)]
    effective_batch: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value_t = 20)]
    iterations: usize,
    /// Measure the activation coefficient on the configured model and exit.
    #[arg(long)]
    calibrate: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = hydra_rlhf::gradcheck::DEFAULT_FIXTURES)]
    fixtures: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Loss to check (xent, rm_pairwise, hydra_sft, ppo_clip, value); all when omitted.
    #[arg(long = "loss")]
    losses: Vec<String>,
}

/// Invalid flag combination detected after parsing.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

/// A run that stopped on non-finite values after saving its last good state.
#[derive(Debug)]
struct Diverged(String);

impl std::fmt::Display for Diverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Diverged {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainSft(a) => commands::train_stage(Stage::Sft, &a),
        Command::TrainRm(a) => commands::train_stage(Stage::Rm, &a),
        Command::TrainHydraSft(a) => commands::train_stage(Stage::HydraSft, &a),
        Command::Ppo(a) => commands::ppo(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Account(a) => commands::account(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else if e.is::<Diverged>() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
