use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use hydra_rlhf::accounting::{
    calibrate_activation_coefficient, estimate_memory, latency_csv, measure_latency, LatencyPlan,
    LatencyTarget, MemoryInputs, MethodKind, MethodProfile, ACTIVATION_COEFF,
};
use hydra_rlhf::config::{LoadedData, RunConfig};
use hydra_rlhf::eval::{rm_winrate, rouge_against, PairingReport, RewardJudge};
use hydra_rlhf::gradcheck::{run_suite, LossKind};
use hydra_rlhf::model::{generate, AdapterSelector, GenerateOptions, HydraModel};
use hydra_rlhf::objectives::{calibrate_reward_normalizer, MIN_CALIBRATION_SAMPLES};
use hydra_rlhf::pipeline::{train_stage as run_stage, Stage, StageRun};
use hydra_rlhf::ppo::{
    method_by_name, prepare_prompts, registry, train_ppo, InitSource, PpoBench, PpoInit, RunStatus,
    TrainOptions,
};
use hydra_rlhf::tokenizer::Token;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::{
    AccountArgs, BenchArgs, Diverged, EvalArgs, Format, GradcheckArgs, PpoArgs, StageArgs, Usage,
};

/// Offsets from the run seed so stages draw independent streams.
fn stage_seed(cfg: &RunConfig, stage: Stage) -> u64 {
    cfg.seed.wrapping_add(match stage {
        Stage::Sft => 1,
        Stage::Rm => 2,
        Stage::HydraSft => 3,
    })
}

fn ppo_seed(cfg: &RunConfig) -> u64 {
    cfg.seed.wrapping_add(4)
}

fn emit(record: &impl Serialize) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, record)?;
    writeln!(out)?;
    Ok(())
}

fn prepare_out(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out_dir)
        .with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    cfg.save(cfg.out_dir.join("config.toml"))?;
    Ok(cfg.out_dir.clone())
}

fn load_data(cfg: &RunConfig) -> anyhow::Result<LoadedData> {
    let data = cfg.load_data()?;
    if data.skipped > 0 {
        eprintln!("skipped {} malformed data lines", data.skipped);
    }
    eprintln!(
        "data: {} train, {} validation examples",
        data.train.len(),
        data.val.len()
    );
    Ok(data)
}

fn save(model: &HydraModel, path: &Path) -> anyhow::Result<()> {
    model
        .save(path)
        .with_context(|| format!("saving {}", path.display()))
}

/// Runs one stage, saving `<stage>.ckpt`, or `last_good.ckpt` on divergence.
fn stage_checkpoint(
    stage: Stage,
    cfg: &RunConfig,
    data: &LoadedData,
    init: &HydraModel,
) -> anyhow::Result<HydraModel> {
    let stage_cfg = match stage {
        Stage::Sft => &cfg.sft,
        Stage::Rm => &cfg.rm,
        Stage::HydraSft => &cfg.hydra_sft,
    };
    let mut failed = None;
    let run: StageRun = run_stage(
        stage,
        init,
        &data.train,
        &data.val,
        stage_cfg,
        stage_seed(cfg, stage),
        |e| {
            if let Err(err) = emit(e) {
                failed.get_or_insert(err);
            }
        },
    )?;
    if let Some(err) = failed {
        return Err(err);
    }
    if let RunStatus::Diverged { iteration, reason } = &run.status {
        let path = cfg.out_dir.join("last_good.ckpt");
        save(&run.model, &path)?;
        eprintln!(
            "{} diverged at step {iteration}; last good weights saved to {}",
            stage.name(),
            path.display()
        );
        bail!(Diverged(format!("{} diverged: {reason}", stage.name())));
    }
    let path = cfg.out_dir.join(format!("{}.ckpt", stage.name()));
    save(&run.model, &path)?;
    eprintln!(
        "{}: best epoch {} xent {:?} rm loss {:?} pair accuracy {:?}; saved {}",
        stage.name(),
        run.best_epoch,
        run.best.xent,
        run.best.rm_loss,
        run.best.pair_accuracy,
        path.display()
    );
    Ok(run.model)
}

fn initial_model(cfg: &RunConfig, init: Option<&Path>) -> anyhow::Result<HydraModel> {
    match init {
        Some(path) => {
            let m =
                HydraModel::load(path).with_context(|| format!("loading {}", path.display()))?;
            if m.config() != &cfg.model {
                eprintln!("note: model shape taken from {}", path.display());
            }
            Ok(m)
        }
        None => Ok(HydraModel::new(cfg.model.clone(), cfg.seed)?),
    }
}

pub fn train_stage(stage: Stage, args: &StageArgs) -> anyhow::Result<ExitCode> {
    let cfg = args.resolve(stage)?;
    prepare_out(&cfg)?;
    let data = load_data(&cfg)?;
    let model = initial_model(&cfg, args.init.as_deref())?;
    stage_checkpoint(stage, &cfg, &data, &model)?;
    Ok(ExitCode::SUCCESS)
}

pub fn ppo(args: &PpoArgs) -> anyhow::Result<ExitCode> {
    let cfg = args.resolve()?;
    let method = method_by_name(&cfg.method)?;
    if !method.executable() {
        bail!(
            "method `{}` is accounted for but cannot be trained",
            method.name()
        );
    }
    if let (Some(p), None, InitSource::SftAndRm) =
        (&args.policy, &args.reward, method.init_source())
    {
        bail!(Usage(format!(
            "method `{}` needs --reward with --policy {}",
            method.name(),
            p.display()
        )));
    }
    let out = prepare_out(&cfg)?;
    let data = load_data(&cfg)?;

    let (policy, reward) = match (&args.policy, &args.reward, method.init_source()) {
        (Some(p), r, _) => {
            let policy = HydraModel::load(p).with_context(|| format!("loading {}", p.display()))?;
            let reward = match r {
                Some(r) => {
                    HydraModel::load(r).with_context(|| format!("loading {}", r.display()))?
                }
                None => policy.clone(),
            };
            (policy, reward)
        }
        (None, _, InitSource::HydraSft) => {
            let base = HydraModel::new(cfg.model.clone(), cfg.seed)?;
            let joint = stage_checkpoint(Stage::HydraSft, &cfg, &data, &base)?;
            (joint.clone(), joint)
        }
        (None, _, InitSource::SftAndRm) => {
            let base = HydraModel::new(cfg.model.clone(), cfg.seed)?;
            let sft = stage_checkpoint(Stage::Sft, &cfg, &data, &base)?;
            let rm = stage_checkpoint(Stage::Rm, &cfg, &data, &base)?;
            (sft, rm)
        }
    };

    let prompts: Vec<Vec<Token>> = data.train.iter().map(|e| e.prompt.clone()).collect();
    let opts = TrainOptions {
        seed: ppo_seed(&cfg),
        ground_truth: data.ground_truth,
    };
    let init = PpoInit {
        policy: &policy,
        reward: &reward,
    };
    let mut failed = None;
    let run = train_ppo(method.as_ref(), &init, &prompts, &cfg.ppo, &opts, |e| {
        if let Err(err) = emit(e) {
            failed.get_or_insert(err);
        }
    })?;
    if let Some(err) = failed {
        return Err(err);
    }
    let actor = run.stack.actor;
    if let RunStatus::Diverged { iteration, reason } = &run.status {
        let path = out.join("last_good.ckpt");
        save(run.stack.model(actor), &path)?;
        eprintln!(
            "ppo diverged at iteration {iteration}; last good adapters saved to {}",
            path.display()
        );
        bail!(Diverged(format!("ppo diverged: {reason}")));
    }
    let (best_iteration, logs) = (run.best_iteration, run.logs.clone());
    let stack = run.best_stack();
    let set = actor
        .selector
        .set_name()
        .context("actor role has no adapter set")?;
    let adapters = out.join(format!("ppo-{}-adapters.ckpt", method.name()));
    save(stack.model(actor), &adapters)?;
    let merged = out.join(format!("ppo-{}.ckpt", method.name()));
    save(&stack.model(actor).merge_adapters(set)?, &merged)?;
    if let Some(last) = logs.last() {
        eprintln!(
            "ppo {}: {} iterations, trailing reward {:.4}, kl {:.4}, best iteration {:?}",
            method.name(),
            logs.len(),
            last.trailing_reward,
            last.kl_mean,
            best_iteration
        );
    }
    eprintln!("saved {} and {}", merged.display(), adapters.display());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct EvalReport {
    prompts: usize,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    ground_truth: BTreeMap<String, f64>,
    pairings: Vec<PairingReport>,
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<ExitCode> {
    let cfg = args.run.resolve()?;
    let data = load_data(&cfg)?;
    let mut models = Vec::new();
    for spec in &args.models {
        let (name, path) = spec
            .split_once('=')
            .ok_or_else(|| Usage(format!("--model expects NAME=CKPT, got `{spec}`")))?;
        let m = HydraModel::load(path).with_context(|| format!("loading {path}"))?;
        models.push((name.to_string(), m));
    }
    let judge_model = HydraModel::load(&args.judge)
        .with_context(|| format!("loading {}", args.judge.display()))?;

    let mut val: Vec<_> = data
        .val
        .iter()
        .filter(|e| !e.completions.is_empty())
        .collect();
    if cfg.eval.prompts > 0 {
        val.truncate(cfg.eval.prompts);
    }
    if val.is_empty() {
        bail!("no validation examples to evaluate on");
    }
    let raw: Vec<Vec<Token>> = val.iter().map(|e| e.prompt.clone()).collect();
    let references: Vec<Vec<Token>> = val.iter().map(|e| e.completions[0].clone()).collect();
    let gen_opts = GenerateOptions {
        max_new_tokens: cfg.eval.max_new_tokens,
        temperature: cfg.eval.temperature,
        stop_at_eos: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut outputs = Vec::new();
    let mut sequences = Vec::new();
    let mut ground_truth = BTreeMap::new();
    for (name, m) in &models {
        let laid = prepare_prompts(&raw, m.config().max_seq_len, cfg.eval.max_new_tokens)?;
        let g = generate(m, &laid, AdapterSelector::Off, &gen_opts, &mut rng)?;
        let responses: Vec<Vec<Token>> = (0..g.sequences.len())
            .map(|i| g.response(i).to_vec())
            .collect();
        if let Some(gt) = &data.ground_truth {
            let mean = responses.iter().map(|r| gt.reward(r)).sum::<f64>() / responses.len() as f64;
            ground_truth.insert(name.clone(), mean);
        }
        sequences.extend(g.sequences);
        outputs.push(responses);
    }
    // normalized against the pooled outputs of every evaluated policy,
    // topped up with extra samples on small evaluation sets
    let mut k = 0;
    while sequences.len() < MIN_CALIBRATION_SAMPLES {
        let m = &models[k % models.len()].1;
        let laid = prepare_prompts(&raw, m.config().max_seq_len, cfg.eval.max_new_tokens)?;
        sequences.extend(generate(m, &laid, AdapterSelector::Off, &gen_opts, &mut rng)?.sequences);
        k += 1;
    }
    let normalizer = calibrate_reward_normalizer(&judge_model, &sequences)?;
    let judge = RewardJudge {
        model: &judge_model,
        selector: AdapterSelector::Off,
        normalizer,
    };

    let mut pairings = Vec::new();
    for i in 0..models.len() {
        for j in i + 1..models.len() {
            let winrate = rm_winrate(&raw, &outputs[i], &outputs[j], &judge, cfg.eval.tie_band)?;
            let (r1a, rla) = rouge_against(&outputs[i], &references)?;
            let (r1b, rlb) = rouge_against(&outputs[j], &references)?;
            eprintln!(
                "{} vs {}: win {:.1} / lose {:.1} / tie {:.1} over {} prompts",
                models[i].0, models[j].0, winrate.wins_a, winrate.wins_b, winrate.ties, winrate.n
            );
            pairings.push(PairingReport {
                a: models[i].0.clone(),
                b: models[j].0.clone(),
                winrate,
                rouge1_a: Some(r1a),
                rouge_l_a: Some(rla),
                rouge1_b: Some(r1b),
                rouge_l_b: Some(rlb),
            });
        }
    }
    for (name, v) in &ground_truth {
        eprintln!("{name}: mean true reward {v:.4}");
    }
    emit(&EvalReport {
        prompts: raw.len(),
        ground_truth,
        pairings,
    })?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct AccountRow {
    #[serde(flatten)]
    profile: MethodProfile,
    memory: hydra_rlhf::accounting::MemoryEstimate,
}

pub fn account(args: &AccountArgs) -> anyhow::Result<ExitCode> {
    let methods = match &args.method {
        Some(name) => vec![name.parse::<MethodKind>()?],
        None => MethodKind::ALL.to_vec(),
    };
    let inputs = MemoryInputs {
        model_param_count: args.params,
        precision_bytes: args.precision,
        batch: args.batch,
        seq_len: args.seq_len,
        d_model: args.d_model,
        n_layers: args.layers,
        adapter_rank: args.rank,
    };
    let rows: Vec<AccountRow> = methods
        .into_iter()
        .map(|m| AccountRow {
            profile: MethodProfile::of(m),
            memory: estimate_memory(m, &inputs),
        })
        .collect();
    match args.format {
        Format::Json => {
            for r in &rows {
                emit(r)?;
            }
        }
        Format::Text => {
            const GB: f64 = 1e9;
            for r in &rows {
                let m = &r.memory;
                println!(
                    "{}: {} static, {} LoRA sets; model {:.2} GB, adapters {:.2} GB, optimizer {:.2} GB, activations {:.2} GB, total {:.2} GB",
                    r.profile.method,
                    r.profile.static_models,
                    r.profile.lora_sets,
                    m.model_bytes / GB,
                    m.adapter_bytes / GB,
                    m.optimizer_bytes / GB,
                    m.activation_bytes / GB,
                    m.total_bytes / GB
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

pub fn bench(args: &BenchArgs) -> anyhow::Result<ExitCode> {
    let cfg = args.run.resolve()?;
    if args.calibrate {
        let seq = cfg.model.max_seq_len.min(16);
        let measured = calibrate_activation_coefficient(&cfg.model, 2, seq)?;
        eprintln!("activation coefficient: measured {measured}, built in {ACTIVATION_COEFF}");
        emit(
            &serde_json::json!({ "measured": measured, "built_in": ACTIVATION_COEFF, "batch": 2, "seq_len": seq }),
        )?;
        return Ok(ExitCode::SUCCESS);
    }
    let names: Vec<String> = if args.methods.is_empty() {
        registry()
            .into_iter()
            .filter(|(_, m)| m.executable())
            .map(|(n, _)| n.to_string())
            .collect()
    } else {
        args.methods.clone()
    };
    if let Some(&s) = args.seq_lens.iter().find(|&&s| s > cfg.model.max_seq_len) {
        bail!(Usage(format!(
            "sequence length {s} exceeds max_seq_len {}",
            cfg.model.max_seq_len
        )));
    }
    let model = HydraModel::new(cfg.model.clone(), cfg.seed)?;
    let mut benches = Vec::new();
    for name in &names {
        let method = method_by_name(name)?;
        if !method.executable() {
            eprintln!("skipping `{name}`: accounted for but not executable");
            continue;
        }
        benches.push(PpoBench::new(
            method,
            &PpoInit::shared(&model),
            &cfg.ppo,
            ppo_seed(&cfg),
        )?);
    }
    let memory = MemoryInputs::for_config(&cfg.model, 8.0, 1, cfg.model.max_seq_len);
    let budget_bytes = args.budget_bytes.unwrap_or_else(|| {
        let longest = args
            .seq_lens
            .iter()
            .copied()
            .max()
            .unwrap_or(cfg.model.max_seq_len);
        estimate_memory(
            MethodKind::LoraPpo,
            &MemoryInputs {
                batch: 1,
                seq_len: longest,
                ..memory
            },
        )
        .total_bytes
    });
    let plan = LatencyPlan {
        seq_lens: args.seq_lens.clone(),
        budget_bytes,
        effective_batch: args.effective_batch,
        warmup: args.warmup,
        iterations: args.iterations,
        memory,
    };
    eprintln!(
        "budget {budget_bytes:.0} bytes, effective batch {}",
        args.effective_batch
    );
    let mut targets: Vec<&mut dyn LatencyTarget> = benches
        .iter_mut()
        .map(|b| b as &mut dyn LatencyTarget)
        .collect();
    let records = measure_latency(&mut targets, &plan)?;
    let csv = latency_csv(&records);
    print!("{csv}");
    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join("latency.csv");
    std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("saved {}", path.display());
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: &GradcheckArgs) -> anyhow::Result<ExitCode> {
    let kinds = if args.losses.is_empty() {
        LossKind::ALL.to_vec()
    } else {
        args.losses
            .iter()
            .map(|n| {
                LossKind::ALL
                    .into_iter()
                    .find(|k| k.name() == n)
                    .ok_or_else(|| Usage(format!("unknown loss `{n}`")))
            })
            .collect::<Result<_, _>>()?
    };
    let results = run_suite(&kinds, args.fixtures, args.seed)?;
    let mut ok = true;
    for r in &results {
        emit(r)?;
        eprintln!(
            "{}: {} fixtures, max relative error {:.2e} (fixture {}) {}",
            r.loss.name(),
            r.fixtures,
            r.max_relative_error,
            r.worst_fixture,
            if r.passed { "pass" } else { "FAIL" }
        );
        ok &= r.passed;
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(4)
    })
}
