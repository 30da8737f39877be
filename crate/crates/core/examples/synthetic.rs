//! Hydra-SFT followed by Hydra-PPO on the synthetic marker task.

use std::time::Instant;

use hydra_rlhf::data::{split, synthetic_batch, SyntheticTaskSpec};
use hydra_rlhf::eval::{rm_winrate, RewardJudge, DEFAULT_TIE_BAND};
use hydra_rlhf::model::{generate, AdapterSelector, GenerateOptions, HydraModel, ModelConfig};
use hydra_rlhf::objectives::calibrate_reward_normalizer;
use hydra_rlhf::pipeline::{train_hydra_sft, StageConfig};
use hydra_rlhf::ppo::{
    method_by_name, prepare_prompts, train_ppo, PpoConfig, PpoInit, TrainOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> hydra_rlhf::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let t0 = Instant::now();
    let spec = SyntheticTaskSpec {
        seed: 1,
        ..Default::default()
    };
    let (examples, gt) = synthetic_batch(&spec, 900)?;
    let (train, val) = split(examples, 0.1);
    let cfg = ModelConfig {
        d_model: arg(1, 32.0) as usize,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 24,
        ..ModelConfig::default()
    };
    let base = HydraModel::new(cfg, 7)?;
    let stage = StageConfig {
        lr: arg(2, 3e-3),
        batch_size: 16,
        epochs: arg(3, 4.0) as usize,
        warmup: 20,
        ..Default::default()
    };
    let sft = train_hydra_sft(&base, &train, &val, &stage, 3, |e| {
        if let Some(v) = &e.validation {
            eprintln!(
                "epoch {} {:?} {:.1}s",
                e.epoch,
                v,
                t0.elapsed().as_secs_f64()
            );
        }
    })?;
    let model = sft.model;
    let prompts: Vec<Vec<u32>> = train.iter().map(|e| e.prompt.clone()).collect();
    let ppo = PpoConfig {
        iterations: 200,
        generation_batch: 16,
        minibatch_size: 8,
        max_new_tokens: 9,
        actor_lr: arg(4, 5e-3),
        critic_lr: arg(5, 5e-3),
        warmup: 10,
        ..Default::default()
    };
    let opts = TrainOptions {
        seed: 11,
        ground_truth: Some(gt),
    };
    let run = train_ppo(
        method_by_name("hydra")?.as_ref(),
        &PpoInit::shared(&model),
        &prompts,
        &ppo,
        &opts,
        |e| {
            if e.iteration % 20 == 0 {
                eprintln!(
                    "it {} gt {:.3} r {:.3} kl {:.4} len {:.1}",
                    e.iteration,
                    e.ground_truth_reward.unwrap(),
                    e.mean_reward,
                    e.kl_mean,
                    e.mean_response_len
                );
            }
        },
    )?;
    let gts: Vec<f64> = run
        .logs
        .iter()
        .map(|e| e.ground_truth_reward.unwrap())
        .collect();
    let tail = gts[gts.len() - 20..].iter().sum::<f64>() / 20.0;

    // baseline: SFT samples on the validation prompts
    let vprompts = prepare_prompts(
        &val.iter().map(|e| e.prompt.clone()).collect::<Vec<_>>(),
        24,
        9,
    )?;
    let gopts = GenerateOptions {
        max_new_tokens: 9,
        temperature: 1.0,
        stop_at_eos: true,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut base_sum = 0.0;
    let mut n = 0;
    for _ in 0..4 {
        let g = generate(&model, &vprompts, AdapterSelector::Off, &gopts, &mut rng)?;
        for i in 0..g.sequences.len() {
            base_sum += gt.reward(g.response(i));
            n += 1;
        }
    }
    let baseline = base_sum / n as f64;
    let stack = run.stack;
    let gp = generate(
        stack.model(stack.actor),
        &vprompts,
        stack.actor.selector,
        &gopts,
        &mut rng,
    )?;
    let gb = generate(&model, &vprompts, AdapterSelector::Off, &gopts, &mut rng)?;
    let ra: Vec<Vec<u32>> = (0..gp.sequences.len())
        .map(|i| gp.response(i).to_vec())
        .collect();
    let rb: Vec<Vec<u32>> = (0..gb.sequences.len())
        .map(|i| gb.response(i).to_vec())
        .collect();
    let raw: Vec<Vec<u32>> = val.iter().map(|e| e.prompt.clone()).collect();
    let norm = calibrate_reward_normalizer(&model, &gb.sequences)?;
    let judge = RewardJudge {
        model: &model,
        selector: AdapterSelector::Off,
        normalizer: norm,
    };
    let wr = rm_winrate(&raw, &ra, &rb, &judge, DEFAULT_TIE_BAND)?;
    println!(
        "acc {:?} baseline {baseline:.4} tail {tail:.4} margin {:.4} winrate {:?} best_it {:?} {:.1}s",
        sft.best.pair_accuracy,
        tail - baseline,
        wr,
        run.best_iteration,
        t0.elapsed().as_secs_f64()
    );
    Ok(())
}
