use hydra_rlhf::accounting::{count_materializations, model_counts, MethodKind};
use hydra_rlhf::model::{AdapterSelector, Heads, HydraModel, ModelConfig, ACTOR};
use hydra_rlhf::objectives::RewardNormalizer;
use hydra_rlhf::ppo::{
    collect_rollouts, method_by_name, method_for_kind, prepare_prompts, registry, train_ppo,
    PhasePurpose, PpoConfig, PpoInit, RunStatus, TrainOptions,
};
use hydra_rlhf::tokenizer::encode;
use hydra_rlhf::Error;
use hydra_tensor::Graph;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const EXECUTABLE: [&str; 4] = ["hydra", "j-hydra", "dynamic-lora", "lora"];

fn model() -> HydraModel {
    let cfg = ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 24,
        ..ModelConfig::default()
    };
    HydraModel::new(cfg, 11).unwrap()
}

fn ppo_cfg() -> PpoConfig {
    PpoConfig {
        generation_batch: 4,
        minibatch_size: 2,
        iterations: 3,
        warmup: 1,
        max_new_tokens: 6,
        calibration_samples: 32,
        best_window: 2,
        ..PpoConfig::default()
    }
}

fn prompts() -> Vec<Vec<u32>> {
    ["ab", "hello", "x", "abcdefg", "qq"]
        .iter()
        .map(|s| encode(s))
        .collect()
}

fn laid_out(m: &HydraModel, cfg: &PpoConfig) -> Vec<Vec<u32>> {
    prepare_prompts(&prompts(), m.config().max_seq_len, cfg.max_new_tokens).unwrap()
        [..cfg.generation_batch]
        .to_vec()
}

#[test]
fn registry_holds_every_method_kind() {
    let reg = registry();
    assert_eq!(reg.len(), MethodKind::ALL.len());
    for kind in MethodKind::ALL {
        assert_eq!(method_for_kind(kind).kind(), kind);
    }
    assert!(matches!(
        method_by_name("sgd"),
        Err(Error::UnknownMethod(_))
    ));
}

#[test]
fn wiring_materializes_the_expected_model_count() {
    let m = model();
    let cfg = ppo_cfg();
    for (name, expected) in [
        ("hydra", 1),
        ("j-hydra", 1),
        ("dynamic-lora", 2),
        ("lora", 4),
        ("full-ft", 4),
    ] {
        let method = method_by_name(name).unwrap();
        let (stack, n) =
            count_materializations(|| method.wire(&PpoInit::shared(&m), &cfg, 0).unwrap());
        assert_eq!(n, expected, "{name}");
        assert_eq!(stack.models().count(), expected, "{name}");
        assert_eq!(model_counts(method.kind()).0, expected, "{name}");
    }
}

#[test]
fn zero_initialized_actor_matches_reference() {
    let m = model();
    let cfg = ppo_cfg();
    let p = laid_out(&m, &cfg);
    for name in EXECUTABLE {
        let stack = method_by_name(name)
            .unwrap()
            .wire(&PpoInit::shared(&m), &cfg, 5)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (batch, _) =
            collect_rollouts(&stack, &p, &cfg, &RewardNormalizer::default(), &mut rng).unwrap();
        for i in 0..batch.mask.len() {
            if batch.mask[i] {
                assert_eq!(batch.old_logp[i], batch.ref_logp[i], "{name} position {i}");
            }
        }
        assert_eq!(batch.kl_mean(), 0.0, "{name}");
        // only the terminal reward survives when the KL term is zero
        for r in 0..batch.rows() {
            let row = &batch.rewards[r * batch.seq()..(r + 1) * batch.seq()];
            let last = batch.lens[r] - 2;
            for (j, &x) in row.iter().enumerate() {
                let expect = if j == last {
                    batch.terminal_rewards[r]
                } else {
                    0.0
                };
                assert_eq!(x, expect, "{name} row {r} position {j}");
            }
        }
    }
}

#[test]
fn phase_traces_follow_the_wiring() {
    let m = model();
    let cfg = ppo_cfg();
    let p = laid_out(&m, &cfg);
    use AdapterSelector::*;
    use PhasePurpose::*;
    let expected = [
        (
            "hydra",
            vec![
                (Actor, Generate),
                (Critic, Values),
                (Off, ReferenceAndReward),
            ],
        ),
        (
            "j-hydra",
            vec![(Joint, GenerateAndValues), (Off, ReferenceAndReward)],
        ),
        (
            "dynamic-lora",
            vec![
                (Actor, Generate),
                (Critic, Values),
                (Off, Reference),
                (Off, Reward),
            ],
        ),
        (
            "lora",
            vec![
                (Actor, Generate),
                (Critic, Values),
                (Off, Reference),
                (Off, Reward),
            ],
        ),
    ];
    for (name, want) in expected {
        let stack = method_by_name(name)
            .unwrap()
            .wire(&PpoInit::shared(&m), &cfg, 5)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (_, phases) =
            collect_rollouts(&stack, &p, &cfg, &RewardNormalizer::default(), &mut rng).unwrap();
        let got: Vec<_> = phases.iter().map(|ph| (ph.selector, ph.purpose)).collect();
        assert_eq!(got, want, "{name}");
    }
}

#[test]
fn first_minibatch_ratio_is_exactly_one() {
    let m = model();
    let cfg = ppo_cfg();
    let p = laid_out(&m, &cfg);
    for name in EXECUTABLE {
        let stack = method_by_name(name)
            .unwrap()
            .wire(&PpoInit::shared(&m), &cfg, 5)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (batch, _) =
            collect_rollouts(&stack, &p, &cfg, &RewardNormalizer::default(), &mut rng).unwrap();
        let mb = batch.select(&[2, 0]).unwrap();
        let mut g = Graph::new();
        let out = stack
            .forward(&mut g, stack.actor, &mb.tokens, Heads::Clm)
            .unwrap();
        let lp = g.log_softmax(out.logits.unwrap());
        let new = g.gather_last(lp, &mb.targets).unwrap();
        for (i, (&a, &b)) in g.value(new).iter().zip(&mb.old_logp).enumerate() {
            if mb.mask[i] {
                assert_eq!((a - b).exp(), 1.0, "{name} position {i}");
            }
        }
    }
}

#[test]
fn shared_trunk_and_separate_models_agree_on_the_first_rollout() {
    let m = model();
    let cfg = PpoConfig {
        kl_beta: 0.0,
        ..ppo_cfg()
    };
    let p = laid_out(&m, &cfg);
    let rollout = |name: &str| {
        let stack = method_by_name(name)
            .unwrap()
            .wire(&PpoInit::shared(&m), &cfg, 5)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        collect_rollouts(&stack, &p, &cfg, &RewardNormalizer::default(), &mut rng)
            .unwrap()
            .0
    };
    let hydra = rollout("hydra");
    for name in ["lora", "dynamic-lora", "j-hydra"] {
        assert_eq!(rollout(name), hydra, "{name}");
    }
}

#[test]
fn untrained_adapters_merge_to_the_initial_weights() {
    let m = model();
    let stack = method_by_name("hydra")
        .unwrap()
        .wire(&PpoInit::shared(&m), &ppo_cfg(), 9)
        .unwrap();
    let merged = stack.model(stack.actor).merge_adapters(ACTOR).unwrap();
    for (name, t) in m.trunk() {
        assert_eq!(merged.param(name).unwrap().data(), t.data(), "{name}");
    }
}

#[test]
fn training_moves_adapters_and_leaves_trunks_untouched() {
    let m = model();
    let cfg = ppo_cfg();
    for name in EXECUTABLE {
        let method = method_by_name(name).unwrap();
        let mut seen = 0;
        let run = train_ppo(
            method.as_ref(),
            &PpoInit::shared(&m),
            &prompts(),
            &cfg,
            &TrainOptions::default(),
            |_| seen += 1,
        )
        .unwrap();
        assert_eq!(run.status, RunStatus::Completed, "{name}");
        assert_eq!(run.logs.len(), cfg.iterations, "{name}");
        assert_eq!(seen, cfg.iterations, "{name}");
        assert_eq!(run.trace.0.len(), cfg.iterations, "{name}");
        for (_, sm) in run.stack.models() {
            for (pname, t) in sm.trunk() {
                assert_eq!(t.data(), m.param(pname).unwrap().data(), "{name} {pname}");
            }
        }
        let actor = run.stack.model(run.stack.actor);
        let set = actor
            .adapter_set(run.stack.actor.selector.set_name().unwrap())
            .unwrap();
        assert!(
            set.params
                .values()
                .any(|t| t.data().iter().any(|&v| v != 0.0)),
            "{name}"
        );
        for e in &run.logs {
            assert!(e.actor_lr > 0.0 && e.actor_lr <= cfg.actor_lr, "{name}");
            assert!(e.clip_fraction >= 0.0 && e.clip_fraction <= 1.0, "{name}");
        }
    }
}

#[test]
fn training_is_reproducible_from_the_seed() {
    let m = model();
    let cfg = ppo_cfg();
    let run = |seed| {
        let opts = TrainOptions {
            seed,
            ground_truth: None,
        };
        train_ppo(
            method_by_name("hydra").unwrap().as_ref(),
            &PpoInit::shared(&m),
            &prompts(),
            &cfg,
            &opts,
            |_| {},
        )
        .unwrap()
        .logs
    };
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
}

#[test]
fn full_fine_tuning_is_refused() {
    let m = model();
    let err = train_ppo(
        method_by_name("full-ft").unwrap().as_ref(),
        &PpoInit::shared(&m),
        &prompts(),
        &ppo_cfg(),
        &TrainOptions::default(),
        |_| {},
    )
    .unwrap_err();
    assert!(matches!(err, Error::NotExecutable(_)));
}

#[test]
fn minibatch_larger_than_rollout_is_rejected() {
    let cfg = PpoConfig {
        minibatch_size: 5,
        generation_batch: 4,
        ..ppo_cfg()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn divergence_restores_the_last_finite_adapters() {
    let m = model();
    let cfg = PpoConfig {
        actor_lr: 1e300,
        critic_lr: 1e300,
        grad_clip: false,
        iterations: 6,
        ..ppo_cfg()
    };
    let run = train_ppo(
        method_by_name("hydra").unwrap().as_ref(),
        &PpoInit::shared(&m),
        &prompts(),
        &cfg,
        &TrainOptions::default(),
        |_| {},
    )
    .unwrap();
    let RunStatus::Diverged { iteration, .. } = &run.status else {
        panic!("expected divergence, got {:?}", run.status)
    };
    assert_eq!(*iteration, run.logs.len());
    assert!(run.stack.adapters_finite());
    assert!(matches!(run.into_result(), Err(Error::Diverged { .. })));
}
