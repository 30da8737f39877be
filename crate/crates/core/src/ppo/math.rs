//! Per-token reward shaping, advantage estimation and the PPO losses.

use hydra_tensor::{Graph, Var};

use crate::error::{Error, Result};

/// `-beta * (actor - ref)` on every response token plus the terminal reward
/// on the last one. Positions outside the mask stay zero.
pub fn shaped_rewards(
    actor_logp: &[f64],
    ref_logp: &[f64],
    terminal_reward: f64,
    response_mask: &[bool],
    kl_beta: f64,
) -> Result<Vec<f64>> {
    let n = response_mask.len();
    if actor_logp.len() != n || ref_logp.len() != n {
        return Err(Error::Misaligned {
            op: "shaped_rewards",
            detail: format!(
                "actor {}, reference {}, mask {n}",
                actor_logp.len(),
                ref_logp.len()
            ),
        });
    }
    let last = response_mask
        .iter()
        .rposition(|&m| m)
        .ok_or_else(|| Error::Misaligned {
            op: "shaped_rewards",
            detail: "empty response mask".into(),
        })?;
    let mut out = vec![0.0; n];
    for i in 0..n {
        if response_mask[i] {
            out[i] = -kl_beta * (actor_logp[i] - ref_logp[i]);
        }
    }
    out[last] += terminal_reward;
    Ok(out)
}

/// Reverse-recursion GAE over the masked positions of one sequence, with a
/// zero bootstrap after the final token. Returns `(advantages, returns)`,
/// both zero off the mask.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    gae_gamma: f64,
    gae_lambda: f64,
    response_mask: &[bool],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = response_mask.len();
    if rewards.len() != n || values.len() != n {
        return Err(Error::Misaligned {
            op: "gae",
            detail: format!(
                "rewards {}, values {}, mask {n}",
                rewards.len(),
                values.len()
            ),
        });
    }
    let idx: Vec<usize> = (0..n).filter(|&i| response_mask[i]).collect();
    let mut adv = vec![0.0; n];
    let mut ret = vec![0.0; n];
    let mut next_value = 0.0;
    let mut acc = 0.0;
    for &i in idx.iter().rev() {
        let delta = rewards[i] + gae_gamma * next_value - values[i];
        acc = delta + gae_gamma * gae_lambda * acc;
        adv[i] = acc;
        ret[i] = acc + values[i];
        next_value = values[i];
    }
    Ok((adv, ret))
}

/// Shifts and scales the masked entries to mean 0 and unit (population)
/// variance. A batch with no spread is only centred.
pub fn whiten(xs: &mut [f64], mask: &[bool]) {
    let sel: Vec<f64> = xs
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| *x)
        .collect();
    if sel.is_empty() {
        return;
    }
    let n = sel.len() as f64;
    let mean = sel.iter().sum::<f64>() / n;
    let var = sel.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let inv = if var > 1e-16 { 1.0 / var.sqrt() } else { 1.0 };
    for (x, &m) in xs.iter_mut().zip(mask) {
        if m {
            *x = (*x - mean) * inv;
        }
    }
}

fn mask_weights(mask: &[bool], op: &'static str) -> Result<Vec<f64>> {
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Misaligned {
            op,
            detail: "empty response mask".into(),
        });
    }
    Ok(mask
        .iter()
        .map(|&m| if m { 1.0 / count as f64 } else { 0.0 })
        .collect())
}

fn check_len(op: &'static str, what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Misaligned {
            op,
            detail: format!("{what} has {got} entries, expected {want}"),
        });
    }
    Ok(())
}

/// Negative clipped surrogate, averaged over masked tokens. `new_logp` is a
/// flat `[n]` node; the old log-probs and advantages are constants.
pub fn ppo_clip_loss(
    g: &mut Graph,
    new_logp: Var,
    old_logp: &[f64],
    advantages: &[f64],
    clip_epsilon: f64,
    response_mask: &[bool],
) -> Result<Var> {
    let n = response_mask.len();
    let shape = g.shape(new_logp).to_vec();
    check_len("ppo_clip_loss", "new_logp", g.value(new_logp).len(), n)?;
    check_len("ppo_clip_loss", "old_logp", old_logp.len(), n)?;
    check_len("ppo_clip_loss", "advantages", advantages.len(), n)?;
    let w = mask_weights(response_mask, "ppo_clip_loss")?;
    let old = g.leaf(&shape, old_logp.to_vec(), false)?;
    let diff = g.sub(new_logp, old)?;
    let ratio = g.exp(diff);
    if let Some(i) = g
        .value(ratio)
        .iter()
        .enumerate()
        .position(|(i, r)| response_mask[i] && !r.is_finite())
    {
        return Err(Error::NonFinite {
            op: "ppo_clip_loss",
            what: "ratio",
            index: i,
        });
    }
    let adv = g.leaf(&shape, advantages.to_vec(), false)?;
    let unclipped = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon)?;
    let clipped = g.mul(clipped, adv)?;
    let obj = g.minimum(unclipped, clipped)?;
    let w = g.leaf(&shape, w, false)?;
    let weighted = g.mul(obj, w)?;
    let s = g.sum(weighted);
    Ok(g.neg(s))
}

/// Squared error to the returns, averaged over masked tokens. With
/// `clip_range`, the pessimistic maximum against a value clipped around
/// `old_values` is used instead.
pub fn value_loss(
    g: &mut Graph,
    values: Var,
    returns: &[f64],
    response_mask: &[bool],
    clip: Option<(&[f64], f64)>,
) -> Result<Var> {
    let n = response_mask.len();
    let shape = g.shape(values).to_vec();
    check_len("value_loss", "values", g.value(values).len(), n)?;
    check_len("value_loss", "returns", returns.len(), n)?;
    let w = mask_weights(response_mask, "value_loss")?;
    let ret = g.leaf(&shape, returns.to_vec(), false)?;
    let mut err = g.squared_error(values, ret)?;
    if let Some((old, range)) = clip {
        check_len("value_loss", "old values", old.len(), n)?;
        let old = g.leaf(&shape, old.to_vec(), false)?;
        let delta = g.sub(values, old)?;
        let delta = g.clamp(delta, -range, range)?;
        let clipped = g.add(old, delta)?;
        let err2 = g.squared_error(clipped, ret)?;
        // max(a, b) = -min(-a, -b)
        let (na, nb) = (g.neg(err), g.neg(err2));
        let m = g.minimum(na, nb)?;
        err = g.neg(m);
    }
    let w = g.leaf(&shape, w, false)?;
    let weighted = g.mul(err, w)?;
    Ok(g.sum(weighted))
}

/// Per-token clipped-surrogate objective, for diagnostics and tests.
pub fn clipped_objective(ratio: f64, advantage: f64, clip_epsilon: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - clip_epsilon, 1.0 + clip_epsilon) * advantage)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `A_t = sum_k (gamma lambda)^k delta_{t+k}` by direct double loop.
    fn gae_brute(r: &[f64], v: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
        let n = r.len();
        let delta: Vec<f64> = (0..n)
            .map(|t| r[t] + gamma * if t + 1 < n { v[t + 1] } else { 0.0 } - v[t])
            .collect();
        (0..n)
            .map(|t| {
                (t..n)
                    .map(|k| (gamma * lambda).powi((k - t) as i32) * delta[k])
                    .sum()
            })
            .collect()
    }

    #[test]
    fn shaped_reward_example() {
        let actor = [-1.0, -2.0, -0.5];
        let reference = [-1.1, -1.8, -0.5];
        let r = shaped_rewards(&actor, &reference, 0.5, &[true; 3], 0.02).unwrap();
        let want = [-0.002, 0.004, 0.5];
        for (a, b) in r.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{r:?}");
        }
        let zero_beta = shaped_rewards(&actor, &reference, 0.5, &[true; 3], 0.0).unwrap();
        assert_eq!(zero_beta, vec![0.0, 0.0, 0.5]);
        assert!(shaped_rewards(&actor, &reference[..2], 0.5, &[true; 3], 0.02).is_err());
        assert!(shaped_rewards(&actor, &reference, 0.5, &[false; 3], 0.02).is_err());
    }

    #[test]
    fn gae_special_cases() {
        let r = [0.1, -0.3, 0.7, 0.2];
        let v = [0.5, 0.1, -0.2, 0.3];
        let m = [true; 4];
        let (adv, ret) = gae(&r, &v, 1.0, 1.0, &m).unwrap();
        for t in 0..4 {
            let tail: f64 = r[t..].iter().sum();
            assert!((adv[t] - (tail - v[t])).abs() < 1e-12);
            assert!((ret[t] - tail).abs() < 1e-12);
        }
        let (adv, _) = gae(&r, &v, 0.9, 0.0, &m).unwrap();
        for t in 0..4 {
            let next = if t < 3 { v[t + 1] } else { 0.0 };
            assert_eq!(adv[t], r[t] + 0.9 * next - v[t]);
        }
    }

    #[test]
    fn gae_length_five_fixture() {
        let r = [0.3, -0.1, 0.05, 0.2, 0.9];
        let v = [0.4, 0.2, -0.3, 0.1, 0.6];
        let (adv, _) = gae(&r, &v, 1.0, 0.95, &[true; 5]).unwrap();
        let want = gae_brute(&r, &v, 1.0, 0.95);
        for (a, b) in adv.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_arithmetic() {
        assert_eq!(clipped_objective(1.5, 1.0, 0.2), 1.2);
        assert!((clipped_objective(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
        let mut g = Graph::new();
        let lp = g.leaf(&[3], vec![-1.0, -2.0, -3.0], true).unwrap();
        let l = ppo_clip_loss(
            &mut g,
            lp,
            &[-1.0, -2.0, -3.0],
            &[1.0, 2.0, 4.0],
            0.2,
            &[true, true, false],
        )
        .unwrap();
        assert_eq!(g.scalar(l), -1.5);
    }

    #[test]
    fn value_loss_examples() {
        let mut g = Graph::new();
        let v = g.leaf(&[3], vec![1.0, 2.0, 3.0], true).unwrap();
        let l = value_loss(&mut g, v, &[1.0, 2.0, 3.0], &[true; 3], None).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let l = value_loss(&mut g, v, &[1.5, 2.5, 3.5], &[true; 3], None).unwrap();
        assert_eq!(g.scalar(l), 0.25);
    }

    proptest! {
        #[test]
        fn gae_matches_double_loop(
            rv in prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 1..20),
            gamma in prop::sample::select(vec![0.0, 0.5, 1.0]),
            lambda in prop::sample::select(vec![0.0, 0.5, 0.95, 1.0]),
        ) {
            let (r, v): (Vec<f64>, Vec<f64>) = rv.into_iter().unzip();
            let (adv, ret) = gae(&r, &v, gamma, lambda, &vec![true; r.len()]).unwrap();
            let want = gae_brute(&r, &v, gamma, lambda);
            for t in 0..r.len() {
                prop_assert!((adv[t] - want[t]).abs() < 1e-12);
                prop_assert!((ret[t] - adv[t] - v[t]).abs() < 1e-12);
            }
        }

        #[test]
        fn surrogate_never_exceeds_either_branch(r in 0.0f64..3.0, a in -5.0f64..5.0, eps in 0.01f64..0.99) {
            let o = clipped_objective(r, a, eps);
            prop_assert!(o <= r * a + 1e-15);
            prop_assert!(o <= r.clamp(1.0 - eps, 1.0 + eps) * a + 1e-15);
            prop_assert!(o <= (r * a).max(r.clamp(1.0 - eps, 1.0 + eps) * a));
        }

        #[test]
        fn whitening_normalizes_masked_entries(
            xs in prop::collection::vec((-10.0f64..10.0, any::<bool>()), 2..100),
        ) {
            let (mut v, m): (Vec<f64>, Vec<bool>) = xs.into_iter().unzip();
            let orig = v.clone();
            whiten(&mut v, &m);
            let sel: Vec<f64> = v.iter().zip(&m).filter(|(_, &b)| b).map(|(x, _)| *x).collect();
            let raw: Vec<f64> = orig.iter().zip(&m).filter(|(_, &b)| b).map(|(x, _)| *x).collect();
            prop_assume!(sel.len() >= 2);
            let mu = raw.iter().sum::<f64>() / raw.len() as f64;
            prop_assume!(raw.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / raw.len() as f64 > 1e-6);
            let n = sel.len() as f64;
            let mean = sel.iter().sum::<f64>() / n;
            let var = sel.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6);
            for i in 0..m.len() {
                if !m[i] { prop_assert_eq!(v[i], orig[i]); }
            }
        }
    }
}
