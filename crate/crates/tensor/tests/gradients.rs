//! Analytic gradients of every primitive against central finite differences.

use hydra_tensor::gradcheck::{finite_difference_grad, max_relative_error};
use hydra_tensor::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const SEEDS: u64 = 100;

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

/// Builds `sum(op(inputs) * w)` for a fixed random `w`, returning the loss
/// value and, when requested, the analytic gradient of every input.
fn check_op<F>(name: &str, shapes: &[Vec<usize>], scale: f64, seed: u64, op: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    let flat: Vec<f64> = random_vec(&mut rng, sizes.iter().sum(), scale);
    let build = |flat: &[f64], g: &mut Graph| -> (Vec<Var>, Var) {
        let mut vars = Vec::new();
        let mut off = 0;
        for (s, n) in shapes.iter().zip(&sizes) {
            vars.push(g.leaf(s, flat[off..off + n].to_vec(), true).unwrap());
            off += n;
        }
        let out = op(g, &vars);
        (vars, out)
    };
    let mut probe = Graph::new();
    let (_, out) = build(&flat, &mut probe);
    let out_shape = probe.shape(out).to_vec();
    let weights = random_vec(&mut rng, out_shape.iter().product(), 1.0);
    let loss_of = |flat: &[f64]| -> (Graph, Vec<Var>, Var) {
        let mut g = Graph::new();
        let (vars, out) = build(flat, &mut g);
        let w = g.leaf(&out_shape, weights.clone(), false).unwrap();
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        (g, vars, loss)
    };
    let (mut g, vars, loss) = loss_of(&flat);
    g.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&sizes)
        .flat_map(|(&v, &n)| g.grad(v).map(<[f64]>::to_vec).unwrap_or(vec![0.0; n]))
        .collect();
    let numeric = finite_difference_grad(
        |x| {
            let (g, _, loss) = loss_of(x);
            g.scalar(loss)
        },
        &flat,
        STEP,
    )
    .unwrap();
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < TOL, "{name} seed {seed}: relative error {err}");
}

fn sweep<F>(name: &str, shapes: &[Vec<usize>], scale: f64, op: F)
where
    F: Fn(&mut Graph, &[Var]) -> Var + Copy,
{
    for seed in 0..SEEDS {
        check_op(name, shapes, scale, seed, op);
    }
}

#[test]
fn matmul_family() {
    sweep("matmul", &[vec![2, 3, 4], vec![4, 5]], 1.0, |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    });
    sweep("matmul_t", &[vec![3, 4], vec![5, 4]], 1.0, |g, v| {
        g.matmul_t(v[0], v[1]).unwrap()
    });
    sweep(
        "batch_matmul",
        &[vec![2, 3, 4], vec![2, 4, 2]],
        1.0,
        |g, v| g.batch_matmul(v[0], v[1]).unwrap(),
    );
}

#[test]
fn elementwise_binary() {
    let s = vec![3, 4];
    sweep("add", &[s.clone(), s.clone()], 1.0, |g, v| {
        g.add(v[0], v[1]).unwrap()
    });
    sweep("sub", &[s.clone(), s.clone()], 1.0, |g, v| {
        g.sub(v[0], v[1]).unwrap()
    });
    sweep("mul", &[s.clone(), s.clone()], 1.0, |g, v| {
        g.mul(v[0], v[1]).unwrap()
    });
    sweep("squared_error", &[s.clone(), s.clone()], 1.0, |g, v| {
        g.squared_error(v[0], v[1]).unwrap()
    });
    sweep("add_rows", &[vec![2, 3, 4], vec![4]], 1.0, |g, v| {
        g.add_rows(v[0], v[1]).unwrap()
    });
}

#[test]
fn elementwise_unary() {
    let s = vec![2, 5];
    sweep("sigmoid", std::slice::from_ref(&s), 3.0, |g, v| {
        g.sigmoid(v[0])
    });
    sweep("log_sigmoid", std::slice::from_ref(&s), 3.0, |g, v| {
        g.log_sigmoid(v[0])
    });
    sweep("tanh", std::slice::from_ref(&s), 2.0, |g, v| g.tanh(v[0]));
    sweep("gelu", std::slice::from_ref(&s), 3.0, |g, v| g.gelu(v[0]));
    sweep("exp", std::slice::from_ref(&s), 1.0, |g, v| g.exp(v[0]));
    sweep("scale", std::slice::from_ref(&s), 1.0, |g, v| {
        g.scale(v[0], -1.7)
    });
    sweep("log", std::slice::from_ref(&s), 1.0, |g, v| {
        let e = g.exp(v[0]);
        let shifted = g.add_scalar(e, 0.5);
        g.log(shifted).unwrap()
    });
}

#[test]
fn normalizations() {
    sweep("softmax", &[vec![3, 6]], 2.0, |g, v| g.softmax(v[0]));
    sweep("log_softmax", &[vec![3, 6]], 2.0, |g, v| {
        g.log_softmax(v[0])
    });
    sweep("causal_softmax", &[vec![2, 4, 4]], 2.0, |g, v| {
        let m = g.causal_mask(v[0]).unwrap();
        g.softmax(m)
    });
    sweep(
        "layer_norm",
        &[vec![3, 5], vec![5], vec![5]],
        1.5,
        |g, v| g.layer_norm(v[0], v[1], v[2]).unwrap(),
    );
}

#[test]
fn indexing_and_reductions() {
    sweep("index_rows", &[vec![5, 3]], 1.0, |g, v| {
        g.index_rows(v[0], &[4, 0, 4, 2]).unwrap()
    });
    sweep("gather_last", &[vec![2, 2, 5]], 1.0, |g, v| {
        g.gather_last(v[0], &[0, 4, 2, 2]).unwrap()
    });
    sweep("sum", &[vec![3, 3]], 1.0, |g, v| g.sum(v[0]));
    sweep("mean", &[vec![3, 3]], 1.0, |g, v| g.mean(v[0]));
}

#[test]
fn structural() {
    sweep("concat", &[vec![2, 1, 3], vec![2, 2, 3]], 1.0, |g, v| {
        g.concat(&[v[0], v[1]], 1).unwrap()
    });
    sweep("slice", &[vec![2, 5, 3]], 1.0, |g, v| {
        g.slice(v[0], 1, 1, 3).unwrap()
    });
    sweep("reshape", &[vec![2, 6]], 1.0, |g, v| {
        g.reshape(v[0], &[3, 4]).unwrap()
    });
    sweep("permute", &[vec![2, 3, 4]], 1.0, |g, v| {
        g.permute(v[0], &[1, 2, 0]).unwrap()
    });
}

#[test]
fn piecewise_ops_away_from_kinks() {
    // Values are drawn in [0.1, 1] with the kink of each op placed away from
    // that interval or at well-separated offsets, so no probe straddles it.
    sweep("relu", &[vec![2, 4]], 1.0, |g, v| {
        let e = g.exp(v[0]); // > 0
        let shifted = g.add_scalar(e, -0.01);
        g.relu(shifted)
    });
    sweep("minimum", &[vec![6]], 1.0, |g, v| {
        let shifted = g.add_scalar(v[0], 10.0);
        g.minimum(v[0], shifted).unwrap()
    });
    sweep("clamp", &[vec![6]], 1.0, |g, v| {
        let t = g.tanh(v[0]);
        g.clamp(t, -2.0, 2.0).unwrap()
    });
}

fn mlp_loss(g: &mut Graph, params: &[Var], x: Var, target: Var) -> Var {
    let mut h = x;
    for layer in params.chunks(2) {
        let z = g.matmul_t(h, layer[0]).unwrap();
        let z = g.add_rows(z, layer[1]).unwrap();
        h = g.tanh(z);
    }
    let se = g.squared_error(h, target).unwrap();
    g.mean(se)
}

#[test]
fn random_three_layer_mlp_matches_finite_differences() {
    let shapes = [
        vec![6, 4],
        vec![6],
        vec![5, 6],
        vec![5],
        vec![3, 5],
        vec![3],
    ];
    let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let flat = random_vec(&mut rng, sizes.iter().sum(), 0.8);
        let x = random_vec(&mut rng, 8 * 4, 1.0);
        let t = random_vec(&mut rng, 8 * 3, 1.0);
        let run = |flat: &[f64]| {
            let mut g = Graph::new();
            let mut off = 0;
            let params: Vec<Var> = shapes
                .iter()
                .zip(&sizes)
                .map(|(s, &n)| {
                    let v = g.leaf(s, flat[off..off + n].to_vec(), true).unwrap();
                    off += n;
                    v
                })
                .collect();
            let xv = g.leaf(&[8, 4], x.clone(), false).unwrap();
            let tv = g.leaf(&[8, 3], t.clone(), false).unwrap();
            let loss = mlp_loss(&mut g, &params, xv, tv);
            (g, params, loss)
        };
        let (mut g, params, loss) = run(&flat);
        g.backward(loss).unwrap();
        let analytic: Vec<f64> = params
            .iter()
            .flat_map(|&p| g.grad(p).unwrap().to_vec())
            .collect();
        let numeric = finite_difference_grad(|p| run(p).0.scalar(run(p).2), &flat, STEP).unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < TOL, "mlp seed {seed}: {err}");
    }
}

#[test]
fn backward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut g = Graph::new();
        let a = g
            .leaf(&[4, 7], random_vec(&mut rng, 28, 1.0), true)
            .unwrap();
        let b = g
            .leaf(&[7, 3], random_vec(&mut rng, 21, 1.0), true)
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        let s = g.log_softmax(c);
        let l = g.mean(s);
        g.backward(l).unwrap();
        (g.grad(a).unwrap().to_vec(), g.grad(b).unwrap().to_vec())
    };
    let (a1, b1) = run();
    let (a2, b2) = run();
    assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn gradients_flow_into_parameter_tensors() {
    let mut w = Tensor::new(vec![2], vec![1.0, 2.0])
        .unwrap()
        .with_grad(true);
    let mut g = Graph::new();
    let v = g.param(&w);
    let s = g.sum(v);
    g.backward(s).unwrap();
    g.accumulate_into(v, &mut w).unwrap();
    assert_eq!(w.grad().unwrap(), &[1.0, 1.0]);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let x = g.leaf(&[3, 4], data, false).unwrap();
        let p = g.softmax(x);
        let lp = g.log_softmax(x);
        for (row, lrow) in g.value(p).chunks(4).zip(g.value(lp).chunks(4)) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (pv, lv) in row.iter().zip(lrow) {
                if *pv > 1e-300 {
                    prop_assert!((pv.ln() - lv).abs() < 1e-10);
                }
            }
        }
    }
}
