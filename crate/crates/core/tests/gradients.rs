//! Reverse-mode gradients against central finite differences.

use hybridprune::graph::{Graph, Var};
use hybridprune::model::ssm::ScanDims;
use hybridprune::model::{forward_graph, ForwardOptions};
use hybridprune::{HybridModel, ModelConfig, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

/// Builds `op` over leaves holding `inputs`, reduces a non-scalar output
/// with a fixed random projection, and compares every input gradient with
/// central differences. Returns the worst relative error.
fn check(inputs: &[Tensor], op: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let scalar = |g: &mut Graph, vars: &[Var], proj: Option<&Tensor>| -> Result<Var> {
        let out = op(g, vars)?;
        match proj {
            None => Ok(out),
            Some(p) => {
                let c = g.constant(p.clone());
                let m = g.mul(out, c)?;
                Ok(g.sum(m))
            }
        }
    };
    let mut probe = Graph::inference();
    let vars: Vec<Var> = inputs.iter().map(|t| probe.constant(t.clone())).collect();
    let probe_out = op(&mut probe, &vars).unwrap();
    let out_shape = probe.value(probe_out).shape().to_vec();
    let proj = (out_shape.iter().product::<usize>() != 1)
        .then(|| Tensor::randn(&out_shape, 1.0, &mut rng));

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = scalar(&mut g, &vars, proj.as_ref()).unwrap();
    let grads = g.backward(loss).unwrap();

    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        let l = scalar(&mut g, &vars, proj.as_ref()).unwrap();
        g.value(l).data()[0]
    };

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, &inputs[i]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt()
            + numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Values bounded away from zero so kinks are never straddled.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, seed).map(|v| if v.abs() < 0.1 { v.signum() * 0.1 + v } else { v })
}

#[test]
fn matmul_variants() {
    assert!(check(&[randn(&[3, 4], 1), randn(&[4, 5], 2)], |g, v| g.matmul(v[0], v[1])) < TOL);
    assert!(check(&[randn(&[3, 4], 1), randn(&[5, 4], 2)], |g, v| g.matmul_nt(v[0], v[1])) < TOL);
}

#[test]
fn elementwise_ops() {
    let a = randn(&[3, 4], 3);
    let b = randn(&[3, 4], 4);
    assert!(check(&[a.clone(), b.clone()], |g, v| g.add(v[0], v[1])) < TOL);
    assert!(check(&[a.clone(), b.clone()], |g, v| g.mul(v[0], v[1])) < TOL);
    assert!(check(&[a.clone(), randn(&[4], 5)], |g, v| g.add_bias(v[0], v[1])) < TOL);
    assert!(check(std::slice::from_ref(&a), |g, v| Ok(g.scale(v[0], -1.7))) < TOL);
    assert!(check(std::slice::from_ref(&a), |g, v| Ok(g.silu(v[0]))) < TOL);
    assert!(check(&[away_from_zero(&[3, 4], 6)], |g, v| Ok(g.relu_sq(v[0]))) < TOL);
    assert!(check(std::slice::from_ref(&a), |g, v| Ok(g.neg_exp(v[0]))) < TOL);
    assert!(check(&[a], |g, v| Ok(g.sum(v[0]))) < TOL);
}

#[test]
fn rms_norm_with_wider_reference() {
    let x = randn(&[4, 6], 7);
    let w = randn(&[6], 8);
    assert!(check(&[x.clone(), w.clone()], |g, v| g.rms_norm(v[0], v[1], 6)) < TOL);
    assert!(check(&[x, w], |g, v| g.rms_norm(v[0], v[1], 9)) < TOL);
}

#[test]
fn embedding_lookup() {
    let ids = [3u32, 0, 3, 1];
    assert!(check(&[randn(&[5, 3], 9)], |g, v| g.embedding(v[0], &ids)) < TOL);
}

#[test]
fn causal_convolution() {
    let x = randn(&[10, 3], 10);
    let k = randn(&[4, 3], 11);
    let b = randn(&[3], 12);
    assert!(check(&[x, k, b], |g, v| g.conv1d_causal(v[0], v[1], v[2], 5)) < TOL);
}

#[test]
fn selective_scan() {
    let dims = ScanDims {
        heads: 4,
        head_dim: 2,
        groups: 2,
        state: 3,
    };
    let n = 2 * 20;
    let a = randn(&[4], 13).map(|v| -v.exp());
    let inputs = [
        randn(&[n, 8], 14),
        randn(&[n, 6], 15),
        randn(&[n, 6], 16),
        a,
        randn(&[4], 17),
        randn(&[n, 4], 18),
    ];
    let err = check(&inputs, |g, v| g.ssm_scan(v[0], v[1], v[2], v[3], v[4], v[5], dims, 20));
    assert!(err < TOL, "scan gradient rel err {err}");
}

#[test]
fn attention() {
    let n = 2 * 5;
    let q = randn(&[n, 6], 19);
    let k = randn(&[n, 6], 20);
    let v = randn(&[n, 6], 21);
    assert!(check(&[q, k, v], |g, x| g.causal_attention(x[0], x[1], x[2], 2, 3, 5)) < TOL);
}

#[test]
fn losses() {
    let logits = randn(&[4, 6], 22);
    let targets = [Some(1), None, Some(5), Some(0)];
    assert!(check(std::slice::from_ref(&logits), |g, v| g.cross_entropy(v[0], &targets)) < TOL);
    let teacher = randn(&[4, 6], 23);
    for tau in [1.0, 2.0] {
        assert!(check(std::slice::from_ref(&logits), |g, v| g.kd_loss(v[0], &teacher, tau)) < TOL);
    }
}

#[test]
fn whole_model_against_finite_differences() {
    let cfg = ModelConfig::new("M*-", 6, 8, 4, 2, 2, 3, 2, 11).unwrap();
    let model = HybridModel::init(cfg.clone(), 4).unwrap();
    let ids: Vec<u32> = (0..12).map(|i| (i * 5 % 11) as u32).collect();
    let targets: Vec<Option<u32>> = ids
        .chunks(6)
        .flat_map(|s| s[1..].iter().map(|&t| Some(t)).chain([None]))
        .collect();
    let named = model.params.named();
    let inputs: Vec<Tensor> = named.iter().map(|(_, t)| (*t).clone()).collect();
    let err = check(&inputs, |g, v| {
        let mut it = v.iter().copied();
        let p = model.params.map(|_| it.next().unwrap());
        let logits = forward_graph(g, &cfg, &p, &ids, 6, ForwardOptions::default())?;
        g.cross_entropy(logits, &targets)
    });
    assert!(err < TOL, "model gradient rel err {err}");
}
