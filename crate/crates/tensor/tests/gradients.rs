//! Every differentiable primitive against central finite differences.

use prefixsub_tensor::gradcheck::check;
use prefixsub_tensor::{Graph, Result, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-5;
const FLOOR: f64 = 1e-3;
const INSTANCES: u64 = 100;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()
}

fn run<F>(name: &str, shapes: &[&[usize]], f: F)
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<(Vec<f64>, Vec<usize>)> = shapes
            .iter()
            .map(|s| (rand_vec(&mut rng, s.iter().product()), s.to_vec()))
            .collect();
        let r = check(&inputs, H, FLOOR, &f).unwrap();
        worst = worst.max(r.max_rel_error);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

#[test]
fn matmul_gradients() {
    run("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    run("batched matmul", &[&[2, 3, 4], &[2, 4, 2]], |g, v| g.matmul(v[0], v[1]));
    run("broadcast matmul", &[&[2, 3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1]));
    run("left-broadcast matmul", &[&[3, 4], &[2, 4, 2]], |g, v| g.matmul(v[0], v[1]));
}

#[test]
fn softmax_gradients() {
    run("softmax", &[&[5]], |g, v| g.softmax(v[0], 0));
    run("softmax inner axis", &[&[2, 3, 4]], |g, v| g.softmax(v[0], 1));
}

#[test]
fn layer_norm_gradients() {
    run("layer_norm", &[&[3, 5], &[5], &[5]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-12));
}

#[test]
fn cross_entropy_gradients() {
    run("cross_entropy", &[&[3, 4]], |g, v| g.cross_entropy(v[0], &[1, 3, 0]));
}

#[test]
fn mse_gradients() {
    run("mse", &[&[4, 1]], |g, v| g.mse(v[0], &[0.5, -0.2, 1.0, 0.0]));
}

#[test]
fn elementwise_gradients() {
    run("add broadcast", &[&[2, 3], &[3]], |g, v| g.add(v[0], v[1]));
    run("sub broadcast", &[&[2, 1, 3], &[4, 1]], |g, v| g.sub(v[0], v[1]));
    run("mul broadcast", &[&[2, 3, 2], &[3, 1]], |g, v| g.mul(v[0], v[1]));
    run("mul self", &[&[4]], |g, v| g.mul(v[0], v[0]));
    run("tanh", &[&[6]], |g, v| Ok(g.tanh(v[0])));
    run("gelu", &[&[6]], |g, v| Ok(g.gelu(v[0])));
    run("scale", &[&[3]], |g, v| Ok(g.scale(v[0], -2.5)));
    run("mean", &[&[3, 2]], |g, v| Ok(g.mean(v[0])));
}

#[test]
fn structural_gradients() {
    run("permute", &[&[2, 3, 4]], |g, v| g.permute(v[0], &[2, 0, 1]));
    run("transpose", &[&[3, 2]], |g, v| g.transpose(v[0]));
    run("reshape", &[&[2, 3]], |g, v| g.reshape(v[0], &[3, 2]));
    run("concat", &[&[2, 1, 3], &[2, 2, 3]], |g, v| g.concat(&[v[0], v[1]], 1));
    run("slice", &[&[3, 4]], |g, v| g.slice(v[0], 1, 1, 2));
    run("gather", &[&[4, 3]], |g, v| g.gather_rows(v[0], &[3, 0, 3]));
    run("expand", &[&[2, 2]], |g, v| Ok(g.expand(v[0], 3)));
}
