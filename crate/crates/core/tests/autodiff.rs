use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metaptq::losses::{
    loss_block_recon, loss_dp, loss_kl_preserve, loss_margin, loss_mse_preserve, loss_transform_total, loss_val_kl,
    LossWeights,
};
use metaptq::meta::sample_coords;
use metaptq::nets::{cross_entropy, Transform, TransformNet, UNetConfig};
use metaptq::quant::rounding_regularizer;
use metaptq::tensor::{finite_diff_coords, finite_diff_grad, grad, grad_of_grad, relative_error};
use metaptq::Tensor;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_slice(shape, &v).unwrap().requires_grad_(true)
}

/// Largest relative error between the analytic and central-difference
/// gradients of `f` at `params`; entries below a thousandth of the largest
/// are compared absolutely.
fn check(name: &str, params: &[Tensor], f: impl Fn(&[Tensor]) -> Tensor) -> f64 {
    let loss = f(params);
    let an = grad(&loss, params, false).unwrap().into_values();
    let fd = finite_diff_grad(|p: &[Tensor]| f(p).item(), params, H).unwrap();
    let scale = an.iter().flat_map(|t| t.to_vec()).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(scale > 0.0, "{name}: zero gradient");
    let err = an
        .iter()
        .zip(&fd)
        .flat_map(|(a, b)| a.to_vec().into_iter().zip(b.to_vec()))
        .map(|(a, b)| relative_error(a, b, 1e-3 * scale))
        .fold(0.0, f64::max);
    assert!(err < TOL, "{name}: relative error {err:.3e}");
    err
}

fn pair(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    vec![random(&mut rng, shape, lo, hi), random(&mut rng, shape, lo, hi)]
}

#[test]
fn block_reconstruction() {
    check("recon", &pair(1, &[3, 2, 4, 4], -1.0, 1.0), |p| loss_block_recon(&p[0], &p[1]).unwrap());
}

#[test]
fn validation_kl() {
    check("val kl", &pair(2, &[4, 5], -2.0, 2.0), |p| loss_val_kl(&p[0], &p[1]).unwrap());
}

#[test]
fn kl_preservation() {
    check("kl preserve", &pair(3, &[4, 5], -2.0, 2.0), |p| loss_kl_preserve(&p[0], &p[1]).unwrap());
}

#[test]
fn mse_preservation() {
    check("mse preserve", &pair(4, &[4, 6], -1.0, 1.0), |p| loss_mse_preserve(&p[0], &p[1]).unwrap());
}

#[test]
fn distribution_preservation() {
    check("dp", &pair(5, &[5, 7], -1.0, 1.0), |p| loss_dp(&p[0], &p[1]).unwrap());
}

#[test]
fn margin_inside_hinge() {
    // Samples differ by at most 0.2 per value, so the distance stays below eps.
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = random(&mut rng, &[3, 1, 4, 4], 0.0, 1.0);
    let d = random(&mut rng, &[3, 1, 4, 4], -0.2, 0.2);
    let tx = x.detach().add(&d.detach()).requires_grad_(true);
    check("margin", &[x, tx], |p| loss_margin(&p[0], &p[1], 0.1).unwrap());
}

#[test]
fn total_objective() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = vec![
        random(&mut rng, &[4, 5], -2.0, 2.0),
        random(&mut rng, &[4, 5], -2.0, 2.0),
        random(&mut rng, &[4, 6], 0.0, 1.0),
        random(&mut rng, &[4, 6], 0.0, 1.0),
    ];
    let w = LossWeights::default();
    check("total", &p, |p| {
        let val = loss_val_kl(&p[0], &p[1]).unwrap();
        let margin = loss_margin(&p[2], &p[3], 0.3).unwrap();
        let dp = loss_dp(&p[2], &p[3]).unwrap();
        loss_transform_total(&val, &margin, &dp, &w)
    });
}

#[test]
fn classifier_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = random(&mut rng, &[4, 3], -2.0, 2.0);
    check("cross entropy", &[z], |p| cross_entropy(&p[0], &[0, 2, 1, 2]));
}

#[test]
fn rounding_penalty() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let v = random(&mut rng, &[12], -1.5, 1.5);
    check("rounding", &[v], |p| rounding_regularizer(&p[0], 8.0));
}

#[test]
fn transform_network_parameters() {
    let t = TransformNet::<f64>::new(UNetConfig {
        base_width: 2,
        seed: 3,
        ..UNetConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&mut rng, &[2, 3, 8, 8], 0.05, 0.95).detach();
    let w = random(&mut rng, &[2, 3, 8, 8], -1.0, 1.0).detach();
    let params: Vec<Tensor> = t.params().iter().map(|p| p.requires_grad_(true)).collect();
    let f = |p: &[Tensor]| t.forward_with(p, &x).unwrap().mul(&w).sum();
    let an = grad(&f(&params), &params, false).unwrap().into_values();
    let coords = sample_coords(&params, 200, 10);
    let fd = finite_diff_coords(|p: &[Tensor]| f(p).item(), &params, H, &coords).unwrap();
    let an: Vec<f64> = coords.iter().map(|&(i, j)| an[i].data()[j]).collect();
    let scale = an.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let err = an
        .iter()
        .zip(&fd)
        .map(|(&a, &b)| relative_error(a, b, 1e-3 * scale))
        .fold(0.0, f64::max);
    assert!(err < TOL, "transform relative error {err:.3e}");
}

#[test]
fn mixed_second_derivative_of_bilinear_form() {
    // f(u, v) = u^T A v; d/dv <df/du, c> = A^T c exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random(&mut rng, &[4, 3], -1.0, 1.0).detach();
    let u = random(&mut rng, &[4, 1], -1.0, 1.0);
    let v = random(&mut rng, &[3, 1], -1.0, 1.0);
    let c = random(&mut rng, &[4, 1], -1.0, 1.0).detach();
    let f = u.t().matmul(&a).matmul(&v).sum();
    let g = grad_of_grad(&f, &[u], &[v], &[c.clone()]).unwrap();
    let expect = a.t().matmul(&c);
    assert!(g[0].max_abs_diff(&expect) < 1e-10);
}

#[test]
fn second_derivative_of_quadratic_form() {
    // f(x) = x^T B x; d/dx <df/dx, c> = (B + B^T) c.
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let b = random(&mut rng, &[5, 5], -1.0, 1.0).detach();
    let x = random(&mut rng, &[5, 1], -1.0, 1.0);
    let c = random(&mut rng, &[5, 1], -1.0, 1.0).detach();
    let f = x.t().matmul(&b).matmul(&x).sum();
    let g = grad_of_grad(&f, &[x.clone()], &[x], &[c.clone()]).unwrap();
    let expect = b.add(&b.t()).matmul(&c);
    assert!(g[0].max_abs_diff(&expect) < 1e-10);
}
