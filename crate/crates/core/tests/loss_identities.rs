use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use metaptq::losses::{cond_prob_matrix, cosine_kernel, loss_dp, loss_kl_preserve, loss_margin, loss_val_kl};
use metaptq::Tensor;

fn random(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_slice(shape, &v).unwrap()
}

#[test]
fn kl_is_zero_exactly_for_equal_distributions() {
    for seed in 0..20 {
        let z = random(seed, &[6, 10], -3.0, 3.0);
        assert!(loss_val_kl(&z, &z).unwrap().item().abs() < 1e-15);
        assert!(loss_kl_preserve(&z, &z).unwrap().item().abs() < 1e-15);
        let other = random(seed + 1000, &[6, 10], -3.0, 3.0);
        assert!(loss_val_kl(&z, &other).unwrap().item() > 1e-6);
        assert!(loss_kl_preserve(&z, &other).unwrap().item() > 1e-6);
    }
}

#[test]
fn kl_ignores_per_row_logit_shifts() {
    let z = random(1, &[5, 8], -3.0, 3.0);
    let q = random(2, &[5, 8], -3.0, 3.0);
    let shift = random(3, &[5, 1], -50.0, 50.0);
    let base = loss_val_kl(&z, &q).unwrap().item();
    let shifted = loss_val_kl(&z.add(&shift), &q.sub(&shift)).unwrap().item();
    assert!((base - shifted).abs() < 1e-12, "{base} vs {shifted}");
    let base = loss_kl_preserve(&z, &q).unwrap().item();
    let shifted = loss_kl_preserve(&z.add_scalar(7.5), &q).unwrap().item();
    assert!((base - shifted).abs() < 1e-12);
}

#[test]
fn conditional_probability_columns_sum_to_one() {
    for seed in 0..20 {
        let n = 2 + seed as usize % 9;
        let p = cond_prob_matrix(&random(seed, &[n, 16], -1.0, 1.0)).unwrap();
        for j in 0..n {
            let col: f64 = (0..n).map(|i| p.data()[i * n + j]).sum();
            assert!((col - 1.0).abs() < 1e-12, "column {j} sums to {col}");
            assert_eq!(p.data()[j * n + j], 0.0);
        }
    }
}

#[test]
fn kernel_range() {
    let a = random(4, &[12], -1.0, 1.0);
    assert!((cosine_kernel(&a, &a).unwrap().item() - 1.0).abs() < 1e-15);
    assert!(cosine_kernel(&a, &a.neg()).unwrap().item().abs() < 1e-15);
}

#[test]
fn dp_is_zero_at_identity_and_invariant_to_rotation_and_scale() {
    let f = random(5, &[6, 3], -1.0, 1.0);
    let g = random(6, &[6, 3], -1.0, 1.0);
    assert!(loss_dp(&f, &f).unwrap().item().abs() < 1e-15);
    let (c, s) = (0.6f64.cos(), 0.6f64.sin());
    let rot = Tensor::from_slice(&[3, 3], &[c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let base = loss_dp(&f, &g).unwrap().item();
    assert!(base > 1e-6);
    let rotated = loss_dp(&f.matmul(&rot), &g.matmul(&rot)).unwrap().item();
    let scaled = loss_dp(&f.mul_scalar(3.5), &g.mul_scalar(0.2)).unwrap().item();
    assert!((base - rotated).abs() < 1e-12);
    assert!((base - scaled).abs() < 1e-12);
    assert!(loss_dp(&f, &f.matmul(&rot).mul_scalar(4.0)).unwrap().item().abs() < 1e-12);
}

#[test]
fn margin_equals_epsilon_at_identity_and_vanishes_past_it() {
    let x = random(7, &[4, 3, 8, 8], 0.0, 1.0);
    for eps in [0.1, 0.3] {
        assert_eq!(loss_margin(&x, &x, eps).unwrap().item(), eps);
    }
    // Every value moved by 0.5 gives a mean squared distance of 0.25.
    let far = x.add_scalar(0.5);
    assert_eq!(loss_margin(&x, &far, 0.1).unwrap().item(), 0.0);
    assert_eq!(loss_margin(&x, &far, 0.25).unwrap().item(), 0.0);
    let near = x.add_scalar(0.1);
    assert!((loss_margin(&x, &near, 0.1).unwrap().item() - 0.09).abs() < 1e-12);
}
