use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use metaptq::quant::{
    init_scale_search, quant_mse, quantize_learned, quantize_uniform, scale_candidates, Bits, QuantParams,
};
use metaptq::Tensor;

const SAMPLES: usize = 100_000;
const WIDTHS: [u32; 4] = [2, 3, 4, 8];

fn cases() -> impl Iterator<Item = (Bits, bool)> {
    WIDTHS
        .iter()
        .flat_map(|&b| [(Bits::new(b).unwrap(), true), (Bits::new(b).unwrap(), false)])
}

/// Values spread well past the clip range on both sides.
fn sample(seed: u64, scale: f64, bits: Bits) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let reach = scale * (1u64 << bits.get()) as f64;
    (0..SAMPLES).map(|_| rng.gen_range(-reach..reach)).collect()
}

fn quantize(w: &[f64], s: f64, bits: Bits, signed: bool) -> Vec<f64> {
    let t = Tensor::from_slice(&[w.len()], w).unwrap();
    quantize_uniform(&t, &Tensor::scalar(s), bits, signed).unwrap().to_vec()
}

#[test]
fn range_lattice_idempotence_monotonicity() {
    for (k, (bits, signed)) in cases().enumerate() {
        let s = 0.037 * (k + 1) as f64;
        let (n, p) = bits.bounds(signed);
        let mut w = sample(k as u64, s, bits);
        let q = quantize(&w, s, bits, signed);
        for (&x, &y) in w.iter().zip(&q) {
            let code = y / s;
            assert!(code >= n as f64 - 1e-9 && code <= p as f64 + 1e-9, "{bits:?} {signed}: {x} -> {y}");
            assert!((code - code.round()).abs() < 1e-9, "{bits:?} {signed}: {y} off the lattice");
        }
        assert_eq!(quantize(&q, s, bits, signed), q, "{bits:?} {signed}: not idempotent");
        w.sort_by(f64::total_cmp);
        let q = quantize(&w, s, bits, signed);
        assert!(q.windows(2).all(|p| p[0] <= p[1]), "{bits:?} {signed}: not monotone");
    }
}

#[test]
fn hardened_learned_rounding_lands_on_the_lattice() {
    for (k, (bits, signed)) in cases().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + k as u64);
        let w: Vec<f64> = (0..SAMPLES / 10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::from_slice(&[w.len()], &w).unwrap();
        let mut q = QuantParams::init(&t, bits, signed, false).unwrap();
        q.harden();
        let s = q.scale.item();
        let (n, p) = bits.bounds(signed);
        for (&x, &y) in w.iter().zip(quantize_learned(&t, &q).unwrap().data()) {
            let code = y / s;
            assert!((code - code.round()).abs() < 1e-9);
            assert!(code >= n as f64 - 1e-9 && code <= p as f64 + 1e-9);
            // Hardened rounding picks floor or ceil, never further.
            if x / s > n as f64 && x / s < p as f64 {
                assert!((code - x / s).abs() < 1.0 + 1e-9);
            }
        }
    }
}

#[test]
fn scale_search_beats_every_grid_candidate() {
    let normal = Normal::new(0.0, 0.3).unwrap();
    for (k, (bits, signed)) in cases().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + k as u64);
        let mut w: Vec<f64> = (0..4096).map(|_| normal.sample(&mut rng)).collect();
        if !signed {
            w.iter_mut().for_each(|v| *v = v.abs());
        }
        let t = Tensor::from_slice(&[w.len()], &w).unwrap();
        let best = init_scale_search(&t, bits, signed).unwrap();
        let best_err = quant_mse(&w, best, bits, signed);
        let cands = scale_candidates(&w, bits, signed);
        assert!(cands.len() > 100);
        for c in cands {
            assert!(best_err <= quant_mse(&w, c, bits, signed), "{bits:?} {signed}: {c} beats {best}");
        }
    }
}
