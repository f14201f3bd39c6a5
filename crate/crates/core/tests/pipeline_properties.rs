use std::path::Path;
use std::sync::OnceLock;

use metaptq::config::RunConfig;
use metaptq::losses::LossWeights;
use metaptq::metrics::Phase;
use metaptq::nets::{BlockQuant, QuantConfig, QuantizedModel, Transform, TransformNet, UNetConfig};
use metaptq::pipeline::{
    accuracy, curve_ends, evaluate, run_baseline_ptq, run_meta_phase, run_ptq, run_quant_phase, warm_up_t, Classifier,
    MetaConfig, PipelineError, Strategy,
};
use metaptq::quant::Bits;
use metaptq::runner::{train_fp, FpBundle};
use metaptq::data::LabeledSet;
use metaptq::Tensor;

const FIXTURE: &str = r#"
[model]
widths = [4, 8]

[data]
per_class = 20
test_size = 60
calib_size = 16
noise = 0.6

[train]
epochs = 3

[meta]
n_t = 3
n_q = 20
warmup_iters = 10
batch_size = 8
val_batch_size = 8
unet_width = 2

[run]
preset = "acceptance"
"#;

fn config() -> RunConfig {
    RunConfig::from_toml(FIXTURE, Path::new("fixture.toml")).unwrap()
}

fn fixture() -> &'static FpBundle {
    static FP: OnceLock<FpBundle> = OnceLock::new();
    FP.get_or_init(|| train_fp(&config()).unwrap())
}

fn meta() -> MetaConfig {
    config().meta_config()
}

fn calib() -> &'static Tensor {
    &fixture().data.calib.images
}

fn bit_eq_all(a: &[Tensor], b: &[Tensor]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.bit_eq(y))
}

fn block_state(q: &BlockQuant<f64>) -> Vec<Tensor> {
    q.weights.iter().flat_map(|w| [w.scale.clone(), w.v.clone()]).collect()
}

fn model_state(q: &QuantizedModel<f64>) -> Vec<Tensor> {
    q.blocks.iter().flat_map(block_state).collect()
}

fn unet(cfg: &MetaConfig) -> TransformNet<f64> {
    TransformNet::new(UNetConfig {
        seed: cfg.seed,
        ..cfg.unet.clone()
    })
}

#[test]
fn warm_up_descends_deterministically_towards_identity() {
    let mut cfg = meta();
    cfg.warmup_iters = 40;
    let mut a = unet(&cfg);
    let mut b = unet(&cfg);
    let ra = warm_up_t(&mut a, calib(), &cfg).unwrap();
    let rb = warm_up_t(&mut b, calib(), &cfg).unwrap();
    assert!(ra.loss_after < ra.loss_before);
    assert!(ra.mean_abs_dev < 0.05);
    assert_eq!(ra, rb);
    assert!(bit_eq_all(&a.params(), &b.params()));

    cfg.warmup_iters = 0;
    let mut c = unet(&cfg);
    let before = c.params();
    warm_up_t(&mut c, calib(), &cfg).unwrap();
    assert!(bit_eq_all(&before, &c.params()));
}

#[test]
fn meta_phase_leaves_quantized_model_alone() {
    let cfg = meta();
    let qm = QuantizedModel::init(&fixture().model, cfg.quant, calib()).unwrap();
    let before = model_state(&qm);
    let mut t = unet(&cfg);
    let t0 = t.params();
    let rep = run_meta_phase(&qm, 0, &mut t, calib(), &cfg).unwrap();
    assert_eq!(rep.outer.len(), cfg.n_t);
    assert!(bit_eq_all(&before, &model_state(&qm)));
    assert!(!bit_eq_all(&t0, &t.params()));
}

#[test]
fn meta_phase_without_iterations_or_objective_keeps_transform() {
    let base = meta();
    let qm = QuantizedModel::init(&fixture().model, base.quant, calib()).unwrap();
    let zero_iters = MetaConfig { n_t: 0, ..base.clone() };
    let zero_weights = MetaConfig {
        weights: LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..base.weights
        },
        ..base.clone()
    };
    for cfg in [zero_iters, zero_weights] {
        let mut t = unet(&cfg);
        let t0 = t.params();
        run_meta_phase(&qm, 0, &mut t, calib(), &cfg).unwrap();
        assert!(bit_eq_all(&t0, &t.params()));
    }
}

#[test]
fn meta_objective_decreases_over_the_phase() {
    let cfg = MetaConfig { n_t: 40, ..meta() };
    let qm = QuantizedModel::init(&fixture().model, cfg.quant, calib()).unwrap();
    let mut t = unet(&cfg);
    warm_up_t(&mut t, calib(), &cfg).unwrap();
    let rep = run_meta_phase(&qm, 0, &mut t, calib(), &cfg).unwrap();
    let (first, last) = curve_ends(&rep.outer);
    assert!(last <= first, "{first} -> {last}");
}

#[test]
fn quant_phase_touches_only_its_block() {
    let cfg = MetaConfig { n_q: 160, ..meta() };
    let mut qm = QuantizedModel::init(&fixture().model, cfg.quant, calib()).unwrap();
    let others: Vec<Vec<Tensor>> = qm.blocks.iter().map(block_state).collect();
    let rep = run_quant_phase(&mut qm, 1, calib(), calib(), None, &cfg).unwrap();
    assert!(rep.recon_end < rep.recon_start, "{} -> {}", rep.recon_start, rep.recon_end);
    for (l, b) in qm.blocks.iter().enumerate() {
        assert_eq!(bit_eq_all(&others[l], &block_state(b)), l != 1, "block {l}");
    }
    assert!(qm.blocks[1].weights.iter().all(|w| w.hardened));
}

#[test]
fn quant_phase_without_iterations_is_a_no_op() {
    let cfg = MetaConfig { n_q: 0, ..meta() };
    let mut qm = QuantizedModel::init(&fixture().model, cfg.quant, calib()).unwrap();
    let before = model_state(&qm);
    run_quant_phase(&mut qm, 0, calib(), calib(), None, &cfg).unwrap();
    assert!(bit_eq_all(&before, &model_state(&qm)));
    assert!(qm.blocks[0].weights.iter().all(|w| !w.hardened));
}

#[test]
fn full_precision_quant_phase_keeps_outputs() {
    let cfg = MetaConfig {
        quant: QuantConfig::disabled(),
        ..meta()
    };
    let mut qm = QuantizedModel::init(&fixture().model, cfg.quant, calib()).unwrap();
    let before = qm.forward_model(calib()).unwrap();
    run_quant_phase(&mut qm, 0, calib(), calib(), None, &cfg).unwrap();
    assert!(before.bit_eq(&qm.forward_model(calib()).unwrap()));
}

#[test]
fn one_meta_and_quant_record_per_block() {
    let cfg = meta();
    let out = run_ptq(&fixture().model, calib(), &cfg, Strategy::MetaAug, "r").unwrap();
    let blocks = fixture().model.num_blocks();
    let count = |p: Phase| out.records.iter().filter(|r| r.phase == p).count();
    assert_eq!(count(Phase::Warmup), 1);
    assert_eq!(count(Phase::Meta), blocks);
    assert_eq!(count(Phase::Quant), blocks);
    let order: Vec<(Phase, Option<usize>)> = out
        .records
        .iter()
        .filter(|r| r.phase != Phase::Warmup)
        .map(|r| (r.phase, r.block))
        .collect();
    let expect: Vec<(Phase, Option<usize>)> =
        (0..blocks).flat_map(|l| [(Phase::Meta, Some(l)), (Phase::Quant, Some(l))]).collect();
    assert_eq!(order, expect);
    let n = calib().shape()[0] as f64;
    assert!(out.records.iter().filter(|r| r.phase == Phase::Quant).all(|r| r.get("pool_size") == Some(2.0 * n)));
}

#[test]
fn full_precision_run_reproduces_fp_accuracy() {
    let fp = fixture();
    let cfg = MetaConfig {
        quant: QuantConfig::disabled(),
        ..meta()
    };
    let out = run_ptq(&fp.model, calib(), &cfg, Strategy::MetaAug, "w32").unwrap();
    let train = fp.data.calib.labeled(&fp.data.train);
    assert_eq!(evaluate(&out.model, &train, &fp.data.test).unwrap(), fp.eval);
    assert!(out.model.forward_model(&fp.data.test.images).unwrap().bit_eq(&fp.model.forward_model(&fp.data.test.images).unwrap()));
}

#[test]
fn metaaug_without_meta_iterations_is_the_plain_baseline() {
    let fp = fixture();
    let cfg = MetaConfig { n_t: 0, ..meta() };
    let meta_run = run_ptq(&fp.model, calib(), &cfg, Strategy::MetaAug, "a").unwrap();
    let base = run_baseline_ptq(&fp.model, calib(), &cfg, Strategy::None, "b").unwrap();
    assert!(bit_eq_all(&model_state(&meta_run.model), &model_state(&base.model)));
    let quant = |o: &metaptq::pipeline::PtqOutcome| -> Vec<_> {
        o.records.iter().filter(|r| r.phase == Phase::Quant).map(|r| r.values.clone()).collect()
    };
    assert_eq!(quant(&meta_run), quant(&base));
}

#[test]
fn baseline_pools() {
    let fp = fixture();
    let cfg = meta();
    let n = calib().shape()[0] as f64;
    let pool = |s: Strategy| {
        run_baseline_ptq(&fp.model, calib(), &cfg, s, "p").unwrap().records[0].get("pool_size").unwrap()
    };
    assert_eq!(pool(Strategy::None), n);
    assert_eq!(pool(Strategy::Flip), 2.0 * n);
    assert!(matches!(
        run_baseline_ptq(&fp.model, calib(), &cfg, Strategy::MetaAug, "p"),
        Err(PipelineError::NeedsTransform(Strategy::MetaAug))
    ));
}

#[test]
fn unit_mixing_coefficient_reduces_to_the_plain_pool() {
    let fp = fixture();
    let cfg = MetaConfig {
        mix_lambda: Some(1.0),
        ..meta()
    };
    let none = run_baseline_ptq(&fp.model, calib(), &cfg, Strategy::None, "n").unwrap();
    for s in [Strategy::Mixup, Strategy::Cutmix] {
        let mixed = run_baseline_ptq(&fp.model, calib(), &cfg, s, "m").unwrap();
        assert!(bit_eq_all(&model_state(&none.model), &model_state(&mixed.model)), "{s}");
    }
}

struct Constant(usize, usize);

impl Classifier for Constant {
    fn logits(&self, x: &Tensor) -> Result<Tensor, metaptq::nets::NetError> {
        let n = x.shape()[0];
        let mut v = vec![0.0; n * self.1];
        for r in 0..n {
            v[r * self.1 + self.0] = 1.0;
        }
        Ok(Tensor::from_slice(&[n, self.1], &v).unwrap())
    }
}

struct Oracle(Vec<usize>);

impl Classifier for Oracle {
    fn logits(&self, x: &Tensor) -> Result<Tensor, metaptq::nets::NetError> {
        // Images carry their label in the first pixel.
        let n = x.shape()[0];
        let c = self.0.len();
        let per = x.numel() / n;
        let mut v = vec![0.0; n * c];
        for r in 0..n {
            v[r * c + x.data()[r * per] as usize] = 1.0;
        }
        Ok(Tensor::from_slice(&[n, c], &v).unwrap())
    }
}

fn labeled(labels: Vec<usize>, classes: usize) -> LabeledSet<f64> {
    let n = labels.len();
    let mut px = vec![0.0; n * 3 * 4 * 4];
    for (i, &l) in labels.iter().enumerate() {
        px[i * 48] = l as f64;
    }
    LabeledSet::new(Tensor::from_slice(&[n, 3, 4, 4], &px).unwrap(), labels, classes).unwrap()
}

#[test]
fn evaluation_counting() {
    let balanced = labeled((0..40).map(|i| i % 4).collect(), 4);
    assert_eq!(accuracy(&Constant(2, 4), &balanced).unwrap(), 0.25);
    let oracle = Oracle(vec![0; 4]);
    let e = evaluate(&oracle, &balanced, &balanced).unwrap();
    assert_eq!((e.train_acc, e.test_acc, e.gap), (1.0, 1.0, 0.0));
    let empty = labeled(vec![], 4);
    assert!(matches!(evaluate(&oracle, &empty, &balanced), Err(PipelineError::Empty(_))));
}

#[test]
fn gap_is_train_minus_test() {
    // 85.16% of 10000 calibration images right, 71.01% of 10000 test images.
    let train = labeled((0..10_000).map(|i| usize::from(i >= 8516)).collect(), 2);
    let test = labeled((0..10_000).map(|i| usize::from(i >= 7101)).collect(), 2);
    let e = evaluate(&Constant(0, 2), &train, &test).unwrap();
    assert!((100.0 * e.gap - 14.15).abs() < 1e-9, "{}", e.gap);
}

#[test]
fn four_bit_weights_stay_on_their_grid() {
    let cfg = MetaConfig {
        quant: QuantConfig {
            w_bits: Bits::new(4).unwrap(),
            ..QuantConfig::default()
        },
        ..meta()
    };
    let out = run_baseline_ptq(&fixture().model, calib(), &cfg, Strategy::None, "w4").unwrap();
    let bits: Vec<u32> = out.model.weight_bits().iter().map(|b| b.get()).collect();
    assert!(bits.iter().all(|&b| b == 4 || b == 8), "{bits:?}");
}
