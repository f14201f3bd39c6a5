use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use metaptq::checkpoint::{self, read_file};
use metaptq::config::{parse_config, BitWidths, RunConfig};
use metaptq::data::load_dataset;
use metaptq::hypercheck::{check_suite, check_unet_case, FD_STEP};
use metaptq::metrics::write_metrics;
use metaptq::pipeline::{evaluate, EvalReport, Preset, Strategy};
use metaptq::runner::{comparison_table, fp_record, run_single, run_sweep, write_summary, FailureKind, FpCache, RunError};

/// Post-training quantization with meta-learned calibration augmentation.
#[derive(Debug, Parser)]
#[command(name = "metaptq", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Calibration seed (run.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (run.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// paper, desk or acceptance.
    #[arg(long, global = true)]
    preset: Option<Preset>,
    /// Weight and activation bits, e.g. 2,4.
    #[arg(long, global = true)]
    bits: Option<BitWidths>,
    /// Keep second-layer input activations at 8 bits.
    #[arg(long, global = true)]
    star: bool,
    /// Calibration pool strategy.
    #[arg(long, global = true)]
    augment: Option<Strategy>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the full-precision model and cache it under <out>.
    TrainFp,
    /// Calibrate with the meta-learned transformation.
    Quantize(FpArg),
    /// Calibrate with a static augmentation (default: none).
    QuantizeBaseline(FpArg),
    /// Run every configuration listed under [run.sweep] and print a comparison table.
    Sweep,
    /// Evaluate a full-precision or quantized checkpoint.
    Eval {
        #[arg(long)]
        model: PathBuf,
    },
    /// Compare hypergradients against finite differences on seeded cases.
    CheckHypergrad {
        #[arg(long, default_value_t = 20)]
        cases: u64,
        /// Also run this many UNet cases and report their errors.
        #[arg(long, default_value_t = 0)]
        unet_cases: u64,
    },
}

#[derive(Debug, Args)]
struct FpArg {
    /// Full-precision checkpoint; trained and cached under <out> if absent.
    #[arg(long)]
    fp: Option<PathBuf>,
}

fn resolve(common: &Common) -> Result<RunConfig, RunError> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.run.out_dir = o.clone();
    }
    if let Some(p) = common.preset {
        cfg.run.preset = p;
    }
    if let Some(b) = common.bits {
        cfg.quantization.bits = b;
    }
    if common.star {
        cfg.quantization.star = true;
    }
    if let Some(a) = common.augment {
        cfg.run.strategy = a;
    }
    cfg.validate().map_err(RunError::Usage)?;
    Ok(cfg)
}

fn print_eval(name: &str, e: &EvalReport) {
    println!(
        "{name}: train acc {:.2}%  test acc {:.2}%  gap {:.2}%",
        100.0 * e.train_acc,
        100.0 * e.test_acc,
        100.0 * e.gap
    );
}

fn fp_cache(cfg: &RunConfig, fp: Option<&Path>) -> Result<FpCache, RunError> {
    let mut cache = FpCache::new(Some(cfg.run.out_dir.clone()));
    if let Some(path) = fp {
        let data = load_dataset::<f64>(&cfg.data)?;
        let (model, _) = checkpoint::load_model::<f64>(path, Some(&cfg.fp_hash()))?;
        let eval = evaluate(&model, &data.calib.labeled(&data.train), &data.test)?;
        cache.insert(cfg, metaptq::runner::FpBundle { data, model, eval }.into());
    }
    Ok(cache)
}

fn quantize(cfg: &RunConfig, fp: Option<&Path>) -> Result<(), RunError> {
    let fp = fp_cache(cfg, fp)?.get(cfg)?;
    let label = format!("{}-s{}", cfg.run.strategy, cfg.run.seed);
    let dir = cfg.run.out_dir.join(&label);
    let ex = run_single(cfg, &fp, &label, Some(&dir))?;
    print_eval("full precision", &fp.eval);
    print_eval(&label, &ex.eval);
    println!("artifacts in {}", dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), RunError> {
    let cfg = resolve(&cli.common)?;
    match cli.command {
        Command::TrainFp => {
            let b = metaptq::runner::train_fp(&cfg)?;
            let dir = &cfg.run.out_dir;
            std::fs::create_dir_all(dir).map_err(|source| RunError::Io {
                path: dir.clone(),
                source,
            })?;
            let path = FpCache::new(Some(dir.clone())).path_for(&cfg).expect("cache has a directory");
            checkpoint::save_model(&b.model, &cfg.model, Some(&cfg.fp_hash()), &path)?;
            write_metrics(&[fp_record("fp", &b.eval)], &dir.join("fp_metrics.csv"))?;
            print_eval("full precision", &b.eval);
            println!("saved {}", path.display());
        }
        Command::Quantize(a) => {
            if !cfg.run.strategy.uses_transform() {
                return Err(RunError::Usage(format!(
                    "quantize runs the meta-augmented pipeline; use quantize-baseline for {}",
                    cfg.run.strategy
                )));
            }
            quantize(&cfg, a.fp.as_deref())?;
        }
        Command::QuantizeBaseline(a) => {
            let mut cfg = cfg;
            if cli.common.augment.is_none() {
                cfg.run.strategy = Strategy::None;
            }
            if cfg.run.strategy.uses_transform() {
                return Err(RunError::Usage(format!("{} is not a baseline strategy", cfg.run.strategy)));
            }
            quantize(&cfg, a.fp.as_deref())?;
        }
        Command::Sweep => {
            let mut cache = FpCache::new(Some(cfg.run.out_dir.clone()));
            let rows = run_sweep(&cfg, &mut cache, Some(&cfg.run.out_dir))?;
            write_summary(&rows, &cfg.run.out_dir.join("summary.csv"))?;
            print!("{}", comparison_table(&rows));
        }
        Command::Eval { model } => {
            let file = read_file(&model)?;
            let data = load_dataset::<f64>(&cfg.data)?;
            let train = data.calib.labeled(&data.train);
            let e = match file.meta_str("kind")? {
                "quantized-model" => {
                    let (q, _) = checkpoint::load_quantized::<f64>(&model, None)?;
                    evaluate(&q, &train, &data.test)?
                }
                _ => {
                    let (m, _) = checkpoint::load_model::<f64>(&model, Some(&cfg.fp_hash()))?;
                    evaluate(&m, &train, &data.test)?
                }
            };
            print_eval(&model.display().to_string(), &e);
        }
        Command::CheckHypergrad { cases, unet_cases } => {
            let reports = check_suite(cases)?;
            for r in &reports {
                println!(
                    "seed {:>3} {:<6} params {:>4} coords {:>3} max rel err {:.3e}",
                    r.seed, r.transform, r.t_params, r.coords, r.max_rel_err
                );
            }
            let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
            for seed in 0..unet_cases {
                let r = check_unet_case(seed, FD_STEP)?;
                println!(
                    "seed {:>3} unet   params {:>4} coords {:>3} max rel err {:.3e} norm rel err {:.3e}",
                    r.seed, r.t_params, r.coords, r.max_rel_err, r.norm_rel_err
                );
            }
            println!("max relative error {worst:.3e}");
            if worst >= 1e-3 {
                return Err(RunError::Numeric(format!("max relative error {worst:.3e} exceeds 1e-3")));
            }
        }
    }
    Ok(())
}

fn exit_code(kind: FailureKind) -> u8 {
    match kind {
        FailureKind::Config => 2,
        FailureKind::Data => 3,
        FailureKind::Numeric => 4,
        FailureKind::Io => 5,
        FailureKind::Internal => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
