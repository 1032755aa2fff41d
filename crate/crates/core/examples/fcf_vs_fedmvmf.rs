//! Trains FED-MVMF and the interactions-only FCF baseline on the same split
//! and seed, then reports the relative improvement per metric.
//!
//! cargo run --release --example fcf_vs_fedmvmf

use fedmvmf::cli::{self, converged_metrics, Mode, ModelParams, RunConfig};
use fedmvmf::data::{gen_synthetic, split_per_user, SyntheticSpec};
use fedmvmf::eval::{impr_pct, MetricsSample};

fn main() -> fedmvmf::Result<()> {
    let spec = SyntheticSpec {
        n_users: 300,
        n_items: 150,
        density: 0.02,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec)?;
    let split = split_per_user(&data, 0.8, spec.seed)?;

    let mut cfg = RunConfig::synthetic(spec, 120);
    cfg.hyperparams = ModelParams {
        k: 4,
        lambda1: 0.3,
        ..ModelParams::default()
    };

    let mut results = Vec::new();
    for mode in [Mode::Fedmvmf, Mode::FcfBaseline] {
        let (trace, _) = cli::train(&split.train, Some(&split.test), &cfg, mode, cfg.seed)?;
        let m = converged_metrics(&trace, &cfg.eval)?.expect("every user has held-out items");
        results.push(m);
    }
    let (fed, fcf) = (results[0], results[1]);
    println!("{:<10} {:>9} {:>9} {:>8}", "metric", "fedmvmf", "fcf", "impr%");
    for name in MetricsSample::NAMES {
        let (a, b) = (fed.get(name).unwrap(), fcf.get(name).unwrap());
        let impr = impr_pct(a, b).map(|v| format!("{v:+.1}")).unwrap_or_else(|_| "n/a".into());
        println!("{name:<10} {a:>9.4} {b:>9.4} {impr:>8}");
    }
    println!("(lower NMR is better, so a negative NMR impr% is a gain)");
    Ok(())
}
