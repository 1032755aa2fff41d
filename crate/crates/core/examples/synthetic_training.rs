//! Trains FED-MVMF on a small synthetic dataset and prints the objective and
//! on-device ranking metrics as the rounds go by.
//!
//! cargo run --release --example synthetic_training

use fedmvmf::cli::{self, Mode, ModelParams, RunConfig};
use fedmvmf::data::{gen_synthetic, split_per_user, SyntheticSpec};

fn main() -> fedmvmf::Result<()> {
    let spec = SyntheticSpec {
        n_users: 200,
        n_items: 100,
        density: 0.04,
        seed: 7,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec)?;
    println!(
        "{} users, {} items, {} interactions (density {:.3})",
        data.n_users(),
        data.n_items(),
        data.n_interactions(),
        data.density()
    );

    let split = split_per_user(&data, 0.8, spec.seed)?;
    let mut cfg = RunConfig::synthetic(spec, 60);
    cfg.hyperparams = ModelParams {
        k: 4,
        lambda1: 0.3,
        ..ModelParams::default()
    };
    cfg.monitor_cost = true;

    let (trace, sim) = cli::train(&split.train, Some(&split.test), &cfg, Mode::Fedmvmf, cfg.seed)?;
    println!("initial J = {:.2}", trace.initial_cost.unwrap_or(f64::NAN));
    for r in trace.records.iter().filter(|r| r.round % 10 == 0) {
        let m = r.metrics.unwrap_or_default();
        println!(
            "round {:3}  J = {:10.2}  p@10 = {:.3}  map@10 = {:.3}  nmr = {:.3}",
            r.round,
            r.cost.unwrap_or(f64::NAN),
            m.precision,
            m.map,
            m.nmr
        );
    }
    println!(
        "{} promotions, master model at version {}",
        trace.promotions(),
        sim.server.model().version
    );
    Ok(())
}
