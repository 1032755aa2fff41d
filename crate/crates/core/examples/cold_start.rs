//! Holds out users, items, or both, and recommends for them from features
//! alone. Each scenario is compared against random scores over the same
//! candidates.
//!
//! cargo run --release --example cold_start

use fedmvmf::cli::{run_coldstart, ModelParams, RunConfig, Scenario};
use fedmvmf::data::{gen_synthetic, SyntheticSpec};

fn main() -> fedmvmf::Result<()> {
    let spec = SyntheticSpec {
        n_users: 300,
        n_items: 150,
        density: 0.04,
        seed: 11,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic(&spec)?;
    let mut cfg = RunConfig::synthetic(spec, 80);
    cfg.hyperparams = ModelParams {
        k: 4,
        lambda1: 0.3,
        ..ModelParams::default()
    };

    for scenario in [Scenario::Users, Scenario::Items, Scenario::UsersItems] {
        let run = run_coldstart(&data, &cfg, scenario, 0.1, cfg.seed)?;
        let (m, r) = (run.metrics.unwrap_or_default(), run.random_baseline.unwrap_or_default());
        println!(
            "{:<12} {:3} new users, {:3} new items: map@10 {:.4} (random {:.4}), nmr {:.3} (random {:.3})",
            scenario.name(),
            run.held_out_users,
            run.held_out_items,
            m.map,
            r.map,
            m.nmr,
            r.nmr
        );
    }
    Ok(())
}
