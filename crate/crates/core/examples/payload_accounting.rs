//! Download and upload sizes for FED-MVMF against FCF at a catalog of 3064
//! items, 3434 hashed user features and K = 25, with measured timings.
//!
//! cargo run --release --example payload_accounting

use fedmvmf::cli::cmd_payload_report;
use fedmvmf::eval::PayloadDims;

fn main() -> fedmvmf::Result<()> {
    let dims = PayloadDims {
        n_items: 3064,
        n_user_features: 3434,
        k: 25,
    };
    let cmp = cmd_payload_report(dims, None)?;
    for r in [&cmp.fedmvmf, &cmp.fcf] {
        println!(
            "{:<8} floats {:>7}  down {:>9} B  up {:>9} B  client {:>7.2} ms  server {:>7.2} ms",
            if r.with_user_factors { "fedmvmf" } else { "fcf" },
            r.float_count,
            r.download_bytes,
            r.upload_bytes,
            r.client_update_ms,
            r.server_update_ms
        );
    }
    println!("payload grows by {:.1}%", cmp.increase_pct);
    Ok(())
}
