//! Writes a tiny dataset in the on-disk formats (tab-separated interactions,
//! categorical user features, dense item features, JSON config), loads it
//! back and splits it per user.
//!
//! cargo run --example load_dataset

use std::fs;

use fedmvmf::data::{split_per_user, DatasetConfig};

const CONFIG: &str = r#"{
  "interactions": "ratings.tsv",
  "format": { "delimiter": "\t", "has_header": true },
  "implicit": true,
  "user_features": {
    "path": "users.tsv",
    "format": "categorical",
    "hash_size": 16,
    "transforms": [
      { "kind": "bucket", "feature": "age", "edges": [30], "labels": ["young", "old"] }
    ]
  },
  "item_features": { "path": "items.tsv", "format": "dense", "dim": 2 }
}"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join(format!("fedmvmf-load-{}", std::process::id()));
    fs::create_dir_all(&dir)?;
    let files = [
        ("dataset.json", CONFIG),
        (
            "ratings.tsv",
            "user\titem\trating\nann\tm1\t5\nann\tm2\t3\nann\tm3\t4\nben\tm2\t4\nben\tm3\t1\nben\tm4\t2\n",
        ),
        ("users.tsv", "id\tfeatures\nann\tage=24\tgender=F\nben\tage=51\tgender=M\n"),
        ("items.tsv", "id\ta\tb\nm1\t1\t0\nm2\t0\t1\nm3\t0.5\t0.5\nm4\t1\t1\n"),
    ];
    for (name, text) in files {
        fs::write(dir.join(name), text)?;
    }

    let cfg = DatasetConfig::from_file(&dir.join("dataset.json"))?;
    let data = cfg.load()?;
    println!("users {:?}, items {:?}", data.user_ids, data.item_ids);
    for (id, row) in data.user_ids.iter().zip(&data.interactions) {
        println!("{id}: {:?}", row.items());
    }
    for (id, x) in data.user_ids.iter().zip(&data.user_features) {
        println!("{id} features: {:?}", x.entries());
    }

    let split = split_per_user(&data, 0.5, 1)?;
    println!("held out per user: {:?}", split.test);
    fs::remove_dir_all(&dir).ok();
    Ok(())
}
