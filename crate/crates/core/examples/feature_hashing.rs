//! Turns raw categorical metadata into fixed-width feature vectors: bucket a
//! numeric field, map a code by its prefix, split free text into keywords,
//! then hash every `name=value` pair into a fixed number of columns.
//!
//! cargo run --example feature_hashing

use std::collections::BTreeMap;

use fedmvmf::data::{apply_transforms, hash_features, hash_index, Transform};

fn main() -> fedmvmf::Result<()> {
    let transforms = vec![
        Transform::Bucket {
            feature: "age".into(),
            edges: vec![18.0, 35.0, 50.0],
            labels: vec!["minor".into(), "young".into(), "middle".into(), "senior".into()],
        },
        Transform::PrefixMap {
            feature: "zip".into(),
            prefix_len: 1,
            map: BTreeMap::from([("0".into(), "northeast".into()), ("9".into(), "west".into())]),
            default: Some("other".into()),
        },
        Transform::Keywords {
            feature: "title".into(),
            min_len: 3,
            stopwords: vec!["the".into(), "and".into()],
        },
        Transform::Drop { feature: "email".into() },
    ];
    println!("{}", serde_json::to_string_pretty(&transforms)?);

    let raw: Vec<(String, String)> = [
        ("age", "42"),
        ("zip", "94110"),
        ("title", "The Good, the Bad and the Ugly"),
        ("email", "someone@example.com"),
        ("gender", "F"),
    ]
    .iter()
    .map(|(n, v)| (n.to_string(), v.to_string()))
    .collect();

    let pairs = apply_transforms(raw, &transforms);
    let (size, seed) = (64, 0);
    for (n, v) in &pairs {
        println!("{:<16} -> column {}", format!("{n}={v}"), hash_index(n, v, size, seed));
    }
    let x = hash_features(&pairs, size, seed)?;
    println!("{} non-zero of {} columns: {:?}", x.entries().len(), x.dim(), x.entries());
    Ok(())
}
