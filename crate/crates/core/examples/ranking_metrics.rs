//! Ranks a catalog from scores, masks items seen in training, and computes
//! precision, recall, F1, AP and NMR for one user.
//!
//! cargo run --example ranking_metrics

use std::collections::HashSet;

use fedmvmf::eval::{
    average_precision_at_k, evaluate_scores, nmr, precision_recall_f1_at_k, rank_items, Normalization,
};

fn main() {
    let scores = [0.9, 0.1, 0.8, 0.7, 0.2, 0.6, 0.05, 0.3];
    let seen: HashSet<usize> = [0].into();
    let relevant: HashSet<usize> = [3, 4, 6].into();
    let k = 5;

    let ranked = rank_items(&scores, &seen);
    println!("ranking without the seen item: {ranked:?}");
    let (p, r, f) = precision_recall_f1_at_k(&ranked, &relevant, k).unwrap();
    println!("p@{k} = {p:.3}  r@{k} = {r:.3}  f1@{k} = {f:.3}");
    println!("ap@{k} = {:.3}", average_precision_at_k(&ranked, &relevant, k).unwrap());
    println!("nmr = {:.3}", nmr(&ranked, &relevant).unwrap());

    for norm in [Normalization::Raw, Normalization::BestAchievable] {
        let m = evaluate_scores(&scores, &seen, &relevant, k, norm).unwrap();
        println!("{norm:?}: {m:?}");
    }
}
