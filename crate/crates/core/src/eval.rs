//! Top-k ranking metrics, run comparison and payload accounting.
//!
//! Per-user metrics skip users whose held-out set is empty; aggregate samples
//! are plain means over the remaining users.

use std::collections::HashSet;
use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{self, ClientState, ServerState};
use crate::model::{FeatureVector, HyperParams, InteractionRow};
use crate::optimizer::AdamConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsSample {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map: f64,
    pub nmr: f64,
    pub user_count: usize,
    pub round: u64,
}

impl MetricsSample {
    pub const NAMES: [&'static str; 5] = ["precision", "recall", "f1", "map", "nmr"];

    pub fn values(&self) -> [f64; 5] {
        [self.precision, self.recall, self.f1, self.map, self.nmr]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Self::NAMES
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values()[i])
    }

    /// User-weighted mean of several samples; `None` when no sample covers a user.
    pub fn merge<'a>(samples: impl IntoIterator<Item = &'a MetricsSample>, round: u64) -> Option<MetricsSample> {
        let mut acc = [0.0; 5];
        let mut users = 0usize;
        for s in samples {
            if s.user_count == 0 {
                continue;
            }
            let w = s.user_count as f64;
            for (a, v) in acc.iter_mut().zip(s.values()) {
                *a += w * v;
            }
            users += s.user_count;
        }
        if users == 0 {
            return None;
        }
        let n = users as f64;
        Some(MetricsSample {
            precision: acc[0] / n,
            recall: acc[1] / n,
            f1: acc[2] / n,
            map: acc[3] / n,
            nmr: acc[4] / n,
            user_count: users,
            round,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[default]
    Raw,
    /// Divide precision, recall, F1 and AP by the best value any ranking could
    /// reach for that user. NMR is left as is.
    BestAchievable,
}

/// Items by descending score, ties by ascending index, with `mask` removed.
pub fn rank_items(scores: &[f64], mask: &HashSet<usize>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).filter(|j| !mask.contains(j)).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

fn hits_at(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> usize {
    ranked.iter().take(k).filter(|j| relevant.contains(j)).count()
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `(hits/k, hits/|relevant|, F1)`; `None` when `relevant` is empty.
pub fn precision_recall_f1_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<(f64, f64, f64)> {
    assert!(k >= 1, "k must be at least 1");
    if relevant.is_empty() {
        return None;
    }
    let hits = hits_at(ranked, relevant, k) as f64;
    let precision = hits / k as f64;
    let recall = hits / relevant.len() as f64;
    Some((precision, recall, f1(precision, recall)))
}

/// Average precision over the top k, normalized by `min(k, |relevant|)`.
pub fn average_precision_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> Option<f64> {
    assert!(k >= 1, "k must be at least 1");
    if relevant.is_empty() {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (pos, j) in ranked.iter().take(k).enumerate() {
        if relevant.contains(j) {
            hits += 1;
            sum += hits as f64 / (pos + 1) as f64;
        }
    }
    Some(sum / k.min(relevant.len()) as f64)
}

/// Mean AP over users that have at least one relevant item.
pub fn map_at_k<'a>(instances: impl IntoIterator<Item = (&'a [usize], &'a HashSet<usize>)>, k: usize) -> Option<f64> {
    let aps: Vec<f64> = instances
        .into_iter()
        .filter_map(|(r, rel)| average_precision_at_k(r, rel, k))
        .collect();
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Mean of (1-based rank)/catalog size over relevant items present in the ranking.
pub fn nmr(ranked_full: &[usize], relevant: &HashSet<usize>) -> Option<f64> {
    if relevant.is_empty() || ranked_full.is_empty() {
        return None;
    }
    let mut rank_sum = 0usize;
    let mut count = 0usize;
    for (pos, j) in ranked_full.iter().enumerate() {
        if relevant.contains(j) {
            rank_sum += pos + 1;
            count += 1;
        }
    }
    (count > 0).then(|| rank_sum as f64 / (count * ranked_full.len()) as f64)
}

/// Every metric for one user, as a single-user sample.
pub fn evaluate_ranking(
    ranked_full: &[usize],
    relevant: &HashSet<usize>,
    k: usize,
    normalization: Normalization,
) -> Option<MetricsSample> {
    let (mut precision, mut recall, mut f) = precision_recall_f1_at_k(ranked_full, relevant, k)?;
    let mut ap = average_precision_at_k(ranked_full, relevant, k)?;
    let nmr = nmr(ranked_full, relevant).unwrap_or(1.0);
    if normalization == Normalization::BestAchievable {
        let best_hits = relevant.len().min(k).min(ranked_full.len()) as f64;
        if best_hits > 0.0 {
            let best_p = best_hits / k as f64;
            let best_r = best_hits / relevant.len() as f64;
            precision /= best_p;
            recall /= best_r;
            f /= f1(best_p, best_r);
            // a perfect ranking reaches AP = best_hits / min(k, |relevant|)
            ap /= best_hits / k.min(relevant.len()) as f64;
        }
    }
    Some(MetricsSample {
        precision,
        recall,
        f1: f,
        map: ap,
        nmr,
        user_count: 1,
        round: 0,
    })
}

/// Scores → masked ranking → metrics for one user.
pub fn evaluate_scores(
    scores: &[f64],
    train_mask: &HashSet<usize>,
    relevant: &HashSet<usize>,
    k: usize,
    normalization: Normalization,
) -> Option<MetricsSample> {
    let ranked = rank_items(scores, train_mask);
    evaluate_ranking(&ranked, relevant, k, normalization)
}

/// `100 (candidate − baseline) / baseline`
pub fn impr_pct(candidate_mean: f64, baseline_mean: f64) -> Result<f64> {
    if baseline_mean == 0.0 {
        return Err(Error::UndefinedComparison);
    }
    Ok(100.0 * (candidate_mean - baseline_mean) / baseline_mean)
}

/// Mean over rounds `(at_round − window, at_round]`, rounds counted from 1.
pub fn convergence_value(trace: &[f64], at_round: usize, window: usize) -> Result<f64> {
    if window == 0 || at_round < window || trace.len() < at_round {
        return Err(Error::InsufficientTrace {
            len: trace.len(),
            needed: at_round.max(window),
        });
    }
    let slice = &trace[at_round - window..at_round];
    Ok(slice.iter().sum::<f64>() / window as f64)
}

/// One line of the exported metric trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: u64,
    pub metric: String,
    pub value: f64,
    pub user_count: usize,
}

/// CSV with header `round,metric,value,user_count`. Floats use the shortest
/// round-trip representation so identical runs give identical bytes.
pub fn write_trace_csv<W: Write>(mut out: W, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(out, "round,metric,value,user_count")?;
    for r in rows {
        writeln!(out, "{},{},{:?},{}", r.round, r.metric, r.value, r.user_count)?;
    }
    out.flush()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayloadDims {
    pub n_items: usize,
    pub n_user_features: usize,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadReport {
    pub dims: PayloadDims,
    /// Whether U travels with Q (FED-MVMF) or Q alone (FCF).
    pub with_user_factors: bool,
    pub float_count: usize,
    pub download_bytes: usize,
    pub upload_bytes: usize,
    pub client_update_ms: f64,
    pub server_update_ms: f64,
    pub encode_ms: f64,
    pub decode_ms: f64,
}

/// Byte sizes from the wire format plus measured timings for one client update,
/// one encode/decode cycle and one server promotion at the given dimensions.
pub fn payload_report(dims: PayloadDims, with_user_factors: bool) -> Result<PayloadReport> {
    if dims.n_items == 0 || dims.k == 0 {
        return Err(Error::invalid("payload dimensions must be positive"));
    }
    let d_u = if with_user_factors { dims.n_user_features } else { 0 };
    let hp = HyperParams {
        k: dims.k,
        alpha: 4.0,
        lambda1: if with_user_factors { 0.1 } else { 0.0 },
        lambda2: 1.0,
        theta: 1,
    };
    let server = ServerState::new(hp, dims.n_items, d_u, 0)?;
    let model = server.model().clone();

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let items: Vec<(usize, f64)> = rand::seq::index::sample(&mut rng, dims.n_items, dims.n_items.min(20))
        .into_iter()
        .map(|j| (j, 1.0))
        .collect();
    let row = InteractionRow::new("probe", items, dims.n_items)?;
    let x = FeatureVector::new(d_u, (0..d_u.min(5)).map(|d| (d, 1.0)).collect())?;
    let mut client = ClientState::new(row, x, dims.k);

    let started = Instant::now();
    let payload = client.round(&model, &hp)?;
    let client_update_ms = started.elapsed().as_secs_f64() * 1e3;

    let started = Instant::now();
    let bytes = federation::encode_payload(model.version, &payload);
    let encode_ms = started.elapsed().as_secs_f64() * 1e3;
    let started = Instant::now();
    let decoded = federation::decode_payload(&bytes)?;
    let decode_ms = started.elapsed().as_secs_f64() * 1e3;
    debug_assert_eq!(decoded.1.q_grad, payload.q_grad);

    let download = federation::encode_model(&model);

    let mut server = server;
    let started = Instant::now();
    server.submit(payload);
    server.pump(&AdamConfig::default())?;
    let server_update_ms = started.elapsed().as_secs_f64() * 1e3;

    Ok(PayloadReport {
        dims,
        with_user_factors,
        float_count: (dims.n_items + d_u) * dims.k,
        download_bytes: download.len(),
        upload_bytes: bytes.len(),
        client_update_ms,
        server_update_ms,
        encode_ms,
        decode_ms,
    })
}

/// Wire size of an upload carrying `n_items × k` Q gradients and `d_u × k` U gradients.
pub fn payload_bytes(n_items: usize, d_u: usize, k: usize) -> usize {
    federation::HEADER_BYTES + federation::SIGNATURE_BYTES + 8 * (n_items + d_u) * k
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn set(items: &[usize]) -> HashSet<usize> {
        items.iter().copied().collect()
    }

    /// Set-based re-implementation: precision/recall from set intersection,
    /// AP from explicit prefix sets, NMR from position lookup.
    fn brute(ranked: &[usize], rel: &HashSet<usize>, k: usize) -> (f64, f64, f64, f64, f64) {
        let top: HashSet<usize> = ranked.iter().take(k).copied().collect();
        let hits = top.intersection(rel).count() as f64;
        let p = hits / k as f64;
        let r = hits / rel.len() as f64;
        let f = if hits == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let mut ap = 0.0;
        for h in 1..=k.min(ranked.len()) {
            if rel.contains(&ranked[h - 1]) {
                let prefix: HashSet<usize> = ranked[..h].iter().copied().collect();
                ap += prefix.intersection(rel).count() as f64 / h as f64;
            }
        }
        ap /= k.min(rel.len()) as f64;
        let ranks: Vec<usize> = rel
            .iter()
            .filter_map(|j| ranked.iter().position(|x| x == j))
            .map(|pos| pos + 1)
            .collect();
        let n = ranks.iter().sum::<usize>() as f64 / (ranks.len() * ranked.len()) as f64;
        (p, r, f, ap, n)
    }

    #[test]
    fn ranking_examples() {
        assert_eq!(rank_items(&[0.1, 0.9, 0.5], &set(&[])), vec![1, 2, 0]);
        assert_eq!(rank_items(&[0.5, 0.5], &set(&[])), vec![0, 1]);
        assert!(rank_items(&[0.5, 0.2], &set(&[0, 1])).is_empty());
        assert_eq!(rank_items(&[0.1, 0.9, 0.5], &set(&[1])), vec![2, 0]);
    }

    #[test]
    fn precision_recall_f1_examples() {
        let ranked: Vec<usize> = (0..20).collect();
        let rel = set(&[0, 3, 7, 15, 18]);
        let (p, r, f) = precision_recall_f1_at_k(&ranked, &rel, 10).unwrap();
        assert!((p - 0.3).abs() < 1e-12 && (r - 0.6).abs() < 1e-12 && (f - 0.4).abs() < 1e-12);
        assert_eq!(precision_recall_f1_at_k(&ranked, &set(&[19]), 10), Some((0.0, 0.0, 0.0)));
        let all: HashSet<usize> = (0..10).collect();
        assert_eq!(precision_recall_f1_at_k(&ranked, &all, 10), Some((1.0, 1.0, 1.0)));
        assert_eq!(precision_recall_f1_at_k(&ranked, &set(&[]), 10), None);
    }

    #[test]
    fn average_precision_examples() {
        let ranked = [5, 9, 2, 7];
        let ap = average_precision_at_k(&ranked, &set(&[5, 2]), 10).unwrap();
        assert!((ap - 0.5 * (1.0 + 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision_at_k(&ranked, &set(&[5]), 10), Some(1.0));
        assert_eq!(average_precision_at_k(&ranked, &set(&[1]), 10), Some(0.0));
        let both = map_at_k([(&ranked[..], &set(&[5])), (&ranked[..], &set(&[1]))], 10).unwrap();
        assert!((both - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nmr_examples() {
        let ranked: Vec<usize> = (0..10).collect();
        assert_eq!(nmr(&ranked, &set(&[4])), Some(0.5));
        assert_eq!(nmr(&ranked, &set(&[0])), Some(0.1));
        assert_eq!(nmr(&ranked, &set(&[9])), Some(1.0));
    }

    #[test]
    fn impr_examples() {
        assert_eq!(impr_pct(0.2771, 0.1811).unwrap().round(), 53.0);
        assert_eq!(impr_pct(0.3, 0.3).unwrap(), 0.0);
        assert!((impr_pct(0.1, 0.2).unwrap() + 50.0).abs() < 1e-12);
        assert!(matches!(impr_pct(0.1, 0.0), Err(Error::UndefinedComparison)));
    }

    #[test]
    fn convergence_examples() {
        assert!((convergence_value(&[0.4; 30], 30, 10).unwrap() - 0.4).abs() < 1e-15);
        let trace: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert_eq!(convergence_value(&trace, 1000, 10).unwrap(), 995.5);
        assert_eq!(convergence_value(&trace, 17, 1).unwrap(), 17.0);
        assert!(convergence_value(&trace[..5], 10, 3).is_err());
    }

    #[test]
    fn normalized_metrics_reach_one_for_perfect_rankings() {
        let ranked: Vec<usize> = (0..50).collect();
        let rel = set(&[0, 1, 2]);
        let s = evaluate_ranking(&ranked, &rel, 10, Normalization::BestAchievable).unwrap();
        assert!((s.precision - 1.0).abs() < 1e-12);
        assert!((s.recall - 1.0).abs() < 1e-12);
        assert!((s.f1 - 1.0).abs() < 1e-12);
        assert!((s.map - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_rankings_center_nmr() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut samples = Vec::new();
        for _ in 0..1000 {
            let mut ranked: Vec<usize> = (0..100).collect();
            ranked.shuffle(&mut rng);
            let rel: HashSet<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(0..100)).collect();
            samples.push(evaluate_ranking(&ranked, &rel, 10, Normalization::Raw).unwrap());
        }
        let mean = MetricsSample::merge(&samples, 0).unwrap();
        assert!((mean.nmr - 0.5).abs() <= 0.05, "{}", mean.nmr);
    }

    #[test]
    fn two_hundred_instances_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.random_range(1..60);
            let mut ranked: Vec<usize> = (0..n).collect();
            ranked.shuffle(&mut rng);
            let rel: HashSet<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..n)).collect();
            let k = rng.random_range(1..15);
            let (p, r, f) = precision_recall_f1_at_k(&ranked, &rel, k).unwrap();
            let ap = average_precision_at_k(&ranked, &rel, k).unwrap();
            let m = nmr(&ranked, &rel).unwrap();
            assert_eq!((p, r, f, ap, m), brute(&ranked, &rel, k));
        }
    }

    #[test]
    fn trace_csv_layout() {
        let mut buf = Vec::new();
        let rows = vec![TraceRow {
            round: 3,
            metric: "precision".into(),
            value: 0.25,
            user_count: 7,
        }];
        write_trace_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "round,metric,value,user_count\n3,precision,0.25,7\n");
    }

    #[test]
    fn payload_byte_formula_and_scaling() {
        let a = payload_report(PayloadDims { n_items: 30, n_user_features: 12, k: 4 }, true).unwrap();
        assert_eq!(a.upload_bytes, 21 + 16 + 8 * (30 + 12) * 4);
        assert_eq!(a.upload_bytes, payload_bytes(30, 12, 4));
        let b = payload_report(PayloadDims { n_items: 30, n_user_features: 12, k: 8 }, true).unwrap();
        assert_eq!(b.float_count, 2 * a.float_count);
        assert_eq!(b.upload_bytes - 37, 2 * (a.upload_bytes - 37));
        let fcf = payload_report(PayloadDims { n_items: 30, n_user_features: 12, k: 4 }, false).unwrap();
        assert_eq!(fcf.upload_bytes, payload_bytes(30, 0, 4));
    }

    proptest! {
        #[test]
        fn metrics_stay_in_unit_interval_and_f1_bounded(
            n in 1usize..80, k in 1usize..20, seed in any::<u64>()
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut ranked: Vec<usize> = (0..n).collect();
            ranked.shuffle(&mut rng);
            let rel: HashSet<usize> = (0..rng.random_range(1..10)).map(|_| rng.random_range(0..n)).collect();
            let s = evaluate_ranking(&ranked, &rel, k, Normalization::Raw).unwrap();
            for v in s.values() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(s.f1 <= (2.0 * s.precision).min(2.0 * s.recall) + 1e-15);
        }
    }
}
