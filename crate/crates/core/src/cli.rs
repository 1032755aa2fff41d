//! Reproducible experiment runs: configuration, training, cold-start
//! experiments and report files.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coldstart::{cold_start_item, cold_start_user_with, UserProjection};
use crate::data::{gen_synthetic, split_per_user, write_dataset, Dataset, DatasetConfig, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{
    convergence_value, evaluate_scores, impr_pct, payload_report, write_trace_csv, MetricsSample, Normalization,
    PayloadDims, PayloadReport, TraceRow,
};
use crate::federation::{ClientState, EvalSpec, ItemServerState, Simulation, SimulationConfig, Trace};
use crate::model::{predict_scores, FeatureVector, HyperParams};
use crate::optimizer::AdamConfig;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[default]
    Fedmvmf,
    /// Interactions only: λ₁ = 0 and the item server stays idle.
    FcfBaseline,
    /// Both of the above on the same data and seeds, plus Impr%.
    Compare,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Fedmvmf => "fedmvmf",
            Mode::FcfBaseline => "fcf-baseline",
            Mode::Compare => "compare",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Users,
    Items,
    UsersItems,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Users => "users",
            Scenario::Items => "items",
            Scenario::UsersItems => "users-items",
        }
    }
}

/// Model hyperparameters as written in a run config. Without `theta` the
/// server promotes once per round: Θ = sampled clients + the item server.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub k: usize,
    pub alpha: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(default)]
    pub theta: Option<usize>,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams {
            k: 25,
            alpha: 4.0,
            lambda1: 0.0989,
            lambda2: 1.0,
            theta: None,
        }
    }
}

impl ModelParams {
    pub fn resolve(&self, mode: Mode, participants: usize) -> HyperParams {
        let lambda1 = if mode == Mode::FcfBaseline { 0.0 } else { self.lambda1 };
        let item_server = usize::from(lambda1 > 0.0);
        HyperParams {
            k: self.k,
            alpha: self.alpha,
            lambda1,
            lambda2: self.lambda2,
            theta: self.theta.unwrap_or(participants + item_server),
        }
        .with_lambda2_floor()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSettings {
    /// Cut-off for the @k metrics.
    pub k: usize,
    /// Rounds averaged for the converged value.
    pub window: usize,
    /// Round at which the converged value is read; defaults to the last.
    #[serde(default)]
    pub at_round: Option<usize>,
    #[serde(default)]
    pub normalization: Normalization,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            k: 10,
            window: 10,
            at_round: None,
            normalization: Normalization::Raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Path of a dataset config (JSON). Exactly one of `dataset` and `synthetic`.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub hyperparams: ModelParams,
    #[serde(default)]
    pub adam: AdamConfig,
    pub rounds: usize,
    #[serde(default = "one")]
    pub participation_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Independent model rebuilds, seeded `seed`, `seed + 1`, ...
    #[serde(default = "one_usize")]
    pub rebuilds: usize,
    #[serde(default)]
    pub eval: EvalSettings,
    /// Record the objective after every round.
    #[serde(default)]
    pub monitor_cost: bool,
    #[serde(default)]
    pub deterministic: bool,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    /// Cold-start only: map new users through the ridge solve instead of x* U.
    #[serde(default)]
    pub user_projection: UserProjection,
}

fn one() -> f64 {
    1.0
}

fn one_usize() -> usize {
    1
}

fn default_train_fraction() -> f64 {
    0.8
}

fn default_out() -> PathBuf {
    "out".into()
}

impl RunConfig {
    pub fn synthetic(spec: SyntheticSpec, rounds: usize) -> Self {
        RunConfig {
            dataset: None,
            synthetic: Some(spec),
            hyperparams: ModelParams::default(),
            adam: AdamConfig::default(),
            rounds,
            participation_fraction: 1.0,
            seed: spec.seed,
            mode: Mode::Fedmvmf,
            train_fraction: default_train_fraction(),
            rebuilds: 1,
            eval: EvalSettings::default(),
            monitor_cost: false,
            deterministic: false,
            out_dir: default_out(),
            user_projection: UserProjection::Plain,
        }
    }

    /// Reads a config; a relative dataset path resolves against the config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        if let Some(d) = cfg.dataset.as_mut().filter(|d| d.is_relative()) {
            *d = path.parent().unwrap_or(Path::new(".")).join(&*d);
        }
        Ok(cfg)
    }

    /// Every problem with the config at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match (&self.dataset, &self.synthetic) {
            (Some(_), Some(_)) => problems.push("set only one of dataset and synthetic".to_string()),
            (None, None) => problems.push("one of dataset and synthetic is required".to_string()),
            (Some(p), None) if !p.exists() => problems.push(format!("dataset config {} does not exist", p.display())),
            (Some(p), None) => match DatasetConfig::from_file(p) {
                Ok(d) => problems.extend(d.problems()),
                Err(e) => problems.push(format!("dataset config {}: {e}", p.display())),
            },
            _ => {}
        }
        let mut hp = self.hyperparams.resolve(Mode::Fedmvmf, 1);
        hp.lambda2 = self.hyperparams.lambda2;
        problems.extend(hp.problems());
        if self.hyperparams.theta == Some(0) {
            problems.push("theta must be at least 1".into());
        }
        problems.extend(self.adam.problems());
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            problems.push(format!(
                "participation_fraction must lie in (0, 1] (got {})",
                self.participation_fraction
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            problems.push(format!("train_fraction must lie in (0, 1) (got {})", self.train_fraction));
        }
        if self.rebuilds == 0 {
            problems.push("rebuilds must be at least 1".into());
        }
        if self.eval.k == 0 {
            problems.push("eval.k must be at least 1".into());
        }
        if self.eval.window == 0 {
            problems.push("eval.window must be at least 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match (&self.dataset, &self.synthetic) {
            (Some(p), None) => DatasetConfig::from_file(p)?.load(),
            (None, Some(spec)) => gen_synthetic(spec),
            _ => Err(Error::invalid("one of dataset and synthetic is required")),
        }
    }

    /// Content hashes of every input, as `(name, sha256 hex)`.
    pub fn input_hashes(&self) -> Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        if let Some(p) = &self.dataset {
            let cfg = DatasetConfig::from_file(p)?;
            for path in std::iter::once(p.as_path()).chain(cfg.input_paths()) {
                let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
                out.push((path.display().to_string(), content_hash(&bytes)));
            }
        }
        if let Some(spec) = &self.synthetic {
            out.push(("synthetic".into(), content_hash(serde_json::to_string(spec)?.as_bytes())));
        }
        Ok(out)
    }
}

/// SHA-256 over `blob <len>\0<content>`, the object layout git hashes.
pub fn content_hash(bytes: &[u8]) -> String {
    let digest = Sha256::new()
        .chain_update(format!("blob {}\0", bytes.len()))
        .chain_update(bytes)
        .finalize();
    hex::encode(digest)
}

/// Clients and item server for one mode. Without side information the
/// parties carry zero-width features and nothing about U is exchanged.
pub fn build_parties(
    train: &Dataset,
    test: Option<&[Vec<usize>]>,
    hp: &HyperParams,
) -> Result<(Vec<ClientState>, ItemServerState, usize)> {
    let side = hp.side_information();
    let d_u = if side { train.d_u } else { 0 };
    let clients = train
        .interactions
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let x = if side {
                train.user_features[i].clone()
            } else {
                FeatureVector::zeros(0)
            };
            let c = ClientState::new(row.clone(), x, hp.k);
            match test {
                Some(t) => c.with_test_items(t[i].iter().copied()),
                None => c,
            }
        })
        .collect();
    let items = if side {
        ItemServerState::new(train.item_features.clone(), train.d_v, hp.k)?
    } else {
        ItemServerState::new(vec![FeatureVector::zeros(0); train.n_items()], 0, hp.k)?
    };
    Ok((clients, items, d_u))
}

fn participants(n_users: usize, fraction: f64) -> usize {
    ((fraction * n_users as f64).ceil() as usize).clamp(1.min(n_users), n_users)
}

/// Trains one model in a single (non-compare) mode.
pub fn train(
    train: &Dataset,
    test: Option<&[Vec<usize>]>,
    cfg: &RunConfig,
    mode: Mode,
    seed: u64,
) -> Result<(Trace, Simulation)> {
    if mode == Mode::Compare {
        return Err(Error::invalid("train needs a single mode"));
    }
    let hp = cfg
        .hyperparams
        .resolve(mode, participants(train.n_users(), cfg.participation_fraction));
    let (clients, items, d_u) = build_parties(train, test, &hp)?;
    let sim_cfg = SimulationConfig {
        rounds: cfg.rounds,
        participation_fraction: cfg.participation_fraction,
        seed,
        eval: test.map(|_| EvalSpec {
            k: cfg.eval.k,
            normalization: cfg.eval.normalization,
        }),
        monitor_cost: cfg.monitor_cost,
        deterministic: cfg.deterministic,
    };
    let mut sim = Simulation::new(clients, items, d_u, hp, cfg.adam, sim_cfg)?;
    let trace = sim.run()?;
    Ok((trace, sim))
}

pub fn trace_rows(trace: &Trace, n_users: usize) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    if let Some(c) = trace.initial_cost {
        rows.push(TraceRow {
            round: 0,
            metric: "cost".into(),
            value: c,
            user_count: n_users,
        });
    }
    for r in &trace.records {
        if let Some(m) = &r.metrics {
            for (name, value) in MetricsSample::NAMES.iter().zip(m.values()) {
                rows.push(TraceRow {
                    round: r.round as u64,
                    metric: name.to_string(),
                    value,
                    user_count: m.user_count,
                });
            }
        }
        if let Some(c) = r.cost {
            rows.push(TraceRow {
                round: r.round as u64,
                metric: "cost".into(),
                value: c,
                user_count: n_users,
            });
        }
    }
    rows
}

/// Converged value of every metric in the trace.
pub fn converged_metrics(trace: &Trace, eval: &EvalSettings) -> Result<Option<MetricsSample>> {
    let n = trace.metric_series("precision").len();
    if n == 0 {
        return Ok(None);
    }
    let at = eval.at_round.unwrap_or(n).min(n);
    let window = eval.window.min(at);
    let mut vals = [0.0; 5];
    for (v, name) in vals.iter_mut().zip(MetricsSample::NAMES) {
        *v = convergence_value(&trace.metric_series(name), at, window)?;
    }
    let last_users = trace.records.iter().rev().find_map(|r| r.metrics.map(|m| m.user_count));
    Ok(Some(MetricsSample {
        precision: vals[0],
        recall: vals[1],
        f1: vals[2],
        map: vals[3],
        nmr: vals[4],
        user_count: last_users.unwrap_or(0),
        round: at as u64,
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample standard deviation; zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MeanStd { mean, std }
    }
}

fn summarize(samples: &[MetricsSample]) -> Vec<(String, MeanStd)> {
    if samples.is_empty() {
        return Vec::new();
    }
    MetricsSample::NAMES
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let vals: Vec<f64> = samples.iter().map(|s| s.values()[i]).collect();
            (n.to_string(), MeanStd::of(&vals))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RebuildResult {
    pub seed: u64,
    pub converged: Option<MetricsSample>,
    pub initial_cost: Option<f64>,
    pub final_cost: Option<f64>,
    pub promotions: usize,
    pub final_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub mode: Mode,
    pub rebuilds: Vec<RebuildResult>,
    pub summary: Vec<(String, MeanStd)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub fedmvmf: SimulateSummary,
    pub fcf_baseline: SimulateSummary,
    /// Impr% of FED-MVMF over the baseline per metric. For NMR lower is
    /// better, so a negative value is an improvement.
    pub impr_pct: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SimulateOutcome {
    Single(SimulateSummary),
    Compare(Comparison),
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    crate_version: &'a str,
    seed: u64,
    config: &'a RunConfig,
    inputs: Vec<(String, String)>,
    outputs: Vec<(String, String)>,
}

fn write_manifest(dir: &Path, command: &str, cfg: &RunConfig, outputs: &[&str]) -> Result<()> {
    let outputs = outputs
        .iter()
        .map(|name| {
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            Ok((name.to_string(), content_hash(&bytes)))
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        command,
        crate_version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg,
        inputs: cfg.input_hashes()?,
        outputs,
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PayloadSummary {
    report: PayloadReport,
    mean_upload_bytes_per_round: f64,
    mean_download_bytes_per_round: f64,
}

fn simulate_one(cfg: &RunConfig, data: &Dataset, mode: Mode, dir: &Path) -> Result<SimulateSummary> {
    create_dir(dir)?;
    let split = split_per_user(data, cfg.train_fraction, cfg.seed)?;
    let mut rebuilds = Vec::with_capacity(cfg.rebuilds);
    let mut written = Vec::new();
    let mut byte_rounds = (0usize, 0usize, 0usize);
    for r in 0..cfg.rebuilds {
        let seed = cfg.seed.wrapping_add(r as u64);
        let (trace, sim) = if cfg.rounds == 0 {
            (Trace::default(), None)
        } else {
            let (t, s) = train(&split.train, Some(&split.test), cfg, mode, seed)?;
            (t, Some(s))
        };
        let name = if r == 0 { "trace.csv".to_string() } else { format!("trace_{r}.csv") };
        let path = dir.join(&name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        write_trace_csv(std::io::BufWriter::new(file), &trace_rows(&trace, split.train.n_users()))
            .map_err(|e| Error::io(&path, e))?;
        written.push(name);
        for rec in &trace.records {
            byte_rounds.0 += rec.upload_bytes;
            byte_rounds.1 += rec.download_bytes;
            byte_rounds.2 += 1;
        }
        rebuilds.push(RebuildResult {
            seed,
            converged: converged_metrics(&trace, &cfg.eval)?,
            initial_cost: trace.initial_cost,
            final_cost: trace.cost_series().last().copied(),
            promotions: trace.promotions(),
            final_version: sim.as_ref().map_or(1, |s| s.server.model().version),
        });
    }
    let converged: Vec<MetricsSample> = rebuilds.iter().filter_map(|r| r.converged).collect();
    let summary = SimulateSummary {
        mode,
        summary: summarize(&converged),
        rebuilds,
    };
    write_json(&dir.join("metrics.json"), &summary)?;

    let side = mode != Mode::FcfBaseline && cfg.hyperparams.lambda1 > 0.0;
    let report = payload_report(
        PayloadDims {
            n_items: data.n_items().max(1),
            n_user_features: data.d_u,
            k: cfg.hyperparams.k,
        },
        side,
    )?;
    let per_round = |total: usize| {
        if byte_rounds.2 == 0 {
            0.0
        } else {
            total as f64 / byte_rounds.2 as f64
        }
    };
    write_json(
        &dir.join("payload.json"),
        &PayloadSummary {
            report,
            mean_upload_bytes_per_round: per_round(byte_rounds.0),
            mean_download_bytes_per_round: per_round(byte_rounds.1),
        },
    )?;
    let mut outputs: Vec<&str> = written.iter().map(String::as_str).collect();
    outputs.extend(["metrics.json", "payload.json"]);
    let mut single = cfg.clone();
    single.mode = mode;
    write_manifest(dir, "simulate", &single, &outputs)?;
    Ok(summary)
}

/// Split, train, evaluate and write `trace.csv`, `metrics.json`,
/// `payload.json` and `manifest.json` under `cfg.out_dir`. In compare mode
/// each mode gets a subdirectory and `comparison.json` holds Impr%.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<SimulateOutcome> {
    cfg.validate()?;
    if cfg.rounds == 0 {
        log::warn!("rounds = 0: writing an empty trace");
    }
    let data = cfg.load_dataset()?;
    log::info!(
        "{} users, {} items, {} interactions (density {:.4})",
        data.n_users(),
        data.n_items(),
        data.n_interactions(),
        data.density()
    );
    match cfg.mode {
        Mode::Compare => {
            let fed = simulate_one(cfg, &data, Mode::Fedmvmf, &cfg.out_dir.join("fedmvmf"))?;
            let fcf = simulate_one(cfg, &data, Mode::FcfBaseline, &cfg.out_dir.join("fcf-baseline"))?;
            let impr = fed
                .summary
                .iter()
                .zip(&fcf.summary)
                .filter_map(|((name, a), (_, b))| impr_pct(a.mean, b.mean).ok().map(|v| (name.clone(), v)))
                .collect();
            let cmp = Comparison {
                fedmvmf: fed,
                fcf_baseline: fcf,
                impr_pct: impr,
            };
            write_json(&cfg.out_dir.join("comparison.json"), &cmp)?;
            Ok(SimulateOutcome::Compare(cmp))
        }
        mode => Ok(SimulateOutcome::Single(simulate_one(cfg, &data, mode, &cfg.out_dir)?)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartRun {
    pub seed: u64,
    pub scenario: Scenario,
    pub held_out_users: usize,
    pub held_out_items: usize,
    pub metrics: Option<MetricsSample>,
    /// The same users ranked by uniform random scores over the same candidates.
    pub random_baseline: Option<MetricsSample>,
}

fn holdout(n: usize, fraction: f64, rng: &mut impl Rng, what: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_out = (fraction * n as f64).round().max(1.0) as usize;
    if n_out >= n {
        return Err(Error::invalid(format!(
            "holding out {fraction} of {n} {what} leaves none to train on"
        )));
    }
    let mut out = index::sample(rng, n, n_out).into_vec();
    out.sort_unstable();
    let held: HashSet<usize> = out.iter().copied().collect();
    let kept = (0..n).filter(|i| !held.contains(i)).collect();
    Ok((kept, out))
}

/// Holds out users, items or both, trains on the rest and scores the held-out
/// entities from features alone.
///
/// - `Users`: each new user ranks the full catalog; relevant = all their items.
/// - `Items`: each trained user ranks the catalog with its training items
///   masked; relevant = their interactions with the new items.
/// - `UsersItems`: each new user ranks the full catalog, new items included;
///   relevant = their interactions with the new items.
pub fn run_coldstart(
    data: &Dataset,
    cfg: &RunConfig,
    scenario: Scenario,
    holdout_fraction: f64,
    seed: u64,
) -> Result<ColdStartRun> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::invalid(format!(
            "holdout fraction must lie in (0, 1) (got {holdout_fraction})"
        )));
    }
    let mode = if cfg.mode == Mode::Compare { Mode::Fedmvmf } else { cfg.mode };
    let needs_items = scenario != Scenario::Users;
    if needs_items && (mode == Mode::FcfBaseline || cfg.hyperparams.lambda1 == 0.0) {
        return Err(Error::SideInformationDisabled);
    }
    let mut rng = seeds::rng(seed, seeds::HOLDOUT);
    let all_users: Vec<usize> = (0..data.n_users()).collect();
    let all_items: Vec<usize> = (0..data.n_items()).collect();
    let (train_users, new_users) = if scenario == Scenario::Items {
        (all_users, Vec::new())
    } else {
        holdout(data.n_users(), holdout_fraction, &mut rng, "users")?
    };
    let (train_items, new_items) = if needs_items {
        holdout(data.n_items(), holdout_fraction, &mut rng, "items")?
    } else {
        (all_items, Vec::new())
    };
    let train_set = data.subset(&train_users, &train_items)?;
    let (_, mut sim) = train(&train_set, None, cfg, mode, seed)?;
    let hp = *sim.hyperparams();

    // new items are appended to Q in `new_items` order
    let n_train_items = train_items.len();
    let mut catalog_pos = vec![usize::MAX; data.n_items()];
    for (pos, &j) in train_items.iter().chain(&new_items).enumerate() {
        catalog_pos[j] = pos;
    }
    for &j in &new_items {
        cold_start_item(&data.item_features[j], &mut sim.item_server, &mut sim.server)?;
    }
    let model = sim.server.model().clone();
    let n_catalog = model.n_items();

    let mut score_rng = seeds::rng(seed, "random-baseline");
    let mut samples = Vec::new();
    let mut random = Vec::new();
    let mut evaluate = |scores: &[f64], mask: &HashSet<usize>, relevant: &HashSet<usize>| {
        let random_scores: Vec<f64> = (0..scores.len()).map(|_| score_rng.random::<f64>()).collect();
        if let Some(s) = evaluate_scores(scores, mask, relevant, cfg.eval.k, cfg.eval.normalization) {
            samples.push(s);
        }
        if let Some(s) = evaluate_scores(&random_scores, mask, relevant, cfg.eval.k, cfg.eval.normalization) {
            random.push(s);
        }
    };

    match scenario {
        Scenario::Users | Scenario::UsersItems => {
            let mask: HashSet<usize> = HashSet::new();
            let min_pos = if scenario == Scenario::UsersItems { n_train_items } else { 0 };
            for &i in &new_users {
                let relevant: HashSet<usize> = data.interactions[i]
                    .item_indices()
                    .map(|j| catalog_pos[j])
                    .filter(|&p| p >= min_pos)
                    .collect();
                let r = cold_start_user_with(&data.user_features[i], &model, &hp, cfg.user_projection)?;
                evaluate(&r.scores, &mask, &relevant);
            }
        }
        Scenario::Items => {
            let grams = crate::model::Grams::new(&model.q, &model.u);
            for (c, &i) in sim.clients.iter_mut().zip(&train_users) {
                c.extend_catalog(n_catalog)?;
                c.p = crate::model::update_p_local_with(&c.row, &c.features, &model.q, &model.u, &grams, &hp)?;
                let relevant: HashSet<usize> = data.interactions[i]
                    .item_indices()
                    .map(|j| catalog_pos[j])
                    .filter(|&p| p >= n_train_items)
                    .collect();
                let mask: HashSet<usize> = c.row.item_indices().collect();
                let scores = predict_scores(&c.p, &model.q)?;
                evaluate(&scores, &mask, &relevant);
            }
        }
    }
    Ok(ColdStartRun {
        seed,
        scenario,
        held_out_users: new_users.len(),
        held_out_items: new_items.len(),
        metrics: MetricsSample::merge(&samples, model.version),
        random_baseline: MetricsSample::merge(&random, model.version),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColdStartSummary {
    pub scenario: Scenario,
    pub holdout_fraction: f64,
    pub runs: Vec<ColdStartRun>,
    pub summary: Vec<(String, MeanStd)>,
    pub random_baseline: Vec<(String, MeanStd)>,
}

/// Runs one cold-start scenario per rebuild seed and writes
/// `coldstart_<scenario>.json` and `manifest.json`.
pub fn cmd_coldstart(cfg: &RunConfig, scenario: Scenario, holdout_fraction: f64) -> Result<ColdStartSummary> {
    cfg.validate()?;
    let data = cfg.load_dataset()?;
    let runs = (0..cfg.rebuilds)
        .map(|r| run_coldstart(&data, cfg, scenario, holdout_fraction, cfg.seed.wrapping_add(r as u64)))
        .collect::<Result<Vec<_>>>()?;
    let metrics: Vec<MetricsSample> = runs.iter().filter_map(|r| r.metrics).collect();
    let random: Vec<MetricsSample> = runs.iter().filter_map(|r| r.random_baseline).collect();
    let summary = ColdStartSummary {
        scenario,
        holdout_fraction,
        summary: summarize(&metrics),
        random_baseline: summarize(&random),
        runs,
    };
    create_dir(&cfg.out_dir)?;
    let name = format!("coldstart_{}.json", scenario.name());
    write_json(&cfg.out_dir.join(&name), &summary)?;
    write_manifest(&cfg.out_dir, "coldstart", cfg, &[&name])?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticReport {
    pub config_path: PathBuf,
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub density: f64,
}

/// Generates a synthetic dataset and writes it in the loadable file formats.
pub fn cmd_gen_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<SyntheticReport> {
    let d = gen_synthetic(spec)?;
    let config_path = write_dataset(&d, out_dir)?;
    let report = SyntheticReport {
        config_path,
        n_users: d.n_users(),
        n_items: d.n_items(),
        n_interactions: d.n_interactions(),
        density: d.density(),
    };
    write_json(&out_dir.join("synthetic.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadComparison {
    pub fedmvmf: PayloadReport,
    pub fcf: PayloadReport,
    /// Growth of the FED-MVMF payload over FCF, in percent.
    pub increase_pct: f64,
}

/// FED-MVMF and FCF payload sizes and timings at the given dimensions.
pub fn cmd_payload_report(dims: PayloadDims, out_dir: Option<&Path>) -> Result<PayloadComparison> {
    let fedmvmf = payload_report(dims, true)?;
    let fcf = payload_report(dims, false)?;
    let increase_pct = impr_pct(fedmvmf.download_bytes as f64, fcf.download_bytes as f64)?;
    let cmp = PayloadComparison {
        fedmvmf,
        fcf,
        increase_pct,
    };
    if let Some(dir) = out_dir {
        create_dir(dir)?;
        write_json(&dir.join("payload.json"), &cmp)?;
    }
    Ok(cmp)
}
