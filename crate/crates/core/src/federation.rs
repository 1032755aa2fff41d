//! The three-party training protocol as in-process state machines.
//!
//! The FL server holds the versioned master model (Q, U), a FIFO queue of
//! gradient payloads and the Adam state. Clients hold one interaction row, one
//! feature row and their private factor p_i. The item server holds Y and V.
//!
//! Every payload carries the signature of the model version it was computed
//! against. Only current-signature payloads are queued; once Θ payloads have
//! been aggregated the server takes one Adam step, bumps the version, issues a
//! new signature and drops whatever is still queued.
//!
//! The server API only ever consumes [`GradientPayload`]s: nothing reachable
//! from [`ServerState`] takes raw interactions or raw user features.

use std::collections::{HashSet, VecDeque};
use std::fmt;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eval::{evaluate_scores, MetricsSample, Normalization};
use crate::model::{
    aggregate_q_grad, aggregate_u_grad, client_q_sums, client_u_sums, cost_j, item_gradient_sums, predict_scores,
    update_p_local_with, update_v_all, FeatureVector, GradientPayload, Grams, HyperParams, InteractionRow,
    PayloadSource,
};
use crate::numerics::DenseMatrix;
use crate::optimizer::{AdamConfig, AdamState};
use crate::seeds;

/// Fixed header: version u64, source u8, n_v u32, d_u u32, k u32.
pub const HEADER_BYTES: usize = 21;
pub const SIGNATURE_BYTES: usize = 16;
/// Source tag used when the master model itself is serialized for download.
pub const MODEL_TAG: u8 = 2;

/// Upper end of the uniform range used to initialize Q and U.
pub const INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Signature(pub [u8; SIGNATURE_BYTES]);

impl Signature {
    fn derive(nonce: u64, version: u64) -> Self {
        let digest = Sha256::new()
            .chain_update(b"update-signature")
            .chain_update(nonce.to_le_bytes())
            .chain_update(version.to_le_bytes())
            .finalize();
        let mut out = [0u8; SIGNATURE_BYTES];
        out.copy_from_slice(&digest[..SIGNATURE_BYTES]);
        Signature(out)
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(&self.0[..6]))
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MasterModel {
    pub version: u64,
    pub signature: Signature,
    pub q: DenseMatrix,
    pub u: DenseMatrix,
}

impl MasterModel {
    pub fn n_items(&self) -> usize {
        self.q.rows()
    }

    pub fn n_user_features(&self) -> usize {
        self.u.rows()
    }

    pub fn k(&self) -> usize {
        self.q.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rejection {
    Stale,
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Submission {
    Accepted,
    Rejected(Rejection),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServerStats {
    pub accepted: u64,
    pub rejected_stale: u64,
    pub rejected_malformed: u64,
    /// Payloads still queued when a promotion invalidated their signature.
    pub flushed_stale: u64,
    pub promotions: u64,
}

/// Per-element Neumaier summation, so that the aggregate barely depends on
/// the arrival order of payloads.
#[derive(Debug, Clone)]
struct CompensatedSum {
    sum: DenseMatrix,
    carry: DenseMatrix,
}

impl CompensatedSum {
    fn new(rows: usize, cols: usize) -> Self {
        CompensatedSum {
            sum: DenseMatrix::zeros(rows, cols),
            carry: DenseMatrix::zeros(rows, cols),
        }
    }

    fn add(&mut self, m: &DenseMatrix) {
        let carry = self.carry.data_mut();
        for ((s, c), &x) in self.sum.data_mut().iter_mut().zip(carry).zip(m.data()) {
            let t = *s + x;
            if s.abs() >= x.abs() {
                *c += (*s - t) + x;
            } else {
                *c += (x - t) + *s;
            }
            *s = t;
        }
    }

    fn value(&self) -> DenseMatrix {
        let mut out = self.sum.clone();
        out.add_scaled(1.0, &self.carry).expect("same shape");
        out
    }
}

/// FL server: master model, payload queue, Adam state and promotion logic.
#[derive(Debug, Clone)]
pub struct ServerState {
    hp: HyperParams,
    model: MasterModel,
    queue: VecDeque<GradientPayload>,
    accepted_count: usize,
    adam_q: AdamState,
    adam_u: AdamState,
    sum_q_clients: CompensatedSum,
    sum_q_items: CompensatedSum,
    sum_u: CompensatedSum,
    nonce: u64,
    metrics: Vec<MetricsSample>,
    stats: ServerStats,
}

impl ServerState {
    /// Q and U i.i.d. uniform in `[0, INIT_SCALE]` from the `init` stream of `seed`.
    pub fn new(hp: HyperParams, n_items: usize, n_user_features: usize, seed: u64) -> Result<Self> {
        hp.validate()?;
        if n_items == 0 {
            return Err(Error::invalid("the catalog must contain at least one item"));
        }
        let mut rng = seeds::rng(seed, seeds::INIT);
        let k = hp.k;
        let q = DenseMatrix::from_fn(n_items, k, |_, _| rng.random_range(0.0..=INIT_SCALE));
        let u = DenseMatrix::from_fn(n_user_features, k, |_, _| rng.random_range(0.0..=INIT_SCALE));
        let nonce = seeds::substream(seed, seeds::SIGNATURE);
        Ok(ServerState {
            hp,
            model: MasterModel {
                version: 1,
                signature: Signature::derive(nonce, 1),
                q,
                u,
            },
            queue: VecDeque::new(),
            accepted_count: 0,
            adam_q: AdamState::new(n_items, k),
            adam_u: AdamState::new(n_user_features, k),
            sum_q_clients: CompensatedSum::new(n_items, k),
            sum_q_items: CompensatedSum::new(n_items, k),
            sum_u: CompensatedSum::new(n_user_features, k),
            nonce,
            metrics: Vec::new(),
            stats: ServerStats::default(),
        })
    }

    pub fn model(&self) -> &MasterModel {
        &self.model
    }

    pub fn hyperparams(&self) -> &HyperParams {
        &self.hp
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    pub fn accepted_count(&self) -> usize {
        self.accepted_count
    }

    pub fn stats(&self) -> ServerStats {
        self.stats
    }

    /// Metric samples that rode along with aggregated payloads since the last call.
    pub fn take_metrics(&mut self) -> Vec<MetricsSample> {
        std::mem::take(&mut self.metrics)
    }

    fn check(&self, p: &GradientPayload) -> std::result::Result<(), Rejection> {
        if p.signature != self.model.signature {
            return Err(Rejection::Stale);
        }
        let (n_v, k) = self.model.q.shape();
        if p.q_grad.shape() != (n_v, k) {
            return Err(Rejection::Malformed(format!(
                "q_grad is {:?}, expected {:?}",
                p.q_grad.shape(),
                (n_v, k)
            )));
        }
        match (p.source, &p.u_grad) {
            (PayloadSource::ItemServer, Some(_)) => {
                return Err(Rejection::Malformed("item server payload carries u_grad".into()))
            }
            (PayloadSource::Client, None) if self.hp.side_information() => {
                return Err(Rejection::Malformed("client payload is missing u_grad".into()))
            }
            (PayloadSource::Client, Some(ug)) if ug.shape() != self.model.u.shape() => {
                return Err(Rejection::Malformed(format!(
                    "u_grad is {:?}, expected {:?}",
                    ug.shape(),
                    self.model.u.shape()
                )))
            }
            _ => {}
        }
        if !p.is_finite() {
            return Err(Rejection::Malformed("non-finite gradient entry".into()));
        }
        Ok(())
    }

    /// Validates a payload against the current signature and queues it.
    pub fn submit(&mut self, payload: GradientPayload) -> Submission {
        match self.check(&payload) {
            Ok(()) => {
                self.queue.push_back(payload);
                self.stats.accepted += 1;
                Submission::Accepted
            }
            Err(r) => {
                match r {
                    Rejection::Stale => self.stats.rejected_stale += 1,
                    Rejection::Malformed(_) => self.stats.rejected_malformed += 1,
                }
                Submission::Rejected(r)
            }
        }
    }

    /// Drains the queue oldest-first; promotes once Θ payloads are aggregated.
    /// Returns whether a promotion happened.
    pub fn pump(&mut self, cfg: &AdamConfig) -> Result<bool> {
        while let Some(p) = self.queue.pop_front() {
            if p.signature != self.model.signature {
                self.stats.flushed_stale += 1;
                continue;
            }
            match p.source {
                PayloadSource::Client => self.sum_q_clients.add(&p.q_grad),
                PayloadSource::ItemServer => self.sum_q_items.add(&p.q_grad),
            }
            if let Some(ug) = &p.u_grad {
                self.sum_u.add(ug);
            }
            if let Some(m) = p.metrics {
                self.metrics.push(m);
            }
            self.accepted_count += 1;
            if self.accepted_count >= self.hp.theta {
                self.promote(cfg)?;
                return Ok(true);
            }
        }
        Ok(false)
    }

    fn promote(&mut self, cfg: &AdamConfig) -> Result<()> {
        let gq = aggregate_q_grad(&self.sum_q_clients.value(), &self.sum_q_items.value(), &self.model.q, &self.hp)?;
        let gu = aggregate_u_grad(&self.sum_u.value(), &self.model.u, &self.hp)?;
        self.adam_q.step(&mut self.model.q, &gq, cfg)?;
        self.adam_u.step(&mut self.model.u, &gu, cfg)?;
        self.advance_version();
        Ok(())
    }

    fn advance_version(&mut self) {
        self.model.version += 1;
        self.model.signature = Signature::derive(self.nonce, self.model.version);
        self.stats.flushed_stale += self.queue.len() as u64;
        self.queue.clear();
        let (n_v, k) = self.model.q.shape();
        let d_u = self.model.u.rows();
        self.sum_q_clients = CompensatedSum::new(n_v, k);
        self.sum_q_items = CompensatedSum::new(n_v, k);
        self.sum_u = CompensatedSum::new(d_u, k);
        self.accepted_count = 0;
        self.stats.promotions += 1;
    }

    /// Appends a cold-start item factor to Q and promotes a new version so that
    /// clients pick up the enlarged catalog. Pending payloads become stale.
    pub fn insert_item(&mut self, q_row: &[f64]) -> Result<()> {
        if q_row.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("insert_item"));
        }
        self.model.q.push_row(q_row)?;
        self.adam_q.m.push_row(&vec![0.0; q_row.len()])?;
        self.adam_q.v.push_row(&vec![0.0; q_row.len()])?;
        self.advance_version();
        Ok(())
    }
}

/// How a client scores itself against its held-out items.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub k: usize,
    #[serde(default)]
    pub normalization: Normalization,
}

/// One user's device: interactions, features and the private factor p_i.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub row: InteractionRow,
    pub features: FeatureVector,
    pub p: Vec<f64>,
    /// Held-out items used for on-device evaluation.
    pub test_items: HashSet<usize>,
}

impl ClientState {
    pub fn new(row: InteractionRow, features: FeatureVector, k: usize) -> Self {
        ClientState {
            row,
            features,
            p: vec![0.0; k],
            test_items: HashSet::new(),
        }
    }

    pub fn with_test_items(mut self, items: impl IntoIterator<Item = usize>) -> Self {
        self.test_items = items.into_iter().collect();
        self
    }

    /// Grows the local catalog after cold-start items were appended to Q.
    pub fn extend_catalog(&mut self, n_items: usize) -> Result<()> {
        if n_items < self.row.n_items() {
            return Err(Error::invalid("the catalog cannot shrink"));
        }
        self.row = InteractionRow::new(self.row.user_id.clone(), self.row.items().to_vec(), n_items)?;
        Ok(())
    }

    pub fn round(&mut self, model: &MasterModel, hp: &HyperParams) -> Result<GradientPayload> {
        self.round_with(model, &Grams::new(&model.q, &model.u), hp, None)
    }

    /// Refits p_i against the model, then emits the Q (and U) gradient sums
    /// stamped with the model's signature.
    pub fn round_with(
        &mut self,
        model: &MasterModel,
        grams: &Grams,
        hp: &HyperParams,
        eval: Option<&EvalSpec>,
    ) -> Result<GradientPayload> {
        if self.row.n_items() != model.n_items() {
            return Err(Error::DimensionMismatch {
                op: "client_round",
                left: (1, self.row.n_items()),
                right: model.q.shape(),
            });
        }
        self.p = update_p_local_with(&self.row, &self.features, &model.q, &model.u, grams, hp)?;
        let q_grad = client_q_sums(&self.p, &self.row, &model.q, hp)?;
        let u_grad = if hp.side_information() {
            Some(client_u_sums(&self.p, &self.features, &model.u)?)
        } else {
            None
        };
        let metrics = match eval {
            Some(spec) if !self.test_items.is_empty() => {
                let scores = predict_scores(&self.p, &model.q)?;
                let mask: HashSet<usize> = self.row.item_indices().collect();
                evaluate_scores(&scores, &mask, &self.test_items, spec.k, spec.normalization).map(|mut s| {
                    s.round = model.version;
                    s
                })
            }
            _ => None,
        };
        Ok(GradientPayload {
            signature: model.signature,
            source: PayloadSource::Client,
            q_grad,
            u_grad,
            metrics,
        })
    }
}

pub fn client_round(client: &mut ClientState, model: &MasterModel, hp: &HyperParams) -> Result<GradientPayload> {
    client.round(model, hp)
}

/// The item server: item feature rows of Y and the factor V.
#[derive(Debug, Clone)]
pub struct ItemServerState {
    item_features: Vec<FeatureVector>,
    n_features: usize,
    pub v: DenseMatrix,
    pub last_seen_version: u64,
}

impl ItemServerState {
    pub fn new(item_features: Vec<FeatureVector>, n_features: usize, k: usize) -> Result<Self> {
        if let Some(y) = item_features.iter().find(|y| y.dim() != n_features) {
            return Err(Error::DimensionMismatch {
                op: "item_server",
                left: (1, y.dim()),
                right: (1, n_features),
            });
        }
        Ok(ItemServerState {
            item_features,
            n_features,
            v: DenseMatrix::zeros(n_features, k),
            last_seen_version: 0,
        })
    }

    pub fn item_features(&self) -> &[FeatureVector] {
        &self.item_features
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Refits V against the received Q and returns the per-item Σ f(j,e).
    /// Inert (returns `None`) when side information is disabled.
    pub fn round(&mut self, model: &MasterModel, hp: &HyperParams) -> Result<Option<GradientPayload>> {
        if !hp.side_information() {
            return Ok(None);
        }
        if model.version < self.last_seen_version {
            return Err(Error::invalid(format!(
                "model version {} is older than the last seen {}",
                model.version, self.last_seen_version
            )));
        }
        self.refit(model, hp)?;
        let q_grad = item_gradient_sums(&self.item_features, &self.v, &model.q)?;
        Ok(Some(GradientPayload {
            signature: model.signature,
            source: PayloadSource::ItemServer,
            q_grad,
            u_grad: None,
            metrics: None,
        }))
    }

    /// Recomputes V from the current Q without emitting gradients.
    pub fn refit(&mut self, model: &MasterModel, hp: &HyperParams) -> Result<()> {
        self.v = update_v_all(&self.item_features, self.n_features, &model.q, hp)?;
        self.last_seen_version = model.version;
        Ok(())
    }

    /// Registers a new item's features; its factor row is `y* V`.
    pub(crate) fn push_item(&mut self, y: FeatureVector) -> Result<()> {
        if y.dim() != self.n_features {
            return Err(Error::DimensionMismatch {
                op: "push_item",
                left: (1, y.dim()),
                right: (1, self.n_features),
            });
        }
        self.item_features.push(y);
        Ok(())
    }
}

pub fn item_server_round(
    state: &mut ItemServerState,
    model: &MasterModel,
    hp: &HyperParams,
) -> Result<Option<GradientPayload>> {
    state.round(model, hp)
}

/// Payload wire format: header, 16 signature bytes, then Q and U gradients as
/// little-endian f64, each row-major.
pub fn encode_payload(version: u64, p: &GradientPayload) -> Vec<u8> {
    let (n_v, k) = p.q_grad.shape();
    let d_u = p.u_grad.as_ref().map_or(0, DenseMatrix::rows);
    let mats: Vec<&DenseMatrix> = std::iter::once(&p.q_grad).chain(p.u_grad.as_ref()).collect();
    encode(version, p.source.tag(), n_v, d_u, k, &p.signature, &mats)
}

/// The master model in the same layout, as downloaded by clients.
pub fn encode_model(model: &MasterModel) -> Vec<u8> {
    encode(
        model.version,
        MODEL_TAG,
        model.n_items(),
        model.n_user_features(),
        model.k(),
        &model.signature,
        &[&model.q, &model.u],
    )
}

fn encode(version: u64, tag: u8, n_v: usize, d_u: usize, k: usize, sig: &Signature, mats: &[&DenseMatrix]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_BYTES + SIGNATURE_BYTES + 8 * (n_v + d_u) * k);
    out.extend_from_slice(&version.to_le_bytes());
    out.push(tag);
    for dim in [n_v, d_u, k] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&sig.0);
    for m in mats {
        for x in m.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Decoded {
    version: u64,
    tag: u8,
    signature: Signature,
    first: DenseMatrix,
    second: DenseMatrix,
}

fn decode(bytes: &[u8]) -> Result<Decoded> {
    let bad = |m: &str| Error::invalid(format!("malformed payload: {m}"));
    if bytes.len() < HEADER_BYTES + SIGNATURE_BYTES {
        return Err(bad("truncated header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let version = u64::from_le_bytes(bytes[..8].try_into().unwrap());
    let tag = bytes[8];
    let (n_v, d_u, k) = (u32_at(9), u32_at(13), u32_at(17));
    let mut sig = [0u8; SIGNATURE_BYTES];
    sig.copy_from_slice(&bytes[HEADER_BYTES..HEADER_BYTES + SIGNATURE_BYTES]);
    let body = &bytes[HEADER_BYTES + SIGNATURE_BYTES..];
    if body.len() != 8 * (n_v + d_u) * k {
        return Err(bad("body length does not match header"));
    }
    let floats: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let (a, b) = floats.split_at(n_v * k);
    Ok(Decoded {
        version,
        tag,
        signature: Signature(sig),
        first: DenseMatrix::from_vec(n_v, k, a.to_vec())?,
        second: DenseMatrix::from_vec(d_u, k, b.to_vec())?,
    })
}

/// Returns the model version from the header and the payload. A client payload
/// with `d_u = 0` decodes with `u_grad = None`.
pub fn decode_payload(bytes: &[u8]) -> Result<(u64, GradientPayload)> {
    let d = decode(bytes)?;
    let source = PayloadSource::from_tag(d.tag).ok_or_else(|| Error::invalid(format!("unknown source tag {}", d.tag)))?;
    let u_grad = (d.second.rows() > 0).then_some(d.second);
    Ok((
        d.version,
        GradientPayload {
            signature: d.signature,
            source,
            q_grad: d.first,
            u_grad,
            metrics: None,
        },
    ))
}

pub fn decode_model(bytes: &[u8]) -> Result<MasterModel> {
    let d = decode(bytes)?;
    if d.tag != MODEL_TAG {
        return Err(Error::invalid(format!("expected a model, found source tag {}", d.tag)));
    }
    Ok(MasterModel {
        version: d.version,
        signature: d.signature,
        q: d.first,
        u: d.second,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub rounds: usize,
    /// Fraction of clients sampled (without replacement) each round, in (0, 1].
    pub participation_fraction: f64,
    pub seed: u64,
    pub eval: Option<EvalSpec>,
    /// Record the full objective after every round (needs every party's data).
    pub monitor_cost: bool,
    /// Compute client rounds one after another instead of in parallel.
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub version: u64,
    pub promoted: bool,
    pub participants: usize,
    pub cost: Option<f64>,
    pub metrics: Option<MetricsSample>,
    pub upload_bytes: usize,
    pub download_bytes: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub initial_cost: Option<f64>,
    pub records: Vec<RoundRecord>,
}

impl Trace {
    /// One metric per round; rounds without a sample repeat nothing and are skipped.
    pub fn metric_series(&self, name: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| r.metrics.as_ref().and_then(|m| m.get(name)))
            .collect()
    }

    pub fn cost_series(&self) -> Vec<f64> {
        self.records.iter().filter_map(|r| r.cost).collect()
    }

    pub fn promotions(&self) -> usize {
        self.records.iter().filter(|r| r.promoted).count()
    }
}

/// Drives clients, the item server and the FL server through repeated rounds.
pub struct Simulation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub item_server: ItemServerState,
    hp: HyperParams,
    adam: AdamConfig,
    cfg: SimulationConfig,
    participation: ChaCha8Rng,
    round: usize,
}

impl Simulation {
    pub fn new(
        clients: Vec<ClientState>,
        item_server: ItemServerState,
        n_user_features: usize,
        hp: HyperParams,
        adam: AdamConfig,
        cfg: SimulationConfig,
    ) -> Result<Self> {
        adam.validate()?;
        if !(cfg.participation_fraction > 0.0 && cfg.participation_fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "participation fraction must lie in (0, 1] (got {})",
                cfg.participation_fraction
            )));
        }
        let n_items = item_server.item_features().len();
        let server = ServerState::new(hp, n_items, n_user_features, cfg.seed)?;
        Ok(Simulation {
            server,
            clients,
            item_server,
            hp,
            adam,
            participation: seeds::rng(cfg.seed, seeds::PARTICIPATION),
            cfg,
            round: 0,
        })
    }

    pub fn hyperparams(&self) -> &HyperParams {
        &self.hp
    }

    pub fn participants_per_round(&self) -> usize {
        let n = self.clients.len();
        ((self.cfg.participation_fraction * n as f64).ceil() as usize).clamp(1.min(n), n)
    }

    /// Objective at the current master model with every p_i and V refit to it.
    pub fn profiled_cost(&self) -> Result<f64> {
        let model = self.server.model();
        let grams = Grams::new(&model.q, &model.u);
        let p_rows: Vec<Vec<f64>> = self
            .clients
            .par_iter()
            .map(|c| update_p_local_with(&c.row, &c.features, &model.q, &model.u, &grams, &self.hp))
            .collect::<Result<_>>()?;
        let k = self.hp.k;
        let p = if p_rows.is_empty() {
            DenseMatrix::zeros(0, k)
        } else {
            DenseMatrix::from_rows(&p_rows)?
        };
        let rows: Vec<InteractionRow> = self.clients.iter().map(|c| c.row.clone()).collect();
        if self.hp.side_information() {
            let v = update_v_all(self.item_server.item_features(), self.item_server.n_features(), &model.q, &self.hp)?;
            let x: Vec<FeatureVector> = self.clients.iter().map(|c| c.features.clone()).collect();
            cost_j(&p, &model.q, &model.u, &v, &rows, &x, self.item_server.item_features(), &self.hp)
        } else {
            let x = vec![FeatureVector::zeros(model.u.rows()); rows.len()];
            let y = vec![FeatureVector::zeros(0); model.n_items()];
            cost_j(&p, &model.q, &model.u, &DenseMatrix::zeros(0, k), &rows, &x, &y, &self.hp)
        }
    }

    /// One round: sample clients, collect payloads against the current model,
    /// submit them (item server first) and pump the server.
    pub fn step(&mut self) -> Result<RoundRecord> {
        self.round += 1;
        let n = self.clients.len();
        let m = self.participants_per_round();
        let picked: Vec<usize> = index::sample(&mut self.participation, n, m).into_vec();

        let model = self.server.model().clone();
        let grams = Grams::new(&model.q, &model.u);
        let hp = self.hp;
        let eval = self.cfg.eval;

        let mut payloads = Vec::with_capacity(m + 1);
        if let Some(p) = self.item_server.round(&model, &hp)? {
            payloads.push(p);
        }
        if self.cfg.deterministic {
            for &i in &picked {
                payloads.push(self.clients[i].round_with(&model, &grams, &hp, eval.as_ref())?);
            }
        } else {
            let mut order = vec![usize::MAX; n];
            for (slot, &i) in picked.iter().enumerate() {
                order[i] = slot;
            }
            let mut computed: Vec<(usize, GradientPayload)> = self
                .clients
                .par_iter_mut()
                .enumerate()
                .filter(|(i, _)| order[*i] != usize::MAX)
                .map(|(i, c)| Ok((order[i], c.round_with(&model, &grams, &hp, eval.as_ref())?)))
                .collect::<Result<_>>()?;
            computed.sort_by_key(|(slot, _)| *slot);
            payloads.extend(computed.into_iter().map(|(_, p)| p));
        }

        let upload_bytes = payloads.iter().map(encoded_len).sum();
        let download_bytes = m * (HEADER_BYTES + SIGNATURE_BYTES + 8 * (model.n_items() + model.n_user_features()) * model.k());
        for p in payloads {
            self.server.submit(p);
        }
        let promoted = self.server.pump(&self.adam)?;
        let metrics = MetricsSample::merge(&self.server.take_metrics(), model.version);
        let cost = if self.cfg.monitor_cost {
            Some(self.profiled_cost()?)
        } else {
            None
        };
        Ok(RoundRecord {
            round: self.round,
            version: self.server.model().version,
            promoted,
            participants: m,
            cost,
            metrics,
            upload_bytes,
            download_bytes,
        })
    }

    pub fn run(&mut self) -> Result<Trace> {
        let mut trace = Trace {
            initial_cost: if self.cfg.monitor_cost {
                Some(self.profiled_cost()?)
            } else {
                None
            },
            records: Vec::with_capacity(self.cfg.rounds),
        };
        for _ in 0..self.cfg.rounds {
            trace.records.push(self.step()?);
        }
        Ok(trace)
    }
}

fn encoded_len(p: &GradientPayload) -> usize {
    let d_u = p.u_grad.as_ref().map_or(0, DenseMatrix::rows);
    HEADER_BYTES + SIGNATURE_BYTES + 8 * (p.q_grad.rows() + d_u) * p.q_grad.cols()
}

/// Runs a full simulation and returns the trace with the final simulator state.
#[allow(clippy::too_many_arguments)]
pub fn simulate(
    clients: Vec<ClientState>,
    item_server: ItemServerState,
    n_user_features: usize,
    rounds: usize,
    participation_fraction: f64,
    seed: u64,
    hp: HyperParams,
    adam: AdamConfig,
) -> Result<(Trace, Simulation)> {
    let cfg = SimulationConfig {
        rounds,
        participation_fraction,
        seed,
        eval: None,
        monitor_cost: false,
        deterministic: true,
    };
    let mut sim = Simulation::new(clients, item_server, n_user_features, hp, adam, cfg)?;
    let trace = sim.run()?;
    Ok((trace, sim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn hp(theta: usize) -> HyperParams {
        HyperParams {
            k: 2,
            alpha: 2.0,
            lambda1: 0.5,
            lambda2: 0.1,
            theta,
        }
    }

    fn client_payload(server: &ServerState) -> GradientPayload {
        let m = server.model();
        GradientPayload {
            signature: m.signature,
            source: PayloadSource::Client,
            q_grad: DenseMatrix::from_fn(m.q.rows(), m.k(), |i, j| (i + j) as f64 * 0.01),
            u_grad: Some(DenseMatrix::from_fn(m.u.rows(), m.k(), |i, j| (i * j) as f64 * 0.01)),
            metrics: None,
        }
    }

    #[test]
    fn init_is_seeded_and_in_range() {
        let h = HyperParams { k: 25, ..hp(3) };
        let a = ServerState::new(h, 3064, 40, 9).unwrap();
        let b = ServerState::new(h, 3064, 40, 9).unwrap();
        assert_eq!(a.model(), b.model());
        assert_eq!(a.model().q.shape(), (3064, 25));
        assert_eq!(a.model().version, 1);
        assert!(a.model().q.data().iter().chain(a.model().u.data()).all(|x| (0.0..=0.1).contains(x)));
        let c = ServerState::new(h, 3064, 40, 10).unwrap();
        assert_ne!(a.model().q, c.model().q);
    }

    #[test]
    fn submit_accepts_current_and_rejects_stale_or_malformed() {
        let mut s = ServerState::new(hp(1), 4, 3, 0).unwrap();
        let old = client_payload(&s);
        assert_eq!(s.submit(old.clone()), Submission::Accepted);
        assert_eq!(s.queue_len(), 1);
        assert!(s.pump(&AdamConfig::default()).unwrap());
        assert_eq!(s.submit(old), Submission::Rejected(Rejection::Stale));
        assert_eq!(s.queue_len(), 0);

        let mut nan = client_payload(&s);
        nan.q_grad[(0, 0)] = f64::NAN;
        assert!(matches!(s.submit(nan), Submission::Rejected(Rejection::Malformed(_))));
        let mut wrong = client_payload(&s);
        wrong.q_grad = DenseMatrix::zeros(3, 2);
        assert!(matches!(s.submit(wrong), Submission::Rejected(Rejection::Malformed(_))));
        let mut item_with_u = client_payload(&s);
        item_with_u.source = PayloadSource::ItemServer;
        assert!(matches!(s.submit(item_with_u), Submission::Rejected(Rejection::Malformed(_))));
        assert_eq!(s.queue_len(), 0);
        assert_eq!(s.stats().rejected_stale, 1);
        assert_eq!(s.stats().rejected_malformed, 3);
    }

    #[test]
    fn threshold_semantics() {
        let mut s = ServerState::new(hp(2), 4, 3, 0).unwrap();
        let sig = s.model().signature;
        s.submit(client_payload(&s));
        assert!(!s.pump(&AdamConfig::default()).unwrap());
        assert_eq!(s.accepted_count(), 1);
        s.submit(client_payload(&s));
        s.submit(client_payload(&s));
        assert!(s.pump(&AdamConfig::default()).unwrap());
        assert_eq!(s.model().version, 2);
        assert_ne!(s.model().signature, sig);
        assert_eq!(s.queue_len(), 0);
        assert_eq!(s.stats().flushed_stale, 1);
        assert_eq!(s.accepted_count(), 0);
    }

    #[test]
    fn zero_client_sends_zero_payload() {
        let s = ServerState::new(hp(1), 5, 3, 0).unwrap();
        let mut c = ClientState::new(
            InteractionRow::new("u", vec![], 5).unwrap(),
            FeatureVector::zeros(3),
            2,
        );
        let p = c.round(s.model(), &hp(1)).unwrap();
        assert_eq!(p.signature, s.model().signature);
        assert_eq!(p.q_grad.max_abs(), 0.0);
        assert_eq!(p.u_grad.unwrap().max_abs(), 0.0);
    }

    #[test]
    fn item_server_examples() {
        let h = HyperParams { k: 1, lambda2: 0.0, lambda1: 1.0, ..hp(1) };
        let mut srv = ServerState::new(h, 1, 0, 0).unwrap();
        srv.model.q = DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut items = ItemServerState::new(vec![FeatureVector::from_dense(&[2.0])], 1, 1).unwrap();
        let p = items.round(srv.model(), &h).unwrap().unwrap();
        assert!((items.v[(0, 0)] - 2.0).abs() < 1e-12);
        assert!(p.q_grad.max_abs() < 1e-12);
        assert!(p.u_grad.is_none());

        let mut zero = ItemServerState::new(vec![FeatureVector::zeros(3); 1], 3, 1).unwrap();
        let p = zero.round(srv.model(), &h).unwrap().unwrap();
        assert_eq!(zero.v.max_abs(), 0.0);
        assert_eq!(p.q_grad.max_abs(), 0.0);

        let off = HyperParams { lambda1: 0.0, ..h };
        assert!(zero.round(srv.model(), &off).unwrap().is_none());
    }

    #[test]
    fn insert_item_grows_q_and_promotes() {
        let mut s = ServerState::new(hp(5), 3, 2, 1).unwrap();
        let before = s.model().clone();
        s.submit(client_payload(&s));
        s.insert_item(&[0.5, -0.5]).unwrap();
        let after = s.model();
        assert_eq!(after.q.rows(), 4);
        assert_eq!(&after.q.data()[..6], before.q.data());
        assert_eq!(after.version, 2);
        assert_ne!(after.signature, before.signature);
        assert_eq!(s.queue_len(), 0);
        // the next promotion works at the new size
        let h = HyperParams { theta: 1, ..hp(1) };
        s.hp = h;
        s.submit(client_payload(&s));
        assert!(s.pump(&AdamConfig::default()).unwrap());
    }

    #[test]
    fn wire_format_round_trip_and_size() {
        let s = ServerState::new(hp(1), 7, 3, 0).unwrap();
        let p = client_payload(&s);
        let bytes = encode_payload(1, &p);
        assert_eq!(bytes.len(), 21 + 16 + 8 * (7 + 3) * 2);
        let (version, back) = decode_payload(&bytes).unwrap();
        assert_eq!(version, 1);
        assert_eq!(back, p);
        let model = decode_model(&encode_model(s.model())).unwrap();
        assert_eq!(&model, s.model());
        assert!(decode_payload(&bytes[..30]).is_err());
    }

    #[test]
    fn full_participation_promotes_every_round() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n_items = 6;
        let clients: Vec<ClientState> = (0..5)
            .map(|i| {
                let items = (0..n_items).filter(|_| rng.random_bool(0.4)).map(|j| (j, 1.0)).collect();
                ClientState::new(
                    InteractionRow::new(format!("{i}"), items, n_items).unwrap(),
                    FeatureVector::from_dense(&[1.0, 0.0, 2.0]),
                    2,
                )
            })
            .collect();
        let items = ItemServerState::new(vec![FeatureVector::from_dense(&[0.5, 1.0]); n_items], 2, 2).unwrap();
        let (trace, sim) = simulate(clients, items, 3, 4, 1.0, 3, hp(6), AdamConfig::default()).unwrap();
        assert_eq!(trace.promotions(), 4);
        assert_eq!(sim.server.model().version, 5);
    }
}
