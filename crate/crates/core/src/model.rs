//! Multi-view factorization core.
//!
//! The interaction matrix R (users × items), user features X and item features Y
//! are factorized jointly as `R ≈ P Qᵀ`, `X ≈ P Uᵀ`, `Y ≈ Q Vᵀ` by minimizing
//!
//! ```text
//! J = Σ_ij c_ij (r_ij − p_i·q_j)²
//!   + λ₁ (Σ_i,d (x_id − p_i·u_d)² + Σ_j,e (y_je − q_j·v_e)²)
//!   + λ₂ (‖P‖² + ‖Q‖² + ‖U‖² + ‖V‖²)
//! ```
//!
//! with confidence `c_ij = 1 + α r_ij`. Unobserved pairs count as `r = 0, c = 1`.
//!
//! Clients own one row of P and one row of X and only ever emit per-item and
//! per-feature gradient sums; the item server owns Y and V and emits per-item
//! sums. The server-side aggregates here turn those sums into `∂J/∂Q` and `∂J/∂U`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MetricsSample;
use crate::federation::Signature;
use crate::numerics::{axpy, dot, solve_spd_row, Cholesky, DenseMatrix};

/// Smallest ridge applied to local solves once a configuration is loaded.
pub const LAMBDA2_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Latent factor count K.
    pub k: usize,
    /// Confidence weight α for implicit feedback.
    pub alpha: f64,
    /// Strength of the side-information views, in [0, 1]. Zero disables them.
    pub lambda1: f64,
    /// L2 regularization.
    pub lambda2: f64,
    /// Accepted payloads required before the server promotes a new model.
    pub theta: usize,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub(crate) fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.k < 1 {
            out.push("k must be at least 1".to_string());
        }
        if !(self.alpha >= 0.0) {
            out.push(format!("alpha must be >= 0 (got {})", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.lambda1) {
            out.push(format!("lambda1 must lie in [0, 1] (got {})", self.lambda1));
        }
        if !(self.lambda2 >= 0.0) {
            out.push(format!("lambda2 must be >= 0 (got {})", self.lambda2));
        }
        if self.theta < 1 {
            out.push("theta must be at least 1".to_string());
        }
        out
    }

    /// Raises λ₂ to [`LAMBDA2_FLOOR`] so every local normal matrix stays positive definite.
    pub fn with_lambda2_floor(mut self) -> Self {
        self.lambda2 = self.lambda2.max(LAMBDA2_FLOOR);
        self
    }

    pub fn side_information(&self) -> bool {
        self.lambda1 > 0.0
    }
}

/// One user's observed interactions. Items not listed have `r = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRow {
    pub user_id: String,
    items: Vec<(usize, f64)>,
    n_items: usize,
}

impl InteractionRow {
    /// Items are sorted by index; duplicates and out-of-range indices are rejected.
    pub fn new(user_id: impl Into<String>, mut items: Vec<(usize, f64)>, n_items: usize) -> Result<Self> {
        items.sort_by_key(|&(j, _)| j);
        for w in items.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(format!("duplicate item index {}", w[0].0)));
            }
        }
        if let Some(&(j, _)) = items.iter().find(|&&(j, _)| j >= n_items) {
            return Err(Error::invalid(format!("item index {j} outside catalog of {n_items}")));
        }
        if let Some(&(j, r)) = items.iter().find(|&&(_, r)| !(r >= 0.0) || !r.is_finite()) {
            return Err(Error::invalid(format!("item {j} has invalid value {r}")));
        }
        Ok(InteractionRow {
            user_id: user_id.into(),
            items,
            n_items,
        })
    }

    pub fn items(&self) -> &[(usize, f64)] {
        &self.items
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn item_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.items.iter().map(|&(j, _)| j)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Full-length dense row, zeros for unobserved items.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_items];
        for &(j, r) in &self.items {
            out[j] = r;
        }
        out
    }
}

/// Sparse feature row of X (dimension D_u) or Y (dimension D_v).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    dim: usize,
    entries: Vec<(usize, f64)>,
}

impl FeatureVector {
    pub fn zeros(dim: usize) -> Self {
        FeatureVector {
            dim,
            entries: Vec::new(),
        }
    }

    pub fn new(dim: usize, mut entries: Vec<(usize, f64)>) -> Result<Self> {
        entries.sort_by_key(|&(d, _)| d);
        for w in entries.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(Error::invalid(format!("duplicate feature index {}", w[0].0)));
            }
        }
        if let Some(&(d, _)) = entries.iter().find(|&&(d, _)| d >= dim) {
            return Err(Error::invalid(format!("feature index {d} outside dimension {dim}")));
        }
        if entries.iter().any(|&(_, x)| !x.is_finite()) {
            return Err(Error::NonFinite("feature vector"));
        }
        Ok(FeatureVector { dim, entries })
    }

    /// Keeps the non-zero entries of a dense row.
    pub fn from_dense(values: &[f64]) -> Self {
        FeatureVector {
            dim: values.len(),
            entries: values
                .iter()
                .enumerate()
                .filter(|(_, &x)| x != 0.0)
                .map(|(d, &x)| (d, x))
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &(d, x) in &self.entries {
            out[d] = x;
        }
        out
    }

    pub fn scaled(&self, a: f64) -> Self {
        FeatureVector {
            dim: self.dim,
            entries: self.entries.iter().map(|&(d, x)| (d, a * x)).collect(),
        }
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|&(_, x)| x).sum()
    }

    /// `self · m` for a matrix with `dim` rows.
    pub fn project(&self, m: &DenseMatrix) -> Result<Vec<f64>> {
        if m.rows() != self.dim {
            return Err(Error::DimensionMismatch {
                op: "project",
                left: (1, self.dim),
                right: m.shape(),
            });
        }
        let mut out = vec![0.0; m.cols()];
        for &(d, x) in &self.entries {
            axpy(x, m.row(d), &mut out);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadSource {
    Client,
    ItemServer,
}

impl PayloadSource {
    pub fn tag(self) -> u8 {
        match self {
            PayloadSource::Client => 0,
            PayloadSource::ItemServer => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(PayloadSource::Client),
            1 => Some(PayloadSource::ItemServer),
            _ => None,
        }
    }
}

/// Gradient contributions from one party for one model version.
///
/// `q_grad` row j holds Σ f(j,·) for this contributor; `u_grad` row d holds
/// Σ f(i,d) (clients only). The server applies the −2 and λ factors.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPayload {
    pub signature: Signature,
    pub source: PayloadSource,
    pub q_grad: DenseMatrix,
    pub u_grad: Option<DenseMatrix>,
    pub metrics: Option<MetricsSample>,
}

impl GradientPayload {
    pub fn is_finite(&self) -> bool {
        self.q_grad.is_finite() && self.u_grad.as_ref().is_none_or(DenseMatrix::is_finite)
    }
}

pub fn confidence(r: f64, alpha: f64) -> f64 {
    1.0 + alpha * r
}

/// Full objective, summing over every (user, item) pair. Used by oracles and
/// the training monitor; no federated party can evaluate it.
#[allow(clippy::too_many_arguments)]
pub fn cost_j(
    p: &DenseMatrix,
    q: &DenseMatrix,
    u: &DenseMatrix,
    v: &DenseMatrix,
    interactions: &[InteractionRow],
    user_features: &[FeatureVector],
    item_features: &[FeatureVector],
    hp: &HyperParams,
) -> Result<f64> {
    let k = q.cols();
    let n_users = interactions.len();
    let n_items = q.rows();
    let check = |op: &'static str, m: &DenseMatrix, rows: usize| -> Result<()> {
        if m.rows() != rows || m.cols() != k {
            return Err(Error::DimensionMismatch {
                op,
                left: m.shape(),
                right: (rows, k),
            });
        }
        Ok(())
    };
    check("cost_j P", p, n_users)?;
    check("cost_j U", u, u.rows())?;
    check("cost_j V", v, v.rows())?;
    if user_features.len() != n_users || item_features.len() != n_items {
        return Err(Error::DimensionMismatch {
            op: "cost_j features",
            left: (user_features.len(), item_features.len()),
            right: (n_users, n_items),
        });
    }
    if let Some(row) = interactions.iter().find(|r| r.n_items() != n_items) {
        return Err(Error::DimensionMismatch {
            op: "cost_j interactions",
            left: (1, row.n_items()),
            right: q.shape(),
        });
    }
    if user_features.iter().any(|x| x.dim() != u.rows())
        || item_features.iter().any(|y| y.dim() != v.rows())
    {
        return Err(Error::DimensionMismatch {
            op: "cost_j feature dims",
            left: u.shape(),
            right: v.shape(),
        });
    }

    let qtq = q.gram();
    let mut interaction_term = 0.0;
    for (i, row) in interactions.iter().enumerate() {
        let pi = p.row(i);
        // Σ_j (p·q_j)² over all items, then swap in the observed terms
        let qp = qtq.mul_vec(pi)?;
        interaction_term += dot(pi, &qp);
        for &(j, r) in row.items() {
            let s = dot(pi, q.row(j));
            interaction_term += confidence(r, hp.alpha) * (r - s).powi(2) - s * s;
        }
    }

    let mut side_term = 0.0;
    if hp.lambda1 != 0.0 {
        for (i, x) in user_features.iter().enumerate() {
            side_term += dense_residual_sq(p.row(i), x, u);
        }
        for (j, y) in item_features.iter().enumerate() {
            side_term += dense_residual_sq(q.row(j), y, v);
        }
    }

    let reg = p.frobenius_sq() + q.frobenius_sq() + u.frobenius_sq() + v.frobenius_sq();
    Ok(interaction_term + hp.lambda1 * side_term + hp.lambda2 * reg)
}

/// Σ_d (x_d − f·m_d)² over every feature d, zeros included.
fn dense_residual_sq(factor: &[f64], x: &FeatureVector, m: &DenseMatrix) -> f64 {
    let dense = x.to_dense();
    dense
        .iter()
        .zip(m.row_iter())
        .map(|(xd, md)| (xd - dot(factor, md)).powi(2))
        .sum()
}

/// f(j,i) = c_ij (r_ij − p_i·q_j) p_i
pub fn client_q_grad(p_i: &[f64], q_j: &[f64], r_ij: f64, hp: &HyperParams) -> Vec<f64> {
    let coef = confidence(r_ij, hp.alpha) * (r_ij - dot(p_i, q_j));
    p_i.iter().map(|x| coef * x).collect()
}

/// f(i,d) = (x_id − p_i·u_d) p_i
pub fn client_u_grad(p_i: &[f64], u_d: &[f64], x_val: f64) -> Vec<f64> {
    let coef = x_val - dot(p_i, u_d);
    p_i.iter().map(|x| coef * x).collect()
}

/// f(j,e) = (y_je − v_e·q_j) v_e
pub fn item_server_q_grad(v_e: &[f64], q_j: &[f64], y_val: f64) -> Vec<f64> {
    let coef = y_val - dot(v_e, q_j);
    v_e.iter().map(|x| coef * x).collect()
}

/// Per-item sums of f(j,i) for one client, implicit zeros included.
///
/// Equivalent to calling [`client_q_grad`] for every item without
/// materializing the dense interaction row.
pub fn client_q_sums(p_i: &[f64], row: &InteractionRow, q: &DenseMatrix, hp: &HyperParams) -> Result<DenseMatrix> {
    let k = p_i.len();
    if q.cols() != k || row.n_items() != q.rows() {
        return Err(Error::DimensionMismatch {
            op: "client_q_sums",
            left: (row.n_items(), k),
            right: q.shape(),
        });
    }
    let mut q_sum = DenseMatrix::zeros(q.rows(), k);
    for j in 0..q.rows() {
        let coef = -dot(p_i, q.row(j));
        axpy(coef, p_i, q_sum.row_mut(j));
    }
    for &(j, r) in row.items() {
        let g = client_q_grad(p_i, q.row(j), r, hp);
        q_sum.row_mut(j).copy_from_slice(&g);
    }
    Ok(q_sum)
}

/// Per-feature sums of f(i,d) for one client, zero features included.
pub fn client_u_sums(p_i: &[f64], x_i: &FeatureVector, u: &DenseMatrix) -> Result<DenseMatrix> {
    let k = p_i.len();
    if u.cols() != k || x_i.dim() != u.rows() {
        return Err(Error::DimensionMismatch {
            op: "client_u_sums",
            left: (x_i.dim(), k),
            right: u.shape(),
        });
    }
    let mut u_sum = DenseMatrix::zeros(u.rows(), k);
    let x = x_i.to_dense();
    for (d, &xd) in x.iter().enumerate() {
        let coef = xd - dot(p_i, u.row(d));
        axpy(coef, p_i, u_sum.row_mut(d));
    }
    Ok(u_sum)
}

/// Per-item sums over features of f(j,e), as the item server uploads them.
pub fn item_gradient_sums(
    item_features: &[FeatureVector],
    v: &DenseMatrix,
    q: &DenseMatrix,
) -> Result<DenseMatrix> {
    if item_features.len() != q.rows() || v.cols() != q.cols() {
        return Err(Error::DimensionMismatch {
            op: "item_gradient_sums",
            left: (item_features.len(), v.cols()),
            right: q.shape(),
        });
    }
    let mut out = DenseMatrix::zeros(q.rows(), q.cols());
    for (j, y) in item_features.iter().enumerate() {
        if y.dim() != v.rows() {
            return Err(Error::DimensionMismatch {
                op: "item_gradient_sums",
                left: (1, y.dim()),
                right: v.shape(),
            });
        }
        let qj = q.row(j).to_vec();
        let dense = y.to_dense();
        let acc = out.row_mut(j);
        for (e, &ye) in dense.iter().enumerate() {
            let ve = v.row(e);
            axpy(ye - dot(ve, &qj), ve, acc);
        }
    }
    Ok(out)
}

/// ∂J/∂Q = −2 Σ_i f(j,i) − 2λ₁ Σ_e f(j,e) + 2λ₂ q_j
pub fn aggregate_q_grad(
    client_sums: &DenseMatrix,
    item_sums: &DenseMatrix,
    q: &DenseMatrix,
    hp: &HyperParams,
) -> Result<DenseMatrix> {
    for m in [client_sums, item_sums] {
        if m.shape() != q.shape() {
            return Err(Error::DimensionMismatch {
                op: "aggregate_q_grad",
                left: m.shape(),
                right: q.shape(),
            });
        }
    }
    let mut g = DenseMatrix::zeros(q.rows(), q.cols());
    g.add_scaled(-2.0, client_sums)?;
    if hp.lambda1 != 0.0 {
        g.add_scaled(-2.0 * hp.lambda1, item_sums)?;
    }
    g.add_scaled(2.0 * hp.lambda2, q)?;
    Ok(g)
}

/// ∂J/∂U = −2λ₁ Σ_i f(i,d) + 2λ₂ u_d
pub fn aggregate_u_grad(client_sums: &DenseMatrix, u: &DenseMatrix, hp: &HyperParams) -> Result<DenseMatrix> {
    if client_sums.shape() != u.shape() {
        return Err(Error::DimensionMismatch {
            op: "aggregate_u_grad",
            left: client_sums.shape(),
            right: u.shape(),
        });
    }
    let mut g = DenseMatrix::zeros(u.rows(), u.cols());
    if hp.lambda1 != 0.0 {
        g.add_scaled(-2.0 * hp.lambda1, client_sums)?;
    }
    g.add_scaled(2.0 * hp.lambda2, u)?;
    Ok(g)
}

/// QᵀQ and UᵀU for one model version, shared by every client solve against it.
#[derive(Debug, Clone)]
pub struct Grams {
    pub qtq: DenseMatrix,
    pub utu: DenseMatrix,
}

impl Grams {
    pub fn new(q: &DenseMatrix, u: &DenseMatrix) -> Self {
        Grams {
            qtq: q.gram(),
            utu: u.gram(),
        }
    }
}

/// Closed-form user factor:
/// `p_i = (Σ_j c_ij r_ij q_j + λ₁ x_i U)(QᵀC⁽ⁱ⁾Q + λ₁UᵀU + λ₂I)⁻¹`.
pub fn update_p_local(
    row: &InteractionRow,
    x_i: &FeatureVector,
    q: &DenseMatrix,
    u: &DenseMatrix,
    hp: &HyperParams,
) -> Result<Vec<f64>> {
    update_p_local_with(row, x_i, q, u, &Grams::new(q, u), hp)
}

/// [`update_p_local`] with precomputed Gram matrices. `QᵀC⁽ⁱ⁾Q` is assembled as
/// `QᵀQ + Σ_observed (c_ij − 1) q_jᵀq_j`.
pub fn update_p_local_with(
    row: &InteractionRow,
    x_i: &FeatureVector,
    q: &DenseMatrix,
    u: &DenseMatrix,
    grams: &Grams,
    hp: &HyperParams,
) -> Result<Vec<f64>> {
    let k = q.cols();
    let side = hp.lambda1 != 0.0;
    if row.n_items() != q.rows() || (side && (x_i.dim() != u.rows() || u.cols() != k)) {
        return Err(Error::DimensionMismatch {
            op: "update_p_local",
            left: (row.n_items(), x_i.dim()),
            right: (q.rows(), u.rows()),
        });
    }
    let mut a = grams.qtq.clone();
    let mut b = vec![0.0; k];
    for &(j, r) in row.items() {
        let c = confidence(r, hp.alpha);
        let qj = q.row(j);
        for s in 0..k {
            let w = (c - 1.0) * qj[s];
            if w != 0.0 {
                for t in 0..k {
                    a[(s, t)] += w * qj[t];
                }
            }
        }
        axpy(c * r, qj, &mut b);
    }
    if side {
        a.add_scaled(hp.lambda1, &grams.utu)?;
        let xu = x_i.project(u)?;
        axpy(hp.lambda1, &xu, &mut b);
    }
    a.add_diagonal(hp.lambda2);
    solve_spd_row(&a, &b)
}

fn item_normal_matrix(q: &DenseMatrix, hp: &HyperParams) -> Result<DenseMatrix> {
    if !hp.side_information() {
        return Err(Error::SideInformationDisabled);
    }
    let mut a = q.gram();
    a.add_diagonal(hp.lambda2 / hp.lambda1);
    Ok(a)
}

/// Closed-form item-feature factor for one feature column of Y:
/// `v_e = (y_e Q)(QᵀQ + (λ₂/λ₁) I)⁻¹`, where `y_e` has one entry per item.
pub fn update_v_local(y_column: &FeatureVector, q: &DenseMatrix, hp: &HyperParams) -> Result<Vec<f64>> {
    let a = item_normal_matrix(q, hp)?;
    let b = y_column.project(q)?;
    solve_spd_row(&a, &b)
}

/// All rows of V at once from the item rows of Y; one factorization shared by every column.
pub fn update_v_all(item_features: &[FeatureVector], n_features: usize, q: &DenseMatrix, hp: &HyperParams) -> Result<DenseMatrix> {
    let a = item_normal_matrix(q, hp)?;
    if item_features.len() != q.rows() {
        return Err(Error::DimensionMismatch {
            op: "update_v_all",
            left: (item_features.len(), n_features),
            right: q.shape(),
        });
    }
    // Yᵀ Q, one row per feature
    let mut v = DenseMatrix::zeros(n_features, q.cols());
    for (j, y) in item_features.iter().enumerate() {
        if y.dim() != n_features {
            return Err(Error::DimensionMismatch {
                op: "update_v_all",
                left: (1, y.dim()),
                right: (1, n_features),
            });
        }
        let qj = q.row(j);
        for &(e, val) in y.entries() {
            axpy(val, qj, v.row_mut(e));
        }
    }
    let chol = Cholesky::factor(&a)?;
    for e in 0..n_features {
        chol.solve_in_place(v.row_mut(e));
    }
    if !v.is_finite() {
        return Err(Error::NonFinite("update_v_all"));
    }
    Ok(v)
}

/// Scores for every item: `p_i Qᵀ`.
pub fn predict_scores(p_i: &[f64], q: &DenseMatrix) -> Result<Vec<f64>> {
    q.mul_vec(p_i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{fd_grad, naive_cost, random_instance, Instance};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hp(alpha: f64, lambda1: f64, lambda2: f64) -> HyperParams {
        HyperParams {
            k: 1,
            alpha,
            lambda1,
            lambda2,
            theta: 1,
        }
    }

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(0.0, 40.0), 1.0);
        assert_eq!(confidence(1.0, 0.0), 1.0);
        assert_eq!(confidence(1.0, 4.0), 5.0);
    }

    #[test]
    fn hyperparams_validation_lists_every_problem() {
        let bad = HyperParams {
            k: 0,
            alpha: -1.0,
            lambda1: 1.5,
            lambda2: -0.1,
            theta: 0,
        };
        match bad.validate() {
            Err(Error::Config(list)) => assert_eq!(list.len(), 5),
            other => panic!("{other:?}"),
        }
        assert_eq!(hp(0.0, 0.0, 0.0).with_lambda2_floor().lambda2, LAMBDA2_FLOOR);
    }

    #[test]
    fn rows_reject_duplicates_and_out_of_range() {
        assert!(InteractionRow::new("u", vec![(1, 1.0), (1, 1.0)], 3).is_err());
        assert!(InteractionRow::new("u", vec![(3, 1.0)], 3).is_err());
        assert!(FeatureVector::new(2, vec![(2, 1.0)]).is_err());
    }

    #[test]
    fn cost_zero_case() {
        let rows = vec![InteractionRow::new("u", vec![], 2).unwrap()];
        let z = |r, c| DenseMatrix::zeros(r, c);
        let j = cost_j(
            &z(1, 2),
            &z(2, 2),
            &z(3, 2),
            &z(2, 2),
            &rows,
            &[FeatureVector::zeros(3)],
            &[FeatureVector::zeros(2), FeatureVector::zeros(2)],
            &hp(1.0, 1.0, 1.0),
        )
        .unwrap();
        assert_eq!(j, 0.0);
    }

    #[test]
    fn cost_single_residual() {
        let rows = vec![InteractionRow::new("u", vec![(0, 1.0)], 1).unwrap()];
        let one = m(&[&[1.0]]);
        let empty = DenseMatrix::zeros(0, 1);
        let h = hp(0.0, 0.0, 0.0);
        let uf = [FeatureVector::zeros(0)];
        let itf = [FeatureVector::zeros(0)];
        let fit = cost_j(&one, &one, &empty, &empty, &rows, &uf, &itf, &h).unwrap();
        assert_eq!(fit, 0.0);
        let miss = cost_j(&one, &m(&[&[0.0]]), &empty, &empty, &rows, &uf, &itf, &h).unwrap();
        assert_eq!(miss, 1.0);
    }

    #[test]
    fn cost_matches_naive_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let inst = random_instance(&mut rng, 6, 5, 3, 3, 2);
            let fast = inst.cost().unwrap();
            let slow = naive_cost(&inst);
            assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1.0), "{fast} vs {slow}");
            assert!(fast >= 0.0);
        }
    }

    #[test]
    fn cost_rejects_shape_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let inst = random_instance(&mut rng, 3, 4, 2, 2, 2);
        let bad_p = DenseMatrix::zeros(2, 2);
        let err = cost_j(
            &bad_p,
            &inst.q,
            &inst.u,
            &inst.v,
            &inst.rows,
            &inst.x,
            &inst.y,
            &inst.hp,
        );
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn per_term_gradient_examples() {
        let h = hp(0.0, 0.0, 0.0);
        assert_eq!(client_q_grad(&[1.0, 2.0], &[1.0, 0.0], 1.0, &h), vec![0.0, 0.0]);
        assert_eq!(client_q_grad(&[1.0, 0.0], &[0.0, 0.0], 1.0, &h), vec![1.0, 0.0]);
        assert_eq!(client_u_grad(&[1.0], &[3.0], 3.0), vec![0.0]);
        assert_eq!(client_u_grad(&[2.0], &[0.0], 1.0), vec![2.0]);
        assert_eq!(item_server_q_grad(&[1.0, 1.0], &[1.0, 1.0], 2.0), vec![0.0, 0.0]);
        assert_eq!(item_server_q_grad(&[1.0, 1.0], &[0.0, 0.0], 2.0), vec![2.0, 2.0]);
    }

    /// Sum of f(j,i) over users equals −½ ∂/∂q_j of the interaction term alone.
    #[test]
    fn summed_client_terms_match_interaction_term_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut inst = random_instance(&mut rng, 5, 4, 3, 3, 3);
        inst.hp.lambda1 = 0.0;
        inst.hp.lambda2 = 0.0;
        let mut sums = DenseMatrix::zeros(4, 3);
        for (i, row) in inst.rows.iter().enumerate() {
            let dense = row.to_dense();
            for j in 0..4 {
                let g = client_q_grad(inst.p.row(i), inst.q.row(j), dense[j], &inst.hp);
                axpy(1.0, &g, sums.row_mut(j));
            }
        }
        let fd = fd_grad(&inst, |i| &mut i.q);
        for (a, b) in sums.data().iter().zip(fd.data()) {
            assert!((-2.0 * a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn summed_feature_terms_match_side_term_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut inst = random_instance(&mut rng, 5, 4, 3, 3, 2);
        inst.hp.lambda1 = 1.0;
        inst.hp.lambda2 = 0.0;
        // U block: only the X term depends on U
        let mut u_sums = DenseMatrix::zeros(3, 2);
        for (i, x) in inst.x.iter().enumerate() {
            let xd = x.to_dense();
            for d in 0..3 {
                axpy(1.0, &client_u_grad(inst.p.row(i), inst.u.row(d), xd[d]), u_sums.row_mut(d));
            }
        }
        let fd_u = fd_grad(&inst, |i| &mut i.u);
        for (a, b) in u_sums.data().iter().zip(fd_u.data()) {
            assert!((-2.0 * a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
        // Q block: isolate the Y term by removing interactions
        let mut no_r = inst.clone();
        no_r.rows = (0..5).map(|i| InteractionRow::new(format!("{i}"), vec![], 4).unwrap()).collect();
        no_r.p = DenseMatrix::zeros(5, 2);
        let item = item_gradient_sums(&no_r.y, &no_r.v, &no_r.q).unwrap();
        let fd_q = fd_grad(&no_r, |i| &mut i.q);
        for (a, b) in item.data().iter().zip(fd_q.data()) {
            assert!((-2.0 * a - b).abs() <= 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn client_sums_equal_per_term_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let inst = random_instance(&mut rng, 3, 6, 4, 2, 3);
        for (i, row) in inst.rows.iter().enumerate() {
            let p = inst.p.row(i);
            let qs = client_q_sums(p, row, &inst.q, &inst.hp).unwrap();
            let us = client_u_sums(p, &inst.x[i], &inst.u).unwrap();
            let dense = row.to_dense();
            for j in 0..6 {
                let g = client_q_grad(p, inst.q.row(j), dense[j], &inst.hp);
                for (a, b) in g.iter().zip(qs.row(j)) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
            let xd = inst.x[i].to_dense();
            for d in 0..4 {
                let g = client_u_grad(p, inst.u.row(d), xd[d]);
                for (a, b) in g.iter().zip(us.row(d)) {
                    assert!((a - b).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn aggregate_reductions() {
        let q = m(&[&[0.5, -1.0], &[2.0, 0.0]]);
        let z = DenseMatrix::zeros(2, 2);
        assert_eq!(aggregate_q_grad(&z, &z, &q, &hp(1.0, 0.5, 0.0)).unwrap(), z);
        assert_eq!(aggregate_u_grad(&z, &q, &hp(1.0, 0.5, 0.0)).unwrap(), z);

        let sums = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let items = m(&[&[9.0, 9.0], &[9.0, 9.0]]);
        let h0 = hp(1.0, 0.0, 0.3);
        let with_items = aggregate_q_grad(&sums, &items, &q, &h0).unwrap();
        let without = aggregate_q_grad(&sums, &z, &q, &h0).unwrap();
        assert_eq!(with_items, without);

        let gu = aggregate_u_grad(&sums, &q, &h0).unwrap();
        let mut expect = q.clone();
        expect.scale(2.0 * 0.3);
        assert_eq!(gu, expect);

        assert!(aggregate_q_grad(&sums, &DenseMatrix::zeros(1, 2), &q, &h0).is_err());
        assert!(aggregate_u_grad(&DenseMatrix::zeros(1, 2), &q, &h0).is_err());
    }

    #[test]
    fn p_update_examples() {
        let row = InteractionRow::new("u", vec![], 3).unwrap();
        let q = m(&[&[1.0, 0.5], &[0.0, 1.0], &[0.3, 0.3]]);
        let u = m(&[&[1.0, 1.0]]);
        let p = update_p_local(&row, &FeatureVector::zeros(1), &q, &u, &HyperParams { k: 2, ..hp(2.0, 0.5, 0.1) }).unwrap();
        assert_eq!(p, vec![0.0, 0.0]);

        let row = InteractionRow::new("u", vec![(0, 1.0)], 1).unwrap();
        let p = update_p_local(&row, &FeatureVector::zeros(0), &m(&[&[1.0]]), &DenseMatrix::zeros(0, 1), &hp(0.0, 0.0, 1e-12)).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn v_update_examples() {
        let q = m(&[&[1.0], &[1.0]]);
        let h = hp(0.0, 1.0, 0.0);
        let v = update_v_local(&FeatureVector::from_dense(&[2.0, 2.0]), &q, &h).unwrap();
        assert!((v[0] - 2.0).abs() < 1e-12);
        let zero = update_v_local(&FeatureVector::zeros(2), &q, &h).unwrap();
        assert_eq!(zero, vec![0.0]);
        assert!(matches!(
            update_v_local(&FeatureVector::zeros(2), &q, &hp(0.0, 0.0, 1.0)),
            Err(Error::SideInformationDisabled)
        ));
    }

    #[test]
    fn batched_v_equals_per_column_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let inst = random_instance(&mut rng, 4, 7, 3, 5, 3);
        let v = update_v_all(&inst.y, 5, &inst.q, &inst.hp).unwrap();
        let ydense: Vec<Vec<f64>> = inst.y.iter().map(FeatureVector::to_dense).collect();
        for e in 0..5 {
            let col: Vec<f64> = ydense.iter().map(|r| r[e]).collect();
            let ve = update_v_local(&FeatureVector::from_dense(&col), &inst.q, &inst.hp).unwrap();
            for (a, b) in ve.iter().zip(v.row(e)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn p_update_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..5 {
            let mut inst = random_instance(&mut rng, 4, 6, 3, 3, 3);
            let i = rng.random_range(0..4);
            let p = update_p_local(&inst.rows[i], &inst.x[i], &inst.q, &inst.u, &inst.hp).unwrap();
            inst.p.row_mut(i).copy_from_slice(&p);
            let g = fd_grad(&inst, |s| &mut s.p);
            let j = inst.cost().unwrap();
            assert!(g.row(i).iter().all(|x| x.abs() <= 1e-6 * (1.0 + j)), "{:?}", g.row(i));
        }
    }

    #[test]
    fn predict_examples() {
        let q = m(&[&[1.0], &[3.0]]);
        assert_eq!(predict_scores(&[2.0], &q).unwrap(), vec![2.0, 6.0]);
        assert_eq!(predict_scores(&[0.0], &q).unwrap(), vec![0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let Instance { p, q, .. } = random_instance(&mut rng, 2, 5, 1, 1, 3);
        let scores = predict_scores(p.row(0), &q).unwrap();
        let oracle = DenseMatrix::from_rows(&[p.row(0).to_vec()]).unwrap().matmul(&q.transpose()).unwrap();
        for (a, b) in scores.iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}
