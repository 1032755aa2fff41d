//! Recommendations for users and items with no interaction history.
//!
//! A new user is placed in factor space by projecting features through U,
//! a new item by projecting its features through V. Nothing here reads an
//! [`InteractionRow`](crate::model::InteractionRow).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{ItemServerState, MasterModel, ServerState};
use crate::model::{predict_scores, FeatureVector, HyperParams};
use crate::numerics::{solve_spd_row, DenseMatrix};

#[derive(Debug, Clone, PartialEq)]
pub struct ColdStartResult {
    /// One score per item in the current catalog.
    pub scores: Vec<f64>,
    /// The induced p* (or q*), length K.
    pub new_factor: Vec<f64>,
}

/// How a new user's features are mapped to p*.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UserProjection {
    /// p* = x* U
    #[default]
    Plain,
    /// p* = x* U (UᵀU + λ₂/λ₁ I)⁻¹, the least-squares fit of x* ≈ p* Uᵀ.
    Ridge,
}

pub fn cold_start_user(x_star: &FeatureVector, model: &MasterModel) -> Result<ColdStartResult> {
    let p = x_star.project(&model.u)?;
    let scores = predict_scores(&p, &model.q)?;
    Ok(ColdStartResult { scores, new_factor: p })
}

pub fn cold_start_user_with(
    x_star: &FeatureVector,
    model: &MasterModel,
    hp: &HyperParams,
    projection: UserProjection,
) -> Result<ColdStartResult> {
    match projection {
        UserProjection::Plain => cold_start_user(x_star, model),
        UserProjection::Ridge => {
            if !hp.side_information() {
                return Err(Error::SideInformationDisabled);
            }
            let xu = x_star.project(&model.u)?;
            let mut a = model.u.gram();
            a.add_diagonal(hp.lambda2 / hp.lambda1);
            let p = solve_spd_row(&a, &xu)?;
            let scores = predict_scores(&p, &model.q)?;
            Ok(ColdStartResult { scores, new_factor: p })
        }
    }
}

/// Computes q* = y* V on the item server, appends it to Q and promotes a new
/// model version. Returns the updated model and q*.
pub fn cold_start_item(
    y_star: &FeatureVector,
    item_state: &mut ItemServerState,
    server: &mut ServerState,
) -> Result<(MasterModel, Vec<f64>)> {
    let hp = *server.hyperparams();
    if !hp.side_information() {
        return Err(Error::SideInformationDisabled);
    }
    if y_star.dim() != item_state.n_features() {
        return Err(Error::DimensionMismatch {
            op: "cold_start_item",
            left: (1, y_star.dim()),
            right: (item_state.n_features(), hp.k),
        });
    }
    if item_state.last_seen_version != server.model().version {
        item_state.refit(server.model(), &hp)?;
    }
    let q_star = y_star.project(&item_state.v)?;
    server.insert_item(&q_star)?;
    item_state.push_item(y_star.clone())?;
    item_state.last_seen_version = server.model().version;
    Ok((server.model().clone(), q_star))
}

/// A new user scored against a catalog that has just gained a new item.
/// The last score is the new user's score for the new item.
pub fn cold_start_user_item(
    x_star: &FeatureVector,
    y_star: &FeatureVector,
    item_state: &mut ItemServerState,
    server: &mut ServerState,
) -> Result<ColdStartResult> {
    x_star.project(&server.model().u)?;
    let (model, _) = cold_start_item(y_star, item_state, server)?;
    cold_start_user(x_star, &model)
}

/// p* for many users at once, as rows of a matrix.
pub fn project_users(features: &[FeatureVector], u: &DenseMatrix) -> Result<DenseMatrix> {
    let rows = features.iter().map(|x| x.project(u)).collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Ok(DenseMatrix::zeros(0, u.cols()));
    }
    DenseMatrix::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn hp() -> HyperParams {
        HyperParams {
            k: 3,
            alpha: 1.0,
            lambda1: 0.5,
            lambda2: 0.2,
            theta: 2,
        }
    }

    fn random_features(rng: &mut ChaCha8Rng, d: usize) -> FeatureVector {
        let dense: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        FeatureVector::from_dense(&dense)
    }

    fn setup(seed: u64) -> (ServerState, ItemServerState, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let server = ServerState::new(hp(), 6, 4, seed).unwrap();
        let ys = (0..6).map(|_| random_features(&mut rng, 5)).collect();
        let mut items = ItemServerState::new(ys, 5, 3).unwrap();
        items.refit(server.model(), &hp()).unwrap();
        (server, items, rng)
    }

    #[test]
    fn user_examples() {
        let (server, _, mut rng) = setup(1);
        let model = server.model();
        let zero = cold_start_user(&FeatureVector::zeros(4), model).unwrap();
        assert!(zero.new_factor.iter().chain(&zero.scores).all(|&s| s == 0.0));

        let one_hot = FeatureVector::new(4, vec![(2, 1.0)]).unwrap();
        assert_eq!(cold_start_user(&one_hot, model).unwrap().new_factor, model.u.row(2));

        let x = random_features(&mut rng, 4);
        let r = cold_start_user(&x, model).unwrap();
        let xm = DenseMatrix::from_rows(&[x.to_dense()]).unwrap();
        let oracle = xm.matmul(&model.u).unwrap().matmul(&model.q.transpose()).unwrap();
        for (a, b) in r.scores.iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(cold_start_user(&FeatureVector::zeros(3), model).is_err());
    }

    #[test]
    fn user_projection_is_linear() {
        let (server, _, mut rng) = setup(2);
        let x = random_features(&mut rng, 4);
        let base = cold_start_user(&x, server.model()).unwrap();
        for a in [0.5, 2.0, 4.0] {
            let scaled = cold_start_user(&x.scaled(a), server.model()).unwrap();
            for (s, b) in scaled.new_factor.iter().zip(&base.new_factor) {
                assert_eq!(*s, a * b);
            }
            for (s, b) in scaled.scores.iter().zip(&base.scores) {
                assert!((s - a * b).abs() <= 1e-15 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn ridge_projection_solves_normal_equations() {
        let (server, _, mut rng) = setup(3);
        let x = random_features(&mut rng, 4);
        let h = hp();
        let r = cold_start_user_with(&x, server.model(), &h, UserProjection::Ridge).unwrap();
        let mut a = server.model().u.gram();
        a.add_diagonal(h.lambda2 / h.lambda1);
        let lhs = a.vec_mul(&r.new_factor).unwrap();
        let rhs = x.project(&server.model().u).unwrap();
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).abs() < 1e-10);
        }
        let off = HyperParams { lambda1: 0.0, ..h };
        assert!(cold_start_user_with(&x, server.model(), &off, UserProjection::Ridge).is_err());
    }

    #[test]
    fn item_insertion_appends_and_preserves_rows() {
        let (mut server, mut items, mut rng) = setup(4);
        let before = server.model().clone();
        let y = random_features(&mut rng, 5);
        let (after, q_star) = cold_start_item(&y, &mut items, &mut server).unwrap();
        assert_eq!(after.q.rows(), 7);
        assert_eq!(&after.q.data()[..before.q.data().len()], before.q.data());
        assert_eq!(after.q.row(6), &q_star[..]);
        assert_eq!(q_star, y.project(&items.v).unwrap());
        assert_eq!(after.version, before.version + 1);
        assert_eq!(items.item_features().len(), 7);

        let p: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let old = predict_scores(&p, &before.q).unwrap();
        let new = predict_scores(&p, &after.q).unwrap();
        assert_eq!(&new[..6], &old[..]);
        assert!((new[6] - dot(&p, &q_star)).abs() < 1e-12);
    }

    #[test]
    fn zero_item_features_score_zero() {
        let (mut server, mut items, _) = setup(5);
        let (model, q_star) = cold_start_item(&FeatureVector::zeros(5), &mut items, &mut server).unwrap();
        assert!(q_star.iter().all(|&x| x == 0.0));
        assert!(model.q.row(6).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn item_requires_side_information() {
        let h = HyperParams { lambda1: 0.0, ..hp() };
        let mut server = ServerState::new(h, 3, 0, 0).unwrap();
        let mut items = ItemServerState::new(vec![FeatureVector::zeros(2); 3], 2, 3).unwrap();
        let r = cold_start_item(&FeatureVector::zeros(2), &mut items, &mut server);
        assert!(matches!(r, Err(Error::SideInformationDisabled)));
        assert_eq!(server.model().q.rows(), 3);
    }

    #[test]
    fn user_item_composition() {
        let (mut server, mut items, mut rng) = setup(6);
        let x = random_features(&mut rng, 4);
        let y = random_features(&mut rng, 5);
        let r = cold_start_user_item(&x, &y, &mut items, &mut server).unwrap();
        assert_eq!(r.scores.len(), 7);
        let plain = cold_start_user(&x, server.model()).unwrap();
        assert_eq!(r.scores[..6], plain.scores[..6]);
        let p = x.project(&server.model().u).unwrap();
        let q = y.project(&items.v).unwrap();
        assert!((r.scores[6] - dot(&p, &q)).abs() < 1e-12);

        let (mut server, mut items, _) = setup(7);
        let r = cold_start_user_item(&FeatureVector::zeros(4), &y, &mut items, &mut server).unwrap();
        assert_eq!(r.scores[6], 0.0);
    }
}
