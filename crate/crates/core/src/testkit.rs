//! Independent oracles for tests: dense naive objective, central finite
//! differences, and a monolithic gradient that sees every party's data.
//!
//! Shared between unit tests and the integration suites (included there by path),
//! so everything is addressed through the `fedmvmf` crate name.

#![allow(dead_code, clippy::needless_range_loop)]

use fedmvmf::model::{cost_j, FeatureVector, HyperParams, InteractionRow};
use fedmvmf::numerics::DenseMatrix;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct Instance {
    pub p: DenseMatrix,
    pub q: DenseMatrix,
    pub u: DenseMatrix,
    pub v: DenseMatrix,
    pub rows: Vec<InteractionRow>,
    pub x: Vec<FeatureVector>,
    pub y: Vec<FeatureVector>,
    pub hp: HyperParams,
}

impl Instance {
    pub fn cost(&self) -> fedmvmf::Result<f64> {
        cost_j(&self.p, &self.q, &self.u, &self.v, &self.rows, &self.x, &self.y, &self.hp)
    }

    pub fn dense_r(&self) -> Vec<Vec<f64>> {
        self.rows.iter().map(InteractionRow::to_dense).collect()
    }
}

fn uniform(rng: &mut impl Rng, r: usize, c: usize, lo: f64, hi: f64) -> DenseMatrix {
    DenseMatrix::from_fn(r, c, |_, _| rng.random_range(lo..hi))
}

pub fn random_instance(
    rng: &mut impl Rng,
    n_users: usize,
    n_items: usize,
    d_u: usize,
    d_v: usize,
    k: usize,
) -> Instance {
    let rows = (0..n_users)
        .map(|i| {
            let mut items: Vec<(usize, f64)> = Vec::new();
            for j in 0..n_items {
                if rng.random_bool(0.35) {
                    items.push((j, f64::from(rng.random_range(1..=3u8))));
                }
            }
            InteractionRow::new(format!("u{i}"), items, n_items).unwrap()
        })
        .collect();
    let sparse_row = |rng: &mut _, d: usize| {
        let dense: Vec<f64> = (0..d)
            .map(|_| {
                if Rng::random_bool(rng, 0.6) {
                    Rng::random_range(rng, -1.0..2.0)
                } else {
                    0.0
                }
            })
            .collect();
        FeatureVector::from_dense(&dense)
    };
    let x = (0..n_users).map(|_| sparse_row(rng, d_u)).collect();
    let y = (0..n_items).map(|_| sparse_row(rng, d_v)).collect();
    let hp = HyperParams {
        k,
        alpha: rng.random_range(0.0..5.0),
        lambda1: rng.random_range(0.1..1.0),
        lambda2: rng.random_range(0.1..1.0),
        theta: n_users + 1,
    };
    Instance {
        p: uniform(rng, n_users, k, -1.0, 1.0),
        q: uniform(rng, n_items, k, -1.0, 1.0),
        u: uniform(rng, d_u, k, -1.0, 1.0),
        v: uniform(rng, d_v, k, -1.0, 1.0),
        rows,
        x,
        y,
        hp,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Objective evaluated term by term over dense R, X, Y.
pub fn naive_cost(inst: &Instance) -> f64 {
    let r = inst.dense_r();
    let x: Vec<Vec<f64>> = inst.x.iter().map(FeatureVector::to_dense).collect();
    let y: Vec<Vec<f64>> = inst.y.iter().map(FeatureVector::to_dense).collect();
    let hp = &inst.hp;
    let mut j = 0.0;
    for i in 0..inst.p.rows() {
        for it in 0..inst.q.rows() {
            let c = 1.0 + hp.alpha * r[i][it];
            j += c * (r[i][it] - dot(inst.p.row(i), inst.q.row(it))).powi(2);
        }
    }
    let mut side = 0.0;
    for i in 0..inst.p.rows() {
        for d in 0..inst.u.rows() {
            side += (x[i][d] - dot(inst.p.row(i), inst.u.row(d))).powi(2);
        }
    }
    for it in 0..inst.q.rows() {
        for e in 0..inst.v.rows() {
            side += (y[it][e] - dot(inst.q.row(it), inst.v.row(e))).powi(2);
        }
    }
    let sq = |m: &DenseMatrix| m.data().iter().map(|a| a * a).sum::<f64>();
    j + hp.lambda1 * side + hp.lambda2 * (sq(&inst.p) + sq(&inst.q) + sq(&inst.u) + sq(&inst.v))
}

pub const FD_STEP: f64 = 1e-5;

/// Central finite differences of the naive objective with respect to one factor block.
pub fn fd_grad(inst: &Instance, select: impl Fn(&mut Instance) -> &mut DenseMatrix) -> DenseMatrix {
    let mut work = inst.clone();
    let (rows, cols) = select(&mut work).shape();
    let mut g = DenseMatrix::zeros(rows, cols);
    for a in 0..rows {
        for b in 0..cols {
            let orig = select(&mut work)[(a, b)];
            select(&mut work)[(a, b)] = orig + FD_STEP;
            let plus = naive_cost(&work);
            select(&mut work)[(a, b)] = orig - FD_STEP;
            let minus = naive_cost(&work);
            select(&mut work)[(a, b)] = orig;
            g[(a, b)] = (plus - minus) / (2.0 * FD_STEP);
        }
    }
    g
}

/// ∂J/∂Q and ∂J/∂U written out directly over dense data, as a single party
/// holding everything would compute them.
pub fn monolithic_grads(inst: &Instance) -> (DenseMatrix, DenseMatrix) {
    let r = inst.dense_r();
    let x: Vec<Vec<f64>> = inst.x.iter().map(FeatureVector::to_dense).collect();
    let y: Vec<Vec<f64>> = inst.y.iter().map(FeatureVector::to_dense).collect();
    let hp = &inst.hp;
    let k = inst.q.cols();
    let mut gq = DenseMatrix::zeros(inst.q.rows(), k);
    for j in 0..inst.q.rows() {
        for t in 0..k {
            let mut s = 0.0;
            for i in 0..inst.p.rows() {
                let c = 1.0 + hp.alpha * r[i][j];
                s += -2.0 * c * (r[i][j] - dot(inst.p.row(i), inst.q.row(j))) * inst.p[(i, t)];
            }
            for e in 0..inst.v.rows() {
                s += -2.0 * hp.lambda1 * (y[j][e] - dot(inst.q.row(j), inst.v.row(e))) * inst.v[(e, t)];
            }
            gq[(j, t)] = s + 2.0 * hp.lambda2 * inst.q[(j, t)];
        }
    }
    let mut gu = DenseMatrix::zeros(inst.u.rows(), k);
    for d in 0..inst.u.rows() {
        for t in 0..k {
            let mut s = 0.0;
            for i in 0..inst.p.rows() {
                s += -2.0 * hp.lambda1 * (x[i][d] - dot(inst.p.row(i), inst.u.row(d))) * inst.p[(i, t)];
            }
            gu[(d, t)] = s + 2.0 * hp.lambda2 * inst.u[(d, t)];
        }
    }
    (gq, gu)
}

/// Largest elementwise relative error, with denominators floored at one.
pub fn max_rel_err(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}
