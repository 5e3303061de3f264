//! Random valid instances from simplex features.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use rand_distr::Exp1;

use super::{DiscountedLinearMdp, EpisodicLinearMdp, FeatureMap, LinearMdp};
use crate::error::{Error, Result};

/// Maximum number of fresh draws before giving up on `min_gap`.
pub const DEFAULT_RESAMPLE_BUDGET: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HorizonSpec {
    Discounted(f64),
    Episodic(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InstanceSpec {
    pub dim: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: HorizonSpec,
    pub min_gap: f64,
}

/// Uniform draw from the probability simplex of dimension `n`.
pub(crate) fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    let mut v = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(Exp1)));
    let total = v.sum();
    v /= total;
    v
}

fn random_features<R: Rng + ?Sized>(spec: &InstanceSpec, rng: &mut R) -> Result<FeatureMap> {
    let n_pairs = spec.n_states * spec.n_actions;
    let mut phi: Vec<Option<DVector<f64>>> = vec![None; n_pairs];
    for (k, pair) in sample(rng, n_pairs, spec.dim).into_iter().enumerate() {
        let mut e = DVector::zeros(spec.dim);
        e[k] = 1.0;
        phi[pair] = Some(e);
    }
    let phi = phi
        .into_iter()
        .map(|f| f.unwrap_or_else(|| dirichlet_ones(spec.dim, rng)))
        .collect();
    FeatureMap::new(spec.n_states, spec.n_actions, spec.dim, phi)
}

fn random_parameters<R: Rng + ?Sized>(
    dim: usize,
    n_states: usize,
    rng: &mut R,
) -> (DVector<f64>, DMatrix<f64>) {
    let theta = DVector::from_iterator(dim, (0..dim).map(|_| rng.random::<f64>()));
    let mut mu = DMatrix::zeros(n_states, dim);
    for k in 0..dim {
        mu.set_column(k, &dirichlet_ones(n_states, rng));
    }
    (theta, mu)
}

/// Draws a linear MDP whose features lie in the simplex (with `d` anchor
/// pairs mapped to the basis vectors), whose `mu` columns are distributions
/// over states and whose `theta` lies in `[0, 1]^d`. Resamples until the gap
/// reaches `min_gap`.
pub fn generate_instance<R: Rng + ?Sized>(spec: &InstanceSpec, rng: &mut R) -> Result<LinearMdp> {
    let n_pairs = spec.n_states * spec.n_actions;
    if spec.dim == 0 || spec.dim > n_pairs {
        return Err(Error::InvalidConfig(format!(
            "need 1 <= d <= S*A, got d = {} with S*A = {n_pairs}",
            spec.dim
        )));
    }
    if !(spec.min_gap >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "min_gap must be non-negative, got {}",
            spec.min_gap
        )));
    }
    match spec.horizon {
        HorizonSpec::Discounted(g) if !(g > 0.0 && g < 1.0) => {
            return Err(Error::InvalidConfig(format!("gamma = {g} outside (0, 1)")))
        }
        HorizonSpec::Episodic(0) => {
            return Err(Error::InvalidConfig("horizon must be at least 1".into()))
        }
        _ => {}
    }
    let mut best_gap = f64::NEG_INFINITY;
    for _ in 0..DEFAULT_RESAMPLE_BUDGET {
        let features = Arc::new(random_features(spec, rng)?);
        let mdp: LinearMdp = match spec.horizon {
            HorizonSpec::Discounted(gamma) => {
                let (theta, mu) = random_parameters(spec.dim, spec.n_states, rng);
                DiscountedLinearMdp::new(features, gamma, theta, mu)?.into()
            }
            HorizonSpec::Episodic(h) => {
                let params = (0..h)
                    .map(|_| random_parameters(spec.dim, spec.n_states, rng))
                    .collect();
                EpisodicLinearMdp::new(features, params)?.into()
            }
        };
        let gap = mdp.solve()?.gap;
        if gap >= spec.min_gap {
            return Ok(mdp);
        }
        best_gap = best_gap.max(gap);
    }
    Err(Error::ResampleBudgetExhausted {
        attempts: DEFAULT_RESAMPLE_BUDGET,
        best_gap,
    })
}
