//! Feature matrices, G-optimal designs and realized sampling allocations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{spd_inverse, CONDITION_CAP};
use crate::mdp::FeatureMap;

/// Default relative slack of the G-optimality certificate.
pub const DEFAULT_EPS_G: f64 = 0.01;
/// Default Frank-Wolfe iteration cap.
pub const DEFAULT_DESIGN_ITER_CAP: usize = 100_000;
/// Weights below this are dropped from a converged design.
const PRUNE_BELOW: f64 = 1e-12;
const SUM_TOL: f64 = 1e-12;

/// Probability allocation over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    weights: Vec<f64>,
}

impl Design {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::InvalidDesign("empty design".into()));
        }
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidDesign(format!("negative or non-finite weight {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SUM_TOL {
            return Err(Error::InvalidDesign(format!("weights sum to {total:.15}")));
        }
        Ok(Self { weights })
    }

    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    /// Empirical frequencies `counts / t`.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let t: u64 = counts.iter().sum();
        if t == 0 {
            return Err(Error::InvalidDesign("no samples recorded".into()));
        }
        Ok(Self {
            weights: counts.iter().map(|&c| c as f64 / t as f64).collect(),
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Pairs with positive weight.
    pub fn support(&self) -> Vec<usize> {
        (0..self.weights.len()).filter(|&i| self.weights[i] > 0.0).collect()
    }
}

fn check_len(design: &Design, features: &FeatureMap) -> Result<()> {
    if design.len() != features.n_pairs() {
        return Err(Error::InvalidDesign(format!(
            "design has {} weights for {} pairs",
            design.len(),
            features.n_pairs()
        )));
    }
    Ok(())
}

/// `Lambda(omega) = sum omega(s, a) phi phi^T`.
pub fn lambda_of_design(design: &Design, features: &FeatureMap) -> Result<DMatrix<f64>> {
    check_len(design, features)?;
    let d = features.dim();
    let mut lambda = DMatrix::zeros(d, d);
    for (w, f) in design.weights.iter().zip(features.all()) {
        if *w > 0.0 {
            lambda.ger(*w, f, f, 1.0);
        }
    }
    Ok(lambda)
}

/// `||phi||^2_{M^-1}` for every pair, from one factorization of `matrix`.
pub fn leverages_of_matrix(features: &FeatureMap, matrix: &DMatrix<f64>) -> Result<Vec<f64>> {
    let inv = spd_inverse(matrix, CONDITION_CAP)?;
    let projected = features.matrix() * inv;
    Ok(projected
        .row_iter()
        .zip(features.matrix().row_iter())
        .map(|(p, f)| p.dot(&f))
        .collect())
}

/// `max ||phi||^2_{M^-1}` over pairs.
pub fn sigma_of_matrix(features: &FeatureMap, matrix: &DMatrix<f64>) -> Result<f64> {
    Ok(leverages_of_matrix(features, matrix)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max))
}

/// `||phi(s, a)||^2_{Lambda(omega)^-1}` for every pair.
pub fn leverages(design: &Design, features: &FeatureMap) -> Result<Vec<f64>> {
    leverages_of_matrix(features, &lambda_of_design(design, features)?)
}

/// `sigma(omega) = max ||phi(s, a)||^2_{Lambda(omega)^-1}`; at least `d` for
/// every design with nonsingular `Lambda`.
pub fn sigma_of_design(design: &Design, features: &FeatureMap) -> Result<f64> {
    sigma_of_matrix(features, &lambda_of_design(design, features)?)
}

#[derive(Debug, Clone)]
pub struct GOptimalDesign {
    pub design: Design,
    pub sigma: f64,
    pub iterations: usize,
}

impl GOptimalDesign {
    /// `sigma <= (1 + eps_g) d`.
    pub fn certified(&self, dim: usize, eps_g: f64) -> bool {
        self.sigma <= (1.0 + eps_g) * dim as f64
    }
}

/// Approximate G-optimal design by Frank-Wolfe (Fedorov-Wynn) with exact
/// line search, started from the uniform design.
///
/// Besides the usual step toward the pair of largest leverage, the iteration
/// takes away steps from the supported pair of smallest leverage (possibly
/// dropping it) whenever that pair is further from the optimality condition.
/// It stops once `sigma <= (1 + eps_g) d` and every supported pair has
/// leverage within `eps_g d` of the maximum.
pub fn g_optimal_design(features: &FeatureMap, eps_g: f64, iter_cap: usize) -> Result<GOptimalDesign> {
    if !(eps_g > 0.0) {
        return Err(Error::InvalidConfig(format!("eps_g must be positive, got {eps_g}")));
    }
    let d = features.dim() as f64;
    let n = features.n_pairs();
    let mut weights = vec![1.0 / n as f64; n];
    let mut iterations = 0;
    let mut sigma;
    loop {
        let design = Design {
            weights: weights.clone(),
        };
        let g = leverages(&design, features)?;
        let (i_max, g_max) = argmax(&g, |_| true);
        let (j_min, g_min) = argmin(&g, |j| weights[j] > 0.0);
        sigma = g_max;
        if g_max <= (1.0 + eps_g) * d && g_max - g_min <= eps_g * d {
            break;
        }
        if iterations >= iter_cap {
            return Err(Error::DesignCapExceeded { sigma, iterations });
        }
        iterations += 1;
        let toward_gain = g_max / d - 1.0;
        let away_gain = 1.0 - g_min / d;
        let (target, alpha) = if toward_gain >= away_gain {
            (i_max, (g_max / d - 1.0) / (g_max - 1.0))
        } else {
            let u = weights[j_min];
            let drop = -u / (1.0 - u);
            let line = if g_min > 1.0 {
                (g_min / d - 1.0) / (g_min - 1.0)
            } else {
                drop
            };
            (j_min, line.max(drop))
        };
        for w in weights.iter_mut() {
            *w *= 1.0 - alpha;
        }
        weights[target] += alpha;
        if weights[target] < PRUNE_BELOW {
            weights[target] = 0.0;
        }
    }
    for w in weights.iter_mut() {
        if *w < PRUNE_BELOW {
            *w = 0.0;
        }
    }
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    let design = Design { weights };
    let sigma = sigma_of_design(&design, features)?;
    Ok(GOptimalDesign {
        design,
        sigma,
        iterations,
    })
}

fn argmax(values: &[f64], keep: impl Fn(usize) -> bool) -> (usize, f64) {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if keep(i) && v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn argmin(values: &[f64], keep: impl Fn(usize) -> bool) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if keep(i) && v < best.1 {
            best = (i, v);
        }
    }
    best
}

/// Sample counts `N_t` and their total `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RealizedAllocation {
    counts: Vec<u64>,
    t: u64,
}

impl RealizedAllocation {
    pub fn new(n_pairs: usize) -> Self {
        Self {
            counts: vec![0; n_pairs],
            t: 0,
        }
    }

    pub fn record(&mut self, pair: usize) {
        self.counts[pair] += 1;
        self.t += 1;
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    /// `omega_t = N_t / t`.
    pub fn frequencies(&self) -> Result<Design> {
        Design::from_counts(&self.counts)
    }

    /// `Lambda(omega_t) = (1/t) sum_pairs N_t(s, a) phi phi^T`.
    pub fn lambda(&self, features: &FeatureMap) -> Result<DMatrix<f64>> {
        lambda_of_design(&self.frequencies()?, features)
    }
}

/// Number of i.i.d. draws from an `eps_g`-approximate G-optimal design after
/// which `(1 - rho) Lambda* <= Lambda(omega_t) <= (1 + rho) Lambda*` holds with
/// probability at least `1 - delta`:
/// `ceil(2 (1 + eps_g) (1/rho^2 + 1/(3 rho)) d ln(2d/delta))`.
pub fn concentration_time(dim: usize, delta: f64, rho: f64, eps_g: f64) -> Result<u64> {
    if !(rho > 0.0) || !(delta > 0.0 && delta < 1.0) || !(eps_g >= 0.0) || dim == 0 {
        return Err(Error::InvalidConfig(format!(
            "concentration_time needs d >= 1, rho > 0, delta in (0, 1), eps_g >= 0 \
             (got d = {dim}, rho = {rho}, delta = {delta}, eps_g = {eps_g})"
        )));
    }
    let d = dim as f64;
    let t = 2.0 * (1.0 + eps_g) * (1.0 / (rho * rho) + 1.0 / (3.0 * rho)) * d * (2.0 * d / delta).ln();
    Ok(t.ceil() as u64)
}
