//! Ground-truth linear MDPs.
//!
//! A linear MDP is described by a known feature map `phi(s, a)` in `R^d`, a
//! reward parameter `theta` and a signed-measure parameter `mu` (an `S x d`
//! matrix) such that `r(s, a) = phi(s, a)^T theta` and
//! `p(s, a, s') = phi(s, a)^T mu(s')`. Episodic models carry one
//! `(theta, mu)` pair per step.
//!
//! Pairs are indexed row-major: `pair = s * A + a`. Steps are 0-indexed, so
//! step `h` has remaining horizon `H - h`.

mod generate;
mod io;
mod planning;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{generate_instance, HorizonSpec, InstanceSpec, DEFAULT_RESAMPLE_BUDGET};
pub use io::{load_instance, parse_instance, save_instance, InstanceFile, InstanceMode};
pub use planning::{
    evaluate_policy, evaluate_policy_discounted, evaluate_policy_episodic, q_from_values_discounted,
    q_from_values_episodic, solve_discounted, solve_episodic, value_iteration_linear,
    PlanningSolution, DEFAULT_TOL,
};
pub(crate) use generate::dirichlet_ones;
pub(crate) use planning::{backward_induction_linear, discounted_iteration_cap};

/// Tolerance on probabilities, transition row sums and the reward range.
pub const PROB_TOL: f64 = 1e-10;

/// Relative tolerance used by the rank (span) check on the feature Gram matrix.
const RANK_TOL: f64 = 1e-10;

/// Known embedding of the finite state-action set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    n_states: usize,
    n_actions: usize,
    dim: usize,
    phi: Vec<DVector<f64>>,
    /// `(S*A) x d`, row `pair` is `phi(pair)^T`.
    matrix: DMatrix<f64>,
}

impl FeatureMap {
    /// `phi[s * n_actions + a]` is the feature of `(s, a)`.
    pub fn new(
        n_states: usize,
        n_actions: usize,
        dim: usize,
        phi: Vec<DVector<f64>>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || dim == 0 {
            return Err(Error::InvalidModel(
                "S, A and d must all be at least 1".into(),
            ));
        }
        if phi.len() != n_states * n_actions {
            return Err(Error::InvalidModel(format!(
                "expected {} feature vectors (S*A), got {}",
                n_states * n_actions,
                phi.len()
            )));
        }
        for (idx, f) in phi.iter().enumerate() {
            let (s, a) = (idx / n_actions, idx % n_actions);
            if f.len() != dim {
                return Err(Error::InvalidModel(format!(
                    "feature ({s}, {a}) has length {}, expected d = {dim}",
                    f.len()
                )));
            }
            if f.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidModel(format!("feature ({s}, {a}) is not finite")));
            }
            let norm = f.norm();
            if norm > 1.0 + PROB_TOL {
                return Err(Error::InvalidModel(format!(
                    "feature norm bound violated: ||phi({s}, {a})|| = {norm:.12} > 1"
                )));
            }
        }
        let matrix = DMatrix::from_fn(phi.len(), dim, |i, k| phi[i][k]);
        let map = Self {
            n_states,
            n_actions,
            dim,
            phi,
            matrix,
        };
        let eig = map.gram().symmetric_eigen();
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > RANK_TOL * max.max(1e-300)) {
            return Err(Error::InvalidModel(format!(
                "features do not span R^{dim}: smallest Gram eigenvalue {min:.3e} (largest {max:.3e})"
            )));
        }
        Ok(map)
    }

    /// Identity features, `d = S * A`: every tabular MDP is linear in them.
    pub fn tabular(n_states: usize, n_actions: usize) -> Result<Self> {
        let d = n_states * n_actions;
        let phi = (0..d)
            .map(|i| {
                let mut v = DVector::zeros(d);
                v[i] = 1.0;
                v
            })
            .collect();
        Self::new(n_states, n_actions, d, phi)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_pairs(&self) -> usize {
        self.phi.len()
    }

    #[inline]
    pub fn pair_index(&self, state: usize, action: usize) -> usize {
        state * self.n_actions + action
    }

    #[inline]
    pub fn pair(&self, index: usize) -> (usize, usize) {
        (index / self.n_actions, index % self.n_actions)
    }

    #[inline]
    pub fn phi(&self, state: usize, action: usize) -> &DVector<f64> {
        &self.phi[self.pair_index(state, action)]
    }

    #[inline]
    pub fn phi_at(&self, pair: usize) -> &DVector<f64> {
        &self.phi[pair]
    }

    pub fn all(&self) -> &[DVector<f64>] {
        &self.phi
    }

    /// All features stacked as rows, `(S*A) x d`.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Unweighted Gram matrix `sum phi phi^T` over all pairs.
    pub fn gram(&self) -> DMatrix<f64> {
        let mut g = DMatrix::zeros(self.dim, self.dim);
        for f in &self.phi {
            g.ger(1.0, f, f, 1.0);
        }
        g
    }
}

/// Reward noise law. Rewards are Bernoulli with mean `r(s, a)`, which keeps
/// their support in `[0, 1]` and makes the reward KL closed-form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardNoise {
    #[default]
    Bernoulli,
}

/// One step's parameters together with the reward and transition tables
/// they induce.
#[derive(Debug, Clone)]
pub struct LinearStep {
    theta: DVector<f64>,
    /// `S x d`; row `s'` is `mu(s')`.
    mu: DMatrix<f64>,
    /// `d x S`; column `s'` is `mu(s')`.
    mu_t: DMatrix<f64>,
    reward: Vec<f64>,
    transition: Vec<Vec<f64>>,
    cumulative: Vec<Vec<f64>>,
}

impl LinearStep {
    fn new(
        features: &FeatureMap,
        theta: DVector<f64>,
        mu: DMatrix<f64>,
        step: usize,
    ) -> Result<Self> {
        let d = features.dim();
        let n_states = features.n_states();
        let at = |msg: String| Error::InvalidModel(format!("step {step}: {msg}"));
        if theta.len() != d {
            return Err(at(format!("theta has length {}, expected {d}", theta.len())));
        }
        if mu.nrows() != n_states || mu.ncols() != d {
            return Err(at(format!(
                "mu is {}x{}, expected {n_states}x{d}",
                mu.nrows(),
                mu.ncols()
            )));
        }
        if theta.iter().chain(mu.iter()).any(|x| !x.is_finite()) {
            return Err(at("parameters must be finite".into()));
        }
        let sqrt_d = (d as f64).sqrt();
        let theta_norm = theta.norm();
        if theta_norm > sqrt_d * (1.0 + 1e-12) {
            return Err(at(format!(
                "reward parameter bound violated: ||theta|| = {theta_norm:.6} > sqrt(d) = {sqrt_d:.6}"
            )));
        }
        let abs_mass = DVector::from_iterator(d, (0..d).map(|k| mu.column(k).abs().sum()));
        let mass_norm = abs_mass.norm();
        if mass_norm > sqrt_d * (1.0 + 1e-12) {
            return Err(at(format!(
                "measure bound violated: ||sum_s |mu(s)| || = {mass_norm:.6} > sqrt(d) = {sqrt_d:.6}"
            )));
        }

        let n_pairs = features.n_pairs();
        let mut reward = Vec::with_capacity(n_pairs);
        let mut transition = Vec::with_capacity(n_pairs);
        let mut cumulative = Vec::with_capacity(n_pairs);
        for pair in 0..n_pairs {
            let (s, a) = features.pair(pair);
            let phi = features.phi_at(pair);
            let r = phi.dot(&theta);
            if !(-PROB_TOL..=1.0 + PROB_TOL).contains(&r) {
                return Err(at(format!(
                    "mean reward r({s}, {a}) = {r:.12} outside [0, 1]"
                )));
            }
            let row: Vec<f64> = (0..n_states).map(|sp| phi.dot(&mu.row(sp).transpose())).collect();
            for (sp, &p) in row.iter().enumerate() {
                if !(-PROB_TOL..=1.0 + PROB_TOL).contains(&p) {
                    return Err(at(format!(
                        "transition probability p({s}, {a}, {sp}) = {p:.12} outside [0, 1]"
                    )));
                }
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > PROB_TOL {
                return Err(at(format!(
                    "transition row ({s}, {a}) sums to {total:.12}, expected 1 within {PROB_TOL:e}"
                )));
            }
            let mut acc = 0.0;
            let cum: Vec<f64> = row
                .iter()
                .map(|p| {
                    acc += p.max(0.0);
                    acc
                })
                .collect();
            reward.push(r.clamp(0.0, 1.0));
            transition.push(row);
            cumulative.push(cum);
        }
        let mu_t = mu.transpose();
        Ok(Self {
            theta,
            mu,
            mu_t,
            reward,
            transition,
            cumulative,
        })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    /// `S x d` measure parameter.
    pub fn mu(&self) -> &DMatrix<f64> {
        &self.mu
    }

    /// `d x S` view of the measure parameter (column `s'` is `mu(s')`).
    pub fn mu_t(&self) -> &DMatrix<f64> {
        &self.mu_t
    }

    pub fn reward(&self, pair: usize) -> f64 {
        self.reward[pair]
    }

    pub fn transition(&self, pair: usize) -> &[f64] {
        &self.transition[pair]
    }

    /// Draw `(reward, next_state)` from the generative model at `pair`.
    pub fn sample<R: Rng + ?Sized>(&self, pair: usize, rng: &mut R) -> (f64, usize) {
        let r = if rng.random::<f64>() < self.reward[pair] {
            1.0
        } else {
            0.0
        };
        let cum = &self.cumulative[pair];
        let u = rng.random::<f64>() * cum[cum.len() - 1];
        let next = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        (r, next)
    }
}

/// Read access shared by discounted and episodic models.
pub trait LinearModel {
    fn features(&self) -> &FeatureMap;
    /// One step for discounted models, `H` for episodic ones.
    fn steps(&self) -> &[LinearStep];
    /// `Some(gamma)` for discounted models.
    fn discount(&self) -> Option<f64>;
    /// Rebuild the model with new per-step parameters on the same features.
    fn with_parameters(&self, params: Vec<(DVector<f64>, DMatrix<f64>)>) -> Result<Self>
    where
        Self: Sized;
}

#[derive(Debug, Clone)]
pub struct DiscountedLinearMdp {
    features: Arc<FeatureMap>,
    gamma: f64,
    step: LinearStep,
    noise: RewardNoise,
}

impl DiscountedLinearMdp {
    pub fn new(
        features: Arc<FeatureMap>,
        gamma: f64,
        theta: DVector<f64>,
        mu: DMatrix<f64>,
    ) -> Result<Self> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidModel(format!(
                "discount gamma = {gamma} outside (0, 1)"
            )));
        }
        let step = LinearStep::new(&features, theta, mu, 0)?;
        Ok(Self {
            features,
            gamma,
            step,
            noise: RewardNoise::Bernoulli,
        })
    }

    pub fn features_arc(&self) -> &Arc<FeatureMap> {
        &self.features
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn step(&self) -> &LinearStep {
        &self.step
    }

    pub fn theta(&self) -> &DVector<f64> {
        self.step.theta()
    }

    pub fn mu(&self) -> &DMatrix<f64> {
        self.step.mu()
    }

    pub fn reward_noise(&self) -> RewardNoise {
        self.noise
    }

    pub fn reward(&self, state: usize, action: usize) -> f64 {
        self.step.reward(self.features.pair_index(state, action))
    }

    pub fn transition(&self, state: usize, action: usize) -> &[f64] {
        self.step.transition(self.features.pair_index(state, action))
    }

    /// Generative-model query: `(reward sample, next state)`.
    pub fn sample_transition<R: Rng + ?Sized>(
        &self,
        state: usize,
        action: usize,
        rng: &mut R,
    ) -> (f64, usize) {
        self.step.sample(self.features.pair_index(state, action), rng)
    }
}

impl LinearModel for DiscountedLinearMdp {
    fn features(&self) -> &FeatureMap {
        &self.features
    }

    fn steps(&self) -> &[LinearStep] {
        std::slice::from_ref(&self.step)
    }

    fn discount(&self) -> Option<f64> {
        Some(self.gamma)
    }

    fn with_parameters(&self, mut params: Vec<(DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        if params.len() != 1 {
            return Err(Error::InvalidModel(format!(
                "discounted model takes one parameter pair, got {}",
                params.len()
            )));
        }
        let (theta, mu) = params.pop().expect("length checked");
        Self::new(self.features.clone(), self.gamma, theta, mu)
    }
}

#[derive(Debug, Clone)]
pub struct EpisodicLinearMdp {
    features: Arc<FeatureMap>,
    steps: Vec<LinearStep>,
    noise: RewardNoise,
}

impl EpisodicLinearMdp {
    /// `params[h] = (theta_h, mu_h)`; the horizon is `params.len()`.
    pub fn new(features: Arc<FeatureMap>, params: Vec<(DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        if params.is_empty() {
            return Err(Error::InvalidModel("horizon H must be at least 1".into()));
        }
        let steps = params
            .into_iter()
            .enumerate()
            .map(|(h, (theta, mu))| LinearStep::new(&features, theta, mu, h))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            features,
            steps,
            noise: RewardNoise::Bernoulli,
        })
    }

    pub fn features_arc(&self) -> &Arc<FeatureMap> {
        &self.features
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, h: usize) -> &LinearStep {
        &self.steps[h]
    }

    pub fn reward_noise(&self) -> RewardNoise {
        self.noise
    }

    pub fn reward(&self, h: usize, state: usize, action: usize) -> f64 {
        self.steps[h].reward(self.features.pair_index(state, action))
    }

    pub fn transition(&self, h: usize, state: usize, action: usize) -> &[f64] {
        self.steps[h].transition(self.features.pair_index(state, action))
    }

    pub fn sample_transition<R: Rng + ?Sized>(
        &self,
        h: usize,
        state: usize,
        action: usize,
        rng: &mut R,
    ) -> (f64, usize) {
        self.steps[h].sample(self.features.pair_index(state, action), rng)
    }
}

impl LinearModel for EpisodicLinearMdp {
    fn features(&self) -> &FeatureMap {
        &self.features
    }

    fn steps(&self) -> &[LinearStep] {
        &self.steps
    }

    fn discount(&self) -> Option<f64> {
        None
    }

    fn with_parameters(&self, params: Vec<(DVector<f64>, DMatrix<f64>)>) -> Result<Self> {
        if params.len() != self.horizon() {
            return Err(Error::InvalidModel(format!(
                "episodic model takes {} parameter pairs, got {}",
                self.horizon(),
                params.len()
            )));
        }
        Self::new(self.features.clone(), params)
    }
}

/// Either kind of ground-truth model.
#[derive(Debug, Clone)]
pub enum LinearMdp {
    Discounted(DiscountedLinearMdp),
    Episodic(EpisodicLinearMdp),
}

impl LinearMdp {
    pub fn features(&self) -> &FeatureMap {
        match self {
            Self::Discounted(m) => m.features(),
            Self::Episodic(m) => m.features(),
        }
    }

    pub fn mode(&self) -> InstanceMode {
        match self {
            Self::Discounted(_) => InstanceMode::Discounted,
            Self::Episodic(_) => InstanceMode::Episodic,
        }
    }

    /// `gamma` for discounted models, `H` for episodic ones.
    pub fn gamma_or_horizon(&self) -> f64 {
        match self {
            Self::Discounted(m) => m.gamma(),
            Self::Episodic(m) => m.horizon() as f64,
        }
    }

    pub fn solve(&self) -> Result<PlanningSolution> {
        match self {
            Self::Discounted(m) => solve_discounted(m, DEFAULT_TOL),
            Self::Episodic(m) => Ok(solve_episodic(m)),
        }
    }

    pub fn as_discounted(&self) -> Option<&DiscountedLinearMdp> {
        match self {
            Self::Discounted(m) => Some(m),
            Self::Episodic(_) => None,
        }
    }

    pub fn as_episodic(&self) -> Option<&EpisodicLinearMdp> {
        match self {
            Self::Episodic(m) => Some(m),
            Self::Discounted(_) => None,
        }
    }
}

impl From<DiscountedLinearMdp> for LinearMdp {
    fn from(m: DiscountedLinearMdp) -> Self {
        Self::Discounted(m)
    }
}

impl From<EpisodicLinearMdp> for LinearMdp {
    fn from(m: EpisodicLinearMdp) -> Self {
        Self::Episodic(m)
    }
}

/// Deterministic policy: state -> action (discounted) or (step, state) -> action.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    Stationary(Vec<usize>),
    Episodic(Vec<Vec<usize>>),
}

impl Policy {
    /// Action at `(step, state)`; stationary policies ignore the step.
    pub fn action(&self, step: usize, state: usize) -> usize {
        match self {
            Self::Stationary(a) => a[state],
            Self::Episodic(a) => a[step][state],
        }
    }

    pub fn n_steps(&self) -> usize {
        match self {
            Self::Stationary(_) => 1,
            Self::Episodic(a) => a.len(),
        }
    }

    /// Checks totality and action range against a feature map.
    pub fn validate(&self, features: &FeatureMap, horizon: usize) -> Result<()> {
        let tables: Vec<&Vec<usize>> = match self {
            Self::Stationary(a) => vec![a],
            Self::Episodic(a) => a.iter().collect(),
        };
        if let Self::Episodic(a) = self {
            if a.len() != horizon {
                return Err(Error::InvalidModel(format!(
                    "policy covers {} steps, model has {horizon}",
                    a.len()
                )));
            }
        }
        for table in tables {
            if table.len() != features.n_states() {
                return Err(Error::InvalidModel(format!(
                    "policy covers {} states, model has {}",
                    table.len(),
                    features.n_states()
                )));
            }
            if let Some(&a) = table.iter().find(|&&a| a >= features.n_actions()) {
                return Err(Error::InvalidModel(format!("policy action {a} out of range")));
            }
        }
        Ok(())
    }
}
