//! Ridge least-squares estimation of `(theta, mu)` from generative samples,
//! and planning in the resulting plug-in MDP.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::linalg::spd_inverse;
use crate::mdp::{value_iteration_linear, FeatureMap, LinearModel, PlanningSolution};

/// Stop value iteration on a plug-in model once the sup-norm change falls
/// below this.
pub const ESTIMATE_STOP_CHANGE: f64 = 1e-10;

const PROPER_TOL: f64 = 1e-10;

/// One generative-model observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub state: usize,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

/// Running ridge regression state for one step.
#[derive(Debug, Clone)]
pub struct LseState {
    lambda: f64,
    t: u64,
    /// `Phi_t^T Phi_t + lambda I`
    gram: DMatrix<f64>,
    gram_inv: DMatrix<f64>,
    /// `Phi_t^T R_t`
    reward_moment: DVector<f64>,
    /// `d x S`; column `s'` is `Phi_t^T 1{s_i' = s'}`.
    transition_moment: DMatrix<f64>,
    scratch: DVector<f64>,
}

impl LseState {
    pub fn new(dim: usize, n_states: usize, lambda: f64) -> Self {
        assert!(lambda > 0.0, "ridge parameter must be positive");
        Self {
            lambda,
            t: 0,
            gram: DMatrix::identity(dim, dim) * lambda,
            gram_inv: DMatrix::identity(dim, dim) / lambda,
            reward_moment: DVector::zeros(dim),
            transition_moment: DMatrix::zeros(dim, n_states),
            scratch: DVector::zeros(dim),
        }
    }

    /// Ridge parameter `1/d`.
    pub fn with_default_ridge(dim: usize, n_states: usize) -> Self {
        Self::new(dim, n_states, 1.0 / dim as f64)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_inv(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }

    pub fn reward_moment(&self) -> &DVector<f64> {
        &self.reward_moment
    }

    pub fn transition_moment(&self) -> &DMatrix<f64> {
        &self.transition_moment
    }

    /// Unregularized `Phi_t^T Phi_t = t Lambda(omega_t)`.
    pub fn design_gram(&self) -> DMatrix<f64> {
        let d = self.gram.nrows();
        &self.gram - DMatrix::identity(d, d) * self.lambda
    }

    /// Adds one observation with feature `phi`. The inverse is maintained by
    /// a rank-one (Sherman-Morrison) update and refreshed from scratch when
    /// `t` reaches a power of two, or when the update breaks down.
    pub fn update(&mut self, phi: &DVector<f64>, reward: f64, next_state: usize) {
        self.t += 1;
        self.gram.ger(1.0, phi, phi, 1.0);
        self.reward_moment.axpy(reward, phi, 1.0);
        self.transition_moment.column_mut(next_state).axpy(1.0, phi, 1.0);

        self.scratch.gemv(1.0, &self.gram_inv, phi, 0.0);
        let denom = 1.0 + phi.dot(&self.scratch);
        if denom > 0.0 && denom.is_finite() && !self.t.is_power_of_two() {
            let u = &self.scratch;
            self.gram_inv.ger(-1.0 / denom, u, u, 1.0);
        } else {
            self.refactorize();
        }
    }

    pub fn update_experience(&mut self, features: &FeatureMap, e: &Experience) {
        self.update(features.phi(e.state, e.action), e.reward, e.next_state);
    }

    fn refactorize(&mut self) {
        // gram >= lambda I, so its condition number is bounded by (lambda + t) / lambda
        self.gram_inv = spd_inverse(&self.gram, f64::INFINITY)
            .expect("ridge Gram matrix is positive definite");
    }

    /// `theta_hat = gram_inv Phi^T R`.
    pub fn theta_hat(&self) -> DVector<f64> {
        &self.gram_inv * &self.reward_moment
    }

    /// `d x S` estimate whose column `s'` is `mu_hat(s')`.
    pub fn mu_hat_t(&self) -> DMatrix<f64> {
        &self.gram_inv * &self.transition_moment
    }
}

/// Plug-in parameters for one step.
#[derive(Debug, Clone)]
pub struct EstimatedStep {
    pub theta_hat: DVector<f64>,
    /// `d x S`; column `s'` is `mu_hat(s')`.
    pub mu_hat_t: DMatrix<f64>,
}

/// Plug-in model. `improper` is set when some implied transition
/// "probability" leaves `[0, 1]` or some row does not sum to one.
#[derive(Debug, Clone)]
pub struct EstimatedMdp {
    pub steps: Vec<EstimatedStep>,
    pub improper: bool,
}

impl EstimatedMdp {
    pub fn from_steps(steps: Vec<EstimatedStep>, features: &FeatureMap) -> Self {
        let improper = steps.iter().any(|st| transition_violation(st, features) > PROPER_TOL);
        Self { steps, improper }
    }

    /// The true parameters viewed as an estimate.
    pub fn from_model(model: &impl LinearModel) -> Self {
        let steps = model
            .steps()
            .iter()
            .map(|st| EstimatedStep {
                theta_hat: st.theta().clone(),
                mu_hat_t: st.mu_t().clone(),
            })
            .collect();
        Self::from_steps(steps, model.features())
    }

    /// Largest distance of an implied transition entry from `[0, 1]`, or of a
    /// row sum from one, over all steps.
    pub fn max_transition_violation(&self, features: &FeatureMap) -> f64 {
        self.steps
            .iter()
            .map(|st| transition_violation(st, features))
            .fold(0.0, f64::max)
    }
}

fn transition_violation(step: &EstimatedStep, features: &FeatureMap) -> f64 {
    let p = features.matrix() * &step.mu_hat_t;
    let mut worst: f64 = 0.0;
    for row in p.row_iter() {
        let mut total = 0.0;
        for &x in row.iter() {
            worst = worst.max(-x).max(x - 1.0);
            total += x;
        }
        worst = worst.max((total - 1.0).abs());
    }
    worst
}

/// Snapshot of one step's estimate.
pub fn estimate_step(state: &LseState) -> EstimatedStep {
    EstimatedStep {
        theta_hat: state.theta_hat(),
        mu_hat_t: state.mu_hat_t(),
    }
}

/// Plug-in model from one regression state per step (one for discounted).
pub fn estimate_mdp(states: &[LseState], features: &FeatureMap) -> EstimatedMdp {
    EstimatedMdp::from_steps(states.iter().map(estimate_step).collect(), features)
}

/// Default cap on value-iteration sweeps for plug-in discounted models.
pub fn default_estimate_iter_cap(gamma: f64) -> usize {
    4 * crate::mdp::discounted_iteration_cap(gamma, ESTIMATE_STOP_CHANGE)
}

/// Value iteration on the plug-in model with values clipped to
/// `[0, 1/(1-gamma)]`; `converged` is false when `iter_cap` sweeps did not
/// bring the change below [`ESTIMATE_STOP_CHANGE`].
pub fn plan_estimated_discounted(
    est: &EstimatedMdp,
    features: &FeatureMap,
    gamma: f64,
    iter_cap: usize,
) -> PlanningSolution {
    let step = &est.steps[0];
    value_iteration_linear(
        features,
        &step.theta_hat,
        &step.mu_hat_t,
        gamma,
        iter_cap,
        ESTIMATE_STOP_CHANGE,
    )
}

/// Backward induction on the plug-in model with `V_h` clipped to
/// `[0, H - h]` (0-indexed steps).
pub fn plan_estimated_episodic(est: &EstimatedMdp, features: &FeatureMap) -> PlanningSolution {
    let params: Vec<_> = est.steps.iter().map(|st| (&st.theta_hat, &st.mu_hat_t)).collect();
    crate::mdp::backward_induction_linear(features, &params)
}

/// Direct ridge solution from stacked rows, used to validate the
/// incremental state.
pub fn batch_ridge(
    phis: &[DVector<f64>],
    targets: &[f64],
    lambda: f64,
) -> Result<DVector<f64>> {
    let d = phis[0].len();
    let mut gram = DMatrix::identity(d, d) * lambda;
    let mut moment = DVector::zeros(d);
    for (phi, y) in phis.iter().zip(targets) {
        gram.ger(1.0, phi, phi, 1.0);
        moment.axpy(*y, phi, 1.0);
    }
    Ok(spd_inverse(&gram, f64::INFINITY)? * moment)
}
