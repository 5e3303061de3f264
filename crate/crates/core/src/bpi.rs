//! G-sampling-and-stop identification loops for discounted and episodic
//! linear MDPs, their stopping threshold and characteristic-time bounds.
//!
//! Both loops draw state-action pairs i.i.d. from a precomputed approximate
//! G-optimal design, update ridge estimates from generative samples and stop
//! once `Z(t) = t / U(M_hat_t, omega_t)` exceeds the confidence threshold.

use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::design::{g_optimal_design, sigma_of_matrix, GOptimalDesign, DEFAULT_DESIGN_ITER_CAP};
use crate::error::{Error, Result};
use crate::estimation::{
    default_estimate_iter_cap, estimate_mdp, plan_estimated_discounted, plan_estimated_episodic,
    EstimatedMdp, LseState,
};
use crate::mdp::{
    evaluate_policy_discounted, evaluate_policy_episodic, solve_discounted, solve_episodic,
    DiscountedLinearMdp, EpisodicLinearMdp, FeatureMap, HorizonSpec, LinearMdp, LinearModel,
    LinearStep, PlanningSolution, Policy, DEFAULT_TOL,
};

/// `zeta(2) = pi^2 / 6`.
pub const ZETA_2: f64 = std::f64::consts::PI * std::f64::consts::PI / 6.0;

/// Slack allowed when judging `V* - V^pi <= epsilon` with the exact solver.
pub const CORRECTNESS_TOL: f64 = 1e-9;

/// Multiple of the predicted stopping time used as the default round cap.
pub const DEFAULT_T_MAX_FACTOR: f64 = 4.0;

fn positive_margin(gap: f64, epsilon: f64) -> Result<f64> {
    let m = gap + epsilon;
    if !(m > 0.0) {
        return Err(Error::DegenerateGap(m));
    }
    Ok(m)
}

/// `10 sigma / (3 (1-gamma)^4 (gap + eps)^2)`.
pub fn u_of_design_discounted(sigma: f64, gamma: f64, gap: f64, epsilon: f64) -> Result<f64> {
    let m = positive_margin(gap, epsilon)?;
    Ok(10.0 * sigma / (3.0 * (1.0 - gamma).powi(4) * m * m))
}

/// `10 d / (3 (1-gamma)^4 (gap + eps)^2)`.
pub fn u_star_discounted(dim: usize, gamma: f64, gap: f64, epsilon: f64) -> Result<f64> {
    u_of_design_discounted(dim as f64, gamma, gap, epsilon)
}

/// `10 H^3 sigma / (3 (gap + eps)^2)`, the same design being used at every step.
pub fn u_of_design_episodic(sigma: f64, horizon: usize, gap: f64, epsilon: f64) -> Result<f64> {
    let m = positive_margin(gap, epsilon)?;
    Ok(10.0 * (horizon as f64).powi(3) * sigma / (3.0 * m * m))
}

/// `10 H^3 d / (3 (gap + eps)^2)`.
pub fn u_star_episodic(dim: usize, horizon: usize, gap: f64, epsilon: f64) -> Result<f64> {
    u_of_design_episodic(dim as f64, horizon, gap, epsilon)
}

/// `U(M, omega)^-1`, evaluated directly so that a zero margin gives zero
/// rather than an error.
pub fn inverse_u(sigma: f64, horizon: HorizonSpec, gap: f64, epsilon: f64) -> f64 {
    let m = (gap + epsilon).max(0.0);
    match horizon {
        HorizonSpec::Discounted(gamma) => 3.0 * (1.0 - gamma).powi(4) * m * m / (10.0 * sigma),
        HorizonSpec::Episodic(h) => 3.0 * m * m / (10.0 * (h as f64).powi(3) * sigma),
    }
}

/// `beta(delta, t) = (12/5) (2 ln(sqrt(e) zeta(2) t^2 / delta) + d ln(8 e^4 d t^2))`.
pub fn beta_threshold(delta: f64, t: f64, dim: usize) -> f64 {
    let d = dim as f64;
    let e = std::f64::consts::E;
    2.4 * (2.0 * (e.sqrt() * ZETA_2 * t * t / delta).ln() + d * (8.0 * e.powi(4) * d * t * t).ln())
}

/// `H beta(delta / H, t)`.
pub fn beta_threshold_episodic(delta: f64, t: f64, dim: usize, horizon: usize) -> f64 {
    let h = horizon as f64;
    h * beta_threshold(delta / h, t, dim)
}

/// Threshold matching `horizon`.
pub fn stopping_threshold(delta: f64, t: f64, dim: usize, horizon: HorizonSpec) -> f64 {
    match horizon {
        HorizonSpec::Discounted(_) => beta_threshold(delta, t, dim),
        HorizonSpec::Episodic(h) => beta_threshold_episodic(delta, t, dim, h),
    }
}

/// `Z(t) = t / U(M_hat_t, omega_t)` from the plug-in solution and the
/// realized allocation.
pub fn stopping_statistic(
    est_solution: &PlanningSolution,
    alloc: &crate::design::RealizedAllocation,
    features: &FeatureMap,
    horizon: HorizonSpec,
    epsilon: f64,
) -> Result<f64> {
    let sigma = sigma_of_matrix(features, &alloc.lambda(features)?)?;
    Ok(alloc.t() as f64 * inverse_u(sigma, horizon, est_solution.gap, epsilon))
}

/// Smallest `t >= 1` with `t / U* > 24 beta(delta, t)` (episodic:
/// `24 H beta(delta / H, t)`). An upper bracket comes from
/// [`log_bound_time`](crate::oracles::log_bound_time); the crossing is then
/// located by bisection.
pub fn predicted_stop_time(u_star: f64, delta: f64, dim: usize, horizon: Option<usize>) -> u64 {
    assert!(u_star.is_finite() && u_star >= 0.0, "U* must be finite");
    let h = horizon.unwrap_or(1) as f64;
    let delta_h = delta / h;
    let excess = |t: f64| t / u_star - 24.0 * h * beta_threshold(delta_h, t, dim);
    if u_star == 0.0 || excess(1.0) > 0.0 {
        return 1;
    }
    // beta(delta, t) = 2.4 (c + (2d + 4) ln t)
    let d = dim as f64;
    let e = std::f64::consts::E;
    let c = 2.0 * (e.sqrt() * ZETA_2 / delta_h).ln() + d * (8.0 * e.powi(4) * d).ln();
    let scale = 24.0 * 2.4 * h * u_star;
    let a = scale * (2.0 * d + 4.0);
    let b = scale * c;
    let mut hi = crate::oracles::log_bound_time(a, b).max(1.0).ceil();
    while excess(hi) <= 0.0 {
        hi *= 2.0;
    }
    // t - a ln t - b decreases up to t = a, so the first crossing lies above it
    let mut lo = a.max(1.0).floor();
    if excess(lo) > 0.0 {
        lo = 1.0;
    }
    while hi - lo > 1.0 {
        let mid = ((lo + hi) / 2.0).floor();
        if excess(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi as u64
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoppingConfig {
    pub delta: f64,
    pub epsilon: f64,
    /// Rounds between stopping checks.
    pub check_stride: u64,
    /// Round cap; `None` means `4 x predicted_stop_time`.
    pub t_max: Option<u64>,
    pub record_trace: bool,
    /// Ridge parameter; `None` means `1/d`.
    pub lambda: Option<f64>,
}

impl StoppingConfig {
    pub fn new(delta: f64, epsilon: f64) -> Self {
        Self {
            delta,
            epsilon,
            check_stride: 1,
            t_max: None,
            record_trace: false,
            lambda: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidConfig(format!("delta = {} outside (0, 1)", self.delta)));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon = {} is negative", self.epsilon)));
        }
        if self.check_stride == 0 {
            return Err(Error::InvalidConfig("check stride must be at least 1".into()));
        }
        if self.t_max == Some(0) {
            return Err(Error::InvalidConfig("t_max must be at least 1".into()));
        }
        if let Some(l) = self.lambda {
            if !(l > 0.0) {
                return Err(Error::InvalidConfig(format!("ridge parameter {l} must be positive")));
            }
        }
        Ok(())
    }
}

/// One stopping check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZSample {
    pub t: u64,
    pub z: f64,
    pub beta: f64,
    pub gap_hat: f64,
    pub sigma_t: f64,
    /// `||theta_hat - theta||` at the first step.
    pub theta_error: f64,
    /// Largest violation of the plug-in transitions' simplex constraints.
    pub transition_violation: f64,
}

/// Outcome of one identification run.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    /// Stopping round, or the cap when `capped`.
    pub tau: u64,
    pub returned_policy: Policy,
    /// Whether the returned policy is `epsilon`-optimal for the true model.
    pub correct: bool,
    /// The run hit `t_max` before the stopping rule fired.
    pub capped: bool,
    pub t_max: u64,
    /// Last computed statistic and threshold.
    pub z: f64,
    pub beta: f64,
    pub z_trace: Vec<ZSample>,
    pub seed: Option<u64>,
    pub wallclock_ms: f64,
}

impl TrialRecord {
    /// Stopped with a policy that is not `epsilon`-optimal.
    pub fn failed(&self) -> bool {
        !self.capped && !self.correct
    }
}

#[derive(Debug, Clone, Copy)]
enum Model<'a> {
    Discounted(&'a DiscountedLinearMdp),
    Episodic(&'a EpisodicLinearMdp),
}

impl Model<'_> {
    fn features(&self) -> &FeatureMap {
        match self {
            Self::Discounted(m) => m.features(),
            Self::Episodic(m) => m.features(),
        }
    }

    fn steps(&self) -> &[LinearStep] {
        match self {
            Self::Discounted(m) => m.steps(),
            Self::Episodic(m) => m.steps(),
        }
    }

    fn horizon(&self) -> HorizonSpec {
        match self {
            Self::Discounted(m) => HorizonSpec::Discounted(m.gamma()),
            Self::Episodic(m) => HorizonSpec::Episodic(m.horizon()),
        }
    }

    fn plan(&self, est: &EstimatedMdp, iter_cap: usize) -> PlanningSolution {
        match self {
            Self::Discounted(m) => plan_estimated_discounted(est, m.features(), m.gamma(), iter_cap),
            Self::Episodic(m) => plan_estimated_episodic(est, m.features()),
        }
    }

    /// `min_s V*(s) - V^pi(s)` shortfall at the first step.
    fn shortfall(&self, truth: &PlanningSolution, policy: &Policy) -> Result<f64> {
        let values = match self {
            Self::Discounted(m) => evaluate_policy_discounted(m, policy)?,
            Self::Episodic(m) => evaluate_policy_episodic(m, policy)?.swap_remove(0),
        };
        Ok(truth.values[0]
            .iter()
            .zip(&values)
            .map(|(v_star, v)| v_star - v)
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Precomputed per-instance state shared by every trial on that instance:
/// the design, its sampler and the exact solution.
#[derive(Debug, Clone)]
pub struct Identifier<'a> {
    model: Model<'a>,
    design: GOptimalDesign,
    sampler: WeightedIndex<f64>,
    truth: PlanningSolution,
    estimate_iter_cap: usize,
}

impl<'a> Identifier<'a> {
    pub fn discounted(mdp: &'a DiscountedLinearMdp, eps_g: f64) -> Result<Self> {
        let truth = solve_discounted(mdp, DEFAULT_TOL)?;
        Self::build(Model::Discounted(mdp), eps_g, truth, default_estimate_iter_cap(mdp.gamma()))
    }

    pub fn episodic(mdp: &'a EpisodicLinearMdp, eps_g: f64) -> Result<Self> {
        let truth = solve_episodic(mdp);
        Self::build(Model::Episodic(mdp), eps_g, truth, 0)
    }

    pub fn new(mdp: &'a LinearMdp, eps_g: f64) -> Result<Self> {
        match mdp {
            LinearMdp::Discounted(m) => Self::discounted(m, eps_g),
            LinearMdp::Episodic(m) => Self::episodic(m, eps_g),
        }
    }

    fn build(model: Model<'a>, eps_g: f64, truth: PlanningSolution, estimate_iter_cap: usize) -> Result<Self> {
        let design = g_optimal_design(model.features(), eps_g, DEFAULT_DESIGN_ITER_CAP)?;
        let sampler = WeightedIndex::new(design.design.weights())
            .map_err(|e| Error::InvalidDesign(e.to_string()))?;
        Ok(Self {
            model,
            design,
            sampler,
            truth,
            estimate_iter_cap,
        })
    }

    pub fn design(&self) -> &GOptimalDesign {
        &self.design
    }

    pub fn truth(&self) -> &PlanningSolution {
        &self.truth
    }

    pub fn horizon(&self) -> HorizonSpec {
        self.model.horizon()
    }

    /// `U*(M) = U(M, omega*)` with `sigma(omega*) = d`.
    pub fn u_star(&self, epsilon: f64) -> Result<f64> {
        let d = self.model.features().dim();
        match self.model.horizon() {
            HorizonSpec::Discounted(g) => u_star_discounted(d, g, self.truth.gap, epsilon),
            HorizonSpec::Episodic(h) => u_star_episodic(d, h, self.truth.gap, epsilon),
        }
    }

    pub fn predicted_stop_time(&self, delta: f64, epsilon: f64) -> Result<u64> {
        let d = self.model.features().dim();
        let h = match self.model.horizon() {
            HorizonSpec::Discounted(_) => None,
            HorizonSpec::Episodic(h) => Some(h),
        };
        Ok(predicted_stop_time(self.u_star(epsilon)?, delta, d, h))
    }

    fn default_t_max(&self, delta: f64, epsilon: f64) -> Result<u64> {
        let t = self.predicted_stop_time(delta, epsilon)? as f64 * DEFAULT_T_MAX_FACTOR;
        Ok(t.min(u64::MAX as f64 / 2.0).ceil() as u64)
    }

    /// Whether `policy` is `epsilon`-optimal at the first step.
    pub fn is_epsilon_optimal(&self, policy: &Policy, epsilon: f64) -> Result<bool> {
        Ok(self.model.shortfall(&self.truth, policy)? <= epsilon + CORRECTNESS_TOL)
    }

    /// One identification run.
    pub fn run<R: Rng + ?Sized>(&self, config: &StoppingConfig, rng: &mut R) -> Result<TrialRecord> {
        config.validate()?;
        let start = Instant::now();
        let features = self.model.features();
        let horizon = self.model.horizon();
        let d = features.dim();
        let n_states = features.n_states();
        let t_max = match config.t_max {
            Some(t) => t,
            None => self.default_t_max(config.delta, config.epsilon)?,
        };
        let lambda = config.lambda.unwrap_or(1.0 / d as f64);
        let steps = self.model.steps();
        let mut states: Vec<LseState> = steps.iter().map(|_| LseState::new(d, n_states, lambda)).collect();
        let mut trace = Vec::new();
        let (mut z, mut beta) = (0.0, f64::INFINITY);
        let mut stopped_policy = None;
        let mut t = 0u64;
        while t < t_max {
            t += 1;
            let pair = self.sampler.sample(rng);
            let phi = features.phi_at(pair);
            for (step, state) in steps.iter().zip(states.iter_mut()) {
                let (r, next) = step.sample(pair, rng);
                state.update(phi, r, next);
            }
            if !t.is_multiple_of(config.check_stride) {
                continue;
            }
            let est = estimate_mdp(&states, features);
            let plan = self.model.plan(&est, self.estimate_iter_cap);
            let sigma_t = match sigma_of_matrix(features, &states[0].design_gram()) {
                Ok(s) => s * t as f64,
                // no stopping decision while the design is singular
                Err(Error::SingularDesign { .. }) => continue,
                Err(e) => return Err(e),
            };
            z = t as f64 * inverse_u(sigma_t, horizon, plan.gap, config.epsilon);
            beta = stopping_threshold(config.delta, t as f64, d, horizon);
            if config.record_trace {
                trace.push(ZSample {
                    t,
                    z,
                    beta,
                    gap_hat: plan.gap,
                    sigma_t,
                    theta_error: (&est.steps[0].theta_hat - steps[0].theta()).norm(),
                    transition_violation: est.max_transition_violation(features),
                });
            }
            if z > beta {
                stopped_policy = Some(plan.policy);
                break;
            }
        }
        let capped = stopped_policy.is_none();
        let policy = match stopped_policy {
            Some(p) => p,
            None => {
                let est = estimate_mdp(&states, features);
                self.model.plan(&est, self.estimate_iter_cap).policy
            }
        };
        let correct = self.is_epsilon_optimal(&policy, config.epsilon)?;
        Ok(TrialRecord {
            tau: t,
            returned_policy: policy,
            correct,
            capped,
            t_max,
            z,
            beta,
            z_trace: trace,
            seed: None,
            wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    }
}

/// One GSS run on a discounted model (computes the design first).
pub fn gss_run<R: Rng + ?Sized>(
    mdp: &DiscountedLinearMdp,
    config: &StoppingConfig,
    eps_g: f64,
    rng: &mut R,
) -> Result<TrialRecord> {
    config.validate()?;
    Identifier::discounted(mdp, eps_g)?.run(config, rng)
}

/// One GSS-E run on an episodic model: each round queries the same pair at
/// every step.
pub fn gsse_run<R: Rng + ?Sized>(
    mdp: &EpisodicLinearMdp,
    config: &StoppingConfig,
    eps_g: f64,
    rng: &mut R,
) -> Result<TrialRecord> {
    config.validate()?;
    Identifier::episodic(mdp, eps_g)?.run(config, rng)
}
