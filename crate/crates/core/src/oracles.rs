//! Executable forms of the bound chain behind the sample-complexity
//! analysis: KL divergences between linear MDPs, the relaxed characteristic
//! time, value-difference and gap-continuity inequalities, and helpers used
//! to check them on random instances.
//!
//! Each check returns the two sides of its inequality so that callers can
//! report margins; a violation of any of them means a bug, since the
//! inequalities are theorems.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::bpi::{beta_threshold, u_star_discounted, u_star_episodic};
use crate::design::{lambda_of_design, sigma_of_design, sigma_of_matrix, Design};
use crate::error::{Error, Result};
use crate::estimation::{
    default_estimate_iter_cap, estimate_mdp, plan_estimated_discounted, plan_estimated_episodic,
    EstimatedMdp, LseState,
};
use crate::linalg::{quad_form, spd_inverse, sup_norm_diff};
use crate::mdp::{
    evaluate_policy_discounted, evaluate_policy_episodic, dirichlet_ones,
    q_from_values_discounted, q_from_values_episodic, FeatureMap, LinearMdp, LinearModel,
    PlanningSolution, Policy,
};

/// Slack for floating-point error when comparing the two sides of an
/// inequality.
pub const LEMMA_TOL: f64 = 1e-8;

/// Two sides of `lhs <= rhs`; `applicable` is false when the inequality's
/// hypothesis does not hold, in which case it is vacuous.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Inequality {
    pub applicable: bool,
    pub lhs: f64,
    pub rhs: f64,
}

impl Inequality {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        Self {
            applicable: true,
            lhs,
            rhs,
        }
    }

    pub fn vacuous() -> Self {
        Self {
            applicable: false,
            lhs: f64::NAN,
            rhs: f64::NAN,
        }
    }

    pub fn holds(&self) -> bool {
        !self.applicable || self.lhs <= self.rhs + LEMMA_TOL * (1.0 + self.rhs.abs())
    }

    /// `rhs - lhs`; infinite when vacuous.
    pub fn margin(&self) -> f64 {
        if self.applicable {
            self.rhs - self.lhs
        } else {
            f64::INFINITY
        }
    }
}

/// Base model `M` and alternative `M'` on the same features, with the
/// entry-wise absolute-continuity table of `M << M'`.
#[derive(Debug, Clone)]
pub struct MdpPair {
    base: LinearMdp,
    alt: LinearMdp,
    /// `[step][pair]`
    continuity: Vec<Vec<bool>>,
}

fn steps_of(m: &LinearMdp) -> &[crate::mdp::LinearStep] {
    match m {
        LinearMdp::Discounted(d) => d.steps(),
        LinearMdp::Episodic(e) => e.steps(),
    }
}

impl MdpPair {
    pub fn new(base: LinearMdp, alt: LinearMdp) -> Result<Self> {
        if base.features() != alt.features() {
            return Err(Error::InvalidModel("pair members must share the feature map".into()));
        }
        if base.mode() != alt.mode() || base.gamma_or_horizon() != alt.gamma_or_horizon() {
            return Err(Error::InvalidModel(
                "pair members must share the discount or horizon".into(),
            ));
        }
        let continuity = steps_of(&base)
            .iter()
            .zip(steps_of(&alt))
            .map(|(sb, sa)| {
                (0..base.features().n_pairs())
                    .map(|pair| {
                        let (r, r2) = (sb.reward(pair), sa.reward(pair));
                        let rewards_ok = (r <= 0.0 || r2 > 0.0) && (r >= 1.0 || r2 < 1.0);
                        let transitions_ok = sb
                            .transition(pair)
                            .iter()
                            .zip(sa.transition(pair))
                            .all(|(p, q)| *p <= 0.0 || *q > 0.0);
                        rewards_ok && transitions_ok
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            base,
            alt,
            continuity,
        })
    }

    pub fn base(&self) -> &LinearMdp {
        &self.base
    }

    pub fn alt(&self) -> &LinearMdp {
        &self.alt
    }

    /// `M << M'` at every step and pair.
    pub fn is_continuous(&self) -> bool {
        self.continuity.iter().flatten().all(|&c| c)
    }

    pub fn continuous_at(&self, step: usize, pair: usize) -> bool {
        self.continuity[step][pair]
    }
}

/// Bernoulli KL `kl(a, b)` with `0 ln 0 = 0`; infinite when the support of
/// `a` is not contained in that of `b`.
pub fn kl_bernoulli(a: f64, b: f64) -> f64 {
    let term = |x: f64, y: f64| {
        if x <= 0.0 {
            0.0
        } else if y <= 0.0 {
            f64::INFINITY
        } else {
            x * (x / y).ln()
        }
    };
    term(a, b) + term(1.0 - a, 1.0 - b)
}

/// KL between two categorical distributions (natural log).
pub fn kl_categorical(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&x, &y)| {
            if x <= 0.0 {
                0.0
            } else if y <= 0.0 {
                f64::INFINITY
            } else {
                x * (x / y).ln()
            }
        })
        .sum()
}

/// `KL(q_M(s,a) || q_M'(s,a)) + KL(p_M(s,a) || p_M'(s,a))` at `step`.
pub fn kl_mdp(pair: &MdpPair, step: usize, state: usize, action: usize) -> Result<f64> {
    let features = pair.base.features();
    let idx = features.pair_index(state, action);
    let (sb, sa) = (&steps_of(&pair.base)[step], &steps_of(&pair.alt)[step]);
    if !pair.continuity[step][idx] {
        return Err(Error::AbsoluteContinuityViolated {
            step,
            state,
            action,
            detail: "base puts mass where the alternative has none".into(),
        });
    }
    Ok(kl_bernoulli(sb.reward(idx), sa.reward(idx))
        + kl_categorical(sb.transition(idx), sa.transition(idx)))
}

/// `sum_h sum_(s,a) omega(s,a) KL_h(s,a)`, the same design at every step.
pub fn weighted_kl(pair: &MdpPair, design: &Design) -> Result<f64> {
    let features = pair.base.features();
    let mut total = 0.0;
    for step in 0..pair.continuity.len() {
        for (idx, &w) in design.weights().iter().enumerate() {
            if w > 0.0 {
                let (s, a) = features.pair(idx);
                total += w * kl_mdp(pair, step, s, a)?;
            }
        }
    }
    Ok(total)
}

/// Certified lower bound on `T(M, omega)^-1`:
/// `3 (1-gamma)^4 (gap + eps)^2 / (10 sigma(omega))`, or
/// `3 (gap + eps)^2 / (10 H^2 sum_h sigma(omega))` with the same design at
/// every step.
pub fn relaxed_characteristic_inverse(mdp: &LinearMdp, design: &Design, epsilon: f64) -> Result<f64> {
    let sigma = sigma_of_design(design, mdp.features())?;
    let gap = mdp.solve()?.gap;
    let m = gap + epsilon;
    Ok(match mdp {
        LinearMdp::Discounted(d) => 3.0 * (1.0 - d.gamma()).powi(4) * m * m / (10.0 * sigma),
        LinearMdp::Episodic(e) => {
            let h = e.horizon() as f64;
            3.0 * m * m / (10.0 * h * h * (h * sigma))
        }
    })
}

/// `V^pi` and `Q^pi` tables `[step][...]` of a policy.
/// Value and action-value tables `[step][state]`, `[step][state * A + action]`.
type Tables = (Vec<Vec<f64>>, Vec<Vec<f64>>);

fn policy_tables(m: &LinearMdp, policy: &Policy) -> Result<Tables> {
    match m {
        LinearMdp::Discounted(d) => {
            let v = evaluate_policy_discounted(d, policy)?;
            let q = q_from_values_discounted(d, &v);
            Ok((vec![v], vec![q]))
        }
        LinearMdp::Episodic(e) => {
            let v = evaluate_policy_episodic(e, policy)?;
            let q = q_from_values_episodic(e, &v);
            Ok((v, q))
        }
    }
}

/// Whether `policy` is `epsilon`-optimal in `m` given its optimal values,
/// judged at the first step.
fn shortfall(solution: &PlanningSolution, values: &[Vec<f64>]) -> f64 {
    solution.values[0]
        .iter()
        .zip(&values[0])
        .map(|(a, b)| a - b)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Gap bound: when `pi*_M` is not `epsilon`-optimal in `M'`,
/// `gap(M) + eps <= ||V*_M - V^{pi*_M}_M'|| + ||Q*_M - Q*_M'||` (episodic: for
/// some step, the reported right side is the maximum over steps).
pub fn gap_bound_check(pair: &MdpPair, epsilon: f64) -> Result<Inequality> {
    let base = pair.base.solve()?;
    let alt = pair.alt.solve()?;
    let (v_alt_pi, _) = policy_tables(&pair.alt, &base.policy)?;
    if !(shortfall(&alt, &v_alt_pi) > epsilon + LEMMA_TOL) {
        return Ok(Inequality::vacuous());
    }
    let rhs = (0..base.n_steps())
        .map(|h| {
            sup_norm_diff(&base.values[h], &v_alt_pi[h]) + sup_norm_diff(&base.q_values[h], &alt.q_values[h])
        })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Inequality::new(base.gap + epsilon, rhs))
}

/// `max_(s,a) |phi(s,a)^T (theta1 - theta2 + scale (mu1 - mu2)^T v)|` and the
/// vector inside.
fn parameter_gap(
    features: &FeatureMap,
    theta1: &DVector<f64>,
    mu1_t: &DMatrix<f64>,
    theta2: &DVector<f64>,
    mu2_t: &DMatrix<f64>,
    scale: f64,
    v: &[f64],
) -> (f64, DVector<f64>) {
    let v = DVector::from_column_slice(v);
    let x = theta1 - theta2 + (mu1_t - mu2_t) * v * scale;
    let worst = (features.matrix() * &x).amax();
    (worst, x)
}

fn step_params(m: &LinearMdp) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    steps_of(m).iter().map(|s| (s.theta().clone(), s.mu_t().clone())).collect()
}

/// Per-step bound terms `max |phi^T (theta1_h - theta2_h + g (mu1_h - mu2_h)^T V_{h+1})|`
/// (discounted: one term with `V` itself), using `values` from the first model.
fn value_terms(
    features: &FeatureMap,
    first: &[(DVector<f64>, DMatrix<f64>)],
    second: &[(DVector<f64>, DMatrix<f64>)],
    discount: Option<f64>,
    values: &[Vec<f64>],
) -> Vec<(f64, DVector<f64>)> {
    let zero = vec![0.0; features.n_states()];
    (0..first.len())
        .map(|h| {
            let (scale, v) = match discount {
                Some(g) => (g, &values[0]),
                None => (1.0, values.get(h + 1).unwrap_or(&zero)),
            };
            parameter_gap(features, &first[h].0, &first[h].1, &second[h].0, &second[h].1, scale, v)
        })
        .collect()
}

/// The chained inequalities of the two value-difference lemmas.
#[derive(Debug, Clone)]
pub struct ValueDiffReport {
    /// `||V^pi_M - V^pi_M'|| <= ||Q^pi_M - Q^pi_M'||`, then `<= bound`, per step.
    pub same_policy: Vec<Inequality>,
    /// Same chain for the optimal values of each model.
    pub optimal_policy: Vec<Inequality>,
}

impl ValueDiffReport {
    pub fn all(&self) -> impl Iterator<Item = &Inequality> {
        self.same_policy.iter().chain(&self.optimal_policy)
    }

    pub fn violations(&self) -> usize {
        self.all().filter(|i| !i.holds()).count()
    }

    pub fn worst_margin(&self) -> f64 {
        self.all().map(Inequality::margin).fold(f64::INFINITY, f64::min)
    }
}

/// Discounted: `||dV|| <= ||dQ|| <= max|phi^T(theta - theta' + gamma (mu - mu')^T V_M)| / (1-gamma)`
/// for `V = V^pi` and `V = V*`. Episodic: for every `h0`,
/// `||dV_h0|| <= ||dQ_h0|| <= sum_{h >= h0} max|phi^T(theta_h - theta'_h + (mu_h - mu'_h)^T V_{M,h+1})|`.
pub fn value_diff_checks(pair: &MdpPair, policy: &Policy) -> Result<ValueDiffReport> {
    let features = pair.base.features();
    let discount = match &pair.base {
        LinearMdp::Discounted(d) => Some(d.gamma()),
        LinearMdp::Episodic(_) => None,
    };
    let first = step_params(&pair.base);
    let second = step_params(&pair.alt);
    let chain = |v1: &[Vec<f64>], q1: &[Vec<f64>], v2: &[Vec<f64>], q2: &[Vec<f64>]| {
        let terms = value_terms(features, &first, &second, discount, v1);
        let mut out = Vec::new();
        for h0 in 0..v1.len() {
            let dv = sup_norm_diff(&v1[h0], &v2[h0]);
            let dq = sup_norm_diff(&q1[h0], &q2[h0]);
            let bound = match discount {
                Some(g) => terms[0].0 / (1.0 - g),
                None => terms[h0..].iter().map(|t| t.0).sum(),
            };
            out.push(Inequality::new(dv, dq));
            out.push(Inequality::new(dq, bound));
        }
        out
    };
    let (v1, q1) = policy_tables(&pair.base, policy)?;
    let (v2, q2) = policy_tables(&pair.alt, policy)?;
    let same_policy = chain(&v1, &q1, &v2, &q2);
    let s1 = pair.base.solve()?;
    let s2 = pair.alt.solve()?;
    let optimal_policy = chain(&s1.values, &s1.q_values, &s2.values, &s2.q_values);
    Ok(ValueDiffReport {
        same_policy,
        optimal_policy,
    })
}

/// Lemma-style bound `KL(alpha || beta) >= 6 (E_alpha f - E_beta f)^2 / (5 ||f||^2)`;
/// returns `(KL, bound)`.
pub fn kl_pinsker_variant_check(alpha: &[f64], beta: &[f64], f: &[f64]) -> Result<(f64, f64)> {
    if alpha.len() != beta.len() || alpha.len() != f.len() {
        return Err(Error::InvalidConfig("alpha, beta and f must have equal length".into()));
    }
    if let Some(i) = (0..alpha.len()).find(|&i| alpha[i] > 0.0 && beta[i] <= 0.0) {
        return Err(Error::SupportViolation(format!(
            "alpha[{i}] = {} > 0 but beta[{i}] = 0",
            alpha[i]
        )));
    }
    if f.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::InvalidConfig("f must be non-negative and finite".into()));
    }
    let kl = kl_categorical(alpha, beta);
    let sup = f.iter().copied().fold(0.0, f64::max);
    if sup == 0.0 {
        return Ok((kl, 0.0));
    }
    let mean = |p: &[f64]| p.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
    let diff = mean(alpha) - mean(beta);
    Ok((kl, 6.0 * diff * diff / (5.0 * sup * sup)))
}

/// `inf sum_i ||x_i||^2_{Lambda_i}` subject to `sum_i |phi_i^T x_i| >= delta`:
/// value `delta^2 / sum_i ||phi_i||^2_{Lambda_i^-1}`, attained at
/// `x_i = delta Lambda_i^-1 phi_i / sum_j ||phi_j||^2_{Lambda_j^-1}`.
pub fn optimization_closed_form(
    phis: &[DVector<f64>],
    lambdas: &[DMatrix<f64>],
    delta: f64,
) -> Result<(f64, Vec<DVector<f64>>)> {
    if phis.len() != lambdas.len() || phis.is_empty() {
        return Err(Error::InvalidConfig("need one matrix per feature".into()));
    }
    let inverses = lambdas
        .iter()
        .map(|l| spd_inverse(l, crate::linalg::CONDITION_CAP))
        .collect::<Result<Vec<_>>>()?;
    let total: f64 = phis.iter().zip(&inverses).map(|(p, inv)| quad_form(inv, p)).sum();
    let xs = phis.iter().zip(&inverses).map(|(p, inv)| inv * p * (delta / total)).collect();
    Ok((delta * delta / total, xs))
}

/// Plug-in planning matching the model's mode.
fn plan(model: &LinearMdp, est: &EstimatedMdp) -> PlanningSolution {
    match model {
        LinearMdp::Discounted(d) => {
            plan_estimated_discounted(est, d.features(), d.gamma(), default_estimate_iter_cap(d.gamma()))
        }
        LinearMdp::Episodic(e) => plan_estimated_episodic(est, e.features()),
    }
}

fn estimate_params(est: &EstimatedMdp) -> Vec<(DVector<f64>, DMatrix<f64>)> {
    est.steps.iter().map(|s| (s.theta_hat.clone(), s.mu_hat_t.clone())).collect()
}

/// `x_h = theta_hat_h - theta_h + g (mu_hat_h - mu_h)^T V_hat_{h+1}` for every
/// step (discounted: one vector with `V_hat`), plus each one's worst feature
/// projection.
fn estimate_errors(model: &LinearMdp, est: &EstimatedMdp, plug: &PlanningSolution) -> Vec<(f64, DVector<f64>)> {
    let discount = match model {
        LinearMdp::Discounted(d) => Some(d.gamma()),
        LinearMdp::Episodic(_) => None,
    };
    value_terms(model.features(), &estimate_params(est), &step_params(model), discount, &plug.values)
}

/// Gap continuity: `|gap(M_hat) - gap(M)| <= 2/(1-gamma) max|phi^T x|`
/// (episodic: `2 sum_h max|phi^T x_h|`). Vacuous when the plug-in planner
/// did not converge or either gap is infinite.
pub fn gap_continuity_check(model: &LinearMdp, est: &EstimatedMdp) -> Result<Inequality> {
    let truth = model.solve()?;
    let plug = plan(model, est);
    if !plug.converged || !plug.gap.is_finite() || !truth.gap.is_finite() {
        return Ok(Inequality::vacuous());
    }
    let terms = estimate_errors(model, est, &plug);
    let rhs = match model {
        LinearMdp::Discounted(d) => 2.0 * terms[0].0 / (1.0 - d.gamma()),
        LinearMdp::Episodic(_) => 2.0 * terms.iter().map(|t| t.0).sum::<f64>(),
    };
    Ok(Inequality::new((plug.gap - truth.gap).abs(), rhs))
}

/// `|U*(M)^-1 - U(M_hat, omega_t)^-1| <= B(t)` with
/// `B = 6 (1-gamma)^2 ||x||^2_Lambda + (5/4 - d/sigma_t) U*^-1`
/// (episodic: `6/H^2 sum_h ||x_h||^2_Lambda + ...`), where `Lambda = Lambda(omega_t)`.
pub fn u_diff_check(model: &LinearMdp, est: &EstimatedMdp, lambda_t: &DMatrix<f64>, epsilon: f64) -> Result<Inequality> {
    let truth = model.solve()?;
    let plug = plan(model, est);
    if !plug.converged || !plug.gap.is_finite() || !truth.gap.is_finite() {
        return Ok(Inequality::vacuous());
    }
    let features = model.features();
    let d = features.dim();
    let sigma_t = sigma_of_matrix(features, lambda_t)?;
    let terms = estimate_errors(model, est, &plug);
    let horizon = match model {
        LinearMdp::Discounted(m) => crate::mdp::HorizonSpec::Discounted(m.gamma()),
        LinearMdp::Episodic(m) => crate::mdp::HorizonSpec::Episodic(m.horizon()),
    };
    let (u_star_inv, weighted) = match model {
        LinearMdp::Discounted(m) => {
            let g = m.gamma();
            let u = u_star_discounted(d, g, truth.gap, epsilon)?;
            (1.0 / u, 6.0 * (1.0 - g).powi(2) * quad_form(lambda_t, &terms[0].1))
        }
        LinearMdp::Episodic(m) => {
            let h = m.horizon() as f64;
            let u = u_star_episodic(d, m.horizon(), truth.gap, epsilon)?;
            let sum: f64 = terms.iter().map(|t| quad_form(lambda_t, &t.1)).sum();
            (1.0 / u, 6.0 / (h * h) * sum)
        }
    };
    let u_hat_inv = crate::bpi::inverse_u(sigma_t, horizon, plug.gap, epsilon);
    let bound = weighted + (1.25 - d as f64 / sigma_t) * u_star_inv;
    Ok(Inequality::new((u_star_inv - u_hat_inv).abs(), bound))
}

/// Sufficient time for `t > a ln t + b`: `2a ln(2a) + 2b`, or `2b` when
/// `a <= 0`.
pub fn log_bound_time(a: f64, b: f64) -> f64 {
    if a <= 0.0 {
        2.0 * b
    } else {
        2.0 * a * (2.0 * a).ln() + 2.0 * b
    }
}

/// Self-normalized least-squares error bound at round `t` for one step:
/// `2 c^2 (2 ln(sqrt(e) zeta(2) t^2 / delta) + d ln(8 e^4 d t^2))` with
/// `c = 1/(1-gamma)` (discounted) or `c = H` (episodic, called with `delta/H`).
pub fn lse_concentration_bound(delta: f64, t: f64, dim: usize, value_scale: f64) -> f64 {
    2.0 * value_scale * value_scale * beta_threshold(delta, t, dim) / 2.4
}

/// Per-step `||theta_hat - theta + g (mu_hat - mu)^T V_hat||^2_{t Lambda(omega_t)}`
/// against its high-probability bound.
pub fn lse_concentration_check(
    model: &LinearMdp,
    states: &[LseState],
    est: &EstimatedMdp,
    plug: &PlanningSolution,
    delta: f64,
) -> Vec<Inequality> {
    let d = model.features().dim();
    let t = states[0].t() as f64;
    let terms = estimate_errors(model, est, plug);
    let (delta_step, scale) = match model {
        LinearMdp::Discounted(m) => (delta, 1.0 / (1.0 - m.gamma())),
        LinearMdp::Episodic(m) => (delta / m.horizon() as f64, m.horizon() as f64),
    };
    let bound = lse_concentration_bound(delta_step, t, d, scale);
    terms
        .iter()
        .zip(states)
        .map(|((_, x), st)| Inequality::new(quad_form(&st.design_gram(), x), bound))
        .collect()
}

/// State of a sampling replay at a checkpoint.
pub struct ReplayPoint<'a> {
    pub t: u64,
    pub states: &'a [LseState],
    pub estimate: &'a EstimatedMdp,
    pub plan: &'a PlanningSolution,
}

/// Drives the design-sampling loop of the identification algorithms without
/// a stopping rule, calling `visit` every `stride` rounds up to `t_max`.
/// `visit` returns `false` to end the replay early.
pub fn replay_sampling<R: Rng + ?Sized>(
    model: &LinearMdp,
    design: &Design,
    t_max: u64,
    stride: u64,
    rng: &mut R,
    mut visit: impl FnMut(&ReplayPoint<'_>) -> bool,
) -> Result<()> {
    use rand::distr::weighted::WeightedIndex;
    use rand::distr::Distribution;

    let features = model.features();
    let sampler =
        WeightedIndex::new(design.weights()).map_err(|e| Error::InvalidDesign(e.to_string()))?;
    let steps = steps_of(model);
    let mut states: Vec<LseState> = steps
        .iter()
        .map(|_| LseState::with_default_ridge(features.dim(), features.n_states()))
        .collect();
    for t in 1..=t_max {
        let pair = sampler.sample(rng);
        let phi = features.phi_at(pair);
        for (step, state) in steps.iter().zip(states.iter_mut()) {
            let (r, next) = step.sample(pair, rng);
            state.update(phi, r, next);
        }
        if t % stride.max(1) == 0 {
            let est = estimate_mdp(&states, features);
            let plug = plan(model, &est);
            let point = ReplayPoint {
                t,
                states: &states,
                estimate: &est,
                plan: &plug,
            };
            if !visit(&point) {
                break;
            }
        }
    }
    Ok(())
}

/// `Lambda(omega_t)` of a replay point, when nonsingular.
pub fn replay_lambda(point: &ReplayPoint<'_>) -> DMatrix<f64> {
    point.states[0].design_gram() / point.t as f64
}

/// Mixes every step's parameters with random valid ones:
/// `theta' = (1-eta) theta + eta u`, `mu' = (1-eta) mu + eta D` with `u`
/// uniform on `[0,1]^d` and the columns of `D` uniform on the simplex.
/// Draws that violate the model constraints are rejected (up to `budget`).
pub fn perturb_model<R: Rng + ?Sized>(model: &LinearMdp, eta: f64, budget: usize, rng: &mut R) -> Result<LinearMdp> {
    let d = model.features().dim();
    let n_states = model.features().n_states();
    let mut last = None;
    for _ in 0..budget.max(1) {
        let params: Vec<_> = steps_of(model)
            .iter()
            .map(|st| {
                let u = DVector::from_fn(d, |_, _| rng.random::<f64>());
                let mut mix = DMatrix::zeros(n_states, d);
                for k in 0..d {
                    mix.set_column(k, &dirichlet_ones(n_states, rng));
                }
                (st.theta() * (1.0 - eta) + u * eta, st.mu() * (1.0 - eta) + mix * eta)
            })
            .collect();
        let built = match model {
            LinearMdp::Discounted(m) => m.with_parameters(params).map(LinearMdp::from),
            LinearMdp::Episodic(m) => m.with_parameters(params).map(LinearMdp::from),
        };
        match built {
            Ok(m) => return Ok(m),
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// Random alternative `M'` with `M << M'` for which `pi*_M` is not
/// `epsilon`-optimal, by rejection sampling over [`perturb_model`].
pub fn random_alternative<R: Rng + ?Sized>(
    model: &LinearMdp,
    epsilon: f64,
    budget: usize,
    rng: &mut R,
) -> Result<Option<MdpPair>> {
    let base = model.solve()?;
    for _ in 0..budget {
        let eta = 0.05 + 0.9 * rng.random::<f64>();
        let alt = perturb_model(model, eta, 100, rng)?;
        let pair = MdpPair::new(model.clone(), alt)?;
        if !pair.is_continuous() {
            continue;
        }
        let alt_solution = pair.alt.solve()?;
        let (v, _) = policy_tables(&pair.alt, &base.policy)?;
        if shortfall(&alt_solution, &v) > epsilon + LEMMA_TOL {
            return Ok(Some(pair));
        }
    }
    Ok(None)
}

/// `(sum omega KL, relaxed bound)` for an alternative in the relaxed
/// alternative set, `None` otherwise.
pub fn relaxed_bound_check(pair: &MdpPair, design: &Design, epsilon: f64) -> Result<Option<Inequality>> {
    if !pair.is_continuous() {
        return Ok(None);
    }
    let base = pair.base.solve()?;
    let alt = pair.alt.solve()?;
    let (v, _) = policy_tables(&pair.alt, &base.policy)?;
    if !(shortfall(&alt, &v) > epsilon + LEMMA_TOL) {
        return Ok(None);
    }
    let relaxed = relaxed_characteristic_inverse(&pair.base, design, epsilon)?;
    Ok(Some(Inequality::new(relaxed, weighted_kl(pair, design)?)))
}

/// `Lambda(omega)` convenience for callers holding a design.
pub fn design_matrix(design: &Design, features: &FeatureMap) -> Result<DMatrix<f64>> {
    lambda_of_design(design, features)
}

/// Aggregate outcome of one randomized lemma suite.
#[derive(Debug, Clone, PartialEq)]
pub struct LemmaSummary {
    pub name: String,
    /// Instances on which the inequality was applicable and evaluated.
    pub instances: usize,
    pub violations: usize,
    /// Smallest `rhs - lhs` seen.
    pub worst_margin: f64,
}

impl LemmaSummary {
    fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            instances: 0,
            violations: 0,
            worst_margin: f64::INFINITY,
        }
    }

    fn record(&mut self, ineq: &Inequality) {
        if !ineq.applicable {
            return;
        }
        self.instances += 1;
        if !ineq.holds() {
            self.violations += 1;
        }
        self.worst_margin = self.worst_margin.min(ineq.margin());
    }

    /// Counts one instance made of several inequalities.
    fn record_all<'a>(&mut self, ineqs: impl IntoIterator<Item = &'a Inequality>) {
        let mut worst = f64::INFINITY;
        let mut bad = false;
        let mut any = false;
        for i in ineqs.into_iter().filter(|i| i.applicable) {
            any = true;
            bad |= !i.holds();
            worst = worst.min(i.margin());
        }
        if any {
            self.instances += 1;
            self.violations += usize::from(bad);
            self.worst_margin = self.worst_margin.min(worst);
        }
    }
}

/// Suite sizes of [`run_battery`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatterySizes {
    /// Qualifying pairs per mode for the gap bound.
    pub gap_bound: usize,
    /// Random pairs per mode for the value-difference chains.
    pub value_diff: usize,
    /// Random `(alpha, beta, f)` triples.
    pub pinsker: usize,
    /// Random perturbed estimates per mode for gap continuity and `U` difference.
    pub continuity: usize,
    /// Qualifying alternatives per mode for the relaxed bound.
    pub relaxed: usize,
    /// Random instances for the closed-form optimization.
    pub optimization: usize,
}

impl Default for BatterySizes {
    fn default() -> Self {
        Self {
            gap_bound: 100,
            value_diff: 100,
            pinsker: 10_000,
            continuity: 200,
            relaxed: 50,
            optimization: 100,
        }
    }
}

const BATTERY_EPSILON: f64 = 0.05;

fn battery_model<R: Rng + ?Sized>(episodic: bool, rng: &mut R) -> Result<LinearMdp> {
    let dim: usize = rng.random_range(2..=4);
    let n_actions: usize = rng.random_range(2..=3);
    let n_states = rng.random_range(dim.div_ceil(n_actions).max(2)..=5);
    let horizon = if episodic {
        crate::mdp::HorizonSpec::Episodic(rng.random_range(2..=4))
    } else {
        crate::mdp::HorizonSpec::Discounted(rng.random_range(0.3..0.9))
    };
    let spec = crate::mdp::InstanceSpec {
        dim,
        n_states,
        n_actions,
        horizon,
        min_gap: 0.0,
    };
    crate::mdp::generate_instance(&spec, rng)
}

fn random_policy<R: Rng + ?Sized>(model: &LinearMdp, rng: &mut R) -> Policy {
    let f = model.features();
    let mut stationary = || (0..f.n_states()).map(|_| rng.random_range(0..f.n_actions())).collect::<Vec<_>>();
    match model {
        LinearMdp::Discounted(_) => Policy::Stationary(stationary()),
        LinearMdp::Episodic(e) => Policy::Episodic((0..e.horizon()).map(|_| stationary()).collect()),
    }
}

fn random_simplex<R: Rng + ?Sized>(n: usize, zeros: bool, rng: &mut R) -> Vec<f64> {
    let mut p: Vec<f64> = dirichlet_ones(n, rng).iter().copied().collect();
    if zeros {
        for x in p.iter_mut() {
            if rng.random::<f64>() < 0.3 {
                *x = 0.0;
            }
        }
        let s: f64 = p.iter().sum();
        if s == 0.0 {
            p[0] = 1.0;
        } else {
            p.iter_mut().for_each(|x| *x /= s);
        }
    }
    p
}

fn random_spd<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::StandardNormal;
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

/// Runs every randomized lemma suite from `seed` and reports per-lemma
/// instance counts, violations and worst margins.
pub fn run_battery(seed: u64, sizes: &BatterySizes) -> Result<Vec<LemmaSummary>> {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for (episodic, mode) in [(false, "discounted"), (true, "episodic")] {
        let mut gap = LemmaSummary::new(format!("gap_bound_check ({mode})"));
        let mut relaxed = LemmaSummary::new(format!("relaxed_characteristic_inverse ({mode})"));
        let mut attempts = 0;
        while gap.instances < sizes.gap_bound || relaxed.instances < sizes.relaxed {
            attempts += 1;
            if attempts > 100 * (sizes.gap_bound + sizes.relaxed + 1) {
                return Err(Error::ResampleBudgetExhausted {
                    attempts,
                    best_gap: f64::NAN,
                });
            }
            let model = battery_model(episodic, &mut rng)?;
            let Some(pair) = random_alternative(&model, BATTERY_EPSILON, 50, &mut rng)? else {
                continue;
            };
            if gap.instances < sizes.gap_bound {
                gap.record(&gap_bound_check(&pair, BATTERY_EPSILON)?);
            }
            if relaxed.instances < sizes.relaxed {
                let n = model.features().n_pairs();
                let design = if rng.random::<bool>() {
                    crate::design::g_optimal_design(model.features(), 1e-3, crate::design::DEFAULT_DESIGN_ITER_CAP)?.design
                } else {
                    Design::new(dirichlet_ones(n, &mut rng).iter().copied().collect())?
                };
                if let Some(ineq) = relaxed_bound_check(&pair, &design, BATTERY_EPSILON)? {
                    relaxed.record(&ineq);
                }
            }
        }
        out.push(gap);
        out.push(relaxed);

        let mut vd = LemmaSummary::new(format!("value_diff_checks ({mode})"));
        while vd.instances < sizes.value_diff {
            let model = battery_model(episodic, &mut rng)?;
            let eta = rng.random_range(0.01..1.0);
            let alt = perturb_model(&model, eta, 100, &mut rng)?;
            let pair = MdpPair::new(model.clone(), alt)?;
            let policy = random_policy(&model, &mut rng);
            vd.record_all(value_diff_checks(&pair, &policy)?.all());
        }
        out.push(vd);

        let mut gc = LemmaSummary::new(format!("gap_continuity_check ({mode})"));
        let mut ud = LemmaSummary::new(format!("u_diff_check ({mode})"));
        let mut draws = 0;
        while gc.instances < sizes.continuity && draws < 20 * sizes.continuity + 20 {
            draws += 1;
            let model = battery_model(episodic, &mut rng)?;
            let f = model.features();
            let d = f.dim();
            let mut est = match &model {
                LinearMdp::Discounted(m) => EstimatedMdp::from_model(m),
                LinearMdp::Episodic(m) => EstimatedMdp::from_model(m),
            };
            let size = 10f64.powf(rng.random_range(-3.0..0.0));
            for st in est.steps.iter_mut() {
                st.theta_hat += DVector::from_fn(d, |_, _| size * rng.sample::<f64, _>(StandardNormal));
                st.mu_hat_t += DMatrix::from_fn(d, f.n_states(), |_, _| size * rng.sample::<f64, _>(StandardNormal));
            }
            let weights: Vec<f64> = dirichlet_ones(f.n_pairs(), &mut rng).iter().copied().collect();
            let lam = lambda_of_design(&Design::new(weights)?, f)?;
            if sigma_of_matrix(f, &lam).is_err() {
                continue;
            }
            gc.record(&gap_continuity_check(&model, &est)?);
            ud.record(&u_diff_check(&model, &est, &lam, BATTERY_EPSILON)?);
        }
        // replay of a fixed-seed sampling trace
        let model = battery_model(episodic, &mut rng)?;
        let design = crate::design::g_optimal_design(
            model.features(),
            crate::design::DEFAULT_EPS_G,
            crate::design::DEFAULT_DESIGN_ITER_CAP,
        )?
        .design;
        let mut failure = None;
        replay_sampling(&model, &design, 2000, 20, &mut rng, |p| {
            let lam = replay_lambda(p);
            if sigma_of_matrix(model.features(), &lam).is_err() {
                return true;
            }
            match (gap_continuity_check(&model, p.estimate), u_diff_check(&model, p.estimate, &lam, BATTERY_EPSILON)) {
                (Ok(a), Ok(b)) => {
                    gc.record(&a);
                    ud.record(&b);
                    true
                }
                (Err(e), _) | (_, Err(e)) => {
                    failure = Some(e);
                    false
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        out.push(gc);
        out.push(ud);
    }

    let mut pinsker = LemmaSummary::new("kl_pinsker_variant_check");
    for _ in 0..sizes.pinsker {
        let n = rng.random_range(2..=10);
        let beta = random_simplex(n, false, &mut rng);
        let alpha = random_simplex(n, true, &mut rng);
        let scale = 10f64.powf(rng.random_range(-2.0..2.0));
        let f: Vec<f64> = (0..n).map(|_| scale * rng.random::<f64>()).collect();
        let (kl, bound) = kl_pinsker_variant_check(&alpha, &beta, &f)?;
        pinsker.record(&Inequality::new(bound, kl));
    }
    out.push(pinsker);

    let mut opt = LemmaSummary::new("optimization_closed_form");
    for _ in 0..sizes.optimization {
        let n = rng.random_range(1..=5);
        let d = rng.random_range(1..=6);
        let phis: Vec<DVector<f64>> =
            (0..n).map(|_| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
        let lams: Vec<DMatrix<f64>> = (0..n).map(|_| random_spd(d, &mut rng)).collect();
        let delta = rng.random_range(0.1..2.0);
        let (value, xs) = optimization_closed_form(&phis, &lams, delta)?;
        let objective = |xs: &[DVector<f64>]| lams.iter().zip(xs).map(|(l, x)| quad_form(l, x)).sum::<f64>();
        let mut checks = vec![
            Inequality::new((objective(&xs) - value).abs(), 1e-9 * value.max(1.0)),
            Inequality::new(
                (phis.iter().zip(&xs).map(|(p, x)| p.dot(x).abs()).sum::<f64>() - delta).abs(),
                1e-10 * delta.max(1.0),
            ),
        ];
        // random feasible points never beat the closed form
        for _ in 0..20 {
            let ys: Vec<DVector<f64>> =
                (0..n).map(|_| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
            let reach: f64 = phis.iter().zip(&ys).map(|(p, y)| p.dot(y).abs()).sum();
            if reach > 1e-9 {
                let ys: Vec<_> = ys.iter().map(|y| y * (delta / reach)).collect();
                checks.push(Inequality::new(value, objective(&ys)));
            }
        }
        opt.record_all(&checks);
    }
    out.push(opt);

    let mut logb = LemmaSummary::new("log_bound_time");
    for i in 0..40 {
        for j in 0..40 {
            let a = 0.5 * (2e4f64).powf(i as f64 / 39.0);
            let b = if j == 0 { 0.0 } else { 1e4f64.powf((j - 1) as f64 / 38.0) };
            let t = log_bound_time(a, b);
            logb.record(&Inequality::new(a * t.ln() + b, t));
        }
    }
    out.push(logb);

    Ok(out)
}
