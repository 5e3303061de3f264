//! Exact planning on linear MDPs through the parametric Bellman map
//! `xi = theta + gamma * mu^T V`, `Q = Phi xi`.

use nalgebra::{DMatrix, DVector};

use super::{DiscountedLinearMdp, EpisodicLinearMdp, FeatureMap, LinearMdp, LinearModel, Policy};
use crate::error::{Error, Result};

/// Default sup-norm tolerance for value iteration.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Optimal (or plug-in optimal) values, action values, greedy policy and gap.
///
/// Tables are indexed `[step][state]` and `[step][pair]`; discounted
/// solutions have a single step.
#[derive(Debug, Clone)]
pub struct PlanningSolution {
    pub values: Vec<Vec<f64>>,
    pub q_values: Vec<Vec<f64>>,
    pub policy: Policy,
    /// Minimum over steps, states and non-greedy actions of `V(s) - Q(s, a)`.
    /// Infinite when there is a single action.
    pub gap: f64,
    pub iterations: usize,
    pub converged: bool,
    n_actions: usize,
}

impl PlanningSolution {
    pub fn value(&self, step: usize, state: usize) -> f64 {
        self.values[step][state]
    }

    pub fn q(&self, step: usize, state: usize, action: usize) -> f64 {
        self.q_values[step][state * self.n_actions + action]
    }

    pub fn n_steps(&self) -> usize {
        self.values.len()
    }
}

/// Greedy actions (strict `>`, so ties go to the smallest index) and the gap
/// computed from the unclipped action values.
fn greedy(q: &[f64], n_states: usize, n_actions: usize) -> (Vec<usize>, Vec<f64>, f64) {
    let mut actions = Vec::with_capacity(n_states);
    let mut best = Vec::with_capacity(n_states);
    let mut gap = f64::INFINITY;
    for s in 0..n_states {
        let row = &q[s * n_actions..(s + 1) * n_actions];
        let mut arg = 0;
        for a in 1..n_actions {
            if row[a] > row[arg] {
                arg = a;
            }
        }
        for (a, &qa) in row.iter().enumerate() {
            if a != arg {
                gap = gap.min(row[arg] - qa);
            }
        }
        actions.push(arg);
        best.push(row[arg]);
    }
    (actions, best, gap)
}

/// One parametric Bellman backup: returns `Phi (theta + scale * mu_t v)`.
fn backup(
    features: &FeatureMap,
    theta: &DVector<f64>,
    mu_t: &DMatrix<f64>,
    scale: f64,
    v: &DVector<f64>,
    xi: &mut DVector<f64>,
    q: &mut DVector<f64>,
) {
    xi.copy_from(theta);
    xi.gemv(scale, mu_t, v, 1.0);
    q.gemv(1.0, features.matrix(), xi, 0.0);
}

/// Discounted value iteration on parameters `(theta, mu_t)` (`mu_t` is
/// `d x S`), with values clipped to `[0, 1/(1-gamma)]` after every backup.
///
/// Stops after `iter_cap` backups or once the sup-norm change is at most
/// `stop_change`. The returned `values` equal the clipped greedy values of
/// the returned `q_values`.
pub fn value_iteration_linear(
    features: &FeatureMap,
    theta: &DVector<f64>,
    mu_t: &DMatrix<f64>,
    gamma: f64,
    iter_cap: usize,
    stop_change: f64,
) -> PlanningSolution {
    value_iteration_inner(features, theta, mu_t, gamma, iter_cap, |change, _| {
        change <= stop_change
    })
}

fn value_iteration_inner(
    features: &FeatureMap,
    theta: &DVector<f64>,
    mu_t: &DMatrix<f64>,
    gamma: f64,
    iter_cap: usize,
    done: impl Fn(f64, usize) -> bool,
) -> PlanningSolution {
    let (n_states, n_actions) = (features.n_states(), features.n_actions());
    let vmax = 1.0 / (1.0 - gamma);
    let mut v = DVector::zeros(n_states);
    let mut xi = DVector::zeros(features.dim());
    let mut q = DVector::zeros(features.n_pairs());
    let mut iterations = 0;
    let mut converged = false;
    while iterations < iter_cap.max(1) {
        backup(features, theta, mu_t, gamma, &v, &mut xi, &mut q);
        iterations += 1;
        let mut change: f64 = 0.0;
        for s in 0..n_states {
            let row = &q.as_slice()[s * n_actions..(s + 1) * n_actions];
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let next = best.clamp(0.0, vmax);
            change = change.max((next - v[s]).abs());
            v[s] = next;
        }
        if change.is_nan() {
            break;
        }
        if done(change, iterations) {
            converged = true;
            break;
        }
    }
    let (actions, _, gap) = greedy(q.as_slice(), n_states, n_actions);
    PlanningSolution {
        values: vec![v.as_slice().to_vec()],
        q_values: vec![q.as_slice().to_vec()],
        policy: Policy::Stationary(actions),
        gap,
        iterations,
        converged,
        n_actions,
    }
}

/// Backward induction on per-step parameters `(theta_h, mu_t_h)`, clipping
/// `V_h` to `[0, H - h]` (0-indexed steps).
pub(crate) fn backward_induction_linear(
    features: &FeatureMap,
    params: &[(&DVector<f64>, &DMatrix<f64>)],
) -> PlanningSolution {
    let horizon = params.len();
    let (n_states, n_actions) = (features.n_states(), features.n_actions());
    let mut values = vec![Vec::new(); horizon];
    let mut q_values = vec![Vec::new(); horizon];
    let mut actions = vec![Vec::new(); horizon];
    let mut gap = f64::INFINITY;
    let mut next = DVector::zeros(n_states);
    let mut xi = DVector::zeros(features.dim());
    let mut q = DVector::zeros(features.n_pairs());
    for h in (0..horizon).rev() {
        let (theta, mu_t) = params[h];
        backup(features, theta, mu_t, 1.0, &next, &mut xi, &mut q);
        let (act, best, g) = greedy(q.as_slice(), n_states, n_actions);
        gap = gap.min(g);
        let vmax = (horizon - h) as f64;
        for s in 0..n_states {
            next[s] = best[s].clamp(0.0, vmax);
        }
        values[h] = next.as_slice().to_vec();
        q_values[h] = q.as_slice().to_vec();
        actions[h] = act;
    }
    PlanningSolution {
        values,
        q_values,
        policy: Policy::Episodic(actions),
        gap,
        iterations: horizon,
        converged: true,
        n_actions,
    }
}

/// Iteration cap `ceil(ln((1-gamma)^-1 / tol) / ln(1/gamma)) + 1`.
pub(crate) fn discounted_iteration_cap(gamma: f64, tol: f64) -> usize {
    let raw = ((1.0 / (1.0 - gamma)) / tol).ln() / (1.0 / gamma).ln();
    raw.ceil().max(0.0) as usize + 1
}

/// Optimal values, greedy policy and gap of a discounted model, `tol`-accurate
/// in sup norm.
pub fn solve_discounted(mdp: &DiscountedLinearMdp, tol: f64) -> Result<PlanningSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidConfig(format!("tolerance must be positive, got {tol}")));
    }
    let gamma = mdp.gamma();
    let cap = discounted_iteration_cap(gamma, tol);
    // Either a posteriori (contraction) or a priori (k backups from V = 0)
    // error bound certifies accuracy.
    let sol = value_iteration_inner(
        mdp.features(),
        mdp.theta(),
        mdp.step().mu_t(),
        gamma,
        cap,
        |change, k| {
            change * gamma / (1.0 - gamma) <= tol || gamma.powi(k as i32) / (1.0 - gamma) <= tol
        },
    );
    if !sol.converged {
        return Err(Error::NonConvergence {
            iterations: sol.iterations,
            residual: f64::NAN,
        });
    }
    Ok(sol)
}

/// Exact backward induction on an episodic model.
pub fn solve_episodic(mdp: &EpisodicLinearMdp) -> PlanningSolution {
    let params: Vec<_> = mdp.steps().iter().map(|st| (st.theta(), st.mu_t())).collect();
    backward_induction_linear(mdp.features(), &params)
}

/// `V^pi` of a stationary policy by solving `(I - gamma P_pi) V = r_pi`.
pub fn evaluate_policy_discounted(mdp: &DiscountedLinearMdp, policy: &Policy) -> Result<Vec<f64>> {
    let features = mdp.features();
    policy.validate(features, 1)?;
    let n = features.n_states();
    let gamma = mdp.gamma();
    let mut system = DMatrix::identity(n, n);
    let mut rhs = DVector::zeros(n);
    for s in 0..n {
        let a = policy.action(0, s);
        rhs[s] = mdp.reward(s, a);
        for (sp, &p) in mdp.transition(s, a).iter().enumerate() {
            system[(s, sp)] -= gamma * p;
        }
    }
    let v = system
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidModel("policy evaluation system is singular".into()))?;
    Ok(v.as_slice().to_vec())
}

/// `V^pi_h` for every step, `[step][state]`.
pub fn evaluate_policy_episodic(mdp: &EpisodicLinearMdp, policy: &Policy) -> Result<Vec<Vec<f64>>> {
    let features = mdp.features();
    let horizon = mdp.horizon();
    if let Policy::Episodic(_) = policy {
        policy.validate(features, horizon)?;
    } else {
        policy.validate(features, 1)?;
    }
    let n = features.n_states();
    let mut values = vec![vec![0.0; n]; horizon];
    let mut next = vec![0.0; n];
    for h in (0..horizon).rev() {
        for (s, value) in values[h].iter_mut().enumerate() {
            let a = policy.action(if policy.n_steps() == 1 { 0 } else { h }, s);
            let row = mdp.transition(h, s, a);
            *value = mdp.reward(h, s, a) + row.iter().zip(&next).map(|(p, v)| p * v).sum::<f64>();
        }
        next.clone_from(&values[h]);
    }
    Ok(values)
}

/// Value table `[step][state]` of a policy on either kind of model.
pub fn evaluate_policy(mdp: &LinearMdp, policy: &Policy) -> Result<Vec<Vec<f64>>> {
    match mdp {
        LinearMdp::Discounted(m) => Ok(vec![evaluate_policy_discounted(m, policy)?]),
        LinearMdp::Episodic(m) => evaluate_policy_episodic(m, policy),
    }
}

/// `Q(s, a) = r(s, a) + gamma sum_s' p(s, a, s') v(s')`, indexed by pair.
pub fn q_from_values_discounted(mdp: &DiscountedLinearMdp, v: &[f64]) -> Vec<f64> {
    let features = mdp.features();
    (0..features.n_pairs())
        .map(|pair| {
            let step = mdp.step();
            step.reward(pair)
                + mdp.gamma() * step.transition(pair).iter().zip(v).map(|(p, x)| p * x).sum::<f64>()
        })
        .collect()
}

/// Per-step `Q_h = r_h + P_h V_{h+1}` from a `[step][state]` value table,
/// with `V_{H+1} = 0`.
pub fn q_from_values_episodic(mdp: &EpisodicLinearMdp, values: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let features = mdp.features();
    let horizon = mdp.horizon();
    let zero = vec![0.0; features.n_states()];
    (0..horizon)
        .map(|h| {
            let next = if h + 1 < horizon { &values[h + 1] } else { &zero };
            let step = mdp.step(h);
            (0..features.n_pairs())
                .map(|pair| {
                    step.reward(pair)
                        + step.transition(pair).iter().zip(next).map(|(p, x)| p * x).sum::<f64>()
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::mdp::{generate_instance, HorizonSpec, InstanceSpec};

    fn single_state(rewards: &[f64], gamma: f64) -> DiscountedLinearMdp {
        let a = rewards.len();
        let features = Arc::new(FeatureMap::tabular(1, a).unwrap());
        let theta = DVector::from_column_slice(rewards);
        let mu = DMatrix::from_element(1, a, 1.0);
        DiscountedLinearMdp::new(features, gamma, theta, mu).unwrap()
    }

    #[test]
    fn geometric_series() {
        let m = single_state(&[1.0], 0.5);
        let sol = solve_discounted(&m, 1e-10).unwrap();
        assert_abs_diff_eq!(sol.value(0, 0), 2.0, epsilon = 1e-10);
        assert!(sol.gap.is_infinite());
    }

    #[test]
    fn two_action_bandit_state() {
        let m = single_state(&[1.0, 0.0], 0.5);
        let sol = solve_discounted(&m, 1e-10).unwrap();
        assert_abs_diff_eq!(sol.value(0, 0), 2.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.q(0, 0, 1), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.gap, 1.0, epsilon = 1e-9);
        assert_eq!(sol.policy, Policy::Stationary(vec![0]));
    }

    #[test]
    fn evaluate_constant_reward() {
        let m = single_state(&[0.5], 0.9);
        let v = evaluate_policy_discounted(&m, &Policy::Stationary(vec![0])).unwrap();
        assert_abs_diff_eq!(v[0], 5.0, epsilon = 1e-12);
    }

    #[test]
    fn ties_pick_smallest_action() {
        let m = single_state(&[0.3, 0.3], 0.5);
        let sol = solve_discounted(&m, 1e-10).unwrap();
        assert_eq!(sol.policy.action(0, 0), 0);
        assert_eq!(sol.gap, 0.0);
    }

    #[test]
    fn episodic_one_shot_and_two_steps() {
        let features = Arc::new(FeatureMap::tabular(1, 2).unwrap());
        let param = || (dvector![1.0, 0.0], dmatrix![1.0, 1.0]);
        let one = EpisodicLinearMdp::new(features.clone(), vec![param()]).unwrap();
        let sol = solve_episodic(&one);
        assert_eq!(sol.value(0, 0), 1.0);
        let two = EpisodicLinearMdp::new(features, vec![param(), param()]).unwrap();
        let sol = solve_episodic(&two);
        assert_abs_diff_eq!(sol.value(0, 0), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.gap, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn iteration_cap_formula() {
        // ln(2 / 1e-10) / ln 2 = 34.2 -> 35 + 1
        assert_eq!(discounted_iteration_cap(0.5, 1e-10), 36);
    }

    /// Every deterministic stationary policy, evaluated by linear solve.
    fn enumerate_discounted(m: &DiscountedLinearMdp) -> Vec<f64> {
        let (s, a) = (m.features().n_states(), m.features().n_actions());
        let mut best = vec![f64::NEG_INFINITY; s];
        for code in 0..a.pow(s as u32) {
            let actions = (0..s).map(|i| (code / a.pow(i as u32)) % a).collect();
            let v = evaluate_policy_discounted(m, &Policy::Stationary(actions)).unwrap();
            for i in 0..s {
                best[i] = best[i].max(v[i]);
            }
        }
        best
    }

    #[test]
    fn discounted_matches_policy_enumeration() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let spec = InstanceSpec {
                dim: 3,
                n_states: 3,
                n_actions: 2,
                horizon: HorizonSpec::Discounted(0.8),
                min_gap: 0.0,
            };
            let m = generate_instance(&spec, &mut rng).unwrap();
            let m = m.as_discounted().unwrap();
            let sol = solve_discounted(m, 1e-10).unwrap();
            let oracle = enumerate_discounted(m);
            for s in 0..3 {
                assert_abs_diff_eq!(sol.value(0, s), oracle[s], epsilon = 1e-8);
            }
            let v = evaluate_policy_discounted(m, &sol.policy).unwrap();
            for s in 0..3 {
                assert_abs_diff_eq!(v[s], sol.value(0, s), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn episodic_matches_policy_enumeration() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let spec = InstanceSpec {
                dim: 2,
                n_states: 2,
                n_actions: 2,
                horizon: HorizonSpec::Episodic(3),
                min_gap: 0.0,
            };
            let m = generate_instance(&spec, &mut rng).unwrap();
            let m = m.as_episodic().unwrap();
            let sol = solve_episodic(m);
            // 2 states x 3 steps -> 2^6 deterministic Markov policies
            let mut best = vec![f64::NEG_INFINITY; 2];
            for code in 0..64usize {
                let table = (0..3)
                    .map(|h| (0..2).map(|s| (code >> (2 * h + s)) & 1).collect())
                    .collect();
                let v = evaluate_policy_episodic(m, &Policy::Episodic(table)).unwrap();
                for s in 0..2 {
                    best[s] = best[s].max(v[0][s]);
                }
            }
            for s in 0..2 {
                assert_abs_diff_eq!(sol.value(0, s), best[s], epsilon = 1e-10);
            }
            for h in 0..3 {
                for s in 0..2 {
                    let q = &sol.q_values[h][s * 2..s * 2 + 2];
                    assert_abs_diff_eq!(sol.value(h, s), q[0].max(q[1]), epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn rollout_agrees_with_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = InstanceSpec {
            dim: 3,
            n_states: 3,
            n_actions: 2,
            horizon: HorizonSpec::Discounted(0.5),
            min_gap: 0.0,
        };
        let m = generate_instance(&spec, &mut rng).unwrap();
        let m = m.as_discounted().unwrap();
        let policy = Policy::Stationary(vec![1, 0, 1]);
        let v = evaluate_policy_discounted(m, &policy).unwrap();
        // truncation at 40 steps leaves bias <= 0.5^40 / 0.5
        let runs = 100_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..runs {
            let (mut s, mut disc, mut ret) = (0, 1.0, 0.0);
            for _ in 0..40 {
                let (r, next) = m.sample_transition(s, policy.action(0, s), &mut rng);
                ret += disc * r;
                disc *= 0.5;
                s = next;
            }
            sum += ret;
            sum_sq += ret * ret;
        }
        let mean = sum / runs as f64;
        let se = ((sum_sq / runs as f64 - mean * mean) / runs as f64).sqrt();
        assert!((mean - v[0]).abs() <= 3.0 * se, "mean {mean} vs {} (se {se})", v[0]);
    }
}
