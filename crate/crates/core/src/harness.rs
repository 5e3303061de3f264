//! Batch experiments: plans, seeded parallel trial execution, aggregation
//! and CSV / text / SVG reports.
//!
//! Every trial's RNG is `ChaCha8Rng::seed_from_u64(trial_seed(master, cell, i))`
//! where [`trial_seed`] takes the first 8 bytes (little endian) of
//! `SHA-256("linbpi-trial" || 0x00 || master_le || len(cell)_le || cell || i_le)`.
//! Results therefore depend only on the plan and the master seed, never on
//! the number of workers or the order in which trials are scheduled.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bpi::{Identifier, StoppingConfig, TrialRecord, ZSample, DEFAULT_T_MAX_FACTOR};
use crate::bundled::resolve_bundled;
use crate::design::DEFAULT_EPS_G;
use crate::error::{Error, Result};
use crate::mdp::{
    generate_instance, load_instance, HorizonSpec, InstanceSpec, LinearMdp, LinearModel,
};

/// Where a plan entry's instance comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceSource {
    /// JSON instance file, relative paths resolved against the plan file.
    File(PathBuf),
    /// `name` or `name:episodic`.
    Bundled(String),
    /// Random instance from the generator.
    Generate(GenerateSpec),
    #[serde(skip)]
    Inline(Box<LinearMdp>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateSpec {
    pub d: usize,
    #[serde(rename = "S")]
    pub n_states: usize,
    #[serde(rename = "A")]
    pub n_actions: usize,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(rename = "H", default)]
    pub horizon: Option<usize>,
    #[serde(default)]
    pub min_gap: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TmaxPolicy {
    /// Multiple of the predicted stopping time.
    Factor(f64),
    Fixed(u64),
}

impl Default for TmaxPolicy {
    fn default() -> Self {
        Self::Factor(DEFAULT_T_MAX_FACTOR)
    }
}

fn one() -> u64 {
    1
}

fn default_eps_g() -> f64 {
    DEFAULT_EPS_G
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanEntry {
    pub instance: InstanceSource,
    #[serde(default)]
    pub label: Option<String>,
    pub deltas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub trials: usize,
    #[serde(default = "one")]
    pub stride: u64,
    #[serde(default = "default_eps_g")]
    pub eps_g: f64,
    #[serde(default)]
    pub t_max: TmaxPolicy,
    /// Gap-sweep scales; each one yields a rescaled copy of the instance.
    #[serde(default)]
    pub scales: Option<Vec<f64>>,
    /// Check the PAC failure bound per cell and the sweep slope range.
    #[serde(default)]
    pub acceptance: bool,
}

impl PlanEntry {
    pub fn new(instance: InstanceSource, deltas: Vec<f64>, epsilons: Vec<f64>, trials: usize) -> Self {
        Self {
            instance,
            label: None,
            deltas,
            epsilons,
            trials,
            stride: 1,
            eps_g: DEFAULT_EPS_G,
            t_max: TmaxPolicy::default(),
            scales: None,
            acceptance: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub master_seed: u64,
    /// Fill the `wallclock_ms` column (makes outputs non-reproducible).
    #[serde(default)]
    pub record_wallclock: bool,
    #[serde(default)]
    pub svg: bool,
    pub entries: Vec<PlanEntry>,
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    pub fn new(master_seed: u64, entries: Vec<PlanEntry>) -> Self {
        Self {
            master_seed,
            record_wallclock: false,
            svg: false,
            entries,
            base_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::InvalidConfig("plan has no entries".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            let bad = |what: &str| Error::InvalidConfig(format!("entry {i}: {what}"));
            if e.deltas.is_empty() || e.epsilons.is_empty() {
                return Err(bad("delta and epsilon grids must be non-empty"));
            }
            if e.trials == 0 {
                return Err(bad("trials must be at least 1"));
            }
            if let Some(s) = &e.scales {
                if s.is_empty() || s.iter().any(|x| !(*x > 0.0 && *x <= 1.0)) {
                    return Err(bad("scales must be a non-empty list in (0, 1]"));
                }
            }
            if let TmaxPolicy::Factor(f) = e.t_max {
                if !(f > 0.0) {
                    return Err(bad("t_max factor must be positive"));
                }
            }
            for &delta in &e.deltas {
                for &eps in &e.epsilons {
                    let mut c = StoppingConfig::new(delta, eps);
                    c.check_stride = e.stride;
                    c.validate().map_err(|err| bad(&err.to_string()))?;
                }
            }
        }
        Ok(())
    }
}

pub fn parse_plan(json: &str) -> Result<ExperimentPlan> {
    let plan: ExperimentPlan = serde_json::from_str(json)?;
    plan.validate()?;
    Ok(plan)
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<ExperimentPlan> {
    let path = path.as_ref();
    let mut plan = parse_plan(&std::fs::read_to_string(path)?)?;
    plan.base_dir = path.parent().map(Path::to_path_buf);
    Ok(plan)
}

/// Per-trial seed; see the module documentation.
pub fn trial_seed(master_seed: u64, cell: &str, trial: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(b"linbpi-trial\0");
    h.update(master_seed.to_le_bytes());
    h.update((cell.len() as u64).to_le_bytes());
    h.update(cell.as_bytes());
    h.update(trial.to_le_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn trial_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worker count from `LINBPI_WORKERS`, else the available parallelism.
pub fn workers_from_env() -> usize {
    std::env::var("LINBPI_WORKERS")
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One member of a gap sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub scale: f64,
    pub mdp: LinearMdp,
    pub gap: f64,
}

/// Moves every step's reward toward its mean: `r' = c + scale (r - c)` with
/// `c` the average reward over pairs, by mixing `theta` with the parameter of
/// the constant reward. Requires the constant function to be linear in the
/// features (true for simplex features). The gap scales by exactly `scale`.
pub fn gap_sweep(base: &LinearMdp, scales: &[f64]) -> Result<Vec<SweepPoint>> {
    let features = base.features();
    let m = features.matrix();
    let ones = DVector::from_element(features.n_pairs(), 1.0);
    let gram = m.transpose() * m;
    let uniform = gram
        .cholesky()
        .ok_or_else(|| Error::InvalidModel("feature Gram matrix is not positive definite".into()))?
        .solve(&(m.transpose() * &ones));
    if (m * &uniform - &ones).amax() > 1e-9 {
        return Err(Error::InvalidModel(
            "constant rewards are not linear in these features".into(),
        ));
    }
    let steps: Vec<_> = match base {
        LinearMdp::Discounted(d) => d.steps().to_vec(),
        LinearMdp::Episodic(e) => e.steps().to_vec(),
    };
    scales
        .iter()
        .map(|&scale| {
            let params = steps
                .iter()
                .map(|st| {
                    let c = (m * st.theta()).mean();
                    let theta = &uniform * (c * (1.0 - scale)) + st.theta() * scale;
                    (theta, st.mu().clone())
                })
                .collect();
            let mdp: LinearMdp = match base {
                LinearMdp::Discounted(d) => d.with_parameters(params)?.into(),
                LinearMdp::Episodic(e) => e.with_parameters(params)?.into(),
            };
            let gap = mdp.solve()?.gap;
            Ok(SweepPoint { scale, mdp, gap })
        })
        .collect()
}

/// One trial as written to CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub cell: String,
    pub trial: u64,
    pub seed: u64,
    pub mode: String,
    pub d: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma_or_h: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub gap: f64,
    pub sigma_star: f64,
    pub tau: Option<u64>,
    pub correct: Option<bool>,
    pub capped: Option<bool>,
    pub wallclock_ms: Option<f64>,
    pub error: Option<String>,
}

impl TrialRow {
    pub fn failed(&self) -> bool {
        self.capped == Some(false) && self.correct == Some(false)
    }

    pub fn stopped(&self) -> bool {
        self.capped == Some(false)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cell: String,
    pub label: String,
    pub mode: String,
    pub d: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma_or_h: f64,
    pub scale: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub gap: f64,
    pub u_star: f64,
    pub predicted_stop_time: Option<u64>,
    pub trials: usize,
    pub errors: usize,
    pub capped: usize,
    pub stopped: usize,
    pub failures: usize,
    /// Failures over trials without errors.
    pub failure_rate: f64,
    /// `p -/+ 1.96 sqrt(p (1 - p) / n)`, clipped to `[0, 1]`.
    pub failure_ci_low: f64,
    pub failure_ci_high: f64,
    /// Over stopped (not capped) trials.
    pub mean_tau: f64,
    pub median_tau: f64,
    /// Nearest rank: the `ceil(0.95 n)`-th smallest.
    pub p95_tau: f64,
}

/// Log-log fit of mean tau against `(gap + eps)^-2` over a gap sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub entry: usize,
    pub label: String,
    pub delta: f64,
    pub epsilon: f64,
    /// `((gap + eps)^-2, mean tau)` per scale.
    pub points: Vec<(f64, f64)>,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct PlanResult {
    pub trials: Vec<TrialRow>,
    pub summaries: Vec<SummaryRow>,
    pub slopes: Vec<SlopeFit>,
    pub checks: Vec<CheckOutcome>,
}

impl PlanResult {
    pub fn all_checks_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

struct PreparedInstance {
    entry: usize,
    label: String,
    scale: f64,
    mdp: Result<LinearMdp>,
}

struct Cell {
    id: String,
    instance: usize,
    delta: f64,
    epsilon: f64,
}

fn load_source(source: &InstanceSource, base_dir: Option<&Path>) -> Result<LinearMdp> {
    match source {
        InstanceSource::File(p) => {
            let path = match base_dir {
                Some(b) if p.is_relative() => b.join(p),
                _ => p.clone(),
            };
            load_instance(path)
        }
        InstanceSource::Bundled(name) => resolve_bundled(name),
        InstanceSource::Generate(g) => {
            let horizon = match (g.gamma, g.horizon) {
                (Some(gamma), None) => HorizonSpec::Discounted(gamma),
                (None, Some(h)) => HorizonSpec::Episodic(h),
                _ => {
                    return Err(Error::InvalidConfig(
                        "generated instance needs exactly one of gamma and H".into(),
                    ))
                }
            };
            let spec = InstanceSpec {
                dim: g.d,
                n_states: g.n_states,
                n_actions: g.n_actions,
                horizon,
                min_gap: g.min_gap,
            };
            generate_instance(&spec, &mut trial_rng(g.seed))
        }
        InstanceSource::Inline(m) => Ok((**m).clone()),
    }
}

fn source_label(source: &InstanceSource) -> String {
    match source {
        InstanceSource::File(p) => p.display().to_string(),
        InstanceSource::Bundled(n) => n.clone(),
        InstanceSource::Generate(g) => format!("generated-d{}-S{}-A{}-seed{}", g.d, g.n_states, g.n_actions, g.seed),
        InstanceSource::Inline(_) => "inline".into(),
    }
}

fn prepare(plan: &ExperimentPlan) -> Vec<PreparedInstance> {
    let mut out = Vec::new();
    for (i, entry) in plan.entries.iter().enumerate() {
        let label = entry.label.clone().unwrap_or_else(|| source_label(&entry.instance));
        let base = load_source(&entry.instance, plan.base_dir.as_deref());
        match (&entry.scales, base) {
            (None, base) => out.push(PreparedInstance {
                entry: i,
                label,
                scale: 1.0,
                mdp: base,
            }),
            (Some(scales), Ok(base)) => match gap_sweep(&base, scales) {
                Ok(points) => out.extend(points.into_iter().map(|p| PreparedInstance {
                    entry: i,
                    label: label.clone(),
                    scale: p.scale,
                    mdp: Ok(p.mdp),
                })),
                Err(e) => out.extend(scales.iter().map(|&scale| PreparedInstance {
                    entry: i,
                    label: label.clone(),
                    scale,
                    mdp: Err(Error::InvalidModel(e.to_string())),
                })),
            },
            (Some(scales), Err(e)) => out.extend(scales.iter().map(|&scale| PreparedInstance {
                entry: i,
                label: label.clone(),
                scale,
                mdp: Err(Error::InvalidModel(e.to_string())),
            })),
        }
    }
    out
}

/// Runs every trial of the plan on a pool of `workers` threads. Trial
/// errors are recorded in their rows; only an invalid plan is an error.
pub fn run_plan(plan: &ExperimentPlan, workers: usize) -> Result<PlanResult> {
    plan.validate()?;
    let instances = prepare(plan);
    let identifiers: Vec<Result<Identifier<'_>>> = instances
        .iter()
        .map(|inst| match &inst.mdp {
            Ok(m) => Identifier::new(m, plan.entries[inst.entry].eps_g),
            Err(e) => Err(Error::InvalidModel(e.to_string())),
        })
        .collect();

    let mut cells = Vec::new();
    let mut scale_index = vec![0usize; plan.entries.len()];
    for (k, inst) in instances.iter().enumerate() {
        let entry = &plan.entries[inst.entry];
        let j = scale_index[inst.entry];
        scale_index[inst.entry] += 1;
        for (di, &delta) in entry.deltas.iter().enumerate() {
            for (xi, &epsilon) in entry.epsilons.iter().enumerate() {
                cells.push(Cell {
                    id: format!("e{}.s{}.d{}.x{}", inst.entry, j, di, xi),
                    instance: k,
                    delta,
                    epsilon,
                });
            }
        }
    }

    let work: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(c, cell)| {
            let n = plan.entries[instances[cell.instance].entry].trials as u64;
            (0..n).map(move |i| (c, i))
        })
        .collect();

    let run_one = |&(c, trial): &(usize, u64)| -> TrialRow {
        let cell = &cells[c];
        let inst = &instances[cell.instance];
        let entry = &plan.entries[inst.entry];
        let seed = trial_seed(plan.master_seed, &cell.id, trial);
        let mut row = TrialRow {
            cell: cell.id.clone(),
            trial,
            seed,
            mode: String::new(),
            d: 0,
            n_states: 0,
            n_actions: 0,
            gamma_or_h: f64::NAN,
            delta: cell.delta,
            epsilon: cell.epsilon,
            gap: f64::NAN,
            sigma_star: f64::NAN,
            tau: None,
            correct: None,
            capped: None,
            wallclock_ms: None,
            error: None,
        };
        if let Ok(m) = &inst.mdp {
            let f = m.features();
            row.mode = m.mode().to_string();
            (row.d, row.n_states, row.n_actions) = (f.dim(), f.n_states(), f.n_actions());
            row.gamma_or_h = m.gamma_or_horizon();
        }
        let outcome = identifiers[cell.instance]
            .as_ref()
            .map_err(|e| e.to_string())
            .and_then(|id| {
                row.gap = id.truth().gap;
                row.sigma_star = id.design().sigma;
                let config = cell_config(entry, id, cell.delta, cell.epsilon).map_err(|e| e.to_string())?;
                id.run(&config, &mut trial_rng(seed)).map_err(|e| e.to_string())
            });
        match outcome {
            Ok(rec) => fill_record(&mut row, &rec, plan.record_wallclock),
            Err(e) => row.error = Some(e),
        }
        row
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    let trials: Vec<TrialRow> = pool.install(|| work.par_iter().map(run_one).collect());

    let mut summaries = Vec::with_capacity(cells.len());
    let mut offset = 0;
    for cell in &cells {
        let inst = &instances[cell.instance];
        let entry = &plan.entries[inst.entry];
        let rows = &trials[offset..offset + entry.trials];
        offset += entry.trials;
        let (u_star, predicted) = match &identifiers[cell.instance] {
            Ok(id) => (
                id.u_star(cell.epsilon).unwrap_or(f64::NAN),
                id.predicted_stop_time(cell.delta, cell.epsilon).ok(),
            ),
            Err(_) => (f64::NAN, None),
        };
        summaries.push(summarize(&cell.id, &inst.label, inst.scale, u_star, predicted, rows, cell.delta, cell.epsilon));
    }

    let slopes = fit_slopes(plan, &instances, &cells, &summaries);
    let checks = acceptance_checks(plan, &instances, &cells, &summaries, &slopes);
    Ok(PlanResult {
        trials,
        summaries,
        slopes,
        checks,
    })
}

pub fn cell_config(entry: &PlanEntry, id: &Identifier<'_>, delta: f64, epsilon: f64) -> Result<StoppingConfig> {
    let mut config = StoppingConfig::new(delta, epsilon);
    config.check_stride = entry.stride;
    config.t_max = Some(match entry.t_max {
        TmaxPolicy::Fixed(n) => n,
        TmaxPolicy::Factor(f) => {
            let p = id.predicted_stop_time(delta, epsilon)? as f64;
            (f * p).ceil().clamp(1.0, u64::MAX as f64 / 2.0) as u64
        }
    });
    Ok(config)
}

fn fill_record(row: &mut TrialRow, rec: &TrialRecord, wallclock: bool) {
    row.tau = Some(rec.tau);
    row.correct = Some(rec.correct);
    row.capped = Some(rec.capped);
    row.wallclock_ms = wallclock.then_some(rec.wallclock_ms);
}

/// Aggregates one cell's trial rows.
#[allow(clippy::too_many_arguments)]
pub fn summarize(
    cell: &str,
    label: &str,
    scale: f64,
    u_star: f64,
    predicted_stop_time: Option<u64>,
    rows: &[TrialRow],
    delta: f64,
    epsilon: f64,
) -> SummaryRow {
    let first = rows.first();
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    let capped = rows.iter().filter(|r| r.capped == Some(true)).count();
    let failures = rows.iter().filter(|r| r.failed()).count();
    let mut taus: Vec<f64> = rows.iter().filter(|r| r.stopped()).filter_map(|r| r.tau).map(|t| t as f64).collect();
    taus.sort_by(f64::total_cmp);
    let judged = rows.len() - errors;
    let (rate, lo, hi) = failure_interval(failures, judged);
    SummaryRow {
        cell: cell.to_string(),
        label: label.to_string(),
        mode: first.map(|r| r.mode.clone()).unwrap_or_default(),
        d: first.map_or(0, |r| r.d),
        n_states: first.map_or(0, |r| r.n_states),
        n_actions: first.map_or(0, |r| r.n_actions),
        gamma_or_h: first.map_or(f64::NAN, |r| r.gamma_or_h),
        scale,
        delta,
        epsilon,
        gap: first.map_or(f64::NAN, |r| r.gap),
        u_star,
        predicted_stop_time,
        trials: rows.len(),
        errors,
        capped,
        stopped: taus.len(),
        failures,
        failure_rate: rate,
        failure_ci_low: lo,
        failure_ci_high: hi,
        mean_tau: mean(&taus),
        median_tau: median(&taus),
        p95_tau: nearest_rank(&taus, 0.95),
    }
}

/// Rate and normal-approximation 95% interval, clipped to `[0, 1]`.
pub fn failure_interval(failures: usize, n: usize) -> (f64, f64, f64) {
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let p = failures as f64 / n as f64;
    let half = 1.96 * (p * (1.0 - p) / n as f64).sqrt();
    (p, (p - half).max(0.0), (p + half).min(1.0))
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        f64::NAN
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Median of sorted values (average of the middle two for even counts).
pub fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => sorted[n / 2],
        _ => (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0,
    }
}

/// Nearest-rank percentile of sorted values.
pub fn nearest_rank(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(points: &[(f64, f64)]) -> f64 {
    let logs: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && x.is_finite() && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if logs.len() < 2 {
        return f64::NAN;
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn fit_slopes(
    plan: &ExperimentPlan,
    instances: &[PreparedInstance],
    cells: &[Cell],
    summaries: &[SummaryRow],
) -> Vec<SlopeFit> {
    let mut fits = Vec::new();
    for (i, entry) in plan.entries.iter().enumerate() {
        if entry.scales.is_none() {
            continue;
        }
        for &delta in &entry.deltas {
            for &epsilon in &entry.epsilons {
                let points: Vec<(f64, f64)> = cells
                    .iter()
                    .zip(summaries)
                    .filter(|(c, _)| instances[c.instance].entry == i && c.delta == delta && c.epsilon == epsilon)
                    .map(|(_, s)| ((s.gap + epsilon).powi(-2), s.mean_tau))
                    .collect();
                fits.push(SlopeFit {
                    entry: i,
                    label: instances.iter().find(|p| p.entry == i).map(|p| p.label.clone()).unwrap_or_default(),
                    delta,
                    epsilon,
                    slope: log_log_slope(&points),
                    points,
                });
            }
        }
    }
    fits
}

/// Allowed failure frequency over `n` trials: `delta + 3 sqrt(delta (1 - delta) / n)`.
pub fn pac_tolerance(delta: f64, n: usize) -> f64 {
    delta + 3.0 * (delta * (1.0 - delta) / n as f64).sqrt()
}

pub const SLOPE_RANGE: (f64, f64) = (0.5, 1.5);

fn acceptance_checks(
    plan: &ExperimentPlan,
    instances: &[PreparedInstance],
    cells: &[Cell],
    summaries: &[SummaryRow],
    slopes: &[SlopeFit],
) -> Vec<CheckOutcome> {
    let mut out = Vec::new();
    for (cell, s) in cells.iter().zip(summaries) {
        if !plan.entries[instances[cell.instance].entry].acceptance {
            continue;
        }
        let judged = s.trials - s.errors;
        let tol = pac_tolerance(s.delta, judged.max(1));
        let passed = s.errors == 0 && s.failures as f64 <= tol * judged as f64;
        out.push(CheckOutcome {
            name: format!("pac {} ({})", s.cell, s.label),
            passed,
            detail: format!(
                "{} failures / {} judged, {} capped, {} errors; allowed rate {:.4}",
                s.failures, judged, s.capped, s.errors, tol
            ),
        });
    }
    for fit in slopes {
        if !plan.entries[fit.entry].acceptance {
            continue;
        }
        let passed = fit.slope >= SLOPE_RANGE.0 && fit.slope <= SLOPE_RANGE.1;
        out.push(CheckOutcome {
            name: format!("slope e{} ({}) delta={} eps={}", fit.entry, fit.label, fit.delta, fit.epsilon),
            passed,
            detail: format!("slope {:.4}, allowed [{}, {}]", fit.slope, SLOPE_RANGE.0, SLOPE_RANGE.1),
        });
    }
    out
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else if x.is_nan() {
        String::new()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn opt<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map(ToString::to_string).unwrap_or_default()
}

/// Columns of the `run` CSV.
pub const RUN_COLUMNS: [&str; 14] = [
    "seed", "mode", "d", "S", "A", "gamma_or_H", "delta", "epsilon", "gap", "sigma_star", "tau", "correct",
    "capped", "wallclock_ms",
];

fn run_fields(r: &TrialRow) -> Vec<String> {
    vec![
        r.seed.to_string(),
        r.mode.clone(),
        r.d.to_string(),
        r.n_states.to_string(),
        r.n_actions.to_string(),
        num(r.gamma_or_h),
        num(r.delta),
        num(r.epsilon),
        num(r.gap),
        num(r.sigma_star),
        opt(&r.tau),
        opt(&r.correct),
        opt(&r.capped),
        r.wallclock_ms.map(num).unwrap_or_default(),
    ]
}

pub fn write_run_csv<W: Write>(rows: &[TrialRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(RUN_COLUMNS)?;
    for r in rows {
        out.write_record(run_fields(r))?;
    }
    out.flush()?;
    Ok(())
}

/// `run` columns framed by the cell id, trial index and error message.
pub fn write_trials_csv<W: Write>(rows: &[TrialRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["cell", "trial"];
    header.extend(RUN_COLUMNS);
    header.push("error");
    out.write_record(&header)?;
    for r in rows {
        let mut fields = vec![r.cell.clone(), r.trial.to_string()];
        fields.extend(run_fields(r));
        fields.push(r.error.clone().unwrap_or_default());
        out.write_record(fields)?;
    }
    out.flush()?;
    Ok(())
}

/// Stopping-check trace of one run: `t, z, beta, gap_hat, sigma_t,
/// theta_error, transition_violation`.
pub fn write_trace_csv<W: Write>(samples: &[ZSample], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["t", "z", "beta", "gap_hat", "sigma_t", "theta_error", "transition_violation"])?;
    for z in samples {
        out.write_record([
            z.t.to_string(),
            num(z.z),
            num(z.beta),
            num(z.gap_hat),
            num(z.sigma_t),
            num(z.theta_error),
            num(z.transition_violation),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub const SUMMARY_COLUMNS: [&str; 25] = [
    "cell",
    "label",
    "mode",
    "d",
    "S",
    "A",
    "gamma_or_H",
    "scale",
    "delta",
    "epsilon",
    "gap",
    "u_star",
    "predicted_stop_time",
    "trials",
    "errors",
    "capped",
    "stopped",
    "failures",
    "failure_rate",
    "failure_ci_low",
    "failure_ci_high",
    "mean_tau",
    "median_tau",
    "p95_tau",
    "gap_plus_eps_inv_sq",
];

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_COLUMNS)?;
    for s in rows {
        out.write_record([
            s.cell.clone(),
            s.label.clone(),
            s.mode.clone(),
            s.d.to_string(),
            s.n_states.to_string(),
            s.n_actions.to_string(),
            num(s.gamma_or_h),
            num(s.scale),
            num(s.delta),
            num(s.epsilon),
            num(s.gap),
            num(s.u_star),
            opt(&s.predicted_stop_time),
            s.trials.to_string(),
            s.errors.to_string(),
            s.capped.to_string(),
            s.stopped.to_string(),
            s.failures.to_string(),
            num(s.failure_rate),
            num(s.failure_ci_low),
            num(s.failure_ci_high),
            num(s.mean_tau),
            num(s.median_tau),
            num(s.p95_tau),
            num((s.gap + s.epsilon).powi(-2)),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Plain-text report: one line per cell, the sweep slopes and the checks.
pub fn summary_text(result: &PlanResult) -> String {
    let mut s = String::new();
    for r in &result.summaries {
        let _ = writeln!(
            s,
            "{} {} [{}] scale={} delta={} eps={} gap={:.6} U*={:.4} predicted={} trials={} stopped={} capped={} errors={} failures={} rate={:.4} [{:.4}, {:.4}] mean_tau={:.1} median_tau={:.1} p95_tau={:.1}",
            r.cell,
            r.label,
            r.mode,
            r.scale,
            r.delta,
            r.epsilon,
            r.gap,
            r.u_star,
            opt(&r.predicted_stop_time),
            r.trials,
            r.stopped,
            r.capped,
            r.errors,
            r.failures,
            r.failure_rate,
            r.failure_ci_low,
            r.failure_ci_high,
            r.mean_tau,
            r.median_tau,
            r.p95_tau
        );
    }
    for f in &result.slopes {
        let _ = writeln!(
            s,
            "slope entry={} {} delta={} eps={}: log-log slope of mean tau vs (gap+eps)^-2 = {:.4} over {} points",
            f.entry,
            f.label,
            f.delta,
            f.epsilon,
            f.slope,
            f.points.len()
        );
    }
    for c in &result.checks {
        let _ = writeln!(s, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    s
}

/// Log-log scatter of mean tau against `(gap + eps)^-2`, one series per fit.
pub fn slope_svg(fits: &[SlopeFit]) -> String {
    let (w, h, pad) = (640.0, 480.0, 60.0);
    let pts: Vec<(f64, f64)> = fits
        .iter()
        .flat_map(|f| f.points.iter().copied())
        .filter(|(x, y)| *x > 0.0 && *y > 0.0 && y.is_finite())
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    );
    if !pts.is_empty() {
        let span = |sel: fn(&(f64, f64)) -> f64| {
            let lo = pts.iter().map(sel).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = span(|p| p.0);
        let (y0, y1) = span(|p| p.1);
        let px = |x: f64| pad + (x - x0) / (x1 - x0) * (w - 2.0 * pad);
        let py = |y: f64| h - pad - (y - y0) / (y1 - y0) * (h - 2.0 * pad);
        let _ = writeln!(
            svg,
            "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
            h - pad,
            w - pad,
            h - pad,
            h - pad
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">ln (gap + eps)^-2</text>\n<text x=\"15\" y=\"{}\" font-size=\"14\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">ln mean tau</text>",
            w / 2.0,
            h - 15.0,
            h / 2.0,
            h / 2.0
        );
        let colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];
        for (i, f) in fits.iter().enumerate() {
            let color = colors[i % colors.len()];
            for &(x, y) in &f.points {
                if x > 0.0 && y > 0.0 && y.is_finite() {
                    let _ = writeln!(
                        svg,
                        "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"{color}\"/>",
                        px(x.ln()),
                        py(y.ln())
                    );
                }
            }
            let _ = writeln!(
                svg,
                "<text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{} delta={} eps={} slope={:.3}</text>",
                pad + 10.0,
                pad + 16.0 * (i as f64 + 1.0),
                f.label,
                f.delta,
                f.epsilon,
                f.slope
            );
        }
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes `trials.csv`, `summary.csv`, `summary.txt` and, when asked,
/// `slopes.svg` into `dir`. Returns the written paths.
pub fn report(result: &PlanResult, dir: impl AsRef<Path>, svg: bool) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let trials = dir.join("trials.csv");
    write_trials_csv(&result.trials, std::fs::File::create(&trials)?)?;
    let summary = dir.join("summary.csv");
    write_summary_csv(&result.summaries, std::fs::File::create(&summary)?)?;
    let text = dir.join("summary.txt");
    std::fs::write(&text, summary_text(result))?;
    let mut paths = vec![trials, summary, text];
    if svg {
        let p = dir.join("slopes.svg");
        std::fs::write(&p, slope_svg(&result.slopes))?;
        paths.push(p);
    }
    Ok(paths)
}
