use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use linbpi::bundled::resolve_bundled;
use linbpi::design::{g_optimal_design, DEFAULT_DESIGN_ITER_CAP, DEFAULT_EPS_G};
use linbpi::harness::{
    cell_config, load_plan, report, run_plan, summary_text, trial_rng, trial_seed, workers_from_env,
    write_run_csv, write_trace_csv, ExperimentPlan, InstanceSource, PlanEntry, TmaxPolicy,
};
use linbpi::mdp::{generate_instance, load_instance, save_instance, HorizonSpec, InstanceSpec, LinearMdp, Policy};
use linbpi::oracles::{run_battery, BatterySizes};
use linbpi::bpi::Identifier;

#[derive(Parser)]
#[command(name = "linbpi", version, about = "Best-policy identification in linear MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute an approximate G-optimal design for an instance.
    Design {
        #[command(flatten)]
        instance: InstanceArg,
        #[arg(long, default_value_t = DEFAULT_EPS_G)]
        eps_g: f64,
        /// Write the weights of every pair to this CSV.
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Solve an instance exactly: values, greedy policy and gap.
    Solve {
        #[command(flatten)]
        instance: InstanceArg,
    },
    /// Run identification trials on one instance.
    Run(RunArgs),
    /// Run an experiment plan (JSON) and write reports.
    Bench {
        plan: PathBuf,
        #[arg(long, default_value = "bench-out")]
        out: PathBuf,
        /// Worker threads (default: LINBPI_WORKERS or all cores).
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run the randomized lemma battery.
    Oracles {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Write a random instance file.
    Generate {
        #[arg(long)]
        d: usize,
        #[arg(long = "states")]
        n_states: usize,
        #[arg(long = "actions")]
        n_actions: usize,
        #[arg(long, conflicts_with = "horizon")]
        gamma: Option<f64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        min_gap: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct InstanceArg {
    /// Instance JSON file.
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Bundled instance: `twin`, `switch`, `ring`, optionally `:episodic`.
    #[arg(long)]
    bundled: Option<String>,
}

impl InstanceArg {
    fn load(&self) -> Result<LinearMdp> {
        match (&self.instance, &self.bundled) {
            (Some(p), _) => load_instance(p).with_context(|| format!("loading {}", p.display())),
            (None, Some(n)) => Ok(resolve_bundled(n)?),
            (None, None) => bail!("need --instance or --bundled"),
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    instance: InstanceArg,
    #[arg(long, default_value_t = 0.1)]
    delta: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 1)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    stride: u64,
    #[arg(long, default_value_t = DEFAULT_EPS_G)]
    eps_g: f64,
    /// Round cap (default: 4 x predicted stopping time).
    #[arg(long)]
    t_max: Option<u64>,
    /// CSV output (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the stopping-check trace of the first trial to this CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    /// Fill the wallclock_ms column.
    #[arg(long)]
    wallclock: bool,
}

fn fmt_policy(p: &Policy) -> String {
    match p {
        Policy::Stationary(a) => format!("{a:?}"),
        Policy::Episodic(steps) => steps.iter().map(|a| format!("{a:?}")).collect::<Vec<_>>().join(" "),
    }
}

fn design(instance: &InstanceArg, eps_g: f64, weights: Option<&PathBuf>) -> Result<()> {
    let m = instance.load()?;
    let f = m.features();
    let g = g_optimal_design(f, eps_g, DEFAULT_DESIGN_ITER_CAP)?;
    println!("d = {}, pairs = {}", f.dim(), f.n_pairs());
    println!("sigma = {:.6} (d = {})", g.sigma, f.dim());
    println!("iterations = {}", g.iterations);
    println!("certified (sigma <= (1 + eps_g) d): {}", g.certified(f.dim(), eps_g));
    println!("support:");
    for pair in g.design.support() {
        let (s, a) = f.pair(pair);
        println!("  s={s} a={a} weight={:.6}", g.design.weights()[pair]);
    }
    if let Some(path) = weights {
        let mut w = File::create(path)?;
        writeln!(w, "state,action,weight")?;
        for (pair, x) in g.design.weights().iter().enumerate() {
            let (s, a) = f.pair(pair);
            writeln!(w, "{s},{a},{x}")?;
        }
    }
    Ok(())
}

fn solve(instance: &InstanceArg) -> Result<()> {
    let m = instance.load()?;
    let sol = m.solve()?;
    println!("mode = {}, parameter = {}", m.mode(), m.gamma_or_horizon());
    println!("gap = {}", sol.gap);
    println!("iterations = {}, converged = {}", sol.iterations, sol.converged);
    println!("policy = {}", fmt_policy(&sol.policy));
    for (h, v) in sol.values.iter().enumerate() {
        println!("V[{h}] = {v:?}");
    }
    Ok(())
}

fn run(args: &RunArgs) -> Result<()> {
    let m = args.instance.load()?;
    let mut entry = PlanEntry::new(
        InstanceSource::Inline(Box::new(m.clone())),
        vec![args.delta],
        vec![args.epsilon],
        args.trials,
    );
    entry.stride = args.stride;
    entry.eps_g = args.eps_g;
    if let Some(t) = args.t_max {
        entry.t_max = TmaxPolicy::Fixed(t);
    }
    let mut plan = ExperimentPlan::new(args.seed, vec![entry.clone()]);
    plan.record_wallclock = args.wallclock;
    let workers = args.workers.unwrap_or_else(workers_from_env);
    let result = run_plan(&plan, workers)?;
    match &args.out {
        Some(p) => write_run_csv(&result.trials, File::create(p)?)?,
        None => write_run_csv(&result.trials, io::stdout().lock())?,
    }
    for row in result.trials.iter().filter(|r| r.error.is_some()) {
        eprintln!("trial {}: {}", row.trial, row.error.as_deref().unwrap_or_default());
    }
    if let Some(path) = &args.trace {
        // replays trial 0 with its derived seed, recording every check
        let id = Identifier::new(&m, args.eps_g)?;
        let mut config = cell_config(&entry, &id, args.delta, args.epsilon)?;
        config.record_trace = true;
        let cell = &result.trials[0].cell;
        let rec = id.run(&config, &mut trial_rng(trial_seed(args.seed, cell, 0)))?;
        write_trace_csv(&rec.z_trace, File::create(path)?)?;
    }
    Ok(())
}

fn bench(plan: &PathBuf, out: &PathBuf, workers: Option<usize>) -> Result<bool> {
    let plan = load_plan(plan).with_context(|| format!("loading plan {}", plan.display()))?;
    let result = run_plan(&plan, workers.unwrap_or_else(workers_from_env))?;
    let paths = report(&result, out, plan.svg)?;
    print!("{}", summary_text(&result));
    for p in paths {
        eprintln!("wrote {}", p.display());
    }
    Ok(result.all_checks_passed())
}

fn oracles(seed: u64) -> Result<bool> {
    let summaries = run_battery(seed, &BatterySizes::default())?;
    let mut ok = true;
    println!("{:<46} {:>9} {:>10} {:>14}", "lemma", "instances", "violations", "worst margin");
    for s in &summaries {
        ok &= s.violations == 0;
        println!("{:<46} {:>9} {:>10} {:>14.6e}", s.name, s.instances, s.violations, s.worst_margin);
    }
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Design { instance, eps_g, weights } => design(instance, *eps_g, weights.as_ref()).map(|_| true),
        Command::Solve { instance } => solve(instance).map(|_| true),
        Command::Run(args) => run(args).map(|_| true),
        Command::Bench { plan, out, workers } => bench(plan, out, *workers),
        Command::Oracles { seed } => oracles(*seed),
        Command::Generate {
            d,
            n_states,
            n_actions,
            gamma,
            horizon,
            min_gap,
            seed,
            out,
        } => (|| {
            let horizon = match (gamma, horizon) {
                (Some(g), None) => HorizonSpec::Discounted(*g),
                (None, Some(h)) => HorizonSpec::Episodic(*h),
                _ => bail!("need exactly one of --gamma and --horizon"),
            };
            let spec = InstanceSpec {
                dim: *d,
                n_states: *n_states,
                n_actions: *n_actions,
                horizon,
                min_gap: *min_gap,
            };
            let m = generate_instance(&spec, &mut trial_rng(*seed))?;
            save_instance(&m, out)?;
            println!("gap = {}", m.solve()?.gap);
            Ok(true)
        })(),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
