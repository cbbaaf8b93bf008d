use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use mmgfm::{
    builtin_scenario, evaluate, fit, gen_scenario, load_dataset, load_fit, load_truth, save_dataset, save_fit,
    save_truth, select_factors, Error, FitConfig, InitMethod, Metrics, ScenarioOverrides,
};

mod bench;

#[derive(Parser)]
#[command(name = "mmgfm", version, about = "Multi-study, multi-modality generalized factor models")]
struct Cli {
    /// Base random seed.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Worker threads (default: MMGFM_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Fixed-order floating-point reductions.
    #[arg(long, global = true, default_value_t = true, action = clap::ArgAction::Set)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a named scenario into a dataset directory.
    Simulate(SimulateArgs),
    /// Fit the model to a dataset.
    Fit(FitArgs),
    /// Choose the numbers of shared and study-specific factors.
    Select(SelectArgs),
    /// Score a fit against simulation ground truth.
    Evaluate(EvaluateArgs),
    /// Replicated simulate, fit and score runs written as CSV.
    Bench(bench::BenchArgs),
}

/// Scenario overrides shared by `simulate` and `bench`.
#[derive(Args, Clone, Default)]
pub struct ScenarioFlags {
    /// Sample sizes per study, comma separated.
    #[arg(long, value_delimiter = ',')]
    n: Option<Vec<usize>>,
    /// Variables per modality, comma separated.
    #[arg(long, value_delimiter = ',')]
    p: Option<Vec<usize>>,
    #[arg(long)]
    q: Option<usize>,
    /// Study-specific factor counts (one value applies to every study).
    #[arg(long, value_delimiter = ',')]
    qs: Option<Vec<usize>>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    rho_z: Option<f64>,
    #[arg(long)]
    eps_var: Option<f64>,
    /// Seed of the true parameters (data use `--seed`).
    #[arg(long)]
    param_seed: Option<u64>,
}

impl ScenarioFlags {
    pub fn overrides(&self, sigma2_v: Option<f64>, seed: u64) -> ScenarioOverrides {
        ScenarioOverrides {
            n: self.n.clone(),
            p: self.p.clone(),
            q: self.q,
            qs: self.qs.clone(),
            sigma2_v,
            rho_m: self.rho,
            rho_z: self.rho_z,
            eps_var: self.eps_var,
            param_seed: self.param_seed,
            seed: Some(seed),
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    scenario: String,
    #[command(flatten)]
    scenario_flags: ScenarioFlags,
    /// Variance of the modality-shared factor.
    #[arg(long)]
    sigma2_v: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

/// Iteration controls shared by `fit`, `select` and `bench`.
#[derive(Args, Clone)]
pub struct IterFlags {
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    /// Stop when the relative ELBO change falls below this.
    #[arg(long, default_value_t = 1e-6)]
    rel_tol: f64,
}

impl IterFlags {
    pub fn apply(&self, cfg: FitConfig, seed: u64, deterministic: bool) -> FitConfig {
        let mut cfg = cfg.with_max_iters(self.max_iters).with_rel_tol(self.rel_tol).with_seed(seed);
        cfg.deterministic_reduction = deterministic;
        cfg
    }
}

#[derive(Args)]
struct FitArgs {
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    q: usize,
    /// Study-specific factor counts (one value applies to every study).
    #[arg(long, value_delimiter = ',', required = true)]
    qs: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Starting point: `structured` also starts the modality effects from the
    /// data and keeps study-specific directions out of the shared loadings.
    #[arg(long, value_enum, default_value_t = Init::Pooled)]
    init: Init,
    #[command(flatten)]
    iter: IterFlags,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Init {
    Pooled,
    Structured,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = mmgfm::select::DEFAULT_Q_MAX)]
    q_max: usize,
    /// Upper bound per study (one value applies to every study).
    #[arg(long, value_delimiter = ',', default_value = "6")]
    qs_max: Vec<usize>,
    /// Report path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    iter: IterFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Fit directory.
    #[arg(long)]
    fit: PathBuf,
    /// Ground-truth directory written by `simulate`.
    #[arg(long)]
    truth: PathBuf,
    /// Optional JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure carrying its exit code.
pub struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Dimension(_) | Error::Domain(_) | Error::UnknownScenario { .. } => 2,
            _ => 1,
        };
        Failure { code, msg: e.to_string() }
    }
}

impl Failure {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        Failure {
            code: 1,
            msg: format!("{}: {e}", path.display()),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn dataset_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(mmgfm::io::DATASET_MANIFEST)
    } else {
        path.to_path_buf()
    }
}

/// Expand a single value to one per study.
fn per_study(v: &[usize], studies: usize) -> Vec<usize> {
    if v.len() == 1 {
        vec![v[0]; studies]
    } else {
        v.to_vec()
    }
}

fn cmd_simulate(cli: &Cli, a: &SimulateArgs) -> CmdResult {
    let spec = builtin_scenario(&a.scenario, &a.scenario_flags.overrides(a.sigma2_v, cli.seed))?;
    let (ds, truth) = gen_scenario(&spec)?;
    save_dataset(&ds, &a.out)?;
    save_truth(&truth, &a.out.join("truth"))?;
    println!(
        "{}: S={} M={} n={:?} p={:?} types=[{}] q={} qs={:?} -> {}",
        spec.name,
        ds.num_studies(),
        ds.num_modalities(),
        ds.sample_sizes(),
        ds.dims(),
        ds.types().iter().map(|t| t.as_str()).collect::<Vec<_>>().join(","),
        spec.q,
        spec.qs,
        a.out.display()
    );
    Ok(())
}

fn cmd_fit(cli: &Cli, a: &FitArgs) -> CmdResult {
    let ds = load_dataset(&dataset_manifest(&a.data))?;
    let mut cfg = a.iter.apply(FitConfig::new(a.q, per_study(&a.qs, ds.num_studies())), cli.seed, cli.deterministic);
    cfg.init_method = match a.init {
        Init::Pooled => InitMethod::Pooled,
        Init::Structured => InitMethod::Structured,
    };
    let t = Instant::now();
    let res = fit(&ds, &cfg)?;
    save_fit(&res, &a.out)?;
    println!(
        "iterations={} elbo={:.6} converged={} seconds={:.2}",
        res.iterations,
        res.final_elbo().unwrap_or(f64::NAN),
        res.converged,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable report");
    std::fs::write(path, text + "\n").map_err(|e| Failure::io(path, e))
}

fn cmd_select(cli: &Cli, a: &SelectArgs) -> CmdResult {
    let ds = load_dataset(&dataset_manifest(&a.data))?;
    let qs_max = per_study(&a.qs_max, ds.num_studies());
    let base = a.iter.apply(FitConfig::new(a.q_max, qs_max.clone()), cli.seed, cli.deterministic);
    let sel = select_factors(&ds, a.q_max, &qs_max, &base)?;
    write_json(&a.out, &sel)?;
    println!("q={} qs={:?}", sel.q_hat, sel.qs_hat);
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs) -> CmdResult {
    let res = load_fit(&a.fit)?;
    let truth = load_truth(&a.truth)?;
    let m: Metrics = evaluate(&res, &truth)?;
    let text = serde_json::to_string(&m).expect("serializable metrics");
    if let Some(out) = &a.out {
        write_json(out, &m)?;
    }
    println!("{text}");
    Ok(())
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Failure> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("MMGFM_THREADS") {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| Failure {
            code: 2,
            msg: format!("MMGFM_THREADS must be a positive integer, got `{v}`"),
        }),
        Err(_) => Ok(None),
    }
}

fn run(cli: &Cli) -> CmdResult {
    if let Some(n) = thread_count(cli.threads)? {
        if n == 0 {
            return Err(Failure {
                code: 2,
                msg: "thread count must be at least 1".into(),
            });
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure { code: 1, msg: e.to_string() })?;
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(cli, a),
        Command::Fit(a) => cmd_fit(cli, a),
        Command::Select(a) => cmd_select(cli, a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Bench(a) => bench::run(a, cli.seed, cli.deterministic),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
