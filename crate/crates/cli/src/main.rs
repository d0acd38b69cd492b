use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use ergodic_hjb::config::RunSpec;
use ergodic_hjb::ergodic::{
    build_barrier, detect_nonexistence, extract_eigenpair, EigenPair, ExtractConfig, NonexistConfig,
};
use ergodic_hjb::grid::{e17, GridFunction};
use ergodic_hjb::hjb::{solve_dirichlet, DiscountedProblem, ExteriorData};
use ergodic_hjb::levy::{
    estimate_from, paths_csv, return_radius, simulate_paths, verify_representation, ControlPolicy,
};
use ergodic_hjb::problem::{validate_spec, ProblemSpec};
use ergodic_hjb::verifier::{
    check_monotonicity, check_uniqueness, fuzz_comparison, probe_lipschitz, report_csv, CheckRow,
};
use ergodic_hjb::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ergodic-hjb", version, about = "Ergodic HJB solver for the fractional Laplacian")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML problem specification.
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed in the spec file.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the policy-iteration residual tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Caps worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Single truncated discounted solve.
    Solve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: f64,
        /// Truncation radius (defaults to the largest radius in the spec).
        #[arg(long)]
        n: Option<f64>,
        #[arg(long, value_enum, default_value_t = Exterior::Zero)]
        exterior: Exterior,
    },
    /// Vanishing-discount extraction of (u, lambda*).
    Extract {
        #[command(flatten)]
        common: Common,
    },
    /// Long-run cost and representation checks under a policy.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// zero | feedback | scaled:<factor> | path to a policy CSV.
        #[arg(long, default_value = "feedback")]
        policy: String,
    },
    /// Verifier suite; exit code 3 on any failed check.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of fuzz,shift,uniqueness,monotonicity,lipschitz.
        #[arg(long, default_value = "all")]
        suite: String,
    },
    /// Divergence probe for the nonexistence regime.
    Nonexist {
        #[command(flatten)]
        common: Common,
    },
    /// Lyapunov barrier and its constants.
    Barrier {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
enum Exterior {
    Zero,
    Continuation,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    spec_path: String,
    output_dir: String,
    seed: u64,
    tolerance_overrides: BTreeMap<String, f64>,
    timestamp_unix: u64,
    artifact_version: String,
    outputs: Vec<String>,
}

struct Run {
    spec: RunSpec,
    problem: ProblemSpec,
    common: Common,
    seed: u64,
}

impl Run {
    fn load(common: &Common) -> Result<Run> {
        let spec = RunSpec::load(&common.spec)?;
        let problem = spec.problem()?;
        if let Some(t) = common.tol {
            if !(t > 0.0) {
                return Err(Error::Validation("--tol must be positive".into()));
            }
        }
        if common.threads == Some(0) {
            return Err(Error::Validation("--threads must be at least 1".into()));
        }
        let seed = common.seed.unwrap_or(spec.seed);
        Ok(Run { spec, problem, common: common.clone(), seed })
    }

    fn extract_config(&self) -> Result<ExtractConfig> {
        let mut c = self.spec.extract_config()?;
        if let Some(t) = self.common.tol {
            c.solver.tol_residual = t;
        }
        Ok(c)
    }

    /// Writes every artifact plus the manifest. Nothing is written before
    /// the computation has finished.
    fn finish(&self, command: &str, files: Vec<(String, String)>) -> Result<()> {
        let dir = &self.common.out;
        fs::create_dir_all(dir)?;
        for (name, body) in &files {
            fs::write(dir.join(name), body)?;
        }
        let mut overrides = BTreeMap::new();
        if let Some(t) = self.common.tol {
            overrides.insert("tol_residual".to_string(), t);
        }
        let manifest = RunManifest {
            command: command.into(),
            spec_path: self.common.spec.display().to_string(),
            output_dir: dir.display().to_string(),
            seed: self.seed,
            tolerance_overrides: overrides,
            timestamp_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            artifact_version: env!("CARGO_PKG_VERSION").into(),
            outputs: files.into_iter().map(|(n, _)| n).collect(),
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Parse(e.to_string()))?;
        fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

fn cmd_solve(run: &Run, alpha: f64, n: Option<f64>, exterior: Exterior) -> Result<Vec<(String, String)>> {
    let cfg = run.extract_config()?;
    let n = n.unwrap_or(run.problem.n_max());
    let ext = match exterior {
        Exterior::Zero => ExteriorData::Zero,
        Exterior::Continuation => ExteriorData::Continuation,
    };
    let p = DiscountedProblem::new(&run.problem, alpha, n, cfg.h)?.with_exterior(ext);
    let sol = solve_dirichlet(&p, &cfg.solver)?;
    Ok(vec![("solution.csv".into(), sol.to_csv()), ("convergence.csv".into(), sol.log_csv())])
}

fn cmd_extract(run: &Run) -> Result<(EigenPair, Vec<(String, String)>)> {
    let pair = extract_eigenpair(&run.problem, &run.extract_config()?)?;
    let files = vec![
        ("eigenpair.csv".into(), pair.eigen_csv()),
        ("lambda_table.csv".into(), pair.lambda_csv()),
        ("certificate.csv".into(), pair.certificate_csv()),
    ];
    Ok((pair, files))
}

fn load_policy(arg: &str, pair: &EigenPair) -> Result<ControlPolicy> {
    match arg {
        "zero" => Ok(ControlPolicy::zero()),
        "feedback" => Ok(ControlPolicy::feedback(pair)),
        _ => {
            if let Some(f) = arg.strip_prefix("scaled:") {
                let f: f64 = f.parse().map_err(|_| Error::Validation(format!("bad policy scale '{f}'")))?;
                return Ok(ControlPolicy::feedback(pair).scaled(f));
            }
            let text = fs::read_to_string(arg)?;
            let (gf, _) = GridFunction::from_csv(&text)?;
            ControlPolicy::from_grid_function(&gf, arg)
        }
    }
}

fn cmd_simulate(run: &Run, policy: &str) -> Result<Vec<(String, String)>> {
    let mut cfg = run.spec.path_config(run.seed)?;
    if !matches!(policy, "zero" | "feedback") && !policy.starts_with("scaled:") && !Path::new(policy).is_file() {
        return Err(Error::Validation(format!("policy file '{policy}' not found")));
    }
    let (pair, _) = cmd_extract(run)?;
    let pol = load_policy(policy, &pair)?;
    cfg.return_radius = return_radius(&run.problem, pair.lambda_star, 100.0);
    let paths = simulate_paths(&pol, &run.problem, &cfg)?;
    let est = estimate_from(&paths, &cfg);
    let rb = cfg.return_radius;
    let starts = [rb + 1.0, -(rb + 1.5), rb + 2.0, -(rb + 2.5), rb + 3.0];
    let rep = verify_representation(&pair, &pol, &run.problem, &cfg, &starts)?;
    let summary = format!(
        "lambda_star,long_run_cost,stderr,return_radius\n{},{},{},{}\n",
        e17(pair.lambda_star),
        e17(est.mean),
        e17(est.stderr),
        e17(rb)
    );
    Ok(vec![
        ("paths.csv".into(), paths_csv(&paths)),
        ("estimate.csv".into(), est.to_csv()),
        ("representation.csv".into(), rep.to_csv()),
        ("summary.csv".into(), summary),
    ])
}

const SUITES: [&str; 5] = ["fuzz", "shift", "uniqueness", "monotonicity", "lipschitz"];

fn cmd_verify(run: &Run, suite: &str) -> Result<(bool, Vec<(String, String)>)> {
    let selected: Vec<&str> = if suite == "all" { SUITES.to_vec() } else { suite.split(',').map(str::trim).collect() };
    if let Some(bad) = selected.iter().find(|s| !SUITES.contains(s)) {
        return Err(Error::Validation(format!("unknown suite '{bad}'")));
    }
    let cfg = run.extract_config()?;
    let spec = &run.problem;
    let mut base: Option<EigenPair> = None;
    let mut base_pair = || -> Result<EigenPair> {
        if base.is_none() {
            base = Some(extract_eigenpair(spec, &cfg)?);
        }
        Ok(base.clone().unwrap())
    };
    let mut rows = Vec::new();
    for name in selected {
        let row = match name {
            "fuzz" => {
                let r = fuzz_comparison(100, run.seed)?;
                let worst = r.trials.iter().map(|t| t.min_gap).fold(f64::INFINITY, f64::min);
                CheckRow::new(
                    "fuzz_comparison",
                    r.violations == 0,
                    format!("violations={}", r.violations),
                    format!("trials={};min_gap={}", r.trials.len(), e17(worst)),
                )
            }
            "shift" => {
                let a = base_pair()?;
                let b = extract_eigenpair(&spec.with_source(spec.source.clone().plus_constant(1.0)), &cfg)?;
                let err = (b.lambda_star - a.lambda_star - 1.0).abs();
                CheckRow::new(
                    "shift_covariance",
                    err <= 1e-3,
                    format!("err={}", e17(err)),
                    format!("lambda={}", e17(a.lambda_star)),
                )
            }
            "uniqueness" => {
                let a = base_pair()?;
                let mut other = cfg.clone();
                other.alphas =
                    (0..cfg.alphas.len() + 1).map(|k| 0.75 * cfg.alphas[0] * (1.0f64 / 1.8).powi(k as i32)).collect();
                other.x0 = cfg.x0 + 1.0;
                // A different grid, so the agreement is not just the same discrete solution.
                let fits = |h: f64| {
                    spec.truncation_plan.iter().all(|r| ((r / h) - (r / h).round()).abs() < 1e-9 * (r / h).max(1.0))
                };
                other.h = if fits(0.8 * cfg.h) { 0.8 * cfg.h } else { 0.5 * cfg.h };
                let b = extract_eigenpair(spec, &other)?;
                let r = check_uniqueness(&a, &b)?;
                CheckRow::new(
                    "uniqueness",
                    r.passed,
                    format!("worst_x={}", e17(r.worst_x)),
                    format!(
                        "offset={};sup_error={};tol={};lambda_diff={}",
                        e17(r.offset),
                        e17(r.sup_error),
                        e17(r.tolerance),
                        e17(r.lambda_diff)
                    ),
                )
            }
            "monotonicity" => {
                let bump = ergodic_hjb::problem::Bump { height: 1.0, center: 0.0, width: 1.0 };
                let r = check_monotonicity(spec, &spec.with_source(spec.source.clone().with_bump(bump)), &cfg)?;
                CheckRow::new(
                    "monotonicity",
                    r.passed,
                    format!("gap={}", e17(r.gap)),
                    format!("sup_diff={};upper_from_u1={}", e17(r.sup_diff), e17(r.upper_from_u1)),
                )
            }
            "lipschitz" => {
                let mut ladder = vec![base_pair()?.u];
                for k in 1..=2 {
                    let c = ExtractConfig { h: cfg.h * 0.5f64.powi(k), ..cfg.clone() };
                    ladder.push(extract_eigenpair(spec, &c)?.u);
                }
                let r = probe_lipschitz(&ladder, spec, 2.0)?;
                let lips: Vec<String> = r.rows.iter().map(|d| e17(d.measured_lip)).collect();
                CheckRow::new(
                    "lipschitz_probe",
                    r.stable,
                    format!("ratios={:?}", r.ratios),
                    format!("measured_lip={}", lips.join(";")),
                )
            }
            _ => unreachable!(),
        };
        rows.push(row);
    }
    let ok = rows.iter().all(|r| r.passed);
    Ok((ok, vec![("verify_report.csv".into(), report_csv(&rows))]))
}

fn cmd_nonexist(run: &Run) -> Result<Vec<(String, String)>> {
    let r = detect_nonexistence(&run.problem, &NonexistConfig::default())?;
    let verdict = format!("regime,divergent\n{:?},{}\n", r.regime, r.divergent);
    Ok(vec![("nonexist_ladder.csv".into(), r.to_csv()), ("nonexist_verdict.csv".into(), verdict)])
}

fn cmd_barrier(run: &Run) -> Result<Vec<(String, String)>> {
    let b = build_barrier(&run.problem, run.spec.truncation.h)?;
    let mut series = String::from("x,v\n");
    for (k, v) in b.v.values.iter().enumerate() {
        series.push_str(&format!("{},{}\n", e17(b.v.grid.x(k)), e17(*v)));
    }
    let constants = format!(
        "beta,kappa0,kappa1,r0,q,min_slack\n{},{},{},{},{},{}\n",
        e17(b.beta),
        e17(b.kappa0),
        e17(b.kappa1),
        e17(b.r0),
        e17(b.q),
        e17(b.min_slack)
    );
    Ok(vec![("barrier.csv".into(), series), ("barrier_constants.csv".into(), constants)])
}

fn run(cli: Cli) -> Result<bool> {
    let (common, name) = match &cli.command {
        Command::Solve { common, .. } => (common, "solve"),
        Command::Extract { common } => (common, "extract"),
        Command::Simulate { common, .. } => (common, "simulate"),
        Command::Verify { common, .. } => (common, "verify"),
        Command::Nonexist { common } => (common, "nonexist"),
        Command::Barrier { common } => (common, "barrier"),
    };
    let run = Run::load(common)?;
    if let Some(t) = common.threads {
        // Fails only if a pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let report = validate_spec(&run.problem)?;
    // The divergence probe runs precisely where the growth assumption fails.
    if !report.all_passed() && name != "nonexist" {
        return Err(Error::Validation(format!("assumption checks failed:\n{}", report.to_text())));
    }
    let mut ok = true;
    let files = match &cli.command {
        Command::Solve { alpha, n, exterior, .. } => cmd_solve(&run, *alpha, *n, *exterior)?,
        Command::Extract { .. } => cmd_extract(&run)?.1,
        Command::Simulate { policy, .. } => cmd_simulate(&run, policy)?,
        Command::Verify { suite, .. } => {
            let (pass, files) = cmd_verify(&run, suite)?;
            ok = pass;
            files
        }
        Command::Nonexist { .. } => cmd_nonexist(&run)?,
        Command::Barrier { .. } => cmd_barrier(&run)?,
    };
    let mut files = files;
    files.push(("validation.csv".into(), report.to_csv()));
    run.finish(name, files)?;
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more property checks failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
