//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::anyhow;
use serde::Serialize;

use sparsemep::baselines::{exhaustive_best_subset, omp, subset_count, ENUMERATION_CAP};
use sparsemep::constraints::ConstraintSet;
use sparsemep::data::{generate_synthetic, load_automobile, DatasetSpec, FeatureMapping, SyntheticSpec};
use sparsemep::error::Error;
use sparsemep::io;
use sparsemep::model::{Problem, SparseSolution};
use sparsemep::phase::{self, TcrReading, TransitionReport};
use sparsemep::solver::{anneal, AnnealConfig, AnnealTrace};

use crate::output::{config_hash, sha256_hex, write_atomic, RunManifest};
use crate::{CompareArgs, PrepArgs, SolveArgs};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_INFEASIBLE: u8 = 3;
pub const EXIT_SOLVER: u8 = 4;
pub const WARNING_BIT: u8 = 16;

/// A failure together with the process exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Integrity(_)
            | Error::Parse { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::SchemaVersion { .. }
            | Error::Shape(_) => EXIT_DATA,
            Error::Infeasible(_) => EXIT_INFEASIBLE,
            Error::Config(_) | Error::Domain(_) | Error::EnumerationCap { .. } => EXIT_USAGE,
            Error::Singular { .. } | Error::NonFinite { .. } => EXIT_SOLVER,
        };
        Self { code, error: e.into() }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(error: anyhow::Error) -> Self {
        Self { code: EXIT_DATA, error }
    }
}

fn usage(msg: String) -> CliError {
    CliError { code: EXIT_USAGE, error: anyhow!(msg) }
}

type CmdResult = Result<bool, CliError>;

fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_DATA,
        error: anyhow!("reading {}: {e}", path.display()),
    })
}

/// Everything that determines the result of a solver run; hashed into the manifest.
#[derive(Serialize)]
struct RunKey<'a> {
    command: &'a str,
    k: &'a [usize],
    config: &'a AnnealConfig,
    analytic: Option<bool>,
    input_sha256: Vec<String>,
}

/// Loaded inputs of `fit`, `trace` and `compare`.
struct Inputs {
    problem: Problem,
    constraints: ConstraintSet,
    config: AnnealConfig,
    paths: Vec<PathBuf>,
    digests: Vec<String>,
}

#[allow(clippy::too_many_arguments)]
fn load_inputs(
    problem_path: &Path,
    constraints_path: Option<&Path>,
    config_path: Option<&Path>,
    beta: Option<f64>,
    tmin: Option<f64>,
    tmax: Option<&str>,
    seed: Option<u64>,
) -> Result<Inputs, CliError> {
    let mut paths = vec![problem_path.to_path_buf()];
    let text = read_input(problem_path)?;
    let mut digests = vec![sha256_hex(text.as_bytes())];
    let problem = io::problem_from_json(&text)?;

    let constraints = match constraints_path {
        Some(p) => {
            let text = read_input(p)?;
            digests.push(sha256_hex(text.as_bytes()));
            paths.push(p.to_path_buf());
            ConstraintSet::from_json(&text).map_err(|e| match e {
                Error::Json(j) => usage(format!("constraints file {}: {j}", p.display())),
                other => other.into(),
            })?
        }
        None => ConstraintSet::default(),
    };

    let mut config = match config_path {
        Some(p) => {
            let text = read_input(p)?;
            paths.push(p.to_path_buf());
            serde_json::from_str(&text).map_err(|e| usage(format!("config file {}: {e}", p.display())))?
        }
        None => AnnealConfig::default(),
    };
    if let Some(b) = beta {
        config.beta = b;
    }
    if let Some(t) = tmin {
        config.t_min = Some(t);
    }
    if let Some(t) = tmax {
        config.t_max = t.parse()?;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(Inputs { problem, constraints, config, paths, digests })
}

fn with_budget(problem: &Problem, k: Option<u32>) -> Result<Problem, CliError> {
    match k {
        None => Ok(problem.clone()),
        Some(k) if k as usize > problem.d() => Err(usage(format!("k = {k} exceeds d = {}", problem.d()))),
        Some(k) => Ok(problem.with_k(k as usize)?),
    }
}

fn feature_label(problem: &Problem, i: usize) -> String {
    match problem.feature_names().get(i) {
        Some(name) if !name.is_empty() => format!("a{} ({name})", i + 1),
        _ => format!("a{}", i + 1),
    }
}

fn support_string(support: &[usize]) -> String {
    support.iter().map(|i| format!("a{}", i + 1)).collect::<Vec<_>>().join(" ")
}

pub fn prep(args: PrepArgs) -> CmdResult {
    let started = Instant::now();
    let (problem, inputs, key) = if args.synthetic {
        let mut spec = SyntheticSpec { seed: args.seed, ..Default::default() };
        if let Some(noise) = args.noise {
            spec.noise_sigma = noise;
        }
        if let Some(k) = args.k {
            spec.k = k as usize;
        }
        let inst = generate_synthetic(&spec)?;
        log::info!("planted support {}", support_string(&inst.support));
        (inst.problem, Vec::new(), config_hash(&("prep", &spec)).map_err(CliError::from)?)
    } else {
        let raw = args.raw.expect("clap requires a raw file without --synthetic");
        let mut spec = DatasetSpec::automobile(&raw);
        let mut digests = vec![sha256_hex(read_input(&raw)?.as_bytes())];
        let mut inputs = vec![raw.clone()];
        if let Some(m) = &args.mapping {
            let text = read_input(m)?;
            digests.push(sha256_hex(text.as_bytes()));
            spec.mapping = FeatureMapping::from_json(&text)?;
            inputs.push(m.clone());
        }
        let problem = load_automobile(&spec)?;
        let problem = with_budget(&problem, args.k)?;
        let key = config_hash(&("prep", &spec.mapping, problem.k(), &digests)).map_err(CliError::from)?;
        (problem, inputs, key)
    };

    let mut manifest = RunManifest::new("prep", key, args.synthetic.then_some(args.seed));
    manifest.inputs = inputs;
    let out = args.out_dir.join("problem.json");
    write_atomic(&out, &io::problem_to_json_from(&problem, Some(&manifest.tag()))?)?;
    manifest.outputs.push(out.clone());
    manifest.write(&args.out_dir, started.elapsed())?;
    println!("wrote {} (n = {}, d = {}, k = {})", out.display(), problem.n(), problem.d(), problem.k());
    Ok(false)
}

fn solve(command: &str, args: &SolveArgs, analytic: Option<bool>) -> Result<(Inputs, Problem, RunManifest), CliError> {
    let inputs = load_inputs(
        &args.problem,
        args.constraints.as_deref(),
        args.config.as_deref(),
        args.beta,
        args.tmin,
        args.tmax.as_deref(),
        args.seed,
    )?;
    let problem = with_budget(&inputs.problem, args.k)?;
    let key = RunKey {
        command,
        k: &[problem.k()],
        config: &inputs.config,
        analytic,
        input_sha256: inputs.digests.clone(),
    };
    let mut manifest = RunManifest::new(command, config_hash(&key).map_err(CliError::from)?, Some(inputs.config.seed));
    manifest.inputs = inputs.paths.clone();
    Ok((inputs, problem, manifest))
}

fn print_solution(problem: &Problem, constraints: &ConstraintSet, sol: &SparseSolution) {
    println!("k = {}, d = {}, n = {}", problem.k(), problem.d(), problem.n());
    println!("selected features:");
    for (t, &x) in sol.x.iter().enumerate() {
        if let Some(i) = (0..problem.d()).find(|&i| sol.v[(i, t)] > 0.5) {
            println!("  column {}: {:<24} x = {:+.6}", t + 1, feature_label(problem, i), x);
        }
    }
    println!("cost |y - Aw|^2   = {:.6}", sol.cost);
    println!("residual |y - Aw| = {:.6}", sol.residual_norm);
    println!("effective sparsity = {}", sol.effective_sparsity);
    for (c, ok) in constraints.constraints().iter().zip(&sol.diagnostics.constraints_satisfied) {
        let features: Vec<String> = c.features.iter().map(|f| format!("a{}", f + 1)).collect();
        println!(
            "constraint {:?} [{}]: {}",
            c.kind,
            features.join(", "),
            if *ok { "satisfied" } else { "VIOLATED" }
        );
    }
    let d = &sol.diagnostics;
    let mut flags = Vec::new();
    if d.non_converged_temperatures > 0 {
        flags.push(format!("{} non-converged temperatures", d.non_converged_temperatures));
    }
    if d.soft_rounding {
        flags.push("soft rounding".into());
    }
    if d.duplicate_selection {
        flags.push("duplicate selection".into());
    }
    if d.repaired_rounding {
        flags.push("repaired rounding".into());
    }
    if d.projection_failed {
        flags.push("projection failed".into());
    }
    if !flags.is_empty() {
        println!("diagnostics: {}", flags.join(", "));
    }
}

pub fn fit(args: SolveArgs) -> CmdResult {
    let started = Instant::now();
    let (inputs, problem, mut manifest) = solve("fit", &args, None)?;
    let (sol, trace) = anneal(&problem, &inputs.constraints, &inputs.config)?;
    log::info!("annealed over {} temperatures", trace.records.len());
    let out = args.out_dir.join("solution.json");
    write_atomic(&out, &io::to_document_from(io::SOLUTION_SCHEMA, &sol, Some(&manifest.tag()))?)?;
    manifest.outputs.push(out);
    manifest.write(&args.out_dir, started.elapsed())?;
    print_solution(&problem, &inputs.constraints, &sol);
    Ok(sol.diagnostics.has_warnings())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |t| format!("{t:.5}"))
}

fn transition_table(report: &TransitionReport, beta: f64) -> String {
    let mut out = String::from("index,k_d_before,k_d_after,t_probe,t_observed,t_cr_coupled,t_cr_block,t_cr_theorem,min_eig_above,min_eig_below,sign_flip,within_one_step\n");
    for tr in &report.transitions {
        let a = tr.analytic.as_ref();
        let _ = writeln!(
            out,
            "{},{},{},{:?},{:?},{},{},{},{},{},{},{}",
            tr.index,
            tr.k_d_before,
            tr.k_d_after,
            tr.t_probe,
            tr.t_observed,
            a.and_then(|c| c.coupled).map_or(String::new(), |v| format!("{v:?}")),
            a.and_then(|c| c.block).map_or(String::new(), |v| format!("{v:?}")),
            a.and_then(|c| c.theorem).map_or(String::new(), |v| format!("{v:?}")),
            tr.min_eig_above.map_or(String::new(), |v| format!("{v:?}")),
            tr.min_eig_below.map_or(String::new(), |v| format!("{v:?}")),
            tr.sign_flip().map_or(String::new(), |v| v.to_string()),
            tr.within_one_step(TcrReading::Coupled, beta).map_or(String::new(), |v| v.to_string()),
        );
    }
    out
}

pub fn trace(args: SolveArgs, analytic: bool) -> CmdResult {
    let started = Instant::now();
    let (inputs, problem, mut manifest) = solve("trace", &args, Some(analytic))?;
    let (sol, trace): (SparseSolution, AnnealTrace) = anneal(&problem, &inputs.constraints, &inputs.config)?;
    let report = phase::analyze(&problem, &trace, analytic);
    let tag = manifest.tag();

    let mut files: Vec<(&str, String)> = vec![
        ("trace.json", io::to_document_from(io::TRACE_SCHEMA, &trace, Some(&tag))?),
        ("transitions.json", io::to_document_from(io::REPORT_SCHEMA, &report, Some(&tag))?),
        ("solution.json", io::to_document_from(io::SOLUTION_SCHEMA, &sol, Some(&tag))?),
        ("kd.csv", phase::k_d_csv(&trace)),
        ("transitions.csv", transition_table(&report, inputs.config.beta)),
    ];
    if let Some(fc) = &report.fractional_change {
        files.push(("fractional_change.csv", phase::fractional_change_csv(fc)));
    }
    for (name, text) in &files {
        let path = args.out_dir.join(name);
        write_atomic(&path, text)?;
        manifest.outputs.push(path);
    }
    manifest.write(&args.out_dir, started.elapsed())?;

    println!("{} temperatures, {} transitions", trace.records.len(), report.transitions.len());
    println!("{:>6} {:>9} {:>11} {:>11} {:>11} {:>10}", "index", "k_d", "T_observed", "T_cr", "T_cr block", "sign flip");
    for tr in &report.transitions {
        let a = tr.analytic.as_ref();
        println!(
            "{:>6} {:>4}->{:<3} {:>11.5} {:>11} {:>11} {:>10}",
            tr.index,
            tr.k_d_before,
            tr.k_d_after,
            tr.t_observed,
            fmt_opt(a.and_then(|c| c.coupled)),
            fmt_opt(a.and_then(|c| c.block)),
            tr.sign_flip().map_or("-".to_string(), |v| v.to_string()),
        );
    }
    if let Some(fc) = &report.fractional_change {
        println!("intra-phase median fractional change = {:.4}", fc.intra_phase_median());
    }
    let p = &report.persistence;
    println!(
        "persistence estimate k_hat = {}{}",
        p.k_hat,
        if p.low_confidence { " (low confidence)" } else { "" }
    );
    print_solution(&problem, &inputs.constraints, &sol);
    Ok(sol.diagnostics.has_warnings())
}

struct CompareRow {
    k: usize,
    method: &'static str,
    cost: Option<f64>,
    support: Vec<usize>,
    status: String,
}

pub fn compare(args: CompareArgs) -> CmdResult {
    let started = Instant::now();
    let inputs = load_inputs(
        &args.problem,
        args.constraints.as_deref(),
        args.config.as_deref(),
        args.beta,
        args.tmin,
        args.tmax.as_deref(),
        args.seed,
    )?;
    let budgets: Vec<Option<u32>> = if args.k.is_empty() { vec![None] } else { args.k.iter().map(|&k| Some(k)).collect() };
    let problems = budgets.iter().map(|&k| with_budget(&inputs.problem, k)).collect::<Result<Vec<_>, _>>()?;
    let ks: Vec<usize> = problems.iter().map(Problem::k).collect();
    let key = RunKey {
        command: "compare",
        k: &ks,
        config: &inputs.config,
        analytic: None,
        input_sha256: inputs.digests.clone(),
    };
    let mut manifest = RunManifest::new("compare", config_hash(&key).map_err(CliError::from)?, Some(inputs.config.seed));
    manifest.inputs = inputs.paths.clone();

    let mut rows = Vec::new();
    let mut warned = false;
    for problem in &problems {
        let k = problem.k();
        let (mep, _) = anneal(problem, &inputs.constraints, &inputs.config)?;
        warned |= mep.diagnostics.has_warnings();
        rows.push(CompareRow {
            k,
            method: "mep",
            cost: Some(mep.cost),
            support: mep.support.clone(),
            status: if mep.diagnostics.has_warnings() { "warning".into() } else { "ok".into() },
        });

        let greedy = omp(problem)?;
        let greedy_ok = inputs.constraints.satisfied_by_support(&greedy.support, problem.d());
        rows.push(CompareRow {
            k,
            method: "omp",
            cost: Some(greedy.cost),
            support: greedy.support.clone(),
            status: if greedy_ok { "ok".into() } else { "violates_constraints".into() },
        });
        if greedy_ok && mep.cost > greedy.cost {
            log::warn!("k = {k}: annealing cost {:.6} is worse than OMP {:.6}", mep.cost, greedy.cost);
        }

        match exhaustive_best_subset(problem, &inputs.constraints) {
            Ok(best) => rows.push(CompareRow {
                k,
                method: "oracle",
                cost: Some(best.cost),
                support: best.support,
                status: "ok".into(),
            }),
            Err(Error::EnumerationCap { count, .. }) => rows.push(CompareRow {
                k,
                method: "oracle",
                cost: None,
                support: Vec::new(),
                status: format!("skipped ({count} subsets > {ENUMERATION_CAP})"),
            }),
            Err(e) => return Err(e.into()),
        }
        log::debug!("k = {k}: {} subsets", subset_count(problem.d(), k));
    }

    let mut csv = String::from("k,method,cost,residual_norm,support,status\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            r.k,
            r.method,
            r.cost.map_or(String::new(), |c| format!("{c:?}")),
            r.cost.map_or(String::new(), |c| format!("{:?}", c.sqrt())),
            support_string(&r.support),
            r.status
        );
    }
    let out = args.out_dir.join("compare.csv");
    write_atomic(&out, &csv)?;
    manifest.outputs.push(out);
    manifest.write(&args.out_dir, started.elapsed())?;

    println!("{:>3} {:<7} {:>10} {:>10}  {:<24} {}", "k", "method", "cost", "residual", "support", "status");
    for r in &rows {
        println!(
            "{:>3} {:<7} {:>10} {:>10}  {:<24} {}",
            r.k,
            r.method,
            r.cost.map_or("-".into(), |c| format!("{c:.6}")),
            r.cost.map_or("-".into(), |c| format!("{:.6}", c.sqrt())),
            support_string(&r.support),
            r.status
        );
    }
    Ok(warned)
}
