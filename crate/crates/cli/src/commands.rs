use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use hamiltonian_updates::hu::{
    check_feasibility, hamiltonian_updates, DiagRule, HuOutcome, IterationLedger, OutcomeKind, SolverConfig,
};
use hamiltonian_updates::instances::{generate_instance, load_matrix, store_matrix, CostMatrix, InstanceMetadata, InstanceSeedSpec};
use hamiltonian_updates::qcost::{iteration_resources, DEFAULT_BITS};
use hamiltonian_updates::qemu::{quantum_hamiltonian_updates, NoiseKind, NoiseModel, QuantumEmuConfig, QuantumRun};
use hamiltonian_updates::rounding::{correct_solution, round_with_sqrt, RoundingOptions};
use hamiltonian_updates::search::{binary_search, binary_search_with, write_trace, SearchError, SearchResult};
use hamiltonian_updates::symlin::{gibbs_state, psd_sqrt};

use crate::manifest::RunManifest;
use crate::{artifact, EXIT_CAP, EXIT_INFEASIBLE, EXIT_MISMATCH, EXIT_OK};

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub s: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fill the whole matrix instead of the off-diagonal blocks.
    #[arg(long)]
    pub dense_blocks: bool,
    /// File name inside the output directory.
    #[arg(long)]
    pub name: Option<String>,
}

pub fn gen(a: &GenArgs, out_dir: &Path, argv: Vec<String>) -> Result<u8> {
    let spec = InstanceSeedSpec { n: a.n, s: a.s, seed: a.seed, block_form: !a.dense_blocks };
    let t0 = Instant::now();
    let c = generate_instance(&spec)?;
    let name = a.name.clone().unwrap_or_else(|| format!("instance_n{}_s{}_seed{}.txt", a.n, a.s, a.seed));
    let path = out_dir.join(&name);
    store_matrix(&c, &path)?;
    let meta = InstanceMetadata::for_generated(&spec, &c)?;
    meta.store(&InstanceMetadata::sidecar_path(&path))?;
    let mut m = RunManifest::new("gen", argv);
    m.param("n", a.n);
    m.param("s", a.s);
    m.param("block_form", spec.block_form);
    m.seeds.insert("instance".into(), a.seed);
    m.output("instance", out_dir, &name)?;
    let meta_name = InstanceMetadata::sidecar_path(&path).file_name().unwrap().to_string_lossy().into_owned();
    m.output("metadata", out_dir, &meta_name)?;
    m.timings.insert("gen".into(), t0.elapsed().as_secs_f64());
    m.store(out_dir)?;
    println!("{}", path.display());
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SolveMode {
    Classical,
    QuantumEmulated,
    Theoretical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DiagRuleArg {
    L1,
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    None,
    Uniform,
    Adversarial,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0.45)]
    pub beta: f64,
    /// Single probe at this threshold; without it a binary search runs.
    #[arg(long, allow_hyphen_values = true)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum, default_value_t = SolveMode::Classical)]
    pub mode: SolveMode,
    /// Bracket width that stops the binary search; defaults to epsilon.
    #[arg(long)]
    pub gap: Option<f64>,
    #[arg(long, value_enum, default_value_t = DiagRuleArg::L2)]
    pub diag_rule: DiagRuleArg,
    /// Use the cost projector without scaling by its violation.
    #[arg(long)]
    pub unscaled_cost: bool,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long, value_enum, default_value_t = NoiseArg::None)]
    pub noise: NoiseArg,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Riemann segments per free-energy bound increment.
    #[arg(long, default_value_t = 1)]
    pub segments: usize,
}

impl SolveArgs {
    pub fn config(&self) -> SolverConfig {
        let mut cfg = match self.mode {
            SolveMode::Theoretical => SolverConfig::theoretical(self.epsilon, self.beta),
            _ => {
                let mut c = SolverConfig::new(self.epsilon).with_beta(self.beta);
                c.diag_rule = match self.diag_rule {
                    DiagRuleArg::L1 => DiagRule::L1,
                    DiagRuleArg::L2 => DiagRule::L2,
                };
                c.scale_cost = !self.unscaled_cost;
                c
            }
        };
        cfg.max_iterations = self.max_iterations;
        cfg
    }

    pub fn quantum_config(&self) -> QuantumEmuConfig {
        let kind = match self.noise {
            NoiseArg::None => NoiseKind::None,
            NoiseArg::Uniform => NoiseKind::Uniform,
            NoiseArg::Adversarial => NoiseKind::Adversarial,
        };
        let mut q = QuantumEmuConfig::new(self.config(), NoiseModel::new(kind, self.epsilon, self.noise_seed));
        q.segments = self.segments;
        q
    }
}

fn write_file(path: &Path, write: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

fn exit_for(kind: OutcomeKind) -> u8 {
    match kind {
        OutcomeKind::Feasible => EXIT_OK,
        OutcomeKind::Infeasible => EXIT_INFEASIBLE,
        OutcomeKind::CapReached => EXIT_CAP,
    }
}

pub fn solve(a: &SolveArgs, out_dir: &Path, argv: Vec<String>) -> Result<u8> {
    let c = load_matrix(&a.instance)?;
    let cfg = a.config();
    cfg.validate()?;
    let mut m = RunManifest::new("solve", argv);
    m.input("instance", &a.instance)?;
    m.param("mode", format!("{:?}", a.mode).to_lowercase());
    m.param("epsilon", a.epsilon);
    m.param("beta", cfg.beta);
    m.param("step_mode", format!("{:?}", cfg.step_mode).to_lowercase());
    m.param("diag_rule", format!("{:?}", cfg.diag_rule).to_lowercase());
    m.param("scale_cost", cfg.scale_cost);
    m.param("max_iterations", cfg.iteration_cap(c.dim()));
    if a.mode == SolveMode::QuantumEmulated {
        m.param("noise", format!("{:?}", a.noise).to_lowercase());
        m.param("segments", a.segments);
        m.seeds.insert("noise".into(), a.noise_seed);
    }
    let t0 = Instant::now();
    let code = match a.gamma {
        Some(gamma) => {
            m.param("gamma", gamma);
            solve_single(a, &c, gamma, &cfg, out_dir, &mut m)?
        }
        None => {
            let gap = a.gap.unwrap_or(a.epsilon);
            m.param("gap", gap);
            solve_search(a, &c, gap, &cfg, out_dir, &mut m)?
        }
    };
    m.timings.insert("solve".into(), t0.elapsed().as_secs_f64());
    m.params.insert("exit_code".into(), code.to_string());
    m.store(out_dir)?;
    Ok(code)
}

fn outcome_text(kind: OutcomeKind, ledger: &IterationLedger, final_free_energy: f64) -> String {
    format!(
        "outcome = {}\niterations = {}\nmatrix_exponentials = {}\nfinal_free_energy = {:e}\nwall_seconds = {:e}\n",
        kind.as_str(),
        ledger.iterations(),
        ledger.matrix_exponentials(),
        final_free_energy,
        ledger.wall_seconds()
    )
}

fn solve_single(a: &SolveArgs, c: &CostMatrix, gamma: f64, cfg: &SolverConfig, out_dir: &Path, m: &mut RunManifest) -> Result<u8> {
    let mut summary = format!("gamma = {gamma:e}\n");
    let outcome = if a.mode == SolveMode::QuantumEmulated {
        let run = quantum_hamiltonian_updates(c, gamma, &a.quantum_config())?;
        write_file(&out_dir.join("ledger.csv"), |w| run.write_csv(w))?;
        summary += &format!(
            "oracle_queries = {}\nuncertified_steps = {}\nbound_violations = {}\n",
            run.oracle_queries,
            run.uncertified_steps(),
            run.bound_violations(1e-9).len()
        );
        run.outcome
    } else {
        let out = hamiltonian_updates(c, gamma, cfg)?;
        write_file(&out_dir.join("ledger.csv"), |w| out.ledger().write_csv(w))?;
        out
    };
    m.output("ledger", out_dir, "ledger.csv")?;
    let ff = match &outcome {
        HuOutcome::Feasible { hamiltonian, state, .. } => {
            let chk = check_feasibility(c, gamma, state.rho(), a.epsilon);
            summary += &format!("cost_violation = {:e}\ndiag_violation = {:e}\n", chk.cost_violation, chk.diag_violation);
            artifact::store(&hamiltonian.to_dense(c), &out_dir.join("hamiltonian.bin"))?;
            m.output("hamiltonian", out_dir, "hamiltonian.bin")?;
            state.free_energy()
        }
        HuOutcome::Infeasible { free_energy, .. } => *free_energy,
        HuOutcome::IterationCapReached { ledger } => ledger.records.last().map_or(f64::NAN, |r| r.free_energy),
    };
    summary += &outcome_text(outcome.kind(), outcome.ledger(), ff);
    fs::write(out_dir.join("outcome.txt"), &summary)?;
    m.output("outcome", out_dir, "outcome.txt")?;
    print!("{summary}");
    Ok(exit_for(outcome.kind()))
}

fn solve_search(a: &SolveArgs, c: &CostMatrix, gap: f64, cfg: &SolverConfig, out_dir: &Path, m: &mut RunManifest) -> Result<u8> {
    let mut runs: Vec<QuantumRun> = Vec::new();
    let result = if a.mode == SolveMode::QuantumEmulated {
        let q = a.quantum_config();
        q.validate()?;
        binary_search_with(gap, |gamma| {
            let run = quantum_hamiltonian_updates(c, gamma, &q)?;
            let out = run.outcome.clone();
            runs.push(run);
            Ok(out)
        })
    } else {
        binary_search(c, cfg, gap)
    };
    match result {
        Ok(r) => {
            write_search(&r, &runs, c, out_dir, m)?;
            Ok(EXIT_OK)
        }
        Err(SearchError::Aborted { gamma, partial }) => {
            write_file(&out_dir.join("trace.csv"), |w| write_trace(&partial.probes, w))?;
            m.output("trace", out_dir, "trace.csv")?;
            let text = format!(
                "outcome = cap_reached\ncap_gamma = {gamma:e}\ngamma_lo = {:e}\ngamma_hi = {:e}\nprobes = {}\n",
                partial.gamma_lo,
                partial.gamma_hi,
                partial.probes.len()
            );
            fs::write(out_dir.join("outcome.txt"), &text)?;
            m.output("outcome", out_dir, "outcome.txt")?;
            print!("{text}");
            Ok(EXIT_CAP)
        }
        Err(e) => Err(e.into()),
    }
}

fn write_search(r: &SearchResult, runs: &[QuantumRun], c: &CostMatrix, out_dir: &Path, m: &mut RunManifest) -> Result<()> {
    write_file(&out_dir.join("trace.csv"), |w| r.write_trace_csv(w))?;
    m.output("trace", out_dir, "trace.csv")?;
    for (k, ledger) in r.ledgers.iter().enumerate() {
        let name = format!("ledger_probe{k:03}.csv");
        match runs.get(k) {
            Some(run) => write_file(&out_dir.join(&name), |w| run.write_csv(w))?,
            None => write_file(&out_dir.join(&name), |w| ledger.write_csv(w))?,
        }
        m.output(&format!("ledger_probe{k:03}"), out_dir, &name)?;
    }
    artifact::store(&r.hamiltonian_star.to_dense(c), &out_dir.join("hamiltonian.bin"))?;
    m.output("hamiltonian", out_dir, "hamiltonian.bin")?;
    let text = format!(
        "outcome = complete\ngamma_lo = {:e}\ngamma_hi = {:e}\nprobes = {}\ntotal_iterations = {}\ntotal_matrix_exponentials = {}\nwall_seconds = {:e}\n",
        r.gamma_lo,
        r.gamma_hi,
        r.probes.len(),
        r.total_iterations(),
        r.total_matrix_exponentials(),
        r.probes.iter().map(|p| p.wall_seconds).sum::<f64>()
    );
    fs::write(out_dir.join("outcome.txt"), &text)?;
    m.output("outcome", out_dir, "outcome.txt")?;
    print!("{text}");
    Ok(())
}

#[derive(Debug, Args)]
pub struct RoundArgs {
    /// Hamiltonian artifact written by `solve`.
    #[arg(long)]
    pub hamiltonian: PathBuf,
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Replace the state by its exactly diagonal-feasible correction first.
    #[arg(long)]
    pub correct_first: bool,
    /// Precision used by the correction.
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

pub fn round(a: &RoundArgs, out_dir: &Path, argv: Vec<String>) -> Result<u8> {
    let c = load_matrix(&a.instance)?;
    let h = artifact::load(&a.hamiltonian)?;
    if h.dim() != c.dim() {
        bail!("Hamiltonian has dimension {} but the instance has {}", h.dim(), c.dim());
    }
    let mut m = RunManifest::new("round", argv);
    m.input("instance", &a.instance)?;
    m.input("hamiltonian", &a.hamiltonian)?;
    m.param("trials", a.trials);
    m.param("correct_first", a.correct_first);
    m.seeds.insert("rounding".into(), a.seed);
    let t0 = Instant::now();
    let state = gibbs_state(&h)?;
    let mut extra = String::new();
    let sqrt = if a.correct_first {
        m.param("epsilon", a.epsilon);
        let corr = correct_solution(state.rho(), a.epsilon)?;
        let n = c.dim() as f64;
        let max_dev = corr.rho_sharp.diagonal().iter().map(|d| (d - 1.0 / n).abs()).fold(0.0, f64::max);
        extra += &format!(
            "correction_xi = {:e}\ncorrection_trace_distance = {:e}\ncorrection_large_deviations = {}\ncorrection_min_eigenvalue = {:e}\ncorrection_max_diag_deviation = {:e}\n",
            corr.xi,
            corr.trace_distance,
            corr.large_deviation_set.len(),
            corr.min_eigenvalue,
            max_dev
        );
        psd_sqrt(&corr.rho_sharp)?
    } else {
        state.sqrt()
    };
    m.timings.insert("prepare".into(), t0.elapsed().as_secs_f64());
    let t1 = Instant::now();
    let opts = RoundingOptions { batch_size: a.batch_size, ..RoundingOptions::new(a.trials, a.seed) };
    let report = round_with_sqrt(&c, &sqrt, &opts)?;
    m.timings.insert("round".into(), t1.elapsed().as_secs_f64());
    write_file(&out_dir.join("trials.csv"), |w| report.write_trials_csv(w))?;
    let best: Vec<&str> = report.best_x.iter().map(|&x| if x > 0.0 { "+" } else { "-" }).collect();
    let summary = format!("{}{extra}best_x = {}\n", report.summary(), best.concat());
    fs::write(out_dir.join("round_summary.txt"), &summary)?;
    m.output("trials", out_dir, "trials.csv")?;
    m.output("summary", out_dir, "round_summary.txt")?;
    m.params.insert("exit_code".into(), EXIT_OK.to_string());
    m.store(out_dir)?;
    print!("{summary}");
    Ok(EXIT_OK)
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    /// Ledger CSV written by `solve`.
    #[arg(long)]
    pub ledger: PathBuf,
    #[arg(long)]
    pub instance: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    #[arg(long, default_value_t = DEFAULT_BITS)]
    pub bits: u32,
    /// Classical time to compare against; defaults to the ledger's total.
    #[arg(long)]
    pub wall_seconds: Option<f64>,
}

/// Sparsity from the metadata sidecar when present, else the matrix itself.
fn instance_sparsity(path: &Path, c: &CostMatrix) -> usize {
    InstanceMetadata::load(&InstanceMetadata::sidecar_path(path)).map(|meta| meta.s).unwrap_or_else(|_| c.sparsity())
}

pub fn estimate(a: &EstimateArgs, out_dir: &Path, argv: Vec<String>) -> Result<u8> {
    let c = load_matrix(&a.instance)?;
    let file = fs::File::open(&a.ledger).with_context(|| format!("opening {}", a.ledger.display()))?;
    let ledger = IterationLedger::read_csv(BufReader::new(file)).map_err(anyhow::Error::msg)?;
    let s = instance_sparsity(&a.instance, &c);
    let mut m = RunManifest::new("estimate", argv);
    m.input("instance", &a.instance)?;
    m.input("ledger", &a.ledger)?;
    m.param("epsilon", a.epsilon);
    m.param("bits", a.bits);
    m.param("s", s);
    let report = iteration_resources(&ledger, c.dim(), s, a.bits, a.epsilon, a.wall_seconds)?;
    fs::write(out_dir.join("resource_report.txt"), report.summary())?;
    write_file(&out_dir.join("resource_breakdown.csv"), |w| report.write_breakdown_csv(w))?;
    m.output("report", out_dir, "resource_report.txt")?;
    m.output("breakdown", out_dir, "resource_breakdown.csv")?;
    m.params.insert("exit_code".into(), EXIT_OK.to_string());
    m.store(out_dir)?;
    print!("{}", report.summary());
    Ok(EXIT_OK)
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the rerun; defaults to `replay/` next to the manifest.
    #[arg(long)]
    pub into: Option<PathBuf>,
}

/// Drops any `--out-dir` from `argv` and points it at `dir`.
fn redirect(argv: &[String], dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut skip = false;
    for a in argv {
        if skip {
            skip = false;
        } else if a == "--out-dir" {
            skip = true;
        } else if !a.starts_with("--out-dir=") {
            out.push(a.clone());
        }
    }
    out.push("--out-dir".into());
    out.push(dir.display().to_string());
    out
}

pub fn replay(a: &ReplayArgs) -> Result<u8> {
    let original = RunManifest::load(&a.manifest)?;
    let base = a.manifest.parent().map(Path::to_path_buf).unwrap_or_default();
    let into = a.into.clone().unwrap_or_else(|| base.join("replay"));
    fs::create_dir_all(&into)?;
    let into = into.canonicalize()?;
    std::env::set_current_dir(&original.cwd).with_context(|| format!("entering {}", original.cwd.display()))?;
    for (name, (path, hash)) in &original.inputs {
        let now = crate::manifest::sha256_file(path)?;
        if &now != hash {
            bail!("input `{name}` ({}) changed since the original run", path.display());
        }
    }
    crate::run_argv(redirect(&original.argv, &into))?;
    let rerun = RunManifest::load(&into.join(RunManifest::file_name(&original.command)))?;
    let mut ok = true;
    if let (Some(x), Some(y)) = (original.params.get("exit_code"), rerun.params.get("exit_code")) {
        if x != y {
            println!("exit code: {x} vs {y}");
            ok = false;
        }
    }
    for (name, (file, digest)) in &original.outputs {
        match rerun.outputs.get(name) {
            Some((_, d)) if d == digest => println!("match {name} ({file})"),
            Some(_) => {
                println!("MISMATCH {name} ({file})");
                ok = false;
            }
            None => {
                println!("MISSING {name} ({file})");
                ok = false;
            }
        }
    }
    for name in rerun.outputs.keys().filter(|k| !original.outputs.contains_key(*k)) {
        println!("EXTRA {name}");
        ok = false;
    }
    Ok(if ok { EXIT_OK } else { EXIT_MISMATCH })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn redirect_replaces_out_dir() {
        let argv: Vec<String> = ["hu", "--out-dir", "a", "solve", "--out-dir=b", "--gamma", "1"].iter().map(|s| s.to_string()).collect();
        let r = redirect(&argv, Path::new("/x"));
        assert_eq!(r, ["hu", "solve", "--gamma", "1", "--out-dir", "/x"]);
    }
}
