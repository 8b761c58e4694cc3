//! Benchmark campaigns: a grid of instance sizes, precisions and momentum
//! values, solved by binary search and summarized with quartiles and fits.
//!
//! Spec files hold `key = value` lines; lists are separated by spaces or
//! commas and `10^x` is accepted for numbers:
//!
//! ```text
//! n = 128 256
//! s = 16
//! epsilon = 10^-1.6 10^-1.9
//! beta = 0.45
//! instances = 10
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use hamiltonian_updates::hu::{IterationLedger, SolverConfig};
use hamiltonian_updates::instances::{generate_instance, parse_key_values, InstanceSeedSpec};
use hamiltonian_updates::qcost::{
    break_even_extrapolation, fit_power_law, iteration_resources, ExtrapolationMode, PowerLawFit, ScalingPoint, DEFAULT_BITS,
};
use hamiltonian_updates::rounding::{correct_solution, randomized_round, RoundingOptions};
use hamiltonian_updates::search::{binary_search, SearchError};

use crate::manifest::RunManifest;
use crate::stats::quartiles;
use crate::EXIT_OK;

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Campaign spec file.
    #[arg(long)]
    pub campaign: PathBuf,
    /// Worker threads; overrides the spec.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Campaign {
    pub name: String,
    pub n: Vec<usize>,
    pub s: Vec<usize>,
    pub epsilon: Vec<f64>,
    pub beta: Vec<f64>,
    pub instances: usize,
    pub seed: u64,
    /// Binary-search gap; `None` uses each epsilon.
    pub gap: Option<f64>,
    pub rounding_trials: usize,
    pub bits: u32,
    pub workers: usize,
    pub project_n: Vec<f64>,
}

fn parse_number(tok: &str) -> Result<f64> {
    let v = match tok.strip_prefix("10^") {
        Some(e) => 10f64.powf(e.parse::<f64>().with_context(|| format!("bad exponent in `{tok}`"))?),
        None => tok.parse::<f64>().with_context(|| format!("bad number `{tok}`"))?,
    };
    Ok(v)
}

fn parse_list(v: &str) -> Result<Vec<f64>> {
    v.split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()).map(parse_number).collect()
}

fn parse_usize_list(key: &str, v: &str) -> Result<Vec<usize>> {
    parse_list(v)?
        .into_iter()
        .map(|x| {
            if x >= 0.0 && x.fract() == 0.0 {
                Ok(x as usize)
            } else {
                bail!("`{key}` needs whole numbers, got {x}")
            }
        })
        .collect()
}

impl Campaign {
    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        const KNOWN: [&str; 12] =
            ["name", "n", "s", "epsilon", "beta", "instances", "seed", "gap", "rounding_trials", "bits", "workers", "project_n"];
        if let Some(k) = kv.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            bail!("unknown campaign key `{k}`");
        }
        let list = |k: &str| -> Result<Option<Vec<f64>>> { kv.get(k).map(|v| parse_list(v)).transpose() };
        let one = |k: &str| -> Result<Option<usize>> {
            match kv.get(k) {
                Some(v) => Ok(Some(parse_usize_list(k, v)?.first().copied().with_context(|| format!("`{k}` is empty"))?)),
                None => Ok(None),
            }
        };
        let c = Campaign {
            name: kv.get("name").cloned().unwrap_or_else(|| "campaign".into()),
            n: parse_usize_list("n", kv.get("n").context("campaign needs `n`")?)?,
            s: parse_usize_list("s", kv.get("s").context("campaign needs `s`")?)?,
            epsilon: list("epsilon")?.context("campaign needs `epsilon`")?,
            beta: list("beta")?.unwrap_or_else(|| vec![0.45]),
            instances: one("instances")?.unwrap_or(1),
            seed: one("seed")?.unwrap_or(0) as u64,
            gap: list("gap")?.and_then(|g| g.first().copied()),
            rounding_trials: one("rounding_trials")?.unwrap_or(1000),
            bits: one("bits")?.map_or(DEFAULT_BITS, |b| b as u32),
            workers: one("workers")?.unwrap_or(1).max(1),
            project_n: list("project_n")?.unwrap_or_else(|| vec![1e4, 1e5]),
        };
        if c.n.is_empty() || c.s.is_empty() || c.epsilon.is_empty() || c.beta.is_empty() || c.instances == 0 {
            bail!("campaign grid is empty");
        }
        Ok(c)
    }

    pub fn jobs(&self) -> Vec<Job> {
        let mut jobs = Vec::new();
        for &n in &self.n {
            for &s in &self.s {
                for rep in 0..self.instances {
                    for &epsilon in &self.epsilon {
                        for &beta in &self.beta {
                            jobs.push(Job { n, s, rep, seed: self.seed + rep as u64, epsilon, beta });
                        }
                    }
                }
            }
        }
        jobs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Job {
    pub n: usize,
    pub s: usize,
    pub rep: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobResult {
    pub job: Job,
    pub outcome: String,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub total_iterations: f64,
    pub total_matrix_exponentials: f64,
    pub wall_seconds: f64,
    pub correction_trace_distance: f64,
    pub round_mean: f64,
    pub round_best: f64,
    pub total_gates: f64,
    pub break_even_seconds: f64,
}

const INSTANCE_COLUMNS: &str = "n,s,epsilon,beta,rep,seed,outcome,gamma_lo,gamma_hi,total_iterations,total_matrix_exponentials,wall_seconds,correction_trace_distance,round_mean,round_best,total_gates,break_even_seconds";

pub fn run_job(job: &Job, campaign: &Campaign) -> Result<JobResult> {
    let c = generate_instance(&InstanceSeedSpec::block(job.n, job.s, job.seed))?;
    let cfg = SolverConfig::new(job.epsilon).with_beta(job.beta);
    let gap = campaign.gap.unwrap_or(job.epsilon);
    let mut res = JobResult {
        job: *job,
        outcome: "complete".into(),
        gamma_lo: f64::NAN,
        gamma_hi: f64::NAN,
        total_iterations: f64::NAN,
        total_matrix_exponentials: f64::NAN,
        wall_seconds: f64::NAN,
        correction_trace_distance: f64::NAN,
        round_mean: f64::NAN,
        round_best: f64::NAN,
        total_gates: f64::NAN,
        break_even_seconds: f64::NAN,
    };
    let search = match binary_search(&c, &cfg, gap) {
        Ok(r) => r,
        Err(SearchError::Aborted { partial, .. }) => {
            res.outcome = "cap_reached".into();
            res.gamma_lo = partial.gamma_lo;
            res.gamma_hi = partial.gamma_hi;
            return Ok(res);
        }
        Err(e) => return Err(e.into()),
    };
    res.gamma_lo = search.gamma_lo;
    res.gamma_hi = search.gamma_hi;
    res.total_iterations = search.total_iterations() as f64;
    res.total_matrix_exponentials = search.total_matrix_exponentials() as f64;
    let mut all = IterationLedger::new(&cfg);
    for l in &search.ledgers {
        all.records.extend(l.records.iter().cloned());
    }
    res.wall_seconds = all.wall_seconds();
    let resources = iteration_resources(&all, job.n, job.s, campaign.bits, job.epsilon, None)?;
    res.total_gates = resources.total_gates;
    res.break_even_seconds = resources.break_even_gate_time_seconds;
    let corr = correct_solution(search.rho_star.rho(), job.epsilon)?;
    res.correction_trace_distance = corr.trace_distance;
    if campaign.rounding_trials > 0 {
        let r = randomized_round(&c, &corr.rho_sharp, &RoundingOptions::new(campaign.rounding_trials, job.seed))?;
        res.round_mean = r.mean_value;
        res.round_best = r.best_value;
    }
    Ok(res)
}

fn run_all(campaign: &Campaign, workers: usize) -> Result<Vec<JobResult>> {
    let jobs = campaign.jobs();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<JobResult>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(jobs.len()).max(1) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = jobs.get(k) else { break };
                log::info!("job {k}: n={} s={} seed={} eps={} beta={}", job.n, job.s, job.seed, job.epsilon, job.beta);
                let r = run_job(job, campaign);
                slots.lock().unwrap()[k] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Writes through a temporary file so readers never see a partial table.
fn write_atomic(path: &Path, text: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn instances_csv(results: &[JobResult]) -> String {
    let mut out = format!("{INSTANCE_COLUMNS}\n");
    for r in results {
        let j = &r.job;
        writeln!(
            out,
            "{},{},{:e},{},{},{},{},{:e},{:e},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
            j.n,
            j.s,
            j.epsilon,
            j.beta,
            j.rep,
            j.seed,
            r.outcome,
            r.gamma_lo,
            r.gamma_hi,
            r.total_iterations,
            r.total_matrix_exponentials,
            r.wall_seconds,
            r.correction_trace_distance,
            r.round_mean,
            r.round_best,
            r.total_gates,
            r.break_even_seconds
        )
        .unwrap();
    }
    out
}

type GroupKey = (usize, usize, u64, u64);

fn group_key(j: &Job) -> GroupKey {
    (j.n, j.s, j.epsilon.to_bits(), j.beta.to_bits())
}

type Metric = (&'static str, fn(&JobResult) -> f64);

const METRICS: [Metric; 6] = [
    ("total_iterations", |r| r.total_iterations),
    ("total_matrix_exponentials", |r| r.total_matrix_exponentials),
    ("wall_seconds", |r| r.wall_seconds),
    ("correction_trace_distance", |r| r.correction_trace_distance),
    ("total_gates", |r| r.total_gates),
    ("break_even_seconds", |r| r.break_even_seconds),
];

fn groups(results: &[JobResult]) -> BTreeMap<GroupKey, Vec<&JobResult>> {
    let mut g: BTreeMap<GroupKey, Vec<&JobResult>> = BTreeMap::new();
    for r in results {
        g.entry(group_key(&r.job)).or_default().push(r);
    }
    g
}

fn median_of(rs: &[&JobResult], f: fn(&JobResult) -> f64) -> f64 {
    quartiles(&rs.iter().map(|r| f(r)).collect::<Vec<_>>()).median
}

fn aggregate_csv(results: &[JobResult]) -> String {
    let mut out = String::from("n,s,epsilon,beta,count,complete");
    for (m, _) in METRICS {
        write!(out, ",{m}_q1,{m}_median,{m}_q3").unwrap();
    }
    out.push('\n');
    for ((n, s, e, b), rs) in groups(results) {
        let complete = rs.iter().filter(|r| r.outcome == "complete").count();
        write!(out, "{n},{s},{:e},{},{},{complete}", f64::from_bits(e), f64::from_bits(b), rs.len()).unwrap();
        for (_, f) in METRICS {
            let q = quartiles(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            write!(out, ",{:e},{:e},{:e}", q.q1, q.median, q.q3).unwrap();
        }
        out.push('\n');
    }
    out
}

fn fit_lines(out: &mut String, key: &str, fit: &PowerLawFit) {
    writeln!(out, "{key}.a1 = {:e}\n{key}.a2 = {:e}\n{key}.residual = {:e}\n{key}.points = {}", fit.a1, fit.a2, fit.residual, fit.points)
        .unwrap();
    if let Some((lo, hi)) = fit.a2_ci {
        writeln!(out, "{key}.a2_ci_lo = {lo:e}\n{key}.a2_ci_hi = {hi:e}").unwrap();
    }
}

/// Group medians along one axis.
type Series<'a> = Vec<(f64, Vec<&'a JobResult>)>;

/// Power-law fits over the epsilon axis and extrapolations over the `n` axis,
/// both on group medians. Returns the fits text and projection tables.
fn fits(results: &[JobResult], campaign: &Campaign) -> (String, Vec<(String, String)>) {
    let g = groups(results);
    let mut out = String::new();
    let mut tables = Vec::new();

    let mut by_eps: BTreeMap<(usize, usize, u64), Series> = BTreeMap::new();
    let mut by_n: BTreeMap<(usize, u64, u64), Series> = BTreeMap::new();
    for (&(n, s, e, b), rs) in &g {
        by_eps.entry((n, s, b)).or_default().push((f64::from_bits(e), rs.clone()));
        by_n.entry((s, e, b)).or_default().push((n as f64, rs.clone()));
    }
    for ((n, s, b), series) in by_eps {
        let tag = format!("n{n}_s{s}_beta{}", f64::from_bits(b));
        for (metric, f) in [
            ("iterations_vs_epsilon", METRICS[0].1),
            ("correction_trace_distance_vs_epsilon", METRICS[3].1),
        ] {
            let pts: Vec<(f64, f64)> = series.iter().map(|(e, rs)| (*e, median_of(rs, f))).collect();
            if pts.iter().map(|p| p.0.to_bits()).collect::<BTreeSet<_>>().len() >= 3 {
                match fit_power_law(&pts) {
                    Ok(fit) => fit_lines(&mut out, &format!("fit.{metric}.{tag}"), &fit),
                    Err(e) => writeln!(out, "# fit.{metric}.{tag}: {e}").unwrap(),
                }
            }
        }
    }
    for ((s, e, b), series) in by_n {
        if series.len() < 3 {
            continue;
        }
        let tag = format!("s{s}_eps{:e}_beta{}", f64::from_bits(e), f64::from_bits(b));
        let pts: Vec<ScalingPoint> = series
            .iter()
            .map(|(n, rs)| ScalingPoint { n: *n, classical_seconds: median_of(rs, METRICS[2].1), total_gates: median_of(rs, METRICS[4].1) })
            .collect();
        for (mode, label) in [(ExtrapolationMode::TheoryExponents, "theory"), (ExtrapolationMode::FreeFit, "free")] {
            match break_even_extrapolation(&pts, mode, &campaign.project_n) {
                Ok(ex) => {
                    fit_lines(&mut out, &format!("fit.classical_seconds_vs_n.{label}.{tag}"), &ex.classical);
                    fit_lines(&mut out, &format!("fit.total_gates_vs_n.{label}.{tag}"), &ex.gates);
                    let mut csv = Vec::new();
                    ex.write_csv(&mut csv).unwrap();
                    tables.push((format!("projection_{label}_{tag}.csv"), String::from_utf8(csv).unwrap()));
                }
                Err(err) => writeln!(out, "# extrapolation {label}.{tag}: {err}").unwrap(),
            }
        }
    }
    (out, tables)
}

pub fn bench(a: &BenchArgs, out_dir: &Path, argv: Vec<String>) -> Result<u8> {
    let text = fs::read_to_string(&a.campaign).with_context(|| format!("reading {}", a.campaign.display()))?;
    let campaign = Campaign::parse(&text).with_context(|| format!("parsing {}", a.campaign.display()))?;
    let workers = a.workers.unwrap_or(campaign.workers).max(1);
    let mut m = RunManifest::new("bench", argv);
    m.input("campaign", &a.campaign)?;
    m.param("name", &campaign.name);
    m.param("jobs", campaign.jobs().len());
    m.seeds.insert("base".into(), campaign.seed);
    let t0 = Instant::now();
    let results = run_all(&campaign, workers)?;
    m.timings.insert("bench".into(), t0.elapsed().as_secs_f64());
    write_atomic(&out_dir.join("instances.csv"), &instances_csv(&results))?;
    write_atomic(&out_dir.join("aggregate.csv"), &aggregate_csv(&results))?;
    let (fit_text, tables) = fits(&results, &campaign);
    write_atomic(&out_dir.join("fits.txt"), &fit_text)?;
    m.output("instances", out_dir, "instances.csv")?;
    m.output("aggregate", out_dir, "aggregate.csv")?;
    m.output("fits", out_dir, "fits.txt")?;
    for (name, body) in &tables {
        write_atomic(&out_dir.join(name), body)?;
        m.output(name.trim_end_matches(".csv"), out_dir, name)?;
    }
    m.params.insert("exit_code".into(), EXIT_OK.to_string());
    m.store(out_dir)?;
    println!("{} jobs, {} complete", results.len(), results.iter().filter(|r| r.outcome == "complete").count());
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_spec() {
        let c = Campaign::parse("name = t\nn = 16, 32\ns = 3\nepsilon = 10^-1 0.05 # two\ninstances = 2\n").unwrap();
        assert_eq!(c.n, vec![16, 32]);
        assert!((c.epsilon[0] - 0.1).abs() < 1e-15);
        assert_eq!(c.beta, vec![0.45]);
        assert_eq!(c.jobs().len(), 2 * 2 * 2);
        assert!(Campaign::parse("n = 16\ns = 3\nepsilon = 0.1\nbogus = 1\n").is_err());
        assert!(Campaign::parse("n = 16.5\ns = 3\nepsilon = 0.1\n").is_err());
        assert!(Campaign::parse("s = 3\nepsilon = 0.1\n").is_err());
    }
}
