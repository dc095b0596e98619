use std::fmt;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auction::{run_csopt, AuctionInstance, AuctionOutcome};
use crate::chain::{end_to_end_delay, run_scripted, ChainConfig, ProtocolRun, ScriptedRun, Timing};
use crate::gssum::{run_gssum_with, GssumScore};
use crate::money::Credits;
use crate::oracle::mean_stderr;

use super::scenario::{generate_scenario, Scenario};
use super::ExperimentError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Csopt,
    Gssum,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Csopt => "csopt",
            Algorithm::Gssum => "gssum",
        }
    }

    pub fn run(self, inst: &AuctionInstance, r: u32, score: GssumScore) -> crate::auction::Result<AuctionOutcome> {
        match self {
            Algorithm::Csopt => run_csopt(inst),
            Algorithm::Gssum => run_gssum_with(inst, r, score),
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csopt" => Ok(Algorithm::Csopt),
            "gssum" => Ok(Algorithm::Gssum),
            other => Err(format!("unknown algorithm `{other}`")),
        }
    }
}

/// One algorithm run on one generated scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub algorithm: Algorithm,
    pub n_users: usize,
    pub n_tasks: usize,
    pub r: u32,
    pub seed: u64,
    pub total_payment: Credits,
    pub total_cost: Credits,
    pub runtime_s: f64,
}

impl ResultRow {
    fn sort_key(&self) -> (Algorithm, usize, usize, u32, u64) {
        (self.algorithm, self.n_users, self.n_tasks, self.r, self.seed)
    }
}

/// A scenario or run that produced no row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowFailure {
    pub algorithm: Algorithm,
    pub n_users: usize,
    pub n_tasks: usize,
    pub r: Option<u32>,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    /// Everything not swept comes from here.
    pub base: Scenario,
    pub users: Vec<usize>,
    pub tasks: Vec<usize>,
    /// Repeat factors to sweep; empty means the one implied by alpha, beta.
    pub repeats: Vec<u32>,
    pub seeds: Vec<u64>,
    pub algorithms: Vec<Algorithm>,
    pub gssum_score: GssumScore,
}

impl SweepSpec {
    pub fn new(base: Scenario) -> Self {
        SweepSpec {
            users: vec![base.n_users],
            tasks: vec![base.n_tasks],
            repeats: Vec::new(),
            seeds: (0..10).collect(),
            algorithms: vec![Algorithm::Csopt, Algorithm::Gssum],
            gssum_score: GssumScore::default(),
            base,
        }
    }

    fn scenarios(&self) -> Vec<Scenario> {
        let repeats: Vec<Option<u32>> =
            if self.repeats.is_empty() { vec![self.base.repeat] } else { self.repeats.iter().map(|&r| Some(r)).collect() };
        let mut out = Vec::new();
        for &n_users in &self.users {
            for &n_tasks in &self.tasks {
                for &repeat in &repeats {
                    for &seed in &self.seeds {
                        out.push(Scenario { n_users, n_tasks, repeat, seed, ..self.base.clone() });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<ResultRow>,
    pub failures: Vec<RowFailure>,
}

/// Runs every algorithm on every scenario of the sweep. Scenarios run in
/// parallel; rows come back sorted.
pub fn run_experiment(spec: &SweepSpec) -> SweepResult {
    let per_scenario: Vec<(Vec<ResultRow>, Vec<RowFailure>)> = spec
        .scenarios()
        .par_iter()
        .map(|s| {
            let mut rows = Vec::new();
            let mut failures = Vec::new();
            let fail = |algorithm, r, error: String| RowFailure {
                algorithm,
                n_users: s.n_users,
                n_tasks: s.n_tasks,
                r,
                seed: s.seed,
                error,
            };
            let generated = s.repeat_factor().and_then(|r| generate_scenario(s).map(|inst| (r, inst)));
            match generated {
                Err(e) => failures.extend(spec.algorithms.iter().map(|&a| fail(a, s.repeat, e.to_string()))),
                Ok((r, inst)) => {
                    for &algorithm in &spec.algorithms {
                        let start = Instant::now();
                        let result = algorithm.run(&inst, r, spec.gssum_score);
                        let runtime_s = start.elapsed().as_secs_f64();
                        match result {
                            Ok(out) => rows.push(ResultRow {
                                algorithm,
                                n_users: s.n_users,
                                n_tasks: s.n_tasks,
                                r,
                                seed: s.seed,
                                total_payment: out.total_payment,
                                total_cost: out.total_cost,
                                runtime_s,
                            }),
                            Err(e) => failures.push(fail(algorithm, Some(r), e.to_string())),
                        }
                    }
                }
            }
            (rows, failures)
        })
        .collect();
    let mut result = SweepResult::default();
    for (rows, failures) in per_scenario {
        result.rows.extend(rows);
        result.failures.extend(failures);
    }
    result.rows.sort_by_key(ResultRow::sort_key);
    result.failures.sort_by_key(|f| (f.algorithm, f.n_users, f.n_tasks, f.r, f.seed));
    result
}

/// Mean and standard error over seeds for one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub algorithm: Algorithm,
    pub n_users: usize,
    pub n_tasks: usize,
    pub r: u32,
    pub runs: usize,
    pub mean_payment: f64,
    pub stderr_payment: f64,
    pub mean_cost: f64,
    pub mean_runtime_s: f64,
}

pub fn aggregate(rows: &[ResultRow]) -> Vec<Aggregate> {
    let mut groups: std::collections::BTreeMap<(Algorithm, usize, usize, u32), Vec<&ResultRow>> = Default::default();
    for row in rows {
        groups.entry((row.algorithm, row.n_users, row.n_tasks, row.r)).or_default().push(row);
    }
    groups
        .into_iter()
        .map(|((algorithm, n_users, n_tasks, r), group)| {
            let payments: Vec<f64> = group.iter().map(|g| g.total_payment.to_f64()).collect();
            let (mean_payment, stderr_payment) = mean_stderr(&payments);
            let n = group.len() as f64;
            Aggregate {
                algorithm,
                n_users,
                n_tasks,
                r,
                runs: group.len(),
                mean_payment,
                stderr_payment,
                mean_cost: group.iter().map(|g| g.total_cost.to_f64()).sum::<f64>() / n,
                mean_runtime_s: group.iter().map(|g| g.runtime_s).sum::<f64>() / n,
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trend {
    NonIncreasing,
    NonDecreasing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendViolation {
    pub from: usize,
    pub to: usize,
    pub change: f64,
    pub tolerance: f64,
}

/// Consecutive `(mean, stderr)` points that move against `trend` by more
/// than two standard errors of their difference.
pub fn check_trend(points: &[(f64, f64)], trend: Trend) -> Vec<TrendViolation> {
    points
        .windows(2)
        .enumerate()
        .filter_map(|(i, w)| {
            let (a, sa) = w[0];
            let (b, sb) = w[1];
            let change = b - a;
            let against = match trend {
                Trend::NonIncreasing => change,
                Trend::NonDecreasing => -change,
            };
            let tolerance = 2.0 * (sa * sa + sb * sb).sqrt();
            (against > tolerance).then_some(TrendViolation { from: i, to: i + 1, change, tolerance })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub n_users: usize,
    pub n_tasks: usize,
    pub r: u32,
    pub seed: u64,
    pub seconds: f64,
}

/// Wall time of the full auction for each `(users, tasks)` size.
pub fn bench_timing(base: &Scenario, sizes: &[(usize, usize)]) -> Result<Vec<TimingRow>, ExperimentError> {
    sizes
        .iter()
        .map(|&(n_users, n_tasks)| {
            let s = Scenario { n_users, n_tasks, ..base.clone() };
            let inst = generate_scenario(&s)?;
            let start = Instant::now();
            let out = run_csopt(&inst)?;
            let seconds = start.elapsed().as_secs_f64();
            Ok(TimingRow { n_users, n_tasks, r: out.r, seed: s.seed, seconds })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayReport {
    pub timing: Timing,
    pub formula_s: f64,
    pub simulated_s: f64,
    pub within_one_block: bool,
}

/// Measures the auction's wall time on `scenario`, then runs the scripted
/// protocol with that duration and compares completion with the formula.
pub fn sim_delay(
    scenario: &Scenario,
    timing: Timing,
    config: ChainConfig,
) -> Result<(DelayReport, ProtocolRun), ExperimentError> {
    let inst = generate_scenario(scenario)?;
    let start = Instant::now();
    run_csopt(&inst)?;
    let timing = Timing { auction: start.elapsed().as_secs_f64(), ..timing };
    let run = run_scripted(&ScriptedRun::new(inst, timing), config)?;
    let formula_s = end_to_end_delay(&timing);
    let simulated_s = run.completed_at.ok_or_else(|| ExperimentError::Malformed("protocol did not complete".into()))?;
    let report = DelayReport {
        timing,
        formula_s,
        simulated_s,
        within_one_block: (simulated_s - formula_s).abs() <= timing.block_interval + 1e-9,
    };
    Ok((report, run))
}
