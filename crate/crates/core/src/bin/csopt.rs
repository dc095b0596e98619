use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use csopt::chain::{ChainConfig, Timing};
use csopt::experiment::{
    aggregate, bench_timing, default_decisions, emit_report, generate_with_redraw, run_experiment, sim_delay,
    write_csv, Algorithm, ReportFormat, ReportMetadata, Scenario, SweepSpec, TaskPlacement,
};
use csopt::gssum::{run_gssum_with, GssumScore};
use csopt::oracle::{verify_suite, SmallInstanceBounds};
use csopt::{run_csopt, AuctionInstance, Credits};

#[derive(Parser)]
#[command(name = "csopt", version, about = "Truthful crowdsensing auctions, baselines and protocol simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Single auctions.
    Auction {
        #[command(subcommand)]
        command: AuctionCommand,
    },
    /// Parameter sweeps.
    Experiment {
        #[command(subcommand)]
        command: ExperimentCommand,
    },
    /// Time the auction over a grid of problem sizes.
    Bench(BenchArgs),
    /// Protocol simulation.
    Chain {
        #[command(subcommand)]
        command: ChainCommand,
    },
    /// Check efficiency and incentive properties on random small instances.
    Verify(VerifyArgs),
}

#[derive(Subcommand)]
enum AuctionCommand {
    /// Run one auction on a generated scenario or a JSON instance.
    Run(RunArgs),
}

#[derive(Subcommand)]
enum ExperimentCommand {
    Sweep(SweepArgs),
}

#[derive(Subcommand)]
enum ChainCommand {
    /// Run the full request-to-data-access protocol once.
    Demo(DemoArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum AlgoChoice {
    Csopt,
    Gssum,
    Both,
}

impl AlgoChoice {
    fn algorithms(self) -> Vec<Algorithm> {
        match self {
            AlgoChoice::Csopt => vec![Algorithm::Csopt],
            AlgoChoice::Gssum => vec![Algorithm::Gssum],
            AlgoChoice::Both => vec![Algorithm::Csopt, Algorithm::Gssum],
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatChoice {
    Csv,
    Json,
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    #[arg(long, default_value_t = 100)]
    grid: u32,
    #[arg(long, default_value_t = 15.0)]
    radius: f64,
    #[arg(long, default_value = "50")]
    cost_min: Credits,
    #[arg(long, default_value = "100")]
    cost_max: Credits,
    #[arg(long, default_value_t = 0.9)]
    alpha: f64,
    #[arg(long, default_value_t = 0.9)]
    beta: f64,
    #[arg(long, default_value = "competitive")]
    placement: TaskPlacement,
}

impl ScenarioArgs {
    fn scenario(&self, n_users: usize, n_tasks: usize, repeat: Option<u32>, seed: u64) -> Scenario {
        Scenario {
            grid_size: self.grid,
            n_users,
            n_tasks,
            bid_radius: self.radius,
            cost_min: self.cost_min,
            cost_max: self.cost_max,
            alpha: self.alpha,
            beta: self.beta,
            repeat,
            placement: self.placement,
            seed,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Auction instance as JSON; otherwise one is generated.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    users: usize,
    #[arg(long, default_value_t = 200)]
    tasks: usize,
    /// Repeat factor; derived from alpha and beta when absent.
    #[arg(long)]
    r: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "csopt")]
    algo: AlgoChoice,
    #[arg(long, default_value = "set_cost_per_gain")]
    gssum_score: GssumScore,
    /// Also write the generated instance here.
    #[arg(long)]
    save_instance: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [100, 200, 300, 400, 500, 600, 700, 800, 900, 1000])]
    users: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [200])]
    tasks: Vec<usize>,
    /// Repeat factors to sweep; derived from alpha and beta when absent.
    #[arg(long, value_delimiter = ',')]
    r: Vec<u32>,
    /// Number of seeds, starting at `--seed`.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "both")]
    algo: AlgoChoice,
    #[arg(long, default_value = "set_cost_per_gain")]
    gssum_score: GssumScore,
    /// Report wall-clock runtimes instead of zeros.
    #[arg(long)]
    timing: bool,
    /// Print per-configuration means to stderr.
    #[arg(long)]
    summary: bool,
    /// Output file; CSV goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatChoice,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [10, 100, 500, 1000])]
    users: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [10, 100, 500, 1000])]
    tasks: Vec<usize>,
    #[arg(long)]
    r: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args)]
struct DemoArgs {
    #[arg(long, default_value_t = 100)]
    users: usize,
    #[arg(long, default_value_t = 50)]
    tasks: usize,
    #[arg(long)]
    r: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "t-b", default_value_t = 1.0)]
    t_b: f64,
    #[arg(long = "t-ann", default_value_t = 2.0)]
    t_ann: f64,
    #[arg(long = "t-bidding", default_value_t = 5.0)]
    t_bidding: f64,
    #[arg(long = "t-task", default_value_t = 10.0)]
    t_task: f64,
    #[arg(long, default_value = "10")]
    deposit: Credits,
    #[arg(long, default_value = "100")]
    fee: Credits,
    /// Write the block trace here as JSON lines.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    scenario: ScenarioArgs,
}

#[derive(Args)]
struct VerifyArgs {
    /// Number of random instances.
    #[arg(long, default_value_t = 200)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    max_bidders: usize,
    #[arg(long, default_value_t = 6)]
    max_tasks: u32,
    #[arg(long, default_value_t = 2)]
    max_r: u32,
    /// Cost deviation grid size.
    #[arg(long, default_value_t = 9)]
    grid_points: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

type CliResult = Result<ExitCode, Box<dyn std::error::Error>>;

fn write_out(out: &Option<PathBuf>, text: &str) -> io::Result<()> {
    match out {
        Some(path) => fs::write(path, text),
        None => io::stdout().write_all(text.as_bytes()),
    }
}

fn auction_run(args: RunArgs) -> CliResult {
    let inst: AuctionInstance = match &args.input {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)?,
        None => {
            let s = args.scenario.scenario(args.users, args.tasks, args.r, args.seed);
            generate_with_redraw(&s, 100)?.0
        }
    };
    if let Some(path) = &args.save_instance {
        fs::write(path, serde_json::to_string_pretty(&inst)?)?;
    }
    let r = inst.repeat()?;
    let mut results = serde_json::Map::new();
    for algo in args.algo.algorithms() {
        let outcome = match algo {
            Algorithm::Csopt => run_csopt(&inst)?,
            Algorithm::Gssum => run_gssum_with(&inst, r, args.gssum_score)?,
        };
        results.insert(algo.name().into(), serde_json::to_value(outcome)?);
    }
    write_out(&args.out, &(serde_json::to_string_pretty(&results)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

fn experiment_sweep(args: SweepArgs) -> CliResult {
    let base = args.scenario.scenario(args.users[0], args.tasks[0], None, args.seed);
    let spec = SweepSpec {
        base: base.clone(),
        users: args.users.clone(),
        tasks: args.tasks.clone(),
        repeats: args.r.clone(),
        seeds: (args.seed..args.seed + args.seeds).collect(),
        algorithms: args.algo.algorithms(),
        gssum_score: args.gssum_score,
    };
    let mut result = run_experiment(&spec);
    if !args.timing {
        result.rows.iter_mut().for_each(|r| r.runtime_s = 0.0);
    }
    if args.summary {
        for a in aggregate(&result.rows) {
            eprintln!(
                "{} users={} tasks={} r={} mean_payment={:.2} stderr={:.2} runs={}",
                a.algorithm, a.n_users, a.n_tasks, a.r, a.mean_payment, a.stderr_payment, a.runs
            );
        }
    }
    for f in &result.failures {
        eprintln!("failed: {} users={} tasks={} seed={}: {}", f.algorithm, f.n_users, f.n_tasks, f.seed, f.error);
    }
    match &args.out {
        Some(path) => {
            let mut meta = ReportMetadata::new(
                serde_json::to_value(&spec)?,
                default_decisions(args.gssum_score, args.scenario.placement, args.timing),
            );
            meta.failures = result.failures.clone();
            let format = match args.format {
                FormatChoice::Csv => ReportFormat::Csv,
                FormatChoice::Json => ReportFormat::Json,
            };
            emit_report(&result.rows, &meta, path, format)?;
        }
        None => match args.format {
            FormatChoice::Csv => write_csv(&result.rows, io::stdout().lock())?,
            FormatChoice::Json => println!("{}", serde_json::to_string_pretty(&result.rows)?),
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn bench(args: BenchArgs) -> CliResult {
    let base = args.scenario.scenario(1, 1, args.r, args.seed);
    let sizes: Vec<(usize, usize)> =
        args.users.iter().flat_map(|&u| args.tasks.iter().map(move |&t| (u, t))).collect();
    println!("n_users,n_tasks,r,seed,seconds");
    for size in sizes {
        match bench_timing(&base, &[size]) {
            Ok(rows) => {
                for t in rows {
                    println!("{},{},{},{},{:.6}", t.n_users, t.n_tasks, t.r, t.seed, t.seconds);
                }
            }
            Err(e) => eprintln!("skipped {} users x {} tasks: {e}", size.0, size.1),
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn chain_demo(args: DemoArgs) -> CliResult {
    let s = args.scenario.scenario(args.users, args.tasks, args.r, args.seed);
    let timing = Timing {
        block_interval: args.t_b,
        announcement: args.t_ann,
        bidding: args.t_bidding,
        auction: 0.0,
        task: args.t_task,
    };
    let config = ChainConfig { deposit: args.deposit, registration_fee: args.fee, ..ChainConfig::default() };
    let (report, run) = sim_delay(&s, timing, config)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    if let Some(path) = &args.out {
        fs::write(path, run.chain.trace_jsonl())?;
    }
    Ok(if report.within_one_block { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn verify(args: VerifyArgs) -> CliResult {
    let bounds = SmallInstanceBounds {
        max_bidders: args.max_bidders,
        max_tasks: args.max_tasks,
        max_r: args.max_r,
        max_set: 4,
        max_cost: 9,
    };
    let reports = verify_suite(bounds, args.seed..args.seed + args.seeds, args.grid_points)?;
    let mut ok = true;
    for report in reports.values() {
        ok &= report.passed;
        println!(
            "{} {}: {} trials, {} skipped",
            if report.passed { "PASS" } else { "FAIL" },
            report.property,
            report.trials,
            report.skipped
        );
        if let Some(cx) = &report.counterexample {
            println!("  counterexample: {}", serde_json::to_string(cx)?);
        }
    }
    if let Some(path) = &args.out {
        fs::write(path, serde_json::to_string_pretty(&reports)?)?;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Auction { command: AuctionCommand::Run(a) } => auction_run(a),
        Command::Experiment { command: ExperimentCommand::Sweep(a) } => experiment_sweep(a),
        Command::Bench(a) => bench(a),
        Command::Chain { command: ChainCommand::Demo(a) } => chain_demo(a),
        Command::Verify(a) => verify(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
