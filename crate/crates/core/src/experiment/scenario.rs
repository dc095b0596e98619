//! Random grid-world auction instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auction::{validate_instance, AuctionInstance, Bid, Cell, Task};
use crate::money::Credits;

use super::ExperimentError;

/// How task locations are drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskPlacement {
    /// Uniform over the grid; the instance may fail validation.
    Uniform,
    /// Uniform, but a task is redrawn until at least `r + 1` users are within
    /// the bid radius of it.
    #[default]
    Competitive,
}

impl TaskPlacement {
    pub fn name(self) -> &'static str {
        match self {
            TaskPlacement::Uniform => "uniform",
            TaskPlacement::Competitive => "competitive",
        }
    }
}

impl std::str::FromStr for TaskPlacement {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "uniform" => Ok(TaskPlacement::Uniform),
            "competitive" => Ok(TaskPlacement::Competitive),
            other => Err(format!("unknown task placement `{other}`")),
        }
    }
}

/// Draws per task before [`TaskPlacement::Competitive`] gives up.
pub const MAX_TASK_DRAWS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub grid_size: u32,
    pub n_users: usize,
    pub n_tasks: usize,
    /// A user bids on a task iff their Euclidean cell distance is at most this.
    pub bid_radius: f64,
    pub cost_min: Credits,
    pub cost_max: Credits,
    pub alpha: f64,
    pub beta: f64,
    /// Fixed repeat factor instead of the one implied by `alpha`, `beta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat: Option<u32>,
    pub placement: TaskPlacement,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            grid_size: 100,
            n_users: 500,
            n_tasks: 200,
            bid_radius: 15.0,
            cost_min: Credits::from_whole(50),
            cost_max: Credits::from_whole(100),
            alpha: 0.9,
            beta: 0.9,
            repeat: None,
            placement: TaskPlacement::default(),
            seed: 0,
        }
    }
}

impl Scenario {
    pub fn check(&self) -> Result<(), ExperimentError> {
        let bad = |msg: &str| Err(ExperimentError::InvalidScenario(msg.to_string()));
        if self.grid_size == 0 || self.n_users == 0 || self.n_tasks == 0 {
            return bad("grid size, user count and task count must be positive");
        }
        if self.cost_min > self.cost_max || self.cost_min.is_negative() {
            return bad("cost range must satisfy 0 <= cost_min <= cost_max");
        }
        if !(self.bid_radius >= 0.0) {
            return bad("bid radius must be nonnegative");
        }
        if self.repeat == Some(0) {
            return bad("repeat factor must be at least 1");
        }
        Ok(())
    }

    pub fn repeat_factor(&self) -> Result<u32, ExperimentError> {
        match self.repeat {
            Some(r) => Ok(r),
            None => Ok(crate::auction::repeat_factor(self.alpha, self.beta)?),
        }
    }
}

fn random_cell(rng: &mut ChaCha8Rng, grid: u32) -> Cell {
    Cell::new(rng.gen_range(0..grid), rng.gen_range(0..grid))
}

/// Builds the instance for a scenario. Deterministic in the scenario.
///
/// Users are placed first, then their costs are drawn, then tasks. Users
/// with no task in reach are left out of the bids.
pub fn generate_scenario(s: &Scenario) -> Result<AuctionInstance, ExperimentError> {
    s.check()?;
    let r = s.repeat_factor()?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let users: Vec<Cell> = (0..s.n_users).map(|_| random_cell(&mut rng, s.grid_size)).collect();
    let costs: Vec<Credits> = (0..s.n_users)
        .map(|_| Credits::from_units(rng.gen_range(s.cost_min.units()..=s.cost_max.units())))
        .collect();
    let reach = s.bid_radius * s.bid_radius;
    let in_reach = |a: Cell, b: Cell| (a.distance_squared(b) as f64) <= reach;

    let mut tasks = Vec::with_capacity(s.n_tasks);
    for id in 0..s.n_tasks as u32 {
        let location = match s.placement {
            TaskPlacement::Uniform => random_cell(&mut rng, s.grid_size),
            TaskPlacement::Competitive => {
                let mut draws = 0;
                loop {
                    let cell = random_cell(&mut rng, s.grid_size);
                    if users.iter().filter(|&&u| in_reach(u, cell)).take(r as usize + 1).count() > r as usize {
                        break cell;
                    }
                    draws += 1;
                    if draws == MAX_TASK_DRAWS {
                        return Err(ExperimentError::InfeasibleScenario(format!(
                            "no cell with {} users in reach after {MAX_TASK_DRAWS} draws",
                            r + 1
                        )));
                    }
                }
            }
        };
        tasks.push(Task { id, location });
    }

    let bids = users
        .iter()
        .zip(&costs)
        .enumerate()
        .filter_map(|(i, (&cell, &cost))| {
            let reachable: Vec<u32> = tasks.iter().filter(|t| in_reach(cell, t.location)).map(|t| t.id).collect();
            (!reachable.is_empty()).then(|| Bid::new(i as u32, cost, reachable))
        })
        .collect();

    let inst = AuctionInstance {
        grid_size: s.grid_size,
        tasks,
        bids,
        alpha: s.alpha,
        beta: s.beta,
        repeat_override: s.repeat,
    };
    let report = validate_instance(&inst, r);
    if !report.is_feasible() {
        return Err(ExperimentError::InfeasibleScenario(format!(
            "{} tasks lack bidders, {} bidders are pivotal",
            report.deficient_tasks.len(),
            report.pivotal_bidders.len()
        )));
    }
    Ok(inst)
}

/// Tries `seed`, `seed + 1`, ... until a scenario validates.
pub fn generate_with_redraw(s: &Scenario, attempts: u64) -> Result<(AuctionInstance, u64), ExperimentError> {
    let mut last = None;
    for k in 0..attempts.max(1) {
        let trial = Scenario { seed: s.seed.wrapping_add(k), ..s.clone() };
        match generate_scenario(&trial) {
            Ok(inst) => return Ok((inst, trial.seed)),
            Err(e @ ExperimentError::InfeasibleScenario(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}
