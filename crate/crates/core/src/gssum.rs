//! Whole-bid-set greedy baseline.
//!
//! A selected user is handed every task it bid on and paid its reported
//! cost for all of them, even when some of those tasks already have enough
//! users. Selection continues until every task has `r` distinct users.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::auction::{AuctionError, AuctionInstance, AuctionOutcome, Allocation, Result, TaskCopy, TaskId};
use crate::money::Credits;

/// Selection score for the next user.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GssumScore {
    /// `cost_per_task * |bid set| / (task copies still needed it supplies)`.
    #[default]
    SetCostPerGain,
    /// Plain cost per task among users that still add coverage.
    CostPerTask,
}

impl GssumScore {
    pub fn name(self) -> &'static str {
        match self {
            GssumScore::SetCostPerGain => "set_cost_per_gain",
            GssumScore::CostPerTask => "cost_per_task",
        }
    }
}

impl fmt::Display for GssumScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for GssumScore {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "set_cost_per_gain" => Ok(GssumScore::SetCostPerGain),
            "cost_per_task" => Ok(GssumScore::CostPerTask),
            other => Err(format!("unknown gssum score `{other}`")),
        }
    }
}

/// Runs the baseline with the default score.
pub fn run_gssum(inst: &AuctionInstance, r: u32) -> Result<AuctionOutcome> {
    run_gssum_with(inst, r, GssumScore::default())
}

pub fn run_gssum_with(inst: &AuctionInstance, r: u32, score: GssumScore) -> Result<AuctionOutcome> {
    inst.check()?;
    let task_ids: Vec<TaskId> = {
        let mut ids: Vec<TaskId> = inst.tasks.iter().map(|t| t.id).collect();
        ids.sort_unstable();
        ids
    };
    let dense: BTreeMap<TaskId, usize> = task_ids.iter().enumerate().map(|(i, &t)| (t, i)).collect();
    let sets: Vec<Vec<usize>> = inst.bids.iter().map(|b| b.task_ids.iter().map(|t| dense[t]).collect()).collect();

    let mut need = vec![r; task_ids.len()];
    let mut served = vec![0u32; task_ids.len()];
    let mut outstanding: u64 = r as u64 * task_ids.len() as u64;
    let mut selected = vec![false; inst.bids.len()];
    let mut allocation = Allocation::new();
    let mut payments: BTreeMap<_, _> = inst.bids.iter().map(|b| (b.user_id, Credits::ZERO)).collect();

    while outstanding > 0 {
        // (bid index, gain); compared as fractions to stay exact.
        let mut best: Option<(usize, u64)> = None;
        for (i, bid) in inst.bids.iter().enumerate() {
            if selected[i] {
                continue;
            }
            let gain = sets[i].iter().filter(|&&t| need[t] > 0).count() as u64;
            if gain == 0 {
                continue;
            }
            let better = match best {
                None => true,
                Some((j, best_gain)) => {
                    let other = &inst.bids[j];
                    let (lhs, rhs) = match score {
                        GssumScore::SetCostPerGain => (
                            bid.cost_per_task.units() as i128 * sets[i].len() as i128 * best_gain as i128,
                            other.cost_per_task.units() as i128 * sets[j].len() as i128 * gain as i128,
                        ),
                        GssumScore::CostPerTask => {
                            (bid.cost_per_task.units() as i128, other.cost_per_task.units() as i128)
                        }
                    };
                    lhs < rhs || (lhs == rhs && bid.user_id < other.user_id)
                }
            };
            if better {
                best = Some((i, gain));
            }
        }
        let Some((i, gain)) = best else {
            let uncovered = need.iter().enumerate().filter(|(_, &n)| n > 0).map(|(t, _)| task_ids[t]).collect();
            return Err(AuctionError::InfeasibleInstance { tasks: uncovered });
        };
        selected[i] = true;
        outstanding -= gain;
        let bid = &inst.bids[i];
        let copies = sets[i].iter().map(|&t| {
            let copy = served[t];
            served[t] += 1;
            need[t] = need[t].saturating_sub(1);
            TaskCopy { task_id: task_ids[t], copy }
        });
        allocation.assign(bid.user_id, copies.collect::<Vec<_>>());
        payments.insert(bid.user_id, bid.cost_per_task * sets[i].len());
    }

    let total_payment: Credits = payments.values().sum();
    Ok(AuctionOutcome { r, allocation, payments, total_cost: total_payment, total_payment })
}
