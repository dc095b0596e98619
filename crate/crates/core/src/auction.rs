//! The CSOPT auction: feasibility, greedy allocation, pivotal payments.
//!
//! Every task must be served by `r` distinct users, where `r` is the
//! smallest count with `1 - (1 - alpha)^r >= beta`. The allocation rule
//! replicates each task `r` times and repeatedly hands the cheapest remaining
//! bidder one copy of every still-open task it bid on. A winner is paid its
//! reported cost for the tasks it received plus the amount by which the
//! greedy cost rises when it is removed from the auction.
//!
//! All functions here are pure. Ties on cost are broken by ascending user id.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::money::Credits;

pub type UserId = u32;
pub type TaskId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AuctionError {
    #[error("{name} = {value} must lie strictly between 0 and 1")]
    Domain { name: &'static str, value: f64 },
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("infeasible instance: tasks {tasks:?} cannot reach the required number of distinct users")]
    InfeasibleInstance { tasks: Vec<TaskId> },
    #[error("competition violated: the request is unservable without bidder(s) {users:?}")]
    CompetitionViolation { users: Vec<UserId> },
    #[error("unknown user id {0}")]
    UnknownUser(UserId),
}

pub type Result<T, E = AuctionError> = std::result::Result<T, E>;

/// A grid cell, `(row, col)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub row: u32,
    pub col: u32,
}

impl Cell {
    pub fn new(row: u32, col: u32) -> Self {
        Cell { row, col }
    }

    pub fn distance_squared(self, other: Cell) -> u64 {
        let dr = self.row.abs_diff(other.row) as u64;
        let dc = self.col.abs_diff(other.col) as u64;
        dr * dr + dc * dc
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub location: Cell,
}

/// A mobile user's sealed bid: one cost per task and the tasks it can do.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Bid {
    pub user_id: UserId,
    pub cost_per_task: Credits,
    pub task_ids: BTreeSet<TaskId>,
    /// Maximum number of tasks the user accepts. `None` is unbounded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity: Option<u32>,
}

impl Bid {
    pub fn new(user_id: UserId, cost_per_task: Credits, task_ids: impl IntoIterator<Item = TaskId>) -> Self {
        Bid { user_id, cost_per_task, task_ids: task_ids.into_iter().collect(), capacity: None }
    }

    pub fn with_capacity(mut self, capacity: u32) -> Self {
        self.capacity = Some(capacity);
        self
    }
}

fn default_grid_size() -> u32 {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionInstance {
    #[serde(default = "default_grid_size")]
    pub grid_size: u32,
    pub tasks: Vec<Task>,
    pub bids: Vec<Bid>,
    /// Probability that a single user completes an assigned task.
    pub alpha: f64,
    /// Required probability that each task is completed at least once.
    pub beta: f64,
    /// Replaces the repeat factor derived from `alpha` and `beta`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat_override: Option<u32>,
}

impl AuctionInstance {
    /// Instance over tasks `0..n_tasks`, all placed at the origin cell.
    pub fn with_task_count(n_tasks: u32, bids: Vec<Bid>, alpha: f64, beta: f64) -> Self {
        AuctionInstance {
            grid_size: default_grid_size(),
            tasks: (0..n_tasks).map(|id| Task { id, location: Cell::new(0, 0) }).collect(),
            bids,
            alpha,
            beta,
            repeat_override: None,
        }
    }

    pub fn with_repeat(mut self, r: u32) -> Self {
        self.repeat_override = Some(r);
        self
    }

    /// The repeat factor this instance runs with.
    pub fn repeat(&self) -> Result<u32> {
        match self.repeat_override {
            Some(0) => Err(AuctionError::InvalidInstance("repeat override must be at least 1".into())),
            Some(r) => Ok(r),
            None => repeat_factor(self.alpha, self.beta),
        }
    }

    pub fn bid(&self, user: UserId) -> Option<&Bid> {
        self.bids.iter().find(|b| b.user_id == user)
    }

    /// Copy of the instance with `user`'s bid replaced.
    pub fn with_bid(&self, replacement: Bid) -> Self {
        let mut inst = self.clone();
        if let Some(slot) = inst.bids.iter_mut().find(|b| b.user_id == replacement.user_id) {
            *slot = replacement;
        }
        inst
    }

    /// Structural checks: probabilities, unique ids, bid contents.
    pub fn check(&self) -> Result<()> {
        check_probability("alpha", self.alpha)?;
        check_probability("beta", self.beta)?;
        let mut task_ids = BTreeSet::new();
        for task in &self.tasks {
            if !task_ids.insert(task.id) {
                return Err(AuctionError::InvalidInstance(format!("duplicate task id {}", task.id)));
            }
            if task.location.row >= self.grid_size || task.location.col >= self.grid_size {
                return Err(AuctionError::InvalidInstance(format!("task {} lies outside the grid", task.id)));
            }
        }
        let mut users = BTreeSet::new();
        for bid in &self.bids {
            if !users.insert(bid.user_id) {
                return Err(AuctionError::InvalidInstance(format!("duplicate user id {}", bid.user_id)));
            }
            if bid.cost_per_task.is_negative() {
                return Err(AuctionError::InvalidInstance(format!("user {} reports a negative cost", bid.user_id)));
            }
            if bid.task_ids.is_empty() {
                return Err(AuctionError::InvalidInstance(format!("user {} bids on no tasks", bid.user_id)));
            }
            if let Some(unknown) = bid.task_ids.iter().find(|t| !task_ids.contains(t)) {
                return Err(AuctionError::InvalidInstance(format!(
                    "user {} bids on unknown task {unknown}",
                    bid.user_id
                )));
            }
            if bid.capacity == Some(0) {
                return Err(AuctionError::InvalidInstance(format!("user {} has zero capacity", bid.user_id)));
            }
        }
        Ok(())
    }
}

fn check_probability(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 && value < 1.0 {
        Ok(())
    } else {
        Err(AuctionError::Domain { name, value })
    }
}

/// Smallest `r >= 1` with `1 - (1 - alpha)^r >= beta`.
pub fn repeat_factor(alpha: f64, beta: f64) -> Result<u32> {
    check_probability("alpha", alpha)?;
    check_probability("beta", beta)?;
    let miss = 1.0 - alpha;
    let reaches = |r: u32| 1.0 - miss.powi(r as i32) >= beta;
    // The log ratio lands within one step of the answer; the power test
    // settles the rounding at exact boundaries such as alpha == beta.
    let estimate = ((1.0 - beta).ln() / miss.ln()).ceil();
    let mut r = if estimate.is_finite() && estimate >= 1.0 { estimate.min(u32::MAX as f64) as u32 } else { 1 };
    while !reaches(r) {
        r += 1;
    }
    while r > 1 && reaches(r - 1) {
        r -= 1;
    }
    Ok(r)
}

/// Result of the feasibility and competition checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub r: u32,
    /// Tasks with fewer than `r` interested bidders.
    pub deficient_tasks: Vec<TaskId>,
    /// Bidders whose removal leaves some task with fewer than `r` bidders.
    pub pivotal_bidders: Vec<UserId>,
}

impl FeasibilityReport {
    pub fn is_feasible(&self) -> bool {
        self.deficient_tasks.is_empty() && self.pivotal_bidders.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if !self.deficient_tasks.is_empty() {
            Err(AuctionError::InfeasibleInstance { tasks: self.deficient_tasks })
        } else if !self.pivotal_bidders.is_empty() {
            Err(AuctionError::CompetitionViolation { users: self.pivotal_bidders })
        } else {
            Ok(())
        }
    }
}

/// Checks that every task has `r` interested bidders and keeps them after
/// any single bidder leaves. Capacities are not taken into account.
pub fn validate_instance(inst: &AuctionInstance, r: u32) -> FeasibilityReport {
    let mut interested: BTreeMap<TaskId, u32> = inst.tasks.iter().map(|t| (t.id, 0)).collect();
    for bid in &inst.bids {
        for t in &bid.task_ids {
            if let Some(count) = interested.get_mut(t) {
                *count += 1;
            }
        }
    }
    let deficient_tasks = interested.iter().filter(|(_, &c)| c < r).map(|(&t, _)| t).collect();
    let mut pivotal_bidders: Vec<UserId> = inst
        .bids
        .iter()
        .filter(|b| b.task_ids.iter().any(|t| interested.get(t).is_some_and(|&c| c <= r)))
        .map(|b| b.user_id)
        .collect();
    pivotal_bidders.sort_unstable();
    FeasibilityReport { r, deficient_tasks, pivotal_bidders }
}

/// Multiset of task copies still to be assigned.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskMultiset(BTreeMap<TaskId, u32>);

impl TaskMultiset {
    pub fn replicate<'a>(tasks: impl IntoIterator<Item = &'a Task>, r: u32) -> Self {
        TaskMultiset(tasks.into_iter().map(|t| (t.id, r)).collect())
    }

    pub fn from_counts(counts: impl IntoIterator<Item = (TaskId, u32)>) -> Self {
        TaskMultiset(counts.into_iter().filter(|&(_, c)| c > 0).collect())
    }

    pub fn copies(&self, task: TaskId) -> u32 {
        self.0.get(&task).copied().unwrap_or(0)
    }

    pub fn len(&self) -> u64 {
        self.0.values().map(|&c| c as u64).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (TaskId, u32)> + '_ {
        self.0.iter().map(|(&t, &c)| (t, c))
    }
}

/// One replica of a task. Copies of a task are numbered from zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskCopy {
    pub task_id: TaskId,
    pub copy: u32,
}

/// Task copies held by each assigned user. Users with nothing are absent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Allocation(BTreeMap<UserId, Vec<TaskCopy>>);

impl Allocation {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `copies` to `user`'s assignment, keeping it sorted.
    pub fn assign(&mut self, user: UserId, copies: impl IntoIterator<Item = TaskCopy>) {
        let held = self.0.entry(user).or_default();
        held.extend(copies);
        held.sort_unstable();
        if held.is_empty() {
            self.0.remove(&user);
        }
    }

    pub fn assigned(&self, user: UserId) -> &[TaskCopy] {
        self.0.get(&user).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Number of tasks assigned to `user`.
    pub fn count(&self, user: UserId) -> usize {
        self.assigned(user).len()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.0.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (UserId, &[TaskCopy])> + '_ {
        self.0.iter().map(|(&u, c)| (u, c.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Distinct users serving each task.
    pub fn users_per_task(&self) -> BTreeMap<TaskId, BTreeSet<UserId>> {
        let mut out: BTreeMap<TaskId, BTreeSet<UserId>> = BTreeMap::new();
        for (user, copies) in self.iter() {
            for c in copies {
                out.entry(c.task_id).or_default().insert(user);
            }
        }
        out
    }
}

/// Total reported cost of an allocation.
pub fn allocation_cost(allocation: &Allocation, bids: &[Bid]) -> Result<Credits> {
    allocation
        .iter()
        .map(|(user, copies)| {
            let bid = bids.iter().find(|b| b.user_id == user).ok_or(AuctionError::UnknownUser(user))?;
            Ok(bid.cost_per_task * copies.len())
        })
        .sum()
}

/// Dense form of the greedy's input, built once and rerun with one bidder
/// excluded for each payment.
struct Greedy<'a> {
    bids: &'a [Bid],
    /// Bid indices sorted by `(cost_per_task, user_id)`.
    order: Vec<usize>,
    /// Per bid, dense task indices it can serve, ascending by task id.
    sets: Vec<Vec<u32>>,
    copies: Vec<u32>,
    task_ids: Vec<TaskId>,
}

struct GreedyRun {
    cost: Credits,
    /// `(bid index, [(dense task, copy index)])` in selection order.
    picks: Vec<(usize, Vec<(u32, u32)>)>,
}

impl<'a> Greedy<'a> {
    fn new(remaining: &TaskMultiset, bids: &'a [Bid]) -> Self {
        let task_ids: Vec<TaskId> = remaining.0.keys().copied().collect();
        let copies: Vec<u32> = remaining.0.values().copied().collect();
        let dense: BTreeMap<TaskId, u32> = task_ids.iter().enumerate().map(|(i, &t)| (t, i as u32)).collect();
        let sets = bids
            .iter()
            .map(|b| b.task_ids.iter().filter_map(|t| dense.get(t).copied()).collect())
            .collect();
        let mut order: Vec<usize> = (0..bids.len()).collect();
        order.sort_by_key(|&i| (bids[i].cost_per_task, bids[i].user_id));
        Greedy { bids, order, sets, copies, task_ids }
    }

    fn run(&self, skip: Option<usize>, record: bool) -> std::result::Result<GreedyRun, Vec<TaskId>> {
        let mut left = self.copies.clone();
        let mut outstanding: u64 = left.iter().map(|&c| c as u64).sum();
        let mut cost = Credits::ZERO;
        let mut picks = Vec::new();
        for &i in &self.order {
            if outstanding == 0 {
                break;
            }
            if Some(i) == skip {
                continue;
            }
            let limit = self.bids[i].capacity.map_or(usize::MAX, |k| k as usize);
            let mut taken = 0usize;
            let mut got = Vec::new();
            for &t in &self.sets[i] {
                if taken == limit {
                    break;
                }
                let slot = &mut left[t as usize];
                if *slot > 0 {
                    if record {
                        got.push((t, self.copies[t as usize] - *slot));
                    }
                    *slot -= 1;
                    taken += 1;
                }
            }
            if taken > 0 {
                outstanding -= taken as u64;
                cost += self.bids[i].cost_per_task * taken;
                if record {
                    picks.push((i, got));
                }
            }
        }
        if outstanding > 0 {
            let uncovered = left.iter().enumerate().filter(|(_, &c)| c > 0).map(|(t, _)| self.task_ids[t]).collect();
            return Err(uncovered);
        }
        Ok(GreedyRun { cost, picks })
    }

    fn allocation(&self, run: &GreedyRun) -> Allocation {
        let mut allocation = Allocation::new();
        for (i, got) in &run.picks {
            let copies = got.iter().map(|&(t, copy)| TaskCopy { task_id: self.task_ids[t as usize], copy });
            allocation.assign(self.bids[*i].user_id, copies);
        }
        allocation
    }
}

/// Greedy allocation: cheapest bidder first, each taking one copy of every
/// remaining task it bid on (up to its capacity, lowest task ids first).
pub fn alloc_rule(remaining: &TaskMultiset, bids: &[Bid]) -> Result<Allocation> {
    let greedy = Greedy::new(remaining, bids);
    let run = greedy.run(None, true).map_err(|tasks| AuctionError::InfeasibleInstance { tasks })?;
    Ok(greedy.allocation(&run))
}

/// Pivotal payments: `p_j = n_j * c_j + cost(greedy without j) - cost(greedy)`.
/// Bidders that received nothing are paid zero.
pub fn payment_rule(inst: &AuctionInstance, r: u32, allocation: &Allocation) -> Result<BTreeMap<UserId, Credits>> {
    let multiset = TaskMultiset::replicate(&inst.tasks, r);
    let greedy = Greedy::new(&multiset, &inst.bids);
    let full_cost = allocation_cost(allocation, &inst.bids)?;
    let mut payments = BTreeMap::new();
    for (idx, bid) in inst.bids.iter().enumerate() {
        let n = allocation.count(bid.user_id);
        let payment = if n == 0 {
            Credits::ZERO
        } else {
            let without = greedy
                .run(Some(idx), false)
                .map_err(|_| AuctionError::CompetitionViolation { users: vec![bid.user_id] })?;
            bid.cost_per_task * n + without.cost - full_cost
        };
        payments.insert(bid.user_id, payment);
    }
    Ok(payments)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub r: u32,
    pub allocation: Allocation,
    /// Payment per bidder, zero for bidders without tasks.
    pub payments: BTreeMap<UserId, Credits>,
    pub total_cost: Credits,
    pub total_payment: Credits,
}

impl AuctionOutcome {
    pub fn payment(&self, user: UserId) -> Credits {
        self.payments.get(&user).copied().unwrap_or_default()
    }

    /// Utility of `user` whose real cost per task is `true_cost`.
    pub fn utility(&self, user: UserId, true_cost: Credits) -> Credits {
        self.payment(user) - true_cost * self.allocation.count(user)
    }
}

/// Runs the full mechanism on a structurally valid, competitive instance.
pub fn run_csopt(inst: &AuctionInstance) -> Result<AuctionOutcome> {
    inst.check()?;
    let r = inst.repeat()?;
    validate_instance(inst, r).into_result()?;
    let multiset = TaskMultiset::replicate(&inst.tasks, r);
    let allocation = alloc_rule(&multiset, &inst.bids)?;
    let payments = payment_rule(inst, r, &allocation)?;
    let total_cost = allocation_cost(&allocation, &inst.bids)?;
    let total_payment = payments.values().sum();
    Ok(AuctionOutcome { r, allocation, payments, total_cost, total_payment })
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn repeat_factor_examples() {
        assert_eq!(repeat_factor(0.9, 0.9), Ok(1));
        assert_eq!(repeat_factor(0.5, 0.9), Ok(4));
        assert_eq!(repeat_factor(0.5, 0.99), Ok(7));
    }

    #[test]
    fn repeat_factor_rejects_out_of_range() {
        for (a, b) in [(0.0, 0.5), (1.0, 0.5), (0.5, 0.0), (0.5, 1.0), (-0.1, 0.5), (f64::NAN, 0.5)] {
            assert!(matches!(repeat_factor(a, b), Err(AuctionError::Domain { .. })), "{a} {b}");
        }
    }

    #[test]
    fn validate_two_bidders_one_task() {
        let inst = AuctionInstance::with_task_count(1, vec![Bid::new(1, c("1"), [0]), Bid::new(2, c("2"), [0])], 0.9, 0.9);
        assert!(validate_instance(&inst, 1).is_feasible());
    }

    #[test]
    fn validate_single_bidder_is_pivotal() {
        let inst = AuctionInstance::with_task_count(1, vec![Bid::new(1, c("1"), [0])], 0.9, 0.9);
        let report = validate_instance(&inst, 1);
        assert!(!report.is_feasible());
        assert!(report.deficient_tasks.is_empty());
        assert_eq!(report.pivotal_bidders, vec![1]);
    }

    #[test]
    fn validate_example_instance() {
        let report = validate_instance(&three_user_example(), 1);
        assert!(report.is_feasible(), "{report:?}");
        let report = validate_instance(&three_user_example(), 2);
        assert_eq!(report.deficient_tasks, Vec::<TaskId>::new());
        // At r = 2 tasks 1..9 have exactly two bidders.
        assert_eq!(report.pivotal_bidders, vec![1, 3]);
    }

    #[test]
    fn greedy_gives_example_tasks_to_cheapest() {
        let inst = three_user_example();
        let alloc = alloc_rule(&TaskMultiset::replicate(&inst.tasks, 1), &inst.bids).unwrap();
        assert_eq!(alloc.count(1), 10);
        assert_eq!(alloc.count(2), 0);
        assert_eq!(alloc.count(3), 0);
    }

    #[test]
    fn greedy_single_bidder_takes_everything() {
        let bids = vec![Bid::new(7, c("3"), 0..4)];
        let tasks: Vec<Task> = (0..4).map(|id| Task { id, location: Cell::new(0, 0) }).collect();
        let alloc = alloc_rule(&TaskMultiset::replicate(&tasks, 1), &bids).unwrap();
        assert_eq!(alloc.count(7), 4);
    }

    #[test]
    fn greedy_two_copies() {
        let bids = vec![Bid::new(1, c("1"), [1, 2]), Bid::new(2, c("2"), [1, 2]), Bid::new(3, c("3"), [1, 2])];
        let multiset = TaskMultiset::from_counts([(1, 2), (2, 2)]);
        let alloc = alloc_rule(&multiset, &bids).unwrap();
        assert_eq!(
            alloc.assigned(1),
            &[TaskCopy { task_id: 1, copy: 0 }, TaskCopy { task_id: 2, copy: 0 }]
        );
        assert_eq!(
            alloc.assigned(2),
            &[TaskCopy { task_id: 1, copy: 1 }, TaskCopy { task_id: 2, copy: 1 }]
        );
        assert_eq!(alloc.count(3), 0);
        assert_eq!(allocation_cost(&alloc, &bids).unwrap(), c("6"));
    }

    #[test]
    fn greedy_reports_uncovered_tasks() {
        let bids = vec![Bid::new(1, c("1"), [1])];
        let err = alloc_rule(&TaskMultiset::from_counts([(1, 2), (2, 1)]), &bids).unwrap_err();
        assert_eq!(err, AuctionError::InfeasibleInstance { tasks: vec![1, 2] });
    }

    #[test]
    fn greedy_capacity_takes_lowest_ids() {
        let bids = vec![Bid::new(1, c("1"), [1, 2, 3]).with_capacity(2), Bid::new(2, c("2"), [1, 2, 3])];
        let alloc = alloc_rule(&TaskMultiset::from_counts([(1, 1), (2, 1), (3, 1)]), &bids).unwrap();
        let ids: Vec<_> = alloc.assigned(1).iter().map(|c| c.task_id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(alloc.assigned(2), &[TaskCopy { task_id: 3, copy: 0 }]);
    }

    #[test]
    fn ties_break_by_user_id() {
        let bids = vec![Bid::new(9, c("2"), [0]), Bid::new(4, c("2"), [0])];
        let alloc = alloc_rule(&TaskMultiset::from_counts([(0, 1)]), &bids).unwrap();
        assert_eq!(alloc.count(4), 1);
        assert_eq!(alloc.count(9), 0);
    }

    #[test]
    fn allocation_cost_examples() {
        let inst = three_user_example();
        assert_eq!(allocation_cost(&Allocation::new(), &inst.bids).unwrap(), Credits::ZERO);

        let mut truthful = Allocation::new();
        truthful.assign(1, (1..=10).map(|t| TaskCopy { task_id: t, copy: 0 }));
        assert_eq!(allocation_cost(&truthful, &inst.bids).unwrap(), c("10"));

        let mut without_first = Allocation::new();
        without_first.assign(3, (1..=9).map(|t| TaskCopy { task_id: t, copy: 0 }));
        without_first.assign(2, [TaskCopy { task_id: 10, copy: 0 }]);
        assert_eq!(allocation_cost(&without_first, &inst.bids).unwrap(), c("24"));

        let mut stranger = Allocation::new();
        stranger.assign(42, [TaskCopy { task_id: 1, copy: 0 }]);
        assert_eq!(allocation_cost(&stranger, &inst.bids), Err(AuctionError::UnknownUser(42)));
    }

    #[test]
    fn example_truthful_payment() {
        let out = run_csopt(&three_user_example()).unwrap();
        assert_eq!(out.r, 1);
        assert_eq!(out.payment(1), c("24"));
        assert_eq!(out.utility(1, c("1")), c("14"));
        assert_eq!(out.payment(2), Credits::ZERO);
        assert_eq!(out.payment(3), Credits::ZERO);
        assert_eq!(out.total_cost, c("10"));
        assert_eq!(out.total_payment, c("24"));
    }

    #[test]
    fn example_manipulation_is_unprofitable() {
        let inst = three_user_example();
        let lie = inst.with_bid(Bid::new(1, c("1"), 1..=9));
        let out = run_csopt(&lie).unwrap();
        assert_eq!(out.allocation.count(1), 9);
        assert_eq!(out.allocation.count(2), 1);
        assert_eq!(out.payment(1), c("22.5"));
        assert_eq!(out.utility(1, c("1")), c("13.5"));
        assert!(out.utility(1, c("1")) < c("14"));
    }

    #[test]
    fn single_task_second_price() {
        let inst = AuctionInstance::with_task_count(1, vec![Bid::new(1, c("2"), [0]), Bid::new(2, c("5"), [0])], 0.9, 0.9);
        let out = run_csopt(&inst).unwrap();
        assert_eq!(out.allocation.count(1), 1);
        assert_eq!(out.payment(1), c("5"));
        assert_eq!(out.payment(2), Credits::ZERO);
    }

    #[test]
    fn disjoint_singletons_without_competitor_fail() {
        let bids = (0..3).map(|i| Bid::new(i, c("4"), [i])).collect();
        let inst = AuctionInstance::with_task_count(3, bids, 0.9, 0.9);
        assert_eq!(run_csopt(&inst), Err(AuctionError::CompetitionViolation { users: vec![0, 1, 2] }));
    }

    #[test]
    fn disjoint_singletons_with_competitors_pay_the_gap() {
        let mut bids: Vec<Bid> = (0..3).map(|i| Bid::new(i, c("4"), [i])).collect();
        bids.extend((0..3).map(|i| Bid::new(10 + i, c("4") + Credits::from_whole(i as i64 + 1), [i])));
        let inst = AuctionInstance::with_task_count(3, bids, 0.9, 0.9);
        let out = run_csopt(&inst).unwrap();
        for i in 0..3 {
            assert_eq!(out.payment(i), c("4") + Credits::from_whole(i as i64 + 1));
        }
    }

    #[test]
    fn four_copies_at_half_reliability() {
        let bids = (0..6).map(|i| Bid::new(i, Credits::from_whole(10 + i as i64), 0..3)).collect();
        let inst = AuctionInstance::with_task_count(3, bids, 0.5, 0.9);
        let out = run_csopt(&inst).unwrap();
        assert_eq!(out.r, 4);
        for users in out.allocation.users_per_task().values() {
            assert_eq!(users.len(), 4);
        }
    }

    #[test]
    fn run_rejects_deficient_tasks() {
        let inst = AuctionInstance::with_task_count(2, vec![Bid::new(1, c("1"), [0]), Bid::new(2, c("1"), [0])], 0.9, 0.9);
        assert_eq!(run_csopt(&inst), Err(AuctionError::InfeasibleInstance { tasks: vec![1] }));
    }

    #[test]
    fn check_rejects_malformed_bids() {
        let base = || AuctionInstance::with_task_count(2, vec![Bid::new(1, c("1"), [0])], 0.9, 0.9);
        let mut inst = base();
        inst.bids.push(Bid::new(1, c("1"), [1]));
        assert!(matches!(inst.check(), Err(AuctionError::InvalidInstance(_))));
        let mut inst = base();
        inst.bids[0].task_ids.clear();
        assert!(matches!(inst.check(), Err(AuctionError::InvalidInstance(_))));
        let mut inst = base();
        inst.bids[0].task_ids.insert(5);
        assert!(matches!(inst.check(), Err(AuctionError::InvalidInstance(_))));
        let mut inst = base();
        inst.bids[0].cost_per_task = c("-1");
        assert!(matches!(inst.check(), Err(AuctionError::InvalidInstance(_))));
        let mut inst = base();
        inst.bids[0].capacity = Some(0);
        assert!(matches!(inst.check(), Err(AuctionError::InvalidInstance(_))));
        let mut inst = base();
        inst.alpha = 1.0;
        assert!(matches!(inst.check(), Err(AuctionError::Domain { .. })));
    }

    fn small_instance() -> impl Strategy<Value = AuctionInstance> {
        (1u32..=5, 2usize..=6, 1u32..=2).prop_flat_map(|(n_tasks, n_bidders, r)| {
            let bid = (1i64..=20, proptest::collection::btree_set(0..n_tasks, 1..=n_tasks as usize));
            proptest::collection::vec(bid, n_bidders).prop_map(move |raw| {
                let bids = raw
                    .into_iter()
                    .enumerate()
                    .map(|(i, (cost, tasks))| Bid::new(i as u32, Credits::from_whole(cost), tasks))
                    .collect();
                AuctionInstance::with_task_count(n_tasks, bids, 0.5, 0.5).with_repeat(r)
            })
        })
    }

    proptest! {
        #[test]
        fn outcome_invariants(inst in small_instance()) {
            let Ok(out) = run_csopt(&inst) else { return Ok(()); };
            let per_task = out.allocation.users_per_task();
            for task in &inst.tasks {
                prop_assert_eq!(per_task.get(&task.id).map_or(0, |u| u.len()), out.r as usize);
            }
            let mut seen = BTreeSet::new();
            for (user, copies) in out.allocation.iter() {
                let bid = inst.bid(user).unwrap();
                let mut tasks = BTreeSet::new();
                for c in copies {
                    prop_assert!(seen.insert(*c), "copy assigned twice");
                    prop_assert!(tasks.insert(c.task_id), "user holds two copies of a task");
                    prop_assert!(bid.task_ids.contains(&c.task_id));
                }
            }
            prop_assert_eq!(seen.len() as u32, inst.tasks.len() as u32 * out.r);
            for bid in &inst.bids {
                prop_assert!(out.utility(bid.user_id, bid.cost_per_task) >= Credits::ZERO);
            }
            prop_assert_eq!(out.total_payment, out.payments.values().sum::<Credits>());
            prop_assert_eq!(run_csopt(&inst).unwrap(), out);
        }

        #[test]
        fn assignment_count_is_monotone_in_own_cost(inst in small_instance(), who in 0usize..6) {
            let Some(bid) = inst.bids.get(who % inst.bids.len()).cloned() else { return Ok(()); };
            let mut previous = usize::MAX;
            for cost in 0..=25 {
                let trial = inst.with_bid(Bid { cost_per_task: Credits::from_whole(cost), ..bid.clone() });
                let Ok(out) = run_csopt(&trial) else { continue; };
                let n = out.allocation.count(bid.user_id);
                prop_assert!(n <= previous, "n rose from {} to {} at cost {}", previous, n, cost);
                previous = n;
            }
        }
    }
}
