//! Independent checks of the mechanism's claims.
//!
//! Nothing in here reuses the greedy internals: efficiency is checked against
//! exhaustive enumeration, truthfulness by replaying every deviation in a
//! grid, and the payment identity by integrating the winner's assignment
//! count as a step function of its own reported cost. Distribution-level
//! statements (expected assignment, virtual cost regularity) are checked
//! numerically.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::{
    alloc_rule, allocation_cost, run_csopt, Allocation, AuctionError, AuctionInstance, Bid, TaskCopy, TaskId,
    TaskMultiset, UserId,
};
use crate::money::Credits;

/// Largest number of candidate assignments [`brute_force_ae`] will visit.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("search space of {candidates} assignments exceeds the limit of {limit}")]
    SearchSpaceTooLarge { candidates: u128, limit: u128 },
    #[error("no assignment satisfies the coverage and capacity constraints")]
    Infeasible,
    #[error("density is zero at cost {cost} (capacity {capacity})")]
    ZeroDensity { cost: f64, capacity: u32 },
    #[error("invalid deviation grid: {0}")]
    InvalidGrid(String),
    #[error("assignment of user {user} does not vanish above cost {upper}")]
    NonVanishing { user: UserId, upper: Credits },
    #[error(transparent)]
    Auction(#[from] AuctionError),
}

pub type Result<T, E = OracleError> = std::result::Result<T, E>;

// ── Efficiency ─────────────────────────────────────────────────────────

fn choose(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

fn combinations(items: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn go(items: &[usize], k: usize, start: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..items.len() {
            cur.push(items[i]);
            go(items, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(items, k, 0, &mut Vec::new(), &mut out);
    out
}

/// Exact minimum-cost assignment by enumeration.
///
/// Each task is given to exactly `r` distinct bidders that bid on it, subject
/// to capacities. Larger groups are never cheaper because costs are
/// nonnegative, so enumerating exact-size groups covers all optima.
pub fn brute_force_ae(inst: &AuctionInstance, r: u32) -> Result<(Credits, Allocation)> {
    let r = r as usize;
    let mut tasks: Vec<TaskId> = inst.tasks.iter().map(|t| t.id).collect();
    tasks.sort_unstable();
    let mut candidates: u128 = 1;
    let mut groups = Vec::with_capacity(tasks.len());
    for &t in &tasks {
        let interested: Vec<usize> = (0..inst.bids.len()).filter(|&i| inst.bids[i].task_ids.contains(&t)).collect();
        if interested.len() < r {
            return Err(OracleError::Infeasible);
        }
        candidates = candidates.saturating_mul(choose(interested.len(), r));
        if candidates > ENUMERATION_LIMIT {
            return Err(OracleError::SearchSpaceTooLarge { candidates, limit: ENUMERATION_LIMIT });
        }
        groups.push(combinations(&interested, r));
    }

    struct Search<'a> {
        bids: &'a [Bid],
        groups: &'a [Vec<Vec<usize>>],
        used: Vec<u32>,
        choice: Vec<usize>,
        best: Option<(Credits, Vec<usize>)>,
    }

    impl Search<'_> {
        fn visit(&mut self, depth: usize, cost: Credits) {
            if depth == self.groups.len() {
                if self.best.as_ref().is_none_or(|(b, _)| cost < *b) {
                    self.best = Some((cost, self.choice.clone()));
                }
                return;
            }
            for g in 0..self.groups[depth].len() {
                let group = &self.groups[depth][g];
                let fits = group.iter().all(|&i| self.bids[i].capacity.is_none_or(|k| self.used[i] < k));
                if !fits {
                    continue;
                }
                let mut step = Credits::ZERO;
                for &i in group {
                    self.used[i] += 1;
                    step += self.bids[i].cost_per_task;
                }
                self.choice.push(g);
                self.visit(depth + 1, cost + step);
                self.choice.pop();
                for &i in group {
                    self.used[i] -= 1;
                }
            }
        }
    }

    let mut search = Search {
        bids: &inst.bids,
        groups: &groups,
        used: vec![0; inst.bids.len()],
        choice: Vec::with_capacity(tasks.len()),
        best: None,
    };
    search.visit(0, Credits::ZERO);
    let (cost, choice) = search.best.ok_or(OracleError::Infeasible)?;
    let mut allocation = Allocation::new();
    for (pos, &g) in choice.iter().enumerate() {
        for (copy, &i) in groups[pos][g].iter().enumerate() {
            allocation.assign(inst.bids[i].user_id, [TaskCopy { task_id: tasks[pos], copy: copy as u32 }]);
        }
    }
    Ok((cost, allocation))
}

// ── Reports ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Counterexample {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance: Option<AuctionInstance>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user: Option<UserId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deviation: Option<Bid>,
    /// How much the deviation (or offending quantity) beats the claim.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<Credits>,
    pub note: String,
}

/// Outcome of one property check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub property: String,
    pub passed: bool,
    pub trials: u64,
    /// Trials that could not be evaluated, e.g. deviations that break the
    /// competition requirement.
    pub skipped: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counterexample: Option<Counterexample>,
}

impl PropertyReport {
    fn new(property: &str) -> Self {
        PropertyReport { property: property.to_string(), passed: true, trials: 0, skipped: 0, counterexample: None }
    }

    fn fail(&mut self, counterexample: Counterexample) {
        self.passed = false;
        self.counterexample.get_or_insert(counterexample);
    }

    /// Folds another report of the same property into this one.
    pub fn absorb(&mut self, other: PropertyReport) {
        self.trials += other.trials;
        self.skipped += other.skipped;
        if !other.passed {
            self.passed = false;
            if self.counterexample.is_none() {
                self.counterexample = other.counterexample;
            }
        }
    }
}

/// Compares the greedy cost with the exhaustive optimum.
pub fn check_ae(inst: &AuctionInstance) -> Result<PropertyReport> {
    let r = inst.repeat()?;
    let mut report = PropertyReport::new("allocative_efficiency");
    let greedy = alloc_rule(&TaskMultiset::replicate(&inst.tasks, r), &inst.bids)?;
    let greedy_cost = allocation_cost(&greedy, &inst.bids)?;
    let (optimum, _) = brute_force_ae(inst, r)?;
    report.trials = 1;
    if greedy_cost != optimum {
        report.fail(Counterexample {
            instance: Some(inst.clone()),
            user: None,
            deviation: None,
            gap: Some(greedy_cost - optimum),
            note: format!("greedy cost {greedy_cost} vs optimum {optimum}"),
        });
    }
    Ok(report)
}

// ── Truthfulness ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubsetPolicy {
    /// Every nonempty subset of the true task set.
    All,
    /// Nonempty subsets with at most this many tasks.
    UpTo(usize),
}

/// Deviations to try: reported costs crossed with under-reported task sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviationGrid {
    cost_values: Vec<Credits>,
    subsets: SubsetPolicy,
}

impl DeviationGrid {
    pub fn new(mut cost_values: Vec<Credits>, subsets: SubsetPolicy, support: (Credits, Credits)) -> Result<Self> {
        cost_values.sort_unstable();
        cost_values.dedup();
        if cost_values.is_empty() {
            return Err(OracleError::InvalidGrid("no cost values".into()));
        }
        if cost_values[0] < support.0 || cost_values[cost_values.len() - 1] > support.1 {
            return Err(OracleError::InvalidGrid(format!("cost values leave the support [{}, {}]", support.0, support.1)));
        }
        Ok(DeviationGrid { cost_values, subsets })
    }

    /// `points` evenly spaced costs from `lower` to `upper` inclusive, rounded
    /// down to the hundredth.
    pub fn spanning(lower: Credits, upper: Credits, points: usize, subsets: SubsetPolicy) -> Result<Self> {
        let points = points.max(1);
        let span = (upper - lower).units();
        let values = (0..points)
            .map(|i| {
                if points == 1 {
                    lower
                } else {
                    lower + Credits::from_units(span * i as i64 / (points as i64 - 1))
                }
            })
            .collect();
        Self::new(values, subsets, (lower, upper))
    }

    pub fn cost_values(&self) -> &[Credits] {
        &self.cost_values
    }

    /// Nonempty subsets of `tasks` allowed by the policy, in a fixed order.
    pub fn task_subsets(&self, tasks: &BTreeSet<TaskId>) -> Vec<BTreeSet<TaskId>> {
        let items: Vec<TaskId> = tasks.iter().copied().collect();
        let bound = match self.subsets {
            SubsetPolicy::All => items.len(),
            SubsetPolicy::UpTo(k) => k.min(items.len()),
        };
        assert!(items.len() < 32, "subset enumeration over {} tasks", items.len());
        (1u32..(1 << items.len()))
            .filter(|mask| mask.count_ones() as usize <= bound)
            .map(|mask| items.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, &t)| t).collect())
            .collect()
    }
}

/// Replays every grid deviation for every bidder and compares utilities at
/// the true cost. The instance's bids are the true types.
pub fn check_dsic(inst: &AuctionInstance, grid: &DeviationGrid) -> Result<PropertyReport> {
    let truthful = run_csopt(inst)?;
    let mut report = PropertyReport::new("dsic");
    let mut worst: Option<(Credits, Bid, UserId)> = None;
    for bid in &inst.bids {
        let honest = truthful.utility(bid.user_id, bid.cost_per_task);
        for subset in grid.task_subsets(&bid.task_ids) {
            for &cost in grid.cost_values() {
                let deviation = Bid { cost_per_task: cost, task_ids: subset.clone(), ..bid.clone() };
                if deviation == *bid {
                    continue;
                }
                let Ok(out) = run_csopt(&inst.with_bid(deviation.clone())) else {
                    report.skipped += 1;
                    continue;
                };
                report.trials += 1;
                let gap = out.utility(bid.user_id, bid.cost_per_task) - honest;
                if worst.as_ref().is_none_or(|(g, _, _)| gap > *g) {
                    worst = Some((gap, deviation, bid.user_id));
                }
            }
        }
    }
    if let Some((gap, deviation, user)) = worst {
        if gap > Credits::ZERO {
            report.fail(Counterexample {
                instance: Some(inst.clone()),
                user: Some(user),
                deviation: Some(deviation),
                gap: Some(gap),
                note: "deviation strictly improves utility".into(),
            });
        }
    }
    Ok(report)
}

/// Truthful surplus `p_i - c_i n_i` is nonnegative for every bidder.
pub fn check_ir(inst: &AuctionInstance) -> Result<PropertyReport> {
    let out = run_csopt(inst)?;
    let mut report = PropertyReport::new("individual_rationality");
    for bid in &inst.bids {
        report.trials += 1;
        let surplus = out.utility(bid.user_id, bid.cost_per_task);
        if surplus < Credits::ZERO {
            report.fail(Counterexample {
                instance: Some(inst.clone()),
                user: Some(bid.user_id),
                deviation: None,
                gap: Some(surplus),
                note: "negative truthful surplus".into(),
            });
        }
    }
    Ok(report)
}

/// Recomputes each winner's surplus as the greedy cost without it minus the
/// greedy cost with it, and checks it matches the payment and is nonnegative.
pub fn check_payment_decomposition(inst: &AuctionInstance) -> Result<PropertyReport> {
    let out = run_csopt(inst)?;
    let multiset = TaskMultiset::replicate(&inst.tasks, out.r);
    let full = allocation_cost(&alloc_rule(&multiset, &inst.bids)?, &inst.bids)?;
    let mut report = PropertyReport::new("payment_decomposition");
    for bid in &inst.bids {
        let n = out.allocation.count(bid.user_id);
        if n == 0 {
            continue;
        }
        report.trials += 1;
        let others: Vec<Bid> = inst.bids.iter().filter(|b| b.user_id != bid.user_id).cloned().collect();
        let without = allocation_cost(&alloc_rule(&multiset, &others)?, &others)?;
        let surplus = out.payment(bid.user_id) - bid.cost_per_task * n;
        if surplus != without - full || without < full {
            report.fail(Counterexample {
                instance: Some(inst.clone()),
                user: Some(bid.user_id),
                deviation: None,
                gap: Some(surplus - (without - full)),
                note: format!("surplus {surplus}, cost without {without}, cost with {full}"),
            });
        }
    }
    Ok(report)
}

/// Number of tasks `user` receives when reporting `cost`, others fixed.
pub fn assignment_count_at(inst: &AuctionInstance, user: UserId, cost: Credits) -> Result<usize> {
    let bid = inst.bid(user).ok_or(AuctionError::UnknownUser(user))?;
    let trial = inst.with_bid(Bid { cost_per_task: cost, ..bid.clone() });
    let r = trial.repeat()?;
    let allocation = alloc_rule(&TaskMultiset::replicate(&trial.tasks, r), &trial.bids)?;
    Ok(allocation.count(user))
}

/// `∫_{c_i}^{upper} n_i(z) dz`, integrated exactly.
///
/// `n_i` only changes where `z` crosses another bidder's cost, so it is
/// constant on each open interval between consecutive competitor costs.
/// It is evaluated at the interval midpoint on a copy of the instance with
/// every cost doubled, which keeps the midpoint on the integer grid.
pub fn surplus_by_step_integral(inst: &AuctionInstance, user: UserId, upper: Credits) -> Result<Credits> {
    let bid = inst.bid(user).ok_or(AuctionError::UnknownUser(user))?;
    let own = bid.cost_per_task;
    let mut doubled = inst.clone();
    for b in &mut doubled.bids {
        b.cost_per_task = b.cost_per_task * 2i64;
    }
    let mut points: Vec<Credits> = inst
        .bids
        .iter()
        .filter(|b| b.user_id != user)
        .map(|b| b.cost_per_task)
        .filter(|&c| c > own && c < upper)
        .collect();
    points.push(own);
    points.push(upper);
    points.sort_unstable();
    points.dedup();

    let mut area = Credits::ZERO;
    for pair in points.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let mid = lo * 2i64 + Credits::from_units(1);
        let n = assignment_count_at(&doubled, user, mid)?;
        area += (hi - lo) * n;
    }
    let beyond = upper * 2i64 + Credits::from_units(1);
    if assignment_count_at(&doubled, user, beyond)? != 0 {
        return Err(OracleError::NonVanishing { user, upper });
    }
    Ok(area)
}

/// Checks `p_i - c_i n_i` against the step integral for every winner, with
/// the upper limit at the highest reported cost.
pub fn check_payment_integral(inst: &AuctionInstance) -> Result<PropertyReport> {
    let out = run_csopt(inst)?;
    let upper = inst.bids.iter().map(|b| b.cost_per_task).max().unwrap_or_default();
    let mut report = PropertyReport::new("payment_step_integral");
    for bid in &inst.bids {
        let n = out.allocation.count(bid.user_id);
        if n == 0 {
            continue;
        }
        report.trials += 1;
        let surplus = out.payment(bid.user_id) - bid.cost_per_task * n;
        let integral = surplus_by_step_integral(inst, bid.user_id, upper)?;
        if surplus != integral {
            report.fail(Counterexample {
                instance: Some(inst.clone()),
                user: Some(bid.user_id),
                deviation: None,
                gap: Some(surplus - integral),
                note: format!("paid surplus {surplus} vs integral {integral}"),
            });
        }
    }
    Ok(report)
}

/// Multiplying all costs by `factor` scales payments and keeps assignments.
pub fn check_scale_covariance(inst: &AuctionInstance, factor: i64) -> Result<PropertyReport> {
    assert!(factor > 0, "scale factor must be positive");
    let out = run_csopt(inst)?;
    let mut scaled = inst.clone();
    for b in &mut scaled.bids {
        b.cost_per_task = b.cost_per_task * factor;
    }
    let scaled_out = run_csopt(&scaled)?;
    let mut report = PropertyReport::new("scale_covariance");
    report.trials = 1;
    let payments_scale = out.payments.iter().all(|(u, &p)| scaled_out.payment(*u) == p * factor);
    if scaled_out.allocation != out.allocation || !payments_scale {
        report.fail(Counterexample {
            instance: Some(inst.clone()),
            user: None,
            deviation: None,
            gap: Some(scaled_out.total_payment - out.total_payment * factor),
            note: format!("scaling costs by {factor} changed the outcome beyond scaling"),
        });
    }
    Ok(report)
}

/// Surplus at truthful cost as `user` reports each capacity in turn. Only
/// meaningful when capacities bind; reported, not asserted, by callers.
pub fn check_capacity_incentive(inst: &AuctionInstance, user: UserId, capacities: &[u32]) -> Result<PropertyReport> {
    let bid = inst.bid(user).ok_or(AuctionError::UnknownUser(user))?.clone();
    let mut report = PropertyReport::new("surplus_monotone_in_capacity");
    let mut previous: Option<(u32, Credits)> = None;
    for &k in capacities {
        let Ok(out) = run_csopt(&inst.with_bid(bid.clone().with_capacity(k))) else {
            report.skipped += 1;
            continue;
        };
        report.trials += 1;
        let surplus = out.utility(user, bid.cost_per_task);
        if let Some((pk, ps)) = previous {
            if surplus < ps {
                report.fail(Counterexample {
                    instance: Some(inst.clone()),
                    user: Some(user),
                    deviation: Some(bid.clone().with_capacity(k)),
                    gap: Some(ps - surplus),
                    note: format!("surplus fell from {ps} at capacity {pk} to {surplus} at {k}"),
                });
            }
        }
        previous = Some((k, surplus));
    }
    Ok(report)
}

// ── Distributions ──────────────────────────────────────────────────────

/// Conditional distribution of a user's cost given its capacity.
pub trait TypeDistribution {
    fn cost_support(&self) -> (f64, f64);
    fn capacity_support(&self) -> (u32, u32);
    fn cdf(&self, cost: f64, capacity: u32) -> f64;
    fn pdf(&self, cost: f64, capacity: u32) -> f64;

    /// Inverse-transform sample by bisection on the cdf.
    fn sample_cost(&self, capacity: u32, rng: &mut dyn RngCore) -> f64 {
        let u: f64 = rng.gen();
        let (mut lo, mut hi) = self.cost_support();
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid, capacity) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UniformCost {
    pub lower: f64,
    pub upper: f64,
    pub capacity: (u32, u32),
}

impl TypeDistribution for UniformCost {
    fn cost_support(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }
    fn capacity_support(&self) -> (u32, u32) {
        self.capacity
    }
    fn cdf(&self, cost: f64, _: u32) -> f64 {
        ((cost - self.lower) / (self.upper - self.lower)).clamp(0.0, 1.0)
    }
    fn pdf(&self, cost: f64, _: u32) -> f64 {
        if cost < self.lower || cost > self.upper {
            0.0
        } else {
            1.0 / (self.upper - self.lower)
        }
    }
}

/// Piecewise-constant density: `mass[i]` of probability spread evenly over
/// `[breaks[i], breaks[i + 1])`. Independent of capacity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseCost {
    breaks: Vec<f64>,
    mass: Vec<f64>,
    capacity: (u32, u32),
}

impl PiecewiseCost {
    pub fn new(breaks: Vec<f64>, mass: Vec<f64>, capacity: (u32, u32)) -> Self {
        assert_eq!(breaks.len(), mass.len() + 1, "one mass per segment");
        assert!(breaks.windows(2).all(|w| w[0] < w[1]), "breaks must increase");
        let total: f64 = mass.iter().sum();
        let mass = mass.into_iter().map(|m| m / total).collect();
        PiecewiseCost { breaks, mass, capacity }
    }

    fn segment(&self, cost: f64) -> Option<usize> {
        let last = self.breaks.len() - 1;
        if cost < self.breaks[0] || cost > self.breaks[last] {
            return None;
        }
        Some(self.breaks.partition_point(|&b| b <= cost).saturating_sub(1).min(last - 1))
    }
}

impl TypeDistribution for PiecewiseCost {
    fn cost_support(&self) -> (f64, f64) {
        (self.breaks[0], self.breaks[self.breaks.len() - 1])
    }
    fn capacity_support(&self) -> (u32, u32) {
        self.capacity
    }
    fn cdf(&self, cost: f64, _: u32) -> f64 {
        match self.segment(cost) {
            None if cost < self.breaks[0] => 0.0,
            None => 1.0,
            Some(s) => {
                let below: f64 = self.mass[..s].iter().sum();
                let width = self.breaks[s + 1] - self.breaks[s];
                below + self.mass[s] * (cost - self.breaks[s]) / width
            }
        }
    }
    fn pdf(&self, cost: f64, _: u32) -> f64 {
        self.segment(cost).map_or(0.0, |s| self.mass[s] / (self.breaks[s + 1] - self.breaks[s]))
    }
}

/// `F(c|k) = x^a(k)` with `x` the position of `c` in the support and
/// `a(k) = k` (or `1/k` when `inverted`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerCost {
    pub lower: f64,
    pub upper: f64,
    pub capacity: (u32, u32),
    pub inverted: bool,
}

impl PowerCost {
    fn exponent(&self, k: u32) -> f64 {
        let k = k.max(1) as f64;
        if self.inverted {
            1.0 / k
        } else {
            k
        }
    }

    fn position(&self, cost: f64) -> f64 {
        ((cost - self.lower) / (self.upper - self.lower)).clamp(0.0, 1.0)
    }
}

impl TypeDistribution for PowerCost {
    fn cost_support(&self) -> (f64, f64) {
        (self.lower, self.upper)
    }
    fn capacity_support(&self) -> (u32, u32) {
        self.capacity
    }
    fn cdf(&self, cost: f64, k: u32) -> f64 {
        self.position(cost).powf(self.exponent(k))
    }
    fn pdf(&self, cost: f64, k: u32) -> f64 {
        if cost < self.lower || cost > self.upper {
            return 0.0;
        }
        let a = self.exponent(k);
        a * self.position(cost).powf(a - 1.0) / (self.upper - self.lower)
    }
}

/// `H(c, k) = c + F(c|k) / f(c|k)`.
pub fn virtual_cost(dist: &dyn TypeDistribution, cost: f64, capacity: u32) -> Result<f64> {
    let density = dist.pdf(cost, capacity);
    if !(density > 0.0) || !density.is_finite() {
        return Err(OracleError::ZeroDensity { cost, capacity });
    }
    Ok(cost + dist.cdf(cost, capacity) / density)
}

/// Regular means `H` is non-decreasing in cost and non-increasing in
/// capacity on the given grid.
pub fn check_regularity(dist: &dyn TypeDistribution, cost_grid: &[f64], capacity_grid: &[u32]) -> Result<PropertyReport> {
    let mut costs = cost_grid.to_vec();
    costs.sort_by(f64::total_cmp);
    let mut caps = capacity_grid.to_vec();
    caps.sort_unstable();
    let mut h = Vec::with_capacity(caps.len());
    for &k in &caps {
        h.push(costs.iter().map(|&c| virtual_cost(dist, c, k)).collect::<Result<Vec<f64>>>()?);
    }
    let tol = |a: f64, b: f64| 1e-9 * (1.0 + a.abs().max(b.abs()));
    let mut report = PropertyReport::new("regularity");
    for (ki, row) in h.iter().enumerate() {
        for ci in 0..costs.len() {
            report.trials += 1;
            if ci + 1 < costs.len() && row[ci + 1] < row[ci] - tol(row[ci], row[ci + 1]) {
                report.fail(Counterexample {
                    instance: None,
                    user: None,
                    deviation: None,
                    gap: None,
                    note: format!(
                        "H decreases in cost at k={}: H({})={} > H({})={}",
                        caps[ki], costs[ci], row[ci], costs[ci + 1], row[ci + 1]
                    ),
                });
            }
            if ki + 1 < caps.len() && h[ki + 1][ci] > row[ci] + tol(row[ci], h[ki + 1][ci]) {
                report.fail(Counterexample {
                    instance: None,
                    user: None,
                    deviation: None,
                    gap: None,
                    note: format!(
                        "H increases in capacity at c={}: H(k={})={} < H(k={})={}",
                        costs[ci], caps[ki], row[ci], caps[ki + 1], h[ki + 1][ci]
                    ),
                });
            }
        }
    }
    Ok(report)
}

// ── Expected assignment ────────────────────────────────────────────────

/// Draws opponent profiles by resampling every other bidder's cost from a
/// type distribution while keeping task sets fixed.
#[derive(Debug, Clone)]
pub struct OpponentSampler {
    pub base: AuctionInstance,
    pub bidder: UserId,
    pub samples: usize,
    pub seed: u64,
}

impl OpponentSampler {
    /// Opponent profile number `index`, from its own stream of `seed`.
    pub fn profile(&self, dist: &dyn TypeDistribution, index: u64) -> AuctionInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let mut inst = self.base.clone();
        for bid in inst.bids.iter_mut().filter(|b| b.user_id != self.bidder) {
            let k = bid.capacity.unwrap_or(bid.task_ids.len() as u32);
            bid.cost_per_task = Credits::from_f64_rounded(dist.sample_cost(k, &mut rng));
        }
        inst
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub cost: Credits,
    pub mean: f64,
    pub stderr: f64,
}

/// Monte Carlo estimate of the expected assignment count at each cost, with
/// the same opponent profiles reused across costs.
pub fn expected_assignment_curve(
    dist: &dyn TypeDistribution,
    sampler: &OpponentSampler,
    cost_values: &[Credits],
) -> Result<(Vec<CurvePoint>, Vec<Vec<f64>>, u64)> {
    let mut costs = cost_values.to_vec();
    costs.sort_unstable();
    let mut counts: Vec<Vec<f64>> = vec![Vec::with_capacity(sampler.samples); costs.len()];
    let mut skipped = 0;
    'samples: for s in 0..sampler.samples as u64 {
        let profile = sampler.profile(dist, s);
        let mut row = Vec::with_capacity(costs.len());
        for &c in &costs {
            match assignment_count_at(&profile, sampler.bidder, c) {
                Ok(n) => row.push(n as f64),
                Err(OracleError::Auction(AuctionError::InfeasibleInstance { .. })) => {
                    skipped += 1;
                    continue 'samples;
                }
                Err(e) => return Err(e),
            }
        }
        for (col, n) in counts.iter_mut().zip(row) {
            col.push(n);
        }
    }
    let curve = costs
        .iter()
        .zip(&counts)
        .map(|(&cost, xs)| {
            let (mean, stderr) = mean_stderr(xs);
            CurvePoint { cost, mean, stderr }
        })
        .collect();
    Ok((curve, counts, skipped))
}

pub(crate) fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Expected assignment must not rise with the reported cost. A rise only
/// counts as a violation when it exceeds two standard errors of the paired
/// difference.
pub fn check_monotone_expected_assignment(
    dist: &dyn TypeDistribution,
    sampler: &OpponentSampler,
    cost_values: &[Credits],
) -> Result<PropertyReport> {
    let (curve, counts, skipped) = expected_assignment_curve(dist, sampler, cost_values)?;
    let mut report = PropertyReport::new("expected_assignment_monotone");
    report.trials = counts.first().map_or(0, |c| c.len() as u64);
    report.skipped = skipped;
    for i in 0..curve.len().saturating_sub(1) {
        let diffs: Vec<f64> = counts[i + 1].iter().zip(&counts[i]).map(|(b, a)| b - a).collect();
        let (mean, se) = mean_stderr(&diffs);
        if mean > 0.0 && mean > 2.0 * se {
            report.fail(Counterexample {
                instance: None,
                user: Some(sampler.bidder),
                deviation: None,
                gap: None,
                note: format!(
                    "expected assignment rose from {} at {} to {} at {}",
                    curve[i].mean, curve[i].cost, curve[i + 1].mean, curve[i + 1].cost
                ),
            });
        }
    }
    Ok(report)
}

// ── Random small instances ─────────────────────────────────────────────

/// Bounds for [`random_small_instance`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SmallInstanceBounds {
    pub max_bidders: usize,
    pub max_tasks: u32,
    pub max_r: u32,
    /// Largest task set a bidder starts with before competition repair.
    pub max_set: usize,
    /// Costs are whole credits in `1..=max_cost` so ties occur.
    pub max_cost: i64,
}

/// Random instance where every task keeps `r` bidders after any single
/// bidder leaves. Deterministic in `seed`.
pub fn random_small_instance(bounds: SmallInstanceBounds, seed: u64) -> AuctionInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_tasks = rng.gen_range(1..=bounds.max_tasks);
    let r = rng.gen_range(1..=bounds.max_r);
    let n_bidders = rng.gen_range((r as usize + 1).min(bounds.max_bidders)..=bounds.max_bidders);
    let max_set = bounds.max_set.min(n_tasks as usize).max(1);
    let mut bids: Vec<Bid> = (0..n_bidders)
        .map(|i| {
            let size = rng.gen_range(1..=max_set);
            let mut set = BTreeSet::new();
            while set.len() < size {
                set.insert(rng.gen_range(0..n_tasks));
            }
            Bid::new(i as u32, Credits::from_whole(rng.gen_range(1..=bounds.max_cost)), set)
        })
        .collect();
    for t in 0..n_tasks {
        let mut holders = bids.iter().filter(|b| b.task_ids.contains(&t)).count();
        let mut candidates: Vec<usize> = (0..bids.len()).filter(|&i| !bids[i].task_ids.contains(&t)).collect();
        candidates.sort_by_key(|&i| (bids[i].task_ids.len(), rng.gen::<u32>()));
        for i in candidates {
            if holders > r as usize {
                break;
            }
            bids[i].task_ids.insert(t);
            holders += 1;
        }
    }
    AuctionInstance::with_task_count(n_tasks, bids, 0.5, 0.5).with_repeat(r)
}

/// Per-property totals over a batch of random instances.
pub fn verify_suite(bounds: SmallInstanceBounds, seeds: std::ops::Range<u64>, grid_points: usize) -> Result<BTreeMap<String, PropertyReport>> {
    let mut totals: BTreeMap<String, PropertyReport> = BTreeMap::new();
    let mut add = |r: PropertyReport| match totals.get_mut(&r.property) {
        Some(t) => t.absorb(r),
        None => {
            totals.insert(r.property.clone(), r);
        }
    };
    for seed in seeds {
        let inst = random_small_instance(bounds, seed);
        let grid = DeviationGrid::spanning(
            Credits::from_whole(1),
            Credits::from_whole(bounds.max_cost),
            grid_points,
            SubsetPolicy::All,
        )?;
        add(check_ae(&inst)?);
        add(check_ir(&inst)?);
        add(check_payment_decomposition(&inst)?);
        add(check_payment_integral(&inst)?);
        add(check_dsic(&inst, &grid)?);
    }
    Ok(totals)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::fixtures::{c, three_user_example};
    use crate::auction::{payment_rule, TaskMultiset};

    #[test]
    fn brute_force_matches_example() {
        let (cost, alloc) = brute_force_ae(&three_user_example(), 1).unwrap();
        assert_eq!(cost, c("10"));
        assert_eq!(alloc.count(1), 10);
    }

    #[test]
    fn brute_force_two_copies() {
        let bids = vec![Bid::new(1, c("1"), [1, 2]), Bid::new(2, c("2"), [1, 2]), Bid::new(3, c("3"), [1, 2])];
        let inst = AuctionInstance::with_task_count(0, bids, 0.5, 0.5).with_tasks([1, 2]);
        let (cost, _) = brute_force_ae(&inst, 2).unwrap();
        assert_eq!(cost, c("6"));
    }

    #[test]
    fn brute_force_respects_capacity() {
        let bids = vec![
            Bid::new(1, c("1"), [0, 1]).with_capacity(1),
            Bid::new(2, c("5"), [0, 1]),
        ];
        let inst = AuctionInstance::with_task_count(2, bids, 0.5, 0.5);
        let (cost, alloc) = brute_force_ae(&inst, 1).unwrap();
        assert_eq!(cost, c("6"));
        assert_eq!(alloc.count(1), 1);
    }

    #[test]
    fn brute_force_rejects_huge_spaces() {
        let bids = (0..10).map(|i| Bid::new(i, c("1"), 0..8)).collect();
        let inst = AuctionInstance::with_task_count(8, bids, 0.5, 0.5);
        assert!(matches!(brute_force_ae(&inst, 2), Err(OracleError::SearchSpaceTooLarge { .. })));
    }

    #[test]
    fn brute_force_infeasible() {
        let inst = AuctionInstance::with_task_count(1, vec![Bid::new(1, c("1"), [0])], 0.5, 0.5);
        assert_eq!(brute_force_ae(&inst, 2), Err(OracleError::Infeasible));
    }

    #[test]
    fn dsic_holds_on_example_including_dropped_task() {
        let inst = three_user_example();
        let grid = DeviationGrid::spanning(c("0.5"), c("3"), 11, SubsetPolicy::UpTo(10)).unwrap();
        // The dropped-task manipulation is one of the subsets tried.
        assert!(grid.task_subsets(&inst.bids[0].task_ids).contains(&(1..=9).collect()));
        let report = check_dsic(&inst, &grid).unwrap();
        assert!(report.passed, "{report:?}");
        assert!(report.trials > 0);
    }

    #[test]
    fn cost_below_competitor_leaves_utility_unchanged() {
        let inst = AuctionInstance::with_task_count(1, vec![Bid::new(1, c("2"), [0]), Bid::new(2, c("5"), [0])], 0.5, 0.5)
            .with_repeat(1);
        let honest = run_csopt(&inst).unwrap().utility(1, c("2"));
        for cost in ["0", "1", "3", "4.99"] {
            let out = run_csopt(&inst.with_bid(Bid::new(1, c(cost), [0]))).unwrap();
            assert_eq!(out.utility(1, c("2")), honest, "report {cost}");
        }
        let out = run_csopt(&inst.with_bid(Bid::new(1, c("6"), [0]))).unwrap();
        assert_eq!(out.allocation.count(1), 0);
        assert_eq!(out.utility(1, c("2")), Credits::ZERO);
    }

    #[test]
    fn ir_on_example() {
        let report = check_ir(&three_user_example()).unwrap();
        assert!(report.passed);
        assert_eq!(report.trials, 3);
        let out = run_csopt(&three_user_example()).unwrap();
        assert_eq!(out.utility(1, c("1")), c("14"));
        assert_eq!(out.utility(3, c("2.5")), Credits::ZERO);
    }

    #[test]
    fn step_integral_on_example() {
        let inst = three_user_example();
        assert_eq!(surplus_by_step_integral(&inst, 1, c("2.5")).unwrap(), c("14"));
        assert!(check_payment_integral(&inst).unwrap().passed);
    }

    #[test]
    fn step_integral_detects_a_wrong_payment_rule() {
        // First-losing-bid pays 1.5 per task: surplus 5, but the integral is 14.
        let inst = three_user_example();
        let integral = surplus_by_step_integral(&inst, 1, c("2.5")).unwrap();
        assert_ne!(integral, (c("1.5") - c("1")) * 10usize);
    }

    #[test]
    fn step_integral_needs_competition_above() {
        let inst = three_user_example();
        assert!(matches!(
            surplus_by_step_integral(&inst, 1, c("2")),
            Err(OracleError::NonVanishing { .. })
        ));
    }

    #[test]
    fn decomposition_and_scale_on_random_instances() {
        let bounds = SmallInstanceBounds { max_bidders: 5, max_tasks: 4, max_r: 2, max_set: 4, max_cost: 9 };
        for seed in 0..40 {
            let inst = random_small_instance(bounds, seed);
            assert!(check_payment_decomposition(&inst).unwrap().passed);
            for factor in [2, 3, 7] {
                assert!(check_scale_covariance(&inst, factor).unwrap().passed, "seed {seed}");
            }
        }
    }

    #[test]
    fn random_instances_are_competitive() {
        let bounds = SmallInstanceBounds { max_bidders: 5, max_tasks: 6, max_r: 2, max_set: 3, max_cost: 20 };
        for seed in 0..100 {
            let inst = random_small_instance(bounds, seed);
            assert!(inst.bids.len() <= 5 && inst.tasks.len() <= 6);
            assert!(run_csopt(&inst).is_ok(), "seed {seed}: {inst:?}");
        }
        assert_eq!(random_small_instance(bounds, 3), random_small_instance(bounds, 3));
    }

    #[test]
    fn grid_validation() {
        assert!(DeviationGrid::new(vec![], SubsetPolicy::All, (c("0"), c("1"))).is_err());
        assert!(DeviationGrid::new(vec![c("2")], SubsetPolicy::All, (c("0"), c("1"))).is_err());
        let g = DeviationGrid::spanning(c("50"), c("100"), 9, SubsetPolicy::All).unwrap();
        assert_eq!(g.cost_values().len(), 9);
        assert_eq!(g.cost_values()[0], c("50"));
        assert_eq!(g.cost_values()[8], c("100"));
        let g = DeviationGrid::spanning(c("0"), c("1"), 2, SubsetPolicy::UpTo(2)).unwrap();
        assert_eq!(g.task_subsets(&[1, 2, 3].into()).len(), 6);
    }

    #[test]
    fn uniform_virtual_cost() {
        let u = UniformCost { lower: 50.0, upper: 100.0, capacity: (1, 10) };
        assert_eq!(virtual_cost(&u, 50.0, 1).unwrap(), 50.0);
        assert_eq!(virtual_cost(&u, 75.0, 3).unwrap(), 100.0);
        for c in [55.0, 60.5, 99.0] {
            assert!((virtual_cost(&u, c, 2).unwrap() - (2.0 * c - 50.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn virtual_cost_at_lower_support_is_identity() {
        let p = PiecewiseCost::new(vec![10.0, 20.0, 30.0], vec![0.3, 0.7], (1, 1));
        assert_eq!(virtual_cost(&p, 10.0, 1).unwrap(), 10.0);
        let q = PowerCost { lower: 1.0, upper: 2.0, capacity: (1, 4), inverted: false };
        assert_eq!(virtual_cost(&q, 1.0, 1).unwrap(), 1.0);
    }

    #[test]
    fn uniform_is_regular() {
        let u = UniformCost { lower: 50.0, upper: 100.0, capacity: (1, 10) };
        let costs: Vec<f64> = (0..=50).map(|i| 50.0 + i as f64).collect();
        assert!(check_regularity(&u, &costs, &[1, 2, 5, 10]).unwrap().passed);
    }

    #[test]
    fn sharply_rising_density_is_irregular() {
        // Mass 0.05 on [0, 0.5), 0.95 on [0.5, 1]: F/f drops from 0.5 to
        // about 0.026 across the break, so H falls from 1.0 to about 0.53.
        let p = PiecewiseCost::new(vec![0.0, 0.5, 1.0], vec![0.05, 0.95], (1, 1));
        assert!((virtual_cost(&p, 0.499999, 1).unwrap() - 1.0).abs() < 1e-4);
        assert!((virtual_cost(&p, 0.5, 1).unwrap() - (0.5 + 0.05 / 1.9)).abs() < 1e-9);
        let costs: Vec<f64> = (0..=20).map(|i| i as f64 * 0.05).collect();
        let report = check_regularity(&p, &costs, &[1]).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn capacity_direction_of_regularity() {
        let costs: Vec<f64> = (1..=9).map(|i| 1.0 + i as f64 * 0.1).collect();
        let regular = PowerCost { lower: 1.0, upper: 2.0, capacity: (1, 4), inverted: false };
        assert!(check_regularity(&regular, &costs, &[1, 2, 3, 4]).unwrap().passed);
        let irregular = PowerCost { inverted: true, ..regular };
        assert!(!check_regularity(&irregular, &costs, &[1, 2, 3, 4]).unwrap().passed);
    }

    #[test]
    fn zero_density_rejected() {
        let narrow = UniformCost { lower: 60.0, upper: 60.001, capacity: (1, 1) };
        assert!(matches!(virtual_cost(&narrow, 50.0, 1), Err(OracleError::ZeroDensity { .. })));
        assert!(matches!(
            check_regularity(&narrow, &[50.0, 60.0], &[1]),
            Err(OracleError::ZeroDensity { .. })
        ));
    }

    fn market(n_opponents: u32) -> AuctionInstance {
        let mut bids = vec![Bid::new(0, c("75"), 0..3)];
        bids.extend((1..=n_opponents).map(|i| Bid::new(i, c("75"), [(i - 1) % 3, i % 3])));
        AuctionInstance::with_task_count(3, bids, 0.5, 0.5).with_repeat(1)
    }

    #[test]
    fn degenerate_opponents_give_exact_step_function() {
        let inst = market(6);
        let costs: Vec<Credits> = (0..=10).map(|i| Credits::from_whole(50 + 5 * i)).collect();
        let point = PiecewiseCost::new(vec![70.0, 70.004], vec![1.0], (1, 10));
        let sampler = OpponentSampler { base: inst, bidder: 0, samples: 20, seed: 1 };
        let (curve, _, _) = expected_assignment_curve(&point, &sampler, &costs).unwrap();
        for p in &curve {
            assert_eq!(p.stderr, 0.0);
            assert_eq!(p.mean, if p.cost <= c("70") { 3.0 } else { 0.0 });
        }
        assert!(check_monotone_expected_assignment(&point, &sampler, &costs).unwrap().passed);
    }

    #[test]
    fn uniform_opponents_monotone_and_minimal_at_top() {
        let u = UniformCost { lower: 50.0, upper: 100.0, capacity: (1, 10) };
        let costs: Vec<Credits> = (0..=10).map(|i| Credits::from_whole(50 + 5 * i)).collect();
        let sampler = OpponentSampler { base: market(6), bidder: 0, samples: 1000, seed: 7 };
        let report = check_monotone_expected_assignment(&u, &sampler, &costs).unwrap();
        assert!(report.passed, "{report:?}");
        assert_eq!(report.trials, 1000);
        let (curve, _, _) = expected_assignment_curve(&u, &sampler, &costs).unwrap();
        let top = curve.last().unwrap().mean;
        assert!(curve.iter().all(|p| p.mean >= top));
        assert!(curve[0].mean > top);
    }

    #[test]
    fn capacity_incentive_is_reported() {
        let bids = vec![
            Bid::new(1, c("1"), 0..4),
            Bid::new(2, c("3"), 0..4),
            Bid::new(3, c("4"), 0..4),
        ];
        let inst = AuctionInstance::with_task_count(4, bids, 0.5, 0.5).with_repeat(1);
        let report = check_capacity_incentive(&inst, 1, &[1, 2, 3, 4]).unwrap();
        assert_eq!(report.trials, 4);
        assert!(report.passed);
    }

    #[test]
    fn payment_rule_matches_brute_force_vcg() {
        // Cross-check pivotal payments against enumeration-based optima.
        let bounds = SmallInstanceBounds { max_bidders: 5, max_tasks: 4, max_r: 2, max_set: 4, max_cost: 9 };
        for seed in 100..130 {
            let inst = random_small_instance(bounds, seed);
            let r = inst.repeat().unwrap();
            let alloc = alloc_rule(&TaskMultiset::replicate(&inst.tasks, r), &inst.bids).unwrap();
            let pay = payment_rule(&inst, r, &alloc).unwrap();
            let (full, _) = brute_force_ae(&inst, r).unwrap();
            for bid in &inst.bids {
                let n = alloc.count(bid.user_id);
                if n == 0 {
                    continue;
                }
                let mut without = inst.clone();
                without.bids.retain(|b| b.user_id != bid.user_id);
                let (others, _) = brute_force_ae(&without, r).unwrap();
                assert_eq!(pay[&bid.user_id], bid.cost_per_task * n + others - full, "seed {seed}");
            }
        }
    }
}
