//! Cost-optimal truthful procurement auction for spatial mobile crowdsensing.
//!
//! - [`auction`]: the greedy allocation and pivotal payment mechanism.
//! - [`oracle`]: brute-force and Monte Carlo checks of its incentive properties.
//! - [`gssum`]: the whole-bid-set greedy baseline it is compared against.
//! - [`chain`]: a deterministic ledger simulator running the request, auction,
//!   payment and data-access contracts.
//! - [`reputation`]: influence limiting of sensed reports.
//! - [`experiment`]: scenario generation, sweeps, reports and timing.

pub mod auction;
pub mod chain;
pub mod experiment;
pub mod gssum;
pub mod money;
pub mod oracle;
pub mod reputation;

pub use auction::{
    alloc_rule, allocation_cost, payment_rule, repeat_factor, run_csopt, validate_instance, Allocation,
    AuctionError, AuctionInstance, AuctionOutcome, Bid, Cell, FeasibilityReport, Task, TaskCopy, TaskId,
    TaskMultiset, UserId,
};
pub use money::Credits;
