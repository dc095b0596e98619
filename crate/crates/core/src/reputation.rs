//! Influence limiting of sensed reports by reputation.
//!
//! A report from a user with reputation `rho` is kept with probability
//! `rho / (rho + 1)`. After each time slot the reputation of every reporter
//! is compared against a trusted reference: within tolerance it grows by
//! one, otherwise it halves. Trusted users are always kept.

use std::collections::{BTreeMap, BTreeSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auction::UserId;

/// Name of the update rule, recorded in experiment metadata.
pub const UPDATE_RULE: &str = "plus_one_or_halve";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReputationError {
    #[error("no trusted report for the slot")]
    NoTrustedReference,
    #[error("user {0} reported twice in one slot")]
    DuplicateReport(UserId),
    #[error("reputation must be nonnegative")]
    Negative,
    #[error("tolerance must be finite and nonnegative")]
    BadTolerance,
}

/// A scalar reading for one time slot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub user: UserId,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReputationLedger {
    scores: BTreeMap<UserId, BigRational>,
    trusted: BTreeSet<UserId>,
}

impl ReputationLedger {
    pub fn new(trusted: impl IntoIterator<Item = UserId>) -> Self {
        ReputationLedger { scores: BTreeMap::new(), trusted: trusted.into_iter().collect() }
    }

    pub fn is_trusted(&self, user: UserId) -> bool {
        self.trusted.contains(&user)
    }

    /// Unknown users start at zero.
    pub fn rho(&self, user: UserId) -> BigRational {
        self.scores.get(&user).cloned().unwrap_or_else(BigRational::zero)
    }

    pub fn set_rho(&mut self, user: UserId, rho: BigRational) -> Result<(), ReputationError> {
        if rho < BigRational::zero() {
            return Err(ReputationError::Negative);
        }
        self.scores.insert(user, rho);
        Ok(())
    }

    /// Probability a report by `user` is kept; one for trusted users.
    pub fn inclusion(&self, user: UserId) -> BigRational {
        if self.is_trusted(user) {
            BigRational::one()
        } else {
            inclusion_probability(&self.rho(user))
        }
    }
}

/// `rho / (rho + 1)`.
pub fn inclusion_probability(rho: &BigRational) -> BigRational {
    rho / (rho + BigRational::one())
}

pub fn rational(n: i64, d: i64) -> BigRational {
    BigRational::new(BigInt::from(n), BigInt::from(d))
}

/// Applies one slot of reports. The reference is the mean of the trusted
/// reports; an empty slot leaves the ledger as it is.
pub fn update_reputation(
    ledger: &ReputationLedger,
    reports: &[Report],
    trusted_reports: &[Report],
    tolerance: f64,
) -> Result<ReputationLedger, ReputationError> {
    if !(tolerance.is_finite() && tolerance >= 0.0) {
        return Err(ReputationError::BadTolerance);
    }
    let mut next = ledger.clone();
    if reports.is_empty() {
        return Ok(next);
    }
    if trusted_reports.is_empty() {
        return Err(ReputationError::NoTrustedReference);
    }
    let reference = trusted_reports.iter().map(|r| r.value).sum::<f64>() / trusted_reports.len() as f64;
    let mut seen = BTreeSet::new();
    let two = BigRational::from_integer(BigInt::from(2));
    for report in reports {
        if !seen.insert(report.user) {
            return Err(ReputationError::DuplicateReport(report.user));
        }
        if ledger.is_trusted(report.user) {
            continue;
        }
        let rho = ledger.rho(report.user);
        let updated =
            if (report.value - reference).abs() <= tolerance { rho + BigRational::one() } else { rho / &two };
        next.scores.insert(report.user, updated);
    }
    Ok(next)
}

/// Keeps each report independently with its author's inclusion probability.
pub fn filter_reports<R: Rng + ?Sized>(ledger: &ReputationLedger, reports: &[Report], rng: &mut R) -> Vec<Report> {
    reports
        .iter()
        .filter(|r| {
            if ledger.is_trusted(r.user) {
                return true;
            }
            let p = ledger.inclusion(r.user);
            if p.is_zero() {
                return false;
            }
            rng.gen::<f64>() < p.to_f64().unwrap_or(0.0)
        })
        .copied()
        .collect()
}

/// One user reporting a wrong value every slot.
#[derive(Debug, Clone, PartialEq)]
pub struct LiarTrace {
    /// Reputation at the start of each slot.
    pub rhos: Vec<BigRational>,
    /// Sum of the inclusion probabilities along the trace: the expected
    /// number of false reports that got in.
    pub expected_included: BigRational,
    /// Reports that actually got in for this seed.
    pub included: usize,
}

/// Runs `slots` slots where `liar` always misses the trusted value by more
/// than the tolerance.
pub fn simulate_liar(initial_rho: BigRational, slots: usize, seed: u64) -> Result<LiarTrace, ReputationError> {
    const LIAR: UserId = 1;
    const ORACLE: UserId = 0;
    let mut ledger = ReputationLedger::new([ORACLE]);
    ledger.set_rho(LIAR, initial_rho)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = Report { user: ORACLE, value: 20.0 };
    let lie = Report { user: LIAR, value: 35.0 };
    let mut rhos = Vec::with_capacity(slots);
    let mut expected = BigRational::zero();
    let mut included = 0;
    for _ in 0..slots {
        rhos.push(ledger.rho(LIAR));
        expected += ledger.inclusion(LIAR);
        included += filter_reports(&ledger, &[lie], &mut rng).len();
        ledger = update_reputation(&ledger, &[lie, truth], &[truth], 1.0)?;
    }
    Ok(LiarTrace { rhos, expected_included: expected, included })
}

/// `sum_t rho0 2^-t / (rho0 2^-t + 1)` for `t < slots`, computed directly.
pub fn halving_bound(initial_rho: &BigRational, slots: usize) -> BigRational {
    let mut rho = initial_rho.clone();
    let mut sum = BigRational::zero();
    let two = BigRational::from_integer(BigInt::from(2));
    for _ in 0..slots {
        sum += &rho / (&rho + BigRational::one());
        rho /= &two;
    }
    sum
}

#[derive(Serialize, Deserialize)]
struct LedgerRepr {
    scores: BTreeMap<UserId, String>,
    trusted: BTreeSet<UserId>,
}

impl Serialize for ReputationLedger {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        LedgerRepr { scores: self.scores.iter().map(|(u, r)| (*u, r.to_string())).collect(), trusted: self.trusted.clone() }
            .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ReputationLedger {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let repr = LedgerRepr::deserialize(d)?;
        let mut scores = BTreeMap::new();
        for (user, text) in repr.scores {
            let rho: BigRational = text.parse().map_err(serde::de::Error::custom)?;
            if rho < BigRational::zero() {
                return Err(serde::de::Error::custom("negative reputation"));
            }
            scores.insert(user, rho);
        }
        Ok(ReputationLedger { scores, trusted: repr.trusted })
    }
}
