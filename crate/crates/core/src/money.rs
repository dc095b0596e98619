//! Exact credit amounts.
//!
//! Costs, payments, deposits and balances are all counted in hundredths of a
//! credit and stored as `i64`. Nothing on the payment path touches floating
//! point, so escrow accounting in the chain simulator balances to the unit.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Mul, Neg, Sub, SubAssign};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of stored units per whole credit.
pub const UNITS_PER_CREDIT: i64 = 100;

/// An amount of credits with a fixed resolution of 0.01.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Credits(i64);

#[derive(Debug, Error, PartialEq, Eq)]
#[error("cannot parse `{0}` as a credit amount with at most two decimals")]
pub struct ParseCreditsError(String);

impl Credits {
    pub const ZERO: Credits = Credits(0);

    /// Amount from raw hundredths.
    pub const fn from_units(units: i64) -> Self {
        Credits(units)
    }

    pub const fn from_whole(credits: i64) -> Self {
        Credits(credits * UNITS_PER_CREDIT)
    }

    pub const fn units(self) -> i64 {
        self.0
    }

    pub fn is_negative(self) -> bool {
        self.0 < 0
    }

    /// Lossy conversion for reporting and plotting only.
    pub fn to_f64(self) -> f64 {
        self.0 as f64 / UNITS_PER_CREDIT as f64
    }

    /// Rounds a float to the nearest hundredth. Used for sampled costs, never
    /// for payments.
    pub fn from_f64_rounded(value: f64) -> Self {
        Credits((value * UNITS_PER_CREDIT as f64).round() as i64)
    }

    pub fn checked_sub(self, rhs: Credits) -> Option<Credits> {
        self.0.checked_sub(rhs.0).map(Credits)
    }
}

impl fmt::Display for Credits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.unsigned_abs();
        let per = UNITS_PER_CREDIT as u64;
        write!(f, "{sign}{}.{:02}", abs / per, abs % per)
    }
}

impl FromStr for Credits {
    type Err = ParseCreditsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseCreditsError(s.to_string());
        let trimmed = s.trim();
        let (negative, body) = match trimmed.strip_prefix('-') {
            Some(rest) => (true, rest),
            None => (false, trimmed),
        };
        let (whole, frac) = match body.split_once('.') {
            Some((w, f)) => (w, f),
            None => (body, ""),
        };
        if whole.is_empty() && frac.is_empty() {
            return Err(err());
        }
        if frac.len() > 2 || !whole.chars().chain(frac.chars()).all(|c| c.is_ascii_digit()) {
            return Err(err());
        }
        let whole: i64 = if whole.is_empty() { 0 } else { whole.parse().map_err(|_| err())? };
        let mut frac_units: i64 = if frac.is_empty() { 0 } else { frac.parse().map_err(|_| err())? };
        if frac.len() == 1 {
            frac_units *= 10;
        }
        let units = whole
            .checked_mul(UNITS_PER_CREDIT)
            .and_then(|w| w.checked_add(frac_units))
            .ok_or_else(err)?;
        Ok(Credits(if negative { -units } else { units }))
    }
}

impl Add for Credits {
    type Output = Credits;
    fn add(self, rhs: Credits) -> Credits {
        Credits(self.0 + rhs.0)
    }
}

impl AddAssign for Credits {
    fn add_assign(&mut self, rhs: Credits) {
        self.0 += rhs.0;
    }
}

impl Sub for Credits {
    type Output = Credits;
    fn sub(self, rhs: Credits) -> Credits {
        Credits(self.0 - rhs.0)
    }
}

impl SubAssign for Credits {
    fn sub_assign(&mut self, rhs: Credits) {
        self.0 -= rhs.0;
    }
}

impl Neg for Credits {
    type Output = Credits;
    fn neg(self) -> Credits {
        Credits(-self.0)
    }
}

impl Mul<i64> for Credits {
    type Output = Credits;
    fn mul(self, rhs: i64) -> Credits {
        Credits(self.0 * rhs)
    }
}

impl Mul<usize> for Credits {
    type Output = Credits;
    fn mul(self, rhs: usize) -> Credits {
        Credits(self.0 * rhs as i64)
    }
}

impl Sum for Credits {
    fn sum<I: Iterator<Item = Credits>>(iter: I) -> Credits {
        iter.fold(Credits::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a Credits> for Credits {
    fn sum<I: Iterator<Item = &'a Credits>>(iter: I) -> Credits {
        iter.copied().sum()
    }
}
