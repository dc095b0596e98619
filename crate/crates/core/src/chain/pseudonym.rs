//! Fresh per-auction identities.

use std::collections::{BTreeMap, BTreeSet};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::auction::UserId;

use super::{Address, ChainError, Result};

/// Issues every participant a new 64-byte pseudonym per auction. Kept by
/// the ISP off chain; contracts only ever see the pseudonyms.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudonymRegistry {
    master_seed: u64,
    auctions: BTreeMap<u64, BTreeMap<UserId, Address>>,
    issued: BTreeSet<Address>,
}

impl PseudonymRegistry {
    pub fn new(master_seed: u64) -> Self {
        PseudonymRegistry { master_seed, auctions: BTreeMap::new(), issued: BTreeSet::new() }
    }

    /// Draws pseudonyms for `users` in auction `nonce`. Each auction uses its
    /// own random stream, so draws do not depend on earlier auctions.
    pub fn issue(&mut self, nonce: u64, users: impl IntoIterator<Item = UserId>) -> Result<&BTreeMap<UserId, Address>> {
        let mut rng = ChaCha20Rng::seed_from_u64(self.master_seed);
        rng.set_stream(nonce);
        let mut map = BTreeMap::new();
        let mut users: Vec<UserId> = users.into_iter().collect();
        users.sort_unstable();
        users.dedup();
        for user in users {
            let mut bytes = [0u8; 64];
            // The all-zero string is reserved; redraw on the off chance.
            while bytes == [0u8; 64] {
                rng.fill_bytes(&mut bytes);
            }
            let pseudonym = Address(bytes);
            if !self.issued.insert(pseudonym) {
                return Err(ChainError::PseudonymCollision);
            }
            map.insert(user, pseudonym);
        }
        if self.auctions.contains_key(&nonce) {
            return Err(ChainError::BadState("auction nonce already used"));
        }
        Ok(self.auctions.entry(nonce).or_insert(map))
    }

    pub fn pseudonyms(&self, nonce: u64) -> Option<&BTreeMap<UserId, Address>> {
        self.auctions.get(&nonce)
    }

    /// Real user behind a pseudonym; only the registry holder can answer.
    pub fn resolve(&self, nonce: u64, pseudonym: &Address) -> Option<UserId> {
        self.auctions.get(&nonce)?.iter().find(|(_, p)| *p == pseudonym).map(|(u, _)| *u)
    }

    pub fn issued(&self) -> usize {
        self.issued.len()
    }
}
