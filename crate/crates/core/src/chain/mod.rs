//! Discrete-event ledger with the four protocol contracts.
//!
//! Blocks are mined at exact multiples of the block interval. A transaction
//! submitted at time `t` lands in the first block mined strictly after `t`;
//! inside a block transactions run in `(timestamp, submission order)` and
//! deadline timers fire after them. A failing contract call is reverted in
//! full. Credits are only ever moved between accounts, and the total is
//! checked after every block.

mod contracts;
mod pseudonym;
mod scripted;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;

use crate::auction::{AuctionError, Task, TaskId};
use crate::money::Credits;

pub use contracts::{AuctionState, AuctionStatus, Contract, DaState, MupEntry, MupState, RrState, SealedBlob};
pub use pseudonym::PseudonymRegistry;
pub use scripted::{
    end_to_end_delay, run_scripted, run_scripted_with, user_address, ChainConfig, ProtocolRun, ScriptedRun, Timing,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error("{address} holds {available} but needs {needed}")]
    InsufficientBalance { address: Address, needed: Credits, available: Credits },
    #[error("unknown account {0}")]
    UnknownAccount(Address),
    #[error("{0} is not a contract of the expected kind")]
    WrongContract(Address),
    #[error("bid outside the bidding window")]
    LateBid,
    #[error("pseudonym already bid in this auction")]
    DuplicateBid,
    #[error("pseudonym has no assignment in this auction")]
    UnknownPseudonym,
    #[error("submission after the task deadline")]
    AfterDeadline,
    #[error("data already submitted")]
    DuplicateSubmission,
    #[error("data not available yet")]
    NotReady,
    #[error("sealed blob belongs to another account")]
    TagMismatch,
    #[error("only {expected} may call this")]
    Unauthorized { expected: Address },
    #[error("call carries {got} but {expected} is required")]
    WrongAmount { expected: Credits, got: Credits },
    #[error("contract is not in a state that accepts this call: {0}")]
    BadState(&'static str),
    #[error("transaction time {tx} precedes chain time {chain}")]
    InThePast { tx: f64, chain: f64 },
    #[error("invalid timing: {0}")]
    InvalidTiming(String),
    #[error("credit supply changed from {expected} to {found} at height {height}")]
    ConservationViolated { height: u64, expected: Credits, found: Credits },
    #[error("pseudonym collision")]
    PseudonymCollision,
    #[error(transparent)]
    Auction(#[from] AuctionError),
}

pub type Result<T, E = ChainError> = std::result::Result<T, E>;

/// 64-byte account identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Address(pub [u8; 64]);

impl Address {
    pub const ZERO: Address = Address([0; 64]);

    /// Deterministic address for a named participant or derived contract.
    pub fn named(label: &str) -> Self {
        Address(Sha512::digest(label.as_bytes()).into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}…", &self.to_hex()[..16])
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Address({self})")
    }
}

impl Serialize for Address {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(&s).map_err(serde::de::Error::custom)?;
        let arr: [u8; 64] = bytes.try_into().map_err(|_| serde::de::Error::custom("address must be 64 bytes"))?;
        Ok(Address(arr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccountKind {
    External,
    Contract,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Account {
    pub address: Address,
    pub balance: Credits,
    pub kind: AccountKind,
}

/// Call arguments carried by a transaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "snake_case")]
pub enum Payload {
    Transfer,
    RegisterRequest {
        isp: Address,
        descriptor_digest: String,
        deadline: f64,
    },
    OpenAuction {
        rr: Address,
        grid_size: u32,
        tasks: Vec<Task>,
        alpha: f64,
        beta: f64,
        repeat: Option<u32>,
        open: f64,
        close: f64,
        task_deadline: f64,
        deposit: Credits,
        call_fee: Credits,
    },
    Bid {
        cost_per_task: Credits,
        task_ids: Vec<TaskId>,
        capacity: Option<u32>,
    },
    CloseAuction,
    SubmitData {
        digest: String,
    },
    AccessData,
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Transfer => "transfer",
            Payload::RegisterRequest { .. } => "register_request",
            Payload::OpenAuction { .. } => "open_auction",
            Payload::Bid { .. } => "bid",
            Payload::CloseAuction => "close_auction",
            Payload::SubmitData { .. } => "submit_data",
            Payload::AccessData => "access_data",
        }
    }

    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("payload serializes");
        hex::encode(Sha256::digest(bytes))
    }

    /// Contract-creating calls go to [`Address::ZERO`].
    fn creates_contract(&self) -> bool {
        matches!(self, Payload::RegisterRequest { .. } | Payload::OpenAuction { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub seq: u64,
    pub sender: Address,
    pub destination: Address,
    pub credits: Credits,
    pub payload: Payload,
    pub timestamp: f64,
}

/// A credit movement generated by contract code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InternalTransfer {
    pub from: Address,
    pub to: Address,
    pub credits: Credits,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub height: u64,
    pub mined_at: f64,
    pub transactions: Vec<Transaction>,
    pub internal: Vec<InternalTransfer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum TxStatus {
    Applied,
    Reverted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Receipt {
    pub seq: u64,
    pub height: u64,
    pub time: f64,
    pub status: TxStatus,
    pub created: Option<Address>,
}

/// One line of the audit trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub height: u64,
    pub time: f64,
    pub sender: Address,
    pub destination: Address,
    pub credits: Credits,
    pub kind: String,
    pub payload_digest: String,
    pub status: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimerEvent {
    RequestDeadline,
    TaskDeadline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Timer {
    due: f64,
    contract: Address,
    event: TimerEvent,
}

/// Simulated ledger state. A plain value: clone it to fork a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    block_interval: f64,
    height: u64,
    accounts: BTreeMap<Address, Account>,
    contracts: BTreeMap<Address, Contract>,
    mempool: Vec<Transaction>,
    timers: Vec<Timer>,
    blocks: Vec<Block>,
    receipts: BTreeMap<u64, Receipt>,
    trace: Vec<TraceRecord>,
    next_seq: u64,
    supply: Credits,
    /// Internal transfers of the block being built.
    pending_internal: Vec<InternalTransfer>,
}

impl Chain {
    /// Starts a chain whose genesis block (height 0, time 0) credits the
    /// given external accounts.
    pub fn new(block_interval: f64, genesis: impl IntoIterator<Item = (Address, Credits)>) -> Result<Self> {
        if !(block_interval > 0.0 && block_interval.is_finite()) {
            return Err(ChainError::InvalidTiming(format!("block interval {block_interval} must be positive")));
        }
        let mut accounts = BTreeMap::new();
        for (address, balance) in genesis {
            if balance.is_negative() {
                return Err(ChainError::InsufficientBalance { address, needed: Credits::ZERO, available: balance });
            }
            accounts.insert(address, Account { address, balance, kind: AccountKind::External });
        }
        let supply = accounts.values().map(|a| a.balance).sum();
        Ok(Chain {
            block_interval,
            height: 0,
            accounts,
            contracts: BTreeMap::new(),
            mempool: Vec::new(),
            timers: Vec::new(),
            blocks: vec![Block { height: 0, mined_at: 0.0, transactions: Vec::new(), internal: Vec::new() }],
            receipts: BTreeMap::new(),
            trace: Vec::new(),
            next_seq: 0,
            supply,
            pending_internal: Vec::new(),
        })
    }

    pub fn block_interval(&self) -> f64 {
        self.block_interval
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    /// Time of the latest block.
    pub fn now(&self) -> f64 {
        self.height as f64 * self.block_interval
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }

    /// The trace as line-delimited JSON.
    pub fn trace_jsonl(&self) -> String {
        self.trace.iter().map(|r| serde_json::to_string(r).expect("trace serializes") + "\n").collect()
    }

    pub fn receipt(&self, seq: u64) -> Option<&Receipt> {
        self.receipts.get(&seq)
    }

    pub fn account(&self, address: &Address) -> Option<&Account> {
        self.accounts.get(address)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &Account> {
        self.accounts.values()
    }

    pub fn balance(&self, address: &Address) -> Credits {
        self.accounts.get(address).map(|a| a.balance).unwrap_or_default()
    }

    pub fn contract(&self, address: &Address) -> Option<&Contract> {
        self.contracts.get(address)
    }

    pub fn supply(&self) -> Credits {
        self.supply
    }

    /// Credits currently held by contracts.
    pub fn escrowed(&self) -> Credits {
        self.accounts.values().filter(|a| a.kind == AccountKind::Contract).map(|a| a.balance).sum()
    }

    /// Address of the contract a creating transaction with this sequence
    /// number will deploy.
    pub fn contract_address(seq: u64) -> Address {
        Address::named(&format!("contract/{seq}"))
    }

    /// Queues a transaction; returns its sequence number.
    pub fn submit(
        &mut self,
        sender: Address,
        destination: Address,
        credits: Credits,
        payload: Payload,
        timestamp: f64,
    ) -> Result<u64> {
        if timestamp < self.now() {
            return Err(ChainError::InThePast { tx: timestamp, chain: self.now() });
        }
        if credits.is_negative() {
            return Err(ChainError::WrongAmount { expected: Credits::ZERO, got: credits });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.mempool.push(Transaction { seq, sender, destination, credits, payload, timestamp });
        Ok(seq)
    }

    /// Mines every block with `mined_at <= t`, empty ones included.
    pub fn mine_until(&mut self, t: f64) -> Result<Vec<Block>> {
        let mut mined = Vec::new();
        while (self.height + 1) as f64 * self.block_interval <= t {
            mined.push(self.mine_block()?);
        }
        Ok(mined)
    }

    /// Mines exactly one block.
    pub fn mine_block(&mut self) -> Result<Block> {
        let height = self.height + 1;
        let mined_at = height as f64 * self.block_interval;
        let (mut ready, rest): (Vec<_>, Vec<_>) = self.mempool.drain(..).partition(|tx| tx.timestamp < mined_at);
        self.mempool = rest;
        ready.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.seq.cmp(&b.seq)));
        self.height = height;

        for tx in &ready {
            let internal_before = self.pending_internal.len();
            let result = self.execute(tx);
            let (status, created) = match result {
                Ok(created) => (TxStatus::Applied, created),
                Err(e) => {
                    debug_assert_eq!(self.pending_internal.len(), internal_before, "reverted call left transfers");
                    (TxStatus::Reverted(e.to_string()), None)
                }
            };
            self.trace.push(TraceRecord {
                height,
                time: mined_at,
                sender: tx.sender,
                destination: created.unwrap_or(tx.destination),
                credits: tx.credits,
                kind: tx.payload.kind().to_string(),
                payload_digest: tx.payload.digest(),
                status: match &status {
                    TxStatus::Applied => "applied".into(),
                    TxStatus::Reverted(r) => format!("reverted: {r}"),
                },
            });
            self.flush_internal_trace(internal_before, height, mined_at);
            self.receipts.insert(tx.seq, Receipt { seq: tx.seq, height, time: mined_at, status, created });
        }

        let mut due: Vec<Timer> = Vec::new();
        self.timers.retain(|t| {
            if t.due <= mined_at {
                due.push(t.clone());
                false
            } else {
                true
            }
        });
        due.sort_by(|a, b| a.due.total_cmp(&b.due));
        for timer in due {
            let before = self.pending_internal.len();
            self.fire(&timer)?;
            self.flush_internal_trace(before, height, mined_at);
        }

        let found: Credits = self.accounts.values().map(|a| a.balance).sum();
        if found != self.supply {
            return Err(ChainError::ConservationViolated { height, expected: self.supply, found });
        }
        let block =
            Block { height, mined_at, transactions: ready, internal: std::mem::take(&mut self.pending_internal) };
        self.blocks.push(block.clone());
        Ok(block)
    }

    fn flush_internal_trace(&mut self, from: usize, height: u64, time: f64) {
        for t in &self.pending_internal[from..] {
            self.trace.push(TraceRecord {
                height,
                time,
                sender: t.from,
                destination: t.to,
                credits: t.credits,
                kind: format!("internal:{}", t.reason),
                payload_digest: String::new(),
                status: "applied".into(),
            });
        }
    }

    fn require_funds(&self, address: &Address, needed: Credits) -> Result<()> {
        let available = self.balance(address);
        if available < needed {
            return Err(ChainError::InsufficientBalance { address: *address, needed, available });
        }
        Ok(())
    }

    /// Moves credits; callers check funds first so this cannot fail midway.
    fn move_credits(&mut self, from: Address, to: Address, credits: Credits) {
        if credits == Credits::ZERO {
            return;
        }
        let src = self.accounts.get_mut(&from).expect("sender exists");
        src.balance -= credits;
        assert!(!src.balance.is_negative(), "balance of {from} went negative");
        self.accounts
            .entry(to)
            .or_insert(Account { address: to, balance: Credits::ZERO, kind: AccountKind::External })
            .balance += credits;
    }

    /// A contract-generated transfer, recorded in the current block.
    fn internal(&mut self, from: Address, to: Address, credits: Credits, reason: &str) {
        if credits == Credits::ZERO {
            return;
        }
        self.move_credits(from, to, credits);
        self.pending_internal.push(InternalTransfer { from, to, credits, reason: reason.to_string() });
    }

    fn deploy(&mut self, address: Address, contract: Contract) {
        self.accounts.insert(address, Account { address, balance: Credits::ZERO, kind: AccountKind::Contract });
        self.contracts.insert(address, contract);
    }

    fn schedule(&mut self, due: f64, contract: Address, event: TimerEvent) {
        self.timers.push(Timer { due, contract, event });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> (Chain, Address, Address) {
        let a = Address::named("a");
        let b = Address::named("b");
        (Chain::new(1.0, [(a, Credits::from_whole(50)), (b, Credits::ZERO)]).unwrap(), a, b)
    }

    #[test]
    fn pending_at_zero_land_in_first_block() {
        let (mut ch, a, b) = chain();
        for _ in 0..3 {
            ch.submit(a, b, Credits::from_whole(1), Payload::Transfer, 0.0).unwrap();
        }
        let blocks = ch.mine_until(1.0).unwrap();
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].mined_at, 1.0);
        assert_eq!(blocks[0].transactions.len(), 3);
        assert_eq!(ch.balance(&b), Credits::from_whole(3));
    }

    #[test]
    fn next_block_rule() {
        let (mut ch, a, b) = chain();
        ch.mine_until(1.0).unwrap();
        let seq = ch.submit(a, b, Credits::from_whole(1), Payload::Transfer, 1.5).unwrap();
        ch.mine_until(3.0).unwrap();
        assert_eq!(ch.receipt(seq).unwrap().time, 2.0);
    }

    #[test]
    fn empty_blocks_are_still_mined() {
        let (mut ch, _, _) = chain();
        let blocks = ch.mine_until(5.0).unwrap();
        assert_eq!(blocks.len(), 5);
        assert!(blocks.iter().all(|b| b.transactions.is_empty()));
        assert_eq!(ch.blocks().len(), 6);
        assert!(ch.blocks().windows(2).all(|w| w[1].height == w[0].height + 1 && w[1].mined_at >= w[0].mined_at));
    }

    #[test]
    fn overdraft_reverts() {
        let (mut ch, a, b) = chain();
        let seq = ch.submit(a, b, Credits::from_whole(51), Payload::Transfer, 0.0).unwrap();
        ch.mine_until(1.0).unwrap();
        assert!(matches!(ch.receipt(seq).unwrap().status, TxStatus::Reverted(_)));
        assert_eq!(ch.balance(&a), Credits::from_whole(50));
    }

    #[test]
    fn past_transactions_rejected() {
        let (mut ch, a, b) = chain();
        ch.mine_until(2.0).unwrap();
        assert!(matches!(ch.submit(a, b, Credits::ZERO, Payload::Transfer, 1.0), Err(ChainError::InThePast { .. })));
    }

    #[test]
    fn zero_interval_rejected() {
        assert!(Chain::new(0.0, []).is_err());
    }

    #[test]
    fn address_serde_roundtrip() {
        let a = Address::named("x");
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(json.len(), 130);
        assert_eq!(serde_json::from_str::<Address>(&json).unwrap(), a);
    }

    #[test]
    fn trace_is_jsonl() {
        let (mut ch, a, b) = chain();
        ch.submit(a, b, Credits::from_whole(2), Payload::Transfer, 0.0).unwrap();
        ch.mine_until(1.0).unwrap();
        let text = ch.trace_jsonl();
        assert_eq!(text.lines().count(), 1);
        let rec: TraceRecord = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec.kind, "transfer");
        assert_eq!(rec.height, 1);
    }
}
