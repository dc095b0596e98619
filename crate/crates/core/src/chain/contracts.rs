//! Contract states and their call handlers.
//!
//! Each handler checks everything that can fail before it moves a single
//! credit, so a returned error leaves the chain untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::auction::{run_csopt, AuctionInstance, AuctionOutcome, Bid, Task, TaskId, UserId};
use crate::money::Credits;

use super::{Address, Chain, ChainError, Payload, Result, TimerEvent, Timer, Transaction};

/// Request registration: holds the CSP's fee until data is delivered or
/// the deadline passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RrState {
    pub csp: Address,
    pub isp: Address,
    pub descriptor_digest: String,
    pub deadline: f64,
    pub fee: Credits,
    pub da: Option<Address>,
    pub data_digest: Option<String>,
    pub settled: bool,
    pub refunded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudonymousBid {
    pub cost_per_task: Credits,
    pub task_ids: Vec<TaskId>,
    pub capacity: Option<u32>,
    pub escrow: Credits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", content = "reason", rename_all = "snake_case")]
pub enum AuctionStatus {
    Open,
    Closed,
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionState {
    pub isp: Address,
    pub rr: Address,
    pub grid_size: u32,
    pub tasks: Vec<Task>,
    pub alpha: f64,
    pub beta: f64,
    pub repeat: Option<u32>,
    pub open: f64,
    pub close: f64,
    pub task_deadline: f64,
    pub deposit: Credits,
    pub call_fee: Credits,
    pub bids: BTreeMap<Address, PseudonymousBid>,
    pub status: AuctionStatus,
    /// Outcome over local ids: bidder `i` is the `i`-th pseudonym in
    /// ascending byte order.
    pub outcome: Option<AuctionOutcome>,
    pub mup: Option<Address>,
}

impl AuctionState {
    /// Pseudonym of a local bidder id.
    pub fn pseudonym(&self, local: UserId) -> Option<Address> {
        self.bids.keys().nth(local as usize).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MupEntry {
    pub tasks: usize,
    pub payment: Credits,
    /// Deposit and auction call fee held since the close.
    pub held: Credits,
    pub submitted: Option<String>,
}

/// Worker payment: pays each winner on submission, forfeits the rest at
/// the task deadline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MupState {
    pub isp: Address,
    pub rr: Address,
    pub call_fee: Credits,
    pub deadline: f64,
    pub entries: BTreeMap<Address, MupEntry>,
    pub finalized: bool,
    pub da: Option<Address>,
}

/// Credentials readable only by the account named in `owner`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SealedBlob {
    pub owner: Address,
    content: Vec<u8>,
}

impl SealedBlob {
    pub fn open(&self, reader: &Address) -> Result<&[u8]> {
        if *reader == self.owner {
            Ok(&self.content)
        } else {
            Err(ChainError::TagMismatch)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DaState {
    pub rr: Address,
    /// What the ISP actually paid out to workers.
    pub price: Credits,
    pub blob: SealedBlob,
    pub created_at: f64,
    pub access_log: Vec<Address>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "contract", rename_all = "snake_case")]
pub enum Contract {
    Rr(RrState),
    Auction(AuctionState),
    Mup(MupState),
    Da(DaState),
}

macro_rules! accessor {
    ($name:ident, $name_mut:ident, $variant:ident, $ty:ty) => {
        pub fn $name(&self, address: &Address) -> Option<&$ty> {
            match self.contracts.get(address) {
                Some(Contract::$variant(s)) => Some(s),
                _ => None,
            }
        }

        fn $name_mut(&mut self, address: &Address) -> Result<&mut $ty> {
            match self.contracts.get_mut(address) {
                Some(Contract::$variant(s)) => Ok(s),
                _ => Err(ChainError::WrongContract(*address)),
            }
        }
    };
}

impl Chain {
    accessor!(rr, rr_mut, Rr, RrState);
    accessor!(auction, auction_mut, Auction, AuctionState);
    accessor!(mup, mup_mut, Mup, MupState);
    accessor!(da, da_mut, Da, DaState);

    /// The sealed blob `reader` paid for through `rr`.
    pub fn delivered_blob(&self, rr: &Address, reader: &Address) -> Result<&SealedBlob> {
        let da = self.rr(rr).and_then(|r| r.da).ok_or(ChainError::NotReady)?;
        let state = self.da(&da).ok_or(ChainError::NotReady)?;
        if state.access_log.contains(reader) {
            Ok(&state.blob)
        } else {
            Err(ChainError::NotReady)
        }
    }

    /// Runs one transaction; returns the address of a deployed contract.
    pub(super) fn execute(&mut self, tx: &Transaction) -> Result<Option<Address>> {
        if !self.accounts.contains_key(&tx.sender) {
            return Err(ChainError::UnknownAccount(tx.sender));
        }
        self.require_funds(&tx.sender, tx.credits)?;
        if tx.payload.creates_contract() && tx.destination != Address::ZERO {
            return Err(ChainError::BadState("contract creation must target the zero address"));
        }
        match &tx.payload {
            Payload::Transfer => {
                if self.contracts.contains_key(&tx.destination) || tx.destination == Address::ZERO {
                    return Err(ChainError::WrongContract(tx.destination));
                }
                self.move_credits(tx.sender, tx.destination, tx.credits);
                Ok(None)
            }
            Payload::RegisterRequest { isp, descriptor_digest, deadline } => {
                if !(*deadline >= tx.timestamp) {
                    return Err(ChainError::InvalidTiming(format!("deadline {deadline} already passed")));
                }
                let address = Chain::contract_address(tx.seq);
                self.deploy(
                    address,
                    Contract::Rr(RrState {
                        csp: tx.sender,
                        isp: *isp,
                        descriptor_digest: descriptor_digest.clone(),
                        deadline: *deadline,
                        fee: tx.credits,
                        da: None,
                        data_digest: None,
                        settled: false,
                        refunded: false,
                    }),
                );
                self.move_credits(tx.sender, address, tx.credits);
                self.schedule(*deadline, address, TimerEvent::RequestDeadline);
                Ok(Some(address))
            }
            Payload::OpenAuction {
                rr,
                grid_size,
                tasks,
                alpha,
                beta,
                repeat,
                open,
                close,
                task_deadline,
                deposit,
                call_fee,
            } => {
                let rr_state = self.rr(rr).ok_or(ChainError::WrongContract(*rr))?;
                if rr_state.isp != tx.sender {
                    return Err(ChainError::Unauthorized { expected: rr_state.isp });
                }
                if !(tx.timestamp <= *open && open <= close && close <= task_deadline) {
                    return Err(ChainError::InvalidTiming("need now <= open <= close <= task deadline".into()));
                }
                if tx.credits != Credits::ZERO {
                    return Err(ChainError::WrongAmount { expected: Credits::ZERO, got: tx.credits });
                }
                if deposit.is_negative() || call_fee.is_negative() {
                    return Err(ChainError::BadState("negative deposit or fee"));
                }
                let address = Chain::contract_address(tx.seq);
                self.deploy(
                    address,
                    Contract::Auction(AuctionState {
                        isp: tx.sender,
                        rr: *rr,
                        grid_size: *grid_size,
                        tasks: tasks.clone(),
                        alpha: *alpha,
                        beta: *beta,
                        repeat: *repeat,
                        open: *open,
                        close: *close,
                        task_deadline: *task_deadline,
                        deposit: *deposit,
                        call_fee: *call_fee,
                        bids: BTreeMap::new(),
                        status: AuctionStatus::Open,
                        outcome: None,
                        mup: None,
                    }),
                );
                Ok(Some(address))
            }
            Payload::Bid { cost_per_task, task_ids, capacity } => {
                let state = self.auction(&tx.destination).ok_or(ChainError::WrongContract(tx.destination))?;
                if state.status != AuctionStatus::Open || tx.timestamp < state.open || tx.timestamp > state.close {
                    return Err(ChainError::LateBid);
                }
                if state.bids.contains_key(&tx.sender) {
                    return Err(ChainError::DuplicateBid);
                }
                let expected = state.deposit + state.call_fee;
                if tx.credits != expected {
                    return Err(ChainError::WrongAmount { expected, got: tx.credits });
                }
                let bid = PseudonymousBid {
                    cost_per_task: *cost_per_task,
                    task_ids: task_ids.clone(),
                    capacity: *capacity,
                    escrow: tx.credits,
                };
                self.auction_mut(&tx.destination)?.bids.insert(tx.sender, bid);
                self.move_credits(tx.sender, tx.destination, tx.credits);
                Ok(None)
            }
            Payload::CloseAuction => {
                self.close_auction(tx)?;
                Ok(None)
            }
            Payload::SubmitData { digest } => {
                self.submit_data(tx, digest)?;
                Ok(None)
            }
            Payload::AccessData => {
                let rr = self.rr(&tx.destination).ok_or(ChainError::WrongContract(tx.destination))?;
                let (isp, da) = (rr.isp, rr.da.ok_or(ChainError::NotReady)?);
                let price = self.da(&da).ok_or(ChainError::NotReady)?.price;
                if tx.credits != price {
                    return Err(ChainError::WrongAmount { expected: price, got: tx.credits });
                }
                self.move_credits(tx.sender, tx.destination, tx.credits);
                self.internal(tx.destination, isp, price, "data_price");
                self.da_mut(&da)?.access_log.push(tx.sender);
                Ok(None)
            }
        }
    }

    fn close_auction(&mut self, tx: &Transaction) -> Result<()> {
        let address = tx.destination;
        let state = self.auction(&address).ok_or(ChainError::WrongContract(address))?;
        if tx.sender != state.isp {
            return Err(ChainError::Unauthorized { expected: state.isp });
        }
        if state.status != AuctionStatus::Open {
            return Err(ChainError::BadState("auction already closed"));
        }
        if tx.timestamp < state.close {
            return Err(ChainError::BadState("bidding window still open"));
        }
        if tx.credits != Credits::ZERO {
            return Err(ChainError::WrongAmount { expected: Credits::ZERO, got: tx.credits });
        }
        if state.bids.is_empty() {
            self.auction_mut(&address)?.status = AuctionStatus::Aborted("no bids".into());
            return Ok(());
        }

        let inst = AuctionInstance {
            grid_size: state.grid_size,
            tasks: state.tasks.clone(),
            bids: state
                .bids
                .values()
                .enumerate()
                .map(|(i, b)| Bid {
                    user_id: i as UserId,
                    cost_per_task: b.cost_per_task,
                    task_ids: b.task_ids.iter().copied().collect(),
                    capacity: b.capacity,
                })
                .collect(),
            alpha: state.alpha,
            beta: state.beta,
            repeat_override: state.repeat,
        };
        let escrows: Vec<(Address, Credits)> = state.bids.iter().map(|(a, b)| (*a, b.escrow)).collect();
        let (isp, rr, call_fee, task_deadline) = (state.isp, state.rr, state.call_fee, state.task_deadline);

        let outcome = match run_csopt(&inst) {
            Ok(o) => o,
            Err(e) => {
                for (pseudonym, escrow) in escrows {
                    self.internal(address, pseudonym, escrow, "refund");
                }
                self.auction_mut(&address)?.status = AuctionStatus::Aborted(e.to_string());
                return Ok(());
            }
        };
        self.require_funds(&isp, outcome.total_payment)?;

        let mup = Address::named(&format!("mup/{}", address.to_hex()));
        let mut entries = BTreeMap::new();
        for (local, (pseudonym, escrow)) in escrows.iter().enumerate() {
            let tasks = outcome.allocation.count(local as UserId);
            if tasks == 0 {
                continue;
            }
            entries.insert(
                *pseudonym,
                MupEntry { tasks, payment: outcome.payment(local as UserId), held: *escrow, submitted: None },
            );
        }
        self.deploy(
            mup,
            Contract::Mup(MupState {
                isp,
                rr,
                call_fee,
                deadline: task_deadline,
                entries: entries.clone(),
                finalized: false,
                da: None,
            }),
        );
        self.internal(isp, mup, outcome.total_payment, "payment_escrow");
        for (pseudonym, escrow) in escrows {
            if entries.contains_key(&pseudonym) {
                self.internal(address, mup, escrow, "deposit_hold");
            } else {
                self.internal(address, pseudonym, escrow, "refund");
            }
        }
        self.schedule(task_deadline, mup, TimerEvent::TaskDeadline);
        let state = self.auction_mut(&address)?;
        state.status = AuctionStatus::Closed;
        state.outcome = Some(outcome);
        state.mup = Some(mup);
        Ok(())
    }

    fn submit_data(&mut self, tx: &Transaction, digest: &str) -> Result<()> {
        let address = tx.destination;
        let state = self.mup(&address).ok_or(ChainError::WrongContract(address))?;
        let entry = state.entries.get(&tx.sender).ok_or(ChainError::UnknownPseudonym)?;
        if tx.timestamp > state.deadline || state.finalized {
            return Err(ChainError::AfterDeadline);
        }
        if entry.submitted.is_some() {
            return Err(ChainError::DuplicateSubmission);
        }
        if tx.credits != state.call_fee {
            return Err(ChainError::WrongAmount { expected: state.call_fee, got: tx.credits });
        }
        let payout = entry.payment + entry.held + tx.credits;
        self.move_credits(tx.sender, address, tx.credits);
        self.internal(address, tx.sender, payout, "payout");
        let state = self.mup_mut(&address)?;
        state.entries.get_mut(&tx.sender).expect("checked above").submitted = Some(digest.to_string());
        if state.entries.values().all(|e| e.submitted.is_some()) {
            self.finalize_mup(address)?;
        }
        Ok(())
    }

    /// Returns what silent winners leave behind to the ISP and publishes the
    /// data access contract if anyone delivered.
    fn finalize_mup(&mut self, address: Address) -> Result<()> {
        let state = self.mup(&address).ok_or(ChainError::WrongContract(address))?.clone();
        if state.finalized {
            return Ok(());
        }
        for entry in state.entries.values().filter(|e| e.submitted.is_none()) {
            self.internal(address, state.isp, entry.held, "forfeit");
            self.internal(address, state.isp, entry.payment, "unused_payment");
        }
        debug_assert_eq!(self.balance(&address), Credits::ZERO);
        let delivered: Vec<&MupEntry> = state.entries.values().filter(|e| e.submitted.is_some()).collect();
        let mut da_address = None;
        if !delivered.is_empty() {
            let mut hasher = Sha256::new();
            let mut digests: Vec<&str> = delivered.iter().filter_map(|e| e.submitted.as_deref()).collect();
            digests.sort_unstable();
            for d in digests {
                hasher.update(d.as_bytes());
            }
            let data_digest = hex::encode(hasher.finalize());
            let price = delivered.iter().map(|e| e.payment).sum();
            let rr = self.rr(&state.rr).ok_or(ChainError::WrongContract(state.rr))?.clone();
            let da = Address::named(&format!("da/{}", address.to_hex()));
            let created_at = self.now();
            self.deploy(
                da,
                Contract::Da(DaState {
                    rr: state.rr,
                    price,
                    blob: SealedBlob { owner: rr.csp, content: format!("credentials:{data_digest}").into_bytes() },
                    created_at,
                    access_log: Vec::new(),
                }),
            );
            if !rr.refunded && !rr.settled {
                self.internal(state.rr, rr.isp, rr.fee, "registration_fee");
            }
            let rr_state = self.rr_mut(&state.rr)?;
            rr_state.da = Some(da);
            rr_state.data_digest = Some(data_digest);
            rr_state.settled = !rr_state.refunded;
            da_address = Some(da);
        }
        let mup = self.mup_mut(&address)?;
        mup.finalized = true;
        mup.da = da_address;
        Ok(())
    }

    pub(super) fn fire(&mut self, timer: &Timer) -> Result<()> {
        match timer.event {
            TimerEvent::TaskDeadline => self.finalize_mup(timer.contract),
            TimerEvent::RequestDeadline => {
                let rr = self.rr(&timer.contract).ok_or(ChainError::WrongContract(timer.contract))?.clone();
                if rr.settled || rr.refunded {
                    return Ok(());
                }
                self.internal(timer.contract, rr.csp, rr.fee, "request_refund");
                self.rr_mut(&timer.contract)?.refunded = true;
                Ok(())
            }
        }
    }
}
