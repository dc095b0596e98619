//! A full request, auction, submission and access run on a fresh chain.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::auction::{AuctionInstance, UserId};
use crate::money::Credits;

use super::{Address, Chain, ChainError, Payload, PseudonymRegistry, Result};

/// Durations in simulated seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Block interval.
    pub block_interval: f64,
    /// Time to announce the tasks to users.
    pub announcement: f64,
    pub bidding: f64,
    /// Time to compute the auction outcome.
    pub auction: f64,
    /// Time users need to perform their tasks.
    pub task: f64,
}

impl Timing {
    pub fn check(&self) -> Result<()> {
        let all = [self.block_interval, self.announcement, self.bidding, self.auction, self.task];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(ChainError::InvalidTiming("durations must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// When bidding opens: after both the request block and the announcement.
    pub fn open(&self) -> f64 {
        self.block_interval.max(self.announcement)
    }

    /// When the ISP posts the auction result.
    pub fn result_posted(&self) -> f64 {
        self.open() + self.bidding + self.auction
    }
}

/// Request to data availability:
/// `max(t_B, t_ann) + t_bidding + t_auction + max(t_B, t_task) + t_B`.
pub fn end_to_end_delay(t: &Timing) -> f64 {
    t.block_interval.max(t.announcement) + t.bidding + t.auction + t.block_interval.max(t.task) + t.block_interval
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub deposit: Credits,
    pub registration_fee: Credits,
    /// Flat cost of one contract call.
    pub call_fee: Credits,
    pub master_seed: u64,
    pub auction_nonce: u64,
    pub isp_funds: Credits,
    pub csp_funds: Credits,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            deposit: Credits::from_whole(10),
            registration_fee: Credits::from_whole(100),
            call_fee: Credits::from_whole(1),
            master_seed: 0,
            auction_nonce: 0,
            isp_funds: Credits::from_whole(10_000_000),
            csp_funds: Credits::from_whole(10_000_000),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedRun {
    pub instance: AuctionInstance,
    pub timing: Timing,
    /// Defaults to the delay formula's completion time.
    pub task_deadline: Option<f64>,
    /// Defaults to the task deadline plus two blocks.
    pub request_deadline: Option<f64>,
    /// Winners that never submit.
    pub silent: BTreeSet<UserId>,
    /// Nobody bids.
    pub withhold_bids: bool,
    /// The CSP buys the data once it is available.
    pub access: bool,
}

impl ScriptedRun {
    pub fn new(instance: AuctionInstance, timing: Timing) -> Self {
        ScriptedRun {
            instance,
            timing,
            task_deadline: None,
            request_deadline: None,
            silent: BTreeSet::new(),
            withhold_bids: false,
            access: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolRun {
    pub chain: Chain,
    pub csp: Address,
    pub isp: Address,
    pub users: BTreeMap<UserId, Address>,
    pub pseudonyms: BTreeMap<UserId, Address>,
    pub rr: Address,
    pub auction: Address,
    pub mup: Option<Address>,
    pub da: Option<Address>,
    /// Payment per winning real user.
    pub winners: BTreeMap<UserId, Credits>,
    /// Block time at which the data access contract appeared.
    pub completed_at: Option<f64>,
    pub close_block: f64,
    pub task_deadline: f64,
    pub request_deadline: f64,
    /// Whether the CSP could open the blob it paid for.
    pub blob_opened: Option<bool>,
}

pub fn user_address(user: UserId) -> Address {
    Address::named(&format!("user/{user}"))
}

fn created(chain: &Chain, seq: u64) -> Result<Address> {
    let receipt = chain.receipt(seq).ok_or(ChainError::BadState("transaction not mined"))?;
    match (&receipt.status, receipt.created) {
        (super::TxStatus::Applied, Some(a)) => Ok(a),
        (super::TxStatus::Reverted(_), _) => Err(ChainError::BadState("contract creation reverted")),
        _ => Err(ChainError::BadState("no contract created")),
    }
}

/// Runs the protocol with a fresh pseudonym registry.
pub fn run_scripted(run: &ScriptedRun, config: ChainConfig) -> Result<ProtocolRun> {
    let mut registry = PseudonymRegistry::new(config.master_seed);
    run_scripted_with(run, &config, &mut registry)
}

/// Runs the protocol drawing pseudonyms from `registry` under
/// `config.auction_nonce`.
pub fn run_scripted_with(run: &ScriptedRun, config: &ChainConfig, registry: &mut PseudonymRegistry) -> Result<ProtocolRun> {
    let t = run.timing;
    t.check()?;
    let t_b = t.block_interval;
    let open = t.open();
    let close = open + t.bidding;
    let posted = t.result_posted();
    let task_deadline = run.task_deadline.unwrap_or_else(|| end_to_end_delay(&t));
    let request_deadline = run.request_deadline.unwrap_or(task_deadline + 2.0 * t_b);
    if task_deadline < close {
        return Err(ChainError::InvalidTiming("task deadline precedes the end of bidding".into()));
    }

    let csp = Address::named("csp");
    let isp = Address::named("isp");
    let per_user = config.deposit + config.call_fee * 2i64;
    let users: BTreeMap<UserId, Address> = run.instance.bids.iter().map(|b| (b.user_id, user_address(b.user_id))).collect();
    let genesis = [(csp, config.csp_funds), (isp, config.isp_funds)]
        .into_iter()
        .chain(users.values().map(|&a| (a, per_user)));
    let mut chain = Chain::new(t_b, genesis)?;

    let pseudonyms = registry.issue(config.auction_nonce, users.keys().copied())?.clone();

    let rr_seq = chain.submit(
        csp,
        Address::ZERO,
        config.registration_fee,
        Payload::RegisterRequest {
            isp,
            descriptor_digest: Payload::Transfer.digest(),
            deadline: request_deadline,
        },
        0.0,
    )?;
    let rr = Chain::contract_address(rr_seq);
    let open_seq = chain.submit(
        isp,
        Address::ZERO,
        Credits::ZERO,
        Payload::OpenAuction {
            rr,
            grid_size: run.instance.grid_size,
            tasks: run.instance.tasks.clone(),
            alpha: run.instance.alpha,
            beta: run.instance.beta,
            repeat: run.instance.repeat_override,
            open,
            close,
            task_deadline,
            deposit: config.deposit,
            call_fee: config.call_fee,
        },
        0.0,
    )?;
    let auction = Chain::contract_address(open_seq);
    for (user, &real) in &users {
        chain.submit(real, isp, per_user, Payload::Transfer, 0.0)?;
        chain.submit(isp, pseudonyms[user], per_user, Payload::Transfer, 0.0)?;
    }

    chain.mine_until(open)?;
    created(&chain, rr_seq)?;
    created(&chain, open_seq)?;
    if !run.withhold_bids {
        for bid in &run.instance.bids {
            chain.submit(
                pseudonyms[&bid.user_id],
                auction,
                config.deposit + config.call_fee,
                Payload::Bid {
                    cost_per_task: bid.cost_per_task,
                    task_ids: bid.task_ids.iter().copied().collect(),
                    capacity: bid.capacity,
                },
                open,
            )?;
        }
    }

    chain.mine_until(posted)?;
    let close_seq = chain.submit(isp, auction, Credits::ZERO, Payload::CloseAuction, posted)?;
    while chain.receipt(close_seq).is_none() {
        chain.mine_block()?;
    }
    let close_block = chain.now();

    let state = chain.auction(&auction).ok_or(ChainError::WrongContract(auction))?.clone();
    let mup = state.mup;
    let mut winners = BTreeMap::new();
    if let (Some(mup), Some(outcome)) = (mup, &state.outcome) {
        let submit_at = close_block.max(posted + t.task);
        chain.mine_until(submit_at)?;
        for (local, _) in outcome.allocation.iter() {
            let pseudonym = state.pseudonym(local).expect("local ids index the bids");
            let real = registry.resolve(config.auction_nonce, &pseudonym).expect("issued above");
            winners.insert(real, outcome.payment(local));
            if run.silent.contains(&real) {
                continue;
            }
            let digest = Payload::SubmitData { digest: format!("{}/{real}", pseudonym.to_hex()) }.digest();
            chain.submit(pseudonym, mup, config.call_fee, Payload::SubmitData { digest }, submit_at)?;
        }
    }

    let horizon = request_deadline.max(task_deadline) + 2.0 * t_b;
    let mut da = None;
    while chain.now() < horizon {
        chain.mine_block()?;
        da = chain.rr(&rr).and_then(|s| s.da);
        if da.is_some() {
            break;
        }
    }
    let completed_at = da.and_then(|d| chain.da(&d)).map(|d| d.created_at);

    let mut blob_opened = None;
    let mut access_seq = None;
    if let (true, Some(d)) = (run.access, da) {
        let price = chain.da(&d).expect("just created").price;
        access_seq = Some(chain.submit(csp, rr, price, Payload::AccessData, chain.now())?);
    }
    chain.mine_until(horizon.max(chain.now() + t_b))?;
    if access_seq.is_some() {
        blob_opened = Some(chain.delivered_blob(&rr, &csp).and_then(|b| b.open(&csp).map(|_| ())).is_ok());
    }

    Ok(ProtocolRun {
        chain,
        csp,
        isp,
        users,
        pseudonyms,
        rr,
        auction,
        mup,
        da,
        winners,
        completed_at,
        close_block,
        task_deadline,
        request_deadline,
        blob_opened,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auction::fixtures::{c, three_user_example};
    use crate::auction::Bid;
    use crate::chain::{AuctionStatus, TxStatus};

    fn timing() -> Timing {
        Timing { block_interval: 1.0, announcement: 2.0, bidding: 5.0, auction: 1.0, task: 10.0 }
    }

    fn three_bidders_one_winner() -> AuctionInstance {
        // r = 1; user 1 covers everything cheaply and is not pivotal.
        let bids = vec![Bid::new(1, c("1"), [0, 1]), Bid::new(2, c("2"), [0, 1]), Bid::new(3, c("3"), [0, 1])];
        AuctionInstance::with_task_count(2, bids, 0.9, 0.9)
    }

    #[test]
    fn delay_formula_examples() {
        assert_eq!(end_to_end_delay(&timing()), 19.0);
        let zeros = Timing { block_interval: 1.0, announcement: 0.0, bidding: 0.0, auction: 0.0, task: 0.0 };
        assert_eq!(end_to_end_delay(&zeros), 3.0);
        let short_task = Timing { task: 0.25, ..timing() };
        assert_eq!(end_to_end_delay(&short_task), 2.0 + 5.0 + 1.0 + 1.0 + 1.0);
    }

    #[test]
    fn happy_path_completes_on_formula() {
        let run = run_scripted(&ScriptedRun::new(three_bidders_one_winner(), timing()), ChainConfig::default()).unwrap();
        let done = run.completed_at.unwrap();
        assert!(done <= 19.0 && done > 18.0, "{done}");
        assert_eq!(run.winners.keys().copied().collect::<Vec<_>>(), vec![1]);
        // Second price for two tasks.
        assert_eq!(run.winners[&1], c("4"));
        assert_eq!(run.blob_opened, Some(true));
        assert_eq!(run.chain.escrowed(), Credits::ZERO);
        let rr = run.chain.rr(&run.rr).unwrap();
        assert!(rr.settled && !rr.refunded);
    }

    #[test]
    fn balances_after_happy_path() {
        let cfg = ChainConfig::default();
        let run = run_scripted(&ScriptedRun::new(three_bidders_one_winner(), timing()), cfg.clone()).unwrap();
        let ch = &run.chain;
        // Losers get deposit and bid fee back and keep the unused submit fee.
        for user in [2, 3] {
            assert_eq!(ch.balance(&run.pseudonyms[&user]), cfg.deposit + cfg.call_fee * 2i64);
        }
        // The winner is made whole on fees and deposit and earns the payment.
        assert_eq!(ch.balance(&run.pseudonyms[&1]), cfg.deposit + cfg.call_fee * 2i64 + c("4"));
        assert_eq!(ch.balance(&run.csp), cfg.csp_funds - cfg.registration_fee - c("4"));
        let user_total = (cfg.deposit + cfg.call_fee * 2i64) * 3i64;
        assert_eq!(ch.balance(&run.isp), cfg.isp_funds + cfg.registration_fee);
        assert_eq!(ch.supply(), cfg.isp_funds + cfg.csp_funds + user_total);
    }

    #[test]
    fn non_winners_refunded_in_close_block() {
        let run = run_scripted(&ScriptedRun::new(three_bidders_one_winner(), timing()), ChainConfig::default()).unwrap();
        let close = run.chain.blocks().iter().find(|b| b.mined_at == run.close_block).unwrap();
        let refunds: Vec<_> = close.internal.iter().filter(|t| t.reason == "refund").collect();
        assert_eq!(refunds.len(), 2);
        let held: Vec<_> = close.internal.iter().filter(|t| t.reason == "deposit_hold").collect();
        assert_eq!(held.len(), 1);
        assert_eq!(held[0].to, run.mup.unwrap());
    }

    #[test]
    fn zero_bids_abort_and_refund_csp_at_deadline() {
        let mut script = ScriptedRun::new(three_bidders_one_winner(), timing());
        script.withhold_bids = true;
        let cfg = ChainConfig::default();
        let run = run_scripted(&script, cfg.clone()).unwrap();
        let state = run.chain.auction(&run.auction).unwrap();
        assert!(matches!(state.status, AuctionStatus::Aborted(_)));
        assert!(run.completed_at.is_none());
        assert_eq!(run.chain.balance(&run.csp), cfg.csp_funds);
        let refund = run.chain.blocks().iter().find(|b| b.internal.iter().any(|t| t.reason == "request_refund")).unwrap();
        assert!(refund.mined_at >= run.request_deadline && refund.mined_at < run.request_deadline + 1.0);
        assert_eq!(run.chain.escrowed(), Credits::ZERO);
    }

    #[test]
    fn silent_winner_forfeits() {
        let mut script = ScriptedRun::new(three_user_example(), timing());
        script.silent.insert(1);
        let cfg = ChainConfig::default();
        let run = run_scripted(&script, cfg.clone()).unwrap();
        assert_eq!(run.winners.keys().copied().collect::<Vec<_>>(), vec![1]);
        let p = run.pseudonyms[&1];
        // Only the unused submit fee is left.
        assert_eq!(run.chain.balance(&p), cfg.call_fee);
        assert!(run.da.is_none());
        assert_eq!(run.chain.escrowed(), Credits::ZERO);
        let forfeits: usize =
            run.chain.blocks().iter().flat_map(|b| &b.internal).filter(|t| t.reason == "forfeit").count();
        assert_eq!(forfeits, 1);
        // No data delivered, so the CSP gets its fee back.
        assert_eq!(run.chain.balance(&run.csp), cfg.csp_funds);
    }

    #[test]
    fn example_pays_second_price_through_contracts() {
        let run = run_scripted(&ScriptedRun::new(three_user_example(), timing()), ChainConfig::default()).unwrap();
        assert_eq!(run.winners[&1], c("24"));
        assert_eq!(run.chain.da(&run.da.unwrap()).unwrap().price, c("24"));
    }

    #[test]
    fn wrong_reader_cannot_open_blob() {
        let run = run_scripted(&ScriptedRun::new(three_bidders_one_winner(), timing()), ChainConfig::default()).unwrap();
        let blob = run.chain.delivered_blob(&run.rr, &run.csp).unwrap();
        assert!(blob.open(&run.csp).is_ok());
        assert_eq!(blob.open(&run.isp), Err(ChainError::TagMismatch));
    }

    #[test]
    fn access_before_data_is_not_ready() {
        let mut script = ScriptedRun::new(three_bidders_one_winner(), timing());
        script.access = false;
        let mut run = run_scripted(&script, ChainConfig::default()).unwrap();
        assert_eq!(run.chain.delivered_blob(&run.rr, &run.csp).unwrap_err(), ChainError::NotReady);
        // A second request on a chain without data access reverts.
        let now = run.chain.now();
        let seq = run.chain.submit(run.csp, run.auction, Credits::ZERO, Payload::AccessData, now).unwrap();
        run.chain.mine_block().unwrap();
        assert!(matches!(run.chain.receipt(seq).unwrap().status, TxStatus::Reverted(_)));
    }

    #[test]
    fn late_and_duplicate_bids_revert() {
        let run = run_scripted(&ScriptedRun::new(three_bidders_one_winner(), timing()), ChainConfig::default()).unwrap();
        let mut ch = run.chain.clone();
        let p = run.pseudonyms[&2];
        let now = ch.now();
        let bid = Payload::Bid { cost_per_task: c("1"), task_ids: vec![0], capacity: None };
        let seq = ch.submit(p, run.auction, c("11"), bid, now).unwrap();
        ch.mine_block().unwrap();
        assert_eq!(ch.receipt(seq).unwrap().status, TxStatus::Reverted(ChainError::LateBid.to_string()));
        assert_eq!(ch.balance(&p), run.chain.balance(&p));
    }

    #[test]
    fn duplicate_bid_in_window_reverts() {
        let mut ch = Chain::new(1.0, [(Address::named("csp"), c("100")), (Address::named("isp"), c("0")), (Address::named("p"), c("100"))]).unwrap();
        let (csp, isp, p) = (Address::named("csp"), Address::named("isp"), Address::named("p"));
        let rr_seq = ch
            .submit(csp, Address::ZERO, c("5"), Payload::RegisterRequest { isp, descriptor_digest: String::new(), deadline: 50.0 }, 0.0)
            .unwrap();
        let rr = Chain::contract_address(rr_seq);
        let open = Payload::OpenAuction {
            rr,
            grid_size: 100,
            tasks: three_user_example().tasks,
            alpha: 0.9,
            beta: 0.9,
            repeat: None,
            open: 1.0,
            close: 10.0,
            task_deadline: 20.0,
            deposit: c("10"),
            call_fee: c("1"),
        };
        let auction = Chain::contract_address(ch.submit(isp, Address::ZERO, Credits::ZERO, open, 0.0).unwrap());
        ch.mine_until(1.0).unwrap();
        let bid = Payload::Bid { cost_per_task: c("1"), task_ids: vec![1], capacity: None };
        let first = ch.submit(p, auction, c("11"), bid.clone(), 2.0).unwrap();
        let second = ch.submit(p, auction, c("11"), bid, 2.5).unwrap();
        ch.mine_until(3.0).unwrap();
        assert_eq!(ch.receipt(first).unwrap().status, TxStatus::Applied);
        assert_eq!(ch.receipt(second).unwrap().status, TxStatus::Reverted(ChainError::DuplicateBid.to_string()));
        assert_eq!(ch.balance(&p), c("89"));
        assert_eq!(ch.escrowed(), c("16"));
    }

    #[test]
    fn duplicate_submission_ignored() {
        let run = run_scripted(&ScriptedRun::new(three_bidders_one_winner(), timing()), ChainConfig::default()).unwrap();
        let mut ch = run.chain.clone();
        let p = run.pseudonyms[&1];
        let before = ch.balance(&p);
        let now = ch.now();
        let seq = ch.submit(p, run.mup.unwrap(), c("1"), Payload::SubmitData { digest: "again".into() }, now).unwrap();
        ch.mine_block().unwrap();
        assert!(matches!(ch.receipt(seq).unwrap().status, TxStatus::Reverted(_)));
        assert_eq!(ch.balance(&p), before);
    }

    #[test]
    fn unknown_pseudonym_cannot_submit() {
        let run = run_scripted(&ScriptedRun::new(three_bidders_one_winner(), timing()), ChainConfig::default()).unwrap();
        let mut ch = run.chain.clone();
        let loser = run.pseudonyms[&3];
        let now = ch.now();
        let seq = ch.submit(loser, run.mup.unwrap(), c("1"), Payload::SubmitData { digest: "x".into() }, now).unwrap();
        ch.mine_block().unwrap();
        assert_eq!(ch.receipt(seq).unwrap().status, TxStatus::Reverted(ChainError::UnknownPseudonym.to_string()));
    }

    #[test]
    fn zero_fee_request_refund_is_noop() {
        let mut script = ScriptedRun::new(three_bidders_one_winner(), timing());
        script.withhold_bids = true;
        let cfg = ChainConfig { registration_fee: Credits::ZERO, ..ChainConfig::default() };
        let run = run_scripted(&script, cfg.clone()).unwrap();
        assert_eq!(run.chain.balance(&run.csp), cfg.csp_funds);
        assert!(run.chain.blocks().iter().all(|b| b.internal.iter().all(|t| t.reason != "request_refund")));
    }

    #[test]
    fn deterministic() {
        let script = ScriptedRun::new(three_user_example(), timing());
        let a = run_scripted(&script, ChainConfig::default()).unwrap();
        let b = run_scripted(&script, ChainConfig::default()).unwrap();
        assert_eq!(a.chain.trace_jsonl(), b.chain.trace_jsonl());
    }
}
