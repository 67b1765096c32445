//! Premium formation, matching of customers and cedents, and the rest-of-economy ledger.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Hypergeometric};
use serde::{Deserialize, Serialize};

use crate::config::Params;
use crate::error::{Error, Result};
use crate::firms::FirmKind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PremiumState {
    pub insurance: f64,
    pub reinsurance: f64,
    pub fair: f64,
    pub min_factor: f64,
    pub max_factor: f64,
    pub sensitivity_insurance: f64,
    pub sensitivity_reinsurance: f64,
    pub normalizer: f64,
}

impl PremiumState {
    pub fn from_params(p: &Params) -> Self {
        let fair = p.fair_premium();
        PremiumState {
            insurance: fair * p.max_premium_factor,
            reinsurance: fair * p.max_premium_factor,
            fair,
            min_factor: p.min_premium_factor,
            max_factor: p.max_premium_factor,
            sensitivity_insurance: p.sensitivity_insurance,
            sensitivity_reinsurance: p.sensitivity_reinsurance,
            normalizer: p.premium_normalizer,
        }
    }

    pub fn rate(&self, kind: FirmKind) -> f64 {
        match kind {
            FirmKind::Insurer => self.insurance,
            FirmKind::Reinsurer => self.reinsurance,
        }
    }

    /// Rate as a multiple of the fair premium; the upper limit when nothing is at risk.
    pub fn loading(&self, kind: FirmKind) -> f64 {
        if self.fair > 0.0 {
            self.rate(kind) / self.fair
        } else {
            self.max_factor
        }
    }
}

/// Sector aggregates the premium update reads.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MarketSnapshot {
    pub capital_insurance: f64,
    pub capital_reinsurance: f64,
    pub uninsured: usize,
    pub active_insurers: usize,
    pub active_reinsurers: usize,
}

/// Linear-in-capital premium clamped to `[min_factor, max_factor] * fair`.
/// Each sector prices off its own capital only.
pub fn update_premium(state: &mut PremiumState, kind: FirmKind, snapshot: &MarketSnapshot) -> f64 {
    let (s, k) = match kind {
        FirmKind::Insurer => (state.sensitivity_insurance, snapshot.capital_insurance),
        FirmKind::Reinsurer => (state.sensitivity_reinsurance, snapshot.capital_reinsurance),
    };
    let raw = state.fair * state.max_factor - s * k / state.normalizer;
    let p = raw.clamp(state.min_factor * state.fair, state.max_factor * state.fair);
    match kind {
        FirmKind::Insurer => state.insurance = p,
        FirmKind::Reinsurer => state.reinsurance = p,
    }
    p
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowCategory {
    PolicyPremium,
    PolicyClaim,
    ReinsurancePremium,
    Recovery,
    Coupon,
    PrincipalIn,
    PrincipalOut,
    Interest,
    Dividend,
    ExitCapital,
    EntryCapital,
}

impl FlowCategory {
    pub const ALL: [FlowCategory; 11] = [
        FlowCategory::PolicyPremium,
        FlowCategory::PolicyClaim,
        FlowCategory::ReinsurancePremium,
        FlowCategory::Recovery,
        FlowCategory::Coupon,
        FlowCategory::PrincipalIn,
        FlowCategory::PrincipalOut,
        FlowCategory::Interest,
        FlowCategory::Dividend,
        FlowCategory::ExitCapital,
        FlowCategory::EntryCapital,
    ];
}

/// The quasi-agent standing for customers, investors and shareholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomyLedger {
    pub balance: f64,
    /// Cumulative amount moved per category, indexed like [`FlowCategory::ALL`].
    pub flows: [f64; 11],
}

impl EconomyLedger {
    pub fn new(endowment: f64) -> Self {
        EconomyLedger { balance: endowment, flows: [0.0; 11] }
    }

    pub fn flow(&self, category: FlowCategory) -> f64 {
        self.flows[category as usize]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Account {
    Economy,
    Firm(usize),
    Bond(usize),
}

/// Anything holding balances that money can move between.
pub trait Balances {
    fn balance_mut(&mut self, account: Account) -> &mut f64;
    fn ledger_mut(&mut self) -> &mut EconomyLedger;
}

/// Double-entry transfer of a non-negative amount.
pub fn ledger_transfer<B: Balances + ?Sized>(
    book: &mut B,
    from: Account,
    to: Account,
    amount: f64,
    category: FlowCategory,
) -> Result<()> {
    if amount.is_nan() || amount < 0.0 {
        return Err(Error::Logic(format!("transfer of {amount} ({category:?})")));
    }
    if amount == 0.0 {
        return Ok(());
    }
    *book.balance_mut(from) -= amount;
    *book.balance_mut(to) += amount;
    book.ledger_mut().flows[category as usize] += amount;
    Ok(())
}

/// Uninsured risks each approach one insurer chosen uniformly at random.
///
/// `pools[r]` holds the uninsured risks of region `r`. `offer(risk, insurer)`
/// must depend only on the insurer's own book, which changes only when it
/// accepts. That makes insurers independent, so the approaches are split among
/// insurers by a multinomial draw and each insurer works through its own share
/// in random order. An insurer that has turned down every region it still
/// faces since its last acceptance stops early. Accepted risks are removed
/// from `pools`; the `(risk, insurer)` pairs are returned.
pub fn match_customers<R: Rng + ?Sized>(
    pools: &mut [Vec<usize>],
    insurers: &[usize],
    rng: &mut R,
    mut offer: impl FnMut(usize, usize) -> bool,
) -> Vec<(usize, usize)> {
    let mut matched = Vec::new();
    let n = pools.len();
    if insurers.is_empty() || n == 0 {
        return matched;
    }
    assert!(n <= 64, "at most 64 regions");
    let mut shares = vec![0u64; insurers.len() * n];
    for (r, pool) in pools.iter().enumerate() {
        let mut left = pool.len() as u64;
        for k in 0..insurers.len() {
            let remaining_insurers = (insurers.len() - k) as f64;
            let c = if k + 1 == insurers.len() || left == 0 {
                left
            } else {
                Binomial::new(left, 1.0 / remaining_insurers).expect("valid binomial").sample(rng)
            };
            shares[k * n + r] = c;
            left -= c;
        }
    }
    for (k, &insurer) in insurers.iter().enumerate() {
        let share = &mut shares[k * n..(k + 1) * n];
        let mut blocked = 0u64;
        loop {
            let open: u64 = (0..n).filter(|&r| blocked & (1 << r) == 0).map(|r| share[r]).sum();
            if open == 0 {
                break;
            }
            let closed: u64 = (0..n).filter(|&r| blocked & (1 << r) != 0).map(|r| share[r]).sum();
            if closed > 0 {
                // approaches to regions already turned down are rejected unseen
                let mut skipped = blocked_run_length(closed, open, rng);
                let mut pool_left = closed;
                for r in (0..n).filter(|&r| blocked & (1 << r) != 0) {
                    if skipped == 0 {
                        break;
                    }
                    let take = if pool_left == share[r] {
                        skipped
                    } else if skipped <= 24 {
                        let mut take = 0;
                        for _ in 0..skipped {
                            if rng.gen_range(0..pool_left) < share[r] - take {
                                take += 1;
                            }
                            pool_left -= 1;
                        }
                        pool_left += skipped;
                        take
                    } else {
                        Hypergeometric::new(pool_left, share[r], skipped).expect("valid hypergeometric").sample(rng)
                    };
                    pool_left -= share[r];
                    share[r] -= take;
                    skipped -= take;
                }
            }
            let mut x = rng.gen_range(0..open);
            let mut region = 0;
            loop {
                if blocked & (1 << region) == 0 {
                    if x < share[region] {
                        break;
                    }
                    x -= share[region];
                }
                region += 1;
            }
            share[region] -= 1;
            let pool = &mut pools[region];
            let j = rng.gen_range(0..pool.len());
            let risk = pool[j];
            if offer(risk, insurer) {
                pool.swap_remove(j);
                matched.push((risk, insurer));
                blocked = 0;
            } else {
                blocked |= 1 << region;
            }
        }
    }
    matched
}

/// Number of `closed` items preceding the first of `open` items in a uniformly
/// random ordering (negative hypergeometric), by inversion.
fn blocked_run_length<R: Rng + ?Sized>(closed: u64, open: u64, rng: &mut R) -> u64 {
    let v: f64 = rng.gen();
    let mut survival = 1.0;
    let mut k = 0;
    while k < closed {
        survival *= (closed - k) as f64 / (closed + open - k) as f64;
        if survival <= v {
            break;
        }
        k += 1;
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverRequest {
    pub insurer: usize,
    pub region: usize,
    /// Attachment as a share of the insurer's regional insured value.
    pub attachment_fraction: f64,
    /// The reinsurer that accepted, if any.
    pub reinsurer: Option<usize>,
}

/// Each seeking `(insurer, region)` proposes an attachment drawn from
/// `attachment_range` to one random reinsurer.
pub fn match_reinsurance<R: Rng + ?Sized, A: Rng + ?Sized>(
    seekers: &[(usize, usize)],
    reinsurers: &[usize],
    attachment_range: (f64, f64),
    rng: &mut R,
    attachment_rng: &mut A,
    mut accept: impl FnMut(usize, usize, usize, f64) -> bool,
) -> Vec<CoverRequest> {
    seekers
        .iter()
        .map(|&(insurer, region)| {
            let (lo, hi) = attachment_range;
            let attachment_fraction = lo + (hi - lo) * attachment_rng.gen::<f64>();
            let reinsurer = if reinsurers.is_empty() {
                None
            } else {
                let r = reinsurers[rng.gen_range(0..reinsurers.len())];
                accept(insurer, region, r, attachment_fraction).then_some(r)
            };
            CoverRequest { insurer, region, attachment_fraction, reinsurer }
        })
        .collect()
}
