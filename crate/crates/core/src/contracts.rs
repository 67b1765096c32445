//! Insurance policies, excess-of-loss treaties, CAT bonds and the per-event settlement waterfall.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peril::TruncatedPareto;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InsurancePolicy {
    pub insurer: usize,
    pub risk_id: usize,
    pub region: usize,
    pub value: f64,
    pub deductible: f64,
    pub excess: f64,
    /// Monetary premium paid every step.
    pub premium: f64,
    pub start: u32,
    pub term: u32,
}

impl InsurancePolicy {
    pub fn expires(&self) -> u32 {
        self.start + self.term
    }

    /// Largest possible claim on the policy.
    pub fn insured_value(&self) -> f64 {
        (self.excess - self.deductible).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReinsuranceTreaty {
    pub cedent: usize,
    pub reinsurer: usize,
    pub region: usize,
    pub attachment: f64,
    pub limit: f64,
    /// Monetary premium paid by the cedent every step.
    pub premium: f64,
    pub start: u32,
    pub term: u32,
}

impl ReinsuranceTreaty {
    pub fn expires(&self) -> u32 {
        self.start + self.term
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatBond {
    pub issuer: usize,
    pub region: usize,
    pub principal: f64,
    pub remaining_principal: f64,
    pub attachment: f64,
    pub limit: f64,
    /// Monetary coupon paid by the issuer every step.
    pub coupon: f64,
    pub start: u32,
    pub term: u32,
}

impl CatBond {
    pub fn expires(&self) -> u32 {
        self.start + self.term
    }
}

/// Who stands on either side of a claim.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "id", rename_all = "snake_case")]
pub enum Party {
    Firm(usize),
    Bond(usize),
    /// The policyholders of an insurer, aggregated.
    Policyholders(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub time: u32,
    pub region: usize,
    pub payer: Party,
    pub payee: Party,
    pub amount_due: f64,
    pub amount_paid: f64,
    /// Number of individual claims folded into this record.
    pub claims: u32,
}

impl ClaimRecord {
    pub fn shortfall(&self) -> f64 {
        (self.amount_due - self.amount_paid).max(0.0)
    }

    pub fn is_short(&self) -> bool {
        self.amount_paid < self.amount_due
    }
}

/// Claim on a policy given the damage fraction of its risk.
pub fn policy_claim(policy: &InsurancePolicy, damage_fraction: f64) -> f64 {
    claim_amount(policy.value, policy.deductible, policy.excess, damage_fraction)
}

#[inline]
pub fn claim_amount(value: f64, deductible: f64, excess: f64, damage_fraction: f64) -> f64 {
    let loss = damage_fraction * value;
    if loss <= deductible {
        0.0
    } else {
        excess.min(loss) - deductible
    }
}

/// Part of a loss falling in the layer between `attachment` and `limit`.
#[inline]
pub fn layer_recovery(gross_loss: f64, attachment: f64, limit: f64) -> f64 {
    (gross_loss - attachment).max(0.0).min((limit - attachment).max(0.0))
}

/// Expected layer recovery per catastrophe when the gross loss is `damage * exposure`.
pub fn expected_layer_loss(damage: &TruncatedPareto, exposure: f64, attachment: f64, limit: f64) -> f64 {
    if exposure <= 0.0 {
        return 0.0;
    }
    exposure * damage.integrated_survival(attachment / exposure, limit.max(attachment) / exposure)
}

/// Gross claims of one insurer from a single event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrossLoss {
    pub insurer: usize,
    pub amount: f64,
    pub claims: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoverProvider {
    Reinsurer(usize),
    Bond { id: usize, remaining: f64 },
}

/// A layer protecting `cedent` against the event's region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerCover {
    pub cedent: usize,
    pub attachment: f64,
    pub limit: f64,
    pub provider: CoverProvider,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Settlement {
    pub records: Vec<ClaimRecord>,
    /// Net capital change per firm.
    pub capital_changes: Vec<(usize, f64)>,
    /// Principal drawn from each bond.
    pub bond_draws: Vec<(usize, f64)>,
    /// Total paid out to policyholders (the rest of the economy).
    pub paid_to_policyholders: f64,
    pub bankrupt: Vec<usize>,
}

impl Settlement {
    pub fn non_recovered(&self) -> (u32, f64) {
        self.records
            .iter()
            .filter(|r| r.is_short())
            .fold((0, 0.0), |(n, s), r| (n + r.claims, s + r.shortfall()))
    }

    fn change(&mut self, firm: usize, delta: f64) {
        match self.capital_changes.iter_mut().find(|(f, _)| *f == firm) {
            Some((_, d)) => *d += delta,
            None => self.capital_changes.push((firm, delta)),
        }
    }
}

/// Settles one catastrophe. Reinsurers and bonds pay recoveries first (a short
/// reinsurer pays pro rata and defaults), then insurers pay policyholders out
/// of capital plus recoveries received, again pro rata when short.
pub fn settle_event(
    time: u32,
    region: usize,
    losses: &[GrossLoss],
    covers: &[LayerCover],
    capital: impl Fn(usize) -> f64,
) -> Settlement {
    let mut out = Settlement::default();
    let gross_of = |firm: usize| losses.iter().filter(|l| l.insurer == firm).map(|l| l.amount).sum::<f64>();

    let mut dues: Vec<f64> = covers
        .iter()
        .map(|c| {
            let due = layer_recovery(gross_of(c.cedent), c.attachment, c.limit);
            match c.provider {
                CoverProvider::Bond { remaining, .. } => due.min(remaining),
                CoverProvider::Reinsurer(_) => due,
            }
        })
        .collect();
    let mut paid = dues.clone();

    let mut reinsurers: Vec<usize> = covers
        .iter()
        .filter_map(|c| match c.provider {
            CoverProvider::Reinsurer(r) => Some(r),
            _ => None,
        })
        .collect();
    reinsurers.sort_unstable();
    reinsurers.dedup();
    for &r in &reinsurers {
        let owed: f64 = covers
            .iter()
            .zip(&dues)
            .filter(|(c, _)| c.provider == CoverProvider::Reinsurer(r))
            .map(|(_, d)| d)
            .sum();
        let k = capital(r).max(0.0);
        if owed > k {
            let ratio = k / owed;
            for (i, c) in covers.iter().enumerate() {
                if c.provider == CoverProvider::Reinsurer(r) {
                    paid[i] = dues[i] * ratio;
                }
            }
            out.change(r, -k);
            out.bankrupt.push(r);
        } else if owed > 0.0 {
            out.change(r, -owed);
        }
    }

    for (i, c) in covers.iter().enumerate() {
        if dues[i] <= 0.0 {
            continue;
        }
        let payer = match c.provider {
            CoverProvider::Reinsurer(r) => Party::Firm(r),
            CoverProvider::Bond { id, .. } => {
                out.bond_draws.push((id, paid[i]));
                Party::Bond(id)
            }
        };
        out.change(c.cedent, paid[i]);
        out.records.push(ClaimRecord {
            time,
            region,
            payer,
            payee: Party::Firm(c.cedent),
            amount_due: dues[i],
            amount_paid: paid[i],
            claims: 1,
        });
    }
    dues.clear();

    for l in losses {
        if l.amount <= 0.0 {
            continue;
        }
        let received: f64 = covers.iter().zip(&paid).filter(|(c, _)| c.cedent == l.insurer).map(|(_, p)| p).sum();
        let available = capital(l.insurer).max(0.0) + received;
        let amount_paid = if l.amount > available {
            out.bankrupt.push(l.insurer);
            available
        } else {
            l.amount
        };
        out.change(l.insurer, -amount_paid);
        out.paid_to_policyholders += amount_paid;
        out.records.push(ClaimRecord {
            time,
            region,
            payer: Party::Firm(l.insurer),
            payee: Party::Policyholders(l.insurer),
            amount_due: l.amount,
            amount_paid,
            claims: l.claims,
        });
    }
    out
}

/// Creates a CAT bond for the layer once enough reinsurance searches have failed.
#[allow(clippy::too_many_arguments)]
pub fn issue_cat_bond(
    issuer: usize,
    issuer_active: bool,
    failed_searches: u32,
    trigger: u32,
    region: usize,
    attachment: f64,
    limit: f64,
    coupon: f64,
    start: u32,
    term: u32,
) -> Result<Option<CatBond>> {
    if !issuer_active {
        return Err(Error::Logic(format!("inactive firm {issuer} cannot issue a CAT bond")));
    }
    if failed_searches < trigger || limit <= attachment {
        return Ok(None);
    }
    let principal = limit - attachment;
    Ok(Some(CatBond {
        issuer,
        region,
        principal,
        remaining_principal: principal,
        attachment,
        limit,
        coupon,
        start,
        term,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn policy(deductible: f64, excess: f64) -> InsurancePolicy {
        InsurancePolicy {
            insurer: 0,
            risk_id: 0,
            region: 0,
            value: 1.0,
            deductible,
            excess,
            premium: 0.012,
            start: 0,
            term: 12,
        }
    }

    #[test]
    fn claim_examples() {
        assert!((policy_claim(&policy(0.0, 1.0), 0.3) - 0.3).abs() < 1e-15);
        assert_eq!(policy_claim(&policy(0.2, 1.0), 0.2), 0.0);
        assert_eq!(policy_claim(&policy(0.2, 1.0), 0.1), 0.0);
        assert!((policy_claim(&policy(0.1, 0.8), 0.95) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn layer_examples() {
        assert_eq!(layer_recovery(20.0, 30.0, 90.0), 0.0);
        assert_eq!(layer_recovery(100.0, 30.0, 90.0), 60.0);
        assert_eq!(layer_recovery(200.0, 30.0, 90.0), 60.0);
    }

    #[test]
    fn expected_layer_matches_monte_carlo() {
        use rand::SeedableRng;
        let d = TruncatedPareto::new(2.0, 0.25, 1.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let n = 400_000;
        let mc: f64 = (0..n).map(|_| layer_recovery(d.sample(&mut rng) * 1000.0, 275.0, 1000.0)).sum::<f64>() / n as f64;
        let exact = expected_layer_loss(&d, 1000.0, 275.0, 1000.0);
        assert!((mc - exact).abs() / exact < 0.01, "{mc} vs {exact}");
        let quad = d.expectation(4000, |x| layer_recovery(x * 1000.0, 275.0, 1000.0));
        assert!((quad - exact).abs() < 1e-4);
        // whole exposure: the mean damage
        assert!((expected_layer_loss(&d, 1.0, 0.0, 1.0) - 0.4).abs() < 1e-6);
    }

    #[test]
    fn no_instruments_no_records() {
        let s = settle_event(0, 0, &[], &[], |_| 100.0);
        assert!(s.records.is_empty() && s.bankrupt.is_empty() && s.capital_changes.is_empty());
    }

    #[test]
    fn reinsured_insurer_keeps_attachment() {
        let losses = [GrossLoss { insurer: 0, amount: 700.0, claims: 700 }];
        let covers = [LayerCover { cedent: 0, attachment: 250.0, limit: 1000.0, provider: CoverProvider::Reinsurer(1) }];
        let s = settle_event(3, 0, &losses, &covers, |f| [500.0, 5000.0][f]);
        assert!(s.bankrupt.is_empty());
        assert_eq!(s.capital_changes, vec![(1, -450.0), (0, 450.0 - 700.0)]);
        assert_eq!(s.paid_to_policyholders, 700.0);
        assert_eq!(s.non_recovered(), (0, 0.0));
    }

    #[test]
    fn insolvent_reinsurer_cuts_both_cedents() {
        // Two cedents with 400 and 200 in their layers; the reinsurer holds 300,
        // so each receives half. Cedent 0 then has 100 + 200 against 650 of claims.
        let losses = [
            GrossLoss { insurer: 0, amount: 650.0, claims: 10 },
            GrossLoss { insurer: 1, amount: 450.0, claims: 7 },
        ];
        let covers = [
            LayerCover { cedent: 0, attachment: 250.0, limit: 1000.0, provider: CoverProvider::Reinsurer(2) },
            LayerCover { cedent: 1, attachment: 250.0, limit: 1000.0, provider: CoverProvider::Reinsurer(2) },
        ];
        let caps = [100.0, 1000.0, 300.0];
        let s = settle_event(0, 1, &losses, &covers, |f| caps[f]);
        assert_eq!(s.bankrupt, vec![2, 0]);
        let rec = |payer, payee| s.records.iter().find(|r| r.payer == payer && r.payee == payee).unwrap();
        let r0 = rec(Party::Firm(2), Party::Firm(0));
        assert_eq!((r0.amount_due, r0.amount_paid), (400.0, 200.0));
        let r1 = rec(Party::Firm(2), Party::Firm(1));
        assert_eq!((r1.amount_due, r1.amount_paid), (200.0, 100.0));
        let p0 = rec(Party::Firm(0), Party::Policyholders(0));
        assert_eq!((p0.amount_due, p0.amount_paid), (650.0, 300.0));
        let p1 = rec(Party::Firm(1), Party::Policyholders(1));
        assert_eq!((p1.amount_due, p1.amount_paid), (450.0, 450.0));
        let (count, amount) = s.non_recovered();
        assert_eq!(count, 1 + 1 + 10);
        assert!((amount - (200.0 + 100.0 + 350.0)).abs() < 1e-9);
        let change: f64 = s.capital_changes.iter().map(|c| c.1).sum();
        assert!((change + s.paid_to_policyholders).abs() < 1e-9);
    }

    #[test]
    fn exact_capital_is_not_default() {
        let losses = [GrossLoss { insurer: 0, amount: 100.0, claims: 1 }];
        let s = settle_event(0, 0, &losses, &[], |_| 100.0);
        assert!(s.bankrupt.is_empty());
        assert_eq!(s.capital_changes, vec![(0, -100.0)]);
    }

    #[test]
    fn bond_pays_up_to_remaining_principal() {
        let losses = [GrossLoss { insurer: 0, amount: 900.0, claims: 9 }];
        let covers = [LayerCover {
            cedent: 0,
            attachment: 300.0,
            limit: 1000.0,
            provider: CoverProvider::Bond { id: 4, remaining: 250.0 },
        }];
        let s = settle_event(0, 0, &losses, &covers, |_| 1000.0);
        assert_eq!(s.bond_draws, vec![(4, 250.0)]);
        assert_eq!(s.capital_changes, vec![(0, 250.0 - 900.0)]);
        assert_eq!(s.non_recovered(), (0, 0.0));
    }

    #[test]
    fn bond_issuance_threshold() {
        let issue = |n| issue_cat_bond(0, true, n, 5, 1, 25.0, 100.0, 1.0, 7, 12).unwrap();
        assert!(issue(4).is_none());
        let b = issue(5).unwrap();
        assert_eq!((b.principal, b.remaining_principal, b.expires()), (75.0, 75.0, 19));
        assert!(issue_cat_bond(0, false, 9, 5, 1, 25.0, 100.0, 1.0, 7, 12).is_err());
    }

    proptest! {
        #[test]
        fn claim_monotone_and_bounded(q in 0.0f64..0.5, width in 0.01f64..0.5, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let p = policy(q, q + width);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(policy_claim(&p, lo) <= policy_claim(&p, hi));
            prop_assert!(policy_claim(&p, hi) <= width + 1e-12);
            prop_assert!(policy_claim(&p, lo) >= 0.0);
        }

        #[test]
        fn layer_lipschitz(x in 0.0f64..1e4, y in 0.0f64..1e4, att in 0.0f64..5e3, width in 0.0f64..5e3) {
            let lim = att + width;
            let (rx, ry) = (layer_recovery(x, att, lim), layer_recovery(y, att, lim));
            prop_assert!((rx - ry).abs() <= (x - y).abs() + 1e-9);
            prop_assert!(rx <= width + 1e-9 && rx >= 0.0);
        }

        #[test]
        fn settlement_conserves_money(
            amounts in proptest::collection::vec(0.0f64..2000.0, 3),
            caps in proptest::collection::vec(0.0f64..1500.0, 5),
            att in 0.0f64..500.0,
            remaining in 0.0f64..800.0,
        ) {
            let losses: Vec<GrossLoss> = amounts.iter().enumerate()
                .map(|(i, &a)| GrossLoss { insurer: i, amount: a, claims: 3 }).collect();
            let covers = [
                LayerCover { cedent: 0, attachment: att, limit: 1500.0, provider: CoverProvider::Reinsurer(3) },
                LayerCover { cedent: 1, attachment: att, limit: 1500.0, provider: CoverProvider::Reinsurer(3) },
                LayerCover { cedent: 2, attachment: att, limit: 1500.0, provider: CoverProvider::Bond { id: 0, remaining } },
            ];
            let s = settle_event(0, 0, &losses, &covers, |f| caps[f]);
            let firms: f64 = s.capital_changes.iter().map(|c| c.1).sum();
            let bonds: f64 = s.bond_draws.iter().map(|b| b.1).sum();
            prop_assert!((firms - bonds + s.paid_to_policyholders).abs() < 1e-6);
            for r in &s.records {
                prop_assert!(r.amount_paid <= r.amount_due + 1e-9);
            }
            for &(f, d) in &s.capital_changes {
                prop_assert!(caps[f] + d >= -1e-6);
            }
        }
    }
}
