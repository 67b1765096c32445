//! Insurers and reinsurers: capital accounting, underwriting, entry and exit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::risk_model::{capital_sufficient, RiskModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirmKind {
    Insurer,
    Reinsurer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirmStatus {
    Active,
    ExitedBankrupt,
    ExitedUnderemployed,
}

/// Outward protection held by an insurer for one region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HeldCover {
    pub contract: CoverContract,
    pub attachment: f64,
    pub limit: f64,
    /// Most the cover can still pay (bond principal left, or unbounded).
    pub capacity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoverContract {
    Treaty(usize),
    Bond(usize),
}

/// Money flows of the current step, used for profit and dividends.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepFlows {
    pub premiums: f64,
    pub interest: f64,
    pub claims_paid: f64,
    pub recoveries: f64,
    pub outward_premiums: f64,
}

impl StepFlows {
    pub fn profit(&self) -> f64 {
        self.premiums + self.interest - self.claims_paid + self.recoveries - self.outward_premiums
    }
}

#[derive(Debug, Clone)]
pub struct Firm {
    pub id: usize,
    pub kind: FirmKind,
    pub capital: f64,
    pub model: RiskModel,
    pub status: FirmStatus,
    pub underemployment_clock: u32,
    pub entered_at: u32,
    pub exited_at: Option<u32>,
    /// True (undistorted) value-at-risk per region, net of outward cover.
    pub regional_var: Vec<f64>,
    /// Inward contracts per region: policies for insurers, treaties for reinsurers.
    pub policy_count: Vec<u32>,
    /// Outward cover per region (insurers).
    pub cover: Vec<Option<HeldCover>>,
    /// Consecutive failed reinsurance searches per region (insurers).
    pub failed_searches: Vec<u32>,
    /// Sum of per-step premiums on inward business.
    pub premium_income: f64,
    pub flows: StepFlows,
}

impl Firm {
    pub fn new(id: usize, kind: FirmKind, capital: f64, model: RiskModel, regions: usize, entered_at: u32) -> Self {
        Firm {
            id,
            kind,
            capital,
            model,
            status: FirmStatus::Active,
            underemployment_clock: 0,
            entered_at,
            exited_at: None,
            regional_var: vec![0.0; regions],
            policy_count: vec![0; regions],
            cover: vec![None; regions],
            failed_searches: vec![0; regions],
            premium_income: 0.0,
            flows: StepFlows::default(),
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == FirmStatus::Active
    }

    pub fn perceived_var(&self, region: usize) -> f64 {
        self.model.factor(region) * self.regional_var[region]
    }

    pub fn combined_perceived_var(&self) -> f64 {
        (0..self.regional_var.len()).map(|r| self.perceived_var(r)).fold(0.0, f64::max)
    }

    /// Share of capital tied up by the capital requirement, capped at 1.
    pub fn employed_share(&self, mu: f64) -> f64 {
        if self.capital <= 0.0 {
            return 1.0;
        }
        (mu * self.combined_perceived_var() / self.capital).min(1.0)
    }

    /// Capital in excess of the requirement.
    pub fn free_capital(&self, mu: f64) -> f64 {
        (self.capital - mu * self.combined_perceived_var()).max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EntryConfig {
    pub eta_insurer: f64,
    pub eta_reinsurer: f64,
    pub capital_insurer: f64,
    pub capital_reinsurer: f64,
    pub initial_insurers: u32,
    pub initial_reinsurers: u32,
}

/// Requirements an underwriter applies to new business.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnderwritingRules {
    pub mu: f64,
    pub eta: f64,
}

/// Capital plus balance rule for a candidate that would move the firm's true
/// VaR in `region` to `candidate_true_var`.
pub fn underwriting_decision(firm: &Firm, region: usize, candidate_true_var: f64, rules: &UnderwritingRules) -> bool {
    if !firm.is_active() {
        return false;
    }
    let vars = &firm.regional_var;
    let n = vars.len() as f64;
    let perceived = |r: usize| firm.model.factor(r) * vars[r];
    let candidate = firm.model.factor(region) * candidate_true_var;
    let current = perceived(region);
    let mut combined = candidate;
    let mut total = 0.0;
    for r in 0..vars.len() {
        let p = perceived(r);
        total += p;
        if r != region && p > combined {
            combined = p;
        }
    }
    if !capital_sufficient(firm.capital, rules.mu, combined) {
        return false;
    }
    let mean_before = total / n;
    let mean_after = (total - current + candidate) / n;
    let (mut ss_before, mut ss_after) = (0.0, 0.0);
    for r in 0..vars.len() {
        let p = perceived(r);
        ss_before += (p - mean_before) * (p - mean_before);
        let q = if r == region { candidate } else { p };
        ss_after += (q - mean_after) * (q - mean_after);
    }
    let before = (ss_before / n).sqrt();
    let after = (ss_after / n).sqrt();
    after <= before || after < rules.eta * firm.capital / n
}

/// Compounds one step of interest; returns the interest earned.
pub fn accrue_interest(firm: &mut Firm, rate: f64) -> f64 {
    let interest = firm.capital * rate;
    firm.capital += interest;
    firm.flows.interest += interest;
    interest
}

/// Pays `rho` of a positive profit out of capital; returns the dividend.
pub fn pay_dividends(firm: &mut Firm, profit: f64, rho: f64) -> f64 {
    let dividend = (rho * profit).max(0.0).min(firm.capital.max(0.0));
    firm.capital -= dividend;
    dividend
}

/// Draws this step's entrants as (kind, index into the model set).
pub fn process_entry<R: Rng + ?Sized>(cfg: &EntryConfig, models: usize, rng: &mut R) -> Vec<(FirmKind, usize)> {
    let mut out = Vec::new();
    for (kind, p) in [(FirmKind::Insurer, cfg.eta_insurer), (FirmKind::Reinsurer, cfg.eta_reinsurer)] {
        let enter = rng.gen::<f64>() < p;
        let model = rng.gen_range(0..models.max(1));
        if enter {
            out.push((kind, model));
        }
    }
    out
}

/// Advances the underemployment clock; true once the firm must exit.
pub fn process_exit(firm: &mut Firm, employed_share: f64, gamma: f64, tau: u32) -> bool {
    if employed_share < gamma {
        firm.underemployment_clock += 1;
    } else {
        firm.underemployment_clock = 0;
    }
    firm.underemployment_clock >= tau
}

#[derive(Debug, Clone, PartialEq)]
pub struct DefaultRecord {
    pub paid: Vec<f64>,
    pub shortfall: f64,
    pub non_recovered: u32,
    pub defaulted: bool,
}

/// Splits `capital` pro rata across `claims` when it cannot pay them all.
pub fn resolve_bankruptcy(capital: f64, claims: &[f64]) -> DefaultRecord {
    let total: f64 = claims.iter().sum();
    if total <= capital {
        return DefaultRecord { paid: claims.to_vec(), shortfall: 0.0, non_recovered: 0, defaulted: false };
    }
    let ratio = capital.max(0.0) / total;
    let paid: Vec<f64> = claims.iter().map(|c| c * ratio).collect();
    DefaultRecord {
        shortfall: total - paid.iter().sum::<f64>(),
        non_recovered: claims.iter().filter(|&&c| c > 0.0).count() as u32,
        paid,
        defaulted: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn insurer(capital: f64, underestimated: usize) -> Firm {
        Firm::new(0, FirmKind::Insurer, capital, RiskModel::new(0, underestimated, 2.0, 0.005), 4, 0)
    }

    #[test]
    fn interest_compounds() {
        let mut f = insurer(1000.0, 0);
        assert!((accrue_interest(&mut f, 0.001) - 1.0).abs() < 1e-12);
        assert!((f.capital - 1001.0).abs() < 1e-9);
        let mut g = insurer(1000.0, 0);
        for _ in 0..12 {
            accrue_interest(&mut g, 0.001);
        }
        assert!((g.capital - 1012.066).abs() < 1e-3);
        let mut h = insurer(1000.0, 0);
        accrue_interest(&mut h, 0.0);
        assert_eq!(h.capital, 1000.0);
    }

    #[test]
    fn dividend_examples() {
        let mut f = insurer(1000.0, 0);
        assert!((pay_dividends(&mut f, 100.0, 0.4) - 40.0).abs() < 1e-12);
        assert!((f.capital - 960.0).abs() < 1e-12);
        assert_eq!(pay_dividends(&mut f, -50.0, 0.4), 0.0);
        assert_eq!(pay_dividends(&mut f, 0.0, 0.4), 0.0);
    }

    #[test]
    fn underwriting_examples() {
        let rules = UnderwritingRules { mu: 2.0, eta: 0.1 };
        let f = insurer(1000.0, 0);
        // empty book, small candidate: perceived 2 * 10 = 20, std 8.7 < 25
        assert!(underwriting_decision(&f, 1, 10.0, &rules));
        // capital requirement breached
        assert!(!underwriting_decision(&f, 1, 300.0, &rules));
        // underestimated region takes four times the exposure of the others
        let max_accepted = |region| {
            let mut lo = 0.0;
            let mut hi = 1e4;
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if underwriting_decision(&f, region, mid, &UnderwritingRules { mu: 2.0, eta: 10.0 }) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        assert!((max_accepted(0) / max_accepted(1) - 4.0).abs() < 1e-6);
    }

    #[test]
    fn entry_frequencies() {
        let cfg = EntryConfig {
            eta_insurer: 0.3,
            eta_reinsurer: 0.05,
            capital_insurer: 1.0,
            capital_reinsurer: 2.0,
            initial_insurers: 0,
            initial_reinsurers: 0,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut insurers = 0;
        let mut by_model = [0; 2];
        for _ in 0..10_000 {
            for (kind, m) in process_entry(&cfg, 2, &mut rng) {
                if kind == FirmKind::Insurer {
                    insurers += 1;
                    by_model[m] += 1;
                }
            }
        }
        assert!((insurers as f64 - 3000.0).abs() < 150.0, "{insurers}");
        assert!((by_model[0] as f64 / insurers as f64 - 0.5).abs() < 0.03);
        let none = EntryConfig { eta_insurer: 0.0, eta_reinsurer: 0.0, ..cfg };
        assert!((0..1000).all(|_| process_entry(&none, 4, &mut rng).is_empty()));
    }

    #[test]
    fn exit_needs_consecutive_low_steps() {
        let mut f = insurer(1.0, 0);
        assert!((0..23).all(|_| !process_exit(&mut f, 0.5, 0.6, 24)));
        assert!(process_exit(&mut f, 0.5, 0.6, 24));
        let mut g = insurer(1.0, 0);
        (0..23).for_each(|_| {
            process_exit(&mut g, 0.5, 0.6, 24);
        });
        assert!(!process_exit(&mut g, 0.7, 0.6, 24));
        assert_eq!(g.underemployment_clock, 0);
        let mut r = insurer(1.0, 0);
        assert!((0..47).all(|_| !process_exit(&mut r, 0.3, 0.4, 48)));
        assert!(process_exit(&mut r, 0.3, 0.4, 48));
    }

    #[test]
    fn pro_rata_default() {
        let d = resolve_bankruptcy(100.0, &[60.0, 60.0]);
        assert_eq!(d.paid, vec![50.0, 50.0]);
        assert!((d.shortfall - 20.0).abs() < 1e-12);
        assert_eq!(d.non_recovered, 2);
        assert!(d.defaulted);
        let exact = resolve_bankruptcy(120.0, &[60.0, 60.0]);
        assert!(!exact.defaulted && exact.non_recovered == 0);
    }

    proptest::proptest! {
        #[test]
        fn decision_matches_reference_rules(
            vars in proptest::collection::vec(0.0f64..1e4, 4),
            region in 0usize..4,
            candidate in 0.0f64..1e4,
            capital in 0.0f64..1e5,
            eta in 0.0f64..0.5,
        ) {
            use crate::risk_model::{balance_check, combined_var};
            let mut f = insurer(capital, 2);
            f.regional_var = vars.clone();
            let rules = UnderwritingRules { mu: 2.0, eta };
            let now: Vec<f64> = (0..4).map(|r| f.perceived_var(r)).collect();
            let mut next = now.clone();
            next[region] = f.model.factor(region) * candidate;
            let expected = capital_sufficient(capital, 2.0, combined_var(&next).unwrap())
                && balance_check(&now, &next, capital, eta, 4);
            proptest::prop_assert_eq!(underwriting_decision(&f, region, candidate, &rules), expected);
        }
    }

    #[test]
    fn employed_share_capped() {
        let mut f = insurer(100.0, 0);
        f.regional_var[1] = 10.0;
        assert!((f.employed_share(2.0) - 0.4).abs() < 1e-12);
        f.regional_var[1] = 1000.0;
        assert_eq!(f.employed_share(2.0), 1.0);
        f.capital = 0.0;
        assert_eq!(f.employed_share(2.0), 1.0);
    }
}
