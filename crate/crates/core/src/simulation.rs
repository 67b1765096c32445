//! The per-step scheduler of one replication and the ensemble runner.

use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Params;
use crate::contracts::{
    claim_amount, expected_layer_loss, issue_cat_bond, layer_recovery, settle_event, CatBond, ClaimRecord,
    CoverProvider, GrossLoss, InsurancePolicy, LayerCover, Party, ReinsuranceTreaty,
};
use crate::error::{Error, Result};
use crate::firms::{
    accrue_interest, pay_dividends, process_entry, process_exit, underwriting_decision, CoverContract, EntryConfig,
    Firm, FirmKind, FirmStatus, HeldCover, StepFlows, UnderwritingRules,
};
use crate::market::{
    ledger_transfer, match_customers, match_reinsurance, update_premium, Account, Balances, EconomyLedger,
    FlowCategory, MarketSnapshot, PremiumState,
};
use crate::peril::{
    allocate_losses, build_event_profile, partition_risks, CatastropheEvent, EventProfile, PerilRegion,
    ProfileParams, TruncatedPareto,
};
use crate::risk_model::{model_set, RiskModel};
use crate::rng::{Purpose, StreamKey};

/// Metrics recorded at the end of every step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub t: u32,
    pub premium_insurance: f64,
    pub premium_reinsurance: f64,
    pub capital_insurance: f64,
    pub capital_reinsurance: f64,
    /// Capital above the underwriting requirement.
    pub free_capital_insurance: f64,
    pub free_capital_reinsurance: f64,
    pub insurers: u32,
    pub reinsurers: u32,
    pub uninsured: u32,
    /// Active firms when the step began.
    pub firms_at_start: u32,
    pub defaults: u32,
    pub defaults_insurers: u32,
    pub defaults_reinsurers: u32,
    pub non_recovered_count: u32,
    pub non_recovered_amount: f64,
    pub profit: f64,
    pub dividends: f64,
    pub entries: u32,
    pub exits: u32,
    pub active_treaties: u32,
    pub active_bonds: u32,
    pub total_money: f64,
}

/// One catastrophe as experienced by a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub t: u32,
    pub region: u32,
    pub total_damage_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapitalSnapshot {
    pub t: u32,
    pub firm: usize,
    pub kind: FirmKind,
    pub capital: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub setting: u32,
    pub replication: u64,
    pub burn_in: u32,
    pub steps: Vec<StepMetrics>,
    pub events: Vec<EventRecord>,
    pub snapshots: Vec<CapitalSnapshot>,
    pub settlements: Vec<ClaimRecord>,
}

impl RunRecord {
    pub fn defaults(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.defaults).collect()
    }

    pub fn firms_at_start(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.firms_at_start).collect()
    }

    pub fn premium_insurance(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.premium_insurance).collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep every claim record of every event.
    pub log_settlements: bool,
}

const NO_INSURER: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct PolicySlot {
    insurer: u32,
    start: u32,
    premium: f64,
}

impl PolicySlot {
    const EMPTY: PolicySlot = PolicySlot { insurer: NO_INSURER, start: 0, premium: 0.0 };
}

struct Streams {
    customers: ChaCha8Rng,
    reinsurance: ChaCha8Rng,
    attachment: ChaCha8Rng,
    entry: ChaCha8Rng,
}

/// Complete state of one replication.
pub struct World {
    pub params: Params,
    pub t: u32,
    pub firms: Vec<Firm>,
    policies: Vec<PolicySlot>,
    pub treaties: Vec<ReinsuranceTreaty>,
    pub treaty_active: Vec<bool>,
    treaty_var: Vec<f64>,
    live_treaties: Vec<usize>,
    live_bonds: Vec<usize>,
    pools: Vec<Vec<usize>>,
    pub bonds: Vec<CatBond>,
    pub bond_active: Vec<bool>,
    pub economy: EconomyLedger,
    pub premium: PremiumState,
    regions: Vec<PerilRegion>,
    region_of: Vec<u16>,
    models: Vec<RiskModel>,
    damage: TruncatedPareto,
    policy_var: f64,
    /// Value, deductible and excess shared by every policy.
    policy_terms: (f64, f64, f64),
    rules: UnderwritingRules,
    entry: EntryConfig,
    expiries: Vec<Vec<u32>>,
    active: Vec<usize>,
    initial_money: f64,
    streams: Streams,
    options: RunOptions,
    metrics: StepMetrics,
    record: RunRecord,
}

impl Balances for World {
    fn balance_mut(&mut self, account: Account) -> &mut f64 {
        match account {
            Account::Economy => &mut self.economy.balance,
            Account::Firm(i) => &mut self.firms[i].capital,
            Account::Bond(i) => &mut self.bonds[i].remaining_principal,
        }
    }

    fn ledger_mut(&mut self) -> &mut EconomyLedger {
        &mut self.economy
    }
}

impl World {
    /// Initial state: incumbents hold their starting capital and no business.
    pub fn new(params: &Params, replication: u64, options: RunOptions) -> Result<Self> {
        params.validate()?;
        let p = params.clone();
        let n = p.regions as usize;
        let regions = partition_risks(p.risks as usize, n);
        let mut region_of = vec![0u16; p.risks as usize];
        for r in &regions {
            for i in r.risk_ids.clone() {
                region_of[i] = r.id as u16;
            }
        }
        let damage = p.damage_distribution();
        let damage_quantile = damage.quantile(1.0 - p.var_alpha);
        let value = p.risk_value;
        let policy_var = claim_amount(value, p.deductible_fraction * value, p.excess_fraction * value, damage_quantile);
        let models = model_set(p.diversity as usize, p.model_inaccuracy, p.var_alpha);
        let setting = p.diversity as usize;
        let key = |purpose| StreamKey::behavior(p.seed, replication, setting, purpose).stream();
        let streams = Streams {
            customers: key(Purpose::CustomerMatching),
            reinsurance: key(Purpose::ReinsuranceMatching),
            attachment: key(Purpose::Attachment),
            entry: key(Purpose::Entry),
        };
        let entry = EntryConfig {
            eta_insurer: p.entry_prob_insurer,
            eta_reinsurer: if p.reinsurance { p.entry_prob_reinsurer } else { 0.0 },
            capital_insurer: p.initial_capital_insurer,
            capital_reinsurer: p.initial_capital_reinsurer,
            initial_insurers: p.initial_insurers,
            initial_reinsurers: if p.reinsurance { p.initial_reinsurers } else { 0 },
        };
        let mut world = World {
            t: 0,
            firms: Vec::new(),
            policies: vec![PolicySlot::EMPTY; p.risks as usize],
            treaties: Vec::new(),
            treaty_active: Vec::new(),
            treaty_var: Vec::new(),
            live_treaties: Vec::new(),
            live_bonds: Vec::new(),
            pools: Vec::new(),
            bonds: Vec::new(),
            bond_active: Vec::new(),
            economy: EconomyLedger::new(p.economy_endowment),
            premium: PremiumState::from_params(&p),
            regions,
            region_of,
            models,
            damage,
            policy_var,
            policy_terms: (value, p.deductible_fraction * value, p.excess_fraction * value),
            rules: UnderwritingRules { mu: p.margin_of_safety, eta: p.balance_eta },
            entry,
            expiries: vec![Vec::new(); (p.t_max + p.contract_term + 2) as usize],
            active: Vec::new(),
            initial_money: 0.0,
            streams,
            options,
            metrics: StepMetrics::default(),
            record: RunRecord {
                setting: p.diversity,
                replication,
                burn_in: p.burn_in,
                steps: Vec::with_capacity(p.t_max as usize),
                events: Vec::new(),
                snapshots: Vec::new(),
                settlements: Vec::new(),
            },
            params: p,
        };
        for j in 0..world.entry.initial_insurers as usize {
            world.enter(FirmKind::Insurer, j % world.models.len())?;
        }
        for j in 0..world.entry.initial_reinsurers as usize {
            world.enter(FirmKind::Reinsurer, j % world.models.len())?;
        }
        world.initial_money = world.total_money();
        Ok(world)
    }

    /// Money held by firms, bond escrows and the economy.
    pub fn total_money(&self) -> f64 {
        let firms: f64 = self.active.iter().map(|&i| self.firms[i].capital).sum();
        let bonds: f64 = self.live_bonds.iter().map(|&b| self.bonds[b].remaining_principal).sum();
        self.economy.balance + firms + bonds
    }

    pub fn active_firms(&self) -> &[usize] {
        &self.active
    }

    pub fn active_of(&self, kind: FirmKind) -> Vec<usize> {
        self.active.iter().copied().filter(|&i| self.firms[i].kind == kind).collect()
    }

    pub fn uninsured_count(&self) -> usize {
        self.policies.iter().filter(|p| p.insurer == NO_INSURER).count()
    }

    pub fn region_of(&self, risk: usize) -> usize {
        self.region_of[risk] as usize
    }

    /// Gross single-event VaR of `count` policies.
    fn gross_var(&self, count: u32) -> f64 {
        count as f64 * self.policy_var
    }

    /// Largest possible claim of `count` policies.
    fn insured_value(&self, count: u32) -> f64 {
        let p = &self.params;
        count as f64 * (p.excess_fraction - p.deductible_fraction).max(0.0) * p.risk_value
    }

    fn net_var(&self, count: u32, cover: Option<HeldCover>) -> f64 {
        let gross = self.gross_var(count);
        match cover {
            Some(c) => gross - layer_recovery(gross, c.attachment, c.limit).min(c.capacity),
            None => gross,
        }
    }

    fn refresh_insurer_var(&mut self, firm: usize, region: usize) {
        let f = &self.firms[firm];
        let v = self.net_var(f.policy_count[region], f.cover[region]);
        self.firms[firm].regional_var[region] = v;
    }


    /// VaR of a layer on the cedent's current regional book.
    fn layer_var(&self, cedent: usize, region: usize, attachment: f64, limit: f64) -> f64 {
        layer_recovery(self.gross_var(self.firms[cedent].policy_count[region]), attachment, limit)
    }

    fn transfer(&mut self, from: Account, to: Account, amount: f64, category: FlowCategory) {
        ledger_transfer(self, from, to, amount, category).expect("transfer amounts are non-negative");
    }

    fn enter(&mut self, kind: FirmKind, model: usize) -> Result<usize> {
        let id = self.firms.len();
        let capital = match kind {
            FirmKind::Insurer => self.entry.capital_insurer,
            FirmKind::Reinsurer => self.entry.capital_reinsurer,
        };
        if self.economy.balance < capital {
            return Err(Error::Logic("economy cannot fund an entrant".into()));
        }
        self.firms.push(Firm::new(id, kind, 0.0, self.models[model], self.params.regions as usize, self.t));
        self.active.push(id);
        self.transfer(Account::Economy, Account::Firm(id), capital, FlowCategory::EntryCapital);
        Ok(id)
    }

    /// The policy on `risk`, if any.
    pub fn policy(&self, risk: usize) -> Option<InsurancePolicy> {
        let slot = self.policies[risk];
        if slot.insurer == NO_INSURER {
            return None;
        }
        let (value, deductible, excess) = self.policy_terms;
        Some(InsurancePolicy {
            insurer: slot.insurer as usize,
            risk_id: risk,
            region: self.region_of(risk),
            value,
            deductible,
            excess,
            premium: slot.premium,
            start: slot.start,
            term: self.params.contract_term,
        })
    }

    /// Places a policy at the current premium; no underwriting check.
    pub fn add_policy(&mut self, risk: usize, insurer: usize) {
        self.remove_policy(risk);
        let region = self.region_of(risk);
        let premium = self.premium.insurance * self.params.risk_value;
        self.policies[risk] = PolicySlot { insurer: insurer as u32, start: self.t, premium };
        self.expiries[(self.t + self.params.contract_term) as usize].push(risk as u32);
        let f = &mut self.firms[insurer];
        f.policy_count[region] += 1;
        f.premium_income += premium;
        self.refresh_insurer_var(insurer, region);
    }

    fn remove_policy(&mut self, risk: usize) {
        let slot = std::mem::replace(&mut self.policies[risk], PolicySlot::EMPTY);
        if slot.insurer == NO_INSURER {
            return;
        }
        let insurer = slot.insurer as usize;
        let region = self.region_of(risk);
        let f = &mut self.firms[insurer];
        f.policy_count[region] -= 1;
        f.premium_income -= slot.premium;
        if f.policy_count.iter().all(|&c| c == 0) {
            f.premium_income = 0.0;
        }
        self.refresh_insurer_var(insurer, region);
    }

    /// Regional insured value and the layer an insurer would ask cover for.
    fn layer_for(&self, insurer: usize, region: usize, attachment_fraction: f64) -> (f64, f64, f64) {
        let x = self.insured_value(self.firms[insurer].policy_count[region]);
        (x, attachment_fraction * x, self.params.treaty_limit_fraction * x)
    }

    fn expected_layer(&self, insurer: usize, region: usize, attachment: f64, limit: f64) -> f64 {
        let p = &self.params;
        let v = p.risk_value;
        let count = self.firms[insurer].policy_count[region] as f64;
        let (q, e) = (p.deductible_fraction * v, p.excess_fraction * v);
        if q == 0.0 && e >= v {
            // gross loss is linear in damage
            return expected_layer_loss(&self.damage, count * v, attachment, limit);
        }
        self.damage.expectation(256, |d| layer_recovery(count * claim_amount(v, q, e, d), attachment, limit))
    }

    /// Writes a treaty; no underwriting check.
    pub fn add_treaty(&mut self, cedent: usize, reinsurer: usize, region: usize, attachment_fraction: f64) -> usize {
        let (_, attachment, limit) = self.layer_for(cedent, region, attachment_fraction);
        let expected = self.expected_layer(cedent, region, attachment, limit);
        let premium = self.premium.loading(FirmKind::Reinsurer) * self.params.peril_rate * expected;
        let id = self.treaties.len();
        self.treaties.push(ReinsuranceTreaty {
            cedent,
            reinsurer,
            region,
            attachment,
            limit,
            premium,
            start: self.t,
            term: self.params.contract_term,
        });
        self.treaty_active.push(true);
        self.live_treaties.push(id);
        let var = self.layer_var(cedent, region, attachment, limit);
        self.treaty_var.push(var);
        self.firms[cedent].cover[region] = Some(HeldCover {
            contract: CoverContract::Treaty(id),
            attachment,
            limit,
            capacity: f64::INFINITY,
        });
        let r = &mut self.firms[reinsurer];
        r.premium_income += premium;
        r.policy_count[region] += 1;
        r.regional_var[region] += var;
        self.refresh_insurer_var(cedent, region);
        id
    }

    fn end_treaty(&mut self, id: usize) {
        if !self.treaty_active[id] {
            return;
        }
        self.treaty_active[id] = false;
        self.live_treaties.retain(|&i| i != id);
        let t = self.treaties[id];
        if self.firms[t.cedent].cover[t.region].map(|c| c.contract) == Some(CoverContract::Treaty(id)) {
            self.firms[t.cedent].cover[t.region] = None;
            self.refresh_insurer_var(t.cedent, t.region);
        }
        let r = &mut self.firms[t.reinsurer];
        r.premium_income = (r.premium_income - t.premium).max(0.0);
        r.policy_count[t.region] -= 1;
        r.regional_var[t.region] = if r.policy_count[t.region] == 0 {
            0.0
        } else {
            (r.regional_var[t.region] - self.treaty_var[id]).max(0.0)
        };
    }

    fn end_bond(&mut self, id: usize) {
        if !self.bond_active[id] {
            return;
        }
        let b = self.bonds[id];
        self.transfer(Account::Bond(id), Account::Economy, b.remaining_principal, FlowCategory::PrincipalOut);
        self.bond_active[id] = false;
        self.live_bonds.retain(|&i| i != id);
        if self.firms[b.issuer].cover[b.region].map(|c| c.contract) == Some(CoverContract::Bond(id)) {
            self.firms[b.issuer].cover[b.region] = None;
            self.refresh_insurer_var(b.issuer, b.region);
        }
    }

    /// Removes a firm from the market, voiding everything it is party to.
    fn terminate(&mut self, firm: usize, status: FirmStatus) {
        if !self.firms[firm].is_active() {
            return;
        }
        self.firms[firm].status = status;
        self.firms[firm].exited_at = Some(self.t);
        self.active.retain(|&i| i != firm);
        for risk in 0..self.policies.len() {
            if self.policies[risk].insurer == firm as u32 {
                self.remove_policy(risk);
            }
        }
        for id in self.live_treaties.clone() {
            if self.treaties[id].cedent == firm || self.treaties[id].reinsurer == firm {
                self.end_treaty(id);
            }
        }
        for id in self.live_bonds.clone() {
            if self.bonds[id].issuer == firm {
                self.end_bond(id);
            }
        }
        let capital = self.firms[firm].capital;
        if capital >= 0.0 {
            self.transfer(Account::Firm(firm), Account::Economy, capital, FlowCategory::ExitCapital);
        } else {
            self.transfer(Account::Economy, Account::Firm(firm), -capital, FlowCategory::ExitCapital);
        }
        let f = &mut self.firms[firm];
        f.premium_income = 0.0;
        f.regional_var.iter_mut().for_each(|v| *v = 0.0);
        f.cover.iter_mut().for_each(|c| *c = None);
    }

    /// Advances the world by one step, settling the given catastrophes.
    pub fn step(&mut self, events: &[CatastropheEvent]) {
        self.metrics = StepMetrics {
            t: self.t,
            firms_at_start: self.active.len() as u32,
            ..Default::default()
        };
        self.collect_cash();
        for e in events {
            self.settle(e);
        }
        self.pay_dividends();
        self.expire_and_renew();
        self.exits_and_entries();
        self.update_premiums();
        self.match_customers();
        if self.params.reinsurance {
            if self.params.cat_bonds {
                self.issue_bonds();
            }
            self.match_reinsurance();
        }
        self.finish_step();
        self.t += 1;
    }

    fn collect_cash(&mut self) {
        let rate = self.params.interest_rate;
        for k in 0..self.active.len() {
            let i = self.active[k];
            self.firms[i].flows = StepFlows::default();
            let interest = accrue_interest(&mut self.firms[i], rate);
            self.economy.balance -= interest;
            self.economy.flows[FlowCategory::Interest as usize] += interest;
            if self.firms[i].kind == FirmKind::Insurer {
                let premium = self.firms[i].premium_income;
                self.transfer(Account::Economy, Account::Firm(i), premium, FlowCategory::PolicyPremium);
                self.firms[i].flows.premiums += premium;
            }
        }
        for id in self.live_treaties.clone() {
            let t = self.treaties[id];
            if self.firms[t.cedent].capital >= t.premium {
                self.transfer(Account::Firm(t.cedent), Account::Firm(t.reinsurer), t.premium, FlowCategory::ReinsurancePremium);
                self.firms[t.cedent].flows.outward_premiums += t.premium;
                self.firms[t.reinsurer].flows.premiums += t.premium;
            } else {
                self.end_treaty(id);
            }
        }
        for id in self.live_bonds.clone() {
            let b = self.bonds[id];
            if self.firms[b.issuer].capital >= b.coupon {
                self.transfer(Account::Firm(b.issuer), Account::Economy, b.coupon, FlowCategory::Coupon);
                self.firms[b.issuer].flows.outward_premiums += b.coupon;
            } else {
                self.end_bond(id);
            }
        }
    }

    fn settle(&mut self, event: &CatastropheEvent) {
        let region = event.region as usize;
        self.record.events.push(EventRecord {
            t: event.time,
            region: event.region,
            total_damage_fraction: event.total_damage_fraction,
        });
        let losses = allocate_losses(event, &self.regions[region]).expect("profile damage lies in (0, 1]");
        let first = self.regions[region].risk_ids.start;
        let (value, deductible, excess) = self.policy_terms;
        let mut gross: Vec<GrossLoss> = Vec::new();
        for (k, &d) in losses.losses.iter().enumerate() {
            let insurer = self.policies[first + k].insurer;
            if insurer == NO_INSURER {
                continue;
            }
            let claim = claim_amount(value, deductible, excess, d);
            if claim <= 0.0 {
                continue;
            }
            let insurer = insurer as usize;
            match gross.iter_mut().find(|g| g.insurer == insurer) {
                Some(g) => {
                    g.amount += claim;
                    g.claims += 1;
                }
                None => gross.push(GrossLoss { insurer, amount: claim, claims: 1 }),
            }
        }
        gross.sort_by_key(|g| g.insurer);
        let covers: Vec<LayerCover> = gross
            .iter()
            .filter_map(|g| {
                let c = self.firms[g.insurer].cover[region]?;
                let provider = match c.contract {
                    CoverContract::Treaty(id) => CoverProvider::Reinsurer(self.treaties[id].reinsurer),
                    CoverContract::Bond(id) => CoverProvider::Bond { id, remaining: self.bonds[id].remaining_principal },
                };
                Some(LayerCover { cedent: g.insurer, attachment: c.attachment, limit: c.limit, provider })
            })
            .collect();
        let settlement = settle_event(event.time, region, &gross, &covers, |f| self.firms[f].capital);

        for rec in &settlement.records {
            let (from, category) = match rec.payer {
                Party::Firm(f) => (Account::Firm(f), if matches!(rec.payee, Party::Policyholders(_)) {
                    FlowCategory::PolicyClaim
                } else {
                    FlowCategory::Recovery
                }),
                Party::Bond(b) => (Account::Bond(b), FlowCategory::Recovery),
                Party::Policyholders(_) => unreachable!("policyholders never pay claims"),
            };
            let to = match rec.payee {
                Party::Firm(f) => Account::Firm(f),
                Party::Bond(b) => Account::Bond(b),
                Party::Policyholders(_) => Account::Economy,
            };
            self.transfer(from, to, rec.amount_paid, category);
            if let Party::Firm(f) = rec.payer {
                self.firms[f].flows.claims_paid += rec.amount_paid;
            }
            if let Party::Firm(f) = rec.payee {
                self.firms[f].flows.recoveries += rec.amount_paid;
            }
        }
        for &(id, _) in &settlement.bond_draws {
            let b = self.bonds[id];
            if let Some(c) = self.firms[b.issuer].cover[b.region].as_mut() {
                if c.contract == CoverContract::Bond(id) {
                    c.capacity = b.remaining_principal;
                }
            }
            self.refresh_insurer_var(b.issuer, b.region);
        }
        let (count, amount) = settlement.non_recovered();
        self.metrics.non_recovered_count += count;
        self.metrics.non_recovered_amount += amount;
        for &f in &settlement.bankrupt {
            if !self.firms[f].is_active() {
                continue;
            }
            self.metrics.defaults += 1;
            match self.firms[f].kind {
                FirmKind::Insurer => self.metrics.defaults_insurers += 1,
                FirmKind::Reinsurer => self.metrics.defaults_reinsurers += 1,
            }
            self.terminate(f, FirmStatus::ExitedBankrupt);
        }
        if self.options.log_settlements {
            self.record.settlements.extend(settlement.records);
        }
    }

    fn pay_dividends(&mut self) {
        let rho = self.params.dividend_share;
        for k in 0..self.active.len() {
            let i = self.active[k];
            let profit = self.firms[i].flows.profit();
            self.metrics.profit += profit;
            let dividend = pay_dividends(&mut self.firms[i], profit, rho);
            self.economy.balance += dividend;
            self.economy.flows[FlowCategory::Dividend as usize] += dividend;
            self.metrics.dividends += dividend;
        }
    }

    fn expire_and_renew(&mut self) {
        let due = std::mem::take(&mut self.expiries[self.t as usize]);
        for &risk in &due {
            let risk = risk as usize;
            let Some(p) = self.policy(risk) else { continue };
            if p.expires() != self.t {
                continue;
            }
            self.remove_policy(risk);
            let f = &self.firms[p.insurer];
            let candidate = self.net_var(f.policy_count[p.region] + 1, f.cover[p.region]);
            if underwriting_decision(f, p.region, candidate, &self.rules) {
                self.add_policy(risk, p.insurer);
            }
        }
        for id in self.live_treaties.clone() {
            if self.treaties[id].expires() <= self.t {
                self.end_treaty(id);
            }
        }
        for id in self.live_bonds.clone() {
            if self.bonds[id].expires() <= self.t {
                self.end_bond(id);
            }
        }
    }

    fn exits_and_entries(&mut self) {
        let p = &self.params;
        let mu = p.margin_of_safety;
        let (gi, ti, gr, tr) =
            (p.exit_threshold_insurer, p.exit_patience_insurer, p.exit_threshold_reinsurer, p.exit_patience_reinsurer);
        for i in self.active.clone() {
            let f = &mut self.firms[i];
            let share = f.employed_share(mu);
            let exit = match f.kind {
                FirmKind::Insurer => process_exit(f, share, gi, ti),
                FirmKind::Reinsurer => process_exit(f, share, gr, tr),
            };
            if exit {
                self.terminate(i, FirmStatus::ExitedUnderemployed);
                self.metrics.exits += 1;
            }
        }
        let entrants = process_entry(&self.entry, self.models.len(), &mut self.streams.entry);
        for (kind, model) in entrants {
            if self.enter(kind, model).is_ok() {
                self.metrics.entries += 1;
            }
        }
    }

    pub fn snapshot(&self) -> MarketSnapshot {
        let mut s = MarketSnapshot { uninsured: self.uninsured_count(), ..Default::default() };
        for &i in &self.active {
            let f = &self.firms[i];
            match f.kind {
                FirmKind::Insurer => {
                    s.capital_insurance += f.capital;
                    s.active_insurers += 1;
                }
                FirmKind::Reinsurer => {
                    s.capital_reinsurance += f.capital;
                    s.active_reinsurers += 1;
                }
            }
        }
        s
    }

    fn update_premiums(&mut self) {
        let s = self.snapshot();
        update_premium(&mut self.premium, FirmKind::Insurer, &s);
        update_premium(&mut self.premium, FirmKind::Reinsurer, &s);
    }

    fn match_customers(&mut self) {
        let insurers = self.active_of(FirmKind::Insurer);
        if insurers.is_empty() {
            return;
        }
        let mut pools = std::mem::take(&mut self.pools);
        pools.resize(self.regions.len(), Vec::new());
        for (r, region) in self.regions.iter().enumerate() {
            pools[r].clear();
            pools[r].extend(region.risk_ids.clone().filter(|&risk| self.policies[risk].insurer == NO_INSURER));
        }
        let mut rng = self.streams.customers.clone();
        match_customers(&mut pools, &insurers, &mut rng, |risk, insurer| {
            let region = self.region_of(risk);
            let f = &self.firms[insurer];
            let candidate = self.net_var(f.policy_count[region] + 1, f.cover[region]);
            let accept = underwriting_decision(f, region, candidate, &self.rules);
            if accept {
                self.add_policy(risk, insurer);
            }
            accept
        });
        self.streams.customers = rng;
        self.pools = pools;
    }

    fn seekers(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for &i in &self.active {
            let f = &self.firms[i];
            if f.kind != FirmKind::Insurer {
                continue;
            }
            for r in 0..f.policy_count.len() {
                if f.policy_count[r] > 0 && f.cover[r].is_none() {
                    out.push((i, r));
                }
            }
        }
        out
    }

    fn issue_bonds(&mut self) {
        let trigger = self.params.cat_bond_trigger;
        for (insurer, region) in self.seekers() {
            if self.firms[insurer].failed_searches[region] < trigger {
                continue;
            }
            let p = &self.params;
            let fraction = p.attachment_min + (p.attachment_max - p.attachment_min) * self.streams.attachment.gen::<f64>();
            let (_, attachment, limit) = self.layer_for(insurer, region, fraction);
            let loading = self.premium.loading(FirmKind::Reinsurer) + p.cat_bond_spread;
            let coupon = loading * p.peril_rate * self.expected_layer(insurer, region, attachment, limit);
            let bond = issue_cat_bond(
                insurer,
                true,
                self.firms[insurer].failed_searches[region],
                trigger,
                region,
                attachment,
                limit,
                coupon,
                self.t,
                p.contract_term,
            );
            let Ok(Some(mut bond)) = bond else { continue };
            if bond.principal > self.economy.balance {
                continue;
            }
            let id = self.bonds.len();
            bond.remaining_principal = 0.0;
            self.bonds.push(bond);
            self.bond_active.push(true);
            self.live_bonds.push(id);
            self.transfer(Account::Economy, Account::Bond(id), bond.principal, FlowCategory::PrincipalIn);
            let f = &mut self.firms[insurer];
            f.failed_searches[region] = 0;
            f.cover[region] = Some(HeldCover {
                contract: CoverContract::Bond(id),
                attachment,
                limit,
                capacity: bond.principal,
            });
            self.refresh_insurer_var(insurer, region);
        }
    }

    fn match_reinsurance(&mut self) {
        let seekers = self.seekers();
        if seekers.is_empty() {
            return;
        }
        let reinsurers = self.active_of(FirmKind::Reinsurer);
        let range = (self.params.attachment_min, self.params.attachment_max);
        let mut rng = self.streams.reinsurance.clone();
        let mut att = self.streams.attachment.clone();
        let requests = match_reinsurance(&seekers, &reinsurers, range, &mut rng, &mut att, |insurer, region, reinsurer, fraction| {
            let (_, attachment, limit) = self.layer_for(insurer, region, fraction);
            let r = &self.firms[reinsurer];
            let candidate = r.regional_var[region] + self.layer_var(insurer, region, attachment, limit);
            if underwriting_decision(r, region, candidate, &self.rules) {
                self.add_treaty(insurer, reinsurer, region, fraction);
                true
            } else {
                false
            }
        });
        self.streams.reinsurance = rng;
        self.streams.attachment = att;
        for req in requests {
            let f = &mut self.firms[req.insurer];
            if req.reinsurer.is_some() {
                f.failed_searches[req.region] = 0;
            } else {
                f.failed_searches[req.region] += 1;
            }
        }
    }

    fn finish_step(&mut self) {
        let mu = self.params.margin_of_safety;
        let s = self.snapshot();
        let total = self.total_money();
        let m = &mut self.metrics;
        m.premium_insurance = self.premium.insurance;
        m.premium_reinsurance = self.premium.reinsurance;
        m.capital_insurance = s.capital_insurance;
        m.capital_reinsurance = s.capital_reinsurance;
        m.insurers = s.active_insurers as u32;
        m.reinsurers = s.active_reinsurers as u32;
        m.uninsured = s.uninsured as u32;
        for &i in &self.active {
            let f = &self.firms[i];
            match f.kind {
                FirmKind::Insurer => m.free_capital_insurance += f.free_capital(mu),
                FirmKind::Reinsurer => m.free_capital_reinsurance += f.free_capital(mu),
            }
        }
        m.active_treaties = self.live_treaties.len() as u32;
        m.active_bonds = self.live_bonds.len() as u32;
        m.total_money = total;
        let drift = (total - self.initial_money).abs() / self.initial_money.abs().max(1.0);
        assert!(drift <= 1e-6, "money not conserved at step {}: drift {drift:e}", self.t);
        if self.params.snapshot_steps.contains(&self.t) {
            for &i in &self.active {
                let f = &self.firms[i];
                self.record.snapshots.push(CapitalSnapshot { t: self.t, firm: i, kind: f.kind, capital: f.capital });
            }
        }
        self.record.steps.push(std::mem::take(&mut self.metrics));
    }

    pub fn into_record(self) -> RunRecord {
        self.record
    }

    pub fn record(&self) -> &RunRecord {
        &self.record
    }
}

/// Runs all `t_max` steps against a prebuilt profile.
pub fn run_replication(params: &Params, profile: &EventProfile, options: RunOptions) -> Result<RunRecord> {
    let expected = ProfileParams::from(params);
    if profile.params != expected {
        return Err(Error::Logic("event profile was built with different peril parameters".into()));
    }
    let mut world = World::new(params, profile.replication_id, options)?;
    for t in 0..params.t_max {
        world.step(profile.events_at(t));
    }
    Ok(world.into_record())
}

/// Outcome of one (setting, replication) cell of an ensemble.
#[derive(Debug)]
pub struct EnsembleItem<T> {
    pub setting: u32,
    pub replication: u64,
    pub result: Result<T>,
}

/// Runs replications `0..replications` for every setting, in parallel over
/// replications. Each replication's event profile is built once and shared by
/// all settings. `reduce` turns a finished record into whatever the caller keeps.
pub fn run_ensemble_with<T, F>(
    base: &Params,
    settings: &[u32],
    replications: u64,
    options: RunOptions,
    reduce: F,
) -> Vec<EnsembleItem<T>>
where
    T: Send,
    F: Fn(RunRecord) -> Result<T> + Sync,
{
    let profile_params = ProfileParams::from(base);
    let per_rep: Vec<Vec<EnsembleItem<T>>> = (0..replications)
        .into_par_iter()
        .map(|rep| {
            let profile = build_event_profile(rep, &profile_params);
            settings
                .iter()
                .map(|&setting| {
                    let result = match &profile {
                        Err(e) => Err(Error::Logic(e.to_string())),
                        Ok(profile) => {
                            let mut params = base.clone();
                            params.diversity = setting;
                            catch_unwind(AssertUnwindSafe(|| {
                                run_replication(&params, profile, options).and_then(&reduce)
                            }))
                            .unwrap_or_else(|panic| Err(Error::Logic(panic_message(panic))))
                        }
                    };
                    EnsembleItem { setting, replication: rep, result }
                })
                .collect()
        })
        .collect();
    per_rep.into_iter().flatten().collect()
}

pub fn run_ensemble(base: &Params, settings: &[u32], replications: u64, options: RunOptions) -> Vec<EnsembleItem<RunRecord>> {
    run_ensemble_with(base, settings, replications, options, Ok)
}

fn panic_message(panic: Box<dyn std::any::Any + Send>) -> String {
    panic
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "replication panicked".into())
}
