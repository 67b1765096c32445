//! Run parameters.
//!
//! The on-disk format is flat `key = value` text (TOML syntax, no tables).
//! Every key is optional; missing keys take the standard values below.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peril::TruncatedPareto;

/// Every tunable of a run. Field names double as configuration keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Params {
    /// Number of simulated steps (months).
    pub t_max: u32,
    /// Leading steps excluded from statistics.
    pub burn_in: u32,
    /// Replications per diversity setting.
    pub replications: u32,
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    /// Number of distinct risk models in use (1..=regions).
    pub diversity: u32,

    /// Capital must cover this multiple of the combined value-at-risk.
    pub margin_of_safety: f64,
    /// Exceedance probability of the value-at-risk.
    pub var_alpha: f64,
    /// Distortion factor of the risk models.
    pub model_inaccuracy: f64,
    /// Tolerance of the portfolio balance rule (share of capital per region).
    pub balance_eta: f64,

    pub dividend_share: f64,
    /// Interest on capital per step.
    pub interest_rate: f64,
    pub initial_capital_insurer: f64,
    pub initial_capital_reinsurer: f64,
    pub initial_insurers: u32,
    pub initial_reinsurers: u32,
    /// Per-step probability that one insurer enters.
    pub entry_prob_insurer: f64,
    /// Per-step probability that one reinsurer enters.
    pub entry_prob_reinsurer: f64,
    pub exit_threshold_insurer: f64,
    pub exit_patience_insurer: u32,
    pub exit_threshold_reinsurer: f64,
    pub exit_patience_reinsurer: u32,

    /// Catastrophe rate per region per step.
    pub peril_rate: f64,
    /// Tail exponent of the total-damage density.
    pub pareto_sigma: f64,
    pub damage_min: f64,
    pub damage_max: f64,
    pub regions: u32,
    pub risks: u32,

    /// Monetary value of one insurable risk.
    pub risk_value: f64,
    /// Policy deductible as a share of the risk value.
    pub deductible_fraction: f64,
    /// Policy cover cap as a share of the risk value.
    pub excess_fraction: f64,
    pub contract_term: u32,
    pub attachment_min: f64,
    pub attachment_max: f64,
    /// Treaty limit as a share of the cedent's regional insured value.
    pub treaty_limit_fraction: f64,
    /// CAT bond coupon loading over the reinsurance rate, in units of the fair premium.
    pub cat_bond_spread: f64,
    /// Consecutive failed reinsurance searches before a CAT bond is issued.
    pub cat_bond_trigger: u32,

    pub min_premium_factor: f64,
    pub max_premium_factor: f64,
    pub sensitivity_insurance: f64,
    pub sensitivity_reinsurance: f64,
    /// Divides the capital term of the premium equation.
    pub premium_normalizer: f64,

    pub reinsurance: bool,
    pub cat_bonds: bool,
    pub economy_endowment: f64,
    /// Steps at which per-firm capital is recorded.
    pub snapshot_steps: Vec<u32>,
}

impl Default for Params {
    fn default() -> Self {
        Params {
            t_max: 4000,
            burn_in: 1200,
            replications: 400,
            seed: 20_190_101,
            diversity: 1,

            margin_of_safety: 2.0,
            var_alpha: 0.005,
            model_inaccuracy: 2.0,
            balance_eta: 0.1,

            dividend_share: 0.4,
            interest_rate: 0.001,
            initial_capital_insurer: 80_000.0,
            initial_capital_reinsurer: 2_000_000.0,
            initial_insurers: 20,
            initial_reinsurers: 4,
            entry_prob_insurer: 0.3,
            entry_prob_reinsurer: 0.05,
            exit_threshold_insurer: 0.6,
            exit_patience_insurer: 24,
            exit_threshold_reinsurer: 0.4,
            exit_patience_reinsurer: 48,

            peril_rate: 0.03,
            pareto_sigma: 2.0,
            damage_min: 0.25,
            damage_max: 1.0,
            regions: 4,
            risks: 20_000,

            risk_value: 1_000.0,
            deductible_fraction: 0.0,
            excess_fraction: 1.0,
            contract_term: 12,
            attachment_min: 0.25,
            attachment_max: 0.30,
            treaty_limit_fraction: 1.0,
            cat_bond_spread: 0.02,
            cat_bond_trigger: 5,

            min_premium_factor: 0.70,
            max_premium_factor: 1.35,
            sensitivity_insurance: 1.29e-9,
            sensitivity_reinsurance: 1.55e-9,
            premium_normalizer: 1.0,

            reinsurance: true,
            cat_bonds: true,
            economy_endowment: 2.0e9,
            snapshot_steps: vec![1000],
        }
    }
}

impl Params {
    /// Parses flat key-value text; missing keys default, unknown keys fail.
    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Parse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        let known = Params::default().to_table();
        for (key, value) in &table {
            if !known.contains_key(key) {
                return Err(Error::UnknownKey(key.clone()));
            }
            if value.is_table() {
                return Err(Error::config(key, "nested tables are not allowed"));
            }
        }
        let params: Params = table.try_into().map_err(|e: toml::de::Error| Error::Parse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        params.validate()?;
        Ok(params)
    }

    fn to_table(&self) -> toml::Table {
        toml::Table::try_from(self).expect("params serialize to a flat table")
    }

    /// Resolved parameters as flat key-value text, every key present.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("params serialize")
    }

    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, key: &str, reason: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::config(key, reason))
            }
        }
        let prob = |x: f64| (0.0..=1.0).contains(&x);

        check(self.t_max >= 1, "t_max", "must be at least 1")?;
        check(self.burn_in <= self.t_max, "burn_in", "must not exceed t_max")?;
        check(self.replications >= 1, "replications", "must be at least 1")?;
        check((1..=64).contains(&self.regions), "regions", "must lie in 1..=64")?;
        check(
            (1..=self.regions).contains(&self.diversity),
            "diversity",
            "must lie in 1..=regions",
        )?;
        check(self.risks >= self.regions, "risks", "need at least one risk per region")?;

        check(self.margin_of_safety >= 1.0, "margin_of_safety", "must be >= 1")?;
        check(
            self.var_alpha > 0.0 && self.var_alpha < 1.0,
            "var_alpha",
            "must lie in (0, 1)",
        )?;
        check(self.model_inaccuracy >= 1.0, "model_inaccuracy", "must be >= 1")?;
        check(self.balance_eta >= 0.0, "balance_eta", "must be >= 0")?;

        check(prob(self.dividend_share), "dividend_share", "must lie in [0, 1]")?;
        check(self.interest_rate >= 0.0, "interest_rate", "must be >= 0")?;
        check(self.initial_capital_insurer > 0.0, "initial_capital_insurer", "must be > 0")?;
        check(
            self.initial_capital_reinsurer > self.initial_capital_insurer,
            "initial_capital_reinsurer",
            "must exceed initial_capital_insurer",
        )?;
        check(prob(self.entry_prob_insurer), "entry_prob_insurer", "must lie in [0, 1]")?;
        check(prob(self.entry_prob_reinsurer), "entry_prob_reinsurer", "must lie in [0, 1]")?;
        check(prob(self.exit_threshold_insurer), "exit_threshold_insurer", "must lie in [0, 1]")?;
        check(
            prob(self.exit_threshold_reinsurer),
            "exit_threshold_reinsurer",
            "must lie in [0, 1]",
        )?;
        check(self.exit_patience_insurer >= 1, "exit_patience_insurer", "must be >= 1")?;
        check(self.exit_patience_reinsurer >= 1, "exit_patience_reinsurer", "must be >= 1")?;

        check(self.peril_rate >= 0.0 && self.peril_rate.is_finite(), "peril_rate", "must be >= 0")?;
        check(self.pareto_sigma > 0.0, "pareto_sigma", "must be > 0")?;
        check(
            self.damage_min > 0.0 && self.damage_min < self.damage_max,
            "damage_min",
            "must lie in (0, damage_max)",
        )?;
        check(self.damage_max <= 1.0, "damage_max", "must be <= 1")?;

        check(self.risk_value > 0.0, "risk_value", "must be > 0")?;
        check(
            self.deductible_fraction >= 0.0 && self.deductible_fraction < self.excess_fraction,
            "deductible_fraction",
            "must lie in [0, excess_fraction)",
        )?;
        check(self.excess_fraction <= 1.0, "excess_fraction", "must be <= 1")?;
        check(self.contract_term >= 1, "contract_term", "must be >= 1")?;
        check(
            self.attachment_min > 0.0 && self.attachment_min <= self.attachment_max,
            "attachment_min",
            "must lie in (0, attachment_max]",
        )?;
        check(
            self.treaty_limit_fraction > self.attachment_max,
            "treaty_limit_fraction",
            "must exceed attachment_max",
        )?;
        check(self.cat_bond_spread >= 0.0, "cat_bond_spread", "must be >= 0")?;
        check(self.cat_bond_trigger >= 1, "cat_bond_trigger", "must be >= 1")?;

        check(
            self.min_premium_factor > 0.0 && self.min_premium_factor <= self.max_premium_factor,
            "min_premium_factor",
            "must lie in (0, max_premium_factor]",
        )?;
        check(self.sensitivity_insurance >= 0.0, "sensitivity_insurance", "must be >= 0")?;
        check(self.sensitivity_reinsurance >= 0.0, "sensitivity_reinsurance", "must be >= 0")?;
        check(self.premium_normalizer > 0.0, "premium_normalizer", "must be > 0")?;
        check(self.economy_endowment > 0.0, "economy_endowment", "must be > 0")?;
        Ok(())
    }

    pub fn damage_distribution(&self) -> TruncatedPareto {
        TruncatedPareto::new(self.pareto_sigma, self.damage_min, self.damage_max)
    }

    /// Premium per unit of insured value per step that offsets expected damage.
    pub fn fair_premium(&self) -> f64 {
        self.peril_rate * self.damage_distribution().mean()
    }
}

/// Reads and validates a parameter file.
pub fn load_config(path: &Path) -> Result<Params> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Params::from_toml_str(&text, path)
}
