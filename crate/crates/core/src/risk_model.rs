//! Imperfect per-region value-at-risk models and the underwriting rules built on them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::peril::TruncatedPareto;

/// A risk model that underestimates one region by `zeta` and overestimates
/// every other region by the same factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskModel {
    pub id: usize,
    pub underestimated_region: usize,
    pub zeta: f64,
    pub alpha: f64,
}

impl RiskModel {
    pub fn new(id: usize, underestimated_region: usize, zeta: f64, alpha: f64) -> Self {
        assert!(zeta >= 1.0, "zeta must be >= 1");
        assert!(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
        RiskModel {
            id,
            underestimated_region,
            zeta,
            alpha,
        }
    }

    /// Multiplier applied to true VaR in `region`.
    #[inline]
    pub fn factor(&self, region: usize) -> f64 {
        if region == self.underestimated_region {
            1.0 / self.zeta
        } else {
            self.zeta
        }
    }
}

/// The `n` models of identical quality: model `m` underestimates region `m`.
pub fn model_set(regions: usize, zeta: f64, alpha: f64) -> Vec<RiskModel> {
    (0..regions).map(|m| RiskModel::new(m, m, zeta, alpha)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionalExposure {
    pub region: usize,
    /// Insured value after deductibles and excess caps.
    pub insured_value: f64,
    pub contract_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaRReport {
    pub per_region: Vec<f64>,
    pub combined: f64,
}

impl VaRReport {
    pub fn new(per_region: Vec<f64>) -> Result<Self> {
        let combined = combined_var(&per_region)?;
        Ok(VaRReport {
            per_region,
            combined,
        })
    }
}

/// Single-event VaR of an exposure: the damage quantile at `1 - alpha` times the insured value.
pub fn true_regional_var(exposure: &RegionalExposure, alpha: f64, damage: &TruncatedPareto) -> f64 {
    damage.quantile(1.0 - alpha) * exposure.insured_value
}

#[inline]
pub fn perceived_regional_var(model: &RiskModel, region: usize, true_var: f64) -> f64 {
    model.factor(region) * true_var
}

/// Combines regional VaRs with a maximum (catastrophes rarely coincide).
pub fn combined_var(per_region: &[f64]) -> Result<f64> {
    if per_region.is_empty() {
        return Err(Error::Logic("combined VaR of zero regions".into()));
    }
    Ok(per_region.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[inline]
pub fn capital_sufficient(capital: f64, mu: f64, combined_var: f64) -> bool {
    capital >= mu * combined_var
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Portfolio balance rule: accept when the candidate portfolio is no less
/// balanced than the current one, or when its imbalance is small relative to
/// capital (`std < eta * capital / n`).
pub fn balance_check(current: &[f64], candidate: &[f64], capital: f64, eta: f64, n: usize) -> bool {
    let after = std_dev(candidate);
    after <= std_dev(current) || after < eta * capital / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn damage() -> TruncatedPareto {
        TruncatedPareto::new(2.0, 0.25, 1.0)
    }

    fn exposure(v: f64) -> RegionalExposure {
        RegionalExposure { region: 0, insured_value: v, contract_count: 1 }
    }

    #[test]
    fn var_limits_follow_truncation() {
        assert!((true_regional_var(&exposure(10.0), 1.0 - 1e-12, &damage()) - 2.5).abs() < 1e-9);
        assert!((true_regional_var(&exposure(10.0), 1e-12, &damage()) - 10.0).abs() < 1e-9);
    }

    #[test]
    fn var_at_half_percent() {
        // P(D > x) = (x^-2 - 1) / 15 = 0.005  =>  x = 1.075^-1/2
        let q = true_regional_var(&exposure(1.0), 0.005, &damage());
        assert!((q - 1.075f64.powf(-0.5)).abs() < 1e-12);
    }

    #[test]
    fn perceived_var_examples() {
        let m = RiskModel::new(0, 1, 2.0, 0.005);
        assert_eq!(perceived_regional_var(&m, 1, 100.0), 50.0);
        assert_eq!(perceived_regional_var(&m, 0, 100.0), 200.0);
        let exact = RiskModel::new(0, 1, 1.0, 0.005);
        for r in 0..4 {
            assert_eq!(perceived_regional_var(&exact, r, 37.5), 37.5);
        }
    }

    #[test]
    fn combined_is_max() {
        assert_eq!(combined_var(&[10.0, 40.0, 20.0, 5.0]).unwrap(), 40.0);
        assert_eq!(combined_var(&[7.0; 4]).unwrap(), 7.0);
        assert!(combined_var(&[]).is_err());
        assert_eq!(VaRReport::new(vec![1.0, 3.0]).unwrap().combined, 3.0);
    }

    #[test]
    fn capital_boundary() {
        assert!(capital_sufficient(200.0, 2.0, 100.0));
        assert!(!capital_sufficient(199.0, 2.0, 100.0));
        assert!(capital_sufficient(100.0, 1.0, 100.0));
        assert!(!capital_sufficient(100.0, 2.0, 100.0));
    }

    // Vectors with a prescribed population std: [m-s, m+s] has std s.
    fn with_std(s: f64) -> Vec<f64> {
        vec![100.0 - s, 100.0 + s]
    }

    #[test]
    fn balance_examples() {
        // strictly more balanced
        assert!(balance_check(&with_std(9.0), &with_std(5.0), 0.0, 0.1, 4));
        // less balanced but under eta * k / n = 0.1 * 1000 / 4 = 25
        assert!(balance_check(&with_std(5.0), &with_std(9.0), 1000.0, 0.1, 4));
        assert!(!balance_check(&with_std(5.0), &with_std(30.0), 1000.0, 0.1, 4));
    }

    #[test]
    fn every_model_has_same_factor_product() {
        let models = model_set(4, 2.0, 0.005);
        for m in &models {
            let product: f64 = (0..4).map(|r| m.factor(r)).product();
            assert!((product - 2f64.powi(3) / 2.0).abs() < 1e-12);
        }
        let under: Vec<usize> = models.iter().map(|m| m.underestimated_region).collect();
        assert_eq!(under, vec![0, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn perceived_is_linear(v in 0.0f64..1e9, c in 0.0f64..100.0, region in 0usize..4) {
            let m = RiskModel::new(0, 2, 2.0, 0.005);
            let lhs = perceived_regional_var(&m, region, c * v);
            let rhs = c * perceived_regional_var(&m, region, v);
            prop_assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(1.0));
            prop_assert!(perceived_regional_var(&m, region, v + 1.0) > perceived_regional_var(&m, region, v));
        }

        #[test]
        fn combined_between_max_and_sum(xs in proptest::collection::vec(0.0f64..1e6, 1..8)) {
            let c = combined_var(&xs).unwrap();
            prop_assert!(xs.iter().all(|&x| x <= c));
            prop_assert!(c <= xs.iter().sum::<f64>() + 1e-9);
        }

        #[test]
        fn more_capital_never_hurts(k in 0.0f64..1e7, extra in 0.0f64..1e7, var in 0.0f64..1e6, mu in 1.0f64..3.0) {
            if capital_sufficient(k, mu, var) {
                prop_assert!(capital_sufficient(k + extra, mu, var));
            }
        }

        #[test]
        fn zero_eta_is_pure_improvement(
            a in proptest::collection::vec(0.0f64..1e4, 4),
            b in proptest::collection::vec(0.0f64..1e4, 4),
            k in 0.0f64..1e7,
        ) {
            prop_assert_eq!(balance_check(&a, &b, k, 0.0, 4), std_dev(&b) <= std_dev(&a));
        }
    }
}
