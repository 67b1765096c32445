//! Two insurers and one reinsurer facing a single total-loss catastrophe,
//! checked against claims and layer recoveries computed by hand.

use catrisk::contracts::layer_recovery;
use catrisk::firms::FirmKind;
use catrisk::peril::CatastropheEvent;
use catrisk::simulation::{RunOptions, World};
use catrisk::Params;

fn params() -> Params {
    let mut p = Params::default();
    p.t_max = 10;
    p.burn_in = 0;
    p.risks = 8;
    p.regions = 2;
    p.diversity = 1;
    p.initial_insurers = 2;
    p.initial_reinsurers = 1;
    p.initial_capital_insurer = 1.0e6;
    p.initial_capital_reinsurer = 1.0e7;
    p.entry_prob_insurer = 0.0;
    p.entry_prob_reinsurer = 0.0;
    p.dividend_share = 0.0;
    p.cat_bonds = false;
    p.peril_rate = 0.0;
    p
}

fn capitals(w: &World) -> Vec<f64> {
    w.firms.iter().map(|f| f.capital).collect()
}

#[test]
fn total_loss_event_settles_by_hand() {
    let p = params();
    let mut quiet = World::new(&p, 0, RunOptions::default()).unwrap();
    let mut hit = World::new(&p, 0, RunOptions::default()).unwrap();
    quiet.step(&[]);
    hit.step(&[]);
    assert_eq!(capitals(&quiet), capitals(&hit));
    assert_eq!(quiet.uninsured_count(), 0, "ample capital insures every risk");

    // claims per insurer in region 0, and the layer each holds there
    let insurers: Vec<usize> = (0..hit.firms.len()).filter(|&i| hit.firms[i].kind == FirmKind::Insurer).collect();
    let reinsurer = (0..hit.firms.len()).find(|&i| hit.firms[i].kind == FirmKind::Reinsurer).unwrap();
    let region0: Vec<usize> = (0..p.risks as usize).filter(|&r| hit.region_of(r) == 0).collect();
    let mut gross = vec![0.0; hit.firms.len()];
    for &r in &region0 {
        gross[hit.policy(r).unwrap().insurer] += p.risk_value;
    }
    let mut recovery = vec![0.0; hit.firms.len()];
    for (k, t) in hit.treaties.iter().enumerate() {
        if hit.treaty_active[k] && t.region == 0 {
            assert_eq!(t.reinsurer, reinsurer);
            recovery[t.cedent] += layer_recovery(gross[t.cedent], t.attachment, t.limit);
        }
    }
    assert!(recovery.iter().any(|&x| x > 0.0), "the scenario should exercise a treaty");

    let event = CatastropheEvent { time: 1, region: 0, total_damage_fraction: 1.0, allocation_seed: 99 };
    quiet.step(&[]);
    hit.step(&[event]);
    let (before, after) = (capitals(&quiet), capitals(&hit));
    for &i in &insurers {
        let expected = before[i] - gross[i] + recovery[i];
        assert!((after[i] - expected).abs() < 1e-6, "insurer {i}: {} vs {expected}", after[i]);
    }
    let paid: f64 = recovery.iter().sum();
    assert!((after[reinsurer] - (before[reinsurer] - paid)).abs() < 1e-6);
    assert_eq!(hit.record().steps[1].defaults, 0);
    assert_eq!(hit.record().steps[1].non_recovered_count, 0);
    assert!((hit.total_money() - quiet.total_money()).abs() < 1e-6 * quiet.total_money());
}

#[test]
fn insolvent_insurer_defaults_and_leaves_claims_unpaid() {
    let mut p = params();
    p.reinsurance = false;
    let mut w = World::new(&p, 0, RunOptions::default()).unwrap();
    w.step(&[]);
    let region0: Vec<usize> = (0..p.risks as usize).filter(|&r| w.region_of(r) == 0).collect();
    let owed = |w: &World, i: usize| {
        region0.iter().filter(|&&r| w.policy(r).map(|q| q.insurer) == Some(i)).count() as f64 * p.risk_value
    };
    let victim = (0..w.firms.len()).find(|&i| owed(&w, i) > 0.0).unwrap();
    let claims = owed(&w, victim);
    // a capital hole left by earlier losses, moved to the economy so money stays conserved
    let hole = w.firms[victim].capital - claims / 4.0;
    w.firms[victim].capital -= hole;
    w.economy.balance += hole;
    let money = w.total_money();

    w.step(&[CatastropheEvent { time: 1, region: 0, total_damage_fraction: 1.0, allocation_seed: 5 }]);
    let step = &w.record().steps[1];
    assert_eq!(step.defaults, 1);
    assert!(!w.firms[victim].is_active());
    // interest is credited before claims fall due
    let unpaid = claims - claims / 4.0 * (1.0 + p.interest_rate);
    assert!((step.non_recovered_amount - unpaid).abs() < 1e-6, "{} vs {unpaid}", step.non_recovered_amount);
    assert!((w.total_money() - money).abs() < 1e-6 * money);
}
