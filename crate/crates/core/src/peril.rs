//! Catastrophe schedules.
//!
//! Event times, sizes and allocation seeds are drawn up front from streams
//! keyed only by the replication and region, so the same schedule replays
//! under every diversity setting.

use std::io::{BufRead, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Params;
use crate::error::{Error, Result};
use crate::rng::{open01, Purpose, StreamKey};

pub const PROFILE_FORMAT: &str = "catrisk-event-profile";
pub const PROFILE_VERSION: u32 = 1;

/// Pareto density `sigma / x^(sigma+1)` restricted to `[lo, hi]` and renormalized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruncatedPareto {
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedPareto {
    pub fn new(sigma: f64, lo: f64, hi: f64) -> Self {
        assert!(sigma > 0.0 && lo > 0.0 && lo < hi, "invalid truncated Pareto");
        TruncatedPareto { sigma, lo, hi }
    }

    fn span(&self) -> f64 {
        self.lo.powf(-self.sigma) - self.hi.powf(-self.sigma)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lo {
            0.0
        } else if x >= self.hi {
            1.0
        } else {
            (self.lo.powf(-self.sigma) - x.powf(-self.sigma)) / self.span()
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if x < self.lo || x > self.hi {
            0.0
        } else {
            self.sigma * x.powf(-self.sigma - 1.0) / self.span()
        }
    }

    /// Inverse CDF on `[0, 1]`.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        let inner = self.lo.powf(-self.sigma) - p * self.span();
        inner.powf(-1.0 / self.sigma).clamp(self.lo, self.hi)
    }

    pub fn mean(&self) -> f64 {
        let s = self.sigma;
        if (s - 1.0).abs() < 1e-12 {
            (self.hi / self.lo).ln() / (1.0 / self.lo - 1.0 / self.hi)
        } else {
            s / (s - 1.0) * (self.lo.powf(1.0 - s) - self.hi.powf(1.0 - s)) / self.span()
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.gen::<f64>())
    }

    /// `P(D > x)` integrated over `[a, b]`; equals `E[min(max(D - a, 0), b - a)]`.
    pub fn integrated_survival(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        let s = self.sigma;
        let below = (b.min(self.lo) - a).max(0.0);
        let (x0, x1) = (a.max(self.lo), b.min(self.hi));
        if x1 <= x0 {
            return below;
        }
        let antiderivative = |x: f64| {
            let power = if (s - 1.0).abs() < 1e-12 { x.ln() } else { x.powf(1.0 - s) / (1.0 - s) };
            power - self.hi.powf(-s) * x
        };
        below + (antiderivative(x1) - antiderivative(x0)) / self.span()
    }

    /// `E[g(D)]` by composite Simpson quadrature on the support.
    pub fn expectation(&self, intervals: usize, g: impl Fn(f64) -> f64) -> f64 {
        let m = intervals.max(2) & !1;
        let h = (self.hi - self.lo) / m as f64;
        let f = |x: f64| g(x) * self.pdf(x);
        let mut acc = f(self.lo) + f(self.hi);
        for i in 1..m {
            let x = self.lo + h * i as f64;
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
        }
        acc * h / 3.0
    }
}

/// Contiguous block of risk indices hit together by a catastrophe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PerilRegion {
    pub id: usize,
    pub risk_ids: Range<usize>,
}

impl PerilRegion {
    pub fn len(&self) -> usize {
        self.risk_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.risk_ids.is_empty()
    }
}

/// Splits `risks` indices into `regions` blocks whose sizes differ by at most one.
pub fn partition_risks(risks: usize, regions: usize) -> Vec<PerilRegion> {
    (0..regions)
        .map(|r| PerilRegion {
            id: r,
            risk_ids: (r * risks / regions)..((r + 1) * risks / regions),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CatastropheEvent {
    pub region: u32,
    pub time: u32,
    /// Share of the region's insured value destroyed, in `[damage_min, damage_max]`.
    pub total_damage_fraction: f64,
    pub allocation_seed: u64,
}

/// The inputs an event schedule depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileParams {
    pub master_seed: u64,
    pub peril_rate: f64,
    pub pareto_sigma: f64,
    pub damage_min: f64,
    pub damage_max: f64,
    pub regions: u32,
    pub t_max: u32,
}

impl From<&Params> for ProfileParams {
    fn from(p: &Params) -> Self {
        ProfileParams {
            master_seed: p.seed,
            peril_rate: p.peril_rate,
            pareto_sigma: p.pareto_sigma,
            damage_min: p.damage_min,
            damage_max: p.damage_max,
            regions: p.regions,
            t_max: p.t_max,
        }
    }
}

impl ProfileParams {
    fn validate(&self) -> Result<()> {
        if !(self.peril_rate >= 0.0 && self.peril_rate.is_finite()) {
            return Err(Error::config("peril_rate", "must be finite and >= 0"));
        }
        if self.pareto_sigma <= 0.0 {
            return Err(Error::config("pareto_sigma", "must be > 0"));
        }
        if !(self.damage_min > 0.0 && self.damage_min < self.damage_max && self.damage_max <= 1.0) {
            return Err(Error::config("damage_min", "need 0 < damage_min < damage_max <= 1"));
        }
        if self.regions == 0 {
            return Err(Error::config("regions", "must be at least 1"));
        }
        Ok(())
    }

    pub fn damage_distribution(&self) -> TruncatedPareto {
        TruncatedPareto::new(self.pareto_sigma, self.damage_min, self.damage_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventProfile {
    pub replication_id: u64,
    pub params: ProfileParams,
    /// Sorted by time, then region.
    pub events: Vec<CatastropheEvent>,
}

impl EventProfile {
    /// Events falling in step `t` (ascending region order).
    pub fn events_at(&self, t: u32) -> &[CatastropheEvent] {
        let start = self.events.partition_point(|e| e.time < t);
        let end = self.events.partition_point(|e| e.time <= t);
        &self.events[start..end]
    }

    /// Per-step total damage fraction of one region; zero where nothing happened.
    pub fn damage_series(&self, region: u32) -> Vec<f64> {
        let mut out = vec![0.0; self.params.t_max as usize];
        for e in self.events.iter().filter(|e| e.region == region) {
            out[e.time as usize] = e.total_damage_fraction;
        }
        out
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Header<'a> {
            format: &'a str,
            version: u32,
            replication_id: u64,
            params: &'a ProfileParams,
            events: usize,
        }
        let header = Header {
            format: PROFILE_FORMAT,
            version: PROFILE_VERSION,
            replication_id: self.replication_id,
            params: &self.params,
            events: self.events.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for e in &self.events {
            serde_json::to_writer(&mut w, e)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
            replication_id: u64,
            params: ProfileParams,
            events: usize,
        }
        let bad = |reason: String| Error::Parse {
            path: "<event profile>".into(),
            reason,
        };
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| bad("empty profile".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let header: Header = serde_json::from_str(&first).map_err(|e| bad(e.to_string()))?;
        if header.format != PROFILE_FORMAT || header.version != PROFILE_VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut events = Vec::with_capacity(header.events);
        for line in lines {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            events.push(serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?);
        }
        if events.len() != header.events {
            return Err(bad(format!(
                "header announces {} events, found {}",
                header.events,
                events.len()
            )));
        }
        Ok(EventProfile {
            replication_id: header.replication_id,
            params: header.params,
            events,
        })
    }
}

/// Per-risk damage fractions of one event, indexed like `region.risk_ids`.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualLossVector {
    pub region: usize,
    pub losses: Vec<f64>,
}

/// Step indices of a Poisson process with rate `lambda` on `[0, t_max)`.
/// Several arrivals inside one step produce repeated indices.
pub fn draw_event_times<R: Rng + ?Sized>(lambda: f64, t_max: u32, stream: &mut R) -> Vec<u32> {
    let mut times = Vec::new();
    if lambda <= 0.0 || t_max == 0 {
        return times;
    }
    let horizon = t_max as f64;
    let mut clock = 0.0;
    loop {
        clock += -open01(stream).ln() / lambda;
        if clock >= horizon {
            break;
        }
        times.push(clock as u32);
    }
    times
}

pub fn draw_total_damage<R: Rng + ?Sized>(dist: &TruncatedPareto, stream: &mut R) -> f64 {
    dist.sample(stream)
}

/// Draws `d_i ~ Beta(1, h)` with `h = 1/L - 1` for every risk in the region,
/// so the expected per-risk damage equals the event's total damage fraction.
pub fn allocate_losses(event: &CatastropheEvent, region: &PerilRegion) -> Result<IndividualLossVector> {
    let total = event.total_damage_fraction;
    if !(total > 0.0 && total <= 1.0) {
        return Err(Error::Logic(format!(
            "total damage fraction {total} outside (0, 1]"
        )));
    }
    let losses = if total >= 1.0 {
        vec![1.0; region.len()]
    } else {
        let inv_h = 1.0 / (1.0 / total - 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(event.allocation_seed);
        (0..region.len())
            .map(|_| {
                // inverse CDF of Beta(1, h): 1 - (1 - u)^(1/h)
                let u: f64 = rng.gen();
                1.0 - (1.0 - u).powf(inv_h)
            })
            .collect()
    };
    Ok(IndividualLossVector {
        region: region.id,
        losses,
    })
}

/// Builds the full schedule of one replication.
pub fn build_event_profile(replication_id: u64, params: &ProfileParams) -> Result<EventProfile> {
    params.validate()?;
    let dist = params.damage_distribution();
    let mut events = Vec::new();
    for region in 0..params.regions as usize {
        let key = |purpose| StreamKey::peril(params.master_seed, replication_id, region, purpose);
        let times = draw_event_times(params.peril_rate, params.t_max, &mut key(Purpose::EventTimes).stream());
        let mut damage_rng = key(Purpose::EventDamage).stream();
        let mut region_events: Vec<CatastropheEvent> = Vec::new();
        for (ordinal, time) in times.into_iter().enumerate() {
            let damage = draw_total_damage(&dist, &mut damage_rng);
            match region_events.last_mut() {
                Some(last) if last.time == time => {
                    last.total_damage_fraction = (last.total_damage_fraction + damage).min(params.damage_max);
                }
                _ => {
                    let allocation_seed = key(Purpose::Allocation)
                        .with_index(ordinal as u64)
                        .stream()
                        .gen::<u64>();
                    region_events.push(CatastropheEvent {
                        region: region as u32,
                        time,
                        total_damage_fraction: damage,
                        allocation_seed,
                    });
                }
            }
        }
        events.extend(region_events);
    }
    events.sort_by_key(|e| (e.time, e.region));
    Ok(EventProfile {
        replication_id,
        params: params.clone(),
        events,
    })
}

/// Probability that two or more of `n` regions are hit in the same step.
pub fn coincidence_probability(lambda: f64, n: u32) -> f64 {
    let quiet = (-lambda).exp();
    let n = n as f64;
    1.0 - quiet.powf(n) - n * (1.0 - quiet) * quiet.powf(n - 1.0)
}
