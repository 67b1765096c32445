//! Post-processing of run records: bankruptcy cascades, the semi-log tail
//! slope of their size distribution, ensemble bands and firm-size cCDFs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::simulation::RunRecord;

/// A maximal run of consecutive steps that each saw at least one default.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cascade {
    pub start_step: u32,
    pub end_step: u32,
    pub defaults: u32,
    /// Active firms when the first step of the run began.
    pub firms_at_start: u32,
    /// `defaults / firms_at_start`, capped at 1.
    pub size: f64,
}

/// Splits the post-burn-in default series into cascades.
pub fn segment_cascades(defaults: &[u32], firms: &[u32], burn_in: u32) -> Vec<Cascade> {
    let n = defaults.len().min(firms.len());
    let mut out = Vec::new();
    let mut t = burn_in as usize;
    while t < n {
        if defaults[t] == 0 {
            t += 1;
            continue;
        }
        let start = t;
        let mut total = 0;
        while t < n && defaults[t] > 0 {
            total += defaults[t];
            t += 1;
        }
        let f = firms[start].max(1);
        out.push(Cascade {
            start_step: start as u32,
            end_step: (t - 1) as u32,
            defaults: total,
            firms_at_start: firms[start],
            size: (total as f64 / f as f64).min(1.0),
        });
    }
    out
}

pub fn record_cascades(record: &RunRecord) -> Vec<Cascade> {
    segment_cascades(&record.defaults(), &record.firms_at_start(), record.burn_in)
}

/// Number of cascades whose size exceeds `threshold`.
pub fn count_tail_events(cascades: &[Cascade], threshold: f64) -> usize {
    cascades.iter().filter(|c| c.size > threshold).count()
}

/// Fixed-width histogram on (0, 1]; bin `k` covers `(k w, (k+1) w]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(samples: &[f64], bin_width: f64) -> Result<Self> {
        if !(bin_width > 0.0 && bin_width <= 1.0) {
            return Err(Error::Logic(format!("bin width {bin_width} outside (0, 1]")));
        }
        let bins = (1.0 / bin_width).round().max(1.0) as usize;
        let mut counts = vec![0u64; bins];
        for &x in samples {
            if x > 0.0 && x <= 1.0 {
                let k = ((x / bin_width).ceil() as usize).clamp(1, bins) - 1;
                counts[k] += 1;
            }
        }
        Ok(Histogram { bin_width, counts })
    }

    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.bin_width
    }
}

/// Exponential tail fitted on a semi-log histogram.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    /// Decay rate: the negated slope of log count against size.
    pub lambda_hat: f64,
    pub bin_width: f64,
    /// Centers of the first and last nonempty bins.
    pub fit_range: (f64, f64),
    pub bins_used: usize,
    pub r_squared: f64,
}

/// Least-squares line through (bin center, ln count) over the nonempty bins,
/// each bin weighted by its count (the inverse variance of a log Poisson count).
pub fn fit_exponential_slope(samples: &[f64], bin_width: f64) -> Result<TailFit> {
    let hist = Histogram::new(samples, bin_width)?;
    let points: Vec<(f64, f64, f64)> = hist
        .counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, &c)| (hist.center(k), (c as f64).ln(), c as f64))
        .collect();
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{} nonempty bins; a slope needs at least 2",
            points.len()
        )));
    }
    let w: f64 = points.iter().map(|p| p.2).sum();
    let mx = points.iter().map(|p| p.2 * p.0).sum::<f64>() / w;
    let my = points.iter().map(|p| p.2 * p.1).sum::<f64>() / w;
    let sxx: f64 = points.iter().map(|p| p.2 * (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| p.2 * (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| p.2 * (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    Ok(TailFit {
        lambda_hat: -slope,
        bin_width,
        fit_range: (points[0].0, points[points.len() - 1].0),
        bins_used: points.len(),
        r_squared,
    })
}

/// Pointwise ensemble statistics for one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandPoint {
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

/// Quantile of sorted data with linear interpolation between order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn band(values: &mut [f64]) -> BandPoint {
    values.sort_by(f64::total_cmp);
    BandPoint {
        mean: values.iter().sum::<f64>() / values.len() as f64,
        median: quantile_sorted(values, 0.5),
        q25: quantile_sorted(values, 0.25),
        q75: quantile_sorted(values, 0.75),
    }
}

/// Mean, median and interquartile band across replications, step by step.
/// Series of unequal length are cut to the shortest.
pub fn ensemble_bands(series: &[Vec<f64>]) -> Result<Vec<BandPoint>> {
    let len = series
        .iter()
        .map(Vec::len)
        .min()
        .ok_or_else(|| Error::InsufficientData("no replications".into()))?;
    let mut column = vec![0.0; series.len()];
    Ok((0..len)
        .map(|t| {
            for (c, s) in column.iter_mut().zip(series) {
                *c = s[t];
            }
            band(&mut column)
        })
        .collect())
}

/// Firm-size cCDFs of an ensemble: per replication on a shared log grid, and
/// summarized in the x direction (the sizes reached at fixed cCDF levels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcdfBand {
    pub grid: Vec<f64>,
    /// `per_replication[r][k]`: share of firms of replication `r` larger than `grid[k]`.
    pub per_replication: Vec<Vec<f64>>,
    /// cCDF levels, from 1 (smallest firm) down to 0 (largest firm).
    pub levels: Vec<f64>,
    /// Ensemble statistics of the size at each level.
    pub sizes: Vec<BandPoint>,
}

impl CcdfBand {
    /// Largest over median size along the ensemble median curve.
    pub fn max_over_median(&self) -> f64 {
        let at = |level: f64| {
            let k = self
                .levels
                .iter()
                .position(|&l| (l - level).abs() < 1e-12)
                .expect("level on grid");
            self.sizes[k].median
        };
        at(0.0) / at(0.5)
    }
}

/// Builds the cCDF band of positive firm capitals, one vector per replication.
pub fn firm_size_ccdf(capitals: &[Vec<f64>], grid_points: usize, level_points: usize) -> Result<CcdfBand> {
    let mut sorted: Vec<Vec<f64>> = capitals
        .iter()
        .map(|c| c.iter().copied().filter(|&x| x > 0.0).collect::<Vec<_>>())
        .filter(|c| !c.is_empty())
        .collect();
    if sorted.is_empty() {
        return Err(Error::InsufficientData("no positive firm capital in any replication".into()));
    }
    for c in &mut sorted {
        c.sort_by(f64::total_cmp);
    }
    let lo = sorted.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
    let hi = sorted.iter().map(|c| c[c.len() - 1]).fold(0.0, f64::max);
    let grid_points = grid_points.max(2);
    let (llo, lhi) = ((lo * 0.999).ln(), hi.ln());
    let grid: Vec<f64> = (0..grid_points)
        .map(|k| {
            if k + 1 == grid_points {
                hi
            } else {
                (llo + (lhi - llo) * k as f64 / (grid_points - 1) as f64).exp()
            }
        })
        .collect();
    let per_replication = sorted
        .iter()
        .map(|c| {
            grid.iter()
                .map(|&g| {
                    let at_most = c.partition_point(|&x| x <= g);
                    (c.len() - at_most) as f64 / c.len() as f64
                })
                .collect()
        })
        .collect();
    let level_points = level_points.max(3) | 1;
    let levels: Vec<f64> = (0..level_points).map(|k| 1.0 - k as f64 / (level_points - 1) as f64).collect();
    let mut column = vec![0.0; sorted.len()];
    let sizes = levels
        .iter()
        .map(|&level| {
            for (x, c) in column.iter_mut().zip(&sorted) {
                *x = quantile_sorted(c, 1.0 - level);
            }
            band(&mut column)
        })
        .collect();
    Ok(CcdfBand { grid, per_replication, levels, sizes })
}

/// Sample autocorrelation at `lag`.
pub fn autocorrelation(series: &[f64], lag: usize) -> f64 {
    let n = series.len();
    if lag >= n {
        return 0.0;
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var: f64 = series.iter().map(|x| (x - mean).powi(2)).sum();
    if var == 0.0 {
        return 0.0;
    }
    let cov: f64 = (0..n - lag).map(|t| (series[t] - mean) * (series[t + lag] - mean)).sum();
    cov / var
}

/// Cascade statistics of one risk-model setting, pooled over replications.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: u32,
    pub replications: usize,
    pub cascades: usize,
    pub tail_events: usize,
    pub fit: Option<TailFit>,
}

pub const TAIL_THRESHOLD: f64 = 0.10;
pub const BIN_WIDTH: f64 = 0.01;

pub fn summarize_setting(setting: u32, per_replication: &[Vec<Cascade>], bin_width: f64) -> SettingSummary {
    let sizes: Vec<f64> = per_replication.iter().flatten().map(|c| c.size).collect();
    SettingSummary {
        setting,
        replications: per_replication.len(),
        cascades: sizes.len(),
        tail_events: per_replication.iter().map(|c| count_tail_events(c, TAIL_THRESHOLD)).sum(),
        fit: fit_exponential_slope(&sizes, bin_width).ok(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn segmentation_example() {
        let c = segment_cascades(&[0, 2, 3, 0, 1, 0], &[10; 6], 0);
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].defaults, c[0].size, c[0].start_step, c[0].end_step), (5, 0.5, 1, 2));
        assert_eq!((c[1].defaults, c[1].size), (1, 0.1));
    }

    #[test]
    fn segmentation_edges() {
        assert!(segment_cascades(&[0; 8], &[10; 8], 0).is_empty());
        let c = segment_cascades(&[0, 0, 0, 1], &[7; 4], 0);
        assert_eq!(c.len(), 1);
        assert!((c[0].size - 1.0 / 7.0).abs() < 1e-15);
        // steps before burn-in are ignored, including a run straddling it
        let c = segment_cascades(&[1, 1, 0, 2], &[10; 4], 1);
        assert_eq!(c.iter().map(|c| c.defaults).collect::<Vec<_>>(), vec![1, 2]);
        // size uses the firm count at the first step of the run
        let c = segment_cascades(&[1, 1], &[4, 100], 0);
        assert_eq!(c[0].size, 0.5);
    }

    #[test]
    fn tail_counts() {
        let mk = |size| Cascade { start_step: 0, end_step: 0, defaults: 1, firms_at_start: 1, size };
        assert_eq!(count_tail_events(&[mk(0.05), mk(0.11), mk(0.35)], 0.10), 2);
        assert_eq!(count_tail_events(&[], 0.10), 0);
        assert_eq!(count_tail_events(&[mk(0.10)], 0.10), 0);
    }

    fn truncated_exponential(rate: f64, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let top = 1.0 - (-rate).exp();
        (0..n).map(|_| -(1.0 - rng.gen::<f64>() * top).ln() / rate).collect()
    }

    #[test]
    fn slope_recovers_exponential_rates() {
        for (i, rate) in [60.0, 120.0, 180.0].into_iter().enumerate() {
            let fit = fit_exponential_slope(&truncated_exponential(rate, 100_000, i as u64), 0.01).unwrap();
            assert!((fit.lambda_hat - rate).abs() < 0.05 * rate, "rate {rate}: {fit:?}");
        }
    }

    #[test]
    fn flat_histogram_has_no_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xs: Vec<f64> = (0..100_000).map(|_| 1.0 - rng.gen::<f64>()).collect();
        let fit = fit_exponential_slope(&xs, 0.01).unwrap();
        assert!(fit.lambda_hat.abs() < 0.2, "{fit:?}");
    }

    #[test]
    fn single_bin_is_insufficient() {
        assert!(matches!(fit_exponential_slope(&[0.001, 0.002], 0.01), Err(Error::InsufficientData(_))));
        assert!(fit_exponential_slope(&[], 0.01).is_err());
    }

    #[test]
    fn histogram_bins_are_right_closed() {
        let h = Histogram::new(&[0.01, 0.010001, 1.0, 0.0, 1.5], 0.01).unwrap();
        assert_eq!(h.counts.len(), 100);
        assert_eq!((h.counts[0], h.counts[1], h.counts[99]), (1, 1, 1));
        assert_eq!(h.counts.iter().sum::<u64>(), 3);
    }

    #[test]
    fn band_examples() {
        let b = ensemble_bands(&[vec![2.0; 3], vec![4.0; 3]]).unwrap();
        assert_eq!(b[1], BandPoint { mean: 3.0, median: 3.0, q25: 2.5, q75: 3.5 });
        let series = vec![1.0, 5.0, -2.0];
        let b = ensemble_bands(std::slice::from_ref(&series)).unwrap();
        for (p, x) in b.iter().zip(&series) {
            assert_eq!((p.mean, p.median, p.q25, p.q75), (*x, *x, *x, *x));
        }
        assert!(ensemble_bands(&[]).is_err());
    }

    #[test]
    fn symmetric_noise_mean_near_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let series: Vec<Vec<f64>> = (0..401).map(|_| vec![rng.gen_range(-1.0..1.0)]).collect();
        let b = ensemble_bands(&series).unwrap()[0];
        assert!((b.mean - b.median).abs() < 0.1);
    }

    #[test]
    fn equal_firms_give_a_step() {
        let band = firm_size_ccdf(&[vec![5.0; 10], vec![5.0; 4]], 20, 11).unwrap();
        for row in &band.per_replication {
            for (g, v) in band.grid.iter().zip(row) {
                assert_eq!(*v, if *g < 5.0 { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(band.max_over_median(), 1.0);
    }

    #[test]
    fn x_direction_statistics() {
        // rep A sizes 1..=5, rep B sizes 10..=50 step 10
        let a: Vec<f64> = (1..=5).map(f64::from).collect();
        let b: Vec<f64> = a.iter().map(|x| x * 10.0).collect();
        let band = firm_size_ccdf(&[a, b], 30, 5).unwrap();
        assert_eq!(band.levels, vec![1.0, 0.75, 0.5, 0.25, 0.0]);
        assert_eq!(band.sizes[2].median, (3.0 + 30.0) / 2.0);
        assert_eq!(band.sizes[4].median, (5.0 + 50.0) / 2.0);
        assert!((band.max_over_median() - 55.0 / 33.0).abs() < 1e-12);
    }

    #[test]
    fn autocorrelation_examples() {
        let alternating: Vec<f64> = (0..1000).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect();
        assert!((autocorrelation(&alternating, 1) + 1.0).abs() < 0.01);
        assert!((autocorrelation(&alternating, 2) - 1.0).abs() < 0.01);
        assert_eq!(autocorrelation(&[3.0; 10], 1), 0.0);
    }

    proptest! {
        #[test]
        fn cascades_partition_default_steps(
            defaults in proptest::collection::vec(prop_oneof![3 => Just(0u32), 1 => 1u32..5], 0..200),
            burn_in in 0u32..50,
        ) {
            let firms = vec![20u32; defaults.len()];
            let cascades = segment_cascades(&defaults, &firms, burn_in);
            let post: u32 = defaults.iter().skip(burn_in as usize).sum();
            prop_assert_eq!(cascades.iter().map(|c| c.defaults).sum::<u32>(), post);
            for c in &cascades {
                prop_assert!(c.size > 0.0 && c.size <= 1.0);
                for t in c.start_step..=c.end_step {
                    prop_assert!(defaults[t as usize] > 0);
                }
                if c.start_step > burn_in {
                    prop_assert_eq!(defaults[c.start_step as usize - 1], 0);
                }
                if (c.end_step as usize) + 1 < defaults.len() {
                    prop_assert_eq!(defaults[c.end_step as usize + 1], 0);
                }
            }
        }

        #[test]
        fn ccdf_nonincreasing(reps in proptest::collection::vec(proptest::collection::vec(0.1f64..1e6, 1..40), 1..6)) {
            let band = firm_size_ccdf(&reps, 25, 9).unwrap();
            for row in &band.per_replication {
                prop_assert_eq!(row[0], 1.0);
                prop_assert_eq!(row[row.len() - 1], 0.0);
                for w in row.windows(2) {
                    prop_assert!(w[1] <= w[0]);
                }
            }
            for w in band.sizes.windows(2) {
                prop_assert!(w[1].median >= w[0].median);
            }
        }
    }
}
