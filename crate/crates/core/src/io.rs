//! Output trees: the manifest, per-run CSV series, event profiles, cascade
//! tables and the four-cell experiment grid.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::{
    ensemble_bands, firm_size_ccdf, segment_cascades, summarize_setting, BandPoint, Cascade, Histogram,
    SettingSummary, BIN_WIDTH,
};
use crate::config::Params;
use crate::error::{Error, Result};
use crate::firms::FirmKind;
use crate::peril::{build_event_profile, ProfileParams};
use crate::simulation::{run_ensemble_with, CapitalSnapshot, RunOptions, RunRecord, StepMetrics};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputOptions {
    /// Write the per-step metrics of every run.
    pub series: bool,
    /// Write every claim record of every run (large).
    pub settlements: bool,
}

impl Default for OutputOptions {
    fn default() -> Self {
        OutputOptions { series: true, settlements: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub setting: u32,
    pub replication: u64,
    pub error: String,
}

/// Everything needed to reproduce an output tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub code_version: String,
    pub master_seed: u64,
    pub settings: Vec<u32>,
    pub replications: u64,
    pub outputs: OutputOptions,
    pub config: Params,
    pub failures: Vec<RunFailure>,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_reader(BufReader::new(file)).map_err(|e| Error::Parse {
            path: path.clone(),
            reason: e.to_string(),
        })?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Parse {
                path,
                reason: format!("format version {} (expected {FORMAT_VERSION})", manifest.format_version),
            });
        }
        Ok(manifest)
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let file = create(&path)?;
        serde_json::to_writer_pretty(file, self).map_err(|e| Error::io(&path, e.into()))
    }
}

/// A cascade together with the claims left unpaid during it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeRow {
    pub setting: u32,
    pub replication: u64,
    pub start_step: u32,
    pub end_step: u32,
    pub defaults: u32,
    pub firms_at_start: u32,
    pub size: f64,
    pub non_recovered_count: u64,
    pub non_recovered_amount: f64,
}

impl CascadeRow {
    pub fn cascade(&self) -> Cascade {
        Cascade {
            start_step: self.start_step,
            end_step: self.end_step,
            defaults: self.defaults,
            firms_at_start: self.firms_at_start,
            size: self.size,
        }
    }
}

pub fn cascade_rows(setting: u32, replication: u64, steps: &[StepMetrics], burn_in: u32) -> Vec<CascadeRow> {
    let defaults: Vec<u32> = steps.iter().map(|s| s.defaults).collect();
    let firms: Vec<u32> = steps.iter().map(|s| s.firms_at_start).collect();
    segment_cascades(&defaults, &firms, burn_in)
        .into_iter()
        .map(|c| {
            let during = &steps[c.start_step as usize..=c.end_step as usize];
            CascadeRow {
                setting,
                replication,
                start_step: c.start_step,
                end_step: c.end_step,
                defaults: c.defaults,
                firms_at_start: c.firms_at_start,
                size: c.size,
                non_recovered_count: during.iter().map(|s| u64::from(s.non_recovered_count)).sum(),
                non_recovered_amount: during.iter().map(|s| s.non_recovered_amount).sum(),
            }
        })
        .collect()
}

/// What an ensemble keeps of each run once its files are written.
#[derive(Debug, Clone, PartialEq)]
pub struct RunDigest {
    pub setting: u32,
    pub replication: u64,
    pub cascades: Vec<CascadeRow>,
    pub snapshots: Vec<CapitalSnapshot>,
    pub premium_insurance: Vec<f64>,
}

#[derive(Debug)]
pub struct SimulationOutput {
    pub manifest: Manifest,
    pub digests: Vec<RunDigest>,
    pub summaries: Vec<SettingSummary>,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse { path: path.to_path_buf(), reason: e.to_string() }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().collect::<std::result::Result<_, _>>().map_err(|e| csv_error(path, e))
}

pub fn series_path(dir: &Path, setting: u32, replication: u64) -> PathBuf {
    dir.join("series").join(format!("s{setting}_r{replication}.csv"))
}

pub fn snapshots_path(dir: &Path, setting: u32, replication: u64) -> PathBuf {
    dir.join("snapshots").join(format!("s{setting}_r{replication}.csv"))
}

pub fn profile_path(dir: &Path, replication: u64) -> PathBuf {
    dir.join("events").join(format!("r{replication}.jsonl"))
}

fn settlements_path(dir: &Path, setting: u32, replication: u64) -> PathBuf {
    dir.join("settlements").join(format!("s{setting}_r{replication}.jsonl"))
}

fn write_run(dir: &Path, record: &RunRecord, outputs: OutputOptions) -> Result<()> {
    let (s, r) = (record.setting, record.replication);
    if outputs.series {
        write_csv(&series_path(dir, s, r), &record.steps)?;
    }
    write_csv(&snapshots_path(dir, s, r), &record.snapshots)?;
    if outputs.settlements {
        let path = settlements_path(dir, s, r);
        let mut w = create(&path)?;
        for c in &record.settlements {
            serde_json::to_writer(&mut w, c).map_err(|e| Error::io(&path, e.into()))?;
            writeln!(w).map_err(|e| Error::io(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Runs `replications` of every setting, writing the output tree under `dir`.
/// Failed runs are listed in the manifest; the call fails only if every run does.
pub fn simulate(
    params: &Params,
    settings: &[u32],
    replications: u64,
    dir: &Path,
    outputs: OutputOptions,
) -> Result<SimulationOutput> {
    params.validate()?;
    for &s in settings {
        let mut p = params.clone();
        p.diversity = s;
        p.validate()?;
    }
    for sub in ["series", "snapshots", "events", "settlements"] {
        if sub == "series" && !outputs.series || sub == "settlements" && !outputs.settlements {
            continue;
        }
        create_dir(&dir.join(sub))?;
    }
    let profile_params = ProfileParams::from(params);
    for rep in 0..replications {
        let profile = build_event_profile(rep, &profile_params)?;
        let path = profile_path(dir, rep);
        let mut w = create(&path)?;
        profile.write_jsonl(&mut w).map_err(|e| Error::io(&path, e))?;
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    fs::write(dir.join("config.toml"), params.to_toml_string()).map_err(|e| Error::io(dir.join("config.toml"), e))?;

    let options = RunOptions { log_settlements: outputs.settlements };
    let items = run_ensemble_with(params, settings, replications, options, |record| {
        write_run(dir, &record, outputs)?;
        Ok(RunDigest {
            setting: record.setting,
            replication: record.replication,
            cascades: cascade_rows(record.setting, record.replication, &record.steps, record.burn_in),
            premium_insurance: record.premium_insurance(),
            snapshots: record.snapshots,
        })
    });
    let mut failures = Vec::new();
    let mut digests = Vec::new();
    for item in items {
        match item.result {
            Ok(d) => digests.push(d),
            Err(e) => failures.push(RunFailure {
                setting: item.setting,
                replication: item.replication,
                error: e.to_string(),
            }),
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        master_seed: params.seed,
        settings: settings.to_vec(),
        replications,
        outputs,
        config: params.clone(),
        failures,
    };
    manifest.write(dir)?;
    if digests.is_empty() && !settings.is_empty() && replications > 0 {
        let first = &manifest.failures[0];
        return Err(Error::Logic(format!(
            "all runs failed; first (setting {}, replication {}): {}",
            first.setting, first.replication, first.error
        )));
    }
    let rows: Vec<CascadeRow> = digests.iter().flat_map(|d| d.cascades.iter().copied()).collect();
    write_csv(&dir.join("cascades.csv"), &rows)?;
    let summaries = summarize(settings, &digests);
    write_csv(&dir.join("tail_fit.csv"), &summary_rows(&summaries))?;
    Ok(SimulationOutput { manifest, digests, summaries })
}

/// Cascade statistics per setting, pooled over the digests of that setting.
pub fn summarize(settings: &[u32], digests: &[RunDigest]) -> Vec<SettingSummary> {
    settings
        .iter()
        .map(|&s| {
            let per_rep: Vec<Vec<Cascade>> = digests
                .iter()
                .filter(|d| d.setting == s)
                .map(|d| d.cascades.iter().map(CascadeRow::cascade).collect())
                .collect();
            summarize_setting(s, &per_rep, BIN_WIDTH)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub setting: u32,
    pub replications: usize,
    pub cascades: usize,
    pub tail_events: usize,
    pub lambda_hat: Option<f64>,
    pub r_squared: Option<f64>,
    pub bins_used: Option<usize>,
    pub fit_from: Option<f64>,
    pub fit_to: Option<f64>,
}

pub fn summary_rows(summaries: &[SettingSummary]) -> Vec<SummaryRow> {
    summaries
        .iter()
        .map(|s| SummaryRow {
            setting: s.setting,
            replications: s.replications,
            cascades: s.cascades,
            tail_events: s.tail_events,
            lambda_hat: s.fit.map(|f| f.lambda_hat),
            r_squared: s.fit.map(|f| f.r_squared),
            bins_used: s.fit.map(|f| f.bins_used),
            fit_from: s.fit.map(|f| f.fit_range.0),
            fit_to: s.fit.map(|f| f.fit_range.1),
        })
        .collect()
}

type Column = fn(&StepMetrics) -> f64;

/// Series that get ensemble bands.
const BANDED: [(&str, Column); 9] = [
    ("premium_insurance", |s| s.premium_insurance),
    ("premium_reinsurance", |s| s.premium_reinsurance),
    ("capital_insurance", |s| s.capital_insurance),
    ("capital_reinsurance", |s| s.capital_reinsurance),
    ("free_capital_insurance", |s| s.free_capital_insurance),
    ("free_capital_reinsurance", |s| s.free_capital_reinsurance),
    ("insurers", |s| f64::from(s.insurers)),
    ("reinsurers", |s| f64::from(s.reinsurers)),
    ("uninsured", |s| f64::from(s.uninsured)),
];

#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub manifest: Manifest,
    pub summaries: Vec<SettingSummary>,
    /// (setting, snapshot step, kind) -> largest over median firm size.
    pub size_ratios: BTreeMap<(u32, u32, FirmKind), f64>,
}

fn write_table(path: &Path, header: &[String], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn bands_table(path: &Path, bands: &[(&str, Vec<BandPoint>)]) -> Result<()> {
    let mut header = vec!["t".to_string()];
    for (name, _) in bands {
        for stat in ["mean", "median", "q25", "q75"] {
            header.push(format!("{name}_{stat}"));
        }
    }
    let len = bands.iter().map(|b| b.1.len()).min().unwrap_or(0);
    write_table(
        path,
        &header,
        (0..len).map(|t| {
            let mut row = vec![t.to_string()];
            for (_, b) in bands {
                let p = b[t];
                row.extend([p.mean, p.median, p.q25, p.q75].iter().map(|x| x.to_string()));
            }
            row
        }),
    )
}

/// Re-derives every statistic from an output tree written by [`simulate`].
pub fn analyze_dir(input: &Path, out: &Path) -> Result<Analysis> {
    let manifest = Manifest::read(input)?;
    if !manifest.outputs.series {
        return Err(Error::InsufficientData(format!(
            "{} was written without per-step series",
            input.display()
        )));
    }
    create_dir(out)?;
    let failed = |s: u32, r: u64| manifest.failures.iter().any(|f| f.setting == s && f.replication == r);
    let burn_in = manifest.config.burn_in;
    let mut digests = Vec::new();
    let mut size_ratios = BTreeMap::new();
    let mut histograms = Vec::new();
    for &s in &manifest.settings {
        let mut series: Vec<Vec<StepMetrics>> = Vec::new();
        let mut snapshots: Vec<Vec<CapitalSnapshot>> = Vec::new();
        for r in (0..manifest.replications).filter(|&r| !failed(s, r)) {
            let steps: Vec<StepMetrics> = read_csv(&series_path(input, s, r))?;
            digests.push(RunDigest {
                setting: s,
                replication: r,
                cascades: cascade_rows(s, r, &steps, burn_in),
                snapshots: Vec::new(),
                premium_insurance: Vec::new(),
            });
            series.push(steps);
            snapshots.push(read_csv(&snapshots_path(input, s, r))?);
        }
        if series.is_empty() {
            continue;
        }
        let bands: Vec<(&str, Vec<BandPoint>)> = BANDED
            .iter()
            .map(|(name, get)| {
                let per_rep: Vec<Vec<f64>> = series.iter().map(|steps| steps.iter().map(get).collect()).collect();
                ensemble_bands(&per_rep).map(|b| (*name, b))
            })
            .collect::<Result<_>>()?;
        bands_table(&out.join(format!("bands_s{s}.csv")), &bands)?;

        for &t in &manifest.config.snapshot_steps {
            for kind in [FirmKind::Insurer, FirmKind::Reinsurer] {
                let capitals: Vec<Vec<f64>> = snapshots
                    .iter()
                    .map(|snap| snap.iter().filter(|c| c.t == t && c.kind == kind).map(|c| c.capital).collect())
                    .collect();
                let Ok(band) = firm_size_ccdf(&capitals, 60, 41) else { continue };
                size_ratios.insert((s, t, kind), band.max_over_median());
                let tag = match kind {
                    FirmKind::Insurer => "insurers",
                    FirmKind::Reinsurer => "reinsurers",
                };
                write_table(
                    &out.join(format!("ccdf_{tag}_t{t}_s{s}.csv")),
                    &["level", "size_mean", "size_median", "size_q25", "size_q75"].map(String::from),
                    band.levels.iter().zip(&band.sizes).map(|(l, b)| {
                        [*l, b.mean, b.median, b.q25, b.q75].iter().map(f64::to_string).collect()
                    }),
                )?;
                let mut header = vec!["size".to_string()];
                header.extend((0..band.per_replication.len()).map(|r| format!("ccdf_{r}")));
                write_table(
                    &out.join(format!("ccdf_grid_{tag}_t{t}_s{s}.csv")),
                    &header,
                    band.grid.iter().enumerate().map(|(k, g)| {
                        let mut row = vec![g.to_string()];
                        row.extend(band.per_replication.iter().map(|c| c[k].to_string()));
                        row
                    }),
                )?;
            }
        }
        let sizes: Vec<f64> = digests.iter().filter(|d| d.setting == s).flat_map(|d| d.cascades.iter().map(|c| c.size)).collect();
        histograms.push((s, Histogram::new(&sizes, BIN_WIDTH)?));
    }

    let rows: Vec<CascadeRow> = digests.iter().flat_map(|d| d.cascades.iter().copied()).collect();
    write_csv(&out.join("cascades.csv"), &rows)?;
    let mut header = vec!["size_from".to_string(), "size_to".to_string()];
    header.extend(histograms.iter().map(|(s, _)| format!("count_s{s}")));
    let bins = (1.0 / BIN_WIDTH).round() as usize;
    write_table(
        &out.join("histogram_cascade_size.csv"),
        &header,
        (0..bins).map(|k| {
            let mut row = vec![(k as f64 * BIN_WIDTH).to_string(), ((k + 1) as f64 * BIN_WIDTH).to_string()];
            row.extend(histograms.iter().map(|(_, h)| h.counts[k].to_string()));
            row
        }),
    )?;
    // unpaid claims per cascade, in decades: 0, 1-9, 10-99, ...
    let decade = |c: u64| if c == 0 { 0 } else { c.ilog10() as usize + 1 };
    let top = rows.iter().map(|r| decade(r.non_recovered_count)).max().unwrap_or(0);
    let mut header = vec!["claims_from".to_string(), "claims_to".to_string()];
    header.extend(manifest.settings.iter().map(|s| format!("count_s{s}")));
    write_table(
        &out.join("histogram_non_recovered.csv"),
        &header,
        (0..=top).map(|k| {
            let (lo, hi) = if k == 0 { (0, 0) } else { (10u64.pow(k as u32 - 1), 10u64.pow(k as u32) - 1) };
            let mut row = vec![lo.to_string(), hi.to_string()];
            row.extend(manifest.settings.iter().map(|&s| {
                rows.iter().filter(|r| r.setting == s && decade(r.non_recovered_count) == k).count().to_string()
            }));
            row
        }),
    )?;
    let summaries = summarize(&manifest.settings, &digests);
    write_csv(&out.join("tail_fit.csv"), &summary_rows(&summaries))?;
    Ok(Analysis { manifest, summaries, size_ratios })
}

/// One column of the experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridCell {
    pub name: String,
    pub margin_of_safety: f64,
    pub reinsurance: bool,
    pub settings: Vec<u32>,
    pub replications: u64,
    pub t_max: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentGrid {
    pub seed: u64,
    #[serde(rename = "cell")]
    pub cells: Vec<GridCell>,
}

impl ExperimentGrid {
    /// Margin of safety 2 and 1, each with and without reinsurance, all four settings.
    pub fn four_cells(replications: u64, t_max: u32, seed: u64) -> Self {
        let cell = |name: &str, mu, reinsurance| GridCell {
            name: name.to_string(),
            margin_of_safety: mu,
            reinsurance,
            settings: vec![1, 2, 3, 4],
            replications,
            t_max,
        };
        ExperimentGrid {
            seed,
            cells: vec![
                cell("mu2_reinsurance", 2.0, true),
                cell("mu2_no_reinsurance", 2.0, false),
                cell("mu1_reinsurance", 1.0, true),
                cell("mu1_no_reinsurance", 1.0, false),
            ],
        }
    }

    pub fn from_toml_str(text: &str, origin: &Path) -> Result<Self> {
        let grid: ExperimentGrid = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(grid)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, path)
    }

    /// Resolves a cell against the base configuration.
    pub fn cell_params(&self, base: &Params, cell: &GridCell) -> Params {
        let mut p = base.clone();
        p.seed = self.seed;
        p.margin_of_safety = cell.margin_of_safety;
        p.reinsurance = cell.reinsurance;
        p.t_max = cell.t_max;
        p.replications = cell.replications as u32;
        p
    }

    pub fn validate(&self, base: &Params) -> Result<()> {
        if self.cells.is_empty() {
            return Err(Error::config("cell", "the grid has no cells"));
        }
        for (i, cell) in self.cells.iter().enumerate() {
            let clash = self.cells[..i].iter().find(|c| {
                c.name == cell.name
                    || (c.margin_of_safety == cell.margin_of_safety
                        && c.reinsurance == cell.reinsurance
                        && c.settings == cell.settings
                        && c.replications == cell.replications
                        && c.t_max == cell.t_max)
            });
            if let Some(other) = clash {
                return Err(Error::config("cell", format!("`{}` duplicates `{}`", cell.name, other.name)));
            }
            if cell.name.is_empty() || cell.name.contains(['/', '\\']) || cell.name.starts_with('.') {
                return Err(Error::config("cell.name", format!("`{}` is not usable as a directory name", cell.name)));
            }
            if cell.settings.is_empty() {
                return Err(Error::config("cell.settings", format!("`{}` lists no settings", cell.name)));
            }
            let p = self.cell_params(base, cell);
            for &s in &cell.settings {
                let mut q = p.clone();
                q.diversity = s;
                q.validate()?;
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct CellReport {
    pub cell: GridCell,
    pub result: Result<Vec<SettingSummary>>,
}

/// Runs every cell into `dir/<cell name>` and writes the grid summary.
/// A failing cell is reported without stopping the others.
pub fn run_grid(base: &Params, grid: &ExperimentGrid, dir: &Path, outputs: OutputOptions) -> Result<Vec<CellReport>> {
    grid.validate(base)?;
    create_dir(dir)?;
    let reports: Vec<CellReport> = grid
        .cells
        .iter()
        .map(|cell| {
            let params = grid.cell_params(base, cell);
            let result = simulate(&params, &cell.settings, cell.replications, &dir.join(&cell.name), outputs)
                .map(|out| out.summaries);
            CellReport { cell: cell.clone(), result }
        })
        .collect();
    let path = dir.join("grid_summary.txt");
    let mut w = create(&path)?;
    w.write_all(grid_table(&reports).as_bytes()).map_err(|e| Error::io(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;
    let mut rows = Vec::new();
    for r in &reports {
        if let Ok(s) = &r.result {
            rows.extend(summary_rows(s).into_iter().map(|row| (r.cell.name.clone(), row)));
        }
    }
    let path = dir.join("grid_summary.csv");
    let mut header = vec!["cell".to_string()];
    header.extend(
        ["setting", "replications", "cascades", "tail_events", "lambda_hat", "r_squared"].map(String::from),
    );
    let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    write_table(
        &path,
        &header,
        rows.into_iter().map(|(cell, r)| {
            vec![
                cell,
                r.setting.to_string(),
                r.replications.to_string(),
                r.cascades.to_string(),
                r.tail_events.to_string(),
                opt(r.lambda_hat),
                opt(r.r_squared),
            ]
        }),
    )?;
    Ok(reports)
}

/// Slopes and tail counts with one column per cell and one row per setting.
pub fn grid_table(reports: &[CellReport]) -> String {
    let mut settings: Vec<u32> = reports.iter().flat_map(|r| r.cell.settings.iter().copied()).collect();
    settings.sort_unstable();
    settings.dedup();
    let width = reports.iter().map(|r| r.cell.name.len()).max().unwrap_or(0).max(12);
    let mut out = format!("{:<28}", "");
    for r in reports {
        out += &format!(" {:>width$}", r.cell.name);
    }
    out.push('\n');
    let lookup = |r: &CellReport, s: u32| -> Option<SettingSummary> {
        r.result.as_ref().ok()?.iter().find(|x| x.setting == s).cloned()
    };
    for s in &settings {
        out += &format!("{:<28}", format!("slope, {s} model(s)"));
        for r in reports {
            let cell = match (&r.result, lookup(r, *s).and_then(|x| x.fit)) {
                (Err(_), _) => "failed".to_string(),
                (_, Some(fit)) => format!("{:.1}", fit.lambda_hat),
                (_, None) => "-".to_string(),
            };
            out += &format!(" {cell:>width$}");
        }
        out.push('\n');
    }
    for s in &settings {
        out += &format!("{:<28}", format!(">10% events, {s} model(s)"));
        for r in reports {
            let cell = match (&r.result, lookup(r, *s)) {
                (Err(_), _) => "failed".to_string(),
                (_, Some(x)) => x.tail_events.to_string(),
                (_, None) => "-".to_string(),
            };
            out += &format!(" {cell:>width$}");
        }
        out.push('\n');
    }
    for r in reports {
        if let Err(e) = &r.result {
            out += &format!("{}: {e}\n", r.cell.name);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Params {
        let mut p = Params::default();
        p.t_max = 120;
        p.burn_in = 20;
        p.risks = 400;
        p.initial_insurers = 4;
        p.initial_reinsurers = 1;
        p.peril_rate = 0.1;
        p.snapshot_steps = vec![60];
        p
    }

    #[test]
    fn simulate_then_analyze_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let out = simulate(&small(), &[1, 2], 2, dir.path(), OutputOptions::default()).unwrap();
        assert!(out.manifest.failures.is_empty());
        let manifest = Manifest::read(dir.path()).unwrap();
        assert_eq!(manifest, out.manifest);
        assert_eq!(manifest.config, small());
        assert!(profile_path(dir.path(), 1).exists());
        let steps: Vec<StepMetrics> = read_csv(&series_path(dir.path(), 2, 1)).unwrap();
        assert_eq!(steps.len(), 120);

        let analysis = analyze_dir(dir.path(), &dir.path().join("analysis")).unwrap();
        assert_eq!(analysis.summaries, out.summaries);
        for f in ["tail_fit.csv", "cascades.csv", "bands_s1.csv", "histogram_cascade_size.csv", "ccdf_insurers_t60_s2.csv"] {
            assert!(dir.path().join("analysis").join(f).exists(), "{f}");
        }
        assert!(analysis.size_ratios.contains_key(&(1, 60, FirmKind::Insurer)));
    }

    #[test]
    fn analyze_needs_series() {
        let dir = tempfile::tempdir().unwrap();
        simulate(&small(), &[1], 1, dir.path(), OutputOptions { series: false, settlements: false }).unwrap();
        assert!(matches!(analyze_dir(dir.path(), &dir.path().join("a")), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn grid_parses_and_rejects_duplicates() {
        let text = r#"
seed = 7
[[cell]]
name = "a"
margin_of_safety = 2.0
reinsurance = true
settings = [1, 4]
replications = 3
t_max = 500
"#;
        let grid = ExperimentGrid::from_toml_str(text, Path::new("grid.toml")).unwrap();
        assert_eq!(grid.cells[0].settings, vec![1, 4]);
        assert!(grid.validate(&Params::default()).is_err(), "burn-in exceeds t_max");
        let mut base = Params::default();
        base.burn_in = 100;
        grid.validate(&base).unwrap();
        let mut twice = grid.clone();
        twice.cells.push(grid.cells[0].clone());
        assert!(twice.validate(&base).is_err());
        assert!(ExperimentGrid::from_toml_str("seed = 1\nbogus = 2\n", Path::new("g")).is_err());
        assert_eq!(ExperimentGrid::four_cells(20, 2000, 1).cells.len(), 4);
    }

    #[test]
    fn single_cell_grid_matches_direct_run() {
        let dir = tempfile::tempdir().unwrap();
        let base = small();
        let grid = ExperimentGrid {
            seed: base.seed,
            cells: vec![GridCell {
                name: "only".into(),
                margin_of_safety: 2.0,
                reinsurance: true,
                settings: vec![1, 3],
                replications: 2,
                t_max: 120,
            }],
        };
        let reports = run_grid(&base, &grid, dir.path(), OutputOptions::default()).unwrap();
        let direct_params = grid.cell_params(&base, &grid.cells[0]);
        let direct = simulate(&direct_params, &[1, 3], 2, &dir.path().join("direct"), OutputOptions::default()).unwrap();
        assert_eq!(reports[0].result.as_ref().unwrap(), &direct.summaries);
        let table = fs::read_to_string(dir.path().join("grid_summary.txt")).unwrap();
        assert!(table.contains("only"));
        let again = run_grid(&base, &grid, &dir.path().join("again"), OutputOptions::default()).unwrap();
        assert_eq!(grid_table(&again), table);
    }
}
