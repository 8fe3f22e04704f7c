//! Stepsize-sweep benchmark: run presets over a log-spaced stepsize grid,
//! score episodes on each domain, and reduce to the All / Top-1 / Top-40%
//! robustness metrics with std over seeds.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use restep_core::{
    adapt, sample_episode, shifted_domain, AdaptConfig, CoreError, DomainParams, ModelSpec,
    OptimizerKind, ParamSet, Preset,
};

// ── Errors ──────────────────────────────────────────────────────────────

#[derive(Debug)]
pub enum BenchError {
    InvalidConfig(String),
    /// An adaptation failed; carries the sweep coordinates.
    Adapt { preset: String, domain: String, stepsize: f64, seed: u64, source: CoreError },
    Io(io::Error),
    ParseCsv(String),
    NothingToPlot,
}

impl fmt::Display for BenchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BenchError::InvalidConfig(msg) => write!(f, "invalid sweep config: {msg}"),
            BenchError::Adapt { preset, domain, stepsize, seed, source } => write!(
                f,
                "adapt failed for preset {preset}, domain {domain}, stepsize {stepsize}, seed {seed}: {source}"
            ),
            BenchError::Io(e) => write!(f, "bench io: {e}"),
            BenchError::ParseCsv(msg) => write!(f, "bad csv: {msg}"),
            BenchError::NothingToPlot => write!(f, "nothing to plot"),
        }
    }
}

impl std::error::Error for BenchError {}

impl From<io::Error> for BenchError {
    fn from(e: io::Error) -> Self {
        BenchError::Io(e)
    }
}

// ── Configuration ───────────────────────────────────────────────────────

/// Log-spaced stepsize grid, endpoints included.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepsizeGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Default for StepsizeGrid {
    fn default() -> Self {
        StepsizeGrid { min: 1e-4, max: 1.0, points: 25 }
    }
}

impl StepsizeGrid {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.points < 2 {
            return Err(BenchError::InvalidConfig(format!(
                "grid needs at least 2 points, got {}",
                self.points
            )));
        }
        if !(self.min > 0.0 && self.max > self.min) {
            return Err(BenchError::InvalidConfig(format!(
                "grid needs 0 < min < max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let (lo, hi) = (self.min.log10(), self.max.log10());
        (0..self.points)
            .map(|i| 10f64.powf(lo + (hi - lo) * i as f64 / (self.points - 1) as f64))
            .collect()
    }
}

/// One method under comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetConfig {
    /// Label used in tables and plots.
    pub label: String,
    pub preset: Preset,
    pub optimizer: OptimizerKind,
    pub inverse_usa: bool,
    pub inverse_ufgsm: bool,
    pub freeze_bn: bool,
}

impl PresetConfig {
    /// Parse an extended preset name: the base presets plus the inverse
    /// controls `sgd_i_usa` and `sgd_usa_i_ufgsm`. With the Adam optimizer
    /// the leading `sgd` of the label becomes `adam`.
    pub fn parse(name: &str, optimizer: OptimizerKind, freeze_bn: bool) -> Option<PresetConfig> {
        let (preset, inverse_usa, inverse_ufgsm) = match name {
            "sgd_i_usa" => (Preset::SgdUsa, true, false),
            "sgd_usa_i_ufgsm" => (Preset::SgdUsaUfgsm, false, true),
            other => (Preset::parse(other)?, false, false),
        };
        let label = match optimizer {
            OptimizerKind::Sgd => name.to_string(),
            OptimizerKind::Adam { .. } => name.replacen("sgd", "adam", 1),
        };
        Some(PresetConfig { label, preset, optimizer, inverse_usa, inverse_ufgsm, freeze_bn })
    }
}

/// One evaluation domain, derived from the base domain by the shift knob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub grid: StepsizeGrid,
    /// Episodes scored per (domain, seed); shared across stepsizes and
    /// presets so comparisons are paired.
    pub episodes: usize,
    pub base_domain: DomainParams,
    pub domains: Vec<DomainSpec>,
    pub presets: Vec<PresetConfig>,
    pub seeds: Vec<u64>,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub sigma: f64,
    pub epsilon: f64,
    pub ensemble_size: usize,
    pub steps: usize,
    pub clip_inputs: bool,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        self.grid.validate()?;
        if self.episodes == 0 {
            return Err(BenchError::InvalidConfig("episodes must be positive".into()));
        }
        if self.domains.is_empty() || self.presets.is_empty() || self.seeds.is_empty() {
            return Err(BenchError::InvalidConfig(
                "domains, presets, and seeds must be non-empty".into(),
            ));
        }
        if self.n_way < 2 || self.k_shot == 0 || self.q_per_class == 0 {
            return Err(BenchError::InvalidConfig("bad episode shape".into()));
        }
        for d in &self.domains {
            if !(0.0..=1.0).contains(&d.shift) {
                return Err(BenchError::InvalidConfig(format!(
                    "domain {} shift {} outside [0, 1]",
                    d.name, d.shift
                )));
            }
        }
        Ok(())
    }

    fn adapt_config(&self, preset: &PresetConfig, alpha: f64, seed: u64) -> AdaptConfig {
        let mut cfg = AdaptConfig::preset(preset.preset, alpha, seed);
        cfg.sigma = self.sigma;
        cfg.epsilon = self.epsilon;
        cfg.ensemble_size = self.ensemble_size;
        cfg.steps = self.steps;
        cfg.optimizer = preset.optimizer;
        cfg.inverse_usa = preset.inverse_usa;
        cfg.inverse_ufgsm = preset.inverse_ufgsm;
        cfg.freeze_bn = preset.freeze_bn;
        cfg.clip_inputs = self.clip_inputs;
        cfg
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            grid: StepsizeGrid::default(),
            episodes: 20,
            base_domain: DomainParams::base(),
            domains: vec![DomainSpec { name: "base".into(), shift: 0.0 }],
            presets: vec![
                PresetConfig::parse("sgd", OptimizerKind::Sgd, false).expect("known preset"),
                PresetConfig::parse("sgd_all", OptimizerKind::Sgd, false).expect("known preset"),
            ],
            seeds: vec![0, 1, 2],
            n_way: 5,
            k_shot: 1,
            q_per_class: 15,
            sigma: 0.05,
            epsilon: 0.05,
            ensemble_size: 5,
            steps: 10,
            clip_inputs: false,
        }
    }
}

// ── Raw accuracy table ──────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRow {
    pub preset: String,
    pub domain: String,
    pub stepsize: f64,
    pub seed: u64,
    /// Mean query accuracy over the episode batch, in percent.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RawTable {
    pub rows: Vec<RawRow>,
}

fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run the full sweep. Deterministic: episode sampling depends only on
/// (domain, seed, episode index) and the ensemble seed additionally on the
/// stepsize index, never on the preset, so methods see identical tasks and
/// identical initial perturbations.
pub fn sweep(
    spec: &ModelSpec,
    params: &ParamSet,
    cfg: &SweepConfig,
) -> Result<RawTable, BenchError> {
    cfg.validate()?;
    let grid = cfg.grid.values();

    struct Cell {
        preset: usize,
        domain: usize,
        grid_index: usize,
        seed: u64,
    }
    let mut cells = Vec::new();
    for p in 0..cfg.presets.len() {
        for d in 0..cfg.domains.len() {
            for g in 0..grid.len() {
                for &seed in &cfg.seeds {
                    cells.push(Cell { preset: p, domain: d, grid_index: g, seed });
                }
            }
        }
    }
    let domains: Vec<DomainParams> = cfg
        .domains
        .iter()
        .map(|d| shifted_domain(&cfg.base_domain, d.shift))
        .collect();

    let rows: Vec<Result<RawRow, BenchError>> = cells
        .par_iter()
        .map(|cell| {
            let preset = &cfg.presets[cell.preset];
            let domain_spec = &cfg.domains[cell.domain];
            let domain = &domains[cell.domain];
            let alpha = grid[cell.grid_index];
            let mut acc_sum = 0.0;
            for e in 0..cfg.episodes {
                let episode_seed = mix(mix(cell.seed, domain_spec.name.len() as u64), e as u64);
                let episode =
                    sample_episode(domain, cfg.n_way, cfg.k_shot, cfg.q_per_class, episode_seed);
                let adapt_seed = mix(episode_seed, cell.grid_index as u64);
                let adapt_cfg = cfg.adapt_config(preset, alpha, adapt_seed);
                let result = adapt(spec, params, &episode, &adapt_cfg).map_err(|source| {
                    BenchError::Adapt {
                        preset: preset.label.clone(),
                        domain: domain_spec.name.clone(),
                        stepsize: alpha,
                        seed: cell.seed,
                        source,
                    }
                })?;
                acc_sum += result.query_accuracy;
            }
            Ok(RawRow {
                preset: preset.label.clone(),
                domain: domain_spec.name.clone(),
                stepsize: alpha,
                seed: cell.seed,
                accuracy: 100.0 * acc_sum / cfg.episodes as f64,
            })
        })
        .collect();

    let mut table = RawTable::default();
    for row in rows {
        table.rows.push(row?);
    }
    Ok(table)
}

// ── Metrics ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

fn stat(values: &[f64]) -> Stat {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Stat { mean, std: var.sqrt() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub stepsize: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerSeedMetrics {
    pub seeds: Vec<u64>,
    pub all: Vec<f64>,
    pub top1: Vec<f64>,
    pub top40: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub preset: String,
    pub domain: String,
    pub curve: Vec<CurvePoint>,
    pub all: Stat,
    pub top1: Stat,
    pub top40: Stat,
    pub per_seed: PerSeedMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub grid: Vec<f64>,
    /// Number of stepsizes in the top-40% average: `ceil(0.4 * G)`.
    pub top40_count: usize,
    pub top40_rule: String,
    pub entries: Vec<ReportEntry>,
}

/// `All` / `Top-1` / `Top-40%` of one accuracy curve.
pub fn curve_metrics(accuracies: &[f64]) -> (f64, f64, f64) {
    let g = accuracies.len();
    let all = accuracies.iter().sum::<f64>() / g as f64;
    let mut sorted = accuracies.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite accuracies"));
    let top1 = sorted[0];
    let k = top40_count(g);
    let top40 = sorted[..k].iter().sum::<f64>() / k as f64;
    (all, top1, top40)
}

/// Ceiling rule: non-empty for any grid size.
pub fn top40_count(grid_points: usize) -> usize {
    (4 * grid_points).div_ceil(10)
}

/// Reduce a raw table to the robustness metrics, grouped by (preset, domain)
/// in first-appearance order.
pub fn metrics(table: &RawTable) -> MetricsReport {
    let mut keys: Vec<(String, String)> = Vec::new();
    for row in &table.rows {
        let key = (row.preset.clone(), row.domain.clone());
        if !keys.contains(&key) {
            keys.push(key);
        }
    }
    let mut grid: Vec<f64> = Vec::new();
    for row in &table.rows {
        if !grid.contains(&row.stepsize) {
            grid.push(row.stepsize);
        }
    }
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite stepsizes"));

    let entries = keys
        .iter()
        .map(|(preset, domain)| {
            let rows: Vec<&RawRow> = table
                .rows
                .iter()
                .filter(|r| &r.preset == preset && &r.domain == domain)
                .collect();
            let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            seeds.dedup();

            let curve: Vec<CurvePoint> = grid
                .iter()
                .map(|&stepsize| {
                    let vals: Vec<f64> = rows
                        .iter()
                        .filter(|r| r.stepsize == stepsize)
                        .map(|r| r.accuracy)
                        .collect();
                    let s = stat(&vals);
                    CurvePoint { stepsize, mean: s.mean, std: s.std }
                })
                .collect();

            let mut all = Vec::new();
            let mut top1 = Vec::new();
            let mut top40 = Vec::new();
            for &seed in &seeds {
                let mut per_step: Vec<(f64, f64)> = rows
                    .iter()
                    .filter(|r| r.seed == seed)
                    .map(|r| (r.stepsize, r.accuracy))
                    .collect();
                per_step.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite stepsizes"));
                let accs: Vec<f64> = per_step.iter().map(|&(_, a)| a).collect();
                let (a, t1, t40) = curve_metrics(&accs);
                all.push(a);
                top1.push(t1);
                top40.push(t40);
            }
            ReportEntry {
                preset: preset.clone(),
                domain: domain.clone(),
                curve,
                all: stat(&all),
                top1: stat(&top1),
                top40: stat(&top40),
                per_seed: PerSeedMetrics { seeds, all, top1, top40 },
            }
        })
        .collect();

    MetricsReport {
        top40_count: top40_count(grid.len()),
        top40_rule: "ceil(0.4 * grid_points)".into(),
        grid,
        entries,
    }
}

/// Exact one-sided sign test: probability of at least `wins` successes in
/// `trials` fair coin flips.
pub fn sign_test_p(wins: usize, trials: usize) -> f64 {
    assert!(wins <= trials, "wins {wins} > trials {trials}");
    // Binomial coefficients in f64; exact for the desk-scale trial counts.
    let mut coeff = 1.0f64;
    let mut tail = 0.0f64;
    // C(n, k) built incrementally from k = 0.
    for k in 0..=trials {
        if k >= wins {
            tail += coeff;
        }
        coeff = coeff * (trials - k) as f64 / (k + 1) as f64;
    }
    tail / 2f64.powi(trials as i32)
}

// ── Emission ────────────────────────────────────────────────────────────

/// `preset,domain,stepsize,mean,std` rows; floats in shortest
/// round-trip form so re-parsing reproduces the values exactly.
pub fn write_report_csv(report: &MetricsReport, path: &Path) -> Result<(), BenchError> {
    let mut out = String::from("preset,domain,stepsize,mean,std\n");
    for entry in &report.entries {
        for point in &entry.curve {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                entry.preset, entry.domain, point.stepsize, point.mean, point.std
            ));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Re-parse a report CSV into (preset, domain, stepsize, mean, std) rows.
pub fn read_report_csv(path: &Path) -> Result<Vec<(String, String, f64, f64, f64)>, BenchError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(BenchError::ParseCsv(format!("line {} has {} fields", i + 1, fields.len())));
        }
        let num = |s: &str| {
            s.parse::<f64>().map_err(|e| BenchError::ParseCsv(format!("line {}: {e}", i + 1)))
        };
        rows.push((
            fields[0].to_string(),
            fields[1].to_string(),
            num(fields[2])?,
            num(fields[3])?,
            num(fields[4])?,
        ));
    }
    Ok(rows)
}

pub fn write_report_json(report: &MetricsReport, path: &Path) -> Result<(), BenchError> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| BenchError::InvalidConfig(e.to_string()))?;
    fs::write(path, json)?;
    Ok(())
}

/// Raw table CSV: `preset,domain,stepsize,seed,accuracy`.
pub fn write_raw_csv(table: &RawTable, path: &Path) -> Result<(), BenchError> {
    let mut out = String::from("preset,domain,stepsize,seed,accuracy\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.preset, r.domain, r.stepsize, r.seed, r.accuracy
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_raw_csv(path: &Path) -> Result<RawTable, BenchError> {
    let text = fs::read_to_string(path)?;
    let mut table = RawTable::default();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(BenchError::ParseCsv(format!("line {} has {} fields", i + 1, fields.len())));
        }
        table.rows.push(RawRow {
            preset: fields[0].to_string(),
            domain: fields[1].to_string(),
            stepsize: fields[2]
                .parse()
                .map_err(|e| BenchError::ParseCsv(format!("line {}: {e}", i + 1)))?,
            seed: fields[3]
                .parse()
                .map_err(|e| BenchError::ParseCsv(format!("line {}: {e}", i + 1)))?,
            accuracy: fields[4]
                .parse()
                .map_err(|e| BenchError::ParseCsv(format!("line {}: {e}", i + 1)))?,
        });
    }
    Ok(table)
}

/// Emit one SVG accuracy-vs-stepsize chart per domain; returns the files.
pub fn write_report_svgs(report: &MetricsReport, dir: &Path) -> Result<Vec<PathBuf>, BenchError> {
    if report.entries.is_empty() {
        return Err(BenchError::NothingToPlot);
    }
    let mut domains: Vec<&str> = Vec::new();
    for e in &report.entries {
        if !domains.contains(&e.domain.as_str()) {
            domains.push(&e.domain);
        }
    }
    let mut files = Vec::new();
    for domain in domains {
        let series: Vec<&ReportEntry> =
            report.entries.iter().filter(|e| e.domain == domain).collect();
        let svg = crate::plot::accuracy_chart(domain, &series);
        let path = dir.join(format!("sweep_{domain}.svg"));
        fs::write(&path, svg)?;
        files.push(path);
    }
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn log_grid_five_points() {
        let grid = StepsizeGrid { min: 1e-4, max: 1.0, points: 5 };
        let values = grid.values();
        let expect = [1e-4, 1e-3, 1e-2, 1e-1, 1.0];
        for (v, e) in values.iter().zip(expect) {
            assert_relative_eq!(v, &e, max_relative = 1e-12);
        }
        assert!(values.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn metrics_worked_example() {
        let accs = [10.0, 20.0, 30.0, 40.0, 50.0];
        let (all, top1, top40) = curve_metrics(&accs);
        assert_eq!(all, 30.0);
        assert_eq!(top1, 50.0);
        assert_eq!(top40, 45.0); // ceil(0.4 * 5) = 2 -> mean{50, 40}
    }

    #[test]
    fn metrics_all_equal_collapse() {
        let (all, top1, top40) = curve_metrics(&[33.0; 7]);
        assert_eq!((all, top1, top40), (33.0, 33.0, 33.0));
    }

    #[test]
    fn top40_ceiling_rule() {
        assert_eq!(top40_count(5), 2);
        assert_eq!(top40_count(2), 1);
        assert_eq!(top40_count(15), 6);
        assert_eq!(top40_count(1), 1);
        let (_, _, top40) = curve_metrics(&[0.0, 100.0]);
        assert_eq!(top40, 100.0);
    }

    #[test]
    fn metric_ordering_and_permutation_invariance() {
        let accs = [14.0, 92.0, 3.0, 55.0, 41.0, 77.0];
        let (all, top1, top40) = curve_metrics(&accs);
        assert!(top1 >= top40 && top40 >= all);
        let mut shuffled = accs;
        shuffled.reverse();
        shuffled.swap(1, 3);
        assert_eq!(curve_metrics(&shuffled), (all, top1, top40));
    }

    #[test]
    fn adding_a_worse_stepsize_never_raises_top1() {
        let accs = [40.0, 60.0, 52.0];
        let (_, top1, _) = curve_metrics(&accs);
        let (_, top1b, _) = curve_metrics(&[40.0, 60.0, 52.0, 12.0]);
        assert!(top1b <= top1);
    }

    #[test]
    fn sign_test_tail_values() {
        // Exact binomial tails for n = 10.
        assert_relative_eq!(sign_test_p(9, 10), 11.0 / 1024.0, max_relative = 1e-12);
        assert_relative_eq!(sign_test_p(8, 10), 56.0 / 1024.0, max_relative = 1e-12);
        assert_relative_eq!(sign_test_p(0, 10), 1.0, max_relative = 1e-12);
        assert_relative_eq!(sign_test_p(10, 10), 1.0 / 1024.0, max_relative = 1e-12);
    }

    #[test]
    fn metrics_group_per_seed_curves() {
        let mut table = RawTable::default();
        for (seed, accs) in [(0u64, [10.0, 30.0]), (1u64, [20.0, 40.0])] {
            for (i, &acc) in accs.iter().enumerate() {
                table.rows.push(RawRow {
                    preset: "sgd".into(),
                    domain: "base".into(),
                    stepsize: if i == 0 { 0.001 } else { 0.01 },
                    seed,
                    accuracy: acc,
                });
            }
        }
        let report = metrics(&table);
        assert_eq!(report.entries.len(), 1);
        let e = &report.entries[0];
        assert_eq!(e.per_seed.all, vec![20.0, 30.0]);
        assert_eq!(e.per_seed.top1, vec![30.0, 40.0]);
        assert_eq!(e.all.mean, 25.0);
        assert_eq!(e.curve[0].mean, 15.0);
        assert_eq!(e.curve[1].mean, 35.0);
        assert!(e.top1.mean >= e.top40.mean && e.top40.mean >= e.all.mean);
    }
}
