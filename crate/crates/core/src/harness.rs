//! Run orchestration, metric extraction, aggregation across seeds,
//! cross-protocol gains and result files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::channel::VerdictCounts;
use crate::cla::Recommendation;
use crate::kernel::KernelError;
use crate::metrics::{lifetimes, mean_delay_s, throughput_mbps};
use crate::rng::RNG_ALGORITHM;
use crate::scenario::{Protocol, Scenario, ScenarioError};
use crate::sim::{simulate, RunLog, SimError, World};
use crate::trace::{TraceOptions, Traces};
use crate::NodeId;

pub const PER_NODE_HEADER: &str = "node,collisions,drops,energy_j,packets_rx";
pub const GAINS_HEADER: &str = "metric,baseline_mean,variant_mean,gain_pct";

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("simulation failed: {0}")]
    Runtime(#[from] KernelError<SimError>),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed result file {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("cannot aggregate an empty result set")]
    NoResults,
    #[error("results mix scenarios or protocols ({0} vs {1})")]
    MixedScenarios(String, String),
    #[error("baseline mean of {0} is zero")]
    ZeroBaseline(String),
    #[error("metric {0} has no values")]
    MissingMetric(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerNode {
    pub node: NodeId,
    /// DATA frames from this node lost to collision at their next hop.
    pub collisions: u64,
    /// Frames addressed to this node lost to collision here.
    pub collisions_rx: u64,
    pub drops: u64,
    pub energy_j: f64,
    pub packets_rx: u64,
    pub died_at_s: Option<f64>,
    pub tx_j: f64,
    pub rx_j: f64,
    pub idle_j: f64,
    pub gcp_j: f64,
    pub tx_s: f64,
    pub rx_s: f64,
    pub idle_s: f64,
    pub gcp_reports: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub protocol: Protocol,
    pub code_version: String,
    pub rng: String,
    pub scenario_hash: String,
    pub scenario: Scenario,
    pub events_processed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub scenario: String,
    pub scenario_hash: String,
    pub protocol: Protocol,
    pub seed: u64,
    pub packets_sent: u64,
    pub packets_received: u64,
    pub throughput_mbps: f64,
    pub packets_per_s: f64,
    pub fnd_s: Option<f64>,
    pub lnd_s: Option<f64>,
    pub lifetime_rcvd_s: Option<f64>,
    pub mean_delay_s: Option<f64>,
    pub mean_collisions_per_node: f64,
    pub total_collisions: u64,
    pub total_drops: u64,
    pub total_energy_j: f64,
    pub verdicts: VerdictCounts,
    pub gcp_reports: u64,
    pub gcp_deliveries: u64,
    pub gcp_stale: u64,
    pub recommendations: BTreeMap<Recommendation, u64>,
    pub per_node: Vec<PerNode>,
    pub metadata: RunMetadata,
}

/// A finished run with its raw log and traces.
pub struct RunOutput {
    pub result: RunResult,
    pub log: RunLog,
    pub traces: Traces,
}

pub fn result_from_world(world: &World, sc: &Scenario, protocol: Protocol, seed: u64) -> RunResult {
    let log = &world.log;
    let sim_s = sc.sim_time_s;
    let bits: u64 = log.deliveries.iter().map(|d| u64::from(d.payload_bytes) * 8).sum();
    let delays: Vec<f64> = log.deliveries.iter().map(|d| d.delay_s()).collect();
    let life = lifetimes(&log.deaths, log.deliveries.iter().map(|d| d.at).max());
    let per_node: Vec<PerNode> = world
        .nodes()
        .iter()
        .zip(&log.nodes)
        .map(|(n, c)| {
            let e = &n.energy;
            PerNode {
                node: n.id,
                collisions: c.collisions,
                collisions_rx: c.collisions_rx,
                drops: c.drops,
                energy_j: e.consumed_j(),
                packets_rx: c.packets_rx,
                died_at_s: e.died_at.map(|t| t.as_secs_f64()),
                tx_j: e.state_j[0],
                rx_j: e.state_j[1],
                idle_j: e.state_j[2],
                gcp_j: e.gcp_j,
                tx_s: e.state_s[0],
                rx_s: e.state_s[1],
                idle_s: e.state_s[2],
                gcp_reports: e.gcp_reports,
            }
        })
        .collect();
    let total_collisions: u64 = per_node.iter().map(|p| p.collisions).sum();
    let hash = sc.hash();
    RunResult {
        scenario: sc.name.clone(),
        scenario_hash: hash.clone(),
        protocol,
        seed,
        packets_sent: log.packets_sent,
        packets_received: log.deliveries.len() as u64,
        throughput_mbps: throughput_mbps(bits, sim_s),
        packets_per_s: log.deliveries.len() as f64 / sim_s,
        fnd_s: life.fnd_s,
        lnd_s: life.lnd_s,
        lifetime_rcvd_s: life.lifetime_rcvd_s,
        mean_delay_s: mean_delay_s(&delays),
        mean_collisions_per_node: total_collisions as f64 / per_node.len() as f64,
        total_collisions,
        total_drops: per_node.iter().map(|p| p.drops).sum(),
        total_energy_j: per_node.iter().map(|p| p.energy_j).sum(),
        verdicts: log.verdicts,
        gcp_reports: log.gcp_reports,
        gcp_deliveries: log.gcp_deliveries,
        gcp_stale: log.gcp_stale,
        recommendations: log.recommendations.clone(),
        per_node,
        metadata: RunMetadata {
            seed,
            protocol,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            rng: RNG_ALGORITHM.to_string(),
            scenario_hash: hash,
            scenario: sc.clone(),
            events_processed: log.events_processed,
        },
    }
}

pub fn run_with(sc: &Scenario, protocol: Protocol, seed: u64, trace: TraceOptions) -> Result<RunOutput, HarnessError> {
    sc.validate()?;
    let mut world = simulate(Arc::new(sc.clone()), protocol, seed, trace)?;
    let result = result_from_world(&world, sc, protocol, seed);
    let traces = std::mem::take(&mut world.traces);
    let log = std::mem::take(&mut world.log);
    Ok(RunOutput { result, log, traces })
}

/// One full deterministic simulation.
pub fn run_scenario(sc: &Scenario, protocol: Protocol, seed: u64) -> Result<RunResult, HarnessError> {
    Ok(run_with(sc, protocol, seed, TraceOptions::default())?.result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    PacketsReceived,
    ThroughputMbps,
    Collisions,
    FndS,
    LndS,
    LifetimeRcvdS,
    MeanDelayS,
    EnergyJ,
    Drops,
}

impl Metric {
    pub const ALL: [Metric; 9] = [
        Metric::PacketsReceived,
        Metric::ThroughputMbps,
        Metric::Collisions,
        Metric::FndS,
        Metric::LndS,
        Metric::LifetimeRcvdS,
        Metric::MeanDelayS,
        Metric::EnergyJ,
        Metric::Drops,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::PacketsReceived => "packets_received",
            Metric::ThroughputMbps => "throughput_mbps",
            Metric::Collisions => "collisions",
            Metric::FndS => "fnd_s",
            Metric::LndS => "lnd_s",
            Metric::LifetimeRcvdS => "lifetime_rcvd_s",
            Metric::MeanDelayS => "mean_delay_s",
            Metric::EnergyJ => "energy_j",
            Metric::Drops => "drops",
        }
    }

    /// Collisions, delay, energy and drops improve downwards.
    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Collisions | Metric::MeanDelayS | Metric::EnergyJ | Metric::Drops)
    }

    pub fn extract(self, r: &RunResult) -> Option<f64> {
        match self {
            Metric::PacketsReceived => Some(r.packets_received as f64),
            Metric::ThroughputMbps => Some(r.throughput_mbps),
            Metric::Collisions => Some(r.mean_collisions_per_node),
            Metric::FndS => r.fnd_s,
            Metric::LndS => r.lnd_s,
            Metric::LifetimeRcvdS => r.lifetime_rcvd_s,
            Metric::MeanDelayS => r.mean_delay_s,
            Metric::EnergyJ => Some(r.total_energy_j),
            Metric::Drops => Some(r.total_drops as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    /// Runs in which the metric was defined.
    pub n: usize,
    pub mean: Option<f64>,
    pub stddev: Option<f64>,
    pub ci95_half_width: Option<f64>,
}

impl MetricSummary {
    pub fn from_values(values: &[f64]) -> MetricSummary {
        let n = values.len();
        if n == 0 {
            return MetricSummary { n, mean: None, stddev: None, ci95_half_width: None };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return MetricSummary { n, mean: Some(mean), stddev: None, ci95_half_width: None };
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt();
        MetricSummary {
            n,
            mean: Some(mean),
            stddev: Some(sd),
            ci95_half_width: Some(ci95_quantile(n) * sd / (n as f64).sqrt()),
        }
    }

    pub fn interval(&self) -> Option<(f64, f64)> {
        let m = self.mean?;
        let h = self.ci95_half_width.unwrap_or(0.0);
        Some((m - h, m + h))
    }
}

/// Two-sided 95% quantile: Student's t with n−1 dof below 30 runs, normal above.
pub fn ci95_quantile(n: usize) -> f64 {
    if n < 30 {
        StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("dof >= 1").inverse_cdf(0.975)
    } else {
        1.959_963_984_540_054
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub scenario: String,
    pub scenario_hash: String,
    pub protocol: Protocol,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<Metric, MetricSummary>,
}

impl Summary {
    pub fn metric(&self, m: Metric) -> &MetricSummary {
        &self.metrics[&m]
    }
}

pub fn aggregate(results: &[RunResult]) -> Result<Summary, HarnessError> {
    let first = results.first().ok_or(HarnessError::NoResults)?;
    for r in results {
        if r.scenario_hash != first.scenario_hash || r.protocol != first.protocol {
            return Err(HarnessError::MixedScenarios(
                format!("{}/{}", first.scenario_hash, first.protocol),
                format!("{}/{}", r.scenario_hash, r.protocol),
            ));
        }
    }
    let metrics = Metric::ALL
        .iter()
        .map(|&m| {
            let values: Vec<f64> = results.iter().filter_map(|r| m.extract(r)).collect();
            (m, MetricSummary::from_values(&values))
        })
        .collect();
    Ok(Summary {
        scenario: first.scenario.clone(),
        scenario_hash: first.scenario_hash.clone(),
        protocol: first.protocol,
        runs: results.len(),
        seeds: results.iter().map(|r| r.seed).collect(),
        metrics,
    })
}

/// Percent improvement of `variant` over `baseline`; positive is better for
/// every metric.
pub fn gain_percent(baseline: &Summary, variant: &Summary, metric: Metric) -> Result<f64, HarnessError> {
    if baseline.scenario_hash != variant.scenario_hash {
        return Err(HarnessError::MixedScenarios(baseline.scenario_hash.clone(), variant.scenario_hash.clone()));
    }
    let missing = || HarnessError::MissingMetric(metric.name().into());
    let b = baseline.metric(metric).mean.ok_or_else(missing)?;
    let v = variant.metric(metric).mean.ok_or_else(missing)?;
    if b == 0.0 {
        return Err(HarnessError::ZeroBaseline(metric.name().into()));
    }
    let raw = 100.0 * (v - b) / b;
    Ok(if metric.higher_is_better() { raw } else { -raw })
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), HarnessError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp"));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn per_node_csv(result: &RunResult) -> String {
    let mut out = String::from(PER_NODE_HEADER);
    out.push('\n');
    for p in &result.per_node {
        let _ = writeln!(out, "{},{},{},{:.9},{}", p.node, p.collisions, p.drops, p.energy_j, p.packets_rx);
    }
    out
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("results serialize");
    s.push('\n');
    s
}

/// Writes `run_<seed>.json`, `per_node_<seed>.csv` and any traces into `dir`.
pub fn write_run(dir: &Path, result: &RunResult, traces: &Traces) -> Result<(), HarnessError> {
    let seed = result.seed;
    write_atomic(&dir.join(format!("run_{seed}.json")), to_json(result).as_bytes())?;
    write_atomic(&dir.join(format!("per_node_{seed}.csv")), per_node_csv(result).as_bytes())?;
    for (name, body) in [("mac", &traces.mac), ("kb", &traces.kb), ("gcp", &traces.gcp)] {
        if let Some(t) = body {
            write_atomic(&dir.join(format!("{name}_trace_{seed}.csv")), t.as_str().as_bytes())?;
        }
    }
    if let Some(ev) = &traces.events {
        write_atomic(&dir.join(format!("events_{seed}.tsv")), ev)?;
    }
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, HarnessError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json { path: path.to_path_buf(), source })
}

/// Runs `seed_base .. seed_base + runs` in parallel; order of results follows seeds.
pub fn run_seeds(
    sc: &Scenario,
    protocol: Protocol,
    seeds: &[u64],
    trace: TraceOptions,
) -> Result<Vec<RunOutput>, HarnessError> {
    sc.validate()?;
    seeds.par_iter().map(|&seed| run_with(sc, protocol, seed, trace)).collect()
}

#[derive(Debug, Clone)]
pub struct BatchConfig {
    pub protocols: Vec<Protocol>,
    pub runs: u64,
    pub seed_base: u64,
    pub out: PathBuf,
    pub parallel: Option<usize>,
    pub trace: TraceOptions,
}

/// Runs every protocol over the same seeds and writes
/// `<out>/<protocol>/{run_*.json, per_node_*.csv, summary.json}`.
pub fn batch(sc: &Scenario, cfg: &BatchConfig) -> Result<BTreeMap<Protocol, Summary>, HarnessError> {
    let seeds: Vec<u64> = (0..cfg.runs).map(|i| cfg.seed_base + i).collect();
    let go = || -> Result<BTreeMap<Protocol, Summary>, HarnessError> {
        let mut summaries = BTreeMap::new();
        for &p in &cfg.protocols {
            let outputs = run_seeds(sc, p, &seeds, cfg.trace)?;
            let dir = cfg.out.join(p.as_str());
            for o in &outputs {
                write_run(&dir, &o.result, &o.traces)?;
            }
            let results: Vec<RunResult> = outputs.into_iter().map(|o| o.result).collect();
            let summary = aggregate(&results)?;
            write_atomic(&dir.join("summary.json"), to_json(&summary).as_bytes())?;
            summaries.insert(p, summary);
        }
        Ok(summaries)
    };
    match cfg.parallel {
        Some(threads) => {
            rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build().expect("thread pool").install(go)
        }
        None => go(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainRow {
    pub metric: Metric,
    pub baseline_mean: Option<f64>,
    pub variant_mean: Option<f64>,
    pub gain_pct: Option<f64>,
}

pub fn gains(baseline: &Summary, variant: &Summary) -> Result<Vec<GainRow>, HarnessError> {
    if baseline.scenario_hash != variant.scenario_hash {
        return Err(HarnessError::MixedScenarios(baseline.scenario_hash.clone(), variant.scenario_hash.clone()));
    }
    Ok(Metric::ALL
        .iter()
        .map(|&m| GainRow {
            metric: m,
            baseline_mean: baseline.metric(m).mean,
            variant_mean: variant.metric(m).mean,
            gain_pct: gain_percent(baseline, variant, m).ok(),
        })
        .collect())
}

pub fn gains_csv(rows: &[GainRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    let mut out = String::from(GAINS_HEADER);
    out.push('\n');
    for r in rows {
        let _ =
            writeln!(out, "{},{},{},{}", r.metric.name(), opt(r.baseline_mean), opt(r.variant_mean), opt(r.gain_pct));
    }
    out
}

/// Reads `summary.json` from two batch directories and writes `gains.csv`.
pub fn compare(base_dir: &Path, var_dir: &Path, out: &Path) -> Result<Vec<GainRow>, HarnessError> {
    let base: Summary = read_json(&base_dir.join("summary.json"))?;
    let var: Summary = read_json(&var_dir.join("summary.json"))?;
    let rows = gains(&base, &var)?;
    write_atomic(out, gains_csv(&rows).as_bytes())?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary_with(protocol: Protocol, metric: Metric, values: &[f64]) -> Summary {
        let mut metrics: BTreeMap<Metric, MetricSummary> =
            Metric::ALL.iter().map(|&m| (m, MetricSummary::from_values(&[1.0]))).collect();
        metrics.insert(metric, MetricSummary::from_values(values));
        Summary {
            scenario: "s".into(),
            scenario_hash: "h".into(),
            protocol,
            runs: values.len(),
            seeds: vec![],
            metrics,
        }
    }

    #[test]
    fn summary_examples() {
        let one = MetricSummary::from_values(&[4.0]);
        assert_eq!((one.mean, one.ci95_half_width), (Some(4.0), None));
        let two = MetricSummary::from_values(&[10.0, 20.0]);
        assert_eq!(two.mean, Some(15.0));
        assert!((two.stddev.unwrap() - 7.0710678).abs() < 1e-6);
        assert!((ci95_quantile(20) - 2.093).abs() < 1e-3);
        let xs: Vec<f64> = (0..20).map(f64::from).collect();
        let s = MetricSummary::from_values(&xs);
        let expect = ci95_quantile(20) * s.stddev.unwrap() / 20f64.sqrt();
        assert!((s.ci95_half_width.unwrap() - expect).abs() < 1e-12);
        assert_eq!(ci95_quantile(30), 1.959_963_984_540_054);
    }

    #[test]
    fn gain_examples() {
        let base = summary_with(Protocol::Dcf, Metric::Collisions, &[100.0]);
        let var = summary_with(Protocol::ClaAmac, Metric::Collisions, &[80.0]);
        assert!((gain_percent(&base, &var, Metric::Collisions).unwrap() - 20.0).abs() < 1e-12);
        let base = summary_with(Protocol::Dcf, Metric::ThroughputMbps, &[1.0]);
        let var = summary_with(Protocol::ClaAmac, Metric::ThroughputMbps, &[1.2]);
        assert!((gain_percent(&base, &var, Metric::ThroughputMbps).unwrap() - 20.0).abs() < 1e-9);
        for m in Metric::ALL {
            assert_eq!(gain_percent(&base, &base, m).unwrap(), 0.0);
        }
        let zero = summary_with(Protocol::Dcf, Metric::Drops, &[0.0]);
        assert!(matches!(gain_percent(&zero, &zero, Metric::Drops), Err(HarnessError::ZeroBaseline(_))));
    }

    #[test]
    fn gains_csv_format() {
        let s = summary_with(Protocol::Dcf, Metric::Drops, &[0.0]);
        let csv = gains_csv(&gains(&s, &s).unwrap());
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some(GAINS_HEADER));
        assert!(csv.contains("drops,0.000000,0.000000,\n"));
    }
}
