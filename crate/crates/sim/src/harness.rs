//! Experiment orchestration: runs scenarios, aggregates metrics, emits CSV.

use std::fmt::Write as _;

use thiserror::Error;

use treebft::collections::{cpu_cost, CryptoOp, Scheme};
use treebft::consensus::Simulation;
use treebft::perfmodel::{self, ModelInputs};
use treebft::simnet::SimTime;
use treebft::tree::TreeConfig;

use crate::scenario::ScenarioConfig;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("simulation setup failed: {0}")]
    Setup(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("CSV parse error: {0}")]
    Csv(String),
}

/// Aggregated results of one run. Rates are measured over `[0, duration)`;
/// the drain window beyond it only settles in-flight instances.
#[derive(Debug, Clone)]
pub struct RunMetrics {
    pub name: String,
    pub n: u32,
    pub height: u32,
    pub root_fanout: usize,
    pub scheme: Scheme,
    pub block_bits: u64,
    pub bandwidth_bps: u64,
    pub rtt_us: u64,
    pub duration_s: f64,
    pub ops_per_block: u64,
    pub stretch: u32,
    pub blocks_decided: u64,
    pub ops_per_s: f64,
    pub mean_latency_s: f64,
    pub view_changes: u64,
    pub max_bytes_sent_process: u64,
    pub total_bytes_sent: u64,
    /// Effective root-side processing per block interval (seconds), from
    /// the same cost model the engines charge.
    pub phi_eff_s: f64,
    /// Blocks first decided in each one-second bucket of the window.
    pub per_second: Vec<u64>,
    pub bytes_sent: Vec<u64>,
    /// True when every height proposed before the admission deadline was
    /// decided by the end of the drain.
    pub all_started_decided: bool,
    pub invalid_partials: u64,
}

pub const CSV_HEADER: &str = "name,n,height,root_fanout,scheme,block_bits,bandwidth_bps,rtt_us,duration_s,ops_per_block,stretch,blocks_decided,ops_per_s,mean_latency_s,view_changes,max_bytes_sent_process,total_bytes_sent,phi_eff_s";

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{CSV_HEADER}");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.6},{},{},{},{:.6},{:.6},{},{},{},{:.6}",
            self.name,
            self.n,
            self.height,
            self.root_fanout,
            scheme_str(self.scheme),
            self.block_bits,
            self.bandwidth_bps,
            self.rtt_us,
            self.duration_s,
            self.ops_per_block,
            self.stretch,
            self.blocks_decided,
            self.ops_per_s,
            self.mean_latency_s,
            self.view_changes,
            self.max_bytes_sent_process,
            self.total_bytes_sent,
            self.phi_eff_s,
        );
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, HarnessError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| HarnessError::Csv("empty".into()))?;
        if header.trim() != CSV_HEADER {
            return Err(HarnessError::Csv(format!("unexpected header: {header}")));
        }
        let row = lines
            .next()
            .ok_or_else(|| HarnessError::Csv("missing data row".into()))?;
        let cols: Vec<&str> = row.trim().split(',').collect();
        if cols.len() != 18 {
            return Err(HarnessError::Csv(format!("expected 18 columns, got {}", cols.len())));
        }
        fn num<T: std::str::FromStr>(s: &str, field: &str) -> Result<T, HarnessError> {
            s.parse()
                .map_err(|_| HarnessError::Csv(format!("bad {field}: {s}")))
        }
        Ok(Self {
            name: cols[0].to_string(),
            n: num(cols[1], "n")?,
            height: num(cols[2], "height")?,
            root_fanout: num(cols[3], "root_fanout")?,
            scheme: match cols[4] {
                "naive" => Scheme::NaiveSet,
                "aggregate" => Scheme::Aggregate,
                other => return Err(HarnessError::Csv(format!("bad scheme: {other}"))),
            },
            block_bits: num(cols[5], "block_bits")?,
            bandwidth_bps: num(cols[6], "bandwidth_bps")?,
            rtt_us: num(cols[7], "rtt_us")?,
            duration_s: num(cols[8], "duration_s")?,
            ops_per_block: num(cols[9], "ops_per_block")?,
            stretch: num(cols[10], "stretch")?,
            blocks_decided: num(cols[11], "blocks_decided")?,
            ops_per_s: num(cols[12], "ops_per_s")?,
            mean_latency_s: num(cols[13], "mean_latency_s")?,
            view_changes: num(cols[14], "view_changes")?,
            max_bytes_sent_process: num(cols[15], "max_bytes_sent_process")?,
            total_bytes_sent: num(cols[16], "total_bytes_sent")?,
            phi_eff_s: num(cols[17], "phi_eff_s")?,
            per_second: Vec::new(),
            bytes_sent: Vec::new(),
            all_started_decided: false,
            invalid_partials: 0,
        })
    }

    pub fn timeline_csv(&self) -> String {
        let mut out = String::from("second,blocks\n");
        for (s, b) in self.per_second.iter().enumerate() {
            let _ = writeln!(out, "{s},{b}");
        }
        out
    }
}

fn scheme_str(s: Scheme) -> &'static str {
    match s {
        Scheme::NaiveSet => "naive",
        Scheme::Aggregate => "aggregate",
    }
}

/// Root-side CPU per block interval under the scenario's cost model: three
/// aggregation rounds of child-partial verification and folding plus the
/// root's own signatures. Mirrors exactly what the engine charges.
fn root_cpu_per_tick_us(cfg: &ScenarioConfig, tree: &TreeConfig) -> u64 {
    let mut per_round = 0u64;
    for &c in tree.children_of(tree.root) {
        let k = tree.subtree_size(c);
        per_round += cpu_cost(CryptoOp::Verify, cfg.scheme, k, &cfg.crypto);
        per_round += cpu_cost(CryptoOp::Combine, cfg.scheme, k, &cfg.crypto);
    }
    per_round += cpu_cost(CryptoOp::Sign, cfg.scheme, 1, &cfg.crypto);
    3 * per_round + cpu_cost(CryptoOp::Sign, cfg.scheme, 1, &cfg.crypto)
}

/// Analytic-model inputs for a scenario. The root alternates between
/// transmitting and processing, so only the CPU time that does not overlap
/// the transmission burst extends the busy period.
pub fn derive_model_inputs(cfg: &ScenarioConfig) -> Result<ModelInputs, HarnessError> {
    let engine_cfg = cfg.engine_config(1);
    let tree = engine_cfg
        .tree_for_view(0)
        .map_err(|e| HarnessError::Setup(e.to_string()))?;
    let cpu_us = root_cpu_per_tick_us(cfg, &tree);
    let mut inputs = ModelInputs {
        n: cfg.n as u64,
        height: cfg.shape.height,
        root_fanout: cfg.shape.root_fanout as u64,
        block_bits: cfg.block_bits,
        bandwidth_bps: cfg.net.bandwidth_bps,
        rtt_s: cfg.net.rtt_us as f64 / 1e6,
        phi_s: 0.0,
        scheme: cfg.scheme,
        with_overhead: true,
    };
    let tx_s = perfmodel::transmit_time(&inputs);
    inputs.phi_s = (cpu_us as f64 / 1e6 - tx_s).max(0.0);
    Ok(inputs)
}

/// Resolves the pipeline stretch: the scenario's explicit value, or the
/// model's recommendation when left at zero.
pub fn resolve_stretch(cfg: &ScenarioConfig) -> Result<u32, HarnessError> {
    if cfg.pipeline.stretch > 0 {
        return Ok(cfg.pipeline.stretch);
    }
    let inputs = derive_model_inputs(cfg)?;
    Ok(perfmodel::pipeline_depth(&inputs).stretch)
}

/// Executes one scenario to completion and aggregates its metrics.
pub fn run(cfg: &ScenarioConfig) -> Result<RunMetrics, HarnessError> {
    run_with_trace(cfg, false).map(|(m, _)| m)
}

pub fn run_with_trace(
    cfg: &ScenarioConfig,
    capture_trace: bool,
) -> Result<(RunMetrics, Option<Vec<String>>), HarnessError> {
    let stretch = resolve_stretch(cfg)?;
    let engine_cfg = cfg.engine_config(stretch);
    let faults = cfg.fault_schedule();
    let mut sim = Simulation::new(
        engine_cfg,
        cfg.net,
        SimTime::us(cfg.gst_us),
        cfg.seed,
        &faults,
        capture_trace,
    )
    .map_err(|e| HarnessError::Setup(e.to_string()))?;
    let duration = SimTime::from_secs_f64(cfg.duration_s);
    let report = sim.run_until(SimTime::from_secs_f64(cfg.duration_s + cfg.drain_s));
    if let Some(fatal) = report.fatal {
        return Err(HarnessError::Invariant(fatal));
    }

    let decided_in_window: Vec<(u64, SimTime)> = report
        .first_decide
        .iter()
        .filter(|(_, t)| **t < duration)
        .map(|(h, t)| (*h, *t))
        .collect();
    let blocks_decided = decided_in_window.len() as u64;
    let ops_per_s = blocks_decided as f64 * cfg.ops_per_block as f64 / cfg.duration_s;
    let mut latency_sum = 0.0;
    let mut latency_count = 0u64;
    for (h, t) in &decided_in_window {
        if let Some(p) = report.first_propose.get(h) {
            latency_sum += t.saturating_sub(*p).as_secs_f64();
            latency_count += 1;
        }
    }
    let mean_latency_s = if latency_count > 0 {
        latency_sum / latency_count as f64
    } else {
        0.0
    };
    let mut per_second = vec![0u64; cfg.duration_s.ceil() as usize];
    for (_, t) in &decided_in_window {
        let bucket = (t.as_secs_f64().floor() as usize).min(per_second.len() - 1);
        per_second[bucket] += 1;
    }
    let bytes_sent: Vec<u64> = report.bits_sent.iter().map(|b| b / 8).collect();
    let max_bytes_sent_process = bytes_sent.iter().copied().max().unwrap_or(0);
    let total_bytes_sent = bytes_sent.iter().sum();
    let all_started_decided = report
        .first_propose
        .keys()
        .all(|h| report.first_decide.contains_key(h));

    let model = derive_model_inputs(cfg)?;
    let metrics = RunMetrics {
        name: cfg.name.clone(),
        n: cfg.n,
        height: cfg.shape.height,
        root_fanout: cfg.shape.root_fanout,
        scheme: cfg.scheme,
        block_bits: cfg.block_bits,
        bandwidth_bps: cfg.net.bandwidth_bps,
        rtt_us: cfg.net.rtt_us,
        duration_s: cfg.duration_s,
        ops_per_block: cfg.ops_per_block,
        stretch,
        blocks_decided,
        ops_per_s,
        mean_latency_s,
        view_changes: report.view_changes,
        max_bytes_sent_process,
        total_bytes_sent,
        phi_eff_s: model.phi_s,
        per_second,
        bytes_sent,
        all_started_decided,
        invalid_partials: report.invalid_partials,
    };
    Ok((metrics, report.trace))
}

/// Sweepable scenario fields.
pub fn apply_axis(cfg: &ScenarioConfig, axis: &str, value: f64) -> Result<ScenarioConfig, HarnessError> {
    let mut out = cfg.clone();
    match axis {
        "n" => out.n = value as u32,
        "stretch" => out.pipeline.stretch = value as u32,
        "seed" => out.seed = value as u64,
        "duration_s" => out.duration_s = value,
        "view_timeout_s" => out.view_timeout_s = value,
        "block_bits" => out.block_bits = value as u64,
        other => {
            return Err(HarnessError::Setup(format!(
                "unknown sweep axis {other}; expected one of n, stretch, seed, duration_s, view_timeout_s, block_bits"
            )))
        }
    }
    out.name = format!("{}-{}-{}", cfg.name, axis, value);
    Ok(out)
}

/// One run per value; rows aggregate in input order.
pub fn sweep(cfg: &ScenarioConfig, axis: &str, values: &[f64]) -> Result<String, HarnessError> {
    let mut out = String::from("axis,ops_per_s,mean_latency_s,view_changes\n");
    for v in values {
        let point = apply_axis(cfg, axis, *v)?;
        let m = run(&point)?;
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{}",
            fmt_axis_value(*v),
            m.ops_per_s,
            m.mean_latency_s,
            m.view_changes
        );
    }
    Ok(out)
}

fn fmt_axis_value(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{}", v as i64)
    } else {
        format!("{v:.6}")
    }
}

/// Side-by-side throughput ratio and model estimate for two finished runs.
#[derive(Debug, Clone)]
pub struct CompareReport {
    pub measured_ratio: f64,
    pub estimated_ratio: f64,
    pub a: String,
    pub b: String,
}

impl CompareReport {
    pub fn render(&self) -> String {
        format!(
            "run_a: {}\nrun_b: {}\nmeasured_speedup_a_over_b: {:.6}\nmodel_estimated_speedup: {:.6}\n",
            self.a, self.b, self.measured_ratio, self.estimated_ratio
        )
    }
}

fn model_inputs_from_metrics(m: &RunMetrics) -> ModelInputs {
    ModelInputs {
        n: m.n as u64,
        height: m.height,
        root_fanout: m.root_fanout as u64,
        block_bits: m.block_bits,
        bandwidth_bps: m.bandwidth_bps,
        rtt_s: m.rtt_us as f64 / 1e6,
        phi_s: m.phi_eff_s,
        scheme: m.scheme,
        with_overhead: true,
    }
}

/// Compares two runs of equal duration and block size: measured ops/s
/// ratio next to the analytic busy-time ratio.
pub fn compare(a: &RunMetrics, b: &RunMetrics) -> Result<CompareReport, HarnessError> {
    if (a.duration_s - b.duration_s).abs() > 1e-9 || a.block_bits != b.block_bits {
        return Err(HarnessError::Setup(
            "compared runs must share duration and block size".into(),
        ));
    }
    if b.ops_per_s == 0.0 {
        return Err(HarnessError::Setup("run_b decided no blocks".into()));
    }
    let est = perfmodel::estimated_speedup(
        &model_inputs_from_metrics(a),
        &model_inputs_from_metrics(b),
    );
    Ok(CompareReport {
        measured_ratio: a.ops_per_s / b.ops_per_s,
        estimated_ratio: est,
        a: a.name.clone(),
        b: b.name.clone(),
    })
}

/// Ledger consistency oracle used by tests: every pair of correct ledgers
/// agrees on common heights, and each correct ledger is contiguous from
/// height zero.
pub fn check_ledger_prefixes(
    ledgers: &[std::collections::BTreeMap<u64, treebft::consensus::BlockId>],
    crashed: &[bool],
    require_contiguous: bool,
) -> Result<(), HarnessError> {
    let mut union: std::collections::BTreeMap<u64, treebft::consensus::BlockId> =
        std::collections::BTreeMap::new();
    for (i, ledger) in ledgers.iter().enumerate() {
        for (h, id) in ledger {
            match union.get(h) {
                Some(existing) if existing != id => {
                    return Err(HarnessError::Invariant(format!(
                        "process {i} decided height {h} differently"
                    )));
                }
                _ => {
                    union.insert(*h, *id);
                }
            }
        }
    }
    if require_contiguous {
        for (i, ledger) in ledgers.iter().enumerate() {
            if crashed[i] {
                continue;
            }
            for (expect, (h, _)) in ledger.iter().enumerate() {
                if *h != expect as u64 {
                    return Err(HarnessError::Invariant(format!(
                        "process {i} has a ledger hole before height {h}"
                    )));
                }
            }
        }
    }
    Ok(())
}

pub use crate::scenario::parse_scenario;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::load_scenario;

    fn tiny(name: &str, extra: &str) -> ScenarioConfig {
        parse_scenario(&format!(
            r#"
name = "{name}"
n = 7
seed = 3
duration_s = 6.0
drain_s = 10.0
view_timeout_s = 2.0
[topology]
kind = "tree"
height = 3
root_fanout = 2
[net]
preset = "national"
[pipeline]
stretch = 1
{extra}
"#
        ))
        .unwrap()
    }

    #[test]
    fn deterministic_csv() {
        let cfg = tiny("det", "");
        let a = run(&cfg).unwrap().to_csv();
        let b = run(&cfg).unwrap().to_csv();
        assert_eq!(a, b);
        assert!(a.contains("det,7,3,2,aggregate"));
    }

    #[test]
    fn csv_round_trip() {
        let cfg = tiny("rt", "");
        let m = run(&cfg).unwrap();
        let parsed = RunMetrics::from_csv(&m.to_csv()).unwrap();
        assert_eq!(parsed.blocks_decided, m.blocks_decided);
        assert_eq!(parsed.n, 7);
        assert!((parsed.ops_per_s - m.ops_per_s).abs() < 1e-5);
    }

    #[test]
    fn identical_configs_compare_to_one() {
        let cfg = tiny("same", "");
        let m = run(&cfg).unwrap();
        let report = compare(&m, &m).unwrap();
        assert!((report.measured_ratio - 1.0).abs() < 1e-9);
        assert!((report.estimated_ratio - 1.0).abs() < 1e-9);
    }

    #[test]
    fn sweep_emits_one_row_per_value() {
        let cfg = tiny("sw", "");
        let csv = sweep(&cfg, "stretch", &[1.0, 2.0]).unwrap();
        let lines: Vec<&str> = csv.trim().lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0], "axis,ops_per_s,mean_latency_s,view_changes");
        assert!(lines[1].starts_with("1,"));
        let empty = sweep(&cfg, "stretch", &[]).unwrap();
        assert_eq!(empty.trim(), "axis,ops_per_s,mean_latency_s,view_changes");
    }

    #[test]
    fn presets_run() {
        let mut cfg = load_scenario("national").unwrap();
        cfg.duration_s = 3.0;
        cfg.drain_s = 5.0;
        cfg.pipeline.stretch = 1;
        let m = run(&cfg).unwrap();
        assert!(m.blocks_decided > 0);
        assert_eq!(m.view_changes, 0);
        assert!(m.all_started_decided);
    }
}
