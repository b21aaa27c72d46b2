//! Scenario files: one experiment per file, flat `key = value` pairs with
//! `[section]` headers (TOML).
//!
//! Three network presets cover the evaluation settings: `large-scale`
//! (200 ms RTT, 25 Mb/s), `regional` (100 ms, 100 Mb/s) and `national`
//! (20 ms, 100 Mb/s). A preset name alone is a valid scenario; a file can
//! reference one under `[net]` and override any field.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use treebft::collections::{CryptoCostModel, ProcessId, Scheme};
use treebft::consensus::{EngineConfig, PipelineConfig};
use treebft::simnet::{FaultEntry, FaultKind, FaultSchedule, NetParams, SimTime};
use treebft::tree::{BinPartition, TreeShape};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read scenario {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot parse scenario {path}: {source}")]
    Parse {
        path: String,
        source: toml::de::Error,
    },
    #[error("invalid scenario field {field}: {reason}")]
    Invalid { field: String, reason: String },
}

fn invalid(field: &str, reason: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopologyKind {
    Star,
    Tree,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub kind: TopologyKind,
    #[serde(default)]
    pub height: Option<u32>,
    #[serde(default)]
    pub root_fanout: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub rtt_us: Option<u64>,
    #[serde(default)]
    pub bandwidth_bps: Option<u64>,
    #[serde(default)]
    pub delta_us: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeSpec {
    Naive,
    Aggregate,
}

impl From<SchemeSpec> for Scheme {
    fn from(s: SchemeSpec) -> Scheme {
        match s {
            SchemeSpec::Naive => Scheme::NaiveSet,
            SchemeSpec::Aggregate => Scheme::Aggregate,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CryptoSection {
    #[serde(default)]
    pub scheme: Option<SchemeSpec>,
    #[serde(default)]
    pub sign_us: Option<u64>,
    #[serde(default)]
    pub verify_us: Option<u64>,
    #[serde(default)]
    pub aggregate_per_element_us: Option<u64>,
    #[serde(default)]
    pub share_wire_bytes: Option<u64>,
    #[serde(default)]
    pub aggregate_wire_bytes: Option<u64>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSection {
    #[serde(default = "default_base_depth")]
    pub base_depth: u32,
    /// 0 selects the stretch recommended by the performance model.
    #[serde(default)]
    pub stretch: u32,
}

fn default_base_depth() -> u32 {
    4
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            base_depth: 4,
            stretch: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKindSpec {
    Crash,
    OmitAll,
    OmitAggregates,
}

impl From<FaultKindSpec> for FaultKind {
    fn from(k: FaultKindSpec) -> FaultKind {
        match k {
            FaultKindSpec::Crash => FaultKind::CrashSilent,
            FaultKindSpec::OmitAll => FaultKind::OmitAll,
            FaultKindSpec::OmitAggregates => FaultKind::OmitAggregates,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    pub process: u32,
    pub kind: FaultKindSpec,
    #[serde(default)]
    pub at_s: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub n: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_duration")]
    pub duration_s: f64,
    #[serde(default = "default_drain")]
    pub drain_s: f64,
    #[serde(default = "default_view_timeout")]
    pub view_timeout_s: f64,
    #[serde(default)]
    pub gst_us: u64,
    #[serde(default = "default_block_bits")]
    pub block_bits: u64,
    #[serde(default = "default_ops_per_block")]
    pub ops_per_block: u64,
    #[serde(default = "default_header_bytes")]
    pub header_bytes: u64,
    pub topology: Topology,
    #[serde(default)]
    pub net: NetSection,
    #[serde(default)]
    pub crypto: CryptoSection,
    #[serde(default)]
    pub pipeline: PipelineSection,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

fn default_seed() -> u64 {
    42
}
fn default_duration() -> f64 {
    100.0
}
fn default_drain() -> f64 {
    30.0
}
fn default_view_timeout() -> f64 {
    2.0
}
fn default_block_bits() -> u64 {
    100_000
}
fn default_ops_per_block() -> u64 {
    400
}
fn default_header_bytes() -> u64 {
    512
}

/// Fully validated experiment description.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: u32,
    pub seed: u64,
    pub duration_s: f64,
    pub drain_s: f64,
    pub view_timeout_s: f64,
    pub gst_us: u64,
    pub block_bits: u64,
    pub ops_per_block: u64,
    pub header_bytes: u64,
    pub topology: TopologyKind,
    pub shape: TreeShape,
    pub scheme: Scheme,
    pub crypto: CryptoCostModel,
    pub net: NetParams,
    pub pipeline: PipelineSection,
    pub faults: Vec<FaultSpec>,
}

fn preset_net(name: &str) -> Option<(u64, u64)> {
    match name {
        "large-scale" => Some((200_000, 25_000_000)),
        "regional" => Some((100_000, 100_000_000)),
        "national" => Some((20_000, 100_000_000)),
        _ => None,
    }
}

impl ScenarioConfig {
    pub fn quorum(&self) -> usize {
        2 * self.f() + 1
    }

    pub fn f(&self) -> usize {
        ((self.n - 1) / 3) as usize
    }

    pub fn processes(&self) -> Vec<ProcessId> {
        (0..self.n).map(ProcessId).collect()
    }

    pub fn fault_schedule(&self) -> FaultSchedule {
        FaultSchedule {
            entries: self
                .faults
                .iter()
                .map(|f| FaultEntry {
                    process: ProcessId(f.process),
                    kind: f.kind.into(),
                    activation: SimTime::from_secs_f64(f.at_s),
                })
                .collect(),
        }
    }

    /// Protocol parameters derived from the scenario; `stretch` is the
    /// resolved pipeline stretch (the file's value, or the model's pick).
    pub fn engine_config(&self, stretch: u32) -> EngineConfig {
        let procs = self.processes();
        let partition = BinPartition::new(&procs, self.shape.internal_slots());
        EngineConfig {
            n: self.n,
            f: self.f(),
            scheme: self.scheme,
            crypto: self.crypto,
            keyring: treebft::collections::Keyring::generate(self.n, self.seed),
            partition,
            shape: self.shape,
            block_bits: self.block_bits,
            pipeline: PipelineConfig {
                base_depth: self.pipeline.base_depth,
                stretch,
            },
            delta_us: self.net.delta_us,
            view_timeout_us: (self.view_timeout_s * 1e6).round() as u64,
            admission_deadline: SimTime::from_secs_f64(self.duration_s),
            header_bytes: self.header_bytes,
        }
    }
}

fn validate(file: ScenarioFile) -> Result<ScenarioConfig, ScenarioError> {
    if file.n < 2 {
        return Err(invalid("n", "need at least two processes"));
    }
    if file.duration_s <= 0.0 {
        return Err(invalid("duration_s", "must be positive"));
    }
    if file.view_timeout_s <= 0.0 {
        return Err(invalid("view_timeout_s", "must be positive"));
    }

    let shape = match file.topology.kind {
        TopologyKind::Star => TreeShape {
            height: 2,
            root_fanout: file.n as usize - 1,
        },
        TopologyKind::Tree => {
            let height = file
                .topology
                .height
                .ok_or_else(|| invalid("topology.height", "required for tree topologies"))?;
            let root_fanout = file
                .topology
                .root_fanout
                .ok_or_else(|| invalid("topology.root_fanout", "required for tree topologies"))?;
            TreeShape {
                height,
                root_fanout,
            }
        }
    };
    // The shape must actually build over n processes.
    let procs: Vec<ProcessId> = (0..file.n).map(ProcessId).collect();
    if shape.height > 2 {
        treebft::tree::make_balanced_tree(&procs, shape.height, shape.root_fanout).map_err(
            |e| invalid("topology", format!("infeasible for n = {}: {e}", file.n)),
        )?;
    }

    let scheme: Scheme = file
        .crypto
        .scheme
        .unwrap_or(match file.topology.kind {
            TopologyKind::Star => SchemeSpec::Naive,
            TopologyKind::Tree => SchemeSpec::Aggregate,
        })
        .into();
    let base = match scheme {
        Scheme::NaiveSet => CryptoCostModel::secp_like(),
        Scheme::Aggregate => CryptoCostModel::bls_like(),
    };
    let crypto = CryptoCostModel {
        sign_us: file.crypto.sign_us.unwrap_or(base.sign_us),
        verify_us: file.crypto.verify_us.unwrap_or(base.verify_us),
        aggregate_per_element_us: file
            .crypto
            .aggregate_per_element_us
            .unwrap_or(base.aggregate_per_element_us),
        share_wire_bytes: file.crypto.share_wire_bytes.unwrap_or(base.share_wire_bytes),
        aggregate_wire_bytes: file
            .crypto
            .aggregate_wire_bytes
            .unwrap_or(base.aggregate_wire_bytes),
    };

    let (mut rtt_us, mut bandwidth_bps) = (None, None);
    if let Some(p) = &file.net.preset {
        let (r, b) =
            preset_net(p).ok_or_else(|| invalid("net.preset", format!("unknown preset {p}")))?;
        rtt_us = Some(r);
        bandwidth_bps = Some(b);
    }
    let rtt_us = file
        .net
        .rtt_us
        .or(rtt_us)
        .ok_or_else(|| invalid("net", "set net.preset or net.rtt_us"))?;
    let bandwidth_bps = file
        .net
        .bandwidth_bps
        .or(bandwidth_bps)
        .ok_or_else(|| invalid("net", "set net.preset or net.bandwidth_bps"))?;

    // Default impatient-channel budget: a full dissemination round (the
    // root's transmission burst plus one RTT per tree level), plus the CPU
    // a hop may spend on a worst-case burst of piggybacked instances. The
    // budget only delays fault detection; windows close as soon as every
    // child has answered.
    let f = ((file.n - 1) / 3) as u64;
    let quorum = (2 * f + 1) as usize;
    let qc_bytes = match scheme {
        Scheme::NaiveSet => quorum as u64 * crypto.share_wire_bytes,
        Scheme::Aggregate => crypto.aggregate_wire_bytes,
    };
    let msg_bits = file.block_bits + 8 * (file.header_bytes + qc_bytes);
    let burst_us =
        (shape.root_fanout as u128 * msg_bits as u128 * 1_000_000 / bandwidth_bps as u128) as u64;
    let delta_us = file.net.delta_us.unwrap_or_else(|| {
        use treebft::collections::{cpu_cost, CryptoOp};
        let internal = shape.internal_slots();
        let widest = shape
            .root_fanout
            .max((file.n as usize).div_ceil(internal.max(1)));
        let subtree = (file.n as usize / internal.max(1)).max(1);
        let per_instance_hop = cpu_cost(CryptoOp::Verify, scheme, 1, &crypto)
            + cpu_cost(CryptoOp::Verify, scheme, quorum, &crypto)
            + cpu_cost(CryptoOp::Sign, scheme, 1, &crypto)
            + widest as u64
                * (cpu_cost(CryptoOp::Verify, scheme, subtree, &crypto)
                    + cpu_cost(CryptoOp::Combine, scheme, subtree, &crypto));
        let burst_instances = (file.pipeline.base_depth * file.pipeline.stretch.max(8)) as u64;
        shape.height as u64 * rtt_us + burst_us + 2 * burst_instances * per_instance_hop
    });
    let delta_us = delta_us.max(rtt_us);
    let net = NetParams {
        rtt_us,
        bandwidth_bps,
        delta_us,
    };
    net.validate().map_err(|e| invalid("net", e))?;

    let faults_distinct = {
        let mut ids: Vec<u32> = file.faults.iter().map(|f| f.process).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    };
    if faults_distinct > ((file.n - 1) / 3) as usize {
        return Err(invalid(
            "faults",
            format!(
                "{faults_distinct} faulty processes exceed the budget f = {}",
                (file.n - 1) / 3
            ),
        ));
    }
    for (i, fault) in file.faults.iter().enumerate() {
        if fault.process >= file.n {
            return Err(invalid(
                &format!("faults[{i}].process"),
                format!("process {} out of range", fault.process),
            ));
        }
    }

    Ok(ScenarioConfig {
        name: file.name,
        n: file.n,
        seed: file.seed,
        duration_s: file.duration_s,
        drain_s: file.drain_s,
        view_timeout_s: file.view_timeout_s,
        gst_us: file.gst_us,
        block_bits: file.block_bits,
        ops_per_block: file.ops_per_block,
        header_bytes: file.header_bytes,
        topology: file.topology.kind,
        shape,
        scheme,
        crypto,
        net,
        pipeline: file.pipeline,
        faults: file.faults,
    })
}

/// Built-in whole-scenario presets: 100 processes on the preset network,
/// tree with fanout 10 (or a star when suffixed `-star`).
fn builtin(name: &str) -> Option<ScenarioFile> {
    let (base, star) = match name.strip_suffix("-star") {
        Some(prefix) => (prefix, true),
        None => (name, false),
    };
    preset_net(base)?;
    Some(ScenarioFile {
        name: name.to_string(),
        n: 100,
        seed: default_seed(),
        duration_s: default_duration(),
        drain_s: default_drain(),
        view_timeout_s: default_view_timeout(),
        gst_us: 0,
        block_bits: default_block_bits(),
        ops_per_block: default_ops_per_block(),
        header_bytes: default_header_bytes(),
        topology: Topology {
            kind: if star {
                TopologyKind::Star
            } else {
                TopologyKind::Tree
            },
            height: (!star).then_some(3),
            root_fanout: (!star).then_some(10),
        },
        net: NetSection {
            preset: Some(base.to_string()),
            ..Default::default()
        },
        crypto: CryptoSection::default(),
        pipeline: PipelineSection::default(),
        faults: Vec::new(),
    })
}

/// Loads a scenario from a file path or a built-in preset name.
pub fn load_scenario(path: &str) -> Result<ScenarioConfig, ScenarioError> {
    if !Path::new(path).exists() {
        if let Some(file) = builtin(path) {
            return validate(file);
        }
    }
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_string(),
        source,
    })?;
    let file: ScenarioFile = toml::from_str(&text).map_err(|source| ScenarioError::Parse {
        path: path.to_string(),
        source,
    })?;
    validate(file)
}

/// Parses scenario text directly (used by tests and sweeps).
pub fn parse_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let file: ScenarioFile = toml::from_str(text).map_err(|source| ScenarioError::Parse {
        path: "<inline>".to_string(),
        source,
    })?;
    validate(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_the_published_networks() {
        let ls = load_scenario("large-scale").unwrap();
        assert_eq!(ls.net.rtt_us, 200_000);
        assert_eq!(ls.net.bandwidth_bps, 25_000_000);
        let nat = load_scenario("national").unwrap();
        assert_eq!(nat.net.rtt_us, 20_000);
        assert_eq!(nat.net.bandwidth_bps, 100_000_000);
        let reg = load_scenario("regional").unwrap();
        assert_eq!(reg.net.rtt_us, 100_000);
        assert_eq!(reg.net.bandwidth_bps, 100_000_000);
    }

    #[test]
    fn infeasible_tree_is_rejected() {
        let err = parse_scenario(
            r#"
name = "bad"
n = 5
[topology]
kind = "tree"
height = 3
root_fanout = 10
[net]
preset = "national"
"#,
        )
        .unwrap_err();
        assert!(matches!(err, ScenarioError::Invalid { .. }), "{err}");
    }

    #[test]
    fn fault_budget_is_validated() {
        let err = parse_scenario(
            r#"
name = "bad"
n = 7
[topology]
kind = "star"
[net]
preset = "national"
[[faults]]
process = 0
kind = "crash"
[[faults]]
process = 1
kind = "crash"
[[faults]]
process = 2
kind = "crash"
"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("budget"), "{err}");
    }

    #[test]
    fn scheme_defaults_follow_topology() {
        let star = load_scenario("large-scale-star").unwrap();
        assert_eq!(star.scheme, Scheme::NaiveSet);
        assert_eq!(star.crypto.verify_us, 100);
        let tree = load_scenario("large-scale").unwrap();
        assert_eq!(tree.scheme, Scheme::Aggregate);
        assert_eq!(tree.crypto.verify_us, 3000);
    }
}
