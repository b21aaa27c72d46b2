//! Closed-form performance model for the tree and star pipelines.
//!
//! The root of the dissemination tree alternates between a busy period —
//! transmitting one message to each of its `m` children and processing
//! replies — and an idle period waiting for the furthest responses:
//!
//! * busy time `BT = m * msg / b + phi`
//! * idle time `IT = (h - 1) * RTT` (hops from root to the deepest leaf)
//!
//! The root can overlap `IT / BT` additional consensus instances with one
//! round, multiplying the base pipeline depth of four. The attainable
//! speedup of a fanout-`m` tree over the star is bounded by `(N - 1) / m`
//! and estimated as the ratio of the two busy times.
//!
//! Message size is the block plus a fixed per-message envelope plus the
//! quorum-certificate overhead of the signature scheme: `2f+1` 64-byte
//! shares for the naive set, one constant 96-byte aggregate otherwise. The
//! envelope and overhead can be disabled to obtain the bare block-only
//! figures.

use crate::collections::Scheme;

/// Per-message envelope charged on every wire message (framing, ids, hashes).
pub const HEADER_BYTES: u64 = 512;
/// Wire bytes of one naive share.
pub const SHARE_BYTES: u64 = 64;
/// Wire bytes of one constant-size aggregate.
pub const AGGREGATE_BYTES: u64 = 96;
/// Base pipeline depth: one instance per protocol round.
pub const BASE_DEPTH: u32 = 4;

/// Inputs for the analytic model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelInputs {
    pub n: u64,
    /// Tree height in node levels; the star is height 2.
    pub height: u32,
    pub root_fanout: u64,
    pub block_bits: u64,
    pub bandwidth_bps: u64,
    pub rtt_s: f64,
    /// Root-side processing time per round, seconds.
    pub phi_s: f64,
    pub scheme: Scheme,
    /// When false, messages carry only the block (bare-formula mode).
    pub with_overhead: bool,
}

impl ModelInputs {
    pub fn quorum(&self) -> u64 {
        2 * ((self.n - 1) / 3) + 1
    }

    /// Wire size of one root-to-child message in bits.
    pub fn msg_bits(&self) -> u64 {
        if !self.with_overhead {
            return self.block_bits;
        }
        let qc_bytes = match self.scheme {
            Scheme::NaiveSet => self.quorum() * SHARE_BYTES,
            Scheme::Aggregate => AGGREGATE_BYTES,
        };
        self.block_bits + 8 * (HEADER_BYTES + qc_bytes)
    }
}

/// Root transmission time for one round, `m * msg / b`, in seconds.
pub fn transmit_time(inputs: &ModelInputs) -> f64 {
    inputs.root_fanout as f64 * inputs.msg_bits() as f64 / inputs.bandwidth_bps as f64
}

/// Busy time `BT = m * msg / b + phi` in seconds.
pub fn busy_time(inputs: &ModelInputs) -> f64 {
    transmit_time(inputs) + inputs.phi_s
}

/// Idle time `IT = (h - 1) * RTT`: the star (height 2) waits one RTT, a
/// height-3 tree two.
pub fn idle_time(inputs: &ModelInputs) -> f64 {
    (inputs.height - 1) as f64 * inputs.rtt_s
}

/// Pipeline sizing derived from the busy/idle ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineDepth {
    /// Raw `IT / BT` ratio.
    pub ratio: f64,
    /// Stretch applied to the base depth; never below 1.
    pub stretch: u32,
    /// Concurrent instances the scheduler admits: `4 * stretch`.
    pub instances: u32,
}

/// Number of extra instances the root can start while idle. The integer
/// stretch rounds the ratio up so the pipeline covers the whole idle window.
pub fn pipeline_depth(inputs: &ModelInputs) -> PipelineDepth {
    let bt = busy_time(inputs);
    let ratio = idle_time(inputs) / bt;
    let stretch = (ratio.ceil() as u32).max(1);
    PipelineDepth {
        ratio,
        stretch,
        instances: BASE_DEPTH * stretch,
    }
}

/// Upper bound on the tree-over-star speedup, `(N - 1) / m`.
pub fn max_speedup(n: u64, root_fanout: u64) -> f64 {
    (n - 1) as f64 / root_fanout as f64
}

/// Estimated steady-state speedup of the tree over the star: with enough
/// pipelining both roots produce one block per busy period, so throughput
/// is inversely proportional to BT.
pub fn estimated_speedup(tree: &ModelInputs, star: &ModelInputs) -> f64 {
    busy_time(star) / busy_time(tree)
}

/// One CSV row of the model outputs for the CLI.
pub fn csv_row(inputs: &ModelInputs) -> String {
    let depth = pipeline_depth(inputs);
    format!(
        "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{:.6}",
        inputs.n,
        inputs.height,
        inputs.root_fanout,
        inputs.block_bits,
        inputs.bandwidth_bps,
        inputs.rtt_s,
        inputs.phi_s,
        busy_time(inputs),
        idle_time(inputs),
        depth.ratio,
        depth.stretch,
        max_speedup(inputs.n, inputs.root_fanout),
    )
}

pub const CSV_HEADER: &str =
    "n,height,root_fanout,block_bits,bandwidth_bps,rtt_s,phi_s,busy_time_s,idle_time_s,pipeline_ratio,stretch,max_speedup";

#[cfg(test)]
mod tests {
    use super::*;

    fn bare(n: u64, height: u32, m: u64, block_bits: u64, b: u64, rtt: f64) -> ModelInputs {
        ModelInputs {
            n,
            height,
            root_fanout: m,
            block_bits,
            bandwidth_bps: b,
            rtt_s: rtt,
            phi_s: 0.0,
            scheme: Scheme::Aggregate,
            with_overhead: false,
        }
    }

    #[test]
    fn bare_examples_exact() {
        // (n, h, m, block, bandwidth, rtt) -> (BT, IT, parallel instances)
        let rows: [(u64, u32, u64, u64, u64, f64, f64, f64, f64); 7] = [
            (401, 2, 400, 100_000, 100_000_000, 0.20, 0.4, 0.2, 0.5),
            (421, 3, 20, 100_000, 100_000_000, 0.20, 0.02, 0.4, 20.0),
            (421, 3, 20, 100_000, 100_000_000, 0.10, 0.02, 0.2, 10.0),
            (8420, 4, 20, 100_000, 100_000_000, 0.20, 0.02, 0.6, 30.0),
            (399, 4, 7, 100_000, 100_000_000, 0.20, 0.007, 0.6, 600.0 / 7.0),
            (421, 3, 20, 10_000, 100_000_000, 0.20, 0.002, 0.4, 200.0),
            (421, 3, 20, 100_000, 1_000_000_000, 0.20, 0.002, 0.4, 200.0),
        ];
        for (n, h, m, blk, b, rtt, bt, it, par) in rows {
            let inputs = bare(n, h, m, blk, b, rtt);
            assert!((busy_time(&inputs) - bt).abs() < 1e-12, "BT for n={n}");
            assert!((idle_time(&inputs) - it).abs() < 1e-12, "IT for n={n}");
            let d = pipeline_depth(&inputs);
            assert!((d.ratio - par).abs() < 1e-9, "ratio for n={n}: {}", d.ratio);
        }
    }

    #[test]
    fn overhead_reconstruction() {
        // Naive-set star messages: block + 2f+1 shares + envelope.
        let star400 = ModelInputs {
            phi_s: 0.03691,
            scheme: Scheme::NaiveSet,
            with_overhead: true,
            ..bare(400, 2, 399, 100_000, 25_000_000, 0.2)
        };
        assert_eq!(star400.quorum(), 267);
        assert_eq!(star400.msg_bits(), 100_000 + 8 * (512 + 267 * 64));
        let mbb = transmit_time(&star400);
        assert!((mbb - 3.843).abs() / 3.843 < 0.02, "{mbb}");

        let tree400 = ModelInputs {
            phi_s: 0.0379,
            with_overhead: true,
            ..bare(400, 3, 20, 100_000, 25_000_000, 0.2)
        };
        assert_eq!(tree400.msg_bits(), 100_000 + 8 * (512 + 96));
        let mbb = transmit_time(&tree400);
        assert!((mbb - 0.083).abs() / 0.083 < 0.02, "{mbb}");
    }

    #[test]
    fn speedups() {
        assert!((max_speedup(400, 20) - 19.95).abs() < 1e-9);
        assert!((max_speedup(400, 399) - 1.0).abs() < 1e-9);
        assert!((max_speedup(100, 10) - 9.9).abs() < 1e-9);

        let tree = ModelInputs {
            phi_s: 0.0379,
            with_overhead: true,
            ..bare(400, 3, 20, 100_000, 25_000_000, 0.2)
        };
        let star = ModelInputs {
            phi_s: 0.03691,
            scheme: Scheme::NaiveSet,
            with_overhead: true,
            ..bare(400, 2, 399, 100_000, 25_000_000, 0.2)
        };
        let est = estimated_speedup(&tree, &star);
        assert!((est - 32.0).abs() / 32.0 < 0.05, "{est}");
        assert!((estimated_speedup(&tree, &tree) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn stretch_rounding() {
        // IT/BT = 400/74 = 5.4 -> stretch 6 at the m=10 operating point.
        let tree = ModelInputs {
            phi_s: 0.03198,
            with_overhead: true,
            ..bare(100, 3, 10, 100_000, 25_000_000, 0.2)
        };
        let d = pipeline_depth(&tree);
        assert_eq!(d.stretch, 6);
        assert_eq!(d.instances, 24);
        // A star whose idle time is below its busy time keeps stretch 1.
        let star = ModelInputs {
            phi_s: 0.01058,
            scheme: Scheme::NaiveSet,
            with_overhead: true,
            ..bare(100, 2, 99, 100_000, 25_000_000, 0.2)
        };
        let d = pipeline_depth(&star);
        assert!(d.ratio < 1.0);
        assert_eq!(d.stretch, 1);
    }

    #[test]
    fn monotonicity() {
        let base = |n: u64, m: u64| max_speedup(n, m);
        assert!(base(400, 10) > base(400, 20));
        assert!(base(400, 20) > base(200, 20));
    }
}
