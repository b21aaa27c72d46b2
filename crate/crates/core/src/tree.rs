//! Communication topologies and the evolving-graph reconfiguration strategy.
//!
//! A [`TreeConfig`] is one static rooted tree spanning all processes; the
//! star is the height-2 special case so a single protocol engine serves both
//! topologies. Reconfiguration walks an *evolving graph*: processes are split
//! into disjoint bins of `I` candidates ([`BinPartition`]) and configuration
//! `k` draws its root and internal nodes from bin `k mod bins`
//! ([`build`]). With at least `f+1` bins, some bin holds no faulty process,
//! so a tree with fault-free internals appears within `f+1` configurations
//! ([`conformity_bound_check`]).
//!
//! When the process count only allows `f` bins plus leftovers, a rotation
//! schedule over one bin still reaches a clean internal set in linearly many
//! steps ([`plan_linear_rotation`]).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::One;
use thiserror::Error;

use crate::collections::ProcessId;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TreeError {
    #[error("cannot build a height-{height} tree with fanout {fanout} from {n} processes")]
    ShapeInfeasible { n: usize, height: u32, fanout: usize },
    #[error("{bins} bins of size {bin_size} cannot cover f = {f} (need at least f+1 bins)")]
    InsufficientBins { bins: usize, bin_size: usize, f: usize },
    #[error("robust fraction undefined for N = {n}, I = {i}, f = {f}")]
    OutOfDomain { n: u64, i: u64, f: u64 },
    #[error("no fault-free bin within the partition")]
    ConformityExhausted,
    #[error("no rotation plan can cover f = {f} with {bins} bins and {leftover} leftovers")]
    Infeasible { bins: usize, leftover: usize, f: usize },
}

/// Tree shape: node levels counted from 1, so the star has height 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeShape {
    pub height: u32,
    pub root_fanout: usize,
}

impl TreeShape {
    /// Number of internal slots (root included): the internal levels are
    /// perfect `root_fanout`-ary, leaves fill the last level.
    pub fn internal_slots(&self) -> usize {
        let mut total = 0usize;
        let mut level = 1usize;
        for _ in 1..self.height {
            total += level;
            level *= self.root_fanout;
        }
        total.max(1)
    }
}

/// One static communication tree over all `N` processes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeConfig {
    pub root: ProcessId,
    pub parent: BTreeMap<ProcessId, ProcessId>,
    pub children: BTreeMap<ProcessId, Vec<ProcessId>>,
    pub height: u32,
    pub internal: BTreeSet<ProcessId>,
}

impl TreeConfig {
    pub fn len(&self) -> usize {
        self.children.len()
    }

    pub fn is_empty(&self) -> bool {
        self.children.is_empty()
    }

    pub fn parent_of(&self, p: ProcessId) -> Option<ProcessId> {
        self.parent.get(&p).copied()
    }

    pub fn children_of(&self, p: ProcessId) -> &[ProcessId] {
        self.children.get(&p).map(|v| v.as_slice()).unwrap_or(&[])
    }

    pub fn processes(&self) -> impl Iterator<Item = ProcessId> + '_ {
        self.children.keys().copied()
    }

    /// Hop count from the root; the root itself is at depth 0.
    pub fn depth_of(&self, mut p: ProcessId) -> u32 {
        let mut d = 0;
        while let Some(q) = self.parent_of(p) {
            p = q;
            d += 1;
        }
        d
    }

    /// Number of processes in the subtree rooted at `p`, `p` included.
    pub fn subtree_size(&self, p: ProcessId) -> usize {
        let mut size = 1;
        for &c in self.children_of(p) {
            size += self.subtree_size(c);
        }
        size
    }

    /// Canonical adjacency text: one line per node, `id: child,child,...`.
    pub fn to_adjacency_text(&self) -> String {
        let mut out = String::new();
        for (p, kids) in &self.children {
            let list: Vec<String> = kids.iter().map(|c| c.0.to_string()).collect();
            let _ = writeln!(out, "{}: {}", p.0, list.join(","));
        }
        out
    }

    fn from_levels(levels: Vec<Vec<ProcessId>>, leaf_parents: Vec<(ProcessId, ProcessId)>) -> Self {
        let mut parent = BTreeMap::new();
        let mut children: BTreeMap<ProcessId, Vec<ProcessId>> = BTreeMap::new();
        for level in &levels {
            for &p in level {
                children.entry(p).or_default();
            }
        }
        // Internal levels connect breadth-first: node j of level l+1 hangs
        // off node j / fanout of level l.
        for w in levels.windows(2) {
            let (upper, lower) = (&w[0], &w[1]);
            let per = lower.len().div_ceil(upper.len());
            for (j, &c) in lower.iter().enumerate() {
                let p = upper[j / per];
                parent.insert(c, p);
                children.get_mut(&p).unwrap().push(c);
            }
        }
        for (leaf, par) in leaf_parents {
            children.entry(leaf).or_default();
            parent.insert(leaf, par);
            children.get_mut(&par).unwrap().push(leaf);
        }
        let root = levels[0][0];
        let internal: BTreeSet<ProcessId> = levels.iter().flatten().copied().collect();
        let mut cfg = Self {
            root,
            parent,
            children,
            height: 0,
            internal,
        };
        let height = cfg
            .processes()
            .collect::<Vec<_>>()
            .into_iter()
            .map(|p| cfg.depth_of(p))
            .max()
            .unwrap_or(0)
            + 1;
        cfg.height = height;
        cfg
    }
}

/// Builds a balanced tree: `processes[0]` is the root, the next
/// `root_fanout` processes form level 2, middle internal levels are perfect
/// `root_fanout`-ary, and the remaining processes become leaves attached
/// round-robin so sibling fanouts differ by at most one.
pub fn make_balanced_tree(
    processes: &[ProcessId],
    height: u32,
    root_fanout: usize,
) -> Result<TreeConfig, TreeError> {
    let n = processes.len();
    let infeasible = || TreeError::ShapeInfeasible {
        n,
        height,
        fanout: root_fanout,
    };
    if height < 2 || root_fanout < 1 || n < 2 {
        return Err(infeasible());
    }
    if height == 2 {
        if root_fanout != n - 1 {
            return Err(infeasible());
        }
        return Ok(make_star(processes)?);
    }
    let shape = TreeShape {
        height,
        root_fanout,
    };
    let internal_count = shape.internal_slots();
    let bottom = root_fanout.pow(height - 2);
    // Every bottom-level internal node needs at least one leaf child.
    if n < internal_count + bottom {
        return Err(infeasible());
    }
    assign_to_shape(processes, shape)
}

fn assign_to_shape(processes: &[ProcessId], shape: TreeShape) -> Result<TreeConfig, TreeError> {
    let n = processes.len();
    let mut levels: Vec<Vec<ProcessId>> = Vec::new();
    let mut idx = 0usize;
    let mut width = 1usize;
    for _ in 1..shape.height {
        if idx + width > n {
            return Err(TreeError::ShapeInfeasible {
                n,
                height: shape.height,
                fanout: shape.root_fanout,
            });
        }
        levels.push(processes[idx..idx + width].to_vec());
        idx += width;
        width *= shape.root_fanout;
    }
    let bottom = levels.last().unwrap().clone();
    let leaves = &processes[idx..];
    let leaf_parents = leaves
        .iter()
        .enumerate()
        .map(|(j, &leaf)| (leaf, bottom[j % bottom.len()]))
        .collect();
    Ok(TreeConfig::from_levels(levels, leaf_parents))
}

/// Height-2 tree: the first process is the hub, everyone else a leaf.
pub fn make_star(processes: &[ProcessId]) -> Result<TreeConfig, TreeError> {
    if processes.len() < 2 {
        return Err(TreeError::ShapeInfeasible {
            n: processes.len(),
            height: 2,
            fanout: processes.len().saturating_sub(1),
        });
    }
    let root = processes[0];
    let leaf_parents = processes[1..].iter().map(|&p| (p, root)).collect();
    Ok(TreeConfig::from_levels(vec![vec![root]], leaf_parents))
}

/// Disjoint bins of internal-node candidates plus the leftover processes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinPartition {
    pub bins: Vec<Vec<ProcessId>>,
    pub bin_size: usize,
    pub leftover: Vec<ProcessId>,
}

impl BinPartition {
    /// Splits `processes` in order into `floor(N / bin_size)` bins; the
    /// remainder lands in `leftover`. No fault-budget check.
    pub fn new(processes: &[ProcessId], bin_size: usize) -> Self {
        let count = processes.len() / bin_size;
        let bins = (0..count)
            .map(|i| processes[i * bin_size..(i + 1) * bin_size].to_vec())
            .collect();
        Self {
            bins,
            bin_size,
            leftover: processes[count * bin_size..].to_vec(),
        }
    }

    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }
}

/// Splits processes into bins of exactly `bin_size`, requiring enough bins
/// to cover `f` faults plus one clean bin.
pub fn partition_bins(
    processes: &[ProcessId],
    bin_size: usize,
    f: usize,
) -> Result<BinPartition, TreeError> {
    let partition = BinPartition::new(processes, bin_size);
    if partition.bin_count() < f + 1 {
        return Err(TreeError::InsufficientBins {
            bins: partition.bin_count(),
            bin_size,
            f,
        });
    }
    Ok(partition)
}

/// Set of faulty processes with its budget.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultSet {
    pub faulty: BTreeSet<ProcessId>,
}

impl FaultSet {
    pub fn from_iter(iter: impl IntoIterator<Item = ProcessId>) -> Self {
        Self {
            faulty: iter.into_iter().collect(),
        }
    }

    pub fn contains(&self, p: ProcessId) -> bool {
        self.faulty.contains(&p)
    }

    pub fn len(&self) -> usize {
        self.faulty.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faulty.is_empty()
    }
}

/// Builds configuration `k` of the evolving graph: members of bin
/// `k mod bins` fill the root and internal slots breadth-first (in bin
/// order); all other processes become leaves attached round-robin by id.
pub fn build(
    k: u64,
    partition: &BinPartition,
    shape: TreeShape,
) -> Result<TreeConfig, TreeError> {
    let n: usize =
        partition.bins.len() * partition.bin_size + partition.leftover.len();
    if shape.internal_slots() != partition.bin_size || partition.bins.is_empty() {
        return Err(TreeError::ShapeInfeasible {
            n,
            height: shape.height,
            fanout: shape.root_fanout,
        });
    }
    let bin = &partition.bins[(k % partition.bins.len() as u64) as usize];
    let member: BTreeSet<ProcessId> = bin.iter().copied().collect();
    let mut ordered: Vec<ProcessId> = bin.clone();
    // Leaves in ascending id order, taken from every process not in the bin.
    let mut leaves: Vec<ProcessId> = partition
        .bins
        .iter()
        .flatten()
        .chain(partition.leftover.iter())
        .copied()
        .filter(|p| !member.contains(p))
        .collect();
    leaves.sort();
    ordered.append(&mut leaves);
    assign_to_shape(&ordered, shape)
}

/// Robust-graph check: the root is correct and the path between any two
/// correct processes crosses no faulty vertex. A faulty internal node whose
/// entire subtree is faulty cuts no correct-correct path and is tolerated.
pub fn is_robust(tree: &TreeConfig, faults: &FaultSet) -> bool {
    if faults.contains(tree.root) {
        return false;
    }
    for p in tree.processes() {
        if faults.contains(p) {
            continue;
        }
        let mut cur = p;
        while let Some(up) = tree.parent_of(cur) {
            if faults.contains(up) {
                return false;
            }
            cur = up;
        }
    }
    true
}

/// Stricter criterion used by the evolving-graph construction: every
/// internal node (root included) is correct.
pub fn has_fault_free_internals(tree: &TreeConfig, faults: &FaultSet) -> bool {
    tree.internal.iter().all(|p| !faults.contains(*p))
}

/// Exact probability that a uniformly random assignment of `i` internal
/// slots avoids all `f` faulty processes:
/// `(N-f)! (N-I)! / ((N-f-I)! N!)`.
pub fn robust_fraction(n: u64, i: u64, f: u64) -> Result<BigRational, TreeError> {
    if i == 0 || i > n || n < f || n - f < i {
        return Err(TreeError::OutOfDomain { n, i, f });
    }
    // Product form of the factorial expression: prod_{j=0..I-1} (N-f-j)/(N-j).
    let mut acc = BigRational::one();
    for j in 0..i {
        let num = BigInt::from(n - f - j);
        let den = BigInt::from(n - j);
        acc *= BigRational::new(num, den);
    }
    Ok(acc)
}

/// Smallest `k` whose configuration has fault-free internals. The bin
/// construction guarantees `k <= f` whenever the partition has at least
/// `f+1` bins.
pub fn conformity_bound_check(
    partition: &BinPartition,
    shape: TreeShape,
    faults: &FaultSet,
) -> Result<u64, TreeError> {
    for k in 0..partition.bin_count() as u64 {
        let tree = build(k, partition, shape)?;
        if has_fault_free_internals(&tree, faults) {
            return Ok(k);
        }
    }
    Err(TreeError::ConformityExhausted)
}

/// Candidate internal-node sets for the leftover-rotation strategy used when
/// only `f` bins fit. The plan lists every bin, then substitutes leftover
/// processes into bin 0 block by block; if no bin is clean, each bin holds
/// exactly one fault and the leftovers are all correct, so the step that
/// displaces bin 0's faulty member is fault-free.
pub fn plan_linear_rotation(
    partition: &BinPartition,
    f: usize,
) -> Result<Vec<Vec<ProcessId>>, TreeError> {
    let bins = partition.bin_count();
    let leftover = &partition.leftover;
    let infeasible = || TreeError::Infeasible {
        bins,
        leftover: leftover.len(),
        f,
    };
    if f > bins * 2 || bins < f {
        return Err(infeasible());
    }
    if bins == f && leftover.is_empty() {
        return Err(infeasible());
    }
    let mut plan: Vec<Vec<ProcessId>> = partition.bins.clone();
    if !leftover.is_empty() {
        let block = leftover.len().min(partition.bin_size);
        let steps = partition.bin_size.div_ceil(block);
        for s in 0..steps {
            let lo = s * block;
            let hi = ((s + 1) * block).min(partition.bin_size);
            let mut candidate = partition.bins[0].clone();
            for (slot, fresh) in (lo..hi).zip(leftover.iter()) {
                candidate[slot] = *fresh;
            }
            plan.push(candidate);
        }
    }
    Ok(plan)
}
