//! Four-round leader-based consensus over a dissemination/aggregation tree.
//!
//! Each instance (one block at one height) runs four rounds. In every round
//! the root disseminates down the tree and, in rounds one to three, collects
//! a vote aggregate back up:
//!
//! 1. proposal down, *prepare* votes up;
//! 2. prepare certificate down, *pre-commit* votes up — a pre-commit
//!    certificate locks the value;
//! 3. pre-commit certificate down, *commit* votes up;
//! 4. commit certificate down: everyone decides.
//!
//! Non-root processes relay downward traffic to their children and fold the
//! vote collections of their subtrees before forwarding them to their
//! parent, waiting at most `delta` for each child. The root starts new
//! instances whenever fewer than `4 * stretch` are in flight, so rounds of
//! different instances overlap and messages heading for the same edge are
//! piggybacked into one wire bundle.
//!
//! A rolling inactivity pacemaker drives reconfiguration: a process that
//! sees no valid traffic for a full view timeout advances to the next view,
//! rebuilds the tree from the next bin of the partition, and reports its
//! locked certificates to the new root. The new root gathers `2f+1`
//! new-view messages, re-proposes every height up to the highest lock with
//! the original blocks, and restarts the pipeline with fresh blocks above
//! that point.
//!
//! Engines are deterministic state machines driven purely by simulator
//! events; all scheduling, transmission and CPU-cost bookkeeping lives in
//! [`Simulation`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::collections::{
    combine, cpu_cost, new_share, Collection, CryptoCostModel, CryptoOp, Keyring, ProcessId,
    Scheme,
};
use crate::simnet::{
    EventQueue, FaultKind, FaultSchedule, MessageKind, NetParams, Network, SendOutcome, SimError,
    SimTime,
};
use crate::tree::{build, BinPartition, TreeConfig, TreeError, TreeShape};

pub type BlockId = [u8; 32];

pub const GENESIS_PARENT: BlockId = [0u8; 32];

/// Block header carried in proposals; payload bytes are synthetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockInfo {
    pub id: BlockId,
    pub parent: BlockId,
    pub height: u64,
    pub size_bits: u64,
}

/// Quorum certificate: a collection holding at least `2f+1` shares of the
/// round's vote value.
#[derive(Debug, Clone, PartialEq)]
pub struct Qc {
    pub height: u64,
    /// Voting round the certificate closes: 1 prepare, 2 pre-commit,
    /// 3 commit.
    pub round: u8,
    pub block: BlockId,
    pub collection: Collection,
}

/// Lock evidence shipped in new-view messages.
#[derive(Debug, Clone, PartialEq)]
pub struct LockedEntry {
    pub block: BlockInfo,
    pub qc: Qc,
}

/// Protocol payloads; several parts may share one wire bundle.
#[derive(Debug, Clone)]
pub enum Part {
    /// Downward dissemination for round `round` of height `height`.
    Round {
        view: u64,
        height: u64,
        round: u8,
        block: Option<BlockInfo>,
        justify: Option<Qc>,
    },
    /// Upward (partial) vote aggregate for round `round`.
    Vote {
        view: u64,
        height: u64,
        round: u8,
        partial: Collection,
    },
    /// Report to the next root: signed view share, locks, known blocks.
    NewView {
        view: u64,
        share: Collection,
        locked: Vec<LockedEntry>,
        known: Vec<BlockInfo>,
    },
}

impl Part {
    pub fn kind(&self) -> MessageKind {
        match self {
            Part::Round { .. } => MessageKind::Proposal,
            Part::Vote { .. } => MessageKind::Vote,
            Part::NewView { .. } => MessageKind::NewView,
        }
    }
}

pub fn vote_value(block: &BlockId, round: u8) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(b"vote");
    h.update(block);
    h.update([round]);
    h.finalize().to_vec()
}

pub fn new_view_value(view: u64) -> Vec<u8> {
    let mut h = Sha256::new();
    h.update(b"newview");
    h.update(view.to_le_bytes());
    h.finalize().to_vec()
}

fn block_id(view: u64, height: u64, proposer: ProcessId, parent: &BlockId) -> BlockId {
    let mut h = Sha256::new();
    h.update(b"block");
    h.update(view.to_le_bytes());
    h.update(height.to_le_bytes());
    h.update(proposer.0.to_le_bytes());
    h.update(parent);
    h.finalize().into()
}

/// Pipelining degree: the root keeps at most `base_depth * stretch`
/// undecided instances in flight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineConfig {
    pub base_depth: u32,
    pub stretch: u32,
}

impl PipelineConfig {
    pub fn max_inflight(&self) -> u32 {
        self.base_depth * self.stretch
    }
}

/// Static protocol parameters shared by every process.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub n: u32,
    pub f: usize,
    pub scheme: Scheme,
    pub crypto: CryptoCostModel,
    pub keyring: Keyring,
    pub partition: BinPartition,
    pub shape: TreeShape,
    pub block_bits: u64,
    pub pipeline: PipelineConfig,
    pub delta_us: u64,
    pub view_timeout_us: u64,
    /// The root admits no fresh heights at or after this instant.
    pub admission_deadline: SimTime,
    /// Per-message envelope in bytes, charged once per wire bundle.
    pub header_bytes: u64,
}

impl EngineConfig {
    pub fn quorum(&self) -> usize {
        2 * self.f + 1
    }

    pub fn tree_for_view(&self, view: u64) -> Result<TreeConfig, TreeError> {
        build(view, &self.partition, self.shape)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimerKind {
    Kickoff,
    AggDeadline { view: u64, height: u64, round: u8 },
    PacemakerCheck,
}

#[derive(Debug, Clone)]
pub enum EngineEvent {
    Timer(TimerKind),
    Deliver { src: ProcessId, parts: Vec<Part> },
}

/// One send requested by the engine.
#[derive(Debug, Clone)]
pub struct SendReq {
    pub dst: ProcessId,
    pub part: Part,
}

/// Effects of handling one event. `cpu_us` is charged to the process's
/// local clock before any send departs or timer is armed.
#[derive(Debug, Default)]
pub struct Output {
    pub cpu_us: u64,
    pub sends: Vec<SendReq>,
    /// Timers relative to the CPU completion instant.
    pub timers: Vec<(u64, TimerKind)>,
    pub decided: Vec<(u64, BlockId)>,
    pub proposed: Vec<u64>,
    pub entered_view: Option<u64>,
    pub invalid_partials: u64,
    /// Set on a would-be agreement violation; the run must abort.
    pub fatal: Option<String>,
}

impl Output {
    fn charge(&mut self, us: u64) {
        self.cpu_us += us;
    }
}

/// Vote aggregation window for one (height, round) at one process.
#[derive(Debug, Clone)]
struct AggWindow {
    view: u64,
    collection: Collection,
    pending: BTreeSet<ProcessId>,
    /// Root only: certificate already extracted from this window.
    qc_formed: bool,
    closed: bool,
}

#[derive(Debug, Clone, Default)]
struct Instance {
    block: Option<BlockInfo>,
    /// Rounds this process has contributed a share to, per view.
    voted: BTreeSet<(u64, u8)>,
    agg: BTreeMap<u8, AggWindow>,
    decided: bool,
}

/// Per-process protocol state machine.
#[derive(Debug)]
pub struct Engine {
    pub id: ProcessId,
    cfg: Arc<EngineConfig>,
    view: u64,
    tree: TreeConfig,
    is_root: bool,
    last_progress: SimTime,
    instances: BTreeMap<u64, Instance>,
    /// Latest accepted block per height (across views).
    blocks: BTreeMap<u64, BlockInfo>,
    locks: BTreeMap<u64, LockedEntry>,
    ledger: BTreeMap<u64, BlockId>,
    decided_prefix: u64,
    /// Root bookkeeping for the current view.
    inflight: BTreeSet<u64>,
    next_height: u64,
    started: bool,
    /// New-view collection state per future view (only used when this
    /// process roots that view).
    nv_shares: BTreeMap<u64, Collection>,
    nv_locked: BTreeMap<u64, BTreeMap<u64, LockedEntry>>,
    nv_known: BTreeMap<u64, BTreeMap<u64, BlockInfo>>,
}

impl Engine {
    pub fn new(id: ProcessId, cfg: Arc<EngineConfig>) -> Self {
        let tree = cfg.tree_for_view(0).expect("view-0 tree must be buildable");
        let is_root = tree.root == id;
        Self {
            id,
            cfg,
            view: 0,
            tree,
            is_root,
            last_progress: SimTime::ZERO,
            instances: BTreeMap::new(),
            blocks: BTreeMap::new(),
            locks: BTreeMap::new(),
            ledger: BTreeMap::new(),
            decided_prefix: 0,
            inflight: BTreeSet::new(),
            next_height: 0,
            started: false,
            nv_shares: BTreeMap::new(),
            nv_locked: BTreeMap::new(),
            nv_known: BTreeMap::new(),
        }
    }

    pub fn view(&self) -> u64 {
        self.view
    }

    pub fn ledger(&self) -> &BTreeMap<u64, BlockId> {
        &self.ledger
    }

    pub fn tree(&self) -> &TreeConfig {
        &self.tree
    }

    fn quorum(&self) -> usize {
        self.cfg.quorum()
    }

    pub fn handle(&mut self, now: SimTime, event: EngineEvent) -> Output {
        let mut out = Output::default();
        match event {
            EngineEvent::Timer(TimerKind::Kickoff) => {
                self.last_progress = now;
                out.timers
                    .push((self.cfg.view_timeout_us, TimerKind::PacemakerCheck));
                if self.is_root {
                    self.started = true;
                    self.fill_pipeline(now, &mut out);
                }
            }
            EngineEvent::Timer(TimerKind::PacemakerCheck) => {
                self.on_pacemaker(now, &mut out);
            }
            EngineEvent::Timer(TimerKind::AggDeadline { view, height, round }) => {
                self.on_agg_deadline(view, height, round, &mut out);
            }
            EngineEvent::Deliver { src, parts } => {
                for part in parts {
                    self.on_part(now, src, part, &mut out);
                }
            }
        }
        out
    }

    // ---- pacemaker & view changes ----

    fn on_pacemaker(&mut self, now: SimTime, out: &mut Output) {
        let deadline = self.last_progress + self.cfg.view_timeout_us;
        if now < deadline {
            out.timers
                .push((deadline.saturating_sub(now).as_us(), TimerKind::PacemakerCheck));
            return;
        }
        let next = self.view + 1;
        self.enter_view(next, now, out);
        // Report locks and known-but-undecided blocks to the new root.
        let locked: Vec<LockedEntry> = self
            .locks
            .iter()
            .filter(|(h, _)| !self.ledger.contains_key(h))
            .map(|(_, e)| e.clone())
            .collect();
        let known: Vec<BlockInfo> = self
            .blocks
            .iter()
            .filter(|(h, _)| !self.ledger.contains_key(h))
            .map(|(_, b)| *b)
            .collect();
        let share = match new_share(
            self.id,
            &new_view_value(next),
            &self.cfg.keyring,
            self.cfg.scheme,
        ) {
            Ok(s) => s,
            Err(e) => {
                out.fatal = Some(format!("new-view share: {e}"));
                return;
            }
        };
        out.charge(cpu_cost(CryptoOp::Sign, self.cfg.scheme, 1, &self.cfg.crypto));
        let part = Part::NewView {
            view: next,
            share,
            locked,
            known,
        };
        if self.is_root {
            // Fold our own report directly.
            let mut tmp = Output::default();
            self.on_new_view(now, part, &mut tmp);
            out.cpu_us += tmp.cpu_us;
            out.sends.extend(tmp.sends);
            out.timers.extend(tmp.timers);
            out.proposed.extend(tmp.proposed);
        } else {
            out.sends.push(SendReq {
                dst: self.tree.root,
                part,
            });
        }
    }

    fn enter_view(&mut self, view: u64, now: SimTime, out: &mut Output) {
        debug_assert!(view > self.view);
        self.view = view;
        self.tree = match self.cfg.tree_for_view(view) {
            Ok(t) => t,
            Err(e) => {
                out.fatal = Some(format!("tree for view {view}: {e}"));
                return;
            }
        };
        self.is_root = self.tree.root == self.id;
        self.started = false;
        self.inflight.clear();
        // Stale aggregation windows and vote dedup die with the old view;
        // blocks, locks and the ledger survive.
        for inst in self.instances.values_mut() {
            inst.agg.clear();
        }
        self.last_progress = now;
        out.entered_view = Some(view);
        out.timers
            .push((self.cfg.view_timeout_us, TimerKind::PacemakerCheck));
    }

    fn progress(&mut self, now: SimTime) {
        if now > self.last_progress {
            self.last_progress = now;
        }
    }

    // ---- root: proposing ----

    fn fill_pipeline(&mut self, now: SimTime, out: &mut Output) {
        if !self.is_root || !self.started {
            return;
        }
        while self.inflight.len() < self.cfg.pipeline.max_inflight() as usize {
            if now >= self.cfg.admission_deadline {
                return;
            }
            let height = self.next_height;
            self.next_height += 1;
            let parent = if height == 0 {
                GENESIS_PARENT
            } else {
                match self.blocks.get(&(height - 1)) {
                    Some(b) => b.id,
                    None => GENESIS_PARENT,
                }
            };
            let block = BlockInfo {
                id: block_id(self.view, height, self.id, &parent),
                parent,
                height,
                size_bits: self.cfg.block_bits,
            };
            self.propose(now, block, None, out);
        }
    }

    /// Root-side start of round 1 for `block` (fresh or re-proposal).
    fn propose(&mut self, now: SimTime, block: BlockInfo, justify: Option<Qc>, out: &mut Output) {
        let height = block.height;
        self.blocks.insert(height, block);
        self.inflight.insert(height);
        let inst = self.instances.entry(height).or_default();
        inst.block = Some(block);
        out.charge(cpu_cost(CryptoOp::Sign, self.cfg.scheme, 1, &self.cfg.crypto));
        out.proposed.push(height);
        let part = Part::Round {
            view: self.view,
            height,
            round: 1,
            block: Some(block),
            justify,
        };
        self.relay_to_children(&part, out);
        self.open_agg_window(now, height, 1, &block, true, out);
    }

    // ---- dissemination ----

    /// disseminate-to-followers: pass the round payload to every child.
    fn relay_to_children(&self, part: &Part, out: &mut Output) {
        for &c in self.tree.children_of(self.id) {
            out.sends.push(SendReq {
                dst: c,
                part: part.clone(),
            });
        }
    }

    // ---- aggregation ----

    /// Opens the aggregate-at-leader window for (height, round), seeding it
    /// with this process's own share when it votes.
    fn open_agg_window(
        &mut self,
        _now: SimTime,
        height: u64,
        round: u8,
        block: &BlockInfo,
        vote: bool,
        out: &mut Output,
    ) {
        let children: BTreeSet<ProcessId> =
            self.tree.children_of(self.id).iter().copied().collect();
        let mut collection = Collection::empty(self.cfg.scheme);
        if vote {
            out.charge(cpu_cost(CryptoOp::Sign, self.cfg.scheme, 1, &self.cfg.crypto));
            match new_share(
                self.id,
                &vote_value(&block.id, round),
                &self.cfg.keyring,
                self.cfg.scheme,
            ) {
                Ok(s) => collection = s,
                Err(e) => {
                    out.fatal = Some(format!("vote share: {e}"));
                    return;
                }
            }
            self.instances
                .entry(height)
                .or_default()
                .voted
                .insert((self.view, round));
        }
        let view = self.view;
        let inst = self.instances.entry(height).or_default();
        if children.is_empty() {
            // Leaf: the "window" is just our own share, sent immediately.
            if let Some(parent) = self.tree.parent_of(self.id) {
                out.sends.push(SendReq {
                    dst: parent,
                    part: Part::Vote {
                        view,
                        height,
                        round,
                        partial: collection,
                    },
                });
            }
            return;
        }
        inst.agg.insert(
            round,
            AggWindow {
                view,
                collection,
                pending: children,
                qc_formed: false,
                closed: false,
            },
        );
        out.timers.push((
            self.agg_wait_us(),
            TimerKind::AggDeadline {
                view,
                height,
                round,
            },
        ));
        if self.is_root {
            self.try_form_qc(_now, height, round, out);
        }
    }

    /// Impatient wait for this node's aggregation windows. The configured
    /// `delta` is the root's full budget; a node `d` hops below the root
    /// gets the proportional remainder, so a subtree that times out still
    /// reports to its parent inside the parent's own window.
    fn agg_wait_us(&self) -> u64 {
        let total_hops = (self.tree.height.saturating_sub(1)).max(1) as u64;
        let below = total_hops.saturating_sub(self.tree.depth_of(self.id) as u64).max(1);
        self.cfg.delta_us * below / total_hops
    }

    fn on_agg_deadline(&mut self, view: u64, height: u64, round: u8, out: &mut Output) {
        if view != self.view {
            return;
        }
        let Some(inst) = self.instances.get_mut(&height) else {
            return;
        };
        let Some(win) = inst.agg.get_mut(&round) else {
            return;
        };
        if win.closed || win.view != view {
            return;
        }
        // Children that stayed silent contribute bottom, folded as empty.
        win.pending.clear();
        self.close_window(height, round, out);
    }

    /// Folds one child's partial into the window; invalid partials are
    /// discarded and counted.
    fn fold_child_partial(
        &mut self,
        now: SimTime,
        src: ProcessId,
        height: u64,
        round: u8,
        partial: Collection,
        out: &mut Output,
    ) {
        let is_root = self.is_root;
        let scheme = self.cfg.scheme;
        let crypto = self.cfg.crypto;
        let keyring = self.cfg.keyring.clone();
        let Some(inst) = self.instances.get_mut(&height) else {
            return;
        };
        let Some(win) = inst.agg.get_mut(&round) else {
            return;
        };
        if win.closed || win.view != self.view || !win.pending.remove(&src) {
            return;
        }
        let k = partial.cardinality();
        let mut valid = partial.scheme() == scheme;
        if valid {
            out.charge(cpu_cost(CryptoOp::Verify, scheme, k, &crypto));
            valid = partial.verify(&keyring);
        }
        if valid {
            out.charge(cpu_cost(CryptoOp::Combine, scheme, k, &crypto));
            if let Ok(folded) = combine(&win.collection, &partial) {
                win.collection = folded;
            }
        } else {
            out.invalid_partials += 1;
        }
        let done = win.pending.is_empty();
        self.progress(now);
        if is_root {
            self.try_form_qc(now, height, round, out);
        }
        if done {
            self.close_window(height, round, out);
        }
    }

    fn close_window(&mut self, height: u64, round: u8, out: &mut Output) {
        let Some(inst) = self.instances.get_mut(&height) else {
            return;
        };
        let Some(win) = inst.agg.get_mut(&round) else {
            return;
        };
        if win.closed {
            return;
        }
        win.closed = true;
        let collection = win.collection.clone();
        let view = win.view;
        if !self.is_root {
            if let Some(parent) = self.tree.parent_of(self.id) {
                out.sends.push(SendReq {
                    dst: parent,
                    part: Part::Vote {
                        view,
                        height,
                        round,
                        partial: collection,
                    },
                });
            }
        }
    }

    /// Root: checks the current window against the quorum threshold and, on
    /// success, advances the instance to the next round.
    fn try_form_qc(&mut self, now: SimTime, height: u64, round: u8, out: &mut Output) {
        let quorum = self.quorum();
        let Some(block) = self.instances.get(&height).and_then(|i| i.block) else {
            return;
        };
        let value = vote_value(&block.id, round);
        let Some(inst) = self.instances.get_mut(&height) else {
            return;
        };
        let Some(win) = inst.agg.get_mut(&round) else {
            return;
        };
        if win.qc_formed || win.view != self.view {
            return;
        }
        if !win.collection.has(&value, quorum, &self.cfg.keyring) {
            return;
        }
        win.qc_formed = true;
        let qc = Qc {
            height,
            round,
            block: block.id,
            collection: win.collection.clone(),
        };
        self.progress(now);
        match round {
            1 | 2 => {
                if round == 2 {
                    self.locks.insert(
                        height,
                        LockedEntry {
                            block,
                            qc: qc.clone(),
                        },
                    );
                }
                let next = round + 1;
                let part = Part::Round {
                    view: self.view,
                    height,
                    round: next,
                    block: None,
                    justify: Some(qc),
                };
                self.relay_to_children(&part, out);
                self.open_agg_window(now, height, next, &block, true, out);
            }
            3 => {
                let part = Part::Round {
                    view: self.view,
                    height,
                    round: 4,
                    block: None,
                    justify: Some(qc),
                };
                self.relay_to_children(&part, out);
                self.decide(height, block.id, out);
                self.fill_pipeline(now, out);
            }
            _ => {}
        }
    }

    fn decide(&mut self, height: u64, id: BlockId, out: &mut Output) {
        self.inflight.remove(&height);
        match self.ledger.get(&height) {
            Some(existing) if *existing != id => {
                out.fatal = Some(format!(
                    "agreement violation at {}: height {height} decided twice with different blocks",
                    self.id
                ));
                return;
            }
            Some(_) => return,
            None => {}
        }
        self.ledger.insert(height, id);
        self.locks.remove(&height);
        if let Some(inst) = self.instances.get_mut(&height) {
            inst.decided = true;
        }
        while self.ledger.contains_key(&self.decided_prefix) {
            self.decided_prefix += 1;
        }
        out.decided.push((height, id));
    }

    // ---- incoming parts ----

    fn on_part(&mut self, now: SimTime, src: ProcessId, part: Part, out: &mut Output) {
        match part {
            Part::Round {
                view,
                height,
                round,
                block,
                justify,
            } => self.on_round(now, src, view, height, round, block, justify, out),
            Part::Vote {
                view,
                height,
                round,
                partial,
            } => {
                if view != self.view {
                    return;
                }
                self.fold_child_partial(now, src, height, round, partial, out);
            }
            Part::NewView { .. } => self.on_new_view(now, part, out),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_round(
        &mut self,
        now: SimTime,
        src: ProcessId,
        view: u64,
        height: u64,
        round: u8,
        block: Option<BlockInfo>,
        justify: Option<Qc>,
        out: &mut Output,
    ) {
        if view < self.view || self.is_root && view == self.view {
            return;
        }
        if view > self.view {
            // Catch up if the sender is our parent in the newer tree.
            let Ok(tree) = self.cfg.tree_for_view(view) else {
                return;
            };
            if tree.parent_of(self.id) != Some(src) {
                return;
            }
            self.enter_view(view, now, out);
        }
        if self.tree.parent_of(self.id) != Some(src) {
            return;
        }
        // Authenticate the envelope, then the carried certificate.
        out.charge(cpu_cost(CryptoOp::Verify, self.cfg.scheme, 1, &self.cfg.crypto));
        if let Some(qc) = &justify {
            let k = qc.collection.cardinality();
            out.charge(cpu_cost(CryptoOp::Verify, self.cfg.scheme, k, &self.cfg.crypto));
            let expect_round = if round == 1 { 2 } else { round - 1 };
            if qc.height != height
                || qc.round != expect_round
                || !qc
                    .collection
                    .has(&vote_value(&qc.block, qc.round), self.quorum(), &self.cfg.keyring)
            {
                return;
            }
        } else if round > 1 {
            return;
        }
        self.progress(now);

        let block_info = match round {
            1 => match block {
                Some(b) if b.height == height => {
                    match self.blocks.get(&height) {
                        // Same height re-announced: only a newer view may
                        // replace the block we already accepted.
                        Some(prev) if prev.id != b.id => {
                            self.blocks.insert(height, b);
                            let inst = self.instances.entry(height).or_default();
                            inst.block = Some(b);
                            inst.agg.clear();
                        }
                        _ => {
                            self.blocks.insert(height, b);
                            self.instances.entry(height).or_default().block = Some(b);
                        }
                    }
                    b
                }
                _ => return,
            },
            _ => {
                let Some(b) = self.instances.get(&height).and_then(|i| i.block) else {
                    return;
                };
                match &justify {
                    Some(qc) if qc.block == b.id => b,
                    _ => return,
                }
            }
        };

        // Relay the round payload down the tree.
        let part = Part::Round {
            view,
            height,
            round,
            block,
            justify: justify.clone(),
        };
        self.relay_to_children(&part, out);

        match round {
            1 => {
                let extends = height == 0
                    || self
                        .blocks
                        .get(&(height - 1))
                        .map(|p| p.id == block_info.parent)
                        .unwrap_or(true);
                let lock_ok = self
                    .locks
                    .get(&height)
                    .map(|l| l.block.id == block_info.id)
                    .unwrap_or(true);
                let vote = extends && lock_ok && self.not_yet_voted(height, 1);
                self.open_agg_window(now, height, 1, &block_info, vote, out);
            }
            2 => {
                let vote = self.not_yet_voted(height, 2);
                self.open_agg_window(now, height, 2, &block_info, vote, out);
            }
            3 => {
                // Seeing the pre-commit certificate locks the value.
                if let Some(qc) = justify {
                    self.locks.insert(
                        height,
                        LockedEntry {
                            block: block_info,
                            qc,
                        },
                    );
                }
                let vote = self.not_yet_voted(height, 3);
                self.open_agg_window(now, height, 3, &block_info, vote, out);
            }
            4 => {
                self.decide(height, block_info.id, out);
            }
            _ => {}
        }
    }

    fn not_yet_voted(&self, height: u64, round: u8) -> bool {
        self.instances
            .get(&height)
            .map(|i| !i.voted.contains(&(self.view, round)))
            .unwrap_or(true)
    }

    fn on_new_view(&mut self, now: SimTime, part: Part, out: &mut Output) {
        let Part::NewView {
            view,
            share,
            locked,
            known,
        } = part
        else {
            return;
        };
        if view < self.view {
            return;
        }
        // Only the root of `view` collects these.
        let root_of_view = match self.cfg.tree_for_view(view) {
            Ok(t) => t.root,
            Err(_) => return,
        };
        if root_of_view != self.id {
            return;
        }
        out.charge(cpu_cost(CryptoOp::Verify, self.cfg.scheme, 1, &self.cfg.crypto));
        if !share.verify(&self.cfg.keyring) {
            out.invalid_partials += 1;
            return;
        }
        let slot = self
            .nv_shares
            .entry(view)
            .or_insert_with(|| Collection::empty(self.cfg.scheme));
        if let Ok(folded) = combine(slot, &share) {
            *slot = folded;
        }
        let locked_slot = self.nv_locked.entry(view).or_default();
        for entry in locked {
            locked_slot.entry(entry.block.height).or_insert(entry);
        }
        let known_slot = self.nv_known.entry(view).or_default();
        for b in known {
            known_slot.entry(b.height).or_insert(b);
        }
        let quorum = self.quorum();
        let ready = self
            .nv_shares
            .get(&view)
            .map(|c| c.has(&new_view_value(view), quorum, &self.cfg.keyring))
            .unwrap_or(false);
        if !ready {
            return;
        }
        if view > self.view {
            self.enter_view(view, now, out);
        }
        if self.view == view && self.is_root && !self.started {
            self.progress(now);
            self.start_view_as_root(now, out);
        }
    }

    /// New root: replay every height some correct process still needs with
    /// the original blocks, then continue with fresh blocks above the
    /// highest lock (aborted optimistic work is re-proposed from scratch).
    fn start_view_as_root(&mut self, now: SimTime, out: &mut Output) {
        self.started = true;
        let view = self.view;
        let locked = self.nv_locked.remove(&view).unwrap_or_default();
        let known = self.nv_known.remove(&view).unwrap_or_default();
        self.nv_shares.remove(&view);
        for (h, entry) in &locked {
            self.locks.entry(*h).or_insert_with(|| entry.clone());
            self.blocks.entry(*h).or_insert(entry.block);
        }
        for (h, b) in &known {
            self.blocks.entry(*h).or_insert(*b);
        }
        let anchor = self.decided_prefix;
        // Heights reported undecided by some quorum member, plus anything
        // this root decided past its contiguous prefix, must be replayed.
        let mut start = anchor;
        for h in locked.keys().chain(known.keys()) {
            start = start.min(*h);
        }
        let mut replay_end: Option<u64> = self.locks.keys().next_back().copied();
        if anchor > start {
            let past = anchor - 1;
            replay_end = Some(replay_end.map_or(past, |t| t.max(past)));
        }
        if let Some(top) = replay_end {
            for h in start..=top {
                let (block, justify) = if let Some(l) = self.locks.get(&h) {
                    (l.block, Some(l.qc.clone()))
                } else if let Some(b) = self.blocks.get(&h) {
                    (*b, None)
                } else {
                    // Unknown payload below a lock cannot happen: a lock at
                    // h implies a quorum accepted every ancestor, and the
                    // new-view quorum intersects those processes.
                    let parent = if h == 0 {
                        GENESIS_PARENT
                    } else {
                        self.blocks.get(&(h - 1)).map(|b| b.id).unwrap_or(GENESIS_PARENT)
                    };
                    (
                        BlockInfo {
                            id: block_id(view, h, self.id, &parent),
                            parent,
                            height: h,
                            size_bits: self.cfg.block_bits,
                        },
                        None,
                    )
                };
                self.propose(now, block, justify, out);
            }
            self.next_height = (top + 1).max(anchor);
        } else {
            self.next_height = anchor;
        }
        self.fill_pipeline(now, out);
    }
}

// ---------------------------------------------------------------------------
// Simulation driver
// ---------------------------------------------------------------------------

/// Wire bundle occupying one transmission slot on a sender's egress link.
#[derive(Debug)]
struct Bundle {
    dst: ProcessId,
    parts: Vec<Part>,
    ready: SimTime,
}

#[derive(Debug)]
enum Ev {
    Deliver {
        src: ProcessId,
        dst: ProcessId,
        parts: Vec<Part>,
        size_bits: u64,
        kind: MessageKind,
    },
    Timer {
        pid: ProcessId,
        kind: TimerKind,
    },
    TxWake {
        pid: ProcessId,
    },
}

/// Wire size of one bundle: envelope, blocks and votes are additive;
/// certificate sections share one slot sized by the largest member, since a
/// single certificate conveys the pipeline's phase progress.
fn bundle_bits(parts: &[Part], cfg: &EngineConfig) -> u64 {
    let mut bits = 8 * cfg.header_bytes;
    let mut max_qc = 0u64;
    for p in parts {
        match p {
            Part::Round { block, justify, .. } => {
                if let Some(b) = block {
                    bits += b.size_bits;
                }
                if let Some(qc) = justify {
                    max_qc = max_qc.max(8 * qc.collection.wire_size(&cfg.crypto));
                }
            }
            Part::Vote { partial, .. } => {
                bits += 8 * partial.wire_size(&cfg.crypto);
            }
            Part::NewView { share, locked, .. } => {
                bits += 8 * share.wire_size(&cfg.crypto);
                for l in locked {
                    max_qc = max_qc.max(8 * l.qc.collection.wire_size(&cfg.crypto));
                }
                bits += 8 * 48 * locked.len() as u64;
            }
        }
    }
    bits + max_qc
}

fn dominant_kind(parts: &[Part]) -> MessageKind {
    let mut kind = MessageKind::Other;
    for p in parts {
        match p.kind() {
            MessageKind::Proposal => return MessageKind::Proposal,
            k => kind = k,
        }
    }
    kind
}

/// Post-run snapshot of everything the harness needs.
#[derive(Debug)]
pub struct SimReport {
    pub ledgers: Vec<BTreeMap<u64, BlockId>>,
    pub first_decide: BTreeMap<u64, SimTime>,
    pub first_propose: BTreeMap<u64, SimTime>,
    pub bits_sent: Vec<u64>,
    /// Highest view entered by any correct process within the measurement
    /// window.
    pub view_changes: u64,
    pub invalid_partials: u64,
    pub crashed: Vec<bool>,
    pub fatal: Option<String>,
    pub trace: Option<Vec<String>>,
}

/// Deterministic event loop binding engines to the simulated network.
pub struct Simulation {
    cfg: Arc<EngineConfig>,
    pub net: Network,
    queue: EventQueue<Ev>,
    engines: Vec<Engine>,
    cpu_free: Vec<SimTime>,
    outbox: Vec<VecDeque<Bundle>>,
    first_decide: BTreeMap<u64, SimTime>,
    first_propose: BTreeMap<u64, SimTime>,
    ledgers: Vec<BTreeMap<u64, BlockId>>,
    view_changes: u64,
    measure_until: SimTime,
    invalid_partials: u64,
    fatal: Option<String>,
    trace: Option<Vec<String>>,
}

impl Simulation {
    pub fn new(
        cfg: EngineConfig,
        params: NetParams,
        gst: SimTime,
        seed: u64,
        faults: &FaultSchedule,
        capture_trace: bool,
    ) -> Result<Self, SimError> {
        let n = cfg.n as usize;
        let cfg = Arc::new(cfg);
        let mut net = Network::new(n, params, gst, seed, cfg.f);
        net.load_fault_schedule(faults)?;
        let engines = (0..n as u32)
            .map(|i| Engine::new(ProcessId(i), cfg.clone()))
            .collect();
        let mut queue = EventQueue::new();
        for i in 0..n as u32 {
            queue.push(
                SimTime::ZERO,
                Ev::Timer {
                    pid: ProcessId(i),
                    kind: TimerKind::Kickoff,
                },
            )?;
        }
        Ok(Self {
            measure_until: cfg.admission_deadline,
            cfg,
            net,
            queue,
            engines,
            cpu_free: vec![SimTime::ZERO; n],
            outbox: (0..n).map(|_| VecDeque::new()).collect(),
            first_decide: BTreeMap::new(),
            first_propose: BTreeMap::new(),
            ledgers: vec![BTreeMap::new(); n],
            view_changes: 0,
            invalid_partials: 0,
            fatal: None,
            trace: capture_trace.then(Vec::new),
        })
    }

    /// Runs until `hard_stop` of simulated time (or until nothing remains).
    pub fn run_until(&mut self, hard_stop: SimTime) -> SimReport {
        while self.fatal.is_none() {
            let Ok((t, ev)) = self.queue.step() else {
                break;
            };
            if t > hard_stop {
                break;
            }
            self.dispatch(t, ev);
        }
        SimReport {
            ledgers: self.ledgers.clone(),
            first_decide: self.first_decide.clone(),
            first_propose: self.first_propose.clone(),
            bits_sent: (0..self.cfg.n)
                .map(|i| self.net.bits_sent(ProcessId(i)))
                .collect(),
            view_changes: self.view_changes,
            invalid_partials: self.invalid_partials,
            crashed: (0..self.cfg.n)
                .map(|i| self.net.is_crashed(ProcessId(i), hard_stop))
                .collect(),
            fatal: self.fatal.clone(),
            trace: self.trace.clone(),
        }
    }

    fn dispatch(&mut self, t: SimTime, ev: Ev) {
        match ev {
            Ev::Deliver {
                src,
                dst,
                parts,
                size_bits,
                kind,
            } => {
                if self.net.is_crashed(dst, t) {
                    return;
                }
                if let Some(trace) = &mut self.trace {
                    trace.push(format!(
                        "{} {} {} {} {}",
                        t.as_us(),
                        kind.as_str(),
                        src.0,
                        dst.0,
                        size_bits
                    ));
                }
                let out = self.engines[dst.index()].handle(t, EngineEvent::Deliver { src, parts });
                self.apply(dst, t, out);
            }
            Ev::Timer { pid, kind } => {
                if self.net.is_crashed(pid, t) {
                    return;
                }
                let out = self.engines[pid.index()].handle(t, EngineEvent::Timer(kind));
                self.apply(pid, t, out);
            }
            Ev::TxWake { pid } => self.try_transmit(pid, t),
        }
    }

    fn apply(&mut self, pid: ProcessId, t: SimTime, out: Output) {
        if let Some(f) = out.fatal {
            self.fatal = Some(f);
            return;
        }
        let done = self.cpu_free[pid.index()].max(t) + out.cpu_us;
        self.cpu_free[pid.index()] = done;
        self.invalid_partials += out.invalid_partials;
        if let Some(v) = out.entered_view {
            if t <= self.measure_until {
                self.view_changes = self.view_changes.max(v);
            }
        }
        for h in out.proposed {
            self.first_propose.entry(h).or_insert(done);
        }
        for (h, id) in out.decided {
            match self.ledgers[pid.index()].get(&h) {
                Some(existing) if *existing != id => {
                    self.fatal = Some(format!(
                        "agreement violation: {pid} re-decided height {h} differently"
                    ));
                    return;
                }
                _ => {}
            }
            self.ledgers[pid.index()].insert(h, id);
            self.first_decide.entry(h).or_insert(done);
        }
        for (after, kind) in out.timers {
            let _ = self.queue.push(done + after, Ev::Timer { pid, kind });
        }
        let mut touched = false;
        for send in out.sends {
            touched = true;
            self.enqueue(pid, send, done);
        }
        if touched {
            let _ = self.queue.push(done, Ev::TxWake { pid });
        }
    }

    /// Adds a part to the sender's egress queue, piggybacking onto an
    /// existing unsealed bundle for the same destination.
    fn enqueue(&mut self, pid: ProcessId, send: SendReq, ready: SimTime) {
        let outbox = &mut self.outbox[pid.index()];
        if let Some(b) = outbox.iter_mut().find(|b| b.dst == send.dst) {
            b.parts.push(send.part);
            b.ready = b.ready.max(ready);
        } else {
            outbox.push_back(Bundle {
                dst: send.dst,
                parts: vec![send.part],
                ready,
            });
        }
    }

    fn try_transmit(&mut self, pid: ProcessId, t: SimTime) {
        loop {
            let egress_free = self.net.egress_free_at(pid);
            let Some(front) = self.outbox[pid.index()].front() else {
                return;
            };
            let start = front.ready.max(egress_free);
            if start > t {
                let _ = self.queue.push(start, Ev::TxWake { pid });
                return;
            }
            let bundle = self.outbox[pid.index()].pop_front().unwrap();
            // Fault filtering happens at transmission time, part by part.
            let parts: Vec<Part> = match self.net.fault_of(pid, t) {
                Some(FaultKind::CrashSilent) | Some(FaultKind::OmitAll) => Vec::new(),
                Some(FaultKind::OmitAggregates) => bundle
                    .parts
                    .into_iter()
                    .filter(|p| matches!(p.kind(), MessageKind::Proposal | MessageKind::Other))
                    .collect(),
                None => bundle.parts,
            };
            if parts.is_empty() {
                continue;
            }
            let size_bits = bundle_bits(&parts, &self.cfg);
            let kind = dominant_kind(&parts);
            match self.net.send(pid, bundle.dst, kind, size_bits, t) {
                SendOutcome::Deliver { at } => {
                    let _ = self.queue.push(
                        at,
                        Ev::Deliver {
                            src: pid,
                            dst: bundle.dst,
                            parts,
                            size_bits,
                            kind,
                        },
                    );
                }
                SendOutcome::Dropped => {}
            }
        }
    }

    pub fn engine(&self, pid: ProcessId) -> &Engine {
        &self.engines[pid.index()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simnet::FaultEntry;

    fn small_cfg(n: u32, shape: TreeShape, stretch: u32, duration_s: f64) -> EngineConfig {
        let procs: Vec<ProcessId> = (0..n).map(ProcessId).collect();
        let partition = BinPartition::new(&procs, shape.internal_slots());
        EngineConfig {
            n,
            f: ((n - 1) / 3) as usize,
            scheme: Scheme::Aggregate,
            crypto: CryptoCostModel {
                sign_us: 50,
                verify_us: 200,
                aggregate_per_element_us: 10,
                share_wire_bytes: 64,
                aggregate_wire_bytes: 96,
            },
            keyring: Keyring::generate(n, 7),
            partition,
            shape,
            block_bits: 100_000,
            pipeline: PipelineConfig {
                base_depth: 4,
                stretch,
            },
            delta_us: 2_000_000,
            view_timeout_us: 3_000_000,
            admission_deadline: SimTime::from_secs_f64(duration_s),
            header_bytes: 512,
        }
    }

    fn params() -> NetParams {
        NetParams {
            rtt_us: 100_000,
            bandwidth_bps: 100_000_000,
            delta_us: 2_000_000,
        }
    }

    fn run(
        cfg: EngineConfig,
        faults: FaultSchedule,
        duration_s: f64,
        drain_s: f64,
    ) -> SimReport {
        let params = params();
        let mut sim = Simulation::new(cfg, params, SimTime::ZERO, 11, &faults, false).unwrap();
        sim.run_until(SimTime::from_secs_f64(duration_s + drain_s))
    }

    #[test]
    fn seven_node_happy_path() {
        let shape = TreeShape { height: 3, root_fanout: 3 };
        let cfg = small_cfg(7, shape, 1, 5.0);
        let report = run(cfg, FaultSchedule::default(), 5.0, 10.0);
        assert!(report.fatal.is_none());
        assert!(!report.first_decide.is_empty());
        // All seven ledgers agree on every decided height.
        let reference = &report.ledgers[0];
        assert!(!reference.is_empty());
        for l in &report.ledgers {
            for (h, id) in l {
                assert_eq!(reference.get(h), Some(id));
            }
        }
    }

    #[test]
    fn full_participation_cardinality() {
        // With no faults the root's prepare aggregate for height 0 carries
        // all seven shares: its own plus three subtrees of two.
        let shape = TreeShape { height: 3, root_fanout: 3 };
        let cfg = small_cfg(7, shape, 1, 0.5);
        let quorum = cfg.quorum();
        assert_eq!(quorum, 5);
        let mut sim = Simulation::new(
            cfg,
            params(),
            SimTime::ZERO,
            11,
            &FaultSchedule::default(),
            false,
        )
        .unwrap();
        let report = sim.run_until(SimTime::from_secs_f64(2.0));
        assert!(report.fatal.is_none());
        let root = sim.engine(ProcessId(0));
        let inst = root.instances.get(&0).unwrap();
        let win = inst.agg.get(&1).unwrap();
        assert_eq!(win.collection.cardinality(), 7);
    }

    #[test]
    fn leaf_crash_still_decides() {
        let shape = TreeShape { height: 3, root_fanout: 3 };
        let cfg = small_cfg(7, shape, 1, 5.0);
        // Pick a leaf of the view-0 tree.
        let tree = cfg.tree_for_view(0).unwrap();
        let leaf = tree
            .processes()
            .find(|p| tree.children_of(*p).is_empty())
            .unwrap();
        let faults = FaultSchedule {
            entries: vec![FaultEntry {
                process: leaf,
                kind: FaultKind::CrashSilent,
                activation: SimTime::ZERO,
            }],
        };
        let report = run(cfg, faults, 5.0, 10.0);
        assert!(report.fatal.is_none());
        assert!(report.first_decide.len() > 3, "{}", report.first_decide.len());
        // The crashed process decided nothing; its ledger is a prefix.
        assert!(report.ledgers[leaf.index()].is_empty());
    }

    #[test]
    fn faulty_internal_triggers_view_change_and_recovery() {
        // Fanout 2 keeps the internal set at 3, so seven processes form two
        // bins and a rotation target exists.
        let shape = TreeShape { height: 3, root_fanout: 2 };
        let mut cfg = small_cfg(7, shape, 1, 12.0);
        cfg.delta_us = 600_000;
        let tree = cfg.tree_for_view(0).unwrap();
        let internal = *tree.internal.iter().find(|p| **p != tree.root).unwrap();
        // An internal node that swallows its subtree's votes from the start:
        // quorum is 5 of 7 and the lost subtree holds 3, so rounds stall and
        // the pacemaker must rotate to the next configuration.
        let faults = FaultSchedule {
            entries: vec![FaultEntry {
                process: internal,
                kind: FaultKind::OmitAggregates,
                activation: SimTime::ZERO,
            }],
        };
        let report = run(cfg, faults, 12.0, 20.0);
        assert!(report.fatal.is_none());
        assert!(report.view_changes >= 1);
        assert!(!report.first_decide.is_empty());
        // After rotation the faulty process is a leaf, so consensus decides.
        for l in report
            .ledgers
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != internal.index())
            .map(|(_, l)| l)
        {
            assert!(!l.is_empty());
        }
    }

    #[test]
    fn leader_crash_recovers_in_next_view() {
        let shape = TreeShape { height: 3, root_fanout: 2 };
        let cfg = small_cfg(7, shape, 2, 20.0);
        let faults = FaultSchedule {
            entries: vec![FaultEntry {
                process: ProcessId(0),
                kind: FaultKind::CrashSilent,
                activation: SimTime::from_secs_f64(6.0),
            }],
        };
        let report = run(cfg, faults, 20.0, 20.0);
        assert!(report.fatal.is_none(), "{:?}", report.fatal);
        assert!(report.view_changes >= 1);
        // Decisions continue after the crash instant.
        let post = report
            .first_decide
            .values()
            .filter(|t| t.as_secs_f64() > 7.0)
            .count();
        assert!(post > 0);
        // Ledgers of correct processes agree pairwise on common heights.
        for a in 1..7 {
            for b in (a + 1)..7 {
                for (h, id) in &report.ledgers[a] {
                    if let Some(other) = report.ledgers[b].get(h) {
                        assert_eq!(id, other);
                    }
                }
            }
        }
    }

    #[test]
    fn spurious_timeouts_preserve_safety() {
        let shape = TreeShape { height: 3, root_fanout: 3 };
        let mut cfg = small_cfg(7, shape, 2, 10.0);
        // A pacemaker tighter than a round trip fires with no fault present.
        cfg.view_timeout_us = 220_000;
        let report = run(cfg, FaultSchedule::default(), 10.0, 10.0);
        assert!(report.fatal.is_none(), "{:?}", report.fatal);
        let reference: BTreeMap<u64, BlockId> = report
            .ledgers
            .iter()
            .flat_map(|l| l.iter().map(|(h, id)| (*h, *id)))
            .collect();
        for l in &report.ledgers {
            for (h, id) in l {
                assert_eq!(reference.get(h), Some(id), "height {h} diverged");
            }
        }
    }

    #[test]
    fn star_topology_runs() {
        let shape = TreeShape { height: 2, root_fanout: 6 };
        let mut cfg = small_cfg(7, shape, 1, 5.0);
        cfg.scheme = Scheme::NaiveSet;
        let report = run(cfg, FaultSchedule::default(), 5.0, 5.0);
        assert!(report.fatal.is_none());
        assert!(report.first_decide.len() > 3);
    }

    #[test]
    fn inflight_never_exceeds_limit() {
        let shape = TreeShape { height: 3, root_fanout: 3 };
        let cfg = small_cfg(7, shape, 2, 5.0);
        let limit = cfg.pipeline.max_inflight() as usize;
        let mut sim = Simulation::new(
            cfg,
            params(),
            SimTime::ZERO,
            11,
            &FaultSchedule::default(),
            false,
        )
        .unwrap();
        // Step manually and observe the root's inflight set.
        for _ in 0..200_000 {
            let Ok((t, ev)) = sim.queue.step() else { break };
            if t > SimTime::from_secs_f64(5.0) {
                break;
            }
            sim.dispatch(t, ev);
            assert!(sim.engines[0].inflight.len() <= limit);
        }
    }
}

