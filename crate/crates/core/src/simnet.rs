//! Deterministic discrete-event network simulator.
//!
//! Time is measured in integer microseconds. Each process owns a FIFO egress
//! queue: a message departs when the sender's link is free, occupies it for
//! `size_bits / bandwidth`, and is delivered half an RTT later. Before the
//! configured global stabilization time an extra seeded delay (uniform in
//! `[0, 5 * RTT]`) models network instability; after it, links behave like
//! perfect channels.
//!
//! Receives are *impatient*: a registered wait either resolves with the
//! delivered value or yields bottom exactly `delta` after it was opened, so
//! no process blocks on a faulty peer forever.
//!
//! Everything — the event queue ordering, the jitter stream, fault
//! activation — is a pure function of the inputs and the seed, so equal
//! scenarios produce bit-identical traces.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::collections::ProcessId;

/// Simulated clock value in microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Hash)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub fn us(v: u64) -> Self {
        SimTime(v)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        SimTime((s * 1e6).round() as u64)
    }

    pub fn as_us(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub fn saturating_sub(self, other: SimTime) -> SimTime {
        SimTime(self.0.saturating_sub(other.0))
    }
}

impl std::ops::Add<u64> for SimTime {
    type Output = SimTime;
    fn add(self, rhs: u64) -> SimTime {
        SimTime(self.0 + rhs)
    }
}

impl std::fmt::Display for SimTime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Coarse message class used for fault filtering and trace output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MessageKind {
    Proposal,
    Vote,
    NewView,
    Other,
}

impl MessageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::Proposal => "proposal",
            MessageKind::Vote => "vote",
            MessageKind::NewView => "newview",
            MessageKind::Other => "other",
        }
    }
}

/// A network delivery carrying an opaque payload of an explicit bit size.
#[derive(Debug, Clone)]
pub struct Message<P> {
    pub src: ProcessId,
    pub dst: ProcessId,
    pub size_bits: u64,
    pub kind: MessageKind,
    pub payload: P,
    pub seq: u64,
}

/// Latency, bandwidth and the impatient-channel timeout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetParams {
    /// Round-trip latency; one hop costs half of it.
    pub rtt_us: u64,
    /// Per-process egress capacity in bits per second.
    pub bandwidth_bps: u64,
    /// Impatient-channel timeout; at least one RTT.
    pub delta_us: u64,
}

impl NetParams {
    pub fn one_way_us(&self) -> u64 {
        self.rtt_us / 2
    }

    /// Transmission time for `size_bits` on this link, rounded up.
    pub fn transmit_us(&self, size_bits: u64) -> u64 {
        ((size_bits as u128 * 1_000_000).div_ceil(self.bandwidth_bps as u128)) as u64
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.rtt_us == 0 {
            return Err("rtt_us must be positive".into());
        }
        if self.bandwidth_bps == 0 {
            return Err("bandwidth_bps must be positive".into());
        }
        if self.delta_us < self.rtt_us {
            return Err(format!(
                "delta_us ({}) must be at least rtt_us ({})",
                self.delta_us, self.rtt_us
            ));
        }
        Ok(())
    }
}

/// Fault behaviours a process can be scheduled to adopt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// Drops all sends and receives from activation onward.
    CrashSilent,
    /// Sends nothing but keeps receiving.
    OmitAll,
    /// Relays proposals but drops upward votes and new-view traffic.
    OmitAggregates,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultEntry {
    pub process: ProcessId,
    pub kind: FaultKind,
    pub activation: SimTime,
}

/// Fault injection plan; at most `f` distinct processes may appear.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultSchedule {
    pub entries: Vec<FaultEntry>,
}

impl FaultSchedule {
    pub fn distinct_processes(&self) -> usize {
        let mut ids: Vec<ProcessId> = self.entries.iter().map(|e| e.process).collect();
        ids.sort();
        ids.dedup();
        ids.len()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SimError {
    #[error("event queue drained")]
    Drained,
    #[error("event scheduled at {at} before current time {now}")]
    CausalityViolation { at: SimTime, now: SimTime },
    #[error("fault schedule names {got} processes but the budget is {budget}")]
    FaultBudgetExceeded { got: usize, budget: usize },
}

/// Min-heap of `(time, seq)`-ordered events. Sequence numbers break ties, so
/// pops are fully deterministic; pushing into the past is rejected.
#[derive(Debug)]
pub struct EventQueue<E> {
    heap: BinaryHeap<Reverse<(SimTime, u64, EventSlot<E>)>>,
    next_seq: u64,
    now: SimTime,
}

// Wrapper that never participates in ordering beyond the (time, seq) key.
#[derive(Debug)]
struct EventSlot<E>(E);

impl<E> PartialEq for EventSlot<E> {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}
impl<E> Eq for EventSlot<E> {}
impl<E> PartialOrd for EventSlot<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl<E> Ord for EventSlot<E> {
    fn cmp(&self, _: &Self) -> std::cmp::Ordering {
        std::cmp::Ordering::Equal
    }
}

impl<E> Default for EventQueue<E> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            next_seq: 0,
            now: SimTime::ZERO,
        }
    }
}

impl<E> EventQueue<E> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn push(&mut self, at: SimTime, event: E) -> Result<u64, SimError> {
        if at < self.now {
            return Err(SimError::CausalityViolation { at, now: self.now });
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Reverse((at, seq, EventSlot(event))));
        Ok(seq)
    }

    /// Pops the event with the minimal `(time, seq)` key and advances the
    /// clock to it.
    pub fn step(&mut self) -> Result<(SimTime, E), SimError> {
        let Reverse((at, _seq, slot)) = self.heap.pop().ok_or(SimError::Drained)?;
        debug_assert!(at >= self.now);
        self.now = at;
        Ok((at, slot.0))
    }
}

/// Per-process transport state: egress FIFO, fault status, byte accounting.
#[derive(Debug, Clone)]
struct Endpoint {
    egress_free: SimTime,
    fault: Option<(FaultKind, SimTime)>,
    bits_sent: u64,
}

/// The transport layer: computes departure and delivery times, applies
/// faults and pre-GST jitter, and tracks per-process egress accounting.
#[derive(Debug)]
pub struct Network {
    pub params: NetParams,
    /// Before this instant, message delays get seeded adversarial jitter.
    pub gst: SimTime,
    endpoints: Vec<Endpoint>,
    jitter: ChaCha12Rng,
    next_msg_seq: u64,
    fault_budget: usize,
}

/// Outcome of asking the network to carry a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    /// Will reach the destination at the given time.
    Deliver { at: SimTime },
    /// Silently dropped (faulty sender or crashed receiver).
    Dropped,
}

impl Network {
    pub fn new(n: usize, params: NetParams, gst: SimTime, seed: u64, fault_budget: usize) -> Self {
        Self {
            params,
            gst,
            endpoints: vec![
                Endpoint {
                    egress_free: SimTime::ZERO,
                    fault: None,
                    bits_sent: 0,
                };
                n
            ],
            jitter: ChaCha12Rng::seed_from_u64(seed ^ 0x6e65_7477_6f72_6b),
            next_msg_seq: 0,
            fault_budget,
        }
    }

    pub fn len(&self) -> usize {
        self.endpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.endpoints.is_empty()
    }

    /// Registers a whole schedule up front, enforcing the fault budget.
    pub fn load_fault_schedule(&mut self, schedule: &FaultSchedule) -> Result<(), SimError> {
        let got = schedule.distinct_processes();
        if got > self.fault_budget {
            return Err(SimError::FaultBudgetExceeded {
                got,
                budget: self.fault_budget,
            });
        }
        for e in &schedule.entries {
            self.endpoints[e.process.index()].fault = Some((e.kind, e.activation));
        }
        Ok(())
    }

    pub fn fault_of(&self, p: ProcessId, now: SimTime) -> Option<FaultKind> {
        match self.endpoints[p.index()].fault {
            Some((kind, at)) if now >= at => Some(kind),
            _ => None,
        }
    }

    pub fn is_crashed(&self, p: ProcessId, now: SimTime) -> bool {
        matches!(self.fault_of(p, now), Some(FaultKind::CrashSilent))
    }

    pub fn bits_sent(&self, p: ProcessId) -> u64 {
        self.endpoints[p.index()].bits_sent
    }

    pub fn egress_free_at(&self, p: ProcessId) -> SimTime {
        self.endpoints[p.index()].egress_free
    }

    fn sender_omits(&self, kind: MessageKind, fault: FaultKind) -> bool {
        match fault {
            FaultKind::CrashSilent | FaultKind::OmitAll => true,
            FaultKind::OmitAggregates => {
                matches!(kind, MessageKind::Vote | MessageKind::NewView)
            }
        }
    }

    /// Queues a message on the sender's egress. Returns the delivery time,
    /// or `Dropped` when a fault swallows it. The egress is FIFO: a message
    /// departs once the link is free, then travels one hop.
    pub fn send(&mut self, src: ProcessId, dst: ProcessId, kind: MessageKind, size_bits: u64, now: SimTime) -> SendOutcome {
        if let Some(fault) = self.fault_of(src, now) {
            if self.sender_omits(kind, fault) {
                return SendOutcome::Dropped;
            }
        }
        let ep = &mut self.endpoints[src.index()];
        let depart = ep.egress_free.max(now);
        let tx = self.params.transmit_us(size_bits);
        ep.egress_free = depart + tx;
        ep.bits_sent += size_bits;
        let mut arrive = depart + tx + self.params.one_way_us();
        if depart < self.gst {
            // Bounded adversarial delay while the network is unstable.
            let extra = self.jitter.gen_range(0..=5 * self.params.rtt_us);
            arrive = arrive + extra;
        }
        // Receiver-side crash is checked against the arrival instant.
        if self.is_crashed(dst, arrive) {
            return SendOutcome::Dropped;
        }
        SendOutcome::Deliver { at: arrive }
    }

    pub fn next_seq(&mut self) -> u64 {
        let s = self.next_msg_seq;
        self.next_msg_seq += 1;
        s
    }
}

/// State of one impatient receive: opened at some instant, it resolves with
/// the first matching delivery or with bottom at `opened + delta`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImpatientOutcome<V> {
    Value(V, SimTime),
    Bottom(SimTime),
}

/// Resolves an impatient receive given the (optional) delivery time of the
/// awaited message. Pure helper; the consensus engine keeps equivalent
/// per-edge bookkeeping inline.
pub fn impatient_receive<V>(
    delivery: Option<(V, SimTime)>,
    opened: SimTime,
    delta_us: u64,
) -> ImpatientOutcome<V> {
    let deadline = opened + delta_us;
    match delivery {
        Some((v, at)) if at < deadline => ImpatientOutcome::Value(v, at),
        _ => ImpatientOutcome::Bottom(deadline),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> NetParams {
        NetParams {
            rtt_us: 200_000,
            bandwidth_bps: 25_000_000,
            delta_us: 300_000,
        }
    }

    #[test]
    fn send_arithmetic() {
        // 100 kbit at 25 Mb/s: 4 ms transmit + 100 ms one-way = 104 ms.
        let mut net = Network::new(2, params(), SimTime::ZERO, 7, 0);
        let out = net.send(ProcessId(0), ProcessId(1), MessageKind::Other, 100_000, SimTime::ZERO);
        assert_eq!(out, SendOutcome::Deliver { at: SimTime::us(104_000) });
        // Back-to-back send queues behind the first: 8 ms + 100 ms.
        let out2 = net.send(ProcessId(0), ProcessId(1), MessageKind::Other, 100_000, SimTime::ZERO);
        assert_eq!(out2, SendOutcome::Deliver { at: SimTime::us(108_000) });
        assert_eq!(net.bits_sent(ProcessId(0)), 200_000);
    }

    #[test]
    fn bandwidth_conservation() {
        let mut net = Network::new(2, params(), SimTime::ZERO, 7, 0);
        let mut last = SimTime::ZERO;
        for _ in 0..50 {
            if let SendOutcome::Deliver { at } =
                net.send(ProcessId(0), ProcessId(1), MessageKind::Other, 90_000, SimTime::ZERO)
            {
                last = last.max(at);
            }
        }
        let window_s = net.egress_free_at(ProcessId(0)).as_secs_f64();
        let sent = net.bits_sent(ProcessId(0)) as f64;
        assert!(sent <= params().bandwidth_bps as f64 * window_s + 1.0);
    }

    #[test]
    fn omission_faults() {
        let mut net = Network::new(3, params(), SimTime::ZERO, 7, 2);
        net.load_fault_schedule(&FaultSchedule {
            entries: vec![
                FaultEntry {
                    process: ProcessId(0),
                    kind: FaultKind::OmitAll,
                    activation: SimTime::ZERO,
                },
                FaultEntry {
                    process: ProcessId(1),
                    kind: FaultKind::OmitAggregates,
                    activation: SimTime::ZERO,
                },
            ],
        })
        .unwrap();
        assert_eq!(
            net.send(ProcessId(0), ProcessId(2), MessageKind::Proposal, 8, SimTime::ZERO),
            SendOutcome::Dropped
        );
        // OmitAggregates forwards proposals but not votes.
        assert!(matches!(
            net.send(ProcessId(1), ProcessId(2), MessageKind::Proposal, 8, SimTime::ZERO),
            SendOutcome::Deliver { .. }
        ));
        assert_eq!(
            net.send(ProcessId(1), ProcessId(2), MessageKind::Vote, 8, SimTime::ZERO),
            SendOutcome::Dropped
        );
    }

    #[test]
    fn fault_budget_enforced() {
        let mut net = Network::new(4, params(), SimTime::ZERO, 7, 1);
        let sched = FaultSchedule {
            entries: vec![
                FaultEntry { process: ProcessId(0), kind: FaultKind::OmitAll, activation: SimTime::ZERO },
                FaultEntry { process: ProcessId(1), kind: FaultKind::OmitAll, activation: SimTime::ZERO },
            ],
        };
        assert_eq!(
            net.load_fault_schedule(&sched).unwrap_err(),
            SimError::FaultBudgetExceeded { got: 2, budget: 1 }
        );
    }

    #[test]
    fn late_activation_has_no_effect_before_it() {
        let mut net = Network::new(2, params(), SimTime::ZERO, 7, 1);
        net.load_fault_schedule(&FaultSchedule {
            entries: vec![FaultEntry {
                process: ProcessId(0),
                kind: FaultKind::CrashSilent,
                activation: SimTime::us(1_000_000),
            }],
        })
        .unwrap();
        assert!(matches!(
            net.send(ProcessId(0), ProcessId(1), MessageKind::Other, 8, SimTime::ZERO),
            SendOutcome::Deliver { .. }
        ));
        assert_eq!(
            net.send(ProcessId(0), ProcessId(1), MessageKind::Other, 8, SimTime::us(1_000_000)),
            SendOutcome::Dropped
        );
    }

    #[test]
    fn queue_orders_by_time_then_seq() {
        let mut q: EventQueue<&'static str> = EventQueue::new();
        q.push(SimTime::us(5), "b").unwrap();
        q.push(SimTime::us(5), "c").unwrap();
        q.push(SimTime::us(1), "a").unwrap();
        assert_eq!(q.step().unwrap(), (SimTime::us(1), "a"));
        assert_eq!(q.step().unwrap(), (SimTime::us(5), "b"));
        assert_eq!(q.step().unwrap(), (SimTime::us(5), "c"));
        assert_eq!(q.step().unwrap_err(), SimError::Drained);
    }

    #[test]
    fn queue_rejects_past_events() {
        let mut q: EventQueue<u8> = EventQueue::new();
        q.push(SimTime::us(10), 1).unwrap();
        q.step().unwrap();
        assert_eq!(
            q.push(SimTime::us(5), 2).unwrap_err(),
            SimError::CausalityViolation { at: SimTime::us(5), now: SimTime::us(10) }
        );
    }

    #[test]
    fn deterministic_jitter_stream() {
        let run = || {
            let mut net = Network::new(2, params(), SimTime::us(2_000_000), 99, 0);
            (0..20)
                .map(|_| {
                    match net.send(ProcessId(0), ProcessId(1), MessageKind::Other, 1000, SimTime::ZERO) {
                        SendOutcome::Deliver { at } => at.as_us(),
                        SendOutcome::Dropped => 0,
                    }
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn impatient_semantics() {
        // Delivery before the deadline: returned at delivery time.
        let got = impatient_receive(Some(("v", SimTime::us(104_000))), SimTime::ZERO, 300_000);
        assert_eq!(got, ImpatientOutcome::Value("v", SimTime::us(104_000)));
        // No delivery: bottom exactly at the deadline.
        let got: ImpatientOutcome<&str> = impatient_receive(None, SimTime::ZERO, 300_000);
        assert_eq!(got, ImpatientOutcome::Bottom(SimTime::us(300_000)));
        // Delivery after the deadline counts as bottom.
        let got = impatient_receive(Some(("v", SimTime::us(400_000))), SimTime::ZERO, 300_000);
        assert_eq!(got, ImpatientOutcome::Bottom(SimTime::us(300_000)));
    }
}
