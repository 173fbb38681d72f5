//! Deterministic discrete-event harness: nodes, links, the event queue,
//! trace capture and fault injection via link state.
//!
//! Events are delivered in `(deliver_tick, seq)` order with a globally
//! monotone sequence number, so a run is a pure function of its inputs.
//! The loop is strictly single-threaded; independent simulations share
//! nothing and may run in parallel.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use thiserror::Error;

use crate::interworking::SgwFrame;
use crate::policy::CopsMsg;
use crate::signaling::{DiameterMsg, SigMessage};

/// Identifier of a simulated node.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: &str) -> Self {
        Self(id.to_string())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId::new(s)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("tick budget of {0} exceeded")]
    TickBudgetExceeded(u64),
}

/// Headers surfaced in trace summaries, in this order.
const SUMMARY_HEADERS: &[&str] = &[
    "X-DIR",
    "X-DENY",
    "X-SCREEN",
    "X-PRESENCE",
    "X-ANSWERS",
    "X-AS-ON-BEHALF",
    "X-MR-REQ",
    "MP-VERB",
    "MP-CONF",
    "MP-ARGS",
];

/// Everything a link can carry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Sig(SigMessage),
    Dia(DiameterMsg),
    Cs(SgwFrame),
    Cops(CopsMsg),
}

impl Payload {
    pub fn kind_label(&self) -> String {
        match self {
            Payload::Sig(m) => format!("SIP-{}", m.kind),
            Payload::Dia(m) => format!("DIA-{}-{}", m.interface, m.command),
            Payload::Cs(f) => format!("CS-{}-{}", f.transport, f.inner.primitive),
            Payload::Cops(c) => format!("COPS-{}", c.label()),
        }
    }

    pub fn summary(&self) -> String {
        match self {
            Payload::Sig(m) => {
                let mut parts = Vec::new();
                if let Some(flow) = m.header("X-SESSION") {
                    parts.push(format!("flow={flow}"));
                }
                parts.push(format!("from={}", m.from));
                parts.push(format!("to={}", m.to));
                for key in SUMMARY_HEADERS {
                    if let Some(v) = m.header(key) {
                        parts.push(format!("{key}={v}"));
                    }
                }
                let via: Vec<&str> = m.via().iter().map(|n| n.as_str()).collect();
                parts.push(format!(
                    "via={}",
                    if via.is_empty() {
                        "-".to_string()
                    } else {
                        via.join(",")
                    }
                ));
                if !m.route().is_empty() {
                    let route: Vec<&str> = m.route().iter().map(|n| n.as_str()).collect();
                    parts.push(format!("route={}", route.join(",")));
                }
                parts.push(format!("size={}", m.size_bytes()));
                if m.compressed() {
                    parts.push("comp".to_string());
                }
                parts.join(" ")
            }
            Payload::Dia(m) => {
                let mut parts = Vec::new();
                if let Some(flow) = m.get("flow") {
                    parts.push(format!("flow={flow}"));
                }
                parts.push(format!("sess={}", m.session_id));
                let visible: Vec<(&String, &String)> =
                    m.payload.iter().filter(|(k, _)| *k != "flow").collect();
                if visible.len() <= 4 {
                    for (k, v) in visible {
                        parts.push(format!("{k}={v}"));
                    }
                } else {
                    let keys: Vec<&str> = visible.iter().map(|(k, _)| k.as_str()).collect();
                    parts.push(format!("keys={}", keys.join(",")));
                }
                parts.join(" ")
            }
            Payload::Cs(f) => format!(
                "ref={} digits={} family={}",
                f.inner.call_ref, f.inner.digits, f.inner.family
            ),
            Payload::Cops(c) => c.summary(),
        }
    }
}

/// A queued delivery.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Event {
    pub deliver_tick: u64,
    pub seq: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub payload: Payload,
}

impl Ord for Event {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.deliver_tick, self.seq).cmp(&(other.deliver_tick, other.seq))
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEntry {
    pub tick: u64,
    pub src: NodeId,
    pub dst: NodeId,
    pub kind: String,
    pub seq: u64,
    pub summary: String,
}

/// Append-only event log; total order matches processing order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    seed: u64,
    entries: Vec<TraceEntry>,
}

impl Trace {
    fn new(seed: u64) -> Self {
        Self {
            seed,
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[TraceEntry] {
        &self.entries
    }

    pub fn render(&self) -> String {
        let mut out = format!("TRACE v1 seed={}\n", self.seed);
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.tick, e.src, e.dst, e.kind, e.seq, e.summary
            ));
        }
        out
    }
}

/// Whether a scheduled send actually entered the queue.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Scheduled,
    Dropped,
}

#[derive(Debug, Clone, Copy)]
struct LinkState {
    latency: u64,
    up: bool,
}

/// The event loop. Owns links, clock, queue and trace.
#[derive(Debug)]
pub struct Sim {
    tick: u64,
    next_seq: u64,
    nodes: BTreeSet<NodeId>,
    links: BTreeMap<(NodeId, NodeId), LinkState>,
    queue: BinaryHeap<Reverse<Event>>,
    trace: Trace,
}

/// A node-state container driven by the loop.
pub trait NetWorld {
    fn deliver(&mut self, sim: &mut Sim, ev: Event);
}

impl Sim {
    pub fn new(seed: u64) -> Self {
        Self {
            tick: 0,
            next_seq: 1,
            nodes: BTreeSet::new(),
            links: BTreeMap::new(),
            queue: BinaryHeap::new(),
            trace: Trace::new(seed),
        }
    }

    pub fn now(&self) -> u64 {
        self.tick
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    pub fn register_node(&mut self, id: NodeId) {
        self.nodes.insert(id);
    }

    fn link_key(a: &NodeId, b: &NodeId) -> (NodeId, NodeId) {
        if a <= b {
            (a.clone(), b.clone())
        } else {
            (b.clone(), a.clone())
        }
    }

    /// Links are bidirectional; latency is at least one tick.
    pub fn add_link(&mut self, a: &NodeId, b: &NodeId, latency: u64) {
        self.links.insert(
            Self::link_key(a, b),
            LinkState {
                latency: latency.max(1),
                up: true,
            },
        );
    }

    pub fn set_link_up(&mut self, a: &NodeId, b: &NodeId, up: bool) {
        if let Some(l) = self.links.get_mut(&Self::link_key(a, b)) {
            l.up = up;
        }
    }

    pub fn has_link(&self, a: &NodeId, b: &NodeId) -> bool {
        self.links.contains_key(&Self::link_key(a, b))
    }

    pub fn linked_peers(&self, node: &NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        for (a, b) in self.links.keys() {
            if a == node {
                out.push(b.clone());
            } else if b == node {
                out.push(a.clone());
            }
        }
        out
    }

    fn alloc_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    /// Queues a delivery over the link between `src` and `dst`. A missing
    /// or downed link converts the event into a `DROP` trace entry and
    /// reports it to the caller.
    pub fn schedule(
        &mut self,
        src: &NodeId,
        dst: &NodeId,
        payload: Payload,
    ) -> Result<SendOutcome, SimError> {
        if !self.nodes.contains(src) {
            return Err(SimError::UnknownNode(src.clone()));
        }
        if !self.nodes.contains(dst) {
            return Err(SimError::UnknownNode(dst.clone()));
        }
        let seq = self.alloc_seq();
        let link = self.links.get(&Self::link_key(src, dst)).copied();
        match link {
            Some(l) if l.up => {
                self.queue.push(Reverse(Event {
                    deliver_tick: self.tick + l.latency,
                    seq,
                    src: src.clone(),
                    dst: dst.clone(),
                    payload,
                }));
                Ok(SendOutcome::Scheduled)
            }
            _ => {
                self.trace.entries.push(TraceEntry {
                    tick: self.tick,
                    src: src.clone(),
                    dst: dst.clone(),
                    kind: "DROP".to_string(),
                    seq,
                    summary: format!("link-down {} {}", payload.kind_label(), payload.summary()),
                });
                Ok(SendOutcome::Dropped)
            }
        }
    }

    /// Queues a node-internal event (no link required).
    pub fn schedule_local(
        &mut self,
        node: &NodeId,
        delay: u64,
        payload: Payload,
    ) -> Result<(), SimError> {
        if !self.nodes.contains(node) {
            return Err(SimError::UnknownNode(node.clone()));
        }
        let seq = self.alloc_seq();
        self.queue.push(Reverse(Event {
            deliver_tick: self.tick + delay.max(1),
            seq,
            src: node.clone(),
            dst: node.clone(),
            payload,
        }));
        Ok(())
    }

    /// Trace-only entry for node-level observations (flow outcomes, media
    /// marks, gateway control). Consumes a sequence number so the total
    /// order stays unambiguous.
    pub fn note(&mut self, src: &NodeId, dst: &NodeId, kind: &str, summary: String) {
        let seq = self.alloc_seq();
        self.trace.entries.push(TraceEntry {
            tick: self.tick,
            src: src.clone(),
            dst: dst.clone(),
            kind: kind.to_string(),
            seq,
            summary,
        });
    }

    /// Drains the queue through `world` until it is empty or the budget
    /// runs out. Ticks never decrease; identical inputs produce identical
    /// traces.
    pub fn run_until_quiescent<W: NetWorld>(
        &mut self,
        world: &mut W,
        max_ticks: u64,
    ) -> Result<(), SimError> {
        while let Some(Reverse(ev)) = self.queue.pop() {
            if ev.deliver_tick > max_ticks {
                self.queue.push(Reverse(ev));
                return Err(SimError::TickBudgetExceeded(max_ticks));
            }
            debug_assert!(ev.deliver_tick >= self.tick);
            self.tick = ev.deliver_tick;
            self.trace.entries.push(TraceEntry {
                tick: ev.deliver_tick,
                src: ev.src.clone(),
                dst: ev.dst.clone(),
                kind: ev.payload.kind_label(),
                seq: ev.seq,
                summary: ev.payload.summary(),
            });
            world.deliver(self, ev);
        }
        Ok(())
    }

    pub fn queue_is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Advances the clock between action injections.
    pub fn advance(&mut self, ticks: u64) {
        self.tick += ticks;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::Uri;
    use crate::signaling::MsgKind;

    fn sig(seq: u64) -> Payload {
        Payload::Sig(SigMessage::new(
            MsgKind::Message,
            seq,
            Uri::parse("sip:a@x.net").unwrap(),
            Uri::parse("sip:b@x.net").unwrap(),
        ))
    }

    /// Echo world: terminal `b` answers the first message it sees.
    struct Echo {
        replies_left: u32,
    }

    impl NetWorld for Echo {
        fn deliver(&mut self, sim: &mut Sim, ev: Event) {
            if ev.dst.as_str() == "b" && self.replies_left > 0 {
                self.replies_left -= 1;
                sim.schedule(&ev.dst, &ev.src, sig(99)).unwrap();
            }
        }
    }

    #[test]
    fn latency_arithmetic() {
        let mut sim = Sim::new(0);
        let (a, b) = (NodeId::new("a"), NodeId::new("b"));
        sim.register_node(a.clone());
        sim.register_node(b.clone());
        sim.add_link(&a, &b, 2);
        sim.advance(5);
        sim.schedule(&a, &b, sig(1)).unwrap();
        let mut w = Echo { replies_left: 0 };
        sim.run_until_quiescent(&mut w, 100).unwrap();
        assert_eq!(sim.trace().entries()[0].tick, 7);
    }

    #[test]
    fn downed_link_produces_drop_entry() {
        let mut sim = Sim::new(0);
        let (a, b) = (NodeId::new("a"), NodeId::new("b"));
        sim.register_node(a.clone());
        sim.register_node(b.clone());
        sim.add_link(&a, &b, 1);
        sim.set_link_up(&a, &b, false);
        let outcome = sim.schedule(&a, &b, sig(1)).unwrap();
        assert_eq!(outcome, SendOutcome::Dropped);
        let mut w = Echo { replies_left: 0 };
        sim.run_until_quiescent(&mut w, 100).unwrap();
        assert_eq!(sim.trace().entries().len(), 1);
        assert_eq!(sim.trace().entries()[0].kind, "DROP");
    }

    #[test]
    fn same_tick_events_process_in_seq_order() {
        let mut sim = Sim::new(0);
        let (a, b) = (NodeId::new("a"), NodeId::new("b"));
        sim.register_node(a.clone());
        sim.register_node(b.clone());
        sim.add_link(&a, &b, 1);
        sim.schedule(&a, &b, sig(1)).unwrap();
        sim.schedule(&a, &b, sig(2)).unwrap();
        let mut w = Echo { replies_left: 0 };
        sim.run_until_quiescent(&mut w, 100).unwrap();
        let seqs: Vec<u64> = sim.trace().entries().iter().map(|e| e.seq).collect();
        assert_eq!(seqs, vec![1, 2]);
    }

    #[test]
    fn empty_queue_yields_empty_trace() {
        let mut sim = Sim::new(0);
        let mut w = Echo { replies_left: 0 };
        sim.run_until_quiescent(&mut w, 100).unwrap();
        assert!(sim.trace().entries().is_empty());
        assert_eq!(sim.trace().render(), "TRACE v1 seed=0\n");
    }

    #[test]
    fn identical_runs_produce_identical_trace_bytes() {
        let run = || {
            let mut sim = Sim::new(7);
            let (a, b) = (NodeId::new("a"), NodeId::new("b"));
            sim.register_node(a.clone());
            sim.register_node(b.clone());
            sim.add_link(&a, &b, 3);
            sim.schedule(&a, &b, sig(1)).unwrap();
            sim.schedule(&a, &b, sig(2)).unwrap();
            let mut w = Echo { replies_left: 2 };
            sim.run_until_quiescent(&mut w, 1000).unwrap();
            sim.trace().render()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn budget_exceeded_is_reported() {
        let mut sim = Sim::new(0);
        let (a, b) = (NodeId::new("a"), NodeId::new("b"));
        sim.register_node(a.clone());
        sim.register_node(b.clone());
        sim.add_link(&a, &b, 50);
        sim.schedule(&a, &b, sig(1)).unwrap();
        let mut w = Echo { replies_left: 0 };
        let err = sim.run_until_quiescent(&mut w, 10).unwrap_err();
        assert_eq!(err, SimError::TickBudgetExceeded(10));
        assert!(!sim.queue_is_empty());
    }

    #[test]
    fn quiescence_means_empty_queue_and_ticks_never_decrease() {
        let mut sim = Sim::new(0);
        let (a, b) = (NodeId::new("a"), NodeId::new("b"));
        sim.register_node(a.clone());
        sim.register_node(b.clone());
        sim.add_link(&a, &b, 1);
        sim.schedule(&a, &b, sig(1)).unwrap();
        let mut w = Echo { replies_left: 1 };
        sim.run_until_quiescent(&mut w, 1000).unwrap();
        assert!(sim.queue_is_empty());
        let ticks: Vec<u64> = sim.trace().entries().iter().map(|e| e.tick).collect();
        assert!(ticks.windows(2).all(|w| w[0] <= w[1]));
    }
}
