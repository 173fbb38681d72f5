//! Charging data records: emission at charging-capable nodes and
//! correlation at the collection point.
//!
//! A node emits one record per handled signaling event and session:
//! registration handling, session start, session end, AS invocation and
//! MRFC requests. The gateway triple (MGCF/SGW/MGW) never charges.

use std::collections::BTreeSet;
use std::fmt;

use crate::netsim::NodeId;

/// Node families that emit CDRs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CdrNodeType {
    Pcscf,
    Icscf,
    Scscf,
    Bgcf,
    Mrfc,
    As,
}

impl fmt::Display for CdrNodeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CdrNodeType::Pcscf => "PCSCF",
            CdrNodeType::Icscf => "ICSCF",
            CdrNodeType::Scscf => "SCSCF",
            CdrNodeType::Bgcf => "BGCF",
            CdrNodeType::Mrfc => "MRFC",
            CdrNodeType::As => "AS",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CdrEvent {
    Register,
    SessionStart,
    SessionEnd,
    AsInvocation,
    MediaControl,
}

impl fmt::Display for CdrEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CdrEvent::Register => "Register",
            CdrEvent::SessionStart => "SessionStart",
            CdrEvent::SessionEnd => "SessionEnd",
            CdrEvent::AsInvocation => "AsInvocation",
            CdrEvent::MediaControl => "MediaControl",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CdrRole {
    Originating,
    Terminating,
    None,
}

impl fmt::Display for CdrRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CdrRole::Originating => "originating",
            CdrRole::Terminating => "terminating",
            CdrRole::None => "none",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Cdr {
    pub tick: u64,
    pub node_id: NodeId,
    pub node_type: CdrNodeType,
    pub session_id: String,
    pub event: CdrEvent,
    pub served_user: String,
    pub role: CdrRole,
    pub as_on_behalf: bool,
}

impl Cdr {
    /// Dump line: tab-separated fields in declaration order, booleans as
    /// 0 or 1.
    fn dump_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.tick,
            self.node_id,
            self.node_type,
            self.session_id,
            self.event,
            self.served_user,
            self.role,
            u8::from(self.as_on_behalf),
        )
    }
}

/// Append-only record log ordered by emission tick.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CollectionLog {
    records: Vec<Cdr>,
}

impl CollectionLog {
    /// Appends one record. The invariant that `as_on_behalf` appears only
    /// on AS-side records is enforced here.
    pub fn emit(&mut self, cdr: Cdr) {
        debug_assert!(
            !cdr.as_on_behalf
                || cdr.node_type == CdrNodeType::As
                || cdr.event == CdrEvent::AsInvocation,
            "as_on_behalf is an AS-side flag"
        );
        debug_assert!(
            !cdr.session_id.is_empty(),
            "session events need a session id"
        );
        self.records.push(cdr);
    }

    pub fn records(&self) -> &[Cdr] {
        &self.records
    }

    /// Whether a (node, session, event) record already exists; nodes use
    /// this to emit once per handled event and session.
    pub fn already_emitted(&self, node: &NodeId, session_id: &str, event: CdrEvent) -> bool {
        self.records
            .iter()
            .any(|c| c.node_id == *node && c.session_id == session_id && c.event == event)
    }

    pub fn dump(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.dump_line());
            out.push('\n');
        }
        out
    }
}

/// Correlated view of one session's records.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CdrSummary {
    pub node_ids: BTreeSet<NodeId>,
    pub first_tick: Option<u64>,
    pub last_tick: Option<u64>,
    pub served_users: BTreeSet<String>,
    pub record_count: usize,
}

/// Deterministic grouping by session id.
pub fn correlate(log: &CollectionLog, session_id: &str) -> CdrSummary {
    let mut summary = CdrSummary::default();
    for r in log.records().iter().filter(|r| r.session_id == session_id) {
        summary.node_ids.insert(r.node_id.clone());
        summary.first_tick = Some(summary.first_tick.map_or(r.tick, |t| t.min(r.tick)));
        summary.last_tick = Some(summary.last_tick.map_or(r.tick, |t| t.max(r.tick)));
        summary.served_users.insert(r.served_user.clone());
        summary.record_count += 1;
    }
    summary
}

/// All session ids present in the log, in first-appearance order.
pub fn session_ids(log: &CollectionLog) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in log.records() {
        if seen.insert(r.session_id.clone()) {
            out.push(r.session_id.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cdr(tick: u64, node: &str, session: &str, event: CdrEvent) -> Cdr {
        Cdr {
            tick,
            node_id: NodeId::new(node),
            node_type: CdrNodeType::Scscf,
            session_id: session.to_string(),
            event,
            served_user: "sip:john@home.net".to_string(),
            role: CdrRole::Originating,
            as_on_behalf: false,
        }
    }

    #[test]
    fn unknown_session_correlates_to_empty() {
        let log = CollectionLog::default();
        let summary = correlate(&log, "ghost");
        assert!(summary.node_ids.is_empty());
        assert_eq!(summary.record_count, 0);
    }

    #[test]
    fn one_call_spans_start_to_end() {
        let mut log = CollectionLog::default();
        log.emit(cdr(10, "pcscf1", "call-1", CdrEvent::SessionStart));
        log.emit(cdr(12, "scscf1", "call-1", CdrEvent::SessionStart));
        log.emit(cdr(40, "scscf1", "call-1", CdrEvent::SessionEnd));
        let summary = correlate(&log, "call-1");
        assert_eq!(summary.first_tick, Some(10));
        assert_eq!(summary.last_tick, Some(40));
        assert_eq!(summary.node_ids.len(), 2);
        assert_eq!(summary.record_count, 3);
    }

    #[test]
    fn interleaved_calls_partition_into_disjoint_groups() {
        let mut log = CollectionLog::default();
        log.emit(cdr(1, "p1", "call-1", CdrEvent::SessionStart));
        log.emit(cdr(2, "p2", "call-2", CdrEvent::SessionStart));
        log.emit(cdr(3, "s1", "call-1", CdrEvent::SessionStart));
        log.emit(cdr(4, "s2", "call-2", CdrEvent::SessionStart));
        log.emit(cdr(5, "s1", "call-1", CdrEvent::SessionEnd));
        log.emit(cdr(6, "s2", "call-2", CdrEvent::SessionEnd));

        // Oracle: partition records by tagged session and compare.
        let mut expected_one = BTreeSet::new();
        let mut expected_two = BTreeSet::new();
        for r in log.records() {
            match r.session_id.as_str() {
                "call-1" => expected_one.insert(r.node_id.clone()),
                _ => expected_two.insert(r.node_id.clone()),
            };
        }
        let one = correlate(&log, "call-1");
        let two = correlate(&log, "call-2");
        assert_eq!(one.node_ids, expected_one);
        assert_eq!(two.node_ids, expected_two);
        assert!(one.node_ids.is_disjoint(&two.node_ids));
        assert_eq!(
            session_ids(&log),
            vec!["call-1".to_string(), "call-2".to_string()]
        );
    }

    #[test]
    fn dump_format_is_tab_separated_with_numeric_bools() {
        let mut log = CollectionLog::default();
        let mut record = cdr(7, "as1", "call-1", CdrEvent::AsInvocation);
        record.node_type = CdrNodeType::As;
        record.as_on_behalf = true;
        record.role = CdrRole::None;
        log.emit(record);
        assert_eq!(
            log.dump(),
            "7\tas1\tAS\tcall-1\tAsInvocation\tsip:john@home.net\tnone\t1\n"
        );
    }

    #[test]
    fn log_prefix_property() {
        let mut log = CollectionLog::default();
        log.emit(cdr(1, "p1", "call-1", CdrEvent::SessionStart));
        let prefix = log.dump();
        log.emit(cdr(2, "s1", "call-1", CdrEvent::SessionEnd));
        assert!(log.dump().starts_with(&prefix));
    }

    #[test]
    fn dedup_guard() {
        let mut log = CollectionLog::default();
        log.emit(cdr(1, "p1", "call-1", CdrEvent::SessionStart));
        assert!(log.already_emitted(&NodeId::new("p1"), "call-1", CdrEvent::SessionStart));
        assert!(!log.already_emitted(&NodeId::new("p1"), "call-1", CdrEvent::SessionEnd));
        assert!(!log.already_emitted(&NodeId::new("p2"), "call-1", CdrEvent::SessionStart));
    }
}
