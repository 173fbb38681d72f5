//! P-CSCF, I-CSCF and S-CSCF state: registration bindings, routing
//! decisions and topology hiding.
//!
//! The routing functions here are pure: they take a snapshot of the
//! relevant state and a target, and always produce the same decision.
//! Flow mechanics (who forwards what to whom) live in the runner.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::hss::digest;
use crate::identity::{EnumRegistry, SipUri, Uri};
use crate::netsim::NodeId;
use crate::policy::PepCache;
use crate::signaling::{MediaKind, SigMessage};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CscfError {
    #[error("terminal `{0}` has no configured P-CSCF")]
    NoPcscfConfigured(NodeId),
    #[error("no eligible S-CSCF among the candidates")]
    NoEligibleScscf,
    #[error("topology hiding token `{0}` was not issued by this I-CSCF")]
    UnknownToken(String),
}

/// Why a routing decision refuses a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    UnknownDestination,
    UserUnavailable,
}

impl std::fmt::Display for RejectReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RejectReason::UnknownDestination => write!(f, "UnknownDestination"),
            RejectReason::UserUnavailable => write!(f, "UserUnavailable"),
        }
    }
}

/// Closed set of next-step decisions a CSCF can take for a message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RoutingDecision {
    ToAsChain(Vec<NodeId>),
    ToIcscf(String),
    ToPcscf(NodeId),
    ToBgcf,
    ToExternalSip(String),
    Reject(RejectReason),
}

/// One registered contact for a public id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistrationBinding {
    pub public_id: Uri,
    pub contact: NodeId,
    pub expiry_tick: u64,
    pub security_association_id: String,
    pub compression_negotiated: bool,
}

/// First contact point between a terminal and the network.
#[derive(Debug, Clone)]
pub struct PcscfState {
    pub id: NodeId,
    pub domain: String,
    pub served_terminals: BTreeSet<NodeId>,
    pub security_assocs: BTreeMap<NodeId, String>,
    pub scscf_for_terminal: BTreeMap<NodeId, NodeId>,
    pub compression_negotiated: BTreeMap<NodeId, bool>,
    pub pep: PepCache,
}

impl PcscfState {
    pub fn new(id: NodeId, domain: &str) -> Self {
        Self {
            id,
            domain: domain.to_string(),
            served_terminals: BTreeSet::new(),
            security_assocs: BTreeMap::new(),
            scscf_for_terminal: BTreeMap::new(),
            compression_negotiated: BTreeMap::new(),
            pep: PepCache::default(),
        }
    }
}

/// Edge of the administrative domain.
#[derive(Debug, Clone)]
pub struct IcscfState {
    pub id: NodeId,
    pub domain: String,
    pub thig_enabled: bool,
    pub thig_key: String,
    /// S-CSCF chosen for an in-flight registration, keyed by public id.
    pub pending_selection: BTreeMap<String, NodeId>,
}

impl IcscfState {
    pub fn new(id: NodeId, domain: &str, thig_enabled: bool) -> Self {
        let thig_key = format!("k-{id}");
        Self {
            id,
            domain: domain.to_string(),
            thig_enabled,
            thig_key,
            pending_selection: BTreeMap::new(),
        }
    }
}

/// Central signaling-plane node: registrar plus session control.
#[derive(Debug, Clone)]
pub struct ScscfState {
    pub id: NodeId,
    pub domain: String,
    pub capabilities: BTreeSet<MediaKind>,
    registrar: BTreeMap<String, Vec<RegistrationBinding>>,
    pub active_sessions: BTreeMap<String, SessionState>,
    pub pep: PepCache,
}

/// Per-session state held by the serving CSCF.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionState {
    pub session_id: String,
    pub orig_public: Uri,
    pub dest: Uri,
    pub originating_here: bool,
}

impl ScscfState {
    pub fn new(id: NodeId, domain: &str, capabilities: BTreeSet<MediaKind>) -> Self {
        Self {
            id,
            domain: domain.to_string(),
            capabilities,
            registrar: BTreeMap::new(),
            active_sessions: BTreeMap::new(),
            pep: PepCache::default(),
        }
    }

    /// Stores or refreshes a binding; one binding per (public id, contact).
    pub fn bind(&mut self, binding: RegistrationBinding) {
        let slot = self
            .registrar
            .entry(binding.public_id.to_string())
            .or_default();
        if let Some(existing) = slot.iter_mut().find(|b| b.contact == binding.contact) {
            *existing = binding;
        } else {
            slot.push(binding);
        }
    }

    pub fn unbind_all(&mut self, public_id: &Uri) {
        self.registrar.remove(&public_id.to_string());
    }

    pub fn bindings(&self, public_id: &Uri, now: u64) -> Vec<&RegistrationBinding> {
        self.registrar
            .get(&public_id.to_string())
            .map(|v| v.iter().filter(|b| b.expiry_tick > now).collect())
            .unwrap_or_default()
    }

    /// Delivery contact: freshest binding, ties broken by contact id.
    pub fn contact_for(&self, public_id: &Uri, now: u64) -> Option<&RegistrationBinding> {
        self.bindings(public_id, now)
            .into_iter()
            .max_by(|a, b| (a.expiry_tick, &b.contact).cmp(&(b.expiry_tick, &a.contact)))
    }

    /// Live bindings across all users; the load metric for selection.
    pub fn binding_count(&self, now: u64) -> usize {
        self.registrar
            .values()
            .map(|v| v.iter().filter(|b| b.expiry_tick > now).count())
            .sum()
    }
}

/// Static per-terminal discovery table.
pub fn pcscf_discover(
    terminal: &NodeId,
    table: &BTreeMap<NodeId, NodeId>,
) -> Result<NodeId, CscfError> {
    table
        .get(terminal)
        .cloned()
        .ok_or_else(|| CscfError::NoPcscfConfigured(terminal.clone()))
}

/// Candidate S-CSCF as seen from the I-CSCF at selection time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScscfDescriptor {
    pub id: NodeId,
    pub capabilities: BTreeSet<MediaKind>,
    pub binding_count: usize,
}

/// Sticky on a prior assignment; otherwise capability match, then lowest
/// binding count, then lexicographically smallest id.
pub fn icscf_select_scscf(
    prior: Option<NodeId>,
    required: &BTreeSet<MediaKind>,
    candidates: &[ScscfDescriptor],
) -> Result<NodeId, CscfError> {
    if let Some(prior) = prior {
        return Ok(prior);
    }
    candidates
        .iter()
        .filter(|c| required.is_subset(&c.capabilities))
        .min_by(|a, b| (a.binding_count, &a.id).cmp(&(b.binding_count, &b.id)))
        .map(|c| c.id.clone())
        .ok_or(CscfError::NoEligibleScscf)
}

/// Domain knowledge a routing decision depends on.
#[derive(Debug, Clone)]
pub struct RouteContext<'a> {
    pub ims_domains: &'a BTreeSet<String>,
    pub external_hosts: &'a BTreeSet<String>,
    pub enum_registry: &'a EnumRegistry,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OrigRoute {
    pub decision: RoutingDecision,
    /// Set when an ENUM hit rewrote the tel target into a SIP target.
    pub rewritten_target: Option<Uri>,
}

/// Originating-side precedence: pending originating iFCs, then tel
/// targets through ENUM (hit rewrites and re-evaluates, miss breaks out),
/// then SIP targets by domain class.
pub fn route_originating(
    ctx: &RouteContext<'_>,
    pending_ifcs: &[NodeId],
    target: &Uri,
) -> OrigRoute {
    if !pending_ifcs.is_empty() {
        return OrigRoute {
            decision: RoutingDecision::ToAsChain(pending_ifcs.to_vec()),
            rewritten_target: None,
        };
    }
    match target {
        Uri::Tel(tel) => match ctx.enum_registry.lookup(tel) {
            Ok(sip) => OrigRoute {
                decision: route_sip_target(ctx, sip),
                rewritten_target: Some(Uri::Sip(sip.clone())),
            },
            Err(_) => OrigRoute {
                decision: RoutingDecision::ToBgcf,
                rewritten_target: None,
            },
        },
        Uri::Sip(sip) => OrigRoute {
            decision: route_sip_target(ctx, sip),
            rewritten_target: None,
        },
    }
}

fn route_sip_target(ctx: &RouteContext<'_>, target: &SipUri) -> RoutingDecision {
    if ctx.ims_domains.contains(target.host()) {
        RoutingDecision::ToIcscf(target.host().to_string())
    } else if ctx.external_hosts.contains(target.host()) {
        RoutingDecision::ToExternalSip(target.host().to_string())
    } else {
        RoutingDecision::Reject(RejectReason::UnknownDestination)
    }
}

/// Terminating-side inputs: what the serving CSCF knows about the callee.
#[derive(Debug, Clone)]
pub struct TermInputs<'a> {
    pub pending_ifcs: &'a [NodeId],
    pub registered_contact: Option<NodeId>,
    pub cs_forward_unregistered: bool,
}

/// Terminating-side precedence: pending terminating iFCs, then delivery
/// to the registered contact, then CS forwarding, then rejection.
pub fn route_terminating(inputs: &TermInputs<'_>) -> RoutingDecision {
    if !inputs.pending_ifcs.is_empty() {
        return RoutingDecision::ToAsChain(inputs.pending_ifcs.to_vec());
    }
    if let Some(contact) = &inputs.registered_contact {
        return RoutingDecision::ToPcscf(contact.clone());
    }
    if inputs.cs_forward_unregistered {
        return RoutingDecision::ToBgcf;
    }
    RoutingDecision::Reject(RejectReason::UserUnavailable)
}

// --- Topology hiding -----------------------------------------------------

fn thig_encode(key: &str, issuer: &NodeId, node: &NodeId) -> NodeId {
    let kb = key.as_bytes();
    let mut hex = String::with_capacity(node.as_str().len() * 2);
    for (i, b) in node.as_str().bytes().enumerate() {
        hex.push_str(&format!("{:02x}", b ^ kb[i % kb.len()]));
    }
    let check = &digest(&hex, key)[..8];
    NodeId::new(&format!("THIG({issuer}:{hex}.{check})"))
}

fn thig_decode(key: &str, issuer: &NodeId, token: &str) -> Result<NodeId, CscfError> {
    let bad = || CscfError::UnknownToken(token.to_string());
    let inner = token
        .strip_prefix("THIG(")
        .and_then(|s| s.strip_suffix(')'))
        .ok_or_else(bad)?;
    let (owner, rest) = inner.split_once(':').ok_or_else(bad)?;
    if owner != issuer.as_str() {
        return Err(bad());
    }
    let (hex, check) = rest.split_once('.').ok_or_else(bad)?;
    if digest(hex, key).get(..8) != Some(check) {
        return Err(bad());
    }
    if hex.len() % 2 != 0 {
        return Err(bad());
    }
    let kb = key.as_bytes();
    let mut out = String::with_capacity(hex.len() / 2);
    for i in 0..hex.len() / 2 {
        let byte = u8::from_str_radix(&hex[i * 2..i * 2 + 2], 16).map_err(|_| bad())?;
        out.push((byte ^ kb[i % kb.len()]) as char);
    }
    Ok(NodeId::new(&out))
}

fn is_own_token(issuer: &NodeId, entry: &NodeId) -> bool {
    entry
        .as_str()
        .strip_prefix("THIG(")
        .and_then(|s| s.split_once(':'))
        .is_some_and(|(owner, _)| owner == issuer.as_str())
}

/// Replaces every home-domain node id in the route and via stacks with a
/// key-indexed token. The issuing I-CSCF itself stays in clear: it is the
/// published entry point of the domain and tokens must remain routable
/// back to it. Foreign ids pass through unchanged.
pub fn thig_apply(
    state: &IcscfState,
    home_nodes: &BTreeSet<NodeId>,
    msg: &SigMessage,
) -> SigMessage {
    let hide = |n: &NodeId| {
        if home_nodes.contains(n) && *n != state.id {
            thig_encode(&state.thig_key, &state.id, n)
        } else {
            n.clone()
        }
    };
    let mut out = msg.clone();
    out.set_route(msg.route().iter().map(hide).collect());
    out.set_via(msg.via().iter().map(hide).collect());
    out
}

/// Exact inverse of [`thig_apply`] for tokens this I-CSCF issued. A token
/// claiming this issuer but failing its check is refused.
pub fn thig_strip(state: &IcscfState, msg: &SigMessage) -> Result<SigMessage, CscfError> {
    let reveal = |n: &NodeId| -> Result<NodeId, CscfError> {
        if is_own_token(&state.id, n) {
            thig_decode(&state.thig_key, &state.id, n.as_str())
        } else {
            Ok(n.clone())
        }
    };
    let mut route = Vec::with_capacity(msg.route().len());
    for n in msg.route() {
        route.push(reveal(n)?);
    }
    let mut via = Vec::with_capacity(msg.via().len());
    for n in msg.via() {
        via.push(reveal(n)?);
    }
    let mut out = msg.clone();
    out.set_route(route);
    out.set_via(via);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signaling::MsgKind;

    fn uri(s: &str) -> Uri {
        Uri::parse(s).unwrap()
    }

    #[test]
    fn discovery_is_a_table_lookup() {
        let mut table = BTreeMap::new();
        table.insert(NodeId::new("t-john"), NodeId::new("pcscf1"));
        table.insert(NodeId::new("t-mary"), NodeId::new("pcscf1"));
        assert_eq!(
            pcscf_discover(&NodeId::new("t-john"), &table).unwrap(),
            NodeId::new("pcscf1")
        );
        assert_eq!(
            pcscf_discover(&NodeId::new("t-mary"), &table).unwrap(),
            NodeId::new("pcscf1")
        );
        assert!(matches!(
            pcscf_discover(&NodeId::new("t-ghost"), &table),
            Err(CscfError::NoPcscfConfigured(_))
        ));
    }

    fn descriptor(id: &str, count: usize) -> ScscfDescriptor {
        ScscfDescriptor {
            id: NodeId::new(id),
            capabilities: [MediaKind::Audio, MediaKind::Video, MediaKind::Data].into(),
            binding_count: count,
        }
    }

    #[test]
    fn selection_prefers_prior_assignment() {
        let cands = [descriptor("scscf1", 0), descriptor("scscf2", 5)];
        let got =
            icscf_select_scscf(Some(NodeId::new("scscf2")), &BTreeSet::new(), &cands).unwrap();
        assert_eq!(got, NodeId::new("scscf2"));
    }

    #[test]
    fn selection_breaks_ties_lexicographically() {
        let cands = [descriptor("scscf2", 0), descriptor("scscf1", 0)];
        let got = icscf_select_scscf(None, &BTreeSet::new(), &cands).unwrap();
        assert_eq!(got, NodeId::new("scscf1"));
    }

    #[test]
    fn selection_prefers_lower_load() {
        let cands = [descriptor("scscf1", 5), descriptor("scscf2", 0)];
        let got = icscf_select_scscf(None, &BTreeSet::new(), &cands).unwrap();
        assert_eq!(got, NodeId::new("scscf2"));
    }

    #[test]
    fn selection_respects_capabilities() {
        let mut limited = descriptor("scscf1", 0);
        limited.capabilities = [MediaKind::Audio].into();
        let cands = [limited, descriptor("scscf2", 9)];
        let need: BTreeSet<MediaKind> = [MediaKind::Video].into();
        assert_eq!(
            icscf_select_scscf(None, &need, &cands).unwrap(),
            NodeId::new("scscf2")
        );
        let nothing: [ScscfDescriptor; 0] = [];
        assert!(icscf_select_scscf(None, &BTreeSet::new(), &nothing).is_err());
    }

    fn ctx_fixture() -> (BTreeSet<String>, BTreeSet<String>, EnumRegistry) {
        let ims: BTreeSet<String> = ["home.net".to_string(), "other.net".to_string()].into();
        let ext: BTreeSet<String> = ["nonims.example".to_string()].into();
        (ims, ext, EnumRegistry::new())
    }

    #[test]
    fn originating_foreign_ims_domain_goes_to_icscf() {
        let (ims, ext, enums) = ctx_fixture();
        let ctx = RouteContext {
            ims_domains: &ims,
            external_hosts: &ext,
            enum_registry: &enums,
        };
        let got = route_originating(&ctx, &[], &uri("sip:bob@other.net"));
        assert_eq!(got.decision, RoutingDecision::ToIcscf("other.net".into()));
        assert_eq!(got.rewritten_target, None);
    }

    #[test]
    fn originating_tel_without_enum_breaks_out() {
        let (ims, ext, enums) = ctx_fixture();
        let ctx = RouteContext {
            ims_domains: &ims,
            external_hosts: &ext,
            enum_registry: &enums,
        };
        let got = route_originating(&ctx, &[], &uri("tel:+19990000"));
        assert_eq!(got.decision, RoutingDecision::ToBgcf);
    }

    #[test]
    fn originating_tel_with_enum_rewrites_and_reroutes() {
        let (ims, ext, mut enums) = ctx_fixture();
        enums.register(
            &crate::identity::TelUri::new("15550001").unwrap(),
            SipUri::new("john", "home.net").unwrap(),
        );
        let ctx = RouteContext {
            ims_domains: &ims,
            external_hosts: &ext,
            enum_registry: &enums,
        };
        let got = route_originating(&ctx, &[], &uri("tel:+15550001"));
        assert_eq!(got.decision, RoutingDecision::ToIcscf("home.net".into()));
        assert_eq!(got.rewritten_target, Some(uri("sip:john@home.net")));
    }

    #[test]
    fn originating_external_and_unknown_targets() {
        let (ims, ext, enums) = ctx_fixture();
        let ctx = RouteContext {
            ims_domains: &ims,
            external_hosts: &ext,
            enum_registry: &enums,
        };
        assert_eq!(
            route_originating(&ctx, &[], &uri("sip:x@nonims.example")).decision,
            RoutingDecision::ToExternalSip("nonims.example".into())
        );
        assert_eq!(
            route_originating(&ctx, &[], &uri("sip:x@nowhere.example")).decision,
            RoutingDecision::Reject(RejectReason::UnknownDestination)
        );
    }

    #[test]
    fn pending_ifcs_take_precedence() {
        let (ims, ext, enums) = ctx_fixture();
        let ctx = RouteContext {
            ims_domains: &ims,
            external_hosts: &ext,
            enum_registry: &enums,
        };
        let chain = [NodeId::new("as1"), NodeId::new("as2")];
        let got = route_originating(&ctx, &chain, &uri("tel:+19990000"));
        assert_eq!(
            got.decision,
            RoutingDecision::ToAsChain(vec![NodeId::new("as1"), NodeId::new("as2")])
        );
    }

    #[test]
    fn terminating_precedence() {
        let chain = [NodeId::new("as1"), NodeId::new("as2")];
        assert_eq!(
            route_terminating(&TermInputs {
                pending_ifcs: &chain,
                registered_contact: Some(NodeId::new("t1")),
                cs_forward_unregistered: false,
            }),
            RoutingDecision::ToAsChain(chain.to_vec())
        );
        assert_eq!(
            route_terminating(&TermInputs {
                pending_ifcs: &[],
                registered_contact: Some(NodeId::new("t1")),
                cs_forward_unregistered: false,
            }),
            RoutingDecision::ToPcscf(NodeId::new("t1"))
        );
        assert_eq!(
            route_terminating(&TermInputs {
                pending_ifcs: &[],
                registered_contact: None,
                cs_forward_unregistered: true,
            }),
            RoutingDecision::ToBgcf
        );
        assert_eq!(
            route_terminating(&TermInputs {
                pending_ifcs: &[],
                registered_contact: None,
                cs_forward_unregistered: false,
            }),
            RoutingDecision::Reject(RejectReason::UserUnavailable)
        );
    }

    #[test]
    fn registrar_contact_selection() {
        let mut s = ScscfState::new(NodeId::new("scscf1"), "home.net", BTreeSet::new());
        let public = uri("sip:john@home.net");
        s.bind(RegistrationBinding {
            public_id: public.clone(),
            contact: NodeId::new("t-old"),
            expiry_tick: 100,
            security_association_id: "sa1".into(),
            compression_negotiated: true,
        });
        s.bind(RegistrationBinding {
            public_id: public.clone(),
            contact: NodeId::new("t-new"),
            expiry_tick: 200,
            security_association_id: "sa2".into(),
            compression_negotiated: true,
        });
        assert_eq!(
            s.contact_for(&public, 0).unwrap().contact,
            NodeId::new("t-new")
        );
        assert_eq!(s.bindings(&public, 150).len(), 1);
        assert_eq!(s.binding_count(0), 2);
        // Re-binding the same contact refreshes rather than duplicates.
        s.bind(RegistrationBinding {
            public_id: public.clone(),
            contact: NodeId::new("t-new"),
            expiry_tick: 300,
            security_association_id: "sa3".into(),
            compression_negotiated: true,
        });
        assert_eq!(s.binding_count(0), 2);
        assert!(s.contact_for(&public, 250).is_some());
    }

    fn thig_fixture() -> (IcscfState, BTreeSet<NodeId>, SigMessage) {
        let icscf = IcscfState::new(NodeId::new("icscf1"), "home.net", true);
        let home: BTreeSet<NodeId> = [
            NodeId::new("pcscf1"),
            NodeId::new("scscf1"),
            NodeId::new("icscf1"),
            NodeId::new("t-john"),
        ]
        .into();
        let mut msg = SigMessage::new(
            MsgKind::Invite,
            4,
            uri("sip:john@home.net"),
            uri("sip:bob@other.net"),
        );
        msg.push_via(NodeId::new("t-john"));
        msg.push_via(NodeId::new("pcscf1"));
        msg.push_via(NodeId::new("scscf1"));
        msg.push_via(NodeId::new("icscf1"));
        msg.set_route(vec![NodeId::new("icscf2"), NodeId::new("scscf9")]);
        (icscf, home, msg)
    }

    #[test]
    fn thig_strip_inverts_apply() {
        let (icscf, home, msg) = thig_fixture();
        let hidden = thig_apply(&icscf, &home, &msg);
        assert_eq!(thig_strip(&icscf, &hidden).unwrap(), msg);
    }

    #[test]
    fn applied_message_hides_home_ids() {
        let (icscf, home, msg) = thig_fixture();
        let hidden = thig_apply(&icscf, &home, &msg);
        for entry in hidden.via().iter().chain(hidden.route()) {
            if *entry == icscf.id {
                continue; // the published domain entry point stays visible
            }
            assert!(
                !home.contains(entry),
                "raw home id `{entry}` leaked into the stacks"
            );
        }
        // Foreign ids pass through unchanged.
        assert!(hidden.route().contains(&NodeId::new("icscf2")));
        assert!(hidden.route().contains(&NodeId::new("scscf9")));
    }

    #[test]
    fn strip_rejects_tokens_from_other_issuers() {
        let (icscf, home, msg) = thig_fixture();
        let other = IcscfState::new(NodeId::new("icscf1"), "home.net", true);
        let mut other = other;
        other.thig_key = "different-key".into();
        let hidden = thig_apply(&other, &home, &msg);
        // Same issuer id, different key: checks fail.
        assert!(matches!(
            thig_strip(&icscf, &hidden),
            Err(CscfError::UnknownToken(_))
        ));

        // Tokens issued by a genuinely different I-CSCF pass through untouched.
        let foreign = IcscfState::new(NodeId::new("icscf2"), "other.net", true);
        let hidden_by_foreign = thig_apply(&foreign, &[NodeId::new("scscf9")].into(), &msg);
        let stripped = thig_strip(&icscf, &hidden_by_foreign).unwrap();
        assert_eq!(stripped, hidden_by_foreign);
    }
}
