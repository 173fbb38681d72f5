//! The node world: all per-node state, world-level bookkeeping and the
//! dispatch glue between the event loop and the per-node handlers.

use std::collections::{BTreeMap, BTreeSet};

use crate::app_server::{AsKind, AsMode, AsNode, RoutingConfig, ScreeningConfig, ServiceLogic};
use crate::charging::{Cdr, CdrEvent, CdrNodeType, CdrRole, CollectionLog};
use crate::cscf::{IcscfState, PcscfState, ScscfState};
use crate::hss::{HssState, InitialFilterCriterion, SlfTable, UserProfile};
use crate::identity::{EnumRegistry, ImsIdentity, Uri};
use crate::interworking::{BreakoutTable, BreakoutTarget, CodecTable, CsFamily};
use crate::media::{MrfcState, MrfpState};
use crate::netsim::{Event, NodeId, Payload, SendOutcome, Sim};
use crate::policy::{DscpField, PolicyRule, PolicyScope};
use crate::scenario::{Action, Expect, NodeKind, Scenario};
use crate::signaling::{MediaLine, MsgKind, SessionDescription, SigMessage};

use super::ExpectResult;

#[derive(Debug, Clone)]
pub struct TerminalState {
    pub domain: String,
    /// Set once a registration completed through this terminal.
    pub compression_negotiated: bool,
}

#[derive(Debug, Clone)]
pub struct AsState {
    pub node: AsNode,
    pub domain: String,
}

#[derive(Debug, Clone)]
pub struct SimpleNode {
    pub domain: String,
}

#[derive(Debug, Clone)]
pub struct MgcfState {
    pub domain: String,
    pub family: CsFamily,
    /// Per-session CS leg: call_ref, digits and the stashed requests.
    pub calls: BTreeMap<String, CsLeg>,
}

#[derive(Debug, Clone)]
pub struct CsLeg {
    pub call_ref: String,
    pub digits: String,
    pub invite: Option<SigMessage>,
    pub bye: Option<SigMessage>,
}

#[derive(Debug, Clone)]
pub struct SgwState {
    pub domain: String,
    /// Which MGCF each live call_ref talks to.
    pub peer_mgcf: BTreeMap<String, NodeId>,
}

#[derive(Debug, Clone)]
pub struct MrfcNode {
    pub domain: String,
    pub ctl: MrfcState,
}

#[derive(Debug, Clone)]
pub struct MrfpNode {
    pub domain: String,
    pub state: MrfpState,
}

#[derive(Debug, Clone)]
pub enum Node {
    Terminal(TerminalState),
    Pcscf(PcscfState),
    Icscf(IcscfState),
    Scscf(ScscfState),
    Hss(HssState),
    Slf(SimpleNode),
    As(AsState),
    Bgcf(SimpleNode),
    Mgcf(MgcfState),
    Sgw(SgwState),
    Mgw(SimpleNode),
    Mrfc(MrfcNode),
    Mrfp(MrfpNode),
    Pdp(SimpleNode),
    ExtSip(SimpleNode),
}

/// Subscriber fixture shared by terminal and HSS sides.
#[derive(Debug, Clone)]
pub struct UserInfo {
    pub name: String,
    pub identity: ImsIdentity,
    pub hss: NodeId,
}

/// How a flow of signaling ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FlowOutcome {
    Pending,
    Registered,
    Delivered(Uri),
    Rejected(String),
    Completed,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Originator {
    Terminal(NodeId),
    AppServer(NodeId),
}

#[derive(Debug, Clone)]
pub struct Flow {
    pub id: String,
    pub user: String,
    pub originator: Originator,
    pub orig_public: Uri,
    /// Secret the terminal side uses; may deliberately disagree with HSS.
    pub secret: String,
    pub target: Uri,
    pub current_target: Uri,
    pub sdp: Option<SessionDescription>,
    pub dscp: Option<DscpField>,
    pub is_register: bool,
    pub outcome: FlowOutcome,
    /// Terminating S-CSCF resolved during the INVITE, reused by ACK/BYE.
    pub term_scscf: Option<NodeId>,
    /// First S-CSCF an AS-originated flow enters through.
    pub entry_scscf: Option<NodeId>,
    pub mutual_auth_ok: bool,
}

/// Continuations waiting for a DIAMETER answer, keyed by its session id.
#[derive(Debug, Clone)]
pub enum Pending {
    IcscfLocate {
        icscf: NodeId,
        msg: SigMessage,
    },
    IcscfScscfQuery {
        icscf: NodeId,
        msg: SigMessage,
    },
    ScscfAuth {
        scscf: NodeId,
        msg: SigMessage,
    },
    ScscfRegProfile {
        scscf: NodeId,
        msg: SigMessage,
    },
    ScscfAssignAck {
        scscf: NodeId,
        msg: SigMessage,
        profile: ProfileView,
        tag: String,
    },
    ScscfCalleeQuery {
        scscf: NodeId,
        msg: SigMessage,
    },
    ScscfServedProfile {
        scscf: NodeId,
        msg: SigMessage,
    },
    AsPresence {
        as_id: NodeId,
        back_to: NodeId,
        msg: SigMessage,
    },
}

/// INVITE parked while its enforcement point queries the PDP.
#[derive(Debug, Clone)]
pub struct PendingPep {
    pub node: NodeId,
    pub msg: SigMessage,
    pub stage: PepStage,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PepStage {
    PcscfFromTerminal,
    PcscfToTerminal(bool),
    ScscfPhase(bool),
}

/// The subset of a user profile a serving CSCF caches after download.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProfileView {
    pub user: String,
    pub private_id: String,
    pub public_ids: Vec<Uri>,
    pub ifcs: Vec<InitialFilterCriterion>,
    pub media: BTreeSet<crate::signaling::MediaKind>,
    pub cs_forward: bool,
    pub home_terminal: Option<NodeId>,
    pub tag: String,
}

impl ProfileView {
    pub fn tel_digits(&self) -> Option<String> {
        self.public_ids
            .iter()
            .find_map(|u| u.as_tel().map(|t| t.digits().to_string()))
    }
}

pub struct ImsWorld {
    pub(crate) nodes: BTreeMap<NodeId, Node>,
    pub(crate) kinds: BTreeMap<NodeId, NodeKind>,
    pub(crate) ims_domains: BTreeSet<String>,
    pub(crate) external_hosts: BTreeSet<String>,
    pub(crate) icscf_of: BTreeMap<String, NodeId>,
    pub(crate) bgcf_of: BTreeMap<String, NodeId>,
    pub(crate) mgcf_of: BTreeMap<String, NodeId>,
    pub(crate) mrfc_of: BTreeMap<String, NodeId>,
    pub(crate) mrfp_of: BTreeMap<String, NodeId>,
    pub(crate) sgw_of: BTreeMap<String, NodeId>,
    pub(crate) mgw_of: BTreeMap<String, NodeId>,
    pub(crate) pdp_of: BTreeMap<String, NodeId>,
    pub(crate) scscfs_of: BTreeMap<String, Vec<NodeId>>,
    pub(crate) extsip_of: BTreeMap<String, NodeId>,
    pub(crate) slf_of_domain: BTreeMap<String, NodeId>,
    pub(crate) slf_tables: BTreeMap<String, SlfTable>,
    pub(crate) hss_of_domain: BTreeMap<String, Vec<NodeId>>,
    pub(crate) pcscf_table: BTreeMap<NodeId, NodeId>,
    pub(crate) users: BTreeMap<String, UserInfo>,
    pub(crate) user_of_uri: BTreeMap<String, String>,
    pub(crate) enum_registry: EnumRegistry,
    pub(crate) breakout: Option<BreakoutTable>,
    pub(crate) policies: Vec<PolicyRule>,
    pub(crate) force_icscf: bool,
    pub(crate) reg_ttl: u64,
    pub(crate) scscf_profiles: BTreeMap<NodeId, BTreeMap<String, ProfileView>>,
    pub(crate) challenges: BTreeMap<String, Challenge>,
    pub(crate) flows: BTreeMap<String, Flow>,
    pub(crate) pending: BTreeMap<String, Pending>,
    pub(crate) pending_pep: BTreeMap<String, PendingPep>,
    pub(crate) cdr: CollectionLog,
    sip_seq: BTreeMap<NodeId, u64>,
    reg_count: usize,
    call_count: usize,
    dia_count: u64,
    call_ref_count: u64,
    pub(crate) codec_table: CodecTable,
}

#[derive(Debug, Clone)]
pub struct Challenge {
    pub expected: String,
}

impl ImsWorld {
    pub fn build(sc: &Scenario, sim: &mut Sim) -> Self {
        let mut nodes = BTreeMap::new();
        let mut kinds = BTreeMap::new();
        let mut ims_domains = BTreeSet::new();
        let mut external_hosts = BTreeSet::new();
        let mut icscf_of = BTreeMap::new();
        let mut bgcf_of = BTreeMap::new();
        let mut mgcf_of = BTreeMap::new();
        let mut mrfc_of = BTreeMap::new();
        let mut mrfp_of = BTreeMap::new();
        let mut sgw_of = BTreeMap::new();
        let mut mgw_of = BTreeMap::new();
        let mut pdp_of = BTreeMap::new();
        let mut extsip_of = BTreeMap::new();
        let mut slf_of_domain = BTreeMap::new();
        let mut scscfs_of: BTreeMap<String, Vec<NodeId>> = BTreeMap::new();
        let mut hss_of_domain: BTreeMap<String, Vec<NodeId>> = BTreeMap::new();

        for decl in sc.nodes.values() {
            sim.register_node(decl.id.clone());
            kinds.insert(decl.id.clone(), decl.kind);
            let simple = SimpleNode {
                domain: decl.domain.clone(),
            };
            let node = match decl.kind {
                NodeKind::Terminal => Node::Terminal(TerminalState {
                    domain: decl.domain.clone(),
                    compression_negotiated: false,
                }),
                NodeKind::Pcscf => {
                    ims_domains.insert(decl.domain.clone());
                    Node::Pcscf(PcscfState::new(decl.id.clone(), &decl.domain))
                }
                NodeKind::Icscf => {
                    ims_domains.insert(decl.domain.clone());
                    icscf_of
                        .entry(decl.domain.clone())
                        .or_insert(decl.id.clone());
                    Node::Icscf(IcscfState::new(decl.id.clone(), &decl.domain, decl.thig))
                }
                NodeKind::Scscf => {
                    ims_domains.insert(decl.domain.clone());
                    scscfs_of
                        .entry(decl.domain.clone())
                        .or_default()
                        .push(decl.id.clone());
                    let caps = decl.capabilities.clone().unwrap_or_else(|| {
                        [
                            crate::signaling::MediaKind::Audio,
                            crate::signaling::MediaKind::Video,
                            crate::signaling::MediaKind::Data,
                        ]
                        .into()
                    });
                    Node::Scscf(ScscfState::new(decl.id.clone(), &decl.domain, caps))
                }
                NodeKind::Hss => {
                    hss_of_domain
                        .entry(decl.domain.clone())
                        .or_default()
                        .push(decl.id.clone());
                    Node::Hss(HssState::new(decl.id.clone()))
                }
                NodeKind::Slf => {
                    slf_of_domain.insert(decl.domain.clone(), decl.id.clone());
                    Node::Slf(simple)
                }
                NodeKind::As => Node::As(AsState {
                    node: AsNode {
                        id: decl.id.clone(),
                        kind: AsKind::SipAs,
                        mode: AsMode::Proxy,
                        service: ServiceLogic::Transparent,
                    },
                    domain: decl.domain.clone(),
                }),
                NodeKind::Bgcf => {
                    bgcf_of
                        .entry(decl.domain.clone())
                        .or_insert(decl.id.clone());
                    Node::Bgcf(simple)
                }
                NodeKind::Mgcf => {
                    mgcf_of
                        .entry(decl.domain.clone())
                        .or_insert(decl.id.clone());
                    Node::Mgcf(MgcfState {
                        domain: decl.domain.clone(),
                        family: decl.cs_family,
                        calls: BTreeMap::new(),
                    })
                }
                NodeKind::Sgw => {
                    sgw_of.entry(decl.domain.clone()).or_insert(decl.id.clone());
                    Node::Sgw(SgwState {
                        domain: decl.domain.clone(),
                        peer_mgcf: BTreeMap::new(),
                    })
                }
                NodeKind::Mgw => {
                    mgw_of.entry(decl.domain.clone()).or_insert(decl.id.clone());
                    Node::Mgw(simple)
                }
                NodeKind::Mrfc => {
                    mrfc_of
                        .entry(decl.domain.clone())
                        .or_insert(decl.id.clone());
                    Node::Mrfc(MrfcNode {
                        domain: decl.domain.clone(),
                        ctl: MrfcState::default(),
                    })
                }
                NodeKind::Mrfp => {
                    mrfp_of
                        .entry(decl.domain.clone())
                        .or_insert(decl.id.clone());
                    Node::Mrfp(MrfpNode {
                        domain: decl.domain.clone(),
                        state: MrfpState::default(),
                    })
                }
                NodeKind::Pdp => {
                    pdp_of.entry(decl.domain.clone()).or_insert(decl.id.clone());
                    Node::Pdp(simple)
                }
                NodeKind::ExtSip => {
                    external_hosts.insert(decl.domain.clone());
                    extsip_of
                        .entry(decl.domain.clone())
                        .or_insert(decl.id.clone());
                    Node::ExtSip(simple)
                }
            };
            nodes.insert(decl.id.clone(), node);
        }

        for link in &sc.links {
            sim.add_link(&link.a, &link.b, link.latency);
            if !link.initially_up {
                sim.set_link_up(&link.a, &link.b, false);
            }
        }

        // Static P-CSCF discovery: each terminal maps to the
        // lexicographically smallest linked P-CSCF.
        let mut pcscf_table = BTreeMap::new();
        for decl in sc.nodes.values().filter(|n| n.kind == NodeKind::Terminal) {
            let mut candidates: Vec<NodeId> = sim
                .linked_peers(&decl.id)
                .into_iter()
                .filter(|peer| kinds.get(peer) == Some(&NodeKind::Pcscf))
                .collect();
            candidates.sort();
            if let Some(p) = candidates.first() {
                pcscf_table.insert(decl.id.clone(), p.clone());
            }
        }

        // Subscribers: build identities, place profiles in their HSS.
        let mut users = BTreeMap::new();
        let mut user_of_uri = BTreeMap::new();
        let mut screens_by_as: BTreeMap<NodeId, ScreeningConfig> = BTreeMap::new();
        for decl in &sc.screens {
            let owner = sc.users[&decl.owner].public_ids[0].clone();
            if let Ok(cfg) = ScreeningConfig::new(
                owner,
                decl.allow.clone(),
                decl.target.clone(),
                decl.deflect.clone(),
            ) {
                screens_by_as.insert(decl.as_id.clone(), cfg);
            }
        }
        for (as_id, cfg) in &screens_by_as {
            if let Some(Node::As(state)) = nodes.get_mut(as_id) {
                state.node.service = ServiceLogic::Screening(cfg.clone());
            }
        }
        for decl in &sc.route_as {
            let owner = sc.users[&decl.owner].public_ids[0].clone();
            if let Some(Node::As(state)) = nodes.get_mut(&decl.as_id) {
                state.node.service = ServiceLogic::Routing(RoutingConfig {
                    owner,
                    presence_source: decl.source.clone(),
                });
            }
        }

        for user in sc.users.values() {
            let identity =
                ImsIdentity::new(&user.private_id, user.public_ids.clone(), &user.secret)
                    .expect("scenario validation guarantees well-formed identities");
            let home_domain = identity.home_domain.clone();
            let hss = user
                .hss_override
                .clone()
                .or_else(|| {
                    hss_of_domain
                        .get(&home_domain)
                        .and_then(|v| v.first().cloned())
                })
                .expect("scenario validation guarantees an HSS");
            let mut profile = UserProfile::new(identity.clone(), user.media.clone());
            profile.barred = user.barred;
            profile.home_terminal = user.home_terminal.clone();
            profile.cs_forward_unregistered = user.cs_forward;
            for ifc in sc.ifcs.iter().filter(|i| i.user == user.name) {
                profile.add_ifc(InitialFilterCriterion {
                    priority: ifc.priority,
                    method_match: ifc.method,
                    direction: ifc.direction,
                    as_id: ifc.as_id.clone(),
                });
            }
            if let Some(Node::Hss(h)) = nodes.get_mut(&hss) {
                h.add_user(&user.name, profile);
            }
            for public in &user.public_ids {
                user_of_uri.insert(public.to_string(), user.name.clone());
            }
            user_of_uri.insert(user.private_id.clone(), user.name.clone());
            users.insert(
                user.name.clone(),
                UserInfo {
                    name: user.name.clone(),
                    identity,
                    hss,
                },
            );
        }

        // Subscriber location tables: single-HSS domains shortcut the
        // SLF entirely, larger ones map each public id to its HSS.
        let mut slf_tables: BTreeMap<String, SlfTable> = BTreeMap::new();
        for (domain, hsses) in &hss_of_domain {
            let table = if hsses.len() == 1 {
                SlfTable::Single(hsses[0].clone())
            } else {
                let mut map = BTreeMap::new();
                for user in users.values() {
                    for public in &user.identity.public_ids {
                        map.insert(public.to_string(), user.hss.clone());
                    }
                }
                SlfTable::Mapped(map)
            };
            slf_tables.insert(domain.clone(), table);
        }

        let mut enum_registry = EnumRegistry::with_apex(&sc.enum_apex);
        for (tel, target) in &sc.enum_entries {
            enum_registry.register(tel, target.clone());
        }

        let breakout = if sc.breakout.is_empty() {
            None
        } else {
            let default = sc
                .breakout
                .iter()
                .find(|b| b.prefix.is_none())
                .map(|b| b.target.clone())
                .expect("validation guarantees a default entry");
            let entries: Vec<(String, BreakoutTarget)> = sc
                .breakout
                .iter()
                .filter_map(|b| b.prefix.clone().map(|p| (p, b.target.clone())))
                .collect();
            Some(BreakoutTable::new(entries, default).expect("validation rejects duplicates"))
        };

        // Policy rules: explicit directives plus the implicit per-user
        // subscription rule derived from the USER MEDIA clause.
        let mut policies = Vec::new();
        for user in sc.users.values() {
            for public in &user.public_ids {
                policies.push(PolicyRule {
                    scope: PolicyScope::UserSpecific(public.clone()),
                    allow_media: user.media.clone(),
                    allow_codecs: None,
                    max_bandwidth_kbps: None,
                });
            }
        }
        for p in &sc.policies {
            let media = p.media.clone().unwrap_or_else(|| {
                [
                    crate::signaling::MediaKind::Audio,
                    crate::signaling::MediaKind::Video,
                    crate::signaling::MediaKind::Data,
                ]
                .into()
            });
            match &p.user {
                None => policies.push(PolicyRule {
                    scope: PolicyScope::NetworkWide,
                    allow_media: media,
                    allow_codecs: p.codecs.clone(),
                    max_bandwidth_kbps: p.max_bandwidth_kbps,
                }),
                Some(name) => {
                    for public in &sc.users[name].public_ids {
                        policies.push(PolicyRule {
                            scope: PolicyScope::UserSpecific(public.clone()),
                            allow_media: media.clone(),
                            allow_codecs: p.codecs.clone(),
                            max_bandwidth_kbps: p.max_bandwidth_kbps,
                        });
                    }
                }
            }
        }

        Self {
            nodes,
            kinds,
            ims_domains,
            external_hosts,
            icscf_of,
            bgcf_of,
            mgcf_of,
            mrfc_of,
            mrfp_of,
            sgw_of,
            mgw_of,
            pdp_of,
            scscfs_of,
            extsip_of,
            slf_of_domain,
            slf_tables,
            hss_of_domain,
            pcscf_table,
            users,
            user_of_uri,
            enum_registry,
            breakout,
            policies,
            force_icscf: sc.force_icscf,
            reg_ttl: sc.reg_ttl,
            scscf_profiles: BTreeMap::new(),
            challenges: BTreeMap::new(),
            flows: BTreeMap::new(),
            pending: BTreeMap::new(),
            pending_pep: BTreeMap::new(),
            cdr: CollectionLog::default(),
            sip_seq: BTreeMap::new(),
            reg_count: 0,
            call_count: 0,
            dia_count: 0,
            call_ref_count: 0,
            codec_table: CodecTable::default(),
        }
    }

    // --- small accessors --------------------------------------------------

    pub fn cdr_log(&self) -> &CollectionLog {
        &self.cdr
    }

    pub fn flows(&self) -> &BTreeMap<String, Flow> {
        &self.flows
    }

    pub(crate) fn kind(&self, id: &NodeId) -> Option<NodeKind> {
        self.kinds.get(id).copied()
    }

    pub(crate) fn domain_of(&self, id: &NodeId) -> String {
        match self.nodes.get(id) {
            Some(Node::Terminal(t)) => t.domain.clone(),
            Some(Node::Pcscf(p)) => p.domain.clone(),
            Some(Node::Icscf(i)) => i.domain.clone(),
            Some(Node::Scscf(s)) => s.domain.clone(),
            Some(Node::Hss(_)) => self
                .hss_of_domain
                .iter()
                .find(|(_, ids)| ids.contains(id))
                .map(|(d, _)| d.clone())
                .unwrap_or_default(),
            Some(Node::Slf(n))
            | Some(Node::Bgcf(n))
            | Some(Node::Mgw(n))
            | Some(Node::Pdp(n))
            | Some(Node::ExtSip(n)) => n.domain.clone(),
            Some(Node::As(a)) => a.domain.clone(),
            Some(Node::Mgcf(m)) => m.domain.clone(),
            Some(Node::Sgw(s)) => s.domain.clone(),
            Some(Node::Mrfc(m)) => m.domain.clone(),
            Some(Node::Mrfp(m)) => m.domain.clone(),
            None => String::new(),
        }
    }

    pub(crate) fn pcscf_mut(&mut self, id: &NodeId) -> &mut PcscfState {
        match self.nodes.get_mut(id) {
            Some(Node::Pcscf(p)) => p,
            _ => panic!("node {id} is not a P-CSCF"),
        }
    }

    pub(crate) fn pcscf(&self, id: &NodeId) -> &PcscfState {
        match self.nodes.get(id) {
            Some(Node::Pcscf(p)) => p,
            _ => panic!("node {id} is not a P-CSCF"),
        }
    }

    pub(crate) fn icscf_mut(&mut self, id: &NodeId) -> &mut IcscfState {
        match self.nodes.get_mut(id) {
            Some(Node::Icscf(i)) => i,
            _ => panic!("node {id} is not an I-CSCF"),
        }
    }

    pub(crate) fn icscf(&self, id: &NodeId) -> &IcscfState {
        match self.nodes.get(id) {
            Some(Node::Icscf(i)) => i,
            _ => panic!("node {id} is not an I-CSCF"),
        }
    }

    pub(crate) fn scscf_mut(&mut self, id: &NodeId) -> &mut ScscfState {
        match self.nodes.get_mut(id) {
            Some(Node::Scscf(s)) => s,
            _ => panic!("node {id} is not an S-CSCF"),
        }
    }

    pub(crate) fn scscf(&self, id: &NodeId) -> &ScscfState {
        match self.nodes.get(id) {
            Some(Node::Scscf(s)) => s,
            _ => panic!("node {id} is not an S-CSCF"),
        }
    }

    pub(crate) fn hss_mut(&mut self, id: &NodeId) -> &mut HssState {
        match self.nodes.get_mut(id) {
            Some(Node::Hss(h)) => h,
            _ => panic!("node {id} is not an HSS"),
        }
    }

    pub fn hss(&self, id: &NodeId) -> &HssState {
        match self.nodes.get(id) {
            Some(Node::Hss(h)) => h,
            _ => panic!("node {id} is not an HSS"),
        }
    }

    pub(crate) fn as_state_mut(&mut self, id: &NodeId) -> &mut AsState {
        match self.nodes.get_mut(id) {
            Some(Node::As(a)) => a,
            _ => panic!("node {id} is not an AS"),
        }
    }

    pub(crate) fn as_state(&self, id: &NodeId) -> &AsState {
        match self.nodes.get(id) {
            Some(Node::As(a)) => a,
            _ => panic!("node {id} is not an AS"),
        }
    }

    pub(crate) fn user_for_uri(&self, uri: &Uri) -> Option<&UserInfo> {
        self.user_of_uri
            .get(&uri.to_string())
            .and_then(|name| self.users.get(name))
    }

    pub(crate) fn next_sip_seq(&mut self, node: &NodeId) -> u64 {
        let c = self.sip_seq.entry(node.clone()).or_insert(0);
        *c += 1;
        *c
    }

    pub(crate) fn next_dia_session(&mut self, flow: &str) -> String {
        self.dia_count += 1;
        format!("{flow}-dia-{}", self.dia_count)
    }

    pub(crate) fn next_call_ref(&mut self) -> String {
        self.call_ref_count += 1;
        format!("c{}", self.call_ref_count)
    }

    pub(crate) fn new_reg_flow(&mut self) -> String {
        self.reg_count += 1;
        format!("reg-{}", self.reg_count)
    }

    pub(crate) fn new_call_flow(&mut self) -> String {
        self.call_count += 1;
        format!("call-{}", self.call_count)
    }

    // --- message helpers ----------------------------------------------------

    /// Sends a signaling message, applying topology hiding when it leaves
    /// a hiding I-CSCF's domain.
    pub(crate) fn send_sig(
        &mut self,
        sim: &mut Sim,
        from: &NodeId,
        to: &NodeId,
        msg: SigMessage,
    ) -> SendOutcome {
        let mut out = msg;
        if self.kind(from) == Some(NodeKind::Icscf) {
            let icscf = self.icscf(from).clone();
            if icscf.thig_enabled && self.domain_of(to) != icscf.domain {
                let home = self.home_nodes(&icscf.domain);
                out = crate::cscf::thig_apply(&icscf, &home, &out);
            }
        }
        sim.schedule(from, to, Payload::Sig(out))
            .unwrap_or(SendOutcome::Dropped)
    }

    pub(crate) fn home_nodes(&self, domain: &str) -> BTreeSet<NodeId> {
        self.nodes
            .keys()
            .filter(|id| self.domain_of(id) == domain)
            .cloned()
            .collect()
    }

    /// Builds the response for a request: same seq, from, to and session,
    /// via copied so it retraces the request path.
    pub(crate) fn make_reply(&mut self, req: &SigMessage, code: u16) -> SigMessage {
        let mut resp = SigMessage::new(
            MsgKind::Response(code),
            req.seq,
            req.from.clone(),
            req.to.clone(),
        );
        resp.set_via(req.via().to_vec());
        for key in ["X-SESSION", "X-DIR", "X-CONTACT"] {
            if let Some(v) = req.header(key) {
                resp.set_header(key, v);
            }
        }
        resp.set_header("X-ANSWERS", &req.kind.to_string());
        resp
    }

    /// Moves a response one hop along the reversed via stack. Returns the
    /// message when this node is its final consumer.
    pub(crate) fn route_response(
        &mut self,
        sim: &mut Sim,
        node: &NodeId,
        msg: SigMessage,
    ) -> Option<SigMessage> {
        let mut out = msg;
        if out.via().last() == Some(node) {
            out.pop_via();
        }
        match out.via().last().cloned() {
            Some(next) => {
                self.send_access_aware(sim, node, &next, out);
                None
            }
            None => Some(out),
        }
    }

    /// Send that applies access-link compression between a P-CSCF and a
    /// terminal once compression was negotiated at registration.
    pub(crate) fn send_access_aware(
        &mut self,
        sim: &mut Sim,
        from: &NodeId,
        to: &NodeId,
        msg: SigMessage,
    ) -> SendOutcome {
        let compress = match (self.kind(from), self.kind(to)) {
            (Some(NodeKind::Pcscf), Some(NodeKind::Terminal)) => self
                .pcscf(from)
                .compression_negotiated
                .get(to)
                .copied()
                .unwrap_or(false),
            (Some(NodeKind::Terminal), Some(NodeKind::Pcscf)) => match self.nodes.get(from) {
                Some(Node::Terminal(t)) => t.compression_negotiated,
                _ => false,
            },
            _ => return self.send_sig(sim, from, to, msg),
        };
        let out = if compress && !msg.compressed() {
            msg.compress().unwrap_or(msg)
        } else {
            msg
        };
        self.send_sig(sim, from, to, out)
    }

    // --- charging -----------------------------------------------------------

    pub(crate) fn charge_type(&self, node: &NodeId) -> Option<CdrNodeType> {
        Some(match self.kind(node)? {
            NodeKind::Pcscf => CdrNodeType::Pcscf,
            NodeKind::Icscf => CdrNodeType::Icscf,
            NodeKind::Scscf => CdrNodeType::Scscf,
            NodeKind::Bgcf => CdrNodeType::Bgcf,
            NodeKind::Mrfc => CdrNodeType::Mrfc,
            NodeKind::As => CdrNodeType::As,
            _ => return None,
        })
    }

    /// One CDR per (node, session, event kind); MRFC media control is the
    /// exception and charges every request.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn emit_cdr(
        &mut self,
        sim: &Sim,
        node: &NodeId,
        session: &str,
        event: CdrEvent,
        served: &str,
        role: CdrRole,
        as_on_behalf: bool,
    ) {
        let Some(node_type) = self.charge_type(node) else {
            return;
        };
        if session.is_empty() {
            return;
        }
        if event != CdrEvent::MediaControl && self.cdr.already_emitted(node, session, event) {
            return;
        }
        self.cdr.emit(Cdr {
            tick: sim.now(),
            node_id: node.clone(),
            node_type,
            session_id: session.to_string(),
            event,
            served_user: served.to_string(),
            role,
            as_on_behalf,
        });
    }

    // --- flows ----------------------------------------------------------------

    pub(crate) fn set_flow_outcome(&mut self, sim: &mut Sim, flow_id: &str, outcome: FlowOutcome) {
        let Some(flow) = self.flows.get_mut(flow_id) else {
            return;
        };
        if flow.outcome != FlowOutcome::Pending {
            return;
        }
        flow.outcome = outcome.clone();
        let origin = match &flow.originator {
            Originator::Terminal(t) => t.clone(),
            Originator::AppServer(a) => a.clone(),
        };
        let summary = match &outcome {
            FlowOutcome::Registered => format!("flow={flow_id} registered user={}", flow.user),
            FlowOutcome::Delivered(uri) => format!("flow={flow_id} delivered to={uri}"),
            FlowOutcome::Rejected(reason) => format!("flow={flow_id} rejected reason={reason}"),
            FlowOutcome::Completed => format!("flow={flow_id} completed"),
            FlowOutcome::Timeout => format!("flow={flow_id} timeout"),
            FlowOutcome::Pending => return,
        };
        sim.note(&origin, &origin, "FLOW", summary);
    }

    /// Marks flows that never finished as timed out. Runs at quiescence
    /// after every action.
    pub(crate) fn finish_pending_flows(&mut self, sim: &mut Sim) {
        let pending: Vec<String> = self
            .flows
            .iter()
            .filter(|(_, f)| f.outcome == FlowOutcome::Pending)
            .map(|(id, _)| id.clone())
            .collect();
        for id in pending {
            self.set_flow_outcome(sim, &id, FlowOutcome::Timeout);
        }
    }

    // --- action injection -------------------------------------------------------

    pub(crate) fn inject_action(&mut self, sim: &mut Sim, action: &Action) {
        match action {
            Action::Register {
                user,
                terminal,
                secret_override,
            } => self.start_register(sim, user, terminal, secret_override.clone()),
            Action::Call {
                user,
                target,
                media,
            } => self.start_call(sim, user, target, media, None),
            Action::AsCall {
                as_id,
                user,
                target,
                media,
            } => self.start_call(sim, user, target, media, Some(as_id.clone())),
            Action::Hangup { session_ref } => self.start_hangup(sim, session_ref),
            Action::UtConfig { user, as_id, edit } => self.apply_ut(sim, user, as_id, edit),
            Action::ConfJoin { user, conf, media } => {
                self.start_conf_request(sim, user, conf, &format!("join;{}", media_csv(media)))
            }
            Action::ConfLeave { user, conf } => self.start_conf_request(sim, user, conf, "leave"),
            Action::Announce { conf, text } => self.start_announce(sim, conf, text),
            Action::Floor { user, conf, op } => {
                let verb = match op {
                    crate::scenario::FloorOp::Request => "floor-request",
                    crate::scenario::FloorOp::Release => "floor-release",
                };
                self.start_conf_request(sim, user, conf, verb)
            }
            Action::LinkDown { a, b } => {
                sim.set_link_up(a, b, false);
                sim.note(a, b, "LINK", "down".to_string());
            }
            Action::Wait { ticks } => sim.advance(*ticks),
        }
    }

    // --- dispatch -------------------------------------------------------------

    pub(crate) fn dispatch(&mut self, sim: &mut Sim, ev: Event) {
        match self.kind(&ev.dst) {
            Some(NodeKind::Terminal) => self.on_terminal(sim, ev),
            Some(NodeKind::Pcscf) => self.on_pcscf(sim, ev),
            Some(NodeKind::Icscf) => self.on_icscf(sim, ev),
            Some(NodeKind::Scscf) => self.on_scscf(sim, ev),
            Some(NodeKind::Hss) => self.on_hss(sim, ev),
            Some(NodeKind::Slf) => self.on_slf(sim, ev),
            Some(NodeKind::As) => self.on_as(sim, ev),
            Some(NodeKind::Bgcf) => self.on_bgcf(sim, ev),
            Some(NodeKind::Mgcf) => self.on_mgcf(sim, ev),
            Some(NodeKind::Sgw) => self.on_sgw(sim, ev),
            Some(NodeKind::Mgw) => {}
            Some(NodeKind::Mrfc) => self.on_mrfc(sim, ev),
            Some(NodeKind::Mrfp) => self.on_mrfp(sim, ev),
            Some(NodeKind::Pdp) => self.on_pdp(sim, ev),
            Some(NodeKind::ExtSip) => self.on_extsip(sim, ev),
            None => {}
        }
    }

    // --- expectation evaluation ---------------------------------------------------

    pub(crate) fn evaluate_expect(&self, expect: &Expect, trace: &str, now: u64) -> ExpectResult {
        match expect {
            Expect::Delivered(uri) => {
                let hit = self
                    .flows
                    .values()
                    .any(|f| f.outcome == FlowOutcome::Delivered(uri.clone()));
                ExpectResult {
                    description: format!("delivered {uri}"),
                    passed: hit,
                    detail: if hit {
                        "delivered".to_string()
                    } else {
                        format!("no flow delivered to {uri}")
                    },
                }
            }
            Expect::Rejected(reason) => {
                let hit = self.flows.values().any(|f| match &f.outcome {
                    FlowOutcome::Rejected(r) => r == reason,
                    FlowOutcome::Timeout => reason == "Timeout",
                    _ => false,
                });
                ExpectResult {
                    description: format!("rejected {reason}"),
                    passed: hit,
                    detail: if hit {
                        "rejected as expected".to_string()
                    } else {
                        format!("no flow rejected with {reason}")
                    },
                }
            }
            Expect::CdrNodes { session_ref, nodes } => {
                let summary = crate::charging::correlate(&self.cdr, session_ref);
                let passed = summary.node_ids == *nodes;
                ExpectResult {
                    description: format!("cdr-nodes {session_ref}"),
                    passed,
                    detail: format!(
                        "expected {:?}, got {:?}",
                        nodes.iter().map(|n| n.as_str()).collect::<Vec<_>>(),
                        summary
                            .node_ids
                            .iter()
                            .map(|n| n.as_str())
                            .collect::<Vec<_>>()
                    ),
                }
            }
            Expect::Scscf { user, node } => {
                let assigned = self.assigned_scscf_of(user, now);
                let passed = assigned.as_ref() == Some(node);
                ExpectResult {
                    description: format!("scscf {user} {node}"),
                    passed,
                    detail: format!("assigned={assigned:?}"),
                }
            }
            Expect::TraceContains(needle) => {
                let passed = trace.contains(needle.as_str());
                ExpectResult {
                    description: format!("trace-contains {needle}"),
                    passed,
                    detail: if passed {
                        "found".into()
                    } else {
                        "absent".into()
                    },
                }
            }
        }
    }

    /// Current S-CSCF assignment of a user as the HSS sees it.
    pub fn assigned_scscf_of(&self, user: &str, now: u64) -> Option<NodeId> {
        let info = self.users.get(user)?;
        let hss = self.hss(&info.hss);
        hss.query_scscf(&info.identity.public_ids[0].to_string(), now)
            .ok()
            .flatten()
    }

    /// All live bindings of a user at their assigned S-CSCF.
    pub fn bindings_of(&self, user: &str, now: u64) -> Vec<crate::cscf::RegistrationBinding> {
        let Some(info) = self.users.get(user) else {
            return Vec::new();
        };
        let Some(scscf) = self.assigned_scscf_of(user, now) else {
            return Vec::new();
        };
        let state = self.scscf(&scscf);
        info.identity
            .public_ids
            .iter()
            .flat_map(|p| state.bindings(p, now))
            .cloned()
            .collect()
    }

    /// Security association the serving P-CSCF holds for a terminal.
    pub fn security_association(&self, terminal: &NodeId) -> Option<String> {
        let pcscf = self.pcscf_table.get(terminal)?;
        self.pcscf(pcscf).security_assocs.get(terminal).cloned()
    }

    /// Enforcement-point cache of a CSCF node, for consistency checks.
    pub fn pep_cache_of(&self, node: &NodeId) -> Option<&crate::policy::PepCache> {
        match self.nodes.get(node)? {
            Node::Pcscf(p) => Some(&p.pep),
            Node::Scscf(s) => Some(&s.pep),
            _ => None,
        }
    }

    /// The global provisioned rule set, role-filtered like the PDP does.
    pub fn provisioned_rules(&self, role: crate::policy::PepRole) -> Vec<PolicyRule> {
        crate::policy::rules_for_role(role, &self.policies)
    }
}

pub(crate) fn media_csv(kinds: &BTreeSet<crate::signaling::MediaKind>) -> String {
    kinds
        .iter()
        .map(|k| k.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub(crate) fn sdp_from_lines(lines: &[MediaLine]) -> Option<SessionDescription> {
    SessionDescription::new(lines.to_vec())
}
