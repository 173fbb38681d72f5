//! Session establishment and release: INVITE routing through both CSCF
//! sides, ISC application-server chains, external SIP targets, and the
//! Ut configuration action.

use crate::app_server::{as1_screen, as2_route, ut_configure, ScreenResult, ServiceLogic};
use crate::charging::{CdrEvent, CdrRole};
use crate::cscf::{
    route_originating, route_terminating, RouteContext, RoutingDecision, TermInputs,
};
use crate::identity::Uri;
use crate::netsim::{Event, NodeId, Payload, SendOutcome, Sim};
use crate::policy::PepRole;
use crate::scenario::NodeKind;
use crate::signaling::{DiaCommand, DiaInterface, DiameterMsg, MediaLine, MsgKind, SigMessage};

use super::policyctl::{deny_code, PepCheck};
use super::world::{
    sdp_from_lines, Flow, FlowOutcome, ImsWorld, Originator, Pending, PepStage, ProfileView,
};

impl ImsWorld {
    // --- actions ---------------------------------------------------------------

    pub(crate) fn start_call(
        &mut self,
        sim: &mut Sim,
        user: &str,
        target: &Uri,
        media: &[MediaLine],
        via_as: Option<NodeId>,
    ) {
        let flow_id = self.new_call_flow();
        let info = self.users[user].clone();
        let public = info.identity.public_ids[0].clone();
        let sdp = sdp_from_lines(media);
        let originator = match &via_as {
            Some(as_id) => Originator::AppServer(as_id.clone()),
            None => Originator::Terminal(NodeId::new("-")),
        };
        self.flows.insert(
            flow_id.clone(),
            Flow {
                id: flow_id.clone(),
                user: user.to_string(),
                originator,
                orig_public: public.clone(),
                secret: String::new(),
                target: target.clone(),
                current_target: target.clone(),
                sdp: sdp.clone(),
                dscp: None,
                is_register: false,
                outcome: FlowOutcome::Pending,
                term_scscf: None,
                entry_scscf: None,
                mutual_auth_ok: false,
            },
        );

        match via_as {
            Some(as_id) => {
                // AS-originated request on behalf of the user, registered
                // or not.
                let now = sim.now();
                let entry = self.assigned_scscf_of(user, now).or_else(|| {
                    let mut peers: Vec<NodeId> = sim
                        .linked_peers(&as_id)
                        .into_iter()
                        .filter(|p| self.kind(p) == Some(NodeKind::Scscf))
                        .collect();
                    peers.sort();
                    peers.first().cloned()
                });
                let Some(entry) = entry else {
                    self.set_flow_outcome(
                        sim,
                        &flow_id,
                        FlowOutcome::Rejected("NoEligibleScscf".into()),
                    );
                    return;
                };
                if let Some(f) = self.flows.get_mut(&flow_id) {
                    f.entry_scscf = Some(entry.clone());
                }
                self.emit_cdr(
                    sim,
                    &as_id,
                    &flow_id,
                    CdrEvent::AsInvocation,
                    &public.to_string(),
                    CdrRole::Originating,
                    true,
                );
                let seq = self.next_sip_seq(&as_id);
                let mut invite =
                    SigMessage::new(MsgKind::Invite, seq, public.clone(), target.clone());
                invite.set_header("X-SESSION", &flow_id);
                invite.set_header("X-DIR", "originating");
                invite.set_header("X-SERVED", &public.to_string());
                invite.set_header("X-AS-ON-BEHALF", "1");
                if let Some(sdp) = sdp {
                    invite.set_body(sdp);
                }
                invite.push_via(as_id.clone());
                self.send_sig(sim, &as_id, &entry, invite);
            }
            None => {
                let now = sim.now();
                let bindings = self.bindings_of(user, now);
                let Some(binding) = bindings.first() else {
                    self.set_flow_outcome(
                        sim,
                        &flow_id,
                        FlowOutcome::Rejected("CallerNotRegistered".into()),
                    );
                    return;
                };
                let terminal = binding.contact.clone();
                if let Some(f) = self.flows.get_mut(&flow_id) {
                    f.originator = Originator::Terminal(terminal.clone());
                }
                let Some(pcscf) = self.pcscf_table.get(&terminal).cloned() else {
                    self.set_flow_outcome(
                        sim,
                        &flow_id,
                        FlowOutcome::Rejected("NoPcscfConfigured".into()),
                    );
                    return;
                };
                let seq = self.next_sip_seq(&terminal);
                let mut invite =
                    SigMessage::new(MsgKind::Invite, seq, public.clone(), target.clone());
                invite.set_header("X-SESSION", &flow_id);
                invite.set_header("X-DIR", "originating");
                invite.set_header("X-SERVED", &public.to_string());
                if let Some(sdp) = sdp {
                    invite.set_body(sdp);
                }
                invite.push_via(terminal.clone());
                self.send_access_aware(sim, &terminal, &pcscf, invite);
            }
        }
    }

    pub(crate) fn start_hangup(&mut self, sim: &mut Sim, session_ref: &str) {
        let Some(flow) = self.flows.get(session_ref).cloned() else {
            return;
        };
        if !matches!(flow.outcome, FlowOutcome::Delivered(_)) {
            sim.note(
                &NodeId::new("-"),
                &NodeId::new("-"),
                "FLOW",
                format!("flow={session_ref} hangup-skipped (not established)"),
            );
            return;
        }
        match &flow.originator {
            Originator::Terminal(terminal) => {
                let Some(pcscf) = self.pcscf_table.get(terminal).cloned() else {
                    return;
                };
                let seq = self.next_sip_seq(terminal);
                let mut bye = SigMessage::new(
                    MsgKind::Bye,
                    seq,
                    flow.orig_public.clone(),
                    flow.current_target.clone(),
                );
                bye.set_header("X-SESSION", session_ref);
                bye.set_header("X-DIR", "originating");
                bye.set_header("X-SERVED", &flow.orig_public.to_string());
                bye.push_via(terminal.clone());
                self.send_access_aware(sim, &terminal.clone(), &pcscf, bye);
            }
            Originator::AppServer(as_id) => {
                let Some(entry) = flow.entry_scscf.clone() else {
                    return;
                };
                let seq = self.next_sip_seq(as_id);
                let mut bye = SigMessage::new(
                    MsgKind::Bye,
                    seq,
                    flow.orig_public.clone(),
                    flow.current_target.clone(),
                );
                bye.set_header("X-SESSION", session_ref);
                bye.set_header("X-DIR", "originating");
                bye.set_header("X-SERVED", &flow.orig_public.to_string());
                bye.set_header("X-AS-ON-BEHALF", "1");
                bye.push_via(as_id.clone());
                self.send_sig(sim, &as_id.clone(), &entry, bye);
            }
        }
    }

    /// Ut-interface configuration: pure state mutation between events,
    /// never signaling traffic.
    pub(crate) fn apply_ut(
        &mut self,
        sim: &mut Sim,
        user: &str,
        as_id: &NodeId,
        edit: &crate::app_server::UtEdit,
    ) {
        let requester = self.users[user].identity.public_ids[0].clone();
        let src = self
            .bindings_of(user, sim.now())
            .first()
            .map(|b| b.contact.clone())
            .unwrap_or_else(|| as_id.clone());
        let result = {
            let state = self.as_state_mut(as_id);
            ut_configure(&mut state.node, &requester, edit)
        };
        let summary = match &result {
            Ok(()) => format!("user={user} as={as_id} edit=\"{edit}\" ok=1"),
            Err(e) => format!("user={user} as={as_id} edit=\"{edit}\" ok=0 reason={e}"),
        };
        sim.note(&src, as_id, "UT", summary);
    }

    /// Caller-side completion: the 200 for the INVITE arrived back at the
    /// originator. Sends the ACK and stamps the media plane.
    pub(crate) fn complete_call(
        &mut self,
        sim: &mut Sim,
        origin: &NodeId,
        flow_id: &str,
        resp: &SigMessage,
    ) {
        let Some(flow) = self.flows.get(flow_id).cloned() else {
            return;
        };
        self.set_flow_outcome(sim, flow_id, FlowOutcome::Delivered(resp.to.clone()));

        let seq = self.next_sip_seq(origin);
        let mut ack = SigMessage::new(MsgKind::Ack, seq, resp.from.clone(), resp.to.clone());
        ack.set_header("X-SESSION", flow_id);
        ack.set_header("X-DIR", "originating");
        ack.set_header("X-SERVED", &resp.from.to_string());
        ack.push_via(origin.clone());
        match &flow.originator {
            Originator::Terminal(terminal) => {
                if let Some(pcscf) = self.pcscf_table.get(terminal).cloned() {
                    self.send_access_aware(sim, terminal, &pcscf, ack);
                }
            }
            Originator::AppServer(as_id) => {
                if let Some(entry) = flow.entry_scscf.clone() {
                    self.send_sig(sim, as_id, &entry, ack);
                }
            }
        }

        // Media-plane activation marks, one per line, all with the DSCP
        // code the policy decision assigned.
        if let Some(sdp) = &flow.sdp {
            let dscp = flow
                .dscp
                .unwrap_or_else(|| crate::policy::dscp_for(sdp.media()[0].kind));
            for line in sdp.media() {
                sim.note(
                    origin,
                    origin,
                    "MEDIA",
                    format!(
                        "flow={flow_id} kind={} codec={} bw={} dscp={}",
                        line.kind, line.codec, line.bandwidth_kbps, dscp
                    ),
                );
            }
        }
    }

    // --- P-CSCF ------------------------------------------------------------------

    pub(crate) fn on_pcscf(&mut self, sim: &mut Sim, ev: Event) {
        if self.is_pep_cops(&ev) {
            self.on_pep_cops(sim, ev);
            return;
        }
        let Payload::Sig(raw) = ev.payload else {
            return;
        };
        let msg = match raw.decompress() {
            Ok(m) => m,
            Err(_) => raw,
        };
        let pcscf = ev.dst.clone();

        if msg.kind.is_response() {
            if msg.header("X-ANSWERS") == Some("REGISTER") {
                self.pcscf_register_response(sim, &pcscf, &msg);
                self.route_response_consume(sim, &pcscf, msg);
            } else {
                self.route_response_consume(sim, &pcscf, msg);
            }
            return;
        }

        if msg.kind == MsgKind::Register {
            self.handle_pcscf_register(sim, &pcscf, msg);
            return;
        }

        let from_terminal = self.kind(&ev.src) == Some(NodeKind::Terminal);
        if from_terminal {
            // Outbound user traffic: enforce general network policy, then
            // pass to the S-CSCF learned at registration.
            let terminal = ev.src.clone();
            if !self.pcscf(&pcscf).security_assocs.contains_key(&terminal) {
                self.reject_request(sim, &pcscf, &msg, 403, "NoSecurityAssociation");
                return;
            }
            self.pcscf_emit_session_cdr(sim, &pcscf, &msg, CdrRole::Originating);
            match self.pep_check(
                sim,
                &pcscf,
                PepRole::EdgeProxy,
                &msg,
                PepStage::PcscfFromTerminal,
            ) {
                PepCheck::Deny(reason) => {
                    self.reject_request(sim, &pcscf, &msg, deny_code(&reason), &reason)
                }
                PepCheck::Parked => {}
                PepCheck::Pass => self.pcscf_forward_from_terminal(sim, &pcscf, msg),
            }
        } else {
            // Terminating delivery toward a served terminal.
            self.pcscf_emit_session_cdr(sim, &pcscf, &msg, CdrRole::Terminating);
            if msg.kind == MsgKind::Invite {
                match self.pep_check(
                    sim,
                    &pcscf,
                    PepRole::EdgeProxy,
                    &msg,
                    PepStage::PcscfToTerminal(false),
                ) {
                    PepCheck::Deny(reason) => {
                        self.reject_request(sim, &pcscf, &msg, deny_code(&reason), &reason)
                    }
                    PepCheck::Parked => {}
                    PepCheck::Pass => self.pcscf_deliver_to_terminal(sim, &pcscf, msg),
                }
            } else {
                self.pcscf_deliver_to_terminal(sim, &pcscf, msg);
            }
        }
    }

    fn pcscf_emit_session_cdr(
        &mut self,
        sim: &Sim,
        pcscf: &NodeId,
        msg: &SigMessage,
        role: CdrRole,
    ) {
        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        let served = msg
            .header("X-SERVED")
            .unwrap_or(&msg.from.to_string())
            .to_string();
        match msg.kind {
            MsgKind::Invite | MsgKind::Message => self.emit_cdr(
                sim,
                pcscf,
                &flow,
                CdrEvent::SessionStart,
                &served,
                role,
                false,
            ),
            MsgKind::Bye => self.emit_cdr(
                sim,
                pcscf,
                &flow,
                CdrEvent::SessionEnd,
                &served,
                role,
                false,
            ),
            _ => {}
        }
    }

    pub(crate) fn pcscf_forward_from_terminal(
        &mut self,
        sim: &mut Sim,
        pcscf: &NodeId,
        msg: SigMessage,
    ) {
        let terminal = msg
            .via()
            .first()
            .cloned()
            .unwrap_or_else(|| NodeId::new("-"));
        let Some(scscf) = self.pcscf(pcscf).scscf_for_terminal.get(&terminal).cloned() else {
            self.reject_request(sim, pcscf, &msg, 403, "NoSecurityAssociation");
            return;
        };
        let mut out = msg;
        out.push_via(pcscf.clone());
        self.send_sig(sim, pcscf, &scscf, out);
    }

    pub(crate) fn pcscf_deliver_to_terminal(
        &mut self,
        sim: &mut Sim,
        pcscf: &NodeId,
        msg: SigMessage,
    ) {
        let Some(terminal) = msg.header("X-CONTACT").map(NodeId::new) else {
            self.reject_request(sim, pcscf, &msg, 404, "UnknownDestination");
            return;
        };
        let mut out = msg;
        out.push_via(pcscf.clone());
        self.send_access_aware(sim, pcscf, &terminal, out);
    }

    fn route_response_consume(&mut self, sim: &mut Sim, node: &NodeId, msg: SigMessage) {
        if let Some(final_msg) = self.route_response(sim, node, msg) {
            self.consume_response(sim, node, final_msg);
        }
    }

    // --- I-CSCF ------------------------------------------------------------------

    pub(crate) fn on_icscf(&mut self, sim: &mut Sim, ev: Event) {
        match &ev.payload {
            Payload::Dia(_) => self.on_dia_answer(sim, ev),
            Payload::Sig(_) => {
                let Payload::Sig(raw) = ev.payload else {
                    unreachable!()
                };
                let icscf_id = ev.dst.clone();
                let state = self.icscf(&icscf_id).clone();
                let msg = match crate::cscf::thig_strip(&state, &raw) {
                    Ok(m) => m,
                    Err(e) => {
                        sim.note(&icscf_id, &icscf_id, "THIG", format!("strip-error {e}"));
                        return;
                    }
                };
                if msg.kind.is_response() {
                    if msg.header("X-ANSWERS") == Some("REGISTER") {
                        self.icscf_register_response(&icscf_id, &msg);
                    }
                    self.route_response_consume(sim, &icscf_id, msg);
                } else {
                    self.handle_icscf_request(sim, &icscf_id, msg);
                }
            }
            _ => {}
        }
    }

    // --- S-CSCF ------------------------------------------------------------------

    pub(crate) fn on_scscf(&mut self, sim: &mut Sim, ev: Event) {
        if self.is_pep_cops(&ev) {
            self.on_pep_cops(sim, ev);
            return;
        }
        match &ev.payload {
            Payload::Dia(_) => self.on_dia_answer(sim, ev),
            Payload::Sig(_) => {
                let Payload::Sig(msg) = ev.payload else {
                    unreachable!()
                };
                let scscf = ev.dst.clone();
                if msg.kind.is_response() {
                    self.route_response_consume(sim, &scscf, msg);
                } else if msg.kind == MsgKind::Register && msg.header("X-THIRD-PARTY").is_none() {
                    self.handle_scscf_register(sim, &scscf, msg);
                } else {
                    self.handle_scscf_request(sim, &scscf, msg, false);
                }
            }
            _ => {}
        }
    }

    /// The central request handler of the serving CSCF: policy, iFC
    /// chains and routing for both the originating and terminating side.
    pub(crate) fn handle_scscf_request(
        &mut self,
        sim: &mut Sim,
        scscf: &NodeId,
        mut msg: SigMessage,
        pep_cleared: bool,
    ) {
        let flow_id = msg.header("X-SESSION").unwrap_or_default().to_string();
        let originating = msg.header("X-DIR") != Some("terminating");
        let served_uri = msg
            .header("X-SERVED")
            .and_then(|s| Uri::parse(s).ok())
            .unwrap_or_else(|| msg.from.clone());

        // Track the current target for ACK/BYE construction.
        if msg.kind == MsgKind::Invite {
            if let Some(f) = self.flows.get_mut(&flow_id) {
                f.current_target = msg.to.clone();
            }
        }

        match msg.kind {
            MsgKind::Ack | MsgKind::Bye => {
                if msg.kind == MsgKind::Bye {
                    let role = if originating {
                        CdrRole::Originating
                    } else {
                        CdrRole::Terminating
                    };
                    self.emit_cdr(
                        sim,
                        scscf,
                        &flow_id,
                        CdrEvent::SessionEnd,
                        &served_uri.to_string(),
                        role,
                        false,
                    );
                    self.scscf_mut(scscf).active_sessions.remove(&flow_id);
                }
                self.scscf_route_follow_up(sim, scscf, msg);
                return;
            }
            _ => {}
        }

        let role = if originating {
            CdrRole::Originating
        } else {
            CdrRole::Terminating
        };
        self.emit_cdr(
            sim,
            scscf,
            &flow_id,
            CdrEvent::SessionStart,
            &served_uri.to_string(),
            role,
            false,
        );
        if msg.kind == MsgKind::Invite {
            self.scscf_mut(scscf).active_sessions.insert(
                flow_id.clone(),
                crate::cscf::SessionState {
                    session_id: flow_id.clone(),
                    orig_public: msg.from.clone(),
                    dest: msg.to.clone(),
                    originating_here: originating,
                },
            );
        }

        // Media-level policy enforcement (user and network rules).
        if !pep_cleared {
            match self.pep_check(
                sim,
                scscf,
                PepRole::ServingProxy,
                &msg,
                PepStage::ScscfPhase(originating),
            ) {
                PepCheck::Deny(reason) => {
                    self.reject_request(sim, scscf, &msg, deny_code(&reason), &reason);
                    return;
                }
                PepCheck::Parked => return,
                PepCheck::Pass => {}
            }
        }

        // Media-function requests ride MESSAGE toward the domain MRFC.
        if msg.kind == MsgKind::Message && msg.header("X-MR-REQ").is_some() {
            let domain = self.scscf(scscf).domain.clone();
            let Some(mrfc) = self.mrfc_of.get(&domain).cloned() else {
                self.reject_request(sim, scscf, &msg, 404, "UnknownDestination");
                return;
            };
            let mut out = msg;
            out.push_via(scscf.clone());
            self.send_sig(sim, scscf, &mrfc, out);
            return;
        }

        // Served-user profile, fetched over Cx when not cached locally.
        let served_user = self.user_for_uri(&served_uri).map(|u| u.name.clone());
        let profile = served_user
            .as_ref()
            .and_then(|name| self.scscf_profiles.get(scscf).and_then(|m| m.get(name)))
            .cloned();
        let profile = match (profile, &served_user) {
            (Some(p), _) => Some(p),
            (None, Some(name)) => {
                let info = self.users[name].clone();
                let sess = self.next_dia_session(&flow_id);
                let dia = DiameterMsg::new(DiaInterface::Cx, DiaCommand::ProfileQuery, &sess)
                    .expect("Cx carries profile query")
                    .with("user", &served_uri.to_string())
                    .with("flow", &flow_id);
                self.pending.insert(
                    sess,
                    Pending::ScscfServedProfile {
                        scscf: scscf.clone(),
                        msg,
                    },
                );
                let _ = sim.schedule(scscf, &info.hss, Payload::Dia(dia));
                return;
            }
            (None, None) => None,
        };

        // The iFC chain, unless a retarget already closed it.
        if msg.header("X-NO-IFC") != Some("1") {
            if let Some(profile) = &profile {
                let matched = profile_ifc_match(profile, msg.kind, originating);
                let executed: Vec<NodeId> = msg
                    .header("X-IFC-EXEC")
                    .map(|csv| {
                        csv.split(',')
                            .filter(|s| !s.is_empty())
                            .map(NodeId::new)
                            .collect()
                    })
                    .unwrap_or_default();
                let pending: Vec<NodeId> = matched
                    .into_iter()
                    .filter(|a| !executed.contains(a))
                    .collect();
                let mut exec = executed;
                for as_id in pending {
                    exec.push(as_id.clone());
                    let csv: Vec<&str> = exec.iter().map(|n| n.as_str()).collect();
                    let mut out = msg.clone();
                    out.set_header("X-IFC-EXEC", &csv.join(","));
                    out.push_via(scscf.clone());
                    match self.send_sig(sim, scscf, &as_id, out) {
                        SendOutcome::Scheduled => return,
                        SendOutcome::Dropped => {
                            // Unreachable AS degrades to a pass-through.
                            sim.note(
                                scscf,
                                &as_id,
                                "AS-UNREACHABLE",
                                format!("flow={flow_id} as={as_id} treated-as-continue"),
                            );
                            msg.set_header("X-IFC-EXEC", &csv.join(","));
                        }
                    }
                }
            }
        }

        self.scscf_route_after_chain(sim, scscf, msg, originating, profile);
    }

    fn route_ctx(&self) -> RouteContext<'_> {
        RouteContext {
            ims_domains: &self.ims_domains,
            external_hosts: &self.external_hosts,
            enum_registry: &self.enum_registry,
        }
    }

    /// Routing once every matched AS has run.
    fn scscf_route_after_chain(
        &mut self,
        sim: &mut Sim,
        scscf: &NodeId,
        mut msg: SigMessage,
        originating: bool,
        profile: Option<ProfileView>,
    ) {
        let now = sim.now();
        let flow_id = msg.header("X-SESSION").unwrap_or_default().to_string();
        let served_matches_target = msg.header("X-SERVED") == Some(msg.to.to_string().as_str());

        if !originating {
            // Terminating delivery attempt at this S-CSCF.
            if let Some(binding) = self.scscf(scscf).contact_for(&msg.to, now).cloned() {
                let decision = route_terminating(&TermInputs {
                    pending_ifcs: &[],
                    registered_contact: Some(binding.contact.clone()),
                    cs_forward_unregistered: false,
                });
                if let RoutingDecision::ToPcscf(terminal) = decision {
                    let Some(pcscf) = self.pcscf_table.get(&terminal).cloned() else {
                        self.reject_request(sim, scscf, &msg, 404, "UnknownDestination");
                        return;
                    };
                    msg.set_header("X-CONTACT", terminal.as_str());
                    msg.push_via(scscf.clone());
                    self.send_sig(sim, scscf, &pcscf, msg);
                    return;
                }
            }
            if served_matches_target {
                // Unregistered served user: CS forwarding or rejection.
                let cs_forward = profile.as_ref().is_some_and(|p| p.cs_forward);
                match route_terminating(&TermInputs {
                    pending_ifcs: &[],
                    registered_contact: None,
                    cs_forward_unregistered: cs_forward,
                }) {
                    RoutingDecision::ToBgcf => {
                        if let Some(digits) = profile.as_ref().and_then(|p| p.tel_digits()) {
                            msg.set_header("X-CS-DIGITS", &digits);
                        }
                        self.scscf_forward_to_bgcf(sim, scscf, msg);
                    }
                    RoutingDecision::Reject(reason) => {
                        self.reject_request(
                            sim,
                            scscf,
                            &msg,
                            deny_code(&reason.to_string()),
                            &reason.to_string(),
                        );
                    }
                    _ => unreachable!("terminating fallback is bgcf or reject"),
                }
                return;
            }
            // Retargeted: resolve the new target without re-running iFCs.
            msg.set_header("X-NO-IFC", "1");
        }

        let route = route_originating(&self.route_ctx(), &[], &msg.to);
        if let Some(rewritten) = route.rewritten_target {
            sim.note(
                scscf,
                scscf,
                "ENUM",
                format!("flow={flow_id} rewrote {} -> {rewritten}", msg.to),
            );
            msg.set_to(rewritten.clone());
            if let Some(f) = self.flows.get_mut(&flow_id) {
                f.current_target = rewritten;
            }
        }
        match route.decision {
            RoutingDecision::ToAsChain(_) => unreachable!("chain already executed"),
            RoutingDecision::ToPcscf(_) => unreachable!("originating routing never picks a P-CSCF"),
            RoutingDecision::ToIcscf(domain) => {
                let my_domain = self.scscf(scscf).domain.clone();
                if domain == my_domain {
                    self.scscf_resolve_local_callee(sim, scscf, msg);
                } else {
                    msg.set_header("X-DIR", "terminating");
                    msg.set_header("X-SERVED", &msg.to.to_string());
                    let own_icscf = self.icscf_of.get(&my_domain).cloned();
                    let hide = own_icscf
                        .as_ref()
                        .is_some_and(|i| self.icscf(i).thig_enabled);
                    let next = if hide {
                        own_icscf
                    } else {
                        self.icscf_of.get(&domain).cloned()
                    };
                    match next {
                        Some(next) => {
                            msg.push_via(scscf.clone());
                            self.send_sig(sim, scscf, &next, msg);
                        }
                        None => self.reject_request(sim, scscf, &msg, 404, "UnknownDestination"),
                    }
                }
            }
            RoutingDecision::ToExternalSip(host) => {
                let Some(ext) = self.extsip_of.get(&host).cloned() else {
                    self.reject_request(sim, scscf, &msg, 404, "UnknownDestination");
                    return;
                };
                msg.push_via(scscf.clone());
                self.send_sig(sim, scscf, &ext, msg);
            }
            RoutingDecision::ToBgcf => {
                self.scscf_forward_to_bgcf(sim, scscf, msg);
            }
            RoutingDecision::Reject(reason) => {
                self.reject_request(
                    sim,
                    scscf,
                    &msg,
                    deny_code(&reason.to_string()),
                    &reason.to_string(),
                );
            }
        }
    }

    fn scscf_forward_to_bgcf(&mut self, sim: &mut Sim, scscf: &NodeId, mut msg: SigMessage) {
        let domain = self.scscf(scscf).domain.clone();
        let Some(bgcf) = self.bgcf_of.get(&domain).cloned() else {
            self.reject_request(sim, scscf, &msg, 404, "NoBreakoutPath");
            return;
        };
        msg.push_via(scscf.clone());
        self.send_sig(sim, scscf, &bgcf, msg);
    }

    /// Local-domain callee: find (or pick) the serving CSCF, entering the
    /// terminating phase locally when it is this node.
    fn scscf_resolve_local_callee(&mut self, sim: &mut Sim, scscf: &NodeId, mut msg: SigMessage) {
        let flow_id = msg.header("X-SESSION").unwrap_or_default().to_string();
        if self.force_icscf {
            let domain = self.scscf(scscf).domain.clone();
            msg.set_header("X-DIR", "terminating");
            msg.set_header("X-SERVED", &msg.to.to_string());
            match self.icscf_of.get(&domain).cloned() {
                Some(icscf) => {
                    msg.push_via(scscf.clone());
                    self.send_sig(sim, scscf, &icscf, msg);
                }
                None => self.reject_request(sim, scscf, &msg, 404, "UnknownDestination"),
            }
            return;
        }
        if let Some(term) = self.flows.get(&flow_id).and_then(|f| f.term_scscf.clone()) {
            self.scscf_hand_to_terminating(sim, scscf, msg, term);
            return;
        }
        let Some(info) = self.user_for_uri(&msg.to).cloned() else {
            self.reject_request(sim, scscf, &msg, 404, "UnknownDestination");
            return;
        };
        let sess = self.next_dia_session(&flow_id);
        let dia = DiameterMsg::new(DiaInterface::Cx, DiaCommand::ScscfQuery, &sess)
            .expect("Cx carries scscf query")
            .with("user", &msg.to.to_string())
            .with("flow", &flow_id);
        self.pending.insert(
            sess,
            Pending::ScscfCalleeQuery {
                scscf: scscf.clone(),
                msg,
            },
        );
        let _ = sim.schedule(scscf, &info.hss, Payload::Dia(dia));
    }

    pub(crate) fn scscf_on_callee_answer(
        &mut self,
        sim: &mut Sim,
        scscf: &NodeId,
        msg: SigMessage,
        answer: &DiameterMsg,
    ) {
        if answer.get("known") != Some("1") {
            self.reject_request(sim, scscf, &msg, 404, "UnknownDestination");
            return;
        }
        let assigned = answer
            .get("assigned")
            .filter(|a| *a != "-")
            .map(NodeId::new);
        let term = match assigned {
            Some(t) => t,
            None => {
                // Unregistered callee: terminating services run on a
                // selected S-CSCF without recording an assignment.
                let domain = self.scscf(scscf).domain.clone();
                let now = sim.now();
                let candidates: Vec<crate::cscf::ScscfDescriptor> = self
                    .scscfs_of
                    .get(&domain)
                    .map(|ids| {
                        ids.iter()
                            .map(|id| {
                                let s = self.scscf(id);
                                crate::cscf::ScscfDescriptor {
                                    id: id.clone(),
                                    capabilities: s.capabilities.clone(),
                                    binding_count: s.binding_count(now),
                                }
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                match crate::cscf::icscf_select_scscf(None, &Default::default(), &candidates) {
                    Ok(t) => t,
                    Err(_) => {
                        self.reject_request(sim, scscf, &msg, 403, "NoEligibleScscf");
                        return;
                    }
                }
            }
        };
        let flow_id = msg.header("X-SESSION").unwrap_or_default().to_string();
        if let Some(f) = self.flows.get_mut(&flow_id) {
            f.term_scscf = Some(term.clone());
        }
        self.scscf_hand_to_terminating(sim, scscf, msg, term);
    }

    fn scscf_hand_to_terminating(
        &mut self,
        sim: &mut Sim,
        scscf: &NodeId,
        mut msg: SigMessage,
        term: NodeId,
    ) {
        msg.set_header("X-DIR", "terminating");
        msg.set_header("X-SERVED", &msg.to.to_string());
        if term == *scscf {
            self.handle_scscf_request(sim, scscf, msg, false);
        } else {
            msg.push_via(scscf.clone());
            self.send_sig(sim, scscf, &term, msg);
        }
    }

    /// ACK and BYE follow the established session without policy or iFC
    /// processing.
    fn scscf_route_follow_up(&mut self, sim: &mut Sim, scscf: &NodeId, mut msg: SigMessage) {
        let now = sim.now();
        let flow_id = msg.header("X-SESSION").unwrap_or_default().to_string();
        if let Some(binding) = self.scscf(scscf).contact_for(&msg.to, now).cloned() {
            let Some(pcscf) = self.pcscf_table.get(&binding.contact).cloned() else {
                return;
            };
            msg.set_header("X-CONTACT", binding.contact.as_str());
            msg.push_via(scscf.clone());
            self.send_sig(sim, scscf, &pcscf, msg);
            return;
        }
        let my_domain = self.scscf(scscf).domain.clone();
        let route = route_originating(&self.route_ctx(), &[], &msg.to);
        match route.decision {
            RoutingDecision::ToBgcf => self.scscf_forward_to_bgcf(sim, scscf, msg),
            RoutingDecision::ToIcscf(domain) if domain == my_domain => {
                // Local session leg handled by another serving CSCF.
                let term = self
                    .flows
                    .get(&flow_id)
                    .and_then(|f| f.term_scscf.clone())
                    .filter(|t| t != scscf);
                match term {
                    Some(term) => {
                        msg.push_via(scscf.clone());
                        self.send_sig(sim, scscf, &term, msg);
                    }
                    None => sim.note(
                        scscf,
                        scscf,
                        "NOTE",
                        format!("flow={flow_id} no-route {}", msg.kind),
                    ),
                }
            }
            RoutingDecision::ToIcscf(domain) => {
                let own_icscf = self.icscf_of.get(&my_domain).cloned();
                let hide = own_icscf
                    .as_ref()
                    .is_some_and(|i| self.icscf(i).thig_enabled);
                let next = if hide {
                    own_icscf
                } else {
                    self.icscf_of.get(&domain).cloned()
                };
                if let Some(next) = next {
                    msg.push_via(scscf.clone());
                    self.send_sig(sim, scscf, &next, msg);
                }
            }
            RoutingDecision::ToExternalSip(host) => {
                if let Some(ext) = self.extsip_of.get(&host).cloned() {
                    msg.push_via(scscf.clone());
                    self.send_sig(sim, scscf, &ext, msg);
                }
            }
            _ => {
                sim.note(
                    scscf,
                    scscf,
                    "NOTE",
                    format!("flow={flow_id} no-route {}", msg.kind),
                );
            }
        }
    }

    // --- application servers ------------------------------------------------------

    pub(crate) fn on_as(&mut self, sim: &mut Sim, ev: Event) {
        match &ev.payload {
            Payload::Dia(_) => self.on_dia_answer(sim, ev),
            Payload::Sig(_) => {
                let Payload::Sig(msg) = ev.payload else {
                    unreachable!()
                };
                let as_id = ev.dst.clone();
                if msg.kind.is_response() {
                    self.route_response_consume(sim, &as_id, msg);
                    return;
                }
                if msg.kind == MsgKind::Register {
                    self.emit_cdr(
                        sim,
                        &as_id,
                        msg.header("X-SESSION").unwrap_or_default(),
                        CdrEvent::AsInvocation,
                        &msg.from.to_string(),
                        CdrRole::None,
                        false,
                    );
                    let resp = self.make_reply(&msg, 200);
                    self.route_response_consume(sim, &as_id, resp);
                    return;
                }
                if matches!(msg.kind, MsgKind::Ack | MsgKind::Bye) {
                    // Follow-ups do not re-enter service logic.
                    if msg.kind == MsgKind::Bye {
                        let resp = self.make_reply(&msg, 200);
                        self.route_response_consume(sim, &as_id, resp);
                    }
                    return;
                }
                self.as_handle_invite(sim, &as_id, ev.src, msg);
            }
            _ => {}
        }
    }

    fn as_handle_invite(
        &mut self,
        sim: &mut Sim,
        as_id: &NodeId,
        back_to: NodeId,
        mut msg: SigMessage,
    ) {
        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        let role = if msg.header("X-DIR") == Some("terminating") {
            CdrRole::Terminating
        } else {
            CdrRole::Originating
        };
        let served = msg
            .header("X-SERVED")
            .unwrap_or(&msg.from.to_string())
            .to_string();
        self.emit_cdr(
            sim,
            as_id,
            &flow,
            CdrEvent::AsInvocation,
            &served,
            role,
            false,
        );

        let service = self.as_state(as_id).node.service.clone();
        match service {
            ServiceLogic::Transparent => self.as_continue(sim, as_id, &back_to, msg),
            ServiceLogic::Screening(cfg) => {
                let verdict = as1_screen(&cfg, &msg.from);
                msg.set_header("X-SCREEN", &verdict.to_string());
                // Presence comes from the owner's profile tag over Sh.
                let Some(owner_info) = self.user_for_uri(&cfg.owner).cloned() else {
                    self.as_continue(sim, as_id, &back_to, msg);
                    return;
                };
                let sess = self.next_dia_session(&flow);
                let dia = DiameterMsg::new(DiaInterface::Sh, DiaCommand::AsDataQuery, &sess)
                    .expect("Sh carries as-data")
                    .with("user", &cfg.owner.to_string())
                    .with("flow", &flow);
                match sim.schedule(as_id, &owner_info.hss, Payload::Dia(dia)) {
                    Ok(SendOutcome::Scheduled) => {
                        self.pending.insert(
                            sess,
                            Pending::AsPresence {
                                as_id: as_id.clone(),
                                back_to,
                                msg,
                            },
                        );
                    }
                    _ => {
                        // No Sh path: assume the general profile.
                        msg.set_header("X-PRESENCE", "general");
                        self.as_continue(sim, as_id, &back_to, msg);
                    }
                }
            }
            ServiceLogic::Routing(cfg) => {
                let screen = match msg.header("X-SCREEN") {
                    Some("deflected") => ScreenResult::Deflected,
                    _ => ScreenResult::Allowed,
                };
                let presence = msg.header("X-PRESENCE").unwrap_or("general").to_string();
                let screening = match &self.as_state(&cfg.presence_source).node.service {
                    ServiceLogic::Screening(s) => Some(s.clone()),
                    _ => None,
                };
                if let Some(screening) = screening {
                    let new_target = as2_route(&cfg, &screening, screen, &presence, &msg.to);
                    if new_target != msg.to {
                        sim.note(
                            as_id,
                            as_id,
                            "RETARGET",
                            format!("flow={flow} {} -> {new_target}", msg.to),
                        );
                        msg.set_to(new_target);
                    }
                }
                self.as_continue(sim, as_id, &back_to, msg);
            }
        }
    }

    pub(crate) fn as_continue(
        &mut self,
        sim: &mut Sim,
        as_id: &NodeId,
        back_to: &NodeId,
        mut msg: SigMessage,
    ) {
        msg.push_via(as_id.clone());
        self.send_sig(sim, as_id, back_to, msg);
    }

    pub(crate) fn as_on_presence_answer(
        &mut self,
        sim: &mut Sim,
        as_id: &NodeId,
        back_to: &NodeId,
        mut msg: SigMessage,
        answer: &DiameterMsg,
    ) {
        let tag = answer.get("tag").unwrap_or("general");
        msg.set_header("X-PRESENCE", tag);
        self.as_continue(sim, as_id, back_to, msg);
    }

    // --- plain external SIP endpoints ------------------------------------------------

    pub(crate) fn on_extsip(&mut self, sim: &mut Sim, ev: Event) {
        let Payload::Sig(msg) = ev.payload else {
            return;
        };
        let node = ev.dst.clone();
        if msg.kind.is_response() {
            self.route_response_consume(sim, &node, msg);
            return;
        }
        match msg.kind {
            MsgKind::Invite | MsgKind::Message | MsgKind::Bye => {
                let resp = self.make_reply(&msg, 200);
                self.route_response_consume(sim, &node, resp);
            }
            _ => {}
        }
    }
}

/// iFC matching over the cached profile view.
pub(crate) fn profile_ifc_match(
    profile: &ProfileView,
    kind: MsgKind,
    originating: bool,
) -> Vec<NodeId> {
    profile
        .ifcs
        .iter()
        .filter(|i| i.method_match.matches(kind) && i.direction.matches(originating))
        .map(|i| i.as_id.clone())
        .collect()
}
