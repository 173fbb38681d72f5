//! Registration flows: terminal challenge handling, P-CSCF forwarding,
//! I-CSCF S-CSCF selection, S-CSCF commit, and the HSS/SLF DIAMETER
//! handlers shared with session setup.

use std::collections::BTreeSet;

use crate::charging::{CdrEvent, CdrRole};
use crate::cscf::{icscf_select_scscf, RegistrationBinding, ScscfDescriptor};
use crate::hss::{digest, network_token, IfcDirection, InitialFilterCriterion, MethodMatch};
use crate::identity::Uri;
use crate::netsim::{Event, NodeId, Payload, Sim};
use crate::signaling::{DiaCommand, DiaInterface, DiameterMsg, MediaKind, MsgKind, SigMessage};

use super::world::{
    Challenge, Flow, FlowOutcome, ImsWorld, Node, Originator, Pending, ProfileView,
};

impl ImsWorld {
    // --- action entry -------------------------------------------------------

    pub(crate) fn start_register(
        &mut self,
        sim: &mut Sim,
        user: &str,
        terminal: &NodeId,
        secret_override: Option<String>,
    ) {
        let flow_id = self.new_reg_flow();
        let info = self.users[user].clone();
        let public = info.identity.public_ids[0].clone();
        let secret = secret_override.unwrap_or_else(|| info.identity.shared_secret.clone());
        self.flows.insert(
            flow_id.clone(),
            Flow {
                id: flow_id.clone(),
                user: user.to_string(),
                originator: Originator::Terminal(terminal.clone()),
                orig_public: public.clone(),
                secret,
                target: public.clone(),
                current_target: public.clone(),
                sdp: None,
                dscp: None,
                is_register: true,
                outcome: FlowOutcome::Pending,
                term_scscf: None,
                entry_scscf: None,
                mutual_auth_ok: false,
            },
        );

        let Some(pcscf) = self.pcscf_table.get(terminal).cloned() else {
            self.set_flow_outcome(
                sim,
                &flow_id,
                FlowOutcome::Rejected("NoPcscfConfigured".into()),
            );
            return;
        };
        if self.domain_of(&pcscf) != info.identity.home_domain {
            // Visited-network P-CSCF: roaming agreement is assumed valid.
            sim.note(
                &pcscf,
                terminal,
                "ROAMING",
                "roaming-agreement=assumed".into(),
            );
        }

        let seq = self.next_sip_seq(terminal);
        let mut msg = SigMessage::new(MsgKind::Register, seq, public.clone(), public);
        msg.set_header("X-SESSION", &flow_id);
        msg.set_header("X-CONTACT", terminal.as_str());
        msg.push_via(terminal.clone());
        self.send_access_aware(sim, terminal, &pcscf, msg);
    }

    // --- terminal -------------------------------------------------------------

    pub(crate) fn on_terminal(&mut self, sim: &mut Sim, ev: Event) {
        let Payload::Sig(raw) = ev.payload else {
            return;
        };
        let msg = match raw.decompress() {
            Ok(m) => m,
            Err(_) => raw,
        };
        let terminal = ev.dst.clone();

        if msg.kind.is_response() {
            if let Some(final_msg) = self.route_response(sim, &terminal, msg) {
                self.consume_response(sim, &terminal, final_msg);
            }
            return;
        }

        // Auto-answering endpoint behavior for incoming requests.
        match msg.kind {
            MsgKind::Invite | MsgKind::Message | MsgKind::Bye => {
                let resp = self.make_reply(&msg, 200);
                if let Some(m) = self.route_response(sim, &terminal, resp) {
                    self.consume_response(sim, &terminal, m);
                }
            }
            MsgKind::Ack | MsgKind::Register | MsgKind::Response(_) => {}
        }
    }

    /// A response whose via stack emptied here: this node originated the
    /// request. Registration and call outcomes surface at this point.
    pub(crate) fn consume_response(&mut self, sim: &mut Sim, node: &NodeId, msg: SigMessage) {
        let flow_id = msg.header("X-SESSION").unwrap_or_default().to_string();
        let answers = msg.header("X-ANSWERS").unwrap_or_default().to_string();
        let code = match msg.kind {
            MsgKind::Response(c) => c,
            _ => return,
        };

        if answers == "REGISTER" {
            match code {
                401 => self.continue_challenge(sim, node, &flow_id, &msg),
                200 => {
                    if let Node::Terminal(t) = self.nodes.get_mut(node).expect("terminal") {
                        t.compression_negotiated = true;
                    }
                    let associated = msg.header("X-ASSOCIATED").unwrap_or_default().to_string();
                    sim.note(
                        node,
                        node,
                        "REG",
                        format!(
                            "flow={flow_id} associated={associated} net-auth={}",
                            if self.flows.get(&flow_id).is_some_and(|f| f.mutual_auth_ok) {
                                "ok"
                            } else {
                                "unverified"
                            }
                        ),
                    );
                    self.set_flow_outcome(sim, &flow_id, FlowOutcome::Registered);
                }
                _ => {
                    let reason = msg
                        .header("X-DENY")
                        .map(str::to_string)
                        .unwrap_or_else(|| format!("status-{code}"));
                    self.set_flow_outcome(sim, &flow_id, FlowOutcome::Rejected(reason));
                }
            }
            return;
        }

        if answers == "INVITE" {
            if (100..200).contains(&code) {
                // Provisional progress (ringing); the final answer follows.
                return;
            }
            if code == 200 {
                self.complete_call(sim, node, &flow_id, &msg);
            } else {
                let reason = msg
                    .header("X-DENY")
                    .map(str::to_string)
                    .unwrap_or_else(|| format!("status-{code}"));
                self.set_flow_outcome(sim, &flow_id, FlowOutcome::Rejected(reason));
            }
            return;
        }

        if answers == "BYE" && code == 200 {
            sim.note(
                node,
                node,
                "FLOW",
                format!("flow={flow_id} hangup-complete"),
            );
        }
    }

    fn continue_challenge(
        &mut self,
        sim: &mut Sim,
        terminal: &NodeId,
        flow_id: &str,
        msg: &SigMessage,
    ) {
        let Some(flow) = self.flows.get(flow_id).cloned() else {
            return;
        };
        let nonce = msg.header("X-NONCE").unwrap_or_default().to_string();
        let offered = msg.header("X-NET-AUTH").unwrap_or_default().to_string();
        let response = digest(&nonce, &flow.secret);
        // Authentication of the network by the user: the terminal derives
        // the token the genuine network would present.
        let mutual_ok = offered == network_token(&nonce, &response);
        if let Some(f) = self.flows.get_mut(flow_id) {
            f.mutual_auth_ok = mutual_ok;
        }
        sim.note(
            terminal,
            terminal,
            "REG",
            format!(
                "flow={flow_id} net-auth={}",
                if mutual_ok { "ok" } else { "mismatch" }
            ),
        );

        let Some(pcscf) = self.pcscf_table.get(terminal).cloned() else {
            return;
        };
        let seq = self.next_sip_seq(terminal);
        let mut reg = SigMessage::new(
            MsgKind::Register,
            seq,
            flow.orig_public.clone(),
            flow.orig_public.clone(),
        );
        reg.set_header("X-SESSION", flow_id);
        reg.set_header("X-CONTACT", terminal.as_str());
        reg.set_header("X-AUTH-RESPONSE", &response);
        reg.push_via(terminal.clone());
        self.send_access_aware(sim, terminal, &pcscf, reg);
    }

    // --- P-CSCF registration path ------------------------------------------------

    pub(crate) fn handle_pcscf_register(&mut self, sim: &mut Sim, pcscf: &NodeId, msg: SigMessage) {
        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        let terminal = NodeId::new(msg.header("X-CONTACT").unwrap_or_default());
        self.pcscf_mut(pcscf).served_terminals.insert(terminal);
        self.emit_cdr(
            sim,
            pcscf,
            &flow,
            CdrEvent::Register,
            &msg.from.to_string(),
            CdrRole::None,
            false,
        );

        let Some(home) = msg.from.host().map(str::to_string) else {
            self.reject_request(sim, pcscf, &msg, 404, "UnknownDestination");
            return;
        };
        let Some(icscf) = self.icscf_of.get(&home).cloned() else {
            self.reject_request(sim, pcscf, &msg, 404, "UnknownDestination");
            return;
        };
        let mut out = msg;
        out.push_via(pcscf.clone());
        self.send_sig(sim, pcscf, &icscf, out);
    }

    /// Registration side effects when the final 200 retraces through the
    /// P-CSCF: security association and compression negotiation.
    pub(crate) fn pcscf_register_response(
        &mut self,
        sim: &mut Sim,
        pcscf: &NodeId,
        msg: &SigMessage,
    ) {
        if msg.kind != MsgKind::Response(200) {
            return;
        }
        let terminal = NodeId::new(msg.header("X-CONTACT").unwrap_or_default());
        let flow = msg.header("X-SESSION").unwrap_or_default();
        let sa = format!(
            "sa-{}",
            digest(&format!("{flow}:{terminal}"), pcscf.as_str())
        );
        let scscf = msg.header("X-SCSCF").map(NodeId::new);
        sim.note(
            pcscf,
            &terminal,
            "SEC",
            format!("flow={flow} sa={sa} compression=negotiated"),
        );
        let state = self.pcscf_mut(pcscf);
        state.security_assocs.insert(terminal.clone(), sa);
        if let Some(s) = scscf {
            state.scscf_for_terminal.insert(terminal.clone(), s);
        }
        // Negotiated state applies to traffic after this response.
        state.compression_negotiated.insert(terminal, true);
    }

    // --- I-CSCF ----------------------------------------------------------------

    pub(crate) fn handle_icscf_request(&mut self, sim: &mut Sim, icscf: &NodeId, msg: SigMessage) {
        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        let mut msg = msg;

        // Strict routing injected by a hiding BGCF path.
        if let Some(next) = msg.pop_route_front() {
            let mut out = msg;
            out.push_via(icscf.clone());
            self.send_sig(sim, icscf, &next, out);
            return;
        }

        let domain = self.icscf(icscf).domain.clone();
        if msg.kind == MsgKind::Register {
            self.emit_cdr(
                sim,
                icscf,
                &flow,
                CdrEvent::Register,
                &msg.from.to_string(),
                CdrRole::None,
                false,
            );
            self.icscf_query_scscf(sim, icscf, msg);
            return;
        }

        // Transit toward a foreign domain (hiding path).
        let target_domain = msg.to.host().map(str::to_string).unwrap_or_default();
        if target_domain != domain {
            let role = CdrRole::Originating;
            if msg.kind == MsgKind::Invite {
                self.emit_cdr(
                    sim,
                    icscf,
                    &flow,
                    CdrEvent::SessionStart,
                    &msg.from.to_string(),
                    role,
                    false,
                );
            }
            if msg.kind == MsgKind::Bye {
                self.emit_cdr(
                    sim,
                    icscf,
                    &flow,
                    CdrEvent::SessionEnd,
                    &msg.from.to_string(),
                    role,
                    false,
                );
            }
            let Some(next) = self.icscf_of.get(&target_domain).cloned() else {
                self.reject_request(sim, icscf, &msg, 404, "UnknownDestination");
                return;
            };
            let mut out = msg;
            out.push_via(icscf.clone());
            self.send_sig(sim, icscf, &next, out);
            return;
        }

        // Terminating entry into this domain.
        let served = msg.to.to_string();
        match msg.kind {
            MsgKind::Invite | MsgKind::Message => {
                self.emit_cdr(
                    sim,
                    icscf,
                    &flow,
                    CdrEvent::SessionStart,
                    &served,
                    CdrRole::Terminating,
                    false,
                );
                msg.set_header("X-DIR", "terminating");
                msg.set_header("X-SERVED", &served);
                self.icscf_query_scscf(sim, icscf, msg);
            }
            MsgKind::Ack | MsgKind::Bye => {
                if msg.kind == MsgKind::Bye {
                    self.emit_cdr(
                        sim,
                        icscf,
                        &flow,
                        CdrEvent::SessionEnd,
                        &served,
                        CdrRole::Terminating,
                        false,
                    );
                }
                let scscf = self
                    .flows
                    .get(&flow)
                    .and_then(|f| f.term_scscf.clone())
                    .or_else(|| self.find_scscf_with_binding(&msg.to, sim.now()));
                match scscf {
                    Some(s) => {
                        let mut out = msg;
                        out.push_via(icscf.clone());
                        self.send_sig(sim, icscf, &s, out);
                    }
                    None => sim.note(
                        icscf,
                        icscf,
                        "NOTE",
                        format!("flow={flow} no-route {}", msg.kind),
                    ),
                }
            }
            _ => {}
        }
    }

    pub(crate) fn find_scscf_with_binding(&self, target: &Uri, now: u64) -> Option<NodeId> {
        for (id, node) in &self.nodes {
            if let Node::Scscf(s) = node {
                if s.contact_for(target, now).is_some() {
                    return Some(id.clone());
                }
            }
        }
        None
    }

    /// Cx/Dx lookup for the S-CSCF serving a user: single-HSS deployments
    /// skip the SLF.
    fn icscf_query_scscf(&mut self, sim: &mut Sim, icscf: &NodeId, msg: SigMessage) {
        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        let user = if msg.kind == MsgKind::Register {
            msg.from.to_string()
        } else {
            msg.to.to_string()
        };
        let domain = self.icscf(icscf).domain.clone();
        let hsses = self.hss_of_domain.get(&domain).cloned().unwrap_or_default();
        if hsses.len() > 1 {
            if let Some(slf) = self.slf_of_domain.get(&domain).cloned() {
                let sess = self.next_dia_session(&flow);
                let dia = DiameterMsg::new(DiaInterface::Dx, DiaCommand::LocateHss, &sess)
                    .expect("Dx carries locate")
                    .with("user", &user)
                    .with("flow", &flow);
                self.pending.insert(
                    sess,
                    Pending::IcscfLocate {
                        icscf: icscf.clone(),
                        msg,
                    },
                );
                let _ = sim.schedule(icscf, &slf, Payload::Dia(dia));
                return;
            }
        }
        let hss = self
            .user_for_uri(&Uri::parse(&user).unwrap_or_else(|_| msg.to.clone()))
            .map(|u| u.hss.clone())
            .or_else(|| hsses.first().cloned());
        match hss {
            Some(hss) => self.icscf_send_scscf_query(sim, icscf, &hss, msg),
            None => self.reject_request(sim, icscf, &msg, 404, "UnknownDestination"),
        }
    }

    pub(crate) fn icscf_send_scscf_query(
        &mut self,
        sim: &mut Sim,
        icscf: &NodeId,
        hss: &NodeId,
        msg: SigMessage,
    ) {
        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        let user = if msg.kind == MsgKind::Register {
            msg.from.to_string()
        } else {
            msg.to.to_string()
        };
        let sess = self.next_dia_session(&flow);
        let dia = DiameterMsg::new(DiaInterface::Cx, DiaCommand::ScscfQuery, &sess)
            .expect("Cx carries scscf query")
            .with("user", &user)
            .with("flow", &flow);
        self.pending.insert(
            sess,
            Pending::IcscfScscfQuery {
                icscf: icscf.clone(),
                msg,
            },
        );
        let _ = sim.schedule(icscf, hss, Payload::Dia(dia));
    }

    fn icscf_on_scscf_answer(
        &mut self,
        sim: &mut Sim,
        icscf: &NodeId,
        msg: SigMessage,
        answer: &DiameterMsg,
    ) {
        let known = answer.get("known") == Some("1");
        if !known {
            self.reject_request(sim, icscf, &msg, 404, "UnknownDestination");
            return;
        }
        let assigned = answer
            .get("assigned")
            .filter(|a| *a != "-")
            .map(NodeId::new);
        let user_key = if msg.kind == MsgKind::Register {
            msg.from.to_string()
        } else {
            msg.to.to_string()
        };

        let target = if let Some(assigned) = assigned {
            assigned
        } else if let Some(pending) = self.icscf(icscf).pending_selection.get(&user_key).cloned() {
            pending
        } else {
            let required: BTreeSet<MediaKind> = answer
                .get("media")
                .map(|csv| csv.split(',').filter_map(MediaKind::parse).collect())
                .unwrap_or_default();
            let domain = self.icscf(icscf).domain.clone();
            let now = sim.now();
            let candidates: Vec<ScscfDescriptor> = self
                .scscfs_of
                .get(&domain)
                .map(|ids| {
                    ids.iter()
                        .map(|id| {
                            let s = self.scscf(id);
                            ScscfDescriptor {
                                id: id.clone(),
                                capabilities: s.capabilities.clone(),
                                binding_count: s.binding_count(now),
                            }
                        })
                        .collect()
                })
                .unwrap_or_default();
            match icscf_select_scscf(None, &required, &candidates) {
                Ok(chosen) => {
                    if msg.kind == MsgKind::Register {
                        self.icscf_mut(icscf)
                            .pending_selection
                            .insert(user_key, chosen.clone());
                    }
                    chosen
                }
                Err(_) => {
                    self.reject_request(sim, icscf, &msg, 403, "NoEligibleScscf");
                    return;
                }
            }
        };

        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        if let Some(f) = self.flows.get_mut(&flow) {
            if msg.kind != MsgKind::Register {
                f.term_scscf = Some(target.clone());
            }
        }
        let mut out = msg;
        out.push_via(icscf.clone());
        self.send_sig(sim, icscf, &target, out);
    }

    /// Clears sticky selection state when a final registration answer
    /// passes back through.
    pub(crate) fn icscf_register_response(&mut self, icscf: &NodeId, msg: &SigMessage) {
        if let MsgKind::Response(code) = msg.kind {
            if code == 200 || code >= 400 {
                let user = msg.from.to_string();
                self.icscf_mut(icscf).pending_selection.remove(&user);
            }
        }
    }

    // --- S-CSCF registration -----------------------------------------------------

    pub(crate) fn handle_scscf_register(&mut self, sim: &mut Sim, scscf: &NodeId, msg: SigMessage) {
        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        self.emit_cdr(
            sim,
            scscf,
            &flow,
            CdrEvent::Register,
            &msg.from.to_string(),
            CdrRole::None,
            false,
        );

        match msg.header("X-AUTH-RESPONSE") {
            None => {
                // First pass: fetch an authentication vector.
                let sess = self.next_dia_session(&flow);
                let hss = match self.user_for_uri(&msg.from) {
                    Some(u) => u.hss.clone(),
                    None => {
                        self.reject_request(sim, scscf, &msg, 404, "UnknownDestination");
                        return;
                    }
                };
                let private = self
                    .user_for_uri(&msg.from)
                    .map(|u| u.identity.private_id.clone())
                    .unwrap_or_default();
                let dia = DiameterMsg::new(DiaInterface::Cx, DiaCommand::AuthRequest, &sess)
                    .expect("Cx carries auth")
                    .with("user", &private)
                    .with("n", "1")
                    .with("flow", &flow);
                self.pending.insert(
                    sess,
                    Pending::ScscfAuth {
                        scscf: scscf.clone(),
                        msg,
                    },
                );
                let _ = sim.schedule(scscf, &hss, Payload::Dia(dia));
            }
            Some(response) => {
                let key = msg.from.to_string();
                match self.challenges.remove(&key) {
                    Some(ch) if ch.expected == response => {
                        // User authenticated; authorize against the profile.
                        let sess = self.next_dia_session(&flow);
                        let hss = self.user_for_uri(&msg.from).map(|u| u.hss.clone()).unwrap();
                        let dia =
                            DiameterMsg::new(DiaInterface::Cx, DiaCommand::ProfileQuery, &sess)
                                .expect("Cx carries profile query")
                                .with("user", &key)
                                .with("flow", &flow);
                        self.pending.insert(
                            sess,
                            Pending::ScscfRegProfile {
                                scscf: scscf.clone(),
                                msg,
                            },
                        );
                        let _ = sim.schedule(scscf, &hss, Payload::Dia(dia));
                    }
                    _ => {
                        self.reject_request(sim, scscf, &msg, 403, "AuthFailed");
                    }
                }
            }
        }
    }

    fn scscf_on_auth_answer(
        &mut self,
        sim: &mut Sim,
        scscf: &NodeId,
        msg: SigMessage,
        answer: &DiameterMsg,
    ) {
        if answer.get("error").is_some() {
            self.reject_request(sim, scscf, &msg, 404, "UnknownDestination");
            return;
        }
        let nonce = answer.get("nonce").unwrap_or_default().to_string();
        let expected = answer.get("expected").unwrap_or_default().to_string();
        self.challenges.insert(
            msg.from.to_string(),
            Challenge {
                expected: expected.clone(),
            },
        );
        let mut resp = self.make_reply(&msg, 401);
        resp.set_header("X-NONCE", &nonce);
        resp.set_header("X-NET-AUTH", &network_token(&nonce, &expected));
        if let Some(m) = self.route_response(sim, scscf, resp) {
            self.consume_response(sim, scscf, m);
        }
    }

    fn scscf_on_reg_profile(
        &mut self,
        sim: &mut Sim,
        scscf: &NodeId,
        msg: SigMessage,
        answer: &DiameterMsg,
    ) {
        match answer.get("error") {
            Some("Barred") => {
                self.reject_request(sim, scscf, &msg, 403, "Barred");
                return;
            }
            Some(_) => {
                self.reject_request(sim, scscf, &msg, 404, "UnknownDestination");
                return;
            }
            None => {}
        }
        let Some(profile) = profile_view_from_payload(answer) else {
            self.reject_request(sim, scscf, &msg, 404, "UnknownDestination");
            return;
        };
        let contact = msg.header("X-CONTACT").unwrap_or_default();
        let tag = if profile.home_terminal.as_ref().map(NodeId::as_str) == Some(contact) {
            "home"
        } else {
            "general"
        };
        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        let sess = self.next_dia_session(&flow);
        let hss = self.user_for_uri(&msg.from).map(|u| u.hss.clone()).unwrap();
        let ttl = self.reg_ttl;
        let dia = DiameterMsg::new(DiaInterface::Cx, DiaCommand::ScscfAssign, &sess)
            .expect("Cx carries assignment")
            .with("user", &msg.from.to_string())
            .with("scscf", scscf.as_str())
            .with("tag", tag)
            .with("ttl", &ttl.to_string())
            .with("flow", &flow);
        self.pending.insert(
            sess,
            Pending::ScscfAssignAck {
                scscf: scscf.clone(),
                msg,
                profile,
                tag: tag.to_string(),
            },
        );
        let _ = sim.schedule(scscf, &hss, Payload::Dia(dia));
    }

    fn scscf_commit_registration(
        &mut self,
        sim: &mut Sim,
        scscf: &NodeId,
        msg: SigMessage,
        mut profile: ProfileView,
        tag: String,
    ) {
        profile.tag = tag;
        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        let contact = NodeId::new(msg.header("X-CONTACT").unwrap_or_default());
        let now = sim.now();
        let ttl = self.reg_ttl;
        let sa_id = format!("sa-{}", digest(&flow, scscf.as_str()));
        let associated: Vec<String> = profile.public_ids.iter().map(|u| u.to_string()).collect();

        {
            let state = self.scscf_mut(scscf);
            for public in &profile.public_ids {
                state.bind(RegistrationBinding {
                    public_id: public.clone(),
                    contact: contact.clone(),
                    expiry_tick: now + ttl,
                    security_association_id: sa_id.clone(),
                    compression_negotiated: true,
                });
            }
        }
        self.scscf_profiles
            .entry(scscf.clone())
            .or_default()
            .insert(profile.user.clone(), profile.clone());

        let mut resp = self.make_reply(&msg, 200);
        resp.set_header("X-ASSOCIATED", &associated.join(","));
        resp.set_header("X-SCSCF", scscf.as_str());
        if let Some(m) = self.route_response(sim, scscf, resp) {
            self.consume_response(sim, scscf, m);
        }

        // Third-party REGISTER toward any REGISTER-triggered services.
        let matched: Vec<NodeId> = profile
            .ifcs
            .iter()
            .filter(|i| i.method_match.matches(MsgKind::Register) && i.direction.matches(true))
            .map(|i| i.as_id.clone())
            .collect();
        for as_id in matched {
            let seq = self.next_sip_seq(scscf);
            let mut third =
                SigMessage::new(MsgKind::Register, seq, msg.from.clone(), msg.from.clone());
            third.set_header("X-SESSION", &flow);
            third.set_header("X-THIRD-PARTY", "1");
            third.set_header("X-SERVED", &msg.from.to_string());
            third.push_via(scscf.clone());
            self.send_sig(sim, scscf, &as_id, third);
        }
    }

    // --- DIAMETER dispatch ----------------------------------------------------------

    pub(crate) fn on_dia_answer(&mut self, sim: &mut Sim, ev: Event) {
        let Payload::Dia(answer) = &ev.payload else {
            return;
        };
        let Some(pending) = self.pending.remove(&answer.session_id) else {
            return;
        };
        match pending {
            Pending::IcscfLocate { icscf, msg } => match answer.get("hss") {
                Some(hss) => {
                    let hss = NodeId::new(hss);
                    self.icscf_send_scscf_query(sim, &icscf, &hss, msg);
                }
                None => self.reject_request(sim, &icscf, &msg, 404, "UnknownDestination"),
            },
            Pending::IcscfScscfQuery { icscf, msg } => {
                self.icscf_on_scscf_answer(sim, &icscf, msg, answer)
            }
            Pending::ScscfAuth { scscf, msg } => {
                self.scscf_on_auth_answer(sim, &scscf, msg, answer)
            }
            Pending::ScscfRegProfile { scscf, msg } => {
                self.scscf_on_reg_profile(sim, &scscf, msg, answer)
            }
            Pending::ScscfAssignAck {
                scscf,
                msg,
                profile,
                tag,
            } => self.scscf_commit_registration(sim, &scscf, msg, profile, tag),
            Pending::ScscfCalleeQuery { scscf, msg } => {
                self.scscf_on_callee_answer(sim, &scscf, msg, answer)
            }
            Pending::ScscfServedProfile { scscf, msg } => {
                if let Some(profile) = profile_view_from_payload(answer) {
                    self.scscf_profiles
                        .entry(scscf.clone())
                        .or_default()
                        .insert(profile.user.clone(), profile);
                }
                self.handle_scscf_request(sim, &scscf.clone(), msg, true);
            }
            Pending::AsPresence {
                as_id,
                back_to,
                msg,
            } => self.as_on_presence_answer(sim, &as_id, &back_to, msg, answer),
        }
    }

    // --- HSS and SLF node handlers ------------------------------------------------------

    pub(crate) fn on_hss(&mut self, sim: &mut Sim, ev: Event) {
        let Payload::Dia(req) = ev.payload else {
            return;
        };
        let hss_id = ev.dst.clone();
        let user = req.get("user").unwrap_or_default().to_string();
        let flow = req.get("flow").unwrap_or_default().to_string();
        let now = sim.now();

        let answer = match req.command {
            DiaCommand::AuthRequest => {
                let mut a =
                    DiameterMsg::new(DiaInterface::Cx, DiaCommand::AuthAnswer, &req.session_id)
                        .expect("Cx answer");
                let vectors = self.hss_mut(&hss_id).fetch_auth_vectors(&user, 1);
                match vectors {
                    Ok(v) => {
                        a = a
                            .with("nonce", &v[0].nonce)
                            .with("expected", &v[0].expected_response);
                    }
                    Err(_) => a = a.with("error", "UnknownSubscriber"),
                }
                a
            }
            DiaCommand::ProfileQuery => {
                let mut a =
                    DiameterMsg::new(DiaInterface::Cx, DiaCommand::ProfileAnswer, &req.session_id)
                        .expect("Cx answer");
                match self.hss(&hss_id).download_profile(&user) {
                    Ok(profile) => {
                        let name = self
                            .user_of_uri
                            .get(&user)
                            .cloned()
                            .unwrap_or_else(|| user.clone());
                        a = profile_to_payload(a, &name, profile);
                    }
                    Err(crate::hss::HssError::Barred(_)) => a = a.with("error", "Barred"),
                    Err(_) => a = a.with("error", "UnknownSubscriber"),
                }
                a
            }
            DiaCommand::ScscfQuery => {
                let mut a =
                    DiameterMsg::new(DiaInterface::Cx, DiaCommand::ScscfQuery, &req.session_id)
                        .expect("Cx answer")
                        .with("dir", "ans");
                match self.hss(&hss_id).profile(&user) {
                    Ok(profile) => {
                        let assigned = self
                            .hss(&hss_id)
                            .query_scscf(&user, now)
                            .ok()
                            .flatten()
                            .map(|n| n.to_string())
                            .unwrap_or_else(|| "-".to_string());
                        let media: Vec<String> = profile
                            .subscribed_media
                            .iter()
                            .map(|m| m.to_string())
                            .collect();
                        a = a
                            .with("known", "1")
                            .with("assigned", &assigned)
                            .with("media", &media.join(","));
                    }
                    Err(_) => a = a.with("known", "0"),
                }
                a
            }
            DiaCommand::ScscfAssign => {
                let scscf = NodeId::new(req.get("scscf").unwrap_or_default());
                let tag = req.get("tag").unwrap_or("general").to_string();
                let ttl: u64 = req
                    .get("ttl")
                    .and_then(|t| t.parse().ok())
                    .unwrap_or(crate::hss::DEFAULT_REG_TTL);
                let ok = {
                    let hss = self.hss_mut(&hss_id);
                    match hss.assign_scscf(&user, scscf, now, ttl) {
                        Ok(()) => {
                            if let Ok(profile) = hss.profile_mut(&user) {
                                profile.active_profile_tag = tag.clone();
                            }
                            true
                        }
                        Err(_) => false,
                    }
                };
                DiameterMsg::new(DiaInterface::Cx, DiaCommand::ScscfAssign, &req.session_id)
                    .expect("Cx answer")
                    .with("dir", "ans")
                    .with("ok", if ok { "1" } else { "0" })
            }
            DiaCommand::AsDataQuery => {
                let mut a =
                    DiameterMsg::new(DiaInterface::Sh, DiaCommand::AsDataAnswer, &req.session_id)
                        .expect("Sh answer");
                match self.hss(&hss_id).profile(&user) {
                    Ok(profile) => {
                        a = a
                            .with("tag", &profile.active_profile_tag)
                            .with("known", "1")
                    }
                    Err(_) => a = a.with("known", "0"),
                }
                a
            }
            _ => return,
        };
        let answer = answer.with("flow", &flow);
        let _ = sim.schedule(&hss_id, &ev.src, Payload::Dia(answer));
    }

    pub(crate) fn on_slf(&mut self, sim: &mut Sim, ev: Event) {
        let Payload::Dia(req) = ev.payload else {
            return;
        };
        if req.command != DiaCommand::LocateHss {
            return;
        }
        let user = req.get("user").unwrap_or_default();
        let flow = req.get("flow").unwrap_or_default().to_string();
        let mut answer =
            DiameterMsg::new(DiaInterface::Dx, DiaCommand::LocateAnswer, &req.session_id)
                .expect("Dx answer")
                .with("flow", &flow);
        let domain = self.domain_of(&ev.dst);
        let hss = Uri::parse(user).ok().and_then(|u| {
            self.slf_tables
                .get(&domain)
                .and_then(|table| table.locate(&u).ok())
        });
        answer = match hss {
            Some(hss) => answer.with("hss", hss.as_str()),
            None => answer.with("error", "UnknownSubscriber"),
        };
        let _ = sim.schedule(&ev.dst, &ev.src, Payload::Dia(answer));
    }
}

// --- profile payload codec -------------------------------------------------

pub(crate) fn profile_to_payload(
    mut msg: DiameterMsg,
    name: &str,
    profile: &crate::hss::UserProfile,
) -> DiameterMsg {
    let publics: Vec<String> = profile
        .identity
        .public_ids
        .iter()
        .map(|u| u.to_string())
        .collect();
    let media: Vec<String> = profile
        .subscribed_media
        .iter()
        .map(|m| m.to_string())
        .collect();
    let ifcs: Vec<String> = profile
        .ifcs()
        .iter()
        .map(|i| {
            let method = match i.method_match {
                MethodMatch::Any => "*".to_string(),
                MethodMatch::Method(k) => k.to_string(),
            };
            let dir = match i.direction {
                IfcDirection::Originating => "o",
                IfcDirection::Terminating => "t",
                IfcDirection::Both => "both",
            };
            format!("{}:{}:{}:{}", i.priority, method, dir, i.as_id)
        })
        .collect();
    msg = msg
        .with("name", name)
        .with("private", &profile.identity.private_id)
        .with("publics", &publics.join(","))
        .with("media", &media.join(","))
        .with(
            "csfwd",
            if profile.cs_forward_unregistered {
                "1"
            } else {
                "0"
            },
        )
        .with("tag", &profile.active_profile_tag)
        .with("ifcs", &ifcs.join("|"));
    if let Some(home) = &profile.home_terminal {
        msg = msg.with("home-terminal", home.as_str());
    }
    msg
}

pub(crate) fn profile_view_from_payload(msg: &DiameterMsg) -> Option<ProfileView> {
    let name = msg.get("name")?.to_string();
    let public_ids: Vec<Uri> = msg
        .get("publics")?
        .split(',')
        .filter(|s| !s.is_empty())
        .filter_map(|s| Uri::parse(s).ok())
        .collect();
    if public_ids.is_empty() {
        return None;
    }
    let media = msg
        .get("media")
        .map(|csv| csv.split(',').filter_map(MediaKind::parse).collect())
        .unwrap_or_default();
    let mut ifcs = Vec::new();
    for item in msg
        .get("ifcs")
        .unwrap_or_default()
        .split('|')
        .filter(|s| !s.is_empty())
    {
        let mut parts = item.splitn(4, ':');
        let priority: u32 = parts.next()?.parse().ok()?;
        let method = match parts.next()? {
            "*" => MethodMatch::Any,
            "REGISTER" => MethodMatch::Method(MsgKind::Register),
            "INVITE" => MethodMatch::Method(MsgKind::Invite),
            "MESSAGE" => MethodMatch::Method(MsgKind::Message),
            "BYE" => MethodMatch::Method(MsgKind::Bye),
            _ => return None,
        };
        let direction = match parts.next()? {
            "o" => IfcDirection::Originating,
            "t" => IfcDirection::Terminating,
            _ => IfcDirection::Both,
        };
        let as_id = NodeId::new(parts.next()?);
        ifcs.push(InitialFilterCriterion {
            priority,
            method_match: method,
            direction,
            as_id,
        });
    }
    Some(ProfileView {
        user: name,
        private_id: msg.get("private").unwrap_or_default().to_string(),
        public_ids,
        ifcs,
        media,
        cs_forward: msg.get("csfwd") == Some("1"),
        home_terminal: msg.get("home-terminal").map(NodeId::new),
        tag: msg.get("tag").unwrap_or("general").to_string(),
    })
}
