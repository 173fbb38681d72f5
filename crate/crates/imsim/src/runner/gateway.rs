//! CS-domain breakout: BGCF selection, MGCF signaling conversion, SGW
//! transport conversion and the simulated CS-side peer behind the SGW.

use crate::charging::{CdrEvent, CdrRole};
use crate::interworking::{
    bgcf_select, mgcf_convert, mgw_adapt, sgw_transport, BgcfDecision, CsPrimitive, SgwDirection,
    SipGatewayEvent, Transport,
};
use crate::netsim::{Event, NodeId, Payload, Sim};
use crate::signaling::{MsgKind, SigMessage};

use super::world::{CsLeg, ImsWorld, Node};

impl ImsWorld {
    // --- BGCF -------------------------------------------------------------------

    pub(crate) fn on_bgcf(&mut self, sim: &mut Sim, ev: Event) {
        let Payload::Sig(msg) = ev.payload else {
            return;
        };
        let bgcf = ev.dst.clone();
        if msg.kind.is_response() {
            if let Some(m) = self.route_response(sim, &bgcf, msg) {
                self.consume_response(sim, &bgcf, m);
            }
            return;
        }

        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        let served = msg
            .header("X-SERVED")
            .unwrap_or(&msg.from.to_string())
            .to_string();
        match msg.kind {
            MsgKind::Invite => self.emit_cdr(
                sim,
                &bgcf,
                &flow,
                CdrEvent::SessionStart,
                &served,
                CdrRole::Originating,
                false,
            ),
            MsgKind::Bye => self.emit_cdr(
                sim,
                &bgcf,
                &flow,
                CdrEvent::SessionEnd,
                &served,
                CdrRole::Originating,
                false,
            ),
            _ => {}
        }

        let digits = msg
            .to
            .as_tel()
            .map(|t| t.digits().to_string())
            .or_else(|| msg.header("X-CS-DIGITS").map(str::to_string));
        let Some(digits) = digits else {
            self.reject_request(sim, &bgcf, &msg, 404, "NoBreakoutPath");
            return;
        };
        let Some(table) = self.breakout.clone() else {
            self.reject_request(sim, &bgcf, &msg, 404, "NoBreakoutPath");
            return;
        };

        let domain = self.domain_of(&bgcf);
        let hiding = self
            .icscf_of
            .get(&domain)
            .is_some_and(|i| self.icscf(i).thig_enabled);
        match bgcf_select(&digits, &table, hiding) {
            BgcfDecision::Local(mgcf) => {
                let mut out = msg;
                out.push_via(bgcf.clone());
                self.send_sig(sim, &bgcf, &mgcf, out);
            }
            BgcfDecision::Remote {
                domain: remote,
                via_icscf,
            } if remote == domain => {
                // Interworking happens in this network after all: hand
                // straight to the local gateway control function.
                let _ = via_icscf;
                let Some(mgcf) = self.mgcf_of.get(&remote).cloned() else {
                    self.reject_request(sim, &bgcf, &msg, 404, "NoBreakoutPath");
                    return;
                };
                let mut out = msg;
                out.push_via(bgcf.clone());
                self.send_sig(sim, &bgcf, &mgcf, out);
            }
            BgcfDecision::Remote {
                domain: remote,
                via_icscf,
            } => {
                // One inter-network hop at most: the far BGCF must break
                // out locally.
                if msg.header("X-BGCF-HOP").is_some() {
                    self.reject_request(sim, &bgcf, &msg, 404, "NoBreakoutPath");
                    return;
                }
                let Some(remote_bgcf) = self.bgcf_of.get(&remote).cloned() else {
                    self.reject_request(sim, &bgcf, &msg, 404, "NoBreakoutPath");
                    return;
                };
                let mut out = msg;
                out.set_header("X-BGCF-HOP", "1");
                out.push_via(bgcf.clone());
                if via_icscf {
                    if let Some(icscf) = self.icscf_of.get(&domain).cloned() {
                        out.set_route(vec![remote_bgcf]);
                        self.send_sig(sim, &bgcf, &icscf, out);
                        return;
                    }
                }
                self.send_sig(sim, &bgcf, &remote_bgcf, out);
            }
        }
    }

    // --- MGCF -------------------------------------------------------------------

    pub(crate) fn on_mgcf(&mut self, sim: &mut Sim, ev: Event) {
        match ev.payload {
            Payload::Sig(msg) => self.mgcf_sip(sim, &ev.dst, msg),
            Payload::Cs(frame) => self.mgcf_cs(sim, &ev.dst, frame),
            _ => {}
        }
    }

    fn mgcf_sip(&mut self, sim: &mut Sim, mgcf_id: &NodeId, msg: SigMessage) {
        if msg.kind.is_response() {
            if let Some(m) = self.route_response(sim, mgcf_id, msg) {
                self.consume_response(sim, mgcf_id, m);
            }
            return;
        }
        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        let (domain, family) = {
            let state = self.mgcf(mgcf_id);
            (state.domain.clone(), state.family)
        };
        match msg.kind {
            MsgKind::Invite => {
                let digits = msg
                    .to
                    .as_tel()
                    .map(|t| t.digits().to_string())
                    .or_else(|| msg.header("X-CS-DIGITS").map(str::to_string));
                let Some(digits) = digits else {
                    self.reject_request(sim, mgcf_id, &msg, 404, "UnknownDestination");
                    return;
                };
                let call_ref = self.next_call_ref();
                // The media gateway must be able to adapt the audio leg.
                if let Some(body) = &msg.body {
                    match mgw_adapt(body, &self.codec_table) {
                        Ok(adaptation) => {
                            let mgw = self.mgw_of.get(&domain).cloned();
                            if let Some(mgw) = mgw {
                                sim.note(
                                    mgcf_id,
                                    &mgw,
                                    "H248",
                                    format!("ref={call_ref} adapt={}", adaptation.describe()),
                                );
                            }
                        }
                        Err(e) => {
                            let reason = match e {
                                crate::interworking::InterworkError::UnsupportedCodec(_) => {
                                    "UnsupportedCodec"
                                }
                                _ => "NoAudioMedia",
                            };
                            self.reject_request(sim, mgcf_id, &msg, 488, reason);
                            return;
                        }
                    }
                }
                let signal = mgcf_convert(
                    SipGatewayEvent {
                        kind: MsgKind::Invite,
                        answers: None,
                    },
                    family,
                    &call_ref,
                    &digits,
                )
                .expect("INVITE maps to IAM");
                self.mgcf_mut(mgcf_id).calls.insert(
                    flow.clone(),
                    CsLeg {
                        call_ref: call_ref.clone(),
                        digits,
                        invite: Some(msg),
                        bye: None,
                    },
                );
                let frame = sgw_transport(signal, SgwDirection::ToIms);
                let Some(sgw) = self.sgw_of.get(&domain).cloned() else {
                    return;
                };
                let _ = sim.schedule(mgcf_id, &sgw, Payload::Cs(frame));
            }
            MsgKind::Bye => {
                let Some(leg) = self.mgcf(mgcf_id).calls.get(&flow).cloned() else {
                    let resp = self.make_reply(&msg, 200);
                    if let Some(m) = self.route_response(sim, mgcf_id, resp) {
                        self.consume_response(sim, mgcf_id, m);
                    }
                    return;
                };
                let signal = mgcf_convert(
                    SipGatewayEvent {
                        kind: MsgKind::Bye,
                        answers: None,
                    },
                    family,
                    &leg.call_ref,
                    &leg.digits,
                )
                .expect("BYE maps to REL");
                self.mgcf_mut(mgcf_id)
                    .calls
                    .get_mut(&flow)
                    .expect("leg present")
                    .bye = Some(msg);
                let frame = sgw_transport(signal, SgwDirection::ToIms);
                if let Some(sgw) = self.sgw_of.get(&domain).cloned() {
                    let _ = sim.schedule(mgcf_id, &sgw, Payload::Cs(frame));
                }
            }
            // The CS side has no ACK equivalent; the gateway absorbs it.
            MsgKind::Ack => {}
            _ => {}
        }
    }

    fn mgcf_cs(&mut self, sim: &mut Sim, mgcf_id: &NodeId, frame: crate::interworking::SgwFrame) {
        let call_ref = frame.inner.call_ref.clone();
        let leg = self
            .mgcf(mgcf_id)
            .calls
            .iter()
            .find(|(_, l)| l.call_ref == call_ref)
            .map(|(flow, l)| (flow.clone(), l.clone()));
        let Some((flow, leg)) = leg else {
            return;
        };
        match frame.inner.primitive {
            CsPrimitive::Acm => {
                if let Some(invite) = &leg.invite {
                    let resp = self.make_reply(invite, 180);
                    if let Some(m) = self.route_response(sim, mgcf_id, resp) {
                        self.consume_response(sim, mgcf_id, m);
                    }
                }
            }
            CsPrimitive::Anm => {
                if let Some(invite) = &leg.invite {
                    let resp = self.make_reply(invite, 200);
                    if let Some(m) = self.route_response(sim, mgcf_id, resp) {
                        self.consume_response(sim, mgcf_id, m);
                    }
                }
            }
            CsPrimitive::Rlc => {
                if let Some(bye) = &leg.bye {
                    let resp = self.make_reply(bye, 200);
                    if let Some(m) = self.route_response(sim, mgcf_id, resp) {
                        self.consume_response(sim, mgcf_id, m);
                    }
                }
                self.mgcf_mut(mgcf_id).calls.remove(&flow);
            }
            CsPrimitive::Iam | CsPrimitive::Rel => {}
        }
    }

    // --- SGW and the simulated CS peer ------------------------------------------------

    pub(crate) fn on_sgw(&mut self, sim: &mut Sim, ev: Event) {
        let Payload::Cs(frame) = ev.payload else {
            return;
        };
        let sgw = ev.dst.clone();
        match frame.transport {
            // IMS-side frame from the MGCF: convert onto the CS side.
            Transport::SctpLike => {
                if let Node::Sgw(state) = self.nodes.get_mut(&sgw).expect("sgw") {
                    state
                        .peer_mgcf
                        .insert(frame.inner.call_ref.clone(), ev.src.clone());
                }
                let mtp = sgw_transport(frame.inner, SgwDirection::ToCs);
                let _ = sim.schedule_local(&sgw, 1, Payload::Cs(mtp));
            }
            // CS-side frames: outbound primitives trigger the simulated
            // peer's answers; inbound ones convert back toward the MGCF.
            Transport::MtpLike => match frame.inner.primitive {
                CsPrimitive::Iam => {
                    let mut acm = frame.inner.clone();
                    acm.primitive = CsPrimitive::Acm;
                    let mut anm = frame.inner.clone();
                    anm.primitive = CsPrimitive::Anm;
                    let _ = sim.schedule_local(
                        &sgw,
                        1,
                        Payload::Cs(sgw_transport(acm, SgwDirection::ToCs)),
                    );
                    let _ = sim.schedule_local(
                        &sgw,
                        2,
                        Payload::Cs(sgw_transport(anm, SgwDirection::ToCs)),
                    );
                }
                CsPrimitive::Rel => {
                    let mut rlc = frame.inner.clone();
                    rlc.primitive = CsPrimitive::Rlc;
                    let _ = sim.schedule_local(
                        &sgw,
                        1,
                        Payload::Cs(sgw_transport(rlc, SgwDirection::ToCs)),
                    );
                }
                CsPrimitive::Acm | CsPrimitive::Anm | CsPrimitive::Rlc => {
                    let mgcf = match self.nodes.get(&sgw) {
                        Some(Node::Sgw(s)) => s.peer_mgcf.get(&frame.inner.call_ref).cloned(),
                        _ => None,
                    };
                    if let Some(mgcf) = mgcf {
                        let sctp = sgw_transport(frame.inner, SgwDirection::ToIms);
                        let _ = sim.schedule(&sgw, &mgcf, Payload::Cs(sctp));
                    }
                }
            },
        }
    }

    // --- small accessors ---------------------------------------------------------

    pub(crate) fn mgcf(&self, id: &NodeId) -> &super::world::MgcfState {
        match self.nodes.get(id) {
            Some(Node::Mgcf(m)) => m,
            _ => panic!("node {id} is not an MGCF"),
        }
    }

    pub(crate) fn mgcf_mut(&mut self, id: &NodeId) -> &mut super::world::MgcfState {
        match self.nodes.get_mut(id) {
            Some(Node::Mgcf(m)) => m,
            _ => panic!("node {id} is not an MGCF"),
        }
    }
}
