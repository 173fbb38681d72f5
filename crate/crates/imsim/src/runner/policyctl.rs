//! COPS-PR glue: provisioning at startup, enforcement-point evaluation
//! with the real-time outsourcing fallback, and the PDP node handler.

use crate::netsim::{Event, NodeId, Payload, SendOutcome, Sim};
use crate::policy::{pdp_decide, rules_for_role, CopsMsg, PdpVerdict, PepRole};
use crate::scenario::NodeKind;
use crate::signaling::SigMessage;

use super::world::{ImsWorld, Node, PendingPep, PepStage};

/// Outcome of an enforcement check as seen by the calling handler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum PepCheck {
    Pass,
    Deny(String),
    /// A real-time PDP query is in flight; the message is parked.
    Parked,
}

impl ImsWorld {
    /// Pushes the provisioned rule set from each domain PDP to the
    /// enforcement points it can reach. Runs once before the action list.
    pub(crate) fn provision_policies(&mut self, sim: &mut Sim) {
        if self.policies.is_empty() {
            return;
        }
        let plan: Vec<(NodeId, NodeId, PepRole)> = self
            .pdp_of
            .iter()
            .flat_map(|(domain, pdp)| {
                self.nodes.values().filter_map(move |node| match node {
                    Node::Pcscf(p) if p.domain == *domain => {
                        Some((pdp.clone(), p.id.clone(), PepRole::EdgeProxy))
                    }
                    Node::Scscf(s) if s.domain == *domain => {
                        Some((pdp.clone(), s.id.clone(), PepRole::ServingProxy))
                    }
                    _ => None,
                })
            })
            .collect();
        for (pdp, pep, role) in plan {
            let rules = rules_for_role(role, &self.policies);
            let _ = sim.schedule(&pdp, &pep, Payload::Cops(CopsMsg::Provision { rules }));
        }
    }

    /// Evaluates a bodied request at an enforcement point. Uses the
    /// provisioned cache when synced, otherwise issues a real-time query;
    /// an unreachable PDP blocks the session.
    pub(crate) fn pep_check(
        &mut self,
        sim: &mut Sim,
        node: &NodeId,
        role: PepRole,
        msg: &SigMessage,
        stage: PepStage,
    ) -> PepCheck {
        let Some(body) = msg.body.clone() else {
            return PepCheck::Pass;
        };
        let flow = msg.header("X-SESSION").unwrap_or_default().to_string();
        let served = msg
            .header("X-SERVED")
            .and_then(|s| crate::identity::Uri::parse(s).ok())
            .unwrap_or_else(|| msg.from.clone());

        let domain = self.domain_of(node);
        let pdp = self.pdp_of.get(&domain).cloned();
        let cache = match self.nodes.get(node) {
            Some(Node::Pcscf(p)) => p.pep.clone(),
            Some(Node::Scscf(s)) => s.pep.clone(),
            _ => return PepCheck::Pass,
        };

        if cache.synced || pdp.is_none() {
            let verdict = pdp_decide(&body, &cache.rules, &served);
            return self.apply_verdict(&flow, verdict);
        }

        // Cache not provisioned: outsource the decision in real time.
        let pdp = pdp.unwrap();
        let query = CopsMsg::Query {
            flow: flow.clone(),
            user: served,
            sdp: body,
            role,
        };
        match sim.schedule(node, &pdp, Payload::Cops(query)) {
            Ok(SendOutcome::Scheduled) => {
                self.pending_pep.insert(
                    pep_key(&flow, node),
                    PendingPep {
                        node: node.clone(),
                        msg: msg.clone(),
                        stage,
                    },
                );
                PepCheck::Parked
            }
            _ => PepCheck::Deny("PdpUnreachable".to_string()),
        }
    }

    fn apply_verdict(&mut self, flow: &str, verdict: PdpVerdict) -> PepCheck {
        match verdict {
            PdpVerdict::Permit(dscp) => {
                if let Some(f) = self.flows.get_mut(flow) {
                    f.dscp.get_or_insert(dscp);
                }
                PepCheck::Pass
            }
            PdpVerdict::Deny(reason) => PepCheck::Deny(reason.to_string()),
        }
    }

    /// PDP node: answers outsourced queries against the full rule set.
    pub(crate) fn on_pdp(&mut self, sim: &mut Sim, ev: Event) {
        let Payload::Cops(CopsMsg::Query {
            flow,
            user,
            sdp,
            role,
        }) = ev.payload
        else {
            return;
        };
        let rules = rules_for_role(role, &self.policies);
        let verdict = pdp_decide(&sdp, &rules, &user);
        let _ = sim.schedule(
            &ev.dst,
            &ev.src,
            Payload::Cops(CopsMsg::Decision { flow, verdict }),
        );
    }

    /// COPS traffic arriving at an enforcement point (P- or S-CSCF).
    pub(crate) fn on_pep_cops(&mut self, sim: &mut Sim, ev: Event) {
        let Payload::Cops(cops) = ev.payload else {
            return;
        };
        match cops {
            CopsMsg::Provision { rules } => {
                let now = sim.now();
                match self.nodes.get_mut(&ev.dst) {
                    Some(Node::Pcscf(p)) => p.pep.provision(rules, now),
                    Some(Node::Scscf(s)) => s.pep.provision(rules, now),
                    _ => {}
                }
            }
            CopsMsg::Decision { flow, verdict } => {
                let key = pep_key(&flow, &ev.dst);
                let Some(parked) = self.pending_pep.remove(&key) else {
                    return;
                };
                match self.apply_verdict(&flow, verdict) {
                    PepCheck::Pass => self.resume_after_pep(sim, parked),
                    PepCheck::Deny(reason) => {
                        let node = parked.node.clone();
                        self.reject_request(sim, &node, &parked.msg, deny_code(&reason), &reason);
                    }
                    PepCheck::Parked => unreachable!("verdicts never park"),
                }
            }
            CopsMsg::Query { .. } => {}
        }
    }

    fn resume_after_pep(&mut self, sim: &mut Sim, parked: PendingPep) {
        match parked.stage {
            PepStage::PcscfFromTerminal => {
                self.pcscf_forward_from_terminal(sim, &parked.node, parked.msg)
            }
            PepStage::PcscfToTerminal(_) => {
                self.pcscf_deliver_to_terminal(sim, &parked.node, parked.msg)
            }
            PepStage::ScscfPhase(_) => {
                let node = parked.node.clone();
                self.handle_scscf_request(sim, &node, parked.msg, true);
            }
        }
    }
}

pub(crate) fn pep_key(flow: &str, node: &NodeId) -> String {
    format!("{flow}@{node}")
}

pub(crate) fn deny_code(reason: &str) -> u16 {
    match reason {
        "UserUnavailable" => 480,
        "UnsupportedCodec" | "NoAudioMedia" => 488,
        "UnknownDestination" | "NoBreakoutPath" | "UnknownConference" => 404,
        _ => 403,
    }
}

impl ImsWorld {
    /// Builds and routes the rejection for a request at `node`. The DENY
    /// trace entry pins the refusal to the node that made it.
    pub(crate) fn reject_request(
        &mut self,
        sim: &mut Sim,
        node: &NodeId,
        req: &SigMessage,
        code: u16,
        reason: &str,
    ) {
        let flow = req.header("X-SESSION").unwrap_or_default();
        sim.note(
            node,
            node,
            "DENY",
            format!("flow={flow} code={code} reason={reason}"),
        );
        let mut resp = self.make_reply(req, code);
        resp.set_header("X-DENY", reason);
        if let Some(final_msg) = self.route_response(sim, node, resp) {
            // The request originated here; surface the outcome directly.
            self.consume_response(sim, node, final_msg);
        }
    }

    pub(crate) fn is_pep_cops(&self, ev: &Event) -> bool {
        matches!(ev.payload, Payload::Cops(_))
            && matches!(
                self.kind(&ev.dst),
                Some(NodeKind::Pcscf) | Some(NodeKind::Scscf)
            )
    }
}
