//! Media-function control: conference requests over Mr, commands over Mp
//! and the MRFP state machine driven by them.

use std::collections::BTreeSet;

use crate::charging::{CdrEvent, CdrRole};
use crate::identity::Uri;
use crate::media::{mrfc_control, mrfp_apply, MrfcRequest, MrfpCommand, MrfpVerb};
use crate::netsim::{Event, NodeId, Payload, Sim};
use crate::signaling::{MediaKind, MsgKind, SigMessage};

use super::world::{ImsWorld, Node};

impl ImsWorld {
    // --- action entry -------------------------------------------------------

    /// User-originated conference request: rides a MESSAGE from the
    /// registered terminal through P- and S-CSCF onto the Mr interface.
    pub(crate) fn start_conf_request(&mut self, sim: &mut Sim, user: &str, conf: &str, req: &str) {
        let now = sim.now();
        let info = self.users[user].clone();
        let public = info.identity.public_ids[0].clone();
        let Some(binding) = self.bindings_of(user, now).first().cloned() else {
            sim.note(
                &NodeId::new("-"),
                &NodeId::new("-"),
                "CONF",
                format!("conf={conf} user={user} skipped (not registered)"),
            );
            return;
        };
        let terminal = binding.contact.clone();
        let Some(pcscf) = self.pcscf_table.get(&terminal).cloned() else {
            return;
        };
        let seq = self.next_sip_seq(&terminal);
        let to = Uri::parse(&format!("sip:mrf@{}", info.identity.home_domain))
            .expect("well-formed media-function uri");
        let mut msg = SigMessage::new(MsgKind::Message, seq, public.clone(), to);
        msg.set_header("X-SESSION", conf);
        msg.set_header("X-DIR", "originating");
        msg.set_header("X-SERVED", &public.to_string());
        msg.set_header("X-MR-REQ", req);
        msg.push_via(terminal.clone());
        self.send_access_aware(sim, &terminal, &pcscf, msg);
    }

    /// Operator announcement: injected at the MRFC itself, no user leg.
    pub(crate) fn start_announce(&mut self, sim: &mut Sim, conf: &str, text: &str) {
        let Some(mrfc) = self.mrfc_of.values().next().cloned() else {
            sim.note(
                &NodeId::new("-"),
                &NodeId::new("-"),
                "CONF",
                format!("conf={conf} announce skipped (no MRFC)"),
            );
            return;
        };
        let domain = self.domain_of(&mrfc);
        let uri = Uri::parse(&format!("sip:{mrfc}@{domain}")).expect("node uri");
        let seq = self.next_sip_seq(&mrfc);
        let mut msg = SigMessage::new(MsgKind::Message, seq, uri.clone(), uri);
        msg.set_header("X-SESSION", conf);
        msg.set_header("X-MR-REQ", &format!("announce;{text}"));
        let _ = sim.schedule_local(&mrfc, 1, Payload::Sig(msg));
    }

    // --- MRFC ------------------------------------------------------------------

    pub(crate) fn on_mrfc(&mut self, sim: &mut Sim, ev: Event) {
        let Payload::Sig(msg) = ev.payload else {
            return;
        };
        let mrfc = ev.dst.clone();
        if msg.kind.is_response() {
            if let Some(m) = self.route_response(sim, &mrfc, msg) {
                self.consume_response(sim, &mrfc, m);
            }
            return;
        }
        let Some(req_text) = msg.header("X-MR-REQ").map(str::to_string) else {
            return;
        };
        let conf = msg.header("X-SESSION").unwrap_or_default().to_string();
        let from_self = ev.src == mrfc;

        // Every MRFC request produces exactly one charging record.
        self.emit_cdr_media(sim, &mrfc, &conf, &msg.from.to_string());

        let request = match parse_mr_request(&req_text, &conf, &msg.from) {
            Some(r) => r,
            None => {
                if !from_self {
                    self.reject_request(sim, &mrfc, &msg, 404, "UnknownConference");
                }
                return;
            }
        };

        let outcome = {
            let Node::Mrfc(node) = self.nodes.get_mut(&mrfc).expect("mrfc") else {
                unreachable!()
            };
            mrfc_control(&mut node.ctl, &request)
        };
        match outcome {
            Err(_) => {
                if !from_self {
                    self.reject_request(sim, &mrfc, &msg, 404, "UnknownConference");
                }
            }
            Ok(out) => {
                if let Some(verdict) = out.floor {
                    sim.note(
                        &mrfc,
                        &mrfc,
                        "FLOOR",
                        format!("flow={conf} user={} verdict={verdict}", msg.from),
                    );
                }
                if out.conference_deleted {
                    sim.note(&mrfc, &mrfc, "CONF", format!("flow={conf} deleted"));
                }
                let domain = self.domain_of(&mrfc);
                if let Some(mrfp) = self.mrfp_of.get(&domain).cloned() {
                    for cmd in out.commands {
                        let mp = self.mp_message(&mrfc, &mrfp, &conf, &cmd);
                        let _ = sim.schedule(&mrfc, &mrfp, Payload::Sig(mp));
                    }
                }
                if !from_self {
                    let resp = self.make_reply(&msg, 200);
                    if let Some(m) = self.route_response(sim, &mrfc, resp) {
                        self.consume_response(sim, &mrfc, m);
                    }
                }
            }
        }
    }

    fn emit_cdr_media(&mut self, sim: &Sim, mrfc: &NodeId, conf: &str, served: &str) {
        self.emit_cdr(
            sim,
            mrfc,
            conf,
            CdrEvent::MediaControl,
            served,
            CdrRole::None,
            false,
        );
    }

    /// Mp commands ride the common wire format as MESSAGE records with
    /// `MP-*` headers.
    fn mp_message(
        &mut self,
        mrfc: &NodeId,
        mrfp: &NodeId,
        conf: &str,
        cmd: &MrfpCommand,
    ) -> SigMessage {
        let domain = self.domain_of(mrfc);
        let from = Uri::parse(&format!("sip:{mrfc}@{domain}")).expect("node uri");
        let to = Uri::parse(&format!("sip:{mrfp}@{domain}")).expect("node uri");
        let seq = self.next_sip_seq(mrfc);
        let mut msg = SigMessage::new(MsgKind::Message, seq, from, to);
        msg.set_header("X-SESSION", conf);
        msg.set_header("MP-VERB", &cmd.verb.to_string());
        msg.set_header("MP-CONF", &cmd.conf);
        msg.set_header("MP-ARGS", &cmd.args_string());
        msg
    }

    // --- MRFP ------------------------------------------------------------------

    pub(crate) fn on_mrfp(&mut self, sim: &mut Sim, ev: Event) {
        let Payload::Sig(msg) = ev.payload else {
            return;
        };
        let mrfp = ev.dst.clone();
        let Some(cmd) = decode_mp_message(&msg) else {
            return;
        };
        let result = {
            let Node::Mrfp(node) = self.nodes.get_mut(&mrfp).expect("mrfp") else {
                unreachable!()
            };
            mrfp_apply(&mut node.state, &cmd)
        };
        if let Err(e) = result {
            sim.note(&mrfp, &mrfp, "MP-ERROR", e.to_string());
        }
    }
}

fn parse_mr_request(text: &str, conf: &str, from: &Uri) -> Option<MrfcRequest> {
    let mut parts = text.splitn(2, ';');
    let verb = parts.next()?;
    let arg = parts.next().unwrap_or("");
    Some(match verb {
        "join" => {
            let media: BTreeSet<MediaKind> = arg.split(',').filter_map(MediaKind::parse).collect();
            MrfcRequest::Join {
                conf: conf.to_string(),
                user: from.clone(),
                media: if media.is_empty() {
                    [MediaKind::Audio].into()
                } else {
                    media
                },
            }
        }
        "leave" => MrfcRequest::Leave {
            conf: conf.to_string(),
            user: from.clone(),
        },
        "announce" => MrfcRequest::Announce {
            conf: conf.to_string(),
            text: arg.to_string(),
        },
        "floor-request" => MrfcRequest::FloorRequest {
            conf: conf.to_string(),
            user: from.clone(),
        },
        "floor-release" => MrfcRequest::FloorRelease {
            conf: conf.to_string(),
            user: from.clone(),
        },
        _ => return None,
    })
}

fn decode_mp_message(msg: &SigMessage) -> Option<MrfpCommand> {
    let verb = match msg.header("MP-VERB")? {
        "add-stream" => MrfpVerb::AddStream,
        "remove-stream" => MrfpVerb::RemoveStream,
        "mix" => MrfpVerb::Mix,
        "play-announcement" => MrfpVerb::PlayAnnouncement,
        "grant-floor" => MrfpVerb::GrantFloor,
        "revoke-floor" => MrfpVerb::RevokeFloor,
        _ => return None,
    };
    let conf = msg.header("MP-CONF")?.to_string();
    let args = msg.header("MP-ARGS").unwrap_or_default();
    let mut participant = None;
    let mut media = BTreeSet::new();
    let mut text = None;
    match verb {
        MrfpVerb::AddStream => {
            let mut parts = args.splitn(2, ';');
            participant = parts.next().and_then(|u| Uri::parse(u).ok());
            if let Some(kinds) = parts.next() {
                media = kinds.split(',').filter_map(MediaKind::parse).collect();
            }
        }
        MrfpVerb::RemoveStream | MrfpVerb::GrantFloor | MrfpVerb::RevokeFloor => {
            participant = Uri::parse(args).ok();
        }
        MrfpVerb::PlayAnnouncement => {
            text = Some(args.to_string());
        }
        MrfpVerb::Mix => {}
    }
    Some(MrfpCommand {
        conf,
        verb,
        participant,
        media,
        text,
    })
}
