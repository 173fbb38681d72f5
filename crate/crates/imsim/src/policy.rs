//! PDP/PEP policy control: user-specific and network-wide session rules,
//! the COPS-style provisioning/outsourcing hybrid, and DSCP marking.
//!
//! The P-CSCF enforces only network-wide rules; the S-CSCF enforces both
//! user-specific and network-wide rules. Enforcement points use their
//! provisioned cache when it is synced and fall back to a real-time PDP
//! query otherwise; an unreachable PDP blocks the session (fail closed).

use std::collections::BTreeSet;
use std::fmt;

use crate::identity::Uri;
use crate::signaling::{MediaKind, SessionDescription};

/// DSCP class table used when a session is permitted. The field is the
/// full 8-bit code carried in the IP ToS/Traffic Class octet.
pub const DSCP_CLASS_TABLE: &[(MediaKind, u8)] = &[
    (MediaKind::Audio, 46),
    (MediaKind::Video, 34),
    (MediaKind::Data, 0),
];

pub fn dscp_for(kind: MediaKind) -> DscpField {
    let code = DSCP_CLASS_TABLE
        .iter()
        .find(|(k, _)| *k == kind)
        .map(|(_, c)| *c)
        .unwrap_or(0);
    DscpField(code)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct DscpField(pub u8);

impl fmt::Display for DscpField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PolicyScope {
    UserSpecific(Uri),
    NetworkWide,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyRule {
    pub scope: PolicyScope,
    pub allow_media: BTreeSet<MediaKind>,
    pub allow_codecs: Option<BTreeSet<String>>,
    pub max_bandwidth_kbps: Option<u32>,
}

impl PolicyRule {
    fn applies_to(&self, user: &Uri) -> bool {
        match &self.scope {
            PolicyScope::NetworkWide => true,
            PolicyScope::UserSpecific(u) => u == user,
        }
    }

    pub fn is_network_wide(&self) -> bool {
        matches!(self.scope, PolicyScope::NetworkWide)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DenyReason {
    MediaNotSubscribed,
    CodecNotAllowed,
    BandwidthExceeded,
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DenyReason::MediaNotSubscribed => "MediaNotSubscribed",
            DenyReason::CodecNotAllowed => "CodecNotAllowed",
            DenyReason::BandwidthExceeded => "BandwidthExceeded",
        };
        write!(f, "{s}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PdpVerdict {
    Permit(DscpField),
    Deny(DenyReason),
}

/// Authorizes an SDP body against every applicable rule. Deny wins as
/// soon as one rule excludes a media kind, a codec, or the session
/// bandwidth; a permit carries the DSCP code of the first media line.
pub fn pdp_decide(sdp: &SessionDescription, rules: &[PolicyRule], user: &Uri) -> PdpVerdict {
    let applicable: Vec<&PolicyRule> = rules.iter().filter(|r| r.applies_to(user)).collect();
    for line in sdp.media() {
        for rule in &applicable {
            if !rule.allow_media.contains(&line.kind) {
                return PdpVerdict::Deny(DenyReason::MediaNotSubscribed);
            }
        }
    }
    for line in sdp.media() {
        for rule in &applicable {
            if let Some(codecs) = &rule.allow_codecs {
                if !codecs.contains(&line.codec) {
                    return PdpVerdict::Deny(DenyReason::CodecNotAllowed);
                }
            }
        }
    }
    let total = sdp.total_bandwidth_kbps();
    for rule in &applicable {
        if let Some(cap) = rule.max_bandwidth_kbps {
            if total > u64::from(cap) {
                return PdpVerdict::Deny(DenyReason::BandwidthExceeded);
            }
        }
    }
    PdpVerdict::Permit(dscp_for(sdp.media()[0].kind))
}

/// Which rules an enforcement point is entitled to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PepRole {
    /// P-CSCF: network-wide rules only.
    EdgeProxy,
    /// S-CSCF: user-specific and network-wide rules.
    ServingProxy,
}

pub fn rules_for_role(role: PepRole, rules: &[PolicyRule]) -> Vec<PolicyRule> {
    rules
        .iter()
        .filter(|r| match role {
            PepRole::EdgeProxy => r.is_network_wide(),
            PepRole::ServingProxy => true,
        })
        .cloned()
        .collect()
}

/// Provisioned rule cache held by each enforcement point.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PepCache {
    pub rules: Vec<PolicyRule>,
    pub synced: bool,
    pub last_sync_tick: u64,
}

impl PepCache {
    pub fn provision(&mut self, rules: Vec<PolicyRule>, tick: u64) {
        self.rules = rules;
        self.synced = true;
        self.last_sync_tick = tick;
    }
}

/// COPS-style exchange between PDP and PEP nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CopsMsg {
    /// Provisioning half: the PDP pushes the rule set a PEP may evaluate.
    Provision {
        rules: Vec<PolicyRule>,
    },
    /// Outsourcing half: real-time decision request for one session.
    Query {
        flow: String,
        user: Uri,
        sdp: SessionDescription,
        role: PepRole,
    },
    Decision {
        flow: String,
        verdict: PdpVerdict,
    },
}

impl CopsMsg {
    pub fn label(&self) -> &'static str {
        match self {
            CopsMsg::Provision { .. } => "PROVISION",
            CopsMsg::Query { .. } => "QUERY",
            CopsMsg::Decision { .. } => "DECISION",
        }
    }

    pub fn summary(&self) -> String {
        match self {
            CopsMsg::Provision { rules } => format!("rules={}", rules.len()),
            CopsMsg::Query { flow, user, .. } => format!("flow={flow} user={user}"),
            CopsMsg::Decision { flow, verdict } => match verdict {
                PdpVerdict::Permit(d) => format!("flow={flow} verdict=permit dscp={d}"),
                PdpVerdict::Deny(r) => format!("flow={flow} verdict=deny reason={r}"),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signaling::MediaLine;
    use proptest::prelude::*;

    fn sdp(lines: &[(MediaKind, &str, u32)]) -> SessionDescription {
        SessionDescription::new(
            lines
                .iter()
                .map(|(k, c, b)| MediaLine {
                    kind: *k,
                    codec: c.to_string(),
                    bandwidth_kbps: *b,
                })
                .collect(),
        )
        .unwrap()
    }

    fn user() -> Uri {
        Uri::parse("sip:john@home.net").unwrap()
    }

    fn audio_only_rule() -> PolicyRule {
        PolicyRule {
            scope: PolicyScope::UserSpecific(user()),
            allow_media: [MediaKind::Audio].into(),
            allow_codecs: None,
            max_bandwidth_kbps: None,
        }
    }

    #[test]
    fn video_session_denied_for_audio_only_subscriber() {
        let rules = vec![audio_only_rule()];
        let verdict = pdp_decide(
            &sdp(&[
                (MediaKind::Audio, "PCMA", 64),
                (MediaKind::Video, "H263", 384),
            ]),
            &rules,
            &user(),
        );
        assert_eq!(verdict, PdpVerdict::Deny(DenyReason::MediaNotSubscribed));
    }

    #[test]
    fn audio_session_permitted_under_audio_only_rule() {
        let rules = vec![audio_only_rule()];
        let verdict = pdp_decide(&sdp(&[(MediaKind::Audio, "PCMA", 64)]), &rules, &user());
        assert_eq!(verdict, PdpVerdict::Permit(DscpField(46)));
    }

    #[test]
    fn bandwidth_cap_is_a_threshold() {
        let rule = PolicyRule {
            scope: PolicyScope::NetworkWide,
            allow_media: [MediaKind::Audio, MediaKind::Video].into(),
            allow_codecs: None,
            max_bandwidth_kbps: Some(1000),
        };
        let over = sdp(&[(MediaKind::Video, "H263", 2000)]);
        assert_eq!(
            pdp_decide(&over, std::slice::from_ref(&rule), &user()),
            PdpVerdict::Deny(DenyReason::BandwidthExceeded)
        );
        let at = sdp(&[(MediaKind::Video, "H263", 1000)]);
        assert!(matches!(
            pdp_decide(&at, &[rule], &user()),
            PdpVerdict::Permit(_)
        ));
    }

    #[test]
    fn codec_allow_list() {
        let rule = PolicyRule {
            scope: PolicyScope::NetworkWide,
            allow_media: [MediaKind::Audio].into(),
            allow_codecs: Some(["PCMA".to_string()].into()),
            max_bandwidth_kbps: None,
        };
        assert_eq!(
            pdp_decide(&sdp(&[(MediaKind::Audio, "XYZ", 64)]), &[rule], &user()),
            PdpVerdict::Deny(DenyReason::CodecNotAllowed)
        );
    }

    #[test]
    fn dscp_class_table_fixture() {
        assert_eq!(dscp_for(MediaKind::Audio), DscpField(46));
        assert_eq!(dscp_for(MediaKind::Video), DscpField(34));
        assert_eq!(dscp_for(MediaKind::Data), DscpField(0));
        let data = sdp(&[(MediaKind::Data, "T38", 64)]);
        assert_eq!(
            pdp_decide(&data, &[], &user()),
            PdpVerdict::Permit(DscpField(0))
        );
    }

    #[test]
    fn edge_proxy_sees_only_network_rules() {
        let rules = vec![
            audio_only_rule(),
            PolicyRule {
                scope: PolicyScope::NetworkWide,
                allow_media: [MediaKind::Audio, MediaKind::Video, MediaKind::Data].into(),
                allow_codecs: None,
                max_bandwidth_kbps: None,
            },
        ];
        assert_eq!(rules_for_role(PepRole::EdgeProxy, &rules).len(), 1);
        assert_eq!(rules_for_role(PepRole::ServingProxy, &rules).len(), 2);
    }

    fn arb_rule() -> impl Strategy<Value = PolicyRule> {
        (
            proptest::bool::ANY,
            proptest::collection::btree_set(
                prop_oneof![
                    Just(MediaKind::Audio),
                    Just(MediaKind::Video),
                    Just(MediaKind::Data)
                ],
                0..3,
            ),
            proptest::option::of(1u32..2000),
        )
            .prop_map(|(network, media, bw)| PolicyRule {
                scope: if network {
                    PolicyScope::NetworkWide
                } else {
                    PolicyScope::UserSpecific(Uri::parse("sip:john@home.net").unwrap())
                },
                allow_media: media,
                allow_codecs: None,
                max_bandwidth_kbps: bw,
            })
    }

    proptest! {
        /// Removing a rule can only widen what is allowed.
        #[test]
        fn removing_a_rule_never_turns_permit_into_deny(
            rules in proptest::collection::vec(arb_rule(), 1..6),
            drop_index in 0usize..6,
        ) {
            let sdp = sdp(&[(MediaKind::Audio, "PCMA", 64)]);
            let verdict = pdp_decide(&sdp, &rules, &user());
            if matches!(verdict, PdpVerdict::Permit(_)) {
                let mut fewer = rules.clone();
                fewer.remove(drop_index % fewer.len());
                prop_assert!(matches!(pdp_decide(&sdp, &fewer, &user()), PdpVerdict::Permit(_)));
            }
        }
    }
}
