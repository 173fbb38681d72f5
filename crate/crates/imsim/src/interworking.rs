//! Breakout into the circuit-switched domain: BGCF selection and the
//! PSTN/CS gateway triple (MGCF signaling conversion, SGW transport
//! conversion, MGW media adaptation).

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::netsim::NodeId;
use crate::signaling::{MediaKind, MsgKind, SessionDescription};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InterworkError {
    #[error("duplicate breakout prefix `{0}`")]
    DuplicatePrefix(String),
    #[error("message kind {0} has no CS mapping")]
    UnmappableKind(String),
    #[error("codec `{0}` is not in the gateway codec table")]
    UnsupportedCodec(String),
    #[error("session carries no audio line")]
    NoAudioMedia,
}

/// Where a tel-addressed session leaves the IMS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BreakoutTarget {
    LocalMgcf(NodeId),
    RemoteBgcf(String),
}

/// Longest-prefix breakout table with a mandatory default, so selection
/// is total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BreakoutTable {
    /// Sorted by descending prefix length at construction.
    entries: Vec<(String, BreakoutTarget)>,
    default: BreakoutTarget,
}

impl BreakoutTable {
    pub fn new(
        mut entries: Vec<(String, BreakoutTarget)>,
        default: BreakoutTarget,
    ) -> Result<Self, InterworkError> {
        let mut seen = BTreeSet::new();
        for (prefix, _) in &entries {
            if !seen.insert(prefix.clone()) {
                return Err(InterworkError::DuplicatePrefix(prefix.clone()));
            }
        }
        entries.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));
        Ok(Self { entries, default })
    }

    pub fn select(&self, digits: &str) -> &BreakoutTarget {
        self.entries
            .iter()
            .find(|(prefix, _)| digits.starts_with(prefix.as_str()))
            .map(|(_, t)| t)
            .unwrap_or(&self.default)
    }
}

/// BGCF outcome: either hand over to a local MGCF or forward to the BGCF
/// of another network, through the I-CSCF when topology hiding is on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BgcfDecision {
    Local(NodeId),
    Remote { domain: String, via_icscf: bool },
}

pub fn bgcf_select(digits: &str, table: &BreakoutTable, hiding: bool) -> BgcfDecision {
    match table.select(digits) {
        BreakoutTarget::LocalMgcf(mgcf) => BgcfDecision::Local(mgcf.clone()),
        BreakoutTarget::RemoteBgcf(domain) => BgcfDecision::Remote {
            domain: domain.clone(),
            via_icscf: hiding,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CsFamily {
    IsupLike,
    BiccLike,
}

impl fmt::Display for CsFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CsFamily::IsupLike => write!(f, "isup"),
            CsFamily::BiccLike => write!(f, "bicc"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CsPrimitive {
    Iam,
    Acm,
    Anm,
    Rel,
    Rlc,
}

impl fmt::Display for CsPrimitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CsPrimitive::Iam => "IAM",
            CsPrimitive::Acm => "ACM",
            CsPrimitive::Anm => "ANM",
            CsPrimitive::Rel => "REL",
            CsPrimitive::Rlc => "RLC",
        };
        write!(f, "{s}")
    }
}

/// CS-side call-control primitive. The call_ref stays stable across every
/// primitive of one call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsSignal {
    pub family: CsFamily,
    pub primitive: CsPrimitive,
    pub call_ref: String,
    pub digits: String,
}

/// SIP event as seen by the gateway: the kind, and for responses the kind
/// of the request being answered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SipGatewayEvent {
    pub kind: MsgKind,
    pub answers: Option<MsgKind>,
}

/// The normative five-row mapping between SIP events and CS primitives.
/// BICC uses the identical mapping distinguished only by the family tag.
const SIP_CS_MAP: &[(SipGatewayEvent, CsPrimitive)] = &[
    (
        SipGatewayEvent {
            kind: MsgKind::Invite,
            answers: None,
        },
        CsPrimitive::Iam,
    ),
    (
        SipGatewayEvent {
            kind: MsgKind::Response(180),
            answers: Some(MsgKind::Invite),
        },
        CsPrimitive::Acm,
    ),
    (
        SipGatewayEvent {
            kind: MsgKind::Response(200),
            answers: Some(MsgKind::Invite),
        },
        CsPrimitive::Anm,
    ),
    (
        SipGatewayEvent {
            kind: MsgKind::Bye,
            answers: None,
        },
        CsPrimitive::Rel,
    ),
    (
        SipGatewayEvent {
            kind: MsgKind::Response(200),
            answers: Some(MsgKind::Bye),
        },
        CsPrimitive::Rlc,
    ),
];

/// Converts a SIP event into the CS primitive of the same call.
pub fn mgcf_convert(
    event: SipGatewayEvent,
    family: CsFamily,
    call_ref: &str,
    digits: &str,
) -> Result<CsSignal, InterworkError> {
    let primitive = SIP_CS_MAP
        .iter()
        .find(|(e, _)| *e == event)
        .map(|(_, p)| *p)
        .ok_or_else(|| InterworkError::UnmappableKind(event.kind.to_string()))?;
    Ok(CsSignal {
        family,
        primitive,
        call_ref: call_ref.to_string(),
        digits: digits.to_string(),
    })
}

/// Inverse direction: CS primitive back into the SIP event it stands for.
pub fn mgcf_convert_back(primitive: CsPrimitive) -> SipGatewayEvent {
    SIP_CS_MAP
        .iter()
        .find(|(_, p)| *p == primitive)
        .map(|(e, _)| *e)
        .expect("every primitive round-trips")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transport {
    MtpLike,
    SctpLike,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::MtpLike => write!(f, "MTP"),
            Transport::SctpLike => write!(f, "SCTP"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgwDirection {
    ToCs,
    ToIms,
}

/// A CS signal wrapped in its transport framing. IMS-side frames are
/// SCTP-like, CS-side frames are MTP-like.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SgwFrame {
    pub inner: CsSignal,
    pub transport: Transport,
}

/// Lower-level protocol conversion only: the inner signal is untouched.
pub fn sgw_transport(signal: CsSignal, direction: SgwDirection) -> SgwFrame {
    SgwFrame {
        transport: match direction {
            SgwDirection::ToCs => Transport::MtpLike,
            SgwDirection::ToIms => Transport::SctpLike,
        },
        inner: signal,
    }
}

/// Codecs the media gateway can handle, and which of them already are
/// PCM-compatible (no transcoding needed).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodecTable {
    known: BTreeSet<String>,
    pcm_compatible: BTreeSet<String>,
}

impl CodecTable {
    pub fn new(known: &[&str], pcm_compatible: &[&str]) -> Self {
        Self {
            known: known.iter().map(|s| s.to_string()).collect(),
            pcm_compatible: pcm_compatible.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Default for CodecTable {
    fn default() -> Self {
        Self::new(&["PCMA", "PCMU", "AMR", "G729", "EVS"], &["PCMA", "PCMU"])
    }
}

/// RTP-to-PCM adaptation descriptor for the audio leg of a session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaAdaptation {
    pub from_codec: String,
    pub passthrough: bool,
}

impl MediaAdaptation {
    pub fn describe(&self) -> String {
        if self.passthrough {
            format!("{}->PCM pass=1", self.from_codec)
        } else {
            format!("{}->PCM pass=0", self.from_codec)
        }
    }
}

/// Media adaptation for the first audio line of the session.
pub fn mgw_adapt(
    sdp: &SessionDescription,
    table: &CodecTable,
) -> Result<MediaAdaptation, InterworkError> {
    let audio = sdp
        .media()
        .iter()
        .find(|m| m.kind == MediaKind::Audio)
        .ok_or(InterworkError::NoAudioMedia)?;
    if !table.known.contains(&audio.codec) {
        return Err(InterworkError::UnsupportedCodec(audio.codec.clone()));
    }
    Ok(MediaAdaptation {
        passthrough: table.pcm_compatible.contains(&audio.codec),
        from_codec: audio.codec.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signaling::MediaLine;
    use proptest::prelude::*;

    fn table() -> BreakoutTable {
        BreakoutTable::new(
            vec![
                (
                    "1999".to_string(),
                    BreakoutTarget::LocalMgcf(NodeId::new("mgcf1")),
                ),
                (
                    "19".to_string(),
                    BreakoutTarget::RemoteBgcf("other.net".to_string()),
                ),
            ],
            BreakoutTarget::LocalMgcf(NodeId::new("mgcf-default")),
        )
        .unwrap()
    }

    #[test]
    fn longest_prefix_wins() {
        let t = table();
        assert_eq!(
            bgcf_select("19990001", &t, false),
            BgcfDecision::Local(NodeId::new("mgcf1"))
        );
        assert_eq!(
            bgcf_select("19110001", &t, false),
            BgcfDecision::Remote {
                domain: "other.net".to_string(),
                via_icscf: false
            }
        );
    }

    #[test]
    fn prefix_miss_falls_back_to_default() {
        let t = table();
        assert_eq!(
            bgcf_select("55510001", &t, false),
            BgcfDecision::Local(NodeId::new("mgcf-default"))
        );
    }

    #[test]
    fn hiding_inserts_icscf_hop_for_remote_targets() {
        let t = table();
        assert_eq!(
            bgcf_select("19110001", &t, true),
            BgcfDecision::Remote {
                domain: "other.net".to_string(),
                via_icscf: true
            }
        );
        // Hiding never affects a local breakout.
        assert_eq!(
            bgcf_select("19990001", &t, true),
            BgcfDecision::Local(NodeId::new("mgcf1"))
        );
    }

    #[test]
    fn duplicate_prefixes_rejected() {
        let err = BreakoutTable::new(
            vec![
                (
                    "19".to_string(),
                    BreakoutTarget::LocalMgcf(NodeId::new("a")),
                ),
                (
                    "19".to_string(),
                    BreakoutTarget::LocalMgcf(NodeId::new("b")),
                ),
            ],
            BreakoutTarget::LocalMgcf(NodeId::new("d")),
        )
        .unwrap_err();
        assert!(matches!(err, InterworkError::DuplicatePrefix(_)));
    }

    #[test]
    fn invite_maps_to_iam_with_digits() {
        let sig = mgcf_convert(
            SipGatewayEvent {
                kind: MsgKind::Invite,
                answers: None,
            },
            CsFamily::IsupLike,
            "c1",
            "1999",
        )
        .unwrap();
        assert_eq!(sig.primitive, CsPrimitive::Iam);
        assert_eq!(sig.digits, "1999");
    }

    #[test]
    fn bye_maps_to_rel_keeping_call_ref() {
        let sig = mgcf_convert(
            SipGatewayEvent {
                kind: MsgKind::Bye,
                answers: None,
            },
            CsFamily::BiccLike,
            "c1",
            "1999",
        )
        .unwrap();
        assert_eq!(sig.primitive, CsPrimitive::Rel);
        assert_eq!(sig.call_ref, "c1");
        assert_eq!(sig.family, CsFamily::BiccLike);
    }

    #[test]
    fn ack_is_unmappable() {
        let err = mgcf_convert(
            SipGatewayEvent {
                kind: MsgKind::Ack,
                answers: None,
            },
            CsFamily::IsupLike,
            "c1",
            "1999",
        )
        .unwrap_err();
        assert!(matches!(err, InterworkError::UnmappableKind(_)));
    }

    #[test]
    fn mapping_is_a_bijection_both_ways() {
        for (event, primitive) in SIP_CS_MAP {
            let sig = mgcf_convert(*event, CsFamily::IsupLike, "c9", "123").unwrap();
            assert_eq!(sig.primitive, *primitive);
            assert_eq!(mgcf_convert_back(*primitive), *event);
        }
        // Distinct events map to distinct primitives.
        let prims: BTreeSet<CsPrimitive> = SIP_CS_MAP.iter().map(|(_, p)| *p).collect();
        assert_eq!(prims.len(), SIP_CS_MAP.len());
    }

    #[test]
    fn sgw_wraps_by_direction_and_roundtrips() {
        let iam = CsSignal {
            family: CsFamily::IsupLike,
            primitive: CsPrimitive::Iam,
            call_ref: "c1".to_string(),
            digits: "1999".to_string(),
        };
        let cs = sgw_transport(iam.clone(), SgwDirection::ToCs);
        assert_eq!(cs.transport, Transport::MtpLike);
        assert_eq!(cs.inner, iam);
        let ims = sgw_transport(cs.inner, SgwDirection::ToIms);
        assert_eq!(ims.transport, Transport::SctpLike);
        assert_eq!(ims.inner, iam);
    }

    fn audio_sdp(codec: &str) -> SessionDescription {
        SessionDescription::new(vec![MediaLine {
            kind: MediaKind::Audio,
            codec: codec.to_string(),
            bandwidth_kbps: 64,
        }])
        .unwrap()
    }

    #[test]
    fn amr_transcodes_pcma_passes_through_unknown_fails() {
        let table = CodecTable::default();
        let amr = mgw_adapt(&audio_sdp("AMR"), &table).unwrap();
        assert!(!amr.passthrough);
        assert_eq!(amr.describe(), "AMR->PCM pass=0");

        let pcma = mgw_adapt(&audio_sdp("PCMA"), &table).unwrap();
        assert!(pcma.passthrough);

        assert!(matches!(
            mgw_adapt(&audio_sdp("XYZ"), &table),
            Err(InterworkError::UnsupportedCodec(_))
        ));

        let video_only = SessionDescription::new(vec![MediaLine {
            kind: MediaKind::Video,
            codec: "H263".to_string(),
            bandwidth_kbps: 384,
        }])
        .unwrap();
        assert!(matches!(
            mgw_adapt(&video_only, &table),
            Err(InterworkError::NoAudioMedia)
        ));
    }

    proptest! {
        /// The sorted-entries implementation must agree with a brute-force
        /// scan that maximizes matched prefix length.
        #[test]
        fn selection_matches_longest_prefix_oracle(
            prefixes in proptest::collection::btree_set("[0-9]{1,5}", 0..16),
            digits in "[0-9]{1,12}",
        ) {
            let entries: Vec<(String, BreakoutTarget)> = prefixes
                .iter()
                .map(|p| (p.clone(), BreakoutTarget::RemoteBgcf(format!("net-{p}"))))
                .collect();
            let default = BreakoutTarget::LocalMgcf(NodeId::new("mgcf-default"));
            let table = BreakoutTable::new(entries.clone(), default.clone()).unwrap();

            let oracle = entries
                .iter()
                .filter(|(p, _)| digits.starts_with(p.as_str()))
                .max_by_key(|(p, _)| p.len())
                .map(|(_, t)| t)
                .unwrap_or(&default);
            prop_assert_eq!(table.select(&digits), oracle);
        }
    }
}
