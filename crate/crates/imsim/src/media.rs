//! MRFC/MRFP media resources: conference mixing, announcements and FIFO
//! floor control.
//!
//! The controller (MRFC) interprets requests arriving over Mr, keeps the
//! authoritative conference view and emits the minimal command list for
//! the processor (MRFP) over Mp. The MRFP applies commands one by one;
//! replaying a command log reproduces its state exactly.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::identity::Uri;
use crate::signaling::MediaKind;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MediaError {
    #[error("unknown conference `{0}`")]
    UnknownConference(String),
    #[error("invalid MRFP transition: {0}")]
    InvalidTransition(String),
}

/// One conference as both MRFC and MRFP see it.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConferenceState {
    pub participants: Vec<Uri>,
    pub participant_media: BTreeMap<String, BTreeSet<MediaKind>>,
    pub floor_holder: Option<Uri>,
    /// Single mixed output present whenever two or more participants are
    /// mixed; the descriptor is the union of participant media kinds.
    pub mixed_streams: Vec<BTreeSet<MediaKind>>,
}

impl ConferenceState {
    pub fn is_participant(&self, user: &Uri) -> bool {
        self.participants.contains(user)
    }

    pub fn mix_descriptor(&self) -> Option<BTreeSet<MediaKind>> {
        if self.participants.len() < 2 {
            return None;
        }
        let mut union = BTreeSet::new();
        for kinds in self.participant_media.values() {
            union.extend(kinds.iter().copied());
        }
        Some(union)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrfpVerb {
    AddStream,
    RemoveStream,
    Mix,
    PlayAnnouncement,
    GrantFloor,
    RevokeFloor,
}

impl fmt::Display for MrfpVerb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MrfpVerb::AddStream => "add-stream",
            MrfpVerb::RemoveStream => "remove-stream",
            MrfpVerb::Mix => "mix",
            MrfpVerb::PlayAnnouncement => "play-announcement",
            MrfpVerb::GrantFloor => "grant-floor",
            MrfpVerb::RevokeFloor => "revoke-floor",
        };
        write!(f, "{s}")
    }
}

/// Command carried on the Mp reference point. On the wire it rides the
/// common format as a MESSAGE with `MP-VERB`/`MP-CONF`/`MP-ARGS` headers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MrfpCommand {
    pub conf: String,
    pub verb: MrfpVerb,
    pub participant: Option<Uri>,
    pub media: BTreeSet<MediaKind>,
    pub text: Option<String>,
}

impl MrfpCommand {
    fn simple(conf: &str, verb: MrfpVerb, participant: Option<Uri>) -> Self {
        Self {
            conf: conf.to_string(),
            verb,
            participant,
            media: BTreeSet::new(),
            text: None,
        }
    }

    /// `MP-ARGS` header value.
    pub fn args_string(&self) -> String {
        let mut parts = Vec::new();
        if let Some(p) = &self.participant {
            parts.push(p.to_string());
        }
        if !self.media.is_empty() {
            let kinds: Vec<String> = self.media.iter().map(|k| k.to_string()).collect();
            parts.push(kinds.join(","));
        }
        if let Some(t) = &self.text {
            parts.push(t.clone());
        }
        parts.join(";")
    }
}

/// Request kinds the MRFC accepts from the S-CSCF or an AS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MrfcRequest {
    Join {
        conf: String,
        user: Uri,
        media: BTreeSet<MediaKind>,
    },
    Leave {
        conf: String,
        user: Uri,
    },
    Announce {
        conf: String,
        text: String,
    },
    FloorRequest {
        conf: String,
        user: Uri,
    },
    FloorRelease {
        conf: String,
        user: Uri,
    },
}

impl MrfcRequest {
    pub fn conf(&self) -> &str {
        match self {
            MrfcRequest::Join { conf, .. }
            | MrfcRequest::Leave { conf, .. }
            | MrfcRequest::Announce { conf, .. }
            | MrfcRequest::FloorRequest { conf, .. }
            | MrfcRequest::FloorRelease { conf, .. } => conf,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloorOutcome {
    Granted,
    Queued,
    Denied,
}

impl fmt::Display for FloorOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FloorOutcome::Granted => "granted",
            FloorOutcome::Queued => "queued",
            FloorOutcome::Denied => "denied",
        };
        write!(f, "{s}")
    }
}

/// MRFC-side record: authoritative state plus the FIFO floor queue.
#[derive(Debug, Clone, Default)]
pub struct ConfControl {
    pub state: ConferenceState,
    pub floor_queue: VecDeque<Uri>,
}

/// Controller state.
#[derive(Debug, Clone, Default)]
pub struct MrfcState {
    pub conferences: BTreeMap<String, ConfControl>,
}

/// FIFO floor discipline. Non-participants are denied; a free floor is
/// granted immediately; otherwise the requester queues.
pub fn floor_request(ctl: &mut ConfControl, requester: &Uri) -> FloorOutcome {
    if !ctl.state.is_participant(requester) {
        return FloorOutcome::Denied;
    }
    match &ctl.state.floor_holder {
        None => {
            ctl.state.floor_holder = Some(requester.clone());
            FloorOutcome::Granted
        }
        Some(holder) if holder == requester => FloorOutcome::Granted,
        Some(_) => {
            if !ctl.floor_queue.contains(requester) {
                ctl.floor_queue.push_back(requester.clone());
            }
            FloorOutcome::Queued
        }
    }
}

/// Outcome of one MRFC request: the commands for the MRFP plus the floor
/// verdict when the request was floor control.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MrfcOutcome {
    pub commands: Vec<MrfpCommand>,
    pub floor: Option<FloorOutcome>,
    pub conference_deleted: bool,
}

/// Interprets one request and emits the minimal command list realizing
/// it: streams are added or removed individually and a mix command is
/// issued only when the mixed descriptor actually changes.
pub fn mrfc_control(
    state: &mut MrfcState,
    request: &MrfcRequest,
) -> Result<MrfcOutcome, MediaError> {
    let mut outcome = MrfcOutcome {
        commands: Vec::new(),
        floor: None,
        conference_deleted: false,
    };
    match request {
        MrfcRequest::Join { conf, user, media } => {
            let ctl = state.conferences.entry(conf.clone()).or_default();
            if ctl.state.is_participant(user) {
                return Ok(outcome); // rejoin is a no-op
            }
            let before = ctl.state.mix_descriptor();
            ctl.state.participants.push(user.clone());
            ctl.state
                .participant_media
                .insert(user.to_string(), media.clone());
            outcome.commands.push(MrfpCommand {
                conf: conf.clone(),
                verb: MrfpVerb::AddStream,
                participant: Some(user.clone()),
                media: media.clone(),
                text: None,
            });
            let after = ctl.state.mix_descriptor();
            if after != before {
                if let Some(mix) = after {
                    ctl.state.mixed_streams = vec![mix];
                    outcome
                        .commands
                        .push(MrfpCommand::simple(conf, MrfpVerb::Mix, None));
                }
            }
        }
        MrfcRequest::Leave { conf, user } => {
            let ctl = state
                .conferences
                .get_mut(conf)
                .ok_or_else(|| MediaError::UnknownConference(conf.clone()))?;
            if !ctl.state.is_participant(user) {
                return Ok(outcome);
            }
            if ctl.state.floor_holder.as_ref() == Some(user) {
                outcome.commands.push(MrfpCommand::simple(
                    conf,
                    MrfpVerb::RevokeFloor,
                    Some(user.clone()),
                ));
                ctl.state.floor_holder = None;
            }
            ctl.floor_queue.retain(|u| u != user);
            let before = ctl.state.mix_descriptor();
            ctl.state.participants.retain(|u| u != user);
            ctl.state.participant_media.remove(&user.to_string());
            outcome.commands.push(MrfpCommand::simple(
                conf,
                MrfpVerb::RemoveStream,
                Some(user.clone()),
            ));
            let after = ctl.state.mix_descriptor();
            match &after {
                Some(mix) if after != before => {
                    ctl.state.mixed_streams = vec![mix.clone()];
                    outcome
                        .commands
                        .push(MrfpCommand::simple(conf, MrfpVerb::Mix, None));
                }
                Some(_) => {}
                None => ctl.state.mixed_streams.clear(),
            }
            if let Some(next) = next_floor_grant(ctl) {
                outcome
                    .commands
                    .push(MrfpCommand::simple(conf, MrfpVerb::GrantFloor, Some(next)));
            }
            if ctl.state.participants.is_empty() {
                state.conferences.remove(conf);
                outcome.conference_deleted = true;
            }
        }
        MrfcRequest::Announce { conf, text } => {
            if !state.conferences.contains_key(conf) {
                return Err(MediaError::UnknownConference(conf.clone()));
            }
            outcome.commands.push(MrfpCommand {
                conf: conf.clone(),
                verb: MrfpVerb::PlayAnnouncement,
                participant: None,
                media: BTreeSet::new(),
                text: Some(text.clone()),
            });
        }
        MrfcRequest::FloorRequest { conf, user } => {
            let ctl = state
                .conferences
                .get_mut(conf)
                .ok_or_else(|| MediaError::UnknownConference(conf.clone()))?;
            let had_floor = ctl.state.floor_holder.clone();
            let verdict = floor_request(ctl, user);
            outcome.floor = Some(verdict);
            if verdict == FloorOutcome::Granted && had_floor.is_none() {
                outcome.commands.push(MrfpCommand::simple(
                    conf,
                    MrfpVerb::GrantFloor,
                    Some(user.clone()),
                ));
            }
        }
        MrfcRequest::FloorRelease { conf, user } => {
            let ctl = state
                .conferences
                .get_mut(conf)
                .ok_or_else(|| MediaError::UnknownConference(conf.clone()))?;
            if ctl.state.floor_holder.as_ref() == Some(user) {
                ctl.state.floor_holder = None;
                outcome.commands.push(MrfpCommand::simple(
                    conf,
                    MrfpVerb::RevokeFloor,
                    Some(user.clone()),
                ));
                if let Some(next) = next_floor_grant(ctl) {
                    outcome.commands.push(MrfpCommand::simple(
                        conf,
                        MrfpVerb::GrantFloor,
                        Some(next),
                    ));
                }
            }
        }
    }
    Ok(outcome)
}

fn next_floor_grant(ctl: &mut ConfControl) -> Option<Uri> {
    while let Some(next) = ctl.floor_queue.pop_front() {
        if ctl.state.is_participant(&next) {
            ctl.state.floor_holder = Some(next.clone());
            return Some(next);
        }
    }
    None
}

/// Processor state: conferences rebuilt purely from applied commands.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MrfpState {
    pub conferences: BTreeMap<String, ConferenceState>,
}

/// Applies a single command. Deterministic: replaying a command log from
/// an empty state always reproduces the same conferences.
pub fn mrfp_apply(state: &mut MrfpState, cmd: &MrfpCommand) -> Result<(), MediaError> {
    let invalid = |what: &str| MediaError::InvalidTransition(format!("{what} (conf {})", cmd.conf));
    match cmd.verb {
        MrfpVerb::AddStream => {
            let user = cmd
                .participant
                .as_ref()
                .ok_or_else(|| invalid("add without user"))?;
            let conf = state.conferences.entry(cmd.conf.clone()).or_default();
            if !conf.is_participant(user) {
                conf.participants.push(user.clone());
            }
            conf.participant_media
                .insert(user.to_string(), cmd.media.clone());
        }
        MrfpVerb::RemoveStream => {
            let user = cmd
                .participant
                .as_ref()
                .ok_or_else(|| invalid("remove without user"))?;
            let conf = state
                .conferences
                .get_mut(&cmd.conf)
                .ok_or_else(|| invalid("remove from unknown conference"))?;
            if !conf.is_participant(user) {
                return Err(invalid("remove of non-participant"));
            }
            conf.participants.retain(|u| u != user);
            conf.participant_media.remove(&user.to_string());
            if conf.floor_holder.as_ref() == Some(user) {
                conf.floor_holder = None;
            }
            if conf.participants.len() < 2 {
                conf.mixed_streams.clear();
            }
            if conf.participants.is_empty() {
                state.conferences.remove(&cmd.conf);
            }
        }
        MrfpVerb::Mix => {
            let conf = state
                .conferences
                .get_mut(&cmd.conf)
                .ok_or_else(|| invalid("mix on unknown conference"))?;
            let mix = conf
                .mix_descriptor()
                .ok_or_else(|| invalid("mix needs two participants"))?;
            conf.mixed_streams = vec![mix];
        }
        MrfpVerb::PlayAnnouncement => {
            if !state.conferences.contains_key(&cmd.conf) {
                return Err(invalid("announcement on unknown conference"));
            }
        }
        MrfpVerb::GrantFloor => {
            let user = cmd
                .participant
                .as_ref()
                .ok_or_else(|| invalid("grant without user"))?;
            let conf = state
                .conferences
                .get_mut(&cmd.conf)
                .ok_or_else(|| invalid("grant on unknown conference"))?;
            if !conf.is_participant(user) {
                return Err(invalid("grant to non-participant"));
            }
            if conf.floor_holder.is_some() {
                return Err(invalid("floor already held"));
            }
            conf.floor_holder = Some(user.clone());
        }
        MrfpVerb::RevokeFloor => {
            let user = cmd
                .participant
                .as_ref()
                .ok_or_else(|| invalid("revoke without user"))?;
            let conf = state
                .conferences
                .get_mut(&cmd.conf)
                .ok_or_else(|| invalid("revoke on unknown conference"))?;
            if conf.floor_holder.as_ref() != Some(user) {
                return Err(invalid("revoke from non-holder"));
            }
            conf.floor_holder = None;
        }
    }
    Ok(())
}
