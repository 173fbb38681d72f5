//! Application-server framework: SIP-AS / OSA-SCS / IM-SSF shells over
//! the ISC interface, the screening and routing services of the
//! residential case study, and Ut-interface configuration.
//!
//! Every AS kind presents identical ISC behaviour towards the network;
//! the kind only labels traces. The adapter protocols behind OSA-SCS and
//! IM-SSF (OSA API, CAP) are not modeled.

use std::collections::BTreeSet;
use std::fmt;

use thiserror::Error;

use crate::identity::{SipUri, Uri};
use crate::netsim::NodeId;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum AsError {
    #[error("screening target and deflect target must differ")]
    TargetsCollide,
    #[error("user `{0}` does not own this configuration")]
    NotOwner(String),
    #[error("unknown application server `{0}`")]
    UnknownAs(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsKind {
    SipAs,
    OsaScs,
    ImSsf,
}

impl fmt::Display for AsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AsKind::SipAs => write!(f, "sip-as"),
            AsKind::OsaScs => write!(f, "osa-scs"),
            AsKind::ImSsf => write!(f, "im-ssf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsMode {
    Proxy,
    OriginatingUa,
    TerminatingUa,
    B2bua,
}

/// What an AS does when the chain hands it a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceLogic {
    /// Pass-through: tag the trace, continue the chain.
    Transparent,
    /// Caller screening against an allow list (the case study's AS1).
    Screening(ScreeningConfig),
    /// Presence-aware retargeting fed by a screening AS (AS2).
    Routing(RoutingConfig),
}

#[derive(Debug, Clone)]
pub struct AsNode {
    pub id: NodeId,
    pub kind: AsKind,
    pub mode: AsMode,
    pub service: ServiceLogic,
}

/// Allow list plus the two forwarding targets it selects between.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScreeningConfig {
    pub owner: Uri,
    pub allow: BTreeSet<Uri>,
    pub target_allowed: SipUri,
    pub deflect_target: SipUri,
}

impl ScreeningConfig {
    pub fn new(
        owner: Uri,
        allow: BTreeSet<Uri>,
        target_allowed: SipUri,
        deflect_target: SipUri,
    ) -> Result<Self, AsError> {
        if target_allowed == deflect_target {
            return Err(AsError::TargetsCollide);
        }
        Ok(Self {
            owner,
            allow,
            target_allowed,
            deflect_target,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingConfig {
    pub owner: Uri,
    /// The screening AS whose verdict and targets feed this one.
    pub presence_source: NodeId,
}

/// Verdict of the screening service.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScreenResult {
    Allowed,
    Deflected,
}

impl fmt::Display for ScreenResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScreenResult::Allowed => write!(f, "allowed"),
            ScreenResult::Deflected => write!(f, "deflected"),
        }
    }
}

/// What an invoked AS tells the S-CSCF to do next.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AsDecision {
    Continue,
    RetargetTo(SipUri),
    TerminateHere(u16),
}

/// Allowed iff the caller is on the list.
pub fn as1_screen(cfg: &ScreeningConfig, caller: &Uri) -> ScreenResult {
    if cfg.allow.contains(caller) {
        ScreenResult::Allowed
    } else {
        ScreenResult::Deflected
    }
}

/// Picks the delivery target from the screening verdict and the owner's
/// active profile tag. Allowed calls under the home profile go to the
/// configured home contact; deflected calls go to the answering-machine
/// target; allowed calls under any other profile keep the original
/// registrar contact.
pub fn as2_route(
    _cfg: &RoutingConfig,
    screening: &ScreeningConfig,
    screen: ScreenResult,
    presence_tag: &str,
    original_target: &Uri,
) -> Uri {
    match (screen, presence_tag) {
        (ScreenResult::Deflected, _) => Uri::Sip(screening.deflect_target.clone()),
        (ScreenResult::Allowed, "home") => Uri::Sip(screening.target_allowed.clone()),
        (ScreenResult::Allowed, _) => original_target.clone(),
    }
}

/// One Ut-interface configuration edit. Ut carries configuration only,
/// never live traffic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UtEdit {
    AllowAdd(Uri),
    AllowRemove(Uri),
    Target(SipUri),
    Deflect(SipUri),
}

impl fmt::Display for UtEdit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UtEdit::AllowAdd(u) => write!(f, "allow-add {u}"),
            UtEdit::AllowRemove(u) => write!(f, "allow-remove {u}"),
            UtEdit::Target(u) => write!(f, "target {u}"),
            UtEdit::Deflect(u) => write!(f, "deflect {u}"),
        }
    }
}

/// Applies an edit to a screening configuration after checking ownership.
/// The replacement is atomic with respect to the event loop: it takes
/// effect for the next session, never mid-chain.
pub fn ut_configure(node: &mut AsNode, requester: &Uri, edit: &UtEdit) -> Result<(), AsError> {
    let ServiceLogic::Screening(cfg) = &mut node.service else {
        return Err(AsError::UnknownAs(node.id.clone()));
    };
    if cfg.owner != *requester {
        return Err(AsError::NotOwner(requester.to_string()));
    }
    match edit {
        UtEdit::AllowAdd(u) => {
            cfg.allow.insert(u.clone());
        }
        UtEdit::AllowRemove(u) => {
            cfg.allow.remove(u);
        }
        UtEdit::Target(u) => {
            if *u == cfg.deflect_target {
                return Err(AsError::TargetsCollide);
            }
            cfg.target_allowed = u.clone();
        }
        UtEdit::Deflect(u) => {
            if *u == cfg.target_allowed {
                return Err(AsError::TargetsCollide);
            }
            cfg.deflect_target = u.clone();
        }
    }
    Ok(())
}
