//! Home Subscriber Server and Subscriber Location Function: user
//! profiles, authentication vectors, S-CSCF assignment and initial
//! filter criteria.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::identity::{ImsIdentity, Uri};
use crate::netsim::NodeId;
use crate::signaling::{MediaKind, MsgKind};

/// Default registration binding lifetime in simulated ticks.
pub const DEFAULT_REG_TTL: u64 = 3600;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HssError {
    #[error("unknown subscriber `{0}`")]
    UnknownSubscriber(String),
    #[error("subscriber `{0}` is barred")]
    Barred(String),
}

/// Keyed digest used for challenge-response authentication and derived
/// tokens. Not cryptography: the deployment fixes FNV-1a/64 as its digest
/// so tests can recompute values independently.
pub fn digest(nonce: &str, secret: &str) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in nonce.bytes().chain([0u8]).chain(secret.bytes()) {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// Token the network presents so the terminal can authenticate the
/// network side. Derivable from the expected response, so the S-CSCF can
/// compute it without ever holding the shared secret.
pub fn network_token(nonce: &str, expected_response: &str) -> String {
    digest(&format!("{nonce}:net"), expected_response)
}

/// Which message kinds an iFC trigger matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodMatch {
    Any,
    Method(MsgKind),
}

impl MethodMatch {
    pub fn matches(&self, kind: MsgKind) -> bool {
        match self {
            MethodMatch::Any => true,
            MethodMatch::Method(m) => *m == kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IfcDirection {
    Originating,
    Terminating,
    Both,
}

impl IfcDirection {
    pub fn matches(&self, originating: bool) -> bool {
        match self {
            IfcDirection::Both => true,
            IfcDirection::Originating => originating,
            IfcDirection::Terminating => !originating,
        }
    }
}

/// Prioritized trigger routing a request through an application server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitialFilterCriterion {
    pub priority: u32,
    pub method_match: MethodMatch,
    pub direction: IfcDirection,
    pub as_id: NodeId,
}

/// One user's subscription data as held by the HSS.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserProfile {
    pub identity: ImsIdentity,
    pub subscribed_media: BTreeSet<MediaKind>,
    pub barred: bool,
    ifcs: Vec<InitialFilterCriterion>,
    pub assigned_scscf: Option<NodeId>,
    pub assignment_expiry: u64,
    pub active_profile_tag: String,
    /// Terminal whose registrations select the `home` profile tag.
    pub home_terminal: Option<NodeId>,
    /// Route to the CS domain when the user is unregistered.
    pub cs_forward_unregistered: bool,
}

impl UserProfile {
    pub fn new(identity: ImsIdentity, subscribed_media: BTreeSet<MediaKind>) -> Self {
        Self {
            identity,
            subscribed_media,
            barred: false,
            ifcs: Vec::new(),
            assigned_scscf: None,
            assignment_expiry: 0,
            active_profile_tag: "general".to_string(),
            home_terminal: None,
            cs_forward_unregistered: false,
        }
    }

    /// Inserts keeping the list sorted by ascending priority. A duplicate
    /// priority is rejected by returning false.
    pub fn add_ifc(&mut self, ifc: InitialFilterCriterion) -> bool {
        if self.ifcs.iter().any(|i| i.priority == ifc.priority) {
            return false;
        }
        let at = self
            .ifcs
            .iter()
            .position(|i| i.priority > ifc.priority)
            .unwrap_or(self.ifcs.len());
        self.ifcs.insert(at, ifc);
        true
    }

    pub fn ifcs(&self) -> &[InitialFilterCriterion] {
        &self.ifcs
    }

    pub fn registered(&self, now: u64) -> bool {
        self.assigned_scscf.is_some() && self.assignment_expiry > now
    }
}

/// All application servers whose trigger matches, in priority order.
pub fn ifc_match(profile: &UserProfile, kind: MsgKind, originating: bool) -> Vec<NodeId> {
    profile
        .ifcs
        .iter()
        .filter(|i| i.method_match.matches(kind) && i.direction.matches(originating))
        .map(|i| i.as_id.clone())
        .collect()
}

/// Fresh challenge material.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuthVector {
    pub nonce: String,
    pub expected_response: String,
}

/// Maps each public id onto the HSS that owns it. Deployments with a
/// single HSS skip the table entirely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlfTable {
    Single(NodeId),
    Mapped(BTreeMap<String, NodeId>),
}

impl SlfTable {
    pub fn locate(&self, public_id: &Uri) -> Result<NodeId, HssError> {
        match self {
            SlfTable::Single(hss) => Ok(hss.clone()),
            SlfTable::Mapped(map) => map
                .get(&public_id.to_string())
                .cloned()
                .ok_or_else(|| HssError::UnknownSubscriber(public_id.to_string())),
        }
    }
}

/// One HSS node's state.
#[derive(Debug, Clone)]
pub struct HssState {
    pub id: NodeId,
    profiles: BTreeMap<String, UserProfile>,
    public_index: BTreeMap<String, String>,
    nonce_counter: u64,
}

impl HssState {
    pub fn new(id: NodeId) -> Self {
        Self {
            id,
            profiles: BTreeMap::new(),
            public_index: BTreeMap::new(),
            nonce_counter: 0,
        }
    }

    pub fn add_user(&mut self, name: &str, profile: UserProfile) {
        for public in &profile.identity.public_ids {
            self.public_index
                .insert(public.to_string(), name.to_string());
        }
        self.public_index
            .insert(profile.identity.private_id.clone(), name.to_string());
        self.profiles.insert(name.to_string(), profile);
    }

    pub fn user_names(&self) -> impl Iterator<Item = &String> {
        self.profiles.keys()
    }

    fn name_for(&self, id: &str) -> Result<&str, HssError> {
        self.public_index
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| HssError::UnknownSubscriber(id.to_string()))
    }

    pub fn profile(&self, id: &str) -> Result<&UserProfile, HssError> {
        let name = self.name_for(id)?;
        Ok(&self.profiles[name])
    }

    pub fn profile_mut(&mut self, id: &str) -> Result<&mut UserProfile, HssError> {
        let name = self.name_for(id)?.to_string();
        Ok(self.profiles.get_mut(&name).unwrap())
    }

    pub fn profile_by_name(&self, name: &str) -> Option<&UserProfile> {
        self.profiles.get(name)
    }

    pub fn profile_by_name_mut(&mut self, name: &str) -> Option<&mut UserProfile> {
        self.profiles.get_mut(name)
    }

    /// `n` fresh vectors; nonces are unique for the lifetime of the node.
    pub fn fetch_auth_vectors(
        &mut self,
        private_id: &str,
        n: usize,
    ) -> Result<Vec<AuthVector>, HssError> {
        let secret = self.profile(private_id)?.identity.shared_secret.clone();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            self.nonce_counter += 1;
            let nonce = format!("nonce-{}-{}", self.id, self.nonce_counter);
            let expected_response = digest(&nonce, &secret);
            out.push(AuthVector {
                nonce,
                expected_response,
            });
        }
        Ok(out)
    }

    /// The service profile, barred users refused.
    pub fn download_profile(&self, public_id: &str) -> Result<&UserProfile, HssError> {
        let profile = self.profile(public_id)?;
        if profile.barred {
            return Err(HssError::Barred(public_id.to_string()));
        }
        Ok(profile)
    }

    /// Links the user to an S-CSCF until the binding expires.
    pub fn assign_scscf(
        &mut self,
        public_id: &str,
        scscf: NodeId,
        now: u64,
        ttl: u64,
    ) -> Result<(), HssError> {
        let profile = self.profile_mut(public_id)?;
        profile.assigned_scscf = Some(scscf);
        profile.assignment_expiry = now + ttl;
        Ok(())
    }

    /// Current assignment, expiry checked against the caller's clock.
    pub fn query_scscf(&self, public_id: &str, now: u64) -> Result<Option<NodeId>, HssError> {
        let profile = self.profile(public_id)?;
        if profile.registered(now) {
            Ok(profile.assigned_scscf.clone())
        } else {
            Ok(None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::ImsIdentity;

    fn identity(user: &str) -> ImsIdentity {
        ImsIdentity::new(
            &format!("{user}@home.net"),
            vec![
                Uri::parse(&format!("sip:{user}@home.net")).unwrap(),
                Uri::parse("tel:+15550001").unwrap(),
            ],
            "s3cr3t",
        )
        .unwrap()
    }

    fn hss_with_john() -> HssState {
        let mut hss = HssState::new(NodeId::new("hss1"));
        let mut profile = UserProfile::new(identity("john"), [MediaKind::Audio].into());
        profile.add_ifc(InitialFilterCriterion {
            priority: 1,
            method_match: MethodMatch::Method(MsgKind::Invite),
            direction: IfcDirection::Terminating,
            as_id: NodeId::new("as1"),
        });
        profile.add_ifc(InitialFilterCriterion {
            priority: 2,
            method_match: MethodMatch::Method(MsgKind::Invite),
            direction: IfcDirection::Terminating,
            as_id: NodeId::new("as2"),
        });
        hss.add_user("john", profile);
        hss
    }

    /// Independent FNV-1a/64 transcription used as the digest oracle.
    fn fnv_oracle(nonce: &str, secret: &str) -> String {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(nonce.as_bytes());
        bytes.push(0);
        bytes.extend_from_slice(secret.as_bytes());
        let mut h: u64 = 14695981039346656037;
        for b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(1099511628211);
        }
        format!("{h:016x}")
    }

    #[test]
    fn auth_vector_response_matches_digest_oracle() {
        let mut hss = hss_with_john();
        let v = hss.fetch_auth_vectors("john@home.net", 1).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].expected_response, fnv_oracle(&v[0].nonce, "s3cr3t"));
    }

    #[test]
    fn nonces_are_unique() {
        let mut hss = hss_with_john();
        let v = hss.fetch_auth_vectors("john@home.net", 3).unwrap();
        let set: BTreeSet<&str> = v.iter().map(|a| a.nonce.as_str()).collect();
        assert_eq!(set.len(), 3);
    }

    #[test]
    fn unknown_user_is_refused() {
        let mut hss = hss_with_john();
        assert!(matches!(
            hss.fetch_auth_vectors("ghost@home.net", 1),
            Err(HssError::UnknownSubscriber(_))
        ));
        assert!(matches!(
            hss.download_profile("sip:ghost@home.net"),
            Err(HssError::UnknownSubscriber(_))
        ));
    }

    #[test]
    fn barred_user_cannot_download_profile() {
        let mut hss = hss_with_john();
        hss.profile_by_name_mut("john").unwrap().barred = true;
        assert!(matches!(
            hss.download_profile("sip:john@home.net"),
            Err(HssError::Barred(_))
        ));
    }

    #[test]
    fn profile_ifcs_stay_priority_sorted() {
        let mut profile = UserProfile::new(identity("john"), BTreeSet::new());
        profile.add_ifc(InitialFilterCriterion {
            priority: 9,
            method_match: MethodMatch::Any,
            direction: IfcDirection::Both,
            as_id: NodeId::new("as9"),
        });
        profile.add_ifc(InitialFilterCriterion {
            priority: 2,
            method_match: MethodMatch::Any,
            direction: IfcDirection::Both,
            as_id: NodeId::new("as2"),
        });
        assert!(!profile.add_ifc(InitialFilterCriterion {
            priority: 2,
            method_match: MethodMatch::Any,
            direction: IfcDirection::Both,
            as_id: NodeId::new("dup"),
        }));
        let prios: Vec<u32> = profile.ifcs().iter().map(|i| i.priority).collect();
        assert_eq!(prios, vec![2, 9]);
    }

    #[test]
    fn ifc_match_examples() {
        let hss = hss_with_john();
        let profile = hss.download_profile("sip:john@home.net").unwrap();

        let term_invite = ifc_match(profile, MsgKind::Invite, false);
        assert_eq!(term_invite, vec![NodeId::new("as1"), NodeId::new("as2")]);

        assert!(ifc_match(profile, MsgKind::Register, true).is_empty());

        let mut wild = UserProfile::new(identity("w"), BTreeSet::new());
        wild.add_ifc(InitialFilterCriterion {
            priority: 1,
            method_match: MethodMatch::Any,
            direction: IfcDirection::Both,
            as_id: NodeId::new("asw"),
        });
        for kind in [
            MsgKind::Register,
            MsgKind::Invite,
            MsgKind::Bye,
            MsgKind::Message,
        ] {
            assert_eq!(ifc_match(&wild, kind, true).len(), 1);
        }
    }

    #[test]
    fn assign_query_expiry() {
        let mut hss = hss_with_john();
        assert_eq!(hss.query_scscf("sip:john@home.net", 0).unwrap(), None);

        hss.assign_scscf("sip:john@home.net", NodeId::new("scscf1"), 10, 100)
            .unwrap();
        assert_eq!(
            hss.query_scscf("sip:john@home.net", 50).unwrap(),
            Some(NodeId::new("scscf1"))
        );
        // Expiry arithmetic: binding lives in [10, 110).
        assert!(hss.query_scscf("sip:john@home.net", 109).unwrap().is_some());
        assert_eq!(hss.query_scscf("sip:john@home.net", 110).unwrap(), None);
    }

    #[test]
    fn assignment_store_matches_reference_model() {
        // Model-based check against a plain map plus clock.
        let mut hss = hss_with_john();
        let mut model: Option<(NodeId, u64)> = None;
        let script: &[(&str, u64)] = &[
            ("assign-a", 5),
            ("query", 20),
            ("assign-b", 30),
            ("query", 3000),
            ("query", 3631),
        ];
        for (op, now) in script {
            match *op {
                "assign-a" => {
                    hss.assign_scscf("sip:john@home.net", NodeId::new("a"), *now, DEFAULT_REG_TTL)
                        .unwrap();
                    model = Some((NodeId::new("a"), now + DEFAULT_REG_TTL));
                }
                "assign-b" => {
                    hss.assign_scscf("sip:john@home.net", NodeId::new("b"), *now, DEFAULT_REG_TTL)
                        .unwrap();
                    model = Some((NodeId::new("b"), now + DEFAULT_REG_TTL));
                }
                _ => {
                    let expect = model
                        .as_ref()
                        .and_then(|(id, exp)| (*exp > *now).then(|| id.clone()));
                    assert_eq!(hss.query_scscf("sip:john@home.net", *now).unwrap(), expect);
                }
            }
        }
    }

    #[test]
    fn slf_single_and_mapped() {
        let single = SlfTable::Single(NodeId::new("hss1"));
        let uri = Uri::parse("sip:john@home.net").unwrap();
        assert_eq!(single.locate(&uri).unwrap(), NodeId::new("hss1"));

        let mut map = BTreeMap::new();
        map.insert("sip:bob@home.net".to_string(), NodeId::new("hss2"));
        let table = SlfTable::Mapped(map);
        assert_eq!(
            table
                .locate(&Uri::parse("sip:bob@home.net").unwrap())
                .unwrap(),
            NodeId::new("hss2")
        );
        assert!(matches!(
            table.locate(&uri),
            Err(HssError::UnknownSubscriber(_))
        ));
    }

    #[test]
    fn network_token_derivable_without_secret() {
        let expected = digest("nonce-1", "secret");
        assert_eq!(
            network_token("nonce-1", &expected),
            digest("nonce-1:net", &expected)
        );
    }
}
