//! User naming and addressing: SIP and tel URIs, subscriber identities,
//! and the ENUM registry that maps E.164 numbers onto SIP URIs.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

/// Default apex appended to ENUM domains.
pub const DEFAULT_ENUM_APEX: &str = "e164.arpa";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UriError {
    #[error("malformed uri `{0}`: missing scheme")]
    MissingScheme(String),
    #[error("malformed uri `{0}`: unsupported scheme")]
    UnsupportedScheme(String),
    #[error("malformed uri `{0}`: empty user part")]
    EmptyUser(String),
    #[error("malformed uri `{0}`: empty or invalid host")]
    BadHost(String),
    #[error("malformed uri `{0}`: tel digits must be 1..=15 decimal digits")]
    BadDigits(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IdentityError {
    #[error("identity must carry at least one public id")]
    NoPublicIds,
    #[error("first public id must be a sip uri in the home domain `{0}`")]
    HomeDomainMismatch(String),
    #[error("public id `{0}` is not owned by this identity")]
    UnknownPublicId(String),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("no enum entry for tel:+{0}")]
pub struct EnumNotFound(pub String);

/// `sip:user@host`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SipUri {
    user: String,
    host: String,
}

impl SipUri {
    pub fn new(user: &str, host: &str) -> Result<Self, UriError> {
        let text = format!("sip:{user}@{host}");
        if user.is_empty() || user.contains(['@', ':', ' ', '\t']) {
            return Err(UriError::EmptyUser(text));
        }
        if !valid_host(host) {
            return Err(UriError::BadHost(text));
        }
        Ok(Self {
            user: user.to_string(),
            host: host.to_string(),
        })
    }

    pub fn user(&self) -> &str {
        &self.user
    }

    pub fn host(&self) -> &str {
        &self.host
    }
}

impl fmt::Display for SipUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sip:{}@{}", self.user, self.host)
    }
}

/// `tel:+digits`, E.164: 1..=15 decimal digits.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TelUri {
    digits: String,
}

impl TelUri {
    pub fn new(digits: &str) -> Result<Self, UriError> {
        if digits.is_empty() || digits.len() > 15 || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(UriError::BadDigits(format!("tel:+{digits}")));
        }
        Ok(Self {
            digits: digits.to_string(),
        })
    }

    pub fn digits(&self) -> &str {
        &self.digits
    }
}

impl fmt::Display for TelUri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "tel:+{}", self.digits)
    }
}

/// Either of the two URI schemes the signaling plane accepts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Uri {
    Sip(SipUri),
    Tel(TelUri),
}

impl Uri {
    /// Parses `sip:user@host` or `tel:+digits`. Any other scheme
    /// (mailto and friends) is rejected: it is outside signaling scope.
    pub fn parse(text: &str) -> Result<Self, UriError> {
        let Some((scheme, rest)) = text.split_once(':') else {
            return Err(UriError::MissingScheme(text.to_string()));
        };
        match scheme {
            "sip" => {
                let Some((user, host)) = rest.split_once('@') else {
                    return Err(UriError::BadHost(text.to_string()));
                };
                if user.is_empty() {
                    return Err(UriError::EmptyUser(text.to_string()));
                }
                Ok(Uri::Sip(SipUri::new(user, host)?))
            }
            "tel" => {
                let digits = rest.strip_prefix('+').unwrap_or(rest);
                Ok(Uri::Tel(TelUri::new(digits)?))
            }
            _ => Err(UriError::UnsupportedScheme(text.to_string())),
        }
    }

    pub fn as_sip(&self) -> Option<&SipUri> {
        match self {
            Uri::Sip(u) => Some(u),
            Uri::Tel(_) => None,
        }
    }

    pub fn as_tel(&self) -> Option<&TelUri> {
        match self {
            Uri::Tel(t) => Some(t),
            Uri::Sip(_) => None,
        }
    }

    /// Host part for sip URIs, none for tel.
    pub fn host(&self) -> Option<&str> {
        self.as_sip().map(SipUri::host)
    }
}

impl fmt::Display for Uri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Uri::Sip(u) => u.fmt(f),
            Uri::Tel(t) => t.fmt(f),
        }
    }
}

fn valid_host(host: &str) -> bool {
    !host.is_empty()
        && host
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'.')
}

/// Subscriber identity as provisioned on the UICC: one private id, one or
/// more public ids, the home domain and the shared secret used for
/// challenge-response authentication.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImsIdentity {
    pub private_id: String,
    pub public_ids: Vec<Uri>,
    pub home_domain: String,
    pub shared_secret: String,
}

impl ImsIdentity {
    pub fn new(
        private_id: &str,
        public_ids: Vec<Uri>,
        shared_secret: &str,
    ) -> Result<Self, IdentityError> {
        let first_sip = public_ids
            .iter()
            .find_map(Uri::as_sip)
            .ok_or(IdentityError::NoPublicIds)?;
        let home_domain = first_sip.host().to_string();
        match public_ids.first() {
            Some(Uri::Sip(u)) if u.host() == home_domain => {}
            _ => return Err(IdentityError::HomeDomainMismatch(home_domain)),
        }
        Ok(Self {
            private_id: private_id.to_string(),
            public_ids,
            home_domain,
            shared_secret: shared_secret.to_string(),
        })
    }

    /// The implicit registration set: registering any owned public id
    /// registers all of them as one set.
    pub fn implicit_set(&self, registered_public: &Uri) -> Result<Vec<Uri>, IdentityError> {
        if !self.public_ids.contains(registered_public) {
            return Err(IdentityError::UnknownPublicId(
                registered_public.to_string(),
            ));
        }
        Ok(self.public_ids.clone())
    }
}

/// ENUM domain for a tel URI: digits reversed, dot-separated, apex appended.
pub fn enum_domain(tel: &TelUri, apex: &str) -> String {
    let mut out = String::with_capacity(tel.digits().len() * 2 + apex.len());
    for b in tel.digits().bytes().rev() {
        out.push(b as char);
        out.push('.');
    }
    out.push_str(apex);
    out
}

/// Registry mapping ENUM domains onto SIP URIs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EnumRegistry {
    apex: String,
    entries: BTreeMap<String, SipUri>,
}

impl EnumRegistry {
    pub fn new() -> Self {
        Self::with_apex(DEFAULT_ENUM_APEX)
    }

    pub fn with_apex(apex: &str) -> Self {
        Self {
            apex: apex.to_string(),
            entries: BTreeMap::new(),
        }
    }

    pub fn apex(&self) -> &str {
        &self.apex
    }

    pub fn register(&mut self, tel: &TelUri, target: SipUri) {
        self.entries.insert(enum_domain(tel, &self.apex), target);
    }

    pub fn lookup(&self, tel: &TelUri) -> Result<&SipUri, EnumNotFound> {
        self.entries
            .get(&enum_domain(tel, &self.apex))
            .ok_or_else(|| EnumNotFound(tel.digits().to_string()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parse_sip_uri_splits_fields() {
        let u = Uri::parse("sip:john@home.net").unwrap();
        match &u {
            Uri::Sip(s) => {
                assert_eq!(s.user(), "john");
                assert_eq!(s.host(), "home.net");
            }
            _ => panic!("expected sip uri"),
        }
        assert_eq!(u.to_string(), "sip:john@home.net");
    }

    #[test]
    fn parse_tel_uri_extracts_digits() {
        let u = Uri::parse("tel:+15550001").unwrap();
        assert_eq!(u.as_tel().unwrap().digits(), "15550001");
        assert_eq!(u.to_string(), "tel:+15550001");
    }

    #[test]
    fn empty_user_is_malformed() {
        assert_eq!(
            Uri::parse("sip:@home.net"),
            Err(UriError::EmptyUser("sip:@home.net".into()))
        );
    }

    #[test]
    fn other_schemes_rejected() {
        assert!(matches!(
            Uri::parse("mailto:john@home.net"),
            Err(UriError::UnsupportedScheme(_))
        ));
        assert!(matches!(
            Uri::parse("john"),
            Err(UriError::MissingScheme(_))
        ));
    }

    #[test]
    fn tel_digit_validation() {
        assert!(Uri::parse("tel:+1555x001").is_err());
        assert!(Uri::parse("tel:+").is_err());
        assert!(Uri::parse("tel:+1234567890123456").is_err()); // 16 digits
        assert!(Uri::parse("tel:+123456789012345").is_ok()); // 15 digits
    }

    #[test]
    fn enum_domain_examples() {
        let t = TelUri::new("15550001").unwrap();
        assert_eq!(
            enum_domain(&t, DEFAULT_ENUM_APEX),
            "1.0.0.0.5.5.5.1.e164.arpa"
        );
        let one = TelUri::new("1").unwrap();
        assert_eq!(enum_domain(&one, DEFAULT_ENUM_APEX), "1.e164.arpa");
        let twelve = TelUri::new("12").unwrap();
        assert_eq!(enum_domain(&twelve, DEFAULT_ENUM_APEX), "2.1.e164.arpa");
    }

    #[test]
    fn enum_lookup_roundtrip_and_miss() {
        let mut reg = EnumRegistry::new();
        let tel = TelUri::new("15550001").unwrap();
        let target = SipUri::new("john", "home.net").unwrap();
        reg.register(&tel, target.clone());
        assert_eq!(reg.lookup(&tel).unwrap(), &target);

        let empty = EnumRegistry::new();
        assert_eq!(
            empty.lookup(&tel),
            Err(EnumNotFound("15550001".to_string()))
        );
    }

    #[test]
    fn implicit_set_is_whole_identity() {
        let ids = vec![
            Uri::parse("sip:john@home.net").unwrap(),
            Uri::parse("tel:+15550001").unwrap(),
        ];
        let id = ImsIdentity::new("john@home.net", ids.clone(), "s3cr3t").unwrap();
        assert_eq!(id.implicit_set(&ids[0]).unwrap(), ids);
        assert_eq!(id.implicit_set(&ids[1]).unwrap(), ids);

        let single =
            ImsIdentity::new("a@d.net", vec![Uri::parse("sip:a@d.net").unwrap()], "x").unwrap();
        assert_eq!(single.implicit_set(&single.public_ids[0]).unwrap().len(), 1);

        let foreign = Uri::parse("sip:mallory@evil.net").unwrap();
        assert!(matches!(
            id.implicit_set(&foreign),
            Err(IdentityError::UnknownPublicId(_))
        ));
    }

    #[test]
    fn home_domain_comes_from_first_sip_id() {
        let id = ImsIdentity::new(
            "john@home.net",
            vec![
                Uri::parse("sip:john@home.net").unwrap(),
                Uri::parse("tel:+15550001").unwrap(),
            ],
            "s",
        )
        .unwrap();
        assert_eq!(id.home_domain, "home.net");

        // A tel uri first violates the home-domain invariant.
        assert!(ImsIdentity::new(
            "john@home.net",
            vec![
                Uri::parse("tel:+15550001").unwrap(),
                Uri::parse("sip:john@home.net").unwrap(),
            ],
            "s",
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn uri_parse_serialize_roundtrip(user in "[a-z][a-z0-9]{0,8}", host in "[a-z][a-z0-9.]{0,10}") {
            let u = Uri::Sip(SipUri::new(&user, &host).unwrap());
            prop_assert_eq!(Uri::parse(&u.to_string()).unwrap(), u);
        }

        #[test]
        fn tel_parse_serialize_roundtrip(digits in "[0-9]{1,15}") {
            let t = Uri::Tel(TelUri::new(&digits).unwrap());
            prop_assert_eq!(Uri::parse(&t.to_string()).unwrap(), t);
        }

        #[test]
        fn enum_domain_injective(a in "[0-9]{1,15}", b in "[0-9]{1,15}") {
            let ta = TelUri::new(&a).unwrap();
            let tb = TelUri::new(&b).unwrap();
            if a != b {
                prop_assert_ne!(enum_domain(&ta, DEFAULT_ENUM_APEX), enum_domain(&tb, DEFAULT_ENUM_APEX));
            }
        }

        #[test]
        fn enum_register_then_lookup(digits in "[0-9]{1,15}", user in "[a-z]{1,6}") {
            let mut reg = EnumRegistry::new();
            let tel = TelUri::new(&digits).unwrap();
            let sip = SipUri::new(&user, "home.net").unwrap();
            reg.register(&tel, sip.clone());
            prop_assert_eq!(reg.lookup(&tel).unwrap(), &sip);
        }
    }
}
