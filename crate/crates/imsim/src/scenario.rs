//! Line-oriented scenario files: topology, subscribers, service
//! configuration, an ordered action list and the assertions checked
//! after the run.
//!
//! One directive per line, `#` starts a comment. See the README for the
//! full grammar.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use crate::app_server::UtEdit;
use crate::hss::{IfcDirection, MethodMatch, DEFAULT_REG_TTL};
use crate::identity::{SipUri, TelUri, Uri, DEFAULT_ENUM_APEX};
use crate::interworking::{BreakoutTarget, CsFamily};
use crate::netsim::NodeId;
use crate::signaling::{MediaKind, MediaLine, MsgKind};

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unresolved reference `{0}`")]
    Unresolved(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum NodeKind {
    Pcscf,
    Icscf,
    Scscf,
    Hss,
    Slf,
    As,
    Bgcf,
    Mgcf,
    Sgw,
    Mgw,
    Mrfc,
    Mrfp,
    Pdp,
    Terminal,
    ExtSip,
}

impl NodeKind {
    fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "PCSCF" => NodeKind::Pcscf,
            "ICSCF" => NodeKind::Icscf,
            "SCSCF" => NodeKind::Scscf,
            "HSS" => NodeKind::Hss,
            "SLF" => NodeKind::Slf,
            "AS" => NodeKind::As,
            "BGCF" => NodeKind::Bgcf,
            "MGCF" => NodeKind::Mgcf,
            "SGW" => NodeKind::Sgw,
            "MGW" => NodeKind::Mgw,
            "MRFC" => NodeKind::Mrfc,
            "MRFP" => NodeKind::Mrfp,
            "PDP" => NodeKind::Pdp,
            "TERMINAL" => NodeKind::Terminal,
            "EXTSIP" => NodeKind::ExtSip,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone)]
pub struct NodeDecl {
    pub id: NodeId,
    pub kind: NodeKind,
    pub domain: String,
    pub thig: bool,
    pub capabilities: Option<BTreeSet<MediaKind>>,
    pub cs_family: CsFamily,
}

#[derive(Debug, Clone)]
pub struct LinkDecl {
    pub a: NodeId,
    pub b: NodeId,
    pub latency: u64,
    pub initially_up: bool,
}

#[derive(Debug, Clone)]
pub struct UserDecl {
    pub name: String,
    pub private_id: String,
    pub public_ids: Vec<Uri>,
    pub secret: String,
    pub media: BTreeSet<MediaKind>,
    pub home_terminal: Option<NodeId>,
    pub barred: bool,
    pub cs_forward: bool,
    pub hss_override: Option<NodeId>,
}

#[derive(Debug, Clone)]
pub struct IfcDecl {
    pub user: String,
    pub priority: u32,
    pub method: MethodMatch,
    pub direction: IfcDirection,
    pub as_id: NodeId,
}

#[derive(Debug, Clone)]
pub struct ScreenDecl {
    pub as_id: NodeId,
    pub owner: String,
    pub allow: BTreeSet<Uri>,
    pub target: SipUri,
    pub deflect: SipUri,
}

#[derive(Debug, Clone)]
pub struct RouteAsDecl {
    pub as_id: NodeId,
    pub owner: String,
    pub source: NodeId,
}

#[derive(Debug, Clone)]
pub struct PolicyDecl {
    /// None is a network-wide rule; Some names the subscriber.
    pub user: Option<String>,
    pub media: Option<BTreeSet<MediaKind>>,
    pub codecs: Option<BTreeSet<String>>,
    pub max_bandwidth_kbps: Option<u32>,
}

#[derive(Debug, Clone)]
pub struct BreakoutDecl {
    /// None is the mandatory default (`*`) entry.
    pub prefix: Option<String>,
    pub target: BreakoutTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FloorOp {
    Request,
    Release,
}

#[derive(Debug, Clone)]
pub enum Action {
    Register {
        user: String,
        terminal: NodeId,
        secret_override: Option<String>,
    },
    Call {
        user: String,
        target: Uri,
        media: Vec<MediaLine>,
    },
    AsCall {
        as_id: NodeId,
        user: String,
        target: Uri,
        media: Vec<MediaLine>,
    },
    Hangup {
        session_ref: String,
    },
    UtConfig {
        user: String,
        as_id: NodeId,
        edit: UtEdit,
    },
    ConfJoin {
        user: String,
        conf: String,
        media: BTreeSet<MediaKind>,
    },
    ConfLeave {
        user: String,
        conf: String,
    },
    Announce {
        conf: String,
        text: String,
    },
    Floor {
        user: String,
        conf: String,
        op: FloorOp,
    },
    LinkDown {
        a: NodeId,
        b: NodeId,
    },
    Wait {
        ticks: u64,
    },
}

#[derive(Debug, Clone)]
pub enum Expect {
    Delivered(Uri),
    Rejected(String),
    CdrNodes {
        session_ref: String,
        nodes: BTreeSet<NodeId>,
    },
    Scscf {
        user: String,
        node: NodeId,
    },
    TraceContains(String),
}

/// A parsed and reference-checked scenario.
#[derive(Debug, Clone, Default)]
pub struct Scenario {
    pub domains: BTreeSet<String>,
    pub nodes: BTreeMap<NodeId, NodeDecl>,
    pub links: Vec<LinkDecl>,
    pub users: BTreeMap<String, UserDecl>,
    pub ifcs: Vec<IfcDecl>,
    pub screens: Vec<ScreenDecl>,
    pub route_as: Vec<RouteAsDecl>,
    pub enum_entries: Vec<(TelUri, SipUri)>,
    pub enum_apex: String,
    pub policies: Vec<PolicyDecl>,
    pub breakout: Vec<BreakoutDecl>,
    pub force_icscf: bool,
    pub reg_ttl: u64,
    pub actions: Vec<Action>,
    pub expects: Vec<Expect>,
}

impl Scenario {
    pub fn nodes_of_kind(&self, kind: NodeKind) -> impl Iterator<Item = &NodeDecl> {
        self.nodes.values().filter(move |n| n.kind == kind)
    }

    pub fn node_kind(&self, id: &NodeId) -> Option<NodeKind> {
        self.nodes.get(id).map(|n| n.kind)
    }
}

/// Loads and reference-checks a scenario file.
pub fn load(path: &Path) -> Result<Scenario, LoadError> {
    parse_str(&std::fs::read_to_string(path)?)
}

type Parsed<T> = Result<T, LoadError>;

fn err(line: usize, msg: impl Into<String>) -> LoadError {
    LoadError::Parse {
        line,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    line: usize,
    toks: Vec<&'a str>,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn next(&mut self, what: &str) -> Parsed<&'a str> {
        let tok = self
            .toks
            .get(self.pos)
            .ok_or_else(|| err(self.line, format!("missing {what}")))?;
        self.pos += 1;
        Ok(tok)
    }

    fn expect(&mut self, tag: &str) -> Parsed<()> {
        let tok = self.next(&format!("`{tag}`"))?;
        if tok != tag {
            return Err(err(self.line, format!("expected `{tag}`, found `{tok}`")));
        }
        Ok(())
    }

    /// Consumes `tag` if it is the next token.
    fn eat(&mut self, tag: &str) -> bool {
        if self.toks.get(self.pos) == Some(&tag) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn done(&self) -> bool {
        self.pos >= self.toks.len()
    }

    fn finish(&self) -> Parsed<()> {
        if self.done() {
            Ok(())
        } else {
            Err(err(
                self.line,
                format!("unexpected trailing token `{}`", self.toks[self.pos]),
            ))
        }
    }

    fn uri(&mut self, what: &str) -> Parsed<Uri> {
        let tok = self.next(what)?;
        Uri::parse(tok).map_err(|e| err(self.line, e.to_string()))
    }

    fn sip_uri(&mut self, what: &str) -> Parsed<SipUri> {
        match self.uri(what)? {
            Uri::Sip(u) => Ok(u),
            Uri::Tel(_) => Err(err(self.line, format!("{what} must be a sip uri"))),
        }
    }

    fn number<T: std::str::FromStr>(&mut self, what: &str) -> Parsed<T> {
        self.next(what)?
            .parse()
            .map_err(|_| err(self.line, format!("bad {what}")))
    }

    fn node(&mut self, what: &str) -> Parsed<NodeId> {
        Ok(NodeId::new(self.next(what)?))
    }

    fn media_kinds(&mut self, what: &str) -> Parsed<BTreeSet<MediaKind>> {
        let tok = self.next(what)?;
        parse_media_kinds(self.line, tok)
    }
}

fn parse_media_kinds(line: usize, tok: &str) -> Parsed<BTreeSet<MediaKind>> {
    let mut out = BTreeSet::new();
    for part in tok.split(',').filter(|p| !p.is_empty()) {
        out.insert(
            MediaKind::parse(part)
                .ok_or_else(|| err(line, format!("unknown media kind `{part}`")))?,
        );
    }
    Ok(out)
}

fn default_line(kind: MediaKind) -> MediaLine {
    let (codec, bw) = match kind {
        MediaKind::Audio => ("PCMA", 64),
        MediaKind::Video => ("H263", 384),
        MediaKind::Data => ("T38", 64),
    };
    MediaLine {
        kind,
        codec: codec.to_string(),
        bandwidth_kbps: bw,
    }
}

/// `kind[:codec[:bw]]` items joined by commas.
fn parse_media_lines(line: usize, tok: &str) -> Parsed<Vec<MediaLine>> {
    let mut out = Vec::new();
    for item in tok.split(',').filter(|p| !p.is_empty()) {
        let mut parts = item.split(':');
        let kind = parts
            .next()
            .and_then(MediaKind::parse)
            .ok_or_else(|| err(line, format!("bad media item `{item}`")))?;
        let mut media = default_line(kind);
        if let Some(codec) = parts.next() {
            media.codec = codec.to_string();
        }
        if let Some(bw) = parts.next() {
            media.bandwidth_kbps = bw
                .parse()
                .ok()
                .filter(|b| *b > 0)
                .ok_or_else(|| err(line, format!("bad bandwidth in `{item}`")))?;
        }
        out.push(media);
    }
    if out.is_empty() {
        return Err(err(line, "media list is empty"));
    }
    Ok(out)
}

fn parse_tel(line: usize, tok: &str) -> Parsed<TelUri> {
    let rest = tok.strip_prefix("tel:").unwrap_or(tok);
    let digits = rest.strip_prefix('+').unwrap_or(rest);
    TelUri::new(digits).map_err(|e| err(line, e.to_string()))
}

/// Parses scenario text. An empty file is a valid empty scenario.
pub fn parse_str(text: &str) -> Result<Scenario, LoadError> {
    let mut sc = Scenario {
        enum_apex: DEFAULT_ENUM_APEX.to_string(),
        reg_ttl: DEFAULT_REG_TTL,
        ..Scenario::default()
    };
    let mut link_downs: Vec<(usize, NodeId, NodeId)> = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut c = Cursor {
            line: line_no,
            toks: content.split_whitespace().collect(),
            pos: 0,
        };
        let directive = c.next("directive")?;
        match directive {
            "DOMAIN" => {
                let d = c.next("domain name")?;
                sc.domains.insert(d.to_string());
                c.finish()?;
            }
            "NODE" => {
                let kind_tok = c.next("node kind")?;
                let kind = NodeKind::parse(kind_tok)
                    .ok_or_else(|| err(line_no, format!("unknown node kind `{kind_tok}`")))?;
                let id = c.node("node id")?;
                c.expect("DOMAIN")?;
                let domain = c.next("domain")?.to_string();
                let mut decl = NodeDecl {
                    id: id.clone(),
                    kind,
                    domain,
                    thig: false,
                    capabilities: None,
                    cs_family: CsFamily::IsupLike,
                };
                while !c.done() {
                    if c.eat("THIG") {
                        decl.thig = c.next("on|off")? == "on";
                    } else if c.eat("CAP") {
                        decl.capabilities = Some(c.media_kinds("capability list")?);
                    } else if c.eat("FAMILY") {
                        decl.cs_family = match c.next("isup|bicc")? {
                            "bicc" => CsFamily::BiccLike,
                            _ => CsFamily::IsupLike,
                        };
                    } else {
                        c.finish()?;
                    }
                }
                if sc.nodes.insert(id.clone(), decl).is_some() {
                    return Err(err(line_no, format!("node `{id}` declared twice")));
                }
            }
            "LINK" => {
                let a = c.node("endpoint")?;
                let b = c.node("endpoint")?;
                c.expect("LATENCY")?;
                let latency: u64 = c.number("latency")?;
                if latency == 0 {
                    return Err(err(line_no, "latency must be at least 1"));
                }
                c.finish()?;
                sc.links.push(LinkDecl {
                    a,
                    b,
                    latency,
                    initially_up: true,
                });
            }
            "LINK-DOWN" => {
                let a = c.node("endpoint")?;
                let b = c.node("endpoint")?;
                c.finish()?;
                link_downs.push((line_no, a, b));
            }
            "USER" => {
                let name = c.next("user name")?.to_string();
                c.expect("PRIVATE")?;
                let private_id = c.next("private id")?.to_string();
                let mut public_ids = Vec::new();
                while c.eat("PUBLIC") {
                    public_ids.push(c.uri("public id")?);
                }
                if public_ids.is_empty() {
                    return Err(err(line_no, "user needs at least one PUBLIC id"));
                }
                c.expect("SECRET")?;
                let secret = c.next("secret")?.to_string();
                c.expect("MEDIA")?;
                let media = c.media_kinds("media list")?;
                let mut decl = UserDecl {
                    name: name.clone(),
                    private_id,
                    public_ids,
                    secret,
                    media,
                    home_terminal: None,
                    barred: false,
                    cs_forward: false,
                    hss_override: None,
                };
                while !c.done() {
                    if c.eat("HOME") {
                        decl.home_terminal = Some(c.node("home terminal")?);
                    } else if c.eat("BARRED") {
                        decl.barred = true;
                    } else if c.eat("CSFWD") {
                        decl.cs_forward = true;
                    } else if c.eat("HSS") {
                        decl.hss_override = Some(c.node("hss id")?);
                    } else {
                        c.finish()?;
                    }
                }
                if sc.users.insert(name.clone(), decl).is_some() {
                    return Err(err(line_no, format!("user `{name}` declared twice")));
                }
            }
            "IFC" => {
                let user = c.next("user")?.to_string();
                c.expect("PRIORITY")?;
                let priority: u32 = c.number("priority")?;
                c.expect("METHOD")?;
                let m = c.next("method")?;
                let method = if m == "*" {
                    MethodMatch::Any
                } else {
                    match m {
                        "REGISTER" => MethodMatch::Method(MsgKind::Register),
                        "INVITE" => MethodMatch::Method(MsgKind::Invite),
                        "MESSAGE" => MethodMatch::Method(MsgKind::Message),
                        "BYE" => MethodMatch::Method(MsgKind::Bye),
                        _ => return Err(err(line_no, format!("unknown method `{m}`"))),
                    }
                };
                c.expect("DIRECTION")?;
                let direction = match c.next("direction")? {
                    "o" => IfcDirection::Originating,
                    "t" => IfcDirection::Terminating,
                    "both" => IfcDirection::Both,
                    d => return Err(err(line_no, format!("unknown direction `{d}`"))),
                };
                c.expect("AS")?;
                let as_id = c.node("as id")?;
                c.finish()?;
                sc.ifcs.push(IfcDecl {
                    user,
                    priority,
                    method,
                    direction,
                    as_id,
                });
            }
            "SCREEN" => {
                let as_id = c.node("as id")?;
                c.expect("OWNER")?;
                let owner = c.next("owner")?.to_string();
                c.expect("ALLOW")?;
                let allow_tok = c.next("allow list")?;
                let mut allow = BTreeSet::new();
                if allow_tok != "-" {
                    for item in allow_tok.split(',').filter(|s| !s.is_empty()) {
                        allow.insert(Uri::parse(item).map_err(|e| err(line_no, e.to_string()))?);
                    }
                }
                c.expect("TARGET")?;
                let target = c.sip_uri("target")?;
                c.expect("DEFLECT")?;
                let deflect = c.sip_uri("deflect target")?;
                c.finish()?;
                if target == deflect {
                    return Err(err(line_no, "TARGET and DEFLECT must differ"));
                }
                sc.screens.push(ScreenDecl {
                    as_id,
                    owner,
                    allow,
                    target,
                    deflect,
                });
            }
            "ROUTE-AS" => {
                let as_id = c.node("as id")?;
                c.expect("OWNER")?;
                let owner = c.next("owner")?.to_string();
                c.expect("SOURCE")?;
                let source = c.node("source as")?;
                c.finish()?;
                sc.route_as.push(RouteAsDecl {
                    as_id,
                    owner,
                    source,
                });
            }
            "ENUM" => {
                let tel = parse_tel(line_no, c.next("tel number")?)?;
                let target = c.sip_uri("target uri")?;
                c.finish()?;
                sc.enum_entries.push((tel, target));
            }
            "ENUM-APEX" => {
                sc.enum_apex = c.next("apex domain")?.to_string();
                c.finish()?;
            }
            "BREAKOUT" => {
                let prefix_tok = c.next("prefix")?;
                let prefix = if prefix_tok == "*" {
                    None
                } else {
                    if !prefix_tok.bytes().all(|b| b.is_ascii_digit()) {
                        return Err(err(line_no, "prefix must be digits or `*`"));
                    }
                    Some(prefix_tok.to_string())
                };
                let target = match c.next("LOCAL|REMOTE")? {
                    "LOCAL" => BreakoutTarget::LocalMgcf(c.node("mgcf id")?),
                    "REMOTE" => BreakoutTarget::RemoteBgcf(c.next("domain")?.to_string()),
                    t => {
                        return Err(err(
                            line_no,
                            format!("expected LOCAL or REMOTE, found `{t}`"),
                        ))
                    }
                };
                c.finish()?;
                sc.breakout.push(BreakoutDecl { prefix, target });
            }
            "POLICY" => {
                let user = match c.next("NETWORK|USER")? {
                    "NETWORK" => None,
                    "USER" => Some(c.next("user")?.to_string()),
                    t => {
                        return Err(err(
                            line_no,
                            format!("expected NETWORK or USER, found `{t}`"),
                        ))
                    }
                };
                let mut decl = PolicyDecl {
                    user,
                    media: None,
                    codecs: None,
                    max_bandwidth_kbps: None,
                };
                while !c.done() {
                    if c.eat("MEDIA") {
                        decl.media = Some(c.media_kinds("media list")?);
                    } else if c.eat("CODECS") {
                        let toks = c.next("codec list")?;
                        decl.codecs = Some(
                            toks.split(',')
                                .filter(|s| !s.is_empty())
                                .map(String::from)
                                .collect(),
                        );
                    } else if c.eat("BW") {
                        decl.max_bandwidth_kbps = Some(c.number("bandwidth cap")?);
                    } else {
                        c.finish()?;
                    }
                }
                sc.policies.push(decl);
            }
            "FORCE-ICSCF" => {
                sc.force_icscf = c.next("on|off")? == "on";
                c.finish()?;
            }
            "REG-TTL" => {
                sc.reg_ttl = c.number("ttl")?;
                c.finish()?;
            }
            "ACTION" => {
                let action = parse_action(&mut c)?;
                sc.actions.push(action);
            }
            "EXPECT" => {
                let expect = parse_expect(&mut c, content)?;
                sc.expects.push(expect);
            }
            other => return Err(err(line_no, format!("unknown directive `{other}`"))),
        }
    }

    for (line_no, a, b) in link_downs {
        let found = sc
            .links
            .iter_mut()
            .find(|l| (l.a == a && l.b == b) || (l.a == b && l.b == a));
        match found {
            Some(l) => l.initially_up = false,
            None => {
                return Err(err(
                    line_no,
                    format!("LINK-DOWN for undeclared link {a} {b}"),
                ))
            }
        }
    }

    validate(&sc)?;
    Ok(sc)
}

fn parse_action(c: &mut Cursor<'_>) -> Parsed<Action> {
    let verb = c.next("action verb")?;
    let action = match verb {
        "register" => {
            let user = c.next("user")?.to_string();
            c.expect("VIA")?;
            let terminal = c.node("terminal")?;
            let secret_override = if c.eat("SECRET") {
                Some(c.next("secret")?.to_string())
            } else {
                None
            };
            Action::Register {
                user,
                terminal,
                secret_override,
            }
        }
        "call" => {
            let user = c.next("user")?.to_string();
            c.expect("->")?;
            let target = c.uri("target")?;
            let media = if c.eat("MEDIA") {
                parse_media_lines(c.line, c.next("media list")?)?
            } else {
                vec![default_line(MediaKind::Audio)]
            };
            Action::Call {
                user,
                target,
                media,
            }
        }
        "as-call" => {
            let as_id = c.node("as id")?;
            c.expect("FOR")?;
            let user = c.next("user")?.to_string();
            c.expect("->")?;
            let target = c.uri("target")?;
            let media = if c.eat("MEDIA") {
                parse_media_lines(c.line, c.next("media list")?)?
            } else {
                vec![default_line(MediaKind::Audio)]
            };
            Action::AsCall {
                as_id,
                user,
                target,
                media,
            }
        }
        "hangup" => Action::Hangup {
            session_ref: c.next("session ref")?.to_string(),
        },
        "ut-config" => {
            let user = c.next("user")?.to_string();
            let as_id = c.node("as id")?;
            let kind = c.next("edit kind")?;
            let edit = match kind {
                "ALLOW-ADD" => UtEdit::AllowAdd(c.uri("uri")?),
                "ALLOW-REMOVE" => UtEdit::AllowRemove(c.uri("uri")?),
                "TARGET" => UtEdit::Target(c.sip_uri("uri")?),
                "DEFLECT" => UtEdit::Deflect(c.sip_uri("uri")?),
                k => return Err(err(c.line, format!("unknown ut edit `{k}`"))),
            };
            Action::UtConfig { user, as_id, edit }
        }
        "conf-join" => {
            let user = c.next("user")?.to_string();
            let conf = c.next("conference")?.to_string();
            let media = if c.eat("MEDIA") {
                c.media_kinds("media list")?
            } else {
                [MediaKind::Audio].into()
            };
            Action::ConfJoin { user, conf, media }
        }
        "conf-leave" => Action::ConfLeave {
            user: c.next("user")?.to_string(),
            conf: c.next("conference")?.to_string(),
        },
        "announce" => Action::Announce {
            conf: c.next("conference")?.to_string(),
            text: c.next("text token")?.to_string(),
        },
        "floor" => {
            let user = c.next("user")?.to_string();
            let conf = c.next("conference")?.to_string();
            let op = match c.next("request|release")? {
                "request" => FloorOp::Request,
                "release" => FloorOp::Release,
                o => return Err(err(c.line, format!("unknown floor op `{o}`"))),
            };
            Action::Floor { user, conf, op }
        }
        "link-down" => Action::LinkDown {
            a: c.node("endpoint")?,
            b: c.node("endpoint")?,
        },
        "wait" => Action::Wait {
            ticks: c.number("ticks")?,
        },
        v => return Err(err(c.line, format!("unknown action `{v}`"))),
    };
    c.finish()?;
    Ok(action)
}

fn parse_expect(c: &mut Cursor<'_>, full_line: &str) -> Parsed<Expect> {
    let kind = c.next("expect kind")?;
    let expect = match kind {
        "delivered" => Expect::Delivered(c.uri("uri")?),
        "rejected" => Expect::Rejected(c.next("reason")?.to_string()),
        "cdr-nodes" => {
            let session_ref = c.next("session ref")?.to_string();
            let nodes = c
                .next("node list")?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(NodeId::new)
                .collect();
            Expect::CdrNodes { session_ref, nodes }
        }
        "scscf" => Expect::Scscf {
            user: c.next("user")?.to_string(),
            node: c.node("scscf id")?,
        },
        "trace-contains" => {
            // Everything after the keyword, spaces preserved.
            let needle = full_line
                .split_once("trace-contains")
                .map(|(_, rest)| rest.trim().to_string())
                .filter(|s| !s.is_empty())
                .ok_or_else(|| err(c.line, "missing substring"))?;
            c.pos = c.toks.len();
            Expect::TraceContains(needle)
        }
        k => return Err(err(c.line, format!("unknown expect `{k}`"))),
    };
    c.finish()?;
    Ok(expect)
}

fn validate(sc: &Scenario) -> Result<(), LoadError> {
    let unresolved = |name: &str| LoadError::Unresolved(name.to_string());
    let node_is = |id: &NodeId, kind: NodeKind| -> Result<(), LoadError> {
        match sc.nodes.get(id) {
            Some(n) if n.kind == kind => Ok(()),
            _ => Err(unresolved(id.as_str())),
        }
    };
    let node_exists = |id: &NodeId| -> Result<(), LoadError> {
        sc.nodes
            .get(id)
            .map(|_| ())
            .ok_or_else(|| unresolved(id.as_str()))
    };
    let user_exists = |name: &str| -> Result<(), LoadError> {
        sc.users
            .get(name)
            .map(|_| ())
            .ok_or_else(|| unresolved(name))
    };

    for node in sc.nodes.values() {
        if !sc.domains.contains(&node.domain) {
            return Err(unresolved(&node.domain));
        }
    }
    for link in &sc.links {
        node_exists(&link.a)?;
        node_exists(&link.b)?;
    }
    for user in sc.users.values() {
        if let Some(t) = &user.home_terminal {
            node_is(t, NodeKind::Terminal)?;
        }
        if let Some(h) = &user.hss_override {
            node_is(h, NodeKind::Hss)?;
        }
        let home_domain = user
            .public_ids
            .iter()
            .find_map(Uri::host)
            .ok_or_else(|| unresolved(&user.name))?;
        if !sc.domains.contains(home_domain) {
            return Err(unresolved(home_domain));
        }
        if user.hss_override.is_none()
            && !sc
                .nodes_of_kind(NodeKind::Hss)
                .any(|n| n.domain == home_domain)
        {
            return Err(unresolved(&format!("HSS for domain {home_domain}")));
        }
        if user.cs_forward && !user.public_ids.iter().any(|u| u.as_tel().is_some()) {
            return Err(unresolved(&format!(
                "tel public id for CSFWD user {}",
                user.name
            )));
        }
    }
    for ifc in &sc.ifcs {
        user_exists(&ifc.user)?;
        node_is(&ifc.as_id, NodeKind::As)?;
    }
    for screen in &sc.screens {
        node_is(&screen.as_id, NodeKind::As)?;
        user_exists(&screen.owner)?;
    }
    for ra in &sc.route_as {
        node_is(&ra.as_id, NodeKind::As)?;
        node_is(&ra.source, NodeKind::As)?;
        user_exists(&ra.owner)?;
    }
    for b in &sc.breakout {
        match &b.target {
            BreakoutTarget::LocalMgcf(id) => node_is(id, NodeKind::Mgcf)?,
            BreakoutTarget::RemoteBgcf(domain) => {
                if !sc.domains.contains(domain) {
                    return Err(unresolved(domain));
                }
            }
        }
    }
    if !sc.breakout.is_empty() && !sc.breakout.iter().any(|b| b.prefix.is_none()) {
        return Err(unresolved("BREAKOUT * default entry"));
    }
    if !sc.policies.is_empty() && sc.nodes_of_kind(NodeKind::Pdp).next().is_none() {
        return Err(unresolved("PDP node for POLICY rules"));
    }
    // More than one HSS in a domain needs the locator function there.
    let mut hss_count: BTreeMap<&str, usize> = BTreeMap::new();
    for n in sc.nodes_of_kind(NodeKind::Hss) {
        *hss_count.entry(n.domain.as_str()).or_default() += 1;
    }
    for (domain, count) in hss_count {
        if count > 1 && !sc.nodes_of_kind(NodeKind::Slf).any(|n| n.domain == domain) {
            return Err(unresolved(&format!("SLF for multi-HSS domain {domain}")));
        }
    }
    for p in &sc.policies {
        if let Some(u) = &p.user {
            user_exists(u)?;
        }
    }

    let mut calls_so_far = 0usize;
    for action in &sc.actions {
        match action {
            Action::Register { user, terminal, .. } => {
                user_exists(user)?;
                node_is(terminal, NodeKind::Terminal)?;
            }
            Action::Call { user, .. } => {
                user_exists(user)?;
                calls_so_far += 1;
            }
            Action::AsCall { as_id, user, .. } => {
                node_is(as_id, NodeKind::As)?;
                user_exists(user)?;
                calls_so_far += 1;
            }
            Action::Hangup { session_ref } => {
                let valid = session_ref
                    .strip_prefix("call-")
                    .and_then(|n| n.parse::<usize>().ok())
                    .is_some_and(|n| n >= 1 && n <= calls_so_far);
                if !valid {
                    return Err(unresolved(session_ref));
                }
            }
            Action::UtConfig { user, as_id, .. } => {
                user_exists(user)?;
                node_is(as_id, NodeKind::As)?;
            }
            Action::ConfJoin { user, .. }
            | Action::ConfLeave { user, .. }
            | Action::Floor { user, .. } => user_exists(user)?,
            Action::Announce { .. } | Action::Wait { .. } => {}
            Action::LinkDown { a, b } => {
                node_exists(a)?;
                node_exists(b)?;
            }
        }
    }
    for expect in &sc.expects {
        match expect {
            Expect::CdrNodes { nodes, .. } => {
                for n in nodes {
                    node_exists(n)?;
                }
            }
            Expect::Scscf { user, node } => {
                user_exists(user)?;
                node_is(node, NodeKind::Scscf)?;
            }
            _ => {}
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
# smallest registrable topology
DOMAIN home.net
NODE TERMINAL t1 DOMAIN home.net
NODE PCSCF pcscf1 DOMAIN home.net
NODE ICSCF icscf1 DOMAIN home.net
NODE SCSCF scscf1 DOMAIN home.net
NODE HSS hss1 DOMAIN home.net
LINK t1 pcscf1 LATENCY 1
LINK pcscf1 icscf1 LATENCY 1
LINK icscf1 scscf1 LATENCY 1
LINK icscf1 hss1 LATENCY 1
LINK scscf1 hss1 LATENCY 1
USER john PRIVATE john@home.net PUBLIC sip:john@home.net PUBLIC tel:+15550001 SECRET sj MEDIA audio,video HOME t1
ACTION register john VIA t1
EXPECT scscf john scscf1
EXPECT trace-contains flow=reg-1 registered
";

    #[test]
    fn parses_small_scenario() {
        let sc = parse_str(SMALL).unwrap();
        assert_eq!(sc.nodes.len(), 5);
        assert_eq!(sc.links.len(), 5);
        assert_eq!(sc.users["john"].public_ids.len(), 2);
        assert_eq!(sc.users["john"].home_terminal, Some(NodeId::new("t1")));
        assert_eq!(sc.actions.len(), 1);
        assert_eq!(sc.expects.len(), 2);
        match &sc.expects[1] {
            Expect::TraceContains(s) => assert_eq!(s, "flow=reg-1 registered"),
            _ => panic!("expected trace-contains"),
        }
    }

    #[test]
    fn empty_file_is_a_valid_empty_scenario() {
        let sc = parse_str("").unwrap();
        assert!(sc.nodes.is_empty());
        assert!(sc.actions.is_empty());
        let sc = parse_str("# only comments\n\n").unwrap();
        assert!(sc.nodes.is_empty());
    }

    #[test]
    fn misspelled_node_in_action_is_unresolved() {
        let text = format!("{SMALL}ACTION register john VIA t9\n");
        match parse_str(&text) {
            Err(LoadError::Unresolved(name)) => assert_eq!(name, "t9"),
            other => panic!("expected unresolved reference, got {other:?}"),
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "DOMAIN home.net\nNODE WIDGET x DOMAIN home.net\n";
        match parse_str(text) {
            Err(LoadError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn breakout_requires_default() {
        let text = "\
DOMAIN home.net
NODE MGCF mgcf1 DOMAIN home.net
BREAKOUT 1999 LOCAL mgcf1
";
        assert!(matches!(parse_str(text), Err(LoadError::Unresolved(_))));
    }

    #[test]
    fn policy_requires_pdp() {
        let text = "\
DOMAIN home.net
POLICY NETWORK MEDIA audio
";
        assert!(matches!(parse_str(text), Err(LoadError::Unresolved(_))));
    }

    #[test]
    fn call_media_spec_with_defaults() {
        let lines = parse_media_lines(1, "audio,video:H264:512").unwrap();
        assert_eq!(lines[0].codec, "PCMA");
        assert_eq!(lines[0].bandwidth_kbps, 64);
        assert_eq!(lines[1].codec, "H264");
        assert_eq!(lines[1].bandwidth_kbps, 512);
    }

    #[test]
    fn hangup_must_reference_an_earlier_call() {
        let text = format!("{SMALL}ACTION hangup call-1\n");
        assert!(matches!(parse_str(&text), Err(LoadError::Unresolved(_))));
    }
}
