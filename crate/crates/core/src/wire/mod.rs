//! The NGP/1 framed text protocol.
//!
//! Every service in the testbed speaks this one request/response protocol.
//! A message is a first line, a header block, an empty line and an
//! optional binary body:
//!
//! ```text
//! NGP/1 LOOKUP /rc/lfn1            NGP/1 200 OK
//! Subject: /O=Grid/CN=A            Content-Length: 2
//! <empty line>                     <empty line>
//!                                  hi
//! ```
//!
//! Lines are terminated by a single LF (0x0A) and all text is UTF-8.
//! Requests always carry a `Subject` header naming the caller; the
//! `Content-Length` header is present exactly when the body is non-empty
//! and must equal the body length. Authentication is assertion-only: the
//! subject is trusted as given, authorization is allowlist matching.

mod transport;

pub use transport::{
    respond_bytes, serve_tcp, split_endpoint, Client, LocalNet, Purpose, ServerHandle, Service,
    ServiceRole, TransferLedger, TransferRecord, Transport,
};

use std::fmt;

use thiserror::Error;

pub const SUBJECT: &str = "Subject";
pub const CONTENT_LENGTH: &str = "Content-Length";

#[derive(Debug, Error)]
pub enum WireError {
    #[error("invalid subject: {0}")]
    Subject(String),
    #[error("cannot encode message: {0}")]
    Encode(String),
    #[error("bad first line at byte {at}: {detail}")]
    FirstLine { at: usize, detail: String },
    #[error("unknown verb {verb:?} at byte {at}")]
    UnknownVerb { at: usize, verb: String },
    #[error("bad response code at byte {at}: {detail}")]
    Code { at: usize, detail: String },
    #[error("bad header at byte {at}: {detail}")]
    Header { at: usize, detail: String },
    #[error("request is missing the Subject header")]
    MissingSubject,
    #[error("bad Content-Length: {0}")]
    ContentLength(String),
    #[error("truncated message at byte {at}")]
    Truncated { at: usize },
    #[error("endpoint {0} unreachable")]
    Unreachable(String),
    #[error("i/o error talking to {endpoint}: {source}")]
    Io {
        endpoint: String,
        source: std::io::Error,
    },
    #[error("remote answered with a request, expected a response")]
    NotAResponse,
}

impl WireError {
    /// Truncated input can become complete with more bytes; every other
    /// decode failure is final.
    pub fn is_incomplete(&self) -> bool {
        matches!(self, WireError::Truncated { .. })
    }
}

/// A caller identity: a slash-separated distinguished name.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Subject(String);

impl Subject {
    pub fn new(dn: impl Into<String>) -> Result<Self, WireError> {
        let dn = dn.into();
        if dn.is_empty() {
            return Err(WireError::Subject("empty".into()));
        }
        if !dn.starts_with('/') {
            return Err(WireError::Subject(format!(
                "{dn:?} does not start with '/'"
            )));
        }
        if dn.contains('\r') || dn.contains('\n') {
            return Err(WireError::Subject("contains CR or LF".into()));
        }
        Ok(Subject(dn))
    }

    pub fn dn(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// True when the subject matches any pattern: either an exact DN or a
/// prefix pattern ending in `*`.
pub fn authorize(subject: &Subject, allowlist: &[String]) -> bool {
    allowlist.iter().any(|pat| match pat.strip_suffix('*') {
        Some(prefix) => subject.dn().starts_with(prefix),
        None => subject.dn() == pat,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Verb {
    Query,
    Submit,
    Cancel,
    Clean,
    Put,
    Get,
    List,
    Del,
    Stat,
    Reg,
    Unreg,
    Lookup,
    Children,
    Attach,
}

pub const VERBS: [Verb; 14] = [
    Verb::Query,
    Verb::Submit,
    Verb::Cancel,
    Verb::Clean,
    Verb::Put,
    Verb::Get,
    Verb::List,
    Verb::Del,
    Verb::Stat,
    Verb::Reg,
    Verb::Unreg,
    Verb::Lookup,
    Verb::Children,
    Verb::Attach,
];

impl Verb {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verb::Query => "QUERY",
            Verb::Submit => "SUBMIT",
            Verb::Cancel => "CANCEL",
            Verb::Clean => "CLEAN",
            Verb::Put => "PUT",
            Verb::Get => "GET",
            Verb::List => "LIST",
            Verb::Del => "DEL",
            Verb::Stat => "STAT",
            Verb::Reg => "REG",
            Verb::Unreg => "UNREG",
            Verb::Lookup => "LOOKUP",
            Verb::Children => "CHILDREN",
            Verb::Attach => "ATTACH",
        }
    }

    pub fn parse(s: &str) -> Option<Verb> {
        VERBS.iter().copied().find(|v| v.as_str() == s)
    }
}

impl fmt::Display for Verb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Ordered header map with case-insensitive names. Names are unique;
/// setting an existing name replaces its value in place.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Headers(Vec<(String, String)>);

impl Headers {
    pub fn new() -> Self {
        Headers(Vec::new())
    }

    pub fn set(&mut self, name: impl Into<String>, value: impl Into<String>) {
        let name = name.into();
        let value = value.into();
        match self
            .0
            .iter_mut()
            .find(|(n, _)| n.eq_ignore_ascii_case(&name))
        {
            Some((_, v)) => *v = value,
            None => self.0.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.0
            .iter()
            .find(|(n, _)| n.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn remove(&mut self, name: &str) {
        self.0.retain(|(n, _)| !n.eq_ignore_ascii_case(name));
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(n, v)| (n.as_str(), v.as_str()))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub verb: Verb,
    pub target: String,
    pub headers: Headers,
    pub body: Vec<u8>,
}

impl Request {
    pub fn new(verb: Verb, target: impl Into<String>, subject: &Subject) -> Self {
        let mut headers = Headers::new();
        headers.set(SUBJECT, subject.dn());
        Request {
            verb,
            target: target.into(),
            headers,
            body: Vec::new(),
        }
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.set(name, value);
        self
    }

    /// Sets the body and keeps the Content-Length invariant.
    pub fn with_body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        if self.body.is_empty() {
            self.headers.remove(CONTENT_LENGTH);
        } else {
            self.headers
                .set(CONTENT_LENGTH, self.body.len().to_string());
        }
        self
    }

    pub fn subject(&self) -> Result<Subject, WireError> {
        match self.headers.get(SUBJECT) {
            Some(dn) => Subject::new(dn),
            None => Err(WireError::MissingSubject),
        }
    }
}

pub const RESPONSE_CODES: [u16; 6] = [200, 400, 403, 404, 409, 500];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub code: u16,
    pub reason: String,
    pub headers: Headers,
    pub body: Vec<u8>,
}

impl Response {
    pub fn new(code: u16, reason: impl Into<String>) -> Self {
        Response {
            code,
            reason: reason.into(),
            headers: Headers::new(),
            body: Vec::new(),
        }
    }

    pub fn ok() -> Self {
        Response::new(200, "OK")
    }

    pub fn error(code: u16, reason: impl Into<String>) -> Self {
        let reason = reason.into().replace(['\r', '\n'], " ");
        Response::new(code, reason)
    }

    pub fn with_header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.set(name, value);
        self
    }

    pub fn with_body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        if self.body.is_empty() {
            self.headers.remove(CONTENT_LENGTH);
        } else {
            self.headers
                .set(CONTENT_LENGTH, self.body.len().to_string());
        }
        self
    }

    pub fn is_ok(&self) -> bool {
        self.code == 200
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Request(Request),
    Response(Response),
}

fn valid_header_name(name: &str) -> bool {
    !name.is_empty() && name.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-')
}

fn valid_header_value(value: &str) -> bool {
    !value.contains('\r') && !value.contains('\n')
}

fn check_headers(headers: &Headers, body_len: usize) -> Result<(), WireError> {
    for (name, value) in headers.iter() {
        if !valid_header_name(name) {
            return Err(WireError::Encode(format!("invalid header name {name:?}")));
        }
        if !valid_header_value(value) {
            return Err(WireError::Encode(format!(
                "invalid characters in value of header {name}"
            )));
        }
    }
    match headers.get(CONTENT_LENGTH) {
        Some(v) => {
            if body_len == 0 {
                return Err(WireError::Encode(
                    "Content-Length present on empty body".into(),
                ));
            }
            if v.parse::<usize>().ok() != Some(body_len) {
                return Err(WireError::Encode(format!(
                    "Content-Length {v} does not match body length {body_len}"
                )));
            }
        }
        None => {
            if body_len != 0 {
                return Err(WireError::Encode(
                    "non-empty body without Content-Length".into(),
                ));
            }
        }
    }
    Ok(())
}

fn encode_parts(first_line: &str, headers: &Headers, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(first_line.len() + 64 + body.len());
    out.extend_from_slice(first_line.as_bytes());
    out.push(b'\n');
    for (name, value) in headers.iter() {
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(b": ");
        out.extend_from_slice(value.as_bytes());
        out.push(b'\n');
    }
    out.push(b'\n');
    out.extend_from_slice(body);
    out
}

pub fn encode_request(req: &Request) -> Result<Vec<u8>, WireError> {
    if req.target.is_empty() || req.target.contains('\r') || req.target.contains('\n') {
        return Err(WireError::Encode(format!(
            "invalid target {:?}",
            req.target
        )));
    }
    check_headers(&req.headers, req.body.len())?;
    req.subject()?;
    let first = format!("NGP/1 {} {}", req.verb, req.target);
    Ok(encode_parts(&first, &req.headers, &req.body))
}

pub fn encode_response(resp: &Response) -> Result<Vec<u8>, WireError> {
    if !RESPONSE_CODES.contains(&resp.code) {
        return Err(WireError::Encode(format!("invalid code {}", resp.code)));
    }
    if resp.reason.is_empty() || resp.reason.contains('\r') || resp.reason.contains('\n') {
        return Err(WireError::Encode(format!(
            "invalid reason {:?}",
            resp.reason
        )));
    }
    check_headers(&resp.headers, resp.body.len())?;
    let first = format!("NGP/1 {} {}", resp.code, resp.reason);
    Ok(encode_parts(&first, &resp.headers, &resp.body))
}

pub fn encode(msg: &Message) -> Result<Vec<u8>, WireError> {
    match msg {
        Message::Request(r) => encode_request(r),
        Message::Response(r) => encode_response(r),
    }
}

/// Decodes one message from the front of `bytes` and returns it with the
/// number of bytes consumed; trailing bytes are left for the caller.
/// Truncated input yields [`WireError::Truncated`], which a streaming
/// reader may treat as "need more bytes".
pub fn decode(bytes: &[u8]) -> Result<(Message, usize), WireError> {
    let nl = match bytes.iter().position(|&b| b == b'\n') {
        Some(i) => i,
        None => return Err(WireError::Truncated { at: bytes.len() }),
    };
    let first = std::str::from_utf8(&bytes[..nl]).map_err(|e| WireError::FirstLine {
        at: e.valid_up_to(),
        detail: "not UTF-8".into(),
    })?;
    let rest = first.strip_prefix("NGP/1 ").ok_or(WireError::FirstLine {
        at: 0,
        detail: "missing NGP/1 prefix".into(),
    })?;
    let (tok, remainder) = match rest.split_once(' ') {
        Some((t, r)) => (t, r),
        None => {
            return Err(WireError::FirstLine {
                at: first.len(),
                detail: "missing second field".into(),
            })
        }
    };
    if remainder.is_empty() {
        return Err(WireError::FirstLine {
            at: first.len(),
            detail: "empty target or reason".into(),
        });
    }

    enum Head {
        Req(Verb, String),
        Resp(u16, String),
    }
    let head = if !tok.is_empty() && tok.bytes().all(|b| b.is_ascii_digit()) {
        let code: u16 = tok.parse().map_err(|_| WireError::Code {
            at: 6,
            detail: format!("unparsable code {tok:?}"),
        })?;
        if !RESPONSE_CODES.contains(&code) {
            return Err(WireError::Code {
                at: 6,
                detail: format!("code {code} not in the protocol set"),
            });
        }
        Head::Resp(code, remainder.to_string())
    } else {
        match Verb::parse(tok) {
            Some(v) => Head::Req(v, remainder.to_string()),
            None => {
                return Err(WireError::UnknownVerb {
                    at: 6,
                    verb: tok.to_string(),
                })
            }
        }
    };

    // Header block, terminated by an empty line.
    let mut headers = Headers::new();
    let mut pos = nl + 1;
    loop {
        let line_end = match bytes[pos..].iter().position(|&b| b == b'\n') {
            Some(i) => pos + i,
            None => return Err(WireError::Truncated { at: bytes.len() }),
        };
        if line_end == pos {
            pos += 1;
            break;
        }
        let line = std::str::from_utf8(&bytes[pos..line_end]).map_err(|_| WireError::Header {
            at: pos,
            detail: "not UTF-8".into(),
        })?;
        let (name, raw_value) = line.split_once(':').ok_or(WireError::Header {
            at: pos,
            detail: format!("no colon in {line:?}"),
        })?;
        if !valid_header_name(name) {
            return Err(WireError::Header {
                at: pos,
                detail: format!("invalid header name {name:?}"),
            });
        }
        if headers.get(name).is_some() {
            return Err(WireError::Header {
                at: pos,
                detail: format!("duplicate header {name}"),
            });
        }
        let value = raw_value.strip_prefix(' ').unwrap_or(raw_value);
        headers.set(name, value);
        pos = line_end + 1;
    }

    // Body, sized by Content-Length.
    let body_len = match headers.get(CONTENT_LENGTH) {
        Some(v) => {
            let n: usize = v
                .parse()
                .map_err(|_| WireError::ContentLength(format!("unparsable: {v:?}")))?;
            if n == 0 {
                return Err(WireError::ContentLength(
                    "Content-Length: 0 is not allowed; omit the header".into(),
                ));
            }
            n
        }
        None => 0,
    };
    if bytes.len() < pos + body_len {
        return Err(WireError::Truncated { at: bytes.len() });
    }
    let body = bytes[pos..pos + body_len].to_vec();
    let consumed = pos + body_len;

    let msg = match head {
        Head::Req(verb, target) => {
            let req = Request {
                verb,
                target,
                headers,
                body,
            };
            req.subject()?;
            Message::Request(req)
        }
        Head::Resp(code, reason) => Message::Response(Response {
            code,
            reason,
            headers,
            body,
        }),
    };
    Ok((msg, consumed))
}
