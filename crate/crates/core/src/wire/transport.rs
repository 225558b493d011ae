//! Transports for NGP/1: real TCP for the daemons and an in-process
//! dispatch for the test harness. Both paths push every message through
//! [`encode`]/[`decode`](super::decode) so the bytes on the "wire" are
//! identical.
//!
//! When a [`TransferLedger`] is attached to a client, every call is
//! accounted per direction and split into control bytes (framing,
//! headers, queries, job descriptions) and payload bytes (file content:
//! PUT request bodies and GET response bodies).

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::Duration;

use super::{
    decode, encode_request, encode_response, Message, Request, Response, Subject, Verb, WireError,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ServiceRole {
    Ui,
    Cluster,
    Se,
    Rc,
    Giis,
}

impl ServiceRole {
    pub fn as_str(&self) -> &'static str {
        match self {
            ServiceRole::Ui => "ui",
            ServiceRole::Cluster => "cluster",
            ServiceRole::Se => "se",
            ServiceRole::Rc => "rc",
            ServiceRole::Giis => "giis",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    Control,
    Payload,
}

#[derive(Debug, Clone)]
pub struct TransferRecord {
    pub from: ServiceRole,
    pub to: ServiceRole,
    pub bytes: u64,
    pub purpose: Purpose,
}

/// Accounting of every byte moved between roles, appended by the wire
/// layer when enabled.
#[derive(Default)]
pub struct TransferLedger(Mutex<Vec<TransferRecord>>);

impl TransferLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, rec: TransferRecord) {
        if rec.bytes > 0 {
            self.0.lock().unwrap().push(rec);
        }
    }

    pub fn snapshot(&self) -> Vec<TransferRecord> {
        self.0.lock().unwrap().clone()
    }

    pub fn clear(&self) {
        self.0.lock().unwrap().clear();
    }
}

/// A server-side message handler. One service normally backs one
/// endpoint (`host:port`).
pub trait Service: Send + Sync {
    fn role(&self) -> ServiceRole;
    fn handle(&self, req: Request) -> Response;
}

/// In-process "network": endpoints resolve to services by authority and
/// calls are direct dispatch over encoded bytes. Endpoints can be marked
/// down to simulate dead services.
#[derive(Default)]
pub struct LocalNet {
    services: RwLock<HashMap<String, Arc<dyn Service>>>,
    down: RwLock<HashSet<String>>,
}

impl LocalNet {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn register(&self, authority: &str, service: Arc<dyn Service>) {
        self.services
            .write()
            .unwrap()
            .insert(authority.to_string(), service);
    }

    pub fn set_down(&self, authority: &str, down: bool) {
        let mut set = self.down.write().unwrap();
        if down {
            set.insert(authority.to_string());
        } else {
            set.remove(authority);
        }
    }

    fn lookup(&self, authority: &str) -> Result<Arc<dyn Service>, WireError> {
        if self.down.read().unwrap().contains(authority) {
            return Err(WireError::Unreachable(authority.to_string()));
        }
        self.services
            .read()
            .unwrap()
            .get(authority)
            .cloned()
            .ok_or_else(|| WireError::Unreachable(authority.to_string()))
    }
}

#[derive(Clone)]
pub enum Transport {
    Local(Arc<LocalNet>),
    Tcp,
}

/// Extracts `host:port` from an endpoint URL such as
/// `ng://alpha:39000/jobs` or `ngse://se1:39100/d/x`. A bare authority is
/// accepted as-is; the path part (if any) is returned too.
pub fn split_endpoint(url: &str) -> (String, String) {
    let rest = match url.split_once("://") {
        Some((_, rest)) => rest,
        None => url,
    };
    match rest.split_once('/') {
        Some((auth, path)) => (auth.to_string(), format!("/{path}")),
        None => (rest.to_string(), String::new()),
    }
}

/// One caller identity bound to a transport. Cheap to clone.
#[derive(Clone)]
pub struct Client {
    pub subject: Subject,
    pub role: ServiceRole,
    transport: Transport,
    ledger: Option<Arc<TransferLedger>>,
    timeout: Duration,
}

impl Client {
    pub fn new(subject: Subject, role: ServiceRole, transport: Transport) -> Self {
        Client {
            subject,
            role,
            transport,
            ledger: None,
            timeout: Duration::from_secs(5),
        }
    }

    pub fn with_ledger(mut self, ledger: Arc<TransferLedger>) -> Self {
        self.ledger = Some(ledger);
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn request(&self, verb: Verb, target: impl Into<String>) -> Request {
        Request::new(verb, target, &self.subject)
    }

    /// Sends one request to `endpoint` ("url" or "host:port") and waits
    /// for the single response.
    pub fn call(&self, endpoint: &str, mut req: Request) -> Result<Response, WireError> {
        if req.headers.get(super::SUBJECT).is_none() {
            req.headers.set(super::SUBJECT, self.subject.dn());
        }
        let verb = req.verb;
        let (authority, _) = split_endpoint(endpoint);
        let req_bytes = encode_request(&req)?;

        let (resp, resp_len, to_role) = match &self.transport {
            Transport::Local(net) => {
                let service = net.lookup(&authority)?;
                let role = service.role();
                let (msg, _) = decode(&req_bytes)?;
                let decoded = match msg {
                    Message::Request(r) => r,
                    Message::Response(_) => unreachable!("encoded a request"),
                };
                let resp = service.handle(decoded);
                let resp_bytes = encode_response(&resp)?;
                let (msg, used) = decode(&resp_bytes)?;
                let resp = match msg {
                    Message::Response(r) => r,
                    Message::Request(_) => unreachable!("encoded a response"),
                };
                (resp, used, Some(role))
            }
            Transport::Tcp => {
                let resp_bytes = tcp_round_trip(&authority, &req_bytes, self.timeout)?;
                let (msg, used) = decode(&resp_bytes).map_err(|e| {
                    if e.is_incomplete() {
                        WireError::Io {
                            endpoint: authority.clone(),
                            source: std::io::Error::new(
                                std::io::ErrorKind::UnexpectedEof,
                                "connection closed mid-response",
                            ),
                        }
                    } else {
                        e
                    }
                })?;
                match msg {
                    Message::Response(r) => (r, used, None),
                    Message::Request(_) => return Err(WireError::NotAResponse),
                }
            }
        };

        if let (Some(ledger), Some(to)) = (&self.ledger, to_role) {
            let req_payload = if verb == Verb::Put { req.body.len() } else { 0 };
            let resp_payload = if verb == Verb::Get && resp.is_ok() {
                resp.body.len()
            } else {
                0
            };
            ledger.record(TransferRecord {
                from: self.role,
                to,
                bytes: req_payload as u64,
                purpose: Purpose::Payload,
            });
            ledger.record(TransferRecord {
                from: self.role,
                to,
                bytes: (req_bytes.len() - req_payload) as u64,
                purpose: Purpose::Control,
            });
            ledger.record(TransferRecord {
                from: to,
                to: self.role,
                bytes: resp_payload as u64,
                purpose: Purpose::Payload,
            });
            ledger.record(TransferRecord {
                from: to,
                to: self.role,
                bytes: (resp_len - resp_payload) as u64,
                purpose: Purpose::Control,
            });
        }
        Ok(resp)
    }
}

fn tcp_round_trip(
    authority: &str,
    req_bytes: &[u8],
    timeout: Duration,
) -> Result<Vec<u8>, WireError> {
    let io_err = |source: std::io::Error| WireError::Io {
        endpoint: authority.to_string(),
        source,
    };
    let addr: SocketAddr = authority
        .to_socket_addrs()
        .map_err(io_err)?
        .next()
        .ok_or_else(|| WireError::Unreachable(authority.to_string()))?;
    let mut stream = TcpStream::connect_timeout(&addr, timeout)
        .map_err(|_| WireError::Unreachable(authority.to_string()))?;
    stream.set_read_timeout(Some(timeout)).map_err(io_err)?;
    stream.set_write_timeout(Some(timeout)).map_err(io_err)?;
    stream.write_all(req_bytes).map_err(io_err)?;
    stream.flush().map_err(io_err)?;

    let mut buf = Vec::with_capacity(1024);
    let mut chunk = [0u8; 8192];
    loop {
        match decode(&buf) {
            Ok(_) => break,
            Err(e) if e.is_incomplete() => {}
            Err(e) => return Err(e),
        }
        let n = stream.read(&mut chunk).map_err(io_err)?;
        if n == 0 {
            // Peer closed; let the caller see the truncation.
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    Ok(buf)
}

/// Bytes-in/bytes-out server behavior shared by the TCP loop and the
/// protocol-robustness tests: malformed input is answered with a 400,
/// never silence.
pub fn respond_bytes(service: &dyn Service, input: &[u8]) -> Vec<u8> {
    let resp = match decode(input) {
        Ok((Message::Request(req), _)) => service.handle(req),
        Ok((Message::Response(_), _)) => Response::error(400, "expected a request"),
        Err(e) => Response::error(400, format!("malformed request: {e}")),
    };
    encode_response(&resp).unwrap_or_else(|_| b"NGP/1 500 internal encoding error\n\n".to_vec())
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

/// Serves `service` on `bind` ("host:port", port 0 for ephemeral) with a
/// thread per connection. One request per connection unless the request
/// carries `Connection: keep-alive`.
pub fn serve_tcp(bind: &str, service: Arc<dyn Service>) -> std::io::Result<ServerHandle> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop2 = stop.clone();
    let join = std::thread::spawn(move || {
        while !stop2.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let service = service.clone();
                    std::thread::spawn(move || handle_conn(stream, service));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(_) => break,
            }
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        join: Some(join),
    })
}

fn handle_conn(mut stream: TcpStream, service: Arc<dyn Service>) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
    let _ = stream.set_write_timeout(Some(Duration::from_secs(10)));
    let mut buf: Vec<u8> = Vec::with_capacity(1024);
    let mut chunk = [0u8; 8192];
    loop {
        let (reply, consumed, keep_alive) = match decode(&buf) {
            Ok((Message::Request(req), used)) => {
                let keep = req
                    .headers
                    .get("Connection")
                    .is_some_and(|v| v.eq_ignore_ascii_case("keep-alive"));
                (service.handle(req), used, keep)
            }
            Ok((Message::Response(_), used)) => {
                (Response::error(400, "expected a request"), used, false)
            }
            Err(e) if e.is_incomplete() => {
                match stream.read(&mut chunk) {
                    Ok(0) => {
                        // EOF with an unfinished (or empty) request still
                        // gets an answer, never a silent close.
                        let resp = Response::error(400, format!("malformed request: {e}"));
                        let _ = write_response(&mut stream, &resp);
                        return;
                    }
                    Ok(n) => {
                        buf.extend_from_slice(&chunk[..n]);
                        continue;
                    }
                    Err(_) => return,
                }
            }
            Err(e) => {
                let resp = Response::error(400, format!("malformed request: {e}"));
                let _ = write_response(&mut stream, &resp);
                return;
            }
        };
        if write_response(&mut stream, &reply).is_err() {
            return;
        }
        if !keep_alive {
            return;
        }
        buf.drain(..consumed);
    }
}

fn write_response(stream: &mut TcpStream, resp: &Response) -> std::io::Result<()> {
    let bytes =
        encode_response(resp).unwrap_or_else(|_| b"NGP/1 500 internal encoding error\n\n".to_vec());
    stream.write_all(&bytes)?;
    stream.flush()
}
