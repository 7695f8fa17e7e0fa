//! Minimal blocking HTTP hosting for the services.
//!
//! Each service is a pure `Fn(&Call) -> Reply` routed on method and path
//! segments, run by a small worker pool over one `tiny_http` listener.

use std::collections::HashMap;
use std::io::{self, Read};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::Serialize;
use tiny_http::{Header, Method, Response, Server};

pub mod cards;
pub mod ls;
pub mod ps;

/// Request bodies above this are refused before parsing.
pub const MAX_BODY: usize = 1 << 20;

pub struct Call<'a> {
    pub method: &'a Method,
    pub segments: Vec<&'a str>,
    pub query: HashMap<String, String>,
    pub body: &'a [u8],
}

impl Call<'_> {
    pub fn query_u64(&self, name: &str) -> Result<u64, Reply> {
        self.query
            .get(name)
            .ok_or_else(|| Reply::error(400, "bad_request", format!("missing query parameter {name}")))?
            .parse()
            .map_err(|_| Reply::error(400, "bad_request", format!("{name} must be an unsigned integer")))
    }
}

pub struct Reply {
    pub status: u16,
    pub body: Vec<u8>,
}

#[derive(Serialize)]
pub struct ErrorBody<'a, T: Serialize> {
    pub error: &'a str,
    pub message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<T>,
}

impl Reply {
    pub fn json<T: Serialize + ?Sized>(status: u16, value: &T) -> Reply {
        Reply { status, body: serde_json::to_vec(value).expect("response serializes") }
    }

    pub fn ok<T: Serialize + ?Sized>(value: &T) -> Reply {
        Self::json(200, value)
    }

    pub fn error(status: u16, code: &str, message: impl Into<String>) -> Reply {
        Self::json(status, &ErrorBody::<()> { error: code, message: message.into(), detail: None })
    }

    pub fn error_with<T: Serialize>(status: u16, code: &str, message: impl Into<String>, detail: T) -> Reply {
        Self::json(status, &ErrorBody { error: code, message: message.into(), detail: Some(detail) })
    }

    pub fn not_found() -> Reply {
        Self::error(404, "not_found", "no such resource")
    }
}

pub type Handler = Arc<dyn Fn(&Call) -> Reply + Send + Sync>;

/// A running service. Dropping it stops the workers and closes the socket.
pub struct ServiceHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    workers: Vec<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn shutdown(mut self) {
        self.stop_workers();
    }

    /// Blocks until the service is stopped from elsewhere (for `serve`).
    pub fn wait(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    fn stop_workers(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop_workers();
    }
}

pub fn spawn(listen: &str, threads: usize, handler: Handler) -> io::Result<ServiceHandle> {
    let server = Server::http(listen).map_err(|e| io::Error::new(io::ErrorKind::AddrNotAvailable, e.to_string()))?;
    let addr =
        server.server_addr().to_ip().ok_or_else(|| io::Error::new(io::ErrorKind::Unsupported, "not an IP listener"))?;
    let server = Arc::new(server);
    let stop = Arc::new(AtomicBool::new(false));
    let workers = (0..threads.max(1))
        .map(|_| {
            let (server, stop, handler) = (server.clone(), stop.clone(), handler.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match server.recv_timeout(Duration::from_millis(50)) {
                        Ok(Some(req)) => serve_one(req, &handler),
                        Ok(None) => {}
                        Err(_) => break,
                    }
                }
            })
        })
        .collect();
    Ok(ServiceHandle { addr, stop, workers })
}

fn serve_one(mut req: tiny_http::Request, handler: &Handler) {
    let mut body = Vec::new();
    let read = req.as_reader().take(MAX_BODY as u64 + 1).read_to_end(&mut body);
    let url = req.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((&url, ""));
    let reply = if read.is_err() {
        Reply::error(400, "bad_request", "unreadable body")
    } else if body.len() > MAX_BODY {
        Reply::error(413, "too_large", "request body exceeds 1 MiB")
    } else {
        let call = Call {
            method: req.method(),
            segments: path.split('/').filter(|s| !s.is_empty()).collect(),
            query: form_urlencoded::parse(query.as_bytes()).into_owned().collect(),
            body: &body,
        };
        handler(&call)
    };
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    let _ = req.respond(Response::from_data(reply.body).with_status_code(reply.status).with_header(header));
}
