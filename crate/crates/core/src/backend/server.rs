//! Hosts any [`Backend`] behind the wire protocol.

use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::sync::Arc;
use std::thread::JoinHandle;

use log::{debug, error};
use tiny_http::{Header, Method, Request, Response, Server};

use super::wire::{self, EncodeRequest, EncodeResponse, ErrorBody, GenerateRequest, GenerateResponse};
use super::{Backend, BackendError, ErrorCode};
use crate::error::{Error, Result};

pub struct ServerHandle {
    addr: SocketAddr,
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Blocks until the workers exit (they only exit on shutdown).
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` (use port 0 for an ephemeral port) and serves with `workers` threads.
/// Responses larger than tiny_http's write buffer go out as two writes; with
/// Nagle on, the second waits for the client's delayed ACK (~40 ms). Accepted
/// sockets inherit TCP_NODELAY from the listener.
fn listen(addr: &str) -> std::io::Result<TcpListener> {
    let target = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "address resolves to nothing"))?;
    let socket = socket2::Socket::new(socket2::Domain::for_address(target), socket2::Type::STREAM, None)?;
    socket.set_reuse_address(true)?;
    socket.set_nodelay(true)?;
    socket.bind(&target.into())?;
    socket.listen(128)?;
    Ok(socket.into())
}

pub fn serve(backend: Arc<dyn Backend>, addr: &str, workers: usize) -> Result<ServerHandle> {
    let bind_err = |e: &dyn std::fmt::Display| Error::Invalid(format!("cannot bind {addr}: {e}"));
    let listener = listen(addr).map_err(|e| bind_err(&e))?;
    let server = Server::from_listener(listener, None).map_err(|e| bind_err(&e))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Invalid(format!("{addr} is not an IP address")))?;
    let server = Arc::new(server);
    let workers = (0..workers.max(1))
        .map(|_| {
            let server = Arc::clone(&server);
            let backend = Arc::clone(&backend);
            std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    handle(&*backend, req);
                }
            })
        })
        .collect();
    Ok(ServerHandle { addr, server, workers })
}

fn json_header() -> Header {
    Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header")
}

fn route(
    backend: &dyn Backend,
    method: &Method,
    path: &str,
    body: &str,
) -> std::result::Result<String, (u16, ErrorBody)> {
    let fail = |e: BackendError| match e {
        BackendError::Protocol { code, detail } => (400, ErrorBody { error: code, detail }),
        other => (
            400,
            ErrorBody {
                error: ErrorCode::Internal,
                detail: other.to_string(),
            },
        ),
    };
    let bad_json = |e: serde_json::Error| {
        (
            400,
            ErrorBody {
                error: ErrorCode::BadRequest,
                detail: e.to_string(),
            },
        )
    };
    match (method, path) {
        (Method::Get, wire::INFO_PATH) => Ok(to_json(&backend.info().map_err(fail)?)),
        (Method::Post, wire::ENCODE_PATH) => {
            let req: EncodeRequest = serde_json::from_str(body).map_err(bad_json)?;
            let m = backend.encode(&req.prompt).map_err(fail)?;
            Ok(to_json(&EncodeResponse::from(&m)))
        }
        (Method::Post, wire::GENERATE_PATH) => {
            let req: GenerateRequest = serde_json::from_str(body).map_err(bad_json)?;
            let req = req.into_request().map_err(fail)?;
            let g = backend.generate(&req).map_err(fail)?;
            Ok(to_json(&GenerateResponse::from(&g)))
        }
        _ => Err((
            404,
            ErrorBody {
                error: ErrorCode::BadRequest,
                detail: format!("no route for {method} {path}"),
            },
        )),
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("response serializes")
}

fn handle(backend: &dyn Backend, mut req: Request) {
    let mut body = String::new();
    let result = match req.as_reader().read_to_string(&mut body) {
        Ok(_) => route(backend, req.method(), req.url(), &body),
        Err(e) => Err((
            400,
            ErrorBody {
                error: ErrorCode::BadRequest,
                detail: format!("unreadable body: {e}"),
            },
        )),
    };
    let (status, text) = match result {
        Ok(text) => (200, text),
        Err((status, err)) => {
            debug!("{} {} -> {status}: {}", req.method(), req.url(), err.detail);
            (status, serde_json::to_string(&err).expect("error serializes"))
        }
    };
    let resp = Response::from_string(text)
        .with_status_code(status)
        .with_header(json_header());
    if let Err(e) = req.respond(resp) {
        error!("failed to send response: {e}");
    }
}
