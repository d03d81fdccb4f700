//! Request/response transports. Both variants move the same serialized
//! JSON text, so traffic counts agree between in-process and socket runs.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use futures::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{MaybeTlsStream, WebSocketStream};

use crate::proto::{Request, Response, ServiceError};

#[async_trait]
pub trait Handler: Send + Sync {
    async fn handle(&self, req: Request) -> Response;
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("connection closed")]
    Closed,
    #[error("undecodable frame: {0}")]
    Decode(String),
}

/// Byte counters at the serialization boundary.
#[derive(Debug, Default)]
pub struct Traffic {
    sent: AtomicU64,
    received: AtomicU64,
    requests: AtomicU64,
    by_op: Mutex<BTreeMap<String, u64>>,
}

impl Traffic {
    fn record(&self, op: &str, sent: usize, received: usize) {
        self.sent.fetch_add(sent as u64, Ordering::Relaxed);
        self.received.fetch_add(received as u64, Ordering::Relaxed);
        self.requests.fetch_add(1, Ordering::Relaxed);
        *self.by_op.lock().expect("traffic lock").entry(op.into()).or_default() += sent as u64;
    }

    /// Bytes sent to the server.
    pub fn sent(&self) -> u64 {
        self.sent.load(Ordering::Relaxed)
    }

    pub fn received(&self) -> u64 {
        self.received.load(Ordering::Relaxed)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }

    /// Bytes sent per op name.
    pub fn by_op(&self) -> BTreeMap<String, u64> {
        self.by_op.lock().expect("traffic lock").clone()
    }
}

#[async_trait]
pub trait Transport: Send + Sync {
    async fn call(&self, req: &Request) -> Result<Response, TransportError>;
    fn traffic(&self) -> &Traffic;
}

/// Calls a handler in the same process through a JSON round trip.
pub struct InProcess {
    handler: Arc<dyn Handler>,
    traffic: Traffic,
}

impl InProcess {
    pub fn new(handler: Arc<dyn Handler>) -> Self {
        Self { handler, traffic: Traffic::default() }
    }
}

#[async_trait]
impl Transport for InProcess {
    async fn call(&self, req: &Request) -> Result<Response, TransportError> {
        let out = serde_json::to_string(req).map_err(|e| TransportError::Decode(e.to_string()))?;
        let parsed: Request = serde_json::from_str(&out).map_err(|e| TransportError::Decode(e.to_string()))?;
        let resp = serde_json::to_string(&self.handler.handle(parsed).await).expect("responses serialize");
        self.traffic.record(&req.op, out.len(), resp.len());
        serde_json::from_str(&resp).map_err(|e| TransportError::Decode(e.to_string()))
    }

    fn traffic(&self) -> &Traffic {
        &self.traffic
    }
}

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

/// One request at a time over a lazily opened WebSocket.
pub struct WsTransport {
    url: String,
    conn: tokio::sync::Mutex<Option<Ws>>,
    traffic: Traffic,
}

impl WsTransport {
    pub fn new(url: &str) -> Self {
        Self { url: url.into(), conn: tokio::sync::Mutex::new(None), traffic: Traffic::default() }
    }

    async fn exchange(ws: &mut Ws, text: &str) -> Result<String, TransportError> {
        ws.send(Message::text(text)).await.map_err(|_| TransportError::Closed)?;
        loop {
            match ws.next().await {
                Some(Ok(Message::Text(t))) => return Ok(t.to_string()),
                Some(Ok(Message::Ping(_) | Message::Pong(_))) => continue,
                Some(Ok(_)) | Some(Err(_)) | None => return Err(TransportError::Closed),
            }
        }
    }
}

#[async_trait]
impl Transport for WsTransport {
    async fn call(&self, req: &Request) -> Result<Response, TransportError> {
        let text = serde_json::to_string(req).map_err(|e| TransportError::Decode(e.to_string()))?;
        let mut guard = self.conn.lock().await;
        // One reconnect attempt if a cached connection went stale.
        for attempt in 0..2 {
            if guard.is_none() {
                let (ws, _) = tokio_tungstenite::connect_async(self.url.as_str())
                    .await
                    .map_err(|e| TransportError::Connect(e.to_string()))?;
                *guard = Some(ws);
            }
            match Self::exchange(guard.as_mut().expect("connected above"), &text).await {
                Ok(resp) => {
                    self.traffic.record(&req.op, text.len(), resp.len());
                    return serde_json::from_str(&resp).map_err(|e| TransportError::Decode(e.to_string()));
                }
                Err(e) => {
                    *guard = None;
                    if attempt == 1 {
                        return Err(e);
                    }
                }
            }
        }
        Err(TransportError::Closed)
    }

    fn traffic(&self) -> &Traffic {
        &self.traffic
    }
}

/// Accepts WebSocket connections and answers each text frame.
pub async fn serve_ws(listener: TcpListener, handler: Arc<dyn Handler>) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let handler = handler.clone();
        tokio::spawn(async move {
            let _ = stream.set_nodelay(true);
            let Ok(mut ws) = tokio_tungstenite::accept_async(stream).await else {
                tracing::debug!(%peer, "websocket handshake failed");
                return;
            };
            while let Some(Ok(msg)) = ws.next().await {
                let reply = match msg {
                    Message::Text(t) => match serde_json::from_str::<Request>(&t) {
                        Ok(req) => handler.handle(req).await,
                        Err(e) => Response::from_result::<()>(Err(ServiceError::ParseError(e.to_string()))),
                    },
                    Message::Close(_) => break,
                    _ => continue,
                };
                let text = serde_json::to_string(&reply).expect("responses serialize");
                if ws.send(Message::text(text)).await.is_err() {
                    break;
                }
            }
        });
    }
}

/// Routes each op to whichever service implements it.
pub struct Mux {
    routes: Vec<(&'static [&'static str], Arc<dyn Handler>)>,
}

impl Mux {
    pub fn new() -> Self {
        Self { routes: Vec::new() }
    }

    pub fn route(mut self, ops: &'static [&'static str], handler: Arc<dyn Handler>) -> Self {
        self.routes.push((ops, handler));
        self
    }
}

impl Default for Mux {
    fn default() -> Self {
        Self::new()
    }
}

#[async_trait]
impl Handler for Mux {
    async fn handle(&self, req: Request) -> Response {
        match self.routes.iter().find(|(ops, _)| ops.contains(&req.op.as_str())) {
            Some((_, h)) => h.handle(req).await,
            None => Response::from_result::<()>(Err(ServiceError::UnknownOp(req.op))),
        }
    }
}
