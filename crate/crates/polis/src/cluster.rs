//! A complete deployment in one process: delivery and authentication
//! services on a manual clock plus any number of client nodes. Nodes talk
//! to the services over in-process JSON or over loopback WebSockets.

use std::collections::BTreeMap;
use std::sync::Arc;

use tokio::net::TcpListener;

use crate::auth::{self, AuthService};
use crate::clock::{Clock, ManualClock};
use crate::ds::{self, DeliveryService};
use crate::node::{Node, NodeError, Services};
use crate::remote::{AsClient, DsClient};
use crate::store::Store;
use crate::transport::{serve_ws, InProcess, Mux, Transport, WsTransport};

/// Start of the manual clock: 2024-01-01T00:00:00Z.
pub const EPOCH_START: u64 = 1_704_067_200;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wire {
    InProcess,
    /// Both services behind one loopback WebSocket listener.
    Loopback,
}

pub struct Cluster {
    pub ds: Arc<DeliveryService>,
    pub auth: Arc<AuthService>,
    pub clock: Arc<ManualClock>,
    pub nodes: BTreeMap<String, Node>,
    wire: Wire,
    url: Option<String>,
    seed: u64,
}

impl Cluster {
    pub async fn new(seed: u64, wire: Wire) -> std::io::Result<Self> {
        let clock = Arc::new(ManualClock::new(EPOCH_START));
        let auth = Arc::new(AuthService::new(clock.clone()));
        let ds = Arc::new(DeliveryService::new(clock.clone(), auth.clone()));
        let url = match wire {
            Wire::InProcess => None,
            Wire::Loopback => {
                let listener = TcpListener::bind("127.0.0.1:0").await?;
                let url = format!("ws://{}", listener.local_addr()?);
                let mux = Mux::new().route(ds::OPS, ds.clone()).route(auth::OPS, auth.clone());
                tokio::spawn(serve_ws(listener, Arc::new(mux)));
                Some(url)
            }
        };
        Ok(Self { ds, auth, clock, nodes: BTreeMap::new(), wire, url, seed })
    }

    pub async fn in_process(seed: u64) -> Self {
        Self::new(seed, Wire::InProcess).await.expect("in-process cluster needs no IO")
    }

    fn transport(&self, handler: Arc<dyn crate::transport::Handler>) -> Arc<dyn Transport> {
        match &self.url {
            Some(url) => Arc::new(WsTransport::new(url)),
            None => Arc::new(InProcess::new(handler)),
        }
    }

    /// Fresh connections, so each node's traffic is counted separately.
    pub fn services(&self) -> Services {
        Services {
            ds: DsClient::new(self.transport(self.ds.clone())),
            auth: AsClient::new(self.transport(self.auth.clone())),
            clock: self.clock.clone() as Arc<dyn Clock>,
        }
    }

    pub fn wire(&self) -> Wire {
        self.wire
    }

    pub async fn add(&mut self, name: &str) -> Result<&mut Node, NodeError> {
        self.add_with_store(name, None).await
    }

    pub async fn add_with_store(&mut self, name: &str, store: Option<Store>) -> Result<&mut Node, NodeError> {
        let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(self.nodes.len() as u64);
        let mut node = Node::register(name, self.services(), store, Some(seed)).await?;
        node.backoff_scale = 0.0;
        self.nodes.insert(name.into(), node);
        Ok(self.nodes.get_mut(name).expect("just inserted"))
    }

    pub fn node(&mut self, name: &str) -> &mut Node {
        self.nodes.get_mut(name).unwrap_or_else(|| panic!("no node {name}"))
    }

    pub fn advance(&self, secs: u64) {
        self.clock.advance(secs);
    }

    /// Syncs and ticks every node until a full round moves nothing.
    pub async fn settle(&mut self) -> Result<usize, NodeError> {
        let mut total = 0;
        for _ in 0..64 {
            let mut moved = 0;
            for node in self.nodes.values_mut() {
                moved += node.sync().await?;
                node.tick().await?;
            }
            total += moved;
            if moved == 0 {
                break;
            }
        }
        Ok(total)
    }

    /// Like [`Cluster::settle`] but a failing node does not stop the others;
    /// used when some participants are banned or evicted.
    pub async fn settle_lenient(&mut self) -> usize {
        let mut total = 0;
        for _ in 0..64 {
            let mut moved = 0;
            for node in self.nodes.values_mut() {
                moved += node.sync().await.unwrap_or(0);
                let _ = node.tick().await;
            }
            total += moved;
            if moved == 0 {
                break;
            }
        }
        total
    }
}
