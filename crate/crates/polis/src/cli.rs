//! Command-line front end: the platform services, the client daemon, one-shot
//! client commands against a data directory, and the benchmarks.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use polis_core::governance::ActionType;
use rand::RngCore;
use serde_json::{json, Value};
use tokio::net::TcpListener;

use crate::auth::{self, AuthService};
use crate::bench;
use crate::clock::{Clock, SystemClock};
use crate::cluster::Wire;
use crate::control::{self, ActionBody, Daemon};
use crate::ds::{self, DeliveryService, Faults};
use crate::moderation::Decision;
use crate::node::{Node, Services};
use crate::remote::{AsClient, DsClient};
use crate::store::Store;
use crate::transport::{serve_ws, Mux, WsTransport};

#[derive(Parser, Debug)]
#[command(name = "polis", version, about = "End-to-end encrypted group messaging with community governance")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Delivery service endpoint.
    #[arg(long, global = true, default_value = "ws://127.0.0.1:7700", env = "POLIS_DS_URL")]
    pub ds_url: String,
    /// Authentication service endpoint.
    #[arg(long, global = true, default_value = "ws://127.0.0.1:7701", env = "POLIS_AS_URL")]
    pub as_url: String,
    /// Client state directory.
    #[arg(long, global = true, default_value = "polis-data", env = "POLIS_DATA_DIR")]
    pub data_dir: PathBuf,
    /// Control API token; generated into the data directory when absent.
    #[arg(long, global = true, env = "POLIS_TOKEN")]
    pub token: Option<String>,
    /// Background sync interval for the daemon; 0 means manual sync only.
    #[arg(long, global = true, default_value_t = 0)]
    pub poll_ms: u64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the delivery service.
    Ds {
        #[arg(long, default_value_t = 7700)]
        port: u16,
        /// Load from and periodically save to this file.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// JSON fault configuration, for attack experiments.
        #[arg(long)]
        faults: Option<PathBuf>,
    },
    /// Run the authentication service.
    As {
        #[arg(long, default_value_t = 7701)]
        port: u16,
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Run both services behind one port; point both URLs at it.
    Serve {
        #[arg(long, default_value_t = 7700)]
        port: u16,
    },
    /// Run the client daemon with its control API.
    Daemon {
        #[arg(long, default_value_t = control::DEFAULT_PORT)]
        port: u16,
    },
    /// Create an identity and upload KeyPackages.
    Register { username: String },
    CreateGroup {
        group_id: String,
        /// Defaults to the group id.
        #[arg(long)]
        community: Option<String>,
    },
    Invite { group_id: String, user: String },
    /// Sync and confirm that an invitation to the group was joined.
    Accept { group_id: String },
    Send { group_id: String, text: String },
    Rename { group_id: String, name: String },
    SetTopic { group_id: String, topic: String },
    DefRole {
        group_id: String,
        role: String,
        /// Action type names, e.g. SendText KickUser.
        permissions: Vec<String>,
    },
    SetRole { group_id: String, user: String, roles: Vec<String> },
    Kick { group_id: String, user: String },
    SetFilter { group_id: String, words: Vec<String> },
    PollStart {
        group_id: String,
        /// Action type the poll would apply.
        action_type: String,
        /// JSON payload of that action.
        payload: String,
    },
    Vote { group_id: String, proposal_id: String, choice: Choice },
    Report {
        group_id: String,
        message_ids: Vec<String>,
        #[arg(long)]
        reason: String,
        /// Deliver to the moderators of another group.
        #[arg(long)]
        to: Option<String>,
    },
    Escalate {
        group_id: String,
        message_ids: Vec<String>,
        #[arg(long)]
        reason: String,
    },
    Sync,
    /// Epoch, roster, roles, pending polls and alerts.
    Status { group_id: Option<String> },
    Messages { group_id: String },
    /// Moderation docket (only for @moderation).
    Cases {
        #[arg(long)]
        verified: Option<bool>,
    },
    Decide {
        case_id: String,
        decision: DecisionKind,
        #[arg(long, default_value_t = 7)]
        days: u64,
    },
    Bench {
        #[command(subcommand)]
        kind: BenchKind,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum Choice {
    Yes,
    No,
}

#[derive(ValueEnum, Debug, Clone, Copy)]
pub enum DecisionKind {
    None,
    Ban,
    Revoke,
}

#[derive(Args, Debug, Clone)]
pub struct BenchOpts {
    #[arg(long, value_delimiter = ',', default_values_t = bench::DEFAULT_SIZES.to_vec())]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = bench::MIN_TRIALS)]
    pub trials: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum BenchKind {
    Micro(BenchOpts),
    Vote(BenchOpts),
    Server {
        #[command(flatten)]
        opts: BenchOpts,
        #[arg(long, default_value_t = 8)]
        clients: usize,
        #[arg(long, default_value_t = 1000)]
        requests: usize,
        /// Unordered fractions to run.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.9, 0.5, 0.0])]
        uam: Vec<f64>,
    },
}

fn print(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

fn services(g: &Global) -> Services {
    Services {
        ds: DsClient::new(Arc::new(WsTransport::new(&g.ds_url))),
        auth: AsClient::new(Arc::new(WsTransport::new(&g.as_url))),
        clock: Arc::new(SystemClock),
    }
}

async fn open(g: &Global) -> anyhow::Result<Node> {
    Ok(Node::open(Store::new(&g.data_dir), services(g)).await?)
}

fn token(g: &Global) -> anyhow::Result<String> {
    if let Some(t) = &g.token {
        return Ok(t.clone());
    }
    let path = g.data_dir.join("token");
    if let Ok(t) = std::fs::read_to_string(&path) {
        return Ok(t.trim().to_string());
    }
    let mut raw = [0u8; 16];
    rand::thread_rng().fill_bytes(&mut raw);
    let t = hex::encode(raw);
    std::fs::create_dir_all(&g.data_dir)?;
    std::fs::write(&path, &t)?;
    Ok(t)
}

async fn bind(port: u16) -> anyhow::Result<TcpListener> {
    TcpListener::bind(("127.0.0.1", port)).await.with_context(|| format!("binding port {port}"))
}

/// Runs one governance action the same way the control API does.
async fn action(g: &Global, group_id: &str, action_type: ActionType, payload: Value) -> anyhow::Result<()> {
    let mut node = open(g).await?;
    match control::apply_action(&mut node, group_id, ActionBody { action_type, payload }).await {
        Ok(v) => {
            print(&v);
            Ok(())
        }
        Err(control::ApiError(_, body)) => match body.get("error") {
            Some(msg) => bail!("{}", msg.as_str().unwrap_or_default()),
            None => bail!("action rejected: {body}"),
        },
    }
}

fn parse_type(s: &str) -> anyhow::Result<ActionType> {
    s.parse().map_err(|_| anyhow!("unknown action type {s:?}"))
}

pub async fn run(cli: Cli) -> anyhow::Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Ds { port, snapshot, faults } => {
            let clock: Arc<dyn Clock> = Arc::new(SystemClock);
            let moderator = Arc::new(AsClient::new(Arc::new(WsTransport::new(&g.as_url))));
            let ds = Arc::new(DeliveryService::new(clock, moderator));
            if let Some(p) = snapshot.as_ref().filter(|p| p.exists()) {
                ds.load(p)?;
            }
            if let Some(p) = faults {
                let f: Faults = crate::store::read_json(&p)?;
                ds.set_faults(f);
            }
            if let Some(p) = snapshot {
                let ds = ds.clone();
                tokio::spawn(async move {
                    let mut t = tokio::time::interval(Duration::from_secs(1));
                    loop {
                        t.tick().await;
                        if let Err(e) = ds.save(&p) {
                            tracing::warn!(error = %e, "snapshot failed");
                        }
                    }
                });
            }
            tracing::info!(port, "delivery service listening");
            serve_ws(bind(port).await?, ds).await?;
        }
        Command::As { port, snapshot } => {
            let clock: Arc<dyn Clock> = Arc::new(SystemClock);
            let auth = match snapshot.as_ref().filter(|p| p.exists()) {
                Some(p) => AuthService::load(p, clock)?,
                None => AuthService::new(clock),
            };
            let auth = Arc::new(auth);
            if let Some(p) = snapshot {
                let auth = auth.clone();
                tokio::spawn(async move {
                    let mut t = tokio::time::interval(Duration::from_secs(1));
                    loop {
                        t.tick().await;
                        if let Err(e) = auth.save(&p) {
                            tracing::warn!(error = %e, "snapshot failed");
                        }
                    }
                });
            }
            tracing::info!(port, "authentication service listening");
            serve_ws(bind(port).await?, auth).await?;
        }
        Command::Serve { port } => {
            let clock: Arc<dyn Clock> = Arc::new(SystemClock);
            let auth = Arc::new(AuthService::new(clock.clone()));
            let ds = Arc::new(DeliveryService::new(clock, auth.clone()));
            let mux = Mux::new().route(ds::OPS, ds).route(auth::OPS, auth);
            tracing::info!(port, "delivery and authentication services listening");
            serve_ws(bind(port).await?, Arc::new(mux)).await?;
        }
        Command::Daemon { port } => {
            let token = token(g)?;
            let daemon = Daemon::new(open(g).await?, token);
            if g.poll_ms > 0 {
                control::spawn_poller(daemon.clone(), Duration::from_millis(g.poll_ms));
            }
            tracing::info!(port, "control API listening");
            control::serve(bind(port).await?, daemon).await?;
        }
        Command::Register { username } => {
            let store = Store::new(&g.data_dir);
            if store.exists() {
                bail!("{} already holds an identity", g.data_dir.display());
            }
            let node = Node::register(&username, services(g), Some(store), None).await?;
            print(&json!({ "registered": node.username() }));
        }
        Command::CreateGroup { group_id, community } => {
            let mut node = open(g).await?;
            node.create_group(&group_id, community.as_deref().unwrap_or(&group_id)).await?;
            print(&json!(node.client.summary(&group_id)?));
        }
        Command::Invite { group_id, user } => {
            action(g, &group_id, ActionType::InviteUser, json!({ "user": user })).await?;
        }
        Command::Accept { group_id } => {
            let mut node = open(g).await?;
            node.sync().await?;
            let summary = node.client.summary(&group_id).map_err(|_| anyhow!("no invitation to {group_id:?} has arrived"))?;
            print(&json!(summary));
        }
        Command::Send { group_id, text } => action(g, &group_id, ActionType::SendText, json!({ "text": text })).await?,
        Command::Rename { group_id, name } => action(g, &group_id, ActionType::ChangeName, json!({ "name": name })).await?,
        Command::SetTopic { group_id, topic } => {
            action(g, &group_id, ActionType::ChangeTopic, json!({ "topic": topic })).await?
        }
        Command::DefRole { group_id, role, permissions } => {
            let perms = permissions.iter().map(|p| parse_type(p)).collect::<anyhow::Result<Vec<_>>>()?;
            action(g, &group_id, ActionType::DefRole, json!({ "role": role, "permissions": perms })).await?
        }
        Command::SetRole { group_id, user, roles } => {
            action(g, &group_id, ActionType::SetUserRole, json!({ "user": user, "roles": roles })).await?
        }
        Command::Kick { group_id, user } => action(g, &group_id, ActionType::KickUser, json!({ "user": user })).await?,
        Command::SetFilter { group_id, words } => {
            action(g, &group_id, ActionType::SetTextFilter, json!({ "words": words })).await?
        }
        Command::PollStart { group_id, action_type, payload } => {
            let payload: Value = serde_json::from_str(&payload).context("payload must be JSON")?;
            let target = json!({ "action_type": parse_type(&action_type)?, "payload": payload });
            action(g, &group_id, ActionType::PollStart, json!({ "target": target })).await?
        }
        Command::Vote { group_id, proposal_id, choice } => {
            let choice = match choice {
                Choice::Yes => "yes",
                Choice::No => "no",
            };
            action(g, &group_id, ActionType::PollVote, json!({ "proposal_id": proposal_id, "choice": choice })).await?
        }
        Command::Report { group_id, message_ids, reason, to } => {
            let body = json!({ "message_ids": message_ids, "reason": reason, "to_group": to });
            action(g, &group_id, ActionType::Report, body).await?
        }
        Command::Escalate { group_id, message_ids, reason } => {
            action(g, &group_id, ActionType::Escalate, json!({ "message_ids": message_ids, "reason": reason })).await?
        }
        Command::Sync => {
            let mut node = open(g).await?;
            let processed = node.sync().await?;
            node.tick().await?;
            print(&json!({ "processed": processed }));
        }
        Command::Status { group_id } => {
            let node = open(g).await?;
            let c = &node.client;
            let groups: Vec<String> = match group_id {
                Some(gid) => vec![gid],
                None => c.groups.keys().cloned().collect(),
            };
            let summaries = groups.iter().map(|gid| c.summary(gid)).collect::<Result<Vec<_>, _>>()?;
            print(&json!({ "username": c.username(), "groups": summaries, "alerts": c.alerts }));
        }
        Command::Messages { group_id } => {
            let node = open(g).await?;
            let con = &node.client.group(&group_id)?.con;
            let msgs: Vec<Value> = con
                .visible()
                .map(|m| json!({ "id": m.id, "sender": m.sender, "type": m.action.action_type, "payload": m.action.payload }))
                .collect();
            print(&json!(msgs));
        }
        Command::Cases { verified } => {
            let node = open(g).await?;
            print(&json!(node.cases(verified)?));
        }
        Command::Decide { case_id, decision, days } => {
            let mut node = open(g).await?;
            let decision = match decision {
                DecisionKind::None => Decision::None,
                DecisionKind::Ban => Decision::Ban { days },
                DecisionKind::Revoke => Decision::Revoke,
            };
            print(&json!(node.decide(&case_id, decision).await?));
        }
        Command::Bench { kind } => run_bench(kind).await?,
    }
    Ok(())
}

async fn run_bench(kind: BenchKind) -> anyhow::Result<()> {
    let (rows, out) = match kind {
        BenchKind::Micro(o) => (bench::run_micro(&o.sizes, o.trials, Wire::Loopback).await?, o.out),
        BenchKind::Vote(o) => (bench::run_vote_macro(&o.sizes, o.trials, Wire::Loopback).await?, o.out),
        BenchKind::Server { opts, clients, requests, uam } => {
            let mut rows = Vec::new();
            for (i, &frac) in uam.iter().enumerate() {
                for t in 0..opts.trials {
                    let (summary, row) = bench::run_server_load(clients, frac, requests, (i * 100 + t) as u64, t).await?;
                    eprintln!("{}", serde_json::to_string(&summary)?);
                    rows.push(row);
                }
            }
            (rows, opts.out)
        }
    };
    match out {
        Some(path) => bench::write_csv(&rows, std::fs::File::create(path)?)?,
        None => bench::write_csv(&rows, std::io::stdout())?,
    }
    Ok(())
}
