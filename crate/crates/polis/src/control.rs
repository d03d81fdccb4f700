//! The daemon's local control API: JSON over HTTP plus a WebSocket event
//! stream, guarded by a bearer token and meant for loopback only.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use polis_core::client::ClientError;
use polis_core::governance::{ActionType, Evaluation, GovError};
use polis_core::mls::MlsError;
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, Mutex};

use crate::moderation::{Decision, DocketError};
use crate::node::{EventHub, Node, NodeError};
use crate::proto::ServiceError;
use crate::remote::RemoteError;

pub const DEFAULT_PORT: u16 = 7800;

pub struct Daemon {
    pub node: Mutex<Node>,
    hub: Arc<EventHub>,
    token: String,
}

impl Daemon {
    pub fn new(node: Node, token: impl Into<String>) -> Arc<Self> {
        let hub = node.hub();
        Arc::new(Self { node: Mutex::new(node), hub, token: token.into() })
    }

    pub fn hub(&self) -> &Arc<EventHub> {
        &self.hub
    }
}

pub struct ApiError(pub StatusCode, pub Value);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(self.1)).into_response()
    }
}

fn error(status: StatusCode, msg: impl ToString) -> ApiError {
    ApiError(status, json!({ "error": msg.to_string() }))
}

impl From<NodeError> for ApiError {
    fn from(e: NodeError) -> Self {
        use StatusCode as S;
        match &e {
            NodeError::Client(ClientError::Rejected(ev)) => ApiError(S::UNPROCESSABLE_ENTITY, verdict_body(ev, None)),
            NodeError::Client(ClientError::Mls(MlsError::UnknownGroup(_)))
            | NodeError::Remote(RemoteError::Service(ServiceError::NotFound(_)))
            | NodeError::Docket(DocketError::UnknownCase(_))
            | NodeError::NotModerator => error(S::NOT_FOUND, e),
            NodeError::Client(ClientError::Gov(GovError::NotPermitted))
            | NodeError::Docket(DocketError::UnverifiedCase(_)) => error(S::UNPROCESSABLE_ENTITY, e),
            NodeError::Client(_) => error(S::CONFLICT, e),
            NodeError::Remote(RemoteError::Service(ServiceError::Banned(_))) => error(S::FORBIDDEN, e),
            NodeError::Remote(RemoteError::Service(_)) => error(S::BAD_REQUEST, e),
            NodeError::Remote(RemoteError::Transport(_)) => error(S::BAD_GATEWAY, e),
            _ => error(S::INTERNAL_SERVER_ERROR, e),
        }
    }
}

fn verdict_body(ev: &Evaluation, proposal_id: Option<String>) -> Value {
    let mut body = json!({ "verdict": ev.verdict });
    if let Some(r) = &ev.reason {
        body["reason"] = json!(r);
    }
    if let Some(p) = proposal_id {
        body["proposal_id"] = json!(p);
    }
    body
}

type ApiResult = Result<Json<Value>, ApiError>;

pub fn router(daemon: Arc<Daemon>) -> Router {
    Router::new()
        .route("/groups", get(list_groups).post(create_group))
        .route("/groups/:id/state", get(group_state))
        .route("/groups/:id/messages", get(group_messages))
        .route("/groups/:id/actions", post(post_action))
        .route("/alerts", get(alerts))
        .route("/sync", post(sync))
        .route("/ms/cases", get(cases))
        .route("/ms/cases/:id/decision", post(decide))
        .route("/events", get(events))
        .layer(middleware::from_fn_with_state(daemon.clone(), require_token))
        .with_state(daemon)
}

pub async fn serve(listener: TcpListener, daemon: Arc<Daemon>) -> std::io::Result<()> {
    axum::serve(listener, router(daemon)).await
}

/// Syncs and ticks on an interval until the process exits.
pub fn spawn_poller(daemon: Arc<Daemon>, every: Duration) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut timer = tokio::time::interval(every);
        loop {
            timer.tick().await;
            let mut node = daemon.node.lock().await;
            if let Err(e) = node.sync().await {
                tracing::warn!(error = %e, "background sync failed");
            }
            if let Err(e) = node.tick().await {
                tracing::warn!(error = %e, "background tick failed");
            }
        }
    })
}

async fn require_token(State(d): State<Arc<Daemon>>, req: Request, next: Next) -> Result<Response, ApiError> {
    let bearer = req
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .map(str::to_string);
    // Browsers cannot set headers on WebSocket upgrades.
    let query = req.uri().query().and_then(|q| {
        q.split('&').find_map(|kv| kv.strip_prefix("token=")).map(str::to_string)
    });
    match bearer.or(query) {
        Some(t) if t == d.token => Ok(next.run(req).await),
        _ => Err(error(StatusCode::UNAUTHORIZED, "bad token")),
    }
}

async fn list_groups(State(d): State<Arc<Daemon>>) -> ApiResult {
    let node = d.node.lock().await;
    let c = &node.client;
    let groups: Vec<_> = c.groups.keys().filter_map(|g| c.summary(g).ok()).collect();
    Ok(Json(json!(groups)))
}

#[derive(Deserialize)]
struct CreateGroup {
    group_id: String,
    #[serde(default)]
    community_id: Option<String>,
}

async fn create_group(State(d): State<Arc<Daemon>>, Json(body): Json<CreateGroup>) -> Result<(StatusCode, Json<Value>), ApiError> {
    let mut node = d.node.lock().await;
    let community = body.community_id.as_deref().unwrap_or(&body.group_id);
    node.create_group(&body.group_id, community).await?;
    let summary = node.client.summary(&body.group_id).map_err(NodeError::from)?;
    Ok((StatusCode::CREATED, Json(json!(summary))))
}

async fn group_state(State(d): State<Arc<Daemon>>, Path(id): Path<String>) -> ApiResult {
    let node = d.node.lock().await;
    let summary = node.client.summary(&id).map_err(NodeError::from)?;
    let g = node.client.group(&id).map_err(NodeError::from)?;
    let mut body = json!(summary);
    body["governance"] = json!(g.gov);
    Ok(Json(body))
}

async fn group_messages(State(d): State<Arc<Daemon>>, Path(id): Path<String>) -> ApiResult {
    let node = d.node.lock().await;
    let con = &node.client.group(&id).map_err(NodeError::from)?.con;
    let messages: Vec<Value> = con
        .messages
        .iter()
        .map(|m| {
            json!({
                "id": m.id,
                "sender": m.sender,
                "epoch": m.epoch,
                "action_type": m.action.action_type,
                "payload": m.action.payload,
                "hidden": m.hidden,
                "removed": con.removed.contains(&m.id),
            })
        })
        .collect();
    Ok(Json(json!({ "messages": messages, "reports": con.reports, "reactions": con.reactions })))
}

#[derive(Deserialize)]
pub struct ActionBody {
    pub action_type: ActionType,
    #[serde(default)]
    pub payload: Value,
}

#[derive(Deserialize)]
struct ReportBody {
    message_ids: Vec<String>,
    reason: String,
    /// Report messages from `id` into another group's moderators.
    #[serde(default)]
    to_group: Option<String>,
}

#[derive(Deserialize)]
struct PollTarget {
    action_type: ActionType,
    #[serde(default)]
    payload: Value,
}

#[derive(Deserialize)]
struct PollStartBody {
    target: PollTarget,
}

#[derive(Deserialize)]
struct InviteBody {
    user: String,
}

fn bad_request(e: serde_json::Error) -> ApiError {
    error(StatusCode::BAD_REQUEST, e)
}

/// Routes one control-API action through the node. The CLI uses this too.
pub async fn apply_action(node: &mut Node, group_id: &str, body: ActionBody) -> Result<Value, ApiError> {
    node.client.group(group_id).map_err(NodeError::from)?;
    let ActionBody { action_type, payload } = body;
    let (ev, pid) = match action_type {
        ActionType::Report | ActionType::Escalate => {
            let r: ReportBody = serde_json::from_value(payload).map_err(bad_request)?;
            if action_type == ActionType::Escalate {
                node.escalate(group_id, &r.message_ids, &r.reason).await?;
            } else {
                let dest = r.to_group.as_deref().unwrap_or(group_id);
                node.report_to(group_id, dest, &r.message_ids, &r.reason).await?;
            }
            (Evaluation::passed(Vec::new()), None)
        }
        ActionType::PollStart => {
            let p: PollStartBody = serde_json::from_value(payload).map_err(bad_request)?;
            let (pid, ev) = node.poll_start(group_id, p.target.action_type, p.target.payload).await?;
            (ev, Some(pid))
        }
        ActionType::InviteUser => {
            let p: InviteBody = serde_json::from_value(payload.clone()).map_err(bad_request)?;
            let can_add = node.client.gov(group_id).map_err(NodeError::from)?.permissions(node.username()).contains(&ActionType::InviteUser);
            if can_add {
                (node.invite(group_id, &p.user).await?, None)
            } else {
                (node.act(group_id, action_type, payload).await?, None)
            }
        }
        _ => {
            let before = pending_ids(node, group_id);
            let ev = node.act(group_id, action_type, payload).await?;
            // A governed action opens a poll keyed by the action itself.
            let opened = pending_ids(node, group_id).into_iter().find(|p| !before.contains(p));
            (ev, opened)
        }
    };
    Ok(verdict_body(&ev, pid))
}

fn pending_ids(node: &Node, group_id: &str) -> Vec<String> {
    node.client.gov(group_id).map(|g| g.pending.keys().cloned().collect()).unwrap_or_default()
}

async fn post_action(
    State(d): State<Arc<Daemon>>,
    Path(id): Path<String>,
    Json(body): Json<ActionBody>,
) -> Result<(StatusCode, Json<Value>), ApiError> {
    let mut node = d.node.lock().await;
    let out = apply_action(&mut node, &id, body).await?;
    Ok((StatusCode::ACCEPTED, Json(out)))
}

async fn alerts(State(d): State<Arc<Daemon>>) -> ApiResult {
    Ok(Json(json!(d.node.lock().await.client.alerts)))
}

async fn sync(State(d): State<Arc<Daemon>>) -> ApiResult {
    let mut node = d.node.lock().await;
    let processed = node.sync().await?;
    node.tick().await?;
    Ok(Json(json!({ "processed": processed })))
}

async fn cases(State(d): State<Arc<Daemon>>, Query(q): Query<BTreeMap<String, String>>) -> ApiResult {
    let verified = match q.get("verified").map(String::as_str) {
        None => None,
        Some("true") => Some(true),
        Some("false") => Some(false),
        Some(other) => return Err(error(StatusCode::BAD_REQUEST, format!("verified must be true or false, not {other:?}"))),
    };
    Ok(Json(json!(d.node.lock().await.cases(verified)?)))
}

async fn decide(State(d): State<Arc<Daemon>>, Path(id): Path<String>, Json(decision): Json<Decision>) -> ApiResult {
    Ok(Json(json!(d.node.lock().await.decide(&id, decision).await?)))
}

async fn events(
    State(d): State<Arc<Daemon>>,
    Query(q): Query<BTreeMap<String, String>>,
    ws: WebSocketUpgrade,
) -> Response {
    let since = q.get("since").and_then(|s| s.parse().ok()).unwrap_or(0);
    ws.on_upgrade(move |socket| stream_events(socket, d, since))
}

async fn stream_events(mut socket: WebSocket, d: Arc<Daemon>, since: u64) {
    let (backlog, mut rx) = d.hub.subscribe(since);
    let mut last = since;
    for ev in backlog {
        last = last.max(ev.id);
        if socket.send(Message::Text(json!(ev).to_string())).await.is_err() {
            return;
        }
    }
    loop {
        match rx.recv().await {
            Ok(ev) if ev.id > last => {
                last = ev.id;
                if socket.send(Message::Text(json!(ev).to_string())).await.is_err() {
                    return;
                }
            }
            Ok(_) | Err(broadcast::error::RecvError::Lagged(_)) => {}
            Err(broadcast::error::RecvError::Closed) => return,
        }
    }
}
