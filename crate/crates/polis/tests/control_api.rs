use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use polis::cluster::Cluster;
use polis::control::{self, Daemon};
use polis_core::client::MODERATION_USER;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tokio::net::TcpListener;

const TOKEN: &str = "secret-token";

struct Api {
    base: String,
    http: reqwest::Client,
    daemon: Arc<Daemon>,
}

impl Api {
    async fn start(daemon: Arc<Daemon>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let base = format!("http://{}", listener.local_addr().unwrap());
        tokio::spawn(control::serve(listener, daemon.clone()));
        Self { base, http: reqwest::Client::new(), daemon }
    }

    async fn get(&self, path: &str) -> (StatusCode, Value) {
        let r = self.http.get(format!("{}{path}", self.base)).bearer_auth(TOKEN).send().await.unwrap();
        (r.status(), r.json().await.unwrap_or(Value::Null))
    }

    async fn post(&self, path: &str, body: Value) -> (StatusCode, Value) {
        let r = self.http.post(format!("{}{path}", self.base)).bearer_auth(TOKEN).json(&body).send().await.unwrap();
        (r.status(), r.json().await.unwrap_or(Value::Null))
    }

    async fn act(&self, gid: &str, action_type: &str, payload: Value) -> (StatusCode, Value) {
        self.post(&format!("/groups/{gid}/actions"), json!({ "action_type": action_type, "payload": payload })).await
    }

    async fn sync(&self) -> u64 {
        let (s, v) = self.post("/sync", json!({})).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        v["processed"].as_u64().unwrap()
    }

    fn ws_url(&self, since: u64) -> String {
        format!("{}/events?token={TOKEN}&since={since}", self.base.replace("http://", "ws://"))
    }
}

async fn daemons(names: &[&str]) -> (Cluster, Vec<Api>) {
    let mut c = Cluster::in_process(21).await;
    let mut apis = Vec::new();
    for n in names {
        c.add(n).await.unwrap();
        let node = c.nodes.remove(*n).unwrap();
        apis.push(Api::start(Daemon::new(node, TOKEN)).await);
    }
    (c, apis)
}

async fn settle(apis: &[&Api]) {
    for _ in 0..10 {
        let mut moved = 0;
        for a in apis {
            moved += a.sync().await;
        }
        if moved == 0 {
            return;
        }
    }
}

#[tokio::test]
async fn token_is_required() {
    let (_c, apis) = daemons(&["alice"]).await;
    let a = &apis[0];
    let url = format!("{}/groups", a.base);
    assert_eq!(a.http.get(&url).send().await.unwrap().status(), StatusCode::UNAUTHORIZED);
    assert_eq!(a.http.get(&url).bearer_auth("wrong").send().await.unwrap().status(), StatusCode::UNAUTHORIZED);
    let q = a.http.get(format!("{url}?token={TOKEN}")).send().await.unwrap();
    assert_eq!(q.status(), StatusCode::OK);
}

#[tokio::test]
async fn fresh_daemon_and_unknown_group() {
    let (_c, apis) = daemons(&["alice"]).await;
    let a = &apis[0];
    assert_eq!(a.get("/groups").await, (StatusCode::OK, json!([])));
    assert_eq!(a.get("/alerts").await, (StatusCode::OK, json!([])));
    assert_eq!(a.act("nope", "SendText", json!({ "text": "x" })).await.0, StatusCode::NOT_FOUND);
    assert_eq!(a.get("/groups/nope/state").await.0, StatusCode::NOT_FOUND);
    assert_eq!(a.get("/ms/cases").await.0, StatusCode::NOT_FOUND);
    let (s, _) = a.post("/groups/nope/actions", json!({ "payload": {} })).await;
    assert!(s.is_client_error());
}

#[tokio::test]
async fn governance_through_the_api() {
    let (_c, apis) = daemons(&["alice", "bob"]).await;
    let (alice, bob) = (&apis[0], &apis[1]);
    let (s, v) = alice.post("/groups", json!({ "group_id": "g" })).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(v["roster"], json!(["alice"]));
    assert_eq!(v["user_roles"]["alice"], json!(["admin", "member"]));

    assert_eq!(alice.act("g", "InviteUser", json!({ "user": "bob" })).await, (StatusCode::ACCEPTED, json!({ "verdict": "passed" })));
    settle(&[alice, bob]).await;
    let (_, groups) = bob.get("/groups").await;
    assert_eq!(groups[0]["roster"], json!(["alice", "bob"]));

    // A member's rename becomes a poll.
    let (s, v) = bob.act("g", "ChangeName", json!({ "name": "bobs" })).await;
    assert_eq!((s, &v["verdict"]), (StatusCode::ACCEPTED, &json!("proposed")));
    // A member cannot kick.
    let (s, v) = bob.act("g", "KickUser", json!({ "user": "alice" })).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["verdict"], "failed");
    assert_eq!(v["reason"], "not permitted");

    // Explicit poll with a proposal id, then ballots.
    let target = json!({ "target": { "action_type": "ChangeTopic", "payload": { "topic": "rust" } } });
    let (s, v) = bob.act("g", "PollStart", target).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    let pid = v["proposal_id"].as_str().unwrap().to_string();
    settle(&[alice, bob]).await;
    for a in [alice, bob] {
        let (s, _) = a.act("g", "PollVote", json!({ "proposal_id": pid, "choice": "yes" })).await;
        assert_eq!(s, StatusCode::ACCEPTED);
    }
    settle(&[alice, bob]).await;
    let (_, st) = alice.get("/groups/g/state").await;
    assert_eq!(st["topic"], "rust");
    assert_eq!(st["governance"]["kv"]["topic"], "rust");
    assert_eq!(st["gov_hash"], bob.get("/groups/g/state").await.1["gov_hash"]);

    bob.act("g", "SendText", json!({ "text": "hello" })).await;
    settle(&[alice, bob]).await;
    let (_, m) = alice.get("/groups/g/messages").await;
    assert_eq!(m["messages"][0]["payload"]["text"], "hello");
    assert_eq!(m["messages"][0]["hidden"], false);
}

#[tokio::test]
async fn events_stream_and_resume() {
    let (_c, apis) = daemons(&["alice", "bob"]).await;
    let (alice, bob) = (&apis[0], &apis[1]);
    alice.post("/groups", json!({ "group_id": "g" })).await;
    alice.act("g", "InviteUser", json!({ "user": "bob" })).await;
    settle(&[alice, bob]).await;

    let (mut ws, _) = tokio_tungstenite::connect_async(bob.ws_url(0)).await.unwrap();
    let mut seen = Vec::new();
    // The backlog comes first.
    while let Ok(Some(Ok(msg))) = tokio::time::timeout(Duration::from_millis(300), ws.next()).await {
        seen.push(serde_json::from_str::<Value>(msg.to_text().unwrap()).unwrap());
    }
    assert!(seen.iter().any(|e| e["kind"] == "joined"));
    let last = seen.iter().map(|e| e["id"].as_u64().unwrap()).max().unwrap();

    alice.act("g", "ChangeName", json!({ "name": "renamed" })).await;
    bob.sync().await;
    let mut kinds = Vec::new();
    while let Ok(Some(Ok(msg))) = tokio::time::timeout(Duration::from_millis(300), ws.next()).await {
        let ev: Value = serde_json::from_str(msg.to_text().unwrap()).unwrap();
        assert!(ev["id"].as_u64().unwrap() > last);
        assert!(ev.get("group_id").is_some() && ev.get("data").is_some());
        kinds.push(ev["kind"].as_str().unwrap().to_string());
    }
    assert!(kinds.contains(&"epoch_advanced".to_string()), "{kinds:?}");
    assert!(kinds.contains(&"gov_updated".to_string()), "{kinds:?}");

    // Resuming from the last id replays only newer events.
    let (mut again, _) = tokio_tungstenite::connect_async(bob.ws_url(last)).await.unwrap();
    let first = again.next().await.unwrap().unwrap();
    let ev: Value = serde_json::from_str(first.to_text().unwrap()).unwrap();
    assert!(ev["id"].as_u64().unwrap() > last);
}

#[tokio::test]
async fn moderation_docket_and_ban() {
    let (_c, apis) = daemons(&["alice", "bob", MODERATION_USER]).await;
    let (alice, bob, ms) = (&apis[0], &apis[1], &apis[2]);
    alice.post("/groups", json!({ "group_id": "g" })).await;
    alice.act("g", "InviteUser", json!({ "user": "bob" })).await;
    settle(&[alice, bob]).await;
    alice.act("g", "SendText", json!({ "text": "abusive" })).await;
    settle(&[alice, bob]).await;
    let (_, m) = bob.get("/groups/g/messages").await;
    let id = m["messages"][0]["id"].clone();

    let (s, _) = bob.act("g", "Escalate", json!({ "message_ids": [id], "reason": "abuse" })).await;
    assert_eq!(s, StatusCode::ACCEPTED);
    settle(&[bob, ms]).await;
    assert_eq!(ms.get("/ms/cases?verified=false").await.1, json!([]));
    let (s, cases) = ms.get("/ms/cases?verified=true").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(cases.as_array().unwrap().len(), 1, "{cases}");
    let case_id = cases[0]["case_id"].as_str().unwrap();
    assert_eq!(cases[0]["report"]["reported"], "alice");

    let (s, _) = ms.post("/ms/cases/zzz/decision", json!({ "decision": "none" })).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, case) = ms.post(&format!("/ms/cases/{case_id}/decision"), json!({ "decision": "ban", "days": 7 })).await;
    assert_eq!(s, StatusCode::OK, "{case}");
    assert_eq!(case["decision"], json!({ "decision": "ban", "days": 7 }));

    let (s, v) = alice.act("g", "SendText", json!({ "text": "again" })).await;
    assert_eq!(s, StatusCode::FORBIDDEN, "{v}");
    assert!(ms.daemon.hub().recent().iter().any(|e| e.kind == "case_opened"));
}
