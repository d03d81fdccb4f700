//! A client node: the core client state machine bound to the delivery and
//! authentication services, optional persistence and an event hub. The
//! CLI, the daemon's control API, the benchmarks and the acceptance suite
//! all drive clients through this type.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use polis_core::backoff::Backoff;
use polis_core::client::{escalation_group, Client, ClientError, ClientEvent, Outgoing, MODERATION_USER};
use polis_core::governance::action::payload;
use polis_core::governance::{ActionMessage, ActionType, Evaluation, Report};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};
use tokio::sync::broadcast;

use crate::clock::{Clock, DAY};
use crate::moderation::{Case, Decision, Docket, DocketError};
use crate::proto::{ops, AdminOrder, BanOrder, RevokeOrder, SendOrdered, SendOrderedResult, SendUnordered, ServiceError, SyncRequest, SyncResult};
use crate::remote::{AsClient, DirectoryCache, DsClient, RemoteError};
use crate::store::Store;
use crate::transport::TransportError;

const EVENT_BACKLOG: usize = 1024;
const MAX_FLUSH_ROUNDS: usize = 64;
const MAX_SYNC_ROUNDS: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum NodeError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Remote(#[from] RemoteError),
    #[error(transparent)]
    Docket(#[from] DocketError),
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("no client state in the data directory; run register first")]
    NotRegistered,
    #[error("only {MODERATION_USER} keeps a docket")]
    NotModerator,
}

impl From<TransportError> for NodeError {
    fn from(e: TransportError) -> Self {
        NodeError::Remote(RemoteError::Transport(e))
    }
}

pub type Result<T> = std::result::Result<T, NodeError>;

/// Fan-out of client events to control API subscribers, with a short
/// history so reconnecting subscribers can resume by event id.
pub struct EventHub {
    tx: broadcast::Sender<ClientEvent>,
    recent: Mutex<VecDeque<ClientEvent>>,
}

impl EventHub {
    pub fn new() -> Self {
        Self { tx: broadcast::channel(EVENT_BACKLOG).0, recent: Mutex::new(VecDeque::new()) }
    }

    pub fn publish(&self, ev: ClientEvent) {
        let mut recent = self.recent.lock().expect("event lock");
        if recent.len() == EVENT_BACKLOG {
            recent.pop_front();
        }
        recent.push_back(ev.clone());
        let _ = self.tx.send(ev);
    }

    /// Events newer than `since`, plus a receiver for later ones.
    pub fn subscribe(&self, since: u64) -> (Vec<ClientEvent>, broadcast::Receiver<ClientEvent>) {
        let recent = self.recent.lock().expect("event lock");
        let rx = self.tx.subscribe();
        (recent.iter().filter(|e| e.id > since).cloned().collect(), rx)
    }

    pub fn recent(&self) -> Vec<ClientEvent> {
        self.recent.lock().expect("event lock").iter().cloned().collect()
    }
}

impl Default for EventHub {
    fn default() -> Self {
        Self::new()
    }
}

/// Counters for benchmarks.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NodeStats {
    pub commit_retries: u64,
    pub commits: u64,
}

pub struct Node {
    pub client: Client,
    pub dir: DirectoryCache,
    pub docket: Option<Docket>,
    pub backoff: Backoff,
    /// Multiplies every retry delay; zero disables sleeping.
    pub backoff_scale: f64,
    pub stats: NodeStats,
    ds: DsClient,
    auth: AsClient,
    pub rng: ChaCha20Rng,
    store: Option<Store>,
    hub: Arc<EventHub>,
    clock: Arc<dyn Clock>,
}

/// The service endpoints and clock a node runs against.
#[derive(Clone)]
pub struct Services {
    pub ds: DsClient,
    pub auth: AsClient,
    pub clock: Arc<dyn Clock>,
}

impl Node {
    fn assemble(client: Client, services: Services, store: Option<Store>, rng: ChaCha20Rng) -> Self {
        let docket = (client.username() == MODERATION_USER).then(Docket::default);
        Self {
            client,
            dir: DirectoryCache::default(),
            docket,
            backoff: Backoff::default(),
            backoff_scale: 1.0,
            stats: NodeStats::default(),
            ds: services.ds,
            auth: services.auth,
            rng,
            store,
            hub: Arc::new(EventHub::new()),
            clock: services.clock,
        }
    }

    /// Creates an identity, registers it and uploads KeyPackages.
    pub async fn register(username: &str, services: Services, store: Option<Store>, seed: Option<u64>) -> Result<Self> {
        let mut rng = match seed {
            Some(s) => ChaCha20Rng::seed_from_u64(s),
            None => ChaCha20Rng::from_entropy(),
        };
        let (client, kps) = Client::new(username, &mut rng)?;
        let entry = services.auth.register(username, client.mls.sig.public, client.gov_key.public).await?;
        services.ds.publish_key_packages(username, kps).await?;
        let mut node = Self::assemble(client, services, store, rng);
        node.dir.insert(entry);
        node.persist()?;
        Ok(node)
    }

    /// Loads a node from its data directory and finishes any interrupted
    /// sync batch.
    pub async fn open(store: Store, services: Services) -> Result<Self> {
        if !store.exists() {
            return Err(NodeError::NotRegistered);
        }
        let client = store.load()?;
        let mut node = Self::assemble(client, services, Some(store.clone()), ChaCha20Rng::from_entropy());
        if node.docket.is_some() {
            node.docket = Some(crate::store::read_json(&store.path("docket.json")).unwrap_or_default());
        }
        if let Some(batch) = store.load_inbox() {
            node.ingest_batch(batch).await?;
            node.finish().await?;
            store.clear_inbox()?;
        }
        Ok(node)
    }

    pub fn username(&self) -> &str {
        self.client.username()
    }

    pub fn hub(&self) -> Arc<EventHub> {
        self.hub.clone()
    }

    pub fn set_hub(&mut self, hub: Arc<EventHub>) {
        self.hub = hub;
    }

    pub fn ds(&self) -> &DsClient {
        &self.ds
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn persist(&self) -> Result<()> {
        if let Some(store) = &self.store {
            store.save(&self.client)?;
            if let Some(d) = &self.docket {
                crate::store::write_json(&store.path("docket.json"), d)?;
            }
        }
        Ok(())
    }

    /// Delivers outgoing work, routes events and saves.
    pub async fn finish(&mut self) -> Result<()> {
        let flushed = self.flush().await;
        self.resolve_keys().await?;
        self.publish_events().await?;
        self.persist()?;
        flushed
    }

    async fn resolve_keys(&mut self) -> Result<()> {
        let users = self.client.unresolved_keys();
        if !users.is_empty() {
            self.dir.refresh(&self.auth, &users, &BTreeSet::new()).await?;
            self.client.resolve_keys(&self.dir);
        }
        Ok(())
    }

    async fn publish_events(&mut self) -> Result<()> {
        loop {
            let events = self.client.take_events();
            if events.is_empty() {
                return Ok(());
            }
            for ev in events {
                if ev.kind == "escalation" && self.docket.is_some() {
                    self.open_case(&ev).await?;
                }
                self.hub.publish(ev);
            }
        }
    }

    async fn open_case(&mut self, ev: &ClientEvent) -> Result<()> {
        let Ok(action) = serde_json::from_value::<ActionMessage>(ev.data["action"].clone()) else { return Ok(()) };
        // Verify against fresh keys, including the reported user's.
        let mut names = BTreeSet::from([action.sender().to_string()]);
        if let Ok(r) = action.parse::<Report>() {
            names.insert(r.reported);
        }
        self.dir.refresh(&self.auth, &names, &BTreeSet::new()).await?;
        let now = self.clock.now();
        let docket = self.docket.as_mut().expect("checked by caller");
        match docket.receive_escalation(&action, &self.dir, now) {
            Ok(case) => {
                let data = json!({ "case_id": case.case_id, "verified": case.verified });
                self.client.notify("case_opened", &ev.group_id, data);
            }
            Err(e) => tracing::warn!(error = %e, "dropping escalation"),
        }
        Ok(())
    }

    /// Sends everything the client has queued.
    pub async fn flush(&mut self) -> Result<()> {
        self.flush_with(|_| true).await
    }

    /// Like [`Node::flush`] but lets the caller withhold items.
    pub async fn flush_with(&mut self, mut keep: impl FnMut(&Outgoing) -> bool) -> Result<()> {
        for _ in 0..MAX_FLUSH_ROUNDS {
            let outs = self.client.take_outgoing();
            if outs.is_empty() {
                return Ok(());
            }
            let mut outs = outs.into_iter();
            while let Some(out) = outs.next() {
                if !keep(&out) {
                    continue;
                }
                if let Err(e) = self.deliver(out.clone()).await {
                    // Keep unsent work for the next attempt.
                    if matches!(e, NodeError::Remote(RemoteError::Transport(_))) {
                        self.client.outbox.push(out);
                        self.client.outbox.extend(outs);
                    }
                    return Err(e);
                }
            }
        }
        Ok(())
    }

    pub async fn deliver(&mut self, out: Outgoing) -> Result<()> {
        let me = self.username().to_string();
        match out {
            Outgoing::Commit { group_id, envelope } => {
                let last_acked = self.client.groups.get(&group_id).and_then(|g| g.last_acked);
                let req = SendOrdered { sender: me, group_id: group_id.clone(), envelope, last_acked };
                match self.ds.send_ordered(req).await {
                    Ok(SendOrderedResult::Accepted { seq, .. }) => {
                        self.stats.commits += 1;
                        self.client.commit_accepted(&group_id, seq, &self.dir, &mut self.rng)?;
                    }
                    Ok(SendOrderedResult::RejectedConflict { backlog }) => {
                        self.stats.commit_retries += 1;
                        let attempts = self
                            .client
                            .mls
                            .group(&group_id)
                            .ok()
                            .and_then(|g| g.pending_commit.as_ref())
                            .map_or(1, |p| p.attempts);
                        let delay = self.backoff.delay(attempts, &mut self.rng).mul_f64(self.backoff_scale);
                        if delay > Duration::ZERO {
                            tokio::time::sleep(delay).await;
                        }
                        self.refresh_for(&backlog).await?;
                        self.client.commit_rejected(&group_id, &backlog, &self.dir, &mut self.rng)?;
                    }
                    Err(RemoteError::Service(e)) => {
                        self.client.mls.abandon_pending(&group_id).map_err(ClientError::from)?;
                        return Err(RemoteError::Service(e).into());
                    }
                    Err(e) => {
                        self.client.mls.abandon_pending(&group_id).map_err(ClientError::from)?;
                        return Err(e.into());
                    }
                }
            }
            Outgoing::Unordered { envelope, recipients } => {
                self.ds.send_unordered(SendUnordered { sender: me, recipients, envelope }).await?;
            }
            Outgoing::Welcome { recipient, envelope } => {
                self.ds.welcome(&me, &recipient, envelope).await?;
            }
            Outgoing::FetchKeyPackage { group_id, user } => {
                let kp = self.ds.fetch_key_package(&user).await?;
                self.client.add_invited(&group_id, kp, &mut self.rng)?;
            }
        }
        Ok(())
    }

    async fn refresh_for(&mut self, envs: &[polis_core::mls::Envelope]) -> Result<()> {
        let senders: BTreeSet<String> = envs.iter().map(|e| e.sender.clone()).collect();
        let members: BTreeSet<String> = self.client.mls.groups().flat_map(|g| g.roster()).collect();
        self.dir.refresh(&self.auth, &senders, &members).await?;
        Ok(())
    }

    async fn ingest_batch(&mut self, batch: SyncResult) -> Result<usize> {
        let all: Vec<_> = batch.ordered.values().flatten().chain(batch.unordered.iter()).cloned().collect();
        self.refresh_for(&all).await?;
        Ok(self.client.ingest_sync(&batch.ordered, &batch.unordered, &self.dir, &mut self.rng))
    }

    /// Pulls and processes everything pending at the delivery service.
    /// Returns the number of envelopes processed.
    pub async fn sync(&mut self) -> Result<usize> {
        let mut total = 0;
        for _ in 0..MAX_SYNC_ROUNDS {
            let last_acked: BTreeMap<String, Option<u64>> =
                self.client.groups.iter().map(|(g, s)| (g.clone(), s.last_acked)).collect();
            let batch = self.ds.sync(SyncRequest { user: self.username().into(), last_acked }).await?;
            if batch.is_empty() {
                break;
            }
            if let Some(store) = &self.store {
                store.save_inbox(&batch)?;
            }
            total += self.ingest_batch(batch).await?;
            self.finish().await?;
            if let Some(store) = &self.store {
                store.clear_inbox()?;
            }
        }
        self.finish().await?;
        Ok(total)
    }

    /// Timer work: missing announcements and vote batching.
    pub async fn tick(&mut self) -> Result<()> {
        self.client.tick(&self.dir, &mut self.rng);
        self.finish().await
    }

    async fn prepare(&mut self, group_id: &str) -> Result<()> {
        let members: BTreeSet<String> = self.client.roster(group_id).unwrap_or_default().into_iter().collect();
        self.dir.refresh(&self.auth, &BTreeSet::new(), &members).await?;
        Ok(())
    }

    pub async fn create_group(&mut self, group_id: &str, community_id: &str) -> Result<()> {
        self.client.create_group(group_id, community_id, &mut self.rng)?;
        self.finish().await
    }

    /// Invites `user` directly if allowed; otherwise the invitation has to
    /// go through a poll.
    pub async fn invite(&mut self, group_id: &str, user: &str) -> Result<Evaluation> {
        self.prepare(group_id).await?;
        self.client.gov(group_id)?;
        let kp = self.ds.fetch_key_package(user).await?;
        let ev = self.client.invite(group_id, kp, &self.dir, &mut self.rng)?;
        self.finish().await?;
        Ok(ev)
    }

    pub async fn act(&mut self, group_id: &str, t: ActionType, payload: Value) -> Result<Evaluation> {
        self.prepare(group_id).await?;
        let ev = self.client.act(group_id, t, payload, &self.dir, &mut self.rng)?;
        self.finish().await?;
        Ok(ev)
    }

    pub async fn send_text(&mut self, group_id: &str, text: &str) -> Result<Evaluation> {
        self.act(group_id, ActionType::SendText, json!({ "text": text })).await
    }

    pub async fn vote(&mut self, group_id: &str, proposal_id: &str, yes: bool) -> Result<Evaluation> {
        let choice = if yes { payload::Choice::Yes } else { payload::Choice::No };
        let p = payload::PollVote { proposal_id: proposal_id.into(), choice };
        self.act(group_id, ActionType::PollVote, serde_json::to_value(p).expect("plain struct")).await
    }

    /// Returns the proposal id.
    pub async fn poll_start(&mut self, group_id: &str, target: ActionType, payload: Value) -> Result<(String, Evaluation)> {
        self.prepare(group_id).await?;
        let r = self.client.poll_start(group_id, target, payload, &self.dir, &mut self.rng)?;
        self.finish().await?;
        Ok(r)
    }

    pub async fn report(&mut self, group_id: &str, ids: &[String], reason: &str) -> Result<Report> {
        self.report_to(group_id, group_id, ids, reason).await
    }

    pub async fn report_to(&mut self, source: &str, dest: &str, ids: &[String], reason: &str) -> Result<Report> {
        self.prepare(dest).await?;
        let r = self.client.report_to(source, dest, ids, reason, &self.dir, &mut self.rng)?;
        self.finish().await?;
        Ok(r)
    }

    /// Escalates reported messages from `group_id` to the moderation service.
    pub async fn escalate(&mut self, group_id: &str, ids: &[String], reason: &str) -> Result<Report> {
        let report = self.client.build_report(group_id, ids, reason)?;
        self.escalate_report(&report).await?;
        Ok(report)
    }

    pub async fn escalate_report(&mut self, report: &Report) -> Result<()> {
        let gid = escalation_group(self.username());
        let kp = match self.client.groups.contains_key(&gid) {
            true => None,
            false => Some(self.ds.fetch_key_package(MODERATION_USER).await?),
        };
        let names = BTreeSet::from([MODERATION_USER.to_string()]);
        self.dir.refresh(&self.auth, &BTreeSet::new(), &names).await?;
        self.client.escalate(report, kp, &self.dir, &mut self.rng)?;
        self.finish().await
    }

    pub fn cases(&self, verified: Option<bool>) -> Result<Vec<Case>> {
        let d = self.docket.as_ref().ok_or(NodeError::NotModerator)?;
        Ok(d.list(verified).into_iter().cloned().collect())
    }

    /// Records a decision and carries it out at the platform services.
    pub async fn decide(&mut self, case_id: &str, decision: Decision) -> Result<Case> {
        let now = self.clock.now();
        let d = self.docket.as_mut().ok_or(NodeError::NotModerator)?;
        let case = d.decide(case_id, decision.clone(), now)?.clone();
        let target = case.report.reported.clone();
        let me = self.username().to_string();
        match decision {
            Decision::None => {}
            Decision::Ban { days } => {
                let order = BanOrder { username: target, until: Some(now + days * DAY) };
                self.ds.ban(AdminOrder::sign(ops::BAN, &me, now, order, &self.client.mls.sig)).await?;
            }
            Decision::Revoke => {
                let order = RevokeOrder { username: target };
                self.auth.revoke(AdminOrder::sign(ops::REVOKE, &me, now, order, &self.client.mls.sig)).await?;
            }
        }
        self.persist()?;
        Ok(case)
    }

    pub fn is_banned_error(e: &NodeError) -> bool {
        matches!(e, NodeError::Remote(RemoteError::Service(ServiceError::Banned(_))))
    }
}
