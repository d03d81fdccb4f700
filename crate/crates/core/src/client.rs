//! Client state machine: one user's messaging and governance state for all
//! of their groups.
//!
//! The client performs no IO. Every call may queue [`Outgoing`] items for
//! the caller to deliver and [`ClientEvent`]s for observers; results of
//! deliveries are fed back through [`Client::commit_accepted`],
//! [`Client::commit_rejected`] and [`Client::ingest`].

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::crypto::{self, Digest32, PublicKey, SigKeyPair};
use crate::directory::Directory;
use crate::governance::action::payload;
use crate::governance::announce::{accept_group, accept_payload, announcement_payload, check_accept, AcceptCheck};
use crate::governance::{
    build_report, evaluate, make_action_id, on_member_added, on_member_removed, state_hash, ActionHeader,
    ActionMessage, ActionType, ContentState, Effect, EvalContext, Evaluation, GovError, GovernanceState, Report,
    Verdict,
};
use crate::mls::{
    Channel, Envelope, GroupCryptoState, KeyPackage, MergedCommit, MlsClient, MlsError, MlsEvent, Proposal,
};
use crate::policy::{self, vote};

/// Reserved name of the platform moderation service.
pub const MODERATION_USER: &str = "@moderation";
/// Envelopes a joiner buffers before giving up on the announcement.
pub const AWAIT_LIMIT: usize = 30;
const ORPHAN_LIMIT: usize = 256;
const ORPHAN_RETRIES: u8 = 4;

pub fn escalation_group(user: &str) -> String {
    format!("ms:{user}")
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Mls(#[from] MlsError),
    #[error(transparent)]
    Gov(#[from] GovError),
    #[error("still waiting for the group state announcement in {0:?}")]
    AwaitingState(String),
    #[error("action rejected: {}", .0.reason.as_deref().unwrap_or("failed"))]
    Rejected(Evaluation),
    #[error("inviting {0:?} needs a key package")]
    NeedKeyPackage(String),
}

pub type Result<T> = core::result::Result<T, ClientError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum AlertKind {
    ForkDetected { parent_epoch: u64, sender: String },
    InvalidInitialState { joiner: String, inviter: String },
    UnauthorizedAdd { user: String, by: String },
    UnauthorizedRemove { user: String, by: String },
    KeyMismatch { user: String },
    AnnouncementMissing { inviter: String },
    AnnouncementRejected { reason: String },
    RejectedMessage { sender: String, reason: String },
    RetriesExhausted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Alert {
    pub group_id: String,
    #[serde(flatten)]
    pub kind: AlertKind,
}

/// Pushed to observers such as the control API.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEvent {
    pub id: u64,
    pub kind: String,
    pub group_id: String,
    pub data: Value,
}

/// Work for the transport layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outgoing {
    /// Submit to the sequencer, then report back with `commit_accepted`
    /// or `commit_rejected`.
    Commit { group_id: String, envelope: Envelope },
    /// `None` means every member the server knows of.
    Unordered { envelope: Envelope, recipients: Option<Vec<String>> },
    Welcome { recipient: String, envelope: Envelope },
    /// Fetch a KeyPackage and hand it to [`Client::add_invited`].
    FetchKeyPackage { group_id: String, user: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Awaiting {
    pub inviter: String,
    pub epoch: u64,
    pub buffered: Vec<MlsEvent>,
    pub timed_out: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedAccept {
    pub gov_hash: Digest32,
    pub inviter: String,
}

/// Everything a client keeps per group apart from the messaging state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupState {
    pub group_id: String,
    /// `None` until the announcement has been installed.
    pub gov: Option<GovernanceState>,
    pub con: ContentState,
    pub last_acked: Option<u64>,
    pub awaiting: Option<Awaiting>,
    pub expected_accepts: BTreeMap<String, ExpectedAccept>,
    pub quarantined: BTreeSet<String>,
    pub seen: BTreeSet<String>,
    /// Commits waiting for the in-flight one to resolve.
    pub queue: VecDeque<Vec<Proposal>>,
    /// Unordered actions to send after the next own commit merges.
    pub deferred: Vec<ActionMessage>,
    pub my_ballots: BTreeMap<String, ActionMessage>,
    /// Ballot count of the last batch queued per proposal.
    pub batched: BTreeMap<String, usize>,
}

impl GroupState {
    fn new(group_id: &str, gov: Option<GovernanceState>) -> Self {
        Self {
            group_id: group_id.into(),
            gov,
            con: ContentState::default(),
            last_acked: None,
            awaiting: None,
            expected_accepts: BTreeMap::new(),
            quarantined: BTreeSet::new(),
            seen: BTreeSet::new(),
            queue: VecDeque::new(),
            deferred: Vec::new(),
            my_ballots: BTreeMap::new(),
            batched: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Orphan {
    envelope: Envelope,
    tries: u8,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Client {
    pub mls: MlsClient,
    pub gov_key: SigKeyPair,
    pub groups: BTreeMap<String, GroupState>,
    pub alerts: Vec<Alert>,
    pub outbox: Vec<Outgoing>,
    pub events: Vec<ClientEvent>,
    orphans: Vec<Orphan>,
    /// Added members whose directory entry was not at hand yet.
    #[serde(default)]
    key_checks: Vec<KeyCheck>,
    counter: u64,
    next_event: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct KeyCheck {
    group_id: String,
    user: String,
    sig_pk: PublicKey,
}

/// Status snapshot of one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group_id: String,
    pub name: String,
    pub topic: String,
    pub epoch: u64,
    pub roster: Vec<String>,
    pub user_roles: BTreeMap<String, BTreeSet<String>>,
    pub pending: Vec<PollSummary>,
    pub awaiting_state: bool,
    pub frozen: bool,
    pub evicted: bool,
    pub gov_hash: Option<Digest32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollSummary {
    pub proposal_id: String,
    pub proposer: String,
    pub target: ActionType,
    pub yes: usize,
    pub no: usize,
    pub electorate: usize,
    pub threshold: usize,
}

impl Client {
    /// New identity; returns the KeyPackages to publish.
    pub fn new(username: &str, rng: &mut impl CryptoRngCore) -> Result<(Self, Vec<KeyPackage>)> {
        let (mls, kps) = MlsClient::init(username, rng)?;
        let client = Self {
            mls,
            gov_key: SigKeyPair::generate(rng),
            groups: BTreeMap::new(),
            alerts: Vec::new(),
            outbox: Vec::new(),
            events: Vec::new(),
            orphans: Vec::new(),
            key_checks: Vec::new(),
            counter: 0,
            next_event: 0,
        };
        Ok((client, kps))
    }

    pub fn username(&self) -> &str {
        &self.mls.username
    }

    pub fn take_outgoing(&mut self) -> Vec<Outgoing> {
        core::mem::take(&mut self.outbox)
    }

    pub fn take_events(&mut self) -> Vec<ClientEvent> {
        core::mem::take(&mut self.events)
    }

    pub fn group(&self, group_id: &str) -> Result<&GroupState> {
        self.groups.get(group_id).ok_or_else(|| MlsError::UnknownGroup(group_id.into()).into())
    }

    pub fn gov(&self, group_id: &str) -> Result<&GovernanceState> {
        self.group(group_id)?.gov.as_ref().ok_or_else(|| ClientError::AwaitingState(group_id.into()))
    }

    pub fn roster(&self, group_id: &str) -> Result<Vec<String>> {
        Ok(self.mls.group(group_id)?.roster())
    }

    pub fn gov_hash(&self, group_id: &str) -> Option<Digest32> {
        self.groups.get(group_id)?.gov.as_ref().map(state_hash)
    }

    pub fn summary(&self, group_id: &str) -> Result<GroupSummary> {
        let g = self.group(group_id)?;
        let m = self.mls.group(group_id)?;
        let gov = g.gov.as_ref();
        let cfg = gov.map(|g| g.vote_config()).unwrap_or_default();
        let pending = gov
            .map(|gov| {
                gov.pending
                    .values()
                    .map(|p| {
                        let yes = p.votes.values().filter(|c| **c == payload::Choice::Yes).count();
                        PollSummary {
                            proposal_id: p.proposal_id.clone(),
                            proposer: p.proposer.clone(),
                            target: p.target.action_type,
                            yes,
                            no: p.votes.len() - yes,
                            electorate: p.snapshot.len(),
                            threshold: cfg.threshold(p.snapshot.len()),
                        }
                    })
                    .collect()
            })
            .unwrap_or_default();
        Ok(GroupSummary {
            group_id: group_id.into(),
            name: gov.map(|g| g.name().to_string()).unwrap_or_default(),
            topic: gov.map(|g| g.topic().to_string()).unwrap_or_default(),
            epoch: m.epoch,
            roster: m.roster(),
            user_roles: gov.map(|g| g.user_roles.clone()).unwrap_or_default(),
            pending,
            awaiting_state: g.awaiting.is_some(),
            frozen: m.frozen,
            evicted: m.evicted,
            gov_hash: gov.map(state_hash),
        })
    }

    /// Users whose key binding still has to be checked against the
    /// directory; look them up, then call [`Client::resolve_keys`].
    pub fn unresolved_keys(&self) -> BTreeSet<String> {
        self.key_checks.iter().map(|k| k.user.clone()).collect()
    }

    /// Finishes deferred key checks. A user the directory does not know
    /// counts as a mismatch.
    pub fn resolve_keys(&mut self, dir: &dyn Directory) {
        for k in core::mem::take(&mut self.key_checks) {
            if dir.lookup(&k.user).is_none_or(|e| e.sig_pk != k.sig_pk) {
                self.alert(&k.group_id, AlertKind::KeyMismatch { user: k.user });
            }
        }
    }

    /// Queues an event raised outside the client, numbered in sequence
    /// with the client's own.
    pub fn notify(&mut self, kind: &str, group_id: &str, data: Value) {
        self.emit(kind, group_id, data);
    }

    fn emit(&mut self, kind: &str, group_id: &str, data: Value) {
        self.next_event += 1;
        self.events.push(ClientEvent { id: self.next_event, kind: kind.into(), group_id: group_id.into(), data });
    }

    fn alert(&mut self, group_id: &str, kind: AlertKind) {
        let alert = Alert { group_id: group_id.into(), kind };
        self.emit("alert", group_id, serde_json::to_value(&alert).expect("plain enum"));
        self.alerts.push(alert);
    }

    fn sign_action(&mut self, group_id: &str, community_id: &str, t: ActionType, payload: Value, rng: &mut impl CryptoRngCore) -> ActionMessage {
        self.counter += 1;
        let header = ActionHeader {
            sender: self.mls.username.clone(),
            action_id: make_action_id(&self.mls.username, self.counter, crypto::random_bytes(rng)),
            group_id: group_id.into(),
            community_id: community_id.into(),
        };
        ActionMessage::new(header, t, payload, &self.gov_key)
    }

    pub fn create_group(&mut self, group_id: &str, community_id: &str, rng: &mut impl CryptoRngCore) -> Result<()> {
        self.mls.create_group(group_id, rng)?;
        let gov = GovernanceState::new(&self.mls.username, group_id, community_id);
        self.groups.insert(group_id.into(), GroupState::new(group_id, Some(gov)));
        self.emit("group_created", group_id, json!({}));
        Ok(())
    }

    /// Builds, checks and sends one action. The verdict is a local preview
    /// computed against the current state; the replicated outcome is
    /// decided when the action is merged.
    pub fn act(
        &mut self,
        group_id: &str,
        t: ActionType,
        payload: Value,
        dir: &dyn Directory,
        rng: &mut impl CryptoRngCore,
    ) -> Result<Evaluation> {
        self.act_with(group_id, t, payload, None, dir, rng)
    }

    /// Invites `kp.username`: an `InviteUser` action plus the Add, in one
    /// commit when the inviter is allowed to invite directly.
    pub fn invite(&mut self, group_id: &str, kp: KeyPackage, dir: &dyn Directory, rng: &mut impl CryptoRngCore) -> Result<Evaluation> {
        let user = kp.username.clone();
        self.act_with(group_id, ActionType::InviteUser, json!({ "user": user }), Some(kp), dir, rng)
    }

    fn act_with(
        &mut self,
        group_id: &str,
        t: ActionType,
        payload: Value,
        kp: Option<KeyPackage>,
        dir: &dyn Directory,
        rng: &mut impl CryptoRngCore,
    ) -> Result<Evaluation> {
        let gov = self.gov(group_id)?.clone();
        let m = self.mls.group(group_id)?;
        if m.frozen {
            return Err(MlsError::GroupFrozen.into());
        }
        if m.evicted {
            return Err(MlsError::NotAMember(self.mls.username.clone()).into());
        }
        let roster = m.roster();
        let epoch = m.epoch;
        let action = self.sign_action(group_id, gov.community_id(), t, payload, rng);
        if action.parse::<Value>().is_err() {
            return Err(GovError::BadPayload(t).into());
        }
        let preview = {
            let mut g = gov.clone();
            let mut c = self.group(group_id)?.con.clone();
            let ctx = EvalContext { epoch: epoch + 1, group_id, roster: &roster, directory: dir };
            evaluate(&action, &mut g, &mut c, &ctx, &policy::builtin())
        };
        if preview.verdict == Verdict::Failed {
            return Err(ClientError::Rejected(preview));
        }
        if t.is_unordered() {
            self.send_unordered_action(group_id, &action, dir, rng)?;
            return Ok(preview);
        }
        let mut proposals = alloc::vec![Proposal::Oam(action.to_bytes().into())];
        if preview.verdict == Verdict::Passed {
            match t {
                ActionType::KickUser => {
                    let p: payload::User = action.parse()?;
                    proposals.push(Proposal::Remove(p.user));
                }
                ActionType::InviteUser => {
                    let kp = kp.ok_or_else(|| ClientError::NeedKeyPackage(String::new()))?;
                    proposals.push(Proposal::Add(kp));
                }
                _ => {}
            }
        }
        self.enqueue(group_id, proposals, rng)?;
        Ok(preview)
    }

    fn send_unordered_action(
        &mut self,
        group_id: &str,
        action: &ActionMessage,
        dir: &dyn Directory,
        rng: &mut impl CryptoRngCore,
    ) -> Result<()> {
        let recipients = match action.action_type {
            ActionType::Report => {
                let gov = self.gov(group_id)?;
                let mods: Vec<String> =
                    gov.holders_of(ActionType::KickUser).into_iter().filter(|u| *u != self.mls.username).collect();
                (!mods.is_empty()).then_some(mods)
            }
            _ => None,
        };
        let envelope = self.mls.send_uam(group_id, &action.to_bytes(), rng)?;
        self.outbox.push(Outgoing::Unordered { envelope, recipients });
        // The server does not echo our own messages back.
        let epoch = self.mls.get_epoch(group_id)?;
        self.handle_action(group_id, action.clone(), epoch, dir, rng);
        Ok(())
    }

    pub fn send_text(&mut self, group_id: &str, text: &str, dir: &dyn Directory, rng: &mut impl CryptoRngCore) -> Result<Evaluation> {
        self.act(group_id, ActionType::SendText, json!({ "text": text }), dir, rng)
    }

    pub fn vote(&mut self, group_id: &str, proposal_id: &str, yes: bool, dir: &dyn Directory, rng: &mut impl CryptoRngCore) -> Result<Evaluation> {
        let choice = if yes { payload::Choice::Yes } else { payload::Choice::No };
        let p = payload::PollVote { proposal_id: proposal_id.into(), choice };
        self.act(group_id, ActionType::PollVote, serde_json::to_value(p).expect("plain struct"), dir, rng)
    }

    pub fn poll_start(&mut self, group_id: &str, target_type: ActionType, target_payload: Value, dir: &dyn Directory, rng: &mut impl CryptoRngCore) -> Result<(String, Evaluation)> {
        let community = self.gov(group_id)?.community_id().to_string();
        let target = self.sign_action(group_id, &community, target_type, target_payload, rng);
        let before = self.counter;
        let ev = self.act(group_id, ActionType::PollStart, json!({ "target": target }), dir, rng)?;
        debug_assert_eq!(self.counter, before + 1);
        let pid = self.last_ordered_action_id(group_id).unwrap_or_default();
        Ok((pid, ev))
    }

    fn last_ordered_action_id(&self, group_id: &str) -> Option<String> {
        let g = self.groups.get(group_id)?;
        let from_queue = g.queue.back().and_then(|ps| ps.first().cloned());
        let from_pending = self.mls.group(group_id).ok()?.pending_commit.as_ref().and_then(|p| p.proposals.first().cloned());
        match from_queue.or(from_pending)? {
            Proposal::Oam(b) => ActionMessage::from_bytes(&b).ok().map(|a| a.header.action_id),
            _ => None,
        }
    }

    /// Reports messages from this group's content to its moderators.
    pub fn report(&mut self, group_id: &str, ids: &[String], reason: &str, dir: &dyn Directory, rng: &mut impl CryptoRngCore) -> Result<Report> {
        self.report_to(group_id, group_id, ids, reason, dir, rng)
    }

    /// Reports messages seen in `source` to the moderators of `dest`, for
    /// example abuse in a direct chat reported to the community.
    pub fn report_to(
        &mut self,
        source: &str,
        dest: &str,
        ids: &[String],
        reason: &str,
        dir: &dyn Directory,
        rng: &mut impl CryptoRngCore,
    ) -> Result<Report> {
        let report = self.build_report(source, ids, reason)?;
        self.act(dest, ActionType::Report, serde_json::to_value(&report).expect("plain struct"), dir, rng)?;
        Ok(report)
    }

    pub fn build_report(&self, group_id: &str, ids: &[String], reason: &str) -> Result<Report> {
        Ok(build_report(&self.group(group_id)?.con, &self.mls.username, ids, reason)?)
    }

    /// Sends a report to the moderation service through the reporter's
    /// escalation group, creating that group (which needs the service's
    /// KeyPackage) on first use. A forwarded report is re-issued in the
    /// escalating user's name, since they answer for it.
    pub fn escalate(&mut self, report: &Report, ms_kp: Option<KeyPackage>, dir: &dyn Directory, rng: &mut impl CryptoRngCore) -> Result<()> {
        let gid = escalation_group(&self.mls.username);
        let mut report = report.clone();
        report.reporter = self.mls.username.clone();
        let payload = serde_json::to_value(&report).expect("plain struct");
        if !self.groups.contains_key(&gid) {
            let kp = ms_kp.ok_or_else(|| ClientError::NeedKeyPackage(MODERATION_USER.into()))?;
            self.create_group(&gid, &gid, rng)?;
            self.invite(&gid, kp, dir, rng)?;
        }
        let joined = self.mls.group(&gid)?.is_member(MODERATION_USER);
        if joined && self.mls.group(&gid)?.pending_commit.is_none() {
            self.act(&gid, ActionType::Escalate, payload, dir, rng)?;
        } else {
            let community = self.gov(&gid)?.community_id().to_string();
            let action = self.sign_action(&gid, &community, ActionType::Escalate, payload, rng);
            self.groups.get_mut(&gid).expect("created above").deferred.push(action);
        }
        Ok(())
    }

    /// Adds a user whose invitation passed by vote, once their KeyPackage
    /// has been fetched.
    pub fn add_invited(&mut self, group_id: &str, kp: KeyPackage, rng: &mut impl CryptoRngCore) -> Result<()> {
        if !self.gov(group_id)?.invited.contains(&kp.username) {
            return Err(GovError::NotPermitted.into());
        }
        self.enqueue(group_id, alloc::vec![Proposal::Add(kp)], rng)
    }

    fn enqueue(&mut self, group_id: &str, proposals: Vec<Proposal>, rng: &mut impl CryptoRngCore) -> Result<()> {
        self.groups.get_mut(group_id).ok_or_else(|| MlsError::UnknownGroup(group_id.into()))?.queue.push_back(proposals);
        self.drain_queue(group_id, rng);
        Ok(())
    }

    /// Starts the next queued commit if none is in flight.
    fn drain_queue(&mut self, group_id: &str, rng: &mut impl CryptoRngCore) {
        loop {
            let Ok(m) = self.mls.group(group_id) else { return };
            if m.pending_commit.is_some() || m.frozen || m.evicted {
                return;
            }
            let Some(g) = self.groups.get_mut(group_id) else { return };
            let Some(proposals) = g.queue.pop_front() else { return };
            let roster = m.roster();
            // Drop membership changes that no longer apply.
            let proposals: Vec<Proposal> = proposals
                .into_iter()
                .filter(|p| match p {
                    Proposal::Add(kp) => !roster.contains(&kp.username),
                    Proposal::Remove(u) => roster.contains(u),
                    _ => true,
                })
                .collect();
            if proposals.is_empty() {
                continue;
            }
            match self.mls.commit(group_id, proposals, rng) {
                Ok(out) => {
                    self.outbox.push(Outgoing::Commit { group_id: group_id.into(), envelope: out.envelope });
                    return;
                }
                Err(e) => {
                    self.emit("commit_error", group_id, json!({ "error": e.to_string() }));
                }
            }
        }
    }

    /// The sequencer accepted our in-flight commit at `seq`.
    pub fn commit_accepted(&mut self, group_id: &str, seq: u64, dir: &dyn Directory, rng: &mut impl CryptoRngCore) -> Result<()> {
        let welcomes = self.pending_welcomes(group_id);
        let merged = self.mls.confirm_pending(group_id, Some(seq))?;
        if let Some(g) = self.groups.get_mut(group_id) {
            g.last_acked = Some(seq);
        }
        self.relay_welcomes(welcomes);
        self.handle_events(alloc::vec![MlsEvent::Merged(merged)], dir, rng);
        self.drain_queue(group_id, rng);
        Ok(())
    }

    /// The sequencer refused our commit; `backlog` holds the entries we had
    /// not yet seen. Applies them, then rebases what is left.
    pub fn commit_rejected(&mut self, group_id: &str, backlog: &[Envelope], dir: &dyn Directory, rng: &mut impl CryptoRngCore) -> Result<()> {
        for env in backlog {
            self.ingest(env, dir, rng)?;
        }
        if self.mls.group(group_id)?.pending_commit.is_none() {
            self.drain_queue(group_id, rng);
            return Ok(());
        }
        match self.mls.rebase_pending(group_id, &[], rng) {
            Ok((_, Some(out))) => {
                self.outbox.push(Outgoing::Commit { group_id: group_id.into(), envelope: out.envelope });
            }
            Ok((_, None)) => self.drain_queue(group_id, rng),
            Err(MlsError::RetriesExhausted) => {
                self.mls.abandon_pending(group_id)?;
                self.alert(group_id, AlertKind::RetriesExhausted);
                self.drain_queue(group_id, rng);
            }
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }

    fn pending_welcomes(&self, group_id: &str) -> Vec<(String, Envelope)> {
        self.mls
            .group(group_id)
            .ok()
            .and_then(|g| g.pending_commit.as_ref())
            .map(|p| p.welcomes.clone())
            .unwrap_or_default()
    }

    fn relay_welcomes(&mut self, welcomes: Vec<(String, Envelope)>) {
        for (recipient, envelope) in welcomes {
            self.outbox.push(Outgoing::Welcome { recipient, envelope });
        }
    }

    /// Processes a sync result: welcomes first, then each group's ordered
    /// log, then the remaining unordered traffic.
    pub fn ingest_sync(
        &mut self,
        ordered: &BTreeMap<String, Vec<Envelope>>,
        unordered: &[Envelope],
        dir: &dyn Directory,
        rng: &mut impl CryptoRngCore,
    ) -> usize {
        let mut n = 0;
        for env in unordered.iter().filter(|e| e.channel == Channel::Welcome) {
            n += usize::from(self.ingest(env, dir, rng).is_ok());
        }
        for envs in ordered.values() {
            for env in envs {
                match self.ingest(env, dir, rng) {
                    Ok(()) => n += 1,
                    Err(ClientError::Mls(MlsError::EpochGap { .. })) => break,
                    Err(_) => {}
                }
            }
        }
        for env in unordered.iter().filter(|e| e.channel != Channel::Welcome) {
            n += usize::from(self.ingest(env, dir, rng).is_ok());
        }
        n
    }

    /// Handles one envelope from the server.
    pub fn ingest(&mut self, env: &Envelope, dir: &dyn Directory, rng: &mut impl CryptoRngCore) -> Result<()> {
        // Traffic for groups we were removed from is unreadable by design.
        if env.channel != Channel::Welcome && self.mls.group(&env.group_id).is_ok_and(|g| g.evicted) {
            if let (Some(seq), Some(g)) = (env.seq, self.groups.get_mut(&env.group_id)) {
                g.last_acked = Some(g.last_acked.map_or(seq, |a| a.max(seq)));
            }
            return Ok(());
        }
        match env.channel {
            Channel::Ordered => self.ingest_ordered(env, dir, rng),
            Channel::Unordered => match self.mls.process_incoming(env) {
                Ok(events) => {
                    self.handle_events(events, dir, rng);
                    Ok(())
                }
                Err(MlsError::UnknownGroup(_) | MlsError::DecryptError) => {
                    self.stash(env);
                    Ok(())
                }
                Err(e) => {
                    self.alert(&env.group_id, AlertKind::RejectedMessage { sender: env.sender.clone(), reason: e.to_string() });
                    Err(e.into())
                }
            },
            Channel::Welcome => {
                let ev = self.mls.join_group(env)?;
                self.handle_events(alloc::vec![ev], dir, rng);
                self.retry_orphans(dir, rng);
                Ok(())
            }
        }
    }

    fn ingest_ordered(&mut self, env: &Envelope, dir: &dyn Directory, rng: &mut impl CryptoRngCore) -> Result<()> {
        let Some(g) = self.groups.get(&env.group_id) else {
            return Err(MlsError::UnknownGroup(env.group_id.clone()).into());
        };
        if let (Some(seq), Some(acked)) = (env.seq, g.last_acked) {
            if seq <= acked {
                return Ok(());
            }
        }
        let welcomes = self.pending_welcomes(&env.group_id);
        let result = self.mls.process_incoming(env);
        if matches!(result, Err(MlsError::EpochGap { .. })) {
            return Err(result.unwrap_err().into());
        }
        if let Some(g) = self.groups.get_mut(&env.group_id) {
            if env.seq.is_some() {
                g.last_acked = env.seq;
            }
        }
        match result {
            Ok(events) => {
                if events.iter().any(|e| matches!(e, MlsEvent::Merged(m) if m.own)) {
                    self.relay_welcomes(welcomes);
                }
                self.handle_events(events, dir, rng);
                self.drain_queue(&env.group_id, rng);
                self.retry_orphans(dir, rng);
                Ok(())
            }
            Err(e) => {
                self.alert(&env.group_id, AlertKind::RejectedMessage { sender: env.sender.clone(), reason: e.to_string() });
                Err(e.into())
            }
        }
    }

    fn stash(&mut self, env: &Envelope) {
        if self.orphans.len() < ORPHAN_LIMIT && !self.orphans.iter().any(|o| o.envelope == *env) {
            self.orphans.push(Orphan { envelope: env.clone(), tries: 0 });
        }
    }

    fn retry_orphans(&mut self, dir: &dyn Directory, rng: &mut impl CryptoRngCore) {
        let orphans = core::mem::take(&mut self.orphans);
        for mut o in orphans {
            match self.mls.process_incoming(&o.envelope) {
                Ok(events) => self.handle_events(events, dir, rng),
                Err(MlsError::UnknownGroup(_) | MlsError::DecryptError) if o.tries < ORPHAN_RETRIES => {
                    o.tries += 1;
                    self.orphans.push(o);
                }
                Err(_) => {}
            }
        }
    }

    /// Explicit timer input: gives up on missing announcements and retries
    /// vote batching.
    pub fn tick(&mut self, dir: &dyn Directory, rng: &mut impl CryptoRngCore) {
        let ids: Vec<String> = self.groups.keys().cloned().collect();
        for gid in ids {
            let timed_out = self.groups.get_mut(&gid).and_then(|g| g.awaiting.as_mut()).and_then(|a| {
                (!a.timed_out).then(|| {
                    a.timed_out = true;
                    a.inviter.clone()
                })
            });
            if let Some(inviter) = timed_out {
                self.alert(&gid, AlertKind::AnnouncementMissing { inviter });
            }
            self.maybe_batch_all(&gid, dir, rng);
        }
        self.retry_orphans(dir, rng);
    }

    fn handle_events(&mut self, events: Vec<MlsEvent>, dir: &dyn Directory, rng: &mut impl CryptoRngCore) {
        for ev in events {
            self.handle_event(ev, dir, rng);
        }
    }

    fn handle_event(&mut self, ev: MlsEvent, dir: &dyn Directory, rng: &mut impl CryptoRngCore) {
        match ev {
            MlsEvent::Joined { group_id, epoch, inviter } => {
                let mut g = GroupState::new(&group_id, None);
                g.last_acked = epoch.checked_sub(1);
                g.awaiting = Some(Awaiting { inviter: inviter.clone(), epoch, buffered: Vec::new(), timed_out: false });
                self.groups.insert(group_id.clone(), g);
                self.emit("joined", &group_id, json!({ "epoch": epoch, "inviter": inviter }));
            }
            MlsEvent::ForkDetected { group_id, parent_epoch, sender } => {
                self.alert(&group_id, AlertKind::ForkDetected { parent_epoch, sender });
            }
            MlsEvent::Merged(mc) => {
                if self.buffer_if_awaiting(&mc.group_id, MlsEvent::Merged(mc.clone())) {
                    return;
                }
                self.handle_merged(mc, dir, rng);
            }
            MlsEvent::Application { group_id, sender, epoch, payload } => {
                let Ok(action) = ActionMessage::from_bytes(&payload) else {
                    self.alert(&group_id, AlertKind::RejectedMessage { sender, reason: "malformed action".into() });
                    return;
                };
                if action.header.sender != sender || action.header.group_id != group_id {
                    self.alert(&group_id, AlertKind::RejectedMessage { sender, reason: "action header mismatch".into() });
                    return;
                }
                let installing = self
                    .groups
                    .get(&group_id)
                    .and_then(|g| g.awaiting.as_ref())
                    .is_some_and(|a| action.action_type == ActionType::GovStateAnnouncement && a.inviter == sender);
                if installing {
                    self.install_announcement(&group_id, &action, dir, rng);
                    return;
                }
                let app = MlsEvent::Application { group_id: group_id.clone(), sender, epoch, payload };
                if self.buffer_if_awaiting(&group_id, app) {
                    return;
                }
                self.handle_action(&group_id, action, epoch, dir, rng);
            }
        }
    }

    fn buffer_if_awaiting(&mut self, group_id: &str, ev: MlsEvent) -> bool {
        let Some(a) = self.groups.get_mut(group_id).and_then(|g| g.awaiting.as_mut()) else {
            return false;
        };
        a.buffered.push(ev);
        if a.buffered.len() >= AWAIT_LIMIT && !a.timed_out {
            a.timed_out = true;
            let inviter = a.inviter.clone();
            self.alert(group_id, AlertKind::AnnouncementMissing { inviter });
        }
        true
    }

    fn install_announcement(&mut self, group_id: &str, action: &ActionMessage, dir: &dyn Directory, rng: &mut impl CryptoRngCore) {
        let Some(awaiting) = self.groups.get(group_id).and_then(|g| g.awaiting.clone()) else { return };
        let verified = dir.gov_pk(action.sender()).is_some_and(|pk| action.verify(&pk));
        let gov = if verified { accept_group(action, awaiting.epoch) } else { Err(GovError::BadSignature) };
        let gov = match gov {
            Ok(gov) => gov,
            Err(e) => {
                self.alert(group_id, AlertKind::AnnouncementRejected { reason: e.to_string() });
                return;
            }
        };
        let community = gov.community_id().to_string();
        let g = self.groups.get_mut(group_id).expect("checked above");
        g.awaiting = None;
        g.gov = Some(gov.clone());
        let accept = self.sign_action(group_id, &community, ActionType::Accept, accept_payload(&gov), rng);
        match self.mls.send_uam(group_id, &accept.to_bytes(), rng) {
            Ok(envelope) => self.outbox.push(Outgoing::Unordered { envelope, recipients: None }),
            Err(e) => self.emit("send_error", group_id, json!({ "error": e.to_string() })),
        }
        self.emit("state_installed", group_id, json!({ "gov_hash": state_hash(&gov) }));
        self.handle_events(awaiting.buffered, dir, rng);
    }

    /// Signature, revocation, replay and quarantine checks shared by both
    /// channels. Returns false when the action must be dropped.
    fn admit(&mut self, group_id: &str, action: &ActionMessage, dir: &dyn Directory) -> bool {
        let sender = action.sender().to_string();
        let Some(g) = self.groups.get(group_id) else { return false };
        if g.quarantined.contains(&sender) {
            return false;
        }
        let key = format!("{sender}/{}", action.id());
        if g.seen.contains(&key) {
            return false;
        }
        let reason = match dir.lookup(&sender) {
            None => Some("unknown signer"),
            Some(e) if e.revoked => Some("signer revoked"),
            Some(e) if !action.verify(&e.gov_pk) => Some("bad governance signature"),
            Some(_) => None,
        };
        if let Some(reason) = reason {
            self.alert(group_id, AlertKind::RejectedMessage { sender, reason: reason.into() });
            return false;
        }
        self.groups.get_mut(group_id).expect("checked above").seen.insert(key);
        true
    }

    fn handle_action(&mut self, group_id: &str, action: ActionMessage, epoch: u64, dir: &dyn Directory, rng: &mut impl CryptoRngCore) {
        if !action.action_type.is_unordered() {
            let sender = action.sender().to_string();
            self.alert(group_id, AlertKind::RejectedMessage { sender, reason: "ordered action sent unordered".into() });
            return;
        }
        if !self.admit(group_id, &action, dir) {
            return;
        }
        let me = self.mls.username.clone();
        let sender = action.sender().to_string();
        match action.action_type {
            ActionType::GovStateAnnouncement => {}
            ActionType::Accept => {
                let g = self.groups.get_mut(group_id).expect("admitted");
                let Some(expected) = g.expected_accepts.remove(&sender) else { return };
                match check_accept(&action, &expected.gov_hash) {
                    AcceptCheck::Ok => self.emit("accepted", group_id, json!({ "user": sender })),
                    AcceptCheck::Mismatch => {
                        g.quarantined.insert(sender.clone());
                        self.alert(group_id, AlertKind::InvalidInitialState { joiner: sender, inviter: expected.inviter });
                    }
                }
            }
            _ => {
                let Ok(roster) = self.roster(group_id) else { return };
                let g = self.groups.get_mut(group_id).expect("admitted");
                let Some(gov) = g.gov.as_mut() else { return };
                let ctx = EvalContext { epoch, group_id, roster: &roster, directory: dir };
                let ev = evaluate(&action, gov, &mut g.con, &ctx, &policy::builtin());
                if action.action_type == ActionType::PollVote && sender == me {
                    if let Ok(v) = action.parse::<payload::PollVote>() {
                        g.my_ballots.insert(v.proposal_id, action.clone());
                    }
                }
                let kind = match action.action_type {
                    ActionType::SendText => "message",
                    ActionType::React => "reaction",
                    ActionType::PollVote => "ballot",
                    ActionType::Report => "report",
                    ActionType::Escalate => "escalation",
                    _ => "action",
                };
                let mut data = json!({ "action": action, "verdict": ev.verdict });
                if matches!(action.action_type, ActionType::Report | ActionType::Escalate) {
                    if let Some(r) = g.con.reports.last() {
                        data["verified"] = Value::Bool(r.verified);
                    }
                }
                self.emit(kind, group_id, data);
                if action.action_type == ActionType::PollVote {
                    if let Ok(v) = action.parse::<payload::PollVote>() {
                        self.maybe_batch(group_id, &v.proposal_id, dir, rng);
                    }
                }
            }
        }
    }

    /// Queues a `PollEnd` batch for a proposal we made once the observed
    /// ballots decide it.
    fn maybe_batch(&mut self, group_id: &str, pid: &str, dir: &dyn Directory, rng: &mut impl CryptoRngCore) {
        let me = self.mls.username.clone();
        let Some(g) = self.groups.get(group_id) else { return };
        let Some(gov) = g.gov.as_ref() else { return };
        let Some(p) = gov.pending.get(pid) else { return };
        if p.proposer != me {
            return;
        }
        let Some(ballots) = vote::ready_batch(pid, gov, &g.con, group_id, dir) else { return };
        let total = p.votes.len() + ballots.len();
        if g.batched.get(pid).is_some_and(|n| *n >= total) {
            return;
        }
        self.queue_batch(group_id, pid, ballots, total, rng);
    }

    fn maybe_batch_all(&mut self, group_id: &str, dir: &dyn Directory, rng: &mut impl CryptoRngCore) {
        let pids: Vec<String> = self
            .groups
            .get(group_id)
            .and_then(|g| g.gov.as_ref())
            .map(|gov| gov.pending.keys().cloned().collect())
            .unwrap_or_default();
        for pid in pids {
            self.maybe_batch(group_id, &pid, dir, rng);
        }
    }

    fn queue_batch(&mut self, group_id: &str, pid: &str, ballots: Vec<ActionMessage>, total: usize, rng: &mut impl CryptoRngCore) {
        let Ok(community) = self.gov(group_id).map(|g| g.community_id().to_string()) else { return };
        let payload = serde_json::to_value(payload::PollEnd { proposal_id: pid.into(), ballots }).expect("plain struct");
        let action = self.sign_action(group_id, &community, ActionType::PollEnd, payload, rng);
        if let Some(g) = self.groups.get_mut(group_id) {
            g.batched.insert(pid.into(), total);
        }
        let _ = self.enqueue(group_id, alloc::vec![Proposal::Oam(action.to_bytes().into())], rng);
    }

    fn handle_merged(&mut self, mc: MergedCommit, dir: &dyn Directory, rng: &mut impl CryptoRngCore) {
        let gid = mc.group_id.clone();
        let Ok(after) = self.roster(&gid) else { return };
        let added: BTreeSet<&str> = mc.added().collect();
        let removed: Vec<&str> = mc.removed().collect();
        let mut roster: Vec<String> = after.iter().filter(|u| !added.contains(u.as_str())).cloned().collect();
        roster.extend(removed.iter().map(|u| u.to_string()));
        roster.sort();

        let before_hash = self.gov_hash(&gid);
        let mut effects = Vec::new();
        let mut batches = Vec::new();
        let mut joiners = Vec::new();
        let mut alerts = Vec::new();
        for p in &mc.proposals {
            match p {
                Proposal::Oam(bytes) => {
                    let Ok(action) = ActionMessage::from_bytes(bytes) else {
                        alerts.push(AlertKind::RejectedMessage { sender: mc.committer.clone(), reason: "malformed action".into() });
                        continue;
                    };
                    if action.sender() != mc.committer || action.header.group_id != gid || action.action_type.is_unordered() {
                        alerts.push(AlertKind::RejectedMessage { sender: mc.committer.clone(), reason: "action not bound to commit".into() });
                        continue;
                    }
                    if !self.admit(&gid, &action, dir) {
                        continue;
                    }
                    let g = self.groups.get_mut(&gid).expect("admitted");
                    let Some(gov) = g.gov.as_mut() else { continue };
                    let ctx = EvalContext { epoch: mc.epoch, group_id: &gid, roster: &roster, directory: dir };
                    let ev = evaluate(&action, gov, &mut g.con, &ctx, &policy::builtin());
                    if action.action_type == ActionType::PollEnd {
                        if let Ok(b) = action.parse::<payload::PollEnd>() {
                            batches.push(b);
                        }
                    }
                    self.emit(
                        "verdict",
                        &gid,
                        json!({ "action_type": action.action_type, "action_id": action.id(), "sender": action.sender(), "verdict": ev.verdict, "reason": ev.reason }),
                    );
                    effects.extend(ev.effects);
                }
                Proposal::Add(kp) => {
                    roster.push(kp.username.clone());
                    match dir.lookup(&kp.username) {
                        Some(e) if e.sig_pk != kp.sig_pk => alerts.push(AlertKind::KeyMismatch { user: kp.username.clone() }),
                        Some(_) => {}
                        None => self.key_checks.push(KeyCheck { group_id: gid.clone(), user: kp.username.clone(), sig_pk: kp.sig_pk }),
                    }
                    let g = self.groups.get_mut(&gid).expect("merged group");
                    if let Some(gov) = g.gov.as_mut() {
                        if !on_member_added(gov, &kp.username, mc.epoch) {
                            alerts.push(AlertKind::UnauthorizedAdd { user: kp.username.clone(), by: mc.committer.clone() });
                        }
                    }
                    joiners.push(kp.username.clone());
                }
                Proposal::Remove(u) => {
                    roster.retain(|r| r != u);
                    let g = self.groups.get_mut(&gid).expect("merged group");
                    g.expected_accepts.remove(u);
                    g.quarantined.remove(u);
                    if let Some(gov) = g.gov.as_mut() {
                        if !on_member_removed(gov, u, mc.epoch) {
                            alerts.push(AlertKind::UnauthorizedRemove { user: u.clone(), by: mc.committer.clone() });
                        }
                    }
                }
                Proposal::Update(_) => {}
            }
        }
        for a in alerts {
            self.alert(&gid, a);
        }

        let Some(gov) = self.groups.get(&gid).and_then(|g| g.gov.clone()) else { return };
        let hash = state_hash(&gov);
        for joiner in &joiners {
            let g = self.groups.get_mut(&gid).expect("merged group");
            g.expected_accepts.insert(joiner.clone(), ExpectedAccept { gov_hash: hash, inviter: mc.committer.clone() });
        }
        self.emit("epoch_advanced", &gid, json!({ "epoch": mc.epoch, "committer": mc.committer }));
        if before_hash != Some(hash) {
            self.emit("gov_updated", &gid, json!({ "gov_hash": hash, "name": gov.name() }));
        }
        if self.mls.group(&gid).is_ok_and(|g| g.evicted) {
            self.emit("evicted", &gid, json!({ "by": mc.committer }));
            return;
        }

        if mc.own {
            for joiner in &joiners {
                let action = self.sign_action(&gid, gov.community_id(), ActionType::GovStateAnnouncement, announcement_payload(&gov, mc.epoch), rng);
                match self.mls.send_uam(&gid, &action.to_bytes(), rng) {
                    Ok(envelope) => self.outbox.push(Outgoing::Unordered { envelope, recipients: Some(alloc::vec![joiner.clone()]) }),
                    Err(e) => self.emit("send_error", &gid, json!({ "error": e.to_string() })),
                }
            }
            for e in &effects {
                match e {
                    Effect::RemoveMember { user } if after.contains(user) => {
                        let _ = self.enqueue(&gid, alloc::vec![Proposal::Remove(user.clone())], rng);
                    }
                    Effect::InviteMember { user } if !after.contains(user) => {
                        self.outbox.push(Outgoing::FetchKeyPackage { group_id: gid.clone(), user: user.clone() });
                    }
                    _ => {}
                }
            }
            let deferred = core::mem::take(&mut self.groups.get_mut(&gid).expect("merged group").deferred);
            for action in deferred {
                if let Err(e) = self.send_unordered_action(&gid, &action, dir, rng) {
                    self.emit("send_error", &gid, json!({ "error": e.to_string() }));
                }
            }
        }
        for e in &effects {
            if let Effect::ProposalResolved { proposal_id, verdict } = e {
                self.emit("proposal_resolved", &gid, json!({ "proposal_id": proposal_id, "verdict": verdict }));
            }
        }
        for b in batches {
            self.after_batch(&gid, &b, dir, rng);
        }
        self.maybe_batch_all(&gid, dir, rng);
    }

    /// Our ballot is missing from a merged batch: if the proposal is still
    /// open, resend it and batch it ourselves.
    fn after_batch(&mut self, gid: &str, batch: &payload::PollEnd, dir: &dyn Directory, rng: &mut impl CryptoRngCore) {
        let me = self.mls.username.clone();
        let Some(g) = self.groups.get(gid) else { return };
        let Some(mine) = g.my_ballots.get(&batch.proposal_id).cloned() else { return };
        if batch.ballots.iter().any(|b| b.sender() == me) {
            return;
        }
        let still_open = g
            .gov
            .as_ref()
            .and_then(|gov| gov.pending.get(&batch.proposal_id))
            .is_some_and(|p| !p.votes.contains_key(&me));
        if !still_open {
            let g = self.groups.get_mut(gid).expect("checked");
            g.con.notices.push(format!("ballot on {} was not counted", batch.proposal_id));
            return;
        }
        self.emit("self_batch", gid, json!({ "proposal_id": batch.proposal_id }));
        if let Ok(envelope) = self.mls.send_uam(gid, &mine.to_bytes(), rng) {
            self.outbox.push(Outgoing::Unordered { envelope, recipients: None });
        }
        let total = self
            .groups
            .get(gid)
            .and_then(|g| g.gov.as_ref())
            .and_then(|gov| gov.pending.get(&batch.proposal_id))
            .map_or(1, |p| p.votes.len() + 1);
        let _ = dir;
        self.queue_batch(gid, &batch.proposal_id, alloc::vec![mine], total, rng);
    }

    /// Splits off one group's state for separate persistence.
    pub fn export_group(&self, group_id: &str) -> Option<(GroupCryptoState, GroupState)> {
        Some((self.mls.group(group_id).ok()?.clone(), self.groups.get(group_id)?.clone()))
    }

    /// The client without any groups.
    pub fn without_groups(&self) -> Self {
        Self {
            mls: self.mls.without_groups(),
            gov_key: self.gov_key.clone(),
            groups: BTreeMap::new(),
            alerts: self.alerts.clone(),
            outbox: self.outbox.clone(),
            events: Vec::new(),
            orphans: self.orphans.clone(),
            key_checks: self.key_checks.clone(),
            counter: self.counter,
            next_event: self.next_event,
        }
    }

    pub fn import_group(&mut self, mls: GroupCryptoState, state: GroupState) {
        self.groups.insert(state.group_id.clone(), state);
        self.mls.insert_group(mls);
    }
}

#[cfg(test)]
mod tests;
