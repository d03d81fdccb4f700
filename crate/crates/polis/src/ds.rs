//! Delivery service: sequences ordered envelopes per group, queues unordered
//! ones per recipient, hands out KeyPackages and enforces bans. It only ever
//! sees the plaintext envelope metadata.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use async_trait::async_trait;
use polis_core::client::MODERATION_USER;
use polis_core::crypto::PublicKey;
use polis_core::mls::{Channel, Envelope, KeyPackage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::auth::AuthService;
use crate::clock::Clock;
use crate::proto::*;
use crate::transport::Handler;

/// Where the service gets the moderation key that authorizes bans.
#[async_trait]
pub trait ModeratorKey: Send + Sync {
    async fn moderator_key(&self) -> Option<PublicKey>;
}

#[async_trait]
impl ModeratorKey for AuthService {
    async fn moderator_key(&self) -> Option<PublicKey> {
        self.moderation_key()
    }
}

#[async_trait]
impl ModeratorKey for PublicKey {
    async fn moderator_key(&self) -> Option<PublicKey> {
        Some(*self)
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct GroupLog {
    entries: Vec<Envelope>,
    members: BTreeSet<String>,
    #[serde(skip)]
    shadow: Option<Shadow>,
}

/// A forked copy of the log served to one side of a partition.
#[derive(Debug, Clone)]
struct Shadow {
    side: BTreeSet<String>,
    fork_at: usize,
    entries: Vec<Envelope>,
}

impl GroupLog {
    fn view(&self, user: &str) -> &Vec<Envelope> {
        match &self.shadow {
            Some(s) if s.side.contains(user) => &s.entries,
            _ => &self.entries,
        }
    }

    fn view_mut(&mut self, user: &str) -> &mut Vec<Envelope> {
        match &mut self.shadow {
            Some(s) if s.side.contains(user) => &mut s.entries,
            _ => &mut self.entries,
        }
    }
}

/// Drops unordered envelopes matching `from`/`to`, `count` times.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DropRule {
    #[serde(default)]
    pub from: Option<String>,
    #[serde(default)]
    pub to: Option<String>,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub group_id: String,
    pub side: BTreeSet<String>,
}

/// Adversarial behaviour for attack tests. Never touches accepted entries
/// of the main log.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Faults {
    #[serde(default)]
    pub drop: Vec<DropRule>,
    /// Recipient to number of syncs during which their queue is withheld.
    #[serde(default)]
    pub delay: BTreeMap<String, u32>,
    /// Shuffle each drained queue with this seed.
    #[serde(default)]
    pub reorder_seed: Option<u64>,
    #[serde(default)]
    pub partitions: Vec<Partition>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct DsSnapshot {
    groups: BTreeMap<String, GroupLog>,
    queues: BTreeMap<String, VecDeque<Envelope>>,
    key_packages: BTreeMap<String, VecDeque<KeyPackage>>,
    /// `None` means banned indefinitely.
    bans: BTreeMap<String, Option<u64>>,
}

pub struct DeliveryService {
    groups: RwLock<BTreeMap<String, Arc<Mutex<GroupLog>>>>,
    queues: Mutex<BTreeMap<String, VecDeque<Envelope>>>,
    key_packages: Mutex<BTreeMap<String, VecDeque<KeyPackage>>>,
    bans: Mutex<BTreeMap<String, Option<u64>>>,
    faults: Mutex<Faults>,
    reorder: Mutex<Option<ChaCha8Rng>>,
    clock: Arc<dyn Clock>,
    moderator: Arc<dyn ModeratorKey>,
    conflicts: AtomicU64,
}

impl DeliveryService {
    pub fn new(clock: Arc<dyn Clock>, moderator: Arc<dyn ModeratorKey>) -> Self {
        Self {
            groups: RwLock::new(BTreeMap::new()),
            queues: Mutex::new(BTreeMap::new()),
            key_packages: Mutex::new(BTreeMap::new()),
            bans: Mutex::new(BTreeMap::new()),
            faults: Mutex::new(Faults::default()),
            reorder: Mutex::new(None),
            clock,
            moderator,
            conflicts: AtomicU64::new(0),
        }
    }

    /// Ordered sends refused because another commit won the race.
    pub fn conflicts(&self) -> u64 {
        self.conflicts.load(Ordering::Relaxed)
    }

    fn check_ban(&self, user: &str) -> Result<(), ServiceError> {
        match self.bans.lock().expect("ban lock").get(user) {
            Some(None) => Err(ServiceError::Banned(user.into())),
            Some(Some(until)) if self.clock.now() < *until => Err(ServiceError::Banned(user.into())),
            _ => Ok(()),
        }
    }

    fn group(&self, group_id: &str) -> Option<Arc<Mutex<GroupLog>>> {
        self.groups.read().expect("groups lock").get(group_id).cloned()
    }

    fn check_envelope(env: &Envelope, channel: Channel, sender: &str) -> Result<(), ServiceError> {
        if env.channel != channel || env.sender != sender {
            return Err(ServiceError::ParseError("envelope does not match request".into()));
        }
        Ok(())
    }

    pub fn send_ordered(&self, req: SendOrdered) -> Result<SendOrderedResult, ServiceError> {
        self.check_ban(&req.sender)?;
        Self::check_envelope(&req.envelope, Channel::Ordered, &req.sender)?;
        if req.envelope.group_id != req.group_id {
            return Err(ServiceError::ParseError("group id mismatch".into()));
        }
        let parent = req.envelope.parent_epoch().ok_or_else(|| ServiceError::ParseError("missing parent_epoch".into()))?;
        let log = match self.group(&req.group_id) {
            Some(g) => g,
            None if parent == 0 => {
                let mut groups = self.groups.write().expect("groups lock");
                groups.entry(req.group_id.clone()).or_default().clone()
            }
            None => return Err(ServiceError::UnknownGroup(req.group_id)),
        };
        let mut log = log.lock().expect("group lock");
        if log.entries.is_empty() && log.members.is_empty() {
            log.members.insert(req.sender.clone());
        }
        if !log.members.contains(&req.sender) {
            return Err(ServiceError::NotAMember(req.sender));
        }
        let view = log.view_mut(&req.sender);
        let from = req.last_acked.map_or(0, |a| a as usize + 1).min(view.len());
        let backlog = view[from..].to_vec();
        if parent == view.len() as u64 {
            let seq = view.len() as u64;
            let mut env = req.envelope;
            env.seq = Some(seq);
            view.push(env);
            Ok(SendOrderedResult::Accepted { seq, backlog })
        } else {
            self.conflicts.fetch_add(1, Ordering::Relaxed);
            Ok(SendOrderedResult::RejectedConflict { backlog })
        }
    }

    pub fn send_unordered(&self, req: SendUnordered) -> Result<Delivered, ServiceError> {
        self.check_ban(&req.sender)?;
        Self::check_envelope(&req.envelope, Channel::Unordered, &req.sender)?;
        let recipients: Vec<String> = match req.recipients {
            Some(r) => r,
            None => self
                .group(&req.envelope.group_id)
                .map(|g| g.lock().expect("group lock").members.iter().cloned().collect())
                .unwrap_or_default(),
        };
        let mut faults = self.faults.lock().expect("fault lock");
        let mut queues = self.queues.lock().expect("queue lock");
        let mut delivered = 0;
        for to in recipients.into_iter().filter(|r| *r != req.sender) {
            let rule = faults.drop.iter_mut().find(|d| {
                d.count > 0
                    && d.from.as_ref().is_none_or(|f| *f == req.sender)
                    && d.to.as_ref().is_none_or(|t| *t == to)
            });
            if let Some(rule) = rule {
                rule.count -= 1;
                continue;
            }
            queues.entry(to).or_default().push_back(req.envelope.clone());
            delivered += 1;
        }
        Ok(Delivered { delivered })
    }

    pub fn sync(&self, req: SyncRequest) -> SyncResult {
        let mut out = SyncResult::default();
        for (gid, last) in &req.last_acked {
            let Some(log) = self.group(gid) else { continue };
            let log = log.lock().expect("group lock");
            if !log.members.contains(&req.user) {
                continue;
            }
            let view = log.view(&req.user);
            let from = last.map_or(0, |a| a as usize + 1);
            if from < view.len() {
                out.ordered.insert(gid.clone(), view[from..].to_vec());
            }
        }
        {
            let mut faults = self.faults.lock().expect("fault lock");
            if let Some(n) = faults.delay.get_mut(&req.user) {
                if *n > 0 {
                    *n -= 1;
                    return out;
                }
            }
        }
        let drained: Vec<Envelope> =
            self.queues.lock().expect("queue lock").remove(&req.user).map(Vec::from).unwrap_or_default();
        out.unordered = drained;
        if let Some(rng) = self.reorder.lock().expect("reorder lock").as_mut() {
            out.unordered.shuffle(rng);
        }
        out
    }

    pub fn publish_key_packages(&self, req: PublishKeyPackages) -> Result<usize, ServiceError> {
        if req.key_packages.iter().any(|kp| kp.username != req.user || !kp.verify()) {
            return Err(ServiceError::BadKeyPackage);
        }
        let mut kps = self.key_packages.lock().expect("kp lock");
        let q = kps.entry(req.user).or_default();
        q.extend(req.key_packages);
        Ok(q.len())
    }

    /// Single use: every fetch pops one package.
    pub fn fetch_key_package(&self, username: &str) -> Result<KeyPackage, ServiceError> {
        self.key_packages
            .lock()
            .expect("kp lock")
            .get_mut(username)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| ServiceError::Exhausted(username.into()))
    }

    pub fn relay_welcome(&self, req: RelayWelcome) -> Result<(), ServiceError> {
        self.check_ban(&req.sender)?;
        Self::check_envelope(&req.envelope, Channel::Welcome, &req.sender)?;
        let log = self.groups.write().expect("groups lock").entry(req.envelope.group_id.clone()).or_default().clone();
        log.lock().expect("group lock").members.insert(req.recipient.clone());
        self.queues.lock().expect("queue lock").entry(req.recipient).or_default().push_back(req.envelope);
        Ok(())
    }

    /// Repeated bans keep the later expiry.
    pub async fn apply_ban(&self, order: AdminOrder<BanOrder>) -> Result<(), ServiceError> {
        let key = self.moderator.moderator_key().await.ok_or(ServiceError::Unauthorized)?;
        if order.signer != MODERATION_USER || !order.verify(ops::BAN, &key) {
            return Err(ServiceError::Unauthorized);
        }
        let mut bans = self.bans.lock().expect("ban lock");
        let slot = bans.entry(order.order.username).or_insert(Some(0));
        *slot = match (*slot, order.order.until) {
            (None, _) | (_, None) => None,
            (Some(a), Some(b)) => Some(a.max(b)),
        };
        Ok(())
    }

    pub fn set_faults(&self, faults: Faults) {
        for p in &faults.partitions {
            self.partition(&p.group_id, p.side.clone());
        }
        *self.reorder.lock().expect("reorder lock") = faults.reorder_seed.map(ChaCha8Rng::seed_from_u64);
        *self.faults.lock().expect("fault lock") = faults;
    }

    /// From now on `side` sees a private copy of the group log.
    pub fn partition(&self, group_id: &str, side: BTreeSet<String>) {
        let log = self.groups.write().expect("groups lock").entry(group_id.into()).or_default().clone();
        let mut log = log.lock().expect("group lock");
        let fork_at = log.entries.len();
        let entries = log.entries.clone();
        log.shadow = Some(Shadow { side, fork_at, entries });
    }

    /// Ends a partition and cross-delivers each side's commits to the
    /// other side, stripped of their sequence numbers.
    pub fn heal(&self, group_id: &str) -> usize {
        let Some(log) = self.group(group_id) else { return 0 };
        let mut log = log.lock().expect("group lock");
        let Some(shadow) = log.shadow.take() else { return 0 };
        let main_tail: Vec<Envelope> = log.entries[shadow.fork_at..].to_vec();
        let shadow_tail: Vec<Envelope> = shadow.entries[shadow.fork_at..].to_vec();
        let mut queues = self.queues.lock().expect("queue lock");
        let mut n = 0;
        for member in &log.members {
            let foreign = if shadow.side.contains(member) { &main_tail } else { &shadow_tail };
            for env in foreign {
                let mut e = env.clone();
                e.seq = None;
                queues.entry(member.clone()).or_default().push_back(e);
                n += 1;
            }
        }
        n
    }

    pub fn snapshot(&self) -> DsSnapshot {
        DsSnapshot {
            groups: self
                .groups
                .read()
                .expect("groups lock")
                .iter()
                .map(|(k, v)| (k.clone(), v.lock().expect("group lock").clone()))
                .collect(),
            queues: self.queues.lock().expect("queue lock").clone(),
            key_packages: self.key_packages.lock().expect("kp lock").clone(),
            bans: self.bans.lock().expect("ban lock").clone(),
        }
    }

    pub fn restore(&self, snap: DsSnapshot) {
        *self.groups.write().expect("groups lock") =
            snap.groups.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect();
        *self.queues.lock().expect("queue lock") = snap.queues;
        *self.key_packages.lock().expect("kp lock") = snap.key_packages;
        *self.bans.lock().expect("ban lock") = snap.bans;
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        crate::store::write_json(path, &self.snapshot())
    }

    pub fn load(&self, path: &Path) -> std::io::Result<()> {
        self.restore(crate::store::read_json(path)?);
        Ok(())
    }
}

pub const OPS: &[&str] = &[
    ops::SEND_ORDERED,
    ops::SEND_UNORDERED,
    ops::SYNC,
    ops::PUBLISH_KP,
    ops::FETCH_KP,
    ops::WELCOME,
    ops::BAN,
];

#[async_trait]
impl Handler for DeliveryService {
    async fn handle(&self, req: Request) -> Response {
        match req.op.as_str() {
            ops::SEND_ORDERED => Response::from_result(req.parse().and_then(|r| self.send_ordered(r))),
            ops::SEND_UNORDERED => Response::from_result(req.parse().and_then(|r| self.send_unordered(r))),
            ops::SYNC => Response::from_result(req.parse().map(|r| self.sync(r))),
            ops::PUBLISH_KP => Response::from_result(req.parse().and_then(|r| self.publish_key_packages(r))),
            ops::FETCH_KP => {
                Response::from_result(req.parse::<FetchKeyPackage>().and_then(|r| self.fetch_key_package(&r.username)))
            }
            ops::WELCOME => Response::from_result(req.parse().and_then(|r| self.relay_welcome(r))),
            ops::BAN => match req.parse() {
                Ok(order) => Response::from_result(self.apply_ban(order).await),
                Err(e) => Response::from_result::<()>(Err(e)),
            },
            _ => Response::from_result::<()>(Err(ServiceError::UnknownOp(req.op))),
        }
    }
}

#[cfg(test)]
mod tests;
