//! Epoch-based encrypted group messaging with ordered application messages.
//!
//! Key agreement is a flat schedule: every commit carries a fresh
//! `commit_secret` sealed individually to each remaining member, and the next
//! epoch secret is `kdf(epoch_secret, "epoch", commit_secret || transcript')`.
//! A removed member is left out of the fan-out and cannot follow the group.
//!
//! Ordered envelopes expose `parent_epoch` and the parent transcript hash in
//! their unencrypted header so a sequencing server can reject conflicting
//! commits and a receiver can tell a fork from a tampered message.

mod wire;

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand_core::CryptoRngCore;
use serde::{Deserialize, Serialize};

use crate::backoff::Backoff;
use crate::canonical;
use crate::crypto::{self, Digest32, KemKeyPair, PublicKey, SecretKey, SigKeyPair};

pub use wire::{
    Channel, Commit, Envelope, FanoutEntry, KeyPackage, Member, OrderedAad, Proposal, UnorderedAad,
    Welcome, WelcomeAad, MAX_OAM_LEN,
};

/// KeyPackages produced per client for upload.
pub const KEY_PACKAGE_BATCH: usize = 10;
pub const MAX_USERNAME_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MlsError {
    #[error("username must be 1..=64 bytes")]
    UsernameError,
    #[error("group {0} already exists")]
    DuplicateGroup(String),
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("{0} is not a member")]
    NotAMember(String),
    #[error("{0} is already a member")]
    AlreadyMember(String),
    #[error("key package does not verify")]
    BadKeyPackage,
    #[error("a commit is already in flight for this group")]
    PendingCommitInFlight,
    #[error("no commit in flight")]
    NoPendingCommit,
    #[error("decryption failed")]
    DecryptError,
    #[error("authentication failed: {0}")]
    AuthFailure(&'static str),
    #[error("commit extends epoch {got} but local epoch is {local}")]
    EpochGap { local: u64, got: u64 },
    #[error("group is frozen after a detected fork")]
    GroupFrozen,
    #[error("in-flight commit was superseded by another commit")]
    CommitSuperseded,
    #[error("retries exhausted")]
    RetriesExhausted,
    #[error("OAM payload exceeds 1 MiB")]
    PayloadTooLarge,
    #[error("malformed message: {0}")]
    Malformed(&'static str),
}

pub type Result<T> = core::result::Result<T, MlsError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PriorEpoch {
    epoch: u64,
    secret: SecretKey,
    members: Vec<Member>,
}

/// A commit produced locally and not yet confirmed by the sequencer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PendingCommit {
    pub parent_epoch: u64,
    pub proposals: Vec<Proposal>,
    pub envelope: Envelope,
    pub welcomes: Vec<(String, Envelope)>,
    pub attempts: u32,
    /// Another commit merged on our parent epoch; only a rebase can help.
    pub superseded: bool,
    commit: Commit,
    commit_secret: SecretKey,
    new_kem: Option<KemKeyPair>,
}

/// Per-group messaging-layer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupCryptoState {
    pub group_id: String,
    pub epoch: u64,
    pub members: Vec<Member>,
    epoch_secret: SecretKey,
    pub transcript_hash: Digest32,
    prior: Option<PriorEpoch>,
    own_kem: KemKeyPair,
    generation: u64,
    pub pending_commit: Option<PendingCommit>,
    pub joined_epoch: u64,
    /// parent_epoch → digest of the envelope merged on top of it.
    merged: BTreeMap<u64, Digest32>,
    pub frozen: bool,
    /// We were removed by a merged commit.
    pub evicted: bool,
}

impl GroupCryptoState {
    pub fn member(&self, username: &str) -> Option<&Member> {
        self.members.iter().find(|m| m.username == username)
    }

    pub fn is_member(&self, username: &str) -> bool {
        self.member(username).is_some()
    }

    pub fn roster(&self) -> Vec<String> {
        self.members.iter().map(|m| m.username.clone()).collect()
    }

    pub fn own_kem_public(&self) -> PublicKey {
        self.own_kem.public
    }

    fn commit_key(&self) -> [u8; 32] {
        crypto::kdf(&self.epoch_secret.0, "commit", &self.epoch.to_be_bytes())
    }
}

/// Result of merging one commit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergedCommit {
    pub group_id: String,
    /// Epoch after the merge.
    pub epoch: u64,
    pub committer: String,
    pub proposals: Vec<Proposal>,
    pub own: bool,
    pub seq: Option<u64>,
}

impl MergedCommit {
    pub fn oams(&self) -> impl Iterator<Item = &[u8]> {
        self.proposals.iter().filter_map(|p| match p {
            Proposal::Oam(b) => Some(&b[..]),
            _ => None,
        })
    }

    pub fn added(&self) -> impl Iterator<Item = &str> {
        self.proposals.iter().filter_map(|p| match p {
            Proposal::Add(kp) => Some(kp.username.as_str()),
            _ => None,
        })
    }

    pub fn removed(&self) -> impl Iterator<Item = &str> {
        self.proposals.iter().filter_map(|p| match p {
            Proposal::Remove(u) => Some(u.as_str()),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MlsEvent {
    Merged(MergedCommit),
    Application { group_id: String, sender: String, epoch: u64, payload: Vec<u8> },
    ForkDetected { group_id: String, parent_epoch: u64, sender: String },
    Joined { group_id: String, epoch: u64, inviter: String },
}

/// Outgoing artefacts of a commit: the ordered envelope and, for Adds, one
/// Welcome envelope per joiner (to be relayed only after acceptance).
#[derive(Debug, Clone)]
pub struct OutgoingCommit {
    pub envelope: Envelope,
    pub welcomes: Vec<(String, Envelope)>,
}

/// Messaging-layer half of a client.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlsClient {
    pub username: String,
    pub sig: SigKeyPair,
    /// Unused KeyPackage KEM keys, keyed by public key.
    key_packages: BTreeMap<PublicKey, KemKeyPair>,
    groups: BTreeMap<String, GroupCryptoState>,
}

pub fn validate_username(username: &str) -> Result<()> {
    if username.is_empty() || username.len() > MAX_USERNAME_LEN {
        return Err(MlsError::UsernameError);
    }
    Ok(())
}

impl MlsClient {
    /// Fresh identity plus a batch of KeyPackages for upload.
    pub fn init(username: &str, rng: &mut impl CryptoRngCore) -> Result<(Self, Vec<KeyPackage>)> {
        validate_username(username)?;
        let sig = SigKeyPair::generate(rng);
        let mut client = Self {
            username: username.into(),
            sig,
            key_packages: BTreeMap::new(),
            groups: BTreeMap::new(),
        };
        let kps = client.new_key_packages(KEY_PACKAGE_BATCH, rng);
        Ok((client, kps))
    }

    pub fn new_key_packages(&mut self, n: usize, rng: &mut impl CryptoRngCore) -> Vec<KeyPackage> {
        (0..n)
            .map(|_| {
                let kem = KemKeyPair::generate(rng);
                let kp = KeyPackage::create(&self.username, &self.sig, &kem);
                self.key_packages.insert(kem.public, kem);
                kp
            })
            .collect()
    }

    pub fn group(&self, group_id: &str) -> Result<&GroupCryptoState> {
        self.groups.get(group_id).ok_or_else(|| MlsError::UnknownGroup(group_id.into()))
    }

    fn group_mut(&mut self, group_id: &str) -> Result<&mut GroupCryptoState> {
        self.groups.get_mut(group_id).ok_or_else(|| MlsError::UnknownGroup(group_id.into()))
    }

    pub fn groups(&self) -> impl Iterator<Item = &GroupCryptoState> {
        self.groups.values()
    }

    pub fn has_group(&self, group_id: &str) -> bool {
        self.groups.contains_key(group_id)
    }

    pub fn get_epoch(&self, group_id: &str) -> Result<u64> {
        Ok(self.group(group_id)?.epoch)
    }

    pub fn create_group(&mut self, group_id: &str, rng: &mut impl CryptoRngCore) -> Result<()> {
        if self.groups.contains_key(group_id) {
            return Err(MlsError::DuplicateGroup(group_id.into()));
        }
        let own_kem = KemKeyPair::generate(rng);
        let state = GroupCryptoState {
            group_id: group_id.into(),
            epoch: 0,
            members: alloc::vec![Member {
                username: self.username.clone(),
                sig_pk: self.sig.public,
                kem_pk: own_kem.public,
            }],
            epoch_secret: SecretKey(crypto::random_bytes(rng)),
            transcript_hash: crypto::hash_parts(&[b"init", group_id.as_bytes()]),
            prior: None,
            own_kem,
            generation: 0,
            pending_commit: None,
            joined_epoch: 0,
            merged: BTreeMap::new(),
            frozen: false,
            evicted: false,
        };
        self.groups.insert(group_id.into(), state);
        Ok(())
    }

    fn sendable(&self, group_id: &str) -> Result<&GroupCryptoState> {
        let g = self.group(group_id)?;
        if g.frozen {
            return Err(MlsError::GroupFrozen);
        }
        if g.evicted || !g.is_member(&self.username) {
            return Err(MlsError::NotAMember(self.username.clone()));
        }
        Ok(g)
    }

    /// Encrypts `payload` for the group with no ordering guarantee.
    pub fn send_uam(
        &mut self,
        group_id: &str,
        payload: &[u8],
        rng: &mut impl CryptoRngCore,
    ) -> Result<Envelope> {
        self.sendable(group_id)?;
        let sender = self.username.clone();
        let sig = self.sig.clone();
        let g = self.group_mut(group_id)?;
        let generation = g.generation;
        g.generation += 1;
        let aad = canonical::to_vec(&UnorderedAad {
            channel: Channel::Unordered,
            group_id: group_id.into(),
            sender: sender.clone(),
            generation,
        });
        let key = uam_key(&g.epoch_secret, &sender, generation);
        let signature = sig.sign(&uam_signed_bytes(&aad, payload));
        let mut pt = signature.0.to_vec();
        pt.extend_from_slice(payload);
        let ct = crypto::aead_seal_framed(&key, &aad, &pt, rng);
        Ok(Envelope {
            channel: Channel::Unordered,
            group_id: group_id.into(),
            sender,
            seq: None,
            aad_hex: aad.into(),
            ct_hex: ct.into(),
        })
    }

    /// Commits a single ordered application message proposal.
    pub fn send_oam(
        &mut self,
        group_id: &str,
        payload: &[u8],
        rng: &mut impl CryptoRngCore,
    ) -> Result<OutgoingCommit> {
        self.commit(group_id, alloc::vec![Proposal::Oam(payload.into())], rng)
    }

    pub fn add_user(
        &mut self,
        group_id: &str,
        key_package: KeyPackage,
        rng: &mut impl CryptoRngCore,
    ) -> Result<OutgoingCommit> {
        self.commit(group_id, alloc::vec![Proposal::Add(key_package)], rng)
    }

    pub fn remove_user(
        &mut self,
        group_id: &str,
        username: &str,
        rng: &mut impl CryptoRngCore,
    ) -> Result<OutgoingCommit> {
        self.commit(group_id, alloc::vec![Proposal::Remove(username.into())], rng)
    }

    pub fn update_user(&mut self, group_id: &str, rng: &mut impl CryptoRngCore) -> Result<OutgoingCommit> {
        let kem = KemKeyPair::generate(rng);
        self.key_packages.insert(kem.public, kem.clone());
        self.commit(group_id, alloc::vec![Proposal::Update(kem.public)], rng)
    }

    /// Builds and records a commit carrying `proposals` on the current epoch.
    pub fn commit(
        &mut self,
        group_id: &str,
        proposals: Vec<Proposal>,
        rng: &mut impl CryptoRngCore,
    ) -> Result<OutgoingCommit> {
        if self.sendable(group_id)?.pending_commit.is_some() {
            return Err(MlsError::PendingCommitInFlight);
        }
        self.build_commit(group_id, proposals, 1, rng)
    }

    fn build_commit(
        &mut self,
        group_id: &str,
        proposals: Vec<Proposal>,
        attempts: u32,
        rng: &mut impl CryptoRngCore,
    ) -> Result<OutgoingCommit> {
        if proposals.is_empty() {
            return Err(MlsError::Malformed("commit without proposals"));
        }
        let me = self.username.clone();
        let mut new_kem = None;
        for p in &proposals {
            if let Proposal::Update(pk) = p {
                let kem = self
                    .key_packages
                    .remove(pk)
                    .ok_or(MlsError::Malformed("update key not generated locally"))?;
                new_kem = Some(kem);
            }
        }
        let sig = self.sig.clone();
        let g = self.group(group_id)?;
        let next_members = apply_proposals(&g.members, &proposals, &me)?;
        let commit_secret = SecretKey(crypto::random_bytes(rng));
        let fanout: Vec<FanoutEntry> = next_members
            .iter()
            .filter(|m| m.username != me)
            .filter_map(|m| {
                // Joiners receive the epoch secret via their Welcome.
                g.member(&m.username).map(|cur| FanoutEntry {
                    member: m.username.clone(),
                    sealed_hex: crypto::seal(&cur.kem_pk, &commit_secret.0, rng).into(),
                })
            })
            .collect();
        let tbs = Commit::tbs_bytes(group_id, g.epoch, &proposals, &me, &fanout);
        let commit = Commit {
            parent_epoch: g.epoch,
            proposals: proposals.clone(),
            committer: me.clone(),
            commit_secret_fanout: fanout,
            sig_hex: sig.sign(&tbs),
        };
        let aad = canonical::to_vec(&OrderedAad {
            channel: Channel::Ordered,
            group_id: group_id.into(),
            sender: me.clone(),
            parent_epoch: g.epoch,
            parent_transcript: g.transcript_hash,
        });
        let ct = crypto::aead_seal_framed(&g.commit_key(), &aad, &canonical::to_vec(&commit), rng);
        let envelope = Envelope {
            channel: Channel::Ordered,
            group_id: group_id.into(),
            sender: me.clone(),
            seq: None,
            aad_hex: aad.into(),
            ct_hex: ct.into(),
        };

        let mut welcomes = Vec::new();
        let adds: Vec<&KeyPackage> = proposals
            .iter()
            .filter_map(|p| match p {
                Proposal::Add(kp) => Some(kp),
                _ => None,
            })
            .collect();
        if !adds.is_empty() {
            let (epoch_secret, transcript) = next_secrets(g, &commit, &commit_secret);
            let mut roster = next_members.clone();
            if let Some(kem) = &new_kem {
                set_kem(&mut roster, &me, kem.public);
            }
            let add_envelope = envelope.digest();
            for kp in adds {
                let mut welcome = Welcome {
                    group_id: group_id.into(),
                    epoch: g.epoch + 1,
                    roster: roster.clone(),
                    epoch_secret,
                    transcript_hash: transcript,
                    add_envelope,
                    inviter: me.clone(),
                    inviter_sig: crypto::Signature([0; 64]),
                };
                welcome.inviter_sig = sig.sign(&welcome.tbs());
                let aad = canonical::to_vec(&WelcomeAad {
                    channel: Channel::Welcome,
                    group_id: group_id.into(),
                    sender: me.clone(),
                    recipient: kp.username.clone(),
                    kem_pk: kp.kem_pk,
                });
                // Bind the public header into the sealed plaintext.
                let mut body = (aad.len() as u64).to_be_bytes().to_vec();
                body.extend_from_slice(&aad);
                body.extend_from_slice(&canonical::to_vec(&welcome));
                let sealed = crypto::seal(&kp.kem_pk, &body, rng);
                welcomes.push((
                    kp.username.clone(),
                    Envelope {
                        channel: Channel::Welcome,
                        group_id: group_id.into(),
                        sender: me.clone(),
                        seq: None,
                        aad_hex: aad.into(),
                        ct_hex: sealed.into(),
                    },
                ));
            }
        }

        let parent_epoch = g.epoch;
        let out = OutgoingCommit { envelope: envelope.clone(), welcomes: welcomes.clone() };
        self.group_mut(group_id)?.pending_commit = Some(PendingCommit {
            parent_epoch,
            proposals,
            envelope,
            welcomes,
            attempts,
            superseded: false,
            commit,
            commit_secret,
            new_kem,
        });
        Ok(out)
    }

    /// Merges our in-flight commit after the sequencer accepted it.
    pub fn confirm_pending(&mut self, group_id: &str, seq: Option<u64>) -> Result<MergedCommit> {
        let me = self.username.clone();
        let g = self.group_mut(group_id)?;
        let pending = g.pending_commit.take().ok_or(MlsError::NoPendingCommit)?;
        if pending.superseded || pending.parent_epoch != g.epoch {
            g.pending_commit = Some(pending);
            return Err(MlsError::CommitSuperseded);
        }
        let digest = pending.envelope.digest();
        let mut merged =
            merge(g, &pending.commit, &pending.commit_secret, digest, pending.new_kem.clone(), &me);
        merged.own = true;
        merged.seq = seq;
        Ok(merged)
    }

    /// Drops the in-flight commit without merging it.
    pub fn abandon_pending(&mut self, group_id: &str) -> Result<Option<PendingCommit>> {
        Ok(self.group_mut(group_id)?.pending_commit.take())
    }

    /// Applies the sequencer's earlier commits, then re-issues our own
    /// proposals on top of the resulting epoch.
    ///
    /// Proposals made obsolete by the winners (adding someone who is now a
    /// member, removing someone already gone) are dropped; `Ok(None)` means
    /// nothing is left to send.
    pub fn rebase_pending(
        &mut self,
        group_id: &str,
        newer: &[Envelope],
        rng: &mut impl CryptoRngCore,
    ) -> Result<(Vec<MlsEvent>, Option<OutgoingCommit>)> {
        if self.group(group_id)?.pending_commit.is_none() {
            return Err(MlsError::NoPendingCommit);
        }
        let mut events = Vec::new();
        for env in newer {
            events.extend(self.process_incoming(env)?);
        }
        let backoff = Backoff::default();
        let g = self.group_mut(group_id)?;
        if g.frozen {
            return Err(MlsError::GroupFrozen);
        }
        let pending = g.pending_commit.take().ok_or(MlsError::NoPendingCommit)?;
        if backoff.exhausted(pending.attempts) {
            return Err(MlsError::RetriesExhausted);
        }
        let members = g.members.clone();
        let proposals: Vec<Proposal> = pending
            .proposals
            .into_iter()
            .filter(|p| match p {
                Proposal::Add(kp) => !members.iter().any(|m| m.username == kp.username),
                Proposal::Remove(u) => members.iter().any(|m| &m.username == u),
                _ => true,
            })
            .collect();
        if let Some(kem) = pending.new_kem {
            self.key_packages.insert(kem.public, kem);
        }
        if proposals.is_empty() {
            return Ok((events, None));
        }
        let out = self.build_commit(group_id, proposals, pending.attempts + 1, rng)?;
        Ok((events, Some(out)))
    }

    /// Handles any envelope delivered by the sequencer or a user queue.
    pub fn process_incoming(&mut self, env: &Envelope) -> Result<Vec<MlsEvent>> {
        match env.channel {
            Channel::Ordered => self.process_ordered(env),
            Channel::Unordered => self.process_unordered(env).map(|e| alloc::vec![e]),
            Channel::Welcome => self.join_group(env).map(|e| alloc::vec![e]),
        }
    }

    fn process_ordered(&mut self, env: &Envelope) -> Result<Vec<MlsEvent>> {
        let aad = env.ordered_aad().ok_or(MlsError::Malformed("ordered header"))?;
        if aad.group_id != env.group_id || aad.sender != env.sender {
            return Err(MlsError::AuthFailure("header mismatch"));
        }
        let me = self.username.clone();
        let digest = env.digest();
        let own = self.group(&env.group_id)?.pending_commit.as_ref().map(|p| p.envelope.digest());
        if own == Some(digest) && self.group(&env.group_id)?.epoch == aad.parent_epoch {
            let merged = self.confirm_pending(&env.group_id, env.seq)?;
            return Ok(alloc::vec![MlsEvent::Merged(merged)]);
        }
        let g = self.group_mut(&env.group_id)?;
        if g.frozen || g.evicted || aad.parent_epoch < g.joined_epoch {
            return Ok(Vec::new());
        }
        if aad.parent_epoch < g.epoch {
            return match g.merged.get(&aad.parent_epoch) {
                Some(d) if *d == digest => Ok(Vec::new()),
                _ => Ok(alloc::vec![freeze(g, &aad)]),
            };
        }
        if aad.parent_epoch > g.epoch {
            return Err(MlsError::EpochGap { local: g.epoch, got: aad.parent_epoch });
        }
        if aad.parent_transcript != g.transcript_hash {
            return Ok(alloc::vec![freeze(g, &aad)]);
        }
        let pt = crypto::aead_open_framed(&g.commit_key(), &env.aad_hex, &env.ct_hex)
            .map_err(|_| MlsError::DecryptError)?;
        let commit: Commit =
            canonical::from_slice(&pt).map_err(|_| MlsError::Malformed("commit body"))?;
        if commit.committer != aad.sender || commit.parent_epoch != aad.parent_epoch {
            return Err(MlsError::AuthFailure("commit header mismatch"));
        }
        let committer = g
            .member(&commit.committer)
            .ok_or(MlsError::AuthFailure("committer not a member"))?;
        if !commit.verify(&env.group_id, &committer.sig_pk) {
            return Err(MlsError::AuthFailure("commit signature"));
        }
        apply_proposals(&g.members, &commit.proposals, &commit.committer)?;
        let removes_me = commit.proposals.iter().any(|p| matches!(p, Proposal::Remove(u) if *u == me));
        if let Some(p) = g.pending_commit.as_mut() {
            p.superseded = true;
        }
        let mut merged = if removes_me {
            g.evicted = true;
            g.members = apply_proposals(&g.members, &commit.proposals, &commit.committer)?;
            g.epoch += 1;
            MergedCommit {
                group_id: g.group_id.clone(),
                epoch: g.epoch,
                committer: commit.committer.clone(),
                proposals: commit.proposals.clone(),
                own: false,
                seq: None,
            }
        } else {
            let entry = commit
                .commit_secret_fanout
                .iter()
                .find(|f| f.member == me)
                .ok_or(MlsError::AuthFailure("no fan-out entry for us"))?;
            let secret = crypto::open(&g.own_kem.secret, &entry.sealed_hex)
                .map_err(|_| MlsError::DecryptError)?;
            let secret: [u8; 32] =
                secret.try_into().map_err(|_| MlsError::Malformed("commit secret length"))?;
            merge(g, &commit, &SecretKey(secret), digest, None, &me)
        };
        merged.seq = env.seq;
        Ok(alloc::vec![MlsEvent::Merged(merged)])
    }

    /// Tries the current epoch, then the one before it.
    fn process_unordered(&mut self, env: &Envelope) -> Result<MlsEvent> {
        let aad = env.unordered_aad().ok_or(MlsError::Malformed("unordered header"))?;
        if aad.group_id != env.group_id || aad.sender != env.sender {
            return Err(MlsError::AuthFailure("header mismatch"));
        }
        let g = self.group(&env.group_id)?;
        if g.frozen {
            return Err(MlsError::GroupFrozen);
        }
        let mut candidates = alloc::vec![(g.epoch, &g.epoch_secret, &g.members)];
        if let Some(p) = &g.prior {
            candidates.push((p.epoch, &p.secret, &p.members));
        }
        for (epoch, secret, members) in candidates {
            let key = uam_key(secret, &aad.sender, aad.generation);
            let Ok(pt) = crypto::aead_open_framed(&key, &env.aad_hex, &env.ct_hex) else {
                continue;
            };
            if pt.len() < crypto::SIGNATURE_LEN {
                return Err(MlsError::Malformed("short application message"));
            }
            let (sig, payload) = pt.split_at(crypto::SIGNATURE_LEN);
            let sender = members
                .iter()
                .find(|m| m.username == aad.sender)
                .ok_or(MlsError::AuthFailure("sender not a member"))?;
            let sig = crypto::Signature(sig.try_into().expect("split at 64"));
            if !crypto::verify(&sender.sig_pk, &uam_signed_bytes(&env.aad_hex, payload), &sig) {
                return Err(MlsError::AuthFailure("application signature"));
            }
            return Ok(MlsEvent::Application {
                group_id: env.group_id.clone(),
                sender: aad.sender,
                epoch,
                payload: payload.to_vec(),
            });
        }
        Err(MlsError::DecryptError)
    }

    /// Installs a group from a Welcome sealed to one of our KeyPackages.
    pub fn join_group(&mut self, env: &Envelope) -> Result<MlsEvent> {
        let aad = env.welcome_aad().ok_or(MlsError::Malformed("welcome header"))?;
        if aad.recipient != self.username {
            return Err(MlsError::DecryptError);
        }
        let kem = self.key_packages.get(&aad.kem_pk).ok_or(MlsError::DecryptError)?;
        let body = crypto::open(&kem.secret, &env.ct_hex).map_err(|_| MlsError::DecryptError)?;
        if body.len() < 8 {
            return Err(MlsError::DecryptError);
        }
        let aad_len = u64::from_be_bytes(body[..8].try_into().expect("8 bytes")) as usize;
        if body.len() < 8 + aad_len || body[8..8 + aad_len] != env.aad_hex[..] {
            return Err(MlsError::DecryptError);
        }
        let welcome: Welcome = canonical::from_slice(&body[8 + aad_len..])
            .map_err(|_| MlsError::Malformed("welcome body"))?;
        if welcome.group_id != env.group_id || welcome.inviter != env.sender {
            return Err(MlsError::AuthFailure("welcome header mismatch"));
        }
        if self.groups.contains_key(&welcome.group_id) {
            return Err(MlsError::DuplicateGroup(welcome.group_id));
        }
        let inviter = welcome
            .roster
            .iter()
            .find(|m| m.username == welcome.inviter)
            .ok_or(MlsError::AuthFailure("inviter not in roster"))?;
        if !crypto::verify(&inviter.sig_pk, &welcome.tbs(), &welcome.inviter_sig) {
            return Err(MlsError::AuthFailure("welcome signature"));
        }
        let me = welcome
            .roster
            .iter()
            .find(|m| m.username == self.username)
            .ok_or(MlsError::AuthFailure("joiner missing from roster"))?;
        if me.kem_pk != aad.kem_pk || me.sig_pk != self.sig.public {
            return Err(MlsError::AuthFailure("joiner keys mismatch"));
        }
        let own_kem = self.key_packages.remove(&aad.kem_pk).expect("checked above");
        let mut merged = BTreeMap::new();
        merged.insert(welcome.epoch - 1, welcome.add_envelope);
        let state = GroupCryptoState {
            group_id: welcome.group_id.clone(),
            epoch: welcome.epoch,
            members: welcome.roster,
            epoch_secret: welcome.epoch_secret,
            transcript_hash: welcome.transcript_hash,
            prior: None,
            own_kem,
            generation: 0,
            pending_commit: None,
            joined_epoch: welcome.epoch,
            merged,
            frozen: false,
            evicted: false,
        };
        self.groups.insert(welcome.group_id.clone(), state);
        Ok(MlsEvent::Joined { group_id: welcome.group_id, epoch: welcome.epoch, inviter: welcome.inviter })
    }

    /// Forgets a group entirely (e.g. after eviction).
    pub fn drop_group(&mut self, group_id: &str) -> Option<GroupCryptoState> {
        self.groups.remove(group_id)
    }

    pub fn unused_key_packages(&self) -> usize {
        self.key_packages.len()
    }

    /// Identity and unused KeyPackages, without any group state.
    pub fn without_groups(&self) -> Self {
        Self {
            username: self.username.clone(),
            sig: self.sig.clone(),
            key_packages: self.key_packages.clone(),
            groups: BTreeMap::new(),
        }
    }

    pub fn insert_group(&mut self, state: GroupCryptoState) {
        self.groups.insert(state.group_id.clone(), state);
    }
}

fn uam_key(epoch_secret: &SecretKey, sender: &str, generation: u64) -> [u8; 32] {
    let mut ctx = sender.as_bytes().to_vec();
    ctx.push(0);
    ctx.extend_from_slice(&generation.to_be_bytes());
    crypto::kdf(&epoch_secret.0, "uam", &ctx)
}

fn uam_signed_bytes(aad: &[u8], payload: &[u8]) -> Vec<u8> {
    let mut out = (aad.len() as u64).to_be_bytes().to_vec();
    out.extend_from_slice(aad);
    out.extend_from_slice(payload);
    out
}

fn set_kem(members: &mut [Member], username: &str, kem_pk: PublicKey) {
    if let Some(m) = members.iter_mut().find(|m| m.username == username) {
        m.kem_pk = kem_pk;
    }
}

/// Roster after `proposals`, validating each one against the current roster.
fn apply_proposals(members: &[Member], proposals: &[Proposal], committer: &str) -> Result<Vec<Member>> {
    let mut next = members.to_vec();
    for p in proposals {
        match p {
            Proposal::Add(kp) => {
                if !kp.verify() {
                    return Err(MlsError::BadKeyPackage);
                }
                if next.iter().any(|m| m.username == kp.username) {
                    return Err(MlsError::AlreadyMember(kp.username.clone()));
                }
                next.push(kp.member());
            }
            Proposal::Remove(u) => {
                let before = next.len();
                next.retain(|m| &m.username != u);
                if next.len() == before {
                    return Err(MlsError::NotAMember(u.clone()));
                }
            }
            Proposal::Update(pk) => set_kem(&mut next, committer, *pk),
            Proposal::Oam(body) => {
                if body.len() > MAX_OAM_LEN {
                    return Err(MlsError::PayloadTooLarge);
                }
            }
        }
    }
    Ok(next)
}

fn next_secrets(g: &GroupCryptoState, commit: &Commit, commit_secret: &SecretKey) -> (SecretKey, Digest32) {
    let transcript = crypto::hash_parts(&[&g.transcript_hash.0, &canonical::to_vec(commit)]);
    let mut ctx = commit_secret.0.to_vec();
    ctx.extend_from_slice(&transcript.0);
    (SecretKey(crypto::kdf(&g.epoch_secret.0, "epoch", &ctx)), transcript)
}

fn merge(
    g: &mut GroupCryptoState,
    commit: &Commit,
    commit_secret: &SecretKey,
    envelope_digest: Digest32,
    own_new_kem: Option<KemKeyPair>,
    me: &str,
) -> MergedCommit {
    let (secret, transcript) = next_secrets(g, commit, commit_secret);
    let mut members = apply_proposals(&g.members, &commit.proposals, &commit.committer)
        .expect("proposals validated before merge");
    if let Some(kem) = own_new_kem {
        set_kem(&mut members, me, kem.public);
        g.own_kem = kem;
    }
    let old_members = core::mem::replace(&mut g.members, members);
    let old_secret = core::mem::replace(&mut g.epoch_secret, secret);
    g.prior = Some(PriorEpoch { epoch: g.epoch, secret: old_secret, members: old_members });
    g.merged.insert(g.epoch, envelope_digest);
    g.transcript_hash = transcript;
    g.epoch += 1;
    g.generation = 0;
    MergedCommit {
        group_id: g.group_id.clone(),
        epoch: g.epoch,
        committer: commit.committer.clone(),
        proposals: commit.proposals.clone(),
        own: false,
        seq: None,
    }
}

fn freeze(g: &mut GroupCryptoState, aad: &OrderedAad) -> MlsEvent {
    g.frozen = true;
    g.pending_commit = None;
    MlsEvent::ForkDetected {
        group_id: g.group_id.clone(),
        parent_epoch: aad.parent_epoch,
        sender: aad.sender.to_string(),
    }
}
