use super::*;
use crate::directory::DirectoryEntry;
use crate::governance::state::MEMBER;
use alloc::vec;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Honest in-memory server: one ordered log per group plus mailboxes.
struct World {
    rng: ChaCha20Rng,
    clients: BTreeMap<String, Client>,
    kps: BTreeMap<String, Vec<KeyPackage>>,
    dir: BTreeMap<String, DirectoryEntry>,
    logs: BTreeMap<String, Vec<Envelope>>,
    members: BTreeMap<String, BTreeSet<String>>,
    inbox: BTreeMap<String, Vec<Envelope>>,
    /// Commits the server refused, for assertions.
    rejected: usize,
}

impl World {
    fn new(names: &[&str]) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mut w = Self {
            rng: rng.clone(),
            clients: BTreeMap::new(),
            kps: BTreeMap::new(),
            dir: BTreeMap::new(),
            logs: BTreeMap::new(),
            members: BTreeMap::new(),
            inbox: BTreeMap::new(),
            rejected: 0,
        };
        for n in names {
            let (c, k) = Client::new(n, &mut rng).unwrap();
            w.dir.insert(
                n.to_string(),
                DirectoryEntry {
                    username: n.to_string(),
                    sig_pk: c.mls.sig.public,
                    gov_pk: c.gov_key.public,
                    registered_at: 0,
                    revoked: false,
                },
            );
            w.clients.insert(n.to_string(), c);
            w.kps.insert(n.to_string(), k);
        }
        w.rng = rng;
        w
    }

    fn c(&mut self, n: &str) -> &mut Client {
        self.clients.get_mut(n).unwrap()
    }

    fn kp(&mut self, n: &str) -> KeyPackage {
        self.kps.get_mut(n).unwrap().pop().unwrap()
    }

    /// Group "g" created by the first user, everyone else invited by them.
    fn group(names: &[&str]) -> Self {
        let mut w = Self::new(names);
        w.with(names[0], |c, _, r| c.create_group("g", "c", r)).unwrap();
        for n in &names[1..] {
            let kp = w.kp(n);
            w.with(names[0], |c, dir, rng| c.invite("g", kp, dir, rng)).unwrap();
            w.pump();
        }
        w
    }

    fn with<T>(&mut self, who: &str, f: impl FnOnce(&mut Client, &dyn Directory, &mut ChaCha20Rng) -> T) -> T {
        let c = self.clients.get_mut(who).unwrap();
        f(c, &self.dir, &mut self.rng)
    }

    fn deliver(&mut self, from: &str, out: Outgoing) {
        match out {
            Outgoing::Commit { group_id, envelope } => {
                let log = self.logs.entry(group_id.clone()).or_default();
                let last = self.clients[from].groups[&group_id].last_acked.map_or(0, |a| a as usize + 1);
                if envelope.parent_epoch() == Some(log.len() as u64) {
                    let mut e = envelope;
                    let seq = log.len() as u64;
                    e.seq = Some(seq);
                    log.push(e);
                    self.members.entry(group_id.clone()).or_default().insert(from.into());
                    self.with(from, |c, d, r| c.commit_accepted(&group_id, seq, d, r)).unwrap();
                } else {
                    self.rejected += 1;
                    let backlog = log[last.min(log.len())..].to_vec();
                    self.with(from, |c, d, r| c.commit_rejected(&group_id, &backlog, d, r)).unwrap();
                }
            }
            Outgoing::Unordered { envelope, recipients } => {
                let to: Vec<String> = match recipients {
                    Some(r) => r,
                    None => self.members.get(&envelope.group_id).map(|m| m.iter().cloned().collect()).unwrap_or_default(),
                };
                for t in to.into_iter().filter(|t| t != from) {
                    self.inbox.entry(t).or_default().push(envelope.clone());
                }
            }
            Outgoing::Welcome { recipient, envelope } => {
                self.members.entry(envelope.group_id.clone()).or_default().insert(recipient.clone());
                self.inbox.entry(recipient).or_default().push(envelope);
            }
            Outgoing::FetchKeyPackage { group_id, user } => {
                let kp = self.kp(&user);
                self.with(from, |c, _, r| c.add_invited(&group_id, kp, r)).unwrap();
            }
        }
    }

    /// Delivers everything until no client has anything left to say.
    fn pump(&mut self) {
        for _ in 0..200 {
            let mut busy = false;
            let names: Vec<String> = self.clients.keys().cloned().collect();
            for n in &names {
                for out in self.c(n).take_outgoing() {
                    busy = true;
                    self.deliver(n, out);
                }
            }
            for n in &names {
                if self.sync(n) > 0 {
                    busy = true;
                }
            }
            if !busy {
                return;
            }
        }
        panic!("network did not settle");
    }

    fn sync(&mut self, who: &str) -> usize {
        let unordered = self.inbox.remove(who).unwrap_or_default();
        let mut ordered = BTreeMap::new();
        for (gid, g) in &self.clients[who].groups {
            let from = g.last_acked.map_or(0, |a| a as usize + 1);
            let log = self.logs.get(gid).map(|l| l.as_slice()).unwrap_or(&[]);
            if from < log.len() {
                ordered.insert(gid.clone(), log[from..].to_vec());
            }
        }
        let n = ordered.values().map(Vec::len).sum::<usize>() + unordered.len();
        if n > 0 {
            self.with(who, |c, d, r| c.ingest_sync(&ordered, &unordered, d, r));
        }
        n
    }

    fn assert_converged(&self, names: &[&str]) {
        let h0 = self.clients[names[0]].gov_hash("g");
        let e0 = self.clients[names[0]].mls.get_epoch("g").unwrap();
        assert!(h0.is_some());
        for n in &names[1..] {
            assert_eq!(self.clients[*n].gov_hash("g"), h0, "{n}");
            assert_eq!(self.clients[*n].mls.get_epoch("g").unwrap(), e0, "{n}");
        }
    }

    fn alerts(&self, who: &str) -> &[Alert] {
        &self.clients[who].alerts
    }

    fn events(&mut self, who: &str, kind: &str) -> Vec<ClientEvent> {
        self.c(who).take_events().into_iter().filter(|e| e.kind == kind).collect()
    }
}

#[test]
fn invite_announce_accept() {
    let w = World::group(&["alice", "bob", "carol"]);
    w.assert_converged(&["alice", "bob", "carol"]);
    for n in ["alice", "bob", "carol"] {
        assert!(w.alerts(n).is_empty(), "{n}: {:?}", w.alerts(n));
        let g = &w.clients[n].groups["g"];
        assert!(g.awaiting.is_none());
        assert!(g.expected_accepts.is_empty(), "{n}: {:?}", g.expected_accepts);
    }
    let gov = w.clients["bob"].gov("g").unwrap();
    assert_eq!(gov.user_roles["bob"], [MEMBER.to_string()].into());
    assert!(gov.invited.is_empty());
    let s = w.clients["carol"].summary("g").unwrap();
    assert_eq!(s.roster, vec!["alice", "bob", "carol"]);
    assert_eq!(s.epoch, 2);
}

#[test]
fn texts_reach_everyone_and_filter_hides() {
    let mut w = World::group(&["alice", "bob", "carol"]);
    w.with("alice", |c, d, r| c.act("g", ActionType::SetTextFilter, json!({ "words": ["spam"] }), d, r)).unwrap();
    w.pump();
    w.with("bob", |c, d, r| c.send_text("g", "hello", d, r)).unwrap();
    w.with("bob", |c, d, r| c.send_text("g", "buy SPAM now", d, r)).unwrap();
    w.pump();
    for n in ["alice", "bob", "carol"] {
        let con = &w.clients[n].groups["g"].con;
        assert_eq!(con.messages.len(), 2, "{n}");
        let visible: Vec<&str> = con.visible().map(|m| m.text()).collect();
        assert_eq!(visible, vec!["hello"], "{n}");
    }
    w.assert_converged(&["alice", "bob", "carol"]);
}

#[test]
fn member_cannot_kick_admin_can() {
    let mut w = World::group(&["alice", "bob", "carol"]);
    let err = w.with("bob", |c, d, r| c.act("g", ActionType::KickUser, json!({ "user": "carol" }), d, r)).unwrap_err();
    assert!(matches!(err, ClientError::Rejected(_)));
    w.with("alice", |c, d, r| c.act("g", ActionType::KickUser, json!({ "user": "carol" }), d, r)).unwrap();
    w.pump();
    w.assert_converged(&["alice", "bob"]);
    assert_eq!(w.clients["alice"].roster("g").unwrap(), vec!["alice", "bob"]);
    assert!(w.clients["carol"].mls.group("g").unwrap().evicted);
    assert!(!w.clients["bob"].gov("g").unwrap().user_roles.contains_key("carol"));
    // Carol cannot read anything sent afterwards.
    w.with("bob", |c, d, r| c.send_text("g", "after", d, r)).unwrap();
    w.pump();
    assert!(w.clients["carol"].groups["g"].con.messages.iter().all(|m| m.text() != "after"));
    assert!(w.alerts("alice").is_empty());
}

#[test]
fn poll_passes_with_proposer_batching() {
    let mut w = World::group(&["alice", "bob", "carol"]);
    let (pid, ev) = w
        .with("bob", |c, d, r| c.poll_start("g", ActionType::ChangeName, json!({ "name": "new" }), d, r))
        .unwrap();
    assert_eq!(ev.verdict, Verdict::Proposed);
    w.pump();
    assert!(w.clients["carol"].gov("g").unwrap().pending.contains_key(&pid));
    w.with("alice", |c, d, r| c.vote("g", &pid, true, d, r)).unwrap();
    w.pump();
    assert_eq!(w.clients["alice"].gov("g").unwrap().name(), "g");
    w.with("carol", |c, d, r| c.vote("g", &pid, true, d, r)).unwrap();
    w.pump();
    for n in ["alice", "bob", "carol"] {
        let gov = w.clients[n].gov("g").unwrap();
        assert_eq!(gov.name(), "new", "{n}");
        assert!(gov.pending.is_empty());
    }
    w.assert_converged(&["alice", "bob", "carol"]);
    let resolved = w.events("carol", "proposal_resolved");
    assert_eq!(resolved.len(), 1);
    assert_eq!(resolved[0].data["verdict"], "passed");
}

#[test]
fn poll_fails_on_no_majority() {
    let mut w = World::group(&["alice", "bob", "carol", "dave"]);
    let (pid, _) = w
        .with("bob", |c, d, r| c.poll_start("g", ActionType::ChangeTopic, json!({ "topic": "t" }), d, r))
        .unwrap();
    w.pump();
    // n = 4, threshold 3: two no votes make it unreachable.
    w.with("carol", |c, d, r| c.vote("g", &pid, false, d, r)).unwrap();
    w.with("dave", |c, d, r| c.vote("g", &pid, false, d, r)).unwrap();
    w.pump();
    for n in ["alice", "bob", "carol", "dave"] {
        let gov = w.clients[n].gov("g").unwrap();
        assert!(gov.pending.is_empty(), "{n}");
        assert_eq!(gov.topic(), w.clients["alice"].gov("g").unwrap().topic());
    }
    w.assert_converged(&["alice", "bob", "carol", "dave"]);
}

#[test]
fn invite_by_vote_fetches_key_package() {
    let mut w = World::group(&["alice", "bob", "carol"]);
    let kp = w.kp_for_new("dave");
    // Members may only propose invitations.
    let ev = w.with("bob", |c, d, r| c.invite("g", kp.clone(), d, r));
    w.kps.get_mut("dave").unwrap().push(kp);
    assert!(matches!(ev, Err(ClientError::Rejected(_))));
    let (pid, _) = w
        .with("bob", |c, d, r| c.poll_start("g", ActionType::InviteUser, json!({ "user": "dave" }), d, r))
        .unwrap();
    w.pump();
    w.with("alice", |c, d, r| c.vote("g", &pid, true, d, r)).unwrap();
    w.with("carol", |c, d, r| c.vote("g", &pid, true, d, r)).unwrap();
    w.pump();
    w.assert_converged(&["alice", "bob", "carol", "dave"]);
    assert_eq!(w.clients["dave"].roster("g").unwrap().len(), 4);
    for n in ["alice", "bob", "carol", "dave"] {
        assert!(w.alerts(n).is_empty(), "{n}: {:?}", w.alerts(n));
    }
}

#[test]
fn concurrent_commits_rebase_and_converge() {
    let mut w = World::group(&["alice", "bob", "carol"]);
    w.with("alice", |c, d, r| c.act("g", ActionType::ChangeTopic, json!({ "topic": "a" }), d, r)).unwrap();
    w.with("alice", |c, d, r| c.act("g", ActionType::DefRole, json!({ "role": "mod", "permissions": ["KickUser"] }), d, r))
        .unwrap();
    // Bob has no right to this, but a PollStart is ordered too.
    w.with("bob", |c, d, r| c.poll_start("g", ActionType::ChangeName, json!({ "name": "b" }), d, r)).unwrap();
    w.pump();
    w.assert_converged(&["alice", "bob", "carol"]);
    let gov = w.clients["carol"].gov("g").unwrap();
    assert_eq!(gov.topic(), "a");
    assert!(gov.roles.contains_key("mod"));
    assert_eq!(gov.pending.len(), 1);
    assert!(w.rejected >= 1);
}

#[test]
fn doctored_announcement_is_flagged() {
    let mut w = World::group(&["alice", "carol"]);
    let kp = w.kp_for_new("bob");
    w.with("alice", |c, d, r| c.invite("g", kp, d, r)).unwrap();
    // Deliver the commit honestly, then swap the announcement.
    let outs = w.c("alice").take_outgoing();
    for o in outs {
        w.deliver("alice", o);
    }
    let outs = w.c("alice").take_outgoing();
    let mut fake = w.clients["alice"].gov("g").unwrap().clone();
    fake.user_roles.insert("bob".into(), [crate::governance::state::ADMIN.to_string()].into());
    for o in outs {
        match o {
            Outgoing::Unordered { recipients: Some(r), .. } if r == vec!["bob".to_string()] => {
                let epoch = w.clients["alice"].mls.get_epoch("g").unwrap();
                let env = w.with("alice", |c, _, r| {
                    let a = c.sign_action("g", "c", ActionType::GovStateAnnouncement, announcement_payload(&fake, epoch), r);
                    c.mls.send_uam("g", &a.to_bytes(), r).unwrap()
                });
                w.inbox.entry("bob".into()).or_default().push(env);
            }
            o => w.deliver("alice", o),
        }
    }
    w.pump();
    assert_eq!(w.clients["bob"].gov("g").unwrap(), &fake);
    for n in ["alice", "carol"] {
        let alerts = w.alerts(n);
        assert!(
            alerts.iter().any(|a| a.kind == AlertKind::InvalidInitialState { joiner: "bob".into(), inviter: "alice".into() }),
            "{n}: {alerts:?}"
        );
        assert!(w.clients[n].groups["g"].quarantined.contains("bob"));
    }
    // Bob's later actions are ignored by the honest members.
    w.with("bob", |c, d, r| c.send_text("g", "hi", d, r)).unwrap();
    w.pump();
    assert!(w.clients["carol"].groups["g"].con.messages.is_empty());
}

#[test]
fn announcement_for_wrong_epoch_rejected() {
    let mut w = World::group(&["alice"]);
    let kp = w.kp_for_new("bob");
    w.with("alice", |c, d, r| c.invite("g", kp, d, r)).unwrap();
    let outs = w.c("alice").take_outgoing();
    for o in outs {
        w.deliver("alice", o);
    }
    let gov = w.clients["alice"].gov("g").unwrap().clone();
    for o in w.c("alice").take_outgoing() {
        match o {
            Outgoing::Unordered { .. } => {
                let env = w.with("alice", |c, _, r| {
                    let a = c.sign_action("g", "c", ActionType::GovStateAnnouncement, announcement_payload(&gov, 0), r);
                    c.mls.send_uam("g", &a.to_bytes(), r).unwrap()
                });
                w.inbox.entry("bob".into()).or_default().push(env);
            }
            o => w.deliver("alice", o),
        }
    }
    w.pump();
    assert!(w.clients["bob"].groups["g"].awaiting.is_some());
    assert!(w.alerts("bob").iter().any(|a| matches!(a.kind, AlertKind::AnnouncementRejected { .. })));
    w.with("bob", |c, d, r| c.tick(d, r));
    assert!(w.alerts("bob").iter().any(|a| matches!(a.kind, AlertKind::AnnouncementMissing { .. })));
}

#[test]
fn report_and_escalation() {
    let mut w = World::group(&["alice", "bob", "carol"]);
    let (ms, kps) = Client::new(MODERATION_USER, &mut w.rng).unwrap();
    w.dir.insert(
        MODERATION_USER.into(),
        DirectoryEntry { username: MODERATION_USER.into(), sig_pk: ms.mls.sig.public, gov_pk: ms.gov_key.public, registered_at: 0, revoked: false },
    );
    w.clients.insert(MODERATION_USER.into(), ms);
    w.kps.insert(MODERATION_USER.into(), kps);

    w.with("carol", |c, d, r| c.send_text("g", "abuse", d, r)).unwrap();
    w.pump();
    let id = w.clients["bob"].groups["g"].con.messages[0].id.clone();
    let report = w.with("bob", |c, d, r| c.report("g", &[id], "rude", d, r)).unwrap();
    w.pump();
    // Only moderators (admins) receive it.
    let r = &w.clients["alice"].groups["g"].con.reports;
    assert_eq!(r.len(), 1);
    assert!(r[0].verified);
    assert!(w.clients["carol"].groups["g"].con.reports.is_empty());

    let kp = w.kp(MODERATION_USER);
    w.with("bob", |c, d, r| c.escalate(&report, Some(kp), d, r)).unwrap();
    w.pump();
    let gid = escalation_group("bob");
    let got = &w.clients[MODERATION_USER].groups[&gid].con.reports;
    assert_eq!(got.len(), 1, "{:?}", w.alerts(MODERATION_USER));
    assert!(got[0].verified);
    assert_eq!(got[0].report.reported, "carol");
    // A second escalation reuses the group.
    w.with("bob", |c, d, r| c.escalate(&report, None, d, r)).unwrap();
    w.pump();
    assert_eq!(w.clients[MODERATION_USER].groups[&gid].con.reports.len(), 2);
}

#[test]
fn forged_sender_binding_rejected() {
    let mut w = World::group(&["alice", "bob", "carol"]);
    // Bob wraps an action claiming to be from carol.
    let env = w.with("bob", |c, _, r| {
        let mut a = c.sign_action("g", "c", ActionType::SendText, json!({ "text": "x" }), r);
        a.header.sender = "carol".into();
        c.mls.send_uam("g", &a.to_bytes(), r).unwrap()
    });
    w.inbox.entry("alice".into()).or_default().push(env);
    w.pump();
    assert!(w.clients["alice"].groups["g"].con.messages.is_empty());
    assert!(w.alerts("alice").iter().any(|a| matches!(a.kind, AlertKind::RejectedMessage { .. })));
}

#[test]
fn persistence_roundtrip() {
    let mut w = World::group(&["alice", "bob"]);
    w.with("bob", |c, d, r| c.send_text("g", "persist me", d, r)).unwrap();
    w.pump();
    let alice = &w.clients["alice"];
    let (m, g) = alice.export_group("g").unwrap();
    let base = serde_json::to_string(&alice.without_groups()).unwrap();
    let m = serde_json::to_string(&m).unwrap();
    let g = serde_json::to_string(&g).unwrap();
    let mut back: Client = serde_json::from_str(&base).unwrap();
    back.import_group(serde_json::from_str(&m).unwrap(), serde_json::from_str(&g).unwrap());
    assert_eq!(back.gov_hash("g"), alice.gov_hash("g"));
    w.clients.insert("alice".into(), back);
    w.with("bob", |c, d, r| c.send_text("g", "again", d, r)).unwrap();
    w.pump();
    assert_eq!(w.clients["alice"].groups["g"].con.messages.len(), 2);
}

impl World {
    fn kp_for_new(&mut self, n: &str) -> KeyPackage {
        let (c, mut kps) = Client::new(n, &mut self.rng).unwrap();
        self.dir.insert(
            n.into(),
            DirectoryEntry { username: n.into(), sig_pk: c.mls.sig.public, gov_pk: c.gov_key.public, registered_at: 0, revoked: false },
        );
        self.clients.insert(n.into(), c);
        let kp = kps.pop().unwrap();
        self.kps.insert(n.into(), kps);
        kp
    }
}

#[test]
fn voters_left_out_of_a_batch_batch_themselves() {
    let names = ["alice", "bob", "carol", "dave"];
    let mut w = World::group(&names);
    let (pid, _) = w
        .with("bob", |c, d, r| c.poll_start("g", ActionType::ChangeTopic, json!({ "topic": "x" }), d, r))
        .unwrap();
    w.pump();
    for v in ["alice", "carol", "dave"] {
        w.with(v, |c, d, r| c.vote("g", &pid, true, d, r)).unwrap();
    }
    for v in ["alice", "carol", "dave"] {
        for out in w.c(v).take_outgoing() {
            w.deliver(v, out);
        }
    }
    // Bob only ever sees alice's ballot and batches just that one.
    let alice_ballot = w.clients["alice"].groups["g"].my_ballots[&pid].clone();
    w.inbox.remove("bob");
    w.with("bob", |c, _, r| c.queue_batch("g", &pid, vec![alice_ballot], 1, r));
    w.pump();
    for n in names {
        let gov = w.clients[n].gov("g").unwrap();
        assert_eq!(gov.topic(), "x", "{n}");
        assert!(gov.pending.is_empty(), "{n}");
    }
    w.assert_converged(&names);
    assert!(!w.events("carol", "self_batch").is_empty());
}
