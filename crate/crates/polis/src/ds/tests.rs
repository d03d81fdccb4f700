use super::*;
use crate::clock::{ManualClock, DAY};
use polis_core::crypto::SigKeyPair;
use polis_core::mls::{MlsClient, OutgoingCommit};
use proptest::prelude::*;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;

struct Fixture {
    ds: DeliveryService,
    clock: Arc<ManualClock>,
    ms: SigKeyPair,
    rng: ChaCha20Rng,
    clients: BTreeMap<String, MlsClient>,
    kps: BTreeMap<String, Vec<KeyPackage>>,
}

impl Fixture {
    fn new(names: &[&str]) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let ms = SigKeyPair::generate(&mut rng);
        let clock = Arc::new(ManualClock::new(1_000));
        let ds = DeliveryService::new(clock.clone(), Arc::new(ms.public));
        let mut clients = BTreeMap::new();
        let mut kps = BTreeMap::new();
        for n in names {
            let (c, k) = MlsClient::init(n, &mut rng).unwrap();
            clients.insert(n.to_string(), c);
            kps.insert(n.to_string(), k);
        }
        Self { ds, clock, ms, rng, clients, kps }
    }

    fn c(&mut self, n: &str) -> &mut MlsClient {
        self.clients.get_mut(n).unwrap()
    }

    fn submit(&self, who: &str, out: &OutgoingCommit, last_acked: Option<u64>) -> SendOrderedResult {
        self.ds
            .send_ordered(SendOrdered {
                sender: who.into(),
                group_id: "g".into(),
                envelope: out.envelope.clone(),
                last_acked,
            })
            .unwrap()
    }

    /// Group "g" of all fixture users, built through the service.
    fn group(names: &[&str]) -> Self {
        let mut f = Self::new(names);
        let mut rng = f.rng.clone();
        f.c(names[0]).create_group("g", &mut rng).unwrap();
        for (i, n) in names.iter().enumerate().skip(1) {
            let kp = f.kps.get_mut(*n).unwrap().pop().unwrap();
            let out = f.c(names[0]).add_user("g", kp, &mut rng).unwrap();
            let SendOrderedResult::Accepted { seq, .. } = f.submit(names[0], &out, None) else { panic!() };
            f.c(names[0]).confirm_pending("g", Some(seq)).unwrap();
            for (to, w) in &out.welcomes {
                f.ds.relay_welcome(RelayWelcome { sender: names[0].into(), recipient: to.clone(), envelope: w.clone() }).unwrap();
            }
            for m in &names[1..i] {
                let e = f.ds.sync(SyncRequest { user: m.to_string(), last_acked: [("g".to_string(), Some(seq - 1))].into() });
                f.c(m).process_incoming(&e.ordered["g"][0]).unwrap();
            }
            let e = f.ds.sync(SyncRequest { user: n.to_string(), last_acked: BTreeMap::new() });
            f.c(n).join_group(&e.unordered[0]).unwrap();
        }
        f.rng = rng;
        f
    }

    fn ban(&self, user: &str, until: Option<u64>, key: &SigKeyPair) -> Result<(), ServiceError> {
        let order = AdminOrder::sign(ops::BAN, MODERATION_USER, self.clock.now(), BanOrder { username: user.into(), until }, key);
        futures::executor::block_on(self.ds.apply_ban(order))
    }

    fn uam(&mut self, who: &str) -> Envelope {
        let mut rng = self.rng.clone();
        let env = self.c(who).send_uam("g", b"hi", &mut rng).unwrap();
        self.rng = rng;
        env
    }
}

#[test]
fn first_commit_creates_log_at_seq_zero() {
    let mut f = Fixture::new(&["alice"]);
    let mut rng = f.rng.clone();
    f.c("alice").create_group("g", &mut rng).unwrap();
    let out = f.c("alice").update_user("g", &mut rng).unwrap();
    assert_eq!(f.submit("alice", &out, None), SendOrderedResult::Accepted { seq: 0, backlog: vec![] });
}

#[test]
fn commit_to_unknown_group_past_epoch_zero_fails() {
    let mut f = Fixture::group(&["alice", "bob"]);
    let mut rng = f.rng.clone();
    let out = f.c("alice").update_user("g", &mut rng).unwrap();
    let mut env = out.envelope.clone();
    env.group_id = "other".into();
    let r = f.ds.send_ordered(SendOrdered { sender: "alice".into(), group_id: "other".into(), envelope: env, last_acked: None });
    assert_eq!(r, Err(ServiceError::UnknownGroup("other".into())));
}

#[test]
fn race_on_same_parent_rejects_the_loser_with_backlog() {
    let mut f = Fixture::group(&["alice", "bob"]);
    let mut rng = f.rng.clone();
    let a = f.c("alice").update_user("g", &mut rng).unwrap();
    let b = f.c("bob").update_user("g", &mut rng).unwrap();
    let SendOrderedResult::Accepted { seq, backlog } = f.submit("alice", &a, Some(0)) else { panic!() };
    assert_eq!(seq, 1);
    assert!(backlog.is_empty());
    let SendOrderedResult::RejectedConflict { backlog } = f.submit("bob", &b, Some(0)) else { panic!() };
    assert_eq!(backlog.len(), 1);
    assert_eq!(backlog[0].digest(), a.envelope.digest());
    assert_eq!(backlog[0].seq, Some(1));
    assert_eq!(f.ds.conflicts(), 1);
}

#[test]
fn non_member_cannot_commit() {
    let mut f = Fixture::group(&["alice", "bob"]);
    let (mut eve, _) = MlsClient::init("eve", &mut f.rng).unwrap();
    eve.create_group("g", &mut f.rng).unwrap();
    let out = eve.update_user("g", &mut f.rng).unwrap();
    let r = f.ds.send_ordered(SendOrdered { sender: "eve".into(), group_id: "g".into(), envelope: out.envelope.clone(), last_acked: None });
    assert_eq!(r, Err(ServiceError::NotAMember("eve".into())));
    let mut env = out.envelope.clone();
    env.sender = "alice".into();
    let r = f.ds.send_ordered(SendOrdered { sender: "eve".into(), group_id: "g".into(), envelope: env, last_acked: None });
    assert!(matches!(r, Err(ServiceError::ParseError(_))));
}

#[test]
fn unordered_fan_out() {
    let mut f = Fixture::group(&["alice", "bob", "carol", "dave"]);
    let env = f.uam("alice");
    let send = |recipients: Option<Vec<String>>| {
        f.ds.send_unordered(SendUnordered { sender: "alice".into(), recipients, envelope: env.clone() }).unwrap().delivered
    };
    assert_eq!(send(Some(vec!["bob".into(), "carol".into(), "dave".into()])), 3);
    assert_eq!(send(Some(vec![])), 0);
    // Everyone the service knows of, minus the sender.
    assert_eq!(send(None), 3);
    let got = f.ds.sync(SyncRequest { user: "bob".into(), last_acked: BTreeMap::new() });
    assert_eq!(got.unordered.len(), 2);
    assert!(f.ds.sync(SyncRequest { user: "bob".into(), last_acked: BTreeMap::new() }).unordered.is_empty());
}

#[test]
fn sync_returns_entries_after_last_acked() {
    let mut f = Fixture::new(&["alice"]);
    let mut rng = f.rng.clone();
    f.c("alice").create_group("g", &mut rng).unwrap();
    for i in 0..5u64 {
        let out = f.c("alice").update_user("g", &mut rng).unwrap();
        assert!(matches!(f.submit("alice", &out, i.checked_sub(1)), SendOrderedResult::Accepted { .. }));
        f.c("alice").confirm_pending("g", Some(i)).unwrap();
    }
    let req = SyncRequest { user: "alice".into(), last_acked: [("g".to_string(), Some(2))].into() };
    let got = f.ds.sync(req.clone());
    assert_eq!(got.ordered["g"].iter().map(|e| e.seq.unwrap()).collect::<Vec<_>>(), vec![3, 4]);
    // Ordered entries are re-served until acknowledged.
    assert_eq!(f.ds.sync(req), got);
    let idle = f.ds.sync(SyncRequest { user: "alice".into(), last_acked: [("g".to_string(), Some(4))].into() });
    assert!(idle.is_empty());
}

#[test]
fn key_packages_are_single_use() {
    let mut f = Fixture::new(&["alice"]);
    let kps = f.kps["alice"].clone();
    assert_eq!(f.ds.publish_key_packages(PublishKeyPackages { user: "alice".into(), key_packages: kps.clone() }), Ok(10));
    let mut seen = BTreeSet::new();
    for _ in 0..10 {
        assert!(seen.insert(f.ds.fetch_key_package("alice").unwrap().kem_pk));
    }
    assert_eq!(f.ds.fetch_key_package("alice"), Err(ServiceError::Exhausted("alice".into())));
    assert_eq!(f.ds.fetch_key_package("nobody"), Err(ServiceError::Exhausted("nobody".into())));
    let mut bad = kps[0].clone();
    bad.kem_pk = kps[1].kem_pk;
    assert_eq!(
        f.ds.publish_key_packages(PublishKeyPackages { user: "alice".into(), key_packages: vec![bad] }),
        Err(ServiceError::BadKeyPackage)
    );
    let renamed = f.kps.get_mut("alice").unwrap().pop().unwrap();
    assert_eq!(
        f.ds.publish_key_packages(PublishKeyPackages { user: "mallory".into(), key_packages: vec![renamed] }),
        Err(ServiceError::BadKeyPackage)
    );
    f.c("alice");
}

#[test]
fn bans_block_sends_until_expiry() {
    let mut f = Fixture::group(&["alice", "bob"]);
    let ms = f.ms.clone();
    let until = f.clock.now() + 7 * DAY;
    f.ban("bob", Some(until), &ms).unwrap();
    let env = f.uam("bob");
    let send = |f: &Fixture| f.ds.send_unordered(SendUnordered { sender: "bob".into(), recipients: None, envelope: env.clone() });
    assert_eq!(send(&f), Err(ServiceError::Banned("bob".into())));
    let mut rng = f.rng.clone();
    let out = f.c("bob").update_user("g", &mut rng).unwrap();
    assert!(matches!(
        f.ds.send_ordered(SendOrdered { sender: "bob".into(), group_id: "g".into(), envelope: out.envelope.clone(), last_acked: Some(0) }),
        Err(ServiceError::Banned(_))
    ));
    // A shorter second ban does not shorten the first.
    f.ban("bob", Some(f.clock.now() + DAY), &ms).unwrap();
    f.clock.advance(6 * DAY);
    assert!(send(&f).is_err());
    f.clock.advance(DAY);
    assert_eq!(send(&f), Ok(Delivered { delivered: 1 }));
    // Indefinite bans never lapse.
    f.ban("bob", None, &ms).unwrap();
    f.clock.advance(1000 * DAY);
    assert!(send(&f).is_err());
}

#[test]
fn bans_need_the_moderation_key() {
    let mut f = Fixture::new(&["alice"]);
    let other = SigKeyPair::generate(&mut f.rng);
    assert_eq!(f.ban("alice", None, &other), Err(ServiceError::Unauthorized));
    let mut order = AdminOrder::sign(ops::BAN, "alice", 0, BanOrder { username: "alice".into(), until: None }, &f.ms);
    order.signer = "alice".into();
    assert_eq!(futures::executor::block_on(f.ds.apply_ban(order)), Err(ServiceError::Unauthorized));
}

#[test]
fn welcome_creates_recipient_queue() {
    let mut f = Fixture::new(&["alice", "zed"]);
    let mut rng = f.rng.clone();
    f.c("alice").create_group("g", &mut rng).unwrap();
    let kp = f.kps.get_mut("zed").unwrap().pop().unwrap();
    let out = f.c("alice").add_user("g", kp, &mut rng).unwrap();
    let (to, w) = out.welcomes[0].clone();
    f.ds.relay_welcome(RelayWelcome { sender: "alice".into(), recipient: to, envelope: w.clone() }).unwrap();
    assert_eq!(f.ds.sync(SyncRequest { user: "zed".into(), last_acked: BTreeMap::new() }).unordered, vec![w]);
}

#[test]
fn partition_forks_then_heal_cross_delivers() {
    let mut f = Fixture::group(&["a", "b", "c", "d"]);
    let side: BTreeSet<String> = ["c".to_string(), "d".to_string()].into();
    f.ds.partition("g", side);
    let mut rng = f.rng.clone();
    let left = f.c("a").update_user("g", &mut rng).unwrap();
    let right = f.c("c").update_user("g", &mut rng).unwrap();
    // Both sides get the same parent accepted on their own copy.
    assert!(matches!(f.submit("a", &left, Some(2)), SendOrderedResult::Accepted { seq: 3, .. }));
    assert!(matches!(f.submit("c", &right, Some(2)), SendOrderedResult::Accepted { seq: 3, .. }));
    let b_view = f.ds.sync(SyncRequest { user: "b".into(), last_acked: [("g".to_string(), Some(2))].into() });
    assert_eq!(b_view.ordered["g"][0].digest(), left.envelope.digest());
    let d_view = f.ds.sync(SyncRequest { user: "d".into(), last_acked: [("g".to_string(), Some(2))].into() });
    assert_eq!(d_view.ordered["g"][0].digest(), right.envelope.digest());

    assert_eq!(f.ds.heal("g"), 4);
    let b = f.ds.sync(SyncRequest { user: "b".into(), last_acked: [("g".to_string(), Some(3))].into() });
    assert_eq!(b.unordered.len(), 1);
    assert_eq!(b.unordered[0].digest(), right.envelope.digest());
    assert_eq!(b.unordered[0].seq, None);
    // The main log was never altered.
    let snap = f.ds.snapshot();
    assert_eq!(snap.groups["g"].entries.len(), 4);
    assert_eq!(snap.groups["g"].entries[3].digest(), left.envelope.digest());
}

#[test]
fn drop_delay_and_reorder() {
    let mut f = Fixture::group(&["alice", "bob", "carol"]);
    f.ds.set_faults(Faults {
        drop: vec![DropRule { from: Some("alice".into()), to: Some("bob".into()), count: 1 }],
        delay: [("carol".to_string(), 1)].into(),
        reorder_seed: Some(5),
        partitions: vec![],
    });
    let envs: Vec<Envelope> = (0..6).map(|_| f.uam("alice")).collect();
    for e in &envs {
        f.ds.send_unordered(SendUnordered { sender: "alice".into(), recipients: None, envelope: e.clone() }).unwrap();
    }
    let bob = f.ds.sync(SyncRequest { user: "bob".into(), last_acked: BTreeMap::new() });
    assert_eq!(bob.unordered.len(), 5);
    assert!(!bob.unordered.contains(&envs[0]));
    assert!(f.ds.sync(SyncRequest { user: "carol".into(), last_acked: BTreeMap::new() }).unordered.is_empty());
    let carol = f.ds.sync(SyncRequest { user: "carol".into(), last_acked: BTreeMap::new() });
    assert_eq!(carol.unordered.len(), 6);
    assert_ne!(carol.unordered, envs, "seeded shuffle should move something");
}

#[test]
fn snapshot_roundtrip() {
    let mut f = Fixture::group(&["alice", "bob"]);
    let env = f.uam("alice");
    f.ds.send_unordered(SendUnordered { sender: "alice".into(), recipients: None, envelope: env }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ds.json");
    f.ds.save(&path).unwrap();
    let other = DeliveryService::new(f.clock.clone(), Arc::new(f.ms.public));
    other.load(&path).unwrap();
    assert_eq!(serde_json::to_value(other.snapshot()).unwrap(), serde_json::to_value(f.ds.snapshot()).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// However submissions interleave, seqs are dense and each parent epoch
    /// is accepted at most once.
    #[test]
    fn conflict_safety(order in proptest::collection::vec(0usize..3, 1..12)) {
        let names = ["a", "b", "c"];
        let mut f = Fixture::group(&names);
        let mut rng = f.rng.clone();
        let mut acked: BTreeMap<&str, Option<u64>> = names.iter().map(|n| (*n, Some(1))).collect();
        for who in order {
            let n = names[who];
            // Catch up first so most submissions are current.
            let got = f.ds.sync(SyncRequest { user: n.into(), last_acked: [("g".to_string(), acked[n])].into() });
            for e in got.ordered.get("g").into_iter().flatten() {
                let _ = f.c(n).process_incoming(e);
                acked.insert(n, e.seq);
            }
            let Ok(out) = f.c(n).update_user("g", &mut rng) else { continue };
            match f.submit(n, &out, acked[n]) {
                SendOrderedResult::Accepted { seq, .. } => {
                    f.c(n).confirm_pending("g", Some(seq)).unwrap();
                    acked.insert(n, Some(seq));
                }
                SendOrderedResult::RejectedConflict { .. } => { f.c(n).abandon_pending("g").unwrap(); }
            }
        }
        let log = &f.ds.snapshot().groups["g"].entries;
        let mut parents = BTreeSet::new();
        for (i, e) in log.iter().enumerate() {
            prop_assert_eq!(e.seq, Some(i as u64));
            prop_assert!(parents.insert(e.parent_epoch().unwrap()));
        }
    }
}
