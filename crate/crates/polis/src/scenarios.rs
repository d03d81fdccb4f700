//! Scripted end-to-end runs shared by the integration tests, the acceptance
//! suite and the CLI's demo command.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use polis_core::client::MODERATION_USER;
use polis_core::governance::{ActionType, Verdict};
use serde_json::json;

use crate::cluster::{Cluster, Wire};
use crate::clock::DAY;
use crate::moderation::Decision;
use crate::node::{Node, NodeError};

pub const COMMUNITY: &str = "community";
pub const DM: &str = "dm";
pub const GUIDELINES: &str = "Be kind. No harassment.";
pub const BAN_DAYS: u64 = 7;

#[derive(Debug, Clone)]
pub struct RunningExample {
    pub members: Vec<String>,
    pub offender: String,
    pub guidelines_set: bool,
    pub report_verified: bool,
    pub roster_excludes_offender: bool,
    pub case_verified: bool,
    pub banned_while_active: bool,
    pub allowed_after_expiry: bool,
    pub honest_hashes_agree: bool,
    /// Alerts raised anywhere; an honest run has none.
    pub alerts: usize,
    pub elapsed: Duration,
}

impl RunningExample {
    pub fn passed(&self) -> bool {
        self.guidelines_set
            && self.report_verified
            && self.roster_excludes_offender
            && self.case_verified
            && self.banned_while_active
            && self.allowed_after_expiry
            && self.honest_hashes_agree
            && self.alerts == 0
    }
}

pub fn user(i: usize) -> String {
    format!("u{i}")
}

/// A community of `n` members created and populated by `u1`, settled.
pub async fn community(seed: u64, wire: Wire, n: usize) -> Result<Cluster, NodeError> {
    let mut c = Cluster::new(seed, wire).await?;
    for i in 1..=n {
        c.add(&user(i)).await?;
    }
    c.node("u1").create_group(COMMUNITY, COMMUNITY).await?;
    for i in 2..=n {
        c.node("u1").invite(COMMUNITY, &user(i)).await?;
    }
    c.settle().await?;
    Ok(c)
}

/// Guideline vote, an abusive direct message, a report to the community
/// moderator, a kick, an escalation to the platform moderator and a
/// one-week ban.
pub async fn running_example(seed: u64, wire: Wire) -> Result<RunningExample, NodeError> {
    let start = Instant::now();
    let mut c = community(seed, wire, 8).await?;
    c.add(MODERATION_USER).await?;
    let (admin, proposer, offender) = (user(1), user(2), user(3));

    // The proposer polls for new guidelines and a majority votes yes.
    let target = json!({ "key": "guidelines", "value": GUIDELINES });
    let (pid, _) = c.node(&proposer).poll_start(COMMUNITY, ActionType::SetState, target).await?;
    c.settle().await?;
    for i in 1..=5 {
        c.node(&user(i)).vote(COMMUNITY, &pid, true).await?;
    }
    c.settle().await?;
    let guidelines_set = c.node(&admin).client.gov(COMMUNITY)?.kv.get("guidelines") == Some(&json!(GUIDELINES));

    // The offender harasses the proposer in a direct message.
    c.node(&offender).create_group(DM, COMMUNITY).await?;
    c.node(&offender).invite(DM, &proposer).await?;
    c.settle().await?;
    c.node(&offender).send_text(DM, "you are worthless").await?;
    c.settle().await?;
    let ids: Vec<String> = c.node(&proposer).client.group(DM)?.con.messages.iter().map(|m| m.id.clone()).collect();
    c.node(&proposer).report_to(DM, COMMUNITY, &ids, "harassment in a direct message").await?;
    c.settle().await?;

    let received = c.node(&admin).client.group(COMMUNITY)?.con.reports.first().cloned();
    let report_verified = received.as_ref().is_some_and(|r| r.verified && r.report.reported == offender);

    // The community moderator kicks the offender and escalates.
    let kick = c.node(&admin).act(COMMUNITY, ActionType::KickUser, json!({ "user": offender })).await?;
    c.settle_lenient().await;
    if let Some(r) = &received {
        c.node(&admin).escalate_report(&r.report).await?;
    }
    c.settle_lenient().await;

    let ms = c.node(MODERATION_USER);
    let case = ms.cases(Some(true))?.into_iter().next();
    let case_verified = case.is_some();
    if let Some(case) = case {
        ms.decide(&case.case_id, Decision::Ban { days: BAN_DAYS }).await?;
    }

    let banned_while_active = is_banned(c.node(&offender).send_text(DM, "still here").await);
    c.advance(BAN_DAYS * DAY - 60);
    let banned_late = is_banned(c.node(&offender).send_text(DM, "still here").await);
    c.advance(120);
    c.node(&offender).client.outbox.clear();
    let allowed_after_expiry = c.node(&offender).send_text(DM, "back again").await.is_ok();

    let members: Vec<String> = (1..=8).map(user).filter(|u| *u != offender).collect();
    let roster_excludes_offender = kick.verdict == Verdict::Passed
        && members.iter().all(|u| {
            c.nodes[u].client.roster(COMMUNITY).is_ok_and(|r| !r.contains(&offender) && r.len() == members.len())
        });
    let hashes: BTreeSet<_> = members.iter().map(|u| c.nodes[u].client.gov_hash(COMMUNITY)).collect();
    let honest_hashes_agree = hashes.len() == 1 && hashes.iter().all(Option::is_some);

    Ok(RunningExample {
        members,
        offender,
        guidelines_set,
        report_verified,
        roster_excludes_offender,
        case_verified,
        banned_while_active: banned_while_active && banned_late,
        allowed_after_expiry,
        honest_hashes_agree,
        alerts: c.nodes.values().map(|n| n.client.alerts.len()).sum(),
        elapsed: start.elapsed(),
    })
}

fn is_banned<T>(r: Result<T, NodeError>) -> bool {
    matches!(&r, Err(e) if Node::is_banned_error(e))
}

/// Outcome of a partition attack or of a control run without one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForkOutcome {
    pub members: usize,
    /// Members that raised ForkDetected.
    pub detected: usize,
    /// Members whose group froze.
    pub frozen: usize,
}

/// Six members; with `partition` the delivery service splits them 3/3, lets
/// each side commit, then cross-delivers. Without it the same two
/// conflicting commits go through the honest sequencer, under a shuffled
/// unordered queue.
pub async fn fork(seed: u64, wire: Wire, partition: bool) -> Result<ForkOutcome, NodeError> {
    let mut c = community(seed, wire, 6).await?;
    // A committer on each side.
    let roles = json!({ "user": "u4", "roles": ["admin", "member"] });
    c.node("u1").act(COMMUNITY, ActionType::SetUserRole, roles).await?;
    c.settle().await?;
    if partition {
        c.ds.partition(COMMUNITY, (1..=3).map(user).collect());
    } else {
        c.ds.set_faults(crate::ds::Faults { reorder_seed: Some(seed), ..Default::default() });
    }
    c.node("u1").act(COMMUNITY, ActionType::ChangeName, json!({ "name": "side a" })).await?;
    c.node("u4").act(COMMUNITY, ActionType::ChangeName, json!({ "name": "side b" })).await?;
    c.settle_lenient().await;
    if partition {
        c.ds.heal(COMMUNITY);
    }
    c.settle_lenient().await;
    let detected = c
        .nodes
        .values()
        .filter(|n| n.client.alerts.iter().any(|a| matches!(a.kind, polis_core::client::AlertKind::ForkDetected { .. })))
        .count();
    let frozen = c.nodes.values().filter(|n| n.client.mls.group(COMMUNITY).is_ok_and(|g| g.frozen)).count();
    Ok(ForkOutcome { members: c.nodes.len(), detected, frozen })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitialStateOutcome {
    /// Members other than the inviter and the joiner.
    pub honest: usize,
    pub flagged: usize,
    /// The joiner installed the doctored state.
    pub joiner_deceived: bool,
}

/// The inviter withholds the genuine state announcement and sends the
/// joiner one that makes the joiner an admin. With `doctor` false the
/// invitation is honest.
pub async fn invalid_initial_state(seed: u64, wire: Wire, members: usize, doctor: bool) -> Result<InitialStateOutcome, NodeError> {
    use polis_core::client::{AlertKind, Outgoing};
    use polis_core::crypto::random_bytes;
    use polis_core::governance::announce::announcement_payload;
    use polis_core::governance::{make_action_id, ActionHeader, ActionMessage};

    let mut c = community(seed, wire, members).await?;
    c.add("joiner").await?;
    let n = c.node("u1");
    if doctor {
        let kp = n.ds().fetch_key_package("joiner").await?;
        n.client.invite(COMMUNITY, kp, &n.dir, &mut n.rng)?;
        let to_joiner = |o: &Outgoing| matches!(o, Outgoing::Unordered { recipients: Some(r), .. } if r == &["joiner"]);
        n.flush_with(|o| !to_joiner(o)).await?;
        let mut fake = n.client.gov(COMMUNITY)?.clone();
        fake.user_roles.insert("joiner".into(), ["admin".to_string(), "member".to_string()].into());
        let epoch = n.client.mls.get_epoch(COMMUNITY).map_err(polis_core::client::ClientError::from)?;
        let header = ActionHeader {
            sender: "u1".into(),
            action_id: make_action_id("u1", u64::MAX, random_bytes(&mut n.rng)),
            group_id: COMMUNITY.into(),
            community_id: COMMUNITY.into(),
        };
        let action = ActionMessage::new(header, ActionType::GovStateAnnouncement, announcement_payload(&fake, epoch), &n.client.gov_key);
        let envelope = n.client.mls.send_uam(COMMUNITY, &action.to_bytes(), &mut n.rng).map_err(polis_core::client::ClientError::from)?;
        n.deliver(Outgoing::Unordered { envelope, recipients: Some(vec!["joiner".into()]) }).await?;
    } else {
        n.invite(COMMUNITY, "joiner").await?;
    }
    c.settle().await?;
    let expected = AlertKind::InvalidInitialState { joiner: "joiner".into(), inviter: "u1".into() };
    let honest: Vec<String> = (2..=members).map(user).collect();
    let flagged = honest.iter().filter(|u| c.nodes[*u].client.alerts.iter().any(|a| a.kind == expected)).count();
    let joiner_deceived = c.nodes["joiner"]
        .client
        .gov(COMMUNITY)
        .is_ok_and(|g| g.user_roles.get("joiner").is_some_and(|r| r.contains("admin")));
    Ok(InitialStateOutcome { honest: honest.len(), flagged, joiner_deceived })
}

/// Three members issue a seeded random mix of governance actions,
/// sometimes without syncing in between so commits race. Returns the
/// canonical governance state of each member after settling.
pub async fn random_log(seed: u64, steps: usize) -> Result<ReplayOutcome, NodeError> {
    use polis_core::client::ClientError;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut c = community(seed, Wire::InProcess, 3).await?;
    let users: Vec<String> = (1..=3).map(user).collect();
    let words = ["alpha", "beta", "gamma", "delta"];
    let types = [ActionType::SendText, ActionType::ChangeTopic, ActionType::KickUser, ActionType::SetTextFilter, ActionType::DefRole];
    for step in 0..steps {
        let actor = users.choose(&mut rng).expect("non-empty").clone();
        let other = users.choose(&mut rng).expect("non-empty").clone();
        let w = *words.choose(&mut rng).expect("non-empty");
        let node = c.node(&actor);
        let r = match rng.gen_range(0..9) {
            0 => node.act(COMMUNITY, ActionType::ChangeName, json!({ "name": format!("{w} {step}") })).await,
            1 => node.act(COMMUNITY, ActionType::ChangeTopic, json!({ "topic": w })).await,
            2 => node.act(COMMUNITY, ActionType::SetState, json!({ "key": "guidelines", "value": format!("{w} {step}") })).await,
            3 => {
                let perms: Vec<ActionType> = types.iter().copied().filter(|_| rng.gen_bool(0.5)).collect();
                node.act(COMMUNITY, ActionType::DefRole, json!({ "role": w, "permissions": perms })).await
            }
            4 => {
                let mut roles = vec!["member".to_string()];
                if rng.gen_bool(0.5) {
                    roles.push(w.to_string());
                }
                node.act(COMMUNITY, ActionType::SetUserRole, json!({ "user": other, "roles": roles })).await
            }
            5 => {
                let list: Vec<&str> = words.iter().copied().filter(|_| rng.gen_bool(0.3)).collect();
                node.act(COMMUNITY, ActionType::SetTextFilter, json!({ "words": list })).await
            }
            6 => {
                let target = json!({ "topic": format!("poll {w} {step}") });
                node.poll_start(COMMUNITY, ActionType::ChangeTopic, target).await.map(|(_, ev)| ev)
            }
            7 => {
                let pending: Vec<String> = node.client.gov(COMMUNITY).map(|g| g.pending.keys().cloned().collect()).unwrap_or_default();
                match pending.choose(&mut rng) {
                    Some(pid) => node.vote(COMMUNITY, pid, rng.gen_bool(0.6)).await,
                    None => node.send_text(COMMUNITY, w).await,
                }
            }
            _ => node.send_text(COMMUNITY, &format!("{w} {step}")).await,
        };
        match r {
            Ok(_) | Err(NodeError::Client(ClientError::Rejected(_) | ClientError::Gov(_))) => {}
            // A ballot on a proposal that resolved meanwhile.
            Err(NodeError::Client(_)) => {}
            Err(e) => return Err(e),
        }
        if rng.gen_bool(0.5) {
            c.settle().await?;
        }
    }
    c.settle().await?;
    let states = users
        .iter()
        .map(|u| Ok(polis_core::canonical::to_vec(c.nodes[u].client.gov(COMMUNITY)?)))
        .collect::<Result<Vec<_>, NodeError>>()?;
    Ok(ReplayOutcome {
        states,
        epoch: c.nodes["u1"].client.mls.get_epoch(COMMUNITY).unwrap_or(0),
        conflicts: c.ds.conflicts(),
        alerts: c.nodes.values().map(|n| n.client.alerts.len()).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayOutcome {
    /// Canonical governance state per member.
    pub states: Vec<Vec<u8>>,
    pub epoch: u64,
    /// Commits the sequencer turned away as stale, later rebased.
    pub conflicts: u64,
    pub alerts: usize,
}

impl ReplayOutcome {
    pub fn identical(&self) -> bool {
        self.states.windows(2).all(|w| w[0] == w[1])
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CanaryOutcome {
    pub planted: Vec<String>,
    /// Canaries found in the delivery service's persisted state.
    pub ds_hits: Vec<String>,
    /// Canaries found in the moderation service's persisted state, other
    /// than the escalated one.
    pub ms_hits: Vec<String>,
    /// The escalated canary is present at the moderation service.
    pub escalated_visible: bool,
}

pub const ESCALATED_CANARY: &str = "canary-escalated-7f3a";

/// Plants canary strings in a group name, messages, a role, a filter and a
/// poll, escalates one message, then scans what the delivery service and
/// the moderation service wrote to disk, as text and as hex.
pub async fn canaries(seed: u64, scratch: &std::path::Path) -> Result<CanaryOutcome, NodeError> {
    let mut c = community(seed, Wire::InProcess, 4).await?;
    let ms_dir = scratch.join("moderation");
    c.add_with_store(MODERATION_USER, Some(crate::store::Store::new(&ms_dir))).await?;
    let planted: Vec<String> = ["name", "text", "role", "filter", "poll", "topic"].iter().map(|k| format!("canary-{k}-{seed:x}")).collect();
    let [name, text, role, filter, poll, topic] = <[String; 6]>::try_from(planted.clone()).expect("six canaries");

    c.node("u1").act(COMMUNITY, ActionType::ChangeName, json!({ "name": name })).await?;
    c.node("u1").act(COMMUNITY, ActionType::DefRole, json!({ "role": role, "permissions": ["SendText"] })).await?;
    c.node("u1").act(COMMUNITY, ActionType::SetTextFilter, json!({ "words": [filter] })).await?;
    c.settle().await?;
    c.node("u2").send_text(COMMUNITY, &text).await?;
    let (pid, _) = c.node("u2").poll_start(COMMUNITY, ActionType::ChangeTopic, json!({ "topic": topic })).await?;
    c.settle().await?;
    for u in ["u1", "u3", "u4"] {
        c.node(u).vote(COMMUNITY, &pid, true).await?;
    }
    c.node("u4").send_text(COMMUNITY, &poll).await?;
    c.node("u3").send_text(COMMUNITY, ESCALATED_CANARY).await?;
    c.settle().await?;
    let id = c.nodes["u2"].client.group(COMMUNITY)?.con.messages.iter().find(|m| m.sender == "u3").map(|m| m.id.clone());
    c.node("u2").escalate(COMMUNITY, &id.into_iter().collect::<Vec<_>>(), "abuse").await?;
    c.settle().await?;

    let ds_path = scratch.join("ds.json");
    c.ds.save(&ds_path)?;
    let ds_bytes = std::fs::read(&ds_path)?;
    let mut ms_bytes = Vec::new();
    for entry in walk(&ms_dir)? {
        ms_bytes.extend(std::fs::read(entry)?);
    }
    let found = |hay: &[u8], needle: &str| contains(hay, needle.as_bytes()) || contains(hay, hex::encode(needle).as_bytes());
    Ok(CanaryOutcome {
        ds_hits: planted.iter().chain([&ESCALATED_CANARY.to_string()]).filter(|k| found(&ds_bytes, k)).cloned().collect(),
        ms_hits: planted.iter().filter(|k| found(&ms_bytes, k)).cloned().collect(),
        escalated_visible: found(&ms_bytes, ESCALATED_CANARY),
        planted,
    })
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

fn walk(dir: &std::path::Path) -> std::io::Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            out.extend(walk(&p)?);
        } else {
            out.push(p);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BindingOutcome {
    pub accepted: usize,
    pub honest_verified: usize,
    pub mutated: usize,
    pub mutated_rejected: usize,
}

/// Sender binding: `count` fuzzed texts go through the real pipeline and
/// every accepted one must yield a verifying report. Receiver binding:
/// `count` reports with one bit flipped in the body, the sender or the
/// signature must all fail verification.
pub async fn binding(seed: u64, count: usize) -> Result<BindingOutcome, NodeError> {
    use polis_core::governance::{verify_report, Report};
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let mut c = community(seed, Wire::InProcess, 3).await?;
    for i in 0..count {
        let len = rng.gen_range(1..40);
        let text: String = (0..len)
            .map(|_| match rng.gen_range(0..4) {
                0 => rng.gen_range(' '..='~'),
                1 => rng.gen_range('\u{a0}'..='\u{2fff}'),
                2 => *['"', '\\', '\n', '\t', '\u{0}'].get(rng.gen_range(0..5)).expect("in range"),
                _ => rng.gen_range('\u{1f300}'..='\u{1f5ff}'),
            })
            .collect();
        let sender = if i % 2 == 0 { "u2" } else { "u3" };
        c.node(sender).send_text(COMMUNITY, &text).await?;
        if i % 50 == 49 {
            c.settle().await?;
        }
    }
    c.settle().await?;
    let receiver = &c.nodes["u1"];
    let con = &receiver.client.group(COMMUNITY)?.con;
    let mut out = BindingOutcome { accepted: con.messages.len(), ..Default::default() };
    let mut honest: Vec<Report> = Vec::new();
    for m in &con.messages {
        let Ok(r) = receiver.client.build_report(COMMUNITY, &[m.id.clone()], "fuzz") else { continue };
        if verify_report(&r, &receiver.dir) {
            out.honest_verified += 1;
        }
        honest.push(r);
    }
    for (i, r) in honest.iter().cycle().take(count).enumerate() {
        let mut bad = r.clone();
        let msg = &mut bad.msgs[0];
        match i % 3 {
            0 => {
                let mut bytes = serde_json::to_vec(&msg.payload).expect("json");
                let at = rng.gen_range(0..bytes.len());
                bytes[at] ^= 1 << rng.gen_range(0..7);
                match serde_json::from_slice(&bytes) {
                    Ok(v) if v != msg.payload => msg.payload = v,
                    // Flip landed outside a valid encoding; alter the text instead.
                    _ => msg.payload = json!({ "text": format!("{}!", msg.payload["text"].as_str().unwrap_or_default()) }),
                }
            }
            1 => {
                let mut name = msg.header.sender.clone().into_bytes();
                name[0] ^= 1 << rng.gen_range(0..5);
                let forged = String::from_utf8_lossy(&name).into_owned();
                msg.header.sender = forged.clone();
                bad.reported = forged;
            }
            _ => {
                let mut sig = serde_json::to_value(&msg.gov_sig_hex).expect("json");
                let hexed = sig.as_str().expect("hex string").to_string();
                let mut raw = hex::decode(hexed).expect("hex");
                let at = rng.gen_range(0..raw.len());
                raw[at] ^= 1 << rng.gen_range(0..8);
                sig = json!(hex::encode(raw));
                msg.gov_sig_hex = serde_json::from_value(sig).expect("same shape");
            }
        }
        out.mutated += 1;
        if !verify_report(&bad, &receiver.dir) {
            out.mutated_rejected += 1;
        }
    }
    Ok(out)
}
