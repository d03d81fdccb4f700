//! Desk-scale benchmarks: per-operation latency and client-to-server
//! traffic, the voting macro-benchmark and a mixed server load. Everything
//! runs through the ordinary node code against services on loopback.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::{Duration, Instant};

use polis_core::governance::ActionType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::cluster::{Cluster, Wire};
use crate::node::{Node, NodeError};
use crate::proto::ops;
use crate::scenarios::{community, user, COMMUNITY};

pub const DEFAULT_SIZES: &[usize] = &[8, 16, 32, 64];
pub const MIN_TRIALS: usize = 5;

/// Starts and batches the benchmark polls; an ordinary member.
const PROPOSER: &str = "u2";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("scenario setup failed: {0}")]
    ScenarioSetup(NodeError),
    #[error("{what} did not complete for group size {size}")]
    Timeout { what: &'static str, size: usize },
    #[error("at least {MIN_TRIALS} trials are required, got {0}")]
    TooFewTrials(usize),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scenario: String,
    pub group_size: usize,
    pub op: String,
    pub trial: usize,
    pub latency_ms: f64,
    pub traffic_bytes: u64,
}

pub fn write_csv(rows: &[Row], out: impl Write) -> Result<(), BenchError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Mean and sample standard deviation of `(scenario, size, op)` groups.
pub fn summarize(rows: &[Row]) -> BTreeMap<(String, usize, String), (f64, f64, f64)> {
    let mut groups: BTreeMap<_, Vec<&Row>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.scenario.clone(), r.group_size, r.op.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, rs)| {
            let n = rs.len() as f64;
            let mean = rs.iter().map(|r| r.latency_ms).sum::<f64>() / n;
            let var = rs.iter().map(|r| (r.latency_ms - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            let bytes = rs.iter().map(|r| r.traffic_bytes as f64).sum::<f64>() / n;
            (k, (mean, var.sqrt(), bytes))
        })
        .collect()
}

/// Mean traffic per group size for one op.
pub fn traffic_by_size(rows: &[Row], op: &str) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.op == op) {
        let e = acc.entry(r.group_size).or_default();
        e.0 += r.traffic_bytes as f64;
        e.1 += 1.0;
    }
    acc.into_iter().map(|(n, (sum, k))| (n as f64, sum / k)).collect()
}

/// Least-squares line; returns (slope, intercept, r²).
pub fn linear_fit(points: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = if sxx == 0.0 { 0.0 } else { sxy / sxx };
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

/// (max - min) / mean of the y values.
pub fn spread(points: &[(f64, f64)]) -> f64 {
    let ys = points.iter().map(|p| p.1);
    let max = ys.clone().fold(f64::MIN, f64::max);
    let min = ys.clone().fold(f64::MAX, f64::min);
    let mean = ys.sum::<f64>() / points.len() as f64;
    if mean == 0.0 {
        0.0
    } else {
        (max - min) / mean
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

fn sent(node: &Node) -> u64 {
    node.ds().traffic().sent()
}

fn sent_op(node: &Node, op: &str) -> u64 {
    node.ds().traffic().by_op().get(op).copied().unwrap_or(0)
}

fn check_trials(trials: usize) -> Result<(), BenchError> {
    if trials < MIN_TRIALS {
        return Err(BenchError::TooFewTrials(trials));
    }
    Ok(())
}

async fn setup(seed: u64, wire: Wire, n: usize) -> Result<Cluster, BenchError> {
    community(seed, wire, n).await.map_err(BenchError::ScenarioSetup)
}

/// SendText, rename (an ordered governance action) and the state
/// announcement a new member receives, per group size.
pub async fn run_micro(sizes: &[usize], trials: usize, wire: Wire) -> Result<Vec<Row>, BenchError> {
    check_trials(trials)?;
    let mut rows = Vec::new();
    for &n in sizes {
        let mut c = setup(n as u64, wire, n).await?;
        for t in 0..trials {
            c.add(&format!("guest{t}")).await.map_err(BenchError::ScenarioSetup)?;
        }
        let row = |op: &str, trial: usize, d: Duration, bytes: u64| Row {
            scenario: "micro".into(),
            group_size: n,
            op: op.into(),
            trial,
            latency_ms: ms(d),
            traffic_bytes: bytes,
        };
        for t in 0..trials {
            let admin = c.node("u1");
            let (before, start) = (sent(admin), Instant::now());
            admin.send_text(COMMUNITY, &format!("hello {t}")).await?;
            rows.push(row("send_text", t, start.elapsed(), sent(admin) - before));

            let (before, start) = (sent(admin), Instant::now());
            admin.act(COMMUNITY, ActionType::ChangeName, json!({ "name": format!("name {t}") })).await?;
            rows.push(row("rename", t, start.elapsed(), sent(admin) - before));
            c.settle().await?;

            // The announcement goes out as the only unordered message of an invite.
            let guest = format!("guest{t}");
            let admin = c.node("u1");
            let (before, start) = (sent_op(admin, ops::SEND_UNORDERED), Instant::now());
            admin.invite(COMMUNITY, &guest).await?;
            rows.push(row("announcement", t, start.elapsed(), sent_op(admin, ops::SEND_UNORDERED) - before));
            c.settle().await?;
            c.node("u1").act(COMMUNITY, ActionType::KickUser, json!({ "user": guest })).await?;
            c.settle_lenient().await;
        }
    }
    Ok(rows)
}

/// One member starts a rename poll, every member votes yes over unordered
/// delivery and the proposer batches the ballots into one commit.
pub async fn run_vote_macro(sizes: &[usize], trials: usize, wire: Wire) -> Result<Vec<Row>, BenchError> {
    check_trials(trials)?;
    let mut rows = Vec::new();
    for &n in sizes {
        let mut c = setup(1000 + n as u64, wire, n).await?;
        for t in 0..trials {
            let target = format!("voted {t}");
            let start = Instant::now();
            let batcher_before = sent(c.node(PROPOSER));
            let (pid, _) = c.node(PROPOSER).poll_start(COMMUNITY, ActionType::ChangeName, json!({ "name": target })).await?;
            c.settle().await?;
            let mut voter_bytes = 0;
            for i in 1..=n {
                let name = user(i);
                let node = c.node(&name);
                let before = sent(node);
                node.vote(COMMUNITY, &pid, true).await?;
                if name != PROPOSER {
                    voter_bytes += sent(node) - before;
                }
            }
            c.settle().await?;
            let batcher_bytes = sent(c.node(PROPOSER)) - batcher_before;
            let done = c.nodes.values().all(|node| node.client.gov(COMMUNITY).is_ok_and(|g| g.name() == target));
            if !done {
                return Err(BenchError::Timeout { what: "vote", size: n });
            }
            let elapsed = ms(start.elapsed());
            let mk = |op: &str, bytes: u64| Row {
                scenario: "vote".into(),
                group_size: n,
                op: op.into(),
                trial: t,
                latency_ms: elapsed,
                traffic_bytes: bytes,
            };
            rows.push(mk("per_voter", voter_bytes / (n as u64 - 1).max(1)));
            rows.push(mk("batcher", batcher_bytes));
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadSummary {
    pub clients: usize,
    pub uam_fraction: f64,
    pub requests: u64,
    pub elapsed_ms: f64,
    pub throughput: f64,
    pub retries: u64,
    pub commits: u64,
}

/// Every client runs its share of `ops` concurrently: unordered texts with
/// probability `uam_fraction`, otherwise renames contending for the next
/// epoch. Throughput counts every request the delivery service answered.
pub async fn run_server_load(
    clients: usize,
    uam_fraction: f64,
    ops_total: usize,
    seed: u64,
    trial: usize,
) -> Result<(LoadSummary, Row), BenchError> {
    let mut c = setup(seed, Wire::Loopback, clients).await?;
    let nodes: Vec<(String, Node)> = std::mem::take(&mut c.nodes).into_iter().collect();
    let before: u64 = nodes.iter().map(|(_, n)| n.ds().traffic().requests()).sum();
    let before_bytes: u64 = nodes.iter().map(|(_, n)| sent(n)).sum();
    let per = ops_total.div_ceil(clients);
    let start = Instant::now();
    let mut tasks = Vec::new();
    for (i, (name, mut node)) in nodes.into_iter().enumerate() {
        tasks.push(tokio::spawn(async move {
            let mut rng = ChaCha20Rng::seed_from_u64(seed ^ (i as u64 + 1));
            let mut lat = Duration::ZERO;
            for k in 0..per {
                let t = Instant::now();
                // Failed renames still count: they were served and retried.
                let _ = if rng.gen_bool(uam_fraction) {
                    node.send_text(COMMUNITY, &format!("{name} {k}")).await
                } else {
                    node.act(COMMUNITY, ActionType::ChangeName, json!({ "name": format!("{name} {k}") })).await
                };
                lat += t.elapsed();
            }
            (node, lat)
        }));
    }
    let mut total_lat = Duration::ZERO;
    let mut finished = Vec::new();
    for t in tasks {
        let (node, lat) = t.await.expect("load task panicked");
        total_lat += lat;
        finished.push(node);
    }
    let elapsed = start.elapsed();
    let requests = finished.iter().map(|n| n.ds().traffic().requests()).sum::<u64>() - before;
    let bytes = finished.iter().map(sent).sum::<u64>() - before_bytes;
    let summary = LoadSummary {
        clients,
        uam_fraction,
        requests,
        elapsed_ms: ms(elapsed),
        throughput: requests as f64 / elapsed.as_secs_f64(),
        retries: finished.iter().map(|n| n.stats.commit_retries).sum(),
        commits: finished.iter().map(|n| n.stats.commits).sum(),
    };
    let row = Row {
        scenario: "server".into(),
        group_size: clients,
        op: format!("uam{:.0}", uam_fraction * 100.0),
        trial,
        latency_ms: ms(total_lat) / (per * clients) as f64,
        traffic_bytes: bytes,
    };
    Ok((summary, row))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_of_a_line_is_exact() {
        let pts: Vec<_> = (1..5).map(|x| (x as f64, 3.0 * x as f64 + 2.0)).collect();
        let (m, b, r2) = linear_fit(&pts);
        assert!((m - 3.0).abs() < 1e-9 && (b - 2.0).abs() < 1e-9 && (r2 - 1.0).abs() < 1e-9);
        assert_eq!(spread(&[(1.0, 10.0), (2.0, 10.0)]), 0.0);
        assert!((spread(&[(1.0, 9.0), (2.0, 11.0)]) - 0.2).abs() < 1e-9);
    }

    #[test]
    fn csv_header_is_stable() {
        let mut out = Vec::new();
        let row = Row { scenario: "micro".into(), group_size: 8, op: "send_text".into(), trial: 0, latency_ms: 1.5, traffic_bytes: 10 };
        write_csv(&[row], &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("scenario,group_size,op,trial,latency_ms,traffic_bytes"));
    }

    #[tokio::test]
    async fn vote_macro_small() {
        let rows = run_vote_macro(&[3, 5], 5, Wire::InProcess).await.unwrap();
        assert_eq!(rows.len(), 2 * 5 * 2);
        let voter = traffic_by_size(&rows, "per_voter");
        assert!(spread(&voter) < 0.25, "{voter:?}");
        let batcher = traffic_by_size(&rows, "batcher");
        assert!(batcher[1].1 > batcher[0].1, "{batcher:?}");
    }

    #[tokio::test]
    async fn ordered_load_contends() {
        let (uam, _) = run_server_load(4, 1.0, 80, 9, 0).await.unwrap();
        let (oam, _) = run_server_load(4, 0.0, 80, 9, 0).await.unwrap();
        assert_eq!(uam.retries, 0);
        assert!(oam.retries > 0, "{oam:?}");
        assert!(uam.throughput > oam.throughput, "{uam:?} vs {oam:?}");
    }

    #[tokio::test]
    async fn server_load_small() {
        let (s, row) = run_server_load(3, 0.5, 30, 4, 0).await.unwrap();
        assert!(s.requests >= 30 && s.throughput > 0.0, "{s:?}");
        assert_eq!(row.op, "uam50");
    }

    #[tokio::test]
    async fn too_few_trials_rejected() {
        assert!(matches!(run_micro(&[2], 2, Wire::InProcess).await, Err(BenchError::TooFewTrials(2))));
    }

    #[tokio::test]
    async fn micro_shapes_small() {
        let rows = run_micro(&[3, 6], 5, Wire::InProcess).await.unwrap();
        assert!(rows.iter().all(|r| r.traffic_bytes > 0));
        assert_eq!(rows.len(), 2 * 5 * 3);
        let text = traffic_by_size(&rows, "send_text");
        assert!(spread(&text) < 0.1, "{text:?}");
        let rename = traffic_by_size(&rows, "rename");
        assert!(rename[1].1 > rename[0].1, "{rename:?}");
    }
}
