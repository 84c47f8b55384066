mod common;

use std::collections::BTreeMap;

use axum::http::StatusCode;
use common::*;
use qosmw_core::cluster::{InstanceSpec, PoolConfig, Strategy};
use qosmw_node::balancer::{self, BalancerStats};
use qosmw_node::proxy;

fn pool(addrs: &[String], weights: &[u32], strategy: Strategy) -> PoolConfig {
    PoolConfig {
        instances: addrs
            .iter()
            .zip(weights)
            .map(|(a, w)| InstanceSpec {
                address: a.clone(),
                weight: *w,
            })
            .collect(),
        strategy,
        cooldown_ms: 60_000,
    }
}

async fn served_by(c: &proxy::HttpClient, lb: &str, n: usize) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for _ in 0..n {
        let r = post(c, lb, "/app/data", &[]).await;
        *counts.entry(r.json()["server"].as_str().unwrap().to_string()).or_default() += 1;
    }
    counts
}

#[tokio::test]
async fn round_robin_and_weighted_over_http() {
    let (_a, a) = echo("a").await;
    let (_b, b) = echo("b").await;
    let (_c, cc) = echo("c").await;
    let addrs = [a, b, cc];
    let c = proxy::client();
    let lb = balancer::spawn("127.0.0.1:0", pool(&addrs, &[1, 1, 1], Strategy::RoundRobin), c.clone())
        .await
        .unwrap();
    let lb_addr = lb.addr().to_string();
    let counts = served_by(&c, &lb_addr, 9).await;
    assert!(counts.values().all(|&n| n == 3), "{counts:?}");

    let r = put_json(&c, &lb_addr, "/admin/lb/pool", &pool(&addrs, &[3, 2, 1], Strategy::WeightedRoundRobin)).await;
    assert_eq!(r.status, StatusCode::OK);
    let counts = served_by(&c, &lb_addr, 12).await;
    assert_eq!(counts, BTreeMap::from([("a".into(), 6), ("b".into(), 4), ("c".into(), 2)]));
    let stats: BalancerStats = serde_json::from_value(get_json(&c, &lb_addr, "/admin/lb/stats").await).unwrap();
    assert_eq!(stats.strategy, Strategy::WeightedRoundRobin);
    assert_eq!(stats.instances.iter().map(|i| i.picks).sum::<u64>(), 12);
    assert!(stats.instances.iter().all(|i| i.in_flight == 0));
}

#[tokio::test]
async fn failed_instance_is_skipped() {
    let (_a, a) = echo("a").await;
    let dead = dead_address().await;
    let c = proxy::client();
    let lb = balancer::spawn("127.0.0.1:0", pool(&[dead, a], &[1, 1], Strategy::RoundRobin), c.clone())
        .await
        .unwrap();
    let lb_addr = lb.addr().to_string();
    assert_eq!(post(&c, &lb_addr, "/app/data", &[]).await.status, StatusCode::BAD_GATEWAY);
    let counts = served_by(&c, &lb_addr, 6).await;
    assert_eq!(counts, BTreeMap::from([("a".into(), 6)]));
    let stats: BalancerStats = serde_json::from_value(get_json(&c, &lb_addr, "/admin/lb/stats").await).unwrap();
    assert!(!stats.instances[0].healthy);
    assert_eq!(stats.instances[0].picks, 1);
}

#[tokio::test]
async fn no_healthy_instance_is_unavailable() {
    let dead = dead_address().await;
    let c = proxy::client();
    let lb = balancer::spawn("127.0.0.1:0", pool(&[dead], &[1], Strategy::LoadOriented), c.clone())
        .await
        .unwrap();
    let lb_addr = lb.addr().to_string();
    assert_eq!(post(&c, &lb_addr, "/app/data", &[]).await.status, StatusCode::BAD_GATEWAY);
    assert_eq!(post(&c, &lb_addr, "/app/data", &[]).await.status, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn load_oriented_prefers_idle_instance() {
    let (_slow, slow) = gateway(300, 8).await;
    let (_fast, fast) = gateway(5, 8).await;
    let c = proxy::client();
    let lb = balancer::spawn(
        "127.0.0.1:0",
        pool(&[slow, fast], &[1, 1], Strategy::LoadOriented),
        c.clone(),
    )
    .await
    .unwrap();
    let lb_addr = lb.addr().to_string();
    // the first request occupies the slow instance; later ones go to the idle one
    let first = {
        let (c, lb_addr) = (c.clone(), lb_addr.clone());
        tokio::spawn(async move { post(&c, &lb_addr, "/app/data", &[]).await })
    };
    tokio::time::sleep(std::time::Duration::from_millis(30)).await;
    for _ in 0..5 {
        post(&c, &lb_addr, "/app/data", &[]).await;
    }
    first.await.unwrap();
    let stats: BalancerStats = serde_json::from_value(get_json(&c, &lb_addr, "/admin/lb/stats").await).unwrap();
    assert_eq!(stats.instances[0].picks, 1);
    assert_eq!(stats.instances[1].picks, 5);
}

#[tokio::test]
async fn invalid_pool_rejected() {
    let (_a, a) = echo("a").await;
    let c = proxy::client();
    let lb = balancer::spawn("127.0.0.1:0", pool(&[a], &[1], Strategy::RoundRobin), c.clone())
        .await
        .unwrap();
    let r = put_json(&c, &lb.addr().to_string(), "/admin/lb/pool", &pool(&[], &[], Strategy::RoundRobin)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}
