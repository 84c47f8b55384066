mod common;

use std::time::{Duration, Instant};

use axum::http::StatusCode;
use common::*;
use qosmw_core::model::{GatewayConfig, GW_ACTION_HEADER};
use qosmw_node::gateway::{self, GatewayStats};
use qosmw_node::proxy;

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

#[tokio::test]
async fn idle_rtt_is_service_time() {
    let (_h, addr) = gateway(50, 1).await;
    let c = proxy::client();
    post(&c, &addr, "/warmup/data", &[]).await;
    let r = post(&c, &addr, "/app/data", &[]).await;
    assert_eq!(r.status, StatusCode::CREATED);
    assert!(r.json()["resource_id"].as_str().unwrap().starts_with("app-"));
    let rtt = ms(r.rtt);
    assert!((49.0..70.0).contains(&rtt), "{rtt}");
}

#[tokio::test]
async fn two_simultaneous_requests_queue() {
    let (_h, addr) = gateway(50, 1).await;
    let c = proxy::client();
    post(&c, &addr, "/warmup/data", &[]).await;
    let (a, b) = tokio::join!(post(&c, &addr, "/a/data", &[]), post(&c, &addr, "/b/data", &[]));
    let mut rtts = [ms(a.rtt), ms(b.rtt)];
    rtts.sort_by(f64::total_cmp);
    assert!((49.0..75.0).contains(&rtts[0]), "{rtts:?}");
    assert!((99.0..130.0).contains(&rtts[1]), "{rtts:?}");
}

#[tokio::test]
async fn under_capacity_stays_bounded() {
    // 10 req/s offered against 20 req/s capacity
    let (_h, addr) = gateway(50, 1).await;
    let c = proxy::client();
    let start = tokio::time::Instant::now();
    let mut tasks = Vec::new();
    for i in 0..30u64 {
        let (c, addr) = (c.clone(), addr.clone());
        tasks.push(tokio::spawn(async move {
            tokio::time::sleep_until(start + Duration::from_millis(100 * i)).await;
            post(&c, &addr, "/app/data", &[]).await.rtt
        }));
    }
    let mut worst: f64 = 0.0;
    for t in tasks {
        worst = worst.max(ms(t.await.unwrap()));
    }
    assert!(worst < 110.0, "max rtt {worst}");
}

#[tokio::test]
async fn overflow_and_conservation() {
    let config = GatewayConfig {
        service_time_ms: 20,
        worker_pool_size: 1,
        accept_queue_capacity: 5,
        ..GatewayConfig::default()
    };
    let (h, _) = gateway::spawn("127.0.0.1:0", config).await.unwrap();
    let addr = h.addr().to_string();
    let c = proxy::client();
    let replies = futures_join_all(
        (0..40).map(|_| {
            let (c, addr) = (c.clone(), addr.clone());
            async move { post(&c, &addr, "/app/data", &[]).await }
        }),
    )
    .await;
    let created = replies.iter().filter(|r| r.status == StatusCode::CREATED).count();
    let overflow: Vec<_> = replies
        .iter()
        .filter(|r| r.status == StatusCode::SERVICE_UNAVAILABLE)
        .collect();
    assert_eq!(created + overflow.len(), 40);
    assert!(!overflow.is_empty());
    assert!(overflow.iter().all(|r| r.header(GW_ACTION_HEADER) == Some("overflow")));
    let stats: GatewayStats = serde_json::from_value(get_json(&c, &addr, "/admin/gw/stats").await).unwrap();
    assert_eq!(stats.served as usize, created);
    assert_eq!(stats.accepted as usize, created);
    assert_eq!(stats.overflowed as usize, overflow.len());
    assert_eq!(stats.peak_in_service, 1);
}

async fn futures_join_all<F: std::future::Future<Output = Reply> + Send + 'static>(
    futs: impl Iterator<Item = F>,
) -> Vec<Reply> {
    let handles: Vec<_> = futs.map(tokio::spawn).collect();
    let mut out = Vec::new();
    for h in handles {
        out.push(h.await.unwrap());
    }
    out
}

#[tokio::test]
async fn worker_bound_respected() {
    let (h, addr) = gateway(30, 3).await;
    let c = proxy::client();
    let replies = futures_join_all((0..20).map(|_| {
        let (c, addr) = (c.clone(), addr.clone());
        async move { post(&c, &addr, "/app/data", &[]).await }
    }))
    .await;
    assert!(replies.iter().all(|r| r.status == StatusCode::CREATED));
    let stats: GatewayStats = serde_json::from_value(get_json(&c, &addr, "/admin/gw/stats").await).unwrap();
    assert_eq!(stats.peak_in_service, 3);
    h.shutdown().await;
}

#[tokio::test]
async fn resize_to_eight_starts_queued_together() {
    let (_h, addr) = gateway(200, 1).await;
    let c = proxy::client();
    let start = Instant::now();
    let handles: Vec<_> = (0..9)
        .map(|_| {
            let (c, addr) = (c.clone(), addr.clone());
            tokio::spawn(async move {
                post(&c, &addr, "/app/data", &[]).await;
                start.elapsed()
            })
        })
        .collect();
    // one in service, eight queued
    tokio::time::sleep(Duration::from_millis(50)).await;
    let stats = gateway::resize_workers(&c, &addr, 8).await.unwrap();
    assert_eq!(stats.workers, 8);
    let mut done: Vec<f64> = Vec::new();
    for h in handles {
        done.push(ms(h.await.unwrap()));
    }
    done.sort_by(f64::total_cmp);
    // the eight queued requests all complete within one service quantum
    let queued = &done[1..];
    let spread = queued[queued.len() - 1] - queued[0];
    assert!(spread < 200.0, "{done:?}");
    assert!(done[8] < 450.0, "{done:?}");
}

#[tokio::test]
async fn shrinking_never_aborts_in_flight() {
    let (_h, addr) = gateway(150, 4).await;
    let c = proxy::client();
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (c, addr) = (c.clone(), addr.clone());
            tokio::spawn(async move { post(&c, &addr, "/app/data", &[]).await.status })
        })
        .collect();
    tokio::time::sleep(Duration::from_millis(40)).await;
    gateway::resize_workers(&c, &addr, 1).await.unwrap();
    for h in handles {
        assert_eq!(h.await.unwrap(), StatusCode::CREATED);
    }
    let stats: GatewayStats = serde_json::from_value(get_json(&c, &addr, "/admin/gw/stats").await).unwrap();
    assert_eq!((stats.served, stats.workers), (4, 1));
}

#[tokio::test]
async fn resize_is_idempotent_and_validated() {
    let (_h, addr) = gateway(10, 2).await;
    let c = proxy::client();
    let a = gateway::resize_workers(&c, &addr, 2).await.unwrap();
    let b = gateway::resize_workers(&c, &addr, 2).await.unwrap();
    assert_eq!(a, b);
    assert!(gateway::resize_workers(&c, &addr, 0).await.is_err());
    let dead = dead_address().await;
    assert!(gateway::resize_workers(&c, &dead, 2).await.is_err());
}
