mod common;

use axum::http::{Method, StatusCode};
use common::*;
use qosmw_core::model::{
    ClassificationPolicy, ClassificationRule, CmcPolicy, MarkingPolicy, CMC_CLASS_HEADER, SOURCE_ID_HEADER,
    TOS_HTTP_HEADER,
};
use qosmw_core::PriorityLevel::{High, Low, Medium};
use qosmw_node::cmc::{self, CmcConfig, CmcStats, INGRESS_HEADER};
use qosmw_node::proxy::{self, HttpClient};

fn nursing_policy() -> CmcPolicy {
    CmcPolicy {
        classification: ClassificationPolicy {
            rules: vec![
                ClassificationRule::source_exact("PostOp_Inj", "postop"),
                ClassificationRule::source_exact("Loc_Inj", "loc"),
                ClassificationRule::source_exact("Food_Inj", "food"),
            ],
            default_class: "default".into(),
        },
        marking: MarkingPolicy {
            classes: [("postop", High), ("loc", Medium), ("food", Low)]
                .into_iter()
                .map(|(c, p)| (c.to_string(), p))
                .collect(),
            default_priority: Low,
        },
    }
}

struct Setup {
    _servers: Vec<qosmw_node::ServerHandle>,
    cmc: String,
    client: HttpClient,
}

async fn setup(activated: bool) -> Setup {
    let (p, pep) = echo("pep").await;
    let (g, gw) = echo("gateway").await;
    let client = proxy::client();
    let c = cmc::spawn(
        "127.0.0.1:0",
        CmcConfig {
            pep,
            gateway: gw,
            policy: nursing_policy(),
            activated,
        },
        client.clone(),
    )
    .await
    .unwrap();
    let cmc = c.addr().to_string();
    Setup {
        _servers: vec![p, g, c],
        cmc,
        client,
    }
}

#[tokio::test]
async fn classifies_and_marks_by_source() {
    let s = setup(true).await;
    for (src, class, prio) in [
        ("PostOp_Inj", "postop", High),
        ("Loc_Inj", "loc", Medium),
        ("Food_Inj", "food", Low),
        ("Other", "default", Low),
    ] {
        let r = post(&s.client, &s.cmc, "/app/data", &[(SOURCE_ID_HEADER, src)]).await;
        let seen = r.json();
        assert_eq!(seen["server"], "pep");
        assert_eq!(seen["headers"][TOS_HTTP_HEADER.as_str()], prio.as_wire());
        assert_eq!(seen["headers"][CMC_CLASS_HEADER], class);
        assert!(seen["headers"][INGRESS_HEADER].is_string());
    }
    let stats: CmcStats = serde_json::from_value(get_json(&s.client, &s.cmc, "/admin/cmc/stats").await).unwrap();
    assert_eq!((stats.received, stats.classified), (4, 4));
}

#[tokio::test]
async fn marked_requests_bypass_classifier() {
    let s = setup(true).await;
    let r = post(
        &s.client,
        &s.cmc,
        "/app/data",
        &[(SOURCE_ID_HEADER, "PostOp_Inj"), (TOS_HTTP_HEADER.as_str(), "PRIORITY_LOW")],
    )
    .await;
    let seen = r.json();
    assert_eq!(seen["headers"][TOS_HTTP_HEADER.as_str()], "PRIORITY_LOW");
    assert!(seen["headers"].get(CMC_CLASS_HEADER).is_none());
}

#[tokio::test]
async fn malformed_mark_is_reclassified() {
    let s = setup(true).await;
    let r = post(
        &s.client,
        &s.cmc,
        "/app/data",
        &[(SOURCE_ID_HEADER, "PostOp_Inj"), (TOS_HTTP_HEADER.as_str(), "URGENT")],
    )
    .await;
    assert_eq!(r.json()["headers"][TOS_HTTP_HEADER.as_str()], "PRIORITY_HIGH");
}

#[tokio::test]
async fn payload_and_headers_preserved() {
    let s = setup(true).await;
    let r = send(
        &s.client,
        Method::POST,
        &s.cmc,
        "/app/data?x=1",
        &[(SOURCE_ID_HEADER, "Loc_Inj"), ("x-custom", "keep me")],
        "{\"v\":42}",
    )
    .await;
    let seen = r.json();
    assert_eq!(seen["path"], "/app/data");
    assert_eq!(seen["headers"]["x-custom"], "keep me");
    assert_eq!(seen["headers"][SOURCE_ID_HEADER], "Loc_Inj");
    assert_eq!(seen["headers"]["content-length"], "8");
}

#[tokio::test]
async fn deactivated_is_passthrough_to_gateway() {
    let s = setup(false).await;
    let r = post(&s.client, &s.cmc, "/app/data", &[(SOURCE_ID_HEADER, "PostOp_Inj")]).await;
    let seen = r.json();
    assert_eq!(seen["server"], "gateway");
    assert!(seen["headers"].get(TOS_HTTP_HEADER.as_str()).is_none());

    send(&s.client, Method::POST, &s.cmc, "/admin/cmc/activate", &[], "").await;
    let seen = post(&s.client, &s.cmc, "/app/data", &[(SOURCE_ID_HEADER, "PostOp_Inj")]).await.json();
    assert_eq!(seen["server"], "pep");
    send(&s.client, Method::POST, &s.cmc, "/admin/cmc/deactivate", &[], "").await;
    let seen = post(&s.client, &s.cmc, "/app/data", &[]).await.json();
    assert_eq!(seen["server"], "gateway");
}

#[tokio::test]
async fn policy_replacement() {
    let s = setup(true).await;
    let mut p = nursing_policy();
    p.marking.classes.insert("food".into(), High);
    let r = put_json(&s.client, &s.cmc, "/admin/cmc/policy", &p).await;
    assert_eq!(r.status, StatusCode::OK);
    let seen = post(&s.client, &s.cmc, "/app/data", &[(SOURCE_ID_HEADER, "Food_Inj")]).await.json();
    assert_eq!(seen["headers"][TOS_HTTP_HEADER.as_str()], "PRIORITY_HIGH");
    let got: CmcPolicy = serde_json::from_value(get_json(&s.client, &s.cmc, "/admin/cmc/policy").await).unwrap();
    assert_eq!(got, p);
}

#[tokio::test]
async fn upstream_down_is_bad_gateway() {
    let client = proxy::client();
    let c = cmc::spawn(
        "127.0.0.1:0",
        CmcConfig {
            pep: dead_address().await,
            gateway: dead_address().await,
            policy: nursing_policy(),
            activated: true,
        },
        client.clone(),
    )
    .await
    .unwrap();
    let r = post(&client, &c.addr().to_string(), "/app/data", &[]).await;
    assert_eq!(r.status, StatusCode::BAD_GATEWAY);
}
