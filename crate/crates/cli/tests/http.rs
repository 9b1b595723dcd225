use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use dwd_core::agents::{abot_answer, ModelConfig, QBot};
use dwd_core::eval::rollout;
use dwd_core::service::{GameService, TranscriptStore};
use dwd_core::synthworld::Question;
use dwd_core::trainer::{Checkpoint, CheckpointMeta, Stage, TrainConfig, Variant};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn checkpoint() -> Checkpoint {
    Checkpoint {
        qbot: QBot::new(ModelConfig::default(), 5).unwrap(),
        meta: CheckpointMeta {
            stage: Stage::Stage1,
            variant: Variant::OursDiscreteElbo,
            epoch: 0,
            config: TrainConfig::default(),
            metrics: Default::default(),
            history: Vec::new(),
        },
    }
}

fn service() -> Arc<GameService> {
    Arc::new(GameService::new(vec![("ours".into(), checkpoint())], TranscriptStore::in_memory()).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap_or(Value::Null) };
    (status, v)
}

#[tokio::test]
async fn session_protocol_over_http() {
    let app = dwd_cli::server::router(service());
    let (s, stats) = call(&app, "GET", "/stats", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(stats["games"], 0);
    assert!(stats.get("accuracy").is_none_or(Value::is_null));

    let (s, c) = call(&app, "POST", "/sessions", Some(json!({"pool_size": 4, "rounds": 5, "seed": 9}))).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(c["images"].as_array().unwrap().len(), 4);
    let target = c["target_index"].as_u64().unwrap();
    assert!((1..=4).contains(&target));
    let id = c["session_id"].as_str().unwrap().to_string();

    let (s, view) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(view.get("target_index").is_none());
    assert_eq!(view["phase"], "awaiting_answer");

    let (s, e) = call(&app, "POST", &format!("/sessions/{id}/answer"), Some(json!({"answer": "purple"}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(e["vocabulary"].as_array().unwrap().len(), 15);

    let mut last = Value::Null;
    for _ in 0..5 {
        let (s, r) = call(&app, "POST", &format!("/sessions/{id}/answer"), Some(json!({"answer": "no"}))).await;
        assert_eq!(s, StatusCode::OK);
        last = r;
    }
    assert_eq!(last["phase"], "finished");
    let guess = last["result"]["guess"].as_u64().unwrap();
    assert!((1..=4).contains(&guess));
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/answer"), Some(json!({"answer": "no"}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    let (_, stats) = call(&app, "GET", "/stats", None).await;
    assert_eq!(stats["games"], 1);
}

#[tokio::test]
async fn malformed_requests_are_client_errors() {
    let app = dwd_cli::server::router(service());
    let (s, e) = call(&app, "POST", "/sessions", Some(json!({"pool_size": 3, "rounds": 5}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"], "bad_request");
    let (s, _) = call(&app, "POST", "/sessions", Some(json!({"rounds": 5}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call(&app, "GET", "/sessions/missing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn oracle_client_reproduces_rollout() {
    let svc = service();
    let app = dwd_cli::server::router(Arc::clone(&svc));
    let ck = checkpoint();
    for (p, r, seed) in [(2, 5, 1u64), (4, 5, 2), (9, 9, 3)] {
        let (_, c) = call(&app, "POST", "/sessions", Some(json!({"pool_size": p, "rounds": r, "seed": seed}))).await;
        let id = c["session_id"].as_str().unwrap().to_string();
        let pool = svc.session_pool(&id).unwrap();
        let mut question = c["question"].as_str().unwrap().to_string();
        let mut result = Value::Null;
        let mut asked = Vec::new();
        for _ in 0..r {
            asked.push(question.clone());
            let q = Question::parse_text(&question).unwrap();
            let a = abot_answer(&pool, pool.target, &q).0;
            let (_, resp) =
                call(&app, "POST", &format!("/sessions/{id}/answer"), Some(json!({"answer": a.name()}))).await;
            question = resp["next_question"].as_str().unwrap_or_default().to_string();
            result = resp["result"].clone();
        }
        let t = rollout(&ck, &pool, r, seed).unwrap();
        assert_eq!(asked, t.rounds.iter().map(|x| x.text.clone()).collect::<Vec<_>>());
        assert_eq!(result["guess"].as_u64().unwrap() as usize, t.final_guess + 1);
        assert_eq!(result["correct"].as_bool().unwrap(), t.correct());
    }
}
