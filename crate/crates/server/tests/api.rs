use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde::de::DeserializeOwned;
use serde_json::{json, Value};
use teamcoach::io::dataset_from_jsonl;
use teamcoach::session::{AnnotationRecord, Frame, Phase, ReplayFrame, ServiceConfig, NOMINAL_MESSAGE};
use teamcoach_server::{router, AppState, ErrorBody};
use tower::ServiceExt;

fn app() -> Router {
    router(AppState::new(ServiceConfig::default()))
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn ok<T: DeserializeOwned>(app: &Router, method: &str, uri: &str, body: Option<Value>) -> T {
    let (status, bytes) = call(app, method, uri, body).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

async fn err(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, ErrorBody) {
    let (status, bytes) = call(app, method, uri, body).await;
    assert!(!status.is_success());
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn create(app: &Router, domain: &str, mode: &str) -> Frame {
    ok(app, "POST", "/sessions", Some(json!({ "domain": domain, "config": { "mode": mode } }))).await
}

#[tokio::test]
async fn uncoached_rescue_round_trip() {
    let app = app();
    let f = create(&app, "rescue", "uncoached").await;
    assert_eq!(f.coach_message, NOMINAL_MESSAGE);
    let id = f.session_id.clone();
    let ids: Vec<String> = ok(&app, "GET", "/sessions", None).await;
    assert_eq!(ids, vec![id.clone()]);

    let (status, e) = err(&app, "POST", &format!("/sessions/{id}/confirm"), Some(json!({ "member": 0 }))).await;
    assert_eq!((status, e.error.as_str()), (StatusCode::CONFLICT, "rejected"));
    let (status, _) = err(&app, "POST", &format!("/sessions/{id}/actions"), Some(json!({ "member": 0, "action": 42 }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = err(&app, "GET", &format!("/sessions/{id}/review"), None).await;
    assert_eq!(status, StatusCode::CONFLICT, "review waits for the end of the episode");

    let mut f = f;
    while !f.finished {
        f = ok(&app, "POST", &format!("/sessions/{id}/actions"), Some(json!({ "member": 0, "action": 5 }))).await;
    }
    assert_eq!(f.phase, Phase::Review);
    let got: Frame = ok(&app, "GET", &format!("/sessions/{id}/frame"), None).await;
    assert_eq!(got, f);
    let review: Vec<ReplayFrame> = ok(&app, "GET", &format!("/sessions/{id}/review"), None).await;
    assert_eq!(review.len(), f.t);
}

#[tokio::test]
async fn bad_requests_map_to_statuses() {
    let app = app();
    let (status, e) = err(&app, "GET", "/sessions/nope/frame", None).await;
    assert_eq!((status, e.error.as_str()), (StatusCode::NOT_FOUND, "unknown_session"));
    let (status, e) = err(&app, "POST", "/sessions", Some(json!({ "domain": "kitchen", "config": { "mode": "coached" } }))).await;
    assert_eq!((status, e.error.as_str()), (StatusCode::BAD_REQUEST, "invalid_request"));
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "domain": "rescue", "config": { "mode": "solo" } }))).await;
    assert!(status.is_client_error());
    let ids: Vec<String> = ok(&app, "GET", "/sessions", None).await;
    assert!(ids.is_empty());
    let (status, _) = err(&app, "POST", "/export", Some(json!({ "sessions": [] }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn annotation_fix_reaches_the_export() {
    let app = app();
    let f = create(&app, "rescue", "annotation").await;
    assert_eq!(f.destinations.as_ref().unwrap().len(), 4);
    let id = f.session_id;
    let f: Frame = ok(&app, "POST", &format!("/sessions/{id}/annotations"), Some(json!({ "member": 0, "intent": 1 }))).await;
    assert_eq!(f.selected[0], Some(1));
    let mut f = f;
    while !f.finished {
        f = ok(&app, "POST", &format!("/sessions/{id}/actions"), Some(json!({ "member": 0, "action": 5 }))).await;
    }
    let (status, _) = err(&app, "POST", &format!("/sessions/{id}/fixes"), Some(json!({ "t": f.t, "member": 0, "intent": 2 }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let rec: AnnotationRecord = ok(&app, "POST", &format!("/sessions/{id}/fixes"), Some(json!({ "t": 2, "member": 0, "intent": 2 }))).await;
    assert_eq!(rec.t, 2);

    let (status, body) = call(&app, "POST", "/export", Some(json!({ "sessions": [id.clone()], "member": 0 }))).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(body).unwrap();
    let (domain, ds) = dataset_from_jsonl(&text).unwrap();
    assert_eq!(domain, "rescue");
    assert_eq!(ds.trajectories[0].steps[2].x[0], Some(2));
    assert_eq!(ds.trajectories[0].steps[1].x[0], Some(1));
    let (_, again) = call(&app, "POST", "/export", Some(json!({ "sessions": [id], "member": 0 }))).await;
    assert_eq!(again, text.into_bytes());
}

/// Reads server-sent events until one carries a frame.
async fn next_frame(body: &mut Body) -> Frame {
    let mut buf = String::new();
    loop {
        let chunk = body.frame().await.expect("stream open").unwrap();
        if let Ok(data) = chunk.into_data() {
            buf.push_str(std::str::from_utf8(&data).unwrap());
        }
        if let Some(end) = buf.find("\n\n") {
            let event: String = buf[..end].to_string();
            buf.drain(..end + 2);
            if let Some(line) = event.lines().find_map(|l| l.strip_prefix("data: ")) {
                assert!(event.contains("event: frame"));
                return serde_json::from_str(line).unwrap();
            }
        }
    }
}

#[tokio::test]
async fn stream_pushes_frames_after_each_request() {
    let app = app();
    let id = create(&app, "rescue", "uncoached").await.session_id;
    let req = Request::builder().uri(format!("/sessions/{id}/stream")).body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "text/event-stream");
    let mut body = resp.into_body();
    assert_eq!(next_frame(&mut body).await.t, 0);
    let posted: Frame = ok(&app, "POST", &format!("/sessions/{id}/actions"), Some(json!({ "member": 0, "action": 5 }))).await;
    let pushed = next_frame(&mut body).await;
    assert_eq!(pushed, posted);
    assert_eq!(pushed.t, 1);
}

#[tokio::test]
async fn coached_movers_pause_and_confirm_over_http() {
    let app = app();
    let f = create(&app, "movers", "coached").await;
    let id = f.session_id;
    let mut paused = None;
    for a in [4, 4, 4, 4, 1, 1, 1] {
        let f: Frame = ok(&app, "POST", &format!("/sessions/{id}/actions"), Some(json!({ "member": 0, "action": a }))).await;
        if f.pending_confirmation {
            paused = Some(f);
            break;
        }
    }
    let f = paused.expect("intervention");
    assert_eq!(f.phase, Phase::PausedForIntervention);
    assert!(f.coach_message.starts_with("I've spotted a potential opportunity"));
    assert!(f.highlight.is_some());
    let (status, e) = err(&app, "POST", &format!("/sessions/{id}/actions"), Some(json!({ "member": 0, "action": 0 }))).await;
    assert_eq!((status, e.message.as_str()), (StatusCode::CONFLICT, "confirm required"));
    let resumed: Frame = ok(&app, "POST", &format!("/sessions/{id}/confirm"), Some(json!({ "member": 0 }))).await;
    assert_eq!(resumed.phase, Phase::Trial);
    assert_eq!(resumed.cost, f.cost + 1.0);
    let ended: Frame = ok(&app, "POST", &format!("/sessions/{id}/abandon"), None).await;
    assert!(ended.finished);
}
