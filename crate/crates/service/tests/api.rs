use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use dualsdf_core::geometry::procedural_dataset;
use dualsdf_core::nn::NetConfig;
use dualsdf_core::vad::{Dataset, TrainConfig, TrainState};
use dualsdf_service::{router, AppState, Model, ServiceConfig, SessionMessage, SUBPROTOCOL};
use futures_util::StreamExt;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tokio_tungstenite::tungstenite::client::IntoClientRequest;
use tokio_tungstenite::tungstenite::Message;
use tower::ServiceExt;

fn small_model() -> Model {
    let data = Dataset::from_oracles(&procedural_dataset(2, 3), 256, 128, 3).unwrap();
    let mut cfg = TrainConfig::desk(3);
    cfg.net = NetConfig {
        latent_dim: 8,
        hidden_dim: 32,
        n_primitives: 4,
        ..NetConfig::desk()
    };
    Model::from_state(&TrainState::new(cfg, &data).unwrap()).unwrap()
}

fn app_with(config: ServiceConfig) -> Arc<AppState> {
    AppState::new(small_model(), config).unwrap()
}

fn app() -> Arc<AppState> {
    app_with(ServiceConfig {
        preview_width: 16,
        preview_height: 16,
        final_width: 24,
        final_height: 24,
        final_steps: 16,
        ..ServiceConfig::default()
    })
}

async fn call(app: &Arc<AppState>, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(app.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

async fn new_session(app: &Arc<AppState>) -> String {
    let (status, body) = call(app, "POST", "/sessions", Some(json!({ "source": "random" }))).await;
    assert_eq!(status, StatusCode::CREATED);
    json_of(&body)["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn random_session_returns_primitives() {
    let app = app();
    let (status, body) = call(&app, "POST", "/sessions", Some(json!({ "source": "random" }))).await;
    assert_eq!(status, StatusCode::CREATED);
    let v = json_of(&body);
    assert_eq!(v["primitive_kind"], "sphere");
    let prims = v["primitives"].as_array().unwrap();
    assert_eq!(prims.len(), 4);
    for p in prims {
        assert!(p["radius"].as_f64().unwrap() > 0.0);
        assert_eq!(p["center"].as_array().unwrap().len(), 3);
    }
    assert_eq!(app.session_count(), 1);
}

#[tokio::test]
async fn named_and_explicit_sources() {
    let app = app();
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "source": "no-such-shape" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let (status, body) = call(&app, "GET", "/shapes", None).await;
    assert_eq!(status, StatusCode::OK);
    let shapes = json_of(&body);
    let first = shapes["shapes"][0]["id"].as_str().unwrap().to_string();
    assert_eq!(shapes["latent_dim"], 8);
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "source": first }))).await;
    assert_eq!(status, StatusCode::CREATED);

    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "source": vec![0.0; 8] }))).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, body) = call(&app, "POST", "/sessions", Some(json!({ "source": vec![0.0; 3] }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["path"], "source");
}

#[tokio::test]
async fn unknown_session_is_404() {
    let app = app();
    for (method, uri) in [
        ("GET", "/sessions/nope/primitives"),
        ("DELETE", "/sessions/nope"),
        ("GET", "/sessions/nope/render"),
    ] {
        let (status, _) = call(&app, method, uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{method} {uri}");
    }
    let obj = json!({ "objective": { "terms": [] } });
    let (status, _) = call(&app, "POST", "/sessions/nope/objective", Some(obj)).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn delete_removes_session() {
    let app = app();
    let id = new_session(&app).await;
    let (status, _) = call(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, _) = call(&app, "GET", &format!("/sessions/{id}/primitives"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn bad_objectives_report_field_path() {
    let app = app();
    let id = new_session(&app).await;
    let uri = format!("/sessions/{id}/objective");
    let cases = [
        (
            json!({ "objective": { "terms": [{ "kind": "MovePrimitive", "indices": [9], "target": [0, 0, 0] }] } }),
            "objective.terms[0].indices[0]",
        ),
        (
            json!({ "objective": { "terms": [{ "kind": "MovePrimitive", "indices": [0], "target": [0, 0] }] } }),
            "objective.terms[0].target",
        ),
        (json!({ "objective": { "terms": [] } }), "objective.terms"),
        (
            json!({ "objective": { "terms": [{ "kind": "Teleport", "indices": [0], "target": [0] }] } }),
            "objective.terms[0].kind",
        ),
        (
            json!({ "objective": { "terms": [{ "kind": "SetRadius", "indices": [0], "target": [0.2] }] }, "max_steps": 0 }),
            "max_steps",
        ),
    ];
    for (body, path) in cases {
        let (status, resp) = call(&app, "POST", &uri, Some(body.clone())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert_eq!(json_of(&resp)["path"], path, "{body}");
    }
}

#[tokio::test]
async fn session_limit_is_429() {
    let app = app_with(ServiceConfig {
        max_sessions: 2,
        ..ServiceConfig::default()
    });
    new_session(&app).await;
    new_session(&app).await;
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "source": "random" }))).await;
    assert_eq!(status, StatusCode::TOO_MANY_REQUESTS);
    assert_eq!(app.session_count(), 2);
}

#[tokio::test]
async fn idle_sessions_are_reaped() {
    let app = app_with(ServiceConfig {
        idle_timeout_secs: 1,
        ..ServiceConfig::default()
    });
    new_session(&app).await;
    assert_eq!(app.reap_idle(), 0);
    tokio::time::sleep(Duration::from_millis(1100)).await;
    assert_eq!(app.reap_idle(), 1);
    assert_eq!(app.session_count(), 0);
}

#[tokio::test]
async fn renders_png_at_both_levels() {
    let app = app();
    let id = new_session(&app).await;
    for level in ["coarse", "fine"] {
        let (status, body) = call(&app, "GET", &format!("/sessions/{id}/render?level={level}&w=20&h=12"), None).await;
        assert_eq!(status, StatusCode::OK, "{level}");
        let decoder = png::Decoder::new(body.as_slice());
        let reader = decoder.read_info().unwrap();
        assert_eq!((reader.info().width, reader.info().height), (20, 12));
    }
    let (status, body) = call(&app, "GET", &format!("/sessions/{id}/render?w=0"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(json_of(&body)["path"], "w");
    let (status, _) = call(&app, "GET", &format!("/sessions/{id}/render?level=medium"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn health_and_ui_placeholder() {
    let app = app();
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["status"], "ok");
    let (status, body) = call(&app, "GET", "/ui", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("<title>dualsdf</title>"));
}

#[tokio::test]
async fn ui_dir_is_served() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<p>bundle</p>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let app = app_with(ServiceConfig {
        ui_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    });
    let (status, body) = call(&app, "GET", "/ui/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<p>bundle</p>");
    let (status, body) = call(&app, "GET", "/ui/app.js", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"console.log(1)");
    let (status, _) = call(&app, "GET", "/ui/missing.css", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[test]
fn config_parses_toml_and_rejects_unknown_keys() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(&good, "bind = \"0.0.0.0:9000\"\nmax_sessions = 4\n").unwrap();
    let cfg = ServiceConfig::from_toml_file(&good).unwrap();
    assert_eq!(cfg.bind, "0.0.0.0:9000");
    assert_eq!(cfg.max_sessions, 4);
    assert_eq!(cfg.final_width, ServiceConfig::default().final_width);
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "max_session = 4\n").unwrap();
    assert!(ServiceConfig::from_toml_file(&bad).is_err());
    let zero = ServiceConfig {
        render_workers: 0,
        ..ServiceConfig::default()
    };
    assert!(zero.validate().is_err());
}

async fn spawn_server(app: Arc<AppState>) -> std::net::SocketAddr {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(app)).await.unwrap() });
    addr
}

async fn next_message<S>(ws: &mut S) -> SessionMessage
where
    S: futures_util::Stream<Item = Result<Message, tokio_tungstenite::tungstenite::Error>> + Unpin,
{
    loop {
        let msg = tokio::time::timeout(Duration::from_secs(60), ws.next())
            .await
            .expect("frame within timeout")
            .expect("stream open")
            .unwrap();
        if let Message::Text(t) = msg {
            return serde_json::from_str(&t).unwrap();
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_streams_objective_progress() {
    let app = app();
    let id = new_session(&app).await;
    let addr = spawn_server(app.clone()).await;

    let mut req = format!("ws://{addr}/sessions/{id}/ws").into_client_request().unwrap();
    req.headers_mut()
        .insert(header::SEC_WEBSOCKET_PROTOCOL, SUBPROTOCOL.parse().unwrap());
    let (mut ws, resp) = tokio_tungstenite::connect_async(req).await.unwrap();
    assert_eq!(resp.headers()[header::SEC_WEBSOCKET_PROTOCOL], SUBPROTOCOL);

    let SessionMessage::PrimitivesUpdate { step, primitives, .. } = next_message(&mut ws).await else {
        panic!("first frame must be a snapshot");
    };
    assert_eq!(step, 0);
    let c = primitives[0].center;
    let target = [c[0] + 0.2, c[1], c[2]];
    let body = json!({
        "objective": { "terms": [{ "kind": "MovePrimitive", "indices": [0], "target": target }] },
        "max_steps": 10,
    });
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/objective"), Some(body)).await;
    assert_eq!(status, StatusCode::ACCEPTED);

    let mut updates = 0;
    let mut last_step = 0;
    loop {
        match next_message(&mut ws).await {
            SessionMessage::PrimitivesUpdate { step, l_man, .. } => {
                assert!(step > last_step, "steps arrive in order");
                assert!(l_man.is_some());
                last_step = step;
                updates += 1;
            }
            SessionMessage::StepReport {
                initial_l_man, l_man, step, ..
            } => {
                assert_eq!(step, last_step);
                assert!(l_man < initial_l_man, "{l_man} !< {initial_l_man}");
                break;
            }
            other => panic!("unexpected frame {other:?}"),
        }
    }
    assert!(updates >= 1);

    let (status, _) = call(&app, "GET", &format!("/sessions/{id}/render?w=8&h=8"), None).await;
    assert_eq!(status, StatusCode::OK);
    match next_message(&mut ws).await {
        SessionMessage::RenderReady { width, height, step, .. } => {
            assert_eq!((width, height, step), (8, 8, last_step));
        }
        other => panic!("unexpected frame {other:?}"),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_requires_subprotocol() {
    let app = app();
    let id = new_session(&app).await;
    let addr = spawn_server(app).await;
    let err = tokio_tungstenite::connect_async(format!("ws://{addr}/sessions/{id}/ws")).await;
    match err {
        Err(tokio_tungstenite::tungstenite::Error::Http(resp)) => assert_eq!(resp.status(), StatusCode::BAD_REQUEST),
        other => panic!("expected an HTTP rejection, got {:?}", other.map(|(_, r)| r.status())),
    }
}
