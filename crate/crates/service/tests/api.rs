use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine as _;
use futures::StreamExt;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use gma_core::edit::{apply_edit, EditCommand};
use gma_core::pipeline::{Avatar, AvatarContext};
use gma_core::render::Camera;
use gma_core::synth::{generate_subject, small_body_config, OrbitSpec, TextureSpec};
use gma_service::{router, ServiceConfig, Session};

const SIDE: usize = 64;

fn subject() -> Avatar {
    generate_subject(&small_body_config(), TextureSpec::default(), 11).unwrap().avatar
}

fn start() -> (Arc<Session>, Router) {
    let s = Session::start(
        subject(),
        ServiceConfig {
            view_size: (SIDE, SIDE),
            ..Default::default()
        },
    )
    .unwrap();
    let app = router(s.clone());
    (s, app)
}

fn front() -> Camera {
    OrbitSpec::default().camera(0, 1, SIDE, SIDE).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Vec<u8>) {
    call(app, "POST", uri, serde_json::to_vec(&body).unwrap()).await
}

fn as_json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn render_body() -> Value {
    json!({"camera": front().to_json(), "width": SIDE, "height": SIDE})
}

/// Faces visible from the front camera, via the library ID pass.
fn visible_faces(s: &Session) -> Vec<usize> {
    let out = s.snapshot().render(&front(), None, [1.0; 3]).unwrap();
    gma_core::render::pick_faces(&out, &gma_core::render::Selection::Box([0.0, 0.0, SIDE as f64, SIDE as f64]))
}

fn paint(region: &[usize], color: [f64; 3]) -> Value {
    json!({"kind": "paint", "region": region, "payload": {"color": color}})
}

#[tokio::test]
async fn health_and_state() {
    let (_, app) = start();
    let (st, body) = call(&app, "GET", "/v1/health", vec![]).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body, b"ok");
    let (st, body) = call(&app, "GET", "/v1/state", vec![]).await;
    assert_eq!(st, StatusCode::OK);
    let v = as_json(&body);
    assert_eq!(v["version"], 0);
    assert_eq!(v["undo_depth"], 0);
    assert!(v["n_faces"].as_u64().unwrap() > 0);
}

#[tokio::test]
async fn render_is_deterministic_png() {
    let (_, app) = start();
    let (st, a) = post(&app, "/v1/render", render_body()).await;
    assert_eq!(st, StatusCode::OK);
    let (_, b) = post(&app, "/v1/render", render_body()).await;
    assert_eq!(a, b);
    let img = image::load_from_memory(&a).unwrap();
    assert_eq!((img.width() as usize, img.height() as usize), (SIDE, SIDE));

    // Same camera at a different raster size rescales the intrinsics.
    let (st, c) = post(&app, "/v1/render", json!({"camera": front().to_json(), "width": 32, "height": 24})).await;
    assert_eq!(st, StatusCode::OK);
    let img = image::load_from_memory(&c).unwrap();
    assert_eq!((img.width(), img.height()), (32, 24));
}

#[tokio::test]
async fn malformed_json_names_the_field() {
    let (_, app) = start();
    let (st, body) = post(&app, "/v1/render", json!({"width": 8, "height": 8})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("camera"));

    let mut cam = serde_json::to_value(front().to_json()).unwrap();
    cam["fx"] = json!("wide");
    let (st, body) = post(&app, "/v1/render", json!({"camera": cam})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("camera.fx"), "{}", String::from_utf8_lossy(&body));

    let (st, _) = call(&app, "POST", "/v1/edit", b"{not json".to_vec()).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    let (st, body) = post(&app, "/v1/edit", json!({"kind": "sculpt", "region": []})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("kind"));
}

#[tokio::test]
async fn pick_matches_id_pass() {
    let (s, app) = start();
    let cam = front();
    let out = s.snapshot().render(&cam, None, [1.0; 3]).unwrap();
    let mut checked = 0;
    for y in (0..SIDE).step_by(7) {
        for x in (0..SIDE).step_by(5) {
            let id = out.id[y * SIDE + x];
            let (xf, yf) = (x as f64, y as f64);
            let (st, body) = post(
                &app,
                "/v1/pick",
                json!({"camera": cam.to_json(), "width": SIDE, "height": SIDE, "box": [xf, yf, xf + 1.0, yf + 1.0]}),
            )
            .await;
            assert_eq!(st, StatusCode::OK);
            let faces: Vec<usize> = serde_json::from_value(as_json(&body)["faces"].clone()).unwrap();
            let expect: Vec<usize> = if id >= 0 { vec![id as usize] } else { vec![] };
            assert_eq!(faces, expect, "pixel ({x}, {y})");
            checked += (id >= 0) as usize;
        }
    }
    assert!(checked > 10);

    // Pen polygon equal to a box selects the same faces.
    let b = json!({"camera": cam.to_json(), "box": [10.0, 12.0, 40.0, 50.0]});
    let p = json!({"camera": cam.to_json(), "polygon": [[10.0, 12.0], [40.0, 12.0], [40.0, 50.0], [10.0, 50.0]]});
    let (_, fb) = post(&app, "/v1/pick", b).await;
    let (_, fp) = post(&app, "/v1/pick", p).await;
    assert_eq!(as_json(&fb), as_json(&fp));

    let (st, _) = post(&app, "/v1/pick", json!({"camera": cam.to_json()})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn edit_and_undo_restore_checkpoint_bytes() {
    let (s, app) = start();
    let (_, before) = call(&app, "GET", "/v1/checkpoint", vec![]).await;
    let region: Vec<usize> = visible_faces(&s).into_iter().take(6).collect();
    let (st, body) = post(&app, "/v1/edit", paint(&region, [0.9, 0.1, 0.1])).await;
    assert_eq!(st, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r = as_json(&body);
    assert_eq!(r["ok"], true);
    assert_eq!(r["version"], 1);
    let changed: Vec<usize> = serde_json::from_value(r["changed_faces"].clone()).unwrap();
    assert_eq!(changed, region);
    let (_, after) = call(&app, "GET", "/v1/checkpoint", vec![]).await;
    assert_ne!(before, after);
    assert_eq!(as_json(&call(&app, "GET", "/v1/state", vec![]).await.1)["undo_depth"], 1);

    let (st, _) = call(&app, "POST", "/v1/undo", vec![]).await;
    assert_eq!(st, StatusCode::OK);
    let (_, restored) = call(&app, "GET", "/v1/checkpoint", vec![]).await;
    assert_eq!(before, restored);

    let (st, _) = call(&app, "POST", "/v1/undo", vec![]).await;
    assert_eq!(st, StatusCode::CONFLICT);
}

#[tokio::test]
async fn failed_edit_is_conflict_and_leaves_state() {
    let (s, app) = start();
    let n = s.snapshot().avatar.n_faces();
    let (st, body) = post(&app, "/v1/edit", paint(&[n + 5], [0.5; 3])).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(as_json(&body)["ok"], false);
    let (st, _) = post(&app, "/v1/edit", json!({"kind": "paint", "region": [1], "payload": {"colour": [1, 0, 0]}})).await;
    assert_eq!(st, StatusCode::CONFLICT);
    assert_eq!(s.snapshot().version, 0);
}

#[tokio::test]
async fn undo_depth_is_bounded() {
    let (s, app) = start();
    for i in 0..20 {
        let beta = vec![0.01 * i as f64; s.snapshot().avatar.canonical.beta.len()];
        let (st, _) = post(&app, "/v1/edit", json!({"kind": "shape", "payload": {"values": beta}})).await;
        assert_eq!(st, StatusCode::OK);
    }
    assert_eq!(s.state().undo_depth, gma_service::session::UNDO_DEPTH);
}

#[tokio::test]
async fn concurrent_edits_serialize() {
    let (s, app) = start();
    let original = s.snapshot().avatar.clone();
    let faces = visible_faces(&s);
    let cmds: Vec<Value> = (0..10)
        .map(|i| {
            // Overlapping regions so the application order matters.
            let region: Vec<usize> = faces.iter().skip(i).take(4).copied().collect();
            let t = i as f64 / 9.0;
            paint(&region, [t, 1.0 - t, 0.5])
        })
        .collect();
    let handles: Vec<_> = cmds
        .iter()
        .cloned()
        .map(|c| {
            let app = app.clone();
            tokio::spawn(async move { post(&app, "/v1/edit", c.clone()).await })
        })
        .collect();
    let mut applied = Vec::new();
    for (h, c) in handles.into_iter().zip(&cmds) {
        let (st, body) = h.await.unwrap();
        assert_eq!(st, StatusCode::OK);
        applied.push((as_json(&body)["version"].as_u64().unwrap(), c.clone()));
    }
    applied.sort_by_key(|(v, _)| *v);
    let versions: Vec<u64> = applied.iter().map(|(v, _)| *v).collect();
    assert_eq!(versions, (1..=10).collect::<Vec<_>>());

    let ctx = AvatarContext::new(&original).unwrap();
    let mut a = original;
    for (_, c) in &applied {
        let cmd: EditCommand = serde_json::from_value(c.clone()).unwrap();
        a = apply_edit(&a, &ctx, &cmd).unwrap().0;
    }
    let (_, server) = call(&app, "GET", "/v1/checkpoint", vec![]).await;
    assert_eq!(server, gma_core::persist::to_bytes(&a).unwrap());
}

#[tokio::test]
async fn params_deltas_and_reset() {
    let (s, app) = start();
    let (_, initial) = post(&app, "/v1/render", render_body()).await;
    let nb = s.snapshot().params.beta.len();
    let mut beta = vec![0.0; nb];
    beta[0] = 0.8;
    let (st, body) = post(&app, "/v1/params", json!({"beta": beta})).await;
    assert_eq!(st, StatusCode::OK);
    assert!((as_json(&body)["params"]["beta"][0].as_f64().unwrap() - (0.8 + s.snapshot().avatar.canonical.beta[0])).abs() < 1e-12);
    let (_, moved) = post(&app, "/v1/render", render_body()).await;
    assert_ne!(initial, moved);

    let (st, _) = post(&app, "/v1/params", json!({"reset": true})).await;
    assert_eq!(st, StatusCode::OK);
    let (_, back) = post(&app, "/v1/render", render_body()).await;
    assert_eq!(initial, back);

    // Zero deltas leave the frame unchanged.
    let (_, _) = post(&app, "/v1/params", json!({"beta": vec![0.0; nb]})).await;
    assert_eq!(post(&app, "/v1/render", render_body()).await.1, initial);

    let (st, body) = post(&app, "/v1/params", json!({"beta": [1.0]})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("beta"));
}

#[tokio::test]
async fn record_path_and_frames() {
    let (_, app) = start();
    let (st, _) = call(&app, "POST", "/v1/record/key", vec![]).await;
    assert_eq!(st, StatusCode::CONFLICT);
    call(&app, "POST", "/v1/record/start", vec![]).await;
    let (st, body) = call(&app, "POST", "/v1/record/key", vec![]).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(as_json(&body)["n_keys"], 1);
    let side = OrbitSpec::default().camera(12, 48, 40, 40).unwrap();
    let (st, _) = post(&app, "/v1/record/key", json!({"camera": side.to_json()})).await;
    assert_eq!(st, StatusCode::OK);

    let dir = tempfile::tempdir().unwrap();
    let (st, body) = post(&app, "/v1/record/stop", json!({"dir": dir.path()})).await;
    assert_eq!(st, StatusCode::OK);
    let r = as_json(&body);
    assert_eq!(r["keys"].as_array().unwrap().len(), 2);
    let frames = r["frames"].as_array().unwrap();
    assert_eq!(frames.len(), 2);
    let png = base64::engine::general_purpose::STANDARD.decode(frames[1].as_str().unwrap()).unwrap();
    assert_eq!(image::load_from_memory(&png).unwrap().width(), 40);
    assert_eq!(std::fs::read(dir.path().join("key_0001.png")).unwrap(), png);
    let path: Value = serde_json::from_slice(&std::fs::read(dir.path().join("path.json")).unwrap()).unwrap();
    assert_eq!(path, r["keys"]);

    let (st, _) = call(&app, "POST", "/v1/record/stop", vec![]).await;
    assert_eq!(st, StatusCode::CONFLICT);
}

#[tokio::test]
async fn save_writes_loadable_checkpoint() {
    let (s, app) = start();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("saved.gma");
    let (st, _) = post(&app, "/v1/save", json!({"path": path})).await;
    assert_eq!(st, StatusCode::OK);
    let loaded = gma_core::persist::load(&path).unwrap();
    assert_eq!(loaded, s.snapshot().avatar.quantized());
    let (st, body) = post(&app, "/v1/save", json!({})).await;
    assert_eq!(st, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("path"));
}

type Ws = tokio_tungstenite::WebSocketStream<tokio_tungstenite::MaybeTlsStream<tokio::net::TcpStream>>;

async fn next_frame(ws: &mut Ws, wait: Duration) -> Option<Vec<u8>> {
    loop {
        match tokio::time::timeout(wait, ws.next()).await {
            Err(_) => return None,
            Ok(Some(Ok(tokio_tungstenite::tungstenite::Message::Binary(b)))) => return Some(b.to_vec()),
            Ok(Some(Ok(_))) => continue,
            Ok(other) => panic!("stream ended: {other:?}"),
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn stream_pushes_one_frame_per_change() {
    let (s, app) = start();
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(gma_service::serve_listener(listener, s.clone()));
    let url = format!("ws://{addr}/v1/stream");
    let (mut a, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let (mut b, _) = tokio_tungstenite::connect_async(&url).await.unwrap();
    let first_a = next_frame(&mut a, Duration::from_secs(30)).await.expect("initial frame");
    let first_b = next_frame(&mut b, Duration::from_secs(30)).await.expect("initial frame");
    assert_eq!(first_a, first_b);
    assert_eq!(first_a, s.current_frame().await.unwrap());

    let region: Vec<usize> = visible_faces(&s).into_iter().take(30).collect();
    let (st, _) = post(&app, "/v1/edit", paint(&region, [0.1, 0.2, 0.9])).await;
    assert_eq!(st, StatusCode::OK);
    let edited = s.current_frame().await.unwrap();
    assert_ne!(edited, first_a);
    for ws in [&mut a, &mut b] {
        assert_eq!(next_frame(ws, Duration::from_secs(30)).await.as_deref(), Some(edited.as_slice()));
        assert!(next_frame(ws, Duration::from_millis(400)).await.is_none(), "extra frame after one edit");
    }

    let (st, _) = call(&app, "POST", "/v1/undo", vec![]).await;
    assert_eq!(st, StatusCode::OK);
    for ws in [&mut a, &mut b] {
        assert_eq!(next_frame(ws, Duration::from_secs(30)).await, Some(first_a.clone()));
    }
}
