use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use nalgebra::DMatrix;
use serde_json::{json, Value};
use tower::ServiceExt;

use regmark::session::SessionDefaults;
use regmark::store::SessionStore;
use regmark_core::annotation::{covariance_from_ellipse, DEFAULT_ALPHA};
use regmark_core::suggestion::{run_protocol, ProtocolOptions};
use regmark_core::{
    BasisKind, CandidateSet, Ellipse, GpSession, GridGeometry, KernelSpec, Strategy, TargetSet, TransformField,
};

struct Api {
    app: Router,
    store: Arc<SessionStore>,
}

impl Api {
    fn new(data_dir: &Path) -> Self {
        let store = Arc::new(SessionStore::in_memory(data_dir, SessionDefaults::default()));
        Self {
            app: regmark::router(store.clone()),
            store,
        }
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
        let req = Request::builder()
            .method(method)
            .uri(uri)
            .header("content-type", "application/json")
            .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
            .unwrap();
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let ctype = resp
            .headers()
            .get("content-type")
            .map(|v| v.to_str().unwrap().to_string());
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        (status, bytes, ctype)
    }

    async fn json(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let (status, bytes, _) = self.call(method, uri, body).await;
        (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
    }
}

const WEIGHTS: [f64; 3] = [4.0, 2.0, 1.0];

fn kernel() -> KernelSpec {
    KernelSpec::ladder(BasisKind::Wendland1, 10.0, 3, WEIGHTS.to_vec(), 2).unwrap()
}

fn points(n: usize, step: f64, offset: f64) -> Vec<Vec<f64>> {
    (0..n)
        .flat_map(|i| (0..n).map(move |j| vec![offset + step * i as f64, offset + step * j as f64]))
        .collect()
}

fn candidates() -> Vec<Vec<f64>> {
    let mut c = points(6, 9.0, 4.0);
    c.push(vec![31.5, 17.25]);
    c
}

fn targets() -> Vec<Vec<f64>> {
    points(5, 11.0, 6.0)
}

fn create_body(strategy: &str, seed: u64) -> Value {
    json!({
        "shape": [64, 64],
        "kernel": { "basis": "wendland1", "rho1": 10.0, "weights": WEIGHTS },
        "strategy": strategy,
        "seed": seed,
        "candidates": { "kind": "points", "points": candidates() },
        "targets": { "kind": "points", "points": targets() },
    })
}

async fn create(api: &Api, body: Value) -> String {
    let (status, v) = api.json("POST", "/v1/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["id"].as_str().unwrap().to_string()
}

/// Deterministic answer and covariance for candidate `i`.
fn answer(i: usize, x: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let t = i as f64;
    let y = vec![x[0] + 0.7 * (t * 0.9).sin() + 0.5, x[1] - 0.3 * (t * 1.3).cos()];
    let a = 0.5 + 0.1 * (i % 5) as f64;
    let b = 0.2 * ((i % 3) as f64 - 1.0);
    (y, DMatrix::from_row_slice(2, 2, &[a, b * 0.5, b * 0.5, a + 0.3]))
}

fn rows(m: &DMatrix<f64>) -> Value {
    json!([[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]])
}

#[tokio::test]
async fn http_session_matches_library_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(dir.path());
    let budget = 12;
    for (strategy, seed) in [(Strategy::Entropy, 0), (Strategy::Random, 5), (Strategy::Heuristic, 9)] {
        let id = create(&api, create_body(strategy.as_str(), seed)).await;
        let mut http_trace = Vec::new();
        for k in 0..budget {
            let (status, s) = api.json("GET", &format!("/v1/sessions/{id}/suggestion"), None).await;
            assert_eq!(status, StatusCode::OK);
            assert_eq!(s["iteration"], k);
            let index = s["candidate"].as_u64().unwrap() as usize;
            let point: Vec<f64> = serde_json::from_value(s["point"].clone()).unwrap();
            let delta_h = s["delta_h"].as_f64();
            let (y, sigma) = answer(index, &point);
            let (status, r) = api
                .json(
                    "POST",
                    &format!("/v1/sessions/{id}/annotations"),
                    Some(json!({ "y": y, "sigma": rows(&sigma), "candidate": index, "expected_count": k })),
                )
                .await;
            assert_eq!(status, StatusCode::CREATED, "{r}");
            http_trace.push((index, point, delta_h.map(f64::to_bits)));
        }

        let outcome = run_protocol(
            GpSession::new(kernel()),
            CandidateSet::new(candidates()).unwrap(),
            &TargetSet::new(targets(), "t").unwrap(),
            &ProtocolOptions::new(strategy, budget, seed),
            |s| Ok(answer(s.index, &s.point)),
            None,
        )
        .unwrap();
        let lib_trace: Vec<_> = outcome
            .trace
            .iter()
            .map(|r| (r.candidate, r.point.clone(), r.delta_h.map(f64::to_bits)))
            .collect();
        assert_eq!(http_trace, lib_trace, "{strategy}");

        let record = api.store.get(&id).unwrap();
        let guard = record.read().unwrap();
        assert_eq!(guard.gp.annotations(), outcome.session.annotations(), "{strategy}");
        assert_eq!(guard.gp.inverse_gram(), outcome.session.inverse_gram(), "{strategy}");
        assert_eq!(guard.gp.posterior_mean(&[20.0, 30.0]).unwrap(), outcome.session.posterior_mean(&[20.0, 30.0]).unwrap());
    }
}

#[tokio::test]
async fn huge_ellipse_changes_entropy_less_than_tight_one() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(dir.path());
    let mut changes = Vec::new();
    for radius in [1.0, 40.0] {
        let id = create(&api, create_body("entropy", 0)).await;
        let (_, s) = api.json("GET", &format!("/v1/sessions/{id}/suggestion"), None).await;
        let x: Vec<f64> = serde_json::from_value(s["point"].clone()).unwrap();
        let y = vec![x[0] + 0.5, x[1] - 0.5];
        let (status, r) = api
            .json(
                "POST",
                &format!("/v1/sessions/{id}/annotations"),
                Some(json!({ "y": y, "ellipse": { "radii": [radius, radius] } })),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED, "{r}");

        // direct computation on the same posterior
        let sigma = covariance_from_ellipse(&Ellipse::circle(y.clone(), radius, DEFAULT_ALPHA)).unwrap();
        let prior = GpSession::new(kernel());
        let mut post = prior.clone();
        post.add_annotation(regmark_core::Annotation::new(x.clone(), y, sigma).unwrap()).unwrap();
        let before = prior.joint_entropy(&targets()).unwrap();
        let after = post.joint_entropy(&targets()).unwrap();
        assert_eq!(r["entropy"]["points"], targets().len());
        assert!((r["entropy"]["previous"].as_f64().unwrap() - before).abs() < 1e-9);
        assert!((r["entropy"]["joint"].as_f64().unwrap() - after).abs() < 1e-9);
        changes.push(r["entropy"]["change"].as_f64().unwrap());
    }
    let (tight, huge) = (changes[0], changes[1]);
    assert!(tight < huge && huge < 0.0, "tight {tight}, huge {huge}");
    assert!(huge.abs() < 0.05 * tight.abs(), "tight {tight}, huge {huge}");
}

#[tokio::test]
async fn errors_carry_status_and_code() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(dir.path());
    let id = create(&api, create_body("entropy", 0)).await;
    let ann = format!("/v1/sessions/{id}/annotations");
    let (_, s) = api.json("GET", &format!("/v1/sessions/{id}/suggestion"), None).await;
    let x: Vec<f64> = serde_json::from_value(s["point"].clone()).unwrap();
    let pending = s["candidate"].as_u64().unwrap();

    let (status, v) = api.json("GET", "/v1/sessions/nope/suggestion", None).await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("not_found")));
    let (status, _) = api.json("POST", "/v1/sessions/nope/annotations", Some(json!({}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let cases = [
        (json!({ "y": x, "sigma": [[1.0, 3.0], [3.0, 1.0]] }), StatusCode::UNPROCESSABLE_ENTITY, "invalid_covariance"),
        (json!({ "y": x, "sigma": [[1.0, 0.5], [0.0, 1.0]] }), StatusCode::UNPROCESSABLE_ENTITY, "invalid_covariance"),
        (json!({ "y": x, "sigma": [[1.0]] }), StatusCode::UNPROCESSABLE_ENTITY, "dimension_mismatch"),
        (json!({ "y": [70.0, 3.0], "ellipse": { "radii": [2.0, 2.0] } }), StatusCode::UNPROCESSABLE_ENTITY, "outside_domain"),
        (json!({ "y": x }), StatusCode::UNPROCESSABLE_ENTITY, "missing_uncertainty"),
        (json!({ "y": x, "sigma": "wide" }), StatusCode::UNPROCESSABLE_ENTITY, "invalid_payload"),
        (json!({ "y": x, "ellipse": { "radii": [2.0, 2.0] }, "expected_count": 3 }), StatusCode::CONFLICT, "stale_state"),
        (json!({ "y": x, "ellipse": { "radii": [2.0, 2.0] }, "candidate": pending + 1 }), StatusCode::CONFLICT, "stale_suggestion"),
    ];
    for (body, status, code) in cases {
        let (got, v) = api.json("POST", &ann, Some(body.clone())).await;
        assert_eq!((got, v["error"]["code"].as_str()), (status, Some(code)), "{body}");
    }
    let (status, bytes, _) = {
        let req = Request::builder()
            .method("POST")
            .uri(&ann)
            .body(Body::from("{\"y\": [1,"))
            .unwrap();
        let resp = api.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        (status, resp.into_body().collect().await.unwrap().to_bytes(), ())
    };
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&bytes).contains("malformed_json"));

    // none of the rejected payloads changed the session
    let (_, v) = api.json("GET", &format!("/v1/sessions/{id}"), None).await;
    assert_eq!(v["count"], 0);

    // the second of two writers with the same view is refused
    let body = json!({ "y": x, "ellipse": { "radii": [2.0, 2.0] }, "expected_count": 0 });
    assert_eq!(api.json("POST", &ann, Some(body.clone())).await.0, StatusCode::CREATED);
    assert_eq!(api.json("POST", &ann, Some(body)).await.0, StatusCode::CONFLICT);

    let (status, v) = api.json("POST", "/v1/sessions", Some(json!({ "kernel": 3 }))).await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_payload")));
    let (status, v) = api.json("POST", "/v1/sessions", Some(json!({}))).await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("missing_domain")));
}

#[tokio::test]
async fn skip_trace_and_budget() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(dir.path());
    let mut body = create_body("random", 2);
    body["budget"] = json!(2);
    let id = create(&api, body).await;
    let (_, s0) = api.json("GET", &format!("/v1/sessions/{id}/suggestion"), None).await;
    let (status, s1) = api.json("POST", &format!("/v1/sessions/{id}/skip"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(s1["iteration"], 1);
    assert_eq!(s1["count"], 0);
    assert_ne!(s1["candidate"], s0["candidate"]);

    for _ in 0..2 {
        let (_, s) = api.json("GET", &format!("/v1/sessions/{id}/suggestion"), None).await;
        let x: Vec<f64> = serde_json::from_value(s["point"].clone()).unwrap();
        let (status, _) = api
            .json(
                "POST",
                &format!("/v1/sessions/{id}/annotations"),
                Some(json!({ "y": x, "ellipse": { "radii": [3.0, 1.5], "angle": 0.3 } })),
            )
            .await;
        assert_eq!(status, StatusCode::CREATED);
    }
    let (_, s) = api.json("GET", &format!("/v1/sessions/{id}/suggestion"), None).await;
    assert_eq!(s["done"], true);
    assert_eq!(s["candidate"], Value::Null);
    let (status, v) = api.json("POST", &format!("/v1/sessions/{id}/skip"), None).await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("session_complete")));

    let (status, csv, ctype) = api.call("GET", &format!("/v1/sessions/{id}/trace"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("text/csv"));
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,strategy,x0,x1,delta_h,wall_ms");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,random,"));

    let (_, v) = api.json("GET", &format!("/v1/sessions/{id}/annotations"), None).await;
    assert_eq!(v["annotations"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn maps_render_as_png() {
    let dir = tempfile::tempdir().unwrap();
    let api = Api::new(dir.path());
    let geometry = GridGeometry::pixels(vec![64, 64]).unwrap();
    TransformField::from_displacement_fn(geometry, |x| vec![0.02 * x[1], -0.5])
        .write_raw(&dir.path().join("candidate"))
        .unwrap();
    let id = create(&api, create_body("entropy", 0)).await;
    let (_, s) = api.json("GET", &format!("/v1/sessions/{id}/suggestion"), None).await;
    let x: Vec<f64> = serde_json::from_value(s["point"].clone()).unwrap();
    api.json(
        "POST",
        &format!("/v1/sessions/{id}/annotations"),
        Some(json!({ "y": x, "ellipse": { "radii": [2.0, 2.0] } })),
    )
    .await;

    for (uri, side) in [
        (format!("/v1/sessions/{id}/maps/entropy"), 64),
        (format!("/v1/sessions/{id}/maps/entropy?stride=4"), 16),
        (format!("/v1/sessions/{id}/maps/error?transform=candidate.json"), 64),
        (format!("/v1/sessions/{id}/maps/blended?transform=candidate.json&stride=2"), 32),
    ] {
        let (status, png, ctype) = api.call("GET", &uri, None).await;
        assert_eq!(status, StatusCode::OK, "{uri}");
        assert_eq!(ctype.as_deref(), Some("image/png"));
        let img = image::load_from_memory(&png).unwrap();
        assert_eq!((img.width(), img.height()), (side, side), "{uri}");
    }
    let (status, v) = api.json("GET", &format!("/v1/sessions/{id}/maps/error"), None).await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("missing_transform")));
    let (status, _) = api.json("GET", &format!("/v1/sessions/{id}/maps/heat"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, v) = api
        .json("GET", &format!("/v1/sessions/{id}/maps/error?transform=../candidate.json"), None)
        .await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_transform")));
}

fn write_checkerboard(path: &Path, n: u32) {
    let img = image::GrayImage::from_fn(n, n, |x, y| image::Luma([if (x / 16 + y / 16) % 2 == 0 { 30 } else { 220 }]));
    img.save(path).unwrap();
}

#[tokio::test]
async fn image_sessions_and_tiles() {
    let dir = tempfile::tempdir().unwrap();
    write_checkerboard(&dir.path().join("fixed.png"), 64);
    write_checkerboard(&dir.path().join("moving.png"), 64);
    let api = Api::new(dir.path());

    let (status, v) = api
        .json(
            "POST",
            "/v1/sessions",
            Some(json!({ "fixed_image": "fixed.png", "moving_image": "moving.png", "seed": 1 })),
        )
        .await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    assert_eq!(v["shape"], json!([64, 64]));
    let corners = v["candidates"].as_array().unwrap();
    assert!(!corners.is_empty());
    // checkerboard corners sit on multiples of 16 px
    for c in corners {
        for coord in c.as_array().unwrap() {
            let r = coord.as_f64().unwrap() % 16.0;
            assert!(r.min(16.0 - r) <= 2.0, "{c}");
        }
    }
    assert_eq!(v["next"]["done"], false);

    let (status, png, ctype) = api
        .call("GET", "/v1/images/fixed.png/tile?x=8&y=8&width=20&height=12", None)
        .await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    let tile = image::load_from_memory(&png).unwrap().to_luma8();
    assert_eq!(tile.dimensions(), (20, 12));
    assert_eq!(tile.get_pixel(0, 0).0[0], 30);
    assert_eq!(tile.get_pixel(8, 0).0[0], 220);

    assert_eq!(api.call("GET", "/v1/images/missing.png/tile", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(api.call("GET", "/v1/images/..%2Ffixed.png/tile", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(
        api.call("GET", "/v1/images/fixed.png/tile?x=100", None).await.0,
        StatusCode::UNPROCESSABLE_ENTITY
    );
    let (status, v) = api.json("POST", "/v1/sessions", Some(json!({ "fixed_image": "absent.png" }))).await;
    assert_eq!((status, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("invalid_image")));
}
