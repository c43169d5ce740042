use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use mangaflow::gateway::{GatewayRequest, GatewayResponse, ModelGateway, Payload, TransportError};
use mangaflow::pipeline::{Project, StoryInput, UserInputs};
use mangaflow::render::StubBackend;
use mangaflow::story::ProjectConfig;
use mangaflow_cli::server::{router, AppState, LayoutResponse, LettersResponse};
use mangaflow_cli::Backend;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};
use tempfile::TempDir;

/// Only anchor detection reaches the network after the first run.
fn detector(req: &GatewayRequest) -> Result<GatewayResponse, TransportError> {
    match &req.payload {
        Payload::Multimodal { .. } => Ok(GatewayResponse::Text(r#"{"anchors": []}"#.into())),
        _ => Err(TransportError::Fatal("unexpected request".into())),
    }
}

struct Server {
    _dir: TempDir,
    base: String,
    http: Client,
}

impl Server {
    fn start() -> Self {
        let demo = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/demo");
        let dir = TempDir::new().unwrap();
        let root = dir.path().join("demo");
        let config = ProjectConfig::load(&demo.join("config.json")).unwrap();
        let prompt = std::fs::read_to_string(demo.join("prompt.txt")).unwrap();
        let project = Project::init(&root, &config, &StoryInput::Prompt(prompt), &UserInputs::default()).unwrap();
        let replay = ModelGateway::replay(demo.join("cassette.json")).unwrap();
        project.generate(&replay, &StubBackend).unwrap();

        let gateway = Arc::new(ModelGateway::record(dir.path().join("edits.json"), Arc::new(detector)).unwrap());
        let state = Arc::new(AppState::new(project, gateway, Backend::Stub));
        let (tx, rx) = std::sync::mpsc::channel::<SocketAddr>();
        std::thread::spawn(move || {
            let rt = tokio::runtime::Runtime::new().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
                tx.send(listener.local_addr().unwrap()).unwrap();
                axum::serve(listener, router(state)).await.unwrap();
            });
        });
        let addr = rx.recv().unwrap();
        Self {
            _dir: dir,
            base: format!("http://{addr}/v1"),
            http: Client::builder().timeout(Duration::from_secs(30)).build().unwrap(),
        }
    }

    fn get(&self, path: &str) -> reqwest::blocking::Response {
        self.http.get(format!("{}{path}", self.base)).send().unwrap()
    }

    fn json(&self, path: &str) -> Value {
        let r = self.get(path);
        assert_eq!(r.status(), StatusCode::OK, "{path}");
        r.json().unwrap()
    }

    fn put(&self, path: &str, body: &Value) -> reqwest::blocking::Response {
        self.http.put(format!("{}{path}", self.base)).json(body).send().unwrap()
    }

    fn post(&self, path: &str) -> reqwest::blocking::Response {
        self.http.post(format!("{}{path}", self.base)).send().unwrap()
    }
}

fn assert_error(r: reqwest::blocking::Response, status: StatusCode, stage: &str) -> Value {
    assert_eq!(r.status(), status);
    let body: Value = r.json().unwrap();
    assert_eq!(body["error"]["stage"], stage, "{body}");
    assert!(body["error"]["kind"].is_string());
    assert!(!body["error"]["message"].as_str().unwrap().is_empty());
    body
}

fn panel_shas(project: &Value, page: usize) -> Vec<(String, String)> {
    project["pages"][page]["assets"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| (a["panel_id"].as_str().unwrap().into(), a["image_sha256"].as_str().unwrap().into()))
        .collect()
}

#[test]
fn project_snapshot_and_images() {
    let s = Server::start();
    let p = s.json("/project");
    assert_eq!(p["pages"].as_array().unwrap().len(), 2);
    assert_eq!(p["comic_done"], true);
    assert_eq!(p["pages"][0]["flags"], json!({"layout": true, "render": true, "compose": true, "letter": true}));

    let r = s.get("/pages/1/image");
    assert_eq!(r.status(), StatusCode::OK);
    assert_eq!(r.headers()["content-type"], "image/png");
    let img = image::load_from_memory(&r.bytes().unwrap()).unwrap();
    assert_eq!((img.width(), img.height()), (p["config"]["page_px"][0].as_u64().unwrap() as u32, p["config"]["page_px"][1].as_u64().unwrap() as u32));

    assert_error(s.get("/pages/2/image"), StatusCode::NOT_FOUND, "page");
    assert_error(s.get("/pages/9/layout"), StatusCode::NOT_FOUND, "page");
}

#[test]
fn layout_edits_are_projected_and_reset_downstream() {
    let s = Server::start();
    let before: LayoutResponse = s.get("/pages/0/layout").json().unwrap();
    assert_eq!(before.layout.len(), 4);

    // Overlapping panels come back as a clean tiling.
    let overlapping = json!({"layout": {"page_index": 0, "panels": [
        {"id": "x", "x": 0.0, "y": 0.0, "w": 0.7, "h": 0.6},
        {"id": "y", "x": 0.5, "y": 0.0, "w": 0.5, "h": 0.6},
        {"id": "z", "x": 0.0, "y": 0.5, "w": 0.6, "h": 0.5},
        {"id": "w", "x": 0.5, "y": 0.5, "w": 0.5, "h": 0.5}]}});
    let r = s.put("/pages/0/layout", &overlapping);
    assert_eq!(r.status(), StatusCode::OK);
    let after: LayoutResponse = r.json().unwrap();
    assert_eq!(after.layout.len(), 4);
    assert_eq!(after.layout.overlap(), 0.0);
    assert!(after.layout.coverage() >= 0.999);
    assert!(after.version > before.version);
    assert!(after.page_version > before.page_version);
    assert!(after.flags.layout && !after.flags.compose && !after.flags.letter);
    let ids: Vec<&str> = after.layout.panels.iter().map(|p| p.id.as_str()).collect();
    assert_eq!(ids, ["p0_0", "p0_1", "p0_2", "p0_3"]);

    // The other page is untouched.
    let other = s.json("/project");
    assert_eq!(other["pages"][1]["flags"]["letter"], true);

    let r = s.post("/pages/0/recompose");
    assert_eq!(r.status(), StatusCode::OK);
    let body: Value = r.json().unwrap();
    assert!(body["version"].as_u64().unwrap() > after.version);
    assert_eq!(body["page"]["lettered"], true);
    let again: LayoutResponse = s.get("/pages/0/layout").json().unwrap();
    assert!(again.flags.compose && again.flags.letter);
}

#[test]
fn invalid_bodies_get_structured_errors() {
    let s = Server::start();
    let version = s.json("/project")["version"].clone();
    let duplicate = json!({"page_index": 0, "panels": [
        {"id": "a", "x": 0.0, "y": 0.0, "w": 1.0, "h": 0.5},
        {"id": "a", "x": 0.0, "y": 0.5, "w": 1.0, "h": 0.5}]});
    let body = assert_error(s.put("/pages/0/layout", &duplicate), StatusCode::UNPROCESSABLE_ENTITY, "layout");
    assert_eq!(body["error"]["kind"], "validation");

    let r = s
        .http
        .put(format!("{}/pages/0/layout", s.base))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .unwrap();
    assert_error(r, StatusCode::UNPROCESSABLE_ENTITY, "layout");
    assert_error(s.put("/pages/0/letters", &json!({"elements": 3})), StatusCode::UNPROCESSABLE_ENTITY, "letter");
    assert_error(s.post("/pages/0/panels/nope/rerender"), StatusCode::UNPROCESSABLE_ENTITY, "render");
    assert_eq!(s.json("/project")["version"], version);
}

#[test]
fn rerender_changes_one_panel() {
    let s = Server::start();
    let before = panel_shas(&s.json("/project"), 0);
    let r = s.post("/pages/0/panels/p0_2/rerender");
    assert_eq!(r.status(), StatusCode::OK);
    let body: Value = r.json().unwrap();
    assert_eq!(body["asset"]["panel_id"], "p0_2");
    let after = panel_shas(&s.json("/project"), 0);
    for ((id, a), (_, b)) in before.iter().zip(&after) {
        assert_eq!(a == b, id != "p0_2", "{id}");
    }
    assert_eq!(panel_shas(&s.json("/project"), 1).len(), 3);
}

#[test]
fn letter_edits_round_trip() {
    let s = Server::start();
    let got: LettersResponse = s.get("/pages/1/letters").json().unwrap();
    assert!(!got.elements.is_empty());

    let mut elements = got.elements.clone();
    elements[0].text = "Somewhere else entirely.".into();
    elements[0].bubble.x *= 0.5;
    let r = s.put("/pages/1/letters", &json!({ "elements": elements }));
    assert_eq!(r.status(), StatusCode::OK);
    let put: LettersResponse = r.json().unwrap();
    assert_eq!(put.elements[0].text, "Somewhere else entirely.");
    assert!(put.version > got.version);
    assert!(put.page_version > got.page_version);
    let read: LettersResponse = s.get("/pages/1/letters").json().unwrap();
    assert_eq!(read.elements, put.elements);

    let mut bad = elements.clone();
    bad[0].bubble.x = 0.95;
    bad[0].bubble.w = 0.2;
    let body = assert_error(s.put("/pages/1/letters", &json!(bad)), StatusCode::UNPROCESSABLE_ENTITY, "letter");
    assert!(body["error"]["message"].as_str().unwrap().contains("within the page"));
}

#[test]
fn events_long_poll() {
    let s = Server::start();
    let last = s.json("/project")["last_event"].as_u64().unwrap();
    assert!(last > 0);
    let history = s.json("/events?since=0&timeout_ms=10");
    assert_eq!(history["last"], last);

    let start = Instant::now();
    let idle = s.json(&format!("/events?since={last}&timeout_ms=200"));
    assert!(idle["events"].as_array().unwrap().is_empty());
    assert_eq!(idle["last"], last);
    assert!(start.elapsed() >= Duration::from_millis(150));

    let poll = {
        let (http, url) = (s.http.clone(), format!("{}/events?since={last}&timeout_ms=20000", s.base));
        std::thread::spawn(move || http.get(url).send().unwrap().json::<Value>().unwrap())
    };
    std::thread::sleep(Duration::from_millis(100));
    assert_eq!(s.post("/pages/1/panels/p1_0/rerender").status(), StatusCode::OK);
    let got = poll.join().unwrap();
    let events = got["events"].as_array().unwrap();
    assert!(!events.is_empty());
    assert!(events.iter().all(|e| e["seq"].as_u64().unwrap() > last));
    let all = s.json(&format!("/events?since={last}&timeout_ms=0"));
    assert!(all["events"].as_array().unwrap().iter().any(|e| e["stage"] == "render" && e["panel"] == "p1_0"));
}
