use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tapid_core::plugin::{
    ParamMap, Plugin, PluginDescriptor, PluginFactory, PluginResult, ResultKind, SourceAddrResult,
};
use tapid_core::testkit::{synthesize, write_pcap, Host};
use tapid_core::{CapturedFrame, MacAddr, Registry};
use tapid_service::{router, AppState, ServiceConfig};
use tower::ServiceExt;

const TARGET: Ipv4Addr = Ipv4Addr::new(192, 0, 2, 7);

struct Fixture {
    dir: tempfile::TempDir,
    pcap: PathBuf,
}

impl Fixture {
    /// 400 frames over `duration_ns`: every fourth from the target, the rest
    /// from three other hosts.
    fn new(duration_ns: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let pcap = dir.path().join("traffic.pcap");
        let target = Host {
            mac: MacAddr([0x02, 0, 0, 0, 0, 0x77]),
            ip: Some(TARGET.into()),
        };
        let others = [Host::v4(21), Host::v4(22), Host::v4(23)];
        let frames = synthesize(400, duration_ns, 600, |i| {
            if i % 4 == 0 {
                target
            } else {
                others[i % 3]
            }
        });
        write_pcap(&pcap, &frames, 128).unwrap();
        Self { dir, pcap }
    }

    fn audit_path(&self) -> PathBuf {
        self.dir.path().join("audit.log")
    }

    fn app(&self) -> Router {
        app_with(Registry::with_defaults(), self.dir.path())
    }

    fn session_body(&self, realtime: bool) -> Value {
        json!({
            "logging_enabled": true,
            "entered_now": "2015-06-01 12:00",
            "source": { "replay": self.pcap, "realtime": realtime },
            "audit_path": self.audit_path(),
        })
    }
}

fn app_with(registry: Registry, audit_dir: &Path) -> Router {
    router(AppState::new(
        registry,
        ServiceConfig {
            audit_dir: audit_dir.to_path_buf(),
            stream_hz: 4.0,
        },
    ))
}

async fn send(
    app: &Router,
    method: Method,
    uri: &str,
    body: Option<Value>,
) -> (StatusCode, Vec<u8>) {
    let body = body.map_or_else(Body::empty, |b| Body::from(b.to_string()));
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body);
    let resp = app.clone().oneshot(req.unwrap()).await.unwrap();
    let status = resp.status();
    (
        status,
        resp.into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec(),
    )
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = send(app, method, uri, body).await;
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap()
    };
    (status, value)
}

fn code(v: &Value) -> &str {
    v["error"]["code"].as_str().unwrap_or("")
}

async fn wait_for_end(app: &Router, run: u64) -> Value {
    for _ in 0..500 {
        let (_, state) = call(app, Method::GET, &format!("/runs/{run}/state"), None).await;
        if !state["stream_terminal"].is_null() {
            return state;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("run {run} never reached the end of its stream");
}

fn known_ip_run() -> Value {
    json!({ "plugin_id": "known_ip", "params": { "known_address": TARGET.to_string() } })
}

#[tokio::test]
async fn plugins_are_listed_without_a_session() {
    let fx = Fixture::new(1_000_000);
    let (status, body) = call(&fx.app(), Method::GET, "/plugins", None).await;
    assert_eq!(status, StatusCode::OK);
    let ids: Vec<&str> = body
        .as_array()
        .unwrap()
        .iter()
        .map(|d| d["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, ["source_addr", "known_ip"]);
    let known = &body[1];
    assert_eq!(known["parameters"][0]["name"], "known_address");
    assert_eq!(known["parameters"][0]["required"], true);
}

struct FrameCounter(u64);

impl Plugin for FrameCounter {
    fn observe(&mut self, _: &CapturedFrame) {
        self.0 += 1;
    }
    fn snapshot(&self) -> PluginResult {
        PluginResult::AddressList(SourceAddrResult {
            records: Vec::new(),
            total_frames: self.0,
            undecodable_frames: 0,
        })
    }
    fn finalize(&self) -> PluginResult {
        self.snapshot()
    }
    fn scrub(&mut self) {}
}

struct FrameCounterFactory;

impl PluginFactory for FrameCounterFactory {
    fn descriptor(&self) -> PluginDescriptor {
        PluginDescriptor {
            id: "frame_counter".into(),
            display_name: "FrameCounter".into(),
            parameters: Vec::new(),
            result_kind: ResultKind::AddressList,
        }
    }
    fn instantiate(&self, _: &ParamMap) -> Box<dyn Plugin> {
        Box::new(FrameCounter(0))
    }
}

#[tokio::test]
async fn registered_test_plugin_is_listed_and_runs() {
    let fx = Fixture::new(1_000_000);
    let mut registry = Registry::with_defaults();
    registry.register(Box::new(FrameCounterFactory)).unwrap();
    let app = app_with(registry, fx.dir.path());
    let (_, body) = call(&app, Method::GET, "/plugins", None).await;
    assert_eq!(body.as_array().unwrap().len(), 3);

    call(&app, Method::POST, "/session", Some(fx.session_body(false))).await;
    let (status, run) = call(
        &app,
        Method::POST,
        "/runs",
        Some(json!({ "plugin_id": "frame_counter" })),
    )
    .await;
    assert_eq!(status, StatusCode::CREATED);
    let run = run["run_id"].as_u64().unwrap();
    wait_for_end(&app, run).await;
    let (_, stopped) = call(&app, Method::POST, &format!("/runs/{run}/stop"), None).await;
    assert_eq!(stopped["result"]["total_frames"], 400);
}

#[tokio::test]
async fn session_creation_rules() {
    let fx = Fixture::new(1_000_000);
    let app = fx.app();

    let mut no_time = fx.session_body(false);
    no_time.as_object_mut().unwrap().remove("entered_now");
    let (status, body) = call(&app, Method::POST, "/session", Some(no_time)).await;
    assert_eq!(
        (status, code(&body)),
        (StatusCode::BAD_REQUEST, "MissingTimeAnchor")
    );
    assert!(!fx.audit_path().exists());

    let mut bad_time = fx.session_body(false);
    bad_time["entered_now"] = json!("yesterday");
    let (_, body) = call(&app, Method::POST, "/session", Some(bad_time)).await;
    assert_eq!(code(&body), "InvalidTime");

    let (_, body) = call(
        &app,
        Method::POST,
        "/session",
        Some(json!({ "logging_enabled": false, "source": {} })),
    )
    .await;
    assert_eq!(code(&body), "BadRequest");

    let not_pcap = fx.dir.path().join("not.pcap");
    std::fs::write(&not_pcap, [0u8; 64]).unwrap();
    let body = json!({ "logging_enabled": false, "source": { "replay": not_pcap } });
    let (status, body) = call(&app, Method::POST, "/session", Some(body)).await;
    assert_eq!(
        (status, code(&body)),
        (StatusCode::UNPROCESSABLE_ENTITY, "BadFileMagic")
    );

    let body = json!({ "logging_enabled": false, "source": { "replay": fx.dir.path().join("missing.pcap") } });
    let (_, body) = call(&app, Method::POST, "/session", Some(body)).await;
    assert_eq!(code(&body), "SourceUnreadable");

    let body =
        json!({ "logging_enabled": false, "source": { "replay": fx.pcap, "snap_length": 10 } });
    let (_, body) = call(&app, Method::POST, "/session", Some(body)).await;
    assert_eq!(code(&body), "InvalidSnapLength");

    let (status, handle) = call(&app, Method::POST, "/session", Some(fx.session_body(false))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(handle["logging_enabled"], true);
    assert_eq!(handle["entered_time"], "2015-06-01 12:00");
    assert_eq!(handle["active_run"], Value::Null);

    let (status, body) = call(&app, Method::POST, "/session", Some(fx.session_body(false))).await;
    assert_eq!(
        (status, code(&body)),
        (StatusCode::CONFLICT, "SessionAlreadyActive")
    );

    let (_, got) = call(&app, Method::GET, "/session", None).await;
    assert_eq!(got["session_id"], handle["session_id"]);
}

#[tokio::test]
async fn empty_session_exports_header_and_start_only() {
    let fx = Fixture::new(1_000_000);
    let app = fx.app();
    let (_, body) = call(&app, Method::GET, "/audit/export", None).await;
    assert_eq!(code(&body), "NoActiveSession");

    call(&app, Method::POST, "/session", Some(fx.session_body(false))).await;
    let (status, bytes) = send(&app, Method::GET, "/audit/export", None).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(bytes).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].contains("tapid-audit"));
    assert!(lines[1].contains("\"kind\":\"SessionStart\""));
    assert_eq!(lines[2], r#"{"trailer":{"chain_status":"Intact"}}"#);
    // The export is the file, verbatim, plus the trailer.
    let on_disk = std::fs::read_to_string(fx.audit_path()).unwrap();
    assert_eq!(text, format!("{on_disk}{}\n", lines[2]));
}

#[tokio::test]
async fn full_lifecycle_over_http() {
    let fx = Fixture::new(300_000_000);
    let app = fx.app();
    call(&app, Method::POST, "/session", Some(fx.session_body(true))).await;

    let (_, body) = call(
        &app,
        Method::POST,
        "/runs",
        Some(json!({ "plugin_id": "known_ip" })),
    )
    .await;
    assert_eq!(code(&body), "MissingParameter");
    let bad = json!({ "plugin_id": "known_ip", "params": { "known_address": "300.1.1.1" } });
    let (_, body) = call(&app, Method::POST, "/runs", Some(bad)).await;
    assert_eq!(code(&body), "InvalidParameterValue");
    let (status, body) = call(
        &app,
        Method::POST,
        "/runs",
        Some(json!({ "plugin_id": "nope" })),
    )
    .await;
    assert_eq!(
        (status, code(&body)),
        (StatusCode::NOT_FOUND, "UnknownPlugin")
    );

    let (status, run) = call(&app, Method::POST, "/runs", Some(known_ip_run())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(run["status"], "Running");
    let run_id = run["run_id"].as_u64().unwrap();

    let (status, body) = call(&app, Method::POST, "/runs", Some(known_ip_run())).await;
    assert_eq!(
        (status, code(&body)),
        (StatusCode::CONFLICT, "RunStillActive")
    );
    let (_, body) = call(
        &app,
        Method::POST,
        &format!("/runs/{run_id}/relevance"),
        Some(json!({"verdict": "relevant"})),
    )
    .await;
    assert_eq!(code(&body), "RunStillActive");

    // Totals never go down while the replay is paced in real time.
    let mut last = 0;
    let mut polls = 0;
    loop {
        let (_, state) = call(&app, Method::GET, &format!("/runs/{run_id}/state"), None).await;
        let total = state["live_counters"]["total"].as_u64().unwrap();
        assert!(total >= last, "{total} < {last}");
        last = total;
        polls += 1;
        if !state["stream_terminal"].is_null() {
            break;
        }
        tokio::time::sleep(Duration::from_millis(15)).await;
    }
    assert!(polls > 3);
    assert_eq!(last, 400);

    let (s1, first) = call(&app, Method::POST, &format!("/runs/{run_id}/stop"), None).await;
    let (s2, second) = call(&app, Method::POST, &format!("/runs/{run_id}/stop"), None).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(first, second);
    assert_eq!(first["text"], "matched=100 total=400 address=192.0.2.7\n");
    assert_eq!(first["stream_terminal"]["terminal"], "end_of_file");

    let (_, marked) = call(
        &app,
        Method::POST,
        &format!("/runs/{run_id}/relevance"),
        Some(json!({"verdict": "relevant"})),
    )
    .await;
    assert_eq!(marked["destruction"], Value::Null);
    let (status, body) = call(
        &app,
        Method::POST,
        &format!("/runs/{run_id}/relevance"),
        Some(json!({"verdict": "irrelevant"})),
    )
    .await;
    assert_eq!(
        (status, code(&body)),
        (StatusCode::CONFLICT, "RelevanceAlreadyMarked")
    );

    // Escalate to the address listing, then discard it.
    let escalate = json!({ "plugin_id": "source_addr", "escalated_from": run_id });
    let (_, run2) = call(&app, Method::POST, "/runs", Some(escalate)).await;
    assert_eq!(run2["escalated_from"], run_id);
    let run2 = run2["run_id"].as_u64().unwrap();
    wait_for_end(&app, run2).await;
    let (_, listing) = call(&app, Method::POST, &format!("/runs/{run2}/stop"), None).await;
    assert_eq!(listing["text"].as_str().unwrap().lines().count(), 4);
    let (_, marked) = call(
        &app,
        Method::POST,
        &format!("/runs/{run2}/relevance"),
        Some(json!({"verdict": "irrelevant"})),
    )
    .await;
    assert_eq!(marked["destruction"]["destroyed_record_count"], 4);
    let (_, state) = call(&app, Method::GET, &format!("/runs/{run2}/state"), None).await;
    assert!(!state.to_string().contains("10.0.0."));

    // Rerun the first run over the same source.
    let (status, run3) = call(&app, Method::POST, &format!("/runs/{run_id}/rerun"), None).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(run3["rerun_of"], run_id);
    assert_eq!(run3["parameters"]["known_address"], "192.0.2.7");
    let run3 = run3["run_id"].as_u64().unwrap();
    call(&app, Method::POST, &format!("/runs/{run3}/stop"), None).await;

    let (_, bytes) = send(&app, Method::GET, "/audit/export", None).await;
    let text = String::from_utf8(bytes).unwrap();
    assert!(text.ends_with("{\"trailer\":{\"chain_status\":\"Intact\"}}\n"));
    assert!(text.contains("DestructionRecorded"));
    for other in [Host::v4(21), Host::v4(22), Host::v4(23)] {
        assert!(!text.contains(&other.ip.unwrap().to_string()));
        assert!(!text.contains(&other.mac.to_string()));
    }
    let kinds: Vec<String> = text
        .lines()
        .skip(1)
        .filter_map(|l| serde_json::from_str::<Value>(l).ok())
        .filter_map(|v| v["kind"].as_str().map(str::to_string))
        .collect();
    assert_eq!(
        kinds,
        [
            "SessionStart",
            "PluginSelected",
            "ParameterEntered",
            "RunStarted",
            "RunStopped",
            "ResultRecorded",
            "RelevanceMarked",
            "PluginSelected",
            "RunStarted",
            "RunStopped",
            "RelevanceMarked",
            "DestructionRecorded",
            "Rerun",
            "PluginSelected",
            "ParameterEntered",
            "RunStarted",
            "RunStopped",
        ]
    );

    let (_, body) = call(&app, Method::GET, "/runs/99/state", None).await;
    assert_eq!(code(&body), "UnknownRun");
}

fn sse_events(text: &str) -> Vec<Value> {
    text.split("\n\n")
        .filter(|block| block.contains("event: snapshot"))
        .filter_map(|block| block.lines().find_map(|l| l.strip_prefix("data: ")))
        .map(|d| serde_json::from_str(d).unwrap())
        .collect()
}

#[tokio::test]
async fn counter_stream_is_monotone_and_ends_with_the_result() {
    let fx = Fixture::new(400_000_000);
    let app = fx.app();
    call(&app, Method::POST, "/session", Some(fx.session_body(true))).await;
    let (_, run) = call(&app, Method::POST, "/runs", Some(known_ip_run())).await;
    let run_id = run["run_id"].as_u64().unwrap();

    let reader = {
        let app = app.clone();
        tokio::spawn(async move {
            send(
                &app,
                Method::GET,
                &format!("/runs/{run_id}/stream?hz=40"),
                None,
            )
            .await
        })
    };
    wait_for_end(&app, run_id).await;
    tokio::time::sleep(Duration::from_millis(60)).await;
    call(&app, Method::POST, &format!("/runs/{run_id}/stop"), None).await;
    let (status, bytes) = tokio::time::timeout(Duration::from_secs(5), reader)
        .await
        .unwrap()
        .unwrap();
    assert_eq!(status, StatusCode::OK);

    let events = sse_events(&String::from_utf8(bytes).unwrap());
    assert!(events.len() >= 5, "{} events", events.len());
    let totals: Vec<u64> = events
        .iter()
        .map(|e| e["live_counters"]["total"].as_u64().unwrap())
        .collect();
    assert!(totals.windows(2).all(|w| w[0] <= w[1]), "{totals:?}");
    let last = events.last().unwrap();
    assert_eq!(last["status"], "Stopped");
    assert_eq!(last["live_counters"]["matched"], 100);
    assert_eq!(*totals.last().unwrap(), 400);
}

#[tokio::test]
async fn default_stream_rate_is_four_per_second() {
    let fx = Fixture::new(1_000_000_000);
    let app = fx.app();
    call(&app, Method::POST, "/session", Some(fx.session_body(true))).await;
    let (_, run) = call(&app, Method::POST, "/runs", Some(known_ip_run())).await;
    let run_id = run["run_id"].as_u64().unwrap();
    let reader = {
        let app = app.clone();
        tokio::spawn(async move {
            send(&app, Method::GET, &format!("/runs/{run_id}/stream"), None).await
        })
    };
    tokio::time::sleep(Duration::from_millis(1_100)).await;
    call(&app, Method::POST, &format!("/runs/{run_id}/stop"), None).await;
    let (_, bytes) = tokio::time::timeout(Duration::from_secs(5), reader)
        .await
        .unwrap()
        .unwrap();
    let n = sse_events(&String::from_utf8(bytes).unwrap()).len();
    // One immediately, then every 250 ms, plus the final one.
    assert!((4..=7).contains(&n), "{n} events in ~1.1 s");
}

#[tokio::test]
async fn export_of_a_named_file_reports_tampering() {
    let fx = Fixture::new(1_000_000);
    let app = fx.app();
    call(&app, Method::POST, "/session", Some(fx.session_body(false))).await;
    let (_, run) = call(&app, Method::POST, "/runs", Some(known_ip_run())).await;
    let run_id = run["run_id"].as_u64().unwrap();
    wait_for_end(&app, run_id).await;
    call(&app, Method::POST, &format!("/runs/{run_id}/stop"), None).await;
    let (_, ended) = call(&app, Method::DELETE, "/session", None).await;
    assert_eq!(ended["chain_status"], "Intact");

    let log = std::fs::read_to_string(fx.audit_path()).unwrap();
    let tampered = log.replacen("\"known_address\"", "\"known_adddress\"", 1);
    let copy = fx.dir.path().join("copy.log");
    std::fs::write(&copy, tampered).unwrap();
    let uri = format!("/audit/export?path={}", copy.display());
    let (status, bytes) = send(&app, Method::GET, &uri, None).await;
    assert_eq!(status, StatusCode::OK);
    let text = String::from_utf8(bytes).unwrap();
    assert!(
        text.ends_with("{\"trailer\":{\"chain_status\":\"BrokenAt(3)\"}}\n"),
        "{text}"
    );

    let uri = format!(
        "/audit/export?path={}",
        fx.dir.path().join("none.log").display()
    );
    let (status, body) = call(&app, Method::GET, &uri, None).await;
    assert_eq!(
        (status, code(&body)),
        (StatusCode::UNPROCESSABLE_ENTITY, "UnreadableLog")
    );
}

#[tokio::test]
async fn ending_a_session_stops_its_run_and_frees_the_slot() {
    let fx = Fixture::new(2_000_000_000);
    let app = fx.app();
    call(&app, Method::POST, "/session", Some(fx.session_body(true))).await;
    call(&app, Method::POST, "/runs", Some(known_ip_run())).await;
    let (status, ended) = call(&app, Method::DELETE, "/session", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ended["chain_status"], "Intact");
    let log = std::fs::read_to_string(fx.audit_path()).unwrap();
    assert!(log.lines().last().unwrap().contains("RunStopped"));

    let (_, body) = call(&app, Method::GET, "/session", None).await;
    assert_eq!(code(&body), "NoActiveSession");
    let bypass = json!({ "logging_enabled": false, "source": { "replay": fx.pcap } });
    let (status, handle) = call(&app, Method::POST, "/session", Some(bypass)).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(handle["audit_path"], Value::Null);
    let (_, bytes) = send(&app, Method::GET, "/audit/export", None).await;
    assert!(String::from_utf8(bytes)
        .unwrap()
        .contains("LoggingBypassed"));
}

#[tokio::test]
async fn tap_profile_applies_to_every_run() {
    let fx = Fixture::new(1_000_000_000);
    let profile = fx.dir.path().join("profile.toml");
    std::fs::write(&profile, "observation_gaps = [[0, 500000000]]\n").unwrap();
    let app = fx.app();
    let body = json!({ "logging_enabled": false, "source": { "replay": fx.pcap }, "tap_profile": profile });
    let (status, _) = call(&app, Method::POST, "/session", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED);
    let (_, run) = call(&app, Method::POST, "/runs", Some(known_ip_run())).await;
    let run_id = run["run_id"].as_u64().unwrap();
    wait_for_end(&app, run_id).await;
    let (_, stopped) = call(&app, Method::POST, &format!("/runs/{run_id}/stop"), None).await;
    let total = stopped["result"]["total"].as_u64().unwrap();
    assert!((190..=210).contains(&total), "{total}");

    call(&app, Method::DELETE, "/session", None).await;
    std::fs::write(&profile, "link_loss_probability = 7\n").unwrap();
    let body = json!({ "logging_enabled": false, "source": { "replay": fx.pcap }, "tap_profile": profile });
    let (_, body) = call(&app, Method::POST, "/session", Some(body)).await;
    assert_eq!(code(&body), "InvalidProfile");
}

#[test]
fn binary_defaults_to_loopback() {
    let out = std::process::Command::new(env!("CARGO_BIN_EXE_tapid-service"))
        .arg("--help")
        .output()
        .unwrap();
    let help = String::from_utf8(out.stdout).unwrap();
    assert!(help.contains("127.0.0.1:7878"));
    assert!(help.contains("unsafe"));
}
