use serde_json::{json, Value};
use terranav::dynamics::{Action, DiscreteAction};
use terranav::episode::{EpisodeConfig, Environment, StepResult};
use terranav::scene::{traversability_map, SceneRegistry, TraversabilityGrid};
use terranav::sensors::Frame;
use terranav_server::{step_payload, Client, Server, ServerHandle, PROTOCOL_VERSION};

fn start() -> ServerHandle {
    Server::new(SceneRegistry::with_built_ins()).spawn("127.0.0.1:0").unwrap()
}

fn config() -> Value {
    json!({
        "scene": "Forest",
        "difficulty": 0.5,
        "grid_resolution": 0.5,
        "target_distance": 10.0,
        "cameras": [{"resolution": 128}],
        "seed": 11,
    })
}

fn configure(client: &mut Client, cfg: Value) -> Value {
    let (body, _) = client.request("configure", json!({"protocol_version": PROTOCOL_VERSION, "config": cfg})).unwrap();
    assert_eq!(body["status"], "ok", "{body}");
    body
}

fn script(k: usize) -> DiscreteAction {
    [DiscreteAction::Forward, DiscreteAction::Forward, DiscreteAction::TurnLeft, DiscreteAction::Forward, DiscreteAction::TurnRight]
        [k % 5]
}

fn frames_from(blobs: &[Vec<u8>]) -> Vec<Frame> {
    blobs.chunks(3).map(|c| Frame::decode(c).unwrap()).collect()
}

#[test]
fn info_lists_built_in_scenes() {
    let server = start();
    let mut c = Client::connect(server.addr()).unwrap();
    let (body, blobs) = c.request("info", Value::Null).unwrap();
    assert_eq!(body["status"], "ok");
    assert!(blobs.is_empty());
    assert_eq!(body["payload"]["built_in_scenes"], json!(["Meadow", "Forest", "VolcanicField", "ArcticGlacier"]));
    assert_eq!(body["payload"]["protocol_version"], PROTOCOL_VERSION);
    assert_eq!(body["payload"]["discrete_actions"].as_array().unwrap().len(), 5);
}

#[test]
fn wire_session_matches_local_episode() {
    let server = start();
    let mut c = Client::connect(server.addr()).unwrap();
    configure(&mut c, config());

    let cfg: EpisodeConfig = serde_json::from_value(config()).unwrap();
    let mut local = Environment::new(cfg, &SceneRegistry::with_built_ins()).unwrap();

    let (body, blobs) = c.request("reset", json!({"seed": 5})).unwrap();
    let expected = local.reset(Some(5)).unwrap();
    let (mut payload, local_blobs) = step_payload(&expected);
    payload["blob_count"] = json!(local_blobs.len());
    payload["episode"] = serde_json::to_value(local.info().unwrap()).unwrap();
    assert_eq!(body["payload"], payload);
    assert_eq!(blobs, local_blobs);

    for k in 0..20 {
        let action = Action::Discrete(script(k));
        let (body, blobs) = c.request("step", json!({"action": action})).unwrap();
        let Ok(expected) = local.step(action) else {
            assert_eq!(body["error_detail"], "episode_finished");
            continue;
        };
        let (mut payload, local_blobs) = step_payload(&expected);
        payload["blob_count"] = json!(local_blobs.len());
        assert_eq!(body["payload"], payload, "step {k}");

        // Field-for-field through the typed form too, frames included.
        let mut remote: StepResult = serde_json::from_value(body["payload"].clone()).unwrap();
        remote.observation.frames = frames_from(&blobs);
        assert_eq!(remote, expected, "step {k}");
    }
}

#[test]
fn transcripts_are_reproducible() {
    let server = start();
    let run = || {
        let mut c = Client::connect(server.addr()).unwrap();
        let mut transcript = vec![configure(&mut c, config())["payload"]["spaces"].clone()];
        transcript.push(c.request("reset", json!({"seed": 3})).unwrap().0["payload"].clone());
        for k in 0..10 {
            transcript.push(c.request("step", json!({"action": script(k).index()})).unwrap().0);
        }
        transcript
    };
    assert_eq!(run(), run());
}

#[test]
fn step_before_reset_reports_no_active_episode() {
    let server = start();
    let mut c = Client::connect(server.addr()).unwrap();
    let (body, _) = c.request("step", json!({"action": 1})).unwrap();
    assert_eq!(body["status"], "error");
    assert_eq!(body["error_detail"], "no_active_episode");
    configure(&mut c, config());
    let (body, _) = c.request("step", json!({"action": 1})).unwrap();
    assert_eq!(body["error_detail"], "no_active_episode");
}

#[test]
fn malformed_requests_keep_the_session_alive() {
    let server = start();
    let mut c = Client::connect(server.addr()).unwrap();
    for bad in ["not json", r#"{"payload": {}}"#, r#"{"op": "fly"}"#, r#"{"op": "info", "extra": 1}"#] {
        let (body, _) = c.send_line(bad).unwrap();
        assert_eq!(body["status"], "error", "{bad}");
        assert_eq!(body["error_detail"], "malformed_request", "{bad}");
    }
    configure(&mut c, config());
    c.request("reset", Value::Null).unwrap();
    let (body, _) = c.request("step", json!({"action": 7})).unwrap();
    assert_eq!(body["error_detail"], "malformed_request");
    let (body, _) = c.request("step", json!({"action": {"continuous": {"brake": false, "linear_speed": 1.0, "angular_speed": 0.0}}})).unwrap();
    assert_eq!(body["error_detail"], "control_suite_mismatch");
    let (body, _) = c.request("info", Value::Null).unwrap();
    assert_eq!(body["status"], "ok");
}

#[test]
fn version_mismatch_refuses_session() {
    let server = start();
    let mut c = Client::connect(server.addr()).unwrap();
    let (body, _) = c.request("configure", json!({"protocol_version": PROTOCOL_VERSION + 1, "config": config()})).unwrap();
    assert_eq!(body["error_detail"], "protocol_version_mismatch");
    assert!(c.request("info", Value::Null).is_err(), "connection should be closed");
}

#[test]
fn unknown_scene_and_reset_before_configure_are_errors() {
    let server = start();
    let mut c = Client::connect(server.addr()).unwrap();
    let (body, _) = c.request("reset", Value::Null).unwrap();
    assert_eq!(body["error_detail"], "not_configured");
    let mut cfg = config();
    cfg["scene"] = json!("Moon");
    let (body, _) = c.request("configure", json!({"protocol_version": PROTOCOL_VERSION, "config": cfg})).unwrap();
    assert_eq!(body["error_detail"], "unknown_scene");
}

#[test]
fn extension_calls() {
    let server = start();
    let mut c = Client::connect(server.addr()).unwrap();
    configure(&mut c, config());
    c.request("reset", json!({"seed": 2})).unwrap();

    let cfg: EpisodeConfig = serde_json::from_value(config()).unwrap();
    let mut local = Environment::new(cfg, &SceneRegistry::with_built_ins()).unwrap();
    local.reset(Some(2)).unwrap();
    let scene = local.scene().unwrap();

    let (body, _) = c.request("call", json!({"name": "get_scene_instance"})).unwrap();
    let objects = body["payload"]["placed_objects"].as_array().expect("object list");
    assert_eq!(objects.len(), scene.placed_objects().len());

    let (body, _) = c.request("call", json!({"name": "get_traversability_map"})).unwrap();
    let grid: TraversabilityGrid = serde_json::from_value(body["payload"].clone()).unwrap();
    assert_eq!(grid, traversability_map(scene, 0.5, 35.0));

    let (body, _) = c.request("call", json!({"name": "nonexistent"})).unwrap();
    assert_eq!(body["error_detail"], "unknown_endpoint");
}

#[test]
fn capture_returns_configured_frames() {
    let server = start();
    let mut c = Client::connect(server.addr()).unwrap();
    let mut cfg = config();
    cfg["cameras"] = json!([{"resolution": 128}, {"resolution": 128, "relative_yaw": 90.0}]);
    configure(&mut c, cfg);
    c.request("reset", json!({"seed": 1})).unwrap();
    let (body, blobs) = c.request("capture", Value::Null).unwrap();
    assert_eq!(body["payload"]["blob_count"], 6);
    let frames = frames_from(&blobs);
    assert_eq!(frames.len(), 2);
    assert_ne!(frames[0], frames[1]);
    let (_, blobs) = c.request("capture", json!({"camera": {"resolution": 256}})).unwrap();
    assert_eq!(frames_from(&blobs)[0].width, 256);
}

#[test]
fn sessions_are_isolated_and_capped() {
    let server = Server::new(SceneRegistry::with_built_ins()).with_max_sessions(2).spawn("127.0.0.1:0").unwrap();
    let mut a = Client::connect(server.addr()).unwrap();
    let mut b = Client::connect(server.addr()).unwrap();
    configure(&mut a, config());
    configure(&mut b, config());
    a.request("reset", json!({"seed": 1})).unwrap();
    b.request("reset", json!({"seed": 1})).unwrap();

    let mut third = Client::connect(server.addr()).unwrap();
    let (body, _) = third.request("info", Value::Null).unwrap();
    assert_eq!(body["error_detail"], "server_busy");

    // b misbehaves and leaves; a keeps stepping.
    b.send_line("garbage").unwrap();
    drop(b);
    let (body, _) = a.request("step", json!({"action": 1})).unwrap();
    assert_eq!(body["status"], "ok");
    let (body, _) = a.request("close", Value::Null).unwrap();
    assert_eq!(body["status"], "ok");
}
