//! Socket front-end for terranav environments.
//!
//! Each connection is one session holding at most one environment. Requests
//! and responses are single JSON lines:
//!
//! ```text
//! -> {"op": "step", "payload": {"action": {"discrete": "forward"}}}
//! <- {"status": "ok", "payload": {..., "blob_count": 3}, "error_detail": null}
//! ```
//!
//! A response whose payload carries `blob_count = n` is followed by `n`
//! binary blobs, each a little-endian `u32` byte length and then the bytes.
//! Frames use three blobs each (depth, semantic, instance) in camera order.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::Deserialize;
use serde_json::{json, Value};
use terranav::dynamics::{Action, DiscreteAction};
use terranav::episode::{EpisodeConfig, Environment, StepResult};
use terranav::scene::{traversability_map, SceneRegistry};
use terranav::sensors::{CameraConfig, Frame, PROPRIOCEPTION_LAYOUT};
use terranav::terrain::SceneType;
use terranav::SimError;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 7450;
pub const DEFAULT_MAX_SESSIONS: usize = 8;
/// Longest accepted request line, in bytes.
const MAX_LINE: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct WireError {
    pub code: String,
    pub message: String,
}

impl WireError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        WireError { code: code.to_string(), message: message.into() }
    }

    fn malformed(message: impl Into<String>) -> Self {
        Self::new("malformed_request", message)
    }
}

impl From<SimError> for WireError {
    fn from(e: SimError) -> Self {
        WireError::new(e.code(), e.to_string())
    }
}

impl std::fmt::Display for WireError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for WireError {}

/// A named extension command, run against the session's environment.
pub type Handler = Arc<dyn Fn(&Environment, &Value) -> Result<Value, WireError> + Send + Sync>;

/// What the session sends back for one request.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub body: Value,
    pub blobs: Vec<Vec<u8>>,
    /// The connection is closed after this reply.
    pub close: bool,
}

impl Reply {
    fn ok(mut payload: Value, blobs: Vec<Vec<u8>>) -> Self {
        if !blobs.is_empty() {
            payload["blob_count"] = json!(blobs.len());
        }
        Reply { body: json!({"status": "ok", "payload": payload, "error_detail": null}), blobs, close: false }
    }

    fn error(err: &WireError) -> Self {
        Reply {
            body: json!({"status": "error", "payload": null, "error_detail": err.code, "message": err.message}),
            blobs: vec![],
            close: false,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Request {
    op: String,
    #[serde(default)]
    payload: Value,
}

fn args<T: for<'de> Deserialize<'de> + Default>(payload: &Value) -> Result<T, WireError> {
    if payload.is_null() {
        return Ok(T::default());
    }
    serde_json::from_value(payload.clone()).map_err(|e| WireError::malformed(e.to_string()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigureArgs {
    protocol_version: Option<u32>,
    #[serde(default)]
    config: EpisodeConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResetArgs {
    seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CaptureArgs {
    camera: Option<CameraConfig>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CallArgs {
    name: String,
    #[serde(default)]
    args: Value,
}

/// Discrete actions may be given by index as well as by name.
fn parse_action(payload: &Value) -> Result<Action, WireError> {
    let raw = payload.get("action").ok_or_else(|| WireError::malformed("step requires an `action`"))?;
    if let Some(index) = raw.as_u64() {
        return DiscreteAction::from_index(index as usize)
            .map(Action::Discrete)
            .ok_or_else(|| WireError::malformed(format!("discrete action index {index} out of range 0..5")));
    }
    serde_json::from_value(raw.clone()).map_err(|e| WireError::malformed(format!("bad action: {e}")))
}

/// Binary blobs for a list of frames, three per frame.
pub fn frame_blobs(frames: &[Frame]) -> Vec<Vec<u8>> {
    frames.iter().flat_map(|f| f.encode()).collect()
}

/// The JSON payload and blobs for a reset or step result.
pub fn step_payload(result: &StepResult) -> (Value, Vec<Vec<u8>>) {
    let mut payload = serde_json::to_value(result).expect("step results serialize");
    payload["observation"]["vector"] = json!(result.observation.proprioception.to_vector());
    payload["frames"] = frames_meta(&result.observation.frames);
    (payload, frame_blobs(&result.observation.frames))
}

fn frames_meta(frames: &[Frame]) -> Value {
    frames
        .iter()
        .enumerate()
        .map(|(camera, f)| json!({"camera": camera, "width": f.width, "height": f.height}))
        .collect()
}

/// Registered extension commands. The built-ins are always present.
#[derive(Clone)]
pub struct Handlers {
    map: BTreeMap<String, Handler>,
}

impl Default for Handlers {
    fn default() -> Self {
        let mut h = Handlers { map: BTreeMap::new() };
        h.insert("get_scene_instance", |env, args| {
            let include = args.get("include_heightmap").and_then(Value::as_bool).unwrap_or(false);
            let export = env.scene()?.to_export(include);
            Ok(serde_json::to_value(export).map_err(SimError::from)?)
        });
        h.insert("get_traversability_map", |env, args| {
            let agent = &env.config().agent;
            let radius = args.get("agent_radius").and_then(Value::as_f64).unwrap_or(agent.footprint_radius);
            let slope =
                args.get("max_traversable_slope").and_then(Value::as_f64).unwrap_or(agent.max_traversable_slope);
            let grid = traversability_map(env.scene()?, radius, slope);
            Ok(serde_json::to_value(grid).map_err(SimError::from)?)
        });
        h
    }
}

impl Handlers {
    pub fn insert(
        &mut self,
        name: &str,
        f: impl Fn(&Environment, &Value) -> Result<Value, WireError> + Send + Sync + 'static,
    ) {
        self.map.insert(name.to_string(), Arc::new(f));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }
}

/// Protocol state for one connection, independent of any transport.
pub struct Session {
    id: u64,
    registry: Arc<SceneRegistry>,
    handlers: Arc<Handlers>,
    env: Option<Environment>,
}

impl Session {
    pub fn new(id: u64, registry: Arc<SceneRegistry>, handlers: Arc<Handlers>) -> Self {
        Session { id, registry, handlers, env: None }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Handles one request line. Errors never end the session except a
    /// protocol version mismatch, which refuses it.
    pub fn handle_line(&mut self, line: &str) -> Reply {
        let request: Request = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => return Reply::error(&WireError::malformed(e.to_string())),
        };
        log::debug!("session {}: {}", self.id, request.op);
        match self.dispatch(&request) {
            Ok((payload, blobs)) => {
                let mut reply = Reply::ok(payload, blobs);
                reply.close = request.op == "close";
                reply
            }
            Err(err) => {
                let mut reply = Reply::error(&err);
                reply.close = err.code == "protocol_version_mismatch";
                reply
            }
        }
    }

    fn env(&self) -> Result<&Environment, WireError> {
        self.env.as_ref().ok_or_else(|| SimError::NoActiveEpisode.into())
    }

    fn dispatch(&mut self, req: &Request) -> Result<(Value, Vec<Vec<u8>>), WireError> {
        match req.op.as_str() {
            "info" => Ok((self.info(), vec![])),
            "configure" => {
                let a: ConfigureArgs = args(&req.payload)?;
                match a.protocol_version {
                    Some(PROTOCOL_VERSION) => {}
                    other => {
                        return Err(WireError::new(
                            "protocol_version_mismatch",
                            format!("server speaks protocol {PROTOCOL_VERSION}, client sent {other:?}"),
                        ))
                    }
                }
                let env = Environment::new(a.config, &self.registry)?;
                let cameras: Vec<Value> =
                    env.config().cameras.iter().map(|c| json!({"width": c.resolution, "height": c.resolution})).collect();
                let payload = json!({
                    "session_id": self.id,
                    "protocol_version": PROTOCOL_VERSION,
                    "spaces": {
                        "proprioception_length": PROPRIOCEPTION_LAYOUT.len(),
                        "control_suite": env.config().agent.control_suite,
                        "action_arity": DiscreteAction::ALL.len(),
                        "cameras": cameras,
                    },
                });
                self.env = Some(env);
                Ok((payload, vec![]))
            }
            "reset" => {
                let a: ResetArgs = args(&req.payload)?;
                let env = self
                    .env
                    .as_mut()
                    .ok_or_else(|| WireError::new("not_configured", "send configure before reset"))?;
                let result = env.reset(a.seed)?;
                let (mut payload, blobs) = step_payload(&result);
                payload["episode"] = serde_json::to_value(env.info()?).map_err(SimError::from)?;
                Ok((payload, blobs))
            }
            "step" => {
                let env = self.env.as_mut().ok_or(SimError::NoActiveEpisode)?;
                let action = parse_action(&req.payload)?;
                Ok(step_payload(&env.step(action)?))
            }
            "capture" => {
                let a: CaptureArgs = args(&req.payload)?;
                let env = self.env()?;
                let frames = match a.camera {
                    Some(cam) => vec![env.capture_camera(&cam)?],
                    None => env.capture()?,
                };
                Ok((json!({"frames": frames_meta(&frames)}), frame_blobs(&frames)))
            }
            "call" => {
                let a: CallArgs = args(&req.payload)?;
                let handler = self
                    .handlers
                    .map
                    .get(&a.name)
                    .ok_or_else(|| WireError::new("unknown_endpoint", format!("no handler named `{}`", a.name)))?;
                Ok((handler(self.env()?, &a.args)?, vec![]))
            }
            "close" => Ok((Value::Null, vec![])),
            other => Err(WireError::malformed(format!("unknown op `{other}`"))),
        }
    }

    fn info(&self) -> Value {
        json!({
            "version": env!("CARGO_PKG_VERSION"),
            "protocol_version": PROTOCOL_VERSION,
            "built_in_scenes": SceneType::BUILT_IN.iter().map(|t| t.name()).collect::<Vec<_>>(),
            "scenes": self.registry.names().collect::<Vec<_>>(),
            "endpoints": self.handlers.names().collect::<Vec<_>>(),
            "proprioception_layout": PROPRIOCEPTION_LAYOUT,
            "discrete_actions": DiscreteAction::ALL,
            "frame_channels": ["depth", "semantic", "instance"],
        })
    }
}

/// Writes a reply: the JSON line, then each blob with its length prefix.
pub fn write_reply(out: &mut impl Write, reply: &Reply) -> io::Result<()> {
    serde_json::to_writer(&mut *out, &reply.body)?;
    out.write_all(b"\n")?;
    for blob in &reply.blobs {
        out.write_all(&(blob.len() as u32).to_le_bytes())?;
        out.write_all(blob)?;
    }
    out.flush()
}

/// Reads one reply written by [`write_reply`].
pub fn read_reply(input: &mut impl BufRead) -> io::Result<(Value, Vec<Vec<u8>>)> {
    let mut line = String::new();
    if input.read_line(&mut line)? == 0 {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "connection closed"));
    }
    let body: Value = serde_json::from_str(&line)?;
    let count = body["payload"]["blob_count"].as_u64().unwrap_or(0);
    let mut blobs = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let mut len = [0u8; 4];
        input.read_exact(&mut len)?;
        let mut blob = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut blob)?;
        blobs.push(blob);
    }
    Ok((body, blobs))
}

/// Minimal blocking client, mostly for tests and tooling.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Client { reader: BufReader::new(stream.try_clone()?), writer: BufWriter::new(stream) })
    }

    /// Sends a raw line and reads the reply.
    pub fn send_line(&mut self, line: &str) -> io::Result<(Value, Vec<Vec<u8>>)> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        read_reply(&mut self.reader)
    }

    pub fn request(&mut self, op: &str, payload: Value) -> io::Result<(Value, Vec<Vec<u8>>)> {
        self.send_line(&json!({"op": op, "payload": payload}).to_string())
    }
}

pub struct Server {
    registry: Arc<SceneRegistry>,
    handlers: Arc<Handlers>,
    max_sessions: usize,
}

impl Server {
    pub fn new(registry: SceneRegistry) -> Self {
        Server { registry: Arc::new(registry), handlers: Arc::new(Handlers::default()), max_sessions: DEFAULT_MAX_SESSIONS }
    }

    pub fn with_max_sessions(mut self, n: usize) -> Self {
        self.max_sessions = n.max(1);
        self
    }

    pub fn with_handlers(mut self, handlers: Handlers) -> Self {
        self.handlers = Arc::new(handlers);
        self
    }

    /// Accepts connections until `stop` is raised, one thread per session.
    pub fn serve(&self, listener: TcpListener, stop: Arc<AtomicBool>) -> io::Result<()> {
        let active = Arc::new(AtomicUsize::new(0));
        let next_id = AtomicU64::new(1);
        log::info!("listening on {}", listener.local_addr()?);
        for stream in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let id = next_id.fetch_add(1, Ordering::SeqCst);
            if active.fetch_add(1, Ordering::SeqCst) >= self.max_sessions {
                active.fetch_sub(1, Ordering::SeqCst);
                log::warn!("refusing session {id}: {} sessions active", self.max_sessions);
                let err = WireError::new("server_busy", format!("at most {} concurrent sessions", self.max_sessions));
                let _ = write_reply(&mut BufWriter::new(stream), &Reply::error(&err));
                continue;
            }
            let session = Session::new(id, Arc::clone(&self.registry), Arc::clone(&self.handlers));
            let active = Arc::clone(&active);
            std::thread::spawn(move || {
                let _guard = ActiveGuard(active);
                let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
                log::info!("session {id} opened from {peer}");
                match run_session(session, stream) {
                    Ok(()) => log::info!("session {id} closed"),
                    Err(e) => log::info!("session {id} ended: {e}"),
                }
            });
        }
        Ok(())
    }

    /// Binds and serves on a background thread.
    pub fn spawn(self, addr: impl ToSocketAddrs) -> io::Result<ServerHandle> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&stop);
        let join = std::thread::spawn(move || self.serve(listener, flag));
        Ok(ServerHandle { addr, stop, join: Some(join) })
    }
}

struct ActiveGuard(Arc<AtomicUsize>);

impl Drop for ActiveGuard {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn run_session(mut session: Session, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.by_ref().take(MAX_LINE).read_line(&mut line)?;
        if n == 0 {
            return Ok(());
        }
        let reply = if !line.ends_with('\n') && n as u64 == MAX_LINE {
            // Oversized request: nothing sensible can follow on this stream.
            let mut r = Reply::error(&WireError::malformed("request line too long"));
            r.close = true;
            r
        } else if line.trim().is_empty() {
            continue;
        } else {
            session.handle_line(line.trim_end())
        };
        write_reply(&mut writer, &reply)?;
        if reply.close {
            return Ok(());
        }
    }
}

/// A server running on a background thread.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting new sessions. Running sessions finish on their own.
    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop_and_join()
    }

    fn stop_and_join(&mut self) -> io::Result<()> {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the accept loop.
        let _ = TcpStream::connect(self.addr);
        match self.join.take() {
            Some(j) => j.join().unwrap_or_else(|_| Err(io::Error::other("server thread panicked"))),
            None => Ok(()),
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_and_join();
    }
}
