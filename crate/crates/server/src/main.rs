use std::net::TcpListener;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::Parser;
use terranav::scene::SceneRegistry;
use terranav_server::{Server, DEFAULT_MAX_SESSIONS, DEFAULT_PORT};

/// Serve terranav environments over TCP.
#[derive(Debug, Parser)]
#[command(version)]
struct Args {
    #[arg(long, env = "TERRANAV_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    #[arg(long, env = "TERRANAV_BIND", default_value = "127.0.0.1")]
    bind: String,
    #[arg(long, env = "TERRANAV_MAX_SESSIONS", default_value_t = DEFAULT_MAX_SESSIONS)]
    max_sessions: usize,
    /// Directory of extra scene descriptors (*.json).
    #[arg(long, env = "TERRANAV_SCENE_DIR")]
    scene_dir: Option<PathBuf>,
    /// error, warn, info, debug or trace.
    #[arg(long, env = "TERRANAV_LOG_LEVEL", default_value = "info")]
    log_level: log::LevelFilter,
}

fn main() {
    let args = Args::parse();
    env_logger::Builder::new().filter_level(args.log_level).init();

    let mut registry = SceneRegistry::with_built_ins();
    if let Some(dir) = &args.scene_dir {
        match registry.load_dir(dir) {
            Ok(n) => log::info!("loaded {n} scene descriptors from {}", dir.display()),
            Err(e) => {
                eprintln!("error: {e}");
                std::process::exit(2);
            }
        }
    }
    let listener = match TcpListener::bind((args.bind.as_str(), args.port)) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {}:{}: {e}", args.bind, args.port);
            std::process::exit(1);
        }
    };
    let server = Server::new(registry).with_max_sessions(args.max_sessions);
    if let Err(e) = server.serve(listener, Arc::new(AtomicBool::new(false))) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
