use thiserror::Error;

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("query point ({x}, {y}) lies outside the map")]
    OutOfBounds { x: f64, y: f64 },

    #[error(
        "no traversable start/goal pair found after {attempts} attempts; \
         the scene is too dense, retry with a new seed"
    )]
    UnsatisfiablePlacement { attempts: usize },

    #[error("{action} action sent to an agent using the {suite} control suite")]
    ControlSuiteMismatch {
        action: &'static str,
        suite: &'static str,
    },

    #[error("no active episode; call reset first")]
    NoActiveEpisode,

    #[error("episode finished; call reset to start a new one")]
    EpisodeFinished,

    #[error("unknown scene `{0}`")]
    UnknownScene(String),

    #[error("malformed frame data: {0}")]
    MalformedFrame(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl SimError {
    /// Stable machine-readable code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            SimError::Config(_) => "invalid_config",
            SimError::OutOfBounds { .. } => "out_of_bounds",
            SimError::UnsatisfiablePlacement { .. } => "unsatisfiable_placement",
            SimError::ControlSuiteMismatch { .. } => "control_suite_mismatch",
            SimError::NoActiveEpisode => "no_active_episode",
            SimError::EpisodeFinished => "episode_finished",
            SimError::UnknownScene(_) => "unknown_scene",
            SimError::MalformedFrame(_) => "malformed_frame",
            SimError::Io(_) => "io_error",
            SimError::Json(_) => "malformed_request",
        }
    }
}
