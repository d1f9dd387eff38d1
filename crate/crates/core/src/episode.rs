//! Point-goal navigation episodes: scene generation, spawn, the step loop,
//! rewards and termination.

use std::io::Write;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{set_action, step_dynamics, wrap_angle, Action, AgentParams, AgentState, CollisionKind};
use crate::error::{Result, SimError};
use crate::rng::{derive_seed, stream, streams};
use crate::scene::{
    generate_scene, sample_start_goal_in, traversability_map, GenerationParams, SceneDescriptor,
    SceneInstance, SceneRegistry,
};
use crate::sensors::{capture, capture_columns, sense, CameraConfig, Frame, Proprioception};
use crate::terrain::DEFAULT_MAP_SIZE;

/// Half-width of the initial heading perturbation around the goal bearing.
pub const HEADING_JITTER_DEG: f64 = 45.0;

/// A scene given by registry name or spelled out in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SceneRef {
    Named(String),
    Inline(Box<SceneDescriptor>),
}

impl SceneRef {
    pub fn resolve(&self, registry: &SceneRegistry) -> Result<SceneDescriptor> {
        match self {
            SceneRef::Named(name) => registry.get(name).cloned(),
            SceneRef::Inline(desc) => {
                desc.validate()?;
                Ok((**desc).clone())
            }
        }
    }
}

impl From<&str> for SceneRef {
    fn from(name: &str) -> Self {
        SceneRef::Named(name.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardSpec {
    pub success_reward: f64,
    pub failure_penalty: f64,
    pub step_penalty: f64,
    pub regress_penalty: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        RewardSpec { success_reward: 10.0, failure_penalty: -10.0, step_penalty: -0.05, regress_penalty: -0.1 }
    }
}

impl RewardSpec {
    pub fn validate(&self) -> Result<()> {
        let ordered = self.success_reward > 0.0 && 0.0 > self.step_penalty && self.step_penalty > self.failure_penalty;
        if ordered && self.regress_penalty <= 0.0 {
            Ok(())
        } else {
            Err(SimError::Config(format!("reward constants out of order: {self:?}")))
        }
    }
}

/// How the per-step and regress penalties combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Step penalty always, regress penalty on top when moving away.
    #[default]
    Additive,
    /// Regress penalty replaces the step penalty when moving away.
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    #[default]
    None,
    TargetReached,
    Collision,
    NonTraversable,
    Timeout,
}

impl Termination {
    pub fn is_terminal(self) -> bool {
        self != Termination::None
    }

    pub fn is_failure(self) -> bool {
        matches!(self, Termination::Collision | Termination::NonTraversable)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    pub scene: SceneRef,
    pub difficulty: f64,
    pub grid_resolution: f64,
    pub target_distance: f64,
    pub max_steps: u32,
    /// Seconds of simulated time per step.
    pub sim_dt: f64,
    /// Control suite and kinematic limits.
    #[serde(flatten)]
    pub agent: AgentParams,
    pub cameras: Vec<CameraConfig>,
    pub goal_radius: f64,
    pub seed: u64,
    /// Side length of the square map in meters.
    pub map_size: f64,
    pub reward: RewardSpec,
    pub reward_mode: RewardMode,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            scene: SceneRef::Named("Meadow".into()),
            difficulty: 0.5,
            grid_resolution: 0.5,
            target_distance: 10.0,
            max_steps: 500,
            sim_dt: 0.1,
            agent: AgentParams::default(),
            cameras: vec![CameraConfig::default()],
            goal_radius: 0.5,
            seed: 0,
            map_size: DEFAULT_MAP_SIZE,
            reward: RewardSpec::default(),
            reward_mode: RewardMode::Additive,
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.difficulty) || !unit(self.grid_resolution) {
            return Err(SimError::Config("difficulty and grid_resolution must lie in [0, 1]".into()));
        }
        if self.max_steps < 1 {
            return Err(SimError::Config("max_steps must be at least 1".into()));
        }
        if !(self.sim_dt > 0.0 && self.sim_dt.is_finite()) {
            return Err(SimError::Config(format!("sim_dt must be positive, got {}", self.sim_dt)));
        }
        if !(self.goal_radius > 0.0 && self.goal_radius.is_finite()) {
            return Err(SimError::Config("goal_radius must be positive".into()));
        }
        self.generation_params(self.seed).validate()?;
        self.agent.validate()?;
        self.reward.validate()?;
        self.cameras.iter().try_for_each(CameraConfig::validate)
    }

    fn generation_params(&self, seed: u64) -> GenerationParams {
        GenerationParams::new(self.difficulty, self.grid_resolution, self.target_distance, seed)
            .with_map_size(self.map_size)
    }
}

/// Reward for one step. `prev_distance` and `new_distance` are distances to
/// the goal before and after the step.
pub fn compute_reward(
    spec: &RewardSpec,
    mode: RewardMode,
    prev_distance: f64,
    new_distance: f64,
    termination: Termination,
) -> f64 {
    let regress = new_distance > prev_distance;
    let mut reward = match (mode, regress) {
        (RewardMode::Additive, true) => spec.step_penalty + spec.regress_penalty,
        (RewardMode::Exclusive, true) => spec.regress_penalty,
        (_, false) => spec.step_penalty,
    };
    match termination {
        Termination::TargetReached => reward += spec.success_reward,
        Termination::Collision | Termination::NonTraversable => reward += spec.failure_penalty,
        Termination::None | Termination::Timeout => {}
    }
    reward
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub proprioception: Proprioception,
    /// One frame per configured camera, in configuration order. Frames
    /// travel as binary blobs on the wire, never inside JSON.
    #[serde(skip)]
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub termination: Termination,
    pub step_index: u32,
}

/// Facts about the current episode that are fixed at reset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeInfo {
    pub scene: String,
    pub seed: u64,
    pub start: (f64, f64),
    pub goal: (f64, f64),
    pub initial_heading: f64,
    pub cell_size: f64,
    pub object_count: usize,
    pub reward_mode: RewardMode,
}

/// One line of the trajectory log. The reset record has no action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step_index: u32,
    pub action: Option<Action>,
    pub proprioception: Proprioception,
    pub reward: f64,
    pub termination: Termination,
}

#[derive(Debug)]
struct Episode {
    scene: Arc<SceneInstance>,
    agent: AgentState,
    info: EpisodeInfo,
    step_index: u32,
    distance: f64,
    termination: Termination,
    total_reward: f64,
    log: Vec<StepRecord>,
}

/// A single navigation environment. Steps are strictly sequential; run
/// several instances for parallel collection.
#[derive(Debug)]
pub struct Environment {
    cfg: EpisodeConfig,
    descriptor: SceneDescriptor,
    resets: u64,
    episode: Option<Episode>,
}

impl Environment {
    pub fn new(cfg: EpisodeConfig, registry: &SceneRegistry) -> Result<Self> {
        cfg.validate()?;
        let descriptor = cfg.scene.resolve(registry)?;
        Ok(Environment { cfg, descriptor, resets: 0, episode: None })
    }

    pub fn config(&self) -> &EpisodeConfig {
        &self.cfg
    }

    /// Starts a new episode. Without an explicit seed the first reset uses
    /// the configured seed and later ones derive fresh seeds from it.
    pub fn reset(&mut self, seed: Option<u64>) -> Result<StepResult> {
        let seed = seed.unwrap_or(match self.resets {
            0 => self.cfg.seed,
            n => derive_seed(self.cfg.seed, n),
        });
        self.resets += 1;
        self.episode = None;

        let scene = Arc::new(generate_scene(&self.descriptor, &self.cfg.generation_params(seed))?);
        let params = &self.cfg.agent;
        let grid = traversability_map(&scene, params.footprint_radius, params.max_traversable_slope);
        let (start, goal) = sample_start_goal_in(&grid, self.cfg.target_distance, params.footprint_radius, seed)?;

        let bearing = (goal.1 - start.1).atan2(goal.0 - start.0);
        let jitter = stream(seed, streams::HEADING).gen_range(-HEADING_JITTER_DEG..=HEADING_JITTER_DEG);
        let heading = wrap_angle(bearing + jitter.to_radians());
        let agent = AgentState::spawn(&scene, start.0, start.1, heading, params)?;

        let distance = (goal.0 - start.0).hypot(goal.1 - start.1);
        let proprioception = sense(&scene, &agent, goal, distance, false);
        let frames = self.capture_all(&scene, &agent);
        let info = EpisodeInfo {
            scene: self.descriptor.name.clone(),
            seed,
            start,
            goal,
            initial_heading: heading,
            cell_size: scene.cell_size_used(),
            object_count: scene.placed_objects().len(),
            reward_mode: self.cfg.reward_mode,
        };
        let record = StepRecord {
            step_index: 0,
            action: None,
            proprioception,
            reward: 0.0,
            termination: Termination::None,
        };
        self.episode = Some(Episode {
            scene,
            agent,
            info,
            step_index: 0,
            distance,
            termination: Termination::None,
            total_reward: 0.0,
            log: vec![record],
        });
        Ok(StepResult {
            observation: Observation { proprioception, frames },
            reward: 0.0,
            done: false,
            termination: Termination::None,
            step_index: 0,
        })
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult> {
        let ep = self.episode.as_mut().ok_or(SimError::NoActiveEpisode)?;
        if ep.termination.is_terminal() {
            return Err(SimError::EpisodeFinished);
        }
        let cfg = &self.cfg;
        let commanded = set_action(&ep.agent, action, &cfg.agent)?;
        let (agent, collision) = step_dynamics(&commanded, &ep.scene, &cfg.agent, cfg.sim_dt);
        ep.agent = agent;
        ep.step_index += 1;

        let goal = ep.info.goal;
        let proprioception = sense(&ep.scene, &ep.agent, goal, ep.distance, collision.is_some());
        let new_distance = proprioception.distance_to_target;
        let termination = match collision.map(|c| c.kind) {
            Some(CollisionKind::ObjectHit) => Termination::Collision,
            Some(CollisionKind::NonTraversableEntered) => Termination::NonTraversable,
            None if new_distance <= cfg.goal_radius => Termination::TargetReached,
            None if ep.step_index >= cfg.max_steps => Termination::Timeout,
            None => Termination::None,
        };
        let reward = compute_reward(&cfg.reward, cfg.reward_mode, ep.distance, new_distance, termination);
        ep.distance = new_distance;
        ep.termination = termination;
        ep.total_reward += reward;
        ep.log.push(StepRecord {
            step_index: ep.step_index,
            action: Some(action),
            proprioception,
            reward,
            termination,
        });
        let step_index = ep.step_index;
        let frames = {
            let ep = self.episode.as_ref().expect("episode is active");
            self.capture_all(&ep.scene, &ep.agent)
        };
        Ok(StepResult {
            observation: Observation { proprioception, frames },
            reward,
            done: termination.is_terminal(),
            termination,
            step_index,
        })
    }

    /// Frames from every configured camera at the current pose.
    pub fn capture(&self) -> Result<Vec<Frame>> {
        let ep = self.active()?;
        Ok(self.capture_all(&ep.scene, &ep.agent))
    }

    /// A frame from an ad-hoc camera at the current pose.
    pub fn capture_camera(&self, cfg: &CameraConfig) -> Result<Frame> {
        cfg.validate()?;
        let ep = self.active()?;
        Ok(capture(&ep.scene, &ep.agent, cfg))
    }

    /// Renders only `columns` of a frame from an ad-hoc camera.
    pub fn capture_camera_columns(&self, cfg: &CameraConfig, columns: Range<u32>) -> Result<Frame> {
        cfg.validate()?;
        let ep = self.active()?;
        Ok(capture_columns(&ep.scene, &ep.agent, cfg, columns))
    }

    fn capture_all(&self, scene: &SceneInstance, agent: &AgentState) -> Vec<Frame> {
        self.cfg.cameras.iter().map(|c| capture(scene, agent, c)).collect()
    }

    fn active(&self) -> Result<&Episode> {
        self.episode.as_ref().ok_or(SimError::NoActiveEpisode)
    }

    pub fn scene(&self) -> Result<&Arc<SceneInstance>> {
        Ok(&self.active()?.scene)
    }

    pub fn agent(&self) -> Result<&AgentState> {
        Ok(&self.active()?.agent)
    }

    pub fn info(&self) -> Result<&EpisodeInfo> {
        Ok(&self.active()?.info)
    }

    pub fn total_reward(&self) -> Result<f64> {
        Ok(self.active()?.total_reward)
    }

    pub fn termination(&self) -> Result<Termination> {
        Ok(self.active()?.termination)
    }

    /// Reset record followed by one record per step.
    pub fn trajectory(&self) -> Result<&[StepRecord]> {
        Ok(&self.active()?.log)
    }

    /// Writes the trajectory as JSON lines.
    pub fn write_trajectory(&self, mut out: impl Write) -> Result<()> {
        for record in self.trajectory()? {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}
