//! Scripted baseline agents, difficulty/distance sweeps and rate
//! measurements.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::ops::Range;
use std::time::{Duration, Instant};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use terranav::dynamics::DiscreteAction;
use terranav::episode::{EpisodeConfig, Environment, SceneRef, Termination};
use terranav::rng::{derive_seed, stream};
use terranav::scene::SceneRegistry;
use terranav::sensors::{CameraConfig, Frame, Proprioception, SemanticClass};
use terranav::{Result, SimError};

/// Bearing error beyond which the scripted agents turn in place.
pub const ALIGN_TOLERANCE_DEG: f64 = 15.0;
/// Obstacles closer than this in the central image third block driving.
pub const CLEARANCE: f64 = 1.5;
/// Resets attempted per episode before giving up on a seed family.
pub const RESET_ATTEMPTS: u64 = 10;
const POLICY_STREAM: u64 = 0xBE7C_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Random,
    Greedy,
    GreedyAvoid,
}

impl AgentKind {
    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Random => "random",
            AgentKind::Greedy => "greedy",
            AgentKind::GreedyAvoid => "greedy_avoid",
        }
    }
}

impl std::str::FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "random" => Ok(AgentKind::Random),
            "greedy" => Ok(AgentKind::Greedy),
            "greedy_avoid" | "greedy-avoid" => Ok(AgentKind::GreedyAvoid),
            _ => Err(format!("unknown agent `{s}` (random, greedy, greedy_avoid)")),
        }
    }
}

fn turn_toward(p: &Proprioception) -> Option<DiscreteAction> {
    let bearing = p.heading_to_target;
    if bearing.abs() <= ALIGN_TOLERANCE_DEG.to_radians() {
        None
    } else if bearing > 0.0 {
        Some(DiscreteAction::TurnLeft)
    } else {
        Some(DiscreteAction::TurnRight)
    }
}

/// Turn toward the target until roughly aligned, then drive.
pub fn greedy_policy(p: &Proprioception) -> DiscreteAction {
    turn_toward(p).unwrap_or(DiscreteAction::Forward)
}

/// Whether the agent should look before acting. The avoiding policy only
/// reads the frame once it is aligned with the target.
pub fn needs_frame(p: &Proprioception) -> bool {
    turn_toward(p).is_none()
}

fn is_obstacle(c: SemanticClass) -> bool {
    !matches!(c, SemanticClass::Ground | SemanticClass::Sky)
}

/// Greedy driving that stops for obstacles. Ground and sky pixels never
/// count as obstacles: with a downward-tilted camera the ground itself is
/// always closer than the clearance at the bottom of the image.
pub fn greedy_avoid_policy(p: &Proprioception, frame: &Frame) -> DiscreteAction {
    if let Some(turn) = turn_toward(p) {
        return turn;
    }
    if path_is_clear(frame) {
        return DiscreteAction::Forward;
    }
    let (w, h) = (frame.width as usize, frame.height as usize);
    let (mut left, mut right) = (0.0f64, 0.0f64);
    for row in 0..h {
        for (col, &d) in frame.depth[row * w..(row + 1) * w].iter().enumerate() {
            if col < w / 2 {
                left += d as f64;
            } else {
                right += d as f64;
            }
        }
    }
    if left > right {
        DiscreteAction::TurnLeft
    } else {
        DiscreteAction::TurnRight
    }
}

/// The central third of the columns, the only part of the frame read when
/// the path is clear.
pub fn central_columns(width: u32) -> Range<u32> {
    width / 3..width - width / 3
}

/// No obstacle pixel within the clearance in the central columns.
pub fn path_is_clear(frame: &Frame) -> bool {
    let w = frame.width as usize;
    let central = central_columns(frame.width);
    let (c0, c1) = (central.start as usize, central.end as usize);
    let mut nearest = f32::INFINITY;
    for row in frame.depth.chunks(w).zip(frame.semantic.chunks(w)) {
        for (&d, &c) in row.0[c0..c1].iter().zip(&row.1[c0..c1]) {
            if is_obstacle(c) {
                nearest = nearest.min(d);
            }
        }
    }
    nearest as f64 > CLEARANCE
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub total_reward: f64,
    pub steps: u32,
    pub termination: Termination,
}

impl EpisodeOutcome {
    pub fn success(&self) -> bool {
        self.termination == Termination::TargetReached
    }
}

/// Resets with `seed`, or with seeds derived from it while spawn sampling
/// fails.
fn reset_with_retries(env: &mut Environment, seed: u64) -> Result<u64> {
    let mut last = None;
    for attempt in 0..RESET_ATTEMPTS {
        let s = if attempt == 0 { seed } else { derive_seed(seed, attempt) };
        match env.reset(Some(s)) {
            Ok(_) => return Ok(s),
            Err(e @ SimError::UnsatisfiablePlacement { .. }) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// The avoiding policy's action for an aligned agent. Rendering the central
/// columns first settles the common clear-path case at a third of the cost.
fn look_and_decide(env: &Environment, obs: &Proprioception, camera: &CameraConfig) -> Result<DiscreteAction> {
    let central = env.capture_camera_columns(camera, central_columns(camera.resolution))?;
    if path_is_clear(&central) {
        return Ok(DiscreteAction::Forward);
    }
    Ok(greedy_avoid_policy(obs, &env.capture_camera(camera)?))
}

/// Runs one episode to termination.
pub fn run_episode(env: &mut Environment, seed: u64, agent: AgentKind, camera: &CameraConfig) -> Result<EpisodeOutcome> {
    let seed = reset_with_retries(env, seed)?;
    let mut rng = stream(seed, POLICY_STREAM);
    let mut obs = env.trajectory()?[0].proprioception;
    let mut looked = HashMap::new();
    loop {
        let action = match agent {
            AgentKind::Random => DiscreteAction::ALL[rng.gen_range(0..DiscreteAction::ALL.len())],
            AgentKind::Greedy => greedy_policy(&obs),
            AgentKind::GreedyAvoid if needs_frame(&obs) => {
                // Frames depend only on the camera pose, which a blocked
                // agent revisits exactly while it dithers.
                let a = env.agent()?;
                let pose = [a.x, a.y, a.z, a.heading].map(f64::to_bits);
                match looked.get(&pose) {
                    Some(&action) => action,
                    None => {
                        let action = look_and_decide(env, &obs, camera)?;
                        looked.insert(pose, action);
                        action
                    }
                }
            }
            AgentKind::GreedyAvoid => greedy_policy(&obs),
        };
        let r = env.step(action.into())?;
        obs = r.observation.proprioception;
        if r.done {
            return Ok(EpisodeOutcome { seed, total_reward: env.total_reward()?, steps: r.step_index, termination: r.termination });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub scenes: Vec<String>,
    pub difficulties: Vec<f64>,
    pub distances: Vec<f64>,
    pub episodes_per_cell: u32,
    pub agent: AgentKind,
    pub seed: u64,
    pub grid_resolution: f64,
    /// Camera used by the avoiding agent.
    pub camera: CameraConfig,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            scenes: vec!["Forest".into(), "VolcanicField".into()],
            difficulties: vec![0.1, 0.5, 1.0],
            distances: vec![10.0, 20.0],
            episodes_per_cell: 200,
            agent: AgentKind::GreedyAvoid,
            seed: 0,
            grid_resolution: 0.5,
            camera: CameraConfig { resolution: 128, max_range: 10.0, ..CameraConfig::default() },
        }
    }
}

impl SweepSpec {
    pub fn validate(&self, registry: &SceneRegistry) -> Result<()> {
        if self.episodes_per_cell < 1 {
            return Err(SimError::Config("episodes_per_cell must be at least 1".into()));
        }
        if self.difficulties.iter().any(|d| !(0.0..=1.0).contains(d)) {
            return Err(SimError::Config("difficulties must lie in [0, 1]".into()));
        }
        for scene in &self.scenes {
            registry.get(scene)?;
        }
        self.camera.validate()?;
        for (_, difficulty, distance) in self.cells() {
            self.episode_config(&self.scenes[0], difficulty, distance).validate()?;
        }
        Ok(())
    }

    /// (scene index, difficulty, distance) in output order.
    pub fn cells(&self) -> Vec<(usize, f64, f64)> {
        let mut cells = Vec::new();
        for s in 0..self.scenes.len() {
            for &d in &self.difficulties {
                for &dist in &self.distances {
                    cells.push((s, d, dist));
                }
            }
        }
        cells
    }

    pub fn episode_config(&self, scene: &str, difficulty: f64, distance: f64) -> EpisodeConfig {
        EpisodeConfig {
            scene: SceneRef::Named(scene.to_string()),
            difficulty,
            grid_resolution: self.grid_resolution,
            target_distance: distance,
            cameras: vec![],
            seed: self.seed,
            ..EpisodeConfig::default()
        }
    }

    /// Episode `k` uses the same seed in every cell, so cells differ only
    /// in the swept parameter.
    pub fn episode_seed(&self, k: u32) -> u64 {
        derive_seed(self.seed, k as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub scene: String,
    pub agent: String,
    pub distance: f64,
    pub difficulty: f64,
    pub avg_total_reward: f64,
    pub success_rate: f64,
    pub avg_episode_length: f64,
    pub episodes: usize,
    /// Standard error of `avg_episode_length`.
    pub length_std_error: f64,
}

impl MetricsRow {
    pub fn from_outcomes(scene: &str, agent: AgentKind, difficulty: f64, distance: f64, outcomes: &[EpisodeOutcome]) -> Self {
        let n = outcomes.len() as f64;
        let lengths: Vec<f64> = outcomes.iter().map(|o| o.steps as f64).collect();
        let mean_len = lengths.iter().sum::<f64>() / n;
        let var = if outcomes.len() > 1 {
            lengths.iter().map(|l| (l - mean_len).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        MetricsRow {
            scene: scene.to_string(),
            agent: agent.name().to_string(),
            distance,
            difficulty,
            avg_total_reward: outcomes.iter().map(|o| o.total_reward).sum::<f64>() / n,
            success_rate: outcomes.iter().filter(|o| o.success()).count() as f64 / n,
            avg_episode_length: mean_len,
            episodes: outcomes.len(),
            length_std_error: (var / n).sqrt(),
        }
    }

    /// Binomial standard error of `success_rate`.
    pub fn success_std_error(&self) -> f64 {
        (self.success_rate * (1.0 - self.success_rate) / self.episodes as f64).sqrt()
    }
}

/// Every episode of a sweep, grouped by cell in [`SweepSpec::cells`] order.
pub fn run_sweep_outcomes(spec: &SweepSpec, registry: &SceneRegistry) -> Result<Vec<Vec<EpisodeOutcome>>> {
    spec.validate(registry)?;
    let cells = spec.cells();
    let jobs: Vec<(usize, u32)> =
        (0..cells.len()).flat_map(|c| (0..spec.episodes_per_cell).map(move |k| (c, k))).collect();
    // Indexed parallel collect keeps job order, so results never depend on
    // scheduling.
    let outcomes: Vec<EpisodeOutcome> = jobs
        .par_iter()
        .map(|&(c, k)| {
            let (s, difficulty, distance) = cells[c];
            let mut env = Environment::new(spec.episode_config(&spec.scenes[s], difficulty, distance), registry)?;
            run_episode(&mut env, spec.episode_seed(k), spec.agent, &spec.camera)
        })
        .collect::<Result<_>>()?;
    Ok(outcomes.chunks(spec.episodes_per_cell as usize).map(<[_]>::to_vec).collect())
}

pub fn run_sweep(spec: &SweepSpec, registry: &SceneRegistry) -> Result<Vec<MetricsRow>> {
    let outcomes = run_sweep_outcomes(spec, registry)?;
    Ok(spec
        .cells()
        .iter()
        .zip(&outcomes)
        .map(|(&(s, d, dist), o)| MetricsRow::from_outcomes(&spec.scenes[s], spec.agent, d, dist, o))
        .collect())
}

pub fn write_csv(rows: &[MetricsRow], out: impl std::io::Write) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn format_table(rows: &[MetricsRow]) -> String {
    let mut s = format!(
        "{:<14} {:<13} {:>6} {:>5} {:>10} {:>8} {:>9} {:>6}\n",
        "scene", "agent", "dist", "D", "reward", "success", "length", "n"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14} {:<13} {:>6.1} {:>5.2} {:>10.3} {:>7.1}% {:>9.1} {:>6}",
            r.scene,
            r.agent,
            r.distance,
            r.difficulty,
            r.avg_total_reward,
            100.0 * r.success_rate,
            r.avg_episode_length,
            r.episodes
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub steps_per_second: f64,
    /// Calls capturing every configured camera, frame encoding included.
    pub captures_per_second: f64,
}

/// Measures vision-free stepping and capturing separately, each for about
/// `duration` of wall time. Only the measured calls are timed; resets,
/// which regenerate the scene, are not.
pub fn measure_rates(cfg: &EpisodeConfig, duration: Duration, registry: &SceneRegistry) -> Result<Rates> {
    Ok(Rates {
        steps_per_second: measure_step_rate(cfg, duration, registry)?,
        captures_per_second: measure_capture_rate(cfg, duration, registry)?,
    })
}

/// Steps per second with every camera removed.
pub fn measure_step_rate(cfg: &EpisodeConfig, duration: Duration, registry: &SceneRegistry) -> Result<f64> {
    let blind = EpisodeConfig { cameras: vec![], ..cfg.clone() };
    let mut env = Environment::new(blind, registry)?;
    let mut seed = cfg.seed;
    reset_with_retries(&mut env, seed)?;
    let (mut steps, mut spent, wall) = (0u64, Duration::ZERO, Instant::now());
    while steps == 0 || wall.elapsed() < duration {
        let obs = *env.trajectory()?.last().map(|r| &r.proprioception).expect("reset record");
        let t0 = Instant::now();
        let r = env.step(greedy_policy(&obs).into())?;
        spent += t0.elapsed();
        steps += 1;
        if r.done {
            seed = seed.wrapping_add(1);
            reset_with_retries(&mut env, seed)?;
        }
    }
    Ok(steps as f64 / spent.as_secs_f64())
}

/// Calls capturing every configured camera per second, frame encoding
/// included.
pub fn measure_capture_rate(cfg: &EpisodeConfig, duration: Duration, registry: &SceneRegistry) -> Result<f64> {
    let mut env = Environment::new(cfg.clone(), registry)?;
    let mut seed = cfg.seed;
    reset_with_retries(&mut env, seed)?;
    let (mut captures, mut spent, wall) = (0u64, Duration::ZERO, Instant::now());
    while captures == 0 || wall.elapsed() < duration {
        let t0 = Instant::now();
        let bytes: usize = env.capture()?.iter().flat_map(Frame::encode).map(|b| b.len()).sum();
        spent += t0.elapsed();
        std::hint::black_box(bytes);
        captures += 1;
        // Move so consecutive frames differ.
        let obs = *env.trajectory()?.last().map(|r| &r.proprioception).expect("reset record");
        if env.step(greedy_policy(&obs).into())?.done {
            seed = seed.wrapping_add(1);
            reset_with_retries(&mut env, seed)?;
        }
    }
    Ok(captures as f64 / spent.as_secs_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn proprio(bearing_deg: f64) -> Proprioception {
        Proprioception {
            position: (0.0, 0.0),
            heading: 0.0,
            target_position: (10.0, 0.0),
            distance_to_target: 10.0,
            normalized_distance: 0.07,
            heading_to_target: bearing_deg.to_radians(),
            distance_delta: 0.0,
            speed: 0.0,
            acceleration: 0.0,
            attitude: (0.0, 0.0, 0.0),
            collision_flag: false,
        }
    }

    /// Ground everywhere at 5 m with an optional obstacle patch.
    fn frame(obstacle: Option<(std::ops::Range<usize>, f32)>, left_depth: f32) -> Frame {
        let n = 12;
        let mut f = Frame {
            width: n as u32,
            height: n as u32,
            depth: vec![5.0; n * n],
            semantic: vec![SemanticClass::Ground; n * n],
            instance: vec![0; n * n],
        };
        for row in 0..n {
            for col in 0..n / 2 {
                f.depth[row * n + col] = left_depth;
            }
            if let Some((cols, d)) = &obstacle {
                for col in cols.clone() {
                    f.depth[row * n + col] = *d;
                    f.semantic[row * n + col] = SemanticClass::Tree;
                    f.instance[row * n + col] = 1;
                }
            }
        }
        f
    }

    #[test]
    fn turns_toward_target_first() {
        let clear = frame(None, 5.0);
        assert_eq!(greedy_avoid_policy(&proprio(90.0), &clear), DiscreteAction::TurnLeft);
        assert_eq!(greedy_avoid_policy(&proprio(-20.0), &clear), DiscreteAction::TurnRight);
        assert_eq!(greedy_avoid_policy(&proprio(10.0), &clear), DiscreteAction::Forward);
        assert!(!needs_frame(&proprio(16.0)) && needs_frame(&proprio(-14.0)));
    }

    #[test]
    fn blocked_path_turns_to_the_deeper_side() {
        let p = proprio(0.0);
        assert_eq!(greedy_avoid_policy(&p, &frame(Some((5..7, 0.8)), 9.0)), DiscreteAction::TurnLeft);
        assert_eq!(greedy_avoid_policy(&p, &frame(Some((5..7, 0.8)), 1.0)), DiscreteAction::TurnRight);
        // Far obstacle, or a near one outside the central third, does not block.
        assert_eq!(greedy_avoid_policy(&p, &frame(Some((5..7, 2.0)), 9.0)), DiscreteAction::Forward);
        assert_eq!(greedy_avoid_policy(&p, &frame(Some((0..2, 0.5)), 9.0)), DiscreteAction::Forward);
    }

    #[test]
    fn metrics_row_accounting() {
        let o = |r: f64, steps: u32, t| EpisodeOutcome { seed: 0, total_reward: r, steps, termination: t };
        let row = MetricsRow::from_outcomes(
            "Forest",
            AgentKind::Greedy,
            0.5,
            10.0,
            &[o(9.0, 20, Termination::TargetReached), o(-11.0, 20, Termination::Collision)],
        );
        assert_eq!(row.success_rate, 0.5);
        assert_eq!(row.avg_total_reward, -1.0);
        assert_eq!(row.avg_episode_length, 20.0);
        assert_eq!(row.length_std_error, 0.0);
        assert!((row.success_std_error() - 0.5 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn agent_names_parse() {
        for a in [AgentKind::Random, AgentKind::Greedy, AgentKind::GreedyAvoid] {
            assert_eq!(a.name().parse::<AgentKind>().unwrap(), a);
        }
        assert!("smart".parse::<AgentKind>().is_err());
    }
}
