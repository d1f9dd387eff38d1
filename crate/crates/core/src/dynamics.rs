//! Unicycle agent on the terrain surface.
//!
//! Commands persist: whatever `set_action` stored is applied on every
//! subsequent `step_dynamics` call until replaced.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::scene::{SceneInstance, DEFAULT_MAX_TRAVERSABLE_SLOPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscreteAction {
    Brake,
    Forward,
    Backward,
    TurnLeft,
    TurnRight,
}

impl DiscreteAction {
    pub const ALL: [DiscreteAction; 5] = [
        DiscreteAction::Brake,
        DiscreteAction::Forward,
        DiscreteAction::Backward,
        DiscreteAction::TurnLeft,
        DiscreteAction::TurnRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Discrete(DiscreteAction),
    Continuous {
        brake: bool,
        /// m/s
        linear_speed: f64,
        /// rad/s, counter-clockwise positive
        angular_speed: f64,
    },
}

impl Action {
    fn kind(&self) -> &'static str {
        match self {
            Action::Discrete(_) => "discrete",
            Action::Continuous { .. } => "continuous",
        }
    }
}

impl From<DiscreteAction> for Action {
    fn from(a: DiscreteAction) -> Self {
        Action::Discrete(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSuite {
    #[default]
    Discrete,
    Continuous,
}

impl ControlSuite {
    fn name(self) -> &'static str {
        match self {
            ControlSuite::Discrete => "discrete",
            ControlSuite::Continuous => "continuous",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentParams {
    pub control_suite: ControlSuite,
    /// m/s
    pub v_max: f64,
    /// rad/s
    pub omega_max: f64,
    pub footprint_radius: f64,
    /// Degrees.
    pub max_traversable_slope: f64,
}

impl Default for AgentParams {
    fn default() -> Self {
        AgentParams {
            control_suite: ControlSuite::Discrete,
            v_max: 2.0,
            omega_max: 1.5,
            footprint_radius: 0.5,
            max_traversable_slope: DEFAULT_MAX_TRAVERSABLE_SLOPE,
        }
    }
}

impl AgentParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.v_max > 0.0
            && self.omega_max > 0.0
            && self.footprint_radius > 0.0
            && (0.0..90.0).contains(&self.max_traversable_slope);
        if ok {
            Ok(())
        } else {
            Err(SimError::Config(format!("invalid agent parameters: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VelocityCommand {
    pub linear: f64,
    pub angular: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentState {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// Radians in `(-pi, pi]`, 0 along +x, counter-clockwise positive.
    pub heading: f64,
    pub linear_velocity: f64,
    pub angular_velocity: f64,
    /// Finite difference of linear velocity over the last step.
    pub acceleration: f64,
    pub last_action: Action,
    pub command: VelocityCommand,
    pub footprint_radius: f64,
    /// Positive when the terrain rises to the agent's left.
    pub roll: f64,
    /// Positive when the terrain rises ahead.
    pub pitch: f64,
}

impl AgentState {
    /// Places a stationary agent on the terrain.
    pub fn spawn(scene: &SceneInstance, x: f64, y: f64, heading: f64, params: &AgentParams) -> Result<Self> {
        let mut state = AgentState {
            x,
            y,
            z: 0.0,
            heading: wrap_angle(heading),
            linear_velocity: 0.0,
            angular_velocity: 0.0,
            acceleration: 0.0,
            last_action: match params.control_suite {
                ControlSuite::Discrete => Action::Discrete(DiscreteAction::Brake),
                ControlSuite::Continuous => Action::Continuous {
                    brake: true,
                    linear_speed: 0.0,
                    angular_speed: 0.0,
                },
            },
            command: VelocityCommand::default(),
            footprint_radius: params.footprint_radius,
            roll: 0.0,
            pitch: 0.0,
        };
        state.settle(scene)?;
        Ok(state)
    }

    /// Refreshes z, roll and pitch from the terrain under `(x, y)`.
    fn settle(&mut self, scene: &SceneInstance) -> Result<()> {
        let hm = scene.heightmap();
        self.z = hm.height_at(self.x, self.y)?;
        let (gx, gy) = hm.gradient_at(self.x, self.y)?;
        let (s, c) = self.heading.sin_cos();
        self.pitch = (gx * c + gy * s).atan();
        self.roll = (-gx * s + gy * c).atan();
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionKind {
    ObjectHit,
    NonTraversableEntered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionEvent {
    pub kind: CollisionKind,
    pub object_instance_id: Option<u32>,
    /// Pose at which motion was blocked.
    pub position: (f64, f64),
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Velocity command for an action under `params`. Continuous speeds are
/// clamped to the agent limits; NaN becomes zero.
pub fn command_for(action: &Action, params: &AgentParams) -> VelocityCommand {
    match *action {
        Action::Discrete(a) => {
            let (linear, angular) = match a {
                DiscreteAction::Brake => (0.0, 0.0),
                DiscreteAction::Forward => (params.v_max, 0.0),
                DiscreteAction::Backward => (-params.v_max, 0.0),
                DiscreteAction::TurnLeft => (0.0, params.omega_max),
                DiscreteAction::TurnRight => (0.0, -params.omega_max),
            };
            VelocityCommand { linear, angular }
        }
        Action::Continuous { brake: true, .. } => VelocityCommand::default(),
        Action::Continuous { linear_speed, angular_speed, .. } => {
            let clamp = |v: f64, lim: f64| if v.is_nan() { 0.0 } else { v.clamp(-lim, lim) };
            VelocityCommand {
                linear: clamp(linear_speed, params.v_max),
                angular: clamp(angular_speed, params.omega_max),
            }
        }
    }
}

/// Replaces the persisted command.
pub fn set_action(state: &AgentState, action: Action, params: &AgentParams) -> Result<AgentState> {
    let matches_suite = matches!(
        (&action, params.control_suite),
        (Action::Discrete(_), ControlSuite::Discrete) | (Action::Continuous { .. }, ControlSuite::Continuous)
    );
    if !matches_suite {
        return Err(SimError::ControlSuiteMismatch {
            action: action.kind(),
            suite: params.control_suite.name(),
        });
    }
    let command = command_for(&action, params);
    let stored = match action {
        Action::Continuous { brake, .. } => Action::Continuous {
            brake,
            linear_speed: command.linear,
            angular_speed: command.angular,
        },
        a => a,
    };
    Ok(AgentState { last_action: stored, command, ..*state })
}

/// Parameter in `[0, 1]` at which a disc of radius `reach` around `center`
/// is first touched by the segment `p0 -> p1`, if ever.
fn first_contact(p0: (f64, f64), p1: (f64, f64), center: (f64, f64), reach: f64) -> Option<f64> {
    let (fx, fy) = (p0.0 - center.0, p0.1 - center.1);
    let c = fx * fx + fy * fy - reach * reach;
    if c < 0.0 {
        return Some(0.0);
    }
    let (dx, dy) = (p1.0 - p0.0, p1.1 - p0.1);
    let a = dx * dx + dy * dy;
    if a == 0.0 {
        return None;
    }
    let b = fx * dx + fy * dy;
    let disc = b * b - a * c;
    if disc <= 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / a;
    (0.0..1.0).contains(&t).then_some(t)
}

/// Advances the agent by `dt` seconds under its persisted command.
///
/// Blocked motion leaves the pose unchanged, zeroes the velocities and
/// reports the cause.
pub fn step_dynamics(
    state: &AgentState,
    scene: &SceneInstance,
    params: &AgentParams,
    dt: f64,
) -> (AgentState, Option<CollisionEvent>) {
    let v = state.command.linear;
    let omega = state.command.angular;
    let (s, c) = state.heading.sin_cos();
    let nx = state.x + v * c * dt;
    let ny = state.y + v * s * dt;
    let nheading = wrap_angle(state.heading + omega * dt);

    let blocked = |kind, object_instance_id| {
        let mut next = *state;
        next.acceleration = -state.linear_velocity / dt;
        next.linear_velocity = 0.0;
        next.angular_velocity = 0.0;
        let event = CollisionEvent { kind, object_instance_id, position: (state.x, state.y) };
        (next, Some(event))
    };

    if (nx, ny) != (state.x, state.y) {
        let r = state.footprint_radius;
        let objects = scene.placed_objects();
        let mut candidates = Vec::new();
        scene.object_index().query_rect(
            nx.min(state.x) - r,
            ny.min(state.y) - r,
            nx.max(state.x) + r,
            ny.max(state.y) + r,
            &mut candidates,
        );
        let hit = candidates
            .iter()
            .filter_map(|&k| {
                let obj = &objects[k as usize];
                first_contact((state.x, state.y), (nx, ny), obj.xy(), obj.footprint_radius + r)
                    .map(|t| (t, obj.instance_id))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if let Some((_, id)) = hit {
            return blocked(CollisionKind::ObjectHit, Some(id));
        }

        let hm = scene.heightmap();
        let drivable = hm.contains(nx, ny)
            && scene.material_traversable_at(nx, ny)
            && hm
                .slope_at(nx, ny)
                .is_ok_and(|slope| slope <= params.max_traversable_slope);
        if !drivable {
            return blocked(CollisionKind::NonTraversableEntered, None);
        }
    }

    let mut next = *state;
    next.x = nx;
    next.y = ny;
    next.heading = nheading;
    next.acceleration = (v - state.linear_velocity) / dt;
    next.linear_velocity = v;
    next.angular_velocity = omega;
    next.settle(scene).expect("destination checked to be in bounds");
    (next, None)
}
