//! Small deterministic continuous-control tasks.
//!
//! Environments are stateless: `step` is a pure function of the state, the
//! action and the number of steps already taken in the episode.
//!
//! | name        | state                     | action       | limit |
//! |-------------|---------------------------|--------------|-------|
//! | `pointmass` | `(px, py, vx, vy)`        | `[-1, 1]^2`  | 200   |
//! | `pendulum`  | `(cos th, sin th, th_dot)`| `[-2, 2]`    | 200   |
//! | `lqr1d`     | `(x)`                     | `[-1, 1]`    | 100   |

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{invalid, shape_err, Error, Result};
use crate::numeric::{check_finite, Rng};
use crate::policy::ActionBox;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub state_dim: usize,
    pub action_box: ActionBox,
    pub max_steps: usize,
    pub dt: f64,
}

impl EnvSpec {
    pub fn action_dim(&self) -> usize {
        self.action_box.dim()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    /// Set only when the step limit is reached without termination.
    pub truncated: bool,
}

pub trait Env: Send + Sync {
    fn spec(&self) -> &EnvSpec;
    fn reset(&self, rng: &mut Rng) -> Vec<f64>;
    /// `elapsed` is the number of steps already taken this episode.
    fn step(&self, state: &[f64], action: &[f64], elapsed: usize) -> Result<StepResult>;
}

fn check_io(spec: &EnvSpec, state: &[f64], action: &[f64]) -> Result<()> {
    if state.len() != spec.state_dim {
        return Err(shape_err("env state", spec.state_dim, state.len()));
    }
    if action.len() != spec.action_dim() {
        return Err(shape_err("env action", spec.action_dim(), action.len()));
    }
    check_finite("env state", state)?;
    check_finite("env action", action)
}

fn finish(spec: &EnvSpec, next_state: Vec<f64>, reward: f64, terminated: bool, elapsed: usize) -> StepResult {
    StepResult {
        next_state,
        reward,
        terminated,
        truncated: !terminated && elapsed + 1 >= spec.max_steps,
    }
}

/// Planar point mass driven by acceleration toward a fixed goal.
#[derive(Clone, Debug)]
pub struct PointMass {
    spec: EnvSpec,
    pub goal: [f64; 2],
}

impl Default for PointMass {
    fn default() -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 4,
                action_box: ActionBox::symmetric(1.0, 2).unwrap(),
                max_steps: 200,
                dt: 0.05,
            },
            goal: [0.8, 0.8],
        }
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        vec![rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0), 0.0, 0.0]
    }

    fn step(&self, state: &[f64], action: &[f64], elapsed: usize) -> Result<StepResult> {
        check_io(&self.spec, state, action)?;
        let dt = self.spec.dt;
        let vx = state[2] + action[0] * dt;
        let vy = state[3] + action[1] * dt;
        let px = state[0] + vx * dt;
        let py = state[1] + vy * dt;
        let dist = ((px - self.goal[0]).powi(2) + (py - self.goal[1]).powi(2)).sqrt();
        let effort = action[0] * action[0] + action[1] * action[1];
        let reward = -dist - 0.1 * effort;
        Ok(finish(&self.spec, vec![px, py, vx, vy], reward, dist < 0.05, elapsed))
    }
}

/// Torque-limited pendulum; `theta = 0` is upright.
#[derive(Clone, Debug)]
pub struct Pendulum {
    spec: EnvSpec,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    pub max_speed: f64,
}

impl Default for Pendulum {
    fn default() -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 3,
                action_box: ActionBox::symmetric(2.0, 1).unwrap(),
                max_steps: 200,
                dt: 0.05,
            },
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            max_speed: 8.0,
        }
    }
}

/// Wrap an angle into `[-pi, pi)`.
pub fn wrap_angle(theta: f64) -> f64 {
    (theta + PI).rem_euclid(2.0 * PI) - PI
}

impl Pendulum {
    pub fn observe(theta: f64, theta_dot: f64) -> Vec<f64> {
        vec![theta.cos(), theta.sin(), theta_dot]
    }

    pub fn angle(state: &[f64]) -> f64 {
        state[1].atan2(state[0])
    }

    /// `theta_ddot = -(g/l) sin(theta + pi) + u/(m l^2)`, written with
    /// `-sin(theta + pi) = sin(theta)` so the upright state is exact.
    pub fn angular_acceleration(&self, theta: f64, torque: f64) -> f64 {
        self.gravity / self.length * theta.sin() + torque / (self.mass * self.length * self.length)
    }

    /// Mechanical energy per unit inertia, `theta = 0` upright.
    pub fn energy(&self, theta: f64, theta_dot: f64) -> f64 {
        0.5 * theta_dot * theta_dot + self.gravity / self.length * theta.cos()
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        let theta = rng.uniform_range(-PI, PI);
        let theta_dot = rng.uniform_range(-1.0, 1.0);
        Self::observe(theta, theta_dot)
    }

    fn step(&self, state: &[f64], action: &[f64], elapsed: usize) -> Result<StepResult> {
        check_io(&self.spec, state, action)?;
        let theta = Self::angle(state);
        let theta_dot = state[2];
        let u = action[0];
        let reward = -(wrap_angle(theta).powi(2) + 0.1 * theta_dot * theta_dot + 0.001 * u * u);
        // semi-implicit Euler
        let new_dot = (theta_dot + self.angular_acceleration(theta, u) * self.spec.dt)
            .clamp(-self.max_speed, self.max_speed);
        let new_theta = theta + new_dot * self.spec.dt;
        Ok(finish(&self.spec, Self::observe(new_theta, new_dot), reward, false, elapsed))
    }
}

/// Scalar linear system `x' = 0.95 x + 0.1 a` with quadratic cost.
#[derive(Clone, Debug)]
pub struct Lqr1d {
    spec: EnvSpec,
}

impl Default for Lqr1d {
    fn default() -> Self {
        Self {
            spec: EnvSpec {
                state_dim: 1,
                action_box: ActionBox::symmetric(1.0, 1).unwrap(),
                max_steps: 100,
                dt: 1.0,
            },
        }
    }
}

impl Env for Lqr1d {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&self, rng: &mut Rng) -> Vec<f64> {
        vec![rng.uniform_range(-1.0, 1.0)]
    }

    fn step(&self, state: &[f64], action: &[f64], elapsed: usize) -> Result<StepResult> {
        check_io(&self.spec, state, action)?;
        let (x, a) = (state[0], action[0]);
        let reward = -(x * x + 0.01 * a * a);
        Ok(finish(&self.spec, vec![0.95 * x + 0.1 * a], reward, false, elapsed))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EnvKind {
    PointMass,
    Pendulum,
    Lqr1d,
}

impl EnvKind {
    pub fn build(self) -> Box<dyn Env> {
        match self {
            EnvKind::PointMass => Box::new(PointMass::default()),
            EnvKind::Pendulum => Box::new(Pendulum::default()),
            EnvKind::Lqr1d => Box::new(Lqr1d::default()),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointMass => "pointmass",
            EnvKind::Pendulum => "pendulum",
            EnvKind::Lqr1d => "lqr1d",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass" => Ok(EnvKind::PointMass),
            "pendulum" => Ok(EnvKind::Pendulum),
            "lqr1d" => Ok(EnvKind::Lqr1d),
            other => Err(invalid("env", format!("unknown environment '{other}' (pointmass | pendulum | lqr1d)"))),
        }
    }
}
