//! Vectorised classic-control environments with automatic reset.
//!
//! Observation bounds:
//! - cartpole: `[x, x_dot, theta, theta_dot]`; every observation returned
//!   satisfies `|x| <= 2.4 + 0.1`, `|theta| <= 0.2095 + 0.05`. Velocities are
//!   not clamped by the dynamics but stay well inside `|v| < 10` because an
//!   episode ends as soon as position or angle leave their band.
//! - pendulum: `[cos theta, sin theta, theta_dot]` with `|theta_dot| <= 8`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Cartpole,
    Pendulum,
}

impl std::fmt::Display for EnvId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EnvId::Cartpole => "cartpole",
            EnvId::Pendulum => "pendulum",
        })
    }
}

impl std::str::FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cartpole" => Ok(EnvId::Cartpole),
            "pendulum" => Ok(EnvId::Pendulum),
            other => Err(Error::Config(format!("unknown env '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionSpace {
    Discrete(usize),
    Box { dim: usize, low: f64, high: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub id: EnvId,
    pub horizon: usize,
    pub gamma: f64,
}

impl EnvSpec {
    pub fn cartpole() -> Self {
        Self {
            id: EnvId::Cartpole,
            horizon: 500,
            gamma: 0.99,
        }
    }

    pub fn pendulum() -> Self {
        Self {
            id: EnvId::Pendulum,
            horizon: 200,
            gamma: 0.99,
        }
    }

    pub fn default_for(id: EnvId) -> Self {
        match id {
            EnvId::Cartpole => Self::cartpole(),
            EnvId::Pendulum => Self::pendulum(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        match self.id {
            EnvId::Cartpole => 4,
            EnvId::Pendulum => 3,
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.id {
            EnvId::Cartpole => ActionSpace::Discrete(2),
            EnvId::Pendulum => ActionSpace::Box {
                dim: 1,
                low: -pendulum::MAX_TORQUE,
                high: pendulum::MAX_TORQUE,
            },
        }
    }

    fn state_dim(&self) -> usize {
        match self.id {
            EnvId::Cartpole => 4,
            EnvId::Pendulum => 2,
        }
    }
}

/// Actions for every instance. Continuous actions are row-major
/// `[n_envs x action_dim]`.
#[derive(Clone, Copy, Debug)]
pub enum Actions<'a> {
    Discrete(&'a [usize]),
    Continuous(&'a [f64]),
}

#[derive(Clone, Debug, Default)]
pub struct StepOutput {
    /// Row-major `[n_envs x obs_dim]`; reset observations for finished instances.
    pub observations: Vec<f64>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// `(instance, undiscounted return)` for each episode that ended this step.
    pub completed: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct VecEnvState {
    spec: EnvSpec,
    physics: Vec<f64>,
    steps: Vec<usize>,
    episode_returns: Vec<f64>,
    rngs: Vec<ChaCha8Rng>,
}

/// Creates `n_envs` instances. Instance `i` draws from its own RNG stream
/// derived from `(seed, i)`.
pub fn reset(spec: &EnvSpec, n_envs: usize, seed: u64) -> Result<(VecEnvState, Vec<f64>)> {
    spec.validate()?;
    if n_envs == 0 {
        return Err(Error::Config("n_envs must be >= 1".into()));
    }
    let sd = spec.state_dim();
    let mut state = VecEnvState {
        spec: *spec,
        physics: vec![0.0; n_envs * sd],
        steps: vec![0; n_envs],
        episode_returns: vec![0.0; n_envs],
        rngs: (0..n_envs)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                rng
            })
            .collect(),
    };
    let mut obs = vec![0.0; n_envs * spec.obs_dim()];
    for i in 0..n_envs {
        state.reset_instance(i);
        state.write_obs(i, &mut obs);
    }
    Ok((state, obs))
}

impl VecEnvState {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn n_envs(&self) -> usize {
        self.steps.len()
    }

    pub fn step_counts(&self) -> &[usize] {
        &self.steps
    }

    pub fn observations(&self) -> Vec<f64> {
        let mut obs = vec![0.0; self.n_envs() * self.spec.obs_dim()];
        for i in 0..self.n_envs() {
            self.write_obs(i, &mut obs);
        }
        obs
    }

    fn reset_instance(&mut self, i: usize) {
        let sd = self.spec.state_dim();
        let rng = &mut self.rngs[i];
        let s = &mut self.physics[i * sd..(i + 1) * sd];
        match self.spec.id {
            EnvId::Cartpole => {
                for v in s.iter_mut() {
                    *v = rng.gen_range(-0.05..0.05);
                }
            }
            EnvId::Pendulum => {
                s[0] = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                s[1] = rng.gen_range(-1.0..1.0);
            }
        }
        self.steps[i] = 0;
        self.episode_returns[i] = 0.0;
    }

    fn write_obs(&self, i: usize, obs: &mut [f64]) {
        let sd = self.spec.state_dim();
        let od = self.spec.obs_dim();
        let s = &self.physics[i * sd..(i + 1) * sd];
        let o = &mut obs[i * od..(i + 1) * od];
        match self.spec.id {
            EnvId::Cartpole => o.copy_from_slice(s),
            EnvId::Pendulum => {
                o[0] = s[0].cos();
                o[1] = s[0].sin();
                o[2] = s[1];
            }
        }
    }

    /// Advances every instance by one step, auto-resetting finished ones.
    pub fn step(&mut self, actions: Actions<'_>) -> Result<StepOutput> {
        let n = self.n_envs();
        let sd = self.spec.state_dim();
        let mut out = StepOutput {
            observations: vec![0.0; n * self.spec.obs_dim()],
            rewards: vec![0.0; n],
            dones: vec![false; n],
            completed: Vec::new(),
        };
        match (self.spec.action_space(), actions) {
            (ActionSpace::Discrete(k), Actions::Discrete(a)) => {
                check_dim("discrete actions", n, a.len())?;
                if let Some(bad) = a.iter().find(|&&x| x >= k) {
                    return Err(Error::Config(format!("action {bad} out of range 0..{k}")));
                }
            }
            (ActionSpace::Box { dim, .. }, Actions::Continuous(a)) => {
                check_dim("continuous actions", n * dim, a.len())?;
                if a.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("environment action".into()));
                }
            }
            _ => return Err(Error::Config("action type does not match env".into())),
        }
        for i in 0..n {
            let s = &mut self.physics[i * sd..(i + 1) * sd];
            let (reward, terminated) = match (self.spec.id, actions) {
                (EnvId::Cartpole, Actions::Discrete(a)) => cartpole::step(s, a[i]),
                (EnvId::Pendulum, Actions::Continuous(a)) => (pendulum::step(s, a[i]), false),
                _ => unreachable!("checked above"),
            };
            self.steps[i] += 1;
            self.episode_returns[i] += reward;
            out.rewards[i] = reward;
            let done = terminated || self.steps[i] >= self.spec.horizon;
            out.dones[i] = done;
            if done {
                out.completed.push((i, self.episode_returns[i]));
                self.reset_instance(i);
            }
            self.write_obs(i, &mut out.observations);
        }
        Ok(out)
    }
}

mod cartpole {
    const GRAVITY: f64 = 9.8;
    const MASS_CART: f64 = 1.0;
    const MASS_POLE: f64 = 0.1;
    const TOTAL_MASS: f64 = MASS_CART + MASS_POLE;
    const HALF_LENGTH: f64 = 0.5;
    const POLE_MASS_LENGTH: f64 = MASS_POLE * HALF_LENGTH;
    const FORCE_MAG: f64 = 10.0;
    const TAU: f64 = 0.02;
    pub const X_THRESHOLD: f64 = 2.4;
    pub const THETA_THRESHOLD: f64 = 12.0 * 2.0 * std::f64::consts::PI / 360.0;

    /// Euler step; reward 1 on every step, termination included.
    pub fn step(s: &mut [f64], action: usize) -> (f64, bool) {
        let (x, x_dot, theta, theta_dot) = (s[0], s[1], s[2], s[3]);
        let force = if action == 1 { FORCE_MAG } else { -FORCE_MAG };
        let (sin, cos) = theta.sin_cos();
        let temp = (force + POLE_MASS_LENGTH * theta_dot * theta_dot * sin) / TOTAL_MASS;
        let theta_acc = (GRAVITY * sin - cos * temp)
            / (HALF_LENGTH * (4.0 / 3.0 - MASS_POLE * cos * cos / TOTAL_MASS));
        let x_acc = temp - POLE_MASS_LENGTH * theta_acc * cos / TOTAL_MASS;
        s[0] = x + TAU * x_dot;
        s[1] = x_dot + TAU * x_acc;
        s[2] = theta + TAU * theta_dot;
        s[3] = theta_dot + TAU * theta_acc;
        let terminated = s[0].abs() > X_THRESHOLD || s[2].abs() > THETA_THRESHOLD;
        (1.0, terminated)
    }
}

mod pendulum {
    use std::f64::consts::PI;

    pub const MAX_TORQUE: f64 = 2.0;
    const MAX_SPEED: f64 = 8.0;
    const G: f64 = 10.0;
    const MASS: f64 = 1.0;
    const LENGTH: f64 = 1.0;
    const DT: f64 = 0.05;

    fn angle_normalize(x: f64) -> f64 {
        (x + PI).rem_euclid(2.0 * PI) - PI
    }

    /// Returns the negated quadratic cost of the pre-step state.
    pub fn step(s: &mut [f64], torque: f64) -> f64 {
        let u = torque.clamp(-MAX_TORQUE, MAX_TORQUE);
        let (th, th_dot) = (s[0], s[1]);
        let cost = angle_normalize(th).powi(2) + 0.1 * th_dot * th_dot + 0.001 * u * u;
        let new_dot = (th_dot
            + (3.0 * G / (2.0 * LENGTH) * th.sin() + 3.0 / (MASS * LENGTH * LENGTH) * u) * DT)
            .clamp(-MAX_SPEED, MAX_SPEED);
        s[0] = th + new_dot * DT;
        s[1] = new_dot;
        -cost
    }
}
