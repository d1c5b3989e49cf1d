//! Tracking MDP over the learned body model (or the plant), task generators,
//! workspace sampling and a vectorised runner.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::actuation::{Actuator, ActuatorParams, PidGains};
use crate::dataset::Directions;
use crate::geometry::{ray_plane_intersect, tip_tangent, GeometryError, KeyPointSet, Plane, Point3, Vec3};
use crate::hwbnn::HwbnnModel;
use crate::plant::{HysteresisState, Plant, PlantError, PlantParams, Pressures};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment setup: {0}")]
    Config(String),
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("action contains a non-finite value")]
    InvalidAction,
    #[error("environment fault at step {step}: {message}")]
    Fault { step: usize, message: String },
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// One environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition<I> {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub info: I,
}

pub trait Environment: Send {
    type Info: Clone + Send + std::fmt::Debug;

    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Symmetric per-component bound on actions.
    fn action_bound(&self) -> f64;
    fn reset(&mut self) -> Result<Vec<f64>, EnvError>;
    fn step(&mut self, action: &[f64]) -> Result<Transition<Self::Info>, EnvError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvMode {
    /// Transitions through the learned model.
    Surrogate,
    /// Transitions through the plant with PID actuation.
    Deploy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMode {
    TipOnly,
    WholeBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Circle,
    Square,
    LaserCircle,
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "circle" => Ok(TaskKind::Circle),
            "square" => Ok(TaskKind::Square),
            "laser-circle" => Ok(TaskKind::LaserCircle),
            other => Err(format!("unknown task `{other}` (expected circle, square or laser-circle)")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Circle => "circle",
            TaskKind::Square => "square",
            TaskKind::LaserCircle => "laser-circle",
        })
    }
}

/// What the target trajectory is compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tracking {
    Tip,
    /// Intersection of the tip tangent ray with a plane.
    Laser { plane: Plane },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub tracking: Tracking,
    pub waypoints: Vec<Point3>,
    /// Full-body targets, one per waypoint, used in whole-body error mode.
    pub body_targets: Option<Vec<Vec<f64>>>,
    pub episode_length: usize,
    /// Steps spent on each waypoint before advancing.
    pub dwell: usize,
    pub error_mode: ErrorMode,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.waypoints.is_empty() {
            return Err(EnvError::Config("task has no waypoints".into()));
        }
        if self.episode_length == 0 || self.dwell == 0 {
            return Err(EnvError::Config("episode length and dwell must be positive".into()));
        }
        if self.error_mode == ErrorMode::WholeBody {
            match &self.body_targets {
                Some(b) if b.len() == self.waypoints.len() => {}
                _ => return Err(EnvError::Config("whole-body error mode needs one body target per waypoint".into())),
            }
        }
        Ok(())
    }

    /// Waypoint index active at step `t`.
    pub fn waypoint_index(&self, t: usize) -> usize {
        (t / self.dwell) % self.waypoints.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskParams {
    pub kind: TaskKind,
    pub center: Point3,
    /// Circle radius or square side, mm.
    pub size: f64,
    /// Normal of the plane the path lies in (ignored for laser tasks).
    pub normal: Vec3,
    pub waypoints: usize,
    pub dwell: usize,
    pub episode_length: usize,
    pub error_mode: ErrorMode,
    pub laser_plane: Option<Plane>,
}

pub fn circle_waypoints(center: &Point3, radius: f64, normal: Vec3, count: usize) -> Result<Vec<Point3>, EnvError> {
    if !(radius > 0.0) || count == 0 {
        return Err(EnvError::Config("circle needs a positive radius and at least one waypoint".into()));
    }
    let (u, v) = Plane::through_point(center, normal)?.basis();
    Ok((0..count)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / count as f64;
            center + radius * (a.cos() * u + a.sin() * v)
        })
        .collect())
}

/// Waypoints evenly spaced by arc length around a square, starting at a
/// corner. Every corner is a waypoint when `count` is a multiple of four.
pub fn square_waypoints(center: &Point3, side: f64, normal: Vec3, count: usize) -> Result<Vec<Point3>, EnvError> {
    if !(side > 0.0) || count == 0 {
        return Err(EnvError::Config("square needs a positive side and at least one waypoint".into()));
    }
    let (u, v) = Plane::through_point(center, normal)?.basis();
    let h = side / 2.0;
    let corners = [(h, h), (-h, h), (-h, -h), (h, -h)].map(|(a, b)| center + a * u + b * v);
    Ok((0..count)
        .map(|k| {
            let s = 4.0 * k as f64 / count as f64;
            let edge = (s.floor() as usize).min(3);
            let f = s - edge as f64;
            let (a, b) = (corners[edge], corners[(edge + 1) % 4]);
            a + (b - a) * f
        })
        .collect())
}

pub fn make_task(params: &TaskParams) -> Result<TaskSpec, EnvError> {
    let (tracking, center, normal) = match params.kind {
        TaskKind::LaserCircle => {
            let plane = params
                .laser_plane
                .ok_or_else(|| EnvError::Config("laser task needs a target plane".into()))?;
            let center = plane.project(&params.center);
            let normal = plane.normal();
            (Tracking::Laser { plane }, center, normal)
        }
        _ => (Tracking::Tip, params.center, params.normal),
    };
    let waypoints = match params.kind {
        TaskKind::Square => square_waypoints(&center, params.size, normal, params.waypoints)?,
        _ => circle_waypoints(&center, params.size, normal, params.waypoints)?,
    };
    let task = TaskSpec {
        kind: params.kind,
        tracking,
        waypoints,
        body_targets: None,
        episode_length: params.episode_length,
        dwell: params.dwell,
        error_mode: params.error_mode,
    };
    if task.error_mode == ErrorMode::TipOnly {
        task.validate()?;
    }
    Ok(task)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub mode: EnvMode,
    pub pressure_min: f64,
    pub pressure_max: f64,
    pub rest_pressure: Pressures,
    /// kPa per component.
    pub action_bound: f64,
    /// Divisor for positions in the observation, mm.
    pub length_scale: f64,
    /// Divisor for the tracking-error block of the observation, mm.
    pub error_scale: f64,
    /// Reward is `exp(-distance / reward_length)`, distance in mm.
    pub reward_length: f64,
    /// Distance charged when the laser ray misses the plane, mm.
    pub miss_penalty: f64,
    pub pid: PidGains,
    pub actuator: ActuatorParams,
    pub plant: PlantParams,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::for_plant(&PlantParams::default(), EnvMode::Surrogate)
    }
}

impl EnvConfig {
    pub fn for_plant(plant: &PlantParams, mode: EnvMode) -> Self {
        Self {
            mode,
            pressure_min: plant.pressure_min,
            pressure_max: plant.pressure_max,
            rest_pressure: [plant.pressure_min.max(0.0).min(plant.pressure_max); 3],
            action_bound: 3.0,
            length_scale: plant.length_rest,
            error_scale: 10.0,
            reward_length: 1.0,
            miss_penalty: 100.0,
            pid: PidGains::default(),
            actuator: ActuatorParams {
                min_pressure: plant.pressure_min,
                max_pressure: plant.pressure_max,
                ..ActuatorParams::default()
            },
            plant: *plant,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.pressure_min < self.pressure_max) {
            return Err(EnvError::Config("empty pressure range".into()));
        }
        if self.rest_pressure.iter().any(|p| !(self.pressure_min..=self.pressure_max).contains(p)) {
            return Err(EnvError::Config("rest pressure outside the pressure range".into()));
        }
        if !(self.action_bound > 0.0 && self.length_scale > 0.0 && self.error_scale > 0.0 && self.reward_length > 0.0 && self.miss_penalty >= 0.0) {
            return Err(EnvError::Config("action bound, scales and miss penalty must be positive".into()));
        }
        self.pid.validate().map_err(EnvError::Config)?;
        self.actuator.validate().map_err(EnvError::Config)?;
        Ok(())
    }
}

/// Where body poses come from.
#[derive(Debug, Clone)]
pub enum BodySource {
    Surrogate(Arc<HwbnnModel>),
    Deploy { plant: Plant, actuator: Actuator },
}

impl BodySource {
    pub fn deploy(cfg: &EnvConfig) -> Result<Self, EnvError> {
        Ok(BodySource::Deploy {
            plant: Plant::new(cfg.plant, cfg.seed)?,
            actuator: Actuator::new(cfg.pid, cfg.actuator, cfg.rest_pressure),
        })
    }

    fn n_keys(&self) -> usize {
        match self {
            BodySource::Surrogate(m) => m.n_keys,
            BodySource::Deploy { plant, .. } => plant.params().n_keys,
        }
    }
}

/// Per-step record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Index of the step just taken.
    pub t: usize,
    pub waypoint: usize,
    /// Commanded pressures.
    pub p: Pressures,
    /// Pressures actually reached by the actuators (equal to `p` in surrogate mode).
    pub p_actual: Pressures,
    pub d: Directions,
    pub tip: Point3,
    /// Tracked point: the tip, or the laser hit (None on a miss).
    pub point: Option<Point3>,
    pub target: Point3,
    /// Distance between tracked point and target, mm.
    pub error: f64,
    pub reward: f64,
}

/// Soft-robot tracking environment.
#[derive(Debug, Clone)]
pub struct SoftRobotEnv {
    cfg: EnvConfig,
    task: Arc<TaskSpec>,
    source: BodySource,
    n_keys: usize,
    p: Pressures,
    d: Directions,
    t: usize,
    body: Vec<f64>,
}

pub fn obs_dim_for(n_keys: usize) -> usize {
    6 * n_keys + 7
}

fn sign_with_carry(delta: f64, previous: f64) -> f64 {
    if delta > 0.0 {
        1.0
    } else if delta < 0.0 {
        -1.0
    } else {
        previous
    }
}

impl SoftRobotEnv {
    pub fn new(source: BodySource, task: Arc<TaskSpec>, cfg: EnvConfig) -> Result<Self, EnvError> {
        cfg.validate()?;
        task.validate()?;
        let n_keys = source.n_keys();
        if let Some(targets) = &task.body_targets {
            if let Some(bad) = targets.iter().find(|b| b.len() != 3 * n_keys) {
                return Err(EnvError::Dimension { expected: 3 * n_keys, got: bad.len() });
            }
        }
        if let BodySource::Surrogate(model) = &source {
            if model.mlp.output_size() != 3 * n_keys {
                return Err(EnvError::Dimension {
                    expected: 3 * n_keys,
                    got: model.mlp.output_size(),
                });
            }
        }
        let mut env = Self {
            p: cfg.rest_pressure,
            d: [1.0; 3],
            t: 0,
            body: Vec::new(),
            cfg,
            task,
            source,
            n_keys,
        };
        env.reset()?;
        Ok(env)
    }

    pub fn surrogate(model: Arc<HwbnnModel>, task: Arc<TaskSpec>, cfg: EnvConfig) -> Result<Self, EnvError> {
        Self::new(BodySource::Surrogate(model), task, cfg)
    }

    pub fn deploy(task: Arc<TaskSpec>, cfg: EnvConfig) -> Result<Self, EnvError> {
        Self::new(BodySource::deploy(&cfg)?, task, cfg)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn pressures(&self) -> Pressures {
        self.p
    }

    pub fn directions(&self) -> Directions {
        self.d
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn body(&self) -> &[f64] {
        &self.body
    }

    fn tip_of(body: &[f64]) -> Point3 {
        let n = body.len();
        Point3::new(body[n - 3], body[n - 2], body[n - 1])
    }

    fn current_target(&self) -> (usize, Point3) {
        let k = self.task.waypoint_index(self.t);
        (k, self.task.waypoints[k])
    }

    /// Laser hit for a body, or None if the ray misses.
    fn laser_hit(body: &[f64], plane: &Plane) -> Option<Point3> {
        let keys = KeyPointSet::from_flat(body).ok()?;
        let dir = tip_tangent(&keys).ok()?;
        ray_plane_intersect(&keys.tip(), &dir, plane).ok()
    }

    /// Tracked point and the error vector fed to the policy.
    fn tracked(&self, body: &[f64], target: &Point3) -> (Option<Point3>, Vec3) {
        let tip = Self::tip_of(body);
        match &self.task.tracking {
            Tracking::Tip => (Some(tip), target - tip),
            Tracking::Laser { plane } => match Self::laser_hit(body, plane) {
                Some(hit) => (Some(hit), target - hit),
                None => (None, target - plane.project(&tip)),
            },
        }
    }

    fn observe(&self) -> Vec<f64> {
        let scale = self.cfg.length_scale;
        let escale = self.cfg.error_scale;
        let (k, target) = self.current_target();
        let mut obs = Vec::with_capacity(obs_dim_for(self.n_keys));
        obs.extend(self.body.iter().map(|v| v / scale));
        match (self.task.error_mode, &self.task.body_targets) {
            (ErrorMode::WholeBody, Some(targets)) => {
                obs.extend(targets[k].iter().zip(&self.body).map(|(a, b)| (a - b) / escale));
            }
            _ => {
                obs.extend(std::iter::repeat_n(0.0, 3 * (self.n_keys - 1)));
                let (_, e) = self.tracked(&self.body, &target);
                obs.extend(e.iter().map(|v| v / escale));
            }
        }
        let range = self.cfg.pressure_max - self.cfg.pressure_min;
        obs.extend(self.p.iter().map(|p| (p - self.cfg.pressure_min) / range));
        obs.extend_from_slice(&self.d);
        obs.push(self.t as f64 / self.task.episode_length as f64);
        obs
    }

    fn body_at(&mut self, p: Pressures, d: Directions) -> Result<(Vec<f64>, Pressures), EnvError> {
        let step = self.t;
        let fault = |message: String| EnvError::Fault { step, message };
        let (body, actual) = match &mut self.source {
            BodySource::Surrogate(model) => (model.predict(&p, &d).map_err(|e| fault(e.to_string()))?, p),
            BodySource::Deploy { plant, actuator } => {
                let mut err = None;
                let actual = actuator.run_step(&p, |q| {
                    if err.is_none() {
                        err = plant.apply_pressure(*q).err();
                    }
                });
                if let Some(e) = err {
                    return Err(e.into());
                }
                (plant.eval(actual)?.flatten(), actual)
            }
        };
        if body.iter().any(|v| !v.is_finite()) {
            return Err(fault("non-finite body prediction".into()));
        }
        Ok((body, actual))
    }

    /// Steps a fixed command through the body source without touching the
    /// episode clock. Used to query poses.
    pub fn query(&mut self, p: Pressures, d: Directions) -> Result<Vec<f64>, EnvError> {
        Ok(self.body_at(p, d)?.0)
    }
}

impl Environment for SoftRobotEnv {
    type Info = StepInfo;

    fn obs_dim(&self) -> usize {
        obs_dim_for(self.n_keys)
    }

    fn action_dim(&self) -> usize {
        3
    }

    fn action_bound(&self) -> f64 {
        self.cfg.action_bound
    }

    fn reset(&mut self) -> Result<Vec<f64>, EnvError> {
        self.p = self.cfg.rest_pressure;
        self.d = [1.0; 3];
        self.t = 0;
        if let BodySource::Deploy { plant, actuator } = &mut self.source {
            *plant = Plant::new(self.cfg.plant, self.cfg.seed)?;
            plant.set_state(HysteresisState(self.cfg.rest_pressure));
            actuator.reset(self.cfg.rest_pressure);
        }
        let (body, _) = self.body_at(self.p, self.d)?;
        self.body = body;
        Ok(self.observe())
    }

    fn step(&mut self, action: &[f64]) -> Result<Transition<StepInfo>, EnvError> {
        if action.len() != 3 {
            return Err(EnvError::Dimension { expected: 3, got: action.len() });
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(EnvError::InvalidAction);
        }
        let bound = self.cfg.action_bound;
        let mut p = self.p;
        let mut d = self.d;
        for c in 0..3 {
            let next = (self.p[c] + action[c].clamp(-bound, bound)).clamp(self.cfg.pressure_min, self.cfg.pressure_max);
            d[c] = sign_with_carry(next - self.p[c], self.d[c]);
            p[c] = next;
        }
        let (waypoint, target) = self.current_target();
        let (body, actual) = self.body_at(p, d)?;
        let (point, _) = self.tracked(&body, &target);
        let error = point.map_or(self.cfg.miss_penalty, |q| (q - target).norm());
        let distance = match (self.task.error_mode, &self.task.body_targets) {
            (ErrorMode::WholeBody, Some(targets)) => {
                targets[waypoint].iter().zip(&body).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
            }
            _ => error,
        };
        let reward = (-distance / self.cfg.reward_length).exp();
        let info = StepInfo {
            t: self.t,
            waypoint,
            p,
            p_actual: actual,
            d,
            tip: Self::tip_of(&body),
            point,
            target,
            error,
            reward,
        };
        self.p = p;
        self.d = d;
        self.body = body;
        self.t += 1;
        let done = self.t >= self.task.episode_length;
        Ok(Transition {
            obs: self.observe(),
            reward,
            done,
            info,
        })
    }
}

/// Result of one vectorised step for one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct VecStep<I> {
    /// Next observation; the reset observation when the episode ended.
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// Final observation of an episode that just ended.
    pub terminal_obs: Option<Vec<f64>>,
    pub info: I,
}

/// Batch of independent environments stepped in lock-step.
#[derive(Debug, Clone)]
pub struct VecEnv<E> {
    envs: Vec<E>,
    parallel: bool,
}

fn step_one<E: Environment>(env: &mut E, action: &[f64]) -> Result<VecStep<E::Info>, EnvError> {
    let tr = env.step(action)?;
    if tr.done {
        let fresh = env.reset()?;
        Ok(VecStep {
            obs: fresh,
            reward: tr.reward,
            done: true,
            terminal_obs: Some(tr.obs),
            info: tr.info,
        })
    } else {
        Ok(VecStep {
            obs: tr.obs,
            reward: tr.reward,
            done: false,
            terminal_obs: None,
            info: tr.info,
        })
    }
}

impl<E: Environment> VecEnv<E> {
    pub fn new(envs: Vec<E>) -> Result<Self, EnvError> {
        let first = envs.first().ok_or_else(|| EnvError::Config("no environments".into()))?;
        let (o, a) = (first.obs_dim(), first.action_dim());
        if envs.iter().any(|e| e.obs_dim() != o || e.action_dim() != a) {
            return Err(EnvError::Config("environments disagree on observation or action size".into()));
        }
        Ok(Self { envs, parallel: true })
    }

    /// Runs environments on the rayon pool when `parallel` is set.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn len(&self) -> usize {
        self.envs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.envs.is_empty()
    }

    pub fn envs(&self) -> &[E] {
        &self.envs
    }

    pub fn obs_dim(&self) -> usize {
        self.envs[0].obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.envs[0].action_dim()
    }

    pub fn action_bound(&self) -> f64 {
        self.envs[0].action_bound()
    }

    pub fn reset_all(&mut self) -> Result<Vec<Vec<f64>>, EnvError> {
        self.envs.iter_mut().map(|e| e.reset()).collect()
    }

    /// Steps every environment with its action. Results keep input order;
    /// a fault in one environment is reported at its index only.
    pub fn step(&mut self, actions: &[Vec<f64>]) -> Result<Vec<Result<VecStep<E::Info>, EnvError>>, EnvError> {
        if actions.len() != self.envs.len() {
            return Err(EnvError::Dimension {
                expected: self.envs.len(),
                got: actions.len(),
            });
        }
        Ok(if self.parallel {
            self.envs
                .par_iter_mut()
                .zip(actions.par_iter())
                .map(|(env, a)| step_one(env, a))
                .collect()
        } else {
            self.envs.iter_mut().zip(actions).map(|(env, a)| step_one(env, a)).collect()
        })
    }
}

/// Tip (and optionally body) positions sampled over a pressure grid.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub bodies: Vec<Vec<f64>>,
    pub tips: Vec<Point3>,
}

impl Workspace {
    /// Evaluates `body_fn` on a `steps`-per-axis pressure grid, once per
    /// direction-sign combination.
    pub fn sample(
        mut body_fn: impl FnMut(&Pressures, &Directions) -> Result<Vec<f64>, EnvError>,
        min: f64,
        max: f64,
        steps: usize,
    ) -> Result<Self, EnvError> {
        if steps < 2 {
            return Err(EnvError::Config("workspace grid needs at least two steps per axis".into()));
        }
        let level = |i: usize| min + (max - min) * i as f64 / (steps - 1) as f64;
        let mut bodies = Vec::new();
        for i in 0..steps {
            for j in 0..steps {
                for k in 0..steps {
                    let p = [level(i), level(j), level(k)];
                    for mask in 0..8 {
                        let d: Directions = std::array::from_fn(|c| if mask >> c & 1 == 1 { -1.0 } else { 1.0 });
                        bodies.push(body_fn(&p, &d)?);
                    }
                }
            }
        }
        let tips = bodies.iter().map(|b| SoftRobotEnv::tip_of(b)).collect();
        Ok(Self { bodies, tips })
    }

    pub fn of_model(model: &HwbnnModel, min: f64, max: f64, steps: usize) -> Result<Self, EnvError> {
        Self::sample(
            |p, d| model.predict(p, d).map_err(|e| EnvError::Fault { step: 0, message: e.to_string() }),
            min,
            max,
            steps,
        )
    }

    /// Largest tip distance from the z axis.
    pub fn tip_radius(&self) -> f64 {
        self.tips.iter().map(|t| t.x.hypot(t.y)).fold(0.0, f64::max)
    }

    /// Horizontal circle about the z axis with radius `fraction` of the
    /// workspace radius, at the middle of the heights the tip reaches at
    /// that radius.
    pub fn tip_circle(&self, fraction: f64) -> Result<(Point3, f64), EnvError> {
        let radius = fraction * self.tip_radius();
        if !(radius > 0.0) {
            return Err(EnvError::Config("degenerate tip workspace".into()));
        }
        let tol = (0.05 * radius).max(0.5);
        let zs: Vec<f64> = self
            .tips
            .iter()
            .filter(|t| (t.x.hypot(t.y) - radius).abs() <= tol)
            .map(|t| t.z)
            .collect();
        if zs.is_empty() {
            return Err(EnvError::Config("no workspace samples at the requested radius".into()));
        }
        let lo = zs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok((Point3::new(0.0, 0.0, 0.5 * (lo + hi)), radius))
    }

    pub fn nearest_tip_distance(&self, point: &Point3) -> f64 {
        self.tips.iter().map(|t| (t - point).norm()).fold(f64::INFINITY, f64::min)
    }

    /// Laser hits of every sampled body on `plane`.
    pub fn laser_hits(&self, plane: &Plane) -> Vec<Point3> {
        self.bodies.iter().filter_map(|b| SoftRobotEnv::laser_hit(b, plane)).collect()
    }

    /// Body whose tip lies closest to `point`.
    pub fn nearest_body(&self, point: &Point3) -> &[f64] {
        let idx = self
            .tips
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - point).norm().total_cmp(&(b.1 - point).norm()))
            .map(|(i, _)| i)
            .expect("workspace is never empty");
        &self.bodies[idx]
    }
}

/// Largest pairwise distance within a point set.
pub fn diameter(points: &[Point3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDefaults {
    pub waypoints: usize,
    pub dwell: usize,
    pub episode_length: usize,
    /// Path size relative to the workspace radius.
    pub fraction: f64,
    /// Laser plane height above the base, mm.
    pub laser_height: f64,
    pub error_mode: ErrorMode,
}

impl Default for TaskDefaults {
    fn default() -> Self {
        Self {
            waypoints: 40,
            dwell: 10,
            episode_length: 400,
            fraction: 0.5,
            laser_height: 100.0,
            error_mode: ErrorMode::TipOnly,
        }
    }
}

/// Task geometry and its reference scale.
#[derive(Debug, Clone)]
pub struct SizedTask {
    pub task: TaskSpec,
    /// Workspace radius for tip tasks; plane-projected workspace diameter
    /// for laser tasks.
    pub workspace_scale: f64,
}

/// Builds a task sized to the sampled workspace.
pub fn sized_task(kind: TaskKind, ws: &Workspace, defaults: &TaskDefaults) -> Result<SizedTask, EnvError> {
    let (params, scale) = match kind {
        TaskKind::Circle | TaskKind::Square => {
            let (center, radius) = ws.tip_circle(defaults.fraction)?;
            let size = if kind == TaskKind::Circle { radius } else { radius * std::f64::consts::SQRT_2 };
            (
                TaskParams {
                    kind,
                    center,
                    size,
                    normal: Vec3::z(),
                    waypoints: defaults.waypoints,
                    dwell: defaults.dwell,
                    episode_length: defaults.episode_length,
                    error_mode: defaults.error_mode,
                    laser_plane: None,
                },
                ws.tip_radius(),
            )
        }
        TaskKind::LaserCircle => {
            let plane = Plane::horizontal(defaults.laser_height);
            let hits = ws.laser_hits(&plane);
            if hits.is_empty() {
                return Err(EnvError::Config("the laser never reaches the target plane".into()));
            }
            let reach = hits.iter().map(|h| h.x.hypot(h.y)).fold(0.0, f64::max);
            (
                TaskParams {
                    kind,
                    center: Point3::new(0.0, 0.0, defaults.laser_height),
                    size: defaults.fraction * reach,
                    normal: Vec3::z(),
                    waypoints: defaults.waypoints,
                    dwell: defaults.dwell,
                    episode_length: defaults.episode_length,
                    error_mode: ErrorMode::TipOnly,
                    laser_plane: Some(plane),
                },
                diameter(&hits),
            )
        }
    };
    let mut task = make_task(&params)?;
    if task.error_mode == ErrorMode::WholeBody {
        task.body_targets = Some(task.waypoints.iter().map(|w| ws.nearest_body(w).to_vec()).collect());
        task.validate()?;
    }
    Ok(SizedTask {
        task,
        workspace_scale: scale,
    })
}

/// All steps of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub steps: Vec<StepInfo>,
}

impl EpisodeLog {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    pub fn mean_error(&self) -> f64 {
        self.steps.iter().map(|s| s.error).sum::<f64>() / self.steps.len().max(1) as f64
    }

    pub fn max_error(&self) -> f64 {
        self.steps.iter().map(|s| s.error).fold(0.0, f64::max)
    }

    /// Mean error of the steps aimed at each waypoint.
    pub fn per_waypoint_errors(&self, waypoints: usize) -> Vec<f64> {
        let mut sum = vec![0.0; waypoints];
        let mut count = vec![0usize; waypoints];
        for s in &self.steps {
            sum[s.waypoint] += s.error;
            count[s.waypoint] += 1;
        }
        sum.iter().zip(&count).map(|(s, &c)| if c == 0 { f64::NAN } else { s / c as f64 }).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), EnvError> {
        let io = |source| EnvError::Io {
            path: path.to_owned(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
        let header = [
            "t", "p1", "p2", "p3", "d1", "d2", "d3", "tip_x", "tip_y", "tip_z", "target_x", "target_y", "target_z", "reward",
            "point_x", "point_y", "point_z", "error",
        ];
        w.write_record(header).map_err(|e| io(e.into()))?;
        for s in &self.steps {
            let mut row = vec![s.t.to_string()];
            row.extend(s.p.iter().map(f64::to_string));
            row.extend(s.d.iter().map(|d| (*d as i32).to_string()));
            row.extend(s.tip.iter().map(f64::to_string));
            row.extend(s.target.iter().map(f64::to_string));
            row.push(s.reward.to_string());
            match s.point {
                Some(q) => row.extend(q.iter().map(f64::to_string)),
                None => row.extend(["", "", ""].map(String::from)),
            }
            row.push(s.error.to_string());
            w.write_record(&row).map_err(|e| io(e.into()))?;
        }
        w.flush().map_err(io)
    }
}

/// Runs one full episode from reset under `policy`.
pub fn run_episode(env: &mut SoftRobotEnv, mut policy: impl FnMut(&[f64]) -> Vec<f64>) -> Result<EpisodeLog, EnvError> {
    let mut obs = env.reset()?;
    let mut steps = Vec::with_capacity(env.task().episode_length);
    loop {
        let tr = env.step(&policy(&obs))?;
        steps.push(tr.info);
        if tr.done {
            return Ok(EpisodeLog { steps });
        }
        obs = tr.obs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwbnn::{Architecture, InputMode};
    use crate::dataset::Sample;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_model() -> Arc<HwbnnModel> {
        let samples: Vec<Sample> = (0..8)
            .map(|i| Sample {
                p: [i as f64 * 7.0, 60.0 - i as f64 * 5.0, 30.0],
                d: [1.0; 3],
                y: vec![0.0; 15],
            })
            .collect();
        Arc::new(HwbnnModel::new_for(&samples, Architecture::new(2, 16), InputMode::WithDirections, 5, 3).unwrap())
    }

    fn circle_task(kind: TaskKind) -> Arc<TaskSpec> {
        let plane = (kind == TaskKind::LaserCircle).then(|| Plane::horizontal(150.0));
        Arc::new(
            make_task(&TaskParams {
                kind,
                center: Point3::new(0.0, 0.0, 65.0),
                size: 15.0,
                normal: Vec3::z(),
                waypoints: 8,
                dwell: 3,
                episode_length: 20,
                error_mode: ErrorMode::TipOnly,
                laser_plane: plane,
            })
            .unwrap(),
        )
    }

    #[test]
    fn circle_geometry() {
        let c = Point3::new(1.0, 2.0, 3.0);
        let w = circle_waypoints(&c, 4.0, Vec3::z(), 4).unwrap();
        assert_eq!(w.len(), 4);
        for (i, p) in w.iter().enumerate() {
            assert!(((p - c).norm() - 4.0).abs() < 1e-12);
            let q = w[(i + 1) % 4];
            assert!((p - c).dot(&(q - c)).abs() < 1e-9);
        }
        assert!(circle_waypoints(&c, 0.0, Vec3::z(), 4).is_err());
    }

    #[test]
    fn square_geometry() {
        let c = Point3::origin();
        let w = square_waypoints(&c, 8.0, Vec3::z(), 16).unwrap();
        let perimeter: f64 = (0..16).map(|i| (w[(i + 1) % 16] - w[i]).norm()).sum();
        assert!((perimeter - 32.0).abs() < 1e-9);
        for i in 0..16 {
            assert!(((w[(i + 1) % 16] - w[i]).norm() - 2.0).abs() < 1e-9);
        }
        for k in [0, 4, 8, 12] {
            assert!((w[k].x.abs() - 4.0).abs() < 1e-9 && (w[k].y.abs() - 4.0).abs() < 1e-9);
        }
        assert!(square_waypoints(&c, -1.0, Vec3::z(), 4).is_err());
    }

    #[test]
    fn laser_waypoints_lie_on_the_plane() {
        let task = circle_task(TaskKind::LaserCircle);
        for w in &task.waypoints {
            assert!((w.z - 150.0).abs() < 1e-12);
        }
    }

    #[test]
    fn observation_layout_and_reset() {
        let task = circle_task(TaskKind::Circle);
        let cfg = EnvConfig::default();
        let mut env = SoftRobotEnv::surrogate(tiny_model(), task.clone(), cfg.clone()).unwrap();
        let a = env.reset().unwrap();
        let b = env.reset().unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 37);
        let body = env.body().to_vec();
        let tip = Point3::new(body[12], body[13], body[14]);
        let e = task.waypoints[0] - tip;
        for c in 0..3 {
            assert_eq!(a[27 + c], e[c] / cfg.error_scale);
        }
        assert_eq!(&a[30..36], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(a[36], 0.0);
    }

    #[test]
    fn surrogate_step_matches_direct_model_query() {
        let model = tiny_model();
        let mut env = SoftRobotEnv::surrogate(model.clone(), circle_task(TaskKind::Circle), EnvConfig::default()).unwrap();
        env.step(&[2.0, 1.0, 0.5]).unwrap();
        let tr = env.step(&[-1.0, 0.0, 5.0]).unwrap();
        assert_eq!(tr.info.p, [1.0, 1.0, 3.5]);
        assert_eq!(tr.info.d, [-1.0, 1.0, 1.0]);
        let direct = model.predict(&[1.0, 1.0, 3.5], &[-1.0, 1.0, 1.0]).unwrap();
        assert_eq!(env.body(), direct.as_slice());
        let tip = Point3::new(direct[12], direct[13], direct[14]);
        assert_eq!(tr.info.error, (tr.info.target - tip).norm());
        assert_eq!(tr.reward, (-tr.info.error).exp());
    }

    #[test]
    fn reward_examples() {
        assert_eq!((-0.0f64).exp(), 1.0);
        assert!(((-1.0f64).exp() - 0.3679).abs() < 1e-4);
    }

    #[test]
    fn episode_terminates_and_waypoints_advance() {
        let mut env = SoftRobotEnv::surrogate(tiny_model(), circle_task(TaskKind::Circle), EnvConfig::default()).unwrap();
        let log = run_episode(&mut env, |_| vec![0.5, 0.0, -0.5]).unwrap();
        assert_eq!(log.steps.len(), 20);
        let idx: Vec<usize> = log.steps.iter().map(|s| s.waypoint).collect();
        assert_eq!(&idx[..7], &[0, 0, 0, 1, 1, 1, 2]);
        assert_eq!(log.per_waypoint_errors(8).len(), 8);
    }

    #[test]
    fn laser_env_reports_hits_on_plane() {
        let mut cfg = EnvConfig::default();
        cfg.plant.hysteresis_halfwidth = 1.6;
        let mut env = SoftRobotEnv::deploy(circle_task(TaskKind::LaserCircle), cfg).unwrap();
        let tr = env.step(&[3.0, 0.0, 0.0]).unwrap();
        let hit = tr.info.point.unwrap();
        assert!((hit.z - 150.0).abs() < 1e-9);
        assert!((tr.info.error - (hit - tr.info.target).norm()).abs() < 1e-12);
    }

    #[test]
    fn deploy_mode_tracks_commanded_pressure() {
        let mut cfg = EnvConfig::default();
        cfg.plant.hysteresis_halfwidth = 1.6;
        let mut env = SoftRobotEnv::deploy(circle_task(TaskKind::Circle), cfg).unwrap();
        for _ in 0..5 {
            env.step(&[3.0, 1.0, 0.0]).unwrap();
        }
        let tr = env.step(&[-3.0, 0.0, 0.0]).unwrap();
        for (a, b) in tr.info.p.iter().zip(tr.info.p_actual) {
            assert!((a - b).abs() < 0.05);
        }
    }

    #[test]
    fn mismatched_body_targets_rejected() {
        let mut task = (*circle_task(TaskKind::Circle)).clone();
        task.error_mode = ErrorMode::WholeBody;
        task.body_targets = Some(vec![vec![0.0; 12]; 8]);
        assert!(SoftRobotEnv::surrogate(tiny_model(), Arc::new(task), EnvConfig::default()).is_err());
    }

    #[test]
    fn vec_env_matches_sequential_and_auto_resets() {
        let model = tiny_model();
        let task = circle_task(TaskKind::Circle);
        let make = || SoftRobotEnv::surrogate(model.clone(), task.clone(), EnvConfig::default()).unwrap();
        let mut par = VecEnv::new((0..6).map(|_| make()).collect()).unwrap();
        let mut seq: Vec<SoftRobotEnv> = (0..6).map(|_| make()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for step in 0..45 {
            let actions: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.random_range(-4.0..4.0)).collect()).collect();
            let out = par.step(&actions).unwrap();
            for (i, res) in out.into_iter().enumerate() {
                let v = res.unwrap();
                let s = seq[i].step(&actions[i]).unwrap();
                assert_eq!(v.reward, s.reward);
                assert_eq!(v.info, s.info);
                assert_eq!(v.done, s.done);
                if s.done {
                    assert_eq!(step % 20, 19);
                    assert_eq!(v.terminal_obs.as_ref(), Some(&s.obs));
                    assert_eq!(v.obs, seq[i].reset().unwrap());
                } else {
                    assert_eq!(v.obs, s.obs);
                }
            }
        }
    }

    #[test]
    fn single_env_wrapper_is_transparent() {
        let model = tiny_model();
        let task = circle_task(TaskKind::Circle);
        let mut raw = SoftRobotEnv::surrogate(model.clone(), task.clone(), EnvConfig::default()).unwrap();
        let mut vec = VecEnv::new(vec![raw.clone()]).unwrap().with_parallel(false);
        for k in 0..10 {
            let a = vec![k as f64 * 0.3, -1.0, 2.0];
            let v = vec.step(std::slice::from_ref(&a)).unwrap().pop().unwrap().unwrap();
            let r = raw.step(&a).unwrap();
            assert_eq!((v.obs, v.reward, v.info), (r.obs, r.reward, r.info));
        }
        assert!(vec.step(&[]).is_err());
    }

    #[test]
    fn workspace_sizing() {
        let params = PlantParams::default();
        let ws = Workspace::sample(
            |p, _| Ok(crate::plant::pcc_forward(p, &params).flatten()),
            0.0,
            60.0,
            13,
        )
        .unwrap();
        let radius = ws.tip_radius();
        assert!(radius > 20.0 && radius < 60.0, "{radius}");
        let sized = sized_task(TaskKind::Circle, &ws, &TaskDefaults::default()).unwrap();
        assert!((sized.task.waypoints[0] - Point3::new(0.0, 0.0, sized.task.waypoints[0].z)).norm() - 0.5 * radius < 1e-9);
        for w in &sized.task.waypoints {
            assert!(ws.nearest_tip_distance(w) < 2.5, "{w:?}");
        }
        let laser = sized_task(TaskKind::LaserCircle, &ws, &TaskDefaults::default()).unwrap();
        assert!(laser.workspace_scale > 0.0);
        let wb = sized_task(
            TaskKind::Square,
            &ws,
            &TaskDefaults {
                error_mode: ErrorMode::WholeBody,
                ..TaskDefaults::default()
            },
        )
        .unwrap();
        assert_eq!(wb.task.body_targets.unwrap().len(), 40);
    }

    proptest! {
        #[test]
        fn pressures_and_signs_stay_valid(actions in proptest::collection::vec(proptest::array::uniform3(-10.0f64..10.0), 1..60)) {
            let mut env = SoftRobotEnv::surrogate(tiny_model(), circle_task(TaskKind::Circle), EnvConfig::default()).unwrap();
            for a in actions {
                let tr = env.step(&a).unwrap();
                prop_assert!(tr.info.p.iter().all(|p| (0.0..=60.0).contains(p)));
                prop_assert!(tr.info.d.iter().all(|d| *d == 1.0 || *d == -1.0));
                prop_assert!(tr.reward > 0.0 && tr.reward <= 1.0);
                if tr.done {
                    env.reset().unwrap();
                }
            }
        }
    }
}
