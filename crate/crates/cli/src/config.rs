//! Run configuration: an INI file with one flat section per pipeline stage.
//!
//! Every key has a default, so an empty file (or no file) is a valid run.
//! Keys outside the known set are rejected rather than ignored.

use std::fmt;
use std::path::{Path, PathBuf};

use ini::Ini;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use softbody::actuation::{ActuatorParams, PidGains};
use softbody::dataset::{DatasetConfig, SweepOrdering};
use softbody::hwbnn::{Architecture, InputMode, TrainConfig};
use softbody::plant::PlantParams;
use softbody::ppo::PpoConfig;
use softbody::rlenv::{EnvConfig, EnvMode, ErrorMode, TaskDefaults, TaskKind};

/// Bad input from the user: unreadable config, unknown key, invalid value.
/// The binary maps it to the usage exit code.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage<T>(msg: impl Into<String>) -> Result<T, UsageError> {
    Err(UsageError(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub length_rest: f64,
    pub radius: f64,
    pub chamber_offset: f64,
    pub elong_gain: f64,
    pub bend_gain: f64,
    pub n_keys: usize,
    pub pressure_min: f64,
    pub pressure_max: f64,
    pub noise_sigma: f64,
    /// Full-sweep tip deviation the hysteresis is calibrated to, as a
    /// fraction of `length_rest`. Zero disables hysteresis.
    pub target_deviation: f64,
    pub pid_kp: f64,
    pub pid_ki: f64,
    pub pid_kd: f64,
    pub pid_integral_clamp: f64,
    pub pid_output_clamp: f64,
    pub actuator_gain: f64,
    pub actuator_rate_limit: f64,
    pub actuator_dt: f64,
    pub actuator_ticks: usize,
}

impl Default for PlantSection {
    fn default() -> Self {
        let p = PlantParams::default();
        let g = PidGains::default();
        let a = ActuatorParams::default();
        Self {
            length_rest: p.length_rest,
            radius: p.radius,
            chamber_offset: p.chamber_offset,
            elong_gain: p.elong_gain,
            bend_gain: p.bend_gain,
            n_keys: p.n_keys,
            pressure_min: p.pressure_min,
            pressure_max: p.pressure_max,
            noise_sigma: p.noise_sigma,
            target_deviation: 0.034,
            pid_kp: g.kp,
            pid_ki: g.ki,
            pid_kd: g.kd,
            pid_integral_clamp: g.integral_clamp,
            pid_output_clamp: g.output_clamp,
            actuator_gain: a.k_act,
            actuator_rate_limit: a.rate_limit,
            actuator_dt: a.dt,
            actuator_ticks: a.ticks_per_step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub steps_per_axis: usize,
    pub ordering: SweepOrdering,
    pub val_count: usize,
    pub test_count: usize,
    pub reads: usize,
    pub max_run: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let d = DatasetConfig::default();
        Self {
            steps_per_axis: d.steps_per_axis,
            ordering: d.ordering,
            val_count: d.val_count,
            test_count: d.test_count,
            reads: d.reads,
            max_run: d.max_run,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: String,
    pub input_mode: String,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epoch cap for each of the ablation fits.
    pub ablation_max_epochs: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            architecture: Architecture::default().to_string(),
            input_mode: InputMode::WithDirections.to_string(),
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            eval_every: t.eval_every,
            patience: t.patience,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            ablation_max_epochs: 150,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoSection {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub ent_coef: f64,
    pub clip_range: f64,
    pub n_envs: usize,
    pub steps_per_env: usize,
    pub total_steps: usize,
    pub epochs: usize,
    pub minibatch_size: usize,
    pub learning_rate: f64,
    pub vf_coef: f64,
    pub max_grad_norm: f64,
    /// Trunk widths, comma separated in the file.
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
    pub log_std_floor: f64,
    pub kl_abort: f64,
    pub kl_patience: usize,
    pub eval_every: usize,
    /// Step environments on the rayon pool.
    pub parallel: bool,
}

impl Default for PpoSection {
    fn default() -> Self {
        let p = PpoConfig::default();
        Self {
            gamma: p.gamma,
            gae_lambda: p.gae_lambda,
            ent_coef: p.ent_coef,
            clip_range: p.clip_range,
            n_envs: p.n_envs,
            steps_per_env: p.steps_per_env,
            total_steps: p.total_steps,
            epochs: p.epochs,
            minibatch_size: p.minibatch_size,
            learning_rate: p.learning_rate,
            vf_coef: p.vf_coef,
            max_grad_norm: p.max_grad_norm,
            hidden: p.hidden,
            log_std_init: p.log_std_init,
            log_std_floor: p.log_std_floor,
            kl_abort: p.kl_abort,
            kl_patience: p.kl_patience,
            eval_every: p.eval_every,
            parallel: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub name: String,
    pub waypoints: usize,
    pub dwell: usize,
    pub episode_length: usize,
    /// Path size relative to the workspace radius (or laser reach).
    pub fraction: f64,
    pub laser_height: f64,
    pub error_mode: ErrorMode,
    pub reward_length: f64,
    pub error_scale: f64,
    pub action_bound: f64,
    pub miss_penalty: f64,
    /// Pressure grid steps per axis used to sample the workspace.
    pub workspace_steps: usize,
}

impl Default for TaskSection {
    fn default() -> Self {
        let t = TaskDefaults::default();
        let e = EnvConfig::default();
        Self {
            name: TaskKind::Circle.to_string(),
            waypoints: t.waypoints,
            dwell: t.dwell,
            episode_length: t.episode_length,
            fraction: t.fraction,
            laser_height: t.laser_height,
            error_mode: t.error_mode,
            reward_length: e.reward_length,
            error_scale: e.error_scale,
            action_bound: e.action_bound,
            miss_penalty: e.miss_penalty,
            workspace_steps: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    /// Run directory; every artifact is written below it.
    pub dir: PathBuf,
    /// Side of the square SVG canvas, px.
    pub svg_size: f64,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            svg_size: 640.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub plant: PlantSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub ppo: PpoSection,
    pub task: TaskSection,
    pub output: OutputSection,
}

const SECTIONS: [&str; 6] = ["plant", "dataset", "model", "ppo", "task", "output"];

/// Converts one raw INI value to the JSON type of the default it replaces.
fn coerce(raw: &str, like: &Value) -> Option<Value> {
    let raw = raw.trim();
    match like {
        Value::Bool(_) => match raw {
            "true" | "yes" | "on" | "1" => Some(Value::Bool(true)),
            "false" | "no" | "off" | "0" => Some(Value::Bool(false)),
            _ => None,
        },
        Value::Number(n) if n.is_f64() => raw.parse::<f64>().ok().filter(|x| x.is_finite()).map(Value::from),
        Value::Number(_) => raw.parse::<u64>().ok().map(Value::from),
        Value::Array(items) => {
            let elem = items.first().cloned().unwrap_or(Value::from(0u64));
            raw.split(',').map(|s| coerce(s, &elem)).collect::<Option<Vec<_>>>().map(Value::Array)
        }
        _ => Some(Value::String(raw.to_string())),
    }
}

fn apply_section<T: Serialize + DeserializeOwned>(
    name: &str,
    current: &T,
    entries: &[(String, String)],
) -> Result<T, UsageError> {
    let Value::Object(mut map) = serde_json::to_value(current).expect("config serialises") else {
        unreachable!("sections are structs")
    };
    for (key, raw) in entries {
        let Some(like) = map.get(key) else {
            let known: Vec<&String> = map.keys().collect();
            return usage(format!("unknown key `{key}` in [{name}] (known: {known:?})"));
        };
        let Some(v) = coerce(raw, like) else {
            return usage(format!("[{name}] {key} = `{raw}` is not a valid value"));
        };
        map.insert(key.clone(), v);
    }
    serde_json::from_value(Value::Object(map)).map_err(|e| UsageError(format!("[{name}]: {e}")))
}

impl RunConfig {
    /// Parses INI text over the defaults.
    pub fn from_ini_str(text: &str) -> Result<Self, UsageError> {
        let ini = Ini::load_from_str(text).map_err(|e| UsageError(format!("config: {e}")))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let entries: Vec<(String, String)> = props.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
            match section {
                None => {
                    for (k, v) in &entries {
                        match k.as_str() {
                            "seed" => cfg.seed = v.trim().parse().map_err(|_| UsageError(format!("seed = `{v}` is not an unsigned integer")))?,
                            other => return usage(format!("unknown top-level key `{other}` (only `seed` is allowed outside a section)")),
                        }
                    }
                }
                Some("plant") => cfg.plant = apply_section("plant", &cfg.plant, &entries)?,
                Some("dataset") => cfg.dataset = apply_section("dataset", &cfg.dataset, &entries)?,
                Some("model") => cfg.model = apply_section("model", &cfg.model, &entries)?,
                Some("ppo") => cfg.ppo = apply_section("ppo", &cfg.ppo, &entries)?,
                Some("task") => cfg.task = apply_section("task", &cfg.task, &entries)?,
                Some("output") => cfg.output = apply_section("output", &cfg.output, &entries)?,
                Some(other) => return usage(format!("unknown section [{other}] (expected one of {SECTIONS:?})")),
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, UsageError> {
        let text = std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_ini_str(&text)
    }

    /// Makes the run directory absolute and checks every value.
    pub fn finalize(mut self) -> Result<Self, UsageError> {
        self.output.dir = std::path::absolute(&self.output.dir)
            .map_err(|e| UsageError(format!("cannot resolve output directory {}: {e}", self.output.dir.display())))?;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let plant = self.plant_params();
        plant.validate().map_err(|e| UsageError(format!("[plant]: {e}")))?;
        if !(0.0..=0.1).contains(&self.plant.target_deviation) {
            return usage("[plant] target_deviation must lie in [0, 0.1]");
        }
        self.pid_gains().validate().map_err(|e| UsageError(format!("[plant]: {e}")))?;
        self.actuator_params().validate().map_err(|e| UsageError(format!("[plant]: {e}")))?;
        if self.dataset.steps_per_axis < 2 || self.dataset.reads == 0 || self.dataset.max_run == 0 {
            return usage("[dataset] steps_per_axis must be at least 2; reads and max_run positive");
        }
        if self.dataset.val_count == 0 || self.dataset.test_count == 0 {
            return usage("[dataset] validation and test splits must be non-empty");
        }
        self.architecture()?;
        self.input_mode()?;
        self.train_config().validate().map_err(|e| UsageError(format!("[model]: {e}")))?;
        if self.model.ablation_max_epochs == 0 {
            return usage("[model] ablation_max_epochs must be positive");
        }
        self.ppo_config().validate().map_err(|e| UsageError(format!("[ppo]: {e}")))?;
        self.task_kind()?;
        let t = &self.task;
        if t.waypoints == 0 || t.dwell == 0 || t.episode_length == 0 {
            return usage("[task] waypoints, dwell and episode_length must be positive");
        }
        if !(t.fraction > 0.0 && t.fraction <= 1.0) {
            return usage("[task] fraction must lie in (0, 1]");
        }
        if t.workspace_steps < 2 {
            return usage("[task] workspace_steps must be at least 2");
        }
        if t.error_mode == ErrorMode::WholeBody && self.task_kind()? == TaskKind::LaserCircle {
            return usage("[task] whole-body error mode applies to tip-tracking tasks only");
        }
        self.env_config(EnvMode::Surrogate, plant)
            .validate()
            .map_err(|e| UsageError(format!("[task]: {e}")))?;
        if !(self.output.svg_size >= 100.0) {
            return usage("[output] svg_size must be at least 100");
        }
        Ok(())
    }

    /// Plant constants with hysteresis off; the half-width comes from calibration.
    pub fn plant_params(&self) -> PlantParams {
        let p = &self.plant;
        PlantParams {
            length_rest: p.length_rest,
            radius: p.radius,
            chamber_offset: p.chamber_offset,
            elong_gain: p.elong_gain,
            bend_gain: p.bend_gain,
            hysteresis_halfwidth: 0.0,
            n_keys: p.n_keys,
            pressure_min: p.pressure_min,
            pressure_max: p.pressure_max,
            noise_sigma: p.noise_sigma,
        }
    }

    pub fn pid_gains(&self) -> PidGains {
        let p = &self.plant;
        PidGains {
            kp: p.pid_kp,
            ki: p.pid_ki,
            kd: p.pid_kd,
            integral_clamp: p.pid_integral_clamp,
            output_clamp: p.pid_output_clamp,
        }
    }

    pub fn actuator_params(&self) -> ActuatorParams {
        let p = &self.plant;
        ActuatorParams {
            k_act: p.actuator_gain,
            rate_limit: p.actuator_rate_limit,
            min_pressure: p.pressure_min,
            max_pressure: p.pressure_max,
            dt: p.actuator_dt,
            ticks_per_step: p.actuator_ticks,
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.dataset;
        DatasetConfig {
            steps_per_axis: d.steps_per_axis,
            ordering: d.ordering,
            val_count: d.val_count,
            test_count: d.test_count,
            reads: d.reads,
            max_run: d.max_run,
            seed: self.seed,
        }
    }

    pub fn architecture(&self) -> Result<Architecture, UsageError> {
        self.model.architecture.parse().map_err(|e| UsageError(format!("[model] architecture: {e}")))
    }

    pub fn input_mode(&self) -> Result<InputMode, UsageError> {
        self.model.input_mode.parse().map_err(|e| UsageError(format!("[model] input_mode: {e}")))
    }

    pub fn train_config(&self) -> TrainConfig {
        let m = &self.model;
        TrainConfig {
            learning_rate: m.learning_rate,
            batch_size: m.batch_size,
            max_epochs: m.max_epochs,
            eval_every: m.eval_every,
            patience: m.patience,
            seed: self.seed,
            beta1: m.beta1,
            beta2: m.beta2,
            eps: m.eps,
        }
    }

    pub fn ppo_config(&self) -> PpoConfig {
        let p = &self.ppo;
        PpoConfig {
            gamma: p.gamma,
            gae_lambda: p.gae_lambda,
            ent_coef: p.ent_coef,
            clip_range: p.clip_range,
            n_envs: p.n_envs,
            steps_per_env: p.steps_per_env,
            total_steps: p.total_steps,
            epochs: p.epochs,
            minibatch_size: p.minibatch_size,
            learning_rate: p.learning_rate,
            vf_coef: p.vf_coef,
            max_grad_norm: p.max_grad_norm,
            hidden: p.hidden.clone(),
            log_std_init: p.log_std_init,
            log_std_floor: p.log_std_floor,
            kl_abort: p.kl_abort,
            kl_patience: p.kl_patience,
            eval_every: p.eval_every,
            seed: self.seed,
        }
    }

    pub fn task_kind(&self) -> Result<TaskKind, UsageError> {
        self.task.name.parse().map_err(|e| UsageError(format!("[task] name: {e}")))
    }

    pub fn task_defaults(&self) -> TaskDefaults {
        let t = &self.task;
        TaskDefaults {
            waypoints: t.waypoints,
            dwell: t.dwell,
            episode_length: t.episode_length,
            fraction: t.fraction,
            laser_height: t.laser_height,
            error_mode: t.error_mode,
        }
    }

    /// Environment settings around `plant`, which should carry the
    /// calibrated hysteresis for deploy mode.
    pub fn env_config(&self, mode: EnvMode, plant: PlantParams) -> EnvConfig {
        let t = &self.task;
        EnvConfig {
            action_bound: t.action_bound,
            error_scale: t.error_scale,
            reward_length: t.reward_length,
            miss_penalty: t.miss_penalty,
            pid: self.pid_gains(),
            actuator: self.actuator_params(),
            seed: self.seed,
            ..EnvConfig::for_plant(&plant, mode)
        }
    }

    /// SHA-256 over every setting that can change a result. The run
    /// directory is excluded so identical runs in different places match.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// The resolved configuration as INI text, loadable by `from_ini_str`.
    pub fn to_ini_string(&self) -> String {
        let mut out = format!("seed = {}\n", self.seed);
        let value = serde_json::to_value(self).expect("config serialises");
        for name in SECTIONS {
            out.push_str(&format!("\n[{name}]\n"));
            if let Some(Value::Object(map)) = value.get(name) {
                for (k, v) in map {
                    out.push_str(&format!("{k} = {}\n", ini_value(v)));
                }
            }
        }
        out
    }
}

fn ini_value(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Array(items) => items.iter().map(ini_value).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}
