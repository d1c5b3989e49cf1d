//! The four pipeline stages. Each reads its inputs from the run directory
//! (or an explicit path), writes its artifacts below it, and leaves a
//! `<command>.run.json` record with the config hash and seed.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use softbody::dataset::{generate_splits, DatasetSplits};
use softbody::hwbnn::{self, ablation_compare, architecture_sweep, evaluate as eval_model, fit, AblationReport, HwbnnModel, InputMode};
use softbody::nn::checkpoint::FORMAT_VERSION;
use softbody::plant::{calibrate_hysteresis, Calibration, PlantParams};
use softbody::ppo::{train_policy as ppo_train, PolicyNet, PpoError, CURVE_HEADER};
use softbody::rlenv::{run_episode, Environment, sized_task, EnvConfig, EnvMode, EpisodeLog, SoftRobotEnv, TaskKind, TaskSpec, Tracking, VecEnv, Workspace};

use crate::config::{RunConfig, UsageError};
use crate::svg::{xy_plot, Series};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A validated configuration bound to its run directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub cfg: RunConfig,
    pub quiet: bool,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self, UsageError> {
        Ok(Self {
            cfg: cfg.finalize()?,
            quiet: false,
        })
    }

    pub fn quiet(mut self) -> Self {
        self.quiet = true;
        self
    }

    pub fn dir(&self) -> &Path {
        &self.cfg.output.dir
    }

    pub fn data_stem(&self) -> PathBuf {
        self.dir().join("data").join("dataset")
    }

    pub fn model_path(&self, mode: InputMode) -> PathBuf {
        self.dir().join("model").join(format!("hwbnn-{mode}.ckpt"))
    }

    pub fn default_model_path(&self) -> Result<PathBuf, UsageError> {
        Ok(self.model_path(self.cfg.input_mode()?))
    }

    pub fn policy_path(&self, task: TaskKind) -> PathBuf {
        self.dir().join("policy").join(format!("{task}.ckpt"))
    }

    pub fn eval_stem(&self, task: TaskKind) -> PathBuf {
        self.dir().join("eval").join(task.to_string())
    }

    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    /// What every artifact records about its origin.
    pub fn provenance(&self, command: &str) -> Value {
        json!({
            "command": command,
            "version": VERSION,
            "checkpoint_format": FORMAT_VERSION,
            "config_sha256": self.cfg.hash(),
            "seed": self.cfg.seed,
        })
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(self.dir()).unwrap_or(path).display().to_string()
    }

    fn write_run_record(&self, command: &str, artifacts: &[PathBuf], summary: Value) -> Result<PathBuf> {
        let mut doc = self.provenance(command);
        let obj = doc.as_object_mut().expect("provenance is an object");
        obj.insert("config".into(), Value::String(self.cfg.to_ini_string()));
        obj.insert("artifacts".into(), artifacts.iter().map(|p| Value::String(self.relative(p))).collect());
        obj.insert("summary".into(), summary);
        let path = self.dir().join(format!("{command}.run.json"));
        write_json(&path, &doc)?;
        Ok(path)
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Plant constants with the hysteresis half-width calibrated to the
/// configured sweep deviation.
pub fn calibrated_plant(cfg: &RunConfig) -> Result<(PlantParams, Option<Calibration>)> {
    let mut plant = cfg.plant_params();
    if cfg.plant.target_deviation == 0.0 {
        return Ok((plant, None));
    }
    let cal = calibrate_hysteresis(&plant, cfg.plant.target_deviation)?;
    plant.hysteresis_halfwidth = cal.halfwidth;
    Ok((plant, Some(cal)))
}

#[derive(Debug, Clone, Serialize)]
pub struct GenDataSummary {
    pub counts: [usize; 3],
    pub calibration: Option<Calibration>,
    #[serde(skip)]
    pub files: Vec<PathBuf>,
    #[serde(skip)]
    pub seconds: f64,
}

pub fn gen_data(run: &Run, stem: Option<&Path>) -> Result<GenDataSummary> {
    let start = Instant::now();
    let stem = stem.map_or_else(|| run.data_stem(), Path::to_path_buf);
    let (plant, calibration) = calibrated_plant(&run.cfg)?;
    match &calibration {
        Some(c) => run.say(format!(
            "hysteresis: half-width {:.4} kPa, sweep deviation {:.3}% of length ({} bisection steps)",
            c.halfwidth,
            100.0 * c.deviation_fraction,
            c.iterations
        )),
        None => run.say("hysteresis: disabled"),
    }
    let splits = generate_splits(&plant, calibration, &run.cfg.dataset_config())?;
    let files = splits.save(&stem)?;
    let counts = splits.meta.counts;
    run.say(format!("samples: train {} / val {} / test {}", counts[0], counts[1], counts[2]));
    let summary = GenDataSummary {
        counts,
        calibration,
        files,
        seconds: start.elapsed().as_secs_f64(),
    };
    let record = run.write_run_record("gen-data", &summary.files, serde_json::to_value(&summary)?)?;
    run.say(format!("wrote {} and {}", stem.display(), record.display()));
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct ModelReport {
    pub architecture: String,
    pub input_mode: InputMode,
    pub test_wmse: f64,
    pub test_mse: f64,
    pub val_wmse: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stop_reason: hwbnn::StopReason,
    pub loss_weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum TrainModelSummary {
    Single { path: PathBuf, report: ModelReport, seconds: f64 },
    Ablation { report: AblationReport, ratio: Option<f64>, seconds: f64 },
}

pub fn train_model(run: &Run, data: Option<&Path>, ablation: bool) -> Result<TrainModelSummary> {
    let start = Instant::now();
    let stem = data.map_or_else(|| run.data_stem(), Path::to_path_buf);
    let splits = DatasetSplits::load(&stem).with_context(|| format!("loading dataset {}", stem.display()))?;
    let dataset_hash = file_sha256(&stem.with_extension("train.csv"))?;
    let model_dir = run.dir().join("model");

    if ablation {
        let cfg = hwbnn::TrainConfig {
            max_epochs: run.cfg.model.ablation_max_epochs,
            ..run.cfg.train_config()
        };
        let mut artifacts = Vec::new();
        let mut save_err = None;
        let report = ablation_compare(&splits.train, &splits.val, &splits.test, &architecture_sweep(), &cfg, |row, fit| {
            let path = model_dir.join("ablation").join(format!("{}-{}.ckpt", row.architecture, row.input_mode));
            run.say(format!(
                "  {:<6} {}: test mse {:.5}, wmse {:.5} (best epoch {} of {})",
                row.architecture.to_string(),
                row.input_mode,
                row.test_mse,
                row.test_wmse,
                row.best_epoch,
                row.epochs_run
            ));
            let meta = json!({ "provenance": run.provenance("train-model"), "dataset_train_sha256": dataset_hash, "test_mse": row.test_mse });
            let res = ensure_parent(&path).and_then(|_| fit.model.save(&path, meta).map_err(Into::into));
            match res {
                Ok(()) => artifacts.push(path),
                Err(e) if save_err.is_none() => save_err = Some(e),
                Err(_) => {}
            }
        })?;
        if let Some(e) = save_err {
            return Err(e);
        }
        let csv = model_dir.join("ablation.csv");
        ensure_parent(&csv)?;
        report.write_csv(&csv)?;
        let ratio = report.best_ratio();
        let json_path = model_dir.join("ablation.json");
        write_json(&json_path, &json!({ "rows": report.rows, "best_6d_over_best_3d": ratio }))?;
        artifacts.extend([csv, json_path]);
        run.say(report.table());
        if let Some(r) = ratio {
            run.say(format!("best 6d / best 3d test mse: {r:.4}"));
        }
        run.write_run_record("train-model", &artifacts, json!({ "ablation": true, "best_6d_over_best_3d": ratio }))?;
        return Ok(TrainModelSummary::Ablation {
            report,
            ratio,
            seconds: start.elapsed().as_secs_f64(),
        });
    }

    let arch = run.cfg.architecture()?;
    let mode = run.cfg.input_mode()?;
    let cfg = run.cfg.train_config();
    run.say(format!("training {arch} ({mode}) on {} samples", splits.train.len()));
    let fitted = fit(&splits.train, &splits.val, arch, mode, &cfg)?;
    let (test_wmse, test_mse) = eval_model(&fitted.model, &splits.test, &fitted.weights)?;
    let report = ModelReport {
        architecture: arch.to_string(),
        input_mode: mode,
        test_wmse,
        test_mse,
        val_wmse: fitted.history.best_val_loss,
        best_epoch: fitted.history.best_epoch,
        epochs_run: fitted.history.epochs_run,
        stop_reason: fitted.history.stop_reason,
        loss_weights: fitted.weights.w.clone(),
    };
    let path = run.model_path(mode);
    ensure_parent(&path)?;
    let meta = json!({
        "provenance": run.provenance("train-model"),
        "dataset_train_sha256": dataset_hash,
        "architecture": report.architecture,
        "test_mse": test_mse,
        "test_wmse": test_wmse,
    });
    fitted.model.save(&path, meta)?;
    let mut history = String::from("epoch,train_loss,val_loss\n");
    for e in &fitted.history.evals {
        history.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_loss));
    }
    let history_path = model_dir.join(format!("history-{mode}.csv"));
    write_text(&history_path, &history)?;
    let report_path = model_dir.join(format!("report-{mode}.json"));
    write_json(&report_path, &report)?;
    run.say(format!(
        "test mse {test_mse:.5}, weighted {test_wmse:.5}; best epoch {} of {} ({:?})",
        report.best_epoch, report.epochs_run, report.stop_reason
    ));
    let artifacts = vec![path.clone(), hwbnn::HwbnnModel::sidecar(&path), history_path, report_path];
    run.write_run_record("train-model", &artifacts, serde_json::to_value(&report)?)?;
    Ok(TrainModelSummary::Single {
        path,
        report,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Everything evaluation needs to rebuild the training environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: TaskSpec,
    pub workspace_scale: f64,
    pub env: EnvConfig,
    pub calibration: Option<Calibration>,
    pub model_sha256: String,
}

pub fn task_record_path(policy: &Path) -> PathBuf {
    policy.with_extension("task.json")
}

/// Builds the task for `kind` sized to the model's reachable workspace.
pub fn build_task(cfg: &RunConfig, model: &HwbnnModel, kind: TaskKind) -> Result<(TaskSpec, f64)> {
    let p = cfg.plant_params();
    let ws = Workspace::of_model(model, p.pressure_min, p.pressure_max, cfg.task.workspace_steps)?;
    let sized = sized_task(kind, &ws, &cfg.task_defaults())?;
    Ok((sized.task, sized.workspace_scale))
}

/// Deterministic episode under `policy`.
pub fn policy_episode(env: &mut SoftRobotEnv, policy: &PolicyNet) -> Result<EpisodeLog> {
    let mut failure: Option<PpoError> = None;
    let log = run_episode(env, |obs| match policy.deterministic_action(obs) {
        Ok(a) => a,
        Err(e) => {
            failure.get_or_insert(e);
            vec![0.0; policy.action_dim()]
        }
    })?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(log),
    }
}

#[derive(Debug, Clone)]
pub struct TrainPolicySummary {
    pub policy_path: PathBuf,
    pub best_score: f64,
    pub workspace_scale: f64,
    pub updates: usize,
    pub aborted: Option<String>,
    pub seconds: f64,
}

pub fn train_policy(run: &Run, model_path: Option<&Path>) -> Result<TrainPolicySummary> {
    let start = Instant::now();
    let kind = run.cfg.task_kind()?;
    let model_path = match model_path {
        Some(p) => p.to_path_buf(),
        None => run.default_model_path()?,
    };
    let model = Arc::new(HwbnnModel::load(&model_path).with_context(|| format!("loading model {}", model_path.display()))?);
    let (plant, calibration) = calibrated_plant(&run.cfg)?;
    let (task, scale) = build_task(&run.cfg, &model, kind)?;
    let task = Arc::new(task);
    let env_cfg = run.cfg.env_config(EnvMode::Surrogate, plant);
    let ppo_cfg = run.cfg.ppo_config();
    run.say(format!(
        "task {kind}: {} waypoints, workspace scale {scale:.3} mm; {} steps over {} environments",
        task.waypoints.len(),
        ppo_cfg.total_steps,
        ppo_cfg.n_envs
    ));

    let envs = (0..ppo_cfg.n_envs)
        .map(|_| SoftRobotEnv::surrogate(model.clone(), task.clone(), env_cfg.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let envs = VecEnv::new(envs)?.with_parallel(run.cfg.ppo.parallel);
    let mut eval_env = SoftRobotEnv::surrogate(model.clone(), task.clone(), env_cfg.clone())?;

    let policy_path = run.policy_path(kind);
    let curve_path = policy_path.with_extension("curve.csv");
    ensure_parent(&curve_path)?;
    let mut curve = fs::File::create(&curve_path).with_context(|| format!("creating {}", curve_path.display()))?;
    writeln!(curve, "{CURVE_HEADER}")?;
    let mut io_err = None;
    let quiet = run.quiet;

    let outcome = ppo_train(
        envs,
        &ppo_cfg,
        |p| {
            let log = policy_episode(&mut eval_env, p).map_err(|e| PpoError::Config(format!("evaluation episode: {e:#}")))?;
            Ok(-log.mean_error())
        },
        |row| {
            if let Err(e) = writeln!(curve, "{}", row.csv_line()).and_then(|_| curve.flush()) {
                io_err.get_or_insert(e);
            }
            if !quiet && row.eval_score.is_finite() {
                println!(
                    "update {:>5} steps {:>9}: reward {:.4}, eval error {:.4} mm, kl {:.4}, entropy {:.3}",
                    row.update, row.steps, row.mean_reward, -row.eval_score, row.approx_kl, row.entropy
                );
            }
        },
    )?;
    if let Some(e) = io_err {
        return Err(anyhow!(e).context(format!("writing {}", curve_path.display())));
    }
    if let Some(reason) = &outcome.aborted {
        run.say(format!("training stopped early: {reason}"));
    }

    let meta = |which: &str, score: f64| {
        json!({
            "provenance": run.provenance("train-policy"),
            "task": kind,
            "checkpoint": which,
            "eval_mean_error": -score,
            "ppo": ppo_cfg,
        })
    };
    outcome.best.save(&policy_path, Some(&outcome.best_adam), meta("best", outcome.best_score))?;
    let final_path = policy_path.with_extension("final.ckpt");
    let last_score = outcome.curve.iter().rev().map(|r| r.eval_score).find(|s| s.is_finite()).unwrap_or(f64::NAN);
    outcome.policy.save(&final_path, Some(&outcome.adam), meta("final", last_score))?;
    let record = TaskRecord {
        task: (*task).clone(),
        workspace_scale: scale,
        env: env_cfg,
        calibration,
        model_sha256: file_sha256(&model_path)?,
    };
    let record_path = task_record_path(&policy_path);
    write_json(&record_path, &record)?;
    run.say(format!(
        "best evaluation error {:.4} mm; wrote {}",
        -outcome.best_score,
        policy_path.display()
    ));
    let artifacts = vec![policy_path.clone(), final_path, curve_path, record_path];
    run.write_run_record(
        "train-policy",
        &artifacts,
        json!({
            "task": kind,
            "best_eval_mean_error": -outcome.best_score,
            "updates": outcome.curve.len(),
            "aborted": outcome.aborted,
        }),
    )?;
    Ok(TrainPolicySummary {
        policy_path,
        best_score: outcome.best_score,
        workspace_scale: scale,
        updates: outcome.curve.len(),
        aborted: outcome.aborted,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub task: TaskKind,
    pub mode: EnvMode,
    /// `tip` or `laser-intersection`.
    pub tracked: String,
    pub steps: usize,
    pub mean_error_mm: f64,
    pub max_error_mm: f64,
    pub per_waypoint_error_mm: Vec<f64>,
    pub total_reward: f64,
    /// Steps where the laser ray missed the plane.
    pub misses: usize,
    pub workspace_scale_mm: f64,
    pub mean_error_over_length: f64,
    pub mean_error_over_workspace_scale: f64,
}

impl EpisodeMetrics {
    pub fn from_log(log: &EpisodeLog, task: &TaskSpec, scale: f64, length: f64, mode: EnvMode) -> Self {
        let mean = log.mean_error();
        Self {
            task: task.kind,
            mode,
            tracked: match task.tracking {
                Tracking::Tip => "tip".into(),
                Tracking::Laser { .. } => "laser-intersection".into(),
            },
            steps: log.steps.len(),
            mean_error_mm: mean,
            max_error_mm: log.max_error(),
            per_waypoint_error_mm: log.per_waypoint_errors(task.waypoints.len()),
            total_reward: log.total_reward(),
            misses: log.steps.iter().filter(|s| s.point.is_none()).count(),
            workspace_scale_mm: scale,
            mean_error_over_length: mean / length,
            mean_error_over_workspace_scale: mean / scale,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvaluateSummary {
    pub metrics: Vec<EpisodeMetrics>,
    pub files: Vec<PathBuf>,
}

impl EvaluateSummary {
    pub fn mode(&self, mode: EnvMode) -> Option<&EpisodeMetrics> {
        self.metrics.iter().find(|m| m.mode == mode)
    }
}

fn mode_name(mode: EnvMode) -> &'static str {
    match mode {
        EnvMode::Surrogate => "surrogate",
        EnvMode::Deploy => "deploy",
    }
}

pub fn evaluate(run: &Run, policy_path: Option<&Path>, model_path: Option<&Path>, modes: &[EnvMode]) -> Result<EvaluateSummary> {
    let kind = run.cfg.task_kind()?;
    let policy_path = policy_path.map_or_else(|| run.policy_path(kind), Path::to_path_buf);
    let (policy, _) = PolicyNet::load(&policy_path).with_context(|| format!("loading policy {}", policy_path.display()))?;
    let record_path = task_record_path(&policy_path);
    let text = fs::read_to_string(&record_path).with_context(|| format!("reading {}", record_path.display()))?;
    let record: TaskRecord = serde_json::from_str(&text).with_context(|| format!("parsing {}", record_path.display()))?;
    if record.task.kind != kind {
        bail!("policy {} was trained on {}, not {kind}", policy_path.display(), record.task.kind);
    }
    let task = Arc::new(record.task.clone());
    let length = record.env.plant.length_rest;

    let mut metrics = Vec::new();
    let mut files = Vec::new();
    let mut paths: Vec<(EnvMode, Vec<(f64, f64)>)> = Vec::new();
    let stem = run.eval_stem(kind);
    ensure_parent(&stem)?;
    for &mode in modes {
        let cfg = EnvConfig { mode, ..record.env.clone() };
        let mut env = match mode {
            EnvMode::Surrogate => {
                let model_path = match model_path {
                    Some(p) => p.to_path_buf(),
                    None => run.default_model_path()?,
                };
                if file_sha256(&model_path)? != record.model_sha256 {
                    bail!("model {} is not the one the policy was trained against", model_path.display());
                }
                SoftRobotEnv::surrogate(Arc::new(HwbnnModel::load(&model_path)?), task.clone(), cfg)?
            }
            EnvMode::Deploy => SoftRobotEnv::deploy(task.clone(), cfg)?,
        };
        if env.obs_dim() != policy.obs_dim() || env.action_dim() != policy.action_dim() {
            bail!("policy dimensions {}x{} do not match the environment", policy.obs_dim(), policy.action_dim());
        }
        let log = policy_episode(&mut env, &policy)?;
        let name = mode_name(mode);
        let traj = stem.with_extension(format!("{name}.trajectory.csv"));
        log.write_csv(&traj)?;
        let m = EpisodeMetrics::from_log(&log, &task, record.workspace_scale, length, mode);
        let metrics_path = stem.with_extension(format!("{name}.metrics.json"));
        write_json(&metrics_path, &m)?;
        run.say(format!(
            "{name}: mean {} error {:.4} mm (max {:.4}), {:.3}% of length, {:.3}% of workspace scale",
            m.tracked,
            m.mean_error_mm,
            m.max_error_mm,
            100.0 * m.mean_error_over_length,
            100.0 * m.mean_error_over_workspace_scale
        ));
        paths.push((mode, log.steps.iter().filter_map(|s| s.point).map(|p| (p.x, p.y)).collect()));
        files.extend([traj, metrics_path]);
        metrics.push(m);
    }

    let mut series = vec![Series {
        label: "target",
        color: "black",
        dashed: true,
        closed: true,
        points: task.waypoints.iter().map(|w| (w.x, w.y)).collect(),
    }];
    for (mode, pts) in paths {
        series.push(Series {
            label: mode_name(mode),
            color: if mode == EnvMode::Surrogate { "#1f77b4" } else { "#d62728" },
            dashed: false,
            closed: false,
            points: pts,
        });
    }
    let svg_path = stem.with_extension("xy.svg");
    write_text(&svg_path, &xy_plot(&format!("{kind}: X-Y projection"), run.cfg.output.svg_size, &series))?;
    files.push(svg_path);

    let ratio = match (metrics.iter().find(|m| m.mode == EnvMode::Surrogate), metrics.iter().find(|m| m.mode == EnvMode::Deploy)) {
        (Some(s), Some(d)) => Some(d.mean_error_mm / s.mean_error_mm),
        _ => None,
    };
    let combined = stem.with_extension("metrics.json");
    write_json(&combined, &json!({ "task": kind, "modes": metrics, "deploy_over_surrogate": ratio }))?;
    files.push(combined);
    if let Some(r) = ratio {
        run.say(format!("deploy / surrogate mean error: {r:.3}"));
    }
    run.write_run_record(
        "evaluate",
        &files,
        json!({
            "task": kind,
            "mean_error_mm": metrics.iter().map(|m| (mode_name(m.mode).to_string(), json!(m.mean_error_mm))).collect::<serde_json::Map<_, _>>(),
        }),
    )?;
    Ok(EvaluateSummary { metrics, files })
}
