//! Acceptance run: one PASS/FAIL line per criterion at the pinned tolerances.
//!
//! Runs the full-size pipeline (dataset, ablation with its control, model,
//! two 2M-step policies), so expect tens of minutes on one core.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use softbody::hwbnn::{gradcheck, HwbnnModel, InputMode};
use softbody::nn::Activation;
use softbody::plant::Plant;
use softbody::ppo::{gae, Collector, PolicyNet};
use softbody::rlenv::{EnvMode, Environment, SoftRobotEnv, TaskKind, VecEnv};
use softbody_cli::pipeline::{self, EvaluateSummary, TrainModelSummary};
use softbody_cli::{Run, RunConfig};

const BIN: &str = env!("CARGO_BIN_EXE_softbody");

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

#[derive(Default)]
struct Board {
    results: Vec<Outcome>,
}

impl Board {
    fn record(&mut self, id: u32, name: &'static str, result: Result<(bool, String)>) {
        let (pass, detail) = result.unwrap_or_else(|e| (false, format!("error: {e:#}")));
        println!("[{}] {id}. {name}: {detail}", if pass { "PASS" } else { "FAIL" });
        self.results.push(Outcome { id, name, pass, detail });
    }
}

fn stage(msg: &str) {
    println!("  .. {msg}");
}

fn run_in(dir: &Path, edit: impl FnOnce(&mut RunConfig)) -> Result<Run> {
    let mut cfg = RunConfig::default();
    cfg.output.dir = dir.to_path_buf();
    edit(&mut cfg);
    Ok(Run::new(cfg)?.quiet())
}

/// Ascending then descending ramp of one chamber at a time through the
/// public plant interface; the largest tip gap between branches.
fn measured_sweep_deviation(run: &Run) -> Result<f64> {
    let (plant_params, _) = pipeline::calibrated_plant(&run.cfg)?;
    let (lo, hi) = (plant_params.pressure_min, plant_params.pressure_max);
    let levels = ((hi - lo) / 0.1).round() as usize;
    let level = |i: usize| lo + (hi - lo) * i as f64 / levels as f64;
    let mut worst = 0.0f64;
    for chamber in 0..3 {
        let mut plant = Plant::new(plant_params, 0)?;
        let mut p = [lo; 3];
        let mut up = Vec::with_capacity(levels + 1);
        for i in 0..=levels {
            p[chamber] = level(i);
            up.push(plant.eval(p)?.tip());
        }
        for i in (0..=levels).rev() {
            p[chamber] = level(i);
            worst = worst.max((plant.eval(p)?.tip() - up[i]).norm());
        }
    }
    Ok(worst / plant_params.length_rest)
}

fn criterion_1(root: &Path) -> Result<(bool, String)> {
    let run = run_in(root, |_| {})?;
    let t = Instant::now();
    let (_, cal) = pipeline::calibrated_plant(&run.cfg)?;
    let cal = cal.ok_or_else(|| anyhow!("hysteresis disabled in the default config"))?;
    let measured = measured_sweep_deviation(&run)?;
    let secs = t.elapsed().as_secs_f64();
    let ok = (measured - 0.034).abs() <= 0.001 && secs < 10.0;
    Ok((
        ok,
        format!(
            "measured sweep deviation {:.4}% of length (target 3.4 ± 0.1%), half-width {:.4} kPa; {secs:.2} s (< 10 s)",
            100.0 * measured,
            cal.halfwidth
        ),
    ))
}

fn ablation_ratio(summary: TrainModelSummary) -> Result<(f64, f64, String)> {
    match summary {
        TrainModelSummary::Ablation { report, ratio, seconds } => {
            let six = report.best(InputMode::WithDirections).ok_or_else(|| anyhow!("no 6d rows"))?;
            let three = report.best(InputMode::PressureOnly).ok_or_else(|| anyhow!("no 3d rows"))?;
            let ratio = ratio.ok_or_else(|| anyhow!("no ratio"))?;
            let desc = format!(
                "best 6d {} mse {:.5} / best 3d {} mse {:.5} = {ratio:.4}",
                six.architecture, six.test_mse, three.architecture, three.test_mse
            );
            Ok((ratio, seconds, desc))
        }
        TrainModelSummary::Single { .. } => Err(anyhow!("expected an ablation report")),
    }
}

fn criterion_2(main: &Run, control_dir: &Path) -> Result<(bool, String)> {
    let counts = pipeline::gen_data(main, None)?.counts;
    ensure!(counts == [13824, 1000, 1000], "dataset sizes {counts:?}");
    stage("ablation on the calibrated plant (6 architectures x 2 input modes)");
    let (ratio, secs, desc) = ablation_ratio(pipeline::train_model(main, None, true)?)?;
    stage(&format!("{desc} in {secs:.0} s"));

    stage("control ablation with hysteresis disabled");
    let control = run_in(control_dir, |c| c.plant.target_deviation = 0.0)?;
    pipeline::gen_data(&control, None)?;
    let (c_ratio, c_secs, c_desc) = ablation_ratio(pipeline::train_model(&control, None, true)?)?;
    let ok = ratio <= 0.3 && secs < 900.0 && (0.5..=2.0).contains(&c_ratio);
    Ok((
        ok,
        format!(
            "{desc} (<= 0.3), {secs:.0} s (< 900 s); control without hysteresis: {c_desc} (in [0.5, 2]), {c_secs:.0} s"
        ),
    ))
}

fn criterion_3() -> Result<(bool, String)> {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut fewest = usize::MAX;
    for seed in 0..10 {
        let r = gradcheck::run(seed, Activation::Relu, 200);
        worst = worst.max(r.max_rel_error);
        fewest = fewest.min(r.checked);
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = worst <= 1e-4 && fewest >= 200 && secs < 10.0;
    Ok((
        ok,
        format!("6-32-32-15 ReLU net, 10 seeds x {fewest} parameters: max relative error {worst:.2e} (<= 1e-4); {secs:.2} s (< 10 s)"),
    ))
}

/// Direct sum of discounted TD residuals, truncated at episode ends.
fn brute_force_advantage(r: &[f64], v: &[f64], d: &[bool], boot: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    let next_value = |t: usize| if t + 1 < n { v[t + 1] } else { boot };
    let delta: Vec<f64> = (0..n).map(|t| r[t] + if d[t] { 0.0 } else { g * next_value(t) } - v[t]).collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut k = 0;
            loop {
                sum += (g * l).powi(k as i32) * delta[t + k];
                if d[t + k] || t + k + 1 == n {
                    break sum;
                }
                k += 1;
            }
        })
        .collect()
}

fn criterion_4() -> Result<(bool, String)> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(1..=50);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let d: Vec<bool> = (0..n).map(|_| rng.random_bool(0.1)).collect();
        let boot = rng.random_range(-5.0..5.0);
        let (g, l) = (rng.random_range(0.8..=1.0), rng.random_range(0.0..=1.0));
        let (adv, ret) = gae(&r, &v, &d, boot, g, l);
        let oracle = brute_force_advantage(&r, &v, &d, boot, g, l);
        for i in 0..n {
            worst = worst.max((adv[i] - oracle[i]).abs()).max((ret[i] - (oracle[i] + v[i])).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-10 && secs < 5.0,
        format!("1000 instances, length <= 50: max |difference| {worst:.2e} (<= 1e-10); {secs:.3} s (< 5 s)"),
    ))
}

struct PolicyRun {
    eval: EvaluateSummary,
    train_secs: f64,
    scale: f64,
}

fn train_and_evaluate(root: &Path, task: TaskKind) -> Result<PolicyRun> {
    let run = run_in(root, |c| c.task.name = task.to_string())?;
    stage(&format!("training the {task} policy (2M steps)"));
    let trained = pipeline::train_policy(&run, None)?;
    if let Some(reason) = &trained.aborted {
        stage(&format!("{task} training stopped early: {reason}"));
    }
    let eval = pipeline::evaluate(&run, None, None, &[EnvMode::Surrogate, EnvMode::Deploy])?;
    Ok(PolicyRun {
        eval,
        train_secs: trained.seconds,
        scale: trained.workspace_scale,
    })
}

fn criteria_5_6(circle: &Result<PolicyRun>, length: f64) -> (Result<(bool, String)>, Result<(bool, String)>) {
    let Ok(c) = circle else {
        let e = circle.as_ref().err().map(|e| format!("{e:#}")).unwrap_or_default();
        return (Err(anyhow!("circle policy failed: {e}")), Err(anyhow!("circle policy failed: {e}")));
    };
    let s = c.eval.mode(EnvMode::Surrogate).map(|m| m.mean_error_mm).unwrap_or(f64::NAN);
    let d = c.eval.mode(EnvMode::Deploy).map(|m| m.mean_error_mm).unwrap_or(f64::NAN);
    let five = (
        s < 0.02 * length && c.train_secs < 7200.0,
        format!(
            "surrogate mean tip error {s:.4} mm (< {:.2} mm, 2% of length); training {:.0} s (< 7200 s)",
            0.02 * length,
            c.train_secs
        ),
    );
    let six = (
        d < 5.0 * s && d < 0.04 * length,
        format!(
            "deploy mean tip error {d:.4} mm = {:.3} x surrogate (< 5x) and {:.3}% of length (< 4%)",
            d / s,
            100.0 * d / length
        ),
    );
    (Ok(five), Ok(six))
}

fn criterion_7(laser: Result<PolicyRun>) -> Result<(bool, String)> {
    let l = laser?;
    let s = l.eval.mode(EnvMode::Surrogate).ok_or_else(|| anyhow!("no surrogate metrics"))?;
    let d = l.eval.mode(EnvMode::Deploy).map(|m| m.mean_error_mm).unwrap_or(f64::NAN);
    Ok((
        s.mean_error_mm < 0.03 * l.scale,
        format!(
            "mean intersection error {:.4} mm = {:.3}% of the {:.2} mm projected workspace diameter (< 3%); deploy {d:.4} mm; training {:.0} s",
            s.mean_error_mm,
            100.0 * s.mean_error_over_workspace_scale,
            l.scale,
            l.train_secs
        ),
    ))
}

fn criterion_8(root: &Path) -> Result<(bool, String)> {
    let run = run_in(root, |_| {})?;
    let model = Arc::new(HwbnnModel::load(&run.default_model_path()?)?);
    let (plant, _) = pipeline::calibrated_plant(&run.cfg)?;
    let (task, _) = pipeline::build_task(&run.cfg, &model, TaskKind::Circle)?;
    let task = Arc::new(task);
    let cfg = run.cfg.env_config(EnvMode::Surrogate, plant);
    let make = || -> Result<Vec<SoftRobotEnv>> {
        (0..64)
            .map(|_| SoftRobotEnv::surrogate(model.clone(), task.clone(), cfg.clone()).map_err(Into::into))
            .collect()
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build()?;

    // Raw stepping past an episode boundary, with out-of-bound actions.
    let steps = task.episode_length + 50;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let actions: Vec<Vec<Vec<f64>>> = (0..steps)
        .map(|_| (0..64).map(|_| (0..3).map(|_| rng.random_range(-4.0..4.0)).collect()).collect())
        .collect();
    let mut vec_env = VecEnv::new(make()?)?.with_parallel(true);
    let mut seq = make()?;
    let mut transitions = 0usize;
    pool.install(|| -> Result<()> {
        let first = vec_env.reset_all()?;
        for (i, env) in seq.iter_mut().enumerate() {
            ensure!(env.reset()? == first[i], "reset observation {i} differs");
        }
        for (t, acts) in actions.iter().enumerate() {
            let out = vec_env.step(acts)?;
            for (i, (env, res)) in seq.iter_mut().zip(out).enumerate() {
                let v = res?;
                let s = env.step(&acts[i])?;
                ensure!(v.info == s.info && v.reward.to_bits() == s.reward.to_bits() && v.done == s.done, "step {t} env {i} differs");
                if s.done {
                    ensure!(v.terminal_obs.as_ref() == Some(&s.obs), "terminal observation differs at step {t} env {i}");
                    ensure!(v.obs == env.reset()?, "auto-reset observation differs at step {t} env {i}");
                } else {
                    ensure!(v.obs == s.obs, "observation differs at step {t} env {i}");
                }
                transitions += 1;
            }
        }
        Ok(())
    })?;

    // Policy rollouts through the collector, parallel versus sequential.
    let mut init = ChaCha8Rng::seed_from_u64(88);
    let policy = PolicyNet::new(vec_env.obs_dim(), 3, &[64, 64], 3.0, 0.0, -5.0, &mut init)?;
    let mut par = Collector::new(VecEnv::new(make()?)?.with_parallel(true), 21)?;
    let mut ser = Collector::new(VecEnv::new(make()?)?.with_parallel(false), 21)?;
    let mut batches = 0;
    for _ in 0..8 {
        let a = pool.install(|| par.collect(&policy, 64, false))?;
        let b = ser.collect(&policy, 64, false)?;
        ensure!(a == b, "rollout batch {batches} differs");
        batches += 1;
    }
    Ok((
        true,
        format!("{transitions} raw transitions over 64 envs (4 threads) and {batches} x 4096-step collector batches bit-identical to sequential"),
    ))
}

const DETERMINISM_CONFIG: &str = "seed = 17
[dataset]
steps_per_axis = 10
val_count = 200
test_count = 200
[model]
architecture = 3x64
max_epochs = 100
ablation_max_epochs = 10
[ppo]
n_envs = 16
steps_per_env = 64
total_steps = 65536
eval_every = 8
";

fn cli(args: &[&str]) -> Result<()> {
    let out = Command::new(BIN).args(args).output().context("running softbody")?;
    ensure!(
        out.status.success(),
        "softbody {args:?} exited with {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir)?.to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn criterion_9(root: &Path) -> Result<(bool, String)> {
    fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
    let config = root.join("determinism.ini");
    fs::write(&config, DETERMINISM_CONFIG).with_context(|| format!("writing {}", config.display()))?;
    let dirs = [root.join("a"), root.join("b")];
    for d in &dirs {
        let base = ["--config", config.to_str().unwrap(), "--out", d.to_str().unwrap(), "-q"];
        let with = |cmd: &str, extra: &[&str]| -> Vec<String> {
            std::iter::once(cmd).chain(base).chain(extra.iter().copied()).map(String::from).collect()
        };
        for args in [
            with("gen-data", &[]),
            with("train-model", &[]),
            with("train-model", &["--ablation"]),
            with("train-policy", &[]),
            with("evaluate", &[]),
            with("train-policy", &["--task", "laser-circle"]),
            with("evaluate", &["--task", "laser-circle"]),
        ] {
            let refs: Vec<&str> = args.iter().map(String::as_str).collect();
            cli(&refs)?;
        }
    }
    let files = files_under(&dirs[0])?;
    ensure!(files == files_under(&dirs[1])?, "the two runs wrote different file sets");
    // Run records quote the resolved config, which names the run directory;
    // they are compared without it. Everything else must match byte for byte.
    let mut compared = 0;
    let mut differing = Vec::new();
    for f in &files {
        let (a, b) = (fs::read(dirs[0].join(f))?, fs::read(dirs[1].join(f))?);
        let same = if f.to_string_lossy().ends_with(".run.json") {
            let strip = |bytes: &[u8]| -> Result<serde_json::Value> {
                let mut v: serde_json::Value = serde_json::from_slice(bytes)?;
                v.as_object_mut().map(|o| o.remove("config"));
                Ok(v)
            };
            strip(&a)? == strip(&b)?
        } else {
            a == b
        };
        if !same {
            differing.push(f.display().to_string());
        }
        compared += 1;
    }
    let metrics = files.iter().filter(|f| f.to_string_lossy().contains("metrics")).count();
    Ok((
        differing.is_empty(),
        if differing.is_empty() {
            format!("two CLI runs of the reduced pipeline: {compared} artifacts ({metrics} metrics files, checkpoints, curves, datasets) byte-identical")
        } else {
            format!("artifacts differ: {differing:?}")
        },
    ))
}

fn main() -> ExitCode {
    let started = Instant::now();
    let tmp = match tempfile::tempdir() {
        Ok(t) => t,
        Err(e) => {
            println!("[FAIL] setup: {e}");
            return ExitCode::FAILURE;
        }
    };
    let root = tmp.path();
    let main_dir = root.join("main");
    let mut board = Board::default();
    println!("acceptance: 9 criteria");

    board.record(1, "hysteresis calibration", criterion_1(&main_dir));
    board.record(3, "gradient correctness", criterion_3());
    board.record(4, "GAE oracle", criterion_4());

    let main_run = run_in(&main_dir, |_| {});
    board.record(
        2,
        "model ablation",
        main_run.as_ref().map_err(|e| anyhow!("{e:#}")).and_then(|r| criterion_2(r, &root.join("control"))),
    );

    stage("training the default body model");
    let model = main_run
        .as_ref()
        .map_err(|e| anyhow!("{e:#}"))
        .and_then(|r| pipeline::train_model(r, None, false));
    let length = RunConfig::default().plant.length_rest;
    let (five, six, seven, eight) = match model {
        Ok(TrainModelSummary::Single { report, seconds, .. }) => {
            stage(&format!(
                "model {} {}: test mse {:.5} after {} epochs ({seconds:.0} s)",
                report.architecture, report.input_mode, report.test_mse, report.epochs_run
            ));
            let circle = train_and_evaluate(&main_dir, TaskKind::Circle);
            let (five, six) = criteria_5_6(&circle, length);
            let eight = criterion_8(&main_dir);
            let seven = criterion_7(train_and_evaluate(&main_dir, TaskKind::LaserCircle));
            (five, six, seven, eight)
        }
        Ok(_) => {
            let e = || Err(anyhow!("unexpected model summary"));
            (e(), e(), e(), e())
        }
        Err(err) => {
            let msg = format!("{err:#}");
            let e = || Err(anyhow!("body model training failed: {msg}"));
            (e(), e(), e(), e())
        }
    };
    board.record(5, "PPO circle tracking (surrogate)", five);
    board.record(6, "deploy-mode gap", six);
    board.record(7, "laser pointing", seven);
    board.record(8, "vectorization equivalence", eight);
    board.record(9, "end-to-end determinism", criterion_9(&root.join("determinism")));

    board.results.sort_by_key(|o| o.id);
    let passed = board.results.iter().filter(|o| o.pass).count();
    println!("\nsummary ({:.0} s total):", started.elapsed().as_secs_f64());
    for o in &board.results {
        println!("  [{}] {}. {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    println!("{passed}/{} criteria passed", board.results.len());
    if passed == board.results.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
