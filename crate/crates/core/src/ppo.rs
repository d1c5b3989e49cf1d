//! Proximal policy optimisation with a shared-trunk actor-critic and a
//! tanh-squashed Gaussian action head.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::checkpoint::write_sidecar;
use crate::nn::{Activation, Adam, Checkpoint, MlpModel, NnError};
use crate::rlenv::{EnvError, Environment, VecEnv};

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid PPO configuration: {0}")]
    Config(String),
    #[error("environment {index} failed during rollout: {source}")]
    Rollout {
        index: usize,
        #[source]
        source: EnvError,
    },
    #[error("non-finite {what}")]
    NonFinite { what: &'static str },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

const HALF_LOG_TAU: f64 = 0.918_938_533_204_672_7; // 0.5 ln(2 pi)

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
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
    /// Global gradient-norm bound per minibatch step.
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub log_std_init: f64,
    pub log_std_floor: f64,
    /// Updates whose approximate KL exceeds this count towards an abort.
    pub kl_abort: f64,
    /// Consecutive high-KL updates that abort training.
    pub kl_patience: usize,
    /// Run the evaluation callback every this many updates.
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            ent_coef: 0.01,
            clip_range: 0.2,
            n_envs: 64,
            steps_per_env: 64,
            total_steps: 2_000_000,
            epochs: 10,
            minibatch_size: 256,
            learning_rate: 3e-4,
            vf_coef: 0.5,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
            log_std_init: 0.0,
            log_std_floor: -5.0,
            kl_abort: 0.5,
            kl_patience: 3,
            eval_every: 10,
            seed: 0,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        let bad = |m: &str| Err(PpoError::Config(m.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("GAE lambda must lie in [0, 1]");
        }
        if !(self.clip_range > 0.0) {
            return bad("clip range must be positive");
        }
        if self.n_envs == 0 || self.steps_per_env == 0 || self.epochs == 0 || self.minibatch_size == 0 || self.eval_every == 0 {
            return bad("environment count, rollout length, epochs, minibatch size and eval interval must be positive");
        }
        if !(self.learning_rate > 0.0 && self.max_grad_norm > 0.0 && self.vf_coef >= 0.0 && self.ent_coef >= 0.0) {
            return bad("learning rate and gradient bound must be positive; coefficients non-negative");
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("policy trunk needs at least one non-empty hidden layer");
        }
        if !(self.log_std_init >= self.log_std_floor) {
            return bad("initial log-std below its floor");
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.n_envs * self.steps_per_env
    }
}

/// `ln(1 - tanh(u)^2)`, stable for large |u|.
fn log_one_minus_tanh2(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Actor-critic with a shared tanh trunk.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet {
    pub trunk: MlpModel,
    pub mean_head: MlpModel,
    pub value_head: MlpModel,
    pub log_std: Vec<f64>,
    pub action_bound: f64,
    pub log_std_floor: f64,
}

pub const CHECKPOINT_KIND: &str = "policy";

impl PolicyNet {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        action_bound: f64,
        log_std_init: f64,
        log_std_floor: f64,
        rng: &mut R,
    ) -> Result<Self, PpoError> {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        let trunk = MlpModel::init(&sizes, Activation::Tanh, Activation::Tanh, rng)?;
        let features = *hidden.last().ok_or_else(|| PpoError::Config("empty trunk".into()))?;
        let mut mean_head = MlpModel::init(&[features, action_dim], Activation::Identity, Activation::Identity, rng)?;
        for l in mean_head.layers_mut() {
            l.weight.mapv_inplace(|w| 0.01 * w);
        }
        let value_head = MlpModel::init(&[features, 1], Activation::Identity, Activation::Identity, rng)?;
        Ok(Self {
            trunk,
            mean_head,
            value_head,
            log_std: vec![log_std_init; action_dim],
            action_bound,
            log_std_floor,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.trunk.input_size()
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn param_count(&self) -> usize {
        self.trunk.param_count() + self.mean_head.param_count() + self.value_head.param_count() + self.log_std.len()
    }

    /// Trunk, mean head, value head, log-std.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.trunk.write_flat(&mut out);
        self.mean_head.write_flat(&mut out);
        self.value_head.write_flat(&mut out);
        out.extend_from_slice(&self.log_std);
        out
    }

    pub fn read_flat(&mut self, values: &[f64]) -> Result<(), PpoError> {
        if values.len() != self.param_count() {
            return Err(NnError::Dimension {
                expected: self.param_count(),
                got: values.len(),
            }
            .into());
        }
        let mut at = self.trunk.read_flat(values)?;
        at += self.mean_head.read_flat(&values[at..])?;
        at += self.value_head.read_flat(&values[at..])?;
        self.log_std.copy_from_slice(&values[at..]);
        Ok(())
    }

    pub fn clamp_log_std(&mut self) {
        for s in &mut self.log_std {
            *s = s.max(self.log_std_floor);
        }
    }

    /// Pre-squash means and state values for a batch of observations.
    pub fn forward(&self, obs: ArrayView2<f64>) -> Result<(Array2<f64>, Array1<f64>), PpoError> {
        let h = self.trunk.forward_batch(obs)?;
        let mean = self.mean_head.forward_batch(h.view())?;
        let value = self.value_head.forward_batch(h.view())?.index_axis_move(Axis(1), 0);
        Ok((mean, value))
    }

    pub fn squash(&self, u: f64) -> f64 {
        self.action_bound * u.tanh()
    }

    /// Log-density of the squashed action produced by pre-squash sample `u`.
    pub fn log_prob(&self, u: &[f64], mean: &[f64]) -> f64 {
        u.iter()
            .zip(mean)
            .zip(&self.log_std)
            .map(|((u, m), s)| {
                let z = (u - m) / s.exp();
                -0.5 * z * z - s - HALF_LOG_TAU - self.action_bound.ln() - log_one_minus_tanh2(*u)
            })
            .sum()
    }

    /// Entropy of the pre-squash Gaussian.
    pub fn entropy(&self) -> f64 {
        self.log_std.iter().map(|s| s + 0.5 + HALF_LOG_TAU).sum()
    }

    /// Mean action for one observation.
    pub fn deterministic_action(&self, obs: &[f64]) -> Result<Vec<f64>, PpoError> {
        let h = self.trunk.forward(obs)?;
        Ok(self.mean_head.forward(&h)?.into_iter().map(|m| self.squash(m)).collect())
    }

    pub fn to_checkpoint(&self, adam: Option<&Adam>) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set_field("obs_dim", self.obs_dim());
        ck.set_field("action_dim", self.action_dim());
        ck.push_array("action_bound", vec![self.action_bound]);
        ck.push_array("log_std_floor", vec![self.log_std_floor]);
        ck.push_array("log_std", self.log_std.clone());
        ck.push_network("trunk", &self.trunk);
        ck.push_network("mean", &self.mean_head);
        ck.push_network("value", &self.value_head);
        if let Some(adam) = adam {
            let (m, v) = adam.moments();
            ck.set_field("adam_step", adam.steps_taken());
            ck.push_array("adam.hyper", vec![adam.lr, adam.beta1, adam.beta2, adam.eps]);
            ck.push_array("adam.m", m.to_vec());
            ck.push_array("adam.v", v.to_vec());
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<Adam>), PpoError> {
        if ck.header.kind != CHECKPOINT_KIND {
            return Err(NnError::Checkpoint(format!("expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`", ck.header.kind)).into());
        }
        let scalar = |name: &str| -> Result<f64, PpoError> {
            ck.array(name)?
                .first()
                .copied()
                .ok_or_else(|| NnError::Checkpoint(format!("empty array `{name}`")).into())
        };
        let policy = Self {
            trunk: ck.network(0, "trunk")?,
            mean_head: ck.network(1, "mean")?,
            value_head: ck.network(2, "value")?,
            log_std: ck.array("log_std")?.to_vec(),
            action_bound: scalar("action_bound")?,
            log_std_floor: scalar("log_std_floor")?,
        };
        if policy.mean_head.output_size() != policy.log_std.len() || policy.obs_dim() != ck.field::<usize>("obs_dim")? {
            return Err(NnError::Checkpoint("policy heads disagree with the header".into()).into());
        }
        let adam = match ck.array("adam.hyper") {
            Ok(h) if h.len() == 4 => {
                let mut adam = Adam::new(policy.param_count(), h[0], h[1], h[2], h[3]);
                let (m, v) = (ck.array("adam.m")?.to_vec(), ck.array("adam.v")?.to_vec());
                if m.len() != policy.param_count() || v.len() != policy.param_count() {
                    return Err(NnError::Checkpoint("optimiser moments have the wrong length".into()).into());
                }
                adam.restore(ck.field("adam_step")?, m, v);
                Some(adam)
            }
            _ => None,
        };
        Ok((policy, adam))
    }

    pub fn save(&self, path: &Path, adam: Option<&Adam>, meta: serde_json::Value) -> Result<(), PpoError> {
        self.to_checkpoint(adam).save(path)?;
        let mut doc = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "format_version": crate::nn::checkpoint::FORMAT_VERSION,
            "obs_dim": self.obs_dim(),
            "action_dim": self.action_dim(),
            "action_bound": self.action_bound,
            "trunk": self.trunk.layer_sizes(),
            "has_optimizer_state": adam.is_some(),
        });
        if let (Some(obj), serde_json::Value::Object(extra)) = (doc.as_object_mut(), meta) {
            obj.extend(extra);
        }
        write_sidecar(path, &doc)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(Self, Option<Adam>), PpoError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Advantages and returns for one trajectory segment.
pub fn gae(rewards: &[f64], values: &[f64], dones: &[bool], bootstrap: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    assert!(values.len() == n && dones.len() == n, "GAE inputs differ in length");
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let alive = if dones[t] { 0.0 } else { 1.0 };
        let next_value = if t + 1 < n { values[t + 1] } else { bootstrap };
        let delta = rewards[t] + gamma * next_value * alive - values[t];
        next_adv = delta + gamma * lambda * alive * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Zero mean, unit standard deviation (floored at 1e-8).
pub fn normalize_advantages(adv: &mut [f64]) {
    let n = adv.len() as f64;
    if adv.is_empty() {
        return;
    }
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

/// `min(r·A, clip(r, 1-eps, 1+eps)·A)` for one sample.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// Transitions from all environments, time-major (`t * n_envs + env`).
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBatch {
    pub n_envs: usize,
    pub steps: usize,
    pub obs: Array2<f64>,
    /// Pre-squash samples.
    pub u: Array2<f64>,
    pub actions: Array2<f64>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    /// Value of the observation after the last step, per environment.
    pub bootstrap: Vec<f64>,
    pub episode_returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    /// Per-environment GAE, flattened back to batch order.
    pub fn advantages(&self, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
        let mut adv = vec![0.0; self.len()];
        let mut ret = vec![0.0; self.len()];
        for e in 0..self.n_envs {
            let idx: Vec<usize> = (0..self.steps).map(|t| t * self.n_envs + e).collect();
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let dones: Vec<bool> = idx.iter().map(|&i| self.dones[i]).collect();
            let (a, r) = gae(&pick(&self.rewards), &pick(&self.values), &dones, self.bootstrap[e], gamma, lambda);
            for (k, &i) in idx.iter().enumerate() {
                adv[i] = a[k];
                ret[i] = r[k];
            }
        }
        (adv, ret)
    }
}

/// Rollout driver that keeps the current observations between batches.
#[derive(Debug)]
pub struct Collector<E> {
    pub envs: VecEnv<E>,
    obs: Vec<Vec<f64>>,
    running_return: Vec<f64>,
    rng: ChaCha8Rng,
}

impl<E: Environment> Collector<E> {
    pub fn new(mut envs: VecEnv<E>, seed: u64) -> Result<Self, PpoError> {
        let obs = envs.reset_all()?;
        let n = envs.len();
        Ok(Self {
            envs,
            obs,
            running_return: vec![0.0; n],
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    /// Steps every environment `steps` times under a frozen policy.
    pub fn collect(&mut self, policy: &PolicyNet, steps: usize, deterministic: bool) -> Result<RolloutBatch, PpoError> {
        let n = self.envs.len();
        let (od, ad) = (self.envs.obs_dim(), self.envs.action_dim());
        if policy.obs_dim() != od || policy.action_dim() != ad {
            return Err(PpoError::Config("policy and environment sizes differ".into()));
        }
        let total = n * steps;
        let mut batch = RolloutBatch {
            n_envs: n,
            steps,
            obs: Array2::zeros((total, od)),
            u: Array2::zeros((total, ad)),
            actions: Array2::zeros((total, ad)),
            log_probs: Vec::with_capacity(total),
            rewards: Vec::with_capacity(total),
            values: Vec::with_capacity(total),
            dones: Vec::with_capacity(total),
            bootstrap: Vec::new(),
            episode_returns: Vec::new(),
        };
        for t in 0..steps {
            let mut obs = Array2::zeros((n, od));
            for (mut row, o) in obs.rows_mut().into_iter().zip(&self.obs) {
                row.iter_mut().zip(o).for_each(|(d, s)| *d = *s);
            }
            let (mean, value) = policy.forward(obs.view())?;
            let mut actions = Vec::with_capacity(n);
            for e in 0..n {
                let i = t * n + e;
                let m = mean.row(e);
                let u: Vec<f64> = m
                    .iter()
                    .zip(&policy.log_std)
                    .map(|(m, s)| {
                        if deterministic {
                            *m
                        } else {
                            m + s.exp() * self.rng.sample::<f64, _>(StandardNormal)
                        }
                    })
                    .collect();
                let a: Vec<f64> = u.iter().map(|u| policy.squash(*u)).collect();
                batch.obs.row_mut(i).assign(&obs.row(e));
                batch.u.row_mut(i).iter_mut().zip(&u).for_each(|(d, s)| *d = *s);
                batch.actions.row_mut(i).iter_mut().zip(&a).for_each(|(d, s)| *d = *s);
                batch.log_probs.push(policy.log_prob(&u, m.as_slice().expect("row-major")));
                batch.values.push(value[e]);
                actions.push(a);
            }
            let results = self.envs.step(&actions)?;
            for (e, res) in results.into_iter().enumerate() {
                let step = res.map_err(|source| PpoError::Rollout { index: e, source })?;
                self.running_return[e] += step.reward;
                if step.done {
                    batch.episode_returns.push(self.running_return[e]);
                    self.running_return[e] = 0.0;
                }
                batch.rewards.push(step.reward);
                batch.dones.push(step.done);
                self.obs[e] = step.obs;
            }
        }
        let mut last = Array2::zeros((n, od));
        for (mut row, o) in last.rows_mut().into_iter().zip(&self.obs) {
            row.iter_mut().zip(o).for_each(|(d, s)| *d = *s);
        }
        batch.bootstrap = policy.forward(last.view())?.1.to_vec();
        Ok(batch)
    }
}

/// Scalar terms of one loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_frac: f64,
}

/// Minibatch view for the loss.
#[derive(Debug, Clone, Copy)]
pub struct LossBatch<'a> {
    pub obs: ArrayView2<'a, f64>,
    pub u: ArrayView2<'a, f64>,
    pub old_log_probs: &'a [f64],
    pub advantages: &'a [f64],
    pub returns: &'a [f64],
}

/// Clipped-surrogate loss and its exact gradient in `flat_params` order.
pub fn ppo_loss(policy: &PolicyNet, batch: &LossBatch<'_>, cfg: &PpoConfig) -> Result<(LossParts, Vec<f64>), PpoError> {
    let m = batch.obs.nrows();
    let ad = policy.action_dim();
    let mf = m as f64;
    let trunk_cache = policy.trunk.forward_cached(batch.obs)?;
    let h = trunk_cache.output();
    let mean_cache = policy.mean_head.forward_cached(h.view())?;
    let value_cache = policy.value_head.forward_cached(h.view())?;
    let mean = mean_cache.output();
    let value = value_cache.output();

    let sigma: Vec<f64> = policy.log_std.iter().map(|s| s.exp()).collect();
    let mut grad_mean = Array2::zeros((m, ad));
    let mut grad_value = Array2::zeros((m, 1));
    let mut grad_log_std = vec![-cfg.ent_coef; ad];
    let mut parts = LossParts::default();

    for i in 0..m {
        let u = batch.u.row(i);
        let mu = mean.row(i);
        let new_lp = policy.log_prob(u.as_slice().expect("row-major"), mu.as_slice().expect("row-major"));
        let log_ratio = new_lp - batch.old_log_probs[i];
        let ratio = log_ratio.exp();
        if !ratio.is_finite() {
            return Err(PpoError::NonFinite { what: "probability ratio" });
        }
        let a = batch.advantages[i];
        let clipped = ratio.clamp(1.0 - cfg.clip_range, 1.0 + cfg.clip_range);
        parts.policy -= clipped_surrogate(ratio, a, cfg.clip_range) / mf;
        parts.approx_kl += ((ratio - 1.0) - log_ratio) / mf;
        if (ratio - 1.0).abs() > cfg.clip_range {
            parts.clip_frac += 1.0 / mf;
        }
        // d(loss)/d(log-prob) is non-zero only where the unclipped term is the minimum
        let dlp = if ratio * a <= clipped * a { -a * ratio / mf } else { 0.0 };
        for j in 0..ad {
            let z = (u[j] - mu[j]) / sigma[j];
            grad_mean[[i, j]] = dlp * z / sigma[j];
            grad_log_std[j] += dlp * (z * z - 1.0);
        }
        let err = value[[i, 0]] - batch.returns[i];
        parts.value += err * err / mf;
        grad_value[[i, 0]] = 2.0 * cfg.vf_coef * err / mf;
    }
    parts.entropy = policy.entropy();
    parts.total = parts.policy + cfg.vf_coef * parts.value - cfg.ent_coef * parts.entropy;

    let (g_mean, dh_mean) = policy.mean_head.backward(&mean_cache, grad_mean.view());
    let (g_value, dh_value) = policy.value_head.backward(&value_cache, grad_value.view());
    let dh = dh_mean + dh_value;
    let (g_trunk, _) = policy.trunk.backward(&trunk_cache, dh.view());
    let mut grad = Vec::with_capacity(policy.param_count());
    g_trunk.write_flat(&mut grad);
    g_mean.write_flat(&mut grad);
    g_value.write_flat(&mut grad);
    grad.extend_from_slice(&grad_log_std);
    Ok((parts, grad))
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub update: usize,
    pub steps: usize,
    /// Mean per-step reward of the rollout.
    pub mean_reward: f64,
    pub clip_frac: f64,
    pub approx_kl: f64,
    pub entropy: f64,
    pub value_loss: f64,
    /// Mean return of episodes finished during the rollout (NaN if none).
    pub episode_return: f64,
    /// Evaluation score when one was run this update (NaN otherwise).
    pub eval_score: f64,
}

pub const CURVE_HEADER: &str = "update,steps,mean_reward,clip_frac,approx_kl,entropy,value_loss,episode_return,eval_score";

impl CurveRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.update, self.steps, self.mean_reward, self.clip_frac, self.approx_kl, self.entropy, self.value_loss, self.episode_return, self.eval_score
        )
    }
}

pub fn write_curve(path: &Path, rows: &[CurveRow]) -> Result<(), PpoError> {
    let mut text = String::from(CURVE_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_line());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|source| PpoError::Io {
        path: path.to_owned(),
        source,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: PolicyNet,
    pub adam: Adam,
    /// Policy with the highest evaluation score.
    pub best: PolicyNet,
    /// Optimiser state at the time `best` was taken.
    pub best_adam: Adam,
    pub best_score: f64,
    pub curve: Vec<CurveRow>,
    /// Why training stopped before the step budget, if it did.
    pub aborted: Option<String>,
}

/// Collect, estimate advantages, then run minibatched epochs, until the step
/// budget is spent. `evaluate` scores a policy (higher is better).
pub fn train_policy<E: Environment>(
    envs: VecEnv<E>,
    cfg: &PpoConfig,
    mut evaluate: impl FnMut(&PolicyNet) -> Result<f64, PpoError>,
    mut on_update: impl FnMut(&CurveRow),
) -> Result<TrainOutcome, PpoError> {
    cfg.validate()?;
    if envs.len() != cfg.n_envs {
        return Err(PpoError::Config(format!("expected {} environments, got {}", cfg.n_envs, envs.len())));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut policy = PolicyNet::new(
        envs.obs_dim(),
        envs.action_dim(),
        &cfg.hidden,
        envs.action_bound(),
        cfg.log_std_init,
        cfg.log_std_floor,
        &mut init_rng,
    )?;
    let mut adam = Adam::new(policy.param_count(), cfg.learning_rate, 0.9, 0.999, 1e-8);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut collector = Collector::new(envs, cfg.seed)?;
    let updates = (cfg.total_steps / cfg.batch_size()).max(1);
    let mut best = policy.clone();
    let mut best_adam = adam.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut curve = Vec::with_capacity(updates);
    let mut aborted = None;
    let mut high_kl = 0;
    let mut params = policy.flat_params();

    for update in 1..=updates {
        let batch = collector.collect(&policy, cfg.steps_per_env, false)?;
        let (mut adv, returns) = batch.advantages(cfg.gamma, cfg.gae_lambda);
        normalize_advantages(&mut adv);
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let (mut kl_sum, mut clip_sum, mut vloss_sum, mut count) = (0.0, 0.0, 0.0, 0usize);
        let mut failure = None;
        'epochs: for _ in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            for chunk in order.chunks(cfg.minibatch_size) {
                let obs = batch.obs.select(Axis(0), chunk);
                let u = batch.u.select(Axis(0), chunk);
                let old: Vec<f64> = chunk.iter().map(|&i| batch.log_probs[i]).collect();
                let a: Vec<f64> = chunk.iter().map(|&i| adv[i]).collect();
                let r: Vec<f64> = chunk.iter().map(|&i| returns[i]).collect();
                let lb = LossBatch {
                    obs: obs.view(),
                    u: u.view(),
                    old_log_probs: &old,
                    advantages: &a,
                    returns: &r,
                };
                let (parts, mut grad) = match ppo_loss(&policy, &lb, cfg) {
                    Ok(v) => v,
                    Err(e @ PpoError::NonFinite { .. }) => {
                        failure = Some(e.to_string());
                        break 'epochs;
                    }
                    Err(e) => return Err(e),
                };
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    failure = Some("non-finite gradient".into());
                    break 'epochs;
                }
                if norm > cfg.max_grad_norm {
                    let s = cfg.max_grad_norm / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
                adam.update(&mut params, &grad);
                policy.read_flat(&params)?;
                policy.clamp_log_std();
                params.truncate(params.len() - policy.log_std.len());
                params.extend_from_slice(&policy.log_std);
                kl_sum += parts.approx_kl;
                clip_sum += parts.clip_frac;
                vloss_sum += parts.value;
                count += 1;
            }
        }
        let denom = count.max(1) as f64;
        let eval_score = if update % cfg.eval_every == 0 || update == updates {
            let s = evaluate(&policy)?;
            if s > best_score {
                best_score = s;
                best = policy.clone();
                best_adam = adam.clone();
            }
            s
        } else {
            f64::NAN
        };
        let row = CurveRow {
            update,
            steps: update * cfg.batch_size(),
            mean_reward: batch.rewards.iter().sum::<f64>() / batch.len() as f64,
            clip_frac: clip_sum / denom,
            approx_kl: kl_sum / denom,
            entropy: policy.entropy(),
            value_loss: vloss_sum / denom,
            episode_return: if batch.episode_returns.is_empty() {
                f64::NAN
            } else {
                batch.episode_returns.iter().sum::<f64>() / batch.episode_returns.len() as f64
            },
            eval_score,
        };
        on_update(&row);
        let kl = row.approx_kl;
        curve.push(row);
        if let Some(reason) = failure {
            aborted = Some(format!("update {update}: {reason}"));
            break;
        }
        high_kl = if kl > cfg.kl_abort { high_kl + 1 } else { 0 };
        if high_kl >= cfg.kl_patience {
            aborted = Some(format!("update {update}: approximate KL above {} for {high_kl} consecutive updates", cfg.kl_abort));
            break;
        }
    }
    if best_score == f64::NEG_INFINITY {
        best = policy.clone();
        best_adam = adam.clone();
    }
    Ok(TrainOutcome {
        policy,
        adam,
        best,
        best_adam,
        best_score,
        curve,
        aborted,
    })
}
