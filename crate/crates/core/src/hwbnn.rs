//! Hysteresis-aware whole-body network: maps chamber pressures plus their
//! direction-of-change signs to the coordinates of every key point.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Directions, Sample};
use crate::geometry::KeyPointSet;
use crate::nn::checkpoint::{sidecar_path, write_sidecar};
use crate::nn::{Activation, Adam, Checkpoint, Gradients, MlpModel, NnError};
use crate::plant::Pressures;

#[derive(Debug, Error)]
pub enum HwbnnError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("every output dimension has zero range over the training set")]
    DegenerateRange,
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("expected {expected} values, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Divergence { epoch: usize },
    #[error("model output is not a valid key-point set: {0}")]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Which inputs the network sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InputMode {
    /// Pressures and direction signs.
    #[serde(rename = "6d")]
    WithDirections,
    /// Pressures only.
    #[serde(rename = "3d")]
    PressureOnly,
}

impl InputMode {
    pub fn input_size(self) -> usize {
        match self {
            InputMode::WithDirections => 6,
            InputMode::PressureOnly => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputMode::WithDirections => "6d",
            InputMode::PressureOnly => "3d",
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "6d" => Ok(InputMode::WithDirections),
            "3d" => Ok(InputMode::PressureOnly),
            other => Err(format!("unknown input mode `{other}` (expected 3d or 6d)")),
        }
    }
}

/// Trained dynamics model with its input standardisation.
#[derive(Debug, Clone, PartialEq)]
pub struct HwbnnModel {
    pub mlp: MlpModel,
    pub mode: InputMode,
    pub pressure_mean: [f64; 3],
    pub pressure_std: [f64; 3],
    pub n_keys: usize,
}

pub const CHECKPOINT_KIND: &str = "hwbnn";

impl HwbnnModel {
    /// Fresh model whose pressure standardisation comes from `train`.
    pub fn new_for(
        train: &[Sample],
        arch: Architecture,
        mode: InputMode,
        n_keys: usize,
        seed: u64,
    ) -> Result<Self, HwbnnError> {
        if train.is_empty() {
            return Err(HwbnnError::TooFewSamples { needed: 1, got: 0 });
        }
        let count = train.len() as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            mean[c] = train.iter().map(|s| s.p[c]).sum::<f64>() / count;
            let var = train.iter().map(|s| (s.p[c] - mean[c]).powi(2)).sum::<f64>() / count;
            std[c] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        let mut sizes = vec![mode.input_size()];
        sizes.extend(std::iter::repeat_n(arch.width, arch.hidden_layers));
        sizes.push(3 * n_keys);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = MlpModel::init(&sizes, Activation::Relu, Activation::Identity, &mut rng)?;
        Ok(Self {
            mlp,
            mode,
            pressure_mean: mean,
            pressure_std: std,
            n_keys,
        })
    }

    pub fn output_size(&self) -> usize {
        3 * self.n_keys
    }

    /// Network input for one `(p, d)`; direction signs pass through raw.
    pub fn encode(&self, p: &Pressures, d: &Directions) -> Vec<f64> {
        let mut x: Vec<f64> = (0..3)
            .map(|c| (p[c] - self.pressure_mean[c]) / self.pressure_std[c])
            .collect();
        if self.mode == InputMode::WithDirections {
            x.extend_from_slice(d);
        }
        x
    }

    pub fn design_matrix(&self, samples: &[Sample]) -> Array2<f64> {
        let width = self.mode.input_size();
        let mut x = Array2::zeros((samples.len(), width));
        for (mut row, s) in x.rows_mut().into_iter().zip(samples) {
            for (dst, v) in row.iter_mut().zip(self.encode(&s.p, &s.d)) {
                *dst = v;
            }
        }
        x
    }

    pub fn predict(&self, p: &Pressures, d: &Directions) -> Result<Vec<f64>, HwbnnError> {
        Ok(self.mlp.forward(&self.encode(p, d))?)
    }

    pub fn predict_keys(&self, p: &Pressures, d: &Directions) -> Result<KeyPointSet, HwbnnError> {
        Ok(KeyPointSet::from_flat(&self.predict(p, d)?)?)
    }

    pub fn predict_batch(&self, samples: &[Sample]) -> Result<Array2<f64>, HwbnnError> {
        Ok(self.mlp.forward_batch(self.design_matrix(samples).view())?)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND);
        ck.set_field("input_mode", self.mode);
        ck.set_field("n_keys", self.n_keys);
        ck.push_array("pressure_mean", self.pressure_mean.to_vec());
        ck.push_array("pressure_std", self.pressure_std.to_vec());
        ck.push_network("mlp", &self.mlp);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, HwbnnError> {
        if ck.header.kind != CHECKPOINT_KIND {
            return Err(NnError::Checkpoint(format!("expected a `{CHECKPOINT_KIND}` checkpoint, found `{}`", ck.header.kind)).into());
        }
        let mode: InputMode = ck.field("input_mode")?;
        let n_keys: usize = ck.field("n_keys")?;
        let triple = |name: &str| -> Result<[f64; 3], HwbnnError> {
            let v = ck.array(name)?;
            v.try_into().map_err(|_| HwbnnError::Dimension { expected: 3, got: v.len() })
        };
        let mlp = ck.network(0, "mlp")?;
        if mlp.input_size() != mode.input_size() || mlp.output_size() != 3 * n_keys {
            return Err(NnError::Checkpoint("network shape disagrees with input mode or key count".into()).into());
        }
        Ok(Self {
            mode,
            n_keys,
            pressure_mean: triple("pressure_mean")?,
            pressure_std: triple("pressure_std")?,
            mlp,
        })
    }

    /// Writes the binary checkpoint and a JSON sidecar with `meta` merged
    /// into the standard description.
    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<(), HwbnnError> {
        self.to_checkpoint().save(path)?;
        let mut doc = serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "format_version": crate::nn::checkpoint::FORMAT_VERSION,
            "layer_sizes": self.mlp.layer_sizes(),
            "hidden_activation": self.mlp.hidden_activation(),
            "input_mode": self.mode,
            "n_keys": self.n_keys,
            "pressure_mean": self.pressure_mean,
            "pressure_std": self.pressure_std,
        });
        if let (Some(obj), serde_json::Value::Object(extra)) = (doc.as_object_mut(), meta) {
            obj.extend(extra);
        }
        write_sidecar(path, &doc)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, HwbnnError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn sidecar(path: &Path) -> PathBuf {
        sidecar_path(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub hidden_layers: usize,
    pub width: usize,
}

impl Architecture {
    pub const fn new(hidden_layers: usize, width: usize) -> Self {
        Self { hidden_layers, width }
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self::new(4, 128)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.hidden_layers, self.width)
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (l, w) = s
            .split_once('x')
            .ok_or_else(|| format!("architecture `{s}` is not LAYERSxWIDTH"))?;
        let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("architecture `{s}`: {e}"));
        let arch = Self::new(parse(l)?, parse(w)?);
        if arch.hidden_layers == 0 || arch.width == 0 {
            return Err(format!("architecture `{s}` must have positive depth and width"));
        }
        Ok(arch)
    }
}

/// {3, 4} hidden layers x {64, 128, 256} units.
pub fn architecture_sweep() -> Vec<Architecture> {
    [3, 4]
        .into_iter()
        .flat_map(|l| [64, 128, 256].into_iter().map(move |w| Architecture::new(l, w)))
        .collect()
}

/// Per-dimension loss weights `w_i = 1 + D * dY_i / sum_j dY_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeWeights {
    pub w: Vec<f64>,
    pub delta_y: Vec<f64>,
}

impl RangeWeights {
    pub fn uniform(dims: usize) -> Self {
        Self {
            w: vec![1.0; dims],
            delta_y: vec![0.0; dims],
        }
    }
}

pub fn compute_range_weights<'a, I>(targets: I) -> Result<RangeWeights, HwbnnError>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = targets.into_iter();
    let first = iter.next().ok_or(HwbnnError::TooFewSamples { needed: 2, got: 0 })?;
    let mut lo = first.to_vec();
    let mut hi = first.to_vec();
    let mut count = 1;
    for y in iter {
        if y.len() != lo.len() {
            return Err(HwbnnError::Dimension { expected: lo.len(), got: y.len() });
        }
        for ((l, h), &v) in lo.iter_mut().zip(hi.iter_mut()).zip(y) {
            *l = l.min(v);
            *h = h.max(v);
        }
        count += 1;
    }
    if count < 2 {
        return Err(HwbnnError::TooFewSamples { needed: 2, got: count });
    }
    let delta_y: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| h - l).collect();
    let total: f64 = delta_y.iter().sum();
    if total <= 0.0 {
        return Err(HwbnnError::DegenerateRange);
    }
    let dims = delta_y.len() as f64;
    Ok(RangeWeights {
        w: delta_y.iter().map(|d| 1.0 + dims * d / total).collect(),
        delta_y,
    })
}

pub fn weighted_mse(y: &[f64], y_hat: &[f64], weights: &[f64]) -> Result<f64, HwbnnError> {
    if y.len() != y_hat.len() || y.len() != weights.len() {
        return Err(HwbnnError::Dimension {
            expected: y.len(),
            got: if y_hat.len() != y.len() { y_hat.len() } else { weights.len() },
        });
    }
    let sum: f64 = y.iter().zip(y_hat).zip(weights).map(|((a, b), w)| w * (a - b).powi(2)).sum();
    Ok(sum / y.len() as f64)
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64, HwbnnError> {
    if y.len() != y_hat.len() {
        return Err(HwbnnError::Dimension { expected: y.len(), got: y_hat.len() });
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

/// Mean weighted MSE over rows of a prediction matrix.
pub fn batch_weighted_mse(y: ArrayView2<f64>, y_hat: ArrayView2<f64>, weights: &[f64]) -> f64 {
    let dims = y.ncols() as f64;
    let mut total = 0.0;
    for (a, b) in y.rows().into_iter().zip(y_hat.rows()) {
        total += a.iter().zip(b.iter()).zip(weights).map(|((a, b), w)| w * (a - b).powi(2)).sum::<f64>();
    }
    total / (dims * y.nrows() as f64)
}

/// Loss and exact parameter gradients of the batch-mean weighted MSE.
pub fn backward(
    model: &MlpModel,
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    weights: &[f64],
) -> Result<(f64, Gradients), HwbnnError> {
    if x.nrows() == 0 {
        return Err(HwbnnError::TooFewSamples { needed: 1, got: 0 });
    }
    if y.ncols() != model.output_size() || weights.len() != y.ncols() || x.nrows() != y.nrows() {
        return Err(HwbnnError::Dimension {
            expected: model.output_size(),
            got: y.ncols(),
        });
    }
    let cache = model.forward_cached(x)?;
    let out = cache.output();
    let loss = batch_weighted_mse(y, out.view(), weights);
    let scale = 2.0 / (y.ncols() as f64 * y.nrows() as f64);
    let mut grad = out - &y;
    for mut row in grad.rows_mut() {
        for (g, w) in row.iter_mut().zip(weights) {
            *g *= scale * w;
        }
    }
    let (grads, _) = model.backward(&cache, grad.view());
    Ok((loss, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validate every this many epochs.
    pub eval_every: usize,
    /// Stop after this many consecutive validations without improvement.
    pub patience: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 1000,
            eval_every: 10,
            patience: 10,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err("learning rate must be positive".into());
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err("batch size, max epochs, eval interval and patience must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err("moment coefficients must lie in [0, 1) and eps must be positive".into());
        }
        Ok(())
    }
}

/// Patience counter over validation losses.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records a validation loss; returns whether it is a new best.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStopping,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub evals: Vec<EvalRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stop_reason: StopReason,
}

struct Matrices {
    x: Array2<f64>,
    y: Array2<f64>,
}

fn matrices(model: &HwbnnModel, samples: &[Sample]) -> Result<Matrices, HwbnnError> {
    let dims = model.output_size();
    let mut y = Array2::zeros((samples.len(), dims));
    for (mut row, s) in y.rows_mut().into_iter().zip(samples) {
        if s.y.len() != dims {
            return Err(HwbnnError::Dimension { expected: dims, got: s.y.len() });
        }
        row.iter_mut().zip(&s.y).for_each(|(d, v)| *d = *v);
    }
    Ok(Matrices {
        x: model.design_matrix(samples),
        y,
    })
}

/// Mini-batch Adam on the range-weighted MSE with periodic validation.
/// Returns the checkpoint with the best validation loss.
pub fn train(
    mut model: HwbnnModel,
    train_set: &[Sample],
    val_set: &[Sample],
    weights: &RangeWeights,
    cfg: &TrainConfig,
) -> Result<(HwbnnModel, TrainHistory), HwbnnError> {
    cfg.validate().map_err(NnError::Shape)?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(HwbnnError::TooFewSamples { needed: 1, got: 0 });
    }
    if weights.w.len() != model.output_size() {
        return Err(HwbnnError::Dimension {
            expected: model.output_size(),
            got: weights.w.len(),
        });
    }
    let tr = matrices(&model, train_set)?;
    let va = matrices(&model, val_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.mlp.param_count(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut params = model.mlp.flat_params();
    let mut grad_buf = Vec::with_capacity(params.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut history = TrainHistory {
        evals: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        epochs_run: 0,
        stop_reason: StopReason::MaxEpochs,
    };

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = tr.x.select(Axis(0), chunk);
            let yb = tr.y.select(Axis(0), chunk);
            let (loss, grads) = backward(&model.mlp, xb.view(), yb.view(), &weights.w)?;
            if !loss.is_finite() {
                return Err(HwbnnError::Divergence { epoch });
            }
            epoch_loss += loss * chunk.len() as f64;
            grad_buf.clear();
            grads.write_flat(&mut grad_buf);
            adam.update(&mut params, &grad_buf);
            model.mlp.read_flat(&params)?;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        if !train_loss.is_finite() || !model.mlp.all_finite() {
            return Err(HwbnnError::Divergence { epoch });
        }
        history.epochs_run = epoch;

        if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let pred = model.mlp.forward_batch(va.x.view())?;
            let val_loss = batch_weighted_mse(va.y.view(), pred.view(), &weights.w);
            if !val_loss.is_finite() {
                return Err(HwbnnError::Divergence { epoch });
            }
            history.evals.push(EvalRecord { epoch, train_loss, val_loss });
            if stopper.observe(val_loss) {
                best = model.clone();
                history.best_epoch = epoch;
                history.best_val_loss = val_loss;
            }
            if stopper.should_stop() {
                history.stop_reason = StopReason::EarlyStopping;
                break;
            }
        }
    }
    Ok((best, history))
}

/// Weighted and plain MSE of `model` over `samples`.
pub fn evaluate(model: &HwbnnModel, samples: &[Sample], weights: &RangeWeights) -> Result<(f64, f64), HwbnnError> {
    let m = matrices(model, samples)?;
    let pred = model.mlp.forward_batch(m.x.view())?;
    let wmse = batch_weighted_mse(m.y.view(), pred.view(), &weights.w);
    let plain = batch_weighted_mse(m.y.view(), pred.view(), &vec![1.0; weights.w.len()]);
    Ok((wmse, plain))
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: HwbnnModel,
    pub history: TrainHistory,
    pub weights: RangeWeights,
}

/// Initialises, standardises and trains one model.
pub fn fit(
    train_set: &[Sample],
    val_set: &[Sample],
    arch: Architecture,
    mode: InputMode,
    cfg: &TrainConfig,
) -> Result<FitResult, HwbnnError> {
    let n_keys = train_set
        .first()
        .map(|s| s.y.len() / 3)
        .ok_or(HwbnnError::TooFewSamples { needed: 2, got: 0 })?;
    let weights = compute_range_weights(train_set.iter().map(|s| s.y.as_slice()))?;
    let model = HwbnnModel::new_for(train_set, arch, mode, n_keys, cfg.seed ^ 0x5e_ed0f_1417)?;
    let (model, history) = train(model, train_set, val_set, &weights, cfg)?;
    Ok(FitResult { model, history, weights })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub architecture: Architecture,
    pub input_mode: InputMode,
    pub test_wmse: f64,
    pub test_mse: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn best(&self, mode: InputMode) -> Option<&AblationRow> {
        self.rows
            .iter()
            .filter(|r| r.input_mode == mode)
            .min_by(|a, b| a.test_mse.total_cmp(&b.test_mse))
    }

    /// Best 6D test MSE over best 3D test MSE.
    pub fn best_ratio(&self) -> Option<f64> {
        Some(self.best(InputMode::WithDirections)?.test_mse / self.best(InputMode::PressureOnly)?.test_mse)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("architecture,input_mode,test_wmse,test_mse\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{}\n", r.architecture, r.input_mode, r.test_wmse, r.test_mse));
        }
        out
    }

    /// Side-by-side table, one line per architecture.
    pub fn table(&self) -> String {
        let mut out = format!("{:<8} {:>12} {:>12} {:>12} {:>12}\n", "arch", "3d wmse", "6d wmse", "3d mse", "6d mse");
        let mut archs: Vec<Architecture> = Vec::new();
        for r in &self.rows {
            if !archs.contains(&r.architecture) {
                archs.push(r.architecture);
            }
        }
        for a in archs {
            let get = |m: InputMode| self.rows.iter().find(|r| r.architecture == a && r.input_mode == m);
            let fmt = |r: Option<&AblationRow>, f: fn(&AblationRow) -> f64| r.map_or("-".to_string(), |r| format!("{:.5}", f(r)));
            let (three, six) = (get(InputMode::PressureOnly), get(InputMode::WithDirections));
            out.push_str(&format!(
                "{:<8} {:>12} {:>12} {:>12} {:>12}\n",
                a.to_string(),
                fmt(three, |r| r.test_wmse),
                fmt(six, |r| r.test_wmse),
                fmt(three, |r| r.test_mse),
                fmt(six, |r| r.test_mse)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HwbnnError> {
        std::fs::write(path, self.to_csv()).map_err(|source| HwbnnError::Io {
            path: path.to_owned(),
            source,
        })
    }
}

/// Trains every architecture twice, with and without the direction inputs,
/// and scores each on the test split.
pub fn ablation_compare(
    train_set: &[Sample],
    val_set: &[Sample],
    test_set: &[Sample],
    architectures: &[Architecture],
    cfg: &TrainConfig,
    mut on_fit: impl FnMut(&AblationRow, &FitResult),
) -> Result<AblationReport, HwbnnError> {
    let layout = train_set.first().map(|s| s.y.len());
    if [val_set, test_set].iter().any(|set| set.iter().any(|s| Some(s.y.len()) != layout)) {
        return Err(HwbnnError::Dimension {
            expected: layout.unwrap_or(0),
            got: 0,
        });
    }
    let mut rows = Vec::new();
    for &arch in architectures {
        for mode in [InputMode::WithDirections, InputMode::PressureOnly] {
            let fit = fit(train_set, val_set, arch, mode, cfg)?;
            let (test_wmse, test_mse) = evaluate(&fit.model, test_set, &fit.weights)?;
            let row = AblationRow {
                architecture: arch,
                input_mode: mode,
                test_wmse,
                test_mse,
                best_epoch: fit.history.best_epoch,
                epochs_run: fit.history.epochs_run,
            };
            on_fit(&row, &fit);
            rows.push(row);
        }
    }
    Ok(AblationReport { rows })
}


/// Finite-difference gradient check shared by the unit and acceptance tests.
pub mod gradcheck {
    use super::*;
    use rand::Rng;

    #[derive(Debug, Clone)]
    pub struct GradCheckReport {
        pub checked: usize,
        pub skipped_kinks: usize,
        pub max_rel_error: f64,
    }

    /// Central differences with step 1e-5 on `count` random parameters of a
    /// 6-32-32-15 network. Parameters whose perturbation flips a ReLU gate
    /// are redrawn, since the loss is not differentiable there.
    pub fn run(seed: u64, hidden: Activation, count: usize) -> GradCheckReport {
        const STEP: f64 = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = MlpModel::init(&[6, 32, 32, 15], hidden, Activation::Identity, &mut rng).expect("valid sizes");
        for l in model.layers_mut() {
            l.bias.mapv_inplace(|_| rng.random_range(-0.3..0.3));
        }
        let x = Array2::from_shape_fn((16, 6), |_| rng.random_range(-1.5..1.5));
        let y = Array2::from_shape_fn((16, 15), |_| rng.random_range(-2.0..2.0));
        let w: Vec<f64> = (0..15).map(|_| rng.random_range(1.0..3.0)).collect();
        let (_, grads) = backward(&model, x.view(), y.view(), &w).expect("shapes agree");
        let analytic = grads.flat();
        let base = model.flat_params();

        let gates = |m: &MlpModel| -> Vec<bool> {
            let cache = m.forward_cached(x.view()).expect("shapes agree");
            cache.activations[1..cache.activations.len() - 1]
                .iter()
                .flat_map(|a| a.iter().map(|v| *v > 0.0).collect::<Vec<_>>())
                .collect()
        };
        let loss_at = |params: &[f64], probe: &mut MlpModel| -> (f64, Vec<bool>) {
            probe.read_flat(params).expect("length");
            let pred = probe.forward_batch(x.view()).expect("shapes agree");
            (batch_weighted_mse(y.view(), pred.view(), &w), gates(probe))
        };

        let mut probe = model.clone();
        let (mut checked, mut skipped, mut worst) = (0, 0, 0.0f64);
        let mut params = base.clone();
        while checked < count {
            let i = rng.random_range(0..base.len());
            params[i] = base[i] + STEP;
            let (plus, gates_plus) = loss_at(&params, &mut probe);
            params[i] = base[i] - STEP;
            let (minus, gates_minus) = loss_at(&params, &mut probe);
            params[i] = base[i];
            if hidden == Activation::Relu && gates_plus != gates_minus {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * STEP);
            let scale = numeric.abs().max(analytic[i].abs());
            let rel = if scale < 1e-10 { 0.0 } else { (numeric - analytic[i]).abs() / scale };
            worst = worst.max(rel);
            checked += 1;
        }
        model.read_flat(&base).expect("length");
        GradCheckReport {
            checked,
            skipped_kinks: skipped,
            max_rel_error: worst,
        }
    }
}
