//! Quasi-static pressure sweeps, direction labelling and dataset files.
//!
//! File layout for a stem `runs/data`:
//! `runs/data.train.csv`, `runs/data.val.csv`, `runs/data.test.csv` and the
//! sidecar `runs/data.meta.json`. Each CSV row is one sample with header
//! `p1,p2,p3,d1,d2,d3,x1,y1,z1,...,xn,yn,zn` (kPa, signs, mm).

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::plant::{Calibration, Plant, PlantError, PlantParams, Pressures};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid sweep plan: {0}")]
    InvalidPlan(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

/// Direction signs per chamber, each exactly `+1.0` or `-1.0`.
pub type Directions = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub p: Pressures,
    pub d: Directions,
    /// Flattened key points, `3 * n_keys` values in mm.
    pub y: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepOrdering {
    /// Nested boustrophedon; chamber 1 is the slow axis and only ever rises.
    Snake,
    /// Generalised Hilbert path over chambers 1 and 2 with serpentine rows
    /// over chamber 3, so every chamber is swept in both directions.
    HilbertSnake,
    /// Off-grid monotone runs toward random targets.
    RandomizedMonotoneRuns,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub steps_per_axis: usize,
    pub ordering: SweepOrdering,
    /// Number of targets for randomized runs; grid orderings ignore it.
    pub count: usize,
    /// Longest run, in increments, for randomized runs.
    pub max_run: usize,
    pub seed: u64,
}

impl SweepPlan {
    pub fn grid(steps_per_axis: usize, ordering: SweepOrdering) -> Self {
        Self {
            steps_per_axis,
            ordering,
            count: steps_per_axis.pow(3),
            max_run: 4,
            seed: 0,
        }
    }

    pub fn randomized(count: usize, seed: u64) -> Self {
        Self {
            steps_per_axis: 2,
            ordering: SweepOrdering::RandomizedMonotoneRuns,
            count,
            max_run: 4,
            seed,
        }
    }
}

/// Pressure targets in visiting order.
pub fn generate_sweep(plan: &SweepPlan, min: f64, max: f64) -> Result<Vec<Pressures>, DatasetError> {
    if !(min.is_finite() && max.is_finite() && min < max) {
        return Err(DatasetError::InvalidPlan(format!("bad bounds [{min}, {max}]")));
    }
    let n = plan.steps_per_axis;
    let level = |i: usize| {
        if i + 1 == n {
            max
        } else {
            min + (max - min) * i as f64 / (n - 1) as f64
        }
    };
    match plan.ordering {
        SweepOrdering::Snake | SweepOrdering::HilbertSnake => {
            if n < 2 {
                return Err(DatasetError::InvalidPlan("steps_per_axis must be at least 2".into()));
            }
            let outer = match plan.ordering {
                SweepOrdering::Snake => boustrophedon_2d(n),
                _ => gilbert_2d(n),
            };
            let mut out = Vec::with_capacity(n * n * n);
            let mut forward = true;
            for (i, j) in outer {
                for kk in 0..n {
                    let k = if forward { kk } else { n - 1 - kk };
                    out.push([level(i), level(j), level(k)]);
                }
                forward = !forward;
            }
            Ok(out)
        }
        SweepOrdering::RandomizedMonotoneRuns => {
            if plan.max_run == 0 {
                return Err(DatasetError::InvalidPlan("max_run must be positive".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
            let mut out = Vec::with_capacity(plan.count);
            let mut current = [min; 3];
            while out.len() < plan.count {
                let target: Pressures = std::array::from_fn(|_| rng.random_range(min..=max));
                let increments = rng.random_range(1..=plan.max_run);
                for k in 1..=increments {
                    let frac = k as f64 / increments as f64;
                    let p: Pressures = std::array::from_fn(|c| current[c] + (target[c] - current[c]) * frac);
                    out.push(p);
                    if out.len() == plan.count {
                        break;
                    }
                }
                current = target;
            }
            Ok(out)
        }
    }
}

fn boustrophedon_2d(n: usize) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).map(move |jj| (i, if i % 2 == 0 { jj } else { n - 1 - jj })))
        .collect()
}

/// Generalised Hilbert curve over an `n x n` grid (unit steps for any `n`).
fn gilbert_2d(n: usize) -> Vec<(usize, usize)> {
    fn sgn(v: i64) -> i64 {
        v.signum()
    }
    #[allow(clippy::too_many_arguments)]
    fn walk(x: i64, y: i64, ax: i64, ay: i64, bx: i64, by: i64, out: &mut Vec<(usize, usize)>) {
        let w = (ax + ay).abs();
        let h = (bx + by).abs();
        let (dax, day) = (sgn(ax), sgn(ay));
        let (dbx, dby) = (sgn(bx), sgn(by));
        if h == 1 {
            for i in 0..w {
                out.push(((x + i * dax) as usize, (y + i * day) as usize));
            }
            return;
        }
        if w == 1 {
            for i in 0..h {
                out.push(((x + i * dbx) as usize, (y + i * dby) as usize));
            }
            return;
        }
        let (mut ax2, mut ay2) = (ax.div_euclid(2), ay.div_euclid(2));
        let (mut bx2, mut by2) = (bx.div_euclid(2), by.div_euclid(2));
        let w2 = (ax2 + ay2).abs();
        let h2 = (bx2 + by2).abs();
        if 2 * w > 3 * h {
            if w2 % 2 == 1 && w > 2 {
                ax2 += dax;
                ay2 += day;
            }
            walk(x, y, ax2, ay2, bx, by, out);
            walk(x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by, out);
        } else {
            if h2 % 2 == 1 && h > 2 {
                bx2 += dbx;
                by2 += dby;
            }
            walk(x, y, bx2, by2, ax2, ay2, out);
            walk(x + bx2, y + by2, ax, ay, bx - bx2, by - by2, out);
            walk(
                x + (ax - dax) + (bx2 - dbx),
                y + (ay - day) + (by2 - dby),
                -bx2,
                -by2,
                -(ax - ax2),
                -(ay - ay2),
                out,
            );
        }
    }
    let mut out = Vec::with_capacity(n * n);
    walk(0, 0, n as i64, 0, 0, n as i64, &mut out);
    out
}

/// `sign(p_t - p_{t-1})` per chamber; an unchanged chamber keeps its
/// previous sign. `start` is the pressure before the first target.
pub fn direction_signs(sequence: &[Pressures], start: Pressures) -> Vec<Directions> {
    let mut prev = start;
    let mut signs = [1.0; 3];
    sequence
        .iter()
        .map(|p| {
            for c in 0..3 {
                if p[c] > prev[c] {
                    signs[c] = 1.0;
                } else if p[c] < prev[c] {
                    signs[c] = -1.0;
                }
            }
            prev = *p;
            signs
        })
        .collect()
}

/// Drives the plant through `sweep`, averaging `reads` readings per target.
/// The plant's current settled pressure is taken to be its hysteresis state.
pub fn collect(plant: &mut Plant, sweep: &[Pressures], reads: usize) -> Result<Vec<Sample>, DatasetError> {
    let start = plant.state().0;
    let signs = direction_signs(sweep, start);
    sweep
        .iter()
        .zip(signs)
        .map(|(p, d)| {
            let keys = plant.read_averaged(*p, reads.max(1))?;
            Ok(Sample {
                p: *p,
                d,
                y: keys.flatten(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub steps_per_axis: usize,
    pub ordering: SweepOrdering,
    pub val_count: usize,
    pub test_count: usize,
    /// Readings averaged per settled target.
    pub reads: usize,
    pub max_run: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            // 24^3 = 13824 training samples
            steps_per_axis: 24,
            ordering: SweepOrdering::HilbertSnake,
            val_count: 1000,
            test_count: 1000,
            reads: 20,
            max_run: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub plant: PlantParams,
    pub calibration: Option<Calibration>,
    pub config: DatasetConfig,
    pub train_plan: SweepPlan,
    pub val_plan: SweepPlan,
    pub test_plan: SweepPlan,
    pub counts: [usize; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    pub meta: DatasetMeta,
}

fn derived_seed(seed: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Training split from the full grid sweep; validation and test splits from
/// independent randomized-run sweeps on freshly reset plants.
pub fn generate_splits(
    params: &PlantParams,
    calibration: Option<Calibration>,
    cfg: &DatasetConfig,
) -> Result<DatasetSplits, DatasetError> {
    let train_plan = SweepPlan {
        seed: cfg.seed,
        ..SweepPlan::grid(cfg.steps_per_axis, cfg.ordering)
    };
    let random_plan = |count, stream| SweepPlan {
        max_run: cfg.max_run,
        ..SweepPlan::randomized(count, derived_seed(cfg.seed, stream))
    };
    let val_plan = random_plan(cfg.val_count, 1);
    let test_plan = random_plan(cfg.test_count, 2);

    let run = |plan: &SweepPlan, stream: u64| -> Result<Vec<Sample>, DatasetError> {
        let sweep = generate_sweep(plan, params.pressure_min, params.pressure_max)?;
        let mut plant = Plant::new(*params, derived_seed(cfg.seed, 100 + stream))?;
        collect(&mut plant, &sweep, cfg.reads)
    };
    let train = run(&train_plan, 0)?;
    let val = run(&val_plan, 1)?;
    let test = run(&test_plan, 2)?;
    Ok(DatasetSplits {
        meta: DatasetMeta {
            plant: *params,
            calibration,
            config: cfg.clone(),
            train_plan,
            val_plan,
            test_plan,
            counts: [train.len(), val.len(), test.len()],
        },
        train,
        val,
        test,
    })
}

pub fn split_path(stem: &Path, split: &str) -> PathBuf {
    let mut name = stem.as_os_str().to_owned();
    name.push(format!(".{split}"));
    PathBuf::from(name)
}

pub fn csv_header(n_keys: usize) -> Vec<String> {
    let mut header: Vec<String> = ["p1", "p2", "p3", "d1", "d2", "d3"].iter().map(|s| s.to_string()).collect();
    for i in 1..=n_keys {
        header.extend([format!("x{i}"), format!("y{i}"), format!("z{i}")]);
    }
    header
}

pub fn write_samples(path: &Path, samples: &[Sample], n_keys: usize) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })?;
    let csv_err = |source| DatasetError::Csv {
        path: path.to_owned(),
        source,
    };
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    writer.write_record(csv_header(n_keys)).map_err(csv_err)?;
    for s in samples {
        if s.y.len() != 3 * n_keys {
            return Err(DatasetError::Format {
                path: path.to_owned(),
                message: format!("sample has {} outputs, expected {}", s.y.len(), 3 * n_keys),
            });
        }
        let row = s
            .p
            .iter()
            .map(|v| v.to_string())
            .chain(s.d.iter().map(|v| format!("{}", *v as i8)))
            .chain(s.y.iter().map(|v| v.to_string()));
        writer.write_record(row).map_err(csv_err)?;
    }
    writer.flush().map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })
}

pub fn read_samples(path: &Path) -> Result<(Vec<Sample>, usize), DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io {
        path: path.to_owned(),
        source,
    })?;
    let format = |message: String| DatasetError::Format {
        path: path.to_owned(),
        message,
    };
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let header = reader
        .headers()
        .map_err(|source| DatasetError::Csv {
            path: path.to_owned(),
            source,
        })?
        .clone();
    if header.len() < 12 || (header.len() - 6) % 3 != 0 {
        return Err(format(format!("unexpected column count {}", header.len())));
    }
    let n_keys = (header.len() - 6) / 3;
    let expected = csv_header(n_keys);
    if header.iter().zip(&expected).any(|(a, b)| a != b) {
        return Err(format("header does not match p1,p2,p3,d1,d2,d3,x1,y1,z1,...".into()));
    }
    let mut samples = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|source| DatasetError::Csv {
            path: path.to_owned(),
            source,
        })?;
        let values: Vec<f64> = record
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| format(format!("row {}: {e}", row_idx + 1)))?;
        let d = [values[3], values[4], values[5]];
        if d.iter().any(|&s| s != 1.0 && s != -1.0) {
            return Err(format(format!("row {}: direction signs must be 1 or -1", row_idx + 1)));
        }
        samples.push(Sample {
            p: [values[0], values[1], values[2]],
            d,
            y: values[6..].to_vec(),
        });
    }
    Ok((samples, n_keys))
}

impl DatasetSplits {
    pub fn n_keys(&self) -> usize {
        self.meta.plant.n_keys
    }

    /// Writes the three CSV splits plus the metadata sidecar.
    pub fn save(&self, stem: &Path) -> Result<Vec<PathBuf>, DatasetError> {
        if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
                path: dir.to_owned(),
                source,
            })?;
        }
        let mut written = Vec::new();
        for (name, samples) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            let path = split_path(stem, &format!("{name}.csv"));
            write_samples(&path, samples, self.n_keys())?;
            written.push(path);
        }
        let meta_path = split_path(stem, "meta.json");
        let json = serde_json::to_string_pretty(&self.meta).expect("metadata serialises");
        std::fs::write(&meta_path, json + "\n").map_err(|source| DatasetError::Io {
            path: meta_path.clone(),
            source,
        })?;
        written.push(meta_path);
        Ok(written)
    }

    pub fn load(stem: &Path) -> Result<Self, DatasetError> {
        let meta_path = split_path(stem, "meta.json");
        let text = std::fs::read_to_string(&meta_path).map_err(|source| DatasetError::Io {
            path: meta_path.clone(),
            source,
        })?;
        let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| DatasetError::Format {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        let mut splits = Vec::new();
        for name in ["train", "val", "test"] {
            let path = split_path(stem, &format!("{name}.csv"));
            let (samples, n_keys) = read_samples(&path)?;
            if n_keys != meta.plant.n_keys {
                return Err(DatasetError::Format {
                    path,
                    message: format!("{n_keys} key points, metadata says {}", meta.plant.n_keys),
                });
            }
            splits.push(samples);
        }
        let test = splits.pop().unwrap_or_default();
        let val = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        Ok(Self { train, val, test, meta })
    }
}

/// Counts of the eight direction vectors, in the order of the bit pattern
/// `(d1 < 0, d2 < 0, d3 < 0)`.
pub fn direction_histogram(samples: &[Sample]) -> [usize; 8] {
    let mut counts = [0; 8];
    for s in samples {
        let idx = s
            .d
            .iter()
            .enumerate()
            .fold(0, |acc, (i, &v)| acc | (usize::from(v < 0.0) << i));
        counts[idx] += 1;
    }
    counts
}

/// Pearson chi-square statistic of `observed` against the proportions of
/// `reference`.
pub fn chi_square(observed: &[usize; 8], reference: &[usize; 8]) -> f64 {
    let n_obs: usize = observed.iter().sum();
    let n_ref: usize = reference.iter().sum();
    observed
        .iter()
        .zip(reference)
        .filter(|(_, &r)| r > 0)
        .map(|(&o, &r)| {
            let expected = n_obs as f64 * r as f64 / n_ref as f64;
            (o as f64 - expected).powi(2) / expected
        })
        .sum()
}

/// Fraction of `(chamber, pressure level)` pairs recorded with both
/// direction labels.
pub fn bidirectional_level_fraction(samples: &[Sample]) -> f64 {
    use std::collections::HashMap;
    let mut seen: HashMap<(usize, u64), (bool, bool)> = HashMap::new();
    for s in samples {
        for c in 0..3 {
            let entry = seen.entry((c, s.p[c].to_bits())).or_default();
            if s.d[c] > 0.0 {
                entry.0 = true;
            } else {
                entry.1 = true;
            }
        }
    }
    if seen.is_empty() {
        return 0.0;
    }
    seen.values().filter(|(up, down)| *up && *down).count() as f64 / seen.len() as f64
}
