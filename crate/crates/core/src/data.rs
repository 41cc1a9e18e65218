//! Survival datasets: CSV ingestion, stratified splitting, a synthetic cohort
//! generator with treatment selection bias, and MAR missingness injection.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::sigmoid;
use crate::rng::{seeded, standard_normal, SurvRng};
use crate::schema::{ColumnKind, Covariate, Schema, SchemaError, DEFAULT_TREATMENTS};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("column {0:?} missing from CSV header")]
    MissingColumn(String),
    #[error("row {row}, column {column:?}: {reason} (value {value:?})")]
    BadCell {
        row: usize,
        column: String,
        value: String,
        reason: &'static str,
    },
    #[error("dataset too small to split: {0}")]
    TooSmall(String),
    #[error("censoring calibration failed: target {target}, reached {reached}")]
    Calibration { target: f64, reached: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("row count mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A column-typed survival table. Missing covariate cells hold `NaN` and are
/// marked `false` in `observed`; treatments, times and events are always
/// observed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: Schema,
    pub covariates: Vec<Vec<f64>>,
    pub observed: Vec<Vec<bool>>,
    pub treatments: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub events: Vec<f64>,
}

impl Dataset {
    pub fn n_rows(&self) -> usize {
        self.times.len()
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e == 1.0).count()
    }

    pub fn is_complete(&self) -> bool {
        self.observed.iter().all(|r| r.iter().all(|&o| o))
    }

    pub fn missing_fraction(&self) -> f64 {
        let cells: usize = self.observed.iter().map(Vec::len).sum();
        let missing: usize = self
            .observed
            .iter()
            .map(|r| r.iter().filter(|&&o| !o).count())
            .sum();
        if cells == 0 {
            0.0
        } else {
            missing as f64 / cells as f64
        }
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            covariates: rows.iter().map(|&i| self.covariates[i].clone()).collect(),
            observed: rows.iter().map(|&i| self.observed[i].clone()).collect(),
            treatments: rows.iter().map(|&i| self.treatments[i].clone()).collect(),
            times: rows.iter().map(|&i| self.times[i]).collect(),
            events: rows.iter().map(|&i| self.events[i]).collect(),
        }
    }

    /// Checks every row against the schema and the dataset invariants.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_rows();
        let p = self.schema.n_covariates();
        let q = self.schema.n_treatments();
        if self.covariates.len() != n
            || self.observed.len() != n
            || self.treatments.len() != n
            || self.events.len() != n
        {
            return Err(DataError::Shape("column lengths differ".into()));
        }
        for i in 0..n {
            if self.covariates[i].len() != p || self.observed[i].len() != p || self.treatments[i].len() != q {
                return Err(DataError::Shape(format!("row {} has the wrong width", i + 1)));
            }
            let cell = |column: &str, value: f64, reason| DataError::BadCell {
                row: i + 1,
                column: column.to_string(),
                value: value.to_string(),
                reason,
            };
            for (j, cov) in self.schema.covariates.iter().enumerate() {
                let v = self.covariates[i][j];
                if !self.observed[i][j] {
                    continue;
                }
                if !v.is_finite() {
                    return Err(cell(&cov.name, v, "non-finite value"));
                }
                if cov.kind == ColumnKind::Binary && v != 0.0 && v != 1.0 {
                    return Err(cell(&cov.name, v, "binary column must be 0 or 1"));
                }
            }
            for (k, name) in self.schema.treatments.iter().enumerate() {
                let v = self.treatments[i][k];
                if v != 0.0 && v != 1.0 {
                    return Err(cell(name, v, "treatment must be 0 or 1"));
                }
            }
            if !(self.times[i] > 0.0 && self.times[i].is_finite()) {
                return Err(cell(&self.schema.time, self.times[i], "time must be positive"));
            }
            if self.events[i] != 0.0 && self.events[i] != 1.0 {
                return Err(cell(&self.schema.event, self.events[i], "event must be 0 or 1"));
            }
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(self.schema.column_names())?;
        for i in 0..self.n_rows() {
            let mut rec: Vec<String> = self.covariates[i]
                .iter()
                .zip(&self.observed[i])
                .map(|(v, &o)| if o { v.to_string() } else { String::new() })
                .collect();
            rec.extend(self.treatments[i].iter().map(f64::to_string));
            rec.push(self.times[i].to_string());
            rec.push(self.events[i].to_string());
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| DataError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }

    pub fn from_csv_str(text: &str, schema: &Schema) -> Result<Dataset> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
        let index_of = |name: &str| {
            header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn(name.to_string()))
        };
        let cov_idx: Vec<usize> = schema
            .covariates
            .iter()
            .map(|c| index_of(&c.name))
            .collect::<Result<_>>()?;
        let treat_idx: Vec<usize> = schema
            .treatments
            .iter()
            .map(|t| index_of(t))
            .collect::<Result<_>>()?;
        let time_idx = index_of(&schema.time)?;
        let event_idx = index_of(&schema.event)?;

        let mut ds = Dataset {
            schema: schema.clone(),
            covariates: vec![],
            observed: vec![],
            treatments: vec![],
            times: vec![],
            events: vec![],
        };
        for (r, record) in reader.records().enumerate() {
            let record = record?;
            let row = r + 1;
            let parse = |col: usize, name: &str| -> Result<f64> {
                let raw = record.get(col).unwrap_or("").trim();
                raw.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| DataError::BadCell {
                        row,
                        column: name.to_string(),
                        value: raw.to_string(),
                        reason: "not a finite number",
                    })
            };
            let mut covs = Vec::with_capacity(cov_idx.len());
            let mut obs = Vec::with_capacity(cov_idx.len());
            for (c, &col) in schema.covariates.iter().zip(&cov_idx) {
                if record.get(col).unwrap_or("").trim().is_empty() {
                    covs.push(f64::NAN);
                    obs.push(false);
                } else {
                    covs.push(parse(col, &c.name)?);
                    obs.push(true);
                }
            }
            let treats = schema
                .treatments
                .iter()
                .zip(&treat_idx)
                .map(|(name, &col)| parse(col, name))
                .collect::<Result<Vec<_>>>()?;
            ds.covariates.push(covs);
            ds.observed.push(obs);
            ds.treatments.push(treats);
            ds.times.push(parse(time_idx, &schema.time)?);
            ds.events.push(parse(event_idx, &schema.event)?);
        }
        ds.validate()?;
        Ok(ds)
    }

    pub fn load_csv(path: &Path, schema_path: &Path) -> Result<Dataset> {
        let schema = Schema::load(schema_path)?;
        Self::from_csv_str(&std::fs::read_to_string(path)?, &schema)
    }
}

/// Row-disjoint stratified split into (train, validation).
///
/// Events and censored rows are shuffled separately so both parts keep the
/// overall event rate. Returned index lists are sorted.
pub fn split_indices(events: &[f64], val_fraction: f64, rng: &mut SurvRng) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(DataError::Config(format!("val_fraction {val_fraction} not in (0, 1)")));
    }
    let n = events.len();
    let mut ev: Vec<usize> = (0..n).filter(|&i| events[i] == 1.0).collect();
    let mut cens: Vec<usize> = (0..n).filter(|&i| events[i] != 1.0).collect();
    ev.shuffle(rng);
    cens.shuffle(rng);

    let n_val = (val_fraction * n as f64).round() as usize;
    let val_ev = ((val_fraction * ev.len() as f64).round() as usize).min(n_val);
    let val_cens = (n_val - val_ev).min(cens.len());

    let mut val: Vec<usize> = ev[..val_ev].iter().chain(&cens[..val_cens]).copied().collect();
    let mut train: Vec<usize> = ev[val_ev..].iter().chain(&cens[val_cens..]).copied().collect();
    val.sort_unstable();
    train.sort_unstable();

    let events_in = |idx: &[usize]| idx.iter().filter(|&&i| events[i] == 1.0).count();
    if train.len() < 2 || val.len() < 2 || events_in(&train) == 0 || events_in(&val) == 0 {
        return Err(DataError::TooSmall(format!(
            "{n} rows with {} events cannot give two parts of >= 2 rows and >= 1 event",
            ev.len()
        )));
    }
    Ok((train, val))
}

pub fn split(dataset: &Dataset, val_fraction: f64, rng: &mut SurvRng) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(&dataset.events, val_fraction, rng)?;
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub latent_dim: usize,
    pub n_continuous: usize,
    pub n_binary: usize,
    /// Strength of covariate-driven treatment assignment; 0 = randomized.
    pub selection_bias: f64,
    /// Log-scale survival gain from treatment; 0 = no effect.
    pub treatment_effect: f64,
    pub censoring_rate: f64,
    pub nonlinear: bool,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n: 600,
            latent_dim: 4,
            n_continuous: 8,
            n_binary: 4,
            selection_bias: 1.0,
            treatment_effect: 0.5,
            censoring_rate: 0.3,
            nonlinear: true,
            noise_sd: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(DataError::Config(format!("n = {} is below 10", self.n)));
        }
        if !(0.0..=0.9).contains(&self.censoring_rate) {
            return Err(DataError::Config(format!(
                "censoring rate {} not in [0, 0.9]",
                self.censoring_rate
            )));
        }
        if self.latent_dim == 0 || self.n_continuous + self.n_binary == 0 {
            return Err(DataError::Config("need latent dims and covariates".into()));
        }
        if self.noise_sd < 0.0 {
            return Err(DataError::Config("noise_sd must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Schema {
        let mut covariates: Vec<Covariate> = (0..self.n_continuous)
            .map(|j| Covariate {
                name: format!("x{:02}", j + 1),
                kind: ColumnKind::Continuous,
            })
            .collect();
        covariates.extend((0..self.n_binary).map(|j| Covariate {
            name: format!("b{:02}", j + 1),
            kind: ColumnKind::Binary,
        }));
        Schema::new(
            covariates,
            DEFAULT_TREATMENTS.iter().map(|s| s.to_string()).collect(),
            "time",
            "event",
        )
        .expect("generated schema is valid")
    }
}

/// Weibull shape of the true event-time distribution.
const TRUE_SHAPE: f64 = 1.5;
/// Baseline log-scale of event times, in time units.
const BASE_LOG_SCALE: f64 = 2.0;

/// The generating mechanism and latent draws behind a synthetic dataset.
/// Kept apart from [`Dataset`] so nothing that trains on the data can see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: SynthConfig,
    pub z: Vec<Vec<f64>>,
    pub event_times: Vec<f64>,
    pub censor_times: Vec<f64>,
    pub censor_rate_parameter: f64,
}

impl GroundTruth {
    pub fn shape(&self) -> f64 {
        TRUE_SHAPE
    }

    /// True Weibull scale of row `i` under treatment vector `t`.
    pub fn scale(&self, i: usize, t: &[f64]) -> f64 {
        true_log_scale(&self.config, &self.z[i], t).exp()
    }

    pub fn survival(&self, i: usize, t: &[f64], y: f64) -> f64 {
        if y <= 0.0 {
            return 1.0;
        }
        (-(y / self.scale(i, t)).powf(TRUE_SHAPE)).exp()
    }

    pub fn mean_survival(&self, i: usize, t: &[f64]) -> f64 {
        self.scale(i, t) * crate::distributions::gamma(1.0 + 1.0 / TRUE_SHAPE)
    }

    pub fn contrast(&self, i: usize, t0: &[f64], t1: &[f64], horizon: f64) -> f64 {
        self.survival(i, t1, horizon) - self.survival(i, t0, horizon)
    }

    pub fn curve(&self, i: usize, t: &[f64], grid: &[f64]) -> Vec<f64> {
        grid.iter().map(|&y| self.survival(i, t, y)).collect()
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| DataError::Config(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn true_log_scale(cfg: &SynthConfig, z: &[f64], t: &[f64]) -> f64 {
    let d = z.len();
    let zz = |i: usize| z[i % d];
    let latent = if cfg.nonlinear {
        -0.8 * zz(0) * zz(1) - 0.5 * (zz(2) * zz(2) - 1.0) + 0.5 * (1.5 * zz(3)).tanh()
    } else {
        -0.5 * zz(0) - 0.4 * zz(1) + 0.3 * zz(2) + 0.4 * zz(3)
    };
    let benefit = t.first().copied().unwrap_or(0.0) * cfg.treatment_effect * (1.0 + 0.5 * zz(0).tanh())
        + t.iter().skip(1).sum::<f64>() * 0.5 * cfg.treatment_effect;
    BASE_LOG_SCALE + latent + benefit
}

fn continuous_mean(cfg: &SynthConfig, j: usize, z: &[f64]) -> f64 {
    let d = z.len();
    let loading = if j < d { 1.0 } else { -0.8 };
    let primary = loading * z[j % d];
    let secondary = if cfg.nonlinear {
        0.6 * (z[(j + 1) % d] * z[(j + 2) % d]).tanh()
    } else {
        0.3 * z[(j + 1) % d]
    };
    primary + secondary
}

fn binary_logit(j: usize, z: &[f64]) -> f64 {
    let d = z.len();
    1.5 * z[(j + 1) % d] - 0.3
}

fn selection_logit(cfg: &SynthConfig, treatment: usize, x: &[f64]) -> f64 {
    let p = x.len();
    let signal: f64 = x
        .iter()
        .enumerate()
        .map(|(j, &v)| ((j + 2 * treatment) as f64 * 0.9).cos() * v)
        .sum::<f64>()
        / (p as f64).sqrt();
    -0.3 + cfg.selection_bias * signal
}

/// Draws a synthetic cohort following z → x, x → t, (z, t) → y.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let schema = cfg.schema();
    let mut rng = seeded(cfg.seed);
    let d = cfg.latent_dim;
    let p = cfg.n_continuous + cfg.n_binary;
    let n_treat = schema.n_treatments();

    let mut z_all = Vec::with_capacity(cfg.n);
    let mut covariates = Vec::with_capacity(cfg.n);
    let mut treatments = Vec::with_capacity(cfg.n);
    let mut event_times = Vec::with_capacity(cfg.n);
    let mut unit_exp = Vec::with_capacity(cfg.n);

    for _ in 0..cfg.n {
        let z: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
        let mut x = Vec::with_capacity(p);
        for j in 0..cfg.n_continuous {
            x.push(continuous_mean(cfg, j, &z) + cfg.noise_sd * standard_normal(&mut rng));
        }
        for j in 0..cfg.n_binary {
            let u: f64 = rng.random();
            x.push(if u < sigmoid(binary_logit(j, &z)) { 1.0 } else { 0.0 });
        }
        let t: Vec<f64> = (0..n_treat)
            .map(|k| {
                let u: f64 = rng.random();
                if u < sigmoid(selection_logit(cfg, k, &x)) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        let scale = true_log_scale(cfg, &z, &t).exp();
        let u: f64 = rng.random();
        event_times.push(scale * (-(1.0 - u).ln()).powf(1.0 / TRUE_SHAPE));
        let e: f64 = rng.random();
        unit_exp.push(-(1.0 - e).ln());
        z_all.push(z);
        covariates.push(x);
        treatments.push(t);
    }

    let rate = calibrate_censoring(&event_times, &unit_exp, cfg.censoring_rate)?;
    let censor_times: Vec<f64> = unit_exp
        .iter()
        .map(|&e| if rate > 0.0 { e / rate } else { f64::INFINITY })
        .collect();
    let (times, events): (Vec<f64>, Vec<f64>) = event_times
        .iter()
        .zip(&censor_times)
        .map(|(&t, &c)| if c < t { (c, 0.0) } else { (t, 1.0) })
        .unzip();

    let ds = Dataset {
        schema,
        observed: vec![vec![true; p]; cfg.n],
        covariates,
        treatments,
        times,
        events,
    };
    ds.validate()?;
    let truth = GroundTruth {
        config: cfg.clone(),
        z: z_all,
        event_times,
        censor_times,
        censor_rate_parameter: rate,
    };
    Ok((ds, truth))
}

/// Finds the exponential censoring rate whose realized censored fraction on
/// these draws matches `target`, by bisection on the log rate.
fn calibrate_censoring(event_times: &[f64], unit_exp: &[f64], target: f64) -> Result<f64> {
    if target == 0.0 {
        return Ok(0.0);
    }
    let frac = |log_rate: f64| {
        let rate = log_rate.exp();
        event_times
            .iter()
            .zip(unit_exp)
            .filter(|(&t, &e)| e / rate < t)
            .count() as f64
            / event_times.len() as f64
    };
    let (mut lo, mut hi) = (-20.0f64, 20.0f64);
    for _ in 0..50 {
        let mid = 0.5 * (lo + hi);
        if frac(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let log_rate = 0.5 * (lo + hi);
    let reached = frac(log_rate);
    if (reached - target).abs() > 0.05 {
        return Err(DataError::Calibration { target, reached });
    }
    Ok(log_rate.exp())
}

/// Slope of the missingness logit on the standardized driver covariate.
pub const MAR_SLOPE: f64 = 1.0;

/// Index of the always-observed covariate that drives missingness: the first
/// continuous covariate, else the first covariate.
pub fn mar_driver(schema: &Schema) -> usize {
    schema
        .covariates
        .iter()
        .position(|c| c.kind == ColumnKind::Continuous)
        .unwrap_or(0)
}

/// Masks covariate cells missing-at-random. Each cell outside the driver
/// column goes missing with probability `sigmoid(a + MAR_SLOPE * d_i)` where
/// `d_i` is the standardized driver value of its row and `a` is solved so the
/// overall missing fraction over all covariate cells equals `rate`.
pub fn inject_missing(dataset: &Dataset, rate: f64, rng: &mut SurvRng) -> Result<Dataset> {
    if !(0.0..=0.5).contains(&rate) {
        return Err(DataError::Config(format!("missing rate {rate} not in [0, 0.5]")));
    }
    let mut out = dataset.clone();
    if rate == 0.0 {
        return Ok(out);
    }
    let p = dataset.schema.n_covariates();
    if p < 2 {
        return Err(DataError::Config("MAR injection needs at least two covariates".into()));
    }
    let driver = mar_driver(&dataset.schema);
    let n = dataset.n_rows();
    let dv: Vec<f64> = dataset.covariates.iter().map(|r| r[driver]).collect();
    let mean = dv.iter().sum::<f64>() / n as f64;
    let sd = (dv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let dstd: Vec<f64> = dv.iter().map(|v| (v - mean) / sd).collect();

    let eligible_rate = rate * p as f64 / (p - 1) as f64;
    let mean_prob = |a: f64| dstd.iter().map(|&d| sigmoid(a + MAR_SLOPE * d)).sum::<f64>() / n as f64;
    let (mut lo, mut hi) = (-30.0f64, 30.0f64);
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mean_prob(mid) < eligible_rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let intercept = 0.5 * (lo + hi);

    for i in 0..n {
        let prob = sigmoid(intercept + MAR_SLOPE * dstd[i]);
        for j in 0..p {
            let u: f64 = rng.random();
            if j != driver && u < prob {
                out.observed[i][j] = false;
                out.covariates[i][j] = f64::NAN;
            }
        }
    }
    Ok(out)
}
