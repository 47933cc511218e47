//! Data-collection flights, residual-force labels and the on-disk dataset.
//!
//! Labels come from the translational dynamics `y = m q̈ − m g − R f_u`, with
//! `q̈` estimated from logged positions by a seven-point finite-difference
//! stencil (central in the interior, one-sided at the ends).

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{
    force_to_attitude, learning_input, Baseline, ControlContext, Controller, ControllerGains, Measurement, INPUT_DIM,
};
use crate::scalar::Real;
use crate::sim::{gaussian_vector, residual_force, ResidualModelParams, SimError, SimState, Simulator, VehicleParams};
use crate::traj::{random_spline_trajectory, Aabb, Figure8, Trajectory};
use crate::wind::WindCondition;

pub const DATASET_SCHEMA_VERSION: u32 = 1;

/// Points in every differentiation stencil.
pub const STENCIL_WIDTH: usize = 7;

const META_FILE: &str = "meta.json";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("series of length {0} is shorter than the {STENCIL_WIDTH}-point stencil")]
    TooShort(usize),
    #[error("flight for condition {condition} diverged: {source}")]
    SimDiverged { condition: usize, source: SimError },
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
    #[error("dataset schema version {found} does not match {expected}")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("dataset i/o failure: {0}")]
    IoFailure(String),
    #[error("invalid collection config: {0}")]
    Config(String),
}

impl From<std::io::Error> for DataError {
    fn from(e: std::io::Error) -> Self {
        DataError::IoFailure(e.to_string())
    }
}

impl From<csv::Error> for DataError {
    fn from(e: csv::Error) -> Self {
        DataError::IoFailure(e.to_string())
    }
}

/// Finite-difference weights for the `order`-th derivative at `x0` from
/// samples at `xs` (Fornberg's recursion).
pub fn fd_weights(x0: f64, xs: &[f64], order: usize) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![vec![0.0; order + 1]; n];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mn = i.min(order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=mn).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] *= c4 / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[order]).collect()
}

/// Second-derivative weights (per unit spacing) for a seven-point window
/// evaluated at window position `at`.
fn window_weights(at: usize) -> [f64; STENCIL_WIDTH] {
    let xs: Vec<f64> = (0..STENCIL_WIDTH).map(|i| i as f64).collect();
    let w = fd_weights(at as f64, &xs, 2);
    let mut out = [0.0; STENCIL_WIDTH];
    out.copy_from_slice(&w);
    out
}

/// Second derivative of a uniformly sampled series.
pub fn second_derivative<T: Real>(series: &[Vector3<T>], dt: T) -> Result<Vec<Vector3<T>>, DataError> {
    let n = series.len();
    if n < STENCIL_WIDTH {
        return Err(DataError::TooShort(n));
    }
    let half = STENCIL_WIDTH / 2;
    let tables: Vec<[f64; STENCIL_WIDTH]> = (0..STENCIL_WIDTH).map(window_weights).collect();
    let inv_h2 = T::one() / (dt * dt);
    Ok((0..n)
        .map(|i| {
            let start = i.saturating_sub(half).min(n - STENCIL_WIDTH);
            let w = &tables[i - start];
            let mut acc = Vector3::zeros();
            for (j, &wj) in w.iter().enumerate() {
                acc += series[start + j] * T::lit(wj);
            }
            acc * inv_h2
        })
        .collect())
}

/// Residual-force labels `y = m q̈ − m g − R f_u` from positions and world-frame
/// thrust forces sampled every `dt`.
pub fn residual_label<T: Real>(
    positions: &[Vector3<T>],
    thrust_forces: &[Vector3<T>],
    dt: T,
    params: &VehicleParams<T>,
) -> Result<Vec<Vector3<T>>, DataError> {
    if positions.len() != thrust_forces.len() {
        return Err(DataError::Invariant(format!(
            "{} positions but {} thrust samples",
            positions.len(),
            thrust_forces.len()
        )));
    }
    let acc = second_derivative(positions, dt)?;
    Ok(acc
        .iter()
        .zip(thrust_forces)
        .map(|(a, fu)| (a - params.gravity) * params.mass - fu)
        .collect())
}

/// Causal residual measurement over the trailing seven samples. The central
/// stencil makes the estimate refer to the window's middle sample, three
/// periods in the past.
#[derive(Debug, Clone)]
pub struct CausalLabeler<T: Real> {
    dt: T,
    params: VehicleParams<T>,
    weights: [f64; STENCIL_WIDTH],
    window: std::collections::VecDeque<(Vector3<T>, Vector3<T>, nalgebra::DVector<T>)>,
}

impl<T: Real> CausalLabeler<T> {
    pub const LAG_TICKS: usize = STENCIL_WIDTH / 2;

    pub fn new(dt: T, params: VehicleParams<T>) -> Self {
        Self {
            dt,
            params,
            weights: window_weights(STENCIL_WIDTH / 2),
            window: Default::default(),
        }
    }

    pub fn reset(&mut self) {
        self.window.clear();
    }

    /// Adds the current sample and returns the lagged measurement once the
    /// window is full. `y` carries no noise; callers add it.
    pub fn push(&mut self, state: &SimState<T>, thrust_force: Vector3<T>) -> Option<Measurement<T>> {
        self.window.push_back((state.p, thrust_force, learning_input(state)));
        if self.window.len() > STENCIL_WIDTH {
            self.window.pop_front();
        }
        if self.window.len() < STENCIL_WIDTH {
            return None;
        }
        let mut acc = Vector3::zeros();
        for (j, &w) in self.weights.iter().enumerate() {
            acc += self.window[j].0 * T::lit(w);
        }
        acc /= self.dt * self.dt;
        let (_, fu, x) = &self.window[Self::LAG_TICKS];
        Some(Measurement {
            y: (acc - self.params.gravity) * self.params.mass - fu,
            accel: acc,
            x: x.clone(),
            lag_ticks: Self::LAG_TICKS,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    /// `[v, q_wxyz, pwm]`
    pub x: [f64; INPUT_DIM],
    /// Residual-force label, N.
    pub y: [f64; 3],
    /// Noise-free residual at the sample instant, N.
    pub f_true: [f64; 3],
    /// s
    pub t: f64,
    pub k: usize,
}

impl Sample {
    pub fn validate(&self) -> Result<(), DataError> {
        if !self.x.iter().chain(&self.y).chain(&self.f_true).all(|v| v.is_finite()) || !self.t.is_finite() {
            return Err(DataError::Invariant(format!("non-finite sample at t = {}", self.t)));
        }
        let qn = self.x[3..7].iter().map(|v| v * v).sum::<f64>().sqrt();
        if (qn - 1.0).abs() > 1e-6 {
            return Err(DataError::Invariant(format!("quaternion norm {qn} at t = {}", self.t)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_version: u32,
    /// FNV-1a hash of the serialized collection config.
    pub config_hash: String,
    pub seed: u64,
    pub sample_rate_hz: f64,
    pub conditions: Vec<WindCondition<f64>>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlightDataset {
    /// One sample list per wind condition, indexed by `k`.
    pub subdatasets: Vec<Vec<Sample>>,
    pub meta: DatasetMeta,
}

impl FlightDataset {
    pub fn num_conditions(&self) -> usize {
        self.subdatasets.len()
    }

    pub fn len(&self) -> usize {
        self.subdatasets.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.meta.conditions.len() != self.subdatasets.len() {
            return Err(DataError::Invariant("condition list does not match subdatasets".into()));
        }
        for (k, d) in self.subdatasets.iter().enumerate() {
            if d.is_empty() {
                return Err(DataError::Invariant(format!("subdataset {k} is empty")));
            }
            for s in d {
                if s.k != k {
                    return Err(DataError::Invariant(format!(
                        "sample labelled {} in subdataset {k}",
                        s.k
                    )));
                }
                s.validate()?;
            }
        }
        Ok(())
    }

    /// Inputs (`11 × n`) and labels (`3 × n`) of one condition.
    pub fn matrices(&self, k: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let d = &self.subdatasets[k];
        let x = DMatrix::from_fn(INPUT_DIM, d.len(), |i, j| d[j].x[i]);
        let y = DMatrix::from_fn(3, d.len(), |i, j| d[j].y[i]);
        (x, y)
    }
}

/// Reference flown during a collection flight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FlightPlan {
    /// Fresh random rest-to-rest spline per flight.
    RandomSpline {
        bounds: Aabb<f64>,
        segment_min_s: f64,
        segment_max_s: f64,
    },
    Figure8(Figure8<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollectConfig {
    pub vehicle: VehicleParams<f64>,
    pub residual: ResidualModelParams<f64>,
    pub gains: ControllerGains<f64>,
    pub plan: FlightPlan,
    pub sample_rate_hz: f64,
    pub physics_dt: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        let vehicle = VehicleParams::default();
        let residual = ResidualModelParams::default();
        Self {
            gains: ControllerGains::for_vehicle(&vehicle, residual.noise_sigma),
            vehicle,
            residual,
            plan: FlightPlan::RandomSpline {
                bounds: Aabb {
                    min: Vector3::new(-1.5, -1.0, -0.8),
                    max: Vector3::new(1.5, 1.0, 0.8),
                },
                segment_min_s: 1.5,
                segment_max_s: 3.0,
            },
            sample_rate_hz: 50.0,
            physics_dt: 0.002,
        }
    }
}

impl CollectConfig {
    /// Physics steps per sample; the sample period must be a multiple of the
    /// physics step.
    pub fn substeps(&self) -> Result<usize, DataError> {
        let ratio = 1.0 / (self.sample_rate_hz * self.physics_dt);
        let n = ratio.round();
        if !(n >= 1.0) || (ratio - n).abs() > 1e-9 {
            return Err(DataError::Config(format!(
                "sample period is not a whole number of {} s physics steps",
                self.physics_dt
            )));
        }
        Ok(n as usize)
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        format!("{:016x}", fnv1a(&json))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Per-condition RNG stream: independent of how many conditions run.
pub(crate) fn condition_rng(seed: u64, k: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((k as u64) << 8) | purpose);
    rng
}

/// Raw log of one flight at the sample rate.
#[derive(Debug, Clone, Default)]
pub struct FlightLog {
    pub t: Vec<f64>,
    pub p: Vec<Vector3<f64>>,
    pub thrust_force: Vec<Vector3<f64>>,
    pub x: Vec<[f64; INPUT_DIM]>,
    pub f_true: Vec<Vector3<f64>>,
}

/// Flies the baseline controller along `traj` for `n_samples` periods and
/// logs the state at every sample instant.
pub fn fly_baseline(
    config: &CollectConfig,
    wind: &WindCondition<f64>,
    traj: &dyn Trajectory<f64>,
    n_samples: usize,
) -> Result<FlightLog, SimError> {
    let sim = Simulator::new(config.vehicle, config.residual)?;
    let substeps = config
        .substeps()
        .map_err(|_| SimError::InvalidStep(config.physics_dt))?;
    let dt = 1.0 / config.sample_rate_hz;
    let mut ctrl = Baseline::new(config.gains, config.vehicle);
    let mut state = SimState::hover(traj.desired(0.0).pos_d, &config.vehicle);
    let mut prev_q = state.q_att;
    let mut log = FlightLog::default();
    for tick in 0..n_samples {
        let t = tick as f64 * dt;
        state.t = t;
        log.t.push(t);
        log.p.push(state.p);
        log.thrust_force.push(sim.thrust_force(&state));
        let x = learning_input(&state);
        log.x.push(std::array::from_fn(|i| x[i]));
        log.f_true.push(residual_force(&state, wind, &config.residual)?);
        let desired = traj.desired(t);
        let u = ctrl
            .command(&ControlContext {
                state: &state,
                desired: &desired,
                measurement: None,
                thrust: sim.thrust_force(&state),
                dt,
            })
            .expect("baseline never fails");
        let cmd = force_to_attitude(&u, 0.0, &config.vehicle, Some(&prev_q)).unwrap_or(crate::sim::AttitudeThrustCmd {
            thrust: 0.0,
            attitude_d: prev_q,
        });
        prev_q = cmd.attitude_d;
        for _ in 0..substeps {
            state = sim.step(&state, &cmd, wind, config.physics_dt)?;
        }
    }
    Ok(log)
}

fn collect_condition(
    config: &CollectConfig,
    wind: &WindCondition<f64>,
    k: usize,
    duration: f64,
    seed: u64,
) -> Result<Vec<Sample>, DataError> {
    let n = (duration * config.sample_rate_hz).round() as usize;
    let dt = 1.0 / config.sample_rate_hz;
    let diverged = |source| DataError::SimDiverged { condition: k, source };
    let log = match config.plan {
        FlightPlan::RandomSpline {
            bounds,
            segment_min_s,
            segment_max_s,
        } => {
            let mut rng = condition_rng(seed, k, 0);
            let start = (bounds.min + bounds.max) * 0.5;
            let traj =
                random_spline_trajectory(&bounds, start, (segment_min_s, segment_max_s), duration + 1.0, &mut rng)
                    .map_err(|e| DataError::Config(e.to_string()))?;
            fly_baseline(config, wind, &traj, n).map_err(diverged)?
        }
        FlightPlan::Figure8(fig) => fly_baseline(config, wind, &fig, n).map_err(diverged)?,
    };
    let labels = residual_label(&log.p, &log.thrust_force, dt, &config.vehicle)?;
    let mut noise = condition_rng(seed, k, 1);
    Ok((0..n)
        .map(|i| {
            let y = labels[i] + gaussian_vector(config.residual.noise_sigma, &mut noise);
            Sample {
                x: log.x[i],
                y: [y.x, y.y, y.z],
                f_true: [log.f_true[i].x, log.f_true[i].y, log.f_true[i].z],
                t: log.t[i],
                k,
            }
        })
        .collect())
}

/// Flies one data-collection flight per wind condition (in parallel) and
/// labels the logs. Condition `k` gets `wind.label = k`.
pub fn collect(
    conditions: &[WindCondition<f64>],
    duration_per_condition: f64,
    config: &CollectConfig,
    seed: u64,
) -> Result<FlightDataset, DataError> {
    if conditions.len() < 2 {
        return Err(DataError::Config("need at least two wind conditions".into()));
    }
    if !(duration_per_condition > 0.0) {
        return Err(DataError::Config("duration must be positive".into()));
    }
    config.substeps()?;
    let mut conditions = conditions.to_vec();
    for (k, c) in conditions.iter_mut().enumerate() {
        c.label = k;
        c.validate().map_err(|e| DataError::Config(e.to_string()))?;
    }
    let subdatasets = conditions
        .par_iter()
        .enumerate()
        .map(|(k, w)| collect_condition(config, w, k, duration_per_condition, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let ds = FlightDataset {
        meta: DatasetMeta {
            schema_version: DATASET_SCHEMA_VERSION,
            config_hash: config.hash(),
            seed,
            sample_rate_hz: config.sample_rate_hz,
            counts: subdatasets.iter().map(Vec::len).collect(),
            conditions,
        },
        subdatasets,
    };
    ds.validate()?;
    Ok(ds)
}

fn csv_header() -> Vec<String> {
    let mut h = vec!["t".to_string(), "k".to_string()];
    h.extend((0..INPUT_DIM).map(|i| format!("x{i}")));
    h.extend(["y_x", "y_y", "y_z", "f_x", "f_y", "f_z"].map(String::from));
    h
}

fn condition_file(k: usize) -> String {
    format!("condition_{k:02}.csv")
}

/// Writes `meta.json` and one CSV per condition into `dir`.
pub fn save_dataset(ds: &FlightDataset, dir: &Path) -> Result<(), DataError> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    for (k, d) in ds.subdatasets.iter().enumerate() {
        let mut w = csv::Writer::from_path(dir.join(condition_file(k)))?;
        w.write_record(csv_header())?;
        for s in d {
            let mut rec = vec![s.t.to_string(), s.k.to_string()];
            rec.extend(s.x.iter().chain(&s.y).chain(&s.f_true).map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    let mut meta = ds.meta.clone();
    meta.counts = ds.subdatasets.iter().map(Vec::len).collect();
    let mut f = fs::File::create(dir.join(META_FILE))?;
    f.write_all(serde_json::to_string_pretty(&meta).expect("meta serializes").as_bytes())?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<FlightDataset, DataError> {
    let text = fs::read_to_string(dir.join(META_FILE))?;
    let probe: serde_json::Value = serde_json::from_str(&text).map_err(|e| DataError::IoFailure(e.to_string()))?;
    let found = probe.get("schema_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_SCHEMA_VERSION {
        return Err(DataError::SchemaMismatch {
            found,
            expected: DATASET_SCHEMA_VERSION,
        });
    }
    let meta: DatasetMeta = serde_json::from_value(probe).map_err(|e| DataError::IoFailure(e.to_string()))?;
    if meta.counts.len() != meta.conditions.len() {
        return Err(DataError::Invariant("counts do not match conditions".into()));
    }
    let mut subdatasets = Vec::with_capacity(meta.conditions.len());
    let width = csv_header().len();
    for (k, &expected) in meta.counts.iter().enumerate() {
        let mut r = csv::Reader::from_path(dir.join(condition_file(k)))?;
        let mut samples = Vec::with_capacity(expected);
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != width {
                return Err(DataError::IoFailure(format!(
                    "row with {} fields in condition {k}",
                    rec.len()
                )));
            }
            let num = |i: usize| -> Result<f64, DataError> {
                rec[i]
                    .parse::<f64>()
                    .map_err(|e| DataError::IoFailure(format!("condition {k}: {e}")))
            };
            let kk: usize = rec[1]
                .parse()
                .map_err(|e| DataError::IoFailure(format!("condition {k}: {e}")))?;
            let mut vals = [0.0; INPUT_DIM + 6];
            for (i, v) in vals.iter_mut().enumerate() {
                *v = num(2 + i)?;
            }
            samples.push(Sample {
                t: num(0)?,
                k: kk,
                x: std::array::from_fn(|i| vals[i]),
                y: std::array::from_fn(|i| vals[INPUT_DIM + i]),
                f_true: std::array::from_fn(|i| vals[INPUT_DIM + 3 + i]),
            });
        }
        if samples.len() != expected {
            return Err(DataError::IoFailure(format!(
                "condition {k} has {} rows, expected {expected}",
                samples.len()
            )));
        }
        subdatasets.push(samples);
    }
    let ds = FlightDataset { subdatasets, meta };
    ds.validate()?;
    Ok(ds)
}

/// Draws `n` distinct indices below `len`.
pub(crate) fn sample_indices<R: Rng + ?Sized>(rng: &mut R, len: usize, n: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, n).into_vec()
}
