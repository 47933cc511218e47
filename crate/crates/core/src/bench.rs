//! Figure-8 benchmark matrix over controllers, wind conditions and seeds,
//! with the tracking report, its text/CSV renderings, trend checks and the
//! end-to-end collect → train → bench pipeline.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{
    build_controller, composite_error, force_to_attitude, write_telemetry_csv, ControlContext, ControllerGains,
    ControllerKind, TelemetryRow,
};
use crate::daiml::{self, DaimlConfig, EpochRecord, TrainingLog};
use crate::data::{collect, save_dataset, CausalLabeler, CollectConfig, FlightDataset, FlightPlan};
use crate::nn::Mlp;
use crate::sim::{
    gaussian_vector, residual_force, AttitudeThrustCmd, ResidualModelParams, SimState, Simulator, VehicleParams,
};
use crate::traj::{Figure8, Trajectory};
use crate::wind::WindCondition;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
const REPORT_HEADER: &str = "# neuralfly tracking report";
/// Tracking error beyond which a flight counts as diverged, m.
const DIVERGED_ERROR: f64 = 20.0;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("config `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Train(#[from] crate::daiml::DaimlError),
    #[error(transparent)]
    Nn(#[from] crate::nn::NnError),
    #[error("report parse: {0}")]
    Parse(String),
}

fn config_err(path: &str, message: impl Into<String>) -> BenchError {
    BenchError::Config {
        path: path.to_string(),
        message: message.into(),
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BenchError {
    BenchError::Io(format!("{}: {e}", path.display()))
}

/// One benchmark wind. Blows along `heading_deg` in the horizontal plane
/// (0° is +x); a nonzero `amplitude` makes it `speed + amplitude·sin(ω t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub speed: f64,
    #[serde(default)]
    pub heading_deg: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "unit_freq")]
    pub angular_freq: f64,
}

fn unit_freq() -> f64 {
    1.0
}

impl WindSpec {
    pub fn constant(speed: f64) -> Self {
        Self {
            name: None,
            speed,
            heading_deg: 0.0,
            amplitude: 0.0,
            angular_freq: 1.0,
        }
    }

    pub fn sinusoidal(speed: f64, amplitude: f64) -> Self {
        Self {
            amplitude,
            ..Self::constant(speed)
        }
    }

    pub fn is_sinusoidal(&self) -> bool {
        self.amplitude != 0.0
    }

    pub fn label(&self) -> String {
        if let Some(n) = &self.name {
            return n.clone();
        }
        if self.is_sinusoidal() {
            format!("{}+{}sin", self.speed, self.amplitude)
        } else {
            format!("{}", self.speed)
        }
    }

    pub fn condition(&self, label: usize) -> Result<WindCondition<f64>, crate::wind::WindError> {
        let h = self.heading_deg.to_radians();
        let v = Vector3::new(h.cos(), h.sin(), 0.0) * self.speed;
        if self.is_sinusoidal() {
            WindCondition::sinusoidal(v, self.amplitude, self.angular_freq, label)
        } else {
            WindCondition::constant(v, label)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSpec {
    /// Constant wind speeds (+x) of the data-collection flights, m/s.
    pub winds: Vec<f64>,
    pub duration_s: f64,
    /// Length of the figure-8 validation flight per condition.
    pub validation_duration_s: f64,
    pub seed: u64,
    pub daiml: DaimlConfig,
}

impl Default for TrainingSpec {
    fn default() -> Self {
        Self {
            winds: vec![0.0, 1.3, 2.5, 3.7, 4.9, 6.1],
            duration_s: 120.0,
            validation_duration_s: 30.0,
            seed: 7,
            daiml: DaimlConfig {
                patience: 0,
                ..DaimlConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSpec {
    pub dir: PathBuf,
    /// Trained φ. When unset the pipeline trains one into `dir`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Write per-cell telemetry CSVs.
    pub telemetry: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("neuralfly-out"),
            checkpoint: None,
            telemetry: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub controllers: Vec<ControllerKind>,
    pub seeds: Vec<u64>,
    pub laps: usize,
    pub warmup_laps: usize,
    pub control_rate_hz: f64,
    pub physics_dt: f64,
    pub trajectory: Figure8<f64>,
    pub winds: Vec<WindSpec>,
    pub vehicle: VehicleParams<f64>,
    pub residual: ResidualModelParams<f64>,
    /// Defaults to [`ControllerGains::for_vehicle`].
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gains: Option<ControllerGains<f64>>,
    pub training: TrainingSpec,
    pub output: OutputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            controllers: vec![
                ControllerKind::Nf,
                ControllerKind::NfConstant,
                ControllerKind::Baseline,
                ControllerKind::Indi,
                ControllerKind::L1,
            ],
            seeds: vec![0, 1, 2, 3, 4],
            laps: 6,
            warmup_laps: 1,
            control_rate_hz: 50.0,
            physics_dt: 0.002,
            trajectory: Figure8::default(),
            winds: vec![
                WindSpec::constant(0.0),
                WindSpec::constant(4.2),
                WindSpec::constant(8.5),
                WindSpec::constant(12.1),
                WindSpec::sinusoidal(8.5, 2.4),
            ],
            vehicle: VehicleParams::default(),
            residual: ResidualModelParams::default(),
            gains: None,
            training: TrainingSpec::default(),
            output: OutputSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses TOML; schema errors name the offending field path.
    pub fn from_toml(text: &str) -> Result<Self, BenchError> {
        let de = toml::Deserializer::new(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            config_err(&path, e.into_inner().message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, BenchError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is always representable")
    }

    pub fn gains(&self) -> ControllerGains<f64> {
        self.gains
            .unwrap_or_else(|| ControllerGains::for_vehicle(&self.vehicle, self.residual.noise_sigma))
    }

    pub fn control_dt(&self) -> f64 {
        1.0 / self.control_rate_hz
    }

    pub fn substeps(&self) -> Result<usize, BenchError> {
        let ratio = self.control_dt() / self.physics_dt;
        if !(ratio.is_finite() && ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-6 {
            return Err(config_err(
                "physics_dt",
                "control period must be a whole number of physics steps",
            ));
        }
        Ok(ratio.round() as usize)
    }

    /// Control ticks per lap; lap boundaries fall on whole ticks.
    pub fn ticks_per_lap(&self) -> Result<usize, BenchError> {
        let ratio = self.trajectory.period / self.control_dt();
        if !(ratio.is_finite() && ratio >= 1.0) || (ratio - ratio.round()).abs() > 1e-6 {
            return Err(config_err(
                "trajectory.period",
                "period must be a whole number of control ticks",
            ));
        }
        Ok(ratio.round() as usize)
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "seed list must not be empty"));
        }
        if self.controllers.is_empty() {
            return Err(config_err("controllers", "controller list must not be empty"));
        }
        if self.winds.is_empty() {
            return Err(config_err("winds", "wind list must not be empty"));
        }
        if self.laps == 0 {
            return Err(config_err("laps", "need at least one lap"));
        }
        if !(self.control_rate_hz > 0.0) || !(self.physics_dt > 0.0) {
            return Err(config_err("control_rate_hz", "rates must be positive"));
        }
        self.substeps()?;
        self.trajectory
            .validate()
            .map_err(|e| config_err("trajectory", e.to_string()))?;
        self.ticks_per_lap()?;
        self.vehicle
            .validate()
            .map_err(|e| config_err("vehicle", e.to_string()))?;
        self.residual
            .validate()
            .map_err(|e| config_err("residual", e.to_string()))?;
        self.gains()
            .validate()
            .map_err(|e| config_err("gains", e.to_string()))?;
        for (i, w) in self.winds.iter().enumerate() {
            w.condition(i)
                .map_err(|e| config_err(&format!("winds[{i}]"), e.to_string()))?;
        }
        let t = &self.training;
        if t.winds.is_empty() {
            return Err(config_err("training.winds", "need at least one training wind"));
        }
        if !(t.duration_s > 0.0) || !(t.validation_duration_s > 0.0) {
            return Err(config_err("training.duration_s", "durations must be positive"));
        }
        Ok(())
    }

    fn collect_config(&self) -> CollectConfig {
        CollectConfig {
            vehicle: self.vehicle,
            residual: self.residual,
            gains: self.gains(),
            sample_rate_hz: self.control_rate_hz,
            physics_dt: self.physics_dt,
            ..CollectConfig::default()
        }
    }

    fn training_conditions(&self) -> Vec<WindCondition<f64>> {
        self.training
            .winds
            .iter()
            .enumerate()
            .map(|(k, &s)| WindCondition::constant(Vector3::new(s, 0.0, 0.0), k).expect("validated"))
            .collect()
    }

    /// Random-spline training flights and figure-8 validation flights over
    /// the training winds.
    pub fn collect_datasets(&self) -> Result<(FlightDataset, FlightDataset), BenchError> {
        let conds = self.training_conditions();
        let cfg = self.collect_config();
        let train = collect(&conds, self.training.duration_s, &cfg, self.training.seed)?;
        let val_cfg = CollectConfig {
            plan: FlightPlan::Figure8(self.trajectory),
            ..cfg
        };
        let val = collect(
            &conds,
            self.training.validation_duration_s,
            &val_cfg,
            self.training.seed.wrapping_add(1),
        )?;
        Ok((train, val))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellStats {
    pub rms_cm: f64,
    pub mean_cm: f64,
    pub lap_mean_cm: Vec<f64>,
    /// RMS of `‖f̂ − f‖` over the scored laps, N.
    pub force_rmse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellReport {
    pub controller: ControllerKind,
    pub wind: String,
    pub seed: u64,
    pub outcome: Result<CellStats, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingReport {
    pub laps: usize,
    pub cells: Vec<CellReport>,
}

/// One simulated cell with its telemetry.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub stats: CellStats,
    pub telemetry: Vec<TelemetryRow>,
}

fn stats_from_errors(errors: &[f64], force_sq: &[f64], laps: usize) -> CellStats {
    let n = errors.len() as f64;
    let per_lap = errors.len() / laps;
    CellStats {
        rms_cm: 100.0 * (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
        mean_cm: 100.0 * errors.iter().sum::<f64>() / n,
        lap_mean_cm: errors
            .chunks(per_lap)
            .map(|c| 100.0 * c.iter().sum::<f64>() / c.len() as f64)
            .collect(),
        force_rmse: (force_sq.iter().sum::<f64>() / force_sq.len() as f64).sqrt(),
    }
}

/// Flies warmup plus scored laps of the figure-8 with one controller in one
/// wind. Measurement noise is drawn from `seed` and the wind index, so every
/// controller sees the same noise sequence.
pub fn run_cell(
    config: &ExperimentConfig,
    kind: ControllerKind,
    wind_index: usize,
    seed: u64,
    basis: Option<Arc<Mlp<f64>>>,
) -> Result<CellRun, String> {
    let spec = &config.winds[wind_index];
    let wind = spec.condition(wind_index).map_err(|e| e.to_string())?;
    let gains = config.gains();
    let sim = Simulator::new(config.vehicle, config.residual).map_err(|e| e.to_string())?;
    let mut ctrl = build_controller(kind, gains, config.vehicle, basis)
        .ok_or_else(|| format!("{kind} needs a trained basis checkpoint"))?;
    let substeps = config.substeps().map_err(|e| e.to_string())?;
    let lap_ticks = config.ticks_per_lap().map_err(|e| e.to_string())?;
    let dt = config.control_dt();
    let traj = &config.trajectory;
    let warmup = config.warmup_laps * lap_ticks;
    let total = warmup + config.laps * lap_ticks;

    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(0x100 | wind_index as u64);
    let mut labeler = CausalLabeler::new(dt, config.vehicle);
    let mut state = SimState::hover(traj.desired(0.0).pos_d, &config.vehicle);
    let mut prev_q = state.q_att;
    let mut errors = Vec::with_capacity(total - warmup);
    let mut force_sq = Vec::with_capacity(total - warmup);
    let mut telemetry = Vec::new();

    for tick in 0..total {
        let t = tick as f64 * dt;
        state.t = t;
        let measurement = labeler.push(&state, sim.thrust_force(&state)).map(|mut m| {
            m.y += gaussian_vector(config.residual.noise_sigma, &mut noise);
            m
        });
        let desired = traj.desired(t);
        let u = ctrl
            .command(&ControlContext {
                state: &state,
                desired: &desired,
                measurement: measurement.as_ref(),
                thrust: sim.thrust_force(&state),
                dt,
            })
            .map_err(|e| format!("controller failed at t = {t:.2} s: {e}"))?;
        let p_err = state.p - desired.pos_d;
        if !p_err.norm().is_finite() || p_err.norm() > DIVERGED_ERROR {
            return Err(format!("flight diverged at t = {t:.2} s"));
        }
        if tick >= warmup {
            let f_true = residual_force(&state, &wind, &config.residual).map_err(|e| e.to_string())?;
            let f_hat = ctrl.force_estimate();
            errors.push(p_err.norm());
            force_sq.push((f_hat - f_true).norm_squared());
            if config.output.telemetry {
                let ce = composite_error(&state, &desired, &gains.comp_gain);
                let adapt = ctrl.adaptive_state();
                telemetry.push(TelemetryRow {
                    t,
                    p_err: p_err.into(),
                    s: ce.s.into(),
                    a_hat: adapt.map_or_else(Vec::new, |a| a.a_hat.iter().copied().collect()),
                    trace_p: adapt.map_or(0.0, |a| a.trace_p()),
                    f_true: f_true.into(),
                    f_hat: f_hat.into(),
                });
            }
        }
        let cmd = force_to_attitude(&u, 0.0, &config.vehicle, Some(&prev_q)).unwrap_or(AttitudeThrustCmd {
            thrust: 0.0,
            attitude_d: prev_q,
        });
        prev_q = cmd.attitude_d;
        for _ in 0..substeps {
            state = sim
                .step(&state, &cmd, &wind, config.physics_dt)
                .map_err(|e| format!("simulation failed at t = {t:.2} s: {e}"))?;
        }
    }
    Ok(CellRun {
        stats: stats_from_errors(&errors, &force_sq, config.laps),
        telemetry,
    })
}

fn telemetry_name(kind: ControllerKind, wind: &str, seed: u64) -> String {
    let wind: String = wind
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{kind}_{wind}_{seed}.csv")
}

/// Runs every (controller, wind, seed) cell in parallel. Results come back
/// in that nesting order whatever the scheduling. With a telemetry
/// directory, each successful cell also writes its CSV there.
pub fn run_benchmark(
    config: &ExperimentConfig,
    basis: Option<Arc<Mlp<f64>>>,
    telemetry_dir: Option<&Path>,
) -> Result<TrackingReport, BenchError> {
    config.validate()?;
    if let Some(dir) = telemetry_dir {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let mut jobs = Vec::new();
    for &kind in &config.controllers {
        for w in 0..config.winds.len() {
            for &seed in &config.seeds {
                jobs.push((kind, w, seed));
            }
        }
    }
    let cells = jobs
        .par_iter()
        .map(|&(kind, w, seed)| {
            let wind = config.winds[w].label();
            let outcome = run_cell(config, kind, w, seed, basis.clone()).and_then(|run| {
                if let Some(dir) = telemetry_dir.filter(|_| config.output.telemetry) {
                    let path = dir.join(telemetry_name(kind, &wind, seed));
                    let file = std::fs::File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                    write_telemetry_csv(std::io::BufWriter::new(file), &run.telemetry).map_err(|e| e.to_string())?;
                }
                Ok(run.stats)
            });
            CellReport {
                controller: kind,
                wind,
                seed,
                outcome,
            }
        })
        .collect();
    Ok(TrackingReport {
        laps: config.laps,
        cells,
    })
}

/// Mean and sample standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Seed-aggregated statistics of one (controller, wind) pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub rms: (f64, f64),
    pub mean: (f64, f64),
    pub force_rmse: (f64, f64),
    pub seeds: usize,
    pub failures: usize,
}

impl TrackingReport {
    pub fn controllers(&self) -> Vec<ControllerKind> {
        let mut out = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.controller) {
                out.push(c.controller);
            }
        }
        out
    }

    pub fn winds(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.wind) {
                out.push(c.wind.clone());
            }
        }
        out
    }

    /// Aggregate over the successful seeds; `None` when every seed failed.
    pub fn aggregate(&self, controller: ControllerKind, wind: &str) -> Option<Aggregate> {
        let cells: Vec<_> = self
            .cells
            .iter()
            .filter(|c| c.controller == controller && c.wind == wind)
            .collect();
        let ok: Vec<&CellStats> = cells.iter().filter_map(|c| c.outcome.as_ref().ok()).collect();
        if ok.is_empty() {
            return None;
        }
        let col = |f: fn(&CellStats) -> f64| mean_std(&ok.iter().map(|s| f(s)).collect::<Vec<_>>());
        Some(Aggregate {
            rms: col(|s| s.rms_cm),
            mean: col(|s| s.mean_cm),
            force_rmse: col(|s| s.force_rmse),
            seeds: ok.len(),
            failures: cells.len() - ok.len(),
        })
    }

    pub fn failures(&self) -> impl Iterator<Item = &CellReport> {
        self.cells.iter().filter(|c| c.outcome.is_err())
    }

    /// RMS ≥ mean and the lap count match on every successful cell.
    pub fn check_invariants(&self) -> Result<(), String> {
        for c in &self.cells {
            if let Ok(s) = &c.outcome {
                if s.rms_cm + 1e-9 < s.mean_cm {
                    return Err(format!("{} {} seed {}: RMS below mean", c.controller, c.wind, c.seed));
                }
                if s.lap_mean_cm.len() != self.laps {
                    return Err(format!("{} {} seed {}: wrong lap count", c.controller, c.wind, c.seed));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().flexible(false).from_writer(Vec::new());
        let mut header: Vec<String> = [
            "controller",
            "wind",
            "seed",
            "status",
            "rms_cm",
            "mean_cm",
            "force_rmse_n",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend((1..=self.laps).map(|i| format!("lap{i}_mean_cm")));
        header.push("error".into());
        w.write_record(&header).expect("in-memory write");
        for c in &self.cells {
            let mut rec = vec![c.controller.to_string(), c.wind.clone(), c.seed.to_string()];
            match &c.outcome {
                Ok(s) => {
                    rec.push("ok".into());
                    rec.extend([s.rms_cm, s.mean_cm, s.force_rmse].iter().map(f64::to_string));
                    rec.extend(s.lap_mean_cm.iter().map(f64::to_string));
                    rec.push(String::new());
                }
                Err(e) => {
                    rec.push("error".into());
                    rec.extend(std::iter::repeat_n(String::new(), 3 + self.laps));
                    rec.push(e.clone());
                }
            }
            w.write_record(&rec).expect("in-memory write");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8");
        format!("{REPORT_HEADER} v{REPORT_SCHEMA_VERSION}\n{body}")
    }

    pub fn from_csv(text: &str) -> Result<Self, BenchError> {
        let perr = |m: String| BenchError::Parse(m);
        let (first, body) = text.split_once('\n').ok_or_else(|| perr("empty report".into()))?;
        let expected = format!("{REPORT_HEADER} v{REPORT_SCHEMA_VERSION}");
        if first.trim_end() != expected {
            return Err(perr(format!("expected header `{expected}`, found `{first}`")));
        }
        let mut r = csv::Reader::from_reader(body.as_bytes());
        let header = r.headers().map_err(|e| perr(e.to_string()))?.clone();
        let laps = header.iter().filter(|h| h.starts_with("lap")).count();
        let mut cells = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| perr(e.to_string()))?;
            let num = |i: usize| -> Result<f64, BenchError> {
                rec[i].parse().map_err(|_| perr(format!("bad number `{}`", &rec[i])))
            };
            let outcome = match &rec[3] {
                "ok" => Ok(CellStats {
                    rms_cm: num(4)?,
                    mean_cm: num(5)?,
                    force_rmse: num(6)?,
                    lap_mean_cm: (0..laps).map(|i| num(7 + i)).collect::<Result<_, _>>()?,
                }),
                "error" => Err(rec[7 + laps].to_string()),
                s => return Err(perr(format!("unknown status `{s}`"))),
            };
            cells.push(CellReport {
                controller: rec[0].parse().map_err(perr)?,
                wind: rec[1].to_string(),
                seed: rec[2].parse().map_err(|_| perr(format!("bad seed `{}`", &rec[2])))?,
                outcome,
            });
        }
        Ok(Self { laps, cells })
    }
}

/// Outcome of one trend check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    /// `None` when the report lacks what the check compares.
    pub passed: Option<bool>,
    pub detail: String,
}

fn mean_of(report: &TrackingReport, kind: ControllerKind, wind: &str) -> Option<f64> {
    report
        .aggregate(kind, wind)
        .filter(|a| a.failures == 0)
        .map(|a| a.mean.0)
}

/// Ordering and monotonicity checks on seed-averaged mean errors.
pub fn trend_checks(report: &TrackingReport, config: &ExperimentConfig) -> Vec<CheckResult> {
    use ControllerKind::{Baseline, Nf, NfConstant};
    let mut out = Vec::new();

    let labels: Vec<String> = config.winds.iter().map(WindSpec::label).collect();
    let mut ordered = 0;
    let mut compared = 0;
    let mut detail = String::new();
    for w in &labels {
        if let (Some(nf), Some(nfc), Some(base)) = (
            mean_of(report, Nf, w),
            mean_of(report, NfConstant, w),
            mean_of(report, Baseline, w),
        ) {
            compared += 1;
            let ok = nf <= nfc && nfc <= base;
            ordered += ok as usize;
            let _ = write!(
                detail,
                "{w}: {nf:.2} / {nfc:.2} / {base:.2}{}; ",
                if ok { "" } else { " (out of order)" }
            );
        }
    }
    let need = labels.len().saturating_sub(1).max(1);
    out.push(CheckResult {
        name: "ordering nf <= nf-constant <= baseline",
        passed: (compared == labels.len()).then_some(ordered >= need),
        detail: format!(
            "{ordered} of {} winds ordered (need {need}); {}",
            labels.len(),
            detail.trim_end_matches("; ")
        ),
    });

    let mut constant: Vec<(f64, &str)> = config
        .winds
        .iter()
        .zip(&labels)
        .filter(|(w, _)| !w.is_sinusoidal())
        .map(|(w, l)| (w.speed, l.as_str()))
        .collect();
    constant.sort_by(|a, b| a.0.total_cmp(&b.0));
    let series: Option<Vec<f64>> = constant.iter().map(|(_, l)| mean_of(report, Baseline, l)).collect();
    out.push(match series {
        Some(s) if s.len() >= 2 => CheckResult {
            name: "baseline error increases with wind speed",
            passed: Some(s.windows(2).all(|p| p[1] > p[0])),
            detail: s.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" -> "),
        },
        _ => CheckResult {
            name: "baseline error increases with wind speed",
            passed: None,
            detail: "needs baseline results for two constant winds".into(),
        },
    });

    let sinus: Vec<&str> = config
        .winds
        .iter()
        .zip(&labels)
        .filter(|(w, _)| w.is_sinusoidal())
        .map(|(_, l)| l.as_str())
        .collect();
    let pairs: Option<Vec<(f64, f64)>> = sinus
        .iter()
        .map(|w| {
            let nf = report.aggregate(Nf, w).filter(|a| a.failures == 0)?;
            let nfc = report.aggregate(NfConstant, w).filter(|a| a.failures == 0)?;
            Some((nf.force_rmse.0, nfc.force_rmse.0))
        })
        .collect();
    out.push(match pairs {
        Some(p) if !p.is_empty() => CheckResult {
            name: "nf force prediction beats nf-constant in gusts",
            passed: Some(p.iter().all(|(a, b)| a <= b)),
            detail: p
                .iter()
                .map(|(a, b)| format!("{a:.3} N vs {b:.3} N"))
                .collect::<Vec<_>>()
                .join(", "),
        },
        _ => CheckResult {
            name: "nf force prediction beats nf-constant in gusts",
            passed: None,
            detail: "needs nf and nf-constant results in a sinusoidal wind".into(),
        },
    });
    out
}

fn cell_text(v: (f64, f64), seeds: usize, bold: bool) -> String {
    let s = if seeds > 1 {
        format!("{:.2} ± {:.2}", v.0, v.1)
    } else {
        format!("{:.2}", v.0)
    };
    if bold {
        format!("**{s}**")
    } else {
        s
    }
}

/// Method × wind table of RMS and mean error in cm (mean ± std over seeds),
/// per-column minimum in bold, then force-prediction RMSE, optional training
/// diagnostics, check results and failures.
pub fn summarize(report: &TrackingReport, training: Option<&TrainingLog>, checks: &[CheckResult]) -> String {
    let controllers = report.controllers();
    let winds = report.winds();
    let aggs: BTreeMap<(usize, usize), Aggregate> = controllers
        .iter()
        .enumerate()
        .flat_map(|(i, &c)| winds.iter().enumerate().map(move |(j, w)| ((i, j), c, w)))
        .filter_map(|(key, c, w)| report.aggregate(c, w).map(|a| (key, a)))
        .collect();
    let column_min = |j: usize, f: fn(&Aggregate) -> f64| {
        (0..controllers.len())
            .filter_map(|i| aggs.get(&(i, j)).map(f))
            .fold(f64::INFINITY, f64::min)
    };

    let mut out = String::new();
    let seeds = report
        .cells
        .iter()
        .map(|c| c.seed)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let _ = writeln!(
        out,
        "Tracking error over {} laps, cm (mean ± std over {seeds} seeds)",
        report.laps
    );
    out.push('\n');
    let mut header = vec!["method".to_string()];
    for w in &winds {
        header.push(format!("{w} RMS"));
        header.push(format!("{w} Mean"));
    }
    let _ = writeln!(out, "| {} |", header.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
    for (i, c) in controllers.iter().enumerate() {
        let mut row = vec![c.to_string()];
        for j in 0..winds.len() {
            match aggs.get(&(i, j)) {
                Some(a) => {
                    row.push(cell_text(a.rms, a.seeds, a.rms.0 == column_min(j, |a| a.rms.0)));
                    row.push(cell_text(a.mean, a.seeds, a.mean.0 == column_min(j, |a| a.mean.0)));
                }
                None => row.extend(["failed".to_string(), "failed".to_string()]),
            }
        }
        let _ = writeln!(out, "| {} |", row.join(" | "));
    }

    out.push_str("\nForce prediction RMSE, N\n\n");
    let _ = writeln!(out, "| method | {} |", winds.join(" | "));
    let _ = writeln!(out, "|{}", "---|".repeat(winds.len() + 1));
    for (i, c) in controllers.iter().enumerate() {
        let row: Vec<String> = (0..winds.len())
            .map(|j| {
                aggs.get(&(i, j))
                    .map_or("failed".into(), |a| cell_text(a.force_rmse, a.seeds, false))
            })
            .collect();
        let _ = writeln!(out, "| {c} | {} |", row.join(" | "));
    }

    if let (Some(first), Some(last)) = (
        training.and_then(TrainingLog::first),
        training.and_then(TrainingLog::last),
    ) {
        out.push_str("\nBasis training\n\n");
        let _ = writeln!(
            out,
            "epoch {:>4}: train f-loss {:.5}, validation f-loss {:.5}, cluster ratio {:.3}",
            first.epoch, first.train_f_loss, first.val_f_loss, first.cluster_metric
        );
        let _ = writeln!(out, "epoch {:>4}: train f-loss {:.5}, validation f-loss {:.5}, cluster ratio {:.3}, discriminator accuracy {:.3}", last.epoch, last.train_f_loss, last.val_f_loss, last.cluster_metric, last.discriminator_acc);
    }

    if !checks.is_empty() {
        out.push_str("\nChecks\n\n");
        for c in checks {
            let tag = match c.passed {
                Some(true) => "PASS",
                Some(false) => "FAIL",
                None => "SKIP",
            };
            let _ = writeln!(out, "{tag} {}: {}", c.name, c.detail);
        }
    }

    let failed: Vec<_> = report.failures().collect();
    if !failed.is_empty() {
        out.push_str("\nFailed cells\n\n");
        for c in failed {
            let _ = writeln!(
                out,
                "{} / {} / seed {}: {}",
                c.controller,
                c.wind,
                c.seed,
                c.outcome.as_ref().unwrap_err()
            );
        }
    }
    out.push_str(
        "\nErrors come from a synthetic aerodynamic residual model, so absolute values are not comparable \
         with wind-tunnel flights. The reproduced claims are the orderings and trends checked above.\n",
    );
    out
}

/// Everything one pipeline run produced.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub report: TrackingReport,
    pub checks: Vec<CheckResult>,
    pub training_log: Option<TrainingLog>,
    pub report_csv: PathBuf,
    pub report_txt: PathBuf,
}

impl PipelineOutput {
    /// Any evaluated check failed.
    pub fn checks_failed(&self) -> bool {
        self.checks.iter().any(|c| c.passed == Some(false))
    }
}

/// Collects and trains (unless a checkpoint is configured), runs the
/// benchmark matrix and writes `report.csv`, `report.txt`, telemetry and the
/// training log under `config.output.dir`.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput, BenchError> {
    run_pipeline_observed(config, |_, _| {})
}

/// [`run_pipeline`] with a per-epoch callback into basis training.
pub fn run_pipeline_observed<F>(config: &ExperimentConfig, observer: F) -> Result<PipelineOutput, BenchError>
where
    F: FnMut(&EpochRecord, &Mlp<f64>),
{
    config.validate()?;
    let dir = &config.output.dir;
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let needs_basis = config.controllers.iter().any(|k| k.needs_basis());

    let (basis, training_log) = match &config.output.checkpoint {
        Some(path) => (Mlp::load(path).ok().map(Arc::new), None),
        None if needs_basis => {
            let (train, val) = config.collect_datasets()?;
            save_dataset(&train, &dir.join("data").join("train"))?;
            save_dataset(&val, &dir.join("data").join("validation"))?;
            let model = daiml::train_with_observer(&train, &val, &config.training.daiml, observer)?;
            model.phi.save(&dir.join("phi.json"))?;
            model.log.save(&dir.join("training_log.csv"))?;
            (Some(Arc::new(model.phi)), Some(model.log))
        }
        None => (None, None),
    };

    let telemetry = config.output.telemetry.then(|| dir.join("telemetry"));
    let report = run_benchmark(config, basis, telemetry.as_deref())?;
    let checks = trend_checks(&report, config);
    let report_csv = dir.join("report.csv");
    let report_txt = dir.join("report.txt");
    std::fs::write(&report_csv, report.to_csv()).map_err(|e| io_err(&report_csv, e))?;
    std::fs::write(&report_txt, summarize(&report, training_log.as_ref(), &checks))
        .map_err(|e| io_err(&report_txt, e))?;
    Ok(PipelineOutput {
        report,
        checks,
        training_log,
        report_csv,
        report_txt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_config() -> ExperimentConfig {
        ExperimentConfig {
            controllers: vec![ControllerKind::Baseline],
            seeds: vec![0],
            laps: 2,
            winds: vec![WindSpec::constant(0.0)],
            output: OutputSpec {
                telemetry: false,
                ..OutputSpec::default()
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn calm_nominal_baseline_tracks_within_a_centimetre() {
        let cfg = ExperimentConfig {
            residual: ResidualModelParams::disabled(),
            ..quick_config()
        };
        let run = run_cell(&cfg, ControllerKind::Baseline, 0, 0, None).unwrap();
        assert!(run.stats.mean_cm < 1.0, "{:?}", run.stats);
        assert_eq!(run.stats.lap_mean_cm.len(), 2);
    }

    #[test]
    fn lap_segmentation_is_exact() {
        let cfg = quick_config();
        assert_eq!(cfg.ticks_per_lap().unwrap(), 314);
        let errors: Vec<f64> = (0..6).map(|i| i as f64 / 100.0).collect();
        let s = stats_from_errors(&errors, &[1.0; 6], 3);
        assert_eq!(s.lap_mean_cm, vec![0.5, 2.5, 4.5]);
        let bad = ExperimentConfig {
            trajectory: Figure8 {
                period: 6.29 + 0.001,
                ..Figure8::default()
            },
            ..quick_config()
        };
        assert!(matches!(bad.validate(), Err(BenchError::Config { path, .. }) if path == "trajectory.period"));
    }

    #[test]
    fn missing_basis_fails_only_that_cell() {
        let cfg = ExperimentConfig {
            controllers: vec![ControllerKind::Nf, ControllerKind::Baseline],
            ..quick_config()
        };
        let report = run_benchmark(&cfg, None, None).unwrap();
        assert!(report.cells[0].outcome.as_ref().unwrap_err().contains("checkpoint"));
        assert!(report.cells[1].outcome.is_ok());
        assert!(summarize(&report, None, &[]).contains("Failed cells"));
    }

    fn sample_report() -> TrackingReport {
        TrackingReport {
            laps: 2,
            cells: vec![
                CellReport {
                    controller: ControllerKind::Nf,
                    wind: "4.2".into(),
                    seed: 3,
                    outcome: Ok(CellStats {
                        rms_cm: 1.0 / 3.0,
                        mean_cm: 0.1 + 0.2,
                        lap_mean_cm: vec![0.25, 0.35],
                        force_rmse: 1e-17,
                    }),
                },
                CellReport {
                    controller: ControllerKind::L1,
                    wind: "8.5+2.4sin".into(),
                    seed: 3,
                    outcome: Err("flight diverged, at t = 3.00 s".into()),
                },
            ],
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let r = sample_report();
        let text = r.to_csv();
        assert_eq!(TrackingReport::from_csv(&text).unwrap(), r);
        let wrong = text.replacen("v1", "v9", 1);
        assert!(TrackingReport::from_csv(&wrong).is_err());
    }

    #[test]
    fn single_cell_summary_echoes_values() {
        let mut r = sample_report();
        r.cells.truncate(1);
        let text = summarize(&r, None, &[]);
        let rows: Vec<&str> = text.lines().filter(|l| l.starts_with("| nf ")).collect();
        assert_eq!(rows.len(), 2);
        assert!(
            rows[0].contains("**0.33**") && rows[0].contains("**0.30**"),
            "{}",
            rows[0]
        );
    }

    #[test]
    fn bench_checks_read_aggregates() {
        let cfg = ExperimentConfig {
            winds: vec![WindSpec::constant(0.0), WindSpec::constant(4.0)],
            ..ExperimentConfig::default()
        };
        let cell = |c, w: &str, mean: f64| CellReport {
            controller: c,
            wind: w.into(),
            seed: 0,
            outcome: Ok(CellStats {
                rms_cm: mean * 1.1,
                mean_cm: mean,
                lap_mean_cm: vec![mean; 6],
                force_rmse: 0.1,
            }),
        };
        use ControllerKind::*;
        let report = TrackingReport {
            laps: 6,
            cells: vec![
                cell(Nf, "0", 2.5),
                cell(NfConstant, "0", 2.0),
                cell(Baseline, "0", 3.0),
                cell(Nf, "4", 5.0),
                cell(NfConstant, "4", 2.0),
                cell(Baseline, "4", 4.0),
            ],
        };
        let checks = trend_checks(&report, &cfg);
        assert_eq!(checks[0].passed, Some(false));
        assert_eq!(checks[1].passed, Some(true));
        assert_eq!(checks[2].passed, None);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn config_errors_name_the_field() {
        let err = ExperimentConfig::from_toml("seeds = []").unwrap_err();
        assert!(
            matches!(&err, BenchError::Config { path, .. } if path == "seeds"),
            "{err}"
        );
        let err = ExperimentConfig::from_toml("[training.daiml]\neta = \"half\"").unwrap_err();
        assert!(
            matches!(&err, BenchError::Config { path, .. } if path == "training.daiml.eta"),
            "{err}"
        );
        let err = ExperimentConfig::from_toml("[[winds]]\nspeed = 1.0\ngust = 2.0").unwrap_err();
        assert!(err.to_string().contains("winds"), "{err}");
    }
}
