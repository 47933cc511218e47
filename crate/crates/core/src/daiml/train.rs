//! The alternating meta-training loop: least-squares adaptation on one batch,
//! a representation step on a disjoint batch with the adversarial term, and a
//! stochastic discriminator step.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lsq::{least_squares_adapt, LsError};
use crate::control::INPUT_DIM;
use crate::data::{sample_indices, FlightDataset};
use crate::nn::{accuracy, cross_entropy_batch, Gradients, Mlp, NnError, Sgd};

#[derive(Debug, thiserror::Error)]
pub enum DaimlError {
    #[error("f-loss became non-finite at epoch {epoch}, iteration {iteration}")]
    DivergedLoss { epoch: usize, iteration: usize },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Ls(#[from] LsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training log i/o: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaimlConfig {
    /// Weight of the adversarial term.
    pub alpha: f64,
    /// Probability of a discriminator step per iteration.
    pub eta: f64,
    /// Norm cap on the adapted coefficients.
    pub gamma: f64,
    pub batch_adapt: usize,
    pub batch_train: usize,
    pub lr_phi: f64,
    pub lr_h: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Iterations per epoch; `None` means one expected pass over the data.
    pub iters_per_epoch: Option<usize>,
    /// Stop when validation loss has not improved for this many epochs;
    /// 0 trains for the full budget.
    pub patience: usize,
    pub seed: u64,
    pub damping: f64,
    /// Hidden widths of φ.
    pub phi_hidden: Vec<usize>,
    /// Output width `h` of φ.
    pub basis_dim: usize,
    pub disc_hidden: usize,
    /// Per-layer spectral-norm cap of φ.
    pub spectral_bound: f64,
    /// Per-layer spectral-norm cap of the discriminator.
    pub disc_spectral_bound: f64,
    /// Samples per condition in the fixed training probe.
    pub probe_samples: usize,
    /// Fixed adaptation batches per condition for the cluster metric.
    pub cluster_batches: usize,
}

impl Default for DaimlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            eta: 0.5,
            gamma: 10.0,
            batch_adapt: 128,
            batch_train: 256,
            lr_phi: 5e-4,
            lr_h: 1e-3,
            momentum: 0.9,
            epochs: 500,
            iters_per_epoch: None,
            patience: 50,
            seed: 0,
            damping: 1e-6,
            phi_hidden: vec![50, 60, 50],
            basis_dim: 4,
            disc_hidden: 128,
            spectral_bound: 2.0,
            disc_spectral_bound: 2.0,
            probe_samples: 1024,
            cluster_batches: 8,
        }
    }
}

impl DaimlConfig {
    pub fn validate(&self, train: &FlightDataset) -> Result<(), DaimlError> {
        let bad = |m: &str| Err(DaimlError::Config(m.to_string()));
        if !(self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return bad("eta must lie in (0, 1]");
        }
        if !(self.gamma > 0.0)
            || !(self.lr_phi > 0.0)
            || !(self.lr_h > 0.0)
            || !(self.spectral_bound > 0.0)
            || !(self.disc_spectral_bound > 0.0)
        {
            return bad("gamma, learning rates and spectral bound must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.damping >= 0.0) {
            return bad("momentum must lie in [0, 1) and damping be non-negative");
        }
        if self.batch_adapt < self.basis_dim || self.batch_train == 0 || self.basis_dim == 0 {
            return bad("batches must be non-empty and the adaptation batch at least the basis width");
        }
        let k = train.num_conditions();
        if k == 0 || (self.alpha > 0.0 && k < 2) {
            return bad("adversarial training needs at least two conditions");
        }
        let smallest = train.subdatasets.iter().map(Vec::len).min().unwrap_or(0);
        if self.batch_adapt + self.batch_train > smallest {
            return bad("batches do not fit in the smallest subdataset");
        }
        Ok(())
    }

    pub fn phi_dims(&self) -> Vec<usize> {
        let mut d = vec![INPUT_DIM];
        d.extend(&self.phi_hidden);
        d.push(self.basis_dim);
        d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_f_loss: f64,
    pub val_f_loss: f64,
    pub cluster_metric: f64,
    pub discriminator_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingLog {
    /// Row 0 describes the untrained network.
    pub records: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn first(&self) -> Option<&EpochRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DaimlError> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r).map_err(|e| DaimlError::Io(e.to_string()))?;
        }
        w.flush().map_err(|e| DaimlError::Io(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), DaimlError> {
        let f = std::fs::File::create(path).map_err(|e| DaimlError::Io(e.to_string()))?;
        self.write_csv(f)
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, DaimlError> {
        let mut r = csv::Reader::from_reader(input);
        let records = r
            .deserialize()
            .collect::<Result<Vec<EpochRecord>, _>>()
            .map_err(|e| DaimlError::Io(e.to_string()))?;
        Ok(Self { records })
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub phi: Mlp<f64>,
    pub h: Mlp<f64>,
    pub log: TrainingLog,
}

/// One condition's data as column matrices.
struct Domain {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl Domain {
    fn len(&self) -> usize {
        self.x.ncols()
    }

    fn select(&self, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.x.select_columns(idx), self.y.select_columns(idx))
    }
}

fn domains(ds: &FlightDataset) -> Vec<Domain> {
    (0..ds.num_conditions())
        .map(|k| {
            let (x, y) = ds.matrices(k);
            Domain { x, y }
        })
        .collect()
}

/// Adapt-on-one-half, score-on-the-other split of one condition.
struct Split {
    adapt: (DMatrix<f64>, DMatrix<f64>),
    eval: (DMatrix<f64>, DMatrix<f64>),
}

/// Mean per-sample `‖y − φ a*‖²` over the splits, adapting each on its own
/// half first.
fn split_loss(phi: &Mlp<f64>, splits: &[Split], cfg: &DaimlConfig) -> Result<f64, DaimlError> {
    let mut total = 0.0;
    for s in splits {
        let fa = phi.infer(&s.adapt.0)?;
        let ls = least_squares_adapt(&fa, &s.adapt.1, cfg.damping, Some(cfg.gamma))?;
        let fe = phi.infer(&s.eval.0)?;
        let r = &s.eval.1 - ls.solution.predict(&fe);
        total += r.norm_squared() / s.eval.1.ncols() as f64;
    }
    Ok(total / splits.len() as f64)
}

/// Inter-centroid distance over intra-condition spread of adapted
/// coefficients on fixed batches.
fn cluster_metric(
    phi: &Mlp<f64>,
    batches: &[Vec<(DMatrix<f64>, DMatrix<f64>)>],
    cfg: &DaimlConfig,
) -> Result<f64, DaimlError> {
    let mut centroids = Vec::new();
    let mut spread = 0.0;
    for per_cond in batches {
        let coeffs = per_cond
            .iter()
            .map(|(x, y)| {
                let f = phi.infer(x)?;
                Ok(least_squares_adapt(&f, y, cfg.damping, Some(cfg.gamma))?
                    .solution
                    .a_star)
            })
            .collect::<Result<Vec<DVector<f64>>, DaimlError>>()?;
        let n = coeffs.len() as f64;
        let c = coeffs.iter().fold(DVector::zeros(coeffs[0].len()), |acc, a| acc + a) / n;
        spread += coeffs.iter().map(|a| (a - &c).norm()).sum::<f64>() / n;
        centroids.push(c);
    }
    let k = centroids.len();
    if k < 2 {
        return Ok(0.0);
    }
    let mut inter = 0.0;
    let mut pairs = 0.0;
    for i in 0..k {
        for j in i + 1..k {
            inter += (&centroids[i] - &centroids[j]).norm();
            pairs += 1.0;
        }
    }
    let intra = spread / k as f64;
    Ok((inter / pairs) / intra.max(1e-12))
}

/// Per-condition mean `‖y − φ a*‖²` of a trained basis on `dataset`,
/// adapting on even-indexed samples and scoring the odd ones.
pub fn adaptation_loss(
    phi: &Mlp<f64>,
    dataset: &FlightDataset,
    damping: f64,
    gamma: f64,
) -> Result<Vec<f64>, DaimlError> {
    let cfg = DaimlConfig {
        damping,
        gamma,
        ..DaimlConfig::default()
    };
    domains(dataset)
        .iter()
        .map(|d| split_loss(phi, std::slice::from_ref(&alternating_split(d)), &cfg))
        .collect()
}

fn alternating_split(d: &Domain) -> Split {
    let even: Vec<usize> = (0..d.len()).step_by(2).collect();
    let odd: Vec<usize> = (1..d.len()).step_by(2).collect();
    Split {
        adapt: d.select(&even),
        eval: d.select(&odd),
    }
}

fn disc_accuracy(phi: &Mlp<f64>, h: &Mlp<f64>, splits: &[Split]) -> Result<f64, DaimlError> {
    let mut hits = 0.0;
    let mut n = 0.0;
    for (k, s) in splits.iter().enumerate() {
        let logits = h.infer(&phi.infer(&s.eval.0)?)?;
        let labels = vec![k; logits.ncols()];
        hits += accuracy(&logits, &labels) * labels.len() as f64;
        n += labels.len() as f64;
    }
    Ok(hits / n)
}

/// With positive damping the Gram matrix can only lose definiteness
/// through overflow.
fn overflow_as_divergence(e: DaimlError, config: &DaimlConfig, epoch: usize, iteration: usize) -> DaimlError {
    match e {
        DaimlError::Ls(LsError::NotPositiveDefinite) if config.damping > 0.0 => {
            DaimlError::DivergedLoss { epoch, iteration }
        }
        other => other,
    }
}

/// Value and φ-gradient of one iteration's objective
/// `Σ‖y_B − φ(x_B) a*(B^a)‖² − α CE(h(φ(x_B)), k)`.
pub struct MetaStep {
    pub f_loss: f64,
    /// `f_loss − α CE`.
    pub objective: f64,
    pub grads: Gradients<f64>,
}

pub fn meta_gradient(
    phi: &Mlp<f64>,
    h: &Mlp<f64>,
    (xa, ya): (&DMatrix<f64>, &DMatrix<f64>),
    (xb, yb): (&DMatrix<f64>, &DMatrix<f64>),
    labels: &[usize],
    config: &DaimlConfig,
) -> Result<MetaStep, DaimlError> {
    let (fa, cache_a) = phi.forward(xa)?;
    let (fb, cache_b) = phi.forward(xb)?;
    if !fa.iter().chain(fb.iter()).all(|v| v.is_finite()) {
        return Ok(MetaStep {
            f_loss: f64::INFINITY,
            objective: f64::INFINITY,
            grads: Gradients::zeros_like(phi),
        });
    }
    let ls = least_squares_adapt(&fa, ya, config.damping, Some(config.gamma))?;
    let coeffs = ls.solution.coeffs();
    let resid = yb - coeffs.tr_mul(&fb);
    let f_loss = resid.norm_squared();
    let mut grad_fb = &coeffs * &resid * -2.0;
    let grad_a = &fb * resid.transpose() * -2.0;
    let grad_fa = ls.backward(&grad_a);
    let mut ce = 0.0;
    if config.alpha > 0.0 {
        let (logits, cache_h) = h.forward(&fb)?;
        let (loss, g_logits) = cross_entropy_batch(&logits, labels);
        let (_, g_in) = h.backward(&cache_h, &g_logits)?;
        grad_fb -= g_in * config.alpha;
        ce = loss;
    }
    let (mut grads, _) = phi.backward(&cache_a, &grad_fa)?;
    let (gb, _) = phi.backward(&cache_b, &grad_fb)?;
    grads.add_assign(&gb);
    Ok(MetaStep {
        f_loss,
        objective: f_loss - config.alpha * ce,
        grads,
    })
}

/// Trains φ and the discriminator on `train`, scoring each epoch on
/// `validation` (same condition order).
pub fn train(
    train: &FlightDataset,
    validation: &FlightDataset,
    config: &DaimlConfig,
) -> Result<TrainedModel, DaimlError> {
    train_with_observer(train, validation, config, |_, _| {})
}

/// [`train`] with a callback after every epoch (and once before training).
pub fn train_with_observer<F>(
    train: &FlightDataset,
    validation: &FlightDataset,
    config: &DaimlConfig,
    mut observer: F,
) -> Result<TrainedModel, DaimlError>
where
    F: FnMut(&EpochRecord, &Mlp<f64>),
{
    config.validate(train)?;
    if validation.num_conditions() == 0 || validation.subdatasets.iter().any(|d| d.len() < 2 * config.basis_dim) {
        return Err(DaimlError::Config("validation set too small".into()));
    }
    let k_count = train.num_conditions();
    let data = domains(train);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut phi = Mlp::he_uniform(&config.phi_dims(), Some(config.spectral_bound), &mut rng);
    phi.spectral_normalize();
    let mut h = Mlp::he_uniform(
        &[config.basis_dim, config.disc_hidden, k_count.max(2)],
        Some(config.disc_spectral_bound),
        &mut rng,
    );
    h.spectral_normalize();

    // fixed evaluation material
    let mut eval_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_e7a1);
    let probe: Vec<Split> = data
        .iter()
        .map(|d| {
            let n = config.probe_samples.min(d.len()) & !1;
            let idx = sample_indices(&mut eval_rng, d.len(), n);
            Split {
                adapt: d.select(&idx[..n / 2]),
                eval: d.select(&idx[n / 2..]),
            }
        })
        .collect();
    let val: Vec<Split> = domains(validation).iter().map(alternating_split).collect();
    let cluster_sets: Vec<Vec<_>> = data
        .iter()
        .map(|d| {
            (0..config.cluster_batches.max(2))
                .map(|_| d.select(&sample_indices(&mut eval_rng, d.len(), config.batch_adapt)))
                .collect()
        })
        .collect();

    let evaluate = |epoch: usize, phi: &Mlp<f64>, h: &Mlp<f64>| -> Result<EpochRecord, DaimlError> {
        Ok(EpochRecord {
            epoch,
            train_f_loss: split_loss(phi, &probe, config)?,
            val_f_loss: split_loss(phi, &val, config)?,
            cluster_metric: cluster_metric(phi, &cluster_sets, config)?,
            discriminator_acc: disc_accuracy(phi, h, &probe)?,
        })
    };

    let mut log = TrainingLog::default();
    let rec = evaluate(0, &phi, &h)?;
    observer(&rec, &phi);
    log.records.push(rec);

    let iters = config
        .iters_per_epoch
        .unwrap_or_else(|| train.len().div_ceil(config.batch_adapt + config.batch_train))
        .max(1);
    let mut opt_phi = Sgd::new(config.lr_phi, config.momentum);
    let mut opt_h = Sgd::new(config.lr_h, config.momentum);
    let mut best = f64::INFINITY;
    let mut since_best = 0;

    for epoch in 1..=config.epochs {
        for iteration in 0..iters {
            let k = rng.random_range(0..k_count);
            let d = &data[k];
            let idx = sample_indices(&mut rng, d.len(), config.batch_adapt + config.batch_train);
            let (xa, ya) = d.select(&idx[..config.batch_adapt]);
            let (xb, yb) = d.select(&idx[config.batch_adapt..]);

            let labels = vec![k; config.batch_train];
            let step = meta_gradient(&phi, &h, (&xa, &ya), (&xb, &yb), &labels, config)
                .map_err(|e| overflow_as_divergence(e, config, epoch, iteration))?;
            if !step.f_loss.is_finite() || !step.objective.is_finite() || !step.grads.is_finite() {
                return Err(DaimlError::DivergedLoss { epoch, iteration });
            }
            let grads = step.grads;
            opt_phi.step(&mut phi, &grads);
            phi.spectral_normalize();

            if rng.random::<f64>() <= config.eta {
                let feats = phi.infer(&xb)?;
                let (logits, cache_h) = h.forward(&feats)?;
                let (_, g_logits) = cross_entropy_batch(&logits, &labels);
                let (gh, _) = h.backward(&cache_h, &g_logits)?;
                opt_h.step(&mut h, &gh);
                h.spectral_normalize();
            }
        }
        let rec = evaluate(epoch, &phi, &h).map_err(|e| overflow_as_divergence(e, config, epoch, iters))?;
        if !rec.train_f_loss.is_finite() || !rec.val_f_loss.is_finite() {
            return Err(DaimlError::DivergedLoss {
                epoch,
                iteration: iters,
            });
        }
        observer(&rec, &phi);
        log.records.push(rec);
        if rec.val_f_loss < best {
            best = rec.val_f_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if config.patience > 0 && since_best >= config.patience {
                break;
            }
        }
    }
    Ok(TrainedModel { phi, h, log })
}
