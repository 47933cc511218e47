//! Online position controllers.
//!
//! Every controller produces a desired world-frame force `u` (N) which
//! [`force_to_attitude`] turns into a thrust/attitude setpoint for the inner
//! loop of the simulator. The position dynamics are treated as
//! `m q̈ = m g + u + f`, so all controllers share the feedforward
//! `m q̈_r − m g` and the feedback `−K s` and differ in how they estimate `f`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::nn::{Mlp, NnError};
use crate::scalar::Real;
use crate::sim::{AttitudeThrustCmd, SimState, VehicleParams};
use crate::traj::DesiredState;

/// Length of the learning input `x = [v, q_wxyz, pwm]`.
pub const INPUT_DIM: usize = 11;

/// Forces below this magnitude have no usable direction, N.
pub const MIN_FORCE: f64 = 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum ControlError {
    #[error("desired force {0} N is too small to define an attitude")]
    DegenerateForce(f64),
    #[error("innovation covariance is singular; R is too small")]
    SingularInnovation,
    #[error("basis has {got} columns, adaptive state expects {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("invalid gains: {0}")]
    InvalidGains(&'static str),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct ControllerGains<T: Real> {
    /// Feedback gain on `s`, N·s/m.
    pub k: Matrix3<T>,
    /// Composite-error gain Λ, 1/s.
    pub comp_gain: Matrix3<T>,
    /// Integral gain of the baseline, N/m.
    pub k_i: Matrix3<T>,
    /// Bound on the baseline's integral force, N.
    pub integral_clamp: T,
    /// Process noise scale; `Q = q I`.
    pub q: T,
    /// `q` used with a learned basis instead. Its features are larger than
    /// the unit regressor of NF-Constant.
    pub q_learned: T,
    /// Measurement noise density of `y`, N²·s.
    pub r: Matrix3<T>,
    /// Regularization λ of the adaptation, 1/s.
    pub lambda: T,
    /// INDI and L1 low-pass cutoff, Hz.
    pub filter_cutoff_hz: T,
    /// L1 predictor pole, 1/s.
    pub l1_predictor_rate: T,
}

const Q_LEARNED: f64 = 0.001;

impl<T: Real> ControllerGains<T> {
    /// Shared defaults for the given vehicle and label noise level.
    pub fn for_vehicle(params: &VehicleParams<T>, noise_sigma: T) -> Self {
        let m = params.mass;
        let sigma2 = (noise_sigma * noise_sigma).max(T::lit(1e-6));
        Self {
            k: Matrix3::identity() * (m * T::lit(6.0)),
            comp_gain: Matrix3::identity() * T::lit(4.0),
            k_i: Matrix3::identity() * (m * T::lit(6.0)),
            integral_clamp: T::lit(2.0) * m * params.gravity.norm(),
            q: T::lit(0.1),
            q_learned: T::lit(Q_LEARNED),
            r: Matrix3::identity() * sigma2,
            lambda: T::lit(0.01),
            filter_cutoff_hz: T::lit(5.0),
            l1_predictor_rate: T::lit(0.5),
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        for (m, name) in [
            (&self.k, "K must be symmetric positive definite"),
            (&self.comp_gain, "Λ must be symmetric positive definite"),
            (&self.r, "R must be symmetric positive definite"),
        ] {
            if !is_spd(m) {
                return Err(ControlError::InvalidGains(name));
            }
        }
        if !(self.q > T::zero()) || !(self.q_learned > T::zero()) {
            return Err(ControlError::InvalidGains("Q must be positive definite"));
        }
        if !(self.lambda >= T::zero()) || !(self.integral_clamp >= T::zero()) {
            return Err(ControlError::InvalidGains(
                "λ and the integral clamp must be non-negative",
            ));
        }
        if !(self.filter_cutoff_hz > T::zero()) || !(self.l1_predictor_rate > T::zero()) {
            return Err(ControlError::InvalidGains(
                "filter cutoff and predictor rate must be positive",
            ));
        }
        Ok(())
    }
}

fn is_spd<T: Real>(m: &Matrix3<T>) -> bool {
    (m - m.transpose()).amax() <= T::lit(1e-12) * m.amax() && m.cholesky().is_some()
}

/// Composite error and reference signals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompositeError<T: Real> {
    /// `s = q̇ − q̇_r`, m/s.
    pub s: Vector3<T>,
    pub qd_r: Vector3<T>,
    pub qdd_r: Vector3<T>,
    /// Position error `p − p_d`, m.
    pub p_err: Vector3<T>,
}

pub fn composite_error<T: Real>(
    state: &SimState<T>,
    desired: &DesiredState<T>,
    comp_gain: &Matrix3<T>,
) -> CompositeError<T> {
    let p_err = state.p - desired.pos_d;
    let v_err = state.v - desired.vel_d;
    CompositeError {
        s: v_err + comp_gain * p_err,
        qd_r: desired.vel_d - comp_gain * p_err,
        qdd_r: desired.acc_d - comp_gain * v_err,
        p_err,
    }
}

/// Nominal part shared by every controller: `m q̈_r − m g − K s`.
fn nominal_force<T: Real>(ce: &CompositeError<T>, gains: &ControllerGains<T>, params: &VehicleParams<T>) -> Vector3<T> {
    (ce.qdd_r - params.gravity) * params.mass - gains.k * ce.s
}

/// Learning input `x = [v, q_wxyz, pwm]`.
pub fn learning_input<T: Real>(state: &SimState<T>) -> DVector<T> {
    let q = state.quat_wxyz();
    DVector::from_vec(vec![
        state.v.x,
        state.v.y,
        state.v.z,
        q[0],
        q[1],
        q[2],
        q[3],
        state.pwm.x,
        state.pwm.y,
        state.pwm.z,
        state.pwm.w,
    ])
}

/// Regressor used by the composite adaptation.
#[derive(Debug, Clone)]
pub enum Basis<T: Real> {
    /// `φ = I₃`: a constant force estimate.
    Identity,
    /// `φ(x) = blockdiag(ψ(x)ᵀ, ψ(x)ᵀ, ψ(x)ᵀ)` for a trained network `ψ`.
    Learned(Arc<Mlp<T>>),
}

impl<T: Real> Basis<T> {
    /// Number of adapted coefficients.
    pub fn dim(&self) -> usize {
        match self {
            Basis::Identity => 3,
            Basis::Learned(net) => 3 * net.output_dim(),
        }
    }

    /// `3 × dim` regressor at learning input `x`.
    pub fn matrix(&self, x: &DVector<T>) -> Result<DMatrix<T>, ControlError> {
        match self {
            Basis::Identity => Ok(DMatrix::identity(3, 3)),
            Basis::Learned(net) => Ok(block_diag(&net.infer_one(x)?)),
        }
    }
}

/// Expands basis features `ψ` (length h) to the `3 × 3h` block regressor.
pub fn block_diag<T: Real>(psi: &DVector<T>) -> DMatrix<T> {
    let h = psi.len();
    let mut m = DMatrix::zeros(3, 3 * h);
    for axis in 0..3 {
        for j in 0..h {
            m[(axis, axis * h + j)] = psi[j];
        }
    }
    m
}

/// Coefficient estimate and its covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct AdaptiveState<T: Real> {
    pub a_hat: DVector<T>,
    pub p: DMatrix<T>,
}

impl<T: Real> AdaptiveState<T> {
    /// `â = 0`, `P = Q/(2λ)`, the stationary covariance with no excitation.
    /// Falls back to `P = Q · 1 s` when λ = 0.
    pub fn new(dim: usize, gains: &ControllerGains<T>) -> Self {
        let scale = if gains.lambda > T::zero() {
            gains.q / (T::lit(2.0) * gains.lambda)
        } else {
            gains.q
        };
        Self {
            a_hat: DVector::zeros(dim),
            p: DMatrix::identity(dim, dim) * scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.a_hat.len()
    }

    pub fn trace_p(&self) -> T {
        self.p.trace()
    }
}

/// One propagate/update step of the composite adaptation.
///
/// Propagation: `â⁻ = (1−λΔt) â`, `P⁻ = (1−λΔt)² P + QΔt`.
/// Update with `R_d = R/Δt` (the sampled form of the measurement noise
/// density): `K = P⁻φᵀ(φP⁻φᵀ + R_d)⁻¹`,
/// `â⁺ = â⁻ − K(φâ⁻ − y) + P⁻φᵀ s Δt` and the Joseph form
/// `P⁺ = (I−Kφ)P⁻(I−Kφ)ᵀ + K R_d Kᵀ`.
pub fn adapt_discrete<T: Real>(
    adapt: &AdaptiveState<T>,
    phi: &DMatrix<T>,
    y: &Vector3<T>,
    s: &Vector3<T>,
    dt: T,
    gains: &ControllerGains<T>,
) -> Result<AdaptiveState<T>, ControlError> {
    let n = adapt.dim();
    if phi.ncols() != n || phi.nrows() != 3 {
        return Err(ControlError::DimMismatch {
            expected: n,
            got: phi.ncols(),
        });
    }
    let decay = T::one() - gains.lambda * dt;
    let a_minus = &adapt.a_hat * decay;
    let mut p_minus = &adapt.p * (decay * decay);
    for i in 0..n {
        p_minus[(i, i)] += gains.q * dt;
    }
    let r_d = DMatrix::from_iterator(3, 3, gains.r.iter().map(|&v| v / dt));
    let pht = &p_minus * phi.transpose();
    let innovation_cov = phi * &pht + &r_d;
    let chol = innovation_cov.cholesky().ok_or(ControlError::SingularInnovation)?;
    // K = P⁻φᵀ S⁻¹, computed as (S⁻¹ φ P⁻)ᵀ
    let gain = chol.solve(&pht.transpose()).transpose();
    if !gain.iter().all(|v| v.finite()) {
        return Err(ControlError::SingularInnovation);
    }
    let y = DVector::from_column_slice(y.as_slice());
    let s = DVector::from_column_slice(s.as_slice());
    let innov = phi * &a_minus - y;
    let a_plus = &a_minus - &gain * innov + &pht * s * dt;
    let i_kh = DMatrix::identity(n, n) - &gain * phi;
    let p = &i_kh * &p_minus * i_kh.transpose() + &gain * r_d * gain.transpose();
    let p = (&p + p.transpose()) * T::lit(0.5);
    Ok(AdaptiveState { a_hat: a_plus, p })
}

/// Neural-Fly control law `u = m q̈_r − m g − K s − φ â`.
pub fn nf_control<T: Real>(
    state: &SimState<T>,
    desired: &DesiredState<T>,
    phi: &DMatrix<T>,
    adapt: &AdaptiveState<T>,
    gains: &ControllerGains<T>,
    params: &VehicleParams<T>,
) -> Vector3<T> {
    let ce = composite_error(state, desired, &gains.comp_gain);
    let f_hat = phi * &adapt.a_hat;
    nominal_force(&ce, gains, params) - Vector3::new(f_hat[0], f_hat[1], f_hat[2])
}

/// Force-equivalent integral `z = ∫ K_I s dt` of the baseline.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IntegralState<T: Real> {
    pub z: Vector3<T>,
}

/// Nonlinear baseline `u = m q̈_r − m g − K s − K_I ∫ s dt`. The integral is
/// advanced by `dt` and clamped to `‖z‖ ≤ integral_clamp` before use.
pub fn baseline_nonlinear<T: Real>(
    state: &SimState<T>,
    desired: &DesiredState<T>,
    gains: &ControllerGains<T>,
    params: &VehicleParams<T>,
    integral: &mut IntegralState<T>,
    dt: T,
) -> Vector3<T> {
    let ce = composite_error(state, desired, &gains.comp_gain);
    integral.z += gains.k_i * ce.s * dt;
    let norm = integral.z.norm();
    if norm > gains.integral_clamp {
        integral.z *= gains.integral_clamp / norm;
    }
    nominal_force(&ce, gains, params) - integral.z
}

/// Discrete first-order low-pass filter, exact for piecewise-constant input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowPass<T: Real> {
    pub cutoff_hz: T,
    pub value: Vector3<T>,
}

impl<T: Real> LowPass<T> {
    pub fn new(cutoff_hz: T) -> Self {
        Self {
            cutoff_hz,
            value: Vector3::zeros(),
        }
    }

    pub fn update(&mut self, input: &Vector3<T>, dt: T) -> Vector3<T> {
        let alpha = if self.cutoff_hz.as_f64().is_infinite() {
            T::one()
        } else {
            T::one() - (-T::two_pi() * self.cutoff_hz * dt).exp()
        };
        self.value += (input - self.value) * alpha;
        self.value
    }
}

/// Residual estimate of the incremental controller.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndiEstimator<T: Real> {
    pub filter: LowPass<T>,
}

impl<T: Real> IndiEstimator<T> {
    pub fn new(cutoff_hz: T) -> Self {
        Self {
            filter: LowPass::new(cutoff_hz),
        }
    }

    /// `f̂ ← lowpass(m a − m g − u_prev)`.
    pub fn update(&mut self, accel: &Vector3<T>, u_prev: &Vector3<T>, params: &VehicleParams<T>, dt: T) -> Vector3<T> {
        let raw = (accel - params.gravity) * params.mass - u_prev;
        self.filter.update(&raw, dt)
    }
}

/// INDI position law `u = m q̈_r − m g − K s − f̂`, with `f̂` refreshed from the
/// acceleration measurement and the force command in effect when it was taken.
pub fn indi_control<T: Real>(
    state: &SimState<T>,
    desired: &DesiredState<T>,
    accel_measurement: Option<(&Vector3<T>, &Vector3<T>)>,
    estimator: &mut IndiEstimator<T>,
    gains: &ControllerGains<T>,
    params: &VehicleParams<T>,
    dt: T,
) -> Vector3<T> {
    if let Some((accel, u_prev)) = accel_measurement {
        estimator.update(accel, u_prev, params, dt);
    }
    let ce = composite_error(state, desired, &gains.comp_gain);
    nominal_force(&ce, gains, params) - estimator.filter.value
}

/// Velocity predictor and piecewise-constant adaptation of the L1 augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L1Estimator<T: Real> {
    pub v_hat: Option<Vector3<T>>,
    /// Unfiltered estimate σ̂, N.
    pub sigma: Vector3<T>,
    pub filter: LowPass<T>,
    pub predictor_rate: T,
}

impl<T: Real> L1Estimator<T> {
    pub fn new(cutoff_hz: T, predictor_rate: T) -> Self {
        Self {
            v_hat: None,
            sigma: Vector3::zeros(),
            filter: LowPass::new(cutoff_hz),
            predictor_rate,
        }
    }

    /// Adaptation from the prediction error `ṽ = v̂ − v`:
    /// `σ̂ = −m (1 − a_s T_s) ṽ / T_s`, then `f̂ = lowpass(σ̂)`.
    pub fn adapt(&mut self, v: &Vector3<T>, params: &VehicleParams<T>, dt: T) -> Vector3<T> {
        let v_hat = *self.v_hat.get_or_insert(*v);
        let err = v_hat - v;
        self.sigma = -err * (params.mass * (T::one() - self.predictor_rate * dt) / dt);
        self.filter.update(&self.sigma, dt)
    }

    /// Advances the predictor `v̂̇ = g + (f_u + σ̂)/m − a_s ṽ` over one tick,
    /// with `f_u` the rotor thrust force.
    pub fn predict(&mut self, v: &Vector3<T>, thrust: &Vector3<T>, params: &VehicleParams<T>, dt: T) {
        let v_hat = self.v_hat.unwrap_or(*v);
        let err = v_hat - v;
        let v_dot = params.gravity + (thrust + self.sigma) / params.mass - err * self.predictor_rate;
        self.v_hat = Some(v_hat + v_dot * dt);
    }
}

/// L1-augmented baseline: the integral term is replaced by the filtered
/// adaptive estimate. Advances the predictor with the measured rotor thrust
/// `thrust`.
pub fn l1_control<T: Real>(
    state: &SimState<T>,
    desired: &DesiredState<T>,
    thrust: &Vector3<T>,
    estimator: &mut L1Estimator<T>,
    gains: &ControllerGains<T>,
    params: &VehicleParams<T>,
    dt: T,
) -> Vector3<T> {
    let f_hat = estimator.adapt(&state.v, params, dt);
    let ce = composite_error(state, desired, &gains.comp_gain);
    estimator.predict(&state.v, thrust, params, dt);
    nominal_force(&ce, gains, params) - f_hat
}

/// Thrust and attitude realizing force `u` at heading `yaw_d`.
///
/// The body z-axis is aligned with `u`; the body x-axis is the heading
/// direction projected onto the plane orthogonal to it. When `prev` is
/// given, the quaternion sign is chosen on the same hemisphere.
pub fn force_to_attitude<T: Real>(
    u: &Vector3<T>,
    yaw_d: T,
    params: &VehicleParams<T>,
    prev: Option<&UnitQuaternion<T>>,
) -> Result<AttitudeThrustCmd<T>, ControlError> {
    let norm = u.norm();
    if !(norm >= T::lit(MIN_FORCE)) {
        return Err(ControlError::DegenerateForce(norm.as_f64()));
    }
    let z = u / norm;
    let heading = Vector3::new(yaw_d.cos(), yaw_d.sin(), T::zero());
    let mut y = z.cross(&heading);
    if y.norm() < T::lit(1e-6) {
        // force along the heading: fall back to the lateral axis
        let lateral = Vector3::new(-yaw_d.sin(), yaw_d.cos(), T::zero());
        y = lateral - z * z.dot(&lateral);
    }
    let y = y.normalize();
    let x = y.cross(&z);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
    let mut q = UnitQuaternion::from_rotation_matrix(&rot);
    if let Some(p) = prev {
        if p.quaternion().dot(q.quaternion()) < T::zero() {
            q = UnitQuaternion::new_unchecked(-q.into_inner());
        }
    }
    Ok(AttitudeThrustCmd {
        thrust: norm.min(params.thrust_max),
        attitude_d: q,
    })
}

/// Residual measurement available to a controller at a tick, taken
/// `lag_ticks` control periods in the past.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement<T: Real> {
    /// Residual force `y`, N.
    pub y: Vector3<T>,
    /// Acceleration, m/s².
    pub accel: Vector3<T>,
    /// Learning input at the measurement instant.
    pub x: DVector<T>,
    pub lag_ticks: usize,
}

/// Inputs of one control tick.
#[derive(Debug, Clone, Copy)]
pub struct ControlContext<'a, T: Real> {
    pub state: &'a SimState<T>,
    pub desired: &'a DesiredState<T>,
    pub measurement: Option<&'a Measurement<T>>,
    /// Thrust force the rotors produce now, from measured rotor speeds, N.
    pub thrust: Vector3<T>,
    /// Control period, s.
    pub dt: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControllerKind {
    /// Learned basis with composite adaptation.
    Nf,
    /// Composite adaptation with `φ = I`.
    NfConstant,
    Baseline,
    Indi,
    L1,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [
        ControllerKind::Nf,
        ControllerKind::NfConstant,
        ControllerKind::Baseline,
        ControllerKind::Indi,
        ControllerKind::L1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Nf => "nf",
            ControllerKind::NfConstant => "nf-constant",
            ControllerKind::Baseline => "baseline",
            ControllerKind::Indi => "indi",
            ControllerKind::L1 => "l1",
        }
    }

    pub fn needs_basis(self) -> bool {
        self == ControllerKind::Nf
    }
}

impl std::fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ControllerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ControllerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown controller `{s}`"))
    }
}

/// A stateful position controller running at a fixed rate.
pub trait Controller<T: Real>: Send {
    fn kind(&self) -> ControllerKind;

    /// Desired force for this tick, N.
    fn command(&mut self, ctx: &ControlContext<'_, T>) -> Result<Vector3<T>, ControlError>;

    /// Residual force the last command compensated, N.
    fn force_estimate(&self) -> Vector3<T>;

    fn adaptive_state(&self) -> Option<&AdaptiveState<T>> {
        None
    }

    /// Back to the cold-start state.
    fn reset(&mut self);
}

/// Neural-Fly and NF-Constant.
#[derive(Debug, Clone)]
pub struct NeuralFly<T: Real> {
    pub basis: Basis<T>,
    pub gains: ControllerGains<T>,
    pub params: VehicleParams<T>,
    pub adapt: AdaptiveState<T>,
    f_hat: Vector3<T>,
}

impl<T: Real> NeuralFly<T> {
    /// With a learned basis, `gains.q` is replaced by `gains.q_learned`.
    pub fn new(basis: Basis<T>, gains: ControllerGains<T>, params: VehicleParams<T>) -> Self {
        let gains = match basis {
            Basis::Learned(_) => ControllerGains {
                q: gains.q_learned,
                ..gains
            },
            Basis::Identity => gains,
        };
        let adapt = AdaptiveState::new(basis.dim(), &gains);
        Self {
            basis,
            gains,
            params,
            adapt,
            f_hat: Vector3::zeros(),
        }
    }
}

impl<T: Real> Controller<T> for NeuralFly<T> {
    fn kind(&self) -> ControllerKind {
        match self.basis {
            Basis::Identity => ControllerKind::NfConstant,
            Basis::Learned(_) => ControllerKind::Nf,
        }
    }

    fn command(&mut self, ctx: &ControlContext<'_, T>) -> Result<Vector3<T>, ControlError> {
        if let Some(m) = ctx.measurement {
            let ce = composite_error(ctx.state, ctx.desired, &self.gains.comp_gain);
            let phi_m = self.basis.matrix(&m.x)?;
            self.adapt = adapt_discrete(&self.adapt, &phi_m, &m.y, &ce.s, ctx.dt, &self.gains)?;
        }
        let phi = self.basis.matrix(&learning_input(ctx.state))?;
        let f = &phi * &self.adapt.a_hat;
        self.f_hat = Vector3::new(f[0], f[1], f[2]);
        Ok(nf_control(
            ctx.state,
            ctx.desired,
            &phi,
            &self.adapt,
            &self.gains,
            &self.params,
        ))
    }

    fn force_estimate(&self) -> Vector3<T> {
        self.f_hat
    }

    fn adaptive_state(&self) -> Option<&AdaptiveState<T>> {
        Some(&self.adapt)
    }

    fn reset(&mut self) {
        self.adapt = AdaptiveState::new(self.basis.dim(), &self.gains);
        self.f_hat = Vector3::zeros();
    }
}

#[derive(Debug, Clone)]
pub struct Baseline<T: Real> {
    pub gains: ControllerGains<T>,
    pub params: VehicleParams<T>,
    pub integral: IntegralState<T>,
}

impl<T: Real> Baseline<T> {
    pub fn new(gains: ControllerGains<T>, params: VehicleParams<T>) -> Self {
        Self {
            gains,
            params,
            integral: IntegralState::default(),
        }
    }
}

impl<T: Real> Controller<T> for Baseline<T> {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Baseline
    }

    fn command(&mut self, ctx: &ControlContext<'_, T>) -> Result<Vector3<T>, ControlError> {
        Ok(baseline_nonlinear(
            ctx.state,
            ctx.desired,
            &self.gains,
            &self.params,
            &mut self.integral,
            ctx.dt,
        ))
    }

    fn force_estimate(&self) -> Vector3<T> {
        self.integral.z
    }

    fn reset(&mut self) {
        self.integral = IntegralState::default();
    }
}

#[derive(Debug, Clone)]
pub struct Indi<T: Real> {
    pub gains: ControllerGains<T>,
    pub params: VehicleParams<T>,
    pub estimator: IndiEstimator<T>,
}

impl<T: Real> Indi<T> {
    pub fn new(gains: ControllerGains<T>, params: VehicleParams<T>) -> Self {
        Self {
            estimator: IndiEstimator::new(gains.filter_cutoff_hz),
            gains,
            params,
        }
    }
}

impl<T: Real> Controller<T> for Indi<T> {
    fn kind(&self) -> ControllerKind {
        ControllerKind::Indi
    }

    fn command(&mut self, ctx: &ControlContext<'_, T>) -> Result<Vector3<T>, ControlError> {
        // the thrust in effect at the measurement instant, recovered from the
        // residual measurement
        let prev = ctx
            .measurement
            .map(|m| (m, (m.accel - self.params.gravity) * self.params.mass - m.y));
        Ok(indi_control(
            ctx.state,
            ctx.desired,
            prev.as_ref().map(|(m, u)| (&m.accel, u)),
            &mut self.estimator,
            &self.gains,
            &self.params,
            ctx.dt,
        ))
    }

    fn force_estimate(&self) -> Vector3<T> {
        self.estimator.filter.value
    }

    fn reset(&mut self) {
        self.estimator = IndiEstimator::new(self.gains.filter_cutoff_hz);
    }
}

#[derive(Debug, Clone)]
pub struct L1<T: Real> {
    pub gains: ControllerGains<T>,
    pub params: VehicleParams<T>,
    pub estimator: L1Estimator<T>,
}

impl<T: Real> L1<T> {
    pub fn new(gains: ControllerGains<T>, params: VehicleParams<T>) -> Self {
        Self {
            estimator: L1Estimator::new(gains.filter_cutoff_hz, gains.l1_predictor_rate),
            gains,
            params,
        }
    }
}

impl<T: Real> Controller<T> for L1<T> {
    fn kind(&self) -> ControllerKind {
        ControllerKind::L1
    }

    fn command(&mut self, ctx: &ControlContext<'_, T>) -> Result<Vector3<T>, ControlError> {
        Ok(l1_control(
            ctx.state,
            ctx.desired,
            &ctx.thrust,
            &mut self.estimator,
            &self.gains,
            &self.params,
            ctx.dt,
        ))
    }

    fn force_estimate(&self) -> Vector3<T> {
        self.estimator.filter.value
    }

    fn reset(&mut self) {
        self.estimator = L1Estimator::new(self.gains.filter_cutoff_hz, self.gains.l1_predictor_rate);
    }
}

/// Builds a cold-started controller. `basis` is required for
/// [`ControllerKind::Nf`] and ignored otherwise.
pub fn build_controller<T: Real>(
    kind: ControllerKind,
    gains: ControllerGains<T>,
    params: VehicleParams<T>,
    basis: Option<Arc<Mlp<T>>>,
) -> Option<Box<dyn Controller<T>>> {
    Some(match kind {
        ControllerKind::Nf => Box::new(NeuralFly::new(Basis::Learned(basis?), gains, params)),
        ControllerKind::NfConstant => Box::new(NeuralFly::new(Basis::Identity, gains, params)),
        ControllerKind::Baseline => Box::new(Baseline::new(gains, params)),
        ControllerKind::Indi => Box::new(Indi::new(gains, params)),
        ControllerKind::L1 => Box::new(L1::new(gains, params)),
    })
}

/// One row of per-tick controller telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct TelemetryRow {
    pub t: f64,
    pub p_err: [f64; 3],
    pub s: [f64; 3],
    pub a_hat: Vec<f64>,
    pub trace_p: f64,
    pub f_true: [f64; 3],
    pub f_hat: [f64; 3],
}

/// Writes telemetry with columns `t, p_err_*, s_*, a_0.., trace_p, f_true_*,
/// f_hat_*`. All rows must carry the same number of coefficients.
pub fn write_telemetry_csv<W: std::io::Write>(out: W, rows: &[TelemetryRow]) -> csv::Result<()> {
    let n = rows.first().map_or(0, |r| r.a_hat.len());
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = vec!["t".into()];
    for prefix in ["p_err", "s"] {
        header.extend(["x", "y", "z"].iter().map(|a| format!("{prefix}_{a}")));
    }
    header.extend((0..n).map(|i| format!("a_{i}")));
    header.push("trace_p".into());
    for prefix in ["f_true", "f_hat"] {
        header.extend(["x", "y", "z"].iter().map(|a| format!("{prefix}_{a}")));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.t];
        rec.extend(r.p_err);
        rec.extend(r.s);
        rec.extend(&r.a_hat);
        rec.push(r.trace_p);
        rec.extend(r.f_true);
        rec.extend(r.f_hat);
        w.write_record(rec.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
