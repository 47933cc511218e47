//! Quadrotor rigid-body simulator with a synthetic aerodynamic residual.
//!
//! The vehicle is an X-configuration quadrotor. Each physics step holds the
//! rotor command constant (zero-order hold), integrates translational,
//! rotational and first-order motor dynamics with classic RK4, and
//! renormalizes the attitude quaternion. Position dynamics follow
//! `m v̇ = m g + R f_u + f`, where `f` is the residual force produced by
//! [`residual_force`].

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::wind::{WindCondition, WindError};

/// Largest physics step accepted by [`Simulator::step`], s.
pub const MAX_DT: f64 = 2e-3;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SimError {
    #[error("state became non-finite at t = {t} s")]
    NonFiniteState { t: f64 },
    #[error("physics step {0} s outside (0, {MAX_DT}]")]
    InvalidStep(f64),
    #[error(transparent)]
    Wind(#[from] WindError),
    #[error("invalid vehicle parameters: {0}")]
    InvalidParams(&'static str),
}

/// Proportional and derivative gains of the inner attitude loop, expressed as
/// angular accelerations per rad and per rad/s (scaled by the inertia).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct AttitudeGains<T: Real> {
    pub kp: Vector3<T>,
    pub kd: Vector3<T>,
}

impl<T: Real> AttitudeGains<T> {
    /// Critically damped gains with natural frequency `omega_n` on every axis.
    pub fn critically_damped(omega_n: T) -> Self {
        let two = T::lit(2.0);
        Self {
            kp: Vector3::repeat(omega_n * omega_n),
            kd: Vector3::repeat(two * omega_n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct VehicleParams<T: Real> {
    /// kg
    pub mass: T,
    /// kg·m²
    pub inertia: Matrix3<T>,
    /// m/s²
    pub gravity: Vector3<T>,
    /// Total thrust with every rotor saturated, N.
    pub thrust_max: T,
    /// Per-axis body torque limit, N·m.
    pub torque_max: T,
    pub attitude_gains: AttitudeGains<T>,
    /// s
    pub motor_time_constant: T,
    /// Rotor distance from the center, m.
    pub arm_length: T,
    /// Reaction torque per newton of rotor thrust, m.
    pub yaw_moment_coeff: T,
}

impl<T: Real> Default for VehicleParams<T> {
    fn default() -> Self {
        let mass = T::lit(2.5);
        Self {
            mass,
            inertia: Matrix3::from_diagonal(&Vector3::new(T::lit(0.03), T::lit(0.03), T::lit(0.05))),
            gravity: Vector3::new(T::zero(), T::zero(), T::lit(-9.81)),
            // thrust-to-weight 2.2
            thrust_max: T::lit(2.2 * 9.81) * mass,
            torque_max: T::lit(3.0),
            attitude_gains: AttitudeGains::critically_damped(T::lit(25.0)),
            motor_time_constant: T::lit(0.01),
            arm_length: T::lit(0.28),
            yaw_moment_coeff: T::lit(0.016),
        }
    }
}

impl<T: Real> VehicleParams<T> {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.mass > T::zero()) {
            return Err(SimError::InvalidParams("mass must be positive"));
        }
        let j = &self.inertia;
        if (j - j.transpose()).amax() > T::lit(1e-12) * j.amax() {
            return Err(SimError::InvalidParams("inertia must be symmetric"));
        }
        if j.cholesky().is_none() {
            return Err(SimError::InvalidParams("inertia must be positive definite"));
        }
        if !(self.thrust_max > self.mass * self.gravity.norm()) {
            return Err(SimError::InvalidParams("thrust-to-weight must exceed 1"));
        }
        if !(self.torque_max > T::zero()) || !(self.arm_length > T::zero()) {
            return Err(SimError::InvalidParams("torque limit and arm length must be positive"));
        }
        if !(self.yaw_moment_coeff > T::zero()) || self.motor_time_constant < T::zero() {
            return Err(SimError::InvalidParams("bad rotor constants"));
        }
        Ok(())
    }

    pub fn hover_thrust(&self) -> T {
        self.mass * self.gravity.norm()
    }

    pub fn rotor_thrust_max(&self) -> T {
        self.thrust_max / T::lit(4.0)
    }

    /// Maps rotor thrusts to `[T, τx, τy, τz]`.
    ///
    /// Rotors sit at `(±d, ±d)` with `d = arm/√2`; rotors 1 and 2 spin
    /// counter-clockwise, 3 and 4 clockwise.
    pub fn allocation(&self) -> Matrix4<T> {
        let d = self.arm_length / T::lit(std::f64::consts::SQRT_2);
        let c = self.yaw_moment_coeff;
        let one = T::one();
        Matrix4::new(
            one, one, one, one, //
            d, -d, -d, d, //
            -d, d, -d, d, //
            c, c, -c, -c,
        )
    }

    /// Inverse of [`Self::allocation`]; rows of the allocation are orthogonal.
    pub fn mixer(&self) -> Matrix4<T> {
        let d = self.arm_length / T::lit(std::f64::consts::SQRT_2);
        let c = self.yaw_moment_coeff;
        let four = T::lit(4.0);
        let scale = Matrix4::from_diagonal(&Vector4::new(
            T::one() / four,
            T::one() / (four * d * d),
            T::one() / (four * d * d),
            T::one() / (four * c * c),
        ));
        self.allocation().transpose() * scale
    }
}

/// Ground-truth aerodynamic residual model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct ResidualModelParams<T: Real> {
    /// N·s/m
    pub linear_drag: Matrix3<T>,
    /// N·s²/m²
    pub quad_drag: T,
    /// Gain from body tilt × relative airflow to force.
    pub attitude_coupling: T,
    /// Gain on mean rotor signal × relative airflow.
    pub rotor_coupling: T,
    /// Standard deviation of label noise, N.
    pub noise_sigma: T,
}

impl<T: Real> Default for ResidualModelParams<T> {
    fn default() -> Self {
        Self {
            linear_drag: Matrix3::from_diagonal(&Vector3::new(T::lit(0.25), T::lit(0.25), T::lit(0.40))),
            quad_drag: T::lit(0.05),
            attitude_coupling: T::lit(0.3),
            rotor_coupling: T::lit(0.2),
            noise_sigma: T::lit(0.05),
        }
    }
}

impl<T: Real> ResidualModelParams<T> {
    /// All terms off: the vehicle flies in vacuum.
    pub fn disabled() -> Self {
        Self {
            linear_drag: Matrix3::zeros(),
            quad_drag: T::zero(),
            attitude_coupling: T::zero(),
            rotor_coupling: T::zero(),
            noise_sigma: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let finite = self.linear_drag.iter().all(|v| v.finite())
            && [
                self.quad_drag,
                self.attitude_coupling,
                self.rotor_coupling,
                self.noise_sigma,
            ]
            .iter()
            .all(|v| v.finite());
        if !finite || self.noise_sigma < T::zero() {
            return Err(SimError::InvalidParams(
                "residual model terms must be finite and the noise σ non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct SimState<T: Real> {
    pub p: Vector3<T>,
    pub v: Vector3<T>,
    pub q_att: UnitQuaternion<T>,
    /// Body rates, rad/s.
    pub omega: Vector3<T>,
    /// Normalized rotor signals in [0, 1], after the motor lag.
    pub pwm: Vector4<T>,
    pub t: T,
}

impl<T: Real> SimState<T> {
    pub fn at_rest(p: Vector3<T>) -> Self {
        Self {
            p,
            v: Vector3::zeros(),
            q_att: UnitQuaternion::identity(),
            omega: Vector3::zeros(),
            pwm: Vector4::zeros(),
            t: T::zero(),
        }
    }

    /// Level, motionless, with rotors already spun up to hover.
    pub fn hover(p: Vector3<T>, params: &VehicleParams<T>) -> Self {
        let level = params.hover_thrust() / T::lit(4.0) / params.rotor_thrust_max();
        Self {
            pwm: Vector4::repeat(level),
            ..Self::at_rest(p)
        }
    }

    pub fn is_finite(&self) -> bool {
        self.p
            .iter()
            .chain(self.v.iter())
            .chain(self.omega.iter())
            .chain(self.pwm.iter())
            .all(|x| x.finite())
            && self.q_att.coords.iter().all(|x| x.finite())
            && self.t.finite()
    }

    /// Rotation matrix body → world.
    pub fn rotation(&self) -> Matrix3<T> {
        self.q_att.to_rotation_matrix().into_inner()
    }

    pub fn body_z(&self) -> Vector3<T> {
        self.q_att * Vector3::z()
    }

    /// Quaternion components in scalar-first order.
    pub fn quat_wxyz(&self) -> [T; 4] {
        let q = self.q_att.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn mean_pwm(&self) -> T {
        self.pwm.sum() / T::lit(4.0)
    }
}

/// Output of the position controller: collective thrust and desired attitude.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct AttitudeThrustCmd<T: Real> {
    /// N
    pub thrust: T,
    pub attitude_d: UnitQuaternion<T>,
}

/// What drives the airframe during one physics step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Actuation<T: Real> {
    /// Commanded normalized rotor signals; the motor lag applies.
    Rotors(Vector4<T>),
    /// Direct body wrench, bypassing rotors and motor lag.
    Wrench { thrust: T, torque: Vector3<T> },
}

/// Residual force acting on the vehicle, N.
///
/// `f = −D₁ v_r − d₂ ‖v_r‖ v_r + c_att (t_b × v_r) + c_rot · mean(pwm) · v_r`,
/// with `v_r = v − v_wind(t)` and `t_b` the horizontal projection of the body
/// z-axis (zero when level).
pub fn residual_force<T: Real>(
    state: &SimState<T>,
    wind: &WindCondition<T>,
    params: &ResidualModelParams<T>,
) -> Result<Vector3<T>, WindError> {
    let v_rel = state.v - wind.velocity(state.t)?;
    Ok(residual_from_parts(&v_rel, &state.body_z(), state.mean_pwm(), params))
}

fn residual_from_parts<T: Real>(
    v_rel: &Vector3<T>,
    body_z: &Vector3<T>,
    mean_pwm: T,
    params: &ResidualModelParams<T>,
) -> Vector3<T> {
    let tilt = Vector3::new(body_z.x, body_z.y, T::zero());
    -(params.linear_drag * v_rel) - v_rel * (params.quad_drag * v_rel.norm())
        + tilt.cross(v_rel) * params.attitude_coupling
        + v_rel * (params.rotor_coupling * mean_pwm)
}

/// Noisy residual label `y = f + ε`, `ε ~ N(0, σ² I)`.
pub fn measure_residual<T: Real, R: Rng + ?Sized>(
    state: &SimState<T>,
    wind: &WindCondition<T>,
    params: &ResidualModelParams<T>,
    rng: &mut R,
) -> Result<Vector3<T>, WindError> {
    let f = residual_force(state, wind, params)?;
    Ok(f + gaussian_vector(params.noise_sigma, rng))
}

/// Isotropic Gaussian noise. Always draws three samples so RNG streams stay
/// aligned regardless of `sigma`.
pub fn gaussian_vector<T: Real, R: Rng + ?Sized>(sigma: T, rng: &mut R) -> Vector3<T> {
    let mut draw = || {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z) * sigma
    };
    Vector3::new(draw(), draw(), draw())
}

/// Saturation-aware rotor mixing. Roll/pitch come first: their rotor spread
/// is shrunk to fit `[0, 1]` and the collective shifted to make room. Yaw
/// gets whatever margin is left.
fn allocate_with_priority<T: Real>(collective: T, roll_pitch: Vector4<T>, yaw: Vector4<T>) -> Vector4<T> {
    let (lo, hi) = (roll_pitch.min(), roll_pitch.max());
    let spread = hi - lo;
    let rp = if spread > T::one() {
        roll_pitch / spread
    } else {
        roll_pitch
    };
    let c = collective.max(-rp.min()).min(T::one() - rp.max());
    let base = rp.add_scalar(c);
    let mut scale = T::one();
    for i in 0..4 {
        let y = yaw[i];
        if y > T::zero() {
            scale = scale.min((T::one() - base[i]).max(T::zero()) / y);
        } else if y < T::zero() {
            scale = scale.min(base[i].max(T::zero()) / -y);
        }
    }
    (base + yaw * scale).map(|x| x.max(T::zero()).min(T::one()))
}

#[derive(Clone, Copy)]
struct Deriv<T: Real> {
    p: Vector3<T>,
    v: Vector3<T>,
    q: Quaternion<T>,
    omega: Vector3<T>,
    pwm: Vector4<T>,
}

#[derive(Clone, Copy)]
struct Raw<T: Real> {
    p: Vector3<T>,
    v: Vector3<T>,
    q: Quaternion<T>,
    omega: Vector3<T>,
    pwm: Vector4<T>,
}

impl<T: Real> Raw<T> {
    fn advanced(&self, k: &Deriv<T>, h: T) -> Self {
        Self {
            p: self.p + k.p * h,
            v: self.v + k.v * h,
            q: self.q + k.q * h,
            omega: self.omega + k.omega * h,
            pwm: self.pwm + k.pwm * h,
        }
    }
}

/// Fixed-step quadrotor simulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct Simulator<T: Real> {
    pub vehicle: VehicleParams<T>,
    pub residual: ResidualModelParams<T>,
}

impl<T: Real> Simulator<T> {
    pub fn new(vehicle: VehicleParams<T>, residual: ResidualModelParams<T>) -> Result<Self, SimError> {
        vehicle.validate()?;
        Ok(Self { vehicle, residual })
    }

    /// Body torque from the quaternion-error PD loop, N·m.
    pub fn attitude_torque(&self, state: &SimState<T>, attitude_d: &UnitQuaternion<T>) -> Vector3<T> {
        let vp = &self.vehicle;
        let q_err = attitude_d.inverse() * state.q_att;
        let q = q_err.quaternion();
        let sign = if q.w < T::zero() { -T::one() } else { T::one() };
        let e = q.imag() * (T::lit(2.0) * sign);
        let alpha = -vp.attitude_gains.kp.component_mul(&e) - vp.attitude_gains.kd.component_mul(&state.omega);
        let jw = vp.inertia * state.omega;
        let tau = vp.inertia * alpha + state.omega.cross(&jw);
        tau.map(|x| x.max(-vp.torque_max).min(vp.torque_max))
    }

    /// Rotor command for a thrust/attitude setpoint.
    pub fn rotor_command(&self, state: &SimState<T>, cmd: &AttitudeThrustCmd<T>) -> Vector4<T> {
        let vp = &self.vehicle;
        let thrust = cmd.thrust.max(T::zero()).min(vp.thrust_max);
        let tau = self.attitude_torque(state, &cmd.attitude_d);
        let mix = vp.mixer() / vp.rotor_thrust_max();
        allocate_with_priority(
            thrust / vp.thrust_max,
            mix * Vector4::new(T::zero(), tau.x, tau.y, T::zero()),
            mix * Vector4::new(T::zero(), T::zero(), T::zero(), tau.z),
        )
    }

    /// Advances one physics step under a thrust/attitude command.
    pub fn step(
        &self,
        state: &SimState<T>,
        cmd: &AttitudeThrustCmd<T>,
        wind: &WindCondition<T>,
        dt: T,
    ) -> Result<SimState<T>, SimError> {
        let rotors = self.rotor_command(state, cmd);
        self.integrate(state, Actuation::Rotors(rotors), wind, dt)
    }

    /// Collective thrust (N) and body torque (N·m) produced by rotor signals.
    pub fn rotor_wrench(&self, pwm: &Vector4<T>) -> (T, Vector3<T>) {
        let w = self.vehicle.allocation() * (pwm * self.vehicle.rotor_thrust_max());
        (w.x, Vector3::new(w.y, w.z, w.w))
    }

    /// Thrust force `R f_u` in the world frame, N.
    pub fn thrust_force(&self, state: &SimState<T>) -> Vector3<T> {
        let (thrust, _) = self.rotor_wrench(&state.pwm);
        state.body_z() * thrust
    }

    fn derivative(&self, x: &Raw<T>, t: T, act: &Actuation<T>, wind: &WindCondition<T>) -> Result<Deriv<T>, SimError> {
        let vp = &self.vehicle;
        let q_unit = UnitQuaternion::new_normalize(x.q);
        let body_z = q_unit * Vector3::z();
        let (thrust, torque, pwm_dot) = match act {
            Actuation::Rotors(cmd) => {
                let (thrust, torque) = self.rotor_wrench(&x.pwm);
                let pwm_dot = if vp.motor_time_constant > T::zero() {
                    (cmd - x.pwm) / vp.motor_time_constant
                } else {
                    Vector4::zeros()
                };
                (thrust, torque, pwm_dot)
            }
            Actuation::Wrench { thrust, torque } => (*thrust, *torque, Vector4::zeros()),
        };
        let v_rel = x.v - wind.velocity(t)?;
        let mean_pwm = x.pwm.sum() / T::lit(4.0);
        let f_res = residual_from_parts(&v_rel, &body_z, mean_pwm, &self.residual);
        let v_dot = vp.gravity + (body_z * thrust + f_res) / vp.mass;
        let q_dot = x.q * Quaternion::from_imag(x.omega) * T::lit(0.5);
        let jw = vp.inertia * x.omega;
        let inv_j = vp
            .inertia
            .try_inverse()
            .ok_or(SimError::InvalidParams("singular inertia"))?;
        let omega_dot = inv_j * (jw.cross(&x.omega) + torque);
        Ok(Deriv {
            p: x.v,
            v: v_dot,
            q: q_dot,
            omega: omega_dot,
            pwm: pwm_dot,
        })
    }

    /// One RK4 step under an explicit actuation.
    pub fn integrate(
        &self,
        state: &SimState<T>,
        act: Actuation<T>,
        wind: &WindCondition<T>,
        dt: T,
    ) -> Result<SimState<T>, SimError> {
        if !(dt > T::zero() && dt <= T::lit(MAX_DT)) {
            return Err(SimError::InvalidStep(dt.as_f64()));
        }
        let mut x = Raw {
            p: state.p,
            v: state.v,
            q: *state.q_att.quaternion(),
            omega: state.omega,
            pwm: state.pwm,
        };
        if let Actuation::Rotors(cmd) = act {
            if self.vehicle.motor_time_constant == T::zero() {
                x.pwm = cmd;
            }
        }
        let half = dt / T::lit(2.0);
        let t = state.t;
        let k1 = self.derivative(&x, t, &act, wind)?;
        let k2 = self.derivative(&x.advanced(&k1, half), t + half, &act, wind)?;
        let k3 = self.derivative(&x.advanced(&k2, half), t + half, &act, wind)?;
        let k4 = self.derivative(&x.advanced(&k3, dt), t + dt, &act, wind)?;
        let two = T::lit(2.0);
        let sixth = dt / T::lit(6.0);
        let comb = Deriv {
            p: k1.p + k2.p * two + k3.p * two + k4.p,
            v: k1.v + k2.v * two + k3.v * two + k4.v,
            q: k1.q + k2.q * two + k3.q * two + k4.q,
            omega: k1.omega + k2.omega * two + k3.omega * two + k4.omega,
            pwm: k1.pwm + k2.pwm * two + k3.pwm * two + k4.pwm,
        };
        let next = x.advanced(&comb, sixth);
        let out = SimState {
            p: next.p,
            v: next.v,
            q_att: UnitQuaternion::new_normalize(next.q),
            omega: next.omega,
            pwm: next.pwm.map(|u| u.max(T::zero()).min(T::one())),
            t: t + dt,
        };
        if !out.is_finite() {
            return Err(SimError::NonFiniteState { t: out.t.as_f64() });
        }
        Ok(out)
    }

    /// World-frame acceleration at the current state for the given rotors,
    /// m/s². Used for ground-truth checks.
    pub fn acceleration(&self, state: &SimState<T>, wind: &WindCondition<T>) -> Result<Vector3<T>, SimError> {
        let f = residual_force(state, wind, &self.residual)?;
        Ok(self.vehicle.gravity + (self.thrust_force(state) + f) / self.vehicle.mass)
    }
}

/// One row of an exported flight trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub t: f64,
    pub p: [f64; 3],
    pub v: [f64; 3],
    pub q_wxyz: [f64; 4],
    pub omega: [f64; 3],
    pub pwm: [f64; 4],
    pub f_true: [f64; 3],
    pub y: [f64; 3],
}

impl TraceRow {
    pub const HEADER: [&'static str; 24] = [
        "t", "p_x", "p_y", "p_z", "v_x", "v_y", "v_z", "q_w", "q_x", "q_y", "q_z", "omega_x", "omega_y", "omega_z",
        "pwm_1", "pwm_2", "pwm_3", "pwm_4", "f_true_x", "f_true_y", "f_true_z", "y_x", "y_y", "y_z",
    ];

    pub fn new<T: Real>(state: &SimState<T>, f_true: &Vector3<T>, y: &Vector3<T>) -> Self {
        let v3 = |v: &Vector3<T>| [v.x.as_f64(), v.y.as_f64(), v.z.as_f64()];
        let q = state.quat_wxyz();
        Self {
            t: state.t.as_f64(),
            p: v3(&state.p),
            v: v3(&state.v),
            q_wxyz: q.map(|c| c.as_f64()),
            omega: v3(&state.omega),
            pwm: [0, 1, 2, 3].map(|i| state.pwm[i].as_f64()),
            f_true: v3(f_true),
            y: v3(y),
        }
    }

    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(24);
        out.push(self.t);
        out.extend_from_slice(&self.p);
        out.extend_from_slice(&self.v);
        out.extend_from_slice(&self.q_wxyz);
        out.extend_from_slice(&self.omega);
        out.extend_from_slice(&self.pwm);
        out.extend_from_slice(&self.f_true);
        out.extend_from_slice(&self.y);
        out
    }
}

pub fn write_trace_csv<W: std::io::Write>(out: W, rows: &[TraceRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TraceRow::HEADER)?;
    for row in rows {
        w.write_record(row.values().iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wind::WindCondition;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn calm() -> WindCondition<f64> {
        WindCondition::calm(0)
    }

    fn level_hover_cmd(vp: &VehicleParams<f64>) -> AttitudeThrustCmd<f64> {
        AttitudeThrustCmd {
            thrust: vp.hover_thrust(),
            attitude_d: UnitQuaternion::identity(),
        }
    }

    #[test]
    fn residual_vanishes_without_airflow() {
        let s = SimState::<f64>::at_rest(Vector3::zeros());
        let f = residual_force(&s, &calm(), &ResidualModelParams::default()).unwrap();
        assert_eq!(f, Vector3::zeros());
    }

    #[test]
    fn residual_against_headwind() {
        let params = ResidualModelParams::<f64>::default();
        let wind = WindCondition::constant(Vector3::new(4.2, 0.0, 0.0), 0).unwrap();
        let s = SimState::at_rest(Vector3::zeros());
        let f = residual_force(&s, &wind, &params).unwrap();
        let v_rel = Vector3::new(-4.2, 0.0, 0.0);
        let expected = -(params.linear_drag + Matrix3::identity() * (params.quad_drag * 4.2)) * v_rel;
        assert!((f - expected).amax() < 1e-15, "{f} vs {expected}");
        assert!((f.x - (0.25 * 4.2 + 0.05 * 4.2 * 4.2)).abs() < 1e-12);
    }

    #[test]
    fn residual_linear_part_scales() {
        let params = ResidualModelParams {
            quad_drag: 0.0,
            attitude_coupling: 0.0,
            rotor_coupling: 0.0,
            ..ResidualModelParams::<f64>::default()
        };
        let mut s = SimState::at_rest(Vector3::zeros());
        s.v = Vector3::new(0.7, -1.1, 0.4);
        let f1 = residual_force(&s, &calm(), &params).unwrap();
        s.v *= 2.0;
        let f2 = residual_force(&s, &calm(), &params).unwrap();
        assert!((f2 - f1 * 2.0).amax() < 1e-15);
    }

    #[test]
    fn hover_is_an_equilibrium() {
        let sim = Simulator::new(VehicleParams::default(), ResidualModelParams::default()).unwrap();
        let mut s = SimState::hover(Vector3::new(0.0, 0.0, 1.0), &sim.vehicle);
        let cmd = level_hover_cmd(&sim.vehicle);
        for _ in 0..1000 {
            s = sim.step(&s, &cmd, &calm(), 1e-3).unwrap();
        }
        assert!(s.v.norm() < 1e-6, "{}", s.v.norm());
        assert!((s.t - 1.0).abs() < 1e-9);
    }

    #[test]
    fn free_fall_matches_ballistics() {
        let sim = Simulator::new(VehicleParams::default(), ResidualModelParams::disabled()).unwrap();
        let mut s = SimState::<f64>::at_rest(Vector3::zeros());
        let act = Actuation::Wrench {
            thrust: 0.0,
            torque: Vector3::zeros(),
        };
        for _ in 0..2000 {
            s = sim.integrate(&s, act, &calm(), 1e-3).unwrap();
        }
        let t = s.t;
        assert!((s.v.z + 9.81 * t).abs() < 1e-6);
        assert!((s.p.z + 0.5 * 9.81 * t * t).abs() < 1e-6);
    }

    #[test]
    fn yaw_torque_spins_up_linearly() {
        let sim = Simulator::new(VehicleParams::default(), ResidualModelParams::disabled()).unwrap();
        let mut s = SimState::<f64>::at_rest(Vector3::zeros());
        let tau = 0.02;
        let act = Actuation::Wrench {
            thrust: sim.vehicle.hover_thrust(),
            torque: Vector3::new(0.0, 0.0, tau),
        };
        for _ in 0..500 {
            s = sim.integrate(&s, act, &calm(), 1e-3).unwrap();
        }
        let expected = tau / sim.vehicle.inertia[(2, 2)] * s.t;
        assert!((s.omega.z - expected).abs() < 1e-9);
        assert!(s.omega.xy().norm() < 1e-12);
    }

    #[test]
    fn rejects_bad_dt_and_bad_params() {
        let sim = Simulator::new(VehicleParams::default(), ResidualModelParams::default()).unwrap();
        let s = SimState::<f64>::at_rest(Vector3::zeros());
        let cmd = level_hover_cmd(&sim.vehicle);
        assert_eq!(sim.step(&s, &cmd, &calm(), 0.0), Err(SimError::InvalidStep(0.0)));
        assert!(matches!(
            sim.step(&s, &cmd, &calm(), 5e-3),
            Err(SimError::InvalidStep(_))
        ));
        let weak = VehicleParams {
            thrust_max: 10.0,
            ..VehicleParams::default()
        };
        assert!(Simulator::new(weak, ResidualModelParams::default()).is_err());
        let lopsided = VehicleParams {
            inertia: Matrix3::new(0.03, 0.01, 0.0, 0.0, 0.03, 0.0, 0.0, 0.0, 0.05),
            ..VehicleParams::default()
        };
        assert!(Simulator::new(lopsided, ResidualModelParams::default()).is_err());
    }

    #[test]
    fn blow_up_is_reported() {
        let sim = Simulator::new(VehicleParams::default(), ResidualModelParams::default()).unwrap();
        let s = SimState::<f64>::hover(Vector3::zeros(), &sim.vehicle);
        let act = Actuation::Wrench {
            thrust: 1e308,
            torque: Vector3::zeros(),
        };
        let mut result = Ok(s);
        for _ in 0..10 {
            result = result.and_then(|s| sim.integrate(&s, act, &calm(), 1e-3));
        }
        assert!(matches!(result, Err(SimError::NonFiniteState { .. })));
    }

    #[test]
    fn mixer_inverts_allocation() {
        let vp = VehicleParams::<f64>::default();
        let err = (vp.allocation() * vp.mixer() - Matrix4::identity()).amax();
        assert!(err < 1e-12);
    }

    #[test]
    fn attitude_loop_levels_the_vehicle() {
        let sim = Simulator::new(VehicleParams::default(), ResidualModelParams::disabled()).unwrap();
        let mut s = SimState::hover(Vector3::zeros(), &sim.vehicle);
        s.q_att = UnitQuaternion::from_euler_angles(0.2, -0.1, 0.3);
        let cmd = level_hover_cmd(&sim.vehicle);
        for _ in 0..2000 {
            s = sim.step(&s, &cmd, &calm(), 1e-3).unwrap();
        }
        assert!(s.q_att.angle() < 1e-3, "{}", s.q_att.angle());
    }

    #[test]
    fn noiseless_measurement_is_exact() {
        let params = ResidualModelParams {
            noise_sigma: 0.0,
            ..ResidualModelParams::default()
        };
        let wind = WindCondition::constant(Vector3::new(3.0, 1.0, 0.0), 0).unwrap();
        let mut s = SimState::<f64>::at_rest(Vector3::zeros());
        s.v = Vector3::new(1.0, 0.5, -0.2);
        s.pwm = Vector4::new(0.4, 0.5, 0.45, 0.42);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = measure_residual(&s, &wind, &params, &mut rng).unwrap();
        assert_eq!(y, residual_force(&s, &wind, &params).unwrap());
    }

    #[test]
    fn measurement_noise_is_unbiased() {
        let params = ResidualModelParams::<f64>::default();
        let sigma = 0.1;
        let params = ResidualModelParams {
            noise_sigma: sigma,
            ..params
        };
        let wind = WindCondition::constant(Vector3::new(4.2, 0.0, 0.0), 0).unwrap();
        let s = SimState::at_rest(Vector3::zeros());
        let truth = residual_force(&s, &wind, &params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 100_000;
        let mut sum = Vector3::zeros();
        for _ in 0..n {
            sum += measure_residual(&s, &wind, &params, &mut rng).unwrap();
        }
        let mean = sum / n as f64;
        let bound = 3.0 * sigma / (n as f64).sqrt();
        for i in 0..3 {
            assert!((mean[i] - truth[i]).abs() < bound, "axis {i}");
        }
    }

    #[test]
    fn measurement_is_seed_deterministic() {
        let params = ResidualModelParams::<f64>::default();
        let wind = WindCondition::constant(Vector3::new(2.0, 0.0, 0.0), 0).unwrap();
        let s = SimState::at_rest(Vector3::zeros());
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50)
                .map(|_| measure_residual(&s, &wind, &params, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(11), draw(11));
        assert_ne!(draw(11), draw(12));
    }

    #[test]
    fn single_precision_hover() {
        let sim = Simulator::<f32>::new(VehicleParams::default(), ResidualModelParams::default()).unwrap();
        let mut s = SimState::hover(Vector3::zeros(), &sim.vehicle);
        let cmd = AttitudeThrustCmd {
            thrust: sim.vehicle.hover_thrust(),
            attitude_d: UnitQuaternion::identity(),
        };
        for _ in 0..1000 {
            s = sim.step(&s, &cmd, &WindCondition::calm(0), 1e-3).unwrap();
        }
        assert!(s.v.norm() < 1e-3);
    }

    #[test]
    fn trace_csv_has_documented_columns() {
        let s = SimState::<f64>::at_rest(Vector3::new(1.0, 2.0, 3.0));
        let row = TraceRow::new(&s, &Vector3::zeros(), &Vector3::zeros());
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &[row]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap().split(',').count(), 24);
        assert!(lines.next().unwrap().starts_with("0,1,2,3,0,0,0,1,0,0,0"));
    }
}
