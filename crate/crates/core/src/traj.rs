//! Desired trajectories: the benchmark figure-8 and randomized rest-to-rest
//! polynomial splines used for data collection.

use nalgebra::{SMatrix, SVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrajError {
    #[error("evaluation time {tau} s outside segment [0, {duration}] s")]
    OutOfRange { tau: f64, duration: f64 },
    #[error("singular boundary-value system")]
    Singular,
    #[error("invalid trajectory parameter: {0}")]
    InvalidParam(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct DesiredState<T: Real> {
    pub pos_d: Vector3<T>,
    pub vel_d: Vector3<T>,
    pub acc_d: Vector3<T>,
}

impl<T: Real> DesiredState<T> {
    pub fn hold(pos: Vector3<T>) -> Self {
        Self {
            pos_d: pos,
            vel_d: Vector3::zeros(),
            acc_d: Vector3::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.pos_d
            .iter()
            .chain(self.vel_d.iter())
            .chain(self.acc_d.iter())
            .all(|x| x.finite())
    }
}

pub trait Trajectory<T: Real> {
    fn desired(&self, t: T) -> DesiredState<T>;
}

/// Stationary setpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hover<T: Real>(pub Vector3<T>);

impl<T: Real> Trajectory<T> for Hover<T> {
    fn desired(&self, _t: T) -> DesiredState<T> {
        DesiredState::hold(self.0)
    }
}

/// Vertical-plane lemniscate: `x = (w/2) sin(2πt/T)`, `z = z₀ + (h/2) sin(4πt/T)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct Figure8<T: Real> {
    pub width: T,
    pub height: T,
    pub period: T,
    pub center: Vector3<T>,
}

impl<T: Real> Figure8<T> {
    pub fn new(width: T, height: T, period: T, center: Vector3<T>) -> Result<Self, TrajError> {
        let f = Self {
            width,
            height,
            period,
            center,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<(), TrajError> {
        if !(self.width > T::zero() && self.height > T::zero() && self.period > T::zero()) {
            return Err(TrajError::InvalidParam(
                "figure-8 width, height and period must be positive",
            ));
        }
        Ok(())
    }
}

impl Default for Figure8<f64> {
    fn default() -> Self {
        Self {
            width: 2.5,
            height: 1.5,
            period: 6.28,
            center: Vector3::zeros(),
        }
    }
}

impl<T: Real> Trajectory<T> for Figure8<T> {
    fn desired(&self, t: T) -> DesiredState<T> {
        let two = T::lit(2.0);
        let wx = T::two_pi() / self.period;
        let wz = two * wx;
        let ax = self.width / two;
        let az = self.height / two;
        let (sx, cx) = (wx * t).sin_cos();
        let (sz, cz) = (wz * t).sin_cos();
        DesiredState {
            pos_d: self.center + Vector3::new(ax * sx, T::zero(), az * sz),
            vel_d: Vector3::new(ax * wx * cx, T::zero(), az * wz * cz),
            acc_d: Vector3::new(-ax * wx * wx * sx, T::zero(), -az * wz * wz * sz),
        }
    }
}

/// Free-function figure-8 centered at the origin.
pub fn figure8<T: Real>(width: T, height: T, period: T, t: T) -> DesiredState<T> {
    Figure8 {
        width,
        height,
        period,
        center: Vector3::zeros(),
    }
    .desired(t)
}

/// Degree-7 polynomial per axis, in local time `τ ∈ [0, duration]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct SplineSegment<T: Real> {
    /// Row `i` holds the monomial coefficients `c₀ … c₇` of axis `i`.
    pub coeffs: SMatrix<T, 3, 8>,
    pub duration: T,
}

/// Position, velocity, acceleration and jerk at one end of a segment.
pub type EndpointConditions<T> = [Vector3<T>; 4];

impl<T: Real> SplineSegment<T> {
    /// Solves the 8×8 Hermite system matching position and its first three
    /// derivatives at both ends.
    pub fn from_boundary(
        start: &EndpointConditions<T>,
        end: &EndpointConditions<T>,
        duration: T,
    ) -> Result<Self, TrajError> {
        if !(duration > T::zero()) {
            return Err(TrajError::InvalidParam("segment duration must be positive"));
        }
        let mut a = SMatrix::<T, 8, 8>::zeros();
        for d in 0..4 {
            // τ = 0: only the d-th coefficient survives, scaled by d!
            a[(d, d)] = T::lit(falling(d, d) as f64);
            for k in d..8 {
                a[(4 + d, k)] = T::lit(falling(k, d) as f64) * duration.powi((k - d) as i32);
            }
        }
        let lu = a.lu();
        let mut coeffs = SMatrix::<T, 3, 8>::zeros();
        for axis in 0..3 {
            let mut rhs = SVector::<T, 8>::zeros();
            for d in 0..4 {
                rhs[d] = start[d][axis];
                rhs[4 + d] = end[d][axis];
            }
            let sol = lu.solve(&rhs).ok_or(TrajError::Singular)?;
            coeffs.set_row(axis, &sol.transpose());
        }
        Ok(Self { coeffs, duration })
    }

    /// Rest-to-rest segment: zero velocity, acceleration and jerk at both ends.
    pub fn rest_to_rest(from: Vector3<T>, to: Vector3<T>, duration: T) -> Result<Self, TrajError> {
        let z = Vector3::zeros();
        Self::from_boundary(&[from, z, z, z], &[to, z, z, z], duration)
    }

    /// `order`-th time derivative at local time `tau` (Horner on the
    /// differentiated coefficients). Does not range-check.
    pub fn derivative(&self, order: usize, tau: T) -> Vector3<T> {
        let mut out = Vector3::zeros();
        if order > 7 {
            return out;
        }
        for axis in 0..3 {
            let mut acc = T::zero();
            for k in (order..8).rev() {
                acc = acc * tau + self.coeffs[(axis, k)] * T::lit(falling(k, order) as f64);
            }
            out[axis] = acc;
        }
        out
    }

    pub fn eval(&self, tau: T) -> Result<DesiredState<T>, TrajError> {
        if !(tau >= T::zero() && tau <= self.duration) {
            return Err(TrajError::OutOfRange {
                tau: tau.as_f64(),
                duration: self.duration.as_f64(),
            });
        }
        Ok(DesiredState {
            pos_d: self.derivative(0, tau),
            vel_d: self.derivative(1, tau),
            acc_d: self.derivative(2, tau),
        })
    }
}

/// Free-function form of [`SplineSegment::eval`].
pub fn eval_segment<T: Real>(seg: &SplineSegment<T>, tau: T) -> Result<DesiredState<T>, TrajError> {
    seg.eval(tau)
}

/// k·(k−1)·…·(k−d+1)
fn falling(k: usize, d: usize) -> u64 {
    (0..d).map(|i| (k - i) as u64).product()
}

/// Axis-aligned box, m.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct Aabb<T: Real> {
    pub min: Vector3<T>,
    pub max: Vector3<T>,
}

impl<T: Real> Aabb<T> {
    pub fn contains(&self, p: &Vector3<T>, tol: T) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] - tol && p[i] <= self.max[i] + tol)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<T> {
        Vector3::from_fn(|i, _| {
            let u: f64 = rng.random();
            self.min[i] + (self.max[i] - self.min[i]) * T::lit(u)
        })
    }
}

/// Chain of spline segments; holds the last waypoint after the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct PiecewiseTrajectory<T: Real> {
    pub segments: Vec<SplineSegment<T>>,
    /// Start time of each segment.
    pub knots: Vec<T>,
}

impl<T: Real> PiecewiseTrajectory<T> {
    pub fn duration(&self) -> T {
        match (self.knots.last(), self.segments.last()) {
            (Some(&k), Some(s)) => k + s.duration,
            _ => T::zero(),
        }
    }

    pub fn waypoints(&self) -> Vec<Vector3<T>> {
        let mut out: Vec<_> = self.segments.iter().map(|s| s.derivative(0, T::zero())).collect();
        if let Some(last) = self.segments.last() {
            out.push(last.derivative(0, last.duration));
        }
        out
    }

    fn locate(&self, t: T) -> (usize, T) {
        let idx = self.knots.partition_point(|&k| k <= t).saturating_sub(1);
        let seg = &self.segments[idx];
        let tau = (t - self.knots[idx]).max(T::zero()).min(seg.duration);
        (idx, tau)
    }

    pub fn derivative(&self, order: usize, t: T) -> Vector3<T> {
        let (idx, tau) = self.locate(t);
        self.segments[idx].derivative(order, tau)
    }
}

impl<T: Real> Trajectory<T> for PiecewiseTrajectory<T> {
    fn desired(&self, t: T) -> DesiredState<T> {
        let (idx, tau) = self.locate(t);
        self.segments[idx].eval(tau).expect("tau clamped into segment")
    }
}

/// Rest-to-rest splines between uniformly sampled waypoints in `bounds`,
/// starting at `start`, until `total_duration` is covered.
pub fn random_spline_trajectory<T: Real, R: Rng + ?Sized>(
    bounds: &Aabb<T>,
    start: Vector3<T>,
    segment_duration_range: (T, T),
    total_duration: T,
    rng: &mut R,
) -> Result<PiecewiseTrajectory<T>, TrajError> {
    let (lo, hi) = segment_duration_range;
    if !(lo > T::zero() && hi >= lo && total_duration > T::zero()) {
        return Err(TrajError::InvalidParam("durations must be positive"));
    }
    if (0..3).any(|i| !(bounds.max[i] >= bounds.min[i])) {
        return Err(TrajError::InvalidParam("empty bounding box"));
    }
    let mut segments = Vec::new();
    let mut knots = Vec::new();
    let mut t = T::zero();
    let mut from = start;
    while t < total_duration {
        let to = bounds.sample(rng);
        let u: f64 = rng.random();
        let duration = lo + (hi - lo) * T::lit(u);
        segments.push(SplineSegment::rest_to_rest(from, to, duration)?);
        knots.push(t);
        t += duration;
        from = to;
    }
    Ok(PiecewiseTrajectory { segments, knots })
}
