//! Spatially uniform wind profiles. A [`WindCondition`] is the hidden
//! environment parameter the adaptive controller has to identify online.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::scalar::Real;

/// Largest admissible base wind speed, m/s.
pub const MAX_WIND_SPEED: f64 = 15.0;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum WindError {
    #[error("sinusoidal wind needs a nonzero base velocity to define its direction")]
    DegenerateDirection,
    #[error("base wind speed {0} m/s exceeds {MAX_WIND_SPEED} m/s")]
    TooFast(f64),
    #[error("sinusoid amplitude must be finite and non-negative, got {0}")]
    BadAmplitude(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindKind {
    Constant,
    Sinusoidal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real + Serialize + serde::de::DeserializeOwned")]
pub struct WindCondition<T: Real> {
    pub kind: WindKind,
    pub base_velocity: Vector3<T>,
    /// Speed swing of the sinusoid, m/s. Zero for constant wind.
    pub amplitude: T,
    /// rad/s
    pub angular_freq: T,
    /// Condition index k used as the discriminator class.
    pub label: usize,
}

impl<T: Real> WindCondition<T> {
    pub fn calm(label: usize) -> Self {
        Self {
            kind: WindKind::Constant,
            base_velocity: Vector3::zeros(),
            amplitude: T::zero(),
            angular_freq: T::zero(),
            label,
        }
    }

    pub fn constant(base_velocity: Vector3<T>, label: usize) -> Result<Self, WindError> {
        let cond = Self {
            kind: WindKind::Constant,
            base_velocity,
            amplitude: T::zero(),
            angular_freq: T::zero(),
            label,
        };
        cond.validate()?;
        Ok(cond)
    }

    pub fn sinusoidal(
        base_velocity: Vector3<T>,
        amplitude: T,
        angular_freq: T,
        label: usize,
    ) -> Result<Self, WindError> {
        let cond = Self {
            kind: WindKind::Sinusoidal,
            base_velocity,
            amplitude,
            angular_freq,
            label,
        };
        cond.validate()?;
        Ok(cond)
    }

    /// Wind blowing along the horizontal heading (rad from +x toward +y).
    pub fn from_speed_heading(speed: T, heading: T, label: usize) -> Result<Self, WindError> {
        Self::constant(
            Vector3::new(speed * heading.cos(), speed * heading.sin(), T::zero()),
            label,
        )
    }

    pub fn validate(&self) -> Result<(), WindError> {
        let speed = self.base_velocity.norm().as_f64();
        if !(speed <= MAX_WIND_SPEED) {
            return Err(WindError::TooFast(speed));
        }
        match self.kind {
            WindKind::Constant => {
                if self.amplitude != T::zero() {
                    return Err(WindError::BadAmplitude(self.amplitude.as_f64()));
                }
            }
            WindKind::Sinusoidal => {
                let amp = self.amplitude.as_f64();
                if !(amp >= 0.0 && amp.is_finite()) {
                    return Err(WindError::BadAmplitude(amp));
                }
                if speed == 0.0 {
                    return Err(WindError::DegenerateDirection);
                }
            }
        }
        Ok(())
    }

    /// Mean wind speed, m/s.
    pub fn base_speed(&self) -> T {
        self.base_velocity.norm()
    }

    /// Wind velocity at time `t`, m/s.
    pub fn velocity(&self, t: T) -> Result<Vector3<T>, WindError> {
        match self.kind {
            WindKind::Constant => Ok(self.base_velocity),
            WindKind::Sinusoidal => {
                let speed = self.base_velocity.norm();
                if speed == T::zero() {
                    return Err(WindError::DegenerateDirection);
                }
                let scale = T::one() + (self.amplitude / speed) * (self.angular_freq * t).sin();
                Ok(self.base_velocity * scale)
            }
        }
    }
}

/// Free-function form of [`WindCondition::velocity`].
pub fn wind_velocity<T: Real>(cond: &WindCondition<T>, t: T) -> Result<Vector3<T>, WindError> {
    cond.velocity(t)
}
