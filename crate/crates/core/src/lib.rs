// `!(x > 0)` style checks are meant to reject NaN too
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// the figure-8 lap time is 6.28 s, not 2π
#![allow(clippy::approx_constant)]

pub mod bench;
pub mod control;
pub mod daiml;
pub mod data;
pub mod nn;
pub mod scalar;
pub mod sim;
pub mod traj;
pub mod wind;

pub use scalar::Real;

/// Double-precision aliases of the generic types.
pub type VehicleParams = sim::VehicleParams<f64>;
pub type ResidualModelParams = sim::ResidualModelParams<f64>;
pub type SimState = sim::SimState<f64>;
pub type Simulator = sim::Simulator<f64>;
pub type WindCondition = wind::WindCondition<f64>;
pub type Figure8 = traj::Figure8<f64>;
pub type DesiredState = traj::DesiredState<f64>;
pub type Mlp = nn::Mlp<f64>;
pub type ControllerGains = control::ControllerGains<f64>;
pub type AdaptiveState = control::AdaptiveState<f64>;
