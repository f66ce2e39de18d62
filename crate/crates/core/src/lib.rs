//! Modeling, trajectory planning and tracking control for a tailless
//! flapping-wing aerial vehicle.

pub mod control;
pub mod defaults;
pub mod dynamics;
pub mod flatness;
pub mod io;
pub mod jet;
pub mod se3;
pub mod sim;
pub mod planner;
