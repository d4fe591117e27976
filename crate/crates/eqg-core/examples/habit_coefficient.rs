//! Minimal library usage: build model parameters and evaluate the scalar
//! habit coefficient at time zero. Mirrors the README example.

use eqg_core::model::zeta;
use eqg_core::{Curve, EqgError, ModelParams};

fn main() -> Result<(), EqgError> {
    let params = ModelParams::new(
        0.5,                  // risk aversion, terminal wealth
        1.0,                  // risk aversion, running consumption
        0.9,                  // running-utility weight
        0.05,                 // discount rate
        0.8,                  // habit decay
        0.4,                  // habit accumulation
        1.0,                  // horizon
        Curve::constant(0.1), // income rate
    )?;
    let z0 = zeta(&params, 0.0)?;
    println!("habit coefficient at t = 0: {z0}");
    Ok(())
}
