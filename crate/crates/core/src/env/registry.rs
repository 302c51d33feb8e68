//! Name → benchmark construction.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::env::bicycle::{BicycleConfig, KinematicBicycle, TrackTask};
use crate::env::double_integrator::{DoubleIntegrator, DoubleIntegratorConfig, RegulationTask};
use crate::env::traffic::{TrafficConfig, TrafficNetwork, TrafficTask};
use crate::env::Benchmark;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const DOUBLE_INTEGRATOR: &str = "double_integrator";
pub const BICYCLE_TRACK: &str = "bicycle_track";
pub const TRAFFIC_GRID: &str = "traffic_grid";

pub fn registered_environments() -> Vec<String> {
    [DOUBLE_INTEGRATOR, BICYCLE_TRACK, TRAFFIC_GRID]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

/// Per-environment parameters; only the section matching the requested name is read.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub double_integrator: DoubleIntegratorConfig,
    pub bicycle_track: BicycleConfig,
    pub traffic_grid: TrafficConfig,
}

pub fn build_benchmark<T: Scalar>(name: &str, cfg: &EnvConfig) -> Result<Benchmark<T>> {
    match name {
        DOUBLE_INTEGRATOR => {
            let c = &cfg.double_integrator;
            let model = DoubleIntegrator::<T>::try_new(c.dims, c.dt, c.u_max)?;
            Ok(Benchmark {
                name: name.into(),
                model: Arc::new(model),
                task: Arc::new(RegulationTask::<T>::new(c.clone())),
            })
        }
        BICYCLE_TRACK => {
            let c = &cfg.bicycle_track;
            let model = KinematicBicycle::<T>::new(c.wheelbase, c.dt, c.a_max, c.steer_max)?;
            Ok(Benchmark {
                name: name.into(),
                model: Arc::new(model),
                task: Arc::new(TrackTask::<T>::new(c.clone())?),
            })
        }
        TRAFFIC_GRID => {
            let c = &cfg.traffic_grid;
            let net = TrafficNetwork::<T>::new(c.network_spec())?;
            let task = TrafficTask::new(c.clone(), &net)?;
            Ok(Benchmark {
                name: name.into(),
                model: Arc::new(net),
                task: Arc::new(task),
            })
        }
        other => Err(Error::NotFound {
            kind: "environment",
            name: other.into(),
            available: registered_environments(),
        }),
    }
}
