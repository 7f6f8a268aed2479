//! Scenario files: the estuary, the observation window and the parameters
//! used to synthesize observations.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::estuary::{
    calibrate_damping, BoundaryConfig, Estuary, ParameterBounds, ParameterVector, StationConfig,
    TideConstituent, TimeGrid, N_PARAMS,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t0: f64,
    pub dt: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstituentSpec {
    #[serde(flatten)]
    pub wave: TideConstituent,
    /// Boundary velocity amplitude, m/s.
    pub velocity_amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub z_f: f64,
    pub z_mean: f64,
    pub constituents: Vec<ConstituentSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub seed: u64,
    pub noise_sigma: f64,
    pub c_damp: f64,
    pub grid: GridSpec,
    pub boundary: BoundarySpec,
    pub stations: Vec<StationConfig>,
    /// Parameters that generate the synthetic observations.
    pub truth: ParameterVector,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundsSpec>,
}

impl Scenario {
    /// Six stations along a 180 km estuary, one per friction zone, forced by
    /// four constituents. `c_damp` leaves the farthest station with half of
    /// the dominant amplitude at mid-range friction.
    pub fn default_gironde_analog() -> Self {
        let waves = [
            ("M2", 1.6, 44714.0, 0.0, 1.0),
            ("S2", 0.5, 43200.0, 0.6, 0.3),
            ("K1", 0.15, 23934.0, 1.2, 0.1),
            ("O1", 0.12, 86164.0, 2.0, 0.08),
        ];
        let constituents = waves
            .iter()
            .map(|&(name, amplitude, period, phase, u)| ConstituentSpec {
                wave: TideConstituent {
                    name: name.into(),
                    amplitude,
                    period,
                    phase,
                    nodal_factor: 1.0,
                    nodal_phase: 0.0,
                    origin_phase: 0.0,
                },
                velocity_amplitude: u,
            })
            .collect();
        let boundary = BoundarySpec {
            z_f: -20.0,
            z_mean: 0.0,
            constituents,
        };

        let layout = [
            ("mouth", 0.0, 15.0),
            ("lower", 30e3, 12.0),
            ("middle", 60e3, 10.0),
            ("upper", 100e3, 8.0),
            ("confluence", 140e3, 7.0),
            ("head", 180e3, 6.0),
        ];
        let stations: Vec<StationConfig> = layout
            .iter()
            .enumerate()
            .map(|(i, &(name, distance, depth))| StationConfig {
                id: i as u32 + 1,
                name: name.into(),
                distance,
                depth,
                zone: i + 1,
            })
            .collect();

        let bounds = ParameterBounds::calibration_default();
        let mid_ks6 = 0.5 * (bounds.lower()[8] + bounds.upper()[8]);
        let c_damp = calibrate_damping(&boundary.to_config(), &stations[5], mid_ks6, 0.5)
            .expect("valid default");

        Self {
            seed: 42,
            noise_sigma: 0.12,
            c_damp,
            grid: GridSpec {
                t0: 0.0,
                dt: 60.0,
                duration: 2.0 * 86400.0,
            },
            boundary,
            stations,
            truth: ParameterVector {
                alpha: 1.0,
                beta: 1.0,
                gamma: 0.36,
                ks: [38.0, 80.0, 90.0, 29.0, 80.0, 38.0],
            },
            bounds: None,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let scenario: Scenario = toml::from_str(s)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.estuary().validate()?;
        self.grid()?;
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config("noise_sigma must be >= 0".into()));
        }
        ParameterVector::from_slice(&self.truth.to_array())?;
        let bounds = self.bounds()?;
        if bounds.dim() != N_PARAMS {
            return Err(Error::Config(format!(
                "bounds must have {N_PARAMS} components"
            )));
        }
        Ok(())
    }

    pub fn estuary(&self) -> Estuary {
        Estuary {
            boundary: self.boundary.to_config(),
            stations: self.stations.clone(),
            c_damp: self.c_damp,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::spanning(self.grid.t0, self.grid.dt, self.grid.duration)
    }

    pub fn bounds(&self) -> Result<ParameterBounds> {
        match &self.bounds {
            Some(b) => ParameterBounds::new(b.lower.clone(), b.upper.clone()),
            None => Ok(ParameterBounds::calibration_default()),
        }
    }
}

impl BoundarySpec {
    pub fn to_config(&self) -> BoundaryConfig {
        BoundaryConfig {
            z_f: self.z_f,
            z_mean: self.z_mean,
            constituents: self.constituents.iter().map(|c| c.wave.clone()).collect(),
            u_amplitudes: self
                .constituents
                .iter()
                .map(|c| c.velocity_amplitude)
                .collect(),
        }
    }
}
