//! JSON run configuration.
//!
//! A document has the sections `system`, `mpc`, `admm`, `solver` and
//! `experiment`; only `system` is required. Unknown keys are rejected.
//! Settings left out fall back to the benchmark's nominal values, and
//! [`Config::resolve`] writes those values back so the stored snapshot is
//! complete.
//!
//! ```
//! use dmpc::config::Config;
//!
//! let config = Config::from_json(r#"{
//!     "system": { "kind": "spring_mass", "agents": 4, "seed": 7 },
//!     "mpc": { "steps": 20 },
//!     "admm": { "d": 0.1 }
//! }"#).unwrap();
//! let resolved = config.resolve().unwrap();
//! assert_eq!(resolved.admm.rho, Some(1.0));
//! assert_eq!(resolved.mpc.nodes, 61);
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::admm::{AdmmConfig, StoppingMode};
use crate::bench::{build_spring_mass, build_vdp, Benchmark};
use crate::closed_loop::{LoopConfig, WarmStart};
use crate::error::{Error, Result};
use crate::ocp::SolverSettings;
use crate::trajectory::TimeGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    VanDerPol,
    SpringMass { agents: usize, seed: u64 },
}

impl SystemConfig {
    pub fn build(&self) -> Result<Benchmark> {
        match *self {
            SystemConfig::VanDerPol => build_vdp(),
            SystemConfig::SpringMass { agents, seed } => build_spring_mass(agents, seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MpcConfig {
    /// Prediction horizon `T`.
    pub horizon: Option<f64>,
    /// Nodes of the prediction grid.
    pub nodes: usize,
    /// Sampling time.
    pub dt: Option<f64>,
    pub steps: usize,
    pub substeps: usize,
    pub warm_start: WarmStart,
    /// Initial plant state; the benchmark's own when absent.
    pub x0: Option<Vec<f64>>,
}

impl Default for MpcConfig {
    fn default() -> Self {
        MpcConfig {
            horizon: None,
            nodes: 61,
            dt: None,
            steps: 100,
            substeps: 10,
            warm_start: WarmStart::Copy,
            x0: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmmSection {
    pub rho: Option<f64>,
    pub d: Option<f64>,
    pub mode: StoppingMode,
    pub fixed_iterations: usize,
    pub max_iterations: usize,
}

impl Default for AdmmSection {
    fn default() -> Self {
        let base = AdmmConfig::default();
        AdmmSection {
            rho: None,
            d: None,
            mode: base.mode,
            fixed_iterations: base.fixed_iterations,
            max_iterations: base.max_iterations,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// The stopping constant `d`.
    D,
    /// The number of agents (spring-mass only).
    N,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Centralized solve every step.
    pub diagnostics: bool,
    /// Per-agent predicted trajectories as CSV.
    pub trajectories: bool,
    /// One JSON line per ADMM iteration.
    pub telemetry: bool,
    /// Residuals against a deeply converged reference at the first step.
    pub residuals: bool,
    pub sweep: Option<SweepConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub system: SystemConfig,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default)]
    pub admm: AdmmSection,
    #[serde(default)]
    pub solver: Option<SolverSettings>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

impl Config {
    /// Parses without validating.
    pub fn from_json(text: &str) -> Result<Config> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Config::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// A default run of the given system.
    pub fn for_system(system: SystemConfig) -> Config {
        Config {
            system,
            mpc: MpcConfig::default(),
            admm: AdmmSection::default(),
            solver: None,
            experiment: ExperimentConfig::default(),
        }
    }

    /// Fills every benchmark-dependent default and validates the result.
    pub fn resolve(&self) -> Result<Config> {
        let bench = self.system.build().map_err(as_config)?;
        Ok(self.resolve_with(&bench)?.0)
    }

    /// Builds the benchmark and the loop settings.
    pub fn build(&self) -> Result<(Benchmark, LoopConfig)> {
        let bench = self.system.build().map_err(as_config)?;
        let (_, loop_config) = self.resolve_with(&bench)?;
        Ok((bench, loop_config))
    }

    fn resolve_with(&self, bench: &Benchmark) -> Result<(Config, LoopConfig)> {
        let mut out = self.clone();
        let base = bench.admm_config();
        out.mpc.horizon.get_or_insert(bench.horizon);
        out.mpc.dt.get_or_insert(bench.dt);
        out.mpc.x0.get_or_insert_with(|| bench.x0.clone());
        out.admm.rho.get_or_insert(base.rho);
        out.admm.d.get_or_insert(base.d);
        out.solver.get_or_insert_with(|| base.solver.clone());

        let x0 = out.mpc.x0.clone().unwrap_or_default();
        if x0.len() != bench.system.state_dim() {
            return Err(Error::Config(format!(
                "x0 has {} entries, the system has {} states",
                x0.len(),
                bench.system.state_dim()
            )));
        }
        if x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("x0 must be finite".into()));
        }
        if let Some(sweep) = &out.experiment.sweep {
            validate_sweep(sweep, &self.system)?;
        }

        let admm = AdmmConfig {
            rho: out.admm.rho.unwrap_or(base.rho),
            d: out.admm.d.unwrap_or(base.d),
            mode: out.admm.mode,
            fixed_iterations: out.admm.fixed_iterations,
            max_iterations: out.admm.max_iterations,
            solver: out.solver.clone().unwrap_or_default(),
        };
        let grid = TimeGrid::new(out.mpc.horizon.unwrap_or(bench.horizon), out.mpc.nodes)
            .map_err(as_config)?;
        let mut loop_config = LoopConfig::new(
            grid,
            out.mpc.dt.unwrap_or(bench.dt),
            out.mpc.steps,
            x0,
            admm,
        );
        loop_config.substeps = out.mpc.substeps;
        loop_config.warm_start = out.mpc.warm_start;
        loop_config.diagnostics = out.experiment.diagnostics;
        loop_config.keep_trajectories = out.experiment.trajectories;
        loop_config.validate()?;
        Ok((out, loop_config))
    }

    /// The configuration of one sweep cell, with the sweep removed.
    pub fn cell(&self, value: f64, seed: u64) -> Result<Config> {
        let sweep = self
            .experiment
            .sweep
            .as_ref()
            .ok_or_else(|| Error::Config("no sweep configured".into()))?;
        let mut out = self.clone();
        out.experiment.sweep = None;
        match sweep.param {
            SweepParam::D => out.admm.d = Some(value),
            SweepParam::N => {
                out.mpc.x0 = None;
                if let SystemConfig::SpringMass { agents, .. } = &mut out.system {
                    *agents = value as usize;
                }
            }
        }
        if let SystemConfig::SpringMass { seed: s, .. } = &mut out.system {
            *s = seed;
            // A fresh draw of initial displacements belongs to each seed.
            out.mpc.x0 = None;
        }
        Ok(out)
    }
}

fn validate_sweep(sweep: &SweepConfig, system: &SystemConfig) -> Result<()> {
    if sweep.values.is_empty() || sweep.seeds.is_empty() {
        return Err(Error::Config(
            "sweep needs at least one value and one seed".into(),
        ));
    }
    match sweep.param {
        SweepParam::D => {
            if sweep.values.iter().any(|d| !(*d > 0.0 && d.is_finite())) {
                return Err(Error::Config("swept d values must be positive".into()));
            }
        }
        SweepParam::N => {
            if !matches!(system, SystemConfig::SpringMass { .. }) {
                return Err(Error::Config(
                    "an N sweep needs the spring_mass system".into(),
                ));
            }
            if sweep
                .values
                .iter()
                .any(|n| !(*n >= 2.0 && n.fract() == 0.0))
            {
                return Err(Error::Config(
                    "swept N values must be integers of at least 2".into(),
                ));
            }
        }
    }
    Ok(())
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_document_resolves_to_benchmark_values() {
        let c = Config::from_json(r#"{"system": {"kind": "van_der_pol"}}"#).unwrap();
        let r = c.resolve().unwrap();
        assert_eq!(r.mpc.horizon, Some(3.0));
        assert_eq!(r.mpc.dt, Some(0.1));
        assert_eq!(r.admm.rho, Some(2.0));
        assert_eq!(r.admm.d, Some(0.005));
        assert_eq!(r.mpc.x0.as_ref().unwrap().len(), 6);
        assert_eq!(r.solver, Some(crate::bench::bench_solver()));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in [
            r#"{"system": {"kind": "van_der_pol"}, "mcp": {}}"#,
            r#"{"system": {"kind": "van_der_pol"}, "admm": {"roh": 1}}"#,
            r#"{"system": {"kind": "spring_mass", "agents": 3, "seed": 1, "mass": 2}}"#,
            r#"{"system": {"kind": "pendulum"}}"#,
        ] {
            assert!(
                Config::from_json(text).unwrap_err().is_config_error(),
                "{text}"
            );
        }
    }

    #[test]
    fn resolve_is_idempotent() {
        let c = Config::from_json(
            r#"{"system": {"kind": "spring_mass", "agents": 3, "seed": 9},
                "experiment": {"sweep": {"param": "d", "values": [0.5, 0.05], "seeds": [1, 2]}}}"#,
        )
        .unwrap();
        let once = c.resolve().unwrap();
        let reparsed = Config::from_json(&once.to_json()).unwrap();
        assert_eq!(reparsed, once);
        assert_eq!(reparsed.resolve().unwrap().to_json(), once.to_json());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            r#"{"system": {"kind": "van_der_pol"}, "admm": {"rho": -1}}"#,
            r#"{"system": {"kind": "van_der_pol"}, "mpc": {"dt": 0.07}}"#,
            r#"{"system": {"kind": "van_der_pol"}, "mpc": {"x0": [1, 2]}}"#,
            r#"{"system": {"kind": "spring_mass", "agents": 1, "seed": 1}}"#,
            r#"{"system": {"kind": "van_der_pol"}, "experiment": {"sweep": {"param": "n", "values": [4], "seeds": [1]}}}"#,
            r#"{"system": {"kind": "van_der_pol"}, "experiment": {"sweep": {"param": "d", "values": [], "seeds": [1]}}}"#,
        ] {
            let err = Config::from_json(text)
                .and_then(|c| c.resolve())
                .unwrap_err();
            assert!(err.is_config_error(), "{text}: {err}");
        }
    }

    #[test]
    fn cells_override_the_swept_parameter_and_seed() {
        let c = Config::from_json(
            r#"{"system": {"kind": "spring_mass", "agents": 3, "seed": 9},
                "experiment": {"sweep": {"param": "n", "values": [4, 6], "seeds": [1, 2]}}}"#,
        )
        .unwrap();
        let cell = c.cell(6.0, 2).unwrap();
        assert_eq!(cell.system, SystemConfig::SpringMass { agents: 6, seed: 2 });
        assert!(cell.experiment.sweep.is_none());
        let (bench, lc) = cell.build().unwrap();
        assert_eq!(bench.system.agents(), 6);
        assert_eq!(lc.x0, bench.x0);
    }
}
