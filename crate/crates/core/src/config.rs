//! TOML run specifications.
//!
//! ```toml
//! seed = 0
//!
//! [order]
//! s = 0.75
//!
//! [hamiltonian]
//! m = 2.0
//!
//! [source]
//! kind = "power"        # c0 |x|^gamma
//! c0 = 1.0
//! gamma = 0.5
//! bumps = [{ height = 1.0, center = 0.0, width = 1.0 }]   # optional
//!
//! [truncation]
//! radii = [6.0, 12.0, 24.0]
//! h = 0.25
//!
//! [discount]            # optional, defaults shown
//! alpha0 = 0.4
//! levels = 13
//! x0 = 0.0
//!
//! [simulation]          # optional, defaults shown
//! dt = 0.02
//! horizon = 400.0
//! paths = 10000
//! ```

use std::path::Path;

use serde::Deserialize;

use crate::ergodic::{geometric_ladder, ExtractConfig};
use crate::levy::PathConfig;
use crate::problem::{Bump, ProblemSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    #[serde(default)]
    pub seed: u64,
    pub order: OrderSection,
    pub hamiltonian: HamiltonianSection,
    pub source: SourceSection,
    pub truncation: TruncationSection,
    #[serde(default)]
    pub discount: DiscountSection,
    #[serde(default)]
    pub simulation: SimulationSection,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrderSection {
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HamiltonianSection {
    pub m: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub kind: String,
    pub c0: f64,
    pub gamma: f64,
    #[serde(default)]
    pub bumps: Vec<BumpSection>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpSection {
    pub height: f64,
    pub center: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationSection {
    pub radii: Vec<f64>,
    #[serde(default = "default_h")]
    pub h: f64,
}

fn default_h() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscountSection {
    pub alpha0: f64,
    pub levels: usize,
    pub x0: f64,
}

impl Default for DiscountSection {
    fn default() -> Self {
        DiscountSection { alpha0: 0.4, levels: 13, x0: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub dt: f64,
    pub horizon: f64,
    pub paths: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        SimulationSection { dt: 0.02, horizon: 400.0, paths: 10_000 }
    }
}

impl RunSpec {
    pub fn parse(text: &str) -> Result<RunSpec> {
        let spec: RunSpec = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        spec.problem()?;
        spec.extract_config()?;
        spec.path_config(spec.seed)?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<RunSpec> {
        let text = std::fs::read_to_string(path)?;
        RunSpec::parse(&text)
    }

    pub fn problem(&self) -> Result<ProblemSpec> {
        if self.source.kind != "power" {
            return Err(Error::Validation(format!("unknown source.kind '{}' (expected 'power')", self.source.kind)));
        }
        let (c0, gamma) = (self.source.c0, self.source.gamma);
        if !c0.is_finite() || !gamma.is_finite() {
            return Err(Error::Validation("source.c0 and source.gamma must be finite".into()));
        }
        let spec =
            ProblemSpec::power_model(self.order.s, self.hamiltonian.m, c0, gamma, self.truncation.radii.clone())?;
        let mut source = spec.source.clone();
        for b in &self.source.bumps {
            if !(b.height.is_finite() && b.center.is_finite() && b.width > 0.0) {
                return Err(Error::Validation("bumps need finite height/center and positive width".into()));
            }
            source = source.with_bump(Bump { height: b.height, center: b.center, width: b.width });
        }
        Ok(spec.with_source(source))
    }

    pub fn extract_config(&self) -> Result<ExtractConfig> {
        let h = self.truncation.h;
        if !(h > 0.0) {
            return Err(Error::Validation("truncation.h must be positive".into()));
        }
        for r in &self.truncation.radii {
            let cells = r / h;
            if (cells - cells.round()).abs() > 1e-9 * cells.max(1.0) {
                return Err(Error::Validation(format!("radius {r} is not a multiple of h = {h}")));
            }
        }
        let d = &self.discount;
        if !(d.alpha0 > 0.0) || d.levels < 3 {
            return Err(Error::Validation("discount needs alpha0 > 0 and at least three levels".into()));
        }
        Ok(ExtractConfig { h, alphas: geometric_ladder(d.alpha0, d.levels), x0: d.x0, ..ExtractConfig::worked() })
    }

    /// Path settings; the return radius is filled in by the caller.
    pub fn path_config(&self, seed: u64) -> Result<PathConfig> {
        let sim = &self.simulation;
        let cfg = PathConfig {
            dt: sim.dt,
            horizon: sim.horizon,
            n_paths: sim.paths,
            seed,
            x0: 0.0,
            return_radius: 1.0,
            burn_in: 0.0,
        };
        cfg.check()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const WORKED: &str = r#"
seed = 3
[order]
s = 0.75
[hamiltonian]
m = 2.0
[source]
kind = "power"
c0 = 1.0
gamma = 0.5
[truncation]
radii = [6.0, 12.0, 24.0]
"#;

    #[test]
    fn parses_worked_instance() {
        let r = RunSpec::parse(WORKED).unwrap();
        assert_eq!(r.seed, 3);
        let p = r.problem().unwrap();
        assert_eq!(p.s(), 0.75);
        assert_eq!(p.n_max(), 24.0);
        let c = r.extract_config().unwrap();
        assert_eq!(c.alphas.len(), 13);
        assert_eq!(c.h, 0.25);
    }

    #[test]
    fn rejects_bad_values() {
        let bad = WORKED.replace("s = 0.75", "s = 0.3");
        assert!(matches!(RunSpec::parse(&bad), Err(Error::Validation(_))));
        let bad = WORKED.replace("gamma = 0.5", "gamma = 0.5\nextra = 1");
        assert!(matches!(RunSpec::parse(&bad), Err(Error::Parse(_))));
        let bad = WORKED.replace("kind = \"power\"", "kind = \"table\"");
        assert!(RunSpec::parse(&bad).is_err());
        assert!(RunSpec::parse("not toml [").is_err());
    }
}
