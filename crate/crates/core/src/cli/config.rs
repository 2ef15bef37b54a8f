//! JSON experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::{Shape1D, Shape2D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    ExpandingDecay,
    AnosovDecay,
    StableCoupling,
    Stability,
    Ot,
}

impl ExperimentId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentId::ExpandingDecay => "expanding-decay",
            ExperimentId::AnosovDecay => "anosov-decay",
            ExperimentId::StableCoupling => "stable-coupling",
            ExperimentId::Stability => "stability",
            ExperimentId::Ot => "ot",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown experiment `{s}`")))
    }
}

/// `x -> k x + a s(x) mod 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CircleMapConfig {
    pub degree: i64,
    pub amplitude: f64,
    pub shape: Shape1D,
}

impl Default for CircleMapConfig {
    fn default() -> Self {
        CircleMapConfig {
            degree: 2,
            amplitude: 0.1,
            shape: Shape1D::Sin { freq: 1 },
        }
    }
}

/// `x -> A x + eps g(x) mod 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TorusMapConfig {
    pub matrix: [[i64; 2]; 2],
    pub epsilon: f64,
    pub shape: Shape2D,
}

impl Default for TorusMapConfig {
    fn default() -> Self {
        TorusMapConfig {
            matrix: [[2, 1], [1, 1]],
            epsilon: 0.01,
            shape: Shape2D::sin_y(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Samples of circle densities.
    pub density: usize,
    /// Side of the torus quadrature grid for correlations.
    pub quadrature: usize,
    /// Side of the grid SRB estimates are deposited on.
    pub srb: usize,
    /// Side of the grid the exact transport problems are solved on; divides `srb`.
    pub transport: usize,
    /// Rails of the SRB estimator.
    pub rails: usize,
    /// Pushforward steps of the SRB estimator.
    pub srb_steps: usize,
    /// Unstable leaves of the foliated measures in the coupling experiment.
    pub leaves: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            density: 4096,
            quadrature: 512,
            srb: 114,
            transport: 38,
            rails: 512,
            srb_steps: 20,
            leaves: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostKind {
    D,
    DBeta,
    Stable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MethodKind {
    Exact,
    Sinkhorn,
}

/// One-shot transport between two CSV measures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OtConfig {
    pub mu: PathBuf,
    pub nu: PathBuf,
    pub cost: CostKind,
    #[serde(default = "default_ot_beta")]
    pub beta: f64,
    pub method: MethodKind,
    #[serde(default = "default_regularization")]
    pub regularization: f64,
    /// Transverse half-width of the stable cost.
    #[serde(default = "default_half_width")]
    pub half_width: f64,
}

fn default_ot_beta() -> f64 {
    1.0
}

fn default_regularization() -> f64 {
    1e-3
}

fn default_half_width() -> f64 {
    0.1
}

/// Output file names inside the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub results: String,
    pub report: String,
    pub constants: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            results: "results.csv".into(),
            report: "report.json".into(),
            constants: "constants.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub circle_map: CircleMapConfig,
    #[serde(default)]
    pub torus_map: TorusMapConfig,
    /// Hölder exponent; defaults depend on the experiment.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub grids: GridConfig,
    #[serde(default)]
    pub n_max: Option<usize>,
    #[serde(default)]
    pub rounds: Option<usize>,
    #[serde(default)]
    pub epsilons: Option<Vec<f64>>,
    /// Orbit samples of the Birkhoff cross-check.
    #[serde(default)]
    pub birkhoff_samples: Option<usize>,
    #[serde(default)]
    pub ot: Option<OtConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::Config(msg()))
    }
}

fn range<T: PartialOrd + std::fmt::Display + Copy>(name: &str, v: T, lo: T, hi: T) -> Result<()> {
    check(v >= lo && v <= hi, || format!("{name} = {v} outside [{lo}, {hi}]"))
}

impl ExperimentConfig {
    pub fn new(experiment: ExperimentId) -> Self {
        ExperimentConfig {
            experiment,
            seed: 0,
            circle_map: CircleMapConfig::default(),
            torus_map: TorusMapConfig::default(),
            beta: None,
            grids: GridConfig::default(),
            n_max: None,
            rounds: None,
            epsilons: None,
            birkhoff_samples: None,
            ot: None,
            output: OutputConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(match self.experiment {
            ExperimentId::StableCoupling => 0.0005,
            ExperimentId::Ot => 1.0,
            _ => 0.1,
        })
    }

    pub fn n_max(&self) -> usize {
        self.n_max.unwrap_or(match self.experiment {
            ExperimentId::ExpandingDecay => 20,
            _ => 12,
        })
    }

    pub fn rounds(&self) -> usize {
        self.rounds.unwrap_or(3)
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.epsilons
            .clone()
            .unwrap_or_else(|| vec![0.0, 0.002, 0.005, 0.01, 0.02, 0.05])
    }

    pub fn birkhoff_samples(&self) -> usize {
        self.birkhoff_samples.unwrap_or(10_000_000)
    }

    /// Range checks on every field the experiment reads.
    pub fn validate(&self) -> Result<()> {
        let c = &self.circle_map;
        range("circle_map.degree", c.degree, 2, 16)?;
        check(c.amplitude.is_finite() && c.amplitude.abs() <= 1.0, || {
            format!("circle_map.amplitude = {} outside [-1, 1]", c.amplitude)
        })?;
        let t = &self.torus_map;
        check(t.matrix.iter().flatten().all(|v| v.abs() <= 100), || {
            "torus_map.matrix entries must lie in [-100, 100]".into()
        })?;
        range("torus_map.epsilon", t.epsilon, 0.0, 0.1)?;
        check(t.shape.terms.iter().all(|s| s.component < 2 && s.coef.is_finite()), || {
            "torus_map.shape terms need component 0 or 1 and finite coefficients".into()
        })?;
        check(self.beta() > 0.0 && self.beta() <= 1.0, || format!("beta = {} outside (0, 1]", self.beta()))?;
        let g = &self.grids;
        range("grids.density", g.density, 64, 1 << 16)?;
        range("grids.quadrature", g.quadrature, 16, 2048)?;
        range("grids.srb", g.srb, 4, 512)?;
        range("grids.transport", g.transport, 2, 44)?;
        check(g.srb % g.transport == 0, || {
            format!("grids.transport = {} must divide grids.srb = {}", g.transport, g.srb)
        })?;
        range("grids.rails", g.rails, 16, 4096)?;
        range("grids.srb_steps", g.srb_steps, 0, 500)?;
        range("grids.leaves", g.leaves, 4, 1024)?;
        range("n_max", self.n_max(), 4, 500)?;
        range("rounds", self.rounds(), 1, 100)?;
        range("birkhoff_samples", self.birkhoff_samples(), 1000, 1_000_000_000)?;
        let eps = self.epsilons();
        check(!eps.is_empty(), || "epsilons must not be empty".into())?;
        for e in &eps {
            range("epsilons[]", *e, 0.0, 0.1)?;
        }
        if self.experiment == ExperimentId::Stability {
            check(eps.iter().filter(|e| **e > 0.0).count() >= 2, || {
                "stability needs at least two positive epsilons".into()
            })?;
        }
        if self.experiment == ExperimentId::Ot {
            let ot = self.ot.as_ref().ok_or_else(|| Error::Config("ot experiment needs an `ot` block".into()))?;
            check(ot.beta > 0.0 && ot.beta <= 1.0, || format!("ot.beta = {} outside (0, 1]", ot.beta))?;
            check(ot.regularization > 0.0, || "ot.regularization must be positive".into())?;
            check(ot.half_width > 0.0 && ot.half_width <= 0.5, || "ot.half_width outside (0, 0.5]".into())?;
        }
        for name in [&self.output.results, &self.output.report, &self.output.constants] {
            check(!name.is_empty() && !name.contains('/') && !name.contains('\\'), || {
                format!("output name `{name}` must be a plain file name")
            })?;
        }
        Ok(())
    }
}
