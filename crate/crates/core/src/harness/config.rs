//! Experiment configuration: a single JSON document that pins the
//! population, the exploration signal, data collection, learning, and
//! evaluation. Every field has a default matching the three-class
//! reference experiment, so `{}` is a valid config.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::demo;
use crate::error::{Error, Result};
use crate::model::{assemble_population, build_coupling_matrix, ClassModel, PopulationModel};
use crate::simulator::{InitialState, NoiseSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub population: PopulationSpec,
    pub exploration: NoiseSpec,
    pub simulation: SimulationConfig,
    pub learning: LearningConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            population: PopulationSpec::default(),
            exploration: NoiseSpec::default(),
            simulation: SimulationConfig::default(),
            learning: LearningConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Structural sanity checks that do not need the population built.
    pub fn check(&self) -> Result<()> {
        let s = &self.simulation;
        if !(s.t_total > 0.0) || !(s.h_sde > 0.0) || s.record_stride == 0 {
            return Err(Error::InvalidConfig("simulation grid must be positive".into()));
        }
        if s.n_runs == 0 {
            return Err(Error::InvalidConfig("at least one run is required".into()));
        }
        let l = &self.learning;
        if l.windows == 0 || !(l.dt > 0.0) || !(l.eps > 0.0) || l.max_iters == 0 {
            return Err(Error::InvalidConfig("learning parameters must be positive".into()));
        }
        let span = l.windows as f64 * l.dt;
        if span > s.t_total + 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "window span {span} exceeds the simulated horizon {}",
                s.t_total
            )));
        }
        let e = &self.evaluation;
        if !(e.t_eval > 0.0) || !(e.h_eval > 0.0) || e.record_stride == 0 {
            return Err(Error::InvalidConfig("evaluation grid must be positive".into()));
        }
        if !(e.x0_low <= e.x0_high) {
            return Err(Error::InvalidConfig("evaluation x0 range is inverted".into()));
        }
        Ok(())
    }

    /// Canonical JSON used for hashing and the manifest.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Which population to run: a named builtin or explicit class matrices plus
/// a coupling template.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PopulationSpec {
    Builtin { name: String },
    Explicit { classes: Vec<ClassSpec>, coupling: Vec<Vec<f64>> },
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self::Builtin { name: "three_class".into() }
    }
}

/// One class in row-major nested-list form.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub d: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub rho: f64,
}

pub(crate) fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(Error::InvalidConfig(format!("{what}: empty matrix")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::InvalidConfig(format!("{what}: ragged or empty rows")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

pub(crate) fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

impl PopulationSpec {
    pub fn build(&self) -> Result<PopulationModel> {
        match self {
            Self::Builtin { name } if name == "three_class" => demo::three_class_population(),
            Self::Builtin { name } => {
                Err(Error::InvalidConfig(format!("unknown builtin population '{name}'")))
            }
            Self::Explicit { classes, coupling } => {
                let classes: Vec<ClassModel> = classes
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        ClassModel::new(
                            matrix_from_rows(&c.a, &format!("class {k} A"))?,
                            matrix_from_rows(&c.b, &format!("class {k} B"))?,
                            matrix_from_rows(&c.d, &format!("class {k} D"))?,
                            matrix_from_rows(&c.q, &format!("class {k} Q"))?,
                            matrix_from_rows(&c.r, &format!("class {k} R"))?,
                            c.rho,
                        )
                    })
                    .collect::<Result<_>>()?;
                let partition: Vec<usize> = classes.iter().map(|c| c.nx()).collect();
                let n: usize = partition.iter().sum();
                let mut q = DMatrix::zeros(n, n);
                let mut off = 0;
                for c in &classes {
                    q.view_mut((off, off), (c.nx(), c.nx())).copy_from(&c.q);
                    off += c.nx();
                }
                let template = matrix_from_rows(coupling, "coupling template")?;
                let h = build_coupling_matrix(&q, &template, &partition)?;
                assemble_population(classes, h)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub t_total: f64,
    pub h_sde: f64,
    /// Keep every record_stride-th integration point on the recorded grid.
    pub record_stride: usize,
    pub n_runs: usize,
    pub seed: u64,
    pub x0: InitialStateSpec,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            t_total: 20.0,
            h_sde: 1e-3,
            record_stride: 1,
            n_runs: 100,
            seed: 7,
            x0: InitialStateSpec::Ones,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialStateSpec {
    Ones,
    Value { values: Vec<f64> },
    Uniform { low: f64, high: f64 },
}

impl InitialStateSpec {
    pub fn to_initial_state(&self, n: usize) -> Result<InitialState> {
        match self {
            Self::Ones => Ok(InitialState::ones(n)),
            Self::Value { values } => {
                if values.len() != n {
                    return Err(Error::InvalidConfig(format!(
                        "x0 has {} entries for a {n}-dimensional state",
                        values.len()
                    )));
                }
                Ok(InitialState::Value(DVector::from_column_slice(values)))
            }
            Self::Uniform { low, high } => {
                if !(low <= high) {
                    return Err(Error::InvalidConfig("x0 range is inverted".into()));
                }
                Ok(InitialState::Uniform { low: *low, high: *high })
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningConfig {
    /// Window length Δt.
    pub dt: f64,
    /// Number of contiguous windows.
    pub windows: usize,
    /// Convergence threshold on the value-matrix Frobenius step.
    pub eps: f64,
    pub max_iters: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self { dt: 0.1, windows: 120, eps: 1e-9, max_iters: 50 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub agents_per_class: usize,
    pub x0_low: f64,
    pub x0_high: f64,
    /// Stochastic replays averaged into the empirical mean field.
    pub mean_field_samples: usize,
    pub t_eval: f64,
    pub h_eval: f64,
    pub record_stride: usize,
    pub seed: u64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            agents_per_class: 50,
            x0_low: 0.5,
            x0_high: 1.5,
            mean_field_samples: 100,
            t_eval: 20.0,
            h_eval: 1e-3,
            record_stride: 10,
            seed: 9001,
        }
    }
}

/// FNV-1a over the canonical config JSON; stable across runs and platforms.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
