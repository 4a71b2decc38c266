//! End-to-end pipeline: validate → ground truth → simulate → learn →
//! evaluate. Each stage failure carries the stage it happened in so the CLI
//! can map it to a distinct exit code.

use nalgebra::DMatrix;
use std::path::{Path, PathBuf};

use super::config::ExperimentConfig;
use super::report::{
    self, compare_to_ground_truth, emit_finite_population_comparison,
    emit_mean_field_comparison, EvaluationReport,
};
use crate::error::{Error, Result};
use crate::gains::GainSet;
use crate::irl::{
    check_excitation, compute_data_integrals, compute_data_integrals_streaming,
    policy_iteration, CostMatrices, DataMatrices, ExcitationReport, LearnedSolution, WindowSet,
};
use crate::model::{validate_assumptions, AssumptionReport, PopulationModel};
use crate::riccati::{mfg_ground_truth, RiccatiSolution};
use crate::simulator::{simulate_ensemble, ExplorationPolicy, TrajectoryEnsemble};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Validate,
    Truth,
    Simulate,
    Learn,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::Validate => "validate",
            Self::Truth => "truth",
            Self::Simulate => "simulate",
            Self::Learn => "learn",
            Self::Evaluate => "evaluate",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            Self::Validate => 3,
            Self::Truth => 4,
            Self::Simulate => 5,
            Self::Learn => 6,
            Self::Evaluate => 7,
        }
    }
}

#[derive(Debug)]
pub struct StageFailure {
    pub stage: Stage,
    pub source: Error,
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "stage {}: {}", self.stage.name(), self.source)
    }
}

impl std::error::Error for StageFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

pub type StageResult<T> = std::result::Result<T, StageFailure>;

fn at<T>(stage: Stage, r: Result<T>) -> StageResult<T> {
    r.map_err(|source| StageFailure { stage, source })
}

/// Everything `run` produces, for callers that want the intermediates.
pub struct PipelineOutcome {
    pub population: PopulationModel,
    pub assumptions: AssumptionReport,
    pub truth: RiccatiSolution,
    pub truth_gains: GainSet,
    pub excitation: ExcitationReport,
    pub learned: LearnedSolution,
    pub learned_gains: GainSet,
    pub report: EvaluationReport,
}

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out_dir: PathBuf) -> Self {
        Self { config, out_dir }
    }

    /// Creates the output directory; refuses to clobber previous results
    /// unless forced.
    pub fn prepare_out_dir(&self, force: bool) -> Result<()> {
        std::fs::create_dir_all(&self.out_dir)?;
        let manifest = self.out_dir.join("manifest.json");
        if manifest.exists() && !force {
            return Err(Error::InvalidConfig(format!(
                "{} already contains results; pass --force to overwrite",
                self.out_dir.display()
            )));
        }
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    /// Builds the population and checks the standing assumptions.
    pub fn validate(&self) -> StageResult<(PopulationModel, AssumptionReport)> {
        let stage = Stage::Validate;
        at(stage, self.config.check())?;
        let pop = at(stage, self.config.population.build())?;
        at(stage, self.config.simulation.x0.to_initial_state(pop.n_total()).map(|_| ()))?;
        let report = validate_assumptions(&pop);
        if !report.passed() {
            return Err(StageFailure {
                stage,
                source: Error::InvalidConfig(format!("model assumptions violated\n{report}")),
            });
        }
        Ok((pop, report))
    }

    /// Model-based reference solution and its gain set.
    pub fn ground_truth(&self, pop: &PopulationModel) -> StageResult<(RiccatiSolution, GainSet)> {
        let stage = Stage::Truth;
        let truth = at(stage, mfg_ground_truth(pop, self.config.learning.eps))?;
        let gains = at(stage, GainSet::from_value_matrices(pop, &truth.p_blocks, &truth.omega))?;
        Ok((truth, gains))
    }

    fn policy(&self, pop: &PopulationModel) -> ExplorationPolicy {
        ExplorationPolicy::seeded(
            DMatrix::zeros(pop.m_total(), pop.n_total()),
            self.config.exploration.clone(),
            self.config.simulation.seed,
        )
    }

    pub fn windows(&self) -> Result<WindowSet> {
        WindowSet::contiguous(self.config.learning.windows, self.config.learning.dt)
    }

    /// Generates and materializes the exploration ensemble.
    pub fn simulate(&self, pop: &PopulationModel) -> StageResult<TrajectoryEnsemble> {
        let stage = Stage::Simulate;
        let s = &self.config.simulation;
        let x0 = at(stage, s.x0.to_initial_state(pop.n_total()))?;
        at(
            stage,
            simulate_ensemble(
                pop,
                &self.policy(pop),
                &x0,
                s.t_total,
                s.h_sde,
                s.record_stride,
                s.n_runs,
                s.seed,
            ),
        )
    }

    /// Data integrals without materializing trajectories; bit-identical to
    /// integrating a saved ensemble.
    pub fn integrals_streaming(&self, pop: &PopulationModel) -> StageResult<DataMatrices> {
        let stage = Stage::Simulate;
        let s = &self.config.simulation;
        let x0 = at(stage, s.x0.to_initial_state(pop.n_total()))?;
        let windows = at(stage, self.windows())?;
        at(
            stage,
            compute_data_integrals_streaming(
                pop,
                &self.policy(pop),
                &x0,
                s.t_total,
                s.h_sde,
                s.record_stride,
                s.n_runs,
                s.seed,
                &windows,
            ),
        )
    }

    pub fn integrals_from_ensemble(&self, ens: &TrajectoryEnsemble) -> StageResult<DataMatrices> {
        let stage = Stage::Learn;
        let windows = at(stage, self.windows())?;
        at(stage, compute_data_integrals(ens, &windows))
    }

    /// Excitation check plus policy iteration; non-convergence is a learn
    /// failure.
    pub fn learn(
        &self,
        pop: &PopulationModel,
        raw: &DataMatrices,
    ) -> StageResult<(ExcitationReport, LearnedSolution, GainSet)> {
        let stage = Stage::Learn;
        let costs = CostMatrices::from_population(pop);
        let l0_classes: Vec<DMatrix<f64>> =
            pop.classes.iter().map(|c| DMatrix::zeros(c.nu(), c.nx())).collect();
        let l0_global = DMatrix::zeros(pop.m_total(), pop.n_total());
        let excitation = at(stage, check_excitation(raw, &costs, &l0_classes, &l0_global))?;
        if !excitation.passed() {
            return Err(StageFailure {
                stage,
                source: Error::ExcitationFailure(format!(
                    "persistent excitation not met\n{excitation}"
                )),
            });
        }
        let learned = at(
            stage,
            policy_iteration(
                raw,
                &costs,
                &l0_classes,
                &l0_global,
                self.config.learning.eps,
                self.config.learning.max_iters,
            ),
        )?;
        if !learned.converged {
            let last = learned.trace.last().unwrap();
            return Err(StageFailure {
                stage,
                source: Error::NonConvergence {
                    iterations: learned.iterations(),
                    last_step: last.step_class.max(last.step_global),
                },
            });
        }
        let gains = at(stage, learned.gains(pop))?;
        Ok((excitation, learned, gains))
    }

    /// Compares against ground truth and writes every evaluation artifact.
    pub fn evaluate(
        &self,
        pop: &PopulationModel,
        truth: &RiccatiSolution,
        truth_gains: &GainSet,
        learned: &LearnedSolution,
        learned_gains: &GainSet,
    ) -> StageResult<(EvaluationReport, Vec<String>)> {
        let stage = Stage::Evaluate;
        let report = at(stage, compare_to_ground_truth(pop, learned, truth))?;
        let mut artifacts = Vec::new();
        at(stage, report.write_json(&self.path("report.json")))?;
        artifacts.push("report.json".to_string());
        at(stage, report.write_error_curves_csv(&self.path("error_curves.csv")))?;
        artifacts.push("error_curves.csv".to_string());
        at(stage, report.write_entry_table_csv(&self.path("entry_table.csv")))?;
        artifacts.push("entry_table.csv".to_string());
        let eval = &self.config.evaluation;
        artifacts.extend(at(
            stage,
            emit_mean_field_comparison(
                pop,
                &learned_gains.l_omega,
                &truth_gains.l_omega,
                eval,
                &self.out_dir,
            ),
        )?);
        artifacts.extend(at(
            stage,
            emit_finite_population_comparison(pop, learned_gains, truth_gains, eval, &self.out_dir),
        )?);
        Ok((report, artifacts))
    }

    fn write_manifest(&self, artifacts: &mut Vec<String>) -> Result<()> {
        artifacts.push("manifest.json".to_string());
        report::write_manifest(&self.config, artifacts, &self.path("manifest.json"))
    }

    /// The full pipeline. With `save_ensemble` the trajectories are written
    /// to `ensemble.bin` and integrated from memory; otherwise runs are
    /// integrated as they stream.
    pub fn run(&self, save_ensemble: bool) -> StageResult<PipelineOutcome> {
        let (population, assumptions) = self.validate()?;
        let (truth, truth_gains) = self.ground_truth(&population)?;
        let mut artifacts = Vec::new();
        at(
            Stage::Truth,
            report::write_truth_json(&truth, &truth_gains, &self.path("truth.json")),
        )?;
        artifacts.push("truth.json".to_string());
        let raw = if save_ensemble {
            let ens = self.simulate(&population)?;
            at(Stage::Simulate, ens.write_binary(&self.path("ensemble.bin")))?;
            artifacts.push("ensemble.bin".to_string());
            self.integrals_from_ensemble(&ens)?
        } else {
            self.integrals_streaming(&population)?
        };
        let (excitation, learned, learned_gains) = self.learn(&population, &raw)?;
        at(
            Stage::Learn,
            report::write_learned_json(
                &learned,
                &learned_gains,
                &excitation,
                &self.path("learned.json"),
            ),
        )?;
        artifacts.push("learned.json".to_string());
        let (report, eval_artifacts) =
            self.evaluate(&population, &truth, &truth_gains, &learned, &learned_gains)?;
        artifacts.extend(eval_artifacts);
        at(Stage::Evaluate, self.write_manifest(&mut artifacts))?;
        Ok(PipelineOutcome {
            population,
            assumptions,
            truth,
            truth_gains,
            excitation,
            learned,
            learned_gains,
            report,
        })
    }

    /// Loads a previously saved ensemble.
    pub fn load_ensemble(&self, path: &Path) -> StageResult<TrajectoryEnsemble> {
        at(Stage::Learn, TrajectoryEnsemble::read_binary(path))
    }

    /// Runs a fallible artifact write under the given stage.
    pub fn stage_write<T>(
        &self,
        stage: Stage,
        f: impl FnOnce() -> Result<T>,
    ) -> StageResult<T> {
        at(stage, f())
    }
}
