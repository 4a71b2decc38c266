//! Comparison of the learned solution against the model-based ground truth,
//! plus all file artifacts: JSON summaries, per-iteration error curves,
//! entry-level tables, and the mean-field / finite-population trajectory
//! CSVs.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use std::path::Path;

use super::config::{matrix_rows, EvaluationConfig, ExperimentConfig};
use crate::error::Result;
use crate::gains::GainSet;
use crate::irl::{ExcitationReport, LearnedSolution};
use crate::model::PopulationModel;
use crate::riccati::RiccatiSolution;
use crate::simulator::{
    empirical_mean_field, simulate_finite_population, simulate_mean_field, InitialState,
};

#[derive(Debug, Clone, Serialize)]
pub struct MatrixErrors {
    pub label: String,
    pub frobenius: f64,
    pub max_abs: f64,
}

fn matrix_errors(label: String, learned: &DMatrix<f64>, truth: &DMatrix<f64>) -> MatrixErrors {
    let diff = learned - truth;
    MatrixErrors { label, frobenius: diff.norm(), max_abs: diff.amax() }
}

#[derive(Debug, Clone, Serialize)]
pub struct EntryComparison {
    pub label: String,
    pub learned: f64,
    pub truth: f64,
    pub abs_error: f64,
}

fn entry(label: String, learned: f64, truth: f64) -> EntryComparison {
    EntryComparison { label, learned, truth, abs_error: (learned - truth).abs() }
}

/// Full accuracy report for one learned solution.
#[derive(Debug, Clone, Serialize)]
pub struct EvaluationReport {
    pub converged: bool,
    pub iterations: usize,
    pub value_errors: Vec<MatrixErrors>,
    pub gain_errors: Vec<MatrixErrors>,
    /// Worst Frobenius error over {P̂₁..P̂_K, Ω̂} at the final iteration.
    pub final_error_frobenius: f64,
    pub final_error_max: f64,
    /// Same error per iteration; the last entries equal the scalars above.
    pub error_curve_frobenius: Vec<f64>,
    pub error_curve_max: Vec<f64>,
    pub steps_class: Vec<f64>,
    pub steps_global: Vec<f64>,
    pub theta_classes: Vec<f64>,
    pub theta_global: f64,
    pub entry_table: Vec<EntryComparison>,
}

/// Builds the report from the iteration trace and the reference solution.
pub fn compare_to_ground_truth(
    pop: &PopulationModel,
    learned: &LearnedSolution,
    truth: &RiccatiSolution,
) -> Result<EvaluationReport> {
    let truth_gains = GainSet::from_value_matrices(pop, &truth.p_blocks, &truth.omega)?;
    let learned_gains = learned.gains(pop)?;

    let mut value_errors = Vec::new();
    let mut gain_errors = Vec::new();
    for (k, (lp, tp)) in learned.p.iter().zip(&truth.p_blocks).enumerate() {
        value_errors.push(matrix_errors(format!("P_{}", k + 1), lp, tp));
        gain_errors.push(matrix_errors(
            format!("L_P_{}", k + 1),
            &learned_gains.l_p[k],
            &truth_gains.l_p[k],
        ));
    }
    value_errors.push(matrix_errors("Omega".into(), &learned.omega, &truth.omega));
    value_errors.push(matrix_errors("Pi".into(), &learned.pi(), &truth.pi));
    gain_errors.push(matrix_errors(
        "L_Omega".into(),
        &learned_gains.l_omega,
        &truth_gains.l_omega,
    ));
    gain_errors.push(matrix_errors("L_Pi".into(), &learned_gains.l_pi, &truth_gains.l_pi));

    let iter_error = |p: &[DMatrix<f64>], omega: &DMatrix<f64>, frob: bool| -> f64 {
        let norm = |d: DMatrix<f64>| if frob { d.norm() } else { d.amax() };
        p.iter()
            .zip(&truth.p_blocks)
            .map(|(a, b)| norm(a - b))
            .chain(std::iter::once(norm(omega - &truth.omega)))
            .fold(0.0f64, f64::max)
    };
    let error_curve_frobenius: Vec<f64> =
        learned.trace.iter().map(|r| iter_error(&r.p, &r.omega, true)).collect();
    let error_curve_max: Vec<f64> =
        learned.trace.iter().map(|r| iter_error(&r.p, &r.omega, false)).collect();

    let mut entry_table = Vec::new();
    for (k, (lp, tp)) in learned.p.iter().zip(&truth.p_blocks).enumerate() {
        for i in 0..lp.nrows() {
            for j in i..lp.ncols() {
                entry_table.push(entry(
                    format!("P_{}[{},{}]", k + 1, i + 1, j + 1),
                    lp[(i, j)],
                    tp[(i, j)],
                ));
            }
        }
    }
    for (k, (ll, tl)) in learned_gains.l_p.iter().zip(&truth_gains.l_p).enumerate() {
        for c in 0..ll.nrows() {
            for i in 0..ll.ncols() {
                entry_table.push(entry(
                    format!("L_P_{}[{},{}]", k + 1, c + 1, i + 1),
                    ll[(c, i)],
                    tl[(c, i)],
                ));
            }
        }
    }
    let n = pop.n_total();
    for d in 0..n {
        entry_table.push(entry(
            format!("Omega[{},{}]", d + 1, d + 1),
            learned.omega[(d, d)],
            truth.omega[(d, d)],
        ));
    }
    for j in 1..n {
        entry_table.push(entry(
            format!("2*Omega[1,{}]", j + 1),
            2.0 * learned.omega[(0, j)],
            2.0 * truth.omega[(0, j)],
        ));
    }

    Ok(EvaluationReport {
        converged: learned.converged,
        iterations: learned.iterations(),
        value_errors,
        gain_errors,
        final_error_frobenius: *error_curve_frobenius.last().unwrap(),
        final_error_max: *error_curve_max.last().unwrap(),
        error_curve_frobenius,
        error_curve_max,
        steps_class: learned.trace.iter().map(|r| r.step_class).collect(),
        steps_global: learned.trace.iter().map(|r| r.step_global).collect(),
        theta_classes: learned.theta_p.clone(),
        theta_global: learned.theta_omega,
        entry_table,
    })
}

impl EvaluationReport {
    /// Worst Frobenius error over the final value matrices.
    pub fn final_value_error(&self) -> f64 {
        self.final_error_frobenius
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn write_error_curves_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "frobenius", "max_abs", "step_class", "step_global"])?;
        for i in 0..self.error_curve_frobenius.len() {
            w.write_record([
                (i + 1).to_string(),
                self.error_curve_frobenius[i].to_string(),
                self.error_curve_max[i].to_string(),
                self.steps_class[i].to_string(),
                self.steps_global[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_entry_table_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["entry", "learned", "truth", "abs_error"])?;
        for e in &self.entry_table {
            w.write_record([
                e.label.clone(),
                e.learned.to_string(),
                e.truth.to_string(),
                e.abs_error.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Writes one mean-field CSV: the deterministic ODE path and the averaged
/// stochastic replays, both from X̄(0) = 1.
fn write_mean_field_csv(
    pop: &PopulationModel,
    l_omega: &DMatrix<f64>,
    eval: &EvaluationConfig,
    path: &Path,
) -> Result<()> {
    let n = pop.n_total();
    let x0 = DVector::from_element(n, 1.0);
    let (times, ode) =
        simulate_mean_field(pop, l_omega, &x0, eval.t_eval, eval.h_eval, eval.record_stride)?;
    let (_, emp) = empirical_mean_field(
        pop,
        l_omega,
        &InitialState::Value(x0),
        eval.t_eval,
        eval.h_eval,
        eval.record_stride,
        eval.mean_field_samples,
        eval.seed,
    )?;
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("ode_x{i}")));
    header.extend((1..=n).map(|i| format!("emp_x{i}")));
    w.write_record(&header)?;
    for (j, t) in times.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend((0..n).map(|i| ode[(i, j)].to_string()));
        rec.extend((0..n).map(|i| emp[(i, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Emits `mean_field_learned.csv` and `mean_field_truth.csv` side by side.
pub fn emit_mean_field_comparison(
    pop: &PopulationModel,
    learned_l_omega: &DMatrix<f64>,
    truth_l_omega: &DMatrix<f64>,
    eval: &EvaluationConfig,
    out_dir: &Path,
) -> Result<Vec<String>> {
    let pairs = [
        ("mean_field_learned.csv", learned_l_omega),
        ("mean_field_truth.csv", truth_l_omega),
    ];
    let mut names = Vec::new();
    for (name, l) in pairs {
        write_mean_field_csv(pop, l, eval, &out_dir.join(name))?;
        names.push(name.to_string());
    }
    Ok(names)
}

fn write_population_csv(
    pop: &PopulationModel,
    gains: &GainSet,
    eval: &EvaluationConfig,
    path: &Path,
) -> Result<()> {
    let x0 = InitialState::Uniform { low: eval.x0_low, high: eval.x0_high };
    let paths = simulate_finite_population(
        pop,
        gains,
        eval.agents_per_class,
        &x0,
        eval.t_eval,
        eval.h_eval,
        eval.record_stride,
        eval.seed,
    )?;
    let n = pop.n_total();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=n).map(|i| format!("mean_x{i}")));
    header.extend((1..=n).map(|i| format!("lo_x{i}")));
    header.extend((1..=n).map(|i| format!("hi_x{i}")));
    w.write_record(&header)?;
    for (j, t) in paths.times.iter().enumerate() {
        let mut rec = vec![t.to_string()];
        rec.extend((0..n).map(|i| paths.class_means[(i, j)].to_string()));
        rec.extend((0..n).map(|i| paths.envelope_lo[(i, j)].to_string()));
        rec.extend((0..n).map(|i| paths.envelope_hi[(i, j)].to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Emits `finite_pop_learned.csv` and `finite_pop_truth.csv`, both driven by
/// the same Wiener paths so the gain difference is the only difference.
pub fn emit_finite_population_comparison(
    pop: &PopulationModel,
    learned: &GainSet,
    truth: &GainSet,
    eval: &EvaluationConfig,
    out_dir: &Path,
) -> Result<Vec<String>> {
    let pairs = [("finite_pop_learned.csv", learned), ("finite_pop_truth.csv", truth)];
    let mut names = Vec::new();
    for (name, g) in pairs {
        write_population_csv(pop, g, eval, &out_dir.join(name))?;
        names.push(name.to_string());
    }
    Ok(names)
}

/// Ground-truth artifact: value matrices, gains, and solver diagnostics.
pub fn write_truth_json(
    truth: &RiccatiSolution,
    gains: &GainSet,
    path: &Path,
) -> Result<()> {
    #[derive(Serialize)]
    struct TruthArtifact {
        p_blocks: Vec<Vec<Vec<f64>>>,
        omega: Vec<Vec<f64>>,
        pi: Vec<Vec<f64>>,
        l_p: Vec<Vec<Vec<f64>>>,
        l_omega: Vec<Vec<f64>>,
        l_pi: Vec<Vec<f64>>,
        residual_p: f64,
        residual_omega: f64,
        residual_pi: f64,
        graph_condition: f64,
        iterations: usize,
    }
    let artifact = TruthArtifact {
        p_blocks: truth.p_blocks.iter().map(matrix_rows).collect(),
        omega: matrix_rows(&truth.omega),
        pi: matrix_rows(&truth.pi),
        l_p: gains.l_p.iter().map(matrix_rows).collect(),
        l_omega: matrix_rows(&gains.l_omega),
        l_pi: matrix_rows(&gains.l_pi),
        residual_p: truth.residual_p,
        residual_omega: truth.residual_omega,
        residual_pi: truth.residual_pi,
        graph_condition: truth.graph_condition,
        iterations: truth.iterations,
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, &artifact)?;
    Ok(())
}

/// Learned-solution artifact: final estimates plus the excitation ranks.
pub fn write_learned_json(
    learned: &LearnedSolution,
    gains: &GainSet,
    excitation: &ExcitationReport,
    path: &Path,
) -> Result<()> {
    #[derive(Serialize)]
    struct Rank {
        label: String,
        rank: usize,
        required: usize,
        margin: f64,
    }
    #[derive(Serialize)]
    struct LearnedArtifact {
        converged: bool,
        iterations: usize,
        p_blocks: Vec<Vec<Vec<f64>>>,
        omega: Vec<Vec<f64>>,
        pi: Vec<Vec<f64>>,
        theta_classes: Vec<f64>,
        theta_global: f64,
        l_p: Vec<Vec<Vec<f64>>>,
        l_omega: Vec<Vec<f64>>,
        l_pi: Vec<Vec<f64>>,
        excitation: Vec<Rank>,
    }
    let ranks = excitation
        .classes
        .iter()
        .chain(std::iter::once(&excitation.global))
        .map(|c| Rank {
            label: c.label.clone(),
            rank: c.rank,
            required: c.required,
            margin: c.margin,
        })
        .collect();
    let artifact = LearnedArtifact {
        converged: learned.converged,
        iterations: learned.iterations(),
        p_blocks: learned.p.iter().map(matrix_rows).collect(),
        omega: matrix_rows(&learned.omega),
        pi: matrix_rows(&learned.pi()),
        theta_classes: learned.theta_p.clone(),
        theta_global: learned.theta_omega,
        l_p: gains.l_p.iter().map(matrix_rows).collect(),
        l_omega: matrix_rows(&gains.l_omega),
        l_pi: matrix_rows(&gains.l_pi),
        excitation: ranks,
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, &artifact)?;
    Ok(())
}

/// Reproducibility manifest: crate version, config hash, resolved config,
/// and the artifact list. Deliberately timestamp-free so identical runs
/// produce identical bytes.
pub fn write_manifest(
    config: &ExperimentConfig,
    artifacts: &[String],
    path: &Path,
) -> Result<()> {
    #[derive(Serialize)]
    struct Manifest<'a> {
        crate_version: &'static str,
        config_hash: String,
        artifacts: &'a [String],
        config: &'a ExperimentConfig,
    }
    let canonical = config.canonical_json()?;
    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION"),
        config_hash: format!("{:016x}", super::config::fnv1a64(canonical.as_bytes())),
        artifacts,
        config,
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(file, &manifest)?;
    Ok(())
}
