//! Agent-class definitions, population assembly, coupling-matrix
//! construction, and standing-assumption validation.
//!
//! A population is K heterogeneous agent classes with linear dynamics
//! dx = (A_k x + B_k u)dt + D_k dw and discounted quadratic cost tracking a
//! network-coupled combination of class means. The block-diagonal aggregates
//! (A, B, Q, R, D) and the N×N coupling matrix H drive everything downstream.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg;

/// One agent class: dynamics, noise map, and cost weights, with the shared
/// discount rate rho.
#[derive(Debug, Clone)]
pub struct ClassModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub rho: f64,
}

impl ClassModel {
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        d: DMatrix<f64>,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        rho: f64,
    ) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() {
            return Err(Error::DimensionMismatch("A must be square".into()));
        }
        for (name, m, rows) in [("B", &b, n), ("D", &d, n), ("Q", &q, n)] {
            if m.nrows() != rows {
                return Err(Error::DimensionMismatch(format!(
                    "{name} has {} rows, expected {rows}",
                    m.nrows()
                )));
            }
        }
        if q.ncols() != n {
            return Err(Error::DimensionMismatch("Q must be n x n".into()));
        }
        if r.shape() != (b.ncols(), b.ncols()) {
            return Err(Error::DimensionMismatch("R must be m x m".into()));
        }
        if !rho.is_finite() || rho < 0.0 {
            return Err(Error::InvalidConfig(format!("rho = {rho} must be finite and >= 0")));
        }
        if !linalg::is_symmetric(&q, 1e-9) {
            return Err(Error::NotSymmetric("Q".into()));
        }
        if !linalg::is_symmetric(&r, 1e-9) {
            return Err(Error::NotSymmetric("R".into()));
        }
        let q_min = linalg::min_symmetric_eigenvalue(&q);
        if q_min < -1e-9 * q.norm().max(1.0) {
            return Err(Error::NotPositiveSemidefinite(format!("Q (lambda_min {q_min:.3e})")));
        }
        let r_min = linalg::min_symmetric_eigenvalue(&r);
        if r_min <= 1e-9 * r.norm().max(1.0) {
            return Err(Error::NotPositiveDefinite(format!("R (lambda_min {r_min:.3e})")));
        }
        Ok(ClassModel { a, b, d, q, r, rho })
    }

    /// State dimension n_k.
    pub fn nx(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension m_k.
    pub fn nu(&self) -> usize {
        self.b.ncols()
    }

    /// Noise dimension d_k.
    pub fn nw(&self) -> usize {
        self.d.ncols()
    }

    /// Discount-shifted drift A_k − (rho/2) I.
    pub fn a_shifted(&self) -> DMatrix<f64> {
        &self.a - DMatrix::identity(self.nx(), self.nx()) * (self.rho / 2.0)
    }
}

/// The assembled population: classes, coupling matrix H, and block-diagonal
/// aggregates.
#[derive(Debug, Clone)]
pub struct PopulationModel {
    pub classes: Vec<ClassModel>,
    pub h: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

fn block_diag(blocks: impl Iterator<Item = DMatrix<f64>>, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(rows, cols);
    let (mut i, mut j) = (0, 0);
    for blk in blocks {
        out.view_mut((i, j), blk.shape()).copy_from(&blk);
        i += blk.nrows();
        j += blk.ncols();
    }
    out
}

impl PopulationModel {
    /// Number of classes K.
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Aggregate state dimension N = Σ n_k.
    pub fn n_total(&self) -> usize {
        self.a.nrows()
    }

    /// Aggregate input dimension M = Σ m_k.
    pub fn m_total(&self) -> usize {
        self.b.ncols()
    }

    pub fn rho(&self) -> f64 {
        self.classes[0].rho
    }

    /// Cumulative state offsets, length K+1 (last entry is N).
    pub fn state_offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for c in &self.classes {
            off.push(off.last().unwrap() + c.nx());
        }
        off
    }

    /// Cumulative input offsets, length K+1 (last entry is M).
    pub fn input_offsets(&self) -> Vec<usize> {
        let mut off = vec![0];
        for c in &self.classes {
            off.push(off.last().unwrap() + c.nu());
        }
        off
    }

    /// State partition (n_1, ..., n_K).
    pub fn state_partition(&self) -> Vec<usize> {
        self.classes.iter().map(ClassModel::nx).collect()
    }

    /// Discount-shifted aggregate drift A − (rho/2) I.
    pub fn a_shifted(&self) -> DMatrix<f64> {
        let n = self.n_total();
        &self.a - DMatrix::identity(n, n) * (self.rho() / 2.0)
    }

    /// Effective state weight Q(I − H) of the global tracking problem.
    pub fn q_i_minus_h(&self) -> DMatrix<f64> {
        let n = self.n_total();
        &self.q * (DMatrix::identity(n, n) - &self.h)
    }

    /// Control-weighting kernel M = B R⁻¹ Bᵀ.
    pub fn control_kernel(&self) -> DMatrix<f64> {
        let rinv_bt = self
            .r
            .clone()
            .lu()
            .solve(&self.b.transpose())
            .expect("R is validated positive definite");
        &self.b * rinv_bt
    }
}

/// Builds the population aggregates from per-class models and an explicit
/// N×N coupling matrix. No assumption validation happens here.
pub fn assemble_population(classes: Vec<ClassModel>, h: DMatrix<f64>) -> Result<PopulationModel> {
    if classes.is_empty() {
        return Err(Error::InvalidConfig("population needs at least one class".into()));
    }
    let rho = classes[0].rho;
    if classes.iter().any(|c| c.rho != rho) {
        return Err(Error::InconsistentRho);
    }
    let n: usize = classes.iter().map(ClassModel::nx).sum();
    let m: usize = classes.iter().map(ClassModel::nu).sum();
    let dw: usize = classes.iter().map(ClassModel::nw).sum();
    if h.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "H is {}x{}, expected {n}x{n}",
            h.nrows(),
            h.ncols()
        )));
    }
    let a = block_diag(classes.iter().map(|c| c.a.clone()), n, n);
    let b = block_diag(classes.iter().map(|c| c.b.clone()), n, m);
    let q = block_diag(classes.iter().map(|c| c.q.clone()), n, n);
    let r = block_diag(classes.iter().map(|c| c.r.clone()), m, m);
    let d = block_diag(classes.iter().map(|c| c.d.clone()), n, dw);
    Ok(PopulationModel { classes, h, a, b, q, r, d })
}

/// Builds the coupling matrix H = Q^{-1/2} (H̃ / λ_max) Q^{1/2} from a
/// symmetric block template H̃ with zero diagonal blocks, where λ_max is the
/// largest eigenvalue of the unnormalized H̃. The similarity transform by the
/// symmetric square root of Q makes Q(I − H) symmetric by construction.
pub fn build_coupling_matrix(
    q: &DMatrix<f64>,
    htilde: &DMatrix<f64>,
    partition: &[usize],
) -> Result<DMatrix<f64>> {
    let n: usize = partition.iter().sum();
    if q.shape() != (n, n) || htilde.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "coupling: Q is {}x{}, Htilde is {}x{}, partition sums to {n}",
            q.nrows(),
            q.ncols(),
            htilde.nrows(),
            htilde.ncols()
        )));
    }
    if !linalg::is_symmetric(htilde, 1e-9) {
        return Err(Error::NotSymmetric("Htilde".into()));
    }
    let mut off = 0;
    for &nk in partition {
        let diag_block = htilde.view((off, off), (nk, nk));
        if diag_block.iter().any(|&v| v.abs() > 1e-12) {
            return Err(Error::InvalidConfig(
                "Htilde diagonal blocks must be zero (no self-coupling)".into(),
            ));
        }
        off += nk;
    }
    if htilde.norm() == 0.0 {
        return Ok(DMatrix::zeros(n, n));
    }
    if !linalg::is_symmetric(q, 1e-9) {
        return Err(Error::NotSymmetric("Q".into()));
    }
    let eig = linalg::sym_part(q).symmetric_eigen();
    let lam_min = eig.eigenvalues.min();
    if lam_min <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!(
            "Q (lambda_min {lam_min:.3e}) in coupling construction"
        )));
    }
    let lam_max_htilde = linalg::sym_part(htilde).symmetric_eigen().eigenvalues.max();
    if lam_max_htilde <= 0.0 {
        return Err(Error::DegenerateCoupling(lam_max_htilde));
    }
    let u = &eig.eigenvectors;
    let q_sqrt = u * DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt)) * u.transpose();
    let q_isqrt =
        u * DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt())) * u.transpose();
    Ok(q_isqrt * (htilde / lam_max_htilde) * q_sqrt)
}

/// Per-class assumption flags.
#[derive(Debug, Clone, Copy)]
pub struct ClassAssumptions {
    pub stabilizable: bool,
    pub observable: bool,
}

/// Result of checking every standing assumption on a population. Carries
/// pass/fail detail; callers decide whether to abort.
#[derive(Debug, Clone)]
pub struct AssumptionReport {
    pub per_class: Vec<ClassAssumptions>,
    pub aggregate_stabilizable: bool,
    pub aggregate_observable: bool,
    /// Frobenius norm of Q(I−H) − (Q(I−H))ᵀ.
    pub coupling_symmetry_residual: f64,
    pub coupling_symmetric: bool,
    /// Sign pattern of the global Hamiltonian spectrum.
    pub splitting: linalg::SplittingCounts,
    /// Condition number of the top N×N block of the stable-subspace basis.
    pub graph_condition: f64,
    pub graph_ok: bool,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.per_class.iter().all(|c| c.stabilizable && c.observable)
            && self.aggregate_stabilizable
            && self.aggregate_observable
            && self.coupling_symmetric
            && self.splitting.on_axis == 0
            && self.splitting.negative == self.splitting.positive
            && self.graph_ok
    }
}

impl std::fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for (k, c) in self.per_class.iter().enumerate() {
            writeln!(
                f,
                "class {k}: stabilizable={} observable={}",
                c.stabilizable, c.observable
            )?;
        }
        writeln!(
            f,
            "aggregate: stabilizable={} observable={}",
            self.aggregate_stabilizable, self.aggregate_observable
        )?;
        writeln!(
            f,
            "Q(I-H) symmetry residual = {:.3e} ({})",
            self.coupling_symmetry_residual,
            if self.coupling_symmetric { "ok" } else { "FAIL" }
        )?;
        writeln!(
            f,
            "Hamiltonian splitting: {} stable / {} unstable / {} on-axis",
            self.splitting.negative, self.splitting.positive, self.splitting.on_axis
        )?;
        writeln!(
            f,
            "graph-subspace condition = {:.3e} ({})",
            self.graph_condition,
            if self.graph_ok { "ok" } else { "FAIL" }
        )?;
        write!(f, "overall: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Checks stabilizability/observability per class and in aggregate (both on
/// the discount-shifted drift), symmetry of Q(I−H), and the spectral
/// splitting plus graph-subspace conditioning of the global Hamiltonian.
pub fn validate_assumptions(pop: &PopulationModel) -> AssumptionReport {
    let tol = 1e-9;
    let per_class = pop
        .classes
        .iter()
        .map(|c| {
            let abar = c.a_shifted();
            let stabilizable = linalg::pbh_stabilizable(&abar, &c.b, tol);
            let observable = match linalg::sqrtm_psd(&c.q, 1e-12) {
                Ok(q_sqrt) => linalg::pbh_observable(&abar, &q_sqrt),
                Err(_) => false,
            };
            ClassAssumptions { stabilizable, observable }
        })
        .collect();

    let abar = pop.a_shifted();
    let aggregate_stabilizable = linalg::pbh_stabilizable(&abar, &pop.b, tol);
    let aggregate_observable = match linalg::sqrtm_psd(&pop.q, 1e-12) {
        Ok(q_sqrt) => linalg::pbh_observable(&abar, &q_sqrt),
        Err(_) => false,
    };

    let qeff = pop.q_i_minus_h();
    let coupling_symmetry_residual = (&qeff - qeff.transpose()).norm();
    let coupling_symmetric = coupling_symmetry_residual <= 1e-9 * qeff.norm().max(1.0);

    let ham = crate::riccati::hamiltonian_matrix(&abar, &pop.control_kernel(), &qeff);
    let splitting = linalg::SplittingCounts::of(&ham, tol);
    let n = pop.n_total();
    let (graph_condition, graph_ok) = match linalg::stable_subspace(&ham) {
        Ok(v) if v.ncols() == n => {
            let v1 = v.rows(0, n).into_owned();
            let c = linalg::cond(&v1);
            (c, c < 1e12)
        }
        _ => (f64::INFINITY, false),
    };

    AssumptionReport {
        per_class,
        aggregate_stabilizable,
        aggregate_observable,
        coupling_symmetry_residual,
        coupling_symmetric,
        splitting,
        graph_condition,
        graph_ok,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use crate::demo;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn mat(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    fn scalar_class(a: f64, b: f64, q: f64, r: f64, rho: f64) -> ClassModel {
        ClassModel::new(
            mat(1, 1, &[a]),
            mat(1, 1, &[b]),
            mat(1, 1, &[0.1]),
            mat(1, 1, &[q]),
            mat(1, 1, &[r]),
            rho,
        )
        .unwrap()
    }

    #[test]
    fn three_class_population_has_expected_dimensions() {
        let pop = demo::three_class_population().unwrap();
        assert_eq!(pop.num_classes(), 3);
        assert_eq!(pop.n_total(), 7);
        assert_eq!(pop.m_total(), 4);
        assert_eq!(pop.state_offsets(), vec![0, 2, 5, 7]);
        assert_eq!(pop.input_offsets(), vec![0, 1, 3, 4]);
    }

    #[test]
    fn single_class_aggregates_equal_class_matrices() {
        let c = scalar_class(-1.0, 1.0, 1.0, 1.0, 0.1);
        let pop = assemble_population(vec![c.clone()], DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(pop.a, c.a);
        assert_eq!(pop.b, c.b);
        assert_eq!(pop.q, c.q);
        assert_eq!(pop.r, c.r);
        assert_eq!(pop.n_total(), 1);
    }

    #[test]
    fn two_scalar_classes_place_blocks_on_diagonal() {
        let c1 = scalar_class(-1.0, 1.0, 1.0, 1.0, 0.1);
        let c2 = scalar_class(-2.0, 1.0, 1.0, 1.0, 0.1);
        let pop = assemble_population(vec![c1, c2], DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(pop.a, DMatrix::from_diagonal(&DVector::from_column_slice(&[-1.0, -2.0])));
    }

    #[test]
    fn mismatched_rho_is_rejected() {
        let c1 = scalar_class(-1.0, 1.0, 1.0, 1.0, 0.1);
        let c2 = scalar_class(-2.0, 1.0, 1.0, 1.0, 0.2);
        assert!(matches!(
            assemble_population(vec![c1, c2], DMatrix::zeros(2, 2)),
            Err(Error::InconsistentRho)
        ));
    }

    #[test]
    fn aggregate_blocks_read_back_bit_exactly() {
        let pop = demo::three_class_population().unwrap();
        let so = pop.state_offsets();
        let io = pop.input_offsets();
        for (k, c) in pop.classes.iter().enumerate() {
            assert_eq!(pop.a.view((so[k], so[k]), (c.nx(), c.nx())).into_owned(), c.a);
            assert_eq!(pop.b.view((so[k], io[k]), (c.nx(), c.nu())).into_owned(), c.b);
            assert_eq!(pop.q.view((so[k], so[k]), (c.nx(), c.nx())).into_owned(), c.q);
            assert_eq!(pop.r.view((io[k], io[k]), (c.nu(), c.nu())).into_owned(), c.r);
        }
    }

    #[test]
    fn coupling_zero_template_gives_zero_h() {
        let q = DMatrix::identity(4, 4) * 2.0;
        let h = build_coupling_matrix(&q, &DMatrix::zeros(4, 4), &[2, 2]).unwrap();
        assert_eq!(h, DMatrix::zeros(4, 4));
    }

    #[test]
    fn coupling_identity_q_reduces_to_normalized_template() {
        let q = DMatrix::identity(4, 4);
        let mut ht = DMatrix::zeros(4, 4);
        ht.view_mut((0, 2), (2, 2)).copy_from(&(DMatrix::identity(2, 2) * 0.5));
        ht.view_mut((2, 0), (2, 2)).copy_from(&(DMatrix::identity(2, 2) * 0.5));
        let lam_max = linalg::sym_part(&ht).symmetric_eigen().eigenvalues.max();
        let h = build_coupling_matrix(&q, &ht, &[2, 2]).unwrap();
        assert_relative_eq!((&h - ht / lam_max).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn coupling_makes_q_i_minus_h_symmetric_for_demo_system() {
        let pop = demo::three_class_population().unwrap();
        let qeff = pop.q_i_minus_h();
        assert!((&qeff - qeff.transpose()).norm() < 1e-12);
    }

    #[test]
    fn coupling_rejects_bad_templates() {
        let q = DMatrix::identity(2, 2);
        // Asymmetric template.
        let ht = mat(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        assert!(build_coupling_matrix(&q, &ht, &[1, 1]).is_err());
        // Nonzero diagonal block.
        let ht = mat(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(build_coupling_matrix(&q, &ht, &[1, 1]).is_err());
        // Negative-definite template: largest eigenvalue <= 0.
        let ht = mat(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        // This one has eigenvalues ±1, so it is fine.
        assert!(build_coupling_matrix(&q, &ht, &[1, 1]).is_ok());
    }

    #[test]
    fn validate_demo_system_passes_with_balanced_splitting() {
        let pop = demo::three_class_population().unwrap();
        let report = validate_assumptions(&pop);
        assert!(report.passed(), "{report}");
        assert_eq!(report.splitting.negative, 7);
        assert_eq!(report.splitting.positive, 7);
        assert_eq!(report.splitting.on_axis, 0);
    }

    #[test]
    fn validate_hand_scalar_hamiltonian() {
        // a=-1, b=1, q=1, r=1, rho=0, H=0: Hamiltonian [[-1,-1],[-1,1]].
        let c = ClassModel::new(
            mat(1, 1, &[-1.0]),
            mat(1, 1, &[1.0]),
            mat(1, 1, &[0.0]),
            mat(1, 1, &[1.0]),
            mat(1, 1, &[1.0]),
            0.0,
        )
        .unwrap();
        let pop = assemble_population(vec![c], DMatrix::zeros(1, 1)).unwrap();
        let ham =
            crate::riccati::hamiltonian_matrix(&pop.a_shifted(), &pop.control_kernel(), &pop.q_i_minus_h());
        assert_eq!(ham, mat(2, 2, &[-1.0, -1.0, -1.0, 1.0]));
        let eigs = ham.complex_eigenvalues();
        let mut re: Vec<f64> = eigs.iter().map(|z| z.re).collect();
        re.sort_by(f64::total_cmp);
        assert_relative_eq!(re[0], -(2.0f64.sqrt()), epsilon = 1e-12);
        assert_relative_eq!(re[1], 2.0f64.sqrt(), epsilon = 1e-12);
        let report = validate_assumptions(&pop);
        assert!(report.passed(), "{report}");
        assert_eq!((report.splitting.negative, report.splitting.positive), (1, 1));
    }

    #[test]
    fn validate_flags_unstabilizable_class() {
        let c = ClassModel::new(
            mat(1, 1, &[1.0]),
            mat(1, 1, &[0.0]),
            mat(1, 1, &[0.1]),
            mat(1, 1, &[1.0]),
            mat(1, 1, &[1.0]),
            0.0,
        )
        .unwrap();
        let pop = assemble_population(vec![c], DMatrix::zeros(1, 1)).unwrap();
        let report = validate_assumptions(&pop);
        assert!(!report.per_class[0].stabilizable);
        assert!(!report.passed());
    }

    #[test]
    fn constructor_rejects_indefinite_weights() {
        assert!(ClassModel::new(
            mat(1, 1, &[-1.0]),
            mat(1, 1, &[1.0]),
            mat(1, 1, &[0.1]),
            mat(1, 1, &[-1.0]),
            mat(1, 1, &[1.0]),
            0.1,
        )
        .is_err());
        assert!(ClassModel::new(
            mat(1, 1, &[-1.0]),
            mat(1, 1, &[1.0]),
            mat(1, 1, &[0.1]),
            mat(1, 1, &[1.0]),
            mat(1, 1, &[0.0]),
            0.1,
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn coupling_symmetry_invariant(seed in 0u64..150) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
            let parts = [2usize, rng.random_range(1..4usize)];
            let n: usize = parts.iter().sum();
            // Random SPD diagonal Q and random symmetric off-diagonal template.
            let q = DMatrix::from_diagonal(&DVector::from_fn(n, |_, _| rng.random_range(0.5..30.0)));
            let mut ht = DMatrix::zeros(n, n);
            for i in 0..parts[0] {
                for j in parts[0]..n {
                    let v = rng.random_range(-1.0..1.0);
                    ht[(i, j)] = v;
                    ht[(j, i)] = v;
                }
            }
            prop_assume!(linalg::sym_part(&ht).symmetric_eigen().eigenvalues.max() > 1e-6);
            let h = build_coupling_matrix(&q, &ht, &parts).unwrap();
            let qeff = &q * (DMatrix::identity(n, n) - &h);
            let resid = (&qeff - qeff.transpose()).norm();
            prop_assert!(resid < 1e-10 * q.norm(), "residual {resid}");
        }
    }
}
