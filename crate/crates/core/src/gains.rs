//! Feedback-gain triples (class gains, global gain, tracking gain) shared by
//! the ground-truth and learned pipelines.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::PopulationModel;
use crate::riccati::gain_from_value;

/// A complete strategy description: per-class local gains L_{P,k}, the global
/// gain L_Ω on the stacked state, and the tracking gain L_Π = L_Ω − diag(L_P).
///
/// The stored `l_omega` is reconstructed as `l_pi + diag(l_p)` at
/// construction, so that identity holds bit-exactly on the stored fields
/// (plain IEEE subtract-then-add does not guarantee it). The reconstruction
/// perturbs each entry by at most one ulp relative to the input gain.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSet {
    pub l_p: Vec<DMatrix<f64>>,
    pub l_omega: DMatrix<f64>,
    pub l_pi: DMatrix<f64>,
    state_partition: Vec<usize>,
    input_partition: Vec<usize>,
}

fn block_diag_gains(l_p: &[DMatrix<f64>], n: usize, m: usize) -> DMatrix<f64> {
    let mut d = DMatrix::zeros(m, n);
    let (mut ro, mut co) = (0, 0);
    for l in l_p {
        d.view_mut((ro, co), l.shape()).copy_from(l);
        ro += l.nrows();
        co += l.ncols();
    }
    d
}

impl GainSet {
    pub fn new(l_p: Vec<DMatrix<f64>>, l_omega: DMatrix<f64>, pop: &PopulationModel) -> Result<Self> {
        let (n, m) = (pop.n_total(), pop.m_total());
        if l_omega.shape() != (m, n) {
            return Err(Error::DimensionMismatch(format!(
                "global gain is {}x{}, expected {m}x{n}",
                l_omega.nrows(),
                l_omega.ncols()
            )));
        }
        if l_p.len() != pop.num_classes() {
            return Err(Error::DimensionMismatch(format!(
                "{} class gains for {} classes",
                l_p.len(),
                pop.num_classes()
            )));
        }
        for (k, (l, c)) in l_p.iter().zip(&pop.classes).enumerate() {
            if l.shape() != (c.nu(), c.nx()) {
                return Err(Error::DimensionMismatch(format!(
                    "class {k} gain is {}x{}, expected {}x{}",
                    l.nrows(),
                    l.ncols(),
                    c.nu(),
                    c.nx()
                )));
            }
        }
        let diag = block_diag_gains(&l_p, n, m);
        let l_pi = &l_omega - &diag;
        // Overwrite with the exact sum so l_pi + diag(l_p) == l_omega holds
        // on the stored values.
        let l_omega = &l_pi + &diag;
        Ok(Self {
            l_p,
            l_omega,
            l_pi,
            state_partition: pop.state_partition(),
            input_partition: pop.classes.iter().map(|c| c.nu()).collect(),
        })
    }

    /// Model-based gains from the value matrices: L_{P,k} = R_k⁻¹B_kᵀP_k and
    /// L_Ω = R⁻¹BᵀΩ.
    pub fn from_value_matrices(
        pop: &PopulationModel,
        p_blocks: &[DMatrix<f64>],
        omega: &DMatrix<f64>,
    ) -> Result<Self> {
        let l_p = pop
            .classes
            .iter()
            .zip(p_blocks)
            .map(|(c, p)| gain_from_value(&c.b, &c.r, p))
            .collect::<Result<Vec<_>>>()?;
        let l_omega = gain_from_value(&pop.b, &pop.r, omega)?;
        Self::new(l_p, l_omega, pop)
    }

    pub fn num_classes(&self) -> usize {
        self.l_p.len()
    }

    /// Rows of the tracking gain belonging to class k (m_k × N, acting on the
    /// full stacked mean field).
    pub fn l_pi_class(&self, k: usize) -> DMatrix<f64> {
        let row0: usize = self.input_partition[..k].iter().sum();
        self.l_pi.rows(row0, self.input_partition[k]).into_owned()
    }

    /// diag(L_{P,1}, ..., L_{P,K}) as a dense M×N matrix.
    pub fn block_diag_lp(&self) -> DMatrix<f64> {
        block_diag_gains(
            &self.l_p,
            self.state_partition.iter().sum(),
            self.input_partition.iter().sum(),
        )
    }
}
