//! The bundled three-class benchmark population used by the examples, the
//! CLI defaults, and the validation suite.

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::model::{assemble_population, build_coupling_matrix, ClassModel, PopulationModel};

/// Discount rate shared by all classes in the benchmark.
pub const DEMO_RHO: f64 = 0.1;

fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_column_slice(values))
}

/// Builds the heterogeneous three-class population: two second-order classes
/// (an oscillatory one and a nonminimum-phase-like one) around a third-order
/// chain class, coupled through the first two states of every class.
pub fn three_class_population() -> Result<PopulationModel> {
    let c1 = ClassModel::new(
        DMatrix::from_row_slice(2, 2, &[0.0, 10.0, -10.0, -3.0]),
        DMatrix::from_row_slice(2, 1, &[1.0, 1.0]),
        DMatrix::identity(2, 2) * 0.1,
        diag(&[20.0, 10.0]),
        diag(&[0.8]),
        DEMO_RHO,
    )?;
    let c2 = ClassModel::new(
        DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, -2.0, -3.0, -5.0]),
        DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 0.0, 1.0, 1.0, 0.5]),
        DMatrix::identity(3, 3) * 0.1,
        diag(&[10.0, 15.0, 20.0]),
        diag(&[0.5, 0.7]),
        DEMO_RHO,
    )?;
    let c3 = ClassModel::new(
        DMatrix::from_row_slice(2, 2, &[0.0, -4.0, 3.0, -6.0]),
        DMatrix::from_row_slice(2, 1, &[0.8, 3.0]),
        DMatrix::identity(2, 2) * 0.1,
        diag(&[30.0, 20.0]),
        diag(&[0.6]),
        DEMO_RHO,
    )?;

    let q = diag(&[20.0, 10.0, 10.0, 15.0, 20.0, 30.0, 20.0]);
    let h = build_coupling_matrix(&q, &coupling_template(), &[2, 3, 2])?;
    assemble_population(vec![c1, c2, c3], h)
}

/// Symmetric coupling template with zero diagonal blocks: classes interact
/// through their first two states, with weight 1/2 on every link.
pub fn coupling_template() -> DMatrix<f64> {
    let mut ht = DMatrix::zeros(7, 7);
    // Class 1 <-> class 2 (first two states of the chain).
    ht[(0, 2)] = 0.5;
    ht[(1, 3)] = 0.5;
    // Class 1 <-> class 3.
    ht[(0, 5)] = 0.5;
    ht[(1, 6)] = 0.5;
    // Class 3 <-> class 2.
    ht[(5, 2)] = 0.5;
    ht[(6, 3)] = 0.5;
    let sym = &ht + ht.transpose();
    sym
}
