//! The model-free learner: discounted data integrals over a window set, the
//! per-class and global least-squares regressions, the excitation rank
//! check, and the policy-iteration loop that alternates evaluation and
//! improvement on data alone.
//!
//! Conventions fixed here and relied on everywhere:
//!
//! * Quadratic data rows use the "hat" vectorization with doubled
//!   off-diagonal entries (x̂ = [x₁², 2x₁x₂, ..., xₙ²]); the matching
//!   coefficient vector therefore carries the plain upper-triangular entries
//!   of the symmetric unknown, so x̂ᵀ·p̂ = xᵀPx and reconstruction does not
//!   halve anything.
//! * Kronecker data stacks are x-major: the (x ⊗ α) entry at index i·M + c
//!   is x_i·α_c, and (x ⊗ x) rows are the row-major flattening of xxᵀ.
//! * Gain vectorization is column-stacked: vec(L) at index i·m + c is
//!   L[c, i].
//! * The discount column δρ(t) = e^{−ρ(t+Δt)} − e^{−ρt} multiplies
//!   θ = Tr(DDᵀP)/ρ with a positive sign inside Ξ.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gains::GainSet;
use crate::linalg::{self, hat_index, hat_len};
use crate::model::PopulationModel;
use crate::simulator::{self, ExplorationPolicy, InitialState, TrajectoryEnsemble};

/// Integration windows [t_j, t_j + Δt] for the temporal-difference rows.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    starts: Vec<f64>,
    pub dt: f64,
}

impl WindowSet {
    pub fn new(starts: Vec<f64>, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidConfig(format!("window length must be positive, got {dt}")));
        }
        if starts.is_empty() {
            return Err(Error::InvalidConfig("empty window set".into()));
        }
        if starts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("window starts must be strictly increasing".into()));
        }
        Ok(Self { starts, dt })
    }

    /// l back-to-back windows: t_j = j·Δt.
    pub fn contiguous(count: usize, dt: f64) -> Result<Self> {
        Self::new((0..count).map(|j| j as f64 * dt).collect(), dt)
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    /// Time the data grid must cover.
    pub fn required_span(&self) -> f64 {
        self.starts.last().unwrap() + self.dt
    }

    /// Maps every window to (start, end) indices on a uniform grid of step h.
    fn grid_bounds(&self, n_grid: usize, h: f64) -> Result<Vec<(usize, usize)>> {
        let locate = |t: f64| -> Result<usize> {
            let j = (t / h).round();
            if j < 0.0 || (j * h - t).abs() > 1e-9 * t.max(1.0) {
                return Err(Error::WindowMisaligned(format!(
                    "time {t} is not on the recorded grid (step {h})"
                )));
            }
            let j = j as usize;
            if j >= n_grid {
                return Err(Error::WindowMisaligned(format!(
                    "time {t} lies outside the recorded span"
                )));
            }
            Ok(j)
        };
        self.starts
            .iter()
            .map(|&t0| {
                let j0 = locate(t0)?;
                let j1 = locate(t0 + self.dt)?;
                if j1 - j0 < 1 {
                    return Err(Error::WindowMisaligned(format!(
                        "window at {t0} spans fewer than two grid points"
                    )));
                }
                Ok((j0, j1))
            })
            .collect()
    }
}

/// Iteration-independent integral stacks at one aggregation level: the
/// discounted endpoint differences Δ₁ (hat rows), and the window integrals
/// of e^{−ρτ}(x ⊗ x) and e^{−ρτ}(x ⊗ α).
#[derive(Debug, Clone, PartialEq)]
pub struct IntegralStacks {
    pub d1: DMatrix<f64>,
    pub ixx: DMatrix<f64>,
    pub ixa: DMatrix<f64>,
}

/// All raw data the learner consumes: global stacks, their per-class
/// restrictions, and the shared discount column δρ. The class stacks are
/// column subselections of the global ones, so the two levels can never
/// drift apart.
#[derive(Debug, Clone, PartialEq)]
pub struct DataMatrices {
    pub global: IntegralStacks,
    pub classes: Vec<IntegralStacks>,
    pub d6: DVector<f64>,
    pub n_runs: usize,
    pub state_partition: Vec<usize>,
    pub input_partition: Vec<usize>,
}

impl DataMatrices {
    pub fn windows(&self) -> usize {
        self.global.d1.nrows()
    }

    pub fn n_total(&self) -> usize {
        self.state_partition.iter().sum()
    }

    pub fn m_total(&self) -> usize {
        self.input_partition.iter().sum()
    }
}

/// Unknown count of one regression: hat coefficients, gain entries, and θ.
pub fn required_columns(n: usize, m: usize) -> usize {
    hat_len(n) + n * m + 1
}

/// Hat vector of a state: diagonal entries squared, off-diagonal products
/// doubled, upper-triangular order.
fn hat_of_state(x: &[f64], out: &mut [f64]) {
    let n = x.len();
    let mut idx = 0;
    for i in 0..n {
        out[idx] = x[i] * x[i];
        idx += 1;
        for j in i + 1..n {
            out[idx] = 2.0 * x[i] * x[j];
            idx += 1;
        }
    }
}

/// Per-run integral rows on the global level.
struct RunRows {
    d1: DMatrix<f64>,
    ixx: DMatrix<f64>,
    ixa: DMatrix<f64>,
}

fn run_rows(
    times: &[f64],
    xs: &DMatrix<f64>,
    us: &DMatrix<f64>,
    rho: f64,
    bounds: &[(usize, usize)],
) -> RunRows {
    let n = xs.nrows();
    let m = us.nrows();
    let l = bounds.len();
    let h = times[1] - times[0];
    let mut d1 = DMatrix::zeros(l, hat_len(n));
    let mut ixx = DMatrix::zeros(l, n * n);
    let mut ixa = DMatrix::zeros(l, n * m);
    let mut hat_buf = vec![0.0; hat_len(n)];
    let mut xx_buf = vec![0.0; n * n];
    let mut xa_buf = vec![0.0; n * m];

    for (w, &(j0, j1)) in bounds.iter().enumerate() {
        xx_buf.fill(0.0);
        xa_buf.fill(0.0);
        for j in j0..=j1 {
            let disc = (-rho * times[j]).exp();
            let weight = if j == j0 || j == j1 { 0.5 * h * disc } else { h * disc };
            let x = xs.column(j);
            let u = us.column(j);
            for a in 0..n {
                let wa = weight * x[a];
                for b in 0..n {
                    xx_buf[a * n + b] += wa * x[b];
                }
                for c in 0..m {
                    xa_buf[a * m + c] += wa * u[c];
                }
            }
        }
        for (col, &v) in xx_buf.iter().enumerate() {
            ixx[(w, col)] = v;
        }
        for (col, &v) in xa_buf.iter().enumerate() {
            ixa[(w, col)] = v;
        }
        let e0 = (-rho * times[j0]).exp();
        let e1 = (-rho * times[j1]).exp();
        hat_of_state(xs.column(j1).as_slice(), &mut hat_buf);
        for (col, &v) in hat_buf.iter().enumerate() {
            d1[(w, col)] = e1 * v;
        }
        hat_of_state(xs.column(j0).as_slice(), &mut hat_buf);
        for (col, &v) in hat_buf.iter().enumerate() {
            d1[(w, col)] -= e0 * v;
        }
    }
    RunRows { d1, ixx, ixa }
}

/// Column maps from the global stacks to one class's stacks.
struct ClassColumns {
    hat: Vec<usize>,
    xx: Vec<usize>,
    xa: Vec<usize>,
}

fn class_columns(state_partition: &[usize], input_partition: &[usize]) -> Vec<ClassColumns> {
    let n: usize = state_partition.iter().sum();
    let m: usize = input_partition.iter().sum();
    let mut maps = Vec::with_capacity(state_partition.len());
    let (mut so, mut io) = (0, 0);
    for (&nk, &mk) in state_partition.iter().zip(input_partition) {
        let mut hat = Vec::with_capacity(hat_len(nk));
        for a in 0..nk {
            for b in a..nk {
                hat.push(hat_index(so + a, so + b, n));
            }
        }
        let mut xx = Vec::with_capacity(nk * nk);
        for a in 0..nk {
            for b in 0..nk {
                xx.push((so + a) * n + (so + b));
            }
        }
        let mut xa = Vec::with_capacity(nk * mk);
        for a in 0..nk {
            for c in 0..mk {
                xa.push((so + a) * m + (io + c));
            }
        }
        maps.push(ClassColumns { hat, xx, xa });
        so += nk;
        io += mk;
    }
    maps
}

fn split_global(
    global: IntegralStacks,
    d6: DVector<f64>,
    n_runs: usize,
    state_partition: Vec<usize>,
    input_partition: Vec<usize>,
) -> DataMatrices {
    let maps = class_columns(&state_partition, &input_partition);
    let classes = maps
        .iter()
        .map(|m| IntegralStacks {
            d1: global.d1.select_columns(m.hat.iter()),
            ixx: global.ixx.select_columns(m.xx.iter()),
            ixa: global.ixa.select_columns(m.xa.iter()),
        })
        .collect();
    DataMatrices { global, classes, d6, n_runs, state_partition, input_partition }
}

fn discount_column(times: &[f64], rho: f64, bounds: &[(usize, usize)]) -> DVector<f64> {
    DVector::from_iterator(
        bounds.len(),
        bounds
            .iter()
            .map(|&(j0, j1)| (-rho * times[j1]).exp() - (-rho * times[j0]).exp()),
    )
}

/// Monte Carlo estimate of the integral identities from a recorded ensemble:
/// per-run trapezoidal quadrature of the discounted products on the recorded
/// grid, averaged across runs.
pub fn compute_data_integrals(ens: &TrajectoryEnsemble, windows: &WindowSet) -> Result<DataMatrices> {
    if ens.n_runs() == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let h = ens.recorded_step();
    let bounds = windows.grid_bounds(ens.times.len(), h)?;
    let per_run: Vec<RunRows> = ens
        .states
        .par_iter()
        .zip(ens.inputs.par_iter())
        .map(|(xs, us)| run_rows(&ens.times, xs, us, ens.rho, &bounds))
        .collect();
    let global = average_rows(per_run, ens.n_total(), ens.m_total(), windows.len());
    let d6 = discount_column(&ens.times, ens.rho, &bounds);
    Ok(split_global(
        global,
        d6,
        ens.n_runs(),
        ens.state_partition.clone(),
        ens.input_partition.clone(),
    ))
}

fn average_rows(per_run: Vec<RunRows>, n: usize, m: usize, l: usize) -> IntegralStacks {
    let n_runs = per_run.len();
    let mut d1 = DMatrix::zeros(l, hat_len(n));
    let mut ixx = DMatrix::zeros(l, n * n);
    let mut ixa = DMatrix::zeros(l, n * m);
    for r in per_run {
        d1 += r.d1;
        ixx += r.ixx;
        ixa += r.ixa;
    }
    let scale = 1.0 / n_runs as f64;
    IntegralStacks { d1: d1 * scale, ixx: ixx * scale, ixa: ixa * scale }
}

/// Fused simulate-and-integrate path: generates each run with the simulator,
/// folds its integral rows, and discards the trajectory. Bit-identical to
/// materializing the ensemble and calling [`compute_data_integrals`], at a
/// fraction of the memory.
#[allow(clippy::too_many_arguments)]
pub fn compute_data_integrals_streaming(
    pop: &PopulationModel,
    policy: &ExplorationPolicy,
    x0: &InitialState,
    t_total: f64,
    h_sde: f64,
    record_stride: usize,
    n_runs: usize,
    seed: u64,
    windows: &WindowSet,
) -> Result<DataMatrices> {
    let h_rec = h_sde * record_stride as f64;
    let n_grid = (t_total / h_rec).round() as usize + 1;
    let bounds = windows.grid_bounds(n_grid, h_rec)?;
    let rho = pop.rho();
    let per_run = simulator::for_each_run(
        pop,
        policy,
        x0,
        t_total,
        h_sde,
        record_stride,
        n_runs,
        seed,
        |_, times, xs, us| Ok(run_rows(times, xs, us, rho, &bounds)),
    )?;
    let global = average_rows(per_run, pop.n_total(), pop.m_total(), windows.len());
    let times: Vec<f64> = (0..n_grid).map(|j| j as f64 * h_rec).collect();
    let d6 = discount_column(&times, rho, &bounds);
    Ok(split_global(
        global,
        d6,
        n_runs,
        pop.state_partition(),
        pop.classes.iter().map(|c| c.nu()).collect(),
    ))
}

/// Closed-form integral oracle: propagates the exact first and second
/// moments of the linear SDE under α = −L0·X + l(t) with RK4 and evaluates
/// the same stacks the data path estimates. Not model-free; exists so the
/// learner can be checked against policy iteration without Monte Carlo
/// error.
pub fn integrals_from_model(
    pop: &PopulationModel,
    policy: &ExplorationPolicy,
    x0: &DVector<f64>,
    windows: &WindowSet,
    h_ode: f64,
) -> Result<DataMatrices> {
    let n = pop.n_total();
    let m = pop.m_total();
    if x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "initial state has length {}, expected {n}",
            x0.len()
        )));
    }
    if !(h_ode > 0.0) {
        return Err(Error::InvalidConfig("oracle step must be positive".into()));
    }
    let rho = pop.rho();
    let f = &pop.a - &pop.b * &policy.l0;
    let ddt = &pop.d * pop.d.transpose();
    let l0t = policy.l0.transpose();
    let bank = policy.bank_for_run(0);

    // Augmented state y = [μ | vec(S) | ∫e^{−ρτ}vec(S) | ∫e^{−ρτ}vec(E[xαᵀ])].
    let off_s = n;
    let off_xx = off_s + n * n;
    let off_xa = off_xx + n * n;
    let dim = off_xa + n * m;
    let unpack_s = |y: &DVector<f64>| DMatrix::from_fn(n, n, |i, j| y[off_s + j * n + i]);
    let deriv = |t: f64, y: &DVector<f64>| -> DVector<f64> {
        let mu = y.rows(0, n).into_owned();
        let s = unpack_s(y);
        let l = bank.sample(t);
        let bl = &pop.b * &l;
        let f_mu = &f * &mu + &bl;
        let f_s = &f * &s + &s * f.transpose() + &bl * mu.transpose() + &mu * bl.transpose() + &ddt;
        let disc = (-rho * t).exp();
        let c = &mu * l.transpose() - &s * &l0t;
        let mut dy = DVector::zeros(dim);
        dy.rows_mut(0, n).copy_from(&f_mu);
        for j in 0..n {
            for i in 0..n {
                dy[off_s + j * n + i] = f_s[(i, j)];
            }
        }
        // x-major kron layouts: (x⊗x) index a·n+b, (x⊗α) index a·m+c. S stays
        // bitwise symmetric along the flow, so row- and column-major agree.
        for a in 0..n {
            for b in 0..n {
                dy[off_xx + a * n + b] = disc * s[(a, b)];
            }
            for ch in 0..m {
                dy[off_xa + a * m + ch] = disc * c[(a, ch)];
            }
        }
        dy
    };

    // Window boundaries must sit on the oracle grid.
    let span = windows.required_span();
    let n_steps = (span / h_ode).round() as usize;
    if ((n_steps as f64) * h_ode - span).abs() > 1e-9 * span.max(1.0) {
        return Err(Error::WindowMisaligned(format!(
            "window span {span} is not a multiple of the oracle step {h_ode}"
        )));
    }
    let bounds = windows.grid_bounds(n_steps + 1, h_ode)?;
    let mut want: Vec<usize> = bounds.iter().flat_map(|&(a, b)| [a, b]).collect();
    want.sort_unstable();
    want.dedup();

    let mut y = DVector::zeros(dim);
    y.rows_mut(0, n).copy_from(x0);
    for j in 0..n {
        for i in 0..n {
            y[off_s + j * n + i] = x0[i] * x0[j];
        }
    }

    struct Snapshot {
        hat: Vec<f64>,
        xx: Vec<f64>,
        xa: Vec<f64>,
    }
    let mut snaps: Vec<Option<Snapshot>> = (0..=n_steps).map(|_| None).collect();
    let mut want_iter = want.iter().peekable();
    for step in 0..=n_steps {
        if want_iter.peek() == Some(&&step) {
            want_iter.next();
            let t = step as f64 * h_ode;
            let disc = (-rho * t).exp();
            let s = unpack_s(&y);
            let mut hat = vec![0.0; hat_len(n)];
            let mut idx = 0;
            for i in 0..n {
                for j in i..n {
                    hat[idx] = if i == j { disc * s[(i, i)] } else { 2.0 * disc * s[(i, j)] };
                    idx += 1;
                }
            }
            snaps[step] = Some(Snapshot {
                hat,
                xx: y.rows(off_xx, n * n).iter().copied().collect(),
                xa: y.rows(off_xa, n * m).iter().copied().collect(),
            });
        }
        if step == n_steps {
            break;
        }
        let t = step as f64 * h_ode;
        let k1 = deriv(t, &y);
        let k2 = deriv(t + h_ode / 2.0, &(&y + &k1 * (h_ode / 2.0)));
        let k3 = deriv(t + h_ode / 2.0, &(&y + &k2 * (h_ode / 2.0)));
        let k4 = deriv(t + h_ode, &(&y + &k3 * h_ode));
        y += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h_ode / 6.0);
    }

    let l = windows.len();
    let mut d1 = DMatrix::zeros(l, hat_len(n));
    let mut ixx = DMatrix::zeros(l, n * n);
    let mut ixa = DMatrix::zeros(l, n * m);
    for (w, &(j0, j1)) in bounds.iter().enumerate() {
        let s0 = snaps[j0].as_ref().unwrap();
        let s1 = snaps[j1].as_ref().unwrap();
        for col in 0..hat_len(n) {
            d1[(w, col)] = s1.hat[col] - s0.hat[col];
        }
        for col in 0..n * n {
            ixx[(w, col)] = s1.xx[col] - s0.xx[col];
        }
        for col in 0..n * m {
            ixa[(w, col)] = s1.xa[col] - s0.xa[col];
        }
    }
    let times: Vec<f64> = (0..=n_steps).map(|j| j as f64 * h_ode).collect();
    let d6 = discount_column(&times, rho, &bounds);
    Ok(split_global(
        IntegralStacks { d1, ixx, ixa },
        d6,
        1,
        pop.state_partition(),
        pop.classes.iter().map(|c| c.nu()).collect(),
    ))
}

/// Everything the learner may know about the objective: cost weights only.
#[derive(Debug, Clone)]
pub struct CostMatrices {
    pub q: Vec<DMatrix<f64>>,
    pub r: Vec<DMatrix<f64>>,
    pub q_eff: DMatrix<f64>,
    pub r_global: DMatrix<f64>,
}

impl CostMatrices {
    pub fn from_population(pop: &PopulationModel) -> Self {
        Self {
            q: pop.classes.iter().map(|c| c.q.clone()).collect(),
            r: pop.classes.iter().map(|c| c.r.clone()).collect(),
            q_eff: pop.q_i_minus_h(),
            r_global: pop.r.clone(),
        }
    }
}

/// Builds one regression pair (Ξ, rhs) from raw stacks and the current gain:
/// Ξ = [Δ₁ | −2·I_xx·(I ⊗ LᵀR) − 2·I_xα·(I ⊗ R) | δρ] and
/// rhs = −I_xx·vec(LᵀRL + Q).
fn regression_pair(
    stacks: &IntegralStacks,
    d6: &DVector<f64>,
    l_gain: &DMatrix<f64>,
    r: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> (DMatrix<f64>, DVector<f64>) {
    let n = l_gain.ncols();
    let eye = DMatrix::identity(n, n);
    let lt_r = l_gain.transpose() * r;
    let d2 = -2.0 * (&stacks.ixx * linalg::kron(&eye, &lt_r)) - 2.0 * (&stacks.ixa * linalg::kron(&eye, r));
    let l_rows = stacks.d1.nrows();
    let cols = stacks.d1.ncols() + d2.ncols() + 1;
    let mut xi = DMatrix::zeros(l_rows, cols);
    xi.view_mut((0, 0), (l_rows, stacks.d1.ncols())).copy_from(&stacks.d1);
    xi.view_mut((0, stacks.d1.ncols()), (l_rows, d2.ncols())).copy_from(&d2);
    xi.view_mut((0, cols - 1), (l_rows, 1)).copy_from(d6);
    let w = &lt_r * l_gain + q;
    let rhs = -(&stacks.ixx * linalg::vec_col(&w));
    (xi, rhs)
}

/// Assembled regressions for one iteration: per-class pairs and the global
/// pair, in class order.
pub fn assemble_regression(
    raw: &DataMatrices,
    costs: &CostMatrices,
    class_gains: &[DMatrix<f64>],
    l_omega: &DMatrix<f64>,
) -> Result<(Vec<(DMatrix<f64>, DVector<f64>)>, (DMatrix<f64>, DVector<f64>))> {
    if class_gains.len() != raw.classes.len() || costs.q.len() != raw.classes.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} class gains and {} cost blocks for {} classes",
            class_gains.len(),
            costs.q.len(),
            raw.classes.len()
        )));
    }
    for (k, ((l, q), &nk)) in class_gains.iter().zip(&costs.q).zip(&raw.state_partition).enumerate()
    {
        if l.ncols() != nk || q.nrows() != nk || l.nrows() != raw.input_partition[k] {
            return Err(Error::DimensionMismatch(format!("class {k} gain or weight shape")));
        }
    }
    if l_omega.shape() != (raw.m_total(), raw.n_total()) {
        return Err(Error::DimensionMismatch("global gain shape".into()));
    }
    let class_pairs = raw
        .classes
        .iter()
        .zip(class_gains)
        .zip(costs.q.iter().zip(&costs.r))
        .map(|((stacks, l), (q, r))| regression_pair(stacks, &raw.d6, l, r, q))
        .collect();
    let global_pair = regression_pair(&raw.global, &raw.d6, l_omega, &costs.r_global, &costs.q_eff);
    Ok((class_pairs, global_pair))
}

/// Numerical rank report for one regression matrix.
#[derive(Debug, Clone)]
pub struct RankCheck {
    pub label: String,
    pub rank: usize,
    pub required: usize,
    /// required-th singular value (the excitation margin).
    pub margin: f64,
    pub passed: bool,
}

#[derive(Debug, Clone)]
pub struct ExcitationReport {
    pub classes: Vec<RankCheck>,
    pub global: RankCheck,
}

impl ExcitationReport {
    pub fn passed(&self) -> bool {
        self.global.passed && self.classes.iter().all(|c| c.passed)
    }
}

impl std::fmt::Display for ExcitationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in self.classes.iter().chain(std::iter::once(&self.global)) {
            writeln!(
                f,
                "{}: rank {}/{} (margin {:.3e}) {}",
                c.label,
                c.rank,
                c.required,
                c.margin,
                if c.passed { "ok" } else { "DEFICIENT" }
            )?;
        }
        Ok(())
    }
}

fn rank_check(label: String, xi: &DMatrix<f64>) -> RankCheck {
    let required = xi.ncols();
    let svd = xi.clone().svd(false, false);
    let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let sigma_max = sv.first().copied().unwrap_or(0.0);
    let tol = sigma_max * xi.nrows().max(xi.ncols()) as f64 * 1e-12;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    let margin = sv.get(required - 1).copied().unwrap_or(0.0);
    RankCheck { label, rank, required, margin, passed: rank >= required }
}

/// Rank check of every regression matrix at the given gains (normally the
/// initial ones, matching the data-collection policy).
pub fn check_excitation(
    raw: &DataMatrices,
    costs: &CostMatrices,
    class_gains: &[DMatrix<f64>],
    l_omega: &DMatrix<f64>,
) -> Result<ExcitationReport> {
    let (class_pairs, global_pair) = assemble_regression(raw, costs, class_gains, l_omega)?;
    let classes = class_pairs
        .iter()
        .enumerate()
        .map(|(k, (xi, _))| rank_check(format!("class {}", k + 1), xi))
        .collect();
    let global = rank_check("global".into(), &global_pair.0);
    Ok(ExcitationReport { classes, global })
}

/// One policy-iteration step's output.
#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub p: Vec<DMatrix<f64>>,
    pub l_p: Vec<DMatrix<f64>>,
    pub theta_p: Vec<f64>,
    pub omega: DMatrix<f64>,
    pub l_omega: DMatrix<f64>,
    pub theta_omega: f64,
    /// Largest Frobenius step over the class value matrices (∞ on the first
    /// iteration).
    pub step_class: f64,
    pub step_global: f64,
}

/// Result of the least-squares policy iteration.
#[derive(Debug, Clone)]
pub struct LearnedSolution {
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    pub p: Vec<DMatrix<f64>>,
    pub l_p: Vec<DMatrix<f64>>,
    pub theta_p: Vec<f64>,
    pub omega: DMatrix<f64>,
    pub l_omega: DMatrix<f64>,
    pub theta_omega: f64,
    state_partition: Vec<usize>,
}

impl LearnedSolution {
    pub fn iterations(&self) -> usize {
        self.trace.len()
    }

    /// Block-diagonal assembly of the learned class value matrices.
    pub fn p_stacked(&self) -> DMatrix<f64> {
        let n: usize = self.state_partition.iter().sum();
        let mut out = DMatrix::zeros(n, n);
        let mut off = 0;
        for blk in &self.p {
            out.view_mut((off, off), blk.shape()).copy_from(blk);
            off += blk.nrows();
        }
        out
    }

    /// Learned tracking component Π = Ω − diag(P).
    pub fn pi(&self) -> DMatrix<f64> {
        &self.omega - self.p_stacked()
    }

    pub fn gains(&self, pop: &PopulationModel) -> Result<GainSet> {
        GainSet::new(self.l_p.clone(), self.l_omega.clone(), pop)
    }
}

struct LsOutcome {
    p: DMatrix<f64>,
    l: DMatrix<f64>,
    theta: f64,
}

fn solve_block(
    xi: &DMatrix<f64>,
    rhs: &DVector<f64>,
    n: usize,
    m: usize,
    label: &str,
) -> Result<LsOutcome> {
    let cols = xi.ncols();
    if xi.nrows() < cols {
        return Err(Error::ExcitationFailure(format!(
            "{label}: {} windows for {cols} unknowns",
            xi.nrows()
        )));
    }
    let svd = xi.clone().svd(true, true);
    let sigma_max = svd.singular_values.iter().copied().fold(0.0f64, f64::max);
    let tol = sigma_max * xi.nrows().max(cols) as f64 * 1e-12;
    let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
    if rank < cols {
        return Err(Error::ExcitationFailure(format!(
            "{label}: regression rank {rank} below required {cols}"
        )));
    }
    let sol = svd
        .solve(rhs, tol)
        .map_err(|e| Error::ExcitationFailure(format!("{label}: {e}")))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{label} least-squares solution")));
    }
    let nh = hat_len(n);
    let p = linalg::symmetric_from_upper(&sol.rows(0, nh).into_owned(), n);
    let l = linalg::unvec_col(&sol.rows(nh, n * m).into_owned(), m, n);
    Ok(LsOutcome { p, l, theta: sol[nh + n * m] })
}

/// Least-squares policy iteration on raw data: evaluate the current gains by
/// regression, improve to the argmin gains, repeat until both the class and
/// global value-matrix steps fall below `eps`.
pub fn policy_iteration(
    raw: &DataMatrices,
    costs: &CostMatrices,
    l0_classes: &[DMatrix<f64>],
    l0_global: &DMatrix<f64>,
    eps: f64,
    max_iters: usize,
) -> Result<LearnedSolution> {
    let mut class_gains: Vec<DMatrix<f64>> = l0_classes.to_vec();
    let mut l_omega = l0_global.clone();
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut converged = false;

    for _ in 0..max_iters {
        let (class_pairs, global_pair) =
            assemble_regression(raw, costs, &class_gains, &l_omega)?;
        let mut p = Vec::with_capacity(class_pairs.len());
        let mut l_p = Vec::with_capacity(class_pairs.len());
        let mut theta_p = Vec::with_capacity(class_pairs.len());
        for (k, (xi, rhs)) in class_pairs.iter().enumerate() {
            let out = solve_block(
                xi,
                rhs,
                raw.state_partition[k],
                raw.input_partition[k],
                &format!("class {}", k + 1),
            )?;
            p.push(out.p);
            l_p.push(out.l);
            theta_p.push(out.theta);
        }
        let out = solve_block(
            &global_pair.0,
            &global_pair.1,
            raw.n_total(),
            raw.m_total(),
            "global",
        )?;

        let (step_class, step_global) = match trace.last() {
            Some(prev) => (
                p.iter()
                    .zip(&prev.p)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0f64, f64::max),
                (&out.p - &prev.omega).norm(),
            ),
            None => (f64::INFINITY, f64::INFINITY),
        };
        class_gains = l_p.clone();
        l_omega = out.l.clone();
        trace.push(IterationRecord {
            p,
            l_p,
            theta_p,
            omega: out.p,
            l_omega: out.l,
            theta_omega: out.theta,
            step_class,
            step_global,
        });
        if step_class <= eps && step_global <= eps {
            converged = true;
            break;
        }
    }

    let last = trace.last().ok_or(Error::InvalidConfig("zero iterations requested".into()))?;
    Ok(LearnedSolution {
        converged,
        p: last.p.clone(),
        l_p: last.l_p.clone(),
        theta_p: last.theta_p.clone(),
        omega: last.omega.clone(),
        l_omega: last.l_omega.clone(),
        theta_omega: last.theta_omega,
        state_partition: raw.state_partition.clone(),
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demo;
    use crate::model::{assemble_population, ClassModel};
    use crate::riccati;
    use crate::simulator::{simulate_ensemble, NoiseSpec};
    use approx::assert_relative_eq;

    fn scalar_pop(a: f64, b: f64, d: f64, q: f64, r: f64) -> PopulationModel {
        let c = ClassModel::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, b),
            DMatrix::from_element(1, 1, d),
            DMatrix::from_element(1, 1, q),
            DMatrix::from_element(1, 1, r),
            0.1,
        )
        .unwrap();
        assemble_population(vec![c], DMatrix::zeros(1, 1)).unwrap()
    }

    #[test]
    fn window_constructors_enforce_ordering_and_span() {
        let w = WindowSet::contiguous(120, 0.1).unwrap();
        assert_eq!(w.len(), 120);
        assert_relative_eq!(w.required_span(), 12.0, epsilon = 1e-12);
        assert!(WindowSet::new(vec![0.0, 0.0], 0.1).is_err());
        assert!(WindowSet::new(vec![0.0], -1.0).is_err());
    }

    #[test]
    fn misaligned_windows_are_rejected() {
        let pop = scalar_pop(-1.0, 1.0, 0.0, 1.0, 1.0);
        let policy = ExplorationPolicy::feedback_only(DMatrix::zeros(1, 1));
        let ens =
            simulate_ensemble(&pop, &policy, &InitialState::ones(1), 1.0, 1e-2, 1, 1, 0).unwrap();
        let w = WindowSet::new(vec![0.003], 0.1).unwrap();
        assert!(matches!(
            compute_data_integrals(&ens, &w),
            Err(Error::WindowMisaligned(_))
        ));
        let too_long = WindowSet::new(vec![0.5], 0.6).unwrap();
        assert!(matches!(
            compute_data_integrals(&ens, &too_long),
            Err(Error::WindowMisaligned(_))
        ));
    }

    #[test]
    fn discount_column_matches_analytic_value() {
        let pop = scalar_pop(-1.0, 1.0, 0.0, 1.0, 1.0);
        let policy = ExplorationPolicy::feedback_only(DMatrix::zeros(1, 1));
        let ens =
            simulate_ensemble(&pop, &policy, &InitialState::ones(1), 1.0, 1e-3, 1, 1, 0).unwrap();
        let w = WindowSet::contiguous(3, 0.1).unwrap();
        let raw = compute_data_integrals(&ens, &w).unwrap();
        assert_relative_eq!(raw.d6[0], (-0.01f64).exp() - 1.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_path_zeroes_state_integrals_but_not_discount() {
        let pop = scalar_pop(-1.0, 1.0, 0.0, 1.0, 1.0);
        let policy = ExplorationPolicy::feedback_only(DMatrix::zeros(1, 1));
        let x0 = InitialState::Value(DVector::zeros(1));
        let ens = simulate_ensemble(&pop, &policy, &x0, 1.0, 1e-3, 1, 2, 0).unwrap();
        let w = WindowSet::contiguous(5, 0.1).unwrap();
        let raw = compute_data_integrals(&ens, &w).unwrap();
        assert_eq!(raw.global.d1.amax(), 0.0);
        assert_eq!(raw.global.ixx.amax(), 0.0);
        assert!(raw.d6.amax() > 0.0);
    }

    #[test]
    fn quadrature_converges_at_second_order() {
        // Deterministic x(t) = e^{−t}: ∫_0^Δ e^{−ρτ}x² dτ = (1 − e^{−2.1Δ})/2.1.
        let pop = scalar_pop(-1.0, 1.0, 0.0, 1.0, 1.0);
        let w = WindowSet::contiguous(1, 0.1).unwrap();
        let exact = (1.0 - (-2.1f64 * 0.1).exp()) / 2.1;
        let mut errs = Vec::new();
        for h in [1e-2f64, 5e-3, 2.5e-3] {
            // RK4-free path: build the exact exponential directly so only the
            // quadrature error is visible.
            let n_steps = (1.0 / h).round() as usize;
            let times: Vec<f64> = (0..=n_steps).map(|i| i as f64 * h).collect();
            let xs = DMatrix::from_fn(1, n_steps + 1, |_, j| (-times[j]).exp());
            let us = DMatrix::zeros(1, n_steps + 1);
            let ens = TrajectoryEnsemble {
                times,
                states: vec![xs],
                inputs: vec![us],
                h_sde: h,
                record_stride: 1,
                seed: 0,
                rho: pop.rho(),
                state_partition: vec![1],
                input_partition: vec![1],
            };
            let raw = compute_data_integrals(&ens, &w).unwrap();
            errs.push((raw.global.ixx[(0, 0)] - exact).abs());
        }
        let r1 = errs[0] / errs[1];
        let r2 = errs[1] / errs[2];
        assert!((3.5..=4.5).contains(&r1), "ratio {r1}");
        assert!((3.5..=4.5).contains(&r2), "ratio {r2}");
    }

    #[test]
    fn class_stacks_are_column_slices_of_global() {
        let pop = demo::three_class_population().unwrap();
        let policy = ExplorationPolicy::seeded(
            DMatrix::zeros(4, 7),
            NoiseSpec { sinusoids: 10, ..NoiseSpec::default() },
            5,
        );
        let ens =
            simulate_ensemble(&pop, &policy, &InitialState::ones(7), 1.0, 1e-3, 1, 2, 5).unwrap();
        let w = WindowSet::contiguous(8, 0.1).unwrap();
        let raw = compute_data_integrals(&ens, &w).unwrap();
        // Class 2 occupies states 2..5 and inputs 1..3.
        assert_eq!(raw.classes[1].ixx[(3, 0)], raw.global.ixx[(3, 2 * 7 + 2)]);
        assert_eq!(raw.classes[1].ixa[(3, 0)], raw.global.ixa[(3, 2 * 4 + 1)]);
        assert_eq!(raw.classes[1].d1[(3, 0)], raw.global.d1[(3, hat_index(2, 2, 7))]);
    }

    #[test]
    fn streaming_and_materialized_paths_agree_bitwise() {
        let pop = demo::three_class_population().unwrap();
        let policy = ExplorationPolicy::seeded(
            DMatrix::zeros(4, 7),
            NoiseSpec { sinusoids: 15, ..NoiseSpec::default() },
            21,
        );
        let x0 = InitialState::ones(7);
        let w = WindowSet::contiguous(10, 0.1).unwrap();
        let ens = simulate_ensemble(&pop, &policy, &x0, 1.5, 5e-4, 2, 3, 21).unwrap();
        let a = compute_data_integrals(&ens, &w).unwrap();
        let b = compute_data_integrals_streaming(&pop, &policy, &x0, 1.5, 5e-4, 2, 3, 21, &w)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_gain_regression_reduces_to_plain_terms() {
        let pop = demo::three_class_population().unwrap();
        let policy = ExplorationPolicy::seeded(
            DMatrix::zeros(4, 7),
            NoiseSpec { sinusoids: 10, ..NoiseSpec::default() },
            5,
        );
        let ens =
            simulate_ensemble(&pop, &policy, &InitialState::ones(7), 1.0, 1e-3, 1, 2, 5).unwrap();
        let w = WindowSet::contiguous(8, 0.1).unwrap();
        let raw = compute_data_integrals(&ens, &w).unwrap();
        let costs = CostMatrices::from_population(&pop);
        let zeros: Vec<DMatrix<f64>> =
            pop.classes.iter().map(|c| DMatrix::zeros(c.nu(), c.nx())).collect();
        let (pairs, _) =
            assemble_regression(&raw, &costs, &zeros, &DMatrix::zeros(4, 7)).unwrap();
        let (xi, rhs) = &pairs[0];
        let eye = DMatrix::identity(2, 2);
        let expected_d2 = -2.0 * (&raw.classes[0].ixa * linalg::kron(&eye, &costs.r[0]));
        assert_eq!(xi.view((0, 3), (8, 2)).into_owned(), expected_d2);
        let expected_rhs = -(&raw.classes[0].ixx * linalg::vec_col(&costs.q[0]));
        assert_eq!(rhs, &expected_rhs);
    }

    #[test]
    fn scalar_regression_row_matches_hand_assembly() {
        let stacks = IntegralStacks {
            d1: DMatrix::from_element(1, 1, 0.7),
            ixx: DMatrix::from_element(1, 1, 0.3),
            ixa: DMatrix::from_element(1, 1, -0.2),
        };
        let d6 = DVector::from_element(1, -0.009);
        let l = DMatrix::from_element(1, 1, 2.0);
        let r = DMatrix::from_element(1, 1, 0.5);
        let q = DMatrix::from_element(1, 1, 3.0);
        let (xi, rhs) = regression_pair(&stacks, &d6, &l, &r, &q);
        // Columns: [Δ₁, −2(ixx·l·r + ixa·r), δρ]; rhs: −ixx(l²r + q).
        assert_relative_eq!(xi[(0, 0)], 0.7, epsilon = 1e-15);
        assert_relative_eq!(xi[(0, 1)], -2.0 * (0.3 * 1.0 - 0.2 * 0.5), epsilon = 1e-15);
        assert_relative_eq!(xi[(0, 2)], -0.009, epsilon = 1e-15);
        assert_relative_eq!(rhs[0], -0.3 * (2.0 * 0.5 * 2.0 + 3.0), epsilon = 1e-15);
    }

    #[test]
    fn degenerate_data_fails_excitation_and_rich_data_passes() {
        // Zero dither, zero gain, zero noise, fixed x0: one mode excited.
        let pop = demo::three_class_population().unwrap();
        let quiet = ExplorationPolicy::feedback_only(DMatrix::zeros(4, 7));
        let zero_noise = {
            let classes = pop
                .classes
                .iter()
                .map(|c| {
                    ClassModel::new(
                        c.a.clone(),
                        c.b.clone(),
                        DMatrix::zeros(c.nx(), c.nw()),
                        c.q.clone(),
                        c.r.clone(),
                        c.rho,
                    )
                    .unwrap()
                })
                .collect::<Vec<_>>();
            assemble_population(classes, pop.h.clone()).unwrap()
        };
        let w = WindowSet::contiguous(60, 0.1).unwrap();
        let ens =
            simulate_ensemble(&zero_noise, &quiet, &InitialState::ones(7), 6.5, 1e-3, 1, 2, 3)
                .unwrap();
        let raw = compute_data_integrals(&ens, &w).unwrap();
        let costs = CostMatrices::from_population(&pop);
        let zeros: Vec<DMatrix<f64>> =
            pop.classes.iter().map(|c| DMatrix::zeros(c.nu(), c.nx())).collect();
        let report = check_excitation(&raw, &costs, &zeros, &DMatrix::zeros(4, 7)).unwrap();
        assert!(!report.passed());

        let rich = ExplorationPolicy::seeded(
            DMatrix::zeros(4, 7),
            NoiseSpec { sinusoids: 40, ..NoiseSpec::default() },
            3,
        );
        let w = WindowSet::contiguous(70, 0.1).unwrap();
        let ens = simulate_ensemble(&pop, &rich, &InitialState::ones(7), 7.5, 1e-3, 1, 2, 3)
            .unwrap();
        let raw = compute_data_integrals(&ens, &w).unwrap();
        let report = check_excitation(&raw, &costs, &zeros, &DMatrix::zeros(4, 7)).unwrap();
        assert!(report.passed(), "{report}");
        assert_eq!(report.classes[0].required, 6);
        assert_eq!(report.classes[1].required, 13);
        assert_eq!(report.classes[2].required, 6);
        assert_eq!(report.global.required, 57);
    }

    #[test]
    fn too_few_windows_fail_excitation() {
        let pop = scalar_pop(-1.0, 1.0, 0.1, 1.0, 1.0);
        let policy = ExplorationPolicy::seeded(
            DMatrix::zeros(1, 1),
            NoiseSpec { sinusoids: 10, amplitude: 5.0, ..NoiseSpec::default() },
            4,
        );
        let ens =
            simulate_ensemble(&pop, &policy, &InitialState::ones(1), 1.0, 1e-3, 1, 2, 4).unwrap();
        let w = WindowSet::contiguous(2, 0.1).unwrap();
        let raw = compute_data_integrals(&ens, &w).unwrap();
        let costs = CostMatrices::from_population(&pop);
        let report =
            check_excitation(&raw, &costs, &[DMatrix::zeros(1, 1)], &DMatrix::zeros(1, 1))
                .unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn exact_oracle_matches_kleinman_iterates_for_scalar_class() {
        let pop = scalar_pop(-1.0, 1.0, 0.1, 2.0, 0.5);
        let policy = ExplorationPolicy::with_frequencies(
            DMatrix::zeros(1, 1),
            vec![vec![1.3, -2.1, 3.7, 0.6, -5.2, 7.9]],
            4.0,
        );
        let w = WindowSet::contiguous(30, 0.1).unwrap();
        let raw =
            integrals_from_model(&pop, &policy, &DVector::from_element(1, 1.0), &w, 5e-4).unwrap();
        let costs = CostMatrices::from_population(&pop);
        let learned = policy_iteration(
            &raw,
            &costs,
            &[DMatrix::zeros(1, 1)],
            &DMatrix::zeros(1, 1),
            1e-11,
            50,
        )
        .unwrap();
        assert!(learned.converged);
        let c = &pop.classes[0];
        let (_, trace) = riccati::kleinman_iterate(
            &c.a,
            &c.b,
            &c.q,
            &c.r,
            c.rho,
            &DMatrix::zeros(1, 1),
            1e-11,
            50,
        )
        .unwrap();
        for (rec, step) in learned.trace.iter().zip(&trace.steps) {
            assert!((&rec.p[0] - &step.x).norm() < 1e-8, "value mismatch");
            assert!((&rec.l_p[0] - &step.gain).norm() < 1e-8, "gain mismatch");
        }
        // θ = Tr(DDᵀP)/ρ for the converged value matrix.
        let p = learned.p[0][(0, 0)];
        assert_relative_eq!(learned.theta_p[0], 0.01 * p / 0.1, epsilon = 1e-6);
    }

    #[test]
    fn learned_gain_triple_is_exactly_consistent() {
        let pop = scalar_pop(-1.0, 1.0, 0.1, 2.0, 0.5);
        let policy = ExplorationPolicy::with_frequencies(
            DMatrix::zeros(1, 1),
            vec![vec![1.3, -2.1, 3.7, 0.6, -5.2, 7.9]],
            4.0,
        );
        let w = WindowSet::contiguous(30, 0.1).unwrap();
        let raw =
            integrals_from_model(&pop, &policy, &DVector::from_element(1, 1.0), &w, 5e-4).unwrap();
        let costs = CostMatrices::from_population(&pop);
        let learned = policy_iteration(
            &raw,
            &costs,
            &[DMatrix::zeros(1, 1)],
            &DMatrix::zeros(1, 1),
            1e-11,
            50,
        )
        .unwrap();
        let gains = learned.gains(&pop).unwrap();
        assert_eq!(&gains.l_pi + gains.block_diag_lp(), gains.l_omega);
    }

    #[test]
    fn hat_of_state_doubles_cross_terms() {
        let x = [2.0, -3.0, 0.5];
        let mut out = vec![0.0; 6];
        hat_of_state(&x, &mut out);
        assert_eq!(out, vec![4.0, -12.0, 2.0, 9.0, -3.0, 0.25]);
        // Pairing with the plain upper triangle reproduces the quadratic form.
        let p = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.5, -0.2, 0.5, 2.0, 0.3, -0.2, 0.3, 0.7],
        );
        let upper: Vec<f64> = vec![
            p[(0, 0)],
            p[(0, 1)],
            p[(0, 2)],
            p[(1, 1)],
            p[(1, 2)],
            p[(2, 2)],
        ];
        let form: f64 = out.iter().zip(&upper).map(|(a, b)| a * b).sum();
        let xv = DVector::from_column_slice(&x);
        assert_relative_eq!(form, (xv.transpose() * &p * &xv)[(0, 0)], epsilon = 1e-12);
    }

    #[test]
    fn data_mode_final_error_beats_first_iterate() {
        // Statistical sanity: the iteration improves on its own first value
        // estimate for nearly every seed.
        let pop = demo::three_class_population().unwrap();
        let truth = riccati::mfg_ground_truth(&pop, 1e-12).unwrap();
        let costs = CostMatrices::from_population(&pop);
        let w = WindowSet::contiguous(120, 0.1).unwrap();
        let zeros: Vec<DMatrix<f64>> =
            pop.classes.iter().map(|c| DMatrix::zeros(c.nu(), c.nx())).collect();
        let mut improved = 0;
        let seeds = 20;
        for seed in 0..seeds {
            let policy = ExplorationPolicy::seeded(
                DMatrix::zeros(4, 7),
                NoiseSpec { sinusoids: 60, ..NoiseSpec::default() },
                seed,
            );
            let raw = compute_data_integrals_streaming(
                &pop,
                &policy,
                &InitialState::ones(7),
                12.5,
                1e-3,
                1,
                30,
                seed,
                &w,
            )
            .unwrap();
            let Ok(learned) =
                policy_iteration(&raw, &costs, &zeros, &DMatrix::zeros(4, 7), 1e-9, 50)
            else {
                continue;
            };
            let err_at = |rec: &IterationRecord| {
                rec.p
                    .iter()
                    .zip(&truth.p_blocks)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0f64, f64::max)
            };
            if err_at(learned.trace.last().unwrap()) <= err_at(&learned.trace[0]) {
                improved += 1;
            }
        }
        assert!(improved * 100 >= seeds * 95, "improved {improved}/{seeds}");
    }
}
