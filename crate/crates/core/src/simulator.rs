//! Trajectory generation: Euler–Maruyama ensembles of the representative
//! agents under sinusoidal exploration, deterministic mean-field replay, and
//! finite-population rollouts under a learned strategy.
//!
//! Reproducibility contract: every stochastic object (Wiener increments,
//! sinusoid frequencies, initial-state draws) comes from a ChaCha stream
//! derived injectively from (purpose tag, run, class-or-channel), so a master
//! seed pins the whole experiment bit for bit, independent of thread count.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gains::GainSet;
use crate::model::PopulationModel;

const TAG_WIENER: u8 = 1;
const TAG_FREQ: u8 = 2;
const TAG_X0: u8 = 3;

/// One ChaCha stream per (purpose, run, lane); lanes index classes or input
/// channels depending on the purpose.
fn stream_rng(seed: u64, tag: u8, run: u32, lane: u16) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(((tag as u64) << 56) | ((run as u64) << 16) | lane as u64);
    rng
}

/// Sum-of-sinusoids exploration spec for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub sinusoids: usize,
    pub amplitude: f64,
    pub freq_range: (f64, f64),
    /// Redraw the frequency bank for every run instead of freezing one bank.
    pub redraw_per_run: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            sinusoids: 500,
            amplitude: 25.0,
            freq_range: (-100.0, 100.0),
            redraw_per_run: false,
        }
    }
}

/// Frozen frequencies, one bank per global input channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidBank {
    pub freqs: Vec<Vec<f64>>,
    pub amplitude: f64,
}

impl SinusoidBank {
    fn draw(spec: &NoiseSpec, channels: usize, seed: u64, run: u32) -> Self {
        let freqs = (0..channels)
            .map(|c| {
                let mut rng = stream_rng(seed, TAG_FREQ, run, c as u16);
                (0..spec.sinusoids)
                    .map(|_| rng.random_range(spec.freq_range.0..=spec.freq_range.1))
                    .collect()
            })
            .collect();
        Self { freqs, amplitude: spec.amplitude }
    }

    pub fn channels(&self) -> usize {
        self.freqs.len()
    }

    pub fn channel(&self, c: usize, t: f64) -> f64 {
        self.freqs[c].iter().map(|&w| self.amplitude * (w * t).sin()).sum()
    }

    pub fn sample(&self, t: f64) -> DVector<f64> {
        DVector::from_fn(self.channels(), |c, _| self.channel(c, t))
    }

    /// Evaluates every channel on the uniform grid {i·h : i = 0..=n_steps}.
    /// Columns are grid points; per-channel summation order is fixed, so the
    /// table is identical no matter how the columns are parallelized.
    fn tabulate(&self, n_steps: usize, h: f64) -> DMatrix<f64> {
        let m = self.channels();
        let mut table = DMatrix::zeros(m, n_steps + 1);
        if m == 0 {
            return table;
        }
        // Column-major storage: chunk i is the column at t = i·h.
        table
            .as_mut_slice()
            .par_chunks_mut(m)
            .enumerate()
            .for_each(|(i, col)| {
                let t = i as f64 * h;
                for (c, v) in col.iter_mut().enumerate() {
                    *v = self.channel(c, t);
                }
            });
        table
    }
}

/// Learning-phase input law α(t) = −L0·X(t) + l(t) with l a per-channel sum
/// of seeded sinusoids.
#[derive(Debug, Clone)]
pub struct ExplorationPolicy {
    pub l0: DMatrix<f64>,
    pub spec: NoiseSpec,
    pub seed: u64,
    frozen: SinusoidBank,
}

impl ExplorationPolicy {
    pub fn seeded(l0: DMatrix<f64>, spec: NoiseSpec, seed: u64) -> Self {
        let frozen = SinusoidBank::draw(&spec, l0.nrows(), seed, 0);
        Self { l0, spec, seed, frozen }
    }

    /// Fixed frequencies, for tests and closed-form checks.
    pub fn with_frequencies(l0: DMatrix<f64>, freqs: Vec<Vec<f64>>, amplitude: f64) -> Self {
        assert_eq!(freqs.len(), l0.nrows());
        let spec = NoiseSpec {
            sinusoids: freqs.first().map_or(0, Vec::len),
            amplitude,
            freq_range: (0.0, 0.0),
            redraw_per_run: false,
        };
        let frozen = SinusoidBank { freqs, amplitude };
        Self { l0, spec, seed: 0, frozen }
    }

    /// Silent policy: pure feedback −L0·X with no dither.
    pub fn feedback_only(l0: DMatrix<f64>) -> Self {
        let channels = l0.nrows();
        Self::with_frequencies(l0, vec![Vec::new(); channels], 0.0)
    }

    pub fn bank_for_run(&self, run: u32) -> SinusoidBank {
        if self.spec.redraw_per_run {
            SinusoidBank::draw(&self.spec, self.l0.nrows(), self.seed, run)
        } else {
            self.frozen.clone()
        }
    }

    /// The frozen bank's dither l(t).
    pub fn sample_noise(&self, t: f64) -> DVector<f64> {
        self.frozen.sample(t)
    }
}

/// Initial-state rule for representative agents and population members.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Value(DVector<f64>),
    Uniform { low: f64, high: f64 },
}

impl InitialState {
    pub fn ones(n: usize) -> Self {
        Self::Value(DVector::from_element(n, 1.0))
    }

    /// Draws the stacked initial state for one run; the uniform rule samples
    /// coordinates i.i.d. from per-(run, class) streams.
    fn sample(&self, pop: &PopulationModel, seed: u64, run: u32) -> Result<DVector<f64>> {
        match self {
            Self::Value(v) => {
                if v.len() != pop.n_total() {
                    return Err(Error::DimensionMismatch(format!(
                        "initial state has length {}, expected {}",
                        v.len(),
                        pop.n_total()
                    )));
                }
                Ok(v.clone())
            }
            Self::Uniform { low, high } => {
                if !(low < high) {
                    return Err(Error::InvalidConfig(format!(
                        "empty initial-state range [{low}, {high}]"
                    )));
                }
                let mut x0 = DVector::zeros(pop.n_total());
                let offsets = pop.state_offsets();
                for (k, c) in pop.classes.iter().enumerate() {
                    let mut rng = stream_rng(seed, TAG_X0, run, k as u16);
                    for i in 0..c.nx() {
                        x0[offsets[k] + i] = rng.random_range(*low..*high);
                    }
                }
                Ok(x0)
            }
        }
    }
}

/// Recorded representative-agent paths for every run, on the uniform grid
/// t_j = j · h_sde · record_stride. Column j of a path matrix is the state
/// (or input) at t_j; the stacked state is the concatenation of class states
/// at the same index.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub times: Vec<f64>,
    pub states: Vec<DMatrix<f64>>,
    pub inputs: Vec<DMatrix<f64>>,
    pub h_sde: f64,
    pub record_stride: usize,
    pub seed: u64,
    pub rho: f64,
    pub state_partition: Vec<usize>,
    pub input_partition: Vec<usize>,
}

impl TrajectoryEnsemble {
    pub fn n_runs(&self) -> usize {
        self.states.len()
    }

    pub fn n_total(&self) -> usize {
        self.state_partition.iter().sum()
    }

    pub fn m_total(&self) -> usize {
        self.input_partition.iter().sum()
    }

    /// Recorded step, h_sde · record_stride.
    pub fn recorded_step(&self) -> f64 {
        self.h_sde * self.record_stride as f64
    }

    pub fn span(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

fn grid_steps(t_total: f64, h: f64, stride: usize) -> Result<usize> {
    if !(h > 0.0) || !(t_total > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "need positive horizon and step, got T={t_total}, h={h}"
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("record stride must be at least 1".into()));
    }
    let n_steps = (t_total / h).round() as usize;
    if n_steps == 0 || ((n_steps as f64) * h - t_total).abs() > 1e-9 * t_total.max(1.0) {
        return Err(Error::InvalidConfig(format!(
            "horizon {t_total} is not a multiple of the step {h}"
        )));
    }
    if n_steps % stride != 0 {
        return Err(Error::InvalidConfig(format!(
            "step count {n_steps} is not divisible by record stride {stride}"
        )));
    }
    Ok(n_steps)
}

struct RunScratch {
    alpha: DVector<f64>,
    drift: DVector<f64>,
    dw: Vec<DVector<f64>>,
    noise_gain: Vec<DMatrix<f64>>,
}

impl RunScratch {
    fn new(pop: &PopulationModel, sqrt_h: f64) -> Self {
        Self {
            alpha: DVector::zeros(pop.m_total()),
            drift: DVector::zeros(pop.n_total()),
            dw: pop.classes.iter().map(|c| DVector::zeros(c.nw())).collect(),
            // Pre-scale the noise maps by √h so the loop adds D_k·(√h·ξ).
            noise_gain: pop.classes.iter().map(|c| &c.d * sqrt_h).collect(),
        }
    }
}

/// Integrates one run with Euler–Maruyama and records every `stride`-th
/// point, the grid endpoints included. `noise_table` column i holds l(i·h).
fn simulate_run(
    pop: &PopulationModel,
    l0: &DMatrix<f64>,
    noise_table: &DMatrix<f64>,
    x0: &DVector<f64>,
    n_steps: usize,
    h: f64,
    stride: usize,
    run: u32,
    seed: u64,
    scratch: &mut RunScratch,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = pop.n_total();
    let m = pop.m_total();
    let n_rec = n_steps / stride + 1;
    let mut xs = DMatrix::zeros(n, n_rec);
    let mut us = DMatrix::zeros(m, n_rec);
    let offsets = pop.state_offsets();
    let mut rngs: Vec<ChaCha12Rng> = (0..pop.num_classes())
        .map(|k| stream_rng(seed, TAG_WIENER, run, k as u16))
        .collect();

    let mut x = x0.clone();
    for i in 0..=n_steps {
        scratch.alpha.copy_from(&noise_table.column(i));
        scratch.alpha.gemv(-1.0, l0, &x, 1.0);
        if i % stride == 0 {
            let j = i / stride;
            if x.iter().any(|v| !v.is_finite()) || x.amax() > 1e9 {
                return Err(Error::Divergence { run: run as usize, time: i as f64 * h });
            }
            xs.column_mut(j).copy_from(&x);
            us.column_mut(j).copy_from(&scratch.alpha);
        }
        if i == n_steps {
            break;
        }
        scratch.drift.gemv(1.0, &pop.a, &x, 0.0);
        scratch.drift.gemv(1.0, &pop.b, &scratch.alpha, 1.0);
        x.axpy(h, &scratch.drift, 1.0);
        for (k, c) in pop.classes.iter().enumerate() {
            for v in scratch.dw[k].iter_mut() {
                *v = rngs[k].sample(StandardNormal);
            }
            x.rows_mut(offsets[k], c.nx())
                .gemv(1.0, &scratch.noise_gain[k], &scratch.dw[k], 1.0);
        }
    }
    Ok((xs, us))
}

/// Integrates `n_runs` independent representative-agent systems under the
/// exploration policy and records them on the (possibly subsampled) grid.
/// Runs execute in parallel; results are merged by run index, so the output
/// is identical to a sequential pass.
#[allow(clippy::too_many_arguments)]
pub fn simulate_ensemble(
    pop: &PopulationModel,
    policy: &ExplorationPolicy,
    x0: &InitialState,
    t_total: f64,
    h_sde: f64,
    record_stride: usize,
    n_runs: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    if n_runs == 0 {
        return Err(Error::EmptyEnsemble);
    }
    if policy.l0.shape() != (pop.m_total(), pop.n_total()) {
        return Err(Error::DimensionMismatch(format!(
            "policy gain is {}x{}, expected {}x{}",
            policy.l0.nrows(),
            policy.l0.ncols(),
            pop.m_total(),
            pop.n_total()
        )));
    }
    let n_steps = grid_steps(t_total, h_sde, record_stride)?;
    let shared_table =
        (!policy.spec.redraw_per_run).then(|| policy.frozen.tabulate(n_steps, h_sde));

    let results: Vec<Result<(DMatrix<f64>, DMatrix<f64>)>> = (0..n_runs as u32)
        .into_par_iter()
        .map(|run| {
            let table = match &shared_table {
                Some(t) => t.clone(),
                None => policy.bank_for_run(run).tabulate(n_steps, h_sde),
            };
            let x0_run = x0.sample(pop, seed, run)?;
            let mut scratch = RunScratch::new(pop, h_sde.sqrt());
            simulate_run(
                pop, &policy.l0, &table, &x0_run, n_steps, h_sde, record_stride, run, seed,
                &mut scratch,
            )
        })
        .collect();

    let mut states = Vec::with_capacity(n_runs);
    let mut inputs = Vec::with_capacity(n_runs);
    for r in results {
        let (xs, us) = r?;
        states.push(xs);
        inputs.push(us);
    }
    let h_rec = h_sde * record_stride as f64;
    let times = (0..=n_steps / record_stride).map(|j| j as f64 * h_rec).collect();
    Ok(TrajectoryEnsemble {
        times,
        states,
        inputs,
        h_sde,
        record_stride,
        seed,
        rho: pop.rho(),
        state_partition: pop.state_partition(),
        input_partition: pop.classes.iter().map(|c| c.nu()).collect(),
    })
}

/// Visits each run of the ensemble without materializing all paths at once:
/// runs are simulated in parallel, then `consume(run, states, inputs)` folds
/// them in run order. Produces results bit-identical to materializing via
/// [`simulate_ensemble`] and folding afterwards.
#[allow(clippy::too_many_arguments)]
pub fn for_each_run<T, F>(
    pop: &PopulationModel,
    policy: &ExplorationPolicy,
    x0: &InitialState,
    t_total: f64,
    h_sde: f64,
    record_stride: usize,
    n_runs: usize,
    seed: u64,
    per_run: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u32, &[f64], &DMatrix<f64>, &DMatrix<f64>) -> Result<T> + Sync,
{
    if n_runs == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let n_steps = grid_steps(t_total, h_sde, record_stride)?;
    let h_rec = h_sde * record_stride as f64;
    let times: Vec<f64> = (0..=n_steps / record_stride).map(|j| j as f64 * h_rec).collect();
    let shared_table =
        (!policy.spec.redraw_per_run).then(|| policy.frozen.tabulate(n_steps, h_sde));
    (0..n_runs as u32)
        .into_par_iter()
        .map(|run| {
            let table = match &shared_table {
                Some(t) => t.clone(),
                None => policy.bank_for_run(run).tabulate(n_steps, h_sde),
            };
            let x0_run = x0.sample(pop, seed, run)?;
            let mut scratch = RunScratch::new(pop, h_sde.sqrt());
            let (xs, us) = simulate_run(
                pop, &policy.l0, &table, &x0_run, n_steps, h_sde, record_stride, run, seed,
                &mut scratch,
            )?;
            per_run(run, &times, &xs, &us)
        })
        .collect()
}

/// RK4 integration of the deterministic mean-field ODE dX̄ = (A − B·L)X̄ dt.
pub fn simulate_mean_field(
    pop: &PopulationModel,
    l_omega: &DMatrix<f64>,
    x0: &DVector<f64>,
    t_final: f64,
    h_ode: f64,
    record_stride: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = pop.n_total();
    if x0.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "mean-field initial state has length {}, expected {n}",
            x0.len()
        )));
    }
    let n_steps = grid_steps(t_final, h_ode, record_stride)?;
    let f = &pop.a - &pop.b * l_omega;
    let n_rec = n_steps / record_stride + 1;
    let mut path = DMatrix::zeros(n, n_rec);
    let mut x = x0.clone();
    for i in 0..=n_steps {
        if i % record_stride == 0 {
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "mean-field path at t = {}",
                    i as f64 * h_ode
                )));
            }
            path.column_mut(i / record_stride).copy_from(&x);
        }
        if i == n_steps {
            break;
        }
        let k1 = &f * &x;
        let k2 = &f * (&x + &k1 * (h_ode / 2.0));
        let k3 = &f * (&x + &k2 * (h_ode / 2.0));
        let k4 = &f * (&x + &k3 * h_ode);
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h_ode / 6.0);
    }
    let h_rec = h_ode * record_stride as f64;
    let times = (0..n_rec).map(|j| j as f64 * h_rec).collect();
    Ok((times, path))
}

/// Empirical mean field: averages `n_samples` noisy closed-loop replays of
/// the representative stacked state under α = −L·X (no dither).
#[allow(clippy::too_many_arguments)]
pub fn empirical_mean_field(
    pop: &PopulationModel,
    l_omega: &DMatrix<f64>,
    x0: &InitialState,
    t_final: f64,
    h_sde: f64,
    record_stride: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let policy = ExplorationPolicy::feedback_only(l_omega.clone());
    let ens = simulate_ensemble(pop, &policy, x0, t_final, h_sde, record_stride, n_samples, seed)?;
    let mut mean = DMatrix::zeros(pop.n_total(), ens.times.len());
    for run in &ens.states {
        mean += run;
    }
    mean /= n_samples as f64;
    Ok((ens.times, mean))
}

/// Finite-population rollout: recorded class-mean paths, ±2 sample-standard-
/// deviation envelopes, and the individual agent paths.
#[derive(Debug, Clone)]
pub struct PopulationPaths {
    pub times: Vec<f64>,
    /// Stacked class means, N × n_rec.
    pub class_means: DMatrix<f64>,
    pub envelope_lo: DMatrix<f64>,
    pub envelope_hi: DMatrix<f64>,
    /// agents[k][i] is the n_k × n_rec path of agent i in class k.
    pub agents: Vec<Vec<DMatrix<f64>>>,
}

/// Simulates `agents_per_class` agents per class, each under
/// u = −L_{P,k}·x_{k,i} − L_{Π,k}·X̄(t) where X̄ is the running stacked
/// empirical class mean.
#[allow(clippy::too_many_arguments)]
pub fn simulate_finite_population(
    pop: &PopulationModel,
    gains: &GainSet,
    agents_per_class: usize,
    x0: &InitialState,
    t_final: f64,
    h_sde: f64,
    record_stride: usize,
    seed: u64,
) -> Result<PopulationPaths> {
    if agents_per_class == 0 {
        return Err(Error::InvalidConfig("need at least one agent per class".into()));
    }
    let n_steps = grid_steps(t_final, h_sde, record_stride)?;
    let n_rec = n_steps / record_stride + 1;
    let n = pop.n_total();
    let offsets = pop.state_offsets();
    let sqrt_h = h_sde.sqrt();
    let a_count = agents_per_class as f64;

    // Current states, one n_k × agents matrix per class.
    let mut state: Vec<DMatrix<f64>> = Vec::with_capacity(pop.num_classes());
    for (k, c) in pop.classes.iter().enumerate() {
        let mut s = DMatrix::zeros(c.nx(), agents_per_class);
        for i in 0..agents_per_class {
            let x0_full = x0.sample(pop, seed, i as u32)?;
            s.column_mut(i).copy_from(&x0_full.rows(offsets[k], c.nx()));
        }
        state.push(s);
    }
    let mut rngs: Vec<Vec<ChaCha12Rng>> = (0..pop.num_classes())
        .map(|k| {
            (0..agents_per_class)
                .map(|i| stream_rng(seed, TAG_WIENER, i as u32, k as u16))
                .collect()
        })
        .collect();
    let l_pi_rows: Vec<DMatrix<f64>> =
        (0..pop.num_classes()).map(|k| gains.l_pi_class(k)).collect();

    let mut class_means = DMatrix::zeros(n, n_rec);
    let mut lo = DMatrix::zeros(n, n_rec);
    let mut hi = DMatrix::zeros(n, n_rec);
    let mut agents: Vec<Vec<DMatrix<f64>>> = pop
        .classes
        .iter()
        .map(|c| vec![DMatrix::zeros(c.nx(), n_rec); agents_per_class])
        .collect();

    let stacked_mean = |state: &[DMatrix<f64>]| -> DVector<f64> {
        let mut xbar = DVector::zeros(n);
        for (k, s) in state.iter().enumerate() {
            let mut mean = DVector::zeros(s.nrows());
            for col in s.column_iter() {
                mean += col;
            }
            xbar.rows_mut(offsets[k], s.nrows()).copy_from(&(mean / a_count));
        }
        xbar
    };

    for i in 0..=n_steps {
        let xbar = stacked_mean(&state);
        if xbar.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { run: 0, time: i as f64 * h_sde });
        }
        if i % record_stride == 0 {
            let j = i / record_stride;
            class_means.column_mut(j).copy_from(&xbar);
            for (k, s) in state.iter().enumerate() {
                for (row, coords) in s.row_iter().enumerate() {
                    let m = xbar[offsets[k] + row];
                    let var = if agents_per_class > 1 {
                        coords.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (a_count - 1.0)
                    } else {
                        0.0
                    };
                    let sd = var.sqrt();
                    lo[(offsets[k] + row, j)] = m - 2.0 * sd;
                    hi[(offsets[k] + row, j)] = m + 2.0 * sd;
                }
                for (idx, col) in s.column_iter().enumerate() {
                    agents[k][idx].column_mut(j).copy_from(&col);
                }
            }
        }
        if i == n_steps {
            break;
        }
        for (k, c) in pop.classes.iter().enumerate() {
            let track = &l_pi_rows[k] * &xbar;
            let s = &mut state[k];
            for (idx, mut x) in s.column_iter_mut().enumerate() {
                let u = -(&gains.l_p[k] * &x) - &track;
                let mut dx = (&c.a * &x + &c.b * &u) * h_sde;
                let dw = DVector::from_fn(c.nw(), |_, _| rngs[k][idx].sample(StandardNormal));
                dx += &c.d * (dw * sqrt_h);
                x += dx;
            }
        }
    }

    let h_rec = h_sde * record_stride as f64;
    let times = (0..n_rec).map(|j| j as f64 * h_rec).collect();
    Ok(PopulationPaths { times, class_means, envelope_lo: lo, envelope_hi: hi, agents })
}

const ENSEMBLE_MAGIC: &[u8; 4] = b"MFGE";
const ENSEMBLE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct EnsembleHeader {
    seed: u64,
    h_sde: f64,
    record_stride: usize,
    rho: f64,
    n_runs: usize,
    n_rec: usize,
    state_partition: Vec<usize>,
    input_partition: Vec<usize>,
}

impl TrajectoryEnsemble {
    /// Compact little-endian binary layout: magic, version, JSON header
    /// (replay manifest), time grid, then per run the state and input
    /// matrices in column-major order.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(ENSEMBLE_MAGIC)?;
        w.write_u32::<LittleEndian>(ENSEMBLE_VERSION)?;
        let header = EnsembleHeader {
            seed: self.seed,
            h_sde: self.h_sde,
            record_stride: self.record_stride,
            rho: self.rho,
            n_runs: self.n_runs(),
            n_rec: self.times.len(),
            state_partition: self.state_partition.clone(),
            input_partition: self.input_partition.clone(),
        };
        let header_bytes = serde_json::to_vec(&header)?;
        w.write_u64::<LittleEndian>(header_bytes.len() as u64)?;
        w.write_all(&header_bytes)?;
        for &t in &self.times {
            w.write_f64::<LittleEndian>(t)?;
        }
        for (xs, us) in self.states.iter().zip(&self.inputs) {
            for &v in xs.as_slice() {
                w.write_f64::<LittleEndian>(v)?;
            }
            for &v in us.as_slice() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(Error::BadEnsembleFile("wrong magic bytes".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != ENSEMBLE_VERSION {
            return Err(Error::BadEnsembleFile(format!("unsupported version {version}")));
        }
        let header_len = r.read_u64::<LittleEndian>()? as usize;
        if header_len > 1 << 20 {
            return Err(Error::BadEnsembleFile("oversized header".into()));
        }
        let mut header_bytes = vec![0u8; header_len];
        r.read_exact(&mut header_bytes)?;
        let header: EnsembleHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::BadEnsembleFile(format!("header: {e}")))?;
        let n: usize = header.state_partition.iter().sum();
        let m: usize = header.input_partition.iter().sum();
        if n == 0 || header.n_rec == 0 || header.n_runs == 0 {
            return Err(Error::BadEnsembleFile("empty ensemble".into()));
        }
        let mut times = vec![0.0; header.n_rec];
        r.read_f64_into::<LittleEndian>(&mut times)?;
        let mut states = Vec::with_capacity(header.n_runs);
        let mut inputs = Vec::with_capacity(header.n_runs);
        let mut xbuf = vec![0.0; n * header.n_rec];
        let mut ubuf = vec![0.0; m * header.n_rec];
        for _ in 0..header.n_runs {
            r.read_f64_into::<LittleEndian>(&mut xbuf)?;
            states.push(DMatrix::from_column_slice(n, header.n_rec, &xbuf));
            r.read_f64_into::<LittleEndian>(&mut ubuf)?;
            inputs.push(DMatrix::from_column_slice(m, header.n_rec, &ubuf));
        }
        Ok(Self {
            times,
            states,
            inputs,
            h_sde: header.h_sde,
            record_stride: header.record_stride,
            seed: header.seed,
            rho: header.rho,
            state_partition: header.state_partition,
            input_partition: header.input_partition,
        })
    }
}
