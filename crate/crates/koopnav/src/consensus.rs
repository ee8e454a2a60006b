//! Consensus-based distributed estimation of the lifted propagator.
//!
//! Each of `p` agents owns a contiguous row block `(X_i, Y_i)` of the
//! lifted data and iterates the synchronous update
//!
//! ```text
//! K_i⁺ = K_i − α S_i X_iᵀ
//! S_i⁺ = S_i + (K_i⁺ − K_i) X_i − α Σ_{j ∈ N(i)} (S_i − S_j)
//! ```
//!
//! from `K_i(0) = 0`, `S_i(0) = −𝐘_i` (the i-th block column of
//! `diag(Y_1, …, Y_p)`). Under a connected graph and a step size below
//! [`alpha_max`] the horizontal concatenation `[K_1 … K_p]` converges
//! exponentially, with per-step contraction bounded by [`rho_max`], to a
//! minimizer of `||Y - K X||_F` — the same optimality condition the
//! centralized fit satisfies.
//!
//! The step size and rate bounds come from the spectrum of the block
//! matrix `M = −[[𝐗𝐗ᵀ, 𝐗𝐋], [𝐗ᵀ, 𝐋]]` with `𝐗 = diag(X_1, …, X_p)` and
//! `𝐋 = L ⊗ I_N`; the error iteration is `e⁺ = e (I + α M)`.

use std::sync::OnceLock;

use nalgebra::{Complex, DMatrix};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{lifted_laplacian, CommGraph};
use crate::lifting::{DataMatrices, KoopmanOperator, Partition, Provenance};

/// One virtual agent: its operator block, auxiliary state, and local data.
#[derive(Debug, Clone)]
pub struct AgentState {
    index: usize,
    /// `n × n_i` block column of the global operator estimate.
    k: DMatrix<f64>,
    /// `n × N` auxiliary consensus state.
    s: DMatrix<f64>,
    /// Local data rows, `n_i × N` each.
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    row_offset: usize,
}

impl AgentState {
    pub fn index(&self) -> usize {
        self.index
    }

    pub fn operator_block(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn auxiliary(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn local_x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn local_y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn row_offset(&self) -> usize {
        self.row_offset
    }

    pub fn block_rows(&self) -> usize {
        self.x.nrows()
    }

    /// Warm start from a previous estimate. Shapes must match the data.
    pub fn with_state(mut self, k: DMatrix<f64>, s: DMatrix<f64>) -> Result<Self> {
        if k.shape() != self.k.shape() || s.shape() != self.s.shape() {
            return Err(Error::shape(format!(
                "warm-start state {:?}/{:?} does not match agent {:?}/{:?}",
                k.shape(),
                s.shape(),
                self.k.shape(),
                self.s.shape()
            )));
        }
        self.k = k;
        self.s = s;
        Ok(self)
    }
}

/// Build the agent set with the prescribed initial conditions:
/// `K_i(0) = 0` and `S_i(0)` zero except for `−Y_i` in the agent's own
/// row block.
pub fn init_agents(partitions: &[Partition]) -> Result<Vec<AgentState>> {
    if partitions.is_empty() {
        return Err(Error::invalid_input("at least one partition required"));
    }
    let pair_count = partitions[0].x.ncols();
    let n: usize = partitions.iter().map(|p| p.x.nrows()).sum();
    let mut agents = Vec::with_capacity(partitions.len());
    for (i, part) in partitions.iter().enumerate() {
        if part.x.ncols() != pair_count || part.y.ncols() != pair_count {
            return Err(Error::shape(format!(
                "partition {i} has {} columns, expected {pair_count}",
                part.x.ncols()
            )));
        }
        if part.y.nrows() != part.x.nrows() {
            return Err(Error::shape(format!("partition {i} has mismatched X/Y rows")));
        }
        let mut s = DMatrix::zeros(n, pair_count);
        s.rows_mut(part.row_offset, part.x.nrows()).copy_from(&(-&part.y));
        agents.push(AgentState {
            index: i,
            k: DMatrix::zeros(n, part.x.nrows()),
            s,
            x: part.x.clone(),
            y: part.y.clone(),
            row_offset: part.row_offset,
        });
    }
    Ok(agents)
}

/// Resume from a previous operator estimate on (possibly new) data.
/// Keeping `K_i` and setting `S_i = K_i X_i − 𝐘_i` makes `W(0) = 0`
/// exactly, so the convergence argument applies to the warm start
/// unchanged.
pub fn warm_agents(
    partitions: &[Partition],
    operator_blocks: &[DMatrix<f64>],
) -> Result<Vec<AgentState>> {
    if operator_blocks.len() != partitions.len() {
        return Err(Error::shape(format!(
            "{} operator blocks for {} partitions",
            operator_blocks.len(),
            partitions.len()
        )));
    }
    let mut agents = init_agents(partitions)?;
    for (agent, block) in agents.iter_mut().zip(operator_blocks.iter()) {
        if block.shape() != agent.k.shape() {
            return Err(Error::shape(format!(
                "warm block {:?} does not match agent block {:?}",
                block.shape(),
                agent.k.shape()
            )));
        }
        // init_agents left S_i = −𝐘_i; add K_i X_i on top.
        agent.s += block * &agent.x;
        agent.k = block.clone();
    }
    Ok(agents)
}

/// The block matrix governing convergence, with its spectrum memoized.
#[derive(Debug)]
pub struct ConvergenceMatrix {
    m: DMatrix<f64>,
    lift_dim: usize,
    stacked_dim: usize,
    spectrum: OnceLock<Vec<Complex<f64>>>,
}

impl ConvergenceMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// `n`: number of lifted observables.
    pub fn lift_dim(&self) -> usize {
        self.lift_dim
    }

    /// `Np`: stacked per-agent sample dimension.
    pub fn stacked_dim(&self) -> usize {
        self.stacked_dim
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    /// Full spectrum from a dense nonsymmetric eigensolver (real Schur).
    pub fn spectrum(&self) -> &[Complex<f64>] {
        self.spectrum.get_or_init(|| {
            let eig = self.m.complex_eigenvalues();
            eig.iter().copied().collect()
        })
    }

    /// Numerical-zero cutoff for eigenvalue magnitudes.
    pub fn zero_threshold(&self) -> f64 {
        1e-9 * self.m.norm()
    }

    /// Eigenvalues with magnitude above the zero cutoff.
    pub fn nonzero_eigenvalues(&self) -> Vec<Complex<f64>> {
        let cutoff = self.zero_threshold();
        self.spectrum().iter().copied().filter(|l| l.norm() > cutoff).collect()
    }
}

/// Assemble `M = −[[𝐗𝐗ᵀ, 𝐗𝐋], [𝐗ᵀ, 𝐋]]` from the row partitions and the
/// graph Laplacian.
pub fn build_convergence_matrix(
    partitions: &[Partition],
    laplacian: &DMatrix<f64>,
    pair_count: usize,
) -> Result<ConvergenceMatrix> {
    let p = partitions.len();
    if laplacian.nrows() != p || laplacian.ncols() != p {
        return Err(Error::shape(format!(
            "Laplacian is {:?} but there are {p} partitions",
            laplacian.shape()
        )));
    }
    for part in partitions {
        if part.x.ncols() != pair_count {
            return Err(Error::shape(format!(
                "partition has {} columns, expected {pair_count}",
                part.x.ncols()
            )));
        }
    }
    let n: usize = partitions.iter().map(|p| p.x.nrows()).sum();
    let np = pair_count * p;

    // 𝐗 = diag(X_1, …, X_p), n × Np.
    let mut x_block = DMatrix::zeros(n, np);
    for (i, part) in partitions.iter().enumerate() {
        x_block
            .view_mut((part.row_offset, i * pair_count), (part.x.nrows(), pair_count))
            .copy_from(&part.x);
    }
    let lifted = lifted_laplacian(laplacian, pair_count);

    let dim = n + np;
    let mut m = DMatrix::zeros(dim, dim);
    m.view_mut((0, 0), (n, n)).copy_from(&(-(&x_block * x_block.transpose())));
    m.view_mut((0, n), (n, np)).copy_from(&(-(&x_block * &lifted)));
    m.view_mut((n, 0), (np, n)).copy_from(&(-x_block.transpose()));
    m.view_mut((n, n), (np, np)).copy_from(&(-&lifted));

    Ok(ConvergenceMatrix { m, lift_dim: n, stacked_dim: np, spectrum: OnceLock::new() })
}

/// Largest admissible step size `−max_{λ ∈ Λ(M)\{0}} 2 Re(λ) / |λ|²`.
pub fn alpha_max(m: &ConvergenceMatrix) -> Result<f64> {
    let nonzero = m.nonzero_eigenvalues();
    if nonzero.is_empty() {
        return Err(Error::Numerical("all eigenvalues of M are zero".into()));
    }
    let worst = nonzero
        .iter()
        .map(|l| 2.0 * l.re / l.norm_sqr())
        .fold(f64::NEG_INFINITY, f64::max);
    let bound = -worst;
    if !bound.is_finite() || bound <= 0.0 {
        return Err(Error::Numerical(format!(
            "step-size bound {bound} not positive; M is not semi-Hurwitz"
        )));
    }
    Ok(bound)
}

/// Contraction-factor bound `max_{λ ∈ Λ(M)\{0}} √(1 + 2α Re(λ) + α²|λ|²)`
/// for a given step size.
pub fn rho_max(m: &ConvergenceMatrix, alpha: f64) -> Result<f64> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::invalid_input("step size must be positive"));
    }
    let nonzero = m.nonzero_eigenvalues();
    if nonzero.is_empty() {
        return Err(Error::Numerical("all eigenvalues of M are zero".into()));
    }
    Ok(nonzero
        .iter()
        .map(|l| (1.0 + 2.0 * alpha * l.re + alpha * alpha * l.norm_sqr()).max(0.0).sqrt())
        .fold(0.0, f64::max))
}

/// One synchronous round. Every agent reads neighbor values from the
/// pre-round snapshot; per-agent updates are independent, so parallel
/// and sequential execution produce identical results.
pub fn step(agents: &[AgentState], alpha: f64, graph: &CommGraph) -> Result<Vec<AgentState>> {
    if graph.node_count() != agents.len() {
        return Err(Error::shape(format!(
            "graph has {} nodes but there are {} agents",
            graph.node_count(),
            agents.len()
        )));
    }
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::invalid_input("step size must be positive"));
    }
    let next: Vec<AgentState> = agents
        .par_iter()
        .map(|agent| {
            let i = agent.index;
            let k_next = &agent.k - alpha * (&agent.s * agent.x.transpose());
            let mut s_next = &agent.s + (&k_next - &agent.k) * &agent.x;
            for j in graph.neighbors(i) {
                s_next -= alpha * (&agent.s - &agents[j].s);
            }
            AgentState { k: k_next, s: s_next, ..agent.clone() }
        })
        .collect();
    Ok(next)
}

/// Horizontal concatenation `[K_1 … K_p]` of the agents' blocks.
pub fn assemble_operator(agents: &[AgentState]) -> Result<KoopmanOperator> {
    let n = agents.first().map(|a| a.k.nrows()).unwrap_or(0);
    let total: usize = agents.iter().map(|a| a.k.ncols()).sum();
    if total != n {
        return Err(Error::shape(format!(
            "blocks concatenate to {total} columns, expected {n}"
        )));
    }
    let mut k = DMatrix::zeros(n, n);
    let mut col = 0;
    for agent in agents {
        k.view_mut((0, col), (n, agent.k.ncols())).copy_from(&agent.k);
        col += agent.k.ncols();
    }
    KoopmanOperator::new(k, Provenance::Distributed)
}

/// `K_d X = Σ_i K_i X_i` without materializing the concatenated operator.
fn predicted_lift(agents: &[AgentState]) -> DMatrix<f64> {
    let n = agents[0].k.nrows();
    let cols = agents[0].x.ncols();
    let mut acc = DMatrix::zeros(n, cols);
    for agent in agents {
        acc += &agent.k * &agent.x;
    }
    acc
}

/// Frobenius norm of `W(t) (1_p ⊗ I_N)` with `W = S + 𝐘 − K 𝐗`. The
/// prescribed initialization makes this exactly zero for every round, so
/// the observed value is the numerical defect of the run. `W*` itself is
/// never materialized; the contraction `𝐘 (1_p ⊗ I_N) = Y` collapses the
/// expression to `Σ_i S_i + Y − Σ_i K_i X_i`.
pub fn consensus_defect(agents: &[AgentState]) -> f64 {
    let n = agents[0].k.nrows();
    let cols = agents[0].x.ncols();
    let mut acc = DMatrix::zeros(n, cols);
    for agent in agents {
        acc += &agent.s;
        acc -= &agent.k * &agent.x;
        let mut own_rows = acc.rows_mut(agent.row_offset, agent.y.nrows());
        own_rows += &agent.y;
    }
    acc.norm()
}

/// Per-iteration diagnostics of a learning run; index 0 is the state
/// before the first round.
#[derive(Debug, Clone)]
pub struct LearningTrace {
    /// `O(t) = ||(K* − K_d(t)) X||_F`, present when an oracle was given.
    pub objective: Option<Vec<f64>>,
    /// `||K_d(t) − K*||_F`, present when an oracle was given.
    pub operator_error: Option<Vec<f64>>,
    /// `||W(t) (1_p ⊗ I_N)||_F`.
    pub consensus_defect: Vec<f64>,
    pub final_operator: KoopmanOperator,
    /// Set when the caller supplied a bound and `alpha` exceeded it.
    pub step_size_exceeded_bound: bool,
}

/// Options for [`run`].
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub alpha: f64,
    pub rounds: usize,
    /// When known, used to warn (not stop) if `alpha` is out of range.
    pub alpha_max: Option<f64>,
}

/// Execute `rounds` synchronous rounds, recording diagnostics at every
/// iteration including iteration 0.
pub fn run(
    agents: &mut Vec<AgentState>,
    graph: &CommGraph,
    options: &RunOptions,
    oracle: Option<&KoopmanOperator>,
    data: &DataMatrices,
) -> Result<LearningTrace> {
    let mut exceeded = false;
    if let Some(bound) = options.alpha_max {
        if options.alpha >= bound {
            log::warn!(
                "step size {} is at or above the admissible bound {}; divergence is expected",
                options.alpha,
                bound
            );
            exceeded = true;
        }
    }
    let oracle_lift = oracle.map(|k| k.matrix() * data.x());
    let mut objective = oracle.map(|_| Vec::with_capacity(options.rounds + 1));
    let mut operator_error = oracle.map(|_| Vec::with_capacity(options.rounds + 1));
    let mut defects = Vec::with_capacity(options.rounds + 1);

    let record = |agents: &[AgentState],
                      objective: &mut Option<Vec<f64>>,
                      operator_error: &mut Option<Vec<f64>>,
                      defects: &mut Vec<f64>|
     -> Result<()> {
        if let (Some(obj), Some(target)) = (objective.as_mut(), oracle_lift.as_ref()) {
            obj.push((target - predicted_lift(agents)).norm());
        }
        if let (Some(err), Some(k_star)) = (operator_error.as_mut(), oracle) {
            let kd = assemble_operator(agents)?;
            err.push((kd.matrix() - k_star.matrix()).norm());
        }
        defects.push(consensus_defect(agents));
        Ok(())
    };

    record(agents, &mut objective, &mut operator_error, &mut defects)?;
    for _ in 0..options.rounds {
        *agents = step(agents, options.alpha, graph)?;
        record(agents, &mut objective, &mut operator_error, &mut defects)?;
    }

    Ok(LearningTrace {
        objective,
        operator_error,
        consensus_defect: defects,
        final_operator: assemble_operator(agents)?,
        step_size_exceeded_bound: exceeded,
    })
}

/// Least-squares fit of a geometric decay rate to a positive series:
/// the slope of `ln v(t)` against `t`, exponentiated. Returns `None`
/// for fewer than two usable points or nonpositive values.
pub fn geometric_rate(values: &[f64]) -> Option<f64> {
    if values.len() < 2 || values.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return None;
    }
    let logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let n = logs.len() as f64;
    let mean_t = (logs.len() - 1) as f64 / 2.0;
    let mean_y = logs.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, y) in logs.iter().enumerate() {
        num += (t as f64 - mean_t) * (y - mean_y);
        den += (t as f64 - mean_t).powi(2);
    }
    Some((num / den).exp())
}

/// Entrywise absolute difference `|K_d − K*|`.
pub fn operator_diff_map(kd: &KoopmanOperator, kstar: &KoopmanOperator) -> Result<DMatrix<f64>> {
    if kd.dim() != kstar.dim() {
        return Err(Error::shape(format!("{} vs {}", kd.dim(), kstar.dim())));
    }
    Ok((kd.matrix() - kstar.matrix()).abs())
}

/// Eigenvalues of both operators, each sorted by magnitude then angle.
pub fn spectrum_compare(
    kd: &KoopmanOperator,
    kstar: &KoopmanOperator,
) -> (Vec<Complex<f64>>, Vec<Complex<f64>>) {
    (sorted_spectrum(kd.matrix()), sorted_spectrum(kstar.matrix()))
}

fn sorted_spectrum(m: &DMatrix<f64>) -> Vec<Complex<f64>> {
    let mut eig: Vec<Complex<f64>> = m.complex_eigenvalues().iter().copied().collect();
    eig.sort_by(|a, b| {
        a.norm()
            .partial_cmp(&b.norm())
            .unwrap()
            .then(a.arg().partial_cmp(&b.arg()).unwrap())
    });
    eig
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Topology;
    use crate::lifting::{centralized_edmd, partition_rows, residual_orthogonality};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn random_data(n: usize, cols: usize, seed: u64) -> DataMatrices {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, cols, |_, _| rng.random_range(-1.0..1.0));
        let y = DMatrix::from_fn(n, cols, |_, _| rng.random_range(-1.0..1.0));
        DataMatrices::new(x, y).unwrap()
    }

    fn setup(
        n: usize,
        cols: usize,
        p: usize,
        seed: u64,
    ) -> (DataMatrices, Vec<Partition>, CommGraph) {
        let data = random_data(n, cols, seed);
        let parts = partition_rows(&data, p, None).unwrap();
        let graph = CommGraph::build(&Topology::Ring, p).unwrap();
        (data, parts, graph)
    }

    #[test]
    fn initial_conditions_follow_block_structure() {
        let (_, parts, _) = setup(4, 3, 2, 1);
        let agents = init_agents(&parts).unwrap();
        for agent in &agents {
            assert_abs_diff_eq!(agent.operator_block().norm(), 0.0);
        }
        // S_1(0): rows 0-1 hold −Y_1, rows 2-3 are zero.
        let s1 = agents[0].auxiliary();
        assert_eq!(s1.rows(0, 2), -parts[0].y.clone());
        assert_abs_diff_eq!(s1.rows(2, 2).norm(), 0.0);
        let s2 = agents[1].auxiliary();
        assert_abs_diff_eq!(s2.rows(0, 2).norm(), 0.0);
        assert_eq!(s2.rows(2, 2), -parts[1].y.clone());
    }

    #[test]
    fn single_agent_initial_auxiliary_is_minus_y() {
        let data = random_data(3, 4, 2);
        let parts = partition_rows(&data, 1, None).unwrap();
        let agents = init_agents(&parts).unwrap();
        assert_eq!(agents[0].auxiliary(), &(-data.y()));
    }

    #[test]
    fn convergence_matrix_single_node() {
        // p = 1, zero Laplacian: M = −[[XXᵀ, 0], [Xᵀ, 0]].
        let data = random_data(2, 2, 3);
        let parts = partition_rows(&data, 1, None).unwrap();
        let l = DMatrix::zeros(1, 1);
        let cm = build_convergence_matrix(&parts, &l, 2).unwrap();
        assert_eq!(cm.dim(), 4);
        let xxt = data.x() * data.x().transpose();
        assert_abs_diff_eq!((cm.matrix().view((0, 0), (2, 2)) + xxt).norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(cm.matrix().view((0, 2), (2, 2)).norm(), 0.0);
        assert_abs_diff_eq!(
            (cm.matrix().view((2, 0), (2, 2)) + data.x().transpose()).norm(),
            0.0,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(cm.matrix().view((2, 2), (2, 2)).norm(), 0.0);
    }

    #[test]
    fn convergence_matrix_two_scalar_agents() {
        // p = 2, n = 2, N = 1, scalar blocks a and b.
        let (a, b) = (2.0, 3.0);
        let x = DMatrix::from_column_slice(2, 1, &[a, b]);
        let y = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let data = DataMatrices::new(x, y).unwrap();
        let parts = partition_rows(&data, 2, None).unwrap();
        let graph = CommGraph::build(&Topology::Path, 2).unwrap();
        let cm = build_convergence_matrix(&parts, &graph.laplacian(), 1).unwrap();
        let expect = -DMatrix::from_row_slice(
            4,
            4,
            &[
                a * a, 0.0, a, -a, //
                0.0, b * b, -b, b, //
                a, 0.0, 1.0, -1.0, //
                0.0, b, -1.0, 1.0,
            ],
        );
        assert_abs_diff_eq!((cm.matrix() - expect).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn convergence_matrix_paper_scale_dimension() {
        // 30×30 grid, N = 10 pairs, p = 3 agents → 930.
        let data = random_data(900, 10, 4);
        let parts = partition_rows(&data, 3, None).unwrap();
        let graph = CommGraph::build(&Topology::Ring, 3).unwrap();
        let cm = build_convergence_matrix(&parts, &graph.laplacian(), 10).unwrap();
        assert_eq!(cm.dim(), 930);
    }

    #[test]
    fn alpha_max_closed_forms() {
        // Spectrum {−1}: bound 2. Spectrum {−1, −2}: bound 1.
        let m1 = ConvergenceMatrix {
            m: DMatrix::from_row_slice(1, 1, &[-1.0]),
            lift_dim: 1,
            stacked_dim: 0,
            spectrum: OnceLock::new(),
        };
        assert_abs_diff_eq!(alpha_max(&m1).unwrap(), 2.0, epsilon = 1e-12);

        let m2 = ConvergenceMatrix {
            m: DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]),
            lift_dim: 2,
            stacked_dim: 0,
            spectrum: OnceLock::new(),
        };
        assert_abs_diff_eq!(alpha_max(&m2).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn rho_max_closed_forms() {
        let m = ConvergenceMatrix {
            m: DMatrix::from_row_slice(1, 1, &[-1.0]),
            lift_dim: 1,
            stacked_dim: 0,
            spectrum: OnceLock::new(),
        };
        assert_abs_diff_eq!(rho_max(&m, 1.0).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(rho_max(&m, 0.5).unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn zero_spectrum_is_an_error() {
        let m = ConvergenceMatrix {
            m: DMatrix::zeros(2, 2),
            lift_dim: 2,
            stacked_dim: 0,
            spectrum: OnceLock::new(),
        };
        assert!(alpha_max(&m).is_err());
        assert!(rho_max(&m, 0.1).is_err());
    }

    /// The nonzero spectrum of M must match the spectrum of the reduced
    /// symmetric matrix −(𝐗ᵀ𝐗 + 𝐋): M factors as −[[𝐗],[I]]·[𝐗ᵀ 𝐋], and
    /// AB and BA share nonzero eigenvalues. This pits the dense
    /// nonsymmetric route against an independent symmetric one.
    #[test]
    fn nonzero_spectrum_matches_symmetric_reduction() {
        for (n, cols, p, seed) in [(6, 3, 2, 5u64), (9, 4, 3, 6u64), (12, 2, 4, 7u64)] {
            let (data, parts, graph) = setup(n, cols, p, seed);
            let lap = graph.laplacian();
            let cm = build_convergence_matrix(&parts, &lap, cols).unwrap();

            let mut x_block = DMatrix::zeros(n, cols * p);
            for (i, part) in parts.iter().enumerate() {
                x_block
                    .view_mut((part.row_offset, i * cols), (part.x.nrows(), cols))
                    .copy_from(&part.x);
            }
            let reduced = x_block.transpose() * &x_block + lifted_laplacian(&lap, cols);
            let mut sym: Vec<f64> = reduced.symmetric_eigenvalues().iter().map(|v| -v).collect();
            sym.sort_by(|a, b| a.partial_cmp(b).unwrap());
            sym.retain(|v| v.abs() > cm.zero_threshold());

            let mut dense: Vec<f64> = cm.nonzero_eigenvalues().iter().map(|l| l.re).collect();
            dense.sort_by(|a, b| a.partial_cmp(b).unwrap());

            assert_eq!(dense.len(), sym.len(), "nonzero counts differ");
            for (d, s) in dense.iter().zip(sym.iter()) {
                assert_abs_diff_eq!(d, s, epsilon = 1e-8 * cm.matrix().norm().max(1.0));
            }
            // Semi-Hurwitz: strictly negative real parts off the kernel.
            for l in cm.nonzero_eigenvalues() {
                assert!(l.re < 0.0, "eigenvalue {l} has nonnegative real part");
            }

            let _ = data;
        }
    }

    #[test]
    fn step_fixed_point_when_auxiliary_zero() {
        let (_, parts, graph) = setup(4, 3, 2, 8);
        let mut agents = init_agents(&parts).unwrap();
        for agent in &mut agents {
            agent.s.fill(0.0);
            agent.k.fill(0.25);
        }
        let next = step(&agents, 0.1, &graph).unwrap();
        for (a, b) in agents.iter().zip(next.iter()) {
            assert_eq!(a.operator_block(), b.operator_block());
            assert_abs_diff_eq!(b.auxiliary().norm(), 0.0);
        }
    }

    #[test]
    fn step_single_agent_matches_closed_form() {
        // p = 1: S⁺ = S − α S XᵀX.
        let data = random_data(3, 2, 9);
        let parts = partition_rows(&data, 1, None).unwrap();
        let graph = CommGraph::build(&Topology::Ring, 1).unwrap();
        let agents = init_agents(&parts).unwrap();
        let alpha = 0.05;
        let next = step(&agents, alpha, &graph).unwrap();
        let s0 = agents[0].auxiliary();
        let expect = s0 - alpha * (s0 * data.x().transpose() * data.x());
        assert_abs_diff_eq!((next[0].auxiliary() - expect).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn step_two_agents_matches_hand_computation() {
        // n = 2, N = 1, scalar blocks: one round worked out by hand with
        // a = 2, b = 3, c = 5, d = 7, α = 0.1.
        let x = DMatrix::from_column_slice(2, 1, &[2.0, 3.0]);
        let y = DMatrix::from_column_slice(2, 1, &[5.0, 7.0]);
        let data = DataMatrices::new(x, y).unwrap();
        let parts = partition_rows(&data, 2, None).unwrap();
        let graph = CommGraph::build(&Topology::Path, 2).unwrap();
        let agents = init_agents(&parts).unwrap();
        let next = step(&agents, 0.1, &graph).unwrap();

        let k1 = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let k2 = DMatrix::from_column_slice(2, 1, &[0.0, 2.1]);
        let s1 = DMatrix::from_column_slice(2, 1, &[-2.5, -0.7]);
        let s2 = DMatrix::from_column_slice(2, 1, &[-0.5, 0.0]);
        assert_abs_diff_eq!((next[0].operator_block() - k1).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((next[1].operator_block() - k2).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((next[0].auxiliary() - s1).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((next[1].auxiliary() - s2).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn consensus_defect_zero_at_init_and_along_run() {
        let (data, parts, graph) = setup(6, 3, 2, 10);
        let mut agents = init_agents(&parts).unwrap();
        assert_abs_diff_eq!(consensus_defect(&agents), 0.0, epsilon = 1e-14);

        let tol = 1e-10 * (1.0 + data.y().norm());
        for _ in 0..50 {
            agents = step(&agents, 0.05, &graph).unwrap();
            assert!(consensus_defect(&agents) <= tol);
        }
    }

    #[test]
    fn corrupted_initialization_breaks_consensus_invariant() {
        let (data, parts, graph) = setup(6, 3, 2, 11);
        let mut agents = init_agents(&parts).unwrap();
        for agent in &mut agents {
            agent.s.fill(0.0);
        }
        // W(0) collapses to Y, so the defect equals ||Y||_F.
        assert_abs_diff_eq!(consensus_defect(&agents), data.y().norm(), epsilon = 1e-12);
        agents = step(&agents, 0.05, &graph).unwrap();
        assert!(consensus_defect(&agents) > 1e-6);
    }

    #[test]
    fn run_converges_to_oracle_on_small_instance() {
        let (data, parts, graph) = setup(8, 4, 2, 12);
        let oracle = centralized_edmd(&data, 0.0).unwrap();
        let cm = build_convergence_matrix(&parts, &graph.laplacian(), 4).unwrap();
        let bound = alpha_max(&cm).unwrap();
        let mut agents = init_agents(&parts).unwrap();
        let trace = run(
            &mut agents,
            &graph,
            &RunOptions { alpha: 0.5 * bound, rounds: 4000, alpha_max: Some(bound) },
            Some(&oracle),
            &data,
        )
        .unwrap();
        let objective = trace.objective.as_ref().unwrap();
        assert_eq!(objective.len(), 4001);
        assert!(!trace.step_size_exceeded_bound);
        assert!(objective[4000] <= 1e-6 * objective[0], "O decayed to {}", objective[4000]);
        let resid = residual_orthogonality(&trace.final_operator, &data).unwrap();
        assert!(resid <= 1e-6 * data.y().norm().max(1.0));
    }

    #[test]
    fn run_zero_rounds_reports_initial_objective() {
        let (data, parts, graph) = setup(4, 2, 2, 13);
        let oracle = centralized_edmd(&data, 0.0).unwrap();
        let mut agents = init_agents(&parts).unwrap();
        let trace = run(
            &mut agents,
            &graph,
            &RunOptions { alpha: 0.01, rounds: 0, alpha_max: None },
            Some(&oracle),
            &data,
        )
        .unwrap();
        let objective = trace.objective.as_ref().unwrap();
        assert_eq!(objective.len(), 1);
        assert_abs_diff_eq!(
            objective[0],
            (oracle.matrix() * data.x()).norm(),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(trace.final_operator.matrix().norm(), 0.0);
    }

    #[test]
    fn single_agent_run_matches_gradient_descent() {
        // With p = 1 the update reduces to gradient descent on
        // ½||Y − K X||²_F; both iterations must coincide exactly.
        let data = random_data(5, 3, 14);
        let parts = partition_rows(&data, 1, None).unwrap();
        let graph = CommGraph::build(&Topology::Ring, 1).unwrap();
        let mut agents = init_agents(&parts).unwrap();
        let alpha = 0.05;

        let mut k_gd = DMatrix::zeros(5, 5);
        for _ in 0..200 {
            agents = step(&agents, alpha, &graph).unwrap();
            k_gd = &k_gd + alpha * (data.y() - &k_gd * data.x()) * data.x().transpose();
        }
        let kd = assemble_operator(&agents).unwrap();
        assert_abs_diff_eq!((kd.matrix() - &k_gd).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn operator_distance_to_limit_shrinks() {
        let (data, parts, graph) = setup(6, 3, 3, 15);
        let cm = build_convergence_matrix(&parts, &graph.laplacian(), 3).unwrap();
        let alpha = 0.5 * alpha_max(&cm).unwrap();
        let mut agents = init_agents(&parts).unwrap();
        let mut snapshots = Vec::new();
        for t in 0..3000 {
            if t == 0 || t == 500 {
                snapshots.push(assemble_operator(&agents).unwrap());
            }
            agents = step(&agents, alpha, &graph).unwrap();
        }
        let limit = assemble_operator(&agents).unwrap();
        let d0 = (snapshots[0].matrix() - limit.matrix()).norm();
        let d1 = (snapshots[1].matrix() - limit.matrix()).norm();
        assert!(d1 < d0);
        assert!(d1 < 1e-3 * d0, "distance to limit should collapse, got {d1} vs {d0}");
        let _ = data;
    }

    #[test]
    fn unstable_step_size_diverges() {
        let (data, parts, graph) = setup(8, 4, 2, 16);
        let oracle = centralized_edmd(&data, 0.0).unwrap();
        let cm = build_convergence_matrix(&parts, &graph.laplacian(), 4).unwrap();
        let bound = alpha_max(&cm).unwrap();
        let mut agents = init_agents(&parts).unwrap();
        let trace = run(
            &mut agents,
            &graph,
            &RunOptions { alpha: 1.5 * bound, rounds: 200, alpha_max: Some(bound) },
            Some(&oracle),
            &data,
        )
        .unwrap();
        assert!(trace.step_size_exceeded_bound);
        let objective = trace.objective.as_ref().unwrap();
        let last = *objective.last().unwrap();
        assert!(!last.is_finite() || last > objective[0]);
    }

    #[test]
    fn parallel_and_sequential_rounds_are_bit_identical() {
        let (_, parts, graph) = setup(8, 4, 4, 17);
        let agents = init_agents(&parts).unwrap();

        let serial_pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let wide_pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let mut a = agents.clone();
        let mut b = agents.clone();
        for _ in 0..20 {
            a = serial_pool.install(|| step(&a, 0.05, &graph)).unwrap();
            b = wide_pool.install(|| step(&b, 0.05, &graph)).unwrap();
        }
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.operator_block(), y.operator_block());
            assert_eq!(x.auxiliary(), y.auxiliary());
        }
    }

    #[test]
    fn geometric_rate_recovers_known_decay() {
        let series: Vec<f64> = (0..40).map(|t| 3.0 * 0.8f64.powi(t)).collect();
        let rate = geometric_rate(&series).unwrap();
        assert_abs_diff_eq!(rate, 0.8, epsilon = 1e-10);
        assert!(geometric_rate(&[1.0]).is_none());
        assert!(geometric_rate(&[1.0, -2.0]).is_none());
    }

    /// Converged runs decay no slower than the spectral bound (fitting
    /// the final third of the objective trace).
    #[test]
    fn objective_tail_respects_rate_bound() {
        let (data, parts, graph) = setup(9, 4, 3, 19);
        let oracle = centralized_edmd(&data, 0.0).unwrap();
        let cm = build_convergence_matrix(&parts, &graph.laplacian(), 4).unwrap();
        let bound = alpha_max(&cm).unwrap();
        let alpha = 0.5 * bound;
        let rho = rho_max(&cm, alpha).unwrap();
        let rounds = ((1e-8f64).ln() / rho.ln()).ceil() as usize;
        let mut agents = init_agents(&parts).unwrap();
        let trace = run(
            &mut agents,
            &graph,
            &RunOptions { alpha, rounds, alpha_max: Some(bound) },
            Some(&oracle),
            &data,
        )
        .unwrap();
        let objective = trace.objective.as_ref().unwrap();
        let tail = &objective[objective.len() - objective.len() / 3..];
        let fitted = geometric_rate(tail).expect("objective stays positive");
        assert!(
            fitted <= rho + 0.02,
            "fitted rate {fitted} exceeds bound {rho} + 0.02"
        );
    }

    #[test]
    fn diff_map_and_spectrum_compare() {
        let i2 = KoopmanOperator::new(DMatrix::identity(2, 2), Provenance::Centralized).unwrap();
        let mut perturbed = DMatrix::identity(2, 2);
        perturbed[(0, 0)] += 0.1;
        let kd = KoopmanOperator::new(perturbed, Provenance::Distributed).unwrap();
        let map = operator_diff_map(&kd, &i2).unwrap();
        assert_abs_diff_eq!(map[(0, 0)], 0.1, epsilon = 1e-14);
        assert_abs_diff_eq!(map.norm(), 0.1, epsilon = 1e-14);

        let (eig_d, eig_s) = spectrum_compare(&i2, &i2);
        assert_eq!(eig_d, eig_s);
        let swap = KoopmanOperator::new(
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]),
            Provenance::Centralized,
        )
        .unwrap();
        // Both eigenvalues have unit magnitude; the angle tiebreak puts
        // +1 (arg 0) before −1 (arg π).
        let (eig, _) = spectrum_compare(&swap, &i2);
        assert_abs_diff_eq!(eig[0].re, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(eig[1].re, -1.0, epsilon = 1e-12);
    }

    /// At convergence the distributed and centralized spectra coincide
    /// (Hausdorff distance on the eigenvalue sets).
    #[test]
    fn converged_spectrum_matches_oracle() {
        let (data, parts, graph) = setup(6, 8, 2, 18);
        let oracle = centralized_edmd(&data, 0.0).unwrap();
        let cm = build_convergence_matrix(&parts, &graph.laplacian(), 8).unwrap();
        let alpha = 0.5 * alpha_max(&cm).unwrap();
        let mut agents = init_agents(&parts).unwrap();
        let trace = run(
            &mut agents,
            &graph,
            &RunOptions { alpha, rounds: 6000, alpha_max: None },
            Some(&oracle),
            &data,
        )
        .unwrap();
        let (eig_d, eig_s) = spectrum_compare(&trace.final_operator, &oracle);
        let hausdorff = eig_d
            .iter()
            .map(|a| eig_s.iter().map(|b| (a - b).norm()).fold(f64::INFINITY, f64::min))
            .fold(0.0, f64::max);
        assert!(hausdorff <= 1e-5, "spectra differ by {hausdorff}");
    }
}
