//! Synthetic dynamic-obstacle scenarios and the full closed loop:
//! observe → learn → forecast → fit geometry → solve the horizon
//! problem → drive the unicycle → advance the world → log.

use std::collections::VecDeque;

use nalgebra::{Complex, Point2, Vector2};
use rayon::prelude::*;

use crate::consensus::{
    alpha_max, build_convergence_matrix, init_agents, rho_max, run, warm_agents, AgentState,
    LearningTrace, RunOptions,
};
use crate::error::{Error, Result};
use crate::forecast::{forecast_maps, threshold_set, ForecastSequence, GridWorldMap};
use crate::geometry::{
    confidence_ellipse, ellipse_polytope, fit_gmm, FacetNormals, GmmConfig, ObstaclePolytope,
};
use crate::graph::{CommGraph, Topology};
use crate::lifting::{
    assemble_pairs, centralized_edmd, partition_rows, DataMatrices, DensitySnapshot,
    KoopmanOperator,
};
use crate::mpc::{MpcConfig, MpcController, MpcStatus};
use crate::seed::stage_seed;
use crate::vehicle::{forward_inputs, recover_inputs, unicycle_step, UnicycleState};

/// One Gaussian intensity blob moving at constant velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleBlob {
    pub center: Point2<f64>,
    pub velocity: Vector2<f64>,
    /// Isotropic spread in meters.
    pub sigma: f64,
    /// Peak intensity in (0, 1].
    pub peak: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryPolicy {
    Bounce,
    Wrap,
}

#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub map: GridWorldMap,
    pub blobs: Vec<ObstacleBlob>,
    pub frames: usize,
    pub seed: u64,
    pub dt: f64,
    pub boundary: BoundaryPolicy,
}

impl ScenarioConfig {
    pub fn new(
        map: GridWorldMap,
        blobs: Vec<ObstacleBlob>,
        frames: usize,
        seed: u64,
        dt: f64,
        boundary: BoundaryPolicy,
    ) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Config("frame count must be positive".into()));
        }
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::Config("dt must be positive".into()));
        }
        for (i, blob) in blobs.iter().enumerate() {
            if blob.sigma <= 0.0 {
                return Err(Error::Config(format!("obstacle {i} has nonpositive sigma")));
            }
            if blob.peak <= 0.0 || blob.peak > 1.0 {
                return Err(Error::Config(format!(
                    "obstacle {i} peak {} outside (0, 1]",
                    blob.peak
                )));
            }
        }
        Ok(ScenarioConfig { map, blobs, frames, seed, dt, boundary })
    }
}

/// Moving ground truth behind the rendered snapshots.
#[derive(Debug, Clone)]
pub struct ObstacleField {
    blobs: Vec<ObstacleBlob>,
    boundary: BoundaryPolicy,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl ObstacleField {
    pub fn new(config: &ScenarioConfig) -> Self {
        ObstacleField {
            blobs: config.blobs.clone(),
            boundary: config.boundary,
            x_range: (config.map.origin_x, config.map.origin_x + config.map.width()),
            y_range: (config.map.origin_y, config.map.origin_y + config.map.height()),
        }
    }

    pub fn centers(&self) -> Vec<Point2<f64>> {
        self.blobs.iter().map(|b| b.center).collect()
    }

    pub fn advance(&mut self, dt: f64) {
        for blob in &mut self.blobs {
            let mut x = blob.center.x + blob.velocity.x * dt;
            let mut y = blob.center.y + blob.velocity.y * dt;
            match self.boundary {
                BoundaryPolicy::Bounce => {
                    reflect(&mut x, &mut blob.velocity.x, self.x_range);
                    reflect(&mut y, &mut blob.velocity.y, self.y_range);
                }
                BoundaryPolicy::Wrap => {
                    x = self.x_range.0
                        + (x - self.x_range.0).rem_euclid(self.x_range.1 - self.x_range.0);
                    y = self.y_range.0
                        + (y - self.y_range.0).rem_euclid(self.y_range.1 - self.y_range.0);
                }
            }
            blob.center = Point2::new(x, y);
        }
    }

    /// Sum of blob intensities sampled at cell centers, clamped to [0, 1].
    pub fn render(&self, map: &GridWorldMap, timestamp: usize) -> DensitySnapshot {
        let mut values = vec![0.0; map.rows * map.cols];
        for blob in &self.blobs {
            let inv = 1.0 / (2.0 * blob.sigma * blob.sigma);
            for r in 0..map.rows {
                for c in 0..map.cols {
                    let center = map.cell_center(r, c);
                    let d2 = (center - blob.center).norm_squared();
                    values[r * map.cols + c] += blob.peak * (-d2 * inv).exp();
                }
            }
        }
        for v in &mut values {
            *v = v.clamp(0.0, 1.0);
        }
        DensitySnapshot::new(map.rows, map.cols, values, timestamp)
            .expect("rendered values are clamped into range")
    }
}

fn reflect(pos: &mut f64, vel: &mut f64, range: (f64, f64)) {
    // Repeated reflection handles steps larger than the world.
    for _ in 0..64 {
        if *pos < range.0 {
            *pos = 2.0 * range.0 - *pos;
            *vel = -*vel;
        } else if *pos > range.1 {
            *pos = 2.0 * range.1 - *pos;
            *vel = -*vel;
        } else {
            return;
        }
    }
}

/// Deterministic snapshot sequence of `config.frames` frames.
pub fn generate_scenario(config: &ScenarioConfig) -> Vec<DensitySnapshot> {
    let mut field = ObstacleField::new(config);
    let mut out = Vec::with_capacity(config.frames);
    for t in 0..config.frames {
        out.push(field.render(&config.map, t));
        if t + 1 < config.frames {
            field.advance(config.dt);
        }
    }
    out
}

/// Settings for the distributed learning pipeline.
#[derive(Debug, Clone)]
pub struct LearnSettings {
    pub topology: Topology,
    pub agents: usize,
    /// Transition pairs used for training (the window is `pairs + 1`
    /// frames).
    pub pairs: usize,
    /// Step size as a fraction of the admissible bound.
    pub alpha_fraction: f64,
    /// Round budget targets this contraction of the objective.
    pub target_tol: f64,
    pub max_rounds: usize,
    pub ridge: f64,
    pub partition_sizes: Option<Vec<usize>>,
}

impl Default for LearnSettings {
    fn default() -> Self {
        LearnSettings {
            topology: Topology::Ring,
            agents: 3,
            pairs: 10,
            alpha_fraction: 0.5,
            target_tol: 1e-8,
            max_rounds: 20_000,
            ridge: 0.0,
            partition_sizes: None,
        }
    }
}

/// Spectral quantities and budget of one learning run.
#[derive(Debug, Clone)]
pub struct LearnReport {
    pub alpha_max: f64,
    pub rho_max: f64,
    pub alpha: f64,
    pub rounds: usize,
    pub m_dim: usize,
    pub nonzero_m_eigenvalues: Vec<Complex<f64>>,
}

#[derive(Debug)]
pub struct LearnOutcome {
    pub operator: KoopmanOperator,
    pub oracle: KoopmanOperator,
    pub trace: LearningTrace,
    pub report: LearnReport,
    pub agents: Vec<AgentState>,
    pub graph: CommGraph,
}

/// Run the full learning pipeline on prepared data: build the graph
/// (must be connected), partition rows, derive the step size and round
/// budget from the convergence-matrix spectrum, and iterate to the
/// distributed operator. `warm_blocks`, when given, resumes from a
/// previous estimate instead of the prescribed zero initialization.
pub fn learn_operator(
    data: &DataMatrices,
    settings: &LearnSettings,
    warm_blocks: Option<&[nalgebra::DMatrix<f64>]>,
) -> Result<LearnOutcome> {
    let graph = CommGraph::build(&settings.topology, settings.agents)?;
    if !graph.is_connected() {
        return Err(Error::InvalidGraph(
            "communication graph must be connected for convergence".into(),
        ));
    }
    let partitions = partition_rows(data, settings.agents, settings.partition_sizes.as_deref())?;
    let convergence = build_convergence_matrix(&partitions, &graph.laplacian(), data.pair_count())?;
    let bound = alpha_max(&convergence)?;
    let alpha = settings.alpha_fraction * bound;
    let rho = rho_max(&convergence, alpha)?;
    let rounds = round_budget(settings.target_tol, rho, settings.max_rounds);

    let oracle = centralized_edmd(data, settings.ridge)?;
    let mut agents = match warm_blocks {
        Some(blocks) => warm_agents(&partitions, blocks)?,
        None => init_agents(&partitions)?,
    };
    let trace = run(
        &mut agents,
        &graph,
        &RunOptions { alpha, rounds, alpha_max: Some(bound) },
        Some(&oracle),
        data,
    )?;
    let report = LearnReport {
        alpha_max: bound,
        rho_max: rho,
        alpha,
        rounds,
        m_dim: convergence.dim(),
        nonzero_m_eigenvalues: convergence.nonzero_eigenvalues(),
    };
    Ok(LearnOutcome {
        operator: trace.final_operator.clone(),
        oracle,
        trace,
        report,
        agents,
        graph,
    })
}

fn round_budget(target_tol: f64, rho: f64, max_rounds: usize) -> usize {
    if rho <= f64::EPSILON {
        return 1;
    }
    if rho >= 1.0 {
        log::warn!("contraction bound {rho} is not below 1; using the round cap");
        return max_rounds;
    }
    let raw = (target_tol.ln() / rho.ln()).ceil();
    (raw as usize).clamp(1, max_rounds)
}

/// Perception settings shared by the forecast and navigate stages.
#[derive(Debug, Clone)]
pub struct PerceptionSettings {
    /// Occupancy threshold.
    pub threshold: f64,
    /// Mixture components per map.
    pub components: usize,
    /// Half-spaces per obstacle.
    pub facets: usize,
    /// Confidence quantile for the ellipses.
    pub quantile: f64,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    pub tangent_normals: bool,
    pub density_weighted: bool,
}

impl Default for PerceptionSettings {
    fn default() -> Self {
        PerceptionSettings {
            threshold: 0.3,
            components: 12,
            facets: 8,
            quantile: 0.95,
            gmm_max_iter: 60,
            gmm_tol: 1e-6,
            tangent_normals: false,
            density_weighted: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NavigationSettings {
    pub max_steps: usize,
    pub goal_tolerance: f64,
    pub stop_at_goal: bool,
    /// When false, constraints come from the current frame only.
    pub forecasting: bool,
    pub start: Point2<f64>,
    pub theta0: f64,
    pub v0: f64,
    pub refresh_interval: usize,
    pub refresh_rounds: usize,
    pub dump_interval: usize,
}

impl Default for NavigationSettings {
    fn default() -> Self {
        NavigationSettings {
            max_steps: 400,
            goal_tolerance: 0.1,
            stop_at_goal: true,
            forecasting: true,
            start: Point2::new(0.0, 0.0),
            theta0: std::f64::consts::FRAC_PI_4,
            v0: crate::vehicle::V_MIN,
            refresh_interval: 0,
            refresh_rounds: 0,
            dump_interval: 0,
        }
    }
}

/// One control step of the closed loop; positions and distances are
/// sampled after the step, when robot and obstacles share a time
/// instant.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time: f64,
    pub state: UnicycleState,
    pub ax: f64,
    pub ay: f64,
    pub omega: f64,
    pub accel: f64,
    pub objective: f64,
    pub max_slack: f64,
    pub solver_iterations: usize,
    pub status: MpcStatus,
    pub h0_violation: bool,
    pub recover_clamped: bool,
    pub roundtrip_error: f64,
    pub obstacle_distances: Vec<f64>,
}

/// Forecast and polytope snapshot dumped mid-run.
#[derive(Debug, Clone)]
pub struct OverlayDump {
    pub decision_timestamp: usize,
    pub forecast: ForecastSequence,
    pub polytopes: Vec<ObstaclePolytope>,
}

#[derive(Debug)]
pub struct ClosedLoopLog {
    pub steps: Vec<StepRecord>,
    pub goal_reached_at: Option<f64>,
    pub learn_report: LearnReport,
    pub dumps: Vec<OverlayDump>,
}

/// Build tagged polytopes for every horizon slot of one decision:
/// slot 0 sees the current frame, later slots see forecasts (or the
/// current frame again when forecasting is off). Slots whose
/// thresholded point set is empty contribute nothing; slots with fewer
/// points than requested components are fitted with as many components
/// as the points support.
fn build_polytopes(
    current: &DensitySnapshot,
    forecasts: &[DensitySnapshot],
    horizon: usize,
    map: &GridWorldMap,
    perception: &PerceptionSettings,
    margin: f64,
    seed: u64,
) -> Result<Vec<ObstaclePolytope>> {
    let mode =
        if perception.tangent_normals { FacetNormals::Tangent } else { FacetNormals::Radial };
    let per_slot: Vec<Result<Vec<ObstaclePolytope>>> = (0..horizon)
        .into_par_iter()
        .map(|slot| {
            let snapshot = if slot == 0 {
                current
            } else {
                forecasts.get(slot - 1).unwrap_or(current)
            };
            let points = threshold_set(snapshot, perception.threshold, map, slot)?;
            if points.is_empty() {
                return Ok(Vec::new());
            }
            let components = perception.components.min(points.len());
            let gmm_seed = stage_seed(seed, &format!("gmm/t{}/h{slot}", current.timestamp()));
            let cfg = GmmConfig {
                components,
                seed: gmm_seed,
                max_iter: perception.gmm_max_iter,
                tol: perception.gmm_tol,
                covariance_floor: (0.25 * map.cell_size).powi(2),
                density_weighted: perception.density_weighted,
            };
            let fit = fit_gmm(&points.points, Some(&points.intensities), &cfg)?;
            let mut polys = Vec::with_capacity(fit.components.len());
            for (ell, comp) in fit.components.iter().enumerate() {
                let ellipse = confidence_ellipse(comp, perception.quantile)?;
                polys.push(
                    ellipse_polytope(&ellipse, perception.facets, margin, mode)?.tagged(slot, ell),
                );
            }
            Ok(polys)
        })
        .collect();
    let mut out = Vec::new();
    for slot in per_slot {
        out.extend(slot?);
    }
    Ok(out)
}

/// Run the perception → learning → forecast → control loop on a
/// generated scenario. Deterministic for a fixed configuration.
pub fn run_closed_loop(
    scenario: &ScenarioConfig,
    learn: &LearnSettings,
    mpc_config: &MpcConfig,
    perception: &PerceptionSettings,
    nav: &NavigationSettings,
) -> Result<ClosedLoopLog> {
    mpc_config.validate()?;
    let map = scenario.map.clone();
    let mut field = ObstacleField::new(scenario);

    // Training window: obstacles move while the first pairs+1 frames are
    // recorded; navigation picks up from the last of them.
    let window = learn.pairs + 1;
    let mut frames: VecDeque<DensitySnapshot> = VecDeque::with_capacity(window);
    let mut timestamp = 0usize;
    frames.push_back(field.render(&map, timestamp));
    for _ in 1..window {
        field.advance(scenario.dt);
        timestamp += 1;
        frames.push_back(field.render(&map, timestamp));
    }
    let data = assemble_pairs(frames.make_contiguous())?;
    let outcome = learn_operator(&data, learn, None)?;
    let mut operator = outcome.operator;
    let mut agent_blocks: Vec<nalgebra::DMatrix<f64>> =
        outcome.agents.iter().map(|a| a.operator_block().clone()).collect();
    let learn_report = outcome.report;

    let mut controller = MpcController::new(mpc_config.clone())?;
    let mut robot = UnicycleState::new(nav.start.x, nav.start.y, nav.theta0, nav.v0);

    let mut steps = Vec::new();
    let mut dumps = Vec::new();
    let mut goal_reached_at = None;

    for step_idx in 0..nav.max_steps {
        let current = frames.back().expect("window is never empty").clone();

        let forecasts = if nav.forecasting && mpc_config.horizon > 1 {
            forecast_maps(&operator, &current, mpc_config.horizon)?
        } else {
            ForecastSequence { origin_timestamp: current.timestamp(), predictions: Vec::new() }
        };
        let polytopes = build_polytopes(
            &current,
            &forecasts.predictions,
            mpc_config.horizon,
            &map,
            perception,
            mpc_config.margin,
            scenario.seed,
        )?;

        if nav.dump_interval > 0 && step_idx % nav.dump_interval == 0 {
            dumps.push(OverlayDump {
                decision_timestamp: current.timestamp(),
                forecast: forecasts.clone(),
                polytopes: polytopes.clone(),
            });
        }

        let (u, solution) = controller.step(&robot.linear_state(), &polytopes)?;
        let recovered = recover_inputs(u[0], u[1], robot.theta, robot.v);
        let (ax_back, ay_back) =
            forward_inputs(recovered.omega, recovered.accel, robot.theta, recovered.v_used);
        let roundtrip_error = ((ax_back - u[0]).powi(2) + (ay_back - u[1]).powi(2)).sqrt();

        robot = unicycle_step(&robot, recovered.omega, recovered.accel, scenario.dt)?;
        field.advance(scenario.dt);
        timestamp += 1;
        let next_frame = field.render(&map, timestamp);
        if frames.len() == window {
            frames.pop_front();
        }
        frames.push_back(next_frame);

        let distances: Vec<f64> =
            field.centers().iter().map(|c| (robot.position() - c).norm()).collect();
        steps.push(StepRecord {
            time: (step_idx + 1) as f64 * scenario.dt,
            state: robot,
            ax: u[0],
            ay: u[1],
            omega: recovered.omega,
            accel: recovered.accel,
            objective: solution.objective,
            max_slack: solution.max_slack,
            solver_iterations: solution.solver_iterations,
            status: solution.status,
            h0_violation: solution.h0_violation,
            recover_clamped: recovered.clamped,
            roundtrip_error,
            obstacle_distances: distances,
        });

        if nav.refresh_interval > 0
            && (step_idx + 1) % nav.refresh_interval == 0
            && frames.len() == window
        {
            let refreshed_data = assemble_pairs(frames.make_contiguous())?;
            let refresh_settings =
                LearnSettings { max_rounds: nav.refresh_rounds.max(1), ..learn.clone() };
            let refreshed =
                learn_operator(&refreshed_data, &refresh_settings, Some(&agent_blocks))?;
            operator = refreshed.operator;
            agent_blocks =
                refreshed.agents.iter().map(|a| a.operator_block().clone()).collect();
        }

        let goal_distance = (robot.position() - mpc_config.goal).norm();
        if goal_distance <= nav.goal_tolerance && goal_reached_at.is_none() {
            goal_reached_at = Some((step_idx + 1) as f64 * scenario.dt);
            if nav.stop_at_goal {
                break;
            }
        }
    }

    Ok(ClosedLoopLog { steps, goal_reached_at, learn_report, dumps })
}

/// Summary metrics over one closed-loop log.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub min_obstacle_distance: f64,
    pub mean_obstacle_distance: f64,
    /// None when the goal was not reached within the step budget.
    pub time_to_goal: Option<f64>,
    /// Sum of squared auxiliary accelerations.
    pub input_energy: f64,
    pub soft_constraint_steps: usize,
}

pub fn metrics(log: &ClosedLoopLog) -> Result<RunMetrics> {
    if log.steps.is_empty() {
        return Err(Error::invalid_input("log is empty"));
    }
    let mut min_d = f64::INFINITY;
    let mut sum_d = 0.0;
    let mut count_d = 0usize;
    let mut energy = 0.0;
    let mut soft = 0;
    for step in &log.steps {
        for &d in &step.obstacle_distances {
            min_d = min_d.min(d);
            sum_d += d;
            count_d += 1;
        }
        energy += step.ax * step.ax + step.ay * step.ay;
        if step.status == MpcStatus::SoftFeasible {
            soft += 1;
        }
    }
    Ok(RunMetrics {
        min_obstacle_distance: min_d,
        mean_obstacle_distance: if count_d > 0 { sum_d / count_d as f64 } else { f64::INFINITY },
        time_to_goal: log.goal_reached_at,
        input_energy: energy,
        soft_constraint_steps: soft,
    })
}
