//! TOML run configuration. One file carries every section; each command
//! reads the sections it needs. All randomness derives from the single
//! top-level seed through [`crate::seed`] substreams.

use std::path::Path;

use nalgebra::{Matrix2, Point2, Vector2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::GridWorldMap;
use crate::graph::Topology;
use crate::mpc::MpcConfig;
use crate::scenario::{
    BoundaryPolicy, LearnSettings, NavigationSettings, ObstacleBlob, PerceptionSettings,
    ScenarioConfig,
};
use crate::seed::stage_rng;

#[derive(Debug, Clone, Deserialize, Serialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RootConfig {
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    #[serde(default)]
    pub scenario: ScenarioSection,
    #[serde(default)]
    pub learning: LearningSection,
    #[serde(default)]
    pub mpc: MpcSection,
    #[serde(default)]
    pub perception: PerceptionSection,
    #[serde(default)]
    pub navigation: NavigationSection,
}

mod defaults {
    pub fn seed() -> u64 {
        42
    }
    pub fn rows() -> usize {
        30
    }
    pub fn frames() -> usize {
        11
    }
    pub fn dt() -> f64 {
        0.1
    }
    pub fn cell_size() -> f64 {
        0.5
    }
    pub fn boundary() -> String {
        "bounce".into()
    }
    pub fn topology() -> String {
        "ring".into()
    }
    pub fn agents() -> usize {
        3
    }
    pub fn pairs() -> usize {
        10
    }
    pub fn alpha_fraction() -> f64 {
        0.5
    }
    pub fn target_tol() -> f64 {
        1e-8
    }
    pub fn max_rounds() -> usize {
        20_000
    }
    pub fn horizon() -> usize {
        14
    }
    pub fn weight_q() -> [f64; 2] {
        [1.0, 1.0]
    }
    pub fn weight_r() -> [f64; 2] {
        [0.1, 0.1]
    }
    pub fn goal() -> [f64; 2] {
        [15.0, 15.0]
    }
    pub fn margin() -> f64 {
        0.5
    }
    pub fn robot_radius() -> f64 {
        0.3
    }
    pub fn solver_tol() -> f64 {
        1e-9
    }
    pub fn solver_max_iter() -> usize {
        500
    }
    pub fn slack_weight_factor() -> f64 {
        1e6
    }
    pub fn threshold() -> f64 {
        0.3
    }
    pub fn components() -> usize {
        12
    }
    pub fn facets() -> usize {
        8
    }
    pub fn quantile() -> f64 {
        0.95
    }
    pub fn gmm_max_iter() -> usize {
        60
    }
    pub fn gmm_tol() -> f64 {
        1e-6
    }
    pub fn max_steps() -> usize {
        400
    }
    pub fn goal_tolerance() -> f64 {
        0.1
    }
    pub fn yes() -> bool {
        true
    }
    pub fn v0() -> f64 {
        crate::vehicle::V_MIN
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    #[serde(default = "defaults::rows")]
    pub rows: usize,
    #[serde(default = "defaults::rows")]
    pub cols: usize,
    #[serde(default = "defaults::frames")]
    pub frames: usize,
    #[serde(default = "defaults::dt")]
    pub dt: f64,
    #[serde(default = "defaults::cell_size")]
    pub cell_size: f64,
    #[serde(default)]
    pub origin: [f64; 2],
    #[serde(default = "defaults::boundary")]
    pub boundary: String,
    #[serde(default)]
    pub obstacles: Vec<ObstacleSection>,
    #[serde(default)]
    pub random_obstacles: Option<RandomObstacles>,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            rows: defaults::rows(),
            cols: defaults::rows(),
            frames: defaults::frames(),
            dt: defaults::dt(),
            cell_size: defaults::cell_size(),
            origin: [0.0, 0.0],
            boundary: defaults::boundary(),
            obstacles: Vec::new(),
            random_obstacles: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleSection {
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    pub sigma: f64,
    pub peak: f64,
}

/// Blobs sampled from the run seed instead of listed explicitly.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RandomObstacles {
    pub count: usize,
    pub speed_range: [f64; 2],
    pub sigma_range: [f64; 2],
    pub peak_range: [f64; 2],
    /// Keep sampled centers at least this many meters inside the world
    /// border.
    #[serde(default)]
    pub border_margin: f64,
    /// Keep sampled centers at least this far from a point (e.g. the
    /// robot start), when given.
    #[serde(default)]
    pub clear_point: Option<[f64; 2]>,
    #[serde(default)]
    pub clear_radius: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LearningSection {
    #[serde(default = "defaults::topology")]
    pub topology: String,
    #[serde(default = "defaults::agents")]
    pub agents: usize,
    /// 1-based `[i, j]` pairs, only for `topology = "custom"`.
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    #[serde(default = "defaults::pairs")]
    pub pairs: usize,
    #[serde(default = "defaults::alpha_fraction")]
    pub alpha_fraction: f64,
    #[serde(default = "defaults::target_tol")]
    pub target_tol: f64,
    #[serde(default = "defaults::max_rounds")]
    pub max_rounds: usize,
    #[serde(default)]
    pub ridge: f64,
    #[serde(default)]
    pub partition_sizes: Vec<usize>,
}

impl Default for LearningSection {
    fn default() -> Self {
        LearningSection {
            topology: defaults::topology(),
            agents: defaults::agents(),
            edges: Vec::new(),
            pairs: defaults::pairs(),
            alpha_fraction: defaults::alpha_fraction(),
            target_tol: defaults::target_tol(),
            max_rounds: defaults::max_rounds(),
            ridge: 0.0,
            partition_sizes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSection {
    #[serde(default = "defaults::horizon")]
    pub horizon: usize,
    /// Diagonal of Q.
    #[serde(default = "defaults::weight_q")]
    pub q: [f64; 2],
    /// Diagonal of R.
    #[serde(default = "defaults::weight_r")]
    pub r: [f64; 2],
    #[serde(default = "defaults::goal")]
    pub goal: [f64; 2],
    #[serde(default = "defaults::margin")]
    pub margin: f64,
    #[serde(default = "defaults::robot_radius")]
    pub robot_radius: f64,
    /// Symmetric input box bound; omit for unbounded inputs.
    #[serde(default)]
    pub input_bound: Option<f64>,
    #[serde(default = "defaults::solver_tol")]
    pub solver_tol: f64,
    #[serde(default = "defaults::solver_max_iter")]
    pub solver_max_iter: usize,
    #[serde(default = "defaults::slack_weight_factor")]
    pub slack_weight_factor: f64,
    /// Controller sampling interval; defaults to the scenario dt.
    #[serde(default)]
    pub tau: Option<f64>,
}

impl Default for MpcSection {
    fn default() -> Self {
        MpcSection {
            horizon: defaults::horizon(),
            q: defaults::weight_q(),
            r: defaults::weight_r(),
            goal: defaults::goal(),
            margin: defaults::margin(),
            robot_radius: defaults::robot_radius(),
            input_bound: None,
            solver_tol: defaults::solver_tol(),
            solver_max_iter: defaults::solver_max_iter(),
            slack_weight_factor: defaults::slack_weight_factor(),
            tau: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PerceptionSection {
    #[serde(default = "defaults::threshold")]
    pub threshold: f64,
    #[serde(default = "defaults::components")]
    pub components: usize,
    #[serde(default = "defaults::facets")]
    pub facets: usize,
    #[serde(default = "defaults::quantile")]
    pub quantile: f64,
    #[serde(default = "defaults::gmm_max_iter")]
    pub gmm_max_iter: usize,
    #[serde(default = "defaults::gmm_tol")]
    pub gmm_tol: f64,
    #[serde(default)]
    pub tangent_normals: bool,
    #[serde(default)]
    pub density_weighted: bool,
}

impl Default for PerceptionSection {
    fn default() -> Self {
        PerceptionSection {
            threshold: defaults::threshold(),
            components: defaults::components(),
            facets: defaults::facets(),
            quantile: defaults::quantile(),
            gmm_max_iter: defaults::gmm_max_iter(),
            gmm_tol: defaults::gmm_tol(),
            tangent_normals: false,
            density_weighted: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct NavigationSection {
    #[serde(default = "defaults::max_steps")]
    pub max_steps: usize,
    #[serde(default = "defaults::goal_tolerance")]
    pub goal_tolerance: f64,
    #[serde(default = "defaults::yes")]
    pub stop_at_goal: bool,
    #[serde(default = "defaults::yes")]
    pub forecasting: bool,
    #[serde(default)]
    pub start: [f64; 2],
    /// Initial heading in radians; defaults to aiming at the goal.
    #[serde(default)]
    pub theta0: Option<f64>,
    #[serde(default = "defaults::v0")]
    pub v0: f64,
    /// Re-learn from the latest window every this many steps (0 = off).
    #[serde(default)]
    pub refresh_interval: usize,
    #[serde(default)]
    pub refresh_rounds: usize,
    /// Dump forecast/polytope overlays every this many steps (0 = off).
    #[serde(default)]
    pub dump_interval: usize,
}

impl Default for NavigationSection {
    fn default() -> Self {
        NavigationSection {
            max_steps: defaults::max_steps(),
            goal_tolerance: defaults::goal_tolerance(),
            stop_at_goal: true,
            forecasting: true,
            start: [0.0, 0.0],
            theta0: None,
            v0: defaults::v0(),
            refresh_interval: 0,
            refresh_rounds: 0,
            dump_interval: 0,
        }
    }
}

impl RootConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!(
            "{}: {e}",
            path.display()
        )))
    }

    /// The scenario with blobs resolved (sampling random ones from the
    /// effective seed).
    pub fn resolve_scenario(&self, seed: u64) -> Result<ScenarioConfig> {
        let s = &self.scenario;
        let map = GridWorldMap::new(s.origin[0], s.origin[1], s.cell_size, s.rows, s.cols)?;
        let boundary = match s.boundary.as_str() {
            "bounce" => BoundaryPolicy::Bounce,
            "wrap" => BoundaryPolicy::Wrap,
            other => {
                return Err(Error::Config(format!(
                    "unknown boundary policy '{other}' (expected bounce|wrap)"
                )))
            }
        };
        let mut blobs: Vec<ObstacleBlob> = s
            .obstacles
            .iter()
            .map(|o| ObstacleBlob {
                center: Point2::new(o.center[0], o.center[1]),
                velocity: Vector2::new(o.velocity[0], o.velocity[1]),
                sigma: o.sigma,
                peak: o.peak,
            })
            .collect();
        if let Some(random) = &s.random_obstacles {
            blobs.extend(sample_blobs(random, &map, seed)?);
        }
        ScenarioConfig::new(map, blobs, s.frames, seed, s.dt, boundary)
    }

    pub fn resolve_learning(&self) -> Result<LearnSettings> {
        let l = &self.learning;
        let topology = match l.topology.as_str() {
            "ring" => Topology::Ring,
            "path" => Topology::Path,
            "complete" => Topology::Complete,
            "custom" => {
                Topology::Custom(l.edges.iter().map(|e| (e[0], e[1])).collect())
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown topology '{other}' (expected ring|path|complete|custom)"
                )))
            }
        };
        if l.alpha_fraction <= 0.0 {
            return Err(Error::Config("alpha_fraction must be positive".into()));
        }
        if !(l.target_tol > 0.0 && l.target_tol < 1.0) {
            return Err(Error::Config("target_tol must lie in (0, 1)".into()));
        }
        Ok(LearnSettings {
            topology,
            agents: l.agents,
            pairs: l.pairs,
            alpha_fraction: l.alpha_fraction,
            target_tol: l.target_tol,
            max_rounds: l.max_rounds,
            ridge: l.ridge,
            partition_sizes: if l.partition_sizes.is_empty() {
                None
            } else {
                Some(l.partition_sizes.clone())
            },
        })
    }

    pub fn resolve_mpc(&self) -> Result<MpcConfig> {
        let m = &self.mpc;
        let cfg = MpcConfig {
            horizon: m.horizon,
            q: Matrix2::from_diagonal(&Vector2::new(m.q[0], m.q[1])),
            r: Matrix2::from_diagonal(&Vector2::new(m.r[0], m.r[1])),
            goal: Point2::new(m.goal[0], m.goal[1]),
            margin: m.margin,
            robot_radius: m.robot_radius,
            input_bound: m.input_bound,
            solver_tol: m.solver_tol,
            solver_max_iter: m.solver_max_iter,
            slack_weight_factor: m.slack_weight_factor,
            tau: m.tau.unwrap_or(self.scenario.dt),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_perception(&self) -> Result<PerceptionSettings> {
        let p = &self.perception;
        if !(0.0..1.0).contains(&p.threshold) {
            return Err(Error::Config("perception threshold must lie in [0, 1)".into()));
        }
        if p.quantile <= 0.0 || p.quantile >= 1.0 {
            return Err(Error::Config("quantile must lie in (0, 1)".into()));
        }
        if p.components == 0 || p.facets < 3 {
            return Err(Error::Config("need at least 1 component and 3 facets".into()));
        }
        Ok(PerceptionSettings {
            threshold: p.threshold,
            components: p.components,
            facets: p.facets,
            quantile: p.quantile,
            gmm_max_iter: p.gmm_max_iter,
            gmm_tol: p.gmm_tol,
            tangent_normals: p.tangent_normals,
            density_weighted: p.density_weighted,
        })
    }

    pub fn resolve_navigation(&self) -> Result<NavigationSettings> {
        let n = &self.navigation;
        if n.goal_tolerance <= 0.0 {
            return Err(Error::Config("goal tolerance must be positive".into()));
        }
        let goal = self.mpc.goal;
        let start = Point2::new(n.start[0], n.start[1]);
        let theta0 = n
            .theta0
            .unwrap_or_else(|| (goal[1] - start.y).atan2(goal[0] - start.x));
        Ok(NavigationSettings {
            max_steps: n.max_steps,
            goal_tolerance: n.goal_tolerance,
            stop_at_goal: n.stop_at_goal,
            forecasting: n.forecasting,
            start,
            theta0,
            v0: n.v0,
            refresh_interval: n.refresh_interval,
            refresh_rounds: n.refresh_rounds,
            dump_interval: n.dump_interval,
        })
    }
}

fn sample_blobs(
    spec: &RandomObstacles,
    map: &GridWorldMap,
    seed: u64,
) -> Result<Vec<ObstacleBlob>> {
    if spec.count == 0 {
        return Err(Error::Config("random_obstacles.count must be positive".into()));
    }
    for (name, range) in [
        ("speed_range", &spec.speed_range),
        ("sigma_range", &spec.sigma_range),
        ("peak_range", &spec.peak_range),
    ] {
        if range[0] > range[1] || range[0] < 0.0 {
            return Err(Error::Config(format!("bad {name}: {range:?}")));
        }
    }
    let mut rng = stage_rng(seed, "scenario/obstacles");
    let m = spec.border_margin;
    let (x0, y0) = (map.origin_x + m, map.origin_y + m);
    let (x1, y1) = (map.origin_x + map.width() - m, map.origin_y + map.height() - m);
    if x1 <= x0 || y1 <= y0 {
        return Err(Error::Config("border margin leaves no room for obstacles".into()));
    }
    let clear = spec.clear_point.map(|p| Point2::new(p[0], p[1]));
    let mut blobs = Vec::with_capacity(spec.count);
    let mut attempts = 0;
    while blobs.len() < spec.count {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config(
                "could not place random obstacles; loosen clearance settings".into(),
            ));
        }
        let center = Point2::new(rng.random_range(x0..x1), rng.random_range(y0..y1));
        if let Some(c) = clear {
            if (center - c).norm() < spec.clear_radius {
                continue;
            }
        }
        let speed = rng.random_range(spec.speed_range[0]..=spec.speed_range[1]);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        blobs.push(ObstacleBlob {
            center,
            velocity: Vector2::new(speed * angle.cos(), speed * angle.sin()),
            sigma: rng.random_range(spec.sigma_range[0]..=spec.sigma_range[1]),
            peak: rng.random_range(spec.peak_range[0]..=spec.peak_range[1]),
        });
    }
    Ok(blobs)
}
