//! Obstacle geometry: Gaussian mixture fitting of thresholded occupancy
//! points, confidence ellipses at a chi-squared quantile, half-space
//! polytopes circumscribing them, and the most-active-facet selection
//! that feeds single linear constraints to the controller.

use nalgebra::{Matrix2, Point2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One mixture component over world coordinates (meters).
#[derive(Debug, Clone)]
pub struct GaussianComponent {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
    pub weight: f64,
}

/// Settings for [`fit_gmm`]. The covariance floor is applied to the
/// eigenvalues of every component; single-cell clusters would otherwise
/// produce singular covariances.
#[derive(Debug, Clone)]
pub struct GmmConfig {
    pub components: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
    pub covariance_floor: f64,
    pub density_weighted: bool,
}

impl GmmConfig {
    pub fn new(components: usize, seed: u64) -> Self {
        GmmConfig {
            components,
            seed,
            max_iter: 100,
            tol: 1e-6,
            covariance_floor: 0.0625, // (0.25 * 1 m cell)²; callers scale by cell size
            density_weighted: false,
        }
    }

    /// Floor for covariance eigenvalues given the grid cell size:
    /// `(0.25 * cell)²`.
    pub fn floor_for_cell_size(mut self, cell_size: f64) -> Self {
        self.covariance_floor = (0.25 * cell_size).powi(2);
        self
    }
}

/// Result of an EM fit.
#[derive(Debug, Clone)]
pub struct GmmFit {
    /// Sorted by descending weight, ties by lexicographic mean.
    pub components: Vec<GaussianComponent>,
    pub covariance_floored: bool,
    pub iterations: usize,
    pub log_likelihood: f64,
}

struct Gaussian2 {
    mean: Vector2<f64>,
    inv: Matrix2<f64>,
    log_norm: f64,
}

impl Gaussian2 {
    fn new(mean: Vector2<f64>, cov: &Matrix2<f64>) -> Self {
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        let inv = Matrix2::new(cov[(1, 1)], -cov[(0, 1)], -cov[(1, 0)], cov[(0, 0)]) / det;
        let log_norm = -(2.0 * std::f64::consts::PI).ln() - 0.5 * det.ln();
        Gaussian2 { mean, inv, log_norm }
    }

    fn log_pdf(&self, x: &Point2<f64>) -> f64 {
        let d = x.coords - self.mean;
        self.log_norm - 0.5 * (d.transpose() * self.inv * d)[(0, 0)]
    }
}

/// Raise covariance eigenvalues to at least `floor`, preserving the
/// eigenvectors. Returns whether anything was clamped.
fn floor_covariance(cov: &mut Matrix2<f64>, floor: f64) -> bool {
    let eig = nalgebra::SymmetricEigen::new(*cov);
    let mut clamped = false;
    let mut values = eig.eigenvalues;
    for v in values.iter_mut() {
        if *v < floor {
            *v = floor;
            clamped = true;
        }
    }
    if clamped {
        let u = eig.eigenvectors;
        *cov = u * Matrix2::from_diagonal(&values) * u.transpose();
    }
    clamped
}

fn squared_distance(a: &Point2<f64>, b: &Point2<f64>) -> f64 {
    (a - b).norm_squared()
}

/// k-means++ seeding: first center sampled by point mass, each further
/// center by mass times squared distance to the nearest chosen center.
fn kmeans_pp_centers(
    points: &[Point2<f64>],
    weights: &[f64],
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Point2<f64>> {
    let sample = |cumulative_weights: &[f64], rng: &mut ChaCha8Rng| -> usize {
        let total = *cumulative_weights.last().unwrap();
        if total <= 0.0 {
            return rng.random_range(0..cumulative_weights.len());
        }
        let target = rng.random::<f64>() * total;
        cumulative_weights.iter().position(|&c| c > target).unwrap_or(cumulative_weights.len() - 1)
    };

    let mut centers = Vec::with_capacity(k);
    let mut cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w;
            Some(*acc)
        })
        .collect();
    centers.push(points[sample(&cumulative, rng)]);

    let mut dist2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let mut acc = 0.0;
        for (i, c) in cumulative.iter_mut().enumerate() {
            acc += weights[i] * dist2[i];
            *c = acc;
        }
        let chosen = points[sample(&cumulative, rng)];
        centers.push(chosen);
        for (i, p) in points.iter().enumerate() {
            dist2[i] = dist2[i].min(squared_distance(p, &chosen));
        }
    }
    centers
}

/// Expectation-maximization fit of a mixture with `cfg.components`
/// Gaussians. Deterministic for fixed `(points, weights, cfg)`, with
/// components canonicalized by descending weight.
pub fn fit_gmm(
    points: &[Point2<f64>],
    weights: Option<&[f64]>,
    cfg: &GmmConfig,
) -> Result<GmmFit> {
    let k = cfg.components;
    if k == 0 {
        return Err(Error::invalid_input("component count must be at least 1"));
    }
    if points.len() < k {
        return Err(Error::invalid_input(format!(
            "{} points cannot support {k} components",
            points.len()
        )));
    }
    if cfg.covariance_floor <= 0.0 {
        return Err(Error::invalid_input("covariance floor must be positive"));
    }
    let uniform = vec![1.0; points.len()];
    let mass: &[f64] = match (cfg.density_weighted, weights) {
        (true, Some(w)) => {
            if w.len() != points.len() {
                return Err(Error::shape("weights and points differ in length"));
            }
            w
        }
        _ => &uniform,
    };
    let total_mass: f64 = mass.iter().sum();
    if total_mass <= 0.0 {
        return Err(Error::invalid_input("point weights sum to zero"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers = kmeans_pp_centers(points, mass, k, &mut rng);

    // Hard assignment to the seeded centers gives the initial parameters.
    let mut means = centers.iter().map(|c| c.coords).collect::<Vec<_>>();
    let mut covs = vec![Matrix2::zeros(); k];
    let mut comp_mass = vec![0.0; k];
    {
        let mut sums = vec![Vector2::zeros(); k];
        let mut assign = vec![0usize; points.len()];
        for (i, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, c) in centers.iter().enumerate() {
                let d = squared_distance(p, c);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assign[i] = best;
            comp_mass[best] += mass[i];
            sums[best] += mass[i] * p.coords;
        }
        for j in 0..k {
            if comp_mass[j] > 0.0 {
                means[j] = sums[j] / comp_mass[j];
            }
        }
        for (i, p) in points.iter().enumerate() {
            let d = p.coords - means[assign[i]];
            covs[assign[i]] += mass[i] * d * d.transpose();
        }
        for j in 0..k {
            if comp_mass[j] > 0.0 {
                covs[j] /= comp_mass[j];
            }
        }
    }

    let mut floored = false;
    for cov in covs.iter_mut() {
        floored |= floor_covariance(cov, cfg.covariance_floor);
    }
    let mut comp_weights: Vec<f64> =
        comp_mass.iter().map(|m| (m / total_mass).max(1e-12)).collect();
    normalize(&mut comp_weights);

    let mut log_likelihood = f64::NEG_INFINITY;
    let mut iterations = 0;
    let mut resp = vec![0.0; points.len() * k];
    for iter in 0..cfg.max_iter {
        iterations = iter + 1;
        // E-step in log space.
        let gaussians: Vec<Gaussian2> =
            means.iter().zip(covs.iter()).map(|(m, c)| Gaussian2::new(*m, c)).collect();
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            let logs: Vec<f64> = gaussians
                .iter()
                .zip(comp_weights.iter())
                .map(|(g, w)| w.ln() + g.log_pdf(p))
                .collect();
            let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            ll += mass[i] * lse;
            for j in 0..k {
                resp[i * k + j] = (logs[j] - lse).exp();
            }
        }

        // M-step.
        for j in 0..k {
            let mut mj = 0.0;
            let mut mean = Vector2::zeros();
            for (i, p) in points.iter().enumerate() {
                let r = mass[i] * resp[i * k + j];
                mj += r;
                mean += r * p.coords;
            }
            if mj > 1e-12 {
                mean /= mj;
                let mut cov = Matrix2::zeros();
                for (i, p) in points.iter().enumerate() {
                    let r = mass[i] * resp[i * k + j];
                    let d = p.coords - mean;
                    cov += r * d * d.transpose();
                }
                cov /= mj;
                floored |= floor_covariance(&mut cov, cfg.covariance_floor);
                means[j] = mean;
                covs[j] = cov;
            }
            comp_weights[j] = (mj / total_mass).max(1e-12);
        }
        normalize(&mut comp_weights);

        if (ll - log_likelihood).abs() < cfg.tol {
            log_likelihood = ll;
            break;
        }
        log_likelihood = ll;
    }

    if floored {
        log::warn!("covariance floor engaged while fitting {k} components");
    }

    let mut components: Vec<GaussianComponent> = (0..k)
        .map(|j| GaussianComponent { mean: means[j], covariance: covs[j], weight: comp_weights[j] })
        .collect();
    components.sort_by(|a, b| {
        b.weight
            .partial_cmp(&a.weight)
            .unwrap()
            .then(a.mean.x.partial_cmp(&b.mean.x).unwrap())
            .then(a.mean.y.partial_cmp(&b.mean.y).unwrap())
    });
    Ok(GmmFit { components, covariance_floored: floored, iterations, log_likelihood })
}

fn normalize(weights: &mut [f64]) {
    let total: f64 = weights.iter().sum();
    for w in weights.iter_mut() {
        *w /= total;
    }
}

/// Level set of a component at a chi-squared quantile, parameterized by
/// its principal axes.
#[derive(Debug, Clone)]
pub struct ConfidenceEllipse {
    pub center: Vector2<f64>,
    /// Columns are the covariance eigenvectors; right-handed, det +1.
    pub rotation: Matrix2<f64>,
    /// `√(δ² λ₁)` with `λ₁` the larger eigenvalue.
    pub semi_major: f64,
    pub semi_minor: f64,
    pub quantile: f64,
    pub delta_sq: f64,
}

/// Closed-form 2-DOF chi-squared quantile: `δ² = −2 ln(1 − q)`.
pub fn chi_squared_quantile_2dof(q: f64) -> f64 {
    -2.0 * (1.0 - q).ln()
}

pub fn confidence_ellipse(component: &GaussianComponent, q: f64) -> Result<ConfidenceEllipse> {
    if q <= 0.0 || q >= 1.0 {
        return Err(Error::invalid_input(format!("quantile {q} outside (0, 1)")));
    }
    let delta_sq = chi_squared_quantile_2dof(q);
    let eig = nalgebra::SymmetricEigen::new(component.covariance);
    // Order eigenpairs by descending eigenvalue.
    let (idx_major, idx_minor) =
        if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let l1 = eig.eigenvalues[idx_major];
    let l2 = eig.eigenvalues[idx_minor];
    if l2 <= 0.0 {
        return Err(Error::Numerical(format!(
            "covariance eigenvalue {l2} not positive; floor the component first"
        )));
    }
    let mut u = Matrix2::from_columns(&[
        eig.eigenvectors.column(idx_major).into_owned(),
        eig.eigenvectors.column(idx_minor).into_owned(),
    ]);
    if u.determinant() < 0.0 {
        u.set_column(1, &(-u.column(1)).into_owned());
    }
    Ok(ConfidenceEllipse {
        center: component.mean,
        rotation: u,
        semi_major: (delta_sq * l1).sqrt(),
        semi_minor: (delta_sq * l2).sqrt(),
        quantile: q,
        delta_sq,
    })
}

impl ConfidenceEllipse {
    /// Point on the boundary at ellipse parameter angle `theta`.
    pub fn boundary_point(&self, theta: f64) -> Vector2<f64> {
        self.center
            + self.rotation
                * Vector2::new(self.semi_major * theta.cos(), self.semi_minor * theta.sin())
    }

    /// Covariance reconstructed from the stored axes, `U D Uᵀ` with
    /// `D = diag(ă², b̆²) / δ²`.
    pub fn reconstructed_covariance(&self) -> Matrix2<f64> {
        let d = Matrix2::from_diagonal(&Vector2::new(
            self.semi_major * self.semi_major / self.delta_sq,
            self.semi_minor * self.semi_minor / self.delta_sq,
        ));
        self.rotation * d * self.rotation.transpose()
    }
}

/// How facet normals are chosen when circumscribing an ellipse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FacetNormals {
    /// The angular directions `[cos ϑ_ι, sin ϑ_ι]` — what the
    /// construction prescribes. For non-circular ellipses these facets
    /// are not tangent planes.
    #[default]
    Radial,
    /// True supporting-hyperplane normals, proportional to
    /// `Σ⁻¹ (s_ι − μ)`.
    Tangent,
}

/// Half-space representation of one predicted obstacle: facet `ι`
/// passes through support point `s_ι` with unit normal `n_ι`, and the
/// admissible exterior of facet `ι` is `n_ι · ξ ≥ ϱ_ι + ε`.
#[derive(Debug, Clone)]
pub struct ObstaclePolytope {
    pub normals: Vec<Vector2<f64>>,
    pub offsets: Vec<f64>,
    pub support_points: Vec<Vector2<f64>>,
    pub margin: f64,
    pub horizon_step: usize,
    pub obstacle_index: usize,
}

impl ObstaclePolytope {
    pub fn facet_count(&self) -> usize {
        self.normals.len()
    }

    pub fn tagged(mut self, horizon_step: usize, obstacle_index: usize) -> Self {
        self.horizon_step = horizon_step;
        self.obstacle_index = obstacle_index;
        self
    }
}

/// Circumscribe a confidence ellipse with `n_facets ≥ 3` half-spaces at
/// equally spaced parameter angles `ϑ_ι = 2π(ι−1)/n_facets`.
pub fn ellipse_polytope(
    ellipse: &ConfidenceEllipse,
    n_facets: usize,
    margin: f64,
    mode: FacetNormals,
) -> Result<ObstaclePolytope> {
    if n_facets < 3 {
        return Err(Error::invalid_input(format!("need at least 3 facets, got {n_facets}")));
    }
    if margin < 0.0 {
        return Err(Error::invalid_input("safety margin must be nonnegative"));
    }
    let mut normals = Vec::with_capacity(n_facets);
    let mut offsets = Vec::with_capacity(n_facets);
    let mut supports = Vec::with_capacity(n_facets);
    let inv_cov = ellipse.reconstructed_covariance().try_inverse();
    for i in 0..n_facets {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / n_facets as f64;
        let support = ellipse.boundary_point(theta);
        let normal = match mode {
            FacetNormals::Radial => Vector2::new(theta.cos(), theta.sin()),
            FacetNormals::Tangent => {
                let inv = inv_cov
                    .as_ref()
                    .ok_or_else(|| Error::Numerical("ellipse covariance not invertible".into()))?;
                (inv * (support - ellipse.center)).normalize()
            }
        };
        offsets.push(normal.dot(&support));
        normals.push(normal);
        supports.push(support);
    }
    Ok(ObstaclePolytope {
        normals,
        offsets,
        support_points: supports,
        margin,
        horizon_step: 0,
        obstacle_index: 0,
    })
}

/// The single facet enforced in the controller.
#[derive(Debug, Clone)]
pub struct ActiveConstraint {
    pub normal: Vector2<f64>,
    pub offset: f64,
    pub margin: f64,
    pub horizon_step: usize,
    pub obstacle_index: usize,
    pub facet_index: usize,
}

impl ActiveConstraint {
    /// Signed activation `n·ξ − ϱ − ε`; nonnegative means satisfied.
    pub fn activation(&self, xi: &Point2<f64>) -> f64 {
        self.normal.dot(&xi.coords) - self.offset - self.margin
    }
}

/// Facet with the largest activation `n_ι·ξ − ϱ_ι − ε` at the reference
/// point; ties resolve to the smallest facet index.
pub fn most_active_facet(polytope: &ObstaclePolytope, xi: &Point2<f64>) -> ActiveConstraint {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, (n, rho)) in polytope.normals.iter().zip(polytope.offsets.iter()).enumerate() {
        let value = n.dot(&xi.coords) - rho - polytope.margin;
        if value > best_value {
            best_value = value;
            best = i;
        }
    }
    ActiveConstraint {
        normal: polytope.normals[best],
        offset: polytope.offsets[best],
        margin: polytope.margin,
        horizon_step: polytope.horizon_step,
        obstacle_index: polytope.obstacle_index,
        facet_index: best,
    }
}
