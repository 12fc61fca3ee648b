//! Riemannian distance and discrete geodesics under a state-dependent metric.
//!
//! A path from `x` to `x*` is discretized into `N` segments with nodes
//! `x~_1 .. x~_{N+1}`, displacement vectors `dx~_{s_i} = (x~_{i+1} - x~_i)/ds_i`
//! and weights `ds_i` summing to one. The geodesic solver minimizes the
//! discrete energy `sum_i dx~_{s_i}^T M(x~_i) dx~_{s_i} ds_i` over the interior
//! nodes with both endpoints pinned, by gradient descent with a backtracking
//! line search from the straight-line initialization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A state-dependent symmetric metric `x -> M(x)`.
pub trait Metric: Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64]) -> DMatrix<f64>;

    /// Gradient of the quadratic form `v^T M(x) v` with respect to `x`.
    ///
    /// The default central-difference fallback suits metrics without an
    /// analytic derivative; the learned metric overrides this with its
    /// reverse-mode input gradient.
    fn quad_form_grad(&self, x: &[f64], v: &DVector<f64>) -> DVector<f64> {
        let h = 1e-6;
        let mut grad = DVector::zeros(x.len());
        let mut probe = x.to_vec();
        for j in 0..x.len() {
            let x0 = x[j];
            probe[j] = x0 + h;
            let plus = crate::linalg::quad_form(&self.eval(&probe), v);
            probe[j] = x0 - h;
            let minus = crate::linalg::quad_form(&self.eval(&probe), v);
            probe[j] = x0;
            grad[j] = (plus - minus) / (2.0 * h);
        }
        grad
    }
}

/// A constant metric; its geodesics are straight lines.
#[derive(Debug, Clone)]
pub struct ConstantMetric(pub DMatrix<f64>);

impl Metric for ConstantMetric {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn eval(&self, _x: &[f64]) -> DMatrix<f64> {
        self.0.clone()
    }

    fn quad_form_grad(&self, x: &[f64], _v: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(x.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeodesicConfig {
    /// Number of discretization segments N.
    pub segments: usize,
    pub max_iterations: usize,
    /// Stop when the relative energy improvement per iteration drops below this.
    pub tol_rel_improvement: f64,
}

impl Default for GeodesicConfig {
    fn default() -> Self {
        Self {
            segments: 10,
            max_iterations: 200,
            tol_rel_improvement: 1e-8,
        }
    }
}

/// Discrete geodesic between two states.
#[derive(Debug, Clone)]
pub struct GeodesicPath {
    /// Nodes x~_1 .. x~_{N+1}; first equals the start point, last the end point.
    pub nodes: Vec<DVector<f64>>,
    /// Displacements dx~_{s_i} = (x~_{i+1} - x~_i) / ds_i.
    pub displacements: Vec<DVector<f64>>,
    /// Weights ds_i > 0 with sum 1.
    pub weights: Vec<f64>,
    /// Minimized discrete energy.
    pub energy: f64,
    /// Riemannian length along the path (the distance estimate).
    pub length: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Segments whose quadratic form came out negative (non-PD metric) and
    /// was clamped at zero while measuring length.
    pub clamped_segments: usize,
}

impl GeodesicPath {
    pub fn segments(&self) -> usize {
        self.weights.len()
    }

    /// Straight uniform path from `x` to `x_star`; also the solver fallback.
    pub fn straight_line(metric: &dyn Metric, x: &[f64], x_star: &[f64], segments: usize) -> Self {
        let n_seg = segments.max(1);
        let from = DVector::from_column_slice(x);
        let to = DVector::from_column_slice(x_star);
        let mut nodes: Vec<DVector<f64>> = (0..=n_seg)
            .map(|i| &from + (&to - &from) * (i as f64 / n_seg as f64))
            .collect();
        // Pin the endpoints bitwise; interpolation dust must not leak into them.
        nodes[0] = from;
        nodes[n_seg] = to;
        let weights = vec![1.0 / n_seg as f64; n_seg];
        let mut path = GeodesicPath {
            nodes,
            displacements: Vec::new(),
            weights,
            energy: 0.0,
            length: 0.0,
            converged: true,
            iterations: 0,
            clamped_segments: 0,
        };
        path.refresh(metric);
        path
    }

    /// Recompute displacements, energy and length from the nodes.
    fn refresh(&mut self, metric: &dyn Metric) {
        let n_seg = self.segments();
        self.displacements = (0..n_seg)
            .map(|i| (&self.nodes[i + 1] - &self.nodes[i]) / self.weights[i])
            .collect();
        let (energy, length, clamped) = path_measures(metric, &self.nodes, &self.weights);
        self.energy = energy;
        self.length = length;
        self.clamped_segments = clamped;
    }
}

/// Energy, length and clamp count of a node sequence, metric at left nodes.
fn path_measures(metric: &dyn Metric, nodes: &[DVector<f64>], weights: &[f64]) -> (f64, f64, usize) {
    let mut energy = 0.0;
    let mut length = 0.0;
    let mut clamped = 0;
    for i in 0..weights.len() {
        let d = &nodes[i + 1] - &nodes[i];
        let m = metric.eval(nodes[i].as_slice());
        let q = crate::linalg::quad_form(&m, &d) / weights[i];
        if q < 0.0 {
            clamped += 1;
        }
        energy += q.max(0.0);
        length += (q.max(0.0) * weights[i]).sqrt();
    }
    (energy, length, clamped)
}

/// Riemannian length of a path under a metric:
/// `sum_i sqrt(dx~_{s_i}^T M(x~_i) dx~_{s_i}) ds_i`, quadratic forms clamped
/// at zero under round-off.
pub fn riemannian_length(path: &GeodesicPath, metric: &dyn Metric) -> f64 {
    let (_, length, _) = path_measures(metric, &path.nodes, &path.weights);
    length
}

/// Minimize the discrete path energy between `x` and `x_star`.
///
/// Endpoints stay pinned; interior nodes move by gradient descent with a
/// backtracking line search. The result never exceeds the straight-line
/// energy. Non-convergence within the iteration budget returns the best
/// iterate with `converged = false` rather than an error.
pub fn compute_geodesic(
    metric: &dyn Metric,
    x: &[f64],
    x_star: &[f64],
    cfg: &GeodesicConfig,
) -> Result<GeodesicPath> {
    let n = metric.dim();
    if x.len() != n || x_star.len() != n {
        return Err(Error::DimensionMismatch {
            context: "geodesic endpoints",
            expected: n,
            got: if x.len() != n { x.len() } else { x_star.len() },
        });
    }
    if cfg.segments < 2 {
        return Err(Error::Config("geodesic needs at least 2 segments".into()));
    }
    if x.iter().chain(x_star).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "geodesic endpoints",
        });
    }

    let mut path = GeodesicPath::straight_line(metric, x, x_star, cfg.segments);
    // Degenerate case: coincident endpoints, nothing to optimize.
    if x == x_star {
        return Ok(path);
    }

    let n_seg = cfg.segments;
    let ds = 1.0 / n_seg as f64;
    let mut energy = path.energy;
    let mut converged = false;
    let mut iterations = 0;

    let eval_energy = |nodes: &[DVector<f64>]| -> f64 {
        let mut e = 0.0;
        for i in 0..n_seg {
            let d = &nodes[i + 1] - &nodes[i];
            let m = metric.eval(nodes[i].as_slice());
            e += (crate::linalg::quad_form(&m, &d) / ds).max(0.0);
        }
        e
    };

    let mut step_scale = 1.0;
    for iter in 0..cfg.max_iterations {
        iterations = iter + 1;
        // Gradient of the energy w.r.t. each interior node.
        let metrics: Vec<DMatrix<f64>> = path
            .nodes
            .iter()
            .take(n_seg)
            .map(|node| metric.eval(node.as_slice()))
            .collect();
        let mut grads: Vec<DVector<f64>> = Vec::with_capacity(n_seg - 1);
        let mut grad_norm_sq = 0.0;
        for j in 1..n_seg {
            let d_prev = &path.nodes[j] - &path.nodes[j - 1];
            let d_next = &path.nodes[j + 1] - &path.nodes[j];
            let mut g = (&metrics[j - 1] * &d_prev) * (2.0 / ds) - (&metrics[j] * &d_next) * (2.0 / ds);
            g += metric.quad_form_grad(path.nodes[j].as_slice(), &d_next) / ds;
            grad_norm_sq += g.norm_squared();
            grads.push(g);
        }
        if grad_norm_sq.sqrt() < 1e-14 * (1.0 + energy) {
            converged = true;
            break;
        }

        // Backtracking line search along the negative gradient.
        let mut alpha = step_scale;
        let mut improved = false;
        for _ in 0..40 {
            let mut candidate = path.nodes.clone();
            for (j, g) in grads.iter().enumerate() {
                candidate[j + 1] -= g * alpha;
            }
            let e_new = eval_energy(&candidate);
            if e_new <= energy - 1e-4 * alpha * grad_norm_sq {
                let rel = (energy - e_new) / energy.max(f64::MIN_POSITIVE);
                path.nodes = candidate;
                energy = e_new;
                improved = true;
                // Allow the step to grow back after successful iterations.
                step_scale = (alpha * 2.0).min(1.0);
                if rel < cfg.tol_rel_improvement {
                    converged = true;
                }
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            // No descent direction at line-search resolution: treat as converged.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    path.refresh(metric);
    path.converged = converged;
    path.iterations = iterations;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn euclidean_length_of_straight_path() {
        let metric = ConstantMetric(DMatrix::identity(2, 2));
        for n in [2, 5, 16] {
            let cfg = GeodesicConfig {
                segments: n,
                ..Default::default()
            };
            let path = compute_geodesic(&metric, &[0.0, 0.0], &[3.0, 4.0], &cfg).unwrap();
            assert_relative_eq!(path.length, 5.0, epsilon = 1e-9);
            assert_relative_eq!(path.energy, 25.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn coincident_endpoints_give_zero_path() {
        let metric = ConstantMetric(DMatrix::identity(2, 2));
        let cfg = GeodesicConfig::default();
        let path = compute_geodesic(&metric, &[0.4, -0.2], &[0.4, -0.2], &cfg).unwrap();
        assert_eq!(path.length, 0.0);
        assert_eq!(path.energy, 0.0);
        assert!(path.displacements.iter().all(|d| d.norm() == 0.0));
    }

    #[test]
    fn anisotropic_constant_metric_closed_form() {
        let metric = ConstantMetric(DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]));
        let cfg = GeodesicConfig::default();
        let path = compute_geodesic(&metric, &[0.0, 0.0], &[1.0, 0.0], &cfg).unwrap();
        assert_relative_eq!(path.length, 2.0, epsilon = 1e-9);
        assert_relative_eq!(path.energy, 4.0, epsilon = 1e-9);
    }

    #[test]
    fn constant_metric_keeps_interior_nodes_colinear() {
        let metric = ConstantMetric(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]));
        let cfg = GeodesicConfig::default();
        let a = [0.2, -0.5];
        let b = [1.0, 0.75];
        let path = compute_geodesic(&metric, &a, &b, &cfg).unwrap();
        let dir = DVector::from_column_slice(&[b[0] - a[0], b[1] - a[1]]);
        for node in &path.nodes {
            let rel = node - DVector::from_column_slice(&a);
            // Cross product magnitude measures deviation from the line.
            let cross = rel[0] * dir[1] - rel[1] * dir[0];
            assert!(cross.abs() < 1e-6, "node off the straight line by {cross}");
        }
        let straight = GeodesicPath::straight_line(&metric, &a, &b, cfg.segments);
        assert!(path.energy <= straight.energy + 1e-12);
    }

    #[test]
    fn node_recursion_and_weights_invariants() {
        struct Bump;
        impl Metric for Bump {
            fn dim(&self) -> usize {
                2
            }
            fn eval(&self, x: &[f64]) -> DMatrix<f64> {
                let s = 1.0 + x[0] * x[0] + 0.5 * x[1] * x[1];
                DMatrix::from_row_slice(2, 2, &[s, 0.0, 0.0, 1.0 / s])
            }
        }
        let cfg = GeodesicConfig::default();
        let path = compute_geodesic(&Bump, &[-0.8, 0.1], &[0.9, -0.4], &cfg).unwrap();
        assert_relative_eq!(path.weights.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(path.weights.iter().all(|&w| w > 0.0));
        for i in 0..path.segments() {
            let rebuilt = &path.nodes[i] + &path.displacements[i] * path.weights[i];
            assert_relative_eq!(rebuilt, path.nodes[i + 1], epsilon = 1e-12);
        }
        assert_eq!(path.nodes[0].as_slice(), &[-0.8, 0.1]);
        assert_eq!(path.nodes[path.segments()].as_slice(), &[0.9, -0.4]);
        // Optimization must not exceed the straight-line energy.
        let straight = GeodesicPath::straight_line(&Bump, &[-0.8, 0.1], &[0.9, -0.4], cfg.segments);
        assert!(path.energy <= straight.energy + 1e-12);
    }

    #[test]
    fn length_squared_bounded_by_energy() {
        // Cauchy-Schwarz over the discrete sum with sum(ds) = 1.
        struct Wavy;
        impl Metric for Wavy {
            fn dim(&self) -> usize {
                2
            }
            fn eval(&self, x: &[f64]) -> DMatrix<f64> {
                let s = 2.0 + (3.0 * x[0]).sin();
                DMatrix::from_row_slice(2, 2, &[s, 0.1, 0.1, 1.0])
            }
        }
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        let cfg = GeodesicConfig::default();
        for _ in 0..20 {
            let a = [rng.random::<f64>(), rng.random::<f64>()];
            let b = [rng.random::<f64>(), rng.random::<f64>()];
            let path = compute_geodesic(&Wavy, &a, &b, &cfg).unwrap();
            assert!(path.length * path.length <= path.energy + 1e-9);
        }
    }

    #[test]
    fn fd_quad_form_grad_matches_analytic_constant() {
        let metric = ConstantMetric(DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]));
        struct FdOnly(DMatrix<f64>);
        impl Metric for FdOnly {
            fn dim(&self) -> usize {
                2
            }
            fn eval(&self, _x: &[f64]) -> DMatrix<f64> {
                self.0.clone()
            }
        }
        let fd = FdOnly(metric.0.clone());
        let v = DVector::from_column_slice(&[0.3, -0.7]);
        let g = fd.quad_form_grad(&[0.1, 0.2], &v);
        assert!(g.norm() < 1e-8);
    }
}
