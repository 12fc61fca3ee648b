//! Finite-data contraction certification over a region.
//!
//! At each grid point of `X x U x R` the eigenvalue function
//! `h(x,u) = max eig(Theta^{-T} A_cl^T M_{k+1} A_cl Theta^{-1} - I)` with
//! `M_k = Theta^T Theta` measures how strongly the closed loop contracts;
//! `h <= -lambda` certifies rate `lambda` at that point. An empirical
//! Lipschitz constant turns the pointwise checks into ball-wise guarantees,
//! and a covered region inherits the minimum rate
//! `lambda_S_min = min_i (lambda - L ||xi_i||)` over the covering balls.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{grid_points, GridSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::model::PlantModel;
use crate::trainer::DccmFunction;

/// Why `h` could not be evaluated at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PointFailure {
    /// The learned metric was not positive definite at the point.
    NonPdMetric,
    /// Plant or network evaluation failed.
    Evaluation(String),
}

/// Contraction margin `h` at one `(r, x, u)` sample.
///
/// Factorizes `M_k = Theta^T Theta` (the pivot check doubles as the PD
/// test), forms `S = Theta^{-T} A_cl^T M_{k+1} A_cl Theta^{-1} - I`,
/// symmetrizes, and returns the largest eigenvalue.
pub fn h_value(
    dccm: &DccmFunction,
    model: &PlantModel,
    r: &[f64],
    x: &[f64],
    u: &[f64],
) -> std::result::Result<f64, PointFailure> {
    let pair = dccm.pair_at(x).map_err(|e| PointFailure::Evaluation(e.to_string()))?;
    let theta = linalg::cholesky_upper(&pair.metric).ok_or(PointFailure::NonPdMetric)?;
    let x1 = model
        .step(r, x, u)
        .map_err(|e| PointFailure::Evaluation(e.to_string()))?;
    let m_k1 = dccm
        .metric_at(x1.as_slice())
        .map_err(|e| PointFailure::Evaluation(e.to_string()))?;
    let (a, b) = model
        .jacobians(r, x, u)
        .map_err(|e| PointFailure::Evaluation(e.to_string()))?;
    let a_cl = a + b * &pair.gain;
    // Y = A_cl Theta^{-1} via a right triangular solve.
    let y = linalg::solve_right_upper_triangular(&a_cl, &theta);
    let mut s = y.transpose() * m_k1 * &y;
    for i in 0..s.nrows() {
        s[(i, i)] -= 1.0;
    }
    linalg::symmetrize(&mut s);
    linalg::max_eigenvalue(&s).map_err(|e| PointFailure::Evaluation(e.to_string()))
}

/// Empirical Lipschitz estimate of a grid-sampled field: the largest
/// `|dh| / ||d(x,u,r)||` over grid-adjacent pairs, inflated by a safety
/// factor. A lower-bound estimate of the true constant, labeled as such in
/// the report.
pub fn estimate_lipschitz(
    shape: &[usize],
    steps: &[f64],
    values: &[Option<f64>],
    safety_factor: f64,
) -> Result<f64> {
    if shape.len() != steps.len() {
        return Err(Error::DimensionMismatch {
            context: "lipschitz grid shape",
            expected: shape.len(),
            got: steps.len(),
        });
    }
    let total: usize = shape.iter().product();
    if values.len() != total || total < 2 {
        return Err(Error::Config(format!(
            "need at least 2 grid samples, got {} of expected {total}",
            values.len()
        )));
    }
    // Strides of a row-major (last axis fastest) layout.
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let mut max_slope = 0.0f64;
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..total {
        if let Some(h0) = values[flat] {
            for d in 0..shape.len() {
                if idx[d] + 1 < shape[d] {
                    if let Some(h1) = values[flat + strides[d]] {
                        let slope = (h1 - h0).abs() / steps[d];
                        max_slope = max_slope.max(slope);
                    }
                }
            }
        }
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(max_slope * safety_factor)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertGridInfo {
    pub grid: GridSpec,
    pub shape: Vec<usize>,
    pub total_points: usize,
    /// Half of the grid-cell diagonal in the stacked (x, u, r) coordinates:
    /// the ball radius needed for the lattice to cover the region.
    pub half_cell_diagonal: f64,
}

/// Everything the certification sweep establishes about a region.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificationReport {
    pub grid: CertGridInfo,
    pub lambda_target: f64,
    pub margin: f64,
    pub safety_factor: f64,
    pub h_values: Vec<Option<f64>>,
    pub h_min: f64,
    pub h_max: f64,
    /// Points where the metric was not positive definite.
    pub non_pd_points: Vec<usize>,
    /// Points with `h > -lambda_target` (certification fails there).
    pub failing_points: Vec<usize>,
    /// Inflated empirical Lipschitz constant of `h` over the grid.
    pub lipschitz: f64,
    pub lipschitz_raw: f64,
    /// Radius within which `h <= -lambda + margin` still certifies
    /// contraction: `(lambda_target - margin) / L`.
    pub admissible_radius: f64,
    /// All points certify and the half-cell diagonal fits inside the
    /// admissible radius, so the balls cover the region.
    pub covered: bool,
    /// Regional minimum contraction rate `lambda - L * ||xi||` with
    /// `||xi||` the half-cell diagonal; meaningful when `covered`.
    pub lambda_s_min: f64,
    /// Metric eigenvalue range over the state grid.
    pub alpha1: f64,
    pub alpha2: f64,
    /// Largest `||g(r,x)||` (spectral norm) over the grid.
    pub g_max: f64,
    pub empirical_note: String,
}

/// Sweep the region and certify a target rate.
pub fn certify_region(
    dccm: &DccmFunction,
    model: &PlantModel,
    grid: &GridSpec,
    lambda_target: f64,
) -> Result<CertificationReport> {
    const MARGIN: f64 = 1e-6;
    const SAFETY: f64 = 1.5;
    if !(lambda_target > 0.0) {
        return Err(Error::Config("lambda target must be > 0".into()));
    }
    grid.validate(model)?;
    let x_lattice = grid_points(&model.state_box, &grid.state_step)?;
    let u_lattice = grid_points(&model.input_box, &grid.input_step)?;
    let r_lattice = grid_points(&model.param_box, &grid.param_step)?;

    // Row-major (x, u, r) with r fastest.
    let shape = vec![x_lattice.len(), u_lattice.len(), r_lattice.len()];
    let total = shape.iter().product::<usize>();
    let indices: Vec<usize> = (0..total).collect();
    let h_values: Vec<std::result::Result<f64, PointFailure>> = indices
        .par_iter()
        .map(|&flat| {
            let xi = flat / (shape[1] * shape[2]);
            let ui = (flat / shape[2]) % shape[1];
            let ri = flat % shape[2];
            h_value(dccm, model, &r_lattice[ri], &x_lattice[xi], &u_lattice[ui])
        })
        .collect();

    let mut values: Vec<Option<f64>> = Vec::with_capacity(total);
    let mut non_pd_points = Vec::new();
    let mut failing_points = Vec::new();
    let mut h_min = f64::INFINITY;
    let mut h_max = f64::NEG_INFINITY;
    for (i, hv) in h_values.into_iter().enumerate() {
        match hv {
            Ok(h) => {
                h_min = h_min.min(h);
                h_max = h_max.max(h);
                if h > -lambda_target {
                    failing_points.push(i);
                }
                values.push(Some(h));
            }
            Err(PointFailure::NonPdMetric) => {
                non_pd_points.push(i);
                failing_points.push(i);
                values.push(None);
            }
            Err(PointFailure::Evaluation(msg)) => {
                return Err(Error::Numeric(format!("h evaluation failed at point {i}: {msg}")));
            }
        }
    }

    // Lipschitz over the stacked (x, u, r) axes. The flat layout above is
    // (x-major, then u, then r) but x and u are themselves multi-dim
    // lattices; expand to the full per-axis shape for adjacency.
    let mut full_shape = Vec::new();
    let mut full_steps = Vec::new();
    let x_axis_sizes = axis_sizes(&model.state_box, &grid.state_step)?;
    let u_axis_sizes = axis_sizes(&model.input_box, &grid.input_step)?;
    let r_axis_sizes = axis_sizes(&model.param_box, &grid.param_step)?;
    full_shape.extend(&x_axis_sizes);
    full_shape.extend(&u_axis_sizes);
    full_shape.extend(&r_axis_sizes);
    full_steps.extend(&grid.state_step);
    full_steps.extend(&grid.input_step);
    full_steps.extend(&grid.param_step);
    let lipschitz_raw = estimate_lipschitz(&full_shape, &full_steps, &values, 1.0)?;
    let lipschitz = lipschitz_raw * SAFETY;

    let half_cell_diagonal = 0.5 * full_steps.iter().map(|s| s * s).sum::<f64>().sqrt();
    let admissible_radius = if lipschitz > 0.0 {
        (lambda_target - MARGIN) / lipschitz
    } else {
        f64::INFINITY
    };
    let covered = failing_points.is_empty() && half_cell_diagonal <= admissible_radius;
    let lambda_s_min = lambda_target - lipschitz * half_cell_diagonal;

    // Metric bounds over the state lattice and the largest input-map norm.
    let mut alpha1 = f64::INFINITY;
    let mut alpha2 = f64::NEG_INFINITY;
    for x in &x_lattice {
        let metric = dccm.metric_at(x)?;
        let eigs = linalg::jacobi_eigenvalues(&metric)?;
        alpha1 = alpha1.min(*eigs.first().expect("nonempty"));
        alpha2 = alpha2.max(*eigs.last().expect("nonempty"));
    }
    let mut g_max = 0.0f64;
    for r in &r_lattice {
        for x in &x_lattice {
            g_max = g_max.max(linalg::spectral_norm(&model.g(r, x))?);
        }
    }

    Ok(CertificationReport {
        grid: CertGridInfo {
            grid: grid.clone(),
            shape: full_shape,
            total_points: total,
            half_cell_diagonal,
        },
        lambda_target,
        margin: MARGIN,
        safety_factor: SAFETY,
        h_values: values,
        h_min,
        h_max,
        non_pd_points,
        failing_points,
        lipschitz,
        lipschitz_raw,
        admissible_radius,
        covered,
        lambda_s_min,
        alpha1,
        alpha2,
        g_max,
        empirical_note: "Lipschitz constant estimated from grid differences (lower bound, \
                         inflated by the safety factor); certification is empirical."
            .into(),
    })
}

fn axis_sizes(bx: &crate::model::IntervalBox, steps: &[f64]) -> Result<Vec<usize>> {
    steps
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            if !(s > 0.0) {
                return Err(Error::Config(format!("grid step must be > 0, got {s}")));
            }
            Ok(((bx.width(i)) / s + 1e-9).floor() as usize + 1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::MlpNetwork;
    use crate::trainer::raw_len;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn constant_pair_net(n: usize, m: usize, metric: &[f64], gain: &[f64]) -> DccmFunction {
        let raw = raw_len(n, m);
        let mut net = MlpNetwork::zeros(&[n, 4, raw]).unwrap();
        let mut p = net.flat_params();
        let bias_start = p.len() - raw;
        for (i, v) in metric.iter().chain(gain.iter()).enumerate() {
            p[bias_start + i] = *v;
        }
        net.set_flat_params(&p).unwrap();
        DccmFunction::new(net, n, m).unwrap()
    }

    #[test]
    fn scalar_h_value() {
        // a_cl = 0.5 with unit metric: h = 0.25 - 1 = -0.75.
        let model = crate::model::scalar_linear(0.5, 0.0001, [-1.0, 1.0], [-1.0, 1.0]).unwrap();
        let dccm = constant_pair_net(1, 1, &[1.0], &[0.0]);
        let h = h_value(&dccm, &model, &[], &[0.3], &[0.0]).unwrap();
        assert_relative_eq!(h, -0.75, epsilon = 1e-9);
    }

    #[test]
    fn isometry_boundary_case() {
        // Closed-loop map with all singular values 1 and identity metrics: h = 0.
        let a0 = nalgebra::DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        let b0 = nalgebra::DMatrix::from_row_slice(2, 1, &[0.0, 0.0001]);
        let model = crate::model::linear(
            a0,
            b0,
            crate::model::IntervalBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
            crate::model::IntervalBox::new(vec![-1.0], vec![1.0]).unwrap(),
        )
        .unwrap();
        let dccm = constant_pair_net(2, 1, &[1.0, 0.0, 1.0], &[0.0, 0.0]);
        let h = h_value(&dccm, &model, &[], &[0.2, -0.3], &[0.0]).unwrap();
        assert_relative_eq!(h, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn h_sign_matches_congruence_condition() {
        // h < 0 iff A_cl^T M1 A_cl - M0 has negative max eigenvalue.
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        for _ in 0..100 {
            let n = 2;
            let rand_mat = |rng: &mut ChaCha20Rng, scale: f64| {
                DMatrix::from_fn(n, n, |_, _| (rng.random::<f64>() * 2.0 - 1.0) * scale)
            };
            let spd = |rng: &mut ChaCha20Rng| {
                let q = rand_mat(rng, 1.0);
                q.transpose() * q + DMatrix::identity(n, n) * 0.3
            };
            let m0 = spd(&mut rng);
            let m1 = spd(&mut rng);
            let a_cl = rand_mat(&mut rng, 1.2);

            let theta = linalg::cholesky_upper(&m0).unwrap();
            let y = linalg::solve_right_upper_triangular(&a_cl, &theta);
            let mut s = y.transpose() * &m1 * &y;
            for i in 0..n {
                s[(i, i)] -= 1.0;
            }
            linalg::symmetrize(&mut s);
            let h = linalg::max_eigenvalue(&s).unwrap();

            let mut diff = a_cl.transpose() * &m1 * &a_cl - &m0;
            linalg::symmetrize(&mut diff);
            let direct = linalg::max_eigenvalue(&diff).unwrap();
            if h.abs() > 1e-9 && direct.abs() > 1e-9 {
                assert_eq!(h < 0.0, direct < 0.0, "congruence sign disagreement");
            }
        }
    }

    #[test]
    fn non_pd_metric_reports_failure() {
        let model = crate::model::scalar_linear(0.5, 0.0001, [-1.0, 1.0], [-1.0, 1.0]).unwrap();
        let dccm = constant_pair_net(1, 1, &[-1.0], &[0.0]);
        assert_eq!(
            h_value(&dccm, &model, &[], &[0.0], &[0.0]),
            Err(PointFailure::NonPdMetric)
        );
    }

    #[test]
    fn lipschitz_of_constant_and_linear_fields() {
        // Constant field: L = 0.
        let values: Vec<Option<f64>> = vec![Some(2.0); 12];
        let l = estimate_lipschitz(&[3, 4], &[0.5, 0.25], &values, 1.0).unwrap();
        assert_eq!(l, 0.0);

        // h linear in the first axis with slope 2.
        let mut vals = Vec::new();
        for i in 0..5 {
            for _j in 0..3 {
                vals.push(Some(2.0 * (i as f64) * 0.1));
            }
        }
        let l = estimate_lipschitz(&[5, 3], &[0.1, 0.1], &vals, 1.0).unwrap();
        assert_relative_eq!(l, 2.0, epsilon = 1e-9);

        assert!(estimate_lipschitz(&[1], &[0.1], &[Some(1.0)], 1.0).is_err());
    }

    #[test]
    fn refining_grid_does_not_decrease_linear_field_estimate() {
        let field = |x: f64, y: f64| (3.0 * x).sin() + 0.5 * y;
        let eval = |nx: usize, ny: usize| {
            let mut vals = Vec::new();
            for i in 0..nx {
                for j in 0..ny {
                    vals.push(Some(field(i as f64 / (nx - 1) as f64, j as f64 / (ny - 1) as f64)));
                }
            }
            estimate_lipschitz(
                &[nx, ny],
                &[1.0 / (nx - 1) as f64, 1.0 / (ny - 1) as f64],
                &vals,
                1.0,
            )
            .unwrap()
        };
        let coarse = eval(5, 5);
        let fine = eval(9, 9);
        assert!(fine >= coarse - 1e-9);
    }

    #[test]
    fn certify_scalar_contractive_pair() {
        let model = crate::model::scalar_linear(0.5, 1.0, [-1.0, 1.0], [-1.0, 1.0]).unwrap();
        let dccm = constant_pair_net(1, 1, &[1.0], &[-0.25]);
        let grid = GridSpec::uniform(&model, 0.25, 0.25, 1.0);
        // a_cl = 0.25 everywhere: h = 0.0625 - 1 = -0.9375, constant field.
        let report = certify_region(&dccm, &model, &grid, 0.9).unwrap();
        assert!(report.covered, "report: {report:?}");
        assert!(report.failing_points.is_empty());
        assert_relative_eq!(report.h_min, -0.9375, epsilon = 1e-9);
        assert_relative_eq!(report.lambda_s_min, 0.9, epsilon = 1e-9);
        assert_relative_eq!(report.alpha1, 1.0, epsilon = 1e-12);
        assert_relative_eq!(report.g_max, 1.0, epsilon = 1e-12);
        // Rate beyond the field: uncertifiable.
        let report = certify_region(&dccm, &model, &grid, 0.95).unwrap();
        assert!(!report.covered);
        assert!(!report.failing_points.is_empty());
    }

    #[test]
    fn finer_grid_weakly_improves_regional_rate() {
        // State-dependent gain bends h across the grid so L > 0.
        let model = crate::model::scalar_linear(0.5, 1.0, [-1.0, 1.0], [-1.0, 1.0]).unwrap();
        let raw = raw_len(1, 1);
        let mut net = MlpNetwork::new(&[1, 4, raw], 5).unwrap();
        let mut p = net.flat_params();
        let len = p.len();
        p[len - 2] = 1.0; // metric bias
        p[len - 1] = -0.2; // gain bias
        for v in p.iter_mut().take(len - 2) {
            *v *= 0.05;
        }
        net.set_flat_params(&p).unwrap();
        let dccm = DccmFunction::new(net, 1, 1).unwrap();
        let coarse = certify_region(&dccm, &model, &GridSpec::uniform(&model, 0.5, 0.5, 1.0), 0.5).unwrap();
        let fine = certify_region(&dccm, &model, &GridSpec::uniform(&model, 0.125, 0.125, 1.0), 0.5).unwrap();
        assert!(fine.lambda_s_min >= coarse.lambda_s_min - 1e-6);
    }
}
