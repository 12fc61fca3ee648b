//! Uncertain discrete-time control-affine plants: `x_{k+1} = f(r,x) + g(r,x) u`.
//!
//! A [`PlantModel`] carries the state/input/parameter boxes and an evaluator
//! for `f` and `g`. Jacobians of the one-step map are analytic when the
//! dynamics provide them (the CSTR does) and central finite differences
//! otherwise.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-dimension closed interval bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl IntervalBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                context: "IntervalBox bounds",
                expected: lo.len(),
                got: hi.len(),
            });
        }
        for (i, (&a, &b)) in lo.iter().zip(&hi).enumerate() {
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::Config(format!(
                    "box dimension {i} must satisfy finite min < max, got [{a}, {b}]"
                )));
            }
        }
        Ok(Self { lo, hi })
    }

    /// Zero-dimensional box, for plants without uncertain parameters.
    pub fn empty() -> Self {
        Self {
            lo: Vec::new(),
            hi: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(self.lo.iter().zip(&self.hi))
                .all(|(&v, (&a, &b))| v >= a && v <= b)
    }

    pub fn clamp(&self, point: &[f64]) -> Vec<f64> {
        point
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(&v, (&a, &b))| v.clamp(a, b))
            .collect()
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(&a, &b)| 0.5 * (a + b))
            .collect()
    }
}

/// Evaluator for the control-affine maps `f(r,x)` and `g(r,x)`.
///
/// `jacobians` may return analytic derivatives of the one-step map; plants
/// that only provide `f` and `g` fall back to central finite differences.
pub trait Dynamics: Send + Sync {
    fn f(&self, r: &[f64], x: &[f64]) -> DVector<f64>;
    fn g(&self, r: &[f64], x: &[f64]) -> DMatrix<f64>;
    fn jacobians(&self, r: &[f64], x: &[f64], u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let _ = (r, x, u);
        None
    }
}

/// An uncertain discrete-time control-affine plant.
#[derive(Clone)]
pub struct PlantModel {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub ell: usize,
    pub state_box: IntervalBox,
    pub input_box: IntervalBox,
    pub param_box: IntervalBox,
    dynamics: Arc<dyn Dynamics>,
}

const FD_STEP: f64 = 1e-6;

impl PlantModel {
    pub fn new(
        name: impl Into<String>,
        state_box: IntervalBox,
        input_box: IntervalBox,
        param_box: IntervalBox,
        dynamics: Arc<dyn Dynamics>,
    ) -> Self {
        Self {
            name: name.into(),
            n: state_box.dim(),
            m: input_box.dim(),
            ell: param_box.dim(),
            state_box,
            input_box,
            param_box,
            dynamics,
        }
    }

    fn check_dims(&self, r: &[f64], x: &[f64], u: &[f64]) -> Result<()> {
        if r.len() != self.ell {
            return Err(Error::DimensionMismatch {
                context: "plant parameter vector",
                expected: self.ell,
                got: r.len(),
            });
        }
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "plant state vector",
                expected: self.n,
                got: x.len(),
            });
        }
        if u.len() != self.m {
            return Err(Error::DimensionMismatch {
                context: "plant input vector",
                expected: self.m,
                got: u.len(),
            });
        }
        if !(r.iter().all(|v| v.is_finite())
            && x.iter().all(|v| v.is_finite())
            && u.iter().all(|v| v.is_finite()))
        {
            return Err(Error::NonFinite {
                context: "plant evaluation arguments",
            });
        }
        Ok(())
    }

    pub fn f(&self, r: &[f64], x: &[f64]) -> DVector<f64> {
        self.dynamics.f(r, x)
    }

    pub fn g(&self, r: &[f64], x: &[f64]) -> DMatrix<f64> {
        self.dynamics.g(r, x)
    }

    /// One step of the plant: `x_{k+1} = f(r,x) + g(r,x) u`, unclamped.
    pub fn step(&self, r: &[f64], x: &[f64], u: &[f64]) -> Result<DVector<f64>> {
        self.check_dims(r, x, u)?;
        let next = self.dynamics.f(r, x) + self.dynamics.g(r, x) * DVector::from_column_slice(u);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "plant step",
            });
        }
        Ok(next)
    }

    /// Jacobians `(A, B)` of the one-step map with respect to `x` and `u`.
    ///
    /// For a control-affine plant `B = g(r,x)` exactly; the finite-difference
    /// fallback still differentiates the full step for generality.
    pub fn jacobians(&self, r: &[f64], x: &[f64], u: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.check_dims(r, x, u)?;
        if let Some((a, b)) = self.dynamics.jacobians(r, x, u) {
            return Ok((a, b));
        }
        let mut a = DMatrix::zeros(self.n, self.n);
        let mut xp = x.to_vec();
        for j in 0..self.n {
            let x0 = x[j];
            xp[j] = x0 + FD_STEP;
            let plus = self.step(r, &xp, u)?;
            xp[j] = x0 - FD_STEP;
            let minus = self.step(r, &xp, u)?;
            xp[j] = x0;
            for i in 0..self.n {
                a[(i, j)] = (plus[i] - minus[i]) / (2.0 * FD_STEP);
            }
        }
        let mut b = DMatrix::zeros(self.n, self.m);
        let mut up = u.to_vec();
        for j in 0..self.m {
            let u0 = u[j];
            up[j] = u0 + FD_STEP;
            let plus = self.step(r, x, &up)?;
            up[j] = u0 - FD_STEP;
            let minus = self.step(r, x, &up)?;
            up[j] = u0;
            for i in 0..self.n {
                b[(i, j)] = (plus[i] - minus[i]) / (2.0 * FD_STEP);
            }
        }
        Ok((a, b))
    }
}

/// Fixed constants of the CSTR benchmark plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CstrParams {
    pub da1: f64,
    pub da2: f64,
    pub zeta: f64,
    pub alpha: f64,
    pub b_range: [f64; 2],
    pub b_true: f64,
    /// Scale on how the jacket input enters the temperature state. The
    /// nominal model uses 1.0; an alternative reading of the case study
    /// applies the 0.1 discretization factor to `u` as well.
    pub input_gain: f64,
}

impl Default for CstrParams {
    fn default() -> Self {
        Self {
            da1: 1.25,
            da2: 2.5,
            zeta: 0.1,
            alpha: 0.8,
            b_range: [1.0, 3.0],
            b_true: 1.0,
            input_gain: 1.0,
        }
    }
}

impl CstrParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.b_range[0] < self.b_range[1]) {
            return Err(Error::Config("CSTR B range must satisfy min < max".into()));
        }
        if self.b_true < self.b_range[0] || self.b_true > self.b_range[1] {
            return Err(Error::Config("CSTR true B must lie inside its range".into()));
        }
        if self.input_gain == 0.0 {
            return Err(Error::Config("CSTR input gain must be nonzero".into()));
        }
        Ok(())
    }
}

struct CstrDynamics {
    p: CstrParams,
}

impl CstrDynamics {
    fn arrhenius(&self, x2: f64) -> f64 {
        (self.p.alpha * x2 / (self.p.alpha + x2)).exp()
    }
}

impl Dynamics for CstrDynamics {
    fn f(&self, r: &[f64], x: &[f64]) -> DVector<f64> {
        let b = r[0];
        let (x1, x2) = (x[0], x[1]);
        let e = self.arrhenius(x2);
        let phi1 = self.p.da1 * (1.0 - x1);
        let phi2 = self.p.da2 * (1.0 - x1);
        DVector::from_vec(vec![
            0.9 * x1 + 0.1 * phi1 * e + 0.1 * (1.0 - self.p.zeta) * x1,
            0.9 * x2 + 0.1 * b * phi2 * e,
        ])
    }

    fn g(&self, _r: &[f64], _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 1, &[0.0, self.p.input_gain])
    }

    fn jacobians(&self, r: &[f64], x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        let b = r[0];
        let (x1, x2) = (x[0], x[1]);
        let e = self.arrhenius(x2);
        // d/dx2 of the exponent alpha*x2/(alpha+x2) is alpha^2/(alpha+x2)^2.
        let dexp = self.p.alpha * self.p.alpha / ((self.p.alpha + x2) * (self.p.alpha + x2));
        let a11 = 0.9 + 0.1 * (1.0 - self.p.zeta) - 0.1 * self.p.da1 * e;
        let a12 = 0.1 * self.p.da1 * (1.0 - x1) * e * dexp;
        let a21 = -0.1 * b * self.p.da2 * e;
        let a22 = 0.9 + 0.1 * b * self.p.da2 * (1.0 - x1) * e * dexp;
        Some((
            DMatrix::from_row_slice(2, 2, &[a11, a12, a21, a22]),
            self.g(r, x),
        ))
    }
}

/// The CSTR benchmark: normalized reactant concentration and reactor
/// temperature, jacket temperature as input, uncertain heat-of-reaction
/// coefficient `B`.
pub fn cstr(params: CstrParams) -> Result<PlantModel> {
    params.validate()?;
    let state_box = IntervalBox::new(vec![0.1, 0.1], vec![1.1, 1.1])?;
    let input_box = IntervalBox::new(vec![-1.0], vec![1.0])?;
    let param_box = IntervalBox::new(vec![params.b_range[0]], vec![params.b_range[1]])?;
    Ok(PlantModel::new(
        "cstr",
        state_box,
        input_box,
        param_box,
        Arc::new(CstrDynamics { p: params }),
    ))
}

struct LinearDynamics {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl Dynamics for LinearDynamics {
    fn f(&self, _r: &[f64], x: &[f64]) -> DVector<f64> {
        &self.a * DVector::from_column_slice(x)
    }

    fn g(&self, _r: &[f64], _x: &[f64]) -> DMatrix<f64> {
        self.b.clone()
    }

    fn jacobians(&self, _r: &[f64], _x: &[f64], _u: &[f64]) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
        Some((self.a.clone(), self.b.clone()))
    }
}

/// Parameter-free linear plant `x_{k+1} = A0 x + B0 u` with the given boxes.
pub fn linear(
    a0: DMatrix<f64>,
    b0: DMatrix<f64>,
    state_box: IntervalBox,
    input_box: IntervalBox,
) -> Result<PlantModel> {
    if a0.nrows() != state_box.dim() || a0.ncols() != state_box.dim() {
        return Err(Error::DimensionMismatch {
            context: "linear plant A matrix",
            expected: state_box.dim(),
            got: a0.nrows(),
        });
    }
    if b0.nrows() != state_box.dim() || b0.ncols() != input_box.dim() {
        return Err(Error::DimensionMismatch {
            context: "linear plant B matrix",
            expected: state_box.dim(),
            got: b0.nrows(),
        });
    }
    Ok(PlantModel::new(
        "linear",
        state_box,
        input_box,
        IntervalBox::empty(),
        Arc::new(LinearDynamics { a: a0, b: b0 }),
    ))
}

/// Scalar linear plant `x_{k+1} = a x + b u`, handy for pipeline checks.
pub fn scalar_linear(a: f64, b: f64, x_range: [f64; 2], u_range: [f64; 2]) -> Result<PlantModel> {
    let mut model = linear(
        DMatrix::from_element(1, 1, a),
        DMatrix::from_element(1, 1, b),
        IntervalBox::new(vec![x_range[0]], vec![x_range[1]])?,
        IntervalBox::new(vec![u_range[0]], vec![u_range[1]])?,
    )?;
    model.name = "scalar_linear".into();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn cstr_model() -> PlantModel {
        cstr(CstrParams::default()).unwrap()
    }

    #[test]
    fn step_regression_constant() {
        // Hand evaluation of the CSTR map at r = 1, x = (0.5, 0.5), u = 0.
        let m = cstr_model();
        let next = m.step(&[1.0], &[0.5, 0.5], &[0.0]).unwrap();
        assert_relative_eq!(next[0], 0.5800176485071913, epsilon = 1e-15);
        assert_relative_eq!(next[1], 0.6200352970143825, epsilon = 1e-15);
    }

    #[test]
    fn step_is_deterministic() {
        let m = cstr_model();
        let a = m.step(&[2.3], &[0.7, 0.4], &[0.25]).unwrap();
        let b = m.step(&[2.3], &[0.7, 0.4], &[0.25]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn step_checks_dimensions() {
        let m = cstr_model();
        assert!(matches!(
            m.step(&[1.0, 2.0], &[0.5, 0.5], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            m.step(&[1.0], &[0.5], &[0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            m.step(&[1.0], &[0.5, f64::NAN], &[0.0]),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn zero_input_map_ignores_u() {
        let model = linear(
            DMatrix::from_element(1, 1, 0.5),
            DMatrix::from_element(1, 1, 0.0),
            IntervalBox::new(vec![-1.0], vec![1.0]).unwrap(),
            IntervalBox::new(vec![-1.0], vec![1.0]).unwrap(),
        )
        .unwrap();
        let a = model.step(&[], &[0.3], &[-0.9]).unwrap();
        let b = model.step(&[], &[0.3], &[0.7]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_jacobians_are_constant() {
        let a0 = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.8]);
        let b0 = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let model = linear(
            a0.clone(),
            b0.clone(),
            IntervalBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap(),
            IntervalBox::new(vec![-1.0], vec![1.0]).unwrap(),
        )
        .unwrap();
        for (x, u) in [([0.2, -0.4], [0.9]), ([0.0, 0.0], [0.0])] {
            let (a, b) = model.jacobians(&[], &x, &u).unwrap();
            assert_relative_eq!(a, a0, epsilon = 1e-12);
            assert_relative_eq!(b, b0, epsilon = 1e-12);
        }
    }

    #[test]
    fn cstr_jacobians_match_finite_differences() {
        let m = cstr_model();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let h = 1e-6;
        for _ in 0..40 {
            let r = [1.0 + 2.0 * rng.random::<f64>()];
            let x = [
                0.1 + rng.random::<f64>(),
                0.1 + rng.random::<f64>(),
            ];
            let u = [-1.0 + 2.0 * rng.random::<f64>()];
            let (a, b) = m.jacobians(&r, &x, &u).unwrap();
            for j in 0..2 {
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let fp = m.step(&r, &xp, &u).unwrap();
                let fm = m.step(&r, &xm, &u).unwrap();
                for i in 0..2 {
                    let fd = (fp[i] - fm[i]) / (2.0 * h);
                    assert_relative_eq!(a[(i, j)], fd, max_relative = 1e-5, epsilon = 1e-9);
                }
            }
            assert_relative_eq!(b, m.g(&r, &x), epsilon = 1e-12);
        }
    }

    #[test]
    fn cstr_b_is_exactly_g() {
        let m = cstr_model();
        let (_, b) = m.jacobians(&[2.0], &[0.6, 0.8], &[0.1]).unwrap();
        assert_eq!(b, DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
    }
}
