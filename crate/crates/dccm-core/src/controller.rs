//! Geodesic-integrated feedback control and the bounded-tracking radius.
//!
//! The differential feedback law `delta_u = K(x) delta_x` integrates along a
//! geodesic whose endpoints carry the boundary controls: `u*` at the
//! reference and the applied input at the state. The geodesic here therefore
//! runs from `x*` to `x`, so that
//! `u = u* + sum_i K(x~_i) dx~_{s_i} ds_i`
//! telescopes, for a constant gain, to `u* + K (x - x*)` and closes the loop
//! with the same `A + B K` Jacobian the training condition certifies.

use nalgebra::DVector;

use crate::error::Result;
use crate::geodesic::{compute_geodesic, GeodesicConfig, GeodesicPath};
use crate::model::IntervalBox;
use crate::trainer::DccmFunction;

/// One control decision with its telemetry.
#[derive(Debug, Clone)]
pub struct ControlDecision {
    /// Applied input, after saturation to the input box.
    pub u: DVector<f64>,
    /// Pre-saturation value of the integrated law.
    pub u_raw: DVector<f64>,
    /// The geodesic used, oriented from the reference to the state.
    pub geodesic: GeodesicPath,
    /// Riemannian length of that geodesic (the tracking distance estimate).
    pub d_geo: f64,
    pub saturated: bool,
    /// The geodesic solver failed and a straight-line path stood in.
    pub used_fallback: bool,
}

/// Compute the feedback input for state `x` against reference `(x*, u*)`.
///
/// A control must be produced every step: if the geodesic solve errors the
/// law integrates along the straight-line path instead, with a warning.
pub fn feedback_control(
    dccm: &DccmFunction,
    input_box: &IntervalBox,
    x: &[f64],
    x_star: &[f64],
    u_star: &[f64],
    geo_cfg: &GeodesicConfig,
) -> Result<ControlDecision> {
    let (path, used_fallback) = match compute_geodesic(dccm, x_star, x, geo_cfg) {
        Ok(p) => (p, false),
        Err(e) => {
            log::warn!("geodesic solve failed ({e}); falling back to the straight-line path");
            (
                GeodesicPath::straight_line(dccm, x_star, x, geo_cfg.segments),
                true,
            )
        }
    };

    let mut u_raw = DVector::from_column_slice(u_star);
    for i in 0..path.segments() {
        let gain = dccm.gain_at(path.nodes[i].as_slice())?;
        u_raw += gain * &path.displacements[i] * path.weights[i];
    }

    let mut u = u_raw.clone();
    let mut saturated = false;
    for j in 0..u.len() {
        let clamped = u[j].clamp(input_box.lo[j], input_box.hi[j]);
        if clamped != u[j] {
            saturated = true;
            u[j] = clamped;
        }
    }
    let d_geo = path.length;
    Ok(ControlDecision {
        u,
        u_raw,
        geodesic: path,
        d_geo,
        saturated,
        used_fallback,
    })
}

/// Steady-state radius of the bounded-tracking recursion
/// `d_{k+1} <= sqrt(1-beta) d_k + sqrt(alpha2) G ||u~||`, i.e.
/// `sqrt(alpha2) G ||u~|| / (1 - sqrt(1-beta))`.
///
/// `beta <= 0` gives no contraction and an unbounded radius (+inf).
pub fn tracking_bound(alpha2: f64, g_max: f64, u_tilde_norm: f64, beta: f64) -> f64 {
    if beta <= 0.0 {
        return f64::INFINITY;
    }
    let rate = (1.0 - beta.min(1.0)).sqrt();
    alpha2.max(0.0).sqrt() * g_max * u_tilde_norm / (1.0 - rate)
}
