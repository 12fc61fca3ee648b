//! Closed-loop simulation: reference generation, geodesic feedback, plant
//! stepping and optional online parameter learning, with full telemetry.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::controller::feedback_control;
use crate::error::{Error, Result};
use crate::estimator::{online_loss, EstimatorConfig, HistoryBuffer, ParamEstimator, TransitionRecord};
use crate::geodesic::GeodesicConfig;
use crate::model::PlantModel;
use crate::reference::{reference_at, SetpointSchedule};
use crate::trainer::DccmFunction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LearningConfig {
    pub enabled: bool,
    /// First step index at which the estimator may update.
    pub activation_step: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            activation_step: 10,
        }
    }
}

/// One closed-loop scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Physical parameter driving the plant.
    pub r_true: Vec<f64>,
    /// Initial reference-model parameter (the expected value).
    pub r_star_init: Vec<f64>,
    pub x0: Vec<f64>,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Hours per step; 0.01 h maps 100 steps onto t in [0, 1] h.
    #[serde(default = "default_dt")]
    pub dt_hours: f64,
    /// `(activation_time_hours, target_state)` pairs.
    pub schedule: Vec<(f64, Vec<f64>)>,
    #[serde(default)]
    pub learning: LearningConfig,
    #[serde(default)]
    pub seed: u64,
}

fn default_steps() -> usize {
    100
}

fn default_dt() -> f64 {
    0.01
}

impl ScenarioConfig {
    pub fn validate(&self, model: &PlantModel) -> Result<()> {
        if self.x0.len() != model.n {
            return Err(Error::DimensionMismatch {
                context: "scenario initial state",
                expected: model.n,
                got: self.x0.len(),
            });
        }
        if !model.state_box.contains(&self.x0) {
            return Err(Error::Config(format!(
                "initial state {:?} lies outside the state box",
                self.x0
            )));
        }
        if self.r_true.len() != model.ell || self.r_star_init.len() != model.ell {
            return Err(Error::DimensionMismatch {
                context: "scenario parameter vectors",
                expected: model.ell,
                got: self.r_true.len(),
            });
        }
        if self.learning.enabled && self.learning.activation_step >= self.steps {
            return Err(Error::Config(
                "learning activation step must precede the horizon".into(),
            ));
        }
        if !(self.dt_hours > 0.0) {
            return Err(Error::Config("dt_hours must be > 0".into()));
        }
        SetpointSchedule::new(self.schedule.clone())?.validate_against(model)
    }
}

/// Telemetry of one control step.
#[derive(Debug, Clone)]
pub struct SimStep {
    pub k: usize,
    pub t: f64,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub u_raw: DVector<f64>,
    pub x_star: DVector<f64>,
    pub u_star: DVector<f64>,
    pub d_geo: f64,
    /// Reference parameter in effect this step (the estimate once learning
    /// engages).
    pub r_hat: Vec<f64>,
    /// Worst buffered prediction error under the current estimate.
    pub online_loss_max: Option<f64>,
    pub saturated: bool,
}

#[derive(Debug, Clone, Default)]
pub struct SimTrace {
    pub steps: Vec<SimStep>,
    /// Populated when the run stopped early; the trace holds the steps
    /// completed before the failure.
    pub aborted: Option<String>,
}

impl SimTrace {
    pub fn d_geo_series(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.d_geo).collect()
    }
}

/// Run one closed-loop scenario. Per step: update the estimate (when
/// learning is active), regenerate the reference triplet under it, compute
/// the geodesic feedback, then advance the plant with the physical
/// parameter. Deterministic for a fixed seed.
pub fn run_closed_loop(
    cfg: &ScenarioConfig,
    model: &PlantModel,
    dccm: &DccmFunction,
    geo_cfg: &GeodesicConfig,
    est_cfg: &EstimatorConfig,
) -> Result<SimTrace> {
    cfg.validate(model)?;
    let schedule = SetpointSchedule::new(cfg.schedule.clone())?;
    let mut estimator = if cfg.learning.enabled {
        Some(ParamEstimator::new(model, est_cfg.clone(), cfg.seed, &cfg.r_star_init)?)
    } else {
        None
    };
    let mut buffer = HistoryBuffer::new(est_cfg.history);
    let mut trace = SimTrace::default();
    let mut x = DVector::from_column_slice(&cfg.x0);
    let mut r_star = cfg.r_star_init.clone();

    for k in 0..cfg.steps {
        let t = k as f64 * cfg.dt_hours;
        let mut online_loss_max = None;
        if let Some(est) = estimator.as_mut() {
            if k >= cfg.learning.activation_step && !buffer.is_empty() {
                r_star = est.update(&buffer, model, x.as_slice())?;
                let mut worst = 0.0f64;
                for rec in buffer.iter() {
                    worst = worst.max(online_loss(model, &r_star, rec)?);
                }
                online_loss_max = Some(worst);
            }
        }

        let triplet = reference_at(&schedule, model, &r_star, t)?;
        let decision = feedback_control(
            dccm,
            &model.input_box,
            x.as_slice(),
            triplet.x_star.as_slice(),
            triplet.u_star.as_slice(),
            geo_cfg,
        )?;

        let next = match model.step(&cfg.r_true, x.as_slice(), decision.u.as_slice()) {
            Ok(v) => v,
            Err(e) => {
                trace.aborted = Some(format!("plant step failed at k = {k}: {e}"));
                return Ok(trace);
            }
        };
        if next.iter().any(|v| !v.is_finite()) {
            trace.aborted = Some(format!("non-finite state at k = {k}"));
            return Ok(trace);
        }

        trace.steps.push(SimStep {
            k,
            t,
            x: x.clone(),
            u: decision.u.clone(),
            u_raw: decision.u_raw.clone(),
            x_star: triplet.x_star.clone(),
            u_star: triplet.u_star.clone(),
            d_geo: decision.d_geo,
            r_hat: r_star.clone(),
            online_loss_max,
            saturated: decision.saturated,
        });

        buffer.push(TransitionRecord {
            x_prev: x.as_slice().to_vec(),
            u_prev: decision.u.as_slice().to_vec(),
            x_curr: next.as_slice().to_vec(),
        });
        x = next;
    }
    Ok(trace)
}

fn column_names(prefix: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![prefix.to_string()]
    } else {
        (1..=dim).map(|i| format!("{prefix}{i}")).collect()
    }
}

/// CSV header for the given dimensions, e.g.
/// `k,t,x1,x2,u,u_raw,x1_star,x2_star,u_star,d_geo,r_hat,saturated`.
pub fn trace_header(n: usize, m: usize, ell: usize) -> String {
    let mut cols = vec!["k".to_string(), "t".to_string()];
    cols.extend((1..=n).map(|i| format!("x{i}")));
    cols.extend(column_names("u", m));
    cols.extend(column_names("u_raw", m));
    cols.extend((1..=n).map(|i| format!("x{i}_star")));
    cols.extend(column_names("u_star", m));
    cols.push("d_geo".into());
    cols.extend(column_names("r_hat", ell));
    cols.push("saturated".into());
    cols.join(",")
}

/// Write the trace as CSV. Floats print in shortest round-trip form, so a
/// reload reproduces every value exactly and equal-seed runs are bit-stable.
pub fn write_trace(trace: &SimTrace, n: usize, m: usize, ell: usize, path: impl AsRef<Path>) -> Result<()> {
    let pstr = path.as_ref().display().to_string();
    let file = File::create(path.as_ref()).map_err(|e| Error::io(&pstr, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{}", trace_header(n, m, ell)).map_err(|e| Error::io(&pstr, e))?;
    for s in &trace.steps {
        let mut fields: Vec<String> = vec![s.k.to_string(), s.t.to_string()];
        fields.extend(s.x.iter().map(|v| v.to_string()));
        fields.extend(s.u.iter().map(|v| v.to_string()));
        fields.extend(s.u_raw.iter().map(|v| v.to_string()));
        fields.extend(s.x_star.iter().map(|v| v.to_string()));
        fields.extend(s.u_star.iter().map(|v| v.to_string()));
        fields.push(s.d_geo.to_string());
        fields.extend(s.r_hat.iter().map(|v| v.to_string()));
        fields.push((s.saturated as u8).to_string());
        writeln!(w, "{}", fields.join(",")).map_err(|e| Error::io(&pstr, e))?;
    }
    w.flush().map_err(|e| Error::io(&pstr, e))
}

/// A parsed trace row; mirrors the CSV layout.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub k: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub u_raw: Vec<f64>,
    pub x_star: Vec<f64>,
    pub u_star: Vec<f64>,
    pub d_geo: f64,
    pub r_hat: Vec<f64>,
    pub saturated: bool,
}

/// Read back a trace written by [`write_trace`].
pub fn read_trace(n: usize, m: usize, ell: usize, path: impl AsRef<Path>) -> Result<Vec<TraceRow>> {
    let pstr = path.as_ref().display().to_string();
    let file = File::open(path.as_ref()).map_err(|e| Error::io(&pstr, e))?;
    let reader = BufReader::new(file);
    let mut rows = Vec::new();
    let expected_cols = 2 + 2 * n + 3 * m + 1 + ell + 1;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(&pstr, e))?;
        if lineno == 0 {
            if line != trace_header(n, m, ell) {
                return Err(Error::Parse {
                    path: pstr,
                    offset: 0,
                    message: format!("unexpected trace header: {line}"),
                });
            }
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != expected_cols {
            return Err(Error::Parse {
                path: pstr,
                offset: lineno as u64,
                message: format!("expected {expected_cols} columns, got {}", fields.len()),
            });
        }
        let mut it = fields.into_iter();
        let mut take_f64 = |what: &str| -> Result<f64> {
            it.next()
                .ok_or_else(|| Error::Config(format!("missing {what}")))?
                .parse::<f64>()
                .map_err(|e| Error::Parse {
                    path: pstr.clone(),
                    offset: lineno as u64,
                    message: format!("bad {what}: {e}"),
                })
        };
        let k = take_f64("k")? as usize;
        let t = take_f64("t")?;
        let x = (0..n).map(|_| take_f64("x")).collect::<Result<Vec<_>>>()?;
        let u = (0..m).map(|_| take_f64("u")).collect::<Result<Vec<_>>>()?;
        let u_raw = (0..m).map(|_| take_f64("u_raw")).collect::<Result<Vec<_>>>()?;
        let x_star = (0..n).map(|_| take_f64("x_star")).collect::<Result<Vec<_>>>()?;
        let u_star = (0..m).map(|_| take_f64("u_star")).collect::<Result<Vec<_>>>()?;
        let d_geo = take_f64("d_geo")?;
        let r_hat = (0..ell).map(|_| take_f64("r_hat")).collect::<Result<Vec<_>>>()?;
        let saturated = take_f64("saturated")? != 0.0;
        rows.push(TraceRow {
            k,
            t,
            x,
            u,
            u_raw,
            x_star,
            u_star,
            d_geo,
            r_hat,
            saturated,
        });
    }
    Ok(rows)
}
