//! Siamese training of the metric/gain network.
//!
//! The network maps a state to `n(n+1)/2 + m*n` raw outputs: the lower
//! triangle of the symmetric metric `M(x)` followed by the rows of the gain
//! `K(x)`. Each dataset element is scored by evaluating the network at `x_k`
//! (giving `M_k`, `K_k`) and at `x_{k+1}` (giving `M_{k+1}`), forming the
//! contraction residual
//! `Omega = -(A + B K_k)^T M_{k+1} (A + B K_k) + (1 - beta) M_k`
//! and applying a hinge on every leading principal minor of `M_k` and
//! `Omega`: by Sylvester's criterion the loss is zero exactly when both
//! matrices clear the `eps` margin of positive definiteness. Gradients flow
//! through both weight-sharing forward passes.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, ElementRef};
use crate::error::{Error, Result};
use crate::geodesic::Metric;
use crate::linalg;
use crate::mlp::{ForwardCache, MlpGradients, MlpNetwork, OptimizerState};

/// Raw network output width for state dimension `n` and input dimension `m`.
pub fn raw_len(n: usize, m: usize) -> usize {
    n * (n + 1) / 2 + m * n
}

/// A decoded metric/gain pair at one state.
#[derive(Debug, Clone, PartialEq)]
pub struct DccmPair {
    /// Symmetric n x n metric.
    pub metric: DMatrix<f64>,
    /// m x n differential feedback gain.
    pub gain: DMatrix<f64>,
}

/// Decode a raw output vector: row-major lower triangle of `M` first
/// (symmetrized by mirroring), then `K` row-major.
pub fn decode(raw: &[f64], n: usize, m: usize) -> Result<DccmPair> {
    if raw.len() != raw_len(n, m) {
        return Err(Error::DimensionMismatch {
            context: "dccm raw output vector",
            expected: raw_len(n, m),
            got: raw.len(),
        });
    }
    let mut metric = DMatrix::zeros(n, n);
    let mut at = 0;
    for i in 0..n {
        for j in 0..=i {
            metric[(i, j)] = raw[at];
            metric[(j, i)] = raw[at];
            at += 1;
        }
    }
    let mut gain = DMatrix::zeros(m, n);
    for i in 0..m {
        for j in 0..n {
            gain[(i, j)] = raw[at];
            at += 1;
        }
    }
    Ok(DccmPair { metric, gain })
}

/// Inverse of [`decode`].
pub fn encode(pair: &DccmPair) -> Vec<f64> {
    let n = pair.metric.nrows();
    let m = pair.gain.nrows();
    let mut raw = Vec::with_capacity(raw_len(n, m));
    for i in 0..n {
        for j in 0..=i {
            raw.push(pair.metric[(i, j)]);
        }
    }
    for i in 0..m {
        for j in 0..n {
            raw.push(pair.gain[(i, j)]);
        }
    }
    raw
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Contraction rate in (0, 1].
    pub beta: f64,
    /// Positivity margin on every leading principal minor.
    pub eps_minor: f64,
    /// Stop once the total loss drops below this.
    pub eps_min: f64,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Keep elements whose successor left the state box.
    pub include_flagged: bool,
    /// Iterations without a new best loss before the learning rate halves.
    pub lr_halving_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            eps_minor: 1e-4,
            eps_min: 1e-6,
            max_iterations: 20_000,
            learning_rate: 0.05,
            hidden: vec![10, 10, 10],
            beta1: 0.1,
            beta2: 0.9,
            weight_decay: 0.5,
            include_flagged: true,
            lr_halving_window: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!(
                "contraction rate beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        if !(self.eps_minor > 0.0) {
            return Err(Error::Config("eps_minor must be > 0".into()));
        }
        if self.eps_min > self.eps_minor {
            return Err(Error::Config(
                "eps_min must not exceed the minor margin eps_minor".into(),
            ));
        }
        if self.hidden.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        Ok(())
    }

    pub fn layer_sizes(&self, n: usize, m: usize) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(n);
        sizes.extend_from_slice(&self.hidden);
        sizes.push(raw_len(n, m));
        sizes
    }
}

/// Contraction residual
/// `Omega = -(A + B K_k)^T M_{k+1} (A + B K_k) + (1 - beta) M_k`,
/// symmetrized before return. Positive definite `Omega` certifies the
/// contraction condition at this element.
pub fn omega(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k_k: &DMatrix<f64>,
    m_k: &DMatrix<f64>,
    m_k1: &DMatrix<f64>,
    beta: f64,
) -> DMatrix<f64> {
    let a_cl = a + b * k_k;
    let mut omega = m_k * (1.0 - beta) - a_cl.transpose() * m_k1 * a_cl;
    linalg::symmetrize(&mut omega);
    omega
}

/// Leading principal minors `det(S[..i,..i])`, re-exported where the loss is
/// defined.
pub fn leading_minors(s: &DMatrix<f64>) -> Vec<f64> {
    linalg::leading_minors(s)
}

/// Scratch buffers reused across element-loss evaluations.
#[derive(Default)]
pub struct LossScratch {
    cache_k: ForwardCache,
    cache_k1: ForwardCache,
    upstream_k: Vec<f64>,
    upstream_k1: Vec<f64>,
}

/// Hinge `max(0, eps - t)` and its active flag.
#[inline]
fn hinge(t: f64, eps: f64) -> (f64, f64) {
    if t - eps <= 0.0 {
        (eps - t, -1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Scatter a full `d loss / d M` matrix (entries treated independently) onto
/// the raw lower-triangle outputs: the off-diagonal raw value feeds both
/// mirrored entries.
fn metric_grad_to_raw(g: &DMatrix<f64>, out: &mut [f64]) {
    let n = g.nrows();
    let mut at = 0;
    for i in 0..n {
        for j in 0..=i {
            out[at] = if i == j { g[(i, i)] } else { g[(i, j)] + g[(j, i)] };
            at += 1;
        }
    }
}

/// Loss and parameter gradient of one dataset element.
///
/// Both forward passes share the network parameters; the returned gradient
/// is the sum of the two branches' contributions, accumulated into `grads`.
/// A non-finite loss leaves `grads` untouched and is reported through the
/// `finite` flag so the batch can exclude the element.
pub struct ElementLoss {
    pub loss: f64,
    pub finite: bool,
}

pub fn element_loss_into(
    elem: &ElementRef<'_>,
    net: &MlpNetwork,
    n: usize,
    m: usize,
    cfg: &TrainConfig,
    scratch: &mut LossScratch,
    grads: &mut MlpGradients,
) -> Result<ElementLoss> {
    net.forward_cached(elem.x_k, &mut scratch.cache_k)?;
    net.forward_cached(elem.x_k1, &mut scratch.cache_k1)?;
    let pair_k = decode(scratch.cache_k.output(), n, m)?;
    // The gain output of the second Siamese pass goes unused by the loss.
    let pair_k1 = decode(scratch.cache_k1.output(), n, m)?;

    let a = DMatrix::from_row_slice(n, n, elem.a);
    let b = DMatrix::from_row_slice(n, m, elem.b);
    let a_cl = &a + &b * &pair_k.gain;
    let m_k = &pair_k.metric;
    let m_k1 = &pair_k1.metric;
    let mut om = m_k * (1.0 - cfg.beta) - a_cl.transpose() * m_k1 * &a_cl;
    linalg::symmetrize(&mut om);

    let minors_m = linalg::leading_minors(m_k);
    let minors_o = linalg::leading_minors(&om);
    let mut loss = 0.0;
    let mut w_m = vec![0.0; n];
    let mut w_o = vec![0.0; n];
    for i in 0..n {
        let (lm, dm) = hinge(minors_m[i], cfg.eps_minor);
        let (lo, dodd) = hinge(minors_o[i], cfg.eps_minor);
        loss += lm + lo;
        w_m[i] = dm;
        w_o[i] = dodd;
    }
    if !loss.is_finite() {
        return Ok(ElementLoss { loss, finite: false });
    }
    if loss == 0.0 {
        return Ok(ElementLoss { loss, finite: true });
    }

    // d loss / d Omega and d loss / d M_k from the minor hinges.
    let g_omega = linalg::leading_minor_gradient(&om, &w_o);
    let mut g_mk = linalg::leading_minor_gradient(m_k, &w_m);
    g_mk += &g_omega * (1.0 - cfg.beta);
    // Omega = (1-beta) M_k - A_cl^T M_{k+1} A_cl:
    let g_mk1 = -(&a_cl * &g_omega * a_cl.transpose());
    // d loss / d A_cl = -2 M_{k+1} A_cl G_omega (G_omega symmetric), then K = B^T chain.
    let g_k = -2.0 * (b.transpose() * m_k1 * &a_cl * &g_omega);

    let raw = raw_len(n, m);
    scratch.upstream_k.resize(raw, 0.0);
    scratch.upstream_k1.resize(raw, 0.0);
    scratch.upstream_k1.fill(0.0);
    metric_grad_to_raw(&g_mk, &mut scratch.upstream_k);
    let tri = n * (n + 1) / 2;
    for i in 0..m {
        for j in 0..n {
            scratch.upstream_k[tri + i * n + j] = g_k[(i, j)];
        }
    }
    metric_grad_to_raw(&g_mk1, &mut scratch.upstream_k1);

    net.backward(&scratch.cache_k, &scratch.upstream_k, grads)?;
    net.backward(&scratch.cache_k1, &scratch.upstream_k1, grads)?;
    Ok(ElementLoss { loss, finite: true })
}

/// Allocating convenience wrapper around [`element_loss_into`].
pub fn element_loss(
    elem: &ElementRef<'_>,
    net: &MlpNetwork,
    n: usize,
    m: usize,
    cfg: &TrainConfig,
) -> Result<(f64, MlpGradients)> {
    let mut scratch = LossScratch::default();
    let mut grads = MlpGradients::for_network(net);
    let out = element_loss_into(elem, net, n, m, cfg, &mut scratch, &mut grads)?;
    Ok((out.loss, grads))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrEvent {
    pub iteration: usize,
    pub new_learning_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_loss: f64,
    pub best_loss: f64,
    pub loss_history: Vec<f64>,
    pub lr_events: Vec<LrEvent>,
    pub nonfinite_elements: u64,
    pub trained_elements: usize,
    pub wall_seconds: f64,
}

fn batch_loss_and_grads(
    net: &MlpNetwork,
    elements: &[usize],
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(f64, MlpGradients, u64)> {
    const CHUNK: usize = 512;
    let chunks: Vec<Result<(f64, MlpGradients, u64)>> = elements
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut scratch = LossScratch::default();
            let mut grads = MlpGradients::for_network(net);
            let mut loss = 0.0;
            let mut nonfinite = 0u64;
            for &i in chunk {
                let elem = ds.element(i);
                let out = element_loss_into(&elem, net, ds.n, ds.m, cfg, &mut scratch, &mut grads)?;
                if out.finite {
                    loss += out.loss;
                } else {
                    nonfinite += 1;
                }
            }
            Ok((loss, grads, nonfinite))
        })
        .collect();
    // Sequential reduction in chunk order keeps float sums deterministic.
    let mut total_loss = 0.0;
    let mut total_grads = MlpGradients::for_network(net);
    let mut total_nonfinite = 0;
    for c in chunks {
        let (l, g, nf) = c?;
        total_loss += l;
        total_grads.add_assign(&g);
        total_nonfinite += nf;
    }
    Ok((total_loss, total_grads, total_nonfinite))
}

/// Full-batch training until the total loss drops below `eps_min` or the
/// iteration budget runs out (which returns the best-so-far network with
/// `converged = false` rather than an error).
pub fn train_dccm(ds: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<(MlpNetwork, TrainReport)> {
    cfg.validate()?;
    let net = MlpNetwork::new(&cfg.layer_sizes(ds.n, ds.m), seed)?;
    train_dccm_from(net, ds, cfg)
}

/// [`train_dccm`] with a caller-supplied starting network (warm start).
pub fn train_dccm_from(
    net: MlpNetwork,
    ds: &Dataset,
    cfg: &TrainConfig,
) -> Result<(MlpNetwork, TrainReport)> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("cannot train on an empty dataset".into()));
    }
    let started = Instant::now();
    let elements: Vec<usize> = (0..ds.len())
        .filter(|&i| cfg.include_flagged || !ds.element(i).flagged)
        .collect();
    if elements.is_empty() {
        return Err(Error::Config(
            "no trainable elements (all flagged and include_flagged = false)".into(),
        ));
    }

    let mut net = net;
    let mut opt = OptimizerState::new(&net, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.weight_decay)?;

    let mut loss_history = Vec::new();
    let mut lr_events = Vec::new();
    let mut nonfinite_total = 0u64;
    let mut best_loss = f64::INFINITY;
    let mut best_params = net.flat_params();
    let mut since_improvement = 0usize;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 0..cfg.max_iterations {
        iterations = iter;
        let (loss, grads, nonfinite) = batch_loss_and_grads(&net, &elements, ds, cfg)?;
        nonfinite_total += nonfinite;
        loss_history.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_params = net.flat_params();
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= cfg.lr_halving_window && opt.learning_rate > 1e-7 {
                opt.learning_rate *= 0.5;
                lr_events.push(LrEvent {
                    iteration: iter,
                    new_learning_rate: opt.learning_rate,
                });
                since_improvement = 0;
            }
        }
        if loss < cfg.eps_min {
            converged = true;
            break;
        }
        crate::mlp::optimizer_step(&mut net, &grads, &mut opt)?;
    }

    if !converged {
        net.set_flat_params(&best_params)?;
    }
    let final_loss = loss_history.last().copied().unwrap_or(f64::INFINITY);
    Ok((
        net,
        TrainReport {
            converged,
            iterations,
            final_loss,
            best_loss,
            loss_history,
            lr_events,
            nonfinite_elements: nonfinite_total,
            trained_elements: elements.len(),
            wall_seconds: started.elapsed().as_secs_f64(),
        },
    ))
}

/// Per-element verification result against strict positivity and the margin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub elements: usize,
    /// Fraction with both `min eig(M_k) > 0` and `min eig(Omega) > 0`.
    pub fraction_pd: f64,
    /// Fraction additionally clearing the `eps_minor` margin.
    pub fraction_above_eps: f64,
    pub worst_metric_eigenvalue: f64,
    pub worst_omega_eigenvalue: f64,
    /// Indices of elements failing strict positive definiteness (capped).
    pub failing: Vec<usize>,
    pub failing_count: usize,
}

const MAX_REPORTED_FAILURES: usize = 1000;

/// Check the trained pair on every dataset element.
pub fn verify_contraction(net: &MlpNetwork, ds: &Dataset, cfg: &TrainConfig) -> Result<VerifyReport> {
    let indices: Vec<usize> = (0..ds.len()).collect();
    let per: Vec<Result<(f64, f64, bool)>> = indices
        .par_iter()
        .map(|&i| {
            let elem = ds.element(i);
            let raw_k = net.forward(elem.x_k)?;
            let raw_k1 = net.forward(elem.x_k1)?;
            let pair_k = decode(&raw_k, ds.n, ds.m)?;
            let pair_k1 = decode(&raw_k1, ds.n, ds.m)?;
            let a = DMatrix::from_row_slice(ds.n, ds.n, elem.a);
            let b = DMatrix::from_row_slice(ds.n, ds.m, elem.b);
            let om = omega(&a, &b, &pair_k.gain, &pair_k.metric, &pair_k1.metric, cfg.beta);
            let eig_m = linalg::min_eigenvalue(&pair_k.metric)?;
            let eig_o = linalg::min_eigenvalue(&om)?;
            let above_eps = {
                let minors_m = linalg::leading_minors(&pair_k.metric);
                let minors_o = linalg::leading_minors(&om);
                minors_m
                    .iter()
                    .chain(minors_o.iter())
                    .all(|&v| v >= cfg.eps_minor)
            };
            Ok((eig_m, eig_o, above_eps))
        })
        .collect();

    let mut pd_count = 0usize;
    let mut eps_count = 0usize;
    let mut worst_m = f64::INFINITY;
    let mut worst_o = f64::INFINITY;
    let mut failing = Vec::new();
    let mut failing_count = 0usize;
    for (i, r) in per.into_iter().enumerate() {
        let (eig_m, eig_o, above_eps) = r?;
        worst_m = worst_m.min(eig_m);
        worst_o = worst_o.min(eig_o);
        if eig_m > 0.0 && eig_o > 0.0 {
            pd_count += 1;
        } else {
            failing_count += 1;
            if failing.len() < MAX_REPORTED_FAILURES {
                failing.push(i);
            }
        }
        if above_eps {
            eps_count += 1;
        }
    }
    let total = ds.len().max(1);
    Ok(VerifyReport {
        elements: ds.len(),
        fraction_pd: pd_count as f64 / total as f64,
        fraction_above_eps: eps_count as f64 / total as f64,
        worst_metric_eigenvalue: worst_m,
        worst_omega_eigenvalue: worst_o,
        failing,
        failing_count,
    })
}

/// A trained network viewed as the function pair `x -> (M(x), K(x))`.
#[derive(Debug, Clone)]
pub struct DccmFunction {
    net: MlpNetwork,
    pub n: usize,
    pub m: usize,
}

impl DccmFunction {
    pub fn new(net: MlpNetwork, n: usize, m: usize) -> Result<Self> {
        if net.input_dim() != n || net.output_dim() != raw_len(n, m) {
            return Err(Error::DimensionMismatch {
                context: "dccm network output width",
                expected: raw_len(n, m),
                got: net.output_dim(),
            });
        }
        Ok(Self { net, n, m })
    }

    pub fn network(&self) -> &MlpNetwork {
        &self.net
    }

    pub fn pair_at(&self, x: &[f64]) -> Result<DccmPair> {
        decode(&self.net.forward(x)?, self.n, self.m)
    }

    pub fn metric_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.pair_at(x)?.metric)
    }

    pub fn gain_at(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        Ok(self.pair_at(x)?.gain)
    }
}

impl Metric for DccmFunction {
    fn dim(&self) -> usize {
        self.n
    }

    fn eval(&self, x: &[f64]) -> DMatrix<f64> {
        self.pair_at(x).map(|p| p.metric).unwrap_or_else(|_| {
            // Dimension errors cannot occur for callers constructed through
            // `new`; keep the trait total with an identity fallback.
            DMatrix::identity(self.n, self.n)
        })
    }

    /// Exact reverse-mode gradient of `v^T M(x) v` w.r.t. the input.
    fn quad_form_grad(&self, x: &[f64], v: &DVector<f64>) -> DVector<f64> {
        let mut cache = ForwardCache::default();
        if self.net.forward_cached(x, &mut cache).is_err() {
            return DVector::zeros(self.n);
        }
        let mut upstream = vec![0.0; raw_len(self.n, self.m)];
        let mut at = 0;
        for i in 0..self.n {
            for j in 0..=i {
                upstream[at] = if i == j { v[i] * v[i] } else { 2.0 * v[i] * v[j] };
                at += 1;
            }
        }
        let mut grads = MlpGradients::for_network(&self.net);
        if self.net.backward(&cache, &upstream, &mut grads).is_err() {
            return DVector::zeros(self.n);
        }
        DVector::from_vec(grads.d_input)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub n: usize,
    pub m: usize,
    pub train: TrainConfig,
    pub seed: u64,
    pub model_name: String,
}

/// Persist a trained pair together with the dimensions and training setup.
pub fn save_dccm_checkpoint(
    dccm: &DccmFunction,
    cfg: &TrainConfig,
    seed: u64,
    model_name: &str,
    path: impl AsRef<Path>,
) -> Result<()> {
    let meta = CheckpointMeta {
        kind: "dccm".into(),
        n: dccm.n,
        m: dccm.m,
        train: cfg.clone(),
        seed,
        model_name: model_name.into(),
    };
    let value = serde_json::to_value(&meta).map_err(|e| Error::Config(e.to_string()))?;
    crate::mlp::save_checkpoint(&dccm.net, value, path)
}

pub fn load_dccm_checkpoint(path: impl AsRef<Path>) -> Result<(DccmFunction, CheckpointMeta)> {
    let pstr = path.as_ref().display().to_string();
    let (net, meta) = crate::mlp::load_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta).map_err(|e| Error::Parse {
        path: pstr,
        offset: 12,
        message: format!("checkpoint metadata: {e}"),
    })?;
    let dccm = DccmFunction::new(net, meta.n, meta.m)?;
    Ok((dccm, meta))
}
