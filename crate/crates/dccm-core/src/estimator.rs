//! Online estimation of the uncertain model parameter from closed-loop data.
//!
//! A small network maps the state to a parameter estimate. Each control step
//! it trains against the one-step prediction error over a ring buffer of
//! recent transitions; estimates that leave the known parameter box are
//! rejected in favor of the previous in-box value and the network is
//! reinitialized around it.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{ForwardCache, MlpGradients, MlpNetwork, OptimizerState};
use crate::model::PlantModel;

/// One closed-loop transition `(x_{k-1}, u_{k-1}, x_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionRecord {
    pub x_prev: Vec<f64>,
    pub u_prev: Vec<f64>,
    pub x_curr: Vec<f64>,
}

/// Ring buffer of the most recent transitions.
#[derive(Debug, Clone, Default)]
pub struct HistoryBuffer {
    records: VecDeque<TransitionRecord>,
    capacity: usize,
}

impl HistoryBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            records: VecDeque::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn push(&mut self, record: TransitionRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &TransitionRecord> {
        self.records.iter()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorConfig {
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    /// Convergence threshold on the worst per-record prediction error.
    pub eps_ol: f64,
    /// Gradient iterations per control step.
    pub max_iterations: usize,
    /// Ring-buffer capacity H.
    pub history: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// Step for the central finite differences of the loss over r.
    pub fd_step: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.00025,
            hidden: vec![4],
            eps_ol: 1e-6,
            max_iterations: 50,
            history: 20,
            beta1: 0.1,
            beta2: 0.9,
            weight_decay: 0.5,
            fd_step: 1e-6,
        }
    }
}

/// One-step prediction error `|| x_k - f(r^, x_{k-1}) - g(r^, x_{k-1}) u_{k-1} ||_2`.
pub fn online_loss(model: &PlantModel, r_hat: &[f64], record: &TransitionRecord) -> Result<f64> {
    let predicted = model.step(r_hat, &record.x_prev, &record.u_prev)?;
    let err: f64 = predicted
        .iter()
        .zip(&record.x_curr)
        .map(|(p, x)| (p - x) * (p - x))
        .sum();
    Ok(err.sqrt())
}

/// The estimation network plus its optimizer and projection state.
#[derive(Debug, Clone)]
pub struct ParamEstimator {
    net: MlpNetwork,
    opt: OptimizerState,
    cfg: EstimatorConfig,
    last_estimate: Vec<f64>,
    seed: u64,
    reinit_counter: u64,
    pub reinit_events: u64,
}

impl ParamEstimator {
    /// Fresh estimator whose initial output sits at `initial` (which must lie
    /// inside the parameter box): random hidden weights, output bias pinned.
    pub fn new(model: &PlantModel, cfg: EstimatorConfig, seed: u64, initial: &[f64]) -> Result<Self> {
        if initial.len() != model.ell {
            return Err(Error::DimensionMismatch {
                context: "initial parameter estimate",
                expected: model.ell,
                got: initial.len(),
            });
        }
        if !model.param_box.contains(initial) {
            return Err(Error::Config(format!(
                "initial parameter estimate {initial:?} lies outside the parameter box"
            )));
        }
        let net = Self::build_net(model, &cfg, seed, initial)?;
        let opt = OptimizerState::new(&net, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.weight_decay)?;
        Ok(Self {
            net,
            opt,
            cfg,
            last_estimate: initial.to_vec(),
            seed,
            reinit_counter: 0,
            reinit_events: 0,
        })
    }

    /// Random hidden layers, zero output weights, output bias at `center`:
    /// the fresh network predicts exactly `center` at every state, so a
    /// reinitialization resumes from the retained estimate instead of
    /// jumping randomly around it.
    fn build_net(model: &PlantModel, cfg: &EstimatorConfig, seed: u64, center: &[f64]) -> Result<MlpNetwork> {
        let mut sizes = Vec::with_capacity(cfg.hidden.len() + 2);
        sizes.push(model.n);
        sizes.extend_from_slice(&cfg.hidden);
        sizes.push(model.ell);
        let mut net = MlpNetwork::new(&sizes, seed)?;
        let mut params = net.flat_params();
        let tail = model.ell * (cfg.hidden.last().copied().unwrap_or(model.n) + 1);
        let out_start = params.len() - tail;
        for p in &mut params[out_start..] {
            *p = 0.0;
        }
        net.set_flat_params(&params)?;
        net.output_bias_mut().copy_from_slice(center);
        Ok(net)
    }

    pub fn current_estimate(&self) -> &[f64] {
        &self.last_estimate
    }

    pub fn network(&self) -> &MlpNetwork {
        &self.net
    }

    /// Gradient of the summed prediction error w.r.t. the network parameters:
    /// central finite differences of the loss over the estimate, chained
    /// through the network's reverse mode at each record's predecessor state.
    fn batch_gradient(
        &self,
        buffer: &HistoryBuffer,
        model: &PlantModel,
        grads: &mut MlpGradients,
        cache: &mut ForwardCache,
    ) -> Result<f64> {
        let ell = model.ell;
        let h = self.cfg.fd_step;
        let mut max_loss = 0.0f64;
        for record in buffer.iter() {
            self.net.forward_cached(&record.x_prev, cache)?;
            let r_hat = cache.output().to_vec();
            let loss = online_loss(model, &r_hat, record)?;
            max_loss = max_loss.max(loss);
            let mut upstream = vec![0.0; ell];
            let mut probe = r_hat.clone();
            for d in 0..ell {
                let r0 = probe[d];
                probe[d] = r0 + h;
                let plus = online_loss(model, &probe, record)?;
                probe[d] = r0 - h;
                let minus = online_loss(model, &probe, record)?;
                probe[d] = r0;
                upstream[d] = (plus - minus) / (2.0 * h);
            }
            self.net.backward(cache, &upstream, grads)?;
        }
        Ok(max_loss)
    }

    /// One control-step update: train on the buffer, read the estimate at the
    /// current state, and either accept it (in-box) or keep the previous
    /// estimate and reinitialize the network around it.
    pub fn update(&mut self, buffer: &HistoryBuffer, model: &PlantModel, x_now: &[f64]) -> Result<Vec<f64>> {
        if buffer.is_empty() {
            return Ok(self.last_estimate.clone());
        }
        let mut grads = MlpGradients::for_network(&self.net);
        let mut cache = ForwardCache::default();
        for _ in 0..self.cfg.max_iterations {
            grads.zero();
            let max_loss = self.batch_gradient(buffer, model, &mut grads, &mut cache)?;
            if max_loss < self.cfg.eps_ol {
                break;
            }
            crate::mlp::optimizer_step(&mut self.net, &grads, &mut self.opt)?;
        }
        let r_hat = self.net.forward(x_now)?;
        if model.param_box.contains(&r_hat) {
            self.last_estimate = r_hat.clone();
            Ok(r_hat)
        } else {
            self.reinit_counter += 1;
            self.reinit_events += 1;
            let center = self.last_estimate.clone();
            self.net = Self::build_net(model, &self.cfg, self.seed.wrapping_add(self.reinit_counter), &center)?;
            self.opt = OptimizerState::new(
                &self.net,
                self.cfg.learning_rate,
                self.cfg.beta1,
                self.cfg.beta2,
                self.cfg.weight_decay,
            )?;
            Ok(center)
        }
    }
}
