//! Minimal dense feed-forward network: ReLU hidden layers, linear output,
//! reverse-mode gradients, and a bias-corrected adaptive-moment optimizer
//! with decoupled weight decay.
//!
//! The low-level API reuses caller-owned buffers (`ForwardCache`,
//! `MlpGradients`) so batch loops stay allocation-free.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    layer_sizes: Vec<usize>,
    /// Per layer, row-major `out x in`.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    seed: u64,
}

impl MlpNetwork {
    /// Seeded network with weights uniform in
    /// `[-sqrt(6/(fan_in+fan_out)), +sqrt(6/(fan_in+fan_out))]` and zero biases.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "network needs at least two nonzero layer sizes, got {layer_sizes:?}"
            )));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            weights,
            biases,
            seed,
        })
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        let mut net = Self::new(layer_sizes, 0)?;
        for w in &mut net.weights {
            w.fill(0.0);
        }
        Ok(net)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("at least two layers")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    /// Total parameter count: sum over layers of `(in+1)*out`.
    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Direct access used by the output-bias initialization of the online
    /// estimator.
    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        self.biases.last_mut().expect("at least one layer")
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut cache = ForwardCache::default();
        self.forward_cached(x, &mut cache)?;
        Ok(cache.output().to_vec())
    }

    /// Forward pass recording post-activation values per layer for backward.
    pub fn forward_cached(&self, x: &[f64], cache: &mut ForwardCache) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp forward input",
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        cache.resize(&self.layer_sizes);
        cache.activations[0].copy_from_slice(x);
        for layer in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
            let w = &self.weights[layer];
            let b = &self.biases[layer];
            let last = layer + 1 == self.num_layers();
            let (head, tail) = cache.activations.split_at_mut(layer + 1);
            let input = &head[layer];
            let out = &mut tail[0];
            for o in 0..fan_out {
                let mut acc = b[o];
                let row = &w[o * fan_in..(o + 1) * fan_in];
                for (wi, xi) in row.iter().zip(input.iter()) {
                    acc += wi * xi;
                }
                // ReLU on hidden layers, identity on the output layer.
                out[o] = if last { acc } else { acc.max(0.0) };
            }
        }
        Ok(())
    }

    /// Reverse-mode pass. Accumulates parameter gradients into `grads`
    /// (callers zero them between batches) and overwrites `grads.d_input`
    /// with the gradient w.r.t. the network input.
    ///
    /// The ReLU subgradient at exactly zero is taken as zero.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        grads: &mut MlpGradients,
    ) -> Result<()> {
        if upstream.len() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                context: "mlp backward upstream gradient",
                expected: self.output_dim(),
                got: upstream.len(),
            });
        }
        if cache.activations.len() != self.layer_sizes.len()
            || cache
                .activations
                .iter()
                .zip(&self.layer_sizes)
                .any(|(a, &s)| a.len() != s)
        {
            return Err(Error::Config(
                "mlp backward called without a matching cached forward pass".into(),
            ));
        }
        grads.resize(&self.layer_sizes);
        let mut delta = upstream.to_vec();
        for layer in (0..self.num_layers()).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[layer], self.layer_sizes[layer + 1]);
            let input = &cache.activations[layer];
            let dw = &mut grads.d_weights[layer];
            let db = &mut grads.d_biases[layer];
            for o in 0..fan_out {
                db[o] += delta[o];
                let row = &mut dw[o * fan_in..(o + 1) * fan_in];
                for (g, xi) in row.iter_mut().zip(input.iter()) {
                    *g += delta[o] * xi;
                }
            }
            let mut prev = vec![0.0; fan_in];
            for o in 0..fan_out {
                let row = &self.weights[layer][o * fan_in..(o + 1) * fan_in];
                for (p, wi) in prev.iter_mut().zip(row.iter()) {
                    *p += delta[o] * wi;
                }
            }
            if layer > 0 {
                // Gate through the ReLU of the previous layer's output.
                for (p, &a) in prev.iter_mut().zip(input.iter()) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        grads.d_input.clear();
        grads.d_input.extend_from_slice(&delta);
        Ok(())
    }

    /// Flattened parameters, layer by layer, weights then biases.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                context: "mlp flat parameters",
                expected: self.param_count(),
                got: flat.len(),
            });
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wl = w.len();
            w.copy_from_slice(&flat[at..at + wl]);
            at += wl;
            let bl = b.len();
            b.copy_from_slice(&flat[at..at + bl]);
            at += bl;
        }
        Ok(())
    }
}

/// Post-activation values per layer from the most recent forward pass;
/// `activations[0]` is the input itself.
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    activations: Vec<Vec<f64>>,
}

impl ForwardCache {
    fn resize(&mut self, layer_sizes: &[usize]) {
        self.activations.resize(layer_sizes.len(), Vec::new());
        for (a, &s) in self.activations.iter_mut().zip(layer_sizes) {
            a.resize(s, 0.0);
        }
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter gradients shaped like a network, plus the input gradient.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MlpGradients {
    d_weights: Vec<Vec<f64>>,
    d_biases: Vec<Vec<f64>>,
    pub d_input: Vec<f64>,
}

impl MlpGradients {
    pub fn for_network(net: &MlpNetwork) -> Self {
        let mut g = Self::default();
        g.resize(&net.layer_sizes);
        g
    }

    fn resize(&mut self, layer_sizes: &[usize]) {
        let layers = layer_sizes.len() - 1;
        self.d_weights.resize(layers, Vec::new());
        self.d_biases.resize(layers, Vec::new());
        for (l, w) in layer_sizes.windows(2).enumerate() {
            self.d_weights[l].resize(w[0] * w[1], 0.0);
            self.d_biases[l].resize(w[1], 0.0);
        }
    }

    pub fn zero(&mut self) {
        for w in &mut self.d_weights {
            w.fill(0.0);
        }
        for b in &mut self.d_biases {
            b.fill(0.0);
        }
        self.d_input.fill(0.0);
    }

    pub fn add_assign(&mut self, other: &MlpGradients) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.d_weights.iter().zip(&self.d_biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Hyperparameters and accumulators of the moment-based update.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon_num: f64,
    step: u64,
    first_moment: Vec<f64>,
    second_moment: Vec<f64>,
    /// Parameters whose update was skipped because the incoming gradient was
    /// not finite.
    pub skipped_nonfinite: u64,
}

impl OptimizerState {
    pub fn new(net: &MlpNetwork, learning_rate: f64, beta1: f64, beta2: f64, weight_decay: f64) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return Err(Error::Config("decay rates must lie in [0, 1)".into()));
        }
        Ok(Self {
            learning_rate,
            beta1,
            beta2,
            weight_decay,
            epsilon_num: 1e-8,
            step: 0,
            first_moment: vec![0.0; net.param_count()],
            second_moment: vec![0.0; net.param_count()],
            skipped_nonfinite: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

/// One update:
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`,
/// `theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`
/// with bias-corrected moments and decay decoupled from the gradient path.
pub fn optimizer_step(
    net: &mut MlpNetwork,
    grads: &MlpGradients,
    state: &mut OptimizerState,
) -> Result<()> {
    let flat_grads = grads.flat();
    if flat_grads.len() != net.param_count() {
        return Err(Error::DimensionMismatch {
            context: "optimizer gradient vector",
            expected: net.param_count(),
            got: flat_grads.len(),
        });
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    let mut params = net.flat_params();
    for (idx, g) in flat_grads.iter().enumerate() {
        if !g.is_finite() {
            state.skipped_nonfinite += 1;
            continue;
        }
        let m = &mut state.first_moment[idx];
        *m = state.beta1 * *m + (1.0 - state.beta1) * g;
        let v = &mut state.second_moment[idx];
        *v = state.beta2 * *v + (1.0 - state.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        params[idx] -= state.learning_rate
            * (m_hat / (v_hat.sqrt() + state.epsilon_num) + state.weight_decay * params[idx]);
    }
    net.set_flat_params(&params)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DCCMCK1\n";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    layer_sizes: Vec<usize>,
    seed: u64,
    meta: serde_json::Value,
}

/// Write a checkpoint: magic, header length, JSON header (layer sizes, seed,
/// caller metadata), then the flat parameter array as little-endian f64.
pub fn save_checkpoint(
    net: &MlpNetwork,
    meta: serde_json::Value,
    path: impl AsRef<Path>,
) -> Result<()> {
    let pstr = path.as_ref().display().to_string();
    let file = File::create(path.as_ref()).map_err(|e| Error::io(&pstr, e))?;
    let mut w = BufWriter::new(file);
    let header = CheckpointHeader {
        layer_sizes: net.layer_sizes.clone(),
        seed: net.seed,
        meta,
    };
    let header_bytes =
        serde_json::to_vec(&header).map_err(|e| Error::Config(format!("header encode: {e}")))?;
    w.write_all(CHECKPOINT_MAGIC).map_err(|e| Error::io(&pstr, e))?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())
        .map_err(|e| Error::io(&pstr, e))?;
    w.write_all(&header_bytes).map_err(|e| Error::io(&pstr, e))?;
    for v in net.flat_params() {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&pstr, e))?;
    }
    w.flush().map_err(|e| Error::io(&pstr, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(MlpNetwork, serde_json::Value)> {
    let pstr = path.as_ref().display().to_string();
    let file = File::open(path.as_ref()).map_err(|e| Error::io(&pstr, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(&pstr, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Parse {
            path: pstr,
            offset: 0,
            message: "bad magic, not a checkpoint file".into(),
        });
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes).map_err(|e| Error::io(&pstr, e))?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    r.read_exact(&mut header_bytes).map_err(|e| Error::io(&pstr, e))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes).map_err(|e| Error::Parse {
        path: pstr.clone(),
        offset: 12,
        message: format!("header decode: {e}"),
    })?;
    let mut net = MlpNetwork::zeros(&header.layer_sizes)?;
    net.seed = header.seed;
    let mut flat = vec![0.0f64; net.param_count()];
    let mut buf = [0u8; 8];
    for (i, slot) in flat.iter_mut().enumerate() {
        r.read_exact(&mut buf).map_err(|_| Error::Parse {
            path: pstr.clone(),
            offset: (12 + header_bytes.len() + i * 8) as u64,
            message: format!("truncated parameter array at value {i}"),
        })?;
        *slot = f64::from_le_bytes(buf);
    }
    net.set_flat_params(&flat)?;
    Ok((net, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn zero_network_maps_everything_to_zero() {
        let net = MlpNetwork::zeros(&[3, 4, 2]).unwrap();
        let y = net.forward(&[1.0, -2.0, 0.5]).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn single_linear_layer_is_affine() {
        let mut net = MlpNetwork::zeros(&[2, 2]).unwrap();
        net.set_flat_params(&[1.0, 2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        let y = net.forward(&[1.0, 1.0]).unwrap();
        assert_relative_eq!(y[0], 1.0 + 2.0 + 0.5);
        assert_relative_eq!(y[1], 3.0 + 4.0 - 0.5);
    }

    #[test]
    fn param_count_formula() {
        let net = MlpNetwork::new(&[2, 10, 10, 10, 3], 1).unwrap();
        assert_eq!(net.param_count(), 3 * 10 + 11 * 10 + 11 * 10 + 11 * 3);
    }

    /// Straight-line re-implementation of the forward map, kept independent
    /// of the cached implementation above.
    fn forward_oracle(net: &MlpNetwork, x: &[f64]) -> Vec<f64> {
        let sizes = net.layer_sizes().to_vec();
        let flat = net.flat_params();
        let mut at = 0;
        let mut act = x.to_vec();
        for l in 0..sizes.len() - 1 {
            let (fi, fo) = (sizes[l], sizes[l + 1]);
            let w = &flat[at..at + fi * fo];
            at += fi * fo;
            let b = &flat[at..at + fo];
            at += fo;
            let mut next = vec![0.0; fo];
            for o in 0..fo {
                let mut s = b[o];
                for i in 0..fi {
                    s += w[o * fi + i] * act[i];
                }
                next[o] = if l + 1 == sizes.len() - 1 { s } else { s.max(0.0) };
            }
            act = next;
        }
        act
    }

    #[test]
    fn forward_matches_duplicate_evaluation() {
        let net = MlpNetwork::new(&[2, 10, 10, 10, 3], 42).unwrap();
        for x in [[0.3, -0.7], [1.5, 2.5], [-0.2, 0.0]] {
            let got = net.forward(&x).unwrap();
            let want = forward_oracle(&net, &x);
            for (g, w) in got.iter().zip(&want) {
                assert_relative_eq!(g, w, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let a = MlpNetwork::new(&[3, 8, 2], 7).unwrap();
        let b = MlpNetwork::new(&[3, 8, 2], 7).unwrap();
        assert_eq!(a, b);
        let c = MlpNetwork::new(&[3, 8, 2], 8).unwrap();
        assert_ne!(a, c);
    }

    fn fd_param_gradient(net: &MlpNetwork, x: &[f64], upstream: &[f64], h: f64) -> Vec<f64> {
        let base = net.flat_params();
        let mut out = Vec::with_capacity(base.len());
        let loss = |net: &MlpNetwork| -> f64 {
            let y = net.forward(x).unwrap();
            y.iter().zip(upstream).map(|(a, b)| a * b).sum()
        };
        let mut probe = net.clone();
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            probe.set_flat_params(&p).unwrap();
            let plus = loss(&probe);
            p[i] -= 2.0 * h;
            probe.set_flat_params(&p).unwrap();
            let minus = loss(&probe);
            out.push((plus - minus) / (2.0 * h));
        }
        out
    }

    #[test]
    fn backward_matches_finite_differences() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        for seed in 0..8u64 {
            let net = MlpNetwork::new(&[3, 6, 5, 2], seed).unwrap();
            let x: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let upstream: Vec<f64> = (0..2).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let mut cache = ForwardCache::default();
            net.forward_cached(&x, &mut cache).unwrap();
            let mut grads = MlpGradients::for_network(&net);
            net.backward(&cache, &upstream, &mut grads).unwrap();
            let analytic = grads.flat();
            let numeric = fd_param_gradient(&net, &x, &upstream, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                let denom = n.abs().max(1e-6);
                assert!(
                    ((a - n).abs() / denom) < 1e-4,
                    "gradient mismatch: analytic {a}, numeric {n}"
                );
            }
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_gradients() {
        let net = MlpNetwork::new(&[2, 4, 3], 9).unwrap();
        let mut cache = ForwardCache::default();
        net.forward_cached(&[0.4, -0.1], &mut cache).unwrap();
        let mut grads = MlpGradients::for_network(&net);
        net.backward(&cache, &[0.0, 0.0, 0.0], &mut grads).unwrap();
        assert!(grads.flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_input_gradient_hand_check() {
        // 2-2-1 net, identity-friendly weights, all hidden preactivations > 0.
        let mut net = MlpNetwork::zeros(&[2, 2, 1]).unwrap();
        // W1 = [[1, 0], [0, 1]], b1 = (1, 1); W2 = [[2, 3]], b2 = 0.
        net.set_flat_params(&[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 2.0, 3.0, 0.0])
            .unwrap();
        let mut cache = ForwardCache::default();
        net.forward_cached(&[0.5, 0.25], &mut cache).unwrap();
        assert_relative_eq!(cache.output()[0], 2.0 * 1.5 + 3.0 * 1.25);
        let mut grads = MlpGradients::for_network(&net);
        net.backward(&cache, &[1.0], &mut grads).unwrap();
        assert_relative_eq!(grads.d_input[0], 2.0);
        assert_relative_eq!(grads.d_input[1], 3.0);
        // Output-layer weight gradient equals the hidden activation pattern.
        let flat = grads.flat();
        assert_relative_eq!(flat[6], 1.5);
        assert_relative_eq!(flat[7], 1.25);
    }

    #[test]
    fn optimizer_zero_gradient_keeps_parameters() {
        let mut net = MlpNetwork::new(&[2, 3, 1], 3).unwrap();
        let before = net.flat_params();
        let grads = MlpGradients::for_network(&net);
        let mut state = OptimizerState::new(&net, 0.05, 0.1, 0.9, 0.0).unwrap();
        optimizer_step(&mut net, &grads, &mut state).unwrap();
        assert_eq!(net.flat_params(), before);
    }

    #[test]
    fn optimizer_single_step_closed_form() {
        // One step from zero moments with g = 1: bias-corrected m_hat/sqrt(v_hat) = 1,
        // so the parameter moves by about -lr.
        let mut net = MlpNetwork::zeros(&[1, 1]).unwrap();
        net.set_flat_params(&[0.0, 0.0]).unwrap();
        let mut grads = MlpGradients::for_network(&net);
        let mut cache = ForwardCache::default();
        net.forward_cached(&[1.0], &mut cache).unwrap();
        net.backward(&cache, &[1.0], &mut grads).unwrap();
        assert_eq!(grads.flat(), vec![1.0, 1.0]);
        let mut state = OptimizerState::new(&net, 0.05, 0.1, 0.9, 0.0).unwrap();
        optimizer_step(&mut net, &grads, &mut state).unwrap();
        let p = net.flat_params();
        assert_relative_eq!(p[0], -0.05, epsilon = 1e-8);
        assert_relative_eq!(p[1], -0.05, epsilon = 1e-8);
    }

    #[test]
    fn optimizer_descends_against_constant_gradient() {
        let mut net = MlpNetwork::zeros(&[1, 1]).unwrap();
        let mut grads = MlpGradients::for_network(&net);
        let mut cache = ForwardCache::default();
        net.forward_cached(&[1.0], &mut cache).unwrap();
        net.backward(&cache, &[1.0], &mut grads).unwrap();
        let mut state = OptimizerState::new(&net, 0.01, 0.1, 0.9, 0.0).unwrap();
        for _ in 0..50 {
            optimizer_step(&mut net, &grads, &mut state).unwrap();
        }
        assert!(net.flat_params().iter().all(|&p| p < -0.1));
    }

    #[test]
    fn optimizer_skips_nonfinite_gradients() {
        let mut net = MlpNetwork::zeros(&[1, 1]).unwrap();
        let mut grads = MlpGradients::for_network(&net);
        grads.resize(&[1, 1]);
        grads.d_weights[0][0] = f64::NAN;
        grads.d_biases[0][0] = 1.0;
        let mut state = OptimizerState::new(&net, 0.05, 0.1, 0.9, 0.0).unwrap();
        optimizer_step(&mut net, &grads, &mut state).unwrap();
        let p = net.flat_params();
        assert_eq!(p[0], 0.0);
        assert!(p[1] < 0.0);
        assert_eq!(state.skipped_nonfinite, 1);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = MlpNetwork::new(&[2, 5, 3], 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&net, serde_json::json!({"kind": "test"}), &path).unwrap();
        let (loaded, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, net);
        assert_eq!(meta["kind"], "test");
    }
}
