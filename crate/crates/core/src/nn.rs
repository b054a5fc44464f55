//! From-scratch feedforward network in f64: forward and backward passes
//! with optional batch normalization, logistic and squared losses, Adam,
//! and a finite-difference gradient checker.
//!
//! A network with `num_layers` weight layers has `num_layers - 1` hidden
//! blocks (affine, then batchnorm if enabled, then a rectified-linear
//! activation) of width `hidden_units`, followed by a final affine layer to
//! one output. Everything is double precision; the gradient checks depend
//! on it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::rng::{seeded_rng, shuffle, uniform};

/// Batchnorm variance epsilon. Deliberately tiny: normalized batch columns
/// must have variance equal to 1 well below 1e-6, which a conventional 1e-5
/// epsilon would visibly distort.
pub const BN_EPS: f64 = 1e-12;

/// Momentum for the running-statistics update: running = m*running + (1-m)*batch.
pub const BN_MOMENTUM: f64 = 0.9;

/// What the single output unit means; decides which loss fits.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    /// Log-odds of a binary target (train with the logistic loss).
    Logit,
    /// Plain real value (train with the squared loss).
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub input_dim: usize,
    /// Number of weight layers; the last maps to the single output.
    pub num_layers: usize,
    pub hidden_units: usize,
    pub use_batchnorm: bool,
    pub output: OutputKind,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("batch width {found} does not match input dimension {expected}")]
    WidthMismatch { found: usize, expected: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("train-mode batch normalization needs at least 2 rows, got 1")]
    SingleRowBatch,
    #[error("{outputs} outputs but {targets} targets")]
    TargetMismatch { outputs: usize, targets: usize },
    #[error("logistic targets must be 0 or 1, found {0}")]
    NonBinaryTarget(f64),
    #[error("forward cache does not match the parameters")]
    CacheMismatch,
    #[error("gradient shape does not match the parameters")]
    GradShapeMismatch,
    #[error("non-finite gradient at flat parameter index {0}")]
    NonFiniteGradient(usize),
    #[error("adam state holds {state} parameters, model has {params}")]
    StateMismatch { state: usize, params: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// out x in.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub config: MlpConfig,
    pub layers: Vec<DenseLayer>,
    /// One slot per hidden layer; `None` when batchnorm is disabled.
    pub norms: Vec<Option<BatchNorm>>,
}

/// Initialize parameters: weights are seeded uniform with fan-in scaling
/// (std 1/sqrt(fan_in)), biases 0, batchnorm gamma 1, beta 0, running
/// statistics (0, 1). Deterministic per seed.
pub fn init(config: &MlpConfig) -> Result<MlpParams, NnError> {
    if config.num_layers < 1 {
        return Err(NnError::InvalidConfig("num_layers must be >= 1".into()));
    }
    if config.hidden_units < 1 {
        return Err(NnError::InvalidConfig("hidden_units must be >= 1".into()));
    }
    if config.input_dim < 1 {
        return Err(NnError::InvalidConfig("input_dim must be >= 1".into()));
    }
    let mut rng = seeded_rng(config.seed);
    let mut layers = Vec::with_capacity(config.num_layers);
    let mut norms = Vec::with_capacity(config.num_layers.saturating_sub(1));
    for l in 0..config.num_layers {
        let fan_in = if l == 0 {
            config.input_dim
        } else {
            config.hidden_units
        };
        let fan_out = if l == config.num_layers - 1 {
            1
        } else {
            config.hidden_units
        };
        let bound = (3.0 / fan_in as f64).sqrt();
        let mut weight = Matrix::zeros(fan_out, fan_in);
        for r in 0..fan_out {
            for c in 0..fan_in {
                weight.set(r, c, uniform(&mut rng, -bound, bound));
            }
        }
        layers.push(DenseLayer {
            weight,
            bias: vec![0.0; fan_out],
        });
        if l < config.num_layers - 1 {
            norms.push(config.use_batchnorm.then(|| BatchNorm {
                gamma: vec![1.0; fan_out],
                beta: vec![0.0; fan_out],
                running_mean: vec![0.0; fan_out],
                running_var: vec![1.0; fan_out],
            }));
        }
    }
    Ok(MlpParams {
        config: *config,
        layers,
        norms,
    })
}

impl MlpParams {
    /// Check the structural invariants: layer shapes match the config and
    /// every stored value is finite. Deserialized artifacts go through this.
    pub fn validate(&self) -> Result<(), NnError> {
        let cfg = &self.config;
        if self.layers.len() != cfg.num_layers
            || self.norms.len() != cfg.num_layers.saturating_sub(1)
        {
            return Err(NnError::InvalidConfig(format!(
                "expected {} layers, found {} (and {} norm slots)",
                cfg.num_layers,
                self.layers.len(),
                self.norms.len()
            )));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            let fan_in = if l == 0 {
                cfg.input_dim
            } else {
                cfg.hidden_units
            };
            let fan_out = if l == cfg.num_layers - 1 {
                1
            } else {
                cfg.hidden_units
            };
            let w = &layer.weight;
            if w.rows() != fan_out
                || w.cols() != fan_in
                || w.data().len() != fan_out * fan_in
                || layer.bias.len() != fan_out
            {
                return Err(NnError::InvalidConfig(format!(
                    "layer {l} has shape {}x{} (bias {}), expected {fan_out}x{fan_in}",
                    w.rows(),
                    w.cols(),
                    layer.bias.len()
                )));
            }
            if w.data().iter().chain(&layer.bias).any(|v| !v.is_finite()) {
                return Err(NnError::InvalidConfig(format!(
                    "layer {l} contains non-finite values"
                )));
            }
        }
        for (l, norm) in self.norms.iter().enumerate() {
            let Some(norm) = norm else { continue };
            let width = cfg.hidden_units;
            let vectors = [
                &norm.gamma,
                &norm.beta,
                &norm.running_mean,
                &norm.running_var,
            ];
            if vectors.iter().any(|v| v.len() != width) {
                return Err(NnError::InvalidConfig(format!(
                    "batchnorm {l} vectors do not all have width {width}"
                )));
            }
            if vectors
                .iter()
                .flat_map(|v| v.iter())
                .any(|v| !v.is_finite())
            {
                return Err(NnError::InvalidConfig(format!(
                    "batchnorm {l} contains non-finite values"
                )));
            }
        }
        Ok(())
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn num_trainable(&self) -> usize {
        let mut n = 0;
        for layer in &self.layers {
            n += layer.weight.rows() * layer.weight.cols() + layer.bias.len();
        }
        for norm in self.norms.iter().flatten() {
            n += norm.gamma.len() + norm.beta.len();
        }
        n
    }

    /// Visit every trainable scalar in the canonical flat order: per layer
    /// the weight matrix row-major then the bias, then per hidden layer the
    /// batchnorm gamma then beta.
    pub fn for_each_trainable_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        for layer in &mut self.layers {
            for v in layer.weight.data_mut() {
                f(v);
            }
            for v in &mut layer.bias {
                f(v);
            }
        }
        for norm in self.norms.iter_mut().flatten() {
            for v in &mut norm.gamma {
                f(v);
            }
            for v in &mut norm.beta {
                f(v);
            }
        }
    }

    pub fn get_flat(&self, index: usize) -> f64 {
        let mut i = 0;
        let mut found = f64::NAN;
        let mut this = self.clone();
        this.for_each_trainable_mut(|v| {
            if i == index {
                found = *v;
            }
            i += 1;
        });
        found
    }

    pub fn add_flat(&mut self, index: usize, delta: f64) {
        let mut i = 0;
        self.for_each_trainable_mut(|v| {
            if i == index {
                *v += delta;
            }
            i += 1;
        });
    }
}

/// Per-column batch statistics observed by a train-mode forward.
#[derive(Clone, Debug)]
pub struct BnBatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    /// Input to the affine (B x in).
    input: Matrix,
    /// Normalized pre-scale values, batchnorm layers only (B x out).
    xhat: Option<Matrix>,
    /// 1/sqrt(var + eps) actually used, batchnorm layers only.
    inv_std: Option<Vec<f64>>,
    /// The tensor the activation was applied to, hidden layers only.
    act_input: Option<Matrix>,
}

/// Everything a forward pass produces: outputs, the cache backward needs,
/// and (train mode) the batch statistics for a running-stat update.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub outputs: Vec<f64>,
    pub batch_stats: Vec<Option<BnBatchStats>>,
    caches: Vec<LayerCache>,
    mode: Mode,
}

impl ForwardPass {
    /// Normalized pre-gamma/beta activations of hidden layer `l`, when that
    /// layer has batchnorm.
    pub fn normalized(&self, l: usize) -> Option<&Matrix> {
        self.caches.get(l).and_then(|c| c.xhat.as_ref())
    }
}

fn affine(input: &Matrix, layer: &DenseLayer) -> Matrix {
    let b = input.rows();
    let out_dim = layer.weight.rows();
    let in_dim = layer.weight.cols();
    debug_assert_eq!(input.cols(), in_dim);
    let mut z = Matrix::zeros(b, out_dim);
    for r in 0..b {
        let x = input.row(r);
        for o in 0..out_dim {
            let w = layer.weight.row(o);
            let mut acc = layer.bias[o];
            for c in 0..in_dim {
                acc += w[c] * x[c];
            }
            z.set(r, o, acc);
        }
    }
    z
}

/// Run the network over a batch.
///
/// Train mode normalizes with the batch statistics and reports them in
/// `batch_stats`; it does not touch the running statistics — apply
/// [`update_running_stats`] for that. Eval mode normalizes with the stored
/// running statistics and is a pure function of (params, batch).
pub fn forward(params: &MlpParams, batch: &Matrix, mode: Mode) -> Result<ForwardPass, NnError> {
    if batch.rows() == 0 {
        return Err(NnError::EmptyBatch);
    }
    if batch.cols() != params.config.input_dim {
        return Err(NnError::WidthMismatch {
            found: batch.cols(),
            expected: params.config.input_dim,
        });
    }
    if mode == Mode::Train && params.config.use_batchnorm && batch.rows() < 2 {
        return Err(NnError::SingleRowBatch);
    }

    let num_layers = params.layers.len();
    let b = batch.rows();
    let mut caches = Vec::with_capacity(num_layers);
    let mut batch_stats = vec![None; params.norms.len()];
    let mut current = batch.clone();

    for l in 0..num_layers {
        let z = affine(&current, &params.layers[l]);
        if l == num_layers - 1 {
            caches.push(LayerCache {
                input: current,
                xhat: None,
                inv_std: None,
                act_input: None,
            });
            let outputs = (0..b).map(|r| z.get(r, 0)).collect();
            return Ok(ForwardPass {
                outputs,
                batch_stats,
                caches,
                mode,
            });
        }

        let out_dim = z.cols();
        let (y, xhat, inv_std) = match &params.norms[l] {
            Some(norm) => {
                let (mean, var) = match mode {
                    Mode::Train => {
                        let mut mean = vec![0.0; out_dim];
                        let mut var = vec![0.0; out_dim];
                        for j in 0..out_dim {
                            let mut s = 0.0;
                            for r in 0..b {
                                s += z.get(r, j);
                            }
                            let m = s / b as f64;
                            let mut v = 0.0;
                            for r in 0..b {
                                let d = z.get(r, j) - m;
                                v += d * d;
                            }
                            mean[j] = m;
                            var[j] = v / b as f64;
                        }
                        batch_stats[l] = Some(BnBatchStats {
                            mean: mean.clone(),
                            var: var.clone(),
                        });
                        (mean, var)
                    }
                    Mode::Eval => (norm.running_mean.clone(), norm.running_var.clone()),
                };
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
                let mut xhat = Matrix::zeros(b, out_dim);
                let mut y = Matrix::zeros(b, out_dim);
                for r in 0..b {
                    for j in 0..out_dim {
                        let xh = (z.get(r, j) - mean[j]) * inv_std[j];
                        xhat.set(r, j, xh);
                        y.set(r, j, norm.gamma[j] * xh + norm.beta[j]);
                    }
                }
                (y, Some(xhat), Some(inv_std))
            }
            None => (z, None, None),
        };

        let mut activated = Matrix::zeros(b, out_dim);
        for r in 0..b {
            for j in 0..out_dim {
                activated.set(r, j, y.get(r, j).max(0.0));
            }
        }
        caches.push(LayerCache {
            input: current,
            xhat,
            inv_std,
            act_input: Some(y),
        });
        current = activated;
    }
    unreachable!("loop returns at the final layer");
}

/// Fold train-mode batch statistics into the running statistics.
pub fn update_running_stats(params: &mut MlpParams, pass: &ForwardPass) {
    for (norm, stats) in params.norms.iter_mut().zip(&pass.batch_stats) {
        if let (Some(norm), Some(stats)) = (norm.as_mut(), stats.as_ref()) {
            for j in 0..norm.running_mean.len() {
                norm.running_mean[j] =
                    BN_MOMENTUM * norm.running_mean[j] + (1.0 - BN_MOMENTUM) * stats.mean[j];
                norm.running_var[j] =
                    BN_MOMENTUM * norm.running_var[j] + (1.0 - BN_MOMENTUM) * stats.var[j];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logistic,
    Squared,
}

/// Mean loss over the batch and its gradient with respect to each output.
pub fn loss(outputs: &[f64], targets: &[f64], kind: LossKind) -> Result<(f64, Vec<f64>), NnError> {
    if outputs.len() != targets.len() {
        return Err(NnError::TargetMismatch {
            outputs: outputs.len(),
            targets: targets.len(),
        });
    }
    if outputs.is_empty() {
        return Err(NnError::EmptyBatch);
    }
    let b = outputs.len() as f64;
    match kind {
        LossKind::Logistic => {
            let mut total = 0.0;
            let mut grads = Vec::with_capacity(outputs.len());
            for (&o, &z) in outputs.iter().zip(targets) {
                if !(z == 0.0 || z == 1.0) {
                    return Err(NnError::NonBinaryTarget(z));
                }
                let sign = 2.0 * z - 1.0;
                let m = sign * o;
                // log(1 + exp(-m)) and sigmoid(-m), stable in both tails.
                let (l, s) = if m >= 0.0 {
                    let e = (-m).exp();
                    (e.ln_1p(), e / (1.0 + e))
                } else {
                    let e = m.exp();
                    (-m + e.ln_1p(), 1.0 / (1.0 + e))
                };
                total += l;
                grads.push(-sign * s / b);
            }
            Ok((total / b, grads))
        }
        LossKind::Squared => {
            let mut total = 0.0;
            let mut grads = Vec::with_capacity(outputs.len());
            for (&o, &t) in outputs.iter().zip(targets) {
                let d = o - t;
                total += d * d;
                grads.push(2.0 * d / b);
            }
            Ok((total / b, grads))
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
    pub norms: Vec<Option<BnGrads>>,
}

impl MlpGrads {
    /// Flatten in the same canonical order as
    /// [`MlpParams::for_each_trainable_mut`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.weight.data());
            out.extend_from_slice(&layer.bias);
        }
        for norm in self.norms.iter().flatten() {
            out.extend_from_slice(&norm.gamma);
            out.extend_from_slice(&norm.beta);
        }
        out
    }
}

/// Exact gradients of the (mean) loss with respect to every trainable
/// parameter, including batchnorm gamma/beta and, in train mode, the path
/// through the batch statistics.
pub fn backward(
    params: &MlpParams,
    pass: &ForwardPass,
    output_grads: &[f64],
) -> Result<MlpGrads, NnError> {
    let num_layers = params.layers.len();
    if pass.caches.len() != num_layers {
        return Err(NnError::CacheMismatch);
    }
    let b = pass.caches[0].input.rows();
    if output_grads.len() != b {
        return Err(NnError::CacheMismatch);
    }

    let mut layer_grads: Vec<Option<LayerGrads>> = (0..num_layers).map(|_| None).collect();
    let mut norm_grads: Vec<Option<BnGrads>> = (0..params.norms.len()).map(|_| None).collect();

    // Gradient with respect to the current layer's affine output.
    let mut delta = Matrix::zeros(b, 1);
    for r in 0..b {
        delta.set(r, 0, output_grads[r]);
    }

    for l in (0..num_layers).rev() {
        let cache = &pass.caches[l];
        let input = &cache.input;
        let out_dim = params.layers[l].weight.rows();
        let in_dim = params.layers[l].weight.cols();
        if input.rows() != b || input.cols() != in_dim || delta.cols() != out_dim {
            return Err(NnError::CacheMismatch);
        }

        // dW = delta^T . input ; db = column sums of delta.
        let mut dw = Matrix::zeros(out_dim, in_dim);
        let mut db = vec![0.0; out_dim];
        for r in 0..b {
            let d = delta.row(r);
            let x = input.row(r);
            for o in 0..out_dim {
                let g = d[o];
                db[o] += g;
                let wrow = dw.row_mut(o);
                for c in 0..in_dim {
                    wrow[c] += g * x[c];
                }
            }
        }
        layer_grads[l] = Some(LayerGrads {
            weight: dw,
            bias: db,
        });

        if l == 0 {
            break;
        }

        // d(activation output of layer l-1) = delta . W_l
        let prev_dim = in_dim;
        let mut d_act = Matrix::zeros(b, prev_dim);
        for r in 0..b {
            let d = delta.row(r);
            let out_row = d_act.row_mut(r);
            for o in 0..out_dim {
                let g = d[o];
                let w = params.layers[l].weight.row(o);
                for c in 0..prev_dim {
                    out_row[c] += g * w[c];
                }
            }
        }

        // Through the rectifier of layer l-1.
        let prev_cache = &pass.caches[l - 1];
        let act_input = prev_cache
            .act_input
            .as_ref()
            .ok_or(NnError::CacheMismatch)?;
        let mut dy = d_act;
        for r in 0..b {
            for c in 0..prev_dim {
                if act_input.get(r, c) <= 0.0 {
                    dy.set(r, c, 0.0);
                }
            }
        }

        // Through batchnorm of layer l-1, if present.
        delta = match &params.norms[l - 1] {
            Some(norm) => {
                let xhat = prev_cache.xhat.as_ref().ok_or(NnError::CacheMismatch)?;
                let inv_std = prev_cache.inv_std.as_ref().ok_or(NnError::CacheMismatch)?;
                let mut dgamma = vec![0.0; prev_dim];
                let mut dbeta = vec![0.0; prev_dim];
                let mut dz = Matrix::zeros(b, prev_dim);
                match pass.mode {
                    Mode::Train => {
                        for j in 0..prev_dim {
                            let mut sum_dxhat = 0.0;
                            let mut sum_dxhat_xhat = 0.0;
                            for r in 0..b {
                                let g = dy.get(r, j);
                                let xh = xhat.get(r, j);
                                dgamma[j] += g * xh;
                                dbeta[j] += g;
                                let dxh = g * norm.gamma[j];
                                sum_dxhat += dxh;
                                sum_dxhat_xhat += dxh * xh;
                            }
                            let bf = b as f64;
                            for r in 0..b {
                                let dxh = dy.get(r, j) * norm.gamma[j];
                                let xh = xhat.get(r, j);
                                dz.set(
                                    r,
                                    j,
                                    inv_std[j] * (dxh - (sum_dxhat + xh * sum_dxhat_xhat) / bf),
                                );
                            }
                        }
                    }
                    Mode::Eval => {
                        for j in 0..prev_dim {
                            for r in 0..b {
                                let g = dy.get(r, j);
                                dgamma[j] += g * xhat.get(r, j);
                                dbeta[j] += g;
                                dz.set(r, j, g * norm.gamma[j] * inv_std[j]);
                            }
                        }
                    }
                }
                norm_grads[l - 1] = Some(BnGrads {
                    gamma: dgamma,
                    beta: dbeta,
                });
                dz
            }
            None => dy,
        };
    }

    Ok(MlpGrads {
        layers: layer_grads.into_iter().map(Option::unwrap).collect(),
        norms: norm_grads,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam state, with moments aligned to the canonical flat
/// parameter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub hyper: AdamHyper,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(hyper: AdamHyper, params: &MlpParams) -> Self {
        let n = params.num_trainable();
        Self {
            hyper,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &MlpGrads,
    state: &mut AdamState,
) -> Result<(), NnError> {
    let flat = grads.flatten();
    if flat.len() != params.num_trainable() {
        return Err(NnError::GradShapeMismatch);
    }
    if flat.len() != state.m.len() {
        return Err(NnError::StateMismatch {
            state: state.m.len(),
            params: params.num_trainable(),
        });
    }
    if let Some(bad) = flat.iter().position(|g| !g.is_finite()) {
        return Err(NnError::NonFiniteGradient(bad));
    }

    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let mut i = 0;
    params.for_each_trainable_mut(|p| {
        let g = flat[i];
        state.m[i] = h.beta1 * state.m[i] + (1.0 - h.beta1) * g;
        state.v[i] = h.beta2 * state.v[i] + (1.0 - h.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        *p -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        i += 1;
    });
    Ok(())
}

/// Loss of the network on a batch without keeping gradients; the evaluation
/// the finite-difference checker and the training loop's validation metric
/// both use.
pub fn loss_only(
    params: &MlpParams,
    batch: &Matrix,
    targets: &[f64],
    kind: LossKind,
    mode: Mode,
) -> Result<f64, NnError> {
    let pass = forward(params, batch, mode)?;
    Ok(loss(&pass.outputs, targets, kind)?.0)
}

/// Worst relative error between analytic gradients and central finite
/// differences over at most `max_samples` parameters (all of them when the
/// model is small enough). The relative error of gradient pair (a, n) is
/// |a - n| / max(|a|, |n|, 1e-6).
pub fn grad_check(
    params: &MlpParams,
    batch: &Matrix,
    targets: &[f64],
    kind: LossKind,
    mode: Mode,
    max_samples: usize,
    seed: u64,
) -> Result<f64, NnError> {
    let pass = forward(params, batch, mode)?;
    let (_, dout) = loss(&pass.outputs, targets, kind)?;
    let analytic = backward(params, &pass, &dout)?.flatten();

    let total = analytic.len();
    let mut indices: Vec<usize> = (0..total).collect();
    if total > max_samples {
        let mut rng = seeded_rng(seed);
        shuffle(&mut rng, &mut indices);
        indices.truncate(max_samples);
    }

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &idx in &indices {
        let mut plus = params.clone();
        plus.add_flat(idx, h);
        let lp = loss_only(&plus, batch, targets, kind, mode)?;
        let mut minus = params.clone();
        minus.add_flat(idx, -h);
        let lm = loss_only(&minus, batch, targets, kind, mode)?;
        let numeric = (lp - lm) / (2.0 * h);
        let err = rel_error(analytic[idx], numeric);
        if err > worst {
            worst = err;
        }
    }
    Ok(worst)
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(input_dim: usize, num_layers: usize, hidden: usize, bn: bool) -> MlpConfig {
        MlpConfig {
            input_dim,
            num_layers,
            hidden_units: hidden,
            use_batchnorm: bn,
            output: OutputKind::Scalar,
            seed: 42,
        }
    }

    fn random_batch(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                m.set(r, c, crate::rng::uniform(rng, -2.0, 2.0));
            }
        }
        m
    }

    fn random_targets(rng: &mut rand_chacha::ChaCha8Rng, n: usize, binary: bool) -> Vec<f64> {
        (0..n)
            .map(|_| {
                if binary {
                    if crate::rng::u01(rng) < 0.5 {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    crate::rng::uniform(rng, -1.0, 1.0)
                }
            })
            .collect()
    }

    /// Move parameters off the zero-bias initialization. Freshly initialized
    /// nets have pre-activations sitting exactly on the rectifier kink
    /// (dead layer + zero bias = exact 0), where finite differences are
    /// meaningless; gradient checks want a generic point.
    fn jitter(params: &mut MlpParams, scale: f64, seed: u64) {
        let mut rng = crate::rng::seeded_rng(seed);
        params.for_each_trainable_mut(|v| {
            *v += crate::rng::uniform(&mut rng, -scale, scale);
        });
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = config(22, 5, 32, true);
        let a = init(&cfg).unwrap();
        let b = init(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers.len(), 5);
        assert_eq!(a.norms.len(), 4);
        assert_eq!(a.layers[0].weight.rows(), 32);
        assert_eq!(a.layers[0].weight.cols(), 22);
        assert_eq!(a.layers[4].weight.rows(), 1);
        for layer in &a.layers {
            assert!(layer.bias.iter().all(|&v| v == 0.0));
        }
        for norm in a.norms.iter().flatten() {
            assert!(norm.gamma.iter().all(|&v| v == 1.0));
            assert!(norm.beta.iter().all(|&v| v == 0.0));
            assert!(norm.running_mean.iter().all(|&v| v == 0.0));
            assert!(norm.running_var.iter().all(|&v| v == 1.0));
        }

        let c = init(&MlpConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_weight_std_matches_fan_in_scale() {
        // 10_000+ samples from the first layer of a wide net.
        let cfg = config(100, 2, 120, false);
        let p = init(&cfg).unwrap();
        let w = p.layers[0].weight.data();
        assert!(w.len() >= 10_000);
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let var = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let expected = 1.0 / (100.0f64).sqrt();
        assert!(
            (var.sqrt() - expected).abs() / expected < 0.05,
            "std {} vs {}",
            var.sqrt(),
            expected
        );
    }

    #[test]
    fn zero_weights_output_final_bias() {
        let cfg = config(3, 2, 4, false);
        let mut p = init(&cfg).unwrap();
        for layer in &mut p.layers {
            for v in layer.weight.data_mut() {
                *v = 0.0;
            }
        }
        p.layers[1].bias[0] = 0.75;
        let batch = Matrix::from_rows(&[vec![1.0, -5.0, 2.0], vec![0.0, 0.0, 9.0]]);
        let pass = forward(&p, &batch, Mode::Eval).unwrap();
        assert_eq!(pass.outputs, vec![0.75, 0.75]);
    }

    #[test]
    fn eval_batchnorm_with_unit_running_stats_is_identity() {
        let cfg = config(2, 2, 3, true);
        let with_bn = init(&cfg).unwrap();
        let without = MlpParams {
            config: MlpConfig {
                use_batchnorm: false,
                ..cfg
            },
            layers: with_bn.layers.clone(),
            norms: vec![None],
        };
        let mut rng = crate::rng::seeded_rng(1);
        let batch = random_batch(&mut rng, 4, 2);
        let a = forward(&with_bn, &batch, Mode::Eval).unwrap();
        let b = forward(&without, &batch, Mode::Eval).unwrap();
        for (x, y) in a.outputs.iter().zip(&b.outputs) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn forward_matches_dense_oracle() {
        // One hidden layer, no batchnorm: y = W2 relu(W1 x + b1) + b2,
        // recomputed long-hand.
        let cfg = config(3, 2, 4, false);
        let p = init(&cfg).unwrap();
        let mut rng = crate::rng::seeded_rng(2);
        let batch = random_batch(&mut rng, 5, 3);
        let pass = forward(&p, &batch, Mode::Eval).unwrap();

        for r in 0..5 {
            let x = batch.row(r);
            let mut hidden = vec![0.0; 4];
            for o in 0..4 {
                let mut acc = p.layers[0].bias[o];
                for c in 0..3 {
                    acc += p.layers[0].weight.get(o, c) * x[c];
                }
                hidden[o] = acc.max(0.0);
            }
            let mut out = p.layers[1].bias[0];
            for c in 0..4 {
                out += p.layers[1].weight.get(0, c) * hidden[c];
            }
            assert!((pass.outputs[r] - out).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_forward_is_bitwise_repeatable() {
        let cfg = config(6, 3, 8, true);
        let p = init(&cfg).unwrap();
        let mut rng = crate::rng::seeded_rng(3);
        let batch = random_batch(&mut rng, 7, 6);
        let a = forward(&p, &batch, Mode::Eval).unwrap();
        let b = forward(&p, &batch, Mode::Eval).unwrap();
        assert_eq!(a.outputs, b.outputs);
    }

    #[test]
    fn train_mode_single_row_with_batchnorm_rejected() {
        let cfg = config(2, 2, 3, true);
        let p = init(&cfg).unwrap();
        let batch = Matrix::from_rows(&[vec![1.0, 2.0]]);
        assert!(matches!(
            forward(&p, &batch, Mode::Train).unwrap_err(),
            NnError::SingleRowBatch
        ));
        // Fine without batchnorm, and fine in eval mode.
        assert!(forward(&p, &batch, Mode::Eval).is_ok());
    }

    #[test]
    fn width_mismatch_rejected() {
        let cfg = config(4, 1, 1, false);
        let p = init(&cfg).unwrap();
        let batch = Matrix::from_rows(&[vec![1.0, 2.0]]);
        assert!(matches!(
            forward(&p, &batch, Mode::Eval).unwrap_err(),
            NnError::WidthMismatch {
                found: 2,
                expected: 4
            }
        ));
    }

    #[test]
    fn train_batchnorm_standardizes_columns() {
        let cfg = config(5, 3, 8, true);
        let p = init(&cfg).unwrap();
        let mut rng = crate::rng::seeded_rng(4);
        let batch = random_batch(&mut rng, 16, 5);
        let pass = forward(&p, &batch, Mode::Train).unwrap();
        for l in 0..2 {
            let xhat = pass.normalized(l).expect("batchnorm layer");
            for j in 0..xhat.cols() {
                let mut mean = 0.0;
                for r in 0..xhat.rows() {
                    mean += xhat.get(r, j);
                }
                mean /= xhat.rows() as f64;
                let mut var = 0.0;
                for r in 0..xhat.rows() {
                    let d = xhat.get(r, j) - mean;
                    var += d * d;
                }
                var /= xhat.rows() as f64;
                assert!(mean.abs() <= 1e-6, "layer {l} col {j} mean {mean}");
                assert!((var - 1.0).abs() <= 1e-6, "layer {l} col {j} var {var}");
            }
        }
    }

    #[test]
    fn logistic_loss_at_zero_logit_is_ln2() {
        let (l, _) = loss(&[0.0], &[1.0], LossKind::Logistic).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let (l, _) = loss(&[0.0], &[0.0], LossKind::Logistic).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn squared_loss_zero_iff_exact() {
        let (l, _) = loss(&[0.3, -1.0], &[0.3, -1.0], LossKind::Squared).unwrap();
        assert_eq!(l, 0.0);
        let (l, _) = loss(&[0.5], &[0.0], LossKind::Squared).unwrap();
        assert!(l > 0.0);
    }

    #[test]
    fn logistic_rejects_non_binary_targets() {
        assert!(matches!(
            loss(&[0.0], &[0.5], LossKind::Logistic).unwrap_err(),
            NnError::NonBinaryTarget(_)
        ));
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = crate::rng::seeded_rng(6);
        for kind in [LossKind::Logistic, LossKind::Squared] {
            let n = 8;
            let outputs: Vec<f64> = (0..n)
                .map(|_| crate::rng::uniform(&mut rng, -2.0, 2.0))
                .collect();
            let targets = random_targets(&mut rng, n, kind == LossKind::Logistic);
            let (_, grads) = loss(&outputs, &targets, kind).unwrap();
            let h = 1e-6;
            for i in 0..n {
                let mut plus = outputs.clone();
                plus[i] += h;
                let mut minus = outputs.clone();
                minus[i] -= h;
                let lp = loss(&plus, &targets, kind).unwrap().0;
                let lm = loss(&minus, &targets, kind).unwrap().0;
                let numeric = (lp - lm) / (2.0 * h);
                let denom = grads[i].abs().max(numeric.abs()).max(1e-6);
                assert!(
                    ((grads[i] - numeric) / denom).abs() < 1e-6,
                    "kind {kind:?} output {i}"
                );
            }
        }
    }

    #[test]
    fn zero_output_gradient_means_zero_parameter_gradients() {
        let cfg = config(4, 3, 5, true);
        let p = init(&cfg).unwrap();
        let mut rng = crate::rng::seeded_rng(7);
        let batch = random_batch(&mut rng, 6, 4);
        let pass = forward(&p, &batch, Mode::Train).unwrap();
        let grads = backward(&p, &pass, &[0.0; 6]).unwrap();
        assert!(grads.flatten().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn duplicated_rows_leave_mean_gradients_unchanged() {
        let cfg = config(3, 2, 4, true);
        let p = init(&cfg).unwrap();
        let mut rng = crate::rng::seeded_rng(8);
        let batch = random_batch(&mut rng, 5, 3);
        let targets = random_targets(&mut rng, 5, false);

        let mut doubled_rows: Vec<Vec<f64>> = Vec::new();
        let mut doubled_targets = Vec::new();
        for r in 0..5 {
            doubled_rows.push(batch.row(r).to_vec());
            doubled_targets.push(targets[r]);
        }
        for r in 0..5 {
            doubled_rows.push(batch.row(r).to_vec());
            doubled_targets.push(targets[r]);
        }
        let doubled = Matrix::from_rows(&doubled_rows);

        let g1 = {
            let pass = forward(&p, &batch, Mode::Train).unwrap();
            let (_, dout) = loss(&pass.outputs, &targets, LossKind::Squared).unwrap();
            backward(&p, &pass, &dout).unwrap().flatten()
        };
        let g2 = {
            let pass = forward(&p, &doubled, Mode::Train).unwrap();
            let (_, dout) = loss(&pass.outputs, &doubled_targets, LossKind::Squared).unwrap();
            backward(&p, &pass, &dout).unwrap().flatten()
        };
        for (a, b) in g1.iter().zip(&g2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences_all_modes() {
        let mut rng = crate::rng::seeded_rng(9);
        for bn in [false, true] {
            for kind in [LossKind::Logistic, LossKind::Squared] {
                for mode in [Mode::Train, Mode::Eval] {
                    let cfg = config(5, 3, 6, bn);
                    let mut p = init(&cfg).unwrap();
                    jitter(&mut p, 0.05, 99);
                    let batch = random_batch(&mut rng, 8, 5);
                    let targets = random_targets(&mut rng, 8, kind == LossKind::Logistic);
                    let worst =
                        grad_check(&p, &batch, &targets, kind, mode, usize::MAX, 0).unwrap();
                    assert!(
                        worst <= 1e-4,
                        "bn={bn} kind={kind:?} mode={mode:?} worst={worst}"
                    );
                }
            }
        }
    }

    #[test]
    fn linear_model_squared_loss_grad_check_is_tight() {
        let cfg = config(4, 1, 1, false);
        let p = init(&cfg).unwrap();
        let mut rng = crate::rng::seeded_rng(10);
        let batch = random_batch(&mut rng, 10, 4);
        let targets = random_targets(&mut rng, 10, false);
        let worst = grad_check(
            &p,
            &batch,
            &targets,
            LossKind::Squared,
            Mode::Eval,
            usize::MAX,
            0,
        )
        .unwrap();
        assert!(worst <= 1e-8, "worst={worst}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        let cfg = config(4, 2, 5, true);
        let p = init(&cfg).unwrap();
        let mut rng = crate::rng::seeded_rng(11);
        let batch = random_batch(&mut rng, 6, 4);
        let targets = random_targets(&mut rng, 6, false);

        let pass = forward(&p, &batch, Mode::Train).unwrap();
        let (_, dout) = loss(&pass.outputs, &targets, LossKind::Squared).unwrap();
        let mut analytic = backward(&p, &pass, &dout).unwrap().flatten();
        analytic[3] += 1.0; // deliberate corruption

        let h = 1e-5;
        let mut plus = p.clone();
        plus.add_flat(3, h);
        let mut minus = p.clone();
        minus.add_flat(3, -h);
        let lp = loss_only(&plus, &batch, &targets, LossKind::Squared, Mode::Train).unwrap();
        let lm = loss_only(&minus, &batch, &targets, LossKind::Squared, Mode::Train).unwrap();
        let numeric = (lp - lm) / (2.0 * h);
        assert!(rel_error(analytic[3], numeric) > 1e-2);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = config(3, 2, 4, true);
        let mut p = init(&cfg).unwrap();
        let before = p.clone();
        let zero = MlpGrads {
            layers: p
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Matrix::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
            norms: p
                .norms
                .iter()
                .map(|n| {
                    n.as_ref().map(|n| BnGrads {
                        gamma: vec![0.0; n.gamma.len()],
                        beta: vec![0.0; n.beta.len()],
                    })
                })
                .collect(),
        };
        let mut state = AdamState::new(AdamHyper::default(), &p);
        adam_step(&mut p, &zero, &mut state).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_single_step_matches_hand_calculation() {
        // Scalar parameter at 0, gradient 1, step 1:
        // m_hat = 1, v_hat = 1, delta = -lr / (1 + eps).
        let cfg = MlpConfig {
            input_dim: 1,
            num_layers: 1,
            hidden_units: 1,
            use_batchnorm: false,
            output: OutputKind::Scalar,
            seed: 0,
        };
        let mut p = init(&cfg).unwrap();
        for v in p.layers[0].weight.data_mut() {
            *v = 0.0;
        }
        let grads = MlpGrads {
            layers: vec![LayerGrads {
                weight: Matrix::from_rows(&[vec![1.0]]),
                bias: vec![0.0],
            }],
            norms: vec![],
        };
        let hyper = AdamHyper::default();
        let mut state = AdamState::new(hyper, &p);
        adam_step(&mut p, &grads, &mut state).unwrap();
        let expected = -hyper.lr / (1.0 + hyper.eps);
        assert!((p.layers[0].weight.get(0, 0) - expected).abs() < 1e-12 * hyper.lr);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Single weight w, loss (w*1 - 3)^2 via the network itself.
        let cfg = MlpConfig {
            input_dim: 1,
            num_layers: 1,
            hidden_units: 1,
            use_batchnorm: false,
            output: OutputKind::Scalar,
            seed: 0,
        };
        let mut p = init(&cfg).unwrap();
        let batch = Matrix::from_rows(&[vec![1.0]]);
        let targets = vec![3.0];
        let hyper = AdamHyper {
            lr: 0.1,
            ..AdamHyper::default()
        };
        let mut state = AdamState::new(hyper, &p);
        let mut last = loss_only(&p, &batch, &targets, LossKind::Squared, Mode::Eval).unwrap();
        for _ in 0..3 {
            let pass = forward(&p, &batch, Mode::Eval).unwrap();
            let (_, dout) = loss(&pass.outputs, &targets, LossKind::Squared).unwrap();
            let grads = backward(&p, &pass, &dout).unwrap();
            adam_step(&mut p, &grads, &mut state).unwrap();
            let now = loss_only(&p, &batch, &targets, LossKind::Squared, Mode::Eval).unwrap();
            assert!(now < last, "loss did not decrease: {now} >= {last}");
            last = now;
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let cfg = config(2, 1, 1, false);
        let mut p = init(&cfg).unwrap();
        let grads = MlpGrads {
            layers: vec![LayerGrads {
                weight: Matrix::from_rows(&[vec![f64::NAN, 0.0]]),
                bias: vec![0.0],
            }],
            norms: vec![],
        };
        let mut state = AdamState::new(AdamHyper::default(), &p);
        assert!(matches!(
            adam_step(&mut p, &grads, &mut state).unwrap_err(),
            NnError::NonFiniteGradient(0)
        ));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn running_stats_update_blends_batch_stats() {
        let cfg = config(3, 2, 4, true);
        let mut p = init(&cfg).unwrap();
        let mut rng = crate::rng::seeded_rng(12);
        let batch = random_batch(&mut rng, 8, 3);
        let pass = forward(&p, &batch, Mode::Train).unwrap();
        let stats = pass.batch_stats[0].clone().unwrap();
        update_running_stats(&mut p, &pass);
        let norm = p.norms[0].as_ref().unwrap();
        for j in 0..4 {
            let want_mean = 0.9 * 0.0 + 0.1 * stats.mean[j];
            let want_var = 0.9 * 1.0 + 0.1 * stats.var[j];
            assert!((norm.running_mean[j] - want_mean).abs() < 1e-15);
            assert!((norm.running_var[j] - want_var).abs() < 1e-15);
        }
    }

    #[test]
    fn flat_order_is_consistent_between_params_and_grads() {
        let cfg = config(3, 3, 4, true);
        let p = init(&cfg).unwrap();
        let mut rng = crate::rng::seeded_rng(13);
        let batch = random_batch(&mut rng, 6, 3);
        let targets = random_targets(&mut rng, 6, false);
        let pass = forward(&p, &batch, Mode::Train).unwrap();
        let (_, dout) = loss(&pass.outputs, &targets, LossKind::Squared).unwrap();
        let grads = backward(&p, &pass, &dout).unwrap();
        assert_eq!(grads.flatten().len(), p.num_trainable());

        // Perturbing flat slot k moves exactly the scalar that get_flat(k)
        // reads back.
        let mut q = p.clone();
        let idx = p.num_trainable() - 1;
        let before = q.get_flat(idx);
        q.add_flat(idx, 0.5);
        assert_eq!(q.get_flat(idx), before + 0.5);
    }
}
