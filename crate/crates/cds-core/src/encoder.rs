//! The feature extractor: a small MLP whose output is L2-normalized, with a
//! hand-derived backward pass and SGD with momentum and weight decay.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CdsError, Result};
use crate::math;
use crate::numerics::{l2_normalize, l2_normalize_backward, FeatureVector};

/// Row-major matrix, `rows` = output dimension, `cols` = input dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(CdsError::DimensionMismatch {
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: r,
            cols: c,
            data,
        })
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    /// y = W x + b
    pub fn affine(&self, x: &[f64], b: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(b.len(), self.rows);
        let mut y = b.to_vec();
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            y[r] += crate::numerics::dot(row, x);
        }
        y
    }

    /// Wᵀ y
    pub fn transpose_vec(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * y[r];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Mat,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// The encoder F(·): a stack of affine layers with a terminal L2
/// normalization, so the forward output always has unit norm.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    layers: Vec<Layer>,
}

impl EncoderModel {
    /// Builds a model from explicit layers, checking that dimensions chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(CdsError::InvalidConfig(alloc::string::String::from(
                "encoder needs at least one layer",
            )));
        }
        for w in layers.windows(2) {
            if w[1].weight.cols != w[0].weight.rows {
                return Err(CdsError::DimensionMismatch {
                    expected: w[0].weight.rows,
                    got: w[1].weight.cols,
                });
            }
        }
        for l in &layers {
            if l.bias.len() != l.weight.rows {
                return Err(CdsError::DimensionMismatch {
                    expected: l.weight.rows,
                    got: l.bias.len(),
                });
            }
        }
        Ok(Self { layers })
    }

    /// Fan-based uniform init: weights in ±√(6/(fan_in+fan_out)), biases zero.
    /// Hidden layers use relu, the final layer is identity (the terminal
    /// normalization is the output stage).
    pub fn init(
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(output_dim);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for (i, pair) in dims.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            let mut weight = Mat::zeros(fan_out, fan_in);
            for w in weight.data.iter_mut() {
                *w = rng.random_range(-bound..bound);
            }
            let activation = if i + 2 == dims.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            layers.push(Layer {
                weight,
                bias: vec![0.0; fan_out],
                activation,
            });
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.rows
    }
}

/// Activations recorded by [`encoder_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    /// Pre-activation z = W a + b per layer.
    pre_acts: Vec<Vec<f64>>,
    /// Post-activation a = act(z) per layer; the last entry is the
    /// pre-normalization output.
    post_acts: Vec<Vec<f64>>,
}

fn apply_activation(act: Activation, z: &[f64]) -> Vec<f64> {
    match act {
        Activation::Relu => z.iter().map(|&v| v.max(0.0)).collect(),
        Activation::Identity => z.to_vec(),
    }
}

/// Runs the MLP and normalizes the output: f = l2_normalize(MLP(x)).
pub fn encoder_forward(model: &EncoderModel, x: &[f64]) -> Result<(FeatureVector, ForwardCache)> {
    if x.len() != model.input_dim() {
        return Err(CdsError::DimensionMismatch {
            expected: model.input_dim(),
            got: x.len(),
        });
    }
    let mut pre_acts = Vec::with_capacity(model.layers.len());
    let mut post_acts = Vec::with_capacity(model.layers.len());
    let mut a = x.to_vec();
    for layer in &model.layers {
        let z = layer.weight.affine(&a, &layer.bias);
        a = apply_activation(layer.activation, &z);
        pre_acts.push(z);
        post_acts.push(a.clone());
    }
    let f = l2_normalize(&a)?;
    Ok((
        f,
        ForwardCache {
            input: x.to_vec(),
            pre_acts,
            post_acts,
        },
    ))
}

/// Per-layer parameter gradients, shaped like the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<LayerGrads>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Mat,
    pub bias: Vec<f64>,
}

impl ParamGrads {
    pub fn zeros_like(model: &EncoderModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    weight: Mat::zeros(l.weight.rows, l.weight.cols),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn accumulate(&mut self, other: &ParamGrads) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data.iter_mut().zip(&b.weight.data) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }
}

/// Exact reverse-mode gradients of the forward map, including the backward
/// pass of the terminal normalization. `upstream` is the gradient w.r.t. the
/// normalized feature f.
pub fn encoder_backward(
    model: &EncoderModel,
    cache: &ForwardCache,
    upstream: &[f64],
) -> Result<(ParamGrads, Vec<f64>)> {
    if cache.pre_acts.len() != model.layers.len()
        || cache
            .pre_acts
            .iter()
            .zip(&model.layers)
            .any(|(z, l)| z.len() != l.weight.rows)
        || cache.input.len() != model.input_dim()
    {
        return Err(CdsError::CacheMismatch);
    }
    if upstream.len() != model.output_dim() {
        return Err(CdsError::DimensionMismatch {
            expected: model.output_dim(),
            got: upstream.len(),
        });
    }

    let pre_norm = cache.post_acts.last().unwrap();
    // Gradient w.r.t. the pre-normalization output.
    let mut d_post = l2_normalize_backward(pre_norm, upstream)?;

    let mut grads = ParamGrads::zeros_like(model);
    for (l, layer) in model.layers.iter().enumerate().rev() {
        let z = &cache.pre_acts[l];
        let delta: Vec<f64> = match layer.activation {
            Activation::Relu => d_post
                .iter()
                .zip(z)
                .map(|(&d, &zi)| if zi > 0.0 { d } else { 0.0 })
                .collect(),
            Activation::Identity => d_post.clone(),
        };
        let prev: &[f64] = if l == 0 {
            &cache.input
        } else {
            &cache.post_acts[l - 1]
        };
        let g = &mut grads.layers[l];
        for (r, &dr) in delta.iter().enumerate() {
            let row = &mut g.weight.data[r * prev.len()..(r + 1) * prev.len()];
            for (w, &p) in row.iter_mut().zip(prev) {
                *w += dr * p;
            }
        }
        g.bias.copy_from_slice(&delta);
        d_post = layer.weight.transpose_vec(&delta);
    }
    Ok((grads, d_post))
}

/// SGD with momentum; weight decay is applied to weights only, not biases.
#[derive(Debug, Clone)]
pub struct SgdOptimizer {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<LayerGrads>,
}

impl SgdOptimizer {
    pub fn new(model: &EncoderModel, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: ParamGrads::zeros_like(model).layers,
        }
    }

    pub fn velocity(&self) -> &[LayerGrads] {
        &self.velocity
    }

    /// Restores persisted velocity buffers; shapes must mirror the model's.
    pub fn set_velocity(&mut self, velocity: Vec<LayerGrads>) -> Result<()> {
        if velocity.len() != self.velocity.len()
            || velocity
                .iter()
                .zip(&self.velocity)
                .any(|(a, b)| a.weight.data.len() != b.weight.data.len()
                    || a.bias.len() != b.bias.len())
        {
            return Err(CdsError::DimensionMismatch {
                expected: self.velocity.len(),
                got: velocity.len(),
            });
        }
        self.velocity = velocity;
        Ok(())
    }
}

/// One parameter block: g ← grad (+ wd·w for weights); v ← μ·v + g; p ← p − lr·v.
#[allow(clippy::too_many_arguments)]
pub fn sgd_update_block(
    weight: &mut Mat,
    bias: &mut [f64],
    vel_w: &mut Mat,
    vel_b: &mut [f64],
    grad_w: &Mat,
    grad_b: &[f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    for ((w, v), g) in weight
        .data
        .iter_mut()
        .zip(vel_w.data.iter_mut())
        .zip(&grad_w.data)
    {
        let g = g + weight_decay * *w;
        *v = momentum * *v + g;
        *w -= lr * *v;
    }
    for ((b, v), g) in bias.iter_mut().zip(vel_b.iter_mut()).zip(grad_b) {
        *v = momentum * *v + g;
        *b -= lr * *v;
    }
}

/// Applies one optimizer step to every layer of the model.
pub fn sgd_step(
    model: &mut EncoderModel,
    opt: &mut SgdOptimizer,
    grads: &ParamGrads,
) -> Result<()> {
    if grads.layers.len() != model.layers.len() {
        return Err(CdsError::DimensionMismatch {
            expected: model.layers.len(),
            got: grads.layers.len(),
        });
    }
    for ((layer, vel), grad) in model
        .layers
        .iter_mut()
        .zip(opt.velocity.iter_mut())
        .zip(&grads.layers)
    {
        if grad.weight.data.len() != layer.weight.data.len() {
            return Err(CdsError::DimensionMismatch {
                expected: layer.weight.data.len(),
                got: grad.weight.data.len(),
            });
        }
        sgd_update_block(
            &mut layer.weight,
            &mut layer.bias,
            &mut vel.weight,
            &mut vel.bias,
            &grad.weight,
            &grad.bias,
            opt.lr,
            opt.momentum,
            opt.weight_decay,
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;
    use rand::SeedableRng;

    fn identity_2x2() -> EncoderModel {
        EncoderModel::from_layers(vec![Layer {
            weight: Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            bias: vec![0.0, 0.0],
            activation: Activation::Identity,
        }])
        .unwrap()
    }

    #[test]
    fn identity_layer_reduces_to_normalization() {
        let (f, _) = encoder_forward(&identity_2x2(), &[3.0, 4.0]).unwrap();
        assert_eq!(f.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn forward_output_is_unit_norm() {
        // A narrow relu stack can land an input in the all-dead region; that
        // is the designed NormTooSmall error, so only successes are checked.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let model = EncoderModel::init(3, &[8, 8], 5, &mut rng);
        let mut ok = 0;
        for _ in 0..20 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            match encoder_forward(&model, &x) {
                Ok((f, _)) => {
                    assert!((crate::numerics::l2_norm(f.as_slice()) - 1.0).abs() < 1e-12);
                    ok += 1;
                }
                Err(CdsError::NormTooSmall { .. }) => {}
                Err(e) => panic!("unexpected error {e}"),
            }
        }
        assert!(ok >= 15);
    }

    #[test]
    fn forward_rejects_wrong_input_dim() {
        assert!(matches!(
            encoder_forward(&identity_2x2(), &[1.0]),
            Err(CdsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = EncoderModel::init(2, &[4], 3, &mut rng);
        let (_, cache) = encoder_forward(&model, &[0.5, -1.0]).unwrap();
        let (grads, input_grad) = encoder_backward(&model, &cache, &[0.0, 0.0, 0.0]).unwrap();
        assert!(grads
            .layers
            .iter()
            .all(|g| g.weight.data.iter().all(|&v| v == 0.0)
                && g.bias.iter().all(|&v| v == 0.0)));
        assert!(input_grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_single_layer_hand_case() {
        // W = I, x = [3,4]: y = [3,4], ‖y‖ = 5, f = [0.6, 0.8]. For upstream
        // u = [−0.8, 0.6] (tangential to f): dy = u/5, dW = dy·xᵀ, db = dy.
        let model = identity_2x2();
        let (_, cache) = encoder_forward(&model, &[3.0, 4.0]).unwrap();
        let (grads, input_grad) = encoder_backward(&model, &cache, &[-0.8, 0.6]).unwrap();
        let dy = [-0.16, 0.12];
        let expect_w = [dy[0] * 3.0, dy[0] * 4.0, dy[1] * 3.0, dy[1] * 4.0];
        for (g, e) in grads.layers[0].weight.data.iter().zip(&expect_w) {
            assert!((g - e).abs() < 1e-12);
        }
        for (g, e) in grads.layers[0].bias.iter().zip(&dy) {
            assert!((g - e).abs() < 1e-12);
        }
        for (g, e) in input_grad.iter().zip(&dy) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_cache_mismatch_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = EncoderModel::init(2, &[4], 3, &mut rng);
        let other = EncoderModel::init(2, &[5], 3, &mut rng);
        let (_, cache) = encoder_forward(&other, &[0.5, -1.0]).unwrap();
        assert!(matches!(
            encoder_backward(&model, &cache, &[0.0, 0.0, 0.0]),
            Err(CdsError::CacheMismatch)
        ));
    }

    /// Loss L = g·f through the full encoder, checked against central
    /// differences parameter by parameter.
    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = EncoderModel::init(3, &[6, 5], 4, &mut rng);
        let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let g: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

        let (_, cache) = encoder_forward(&model, &x).unwrap();
        let (grads, _) = encoder_backward(&model, &cache, &g).unwrap();

        let loss = |m: &EncoderModel| {
            let (f, _) = encoder_forward(m, &x).unwrap();
            dot(f.as_slice(), &g)
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for l in 0..model.layers().len() {
            for i in 0..model.layers()[l].weight.data.len() {
                let mut plus = model.clone();
                plus.layers[l].weight.data[i] += h;
                let mut minus = model.clone();
                minus.layers[l].weight.data[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.layers[l].weight.data[i];
                let err = (fd - an).abs() / 1.0f64.max(fd.abs()).max(an.abs());
                worst = worst.max(err);
            }
            for i in 0..model.layers()[l].bias.len() {
                let mut plus = model.clone();
                plus.layers[l].bias[i] += h;
                let mut minus = model.clone();
                minus.layers[l].bias[i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let an = grads.layers[l].bias[i];
                let err = (fd - an).abs() / 1.0f64.max(fd.abs()).max(an.abs());
                worst = worst.max(err);
            }
        }
        assert!(worst < 1e-4, "max rel error {worst}");
    }

    #[test]
    fn sgd_zero_grads_no_decay_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = EncoderModel::init(2, &[3], 2, &mut rng);
        let before = model.clone();
        let mut opt = SgdOptimizer::new(&model, 0.1, 0.9, 0.0);
        let grads = ParamGrads::zeros_like(&model);
        sgd_step(&mut model, &mut opt, &grads).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn sgd_pure_weight_decay_first_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = EncoderModel::init(2, &[3], 2, &mut rng);
        let before = model.clone();
        let (lr, wd) = (0.01, 0.5);
        let mut opt = SgdOptimizer::new(&model, lr, 0.9, wd);
        let grads = ParamGrads::zeros_like(&model);
        sgd_step(&mut model, &mut opt, &grads).unwrap();
        for (l, l0) in model.layers().iter().zip(before.layers()) {
            for (w, w0) in l.weight.data.iter().zip(&l0.weight.data) {
                assert!((w - w0 * (1.0 - lr * wd)).abs() < 1e-15);
            }
            // Decay never touches biases.
            assert_eq!(l.bias, l0.bias);
        }
    }

    #[test]
    fn sgd_momentum_unrolls_as_expected() {
        // Constant gradient g, momentum 0.9: step 1 moves by lr·g, step 2 by
        // lr·1.9·g.
        let mut model = EncoderModel::from_layers(vec![Layer {
            weight: Mat::from_rows(vec![vec![1.0]]).unwrap(),
            bias: vec![0.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let mut opt = SgdOptimizer::new(&model, 0.1, 0.9, 0.0);
        let mut grads = ParamGrads::zeros_like(&model);
        grads.layers[0].weight.data[0] = 2.0;
        sgd_step(&mut model, &mut opt, &grads).unwrap();
        assert!((model.layers()[0].weight.data[0] - (1.0 - 0.1 * 2.0)).abs() < 1e-15);
        sgd_step(&mut model, &mut opt, &grads).unwrap();
        let expect = 1.0 - 0.1 * 2.0 - 0.1 * 1.9 * 2.0;
        assert!((model.layers()[0].weight.data[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn sgd_without_momentum_is_vanilla_descent() {
        let mut model = EncoderModel::from_layers(vec![Layer {
            weight: Mat::from_rows(vec![vec![3.0]]).unwrap(),
            bias: vec![1.0],
            activation: Activation::Identity,
        }])
        .unwrap();
        let mut opt = SgdOptimizer::new(&model, 0.25, 0.0, 0.0);
        let mut grads = ParamGrads::zeros_like(&model);
        grads.layers[0].weight.data[0] = 4.0;
        grads.layers[0].bias[0] = -2.0;
        sgd_step(&mut model, &mut opt, &grads).unwrap();
        assert_eq!(model.layers()[0].weight.data[0], 3.0 - 0.25 * 4.0);
        assert_eq!(model.layers()[0].bias[0], 1.0 + 0.25 * 2.0);
    }
}
