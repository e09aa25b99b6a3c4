//! The embedding network: a fixed architecture of 0-2 (conv + max-pool)
//! stages, one ReLU hidden layer, a linear embedding layer, and a final
//! projection onto the unit sphere. Differentiated by hand.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    check_finite, conv2d_backward, conv2d_forward, dense_backward, dense_forward, l2_normalize,
    l2_normalize_backward, maxpool_backward, maxpool_forward, Activation, Tensor,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_channels: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Number of (conv + max-pool) stages, 0..=2.
    pub conv_layers: usize,
    /// Output channels per conv stage; length must equal `conv_layers`.
    pub conv_channels: Vec<usize>,
    pub kernel: usize,
    pub conv_stride: usize,
    pub pool: usize,
    pub pool_stride: usize,
    /// Hidden layer width n.
    pub hidden_units: usize,
    /// Embedding dimension d'.
    pub embed_dim: usize,
}

impl NetworkConfig {
    pub fn with_input(h: usize, w: usize) -> NetworkConfig {
        NetworkConfig {
            input_channels: 1,
            input_h: h,
            input_w: w,
            conv_layers: 1,
            conv_channels: vec![6],
            kernel: 5,
            conv_stride: 1,
            pool: 2,
            pool_stride: 2,
            hidden_units: 200,
            embed_dim: 64,
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_channels * self.input_h * self.input_w
    }

    /// Spatial shape after each conv+pool stage; errors if a stage would
    /// shrink below the kernel/window size.
    pub fn stage_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        if self.conv_layers > 2 {
            return Err(Error::Config(format!(
                "conv_layers must be 0, 1 or 2, got {}",
                self.conv_layers
            )));
        }
        if self.conv_channels.len() != self.conv_layers {
            return Err(Error::Config(format!(
                "conv_channels has {} entries for {} conv layers",
                self.conv_channels.len(),
                self.conv_layers
            )));
        }
        let mut shapes = Vec::new();
        let (mut h, mut w) = (self.input_h, self.input_w);
        for &oc in &self.conv_channels {
            if h < self.kernel || w < self.kernel {
                return Err(Error::Config(format!(
                    "spatial dims {}x{} too small for kernel {}",
                    h, w, self.kernel
                )));
            }
            h = (h - self.kernel) / self.conv_stride + 1;
            w = (w - self.kernel) / self.conv_stride + 1;
            if h < self.pool || w < self.pool {
                return Err(Error::Config(format!(
                    "spatial dims {}x{} too small for pool window {}",
                    h, w, self.pool
                )));
            }
            h = (h - self.pool) / self.pool_stride + 1;
            w = (w - self.pool) / self.pool_stride + 1;
            shapes.push((oc, h, w));
        }
        Ok(shapes)
    }

    /// Length of the flattened vector feeding the hidden layer.
    pub fn flat_len(&self) -> Result<usize> {
        let shapes = self.stage_shapes()?;
        Ok(match shapes.last() {
            Some(&(c, h, w)) => c * h * w,
            None => self.input_len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Vec<f64>,
}

/// All learnable parameters of the embedding function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    pub config: NetworkConfig,
    pub convs: Vec<ConvLayer>,
    pub hidden: DenseLayer,
    pub embed: DenseLayer,
}

/// Gradients with shapes mirroring [`NetworkParams`].
#[derive(Debug, Clone)]
pub struct NetworkGrads {
    pub convs: Vec<ConvLayer>,
    pub hidden: DenseLayer,
    pub embed: DenseLayer,
}

/// Activations cached by a forward pass, needed for backprop.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    conv_inputs: Vec<Tensor>,
    pool_argmax: Vec<Vec<usize>>,
    conv_out_shapes: Vec<Vec<usize>>,
    flat: Vec<f64>,
    hidden_out: Vec<f64>,
    embed_pre: Vec<f64>,
    pub embedding: Vec<f64>,
}

fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.gen_range(-s..s)).collect()
}

impl NetworkParams {
    pub fn init(config: NetworkConfig, rng: &mut ChaCha8Rng) -> Result<NetworkParams> {
        config.stage_shapes()?;
        let k = config.kernel;
        let mut convs = Vec::new();
        let mut in_c = config.input_channels;
        for &out_c in &config.conv_channels {
            let fan_in = in_c * k * k;
            let fan_out = out_c * k * k;
            convs.push(ConvLayer {
                kernels: Tensor::from_vec(
                    &[out_c, in_c, k, k],
                    xavier_uniform(rng, fan_in, fan_out, out_c * in_c * k * k),
                )?,
                bias: vec![0.0; out_c],
            });
            in_c = out_c;
        }
        let flat = config.flat_len()?;
        let n = config.hidden_units;
        let d = config.embed_dim;
        let hidden = DenseLayer {
            weights: Tensor::from_vec(&[n, flat], xavier_uniform(rng, flat, n, n * flat))?,
            bias: vec![0.0; n],
        };
        let embed = DenseLayer {
            weights: Tensor::from_vec(&[d, n], xavier_uniform(rng, n, d, d * n))?,
            bias: vec![0.0; d],
        };
        Ok(NetworkParams {
            config,
            convs,
            hidden,
            embed,
        })
    }

    /// Full forward pass for one instance (flat `[0,1]` pixels, row-major,
    /// channels-first). Returns the cache holding the unit embedding.
    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        let cfg = &self.config;
        if x.len() != cfg.input_len() {
            return Err(Error::Shape(format!(
                "input has {} features, network expects {}",
                x.len(),
                cfg.input_len()
            )));
        }
        let mut conv_inputs = Vec::new();
        let mut pool_argmax = Vec::new();
        let mut conv_out_shapes = Vec::new();
        let mut current = Tensor::from_vec(
            &[cfg.input_channels, cfg.input_h, cfg.input_w],
            x.to_vec(),
        )?;
        for layer in &self.convs {
            let conv_out = conv2d_forward(&current, &layer.kernels, &layer.bias, cfg.conv_stride)?;
            conv_inputs.push(current);
            conv_out_shapes.push(conv_out.shape().to_vec());
            let (pooled, argmax) = maxpool_forward(&conv_out, cfg.pool, cfg.pool_stride)?;
            pool_argmax.push(argmax);
            current = pooled;
        }
        let flat = current.data().to_vec();
        let hidden_out = dense_forward(&flat, &self.hidden.weights, &self.hidden.bias, Activation::Relu)?;
        let embed_pre = dense_forward(
            &hidden_out,
            &self.embed.weights,
            &self.embed.bias,
            Activation::Identity,
        )?;
        let embedding = l2_normalize(&embed_pre)?;
        Ok(ForwardCache {
            conv_inputs,
            pool_argmax,
            conv_out_shapes,
            flat,
            hidden_out,
            embed_pre,
            embedding,
        })
    }

    /// Backprop of a scalar loss through the whole network, given the loss
    /// gradient w.r.t. the unit embedding. Accumulates into `grads`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_embedding: &[f64],
        grads: &mut NetworkGrads,
    ) -> Result<()> {
        if d_embedding.len() != self.config.embed_dim {
            return Err(Error::Usage(
                "loss gradient length does not match embedding dim".into(),
            ));
        }
        let d_pre = l2_normalize_backward(&cache.embed_pre, d_embedding)?;
        let (dw_e, db_e, d_hidden) = dense_backward(
            &cache.hidden_out,
            &self.embed.weights,
            &cache.embed_pre,
            Activation::Identity,
            &d_pre,
        )?;
        accumulate(&mut grads.embed, &dw_e, &db_e);
        let (dw_h, db_h, d_flat) = dense_backward(
            &cache.flat,
            &self.hidden.weights,
            &cache.hidden_out,
            Activation::Relu,
            &d_hidden,
        )?;
        accumulate(&mut grads.hidden, &dw_h, &db_h);

        let mut d_current = d_flat;
        for i in (0..self.convs.len()).rev() {
            let pool_in_shape = &cache.conv_out_shapes[i];
            let pooled_shape: Vec<usize> = {
                let cfg = &self.config;
                let (c, h, w) = (pool_in_shape[0], pool_in_shape[1], pool_in_shape[2]);
                vec![
                    c,
                    (h - cfg.pool) / cfg.pool_stride + 1,
                    (w - cfg.pool) / cfg.pool_stride + 1,
                ]
            };
            let d_pooled = Tensor::from_vec(&pooled_shape, d_current)?;
            let d_conv_out = maxpool_backward(pool_in_shape, &cache.pool_argmax[i], &d_pooled)?;
            let (dk, db, d_input) = conv2d_backward(
                &cache.conv_inputs[i],
                &self.convs[i].kernels,
                self.config.conv_stride,
                &d_conv_out,
            )?;
            let g = &mut grads.convs[i];
            for (a, b) in g.kernels.data_mut().iter_mut().zip(dk.data()) {
                *a += b;
            }
            for (a, b) in g.bias.iter_mut().zip(&db) {
                *a += b;
            }
            d_current = d_input.data().to_vec();
        }
        Ok(())
    }

    /// Flat views over every parameter, in a fixed order shared with
    /// [`NetworkGrads::slices`]. Used by the optimizer and gradient checks.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            v.push(c.kernels.data_mut());
            v.push(&mut c.bias);
        }
        v.push(self.hidden.weights.data_mut());
        v.push(&mut self.hidden.bias);
        v.push(self.embed.weights.data_mut());
        v.push(&mut self.embed.bias);
        v
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        for c in &self.convs {
            n += c.kernels.len() + c.bias.len();
        }
        n + self.hidden.weights.len()
            + self.hidden.bias.len()
            + self.embed.weights.len()
            + self.embed.bias.len()
    }
}

fn accumulate(layer: &mut DenseLayer, dw: &Tensor, db: &[f64]) {
    for (a, b) in layer.weights.data_mut().iter_mut().zip(dw.data()) {
        *a += b;
    }
    for (a, b) in layer.bias.iter_mut().zip(db) {
        *a += b;
    }
}

impl NetworkGrads {
    pub fn zeros_like(params: &NetworkParams) -> NetworkGrads {
        NetworkGrads {
            convs: params
                .convs
                .iter()
                .map(|c| ConvLayer {
                    kernels: Tensor::zeros(c.kernels.shape()),
                    bias: vec![0.0; c.bias.len()],
                })
                .collect(),
            hidden: DenseLayer {
                weights: Tensor::zeros(params.hidden.weights.shape()),
                bias: vec![0.0; params.hidden.bias.len()],
            },
            embed: DenseLayer {
                weights: Tensor::zeros(params.embed.weights.shape()),
                bias: vec![0.0; params.embed.bias.len()],
            },
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v *= factor;
            }
        }
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = Vec::new();
        for c in &mut self.convs {
            v.push(c.kernels.data_mut());
            v.push(&mut c.bias);
        }
        v.push(self.hidden.weights.data_mut());
        v.push(&mut self.hidden.bias);
        v.push(self.embed.weights.data_mut());
        v.push(&mut self.embed.bias);
        v
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = Vec::new();
        for c in &self.convs {
            v.push(c.kernels.data());
            v.push(&c.bias);
        }
        v.push(self.hidden.weights.data());
        v.push(&self.hidden.bias);
        v.push(self.embed.weights.data());
        v.push(&self.embed.bias);
        v
    }
}

/// One plain mini-batch gradient-descent step: `p <- p - lr * g`.
/// A non-finite gradient aborts the epoch rather than poisoning the model.
pub fn mbgd_step(params: &mut NetworkParams, grads: &NetworkGrads, learning_rate: f64) -> Result<()> {
    for g in grads.slices() {
        check_finite(g, "mbgd_step gradient")
            .map_err(|_| Error::Training("non-finite gradient, epoch aborted".into()))?;
    }
    for (p, g) in params.slices_mut().into_iter().zip(grads.slices()) {
        debug_assert_eq!(p.len(), g.len());
        for (pv, gv) in p.iter_mut().zip(g) {
            *pv -= learning_rate * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn default_net(seed: u64) -> NetworkParams {
        let cfg = NetworkConfig::with_input(28, 28);
        NetworkParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn default_shape_algebra_yields_unit_embedding() {
        let net = default_net(7);
        let x = vec![0.5; 784];
        let cache = net.forward(&x).unwrap();
        assert_eq!(cache.embedding.len(), 64);
        let norm: f64 = cache.embedding.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn forward_is_deterministic() {
        let net = default_net(7);
        let x: Vec<f64> = (0..784).map(|i| (i % 17) as f64 / 16.0).collect();
        let a = net.forward(&x).unwrap().embedding;
        let b = net.forward(&x).unwrap().embedding;
        assert_eq!(a, b);
    }

    #[test]
    fn identical_seed_gives_identical_params() {
        let a = default_net(42);
        let b = default_net(42);
        assert_eq!(a, b);
    }

    #[test]
    fn two_conv_stages_compose() {
        let mut cfg = NetworkConfig::with_input(28, 28);
        cfg.conv_layers = 2;
        cfg.conv_channels = vec![4, 8];
        let net = NetworkParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        // 28 -> 24 -> 12 -> 8 -> 4
        assert_eq!(net.config.flat_len().unwrap(), 8 * 4 * 4);
        let cache = net.forward(&vec![0.3; 784]).unwrap();
        assert_eq!(cache.embedding.len(), 64);
    }

    #[test]
    fn zero_conv_stages_use_raw_input() {
        let mut cfg = NetworkConfig::with_input(28, 28);
        cfg.conv_layers = 0;
        cfg.conv_channels = vec![];
        let net = NetworkParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(net.config.flat_len().unwrap(), 784);
        net.forward(&vec![0.1; 784]).unwrap();
    }

    #[test]
    fn mbgd_zero_lr_is_identity() {
        let mut net = default_net(3);
        let before = net.clone();
        let grads = {
            let mut g = NetworkGrads::zeros_like(&net);
            for s in g.slices_mut() {
                for v in s {
                    *v = 1.0;
                }
            }
            g
        };
        mbgd_step(&mut net, &grads, 0.0).unwrap();
        assert_eq!(net, before);
    }

    #[test]
    fn mbgd_scalar_update() {
        // p = 1, g = 2, lr = 0.1 -> 0.8 on every coordinate
        let mut net = default_net(3);
        for s in net.slices_mut() {
            for v in s {
                *v = 1.0;
            }
        }
        let mut grads = NetworkGrads::zeros_like(&net);
        for s in grads.slices_mut() {
            for v in s {
                *v = 2.0;
            }
        }
        mbgd_step(&mut net, &grads, 0.1).unwrap();
        assert!((net.hidden.bias[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn mbgd_rejects_non_finite_gradient() {
        let mut net = default_net(3);
        let mut grads = NetworkGrads::zeros_like(&net);
        grads.hidden.bias[0] = f64::NAN;
        assert!(mbgd_step(&mut net, &grads, 0.1).is_err());
    }

    #[test]
    fn mbgd_step_reduces_convex_quadratic() {
        // loss(p) = sum (p_i - t)^2 over the embed bias, gradient 2(p - t)
        let mut net = default_net(9);
        let target = 3.0;
        let loss = |n: &NetworkParams| -> f64 {
            n.embed.bias.iter().map(|p| (p - target) * (p - target)).sum()
        };
        let before = loss(&net);
        let mut grads = NetworkGrads::zeros_like(&net);
        for (g, p) in grads.embed.bias.iter_mut().zip(&net.embed.bias) {
            *g = 2.0 * (p - target);
        }
        mbgd_step(&mut net, &grads, 0.1).unwrap();
        assert!(loss(&net) < before);
    }
}
