//! The enhancement network.
//!
//! With the default configuration the graph is
//!
//! ```text
//! block 1:  z1,0 = r(c(U))      z1,1 = r(c(z1,0))   z1,2 = r(c(z1,1))   b1 = [z1,0; z1,1; z1,2; U]          (51 ch)
//! block 2:  z2,0 = r(c(b1))     ...                                   b2 = [z2,0; z2,1; z2,2; U; b1]      (102 ch)
//! block 3:  z3,0 = r(c(b2))     ...                                   b3 = [z3,0; z3,1; z3,2; U; b2]      (153 ch)
//! residual: Δ = c(b3)                                                                                     (3 ch)
//! output:   I = U + Δ
//! ```
//!
//! for ten convolution layers in total. Each block after the first consumes
//! the previous block's stacked output, while the raw input `U` is also
//! re-attached to every block's stack. Without dense concatenation a block
//! only stacks its last conv-ReLU output with `U`; without residual learning
//! the network output is `Δ` itself.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageio::checkpoint;
use crate::tensor::{
    add, add_assign, concat_backward, concat_channels, conv2d_backward, conv2d_forward,
    relu_backward, relu_forward, ConvParams, Tensor, KERNEL_SIZE,
};

/// Image channels consumed and produced by the network.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub convs_per_block: usize,
    pub feature_maps: usize,
    pub residual_learning: bool,
    pub dense_concat: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_blocks: 3,
            convs_per_block: 3,
            feature_maps: 16,
            residual_learning: true,
            dense_concat: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.convs_per_block == 0 || self.feature_maps == 0 {
            return Err(Error::Config(format!(
                "num_blocks, convs_per_block and feature_maps must all be >= 1 (got {}, {}, {})",
                self.num_blocks, self.convs_per_block, self.feature_maps
            )));
        }
        Ok(())
    }

    /// Channel count of each block's stacked output `b_k`.
    pub fn block_output_channels(&self) -> Vec<usize> {
        let mut widths = Vec::with_capacity(self.num_blocks);
        let mut prev = 0;
        for _ in 0..self.num_blocks {
            let width = if self.dense_concat {
                self.convs_per_block * self.feature_maps + IMAGE_CHANNELS + prev
            } else {
                self.feature_maps + IMAGE_CHANNELS
            };
            widths.push(width);
            prev = width;
        }
        widths
    }

    /// `(in_channels, out_channels)` of every convolution, in graph order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.num_layers());
        let mut block_in = IMAGE_CHANNELS;
        for width in self.block_output_channels() {
            dims.push((block_in, self.feature_maps));
            for _ in 1..self.convs_per_block {
                dims.push((self.feature_maps, self.feature_maps));
            }
            block_in = width;
        }
        dims.push((block_in, IMAGE_CHANNELS));
        dims
    }

    pub fn num_layers(&self) -> usize {
        self.num_blocks * self.convs_per_block + 1
    }
}

/// Network weights plus the configuration that fixes the graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<ConvParams>,
    // Bumped whenever weights are handed out mutably; ties caches to weights.
    version: u64,
}

/// Activations retained by [`Model::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    input: Tensor,
    blocks: Vec<BlockCache>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    /// Post-ReLU outputs. `z > 0` exactly where the pre-activation was positive.
    zs: Vec<Tensor>,
    output: Tensor,
}

impl ForwardCache {
    /// Post-ReLU activations of every hidden layer in graph order.
    pub fn activations(&self) -> impl Iterator<Item = &Tensor> {
        self.blocks.iter().flat_map(|b| b.zs.iter())
    }

    /// Stacked block outputs `b_1 .. b_n`.
    pub fn block_outputs(&self) -> impl Iterator<Item = &Tensor> {
        self.blocks.iter().map(|b| &b.output)
    }

    /// Which hidden units are active, packed one bool per activation.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.activations()
            .flat_map(|z| z.data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

pub struct ForwardOutput {
    pub residual: Tensor,
    pub enhanced: Tensor,
    pub cache: ForwardCache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Parameter gradients, one entry per convolution layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        ModelGrads {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrads {
                    kernel: vec![0.0; l.kernel().len()],
                    bias: vec![0.0; l.bias().len()],
                })
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ModelGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.kernel.iter_mut().zip(&b.kernel) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.kernel.iter_mut().for_each(|v| *v *= factor);
            l.bias.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    /// All components in [`Model::flat_parameters`] order.
    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers
            .iter()
            .flat_map(|l| l.kernel.iter().chain(l.bias.iter()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.iter().copied().collect()
    }
}

impl Model {
    /// He-initialized network: kernels ~ N(0, 2 / (3·3·in_channels)), zero biases.
    pub fn build(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(cin, cout)| {
                let fan_in = (KERNEL_SIZE * KERNEL_SIZE * cin) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt())
                    .map_err(|e| Error::Config(e.to_string()))?;
                let kernel = (0..KERNEL_SIZE * KERNEL_SIZE * cin * cout)
                    .map(|_| normal.sample(&mut rng))
                    .collect();
                ConvParams::new(cin, cout, kernel, vec![0.0; cout])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Model {
            config,
            layers,
            version: 0,
        })
    }

    /// All-zero weights: with residual learning this is the identity map.
    pub fn zeros(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(cin, cout)| ConvParams::zeros(cin, cout))
            .collect();
        Ok(Model {
            config,
            layers,
            version: 0,
        })
    }

    /// Assembles a model from explicit layers, checking them against `config`.
    pub fn from_layers(config: ModelConfig, layers: Vec<ConvParams>) -> Result<Model> {
        config.validate()?;
        let dims = config.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::dim(format!(
                "config implies {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (i, ((cin, cout), l)) in dims.iter().zip(&layers).enumerate() {
            if l.in_channels() != *cin || l.out_channels() != *cout {
                return Err(Error::dim(format!(
                    "layer {i} is {}->{}, config implies {cin}->{cout}",
                    l.in_channels(),
                    l.out_channels()
                )));
            }
        }
        Ok(Model {
            config,
            layers,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[ConvParams] {
        &self.layers
    }

    /// Mutable access to the weights. Invalidates outstanding forward caches.
    pub fn layers_mut(&mut self) -> &mut [ConvParams] {
        self.version += 1;
        &mut self.layers
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(ConvParams::parameter_count).sum()
    }

    pub fn flat_parameters(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.kernel().iter().chain(l.bias().iter()).copied())
            .collect()
    }

    pub fn set_flat_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(Error::dim(format!(
                "expected {} parameters, got {}",
                self.parameter_count(),
                values.len()
            )));
        }
        let mut rest = values;
        for l in self.layers_mut() {
            let (k, tail) = rest.split_at(l.kernel().len());
            l.kernel_mut().copy_from_slice(k);
            let (b, tail) = tail.split_at(l.bias().len());
            l.bias_mut().copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.kernel().iter().chain(l.bias()).all(|v| v.is_finite()))
    }

    pub fn forward(&self, input: &Tensor) -> Result<ForwardOutput> {
        if input.channels() != IMAGE_CHANNELS {
            return Err(Error::dim(format!(
                "network input must have {IMAGE_CHANNELS} channels, got {}",
                input.channels()
            )));
        }
        let cfg = &self.config;
        let expected_widths = cfg.block_output_channels();
        let mut blocks: Vec<BlockCache> = Vec::with_capacity(cfg.num_blocks);
        let mut layer = 0;
        for (k, &expected) in expected_widths.iter().enumerate() {
            let mut zs: Vec<Tensor> = Vec::with_capacity(cfg.convs_per_block);
            for j in 0..cfg.convs_per_block {
                let src = match (j, k) {
                    (0, 0) => input,
                    (0, _) => &blocks[k - 1].output,
                    _ => &zs[j - 1],
                };
                let z = relu_forward(&conv2d_forward(src, &self.layers[layer])?);
                zs.push(z);
                layer += 1;
            }
            let output = {
                let mut parts: Vec<&Tensor> = Vec::with_capacity(cfg.convs_per_block + 2);
                if cfg.dense_concat {
                    parts.extend(zs.iter());
                    parts.push(input);
                    if k > 0 {
                        parts.push(&blocks[k - 1].output);
                    }
                } else {
                    parts.push(zs.last().expect("convs_per_block >= 1"));
                    parts.push(input);
                }
                concat_channels(&parts)?
            };
            if output.channels() != expected {
                return Err(Error::State(format!(
                    "block {} stacked {} channels, expected {expected}",
                    k + 1,
                    output.channels()
                )));
            }
            blocks.push(BlockCache { zs, output });
        }
        let last = &blocks.last().expect("num_blocks >= 1").output;
        let residual = conv2d_forward(last, &self.layers[layer])?;
        let enhanced = if cfg.residual_learning {
            add(input, &residual)?
        } else {
            residual.clone()
        };
        Ok(ForwardOutput {
            residual,
            enhanced,
            cache: ForwardCache {
                version: self.version,
                input: input.clone(),
                blocks,
            },
        })
    }

    /// Network output only, unclamped.
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        Ok(self.forward(input)?.enhanced)
    }

    /// Gradients of a scalar loss w.r.t. every weight and the input, given
    /// the loss gradient w.r.t. the network output.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_enhanced: &Tensor,
    ) -> Result<(ModelGrads, Tensor)> {
        let cfg = &self.config;
        if cache.version != self.version || cache.blocks.len() != cfg.num_blocks {
            return Err(Error::State(
                "forward cache does not belong to the current weights".into(),
            ));
        }
        if grad_enhanced.shape() != cache.input.shape() {
            return Err(Error::dim(format!(
                "output cotangent {:?} does not match input {:?}",
                grad_enhanced.shape(),
                cache.input.shape()
            )));
        }

        let mut grads = ModelGrads {
            layers: Vec::with_capacity(self.layers.len()),
        };
        let mut slots: Vec<Option<LayerGrads>> = vec![None; self.layers.len()];
        let mut grad_input = if cfg.residual_learning {
            grad_enhanced.clone()
        } else {
            Tensor::zeros(
                grad_enhanced.height(),
                grad_enhanced.width(),
                grad_enhanced.channels(),
            )
        };

        let last_layer = self.layers.len() - 1;
        let last_out = &cache.blocks[cfg.num_blocks - 1].output;
        let g = conv2d_backward(grad_enhanced, last_out, &self.layers[last_layer])?;
        slots[last_layer] = Some(LayerGrads {
            kernel: g.kernel,
            bias: g.bias,
        });
        let mut grad_block = g.input;

        for k in (0..cfg.num_blocks).rev() {
            let block = &cache.blocks[k];
            let n = cfg.convs_per_block;
            let fm = cfg.feature_maps;

            // Route the stacked-output cotangent back to its sources.
            let mut grad_z: Vec<Option<Tensor>> = vec![None; n];
            let mut grad_prev_block: Option<Tensor> = None;
            if cfg.dense_concat {
                let mut counts = vec![fm; n];
                counts.push(IMAGE_CHANNELS);
                if k > 0 {
                    counts.push(cache.blocks[k - 1].output.channels());
                }
                let mut parts = concat_backward(&grad_block, &counts)?.into_iter();
                for slot in grad_z.iter_mut() {
                    *slot = parts.next();
                }
                add_assign(&mut grad_input, &parts.next().expect("input part"))?;
                grad_prev_block = parts.next();
            } else {
                let mut parts = concat_backward(&grad_block, &[fm, IMAGE_CHANNELS])?.into_iter();
                grad_z[n - 1] = parts.next();
                add_assign(&mut grad_input, &parts.next().expect("input part"))?;
            }

            for j in (0..n).rev() {
                let layer = k * n + j;
                let gz = grad_z[j]
                    .take()
                    .ok_or_else(|| Error::State(format!("no cotangent reached layer {layer}")))?;
                let gpre = relu_backward(&gz, &block.zs[j])?;
                let src = match (j, k) {
                    (0, 0) => &cache.input,
                    (0, _) => &cache.blocks[k - 1].output,
                    _ => &block.zs[j - 1],
                };
                let g = conv2d_backward(&gpre, src, &self.layers[layer])?;
                slots[layer] = Some(LayerGrads {
                    kernel: g.kernel,
                    bias: g.bias,
                });
                if j > 0 {
                    match grad_z[j - 1].as_mut() {
                        Some(acc) => add_assign(acc, &g.input)?,
                        None => grad_z[j - 1] = Some(g.input),
                    }
                } else if k > 0 {
                    match grad_prev_block.as_mut() {
                        Some(acc) => add_assign(acc, &g.input)?,
                        None => grad_prev_block = Some(g.input),
                    }
                } else {
                    add_assign(&mut grad_input, &g.input)?;
                }
            }
            if k > 0 {
                grad_block = grad_prev_block
                    .ok_or_else(|| Error::State(format!("no cotangent reached block {k}")))?;
            }
        }

        grads.layers = slots
            .into_iter()
            .map(|s| s.expect("every layer visited"))
            .collect();
        Ok((grads, grad_input))
    }

    pub fn save(&self, path: impl AsRef<Path>, water_type_tag: &str) -> Result<()> {
        checkpoint::write_checkpoint(path, self, water_type_tag)
    }

    /// Loads a checkpoint, discarding its water-type tag.
    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        Ok(checkpoint::read_checkpoint(path)?.model)
    }
}
