//! Mini-batch training with ADAM on paired (degraded, ground truth) images.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imageio::{read_image, DatasetManifest};
use crate::loss::{self, LossReport};
use crate::model::{Model, ModelConfig, ModelGrads};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const DEFAULT_EPOCHS: usize = 20;
pub const DEFAULT_BATCH: usize = 16;

/// A degraded input and the clean image it should map to.
#[derive(Debug, Clone)]
pub struct Pair {
    pub name: String,
    pub degraded: Tensor,
    pub clean: Tensor,
}

/// Loads every pair of a paired manifest (degraded path, then ground truth).
pub fn load_pairs(manifest: &DatasetManifest) -> Result<Vec<Pair>> {
    manifest
        .entries()
        .par_iter()
        .map(|e| {
            let degraded = read_image(manifest.resolve(&e.first))?;
            let clean = read_image(manifest.resolve(&e.second))?;
            if degraded.shape() != clean.shape() {
                return Err(Error::dim(format!(
                    "{}: degraded {:?} and ground truth {:?} differ in size",
                    e.first,
                    degraded.shape(),
                    clean.shape()
                )));
            }
            Ok(Pair {
                name: e.first.clone(),
                degraded,
                clean,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Side of one random square crop taken per sample per epoch.
    pub crop: Option<usize>,
    pub include_ssim: bool,
    /// Seeds the per-epoch shuffle and crop positions.
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            model: ModelConfig::default(),
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH,
            crop: None,
            include_ssim: true,
            seed: 0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self, pairs: &[Pair]) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        if pairs.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let min_side = pairs
            .iter()
            .map(|p| p.degraded.height().min(p.degraded.width()))
            .min()
            .unwrap_or(0);
        if let Some(c) = self.crop {
            if c == 0 || c > min_side {
                return Err(Error::Config(format!(
                    "crop {c} must be between 1 and the smallest image side {min_side}"
                )));
            }
        }
        let side = self.crop.unwrap_or(min_side);
        if self.include_ssim && side < loss::SSIM_WINDOW {
            return Err(Error::Config(format!(
                "training images must be at least {w}x{w} for the SSIM loss (got {side}); \
                 use a larger crop or disable the SSIM term",
                w = loss::SSIM_WINDOW
            )));
        }
        Ok(())
    }
}

/// Per-epoch means over all samples, measured before each update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub total: f64,
    pub mse: f64,
    pub ssim_loss: f64,
}

impl EpochMetrics {
    /// `epoch<TAB>total<TAB>mse<TAB>ssimLoss`
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{:.9}\t{:.9}\t{:.9}",
            self.epoch, self.total, self.mse, self.ssim_loss
        )
    }
}

/// Sample order for one epoch; depends only on `seed ^ epoch`.
pub fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ epoch as u64)
}

pub fn epoch_order(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// FNV-1a over the sample indices, for logging that runs saw the same data.
pub fn order_digest(order: &[usize]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &i in order {
        for b in (i as u64).to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

struct SampleResult {
    report: LossReport,
    grads: ModelGrads,
}

fn sample_step(model: &Model, input: &Tensor, target: &Tensor, include_ssim: bool) -> Result<SampleResult> {
    let out = model.forward(input)?;
    let report = loss::objective(&out.enhanced, target, include_ssim)?;
    let (grads, _) = model.backward(&out.cache, &report.grad)?;
    Ok(SampleResult { report, grads })
}

fn crop_pair(pair: &Pair, side: usize, rng: &mut ChaCha8Rng) -> Result<(Tensor, Tensor)> {
    let top = rng.random_range(0..=pair.degraded.height() - side);
    let left = rng.random_range(0..=pair.degraded.width() - side);
    Ok((
        pair.degraded.crop(top, left, side, side)?,
        pair.clean.crop(top, left, side, side)?,
    ))
}

/// Model, optimizer state and progress of one training run.
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub options: TrainOptions,
    pub metrics: Vec<EpochMetrics>,
    /// [`order_digest`] of every completed epoch's sample order.
    pub order_digests: Vec<u64>,
}

impl Trainer {
    pub fn new(options: TrainOptions) -> Result<Self> {
        let model = Model::build(options.model.clone())?;
        let adam = AdamState::for_model(&model);
        Ok(Trainer {
            model,
            adam,
            options,
            metrics: Vec::new(),
            order_digests: Vec::new(),
        })
    }

    /// Runs one epoch. Samples of a batch are evaluated in parallel and their
    /// gradients summed in batch order, then averaged.
    pub fn run_epoch(&mut self, pairs: &[Pair]) -> Result<EpochMetrics> {
        self.options.validate(pairs)?;
        let epoch = self.metrics.len() + 1;
        let mut rng = epoch_rng(self.options.seed, epoch);
        let order = epoch_order(&mut rng, pairs.len());

        let (mut sum_total, mut sum_mse, mut sum_ssim) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(self.options.batch_size).enumerate() {
            let inputs: Vec<(Tensor, Tensor)> = batch
                .iter()
                .map(|&i| match self.options.crop {
                    Some(side) => crop_pair(&pairs[i], side, &mut rng),
                    None => Ok((pairs[i].degraded.clone(), pairs[i].clean.clone())),
                })
                .collect::<Result<_>>()?;
            let model = &self.model;
            let include_ssim = self.options.include_ssim;
            let results: Vec<SampleResult> = inputs
                .par_iter()
                .map(|(x, t)| sample_step(model, x, t, include_ssim))
                .collect::<Result<_>>()?;

            let mut grads = ModelGrads::zeros_like(&self.model);
            for (r, &i) in results.iter().zip(batch) {
                if !r.report.total.is_finite() || !r.grads.is_finite() {
                    return Err(Error::Numeric(format!(
                        "diverged at epoch {epoch}, batch {b}, sample {:?}: total {} mse {} ssim_loss {}; \
                         last completed epoch {:?}",
                        pairs[i].name,
                        r.report.total,
                        r.report.mse,
                        r.report.ssim_loss,
                        self.metrics.last()
                    )));
                }
                sum_total += r.report.total;
                sum_mse += r.report.mse;
                sum_ssim += r.report.ssim_loss;
                grads.add_assign(&r.grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            self.adam.step(&mut self.model, &grads)?;
        }

        let n = pairs.len() as f64;
        let m = EpochMetrics {
            epoch,
            total: sum_total / n,
            mse: sum_mse / n,
            ssim_loss: sum_ssim / n,
        };
        self.metrics.push(m);
        self.order_digests.push(order_digest(&order));
        Ok(m)
    }

    /// Runs all configured epochs, reporting each as it finishes.
    pub fn run(&mut self, pairs: &[Pair], mut on_epoch: impl FnMut(&EpochMetrics)) -> Result<()> {
        self.options.validate(pairs)?;
        while self.metrics.len() < self.options.epochs {
            let m = self.run_epoch(pairs)?;
            on_epoch(&m);
        }
        Ok(())
    }
}

/// Metrics file contents: one [`EpochMetrics::to_line`] per epoch.
pub fn metrics_text(metrics: &[EpochMetrics]) -> String {
    metrics.iter().map(|m| m.to_line() + "\n").collect()
}

/// Network output clamped to the displayable range.
pub fn enhance(model: &Model, image: &Tensor) -> Result<Tensor> {
    Ok(model.predict(image)?.map(|v| v.clamp(0.0, 1.0)))
}
