use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LossWeights, ModelError, SghpnModel, Target};
use crate::image::Image;
use crate::tensor::{Sgd, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub seed: u64,
    /// Random horizontal flips and padded random crops.
    pub augment: bool,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.002,
            momentum: 0.9,
            batch: 8,
            seed: 0,
            augment: true,
            loss: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Image,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean per-sample loss of each epoch, measured during its updates.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Horizontal flip with probability 1/2, then a crop of the original size
/// from the image padded by `size / 8` pixels of edge replication.
pub fn augment<R: Rng + ?Sized>(img: &Image, rng: &mut R) -> Image {
    let img = if rng.random_bool(0.5) {
        img.flip_horizontal()
    } else {
        img.clone()
    };
    let pad = (img.height().min(img.width()) / 8) as i64;
    if pad == 0 {
        return img;
    }
    let top = rng.random_range(-pad..=pad) as isize;
    let left = rng.random_range(-pad..=pad) as isize;
    img.crop_padded(top, left, img.height(), img.width())
}

/// Mini-batch momentum SGD. Samples of a batch are differentiated in
/// parallel and their gradients summed in batch order, so results do not
/// depend on the thread count.
pub fn train(model: &mut SghpnModel, data: &[TrainSample], cfg: &TrainConfig) -> Result<TrainReport, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    if cfg.batch == 0 {
        return Err(ModelError::Config("batch size must be positive".into()));
    }
    let size = model.config().image_size;
    let images: Vec<Image> = data
        .iter()
        .map(|s| {
            if s.image.height() == size && s.image.width() == size {
                s.image.clone()
            } else {
                s.image.resize(size, size)
            }
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(model.params(), cfg.lr, cfg.momentum);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut steps = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch).enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.random()).collect();
            let snapshot = &*model;
            let results = batch
                .par_iter()
                .zip(seeds)
                .map(|(&i, seed)| {
                    let img = if cfg.augment {
                        augment(&images[i], &mut ChaCha8Rng::seed_from_u64(seed))
                    } else {
                        images[i].clone()
                    };
                    let x = snapshot.input(&img)?;
                    snapshot.gradients(&x, &data[i].target, cfg.loss)
                })
                .collect::<Result<Vec<_>, ModelError>>()?;

            let mut sum: Vec<Tensor> = model.params().iter().map(|p| Tensor::zeros(p.shape())).collect();
            let mut batch_loss = 0.0;
            for (loss, grads) in results {
                batch_loss += loss;
                for (acc, g) in sum.iter_mut().zip(grads) {
                    if let Some(g) = g {
                        acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(ModelError::Divergence { epoch, batch: batch_no });
            }
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<Option<Tensor>> = sum
                .into_iter()
                .map(|mut t| {
                    t.data_mut().iter_mut().for_each(|v| *v *= inv);
                    Some(t)
                })
                .collect();
            opt.step(model.params_mut(), &grads)?;
            epoch_total += batch_loss;
            steps += 1;
        }
        epoch_losses.push(epoch_total / data.len() as f64);
    }
    Ok(TrainReport { epoch_losses, steps })
}

/// Mean loss over `data` without augmentation or updates.
pub fn mean_loss(model: &SghpnModel, data: &[TrainSample], weights: LossWeights) -> Result<f64, ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let losses = data
        .par_iter()
        .map(|s| model.sample_loss(&model.input(&s.image)?, &s.target, weights))
        .collect::<Result<Vec<_>, ModelError>>()?;
    Ok(losses.iter().sum::<f64>() / data.len() as f64)
}
