//! Momentum-SGD training of the intensity field on balanced point samples.

use std::path::PathBuf;

use difct_tensor::{Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::geometry::ScannerGeometry;
use crate::model::DifModel;
use crate::projector::ProjectionStack;
use crate::volume::{sample_balanced_points, Volume3D, DEFAULT_THRESHOLD};

/// Overall learning-rate reduction reached after the scheduled epochs.
pub const TOTAL_LR_DECAY: f64 = 0.001;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Multiplicative learning-rate factor per epoch.
    pub lr_decay: f64,
    /// Volumes whose gradients are averaged into one optimizer step.
    pub batch_volumes: usize,
    pub points_per_volume: usize,
    /// Optimizer steps taken on each batch before moving to the next one.
    pub steps_per_batch: usize,
    pub threshold: f32,
    pub seed: u64,
    /// Checkpoint written every `save_every` epochs and at the end.
    pub checkpoint: Option<PathBuf>,
    pub save_every: Option<usize>,
}

impl TrainConfig {
    /// Paper protocol: 400 epochs, batch 4, N = 10,000, lr 0.01, momentum 0.98.
    pub fn paper() -> Self {
        Self {
            lr0: 0.01,
            momentum: 0.98,
            epochs: 400,
            lr_decay: TOTAL_LR_DECAY.powf(1.0 / 400.0),
            batch_volumes: 4,
            points_per_volume: 10_000,
            steps_per_batch: 1,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
            checkpoint: None,
            save_every: None,
        }
    }

    /// Desk scale: 150 epochs, N = 4,096.
    pub fn desk() -> Self {
        Self {
            points_per_volume: 4096,
            ..Self::paper().with_epochs(150)
        }
    }

    /// Sets the epoch count and rescales the decay so the final rate is `lr0 * 0.001`.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self.lr_decay = TOTAL_LR_DECAY.powf(1.0 / epochs.max(1) as f64);
        self
    }

    /// `lr0 * decay^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid(format!("lr decay must lie in (0, 1], got {}", self.lr_decay)));
        }
        if self.epochs == 0 || self.batch_volumes == 0 || self.steps_per_batch == 0 {
            return Err(invalid("epochs, batch size and steps per batch must be positive"));
        }
        if self.points_per_volume == 0 || !self.points_per_volume.is_multiple_of(2) {
            return Err(invalid(format!(
                "points per volume must be positive and even, got {}",
                self.points_per_volume
            )));
        }
        if self.save_every == Some(0) {
            return Err(invalid("save interval must be positive"));
        }
        Ok(())
    }
}

/// One training case: normalized ground-truth volume and its raw projections.
#[derive(Debug, Clone, Copy)]
pub struct TrainSample<'a> {
    pub volume: &'a Volume3D,
    pub projections: &'a ProjectionStack,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Seed for the points drawn for `volume` in `(epoch, step)`.
pub fn point_seed(seed: u64, epoch: usize, step: usize, volume: usize) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [epoch as u64, step as u64, volume as u64] {
        h = (h ^ v).wrapping_mul(0x100_0000_01B3).rotate_left(23);
    }
    h
}

/// Trains `model` in place. `progress` is called after every epoch with
/// `(epoch, mean_loss, lr)`.
pub fn train(
    model: &mut DifModel<f32>,
    geom: &ScannerGeometry,
    samples: &[TrainSample<'_>],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64, f64),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(invalid("training needs at least one sample"));
    }
    for (i, s) in samples.iter().enumerate() {
        s.projections
            .check_compatible(geom)
            .map_err(|e| invalid(format!("sample {i}: {e}")))?;
        model.check_inputs(s.projections, geom)?;
    }
    let mut opt = Sgd::new(cfg.lr0 as f32, cfg.momentum as f32);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.lr_at(epoch) as f32;
        order.shuffle(&mut shuffle_rng);
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for (b, batch) in order.chunks(cfg.batch_volumes).enumerate() {
            for s in 0..cfg.steps_per_batch {
                let step = b * cfg.steps_per_batch + s;
                let results = batch
                    .par_iter()
                    .map(|&idx| {
                        let sample = samples[idx];
                        let points = sample_balanced_points(
                            sample.volume,
                            cfg.points_per_volume,
                            cfg.threshold,
                            point_seed(cfg.seed, epoch, step, idx),
                        )?;
                        model.loss_and_grads(sample.projections, geom, &points)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let batch_loss = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
                if !batch_loss.is_finite() {
                    return Err(Error::DivergedTraining { epoch, loss: batch_loss });
                }
                apply_mean_grads(model.params_mut(), &results);
                opt.step(model.params_mut().iter_mut())?;
                loss_sum += batch_loss;
                loss_count += 1;
                report.steps += 1;
            }
        }
        let mean = loss_sum / loss_count as f64;
        report.epoch_losses.push(mean);
        progress(epoch, mean, cfg.lr_at(epoch));
        let last = epoch + 1 == cfg.epochs;
        if let Some(path) = &cfg.checkpoint {
            if last || cfg.save_every.is_some_and(|n| (epoch + 1) % n == 0) {
                model.save(path)?;
            }
        }
    }
    Ok(report)
}

fn apply_mean_grads(params: &mut [Tensor<f32>], results: &[(f64, Vec<Vec<f32>>)]) {
    let scale = 1.0 / results.len() as f32;
    for (i, p) in params.iter_mut().enumerate() {
        let mut g = results[0].1[i].clone();
        for r in &results[1..] {
            g.iter_mut().zip(&r.1[i]).for_each(|(a, &b)| *a += b);
        }
        g.iter_mut().for_each(|v| *v *= scale);
        p.grad = Some(g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_schedule_ends_at_one_thousandth() {
        let cfg = TrainConfig::paper();
        assert!((cfg.lr_decay - 0.9829).abs() < 1e-4);
        assert!((cfg.lr_at(400) - 1e-5).abs() < 1e-12);
        assert_eq!(cfg.lr_at(0), 0.01);
        let desk = TrainConfig::desk();
        assert!((desk.lr_at(150) - 1e-5).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::paper().validate().is_ok());
        assert!(TrainConfig { points_per_volume: 3, ..TrainConfig::paper() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..TrainConfig::paper() }.validate().is_err());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::paper() }.validate().is_err());
    }

    #[test]
    fn point_seeds_differ() {
        let a = point_seed(1, 0, 0, 0);
        assert_ne!(a, point_seed(1, 1, 0, 0));
        assert_ne!(a, point_seed(1, 0, 1, 0));
        assert_ne!(a, point_seed(1, 0, 0, 1));
        assert_eq!(a, point_seed(1, 0, 0, 0));
    }
}
