use std::io::Write as _;

use crate::data::{augment, band_crop, load_split, uniform_sample, Frame, SampleMode, SamplerConfig};
use crate::error::{Error, FormatError};
use crate::layers::ObservationMask;
use crate::model::{forward_phase, Group, Model, Phase, Variant};
use crate::rng::{derive_seed, hash_str, SplitMix64};
use crate::tensor::{sgd_step, Graph, Tensor};

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(
        "non-finite loss {loss} at iteration {iteration}; largest parameter is {param} with magnitude {magnitude}"
    )]
    NonFiniteLoss {
        iteration: u64,
        loss: f64,
        param: String,
        magnitude: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub phase: Phase,
    pub loss: f64,
}

impl LossRecord {
    pub fn to_line(&self) -> String {
        format!("{}\t{}\t{}\n", self.iteration, self.phase.name(), self.loss)
    }
}

const TAG_INIT: u64 = 1;
const TAG_STREAM: u64 = 2;
const TAG_ORDER: u64 = 3;

/// Stateful trainer. Every random draw comes from `seed` and the iteration
/// counter, so stopping, checkpointing and resuming reproduces an
/// uninterrupted run exactly.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    frames: Vec<Frame>,
    iteration: u64,
    rng: SplitMix64,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, frames: Vec<Frame>) -> Result<Self, TrainError> {
        cfg.validate()?;
        if frames.is_empty() {
            return Err(FormatError::Config("no training frames".into()).into());
        }
        let model = Model::new(cfg.model_config(), derive_seed(cfg.seed, TAG_INIT))?;
        let rng = SplitMix64::new(derive_seed(cfg.seed, TAG_STREAM));
        Ok(Self {
            cfg,
            model,
            frames,
            iteration: 0,
            rng,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, frames: Vec<Frame>) -> Result<Self, TrainError> {
        let (cfg, model) = ckpt.restore()?;
        let mut t = Self::new(cfg, frames)?;
        t.model = model;
        t.iteration = ckpt.iteration;
        t.rng = SplitMix64::new(ckpt.rng_state);
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.iteration, self.rng.state(), &self.cfg)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        self.frames.len().div_ceil(self.cfg.batch_size) as u64
    }

    pub fn total_iterations(&self) -> u64 {
        self.cfg.epochs as u64 * self.iterations_per_epoch()
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.total_iterations()
    }

    pub fn phase_at(&self, iteration: u64) -> Phase {
        if self.cfg.variant == Variant::ContextOnly {
            return Phase::ContextPretrain;
        }
        let total = self.total_iterations() as f64;
        let context_end = (self.cfg.context_pretrain_fraction * total).round() as u64;
        let depth_end =
            ((self.cfg.context_pretrain_fraction + self.cfg.depth_pretrain_fraction) * total).round() as u64;
        if iteration < context_end {
            Phase::ContextPretrain
        } else if iteration < depth_end {
            Phase::DepthPretrain
        } else {
            Phase::Joint
        }
    }

    fn trainable(&self, phase: Phase) -> &'static [Group] {
        match phase {
            Phase::ContextPretrain => &[Group::ContextEncoder, Group::Prediction],
            Phase::DepthPretrain => &[Group::DepthEncoder],
            Phase::Joint => &Group::ALL,
        }
    }

    fn batch_indices(&self, iteration: u64) -> Vec<usize> {
        let per_epoch = self.iterations_per_epoch();
        let epoch = iteration / per_epoch;
        let pos = (iteration % per_epoch) as usize;
        let mut order: Vec<usize> = (0..self.frames.len()).collect();
        SplitMix64::new(derive_seed(derive_seed(self.cfg.seed, TAG_ORDER), epoch)).shuffle(&mut order);
        let bs = self.cfg.batch_size;
        order[pos * bs..((pos + 1) * bs).min(order.len())].to_vec()
    }

    // Augmented frame, sparse input, input mask, loss mask.
    fn draw_example(&self, frame: &Frame, seed: u64) -> Result<(Frame, Tensor, ObservationMask, Tensor), TrainError> {
        let mut frame = if self.cfg.augment {
            augment(frame, derive_seed(seed, 1))?
        } else {
            frame.clone()
        };
        if let SampleMode::Band { top, bottom } = self.cfg.sample_mode(frame.height()) {
            frame = band_crop(&frame, top, bottom)?;
        }
        let available = frame.valid_gt.count();
        let wanted = match self.cfg.train_samples {
            None => self.cfg.samples,
            Some((lo, hi)) => {
                let mut r = SplitMix64::new(derive_seed(seed, 3));
                let (llo, lhi) = ((lo as f64).ln(), (hi as f64 + 1.0).ln());
                (r.uniform(llo, lhi).exp().floor() as usize).clamp(lo, hi)
            }
        };
        let cfg = SamplerConfig {
            samples: wanted.min(available),
            seed: derive_seed(seed, 2),
            mode: SampleMode::Uniform,
        };
        let (sparse, mask) = uniform_sample(&frame, &cfg)?;
        let loss_mask: Vec<f64> = if self.cfg.loss_include_observed {
            frame.valid_gt.data().to_vec()
        } else {
            frame
                .valid_gt
                .data()
                .iter()
                .zip(mask.data())
                .map(|(v, m)| v * (1.0 - m))
                .collect()
        };
        let loss_mask = Tensor::new(frame.valid_gt.tensor().shape(), loss_mask)?;
        Ok((frame, sparse, mask, loss_mask))
    }

    /// One optimizer step over one batch.
    pub fn step(&mut self) -> Result<LossRecord, TrainError> {
        let iteration = self.iteration;
        let phase = self.phase_at(iteration);
        let groups = self.trainable(phase);
        let batch = self.batch_indices(iteration);
        let stream = self.rng.next_u64();
        let scale = 1.0 / batch.len() as f64;
        let mut total_loss = 0.0;
        let mut accum: Vec<Vec<f64>> = Vec::new();
        for &fi in &batch {
            let frame = &self.frames[fi];
            let seed = derive_seed(stream, hash_str(&frame.id));
            let (frame, sparse, mask, loss_mask) = self.draw_example(frame, seed)?;
            let mut g = Graph::new();
            let b = self.model.bind(&mut g, groups);
            let rgb = g.constant(frame.rgb.clone());
            let sv = g.constant(sparse);
            let pred = forward_phase(&mut g, &b, &self.model.config, phase, rgb, sv, &mask)?;
            let loss = g.l1_loss(pred, &frame.depth_gt, &loss_mask)?;
            let value = g.value(loss).item();
            total_loss += scale * value;
            g.backward(loss)?;
            self.model.collect_grads(&g, &b)?;
            let mut k = 0;
            for &group in groups {
                for (_, p) in self.model.group_mut(group).iter_mut() {
                    let grad = p.value.take_grad().expect("collected");
                    if accum.len() <= k {
                        accum.push(vec![0.0; grad.len()]);
                    }
                    for (a, gi) in accum[k].iter_mut().zip(&grad) {
                        *a += scale * gi;
                    }
                    k += 1;
                }
            }
        }
        if !total_loss.is_finite() {
            let (param, magnitude) = self.model.named_params().map(|(n, p)| (n, p.value.max_abs())).fold(
                (String::new(), f64::NEG_INFINITY),
                |best, cur| {
                    if cur.1 > best.1 || cur.1.is_nan() {
                        cur
                    } else {
                        best
                    }
                },
            );
            return Err(TrainError::NonFiniteLoss {
                iteration,
                loss: total_loss,
                param,
                magnitude,
            });
        }
        let mut accum = accum.into_iter();
        for &group in groups {
            let params = self.model.group_mut(group);
            for (_, p) in params.iter_mut() {
                p.value.set_grad(accum.next().expect("one buffer per parameter"))?;
            }
            sgd_step(params, self.cfg.lr, self.cfg.momentum)?;
        }
        self.iteration += 1;
        Ok(LossRecord {
            iteration,
            phase,
            loss: total_loss,
        })
    }

    /// Steps until `until` iterations have run (or the schedule ends),
    /// handing every record to `on_step`.
    pub fn run_until(
        &mut self,
        until: u64,
        mut on_step: impl FnMut(&LossRecord) -> Result<(), TrainError>,
    ) -> Result<(), TrainError> {
        let stop = until.min(self.total_iterations());
        while self.iteration < stop {
            let rec = self.step()?;
            on_step(&rec)?;
        }
        Ok(())
    }

    /// Runs the remaining schedule.
    pub fn run(&mut self, on_step: impl FnMut(&LossRecord) -> Result<(), TrainError>) -> Result<(), TrainError> {
        self.run_until(u64::MAX, on_step)
    }

    /// Average training L1 loss of the current model over all frames, with
    /// the given seed for sampling. Uses the joint (or context-only) forward.
    pub fn eval_loss(&self, seed: u64) -> Result<f64, TrainError> {
        let mut total = 0.0;
        for frame in &self.frames {
            let (frame, sparse, mask, loss_mask) = self.draw_example(frame, derive_seed(seed, hash_str(&frame.id)))?;
            let pred = self.model.predict_depth(&frame.rgb, &sparse, &mask)?;
            let mut g = Graph::new();
            let p = g.constant(pred);
            let l = g.l1_loss(p, &frame.depth_gt, &loss_mask)?;
            total += g.value(l).item();
        }
        Ok(total / self.frames.len() as f64)
    }
}

/// Full training run from a config: loads the dataset split, trains, writes
/// the loss log (if configured) and the checkpoint.
pub fn train(cfg: &TrainConfig) -> Result<Checkpoint, TrainError> {
    let frames = load_split(&cfg.dataset, cfg.split)?;
    let mut trainer = Trainer::new(cfg.clone(), frames)?;
    let mut log = match &cfg.loss_log {
        Some(path) => Some((
            path.clone(),
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| FormatError::io(path, e))?),
        )),
        None => None,
    };
    trainer.run(|rec| {
        if let Some((path, w)) = log.as_mut() {
            w.write_all(rec.to_line().as_bytes())
                .map_err(|e| FormatError::io(path.as_path(), e))?;
        }
        Ok(())
    })?;
    if let Some((path, mut w)) = log {
        w.flush().map_err(|e| FormatError::io(path, e))?;
    }
    let ckpt = trainer.checkpoint();
    ckpt.save(&cfg.checkpoint)?;
    Ok(ckpt)
}
