use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::diffusion::{draw_training, make_schedule, training_inputs, NoiseSchedule, TrainingExample};
use crate::error::{Error, Result};
use crate::model::optim::AdamW;
use crate::model::{Denoiser, Init};
use crate::sequence::{apply_fi_pose_masking, build_unified, sample_subtask, UnifiedSequence};
use crate::world::EpisodeRecord;

/// One training episode in unified form.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub sequence: UnifiedSequence,
    pub scene_radius: f64,
}

impl TrainItem {
    pub fn from_episode(ep: &EpisodeRecord) -> Result<Self> {
        Ok(TrainItem {
            sequence: build_unified(ep)?,
            scene_radius: ep.scene.radius,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Independent stream per (seed, step, batch element).
pub fn element_rng(seed: u64, step: u64, element: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&step.to_le_bytes());
    key[16..24].copy_from_slice(&element.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

pub struct Trainer {
    pub model: Denoiser<f32>,
    pub config: RunConfig,
    pub seed: u64,
    optimizer: AdamW,
    schedule: NoiseSchedule,
    step: u64,
}

impl Trainer {
    /// Fresh weights from `seed`, or `init` weights for the fine-tune stage.
    pub fn new(config: RunConfig, seed: u64, init: Option<Denoiser<f32>>) -> Result<Self> {
        config.validate()?;
        let model = match init {
            Some(m) => {
                if m.config() != &config.denoiser_config() {
                    return Err(Error::validation(
                        "model",
                        "initial checkpoint has a different architecture",
                    ));
                }
                m
            }
            None => Denoiser::new(config.denoiser_config(), seed, Init::Standard)?,
        };
        Ok(Trainer {
            optimizer: AdamW::new(config.training.optimizer.clone(), model.num_params()),
            schedule: make_schedule(config.schedule.levels)?,
            model,
            config,
            seed,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn element(&self, data: &[TrainItem], b: u64) -> Result<(f64, Vec<f32>)> {
        let mut rng = element_rng(self.seed, self.step, b);
        let item = &data[rand::Rng::random_range(&mut rng, 0..data.len())];
        let pair = sample_subtask(&item.sequence, &mut rng, self.config.ablation.training_mode())?;
        let pair = apply_fi_pose_masking(pair, self.config.ablation);
        let example = TrainingExample::from_pair(&pair, self.config.embed_mode, item.scene_radius)?;
        let draw = draw_training(&mut rng, example.len(), example.frame_len, &self.schedule);
        let (noisy, cond) = training_inputs(&example, &draw, &self.schedule)?;
        self.model.loss_and_grad(&noisy, &cond, &draw.eps)
    }

    /// One optimizer update on a batch drawn from `data`.
    ///
    /// Batch elements run in parallel; the reduction order is fixed so the
    /// result does not depend on the thread count.
    pub fn train_step(&mut self, data: &[TrainItem]) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::Size("no training episodes".into()));
        }
        let batch = self.config.training.batch_size as u64;
        let results: Vec<Result<(f64, Vec<f32>)>> = (0..batch).into_par_iter().map(|b| self.element(data, b)).collect();
        let mut loss = 0.0;
        let mut grads = vec![0.0f32; self.model.num_params()];
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (acc, v) in grads.iter_mut().zip(&g) {
                *acc += v;
            }
        }
        let loss = loss / batch as f64;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("loss is {loss} at step {}", self.step)));
        }
        let inv = 1.0 / batch as f32;
        grads.iter_mut().for_each(|g| *g *= inv);
        let grad_norm = self.optimizer.step(&mut self.model.params, &grads);
        if !grad_norm.is_finite() {
            return Err(Error::Numerical(format!(
                "gradient norm is {grad_norm} at step {}",
                self.step
            )));
        }
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss,
            grad_norm,
        })
    }
}
