//! The full model bundle: codec, denoiser, text table, auxiliary loss
//! networks, schedule, and the parameter store that holds all weights.

use framecast_autograd::ParamStore;
use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecConfig};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{CoreError, Result};
use crate::rng::derive_rng;
use crate::schedule::NoiseSchedule;
use crate::text::{register_text_table, Vocab};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub codec: CodecConfig,
    pub denoiser: DenoiserConfig,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::full()
    }
}

impl ModelConfig {
    /// Full-size profile.
    pub fn full() -> ModelConfig {
        ModelConfig {
            codec: CodecConfig::full(),
            denoiser: DenoiserConfig::full(),
            schedule_steps: crate::schedule::DEFAULT_NUM_STEPS,
            beta_start: crate::schedule::DEFAULT_BETA_START,
            beta_end: crate::schedule::DEFAULT_BETA_END,
        }
    }

    pub fn desk() -> ModelConfig {
        ModelConfig {
            codec: CodecConfig::desk(),
            denoiser: DenoiserConfig::desk(),
            schedule_steps: crate::schedule::DEFAULT_NUM_STEPS,
            beta_start: crate::schedule::DEFAULT_BETA_START,
            beta_end: crate::schedule::DEFAULT_BETA_END,
        }
    }
}

/// Everything inference needs; training additionally mutates the store.
pub struct Model {
    pub codec: Codec,
    pub denoiser: Denoiser,
    pub vocab: Vocab,
    pub schedule: NoiseSchedule,
    pub store: ParamStore,
    /// Global latent rescale toward unit std; 1.0 until calibrated.
    pub latent_scale: f64,
}

impl Model {
    /// Fresh model with seeded initialization. The vocabulary is fixed at
    /// construction (built from the dataset's instruction corpus).
    pub fn new(config: &ModelConfig, vocab: Vocab, seed: u64) -> Result<Model> {
        if config.codec.latent_channels != config.denoiser.latent_channels {
            return Err(CoreError::Config(format!(
                "codec latent channels {} != denoiser latent channels {}",
                config.codec.latent_channels, config.denoiser.latent_channels
            )));
        }
        let codec = Codec::new(config.codec.clone())?;
        let denoiser = Denoiser::new(config.denoiser.clone())?;
        let schedule =
            NoiseSchedule::linear(config.schedule_steps, config.beta_start, config.beta_end)?;

        let mut store = ParamStore::new();
        let mut rng = derive_rng(seed, "model-init");
        codec.register(&mut store, &mut rng);
        register_text_table(
            &mut store,
            &mut rng,
            vocab.size(),
            config.denoiser.context_dim,
        );
        denoiser.register(&mut store, &mut rng);
        crate::loss::register_perceptual(&mut store, &mut rng);
        crate::loss::register_discriminator(&mut store, &mut rng);

        Ok(Model {
            codec,
            denoiser,
            vocab,
            schedule,
            store,
            latent_scale: 1.0,
        })
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            codec: self.codec.cfg.clone(),
            denoiser: self.denoiser.cfg.clone(),
            schedule_steps: self.schedule.num_steps,
            beta_start: self.schedule.betas[0],
            beta_end: *self.schedule.betas.last().expect("nonempty schedule"),
        }
    }

    /// The pixel resolution this model operates at must divide evenly into
    /// latents and survive the U-Net's downsampling depth.
    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let (lh, lw) = self.codec.latent_shape(h, w)?;
        let div = 1usize << (self.denoiser.cfg.stages() - 1);
        if lh % div != 0 || lw % div != 0 {
            return Err(CoreError::shape(
                "model resolution",
                format!(
                    "{h}x{w} gives latent {lh}x{lw}, not divisible by the U-Net depth factor {div}"
                ),
            ));
        }
        Ok(())
    }
}
