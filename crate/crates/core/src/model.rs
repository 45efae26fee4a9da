//! The full trainable system: denoiser plus conditioner under one config.

use serde::{Deserialize, Serialize};

use crate::conditioner::{ConditionerConfig, ConditionerParams, InjectionMode};
use crate::denoiser::{DenoiserConfig, DenoiserParams};
use crate::rng::Rng;
use crate::schedule::Schedule;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub signal_len: usize,
    pub frame: usize,
    pub hop: usize,
    pub encoder_frame: usize,
    pub encoder_hop: usize,
    pub denoiser_hidden: usize,
    pub denoiser_inner: usize,
    pub denoiser_blocks: usize,
    pub encoder_width: usize,
    pub encoder_blocks: usize,
    pub emb_dim: usize,
    pub n_classes: usize,
    pub attn_dim: usize,
    pub max_step: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            signal_len: 256,
            frame: 64,
            hop: 32,
            encoder_frame: 64,
            encoder_hop: 16,
            denoiser_hidden: 64,
            denoiser_inner: 48,
            denoiser_blocks: 4,
            encoder_width: 48,
            encoder_blocks: 2,
            emb_dim: 64,
            n_classes: 10,
            attn_dim: 16,
            max_step: 50,
        }
    }
}

impl ModelConfig {
    pub fn conditioner(&self) -> ConditionerConfig {
        ConditionerConfig {
            signal_len: self.signal_len,
            frame: self.encoder_frame,
            hop: self.encoder_hop,
            width: self.encoder_width,
            blocks: self.encoder_blocks,
            emb_dim: self.emb_dim,
            n_classes: self.n_classes,
        }
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        DenoiserConfig {
            signal_len: self.signal_len,
            frame: self.frame,
            hop: self.hop,
            hidden: self.denoiser_hidden,
            inner: self.denoiser_inner,
            blocks: self.denoiser_blocks,
            emb_dim: self.emb_dim,
            attn_dim: self.attn_dim,
            max_step: self.max_step,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub injection: InjectionMode,
    /// When false the encoder is never run and the denoiser sees no
    /// embedding: the unconditioned baseline system.
    pub use_conditioner: bool,
    pub denoiser: DenoiserParams,
    pub conditioner: ConditionerParams,
}

impl Model {
    pub fn init(
        config: &ModelConfig,
        injection: InjectionMode,
        use_conditioner: bool,
        schedule: &Schedule,
        rng: &Rng,
    ) -> Model {
        assert_eq!(
            config.max_step,
            schedule.step_count(),
            "model max_step must match the schedule"
        );
        let abar: Vec<f64> = (0..=schedule.step_count()).map(|t| schedule.alpha_bar(t)).collect();
        Model {
            config: config.clone(),
            injection,
            use_conditioner,
            denoiser: DenoiserParams::init(&config.denoiser(), injection, abar, rng),
            conditioner: ConditionerParams::init(&config.conditioner(), rng),
        }
    }

    pub fn for_each_tensor<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        self.denoiser.for_each_tensor(f);
        self.conditioner.for_each_tensor(f);
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        self.denoiser.for_each_tensor_mut(f);
        self.conditioner.for_each_tensor_mut(f);
    }

    pub fn param_count(&self) -> usize {
        self.denoiser.param_count() + self.conditioner.param_count()
    }

    /// Named parameter tensors in visit order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.for_each_tensor(&mut |name, t| out.push((name, t.clone())));
        out
    }
}
