//! Denoiser network predicting the combined-noise target from
//! `(x_t, y, t, embedding)`.
//!
//! The two signals are framed and stacked on the feature axis, projected to a
//! hidden width, offset by a projected sinusoidal step encoding, passed
//! through residual blocks with the conditioner injected at every block, and
//! synthesized back to signal length by constant overlap-add.
//!
//! The trunk parametrizes a clean-signal estimate as bounded per-frame gains
//! on the noisy signal in an orthonormal frame basis; the returned prediction
//! is the combined-noise residual
//! `(x_t - sqrt(abar_t) * clean_estimate) / sqrt(1 - abar_t)`, which equals
//! the training target exactly when the clean estimate is exact. Errors made
//! at early reverse steps then decay through the chain instead of
//! accumulating, and the final near-noiseless step dominates output quality.

use serde::{Deserialize, Serialize};

use crate::conditioner::{inject, InjectionMode, InjectionParams};
use crate::error::{Error, Result};
use crate::nn;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub signal_len: usize,
    pub frame: usize,
    pub hop: usize,
    pub hidden: usize,
    pub inner: usize,
    pub blocks: usize,
    pub emb_dim: usize,
    pub attn_dim: usize,
    pub max_step: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            signal_len: 256,
            frame: 64,
            hop: 32,
            hidden: 64,
            inner: 48,
            blocks: 4,
            emb_dim: 64,
            attn_dim: 16,
            max_step: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserBlockParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub in_w: Tensor,
    pub in_b: Tensor,
    pub time_w: Tensor,
    pub time_b: Tensor,
    pub blocks: Vec<DenoiserBlockParams>,
    pub inject: Vec<InjectionParams>,
    /// Shared projection of the frame-pooled context, broadcast back to every
    /// frame in each block so local filters see the global structure.
    pub ctx_w: Tensor,
    pub ctx_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    /// Constant synthesis matrix, rebuilt from the config (never trained or
    /// serialized).
    ola: Tensor,
    /// Constant orthonormal frame analysis basis (rebuilt from the config).
    basis: Tensor,
    /// Cumulative signal-retention coefficients of the diffusion schedule,
    /// indexed 0..=max_step (constants, rebuilt from the schedule).
    abar: Vec<f64>,
}

impl DenoiserParams {
    pub fn init(
        config: &DenoiserConfig,
        mode: InjectionMode,
        abar: Vec<f64>,
        rng: &Rng,
    ) -> Self {
        assert_eq!(abar.len(), config.max_step + 1, "abar must cover 0..=max_step");
        let c = config;
        let mut k = 0u64;
        let mut next = move || {
            k += 1;
            rng.substream(crate::rng::streams::INIT, 3000 + k)
        };
        let blocks = (0..c.blocks)
            .map(|_| DenoiserBlockParams {
                w1: nn::init_weight(&mut next(), c.hidden, c.inner),
                b1: nn::zeros_row(c.inner),
                w2: nn::init_weight(&mut next(), c.inner, c.hidden),
                b2: nn::zeros_row(c.hidden),
            })
            .collect();
        let inject = (0..c.blocks)
            .map(|i| InjectionParams::init(mode, c.hidden, c.emb_dim, c.attn_dim, rng, i as u64))
            .collect();
        DenoiserParams {
            config: config.clone(),
            in_w: nn::init_weight(&mut next(), 2 * c.frame, c.hidden),
            in_b: nn::zeros_row(c.hidden),
            time_w: nn::init_weight(&mut next(), c.hidden, c.hidden),
            time_b: nn::zeros_row(c.hidden),
            blocks,
            inject,
            ctx_w: nn::init_weight(&mut next(), c.hidden, c.hidden),
            ctx_b: nn::zeros_row(c.hidden),
            // zero weights with a positive bias start the gains near 1, so
            // the initial clean estimate is close to the noisy signal
            out_w: Tensor::zeros(&[c.hidden, c.frame]),
            out_b: Tensor::from_vec(vec![1, c.frame], vec![2.0; c.frame]),
            ola: nn::overlap_add_matrix(c.signal_len, c.frame, c.hop),
            basis: nn::frame_basis(c.frame),
            abar,
        }
    }

    pub fn injection_mode(&self) -> InjectionMode {
        self.inject[0].mode()
    }

    pub fn for_each_tensor<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor)) {
        f("denoiser.in_w".into(), &self.in_w);
        f("denoiser.in_b".into(), &self.in_b);
        f("denoiser.time_w".into(), &self.time_w);
        f("denoiser.time_b".into(), &self.time_b);
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("denoiser.block{i}");
            f(format!("{p}.w1"), &b.w1);
            f(format!("{p}.b1"), &b.b1);
            f(format!("{p}.w2"), &b.w2);
            f(format!("{p}.b2"), &b.b2);
        }
        for (i, inj) in self.inject.iter().enumerate() {
            inj.for_each_tensor(&format!("denoiser.inject{i}"), f);
        }
        f("denoiser.ctx_w".into(), &self.ctx_w);
        f("denoiser.ctx_b".into(), &self.ctx_b);
        f("denoiser.out_w".into(), &self.out_w);
        f("denoiser.out_b".into(), &self.out_b);
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor)) {
        f("denoiser.in_w".into(), &mut self.in_w);
        f("denoiser.in_b".into(), &mut self.in_b);
        f("denoiser.time_w".into(), &mut self.time_w);
        f("denoiser.time_b".into(), &mut self.time_b);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("denoiser.block{i}");
            f(format!("{p}.w1"), &mut b.w1);
            f(format!("{p}.b1"), &mut b.b1);
            f(format!("{p}.w2"), &mut b.w2);
            f(format!("{p}.b2"), &mut b.b2);
        }
        for (i, inj) in self.inject.iter_mut().enumerate() {
            inj.for_each_tensor_mut(&format!("denoiser.inject{i}"), f);
        }
        f("denoiser.ctx_w".into(), &mut self.ctx_w);
        f("denoiser.ctx_b".into(), &mut self.ctx_b);
        f("denoiser.out_w".into(), &mut self.out_w);
        f("denoiser.out_b".into(), &mut self.out_b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, t| n += t.numel());
        n
    }
}

/// Predict the combined-noise target for latent `x_t` conditioned on the
/// noisy signal, the diffusion step, and (optionally) the acoustic embedding.
pub fn predict_eps(
    params: &DenoiserParams,
    x_t: &[f64],
    y: &[f64],
    t: usize,
    emb: Option<&Tensor>,
) -> Result<Tensor> {
    let c = &params.config;
    if x_t.len() != y.len() {
        return Err(Error::LengthMismatch { lhs: x_t.len(), rhs: y.len() });
    }
    if x_t.len() != c.signal_len {
        return Err(Error::LengthMismatch { lhs: x_t.len(), rhs: c.signal_len });
    }
    if t < 1 || t > c.max_step {
        return Err(Error::StepOutOfRange { t, t_max: c.max_step });
    }
    if let Some(e) = emb {
        if e.numel() != c.emb_dim {
            return Err(Error::LengthMismatch { lhs: e.numel(), rhs: c.emb_dim });
        }
    }

    let fx = nn::frame_signal(&Tensor::vector(x_t.to_vec()), c.frame, c.hop)?
        .matmul(&params.basis)?;
    let fy = nn::frame_signal(&Tensor::vector(y.to_vec()), c.frame, c.hop)?
        .matmul(&params.basis)?;
    let stacked = fx.concat(&fy, 1)?;
    let n_frames = stacked.rows();

    let mut h = nn::linear(&stacked, &params.in_w, Some(&params.in_b))?;
    let t_enc = nn::time_encoding(t, c.hidden);
    let t_proj = nn::linear(&t_enc, &params.time_w, Some(&params.time_b))?;
    h = h.add(&nn::broadcast_rows(&t_proj, n_frames)?)?;

    let pool = Tensor::from_vec(vec![1, n_frames], vec![1.0 / n_frames as f64; n_frames]);
    for (block, inj) in params.blocks.iter().zip(&params.inject) {
        let fused = match emb {
            Some(e) => inject(inj, &h, e)?,
            None => h.clone(),
        };
        let ctx = nn::linear(&pool.matmul(&fused)?, &params.ctx_w, Some(&params.ctx_b))?;
        let fused = fused.add(&nn::broadcast_rows(&ctx, n_frames)?)?;
        let z = nn::linear(&fused, &block.w1, Some(&block.b1))?.tanh();
        let z = nn::linear(&z, &block.w2, Some(&block.b2))?;
        h = h.add(&z)?;
    }

    // bounded per-frame gains on the noisy signal in the analysis basis
    let logits = nn::linear(&h, &params.out_w, Some(&params.out_b))?;
    let gains = logits.mul_scalar(0.5).tanh().mul_scalar(0.5).add_scalar(0.5);
    let masked = gains.mul(&fy)?;
    let frames_time = masked.matmul(&params.basis.transpose()?)?;
    let flat = frames_time.reshape(&[1, frames_time.numel()])?;
    let clean_hat = flat.matmul(&params.ola)?.reshape(&[c.signal_len])?;

    // combined-noise residual via the forward identity
    let abar = params.abar[t];
    Ok(Tensor::vector(x_t.to_vec())
        .sub(&clean_hat.mul_scalar(abar.sqrt()))?
        .mul_scalar(1.0 / (1.0 - abar).sqrt()))
}

/// Mean absolute error between predictions and targets over a batch.
pub fn diff_loss(predictions: &[Tensor], targets: &[Tensor]) -> Result<Tensor> {
    if predictions.is_empty() || predictions.len() != targets.len() {
        return Err(Error::EmptyBatch);
    }
    let mut acc = predictions[0].l1(&targets[0])?;
    for (p, t) in predictions.iter().zip(targets).skip(1) {
        acc = acc.add(&p.l1(t)?)?;
    }
    Ok(acc.mul_scalar(1.0 / predictions.len() as f64))
}
