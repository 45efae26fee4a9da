//! Forward (corrupting) process and the supervised combined-noise target.
//!
//! At step t the latent mixes the clean signal, the noisy signal, and fresh
//! Gaussian noise:
//! `x_t = (1-w_t)*sqrt(abar_t)*x0 + w_t*sqrt(abar_t)*y + sqrt(delta_t)*eps`.
//! The denoiser is trained to predict the combined target
//! `C_t = w_t*sqrt(abar_t)/sqrt(1-abar_t)*(y-x0) + sqrt(delta_t)/sqrt(1-abar_t)*eps`,
//! which mixes the non-Gaussian residual `y - x0` with the Gaussian draw.
//! Substituting the exact target into the posterior-mean combination of
//! [`crate::schedule`] reproduces the exact conditional mean.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schedule::Schedule;
use crate::tensor::{gauss, Tensor};

/// One draw from the forward process, with the noise that realized it and
/// the training target built from the same draw.
#[derive(Debug, Clone)]
pub struct DiffusionSample {
    pub t: usize,
    pub x_t: Tensor,
    pub eps: Tensor,
    pub target: Tensor,
}

fn check_lengths(x0: &[f64], y: &[f64]) -> Result<()> {
    if x0.len() != y.len() {
        return Err(Error::LengthMismatch { lhs: x0.len(), rhs: y.len() });
    }
    Ok(())
}

fn check_step(s: &Schedule, t: usize) -> Result<()> {
    if t < 1 || t > s.step_count() {
        return Err(Error::StepOutOfRange { t, t_max: s.step_count() });
    }
    Ok(())
}

/// Sample the latent at step `t` given clean `x0` and noisy `y`.
pub fn forward_sample(
    s: &Schedule,
    x0: &[f64],
    y: &[f64],
    t: usize,
    rng: &mut Rng,
) -> Result<DiffusionSample> {
    check_lengths(x0, y)?;
    check_step(s, t)?;
    let eps = gauss(rng, &[x0.len()]);
    let (cx, cy) = mean_coefficients(s, t);
    let sd = s.delta(t).sqrt();
    let x_t: Vec<f64> = x0
        .iter()
        .zip(y)
        .zip(eps.data())
        .map(|((x, y), e)| cx * x + cy * y + sd * e)
        .collect();
    let target = build_target(s, x0, y, eps.data(), t)?;
    Ok(DiffusionSample { t, x_t: Tensor::vector(x_t), eps, target })
}

/// Coefficients of the latent mean on (x0, y) at step `t`.
pub fn mean_coefficients(s: &Schedule, t: usize) -> (f64, f64) {
    let root = s.alpha_bar(t).sqrt();
    ((1.0 - s.w(t)) * root, s.w(t) * root)
}

/// Ground-truth combined noise the denoiser must predict.
pub fn build_target(
    s: &Schedule,
    x0: &[f64],
    y: &[f64],
    eps: &[f64],
    t: usize,
) -> Result<Tensor> {
    check_lengths(x0, y)?;
    if eps.len() != x0.len() {
        return Err(Error::LengthMismatch { lhs: eps.len(), rhs: x0.len() });
    }
    check_step(s, t)?;
    let denom = (1.0 - s.alpha_bar(t)).sqrt();
    let k_resid = s.w(t) * s.alpha_bar(t).sqrt() / denom;
    let k_eps = s.delta(t).sqrt() / denom;
    let data: Vec<f64> = x0
        .iter()
        .zip(y)
        .zip(eps)
        .map(|((x, y), e)| k_resid * (y - x) + k_eps * e)
        .collect();
    Ok(Tensor::vector(data))
}

/// Recover the Gaussian draw that realized a latent `x_t`.
pub fn recover_eps(s: &Schedule, x0: &[f64], y: &[f64], x_t: &[f64], t: usize) -> Result<Tensor> {
    check_lengths(x0, y)?;
    check_step(s, t)?;
    let (cx, cy) = mean_coefficients(s, t);
    let sd = s.delta(t).sqrt();
    let data: Vec<f64> = x0
        .iter()
        .zip(y)
        .zip(x_t)
        .map(|((x, y), xt)| (xt - cx * x - cy * y) / sd)
        .collect();
    Ok(Tensor::vector(data))
}

/// The exact prediction an ideal denoiser would emit for latent `x_t`: the
/// target rebuilt from the noise consistent with that latent.
pub fn oracle_prediction(
    s: &Schedule,
    x0: &[f64],
    y: &[f64],
    x_t: &[f64],
    t: usize,
) -> Result<Tensor> {
    let eps = recover_eps(s, x0, y, x_t, t)?;
    build_target(s, x0, y, eps.data(), t)
}
