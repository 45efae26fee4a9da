//! Reverse-process inference: start from a noisy-signal-centered latent and
//! walk the chain down to an enhanced estimate.
//!
//! The conditioner embedding is computed once per enhancement call and reused
//! at every step. Reduced-step schedules reuse the same Gaussian-conditioning
//! machinery with coefficients re-derived between retained levels.

use serde::{Deserialize, Serialize};

use crate::conditioner::encode;
use crate::denoiser::predict_eps;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::{streams, Rng};
use crate::schedule::{derive_posterior_between, Schedule};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum StepSelection {
    /// Every step from T down to 1.
    Full,
    /// Every n-th step, always ending at 1.
    EveryNth(usize),
    /// Explicit strictly decreasing levels ending at 1.
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: StepSelection,
    pub deterministic_last: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: StepSelection::Full, deterministic_last: true, seed: 42 }
    }
}

impl StepSelection {
    /// Descending list of visited levels, ending at 1.
    pub fn resolve(&self, t_max: usize) -> Result<Vec<usize>> {
        let levels = match self {
            StepSelection::Full => (1..=t_max).rev().collect::<Vec<usize>>(),
            StepSelection::EveryNth(n) => {
                if *n == 0 {
                    return Err(Error::Config("step stride must be >= 1".into()));
                }
                let mut v: Vec<usize> = (1..=t_max).rev().step_by(*n).collect();
                if *v.last().unwrap() != 1 {
                    v.push(1);
                }
                v
            }
            StepSelection::Explicit(v) => v.clone(),
        };
        if levels.is_empty() {
            return Err(Error::Config("empty step selection".into()));
        }
        if levels[0] > t_max {
            return Err(Error::StepOutOfRange { t: levels[0], t_max });
        }
        if *levels.last().unwrap() != 1 {
            return Err(Error::Config("step selection must end at 1".into()));
        }
        for pair in levels.windows(2) {
            if pair[1] >= pair[0] {
                return Err(Error::Config("step selection must be strictly decreasing".into()));
            }
        }
        Ok(levels)
    }
}

/// One reverse transition from level `hi` to level `lo` given a prediction of
/// the combined noise. `lo == 0` yields the final estimate.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step_with_prediction(
    schedule: &Schedule,
    x: &[f64],
    y: &[f64],
    hi: usize,
    lo: usize,
    eps_hat: &[f64],
    rng: &mut Rng,
    deterministic: bool,
) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { lhs: x.len(), rhs: y.len() });
    }
    let c = derive_posterior_between(schedule, hi, lo)?;
    let sd = if deterministic { 0.0 } else { c.delta_tilde.sqrt() };
    Ok(x.iter()
        .zip(y)
        .zip(eps_hat)
        .map(|((xv, yv), e)| {
            let mean = c.c_x * xv + c.c_y * yv - c.c_eps * e;
            if sd > 0.0 {
                mean + sd * rng.normal()
            } else {
                mean
            }
        })
        .collect())
}

/// One reverse step of the trained model at step `t` (down to `t-1`).
#[allow(clippy::too_many_arguments)]
pub fn reverse_step(
    model: &Model,
    schedule: &Schedule,
    x_t: &[f64],
    y: &[f64],
    t: usize,
    emb: Option<&Tensor>,
    rng: &mut Rng,
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    let eps_hat = predict_eps(&model.denoiser, x_t, y, t, emb)?;
    let deterministic = t == 1 && cfg.deterministic_last;
    reverse_step_with_prediction(schedule, x_t, y, t, t - 1, eps_hat.data(), rng, deterministic)
}

/// Run the full reverse chain with an arbitrary prediction function
/// (the trained denoiser, or an oracle in tests).
pub fn enhance_with(
    schedule: &Schedule,
    y: &[f64],
    cfg: &SamplerConfig,
    rng: &mut Rng,
    mut predict: impl FnMut(&[f64], usize) -> Result<Tensor>,
) -> Result<Vec<f64>> {
    let levels = cfg.steps.resolve(schedule.step_count())?;
    let start = levels[0];
    // initial latent centered on the noisy signal
    let root = schedule.alpha_bar(start).sqrt();
    let sd = schedule.delta(start).sqrt();
    let mut x: Vec<f64> = y.iter().map(|v| root * v + sd * rng.normal()).collect();

    for (i, &hi) in levels.iter().enumerate() {
        let lo = if i + 1 < levels.len() { levels[i + 1] } else { 0 };
        let eps_hat = predict(&x, hi)?;
        let deterministic = lo == 0 && cfg.deterministic_last;
        x = reverse_step_with_prediction(
            schedule,
            &x,
            y,
            hi,
            lo,
            eps_hat.data(),
            rng,
            deterministic,
        )?;
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteState { t: hi });
        }
    }
    Ok(x)
}

/// Enhance one noisy signal with a trained model. The embedding is encoded
/// exactly once and reused across all reverse steps.
pub fn enhance(
    model: &Model,
    schedule: &Schedule,
    y: &[f64],
    cfg: &SamplerConfig,
) -> Result<Vec<f64>> {
    let emb = if model.use_conditioner {
        Some(encode(&model.conditioner, y)?.embedding.detached())
    } else {
        None
    };
    let mut rng = Rng::new(cfg.seed).substream(streams::SAMPLER, 0);
    enhance_with(schedule, y, cfg, &mut rng, |x, t| {
        predict_eps(&model.denoiser, x, y, t, emb.as_ref())
    })
}
