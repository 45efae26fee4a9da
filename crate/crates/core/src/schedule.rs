//! Diffusion schedule: per-step noise levels, interpolation weights, and the
//! posterior coefficients of the conditional reverse process.
//!
//! The forward family interpolates the latent mean from the clean signal
//! toward the noisy one: at step t the latent is Gaussian with mean
//! `(1-w_t)*sqrt(abar_t)*x0 + w_t*sqrt(abar_t)*y` and variance
//! `delta_t = (1-abar_t) - w_t^2*abar_t`. A Gauss-Markov chain
//! `x_t = a_t*x_{t-1} + b_t*y + sigma_t*eps` realizes exactly these marginals
//! (see [`Schedule::transition`]), and conditioning that jointly Gaussian
//! chain on `(x_t, x0, y)` gives the reverse-step mean as a linear
//! combination `c_x*x_t + c_y*y - c_eps*target` with closed-form
//! coefficients. With `w == 0` everything collapses to the vanilla
//! denoising-diffusion formulas, which the tests use as a cross-check.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-step scalars of one reverse transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorCoefficients {
    /// Weight on the current latent x_t.
    pub c_x: f64,
    /// Weight on the conditioning noisy signal y.
    pub c_y: f64,
    /// Weight on the predicted combined noise (subtracted).
    pub c_eps: f64,
    /// Reverse-step variance.
    pub delta_tilde: f64,
}

/// One step of the Gauss-Markov chain realizing the interpolated marginals:
/// `x_t = decay * x_{t-1} + noisy_gain * y + sqrt(var) * eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainTransition {
    pub decay: f64,
    pub noisy_gain: f64,
    pub var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BetaSpec {
    /// Linearly spaced from `start` to `end` over the step count.
    Linear { start: f64, end: f64 },
    /// Explicit per-step values, one per step.
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WeightSpec {
    /// `w_t = min(1, kappa * sqrt((1-abar_t)/abar_t))` with `kappa` chosen so
    /// the terminal weight is 1. Requires `abar_T < 0.5` to stay feasible.
    SqrtRatioCapped,
    /// All-zero weights: the vanilla (unconditional) chain.
    Zero,
    /// Explicit values indexed 0..=T; must start at 0 and be non-decreasing.
    Explicit(Vec<f64>),
}

/// Immutable precomputed schedule. Indexing is 1-based for per-step arrays
/// (`beta`, `beta_tilde`, `coeffs`) and 0-based-with-origin for the
/// cumulative ones (`alpha_bar(0) = 1`, `w(0) = 0`, `delta(0) = 0`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    step_count: usize,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
    w: Vec<f64>,
    delta: Vec<f64>,
    beta_tilde: Vec<f64>,
    coeffs: Vec<PosteriorCoefficients>,
}

pub const DEFAULT_STEP_COUNT: usize = 50;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.035;

impl Schedule {
    pub fn step_count(&self) -> usize {
        self.step_count
    }

    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.step_count).contains(&t), "beta({t})");
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        assert!((1..=self.step_count).contains(&t), "alpha({t})");
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn w(&self, t: usize) -> f64 {
        self.w[t]
    }

    pub fn delta(&self, t: usize) -> f64 {
        self.delta[t]
    }

    pub fn beta_tilde(&self, t: usize) -> f64 {
        assert!((1..=self.step_count).contains(&t), "beta_tilde({t})");
        self.beta_tilde[t - 1]
    }

    pub fn coeffs(&self, t: usize) -> &PosteriorCoefficients {
        assert!((1..=self.step_count).contains(&t), "coeffs({t})");
        &self.coeffs[t - 1]
    }

    /// Transition coefficients from step `t-1` to `t` of the realizing chain.
    pub fn transition(&self, t: usize) -> Result<ChainTransition> {
        if t < 1 || t > self.step_count {
            return Err(Error::StepOutOfRange { t, t_max: self.step_count });
        }
        let sqrt_alpha = self.alpha[t - 1].sqrt();
        let (w_prev, w_cur) = (self.w[t - 1], self.w[t]);
        let (decay, noisy_gain) = if w_prev < 1.0 {
            (
                sqrt_alpha * (1.0 - w_cur) / (1.0 - w_prev),
                self.alpha_bar[t].sqrt() * (w_cur - w_prev) / (1.0 - w_prev),
            )
        } else {
            (sqrt_alpha, 0.0)
        };
        let var = (self.delta[t] - decay * decay * self.delta[t - 1]).max(0.0);
        Ok(ChainTransition { decay, noisy_gain, var })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedule serializes")
    }

    pub fn from_json(s: &str) -> Result<Schedule> {
        let sched: Schedule = serde_json::from_str(s)?;
        validate(&sched)?;
        Ok(sched)
    }
}

/// Construct and validate a schedule.
pub fn build_schedule(step_count: usize, beta: &BetaSpec, weight: &WeightSpec) -> Result<Schedule> {
    if step_count < 2 {
        return Err(Error::Config(format!("step count must be >= 2, got {step_count}")));
    }
    let beta = match beta {
        BetaSpec::Linear { start, end } => (0..step_count)
            .map(|i| start + (end - start) * i as f64 / (step_count - 1) as f64)
            .collect::<Vec<f64>>(),
        BetaSpec::Explicit(v) => {
            if v.len() != step_count {
                return Err(Error::Config(format!(
                    "explicit beta length {} != step count {step_count}",
                    v.len()
                )));
            }
            v.clone()
        }
    };
    for (i, b) in beta.iter().enumerate() {
        if !(*b > 0.0 && *b < 1.0) {
            return Err(Error::InfeasibleSchedule {
                reason: format!("beta[{}] = {b} outside (0, 1)", i + 1),
            });
        }
    }

    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(step_count + 1);
    alpha_bar.push(1.0);
    for a in &alpha {
        alpha_bar.push(alpha_bar.last().unwrap() * a);
    }

    let w: Vec<f64> = match weight {
        WeightSpec::Zero => vec![0.0; step_count + 1],
        WeightSpec::SqrtRatioCapped => {
            let ratio = |abar: f64| ((1.0 - abar) / abar).sqrt();
            let kappa = 1.0 / ratio(alpha_bar[step_count]);
            (0..=step_count).map(|t| (kappa * ratio(alpha_bar[t])).min(1.0)).collect()
        }
        WeightSpec::Explicit(v) => {
            if v.len() != step_count + 1 {
                return Err(Error::Config(format!(
                    "explicit w length {} != step count + 1 = {}",
                    v.len(),
                    step_count + 1
                )));
            }
            v.clone()
        }
    };

    let delta: Vec<f64> = (0..=step_count)
        .map(|t| (1.0 - alpha_bar[t]) - w[t] * w[t] * alpha_bar[t])
        .collect();
    let beta_tilde: Vec<f64> = (1..=step_count)
        .map(|t| (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]) * beta[t - 1])
        .collect();

    let mut sched = Schedule {
        step_count,
        beta,
        alpha,
        alpha_bar,
        w,
        delta,
        beta_tilde,
        coeffs: Vec::new(),
    };
    validate(&sched)?;
    sched.coeffs = (1..=step_count)
        .map(|t| derive_posterior_between(&sched, t, t - 1))
        .collect::<Result<Vec<_>>>()?;
    Ok(sched)
}

/// The default configuration: linear beta over 50 steps with the capped
/// square-root-ratio weight curve.
pub fn default_schedule() -> Result<Schedule> {
    build_schedule(
        DEFAULT_STEP_COUNT,
        &BetaSpec::Linear { start: DEFAULT_BETA_START, end: DEFAULT_BETA_END },
        &WeightSpec::SqrtRatioCapped,
    )
}

fn validate(s: &Schedule) -> Result<()> {
    let t_max = s.step_count;
    if s.w[0] != 0.0 {
        return Err(Error::InfeasibleSchedule { reason: format!("w[0] = {} != 0", s.w[0]) });
    }
    for t in 1..=t_max {
        if s.w[t] < s.w[t - 1] {
            return Err(Error::InfeasibleSchedule {
                reason: format!("w not monotone at step {t}: {} < {}", s.w[t], s.w[t - 1]),
            });
        }
        if s.w[t] > 1.0 {
            return Err(Error::InfeasibleSchedule {
                reason: format!("w[{t}] = {} exceeds 1", s.w[t]),
            });
        }
        if s.delta[t] <= 0.0 {
            return Err(Error::InfeasibleSchedule {
                reason: format!(
                    "delta[{t}] = {} <= 0: w grows too fast relative to alpha_bar decay",
                    s.delta[t]
                ),
            });
        }
        let tr = s.transition(t)?;
        if s.delta[t] - tr.decay * tr.decay * s.delta[t - 1] < -1e-12 {
            return Err(Error::InfeasibleSchedule {
                reason: format!("negative transition variance at step {t}"),
            });
        }
    }
    Ok(())
}

/// Reverse-step coefficients from level `hi` down to level `lo` (< hi).
///
/// The returned coefficients satisfy: for the jointly Gaussian pair
/// `(x_lo, x_hi)` of the realizing chain conditioned on `(x0, y)`,
/// `E[x_lo | x_hi] = c_x*x_hi + c_y*y - c_eps*target(x0, y, eps)` where `eps`
/// is the noise realizing `x_hi`, and `Var[x_lo | x_hi] = delta_tilde`.
/// Consecutive levels give the single-step posterior; skipping levels gives
/// the coefficients for reduced-step sampling.
pub fn derive_posterior_between(
    s: &Schedule,
    hi: usize,
    lo: usize,
) -> Result<PosteriorCoefficients> {
    if hi < 1 || hi > s.step_count {
        return Err(Error::StepOutOfRange { t: hi, t_max: s.step_count });
    }
    if lo >= hi {
        return Err(Error::StepOutOfRange { t: lo, t_max: hi - 1 });
    }
    let abar_h = s.alpha_bar[hi];
    let abar_l = s.alpha_bar[lo];
    let (w_h, w_l) = (s.w[hi], s.w[lo]);
    let (d_h, d_l) = (s.delta[hi], s.delta[lo]);

    // Accumulated decay of the chain from lo to hi (product of per-step
    // decays, telescoped).
    let acc = if w_l < 1.0 {
        (abar_h / abar_l).sqrt() * (1.0 - w_h) / (1.0 - w_l)
    } else {
        (abar_h / abar_l).sqrt()
    };

    let gain = acc * d_l / d_h;
    let c_x = (1.0 - w_l) * (abar_l / abar_h).sqrt() + w_h * gain;
    let sqrt_one_minus_abar = (1.0 - abar_h).sqrt();
    let c_eps = sqrt_one_minus_abar * (c_x - gain);
    let c_y = w_l * abar_l.sqrt() - c_x * w_h * abar_h.sqrt()
        + c_eps * w_h * abar_h.sqrt() / sqrt_one_minus_abar;
    let delta_tilde = (d_l * (d_h - acc * acc * d_l) / d_h).max(0.0);

    Ok(PosteriorCoefficients { c_x, c_y, c_eps, delta_tilde })
}

/// Single-step posterior coefficients at step `t` (from `t` down to `t-1`).
pub fn derive_posterior(s: &Schedule, t: usize) -> Result<PosteriorCoefficients> {
    if t < 1 {
        return Err(Error::StepOutOfRange { t, t_max: s.step_count });
    }
    derive_posterior_between(s, t, t - 1)
}
