//! Shared machinery for the integration and acceptance suites: the
//! Monte Carlo posterior oracle, finite-difference gradient suites, and a
//! lazily trained default-configuration fixture reused across criteria.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use diffse_core::conditioner::{cross_entropy, encode, ConditionerConfig, ConditionerParams};
use diffse_core::datagen::{generate_records, Record, Split};
use diffse_core::denoiser::{predict_eps, DenoiserConfig, DenoiserParams};
use diffse_core::diffusion::build_target;
use diffse_core::experiment::{
    enhance_records, evaluate_records, run_train, ExperimentConfig,
};
use diffse_core::metrics::UtteranceEval;
use diffse_core::model::Model;
use diffse_core::rng::Rng;
use diffse_core::schedule::{build_schedule, derive_posterior, BetaSpec, Schedule, WeightSpec};
use diffse_core::tape::{backward, watch, with_tape};
use diffse_core::tensor::{gauss, Tensor};
use diffse_core::training::TrainReport;

// ── Monte Carlo posterior oracle ────────────────────────────────────────

/// Oracle-side transition from level t-1 to t, re-derived from the
/// interpolated marginals independently of the library's posterior code.
pub fn oracle_transition(s: &Schedule, t: usize) -> (f64, f64, f64) {
    let (w_prev, w_cur) = (s.w(t - 1), s.w(t));
    let ratio = (s.alpha_bar(t) / s.alpha_bar(t - 1)).sqrt();
    let decay = ratio * (1.0 - w_cur) / (1.0 - w_prev);
    let gain = s.alpha_bar(t).sqrt() * (w_cur - w_prev) / (1.0 - w_prev);
    let var = s.delta(t) - decay * decay * s.delta(t - 1);
    assert!(var >= -1e-12, "oracle transition variance {var}");
    (decay, gain, var.max(0.0))
}

pub fn latent_mean(s: &Schedule, t: usize, x0: f64, y: f64) -> f64 {
    (1.0 - s.w(t)) * s.alpha_bar(t).sqrt() * x0 + s.w(t) * s.alpha_bar(t).sqrt() * y
}

pub fn random_feasible_schedule(rng: &mut Rng) -> Schedule {
    let t_count = 3 + rng.uniform_int(8) as usize; // 3..=10
    let betas: Vec<f64> = (0..t_count).map(|_| rng.uniform_range(0.05, 0.35)).collect();
    let cap = rng.uniform_range(0.3, 0.95);
    let mut alpha_bar = 1.0;
    let mut envelope = vec![0.0];
    for b in &betas {
        alpha_bar *= 1.0 - b;
        envelope.push(((1.0 - alpha_bar) / alpha_bar).sqrt());
    }
    let top = envelope[t_count];
    let w: Vec<f64> = envelope.iter().map(|e| cap * e / top * top.min(1.0)).collect();
    build_schedule(t_count, &BetaSpec::Explicit(betas), &WeightSpec::Explicit(w))
        .expect("constructed schedule must be feasible")
}

/// Residual test of the derived posterior against a simulated joint: with
/// exact coefficients the residual is zero-mean noise of variance
/// `delta_tilde`, uncorrelated with the conditioning latent. All three
/// statistics are checked within three standard errors.
pub fn posterior_residual_suite(n: usize, n_schedules: u64) {
    let mut seed_rng = Rng::new(20240811);
    for schedule_idx in 0..n_schedules {
        let s = random_feasible_schedule(&mut seed_rng);
        let x0 = seed_rng.uniform_range(-1.0, 1.0);
        let y = seed_rng.uniform_range(-1.0, 1.0);
        for t in 1..=s.step_count() {
            let (a, b, var) = oracle_transition(&s, t);
            let sigma = var.sqrt();
            let c = derive_posterior(&s, t).unwrap();
            let mu_prev = latent_mean(&s, t - 1, x0, y);
            let mu_cur = latent_mean(&s, t, x0, y);
            let sd_prev = s.delta(t - 1).sqrt();
            let sd_cur = s.delta(t).sqrt();

            let mut rng = Rng::new(777).substream(schedule_idx, t as u64);
            let mut sum_r = 0.0;
            let mut sum_r2 = 0.0;
            let mut sum_x = 0.0;
            let mut sum_x2 = 0.0;
            let mut sum_rx = 0.0;
            for _ in 0..n {
                let x_prev = mu_prev + sd_prev * rng.normal();
                let x_cur = a * x_prev + b * y + sigma * rng.normal();
                let eps = (x_cur - mu_cur) / sd_cur;
                let target = build_target(&s, &[x0], &[y], &[eps], t).unwrap().data()[0];
                let r = x_prev - (c.c_x * x_cur + c.c_y * y - c.c_eps * target);
                sum_r += r;
                sum_r2 += r * r;
                sum_x += x_cur;
                sum_x2 += x_cur * x_cur;
                sum_rx += r * x_cur;
            }
            let nf = n as f64;
            let mean_r = sum_r / nf;
            let var_r = sum_r2 / nf - mean_r * mean_r;
            let mean_x = sum_x / nf;
            let var_x = sum_x2 / nf - mean_x * mean_x;
            let cov_rx = sum_rx / nf - mean_r * mean_x;

            let se_mean = (c.delta_tilde / nf).sqrt().max(1e-12);
            assert!(
                mean_r.abs() <= 3.0 * se_mean,
                "schedule {schedule_idx} t={t}: residual mean {mean_r} vs se {se_mean}"
            );
            if c.delta_tilde > 0.0 {
                let corr = cov_rx / (var_r.sqrt() * var_x.sqrt());
                assert!(
                    corr.abs() <= 4.5 / nf.sqrt(),
                    "schedule {schedule_idx} t={t}: residual correlation {corr}"
                );
            }
            let se_var = c.delta_tilde * (2.0 / nf).sqrt();
            assert!(
                (var_r - c.delta_tilde).abs() <= 3.0 * se_var.max(1e-12),
                "schedule {schedule_idx} t={t}: residual var {var_r} vs {}",
                c.delta_tilde
            );
        }
    }
}

/// With all-zero weights the derived posterior must reduce to the vanilla
/// reverse-process mean to within 1e-10 on random draws.
pub fn vanilla_reduction_suite() {
    let s = build_schedule(
        8,
        &BetaSpec::Linear { start: 0.02, end: 0.25 },
        &WeightSpec::Zero,
    )
    .unwrap();
    let mut rng = Rng::new(123);
    for t in 1..=8 {
        let c = derive_posterior(&s, t).unwrap();
        for _ in 0..10 {
            let dim = 1 + rng.uniform_int(8) as usize;
            for _ in 0..dim {
                let x0 = rng.normal();
                let y = rng.normal();
                let eps = rng.normal();
                let x_t = s.alpha_bar(t).sqrt() * x0 + (1.0 - s.alpha_bar(t)).sqrt() * eps;
                let ours = c.c_x * x_t + c.c_y * y - c.c_eps * eps;
                let vanilla =
                    (x_t - s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt() * eps) / s.alpha(t).sqrt();
                assert!((ours - vanilla).abs() < 1e-10, "t={t}: {ours} vs {vanilla}");
            }
        }
    }
}

// ── Finite-difference gradient suites ───────────────────────────────────

pub const FD_H: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn check_input_grad(name: &str, x: &Tensor, loss_of: impl Fn(&Tensor) -> Tensor) {
    let ((loss, xw), tape) = with_tape(|| {
        let xw = watch(x);
        (loss_of(&xw), xw)
    });
    assert!(loss.is_scalar(), "{name}: loss must be scalar");
    let grads = backward(&tape, &loss).unwrap();
    let analytic = grads.wrt(&xw).unwrap_or_else(|| Tensor::zeros(x.shape()));
    let mut max_err = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.to_vec();
        let mut minus = x.to_vec();
        plus[i] += FD_H;
        minus[i] -= FD_H;
        let fp = loss_of(&Tensor::from_vec(x.shape().to_vec(), plus)).item();
        let fm = loss_of(&Tensor::from_vec(x.shape().to_vec(), minus)).item();
        let numeric = (fp - fm) / (2.0 * FD_H);
        max_err = max_err.max(rel_err(analytic.data()[i], numeric));
    }
    assert!(max_err < FD_TOL, "{name}: max relative error {max_err:.3e}");
}

/// Every differentiable primitive against central differences at `points`
/// random points.
pub fn primitives_gradient_suite(points: u64) {
    let rng = Rng::new(314);
    for point in 0..points {
        let mut r = rng.substream(1, point);
        let a = gauss(&mut r, &[6]);
        let b = gauss(&mut r, &[6]).add_scalar(2.5);
        let m1 = gauss(&mut r, &[3, 4]);
        let m2 = gauss(&mut r, &[4, 2]);
        let w6 = gauss(&mut r, &[6]);
        let w32 = gauss(&mut r, &[3, 2]);
        let w43 = gauss(&mut r, &[4, 3]);
        let w12 = gauss(&mut r, &[12]);
        let rows = gauss(&mut r, &[3, 10]);

        check_input_grad("add", &a, {
            let (b, w) = (b.clone(), w6.clone());
            move |x| x.add(&b).unwrap().mul(&w).unwrap().sum()
        });
        check_input_grad("sub", &a, {
            let (b, w) = (b.clone(), w6.clone());
            move |x| b.sub(x).unwrap().mul(&w).unwrap().sum()
        });
        check_input_grad("mul", &a, {
            let (b, w) = (b.clone(), w6.clone());
            move |x| x.mul(&b).unwrap().mul(&w).unwrap().sum()
        });
        check_input_grad("add_scalar", &a, {
            let w = w6.clone();
            move |x| x.add_scalar(1.7).mul(&w).unwrap().sum()
        });
        check_input_grad("mul_scalar", &a, {
            let w = w6.clone();
            move |x| x.mul_scalar(-2.3).mul(&w).unwrap().sum()
        });
        check_input_grad("matmul_lhs", &m1, {
            let (m2, w) = (m2.clone(), w32.clone());
            move |x| x.matmul(&m2).unwrap().mul(&w).unwrap().sum()
        });
        check_input_grad("matmul_rhs", &m2, {
            let (m1, w) = (m1.clone(), w32.clone());
            move |x| m1.matmul(x).unwrap().mul(&w).unwrap().sum()
        });
        check_input_grad("concat0", &a, {
            let b = b.clone();
            let mut r2 = r.substream(9, 0);
            let w = gauss(&mut r2, &[12]);
            move |x| x.concat(&b, 0).unwrap().mul(&w).unwrap().sum()
        });
        check_input_grad("concat1", &m1, {
            let m1b = gauss(&mut r, &[3, 4]);
            let mut r2 = r.substream(9, 1);
            let w = gauss(&mut r2, &[3, 8]);
            move |x| x.concat(&m1b, 1).unwrap().mul(&w).unwrap().sum()
        });
        check_input_grad("slice", &w12, {
            let w = gauss(&mut r, &[5]);
            move |x| x.slice(3, 5).unwrap().mul(&w).unwrap().sum()
        });
        check_input_grad("reshape", &m1, {
            let w = w12.clone();
            move |x| x.reshape(&[12]).unwrap().mul(&w).unwrap().sum()
        });
        check_input_grad("transpose", &m1, {
            let w = w43.clone();
            move |x| x.transpose().unwrap().mul(&w).unwrap().sum()
        });
        check_input_grad("sum", &a, |x| x.sum());
        check_input_grad("mean", &a, |x| x.mean());
        check_input_grad("exp", &a, {
            let w = w6.clone();
            move |x| x.exp().mul(&w).unwrap().sum()
        });
        let pos = a.exp().detached();
        check_input_grad("log", &pos, {
            let w = w6.clone();
            move |x| x.log().mul(&w).unwrap().sum()
        });
        check_input_grad("tanh", &a, {
            let w = w6.clone();
            move |x| x.tanh().mul(&w).unwrap().sum()
        });
        let off_kink = Tensor::from_vec(
            vec![6],
            a.data().iter().map(|v| if v.abs() < 0.05 { v + 0.2 } else { *v }).collect(),
        );
        check_input_grad("relu", &off_kink, {
            let w = w6.clone();
            move |x| x.relu().mul(&w).unwrap().sum()
        });
        check_input_grad("softmax_vec", &a, {
            let w = w6.clone();
            move |x| x.softmax().mul(&w).unwrap().sum()
        });
        check_input_grad("softmax_rows", &rows, {
            let mut r2 = r.substream(9, 2);
            let w = gauss(&mut r2, &[3, 10]);
            move |x| x.softmax().mul(&w).unwrap().sum()
        });
        check_input_grad("l1_lhs", &a, {
            let b = b.clone();
            move |x| x.l1(&b).unwrap()
        });
        check_input_grad("l1_rhs", &b, {
            let a = a.clone();
            move |x| a.l1(x).unwrap()
        });
    }
}

pub fn check_param_components(
    label: &str,
    analytic: &Tensor,
    base: &Tensor,
    n_probe: usize,
    rng: &mut Rng,
    eval: impl Fn(&Tensor) -> f64,
) {
    for _ in 0..n_probe {
        let i = rng.uniform_int(base.numel() as u64) as usize;
        let mut plus = base.to_vec();
        let mut minus = base.to_vec();
        plus[i] += FD_H;
        minus[i] -= FD_H;
        let fp = eval(&Tensor::from_vec(base.shape().to_vec(), plus));
        let fm = eval(&Tensor::from_vec(base.shape().to_vec(), minus));
        let numeric = (fp - fm) / (2.0 * FD_H);
        let err = rel_err(analytic.data()[i], numeric);
        assert!(err < FD_TOL, "{label}[{i}]: relative error {err:.3e}");
    }
}

/// Gradient of the classification loss with respect to every encoder and
/// classifier tensor, sampled components, at `points` random points.
pub fn conditioner_gradient_suite(points: u64) {
    let cfg = ConditionerConfig {
        signal_len: 64,
        frame: 16,
        hop: 8,
        width: 10,
        blocks: 2,
        emb_dim: 8,
        n_classes: 5,
    };
    for point in 0..points {
        let rng = Rng::new(500 + point);
        let params = ConditionerParams::init(&cfg, &rng);
        let mut sig_rng = rng.substream(2, 0);
        let y: Vec<f64> = (0..64).map(|_| sig_rng.normal() * 0.4).collect();
        let label = (point % 5) as usize;

        let (out, tape) = with_tape(|| {
            let mut staged = params.clone();
            let mut handles = Vec::new();
            staged.for_each_tensor_mut(&mut |_, t| {
                *t = watch(t);
                handles.push(t.clone());
            });
            let loss = cross_entropy(&encode(&staged, &y).unwrap().probs, label).unwrap();
            (loss, handles)
        });
        let (loss, handles) = out;
        let grads = backward(&tape, &loss).unwrap();

        let mut probe_rng = rng.substream(3, 0);
        let mut idx = 0usize;
        params.clone().for_each_tensor_mut(&mut |name, tensor| {
            let analytic =
                grads.wrt(&handles[idx]).unwrap_or_else(|| Tensor::zeros(tensor.shape()));
            let params_outer = params.clone();
            let y = y.clone();
            let target_name = name.clone();
            check_param_components(&name, &analytic, tensor, 3, &mut probe_rng, move |pert| {
                let mut p = params_outer.clone();
                p.for_each_tensor_mut(&mut |n2, t2| {
                    if n2 == target_name {
                        *t2 = pert.clone();
                    }
                });
                cross_entropy(&encode(&p, &y).unwrap().probs, label).unwrap().item()
            });
            idx += 1;
        });
    }
}

/// Gradient of the diffusion loss with respect to every denoiser tensor, all
/// three injection modes, sampled components.
pub fn denoiser_gradient_suite(points: u64) {
    use diffse_core::conditioner::InjectionMode;
    let cfg = DenoiserConfig {
        signal_len: 64,
        frame: 16,
        hop: 8,
        hidden: 10,
        inner: 8,
        blocks: 2,
        emb_dim: 6,
        attn_dim: 4,
        max_step: 9,
    };
    let abar: Vec<f64> = (0..=9).map(|t| 0.97f64.powi(t)).collect();
    let modes =
        [InjectionMode::Addition, InjectionMode::Concat, InjectionMode::CrossAttn];
    for point in 0..points {
        let mode = modes[(point % 3) as usize];
        let rng = Rng::new(900 + point);
        let params = DenoiserParams::init(&cfg, mode, abar.clone(), &rng);
        let mut sig_rng = rng.substream(2, 0);
        let x_t: Vec<f64> = (0..64).map(|_| sig_rng.normal() * 0.5).collect();
        let y: Vec<f64> = (0..64).map(|_| sig_rng.normal() * 0.5).collect();
        let target = Tensor::vector((0..64).map(|_| sig_rng.normal()).collect());
        let emb = gauss(&mut sig_rng, &[6]);
        let t_step = 1 + (point as usize % 9);

        let (out, tape) = with_tape(|| {
            let mut staged = params.clone();
            let mut handles = Vec::new();
            staged.for_each_tensor_mut(&mut |_, t| {
                *t = watch(t);
                handles.push(t.clone());
            });
            let pred = predict_eps(&staged, &x_t, &y, t_step, Some(&emb)).unwrap();
            (pred.l1(&target).unwrap(), handles)
        });
        let (loss, handles) = out;
        let grads = backward(&tape, &loss).unwrap();

        let mut probe_rng = rng.substream(3, 0);
        let mut idx = 0usize;
        params.clone().for_each_tensor_mut(&mut |name, tensor| {
            let analytic =
                grads.wrt(&handles[idx]).unwrap_or_else(|| Tensor::zeros(tensor.shape()));
            let params_outer = params.clone();
            let (x_t, y, target, emb) = (x_t.clone(), y.clone(), target.clone(), emb.clone());
            let target_name = name.clone();
            check_param_components(
                &format!("{mode:?}.{name}"),
                &analytic,
                tensor,
                3,
                &mut probe_rng,
                move |pert| {
                    let mut p = params_outer.clone();
                    p.for_each_tensor_mut(&mut |n2, t2| {
                        if n2 == target_name {
                            *t2 = pert.clone();
                        }
                    });
                    let pred = predict_eps(&p, &x_t, &y, t_step, Some(&emb)).unwrap();
                    pred.l1(&target).unwrap().item()
                },
            );
            idx += 1;
        });
    }
}

// ── Default-configuration fixture ───────────────────────────────────────

pub struct DefaultRun {
    pub cfg: ExperimentConfig,
    pub records: Vec<Record>,
    pub schedule: Schedule,
    pub model: Model,
    pub report: TrainReport,
    pub out_dir: PathBuf,
    pub train_secs: f64,
    pub enhance_secs: f64,
    pub test_rows: Vec<UtteranceEval>,
    pub unseen_rows: Vec<UtteranceEval>,
    pub unseen_embeddings: Vec<(String, usize, Vec<f64>)>,
}

static DEFAULT_RUN: OnceLock<DefaultRun> = OnceLock::new();

/// Train the default configuration once per process and evaluate both eval
/// splits; artifacts are written under a process-unique temp directory.
pub fn default_run() -> &'static DefaultRun {
    DEFAULT_RUN.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let out_dir = std::env::temp_dir()
            .join(format!("diffse_acceptance_{}", std::process::id()));
        std::fs::create_dir_all(&out_dir).expect("create fixture dir");
        let records = generate_records(&cfg.corpus).expect("corpus");

        let t0 = Instant::now();
        let (model, report, schedule) =
            run_train(&cfg, &records, &out_dir.join("default")).expect("train");
        let train_secs = t0.elapsed().as_secs_f64();

        let t1 = Instant::now();
        let test: Vec<Record> =
            records.iter().filter(|r| r.split == Split::Test).cloned().collect();
        let unseen: Vec<Record> =
            records.iter().filter(|r| r.split == Split::UnseenEval).cloned().collect();
        let enhanced_test =
            enhance_records(&model, &schedule, &test, &cfg.sampler).expect("enhance test");
        let (test_rows, _) = evaluate_records(Some(&model), &test, &enhanced_test, &cfg.metrics)
            .expect("eval test");
        let enhanced_unseen =
            enhance_records(&model, &schedule, &unseen, &cfg.sampler).expect("enhance unseen");
        let (unseen_rows, unseen_embeddings) =
            evaluate_records(Some(&model), &unseen, &enhanced_unseen, &cfg.metrics)
                .expect("eval unseen");
        let enhance_secs = t1.elapsed().as_secs_f64();

        diffse_core::experiment::write_per_utterance_csv(
            &test_rows,
            &out_dir.join("default").join("per_utterance_test.csv"),
        )
        .expect("write test csv");
        diffse_core::experiment::write_per_utterance_csv(
            &unseen_rows,
            &out_dir.join("default").join("per_utterance_unseen.csv"),
        )
        .expect("write unseen csv");
        diffse_core::experiment::write_embeddings_csv(
            &unseen_embeddings,
            &out_dir.join("default").join("embeddings_unseen.csv"),
        )
        .expect("write embeddings csv");

        DefaultRun {
            cfg,
            records,
            schedule,
            model,
            report,
            out_dir,
            train_secs,
            enhance_secs,
            test_rows,
            unseen_rows,
            unseen_embeddings,
        }
    })
}

pub fn mean_si_sdr_noisy(rows: &[UtteranceEval]) -> f64 {
    rows.iter().map(|r| r.si_sdr_noisy).sum::<f64>() / rows.len() as f64
}

pub fn mean_si_sdr_enhanced(rows: &[UtteranceEval]) -> f64 {
    rows.iter().map(|r| r.si_sdr_enhanced).sum::<f64>() / rows.len() as f64
}
