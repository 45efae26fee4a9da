//! Finite-difference verification of every differentiable primitive and of
//! the composite networks. Central differences with h = 1e-5 in 64-bit give
//! roughly ten digits; the tape must agree to a relative error of 1e-4.

mod common;

use common::check_input_grad;
use diffse_core::conditioner::{inject, InjectionMode, InjectionParams};
use diffse_core::rng::Rng;
use diffse_core::tensor::gauss;

#[test]
fn primitives_match_finite_differences() {
    common::primitives_gradient_suite(10);
}

#[test]
fn conditioner_composite_matches_finite_differences() {
    common::conditioner_gradient_suite(5);
}

#[test]
fn denoiser_composite_matches_finite_differences() {
    common::denoiser_gradient_suite(5);
}

#[test]
fn injection_is_differentiable_in_both_arguments() {
    let rng = Rng::new(71);
    for (tag, mode) in [
        (0u64, InjectionMode::Addition),
        (1, InjectionMode::Concat),
        (2, InjectionMode::CrossAttn),
    ] {
        let inj = InjectionParams::init(mode, 6, 4, 3, &rng, tag);
        let mut r = rng.substream(5, tag);
        let hidden = gauss(&mut r, &[3, 6]);
        let emb = gauss(&mut r, &[4]);
        let w = gauss(&mut r, &[3, 6]);

        check_input_grad(&format!("inject_{mode:?}_hidden"), &hidden, {
            let (inj, emb, w) = (inj.clone(), emb.clone(), w.clone());
            move |x| inject(&inj, x, &emb).unwrap().mul(&w).unwrap().sum()
        });
        check_input_grad(&format!("inject_{mode:?}_emb"), &emb, {
            let (inj, hidden, w) = (inj.clone(), hidden.clone(), w.clone());
            move |x| inject(&inj, &hidden, x).unwrap().mul(&w).unwrap().sum()
        });
    }
}

#[test]
fn layer_norm_chain_matches_finite_differences() {
    let rng = Rng::new(123);
    for point in 0..5u64 {
        let mut r = rng.substream(0, point);
        let x = gauss(&mut r, &[2, 5]);
        let gain = gauss(&mut r, &[1, 5]).add_scalar(1.5);
        let bias = gauss(&mut r, &[1, 5]);
        let w = gauss(&mut r, &[2, 5]);
        check_input_grad("layer_norm", &x, {
            let (gain, bias, w) = (gain.clone(), bias.clone(), w.clone());
            move |x| {
                diffse_core::nn::layer_norm(x, &gain, &bias, 1e-8)
                    .unwrap()
                    .mul(&w)
                    .unwrap()
                    .sum()
            }
        });
    }
}
