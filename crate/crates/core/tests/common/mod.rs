#![allow(dead_code)]

use ega_core::autodiff::{grad_check_with, NdArray, Stencil, Tape};
use ega_core::gates::GateInit;
use ega_core::model::ForwardOptions;
use ega_core::{GateVariant, Model64, ModelConfig, ZNormMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config(variant: GateVariant, mode: ZNormMode, layers: usize, d: usize, t: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        n_heads: 2,
        d_model: d,
        context_len: t,
        vocab_size: 5,
        dropout: 0.0,
        gate_variant: variant,
        znorm_mode: mode,
        seed: 11,
        gate_init: GateInit::default(),
    }
}

/// Worst relative error of the full-model gradient (d=8, L=1, T=8, B=2).
///
/// The check runs at a generic point: every parameter except the Morlet
/// frequencies and widths is displaced by U(-0.5, 0.5). At initialisation
/// the query/key gradients are ~1e-9 and drown in rounding noise.
pub fn full_model_grad_error(variant: GateVariant, mode: ZNormMode) -> (f64, String) {
    let m = Model64::build(tiny_config(variant, mode, 1, 8, 8)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params: Vec<(String, NdArray<f64>)> = m
        .params
        .iter()
        .map(|p| {
            let keep = p.name.ends_with("omega0") || p.name.ends_with("sigma");
            let data = p
                .value
                .data()
                .iter()
                .map(|&x| if keep { x } else { x + 0.5 * (rng.random::<f64>() * 2.0 - 1.0) })
                .collect();
            (p.name.clone(), NdArray::new(p.value.shape(), data).unwrap())
        })
        .collect();
    let inputs: Vec<usize> = (0..16).map(|i| (i * 7 + 3) % 5).collect();
    let targets: Vec<usize> = (0..16).map(|i| (i * 3 + 1) % 5).collect();
    let report = grad_check_with(
        |tape, vars| {
            let out = m.forward_with(tape, vars.to_vec(), &inputs, 2, 8, ForwardOptions::default())?;
            tape.cross_entropy(out.logits, &targets)
        },
        &params,
        1e-4,
        Stencil::FivePoint,
    )
    .unwrap();
    (report.max_rel_err, format!("{}[{}]", report.worst_param, report.worst_index))
}

pub fn logits(m: &Model64, tokens: &[usize], mode: ZNormMode) -> Vec<f64> {
    let mut tape = Tape::<f64>::inference();
    let out = m
        .forward(
            &mut tape,
            tokens,
            1,
            tokens.len(),
            ForwardOptions {
                dropout_rng: None,
                znorm: Some(mode),
            },
        )
        .unwrap();
    tape.value(out.logits).data().to_vec()
}

/// Largest change of any logit at positions `< t` when the token at `t`
/// changes, over every `t` of a length-32 sequence (L=2, d=16).
pub fn causality_leak(variant: GateVariant) -> f64 {
    let t_len = 32;
    let m = Model64::build(tiny_config(variant, ZNormMode::Causal, 2, 16, t_len)).unwrap();
    let vocab = m.config.vocab_size;
    let tokens: Vec<usize> = (0..t_len).map(|i| (i * i + 3 * i + 1) % vocab).collect();
    let reference = logits(&m, &tokens, ZNormMode::Causal);
    let mut worst = 0.0f64;
    for t in 0..t_len {
        let mut changed = tokens.clone();
        changed[t] = (changed[t] + 2) % vocab;
        let out = logits(&m, &changed, ZNormMode::Causal);
        for (a, b) in reference[..t * vocab].iter().zip(&out[..t * vocab]) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

/// Largest logit difference between a variant with every α set to 0 and
/// the baseline carrying the same base weights.
pub fn constant_gate_gap(variant: GateVariant, mode: ZNormMode) -> f64 {
    let base = Model64::build(tiny_config(GateVariant::Base, mode, 2, 16, 16)).unwrap();
    let mut gated = Model64::build(tiny_config(variant, mode, 2, 16, 16)).unwrap();
    gated.copy_base_from(&base).unwrap();
    gated.set_gate_alpha(0.0);
    let tokens: Vec<usize> = (0..16).map(|i| (i * 3 + 2) % 5).collect();
    let a = logits(&base, &tokens, mode);
    let b = logits(&gated, &tokens, mode);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
