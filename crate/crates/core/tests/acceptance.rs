//! One line per acceptance criterion. Criteria 1-8 always run. 9-15 train
//! full-size models for hours; they run with `--ignored` and need
//! EGA_SHAKESPEARE (and EGA_PTB for 12) pointing at the raw corpora.
//!
//!     cargo test -p ega-core --release --test acceptance -- --ignored

mod common;

use std::collections::HashMap;
use std::process::ExitCode;

use ega_core::analysis::{self, above_threshold_fraction, tau_statistics};
use ega_core::autodiff::{NdArray, Tape};
use ega_core::data::{load_corpus, Corpus, Split};
use ega_core::gates::{apply_gate, EnergyParams, GateInit, GateLayer};
use ega_core::params::ParamStore;
use ega_core::trainer::{TrainConfig, TrainOutcome, Trainer};
use ega_core::wavelets::{daubechies_coefficients, default_scales, dwt_parseval_check};
use ega_core::{GateVariant, Model32, ModelConfig, ZNormMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn gradient_check() -> Verdict {
    let mut worst = (0.0, String::new());
    for mode in [ZNormMode::Paper, ZNormMode::Causal] {
        for v in GateVariant::ALL {
            let (err, at) = common::full_model_grad_error(v, mode);
            if err >= worst.0 {
                worst = (err, format!("{v}/{} {at}", mode.name()));
            }
        }
    }
    verdict(worst.0 < 1e-4, format!("max rel err {:.2e} at {}", worst.0, worst.1))
}

fn renormalisation() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for draw in 0..1000 {
        let n = 1 + draw % 16;
        let mut a = Vec::with_capacity(n * n);
        for i in 0..n {
            let w: Vec<f64> = (0..=i).map(|_| rng.random_range(-4.0f64..4.0).exp()).collect();
            let s: f64 = w.iter().sum();
            a.extend((0..n).map(|j| if j <= i { w[j] / s } else { 0.0 }));
        }
        // Gates far below 1e-2 everywhere would let the ε in the denominator show.
        let g: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let mut tape = Tape::<f64>::inference();
        let av = tape.constant(NdArray::new(&[n, n], a).unwrap());
        let gv = tape.constant(NdArray::new(&[n], g).unwrap());
        let out = apply_gate(&mut tape, av, gv).unwrap();
        for row in tape.value(out).data().chunks(n) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    verdict(worst < 1e-6, format!("worst |row sum - 1| {worst:.2e} over 1000 draws"))
}

fn constant_gate() -> Verdict {
    let worst = GateVariant::ALL
        .iter()
        .filter(|v| v.is_gated())
        .flat_map(|&v| [ZNormMode::Paper, ZNormMode::Causal].map(|m| common::constant_gate_gap(v, m)))
        .fold(0.0, f64::max);
    verdict(worst < 1e-6, format!("max logit difference {worst:.2e}"))
}

fn causality() -> Verdict {
    let worst = GateVariant::ALL.iter().map(|&v| common::causality_leak(v)).fold(0.0, f64::max);
    verdict(worst < 1e-6, format!("max change in earlier logits {worst:.2e}"))
}

fn wavelets() -> Verdict {
    let mut sum_err = 0.0f64;
    let mut ortho_err = 0.0f64;
    for order in [1, 2, 4] {
        let h = daubechies_coefficients(order).unwrap().lowpass;
        sum_err = sum_err.max((h.iter().sum::<f64>() - std::f64::consts::SQRT_2).abs());
        for m in 0..h.len() / 2 {
            let dot: f64 = (0..h.len() - 2 * m).map(|k| h[k] * h[k + 2 * m]).sum();
            ortho_err = ortho_err.max((dot - if m == 0 { 1.0 } else { 0.0 }).abs());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut parseval = 0.0f64;
    for i in 0..100 {
        let f = daubechies_coefficients([1, 2, 4][i % 3]).unwrap();
        let x: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        parseval = parseval.max(dwt_parseval_check(&x, &f, 3).unwrap());
    }
    let mut store = ParamStore::<f64>::new();
    let layer = GateLayer::init(GateVariant::Egam, 8, 32, "g", &mut store, &mut rng, GateInit::default())
        .unwrap()
        .unwrap();
    let EnergyParams::Morlet { omega, sigma } = layer.energy.clone() else {
        unreachable!()
    };
    let mut min_product = f64::INFINITY;
    for _ in 0..500 {
        for i in 0..8 * 4 {
            let w = rng.random_range(-1.0..5.0);
            store.value_mut(omega).data_mut()[i] = w;
            store.value_mut(sigma).data_mut()[i] = rng.random_range(-3.0..8.0) / w;
        }
        layer.enforce_admissibility(&mut store);
        min_product = layer.omega_sigma(&store).unwrap().into_iter().fold(min_product, f64::min);
    }
    verdict(
        sum_err < 1e-12 && ortho_err < 1e-12 && parseval < 1e-10 && min_product >= 5.0,
        format!(
            "|sum h - sqrt2| {sum_err:.1e}, orthonormality {ortho_err:.1e}, Parseval {parseval:.1e}, min w0*sigma {min_product:.6}"
        ),
    )
}

fn toy_corpus() -> Corpus {
    let text: String = (0..4000u64).map(|i| (b'a' + ((i * i + 7 * i) % 23) as u8) as char).collect();
    Corpus::from_text("toy", text, 0.9).unwrap()
}

fn identical_batches() -> Verdict {
    let corpus = toy_corpus();
    let train = TrainConfig {
        steps: 4,
        batch: 4,
        context: 16,
        warmup: 1,
        eval_every: 4,
        eval_batches: 1,
        seed: 99,
        ..TrainConfig::default()
    };
    let expected = corpus.batch_fingerprint(16, 4, 99, 4).unwrap();
    let mut mismatched = Vec::new();
    for v in GateVariant::ALL {
        let cfg = ModelConfig {
            gate_variant: v,
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            context_len: 16,
            vocab_size: corpus.vocab.len(),
            ..ModelConfig::default()
        };
        let mut t = Trainer::new(Model32::build(cfg).unwrap(), train.clone()).unwrap();
        t.run(&corpus, &mut ()).unwrap();
        if t.consumed_fingerprint() != expected {
            mismatched.push(v.name());
        }
    }
    verdict(
        mismatched.is_empty(),
        format!("fingerprint {expected:016x} for all 8 variants; mismatched {mismatched:?}"),
    )
}

fn parameter_accounting() -> Verdict {
    let count = |v| {
        let m = Model32::build(ModelConfig {
            gate_variant: v,
            ..ModelConfig::default()
        })
        .unwrap();
        (m.count_params(), m.count_gate_params())
    };
    let (base, _) = count(GateVariant::Base);
    let (_, ega1) = count(GateVariant::Ega1);
    let base_ok = (base as f64 - 4_816_640.0).abs() <= 0.01 * 4_816_640.0;
    let ega1_ok = (12_384..=12_480).contains(&ega1);
    let others: Vec<String> = [GateVariant::Ega2, GateVariant::Ega4, GateVariant::Egac, GateVariant::Egam, GateVariant::Egadb2]
        .iter()
        .map(|&v| format!("{v} +{}", count(v).1))
        .collect();
    verdict(base_ok && ega1_ok, format!("base {base}, ega1 +{ega1}; {}", others.join(", ")))
}

fn analytic_fraction() -> Verdict {
    let f = above_threshold_fraction(0.35, &[]).analytic;
    verdict((f - 0.3632).abs() < 1e-4, format!("1 - Phi(0.35) = {f:.6}"))
}

// ---------------------------------------------------------------------------
// reproduction runs

struct Lab {
    shakespeare: Option<Corpus>,
    ptb: Option<Corpus>,
    runs: HashMap<(String, GateVariant, usize, u64), (TrainOutcome, Model32)>,
}

fn corpus_from_env(var: &str, name: &str) -> Corpus {
    let path = std::env::var(var).unwrap_or_else(|_| panic!("set {var} to the {name} text file to run this criterion"));
    load_corpus(&path, name, 0.9).unwrap_or_else(|e| panic!("{var}: {e}"))
}

impl Lab {
    fn corpus(&mut self, ptb: bool) -> Corpus {
        let slot = if ptb { &mut self.ptb } else { &mut self.shakespeare };
        slot.get_or_insert_with(|| {
            if ptb {
                corpus_from_env("EGA_PTB", "ptb")
            } else {
                corpus_from_env("EGA_SHAKESPEARE", "shakespeare")
            }
        })
        .clone()
    }

    /// Trains (or recalls) one variant at the reference configuration.
    fn run(&mut self, ptb: bool, variant: GateVariant, steps: usize, tau0: f64) -> &(TrainOutcome, Model32) {
        let corpus = self.corpus(ptb);
        let key = (corpus.name.clone(), variant, steps, tau0.to_bits());
        if !self.runs.contains_key(&key) {
            let cfg = ModelConfig {
                gate_variant: variant,
                vocab_size: corpus.vocab.len(),
                gate_init: GateInit {
                    tau: tau0,
                    ..GateInit::default()
                },
                ..ModelConfig::default()
            };
            let train = TrainConfig {
                steps,
                warmup: TrainConfig::default().warmup.min(steps / 5),
                ..TrainConfig::default()
            };
            let mut t = Trainer::new(Model32::build(cfg).unwrap(), train).unwrap();
            // 64 x 256 attention tensors for six layers do not fit in a few GB at once
            t.micro_batch = 8;
            t.record_time = false;
            let started = std::time::Instant::now();
            let out = t.run(&corpus, &mut ()).unwrap();
            eprintln!(
                "  trained {variant} on {} for {steps} steps (tau0 {tau0}) in {:.0?}: val {:.4}",
                corpus.name,
                started.elapsed(),
                out.final_val
            );
            self.runs.insert(key.clone(), (out, t.model));
        }
        &self.runs[&key]
    }

    fn val(&mut self, ptb: bool, v: GateVariant, steps: usize) -> f64 {
        self.run(ptb, v, steps, 0.0).0.final_val
    }
}

fn reduced_run(lab: &mut Lab) -> Verdict {
    let base = lab.val(false, GateVariant::Base, 1500);
    let ega1 = lab.val(false, GateVariant::Ega1, 1500);
    verdict(base - ega1 >= 0.03, format!("base {base:.4}, ega1 {ega1:.4}, delta {:+.4}", base - ega1))
}

fn full_run(lab: &mut Lab) -> Verdict {
    let (b, e) = {
        let b = &lab.run(false, GateVariant::Base, 5000, 0.0).0;
        (b.final_val, b.final_val - b.final_train)
    };
    let (o, g) = {
        let o = &lab.run(false, GateVariant::Ega1, 5000, 0.0).0;
        (o.final_val, o.final_val - o.final_train)
    };
    let pass = (b - 1.4742).abs() <= 0.06 && (o - 1.3712).abs() <= 0.06 && b - o >= 0.07 && g <= e;
    verdict(pass, format!("base {b:.4} (gap {e:.4}), ega1 {o:.4} (gap {g:.4}), delta {:+.4}", b - o))
}

fn ablation_ordering(lab: &mut Lab) -> Verdict {
    let vals: Vec<(GateVariant, f64)> = GateVariant::ALL.iter().map(|&v| (v, lab.val(false, v, 5000))).collect();
    let val = |v| vals.iter().find(|(w, _)| *w == v).unwrap().1;
    let base = val(GateVariant::Base);
    let ordered = val(GateVariant::Ega1) < val(GateVariant::Ega2)
        && val(GateVariant::Ega2) < val(GateVariant::Ega4)
        && val(GateVariant::Ega4) < base + 0.01;
    let fixed_close = [GateVariant::Egadb2, GateVariant::Egadb4, GateVariant::Egam]
        .iter()
        .all(|&v| (val(v) - base).abs() <= 0.03);
    let table: Vec<String> = vals.iter().map(|(v, x)| format!("{v} {x:.4}")).collect();
    verdict(ordered && fixed_close, table.join(", "))
}

fn cross_dataset(lab: &mut Lab) -> Verdict {
    let base = lab.val(true, GateVariant::Base, 5000);
    let ega1 = lab.val(true, GateVariant::Ega1, 5000);
    verdict(base - ega1 >= 0.07, format!("base {base:.4}, ega1 {ega1:.4}, delta {:+.4}", base - ega1))
}

fn tau_convergence(lab: &mut Lab) -> Verdict {
    let mut parts = Vec::new();
    let mut pass = true;
    for tau0 in [0.0, -0.5] {
        let stats = tau_statistics(&lab.run(false, GateVariant::Ega1, 5000, tau0).0.snapshots).unwrap();
        pass &= (0.15..=0.55).contains(&stats.mean_final);
        let path = std::env::temp_dir().join(format!("ega_tau_trajectory_tau0_{tau0}.csv"));
        let csv: String = std::iter::once("step,mean_tau\n".to_string())
            .chain(stats.trajectory.iter().map(|(s, t)| format!("{s},{t:.6}\n")))
            .collect();
        std::fs::write(&path, csv).unwrap();
        parts.push(format!("tau0 {tau0}: mean final {:.4} (trajectory {})", stats.mean_final, path.display()));
    }
    verdict(pass, parts.join("; "))
}

fn morlet_boundary(lab: &mut Lab) -> Verdict {
    let (out, _) = lab.run(false, GateVariant::Egam, 5000, 0.0);
    let last = out.snapshots.iter().map(|s| s.step).max().unwrap_or(0);
    let products: Vec<f64> = out
        .snapshots
        .iter()
        .filter(|s| s.step == last)
        .filter_map(|s| s.omega_sigma)
        .collect();
    let near = products.iter().filter(|&&p| p < 5.05).count();
    // reported only
    verdict(
        true,
        format!("{near}/{} scales end with w0*sigma < 5.05 ({} clamps)", products.len(), out.admissibility_clamps),
    )
}

fn scalogram_on_checkpoint(lab: &mut Lab) -> Verdict {
    let corpus = lab.corpus(false);
    let probe: String = corpus.vocab.decode(&corpus.split(Split::Val)[..64]).unwrap();
    let (_, model) = lab.run(false, GateVariant::Ega1, 5000, 0.0);
    let report = analysis::scalogram_report(model, &corpus.vocab, &probe, 3, &default_scales()).unwrap();
    let sc = &report.scalogram;
    let spectrum = analysis::energy_spectrum(sc);
    let dir = std::env::temp_dir();
    std::fs::write(dir.join("ega_scalogram.svg"), ega_core::plot::scalogram_heatmap(sc, "EGA-1 block 3")).unwrap();
    std::fs::write(dir.join("ega_spectrum.svg"), ega_core::plot::spectrum_plot(&spectrum, "EGA-1 block 3")).unwrap();
    let pass = sc.n_scales() == 64 && sc.len == 64 && sc.values.iter().all(|&v| v >= 0.0);
    verdict(pass, format!("[{} x {}] written to {}", sc.n_scales(), sc.len, dir.display()))
}

type Check = fn() -> Verdict;
type Reproduction = fn(&mut Lab) -> Verdict;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    // Flags cargo passes to every test binary; only --ignored / --include-ignored matter here.
    let ignored = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let only_ignored = args.iter().any(|a| a == "--ignored");
    if args.iter().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }

    let fast: [(&str, Check); 8] = [
        ("gradient check, all variants", gradient_check),
        ("gate renormalisation", renormalisation),
        ("constant-gate equivalence", constant_gate),
        ("causal-prefix causality", causality),
        ("wavelet oracles", wavelets),
        ("identical batches", identical_batches),
        ("parameter accounting", parameter_accounting),
        ("analytic above-threshold fraction", analytic_fraction),
    ];
    let slow: [(&str, Reproduction); 7] = [
        ("reduced run, 1500 steps", reduced_run),
        ("full run, base vs ega1", full_run),
        ("ablation ordering", ablation_ordering),
        ("cross-dataset delta", cross_dataset),
        ("threshold convergence", tau_convergence),
        ("Morlet boundary (reported)", morlet_boundary),
        ("scalogram on a checkpoint", scalogram_on_checkpoint),
    ];

    let mut failed = 0;
    let mut report = |n: usize, name: &str, v: Verdict| {
        failed += !v.pass as usize;
        println!("criterion {n:2} {:<36} {}  {}", name, if v.pass { "PASS" } else { "FAIL" }, v.detail);
    };
    if !only_ignored {
        for (i, (name, check)) in fast.iter().enumerate() {
            report(i + 1, name, check());
        }
    }
    if ignored {
        let mut lab = Lab {
            shakespeare: None,
            ptb: None,
            runs: HashMap::new(),
        };
        for (i, (name, check)) in slow.iter().enumerate() {
            report(i + 9, name, check(&mut lab));
        }
    } else {
        for (i, (name, _)) in slow.iter().enumerate() {
            println!("criterion {:2} {:<36} IGNORED  needs --ignored and the corpora", i + 9, name);
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
