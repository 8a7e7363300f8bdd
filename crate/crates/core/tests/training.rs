use ega_core::data::{Corpus, Split};
use ega_core::gates::{EnergyParams, GateInit, MORLET_MIN_OMEGA};
use ega_core::trainer::{Checkpoint, MetricsRow, TrainConfig, Trainer};
use ega_core::{Error, GateVariant, Model32, ModelConfig, ZNormMode};

fn corpus() -> Corpus {
    let text = "the cat sat on the mat. a dog ran to the log. ".repeat(40);
    Corpus::from_text("toy", text, 0.9).unwrap()
}

fn model(variant: GateVariant, vocab: usize) -> Model32 {
    Model32::build(ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        context_len: 16,
        vocab_size: vocab,
        dropout: 0.1,
        gate_variant: variant,
        znorm_mode: ZNormMode::Paper,
        seed: 7,
        gate_init: GateInit::default(),
    })
    .unwrap()
}

fn config(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch: 8,
        context: 16,
        lr_max: 1e-2,
        warmup: steps.min(5) - 1,
        eval_every: 10,
        eval_batches: 4,
        snapshot_every: 10,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn trainer(variant: GateVariant, steps: usize) -> Trainer<f32> {
    let c = corpus();
    let mut t = Trainer::new(model(variant, c.vocab.len()), config(steps)).unwrap();
    t.record_time = false;
    t
}

#[test]
fn short_run_learns() {
    let c = corpus();
    let mut t = trainer(GateVariant::Ega1, 60);
    let uniform = (c.vocab.len() as f64).ln();
    let before = t.evaluate(&c, Split::Val).unwrap();
    assert!((before - uniform).abs() < 0.3, "untrained loss {before} vs ln V {uniform}");
    assert_eq!(before, t.evaluate(&c, Split::Val).unwrap());
    let out = t.run(&c, &mut ()).unwrap();
    assert_eq!(out.rows.len(), 60);
    assert!(out.final_val < uniform - 0.5, "final val {}", out.final_val);
    assert!(out.rows.last().unwrap().raw_loss < uniform);
    let evals: Vec<usize> = out.rows.iter().filter(|r| r.val_loss.is_some()).map(|r| r.step).collect();
    assert_eq!(evals, vec![10, 20, 30, 40, 50, 60]);
    let steps: Vec<usize> = out.snapshots.iter().map(|s| s.step).collect();
    assert!(steps.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(steps.first(), Some(&0));
    assert!(out.rows.iter().all(|r| r.train_loss.is_finite() && r.grad_norm.is_finite()));
}

#[test]
fn runs_replay_exactly() {
    let c = corpus();
    let a = trainer(GateVariant::Ega2, 12).run(&c, &mut ()).unwrap();
    let b = trainer(GateVariant::Ega2, 12).run(&c, &mut ()).unwrap();
    let lines = |rows: &[MetricsRow]| rows.iter().map(|r| r.csv_line()).collect::<Vec<_>>();
    assert_eq!(lines(&a.rows), lines(&b.rows));
    assert_eq!(a.snapshots, b.snapshots);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let c = corpus();
    let whole = trainer(GateVariant::Ega1, 20).run(&c, &mut ()).unwrap();

    let mut first = trainer(GateVariant::Ega1, 20);
    for _ in 0..10 {
        first.train_step(&c).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    first.checkpoint().save(&path).unwrap();
    let ck = Checkpoint::load(&path).unwrap();
    assert_eq!(ck.to_bytes(), Checkpoint::from_bytes(&ck.to_bytes()).unwrap().to_bytes());
    let mut second = Trainer::<f32>::resume(&ck).unwrap();
    second.record_time = false;
    let rest = second.run(&c, &mut ()).unwrap();
    assert_eq!(rest.rows.first().map(|r| r.step), Some(11));
    let tail: Vec<String> = whole.rows[10..].iter().map(|r| r.csv_line()).collect();
    let resumed: Vec<String> = rest.rows.iter().map(|r| r.csv_line()).collect();
    assert_eq!(tail, resumed);
}

#[test]
fn every_variant_consumes_the_same_batches() {
    let c = corpus();
    let expected = c.batch_fingerprint(16, 8, 7, 3).unwrap();
    for v in GateVariant::ALL {
        let mut t = trainer(v, 3);
        t.run(&c, &mut ()).unwrap();
        assert_eq!(t.consumed_fingerprint(), expected, "{v}");
    }
}

#[test]
fn morlet_gates_stay_admissible() {
    let c = corpus();
    let mut t = trainer(GateVariant::Egam, 30);
    // A large rate pushes the Morlet parameters hard against the boundary.
    t.config.lr_max = 0.2;
    for _ in 0..30 {
        t.train_step(&c).unwrap();
        for (_, g) in t.model.gate_layers() {
            let products = g.omega_sigma(&t.model.params).unwrap();
            assert!(products.iter().all(|&p| p >= 5.0 - 1e-9), "{products:?}");
            let EnergyParams::Morlet { omega, .. } = &g.energy else {
                unreachable!()
            };
            let omega = t.model.params.value(*omega);
            assert!(omega.data().iter().all(|&w| w as f64 >= MORLET_MIN_OMEGA));
        }
    }
}

#[test]
fn nan_loss_aborts_with_step_and_rate() {
    let c = corpus();
    let mut t = trainer(GateVariant::Base, 10);
    t.train_step(&c).unwrap();
    let id = t.model.params.find("lnf.g").unwrap();
    t.model.params.value_mut(id).data_mut()[0] = f32::NAN;
    match t.train_step(&c) {
        Err(Error::NonFiniteLoss { step, lr }) => {
            assert_eq!(step, 2);
            assert!(lr > 0.0);
        }
        other => panic!("expected a non-finite loss error, got {:?}", other.map(|r| r.step)),
    }
}

#[test]
fn micro_batches_match_the_full_batch_without_dropout() {
    let c = corpus();
    let mut full = trainer(GateVariant::Ega1, 5);
    let mut split = trainer(GateVariant::Ega1, 5);
    full.model.config.dropout = 0.0;
    split.model.config.dropout = 0.0;
    split.micro_batch = 3;
    for _ in 0..5 {
        let a = full.train_step(&c).unwrap();
        let b = split.train_step(&c).unwrap();
        assert!((a.raw_loss - b.raw_loss).abs() < 1e-5, "{} vs {}", a.raw_loss, b.raw_loss);
    }
}
