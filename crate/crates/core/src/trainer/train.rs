use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{NdArray, Tape};
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, TransformerModel};
use crate::rng::{stream, Purpose};
use crate::scalar::Scalar;
use crate::trainer::checkpoint::{Checkpoint, Progress};
use crate::trainer::optim::{clip_global_norm, AdamW};
use crate::trainer::schedule::{lr_at, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    /// Exponentially smoothed training loss.
    pub train_loss: f64,
    pub raw_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
    /// Norm before clipping.
    pub grad_norm: f64,
    pub wall_ms: u64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "step,train_loss,val_loss,lr,grad_norm,wall_ms";

    pub fn csv_line(&self) -> String {
        let val = self.val_loss.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{:.6},{},{:e},{:.6},{}",
            self.step, self.train_loss, val, self.lr, self.grad_norm, self.wall_ms
        )
    }

    /// Parses a line written by [`csv_line`](Self::csv_line). The raw loss is
    /// not part of the CSV and comes back equal to the smoothed one.
    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let bad = |detail: String| Error::Parse {
            what: "metrics row".into(),
            detail,
        };
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields in {line:?}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
        let train_loss = num(f[1])?;
        Ok(Self {
            step: f[0].parse().map_err(|e| bad(format!("{:?}: {e}", f[0])))?,
            train_loss,
            raw_loss: train_loss,
            val_loss: if f[2].is_empty() { None } else { Some(num(f[2])?) },
            lr: num(f[3])?,
            grad_norm: num(f[4])?,
            wall_ms: f[5].parse().map_err(|e| bad(format!("{:?}: {e}", f[5])))?,
        })
    }
}

/// One (layer, head, scale) gate state at a given step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSnapshot {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub scale: usize,
    pub tau: f64,
    pub alpha: f64,
    pub omega_sigma: Option<f64>,
    pub scale_weight: f64,
}

/// Receives rows and snapshots as they are produced.
pub trait TrainObserver {
    fn on_row(&mut self, _row: &MetricsRow) -> Result<()> {
        Ok(())
    }
    fn on_snapshot(&mut self, _snapshot: &[GateSnapshot]) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<MetricsRow>,
    pub snapshots: Vec<GateSnapshot>,
    pub final_train: f64,
    pub final_val: f64,
    pub best_val: f64,
    pub admissibility_clamps: usize,
}

pub struct Trainer<T: Scalar> {
    pub model: TransformerModel<T>,
    pub config: TrainConfig,
    pub optimizer: AdamW<T>,
    pub progress: Progress,
    /// Rows per forward pass; 0 runs the whole batch at once.
    pub micro_batch: usize,
    /// When false, `wall_ms` is written as 0 so metrics replay bytewise.
    pub record_time: bool,
    started: Instant,
    consumed: Sha256,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: TransformerModel<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if config.context > model.config.context_len {
            return Err(Error::Context {
                len: config.context,
                max: model.config.context_len,
            });
        }
        let optimizer = AdamW::new(&model.params, config.beta1, config.beta2, config.eps, config.weight_decay);
        Ok(Self {
            model,
            config,
            optimizer,
            progress: Progress::default(),
            micro_batch: 0,
            record_time: true,
            started: Instant::now(),
            consumed: Sha256::new(),
        })
    }

    /// Continues the run stored in `ck` exactly where it stopped.
    pub fn resume(ck: &Checkpoint) -> Result<Self> {
        let train = ck
            .header
            .train
            .clone()
            .ok_or_else(|| Error::contract("checkpoint carries no training configuration"))?;
        let model = ck.model::<T>()?;
        let mut t = Self::new(model, train)?;
        t.optimizer = ck
            .optimizer(&t.model)?
            .ok_or_else(|| Error::contract("checkpoint carries no optimiser state"))?;
        t.progress = ck.header.progress.clone().unwrap_or_default();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut progress = self.progress.clone();
        progress.adam_t = self.optimizer.t;
        Checkpoint::new(&self.model, Some(&self.optimizer), Some(self.config.clone()), Some(progress))
    }

    /// Digest of the training batches this trainer has consumed, in the
    /// format of [`Corpus::batch_fingerprint`].
    pub fn consumed_fingerprint(&self) -> u64 {
        let digest = self.consumed.clone().finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn step(&self) -> usize {
        self.progress.step
    }

    fn chunks(&self) -> usize {
        match self.micro_batch {
            0 => self.config.batch,
            m => m.min(self.config.batch),
        }
    }

    /// One optimisation step on training batch number `step - 1`.
    pub fn train_step(&mut self, corpus: &Corpus) -> Result<MetricsRow> {
        let step = self.progress.step + 1;
        let cfg = &self.config;
        let lr = lr_at(step, cfg);
        let (b, t) = (cfg.batch, cfg.context);
        let batch = corpus.sample_batch(Split::Train, t, b, cfg.seed, (step - 1) as u64)?;
        for &id in batch.inputs.iter().chain(&batch.targets) {
            self.consumed.update((id as u32).to_le_bytes());
        }
        let mut grads: Vec<NdArray<T>> = self.model.params.iter().map(|p| NdArray::zeros(p.value.shape())).collect();
        let mut loss_sum = 0.0;
        let rows = self.chunks();
        for (chunk, start) in (0..b).step_by(rows).enumerate() {
            let n = rows.min(b - start);
            let span = start * t..(start + n) * t;
            let mut rng = stream(cfg.seed, Purpose::Dropout, ((step as u64) << 16) | chunk as u64);
            let mut tape = Tape::new();
            let opts = ForwardOptions {
                dropout_rng: Some(&mut rng),
                znorm: None,
            };
            let (loss, out) = self
                .model
                .loss(&mut tape, &batch.inputs[span.clone()], &batch.targets[span], n, t, opts)?;
            let value = tape.value(loss).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, lr });
            }
            let weight = n as f64 / b as f64;
            loss_sum += value * weight;
            let scaled = tape.scale(loss, weight);
            let mut g = tape.backward(scaled)?;
            for (acc, &v) in grads.iter_mut().zip(&out.vars) {
                let gv = g.take(&tape, v);
                acc.data_mut().iter_mut().zip(gv.data()).for_each(|(a, x)| *a += *x);
            }
        }
        let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        self.progress.admissibility_clamps += self.model.enforce_admissibility();
        let ema = match self.progress.ema_loss {
            Some(prev) => cfg.ema * prev + (1.0 - cfg.ema) * loss_sum,
            None => loss_sum,
        };
        self.progress.ema_loss = Some(ema);
        self.progress.step = step;
        self.progress.adam_t = self.optimizer.t;
        Ok(MetricsRow {
            step,
            train_loss: ema,
            raw_loss: loss_sum,
            val_loss: None,
            lr,
            grad_norm,
            wall_ms: if self.record_time {
                self.started.elapsed().as_millis() as u64
            } else {
                0
            },
        })
    }

    /// Mean loss over the fixed evaluation batches of `split`, dropout off.
    pub fn evaluate(&self, corpus: &Corpus, split: Split) -> Result<f64> {
        evaluate(&self.model, corpus, split, &self.config, self.chunks())
    }

    pub fn snapshots(&self) -> Vec<GateSnapshot> {
        gate_snapshots(&self.model, self.progress.step)
    }

    /// Runs to `config.steps`, evaluating every `eval_every` steps and at the
    /// end, and snapshotting gates at step 0, every `snapshot_every` steps and
    /// at the end.
    pub fn run(&mut self, corpus: &Corpus, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        self.run_until(corpus, self.config.steps, observer)
    }

    /// As [`run`](Self::run), pausing after step `until`.
    pub fn run_until(&mut self, corpus: &Corpus, until: usize, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
        let until = until.min(self.config.steps);
        let mut rows = Vec::new();
        let mut snapshots = Vec::new();
        if self.progress.step == 0 {
            let s = self.snapshots();
            observer.on_snapshot(&s)?;
            snapshots.extend(s);
        }
        while self.progress.step < until {
            let mut row = self.train_step(corpus)?;
            let step = row.step;
            let last = step == self.config.steps;
            if step % self.config.eval_every == 0 || last {
                let val = self.evaluate(corpus, Split::Val)?;
                row.val_loss = Some(val);
                self.progress.last_val = Some(val);
                self.progress.best_val = Some(self.progress.best_val.map_or(val, |b: f64| b.min(val)));
            }
            observer.on_row(&row)?;
            rows.push(row);
            if step % self.config.snapshot_every == 0 || last {
                let s = self.snapshots();
                observer.on_snapshot(&s)?;
                snapshots.extend(s);
            }
        }
        let final_val = match self.progress.last_val {
            Some(v) => v,
            None => self.evaluate(corpus, Split::Val)?,
        };
        Ok(TrainOutcome {
            rows,
            snapshots,
            final_train: self.progress.ema_loss.unwrap_or(f64::NAN),
            final_val,
            best_val: self.progress.best_val.unwrap_or(final_val),
            admissibility_clamps: self.progress.admissibility_clamps,
        })
    }
}

pub fn gate_snapshots<T: Scalar>(model: &TransformerModel<T>, step: usize) -> Vec<GateSnapshot> {
    model
        .gate_layers()
        .flat_map(|(layer, g)| {
            g.snapshot(&model.params).into_iter().map(move |s| GateSnapshot {
                step,
                layer,
                head: s.head,
                scale: s.scale,
                tau: s.tau,
                alpha: s.alpha,
                omega_sigma: s.omega_sigma,
                scale_weight: s.scale_weight,
            })
        })
        .collect()
}

/// Mean cross-entropy over batches `0..eval_batches` of `split`, run
/// `rows` sequences at a time in evaluation mode.
pub fn evaluate<T: Scalar>(
    model: &TransformerModel<T>,
    corpus: &Corpus,
    split: Split,
    cfg: &TrainConfig,
    rows: usize,
) -> Result<f64> {
    let (b, t) = (cfg.batch, cfg.context);
    let rows = rows.clamp(1, b);
    let mut total = 0.0;
    for i in 0..cfg.eval_batches {
        let batch = corpus.sample_batch(split, t, b, cfg.seed, i as u64)?;
        for start in (0..b).step_by(rows) {
            let n = rows.min(b - start);
            let span = start * t..(start + n) * t;
            let mut tape = Tape::inference();
            let (loss, _) = model.loss(
                &mut tape,
                &batch.inputs[span.clone()],
                &batch.targets[span],
                n,
                t,
                ForwardOptions::default(),
            )?;
            total += tape.value(loss).item().as_f64() * n as f64;
        }
    }
    Ok(total / (cfg.eval_batches * b) as f64)
}
