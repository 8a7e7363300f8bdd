//! Post-hoc analyses over finished runs and checkpoints.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Corpus, Split};
use crate::error::{Error, Result};
use crate::gates::{GateInit, GateVariant};
use crate::model::{ForwardOptions, ModelConfig, TransformerModel};
use crate::scalar::Scalar;
use crate::trainer::{GateSnapshot, MetricsRow, TrainConfig, Trainer};
use crate::wavelets::{cwt_scalogram, Scalogram};

pub const METRICS_FILE: &str = "metrics.csv";
pub const RAW_LOSS_FILE: &str = "raw_loss.csv";
pub const GATES_FILE: &str = "gates.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const CONFIG_FILE: &str = "config.toml";

/// Conv filter lengths marked on energy spectra.
pub const SPECTRUM_MARKERS: [usize; 4] = [3, 7, 15, 31];

/// Final numbers of one run, stored as `summary.json` in its directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: GateVariant,
    pub dataset: String,
    pub seed: u64,
    pub steps: usize,
    pub batch: usize,
    pub context: usize,
    /// Digest of the consumed training batches.
    pub batch_fingerprint: u64,
    pub final_train: f64,
    pub final_val: f64,
    pub best_val: f64,
    pub params: usize,
    pub extra_params: usize,
    pub admissibility_clamps: usize,
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub rows: Vec<MetricsRow>,
    pub snapshots: Vec<GateSnapshot>,
}

impl RunRecord {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        if !dir.is_dir() {
            return Err(Error::io(
                dir,
                std::io::Error::new(std::io::ErrorKind::NotFound, "run directory not found"),
            ));
        }
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| Error::io(p, e))
        };
        let summary: RunSummary = serde_json::from_str(&read(SUMMARY_FILE)?).map_err(|e| Error::Parse {
            what: SUMMARY_FILE.into(),
            detail: e.to_string(),
        })?;
        let rows = parse_metrics(&read(METRICS_FILE)?)?;
        let snapshots = match dir.join(GATES_FILE).exists() {
            true => parse_snapshots(&read(GATES_FILE)?)?,
            false => Vec::new(),
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            summary,
            rows,
            snapshots,
        })
    }
}

pub fn parse_metrics(csv: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = csv.lines();
    match lines.next() {
        Some(h) if h.trim() == MetricsRow::CSV_HEADER => {}
        other => {
            return Err(Error::Parse {
                what: METRICS_FILE.into(),
                detail: format!("unexpected header {other:?}"),
            })
        }
    }
    lines.filter(|l| !l.trim().is_empty()).map(MetricsRow::parse_csv_line).collect()
}

pub fn parse_snapshots(jsonl: &str) -> Result<Vec<GateSnapshot>> {
    jsonl
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                what: GATES_FILE.into(),
                detail: e.to_string(),
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// Improvement over the base run; positive is better.
    pub delta: f64,
    pub gap_base: f64,
    pub gap_other: f64,
}

/// Refuses runs that did not consume the same batches.
pub fn compare_runs(base: &RunSummary, other: &RunSummary) -> Result<Comparison> {
    if base.batch_fingerprint != other.batch_fingerprint {
        return Err(Error::Fingerprint(base.batch_fingerprint, other.batch_fingerprint));
    }
    if base.dataset != other.dataset || base.seed != other.seed || base.steps != other.steps {
        return Err(Error::contract(format!(
            "runs differ in protocol: {}/{}/{} vs {}/{}/{}",
            base.dataset, base.seed, base.steps, other.dataset, other.seed, other.steps
        )));
    }
    Ok(Comparison {
        delta: base.final_val - other.final_val,
        gap_base: base.final_val - base.final_train,
        gap_other: other.final_val - other.final_train,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TauStatistics {
    /// `(layer, head, scale, τ)` at the last snapshot.
    pub final_tau: Vec<(usize, usize, usize, f64)>,
    pub mean_final: f64,
    /// `(step, mean τ)` per snapshot.
    pub trajectory: Vec<(usize, f64)>,
    /// `|mean τ − 0.35|`, reported rather than checked.
    pub distance_from_reference: f64,
}

pub const TAU_REFERENCE: f64 = 0.35;

pub fn tau_statistics(snapshots: &[GateSnapshot]) -> Result<TauStatistics> {
    let mut steps: Vec<usize> = snapshots.iter().map(|s| s.step).collect();
    steps.dedup();
    if steps.len() < 2 {
        return Err(Error::contract(format!(
            "τ statistics need at least two snapshots, got {}",
            steps.len()
        )));
    }
    let mean_at = |step: usize| {
        let vals: Vec<f64> = snapshots.iter().filter(|s| s.step == step).map(|s| s.tau).collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    };
    let trajectory: Vec<(usize, f64)> = steps.iter().map(|&s| (s, mean_at(s))).collect();
    let last = *steps.last().expect("two steps");
    let final_tau: Vec<_> = snapshots
        .iter()
        .filter(|s| s.step == last)
        .map(|s| (s.layer, s.head, s.scale, s.tau))
        .collect();
    let mean_final = trajectory.last().expect("two steps").1;
    Ok(TauStatistics {
        final_tau,
        mean_final,
        trajectory,
        distance_from_reference: (mean_final - TAU_REFERENCE).abs(),
    })
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ThresholdFraction {
    /// `1 − Φ(τ)`.
    pub analytic: f64,
    pub empirical: Option<f64>,
    pub difference: Option<f64>,
}

/// Share of normalised energies above `tau`: analytic under a standard
/// normal, and empirical when samples are given.
pub fn above_threshold_fraction(tau: f64, samples: &[f64]) -> ThresholdFraction {
    let analytic = 1.0 - standard_normal_cdf(tau);
    let empirical = (!samples.is_empty())
        .then(|| samples.iter().filter(|&&e| e > tau).count() as f64 / samples.len() as f64);
    ThresholdFraction {
        analytic,
        empirical,
        difference: empirical.map(|e| e - analytic),
    }
}

/// Every normalised energy the gates produce over `n_batches` validation
/// batches, in evaluation mode.
pub fn normalized_energies<T: Scalar>(
    model: &TransformerModel<T>,
    corpus: &Corpus,
    cfg: &TrainConfig,
    n_batches: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..n_batches {
        let b = corpus.sample_batch(Split::Val, cfg.context, cfg.batch, cfg.seed, i as u64)?;
        let mut tape = Tape::inference();
        let fw = model.forward(&mut tape, &b.inputs, b.batch, b.seq, ForwardOptions::default())?;
        for trace in fw.gates.iter().flatten() {
            out.extend(tape.value(trace.normalized).data().iter().map(|v| v.as_f64()));
        }
    }
    Ok(out)
}

/// Mean of the per-signal scalograms.
pub fn mean_scalogram(signals: &[Vec<f64>], scales: &[f64]) -> Result<Scalogram> {
    let len = signals.first().map_or(0, |s| s.len());
    if signals.is_empty() || len == 0 {
        return Err(Error::contract("mean scalogram needs at least one non-empty signal"));
    }
    let mut acc = Scalogram::zeros(scales.to_vec(), len);
    let w = 1.0 / signals.len() as f64;
    for s in signals {
        if s.len() != len {
            return Err(Error::Length {
                op: "mean_scalogram",
                detail: format!("signal of {} samples among signals of {len}", s.len()),
            });
        }
        acc.accumulate(&cwt_scalogram(s, scales)?, w);
    }
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct ScalogramReport {
    pub scalogram: Scalogram,
    pub probe: String,
    /// 1-based block index whose output was analysed.
    pub layer: usize,
    pub truncated: bool,
}

impl ScalogramReport {
    pub fn header(&self) -> String {
        format!(
            "# residual stream after block {} (1-based), evaluation mode, mean over dimensions{}\n# probe: {}\n",
            self.layer,
            if self.truncated { ", probe truncated to the context window" } else { "" },
            self.probe
        )
    }
}

/// Scalogram of the residual stream after block `layer` (1-based) for
/// `probe`, averaged over every embedding dimension.
pub fn scalogram_report<T: Scalar>(
    model: &TransformerModel<T>,
    corpus_vocab: &crate::data::Vocab,
    probe: &str,
    layer: usize,
    scales: &[f64],
) -> Result<ScalogramReport> {
    let l = model.config.n_layers;
    if layer == 0 || layer > l {
        return Err(Error::contract(format!("layer {layer} outside 1..={l}")));
    }
    let mut ids = corpus_vocab.encode(probe)?;
    let truncated = ids.len() > model.config.context_len;
    ids.truncate(model.config.context_len);
    if ids.is_empty() {
        return Err(Error::contract("empty probe"));
    }
    let mut tape = Tape::inference();
    let fw = model.forward(&mut tape, &ids, 1, ids.len(), ForwardOptions::default())?;
    let h = tape.value(fw.hidden[layer - 1]);
    let (t_len, d) = (ids.len(), model.config.d_model);
    let signals: Vec<Vec<f64>> = (0..d)
        .map(|c| (0..t_len).map(|t| h.data()[t * d + c].as_f64()).collect())
        .collect();
    Ok(ScalogramReport {
        scalogram: mean_scalogram(&signals, scales)?,
        probe: probe.chars().take(t_len).collect(),
        layer,
        truncated,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    pub scales: Vec<f64>,
    pub energy: Vec<f64>,
    pub markers: Vec<usize>,
}

impl Spectrum {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("scale,energy\n");
        for (a, e) in self.scales.iter().zip(&self.energy) {
            s.push_str(&format!("{a:.6},{e:.9e}\n"));
        }
        s
    }
}

/// Total energy per scale.
pub fn energy_spectrum(sc: &Scalogram) -> Spectrum {
    Spectrum {
        scales: sc.scales.clone(),
        energy: (0..sc.n_scales()).map(|s| sc.row(s).iter().sum()).collect(),
        markers: SPECTRUM_MARKERS.to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeqLenRow {
    pub context: usize,
    pub batch: usize,
    pub val_base: f64,
    pub val_ega1: f64,
    pub delta: f64,
    pub fingerprint: u64,
}

/// `(T, B)` pairs holding `tokens_per_batch = B·T` fixed.
pub fn seqlen_plan(lengths: &[usize], tokens_per_batch: usize, max_context: usize) -> Result<Vec<(usize, usize)>> {
    lengths
        .iter()
        .map(|&t| {
            if t == 0 || t > max_context {
                return Err(Error::contract(format!("length {t} outside 1..={max_context}")));
            }
            if !tokens_per_batch.is_multiple_of(t) {
                return Err(Error::contract(format!("{tokens_per_batch} tokens do not split into rows of {t}")));
            }
            Ok((t, tokens_per_batch / t))
        })
        .collect()
}

/// Trains the baseline and the single-scale gate at each length on shared
/// batches and tabulates `val_base − val_ega1`.
pub fn seqlen_ablation(
    model: &ModelConfig,
    train: &TrainConfig,
    corpus: &Corpus,
    lengths: &[usize],
    tokens_per_batch: usize,
    micro_batch: usize,
) -> Result<Vec<SeqLenRow>> {
    let plan = seqlen_plan(lengths, tokens_per_batch, model.context_len)?;
    let mut rows = Vec::with_capacity(plan.len());
    for (t, b) in plan {
        let train = TrainConfig {
            context: t,
            batch: b,
            ..train.clone()
        };
        let mut result = Vec::with_capacity(2);
        for variant in [GateVariant::Base, GateVariant::Ega1] {
            let cfg = ModelConfig {
                gate_variant: variant,
                ..model.clone()
            };
            let mut trainer = Trainer::<f32>::new(TransformerModel::build(cfg)?, train.clone())?;
            trainer.micro_batch = micro_batch;
            trainer.record_time = false;
            let out = trainer.run(corpus, &mut ())?;
            result.push((out.final_val, trainer.consumed_fingerprint()));
        }
        let ((vb, fb), (ve, fe)) = (result[0], result[1]);
        if fb != fe {
            return Err(Error::Fingerprint(fb, fe));
        }
        rows.push(SeqLenRow {
            context: t,
            batch: b,
            val_base: vb,
            val_ega1: ve,
            delta: vb - ve,
            fingerprint: fb,
        });
    }
    Ok(rows)
}

/// Whether Δ grows with T, as reported alongside the table.
pub fn delta_increases(rows: &[SeqLenRow]) -> bool {
    rows.windows(2).all(|w| w[1].delta > w[0].delta)
}

pub fn seqlen_csv(rows: &[SeqLenRow]) -> String {
    let mut s = String::from("T,B,val_base,val_ega1,delta\n");
    for r in rows {
        s.push_str(&format!("{},{},{:.6},{:.6},{:.6}\n", r.context, r.batch, r.val_base, r.val_ega1, r.delta));
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub tau0: f64,
    pub final_val: f64,
    pub mean_final_tau: f64,
}

/// Retrains `model` from each initial threshold.
pub fn tau_sensitivity(
    model: &ModelConfig,
    train: &TrainConfig,
    corpus: &Corpus,
    taus: &[f64],
    micro_batch: usize,
) -> Result<Vec<SensitivityRow>> {
    taus.iter()
        .map(|&tau0| {
            let cfg = ModelConfig {
                gate_init: GateInit { tau: tau0, ..model.gate_init },
                ..model.clone()
            };
            let mut trainer = Trainer::<f32>::new(TransformerModel::build(cfg)?, train.clone())?;
            trainer.micro_batch = micro_batch;
            trainer.record_time = false;
            let out = trainer.run(corpus, &mut ())?;
            let stats = tau_statistics(&out.snapshots)?;
            Ok(SensitivityRow {
                tau0,
                final_val: out.final_val,
                mean_final_tau: stats.mean_final,
            })
        })
        .collect()
}
