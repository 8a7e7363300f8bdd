//! Training into a run directory.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ega_core::analysis::{
    RunSummary, CHECKPOINT_FILE, CONFIG_FILE, GATES_FILE, METRICS_FILE, RAW_LOSS_FILE, SUMMARY_FILE,
};
use ega_core::data::{load_corpus, Corpus, Vocab};
use ega_core::trainer::{Checkpoint, GateSnapshot, MetricsRow, TrainObserver, Trainer};
use ega_core::{Model32, ModelConfig};

use crate::config::RunConfig;

pub const VOCAB_FILE: &str = "vocab.json";

struct RunFiles {
    metrics: BufWriter<File>,
    raw: BufWriter<File>,
    gates: BufWriter<File>,
}

/// Drops lines recorded after `step`, left behind when a run died between
/// checkpoints. `step_of` returns None for lines that are always kept.
fn truncate_after(path: &Path, step: usize, step_of: impl Fn(&str) -> Option<usize>) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path)?;
    let kept: String = text
        .lines()
        .filter(|l| step_of(l).is_none_or(|s| s <= step))
        .flat_map(|l| [l, "\n"])
        .collect();
    if kept.len() != text.len() {
        std::fs::write(path, kept)?;
    }
    Ok(())
}

fn csv_step(line: &str) -> Option<usize> {
    line.split(',').next()?.parse().ok()
}

fn snapshot_step(line: &str) -> Option<usize> {
    serde_json::from_str::<GateSnapshot>(line).ok().map(|s| s.step)
}

impl RunFiles {
    fn open(dir: &Path, append: bool) -> Result<Self> {
        let open = |name: &str, header: Option<&str>| -> Result<BufWriter<File>> {
            let path = dir.join(name);
            let fresh = !append || !path.exists();
            let f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)
                .with_context(|| format!("opening {}", path.display()))?;
            let mut w = BufWriter::new(f);
            if let (true, Some(h)) = (fresh, header) {
                writeln!(w, "{h}")?;
            }
            Ok(w)
        };
        Ok(Self {
            metrics: open(METRICS_FILE, Some(MetricsRow::CSV_HEADER))?,
            raw: open(RAW_LOSS_FILE, Some("step,raw_loss"))?,
            gates: open(GATES_FILE, None)?,
        })
    }
}

fn io(e: std::io::Error) -> ega_core::Error {
    ega_core::Error::io("run directory", e)
}

impl TrainObserver for RunFiles {
    fn on_row(&mut self, row: &MetricsRow) -> ega_core::Result<()> {
        writeln!(self.metrics, "{}", row.csv_line()).map_err(io)?;
        writeln!(self.raw, "{},{:.6}", row.step, row.raw_loss).map_err(io)?;
        self.metrics.flush().map_err(io)?;
        self.raw.flush().map_err(io)
    }

    fn on_snapshot(&mut self, snapshot: &[GateSnapshot]) -> ega_core::Result<()> {
        for s in snapshot {
            writeln!(self.gates, "{}", serde_json::to_string(s).expect("snapshot serialises")).map_err(io)?;
        }
        self.gates.flush().map_err(io)
    }
}

pub fn load_run_corpus(cfg: &RunConfig) -> Result<Corpus> {
    let corpus = load_corpus(cfg.data_path()?, cfg.data.dataset.name(), cfg.data.split)?;
    eprintln!(
        "{}: {} train / {} val characters, vocabulary {}",
        corpus.name,
        corpus.train.len(),
        corpus.val.len(),
        corpus.vocab.len()
    );
    Ok(corpus)
}

pub fn write_vocab(dir: &Path, vocab: &Vocab) -> Result<()> {
    let chars: String = vocab.chars().iter().collect();
    std::fs::write(dir.join(VOCAB_FILE), serde_json::to_string(&chars)?)?;
    Ok(())
}

pub fn read_vocab(dir: &Path) -> Result<Vocab> {
    let path = dir.join(VOCAB_FILE);
    let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let chars: String = serde_json::from_str(&text)?;
    Ok(Vocab::from_text(&chars))
}

/// Trains `cfg` into `out`, continuing from `out/model.ckpt` when `resume`
/// is set and the checkpoint exists. With `until` below the configured
/// steps, training checkpoints there and returns `None`.
pub fn train_into(
    cfg: &RunConfig,
    corpus: &Corpus,
    out: &Path,
    resume: bool,
    until: Option<usize>,
) -> Result<Option<RunSummary>> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let resuming = resume && ckpt_path.exists();
    let mut cfg = cfg.clone();
    cfg.model.vocab_size = corpus.vocab.len();
    let mut trainer = if resuming {
        let ck = Checkpoint::load(&ckpt_path)?;
        if ck.header.model != cfg.model || ck.header.train.as_ref() != Some(&cfg.train) {
            bail!("{} was written with a different configuration", ckpt_path.display());
        }
        let step = ck.header.progress.as_ref().map_or(0, |p| p.step);
        truncate_after(&out.join(METRICS_FILE), step, csv_step)?;
        truncate_after(&out.join(RAW_LOSS_FILE), step, csv_step)?;
        truncate_after(&out.join(GATES_FILE), step, snapshot_step)?;
        Trainer::<f32>::resume(&ck)?
    } else {
        std::fs::write(out.join(CONFIG_FILE), cfg.to_toml())?;
        write_vocab(out, &corpus.vocab)?;
        Trainer::new(Model32::build(cfg.model.clone())?, cfg.train.clone())?
    };
    trainer.micro_batch = cfg.run.micro_batch;
    trainer.record_time = !cfg.run.no_timing;
    let mut files = RunFiles::open(out, resuming)?;
    let steps = cfg.train.steps;
    let stop = until.unwrap_or(steps).min(steps);
    let every = match cfg.run.checkpoint_every {
        0 => steps,
        n => n,
    };
    while trainer.step() < stop {
        let next = ((trainer.step() / every + 1) * every).min(stop);
        trainer.run_until(corpus, next, &mut files)?;
        trainer.checkpoint().save(&ckpt_path)?;
    }
    if trainer.step() < steps {
        return Ok(None);
    }
    let fingerprint = corpus.batch_fingerprint(cfg.train.context, cfg.train.batch, cfg.train.seed, steps as u64)?;
    if !resuming && fingerprint != trainer.consumed_fingerprint() {
        bail!("consumed batches diverge from the seeded stream");
    }
    let final_val = match trainer.progress.last_val {
        Some(v) => v,
        None => trainer.evaluate(corpus, ega_core::data::Split::Val)?,
    };
    let summary = RunSummary {
        variant: cfg.model.gate_variant,
        dataset: corpus.name.clone(),
        seed: cfg.train.seed,
        steps,
        batch: cfg.train.batch,
        context: cfg.train.context,
        batch_fingerprint: fingerprint,
        final_train: trainer.progress.ema_loss.unwrap_or(f64::NAN),
        final_val,
        best_val: trainer.progress.best_val.unwrap_or(final_val),
        params: trainer.model.count_params(),
        extra_params: trainer.model.count_gate_params(),
        admissibility_clamps: trainer.progress.admissibility_clamps,
    };
    std::fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(Some(summary))
}

/// Model configuration stored in a run's checkpoint.
pub fn load_run_model(dir: &Path) -> Result<(Model32, ModelConfig)> {
    let ck = Checkpoint::load(dir.join(CHECKPOINT_FILE))?;
    let model: Model32 = ck.model()?;
    Ok((model, ck.header.model.clone()))
}
