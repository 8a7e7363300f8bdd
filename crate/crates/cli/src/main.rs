use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ega_core::analysis::{self, RunRecord, RunSummary, CONFIG_FILE};
use ega_core::plot::{self, RunSeries};
use ega_core::wavelets::default_scales;
use ega_core::GateVariant;

mod config;
mod run;

use config::{parse_variant, RunConfig, TrainFlags};

/// Energy-gated attention experiments on character corpora.
#[derive(Parser, Debug)]
#[command(name = "ega", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one variant into a run directory
    Train(TrainCmd),
    /// Train several variants on identical batches and tabulate them
    Ablate(AblateCmd),
    /// Analyses over finished runs
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCmd,
    },
    /// Validation curves, final losses and gaps of runs as one SVG
    Plot(PlotCmd),
    /// Continue a prompt with a trained model
    Sample(SampleCmd),
}

#[derive(Args, Debug)]
struct TrainCmd {
    #[command(flatten)]
    flags: TrainFlags,
    /// base|ega1|ega2|ega4|egac|egam|egadb2|egadb4
    #[arg(long, default_value = "ega1", value_parser = parse_variant)]
    variant: GateVariant,
    /// Run directory
    #[arg(long)]
    out: PathBuf,
    /// Continue from OUT/model.ckpt when present
    #[arg(long)]
    resume: bool,
    /// Checkpoint and stop once this step is reached; finish later with --resume
    #[arg(long)]
    until: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateCmd {
    #[command(flatten)]
    flags: TrainFlags,
    /// Comma-separated variants
    #[arg(long, default_value = "base,ega1,ega2,ega4,egac,egam,egadb2,egadb4")]
    variants: String,
    /// Parent directory; each variant trains into OUT/<variant>
    #[arg(long)]
    out: PathBuf,
    /// Train variants concurrently in threads instead of one after another
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand, Debug)]
enum AnalyzeCmd {
    /// Threshold trajectory and final values
    Tau {
        #[arg(long)]
        run: PathBuf,
        /// Output directory (defaults to the run directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean Morlet scalogram of one block's output for a probe text
    Scalogram(ScalogramArgs),
    /// Energy per scale of the probe scalogram
    Spectrum(ScalogramArgs),
    /// Baseline against single-scale gate at several context lengths
    Seqlen {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, default_value = "64,128,256")]
        lengths: String,
        /// Tokens per batch held fixed across lengths
        #[arg(long, default_value_t = 16384)]
        tokens: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Improvement of one run over a base run
    Compare {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        other: PathBuf,
    },
    /// Share of normalised energies above a threshold, analytic and measured
    Threshold {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value_t = 0.35, allow_hyphen_values = true)]
        tau: f64,
        /// Validation batches to collect energies from
        #[arg(long, default_value_t = 50)]
        batches: usize,
    },
    /// Retrain from several initial thresholds
    Sensitivity {
        #[command(flatten)]
        flags: TrainFlags,
        #[arg(long, default_value = "ega1", value_parser = parse_variant)]
        variant: GateVariant,
        #[arg(long, default_value = "-0.5,-0.25,0,0.25,0.5", allow_hyphen_values = true)]
        taus: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct ScalogramArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "To be or not to be that is the question Whether tis nobler in the mind to suffer")]
    probe: String,
    /// Block whose output is analysed, counted from 1
    #[arg(long, default_value_t = 3)]
    layer: usize,
    /// Output directory (defaults to the run directory)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotCmd {
    /// Run directories
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// SVG file to write
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleCmd {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value = "\n")]
    prompt: String,
    #[arg(long, default_value_t = 200)]
    length: usize,
    /// 0 picks the most likely character
    #[arg(long, default_value_t = 0.8)]
    temperature: f64,
    #[arg(long, default_value_t = 1337)]
    seed: u64,
}

fn main() -> ExitCode {
    let matches = match Cli::command().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<ega_core::Error>() {
                Some(ega_core::Error::NonFiniteLoss { .. }) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn sub<'a>(m: &'a ArgMatches, path: &[&str]) -> &'a ArgMatches {
    path.iter()
        .fold(m, |m, name| m.subcommand_matches(name).expect("subcommand was parsed"))
}

fn given(m: &ArgMatches, id: &str) -> bool {
    matches!(m.value_source(id), Some(clap::parser::ValueSource::CommandLine))
}

fn dispatch(cli: Cli, m: &ArgMatches) -> Result<()> {
    match cli.command {
        Command::Train(cmd) => {
            let sm = sub(m, &["train"]);
            let mut cfg = cmd.flags.resolve(sm)?;
            if given(sm, "variant") || cmd.flags.config.is_none() {
                cfg.model.gate_variant = cmd.variant;
            }
            let corpus = run::load_run_corpus(&cfg)?;
            let Some(s) = run::train_into(&cfg, &corpus, &cmd.out, cmd.resume, cmd.until)? else {
                println!("stopped at step {}; continue with --resume", cmd.until.unwrap_or(0));
                return Ok(());
            };
            println!(
                "{} {}: val {:.4}, train {:.4}, gap {:.4}, {} parameters ({} in gates)",
                s.variant.label(),
                s.dataset,
                s.final_val,
                s.final_train,
                s.final_val - s.final_train,
                s.params,
                s.extra_params
            );
            Ok(())
        }
        Command::Ablate(cmd) => ablate(cmd, sub(m, &["ablate"])),
        Command::Analyze { what } => analyze(what, sub(m, &["analyze"])),
        Command::Plot(cmd) => plot_runs(&cmd),
        Command::Sample(cmd) => sample(&cmd),
    }
}

fn parse_variants(list: &str) -> Result<Vec<GateVariant>> {
    let mut out: Vec<GateVariant> = Vec::new();
    for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v: GateVariant = name.parse()?;
        if out.contains(&v) {
            eprintln!("warning: variant {v} listed twice; training it once");
        } else {
            out.push(v);
        }
    }
    if out.is_empty() {
        bail!("no variants given");
    }
    Ok(out)
}

fn ablate(cmd: AblateCmd, m: &ArgMatches) -> Result<()> {
    let variants = parse_variants(&cmd.variants)?;
    let base_cfg = cmd.flags.resolve(m)?;
    let corpus = run::load_run_corpus(&base_cfg)?;
    let job = |v: GateVariant| -> Result<RunSummary> {
        let mut cfg = base_cfg.clone();
        cfg.model.gate_variant = v;
        let s = run::train_into(&cfg, &corpus, &cmd.out.join(v.name()), false, None)?;
        Ok(s.expect("runs without a stop step finish"))
    };
    let summaries: Vec<RunSummary> = if cmd.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = variants.iter().map(|&v| s.spawn(move || job(v))).collect();
            handles.into_iter().map(|h| h.join().expect("training thread panicked")).collect::<Result<Vec<_>>>()
        })?
    } else {
        variants.iter().map(|&v| job(v)).collect::<Result<_>>()?
    };
    let reference = summaries
        .iter()
        .find(|s| s.variant == GateVariant::Base)
        .unwrap_or(&summaries[0]);
    let mut csv = String::from("variant,val,delta,gap,extra_params\n");
    for s in &summaries {
        let c = analysis::compare_runs(reference, s)?;
        csv.push_str(&format!(
            "{},{:.4},{:+.4},{:.4},{}\n",
            s.variant, s.final_val, c.delta, c.gap_other, s.extra_params
        ));
    }
    std::fs::write(cmd.out.join("summary.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn stem(s: &RunSummary) -> String {
    format!("{}_{}_s{}", s.variant, s.dataset, s.seed)
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().with_context(|| format!("bad list entry {x:?}")))
        .collect()
}

fn analyze(what: AnalyzeCmd, m: &ArgMatches) -> Result<()> {
    match what {
        AnalyzeCmd::Tau { run, out } => {
            let rec = RunRecord::load(&run)?;
            let st = analysis::tau_statistics(&rec.snapshots)?;
            let out = out.unwrap_or(run);
            std::fs::create_dir_all(&out)?;
            let name = stem(&rec.summary);
            let mut traj = String::from("step,mean_tau\n");
            for (step, t) in &st.trajectory {
                traj.push_str(&format!("{step},{t:.6}\n"));
            }
            std::fs::write(out.join(format!("tau_trajectory_{name}.csv")), traj)?;
            let mut fin = String::from("layer,head,scale,tau\n");
            for (l, h, s, t) in &st.final_tau {
                fin.push_str(&format!("{l},{h},{s},{t:.6}\n"));
            }
            std::fs::write(out.join(format!("tau_final_{name}.csv")), fin)?;
            println!(
                "mean final tau {:.4} over {} gates; |mean - {}| = {:.4}",
                st.mean_final,
                st.final_tau.len(),
                analysis::TAU_REFERENCE,
                st.distance_from_reference
            );
            Ok(())
        }
        AnalyzeCmd::Scalogram(a) => {
            let (report, summary, out) = probe_scalogram(&a)?;
            let name = format!("scalogram_{}_L{}", stem(&summary), a.layer);
            std::fs::write(out.join(format!("{name}.csv")), report.header() + &report.scalogram.to_csv())?;
            let title = format!("{} block {} scalogram", summary.variant.label(), a.layer);
            std::fs::write(out.join(format!("{name}.svg")), plot::scalogram_heatmap(&report.scalogram, &title))?;
            println!(
                "scalogram {} scales x {} positions{}",
                report.scalogram.n_scales(),
                report.scalogram.len,
                if report.truncated { " (probe truncated)" } else { "" }
            );
            Ok(())
        }
        AnalyzeCmd::Spectrum(a) => {
            let (report, summary, out) = probe_scalogram(&a)?;
            let sp = analysis::energy_spectrum(&report.scalogram);
            let name = format!("spectrum_{}_L{}", stem(&summary), a.layer);
            std::fs::write(out.join(format!("{name}.csv")), sp.to_csv())?;
            let title = format!("{} block {} energy spectrum", summary.variant.label(), a.layer);
            std::fs::write(out.join(format!("{name}.svg")), plot::spectrum_plot(&sp, &title))?;
            let fine: f64 = sp.scales.iter().zip(&sp.energy).filter(|(a, _)| **a <= 3.0).map(|(_, e)| e).sum();
            let n = sp.energy.len();
            let coarse: f64 = sp.energy[n - (n / 10).max(1)..].iter().sum();
            println!("energy at scales <= 3: {fine:.4e}; coarsest decile: {coarse:.4e}");
            Ok(())
        }
        AnalyzeCmd::Seqlen { flags, lengths, tokens, out } => {
            let cfg = flags.resolve(sub(m, &["seqlen"]))?;
            let lengths: Vec<usize> = parse_list(&lengths)?;
            let corpus = run::load_run_corpus(&cfg)?;
            let mut model = cfg.model.clone();
            model.vocab_size = corpus.vocab.len();
            model.context_len = model.context_len.max(lengths.iter().copied().max().unwrap_or(0));
            let rows = analysis::seqlen_ablation(&model, &cfg.train, &corpus, &lengths, tokens, cfg.run.micro_batch)?;
            std::fs::create_dir_all(&out)?;
            let csv = analysis::seqlen_csv(&rows);
            std::fs::write(out.join(format!("seqlen_{}_s{}.csv", corpus.name, cfg.train.seed)), &csv)?;
            print!("{csv}");
            println!("delta increases with T: {}", analysis::delta_increases(&rows));
            Ok(())
        }
        AnalyzeCmd::Compare { base, other } => {
            let b = RunRecord::load(&base)?;
            let o = RunRecord::load(&other)?;
            let c = analysis::compare_runs(&b.summary, &o.summary)?;
            println!(
                "delta {:+.4} (base {:.4}, other {:.4}); gap base {:.4}, gap other {:.4}",
                c.delta, b.summary.final_val, o.summary.final_val, c.gap_base, c.gap_other
            );
            Ok(())
        }
        AnalyzeCmd::Threshold { run, tau, batches } => {
            let cfg = RunConfig::load(&run.join(CONFIG_FILE))?;
            let corpus = run::load_run_corpus(&cfg)?;
            let (model, _) = run::load_run_model(&run)?;
            let e = analysis::normalized_energies(&model, &corpus, &cfg.train, batches)?;
            let f = analysis::above_threshold_fraction(tau, &e);
            match (f.empirical, f.difference) {
                (Some(emp), Some(d)) => println!(
                    "tau {tau}: analytic {:.4}, empirical {emp:.4} over {} energies, difference {d:+.4}",
                    f.analytic,
                    e.len()
                ),
                _ => println!("tau {tau}: analytic {:.4}; the run has no gates", f.analytic),
            }
            Ok(())
        }
        AnalyzeCmd::Sensitivity { flags, variant, taus, out } => {
            let sm = sub(m, &["sensitivity"]);
            let mut cfg = flags.resolve(sm)?;
            if given(sm, "variant") || flags.config.is_none() {
                cfg.model.gate_variant = variant;
            }
            let taus: Vec<f64> = parse_list(&taus)?;
            let corpus = run::load_run_corpus(&cfg)?;
            cfg.model.vocab_size = corpus.vocab.len();
            let rows = analysis::tau_sensitivity(&cfg.model, &cfg.train, &corpus, &taus, cfg.run.micro_batch)?;
            std::fs::create_dir_all(&out)?;
            let mut csv = String::from("tau0,final_val,mean_final_tau\n");
            for r in &rows {
                csv.push_str(&format!("{},{:.6},{:.6}\n", r.tau0, r.final_val, r.mean_final_tau));
            }
            let name = format!("sensitivity_{}_{}_s{}.csv", cfg.model.gate_variant, corpus.name, cfg.train.seed);
            std::fs::write(out.join(name), &csv)?;
            print!("{csv}");
            Ok(())
        }
    }
}

fn probe_scalogram(a: &ScalogramArgs) -> Result<(analysis::ScalogramReport, RunSummary, PathBuf)> {
    let rec = RunRecord::load(&a.run)?;
    let vocab = run::read_vocab(&a.run)?;
    let (model, _) = run::load_run_model(&a.run)?;
    let report = analysis::scalogram_report(&model, &vocab, &a.probe, a.layer, &default_scales())?;
    if report.truncated {
        eprintln!("warning: probe truncated to {} characters", model.config.context_len);
    }
    let out = a.out.clone().unwrap_or_else(|| a.run.clone());
    std::fs::create_dir_all(&out)?;
    Ok((report, rec.summary, out))
}

fn plot_runs(cmd: &PlotCmd) -> Result<()> {
    let records = cmd.runs.iter().map(RunRecord::load).collect::<ega_core::Result<Vec<_>>>()?;
    let series: Vec<RunSeries<'_>> = records
        .iter()
        .map(|r| RunSeries {
            label: label_for(&r.dir, &r.summary),
            variant: r.summary.variant,
            rows: &r.rows,
        })
        .collect();
    let svg = plot::training_figure(&series)?;
    if let Some(parent) = cmd.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(&cmd.out, svg).with_context(|| format!("writing {}", cmd.out.display()))?;
    Ok(())
}

fn label_for(dir: &Path, s: &RunSummary) -> String {
    let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if name == s.variant.name() {
        s.variant.label().to_string()
    } else {
        format!("{} ({name})", s.variant.label())
    }
}

fn sample(cmd: &SampleCmd) -> Result<()> {
    let vocab = run::read_vocab(&cmd.run)?;
    let (model, _) = run::load_run_model(&cmd.run)?;
    let prompt = vocab.encode(&cmd.prompt)?;
    let mut rng = ega_core::rng::stream(cmd.seed, ega_core::rng::Purpose::Sampling, 0);
    let ids = model.sample(&prompt, cmd.length, cmd.temperature, &mut rng)?;
    println!("{}", vocab.decode(&ids)?);
    Ok(())
}
