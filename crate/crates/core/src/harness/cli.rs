//! Command-line entry point.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use super::experiment::{
    self, cached_reference_maps, classifier_checkpoint, load_encoder, metrics_csv, trial_adapters, trial_dataset, Arm,
    ExperimentConfig, Progress, RecordFile, CONFIG_FILE, RECORD_FILE,
};
use crate::biasgen::{self, DatasetSpec, Split};
use crate::checkpoint;
use crate::classifier::ClassifierState;
use crate::encoders::{FrozenEncoder, ProbAdapter};
use crate::error::{Error, Result};
use crate::mapio;
use crate::saliency::{self, Guidance};
use crate::seed;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_FAILURE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "paric", version, about = "Language-guided attention regularization with probabilistic reference maps")]
struct Cli {
    /// Base seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a JSON spec.
    GenData { spec: PathBuf, out_dir: PathBuf },
    /// Train the probabilistic adapters for every trial.
    TrainAdapters { config: Option<PathBuf> },
    /// Build and cache reference maps; export a few with their uncertainty.
    BuildRefs { config: Option<PathBuf> },
    /// Train and evaluate the sampled-reference classifier.
    Train { config: Option<PathBuf> },
    /// Re-evaluate saved classifiers of a run directory.
    Eval { run_dir: PathBuf },
    /// Baseline vs deterministic reference vs sampled mean vs sampled median.
    Compare { config: Option<PathBuf> },
    /// Write image / reference / attention triptychs for the first N test images.
    ExportMaps { run_dir: PathBuf, n: usize },
}

/// Failure split into usage errors (exit 1) and runtime errors (exit 2).
enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

/// Parses arguments (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn read_text(path: &Path, what: &str) -> CliResult<String> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("{what} not found: {}", path.display())));
    }
    std::fs::read_to_string(path).map_err(|e| Failure::Runtime(Error::io(path, e)))
}

fn load_config(cli: &Cli, path: Option<&Path>) -> CliResult<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = read_text(p, "config file")?;
            ExperimentConfig::from_json(&text, p).map_err(|e| Failure::Usage(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn dispatch(cli: &Cli) -> CliResult<()> {
    let progress = Progress { quiet: cli.quiet };
    match &cli.command {
        Command::GenData { spec, out_dir } => gen_data(cli, spec, out_dir, progress),
        Command::TrainAdapters { config } => {
            let cfg = load_config(cli, config.as_deref())?;
            train_adapters_cmd(&cfg, progress).map_err(Into::into)
        }
        Command::BuildRefs { config } => {
            let cfg = load_config(cli, config.as_deref())?;
            build_refs(&cfg, progress).map_err(Into::into)
        }
        Command::Train { config } => {
            let cfg = load_config(cli, config.as_deref())?;
            let out = cfg.output_dir.clone();
            let record = experiment::run_arms(&cfg, &[Arm::sampled(cfg.method)], Some(&out), progress)?;
            experiment::write_outputs(&out, &record)?;
            report(&record, progress)?;
            Ok(())
        }
        Command::Eval { run_dir } => {
            if !run_dir.join(RECORD_FILE).is_file() {
                return Err(Failure::Usage(format!("no {RECORD_FILE} in run directory {}", run_dir.display())));
            }
            let record = experiment::reevaluate(run_dir)?;
            progress.note(format!("re-evaluated {} run(s); metrics match the record", record.runs.len()));
            print!("{}", metrics_csv(&record)?);
            Ok(())
        }
        Command::Compare { config } => {
            let cfg = load_config(cli, config.as_deref())?;
            let out = cfg.output_dir.clone();
            let record = experiment::compare(&cfg, Some(&out), progress)?;
            experiment::write_outputs(&out, &record)?;
            report(&record, progress)?;
            Ok(())
        }
        Command::ExportMaps { run_dir, n } => {
            if !run_dir.join(RECORD_FILE).is_file() {
                return Err(Failure::Usage(format!("no {RECORD_FILE} in run directory {}", run_dir.display())));
            }
            let out = cli.out.clone().unwrap_or_else(|| run_dir.clone());
            export_maps(run_dir, &out, *n, progress).map_err(Into::into)
        }
    }
}

fn report(record: &RecordFile, progress: Progress) -> Result<()> {
    if !progress.quiet {
        print!("{}", metrics_csv(record)?);
    }
    Ok(())
}

fn gen_data(cli: &Cli, spec_path: &Path, out_dir: &Path, progress: Progress) -> CliResult<()> {
    let text = read_text(spec_path, "dataset spec")?;
    let mut spec: DatasetSpec = serde_json::from_str(&text).map_err(|e| {
        Failure::Usage(
            Error::Json {
                path: spec_path.to_path_buf(),
                source: e,
            }
            .to_string(),
        )
    })?;
    if let Some(s) = cli.seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let ds = biasgen::generate(&spec)?;
    biasgen::save_dataset(&ds, out_dir)?;
    for split in Split::ALL {
        let s = ds.split(split);
        let aligned = s.iter().filter(|x| x.aligned()).count();
        progress.note(format!(
            "{:>5}: {} samples, {:.3} background-aligned",
            split.name(),
            s.len(),
            aligned as f64 / s.len() as f64
        ));
    }
    Ok(())
}

fn train_adapters_cmd(cfg: &ExperimentConfig, progress: Progress) -> Result<()> {
    let out = &cfg.output_dir;
    let dir = out.join("checkpoints");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let encoder = load_encoder(cfg)?;
    encoder.save(&dir.join("encoder.paric"))?;
    for trial in 0..cfg.trials {
        let ds = trial_dataset(cfg, trial)?;
        let a = trial_adapters(cfg, &encoder, &ds, trial)?;
        checkpoint::save(&dir.join(format!("adapter_image_t{trial}.paric")), a.image.params())?;
        checkpoint::save(&dir.join(format!("adapter_text_t{trial}.paric")), a.text.params())?;
        let p = dir.join(format!("adapters_t{trial}.json"));
        let json = serde_json::to_string_pretty(&a.log).map_err(|e| Error::Json { path: p.clone(), source: e })?;
        std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
        progress.note(format!(
            "trial {trial}: held-out loss {:.4} -> {:.4} ({:.1}% lower)",
            a.log.initial_heldout,
            a.log.final_heldout(),
            100.0 * a.log.relative_improvement()
        ));
    }
    Ok(())
}

fn build_refs(cfg: &ExperimentConfig, progress: Progress) -> Result<()> {
    let out = &cfg.output_dir;
    let maps = out.join("maps");
    std::fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;
    let encoder = load_encoder(cfg)?;
    let arms = [Arm::Deterministic, Arm::sampled(cfg.method)];
    for trial in 0..cfg.trials {
        let ds = trial_dataset(cfg, trial)?;
        let adapters = trial_adapters(cfg, &encoder, &ds, trial)?;
        let refs = cached_reference_maps(cfg, &encoder, Some(&adapters), &ds, trial, &arms, Some(out))?;
        for (arm, maps_of) in &refs {
            let mut loc = 0.0;
            for (r, s) in maps_of.iter().zip(&ds.train) {
                loc += biasgen::localization_score(&r.values, &s.mask)?;
            }
            progress.note(format!(
                "trial {trial} {:>13}: {} maps, mean localization {:.4}",
                arm.name(),
                maps_of.len(),
                loc / maps_of.len() as f64
            ));
            if trial == 0 {
                for (i, r) in maps_of.iter().take(cfg.export_maps).enumerate() {
                    saliency::export_reference(&maps.join(format!("{}_{i:04}", arm.name())), r)?;
                }
            }
        }
    }
    Ok(())
}

fn load_adapter(cfg: &ExperimentConfig, dim: usize, path: &Path) -> Result<ProbAdapter> {
    let a = &cfg.adapter;
    let mut rng = seed::stream(0, "adapter-shell", 0);
    let mut ad = ProbAdapter::new(dim, a.hidden, a.dropout_rate, a.init_alpha, &mut rng)?;
    ad.set_params(checkpoint::load(path)?)?;
    Ok(ad)
}

fn export_maps(run_dir: &Path, out: &Path, n: usize, progress: Progress) -> Result<()> {
    let record = RecordFile::load(&run_dir.join(RECORD_FILE))?;
    let cfg = &record.config;
    let ckpt = run_dir.join("checkpoints");
    let encoder = FrozenEncoder::load(&cfg.encoder_name, &cfg.encoder, &ckpt.join("encoder.paric"))?;
    let ds = trial_dataset(cfg, 0)?;
    let maps = out.join("maps");
    std::fs::create_dir_all(&maps).map_err(|e| Error::io(&maps, e))?;

    let sampled = record.runs.iter().map(|r| r.arm).find(|a| matches!(a, Arm::ParicMean | Arm::ParicMedian));
    let adapters = match sampled {
        Some(_) => Some((
            load_adapter(cfg, encoder.embed_dim(), &ckpt.join("adapter_image_t0.paric"))?,
            load_adapter(cfg, encoder.embed_dim(), &ckpt.join("adapter_text_t0.paric"))?,
        )),
        None => None,
    };
    let mut classifiers = Vec::new();
    for run in &record.runs {
        let mut st = ClassifierState::new(
            ds.spec.num_classes,
            ds.spec.height,
            ds.spec.width,
            cfg.classifier.channels,
            &mut seed::stream(0, "export", 0),
        )?;
        st.load_weights(&classifier_checkpoint(run_dir, run.arm, 0))?;
        classifiers.push((run.arm, st));
    }

    let base = seed::derive_seed(cfg.trial_seed(0), "export", 0);
    for (i, s) in ds.split(Split::Test).iter().take(n).enumerate() {
        let reference = match (&adapters, sampled) {
            (Some((ai, at)), Some(arm)) => {
                let g = Guidance {
                    encoder: &encoder,
                    image_adapter: ai,
                    text_adapter: at,
                };
                let method = if arm == Arm::ParicMedian {
                    saliency::Aggregation::Median
                } else {
                    saliency::Aggregation::Mean
                };
                g.reference(&s.image, &s.prompt, cfg.k_samples, method, &mut seed::stream(base, "image", i as u64))?
            }
            _ => saliency::deterministic_reference(&encoder, &s.image, &s.prompt)?,
        };
        saliency::export_reference(&maps.join(format!("test_{i:04}")), &reference)?;
        let mut panels = vec![s.image.clone(), reference.values.clone()];
        for (arm, st) in &classifiers {
            let (_, att) = st.forward_classify(&s.image)?;
            let peak = att.max_value();
            let shown = if peak > 0.0 { att.map(|v| v / peak) } else { att };
            mapio::export_map(&maps.join(format!("test_{i:04}_att_{}", arm.name())), &shown)?;
            panels.push(shown);
        }
        mapio::write_png(&maps.join(format!("triptych_{i:04}.png")), &mapio::triptych(&panels)?)?;
    }
    let order: Vec<&str> = classifiers.iter().map(|(a, _)| a.name()).collect();
    progress.note(format!(
        "wrote {} panel strips to {} (image | reference | attention of {})",
        n.min(ds.test.len()),
        maps.display(),
        order.join(", ")
    ));
    let p = maps.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(cfg).map_err(|e| Error::Json { path: p.clone(), source: e })?;
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))
}
