//! Multi-trial experiments comparing an unguided baseline, a deterministic
//! reference map, and sampled reference maps aggregated by mean or median.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{outcome_divergence, Stat, DEFAULT_BINS};
use crate::biasgen::{self, Dataset, DatasetSpec, Sample, Split};
use crate::checkpoint;
use crate::classifier::{ClassifierState, LossBreakdown, DEFAULT_LAMBDA, DEFAULT_LR};
use crate::diffcore::Tensor;
use crate::encoders::{embed_pairs, train_adapters, AdapterTrainConfig, AdapterTrainLog, EncoderConfig, FrozenEncoder, ProbAdapter};
use crate::error::{Error, Result};
use crate::mapio;
use crate::saliency::{aggregate, deterministic_reference, Aggregation, Guidance, ReferenceAttention};
use crate::seed;

pub const DEFAULT_ENCODER_NAME: &str = "frozen-stand-in-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Output channels of the two conv layers.
    pub channels: [usize; 2],
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 30,
            lr: DEFAULT_LR,
            batch_size: 8,
            channels: [8, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// Dataset directory to load instead of generating one per trial.
    pub dataset_path: Option<PathBuf>,
    pub encoder: EncoderConfig,
    pub encoder_name: String,
    /// Frozen weights are loaded from here when the file exists, and saved
    /// here after pretraining otherwise.
    pub encoder_cache: Option<PathBuf>,
    pub k_samples: usize,
    pub method: Aggregation,
    pub lambda: f64,
    pub adapter: AdapterTrainConfig,
    /// Pin both adapters' scale output to its floor after training.
    pub floor_adapter_scale: bool,
    pub classifier: ClassifierTrainConfig,
    pub trials: usize,
    pub seed: u64,
    /// Histogram bins for outcome divergence.
    pub bins: usize,
    /// Reference maps exported by `build-refs` (first N training images).
    pub export_maps: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::default(),
            dataset_path: None,
            encoder: EncoderConfig::default(),
            encoder_name: DEFAULT_ENCODER_NAME.to_string(),
            encoder_cache: None,
            k_samples: 50,
            method: Aggregation::Mean,
            lambda: DEFAULT_LAMBDA,
            adapter: AdapterTrainConfig::default(),
            floor_adapter_scale: false,
            classifier: ClassifierTrainConfig::default(),
            trials: 5,
            seed: 0,
            bins: DEFAULT_BINS,
            export_maps: 8,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_samples == 0 {
            return Err(Error::config("k_samples", "must be at least 1"));
        }
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::config("lambda", "must be finite and non-negative"));
        }
        if self.bins == 0 {
            return Err(Error::config("bins", "must be at least 1"));
        }
        if self.classifier.epochs == 0 {
            return Err(Error::config("classifier.epochs", "must be at least 1"));
        }
        if self.classifier.batch_size == 0 {
            return Err(Error::config("classifier.batch_size", "must be at least 1"));
        }
        if !(self.classifier.lr >= 0.0) || !self.classifier.lr.is_finite() {
            return Err(Error::config("classifier.lr", "must be finite and non-negative"));
        }
        if self.classifier.channels.contains(&0) {
            return Err(Error::config("classifier.channels", "must be positive"));
        }
        if self.encoder_name.is_empty() {
            return Err(Error::config("encoder_name", "must not be empty"));
        }
        self.encoder.validate()?;
        self.adapter.validate()?;
        if self.dataset_path.is_none() {
            self.dataset.validate()?;
            if (self.dataset.height, self.dataset.width) != (self.encoder.height, self.encoder.width) {
                return Err(Error::config("dataset.height", "image size must match the encoder input size"));
            }
        }
        Ok(())
    }

    pub fn trial_seed(&self, trial: usize) -> u64 {
        seed::derive_seed(self.seed, "trial", trial as u64)
    }
}

/// One row of a comparison.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    /// `λ = 0`: no attention guidance.
    Baseline,
    /// Single Grad-CAM map from the frozen encoders, no adapters.
    Deterministic,
    ParicMean,
    ParicMedian,
}

impl Arm {
    pub const ALL: [Arm; 4] = [Arm::Baseline, Arm::Deterministic, Arm::ParicMean, Arm::ParicMedian];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Deterministic => "deterministic",
            Arm::ParicMean => "paric-mean",
            Arm::ParicMedian => "paric-median",
        }
    }

    pub fn sampled(method: Aggregation) -> Arm {
        match method {
            Aggregation::Mean => Arm::ParicMean,
            Aggregation::Median => Arm::ParicMedian,
        }
    }

    fn aggregation(self) -> Option<Aggregation> {
        match self {
            Arm::ParicMean => Some(Aggregation::Mean),
            Arm::ParicMedian => Some(Aggregation::Median),
            _ => None,
        }
    }

    fn lambda(self, cfg: &ExperimentConfig) -> f64 {
        match self {
            Arm::Baseline => 0.0,
            _ => cfg.lambda,
        }
    }
}

/// Stderr progress notes, silenced by `quiet`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Progress {
    pub quiet: bool,
}

impl Progress {
    pub fn note(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialMetrics {
    pub per_class_accuracy: Vec<f64>,
    pub overall_accuracy: f64,
    pub outcome_divergence: f64,
    pub localization: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: TrialMetrics,
    pub final_loss: LossBreakdown,
    /// Held-out adapter loss before and after training, when adapters ran.
    pub adapter_heldout: Option<[f64; 2]>,
    pub wall_clock_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_class_accuracy: Vec<Stat>,
    pub overall_accuracy: Stat,
    pub outcome_divergence: Stat,
    pub localization: Stat,
}

impl Summary {
    pub fn of(rows: &[TrialRow]) -> Summary {
        let col = |f: &dyn Fn(&TrialRow) -> f64| Stat::of(&rows.iter().map(f).collect::<Vec<_>>());
        let classes = rows.first().map_or(0, |r| r.metrics.per_class_accuracy.len());
        Summary {
            per_class_accuracy: (0..classes)
                .map(|c| col(&|r| r.metrics.per_class_accuracy[c]))
                .collect(),
            overall_accuracy: col(&|r| r.metrics.overall_accuracy),
            outcome_divergence: col(&|r| r.metrics.outcome_divergence),
            localization: col(&|r| r.metrics.localization),
        }
    }

    fn close(&self, other: &Summary, tol: f64) -> bool {
        self.per_class_accuracy.len() == other.per_class_accuracy.len()
            && self
                .per_class_accuracy
                .iter()
                .zip(&other.per_class_accuracy)
                .all(|(a, b)| a.close(b, tol))
            && self.overall_accuracy.close(&other.overall_accuracy, tol)
            && self.outcome_divergence.close(&other.outcome_divergence, tol)
            && self.localization.close(&other.localization, tol)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub arm: Arm,
    pub lambda: f64,
    pub k_samples: usize,
    pub trials: Vec<TrialRow>,
    pub summary: Summary,
}

impl RunRecord {
    pub fn new(arm: Arm, lambda: f64, k_samples: usize, trials: Vec<TrialRow>) -> Self {
        let summary = Summary::of(&trials);
        RunRecord {
            arm,
            lambda,
            k_samples,
            trials,
            summary,
        }
    }

    /// Checks that the summary equals a recomputation from the trial rows.
    pub fn verify(&self) -> Result<()> {
        if !self.summary.close(&Summary::of(&self.trials), 1e-12) {
            return Err(Error::Format(format!(
                "summary of `{}` does not match its trial rows",
                self.arm.name()
            )));
        }
        Ok(())
    }
}

/// Everything written to `record.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordFile {
    pub config: ExperimentConfig,
    pub runs: Vec<RunRecord>,
    pub wall_clock_s: f64,
}

pub const RECORD_FILE: &str = "record.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";

impl RecordFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let r: RecordFile = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })?;
        for run in &r.runs {
            run.verify()?;
        }
        Ok(r)
    }

    pub fn run(&self, arm: Arm) -> Option<&RunRecord> {
        self.runs.iter().find(|r| r.arm == arm)
    }
}

/// The frozen encoder for `cfg`, from the on-disk cache when configured.
pub fn load_encoder(cfg: &ExperimentConfig) -> Result<FrozenEncoder> {
    if let Some(path) = &cfg.encoder_cache {
        if path.exists() {
            return FrozenEncoder::load(&cfg.encoder_name, &cfg.encoder, path);
        }
        let enc = FrozenEncoder::shared(&cfg.encoder_name, &cfg.encoder)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        enc.save(path)?;
        return Ok(enc);
    }
    FrozenEncoder::shared(&cfg.encoder_name, &cfg.encoder)
}

/// Dataset of one trial: loaded from `dataset_path`, or generated with a
/// per-trial seed.
pub fn trial_dataset(cfg: &ExperimentConfig, trial: usize) -> Result<Dataset> {
    match &cfg.dataset_path {
        Some(p) => biasgen::load_dataset(p),
        None => {
            let spec = DatasetSpec {
                seed: seed::derive_seed(cfg.trial_seed(trial), "dataset", 0),
                ..cfg.dataset.clone()
            };
            biasgen::generate(&spec)
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrialAdapters {
    pub image: ProbAdapter,
    pub text: ProbAdapter,
    pub log: AdapterTrainLog,
}

/// Trains the image and text adapters on the train split, scoring on val.
pub fn trial_adapters(
    cfg: &ExperimentConfig,
    encoder: &FrozenEncoder,
    ds: &Dataset,
    trial: usize,
) -> Result<TrialAdapters> {
    let pairs = |split: Split| {
        let v: Vec<_> = ds.split(split).iter().map(|s| (&s.image, &s.prompt)).collect();
        embed_pairs(encoder, &v)
    };
    let (train, heldout) = (pairs(Split::Train)?, pairs(Split::Val)?);
    let a = &cfg.adapter;
    let mut rng = seed::stream(cfg.trial_seed(trial), "adapters", 0);
    let d = encoder.embed_dim();
    let mut image = ProbAdapter::new(d, a.hidden, a.dropout_rate, a.init_alpha, &mut rng)?;
    let mut text = ProbAdapter::new(d, a.hidden, a.dropout_rate, a.init_alpha, &mut rng)?;
    let log = train_adapters(&mut image, &mut text, encoder, &train, &heldout, a, &mut rng)?;
    if cfg.floor_adapter_scale {
        image.floor_scale();
        text.floor_scale();
    }
    Ok(TrialAdapters { image, text, log })
}

/// Reference attention for every training image, for each requested arm.
/// Sampled arms share one set of K maps per image.
pub fn reference_maps(
    cfg: &ExperimentConfig,
    encoder: &FrozenEncoder,
    adapters: Option<&TrialAdapters>,
    samples: &[Sample],
    trial: usize,
    arms: &[Arm],
) -> Result<BTreeMap<Arm, Vec<ReferenceAttention>>> {
    let mut out: BTreeMap<Arm, Vec<ReferenceAttention>> = BTreeMap::new();
    let sampled: Vec<Arm> = arms.iter().copied().filter(|a| a.aggregation().is_some()).collect();
    if arms.contains(&Arm::Deterministic) {
        let refs = samples
            .iter()
            .map(|s| deterministic_reference(encoder, &s.image, &s.prompt))
            .collect::<Result<_>>()?;
        out.insert(Arm::Deterministic, refs);
    }
    if !sampled.is_empty() {
        let ad = adapters.ok_or_else(|| Error::contract("reference_maps", "sampled arms need trained adapters"))?;
        let guidance = Guidance {
            encoder,
            image_adapter: &ad.image,
            text_adapter: &ad.text,
        };
        let base = seed::derive_seed(cfg.trial_seed(trial), "reference", 0);
        for arm in &sampled {
            out.insert(*arm, Vec::with_capacity(samples.len()));
        }
        for (i, s) in samples.iter().enumerate() {
            let mut rng = seed::stream(base, "image", i as u64);
            let maps = guidance.sample_maps(&s.image, &s.prompt, cfg.k_samples, &mut rng)?;
            for arm in &sampled {
                let method = arm.aggregation().expect("sampled arm");
                out.get_mut(arm).expect("inserted").push(aggregate(&maps, method)?);
            }
        }
    }
    Ok(out)
}

/// Trains one classifier. `refs` of `None` means a fully permissive
/// reference (used by the baseline, where `λ = 0` anyway). Returns the
/// per-epoch mean loss breakdowns.
pub fn train_classifier(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    refs: Option<&[ReferenceAttention]>,
    lambda: f64,
    trial: usize,
) -> Result<(ClassifierState, Vec<LossBreakdown>)> {
    let tseed = cfg.trial_seed(trial);
    let c = &cfg.classifier;
    let spec = &ds.spec;
    let mut init = seed::stream(tseed, "classifier-init", 0);
    let mut state = ClassifierState::new(spec.num_classes, spec.height, spec.width, c.channels, &mut init)?;
    let train = ds.split(Split::Train);
    let permissive = Tensor::ones(&[spec.height, spec.width]);
    let ref_of = |i: usize| -> &Tensor {
        match refs {
            Some(r) => &r[i].values,
            None => &permissive,
        }
    };
    if let Some(r) = refs {
        if r.len() != train.len() {
            return Err(Error::contract("train_classifier", "one reference map per training image required"));
        }
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle = seed::stream(tseed, "classifier-order", 0);
    let mut history = Vec::with_capacity(c.epochs);
    for _ in 0..c.epochs {
        order.shuffle(&mut shuffle);
        let (mut cls, mut att, mut n) = (0.0, 0.0, 0.0);
        for chunk in order.chunks(c.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| (&train[i].image, train[i].label, ref_of(i))).collect();
            let l = state.train_step(&batch, lambda, c.lr)?;
            let w = chunk.len() as f64;
            cls += l.cls * w;
            att += l.att * w;
            n += w;
        }
        let (cls, att) = (cls / n, att / n);
        history.push(LossBreakdown {
            cls,
            att,
            total: cls + lambda * att,
            lambda,
        });
    }
    Ok((state, history))
}

/// Test-split metrics. Outcome divergence compares the predicted probability
/// of class 0 between true class 0 and true class 1 samples; it is 0 when
/// either class is absent. Classes absent from the split score accuracy 0.
pub fn evaluate(state: &ClassifierState, samples: &[Sample], bins: usize) -> Result<TrialMetrics> {
    let c = state.num_classes();
    let mut correct = vec![0usize; c];
    let mut count = vec![0usize; c];
    let mut scores: Vec<Vec<f64>> = vec![Vec::new(); 2];
    let mut loc = 0.0;
    for s in samples {
        let (probs, attention) = state.forward_classify(&s.image)?;
        let pred = probs
            .iter()
            .enumerate()
            .fold(0, |best, (k, &p)| if p > probs[best] { k } else { best });
        count[s.label] += 1;
        if pred == s.label {
            correct[s.label] += 1;
        }
        if s.label < 2 {
            scores[s.label].push(probs[0].clamp(0.0, 1.0));
        }
        loc += biasgen::localization_score(&attention, &s.mask)?;
    }
    let n = samples.len().max(1) as f64;
    let divergence = if scores.iter().all(|v| !v.is_empty()) {
        outcome_divergence(&scores[0], &scores[1], bins)?
    } else {
        0.0
    };
    Ok(TrialMetrics {
        per_class_accuracy: correct
            .iter()
            .zip(&count)
            .map(|(&k, &m)| if m == 0 { 0.0 } else { k as f64 / m as f64 })
            .collect(),
        overall_accuracy: correct.iter().sum::<usize>() as f64 / n,
        outcome_divergence: divergence,
        localization: loc / n,
    })
}

fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn digest_hex(s: &str) -> String {
    Sha256::digest(s.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

/// Cache key for the reference maps of one (trial, arm).
fn refs_key(cfg: &ExperimentConfig, encoder: &FrozenEncoder, adapters: Option<&TrialAdapters>, ds: &Dataset, trial: usize, arm: Arm) -> String {
    let ad = match (arm, adapters) {
        (Arm::ParicMean | Arm::ParicMedian, Some(a)) => format!(
            "{}|{}|{}",
            checkpoint::fingerprint(a.image.params()),
            checkpoint::fingerprint(a.text.params()),
            cfg.k_samples
        ),
        _ => String::new(),
    };
    let spec = serde_json::to_string(&ds.spec).expect("spec serialises");
    digest_hex(&format!(
        "{}|{}|{}|{}|{}|{}",
        arm.name(),
        encoder.fingerprint(),
        ad,
        spec,
        cfg.trial_seed(trial),
        ds.train.len()
    ))
}

fn read_cached_refs(dir: &Path, key: &str, n: usize, arm: Arm, k: usize) -> Option<Vec<ReferenceAttention>> {
    let stored = std::fs::read_to_string(dir.join("key.txt")).ok()?;
    if stored.trim() != key {
        return None;
    }
    let method = arm.aggregation().unwrap_or(Aggregation::Mean);
    let k_samples = if arm == Arm::Deterministic { 1 } else { k };
    (0..n)
        .map(|i| {
            Some(ReferenceAttention {
                values: mapio::read_pmap(&dir.join(format!("{i:05}_ref.pmap"))).ok()?,
                uncertainty: mapio::read_pmap(&dir.join(format!("{i:05}_unc.pmap"))).ok()?,
                method,
                k_samples,
            })
        })
        .collect()
}

fn write_cached_refs(dir: &Path, key: &str, refs: &[ReferenceAttention]) -> Result<()> {
    ensure_dir(dir)?;
    for (i, r) in refs.iter().enumerate() {
        mapio::write_pmap(&dir.join(format!("{i:05}_ref.pmap")), &r.values)?;
        mapio::write_pmap(&dir.join(format!("{i:05}_unc.pmap")), &r.uncertainty)?;
    }
    let p = dir.join("key.txt");
    std::fs::write(&p, key).map_err(|e| Error::io(&p, e))
}

/// Reference maps for the arms, reusing `<out>/refs/t<trial>/<arm>` when its
/// key matches and refreshing it otherwise.
pub fn cached_reference_maps(
    cfg: &ExperimentConfig,
    encoder: &FrozenEncoder,
    adapters: Option<&TrialAdapters>,
    ds: &Dataset,
    trial: usize,
    arms: &[Arm],
    out: Option<&Path>,
) -> Result<BTreeMap<Arm, Vec<ReferenceAttention>>> {
    let guided: Vec<Arm> = arms.iter().copied().filter(|a| *a != Arm::Baseline).collect();
    let Some(out) = out else {
        return reference_maps(cfg, encoder, adapters, &ds.train, trial, &guided);
    };
    let mut found = BTreeMap::new();
    let mut missing = Vec::new();
    for &arm in &guided {
        let dir = out.join("refs").join(format!("t{trial}")).join(arm.name());
        let key = refs_key(cfg, encoder, adapters, ds, trial, arm);
        match read_cached_refs(&dir, &key, ds.train.len(), arm, cfg.k_samples) {
            Some(r) => {
                found.insert(arm, r);
            }
            None => missing.push((arm, dir, key)),
        }
    }
    if !missing.is_empty() {
        let arms: Vec<Arm> = missing.iter().map(|(a, _, _)| *a).collect();
        let fresh = reference_maps(cfg, encoder, adapters, &ds.train, trial, &arms)?;
        for (arm, dir, key) in missing {
            write_cached_refs(&dir, &key, &fresh[&arm])?;
        }
        found.extend(fresh);
    }
    Ok(found)
}

fn write_loss_csv(path: &Path, history: &[LossBreakdown]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["epoch", "cls", "att", "total", "lambda"]).map_err(io)?;
    for (e, l) in history.iter().enumerate() {
        w.write_record([e.to_string(), l.cls.to_string(), l.att.to_string(), l.total.to_string(), l.lambda.to_string()])
            .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn classifier_checkpoint(out: &Path, arm: Arm, trial: usize) -> PathBuf {
    out.join("checkpoints").join(format!("classifier_{}_t{trial}.paric", arm.name()))
}

/// Runs every trial for each arm. With `out`, checkpoints, loss curves and
/// cached reference maps are written beneath it.
pub fn run_arms(cfg: &ExperimentConfig, arms: &[Arm], out: Option<&Path>, progress: Progress) -> Result<RecordFile> {
    cfg.validate()?;
    if arms.is_empty() {
        return Err(Error::contract("run_arms", "no arms requested"));
    }
    let started = Instant::now();
    let encoder = load_encoder(cfg)?;
    let frozen = encoder.fingerprint();
    if let Some(out) = out {
        ensure_dir(&out.join("checkpoints"))?;
        ensure_dir(&out.join("losses"))?;
        encoder.save(&out.join("checkpoints").join("encoder.paric"))?;
    }
    let mut rows: BTreeMap<Arm, Vec<TrialRow>> = BTreeMap::new();
    for trial in 0..cfg.trials {
        let t0 = Instant::now();
        let ds = trial_dataset(cfg, trial)?;
        let needs_adapters = arms.iter().any(|a| a.aggregation().is_some());
        let adapters = if needs_adapters {
            let a = trial_adapters(cfg, &encoder, &ds, trial)?;
            progress.note(format!(
                "trial {trial}: adapters held-out loss {:.4} -> {:.4}",
                a.log.initial_heldout,
                a.log.final_heldout()
            ));
            if let Some(out) = out {
                let dir = out.join("checkpoints");
                checkpoint::save(&dir.join(format!("adapter_image_t{trial}.paric")), a.image.params())?;
                checkpoint::save(&dir.join(format!("adapter_text_t{trial}.paric")), a.text.params())?;
            }
            Some(a)
        } else {
            None
        };
        let refs = cached_reference_maps(cfg, &encoder, adapters.as_ref(), &ds, trial, arms, out)?;
        let setup_s = t0.elapsed().as_secs_f64();
        for &arm in arms {
            let ta = Instant::now();
            let lambda = arm.lambda(cfg);
            let r = refs.get(&arm).map(Vec::as_slice);
            let (state, history) = train_classifier(cfg, &ds, r, lambda, trial)?;
            let metrics = evaluate(&state, ds.split(Split::Test), cfg.bins)?;
            if let Some(out) = out {
                state.save(&classifier_checkpoint(out, arm, trial))?;
                write_loss_csv(&out.join("losses").join(format!("{}_t{trial}.csv", arm.name())), &history)?;
            }
            progress.note(format!(
                "trial {trial} {:>13}: accuracy {:.4} localization {:.4}",
                arm.name(),
                metrics.overall_accuracy,
                metrics.localization
            ));
            rows.entry(arm).or_default().push(TrialRow {
                trial,
                seed: cfg.trial_seed(trial),
                metrics,
                final_loss: *history.last().expect("at least one epoch"),
                adapter_heldout: adapters
                    .as_ref()
                    .filter(|_| arm.aggregation().is_some())
                    .map(|a| [a.log.initial_heldout, a.log.final_heldout()]),
                wall_clock_s: setup_s + ta.elapsed().as_secs_f64(),
            });
        }
    }
    if encoder.fingerprint() != frozen {
        return Err(Error::Numeric("frozen encoder weights changed during the run".into()));
    }
    let runs = arms
        .iter()
        .map(|&arm| {
            let k = match arm {
                Arm::Baseline => 0,
                Arm::Deterministic => 1,
                _ => cfg.k_samples,
            };
            RunRecord::new(arm, arm.lambda(cfg), k, rows.remove(&arm).unwrap_or_default())
        })
        .collect();
    Ok(RecordFile {
        config: cfg.clone(),
        runs,
        wall_clock_s: started.elapsed().as_secs_f64(),
    })
}

/// Trains and evaluates the sampled-reference arm selected by `cfg.method`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let mut r = run_arms(cfg, &[Arm::sampled(cfg.method)], None, Progress { quiet: true })?;
    Ok(r.runs.remove(0))
}

/// All four arms on the same trials.
pub fn compare(cfg: &ExperimentConfig, out: Option<&Path>, progress: Progress) -> Result<RecordFile> {
    run_arms(cfg, &Arm::ALL, out, progress)
}

/// `metrics.csv`: one row per arm with per-class and overall accuracy,
/// outcome divergence and localization as across-trial mean and std.
/// Wall-clock times are deliberately excluded so the file is reproducible.
pub fn metrics_csv(record: &RecordFile) -> Result<String> {
    let classes = record.runs.first().map_or(0, |r| r.summary.per_class_accuracy.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string(), "lambda".into(), "k_samples".into(), "trials".into()];
    for c in 0..classes {
        header.push(format!("acc_class{c}_mean"));
        header.push(format!("acc_class{c}_std"));
    }
    for m in ["overall", "divergence", "localization"] {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_std"));
    }
    let err = |e: csv::Error| Error::Format(format!("csv: {e}"));
    w.write_record(&header).map_err(err)?;
    for r in &record.runs {
        let s = &r.summary;
        let mut row = vec![r.arm.name().to_string(), r.lambda.to_string(), r.k_samples.to_string(), r.trials.len().to_string()];
        for st in &s.per_class_accuracy {
            row.push(st.mean.to_string());
            row.push(st.std.to_string());
        }
        for st in [&s.overall_accuracy, &s.outcome_divergence, &s.localization] {
            row.push(st.mean.to_string());
            row.push(st.std.to_string());
        }
        w.write_record(&row).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Writes `metrics.csv`, `record.json` and `config.json` under `out`.
pub fn write_outputs(out: &Path, record: &RecordFile) -> Result<()> {
    ensure_dir(out)?;
    let p = out.join(METRICS_FILE);
    std::fs::write(&p, metrics_csv(record)?).map_err(|e| Error::io(&p, e))?;
    let p = out.join(RECORD_FILE);
    let json = serde_json::to_string_pretty(record).map_err(|e| Error::Json { path: p.clone(), source: e })?;
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
    let p = out.join(CONFIG_FILE);
    let json = serde_json::to_string_pretty(&record.config).map_err(|e| Error::Json { path: p.clone(), source: e })?;
    std::fs::write(&p, json).map_err(|e| Error::io(&p, e))
}

/// Re-evaluates every saved classifier of a run directory and checks the
/// metrics against `record.json`. Returns the re-evaluated record.
pub fn reevaluate(run_dir: &Path) -> Result<RecordFile> {
    let record = RecordFile::load(&run_dir.join(RECORD_FILE))?;
    let cfg = &record.config;
    let mut runs = Vec::new();
    let mut datasets = BTreeMap::new();
    for run in &record.runs {
        let mut rows = Vec::new();
        for row in &run.trials {
            if !datasets.contains_key(&row.trial) {
                datasets.insert(row.trial, trial_dataset(cfg, row.trial)?);
            }
            let ds = &datasets[&row.trial];
            let mut state = ClassifierState::new(ds.spec.num_classes, ds.spec.height, ds.spec.width, cfg.classifier.channels, &mut seed::stream(0, "eval", 0))?;
            state.load_weights(&classifier_checkpoint(run_dir, run.arm, row.trial))?;
            let metrics = evaluate(&state, ds.split(Split::Test), cfg.bins)?;
            let same = metrics.per_class_accuracy == row.metrics.per_class_accuracy
                && metrics.overall_accuracy == row.metrics.overall_accuracy
                && (metrics.outcome_divergence - row.metrics.outcome_divergence).abs() <= 1e-12
                && (metrics.localization - row.metrics.localization).abs() <= 1e-12;
            if !same {
                return Err(Error::Format(format!(
                    "re-evaluated metrics of `{}` trial {} differ from the record",
                    run.arm.name(),
                    row.trial
                )));
            }
            rows.push(TrialRow { metrics, ..row.clone() });
        }
        runs.push(RunRecord::new(run.arm, run.lambda, run.k_samples, rows));
    }
    Ok(RecordFile { runs, ..record })
}
