//! Command-line front end: `datagen`, `tokenize`, `train`, `infer`, `eval`,
//! `gradcheck`.
//!
//! Config files are JSON; flags override file values and the resolved config
//! is written to `run_manifest.json` in the output directory. Exit codes: 0
//! success, 1 usage or validation error, 2 runtime error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    read_features, read_phonemes, write_features, write_units, Corpus, VideoFeatureSequence,
};
use crate::error::{Error, Result};
use crate::eval;
use crate::inference::{self, ExternalVocoder, OracleMode, OracleVocoder, Vocoder, VocoderOutput};
use crate::matrix::Matrix;
use crate::model::ModelConfig;
use crate::seed;
use crate::synthdata::{self, SynthSpec};
use crate::tokenizer::{self, Codebook};
use crate::training::{self, Checkpoint, GradCheckOptions, TrainConfig, Trainer};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "avo",
    version,
    about = "Video-aligned speech unit prediction toolkit"
)]
pub struct Cli {
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus.
    Datagen(DatagenArgs),
    /// Fit a k-means codebook or encode features into units.
    Tokenize(TokenizeArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Predict units (and optionally audio) for one utterance.
    Infer(InferArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct DatagenArgs {
    /// JSON synthesis spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    num_utts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    corruption: Option<f64>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("action").required(true).args(["fit", "encode"])))]
struct TokenizeArgs {
    /// Fit a codebook; writes a codebook directory to --out.
    #[arg(long)]
    fit: bool,
    /// Encode a feature file with --codebook; writes a units file to --out.
    #[arg(long)]
    encode: bool,
    /// DSUF feature file.
    #[arg(long, conflicts_with = "corpus")]
    features: Option<PathBuf>,
    /// Corpus directory whose video frames are pooled for fitting.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Codebook size (default: the corpus K when fitting on a corpus).
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = crate::datamodel::DEFAULT_UNIT_RATE_HZ)]
    unit_rate: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in --out.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    diag_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    phonemes: PathBuf,
    #[arg(long)]
    video: PathBuf,
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = crate::datamodel::DEFAULT_FRAME_RATE_HZ)]
    frame_rate: f64,
    #[arg(long)]
    out: PathBuf,
    /// `oracle-sine`, `oracle-features` or `external:<command>`.
    #[arg(long)]
    vocoder: Option<String>,
    /// Codebook directory for the oracle vocoders.
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    wav: Option<PathBuf>,
    /// Write the oracle-features output here (DSUF).
    #[arg(long)]
    features_out: Option<PathBuf>,
    /// Write the aligner attention matrix here (DSUF).
    #[arg(long)]
    attention: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Codebook for centroid-space frame disturbance.
    #[arg(long)]
    codebook: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// JSON check options.
    #[arg(long)]
    config: Option<PathBuf>,
    /// JSON model config (default: the tiny check model).
    #[arg(long)]
    model_config: Option<PathBuf>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<PathBuf>,
    pub version: String,
    pub started_at: String,
    pub finished_at: String,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

struct Run {
    command: &'static str,
    argv: Vec<String>,
    started_at: String,
}

impl Run {
    fn finish(
        &self,
        dir: &Path,
        config: &impl Serialize,
        seeds: &[(&str, u64)],
        artifacts: Vec<PathBuf>,
    ) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_MANIFEST_FILE);
        let manifest = RunManifest {
            command: self.command.to_string(),
            argv: self.argv.clone(),
            config: serde_json::to_value(config).map_err(|e| Error::json(&path, e))?,
            seeds: seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            artifacts,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started_at: self.started_at.clone(),
            finished_at: now(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

/// Parses a JSON config; malformed or unknown fields are validation errors.
/// The second value reports whether the file set `seed` explicitly.
fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, bool)> {
    let Some(path) = path else {
        return Ok((T::default(), false));
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    let has_seed = value.get("seed").is_some();
    let cfg = serde_json::from_value(value)
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))?;
    Ok((cfg, has_seed))
}

/// Flag, then config file, then `AVO_SEED`, then the config default.
fn resolve_seed(flag: Option<u64>, from_file: bool, file_value: u64) -> u64 {
    flag.or(from_file.then_some(file_value))
        .or_else(seed::from_env)
        .unwrap_or(file_value)
}

fn ensure_parent(path: &Path) -> Result<()> {
    let dir = parent_dir(path);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))
}

fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn datagen(run: &Run, a: DatagenArgs) -> Result<()> {
    let (mut spec, has_seed): (SynthSpec, bool) = load_config(a.spec.as_deref())?;
    spec.seed = resolve_seed(a.seed, has_seed, spec.seed);
    if let Some(v) = a.num_utts {
        spec.num_utts = v;
    }
    if let Some(v) = a.noise {
        spec.feature_noise_std = v;
    }
    if let Some(v) = a.corruption {
        spec.unit_corruption_prob = v;
    }
    if let Some(v) = a.test_fraction {
        spec.test_fraction = v;
    }
    let corpus = synthdata::write_corpus(&spec, &a.out)?;
    log::info!("wrote {} utterances to {}", corpus.len(), a.out.display());
    run.finish(&a.out, &spec, &[("corpus", spec.seed)], vec![a.out.clone()])
}

fn pooled_frames(corpus: &Corpus) -> Result<Matrix<f32>> {
    let dim = corpus.metadata.video_dim;
    let mut data = Vec::new();
    for u in &corpus.utterances {
        data.extend_from_slice(u.video.frames().as_slice());
    }
    Matrix::from_vec(data.len() / dim.max(1), dim, data)
}

#[derive(Serialize)]
struct TokenizeConfig {
    action: &'static str,
    k: Option<usize>,
    seed: u64,
    unit_rate_hz: f64,
}

fn tokenize(run: &Run, a: TokenizeArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, false, 0);
    if a.fit {
        let (features, default_k) = match (&a.features, &a.corpus) {
            (Some(f), None) => (read_features(f)?, None),
            (None, Some(dir)) => {
                let corpus = Corpus::load(dir)?;
                (pooled_frames(&corpus)?, Some(corpus.metadata.num_units))
            }
            _ => return Err(Error::validation("--fit needs --features or --corpus")),
        };
        let k =
            a.k.or(default_k)
                .ok_or_else(|| Error::validation("--fit on a feature file needs --k"))?;
        let (codebook, report) = tokenizer::fit_kmeans_with(
            &features,
            k,
            seed,
            tokenizer::DEFAULT_MAX_ITERS,
            tokenizer::DEFAULT_TOL,
        )?;
        codebook.save(&a.out)?;
        log::info!(
            "fitted K={k} on {} frames in {} iterations (distortion {:.6})",
            features.rows(),
            report.iterations,
            report.distortions.last().copied().unwrap_or(f64::NAN)
        );
        let cfg = TokenizeConfig {
            action: "fit",
            k: Some(k),
            seed,
            unit_rate_hz: a.unit_rate,
        };
        run.finish(&a.out, &cfg, &[("kmeans", seed)], vec![a.out.clone()])
    } else {
        let cb_dir = a
            .codebook
            .as_ref()
            .ok_or_else(|| Error::validation("--encode needs --codebook"))?;
        let features_path = a
            .features
            .as_ref()
            .ok_or_else(|| Error::validation("--encode needs --features"))?;
        let codebook = Codebook::load(cb_dir)?;
        let units = codebook.encode_units(&read_features(features_path)?, a.unit_rate)?;
        ensure_parent(&a.out)?;
        write_units(&units, &a.out)?;
        let cfg = TokenizeConfig {
            action: "encode",
            k: Some(codebook.k()),
            seed: codebook.seed(),
            unit_rate_hz: a.unit_rate,
        };
        run.finish(
            &parent_dir(&a.out),
            &cfg,
            &[("kmeans", codebook.seed())],
            vec![a.out.clone()],
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrainConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn train(run: &Run, a: TrainArgs) -> Result<()> {
    let corpus = Corpus::load(&a.corpus)?;
    let (mut model, _): (ModelConfig, bool) = load_config(a.model_config.as_deref())?;
    let (mut tc, has_seed): (TrainConfig, bool) = load_config(a.train_config.as_deref())?;
    // Data-dependent sizes always come from the corpus.
    model.vocab_size = corpus.metadata.vocab_size;
    model.num_units = corpus.metadata.num_units;
    model.video_dim = corpus.metadata.video_dim;
    model.validate()?;
    tc.seed = resolve_seed(a.seed, has_seed, tc.seed);
    if let Some(v) = a.max_steps {
        tc.max_steps = v;
    }
    if let Some(v) = a.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        tc.learning_rate = v;
    }
    if let Some(v) = a.diag_weight {
        tc.diag_weight = v;
    }
    tc.validate()?;
    let mut trainer = if a.resume {
        let ckpt = Checkpoint::load(&a.out)?;
        if ckpt.params.config() != &model {
            return Err(Error::validation(
                "checkpoint model config differs from the resolved config",
            ));
        }
        Trainer::resume(&corpus, ckpt, &tc)?
    } else {
        Trainer::new(&corpus, &model, &tc)?
    };
    let outcome = trainer.run(Some(&a.out))?;
    if let Some(last) = outcome.history.last() {
        log::info!(
            "finished at step {} (held-out acc {:.4}, diag {:.4})",
            last.step,
            last.acc,
            last.diag_score
        );
    }
    let resolved = ResolvedTrainConfig {
        model,
        train: tc.clone(),
    };
    run.finish(
        &a.out,
        &resolved,
        &[("train", tc.seed), ("corpus", corpus.metadata.seed)],
        vec![
            a.out.join(training::MANIFEST_FILE),
            a.out.join(training::METRICS_FILE),
        ],
    )
}

#[derive(Serialize)]
struct InferConfig<'a> {
    ckpt: &'a Path,
    n: usize,
    frame_rate_hz: f64,
    vocoder: Option<&'a str>,
}

fn oracle(a: &InferArgs, k: usize, mode: OracleMode) -> Result<OracleVocoder> {
    let dir = a
        .codebook
        .as_ref()
        .ok_or_else(|| Error::validation("oracle vocoders need --codebook"))?;
    let codebook = Codebook::load(dir)?;
    if codebook.k() != k {
        return Err(Error::validation(format!(
            "codebook has K={} but the model predicts K={k}",
            codebook.k()
        )));
    }
    Ok(OracleVocoder::new(codebook, mode))
}

fn infer(run: &Run, a: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let cfg = ckpt.params.config().clone();
    let phonemes = read_phonemes(&a.phonemes, cfg.vocab_size)?;
    let video = VideoFeatureSequence::new(read_features(&a.video)?, a.frame_rate)?;
    let (units, trace) = inference::infer_units(&ckpt.params, &phonemes, &video, a.n)?;
    for p in [
        Some(&a.out),
        a.attention.as_ref(),
        a.wav.as_ref(),
        a.features_out.as_ref(),
    ]
    .into_iter()
    .flatten()
    {
        ensure_parent(p)?;
    }
    write_units(&units, &a.out)?;
    let mut artifacts = vec![a.out.clone()];
    if let Some(p) = &a.attention {
        write_features(&trace.attention, p)?;
        artifacts.push(p.clone());
    }
    if let Some(spec) = a.vocoder.as_deref() {
        let vocoder: Box<dyn Vocoder> = match spec {
            "oracle-sine" => Box::new(oracle(&a, cfg.num_units, OracleMode::Sine)?),
            "oracle-features" => Box::new(oracle(&a, cfg.num_units, OracleMode::Features)?),
            s if s.starts_with("external:") => {
                Box::new(ExternalVocoder::new(&s["external:".len()..]))
            }
            other => return Err(Error::validation(format!("unknown vocoder {other:?}"))),
        };
        match vocoder.synthesize(&units)? {
            VocoderOutput::Waveform {
                samples,
                sample_rate_hz,
            } => {
                let wav = a
                    .wav
                    .as_ref()
                    .ok_or_else(|| Error::validation("waveform vocoders need --wav"))?;
                inference::write_wav(&samples, sample_rate_hz, wav)?;
                artifacts.push(wav.clone());
            }
            VocoderOutput::Features(f) => {
                let path = a
                    .features_out
                    .as_ref()
                    .ok_or_else(|| Error::validation("oracle-features needs --features-out"))?;
                write_features(&f, path)?;
                artifacts.push(path.clone());
            }
        }
    } else if a.wav.is_some() {
        return Err(Error::validation("--wav needs --vocoder"));
    }
    let config = InferConfig {
        ckpt: &a.ckpt,
        n: a.n,
        frame_rate_hz: a.frame_rate,
        vocoder: a.vocoder.as_deref(),
    };
    run.finish(
        &parent_dir(&a.out),
        &config,
        &[("train", ckpt.manifest.seed)],
        artifacts,
    )
}

#[derive(Serialize)]
struct EvalConfig<'a> {
    ckpt: &'a Path,
    corpus: &'a Path,
    split: &'a str,
    codebook: Option<&'a Path>,
}

fn evaluate(run: &Run, a: EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let corpus = Corpus::load(&a.corpus)?;
    let codebook = a.codebook.as_ref().map(Codebook::load).transpose()?;
    let report = eval::evaluate(&ckpt.params, &corpus, &a.split, codebook.as_ref())?;
    ensure_parent(&a.out)?;
    report.save(&a.out)?;
    let agg = &report.aggregate;
    log::info!(
        "{} utterances: acc {:.4}, FD {:.4}, diagonality {:.4}",
        agg.utterances,
        agg.unit_accuracy,
        agg.frame_disturbance,
        agg.diagonality_score
    );
    let config = EvalConfig {
        ckpt: &a.ckpt,
        corpus: &a.corpus,
        split: &a.split,
        codebook: a.codebook.as_deref(),
    };
    run.finish(
        &parent_dir(&a.out),
        &config,
        &[
            ("train", ckpt.manifest.seed),
            ("corpus", corpus.metadata.seed),
        ],
        vec![a.out.clone()],
    )
}

/// Returns whether the check passed.
fn gradcheck(run: &Run, a: GradcheckArgs) -> Result<bool> {
    let (mut opts, has_seed): (GradCheckOptions, bool) = load_config(a.config.as_deref())?;
    opts.seed = resolve_seed(a.seed, has_seed, opts.seed);
    if let Some(v) = a.tolerance {
        opts.tolerance = v;
    }
    if let Some(v) = a.epsilon {
        opts.epsilon = v;
    }
    let model = match a.model_config.as_deref() {
        Some(p) => load_config::<ModelConfig>(Some(p))?.0,
        None => training::grad_check_config(),
    };
    model.validate()?;
    let report = training::grad_check(&model, &opts)?;
    for t in &report.tensors {
        log::info!(
            "{:<40} max rel {:.3e} ({} entries)",
            t.name,
            t.max_rel_error,
            t.checked
        );
    }
    println!(
        "gradcheck {}: max relative error {:.3e} (tolerance {:.0e})",
        if report.passed { "passed" } else { "FAILED" },
        report.max_rel_error,
        report.tolerance
    );
    if !report.passed {
        eprintln!("failing tensors: {}", report.failures().join(", "));
    }
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::json(out, e))?;
        fs::write(out, json + "\n").map_err(|e| Error::io(out, e))?;
        #[derive(Serialize)]
        struct Resolved<'a> {
            model: &'a ModelConfig,
            options: &'a GradCheckOptions,
        }
        run.finish(
            &parent_dir(out),
            &Resolved {
                model: &model,
                options: &opts,
            },
            &[("gradcheck", opts.seed)],
            vec![out.clone()],
        )?;
    }
    Ok(report.passed)
}

fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        1
    } else {
        2
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            log::warn!("could not configure thread pool: {e}");
        }
    }
    let name = match &cli.command {
        Command::Datagen(_) => "datagen",
        Command::Tokenize(_) => "tokenize",
        Command::Train(_) => "train",
        Command::Infer(_) => "infer",
        Command::Eval(_) => "eval",
        Command::Gradcheck(_) => "gradcheck",
    };
    let run = Run {
        command: name,
        argv: argv.clone(),
        started_at: now(),
    };
    let result = match cli.command {
        Command::Datagen(a) => datagen(&run, a).map(|_| true),
        Command::Tokenize(a) => tokenize(&run, a).map(|_| true),
        Command::Train(a) => train(&run, a).map(|_| true),
        Command::Infer(a) => infer(&run, a).map(|_| true),
        Command::Eval(a) => evaluate(&run, a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(&run, a),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 2,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_train_config_round_trips() {
        let cfg = ResolvedTrainConfig {
            model: ModelConfig::default(),
            train: TrainConfig {
                target_accuracy: Some(0.99),
                ..TrainConfig::default()
            },
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(
            serde_json::from_str::<ResolvedTrainConfig>(&text).unwrap(),
            cfg
        );
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(5), true, 7), 5);
        assert_eq!(resolve_seed(None, true, 7), 7);
    }

    #[test]
    fn unknown_config_fields_are_validation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.json");
        fs::write(&p, r#"{"learning_rate": 0.01, "bogus": 1}"#).unwrap();
        let err = load_config::<TrainConfig>(Some(&p)).unwrap_err();
        assert!(err.is_validation());
        fs::write(&p, r#"{"learning_rate": 0.01, "seed": 4}"#).unwrap();
        let (cfg, has_seed) = load_config::<TrainConfig>(Some(&p)).unwrap();
        assert_eq!((cfg.learning_rate, cfg.seed, has_seed), (0.01, 4, true));
    }
}
