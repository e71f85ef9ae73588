use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use avsr_core::adaptation::{early_fuse, AdaptScheme};
use avsr_core::autograd::{Graph, ParameterStore};
use avsr_core::checkpoint::load_model;
use avsr_core::corpus::{gen_corpus, SynthConfig};
use avsr_core::evaluation::{char_perplexity, evaluate, score, write_reports};
use avsr_core::features::{compute_logmel, load_visual, stack_and_oversample, Waveform};
use avsr_core::manifest::{load_utterances, parse_manifest};
use avsr_core::model::Arch;
use avsr_core::s2s::{BeamOptions, EncoderConfig, PyramidEncoder};
use avsr_core::training::{train, Precision, TrainConfig};
use avsr_core::verify::{ctc_oracle, gradient_suite};
use avsr_core::vocab::Vocabulary;
use avsr_core::Error;

#[derive(Parser, Debug)]
#[command(
    name = "avsr",
    version,
    about = "Audio-visual end-to-end speech recognition toolkit"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Model architecture.
    #[arg(long, global = true)]
    arch: Option<String>,
    /// Visual adaptation scheme: none, vat or early.
    #[arg(long, global = true)]
    adapt: Option<String>,
    /// Beam width for attention decoding.
    #[arg(long, global = true)]
    beam: Option<usize>,
    /// Rank finished hypotheses by length-normalized score.
    #[arg(long, global = true)]
    length_norm: bool,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Flat key=value settings file; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parameter precision: 32 or 64.
    #[arg(long, global = true)]
    precision: Option<String>,
    /// Extra key=value setting, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic audio-visual corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute features from a WAV file and report shapes at each stage.
    Features {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Stage::Fused)]
        stage: Stage,
        /// Visual vector file, required for the fused stage.
        #[arg(long)]
        visual: Option<PathBuf>,
        /// Run an untrained pyramid encoder with this many layers over the stacked features.
        #[arg(long, default_value_t = 0)]
        pyramid_layers: usize,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a manifest with a trained model.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Hypothesis file (`id<TAB>transcript`); stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model or a hypothesis file against a manifest.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, conflicts_with = "hyps", required_unless_present = "hyps")]
        model: Option<PathBuf>,
        #[arg(long)]
        hyps: Option<PathBuf>,
        /// Directory for eval.csv, lengths.csv and hist.csv.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        bucket_width: usize,
    },
    /// Finite-difference gradient checks of every component.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Check CTC against brute-force path enumeration.
    CtcOracle {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Stage {
    Mel,
    Stacked,
    Fused,
}

/// Failure with its process exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.chain().find_map(|e| e.downcast_ref::<Error>()) {
            Some(Error::Config(_)) => 1,
            Some(e) if e.is_data_error() => 2,
            Some(_) => 3,
            None if error.downcast_ref::<std::io::Error>().is_some() => 2,
            None => 1,
        };
        Self { code, error }
    }
}

fn numeric_failure(msg: String) -> Failure {
    Failure {
        code: 3,
        error: anyhow!(msg),
    }
}

fn split_setting(s: &str) -> anyhow::Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| anyhow!(Error::Config(format!("expected KEY=VALUE, got `{s}`"))))
}

impl Common {
    /// Config file lines then `--set` values, in order.
    fn settings(&self) -> anyhow::Result<Vec<(String, String)>> {
        let mut out = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for line in text.lines() {
                let line = line.split('#').next().unwrap_or("").trim();
                if !line.is_empty() {
                    let (k, v) = split_setting(line)?;
                    out.push((k.to_string(), v.to_string()));
                }
            }
        }
        for s in &self.set {
            let (k, v) = split_setting(s)?;
            out.push((k.to_string(), v.to_string()));
        }
        Ok(out)
    }

    fn beam_options(&self) -> BeamOptions {
        let mut opts = BeamOptions::default();
        if let Some(b) = self.beam {
            opts.beam = b;
        }
        opts.length_norm = self.length_norm;
        opts
    }

    fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        // arch and adapt first: they choose the defaults other keys refine
        let arch: Arch = match &self.arch {
            Some(a) => a.parse()?,
            None => Arch::Ctc,
        };
        let adapt: AdaptScheme = match &self.adapt {
            Some(a) => a.parse()?,
            None => AdaptScheme::None,
        };
        let settings = self.settings()?;
        let lookup = |key: &str| {
            settings
                .iter()
                .rev()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
        };
        let arch = match (&self.arch, lookup("arch")) {
            (None, Some(v)) => v.parse()?,
            _ => arch,
        };
        let adapt = match (&self.adapt, lookup("adapt")) {
            (None, Some(v)) => v.parse()?,
            _ => adapt,
        };
        cfg.model = avsr_core::model::ModelConfig::full(arch, adapt);
        for (k, v) in &settings {
            if k != "arch" && k != "adapt" {
                cfg.set(k, v)?;
            }
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(p) = &self.precision {
            cfg.precision = p.parse::<Precision>()?;
        }
        if let Some(b) = self.beam {
            cfg.beam.beam = b;
        }
        if self.length_norm {
            cfg.beam.length_norm = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn synth_config(&self) -> anyhow::Result<SynthConfig> {
        let mut cfg = SynthConfig::default();
        for (k, v) in self.settings()? {
            cfg.set(&k, &v)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn read_wav(path: &Path) -> anyhow::Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| {
        anyhow!(Error::Validation(format!(
            "cannot read {}: {e}",
            path.display()
        )))
    })?;
    let spec = reader.spec();
    let channels = usize::from(spec.channels.max(1));
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>(),
        hound::SampleFormat::Int => {
            let full = f64::from(1u32 << (spec.bits_per_sample - 1));
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| f64::from(v) / full))
                .collect::<Result<_, _>>()
        }
    }
    .map_err(|e| anyhow!(Error::Validation(format!("{}: {e}", path.display()))))?;
    // down-mix to mono
    let samples = interleaved
        .chunks(channels)
        .map(|c| c.iter().sum::<f64>() / channels as f64)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: spec.sample_rate,
    })
}

fn cmd_features(
    common: &Common,
    wav: &Path,
    out: Option<&Path>,
    stage: Stage,
    visual: Option<&Path>,
    pyramid_layers: usize,
) -> anyhow::Result<()> {
    let wave = read_wav(wav)?;
    let mel = compute_logmel(&wave)?;
    println!("mel: {} x {}", mel.n_frames(), mel.dim());
    let mut result = mel.clone();
    if stage != Stage::Mel {
        let copies = stack_and_oversample(&mel)?;
        for (k, c) in copies.iter().enumerate() {
            println!("stacked copy {k}: {} x {}", c.n_frames(), c.dim());
        }
        result = copies[0].clone();
        if stage == Stage::Fused {
            let path = visual
                .ok_or_else(|| anyhow!(Error::Validation("--stage fused needs --visual".into())))?;
            let v = load_visual(path)?;
            result = early_fuse(&result, &v)?;
            println!("fused: {} x {}", result.n_frames(), result.dim());
        }
    }
    if pyramid_layers > 0 {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(common.seed.unwrap_or(0));
        let enc = PyramidEncoder::new(
            &mut store,
            &mut rng,
            "encoder",
            EncoderConfig {
                input_dim: result.dim(),
                layers: pyramid_layers,
                hidden_dim: 8,
            },
        )?;
        let mut g = Graph::new();
        let x = g.leaf(result.to_tensor()?);
        for (i, h) in enc
            .encode_layers(&mut g, &store, x)?
            .into_iter()
            .enumerate()
        {
            let (rows, cols) = g.shape(h);
            println!("pyramid layer {}: {rows} x {cols}", i + 1);
        }
    }
    if let Some(out) = out {
        result.write(out)?;
        info!("wrote {}", out.display());
    }
    Ok(())
}

fn read_hyps(path: &Path) -> anyhow::Result<HashMap<String, Vec<usize>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| anyhow!(Error::Validation(format!("{}: {e}", path.display()))))?;
    let vocab = Vocabulary::standard();
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, hyp) = line.split_once('\t').unwrap_or((line, ""));
        let tokens = vocab.encode(hyp).map_err(|ch| {
            anyhow!(Error::UnknownCharacter {
                id: id.to_string(),
                ch,
                line: i + 1,
            })
        })?;
        out.insert(id.to_string(), tokens);
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let common = &cli.common;
    match &cli.command {
        Command::Synth { out } => {
            let cfg = common.synth_config()?;
            let (corpus, files) = gen_corpus(&cfg, out).map_err(anyhow::Error::from)?;
            let penalty = corpus.evaluation_penalty();
            println!(
                "wrote {} train / {} test utterances to {}",
                corpus.train.len(),
                corpus.test.len(),
                out.display()
            );
            println!("chance penalty: {:.6}", penalty.rate());
            info!("stats in {}", files.stats.display());
        }
        Command::Features {
            wav,
            out,
            stage,
            visual,
            pyramid_layers,
        } => cmd_features(
            common,
            wav,
            out.as_deref(),
            *stage,
            visual.as_deref(),
            *pyramid_layers,
        )?,
        Command::Train {
            train: tr,
            dev,
            out,
        } => {
            let cfg = common.train_config()?;
            let adapt = cfg.adapt();
            let train_set =
                load_utterances(&parse_manifest(tr).map_err(anyhow::Error::from)?, adapt)
                    .map_err(anyhow::Error::from)?;
            let dev_set = match dev {
                Some(p) => load_utterances(&parse_manifest(p).map_err(anyhow::Error::from)?, adapt)
                    .map_err(anyhow::Error::from)?,
                None => Vec::new(),
            };
            let outcome =
                train(&train_set, &dev_set, &cfg, Some(out)).map_err(anyhow::Error::from)?;
            for m in &outcome.metrics {
                let dev = m
                    .dev_ter
                    .map_or_else(String::new, |t| format!(" dev_ter={t:.4}"));
                println!(
                    "epoch {} lr={:.5} train_loss={:.4}{dev}",
                    m.epoch, m.lr, m.train_loss
                );
            }
            println!("best epoch {}", outcome.best_epoch);
        }
        Command::Decode {
            model,
            manifest,
            out,
        } => {
            let (model, _) = load_model(model).map_err(anyhow::Error::from)?;
            let utts = load_utterances(
                &parse_manifest(manifest).map_err(anyhow::Error::from)?,
                model.config.adapt,
            )
            .map_err(anyhow::Error::from)?;
            let (_, hyps) =
                evaluate(&model, &utts, &common.beam_options()).map_err(anyhow::Error::from)?;
            let vocab = Vocabulary::standard();
            let text: String = hyps
                .iter()
                .map(|(id, h)| format!("{id}\t{}\n", vocab.decode(h)))
                .collect();
            match out {
                Some(p) => {
                    std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?
                }
                None => print!("{text}"),
            }
        }
        Command::Eval {
            manifest,
            model,
            hyps,
            out,
            bucket_width,
        } => {
            let parsed = parse_manifest(manifest).map_err(anyhow::Error::from)?;
            let report = match (model, hyps) {
                (Some(m), _) => {
                    let (model, _) = load_model(m).map_err(anyhow::Error::from)?;
                    let utts = load_utterances(&parsed, model.config.adapt)
                        .map_err(anyhow::Error::from)?;
                    let (mut report, _) = evaluate(&model, &utts, &common.beam_options())
                        .map_err(anyhow::Error::from)?;
                    if model.config.arch == Arch::S2s {
                        report.ppl =
                            Some(char_perplexity(&model, &utts).map_err(anyhow::Error::from)?);
                    }
                    report
                }
                (None, Some(h)) => {
                    let vocab = Vocabulary::standard();
                    let refs: Vec<(String, Vec<usize>)> = parsed
                        .entries
                        .iter()
                        .map(|e| {
                            (
                                e.id.clone(),
                                vocab.encode(&e.transcript).expect("validated"),
                            )
                        })
                        .collect();
                    score(&refs, &read_hyps(h)?)
                }
                (None, None) => {
                    return Err(anyhow!(Error::Config("--model or --hyps required".into())).into())
                }
            };
            println!("utterances: {}", report.rows.len());
            println!("TER: {:.6}", report.ter);
            if let Some(p) = report.ppl {
                println!("PPL: {p:.6}");
            }
            println!(
                "mean |hyp_len - ref_len|: {:.4}",
                report.mean_abs_length_gap()
            );
            if let Some(dir) = out {
                write_reports(dir, &report, *bucket_width).map_err(anyhow::Error::from)?;
            }
        }
        Command::Gradcheck { eps, tol } => {
            let reports = gradient_suite(common.seed.unwrap_or(0), *eps, *tol)
                .map_err(anyhow::Error::from)?;
            let mut failed = 0;
            for (name, r) in &reports {
                let verdict = if r.passed() { "PASS" } else { "FAIL" };
                println!("{verdict} {name}: max rel err {:.3e}", r.max_rel_err());
                if !r.passed() {
                    failed += 1;
                    for e in r.failures() {
                        println!(
                            "  {}[{}]: analytic {:.6e} numeric {:.6e}",
                            e.name, e.worst_index, e.analytic, e.numeric
                        );
                    }
                }
            }
            if failed > 0 {
                return Err(numeric_failure(format!("{failed} gradient checks failed")));
            }
        }
        Command::CtcOracle { instances, tol } => {
            let s = ctc_oracle(*instances, common.seed.unwrap_or(0), *tol)
                .map_err(anyhow::Error::from)?;
            println!(
                "{} instances ({} infeasible), max rel err {:.3e}, {} failures",
                s.instances, s.infeasible, s.max_rel_err, s.failures
            );
            if s.failures > 0 {
                return Err(numeric_failure(format!("{} oracle mismatches", s.failures)));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
