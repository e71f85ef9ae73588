//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- 1 6`.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use avsr_core::adaptation::AdaptScheme;
use avsr_core::checkpoint::load_model;
use avsr_core::corpus::{gen_corpus, synthesize, LengthSkew, SynthConfig};
use avsr_core::evaluation::{char_perplexity, evaluate};
use avsr_core::features::VisualContext;
use avsr_core::manifest::Utterance;
use avsr_core::model::{Arch, AsrModel, ModelConfig};
use avsr_core::s2s::BeamOptions;
use avsr_core::training::{train, Precision, TrainConfig};
use avsr_core::verify::{ctc_oracle, gradient_suite};
use avsr_core::vocab::VOCAB_SIZE;

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn small_model(arch: Arch, adapt: AdaptScheme, hidden: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden_dim: hidden,
        projection_dim: (arch == Arch::Ctc).then_some(hidden / 2),
        decoder_layers: 1,
        decoder_hidden: hidden,
        embedding_dim: 16,
        vat_hidden: vec![32],
        ..ModelConfig::full(arch, adapt)
    }
}

fn ctc_oracle_equivalence() -> Verdict {
    let t = Instant::now();
    let s = ctc_oracle(200, 2024, 1e-10).map_err(|e| e.to_string())?;
    let secs = t.elapsed().as_secs_f64();
    check(
        s.failures == 0 && s.max_rel_err <= 1e-10 && secs < 30.0,
        format!(
            "{} instances ({} infeasible), max rel err {:.2e}, {secs:.2} s",
            s.instances, s.infeasible, s.max_rel_err
        ),
    )
}

fn gradient_checks() -> Verdict {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut failed = Vec::new();
    for eps in [1e-4, 1e-5] {
        for (name, r) in gradient_suite(0, eps, 1e-4).map_err(|e| e.to_string())? {
            worst = worst.max(r.max_rel_err());
            if !r.passed() {
                failed.push(format!("{name}@{eps:e}"));
            }
        }
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        failed.is_empty() && secs < 120.0,
        format!("8 components at eps 1e-4 and 1e-5, max rel err {worst:.2e}, {secs:.2} s; failed: {failed:?}"),
    )
}

fn overfit() -> Verdict {
    let corpus = synthesize(&SynthConfig {
        utterances: 50,
        noise_sigma: 0.0,
        confusable_pairs: 0,
        transcript_noise_rate: 0.0,
        seed: 1,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let utts = corpus.train_utterances();
    let mut parts = Vec::new();
    let mut ok = true;
    for (arch, epochs) in [(Arch::Ctc, 100), (Arch::S2s, 200)] {
        let t = Instant::now();
        let tc = TrainConfig {
            lr: 0.2,
            decay: 0.99,
            epochs,
            batch_size: 16,
            model: small_model(arch, AdaptScheme::None, 64),
            beam: BeamOptions::default(),
            dev_every: 5,
            target_ter: Some(0.05),
            ..TrainConfig::default()
        };
        let out = train(&utts, &utts, &tc, None).map_err(|e| e.to_string())?;
        let best = out
            .metrics
            .iter()
            .filter_map(|m| m.dev_ter.map(|t| (t, m.epoch)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .ok_or("no dev evaluation")?;
        ok &= best.0 <= 0.05;
        parts.push(format!(
            "{arch} TER {:.4} at epoch {} ({:.0} s)",
            best.0,
            best.1,
            t.elapsed().as_secs_f64()
        ));
    }
    check(ok, parts.join(", "))
}

fn adaptation_benefit() -> Verdict {
    let corpus = synthesize(&SynthConfig {
        n_topics: 4,
        confusable_pairs: 4,
        utterances: 500,
        test_utterances: 100,
        noise_sigma: 0.1,
        seed: 3,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let penalty = corpus.evaluation_penalty().rate();
    let (tr, te) = (corpus.train_utterances(), corpus.test_utterances());
    let run = |arch: Arch, adapt: AdaptScheme| -> Result<f64, String> {
        let tc = TrainConfig {
            lr: 0.2,
            decay: 0.95,
            epochs: 30,
            batch_size: 16,
            model: small_model(arch, adapt, 64),
            ..TrainConfig::default()
        };
        let out = train(&tr, &[], &tc, None).map_err(|e| e.to_string())?;
        let (report, _) = evaluate(&out.model, &te, &tc.beam).map_err(|e| e.to_string())?;
        Ok(report.ter)
    };
    let mut ok = true;
    let mut parts = vec![format!("chance penalty {penalty:.4}")];
    for (arch, av) in [
        (Arch::Ctc, AdaptScheme::Vat),
        (Arch::S2s, AdaptScheme::Early),
    ] {
        let audio = run(arch, AdaptScheme::None)?;
        let visual = run(arch, av)?;
        ok &= visual < audio && audio - visual >= penalty;
        parts.push(format!(
            "{arch}: none {audio:.4} vs {av} {visual:.4} (gap {:.4})",
            audio - visual
        ));
    }
    check(ok, parts.join(", "))
}

fn length_normalization() -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let corpus = synthesize(&SynthConfig {
            utterances: 200,
            test_utterances: 60,
            confusable_pairs: 0,
            length_skew: LengthSkew::HeavyTail,
            seed,
            ..SynthConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let tc = TrainConfig {
            lr: 0.2,
            decay: 0.95,
            epochs: 8,
            batch_size: 16,
            seed,
            model: small_model(Arch::S2s, AdaptScheme::None, 32),
            ..TrainConfig::default()
        };
        let out = train(&corpus.train_utterances(), &[], &tc, None).map_err(|e| e.to_string())?;
        let gap = |length_norm: bool| -> Result<f64, String> {
            let opts = BeamOptions {
                beam: 5,
                length_norm,
                ..BeamOptions::default()
            };
            let (r, _) = evaluate(&out.model, &corpus.test_utterances(), &opts)
                .map_err(|e| e.to_string())?;
            Ok(r.mean_abs_length_gap())
        };
        let (off, on) = (gap(false)?, gap(true)?);
        ok &= on <= off;
        parts.push(format!("seed {seed}: off {off:.3} on {on:.3}"));
    }
    check(
        ok,
        format!("mean |hyp_len - ref_len|: {}", parts.join(", ")),
    )
}

fn write_test_wav(path: &Path) {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 16_000,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for n in 0..16_000 {
        let t = f64::from(n) / 16_000.0;
        let s = 0.3 * (2.0 * std::f64::consts::PI * 440.0 * t).sin()
            + 0.1 * (2.0 * std::f64::consts::PI * 1733.0 * t).sin();
        w.write_sample((s * f64::from(i16::MAX)) as i16).unwrap();
    }
    w.finalize().unwrap();
}

fn shape_of(stdout: &str, label: &str) -> Option<(usize, usize)> {
    let line = stdout.lines().find(|l| l.starts_with(label))?;
    let (r, c) = line[label.len()..]
        .trim_start_matches(':')
        .split_once('x')?;
    Some((r.trim().parse().ok()?, c.trim().parse().ok()?))
}

fn pipeline_shapes() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let wav = dir.path().join("tone.wav");
    write_test_wav(&wav);
    let vis = dir.path().join("tone.vis");
    VisualContext::new((0..100).map(|i| i as f32 / 100.0).collect(), "tone")
        .and_then(|v| v.write(&vis))
        .map_err(|e| e.to_string())?;
    let fea = dir.path().join("tone.fea");
    let output = Command::new(env!("CARGO_BIN_EXE_avsr"))
        .args([
            "features",
            "--stage",
            "fused",
            "--pyramid-layers",
            "3",
            "--wav",
        ])
        .arg(&wav)
        .arg("--visual")
        .arg(&vis)
        .arg("--out")
        .arg(&fea)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&output.stdout).to_string();
    if !output.status.success() {
        return Err(format!("features exited with {}", output.status));
    }
    let get = |l: &str| shape_of(&stdout, l).ok_or(format!("no `{l}` line in output"));
    let mel = get("mel")?;
    let stacked = get("stacked copy 0")?;
    let fused = get("fused")?;
    let layers = (1..=3)
        .map(|i| get(&format!("pyramid layer {i}")))
        .collect::<Result<Vec<_>, _>>()?;
    let written = avsr_core::features::FeatureSequence::read(&fea).map_err(|e| e.to_string())?;
    let mut ok = mel == (98, 40) && stacked == (32, 120) && fused == (32, 220);
    ok &= written.dim() == 220 && written.n_frames() == 32;
    let mut t = fused.0;
    for l in &layers {
        ok &= l.0 * 2 == t;
        t = l.0;
    }
    check(
        ok,
        format!(
            "mel {mel:?} -> stacked {stacked:?} -> fused {fused:?} -> pyramid {:?}",
            layers.iter().map(|l| l.0).collect::<Vec<_>>()
        ),
    )
}

fn perplexity_sanity() -> Verdict {
    let corpus = synthesize(&SynthConfig {
        utterances: 30,
        seed: 7,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let utts: Vec<Utterance> = corpus.train_utterances();
    let cfg = small_model(Arch::S2s, AdaptScheme::None, 16);
    let mut uniform = AsrModel::new(cfg.clone(), 0).map_err(|e| e.to_string())?;
    for name in ["s2s.decoder.output.weight", "s2s.decoder.output.bias"] {
        uniform
            .store
            .value_mut(name)
            .map_err(|e| e.to_string())?
            .fill(0.0);
    }
    let ppl0 = char_perplexity(&uniform, &utts).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        epochs: 5,
        model: cfg,
        ..TrainConfig::default()
    };
    let trained = train(&utts, &[], &tc, None).map_err(|e| e.to_string())?;
    let ppl1 = char_perplexity(&trained.model, &utts).map_err(|e| e.to_string())?;
    check(
        (ppl0 - VOCAB_SIZE as f64).abs() <= 1e-6 && ppl1 >= 1.0,
        format!("uniform {ppl0:.9}, trained {ppl1:.4}"),
    )
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = SynthConfig {
        utterances: 120,
        test_utterances: 20,
        seed: 21,
        ..SynthConfig::default()
    };
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let (corpus, _) = gen_corpus(&cfg, &a).map_err(|e| e.to_string())?;
    gen_corpus(&cfg, &b).map_err(|e| e.to_string())?;
    let (fa, fb) = (dir_bytes(&a), dir_bytes(&b));
    let corpus_same = fa == fb;

    let (tr, te) = (corpus.train_utterances(), corpus.test_utterances());
    let model = small_model(Arch::S2s, AdaptScheme::Vat, 16);
    let loss_run = || {
        let tc = TrainConfig {
            epochs: 1,
            seed: 5,
            model: model.clone(),
            ..TrainConfig::default()
        };
        train(&tr, &[], &tc, None).map(|o| o.metrics[0].train_loss)
    };
    let (l1, l2) = (
        loss_run().map_err(|e| e.to_string())?,
        loss_run().map_err(|e| e.to_string())?,
    );

    let out = dir.path().join("run");
    // a CTC model learns enough in a few epochs for the TER to be informative
    let tc = TrainConfig {
        epochs: 6,
        decay: 0.99,
        seed: 5,
        precision: Precision::Single,
        model: small_model(Arch::Ctc, AdaptScheme::Vat, 32),
        ..TrainConfig::default()
    };
    let outcome = train(&tr, &te, &tc, Some(&out)).map_err(|e| e.to_string())?;
    let recorded = outcome.metrics[outcome.best_epoch - 1]
        .dev_ter
        .ok_or("no dev TER")?;
    let (loaded, _) = load_model(&out.join("best.ckpt")).map_err(|e| e.to_string())?;
    let (report, _) = evaluate(&loaded, &te, &tc.beam).map_err(|e| e.to_string())?;
    check(
        corpus_same && l1.to_bits() == l2.to_bits() && report.ter == recorded,
        format!(
            "{} corpus files identical: {corpus_same}; epoch-1 loss {l1} vs {l2}; dev TER {recorded} recorded, {} after reload",
            fa.len(),
            report.ter
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("CTC oracle equivalence", ctc_oracle_equivalence),
        ("gradient suite", gradient_checks),
        ("overfit check", overfit),
        ("adaptation benefit", adaptation_benefit),
        ("length normalization", length_normalization),
        ("pipeline shape contract", pipeline_shapes),
        ("perplexity sanity", perplexity_sanity),
        ("determinism and persistence", determinism),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let verdict = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS [{n}] {name}: {detail} [{secs:.1} s]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL [{n}] {name}: {detail} [{secs:.1} s]");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
