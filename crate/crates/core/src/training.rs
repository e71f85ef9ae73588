//! SGD training with per-epoch decay, first-epoch curriculum and checkpointing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptation::AdaptScheme;
use crate::autograd::{Graph, ParameterStore};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::evaluation::evaluate;
use crate::features::Normalizer;
use crate::manifest::Utterance;
use crate::model::{Arch, AsrModel, ModelConfig, PreparedUtterance};
use crate::s2s::BeamOptions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    /// Parameters rounded to single precision after every update.
    Single,
    #[default]
    Double,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" => Ok(Precision::Single),
            "64" => Ok(Precision::Double),
            other => Err(Error::Config(format!(
                "precision must be 32 or 64, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::Single => "32",
            Precision::Double => "64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub precision: Precision,
    pub model: ModelConfig,
    /// Decoding settings for dev evaluation.
    pub beam: BeamOptions,
    /// Evaluate the dev set every this many epochs (and after the last).
    pub dev_every: usize,
    /// Stop once dev TER falls to this value.
    pub target_ter: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.2,
            decay: 0.9,
            epochs: 10,
            batch_size: 16,
            clip_norm: 5.0,
            seed: 0,
            precision: Precision::Double,
            model: ModelConfig::full(Arch::Ctc, AdaptScheme::None),
            beam: BeamOptions::default(),
            dev_every: 1,
            target_ter: None,
        }
    }
}

impl TrainConfig {
    pub fn arch(&self) -> Arch {
        self.model.arch
    }

    pub fn adapt(&self) -> AdaptScheme {
        self.model.adapt
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("lr must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config("decay must lie in (0, 1]".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.dev_every == 0 {
            return Err(Error::Config(
                "batch_size, epochs and dev_every must be at least 1".into(),
            ));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.beam.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        self.model.validate()
    }

    /// Learning rate for a 1-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.decay.powi(epoch.saturating_sub(1) as i32)
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
        }
        let flag = |v: &str| match v.trim() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(Error::Config(format!(
                "{key}: expected a boolean, got `{other}`"
            ))),
        };
        match key {
            "lr" => self.lr = num(key, value)?,
            "decay" => self.decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "clip_norm" => self.clip_norm = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "precision" => self.precision = value.trim().parse()?,
            "beam" => self.beam.beam = num(key, value)?,
            "length_norm" => self.beam.length_norm = flag(value)?,
            "length_alpha" => self.beam.length_alpha = num(key, value)?,
            "max_len" => self.beam.max_len = Some(num(key, value)?),
            "dev_every" => self.dev_every = num(key, value)?,
            "target_ter" => self.target_ter = Some(num(key, value)?),
            _ => {
                if !self.model.set(key, value)? {
                    return Err(Error::Config(format!("unknown setting `{key}`")));
                }
            }
        }
        Ok(())
    }

    /// Reads flat `key=value` lines; `#` starts a comment.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {}: expected key=value", i + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("lr".to_string(), self.lr.to_string()),
            ("decay".into(), self.decay.to_string()),
            ("epochs".into(), self.epochs.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("clip_norm".into(), self.clip_norm.to_string()),
            ("seed".into(), self.seed.to_string()),
            ("precision".into(), self.precision.to_string()),
            ("beam".into(), self.beam.beam.to_string()),
            ("length_norm".into(), self.beam.length_norm.to_string()),
            ("length_alpha".into(), self.beam.length_alpha.to_string()),
        ];
        if let Some(m) = self.beam.max_len {
            out.push(("max_len".into(), m.to_string()));
        }
        out
    }
}

/// Utterance order for a 1-based epoch: ascending length with ties broken by
/// id in the first epoch, a seeded shuffle afterwards.
pub fn curriculum_order(items: &[(String, usize)], epoch: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    if epoch <= 1 {
        order.sort_by(|&a, &b| {
            items[a]
                .1
                .cmp(&items[b].1)
                .then_with(|| items[a].0.cmp(&items[b].0))
        });
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
    }
    order
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: bool,
}

/// Clips the global gradient norm to `clip_norm`, applies `theta -= lr * grad`
/// and zeroes gradients. A non-finite gradient skips the update.
pub fn sgd_step(store: &mut ParameterStore, lr: f64, clip_norm: f64) -> StepOutcome {
    let grad_norm = store.grad_norm();
    if !grad_norm.is_finite() {
        warn!("non-finite gradient norm, skipping batch");
        store.zero_grads();
        return StepOutcome {
            grad_norm,
            clipped: false,
            skipped: true,
        };
    }
    let clipped = grad_norm > clip_norm;
    let factor = if clipped { clip_norm / grad_norm } else { 1.0 };
    for (_, p) in store.iter_mut() {
        p.value.add_scaled(&p.grad, -lr * factor);
        p.grad.fill(0.0);
    }
    StepOutcome {
        grad_norm,
        clipped,
        skipped: false,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub dev_loss: Option<f64>,
    pub dev_ter: Option<f64>,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
    let mut out = String::from("epoch,split,loss,ter\n");
    for m in metrics {
        let _ = writeln!(out, "{},train,{},", m.epoch, m.train_loss);
        if m.dev_loss.is_some() || m.dev_ter.is_some() {
            let _ = writeln!(
                out,
                "{},dev,{},{}",
                m.epoch,
                opt(m.dev_loss),
                opt(m.dev_ter)
            );
        }
    }
    out
}

pub struct TrainOutcome {
    pub model: AsrModel,
    pub best_model: AsrModel,
    pub best_epoch: usize,
    pub metrics: Vec<EpochMetrics>,
}

/// Mean loss of one copy per utterance, skipping infeasible CTC targets.
/// With `accumulate`, gradients are added to the store scaled by `1/n`.
fn batch_loss(
    model: &mut AsrModel,
    batch: &[(&PreparedUtterance, usize)],
    accumulate: bool,
) -> Result<Option<(f64, usize)>> {
    let mut total = 0.0;
    let mut used = 0usize;
    for &(p, copy) in batch {
        let mut g = Graph::new();
        let loss = match model.loss(&mut g, &p.copies[copy], p.visual.as_ref(), &p.tokens) {
            Ok(l) => l,
            Err(e @ Error::Infeasible { .. }) => {
                warn!("skipping `{}` (copy {copy}): {e}", p.id);
                continue;
            }
            Err(e) => return Err(e),
        };
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            warn!("non-finite loss for `{}`, skipping", p.id);
            continue;
        }
        total += value;
        used += 1;
        if accumulate {
            g.backward(loss)?;
            g.accumulate_into(&mut model.store, 1.0)?;
        }
    }
    if used == 0 {
        return Ok(None);
    }
    if accumulate && used > 1 {
        let s = 1.0 / used as f64;
        for (_, p) in model.store.iter_mut() {
            p.grad.scale(s);
        }
    }
    Ok(Some((total, used)))
}

/// Mean loss over a set using the decoding copy.
pub fn mean_loss(model: &AsrModel, data: &[PreparedUtterance]) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut used = 0;
    for p in data {
        let mut g = Graph::new();
        match model.loss(&mut g, &p.copies[0], p.visual.as_ref(), &p.tokens) {
            Ok(l) => {
                total += g.value(l).data()[0];
                used += 1;
            }
            Err(Error::Infeasible { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((used > 0).then(|| total / used as f64))
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch{epoch:03}.ckpt"))
}

/// Trains a fresh model. Writes `epochNNN.ckpt`, `best.ckpt` and
/// `metrics.csv` into `out_dir` when given.
pub fn train(
    train_set: &[Utterance],
    dev_set: &[Utterance],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput(
            "training corpus has no utterances".into(),
        ));
    }
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut model = AsrModel::new(cfg.model.clone(), cfg.seed)?;
    let mut normalizer = Normalizer::fit(train_set.iter().map(|u| &u.audio))?;
    // checkpoints store f32, so keep the statistics exactly representable
    for v in normalizer.mean.iter_mut().chain(normalizer.std.iter_mut()) {
        *v = f64::from(*v as f32);
    }
    model.normalizer = normalizer;
    if cfg.precision == Precision::Single {
        model.round_to_f32();
    }
    let train_data = train_set
        .iter()
        .map(|u| model.prepare(u))
        .collect::<Result<Vec<_>>>()?;
    let dev_data = dev_set
        .iter()
        .map(|u| model.prepare(u))
        .collect::<Result<Vec<_>>>()?;
    let keys: Vec<(String, usize)> = train_data
        .iter()
        .map(|p| (p.id.clone(), p.n_frames()))
        .collect();
    let extra = cfg.to_pairs();

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, AsrModel)> = None;
    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let order = curriculum_order(&keys, epoch, cfg.seed);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&PreparedUtterance, usize)> = chunk
                .iter()
                .map(|&i| (&train_data[i], (epoch - 1 + i) % 3))
                .collect();
            if let Some((total, used)) = batch_loss(&mut model, &batch, true)? {
                loss_sum += total;
                loss_count += used;
                sgd_step(&mut model.store, lr, cfg.clip_norm);
                if cfg.precision == Precision::Single {
                    model.round_to_f32();
                }
            }
        }
        if loss_count == 0 {
            return Err(Error::Validation("no feasible training utterances".into()));
        }
        let train_loss = loss_sum / loss_count as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("training loss in epoch {epoch}")));
        }

        let evaluate_dev =
            !dev_set.is_empty() && (epoch % cfg.dev_every == 0 || epoch == cfg.epochs);
        let (dev_loss, dev_ter) = if evaluate_dev {
            let (report, _) = evaluate(&model, dev_set, &cfg.beam)?;
            (mean_loss(&model, &dev_data)?, Some(report.ter))
        } else {
            (None, None)
        };
        info!(
            "epoch {epoch}: lr {lr:.5} train loss {train_loss:.4}{}",
            dev_ter.map_or_else(String::new, |t| format!(" dev TER {t:.4}"))
        );
        metrics.push(EpochMetrics {
            epoch,
            lr,
            train_loss,
            dev_loss,
            dev_ter,
        });

        // Selection criterion: dev TER when available, otherwise training loss.
        let criterion = if dev_set.is_empty() {
            Some(train_loss)
        } else {
            dev_ter
        };
        if let Some(c) = criterion {
            if best.as_ref().is_none_or(|(b, _, _)| c < *b) {
                best = Some((c, epoch, model.clone()));
                if let Some(dir) = out_dir {
                    Checkpoint::from_model(&model, epoch, &extra).write(&dir.join("best.ckpt"))?;
                }
            }
        }
        if let Some(dir) = out_dir {
            Checkpoint::from_model(&model, epoch, &extra).write(&checkpoint_path(dir, epoch))?;
            let path = dir.join("metrics.csv");
            std::fs::write(&path, metrics_csv(&metrics)).map_err(|e| Error::io(&path, e))?;
        }
        if let (Some(target), Some(ter)) = (cfg.target_ter, dev_ter) {
            if ter <= target {
                info!("dev TER {ter:.4} reached target {target}, stopping");
                break;
            }
        }
    }
    let (_, best_epoch, best_model) = best.unwrap_or_else(|| (0.0, metrics.len(), model.clone()));
    Ok(TrainOutcome {
        model,
        best_model,
        best_epoch,
        metrics,
    })
}
