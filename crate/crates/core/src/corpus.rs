//! Synthetic audio-visual corpora.
//!
//! Every character owns a fixed 40-d template; an utterance's "audio" is the
//! concatenation of noisy template copies. Topics share a neutral word pool
//! and each additionally owns members of confusable pairs: two spellings
//! rendered from one identical acoustic spelling, placed in different topics.
//! The visual vector (topic anchor plus noise) is the only cue separating the
//! two members.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::evaluation::edit_distance;
use crate::features::{FeatureSequence, VisualContext, BASE_STEP_MS, MEL_DIM, STACK, VISUAL_DIM};
use crate::manifest::{Manifest, ManifestEntry, Utterance};
use crate::vocab::{Vocabulary, SPACE};

/// Probability that an utterance of a topic with confusable words contains one.
pub const CONFUSABLE_RATE: f64 = 0.5;

const WORD_LEN: std::ops::RangeInclusive<usize> = 3..=6;
const LETTERS: &[u8] = b"abcdefghijklmnopqrstuvwxyz";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LengthSkew {
    #[default]
    Uniform,
    HeavyTail,
}

impl fmt::Display for LengthSkew {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LengthSkew::Uniform => "uniform",
            LengthSkew::HeavyTail => "heavy_tail",
        })
    }
}

impl FromStr for LengthSkew {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(LengthSkew::Uniform),
            "heavy_tail" | "heavy-tail" => Ok(LengthSkew::HeavyTail),
            other => Err(Error::Config(format!("unknown length skew `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_topics: usize,
    pub words_per_topic: usize,
    pub confusable_pairs: usize,
    /// Training utterances.
    pub utterances: usize,
    /// Held-out utterances drawn from the same distribution.
    pub test_utterances: usize,
    /// Inclusive range of 30 ms model frames per character.
    pub frames_per_char: (usize, usize),
    /// Inclusive word-count range for `uniform` length skew.
    pub words_per_utterance: (usize, usize),
    pub noise_sigma: f64,
    pub visual_noise_sigma: f64,
    pub length_skew: LengthSkew,
    pub transcript_noise_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_topics: 4,
            words_per_topic: 8,
            confusable_pairs: 4,
            utterances: 100,
            test_utterances: 0,
            frames_per_char: (2, 4),
            words_per_utterance: (1, 3),
            noise_sigma: 0.1,
            visual_noise_sigma: 0.1,
            length_skew: LengthSkew::Uniform,
            transcript_noise_rate: 0.0,
            seed: 0,
        }
    }
}

fn parse_range(key: &str, value: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("{key}: expected N or LO-HI, got `{value}`"));
    match value.split_once('-') {
        Some((lo, hi)) => Ok((
            lo.trim().parse().map_err(|_| bad())?,
            hi.trim().parse().map_err(|_| bad())?,
        )),
        None => {
            let n = value.trim().parse().map_err(|_| bad())?;
            Ok((n, n))
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_topics", self.n_topics),
            ("words_per_topic", self.words_per_topic),
            ("utterances", self.utterances),
            ("frames_per_char", self.frames_per_char.0),
            ("words_per_utterance", self.words_per_utterance.0),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.frames_per_char.0 > self.frames_per_char.1
            || self.words_per_utterance.0 > self.words_per_utterance.1
        {
            return Err(Error::Config("empty range".into()));
        }
        if !(0.0..=1.0).contains(&self.transcript_noise_rate) {
            return Err(Error::Config(
                "transcript_noise_rate must lie in [0, 1]".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.visual_noise_sigma >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if self.confusable_pairs > 0 && self.n_topics < 2 {
            return Err(Error::Config(
                "confusable pairs need at least two topics".into(),
            ));
        }
        if 2 * self.confusable_pairs > self.n_topics * self.words_per_topic {
            return Err(Error::Config(format!(
                "{} confusable pairs need {} words but the lexicon has {}",
                self.confusable_pairs,
                2 * self.confusable_pairs,
                self.n_topics * self.words_per_topic
            )));
        }
        Ok(())
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "n_topics" => self.n_topics = parse_num(key, value)?,
            "words_per_topic" => self.words_per_topic = parse_num(key, value)?,
            "confusable_pairs" => self.confusable_pairs = parse_num(key, value)?,
            "utterances" => self.utterances = parse_num(key, value)?,
            "test_utterances" => self.test_utterances = parse_num(key, value)?,
            "frames_per_char" => self.frames_per_char = parse_range(key, value)?,
            "words_per_utterance" => self.words_per_utterance = parse_range(key, value)?,
            "noise_sigma" => self.noise_sigma = parse_num(key, value)?,
            "visual_noise_sigma" => self.visual_noise_sigma = parse_num(key, value)?,
            "length_skew" => self.length_skew = value.trim().parse()?,
            "transcript_noise_rate" => self.transcript_noise_rate = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown corpus setting `{key}`"))),
        }
        Ok(())
    }
}

/// Two spellings sharing the acoustics of `spellings[0]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusablePair {
    pub spellings: [String; 2],
    pub topics: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    pub neutral: Vec<String>,
    pub pairs: Vec<ConfusablePair>,
    /// One template per transcript token, plus silence as the last row.
    pub templates: Vec<Vec<f64>>,
    pub anchors: Vec<Vec<f64>>,
}

impl Lexicon {
    fn silence(&self) -> &[f64] {
        self.templates.last().expect("silence template")
    }

    /// Confusable words owned by `topic` as `(pair, member)`.
    pub fn topic_confusables(&self, topic: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (p, pair) in self.pairs.iter().enumerate() {
            for m in 0..2 {
                if pair.topics[m] == topic {
                    out.push((p, m));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthUtterance {
    pub utterance: Utterance,
    pub topic: usize,
    /// Confusable word present, as `(pair, member)`.
    pub confusable: Option<(usize, usize)>,
    /// Clean transcript of what was rendered (before label noise).
    pub spoken: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub config: SynthConfig,
    pub lexicon: Lexicon,
    pub train: Vec<SynthUtterance>,
    pub test: Vec<SynthUtterance>,
}

/// Paths written by [`gen_corpus`].
#[derive(Clone, Debug)]
pub struct CorpusFiles {
    pub train_manifest: PathBuf,
    pub test_manifest: Option<PathBuf>,
    pub stats: PathBuf,
}

fn random_word<R: Rng + ?Sized>(rng: &mut R, len: usize) -> String {
    let mut w: Vec<u8> = Vec::with_capacity(len);
    while w.len() < len {
        let c = LETTERS[rng.random_range(0..LETTERS.len())];
        // No doubled letters: a repeated template would need a separating blank.
        if w.last() != Some(&c) {
            w.push(c);
        }
    }
    String::from_utf8(w).expect("ascii")
}

fn respell<R: Rng + ?Sized>(rng: &mut R, word: &str) -> String {
    let mut w = word.as_bytes().to_vec();
    let n_changes = rng.random_range(1..=2usize).min(w.len());
    let mut positions: Vec<usize> = (0..w.len()).collect();
    positions.shuffle(rng);
    for &i in &positions[..n_changes] {
        loop {
            let c = LETTERS[rng.random_range(0..LETTERS.len())];
            let left_ok = i == 0 || w[i - 1] != c;
            let right_ok = i + 1 == w.len() || w[i + 1] != c;
            if c != word.as_bytes()[i] && left_ok && right_ok {
                w[i] = c;
                break;
            }
        }
    }
    String::from_utf8(w).expect("ascii")
}

fn gaussian_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..dim).map(|_| n.sample(rng)).collect()
}

fn build_lexicon(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Lexicon {
    let n_templates = SPACE + 2;
    let templates = (0..n_templates)
        .map(|_| gaussian_vec(rng, MEL_DIM))
        .collect();
    let anchors = (0..cfg.n_topics)
        .map(|_| gaussian_vec(rng, VISUAL_DIM))
        .collect();

    let mut used = HashSet::new();
    let fresh = |rng: &mut ChaCha8Rng, used: &mut HashSet<String>| loop {
        let len = rng.random_range(WORD_LEN);
        let w = random_word(rng, len);
        if used.insert(w.clone()) {
            return w;
        }
    };
    let neutral: Vec<String> = (0..cfg.words_per_topic)
        .map(|_| fresh(rng, &mut used))
        .collect();
    let mut pairs = Vec::with_capacity(cfg.confusable_pairs);
    for p in 0..cfg.confusable_pairs {
        let a = fresh(rng, &mut used);
        let b = loop {
            let b = respell(rng, &a);
            if !used.contains(&b) {
                used.insert(b.clone());
                break b;
            }
        };
        pairs.push(ConfusablePair {
            spellings: [a, b],
            topics: [p % cfg.n_topics, (p + 1) % cfg.n_topics],
        });
    }
    Lexicon {
        neutral,
        pairs,
        templates,
        anchors,
    }
}

fn word_count<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> usize {
    match cfg.length_skew {
        LengthSkew::Uniform => {
            rng.random_range(cfg.words_per_utterance.0..=cfg.words_per_utterance.1)
        }
        LengthSkew::HeavyTail => {
            if rng.random_bool(0.7) {
                rng.random_range(1..=2)
            } else {
                let mut n = 3;
                while n < 12 && rng.random_bool(0.65) {
                    n += 1;
                }
                n
            }
        }
    }
}

fn add_noise<R: Rng + ?Sized>(rng: &mut R, base: &[f64], sigma: f64, out: &mut Vec<f32>) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        out.extend(base.iter().map(|&b| (b + n.sample(rng)) as f32));
    } else {
        out.extend(base.iter().map(|&b| b as f32));
    }
}

fn render_utterance(
    cfg: &SynthConfig,
    lex: &Lexicon,
    index: usize,
    id: String,
) -> Result<SynthUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ index as u64);
    rng.set_stream(1);
    let vocab = Vocabulary::standard();

    let topic = rng.random_range(0..cfg.n_topics);
    let n_words = word_count(cfg, &mut rng);
    let mut written_words: Vec<String> = (0..n_words)
        .map(|_| {
            lex.neutral
                .choose(&mut rng)
                .expect("non-empty pool")
                .clone()
        })
        .collect();
    let mut acoustic_words = written_words.clone();
    let mut confusable = None;
    let owned = lex.topic_confusables(topic);
    if !owned.is_empty() && rng.random_bool(CONFUSABLE_RATE) {
        let (p, m) = *owned.choose(&mut rng).expect("non-empty");
        let slot = rng.random_range(0..n_words);
        written_words[slot] = lex.pairs[p].spellings[m].clone();
        acoustic_words[slot] = lex.pairs[p].spellings[0].clone();
        confusable = Some((p, m));
    }
    let spoken = written_words.join(" ");

    let mut frames: Vec<f32> = Vec::new();
    let silence = |rng: &mut ChaCha8Rng, frames: &mut Vec<f32>| {
        for _ in 0..rng.random_range(1..=2usize) * STACK {
            add_noise(rng, lex.silence(), cfg.noise_sigma, frames);
        }
    };
    silence(&mut rng, &mut frames);
    let acoustic = acoustic_words.join(" ");
    for tok in vocab
        .encode(&acoustic)
        .expect("lexicon uses vocabulary letters")
    {
        let n = rng.random_range(cfg.frames_per_char.0..=cfg.frames_per_char.1) * STACK;
        for _ in 0..n {
            add_noise(&mut rng, &lex.templates[tok], cfg.noise_sigma, &mut frames);
        }
    }
    silence(&mut rng, &mut frames);

    let mut transcript_words = Vec::with_capacity(written_words.len());
    for w in written_words {
        if cfg.transcript_noise_rate > 0.0 && rng.random_bool(cfg.transcript_noise_rate) {
            if rng.random_bool(0.5) {
                continue;
            }
            let cut = rng.random_range(1..w.len().min(3));
            transcript_words.push(format!("{}-", &w[..cut]));
        }
        transcript_words.push(w);
    }
    let transcript = transcript_words.join(" ");

    let mut anchor = Vec::with_capacity(VISUAL_DIM);
    add_noise(
        &mut rng,
        &lex.anchors[topic],
        cfg.visual_noise_sigma,
        &mut anchor,
    );

    Ok(SynthUtterance {
        utterance: Utterance {
            audio: FeatureSequence::new(frames, MEL_DIM, BASE_STEP_MS)?,
            visual: Some(VisualContext::new(anchor, id.clone())?),
            tokens: vocab.encode(&transcript).expect("vocabulary characters"),
            id,
        },
        topic,
        confusable,
        spoken,
    })
}

/// Generates a corpus in memory.
pub fn synthesize(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let lexicon = build_lexicon(cfg, &mut rng);
    let train = (0..cfg.utterances)
        .map(|i| render_utterance(cfg, &lexicon, i, format!("train-{i:05}")))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..cfg.test_utterances)
        .map(|j| render_utterance(cfg, &lexicon, cfg.utterances + j, format!("test-{j:05}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthCorpus {
        config: cfg.clone(),
        lexicon,
        train,
        test,
    })
}

/// TER contribution an audio-only model cannot avoid on `utts`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChancePenalty {
    /// Minimum edits forced by indistinguishable confusable words.
    pub edits: usize,
    pub reference_tokens: usize,
    pub confusable_words: usize,
}

impl ChancePenalty {
    pub fn rate(&self) -> f64 {
        if self.reference_tokens == 0 {
            0.0
        } else {
            self.edits as f64 / self.reference_tokens as f64
        }
    }
}

impl SynthCorpus {
    pub fn train_utterances(&self) -> Vec<Utterance> {
        self.train.iter().map(|s| s.utterance.clone()).collect()
    }

    pub fn test_utterances(&self) -> Vec<Utterance> {
        self.test.iter().map(|s| s.utterance.clone()).collect()
    }

    /// An audio-only model sees the same input for both members of a pair,
    /// so on each pair it errs at least `min(count_a, count_b)` times by the
    /// edit distance between the spellings.
    pub fn chance_penalty(&self, utts: &[SynthUtterance]) -> ChancePenalty {
        let mut counts = vec![[0usize; 2]; self.lexicon.pairs.len()];
        let mut confusable_words = 0;
        for u in utts {
            if let Some((p, m)) = u.confusable {
                counts[p][m] += 1;
                confusable_words += 1;
            }
        }
        let edits = counts
            .iter()
            .zip(&self.lexicon.pairs)
            .map(|(c, pair)| {
                let a: Vec<char> = pair.spellings[0].chars().collect();
                let b: Vec<char> = pair.spellings[1].chars().collect();
                c[0].min(c[1]) * edit_distance(&a, &b)
            })
            .sum();
        ChancePenalty {
            edits,
            reference_tokens: utts.iter().map(|u| u.utterance.tokens.len()).sum(),
            confusable_words,
        }
    }

    /// Penalty on the test split, or on training data when there is no test split.
    pub fn evaluation_penalty(&self) -> ChancePenalty {
        if self.test.is_empty() {
            self.chance_penalty(&self.train)
        } else {
            self.chance_penalty(&self.test)
        }
    }

    /// Writes features, visual vectors, manifests and a stats file under `dir`.
    pub fn write(&self, dir: &Path) -> Result<CorpusFiles> {
        for sub in ["features", "visual"] {
            let p = dir.join(sub);
            std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
        }
        let write_split = |utts: &[SynthUtterance], name: &str| -> Result<PathBuf> {
            let mut manifest = Manifest::default();
            for s in utts {
                let u = &s.utterance;
                let fp = dir.join("features").join(format!("{}.fea", u.id));
                u.audio.write(&fp)?;
                let vp = match &u.visual {
                    Some(v) => {
                        let vp = dir.join("visual").join(format!("{}.vis", u.id));
                        v.write(&vp)?;
                        Some(vp)
                    }
                    None => None,
                };
                manifest.entries.push(ManifestEntry {
                    id: u.id.clone(),
                    feature_path: fp,
                    visual_path: vp,
                    transcript: u.transcript(),
                });
            }
            let path = dir.join(name);
            manifest.write(&path)?;
            Ok(path)
        };
        let train_manifest = write_split(&self.train, "train.tsv")?;
        let test_manifest = if self.test.is_empty() {
            None
        } else {
            Some(write_split(&self.test, "test.tsv")?)
        };
        let penalty = self.evaluation_penalty();
        let stats = dir.join("stats.txt");
        let text = format!(
            "seed={}\ntrain_utterances={}\ntest_utterances={}\nconfusable_pairs={}\nconfusable_words={}\npenalty_edits={}\nreference_tokens={}\nchance_penalty={}\n",
            self.config.seed,
            self.train.len(),
            self.test.len(),
            self.lexicon.pairs.len(),
            penalty.confusable_words,
            penalty.edits,
            penalty.reference_tokens,
            penalty.rate()
        );
        std::fs::write(&stats, text).map_err(|e| Error::io(&stats, e))?;
        Ok(CorpusFiles {
            train_manifest,
            test_manifest,
            stats,
        })
    }
}

/// Generates a corpus and writes it to `dir`.
pub fn gen_corpus(cfg: &SynthConfig, dir: &Path) -> Result<(SynthCorpus, CorpusFiles)> {
    let corpus = synthesize(cfg)?;
    let files = corpus.write(dir)?;
    Ok((corpus, files))
}

/// Reads the `key=value` stats file written next to a corpus.
pub fn read_stats(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once('='))
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .collect())
}
