//! A complete recognizer: adaptation front end, network and feature normalization.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{early_fuse_node, AdaptScheme, VatConfig, VatMlp};
use crate::autograd::{Graph, NodeId, ParameterStore, Tensor};
use crate::ctc::{
    ctc_loss_node, greedy_decode, AcousticModel, AcousticModelConfig, PosteriorLattice,
};
use crate::error::{Error, Result};
use crate::features::{stack_and_oversample, FeatureSequence, Normalizer, MEL_DIM, STACKED_DIM};
use crate::hypothesis::Hypothesis;
use crate::manifest::Utterance;
use crate::s2s::{AttentionModel, BeamOptions, DecoderConfig, EncoderConfig, S2sConfig};
use crate::vocab::{to_ctc_labels, EOS, SOS, VOCAB_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Arch {
    #[default]
    Ctc,
    S2s,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Ctc => "ctc",
            Arch::S2s => "s2s",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc" => Ok(Arch::Ctc),
            "s2s" => Ok(Arch::S2s),
            other => Err(Error::Config(format!("unknown architecture `{other}`"))),
        }
    }
}

/// Network dimensions. `layers`/`hidden_dim` describe the CTC stack or the
/// S2S encoder; the decoder fields only apply to S2S.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Arch,
    pub adapt: AdaptScheme,
    pub layers: usize,
    pub hidden_dim: usize,
    pub projection_dim: Option<usize>,
    pub decoder_layers: usize,
    pub decoder_hidden: usize,
    pub embedding_dim: usize,
    pub vat_hidden: Vec<usize>,
}

impl ModelConfig {
    /// Full-size network for the given architecture.
    pub fn full(arch: Arch, adapt: AdaptScheme) -> Self {
        let ctc = AcousticModelConfig::full(STACKED_DIM);
        let s2s = S2sConfig::full(STACKED_DIM);
        match arch {
            Arch::Ctc => Self {
                arch,
                adapt,
                layers: ctc.layers,
                hidden_dim: ctc.hidden_dim,
                projection_dim: ctc.projection_dim,
                decoder_layers: s2s.decoder.layers,
                decoder_hidden: s2s.decoder.hidden_dim,
                embedding_dim: s2s.decoder.embedding_dim,
                vat_hidden: VatConfig::default().mlp_hidden,
            },
            Arch::S2s => Self {
                arch,
                adapt,
                layers: s2s.encoder.layers,
                hidden_dim: s2s.encoder.hidden_dim,
                projection_dim: None,
                decoder_layers: s2s.decoder.layers,
                decoder_hidden: s2s.decoder.hidden_dim,
                embedding_dim: s2s.decoder.embedding_dim,
                vat_hidden: VatConfig::default().mlp_hidden,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.adapt.model_input_dim(STACKED_DIM)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(
                "model needs at least one layer with positive width".into(),
            ));
        }
        if self.arch == Arch::S2s
            && (self.decoder_layers == 0 || self.decoder_hidden == 0 || self.embedding_dim == 0)
        {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        if self.adapt == AdaptScheme::Vat && self.vat_hidden.contains(&0) {
            return Err(Error::Config("VAT hidden widths must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let widths = |v: &[usize]| {
            v.iter()
                .map(|w| w.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        vec![
            ("arch".into(), self.arch.to_string()),
            ("adapt".into(), self.adapt.to_string()),
            ("layers".into(), self.layers.to_string()),
            ("hidden_dim".into(), self.hidden_dim.to_string()),
            (
                "projection_dim".into(),
                self.projection_dim
                    .map_or_else(|| "none".into(), |p| p.to_string()),
            ),
            ("decoder_layers".into(), self.decoder_layers.to_string()),
            ("decoder_hidden".into(), self.decoder_hidden.to_string()),
            ("embedding_dim".into(), self.embedding_dim.to_string()),
            ("vat_hidden".into(), widths(&self.vat_hidden)),
        ]
    }

    /// Applies one setting; returns `false` for keys this config does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let num = |v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse `{v}`")))
        };
        match key {
            "arch" => self.arch = value.trim().parse()?,
            "adapt" => self.adapt = value.trim().parse()?,
            "layers" => self.layers = num(value)?,
            "hidden_dim" => self.hidden_dim = num(value)?,
            "projection_dim" => {
                self.projection_dim = match value.trim() {
                    "none" | "" => None,
                    v => Some(num(v)?),
                }
            }
            "decoder_layers" => self.decoder_layers = num(value)?,
            "decoder_hidden" => self.decoder_hidden = num(value)?,
            "embedding_dim" => self.embedding_dim = num(value)?,
            "vat_hidden" => {
                self.vat_hidden = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(num)
                    .collect::<Result<_>>()?
            }
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug)]
pub enum Network {
    Ctc(AcousticModel),
    S2s(AttentionModel),
}

/// Model input for one utterance: stacked, normalized frames (three
/// oversampled copies) and the visual row if present.
#[derive(Clone, Debug)]
pub struct PreparedUtterance {
    pub id: String,
    pub copies: Vec<Tensor>,
    pub visual: Option<Tensor>,
    pub tokens: Vec<usize>,
}

impl PreparedUtterance {
    /// Frame count of the decoding copy.
    pub fn n_frames(&self) -> usize {
        self.copies[0].rows()
    }
}

#[derive(Clone, Debug)]
pub struct AsrModel {
    pub config: ModelConfig,
    pub store: ParameterStore,
    pub network: Network,
    pub vat: Option<VatMlp>,
    pub normalizer: Normalizer,
}

impl AsrModel {
    /// Builds a freshly initialized model; all randomness comes from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let input_dim = config.input_dim();
        let network = match config.arch {
            Arch::Ctc => Network::Ctc(AcousticModel::new(
                &mut store,
                &mut rng,
                "am",
                AcousticModelConfig {
                    input_dim,
                    layers: config.layers,
                    hidden_dim: config.hidden_dim,
                    projection_dim: config.projection_dim,
                },
            )?),
            Arch::S2s => Network::S2s(AttentionModel::new(
                &mut store,
                &mut rng,
                "s2s",
                S2sConfig {
                    encoder: EncoderConfig {
                        input_dim,
                        layers: config.layers,
                        hidden_dim: config.hidden_dim,
                    },
                    decoder: DecoderConfig {
                        layers: config.decoder_layers,
                        hidden_dim: config.decoder_hidden,
                        embedding_dim: config.embedding_dim,
                    },
                },
            )?),
        };
        let vat = match config.adapt {
            AdaptScheme::Vat => Some(VatMlp::new(
                &mut store,
                &mut rng,
                "vat",
                VatConfig {
                    mlp_hidden: config.vat_hidden.clone(),
                    output_dim: STACKED_DIM,
                },
            )?),
            _ => None,
        };
        Ok(Self {
            config,
            store,
            network,
            vat,
            normalizer: Normalizer::identity(MEL_DIM),
        })
    }

    /// Rounds every parameter to single precision.
    pub fn round_to_f32(&mut self) {
        for (_, p) in self.store.iter_mut() {
            for v in p.value.data_mut() {
                *v = f64::from(*v as f32);
            }
        }
    }

    /// Normalizes, stacks and oversamples an utterance's log-mel frames.
    pub fn prepare(&self, utt: &Utterance) -> Result<PreparedUtterance> {
        if utt.audio.dim() != MEL_DIM {
            return Err(Error::Dimension {
                what: format!("log-mel frames of `{}`", utt.id),
                expected: MEL_DIM,
                got: utt.audio.dim(),
            });
        }
        let visual = match (&utt.visual, self.config.adapt.uses_visual()) {
            (Some(v), true) => Some(v.to_tensor()),
            (None, true) => {
                return Err(Error::Validation(format!(
                    "utterance `{}` has no visual vector but adaptation `{}` needs one",
                    utt.id, self.config.adapt
                )))
            }
            (_, false) => None,
        };
        let normalized = self.normalizer.apply(&utt.audio)?;
        let copies = stack_and_oversample(&normalized)?
            .iter()
            .map(FeatureSequence::to_tensor)
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedUtterance {
            id: utt.id.clone(),
            copies,
            visual,
            tokens: utt.tokens.clone(),
        })
    }

    /// Applies the adaptation scheme to one copy of the frames.
    pub fn input_node(
        &self,
        g: &mut Graph,
        frames: &Tensor,
        visual: Option<&Tensor>,
    ) -> Result<NodeId> {
        let x = g.leaf(frames.clone());
        match self.config.adapt {
            AdaptScheme::None => Ok(x),
            AdaptScheme::Vat => {
                let v = g.leaf(
                    visual
                        .ok_or_else(|| Error::Validation("VAT needs a visual vector".into()))?
                        .clone(),
                );
                self.vat
                    .as_ref()
                    .expect("built with VAT")
                    .fuse(g, &self.store, x, v)
            }
            AdaptScheme::Early => {
                let v = g.leaf(
                    visual
                        .ok_or_else(|| {
                            Error::Validation("early fusion needs a visual vector".into())
                        })?
                        .clone(),
                );
                early_fuse_node(g, x, v)
            }
        }
    }

    /// Training loss for one copy: CTC negative log-likelihood, or the summed
    /// per-character cross-entropy of the attention decoder.
    pub fn loss(
        &self,
        g: &mut Graph,
        frames: &Tensor,
        visual: Option<&Tensor>,
        tokens: &[usize],
    ) -> Result<NodeId> {
        let x = self.input_node(g, frames, visual)?;
        match &self.network {
            Network::Ctc(am) => {
                let logits = am.logits(g, &self.store, x)?;
                ctc_loss_node(g, logits, &to_ctc_labels(tokens))
            }
            Network::S2s(m) => m.teacher_forced_loss(g, &self.store, x, tokens),
        }
    }

    pub fn ctc_lattice(&self, prepared: &PreparedUtterance) -> Result<PosteriorLattice> {
        let Network::Ctc(am) = &self.network else {
            return Err(Error::Config("posterior lattice needs a CTC model".into()));
        };
        let mut g = Graph::new();
        let x = self.input_node(&mut g, &prepared.copies[0], prepared.visual.as_ref())?;
        let logits = am.logits(&mut g, &self.store, x)?;
        let lp = g.log_softmax(logits);
        PosteriorLattice::new(g.value(lp).clone())
    }

    /// Decodes the first copy: greedy for CTC, beam search for S2S.
    pub fn decode(&self, prepared: &PreparedUtterance, opts: &BeamOptions) -> Result<Hypothesis> {
        match &self.network {
            Network::Ctc(_) => Ok(greedy_decode(&self.ctc_lattice(prepared)?)),
            Network::S2s(m) => {
                let mut g = Graph::new();
                let x = self.input_node(&mut g, &prepared.copies[0], prepared.visual.as_ref())?;
                let src = m.encoder.encode(&mut g, &self.store, x)?;
                let hyps = m.beam_search(&mut g, &self.store, &src, opts)?;
                Ok(hyps
                    .into_iter()
                    .next()
                    .expect("beam search returns at least one hypothesis"))
            }
        }
    }

    /// Teacher-forced negative log-likelihood of the transcript plus
    /// end-of-sentence, and the number of predicted tokens.
    pub fn char_nll(&self, prepared: &PreparedUtterance) -> Result<(f64, usize)> {
        let Network::S2s(m) = &self.network else {
            return Err(Error::Config(
                "character perplexity needs an attention model".into(),
            ));
        };
        let mut g = Graph::new();
        let x = self.input_node(&mut g, &prepared.copies[0], prepared.visual.as_ref())?;
        let rows = m.teacher_forced_rows(&mut g, &self.store, x, &prepared.tokens)?;
        let mut nll = 0.0;
        for (row, &tok) in rows
            .iter()
            .zip(prepared.tokens.iter().chain(std::iter::once(&EOS)))
        {
            debug_assert!(tok != SOS && tok < VOCAB_SIZE);
            nll -= g.value(*row).data()[tok];
        }
        Ok((nll, rows.len()))
    }
}
