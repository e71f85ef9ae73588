//! Visual adaptation of the acoustic input.
//!
//! * VAT: an MLP maps the utterance's visual vector to a 120-d shift that is
//!   added to every acoustic frame; the MLP trains jointly with the model.
//! * Early fusion: the visual vector is appended to every frame (120 + 100 = 220).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autograd::{Graph, NodeId, ParameterStore};
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, VisualContext, FUSED_DIM, STACKED_DIM, VISUAL_DIM};
use crate::nn::Linear;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AdaptScheme {
    #[default]
    None,
    Vat,
    Early,
}

impl AdaptScheme {
    pub fn uses_visual(self) -> bool {
        self != AdaptScheme::None
    }

    /// Frame dimension seen by the model.
    pub fn model_input_dim(self, audio_dim: usize) -> usize {
        match self {
            AdaptScheme::Early => audio_dim + VISUAL_DIM,
            _ => audio_dim,
        }
    }
}

impl fmt::Display for AdaptScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdaptScheme::None => "none",
            AdaptScheme::Vat => "vat",
            AdaptScheme::Early => "early",
        })
    }
}

impl FromStr for AdaptScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AdaptScheme::None),
            "vat" => Ok(AdaptScheme::Vat),
            "early" => Ok(AdaptScheme::Early),
            other => Err(Error::Config(format!(
                "unknown adaptation scheme `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VatConfig {
    pub mlp_hidden: Vec<usize>,
    pub output_dim: usize,
}

impl Default for VatConfig {
    fn default() -> Self {
        Self {
            mlp_hidden: vec![128],
            output_dim: STACKED_DIM,
        }
    }
}

/// MLP producing the additive visual shift. The last layer starts at zero so
/// an untrained VAT model equals its audio-only counterpart.
#[derive(Clone, Debug)]
pub struct VatMlp {
    pub config: VatConfig,
    pub hidden: Vec<Linear>,
    pub output: Linear,
}

impl VatMlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        config: VatConfig,
    ) -> Result<Self> {
        let mut dim = VISUAL_DIM;
        let mut hidden = Vec::with_capacity(config.mlp_hidden.len());
        for (i, &w) in config.mlp_hidden.iter().enumerate() {
            hidden.push(Linear::new(
                store,
                rng,
                &format!("{prefix}.hidden{i}"),
                dim,
                w,
                true,
            )?);
            dim = w;
        }
        let output = Linear::new(
            store,
            rng,
            &format!("{prefix}.output"),
            dim,
            config.output_dim,
            true,
        )?;
        output.zero(store)?;
        Ok(Self {
            config,
            hidden,
            output,
        })
    }

    /// `1 x output_dim` shift for a `1 x 100` visual row.
    pub fn shift(&self, g: &mut Graph, store: &ParameterStore, visual: NodeId) -> Result<NodeId> {
        let mut h = visual;
        for layer in &self.hidden {
            let a = layer.forward(g, store, h)?;
            h = g.tanh(a);
        }
        self.output.forward(g, store, h)
    }

    /// Adds the visual shift to every row of `audio` (`T x output_dim`).
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        audio: NodeId,
        visual: NodeId,
    ) -> Result<NodeId> {
        let (t_len, dim) = g.shape(audio);
        if dim != self.config.output_dim {
            return Err(Error::Dimension {
                what: "VAT audio frames".into(),
                expected: self.config.output_dim,
                got: dim,
            });
        }
        let shift = self.shift(g, store, visual)?;
        let b = g.broadcast_rows(shift, t_len)?;
        g.add(audio, b)
    }
}

/// Applies trained VAT parameters to a feature sequence.
pub fn vat_fuse(
    audio: &FeatureSequence,
    visual: &VisualContext,
    mlp: &VatMlp,
    store: &ParameterStore,
) -> Result<FeatureSequence> {
    if audio.dim() != STACKED_DIM {
        return Err(Error::Dimension {
            what: "VAT audio frames".into(),
            expected: STACKED_DIM,
            got: audio.dim(),
        });
    }
    let mut g = Graph::new();
    let a = g.leaf(audio.to_tensor()?);
    let v = g.leaf(visual.to_tensor());
    let out = mlp.fuse(&mut g, store, a, v)?;
    let data = g.value(out).data().iter().map(|&x| x as f32).collect();
    FeatureSequence::new(data, STACKED_DIM, audio.step_ms())
}

/// Appends the utterance's visual vector to every frame.
pub fn early_fuse(audio: &FeatureSequence, visual: &VisualContext) -> Result<FeatureSequence> {
    if audio.dim() != STACKED_DIM {
        return Err(Error::Dimension {
            what: "early-fusion audio frames".into(),
            expected: STACKED_DIM,
            got: audio.dim(),
        });
    }
    if visual.vector.len() != VISUAL_DIM {
        return Err(Error::Dimension {
            what: "early-fusion visual vector".into(),
            expected: VISUAL_DIM,
            got: visual.vector.len(),
        });
    }
    let mut data = Vec::with_capacity(audio.n_frames() * FUSED_DIM);
    for t in 0..audio.n_frames() {
        data.extend_from_slice(audio.frame(t));
        data.extend_from_slice(&visual.vector);
    }
    FeatureSequence::new(data, FUSED_DIM, audio.step_ms())
}

/// Graph form of [`early_fuse`].
pub fn early_fuse_node(g: &mut Graph, audio: NodeId, visual: NodeId) -> Result<NodeId> {
    let (t_len, _) = g.shape(audio);
    let v = g.broadcast_rows(visual, t_len)?;
    g.concat(&[audio, v], 1)
}
