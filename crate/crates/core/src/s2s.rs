//! Attention encoder-decoder.
//!
//! The encoder halves the frame rate at every layer by concatenating frame
//! pairs before a bi-LSTM. The decoder is a unidirectional LSTM stack whose
//! top state scores every encoder state with `exp(h_t' W h_s)`, normalized over
//! all source positions. Decoding is beam search with optional length
//! normalization.

use std::cmp::Ordering;

use rand::Rng;

use crate::autograd::{Graph, NodeId, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::hypothesis::Hypothesis;
use crate::nn::{
    glorot_uniform, BiLstmLayer, DenseBridge, Linear, LstmCell, LstmLayerConfig, LstmState,
};
use crate::vocab::{EOS, SOS, VOCAB_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub hidden_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub embedding_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct S2sConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl S2sConfig {
    /// Three 512-cell bi-LSTM encoder layers, two 512-cell decoder layers.
    pub fn full(input_dim: usize) -> Self {
        Self {
            encoder: EncoderConfig {
                input_dim,
                layers: 3,
                hidden_dim: 512,
            },
            decoder: DecoderConfig {
                layers: 2,
                hidden_dim: 512,
                embedding_dim: 64,
            },
        }
    }
}

/// Encoder output `h = (h_1, ..., h_T')`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    pub states: Tensor,
    pub reduction_factor: usize,
}

/// Encoder output bound inside a graph.
#[derive(Clone, Copy, Debug)]
pub struct EncodedSource {
    pub states: NodeId,
    pub states_t: NodeId,
    pub len: usize,
    pub summary: NodeId,
}

/// Output length of `layers` halvings with right zero-padding.
pub fn pyramid_len(mut t_len: usize, layers: usize) -> usize {
    for _ in 0..layers {
        t_len = t_len.div_ceil(2);
    }
    t_len
}

#[derive(Clone, Debug)]
pub struct PyramidEncoder {
    pub config: EncoderConfig,
    pub layers: Vec<BiLstmLayer>,
}

impl PyramidEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        config: EncoderConfig,
    ) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config(
                "pyramid encoder needs at least one layer".into(),
            ));
        }
        let mut layers = Vec::with_capacity(config.layers);
        let mut dim = config.input_dim;
        for i in 0..config.layers {
            let lc = LstmLayerConfig {
                input_dim: 2 * dim,
                hidden_dim: config.hidden_dim,
                bidirectional: true,
                projection_dim: None,
            };
            layers.push(BiLstmLayer::new(
                store,
                rng,
                &format!("{prefix}.layer{i}"),
                lc,
            )?);
            dim = lc.output_dim();
        }
        Ok(Self { config, layers })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.config.hidden_dim
    }

    /// Zero-pads to even length and merges frames `2i, 2i+1` into one row.
    pub fn pair_frames(g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let (t_len, dim) = g.shape(x);
        let x = if t_len % 2 == 1 {
            let pad = g.zeros(1, dim);
            g.concat(&[x, pad], 0)?
        } else {
            x
        };
        g.reshape(x, t_len.div_ceil(2), 2 * dim)
    }

    /// Runs the pyramid, returning the output of every layer.
    pub fn encode_layers(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: NodeId,
    ) -> Result<Vec<NodeId>> {
        let (t_len, dim) = g.shape(x);
        if t_len == 0 {
            return Err(Error::EmptyInput("encoder input has no frames".into()));
        }
        if dim != self.config.input_dim {
            return Err(Error::Dimension {
                what: "encoder input".into(),
                expected: self.config.input_dim,
                got: dim,
            });
        }
        let mut outputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let paired = Self::pair_frames(g, h)?;
            h = layer.forward(g, store, paired)?;
            outputs.push(h);
        }
        Ok(outputs)
    }

    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: NodeId,
    ) -> Result<EncodedSource> {
        let states = *self
            .encode_layers(g, store, x)?
            .last()
            .expect("at least one layer");
        let (len, _) = g.shape(states);
        let hd = self.config.hidden_dim;
        // Final forward state sits at the last frame, final backward state at the first.
        let fwd_last = g.slice(states, len - 1..len, 0..hd)?;
        let bwd_first = g.slice(states, 0..1, hd..2 * hd)?;
        let summary = g.concat(&[fwd_last, bwd_first], 1)?;
        let states_t = g.transpose(states);
        Ok(EncodedSource {
            states,
            states_t,
            len,
            summary,
        })
    }
}

/// Encodes a standalone feature matrix.
pub fn pyramid_encode(
    encoder: &PyramidEncoder,
    store: &ParameterStore,
    x: &Tensor,
) -> Result<EncoderStates> {
    let mut g = Graph::new();
    let xn = g.leaf(x.clone());
    let src = encoder.encode(&mut g, store, xn)?;
    Ok(EncoderStates {
        states: g.value(src.states).clone(),
        reduction_factor: 1 << encoder.config.layers,
    })
}

/// Bilinear global attention parameters `W_alpha` (`d_dec x d_enc`).
#[derive(Clone, Debug)]
pub struct Attention {
    pub w_alpha: String,
    pub decoder_dim: usize,
    pub encoder_dim: usize,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        decoder_dim: usize,
        encoder_dim: usize,
    ) -> Result<Self> {
        let w_alpha = format!("{name}.w_alpha");
        store.insert(&w_alpha, glorot_uniform(rng, decoder_dim, encoder_dim))?;
        Ok(Self {
            w_alpha,
            decoder_dim,
            encoder_dim,
        })
    }

    /// Alignment `softmax_s(h_t' W h_s)` over all source states, `1 x T'`.
    pub fn weights(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        h_t: NodeId,
        src: &EncodedSource,
    ) -> Result<NodeId> {
        if src.len == 0 {
            return Err(Error::EmptyInput(
                "attention over zero encoder states".into(),
            ));
        }
        let w = g.param(store, &self.w_alpha)?;
        let query = g.matmul(h_t, w)?;
        let scores = g.matmul(query, src.states_t)?;
        Ok(g.softmax(scores))
    }

    /// Context vector `sum_s alpha_s h_s`, `1 x d_enc`.
    pub fn attend(&self, g: &mut Graph, alpha: NodeId, src: &EncodedSource) -> Result<NodeId> {
        g.matmul(alpha, src.states)
    }
}

/// Standalone alignment vector for a decoder state against encoder states.
pub fn attention_weights(h_t: &[f64], states: &Tensor, w_alpha: &Tensor) -> Result<Vec<f64>> {
    if states.is_empty() {
        return Err(Error::EmptyInput(
            "attention over zero encoder states".into(),
        ));
    }
    let mut g = Graph::new();
    let h = g.leaf(Tensor::row(h_t.to_vec()));
    let w = g.leaf(w_alpha.clone());
    let s = g.leaf(states.clone());
    let st = g.transpose(s);
    let q = g.matmul(h, w)?;
    let scores = g.matmul(q, st)?;
    let a = g.softmax(scores);
    Ok(g.value(a).data().to_vec())
}

/// Standalone context vector.
pub fn attend(alpha: &[f64], states: &Tensor) -> Result<Vec<f64>> {
    if alpha.len() != states.rows() {
        return Err(Error::Dimension {
            what: "alignment length".into(),
            expected: states.rows(),
            got: alpha.len(),
        });
    }
    Ok(Tensor::row(alpha.to_vec()).matmul(states)?.into_data())
}

#[derive(Clone, Debug)]
pub struct DecoderState {
    pub layers: Vec<LstmState>,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    pub embedding: String,
    pub cells: Vec<LstmCell>,
    pub combine: Linear,
    pub output: Linear,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        config: DecoderConfig,
        encoder_dim: usize,
    ) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config("decoder needs at least one layer".into()));
        }
        let embedding = format!("{prefix}.embedding");
        store.insert(
            &embedding,
            glorot_uniform(rng, VOCAB_SIZE, config.embedding_dim),
        )?;
        let mut cells = Vec::with_capacity(config.layers);
        let mut dim = config.embedding_dim;
        for i in 0..config.layers {
            cells.push(LstmCell::new(
                store,
                rng,
                &format!("{prefix}.layer{i}"),
                dim,
                config.hidden_dim,
            )?);
            dim = config.hidden_dim;
        }
        let combine = Linear::new(
            store,
            rng,
            &format!("{prefix}.combine"),
            config.hidden_dim + encoder_dim,
            config.hidden_dim,
            true,
        )?;
        let output = Linear::new(
            store,
            rng,
            &format!("{prefix}.output"),
            config.hidden_dim,
            VOCAB_SIZE,
            true,
        )?;
        Ok(Self {
            config,
            embedding,
            cells,
            combine,
            output,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamOptions {
    pub beam: usize,
    pub length_norm: bool,
    /// Exponent on the hypothesis length when normalizing.
    pub length_alpha: f64,
    /// Maximum characters generated; `None` means four per encoder state.
    pub max_len: Option<usize>,
}

impl Default for BeamOptions {
    fn default() -> Self {
        Self {
            beam: 5,
            length_norm: false,
            length_alpha: 1.0,
            max_len: None,
        }
    }
}

/// Number of characters in a decoder hypothesis, delimiters excluded.
pub fn hypothesis_len(tokens: &[usize]) -> usize {
    tokens.iter().filter(|&&t| t != SOS && t != EOS).count()
}

pub fn normalized_score(log_score: f64, n_chars: usize, alpha: f64) -> f64 {
    log_score / (n_chars.max(1) as f64).powf(alpha)
}

/// Sorts best first by the ranking score selected in `opts`.
pub fn rank_hypotheses(hyps: &mut [Hypothesis], length_norm: bool) {
    let key = |h: &Hypothesis| {
        if length_norm {
            h.normalized_score
        } else {
            h.log_score
        }
    };
    hyps.sort_by(|a, b| key(b).total_cmp(&key(a)));
}

/// Encoder, bridge, attention and decoder.
#[derive(Clone, Debug)]
pub struct AttentionModel {
    pub config: S2sConfig,
    pub encoder: PyramidEncoder,
    pub bridge: DenseBridge,
    pub attention: Attention,
    pub decoder: Decoder,
}

impl AttentionModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        config: S2sConfig,
    ) -> Result<Self> {
        let encoder =
            PyramidEncoder::new(store, rng, &format!("{prefix}.encoder"), config.encoder)?;
        let enc_dim = encoder.output_dim();
        let bridge = DenseBridge::new(
            store,
            rng,
            &format!("{prefix}.bridge"),
            enc_dim,
            config.decoder.hidden_dim,
        )?;
        let attention = Attention::new(
            store,
            rng,
            &format!("{prefix}.attention"),
            config.decoder.hidden_dim,
            enc_dim,
        )?;
        let decoder = Decoder::new(
            store,
            rng,
            &format!("{prefix}.decoder"),
            config.decoder,
            enc_dim,
        )?;
        Ok(Self {
            config,
            encoder,
            bridge,
            attention,
            decoder,
        })
    }

    /// Decoder state before the first step: every layer's hidden state comes
    /// from the dense bridge over the encoder summary, cells start at zero.
    pub fn initial_state(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        src: &EncodedSource,
    ) -> Result<DecoderState> {
        let h0 = self.bridge.forward(g, store, src.summary)?;
        let layers = (0..self.decoder.cells.len())
            .map(|_| LstmState {
                h: h0,
                c: g.zeros(1, self.decoder.config.hidden_dim),
            })
            .collect();
        Ok(DecoderState { layers })
    }

    /// One decoding step: log-probabilities over the vocabulary (`1 x 43`) and
    /// the next state.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        prev_token: usize,
        state: &DecoderState,
        src: &EncodedSource,
    ) -> Result<(NodeId, DecoderState)> {
        if prev_token >= VOCAB_SIZE {
            return Err(Error::Validation(format!(
                "token {prev_token} outside vocabulary"
            )));
        }
        let emb = g.param(store, &self.decoder.embedding)?;
        let mut x = g.row(emb, prev_token)?;
        let mut layers = Vec::with_capacity(state.layers.len());
        for (cell, &s) in self.decoder.cells.iter().zip(&state.layers) {
            let next = cell.step(g, store, x, s)?;
            x = next.h;
            layers.push(next);
        }
        let alpha = self.attention.weights(g, store, x, src)?;
        let context = self.attention.attend(g, alpha, src)?;
        let joined = g.concat(&[x, context], 1)?;
        let pre = self.decoder.combine.forward(g, store, joined)?;
        let attentional = g.tanh(pre);
        let logits = self.decoder.output.forward(g, store, attentional)?;
        Ok((g.log_softmax(logits), DecoderState { layers }))
    }

    /// Per-step log-probability rows for `sos y_1 .. y_n` inputs under teacher forcing.
    pub fn teacher_forced_rows(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: NodeId,
        text: &[usize],
    ) -> Result<Vec<NodeId>> {
        let src = self.encoder.encode(g, store, x)?;
        let mut state = self.initial_state(g, store, &src)?;
        let mut rows = Vec::with_capacity(text.len() + 1);
        let mut prev = SOS;
        for &tok in text.iter().chain(std::iter::once(&EOS)) {
            let (lp, next) = self.decoder_step(g, store, prev, &state, &src)?;
            rows.push(lp);
            state = next;
            prev = tok;
        }
        Ok(rows)
    }

    /// Summed cross-entropy of `text` followed by end-of-sentence.
    pub fn teacher_forced_loss(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x: NodeId,
        text: &[usize],
    ) -> Result<NodeId> {
        if let Some(&bad) = text.iter().find(|&&t| t >= SOS) {
            return Err(Error::Validation(format!(
                "target token {bad} is a delimiter or out of range"
            )));
        }
        let rows = self.teacher_forced_rows(g, store, x, text)?;
        let mut picks = Vec::with_capacity(rows.len());
        for (row, &tok) in rows.iter().zip(text.iter().chain(std::iter::once(&EOS))) {
            picks.push(g.slice(*row, 0..1, tok..tok + 1)?);
        }
        let all = g.concat(&picks, 1)?;
        let total = g.sum(all);
        Ok(g.scale(total, -1.0))
    }

    /// Beam search over decoder steps. Returns complete hypotheses best first;
    /// if none reached end-of-sentence within `max_len`, the best incomplete
    /// one is returned with `complete == false`.
    ///
    /// The search stops once `beam` hypotheses have finished; length
    /// normalization only changes how the finished ones are ranked.
    pub fn beam_search(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        src: &EncodedSource,
        opts: &BeamOptions,
    ) -> Result<Vec<Hypothesis>> {
        if opts.beam == 0 {
            return Err(Error::Config("beam must be at least 1".into()));
        }
        let max_len = opts.max_len.unwrap_or(4 * src.len).max(1);

        struct Live {
            tokens: Vec<usize>,
            log_score: f64,
            state: DecoderState,
        }
        let finish = |tokens: Vec<usize>, log_score: f64, complete: bool| Hypothesis {
            normalized_score: normalized_score(
                log_score,
                hypothesis_len(&tokens),
                opts.length_alpha,
            ),
            tokens,
            log_score,
            complete,
        };

        let mut live = vec![Live {
            tokens: vec![SOS],
            log_score: 0.0,
            state: self.initial_state(g, store, src)?,
        }];
        let mut finished: Vec<Hypothesis> = Vec::new();

        for _ in 0..max_len {
            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            let mut next_states = Vec::with_capacity(live.len());
            for (bi, hyp) in live.iter().enumerate() {
                let prev = *hyp.tokens.last().expect("starts with sos");
                let (lp, state) = self.decoder_step(g, store, prev, &hyp.state, src)?;
                let row = g.value(lp).data();
                for (tok, &l) in row.iter().enumerate() {
                    if tok != SOS {
                        candidates.push((hyp.log_score + l, bi, tok));
                    }
                }
                next_states.push(state);
            }
            candidates.sort_by(|a, b| match b.0.total_cmp(&a.0) {
                Ordering::Equal => (a.1, a.2).cmp(&(b.1, b.2)),
                o => o,
            });
            let mut next_live = Vec::with_capacity(opts.beam);
            for &(score, bi, tok) in candidates.iter().take(opts.beam) {
                let mut tokens = live[bi].tokens.clone();
                tokens.push(tok);
                if tok == EOS {
                    finished.push(finish(tokens, score, true));
                } else {
                    next_live.push(Live {
                        tokens,
                        log_score: score,
                        state: next_states[bi].clone(),
                    });
                }
            }
            live = next_live;
            if finished.len() >= opts.beam || live.is_empty() {
                break;
            }
        }

        if finished.is_empty() {
            let best = live
                .into_iter()
                .max_by(|a, b| a.log_score.total_cmp(&b.log_score))
                .expect("beam keeps at least one live hypothesis");
            return Ok(vec![finish(best.tokens, best.log_score, false)]);
        }
        rank_hypotheses(&mut finished, opts.length_norm);
        finished.truncate(opts.beam);
        Ok(finished)
    }

    /// Greedy autoregressive decoding: most probable token at every step.
    pub fn greedy(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        src: &EncodedSource,
        max_len: usize,
    ) -> Result<Hypothesis> {
        let mut state = self.initial_state(g, store, src)?;
        let mut tokens = vec![SOS];
        let mut score = 0.0;
        for _ in 0..max_len.max(1) {
            let (lp, next) =
                self.decoder_step(g, store, *tokens.last().expect("non-empty"), &state, src)?;
            let row = g.value(lp).data();
            let mut best = usize::MAX;
            for (tok, &l) in row.iter().enumerate() {
                if tok != SOS && (best == usize::MAX || l > row[best]) {
                    best = tok;
                }
            }
            score += row[best];
            tokens.push(best);
            state = next;
            if best == EOS {
                break;
            }
        }
        let complete = tokens.last() == Some(&EOS);
        Ok(Hypothesis {
            normalized_score: normalized_score(score, hypothesis_len(&tokens), 1.0),
            tokens,
            log_score: score,
            complete,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(input_dim: usize, layers: usize) -> (ParameterStore, AttentionModel) {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = S2sConfig {
            encoder: EncoderConfig {
                input_dim,
                layers,
                hidden_dim: 3,
            },
            decoder: DecoderConfig {
                layers: 2,
                hidden_dim: 4,
                embedding_dim: 5,
            },
        };
        let m = AttentionModel::new(&mut store, &mut rng, "s2s", cfg).unwrap();
        (store, m)
    }

    fn input(t: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(
            t,
            d,
            (0..t * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn pyramid_lengths() {
        let (store, m3) = tiny(4, 3);
        assert_eq!(
            pyramid_encode(&m3.encoder, &store, &input(8, 4, 1))
                .unwrap()
                .states
                .rows(),
            1
        );
        assert_eq!(
            pyramid_encode(&m3.encoder, &store, &input(7, 4, 1))
                .unwrap()
                .states
                .rows(),
            1
        );
        assert_eq!(
            pyramid_encode(&m3.encoder, &store, &input(17, 4, 1))
                .unwrap()
                .states
                .rows(),
            3
        );
        let (store1, m1) = tiny(4, 1);
        let mut g = Graph::new();
        let x = g.leaf(input(8, 4, 1));
        let paired = PyramidEncoder::pair_frames(&mut g, x).unwrap();
        assert_eq!(g.shape(paired), (4, 8));
        let out = pyramid_encode(&m1.encoder, &store1, &input(8, 4, 1)).unwrap();
        assert_eq!(out.states.rows(), 4);
        assert_eq!(out.reduction_factor, 2);
    }

    #[test]
    fn odd_length_pads_with_zero_frame() {
        let (store, m) = tiny(2, 1);
        let x7 = input(7, 2, 3);
        let mut rows: Vec<Vec<f64>> = (0..7).map(|t| x7.row_slice(t).to_vec()).collect();
        rows.push(vec![0.0, 0.0]);
        let x8 = Tensor::from_rows(&rows).unwrap();
        let a = pyramid_encode(&m.encoder, &store, &x7).unwrap();
        let b = pyramid_encode(&m.encoder, &store, &x8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pyramid_len_examples() {
        assert_eq!(pyramid_len(0, 3), 0);
        assert_eq!(pyramid_len(8, 3), 1);
        assert_eq!(pyramid_len(9, 3), 2);
    }

    #[test]
    fn alignment_examples() {
        let w = Tensor::matrix(1, 1, vec![1.0]).unwrap();
        let one = Tensor::matrix(1, 1, vec![0.3]).unwrap();
        assert_eq!(attention_weights(&[2.0], &one, &w).unwrap(), vec![1.0]);

        let equal = Tensor::matrix(3, 1, vec![0.5, 0.5, 0.5]).unwrap();
        for a in attention_weights(&[1.0], &equal, &w).unwrap() {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        // scores h W h_s = ln 2 and 0
        let states = Tensor::matrix(2, 1, vec![2f64.ln(), 0.0]).unwrap();
        let a = attention_weights(&[1.0], &states, &w).unwrap();
        assert!((a[0] - 2.0 / 3.0).abs() < 1e-15 && (a[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn attend_examples() {
        let states = Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(attend(&[0.0, 1.0, 0.0], &states).unwrap(), vec![3.0, 4.0]);
        let same = Tensor::matrix(2, 2, vec![7., 8., 7., 8.]).unwrap();
        assert_eq!(attend(&[0.5, 0.5], &same).unwrap(), vec![7.0, 8.0]);
        assert!(attend(&[1.0], &states).is_err());
    }

    #[test]
    fn decoder_rows_are_distributions() {
        let (store, m) = tiny(4, 2);
        let mut g = Graph::new();
        let x = g.leaf(input(6, 4, 2));
        let src = m.encoder.encode(&mut g, &store, x).unwrap();
        let s0 = m.initial_state(&mut g, &store, &src).unwrap();
        let (lp, _) = m.decoder_step(&mut g, &store, SOS, &s0, &src).unwrap();
        assert_eq!(g.shape(lp), (1, VOCAB_SIZE));
        assert!(crate::autograd::log_sum_exp(g.value(lp).data()).abs() <= 1e-8);
        let (lp2, _) = m.decoder_step(&mut g, &store, SOS, &s0, &src).unwrap();
        assert_eq!(g.value(lp), g.value(lp2));
    }

    #[test]
    fn length_normalization_flips_ranking() {
        let mk = |len: usize, score: f64| {
            let mut tokens = vec![SOS];
            tokens.extend(std::iter::repeat_n(0, len));
            tokens.push(EOS);
            Hypothesis {
                normalized_score: normalized_score(score, hypothesis_len(&tokens), 1.0),
                tokens,
                log_score: score,
                complete: true,
            }
        };
        let mut hyps = vec![mk(1, -1.0), mk(3, -1.8)];
        rank_hypotheses(&mut hyps, false);
        assert_eq!(hypothesis_len(&hyps[0].tokens), 1);
        rank_hypotheses(&mut hyps, true);
        assert_eq!(hypothesis_len(&hyps[0].tokens), 3);
        assert!((hyps[0].normalized_score + 0.6).abs() < 1e-12);
    }

    #[test]
    fn beam_one_is_greedy() {
        let (store, m) = tiny(4, 2);
        let mut g = Graph::new();
        let x = g.leaf(input(10, 4, 5));
        let src = m.encoder.encode(&mut g, &store, x).unwrap();
        let opts = BeamOptions {
            beam: 1,
            max_len: Some(12),
            ..BeamOptions::default()
        };
        let beam = m.beam_search(&mut g, &store, &src, &opts).unwrap();
        let greedy = m.greedy(&mut g, &store, &src, 12).unwrap();
        assert_eq!(beam[0].tokens, greedy.tokens);
        assert!((beam[0].log_score - greedy.log_score).abs() < 1e-12);
        assert_eq!(BeamOptions::default().beam, 5);
    }

    #[test]
    fn beam_results_sorted_and_bounded() {
        let (store, m) = tiny(4, 1);
        let mut g = Graph::new();
        let x = g.leaf(input(6, 4, 9));
        let src = m.encoder.encode(&mut g, &store, x).unwrap();
        for length_norm in [false, true] {
            let opts = BeamOptions {
                beam: 5,
                length_norm,
                max_len: Some(8),
                ..BeamOptions::default()
            };
            let hyps = m.beam_search(&mut g, &store, &src, &opts).unwrap();
            assert!(!hyps.is_empty() && hyps.len() <= 5);
            for h in &hyps {
                assert_eq!(h.tokens[0], SOS);
                assert!(h.log_score <= 0.0);
                if h.complete {
                    assert_eq!(*h.tokens.last().unwrap(), EOS);
                }
            }
            let key = |h: &Hypothesis| {
                if length_norm {
                    h.normalized_score
                } else {
                    h.log_score
                }
            };
            assert!(hyps.windows(2).all(|w| key(&w[0]) >= key(&w[1])));
        }
    }

    #[test]
    fn max_len_without_eos_flags_incomplete() {
        let (mut store, m) = tiny(4, 1);
        // Make end-of-sentence impossible to prefer.
        store
            .value_mut("s2s.decoder.output.bias")
            .unwrap()
            .data_mut()[EOS] = -1e3;
        let mut g = Graph::new();
        let x = g.leaf(input(4, 4, 1));
        let src = m.encoder.encode(&mut g, &store, x).unwrap();
        let opts = BeamOptions {
            beam: 3,
            max_len: Some(3),
            ..BeamOptions::default()
        };
        let hyps = m.beam_search(&mut g, &store, &src, &opts).unwrap();
        assert_eq!(hyps.len(), 1);
        assert!(!hyps[0].complete);
        assert_eq!(hypothesis_len(&hyps[0].tokens), 3);
    }
}
