//! Recurrent and feed-forward building blocks shared by both model families.
//!
//! Layers hold parameter *names*; values live in a [`ParameterStore`] and are
//! bound into a [`Graph`] on use. Gate layout inside LSTM weight matrices is
//! `[input, forget, output, candidate]`.

use rand::Rng;

use crate::autograd::{Graph, NodeId, ParameterStore, Tensor};
use crate::error::{Error, Result};

pub const FORGET_BIAS: f64 = 1.0;

/// Glorot-uniform `rows x cols` matrix.
pub fn glorot_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

fn check_cols(g: &Graph, x: NodeId, expected: usize, what: &str) -> Result<()> {
    let (_, c) = g.shape(x);
    if c != expected {
        return Err(Error::Dimension {
            what: what.to_string(),
            expected,
            got: c,
        });
    }
    Ok(())
}

/// Affine map `x W + b` applied row-wise.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: String,
    pub bias: Option<String>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        output_dim: usize,
        with_bias: bool,
    ) -> Result<Self> {
        let weight = format!("{name}.weight");
        store.insert(&weight, glorot_uniform(rng, input_dim, output_dim))?;
        let bias = if with_bias {
            let b = format!("{name}.bias");
            store.insert(&b, Tensor::zeros(1, output_dim))?;
            Some(b)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            input_dim,
            output_dim,
        })
    }

    /// Overwrites the weights (and bias) with zeros.
    pub fn zero(&self, store: &mut ParameterStore) -> Result<()> {
        store.value_mut(&self.weight)?.fill(0.0);
        if let Some(b) = &self.bias {
            store.value_mut(b)?.fill(0.0);
        }
        Ok(())
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<NodeId> {
        check_cols(g, x, self.input_dim, &self.weight)?;
        let w = g.param(store, &self.weight)?;
        let y = g.matmul(x, w)?;
        match &self.bias {
            None => Ok(y),
            Some(b) => {
                let b = g.param(store, b)?;
                let (rows, _) = g.shape(y);
                let b = if rows == 1 {
                    b
                } else {
                    g.broadcast_rows(b, rows)?
                };
                g.add(y, b)
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: NodeId,
    pub c: NodeId,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden_dim: usize) -> Self {
        Self {
            h: g.zeros(1, hidden_dim),
            c: g.zeros(1, hidden_dim),
        }
    }
}

/// Single-direction LSTM cell.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_input: String,
    pub w_hidden: String,
    pub bias: String,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl LstmCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
    ) -> Result<Self> {
        let cell = Self {
            w_input: format!("{name}.w_input"),
            w_hidden: format!("{name}.w_hidden"),
            bias: format!("{name}.bias"),
            input_dim,
            hidden_dim,
        };
        store.insert(
            &cell.w_input,
            glorot_uniform(rng, input_dim, 4 * hidden_dim),
        )?;
        store.insert(
            &cell.w_hidden,
            glorot_uniform(rng, hidden_dim, 4 * hidden_dim),
        )?;
        let mut bias = Tensor::zeros(1, 4 * hidden_dim);
        bias.data_mut()[hidden_dim..2 * hidden_dim].fill(FORGET_BIAS);
        store.insert(&cell.bias, bias)?;
        Ok(cell)
    }

    /// One recurrence step on a `1 x input_dim` frame.
    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        x_t: NodeId,
        state: LstmState,
    ) -> Result<LstmState> {
        check_cols(g, x_t, self.input_dim, &self.w_input)?;
        let w_in = g.param(store, &self.w_input)?;
        let b = g.param(store, &self.bias)?;
        let xw = g.matmul(x_t, w_in)?;
        let pre = g.add(xw, b)?;
        let w_h = g.param(store, &self.w_hidden)?;
        self.step_from_input_gates(g, w_h, pre, state)
    }

    /// Recurrence given the input contribution `x W_input + b` of one frame.
    fn step_from_input_gates(
        &self,
        g: &mut Graph,
        w_hidden: NodeId,
        input_gates: NodeId,
        state: LstmState,
    ) -> Result<LstmState> {
        let h = self.hidden_dim;
        let rec = g.matmul(state.h, w_hidden)?;
        let gates = g.add(input_gates, rec)?;
        let sig_pre = g.cols(gates, 0..3 * h)?;
        let sig = g.sigmoid(sig_pre);
        let cand_pre = g.cols(gates, 3 * h..4 * h)?;
        let cand = g.tanh(cand_pre);
        let i = g.cols(sig, 0..h)?;
        let f = g.cols(sig, h..2 * h)?;
        let o = g.cols(sig, 2 * h..3 * h)?;
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cand)?;
        let c = g.add(keep, write)?;
        let c_act = g.tanh(c);
        let h = g.mul(o, c_act)?;
        Ok(LstmState { h, c })
    }

    /// Runs over all rows of `xs` (`T x input_dim`) from a given start state,
    /// returning the state after each frame in time order.
    pub fn run_from(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        xs: NodeId,
        reverse: bool,
        init: LstmState,
    ) -> Result<Vec<LstmState>> {
        check_cols(g, xs, self.input_dim, &self.w_input)?;
        let (t_len, _) = g.shape(xs);
        let w_in = g.param(store, &self.w_input)?;
        let w_h = g.param(store, &self.w_hidden)?;
        let b = g.param(store, &self.bias)?;
        let xw = g.matmul(xs, w_in)?;
        let bb = g.broadcast_rows(b, t_len)?;
        let pre = g.add(xw, bb)?;
        let mut states = Vec::with_capacity(t_len);
        let mut state = init;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t_len).rev())
        } else {
            Box::new(0..t_len)
        };
        for t in order {
            let row = g.row(pre, t)?;
            state = self.step_from_input_gates(g, w_h, row, state)?;
            states.push(state);
        }
        if reverse {
            states.reverse();
        }
        Ok(states)
    }

    pub fn run(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        xs: NodeId,
        reverse: bool,
    ) -> Result<Vec<LstmState>> {
        let init = LstmState::zeros(g, self.hidden_dim);
        self.run_from(g, store, xs, reverse, init)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmLayerConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub bidirectional: bool,
    pub projection_dim: Option<usize>,
}

impl LstmLayerConfig {
    pub fn directions(&self) -> usize {
        if self.bidirectional {
            2
        } else {
            1
        }
    }

    pub fn output_dim(&self) -> usize {
        self.projection_dim
            .unwrap_or(self.hidden_dim * self.directions())
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("LSTM dims must be positive".into()));
        }
        if let Some(p) = self.projection_dim {
            if p == 0 || p >= self.hidden_dim * self.directions() {
                return Err(Error::Config(format!(
                    "projection {p} must be in 1..{}",
                    self.hidden_dim * self.directions()
                )));
            }
        }
        Ok(())
    }
}

/// Per-utterance time-major matrices of equal feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub tensors: Vec<Tensor>,
    pub lengths: Vec<usize>,
}

impl SequenceBatch {
    pub fn new(tensors: Vec<Tensor>) -> Result<Self> {
        if let Some(first) = tensors.first() {
            if let Some(bad) = tensors.iter().find(|t| t.cols() != first.cols()) {
                return Err(Error::Dimension {
                    what: "sequence batch feature dim".into(),
                    expected: first.cols(),
                    got: bad.cols(),
                });
            }
        }
        let lengths = tensors.iter().map(Tensor::rows).collect();
        Ok(Self { tensors, lengths })
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.tensors.first().map(Tensor::cols)
    }
}

/// (Bi)directional LSTM layer with optional linear projection.
#[derive(Clone, Debug)]
pub struct BiLstmLayer {
    pub config: LstmLayerConfig,
    pub forward_cell: LstmCell,
    pub backward_cell: Option<LstmCell>,
    pub projection: Option<Linear>,
}

impl BiLstmLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        config: LstmLayerConfig,
    ) -> Result<Self> {
        config.validate()?;
        let forward_cell = LstmCell::new(
            store,
            rng,
            &format!("{name}.fwd"),
            config.input_dim,
            config.hidden_dim,
        )?;
        let backward_cell = if config.bidirectional {
            Some(LstmCell::new(
                store,
                rng,
                &format!("{name}.bwd"),
                config.input_dim,
                config.hidden_dim,
            )?)
        } else {
            None
        };
        let projection = match config.projection_dim {
            Some(p) => Some(Linear::new(
                store,
                rng,
                &format!("{name}.proj"),
                config.hidden_dim * config.directions(),
                p,
                true,
            )?),
            None => None,
        };
        Ok(Self {
            config,
            forward_cell,
            backward_cell,
            projection,
        })
    }

    /// Runs both directions and concatenates per frame, before projection.
    /// Also returns the final state of each direction.
    pub fn forward_states(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        xs: NodeId,
    ) -> Result<(NodeId, Vec<LstmState>)> {
        check_cols(g, xs, self.config.input_dim, "bi-LSTM input")?;
        let fwd = self.forward_cell.run(g, store, xs, false)?;
        let mut finals = vec![*fwd.last().expect("non-empty")];
        let fwd_h: Vec<NodeId> = fwd.iter().map(|s| s.h).collect();
        let fwd_cat = g.concat(&fwd_h, 0)?;
        let out = match &self.backward_cell {
            None => fwd_cat,
            Some(cell) => {
                let bwd = cell.run(g, store, xs, true)?;
                finals.push(bwd[0]);
                let bwd_h: Vec<NodeId> = bwd.iter().map(|s| s.h).collect();
                let bwd_cat = g.concat(&bwd_h, 0)?;
                g.concat(&[fwd_cat, bwd_cat], 1)?
            }
        };
        Ok((out, finals))
    }

    pub fn forward(&self, g: &mut Graph, store: &ParameterStore, xs: NodeId) -> Result<NodeId> {
        let (out, _) = self.forward_states(g, store, xs)?;
        match &self.projection {
            Some(p) => p.forward(g, store, out),
            None => Ok(out),
        }
    }

    /// Applies the layer to every utterance at its true length.
    pub fn forward_batch(
        &self,
        store: &ParameterStore,
        batch: &SequenceBatch,
    ) -> Result<SequenceBatch> {
        let mut out = Vec::with_capacity(batch.tensors.len());
        for t in &batch.tensors {
            let mut g = Graph::new();
            let x = g.leaf(t.clone());
            let y = self.forward(&mut g, store, x)?;
            out.push(g.value(y).clone());
        }
        SequenceBatch::new(out)
    }
}

/// `tanh(x W + b)` between encoder and decoder states.
#[derive(Clone, Debug)]
pub struct DenseBridge {
    pub linear: Linear,
}

impl DenseBridge {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        output_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, rng, name, input_dim, output_dim, true)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.linear.output_dim
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParameterStore,
        enc_final: NodeId,
    ) -> Result<NodeId> {
        let a = self.linear.forward(g, store, enc_final)?;
        Ok(g.tanh(a))
    }
}
