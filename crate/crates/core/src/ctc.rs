//! Connectionist temporal classification: collapse mapping, loss and gradient
//! by forward-backward in log space, the stacked bi-LSTM acoustic model, and
//! greedy decoding.
//!
//! Labels here live in the extended alphabet with the blank at index 0.

use rand::Rng;

use crate::autograd::{log_add, log_sum_exp, Graph, NodeId, ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::hypothesis::Hypothesis;
use crate::nn::{BiLstmLayer, Linear, LstmLayerConfig};
use crate::vocab::{CTC_ALPHABET_SIZE, CTC_BLANK};

const NEG_INF: f64 = f64::NEG_INFINITY;

/// Frame-wise log posteriors over the extended alphabet.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorLattice {
    log_probs: Tensor,
}

impl PosteriorLattice {
    pub const NORMALIZATION_TOL: f64 = 1e-8;

    /// Wraps log posteriors, checking every row log-sum-exps to zero.
    pub fn new(log_probs: Tensor) -> Result<Self> {
        for t in 0..log_probs.rows() {
            let lse = log_sum_exp(log_probs.row_slice(t));
            if !(lse.abs() <= Self::NORMALIZATION_TOL) {
                return Err(Error::Validation(format!(
                    "lattice row {t} log-sum-exps to {lse}, not 0"
                )));
            }
        }
        Ok(Self { log_probs })
    }

    pub fn from_logits(logits: &Tensor) -> Self {
        let mut lp = logits.clone();
        let c = lp.cols();
        for row in lp.data_mut().chunks_mut(c) {
            let lse = log_sum_exp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        Self { log_probs: lp }
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn labels(&self) -> usize {
        self.log_probs.cols()
    }

    pub fn log_prob(&self, t: usize, label: usize) -> f64 {
        self.log_probs.get(t, label)
    }

    pub fn row(&self, t: usize) -> &[f64] {
        self.log_probs.row_slice(t)
    }

    pub fn as_tensor(&self) -> &Tensor {
        &self.log_probs
    }
}

/// Merges consecutive repeats, then removes blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path {
        if Some(l) != prev && l != CTC_BLANK {
            out.push(l);
        }
        prev = Some(l);
    }
    out
}

/// Minimum number of frames able to emit `target`: one per label plus one
/// separating blank per adjacent repeat.
pub fn required_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_target(lattice: &PosteriorLattice, target: &[usize]) -> Result<()> {
    if let Some(&bad) = target
        .iter()
        .find(|&&l| l == CTC_BLANK || l >= lattice.labels())
    {
        return Err(Error::Validation(format!(
            "target label {bad} is blank or outside the {}-label alphabet",
            lattice.labels()
        )));
    }
    let required = required_frames(target);
    if lattice.frames() < required {
        return Err(Error::Infeasible {
            frames: lattice.frames(),
            target_len: target.len(),
            required,
        });
    }
    Ok(())
}

/// Blank-interleaved target `φ z1 φ z2 ... φ`.
fn extended(target: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(CTC_BLANK);
    for &l in target {
        ext.push(l);
        ext.push(CTC_BLANK);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != CTC_BLANK && ext[s] != ext[s - 2]
}

struct ForwardBackward {
    ext: Vec<usize>,
    alpha: Vec<f64>,
    beta: Vec<f64>,
    log_likelihood: f64,
}

fn forward_backward(
    lattice: &PosteriorLattice,
    target: &[usize],
    with_beta: bool,
) -> Result<ForwardBackward> {
    check_target(lattice, target)?;
    let ext = extended(target);
    let (t_len, s_len) = (lattice.frames(), ext.len());
    let mut alpha = vec![NEG_INF; t_len * s_len];
    alpha[0] = lattice.log_prob(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lattice.log_prob(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let mut acc = prev[s];
            if s >= 1 {
                acc = log_add(acc, prev[s - 1]);
            }
            if can_skip(&ext, s) {
                acc = log_add(acc, prev[s - 2]);
            }
            cur[s] = if acc == NEG_INF {
                NEG_INF
            } else {
                acc + lattice.log_prob(t, ext[s])
            };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let log_likelihood = if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };

    let mut beta = Vec::new();
    if with_beta {
        // beta excludes the emission at its own frame.
        beta = vec![NEG_INF; t_len * s_len];
        beta[(t_len - 1) * s_len + s_len - 1] = 0.0;
        if s_len > 1 {
            beta[(t_len - 1) * s_len + s_len - 2] = 0.0;
        }
        for t in (0..t_len - 1).rev() {
            for s in 0..s_len {
                let next =
                    |s2: usize| beta[(t + 1) * s_len + s2] + lattice.log_prob(t + 1, ext[s2]);
                let mut acc = next(s);
                if s + 1 < s_len {
                    acc = log_add(acc, next(s + 1));
                }
                if s + 2 < s_len && can_skip(&ext, s + 2) {
                    acc = log_add(acc, next(s + 2));
                }
                beta[t * s_len + s] = acc;
            }
        }
    }
    Ok(ForwardBackward {
        ext,
        alpha,
        beta,
        log_likelihood,
    })
}

/// Negative log-likelihood of `target` summed over all alignments.
pub fn ctc_loss(lattice: &PosteriorLattice, target: &[usize]) -> Result<f64> {
    let fb = forward_backward(lattice, target, false)?;
    Ok(-fb.log_likelihood)
}

/// Loss and its gradient w.r.t. the pre-softmax logits that produced `lattice`.
pub fn ctc_loss_and_grad(lattice: &PosteriorLattice, target: &[usize]) -> Result<(f64, Tensor)> {
    let fb = forward_backward(lattice, target, true)?;
    let (t_len, k) = (lattice.frames(), lattice.labels());
    let s_len = fb.ext.len();
    let mut grad = vec![0.0; t_len * k];
    let mut occupancy = vec![NEG_INF; k];
    for t in 0..t_len {
        occupancy.fill(NEG_INF);
        for s in 0..s_len {
            let v = fb.alpha[t * s_len + s] + fb.beta[t * s_len + s] - fb.log_likelihood;
            occupancy[fb.ext[s]] = log_add(occupancy[fb.ext[s]], v);
        }
        let row = &mut grad[t * k..(t + 1) * k];
        for (label, g) in row.iter_mut().enumerate() {
            *g = lattice.log_prob(t, label).exp() - occupancy[label].exp();
        }
    }
    Ok((-fb.log_likelihood, Tensor::matrix(t_len, k, grad)?))
}

pub fn ctc_grad(lattice: &PosteriorLattice, target: &[usize]) -> Result<Tensor> {
    ctc_loss_and_grad(lattice, target).map(|(_, g)| g)
}

/// Adds a CTC loss node on top of `logits` (`T x |L'|`).
pub fn ctc_loss_node(g: &mut Graph, logits: NodeId, target: &[usize]) -> Result<NodeId> {
    let lattice = PosteriorLattice::from_logits(g.value(logits));
    let (loss, grad) = ctc_loss_and_grad(&lattice, target)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("CTC loss".into()));
    }
    g.injected_scalar(logits, loss, grad)
}

/// Best label per frame, lowest index on ties.
pub fn best_path(lattice: &PosteriorLattice) -> (Vec<usize>, f64) {
    let mut score = 0.0;
    let path = (0..lattice.frames())
        .map(|t| {
            let row = lattice.row(t);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = k;
                }
            }
            score += row[best];
            best
        })
        .collect();
    (path, score)
}

/// Greedy decoding: per-frame argmax, then collapse. Tokens are returned in
/// vocabulary numbering (label − 1).
pub fn greedy_decode(lattice: &PosteriorLattice) -> Hypothesis {
    let (path, score) = best_path(lattice);
    let tokens = collapse(&path).into_iter().map(|l| l - 1).collect();
    Hypothesis {
        tokens,
        log_score: score,
        normalized_score: score,
        complete: true,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AcousticModelConfig {
    pub input_dim: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub projection_dim: Option<usize>,
}

impl AcousticModelConfig {
    /// Five bi-LSTM layers of 200 cells with 100-unit projections.
    pub fn full(input_dim: usize) -> Self {
        Self {
            input_dim,
            layers: 5,
            hidden_dim: 200,
            projection_dim: Some(100),
        }
    }
}

/// Stacked bi-LSTM with projections and a softmax over the extended alphabet.
#[derive(Clone, Debug)]
pub struct AcousticModel {
    pub config: AcousticModelConfig,
    pub layers: Vec<BiLstmLayer>,
    pub output: Linear,
}

impl AcousticModel {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        prefix: &str,
        config: AcousticModelConfig,
    ) -> Result<Self> {
        if config.layers == 0 {
            return Err(Error::Config(
                "acoustic model needs at least one layer".into(),
            ));
        }
        let mut layers = Vec::with_capacity(config.layers);
        let mut dim = config.input_dim;
        for i in 0..config.layers {
            let lc = LstmLayerConfig {
                input_dim: dim,
                hidden_dim: config.hidden_dim,
                bidirectional: true,
                projection_dim: config.projection_dim,
            };
            layers.push(BiLstmLayer::new(
                store,
                rng,
                &format!("{prefix}.layer{i}"),
                lc,
            )?);
            dim = lc.output_dim();
        }
        let output = Linear::new(
            store,
            rng,
            &format!("{prefix}.output"),
            dim,
            CTC_ALPHABET_SIZE,
            true,
        )?;
        Ok(Self {
            config,
            layers,
            output,
        })
    }

    /// Pre-softmax scores, one row per input frame.
    pub fn logits(&self, g: &mut Graph, store: &ParameterStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, store, h)?;
        }
        self.output.forward(g, store, h)
    }

    pub fn am_forward(&self, store: &ParameterStore, x: &Tensor) -> Result<PosteriorLattice> {
        let mut g = Graph::new();
        let xn = g.leaf(x.clone());
        let logits = self.logits(&mut g, store, xn)?;
        let lp = g.log_softmax(logits);
        Ok(PosteriorLattice {
            log_probs: g.value(lp).clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform(t: usize, k: usize) -> PosteriorLattice {
        PosteriorLattice::new(Tensor::filled(t, k, -(k as f64).ln())).unwrap()
    }

    #[test]
    fn collapse_examples() {
        let (a, b) = (1, 2);
        assert_eq!(collapse(&[a, 0, a, b, 0]), vec![a, a, b]);
        assert_eq!(collapse(&[0, 0, 0]), Vec::<usize>::new());
        assert_eq!(collapse(&[a, a, b]), vec![a, b]);
    }

    #[test]
    fn two_frame_single_label() {
        let lat = uniform(2, 2);
        assert!((ctc_loss(&lat, &[1]).unwrap() - (-(0.75f64).ln())).abs() < 1e-12);
        assert!((ctc_loss(&lat, &[]).unwrap() - (-(0.25f64).ln())).abs() < 1e-12);
        assert!((ctc_loss(&lat, &[1]).unwrap() - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn repeat_needs_separating_blank() {
        let lat = uniform(2, 2);
        let err = ctc_loss(&lat, &[1, 1]).unwrap_err();
        assert!(matches!(
            err,
            Error::Infeasible {
                required: 3,
                frames: 2,
                ..
            }
        ));
        assert!(ctc_loss(&uniform(3, 2), &[1, 1]).unwrap().is_finite());
    }

    #[test]
    fn single_frame_gradient() {
        let logits = Tensor::row(vec![0.3, -0.2]);
        let lat = PosteriorLattice::from_logits(&logits);
        let g = ctc_grad(&lat, &[1]).unwrap();
        let p_a = lat.log_prob(0, 1).exp();
        let p_blank = lat.log_prob(0, 0).exp();
        assert!((g.get(0, 1) - (p_a - 1.0)).abs() < 1e-14);
        assert!((g.get(0, 0) - p_blank).abs() < 1e-14);
    }

    #[test]
    fn gradient_rows_sum_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logits =
            Tensor::matrix(7, 4, (0..28).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let lat = PosteriorLattice::from_logits(&logits);
        let g = ctc_grad(&lat, &[1, 3, 3]).unwrap();
        for t in 0..7 {
            assert!(g.row_slice(t).iter().sum::<f64>().abs() <= 1e-10);
        }
    }

    #[test]
    fn trailing_certain_blank_keeps_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits =
            Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let lat = PosteriorLattice::from_logits(&logits);
        let mut rows: Vec<Vec<f64>> = (0..4).map(|t| lat.row(t).to_vec()).collect();
        rows.push(vec![0.0, NEG_INF, NEG_INF]);
        let extended = PosteriorLattice::new(Tensor::from_rows(&rows).unwrap()).unwrap();
        for target in [vec![1], vec![1, 2], vec![2, 2], vec![]] {
            let a = ctc_loss(&lat, &target).unwrap();
            let b = ctc_loss(&extended, &target).unwrap();
            assert!((a - b).abs() < 1e-12, "{target:?}: {a} vs {b}");
        }
    }

    #[test]
    fn lattice_rejects_unnormalized_rows() {
        assert!(PosteriorLattice::new(Tensor::filled(2, 2, 0.0)).is_err());
    }

    #[test]
    fn greedy_examples() {
        let lp = |best: &[usize]| {
            let rows: Vec<Vec<f64>> = best
                .iter()
                .map(|&b| {
                    let mut r = vec![0.1f64.ln(); 3];
                    r[b] = 0.8f64.ln();
                    r
                })
                .collect();
            PosteriorLattice::new(Tensor::from_rows(&rows).unwrap()).unwrap()
        };
        // labels: a=1, b=2 -> tokens 0, 1
        assert_eq!(greedy_decode(&lp(&[1, 1, 0, 2])).tokens, vec![0, 1]);
        assert!(greedy_decode(&lp(&[0, 0, 0])).tokens.is_empty());
        let tie = PosteriorLattice::new(Tensor::row(vec![0.5f64.ln(), 0.5f64.ln()])).unwrap();
        assert_eq!(best_path(&tie).0, vec![0]);
        let h = greedy_decode(&lp(&[1, 2]));
        assert!((h.log_score - 2.0 * 0.8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn acoustic_model_shapes() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = AcousticModelConfig {
            input_dim: 6,
            layers: 2,
            hidden_dim: 5,
            projection_dim: Some(4),
        };
        let am = AcousticModel::new(&mut store, &mut rng, "am", cfg).unwrap();
        let x =
            Tensor::matrix(9, 6, (0..54).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let lat = am.am_forward(&store, &x).unwrap();
        assert_eq!(lat.frames(), 9);
        assert_eq!(lat.labels(), CTC_ALPHABET_SIZE);
        for t in 0..9 {
            assert!(log_sum_exp(lat.row(t)).abs() <= 1e-8);
        }
        assert!(PosteriorLattice::new(lat.as_tensor().clone()).is_ok());
    }

    #[test]
    fn full_architecture_dims() {
        let cfg = AcousticModelConfig::full(120);
        assert_eq!(
            (cfg.layers, cfg.hidden_dim, cfg.projection_dim),
            (5, 200, Some(100))
        );
    }
}
