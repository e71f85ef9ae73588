//! Self-checks run by the command line: finite-difference gradient checks of
//! every differentiable component, and CTC against exhaustive path enumeration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adaptation::{VatConfig, VatMlp};
use crate::autograd::{
    check_gradient, log_sum_exp, GradCheckReport, Graph, NodeId, ParameterStore, Tensor,
};
use crate::ctc::{collapse, ctc_loss, ctc_loss_node, PosteriorLattice};
use crate::error::{Error, Result};
use crate::features::VISUAL_DIM;
use crate::nn::{BiLstmLayer, DenseBridge, LstmCell, LstmLayerConfig, LstmState};
use crate::s2s::{
    Attention, AttentionModel, DecoderConfig, EncodedSource, EncoderConfig, S2sConfig,
};

fn random_tensor<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-scale..scale))
            .collect(),
    )
    .expect("positive dims")
}

/// Reduces a matrix node to a scalar through fixed random weights, so every
/// output entry receives a distinct upstream gradient.
fn project(g: &mut Graph, x: NodeId, weights: &Tensor) -> Result<NodeId> {
    let w = g.leaf(weights.clone());
    let prod = g.mul(x, w)?;
    Ok(g.sum(prod))
}

/// Runs finite-difference checks on every differentiable component at toy
/// sizes. Inputs are registered as parameters so their gradients are checked too.
pub fn gradient_suite(seed: u64, eps: f64, tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // LSTM cell, one step from a non-zero state.
    {
        let mut store = ParameterStore::new();
        let cell = LstmCell::new(&mut store, &mut rng, "cell", 3, 4)?;
        store.insert("x", random_tensor(&mut rng, 1, 3, 1.0))?;
        store.insert("h0", random_tensor(&mut rng, 1, 4, 0.5))?;
        store.insert("c0", random_tensor(&mut rng, 1, 4, 0.5))?;
        let wh = random_tensor(&mut rng, 1, 4, 1.0);
        let wc = random_tensor(&mut rng, 1, 4, 1.0);
        let report = check_gradient(&mut store, eps, tol, |g, s| {
            let x = g.param(s, "x")?;
            let state = LstmState {
                h: g.param(s, "h0")?,
                c: g.param(s, "c0")?,
            };
            let next = cell.step(g, s, x, state)?;
            let a = project(g, next.h, &wh)?;
            let b = project(g, next.c, &wc)?;
            g.add(a, b)
        })?;
        out.push(("lstm cell".to_string(), report));
    }

    // Bidirectional layer over a short sequence, and the same with projection.
    for (label, proj) in [("bi-LSTM layer", None), ("projection", Some(3))] {
        let mut store = ParameterStore::new();
        let cfg = LstmLayerConfig {
            input_dim: 3,
            hidden_dim: 3,
            bidirectional: true,
            projection_dim: proj,
        };
        let layer = BiLstmLayer::new(&mut store, &mut rng, "layer", cfg)?;
        store.insert("x", random_tensor(&mut rng, 4, 3, 1.0))?;
        let w = random_tensor(&mut rng, 4, cfg.output_dim(), 1.0);
        let report = check_gradient(&mut store, eps, tol, |g, s| {
            let x = g.param(s, "x")?;
            let y = layer.forward(g, s, x)?;
            project(g, y, &w)
        })?;
        out.push((label.to_string(), report));
    }

    // Dense bridge.
    {
        let mut store = ParameterStore::new();
        let bridge = DenseBridge::new(&mut store, &mut rng, "bridge", 4, 3)?;
        store.insert("enc", random_tensor(&mut rng, 1, 4, 1.0))?;
        let w = random_tensor(&mut rng, 1, 3, 1.0);
        let report = check_gradient(&mut store, eps, tol, |g, s| {
            let e = g.param(s, "enc")?;
            let y = bridge.forward(g, s, e)?;
            project(g, y, &w)
        })?;
        out.push(("dense bridge".to_string(), report));
    }

    // Attention weights and context vector.
    {
        let mut store = ParameterStore::new();
        let att = Attention::new(&mut store, &mut rng, "att", 3, 4)?;
        store.insert("h_t", random_tensor(&mut rng, 1, 3, 1.0))?;
        store.insert("states", random_tensor(&mut rng, 5, 4, 1.0))?;
        let wa = random_tensor(&mut rng, 1, 5, 1.0);
        let wc = random_tensor(&mut rng, 1, 4, 1.0);
        let report = check_gradient(&mut store, eps, tol, |g, s| {
            let h = g.param(s, "h_t")?;
            let states = g.param(s, "states")?;
            let states_t = g.transpose(states);
            let summary = g.row(states, 0)?;
            let src = EncodedSource {
                states,
                states_t,
                len: 5,
                summary,
            };
            let alpha = att.weights(g, s, h, &src)?;
            let ctx = att.attend(g, alpha, &src)?;
            let a = project(g, alpha, &wa)?;
            let c = project(g, ctx, &wc)?;
            g.add(a, c)
        })?;
        out.push(("attention".to_string(), report));
    }

    // Full teacher-forced S2S loss.
    {
        let mut store = ParameterStore::new();
        let cfg = S2sConfig {
            encoder: EncoderConfig {
                input_dim: 2,
                layers: 2,
                hidden_dim: 2,
            },
            decoder: DecoderConfig {
                layers: 2,
                hidden_dim: 3,
                embedding_dim: 2,
            },
        };
        let model = AttentionModel::new(&mut store, &mut rng, "s2s", cfg)?;
        // the default init is small enough that deep paths carry gradients
        // near finite-difference noise
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in names {
            for v in store.value_mut(&name)?.data_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
        store.insert("x", random_tensor(&mut rng, 5, 2, 1.0))?;
        let target = [3usize, 40, 7];
        let report = check_gradient(&mut store, eps, tol, |g, s| {
            let x = g.param(s, "x")?;
            model.teacher_forced_loss(g, s, x, &target)
        })?;
        out.push(("s2s teacher-forced loss".to_string(), report));
    }

    // CTC loss with respect to its logits.
    {
        let mut store = ParameterStore::new();
        store.insert("logits", random_tensor(&mut rng, 6, 5, 2.0))?;
        let target = [1usize, 3, 3];
        let report = check_gradient(&mut store, eps, tol, |g, s| {
            let l = g.param(s, "logits")?;
            ctc_loss_node(g, l, &target)
        })?;
        out.push(("ctc gradient".to_string(), report));
    }

    // VAT fusion, with a non-zero output layer so every path carries gradient.
    {
        let mut store = ParameterStore::new();
        let cfg = VatConfig {
            mlp_hidden: vec![3],
            output_dim: 4,
        };
        let mlp = VatMlp::new(&mut store, &mut rng, "vat", cfg)?;
        *store.value_mut("vat.output.weight")? = random_tensor(&mut rng, 3, 4, 0.5);
        store.insert("audio", random_tensor(&mut rng, 3, 4, 1.0))?;
        store.insert("visual", random_tensor(&mut rng, 1, VISUAL_DIM, 0.3))?;
        let w = random_tensor(&mut rng, 3, 4, 1.0);
        let report = check_gradient(&mut store, eps, tol, |g, s| {
            let a = g.param(s, "audio")?;
            let v = g.param(s, "visual")?;
            let y = mlp.fuse(g, s, a, v)?;
            project(g, y, &w)
        })?;
        out.push(("vat fusion".to_string(), report));
    }
    Ok(out)
}

/// Lattice with rows drawn as softmax of uniform random logits.
pub fn random_lattice<R: Rng + ?Sized>(
    rng: &mut R,
    frames: usize,
    labels: usize,
) -> PosteriorLattice {
    let mut data = Vec::with_capacity(frames * labels);
    for _ in 0..frames {
        let row: Vec<f64> = (0..labels).map(|_| rng.random_range(-3.0..3.0)).collect();
        let lse = log_sum_exp(&row);
        data.extend(row.iter().map(|v| v - lse));
    }
    PosteriorLattice::new(Tensor::matrix(frames, labels, data).expect("positive dims"))
        .expect("normalized rows")
}

/// Probability of `target` as the sum over all `labels^frames` paths that collapse to it.
pub fn enumerate_paths(lattice: &PosteriorLattice, target: &[usize]) -> f64 {
    let (t_len, k) = (lattice.frames(), lattice.labels());
    let mut path = vec![0usize; t_len];
    let mut total = 0.0;
    loop {
        if collapse(&path) == target {
            total += (0..t_len)
                .map(|t| lattice.log_prob(t, path[t]).exp())
                .product::<f64>();
        }
        // odometer increment
        let mut i = 0;
        loop {
            if i == t_len {
                return total;
            }
            path[i] += 1;
            if path[i] < k {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OracleSummary {
    pub instances: usize,
    pub infeasible: usize,
    pub max_rel_err: f64,
    pub failures: usize,
}

/// Compares `exp(-ctc_loss)` with exhaustive enumeration on random instances
/// with at most 8 frames, 3 non-blank labels and 4 target tokens.
pub fn ctc_oracle(instances: usize, seed: u64, tol: f64) -> Result<OracleSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = OracleSummary {
        instances,
        infeasible: 0,
        max_rel_err: 0.0,
        failures: 0,
    };
    for _ in 0..instances {
        let frames = rng.random_range(1..=8);
        let alphabet = rng.random_range(1..=3);
        let target_len = rng.random_range(0..=4);
        let target: Vec<usize> = (0..target_len)
            .map(|_| rng.random_range(1..=alphabet))
            .collect();
        let lattice = random_lattice(&mut rng, frames, alphabet + 1);
        let brute = enumerate_paths(&lattice, &target);
        match ctc_loss(&lattice, &target) {
            Ok(loss) => {
                let p = (-loss).exp();
                let err = (p - brute).abs() / brute.abs().max(f64::MIN_POSITIVE);
                summary.max_rel_err = summary.max_rel_err.max(err);
                if !(err <= tol) {
                    summary.failures += 1;
                }
            }
            Err(Error::Infeasible { .. }) => {
                summary.infeasible += 1;
                if brute != 0.0 {
                    summary.failures += 1;
                }
            }
            Err(e) => return Err(e),
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for (name, report) in gradient_suite(1, 1e-5, 1e-4).unwrap() {
            assert!(report.passed(), "{name}: {}", report.max_rel_err());
        }
    }

    #[test]
    fn oracle_agrees() {
        let s = ctc_oracle(40, 2, 1e-10).unwrap();
        assert_eq!(s.failures, 0, "{s:?}");
    }

    #[test]
    fn enumeration_matches_hand_count() {
        // two frames, labels {blank, a}: paths collapsing to "a" are aa, a-, -a
        let p = [[0.4f64, 0.6], [0.7, 0.3]];
        let lp: Vec<f64> = p.iter().flatten().map(|v| v.ln()).collect();
        let lat = PosteriorLattice::new(Tensor::matrix(2, 2, lp).unwrap()).unwrap();
        let expect = 0.6 * 0.3 + 0.6 * 0.7 + 0.4 * 0.3;
        assert!((enumerate_paths(&lat, &[1]) - expect).abs() < 1e-15);
        assert!((enumerate_paths(&lat, &[]) - 0.28).abs() < 1e-15);
    }
}
