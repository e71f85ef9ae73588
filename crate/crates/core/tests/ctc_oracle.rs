//! CTC against independent references: exhaustive path enumeration for the
//! loss, central differences for the gradient.

use avsr_core::autograd::{log_sum_exp, Tensor};
use avsr_core::ctc::{
    collapse, ctc_grad, ctc_loss, greedy_decode, required_frames, PosteriorLattice,
};
use avsr_core::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Written out again here so the oracle shares no code with the library.
fn reduce(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

fn brute_force(probs: &[Vec<f64>], target: &[usize]) -> f64 {
    fn rec(probs: &[Vec<f64>], t: usize, path: &mut Vec<usize>, target: &[usize]) -> f64 {
        if t == probs.len() {
            return if reduce(path) == target {
                path.iter().enumerate().map(|(i, &k)| probs[i][k]).product()
            } else {
                0.0
            };
        }
        let mut total = 0.0;
        for k in 0..probs[t].len() {
            path.push(k);
            total += rec(probs, t + 1, path, target);
            path.pop();
        }
        total
    }
    rec(probs, 0, &mut Vec::new(), target)
}

fn random_logits(rng: &mut ChaCha8Rng, frames: usize, labels: usize) -> Vec<Vec<f64>> {
    (0..frames)
        .map(|_| (0..labels).map(|_| rng.random_range(-3.0..3.0)).collect())
        .collect()
}

fn lattice(logits: &[Vec<f64>]) -> (PosteriorLattice, Vec<Vec<f64>>) {
    let mut lp = Vec::new();
    let mut probs = Vec::new();
    for row in logits {
        let z = log_sum_exp(row);
        lp.extend(row.iter().map(|v| v - z));
        probs.push(row.iter().map(|v| (v - z).exp()).collect());
    }
    let t = Tensor::matrix(logits.len(), logits[0].len(), lp).unwrap();
    (PosteriorLattice::new(t).unwrap(), probs)
}

#[test]
fn loss_matches_enumeration_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for _ in 0..200 {
        let frames = rng.random_range(1..=8);
        let alphabet = rng.random_range(1..=3);
        let len = rng.random_range(0..=4);
        let target: Vec<usize> = (0..len).map(|_| rng.random_range(1..=alphabet)).collect();
        let (lat, probs) = lattice(&random_logits(&mut rng, frames, alphabet + 1));
        let expect = brute_force(&probs, &target);
        match ctc_loss(&lat, &target) {
            Ok(loss) => {
                let got = (-loss).exp();
                assert!(
                    (got - expect).abs() <= 1e-10 * expect,
                    "T={frames} z={target:?}: {got} vs {expect}"
                );
                checked += 1;
            }
            Err(Error::Infeasible { .. }) => assert_eq!(expect, 0.0, "z={target:?} T={frames}"),
            Err(e) => panic!("{e}"),
        }
    }
    assert!(checked > 100);
}

#[test]
fn repeated_label_needs_separating_blank() {
    // "aa" has no valid path over two frames; over three the only one is a-a
    let logits = vec![vec![0.2f64.ln(), 0.8f64.ln()]; 3];
    let (two, probs) = lattice(&logits[..2]);
    assert!(matches!(
        ctc_loss(&two, &[1, 1]),
        Err(Error::Infeasible { required: 3, .. })
    ));
    assert_eq!(brute_force(&probs, &[1, 1]), 0.0);
    let (three, _) = lattice(&logits);
    let expect = 0.8 * 0.2 * 0.8;
    assert!(((-ctc_loss(&three, &[1, 1]).unwrap()).exp() - expect).abs() < 1e-14);
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let target = [1, 3, 2];
        let mut logits = random_logits(&mut rng, 6, 4);
        let grad = ctc_grad(&lattice(&logits).0, &target).unwrap();
        let eps = 1e-5;
        for t in 0..6 {
            for k in 0..4 {
                let orig = logits[t][k];
                logits[t][k] = orig + eps;
                let plus = ctc_loss(&lattice(&logits).0, &target).unwrap();
                logits[t][k] = orig - eps;
                let minus = ctc_loss(&lattice(&logits).0, &target).unwrap();
                logits[t][k] = orig;
                let numeric = (plus - minus) / (2.0 * eps);
                let analytic = grad.get(t, k);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                assert!(rel <= 1e-6, "({t},{k}): {analytic} vs {numeric}");
            }
        }
    }
}

#[test]
fn greedy_breaks_ties_toward_lowest_label() {
    let lp = vec![(0.5f64).ln(); 4];
    let lat = PosteriorLattice::new(Tensor::matrix(2, 2, lp).unwrap()).unwrap();
    // blank wins every tie, so nothing is emitted
    assert!(greedy_decode(&lat).tokens.is_empty());
}

proptest! {
    #[test]
    fn collapse_is_idempotent_on_reembedded_output(path in prop::collection::vec(0usize..5, 0..20)) {
        let once = collapse(&path);
        prop_assert_eq!(&once, &reduce(&path));
        // a label sequence embedded as a path with blanks between labels
        let embedded: Vec<usize> = once.iter().flat_map(|&l| [l, 0]).collect();
        prop_assert_eq!(collapse(&embedded), once.clone());
        // re-collapsing the bare labels only merges adjacent repeats
        if once.windows(2).all(|w| w[0] != w[1]) {
            prop_assert_eq!(collapse(&once), once);
        }
    }

    #[test]
    fn probability_bounded_and_feasibility_consistent(
        seed in any::<u64>(),
        frames in 1usize..7,
        target in prop::collection::vec(1usize..3, 0..4),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (lat, _) = lattice(&random_logits(&mut rng, frames, 3));
        match ctc_loss(&lat, &target) {
            Ok(loss) => {
                prop_assert!(frames >= required_frames(&target));
                prop_assert!(loss >= -1e-12);
            }
            Err(Error::Infeasible { required, .. }) => {
                prop_assert!(frames < required);
                prop_assert_eq!(required, required_frames(&target));
            }
            Err(e) => prop_assert!(false, "{}", e),
        }
    }
}
