use avsr_core::autograd::{check_gradient, ParameterStore, Tensor};
use avsr_core::nn::{Linear, LstmCell, LstmState};
use avsr_core::verify::gradient_suite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(
        r,
        c,
        (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

#[test]
fn linear_layer_tight_tolerance() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParameterStore::new();
    let lin = Linear::new(&mut store, &mut rng, "lin", 4, 3, true).unwrap();
    store.insert("x", random(&mut rng, 2, 4)).unwrap();
    let w = random(&mut rng, 2, 3);
    let report = check_gradient(&mut store, 1e-5, 1e-6, |g, s| {
        let x = g.param(s, "x")?;
        let y = lin.forward(g, s, x)?;
        let t = g.tanh(y);
        let wn = g.leaf(w.clone());
        let p = g.mul(t, wn)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_err());
}

#[test]
fn lstm_cell_two_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParameterStore::new();
    let cell = LstmCell::new(&mut store, &mut rng, "cell", 3, 2).unwrap();
    store.insert("x", random(&mut rng, 2, 3)).unwrap();
    let report = check_gradient(&mut store, 1e-4, 1e-4, |g, s| {
        let x = g.param(s, "x")?;
        let mut st = LstmState {
            h: g.zeros(1, 2),
            c: g.zeros(1, 2),
        };
        for t in 0..2 {
            let xt = g.row(x, t)?;
            st = cell.step(g, s, xt, st)?;
        }
        let sq = g.mul(st.h, st.h)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.passed(), "{}", report.max_rel_err());
}

#[test]
fn checker_flags_a_missing_gradient() {
    let mut store = ParameterStore::new();
    store.insert("a", Tensor::row(vec![0.7, -0.3])).unwrap();
    store.insert("b", Tensor::row(vec![0.2, 0.9])).unwrap();
    // `b` enters as a constant, so backprop gives it no gradient while the
    // finite differences see its effect
    let report = check_gradient(&mut store, 1e-5, 1e-4, |g, s| {
        let a = g.param(s, "a")?;
        let b = g.leaf(s.value("b")?.clone());
        let p = g.mul(a, b)?;
        Ok(g.sum(p))
    })
    .unwrap();
    assert!(!report.passed());
    let bad: Vec<&str> = report.failures().map(|e| e.name.as_str()).collect();
    assert_eq!(bad, ["b"]);
}

#[test]
fn suite_passes_at_both_step_sizes() {
    for eps in [1e-4, 1e-5] {
        for seed in 0..3 {
            for (name, r) in gradient_suite(seed, eps, 1e-4).unwrap() {
                assert!(
                    r.passed(),
                    "{name} eps={eps} seed={seed}: {}",
                    r.max_rel_err()
                );
            }
        }
    }
}

#[test]
fn suite_covers_every_component() {
    let names: Vec<String> = gradient_suite(0, 1e-5, 1e-4)
        .unwrap()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert_eq!(
        names,
        [
            "lstm cell",
            "bi-LSTM layer",
            "projection",
            "dense bridge",
            "attention",
            "s2s teacher-forced loss",
            "ctc gradient",
            "vat fusion"
        ]
    );
}
