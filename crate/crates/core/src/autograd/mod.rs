//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] records operations as they are applied and caches every
//! intermediate value; [`Graph::backward`] walks the nodes in reverse creation
//! order. Trainable tensors live in a [`ParameterStore`] and are bound into a
//! graph by name.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{
    check_gradient, relative_error, relative_error_with_floor, GradCheckEntry, GradCheckReport,
    FD_NOISE_ULPS, REL_ERR_FLOOR,
};
pub use graph::{sigmoid, Graph, NodeId};
pub use params::{Parameter, ParameterStore};
pub use tensor::Tensor;

/// `log(sum(exp(xs)))` with max subtraction. Returns `-inf` for an empty or
/// all `-inf` input.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log(exp(a) + exp(b))`.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_is_stable() {
        assert_eq!(log_sum_exp(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY; 3]), f64::NEG_INFINITY);
        let v = log_sum_exp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((log_add(0.5f64.ln(), 0.25f64.ln()) - 0.75f64.ln()).abs() < 1e-15);
        assert_eq!(log_add(f64::NEG_INFINITY, -3.0), -3.0);
    }
}
