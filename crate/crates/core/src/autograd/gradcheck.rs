use super::graph::{Graph, NodeId};
use super::params::ParameterStore;
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so that gradients that are zero up
/// to rounding do not report huge relative errors.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Rounding error of one loss evaluation, in units of `f64::EPSILON * |f|`.
/// Each central difference inherits about `FD_NOISE_ULPS * EPSILON * |f| / eps`
/// of absolute noise from it.
pub const FD_NOISE_ULPS: f64 = 8.0;

/// Worst discrepancy found for one parameter entry.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
    /// Absolute finite-difference noise; entries smaller than `noise / tol`
    /// are compared against it instead of against their own magnitude.
    pub noise: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err <= self.tol)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries
            .iter()
            .filter(move |e| e.max_rel_err > self.tol)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_with_floor(analytic, numeric, REL_ERR_FLOOR)
}

pub fn relative_error_with_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares back-propagated gradients of the scalar built by `build` against
/// central differences `(f(θ+eps) - f(θ-eps)) / 2eps` for every parameter value.
pub fn check_gradient<F>(
    store: &mut ParameterStore,
    eps: f64,
    tol: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<NodeId>,
{
    if !(eps > 0.0 && tol > 0.0) {
        return Err(Error::Config(
            "gradient check needs eps > 0 and tol > 0".into(),
        ));
    }
    let mut graph = Graph::new();
    let root = build(&mut graph, store)?;
    graph.backward(root)?;
    let analytic: Vec<(String, Vec<f64>)> = store
        .names()
        .map(|name| {
            let grad = graph
                .bound_params()
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, id)| graph.grad(*id).into_data())
                .unwrap_or_else(|| vec![0.0; store.value(name).map_or(0, |v| v.len())]);
            (name.to_string(), grad)
        })
        .collect();

    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(&mut g, store)?;
        Ok(g.value(root).data()[0])
    };

    let noise = FD_NOISE_ULPS * f64::EPSILON * eval(store)?.abs().max(1.0) / eps;
    let floor = REL_ERR_FLOOR.max(noise / tol);
    let mut entries = Vec::with_capacity(analytic.len());
    for (name, grad) in analytic {
        let mut worst = GradCheckEntry {
            name: name.clone(),
            max_rel_err: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, &a) in grad.iter().enumerate() {
            let orig = store.value(&name)?.data()[i];
            store.value_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = eval(store)?;
            store.value_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = eval(store)?;
            store.value_mut(&name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error_with_floor(a, numeric, floor);
            if err > worst.max_rel_err || !err.is_finite() {
                worst = GradCheckEntry {
                    name: name.clone(),
                    max_rel_err: if err.is_finite() { err } else { f64::INFINITY },
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport {
        entries,
        tol,
        noise,
    })
}
