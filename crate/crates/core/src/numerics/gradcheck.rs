//! Central finite-difference verification of analytic gradients (64-bit).

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the element-wise relative error, so entries whose true
/// gradient is ~0 are compared absolutely. Central differences of an O(10)
/// objective at step 1e-5 carry ~1e-10 of rounding noise (attention key biases
/// have an exactly zero gradient and show it); the floor keeps that noise well
/// below a 1e-4 tolerance.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Default)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (input or parameter name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradcheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }

    fn record(&mut self, name: &str, idx: usize, analytic: f64, numeric: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(err);
            self.worst = Some((name.to_string(), idx, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradcheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

fn scalar_of(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(Error::Usage("gradcheck function must return a scalar".into()));
    }
    Ok(t.item())
}

/// Evenly spaced subset of `0..n` of size at most `limit`.
fn probe_indices(n: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(l) if l < n => (0..l).map(|i| i * n / l).collect(),
        _ => (0..n).collect(),
    }
}

/// Checks d f / d inputs, where `f` builds a scalar from input leaves.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_of(&g, out)
    };

    let mut report = GradcheckReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            work[i].data_mut()[j] = orig + step;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            report.record(&format!("input{i}"), j, analytic[i].data()[j], (fp - fm) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Checks d f / d parameters for every parameter `f` touches, probing at most
/// `per_param` entries of each tensor.
pub fn check_params<F>(store: &ParamStore<f64>, step: f64, per_param: Option<usize>, f: F) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    g.backward(out)?;
    let touched: Vec<(String, Tensor<f64>)> = g
        .params()
        .iter()
        .map(|(name, v)| {
            let grad = g
                .grad(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape()));
            (name.clone(), grad)
        })
        .collect();

    let mut work = store.clone();
    let mut report = GradcheckReport::default();
    for (name, grad) in &touched {
        for j in probe_indices(grad.len(), per_param) {
            let orig = work.get(name).unwrap().data()[j];
            work.get_mut(name).unwrap().data_mut()[j] = orig + step;
            let mut gp = Graph::new();
            let op = f(&mut gp, &work)?;
            let fp = scalar_of(&gp, op)?;
            work.get_mut(name).unwrap().data_mut()[j] = orig - step;
            let mut gm = Graph::new();
            let om = f(&mut gm, &work)?;
            let fm = scalar_of(&gm, om)?;
            work.get_mut(name).unwrap().data_mut()[j] = orig;
            report.record(name, j, grad.data()[j], (fp - fm) / (2.0 * step));
        }
    }
    Ok(report)
}

/// Reduces a non-scalar output to a scalar with fixed pseudo-random weights, so
/// that every output entry contributes a distinct direction.
pub fn weighted_sum(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    use rand::{Rng, SeedableRng};
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}
