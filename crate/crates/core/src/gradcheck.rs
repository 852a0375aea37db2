//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass, so it is independent of
//! every backward rule it verifies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::tensor::{from_vec, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-tensor relative error `‖a − n‖ / max(‖a‖, ‖n‖)`.
    pub max_rel_error: f64,
    /// Name of the tensor that produced it.
    pub worst: String,
    /// Number of coordinates probed.
    pub probes: usize,
}

impl GradCheckReport {
    fn merge(&mut self, name: String, rel: f64, probes: usize) {
        self.probes += probes;
        if rel > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = rel.max(self.max_rel_error);
            self.worst = name;
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Probe at most this many coordinates per tensor (all if `None`).
    pub max_probes_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_probes_per_tensor: Some(12),
            seed: 0,
        }
    }
}

/// Deterministic standard-normal test tensor.
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let dist = rand_distr::StandardNormal;
    from_vec(shape, (0..n).map(|_| rng.sample::<f64, _>(dist)).collect())
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = na.max(nn);
    if denom < 1e-300 {
        diff
    } else {
        diff / denom
    }
}

fn probe_indices(len: usize, opts: &GradCheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_probes_per_tensor {
        Some(k) if k < len => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            rand::seq::index::sample(&mut rng, len, k).into_vec()
        }
        _ => (0..len).collect(),
    }
}

fn scalar(v: &Var<f64>) -> f64 {
    assert_eq!(v.value().len(), 1, "gradient check needs a scalar objective");
    *v.value().iter().next().unwrap()
}

/// Compares analytic gradients of the scalar `forward` w.r.t. `inputs` and
/// the listed parameters against central differences.
pub fn check_gradients<F>(
    store: &ParamStore<f64>,
    params: &[ParamId],
    inputs: &[Tensor<f64>],
    forward: F,
    opts: GradCheckOptions,
) -> GradCheckReport
where
    F: Fn(&Graph<f64>, &[Var<f64>]) -> Var<f64>,
{
    let g = Graph::new(store);
    let vars: Vec<_> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = forward(&g, &vars);
    let grads = g.backward(&out);

    let eval = |st: &ParamStore<f64>, ins: &[Tensor<f64>]| {
        let g = Graph::inference(st);
        let vs: Vec<_> = ins.iter().map(|t| g.constant(t.clone())).collect();
        scalar(&forward(&g, &vs))
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: String::new(),
        probes: 0,
    };
    let h = opts.step;

    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.of(v).cloned().unwrap_or_else(|| Tensor::zeros(v.shape()));
        let idx = probe_indices(inputs[i].len(), &opts, i as u64);
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        let mut ins = inputs.to_vec();
        for &k in &idx {
            let orig = inputs[i].as_slice().unwrap()[k];
            ins[i].as_slice_mut().unwrap()[k] = orig + h;
            let fp = eval(store, &ins);
            ins[i].as_slice_mut().unwrap()[k] = orig - h;
            let fm = eval(store, &ins);
            ins[i].as_slice_mut().unwrap()[k] = orig;
            a.push(analytic.as_slice().unwrap()[k]);
            n.push((fp - fm) / (2.0 * h));
        }
        report.merge(format!("input{i}"), rel_error(&a, &n), idx.len());
    }

    let mut work = store.clone();
    for &p in params {
        let analytic = grads.param(p).cloned().unwrap_or_else(|| Tensor::zeros(store.get(p).shape()));
        let idx = probe_indices(store.get(p).len(), &opts, 1000 + p.index() as u64);
        let mut a = Vec::with_capacity(idx.len());
        let mut n = Vec::with_capacity(idx.len());
        for &k in &idx {
            let orig = store.get(p).as_slice().unwrap()[k];
            work.get_mut(p).as_slice_mut().unwrap()[k] = orig + h;
            let fp = eval(&work, inputs);
            work.get_mut(p).as_slice_mut().unwrap()[k] = orig - h;
            let fm = eval(&work, inputs);
            work.get_mut(p).as_slice_mut().unwrap()[k] = orig;
            a.push(analytic.as_slice().unwrap()[k]);
            n.push((fp - fm) / (2.0 * h));
        }
        report.merge(store.name(p).to_string(), rel_error(&a, &n), idx.len());
    }
    report
}

/// Weighted-sum objective `Σ out ⊙ weights`, so every output element carries a distinct gradient.
pub fn weighted_sum(g: &Graph<f64>, out: &Var<f64>, seed: u64) -> Var<f64> {
    let w = g.constant(rand_tensor(out.shape(), seed));
    g.sum_all(&g.mul(out, &w))
}
