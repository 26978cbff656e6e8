//! Central finite-difference gradient checking.
//!
//! The probe loss is a fixed random weighting of the op output, so ops with
//! non-scalar outputs reduce to one scalar. Analytic gradients come from the
//! graph; numeric ones from central differences with the probe evaluated in
//! f64 to keep FD noise below the tolerance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};

/// Outcome of one finite-difference sweep.
#[derive(Debug, Clone, Copy)]
pub struct CheckReport {
    pub max_rel_err: f64,
    pub elements_checked: usize,
}

/// Check `d probe/d input` for every element of every input against central
/// differences with step `eps`.
///
/// `build` must be a pure function of the graph and the given leaves: it is
/// re-invoked for every perturbed forward pass.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f32, probe_seed: u64, build: F) -> CheckReport
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    // Analytic pass.
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars);
    let probe = probe_weights(g.value(out).numel(), probe_seed);
    let w = g.constant(Tensor::from_vec(&g.value(out).shape().to_vec(), probe.clone()).unwrap());
    let weighted = g.mul(out, w).expect("probe shape matches output");
    let loss = g.sum_all(weighted);
    g.backward(loss).expect("probe loss is scalar");
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.value(v).numel()]))
        .collect();

    // Numeric sweeps.
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[ti].data_mut()[e] = orig + eps;
            let up = probe_eval(&work, &probe, &build);
            work[ti].data_mut()[e] = orig - eps;
            let down = probe_eval(&work, &probe, &build);
            work[ti].data_mut()[e] = orig;

            let numeric = (up - down) / (2.0 * eps as f64);
            let a = analytic[ti][e] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    CheckReport { max_rel_err: max_rel, elements_checked: checked }
}

/// Check `d probe/d param` for chosen named parameters of a model forward.
///
/// `build` receives the parameter set and must bind parameters by name (the
/// usual forward-pass path); gradients of a name bound several times are
/// summed, matching weight sharing.
pub fn check_param_gradients<F>(
    params: &super::ParamSet,
    probe_names: &[&str],
    eps: f32,
    probe_seed: u64,
    build: F,
) -> CheckReport
where
    F: Fn(&mut Graph, &super::ParamSet) -> Var,
{
    let mut g = Graph::new();
    let out = build(&mut g, params);
    let probe = probe_weights(g.value(out).numel(), probe_seed);
    let w = g.constant(Tensor::from_vec(&g.value(out).shape().to_vec(), probe.clone()).unwrap());
    let weighted = g.mul(out, w).expect("probe shape matches output");
    let loss = g.sum_all(weighted);
    g.backward(loss).expect("probe loss is scalar");
    let mut analytic: std::collections::BTreeMap<&str, Vec<f32>> = probe_names
        .iter()
        .map(|&n| (n, vec![0.0f32; params.get(n).expect("probe name exists").numel()]))
        .collect();
    for (name, grad) in g.param_grads() {
        if let Some(acc) = analytic.get_mut(name) {
            for (a, d) in acc.iter_mut().zip(grad) {
                *a += d;
            }
        }
    }

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    for &name in probe_names {
        let n = params.get(name).unwrap().numel();
        for e in 0..n {
            let orig = params.get(name).unwrap().data()[e];
            work.entry_mut(name).unwrap().data_mut()[e] = orig + eps;
            let up = probe_eval_params(&work, &probe, &build);
            work.entry_mut(name).unwrap().data_mut()[e] = orig - eps;
            let down = probe_eval_params(&work, &probe, &build);
            work.entry_mut(name).unwrap().data_mut()[e] = orig;

            let numeric = (up - down) / (2.0 * eps as f64);
            let a = analytic[name][e] as f64;
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
            checked += 1;
        }
    }
    CheckReport { max_rel_err: max_rel, elements_checked: checked }
}

fn probe_eval_params<F>(params: &super::ParamSet, probe: &[f32], build: &F) -> f64
where
    F: Fn(&mut Graph, &super::ParamSet) -> Var,
{
    let mut g = Graph::new();
    let out = build(&mut g, params);
    g.value(out)
        .data()
        .iter()
        .zip(probe)
        .map(|(&y, &w)| y as f64 * w as f64)
        .sum()
}

fn probe_eval<F>(inputs: &[Tensor], probe: &[f32], build: &F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Var,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out)
        .data()
        .iter()
        .zip(probe)
        .map(|(&y, &w)| y as f64 * w as f64)
        .sum()
}

fn probe_weights(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect()
}

/// Random tensor with entries in `(lo, hi)`, seeded.
pub fn random_tensor(shape: &[usize], lo: f32, hi: f32, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f32> = (0..shape.iter().product()).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

/// Random tensor whose values are pairwise separated by at least ~`gap`,
/// for ops with kinks (relu, max, pooling) where a finite-difference step
/// must not cross a decision boundary.
pub fn separated_tensor(shape: &[usize], gap: f32, seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut data = vec![0.0f32; n];
    for (rank, &slot) in order.iter().enumerate() {
        // Slots at multiples of 4*gap, jittered by < gap, offset from zero.
        data[slot] = (rank as f32 - n as f32 / 2.0) * 4.0 * gap
            + gap * rng.gen_range(-0.9..0.9)
            + if rank as f32 >= n as f32 / 2.0 { 2.0 * gap } else { -2.0 * gap };
    }
    Tensor::from_vec(shape, data).unwrap()
}
