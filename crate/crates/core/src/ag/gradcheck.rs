//! Central finite-difference verification of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ag::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with an absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of `loss` against `(f(p+ε) − f(p−ε)) / 2ε`
/// for every trainable scalar in `store`.
pub fn finite_diff_check<T, F>(store: &ParamStore<T>, loss: F, epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let grads = g.backward(l, store)?;

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::inference();
        let l = loss(&mut g, s)?;
        Ok(g.value(l).item().as_f64())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        tolerance,
        passed: true,
    };
    let ids: Vec<_> = store.trainable_ids().collect();
    for id in ids {
        let analytic = grads.get(id).expect("trainable parameter has a gradient").to_f64_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + T::lit(epsilon);
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - T::lit(epsilon);
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    report.passed = report.max_rel_err <= tolerance;
    Ok(report)
}

type Build = fn(&mut Graph<f64>, Var, Var) -> Result<Var>;

/// Every differentiable op, with operand shapes.
fn primitive_cases() -> Vec<(&'static str, Vec<usize>, Vec<usize>, Build)> {
    vec![
        ("matmul", vec![3, 4], vec![4, 2], |g, a, b| g.matmul(a, b)),
        ("matmul_tt", vec![4, 3], vec![2, 4], |g, a, b| g.matmul_t(a, b, true, true)),
        ("bmm_nt", vec![2, 3, 4], vec![2, 5, 4], |g, a, b| g.matmul_t(a, b, false, true)),
        ("linear", vec![3, 4], vec![4, 4], |g, a, b| {
            let bias = g.slice(b, 0, 1, 1)?;
            let bias = g.reshape(bias, vec![4])?;
            g.linear(a, b, Some(bias))
        }),
        ("add_bcast", vec![3, 4], vec![4], |g, a, b| g.add(a, b)),
        ("sub_bcast_col", vec![3, 4], vec![3, 1], |g, a, b| g.sub(a, b)),
        ("mul_bcast", vec![2, 3, 4], vec![3, 1], |g, a, b| g.mul(a, b)),
        ("mul_scalar", vec![3, 4], vec![], |g, a, b| g.mul(a, b)),
        ("scale", vec![3, 4], vec![1], |g, a, _| Ok(g.scale(a, -0.7))),
        ("exp", vec![3, 4], vec![1], |g, a, _| Ok(g.exp(a))),
        ("log", vec![3, 4], vec![1], |g, a, _| {
            let e = g.exp(a);
            Ok(g.log(e))
        }),
        ("softplus", vec![3, 4], vec![1], |g, a, _| Ok(g.softplus(a))),
        ("gelu", vec![3, 4], vec![1], |g, a, _| Ok(g.gelu(a))),
        ("relu", vec![3, 4], vec![1], |g, a, _| Ok(g.relu(a))),
        ("softmax", vec![3, 4], vec![1], |g, a, _| Ok(g.softmax(a))),
        ("log_softmax", vec![3, 4], vec![1], |g, a, _| Ok(g.log_softmax(a))),
        ("layer_norm", vec![3, 5], vec![1], |g, a, _| Ok(g.layer_norm(a, 1e-5))),
        ("l2_normalize", vec![3, 4], vec![1], |g, a, _| Ok(g.l2_normalize(a))),
        ("max_last", vec![3, 4], vec![1], |g, a, _| Ok(g.max_last(a))),
        ("segment_max", vec![3, 6], vec![1], |g, a, _| {
            let m = g.segment_max(a, &[vec![0, 2, 4], vec![1, 3], vec![5], vec![]])?;
            // drop the empty (-inf) group before reducing
            g.slice(m, 1, 0, 3)
        }),
        ("top_k_softmax", vec![3, 5], vec![1], |g, a, _| Ok(g.top_k_softmax(a, 2))),
        ("concat", vec![3, 4], vec![3, 2], |g, a, b| g.concat(&[a, b, a], 1)),
        ("slice", vec![3, 4], vec![1], |g, a, _| g.slice(a, 1, 1, 2)),
        ("gather", vec![4, 3], vec![1], |g, a, _| g.gather(a, &[3, 0, 3, 1])),
        ("pick_last", vec![3, 4], vec![1], |g, a, _| g.pick_last(a, &[0, 3, 3])),
        ("reshape", vec![3, 4], vec![1], |g, a, _| g.reshape(a, vec![2, 6])),
        ("permute", vec![2, 3, 4], vec![1], |g, a, _| g.permute(a, &[2, 0, 1])),
        ("sum", vec![3, 4], vec![1], |g, a, _| Ok(g.sum(a))),
        ("mean", vec![3, 4], vec![1], |g, a, _| Ok(g.mean(a))),
        ("cross_entropy", vec![3, 4], vec![1], |g, a, _| g.cross_entropy(a, &[1, 0, 3])),
    ]
}

/// Finite-difference check of every op on random operands. Each output is
/// reduced through a fixed random projection so every entry contributes.
pub fn primitive_suite(seed: u64, epsilon: f64, tolerance: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut random = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
    };
    let mut out = Vec::new();
    for (name, sa, sb, build) in primitive_cases() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", random(&sa)?, true)?;
        let b = store.add("b", random(&sb)?, true)?;
        let out_shape = {
            let mut g = Graph::inference();
            let (va, vb) = (g.param(&store, a), g.param(&store, b));
            let y = build(&mut g, va, vb)?;
            g.shape(y).to_vec()
        };
        let proj = random(&out_shape)?;
        let report = finite_diff_check(
            &store,
            |g, s| {
                let (va, vb) = (g.param(s, a), g.param(s, b));
                let y = build(g, va, vb)?;
                let w = g.input(proj.clone());
                let yw = g.mul(y, w)?;
                Ok(g.sum(yw))
            },
            epsilon,
            tolerance,
        )?;
        out.push((name, report));
    }
    Ok(out)
}
