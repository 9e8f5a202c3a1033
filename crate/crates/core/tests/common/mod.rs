//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

use semicausal::model::SemiCausalModel;
use semicausal::numerics::{Real, Tape, Tensor, Var};

/// Relative error with a floor so that two near-zero values compare by
/// absolute difference instead.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-5)
}

/// Central finite differences of `f` with respect to every element of every
/// input, compared with the tape's gradients. Returns the worst relative error.
pub fn gradcheck(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| {
            tape.grad(*v)
                .unwrap_or_else(|| Tensor::zeros(tape.value(*v).shape()))
        })
        .collect();

    let eval = |ins: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i].data()[j], numeric));
        }
    }
    worst
}

/// Finite-difference check of every parameter leaf of a model against the
/// gradient of `loss`. Returns `(worst relative error, leaf name)`.
pub fn model_gradcheck(
    model: &mut SemiCausalModel<f64>,
    loss: impl Fn(&SemiCausalModel<f64>, bool) -> (f64, Vec<Option<Tensor<f64>>>),
) -> (f64, String) {
    let (_, grads) = loss(model, true);
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    let ids: Vec<_> = model.params().ids().collect();
    for id in ids {
        let name = model.params().get(id).name.clone();
        let g = grads[id.index()].clone().expect("every leaf tracked");
        for j in 0..g.numel() {
            let orig = model.params().get(id).value.data()[j];
            model.params_mut().get_mut(id).value.data_mut()[j] = orig + h;
            let (fp, _) = loss(model, false);
            model.params_mut().get_mut(id).value.data_mut()[j] = orig - h;
            let (fm, _) = loss(model, false);
            model.params_mut().get_mut(id).value.data_mut()[j] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let e = rel_err(g.data()[j], numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{j}]"));
            }
        }
    }
    worst
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn max_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}
