//! Central finite differences, the independent oracle for every gradient the
//! autodiff engine produces. Nothing here calls [`Graph::backward`]; only
//! forward evaluations are used.

use std::collections::BTreeMap;

use crate::autograd::{AttnMask, Graph, Var};
use crate::backbones::PromptBatch;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Task};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::tensor::{numel, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(autodiff: f64, numeric: f64) -> f64 {
    (autodiff - numeric).abs() / autodiff.abs().max(numeric.abs()).max(1e-8)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn central_difference<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe)?;
        probe[i] = x[i] - h;
        let down = f(&probe)?;
        probe[i] = x[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Largest relative error between two gradient vectors.
pub fn max_relative_error(autodiff: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(autodiff.len(), numeric.len());
    autodiff
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Result of checking every parameter of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    /// Max relative error per parameter group (first two name components).
    pub groups: BTreeMap<String, f64>,
    /// Max relative error per parameter.
    pub params: BTreeMap<String, f64>,
    pub checked_scalars: usize,
}

impl GradReport {
    pub fn max_error(&self) -> f64 {
        self.params.values().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.params
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

pub fn group_of(name: &str) -> String {
    name.split('.').take(2).collect::<Vec<_>>().join(".")
}

/// Compares autodiff parameter gradients of `loss_fn` against central
/// differences for every scalar of every parameter in `store`.
pub fn check_params<F>(store: &ParamStore<f64>, loss_fn: F) -> Result<GradReport>
where
    F: Fn(&mut Graph<'_, f64>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_params(store);
        let loss = loss_fn(&mut g)?;
        g.backward(loss)?
    };
    let mut probe = store.clone();
    let mut report = GradReport {
        groups: BTreeMap::new(),
        params: BTreeMap::new(),
        checked_scalars: 0,
    };
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::inference(s);
        let loss = loss_fn(&mut g)?;
        Ok(g.value(loss)[0])
    };
    for id in store.ids() {
        let name = store.get(id).name.clone();
        let n = store.tensor(id).len();
        let zeros = vec![0.0; n];
        let analytic = grads.param(id).unwrap_or(&zeros).to_vec();
        let mut worst: f64 = 0.0;
        for j in 0..n {
            let orig = store.tensor(id).data()[j];
            probe.get_mut(id).tensor.data_mut()[j] = orig + FD_STEP;
            let up = eval(&probe)?;
            probe.get_mut(id).tensor.data_mut()[j] = orig - FD_STEP;
            let down = eval(&probe)?;
            probe.get_mut(id).tensor.data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
        report.checked_scalars += n;
        let group = report.groups.entry(group_of(&name)).or_insert(0.0);
        *group = group.max(worst);
        report.params.insert(name, worst);
    }
    Ok(report)
}

/// Standard-normal tensor drawn from `seed`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    let data = (0..numel(shape)).map(|_| rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).expect("normal draws are finite")
}

/// Worst relative error, over every input, between the autodiff gradient
/// of `sum(op(inputs) * w)` (fixed random `w`) and central differences.
pub fn input_gradient_error<F>(inputs: &[Tensor<f64>], op: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let weighted = |g: &mut Graph<'_, f64>, vars: &[Var]| -> Result<Var> {
        let out = op(g, vars)?;
        let w = random_tensor(g.shape(out), 999);
        let wv = g.input(&w, false);
        let prod = g.mul(out, wv)?;
        g.sum(prod)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.input(x, true)).collect();
    let loss = weighted(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .wrt(vars[i])
            .ok_or_else(|| Error::Contract(format!("input {i} received no gradient")))?
            .to_vec();
        let numeric = central_difference(
            |probe| {
                let mut g = Graph::new();
                let mut vars = Vec::with_capacity(inputs.len());
                for (j, y) in inputs.iter().enumerate() {
                    vars.push(if j == i {
                        g.input(&Tensor::new(y.shape().to_vec(), probe.to_vec())?, false)
                    } else {
                        g.input(y, false)
                    });
                }
                let loss = weighted(&mut g, &vars)?;
                Ok(g.value(loss)[0])
            },
            x.data(),
            FD_STEP,
        )?;
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

type PrimitiveCase = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>);

/// Finite-difference check of every differentiable primitive; returns the
/// worst relative error per case.
pub fn primitive_suite() -> Result<Vec<(&'static str, f64)>> {
    let r = random_tensor;
    let mask = AttnMask::keys(2, 3, vec![true, false, true, false, false, true])?;
    let cases: Vec<PrimitiveCase> = vec![
        ("matmul", vec![r(&[3, 4], 1), r(&[4, 2], 2)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_flattened", vec![r(&[2, 3, 4], 3), r(&[4, 5], 4)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("matmul_broadcast", vec![r(&[2, 1, 3, 4], 5), r(&[3, 4, 2], 6)], Box::new(|g, v| g.matmul(v[0], v[1]))),
        ("transpose", vec![r(&[2, 3, 4], 7)], Box::new(|g, v| g.transpose(v[0]))),
        ("permute", vec![r(&[2, 3, 4], 8)], Box::new(|g, v| g.permute(v[0], &[2, 0, 1]))),
        ("reshape", vec![r(&[2, 3, 4], 9)], Box::new(|g, v| g.reshape(v[0], &[6, 4]))),
        ("add_broadcast", vec![r(&[2, 3, 4], 10), r(&[4], 11)], Box::new(|g, v| g.add(v[0], v[1]))),
        ("sub", vec![r(&[2, 3], 12), r(&[2, 3], 13)], Box::new(|g, v| g.sub(v[0], v[1]))),
        ("mul_broadcast", vec![r(&[2, 3, 4], 14), r(&[3, 4], 15)], Box::new(|g, v| g.mul(v[0], v[1]))),
        ("scale", vec![r(&[5], 16)], Box::new(|g, v| g.scale(v[0], -0.7))),
        ("gelu", vec![r(&[7], 17)], Box::new(|g, v| g.gelu(v[0]))),
        ("softmax", vec![r(&[2, 5], 18)], Box::new(|g, v| g.softmax_last(v[0]))),
        (
            "softmax_masked",
            vec![r(&[2, 2, 3], 19)],
            Box::new(move |g, v| g.softmax_masked(v[0], &mask)),
        ),
        (
            "layer_norm",
            vec![r(&[2, 3, 6], 20), r(&[6], 21), r(&[6], 22)],
            Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
        ),
        ("concat", vec![r(&[2, 3], 23), r(&[2, 2], 24)], Box::new(|g, v| g.concat(v, 1))),
        (
            "concat_tokens",
            vec![r(&[2, 1, 3], 25), r(&[2, 2, 3], 26), r(&[2, 3, 3], 27)],
            Box::new(|g, v| g.concat_tokens(v)),
        ),
        ("slice", vec![r(&[2, 5, 3], 28)], Box::new(|g, v| g.slice(v[0], 1, 1, 3))),
        ("mean_tokens", vec![r(&[2, 5, 3], 29)], Box::new(|g, v| g.mean_tokens(v[0]))),
        ("expand_batch", vec![r(&[3, 4], 30)], Box::new(|g, v| g.expand_batch(v[0], 3))),
        (
            "conv2d_strided",
            vec![r(&[2, 3, 6, 6], 31), r(&[4, 3, 3, 3], 32), r(&[4], 33)],
            Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1)),
        ),
        (
            "conv2d",
            vec![r(&[1, 2, 5, 5], 34), r(&[3, 2, 3, 3], 35)],
            Box::new(|g, v| g.conv2d(v[0], v[1], None, 1, 1)),
        ),
        (
            "embedding",
            vec![r(&[3, 4], 36)],
            Box::new(|g, v| g.embedding(v[0], &[0, 2, 2, 1], &[2, 2])),
        ),
        ("sum", vec![r(&[3, 2], 37)], Box::new(|g, v| g.sum(v[0]))),
        ("mse", vec![r(&[4, 1], 38), r(&[4, 1], 39)], Box::new(|g, v| g.mse(v[0], v[1]))),
    ];
    cases
        .into_iter()
        .map(|(name, inputs, op)| Ok((name, input_gradient_error(&inputs, op)?)))
        .collect()
}

/// Checks every parameter of the tiny model for `task` on one random image
/// (and, for correspondence, a two-token prompt padded to four).
pub fn tiny_model_report(task: Task) -> Result<GradReport> {
    let cfg = ModelConfig::tiny(task);
    let mut store = ParamStore::<f64>::new();
    let model = Model::build(&cfg, &mut store, 44)?;
    let img = random_tensor(&[1, 3, 32, 32], 45);
    let labels = random_tensor(&[1, 1], 46);
    let prompts = PromptBatch::pad(&[&[3, 7]], cfg.text.max_tokens, cfg.text.vocab_size)?;
    check_params(&store, |g| {
        let x = g.input(&img, false);
        let y = model.forward(g, x, cfg.uses_text().then_some(&prompts))?;
        let l = g.input(&labels, false);
        g.mse(y, l)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_cubic() {
        let g = central_difference(|x| Ok(x[0].powi(3) + 2.0 * x[1]), &[2.0, 5.0], 1e-5).unwrap();
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-12);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
