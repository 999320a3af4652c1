//! Central finite-difference checks for tape-built functions.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for the relative error; keeps near-zero gradients from
/// turning rounding noise into huge ratios.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Entries checked per input tensor; `None` checks all of them.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: usize,
    /// `(input, flat index)` of the worst entry.
    pub worst: (usize, usize),
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the tape gradient of `sum(r * f(inputs))`, with fixed random
/// weights `r`, against central differences of the same scalar.
pub fn check<F>(inputs: &[Tensor], f: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.parameter(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let weights: Vec<f64> = (0..tape.value(out).len())
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let r = tape.constant(Tensor::new(&shape, weights.clone())?)?;
    let prod = tape.mul(out, r)?;
    let loss = tape.sum(prod)?;
    let grads = tape.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let vs = perturbed
            .iter()
            .map(|x| t.constant(x.clone()))
            .collect::<Result<Vec<_>>>()?;
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).data().to_vec())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        entries: 0,
        worst: (0, 0),
    };
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .ok_or_else(|| Error::Tape("missing parameter gradient".into()))?
            .data()
            .to_vec();
        let n = inputs[k].len();
        let picks: Vec<usize> = match opts.max_entries {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for i in picks {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + opts.eps;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.eps;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            // Differencing per output before weighting keeps untouched outputs
            // from contributing rounding noise.
            let numeric = plus
                .iter()
                .zip(&minus)
                .zip(&weights)
                .map(|((p, m), r)| r * (p - m))
                .sum::<f64>()
                / (2.0 * opts.eps);
            let err = relative_error(analytic[i], numeric);
            report.entries += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (k, i);
            }
        }
    }
    Ok(report)
}

/// Random tensor with entries uniform in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Runs the check over every differentiable op on random `2x3x5x5` inputs and
/// returns `(op name, max relative error)` per op.
pub fn check_all_ops(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = [2, 3, 5, 5];
    let x = random_tensor(&s, -1.0, 1.0, &mut rng);
    let y = random_tensor(&s, -1.0, 1.0, &mut rng);
    let pos = random_tensor(&s, 0.5, 2.0, &mut rng);
    let w = random_tensor(&[4, 3, 3, 3], -0.5, 0.5, &mut rng);
    let bias = random_tensor(&[3], -1.0, 1.0, &mut rng);
    let bias_b = random_tensor(&[2, 3], -1.0, 1.0, &mut rng);
    let vec4 = random_tensor(&[4], -1.0, 1.0, &mut rng);
    let kernel = [0.25, 0.5, 0.25];
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };

    type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
    let cases: Vec<(&'static str, Vec<Tensor>, Build)> = vec![
        ("add", vec![x.clone(), y.clone()], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![x.clone(), y.clone()], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![x.clone(), y.clone()], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("div", vec![x.clone(), pos.clone()], Box::new(|t, v| t.div(v[0], v[1]))),
        ("scale", vec![x.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("add_scalar", vec![x.clone()], Box::new(|t, v| t.add_scalar(v[0], 0.3))),
        ("conv3x3", vec![x.clone(), w], Box::new(|t, v| t.conv3x3(v[0], v[1]))),
        ("relu", vec![x.clone()], Box::new(|t, v| t.relu(v[0]))),
        ("sigmoid", vec![x.clone()], Box::new(|t, v| t.sigmoid(v[0]))),
        ("abs", vec![x.clone()], Box::new(|t, v| t.abs(v[0]))),
        ("square", vec![x.clone()], Box::new(|t, v| t.square(v[0]))),
        ("bias_add", vec![x.clone(), bias], Box::new(|t, v| t.bias_add(v[0], v[1]))),
        (
            "bias_add_per_sample",
            vec![x.clone(), bias_b],
            Box::new(|t, v| t.bias_add(v[0], v[1])),
        ),
        (
            "concat_channels",
            vec![x.clone(), y.clone()],
            Box::new(|t, v| t.concat_channels(&[v[0], v[1], v[0]])),
        ),
        ("mean", vec![x.clone()], Box::new(|t, v| t.mean(v[0]))),
        ("sum", vec![x.clone()], Box::new(|t, v| t.sum(v[0]))),
        (
            "blur",
            vec![x.clone()],
            Box::new(move |t, v| t.blur(v[0], &kernel)),
        ),
        (
            "gather_batch",
            vec![x.clone()],
            Box::new(|t, v| t.gather_batch(v[0], &[1, 0, 1])),
        ),
        ("batch_mean", vec![x], Box::new(|t, v| t.batch_mean(v[0]))),
        (
            "outer",
            vec![vec4],
            Box::new(|t, v| t.outer(v[0], &[0.0, 0.5, -2.0])),
        ),
    ];

    cases
        .into_iter()
        .map(|(name, inputs, build)| check(&inputs, build, &opts).map(|r| (name, r.max_rel_error)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes_finite_differences() {
        let results = check_all_ops(7).unwrap();
        for (name, err) in &results {
            assert!(*err <= 1e-6, "{name}: relative error {err:e}");
        }
    }

    #[test]
    fn composite_conv_relu_mean_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let inputs = vec![
            random_tensor(&[2, 3, 5, 5], -1.0, 1.0, &mut rng),
            random_tensor(&[4, 3, 3, 3], -0.5, 0.5, &mut rng),
            random_tensor(&[4], -0.2, 0.2, &mut rng),
        ];
        let rep = check(
            &inputs,
            |t, v| {
                let c = t.conv3x3(v[0], v[1])?;
                let b = t.bias_add(c, v[2])?;
                let r = t.relu(b)?;
                t.mean(r)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-6, "{rep:?}");
    }

    #[test]
    fn linearity_of_summed_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random_tensor(&[1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let branch_a = |t: &mut Tape, p: Var| -> Var {
            let s = t.sigmoid(p).unwrap();
            t.mean(s).unwrap()
        };
        let branch_b = |t: &mut Tape, p: Var| -> Var {
            let s = t.square(p).unwrap();
            t.sum(s).unwrap()
        };
        let grad_of = |use_a: bool, use_b: bool| {
            let mut t = Tape::new();
            let p = t.parameter(x0.clone()).unwrap();
            let mut terms = Vec::new();
            if use_a {
                terms.push(branch_a(&mut t, p));
            }
            if use_b {
                terms.push(branch_b(&mut t, p));
            }
            let l = if terms.len() == 2 {
                t.add(terms[0], terms[1]).unwrap()
            } else {
                terms[0]
            };
            t.backward(l).unwrap().take(p).unwrap()
        };
        let (ga, gb, gab) = (grad_of(true, false), grad_of(false, true), grad_of(true, true));
        for i in 0..ga.len() {
            let sum = ga.data()[i] + gb.data()[i];
            assert!((sum - gab.data()[i]).abs() <= 1e-15 * sum.abs().max(1.0));
        }
    }
}
