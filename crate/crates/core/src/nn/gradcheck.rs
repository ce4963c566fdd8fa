//! Central finite-difference checks for every differentiable primitive.
//!
//! Each op is reduced to the scalar `sum(w * op(x))` with a random weight
//! tensor `w`, so its backward pass called with `dy = w` must equal the
//! numerical gradient of that scalar with respect to every input element.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::nn::ops;
use crate::nn::tensor::Tensor;
use crate::par::Exec;
use crate::rng::stream;

pub const STEP: f64 = 1e-5;
/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub op: &'static str,
    pub wrt: &'static str,
    pub shape: [usize; 4],
    pub max_rel_error: f64,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest relative error between `analytic` and the central difference of
/// `f` around `x`.
pub fn max_rel_error(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe);
        probe[i] = x[i] - STEP;
        let down = f(&probe);
        probe[i] = x[i];
        worst = worst.max(rel_error(analytic[i], (up - down) / (2.0 * STEP)));
    }
    worst
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn randn(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn tensor(shape: [usize; 4], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).expect("shape matches")
}

/// Checks all primitives on shapes drawn from `seed` with batch <= 2,
/// channels <= 3 and even spatial sizes <= 8.
pub fn check_primitives(seed: u64) -> Result<Vec<GradCheck>> {
    let mut rng = stream(seed, &[0x6AD]);
    let b = rng.random_range(1..=2);
    let c = rng.random_range(1..=3);
    let h = 2 * rng.random_range(1..=4);
    let w = 2 * rng.random_range(1..=4);
    let shape = [b, c, h, w];
    let n = b * c * h * w;
    let exec = Exec::Sequential;
    let mut out = Vec::new();
    let mut push = |op, wrt, err| {
        out.push(GradCheck {
            op,
            wrt,
            shape,
            max_rel_error: err,
        })
    };

    let x = randn(&mut rng, n);

    for (op, k) in [("conv3x3", 3usize), ("conv1x1", 1)] {
        let co = rng.random_range(1..=3);
        let wt = randn(&mut rng, co * c * k * k);
        let bias = randn(&mut rng, co);
        let proj = randn(&mut rng, b * co * h * w);
        let dy = tensor([b, co, h, w], &proj);
        let g = ops::conv2d_backward(&tensor(shape, &x), &wt, &dy, k, exec);
        let run = |xv: &[f64], wv: &[f64], bv: &[f64]| {
            let y = ops::conv2d_forward(&tensor(shape, xv), wv, bv, co, k, exec).expect("conv");
            dot(y.data(), &proj)
        };
        push(op, "input", max_rel_error(|v| run(v, &wt, &bias), &x, g.dx.data()));
        push(op, "weight", max_rel_error(|v| run(&x, v, &bias), &wt, &g.dweight));
        push(op, "bias", max_rel_error(|v| run(&x, &wt, v), &bias, &g.dbias));
    }

    {
        let gamma: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..1.5)).collect();
        let beta = randn(&mut rng, c);
        let proj = randn(&mut rng, n);
        let run = |xv: &[f64], gv: &[f64], bv: &[f64]| {
            let (mut rm, mut rv) = (vec![0.0; c], vec![1.0; c]);
            let (y, _) = ops::batchnorm_train_forward(&tensor(shape, xv), gv, bv, &mut rm, &mut rv, exec);
            dot(y.data(), &proj)
        };
        let (mut rm, mut rv) = (vec![0.0; c], vec![1.0; c]);
        let xt = tensor(shape, &x);
        let (_, cache) = ops::batchnorm_train_forward(&xt, &gamma, &beta, &mut rm, &mut rv, exec);
        let g = ops::batchnorm_backward(&xt, &gamma, &cache, &tensor(shape, &proj), exec);
        push("batchnorm-train", "input", max_rel_error(|v| run(v, &gamma, &beta), &x, g.dx.data()));
        push("batchnorm-train", "gamma", max_rel_error(|v| run(&x, v, &beta), &gamma, &g.dgamma));
        push("batchnorm-train", "beta", max_rel_error(|v| run(&x, &gamma, v), &beta, &g.dbeta));

        let mean = randn(&mut rng, c);
        let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        let run_eval = |xv: &[f64]| {
            let (y, _) = ops::batchnorm_eval_forward(&tensor(shape, xv), &gamma, &beta, &mean, &var, exec);
            dot(y.data(), &proj)
        };
        let (_, cache) = ops::batchnorm_eval_forward(&xt, &gamma, &beta, &mean, &var, exec);
        let g = ops::batchnorm_backward(&xt, &gamma, &cache, &tensor(shape, &proj), exec);
        push("batchnorm-eval", "input", max_rel_error(run_eval, &x, g.dx.data()));
    }

    {
        let proj = randn(&mut rng, n);
        let y = ops::relu_forward(&tensor(shape, &x));
        let g = ops::relu_backward(&y, &tensor(shape, &proj));
        let run = |xv: &[f64]| dot(ops::relu_forward(&tensor(shape, xv)).data(), &proj);
        push("relu", "input", max_rel_error(run, &x, g.data()));
    }

    {
        let proj = randn(&mut rng, n / 4);
        let (_, arg) = ops::maxpool2_forward(&tensor(shape, &x), exec)?;
        let g = ops::maxpool2_backward(shape, &arg, &tensor([b, c, h / 2, w / 2], &proj));
        let run = |xv: &[f64]| {
            let (y, _) = ops::maxpool2_forward(&tensor(shape, xv), exec).expect("even shape");
            dot(y.data(), &proj)
        };
        push("maxpool2", "input", max_rel_error(run, &x, g.data()));
    }

    {
        let proj = randn(&mut rng, 4 * n);
        let g = ops::upsample2_backward(shape, &tensor([b, c, 2 * h, 2 * w], &proj), exec);
        let run = |xv: &[f64]| dot(ops::upsample2_forward(&tensor(shape, xv), exec).data(), &proj);
        push("upsample2-bilinear", "input", max_rel_error(run, &x, g.data()));
    }

    {
        let cb = rng.random_range(1..=3);
        let other = randn(&mut rng, b * cb * h * w);
        let oshape = [b, cb, h, w];
        let proj = randn(&mut rng, b * (c + cb) * h * w);
        let (ga, gb) = ops::concat_backward(&tensor([b, c + cb, h, w], &proj), c);
        let run = |av: &[f64], bv: &[f64]| {
            let y = ops::concat_forward(&tensor(shape, av), &tensor(oshape, bv)).expect("concat");
            dot(y.data(), &proj)
        };
        push("concat", "first", max_rel_error(|v| run(v, &other), &x, ga.data()));
        push("concat", "second", max_rel_error(|v| run(&x, v), &other, gb.data()));
    }

    {
        let target = randn(&mut rng, n);
        let (_, g) = ops::l1_loss(&tensor(shape, &x), &tensor(shape, &target))?;
        let run = |v: &[f64]| ops::l1_loss(&tensor(shape, v), &tensor(shape, &target)).expect("l1").0;
        push("l1-loss", "prediction", max_rel_error(run, &x, g.data()));
    }

    Ok(out)
}
