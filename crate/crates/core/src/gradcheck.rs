//! Central finite-difference checks of the autodiff engine, in f64.
//!
//! Errors are relative over the probed gradient vector:
//! `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NormStats, Var};
use crate::codec::{encode, indicator, CodecConfig, LandmarkSet, Point};
use crate::error::Result;
use crate::loss::weighted_loss_graph;
use crate::model::{Mode, ModelConfig, UNetModel};
use crate::tensor::Tensor;

/// Central difference step.
pub const STEP: f64 = 1e-6;
/// Coordinates probed per input tensor.
pub const PROBES: usize = 24;

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// One differentiable op applied to freshly drawn inputs.
pub struct Case {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    /// Inputs are kept at least 0.05 away from 0 and 1, where relu, abs
    /// and clamp01 have kinks.
    pub avoid_kinks: bool,
    pub op: OpFn,
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-2.0..2.0))
}

fn away_from_kinks(v: f64) -> f64 {
    let mut v = v;
    for k in [0.0, 1.0] {
        if (v - k).abs() < 0.05 {
            v = k + 0.05f64.copysign(v - k);
        }
    }
    v
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// `sum(out * w)` for a fixed random `w`, so every output entry gets a
/// distinct upstream gradient.
fn probe_loss(graph: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    let shape = graph.value(out).shape().to_vec();
    let w = graph.constant(random(&mut rng, &shape));
    let prod = graph.mul(out, w)?;
    graph.sum_all(prod)
}

/// Largest relative error over the inputs of `op` at `inputs`.
pub fn check_op(op: &dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>, inputs: &[Tensor<f64>], seed: u64) -> Result<f64> {
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|v| g.param(v.clone())).collect();
        let out = op(&mut g, &vars)?;
        let loss = probe_loss(&mut g, out, seed)?;
        g.value(loss).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|v| g.param(v.clone())).collect();
    let out = op(&mut g, &vars)?;
    let loss = probe_loss(&mut g, out, seed)?;
    g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (k, var) in vars.iter().enumerate() {
        let grad = g.grad(*var).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        let n = inputs[k].numel();
        let coords: Vec<usize> = if n <= PROBES {
            (0..n).collect()
        } else {
            (0..PROBES).map(|_| rng.random_range(0..n)).collect()
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[c] += STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[c] -= STEP;
            numeric.push((eval(&plus)? - eval(&minus)?) / (2.0 * STEP));
            analytic.push(grad.data()[c]);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// Largest relative error of `case` over seeds `0..seeds`.
pub fn check_case(case: &Case, seeds: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor<f64>> = case
            .shapes
            .iter()
            .map(|s| {
                let t = random(&mut rng, s);
                if case.avoid_kinks {
                    t.map(away_from_kinks)
                } else {
                    t
                }
            })
            .collect();
        worst = worst.max(check_op(&case.op, &inputs, seed)?);
    }
    Ok(worst)
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    avoid_kinks: bool,
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        avoid_kinks,
        op: Box::new(op),
    }
}

/// Every primitive of [`Graph`], in several configurations.
pub fn primitive_cases() -> Vec<Case> {
    let s2: &[usize] = &[3, 4];
    let s4: &[usize] = &[2, 3, 4, 5];
    vec![
        case("relu", &[&[2, 3, 4]], true, |g, v| Ok(g.relu(v[0]))),
        case("sigmoid", &[&[2, 3, 4]], false, |g, v| Ok(g.sigmoid(v[0]))),
        case("abs", &[&[2, 3, 4]], true, |g, v| Ok(g.abs(v[0]))),
        case("clamp01", &[&[2, 3, 4]], true, |g, v| Ok(g.clamp01(v[0]))),
        case("scalar_mul", &[&[5]], false, |g, v| Ok(g.scalar_mul(v[0], -1.7))),
        case("add", &[s2, s2], false, |g, v| g.add(v[0], v[1])),
        case("sub", &[s2, s2], false, |g, v| g.sub(v[0], v[1])),
        case("mul", &[s2, s2], false, |g, v| g.mul(v[0], v[1])),
        case("mul_self", &[s2], false, |g, v| g.mul(v[0], v[0])),
        case("sum_axes", &[s4], false, |g, v| g.sum_axes(v[0], &[2, 3])),
        case("mean_axes", &[s4], false, |g, v| g.mean_axes(v[0], &[0, 2])),
        case("sum_all", &[s4], false, |g, v| g.sum_all(v[0])),
        case("mean_all", &[s4], false, |g, v| g.mean_all(v[0])),
        case("upsample2x", &[&[2, 3, 3, 4]], false, |g, v| g.upsample2x(v[0])),
        case("concat_channels", &[&[2, 3, 4, 4], &[2, 2, 4, 4]], false, |g, v| {
            g.concat_channels(v[0], v[1])
        }),
        case("conv3x3_pad1", &[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]], false, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        case("conv3x3_stride2", &[&[2, 2, 7, 7], &[3, 2, 3, 3]], false, |g, v| {
            g.conv2d(v[0], v[1], None, 2, 1)
        }),
        case("conv1x1_stride2", &[&[1, 3, 6, 6], &[2, 3, 1, 1], &[2]], false, |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, 0)
        }),
        case("conv5x5_nopad", &[&[1, 2, 7, 7], &[2, 2, 5, 5]], false, |g, v| {
            g.conv2d(v[0], v[1], None, 1, 0)
        }),
        case("batch_norm_batch", &[&[3, 2, 4, 4], &[2], &[2]], false, |g, v| {
            Ok(g.batch_norm(v[0], v[1], v[2], NormStats::Batch)?.output)
        }),
        case("batch_norm_fixed", &[&[2, 2, 3, 3], &[2], &[2]], false, |g, v| {
            let (mean, var) = ([0.3, -0.2], [1.5, 0.7]);
            Ok(g.batch_norm(v[0], v[1], v[2], NormStats::Fixed { mean: &mean, var: &var })?.output)
        }),
    ]
}

/// Weighted loss with respect to the prediction, at predictions kept at
/// least 0.05 away from the targets so `|H - G|` stays differentiable.
pub fn check_weighted_loss(seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = 12;
    let points = (0..2).map(|_| Point::new(rng.random_range(0..12), rng.random_range(0..12))).collect();
    let gt = encode(&LandmarkSet::new(points, grid)?, &CodecConfig::new(4.0, grid)?)?;
    let ind: Tensor<f64> = indicator(&gt).masks().cast();
    let gt: Tensor<f64> = gt.maps().cast();
    let pred = Tensor::from_fn(&[2, grid, grid], |i| {
        let delta: f64 = rng.random_range(0.05..0.5);
        if rng.random::<bool>() {
            gt.data()[i] + delta
        } else {
            gt.data()[i] - delta
        }
    });
    check_op(&|g, v| Ok(weighted_loss_graph(g, v[0], &gt, &ind)?.total), &[pred], seed)
}

/// Model used for the whole-network check.
pub fn small_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        num_landmarks: 1,
        encoder_channels: vec![4, 8],
        blocks_per_stage: 1,
        seed,
    }
}

/// Weighted loss through the whole network in training mode, with respect
/// to every parameter. Returns the relative errors of a random directional
/// derivative and of eight single coordinates.
pub fn check_model(seed: u64) -> Result<(f64, f64)> {
    let config = small_model_config(seed);
    let grid = config.output_size();
    let codec = CodecConfig::new(2.0, grid)?;
    let mut model = UNetModel::<f64>::build(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fresh blocks have zero residual scale; open them up so every kernel
    // receives a gradient.
    for (name, shape) in model.manifest() {
        if name.ends_with("norm2.weight") {
            if let Some(t) = model.tensor_mut(&name) {
                *t = Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5));
            }
        }
    }
    let images = Tensor::from_fn(&[2, 3, 16, 16], |_| rng.random_range(0.0..1.0));
    let mut gts = Vec::new();
    let mut inds = Vec::new();
    for _ in 0..2 {
        let p = Point::new(rng.random_range(0..grid as i64), rng.random_range(0..grid as i64));
        let gt = encode(&LandmarkSet::new(vec![p], grid)?, &codec)?;
        inds.push(indicator(&gt).masks().cast::<f64>());
        gts.push(gt.maps().cast::<f64>());
    }
    let gt = Tensor::stack(&gts.iter().collect::<Vec<_>>())?;
    let ind = Tensor::stack(&inds.iter().collect::<Vec<_>>())?;

    let loss_of = |m: &UNetModel<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let bound = m.bind(&mut g);
        let x = g.constant(images.clone());
        let out = m.forward(&mut g, &bound, x, Mode::Train)?;
        let l = weighted_loss_graph(&mut g, out.heatmaps, &gt, &ind)?.total;
        g.value(l).item()
    };
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let x = g.constant(images.clone());
    let out = model.forward(&mut g, &bound, x, Mode::Train)?;
    let l = weighted_loss_graph(&mut g, out.heatmaps, &gt, &ind)?.total;
    g.backward(l)?;
    let grads = model.gradients(&g, &bound);

    let dirs: Vec<Tensor<f64>> = grads.iter().map(|t| random(&mut rng, t.shape())).collect();
    let analytic: f64 = grads
        .iter()
        .zip(&dirs)
        .map(|(gr, d)| gr.data().iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    let shifted = |sign: f64| {
        let mut m = model.clone();
        for (p, d) in m.parameters_mut().into_iter().zip(&dirs) {
            for (v, dv) in p.data_mut().iter_mut().zip(d.data()) {
                *v += sign * STEP * dv;
            }
        }
        loss_of(&m)
    };
    let numeric = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * STEP);
    let directional = relative_error(&[analytic], &[numeric]);

    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for _ in 0..8 {
        let t = rng.random_range(0..grads.len());
        let c = rng.random_range(0..grads[t].numel());
        let bump = |sign: f64| {
            let mut m = model.clone();
            m.parameters_mut()[t].data_mut()[c] += sign * STEP;
            loss_of(&m)
        };
        numeric.push((bump(1.0)? - bump(-1.0)?) / (2.0 * STEP));
        analytic.push(grads[t].data()[c]);
    }
    Ok((directional, relative_error(&analytic, &numeric)))
}
