//! Central finite-difference checks of every differentiable op and of the
//! tiny multi-scale model, in 64-bit.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{ModelConfig, ModelGraph, Variant};
use crate::tensor::{BnStats, LossKind, Mode, ParamId, RngStreams, Tape, Tensor, Var};

pub const STEP: f64 = 1e-4;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so exact zeros compare by absolute error.
pub const FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub samples: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// sum((y + c)^2) with a fixed random `c`, so every output element gets a
/// distinct upstream gradient.
fn project(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let c = random(&shape, &mut ChaCha8Rng::seed_from_u64(0xC0FFEE));
    let c = tape.constant(c);
    let s = tape.add(y, c)?;
    let s = tape.square(s)?;
    tape.sum(s)
}

/// Checks `f` with respect to each of `inputs` at `samples` coordinates
/// spread round-robin over the inputs.
pub fn check_op<F>(name: &str, inputs: &[Tensor<f64>], samples: usize, rng: &mut ChaCha8Rng, f: F) -> Result<CheckResult>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone(), true)).collect();
        let loss = f(&mut tape, &vars)?;
        let value = tape.value(loss).data()[0];
        if !grad {
            return Ok((value, Vec::new()));
        }
        let g = tape.gradients(loss)?;
        let grads = vars
            .iter()
            .zip(vals)
            .map(|(&v, t)| g.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        Ok((value, grads))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    let mut work = inputs.to_vec();
    for s in 0..samples {
        let which = s % inputs.len();
        let j = rng.gen_range(0..inputs[which].numel());
        let orig = work[which].data()[j];
        work[which].data_mut()[j] = orig + STEP;
        let (plus, _) = eval(&work, false)?;
        work[which].data_mut()[j] = orig - STEP;
        let (minus, _) = eval(&work, false)?;
        work[which].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * STEP);
        worst = worst.max(rel_error(analytic[which][j], numeric));
    }
    Ok(CheckResult { name: name.to_string(), samples, max_rel_error: worst })
}

/// Checks d(loss)/d(theta) of a model on sampled trainable coordinates.
pub fn check_model(name: &str, cfg: &ModelConfig, len: usize, samples: usize, seed: u64) -> Result<CheckResult> {
    let mut model = ModelGraph::<f64>::build(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 3;
    let x = random(&[n, cfg.in_leads, len], &mut rng);
    let mut targets = Tensor::zeros(&[n, cfg.num_classes]);
    for r in 0..n {
        targets.data_mut()[r * cfg.num_classes + rng.gen_range(0..cfg.num_classes)] = 1.0;
    }
    let kind = cfg.head_mode.loss_kind();
    let streams = RngStreams::new(seed);

    let loss_of = |model: &mut ModelGraph<f64>, backward: bool| -> Result<f64> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        // same dropout mask on every evaluation
        let mut drop_rng = streams.stream("gradcheck/dropout", 0);
        let out = model.forward(&mut tape, xv, Mode::Train, &mut drop_rng)?;
        let loss = tape.loss(out.logits, &targets, kind)?;
        if backward {
            tape.backward(loss, model.params_mut())?;
        }
        Ok(tape.value(loss).data()[0])
    };

    model.params_mut().zero_grad();
    loss_of(&mut model, true)?;

    // sample coordinates uniformly over all trainable scalars
    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for id in model.params().ids().collect::<Vec<_>>() {
        if model.params().is_trainable(id) {
            coords.extend((0..model.params().value(id).numel()).map(|j| (id, j)));
        }
    }
    coords.shuffle(&mut rng);

    let mut worst: f64 = 0.0;
    for &(id, j) in coords.iter().take(samples) {
        let analytic = model.params().grad(id)[j];
        let orig = model.params().value(id).data()[j];
        model.params_mut().value_mut(id).data_mut()[j] = orig + STEP;
        let plus = loss_of(&mut model, false)?;
        model.params_mut().value_mut(id).data_mut()[j] = orig - STEP;
        let minus = loss_of(&mut model, false)?;
        model.params_mut().value_mut(id).data_mut()[j] = orig;
        worst = worst.max(rel_error(analytic, (plus - minus) / (2.0 * STEP)));
    }
    Ok(CheckResult { name: name.to_string(), samples: samples.min(coords.len()), max_rel_error: worst })
}

/// Model configuration the suite differentiates: 12 leads, 8/16 channels,
/// two blocks, four taps.
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig::tiny(5)
}

pub const TINY_LEN: usize = 64;

/// Runs every check with `samples` coordinates each.
pub fn run_suite(samples: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();

    let x = random(&[2, 3, 9], r);
    let w = random(&[4, 3, 3], r);
    let b = random(&[4], r);
    out.push(check_op("conv1d", &[x.clone(), w.clone(), b.clone()], samples, r, |t, v| {
        let y = t.conv1d(v[0], v[1], Some(v[2]), 2, 1)?;
        project(t, y)
    })?);

    let x = random(&[3, 2, 5], r);
    let g = random(&[2], r);
    let bt = random(&[2], r);
    for (name, mode) in [("batchnorm1d/train", Mode::Train), ("batchnorm1d/eval", Mode::Eval)] {
        out.push(check_op(name, &[x.clone(), g.clone(), bt.clone()], samples, r, move |t, v| {
            let mut mean = vec![0.1, -0.2];
            let mut var = vec![0.8, 1.3];
            let y = t.batchnorm1d(v[0], v[1], v[2], BnStats { mean: &mut mean, var: &mut var }, mode)?;
            project(t, y)
        })?);
    }

    let x = random(&[2, 3, 7], r);
    out.push(check_op("relu", std::slice::from_ref(&x), samples, r, |t, v| {
        let y = t.relu(v[0])?;
        project(t, y)
    })?);
    let y = random(&[2, 3, 7], r);
    out.push(check_op("add", &[x.clone(), y], samples, r, |t, v| {
        let s = t.add(v[0], v[1])?;
        project(t, s)
    })?);
    out.push(check_op("maxpool1d", std::slice::from_ref(&x), samples, r, |t, v| {
        let y = t.maxpool1d(v[0], 3, 2, 1)?;
        project(t, y)
    })?);
    out.push(check_op("global_avg_pool", std::slice::from_ref(&x), samples, r, |t, v| {
        let y = t.global_avg_pool(v[0])?;
        project(t, y)
    })?);

    let xd = random(&[3, 6], r);
    let wd = random(&[4, 6], r);
    let bd = random(&[4], r);
    out.push(check_op("dense", &[xd, wd, bd], samples, r, |t, v| {
        let y = t.dense(v[0], v[1], v[2])?;
        project(t, y)
    })?);

    let a = random(&[2, 2, 4], r);
    let c = random(&[2, 3, 4], r);
    out.push(check_op("concat", &[a, c], samples, r, |t, v| {
        let y = t.concat(&[v[0], v[1]])?;
        project(t, y)
    })?);
    out.push(check_op("slice", std::slice::from_ref(&x), samples, r, |t, v| {
        let y = t.slice(v[0], 1, 2)?;
        project(t, y)
    })?);
    out.push(check_op("spatial_dropout", std::slice::from_ref(&x), samples, r, |t, v| {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let y = t.spatial_dropout(v[0], 0.3, Mode::Train, &mut rng)?;
        project(t, y)
    })?);
    out.push(check_op("square+sum", &[x], samples, r, |t, v| {
        let y = t.square(v[0])?;
        t.sum(y)
    })?);

    let z = random(&[2, 5], r).cast::<f64>();
    let z = Tensor::new(vec![2, 5], z.data().iter().map(|v| v * 3.0).collect())?;
    let soft = Tensor::new(vec![2, 5], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])?;
    for (name, kind) in [("softmax_ce", LossKind::SoftmaxCe), ("sigmoid_bce", LossKind::SigmoidBce)] {
        let tg = soft.clone();
        out.push(check_op(name, std::slice::from_ref(&z), samples, r, move |t, v| t.loss(v[0], &tg, kind))?);
    }

    let cfg = tiny_model_config();
    out.push(check_model("model/multiscale", &cfg, TINY_LEN, samples, seed)?);
    out.push(check_model("model/baseline", &cfg.with_variant(Variant::Baseline), TINY_LEN, samples, seed)?);
    Ok(out)
}

/// Fixed-width table of suite results.
pub fn render_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<20} {:>8} {:>14} {:>6}\n", "op", "samples", "max_rel_err", "ok");
    for r in results {
        s.push_str(&format!(
            "{:<20} {:>8} {:>14.3e} {:>6}\n",
            r.name,
            r.samples,
            r.max_rel_error,
            if r.passed() { "yes" } else { "NO" }
        ));
    }
    s
}
