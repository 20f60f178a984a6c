//! Central finite-difference checks of tape gradients.
//!
//! The oracle only ever evaluates forward passes, so it stays independent of
//! the backward code it is checking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{ChannelPlan, Discriminator, Generator, Network, ParamStore, PassConfig};
use crate::tensor::{Activation, BnMode, ChannelStats, Result, Tape, Tensor, Var, BCE_CLAMP_EPS};
use crate::training::{d_loss, g_loss, LossFlags, LossWeights};

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Step for whole-network checks. Thousands of ReLU and max-pool kinks sit
/// between the parameters and the loss; a shorter step straddles fewer.
pub const E2E_STEP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    /// Worst norm-wise relative error over the checked inputs.
    pub rel_err: f64,
    pub tolerance: f64,
    /// Number of coordinates probed.
    pub probed: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.rel_err <= self.tolerance && self.rel_err.is_finite()
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<28} rel_err={:.3e} tol={:.0e} probed={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.rel_err,
            self.tolerance,
            self.probed
        )
    }
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// A loss builder: records a scalar on a fresh tape from leaves for `inputs`.
pub type LossFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

/// Compares tape gradients of `build` against central differences.
///
/// `wrt` selects which inputs are differentiated; `max_probes` caps the
/// number of coordinates probed per input (sampled with `seed`).
pub fn check(
    name: &str,
    inputs: &[Tensor],
    wrt: &[usize],
    build: &LossFn<'_>,
    tolerance: f64,
    max_probes: usize,
    seed: u64,
) -> Result<CheckReport> {
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.leaf(t.clone(), wrt.contains(&i)))
        .collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    for &i in wrt {
        let numel = inputs[i].numel();
        let zeros = vec![0.0; numel];
        let grad = tape.grad(vars[i]).unwrap_or(&zeros);
        let coords: Vec<usize> = if numel <= max_probes {
            (0..numel).collect()
        } else {
            let mut c = sample(&mut rng, numel, max_probes).into_vec();
            c.sort_unstable();
            c
        };
        let mut analytic = Vec::with_capacity(coords.len());
        let mut numeric = Vec::with_capacity(coords.len());
        let mut work = inputs.to_vec();
        for &j in &coords {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
            analytic.push(grad[j]);
        }
        probed += coords.len();
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(CheckReport {
        name: name.to_string(),
        rel_err: worst,
        tolerance,
        probed,
    })
}

/// Weighted sum `Σ out·r` with a fixed random `r`, so that every output
/// element carries a distinct cotangent.
pub fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(out).to_vec();
    let r = tape.constant(random_tensor(&mut rng, &shape, -1.0, 1.0));
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

/// Finite-difference checks of every differentiable primitive.
pub fn primitive_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::new();
    let tol = 1e-4;
    let probes = 200;

    let x = random_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
    let w = random_tensor(&mut rng, &[4, 3, 3, 3], -1.0, 1.0);
    let b = random_tensor(&mut rng, &[4], -1.0, 1.0);
    reports.push(check(
        "conv2d",
        &[x.clone(), w.clone(), b.clone()],
        &[0, 1, 2],
        &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            t.sum(y)
        },
        tol,
        probes,
        seed,
    )?);
    let w2 = random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let b2 = random_tensor(&mut rng, &[2], -1.0, 1.0);
    reports.push(check(
        "conv2d_strided",
        &[x.clone(), w2, b2],
        &[0, 1, 2],
        &|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 0)?;
            weighted_sum(t, y, 11)
        },
        tol,
        probes,
        seed,
    )?);

    let distinct = distinct_tensor(&mut rng, &[2, 2, 4, 6]);
    reports.push(check(
        "maxpool2x",
        &[distinct],
        &[0],
        &|t, v| {
            let y = t.maxpool2x(v[0])?;
            weighted_sum(t, y, 12)
        },
        tol,
        probes,
        seed,
    )?);

    let small = random_tensor(&mut rng, &[2, 3, 3, 4], -1.0, 1.0);
    reports.push(check(
        "upsample_nearest2x",
        std::slice::from_ref(&small),
        &[0],
        &|t, v| {
            let y = t.upsample_nearest2x(v[0])?;
            weighted_sum(t, y, 13)
        },
        1e-6,
        probes,
        seed,
    )?);

    let pool_in = random_tensor(&mut rng, &[2, 2, 8, 8], -1.0, 1.0);
    reports.push(check(
        "avg_pool",
        &[pool_in],
        &[0],
        &|t, v| {
            let y = t.avg_pool(v[0], 4)?;
            weighted_sum(t, y, 14)
        },
        1e-6,
        probes,
        seed,
    )?);

    let bn_x = random_tensor(&mut rng, &[2, 3, 4, 4], -2.0, 2.0);
    let gamma = random_tensor(&mut rng, &[3], 0.5, 1.5);
    let beta = random_tensor(&mut rng, &[3], -0.5, 0.5);
    for (name, mode) in [("batchnorm2d_train", BnMode::Train), ("batchnorm2d_eval", BnMode::Eval)] {
        let running = ChannelStats {
            mean: vec![0.1, -0.2, 0.3],
            var: vec![0.9, 1.2, 0.5],
        };
        reports.push(check(
            name,
            &[bn_x.clone(), gamma.clone(), beta.clone()],
            &[0, 1, 2],
            &|t, v| {
                let (y, _) = t.batchnorm2d(v[0], v[1], v[2], &running, mode)?;
                weighted_sum(t, y, 15)
            },
            tol,
            probes,
            seed,
        )?);
    }

    let act_in = away_from_zero(&mut rng, &[2, 3, 4, 4], 0.05);
    for (name, kind) in [("relu", Activation::Relu), ("sigmoid", Activation::Sigmoid)] {
        reports.push(check(
            name,
            std::slice::from_ref(&act_in),
            &[0],
            &|t, v| {
                let y = t.activation(v[0], kind)?;
                weighted_sum(t, y, 16)
            },
            1e-6,
            probes,
            seed,
        )?);
    }

    let c1 = random_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    let c2 = random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    reports.push(check(
        "concat_channels",
        &[c1.clone(), c2.clone()],
        &[0, 1],
        &|t, v| {
            let y = t.concat_channels(&[v[0], v[1]])?;
            weighted_sum(t, y, 17)
        },
        1e-6,
        probes,
        seed,
    )?);

    let c3 = random_tensor(&mut rng, &[2, 2, 3, 3], -1.0, 1.0);
    reports.push(check(
        "elementwise_add",
        &[c1.clone(), c3.clone()],
        &[0, 1],
        &|t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y, 18)
        },
        1e-6,
        probes,
        seed,
    )?);
    reports.push(check(
        "elementwise_mul",
        &[c1.clone(), c3],
        &[0, 1],
        &|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y, 19)
        },
        1e-6,
        probes,
        seed,
    )?);

    let scale_x = random_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0);
    let shared = random_tensor(&mut rng, &[3], -1.0, 1.0);
    let per_sample = random_tensor(&mut rng, &[2, 3], -1.0, 1.0);
    for (name, a) in [("channel_scale", shared), ("channel_scale_per_sample", per_sample)] {
        reports.push(check(
            name,
            &[scale_x.clone(), a],
            &[0, 1],
            &|t, v| {
                let y = t.channel_scale(v[0], v[1])?;
                weighted_sum(t, y, 20)
            },
            1e-6,
            probes,
            seed,
        )?);
    }

    let group_in = random_tensor(&mut rng, &[2, 8, 3, 3], -1.0, 1.0);
    reports.push(check(
        "channel_group_sum",
        std::slice::from_ref(&group_in),
        &[0],
        &|t, v| {
            let y = t.channel_group_sum(v[0], 4)?;
            weighted_sum(t, y, 21)
        },
        1e-6,
        probes,
        seed,
    )?);
    reports.push(check(
        "global_avg_pool",
        &[group_in],
        &[0],
        &|t, v| {
            let y = t.global_avg_pool(v[0])?;
            weighted_sum(t, y, 22)
        },
        1e-6,
        probes,
        seed,
    )?);

    let p = random_tensor(&mut rng, &[2, 1, 4, 4], 0.05, 0.95);
    let y = binary_tensor(&mut rng, &[2, 1, 4, 4]);
    reports.push(check(
        "bce_loss",
        &[p.clone(), y.clone()],
        &[0],
        &|t, v| t.bce_loss(v[0], v[1], BCE_CLAMP_EPS),
        1e-5,
        probes,
        seed,
    )?);
    reports.push(check(
        "mae_loss",
        &[p, y],
        &[0],
        &|t, v| t.mae_loss(v[0], v[1]),
        1e-6,
        probes,
        seed,
    )?);

    Ok(reports)
}

/// Loss value, plus the flat trainable gradient when asked for.
type NetworkLoss<'a, N> = dyn Fn(&N, bool) -> crate::training::Result<(f64, Option<Vec<f64>>)> + 'a;

/// Compares parameter gradients of a whole-network loss against central
/// differences taken by perturbing the parameter store.
///
/// `loss` evaluates the scalar for a given store; with `grads` set it also
/// runs backward and returns the flat trainable gradient.
fn check_params<N: Network + Clone>(
    name: &str,
    net: &N,
    loss: &NetworkLoss<'_, N>,
    tolerance: f64,
    probes_per_tensor: usize,
    seed: u64,
) -> crate::training::Result<CheckReport> {
    let h = E2E_STEP;
    let (_, grads) = loss(net, true)?;
    let grads = grads.expect("gradient requested");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = net.clone();
    let trainable: Vec<usize> = (0..net.store().len())
        .filter(|&i| net.store().tensors()[i].requires_grad)
        .collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut offset = 0;
    for &ti in &trainable {
        let numel = net.store().tensors()[ti].numel();
        let picks = sample(&mut rng, numel, probes_per_tensor.min(numel)).into_vec();
        for j in picks {
            let orig = net.store().tensors()[ti].data()[j];
            let mut at = |v: f64| -> crate::training::Result<f64> {
                work.store_mut().tensors_mut()[ti].data_mut()[j] = v;
                Ok(loss(&work, false)?.0)
            };
            let plus = at(orig + h)?;
            let minus = at(orig - h)?;
            at(orig)?;
            numeric.push((plus - minus) / (2.0 * h));
            analytic.push(grads[offset + j]);
        }
        offset += numel;
    }
    Ok(CheckReport {
        name: name.to_string(),
        rel_err: relative_error(&analytic, &numeric),
        tolerance,
        probed: analytic.len(),
    })
}

fn flat_grads_after(store: &ParamStore, tape: &Tape, records: &[&crate::model::ForwardRecord]) -> Vec<f64> {
    let mut scratch = store.clone();
    scratch.zero_grad();
    for r in records {
        scratch.accumulate_grads(tape, r);
    }
    scratch.flat_grads()
}

/// Moves BatchNorm affine parameters and conv biases off their initial
/// values. At initialization every BN shift is 0, which puts ReLUs after
/// single-element BatchNorms exactly on their kink.
fn generic_point(store: &mut ParamStore, rng: &mut impl Rng) {
    let names: Vec<String> = store.names().to_vec();
    for name in names {
        let t = store.tensors()[store.names().iter().position(|n| *n == name).expect("listed")].clone();
        let (lo, hi) = if name.ends_with(".gamma") {
            (0.5, 1.5)
        } else if name.ends_with(".beta") {
            (-0.5, 0.5)
        } else if name.ends_with(".bias") {
            (-0.1, 0.1)
        } else {
            continue;
        };
        store
            .set(&name, random_tensor(rng, t.shape(), lo, hi))
            .expect("same shape");
    }
}

/// End-to-end checks of the composite generator loss (w.r.t. the generator
/// parameters) and the discriminator loss (w.r.t. its parameters) at the
/// default channel plan on a `1×3×16×16` input.
pub fn end_to_end_suite(seed: u64) -> crate::training::Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = Generator::build(ChannelPlan::generator_default(), seed)?;
    let mut d = Discriminator::build(ChannelPlan::discriminator_default(), seed.wrapping_add(1))?;
    generic_point(g.store_mut(), &mut rng);
    generic_point(d.store_mut(), &mut rng);
    let d = d;
    let fundus = random_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0);
    let vessel = binary_tensor(&mut rng, &[1, 1, 16, 16]);
    let tol = 1e-3;
    let probes = 2;

    let g_report = check_params(
        "g_loss_end_to_end",
        &g,
        &|g: &Generator, want_grad| {
            let mut tape = Tape::new();
            let f = tape.constant(fundus.clone());
            let v = tape.constant(vessel.clone());
            let config = if want_grad { PassConfig::train() } else { PassConfig::frozen() };
            let out = g_loss(
                &mut tape,
                g,
                config,
                &d,
                f,
                v,
                LossWeights::default(),
                LossFlags::default(),
                BCE_CLAMP_EPS,
            )?;
            let value = tape.value(out.loss).data()[0];
            if !want_grad {
                return Ok((value, None));
            }
            tape.backward(out.loss)?;
            Ok((value, Some(flat_grads_after(g.store(), &tape, &[&out.g_record]))))
        },
        tol,
        probes,
        seed,
    )?;

    let fake = random_tensor(&mut rng, &[1, 1, 16, 16], 0.05, 0.95);
    let d_report = check_params(
        "d_loss_end_to_end",
        &d,
        &|d: &Discriminator, want_grad| {
            let mut tape = Tape::new();
            let f = tape.constant(fundus.clone());
            let v = tape.constant(vessel.clone());
            let fk = tape.constant(fake.clone());
            let config = if want_grad { PassConfig::train() } else { PassConfig::frozen() };
            let (loss, records) = d_loss(&mut tape, d, config, f, v, fk, BCE_CLAMP_EPS)?;
            let value = tape.value(loss).data()[0];
            if !want_grad {
                return Ok((value, None));
            }
            tape.backward(loss)?;
            let recs: Vec<_> = records.iter().collect();
            Ok((value, Some(flat_grads_after(d.store(), &tape, &recs))))
        },
        tol,
        probes,
        seed,
    )?;
    Ok(vec![g_report, d_report])
}

/// Uniform values with all pairwise gaps well above the FD step.
fn distinct_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..numel).map(|i| i as f64 * 0.01).collect();
    for i in (1..numel).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape, values).expect("positive shape")
}

fn away_from_zero(rng: &mut impl Rng, shape: &[usize], margin: f64) -> Tensor {
    let mut t = random_tensor(rng, shape, -2.0, 2.0);
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
    t
}

fn binary_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
    Tensor::new(shape, data).expect("positive shape")
}
