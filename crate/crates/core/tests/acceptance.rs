//! Acceptance criteria, one PASS/FAIL line each.
//!
//! A FAIL is reported, not hidden; with `ACCEPTANCE_STRICT=1` any FAIL also
//! makes the process exit nonzero. A harness error (panic) always does.
//!
//! The oracles here are written independently of the library code they
//! check.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segan::cli::{load_generator, weights};
use segan::data::{save_dir, synth_generate, Sample, SynthSpec};
use segan::eval::{compute_metrics, evaluate, otsu_threshold, roc_auc, ConfusionCounts};
use segan::gradcheck::{end_to_end_suite, primitive_suite};
use segan::model::{
    ChannelPlan, Discriminator, Forward, Generator, MsfrbBlock, Network, ParamStore, PassConfig,
};
use segan::tensor::{Tape, Tensor};
use segan::training::{training_bce, LossFlags, TrainConfig, Trainer};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// 1 -----------------------------------------------------------------------

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let prims = match primitive_suite(0) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("primitive suite errored: {e}")),
    };
    let e2e = match end_to_end_suite(0) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("end-to-end suite errored: {e}")),
    };
    let elapsed = start.elapsed();
    let mut bad: Vec<String> = prims
        .iter()
        .filter(|r| !(r.passed() && r.tolerance <= 1e-4))
        .map(|r| r.to_string())
        .collect();
    bad.extend(
        e2e.iter()
            .filter(|r| !(r.passed() && r.tolerance <= 1e-3))
            .map(|r| r.to_string()),
    );
    let has_g = e2e.iter().any(|r| r.name == "g_loss_end_to_end");
    let worst_prim = prims.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let worst_e2e = e2e.iter().map(|r| r.rel_err).fold(0.0, f64::max);
    let fast = elapsed <= Duration::from_secs(60);
    outcome(
        bad.is_empty() && has_g && fast,
        format!(
            "{} primitive checks (worst rel_err {worst_prim:.2e}), {} end-to-end (worst {worst_e2e:.2e}), {:.1}s{}",
            prims.len(),
            e2e.len(),
            elapsed.as_secs_f64(),
            if bad.is_empty() { String::new() } else { format!("; failing: {}", bad.join(" | ")) }
        ),
    )
}

// 2 -----------------------------------------------------------------------

fn shape_and_range() -> Outcome {
    let g = Generator::build(ChannelPlan::generator_default(), 11).unwrap();
    let d = Discriminator::build(ChannelPlan::discriminator_default(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sizes = [16, 32, 48, 64];
    let mut problems = Vec::new();
    let mut checked = 0;
    for &h in &sizes {
        for &w in &sizes {
            let img = uniform(&mut rng, &[1, 3, h, w], 0.0, 1.0);
            let vmap = uniform(&mut rng, &[1, 1, h, w], 0.0, 1.0);
            for config in [PassConfig::train(), PassConfig::eval()] {
                let mut tape = Tape::new();
                let x = tape.constant(img.clone());
                let v = tape.constant(vmap.clone());
                let g_out = {
                    let mut ctx = Forward::new(&mut tape, g.store(), config);
                    g.forward(&mut ctx, x).unwrap()
                };
                let d_out = {
                    let mut ctx = Forward::new(&mut tape, d.store(), config);
                    d.forward(&mut ctx, x, v).unwrap()
                };
                for (who, out) in [("G", g_out), ("D", d_out)] {
                    let t = tape.value(out);
                    checked += 1;
                    if t.shape() != [1, 1, h, w] {
                        problems.push(format!("{who} {h}x{w}: shape {:?}", t.shape()));
                    }
                    if !t.data().iter().all(|&p| p > 0.0 && p < 1.0) {
                        problems.push(format!("{who} {h}x{w}: value outside (0,1)"));
                    }
                }
            }
        }
    }
    outcome(
        problems.is_empty(),
        format!("{checked} outputs over 16 sizes, train and eval mode; {}", describe(&problems)),
    )
}

fn describe(problems: &[String]) -> String {
    if problems.is_empty() {
        "no violations".into()
    } else {
        problems.join("; ")
    }
}

// 3 -----------------------------------------------------------------------

fn msfrb_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut problems = Vec::new();
    // Integer-valued inputs keep every partial sum exact in f64.
    for trial in 0..200 {
        let k = [1usize, 2, 4, 8][trial % 4];
        let (n, groups, h, w) = (rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..5), rng.random_range(1..5));
        let shape = [n, groups * k, h, w];
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.random_range(-1000i64..1000) as f64).collect();
        let expected: i64 = data.iter().map(|&v| v as i64).sum();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&shape, data).unwrap());
        let y = tape.channel_group_sum(x, k).unwrap();
        let out = tape.value(y);
        if out.shape() != [n, groups, h, w] || out.data().iter().sum::<f64>() != expected as f64 {
            problems.push(format!("group sum trial {trial}"));
        }
    }

    // Shape table at the default plan on a 64x64 input: stage s sees
    // C_s x (64/2^(s-1))^2 features and hands C_(s-1) x (64/2^(s-2))^2 on.
    let plan = ChannelPlan::generator_default();
    let c = [16, 32, 64, 128, 256];
    let mut table = Vec::new();
    for s in 2..=5usize {
        let side = 64 >> (s - 1);
        let x_s = [1, c[s - 1], side, side];
        let x_1 = [1, c[0], 64, 64];
        let want = vec![1, c[s - 2], 2 * side, 2 * side];
        let mut store = ParamStore::default();
        let block = MsfrbBlock::new(&mut store, &mut rng, &plan, s);
        let mut tape = Tape::new();
        let vars: Vec<_> = [x_s, x_s, x_1].iter().map(|sh| tape.constant(uniform(&mut rng, sh, -1.0, 1.0))).collect();
        let mut ctx = Forward::new(&mut tape, &store, PassConfig::train());
        let got = block.forward(&mut ctx, vars[0], vars[1], vars[2]).unwrap();
        let got = tape.shape(got).to_vec();
        table.push(format!("s={s}: {x_s:?} -> {got:?}"));
        if got != want {
            problems.push(format!("stage {s}: {got:?} != {want:?}"));
        }
    }
    outcome(
        problems.is_empty(),
        format!("200 exact group sums; {}; {}", table.join(", "), describe(&problems)),
    )
}

// 4 -----------------------------------------------------------------------

fn attention_neutrality() -> Outcome {
    let on_plan = ChannelPlan::generator_default();
    let off_plan = ChannelPlan {
        enable_am: false,
        ..ChannelPlan::generator_default()
    };
    let on = Generator::build(on_plan, 21).unwrap();
    let mut off = Generator::build(off_plan, 21).unwrap();
    let delta = on.count_parameters() as i64 - off.count_parameters() as i64;
    // Same parameters in both, so any output difference comes from attention.
    for (name, t) in on.store().iter() {
        off.store_mut().set(name, t.clone()).unwrap();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = uniform(&mut rng, &[2, 3, 32, 32], 0.0, 1.0);
    let run = |g: &Generator, config: PassConfig| {
        let mut tape = Tape::new();
        let x = tape.constant(img.clone());
        let mut ctx = Forward::new(&mut tape, g.store(), config);
        let y = g.forward(&mut ctx, x).unwrap();
        tape.value(y).clone()
    };
    let forced = run(
        &on,
        PassConfig {
            attention_override: Some(1.0),
            ..PassConfig::train()
        },
    );
    let reference = run(&off, PassConfig::train());
    let learned = run(&on, PassConfig::train());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let identical = bits(&forced) == bits(&reference);
    outcome(
        delta == 0 && identical && learned != reference,
        format!(
            "parameter delta {delta}; forced Atten=1 output {} AM-off output; learned attention {}",
            if identical { "bit-identical to" } else { "DIFFERS from" },
            if learned != reference { "changes the output" } else { "has no effect" }
        ),
    )
}

// 5 -----------------------------------------------------------------------

fn parameter_overhead() -> Outcome {
    let on = Generator::build(ChannelPlan::generator_default(), 0).unwrap();
    let plain = Generator::build(
        ChannelPlan {
            enable_msfrb: false,
            enable_am: false,
            ..ChannelPlan::generator_default()
        },
        0,
    )
    .unwrap();
    let ratio = on.count_parameters() as f64 / plain.count_parameters() as f64;
    outcome(
        ratio > 1.0 && ratio <= 1.3,
        format!("{} / {} = {ratio:.4}", on.count_parameters(), plain.count_parameters()),
    )
}

// 6 -----------------------------------------------------------------------

/// Fraction of (positive, negative) pairs ranked correctly, ties half.
fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Quantize each value into its 1/256 bin, then try every cut and keep the
/// one with the largest between-class variance `w0·w1·(μ0−μ1)²`, computed
/// as exact rationals over the explicit pixel partition.
fn exhaustive_otsu(values: &[f64]) -> f64 {
    let bin = |v: f64| -> i64 {
        // Bin b covers (b/256, (b+1)/256]; 0 lands in bin 0.
        let mut b = 0i64;
        while b < 255 && v > (b + 1) as f64 / 256.0 {
            b += 1;
        }
        b
    };
    let bins: Vec<i64> = values.iter().map(|&v| bin(v)).collect();
    let total = BigRational::from_integer((bins.len() as i64).into());
    let mut best: Option<(i64, BigRational)> = None;
    for cut in 0..255i64 {
        let (low, high): (Vec<i64>, Vec<i64>) = bins.iter().partition(|&&b| b <= cut);
        let var = if low.is_empty() || high.is_empty() {
            BigRational::from_integer(0.into())
        } else {
            let mean = |xs: &[i64]| {
                BigRational::new(xs.iter().sum::<i64>().into(), (xs.len() as i64).into())
            };
            let w0 = BigRational::from_integer((low.len() as i64).into()) / &total;
            let w1 = BigRational::from_integer((high.len() as i64).into()) / &total;
            let d = mean(&low) - mean(&high);
            w0 * w1 * &d * &d
        };
        if best.as_ref().is_none_or(|(_, v)| var > *v) {
            best = Some((cut, var));
        }
    }
    (best.unwrap().0 + 1) as f64 / 256.0
}

fn metrics_oracle() -> Outcome {
    let mut problems = Vec::new();

    let r = compute_metrics(&ConfusionCounts {
        tp: 8,
        fp: 5,
        tn: 85,
        fn_: 2,
    });
    // By hand: 8/10, 85/90, 8/13, 93/100, sqrt(0.8*17/18), 2*8/(2*8+5+2).
    let hand = [
        ("se", r.se, 0.8),
        ("sp", r.sp, 0.94444),
        ("pr", r.pr, 0.61538),
        ("acc", r.acc, 0.93),
        ("g", r.g, 0.86923),
        ("f1", r.f1, 0.69565),
    ];
    for (k, got, want) in hand {
        if !got.is_some_and(|g| (g - want).abs() <= 1e-4) {
            problems.push(format!("{k}={got:?} vs {want}"));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_auc = 0.0f64;
    let mut auc_trials = 0;
    while auc_trials < 1000 {
        let n = rng.random_range(2..300);
        // Coarse levels force plenty of ties.
        let levels = rng.random_range(2..40) as f64;
        let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0.0..1.0) * levels).floor() / levels).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        let (s_in, l_in): (Vec<f64>, Vec<bool>) = scores
            .iter()
            .zip(&labels)
            .zip(&mask)
            .filter(|(_, &m)| m)
            .map(|((&s, &l), _)| (s, l))
            .unzip();
        if !(l_in.iter().any(|&l| l) && l_in.iter().any(|&l| !l)) {
            continue;
        }
        auc_trials += 1;
        let (_, auc) = roc_auc(&scores, &labels, &mask).unwrap();
        worst_auc = worst_auc.max((auc - pairwise_auc(&s_in, &l_in)).abs());
    }
    if worst_auc > 1e-12 {
        problems.push(format!("AUC deviates by {worst_auc:e}"));
    }

    let mut otsu_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..400);
        let values: Vec<f64> = match rng.random_range(0..3) {
            0 => (0..n).map(|_| rng.random_range(0.0..=1.0)).collect(),
            // exact bin edges and a few clustered modes
            1 => (0..n).map(|_| rng.random_range(0..=256) as f64 / 256.0).collect(),
            _ => {
                let modes: Vec<f64> = (0..rng.random_range(1..4)).map(|_| rng.random_range(0.0..1.0)).collect();
                (0..n)
                    .map(|_| {
                        let m = modes[rng.random_range(0..modes.len())];
                        (m + rng.random_range(-0.05..0.05)).clamp(0.0, 1.0)
                    })
                    .collect()
            }
        };
        let t = otsu_threshold(&values, &vec![true; n]).unwrap();
        if t != exhaustive_otsu(&values) {
            otsu_mismatch += 1;
        }
    }
    if otsu_mismatch > 0 {
        problems.push(format!("Otsu differs on {otsu_mismatch} of 1000 histograms"));
    }
    outcome(
        problems.is_empty(),
        format!(
            "hand metrics within 1e-4; AUC worst |diff| {worst_auc:.1e} over 1000 trials; Otsu {} of 1000 exact; {}",
            1000 - otsu_mismatch,
            describe(&problems)
        ),
    )
}

// 7, 8 --------------------------------------------------------------------

const OVERFIT_STEPS: usize = 600;

struct OverfitRun {
    bce_at_10: f64,
    bce_final: f64,
    se: Option<f64>,
    acc: Option<f64>,
    steps: usize,
    elapsed: Duration,
}

fn overfit_data() -> Vec<Sample> {
    (0..4).map(|s| synth_generate(&SynthSpec::with_seed(s)).unwrap()).collect()
}

fn overfit(flags: LossFlags) -> OverfitRun {
    let start = Instant::now();
    let data = overfit_data();
    let g = Generator::build(ChannelPlan::generator_default(), 1).unwrap();
    let d = Discriminator::build(ChannelPlan::discriminator_default(), 2).unwrap();
    let config = TrainConfig {
        flags,
        holdout: false,
        ..TrainConfig::default()
    };
    let eps = config.clamp_eps;
    let mut t = Trainer::new(g, d, config).unwrap();
    let mut bce_at_10 = f64::NAN;
    let mut round = 0;
    while t.g_steps < OVERFIT_STEPS {
        round += 1;
        t.run_round(&data, round).unwrap();
        if t.g_steps == 10 {
            bce_at_10 = training_bce(&t.g, &data, 2, eps).unwrap();
        }
    }
    let bce_final = training_bce(&t.g, &data, 2, eps).unwrap();
    let report = evaluate(&t.g, &data, true).unwrap().report;
    OverfitRun {
        bce_at_10,
        bce_final,
        se: report.se,
        acc: report.acc,
        steps: t.g_steps,
        elapsed: start.elapsed(),
    }
}

fn overfit_passes(r: &OverfitRun) -> bool {
    r.steps <= 2000
        && r.bce_final <= 0.5 * r.bce_at_10
        && r.se.is_some_and(|s| s >= 0.85)
        && r.acc.is_some_and(|a| a >= 0.95)
        && r.elapsed <= Duration::from_secs(30 * 60)
}

fn show(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.4}"))
}

fn overfit_line(r: &OverfitRun) -> String {
    format!(
        "{} G steps, BCE {:.4} -> {:.4} (ratio {:.3}), Se {}, Acc {}, {:.0}s",
        r.steps,
        r.bce_at_10,
        r.bce_final,
        r.bce_final / r.bce_at_10,
        show(r.se),
        show(r.acc),
        r.elapsed.as_secs_f64()
    )
}

// 9 -----------------------------------------------------------------------

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir(&data).unwrap();
    let samples: Vec<Sample> = (0..3)
        .map(|s| {
            synth_generate(&SynthSpec {
                width: 32,
                height: 32,
                ..SynthSpec::with_seed(40 + s)
            })
            .unwrap()
        })
        .collect();
    save_dir(&data, &samples).unwrap();
    let train = |name: &str| -> Result<Vec<u8>, String> {
        let out = tmp.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_segan"))
            .args(["train", "--data", path(&data), "--out", path(&out), "--seed", "17"])
            .env_remove("SEGAN_SEED")
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(String::from_utf8_lossy(&o.stderr).into_owned());
        }
        std::fs::read(&out).map_err(|e| e.to_string())
    };
    let (a, b) = match (train("a.sgnw"), train("b.sgnw")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("train failed: {e}")),
    };
    let logs_equal = std::fs::read(tmp.path().join("a.sgnw.log")).ok() == std::fs::read(tmp.path().join("b.sgnw.log")).ok();

    // load then save reproduces the file, and the loaded tensors are the
    // decoded ones bit for bit
    let g = load_generator(&tmp.path().join("a.sgnw")).unwrap();
    let resaved = weights::encode(&g);
    let decoded = weights::decode(&a).unwrap();
    let exact = decoded
        .tensors
        .iter()
        .zip(g.store().iter())
        .all(|((n1, t1), (n2, t2))| {
            n1 == n2 && t1.shape() == t2.shape() && t1.data().iter().zip(t2.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        });
    outcome(
        a == b && logs_equal && resaved == a && exact,
        format!(
            "two train runs: weights {} ({} bytes), logs {}; load/save round trip {}",
            if a == b { "identical" } else { "DIFFER" },
            a.len(),
            if logs_equal { "identical" } else { "DIFFER" },
            if resaved == a && exact { "parameter-exact" } else { "NOT exact" }
        ),
    )
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn main() {
    let mut failures = 0;
    let mut report = |n: usize, name: &str, o: Outcome| {
        println!("criterion {n} {name}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failures += 1;
        }
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "shape and range", shape_and_range());
    report(3, "msfrb algebra", msfrb_algebra());
    report(4, "attention neutrality", attention_neutrality());
    report(5, "parameter overhead", parameter_overhead());
    report(6, "metrics oracle", metrics_oracle());
    report(9, "determinism", determinism());

    let full = overfit(LossFlags::default());
    report(7, "overfit run", outcome(overfit_passes(&full), overfit_line(&full)));
    let adv_only = overfit(LossFlags {
        gan: true,
        bce: false,
        mae: false,
    });
    let collapsed = !adv_only.se.is_some_and(|s| s >= 0.5);
    report(
        8,
        "ablation direction",
        outcome(
            collapsed && overfit_passes(&full),
            format!(
                "without BCE and MAE: Se {}, Acc {} after {} steps; full loss {}",
                show(adv_only.se),
                show(adv_only.acc),
                adv_only.steps,
                if overfit_passes(&full) { "passes criterion 7" } else { "fails criterion 7" }
            ),
        ),
    );

    if failures == 0 {
        println!("all criteria passed");
        return;
    }
    println!("{failures} criteria failed");
    if std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
