//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness so every line is always printed. The
//! process fails when any enforced criterion fails; report-only lines are
//! marked as such.

use std::path::Path;
use std::time::{Duration, Instant};

use blazeneo::bench::{harness_overhead_ms, measure, SleepTarget, Stats, TIMED_ITERATIONS};
use blazeneo::cli;
use blazeneo::data::synthetic::{synthetic_samples_with, write_dataset};
use blazeneo::data::{AugmentConfig, ClassMap};
use blazeneo::losses::{
    bce, cce, focal_tversky_loss, total_loss, tversky_loss, LossConfig, MaskedTarget, UNDEFINED,
};
use blazeneo::metrics::{ConfusionTallies, Tally};
use blazeneo::network::{
    channel_softmax, sigmoid, AggregationScheme, BlazeNeo, HeadVariant, MainMap, ModelConfig, PredictionBundle,
};
use blazeneo::ops::scalar;
use blazeneo::topology::{layer_width, skip_sources};
use blazeneo::trainer::{evaluate, lr_at, train, OptimConfig, TrainConfig};
use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PARAM_TARGET: f64 = 17_143_324.0;
const GFLOPS_TARGET: f64 = 11.06;
/// Harness overhead allowance for the sleeping stub, in ms.
const HARNESS_OVERHEAD_MS: f64 = 2.0;

enum Verdict {
    Pass,
    Fail,
    /// Report-only criterion.
    Report,
}

struct Outcome {
    verdict: Verdict,
    detail: String,
}

fn pass_if(ok: bool, detail: String) -> Outcome {
    Outcome {
        verdict: if ok { Verdict::Pass } else { Verdict::Fail },
        detail,
    }
}

// ---------------------------------------------------------------- 1

fn oracle_sources(l: usize) -> Vec<usize> {
    // every power of two up to l, tested by division
    let mut out = Vec::new();
    let mut p = 1;
    while p <= l {
        if l % p == 0 {
            out.push(l - p);
        }
        p *= 2;
    }
    out
}

fn oracle_width(l: usize, k: usize, m: f64) -> usize {
    let mut x = 0;
    let mut v = l;
    while v % 2 == 0 {
        v /= 2;
        x += 1;
    }
    let mut raw = k as f64;
    for _ in 0..x {
        raw *= m;
    }
    let f = (raw + 1e-9).floor() as usize;
    f - f % 2
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0;
    for l in 0..256 {
        if skip_sources(l) != oracle_sources(l) {
            mismatches += 1;
        }
        for k in [14, 16, 20, 40, 160] {
            match layer_width(l, k, 1.7) {
                Ok(w) if l > 0 && w == oracle_width(l, k, 1.7) => {}
                Err(_) if l == 0 => {}
                _ => mismatches += 1,
            }
        }
    }
    let t = start.elapsed();
    pass_if(
        mismatches == 0 && t < Duration::from_secs(1),
        format!("{mismatches} mismatches over l in 0..256, {:.1} ms", t.as_secs_f64() * 1e3),
    )
}

// ---------------------------------------------------------------- 2, 3

fn dha() -> BlazeNeo {
    BlazeNeo::build(
        ModelConfig {
            variant: HeadVariant::Multi,
            scheme: AggregationScheme::Dha,
            rfb_channels: 32,
        },
        DType::F32,
        0,
    )
    .unwrap()
}

fn criterion_2(model: &BlazeNeo) -> Outcome {
    let n = model.inference_param_count();
    let rel = (n as f64 - PARAM_TARGET) / PARAM_TARGET;
    pass_if(
        rel.abs() <= 0.10,
        format!(
            "inference params {n} ({:+.2}% vs {PARAM_TARGET}), training params {}",
            rel * 100.0,
            model.training_param_count()
        ),
    )
}

fn criterion_3(model: &BlazeNeo) -> Outcome {
    let ops = model.cost(352, 352).unwrap();
    let gflops = ops.flops() as f64 / 1e9;
    let rel = (gflops - GFLOPS_TARGET) / GFLOPS_TARGET;
    pass_if(
        rel.abs() <= 0.15,
        format!(
            "{gflops:.3} GFLOPs ({:+.1}% vs {GFLOPS_TARGET}); MACs {} ({:.3} G)",
            rel * 100.0,
            ops.macs,
            ops.macs as f64 / 1e9
        ),
    )
}

// ---------------------------------------------------------------- 4

fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn t(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

/// Norm-wise relative error between autograd and central differences.
fn grad_rel_err(f: &dyn Fn(&Tensor) -> Tensor, x: &Tensor) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let g: Vec<f64> = f(var.as_tensor())
        .backward()
        .unwrap()
        .get(&var)
        .unwrap()
        .flatten_all()
        .unwrap()
        .to_vec1()
        .unwrap();
    let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
    let eps = 1e-6;
    let (mut diff, mut norm_a, mut norm_b) = (0.0, 0.0, 0.0);
    for i in 0..base.len() {
        let eval = |d: f64| {
            let mut p = base.clone();
            p[i] += d;
            scalar(&f(&Tensor::from_vec(p, x.shape(), x.device()).unwrap())).unwrap()
        };
        let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
        diff += (fd - g[i]).powi(2);
        norm_a += fd * fd;
        norm_b += g[i] * g[i];
    }
    diff.sqrt() / norm_a.sqrt().max(norm_b.sqrt()).max(1e-12)
}

fn random_target(rng: &mut ChaCha8Rng, n: usize) -> MaskedTarget {
    loop {
        let labels: Vec<u8> = (0..n * 16).map(|_| rng.gen_range(0..4u8)).collect();
        // keep at least one defined pixel per batch
        if labels.iter().any(|&l| l != UNDEFINED) {
            return MaskedTarget::new(n, 4, 4, labels).unwrap();
        }
    }
}

fn bundle_from_logits(variant: HeadVariant, main: &Tensor, aux: &Tensor) -> PredictionBundle {
    match variant {
        HeadVariant::Sb => {
            let p = sigmoid(main).unwrap();
            PredictionBundle {
                main: MainMap::Binary {
                    neo: p.narrow(1, 0, 1).unwrap().squeeze(1).unwrap(),
                    non: p.narrow(1, 1, 1).unwrap().squeeze(1).unwrap(),
                },
                aux: None,
            }
        }
        HeadVariant::St => PredictionBundle {
            main: MainMap::Trinary(channel_softmax(main).unwrap()),
            aux: None,
        },
        HeadVariant::Multi => PredictionBundle {
            main: MainMap::Trinary(channel_softmax(main).unwrap()),
            aux: Some(sigmoid(aux).unwrap().squeeze(1).unwrap()),
        },
    }
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let cfg = LossConfig::default();
    let dev = Device::Cpu;
    let mut worst: f64 = 0.0;
    let mut additivity_ok = true;
    let mut masking_ok = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2;
        let target = random_target(&mut rng, n);
        let valid = target.valid_mask(DType::F64, &dev).unwrap();
        let polyp = target.polyp_map(DType::F64, &dev).unwrap();
        let one_hot = target.trinary_one_hot(DType::F64, &dev).unwrap();

        // single-map losses, differentiated through a sigmoid / softmax
        let logits1 = t(rand_vec(&mut rng, n * 16, -3.0, 3.0), &[n, 4, 4]);
        let logits3 = t(rand_vec(&mut rng, n * 48, -3.0, 3.0), &[n, 3, 4, 4]);
        let checks: Vec<(&str, Box<dyn Fn(&Tensor) -> Tensor>, &Tensor)> = vec![
            (
                "bce",
                Box::new(|x: &Tensor| bce(&sigmoid(x).unwrap(), &polyp, Some(&valid), cfg.smooth).unwrap()),
                &logits1,
            ),
            (
                "tversky",
                Box::new(|x: &Tensor| tversky_loss(&sigmoid(x).unwrap(), &polyp, &cfg, None).unwrap()),
                &logits1,
            ),
            (
                "cce",
                Box::new(|x: &Tensor| cce(&channel_softmax(x).unwrap(), &one_hot, &valid, cfg.smooth).unwrap()),
                &logits3,
            ),
            (
                "focal tversky",
                Box::new(|x: &Tensor| {
                    focal_tversky_loss(&channel_softmax(x).unwrap(), &one_hot, &cfg, Some(&valid)).unwrap()
                }),
                &logits3,
            ),
        ];
        for (_, f, x) in &checks {
            worst = worst.max(grad_rel_err(f.as_ref(), x));
        }

        // per-variant totals
        let aux_logits = t(rand_vec(&mut rng, n * 16, -3.0, 3.0), &[n, 1, 4, 4]);
        for variant in HeadVariant::ALL {
            let k = if variant == HeadVariant::Sb { 2 } else { 3 };
            let main = t(rand_vec(&mut rng, n * k * 16, -3.0, 3.0), &[n, k, 4, 4]);
            let f = |x: &Tensor| {
                total_loss(&bundle_from_logits(variant, x, &aux_logits), &target, variant, &cfg)
                    .unwrap()
                    .total
            };
            worst = worst.max(grad_rel_err(&f, &main));
            if variant == HeadVariant::Multi {
                let fa = |a: &Tensor| {
                    total_loss(&bundle_from_logits(variant, &main, a), &target, variant, &cfg)
                        .unwrap()
                        .total
                };
                worst = worst.max(grad_rel_err(&fa, &aux_logits));
            }

            let parts = total_loss(&bundle_from_logits(variant, &main, &aux_logits), &target, variant, &cfg).unwrap();
            let (tot, m, a) = (
                scalar(&parts.total).unwrap(),
                scalar(&parts.main).unwrap(),
                scalar(&parts.aux).unwrap(),
            );
            additivity_ok &= tot == m + a;

            // perturb the main prediction only where truth is undefined
            let bundle = bundle_from_logits(variant, &main, &aux_logits);
            let undefined: Vec<f64> = target.labels.iter().map(|&l| (l == UNDEFINED) as u8 as f64).collect();
            let noise = rand_vec(&mut rng, n * 16, -0.3, 0.3);
            let shift = |p: &Tensor, ch: usize| -> Tensor {
                let delta: Vec<f64> = noise.iter().zip(&undefined).map(|(z, u)| z * u * (ch as f64 + 1.0) * 0.3).collect();
                let d = t(delta, &[n, 4, 4]);
                (p + d).unwrap().clamp(1e-3, 1.0 - 1e-3).unwrap()
            };
            let perturbed = match &bundle.main {
                MainMap::Binary { neo, non } => MainMap::Binary {
                    neo: shift(neo, 0),
                    non: shift(non, 1),
                },
                MainMap::Trinary(tri) => {
                    let chans: Vec<Tensor> = (0..3)
                        .map(|c| shift(&tri.narrow(1, c, 1).unwrap().squeeze(1).unwrap(), c).unsqueeze(1).unwrap())
                        .collect();
                    MainMap::Trinary(Tensor::cat(&chans, 1).unwrap())
                }
            };
            let moved = PredictionBundle {
                main: perturbed,
                aux: bundle.aux.clone(),
            };
            let m2 = scalar(&total_loss(&moved, &target, variant, &cfg).unwrap().main).unwrap();
            masking_ok &= m2 == m;
        }
    }
    let t_el = start.elapsed();
    pass_if(
        worst < 1e-4 && additivity_ok && masking_ok && t_el < Duration::from_secs(60),
        format!(
            "worst gradient rel. err {worst:.2e}, additivity {}, masking invariance {}, {:.1} s",
            if additivity_ok { "exact" } else { "BROKEN" },
            if masking_ok { "exact" } else { "BROKEN" },
            t_el.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 5

fn brute_force(pred: &ClassMap, truth: &ClassMap) -> [(u64, u64, u64); 3] {
    // (intersection, predicted, ground truth) for seg, non, neo
    let mut out = [(0u64, 0u64, 0u64); 3];
    for i in 0..pred.labels.len() {
        let (p, g) = (pred.labels[i], truth.labels[i]);
        let cases = [
            (true, matches!(p, 1 | 2), g != 0),
            (g != 3, p == 1, g == 1),
            (g != 3, p == 2, g == 2),
        ];
        for (slot, (counted, u, v)) in out.iter_mut().zip(cases) {
            if counted {
                slot.0 += (u && v) as u64;
                slot.1 += u as u64;
                slot.2 += v as u64;
            }
        }
    }
    out
}

fn dice_of((i, p, g): (u64, u64, u64)) -> f64 {
    if p + g == 0 {
        1.0
    } else {
        2.0 * i as f64 / (p + g) as f64
    }
}

fn iou_of((i, p, g): (u64, u64, u64)) -> f64 {
    if p + g - i == 0 {
        1.0
    } else {
        i as f64 / (p + g - i) as f64
    }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut exact = true;
    let mut identity_err: f64 = 0.0;
    let mut merge_ok = true;
    let mut pairs = Vec::new();
    for _ in 0..100 {
        let map = |rng: &mut ChaCha8Rng| ClassMap::new(8, 8, (0..64).map(|_| rng.gen_range(0..4u8)).collect());
        let (p, g) = (map(&mut rng), map(&mut rng));
        let mut t = ConfusionTallies::default();
        t.accumulate(&p, &g).unwrap();
        let oracle = brute_force(&p, &g);
        let r = t.report();
        let got = [
            (r.dice_seg, r.iou_seg, oracle[0]),
            (r.dice_non, r.iou_non, oracle[1]),
            (r.dice_neo, r.iou_neo, oracle[2]),
        ];
        for (d, iou, o) in got {
            exact &= d == dice_of(o) && iou == iou_of(o);
            identity_err = identity_err.max((iou - d / (2.0 - d)).abs());
        }
        pairs.push((p, g));
    }
    // micro-average: merging shard tallies equals tallying everything at once
    let mut whole = ConfusionTallies::default();
    for (p, g) in &pairs {
        whole.accumulate(p, g).unwrap();
    }
    for cut in [1, 37, 50, 99] {
        let (mut a, mut b) = (ConfusionTallies::default(), ConfusionTallies::default());
        for (i, (p, g)) in pairs.iter().enumerate() {
            if i < cut { &mut a } else { &mut b }.accumulate(p, g).unwrap();
        }
        let mut ab = a;
        ab.merge(&b);
        let mut ba = b;
        ba.merge(&a);
        merge_ok &= ab == whole && ba == whole && ab.report() == whole.report();
    }
    let total: Tally = whole.seg;
    pass_if(
        exact && identity_err <= 1e-12 && merge_ok,
        format!(
            "100 pairs exact={exact}, max |IoU - D/(2-D)| = {identity_err:.1e}, shard merge {}, pooled seg tally {}/{}/{}",
            if merge_ok { "ok" } else { "BROKEN" },
            total.intersection,
            total.pred,
            total.gt
        ),
    )
}

// ---------------------------------------------------------------- 6, 7

fn overfit_config(steps: usize) -> TrainConfig {
    TrainConfig {
        optim: OptimConfig {
            base_lr: 0.01,
            batch_size: 8,
            total_steps: steps,
            ..OptimConfig::default()
        },
        augment: AugmentConfig::disabled(),
        scales: vec![64],
        eval_size: 64,
        eval_every: 25,
        checkpoint_every: 0,
        oversample: false,
        stop_at_dice: Some(0.95),
        seed: 6,
        ..TrainConfig::default()
    }
}

/// Schedule length of the overfit run, inside the 2000-step allowance. The
/// warmup is 5% of it, so a shorter schedule reaches the full rate sooner.
const OVERFIT_STEPS: usize = 600;

fn criterion_6() -> Outcome {
    let start = Instant::now();
    // fully labelled masks: undefined pixels carry no main-head supervision,
    // so they say nothing about how well the loop fits
    let samples = synthetic_samples_with(8, 64, 6, 0.0);
    let model = dha();
    let state = train(&model, &samples, &[], &overfit_config(OVERFIT_STEPS), None).unwrap();
    let report = evaluate(&model, &samples, 8).unwrap();
    let t_el = start.elapsed();
    let first = state.log.first().map_or(f64::NAN, |r| r.l_total);
    let last = state.log.last().map_or(f64::NAN, |r| r.l_total);
    pass_if(
        report.dice_seg >= 0.95 && state.step <= OVERFIT_STEPS && t_el < Duration::from_secs(3600),
        format!(
            "training Dice_seg {:.4} after {} steps, L_total {first:.4} -> {last:.4}, {:.1} min",
            report.dice_seg,
            state.step,
            t_el.as_secs_f64() / 60.0
        ),
    )
}

/// Steps per variant for the ordering echo; both variants get the same budget.
const ORDERING_STEPS: usize = 150;

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let all = synthetic_samples_with(80, 64, 7, 0.0);
    let (train_set, held_out) = all.split_at(64);
    let mut finals = Vec::new();
    for variant in [HeadVariant::Multi, HeadVariant::St] {
        let model = BlazeNeo::build(
            ModelConfig {
                variant,
                ..ModelConfig::default()
            },
            DType::F32,
            7,
        )
        .unwrap();
        let cfg = TrainConfig {
            stop_at_dice: None,
            eval_every: 0,
            seed: 7,
            ..overfit_config(ORDERING_STEPS)
        };
        let state = train(&model, train_set, held_out, &cfg, None).unwrap();
        // mean of the last 10 steps smooths batch-to-batch noise
        let tail = &state.log[state.log.len().saturating_sub(10)..];
        let l_main = tail.iter().map(|r| r.l_main).sum::<f64>() / tail.len() as f64;
        let report = evaluate(&model, held_out, 8).unwrap();
        finals.push((variant, l_main, report.dice_seg));
    }
    let (multi, st) = (finals[0], finals[1]);
    Outcome {
        verdict: Verdict::Report,
        detail: format!(
            "{ORDERING_STEPS} steps each: MULTI L_main {:.4} (held-out Dice_seg {:.4}) vs ST L_main {:.4} ({:.4}); MULTI {} ST; {:.1} min",
            multi.1,
            multi.2,
            st.1,
            st.2,
            if multi.1 <= st.1 { "<=" } else { ">" },
            start.elapsed().as_secs_f64() / 60.0
        ),
    }
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let mut worst: f64 = 0.0;
    for (total, warmup, base) in [(1000, 50, 0.001), (2000, 100, 0.01), (7, 1, 0.5), (10_000, 0, 0.001)] {
        let cfg = OptimConfig {
            base_lr: base,
            total_steps: total,
            warmup_steps: Some(warmup),
            ..OptimConfig::default()
        };
        worst = worst.max((lr_at(warmup, &cfg).unwrap() - base).abs());
        worst = worst.max(lr_at(total, &cfg).unwrap().abs());
        if (total - warmup) % 2 == 0 {
            let mid = warmup + (total - warmup) / 2;
            worst = worst.max((lr_at(mid, &cfg).unwrap() - base / 2.0).abs());
        }
    }
    pass_if(worst <= 1e-12, format!("max deviation from closed form {worst:.1e}"))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let overhead = harness_overhead_ms().unwrap();
    let mut stub = SleepTarget {
        duration: Duration::from_millis(10),
    };
    let report = measure(&mut stub, &[(); TIMED_ITERATIONS], 10, "fp32").unwrap();
    let mut sorted = report.latencies_ms.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    let mut sum = 0.0;
    for v in &sorted {
        sum += v;
    }
    let oracle = Stats {
        min: sorted[0],
        max: sorted[n - 1],
        mean: sum / n as f64,
        median: if n % 2 == 0 {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        } else {
            sorted[n / 2]
        },
    };
    let mean = report.host.mean;
    let ok = (10.0..=10.0 + HARNESS_OVERHEAD_MS).contains(&mean)
        && report.host == oracle
        && report.latencies_ms.len() == TIMED_ITERATIONS
        && (83.0..=100.0).contains(&report.fps);
    pass_if(
        ok,
        format!(
            "mean {mean:.3} ms (bound [10, {:.1}]), fps {:.2}, {} timed iterations, stats match oracle: {}, no-op harness mean {:.4} ms",
            10.0 + HARNESS_OVERHEAD_MS,
            report.fps,
            report.latencies_ms.len(),
            report.host == oracle,
            overhead
        ),
    )
}

// ---------------------------------------------------------------- 10

fn run_train(config: &Path, out: &Path) -> (i32, String) {
    let out_dir = out.to_string_lossy().to_string();
    let env = move |k: &str| (k == cli::ENV_OUTPUT_DIR).then(|| out_dir.clone());
    let (mut stdout, mut stderr) = (Vec::new(), Vec::new());
    let code = cli::run(
        ["blazeneo", "train", "--config", config.to_str().unwrap()],
        &env,
        &mut stdout,
        &mut stderr,
    );
    (code, String::from_utf8_lossy(&stderr).to_string())
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_dataset(&dir.path().join("data"), &[("train", 6), ("val", 2)], 48, 10).unwrap();
    let config = dir.path().join("run.toml");
    let text = format!(
        r#"seed = 10

[data]
manifest = "{}"

[optim]
base_lr = 0.005
batch_size = 2
total_steps = 6

[train]
scales = [32, 64]
eval_size = 32
eval_every = 3
checkpoint_every = 3
"#,
        manifest.display()
    );
    std::fs::write(&config, text).unwrap();
    let runs = [dir.path().join("a"), dir.path().join("b")];
    let mut outputs = Vec::new();
    for out in &runs {
        let (code, err) = run_train(&config, out);
        if code != 0 {
            return pass_if(false, format!("train exited {code}: {err}"));
        }
        let log = std::fs::read_to_string(out.join("train_log.csv")).unwrap();
        let metrics = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
        outputs.push((log, metrics));
    }
    let same_log = outputs[0].0 == outputs[1].0;
    let same_metrics = outputs[0].1 == outputs[1].1;
    let rows = outputs[0].0.lines().count().saturating_sub(1);
    pass_if(
        same_log && same_metrics && rows == 6,
        format!("{rows} logged steps; loss traces identical: {same_log}; final reports identical: {same_metrics}"),
    )
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // ACCEPTANCE_ONLY=6,7 restricts the run to the listed criteria
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let model = dha();
    let criteria: Vec<(usize, &str, bool, Box<dyn FnOnce() -> Outcome + '_>)> = vec![
        (1, "topology oracle", true, Box::new(criterion_1)),
        (2, "parameter count", true, Box::new(|| criterion_2(&model))),
        // reported, does not gate the exit status (see README)
        (3, "GFLOPs at 352x352", false, Box::new(|| criterion_3(&model))),
        (4, "loss correctness", true, Box::new(criterion_4)),
        (5, "metric oracle", true, Box::new(criterion_5)),
        (8, "schedule closed form", true, Box::new(criterion_8)),
        (9, "bench harness", true, Box::new(criterion_9)),
        (10, "determinism", true, Box::new(criterion_10)),
        (6, "overfit smoke test", true, Box::new(criterion_6)),
        (7, "variant ordering", false, Box::new(criterion_7)),
    ];
    let mut failed = Vec::new();
    for (id, name, gating, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = check();
        let label = match outcome.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Report => "REPORT",
        };
        println!("criterion {id:>2} [{label}] {name}: {}", outcome.detail);
        if matches!(outcome.verdict, Verdict::Fail) && gating {
            failed.push(id);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
