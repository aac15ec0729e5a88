//! End-to-end acceptance suite. Runs every criterion, prints one PASS/FAIL
//! line each and exits non-zero if any failed.
//!
//!     cargo test --test acceptance

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use synergyseg::autoconfig::{
    default_plan, estimate_memory, fingerprint_dataset, plan_configuration, DatasetFingerprint, MemoryBudget, PlanConfig,
};
use synergyseg::metrics::{assd, case_metrics, hd95, marks, render_rows, render_table, surface_distances, Mark, MetricsReport, TableRow};
use synergyseg::nn::{ParamStore, Tape, Tensor};
use synergyseg::phantom::{generate_corpus, generate_mixed_corpus, PhantomSpec};
use synergyseg::synergy_net::{vq_quantize, Codebook, NetConfig, NetOptions, Quantizer, SynergyUNet};
use synergyseg::training::{load_prepared, postprocess, predict_case, train_prepared, TrainConfig};
use synergyseg::volume::{load_case, DatasetManifest, Grid3, LabelMask, LoadOptions, Partition};
use synergyseg::Error;

type Outcome = Result<String, String>;

macro_rules! check {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

// ---- 1. metric oracles -------------------------------------------------

fn brute_boundary(m: &Grid3<u8>) -> Vec<[usize; 3]> {
    let s = m.shape();
    let mut out = Vec::new();
    for z in 0..s[2] {
        for y in 0..s[1] {
            for x in 0..s[0] {
                if m.get(x, y, z) == 0 {
                    continue;
                }
                let p = [x as i64, y as i64, z as i64];
                let exposed = (0..3).any(|a| {
                    [-1i64, 1].iter().any(|d| {
                        let mut q = p;
                        q[a] += d;
                        q[a] < 0 || q[a] >= s[a] as i64 || m.get(q[0] as usize, q[1] as usize, q[2] as usize) == 0
                    })
                });
                if exposed {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}

fn brute_directed(from: &[[usize; 3]], to: &[[usize; 3]], s: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| (0..3).map(|k| ((a[k] as f64 - b[k] as f64) * s[k]).powi(2)).sum::<f64>().sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

fn brute_metrics(p: &Grid3<u8>, g: &Grid3<u8>, s: [f64; 3]) -> [Option<f64>; 6] {
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for (&a, &b) in p.as_slice().iter().zip(g.as_slice()) {
        tp += (a == 1 && b == 1) as u8 as f64;
        fp += (a == 1 && b == 0) as u8 as f64;
        fneg += (a == 0 && b == 1) as u8 as f64;
    }
    let empty = tp + fp + fneg == 0.0;
    let div = |n: f64, d: f64| if d == 0.0 { if empty { 1.0 } else { 0.0 } } else { n / d };
    let (bp, bg) = (brute_boundary(p), brute_boundary(g));
    let (h, a) = if bp.is_empty() || bg.is_empty() {
        (None, None)
    } else {
        let mut all = brute_directed(&bp, &bg, s);
        all.extend(brute_directed(&bg, &bp, s));
        all.sort_by(f64::total_cmp);
        let r = 0.95 * (all.len() - 1) as f64;
        let (lo, hi) = (r.floor() as usize, r.ceil() as usize);
        (
            Some(all[lo] + (all[hi] - all[lo]) * (r - lo as f64)),
            Some(all.iter().sum::<f64>() / all.len() as f64),
        )
    };
    [
        Some(div(2.0 * tp, 2.0 * tp + fp + fneg)),
        Some(div(tp, tp + fp + fneg)),
        Some(div(tp, tp + fp)),
        Some(div(tp, tp + fneg)),
        h,
        a,
    ]
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for i in 0..200 {
        let s = [rng.random_range(0.5..2.5), rng.random_range(0.5..2.5), rng.random_range(0.5..4.0)];
        let density = rng.random_range(0.01..0.7);
        let mut grid = || Grid3::from_fn([8, 8, 8], |_, _, _| rng.random_bool(density) as u8);
        let (p, g) = (grid(), grid());
        let (pm, gm) = (LabelMask::new(p.clone(), s).unwrap(), LabelMask::new(g.clone(), s).unwrap());
        let c = case_metrics(&pm, &gm).map_err(|e| e.to_string())?;
        let ours = [Some(c.dice), Some(c.iou), Some(c.precision), Some(c.recall), c.hd95_mm, c.assd_mm];
        for (k, (a, b)) in ours.iter().zip(brute_metrics(&p, &g, s)).enumerate() {
            match (a, b) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    check!((a - b).abs() <= 1e-9, "pair {i} metric {k}: {a} vs {b}");
                }
                (None, None) => {}
                _ => return Err(format!("pair {i} metric {k}: definedness differs")),
            }
        }
        // scaling by a power of two is exact in floating point
        let k = 2f64.powi(rng.random_range(-2..4));
        if let (Ok(a), Ok(b)) = (
            surface_distances(&pm, &gm, s),
            surface_distances(&pm, &gm, [s[0] * k, s[1] * k, s[2] * k]),
        ) {
            check!(hd95(&b).unwrap() == k * hd95(&a).unwrap(), "pair {i}: hd95 not scaled by {k}");
            check!(assd(&b).unwrap() == k * assd(&a).unwrap(), "pair {i}: assd not scaled by {k}");
        }
    }
    Ok(format!("200 pairs, max deviation {worst:.1e}"))
}

// ---- 2. vector quantization ----------------------------------------------

fn vq_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let k = rng.random_range(2..=32);
        let d = rng.random_range(1..=16);
        let cb = Codebook::<f64>::random(k, d, 0.99, &mut rng).unwrap();
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let dist = |j: usize| cb.row(j).iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let brute = (0..k).fold(0, |best, j| if dist(j) < dist(best) { j } else { best });
        check!(cb.nearest(&v) == brute, "instance {i}: {} vs exhaustive {brute}", cb.nearest(&v));
    }

    // idempotence and the fixed point
    let (k, d) = (16, 8);
    let cb = Codebook::<f64>::random(k, d, 0.99, &mut rng).unwrap();
    let z = Tensor::from_vec(&[2, d, 2, 2, 2], (0..2 * d * 8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let q1 = vq_quantize(&z, &cb).unwrap();
    let q2 = vq_quantize(&q1.zq, &cb).unwrap();
    check!(q2.zq == q1.zq && q2.indices == q1.indices, "quantize is not idempotent");
    check!(q2.vq_loss == 0.0 && q2.commit_loss == 0.0, "codebook vectors do not have zero loss");

    // straight-through: the analytic gradient is the derivative of the
    // function with the quantization offset held fixed
    let target = Tensor::from_vec(z.shape(), (0..z.numel()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let offset: Vec<f64> = q1.zq.data().iter().zip(z.data()).map(|(a, b)| a - b).collect();
    let ps = ParamStore::<f64>::new();
    let mut t = Tape::new(&ps);
    let zv = t.input(z.clone());
    let st = t.straight_through(zv, q1.zq.clone()).unwrap();
    let loss = t.squared_error_mean(st, target.clone(), 16).unwrap();
    let g = t.backward(loss);
    let grad = g.input(zv).expect("input gradient").clone();
    let frozen = |zz: &Tensor<f64>| -> f64 {
        let mut t = Tape::new(&ps);
        let shifted = Tensor::from_vec(zz.shape(), zz.data().iter().zip(&offset).map(|(a, o)| a + o).collect()).unwrap();
        let x = t.input(shifted);
        let l = t.squared_error_mean(x, target.clone(), 16).unwrap();
        t.value(l).item()
    };
    let mut worst = 0.0f64;
    for j in 0..z.numel() {
        let h = 1e-4;
        let (mut a, mut b) = (z.clone(), z.clone());
        a.data_mut()[j] += h;
        b.data_mut()[j] -= h;
        let num = (frozen(&a) - frozen(&b)) / (2.0 * h);
        let ana = grad.data()[j];
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    check!(worst <= 1e-3, "straight-through FD relative error {worst:.2e}");
    Ok(format!("1000 searches exact, ST rel err {worst:.1e}"))
}

// ---- 3. attention ----------------------------------------------------------

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ps = ParamStore::<f64>::new();
    let mut rows = 0usize;
    for _ in 0..30 {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let dim = heads * rng.random_range(1..4);
        let n = rng.random_range(1..3);
        let sp = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..3)];
        let len = n * dim * sp.iter().product::<usize>();
        let mut t = Tape::<f64>::new(&ps);
        let mut rnd = |scale: f64| {
            let data = (0..len).map(|_| rng.random_range(-scale..scale)).collect();
            t.input(Tensor::from_vec(&[n, dim, sp[0], sp[1], sp[2]], data).unwrap())
        };
        let (q, k, v) = (rnd(3.0), rnd(3.0), rnd(1.0));
        let out = t.attention(q, k, v, heads).map_err(|e| e.to_string())?;
        let s = sp.iter().product::<usize>();
        let probs = t.attention_probs(out).expect("probabilities");
        check!(probs.len() == n * heads * s * s, "unexpected probability layout");
        for row in probs.chunks_exact(s) {
            rows += 1;
            check!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-5, "row sums to {}", row.iter().sum::<f64>());
        }
    }

    // constant discrete latent: every key is equal, so each query receives
    // the projected constant and fused = f1 + Wo (Wv c + bv) + bo
    let mut worst = 0.0f64;
    for (seed, heads) in [(1u64, 1usize), (2, 2), (3, 4)] {
        let cfg = NetConfig {
            in_channels: 1,
            channels: vec![4, 8],
            pooling: vec![[0, 0, 0], [1, 1, 1]],
            codebook_size: 8,
            latent_dim: 4,
            heads,
            options: NetOptions::default(),
        };
        let net = SynergyUNet::<f64>::new(cfg, seed).unwrap();
        let mut t = Tape::new(&net.params);
        let f1 = t.input(Tensor::from_vec(&[1, 4, 2, 2, 2], (0..32).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let c: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let f2 = t.input(Tensor::from_vec(&[1, 4, 2, 2, 2], c.iter().flat_map(|&v| [v; 8]).collect()).unwrap());
        let (fused, _) = net.cross_attend(&mut t, f1, f2).map_err(|e| e.to_string())?;
        let p = &net.params;
        let get = |name: &str| p.get(p.find(name).expect(name)).data().to_vec();
        let (wv, bv, wo, bo) = (
            get("bottleneck.attn.v.w"),
            get("bottleneck.attn.v.b"),
            get("bottleneck.attn.out.w"),
            get("bottleneck.attn.out.b"),
        );
        let v: Vec<f64> = (0..4).map(|i| (0..4).map(|j| wv[i * 4 + j] * c[j]).sum::<f64>() + bv[i]).collect();
        let o: Vec<f64> = (0..4).map(|i| (0..4).map(|j| wo[i * 4 + j] * v[j]).sum::<f64>() + bo[i]).collect();
        for ch in 0..4 {
            for (got, base) in t.value(fused).channel(0, ch).iter().zip(t.value(f1).channel(0, ch)) {
                worst = worst.max((got - (base + o[ch])).abs());
            }
        }
    }
    check!(worst <= 1e-5, "closed-form deviation {worst:.2e}");
    Ok(format!("{rows} rows normalized, closed form within {worst:.1e}"))
}

// ---- 4. end-to-end gradient ------------------------------------------------

fn end_to_end_gradient() -> Outcome {
    let cfg = NetConfig {
        in_channels: 1,
        channels: vec![4, 8],
        pooling: vec![[0, 0, 0], [1, 1, 1]],
        codebook_size: 8,
        latent_dim: 4,
        heads: 2,
        options: NetOptions::default(),
    };
    let net = SynergyUNet::<f64>::new(cfg, 41).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let x = Tensor::from_vec(&[1, 1, 8, 8, 8], (0..512).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y: Vec<f64> = (0..512).map(|i| ((i % 8) > 2 && (i / 64) > 2) as u8 as f64).collect();
    let loss = |n: &SynergyUNet<f64>, t: &mut Tape<f64>, q: &Quantizer<f64>| {
        let xv = t.input(x.clone());
        let pass = n.forward(t, xv, q).unwrap();
        let bce = t.bce_with_logits(pass.logits, &y).unwrap();
        let dice = t.soft_dice_loss(pass.logits, &y, 1e-5).unwrap();
        let s = pass.synergy;
        let root = t.weighted_sum(&[(bce, 1.0), (dice, 1.0), (s.vq_loss, 1.0), (s.commit_loss, 0.25)]);
        (root, s)
    };
    let mut t = Tape::new(&net.params);
    let (root, s) = loss(&net, &mut t, &Quantizer::Live);
    let frozen = Quantizer::Frozen(s.freeze(&t));
    let grads = t.backward(root);
    let ids: Vec<_> = net.params.ids().collect();
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let id = ids[rng.random_range(0..ids.len())];
        let j = rng.random_range(0..net.params.get(id).numel());
        let eval = |delta: f64| {
            let mut n2 = net.clone();
            n2.params.get_mut(id).data_mut()[j] += delta;
            let mut t2 = Tape::new(&n2.params);
            let (r, _) = loss(&n2, &mut t2, &frozen);
            t2.value(r).item()
        };
        let h = 1e-5;
        let num = (eval(h) - eval(-h)) / (2.0 * h);
        let ana = grads.param(id).map_or(0.0, |g| g.data()[j]);
        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-7);
        check!(rel <= 1e-2, "{}[{j}]: analytic {ana:.6e} vs numeric {num:.6e}", net.params.name(id));
        worst = worst.max(rel);
    }
    Ok(format!("20 parameters, max rel err {worst:.1e}"))
}

// ---- 5. planner --------------------------------------------------------------

fn random_fingerprint(rng: &mut impl Rng) -> DatasetFingerprint {
    let p0: f64 = rng.random_range(-1000.0..0.0);
    DatasetFingerprint {
        median_shape: [rng.random_range(8..600), rng.random_range(8..600), rng.random_range(8..300)],
        median_spacing: [rng.random_range(0.3..2.0), rng.random_range(0.3..2.0), rng.random_range(0.5..6.0)],
        intensity_p0_5: p0,
        intensity_p99_5: p0 + rng.random_range(1.0..3000.0),
        intensity_mean: p0 + 10.0,
        intensity_std: rng.random_range(1.0..500.0),
        foreground_fraction: rng.random_range(0.001..0.5),
        n_cases: rng.random_range(3..1000),
    }
}

fn planner() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let budgets = [0.02, 0.25, 1.0, 8.0, 24.0];
    let mut plans = 0;
    for i in 0..100 {
        let fp = random_fingerprint(&mut rng);
        for gb in budgets {
            let b = MemoryBudget::from_gb(gb).unwrap();
            let a = plan_configuration(&fp, &b);
            let again = plan_configuration(&fp, &b);
            match (a, again) {
                (Ok(a), Ok(again)) => {
                    check!(a == again, "fingerprint {i}, {gb} GB: plans differ on rerun");
                    a.validate().map_err(|e| format!("fingerprint {i}, {gb} GB: {e}"))?;
                    let pool = a.total_pooling();
                    check!((0..3).all(|k| a.patch_size[k] % pool[k] == 0), "fingerprint {i}: patch not divisible");
                    check!(estimate_memory(&a) <= b.usable(), "fingerprint {i}, {gb} GB: over budget");
                    plans += 1;
                }
                (Err(Error::BudgetInfeasible { .. }), Err(Error::BudgetInfeasible { .. })) => {}
                (a, b) => return Err(format!("fingerprint {i}, {gb} GB: {:?} / {:?}", a.err(), b.err())),
            }
        }
    }
    let fp = random_fingerprint(&mut rng);
    let floor = plan_configuration(&fp, &MemoryBudget::new(1024, 1.0).unwrap());
    check!(matches!(floor, Err(Error::BudgetInfeasible { .. })), "tiny budget did not raise BudgetInfeasible");
    Ok(format!("{plans} feasible plans of 500, deterministic and within budget"))
}

// ---- 6 / 10. overfit and determinism ------------------------------------------

fn overfit_config(steps: usize) -> TrainConfig {
    TrainConfig {
        lr_init: 3e-3,
        lr_min: 1.5e-4,
        max_epochs: steps / 10,
        patience: steps / 10,
        steps_per_epoch: 10,
        seed: 17,
        ..TrainConfig::default()
    }
}

fn split_dice(model: &synergyseg::synergy_net::CheckpointModel, plan: &PlanConfig, m: &DatasetManifest, part: Partition) -> Result<MetricsReport, String> {
    let mut per_case = BTreeMap::new();
    for c in m.cases_in(part) {
        let mask_path = c.mask.as_ref().map(|p| m.resolve(p));
        let (v, gt) = load_case(&m.resolve(&c.volume), mask_path.as_deref(), LoadOptions::default()).map_err(|e| e.to_string())?;
        let prob = predict_case(model, plan, &v).map_err(|e| e.to_string())?;
        let pred = postprocess(&prob, 0.5);
        per_case.insert(c.id.clone(), case_metrics(&pred, &gt.unwrap()).map_err(|e| e.to_string())?);
    }
    MetricsReport::from_cases(per_case).map_err(|e| e.to_string())
}

fn overfit_run(dir: &Path) -> Result<(f64, Vec<f64>), String> {
    let err = |e: Error| e.to_string();
    let mut m = generate_corpus(5, &PhantomSpec::new([32, 32, 16], 0.3, 0.1, 0), 3, dir).map_err(err)?;
    for p in m.split.values_mut() {
        *p = Partition::Train;
    }
    let fp = fingerprint_dataset(&m).map_err(err)?;
    let plan = plan_configuration(&fp, &MemoryBudget::from_gb(8.0).unwrap()).map_err(err)?;
    let cases = load_prepared(&m, Partition::Train, &plan).map_err(err)?;
    let out = train_prepared(&cases, &cases, &plan, &overfit_config(100), &mut |_| {}).map_err(err)?;
    let report = split_dice(&out.model, &plan, &m, Partition::Train)?;
    Ok((report.aggregate.dice, out.history.iter().map(|r| r.val_dice).collect()))
}

fn overfit(trace: &mut Option<Vec<f64>>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (dice, t) = overfit_run(dir.path())?;
    *trace = Some(t);
    check!(dice >= 0.95, "training-set Dice {dice:.4} < 0.95 after 100 steps");
    Ok(format!("training-set Dice {dice:.4} after 100 steps"))
}

fn determinism(first: &Option<Vec<f64>>) -> Outcome {
    let first = first.as_ref().ok_or("criterion 6 produced no trace")?;
    let dir = tempfile::tempdir().unwrap();
    let (_, second) = overfit_run(dir.path())?;
    let same = first.len() == second.len() && first.iter().zip(&second).all(|(a, b)| a.to_bits() == b.to_bits());
    check!(same, "validation traces differ: {first:?} vs {second:?}");
    Ok(format!("{} epochs bit-identical", first.len()))
}

// ---- 7. ablation -------------------------------------------------------------

fn ablation() -> Outcome {
    let err = |e: Error| e.to_string();
    let dir = tempfile::tempdir().unwrap();
    let templates = [
        PhantomSpec::new([24, 24, 12], 0.4, 0.1, 0),
        PhantomSpec::new([32, 32, 16], 0.4, 0.1, 0),
    ];
    let m = generate_mixed_corpus(20, &templates, 8, dir.path()).map_err(err)?;
    let fp = fingerprint_dataset(&m).map_err(err)?;
    let auto = plan_configuration(&fp, &MemoryBudget::from_gb(8.0).unwrap()).map_err(err)?;
    let fixed = default_plan(&fp);
    let cfg = overfit_config(300);
    let mut reports = Vec::new();
    for (name, plan) in [("auto-configured", &auto), ("w/o Autoconf.", &fixed)] {
        let tr = load_prepared(&m, Partition::Train, plan).map_err(err)?;
        let va = load_prepared(&m, Partition::Val, plan).map_err(err)?;
        let out = train_prepared(&tr, &va, plan, &cfg, &mut |_| {}).map_err(err)?;
        reports.push((name.to_string(), split_dice(&out.model, plan, &m, Partition::Val)?));
    }
    let table = render_table(&reports);
    println!("{table}");
    check!(table.contains("Dice") && table.lines().count() == 4, "table did not render");
    let (a, f) = (reports[0].1.aggregate.dice, reports[1].1.aggregate.dice);
    check!(a >= f - 0.02, "auto-configured Dice {a:.4} < default {f:.4} - 0.02");
    Ok(format!("validation Dice auto {a:.4} vs default {f:.4}"))
}

// ---- 8. zero-shot through the command line ----------------------------------

fn cli(args: &[&str]) -> Result<(), String> {
    let argv = std::iter::once("synergyseg").chain(args.iter().copied());
    match synergyseg::cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn zero_shot() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).to_str().unwrap().to_string();
    std::fs::write(
        p("train.json"),
        r#"{"lr_init": 0.003, "lr_min": 0.00015, "max_epochs": 10, "patience": 10, "steps_per_epoch": 10}"#,
    )
    .unwrap();
    cli(&["phantom", "--n", "10", "--grid", "32x32x16", "--severity", "0.2", "--seed", "1", "--out", &p("source")])?;
    cli(&["phantom", "--n", "10", "--grid", "32x32x16", "--severity", "0.8", "--seed", "2", "--out", &p("target")])?;
    cli(&["fingerprint", "--manifest", &p("source/manifest.json"), "--out", &p("fp.json")])?;
    cli(&["plan", "--fingerprint", &p("fp.json"), "--budget-gb", "8", "--out", &p("plan.json")])?;
    cli(&["train", "--manifest", &p("source/manifest.json"), "--plan", &p("plan.json"), "--config", &p("train.json"), "--out", &p("run")])?;
    cli(&["zeroshot", "--checkpoint", &p("run/checkpoint.json"), "--manifest", &p("target/manifest.json"), "--split", "test", "--out", &p("zs")])?;
    let report: Value = serde_json::from_str(&std::fs::read_to_string(p("zs/metrics.json")).unwrap()).unwrap();
    check!(report["label"] == "zero-shot", "report is not labeled zero-shot");
    let keys = ["dice", "iou", "precision", "recall", "hd95_mm", "assd_mm"];
    let mut scopes = vec![("aggregate".to_string(), &report["aggregate"])];
    for (id, c) in report["per_case"].as_object().unwrap() {
        scopes.push((id.clone(), c));
    }
    for (scope, v) in &scopes {
        for k in keys {
            let x = v[k].as_f64();
            check!(x.is_some_and(f64::is_finite), "{scope}.{k} is {}", v[k]);
        }
    }
    let d = report["aggregate"]["dice"].as_f64().unwrap();
    check!((0.0..=1.0).contains(&d), "Dice {d} outside [0, 1]");
    Ok(format!("{} cases, zero-shot Dice {d:.4}, all metrics finite", scopes.len() - 1))
}

// ---- 9. table fixture ------------------------------------------------------------

fn report_fixture() -> Outcome {
    let text = include_str!("fixtures/comparison_t1w.json");
    let rows: Vec<TableRow> = serde_json::from_str(text).unwrap();
    let m = marks(&rows);
    let row = |name: &str| rows.iter().position(|r| r.method == name).unwrap();
    let (syn, former, wo) = (row("nnSynergyNet3D"), row("nnFormer3D"), row("w/o Autoconf."));
    use Mark::*;
    // mIoU, Dice, HD95, Precision, Recall, ASSD
    let expected: [(usize, [Mark; 6]); 3] = [
        (syn, [Best, Best, Best, Best, Best, Second]),
        (former, [Second, Second, Second, Second, None, Best]),
        (wo, [None, None, None, None, Second, None]),
    ];
    for (i, want) in expected {
        check!(m[i] == want, "{}: marks {:?}, expected {want:?}", rows[i].method, m[i]);
    }
    let others = (0..rows.len()).filter(|i| ![syn, former, wo].contains(i));
    for i in others {
        check!(m[i] == [None; 6], "{} should carry no marks", rows[i].method);
    }
    let table = render_rows(&rows);
    let line = table.lines().find(|l| l.contains("nnSynergyNet3D")).unwrap();
    for cell in ["**84.51**", "**87.89**", "**21.04**", "**88.72**", "_4.01_"] {
        check!(line.contains(cell), "rendered row lacks {cell}: {line}");
    }
    Ok("nnSynergyNet3D best on mIoU, Dice, HD95, Precision".into())
}

fn main() {
    let mut trace = None;
    let mut results: Vec<Outcome> = Vec::new();
    let mut run = |n: u8, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t0 = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d.clone()),
            Err(e) => ("FAIL", e.clone()),
        };
        println!("[{tag}] {n:>2}. {name} ({secs:.1}s): {detail}");
        results.push(r);
    };
    run(1, "metric oracle suite", &mut metric_oracles);
    run(2, "vector quantization", &mut vq_correctness);
    run(3, "attention normalization", &mut attention_normalization);
    run(4, "end-to-end gradient check", &mut end_to_end_gradient);
    run(5, "planner determinism and feasibility", &mut planner);
    run(6, "overfit run", &mut || overfit(&mut trace));
    run(7, "ablation hook", &mut ablation);
    run(8, "zero-shot workflow", &mut zero_shot);
    run(9, "report fixture", &mut report_fixture);
    run(10, "determinism", &mut || determinism(&trace));

    let failed = results.iter().filter(|r| r.is_err()).count();
    println!("\n{} of {} acceptance criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
