//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero if any fails.
//!
//! The suite-level criteria train every component and run all methods at the
//! default scale, which takes about an hour on one core. Set
//! `BTTF_LAB_ACCEPTANCE_DIR` to keep (and reuse) the suite outputs in a fixed directory.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use bttf_core::bttf::{cfe_objective, gram_matrices, style_loss, style_loss_tensor, Components};
use bttf_core::classifier::{evaluate, train_classifier, ClassifierArch, ClassifierKind, ClassifierParams};
use bttf_core::codec::CodecParams;
use bttf_core::dataset::{generate_shape_moving, LabeledDataset, ShapeMovingConfig, Split};
use bttf_core::diffusion::{
    ddim_step, denoising_loop, forward_noise, make_schedule, predict_eps, DenoiserArch, DenoiserParams,
    FirstFrameCondition, LoopMode, ScheduleKind,
};
use bttf_core::metrics::{frechet_distance, FrechetStats};
use bttf_core::rng::{rng_from_seed, standard_normal};
use bttf_core::{Tensor, Video};
use bttf_lab::checkpoints::CheckpointDir;
use bttf_lab::suite::{collect_results, reproduce_orderings, Orderings, SuiteConfig};

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: usize, ok: bool, what: &str, detail: String) {
        println!("{} criterion {id:>2}: {what} [{detail}]", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures += 1;
        }
    }
}

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), standard_normal(&mut rng_from_seed(seed), n))
}

fn random_video(seed: u64, dims: [usize; 4]) -> Video {
    let [n, c, h, w] = dims;
    let v: Vec<f64> = standard_normal(&mut rng_from_seed(seed), n * c * h * w)
        .into_iter()
        .map(|x| 1.0 / (1.0 + (-x).exp()))
        .collect();
    Video::from_f64(n, c, h, w, &v).unwrap()
}

/// Motion label from the intensity-weighted centroid of the first and last frames:
/// 0 up, 1 down, 2 left, 3 right.
fn centroid_label(v: &Video) -> Option<usize> {
    let centroid = |k: usize| {
        let f = v.frame(k);
        let (mut m, mut r, mut c) = (0.0f64, 0.0f64, 0.0f64);
        for ch in 0..f.c {
            for y in 0..f.h {
                for x in 0..f.w {
                    let p = f.data[(ch * f.h + y) * f.w + x] as f64;
                    m += p;
                    r += p * y as f64;
                    c += p * x as f64;
                }
            }
        }
        (r / m, c / m)
    };
    let (r0, c0) = centroid(0);
    let (r1, c1) = centroid(v.frames() - 1);
    let (dr, dc) = (r1 - r0, c1 - c0);
    if dr.abs() > dc.abs() {
        Some(if dr < 0.0 { 0 } else { 1 })
    } else if dc.abs() > dr.abs() {
        Some(if dc < 0.0 { 2 } else { 3 })
    } else {
        None
    }
}

fn same_videos(a: &LabeledDataset, b: &LabeledDataset) -> bool {
    a.len() == b.len()
        && a.samples.iter().zip(&b.samples).all(|((va, ya), (vb, yb))| {
            ya == yb && va.dims() == vb.dims() && va.data().iter().zip(vb.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

fn criterion_1(r: &mut Report, data: &ShapeMovingConfig) {
    let t0 = Instant::now();
    let train = generate_shape_moving(data, Split::Train).unwrap();
    let test = generate_shape_moving(data, Split::Test).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let all: Vec<&(Video, usize)> = train.samples.iter().chain(&test.samples).collect();
    let agree = all.iter().filter(|(v, y)| centroid_label(v) == Some(*y)).count();
    let again = (generate_shape_moving(data, Split::Train).unwrap(), generate_shape_moving(data, Split::Test).unwrap());
    let identical = same_videos(&train, &again.0) && same_videos(&test, &again.1);
    r.line(
        1,
        all.len() >= 1000 && agree == all.len() && identical && secs <= 60.0,
        "labels match the centroid oracle, regeneration is bit-identical, generation <= 1 min",
        format!("{agree}/{} agree, identical {identical}, {secs:.1}s", all.len()),
    );
}

fn criterion_2(r: &mut Report, cfg: &SuiteConfig, train: &LabeledDataset, test: &LabeledDataset, ck: &CheckpointDir) {
    let t0 = Instant::now();
    let clf = train_classifier(&train.samples, &cfg.classifier, ClassifierKind::Standard, None, None, &mut |_| {}).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let acc = evaluate(&test.samples, &clf, None).unwrap().accuracy;
    let same = ck.classifier(bttf_lab::checkpoints::CLASSIFIER).map(|c| c == clf).unwrap_or(false);
    r.line(
        2,
        acc >= 0.95 && secs <= 600.0,
        "standard classifier test accuracy >= 0.95, training <= 10 min",
        format!("accuracy {acc:.4}, {secs:.1}s, equals suite checkpoint {same}"),
    );
}

fn criterion_3(r: &mut Report, o: &Orderings) {
    let c = &o.classifiers;
    let gap = c.robust_robust_accuracy - c.standard_robust_accuracy;
    r.line(
        3,
        gap >= 0.20,
        "robust RA exceeds standard RA by >= 20 points under the shared attack",
        format!(
            "robust RA {:.3}, standard RA {:.3}, eps {}, {} steps, {} clips",
            c.robust_robust_accuracy, c.standard_robust_accuracy, c.attack.epsilon, c.attack.steps, c.attacked_samples
        ),
    );
}

fn criterion_4(r: &mut Report, data: &LabeledDataset, ck: &CheckpointDir) {
    let s = ck.schedule().unwrap();
    let codec = ck.codec(3).unwrap();
    let z0 = codec.encode(&data.samples[0].0).unwrap();
    let eps = randn(11, z0.shape());
    let mut worst = 0.0f64;
    for t in 1..=s.timesteps {
        let zt = forward_noise(&z0, t, &eps, &s).unwrap();
        let (_, z0_hat) = ddim_step(&zt, &eps, t, t - 1, &s).unwrap();
        worst = worst.max(z0_hat.max_abs_diff(&z0));
    }
    let den = ck.denoiser().unwrap();
    let cond = FirstFrameCondition::from_video(&data.samples[0].0, &codec).unwrap();
    let zt = randn(12, z0.shape());
    let mut bitwise = true;
    for n in 1..=s.inference.len() {
        let looped = denoising_loop(&zt, &cond, n, &den, &s).unwrap();
        let mut z = zt.clone();
        let mut last = None;
        for i in 0..n {
            let t = s.inference[i];
            let e = predict_eps(&den, &z, t, &cond).unwrap();
            let (prev, est) = ddim_step(&z, &e, t, s.prev_of(i), &s).unwrap();
            z = prev;
            last = Some(est);
        }
        bitwise &= looped == last.unwrap();
    }
    r.line(
        4,
        worst <= 1e-5 && bitwise,
        "oracle-noise DDIM recovers z_0 within 1e-5 at every t; loop equals unrolled steps bitwise",
        format!("max error {worst:.2e}, bitwise for depths 1..={}: {bitwise}", s.inference.len()),
    );
}

fn criterion_5(r: &mut Report) {
    let schedule = make_schedule(50, ScheduleKind::default()).unwrap().with_inference_steps(15).unwrap();
    let arch = DenoiserArch {
        frames: 2,
        latent_channels: 3,
        height: 8,
        width: 8,
        patch: 2,
        width_mult: 6,
        temporal_kernel: 3,
        timesteps: 50,
    };
    let denoiser = DenoiserParams::new(arch, &schedule, 3).unwrap();
    let carch = ClassifierArch { height: 8, width: 8, widths: [4, 6, 8], ..Default::default() };
    let classifier = ClassifierParams::new(carch, ClassifierKind::Standard, 4).unwrap();
    let codec = CodecParams::identity(3);
    let comps = Components { codec: &codec, denoiser: &denoiser, schedule: &schedule, classifier: &classifier };
    let x = random_video(5, [2, 3, 8, 8]);
    let cond = FirstFrameCondition::from_video(&x, &codec).unwrap();
    let grams = Arc::new(gram_matrices(x.to_tensor().data(), x.dims()));
    let zt = randn(8, &[2, 3, 8, 8]).map(|v| 0.3 * v);
    let (n, target, lambda, h) = (2, 2, 1e2, 1e-6);
    let ev = cfe_objective(&zt, &cond, &grams, n, target, lambda, comps, LoopMode::Full).unwrap();
    let loss_at = |z: &Tensor| cfe_objective(z, &cond, &grams, n, target, lambda, comps, LoopMode::Full).unwrap().loss.total;
    let (mut checked, mut worst) = (0usize, 0.0f64);
    for i in (0..zt.len()).step_by(7) {
        let a = ev.grad.data()[i];
        let mut zp = zt.clone();
        zp.data_mut()[i] += h;
        let mut zm = zt.clone();
        zm.data_mut()[i] -= h;
        let numeric = (loss_at(&zp) - loss_at(&zm)) / (2.0 * h);
        if a.abs().max(numeric.abs()) < 1e-8 {
            continue;
        }
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()));
        checked += 1;
    }
    r.line(
        5,
        checked >= 20 && worst <= 1e-3,
        "CFE gradient matches central differences on the micro config",
        format!("{checked} coordinates, max relative error {worst:.2e}"),
    );
}

fn criterion_6(r: &mut Report) {
    let mut worst = 0.0f64;
    for i in 0..10u64 {
        let v = random_video(100 + i, [8, 3, 32, 32]);
        let shifted = v.circular_shift(1 + i as isize, 31 - 3 * i as isize);
        worst = worst.max(style_loss(&shifted, &v).unwrap().abs());
    }
    let a = Tensor::new(vec![1, 3, 1, 1], vec![1.0, 0.0, 0.0]);
    let b = Tensor::new(vec![1, 3, 1, 1], vec![0.0, 1.0, 0.0]);
    let hand = style_loss_tensor(&a, &b).unwrap();
    r.line(
        6,
        worst <= 1e-6 && (hand - 2.0 / 9.0).abs() <= 1e-9,
        "style loss is invariant to circular shifts; hand case equals 2/9",
        format!("max shifted loss {worst:.2e}, hand case {hand:.12}"),
    );
}

fn criterion_7(r: &mut Report) {
    let same = FrechetStats::gaussian(vec![0.3, -1.0], vec![2.0, 0.5, 0.5, 1.0]).unwrap();
    let d0 = frechet_distance(&same, &same).unwrap();
    let a = FrechetStats::gaussian(vec![0.0], vec![1.0]).unwrap();
    let b = FrechetStats::gaussian(vec![1.0], vec![1.0]).unwrap();
    let d1 = frechet_distance(&a, &b).unwrap();
    let i = FrechetStats::gaussian(vec![0.0, 0.0], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let i4 = FrechetStats::gaussian(vec![0.0, 0.0], vec![4.0, 0.0, 0.0, 4.0]).unwrap();
    let d2 = frechet_distance(&i, &i4).unwrap();
    r.line(
        7,
        d0.abs() <= 1e-9 && (d1 - 1.0).abs() <= 1e-9 && (d2 - 2.0).abs() <= 1e-8,
        "Frechet distance analytic cases",
        format!("identical {d0:.2e}, 1-D shift {d1:.12}, I vs 4I {d2:.12}"),
    );
}

fn criterion_8(r: &mut Report, cfg: &SuiteConfig, o: &Orderings) {
    let b = &o.methods["bttf"];
    let c = &cfg.explain.bttf;
    let config_ok = o.pairs.len() == 20 && c.cfe_iters == 100 && c.max_depth == 15 && c.style_weight == 1e5;
    r.line(
        8,
        config_ok && b.flip_rate >= 0.90,
        "BTTF flip rate >= 0.90 on 20 pairs (K_C 100, N 15, lambda 1e5)",
        format!("FR {:.3} over {} pairs, K_I {}", b.flip_rate, o.pairs.len(), c.inversion_iters),
    );
}

fn criterion_9(r: &mut Report, o: &Orderings) {
    let (b, f, v) = (&o.methods["bttf"], &o.methods["cg-frame"], &o.methods["cg-video"]);
    let m = &o.methods["cg-video-mid"];
    r.line(
        9,
        f.fvd >= 2.0 * b.fvd && b.fid < v.fid,
        "FVD(CG-Frame) >= 2 FVD(BTTF) and FID(BTTF) < FID(CG-Video)",
        format!(
            "FVD bttf {:.4} cg-frame {:.4} cg-video {:.4} cg-video-mid {:.4}; FID bttf {:.4} cg-video {:.4}; FR cg-frame {:.2} cg-video {:.2} cg-video-mid {:.2}",
            b.fvd, f.fvd, v.fvd, m.fvd, b.fid, v.fid, f.flip_rate, v.flip_rate, m.flip_rate
        ),
    );
}

fn criterion_10(r: &mut Report, o: &Orderings) {
    let (b, p) = (&o.methods["bttf"], &o.methods["pgd"]);
    r.line(
        10,
        p.flip_rate >= b.flip_rate - 0.05 && p.ssim > b.ssim && p.fvd < b.fvd,
        "PGD vs BTTF: FR(PGD) >= FR(BTTF) - 0.05, SSIM(PGD) > SSIM(BTTF), FVD(PGD) < FVD(BTTF)",
        format!(
            "FR {:.3}/{:.3}, SSIM {:.4}/{:.4}, FVD {:.4}/{:.4} (pgd/bttf); largest-region energy {:.3}/{:.3} (reported only)",
            p.flip_rate, b.flip_rate, p.ssim, b.ssim, p.fvd, b.fvd, p.largest_region_energy, b.largest_region_energy
        ),
    );
}

fn criterion_11(r: &mut Report, o: &Orderings) {
    let worse = o.ablation_style.iter().filter(|a| a.variant >= 1.5 * a.baseline).count();
    let higher = o.ablation_inversion.iter().filter(|a| a.variant > a.baseline).count();
    let fmt = |v: &[bttf_lab::suite::AblationRun]| {
        v.iter().map(|a| format!("{:.4}->{:.4}", a.baseline, a.variant)).collect::<Vec<_>>().join(" ")
    };
    r.line(
        11,
        o.ablation_style.len() == 5 && o.ablation_inversion.len() == 5 && worse >= 3 && higher >= 3,
        "lambda 0 worsens per-run FID by >= 50% on >= 3 of 5; K_I 0 has higher L1 than K_I 40 on >= 3 of 5",
        format!(
            "style {worse}/5 [{}]; inversion {higher}/5 [{}]",
            fmt(&o.ablation_style),
            fmt(&o.ablation_inversion)
        ),
    );
}

/// A configuration small enough to run twice in seconds.
fn tiny_config() -> SuiteConfig {
    let mut c = SuiteConfig::default();
    c.seed = 7;
    c.data.train_per_class = 20;
    c.data.test_per_class = 10;
    c.classifier.epochs = 1;
    c.robust.train.epochs = 1;
    c.frame_classifier.epochs = 1;
    c.denoiser.train.epochs = 1;
    c.denoiser.train.width_mult = 8;
    c.pairs.inputs = 1;
    c.pairs.extra = 1;
    c.ablation_runs = 1;
    c.ablation_inversion_iters = 2;
    c.attack_eval_samples = 10;
    c.explain.bttf.cfe_iters = 2;
    c.explain.bttf.max_depth = 2;
    c
}

fn criterion_12(r: &mut Report) {
    let cfg = tiny_config();
    let run = |dir: &Path, threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| reproduce_orderings(&cfg, dir)).unwrap();
        collect_results(dir).unwrap()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(a.path(), 1);
    let rb = run(b.path(), 3);
    let differing = ra.iter().filter(|(k, v)| rb.get(*k) != Some(*v)).count() + rb.keys().filter(|k| !ra.contains_key(*k)).count();
    r.line(
        12,
        !ra.is_empty() && differing == 0,
        "reproduce-orderings rerun gives byte-identical result.json files",
        format!("{} files, {differing} differ (1 vs 3 worker threads)", ra.len()),
    );
}

fn main() {
    // `cargo test` passes harness flags; listing mode must not start the suite.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    std::env::set_var("BTTF_LAB_QUIET", "1");
    let mut r = Report { failures: 0 };

    criterion_5(&mut r);
    criterion_6(&mut r);
    criterion_7(&mut r);
    criterion_12(&mut r);

    let keep = std::env::var_os("BTTF_LAB_ACCEPTANCE_DIR").map(PathBuf::from);
    let tmp = tempfile::tempdir().unwrap();
    let out = keep.unwrap_or_else(|| tmp.path().to_path_buf());
    let cfg = SuiteConfig::default();
    let seeded = cfg.clone().with_derived_seeds();
    criterion_1(&mut r, &seeded.data);
    let t0 = Instant::now();
    let o = reproduce_orderings(&cfg, &out).unwrap();
    println!("suite finished in {:.0}s under {}", t0.elapsed().as_secs_f64(), out.display());
    let ck = CheckpointDir::new(out.join("checkpoints"));
    let data = out.join("data");
    let train = LabeledDataset::load(&data, Split::Train).unwrap();
    let test = LabeledDataset::load(&data, Split::Test).unwrap();
    criterion_2(&mut r, &seeded, &train, &test, &ck);
    criterion_3(&mut r, &o);
    criterion_4(&mut r, &test, &ck);
    criterion_8(&mut r, &cfg, &o);
    criterion_9(&mut r, &o);
    criterion_10(&mut r, &o);
    criterion_11(&mut r, &o);

    if r.failures > 0 {
        println!("{} acceptance criteria failed", r.failures);
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
