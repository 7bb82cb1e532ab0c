use std::sync::Arc;

use bttf_core::bttf::{cfe_objective, gram_matrices, inversion_objective, Components};
use bttf_core::classifier::{ClassifierArch, ClassifierKind, ClassifierParams};
use bttf_core::codec::CodecParams;
use bttf_core::diffusion::{
    ddim_step, denoising_loop, forward_noise, make_schedule, predict_eps, DdimCoefficients, DenoiserArch,
    DenoiserParams, FirstFrameCondition, LoopMode, NoiseSchedule, ScheduleKind,
};
use bttf_core::rng::{rng_from_seed, standard_normal};
use bttf_core::{Tensor, Video};

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

struct Micro {
    codec: CodecParams,
    denoiser: DenoiserParams,
    schedule: NoiseSchedule,
    classifier: ClassifierParams,
    x: Video,
}

impl Micro {
    fn new(frames: usize, size: usize) -> Self {
        let schedule = make_schedule(50, ScheduleKind::default()).unwrap().with_inference_steps(15).unwrap();
        let arch = DenoiserArch {
            frames,
            latent_channels: 3,
            height: size,
            width: size,
            patch: 2,
            width_mult: 6,
            temporal_kernel: 3,
            timesteps: 50,
        };
        let denoiser = DenoiserParams::new(arch, &schedule, 3).unwrap();
        let carch = ClassifierArch { height: size, width: size, widths: [4, 6, 8], ..Default::default() };
        let classifier = ClassifierParams::new(carch, ClassifierKind::Standard, 4).unwrap();
        Micro { codec: CodecParams::identity(3), denoiser, schedule, classifier, x: random_video(5, [frames, 3, size, size]) }
    }

    fn comps(&self) -> Components<'_> {
        Components { codec: &self.codec, denoiser: &self.denoiser, schedule: &self.schedule, classifier: &self.classifier }
    }
}

#[test]
fn oracle_noise_recovers_clean_latent_at_every_step() {
    let s = make_schedule(50, ScheduleKind::default()).unwrap();
    let z0 = randn(1, &[2, 3, 4, 4]);
    let eps = randn(2, &[2, 3, 4, 4]);
    for t in 1..=50 {
        let zt = forward_noise(&z0, t, &eps, &s).unwrap();
        let (prev, z0_hat) = ddim_step(&zt, &eps, t, t - 1, &s).unwrap();
        assert!(z0_hat.max_abs_diff(&z0) <= 1e-5, "t = {t}: {}", z0_hat.max_abs_diff(&z0));
        let want_prev = forward_noise(&z0, t - 1, &eps, &s).unwrap();
        assert!(prev.max_abs_diff(&want_prev) <= 1e-9);
    }
}

#[test]
fn residual_form_matches_two_stage_update() {
    let s = make_schedule(50, ScheduleKind::default()).unwrap();
    let z = randn(3, &[12]);
    let e = randn(4, &[12]);
    let (prev, _) = ddim_step(&z, &e, 30, 20, &s).unwrap();
    let (a, b) = DdimCoefficients::new(&s, 30, 20).unwrap().residual_form();
    for i in 0..12 {
        assert!((prev.data()[i] - (a * z.data()[i] + b * e.data()[i])).abs() < 1e-12);
    }
    assert!(ddim_step(&z, &e, 20, 20, &s).is_err());
}

#[test]
fn loop_equals_unrolled_steps_bitwise() {
    let m = Micro::new(2, 8);
    let cond = FirstFrameCondition::from_video(&m.x, &m.codec).unwrap();
    let zt = randn(6, &[2, 3, 8, 8]);
    for n in [1, 2, 5, 15] {
        let looped = denoising_loop(&zt, &cond, n, &m.denoiser, &m.schedule).unwrap();
        let mut z = zt.clone();
        let mut last = None;
        for i in 0..n {
            let t = m.schedule.inference[i];
            let e = predict_eps(&m.denoiser, &z, t, &cond).unwrap();
            let (prev, z0) = ddim_step(&z, &e, t, m.schedule.prev_of(i), &m.schedule).unwrap();
            z = prev;
            last = Some(z0);
        }
        assert_eq!(looped, last.unwrap(), "depth {n}");
    }
    assert!(denoising_loop(&zt, &cond, 0, &m.denoiser, &m.schedule).is_err());
    assert!(denoising_loop(&zt, &cond, 16, &m.denoiser, &m.schedule).is_err());
}

#[test]
fn checkpointed_gradient_is_identical_to_full_tape() {
    let m = Micro::new(2, 8);
    let cond = FirstFrameCondition::from_video(&m.x, &m.codec).unwrap();
    let z_i = m.codec.encode(&m.x).unwrap();
    let zt = randn(7, &[2, 3, 8, 8]);
    let grams = Arc::new(gram_matrices(m.x.to_tensor().data(), m.x.dims()));
    let full = cfe_objective(&zt, &cond, &grams, 3, 1, 1e3, m.comps(), LoopMode::Full).unwrap();
    let ck = cfe_objective(&zt, &cond, &grams, 3, 1, 1e3, m.comps(), LoopMode::Checkpointed).unwrap();
    assert_eq!(full.loss, ck.loss);
    assert_eq!(full.grad, ck.grad);
    let (lf, gf) = inversion_objective(&zt, &cond, &z_i, m.comps(), LoopMode::Full).unwrap();
    let (lc, gc) = inversion_objective(&zt, &cond, &z_i, m.comps(), LoopMode::Checkpointed).unwrap();
    assert_eq!((lf, gf), (lc, gc));
}

#[test]
fn cfe_gradient_matches_finite_differences_on_micro_config() {
    let m = Micro::new(2, 8);
    let cond = FirstFrameCondition::from_video(&m.x, &m.codec).unwrap();
    let grams = Arc::new(gram_matrices(m.x.to_tensor().data(), m.x.dims()));
    let zt = randn(8, &[2, 3, 8, 8]).map(|v| 0.3 * v);
    let (n, target, lambda) = (2, 2, 1e2);
    let ev = cfe_objective(&zt, &cond, &grams, n, target, lambda, m.comps(), LoopMode::Full).unwrap();
    let loss_at = |z: &Tensor| cfe_objective(z, &cond, &grams, n, target, lambda, m.comps(), LoopMode::Full).unwrap().loss.total;
    let h = 1e-6;
    let mut checked = 0;
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
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        assert!(rel <= 1e-3, "coord {i}: analytic {a} numeric {numeric} rel {rel}");
        checked += 1;
    }
    assert!(checked >= 20, "only {checked} coordinates had a nonzero gradient");
}
