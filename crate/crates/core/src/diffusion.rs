//! First-frame-conditioned video diffusion: noise schedule, forward process,
//! deterministic DDIM updates, the ε-prediction denoiser, the differentiable
//! denoising loop, denoiser training, and classifier guidance.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{self, ClassifierParams, TrainLogLine};
use crate::codec::{CodecParams, LatentVideo};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{he_normal, temporal_identity, Bound, ParamStore};
use crate::rng::{derived_rng, standard_normal};
use crate::tensor::Tensor;
use crate::video::{first_frame, zero_pad_to_video, Frame, Video};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    LinearBeta { beta_start: f64, beta_end: f64 },
    Cosine { s: f64 },
}

impl Default for ScheduleKind {
    fn default() -> Self {
        ScheduleKind::Cosine { s: 0.008 }
    }
}

/// Largest per-step β the cosine schedule may take.
pub const MAX_BETA: f64 = 0.999;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub kind: Option<ScheduleKind>,
    /// `alpha[t]` for `t = 1..=T`; index 0 holds 1.
    pub alpha: Vec<f64>,
    /// `alpha_bar[t]` with `alpha_bar[0] = 1`.
    pub alpha_bar: Vec<f64>,
    /// Inference subsequence, highest noise level first.
    pub inference: Vec<usize>,
}

/// Cosine closed form `f(t)/f(0)` with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`.
pub fn cosine_alpha_bar(t: f64, big_t: f64, s: f64) -> f64 {
    let f = |u: f64| ((u / big_t + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    f(t) / f(0.0)
}

impl NoiseSchedule {
    pub fn from_alphas(alphas: &[f64]) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::config("timesteps", "need at least one step"));
        }
        if let Some(a) = alphas.iter().find(|a| !(**a > 0.0 && **a < 1.0)) {
            return Err(Error::config("alpha", format!("{a} is outside (0, 1)")));
        }
        let mut alpha = vec![1.0];
        alpha.extend_from_slice(alphas);
        let mut alpha_bar = vec![1.0];
        for &a in alphas {
            alpha_bar.push(alpha_bar.last().unwrap() * a);
        }
        let t = alphas.len();
        Ok(NoiseSchedule { timesteps: t, kind: None, alpha, alpha_bar, inference: (1..=t).rev().collect() })
    }

    /// Stride spacing `τ_k = 1 + k·⌊T/count⌋` for `k < count`, stored highest first.
    pub fn with_inference_steps(mut self, count: usize) -> Result<Self> {
        if count == 0 || count > self.timesteps {
            return Err(Error::config("inference_steps", format!("must be in 1..={}", self.timesteps)));
        }
        let stride = self.timesteps / count;
        self.inference = (0..count).map(|k| 1 + k * stride).rev().collect();
        Ok(self)
    }

    pub fn ab(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::config("t", format!("timestep {t} outside 0..={}", self.timesteps)))
    }

    /// `t_prev` that follows inference position `i` (0 after the last).
    pub fn prev_of(&self, i: usize) -> usize {
        self.inference.get(i + 1).copied().unwrap_or(0)
    }

    /// Position in the inference subsequence whose `ᾱ` is closest to 0.5.
    pub fn half_noise_position(&self) -> usize {
        let mut best = 0;
        for (i, &t) in self.inference.iter().enumerate() {
            if (self.alpha_bar[t] - 0.5).abs() < (self.alpha_bar[self.inference[best]] - 0.5).abs() {
                best = i;
            }
        }
        best
    }
}

pub fn make_schedule(timesteps: usize, kind: ScheduleKind) -> Result<NoiseSchedule> {
    if timesteps == 0 {
        return Err(Error::config("timesteps", "must be at least 1"));
    }
    let alphas: Vec<f64> = match kind {
        ScheduleKind::LinearBeta { beta_start, beta_end } => {
            if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
                return Err(Error::config("beta", "need 0 < beta_start <= beta_end < 1"));
            }
            (1..=timesteps)
                .map(|t| {
                    let u = if timesteps == 1 { 0.0 } else { (t - 1) as f64 / (timesteps - 1) as f64 };
                    1.0 - (beta_start + u * (beta_end - beta_start))
                })
                .collect()
        }
        ScheduleKind::Cosine { s } => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config("s", "cosine offset must be positive"));
            }
            let big_t = timesteps as f64;
            (1..=timesteps)
                .map(|t| {
                    let ratio = cosine_alpha_bar(t as f64, big_t, s) / cosine_alpha_bar((t - 1) as f64, big_t, s);
                    1.0 - (1.0 - ratio).clamp(0.0, MAX_BETA)
                })
                .collect()
        }
    };
    let mut s = NoiseSchedule::from_alphas(&alphas)?;
    s.kind = Some(kind);
    Ok(s)
}

/// Serializable recipe for a [`NoiseSchedule`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub kind: ScheduleKind,
    pub inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { timesteps: 50, kind: ScheduleKind::default(), inference_steps: 15 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.timesteps, self.kind)?.with_inference_steps(self.inference_steps)
    }
}

/// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps`.
pub fn forward_noise(x0: &LatentVideo, t: usize, eps: &LatentVideo, s: &NoiseSchedule) -> Result<LatentVideo> {
    if x0.shape() != eps.shape() {
        return Err(Error::Shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let ab = s.ab(t)?;
    let (ca, cb) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(Tensor::new(x0.shape().to_vec(), x0.data().iter().zip(eps.data()).map(|(&x, &e)| ca * x + cb * e).collect()))
}

/// Coefficients of one DDIM update, in the exact form both the tensor and
/// graph paths evaluate:
/// `ẑ_0 = z0_z·z_t + z0_e·ε̂` and `z_prev = prev_z0·ẑ_0 + prev_e·ε̂`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DdimCoefficients {
    pub z0_z: f64,
    pub z0_e: f64,
    pub prev_z0: f64,
    pub prev_e: f64,
}

impl DdimCoefficients {
    pub fn new(s: &NoiseSchedule, t: usize, t_prev: usize) -> Result<Self> {
        if t_prev >= t {
            return Err(Error::config("t_prev", format!("need t > t_prev, got t = {t}, t_prev = {t_prev}")));
        }
        let ab = s.ab(t)?;
        let abp = s.ab(t_prev)?;
        if ab <= 0.0 {
            return Err(Error::Numerical(format!("alpha_bar[{t}] = 0")));
        }
        let sa = ab.sqrt();
        Ok(DdimCoefficients {
            z0_z: 1.0 / sa,
            z0_e: -(1.0 - ab).sqrt() / sa,
            prev_z0: abp.sqrt(),
            prev_e: (1.0 - abp).sqrt(),
        })
    }

    /// `(a, b)` with `z_prev = a·z_t + b·ε̂`.
    pub fn residual_form(&self) -> (f64, f64) {
        (self.prev_z0 * self.z0_z, self.prev_z0 * self.z0_e + self.prev_e)
    }
}

fn lincomb(a: &Tensor, ca: f64, b: &Tensor, cb: f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| ca * x + cb * y).collect())
}

/// One deterministic DDIM update; returns `(z_prev, ẑ_0)`.
pub fn ddim_step(
    z_t: &LatentVideo,
    eps_hat: &LatentVideo,
    t: usize,
    t_prev: usize,
    s: &NoiseSchedule,
) -> Result<(LatentVideo, LatentVideo)> {
    if z_t.shape() != eps_hat.shape() {
        return Err(Error::Shape("z_t and eps_hat differ in shape".into()));
    }
    let c = DdimCoefficients::new(s, t, t_prev)?;
    let z0 = lincomb(z_t, c.z0_z, eps_hat, c.z0_e);
    let prev = lincomb(&z0, c.prev_z0, eps_hat, c.prev_e);
    Ok((prev, z0))
}

/// Graph form of [`ddim_step`].
pub fn ddim_step_graph(g: &mut Graph, z_t: Var, eps: Var, c: &DdimCoefficients) -> (Var, Var) {
    let z0 = g.lincomb(z_t, c.z0_z, eps, c.z0_e);
    let prev = g.lincomb(z0, c.prev_z0, eps, c.prev_e);
    (prev, z0)
}

/// Raw first frame `I` and its encoded zero-padded clip `I′`.
#[derive(Clone, Debug, PartialEq)]
pub struct FirstFrameCondition {
    pub frame: Frame,
    pub latent: LatentVideo,
}

impl FirstFrameCondition {
    pub fn new(frame: Frame, frames: usize, codec: &CodecParams) -> Result<Self> {
        let padded = zero_pad_to_video(&frame, frames)?;
        Ok(FirstFrameCondition { latent: codec.encode(&padded)?, frame })
    }

    pub fn from_video(x: &Video, codec: &CodecParams) -> Result<Self> {
        FirstFrameCondition::new(first_frame(x), x.frames(), codec)
    }
}

/// Condition tensors registered in a graph.
#[derive(Clone, Copy, Debug)]
pub struct CondVars {
    pub padded: Var,
    /// Frame 0 of `I′` repeated across the clip.
    pub repeated: Var,
}

impl CondVars {
    pub fn new(g: &mut Graph, cond: &FirstFrameCondition) -> Self {
        let padded = g.constant(cond.latent.clone());
        let repeated = g.repeat_frame(padded, 0);
        CondVars { padded, repeated }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserArch {
    pub frames: usize,
    pub latent_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Space-to-depth factor applied at the input.
    pub patch: usize,
    pub width_mult: usize,
    pub temporal_kernel: usize,
    pub timesteps: usize,
}

impl DenoiserArch {
    pub fn pixel_default() -> Self {
        DenoiserArch {
            frames: 8,
            latent_channels: 3,
            height: 32,
            width: 32,
            patch: 4,
            width_mult: 24,
            temporal_kernel: 3,
            timesteps: 50,
        }
    }

    pub fn for_latent(dims: [usize; 4], timesteps: usize) -> Self {
        let [frames, c, h, _] = dims;
        DenoiserArch {
            frames,
            latent_channels: c,
            height: h,
            width: dims[3],
            patch: (h / 8).max(1),
            width_mult: 24,
            temporal_kernel: 3,
            timesteps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.patch;
        if r == 0 || self.height % (2 * r) != 0 || self.width % (2 * r) != 0 {
            return Err(Error::config("patch", "latent height and width must be multiples of 2·patch"));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::config("temporal_kernel", "must be odd"));
        }
        Ok(())
    }

    pub fn init(&self, schedule: &NoiseSchedule, seed: u64) -> ParamStore {
        let mut rng = derived_rng(seed, "denoiser/init", 0);
        let c = self.width_mult;
        let kt = self.temporal_kernel;
        let cin = 3 * self.latent_channels * self.patch * self.patch;
        let cout = self.latent_channels * self.patch * self.patch;
        let t1 = self.timesteps + 1;
        let mut s = ParamStore::new();
        s.insert("stem/w", he_normal(&mut rng, vec![c, cin, 1, 1], cin, 1.0));
        s.insert("stem/b", Tensor::zeros(vec![c]));
        s.insert("temb0", Tensor::zeros(vec![t1, c]));
        s.insert("fremb", Tensor::zeros(vec![self.frames, c]));
        s.insert("a/conv/w", he_normal(&mut rng, vec![c, c, 3, 3], c * 9, 1.0));
        s.insert("a/conv/b", Tensor::zeros(vec![c]));
        s.insert("a/time/w", temporal_identity(&mut rng, c, c, kt, 0.05));
        s.insert("a/time/b", Tensor::zeros(vec![c]));
        s.insert("d/conv/w", he_normal(&mut rng, vec![2 * c, c, 3, 3], c * 9, 1.0));
        s.insert("d/conv/b", Tensor::zeros(vec![2 * c]));
        s.insert("temb1", Tensor::zeros(vec![t1, 2 * c]));
        s.insert("d/time/w", temporal_identity(&mut rng, 2 * c, 2 * c, kt, 0.05));
        s.insert("d/time/b", Tensor::zeros(vec![2 * c]));
        s.insert("u/mix/w", he_normal(&mut rng, vec![c, 3 * c, 1, 1], 3 * c, 1.0));
        s.insert("u/mix/b", Tensor::zeros(vec![c]));
        s.insert("u/conv/w", he_normal(&mut rng, vec![c, c, 3, 3], c * 9, 1.0));
        s.insert("u/conv/b", Tensor::zeros(vec![c]));
        s.insert("u/time/w", temporal_identity(&mut rng, c, c, kt, 0.05));
        s.insert("u/time/b", Tensor::zeros(vec![c]));
        s.insert("out/w", he_normal(&mut rng, vec![cout, c, 1, 1], c, 0.1));
        s.insert("out/b", Tensor::zeros(vec![cout]));
        // Per-timestep output mixing ε̂ = a_t·z_t + b_t·R + g_t·N. The initial values make
        // the implied clean estimate equal to R − N, with R the repeated first frame.
        let (mut a, mut b, mut gg) = (vec![0.0; t1], vec![0.0; t1], vec![0.0; t1]);
        for t in 1..t1 {
            let ab = schedule.alpha_bar.get(t).copied().unwrap_or(0.5);
            let sn = (1.0 - ab).sqrt().max(1e-6);
            a[t] = 1.0 / sn;
            b[t] = -ab.sqrt() / sn;
            gg[t] = ab.sqrt() / sn;
        }
        s.insert("mix/a", Tensor::new(vec![t1, 1], a));
        s.insert("mix/b", Tensor::new(vec![t1, 1], b));
        s.insert("mix/g", Tensor::new(vec![t1, 1], gg));
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserParams {
    pub arch: DenoiserArch,
    pub step: u64,
    #[serde(skip)]
    pub store: ParamStore,
}

impl DenoiserParams {
    pub fn new(arch: DenoiserArch, schedule: &NoiseSchedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        if arch.timesteps != schedule.timesteps {
            return Err(Error::config("timesteps", "denoiser and schedule disagree on T"));
        }
        let store = arch.init(schedule, seed);
        Ok(DenoiserParams { arch, step: 0, store })
    }

    pub fn check_latent(&self, z: &Tensor) -> Result<()> {
        let a = &self.arch;
        let want = [a.frames, a.latent_channels, a.height, a.width];
        if z.dims4() != want {
            return Err(Error::Shape(format!("latent {:?} does not match denoiser geometry {want:?}", z.shape())));
        }
        Ok(())
    }

    pub fn save(&self, stem: &std::path::Path) -> Result<()> {
        let mut s = self.store.clone();
        s.insert("meta/step", Tensor::scalar(self.step as f64));
        s.save(&stem.with_extension("btfw"))?;
        let json = stem.with_extension("json");
        std::fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))
    }

    pub fn load(stem: &std::path::Path) -> Result<Self> {
        let json = stem.with_extension("json");
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let mut p: DenoiserParams = serde_json::from_str(&text)?;
        let mut store = ParamStore::load(&stem.with_extension("btfw"))?;
        if let Some(step) = store.remove("meta/step") {
            p.step = step.item() as u64;
        }
        p.store = store;
        Ok(p)
    }
}

/// ε-prediction `ε_φ(z_t, t, I′)` built into `g`.
pub fn denoiser_eps(g: &mut Graph, b: &Bound, arch: &DenoiserArch, t: usize, z_t: Var, cond: CondVars) -> Var {
    let r = arch.patch;
    let x = g.concat_channels(&[z_t, cond.padded, cond.repeated]);
    let x = g.pixel_unshuffle(x, r);
    let h = g.conv2d(x, b.get("stem/w"), Some(b.get("stem/b")));
    let te = g.row(b.get("temb0"), t);
    let h = g.add_channel_vec(h, te);
    let h = g.add_frame_channel(h, b.get("fremb"));
    let h = g.silu(h);

    let a = g.conv2d(h, b.get("a/conv/w"), Some(b.get("a/conv/b")));
    let a = g.silu(a);
    let a = g.temporal_conv(a, b.get("a/time/w"), Some(b.get("a/time/b")));
    let a = g.silu(a);
    let a = g.add(a, h);

    let d = g.avg_pool2(a);
    let d = g.conv2d(d, b.get("d/conv/w"), Some(b.get("d/conv/b")));
    let te1 = g.row(b.get("temb1"), t);
    let d = g.add_channel_vec(d, te1);
    let d = g.silu(d);
    let d2 = g.temporal_conv(d, b.get("d/time/w"), Some(b.get("d/time/b")));
    let d2 = g.silu(d2);
    let d = g.add(d, d2);

    let u = g.upsample2(d);
    let m = g.concat_channels(&[a, u]);
    let m = g.conv2d(m, b.get("u/mix/w"), Some(b.get("u/mix/b")));
    let m = g.silu(m);
    let u = g.conv2d(m, b.get("u/conv/w"), Some(b.get("u/conv/b")));
    let u = g.silu(u);
    let u = g.temporal_conv(u, b.get("u/time/w"), Some(b.get("u/time/b")));
    let u = g.silu(u);
    let u = g.add(u, m);

    let o = g.conv2d(u, b.get("out/w"), Some(b.get("out/b")));
    let net = g.pixel_shuffle(o, r);

    let ca = g.row(b.get("mix/a"), t);
    let cb = g.row(b.get("mix/b"), t);
    let cg = g.row(b.get("mix/g"), t);
    let e1 = g.mul_scalar(z_t, ca);
    let e2 = g.mul_scalar(cond.repeated, cb);
    let e3 = g.mul_scalar(net, cg);
    let e = g.add(e1, e2);
    g.add(e, e3)
}

/// ε-prediction as a plain tensor.
pub fn predict_eps(p: &DenoiserParams, z_t: &Tensor, t: usize, cond: &FirstFrameCondition) -> Result<Tensor> {
    p.check_latent(z_t)?;
    let mut g = Graph::new();
    let b = p.store.bind(&mut g, false);
    let c = CondVars::new(&mut g, cond);
    let z = g.constant(z_t.clone());
    let e = denoiser_eps(&mut g, &b, &p.arch, t, z, c);
    Ok(g.value(e).clone())
}

fn check_depth(s: &NoiseSchedule, n: usize) -> Result<()> {
    if n == 0 || n > s.inference.len() {
        return Err(Error::config("n", format!("denoising depth must be in 1..={}", s.inference.len())));
    }
    Ok(())
}

/// Builds steps `first..first+count` of the depth-`n` loop starting from `z`.
/// Returns the last step's `ẑ_0` when the range reaches position `n - 1`, else the next `z`.
fn loop_segment(
    g: &mut Graph,
    b: &Bound,
    p: &DenoiserParams,
    s: &NoiseSchedule,
    cond: CondVars,
    mut z: Var,
    first: usize,
    count: usize,
    n: usize,
) -> Result<Var> {
    for i in first..first + count {
        let t = s.inference[i];
        let c = DdimCoefficients::new(s, t, s.prev_of(i))?;
        let eps = denoiser_eps(g, b, &p.arch, t, z, cond);
        let (prev, z0) = ddim_step_graph(g, z, eps, &c);
        z = if i + 1 == n { z0 } else { prev };
    }
    Ok(z)
}

/// Depth-`n` loop in `g`: applies DDIM steps at the first `n` positions of the
/// inference subsequence and returns the `ẑ_0` estimate of the last one.
pub fn denoising_loop_graph(
    g: &mut Graph,
    b: &Bound,
    p: &DenoiserParams,
    s: &NoiseSchedule,
    cond: CondVars,
    z_t: Var,
    n: usize,
) -> Result<Var> {
    check_depth(s, n)?;
    loop_segment(g, b, p, s, cond, z_t, 0, n, n)
}

/// Forward value of the depth-`n` loop.
pub fn denoising_loop(
    z_t: &LatentVideo,
    cond: &FirstFrameCondition,
    n: usize,
    p: &DenoiserParams,
    s: &NoiseSchedule,
) -> Result<LatentVideo> {
    p.check_latent(z_t)?;
    if cond.latent.shape() != z_t.shape() {
        return Err(Error::Shape("condition and latent geometries differ".into()));
    }
    let mut g = Graph::new();
    let b = p.store.bind(&mut g, false);
    let c = CondVars::new(&mut g, cond);
    let z = g.constant(z_t.clone());
    let out = denoising_loop_graph(&mut g, &b, p, s, c, z, n)?;
    Ok(g.value(out).clone())
}

/// How the reverse pass through the loop is executed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopMode {
    /// Keep the whole unrolled loop on one tape.
    #[default]
    Full,
    /// Store only the per-step latents and rebuild each step during the reverse pass.
    Checkpointed,
}

/// Value of `head(ẑ_0)` for `ẑ_0 = loop(z_T)` and its gradient with respect to `z_T`.
pub struct LoopGradient<T> {
    pub z0: Tensor,
    pub head: T,
    pub grad: Tensor,
}

/// Differentiates a scalar objective of the loop output. `head` builds the
/// objective from `ẑ_0` and returns the scalar plus any extra value to keep.
pub fn loop_value_and_grad<T>(
    z_t: &LatentVideo,
    cond: &FirstFrameCondition,
    n: usize,
    p: &DenoiserParams,
    s: &NoiseSchedule,
    mode: LoopMode,
    head: impl Fn(&mut Graph, Var) -> Result<(Var, T)>,
) -> Result<LoopGradient<T>> {
    p.check_latent(z_t)?;
    check_depth(s, n)?;
    match mode {
        LoopMode::Full => {
            let mut g = Graph::new();
            let b = p.store.bind(&mut g, false);
            let c = CondVars::new(&mut g, cond);
            let z = g.param(z_t.clone());
            let z0 = denoising_loop_graph(&mut g, &b, p, s, c, z, n)?;
            let (loss, extra) = head(&mut g, z0)?;
            let grads = g.backward(loss);
            Ok(LoopGradient { z0: g.value(z0).clone(), head: extra, grad: grads.tensor(z) })
        }
        LoopMode::Checkpointed => {
            let mut states = vec![z_t.clone()];
            for i in 0..n {
                let mut g = Graph::new();
                let b = p.store.bind(&mut g, false);
                let c = CondVars::new(&mut g, cond);
                let z = g.constant(states[i].clone());
                let out = loop_segment(&mut g, &b, p, s, c, z, i, 1, n)?;
                states.push(g.value(out).clone());
            }
            let z0 = states.pop().expect("n >= 1");
            let mut g = Graph::new();
            let zv = g.param(z0.clone());
            let (loss, extra) = head(&mut g, zv)?;
            let mut seed = g.backward(loss).tensor(zv).into_data();
            for i in (0..n).rev() {
                let mut g = Graph::new();
                let b = p.store.bind(&mut g, false);
                let c = CondVars::new(&mut g, cond);
                let z = g.param(states[i].clone());
                let out = loop_segment(&mut g, &b, p, s, c, z, i, 1, n)?;
                seed = g.backward_with(out, seed).tensor(z).into_data();
            }
            Ok(LoopGradient { z0, head: extra, grad: Tensor::new(z_t.shape().to_vec(), seed) })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserTrainConfig {
    pub width_mult: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig { width_mult: 32, epochs: 12, batch_size: 16, lr: 2e-3, seed: 0 }
    }
}

/// Minimizes `E‖ε − ε_φ(√ᾱ_t·z_0 + √(1−ᾱ_t)·ε, t, I′)‖²` with `t` uniform on `1..=T`
/// and each clip conditioned on its own first frame.
pub fn train_denoiser(
    data: &[(Video, usize)],
    codec: &CodecParams,
    schedule: &NoiseSchedule,
    cfg: &DenoiserTrainConfig,
    log: &mut dyn FnMut(&TrainLogLine),
) -> Result<DenoiserParams> {
    let first = data.first().ok_or_else(|| Error::Empty("training set".into()))?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    let latents: Vec<(Tensor, FirstFrameCondition)> = data
        .par_iter()
        .map(|(v, _)| Ok((codec.encode(v)?, FirstFrameCondition::from_video(v, codec)?)))
        .collect::<Result<_>>()?;
    let dims = codec.latent_dims(first.0.dims())?;
    let mut arch = DenoiserArch::for_latent(dims, schedule.timesteps);
    arch.width_mult = cfg.width_mult;
    let mut p = DenoiserParams::new(arch, schedule, cfg.seed)?;
    let sizes: Vec<usize> = p.store.iter().map(|(_, t)| t.len()).collect();
    let decay: Vec<bool> = p.store.iter().map(|(n, _)| n.ends_with("/w")).collect();
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: 1e-4, ..Default::default() }, &sizes);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let total_steps = (cfg.epochs * data.len().div_ceil(cfg.batch_size)).max(1) as f64;
    let mut local_step = 0usize;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut derived_rng(cfg.seed, "denoiser/shuffle", epoch as u64));
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let per: Vec<(f64, Vec<Vec<f64>>)> = chunk
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let mut rng = derived_rng(cfg.seed, "denoiser/noise", ((epoch as u64) << 40) | ((bi as u64) << 16) | j as u64);
                    let t = rng.gen_range(1..=schedule.timesteps);
                    let (z0, cond) = &latents[i];
                    let eps = Tensor::new(z0.shape().to_vec(), standard_normal(&mut rng, z0.len()));
                    let zt = forward_noise(z0, t, &eps, schedule)?;
                    let mut g = Graph::new();
                    let b = p.store.bind(&mut g, true);
                    let c = CondVars::new(&mut g, cond);
                    let z = g.constant(zt);
                    let target = g.constant(eps);
                    let e = denoiser_eps(&mut g, &b, &p.arch, t, z, c);
                    let l = g.mse_mean(e, target);
                    let mut grads = g.backward(l);
                    let gs = b.vars().map(|(_, v)| grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).len()])).collect();
                    Ok((g.value(l).item(), gs))
                })
                .collect::<Result<_>>()?;
            let inv = 1.0 / chunk.len() as f64;
            let mut total = 0.0;
            let mut acc: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            for (l, gs) in per {
                total += l;
                for (a, g) in acc.iter_mut().zip(gs) {
                    for (x, y) in a.iter_mut().zip(g) {
                        *x += y * inv;
                    }
                }
            }
            if !total.is_finite() {
                return Err(Error::Diverged { step: p.step as usize, loss: total });
            }
            loss_sum += total;
            let refs: Vec<&[f64]> = acc.iter().map(Vec::as_slice).collect();
            let mut ps: Vec<&mut [f64]> = p.store.tensors_mut().map(Tensor::data_mut).collect();
            // cosine decay to 5% of the base rate
            let progress = local_step as f64 / total_steps;
            opt.cfg.lr = cfg.lr * (0.05 + 0.95 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            opt.step(&mut ps, &refs, &decay);
            p.step += 1;
            local_step += 1;
        }
        log(&TrainLogLine { epoch, split: "train".into(), loss: loss_sum / data.len() as f64, accuracy: f64::NAN });
    }
    p.store.round_to_f32();
    Ok(p)
}

/// Mean ε-MSE of the denoiser on a set of clips, with fixed noise draws.
pub fn denoiser_loss(
    p: &DenoiserParams,
    data: &[(Video, usize)],
    codec: &CodecParams,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<f64> {
    let losses: Vec<f64> = data
        .par_iter()
        .enumerate()
        .map(|(i, (v, _))| {
            let mut rng = derived_rng(seed, "denoiser/eval", i as u64);
            let t = rng.gen_range(1..=schedule.timesteps);
            let z0 = codec.encode(v)?;
            let cond = FirstFrameCondition::from_video(v, codec)?;
            let eps = Tensor::new(z0.shape().to_vec(), standard_normal(&mut rng, z0.len()));
            let zt = forward_noise(&z0, t, &eps, schedule)?;
            let e = predict_eps(p, &zt, t, &cond)?;
            Ok(e.data().iter().zip(eps.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / e.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Full-depth unguided sample decoded to a video.
pub fn sample(
    z_t: &LatentVideo,
    cond: &FirstFrameCondition,
    p: &DenoiserParams,
    s: &NoiseSchedule,
    codec: &CodecParams,
) -> Result<Video> {
    let z0 = denoising_loop(z_t, cond, s.inference.len(), p, s)?;
    codec.decode(&z0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub target: usize,
}

/// `ε̂′ = ε̂ − w·√(1−ᾱ_t)·∇ log p`.
pub fn guided_epsilon(eps_hat: &Tensor, grad_log_p: &Tensor, w: f64, alpha_bar_t: f64) -> Tensor {
    let c = w * (1.0 - alpha_bar_t).sqrt();
    Tensor::new(
        eps_hat.shape().to_vec(),
        eps_hat.data().iter().zip(grad_log_p.data()).map(|(e, g)| e - c * g).collect(),
    )
}

/// Which part of the decoded clip the guiding classifier sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceView {
    Clip,
    /// One frame, scored as a single-frame clip.
    Frame(usize),
    /// Every frame scored on its own, log-probabilities summed.
    EachFrame,
}

/// One guided DDIM step. The classifier scores `decode(ẑ_0(z_t))`; its log-probability
/// gradient is taken with respect to `z_t` through the denoiser. Returns `(z_prev, ẑ_0′)`.
#[allow(clippy::too_many_arguments)]
pub fn classifier_guided_step(
    z_t: &LatentVideo,
    t: usize,
    t_prev: usize,
    p: &DenoiserParams,
    s: &NoiseSchedule,
    codec: &CodecParams,
    clf: &ClassifierParams,
    cond: &FirstFrameCondition,
    guide: &GuidanceConfig,
    view: GuidanceView,
) -> Result<(LatentVideo, LatentVideo)> {
    p.check_latent(z_t)?;
    if guide.target >= clf.arch.classes {
        return Err(Error::ClassIndex { index: guide.target, classes: clf.arch.classes });
    }
    let c = DdimCoefficients::new(s, t, t_prev)?;
    let mut g = Graph::new();
    let db = p.store.bind(&mut g, false);
    let cv = CondVars::new(&mut g, cond);
    let z = g.param(z_t.clone());
    let eps = denoiser_eps(&mut g, &db, &p.arch, t, z, cv);
    let eps_hat = g.value(eps).clone();
    if guide.scale == 0.0 {
        return ddim_step(z_t, &eps_hat, t, t_prev, s);
    }
    let z0 = g.lincomb(z, c.z0_z, eps, c.z0_e);
    let cb = codec.bind(&mut g, false);
    let x = codec.decode_graph(&mut g, &cb, z0);
    let views: Vec<Var> = match view {
        GuidanceView::Clip => vec![x],
        GuidanceView::Frame(k) => vec![g.slice_frames(x, k, 1)],
        GuidanceView::EachFrame => (0..p.arch.frames).map(|k| g.slice_frames(x, k, 1)).collect(),
    };
    let kb = clf.store.bind(&mut g, false);
    let mut ce = None;
    for v in views {
        let tr = classifier::forward(&mut g, &kb, &clf.arch, v);
        let l = g.cross_entropy(tr.logits, guide.target);
        ce = Some(match ce {
            None => l,
            Some(acc) => g.add(acc, l),
        });
    }
    let ce = ce.expect("at least one view");
    let grad_ce = g.backward(ce).tensor(z);
    let grad_log_p = grad_ce.map(|v| -v);
    let eps_guided = guided_epsilon(&eps_hat, &grad_log_p, guide.scale, s.ab(t)?);
    ddim_step(z_t, &eps_guided, t, t_prev, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bar_is_a_product() {
        let s = NoiseSchedule::from_alphas(&[0.9, 0.8]).unwrap();
        assert_eq!(s.alpha_bar[0], 1.0);
        assert!((s.alpha_bar[1] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[2] - 0.72).abs() < 1e-15);
        assert!(NoiseSchedule::from_alphas(&[1.0]).is_err());
        assert!(make_schedule(0, ScheduleKind::default()).is_err());
    }

    #[test]
    fn stride_spacing() {
        let s = make_schedule(50, ScheduleKind::default()).unwrap().with_inference_steps(15).unwrap();
        assert_eq!(s.inference.len(), 15);
        assert_eq!(s.inference[0], 43);
        assert_eq!(*s.inference.last().unwrap(), 1);
        assert!(s.inference.windows(2).all(|w| w[0] - w[1] == 3));
        let half = s.inference[s.half_noise_position()];
        assert!((s.alpha_bar[half] - 0.5).abs() < 0.05);
    }

    #[test]
    fn scalar_ddim_step() {
        let mut s = NoiseSchedule::from_alphas(&[0.81, 0.25 / 0.81]).unwrap();
        s.alpha_bar[1] = 0.81;
        s.alpha_bar[2] = 0.25;
        let z = Tensor::new(vec![1], vec![1.0]);
        let e = Tensor::new(vec![1], vec![0.5]);
        let (prev, z0) = ddim_step(&z, &e, 2, 1, &s).unwrap();
        let z0_ref = (1.0 - 0.75f64.sqrt() * 0.5) / 0.5;
        assert!((z0.item() - z0_ref).abs() < 1e-12);
        assert!((prev.item() - (0.9 * z0_ref + 0.19f64.sqrt() * 0.5)).abs() < 1e-12);
        assert!(ddim_step(&z, &e, 1, 1, &s).is_err());
    }

    #[test]
    fn guided_epsilon_toy() {
        let e = Tensor::new(vec![1], vec![0.3]);
        let g = Tensor::new(vec![1], vec![2.0]);
        assert!((guided_epsilon(&e, &g, 0.5, 0.75).item() - (0.3 - 0.5)).abs() < 1e-15);
        assert_eq!(guided_epsilon(&e, &g, 0.0, 0.75), e);
    }
}
