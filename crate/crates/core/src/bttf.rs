//! Two-stage optimization of the initial latent `z_T`: inversion toward the
//! input clip, then counterfactual generation with a Gram-matrix style
//! regularizer and progressively deeper denoising.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::classifier::{self, cross_entropy, ClassifierParams, Prediction};
use crate::codec::{CodecParams, LatentVideo};
use crate::diffusion::{loop_value_and_grad, DenoiserParams, FirstFrameCondition, LoopMode, NoiseSchedule};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kernels::gemm;
use crate::optim::{AdamW, AdamWConfig};
use crate::rng::{derived_rng, standard_normal};
use crate::tensor::Tensor;
use crate::video::{export_frame_grid, write_video, Frame, Video};

/// Per-frame Gram matrices `G_ab = (1/(h·w)) Σ_p x[a,p]·x[b,p]` of `x: [f, c, h, w]`,
/// concatenated frame by frame (`f·c·c` values).
pub fn gram_matrices(x: &[f64], dims: [usize; 4]) -> Vec<f64> {
    let [f, c, h, w] = dims;
    let p = h * w;
    let mut out = vec![0.0; f * c * c];
    for fi in 0..f {
        let xf = &x[fi * c * p..(fi + 1) * c * p];
        gemm(c, p, c, xf, p, 1, xf, 1, p, 0.0, &mut out[fi * c * c..(fi + 1) * c * c], c, 1);
    }
    let inv = 1.0 / p as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    out
}

/// Pullback of [`gram_matrices`]: given `dL/dG`, returns `dL/dx`.
pub fn gram_matrices_vjp(x: &[f64], dims: [usize; 4], dg: &[f64]) -> Vec<f64> {
    let [f, c, h, w] = dims;
    let p = h * w;
    let inv = 1.0 / p as f64;
    let mut dx = vec![0.0; x.len()];
    let mut sym = vec![0.0; c * c];
    for fi in 0..f {
        let d = &dg[fi * c * c..(fi + 1) * c * c];
        for a in 0..c {
            for b in 0..c {
                sym[a * c + b] = (d[a * c + b] + d[b * c + a]) * inv;
            }
        }
        let xf = &x[fi * c * p..(fi + 1) * c * p];
        gemm(c, c, p, &sym, c, 1, xf, p, 1, 0.0, &mut dx[fi * c * p..(fi + 1) * c * p], p, 1);
    }
    dx
}

/// `c×c` Gram matrix of one frame, row-major.
pub fn gram_matrix(frame: &Frame) -> Vec<f64> {
    let data: Vec<f64> = frame.data.iter().map(|&v| v as f64).collect();
    gram_matrices(&data, [1, frame.c, frame.h, frame.w])
}

/// `‖ẑ_0 − z_i‖₁`, summed over all elements.
pub fn inversion_loss(z0_hat: &LatentVideo, z_i: &LatentVideo) -> Result<f64> {
    if z0_hat.shape() != z_i.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", z0_hat.shape(), z_i.shape())));
    }
    Ok(z0_hat.data().iter().zip(z_i.data()).map(|(a, b)| (a - b).abs()).sum())
}

/// `(1/(N_f·C²))·Σ_n ‖G(a_n) − G(b_n)‖_F²` over tensors `[f, c, h, w]`.
pub fn style_loss_tensor(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let dims = a.dims4();
    let (ga, gb) = (gram_matrices(a.data(), dims), gram_matrices(b.data(), dims));
    let sq: f64 = ga.iter().zip(&gb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sq / (dims[0] * dims[1] * dims[1]) as f64)
}

pub fn style_loss(x_c: &Video, x_i: &Video) -> Result<f64> {
    style_loss_tensor(&x_c.to_tensor(), &x_i.to_tensor())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfeLoss {
    pub total: f64,
    pub ce: f64,
    pub style: f64,
}

/// `L_C = CE(ŷ, y_c) + λ·L_S(x̂_c, x_i)`.
pub fn cfe_loss(x_i: &Video, x_c_hat: &Video, pred: &Prediction, y_c: usize, lambda: f64) -> Result<CfeLoss> {
    let ce = cross_entropy(pred, y_c)?;
    let style = style_loss(x_c_hat, x_i)?;
    Ok(CfeLoss { total: ce + lambda * style, ce, style })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BTTFConfig {
    /// Inversion iterations `K_I`.
    pub inversion_iters: usize,
    /// Iterations per denoising depth `K_C`.
    pub cfe_iters: usize,
    /// Largest denoising depth `N`.
    pub max_depth: usize,
    /// Style weight `λ`.
    pub style_weight: f64,
    pub lr: f64,
    pub weight_decay: f64,
    /// Restart the optimizer moments whenever the depth grows.
    pub reset_optimizer_per_depth: bool,
    pub loop_mode: LoopMode,
    pub seed: u64,
}

impl Default for BTTFConfig {
    fn default() -> Self {
        BTTFConfig {
            inversion_iters: 0,
            cfe_iters: 100,
            max_depth: 15,
            style_weight: 1e5,
            lr: 1e-2,
            weight_decay: 1e-2,
            reset_optimizer_per_depth: false,
            loop_mode: LoopMode::Full,
            seed: 0,
        }
    }
}

impl BTTFConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.cfe_iters == 0 {
            return Err(Error::config("cfe_iters", "must be at least 1"));
        }
        if self.max_depth == 0 || self.max_depth > schedule.inference.len() {
            return Err(Error::config(
                "max_depth",
                format!("must be in 1..={} (inference subsequence length)", schedule.inference.len()),
            ));
        }
        if !(self.style_weight >= 0.0 && self.style_weight.is_finite()) {
            return Err(Error::config("style_weight", "must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be positive"));
        }
        Ok(())
    }
}

/// Trained pieces BTTF and the guidance baselines run on.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub codec: &'a CodecParams,
    pub denoiser: &'a DenoiserParams,
    pub schedule: &'a NoiseSchedule,
    pub classifier: &'a ClassifierParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Inversion,
    Cfe,
    Final,
}

/// One trace record, taken before the update of that iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: Stage,
    pub n: usize,
    pub iter: usize,
    pub loss: f64,
    pub ce: Option<f64>,
    pub style: Option<f64>,
    pub pred: Option<usize>,
    pub p_target: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CFEResult {
    pub video: Video,
    pub z_t: LatentVideo,
    pub trace: Vec<TraceEntry>,
    pub prediction: Prediction,
    pub target: usize,
    pub valid: bool,
    /// `L_I` after the last inversion update (equal to the initial value when `K_I = 0`).
    pub inversion_final_loss: Option<f64>,
    pub wall_clock_secs: f64,
    pub config: BTTFConfig,
}

/// The persisted, timing-free part of a result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultSummary {
    pub method: String,
    pub target: usize,
    pub predicted: usize,
    pub valid: bool,
    pub probs: Vec<f64>,
    pub config: serde_json::Value,
    pub trace_len: usize,
}

impl CFEResult {
    pub fn summary(&self) -> ResultSummary {
        ResultSummary {
            method: "bttf".into(),
            target: self.target,
            predicted: self.prediction.argmax(),
            valid: self.valid,
            probs: self.prediction.probs.clone(),
            config: serde_json::to_value(&self.config).expect("config serializes"),
            trace_len: self.trace.len(),
        }
    }

    /// Writes `cfe.bvid`, `cfe_grid.ppm`, `result.json`, and `trace.jsonl` into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        persist_outputs(dir, &self.video, &self.summary(), &self.trace)
    }
}

pub fn persist_outputs(dir: &Path, video: &Video, summary: &ResultSummary, trace: &[TraceEntry]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_video(&dir.join("cfe.bvid"), video)?;
    export_frame_grid(video, &dir.join("cfe_grid.ppm"))?;
    let rj = dir.join("result.json");
    std::fs::write(&rj, serde_json::to_string_pretty(summary)?).map_err(|e| Error::io(&rj, e))?;
    let mut lines = String::new();
    for t in trace {
        lines.push_str(&serde_json::to_string(t)?);
        lines.push('\n');
    }
    let tj = dir.join("trace.jsonl");
    std::fs::write(&tj, lines).map_err(|e| Error::io(&tj, e))
}

/// Seeded standard-normal initial latent.
pub fn initial_latent(dims: [usize; 4], seed: u64) -> Tensor {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), standard_normal(&mut derived_rng(seed, "bttf/z_T", 0), n))
}

/// Everything one evaluation of the CFE objective produces.
pub struct CfeEvaluation {
    pub loss: CfeLoss,
    pub logits: Vec<f64>,
    pub z0: Tensor,
    pub decoded: Tensor,
    pub grad: Tensor,
}

/// `L_C` at depth `n` and its gradient with respect to `z_T`, through
/// `classifier ∘ decode ∘ denoising_loop`.
#[allow(clippy::too_many_arguments)]
pub fn cfe_objective(
    z_t: &Tensor,
    cond: &FirstFrameCondition,
    reference_grams: &Arc<Vec<f64>>,
    n: usize,
    target: usize,
    lambda: f64,
    comps: Components<'_>,
    mode: LoopMode,
) -> Result<CfeEvaluation> {
    let head = |g: &mut Graph, z0| {
        let cb = comps.codec.bind(g, false);
        let x = comps.codec.decode_graph(g, &cb, z0);
        let kb = comps.classifier.store.bind(g, false);
        let tr = classifier::forward(g, &kb, &comps.classifier.arch, x);
        let ce = g.cross_entropy(tr.logits, target);
        let st = g.style_loss(x, reference_grams.clone());
        let total = g.lincomb(ce, 1.0, st, lambda);
        let extra = (g.value(ce).item(), g.value(st).item(), g.value(tr.logits).data().to_vec(), g.value(x).clone());
        Ok((total, extra))
    };
    let r = loop_value_and_grad(z_t, cond, n, comps.denoiser, comps.schedule, mode, head)?;
    let (ce, style, logits, decoded) = r.head;
    Ok(CfeEvaluation { loss: CfeLoss { total: ce + lambda * style, ce, style }, logits, z0: r.z0, decoded, grad: r.grad })
}

/// `L_I` at depth 1 and its gradient with respect to `z_T`.
pub fn inversion_objective(
    z_t: &Tensor,
    cond: &FirstFrameCondition,
    z_i: &Tensor,
    comps: Components<'_>,
    mode: LoopMode,
) -> Result<(f64, Tensor)> {
    let head = |g: &mut Graph, z0| {
        let target = g.constant(z_i.clone());
        let l = g.l1_sum(z0, target);
        let v = g.value(l).item();
        Ok((l, v))
    };
    let r = loop_value_and_grad(z_t, cond, 1, comps.denoiser, comps.schedule, mode, head)?;
    Ok((r.head, r.grad))
}

fn optimizer(cfg: &BTTFConfig, len: usize) -> AdamW {
    AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() }, &[len])
}

fn update(opt: &mut AdamW, z: &mut Tensor, grad: &Tensor) {
    opt.step(&mut [z.data_mut()], &[grad.data()], &[true]);
}

/// Stage 1 from a given initial latent: `K_I` updates of `z_T` on `L_I(loop(z_T, 1), z_i)`.
/// Returns the latent, its trace, and the `L_I` reached.
pub fn stage1_from(
    mut z_t: Tensor,
    cond: &FirstFrameCondition,
    z_i: &Tensor,
    cfg: &BTTFConfig,
    comps: Components<'_>,
    opt: &mut AdamW,
) -> Result<(Tensor, Vec<TraceEntry>, Option<f64>)> {
    let mut trace = Vec::with_capacity(cfg.inversion_iters);
    if cfg.inversion_iters == 0 {
        return Ok((z_t, trace, None));
    }
    for iter in 0..cfg.inversion_iters {
        let (loss, grad) = inversion_objective(&z_t, cond, z_i, comps, cfg.loop_mode)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::NonFinite { stage: "inversion".into(), iteration: iter });
        }
        trace.push(TraceEntry { stage: Stage::Inversion, n: 1, iter, loss, ce: None, style: None, pred: None, p_target: None });
        update(opt, &mut z_t, &grad);
    }
    let (last, _) = inversion_objective(&z_t, cond, z_i, comps, cfg.loop_mode)?;
    Ok((z_t, trace, Some(last)))
}

/// Stage 1 from the seeded initial sample; with `K_I = 0` returns it unchanged.
pub fn stage1_invert(x_i: &Video, cfg: &BTTFConfig, comps: Components<'_>) -> Result<Tensor> {
    let z_i = comps.codec.encode(x_i)?;
    let cond = FirstFrameCondition::from_video(x_i, comps.codec)?;
    let z0 = initial_latent(z_i.dims4(), cfg.seed);
    let mut opt = optimizer(cfg, z0.len());
    Ok(stage1_from(z0, &cond, &z_i, cfg, comps, &mut opt)?.0)
}

/// Stage 2: for `n = 1..=N`, `K_C` updates of `z_T` on `L_C` at depth `n`.
pub fn stage2_from(
    mut z_t: Tensor,
    x_i: &Video,
    cond: &FirstFrameCondition,
    target: usize,
    cfg: &BTTFConfig,
    comps: Components<'_>,
    opt: &mut AdamW,
) -> Result<(Tensor, Vec<TraceEntry>)> {
    let grams = Arc::new(gram_matrices(&x_i.to_tensor().into_data(), x_i.dims()));
    let mut trace = Vec::with_capacity(cfg.max_depth * cfg.cfe_iters);
    for n in 1..=cfg.max_depth {
        if cfg.reset_optimizer_per_depth && n > 1 {
            opt.reset();
        }
        for iter in 0..cfg.cfe_iters {
            let ev = cfe_objective(&z_t, cond, &grams, n, target, cfg.style_weight, comps, cfg.loop_mode)?;
            if !ev.loss.total.is_finite() || !ev.grad.is_finite() {
                return Err(Error::NonFinite { stage: format!("cfe depth {n}"), iteration: iter });
            }
            let pred = Prediction::from_logits(ev.logits);
            trace.push(TraceEntry {
                stage: Stage::Cfe,
                n,
                iter,
                loss: ev.loss.total,
                ce: Some(ev.loss.ce),
                style: Some(ev.loss.style),
                pred: Some(pred.argmax()),
                p_target: Some(pred.probs[target]),
            });
            update(opt, &mut z_t, &ev.grad);
        }
    }
    Ok((z_t, trace))
}

/// Full pipeline: condition on the first frame, invert, generate, render at depth `N`.
pub fn run_bttf(x_i: &Video, target: usize, comps: Components<'_>, cfg: &BTTFConfig) -> Result<CFEResult> {
    let start = Instant::now();
    cfg.validate(comps.schedule)?;
    let classes = comps.classifier.arch.classes;
    if target >= classes {
        return Err(Error::ClassIndex { index: target, classes });
    }
    let z_i = comps.codec.encode(x_i).map_err(|e| e.in_stage("encode"))?;
    let cond = FirstFrameCondition::from_video(x_i, comps.codec).map_err(|e| e.in_stage("condition"))?;
    let z0 = initial_latent(z_i.dims4(), cfg.seed);
    let mut opt = optimizer(cfg, z0.len());
    let (z_t, mut trace, inv_final) =
        stage1_from(z0, &cond, &z_i, cfg, comps, &mut opt).map_err(|e| e.in_stage("stage 1"))?;
    let (z_t, t2) = stage2_from(z_t, x_i, &cond, target, cfg, comps, &mut opt).map_err(|e| e.in_stage("stage 2"))?;
    trace.extend(t2);

    let grams = Arc::new(gram_matrices(&x_i.to_tensor().into_data(), x_i.dims()));
    let ev = cfe_objective(&z_t, &cond, &grams, cfg.max_depth, target, cfg.style_weight, comps, cfg.loop_mode)
        .map_err(|e| e.in_stage("render"))?;
    let [n, c, h, w] = ev.decoded.dims4();
    let video = Video::from_f64_clamped(n, c, h, w, ev.decoded.data()).map_err(|e| e.in_stage("render"))?;
    let prediction = comps.classifier.predict(&video)?;
    let valid = prediction.argmax() == target;
    trace.push(TraceEntry {
        stage: Stage::Final,
        n: cfg.max_depth,
        iter: 0,
        loss: ev.loss.total,
        ce: Some(ev.loss.ce),
        style: Some(ev.loss.style),
        pred: Some(prediction.argmax()),
        p_target: Some(prediction.probs[target]),
    });
    Ok(CFEResult {
        video,
        z_t,
        trace,
        prediction,
        target,
        valid,
        inversion_final_loss: inv_final,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: cfg.clone(),
    })
}
