//! The target video classifier, its standard and PGD-robust training, and the
//! l2 PGD attack.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{softmax, Graph, Var, PROB_FLOOR};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::{he_normal, temporal_identity, Bound, ParamStore};
use crate::rng::{derived_rng, rng_from_seed, standard_normal};
use crate::tensor::Tensor;
use crate::video::Video;

/// Spatiotemporal conv net: space-to-depth, three (conv3x3, temporal conv,
/// SiLU) blocks with 2x pooling between them, global average pool, linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierArch {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: [usize; 3],
    pub temporal_kernel: usize,
    pub classes: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        ClassifierArch { channels: 3, height: 32, width: 32, widths: [16, 32, 64], temporal_kernel: 3, classes: 4 }
    }
}

impl ClassifierArch {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("classes", "need at least 2 classes"));
        }
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::config("height", "height and width must be multiples of 8"));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(Error::config("temporal_kernel", "must be odd"));
        }
        Ok(())
    }

    pub fn init(&self, seed: u64) -> ParamStore {
        let mut rng = derived_rng(seed, "classifier/init", 0);
        let mut s = ParamStore::new();
        let mut ci = self.channels * 4;
        for (i, &co) in self.widths.iter().enumerate() {
            s.insert(format!("b{i}/conv/w"), he_normal(&mut rng, vec![co, ci, 3, 3], ci * 9, 1.0));
            s.insert(format!("b{i}/conv/b"), Tensor::zeros(vec![co]));
            s.insert(format!("b{i}/time/w"), temporal_identity(&mut rng, co, co, self.temporal_kernel, 0.05));
            s.insert(format!("b{i}/time/b"), Tensor::zeros(vec![co]));
            ci = co;
        }
        s.insert("head/w", he_normal(&mut rng, vec![self.classes, ci], ci, 0.5));
        s.insert("head/b", Tensor::zeros(vec![self.classes]));
        s
    }

    pub fn feature_dim(&self) -> usize {
        self.widths[2]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierKind {
    Standard,
    Robust,
    /// Trained on single frames carrying their clip's label.
    Frame,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub arch: ClassifierArch,
    pub kind: ClassifierKind,
    /// Optimizer steps taken so far.
    pub step: u64,
    #[serde(skip)]
    pub store: ParamStore,
}

/// Graph handles produced by one forward pass.
pub struct ClassifierTrace {
    pub logits: Var,
    /// Activations after each block.
    pub layers: [Var; 3],
    /// Global-average-pooled last block, the penultimate features.
    pub pooled: Var,
}

pub fn forward(g: &mut Graph, b: &Bound, arch: &ClassifierArch, x: Var) -> ClassifierTrace {
    let mut h = g.pixel_unshuffle(x, 2);
    let mut layers = Vec::with_capacity(3);
    for i in 0..3 {
        if i > 0 {
            h = g.avg_pool2(h);
        }
        let c = g.conv2d(h, b.get(&format!("b{i}/conv/w")), Some(b.get(&format!("b{i}/conv/b"))));
        let t = g.temporal_conv(c, b.get(&format!("b{i}/time/w")), Some(b.get(&format!("b{i}/time/b"))));
        h = g.silu(t);
        layers.push(h);
    }
    let pooled = g.global_avg_pool(h);
    let logits = g.linear(pooled, b.get("head/w"), b.get("head/b"));
    let _ = arch;
    ClassifierTrace { logits, layers: [layers[0], layers[1], layers[2]], pooled }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        Prediction { logits, probs }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// `-ln max(ŷ[y], 1e-12)`.
pub fn cross_entropy(pred: &Prediction, y: usize) -> Result<f64> {
    let p = pred.probs.get(y).ok_or(Error::ClassIndex { index: y, classes: pred.probs.len() })?;
    Ok(-(p.max(PROB_FLOOR)).ln())
}

/// What an attack or guidance procedure needs from a classifier.
pub trait DifferentiableClassifier: Sync {
    fn classes(&self) -> usize;
    fn logits(&self, x: &Tensor) -> Vec<f64>;
    /// Cross-entropy toward `target` and its gradient with respect to `x`.
    fn ce_and_grad(&self, x: &Tensor, target: usize) -> (f64, Tensor);
}

impl ClassifierParams {
    pub fn new(arch: ClassifierArch, kind: ClassifierKind, seed: u64) -> Result<Self> {
        arch.validate()?;
        let store = arch.init(seed);
        Ok(ClassifierParams { arch, kind, step: 0, store })
    }

    fn check_geometry(&self, x: &Tensor) -> Result<()> {
        let [_, c, h, w] = x.dims4();
        if (c, h, w) != (self.arch.channels, self.arch.height, self.arch.width) {
            return Err(Error::Shape(format!(
                "classifier expects {}x{}x{} frames, got {c}x{h}x{w}",
                self.arch.channels, self.arch.height, self.arch.width
            )));
        }
        Ok(())
    }

    pub fn predict(&self, x: &Video) -> Result<Prediction> {
        self.predict_tensor(&x.to_tensor())
    }

    pub fn predict_tensor(&self, x: &Tensor) -> Result<Prediction> {
        self.check_geometry(x)?;
        Ok(Prediction::from_logits(self.logits(x)))
    }

    /// Block activations and pooled features for `x`, without gradients.
    pub fn features(&self, x: &Tensor) -> (Vec<Tensor>, Vec<f64>) {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let tr = forward(&mut g, &b, &self.arch, xv);
        let layers = tr.layers.iter().map(|&l| g.value(l).clone()).collect();
        (layers, g.value(tr.pooled).data().to_vec())
    }

    /// Saves `<stem>.btfw` (tensors plus `meta/step`) and `<stem>.json` (architecture and kind).
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
        let mut p: ClassifierParams = serde_json::from_str(&text)?;
        let mut store = ParamStore::load(&stem.with_extension("btfw"))?;
        if let Some(step) = store.remove("meta/step") {
            p.step = step.item() as u64;
        }
        let expected = p.arch.init(0);
        for (name, t) in expected.iter() {
            let got = store.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Shape(format!("checkpoint tensor `{name}` has shape {:?}", got.shape())));
            }
        }
        p.store = store;
        Ok(p)
    }
}

impl DifferentiableClassifier for ClassifierParams {
    fn classes(&self) -> usize {
        self.arch.classes
    }

    fn logits(&self, x: &Tensor) -> Vec<f64> {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let tr = forward(&mut g, &b, &self.arch, xv);
        g.value(tr.logits).data().to_vec()
    }

    fn ce_and_grad(&self, x: &Tensor, target: usize) -> (f64, Tensor) {
        let mut g = Graph::new();
        let b = self.store.bind(&mut g, false);
        let xv = g.param(x.clone());
        let tr = forward(&mut g, &b, &self.arch, xv);
        let ce = g.cross_entropy(tr.logits, target);
        let grads = g.backward(ce);
        (g.value(ce).item(), grads.tensor(xv))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PGDConfig {
    /// l2 budget in pixel units.
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2.5·ε/steps` when absent.
    pub step_size: Option<f64>,
    pub targeted: bool,
    pub target: Option<usize>,
    pub random_start: bool,
    pub seed: u64,
    /// Stop as soon as the iterate is no longer classified `y` (untargeted) or is classified the target.
    pub early_stop: bool,
}

impl Default for PGDConfig {
    fn default() -> Self {
        PGDConfig { epsilon: 2.0, steps: 10, step_size: None, targeted: false, target: None, random_start: false, seed: 0, early_stop: false }
    }
}

impl PGDConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::config("epsilon", "must be finite and non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.targeted && self.target.is_none() {
            return Err(Error::config("target", "targeted attack needs a target class"));
        }
        Ok(())
    }

    pub fn effective_step_size(&self) -> f64 {
        self.step_size.unwrap_or(2.5 * self.epsilon / self.steps as f64)
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `delta` back onto the ε-ball if it left it.
fn project_l2(delta: &mut [f64], eps: f64) {
    let n = l2(delta);
    if n > eps {
        let s = eps / n;
        delta.iter_mut().for_each(|d| *d *= s);
    }
}

/// l2 PGD. Untargeted mode ascends the cross-entropy of `y`; targeted mode
/// descends the cross-entropy of `cfg.target`. Each step moves `step_size` along
/// the normalized gradient, projects onto the ε-ball around `x`, and clamps to `[0, 1]`.
/// With `early_stop` the first iterate that meets the goal is returned.
pub fn pgd_attack_tensor(x: &Tensor, y: usize, clf: &dyn DifferentiableClassifier, cfg: &PGDConfig) -> Result<Tensor> {
    cfg.validate()?;
    let classes = clf.classes();
    let (label, sign) = if cfg.targeted {
        let t = cfg.target.expect("validated");
        (t, -1.0)
    } else {
        (y, 1.0)
    };
    if label >= classes {
        return Err(Error::ClassIndex { index: label, classes });
    }
    let eps = cfg.epsilon;
    let alpha = cfg.effective_step_size();
    let xd = x.data();
    let mut delta = vec![0.0; x.len()];
    if cfg.random_start && eps > 0.0 {
        let mut rng = rng_from_seed(cfg.seed);
        let dir = standard_normal(&mut rng, x.len());
        let n = l2(&dir).max(1e-300);
        let r = eps * rand::Rng::gen::<f64>(&mut rng);
        for (d, v) in delta.iter_mut().zip(&dir) {
            *d = v / n * r;
        }
        clamp_delta(xd, &mut delta);
    }
    let done = |adv: &Tensor| {
        let pred = argmax(&clf.logits(adv));
        if cfg.targeted {
            pred == label
        } else {
            pred != label
        }
    };
    for _ in 0..cfg.steps {
        let adv = Tensor::new(x.shape().to_vec(), xd.iter().zip(&delta).map(|(a, d)| a + d).collect());
        if cfg.early_stop && done(&adv) {
            break;
        }
        let (_, grad) = clf.ce_and_grad(&adv, label);
        let gn = l2(grad.data());
        if gn == 0.0 || !gn.is_finite() {
            break;
        }
        for (d, g) in delta.iter_mut().zip(grad.data()) {
            *d += sign * alpha * g / gn;
        }
        project_l2(&mut delta, eps);
        clamp_delta(xd, &mut delta);
    }
    Ok(Tensor::new(x.shape().to_vec(), xd.iter().zip(&delta).map(|(a, d)| a + d).collect()))
}

/// Keeps `x + delta` inside `[0, 1]`. Clamping only shrinks `|delta|`, so the ball constraint survives.
fn clamp_delta(x: &[f64], delta: &mut [f64]) {
    for (d, &a) in delta.iter_mut().zip(x) {
        *d = (a + *d).clamp(0.0, 1.0) - a;
    }
}

pub fn pgd_attack(x: &Video, y: usize, clf: &dyn DifferentiableClassifier, cfg: &PGDConfig) -> Result<Video> {
    let out = pgd_attack_tensor(&x.to_tensor(), y, clf, cfg)?;
    Video::from_f64_clamped(x.frames(), x.channels(), x.height(), x.width(), out.data())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub robust_accuracy: Option<f64>,
    pub attack_config: Option<PGDConfig>,
    pub samples: usize,
}

/// Clean accuracy and, with an attack, accuracy on per-sample untargeted PGD inputs.
pub fn evaluate(
    data: &[(Video, usize)],
    clf: &ClassifierParams,
    attack: Option<&PGDConfig>,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let results: Vec<(bool, Option<bool>)> = data
        .par_iter()
        .enumerate()
        .map(|(i, (v, y))| {
            let x = v.to_tensor();
            let clean = clf.predict_tensor(&x)?.argmax() == *y;
            let robust = match attack {
                Some(cfg) => {
                    let cfg = PGDConfig { targeted: false, target: None, seed: cfg.seed.wrapping_add(i as u64), ..cfg.clone() };
                    let adv = pgd_attack_tensor(&x, *y, clf, &cfg)?;
                    Some(clf.predict_tensor(&adv)?.argmax() == *y)
                }
                None => None,
            };
            Ok((clean, robust))
        })
        .collect::<Result<_>>()?;
    let n = results.len() as f64;
    let accuracy = results.iter().filter(|r| r.0).count() as f64 / n;
    let robust_accuracy = attack.map(|_| results.iter().filter(|r| r.1 == Some(true)).count() as f64 / n);
    Ok(EvalReport { accuracy, robust_accuracy, attack_config: attack.cloned(), samples: data.len() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierTrainConfig {
    pub arch: ClassifierArch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            arch: ClassifierArch::default(),
            epochs: 4,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

/// One JSONL record of a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogLine {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

/// Mean cross-entropy, accuracy, and summed parameter gradients over a batch.
/// Per-sample gradients are reduced in index order so the result does not depend
/// on how rayon schedules the work.
fn batch_gradients(store: &ParamStore, arch: &ClassifierArch, batch: &[(Tensor, usize)]) -> (f64, usize, Vec<Vec<f64>>) {
    let per: Vec<(f64, bool, Vec<Vec<f64>>)> = batch
        .par_iter()
        .map(|(x, y)| {
            let mut g = Graph::new();
            let b = store.bind(&mut g, true);
            let xv = g.constant(x.clone());
            let tr = forward(&mut g, &b, arch, xv);
            let ce = g.cross_entropy(tr.logits, *y);
            let correct = argmax(g.value(tr.logits).data()) == *y;
            let mut grads = g.backward(ce);
            let gs = b
                .vars()
                .map(|(_, v)| grads.take(v).unwrap_or_else(|| vec![0.0; g.value(v).len()]))
                .collect();
            (g.value(ce).item(), correct, gs)
        })
        .collect();
    let mut total = 0.0;
    let mut correct = 0;
    let mut acc: Option<Vec<Vec<f64>>> = None;
    for (l, c, gs) in per {
        total += l;
        correct += c as usize;
        match &mut acc {
            None => acc = Some(gs),
            Some(a) => {
                for (ai, gi) in a.iter_mut().zip(gs) {
                    for (x, y) in ai.iter_mut().zip(gi) {
                        *x += y;
                    }
                }
            }
        }
    }
    (total, correct, acc.unwrap_or_default())
}

/// Clip tensors for clip-level training, or every frame as a one-frame clip for
/// [`ClassifierKind::Frame`].
pub fn training_inputs(data: &[(Video, usize)], kind: ClassifierKind) -> Vec<(Tensor, usize)> {
    match kind {
        ClassifierKind::Frame => data
            .iter()
            .flat_map(|(v, y)| (0..v.frames()).map(move |k| (v.frame(k).to_tensor(), *y)))
            .collect(),
        _ => data.iter().map(|(v, y)| (v.to_tensor(), *y)).collect(),
    }
}

/// Minibatch AdamW on cross-entropy. With `robust`, every minibatch is replaced
/// by untargeted PGD inputs against the current parameters before the step.
/// `resume` continues from an earlier checkpoint (its step counter carries over;
/// optimizer moments restart).
pub fn train_classifier(
    data: &[(Video, usize)],
    cfg: &ClassifierTrainConfig,
    kind: ClassifierKind,
    robust: Option<&PGDConfig>,
    resume: Option<ClassifierParams>,
    log: &mut dyn FnMut(&TrainLogLine),
) -> Result<ClassifierParams> {
    if data.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::config("batch_size", "must be positive"));
    }
    if let Some(r) = robust {
        r.validate()?;
    }
    let kind = if robust.is_some() { ClassifierKind::Robust } else { kind };
    let mut params = match resume {
        Some(p) => p,
        None => ClassifierParams::new(cfg.arch.clone(), kind, cfg.seed)?,
    };
    let inputs = training_inputs(data, kind);
    let sizes: Vec<usize> = params.store.iter().map(|(_, t)| t.len()).collect();
    let decay: Vec<bool> = params.store.iter().map(|(n, _)| n.ends_with("/w")).collect();
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() }, &sizes);
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut derived_rng(cfg.seed, "classifier/shuffle", epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch: Vec<(Tensor, usize)> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            if let Some(r) = robust {
                let step = params.step;
                batch = batch
                    .par_iter()
                    .enumerate()
                    .map(|(j, (x, y))| {
                        let c = PGDConfig { seed: r.seed ^ (step << 16) ^ j as u64, ..r.clone() };
                        Ok((pgd_attack_tensor(x, *y, &params, &c)?, *y))
                    })
                    .collect::<Result<_>>()?;
            }
            let (l, c, grads) = batch_gradients(&params.store, &params.arch, &batch);
            if !l.is_finite() {
                return Err(Error::Diverged { step: params.step as usize, loss: l });
            }
            loss_sum += l;
            correct += c;
            let inv = 1.0 / batch.len() as f64;
            let grads: Vec<Vec<f64>> = grads.into_iter().map(|g| g.into_iter().map(|v| v * inv).collect()).collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut ps: Vec<&mut [f64]> = params.store.tensors_mut().map(Tensor::data_mut).collect();
            opt.step(&mut ps, &grad_refs, &decay);
            params.step += 1;
        }
        log(&TrainLogLine {
            epoch,
            split: "train".into(),
            loss: loss_sum / inputs.len() as f64,
            accuracy: correct as f64 / inputs.len() as f64,
        });
    }
    params.store.round_to_f32();
    Ok(params)
}
