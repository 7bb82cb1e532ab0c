//! Comparison methods: targeted PGD and three classifier-guided sampling variants.

use serde::{Deserialize, Serialize};

use crate::bttf::{Components, ResultSummary};
use crate::classifier::{pgd_attack, ClassifierParams, PGDConfig, Prediction};
use crate::diffusion::{
    classifier_guided_step, forward_noise, FirstFrameCondition, GuidanceConfig, GuidanceView,
};
use crate::error::{Error, Result};
use crate::rng::{derived_rng, standard_normal};
use crate::tensor::Tensor;
use crate::video::Video;

/// Targeted l2 PGD toward `y_c`.
pub fn pgd_cfe(x_i: &Video, y_c: usize, clf: &ClassifierParams, cfg: &PGDConfig) -> Result<Video> {
    let cfg = PGDConfig { targeted: true, target: Some(y_c), ..cfg.clone() };
    pgd_attack(x_i, y_c, clf, &cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CGVariant {
    Frame,
    VideoMid,
    Video,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StartState {
    FullNoise,
    HalfNoise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CGVariantConfig {
    pub variant: CGVariant,
    /// Guidance scale `w`.
    pub scale: f64,
    pub seed: u64,
}

impl CGVariantConfig {
    pub fn start(&self) -> StartState {
        match self.variant {
            CGVariant::VideoMid => StartState::HalfNoise,
            _ => StartState::FullNoise,
        }
    }

    /// Number of guided steps for a subsequence of the given length and half-noise position.
    pub fn guided_steps(&self, inference_len: usize, half: usize) -> usize {
        match self.start() {
            StartState::FullNoise => inference_len,
            StartState::HalfNoise => inference_len - half,
        }
    }
}

/// Classifier-guided sampling conditioned on `x_i`'s first frame. `frame_clf` guides
/// the `Frame` variant, the clip classifier in `comps` guides the others.
pub fn cg_generate(
    x_i: &Video,
    y_c: usize,
    cfg: &CGVariantConfig,
    comps: Components<'_>,
    frame_clf: Option<&ClassifierParams>,
) -> Result<Video> {
    if !cfg.scale.is_finite() {
        return Err(Error::config("scale", "must be finite"));
    }
    let s = comps.schedule;
    let cond = FirstFrameCondition::from_video(x_i, comps.codec)?;
    let z_i = comps.codec.encode(x_i)?;
    let noise = Tensor::new(z_i.shape().to_vec(), standard_normal(&mut derived_rng(cfg.seed, "cg/noise", 0), z_i.len()));
    let first = match cfg.start() {
        StartState::FullNoise => 0,
        StartState::HalfNoise => s.half_noise_position(),
    };
    let mut z = match cfg.start() {
        StartState::FullNoise => noise,
        StartState::HalfNoise => forward_noise(&z_i, s.inference[first], &noise, s)?,
    };
    let (clf, view) = match cfg.variant {
        CGVariant::Frame => {
            let f = frame_clf.ok_or_else(|| Error::config("frame_classifier", "CG-Frame needs a frame classifier"))?;
            (f, GuidanceView::EachFrame)
        }
        _ => (comps.classifier, GuidanceView::Clip),
    };
    let guide = GuidanceConfig { scale: cfg.scale, target: y_c };
    let mut z0 = None;
    for i in first..s.inference.len() {
        let (prev, est) =
            classifier_guided_step(&z, s.inference[i], s.prev_of(i), comps.denoiser, s, comps.codec, clf, &cond, &guide, view)?;
        z = prev;
        z0 = Some(est);
    }
    comps.codec.decode(&z0.expect("nonempty subsequence"))
}

/// A baseline output with the same persisted shape as a BTTF result.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineResult {
    pub method: String,
    pub video: Video,
    pub prediction: Prediction,
    pub target: usize,
    pub config: serde_json::Value,
}

impl BaselineResult {
    pub fn new(method: &str, video: Video, target: usize, clf: &ClassifierParams, config: serde_json::Value) -> Result<Self> {
        let prediction = clf.predict(&video)?;
        Ok(BaselineResult { method: method.into(), video, prediction, target, config })
    }

    pub fn valid(&self) -> bool {
        self.prediction.argmax() == self.target
    }

    pub fn summary(&self) -> ResultSummary {
        ResultSummary {
            method: self.method.clone(),
            target: self.target,
            predicted: self.prediction.argmax(),
            valid: self.valid(),
            probs: self.prediction.probs.clone(),
            config: self.config.clone(),
            trace_len: 0,
        }
    }
}
