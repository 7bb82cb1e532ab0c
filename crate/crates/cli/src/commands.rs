//! The individual subcommands.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use bttf_core::baselines::{cg_generate, pgd_cfe, BaselineResult, CGVariant, CGVariantConfig};
use bttf_core::bttf::{persist_outputs, run_bttf, BTTFConfig, Components, ResultSummary, TraceEntry};
use bttf_core::classifier::{
    cross_entropy, evaluate, train_classifier, ClassifierKind, ClassifierParams, ClassifierTrainConfig, PGDConfig,
    TrainLogLine,
};
use bttf_core::codec::{train_codec, CodecMode, CodecParams, CodecTrainConfig};
use bttf_core::dataset::{generate_shape_moving, LabeledDataset, ShapeMovingConfig, Split};
use bttf_core::diffusion::{train_denoiser, DenoiserParams, DenoiserTrainConfig, NoiseSchedule, ScheduleConfig};
use bttf_core::metrics::evaluate_method;
use bttf_core::video::read_video;
use bttf_core::{Error, Video};
use serde::{Deserialize, Serialize};

use crate::checkpoints::{self as ck, CheckpointDir};
use crate::config::load_config;
use crate::manifest::{RunManifest, VideoList};
use crate::{CliError, CliResult};

fn mkdir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Appends JSON lines to a file, flushing each record.
pub struct JsonlWriter(BufWriter<File>, PathBuf);

impl JsonlWriter {
    pub fn create(path: &Path) -> CliResult<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(JsonlWriter(BufWriter::new(f), path.to_path_buf()))
    }

    pub fn write<T: Serialize>(&mut self, v: &T) -> CliResult<()> {
        let line = serde_json::to_string(v)?;
        writeln!(self.0, "{line}").and_then(|_| self.0.flush()).map_err(|e| Error::io(&self.1, e))?;
        Ok(())
    }
}

// ---------------------------------------------------------------- gen-data

pub fn gen_data(config: Option<&Path>, overrides: &[String], out: &Path) -> CliResult<()> {
    let cfg: ShapeMovingConfig = load_config(config, overrides)?;
    cfg.validate()?;
    let mut m = RunManifest::begin("gen-data", serde_json::to_value(&cfg)?, cfg.seed);
    if let Some(p) = config {
        m.input(p)?;
    }
    for split in [Split::Train, Split::Test] {
        let ds = generate_shape_moving(&cfg, split)?;
        ds.save(out)?;
        m.outputs.push(PathBuf::from(split.name()));
    }
    m.finish(out)
}

// ---------------------------------------------------------------- train

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Classifier,
    Codec,
    Denoiser,
}

impl FromStr for Component {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "classifier" => Ok(Component::Classifier),
            "codec" => Ok(Component::Codec),
            "denoiser" => Ok(Component::Denoiser),
            other => Err(CliError::Usage(format!("unknown component `{other}`; valid: classifier, codec, denoiser"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierCommandConfig {
    pub train: ClassifierTrainConfig,
    pub kind: ClassifierKind,
    /// Inner attack used by robust training.
    pub robust_attack: PGDConfig,
    /// Attack used for the robust-accuracy line of the test log.
    pub eval_attack: Option<PGDConfig>,
}

impl Default for ClassifierCommandConfig {
    fn default() -> Self {
        ClassifierCommandConfig {
            train: ClassifierTrainConfig::default(),
            kind: ClassifierKind::Standard,
            robust_attack: robust_training_attack(),
            eval_attack: None,
        }
    }
}

/// Desk-scale inner attack for robust training.
pub fn robust_training_attack() -> PGDConfig {
    PGDConfig { epsilon: 4.0, steps: 5, random_start: true, ..Default::default() }
}

/// The l2 attack shared by both classifiers when comparing robust accuracy.
pub fn shared_attack() -> PGDConfig {
    PGDConfig { epsilon: 8.0, steps: 10, ..Default::default() }
}

pub fn checkpoint_name(kind: ClassifierKind) -> &'static str {
    match kind {
        ClassifierKind::Standard => ck::CLASSIFIER,
        ClassifierKind::Robust => ck::ROBUST_CLASSIFIER,
        ClassifierKind::Frame => ck::FRAME_CLASSIFIER,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserCommandConfig {
    pub train: DenoiserTrainConfig,
    pub schedule: ScheduleConfig,
}

/// Mean cross-entropy and accuracy of `clf` on clip inputs.
pub fn split_metrics(data: &LabeledDataset, clf: &ClassifierParams) -> CliResult<(f64, f64)> {
    let mut loss = 0.0;
    let mut correct = 0;
    for (v, y) in &data.samples {
        let p = clf.predict(v)?;
        loss += cross_entropy(&p, *y)?;
        correct += (p.argmax() == *y) as usize;
    }
    let n = data.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}

pub struct TrainArgs<'a> {
    pub component: Component,
    pub data: &'a Path,
    pub out: &'a Path,
    pub config: Option<&'a Path>,
    pub overrides: &'a [String],
    pub resume: bool,
}

pub fn train(a: TrainArgs<'_>) -> CliResult<()> {
    if !a.data.join("train.json").exists() {
        return Err(Error::io(
            a.data.join("train.json"),
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found; run gen-data first"),
        )
        .into());
    }
    mkdir(a.out)?;
    let dir = CheckpointDir::new(a.out);
    let train_set = LabeledDataset::load(a.data, Split::Train)?;
    let mut inputs = vec![a.data.join("train.json")];
    match a.component {
        Component::Classifier => {
            let cfg: ClassifierCommandConfig = load_config(a.config, a.overrides)?;
            let name = checkpoint_name(cfg.kind);
            let mut m = RunManifest::begin("train classifier", serde_json::to_value(&cfg)?, cfg.train.seed);
            let resume = if a.resume { Some(dir.classifier(name)?) } else { None };
            let log_path = a.out.join(format!("{name}.log.jsonl"));
            let mut log = JsonlWriter::create(&log_path)?;
            let mut log_err = None;
            let robust = (cfg.kind == ClassifierKind::Robust).then_some(&cfg.robust_attack);
            let clf = train_classifier(&train_set.samples, &cfg.train, cfg.kind, robust, resume, &mut |l| {
                if let Err(e) = log.write(l) {
                    log_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = log_err {
                return Err(e);
            }
            clf.save(&dir.stem(name))?;
            if a.data.join("test.json").exists() && cfg.kind != ClassifierKind::Frame {
                let test = LabeledDataset::load(a.data, Split::Test)?;
                inputs.push(a.data.join("test.json"));
                let (loss, accuracy) = split_metrics(&test, &clf)?;
                let epoch = cfg.train.epochs.saturating_sub(1);
                log.write(&TrainLogLine { epoch, split: "test".into(), loss, accuracy })?;
                if let Some(att) = &cfg.eval_attack {
                    let r = evaluate(&test.samples, &clf, Some(att))?;
                    write_json(&a.out.join(format!("{name}.eval.json")), &r)?;
                }
            }
            for p in &inputs {
                m.input(p)?;
            }
            m.outputs.extend([dir.stem(name).with_extension("btfw"), log_path]);
            m.finish(a.out)
        }
        Component::Codec => {
            if a.resume {
                return Err(CliError::Usage("--resume is supported for classifiers only".into()));
            }
            let cfg: CodecTrainConfig = load_config(a.config, a.overrides)?;
            let mut m = RunManifest::begin("train codec", serde_json::to_value(&cfg)?, cfg.seed);
            let log_path = a.out.join("codec.log.jsonl");
            let mut log = JsonlWriter::create(&log_path)?;
            let mut lines = Vec::new();
            let codec = train_codec(&train_set.samples, &cfg, &mut |l| lines.push(l.clone()))?;
            for l in &lines {
                log.write(l)?;
            }
            if cfg.mode == CodecMode::Learned {
                codec.save(&dir.stem(ck::CODEC))?;
                m.outputs.push(dir.stem(ck::CODEC).with_extension("btfw"));
            }
            m.input(&inputs[0])?;
            m.outputs.push(log_path);
            m.finish(a.out)
        }
        Component::Denoiser => {
            if a.resume {
                return Err(CliError::Usage("--resume is supported for classifiers only".into()));
            }
            let cfg: DenoiserCommandConfig = load_config(a.config, a.overrides)?;
            let schedule = cfg.schedule.build()?;
            let channels = train_set.samples.first().map(|(v, _)| v.channels()).unwrap_or(3);
            let codec = dir.codec(channels)?;
            let mut m = RunManifest::begin("train denoiser", serde_json::to_value(&cfg)?, cfg.train.seed);
            dir.record(&mut m, &[ck::CODEC])?;
            let log_path = a.out.join("denoiser.log.jsonl");
            let mut log = JsonlWriter::create(&log_path)?;
            let mut lines = Vec::new();
            let p = train_denoiser(&train_set.samples, &codec, &schedule, &cfg.train, &mut |l| lines.push(l.clone()))?;
            for l in &lines {
                log.write(l)?;
            }
            p.save(&dir.stem(ck::DENOISER))?;
            dir.save_schedule(&cfg.schedule)?;
            m.input(&inputs[0])?;
            m.outputs.extend([dir.stem(ck::DENOISER).with_extension("btfw"), log_path]);
            m.finish(a.out)
        }
    }
}

// ---------------------------------------------------------------- explain

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Bttf,
    Pgd,
    CgFrame,
    CgVideoMid,
    CgVideo,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Bttf, Method::Pgd, Method::CgFrame, Method::CgVideoMid, Method::CgVideo];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bttf => "bttf",
            Method::Pgd => "pgd",
            Method::CgFrame => "cg-frame",
            Method::CgVideoMid => "cg-video-mid",
            Method::CgVideo => "cg-video",
        }
    }

    fn variant(self) -> Option<CGVariant> {
        match self {
            Method::CgFrame => Some(CGVariant::Frame),
            Method::CgVideoMid => Some(CGVariant::VideoMid),
            Method::CgVideo => Some(CGVariant::Video),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CliError;
    fn from_str(s: &str) -> CliResult<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            CliError::Usage(format!("unknown method `{s}`; valid methods: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceSettings {
    pub scale: f64,
    pub seed: u64,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        GuidanceSettings { scale: 20.0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub bttf: BTTFConfig,
    pub pgd: PGDConfig,
    pub cg: GuidanceSettings,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            bttf: BTTFConfig::default(),
            pgd: PGDConfig { epsilon: 12.0, steps: 100, early_stop: true, ..Default::default() },
            cg: GuidanceSettings::default(),
        }
    }
}

/// Everything a method may need; the denoiser and frame classifier are optional
/// because PGD uses neither.
pub struct Models {
    pub classifier: ClassifierParams,
    pub frame_classifier: Option<ClassifierParams>,
    pub codec: CodecParams,
    pub denoiser: Option<DenoiserParams>,
    pub schedule: NoiseSchedule,
}

impl Models {
    pub fn load(dir: &CheckpointDir, method: Method) -> CliResult<Self> {
        let classifier = dir.classifier(ck::CLASSIFIER)?;
        let needs_diffusion = method != Method::Pgd;
        Ok(Models {
            codec: dir.codec(classifier.arch.channels)?,
            frame_classifier: if method == Method::CgFrame { Some(dir.classifier(ck::FRAME_CLASSIFIER)?) } else { None },
            denoiser: if needs_diffusion { Some(dir.denoiser()?) } else { None },
            schedule: dir.schedule()?,
            classifier,
        })
    }

    pub fn components(&self) -> CliResult<Components<'_>> {
        let denoiser = self
            .denoiser
            .as_ref()
            .ok_or_else(|| CliError::Usage("this method needs a trained denoiser".into()))?;
        Ok(Components { codec: &self.codec, denoiser, schedule: &self.schedule, classifier: &self.classifier })
    }
}

pub struct MethodOutput {
    pub video: Video,
    pub summary: ResultSummary,
    pub trace: Vec<TraceEntry>,
}

pub fn run_method(method: Method, x: &Video, target: usize, models: &Models, cfg: &ExplainConfig) -> CliResult<MethodOutput> {
    let classes = models.classifier.arch.classes;
    if target >= classes {
        return Err(Error::ClassIndex { index: target, classes }.into());
    }
    match method {
        Method::Bttf => {
            let r = run_bttf(x, target, models.components()?, &cfg.bttf)?;
            Ok(MethodOutput { summary: r.summary(), video: r.video, trace: r.trace })
        }
        Method::Pgd => {
            let v = pgd_cfe(x, target, &models.classifier, &cfg.pgd)?;
            let r = BaselineResult::new("pgd", v, target, &models.classifier, serde_json::to_value(&cfg.pgd)?)?;
            Ok(MethodOutput { summary: r.summary(), video: r.video, trace: Vec::new() })
        }
        m => {
            let cg = CGVariantConfig { variant: m.variant().expect("cg method"), scale: cfg.cg.scale, seed: cfg.cg.seed };
            let v = cg_generate(x, target, &cg, models.components()?, models.frame_classifier.as_ref())?;
            let r = BaselineResult::new(m.name(), v, target, &models.classifier, serde_json::to_value(&cg)?)?;
            Ok(MethodOutput { summary: r.summary(), video: r.video, trace: Vec::new() })
        }
    }
}

pub struct ExplainArgs<'a> {
    pub method: &'a str,
    pub input: &'a Path,
    pub target: usize,
    pub checkpoints: &'a Path,
    pub config: Option<&'a Path>,
    pub overrides: &'a [String],
    pub out: &'a Path,
}

pub fn explain(a: ExplainArgs<'_>) -> CliResult<()> {
    let method: Method = a.method.parse()?;
    let cfg: ExplainConfig = load_config(a.config, a.overrides)?;
    let dir = CheckpointDir::new(a.checkpoints);
    let models = Models::load(&dir, method)?;
    let x = read_video(a.input)?;
    let mut m = RunManifest::begin(&format!("explain {method}"), serde_json::to_value(&cfg)?, cfg.bttf.seed);
    m.input(a.input)?;
    dir.record(&mut m, &[ck::CLASSIFIER, ck::FRAME_CLASSIFIER, ck::CODEC, ck::DENOISER])?;
    let out = run_method(method, &x, a.target, &models, &cfg)?;
    persist_outputs(a.out, &out.video, &out.summary, &out.trace)?;
    m.outputs = ["cfe.bvid", "cfe_grid.ppm", "result.json", "trace.jsonl"].iter().map(PathBuf::from).collect();
    m.finish(a.out)
}

// ---------------------------------------------------------------- evaluate

pub fn load_videos(list: &VideoList) -> CliResult<Vec<Video>> {
    list.entries.iter().map(|e| Ok(read_video(&e.path)?)).collect()
}

pub fn evaluate_lists(originals: &Path, counterfactuals: &Path, checkpoints: &Path, out: &Path) -> CliResult<()> {
    let (lo, lc) = (VideoList::load(originals)?, VideoList::load(counterfactuals)?);
    if lo.entries.len() != lc.entries.len() {
        return Err(Error::Shape(format!(
            "misaligned manifests: {} originals vs {} counterfactuals",
            lo.entries.len(),
            lc.entries.len()
        ))
        .into());
    }
    let dir = CheckpointDir::new(checkpoints);
    let clf = dir.classifier(ck::CLASSIFIER)?;
    let extractor = if dir.stem(ck::ROBUST_CLASSIFIER).with_extension("btfw").exists() {
        dir.classifier(ck::ROBUST_CLASSIFIER)?
    } else {
        clf.clone()
    };
    let (vo, vc) = (load_videos(&lo)?, load_videos(&lc)?);
    let targets: Vec<usize> = lc
        .entries
        .iter()
        .zip(&vo)
        .map(|(e, v)| match e.target {
            Some(t) => Ok(t),
            None => Ok(clf.predict(v)?.argmax()),
        })
        .collect::<CliResult<_>>()?;
    let report = evaluate_method(&vo, &vc, &targets, &clf, &extractor)?;
    let mut m = RunManifest::begin("evaluate", serde_json::json!({}), 0);
    m.inputs.push(crate::manifest::FileDigest::of(originals)?);
    m.inputs.push(crate::manifest::FileDigest::of(counterfactuals)?);
    dir.record(&mut m, &[ck::CLASSIFIER, ck::ROBUST_CLASSIFIER])?;
    write_report(out, &report)?;
    m.outputs = ["report.json", "samples.jsonl"].iter().map(PathBuf::from).collect();
    m.finish(out)
}

pub fn write_report(out: &Path, report: &bttf_core::metrics::MetricsReport) -> CliResult<()> {
    mkdir(out)?;
    write_json(&out.join("report.json"), report)?;
    let mut w = JsonlWriter::create(&out.join("samples.jsonl"))?;
    for s in &report.samples {
        w.write(s)?;
    }
    Ok(())
}
