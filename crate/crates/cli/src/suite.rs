//! `reproduce-orderings`: trains every component from one master seed, runs all
//! methods on a fixed pair suite plus the ablations, and writes the metric
//! reports and ordering checks.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use bttf_core::bttf::{persist_outputs, ResultSummary};
use bttf_core::classifier::{evaluate, train_classifier, ClassifierKind, ClassifierParams, ClassifierTrainConfig, PGDConfig};
use bttf_core::codec::{train_codec, CodecMode, CodecParams, CodecTrainConfig};
use bttf_core::dataset::{generate_shape_moving, LabeledDataset, ShapeMovingConfig, Split};
use bttf_core::diffusion::{train_denoiser, DenoiserParams};
use bttf_core::metrics::{extract_features, frechet_distance, FeatureLevel, FrechetStats, MetricsReport};
use bttf_core::rng::derive_seed;
use bttf_core::video::read_video;
use bttf_core::{Error, Video};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoints::{self as ck, CheckpointDir};
use crate::commands::{
    robust_training_attack, run_method, shared_attack, write_report, DenoiserCommandConfig, ExplainConfig, Method,
    Models,
};
use crate::manifest::{RunManifest, VideoEntry, VideoList};
use crate::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustSettings {
    pub train: ClassifierTrainConfig,
    pub attack: PGDConfig,
}

impl Default for RobustSettings {
    fn default() -> Self {
        RobustSettings { train: ClassifierTrainConfig { epochs: 3, ..Default::default() }, attack: robust_training_attack() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairSettings {
    /// Inputs explained toward every other class.
    pub inputs: usize,
    /// Further inputs with one seeded non-original target each.
    pub extra: usize,
}

impl Default for PairSettings {
    fn default() -> Self {
        PairSettings { inputs: 5, extra: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub data: ShapeMovingConfig,
    pub classifier: ClassifierTrainConfig,
    pub robust: RobustSettings,
    pub frame_classifier: ClassifierTrainConfig,
    pub codec: CodecTrainConfig,
    pub denoiser: DenoiserCommandConfig,
    pub shared_attack: PGDConfig,
    /// Test clips attacked when measuring robust accuracy.
    pub attack_eval_samples: usize,
    pub explain: ExplainConfig,
    pub pairs: PairSettings,
    pub methods: Vec<Method>,
    /// Paired ablation runs on the first suite pairs.
    pub ablation_runs: usize,
    pub ablation_inversion_iters: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            seed: 0,
            data: ShapeMovingConfig { train_per_class: 600, test_per_class: 100, ..Default::default() },
            classifier: ClassifierTrainConfig::default(),
            robust: RobustSettings::default(),
            frame_classifier: ClassifierTrainConfig { epochs: 2, ..Default::default() },
            codec: CodecTrainConfig { mode: CodecMode::Identity, ..Default::default() },
            denoiser: DenoiserCommandConfig::default(),
            shared_attack: shared_attack(),
            attack_eval_samples: 200,
            explain: ExplainConfig::default(),
            pairs: PairSettings::default(),
            methods: Method::ALL.to_vec(),
            ablation_runs: 5,
            ablation_inversion_iters: 40,
        }
    }
}

impl SuiteConfig {
    /// Replaces every component seed with one derived from the master seed.
    pub fn with_derived_seeds(mut self) -> Self {
        let s = self.seed;
        self.data.seed = derive_seed(s, "suite/data", 0);
        self.classifier.seed = derive_seed(s, "suite/classifier", 0);
        self.robust.train.seed = derive_seed(s, "suite/robust", 0);
        self.robust.attack.seed = derive_seed(s, "suite/robust-attack", 0);
        self.frame_classifier.seed = derive_seed(s, "suite/frame-classifier", 0);
        self.codec.seed = derive_seed(s, "suite/codec", 0);
        self.denoiser.train.seed = derive_seed(s, "suite/denoiser", 0);
        self
    }

    pub fn validate(&self) -> CliResult<()> {
        self.data.validate()?;
        if self.pairs.inputs == 0 && self.pairs.extra == 0 {
            return Err(Error::config("pairs", "suite needs at least one pair").into());
        }
        if self.ablation_runs > self.pairs.inputs * (self.data_classes() - 1) + self.pairs.extra {
            return Err(Error::config("ablation_runs", "more ablation runs than suite pairs").into());
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "no methods selected").into());
        }
        Ok(())
    }

    fn data_classes(&self) -> usize {
        bttf_core::dataset::NUM_CLASSES
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub index: usize,
    /// Index into the test split.
    pub input: usize,
    pub label: usize,
    pub target: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierSummary {
    pub standard_accuracy: f64,
    pub standard_robust_accuracy: f64,
    pub robust_accuracy: f64,
    pub robust_robust_accuracy: f64,
    pub frame_accuracy: f64,
    pub attack: PGDConfig,
    pub attacked_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub flip_rate: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub l1: f64,
    pub fid: f64,
    pub fvd: f64,
    pub largest_region_energy: f64,
}

impl From<&MetricsReport> for MethodSummary {
    fn from(r: &MetricsReport) -> Self {
        let lre = r.samples.iter().map(|s| s.largest_region_energy).sum::<f64>() / r.count as f64;
        MethodSummary {
            flip_rate: r.flip_rate,
            ssim: r.ssim,
            perceptual: r.perceptual,
            l1: r.l1,
            fid: r.fid,
            fvd: r.fvd,
            largest_region_energy: lre,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub pair: usize,
    pub baseline: f64,
    pub variant: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orderings {
    pub pairs: Vec<Pair>,
    pub classifiers: ClassifierSummary,
    pub methods: BTreeMap<String, MethodSummary>,
    /// Per-run frame-level Fréchet distance, λ = 10⁵ (baseline) vs λ = 0.
    pub ablation_style: Vec<AblationRun>,
    /// Per-run mean absolute pixel distance, K_I = 40 (baseline) vs K_I = 0.
    pub ablation_inversion: Vec<AblationRun>,
    pub checks: BTreeMap<String, bool>,
}

/// Trained components of a suite run.
pub struct Trained {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub standard: ClassifierParams,
    pub robust: ClassifierParams,
    pub frame: ClassifierParams,
    pub codec: CodecParams,
    pub denoiser: DenoiserParams,
}

fn log_progress(msg: impl AsRef<str>) {
    if std::env::var_os("BTTF_LAB_QUIET").is_none() {
        eprintln!("[bttf-lab] {}", msg.as_ref());
    }
}

fn load_or_train_classifier(
    dir: &CheckpointDir,
    name: &str,
    train: impl FnOnce() -> bttf_core::Result<ClassifierParams>,
) -> CliResult<ClassifierParams> {
    if dir.stem(name).with_extension("btfw").exists() {
        return dir.classifier(name);
    }
    let t0 = Instant::now();
    let c = train()?;
    c.save(&dir.stem(name))?;
    log_progress(format!("trained {name} in {:.1}s", t0.elapsed().as_secs_f64()));
    Ok(c)
}

/// Generates the data and trains (or reloads from `out/checkpoints`) every component.
pub fn prepare(cfg: &SuiteConfig, out: &Path) -> CliResult<Trained> {
    let data_dir = out.join("data");
    let (train, test) = if data_dir.join("test.json").exists() {
        (LabeledDataset::load(&data_dir, Split::Train)?, LabeledDataset::load(&data_dir, Split::Test)?)
    } else {
        let tr = generate_shape_moving(&cfg.data, Split::Train)?;
        let te = generate_shape_moving(&cfg.data, Split::Test)?;
        tr.save(&data_dir)?;
        te.save(&data_dir)?;
        (tr, te)
    };
    let ckdir = out.join("checkpoints");
    std::fs::create_dir_all(&ckdir).map_err(|e| Error::io(&ckdir, e))?;
    let dir = CheckpointDir::new(&ckdir);
    let quiet = &mut |_: &bttf_core::classifier::TrainLogLine| {};
    let standard = load_or_train_classifier(&dir, ck::CLASSIFIER, || {
        train_classifier(&train.samples, &cfg.classifier, ClassifierKind::Standard, None, None, quiet)
    })?;
    let robust = load_or_train_classifier(&dir, ck::ROBUST_CLASSIFIER, || {
        train_classifier(&train.samples, &cfg.robust.train, ClassifierKind::Robust, Some(&cfg.robust.attack), None, &mut |_| {})
    })?;
    let frame = load_or_train_classifier(&dir, ck::FRAME_CLASSIFIER, || {
        train_classifier(&train.samples, &cfg.frame_classifier, ClassifierKind::Frame, None, None, &mut |_| {})
    })?;
    let codec = if cfg.codec.mode == CodecMode::Learned {
        if dir.stem(ck::CODEC).with_extension("btfw").exists() {
            CodecParams::load(&dir.stem(ck::CODEC))?
        } else {
            let c = train_codec(&train.samples, &cfg.codec, &mut |_| {})?;
            c.save(&dir.stem(ck::CODEC))?;
            c
        }
    } else {
        CodecParams::identity(cfg.data.channels)
    };
    let denoiser = if dir.stem(ck::DENOISER).with_extension("btfw").exists() {
        dir.denoiser()?
    } else {
        let t0 = Instant::now();
        let schedule = cfg.denoiser.schedule.build()?;
        let d = train_denoiser(&train.samples, &codec, &schedule, &cfg.denoiser.train, &mut |_| {})?;
        d.save(&dir.stem(ck::DENOISER))?;
        log_progress(format!("trained denoiser in {:.1}s", t0.elapsed().as_secs_f64()));
        d
    };
    dir.save_schedule(&cfg.denoiser.schedule)?;
    Ok(Trained { train, test, standard, robust, frame, codec, denoiser })
}

fn accuracy(data: &[(Video, usize)], clf: &ClassifierParams, kind_frame: bool) -> CliResult<f64> {
    if !kind_frame {
        return Ok(evaluate(data, clf, None)?.accuracy);
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (v, y) in data {
        for k in 0..v.frames() {
            let p = clf.predict_tensor(&v.frame(k).to_tensor())?;
            hits += (p.argmax() == *y) as usize;
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

pub fn classifier_summary(cfg: &SuiteConfig, t: &Trained) -> CliResult<ClassifierSummary> {
    let n = cfg.attack_eval_samples.min(t.test.len());
    let attacked = &t.test.samples[..n];
    let s = evaluate(attacked, &t.standard, Some(&cfg.shared_attack))?;
    let r = evaluate(attacked, &t.robust, Some(&cfg.shared_attack))?;
    Ok(ClassifierSummary {
        standard_accuracy: accuracy(&t.test.samples, &t.standard, false)?,
        standard_robust_accuracy: s.robust_accuracy.unwrap_or(f64::NAN),
        robust_accuracy: accuracy(&t.test.samples, &t.robust, false)?,
        robust_robust_accuracy: r.robust_accuracy.unwrap_or(f64::NAN),
        frame_accuracy: accuracy(&t.test.samples, &t.frame, true)?,
        attack: cfg.shared_attack.clone(),
        attacked_samples: n,
    })
}

/// `inputs` correctly classified test clips explained toward every other class,
/// then `extra` further clips with one seeded target each.
pub fn select_pairs(cfg: &SuiteConfig, test: &LabeledDataset, clf: &ClassifierParams) -> CliResult<Vec<Pair>> {
    let classes = cfg.data_classes();
    let mut pairs = Vec::new();
    let mut used = 0;
    let mut next_input = |pairs: &[Pair]| -> CliResult<(usize, usize)> {
        while used < test.len() {
            let i = used;
            used += 1;
            let (v, y) = &test.samples[i];
            if clf.predict(v)?.argmax() == *y {
                return Ok((i, *y));
            }
        }
        Err(Error::Empty(format!("only {} correctly classified test clips for the pair suite", pairs.len())).into())
    };
    for _ in 0..cfg.pairs.inputs {
        let (i, y) = next_input(&pairs)?;
        for t in (0..classes).filter(|&t| t != y) {
            pairs.push(Pair { index: pairs.len(), input: i, label: y, target: t });
        }
    }
    for e in 0..cfg.pairs.extra {
        let (i, y) = next_input(&pairs)?;
        let mut rng = bttf_core::rng::derived_rng(cfg.seed, "suite/extra-target", e as u64);
        let t = (y + 1 + rng.gen_range(0..classes - 1)) % classes;
        pairs.push(Pair { index: pairs.len(), input: i, label: y, target: t });
    }
    Ok(pairs)
}

/// Run label and configuration of one method or ablation variant.
struct RunSpec {
    label: String,
    method: Method,
    cfg: ExplainConfig,
}

fn run_specs(cfg: &SuiteConfig) -> Vec<RunSpec> {
    let mut v: Vec<RunSpec> =
        cfg.methods.iter().map(|&m| RunSpec { label: m.name().into(), method: m, cfg: cfg.explain.clone() }).collect();
    if cfg.ablation_runs > 0 {
        let mut no_style = cfg.explain.clone();
        no_style.bttf.style_weight = 0.0;
        v.push(RunSpec { label: "bttf-no-style".into(), method: Method::Bttf, cfg: no_style });
        let mut inv = cfg.explain.clone();
        inv.bttf.inversion_iters = cfg.ablation_inversion_iters;
        v.push(RunSpec { label: "bttf-inversion".into(), method: Method::Bttf, cfg: inv });
    }
    v
}

fn per_pair_config(spec: &RunSpec, master: u64, pair: &Pair) -> ExplainConfig {
    let mut c = spec.cfg.clone();
    c.bttf.seed = derive_seed(master, "suite/bttf-latent", pair.index as u64);
    c.cg.seed = derive_seed(master, "suite/cg-noise", pair.index as u64);
    c.pgd.seed = derive_seed(master, "suite/pgd", pair.index as u64);
    c
}

/// Runs (or reloads) one method over the given pairs; outputs go to `runs/<label>/<pair>/`.
fn run_all(
    spec: &RunSpec,
    pairs: &[Pair],
    t: &Trained,
    cfg: &SuiteConfig,
    runs_dir: &Path,
) -> CliResult<Vec<(Video, ResultSummary)>> {
    let models = Models {
        classifier: t.standard.clone(),
        frame_classifier: Some(t.frame.clone()),
        codec: t.codec.clone(),
        denoiser: Some(t.denoiser.clone()),
        schedule: cfg.denoiser.schedule.build()?,
    };
    let t0 = Instant::now();
    let out: Vec<(Video, ResultSummary)> = pairs
        .par_iter()
        .map(|p| {
            let dir = runs_dir.join(&spec.label).join(format!("{:02}", p.index));
            let result = dir.join("result.json");
            if result.exists() && dir.join("cfe.bvid").exists() {
                let text = std::fs::read_to_string(&result).map_err(|e| Error::io(&result, e))?;
                return Ok((read_video(&dir.join("cfe.bvid"))?, serde_json::from_str(&text)?));
            }
            let pc = per_pair_config(spec, cfg.seed, p);
            let x = &t.test.samples[p.input].0;
            let started = Instant::now();
            let o = run_method(spec.method, x, p.target, &models, &pc)?;
            persist_outputs(&dir, &o.video, &o.summary, &o.trace)?;
            let mut m = RunManifest::begin(&format!("explain {}", spec.method), serde_json::to_value(&pc)?, pc.bttf.seed);
            m.config["pair"] = serde_json::to_value(p)?;
            m.config["wall_clock_secs"] = started.elapsed().as_secs_f64().into();
            m.outputs = ["cfe.bvid", "cfe_grid.ppm", "result.json", "trace.jsonl"].iter().map(PathBuf::from).collect();
            m.finish(&dir)?;
            Ok((o.video, o.summary))
        })
        .collect::<CliResult<_>>()?;
    log_progress(format!("{}: {} runs in {:.1}s", spec.label, pairs.len(), t0.elapsed().as_secs_f64()));
    Ok(out)
}

fn frame_fid(a: &Video, b: &Video, ex: &ClassifierParams) -> CliResult<f64> {
    let fa = FrechetStats::from_features(&extract_features(a, ex, FeatureLevel::Frame)?)?;
    let fb = FrechetStats::from_features(&extract_features(b, ex, FeatureLevel::Frame)?)?;
    Ok(frechet_distance(&fa, &fb)?)
}

/// Named pass/fail checks over the suite results.
pub fn ordering_checks(o: &Orderings) -> BTreeMap<String, bool> {
    let mut c = BTreeMap::new();
    let get = |m: &str| o.methods.get(m);
    let cl = &o.classifiers;
    c.insert("classifier_accuracy_ge_0.95".into(), cl.standard_accuracy >= 0.95);
    c.insert(
        "robust_gap_ge_20pp".into(),
        cl.robust_robust_accuracy - cl.standard_robust_accuracy >= 0.20,
    );
    if let Some(b) = get("bttf") {
        c.insert("bttf_flip_rate_ge_0.90".into(), b.flip_rate >= 0.90);
        if let Some(f) = get("cg-frame") {
            c.insert("fvd_cg_frame_ge_2x_bttf".into(), f.fvd >= 2.0 * b.fvd);
        }
        if let Some(v) = get("cg-video") {
            c.insert("fid_bttf_lt_cg_video".into(), b.fid < v.fid);
        }
        if let Some(p) = get("pgd") {
            c.insert("fr_pgd_ge_bttf_minus_0.05".into(), p.flip_rate >= b.flip_rate - 0.05);
            c.insert("ssim_pgd_gt_bttf".into(), p.ssim > b.ssim);
            c.insert("fvd_pgd_lt_bttf".into(), p.fvd < b.fvd);
        }
    }
    if !o.ablation_style.is_empty() {
        let worse = o.ablation_style.iter().filter(|r| r.variant >= 1.5 * r.baseline).count();
        c.insert("no_style_fid_worse_by_50pct_on_3_of_5".into(), worse >= 3);
    }
    if !o.ablation_inversion.is_empty() {
        let closer = o.ablation_inversion.iter().filter(|r| r.variant > r.baseline).count();
        c.insert("no_inversion_l1_higher_on_3_of_5".into(), closer >= 3);
    }
    c
}

/// Full suite into `out`. Existing checkpoints and run outputs under `out` are reused.
pub fn reproduce_orderings(cfg: &SuiteConfig, out: &Path) -> CliResult<Orderings> {
    cfg.validate()?;
    let cfg = cfg.clone().with_derived_seeds();
    let mut manifest = RunManifest::begin("reproduce-orderings", serde_json::to_value(&cfg)?, cfg.seed);
    let t = prepare(&cfg, out)?;
    let classifiers = classifier_summary(&cfg, &t)?;
    log_progress(format!("classifiers: {}", serde_json::to_string(&classifiers)?));
    let pairs = select_pairs(&cfg, &t.test, &t.standard)?;
    let runs_dir = out.join("runs");
    let lists = out.join("lists");
    std::fs::create_dir_all(&lists).map_err(|e| Error::io(&lists, e))?;
    let originals: Vec<Video> = pairs.iter().map(|p| t.test.samples[p.input].0.clone()).collect();
    let targets: Vec<usize> = pairs.iter().map(|p| p.target).collect();
    VideoList {
        entries: pairs
            .iter()
            .map(|p| VideoEntry { path: PathBuf::from(format!("../data/test/{:06}.bvid", p.input)), target: None })
            .collect(),
    }
    .save(&lists.join("originals.json"))?;

    let mut methods = BTreeMap::new();
    let mut results: BTreeMap<String, Vec<(Video, ResultSummary)>> = BTreeMap::new();
    for spec in run_specs(&cfg) {
        let ablation = spec.label.starts_with("bttf-");
        let subset = if ablation { &pairs[..cfg.ablation_runs] } else { &pairs[..] };
        let r = run_all(&spec, subset, &t, &cfg, &runs_dir)?;
        if !ablation {
            let vids: Vec<Video> = r.iter().map(|(v, _)| v.clone()).collect();
            let report = bttf_core::metrics::evaluate_method(&originals, &vids, &targets, &t.standard, &t.robust)?;
            write_report(&out.join("reports").join(&spec.label), &report)?;
            VideoList {
                entries: pairs
                    .iter()
                    .map(|p| VideoEntry {
                        path: PathBuf::from(format!("../runs/{}/{:02}/cfe.bvid", spec.label, p.index)),
                        target: Some(p.target),
                    })
                    .collect(),
            }
            .save(&lists.join(format!("{}.json", spec.label)))?;
            methods.insert(spec.label.clone(), MethodSummary::from(&report));
        }
        results.insert(spec.label, r);
    }

    let mut ablation_style = Vec::new();
    let mut ablation_inversion = Vec::new();
    if cfg.ablation_runs > 0 {
        let base = results.get("bttf").ok_or_else(|| CliError::Validation("ablations need the bttf method".into()))?;
        for (i, p) in pairs[..cfg.ablation_runs].iter().enumerate() {
            let x = &originals[p.index];
            let ns = &results["bttf-no-style"][i].0;
            let inv = &results["bttf-inversion"][i].0;
            ablation_style.push(AblationRun {
                pair: p.index,
                baseline: frame_fid(x, &base[i].0, &t.robust)?,
                variant: frame_fid(x, ns, &t.robust)?,
            });
            ablation_inversion.push(AblationRun {
                pair: p.index,
                baseline: x.mean_abs_diff(inv),
                variant: x.mean_abs_diff(&base[i].0),
            });
        }
    }
    let mut o = Orderings { pairs, classifiers, methods, ablation_style, ablation_inversion, checks: BTreeMap::new() };
    o.checks = ordering_checks(&o);
    let path = out.join("orderings.json");
    std::fs::write(&path, serde_json::to_string_pretty(&o)?).map_err(|e| Error::io(&path, e))?;
    manifest.outputs = vec!["orderings.json".into(), "runs".into(), "reports".into(), "checkpoints".into()];
    manifest.finish(out)?;
    Ok(o)
}

/// Every `result.json` under `runs/`, keyed by relative path.
pub fn collect_results(out: &Path) -> CliResult<BTreeMap<PathBuf, Vec<u8>>> {
    let mut m = BTreeMap::new();
    let runs = out.join("runs");
    let mut stack = vec![runs.clone()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let p = e.map_err(|e| Error::io(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().is_some_and(|n| n == "result.json") {
                let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
                m.insert(p.strip_prefix(&runs).expect("under runs").to_path_buf(), bytes);
            }
        }
    }
    Ok(m)
}
