//! Fixed file names inside a checkpoint directory.

use std::path::PathBuf;

use bttf_core::classifier::ClassifierParams;
use bttf_core::codec::CodecParams;
use bttf_core::diffusion::{DenoiserParams, NoiseSchedule, ScheduleConfig};
use bttf_core::Error;

use crate::manifest::RunManifest;
use crate::CliResult;

pub const CLASSIFIER: &str = "classifier";
pub const ROBUST_CLASSIFIER: &str = "robust_classifier";
pub const FRAME_CLASSIFIER: &str = "frame_classifier";
pub const CODEC: &str = "codec";
pub const DENOISER: &str = "denoiser";
pub const SCHEDULE: &str = "schedule.json";

#[derive(Clone, Debug)]
pub struct CheckpointDir(pub PathBuf);

impl CheckpointDir {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        CheckpointDir(dir.into())
    }

    pub fn stem(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn require(&self, name: &str) -> CliResult<PathBuf> {
        let stem = self.stem(name);
        let weights = stem.with_extension("btfw");
        if !weights.exists() {
            return Err(Error::io(
                &weights,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("missing checkpoint `{name}`")),
            )
            .into());
        }
        Ok(stem)
    }

    pub fn classifier(&self, name: &str) -> CliResult<ClassifierParams> {
        Ok(ClassifierParams::load(&self.require(name)?)?)
    }

    pub fn denoiser(&self) -> CliResult<DenoiserParams> {
        Ok(DenoiserParams::load(&self.require(DENOISER)?)?)
    }

    /// The learned codec when present, otherwise the identity codec for `channels`.
    pub fn codec(&self, channels: usize) -> CliResult<CodecParams> {
        if self.stem(CODEC).with_extension("btfw").exists() {
            Ok(CodecParams::load(&self.stem(CODEC))?)
        } else {
            Ok(CodecParams::identity(channels))
        }
    }

    pub fn schedule_config(&self) -> CliResult<ScheduleConfig> {
        let p = self.0.join(SCHEDULE);
        if !p.exists() {
            return Ok(ScheduleConfig::default());
        }
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn schedule(&self) -> CliResult<NoiseSchedule> {
        Ok(self.schedule_config()?.build()?)
    }

    pub fn save_schedule(&self, cfg: &ScheduleConfig) -> CliResult<()> {
        let p = self.0.join(SCHEDULE);
        std::fs::write(&p, serde_json::to_string_pretty(cfg)?).map_err(|e| Error::io(&p, e))?;
        Ok(())
    }

    /// Records the weights of every named checkpoint that exists.
    pub fn record(&self, manifest: &mut RunManifest, names: &[&str]) -> CliResult<()> {
        for n in names {
            let p = self.stem(n).with_extension("btfw");
            if p.exists() {
                manifest.checkpoint(&p)?;
            }
        }
        Ok(())
    }
}
