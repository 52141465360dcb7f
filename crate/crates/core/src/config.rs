//! Run configuration: one TOML document with dotted key paths
//! (`train.lr = 1e-3`, `sample.guidance.gamma_a = 2.0`), echoed verbatim
//! into every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::DdimOptions;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::format::short_hash;
use crate::predictor::PredictorConfig;
use crate::sampler::SampleOptions;
use crate::synth::SceneSpec;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub motion_dims: usize,
    pub clips: usize,
    pub heldout_clips: usize,
    pub frames: usize,
    pub identities: usize,
    pub half_life: f64,
    pub label_confidence: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            seed: 7,
            motion_dims: 8,
            clips: 2000,
            heldout_clips: 100,
            frames: 48,
            identities: 50,
            half_life: 4.0,
            label_confidence: 0.85,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub predictor: PredictorConfig,
    pub scene: SceneConfig,
    pub train: TrainConfig,
    pub sample: SampleOptions,
    pub ddim: DdimOptions,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        RunConfig::from_toml_str(&text)
    }

    /// Parses `base` then applies `key.path=value` overrides. Values are read
    /// as TOML scalars or inline tables, falling back to a plain string.
    pub fn with_overrides(base: &str, overrides: &[String]) -> Result<RunConfig> {
        let mut doc: toml::Table =
            toml::from_str(base).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (path, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{o}` is not KEY=VALUE")))?;
            let value = parse_value(raw.trim());
            let keys: Vec<&str> = path.trim().split('.').collect();
            let (last, parents) = keys.split_last().expect("split yields one item");
            let mut table = &mut doc;
            for k in parents {
                let entry = table
                    .entry(k.to_string())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                table = entry
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("`{k}` in `{path}` is not a table")))?;
            }
            table.insert(last.to_string(), value);
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        RunConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes to toml")
    }

    pub fn validate(&self) -> Result<()> {
        self.predictor.validate()?;
        self.train.validate()?;
        self.sample.guidance.validate()?;
        self.ddim.guidance.validate()?;
        if self.sample.nfe == 0 || self.ddim.steps == 0 {
            return Err(Error::Config("nfe and ddim steps must be positive".into()));
        }
        if self.scene.frames < self.predictor.window {
            return Err(Error::Config(format!(
                "clips of {} frames cannot hold a window of {}",
                self.scene.frames, self.predictor.window
            )));
        }
        self.scene_spec().validate()
    }

    /// Replaces every seed with values derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.scene.seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let s = &self.scene;
        let mut spec = SceneSpec::seeded(
            s.seed,
            self.predictor.latent_dim,
            s.motion_dims,
            self.predictor.audio_dim,
            s.frames,
        );
        spec.identities = s.identities;
        spec.half_life = s.half_life;
        spec.label_confidence = s.label_confidence;
        spec
    }

    /// Short hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        short_hash(serde_json::to_string(self).expect("serializes").as_bytes())
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
