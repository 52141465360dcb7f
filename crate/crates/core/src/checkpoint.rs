//! Versioned predictor checkpoints.
//!
//! Layout: `MFCK | version | parameterization tag | config JSON | config hash
//! | metadata JSON | tensor count | (name, tensor)* | sha256`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{write_file, BlobReader, BlobWriter};
use crate::nn::PredictorParams;
use crate::objective::Parameterization;
use crate::predictor::{PredictorConfig, VectorFieldPredictor};

const MAGIC: &[u8; 4] = b"MFCK";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: PredictorConfig,
    pub parameterization: Parameterization,
    pub params: PredictorParams,
    /// Free-form provenance: run config hash, seed, steps.
    pub meta: serde_json::Value,
}

impl Checkpoint {
    pub fn from_predictor(
        p: &VectorFieldPredictor,
        parameterization: Parameterization,
        meta: serde_json::Value,
    ) -> Self {
        Checkpoint {
            config: p.config().clone(),
            parameterization,
            params: p.params().clone(),
            meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(MAGIC, VERSION);
        w.str(self.parameterization.tag());
        w.str(&serde_json::to_string(&self.config).expect("serializable"));
        w.str(&self.config.hash());
        w.str(&self.meta.to_string());
        w.u64(self.params.num_tensors() as u64);
        for (_, name, t) in self.params.iter() {
            w.str(name).tensor(t);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = BlobReader::open(bytes, MAGIC)?;
        if r.version != VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                r.version
            )));
        }
        let parameterization = Parameterization::from_tag(&r.str()?)?;
        let config: PredictorConfig = serde_json::from_str(&r.str()?)
            .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
        let hash = r.str()?;
        if hash != config.hash() {
            return Err(Error::Data(format!(
                "checkpoint config hash {hash} does not match its config"
            )));
        }
        let meta: serde_json::Value = serde_json::from_str(&r.str()?)
            .map_err(|e| Error::Data(format!("checkpoint metadata: {e}")))?;
        let n = r.usize()?;
        let mut params = PredictorParams::new();
        for _ in 0..n {
            let name = r.str()?;
            params.register(name, r.tensor()?);
        }
        if !r.is_exhausted() {
            return Err(Error::Data("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint {
            config,
            parameterization,
            params,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        Checkpoint::from_bytes(&bytes)
    }

    /// Rebuilds the predictor; the stored tensors must match the layout the
    /// config implies.
    pub fn predictor(&self) -> Result<VectorFieldPredictor> {
        let mut p = VectorFieldPredictor::new(self.config.clone(), 0)?;
        p.load_params(&self.params)?;
        Ok(p)
    }

    /// Errors with every difference when `expected` disagrees with the
    /// stored config or parameterization.
    pub fn ensure_compatible(
        &self,
        expected: &PredictorConfig,
        parameterization: Option<Parameterization>,
    ) -> Result<()> {
        let mut diffs = expected.mismatches(&self.config);
        if let Some(p) = parameterization {
            if p != self.parameterization {
                diffs.push(format!(
                    "parameterization: expected {}, found {}",
                    p.tag(),
                    self.parameterization.tag()
                ));
            }
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::CheckpointMismatch(diffs))
        }
    }
}
