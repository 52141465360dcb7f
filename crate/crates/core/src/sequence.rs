//! Generated latent sequences on disk.
//!
//! Layout: `MFSQ | version | provenance JSON | basis blob | latents | coeffs
//! | sha256`. The payload is the latents and their coefficients; provenance
//! carries config hash, seed and the edit history.

use std::path::Path;

use crate::error::{Error, Result};
use crate::format::{short_hash, write_file, BlobReader, BlobWriter};
use crate::motion_space::{MotionBasis, MotionLatent};
use crate::tensor::Tensor2;

const MAGIC: &[u8; 4] = b"MFSQ";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFile {
    pub provenance: serde_json::Value,
    pub basis: MotionBasis,
    /// `frames x d`
    pub latents: Tensor2,
    /// `frames x M`, always `basis.project_rows(latents)`.
    pub coeffs: Tensor2,
}

impl SequenceFile {
    pub fn new(
        latents: Tensor2,
        basis: MotionBasis,
        provenance: serde_json::Value,
    ) -> Result<Self> {
        let coeffs = basis.project_rows(&latents)?;
        Ok(SequenceFile {
            provenance,
            basis,
            latents,
            coeffs,
        })
    }

    pub fn frames(&self) -> usize {
        self.latents.rows()
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(MAGIC, VERSION);
        w.tensor(&self.latents).tensor(&self.coeffs);
        w.finish()
    }

    /// Hash of the latents and coefficients only.
    pub fn payload_hash(&self) -> String {
        short_hash(&self.payload_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = BlobWriter::new(MAGIC, VERSION);
        w.str(&self.provenance.to_string())
            .bytes(&self.basis.to_bytes())
            .tensor(&self.latents)
            .tensor(&self.coeffs);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = BlobReader::open(bytes, MAGIC)?;
        if r.version != VERSION {
            return Err(Error::Data(format!(
                "unsupported sequence version {}",
                r.version
            )));
        }
        let provenance = serde_json::from_str(&r.str()?)
            .map_err(|e| Error::Data(format!("sequence provenance: {e}")))?;
        let basis = MotionBasis::from_bytes(r.bytes()?)?;
        let latents = r.tensor()?;
        let coeffs = r.tensor()?;
        if !r.is_exhausted() {
            return Err(Error::Data("trailing bytes in sequence file".into()));
        }
        if latents.cols() != basis.dims() || coeffs.shape() != (latents.rows(), basis.count()) {
            return Err(Error::Data(
                "sequence payload disagrees with its basis".into(),
            ));
        }
        Ok(SequenceFile {
            provenance,
            basis,
            latents,
            coeffs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        SequenceFile::from_bytes(&bytes)
    }

    /// Shifts coefficient `index` by `delta` on every frame and records the
    /// edit in the provenance.
    pub fn edit(&self, index: usize, delta: f64) -> Result<SequenceFile> {
        let mut latents = self.latents.clone();
        for f in 0..latents.rows() {
            let w = MotionLatent(latents.row(f).to_vec());
            let edited = self.basis.edit_lambda(&w, index, delta)?;
            latents.row_mut(f).copy_from_slice(&edited.0);
        }
        let coeffs = if delta == 0.0 {
            self.coeffs.clone()
        } else {
            self.basis.project_rows(&latents)?
        };
        let mut provenance = self.provenance.clone();
        if !provenance.is_object() {
            provenance = serde_json::json!({ "source": provenance });
        }
        let edits = provenance
            .as_object_mut()
            .expect("object")
            .entry("edits")
            .or_insert_with(|| serde_json::json!([]));
        if let Some(list) = edits.as_array_mut() {
            list.push(serde_json::json!({ "index": index, "delta": delta }));
        }
        Ok(SequenceFile {
            provenance,
            basis: self.basis.clone(),
            latents,
            coeffs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_matrix, stream_rng};

    fn sample() -> SequenceFile {
        let basis = MotionBasis::seeded(3, 4, 10).unwrap();
        let latents = normal_matrix(&mut stream_rng(1, 0), 12, 10);
        SequenceFile::new(latents, basis, serde_json::json!({ "seed": 1 })).unwrap()
    }

    #[test]
    fn round_trip() {
        let s = sample();
        let back = SequenceFile::from_bytes(&s.to_bytes()).unwrap();
        assert_eq!(back, s);
        let mut bytes = s.to_bytes();
        bytes[20] ^= 1;
        assert!(SequenceFile::from_bytes(&bytes).is_err());
    }

    #[test]
    fn edit_shifts_one_coefficient() {
        let s = sample();
        let e = s.edit(2, 1.5).unwrap();
        for f in 0..s.frames() {
            for m in 0..4 {
                let want = s.coeffs.get(f, m) + if m == 2 { 1.5 } else { 0.0 };
                assert!((e.coeffs.get(f, m) - want).abs() <= 1e-9);
            }
        }
        assert_eq!(e.provenance["edits"][0]["index"], 2);
        assert_eq!(s.edit(1, 0.0).unwrap().payload_hash(), s.payload_hash());
        assert!(matches!(s.edit(4, 1.0), Err(Error::Index { .. })));
    }
}
