use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EstimatorNet, EstimatorSpec, InputNorm};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DPES";
pub const ESTIMATOR_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    num_classes: usize,
    spec: EstimatorSpec,
    norm: InputNorm,
    fingerprint: String,
}

impl EstimatorNet {
    /// Header, JSON metadata block, then the parameter checkpoint.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&Meta {
            num_classes: self.num_classes,
            spec: self.spec.clone(),
            norm: self.norm.clone(),
            fingerprint: self.fingerprint.clone(),
        })
        .expect("metadata serializes");
        let mut out = Vec::with_capacity(12 + meta.len() + self.num_params() * 8 + 1024);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ESTIMATOR_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        self.store.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut head = [0u8; 12];
        r.read_exact(&mut head)
            .map_err(|_| Error::format("estimator checkpoint", "truncated"))?;
        if &head[..4] != MAGIC {
            return Err(Error::format("estimator checkpoint", "bad magic"));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != ESTIMATOR_FORMAT_VERSION {
            return Err(Error::Version {
                what: "estimator checkpoint",
                found: version,
                expected: ESTIMATOR_FORMAT_VERSION,
            });
        }
        let len = u32::from_le_bytes(head[8..12].try_into().unwrap()) as usize;
        if r.len() < len {
            return Err(Error::format("estimator checkpoint", "truncated"));
        }
        let meta: Meta = serde_json::from_slice(&r[..len])
            .map_err(|e| Error::format("estimator checkpoint", format!("metadata: {e}")))?;
        r = &r[len..];
        let mut net = EstimatorNet::new(&meta.spec, meta.num_classes, 0)?;
        net.store.load_from(&mut r)?;
        net.set_norm(meta.norm)?;
        net.fingerprint = meta.fingerprint;
        if !r.is_empty() {
            return Err(Error::format("estimator checkpoint", "trailing bytes"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(format!("estimator checkpoint {}", path.display()))
            } else {
                Error::io(format!("reading {}", path.display()), e)
            }
        })?;
        Self::from_bytes(&bytes)
    }
}
